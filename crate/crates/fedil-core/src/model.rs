//! Feed-forward classifier with hand-derived gradients.
//!
//! A small MLP (tanh hidden layers, softmax output) over a flat `f64`
//! parameter vector. The flat vector is the unit of all aggregation and
//! cosine geometry, so the layout is fixed: for each layer, row-major
//! weights `(out_dim x in_dim)` followed by the bias, layers in order from
//! input to output.
//!
//! Gradients are exact analytic backprop for two loss families, both of
//! which reduce to `softmax(z) - target` at the output layer:
//! cross-entropy against a hard label, and KL(reference || prediction)
//! against a fixed reference distribution.

use crate::error::{Error, Result};
use crate::rng;
use byteorder::{ByteOrder, LittleEndian};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// Probabilities are floored at this value inside every `log`.
pub const PROB_FLOOR: f64 = 1e-12;

const CHECKPOINT_MAGIC: &[u8; 4] = b"FDIL";
const CHECKPOINT_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Architecture and parameter containers
// ---------------------------------------------------------------------------

/// Layer sizes of the classifier. The parameter count is a deterministic
/// function of this description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelArch {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
}

impl ModelArch {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        if hidden_dims.contains(&0) {
            return Err(Error::Config("hidden layer sizes must be positive".into()));
        }
        if num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be >= 2, got {num_classes}"
            )));
        }
        Ok(ModelArch {
            input_dim,
            hidden_dims,
            num_classes,
        })
    }

    /// `(in_dim, out_dim)` per layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut prev = self.input_dim;
        for &h in &self.hidden_dims {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.num_classes));
        dims
    }

    /// Total number of parameters (weights + biases over all layers).
    pub fn param_count(&self) -> usize {
        self.layer_dims()
            .iter()
            .map(|&(i, o)| i * o + o)
            .sum()
    }
}

/// Flat model weights; the unit of aggregation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, arch: &ModelArch) -> Result<Self> {
        if values.len() != arch.param_count() {
            return Err(Error::Config(format!(
                "parameter vector has length {}, architecture needs {}",
                values.len(),
                arch.param_count()
            )));
        }
        Ok(ParamVector { values })
    }

    /// All-zero parameters for `arch`.
    pub fn zeros(arch: &ModelArch) -> Self {
        ParamVector {
            values: vec![0.0; arch.param_count()],
        }
    }

    /// Wraps raw values without checking them against an architecture.
    pub fn from_raw(values: Vec<f64>) -> Self {
        ParamVector { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Entrywise difference `self - other`.
    pub fn delta(&self, other: &ParamVector) -> Vec<f64> {
        self.values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| a - b)
            .collect()
    }
}

/// Softmax output; entries in `[0, 1]` summing to 1 within 1e-9.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbDist {
    probs: Vec<f64>,
}

impl ProbDist {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Input("probability vector is empty".into()));
        }
        if probs.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Input(format!(
                "probability outside [0, 1] in {probs:?}"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Input(format!(
                "probabilities sum to {sum}, expected 1 within 1e-9"
            )));
        }
        Ok(ProbDist { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Index of the largest probability (first one on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn max_prob(&self) -> f64 {
        self.probs[self.argmax()]
    }
}

/// Gradient of a scalar loss with respect to a `ParamVector`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradVector {
    values: Vec<f64>,
}

impl GradVector {
    pub fn zeros(len: usize) -> Self {
        GradVector {
            values: vec![0.0; len],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

// ---------------------------------------------------------------------------
// Layered views over the flat vector
// ---------------------------------------------------------------------------

/// One layer's weights expanded out of the flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `(out_dim x in_dim)`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Expands a flat parameter vector into per-layer weight blocks.
pub fn unflatten(arch: &ModelArch, params: &ParamVector) -> Result<Vec<LayerWeights>> {
    if params.len() != arch.param_count() {
        return Err(Error::Config(format!(
            "parameter vector has length {}, architecture needs {}",
            params.len(),
            arch.param_count()
        )));
    }
    let mut layers = Vec::new();
    let mut off = 0;
    for (in_dim, out_dim) in arch.layer_dims() {
        let w_len = in_dim * out_dim;
        let weights = params.values()[off..off + w_len].to_vec();
        off += w_len;
        let bias = params.values()[off..off + out_dim].to_vec();
        off += out_dim;
        layers.push(LayerWeights {
            in_dim,
            out_dim,
            weights,
            bias,
        });
    }
    Ok(layers)
}

/// Packs per-layer blocks back into a flat vector; inverse of [`unflatten`].
pub fn flatten(layers: &[LayerWeights]) -> ParamVector {
    let mut values = Vec::new();
    for layer in layers {
        values.extend_from_slice(&layer.weights);
        values.extend_from_slice(&layer.bias);
    }
    ParamVector { values }
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.iter().map(|&e| e / sum).collect()
}

/// Post-activation values of every layer; `layers.last()` is the softmax
/// output. Kept for backprop.
struct ForwardTrace {
    activations: Vec<Vec<f64>>,
}

fn forward_trace(params: &ParamVector, arch: &ModelArch, x: &[f64]) -> Result<ForwardTrace> {
    if x.len() != arch.input_dim {
        return Err(Error::Config(format!(
            "input has dimension {}, architecture expects {}",
            x.len(),
            arch.input_dim
        )));
    }
    if params.len() != arch.param_count() {
        return Err(Error::Config(format!(
            "parameter vector has length {}, architecture needs {}",
            params.len(),
            arch.param_count()
        )));
    }
    let dims = arch.layer_dims();
    let n_layers = dims.len();
    let mut activations = Vec::with_capacity(n_layers);
    let mut cur: Vec<f64> = x.to_vec();
    let mut off = 0;
    for (l, &(in_dim, out_dim)) in dims.iter().enumerate() {
        let w = &params.values()[off..off + in_dim * out_dim];
        let b = &params.values()[off + in_dim * out_dim..off + in_dim * out_dim + out_dim];
        off += in_dim * out_dim + out_dim;
        let mut z = vec![0.0; out_dim];
        for (o, zo) in z.iter_mut().enumerate() {
            let row = &w[o * in_dim..(o + 1) * in_dim];
            let mut acc = b[o];
            for (wi, xi) in row.iter().zip(cur.iter()) {
                acc += wi * xi;
            }
            *zo = acc;
        }
        let a = if l + 1 == n_layers {
            softmax(&z)
        } else {
            z.iter().map(|&v| v.tanh()).collect()
        };
        activations.push(a.clone());
        cur = a;
    }
    Ok(ForwardTrace { activations })
}

/// Evaluates the classifier on one input.
pub fn forward(params: &ParamVector, arch: &ModelArch, x: &[f64]) -> Result<ProbDist> {
    let trace = forward_trace(params, arch, x)?;
    ProbDist::new(trace.activations.last().expect("at least one layer").clone())
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// `-log p[label]`, with the probability floored at [`PROB_FLOOR`].
pub fn cross_entropy(pred: &ProbDist, label: usize) -> Result<f64> {
    if label >= pred.len() {
        return Err(Error::Input(format!(
            "label {label} out of range for {} classes",
            pred.len()
        )));
    }
    Ok(-(pred.probs()[label].max(PROB_FLOOR)).ln())
}

/// `KL(p || q) = sum p_i log(p_i / q_i)` with `0 log 0 = 0` and both
/// arguments floored at [`PROB_FLOOR`] inside the log.
pub fn kl_divergence(p: &ProbDist, q: &ProbDist) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Input(format!(
            "distribution lengths differ: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    let mut total = 0.0;
    for (&pi, &qi) in p.probs().iter().zip(q.probs().iter()) {
        if pi > 0.0 {
            total += pi * (pi.max(PROB_FLOOR) / qi.max(PROB_FLOOR)).ln();
        }
    }
    Ok(total.max(0.0))
}

/// What a single training example is penalized against.
#[derive(Debug, Clone)]
pub enum LossTarget {
    /// Cross-entropy against a hard class label.
    Label(usize),
    /// `KL(reference || prediction)`; the reference is held fixed.
    Reference(ProbDist),
}

/// One weighted example in a training objective.
#[derive(Debug, Clone)]
pub struct LossTerm {
    pub features: Vec<f64>,
    pub target: LossTarget,
    pub weight: f64,
}

/// Scalar loss plus its exact gradient.
#[derive(Debug, Clone)]
pub struct Backward {
    pub loss: f64,
    pub grad: GradVector,
}

/// Exact gradient of `sum_i weight_i * loss_i` over the given terms.
///
/// Both loss families share the output-layer gradient `softmax(z) - t`
/// (t = one-hot label, or the fixed reference distribution), which then
/// backpropagates through the tanh layers.
pub fn backward(params: &ParamVector, arch: &ModelArch, terms: &[LossTerm]) -> Result<Backward> {
    if terms.is_empty() {
        return Err(Error::Input("backward called with an empty batch".into()));
    }
    let dims = arch.layer_dims();
    let n_layers = dims.len();
    let mut grad = vec![0.0; arch.param_count()];
    let mut total_loss = 0.0;

    // Byte offsets of each layer block in the flat vector.
    let mut offsets = Vec::with_capacity(n_layers);
    let mut off = 0;
    for &(in_dim, out_dim) in &dims {
        offsets.push(off);
        off += in_dim * out_dim + out_dim;
    }

    for term in terms {
        let trace = forward_trace(params, arch, &term.features)?;
        let probs = trace.activations.last().expect("at least one layer");
        let pred = ProbDist::new(probs.clone())?;

        let (loss, target): (f64, Vec<f64>) = match &term.target {
            LossTarget::Label(label) => {
                let loss = cross_entropy(&pred, *label)?;
                let mut onehot = vec![0.0; pred.len()];
                onehot[*label] = 1.0;
                (loss, onehot)
            }
            LossTarget::Reference(reference) => {
                let loss = kl_divergence(reference, &pred)?;
                (loss, reference.probs().to_vec())
            }
        };
        total_loss += term.weight * loss;

        // Output-layer error, already scaled by the term weight.
        let mut delta: Vec<f64> = probs
            .iter()
            .zip(target.iter())
            .map(|(&q, &t)| term.weight * (q - t))
            .collect();

        for l in (0..n_layers).rev() {
            let (in_dim, out_dim) = dims[l];
            let base = offsets[l];
            let input: &[f64] = if l == 0 {
                &term.features
            } else {
                &trace.activations[l - 1]
            };
            for o in 0..out_dim {
                let d = delta[o];
                let row = base + o * in_dim;
                for (i, &xi) in input.iter().enumerate() {
                    grad[row + i] += d * xi;
                }
                grad[base + in_dim * out_dim + o] += d;
            }
            if l > 0 {
                // delta_{l-1} = (W_l^T delta_l) * tanh'(z_{l-1}), with
                // tanh'(z) = 1 - a^2 for a = tanh(z).
                let w = &params.values()[base..base + in_dim * out_dim];
                let prev_act = &trace.activations[l - 1];
                let mut prev_delta = vec![0.0; in_dim];
                for (o, &d) in delta.iter().enumerate() {
                    let row = &w[o * in_dim..(o + 1) * in_dim];
                    for (i, pd) in prev_delta.iter_mut().enumerate() {
                        *pd += row[i] * d;
                    }
                }
                for (pd, &a) in prev_delta.iter_mut().zip(prev_act.iter()) {
                    *pd *= 1.0 - a * a;
                }
                delta = prev_delta;
            }
        }
    }

    Ok(Backward {
        loss: total_loss,
        grad: GradVector { values: grad },
    })
}

/// One step of plain SGD: `params - lr * grad`.
pub fn sgd_step(params: &ParamVector, grad: &GradVector, lr: f64) -> Result<ParamVector> {
    if params.len() != grad.len() {
        return Err(Error::Input(format!(
            "parameter/gradient length mismatch: {} vs {}",
            params.len(),
            grad.len()
        )));
    }
    if !lr.is_finite() || lr < 0.0 {
        return Err(Error::Input(format!("learning rate must be >= 0, got {lr}")));
    }
    if !grad.is_finite() {
        return Err(Error::Training("non-finite gradient".into()));
    }
    let values = params
        .values()
        .iter()
        .zip(grad.values().iter())
        .map(|(p, g)| p - lr * g)
        .collect();
    Ok(ParamVector { values })
}

/// Seeded initialization: per layer, weights uniform in `[-a, a]` with
/// `a = 1 / sqrt(fan_in)`, biases zero.
pub fn init_params(arch: &ModelArch, seed: u64) -> ParamVector {
    let mut rng = rng::rng_from(seed, &[0x494e_4954]); // "INIT"
    let mut values = Vec::with_capacity(arch.param_count());
    for (in_dim, out_dim) in arch.layer_dims() {
        let a = 1.0 / (in_dim as f64).sqrt();
        for _ in 0..in_dim * out_dim {
            values.push(rng.random_range(-a..a));
        }
        values.resize(values.len() + out_dim, 0.0);
    }
    ParamVector { values }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Writes the binary checkpoint: 16-byte header (magic `FDIL`, version u32,
/// param count u64, both little-endian) followed by the values as
/// little-endian f64.
pub fn save_checkpoint(path: &Path, params: &ParamVector) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + params.len() * 8);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    let mut word = [0u8; 4];
    LittleEndian::write_u32(&mut word, CHECKPOINT_VERSION);
    buf.extend_from_slice(&word);
    let mut count = [0u8; 8];
    LittleEndian::write_u64(&mut count, params.len() as u64);
    buf.extend_from_slice(&count);
    for &v in params.values() {
        let mut val = [0u8; 8];
        LittleEndian::write_f64(&mut val, v);
        buf.extend_from_slice(&val);
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a binary checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<ParamVector> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            msg: format!("checkpoint header needs 16 bytes, file has {}", bytes.len()),
        });
    }
    if &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {:?}, expected {CHECKPOINT_MAGIC:?}", &bytes[0..4]),
        });
    }
    let version = LittleEndian::read_u32(&bytes[4..8]);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported checkpoint version {version}"),
        });
    }
    let count = LittleEndian::read_u64(&bytes[8..16]) as usize;
    let expected = 16 + count * 8;
    if bytes.len() != expected {
        return Err(Error::Format {
            offset: bytes.len().min(expected) as u64,
            msg: format!(
                "checkpoint declares {count} parameters ({expected} bytes), file has {} bytes",
                bytes.len()
            ),
        });
    }
    let values = bytes[16..]
        .chunks_exact(8)
        .map(LittleEndian::read_f64)
        .collect();
    Ok(ParamVector { values })
}

#[derive(Serialize, Deserialize)]
struct CheckpointJson {
    param_count: usize,
    values: Vec<f64>,
}

/// JSON export of a parameter vector, for inspection.
pub fn export_checkpoint_json(path: &Path, params: &ParamVector) -> Result<()> {
    let doc = CheckpointJson {
        param_count: params.len(),
        values: params.values().to_vec(),
    };
    let text = serde_json::to_string_pretty(&doc)
        .map_err(|e| Error::Invariant(format!("checkpoint serialization failed: {e}")))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
