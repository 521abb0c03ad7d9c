//! Server-side coordination: supervised refinement, cosine-gated
//! aggregation, and client selection.
//!
//! Each round the server trains the broadcast global weights on its labeled
//! set to obtain the reference weights, and later averages exactly those
//! client deltas whose direction is cosine-aligned with its own supervised
//! direction. Cosine carries its own normalization, so the gate is
//! invariant to the scale of either delta.

use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::model::{
    backward, sgd_step, LossTarget, LossTerm, ModelArch, ParamVector,
};
use crate::rng;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

const SERVER_TAG: u64 = 0x5352_5652; // "SRVR"
const SELECT_TAG: u64 = 0x53454c43; // "SELC"

/// Default gate threshold: a client is included iff its cosine similarity
/// is at least this value.
pub const DEFAULT_GATE_THRESHOLD: f64 = 0.0;

// ---------------------------------------------------------------------------
// Supervised refinement
// ---------------------------------------------------------------------------

/// Trains `epochs` passes of minibatch SGD over the labeled set, starting
/// from `start`, minimizing cross-entropy against the ground-truth labels.
/// `start` itself is not modified; `epochs = 0` returns it unchanged.
pub fn server_supervised_update(
    start: &ParamVector,
    arch: &ModelArch,
    labeled: &LabeledSet,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
    round: u64,
) -> Result<ParamVector> {
    if labeled.is_empty() {
        return Err(Error::Config("server labeled set is empty".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let items: Vec<(&[f64], usize)> = labeled
        .iter()
        .map(|(ex, label)| (ex.features(), label))
        .collect();
    let mut params = start.clone();
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        let mut epoch_rng = rng::rng_from(seed, &[SERVER_TAG, round, epoch as u64]);
        order.shuffle(&mut epoch_rng);
        for batch in order.chunks(batch_size) {
            let weight = 1.0 / batch.len() as f64;
            let terms: Vec<LossTerm> = batch
                .iter()
                .map(|&idx| LossTerm {
                    features: items[idx].0.to_vec(),
                    target: LossTarget::Label(items[idx].1),
                    weight,
                })
                .collect();
            let out = backward(&params, arch, &terms)?;
            if !out.loss.is_finite() {
                return Err(Error::Training(format!(
                    "server: non-finite loss at round {round} epoch {epoch}"
                )));
            }
            params = sgd_step(&params, &out.grad, lr)?;
        }
    }
    Ok(params)
}

// ---------------------------------------------------------------------------
// Cosine gate and aggregation
// ---------------------------------------------------------------------------

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Cosine similarity between a client's delta and the server's supervised
/// delta, plus the inclusion bit at `threshold`.
///
/// Degenerate directions: a zero server delta opens every gate (there is no
/// direction to test against), and a zero client delta scores 1 (a no-op
/// update is harmless).
pub fn cosine_gate(
    upload: &ParamVector,
    global: &ParamVector,
    server: &ParamVector,
    threshold: f64,
) -> (f64, bool) {
    let u = upload.delta(global);
    let v = server.delta(global);
    let nu = norm(&u);
    let nv = norm(&v);
    if nv == 0.0 {
        return (1.0, true);
    }
    if nu == 0.0 {
        return (1.0, 1.0 >= threshold);
    }
    let s = dot(&u, &v) / (nu * nv);
    (s, s >= threshold)
}

/// One client's weights as received by the coordinator.
#[derive(Debug, Clone)]
pub struct ClientUpload {
    pub client_id: usize,
    pub params: ParamVector,
}

/// Gate decision for one upload.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct GateRecord {
    pub client_id: usize,
    pub similarity: f64,
    pub included: bool,
}

/// What the round's aggregation did.
#[derive(Debug, Clone, Serialize)]
pub struct AggregationReport {
    pub gates: Vec<GateRecord>,
    /// Euclidean norm of the applied update.
    pub delta_norm: f64,
    pub included_count: usize,
}

/// Gated aggregation: the new global weights are the old ones plus the
/// unweighted mean of the included client deltas. When no client passes the
/// gate the update is zero and the global weights stand.
pub fn aggregate(
    global: &ParamVector,
    server: &ParamVector,
    uploads: &[ClientUpload],
    threshold: f64,
) -> Result<(ParamVector, AggregationReport)> {
    if uploads.is_empty() {
        return Err(Error::Protocol("aggregate called with no uploads".into()));
    }
    for up in uploads {
        if up.params.len() != global.len() {
            return Err(Error::Protocol(format!(
                "client {} uploaded {} parameters, expected {}",
                up.client_id,
                up.params.len(),
                global.len()
            )));
        }
    }

    let mut gates = Vec::with_capacity(uploads.len());
    let mut delta = vec![0.0; global.len()];
    let mut included = 0usize;
    for up in uploads {
        let (similarity, include) = cosine_gate(&up.params, global, server, threshold);
        gates.push(GateRecord {
            client_id: up.client_id,
            similarity,
            included: include,
        });
        if include {
            included += 1;
            for (d, (p, g)) in delta
                .iter_mut()
                .zip(up.params.values().iter().zip(global.values().iter()))
            {
                *d += p - g;
            }
        }
    }
    if included > 0 {
        for d in delta.iter_mut() {
            *d /= included as f64;
        }
    }

    let delta_norm = norm(&delta);
    let next = ParamVector::from_raw(
        global
            .values()
            .iter()
            .zip(delta.iter())
            .map(|(g, d)| g + d)
            .collect(),
    );
    Ok((
        next,
        AggregationReport {
            gates,
            delta_norm,
            included_count: included,
        },
    ))
}

// ---------------------------------------------------------------------------
// Client selection
// ---------------------------------------------------------------------------

/// Uniformly selects `m` distinct clients out of `k`, deterministic per
/// `(seed, round)`. Selecting everyone returns the ids in natural order.
pub fn select_clients(k: usize, m: usize, seed: u64, round: u64) -> Result<Vec<usize>> {
    if m > k {
        return Err(Error::Config(format!(
            "cannot select {m} clients out of {k}"
        )));
    }
    if m == k {
        return Ok((0..k).collect());
    }
    // Partial Fisher-Yates: the first m slots end up a uniform sample
    // without replacement.
    let mut ids: Vec<usize> = (0..k).collect();
    let mut rng = rng::rng_from(seed, &[SELECT_TAG, round]);
    for i in 0..m {
        let j = rng.random_range(i..k);
        ids.swap(i, j);
    }
    ids.truncate(m);
    Ok(ids)
}
