//! Dataset construction and partitioning.
//!
//! Builds the training corpus, splits it by label rate into the server's
//! labeled set and the unlabeled pool, and partitions the pool across
//! clients under IID and non-IID regimes. Ground-truth labels ride along on
//! every example for evaluation, but a client shard's training-facing
//! accessors never expose them.

use crate::error::{Error, Result};
use crate::rng;
use byteorder::{BigEndian, ByteOrder};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

const SPLIT_TAG: u64 = 0x5350_4c49; // "SPLI"
const IID_TAG: u64 = 0x4949_4400;
const NONIID_TAG: u64 = 0x4e49_4944;
const SYNTH_TAG: u64 = 0x5359_4e54;

// ---------------------------------------------------------------------------
// Core types
// ---------------------------------------------------------------------------

/// Identity of an example, unique within a dataset.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct ExampleId(pub u64);

/// One data point. The ground-truth label is retained for evaluation and
/// test oracles only; client training reads examples through
/// [`UnlabeledShard`], which never surfaces it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    id: ExampleId,
    features: Vec<f64>,
    true_label: usize,
}

impl Example {
    pub fn new(id: ExampleId, features: Vec<f64>, true_label: usize) -> Self {
        Example {
            id,
            features,
            true_label,
        }
    }

    pub fn id(&self) -> ExampleId {
        self.id
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// Evaluation-only accessor; training code paths must not call this.
    pub fn true_label(&self) -> usize {
        self.true_label
    }
}

/// A fully materialized dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub num_classes: usize,
    pub input_dim: usize,
    examples: Vec<Example>,
}

impl Dataset {
    pub fn new(num_classes: usize, input_dim: usize, examples: Vec<Example>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for ex in &examples {
            if !seen.insert(ex.id) {
                return Err(Error::Invariant(format!("duplicate example id {:?}", ex.id)));
            }
            if ex.features.len() != input_dim {
                return Err(Error::Config(format!(
                    "example {:?} has {} features, dataset expects {input_dim}",
                    ex.id,
                    ex.features.len()
                )));
            }
            if ex.features.iter().any(|f| !f.is_finite()) {
                return Err(Error::Config(format!(
                    "example {:?} has non-finite features",
                    ex.id
                )));
            }
            if num_classes > 0 && ex.true_label >= num_classes {
                return Err(Error::Config(format!(
                    "example {:?} has label {} outside 0..{num_classes}",
                    ex.id, ex.true_label
                )));
            }
        }
        Ok(Dataset {
            num_classes,
            input_dim,
            examples,
        })
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Class histogram over the whole dataset.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for ex in &self.examples {
            counts[ex.true_label] += 1;
        }
        counts
    }
}

/// The server's labeled set; visible labels are the ground truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabeledSet {
    items: Vec<(Example, usize)>,
}

impl LabeledSet {
    fn from_examples(examples: Vec<Example>) -> Self {
        let items = examples
            .into_iter()
            .map(|ex| {
                let label = ex.true_label;
                (ex, label)
            })
            .collect();
        LabeledSet { items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Example, usize)> {
        self.items.iter().map(|(ex, l)| (ex, *l))
    }

    pub fn ids(&self) -> Vec<ExampleId> {
        self.items.iter().map(|(ex, _)| ex.id()).collect()
    }
}

/// Label-free view of an example, the only thing client training sees.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct UnlabeledExample<'a> {
    pub id: ExampleId,
    pub features: &'a [f64],
}

/// One client's slice of the unlabeled pool.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UnlabeledShard {
    client_id: usize,
    examples: Vec<Example>,
}

impl UnlabeledShard {
    pub fn client_id(&self) -> usize {
        self.client_id
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Training-facing iterator: ids and features, no labels.
    pub fn unlabeled(&self) -> impl Iterator<Item = UnlabeledExample<'_>> {
        self.examples.iter().map(|ex| UnlabeledExample {
            id: ex.id,
            features: &ex.features,
        })
    }

    /// Provenance lookup: resolves an id back to its source features.
    pub fn get(&self, id: ExampleId) -> Option<UnlabeledExample<'_>> {
        self.examples
            .iter()
            .find(|ex| ex.id == id)
            .map(|ex| UnlabeledExample {
                id: ex.id,
                features: &ex.features,
            })
    }

    pub fn ids(&self) -> Vec<ExampleId> {
        self.examples.iter().map(|ex| ex.id).collect()
    }

    /// Per-class counts; evaluation/test use only.
    pub fn class_counts_for_audit(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        for ex in &self.examples {
            counts[ex.true_label] += 1;
        }
        counts
    }
}

/// How to carve a dataset into server and client portions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    Iid,
    NonIid,
}

/// Split + partition description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub gamma: f64,
    pub clients: usize,
    pub regime: Regime,
    /// Fraction of all classes each shard draws from (non-IID only).
    pub class_fraction: f64,
    pub seed: u64,
}

impl PartitionPlan {
    pub fn new(
        gamma: f64,
        clients: usize,
        regime: Regime,
        class_fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&gamma) || gamma <= 0.0 {
            return Err(Error::Config(format!("gamma must be in (0,1), got {gamma}")));
        }
        if clients == 0 {
            return Err(Error::Config("client count must be positive".into()));
        }
        if !(0.0..=1.0).contains(&class_fraction) || class_fraction <= 0.0 {
            return Err(Error::Config(format!(
                "class_fraction must be in (0,1], got {class_fraction}"
            )));
        }
        Ok(PartitionPlan {
            gamma,
            clients,
            regime,
            class_fraction,
            seed,
        })
    }
}

/// Runs the plan end to end: label-rate split, then the regime's partition.
pub fn build_partition(
    dataset: &Dataset,
    plan: &PartitionPlan,
) -> Result<(LabeledSet, Vec<UnlabeledShard>)> {
    let n_labeled = (plan.gamma * dataset.len() as f64).round() as usize;
    if n_labeled < dataset.num_classes {
        return Err(Error::Config(format!(
            "gamma * |D| = {n_labeled} cannot cover {} classes",
            dataset.num_classes
        )));
    }
    let (labeled, pool) = split_by_label_rate(dataset, plan.gamma, plan.seed)?;
    let shards = match plan.regime {
        Regime::Iid => partition_iid(pool, plan.clients, plan.seed)?,
        Regime::NonIid => partition_noniid(
            pool,
            dataset.num_classes,
            plan.clients,
            plan.class_fraction,
            plan.seed,
        )?,
    };
    Ok((labeled, shards))
}

// ---------------------------------------------------------------------------
// Label-rate split
// ---------------------------------------------------------------------------

/// Splits the dataset into `round(gamma * |D|)` labeled examples for the
/// server and the remaining unlabeled pool. The draw is stratified so that
/// every class lands in the labeled set whenever the budget allows.
pub fn split_by_label_rate(
    dataset: &Dataset,
    gamma: f64,
    seed: u64,
) -> Result<(LabeledSet, Vec<Example>)> {
    if gamma <= 0.0 || gamma >= 1.0 {
        return Err(Error::Config(format!("gamma must be in (0,1), got {gamma}")));
    }
    let n_total = dataset.len();
    let n_labeled = (gamma * n_total as f64).round() as usize;
    if n_labeled < 1 {
        return Err(Error::Config(format!(
            "gamma {gamma} over {n_total} examples yields no labeled data"
        )));
    }

    // Group indices by class, preserving dataset order.
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (idx, ex) in dataset.examples().iter().enumerate() {
        by_class.entry(ex.true_label).or_default().push(idx);
    }

    // Largest-remainder quota per class, then force minimum one per class
    // when the budget covers all classes.
    let classes: Vec<usize> = by_class.keys().copied().collect();
    let mut quotas: Vec<usize> = Vec::with_capacity(classes.len());
    let mut remainders: Vec<(f64, usize)> = Vec::with_capacity(classes.len());
    for (slot, class) in classes.iter().enumerate() {
        let count = by_class[class].len();
        let ideal = n_labeled as f64 * count as f64 / n_total as f64;
        quotas.push(ideal.floor() as usize);
        remainders.push((ideal - ideal.floor(), slot));
    }
    let assigned: usize = quotas.iter().sum();
    remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    for i in 0..n_labeled.saturating_sub(assigned) {
        quotas[remainders[i % remainders.len()].1] += 1;
    }
    if n_labeled >= classes.len() {
        while let Some(starved) = quotas.iter().position(|&q| q == 0) {
            let donor = quotas
                .iter()
                .enumerate()
                .max_by_key(|(_, &q)| q)
                .map(|(i, _)| i)
                .expect("non-empty");
            if quotas[donor] <= 1 {
                break;
            }
            quotas[donor] -= 1;
            quotas[starved] += 1;
        }
    }
    // Quotas cannot exceed class sizes; spill any excess to classes with room.
    for slot in 0..classes.len() {
        let cap = by_class[&classes[slot]].len();
        if quotas[slot] > cap {
            let mut excess = quotas[slot] - cap;
            quotas[slot] = cap;
            for other in 0..classes.len() {
                if excess == 0 {
                    break;
                }
                let room = by_class[&classes[other]].len() - quotas[other];
                let take = room.min(excess);
                quotas[other] += take;
                excess -= take;
            }
        }
    }

    let mut labeled_idx: Vec<usize> = Vec::with_capacity(n_labeled);
    for (slot, class) in classes.iter().enumerate() {
        let mut idxs = by_class[class].clone();
        let mut class_rng = rng::rng_from(seed, &[SPLIT_TAG, *class as u64]);
        idxs.shuffle(&mut class_rng);
        labeled_idx.extend_from_slice(&idxs[..quotas[slot]]);
    }
    let labeled_set: std::collections::HashSet<usize> = labeled_idx.iter().copied().collect();

    let mut labeled = Vec::with_capacity(labeled_idx.len());
    let mut pool = Vec::with_capacity(n_total - labeled_idx.len());
    for (idx, ex) in dataset.examples().iter().enumerate() {
        if labeled_set.contains(&idx) {
            labeled.push(ex.clone());
        } else {
            pool.push(ex.clone());
        }
    }
    Ok((LabeledSet::from_examples(labeled), pool))
}

// ---------------------------------------------------------------------------
// Client partitions
// ---------------------------------------------------------------------------

/// Deals the pool into `k` shards whose sizes differ by at most one.
pub fn partition_iid(pool: Vec<Example>, k: usize, seed: u64) -> Result<Vec<UnlabeledShard>> {
    if k == 0 {
        return Err(Error::Config("client count must be positive".into()));
    }
    if k > pool.len() {
        return Err(Error::Config(format!(
            "cannot split {} examples across {k} clients",
            pool.len()
        )));
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut shuffle_rng = rng::rng_from(seed, &[IID_TAG]);
    order.shuffle(&mut shuffle_rng);

    let mut shards: Vec<Vec<Example>> = vec![Vec::new(); k];
    for (pos, idx) in order.into_iter().enumerate() {
        shards[pos % k].push(pool[idx].clone());
    }
    Ok(shards
        .into_iter()
        .enumerate()
        .map(|(client_id, examples)| UnlabeledShard {
            client_id,
            examples,
        })
        .collect())
}

/// Non-IID partition: every shard draws from exactly
/// `ceil(class_fraction * num_classes)` classes. Class slots are dealt
/// round-robin over a seeded shuffle of the classes present, so every class
/// is placed; each class's examples are split evenly among its slot holders.
pub fn partition_noniid(
    pool: Vec<Example>,
    num_classes: usize,
    k: usize,
    class_fraction: f64,
    seed: u64,
) -> Result<Vec<UnlabeledShard>> {
    if k == 0 {
        return Err(Error::Config("client count must be positive".into()));
    }
    if class_fraction <= 0.0 || class_fraction > 1.0 {
        return Err(Error::Config(format!(
            "class_fraction must be in (0,1], got {class_fraction}"
        )));
    }
    let per_shard = (class_fraction * num_classes as f64).ceil() as usize;
    if per_shard < 1 {
        return Err(Error::Config(
            "class_fraction yields zero classes per shard".into(),
        ));
    }

    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (idx, ex) in pool.iter().enumerate() {
        by_class.entry(ex.true_label).or_default().push(idx);
    }
    let mut present: Vec<usize> = by_class.keys().copied().collect();
    if per_shard > present.len() {
        return Err(Error::Config(format!(
            "shards need {per_shard} distinct classes but the pool has only {}",
            present.len()
        )));
    }
    if k * per_shard < present.len() {
        return Err(Error::Config(format!(
            "{k} shards x {per_shard} class slots cannot place {} classes",
            present.len()
        )));
    }

    let mut class_rng = rng::rng_from(seed, &[NONIID_TAG]);
    present.shuffle(&mut class_rng);

    // Deal class slots: shard j holds slots j*per_shard .. (j+1)*per_shard,
    // cycling through the shuffled class list.
    let mut holders: BTreeMap<usize, Vec<usize>> = BTreeMap::new(); // class -> shard ids
    for shard in 0..k {
        for slot in 0..per_shard {
            let class = present[(shard * per_shard + slot) % present.len()];
            holders.entry(class).or_default().push(shard);
        }
    }

    let mut shards: Vec<Vec<Example>> = vec![Vec::new(); k];
    for (&class, shard_ids) in &holders {
        let mut idxs = by_class[&class].clone();
        if idxs.len() < shard_ids.len() {
            return Err(Error::Config(format!(
                "class {class} has {} examples for {} shard slots",
                idxs.len(),
                shard_ids.len()
            )));
        }
        let mut chunk_rng = rng::rng_from(seed, &[NONIID_TAG, class as u64]);
        idxs.shuffle(&mut chunk_rng);
        // Even chunks, sizes differing by at most one.
        let n = idxs.len();
        let parts = shard_ids.len();
        let base = n / parts;
        let extra = n % parts;
        let mut cursor = 0;
        for (block, &shard) in shard_ids.iter().enumerate() {
            let size = base + usize::from(block < extra);
            for &idx in &idxs[cursor..cursor + size] {
                shards[shard].push(pool[idx].clone());
            }
            cursor += size;
        }
    }

    Ok(shards
        .into_iter()
        .enumerate()
        .map(|(client_id, examples)| UnlabeledShard {
            client_id,
            examples,
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Loaders and generators
// ---------------------------------------------------------------------------

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

fn read_u32_at(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    if bytes.len() < offset + 4 {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            msg: format!("truncated while reading {what}: need {} bytes", offset + 4),
        });
    }
    Ok(BigEndian::read_u32(&bytes[offset..offset + 4]))
}

/// Loads an IDX image/label pair into a dataset with pixel features scaled
/// to `[0, 1]`.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = read_file(images_path)?;
    let magic = read_u32_at(&img, 0, "image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let count = read_u32_at(&img, 4, "image count")? as usize;
    let rows = read_u32_at(&img, 8, "image rows")? as usize;
    let cols = read_u32_at(&img, 12, "image cols")? as usize;
    let pixels = rows * cols;
    let expected = 16 + count * pixels;
    if img.len() != expected {
        return Err(Error::Format {
            offset: img.len().min(expected) as u64,
            msg: format!(
                "image file declares {count} x {rows}x{cols} ({expected} bytes), has {}",
                img.len()
            ),
        });
    }

    let lab = read_file(labels_path)?;
    let magic = read_u32_at(&lab, 0, "label magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let lab_count = read_u32_at(&lab, 4, "label count")? as usize;
    let lab_expected = 8 + lab_count;
    if lab.len() != lab_expected {
        return Err(Error::Format {
            offset: lab.len().min(lab_expected) as u64,
            msg: format!(
                "label file declares {lab_count} labels ({lab_expected} bytes), has {}",
                lab.len()
            ),
        });
    }
    if lab_count != count {
        return Err(Error::Format {
            offset: 4,
            msg: format!("image count {count} != label count {lab_count}"),
        });
    }

    let mut examples = Vec::with_capacity(count);
    let num_classes = if count == 0 { 0 } else { 10 };
    for i in 0..count {
        let start = 16 + i * pixels;
        let features: Vec<f64> = img[start..start + pixels]
            .iter()
            .map(|&b| f64::from(b) / 255.0)
            .collect();
        let label = lab[8 + i] as usize;
        if label >= 10 {
            return Err(Error::Format {
                offset: (8 + i) as u64,
                msg: format!("label byte {label} outside 0..10"),
            });
        }
        examples.push(Example::new(ExampleId(i as u64), features, label));
    }
    Dataset::new(num_classes, pixels, examples)
}

/// Synthetic Gaussian clusters: unit covariance, one cluster per class,
/// means on a circle in the first two coordinates with adjacent means
/// `separation` apart.
pub fn gen_synthetic(
    num_classes: usize,
    n_per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::Config(format!(
            "synthetic data needs >= 2 classes, got {num_classes}"
        )));
    }
    if dim < 2 {
        return Err(Error::Config(format!(
            "synthetic data needs dim >= 2, got {dim}"
        )));
    }
    if !separation.is_finite() || separation < 0.0 {
        return Err(Error::Config(format!("bad separation {separation}")));
    }
    let radius = separation / (2.0 * (std::f64::consts::PI / num_classes as f64).sin());
    let mut rng = rng::rng_from(seed, &[SYNTH_TAG]);
    let normal = StandardNormal;
    let mut examples = Vec::with_capacity(num_classes * n_per_class);
    let mut next_id = 0u64;
    for class in 0..num_classes {
        let angle = 2.0 * std::f64::consts::PI * class as f64 / num_classes as f64;
        let mut mean = vec![0.0; dim];
        mean[0] = radius * angle.cos();
        mean[1] = radius * angle.sin();
        for _ in 0..n_per_class {
            let features: Vec<f64> = mean
                .iter()
                .map(|&m| m + <StandardNormal as Distribution<f64>>::sample(&normal, &mut rng))
                .collect();
            examples.push(Example::new(ExampleId(next_id), features, class));
            next_id += 1;
        }
    }
    Dataset::new(num_classes, dim, examples)
}

/// Writes the dataset as CSV: `id,label,f0,...`.
pub fn export_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str("id,label");
    for i in 0..dataset.input_dim {
        out.push_str(&format!(",f{i}"));
    }
    out.push('\n');
    for ex in dataset.examples() {
        out.push_str(&format!("{},{}", ex.id().0, ex.true_label()));
        for f in ex.features() {
            out.push_str(&format!(",{f}"));
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
