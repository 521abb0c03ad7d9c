//! Client-side local training.
//!
//! Each selected client trains from the broadcast global weights on three
//! loss pieces: a confidence-gated cross-entropy between its strong-view
//! predictions and weak-view pseudo-labels, a KL pull of its weak-view
//! predictions toward the server reference model, and cross-entropy on its
//! frozen pseudo-label set. After local training it runs one credibility
//! pass over the shard: an example whose weak-view prediction clears the
//! confidence threshold, agrees with the server reference, and keeps the
//! same class accumulates consecutive hits; reaching the promotion
//! threshold freezes its label into the append-only pseudo-label set.
//!
//! Counters advance only on rounds the client participates in, and a
//! client's state persists across rounds whether or not it is selected.

use crate::augment::{strong_augment, weak_augment, AugmentParams, AugmentedView};
use crate::data::{ExampleId, UnlabeledShard};
use crate::error::{Error, Result};
use crate::model::{
    backward, cross_entropy, forward, kl_divergence, sgd_step, LossTarget, LossTerm, ModelArch,
    ParamVector,
};
use crate::rng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

const VIEW_TAG: u64 = 0x5649_4557; // "VIEW"
const EPOCH_TAG: u64 = 0x4550_4f43; // "EPOC"

// ---------------------------------------------------------------------------
// Credibility tracking
// ---------------------------------------------------------------------------

/// Per-example promotion counters.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CredEntry {
    /// Consecutive participated rounds in which the example qualified.
    pub consecutive_hits: u32,
    /// Class the current hit streak is committed to; `None` iff the streak
    /// is empty.
    pub candidate_label: Option<usize>,
    /// Cumulative count of qualifying rounds; never reset.
    pub agreement_count: u32,
}

/// Counters for every not-yet-promoted example of one client.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CredibilityTracker {
    entries: BTreeMap<ExampleId, CredEntry>,
}

/// Outcome of one credibility pass for one example.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ExampleDiag {
    pub id: ExampleId,
    pub weak_max_prob: f64,
    pub weak_argmax: usize,
    pub server_argmax: usize,
    /// `weak_max_prob >= tau`.
    pub gate_open: bool,
}

/// An example that cleared both promotion thresholds, with its frozen label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Promotion {
    pub id: ExampleId,
    pub label: usize,
}

impl CredibilityTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: ExampleId) -> Option<&CredEntry> {
        self.entries.get(&id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Advances the counters for one participated round and returns the
    /// examples ready for promotion.
    ///
    /// An example qualifies when its weak-view confidence clears `tau`, its
    /// weak argmax matches the server argmax, and the class matches the
    /// current streak (or starts one). Qualifying increments both counters;
    /// anything else resets the streak and clears the candidate label, while
    /// the cumulative agreement count stays. Promotion requires
    /// `consecutive_hits >= promote_t` and `agreement_count >= agree_t`;
    /// `thresholds = None` disables promotion but still advances counters.
    pub fn update(
        &mut self,
        diagnostics: &[ExampleDiag],
        tau: f64,
        thresholds: Option<(u32, u32)>,
    ) -> Vec<Promotion> {
        let mut promotions = Vec::new();
        for diag in diagnostics {
            let entry = self.entries.entry(diag.id).or_default();
            let qualifies = diag.weak_max_prob >= tau
                && diag.weak_argmax == diag.server_argmax
                && entry
                    .candidate_label
                    .is_none_or(|label| label == diag.weak_argmax);
            if qualifies {
                entry.consecutive_hits += 1;
                entry.agreement_count += 1;
                entry.candidate_label = Some(diag.weak_argmax);
            } else {
                entry.consecutive_hits = 0;
                entry.candidate_label = None;
            }
            if let Some((promote_t, agree_t)) = thresholds {
                if entry.consecutive_hits >= promote_t && entry.agreement_count >= agree_t {
                    promotions.push(Promotion {
                        id: diag.id,
                        label: entry.candidate_label.expect("streak is non-empty"),
                    });
                }
            }
        }
        promotions
    }

    /// Drops counters for promoted examples; they leave the unsupervised
    /// pool and are no longer tracked.
    fn retire(&mut self, ids: &[ExampleId]) {
        for id in ids {
            self.entries.remove(id);
        }
    }
}

// ---------------------------------------------------------------------------
// Pseudo-label set
// ---------------------------------------------------------------------------

/// A frozen pseudo-label and the round that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoEntry {
    pub label: usize,
    pub created_round: u64,
}

/// Append-only set of promoted examples; a frozen label never changes.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    entries: BTreeMap<ExampleId, PseudoEntry>,
}

impl PseudoLabelSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, id: ExampleId) -> bool {
        self.entries.contains_key(&id)
    }

    pub fn get(&self, id: ExampleId) -> Option<&PseudoEntry> {
        self.entries.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ExampleId, PseudoEntry)> + '_ {
        self.entries.iter().map(|(id, e)| (*id, *e))
    }
}

/// Enrolls promoted examples with their frozen labels. Promoting an id that
/// is already frozen is an internal invariant violation.
pub fn promote(
    pseudo_set: &mut PseudoLabelSet,
    promotions: &[Promotion],
    round: u64,
) -> Result<()> {
    for p in promotions {
        if pseudo_set.entries.contains_key(&p.id) {
            return Err(Error::Invariant(format!(
                "example {:?} promoted twice (frozen label would change)",
                p.id
            )));
        }
        pseudo_set.entries.insert(
            p.id,
            PseudoEntry {
                label: p.label,
                created_round: round,
            },
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Scalar unsupervised losses plus the per-example diagnostics behind them.
#[derive(Debug, Clone)]
pub struct UnsupLosses {
    /// Mean gated cross-entropy of strong-view predictions against weak-view
    /// pseudo-labels; zero when every gate is closed.
    pub xi_a: f64,
    /// Mean KL from the server reference to the weak-view prediction.
    pub xi_b: f64,
    pub diagnostics: Vec<ExampleDiag>,
}

/// Evaluates the two unsupervised losses on weak/strong view pairs.
///
/// For each pair, the weak view is scored with `params` (prediction) and
/// with `server_params` (reference). The gate opens when the weak-view
/// confidence reaches `tau`; only gated examples contribute to `xi_a`,
/// while every example contributes its KL term to `xi_b`.
pub fn compute_unsup_losses(
    params: &ParamVector,
    server_params: &ParamVector,
    arch: &ModelArch,
    pairs: &[(AugmentedView, AugmentedView)],
    tau: f64,
) -> Result<UnsupLosses> {
    let mut diagnostics = Vec::with_capacity(pairs.len());
    let mut ce_sum = 0.0;
    let mut gated = 0usize;
    let mut kl_sum = 0.0;
    for (weak, strong) in pairs {
        if weak.source_id != strong.source_id {
            return Err(Error::Input(format!(
                "view pair mixes sources {:?} and {:?}",
                weak.source_id, strong.source_id
            )));
        }
        let weak_pred = forward(params, arch, &weak.view)?;
        let reference = forward(server_params, arch, &weak.view)?;
        let diag = ExampleDiag {
            id: weak.source_id,
            weak_max_prob: weak_pred.max_prob(),
            weak_argmax: weak_pred.argmax(),
            server_argmax: reference.argmax(),
            gate_open: weak_pred.max_prob() >= tau,
        };
        if diag.gate_open {
            let strong_pred = forward(params, arch, &strong.view)?;
            ce_sum += cross_entropy(&strong_pred, diag.weak_argmax)?;
            gated += 1;
        }
        kl_sum += kl_divergence(&reference, &weak_pred)?;
        diagnostics.push(diag);
    }
    Ok(UnsupLosses {
        xi_a: if gated == 0 { 0.0 } else { ce_sum / gated as f64 },
        xi_b: if pairs.is_empty() {
            0.0
        } else {
            kl_sum / pairs.len() as f64
        },
        diagnostics,
    })
}

/// Mean cross-entropy of the current model against the frozen labels,
/// evaluated on the original (un-augmented) promoted examples. Zero when
/// the set is empty.
pub fn compute_pseudo_loss(
    params: &ParamVector,
    arch: &ModelArch,
    shard: &UnlabeledShard,
    pseudo_set: &PseudoLabelSet,
) -> Result<f64> {
    if pseudo_set.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (id, entry) in pseudo_set.iter() {
        let ex = shard.get(id).ok_or_else(|| {
            Error::Invariant(format!("pseudo-label id {id:?} missing from shard"))
        })?;
        let pred = forward(params, arch, ex.features)?;
        total += cross_entropy(&pred, entry.label)?;
    }
    Ok(total / pseudo_set.len() as f64)
}

// ---------------------------------------------------------------------------
// Round execution
// ---------------------------------------------------------------------------

/// Knobs for one client round.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSettings {
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Confidence threshold for the pseudo-label gate.
    pub tau: f64,
    /// Consecutive-hit threshold; 0 disables promotion.
    pub promote_t: u32,
    /// Agreement-count threshold; 0 means "same as `promote_t`".
    pub agree_t: u32,
    pub coef_unsup_ce: f64,
    pub coef_kl: f64,
    pub coef_pseudo: f64,
    /// When false the credibility pass is skipped entirely.
    pub credibility_enabled: bool,
    pub augment: AugmentParams,
}

impl TrainSettings {
    fn promotion_thresholds(&self) -> Option<(u32, u32)> {
        if self.promote_t == 0 {
            None
        } else {
            let agree = if self.agree_t == 0 {
                self.promote_t
            } else {
                self.agree_t
            };
            Some((self.promote_t, agree))
        }
    }
}

/// Everything one client carries across rounds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClientState {
    pub client_id: usize,
    pub shard: UnlabeledShard,
    pub tracker: CredibilityTracker,
    pub pseudo_set: PseudoLabelSet,
    pub seed: u64,
}

impl ClientState {
    pub fn new(shard: UnlabeledShard, seed: u64) -> Self {
        ClientState {
            client_id: shard.client_id(),
            shard,
            tracker: CredibilityTracker::new(),
            pseudo_set: PseudoLabelSet::new(),
            seed,
        }
    }

    /// Debug dump of the mutable state: counters and frozen labels.
    pub fn dump_json(&self) -> String {
        #[derive(Serialize)]
        struct Dump<'a> {
            client_id: usize,
            tracker: &'a CredibilityTracker,
            pseudo_set: &'a PseudoLabelSet,
        }
        serde_json::to_string_pretty(&Dump {
            client_id: self.client_id,
            tracker: &self.tracker,
            pseudo_set: &self.pseudo_set,
        })
        .expect("state serializes")
    }
}

/// What a client sends back to the coordinator.
#[derive(Debug, Clone)]
pub struct ClientRoundOutcome {
    pub client_id: usize,
    /// Locally trained weights for the round.
    pub params: ParamVector,
    /// Ids newly frozen this round.
    pub promoted: Vec<ExampleId>,
    /// Pseudo-label set size after promotion.
    pub pseudo_size: usize,
}

/// Runs one local round: `local_epochs` of SGD on the combined loss over
/// the unpromoted shard, then one credibility pass (inference with the
/// start-of-round weights) feeding promotion. Neither broadcast parameter
/// vector is mutated; with `local_epochs = 0` or `lr = 0` the returned
/// weights equal the global weights while counters still advance.
pub fn client_round(
    state: &mut ClientState,
    arch: &ModelArch,
    global: &ParamVector,
    server: &ParamVector,
    round: u64,
    settings: &TrainSettings,
) -> Result<ClientRoundOutcome> {
    if settings.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let view_seed = rng::derive_seed(state.seed, &[VIEW_TAG, round]);

    // One fixed weak/strong view pair per unpromoted example for the whole
    // round; the weak view also feeds the credibility pass.
    let mut ids = Vec::new();
    let mut weak_views = Vec::new();
    let mut strong_views = Vec::new();
    let mut references = Vec::new();
    for ex in state.shard.unlabeled() {
        if state.pseudo_set.contains(ex.id) {
            continue;
        }
        let weak = weak_augment(ex, &settings.augment, view_seed);
        let reference = forward(server, arch, &weak.view)?;
        ids.push(ex.id);
        references.push(reference);
        strong_views.push(strong_augment(ex, &settings.augment, view_seed));
        weak_views.push(weak);
    }

    let pseudo_terms: Vec<(ExampleId, usize)> = state
        .pseudo_set
        .iter()
        .map(|(id, entry)| (id, entry.label))
        .collect();

    let mut params = global.clone();
    for epoch in 0..settings.local_epochs {
        let mut order: Vec<usize> = (0..ids.len()).collect();
        let mut epoch_rng = rng::rng_from(state.seed, &[EPOCH_TAG, round, epoch as u64]);
        order.shuffle(&mut epoch_rng);

        for batch in order.chunks(settings.batch_size) {
            let mut terms: Vec<LossTerm> = Vec::new();

            if settings.coef_unsup_ce > 0.0 {
                let mut gated: Vec<(usize, usize)> = Vec::new();
                for &idx in batch {
                    let pred = forward(&params, arch, &weak_views[idx].view)?;
                    if pred.max_prob() >= settings.tau {
                        gated.push((idx, pred.argmax()));
                    }
                }
                let weight = settings.coef_unsup_ce / gated.len().max(1) as f64;
                for (idx, label) in gated {
                    terms.push(LossTerm {
                        features: strong_views[idx].view.clone(),
                        target: LossTarget::Label(label),
                        weight,
                    });
                }
            }

            if settings.coef_kl > 0.0 {
                let weight = settings.coef_kl / batch.len() as f64;
                for &idx in batch {
                    terms.push(LossTerm {
                        features: weak_views[idx].view.clone(),
                        target: LossTarget::Reference(references[idx].clone()),
                        weight,
                    });
                }
            }

            if settings.coef_pseudo > 0.0 && !pseudo_terms.is_empty() {
                let weight = settings.coef_pseudo / pseudo_terms.len() as f64;
                for (id, label) in &pseudo_terms {
                    let ex = state.shard.get(*id).ok_or_else(|| {
                        Error::Invariant(format!("pseudo-label id {id:?} missing from shard"))
                    })?;
                    terms.push(LossTerm {
                        features: ex.features.to_vec(),
                        target: LossTarget::Label(*label),
                        weight,
                    });
                }
            }

            if terms.is_empty() {
                continue;
            }
            let out = backward(&params, arch, &terms)?;
            if !out.loss.is_finite() {
                return Err(Error::Training(format!(
                    "client {}: non-finite loss at round {round} epoch {epoch}",
                    state.client_id
                )));
            }
            params = sgd_step(&params, &out.grad, settings.lr)?;
        }
    }

    let mut promoted = Vec::new();
    if settings.credibility_enabled {
        // Credibility is judged once per round from the start-of-round
        // global weights, not the evolving local ones.
        let mut diagnostics = Vec::with_capacity(ids.len());
        for (idx, id) in ids.iter().enumerate() {
            let pred = forward(global, arch, &weak_views[idx].view)?;
            diagnostics.push(ExampleDiag {
                id: *id,
                weak_max_prob: pred.max_prob(),
                weak_argmax: pred.argmax(),
                server_argmax: references[idx].argmax(),
                gate_open: pred.max_prob() >= settings.tau,
            });
        }
        let promotions =
            state
                .tracker
                .update(&diagnostics, settings.tau, settings.promotion_thresholds());
        promote(&mut state.pseudo_set, &promotions, round)?;
        promoted = promotions.iter().map(|p| p.id).collect();
        state.tracker.retire(&promoted);
    }

    Ok(ClientRoundOutcome {
        client_id: state.client_id,
        params,
        promoted,
        pseudo_size: state.pseudo_set.len(),
    })
}
