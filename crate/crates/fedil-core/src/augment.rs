//! Weak and strong augmented views.
//!
//! Weak views add small Gaussian noise (plus an optional small pixel shift
//! for image-shaped data); strong views add larger noise and mask features
//! to zero — a contiguous patch for images, random coordinates otherwise.
//! Every view records its source id and the derived seed that produced it,
//! so the original example is always recoverable by provenance lookup and
//! the exact view is reproducible from `(features, aug_seed)`.

use crate::data::{ExampleId, UnlabeledExample};
use crate::rng;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

const WEAK_TAG: u64 = 0x5745_414b; // "WEAK"
const STRONG_TAG: u64 = 0x5354_524f; // "STRO"

/// Which branch of the view pair an augmentation belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AugKind {
    Weak,
    Strong,
}

/// Augmentation knobs; `image_side` marks square-image data, which switches
/// the strong mask to a contiguous patch and enables the weak shift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub weak_noise: f64,
    pub strong_noise: f64,
    pub mask_fraction: f64,
    pub shift_pixels: usize,
    pub image_side: Option<usize>,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            weak_noise: 0.1,
            strong_noise: 0.5,
            mask_fraction: 0.2,
            shift_pixels: 0,
            image_side: None,
        }
    }
}

/// A perturbed copy of one example's features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedView {
    pub source_id: ExampleId,
    pub view: Vec<f64>,
    pub kind: AugKind,
    pub aug_seed: u64,
}

/// Weak view: Gaussian noise at `weak_noise`, preceded by a small random
/// shift when the data is image-shaped. Deterministic per `(seed, id)`.
pub fn weak_augment(ex: UnlabeledExample<'_>, params: &AugmentParams, seed: u64) -> AugmentedView {
    let aug_seed = rng::derive_seed(seed, &[WEAK_TAG, ex.id.0]);
    AugmentedView {
        source_id: ex.id,
        view: apply(AugKind::Weak, ex.features, params, aug_seed),
        kind: AugKind::Weak,
        aug_seed,
    }
}

/// Strong view: Gaussian noise at `strong_noise`, then `mask_fraction` of
/// the features zeroed. Deterministic per `(seed, id)`.
pub fn strong_augment(
    ex: UnlabeledExample<'_>,
    params: &AugmentParams,
    seed: u64,
) -> AugmentedView {
    let aug_seed = rng::derive_seed(seed, &[STRONG_TAG, ex.id.0]);
    AugmentedView {
        source_id: ex.id,
        view: apply(AugKind::Strong, ex.features, params, aug_seed),
        kind: AugKind::Strong,
        aug_seed,
    }
}

/// Replays the augmentation pipeline for a stored `aug_seed`; the
/// reproducibility contract behind [`AugmentedView::aug_seed`].
pub fn apply(kind: AugKind, features: &[f64], params: &AugmentParams, aug_seed: u64) -> Vec<f64> {
    let mut rng = rng::rng_from(aug_seed, &[]);
    let normal = StandardNormal;
    let mut view = features.to_vec();

    if kind == AugKind::Weak {
        if let Some(side) = params.image_side {
            if params.shift_pixels > 0 && side * side == features.len() {
                let max = params.shift_pixels as i64;
                let dx = rng.random_range(-max..=max);
                let dy = rng.random_range(-max..=max);
                view = shift_image(&view, side, dx, dy);
            }
        }
    }

    let sigma = match kind {
        AugKind::Weak => params.weak_noise,
        AugKind::Strong => params.strong_noise,
    };
    if sigma > 0.0 {
        for v in view.iter_mut() {
            *v += sigma * <StandardNormal as Distribution<f64>>::sample(&normal, &mut rng);
        }
    }

    if kind == AugKind::Strong && params.mask_fraction > 0.0 {
        match params.image_side {
            Some(side) if side * side == features.len() => {
                // Contiguous square patch with ~mask_fraction of the area.
                let patch = ((params.mask_fraction.sqrt() * side as f64).round() as usize)
                    .clamp(1, side);
                let row = rng.random_range(0..=(side - patch));
                let col = rng.random_range(0..=(side - patch));
                for r in row..row + patch {
                    for c in col..col + patch {
                        view[r * side + c] = 0.0;
                    }
                }
            }
            _ => {
                let n_mask = ((params.mask_fraction * features.len() as f64).round() as usize)
                    .min(features.len());
                let chosen = rand::seq::index::sample(&mut rng, features.len(), n_mask);
                for idx in chosen {
                    view[idx] = 0.0;
                }
            }
        }
    }

    view
}

/// Zero-padded translation of a `side x side` image by `(dx, dy)`.
fn shift_image(pixels: &[f64], side: usize, dx: i64, dy: i64) -> Vec<f64> {
    let mut out = vec![0.0; pixels.len()];
    for r in 0..side as i64 {
        for c in 0..side as i64 {
            let sr = r - dy;
            let sc = c - dx;
            if (0..side as i64).contains(&sr) && (0..side as i64).contains(&sc) {
                out[(r * side as i64 + c) as usize] = pixels[(sr * side as i64 + sc) as usize];
            }
        }
    }
    out
}
