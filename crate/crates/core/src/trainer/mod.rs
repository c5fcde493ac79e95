//! Supervised training of the backbone as per-keypoint classification over
//! the target lattice, on synthetic homography pairs.

mod synth;

pub use synth::{generate_pair, synthetic_base, AugmentParams, TrainPair};

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::{self, apply_bn_stats, build_graph, image_tensor, BackboneConfig, BackboneError, Weights};
use crate::detector::{self, HarrisParams};
use crate::evaluator::{self, Homography};
use crate::image::Image;
use crate::matcher::{self, MatchConfig, MatchError};
use crate::tensor::{BatchNormMode, Graph, TensorError};

#[derive(thiserror::Error, Debug)]
pub enum TrainError {
    #[error("base image {width}x{height} is too small; need at least {needed}x{needed}")]
    BaseTooSmall { width: usize, height: usize, needed: usize },
    #[error("could not draw a non-degenerate homography")]
    Degenerate,
    #[error("non-finite loss at epoch {epoch} (lr {lr:e}, pair seed {pair_seed})")]
    NonFinite { epoch: usize, lr: f64, pair_seed: u64 },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

/// Bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [&mut Vec<f32>], grads: &[Vec<f32>], state: &mut AdamState, lr: f64, adam: &AdamParams) {
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
        state.v = state.m.clone();
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - adam.beta1.powi(t);
    let bc2 = 1.0 - adam.beta2.powi(t);
    let (b1, b2) = (adam.beta1, adam.beta2);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v, g) = (&mut state.m[i], &mut state.v[i], &grads[i]);
        for j in 0..p.len() {
            let gj = g[j] as f64;
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            p[j] -= (lr * mh / (vh.sqrt() + adam.eps)) as f32;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub backbone: BackboneConfig,
    pub crop_size: usize,
    pub max_corr: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_pairs: usize,
    pub lr: f64,
    /// Learning rate after epoch `k` is `lr * exp(-lr_decay_rate * k)`.
    pub lr_decay_rate: f64,
    pub adam: AdamParams,
    pub augment: AugmentParams,
    /// Ground-truth points stay this many pixels inside both crops.
    pub margin: usize,
    pub base_size: usize,
    pub base_images: usize,
    pub holdout_pairs: usize,
    /// Held-out MMA is computed every this many epochs and on the last one.
    pub holdout_every: usize,
    pub holdout_tau: f32,
    pub detector: HarrisParams,
    pub seed: u64,
}

impl TrainConfig {
    /// Three-level desk backbone on 128-pixel crops.
    pub fn desk() -> Self {
        Self {
            backbone: BackboneConfig::desk(),
            crop_size: 128,
            max_corr: 128,
            epochs: 30,
            steps_per_epoch: 100,
            batch_pairs: 1,
            lr: 1e-3,
            lr_decay_rate: 0.1,
            adam: AdamParams::default(),
            augment: AugmentParams::default(),
            margin: 2,
            base_size: 192,
            base_images: 64,
            holdout_pairs: 50,
            holdout_every: 5,
            holdout_tau: 0.20,
            detector: HarrisParams::default(),
            seed: 0,
        }
    }

    /// Two-level backbone on 64-pixel crops; minutes on one CPU core.
    pub fn quick() -> Self {
        Self {
            backbone: BackboneConfig::desk_two_level(),
            crop_size: 64,
            augment: AugmentParams {
                corner_jitter: 0.10,
                ..AugmentParams::default()
            },
            base_size: 112,
            ..Self::desk()
        }
    }

    /// VGG-16 widths, 512 crops. Far beyond CPU budgets; kept for completeness.
    pub fn paper() -> Self {
        Self {
            backbone: BackboneConfig::vgg16(),
            crop_size: 512,
            base_size: 720,
            steps_per_epoch: 1000,
            ..Self::desk()
        }
    }

    pub fn named(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "quick" | "desk2" => Some(Self::quick()),
            "paper" | "vgg16" => Some(Self::paper()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let largest = self.backbone.scales().into_iter().max().unwrap_or(1);
        let bad = |m: String| Err(TrainError::Config(m));
        if self.crop_size == 0 || self.crop_size % largest != 0 {
            return bad(format!("crop_size {} must be a positive multiple of {}", self.crop_size, largest));
        }
        if self.epochs == 0 || self.steps_per_epoch == 0 || self.batch_pairs == 0 {
            return bad("epochs, steps_per_epoch and batch_pairs must be positive".into());
        }
        if self.max_corr == 0 {
            return bad("max_corr must be positive".into());
        }
        Ok(())
    }

    /// Learning rate after `k` epochs of decay.
    pub fn lr_after(&self, k: usize) -> f64 {
        self.lr * (-self.lr_decay_rate * k as f64).exp()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate after this epoch's decay.
    pub lr: f64,
    pub mean_loss: f64,
    #[serde(rename = "holdout_mma@1")]
    pub holdout_mma1: Option<f64>,
    #[serde(rename = "holdout_mma@3")]
    pub holdout_mma3: Option<f64>,
    #[serde(rename = "holdout_mma@5")]
    pub holdout_mma5: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub weights: Weights,
    pub epochs: Vec<EpochRecord>,
    /// Batch loss of every optimiser step.
    pub losses: Vec<f32>,
}

/// Deterministic RNG for the pair with global index `index`.
pub fn pair_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Base images for training (`stream 0`) or held-out evaluation (`stream 1`).
pub fn base_images(config: &TrainConfig, stream: u64) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_ba5e);
    rng.set_stream(1000 + stream);
    (0..config.base_images.max(1))
        .map(|_| synthetic_base(config.base_size, config.base_size, &mut rng))
        .collect()
}

/// Held-out pairs drawn from their own base images and RNG streams.
pub fn holdout_pairs(config: &TrainConfig) -> Result<Vec<TrainPair>> {
    let bases = base_images(config, 1);
    (0..config.holdout_pairs)
        .map(|i| {
            let mut rng = pair_rng(config.seed ^ 0x401d_0u64, i as u64);
            let base = &bases[rng.random_range(0..bases.len())];
            generate_pair(base, config.crop_size, config.max_corr, config.margin, &config.augment, &mut rng)
        })
        .collect()
}

/// Mean cross-entropy of one pair's correspondences, recorded on `g`.
/// Returns the loss node and the batch-norm statistics of both images.
fn pair_loss(
    g: &mut Graph<f32>,
    weights: &Weights,
    params: &backbone::ParamNodes,
    pair: &TrainPair,
    mode: BatchNormMode,
) -> Result<(crate::tensor::NodeId, Vec<(usize, crate::tensor::BatchStats<f32>)>)> {
    let cfg = weights.config();
    let a = g.constant(image_tensor(&pair.crop_a, cfg));
    let b = g.constant(image_tensor(&pair.crop_b, cfg));
    let pa = build_graph(g, a, weights, params, mode)?;
    let pb = build_graph(g, b, weights, params, mode)?;
    let pts: Vec<(f32, f32)> = pair.correspondences.iter().map(|&((x, y), _)| (x as f32, y as f32)).collect();
    let targets: Vec<(usize, usize)> = pair.correspondences.iter().map(|&(_, t)| t).collect();
    let logits = matcher::correspondence_graph(g, &pa, &pts, &pb)?;
    let loss = g.cross_entropy(logits, &targets)?;
    let mut stats = pa.bn_stats;
    stats.extend(pb.bn_stats);
    Ok((loss, stats))
}

/// Forward-only batch loss (training-mode batch-norm, nothing updated).
pub fn batch_loss(weights: &Weights, pairs: &[TrainPair]) -> Result<f32> {
    let mut g = Graph::new();
    let params = weights.to_graph(&mut g, false);
    let mut total = 0.0f32;
    for p in pairs.iter().filter(|p| !p.correspondences.is_empty()) {
        let (loss, _) = pair_loss(&mut g, weights, &params, p, BatchNormMode::Train)?;
        total += g.value(loss).data()[0];
    }
    Ok(total)
}

/// One optimiser step on `pairs`; returns the batch loss (sum over pairs of
/// each pair's mean cross-entropy) before the update.
pub fn train_step(
    weights: &mut Weights,
    pairs: &[TrainPair],
    state: &mut AdamState,
    lr: f64,
    adam: &AdamParams,
) -> Result<f32> {
    let mut g = Graph::new();
    let params = weights.to_graph(&mut g, true);
    let mut total = None;
    let mut stats = Vec::new();
    for p in pairs.iter().filter(|p| !p.correspondences.is_empty()) {
        let (loss, s) = pair_loss(&mut g, weights, &params, p, BatchNormMode::Train)?;
        stats.extend(s);
        total = Some(match total {
            None => loss,
            Some(t) => g.add(t, loss)?,
        });
    }
    let Some(total) = total else { return Ok(0.0) };
    let value = g.value(total).data()[0];
    if !value.is_finite() {
        return Ok(value);
    }
    g.backward(total)?;
    let grads = params.grads(&g);
    apply_bn_stats(weights, &stats);
    adam_step(&mut weights.params_mut(), &grads, state, lr, adam);
    Ok(value)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HoldoutStats {
    pub mma: Option<Vec<f64>>,
    pub matches: usize,
    pub keypoints: usize,
}

/// Harris on each crop A, sparse-to-dense matching into B, pooled MMA at
/// thresholds 1..=10.
pub fn evaluate_pairs(weights: &Weights, pairs: &[TrainPair], config: &MatchConfig, detector_params: &HarrisParams) -> Result<HoldoutStats> {
    let mut errors = Vec::new();
    let mut keypoints = 0;
    for p in pairs {
        let kps = detector::harris(&p.crop_a, detector_params).map_err(MatchError::from)?;
        keypoints += kps.len();
        let m = matcher::match_pair(&p.crop_a, &kps, &p.crop_b, weights, config)?;
        errors.extend(evaluator::match_errors(&m, &p.homography));
    }
    let r = evaluator::mma_from_errors(&errors, &evaluator::DEFAULT_THRESHOLDS);
    Ok(HoldoutStats {
        mma: r.mma,
        matches: r.matches,
        keypoints,
    })
}

/// Full training run. `on_epoch` sees each record as soon as it exists.
pub fn train(config: &TrainConfig, bases: &[Image], mut on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainOutcome> {
    config.validate()?;
    if bases.is_empty() {
        return Err(TrainError::Config("no base images".into()));
    }
    let mut weights = Weights::init(&config.backbone)?;
    let holdout = holdout_pairs(config)?;
    let match_cfg = MatchConfig {
        tau: config.holdout_tau,
        ..MatchConfig::default()
    };
    let mut state = AdamState::default();
    let mut losses = Vec::new();
    let mut epochs = Vec::new();
    let mut index = 0u64;
    for epoch in 1..=config.epochs {
        let lr = config.lr_after(epoch - 1);
        let mut sum = 0.0f64;
        for _ in 0..config.steps_per_epoch {
            let first = index;
            let pairs = (0..config.batch_pairs)
                .map(|_| {
                    let mut rng = pair_rng(config.seed, index);
                    index += 1;
                    let base = &bases[rng.random_range(0..bases.len())];
                    generate_pair(base, config.crop_size, config.max_corr, config.margin, &config.augment, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            let loss = train_step(&mut weights, &pairs, &mut state, lr, &config.adam)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFinite { epoch, lr, pair_seed: first });
            }
            losses.push(loss);
            sum += loss as f64;
        }
        let eval = epoch == config.epochs || (config.holdout_every > 0 && epoch % config.holdout_every == 0);
        let mma = if eval && !holdout.is_empty() {
            evaluate_pairs(&weights, &holdout, &match_cfg, &config.detector)?.mma
        } else {
            None
        };
        let pick = |t: usize| mma.as_ref().map(|v| v[t - 1]);
        let record = EpochRecord {
            epoch,
            lr: config.lr_after(epoch),
            mean_loss: sum / config.steps_per_epoch as f64,
            holdout_mma1: pick(1),
            holdout_mma3: pick(3),
            holdout_mma5: pick(5),
        };
        on_epoch(&record);
        epochs.push(record);
    }
    Ok(TrainOutcome { weights, epochs, losses })
}

/// JSON-lines text of the epoch records.
pub fn report_lines(records: &[EpochRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serialises") + "\n")
        .collect()
}

pub fn write_report(path: &Path, records: &[EpochRecord]) -> Result<()> {
    crate::fsutil::write_atomic_str(path, &report_lines(records))?;
    Ok(())
}

/// Identity ground truth for a single crop: every lattice point maps to
/// itself.
pub fn identity_pair(image: &Image, max_corr: usize, rng: &mut impl Rng) -> TrainPair {
    let n = image.width * image.height;
    let picks = rand::seq::index::sample(rng, n, max_corr.min(n));
    TrainPair {
        crop_a: image.clone(),
        crop_b: image.clone(),
        correspondences: picks
            .into_iter()
            .map(|i| {
                let p = (i % image.width, i / image.width);
                (p, p)
            })
            .collect(),
        homography: Homography::identity(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_magnitude() {
        let mut p = vec![0.0f32; 4];
        let g = vec![vec![0.5f32, -2.0, 1e-3, 7.0]];
        let mut st = AdamState::default();
        adam_step(&mut [&mut p], &g, &mut st, 1e-3, &AdamParams::default());
        for (v, gi) in p.iter().zip(&g[0]) {
            assert_eq!(v.signum(), -gi.signum());
            assert!(v.abs() <= 1e-3 * (1.0 + 1e-6) && v.abs() >= 1e-3 * (1.0 - 1e-3));
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_weights() {
        let mut p = vec![1.0f32, -2.0];
        let mut st = AdamState::default();
        adam_step(&mut [&mut p], &[vec![0.0, 0.0]], &mut st, 1e-3, &AdamParams::default());
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn lr_schedule() {
        let c = TrainConfig::desk();
        assert!((c.lr_after(30) - 4.978706836786394e-5).abs() < 1e-15);
        assert_eq!(c.lr_after(0), 1e-3);
    }

    #[test]
    fn config_checks_crop_divisibility() {
        let mut c = TrainConfig::desk();
        c.crop_size = 100;
        assert!(c.validate().is_err());
        assert!(TrainConfig::quick().validate().is_ok());
    }
}
