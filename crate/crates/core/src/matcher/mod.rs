//! Sparse-to-dense matching.
//!
//! For keypoint `n` of image A the correspondence map over image B is
//!
//! ```text
//! C_n = sum_m  upsample_B( d_n^m  (1x1 conv)  H_B^m )
//! ```
//!
//! where `d_n^m` is A's level-`m` map sampled at the keypoint. A softmax of
//! `C_n` over all pixels of B is the match distribution; the match is its
//! argmax and the confidence is the probability there.
//!
//! Ties in the argmax go to the smallest row-major index. Note that softmax
//! mass spreads over every pixel of B, so a fixed confidence threshold gets
//! stricter as B grows.

mod timing;

pub use timing::{bench_online, online_cost_model, BenchConfig, BenchReport};

use std::fmt::Write as _;
use std::path::Path;

use crate::backbone::{self, describe_sparse, BackboneError, FeaturePyramid, GraphPyramid, SparseDescriptorSet, Weights};
use crate::detector::{self, DetectorError, HarrisParams, Keypoint};
use crate::fsutil;
use crate::image::Image;
use crate::tensor::{kernels, Graph, NodeId, Scalar, Tensor};

#[derive(thiserror::Error, Debug)]
pub enum MatchError {
    #[error("descriptor width {descriptor} does not match pyramid width {pyramid}")]
    ChannelMismatch { descriptor: usize, pyramid: usize },
    #[error("tau must lie in [0, 1], got {0}")]
    InvalidTau(f32),
    #[error("pyramids come from different weights ({0:#018x} vs {1:#018x})")]
    WeightsMismatch(u64, u64),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T, E = MatchError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregation {
    /// Correlate per level, upsample, then sum.
    Add,
    /// Upsample every level, stack channels, correlate once.
    Concat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatchMode {
    SparseToDense,
    SparseToSparse,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchConfig {
    pub tau: f32,
    pub cyclic_check: bool,
    /// Chebyshev distance (pixels) allowed between the back-match and the
    /// rounded source keypoint. Zero demands exact agreement.
    pub cyclic_tolerance: usize,
    pub aggregation: Aggregation,
    pub mode: MatchMode,
    /// Detector run on image B in sparse-to-sparse mode.
    pub detector: HarrisParams,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            tau: 0.20,
            cyclic_check: true,
            cyclic_tolerance: 0,
            aggregation: Aggregation::Add,
            mode: MatchMode::SparseToDense,
            detector: HarrisParams::default(),
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(MatchError::InvalidTau(self.tau));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrespondenceMap {
    /// `(1, H_B, W_B)` pre-softmax scores.
    pub logits: Tensor<f32>,
    pub source: (f32, f32),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    pub source: Keypoint,
    /// Lattice point in image B.
    pub target: (usize, usize),
    pub confidence: f32,
}

/// Dense side of the matching problem, prepared once per target image.
pub struct DenseTarget<'a> {
    pyramid: &'a FeaturePyramid,
    stacked: Option<Tensor<f32>>,
}

impl<'a> DenseTarget<'a> {
    pub fn new(pyramid: &'a FeaturePyramid, aggregation: Aggregation) -> Result<Self> {
        let stacked = match aggregation {
            Aggregation::Add => None,
            Aggregation::Concat => {
                let (h, w) = pyramid.source_shape;
                let mut data = Vec::with_capacity(pyramid.levels.len() * pyramid.channels() * h * w);
                for level in &pyramid.levels {
                    let up = crate::tensor::bilinear_upsample(level, h, w).map_err(BackboneError::from)?;
                    data.extend_from_slice(up.data());
                }
                let c = pyramid.levels.len() * pyramid.channels();
                Some(Tensor::from_vec([c, h, w], data).map_err(BackboneError::from)?)
            }
        };
        Ok(Self { pyramid, stacked })
    }

    pub fn pyramid(&self) -> &FeaturePyramid {
        self.pyramid
    }

    fn check(&self, desc: &SparseDescriptorSet) -> Result<()> {
        if desc.channels() != self.pyramid.channels() || desc.levels.len() != self.pyramid.levels.len() {
            return Err(MatchError::ChannelMismatch {
                descriptor: desc.channels() * desc.levels.len(),
                pyramid: self.pyramid.channels() * self.pyramid.levels.len(),
            });
        }
        Ok(())
    }

    /// Writes the logits of keypoint `n` into `out` (`H_B * W_B` values).
    /// `scratch` is reused between calls.
    fn logits_into(&self, desc: &SparseDescriptorSet, n: usize, out: &mut [f32], scratch: &mut Vec<f32>) {
        let (h, w) = self.pyramid.source_shape;
        match &self.stacked {
            None => {
                out.fill(0.0);
                for (m, level) in self.pyramid.levels.iter().enumerate() {
                    let [c, lh, lw] = level.shape();
                    scratch.resize(lh * lw, 0.0);
                    kernels::correlate_forward(1, c, lh * lw, desc.descriptor(n, m), level.data(), scratch);
                    add_upsampled(scratch, lh, lw, h, w, out);
                }
            }
            Some(stack) => {
                let d = desc.concatenated(n);
                kernels::correlate_forward(1, stack.channels(), h * w, &d, stack.data(), out);
            }
        }
    }
}

/// `out += upsample(src)`, align-corners, evaluated pixel by pixel.
fn add_upsampled(src: &[f32], lh: usize, lw: usize, h: usize, w: usize, out: &mut [f32]) {
    let ty = kernels::axis_table::<f32>(lh, h);
    let tx = kernels::axis_table::<f32>(lw, w);
    for (y, &(y0, y1, wy)) in ty.iter().enumerate() {
        let r0 = &src[y0 * lw..(y0 + 1) * lw];
        let r1 = &src[y1 * lw..(y1 + 1) * lw];
        for (o, &(x0, x1, wx)) in out[y * w..(y + 1) * w].iter_mut().zip(&tx) {
            *o += kernels::blend(r0[x0], r0[x1], r1[x0], r1[x1], wx, wy);
        }
    }
}

/// Correspondence map of keypoint `n` of `desc` against `target`.
pub fn correspondence_map(desc: &SparseDescriptorSet, n: usize, target: &FeaturePyramid) -> Result<CorrespondenceMap> {
    correspondence_map_with(desc, n, &DenseTarget::new(target, Aggregation::Add)?)
}

pub fn correspondence_map_with(desc: &SparseDescriptorSet, n: usize, target: &DenseTarget<'_>) -> Result<CorrespondenceMap> {
    target.check(desc)?;
    let (h, w) = target.pyramid.source_shape;
    let mut out = vec![0.0; h * w];
    target.logits_into(desc, n, &mut out, &mut Vec::new());
    let s = target.pyramid.scales[0] as f32;
    let (x, y) = desc.coords[0][n];
    Ok(CorrespondenceMap {
        logits: Tensor::from_vec([1, h, w], out).map_err(BackboneError::from)?,
        source: (x * s, y * s),
    })
}

/// Records the correspondence maps of `points` (source pixel coordinates)
/// on the tape. The result has shape `(K, H_B, W_B)`.
pub fn correspondence_graph<T: Scalar>(
    g: &mut Graph<T>,
    source: &GraphPyramid<T>,
    points: &[(T, T)],
    target: &GraphPyramid<T>,
) -> Result<NodeId> {
    let (h, w) = target.source_shape;
    let mut acc: Option<NodeId> = None;
    for (m, (&la, &lb)) in source.levels.iter().zip(&target.levels).enumerate() {
        let s = T::from_usize(source.scales[m]);
        let pts: Vec<(T, T)> = points.iter().map(|&(x, y)| (x / s, y / s)).collect();
        let d = g.sample_points(la, &pts);
        let c = g.correlate(d, lb).map_err(BackboneError::from)?;
        let u = g.upsample(c, h, w).map_err(BackboneError::from)?;
        acc = Some(match acc {
            None => u,
            Some(a) => g.add(a, u).map_err(BackboneError::from)?,
        });
    }
    acc.ok_or_else(|| BackboneError::Config("pyramid has no levels".into()).into())
}

/// Softmax of the map over every target pixel.
pub fn likelihood(map: &CorrespondenceMap) -> Tensor<f32> {
    crate::tensor::softmax2d(&map.logits)
}

/// Argmax (first in row-major order) and the softmax probability there.
pub fn argmax_with_confidence(logits: &[f32]) -> (usize, f32) {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    let max = logits[best] as f64;
    let mut z = 0.0f64;
    for &v in logits {
        z += (v as f64 - max).exp();
    }
    (best, (1.0 / z) as f32)
}

pub fn retrieve(map: &CorrespondenceMap) -> Match {
    let w = map.logits.width();
    let (best, confidence) = argmax_with_confidence(map.logits.data());
    Match {
        source: Keypoint::new(map.source.0, map.source.1, 0.0),
        target: (best % w, best / w),
        confidence,
    }
}

/// Keeps matches whose confidence is strictly above `tau`, in order.
pub fn filter_by_confidence(matches: &[Match], tau: f32) -> Vec<Match> {
    matches.iter().filter(|m| m.confidence > tau).copied().collect()
}

/// Retrieves the best target pixel for every keypoint of `desc`.
pub fn retrieve_all(desc: &SparseDescriptorSet, keypoints: &[Keypoint], target: &DenseTarget<'_>) -> Result<Vec<Match>> {
    target.check(desc)?;
    let (h, w) = target.pyramid.source_shape;
    let mut logits = vec![0.0; h * w];
    let mut scratch = Vec::new();
    let mut out = Vec::with_capacity(desc.len());
    for (n, kp) in keypoints.iter().enumerate().take(desc.len()) {
        target.logits_into(desc, n, &mut logits, &mut scratch);
        let (best, confidence) = argmax_with_confidence(&logits);
        out.push(Match {
            source: *kp,
            target: (best % w, best / w),
            confidence,
        });
    }
    Ok(out)
}

fn round_lattice(v: f32) -> i64 {
    v.round() as i64
}

/// Matches every target point back into the source image and keeps the
/// match only when the back-match lands on the rounded source keypoint
/// (within `tolerance` pixels, Chebyshev). No confidence threshold is
/// applied to the back-match.
pub fn cyclic_check(
    matches: &[Match],
    source: &DenseTarget<'_>,
    target_pyramid: &FeaturePyramid,
    tolerance: usize,
) -> Result<Vec<Match>> {
    if matches.is_empty() {
        return Ok(Vec::new());
    }
    let back_pts: Vec<(f32, f32)> = matches.iter().map(|m| (m.target.0 as f32, m.target.1 as f32)).collect();
    let back_desc = describe_sparse(target_pyramid, &back_pts)?;
    let back_kps: Vec<Keypoint> = back_pts.iter().map(|&(x, y)| Keypoint::new(x, y, 0.0)).collect();
    let back = retrieve_all(&back_desc, &back_kps, source)?;
    Ok(matches
        .iter()
        .zip(&back)
        .filter(|(m, b)| {
            let dx = (b.target.0 as i64 - round_lattice(m.source.x)).unsigned_abs();
            let dy = (b.target.1 as i64 - round_lattice(m.source.y)).unsigned_abs();
            dx.max(dy) as usize <= tolerance
        })
        .map(|(m, _)| *m)
        .collect())
}

/// Sparse-to-dense matching of precomputed pyramids.
pub fn match_pyramids(
    pyramid_a: &FeaturePyramid,
    keypoints_a: &[Keypoint],
    pyramid_b: &FeaturePyramid,
    config: &MatchConfig,
) -> Result<Vec<Match>> {
    config.validate()?;
    if pyramid_a.fingerprint != pyramid_b.fingerprint {
        return Err(MatchError::WeightsMismatch(pyramid_a.fingerprint, pyramid_b.fingerprint));
    }
    if keypoints_a.is_empty() {
        return Ok(Vec::new());
    }
    let pts: Vec<(f32, f32)> = keypoints_a.iter().map(Keypoint::xy).collect();
    let desc = describe_sparse(pyramid_a, &pts)?;
    let target = DenseTarget::new(pyramid_b, config.aggregation)?;
    let raw = retrieve_all(&desc, keypoints_a, &target)?;
    let kept = filter_by_confidence(&raw, config.tau);
    if !config.cyclic_check {
        return Ok(kept);
    }
    let source = DenseTarget::new(pyramid_a, config.aggregation)?;
    cyclic_check(&kept, &source, pyramid_b, config.cyclic_tolerance)
}

/// Mutual nearest neighbours of concatenated per-level descriptors under
/// Euclidean distance. Confidence is the softmax of negative squared
/// distances over B's keypoints, taken at the chosen neighbour.
pub fn match_sparse(
    pyramid_a: &FeaturePyramid,
    keypoints_a: &[Keypoint],
    pyramid_b: &FeaturePyramid,
    keypoints_b: &[Keypoint],
) -> Result<Vec<Match>> {
    if keypoints_a.is_empty() || keypoints_b.is_empty() {
        return Ok(Vec::new());
    }
    let da = describe_sparse(pyramid_a, &keypoints_a.iter().map(Keypoint::xy).collect::<Vec<_>>())?;
    let db = describe_sparse(pyramid_b, &keypoints_b.iter().map(Keypoint::xy).collect::<Vec<_>>())?;
    Ok(mutual_nearest(&da, keypoints_a, &db, keypoints_b))
}

/// Mutual nearest neighbours of two described keypoint sets.
pub fn mutual_nearest(
    da: &SparseDescriptorSet,
    keypoints_a: &[Keypoint],
    db: &SparseDescriptorSet,
    keypoints_b: &[Keypoint],
) -> Vec<Match> {
    let va: Vec<Vec<f32>> = (0..da.len()).map(|i| da.concatenated(i)).collect();
    let vb: Vec<Vec<f32>> = (0..db.len()).map(|i| db.concatenated(i)).collect();
    let dist = |a: &[f32], b: &[f32]| -> f32 { a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum() };
    let nearest = |q: &[f32], set: &[Vec<f32>]| -> usize {
        let mut best = 0;
        let mut best_d = f32::INFINITY;
        for (i, v) in set.iter().enumerate() {
            let d = dist(q, v);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    };
    let mut out = Vec::new();
    for (i, a) in va.iter().enumerate() {
        let j = nearest(a, &vb);
        if nearest(&vb[j], &va) != i {
            continue;
        }
        let d: Vec<f32> = vb.iter().map(|b| -dist(a, b)).collect();
        let (_, conf) = argmax_with_confidence(&d);
        let kb = keypoints_b[j];
        out.push(Match {
            source: keypoints_a[i],
            target: (kb.x.round() as usize, kb.y.round() as usize),
            confidence: conf,
        });
    }
    out
}

/// Full pipeline on an image pair with shared weights.
pub fn match_pair(
    image_a: &Image,
    keypoints_a: &[Keypoint],
    image_b: &Image,
    weights: &Weights,
    config: &MatchConfig,
) -> Result<Vec<Match>> {
    config.validate()?;
    if keypoints_a.is_empty() {
        return Ok(Vec::new());
    }
    let pa = backbone::forward(image_a, weights)?;
    let pb = backbone::forward(image_b, weights)?;
    match config.mode {
        MatchMode::SparseToDense => match_pyramids(&pa, keypoints_a, &pb, config),
        MatchMode::SparseToSparse => {
            let kb = detector::harris(image_b, &config.detector)?;
            match_sparse(&pa, keypoints_a, &pb, &kb)
        }
    }
}

/// `xA yA xB yB confidence` per line, six decimals.
pub fn format_matches(matches: &[Match]) -> String {
    let mut s = String::new();
    for m in matches {
        let _ = writeln!(
            s,
            "{:.6} {:.6} {:.6} {:.6} {:.6}",
            m.source.x, m.source.y, m.target.0 as f32, m.target.1 as f32, m.confidence
        );
    }
    s
}

pub fn write_matches(path: &Path, matches: &[Match]) -> Result<()> {
    fsutil::write_atomic_str(path, &format_matches(matches))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;

    fn pyramid(levels: Vec<Tensor<f32>>, scales: Vec<usize>, hw: (usize, usize)) -> FeaturePyramid {
        FeaturePyramid {
            levels,
            scales,
            source_shape: hw,
            fingerprint: 7,
        }
    }

    #[test]
    fn single_level_reduces_to_plain_correlation() {
        let level = Tensor::from_fn([3, 5, 6], |c, y, x| ((c * 31 + y * 7 + x * 3) % 11) as f32 - 5.0);
        let p = pyramid(vec![level.clone()], vec![1], (5, 6));
        let d = describe_sparse(&p, &[(2.0, 3.0)]).unwrap();
        let map = correspondence_map(&d, 0, &p).unwrap();
        let direct = crate::tensor::correlate_1x1(&level.column(3, 2), &level).unwrap();
        assert_eq!(map.logits, direct);
    }

    #[test]
    fn constant_levels_give_constant_logits() {
        let l0 = Tensor::full([2, 8, 8], 1.0);
        let l1 = Tensor::full([2, 2, 2], 0.5);
        let p = pyramid(vec![l0, l1], vec![1, 4], (8, 8));
        let d = describe_sparse(&p, &[(3.0, 5.0)]).unwrap();
        let map = correspondence_map(&d, 0, &p).unwrap();
        // 2 * 1 * 1 + 2 * 0.5 * 0.5
        assert!(map.logits.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn likelihood_peak_value() {
        let mut logits = Tensor::zeros([1, 4, 4]);
        logits.set(0, 2, 1, 10.0);
        let map = CorrespondenceMap { logits, source: (0.0, 0.0) };
        let p = likelihood(&map);
        let want = 1.0 / (1.0 + 15.0 * (-10.0f64).exp());
        assert!((p.at(0, 2, 1) as f64 - want).abs() < 1e-6);
        assert!((want - 0.99932).abs() < 1e-5);
        let m = retrieve(&map);
        assert_eq!(m.target, (1, 2));
        assert!((m.confidence as f64 - want).abs() < 1e-6);
        assert_eq!(filter_by_confidence(&[m], 0.20).len(), 1);
    }

    #[test]
    fn uniform_map_ties_to_origin() {
        let map = CorrespondenceMap {
            logits: Tensor::full([1, 3, 4], 0.3),
            source: (0.0, 0.0),
        };
        let m = retrieve(&map);
        assert_eq!(m.target, (0, 0));
        assert!((m.confidence - 1.0 / 12.0).abs() < 1e-7);
    }

    #[test]
    fn tau_edges() {
        let ms: Vec<Match> = [0.0, 0.1, 0.5, 0.999]
            .iter()
            .map(|&c| Match {
                source: Keypoint::new(0.0, 0.0, 0.0),
                target: (0, 0),
                confidence: c,
            })
            .collect();
        assert_eq!(filter_by_confidence(&ms, 0.0).len(), 3);
        assert!(filter_by_confidence(&ms, 1.0).is_empty());
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let a = pyramid(vec![Tensor::full([3, 4, 4], 1.0)], vec![1], (4, 4));
        let b = pyramid(vec![Tensor::full([2, 4, 4], 1.0)], vec![1], (4, 4));
        let d = describe_sparse(&a, &[(1.0, 1.0)]).unwrap();
        assert!(matches!(correspondence_map(&d, 0, &b), Err(MatchError::ChannelMismatch { .. })));
    }

    #[test]
    fn zero_keypoints_give_no_matches() {
        let w = Weights::init(&BackboneConfig::desk_two_level()).unwrap();
        let img = Image::from_fn(16, 16, |x, y| ((x ^ y) & 3) as f32 / 3.0);
        assert!(match_pair(&img, &[], &img, &w, &MatchConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn match_file_format() {
        let m = Match {
            source: Keypoint::new(1.5, 2.0, 0.0),
            target: (3, 4),
            confidence: 0.25,
        };
        assert_eq!(format_matches(&[m]), "1.500000 2.000000 3.000000 4.000000 0.250000\n");
    }
}
