//! Online cost of localising one query against a database.
//!
//! Database keypoints and their sparse descriptors are computed offline. At
//! query time the query image goes through the backbone once (`t_A`), is
//! optionally run through a detector (`t_B`, zero for sparse-to-dense), and
//! then every one of the `K` keypoints of each of the `N` database images is
//! matched (`t_C` each).

use std::time::Instant;

use serde::Serialize;

use super::{argmax_with_confidence, mutual_nearest, DenseTarget, MatchError, MatchMode};
use crate::backbone::{self, describe_sparse, SparseDescriptorSet, Weights};
use crate::detector::{self, HarrisParams, Keypoint};
use crate::image::Image;

/// `t_A + t_B + N * K * t_C`, all in seconds.
pub fn online_cost_model(t_a: f64, t_b: f64, t_c: f64, n: usize, k: usize) -> f64 {
    t_a + t_b + (n * k) as f64 * t_c
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub mode: MatchMode,
    pub repeats: usize,
    pub detector: HarrisParams,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            mode: MatchMode::SparseToDense,
            repeats: 3,
            detector: HarrisParams::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, PartialEq)]
#[allow(non_snake_case)]
pub struct BenchReport {
    pub t_A_ms: f64,
    pub t_B_ms: f64,
    pub t_C_ms: f64,
    pub N: usize,
    pub K: usize,
    pub modeled_total_s: f64,
    pub measured_total_s: f64,
}

fn secs(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

/// Times one query against `database`. Each entry holds the keypoints of a
/// database image and their descriptors (same weights as `weights`).
pub fn bench_online(
    query: &Image,
    database: &[(Vec<Keypoint>, SparseDescriptorSet)],
    weights: &Weights,
    config: &BenchConfig,
) -> Result<BenchReport, MatchError> {
    let repeats = config.repeats.max(1);
    let n = database.len();
    let k = database.iter().map(|(kp, _)| kp.len()).max().unwrap_or(0);
    let total_kp: usize = database.iter().map(|(kp, _)| kp.len()).sum();

    let (mut t_a, mut t_b, mut t_c, mut total) = (0.0, 0.0, 0.0, 0.0);
    for _ in 0..repeats {
        let start = Instant::now();
        let t = Instant::now();
        let pyramid = backbone::forward(query, weights)?;
        t_a += secs(t);
        match config.mode {
            MatchMode::SparseToDense => {
                let target = DenseTarget::new(&pyramid, super::Aggregation::Add)?;
                let (h, w) = pyramid.source_shape;
                let mut logits = vec![0.0; h * w];
                let mut scratch = Vec::new();
                let t = Instant::now();
                for (_, desc) in database {
                    target.check(desc)?;
                    for i in 0..desc.len() {
                        target.logits_into(desc, i, &mut logits, &mut scratch);
                        std::hint::black_box(argmax_with_confidence(&logits));
                    }
                }
                t_c += secs(t) / total_kp.max(1) as f64;
            }
            MatchMode::SparseToSparse => {
                let t = Instant::now();
                let kq = detector::harris(query, &config.detector)?;
                t_b += secs(t);
                let t = Instant::now();
                if !kq.is_empty() {
                    let pts: Vec<(f32, f32)> = kq.iter().map(Keypoint::xy).collect();
                    let dq = describe_sparse(&pyramid, &pts)?;
                    for (kps, desc) in database {
                        std::hint::black_box(mutual_nearest(desc, kps, &dq, &kq));
                    }
                }
                t_c += secs(t) / total_kp.max(1) as f64;
            }
        }
        total += secs(start);
    }
    let r = repeats as f64;
    let (t_a, t_b, t_c) = (t_a / r, t_b / r, t_c / r);
    Ok(BenchReport {
        t_A_ms: t_a * 1e3,
        t_B_ms: t_b * 1e3,
        t_C_ms: t_c * 1e3,
        N: n,
        K: k,
        modeled_total_s: online_cost_model(t_a, t_b, t_c, n, k),
        measured_total_s: total / r,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cost_model_arithmetic() {
        assert_eq!(online_cost_model(0.1, 0.0, 0.001, 20, 500), 10.1);
        assert_eq!(online_cost_model(0.05, 0.02, 0.0, 3, 7), 0.07);
    }
}
