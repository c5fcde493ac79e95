//! Exhaustive-scan reimplementation of sparse-to-dense matching, shared by
//! the matcher tests and the acceptance suite.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use s2d_core::backbone::FeaturePyramid;
use s2d_core::detector::Keypoint;
use s2d_core::matcher::{self, MatchConfig};
use s2d_core::tensor::Tensor;

pub struct Level {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub v: Vec<f32>,
}

impl Level {
    fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.v[(c * self.h + y) * self.w + x]
    }
}

fn mix(a: f32, b: f32, c: f32, d: f32, wx: f32, wy: f32) -> f32 {
    (1.0 - wy) * ((1.0 - wx) * a + wx * b) + wy * ((1.0 - wx) * c + wx * d)
}

fn split(v: f32, n: usize) -> (usize, usize, f32) {
    let i0 = (v.floor() as usize).min(n - 1);
    (i0, (i0 + 1).min(n - 1), v - i0 as f32)
}

fn sample(l: &Level, x: f32, y: f32) -> Vec<f32> {
    let x = x.clamp(0.0, (l.w - 1) as f32);
    let y = y.clamp(0.0, (l.h - 1) as f32);
    let (x0, x1, wx) = split(x, l.w);
    let (y0, y1, wy) = split(y, l.h);
    (0..l.c)
        .map(|c| mix(l.at(c, y0, x0), l.at(c, y0, x1), l.at(c, y1, x0), l.at(c, y1, x1), wx, wy))
        .collect()
}

fn coord(o: usize, n_in: usize, n_out: usize) -> (usize, usize, f32) {
    if n_in == 1 || n_out == 1 {
        return (0, 0, 0.0);
    }
    split((o * (n_in - 1)) as f32 / (n_out - 1) as f32, n_in)
}

/// Scores of a per-level descriptor stack over every pixel of the target.
pub fn scores(levels: &[Level], h: usize, w: usize, desc: &[Vec<f32>]) -> Vec<f32> {
    let mut out = vec![0.0f32; h * w];
    for (l, d) in levels.iter().zip(desc) {
        let dot = |y: usize, x: usize| {
            let mut s = 0.0f32;
            for (c, &dc) in d.iter().enumerate() {
                s += dc * l.at(c, y, x);
            }
            s
        };
        for y in 0..h {
            let (y0, y1, wy) = coord(y, l.h, h);
            for x in 0..w {
                let (x0, x1, wx) = coord(x, l.w, w);
                out[y * w + x] += mix(dot(y0, x0), dot(y0, x1), dot(y1, x0), dot(y1, x1), wx, wy);
            }
        }
    }
    out
}

pub fn best(s: &[f32]) -> (usize, f32) {
    let mut b = 0;
    for i in 1..s.len() {
        if s[i] > s[b] {
            b = i;
        }
    }
    let mut z = 0.0f64;
    for &v in s {
        z += (v as f64 - s[b] as f64).exp();
    }
    (b, (1.0 / z) as f32)
}

pub struct Side {
    pub levels: Vec<Level>,
    pub scales: Vec<usize>,
    pub h: usize,
    pub w: usize,
}

impl Side {
    pub fn describe(&self, x: f32, y: f32) -> Vec<Vec<f32>> {
        self.levels
            .iter()
            .zip(&self.scales)
            .map(|(l, &s)| sample(l, x / s as f32, y / s as f32))
            .collect()
    }

    pub fn pyramid(&self) -> FeaturePyramid {
        FeaturePyramid {
            levels: self
                .levels
                .iter()
                .map(|l| Tensor::from_vec([l.c, l.h, l.w], l.v.clone()).unwrap())
                .collect(),
            scales: self.scales.clone(),
            source_shape: (self.h, self.w),
            fingerprint: 1,
        }
    }
}

pub fn oracle(a: &Side, kps: &[Keypoint], b: &Side, tau: f32, cyclic: bool) -> Vec<(Keypoint, (usize, usize), f32)> {
    let mut out = Vec::new();
    for kp in kps {
        let s = scores(&b.levels, b.h, b.w, &a.describe(kp.x, kp.y));
        let (i, conf) = best(&s);
        if conf <= tau {
            continue;
        }
        let (tx, ty) = (i % b.w, i / b.w);
        if cyclic {
            let back = scores(&a.levels, a.h, a.w, &b.describe(tx as f32, ty as f32));
            let (j, _) = best(&back);
            if (j % a.w) as f32 != kp.x.round() || (j / a.w) as f32 != kp.y.round() {
                continue;
            }
        }
        out.push((*kp, (tx, ty), conf));
    }
    out
}

pub fn random_side(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, palette: &[f32]) -> Side {
    let scales = vec![1, 4, 16];
    let levels = scales
        .iter()
        .map(|&s| {
            let (lh, lw) = (h.div_ceil(s), w.div_ceil(s));
            let v = (0..c * lh * lw).map(|_| palette[rng.random_range(0..palette.len())]).collect();
            Level { c, h: lh, w: lw, v }
        })
        .collect();
    Side { levels, scales, h, w }
}


/// Compares `match_pyramids` with [`oracle`] on one seeded case per seed
/// (both with and without the cyclic check). Returns the keypoints tried and
/// matches kept, or a description of the first disagreement.
pub fn equivalence_run(seeds: std::ops::Range<u64>) -> Result<(usize, usize), String> {
    let mut total = 0;
    let mut kept = 0;
    for seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = rng.random_range(2..6);
        // coarse palettes make equal scores (ties) common
        let palette: Vec<f32> = match seed % 3 {
            0 => vec![-1.0, 0.0, 1.0],
            1 => vec![-0.5, 0.0, 0.5, 1.0],
            _ => (0..16).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        let h = rng.random_range(1..=32);
        let w = rng.random_range(1..=32);
        let (ha, wa) = if seed % 4 == 0 { (h, w) } else { (rng.random_range(1..=32), rng.random_range(1..=32)) };
        let a = random_side(&mut rng, c, ha, wa, &palette);
        let b = random_side(&mut rng, c, h, w, &palette);
        let kps: Vec<Keypoint> = (0..rng.random_range(0..24))
            .map(|i| {
                let (x, y) = if i % 2 == 0 {
                    (rng.random_range(0..wa) as f32, rng.random_range(0..ha) as f32)
                } else {
                    (rng.random_range(0.0..wa as f32), rng.random_range(0.0..ha as f32))
                };
                Keypoint::new(x.min(wa as f32 - 0.01).max(0.0), y.min(ha as f32 - 0.01).max(0.0), 0.0)
            })
            .collect();
        let tau = [0.0, 0.05, 0.2][(seed % 3) as usize];
        for cyclic in [false, true] {
            let cfg = MatchConfig {
                tau,
                cyclic_check: cyclic,
                ..MatchConfig::default()
            };
            let got = matcher::match_pyramids(&a.pyramid(), &kps, &b.pyramid(), &cfg).map_err(|e| e.to_string())?;
            let want = oracle(&a, &kps, &b, tau, cyclic);
            let got: Vec<_> = got.iter().map(|m| (m.source, m.target, m.confidence)).collect();
            if got != want {
                return Err(format!("seed {seed} cyclic {cyclic}: {got:?} vs {want:?}"));
            }
            total += kps.len();
            kept += want.len();
        }
    }
    Ok((total, kept))
}
