//! Homography reprojection and mean matching accuracy.
//!
//! A match counts as correct at threshold `t` when the reference point,
//! mapped through the ground-truth homography, lies within `t` pixels of
//! the matched target point. A report over zero matches is undefined and
//! serialises as `null`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use serde::Serialize;

use crate::backbone::Weights;
use crate::detector::{self, HarrisParams};
use crate::fsutil;
use crate::image::load_image;
use crate::matcher::{self, Match, MatchConfig};

#[derive(thiserror::Error, Debug)]
pub enum EvalError {
    #[error("point maps to infinity (w = {0:e})")]
    AtInfinity(f64),
    #[error("homography is singular")]
    Singular,
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T, E = EvalError> = std::result::Result<T, E>;

pub const DEFAULT_THRESHOLDS: [f64; 10] = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography(pub Matrix3<f64>);

impl Homography {
    /// Scales so that `h33 = 1` when it is non-zero.
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        if m.determinant().abs() <= 1e-12 || !m.iter().all(|v| v.is_finite()) {
            return Err(EvalError::Singular);
        }
        let h33 = m[(2, 2)];
        Ok(Self(if h33 != 0.0 { m / h33 } else { m }))
    }

    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self(Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0))
    }

    pub fn from_row_slice(v: &[f64; 9]) -> Result<Self> {
        Self::new(Matrix3::from_row_slice(v))
    }

    pub fn to_row_array(&self) -> [f64; 9] {
        let m = &self.0;
        std::array::from_fn(|i| m[(i / 3, i % 3)])
    }

    /// The homography taking `src[i]` to `dst[i]` for four points.
    pub fn from_correspondences(src: &[(f64, f64); 4], dst: &[(f64, f64); 4]) -> Result<Self> {
        let mut a = SMatrix::<f64, 8, 8>::zeros();
        let mut b = SVector::<f64, 8>::zeros();
        for (i, (&(x, y), &(u, v))) in src.iter().zip(dst).enumerate() {
            let r = 2 * i;
            a.row_mut(r).copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
            a.row_mut(r + 1).copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
            b[r] = u;
            b[r + 1] = v;
        }
        let lu = a.lu();
        if lu.determinant().abs() < 1e-12 {
            return Err(EvalError::Singular);
        }
        let h = lu.solve(&b).ok_or(EvalError::Singular)?;
        Self::new(Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0))
    }

    pub fn inverse(&self) -> Result<Self> {
        Self::new(self.0.try_inverse().ok_or(EvalError::Singular)?)
    }

    pub fn compose(&self, then: &Homography) -> Result<Self> {
        Self::new(then.0 * self.0)
    }

    pub fn apply(&self, x: f64, y: f64) -> Result<(f64, f64)> {
        reproject(self, (x, y))
    }
}

/// Perspective division of `H (x, y, 1)`.
pub fn reproject(h: &Homography, p: (f64, f64)) -> Result<(f64, f64)> {
    let q = h.0 * Vector3::new(p.0, p.1, 1.0);
    if q.z.abs() < 1e-12 {
        return Err(EvalError::AtInfinity(q.z));
    }
    Ok((q.x / q.z, q.y / q.z))
}

/// Nine whitespace-separated floats, row-major.
pub fn parse_homography(text: &str, origin: &str) -> Result<Homography> {
    let vals: Vec<f64> = text
        .split_whitespace()
        .map(|s| s.parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| EvalError::Parse {
            path: origin.into(),
            message: e.to_string(),
        })?;
    let arr: [f64; 9] = vals.try_into().map_err(|v: Vec<f64>| EvalError::Parse {
        path: origin.into(),
        message: format!("expected 9 values, found {}", v.len()),
    })?;
    Homography::from_row_slice(&arr)
}

pub fn load_homography(path: &Path) -> Result<Homography> {
    parse_homography(&std::fs::read_to_string(path)?, &path.display().to_string())
}

pub fn format_homography(h: &Homography) -> String {
    let a = h.to_row_array();
    let mut s = String::new();
    for r in 0..3 {
        let _ = writeln!(s, "{:e} {:e} {:e}", a[3 * r], a[3 * r + 1], a[3 * r + 2]);
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MmaReport {
    pub thresholds: Vec<f64>,
    /// Fraction correct per threshold; `None` when there are no matches.
    pub mma: Option<Vec<f64>>,
    pub matches: usize,
}

impl MmaReport {
    pub fn at(&self, threshold: f64) -> Option<f64> {
        let i = self.thresholds.iter().position(|&t| t == threshold)?;
        self.mma.as_ref().map(|v| v[i])
    }
}

/// Reprojection error of each match; a reference point sent to infinity
/// counts as an infinite error.
pub fn match_errors(matches: &[Match], h: &Homography) -> Vec<f64> {
    matches
        .iter()
        .map(|m| match reproject(h, (m.source.x as f64, m.source.y as f64)) {
            Ok((x, y)) => (x - m.target.0 as f64).hypot(y - m.target.1 as f64),
            Err(_) => f64::INFINITY,
        })
        .collect()
}

pub fn mma_from_errors(errors: &[f64], thresholds: &[f64]) -> MmaReport {
    let mma = (!errors.is_empty()).then(|| {
        thresholds
            .iter()
            .map(|&t| errors.iter().filter(|&&e| e <= t).count() as f64 / errors.len() as f64)
            .collect()
    });
    MmaReport {
        thresholds: thresholds.to_vec(),
        mma,
        matches: errors.len(),
    }
}

pub fn mma(matches: &[Match], h: &Homography, thresholds: &[f64]) -> MmaReport {
    mma_from_errors(&match_errors(matches, h), thresholds)
}

/// Match-weighted aggregate: pools the per-pair counts.
pub fn aggregate_weighted(reports: &[MmaReport]) -> Option<Vec<f64>> {
    let total: usize = reports.iter().map(|r| r.matches).sum();
    let n = reports.first()?.thresholds.len();
    (total > 0).then(|| {
        (0..n)
            .map(|i| {
                reports
                    .iter()
                    .filter_map(|r| r.mma.as_ref().map(|v| v[i] * r.matches as f64))
                    .sum::<f64>()
                    / total as f64
            })
            .collect()
    })
}

/// Mean over pairs with at least one match.
pub fn aggregate_pair_mean(reports: &[MmaReport]) -> Option<Vec<f64>> {
    let defined: Vec<&Vec<f64>> = reports.iter().filter_map(|r| r.mma.as_ref()).collect();
    let n = defined.first()?.len();
    Some(
        (0..n)
            .map(|i| defined.iter().map(|v| v[i]).sum::<f64>() / defined.len() as f64)
            .collect(),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceEntry {
    pub name: String,
    pub reference: PathBuf,
    pub targets: Vec<(PathBuf, PathBuf)>,
}

/// `SEQ name`, `REF path`, `TGT image homography` lines. Relative paths are
/// resolved against `base`. Blank lines and `#` comments are ignored.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<SequenceEntry>> {
    let mut out: Vec<SequenceEntry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |m: &str| EvalError::Parse {
            path: format!("manifest line {}", i + 1),
            message: m.into(),
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        match (fields[0], fields.len()) {
            ("SEQ", 2) => out.push(SequenceEntry {
                name: fields[1].into(),
                reference: PathBuf::new(),
                targets: Vec::new(),
            }),
            ("REF", 2) => {
                let seq = out.last_mut().ok_or_else(|| err("REF before SEQ"))?;
                seq.reference = base.join(fields[1]);
            }
            ("TGT", 3) => {
                let seq = out.last_mut().ok_or_else(|| err("TGT before SEQ"))?;
                seq.targets.push((base.join(fields[1]), base.join(fields[2])));
            }
            _ => return Err(err(&format!("unrecognised line {:?}", line))),
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct PairReport {
    pub target: String,
    pub features: usize,
    pub report: MmaReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct SequenceReport {
    pub name: String,
    pub pairs: Vec<PairReport>,
    /// Why the sequence (or part of it) was skipped.
    pub skipped: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvaluationReport {
    pub thresholds: Vec<f64>,
    pub sequences: Vec<SequenceReport>,
    pub pairs: usize,
    pub match_weighted: Option<Vec<f64>>,
    pub pair_averaged: Option<Vec<f64>>,
    pub mean_features: Option<f64>,
    pub mean_matches: Option<f64>,
}

impl EvaluationReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,mma_match_weighted,mma_pair_averaged\n");
        let fmt = |v: &Option<Vec<f64>>, i: usize| v.as_ref().map_or("".to_string(), |v| format!("{:.6}", v[i]));
        for (i, t) in self.thresholds.iter().enumerate() {
            let _ = writeln!(s, "{},{},{}", t, fmt(&self.match_weighted, i), fmt(&self.pair_averaged, i));
        }
        s
    }

    pub fn save(&self, json: &Path, csv: Option<&Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("report serialises");
        fsutil::write_atomic_str(json, &(text + "\n"))?;
        if let Some(csv) = csv {
            fsutil::write_atomic_str(csv, &self.to_csv())?;
        }
        Ok(())
    }
}

/// Matches each sequence's reference against all its targets. Missing or
/// unreadable files skip the sequence (or the target) and are reported.
pub fn evaluate_sequences(
    manifest: &[SequenceEntry],
    weights: &Weights,
    config: &MatchConfig,
    detector_params: &HarrisParams,
    thresholds: &[f64],
) -> EvaluationReport {
    let mut sequences = Vec::new();
    let mut all = Vec::new();
    let mut features = 0usize;
    for seq in manifest {
        let mut rep = SequenceReport {
            name: seq.name.clone(),
            pairs: Vec::new(),
            skipped: None,
        };
        let reference = match load_image(&seq.reference) {
            Ok(img) => img,
            Err(e) => {
                rep.skipped = Some(format!("{}: {}", seq.reference.display(), e));
                sequences.push(rep);
                continue;
            }
        };
        let kps = match detector::harris(&reference, detector_params) {
            Ok(k) => k,
            Err(e) => {
                rep.skipped = Some(e.to_string());
                sequences.push(rep);
                continue;
            }
        };
        let mut notes = Vec::new();
        for (img_path, h_path) in &seq.targets {
            let outcome = load_image(img_path)
                .map_err(|e| e.to_string())
                .and_then(|t| load_homography(h_path).map(|h| (t, h)).map_err(|e| e.to_string()))
                .and_then(|(t, h)| {
                    matcher::match_pair(&reference, &kps, &t, weights, config)
                        .map(|m| (m, h))
                        .map_err(|e| e.to_string())
                });
            match outcome {
                Ok((matches, h)) => {
                    let report = mma(&matches, &h, thresholds);
                    all.push(report.clone());
                    features += kps.len();
                    rep.pairs.push(PairReport {
                        target: img_path.display().to_string(),
                        features: kps.len(),
                        report,
                    });
                }
                Err(e) => notes.push(format!("{}: {}", img_path.display(), e)),
            }
        }
        if !notes.is_empty() {
            rep.skipped = Some(notes.join("; "));
        }
        sequences.push(rep);
    }
    let pairs = all.len();
    EvaluationReport {
        thresholds: thresholds.to_vec(),
        sequences,
        pairs,
        match_weighted: aggregate_weighted(&all),
        pair_averaged: aggregate_pair_mean(&all),
        mean_features: (pairs > 0).then(|| features as f64 / pairs as f64),
        mean_matches: (pairs > 0).then(|| all.iter().map(|r| r.matches).sum::<usize>() as f64 / pairs as f64),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::Keypoint;

    fn m(xa: f32, ya: f32, xb: usize, yb: usize) -> Match {
        Match {
            source: Keypoint::new(xa, ya, 0.0),
            target: (xb, yb),
            confidence: 1.0,
        }
    }

    #[test]
    fn reprojection_basics() {
        assert_eq!(reproject(&Homography::identity(), (3.0, 4.0)).unwrap(), (3.0, 4.0));
        assert_eq!(reproject(&Homography::translation(2.0, -1.0), (3.0, 4.0)).unwrap(), (5.0, 3.0));
        let h = Homography(Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0));
        assert!(matches!(reproject(&h, (0.0, 5.0)), Err(EvalError::AtInfinity(_))));
    }

    #[test]
    fn four_point_fit_reproduces_corners() {
        let src = [(0.0, 0.0), (63.0, 0.0), (63.0, 63.0), (0.0, 63.0)];
        let dst = [(2.0, -3.0), (60.0, 1.5), (66.0, 61.0), (-1.0, 65.0)];
        let h = Homography::from_correspondences(&src, &dst).unwrap();
        for (s, d) in src.iter().zip(&dst) {
            let p = h.apply(s.0, s.1).unwrap();
            assert!((p.0 - d.0).abs() < 1e-9 && (p.1 - d.1).abs() < 1e-9);
        }
    }

    #[test]
    fn exact_and_offset_matches() {
        let h = Homography::identity();
        let exact: Vec<Match> = (0..5).map(|i| m(i as f32, 2.0, i, 2)).collect();
        assert!(mma(&exact, &h, &DEFAULT_THRESHOLDS).mma.unwrap().iter().all(|&v| v == 1.0));
        let off: Vec<Match> = (0..5).map(|i| m(i as f32, 2.0, i + 5, 2)).collect();
        let r = mma(&off, &h, &DEFAULT_THRESHOLDS);
        assert_eq!(r.mma.unwrap(), vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        let mixed = [exact.clone(), off.clone()].concat();
        assert_eq!(mma(&mixed, &h, &DEFAULT_THRESHOLDS).at(3.0), Some(0.5));
        assert_eq!(mma(&[], &h, &DEFAULT_THRESHOLDS).mma, None);
    }

    #[test]
    fn weighted_aggregate_pools_counts() {
        let h = Homography::identity();
        let a = mma(&[m(0.0, 0.0, 0, 0)], &h, &[1.0]);
        let b = mma(&[m(0.0, 0.0, 9, 0), m(1.0, 0.0, 1, 0), m(2.0, 0.0, 9, 9)], &h, &[1.0]);
        let e = mma(&[], &h, &[1.0]);
        assert_eq!(aggregate_weighted(&[a.clone(), b.clone(), e.clone()]), Some(vec![0.5]));
        assert_eq!(aggregate_pair_mean(&[a, b, e]), Some(vec![(1.0 + 1.0 / 3.0) / 2.0]));
    }

    #[test]
    fn manifest_parsing() {
        let text = "# demo\nSEQ s1\nREF a.pgm\nTGT b.pgm H_1_2\n\nSEQ s2\nREF c.pgm\n";
        let seqs = parse_manifest(text, Path::new("/d")).unwrap();
        assert_eq!(seqs.len(), 2);
        assert_eq!(seqs[0].targets, vec![(PathBuf::from("/d/b.pgm"), PathBuf::from("/d/H_1_2"))]);
        assert!(parse_manifest("TGT x y\n", Path::new(".")).is_err());
        assert!(parse_manifest("", Path::new(".")).unwrap().is_empty());
    }

    #[test]
    fn homography_text() {
        let h = parse_homography("1 0 2\n0 1 3\n0 0 1\n", "t").unwrap();
        assert_eq!(h, Homography::translation(2.0, 3.0));
        assert_eq!(parse_homography(&format_homography(&h), "t").unwrap(), h);
        assert!(parse_homography("1 2 3", "t").is_err());
    }
}
