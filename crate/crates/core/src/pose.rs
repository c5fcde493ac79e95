//! Pose sensitivity to correspondence noise on synthetic scenes.
//!
//! Camera convention: a world point `X` has camera coordinates `R X + t`;
//! the camera centre is `-R^T t`. Pixel coordinates follow the pinhole
//! model with focal lengths `fx`, `fy` and principal point `(cx, cy)`.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, Matrix3, Matrix6, Rotation3, Vector2, Vector3, Vector6};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::fsutil;

#[derive(thiserror::Error, Debug, PartialEq)]
pub enum PoseError {
    #[error("need at least 6 correspondences, got {0}")]
    TooFewPoints(usize),
    #[error("{0} 3D points but {1} image points")]
    LengthMismatch(usize, usize),
    #[error("degenerate point configuration (singular value ratio {0:e})")]
    Degenerate(f64),
    #[error("no hypothesis reached 6 inliers")]
    NoConsensus,
}

type Result<T, E = PoseError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    fn normalize(&self, p: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new((p.x - self.cx) / self.fx, (p.y - self.cy) / self.fy)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn center(&self) -> Vector3<f64> {
        -self.rotation.transpose() * self.translation
    }

    pub fn from_center(rotation: Matrix3<f64>, center: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation: -rotation * center,
        }
    }

    /// Camera-centre distance in the units of the scene.
    pub fn position_error(&self, truth: &Pose) -> f64 {
        (self.center() - truth.center()).norm()
    }

    /// Angle of `R_est R_gt^T` in degrees.
    pub fn rotation_error_deg(&self, truth: &Pose) -> f64 {
        let d = self.rotation * truth.rotation.transpose();
        let c = ((d.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos().to_degrees()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraModel {
    pub intrinsics: Intrinsics,
    pub pose: Pose,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// `(index, pixel)` of every point in front of the camera.
    pub points: Vec<(usize, Vector2<f64>)>,
    /// Indices of points with non-positive depth.
    pub behind: Vec<usize>,
}

fn project_one(k: &Intrinsics, pose: &Pose, x: &Vector3<f64>) -> Option<Vector2<f64>> {
    let p = pose.rotation * x + pose.translation;
    (p.z > 0.0).then(|| Vector2::new(k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy))
}

pub fn project(camera: &CameraModel, points: &[Vector3<f64>]) -> Projection {
    let mut out = Projection {
        points: Vec::new(),
        behind: Vec::new(),
    };
    for (i, x) in points.iter().enumerate() {
        match project_one(&camera.intrinsics, &camera.pose, x) {
            Some(u) => out.points.push((i, u)),
            None => out.behind.push(i),
        }
    }
    out
}

fn reprojection_error(k: &Intrinsics, pose: &Pose, x: &Vector3<f64>, u: &Vector2<f64>) -> f64 {
    project_one(k, pose, x).map_or(f64::INFINITY, |p| (p - u).norm())
}

/// Similarity taking points to zero centroid and mean distance `sqrt(3)`.
fn normalize3(points: &[Vector3<f64>]) -> (f64, Vector3<f64>) {
    let n = points.len() as f64;
    let c = points.iter().sum::<Vector3<f64>>() / n;
    let mean = points.iter().map(|p| (p - c).norm()).sum::<f64>() / n;
    let s = if mean > 0.0 { 3f64.sqrt() / mean } else { 1.0 };
    (s, c)
}

fn normalize2(points: &[Vector2<f64>]) -> (f64, Vector2<f64>) {
    let n = points.len() as f64;
    let c = points.iter().sum::<Vector2<f64>>() / n;
    let mean = points.iter().map(|p| (p - c).norm()).sum::<f64>() / n;
    let s = if mean > 0.0 { 2f64.sqrt() / mean } else { 1.0 };
    (s, c)
}

/// Linear pose from normalised-coordinate DLT, projected onto SO(3).
fn dlt(points3d: &[Vector3<f64>], points2d: &[Vector2<f64>], k: &Intrinsics) -> Result<Pose> {
    let n = points3d.len();
    let rays: Vec<Vector2<f64>> = points2d.iter().map(|p| k.normalize(p)).collect();
    let (s3, c3) = normalize3(points3d);
    let (s2, c2) = normalize2(&rays);

    let mut a = DMatrix::<f64>::zeros(2 * n, 12);
    for i in 0..n {
        let x = (points3d[i] - c3) * s3;
        let u = (rays[i] - c2) * s2;
        let xh = [x.x, x.y, x.z, 1.0];
        for j in 0..4 {
            a[(2 * i, j)] = xh[j];
            a[(2 * i, 8 + j)] = -u.x * xh[j];
            a[(2 * i + 1, 4 + j)] = xh[j];
            a[(2 * i + 1, 8 + j)] = -u.y * xh[j];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.expect("requested V");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]));
    let largest = svd.singular_values[order[order.len() - 1]];
    let second = svd.singular_values[order[1]];
    let ratio = if largest > 0.0 { second / largest } else { 0.0 };
    if ratio < 1e-8 {
        return Err(PoseError::Degenerate(ratio));
    }
    let h = v_t.row(order[0]);

    // undo normalisation: P = T2^-1 P_hat T3
    let p_hat = nalgebra::Matrix3x4::from_fn(|r, c| h[4 * r + c]);
    let t2_inv = Matrix3::new(1.0 / s2, 0.0, c2.x, 0.0, 1.0 / s2, c2.y, 0.0, 0.0, 1.0);
    let mut t3 = nalgebra::Matrix4::<f64>::identity() * s3;
    t3[(3, 3)] = 1.0;
    t3.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-c3 * s3));
    let mut p = t2_inv * p_hat * t3;

    let mut m: Matrix3<f64> = p.fixed_view::<3, 3>(0, 0).into();
    if m.determinant() < 0.0 {
        p = -p;
        m = -m;
    }
    let msvd = m.svd(true, true);
    let (u, v_t) = (msvd.u.expect("U"), msvd.v_t.expect("V"));
    let rotation = u * v_t;
    let scale = msvd.singular_values.sum() / 3.0;
    let translation: Vector3<f64> = p.fixed_view::<3, 1>(0, 3) / scale;
    Ok(Pose { rotation, translation })
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn cost(k: &Intrinsics, pose: &Pose, x3: &[Vector3<f64>], x2: &[Vector2<f64>]) -> f64 {
    x3.iter()
        .zip(x2)
        .map(|(x, u)| project_one(k, pose, x).map_or(f64::INFINITY, |p| (p - u).norm_squared()))
        .sum()
}

/// Gauss-Newton on pixel reprojection error with left-multiplied rotation
/// updates. Steps that do not lower the cost are rejected.
pub fn refine(pose: Pose, points3d: &[Vector3<f64>], points2d: &[Vector2<f64>], k: &Intrinsics, iterations: usize) -> Pose {
    let mut pose = pose;
    let mut current = cost(k, &pose, points3d, points2d);
    for _ in 0..iterations {
        let mut jtj = Matrix6::<f64>::zeros();
        let mut jtr = Vector6::<f64>::zeros();
        for (x, u) in points3d.iter().zip(points2d) {
            let rx = pose.rotation * x;
            let p = rx + pose.translation;
            if p.z <= 0.0 {
                continue;
            }
            let iz = 1.0 / p.z;
            let r = Vector2::new(k.fx * p.x * iz + k.cx - u.x, k.fy * p.y * iz + k.cy - u.y);
            let dproj = nalgebra::Matrix2x3::new(
                k.fx * iz,
                0.0,
                -k.fx * p.x * iz * iz,
                0.0,
                k.fy * iz,
                -k.fy * p.y * iz * iz,
            );
            let mut dp = nalgebra::Matrix3x6::<f64>::zeros();
            dp.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(&rx)));
            dp.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
            let j = dproj * dp;
            jtj += j.transpose() * j;
            jtr += j.transpose() * r;
        }
        let Some(delta) = jtj.cholesky().map(|c| c.solve(&(-jtr))) else { break };
        let w = Vector3::new(delta[0], delta[1], delta[2]);
        let candidate = Pose {
            rotation: *Rotation3::new(w).matrix() * pose.rotation,
            translation: pose.translation + Vector3::new(delta[3], delta[4], delta[5]),
        };
        let c = cost(k, &candidate, points3d, points2d);
        if !(c < current) {
            break;
        }
        pose = candidate;
        current = c;
        if delta.norm() < 1e-14 {
            break;
        }
    }
    // re-orthonormalise against drift
    let svd = pose.rotation.svd(true, true);
    pose.rotation = svd.u.expect("U") * svd.v_t.expect("V");
    pose
}

fn check_input(points3d: &[Vector3<f64>], points2d: &[Vector2<f64>]) -> Result<()> {
    if points3d.len() != points2d.len() {
        return Err(PoseError::LengthMismatch(points3d.len(), points2d.len()));
    }
    if points3d.len() < 6 {
        return Err(PoseError::TooFewPoints(points3d.len()));
    }
    Ok(())
}

/// DLT followed by up to 10 Gauss-Newton iterations.
pub fn pnp_dlt(points3d: &[Vector3<f64>], points2d: &[Vector2<f64>], intrinsics: &Intrinsics) -> Result<Pose> {
    check_input(points3d, points2d)?;
    let pose = dlt(points3d, points2d, intrinsics)?;
    Ok(refine(pose, points3d, points2d, intrinsics, 10))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RansacResult {
    pub pose: Pose,
    pub inliers: Vec<usize>,
    pub iterations: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RansacParams {
    pub inlier_px: f64,
    pub max_iterations: usize,
    /// Stop once a 6-point all-inlier draw would have been seen with this
    /// probability given the best inlier ratio so far.
    pub confidence: f64,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            inlier_px: 4.0,
            max_iterations: 1000,
            confidence: 0.9999,
            seed: 0,
        }
    }
}

fn inliers_of(k: &Intrinsics, pose: &Pose, x3: &[Vector3<f64>], x2: &[Vector2<f64>], px: f64) -> Vec<usize> {
    (0..x3.len())
        .filter(|&i| reprojection_error(k, pose, &x3[i], &x2[i]) <= px)
        .collect()
}

/// 6-point DLT hypotheses, inlier counting, refinement on the best set.
pub fn pnp_ransac(
    points3d: &[Vector3<f64>],
    points2d: &[Vector2<f64>],
    intrinsics: &Intrinsics,
    params: &RansacParams,
) -> Result<RansacResult> {
    check_input(points3d, points2d)?;
    let n = points3d.len();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<(Pose, Vec<usize>)> = None;
    let mut needed = params.max_iterations;
    let mut it = 0;
    while it < needed.min(params.max_iterations) {
        it += 1;
        let sample = index::sample(&mut rng, n, 6);
        let s3: Vec<Vector3<f64>> = sample.iter().map(|i| points3d[i]).collect();
        let s2: Vec<Vector2<f64>> = sample.iter().map(|i| points2d[i]).collect();
        let Ok(pose) = dlt(&s3, &s2, intrinsics) else { continue };
        let inl = inliers_of(intrinsics, &pose, points3d, points2d, params.inlier_px);
        if best.as_ref().is_none_or(|(_, b)| inl.len() > b.len()) {
            let w = inl.len() as f64 / n as f64;
            let miss = 1.0 - w.powi(6);
            needed = if miss <= 0.0 {
                0
            } else if miss >= 1.0 {
                params.max_iterations
            } else {
                ((1.0 - params.confidence).ln() / miss.ln()).ceil().max(1.0) as usize
            };
            best = Some((pose, inl));
        }
    }
    let (pose, inl) = best.ok_or(PoseError::NoConsensus)?;
    if inl.len() < 6 {
        return Err(PoseError::NoConsensus);
    }
    let mut pose = pose;
    let mut inl = inl;
    for _ in 0..2 {
        let s3: Vec<Vector3<f64>> = inl.iter().map(|&i| points3d[i]).collect();
        let s2: Vec<Vector2<f64>> = inl.iter().map(|&i| points2d[i]).collect();
        let refined = match dlt(&s3, &s2, intrinsics) {
            Ok(p) => refine(p, &s3, &s2, intrinsics, 10),
            Err(_) => refine(pose, &s3, &s2, intrinsics, 10),
        };
        let next = inliers_of(intrinsics, &refined, points3d, points2d, params.inlier_px);
        if next.len() < inl.len() {
            break;
        }
        pose = refined;
        inl = next;
    }
    Ok(RansacResult {
        pose,
        inliers: inl,
        iterations: it,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub points: Vec<Vector3<f64>>,
    pub camera: CameraModel,
    pub width: usize,
    pub height: usize,
}

/// 200 points uniform in a 20 x 20 x 10 m box, viewed from 25 m by a
/// 1600 x 1200 camera with fx = fy = 1000 and a few degrees of random tilt.
pub fn default_scene(seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let intrinsics = Intrinsics {
        fx: 1000.0,
        fy: 1000.0,
        cx: 800.0,
        cy: 600.0,
    };
    let tilt = 5f64.to_radians();
    let rotation = *Rotation3::from_euler_angles(
        rng.random_range(-tilt..tilt),
        rng.random_range(-tilt..tilt),
        rng.random_range(-tilt..tilt),
    )
    .matrix();
    let center = -25.0 * (rotation.transpose() * Vector3::z());
    let camera = CameraModel {
        intrinsics,
        pose: Pose::from_center(rotation, center),
    };
    let mut points = Vec::new();
    while points.len() < 200 {
        let x = Vector3::new(
            rng.random_range(-10.0..10.0),
            rng.random_range(-10.0..10.0),
            rng.random_range(-5.0..5.0),
        );
        if let Some(u) = project_one(&intrinsics, &camera.pose, &x) {
            if u.x >= 0.0 && u.y >= 0.0 && u.x < 1600.0 && u.y < 1200.0 {
                points.push(x);
            }
        }
    }
    Scene {
        points,
        camera,
        width: 1600,
        height: 1200,
    }
}

/// Position/orientation recall thresholds (metres, degrees).
pub const RECALL_THRESHOLDS: [(f64, f64); 3] = [(0.25, 2.0), (0.5, 5.0), (5.0, 10.0)];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Trial {
    pub sigma: f64,
    pub trial: usize,
    /// `None` when RANSAC failed.
    pub pos_err_m: Option<f64>,
    pub rot_err_deg: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SigmaSummary {
    pub sigma: f64,
    pub trials: usize,
    pub failures: usize,
    /// Failed trials count as infinitely wrong in the medians.
    pub median_pos_err_m: Option<f64>,
    pub mean_pos_err_m: Option<f64>,
    pub median_rot_err_deg: Option<f64>,
    /// Fraction of trials within each of [`RECALL_THRESHOLDS`].
    pub recall: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NoiseSweepResult {
    pub scene_seed: u64,
    pub summaries: Vec<SigmaSummary>,
    #[serde(skip)]
    pub trials: Vec<Trial>,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let m = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
    m.is_finite().then_some(m)
}

/// Independent stream for trial `trial` of noise level `sigma_index`.
pub fn trial_rng(seed: u64, sigma_index: usize, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((sigma_index as u64) << 32) | trial as u64);
    rng
}

/// Adds isotropic Gaussian pixel noise of standard deviation `sigma` to the
/// scene's exact projections and solves each trial with RANSAC
/// (inlier threshold `2 + 3 sigma`).
pub fn noise_sweep(scene_seed: u64, sigmas: &[f64], trials: usize) -> NoiseSweepResult {
    let scene = default_scene(scene_seed);
    let k = scene.camera.intrinsics;
    let exact: Vec<Vector2<f64>> = project(&scene.camera, &scene.points).points.into_iter().map(|(_, u)| u).collect();
    let truth = scene.camera.pose;
    let mut all = Vec::new();
    let mut summaries = Vec::new();
    for (si, &sigma) in sigmas.iter().enumerate() {
        let mut pos = Vec::with_capacity(trials);
        let mut rot = Vec::with_capacity(trials);
        let mut failures = 0;
        let mut hits = [0usize; 3];
        for t in 0..trials {
            let mut rng = trial_rng(scene_seed, si, t);
            let noisy: Vec<Vector2<f64>> = if sigma > 0.0 {
                let nd = Normal::new(0.0, sigma).expect("valid sigma");
                exact.iter().map(|u| u + Vector2::new(nd.sample(&mut rng), nd.sample(&mut rng))).collect()
            } else {
                exact.clone()
            };
            let params = RansacParams {
                inlier_px: 2.0 + 3.0 * sigma,
                seed: rng.random(),
                ..RansacParams::default()
            };
            let est = pnp_ransac(&scene.points, &noisy, &k, &params).ok();
            let (p, r) = match &est {
                Some(res) => (res.pose.position_error(&truth), res.pose.rotation_error_deg(&truth)),
                None => {
                    failures += 1;
                    (f64::INFINITY, f64::INFINITY)
                }
            };
            for (h, &(tp, tr)) in hits.iter_mut().zip(&RECALL_THRESHOLDS) {
                if p <= tp && r <= tr {
                    *h += 1;
                }
            }
            pos.push(p);
            rot.push(r);
            all.push(Trial {
                sigma,
                trial: t,
                pos_err_m: est.as_ref().map(|_| p),
                rot_err_deg: est.as_ref().map(|_| r),
            });
        }
        let finite: Vec<f64> = pos.iter().copied().filter(|v| v.is_finite()).collect();
        summaries.push(SigmaSummary {
            sigma,
            trials,
            failures,
            median_pos_err_m: median(pos),
            mean_pos_err_m: (!finite.is_empty() && failures == 0).then(|| finite.iter().sum::<f64>() / finite.len() as f64),
            median_rot_err_deg: median(rot),
            recall: hits.iter().map(|&h| h as f64 / trials.max(1) as f64).collect(),
        });
    }
    NoiseSweepResult {
        scene_seed,
        summaries,
        trials: all,
    }
}

impl NoiseSweepResult {
    /// `sigma,trial,pos_err_m,rot_err_deg`; failed trials have empty fields.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("sigma,trial,pos_err_m,rot_err_deg\n");
        let f = |v: Option<f64>| v.map_or(String::new(), |x| format!("{:e}", x));
        for t in &self.trials {
            let _ = writeln!(s, "{},{},{},{}", t.sigma, t.trial, f(t.pos_err_m), f(t.rot_err_deg));
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serialises") + "\n"
    }

    pub fn save(&self, csv: &Path, json: &Path) -> std::io::Result<()> {
        fsutil::write_atomic_str(csv, &self.to_csv())?;
        fsutil::write_atomic_str(json, &self.to_json())
    }
}
