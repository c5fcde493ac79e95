//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

#[path = "../../core/tests/support/exhaustive.rs"]
mod exhaustive;

use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use s2d_core::backbone::{self, describe_sparse, Weights};
use s2d_core::detector::{self, Keypoint};
use s2d_core::evaluator::{self, Homography, DEFAULT_THRESHOLDS};
use s2d_core::gradsuite;
use s2d_core::image::save_image;
use s2d_core::matcher::{self, Aggregation, DenseTarget, Match, MatchConfig};
use s2d_core::pose;
use s2d_core::tensor::{softmax2d, Graph, Tensor};
use s2d_core::trainer::{self, TrainConfig, TrainPair};

type Outcome = Result<String, String>;

fn check(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_s2d")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("spawn s2d")
}

fn run_ok(args: &[&str]) -> Result<Output, String> {
    let out = run(args);
    check(
        out.status.success(),
        format!("s2d {:?} exited {:?}: {}", args, out.status.code(), String::from_utf8_lossy(&out.stderr)),
    )?;
    Ok(out)
}

struct Trained {
    config: TrainConfig,
    weights: Weights,
    steps: usize,
    seconds: f64,
    holdout: Vec<TrainPair>,
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let config = TrainConfig::quick();
        let bases = trainer::base_images(&config, 0);
        let t = Instant::now();
        let out = trainer::train(&config, &bases, |_| {}).expect("training run");
        Trained {
            steps: out.losses.len(),
            seconds: t.elapsed().as_secs_f64(),
            weights: out.weights,
            holdout: trainer::holdout_pairs(&config).expect("holdout pairs"),
            config,
        }
    })
}

fn c1_gradients() -> Outcome {
    let t = Instant::now();
    let suite = gradsuite::run_suite(0).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    let worst = suite.iter().map(|e| e.report.max_rel_error).fold(0.0, f64::max);
    for e in &suite {
        check(e.report.passed && e.report.max_rel_error < 1e-4, format!("{} rel error {:e}", e.name, e.report.max_rel_error))?;
        check(e.report.coords_checked > 0, format!("{} checked nothing", e.name))?;
    }
    check(suite.iter().any(|e| e.name.starts_with("pipeline")), "pipeline check missing")?;
    check(secs < 60.0, format!("took {secs:.1} s"))?;
    Ok(format!("{} checks, worst rel error {worst:.2e}, {secs:.1} s", suite.len()))
}

fn c2_oracle() -> Outcome {
    let (tried, kept) = exhaustive::equivalence_run(0..120)?;
    check(kept > 0, "no match survived on any seed")?;
    Ok(format!("120 seeds, {tried} keypoint queries, {kept} matches identical"))
}

fn c3_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_norm = 0.0f64;
    let mut worst_shift = 0.0f32;
    for _ in 0..200 {
        let (h, w) = (rng.random_range(1..20), rng.random_range(1..20));
        // multiples of 2^-10 so that v + shift is exact in f32
        let vals: Vec<f32> = (0..h * w).map(|_| rng.random_range(-30_720..=30_720) as f32 / 1024.0).collect();
        let shift = rng.random_range(-51_200..=51_200) as f32 / 1024.0;
        let p = softmax2d(&Tensor::from_vec([1, h, w], vals.clone()).unwrap());
        let q = softmax2d(&Tensor::from_vec([1, h, w], vals.iter().map(|v| v + shift).collect()).unwrap());
        let s: f64 = p.data().iter().map(|&v| v as f64).sum();
        worst_norm = worst_norm.max((s - 1.0).abs());
        for (a, b) in p.data().iter().zip(q.data()) {
            worst_shift = worst_shift.max((a - b).abs());
        }
    }
    check(worst_norm <= 1e-5, format!("softmax sums off by {worst_norm:e}"))?;
    check(worst_shift <= 1e-6, format!("shift changed softmax by {worst_shift:e}"))?;

    let mut worst_cat = 0.0f32;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let palette: Vec<f32> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = exhaustive::random_side(&mut rng, 8, 32, 32, &palette);
        let b = exhaustive::random_side(&mut rng, 8, 29, 31, &palette);
        let (pa, pb) = (a.pyramid(), b.pyramid());
        let d = describe_sparse(&pa, &[(3.0, 4.0), (17.5, 30.25), (31.0, 0.0)]).map_err(|e| e.to_string())?;
        let add = DenseTarget::new(&pb, Aggregation::Add).map_err(|e| e.to_string())?;
        let cat = DenseTarget::new(&pb, Aggregation::Concat).map_err(|e| e.to_string())?;
        for n in 0..3 {
            let x = matcher::correspondence_map_with(&d, n, &add).map_err(|e| e.to_string())?;
            let y = matcher::correspondence_map_with(&d, n, &cat).map_err(|e| e.to_string())?;
            for (p, q) in x.logits.data().iter().zip(y.logits.data()) {
                worst_cat = worst_cat.max((p - q).abs());
            }
        }
    }
    check(worst_cat <= 1e-5, format!("concat vs add differ by {worst_cat:e}"))?;

    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros([1, 16, 16]));
    let l = g.cross_entropy(x, &[(7, 3)]).map_err(|e| e.to_string())?;
    let ce = g.value(l).data()[0];
    check((ce - 256f64.ln()).abs() <= 1e-6, format!("uniform cross-entropy {ce}"))?;
    Ok(format!(
        "softmax sum err {worst_norm:.1e}, shift err {worst_shift:.1e}, concat/add {worst_cat:.1e}, uniform CE {ce:.4}"
    ))
}

fn holdout_cfg(tau: f32, cyclic: bool) -> MatchConfig {
    MatchConfig {
        tau,
        cyclic_check: cyclic,
        ..MatchConfig::default()
    }
}

fn c4_training() -> Outcome {
    let t = trained();
    let c = &t.config;
    check(c.backbone.levels() == 2 && c.crop_size == 64, "profile is not the two-level 64 px one")?;
    check(t.steps <= 5000, format!("{} steps", t.steps))?;
    check(t.seconds < 600.0, format!("training took {:.0} s", t.seconds))?;
    check(t.holdout.len() == 50 && c.augment.corner_jitter <= 0.10 && c.augment.noise_sigma > 0.0, "holdout setup")?;
    let stats = trainer::evaluate_pairs(&t.weights, &t.holdout, &holdout_cfg(0.20, true), &c.detector).map_err(|e| e.to_string())?;
    let mma = stats.mma.ok_or("no holdout matches")?;
    let line = format!(
        "{} steps in {:.0} s; holdout MMA@1 {:.3}, MMA@3 {:.3} ({} matches / {} keypoints)",
        t.steps, t.seconds, mma[0], mma[2], stats.matches, stats.keypoints
    );
    check(mma[2] >= 0.80 && mma[0] >= 0.50, line.clone())?;
    Ok(line)
}

fn subset(small: &[Match], big: &[Match]) -> bool {
    small.iter().all(|m| big.contains(m))
}

fn c5_filtering() -> Outcome {
    let t = trained();
    let (mut before, mut after) = ((0usize, 0usize), (0usize, 0usize));
    for (i, p) in t.holdout.iter().enumerate() {
        let kps = detector::harris(&p.crop_a, &t.config.detector).map_err(|e| e.to_string())?;
        let pa = backbone::forward(&p.crop_a, &t.weights).map_err(|e| e.to_string())?;
        let pb = backbone::forward(&p.crop_b, &t.weights).map_err(|e| e.to_string())?;
        let run = |cfg: MatchConfig| matcher::match_pyramids(&pa, &kps, &pb, &cfg).map_err(|e| e.to_string());
        let raw = run(holdout_cfg(0.20, false))?;
        let cyc = run(holdout_cfg(0.20, true))?;
        check(subset(&cyc, &raw), format!("pair {i}: cyclic output not a subset"))?;
        for (acc, set) in [(&mut before, &raw), (&mut after, &cyc)] {
            let errs = evaluator::match_errors(set, &p.homography);
            acc.0 += errs.iter().filter(|&&e| e <= 3.0).count();
            acc.1 += errs.len();
        }
        let at = |tau| run(holdout_cfg(tau, true));
        let (s5, s2, s0) = (at(0.5)?, at(0.2)?, at(0.0)?);
        check(subset(&s5, &s2) && subset(&s2, &s0), format!("pair {i}: tau sets not nested"))?;
    }
    let prec = |(ok, n): (usize, usize)| if n == 0 { 0.0 } else { ok as f64 / n as f64 };
    let (pb, pa) = (prec(before), prec(after));
    let line = format!("precision@3 {pb:.3} -> {pa:.3} ({} -> {} matches)", before.1, after.1);
    check(after.1 > 0 && pa >= pb, line.clone())?;
    Ok(line)
}

fn c6_lr() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let report = dir.path().join("report.jsonl");
    let w = dir.path().join("w.s2dw");
    run_ok(&[
        "train", "--profile", "quick", "--epochs", "30", "--steps-per-epoch", "1", "--holdout-pairs", "0",
        "--out", path(&w), "--report", path(&report),
    ])?;
    let text = std::fs::read_to_string(&report).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    let mut k = 0;
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
        k += 1;
        check(v["epoch"].as_u64() == Some(k), format!("epoch field {}", v["epoch"]))?;
        let lr = v["lr"].as_f64().ok_or("lr missing")?;
        let want = 1e-3 * (-0.1 * k as f64).exp();
        worst = worst.max(((lr - want) / want).abs());
    }
    check(k == 30, format!("{k} epochs logged"))?;
    check(worst <= 1e-12, format!("relative lr error {worst:e}"))?;
    Ok(format!("30 epochs, worst relative lr error {worst:.1e}"))
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn c7_timing() -> Outcome {
    let out = run_ok(&["bench-time", "--n", "1", "--k", "100", "--backbone", "desk", "--mode", "s2d"])?;
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).map_err(|e| format!("bench json: {e}"))?;
    let f = |k: &str| v[k].as_f64().ok_or(format!("{k} missing"));
    let (modeled, measured, t_b) = (f("modeled_total_s")?, f("measured_total_s")?, f("t_B_ms")?);
    check(v["N"] == 1 && v["K"] == 100, "N/K not echoed")?;
    check(t_b == 0.0, format!("t_B {t_b} ms in s2d mode"))?;
    let rel = (modeled - measured).abs() / measured;
    let line = format!("modeled {modeled:.4} s vs measured {measured:.4} s ({:.1}% apart), t_B 0", rel * 100.0);
    check(rel <= 0.20, line.clone())?;
    Ok(line)
}

fn c8_pose() -> Outcome {
    let sweep = pose::noise_sweep(0, &[0.0, 1.0, 2.0, 4.0, 8.0], 200);
    let s = &sweep.summaries;
    check(s.iter().all(|x| x.trials >= 200), "fewer than 200 trials")?;
    let meds: Vec<f64> = s.iter().map(|x| x.median_pos_err_m.unwrap_or(f64::INFINITY)).collect();
    check(meds[0] < 1e-6, format!("sigma 0 median {:e} m", meds[0]))?;
    check(s[0].recall[0] == 1.0, format!("sigma 0 recall {}", s[0].recall[0]))?;
    check(meds.windows(2).all(|w| w[0] <= w[1]), format!("medians not monotone: {meds:?}"))?;

    let scene = pose::default_scene(9);
    let k = scene.camera.intrinsics;
    let proj = pose::project(&scene.camera, &scene.points);
    let mut u: Vec<Vector2<f64>> = proj.points.iter().map(|p| p.1).collect();
    let pts: Vec<_> = proj.points.iter().map(|p| scene.points[p.0]).collect();
    let n = u.len();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let outliers = rand::seq::index::sample(&mut rng, n, n * 3 / 10).into_vec();
    for &i in &outliers {
        let d = Vector2::new(rng.random_range(50.0..300.0), rng.random_range(50.0..300.0));
        u[i] += if rng.random::<bool>() { d } else { -d };
    }
    let params = pose::RansacParams {
        inlier_px: 2.0,
        seed: 3,
        ..Default::default()
    };
    let res = pose::pnp_ransac(&pts, &u, &k, &params).map_err(|e| e.to_string())?;
    let (pe, re) = (res.pose.position_error(&scene.camera.pose), res.pose.rotation_error_deg(&scene.camera.pose));
    check(pe < 1e-6 && re < 1e-6, format!("planted outliers: {pe:e} m, {re:e} deg"))?;
    check(outliers.iter().all(|i| !res.inliers.contains(i)), "an outlier was kept")?;
    Ok(format!(
        "medians (m) {}; {} of {n} outliers rejected, pose error {pe:.1e} m",
        meds.iter().map(|m| format!("{m:.3e}")).collect::<Vec<_>>().join(" "),
        outliers.len()
    ))
}

fn c9_mma() -> Outcome {
    let h = Homography::from_row_slice(&[1.02, 0.03, 4.0, -0.02, 0.98, -3.0, 1e-4, -2e-4, 1.0]).map_err(|e| e.to_string())?;
    let mut perfect = Vec::new();
    let mut step = Vec::new();
    for y in 0..10 {
        for x in 0..10 {
            let (sx, sy) = (x as f32 * 6.0 + 10.0, y as f32 * 5.0 + 10.0);
            let (tx, ty) = evaluator::reproject(&h, (sx as f64, sy as f64)).map_err(|e| e.to_string())?;
            // source chosen so the target lands on the lattice
            let target = (tx.round() as usize, ty.round() as usize);
            let inv = h.inverse().map_err(|e| e.to_string())?;
            let (ax, ay) = evaluator::reproject(&inv, (target.0 as f64, target.1 as f64)).map_err(|e| e.to_string())?;
            perfect.push(Match { source: Keypoint::new(ax as f32, ay as f32, 0.0), target, confidence: 1.0 });
            step.push(Match { source: Keypoint::new(sx, sy, 0.0), target: (sx as usize + 5, sy as usize), confidence: 1.0 });
        }
    }
    let p = evaluator::mma(&perfect, &h, &DEFAULT_THRESHOLDS);
    check(p.mma.as_ref().is_some_and(|v| v.iter().all(|&x| x == 1.0)), format!("perfect matches {:?}", p.mma))?;
    let s = evaluator::mma(&step, &Homography::identity(), &DEFAULT_THRESHOLDS);
    let sv = s.mma.clone().ok_or("step case empty")?;
    for (t, v) in DEFAULT_THRESHOLDS.iter().zip(&sv) {
        check(*v == if *t < 5.0 { 0.0 } else { 1.0 }, format!("step case {v} at {t} px"))?;
    }
    let mut reports = vec![p, s];
    let t = trained();
    for pair in &t.holdout {
        let kps = detector::harris(&pair.crop_a, &t.config.detector).map_err(|e| e.to_string())?;
        let m = matcher::match_pair(&pair.crop_a, &kps, &pair.crop_b, &t.weights, &holdout_cfg(0.2, true)).map_err(|e| e.to_string())?;
        reports.push(evaluator::mma(&m, &pair.homography, &DEFAULT_THRESHOLDS));
    }
    for r in &reports {
        if let Some(v) = &r.mma {
            check(v.windows(2).all(|w| w[0] <= w[1]), format!("non-monotone report {v:?}"))?;
        }
    }
    Ok(format!("perfect = 1, step 0|1 at 5 px, {} reports monotone", reports.len()))
}

fn write_pair(dir: &Path) -> Result<(PathBuf, PathBuf), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let base = trainer::synthetic_base(96, 96, &mut rng);
    let a = dir.join("a.pgm");
    let b = dir.join("b.pgm");
    save_image(&a, &base.crop(8, 8, 64, 64)).map_err(|e| e.to_string())?;
    save_image(&b, &base.crop(11, 6, 64, 64)).map_err(|e| e.to_string())?;
    Ok((a, b))
}

fn c10_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let (a, b) = write_pair(d)?;
    let mut files = Vec::new();
    for r in 0..2 {
        let f = |n: &str| d.join(format!("{n}{r}"));
        let (w, rep, loss, m, csv, json) = (f("w"), f("rep"), f("loss"), f("m"), f("csv"), f("json"));
        let t = run_ok(&[
            "train", "--profile", "quick", "--epochs", "2", "--steps-per-epoch", "4", "--holdout-pairs", "3",
            "--seed", "5", "--out", path(&w), "--report", path(&rep), "--losses", path(&loss),
        ])?;
        let mo = run_ok(&["match", path(&a), path(&b), "--weights", path(&w), "--tau", "0", "--out", path(&m)])?;
        let mo2 = run_ok(&["match", path(&a), path(&b), "--backbone", "desk2", "--seed", "5", "--tau", "0"])?;
        let po = run_ok(&["pose-noise", "--trials", "20", "--seed", "5", "--csv", path(&csv), "--json", path(&json)])?;
        let mut bytes = Vec::new();
        for p in [&w, &rep, &loss, &m, &csv, &json] {
            bytes.push(std::fs::read(p).map_err(|e| e.to_string())?);
        }
        bytes.extend([t.stdout, mo2.stdout, po.stdout]);
        check(!bytes[3].is_empty(), "match wrote nothing")?;
        let _ = mo;
        files.push(bytes);
    }
    let names = ["weights", "train report", "losses", "matches", "pose csv", "pose json", "train stdout", "match stdout", "pose stdout"];
    for (i, n) in names.iter().enumerate() {
        check(files[0][i] == files[1][i], format!("{n} differs between runs"))?;
    }
    Ok(format!("{} artefacts bitwise identical across two runs", names.len()))
}

/// End-to-end identity runs with the trained weights.
fn identity_runs() -> Outcome {
    let t = trained();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let img = d.join("id.pgm");
    save_image(&img, &t.holdout[0].crop_a).map_err(|e| e.to_string())?;
    let w = d.join("w.s2dw");
    t.weights.save(&w).map_err(|e| e.to_string())?;

    let out = run_ok(&["match", path(&img), path(&img), "--weights", path(&w)])?;
    let text = String::from_utf8_lossy(&out.stdout);
    let mut n = 0;
    for line in text.lines() {
        let v: Vec<f64> = line.split_whitespace().map(|s| s.parse().unwrap_or(f64::NAN)).collect();
        check(v[2] == v[0].round() && v[3] == v[1].round(), format!("self-match moved: {line}"))?;
        n += 1;
    }
    check(n > 0, "no self-matches")?;

    std::fs::write(d.join("id.h"), evaluator::format_homography(&Homography::identity())).map_err(|e| e.to_string())?;
    std::fs::write(d.join("m.txt"), "SEQ identity\nREF id.pgm\nTGT id.pgm id.h\nTGT id.pgm id.h\n").map_err(|e| e.to_string())?;
    let out = run_ok(&["eval-mma", path(&d.join("m.txt")), "--weights", path(&w)])?;
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    check(text.contains("MMA@1 = 1.000"), format!("eval-mma printed {text}"))?;

    let out = run_ok(&["match", path(&img), path(&img), "--weights", path(&w), "--tau", "1.0"])?;
    check(out.stdout.is_empty(), "tau 1.0 produced matches")?;
    Ok(format!("{n} self-matches in place, identity MMA@1 = 1.000, tau 1.0 gives none"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("1 gradient suite", c1_gradients),
        ("2 exhaustive-scan oracle", c2_oracle),
        ("3 algebraic checks", c3_algebra),
        ("4 training convergence", c4_training),
        ("5 filtering properties", c5_filtering),
        ("6 lr schedule", c6_lr),
        ("7 timing model", c7_timing),
        ("8 pose lab", c8_pose),
        ("9 MMA correctness", c9_mma),
        ("10 determinism", c10_determinism),
        ("identity end-to-end", identity_runs),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let t = Instant::now();
        let res = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match res {
            Ok(detail) => println!("PASS  criterion {name:<26} {detail} [{secs:.1} s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  criterion {name:<26} {detail} [{secs:.1} s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
