//! Seeded finite-difference checks of every differentiable op and of the
//! full training pipeline (image to pyramid to correspondence map to loss).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::{build_graph, image_tensor, BackboneConfig, ParamNodes, Weights};
use crate::image::Image;
use crate::matcher::correspondence_graph;
use crate::tensor::kernels::ConvGeometry;
use crate::tensor::{
    gradcheck, BatchNormMode, BatchNormParams, Graph, GradcheckOptions, GradcheckReport, NodeId, Tensor, TensorError,
};

#[derive(Clone, Debug, Serialize)]
pub struct SuiteEntry {
    pub name: String,
    #[serde(flatten)]
    pub report: GradcheckReport,
}

fn random(shape: [usize; 3], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _| rng.random_range(-1.0..1.0))
}

/// Random values kept at least `gap` away from zero, so ReLU kinks and
/// max-pool ties sit outside the difference stencil.
fn spread(shape: [usize; 3], gap: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _| {
        let v: f64 = rng.random_range(gap..1.0);
        if rng.random::<bool>() { v } else { -v }
    })
}

/// Non-linear scalar readout: correlate with a fixed vector, then
/// cross-entropy against pixel (0, 0).
fn probe(g: &mut Graph<f64>, x: NodeId, seed: u64) -> Result<NodeId, TensorError> {
    let [c, _, _] = g.shape(x);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = g.constant(random([1, c, 1], &mut rng));
    let s = g.correlate(d, x)?;
    g.cross_entropy(s, &[(0, 0)])
}

fn wrap<E: std::fmt::Display>(e: E) -> TensorError {
    TensorError::Invalid {
        op: "pipeline",
        detail: e.to_string(),
    }
}

fn pipeline_check(cfg: BackboneConfig, size: usize, seed: u64, opts: &GradcheckOptions) -> Result<GradcheckReport, TensorError> {
    let weights = Weights::init(&BackboneConfig { seed, ..cfg }).map_err(wrap)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let img_a = Image::from_fn(size, size, |_, _| rng.random_range(0.0..1.0));
    let img_b = Image::from_fn(size, size, |_, _| rng.random_range(0.0..1.0));
    let mut inputs = weights.param_tensors::<f64>();
    let n = inputs.len();
    inputs.push(image_tensor(&img_a, weights.config()));
    inputs.push(image_tensor(&img_b, weights.config()));
    let pts = [(1.0, 2.0), (size as f64 - 2.0, 3.0), (4.0, size as f64 - 1.0)];
    let targets = [(2, 1), (5, 3), (0, size - 1)];
    gradcheck(
        |g, ids| {
            let params = ParamNodes { ids: ids[..n].to_vec() };
            let pa = build_graph(g, ids[n], &weights, &params, BatchNormMode::Train).map_err(wrap)?;
            let pb = build_graph(g, ids[n + 1], &weights, &params, BatchNormMode::Train).map_err(wrap)?;
            let logits = correspondence_graph(g, &pa, &pts, &pb).map_err(wrap)?;
            g.cross_entropy(logits, &targets)
        },
        &inputs,
        opts,
    )
}

/// Runs every check with the default step (1e-5) and tolerance (1e-4).
pub fn run_suite(seed: u64) -> Result<Vec<SuiteEntry>, TensorError> {
    let opts = GradcheckOptions {
        seed,
        ..GradcheckOptions::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut push = |name: &str, r: GradcheckReport| {
        out.push(SuiteEntry {
            name: name.to_string(),
            report: r,
        })
    };

    let geom = |stride| ConvGeometry {
        out_ch: 3,
        in_ch: 2,
        kh: 3,
        kw: 3,
        stride,
        padding: 1,
    };
    for (name, stride) in [("conv2d_relu_sum", 1), ("conv2d_stride2", 2)] {
        let ins = [random([2, 5, 5], &mut rng), random([3, 2, 9], &mut rng), random([3, 1, 1], &mut rng)];
        let r = gradcheck(
            |g, ids| {
                let y = g.conv2d(ids[0], ids[1], ids[2], geom(stride))?;
                if stride == 1 {
                    Ok(g.relu(y))
                } else {
                    probe(g, y, 1)
                }
            },
            &ins,
            &opts,
        )?;
        push(name, r);
    }

    let ins = [spread([2, 4, 4], 0.05, &mut rng)];
    push("relu", gradcheck(|g, ids| {
        let y = g.relu(ids[0]);
        probe(g, y, 2)
    }, &ins, &opts)?);

    for (name, shape) in [("maxpool2", [2, 6, 6]), ("maxpool2_odd", [1, 5, 5])] {
        // distinct values per window so the argmax is stable under the step
        let n = shape[0] * shape[1] * shape[2];
        let mut vals: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
        for i in (1..n).rev() {
            vals.swap(i, rng.random_range(0..=i));
        }
        let ins = [Tensor::from_vec(shape, vals)?];
        push(name, gradcheck(|g, ids| {
            let y = g.maxpool2(ids[0]);
            probe(g, y, 3)
        }, &ins, &opts)?);
    }

    let c = 3;
    let mut bn = BatchNormParams::<f64>::new(c);
    bn.running_mean = vec![0.2, -0.1, 0.4];
    bn.running_var = vec![0.5, 1.5, 0.9];
    for (name, mode) in [("batchnorm_train", BatchNormMode::Train), ("batchnorm_infer", BatchNormMode::Infer)] {
        let ins = [random([c, 4, 4], &mut rng), random([c, 1, 1], &mut rng), random([c, 1, 1], &mut rng)];
        push(name, gradcheck(|g, ids| {
            let (y, _) = g.batchnorm(ids[0], ids[1], ids[2], &bn, mode)?;
            probe(g, y, 4)
        }, &ins, &opts)?);
    }

    let ins = [random([2, 3, 3], &mut rng)];
    push("upsample", gradcheck(|g, ids| {
        let y = g.upsample(ids[0], 8, 7)?;
        probe(g, y, 5)
    }, &ins, &opts)?);

    let ins = [random([3, 5, 6], &mut rng)];
    push("sample_points", gradcheck(|g, ids| {
        let d = g.sample_points(ids[0], &[(0.3, 1.7), (4.6, 3.2), (5.0, 4.0)]);
        let m = g.constant(random([3, 4, 4], &mut ChaCha8Rng::seed_from_u64(6)));
        let s = g.correlate(d, m)?;
        g.cross_entropy(s, &[(1, 2), (0, 0), (3, 3)])
    }, &ins, &opts)?);

    let ins = [random([2, 8, 1], &mut rng), random([8, 5, 5], &mut rng)];
    push("correlate", gradcheck(|g, ids| {
        let s = g.correlate(ids[0], ids[1])?;
        g.cross_entropy(s, &[(4, 1), (2, 2)])
    }, &ins, &opts)?);

    let ins = [random([2, 3, 3], &mut rng), random([2, 3, 3], &mut rng), random([1, 3, 3], &mut rng)];
    push("add_scale_concat", gradcheck(|g, ids| {
        let a = g.add(ids[0], ids[1])?;
        let a = g.scale(a, 1.7);
        let y = g.concat_channels(&[a, ids[2]])?;
        probe(g, y, 7)
    }, &ins, &opts)?);

    let mut logits = random([1, 6, 6], &mut rng);
    logits.data_mut().iter_mut().for_each(|v| *v *= 3.0);
    let ins = [logits];
    push("softmax", gradcheck(|g, ids| {
        let p = g.softmax(ids[0]);
        probe(g, p, 8)
    }, &ins, &opts)?);
    push("softmax_cross_entropy", gradcheck(|g, ids| g.cross_entropy(ids[0], &[(4, 2)]), &ins, &opts)?);

    push("pipeline_two_level_8x8", pipeline_check(BackboneConfig::desk_two_level(), 8, seed, &opts)?);
    push("pipeline_three_level_8x8", pipeline_check(BackboneConfig::desk(), 8, seed, &opts)?);
    Ok(out)
}
