//! Multi-level feature extractor.
//!
//! A VGG-style trunk of 3x3 conv + ReLU blocks with 2x2 max-pools between
//! some blocks. Selected block outputs are passed through small adaptation
//! heads that all emit the same descriptor width, giving one dense map per
//! level at downscale `2^(pools before it)`.

mod config;
mod weights;

pub use config::BackboneConfig;
pub use weights::{initial_gamma, Layer, ParamNodes, Weights, WEIGHTS_MAGIC, WEIGHTS_VERSION};

use crate::image::Image;
use crate::tensor::{kernels, BatchNormMode, BatchNormParams, BatchStats, Graph, NodeId, Scalar, Tensor, TensorError};

#[derive(thiserror::Error, Debug)]
pub enum BackboneError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("weights fingerprint {found:#018x} does not match config fingerprint {expected:#018x}")]
    Fingerprint { expected: u64, found: u64 },
    #[error("unsupported weight file version {0}")]
    Version(u32),
    #[error("weight file format: {0}")]
    Format(String),
    #[error("weight file is truncated")]
    Truncated,
    #[error("keypoint {index} at ({x}, {y}) lies outside the {width}x{height} image")]
    KeypointOutOfBounds {
        index: usize,
        x: f32,
        y: f32,
        width: usize,
        height: usize,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T, E = BackboneError> = std::result::Result<T, E>;

/// Dense descriptor maps, one per level, sharing a channel count.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor<f32>>,
    pub scales: Vec<usize>,
    /// `(height, width)` of the image the pyramid was computed from.
    pub source_shape: (usize, usize),
    /// Fingerprint of the weights that produced it.
    pub fingerprint: u64,
}

impl FeaturePyramid {
    pub fn channels(&self) -> usize {
        self.levels.first().map_or(0, Tensor::channels)
    }

    pub fn height(&self) -> usize {
        self.source_shape.0
    }

    pub fn width(&self) -> usize {
        self.source_shape.1
    }
}

/// Graph-side result of [`build_graph`].
pub struct GraphPyramid<T> {
    pub levels: Vec<NodeId>,
    pub scales: Vec<usize>,
    pub source_shape: (usize, usize),
    /// Batch statistics of each adaptation batch-norm (training mode only),
    /// keyed by layer index in [`Weights::layers`].
    pub bn_stats: Vec<(usize, BatchStats<T>)>,
}

/// Image as a `(channels, h, w)` tensor matching the config's input width.
pub fn image_tensor<T: Scalar>(image: &Image, cfg: &BackboneConfig) -> Tensor<T> {
    let t = match (image.channels, cfg.input_channels) {
        (1, 3) => {
            let g = image.to_tensor();
            Tensor::from_fn([3, image.height, image.width], |_, y, x| g.at(0, y, x))
        }
        (3, 1) => image.to_gray().to_tensor(),
        _ => image.to_tensor(),
    };
    t.cast()
}

/// Records the backbone on `g`. `params` must come from
/// [`Weights::to_graph`] (or hold leaves in the same order).
pub fn build_graph<T: Scalar>(
    g: &mut Graph<T>,
    input: NodeId,
    weights: &Weights,
    params: &ParamNodes,
    mode: BatchNormMode,
) -> Result<GraphPyramid<T>> {
    let cfg = weights.config();
    let [_, h, w] = g.shape(input);
    if h == 0 || w == 0 {
        return Err(BackboneError::Config("empty image".into()));
    }
    let mut cur = Cursor { layer: 0, param: 0 };
    let next_conv = |cur: &mut Cursor, g: &mut Graph<T>, x: NodeId| -> Result<NodeId> {
        let Layer::Conv(p) = &weights.layers()[cur.layer].1 else {
            unreachable!("layer plan puts convs here")
        };
        let y = g.conv2d(x, params.ids[cur.param], params.ids[cur.param + 1], p.geometry())?;
        cur.layer += 1;
        cur.param += 2;
        Ok(y)
    };

    let mut x = input;
    let mut taps = Vec::new();
    for b in 1..=cfg.trunk_channels.len() {
        for _ in 0..cfg.convs_per_block[b - 1] {
            let y = next_conv(&mut cur, g, x)?;
            x = g.relu(y);
        }
        if cfg.extraction_points.contains(&b) {
            taps.push(x);
        }
        if cfg.pool_after.contains(&b) {
            x = g.maxpool2(x);
        }
    }

    let mut levels = Vec::with_capacity(taps.len());
    let mut bn_stats = Vec::new();
    for tap in taps {
        let y = next_conv(&mut cur, g, tap)?;
        let y = g.relu(y);
        let y = next_conv(&mut cur, g, y)?;
        let bn_index = cur.layer;
        let Layer::BatchNorm(bn) = &weights.layers()[bn_index].1 else {
            unreachable!("layer plan puts a batch-norm after each head")
        };
        let bn_t = cast_bn::<T>(bn, mode);
        let (out, stats) = g.batchnorm(y, params.ids[cur.param], params.ids[cur.param + 1], &bn_t, mode)?;
        cur.layer += 1;
        cur.param += 2;
        if let Some(s) = stats {
            bn_stats.push((bn_index, s));
        }
        levels.push(out);
    }
    Ok(GraphPyramid {
        levels,
        scales: cfg.scales(),
        source_shape: (h, w),
        bn_stats,
    })
}

struct Cursor {
    layer: usize,
    param: usize,
}

fn cast_bn<T: Scalar>(bn: &BatchNormParams<f32>, mode: BatchNormMode) -> BatchNormParams<T> {
    let cast = |v: &[f32]| v.iter().map(|&x| T::from_f64(x as f64)).collect::<Vec<T>>();
    BatchNormParams {
        gamma: cast(&bn.gamma),
        beta: cast(&bn.beta),
        running_mean: cast(&bn.running_mean),
        running_var: cast(&bn.running_var),
        eps: T::from_f64(bn.eps as f64),
        momentum: T::from_f64(bn.momentum as f64),
        training_mode: mode == BatchNormMode::Train,
    }
}

fn run(image: &Image, weights: &Weights, mode: BatchNormMode) -> Result<(FeaturePyramid, Vec<(usize, BatchStats<f32>)>)> {
    if image.width == 0 || image.height == 0 {
        return Err(BackboneError::Config("empty image".into()));
    }
    let mut g = Graph::<f32>::new();
    let params = weights.to_graph(&mut g, false);
    let input = g.constant(image_tensor(image, weights.config()));
    let gp = build_graph(&mut g, input, weights, &params, mode)?;
    let levels = gp.levels.iter().map(|&id| g.take_value(id)).collect();
    Ok((
        FeaturePyramid {
            levels,
            scales: gp.scales,
            source_shape: gp.source_shape,
            fingerprint: weights.fingerprint(),
        },
        gp.bn_stats,
    ))
}

/// Inference forward pass (batch-norm uses running statistics).
pub fn forward(image: &Image, weights: &Weights) -> Result<FeaturePyramid> {
    Ok(run(image, weights, BatchNormMode::Infer)?.0)
}

/// Training-mode forward pass: batch statistics normalise the output and are
/// folded into the running estimates.
pub fn forward_train(image: &Image, weights: &mut Weights) -> Result<FeaturePyramid> {
    let (pyr, stats) = run(image, weights, BatchNormMode::Train)?;
    apply_bn_stats(weights, &stats);
    Ok(pyr)
}

pub fn apply_bn_stats(weights: &mut Weights, stats: &[(usize, BatchStats<f32>)]) {
    for (idx, s) in stats {
        if let Layer::BatchNorm(bn) = weights.layer_at_mut(*idx) {
            bn.update_running(s);
        }
    }
}

/// Per-level descriptors of a keypoint set.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseDescriptorSet {
    /// One `(n_keypoints, channels, 1)` tensor per level.
    pub levels: Vec<Tensor<f32>>,
    /// Keypoint coordinates divided by each level's scale.
    pub coords: Vec<Vec<(f32, f32)>>,
}

impl SparseDescriptorSet {
    pub fn len(&self) -> usize {
        self.coords.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.levels.first().map_or(0, |t| t.shape()[1])
    }

    /// Descriptor of keypoint `n` at level `m`.
    pub fn descriptor(&self, n: usize, m: usize) -> &[f32] {
        let c = self.channels();
        &self.levels[m].data()[n * c..(n + 1) * c]
    }

    /// All levels' descriptors of keypoint `n`, concatenated.
    pub fn concatenated(&self, n: usize) -> Vec<f32> {
        (0..self.levels.len()).flat_map(|m| self.descriptor(n, m).iter().copied()).collect()
    }
}

/// Samples every level at each keypoint. Coordinates are divided by the
/// level's scale and bilinearly interpolated (clamped to the border).
pub fn describe_sparse(pyramid: &FeaturePyramid, keypoints: &[(f32, f32)]) -> Result<SparseDescriptorSet> {
    let (h, w) = pyramid.source_shape;
    for (index, &(x, y)) in keypoints.iter().enumerate() {
        if !(x >= 0.0 && y >= 0.0 && x < w as f32 && y < h as f32) {
            return Err(BackboneError::KeypointOutOfBounds {
                index,
                x,
                y,
                width: w,
                height: h,
            });
        }
    }
    let mut levels = Vec::with_capacity(pyramid.levels.len());
    let mut coords = Vec::with_capacity(pyramid.levels.len());
    for (level, &s) in pyramid.levels.iter().zip(&pyramid.scales) {
        let [c, lh, lw] = level.shape();
        let pts: Vec<(f32, f32)> = keypoints.iter().map(|&(x, y)| (x / s as f32, y / s as f32)).collect();
        let pos: Vec<_> = pts.iter().map(|&(x, y)| kernels::sample_pos(lh, lw, x, y)).collect();
        let mut out = vec![0.0; keypoints.len() * c];
        kernels::sample_forward(level.shape(), level.data(), &pos, &mut out);
        levels.push(Tensor::from_vec([keypoints.len(), c, 1], out)?);
        coords.push(pts);
    }
    Ok(SparseDescriptorSet { levels, coords })
}
