//! Dense rank-3 tensors and the small set of differentiable layers the
//! backbone, the correspondence maps and the loss are built from.
//!
//! Layout is always `(channels, height, width)`, row-major. Every op comes in
//! two flavours: a plain forward function in this module (used at inference)
//! and a recorded node on a [`Graph`] tape (used for training and gradient
//! checks). Both call the same kernels in [`kernels`].

mod graph;
mod gradcheck;
pub mod kernels;
mod scalar;

use std::io::{Read, Write};
use std::path::Path;

pub use gradcheck::{gradcheck, GradcheckOptions, GradcheckReport};
pub use graph::{BatchNormMode, BatchStats, Graph, NodeId};
pub use scalar::Scalar;

use crate::fsutil;

#[derive(thiserror::Error, Debug)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("invalid argument to {op}: {detail}")]
    Invalid { op: &'static str, detail: String },
    #[error("tensor file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Shape {
        op,
        detail: detail.into(),
    }
}

pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Invalid {
        op,
        detail: detail.into(),
    }
}

/// A `(channels, height, width)` array with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: [usize; 3],
    data: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: [usize; 3]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: [usize; 3], value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape[0] * shape[1] * shape[2]],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn from_vec(shape: [usize; 3], data: Vec<T>) -> Result<Self> {
        let n = shape[0] * shape[1] * shape[2];
        if data.len() != n {
            return Err(shape_err(
                "Tensor::from_vec",
                format!("{:?} needs {} values, got {}", shape, n, data.len()),
            ));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn from_fn(shape: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let [c, h, w] = shape;
        let mut data = Vec::with_capacity(c * h * w);
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(ci, y, x));
                }
            }
        }
        Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }
    pub fn channels(&self) -> usize {
        self.shape[0]
    }
    pub fn height(&self) -> usize {
        self.shape[1]
    }
    pub fn width(&self) -> usize {
        self.shape[2]
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub(crate) fn grad_mut_or_zero(&mut self) -> &mut Vec<T> {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![T::zero(); n])
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.shape[1] + y) * self.shape[2] + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        let i = (c * self.shape[1] + y) * self.shape[2] + x;
        self.data[i] = v;
    }

    /// One channel plane as a slice.
    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.shape[1] * self.shape[2];
        &self.data[c * n..(c + 1) * n]
    }

    /// The `C`-vector at pixel `(x, y)`.
    pub fn column(&self, y: usize, x: usize) -> Vec<T> {
        (0..self.shape[0]).map(|c| self.at(c, y, x)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
            grad: None,
            requires_grad: self.requires_grad,
        }
    }
}

/// Parameters of a 2-D convolution. `weight` is laid out `(out, in, kh, kw)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T = f32> {
    pub out_ch: usize,
    pub in_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> ConvParams<T> {
    /// Zero-initialised, stride 1, "same" padding.
    pub fn same(out_ch: usize, in_ch: usize, k: usize) -> Self {
        Self {
            out_ch,
            in_ch,
            kh: k,
            kw: k,
            weight: vec![T::zero(); out_ch * in_ch * k * k],
            bias: vec![T::zero(); out_ch],
            stride: 1,
            padding: (k - 1) / 2,
        }
    }

    pub fn geometry(&self) -> kernels::ConvGeometry {
        kernels::ConvGeometry {
            out_ch: self.out_ch,
            in_ch: self.in_ch,
            kh: self.kh,
            kw: self.kw,
            stride: self.stride,
            padding: self.padding,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.geometry();
        g.validate()?;
        if self.weight.len() != g.weight_len() || self.bias.len() != self.out_ch {
            return Err(shape_err(
                "conv2d",
                format!(
                    "weight has {} values (want {}), bias {} (want {})",
                    self.weight.len(),
                    g.weight_len(),
                    self.bias.len(),
                    self.out_ch
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<T = f32> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: T,
    pub momentum: T,
    pub training_mode: bool,
}

impl<T: Scalar> BatchNormParams<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps: T::from_f64(1e-5),
            momentum: T::from_f64(0.1),
            training_mode: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Blend freshly observed batch statistics into the running estimates.
    pub fn update_running(&mut self, stats: &BatchStats<T>) {
        let m = self.momentum;
        for c in 0..self.channels() {
            self.running_mean[c] = (T::one() - m) * self.running_mean[c] + m * stats.mean[c];
            self.running_var[c] = (T::one() - m) * self.running_var[c] + m * stats.unbiased_var[c];
        }
    }
}

pub fn conv2d<T: Scalar>(input: &Tensor<T>, params: &ConvParams<T>) -> Result<Tensor<T>> {
    params.validate()?;
    let g = params.geometry();
    let (oh, ow) = g.output_hw(input.shape)?;
    let mut out = vec![T::zero(); g.out_ch * oh * ow];
    kernels::conv2d_forward(&g, input.shape, &input.data, &params.weight, &params.bias, &mut out);
    Tensor::from_vec([g.out_ch, oh, ow], out)
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let data = input.data.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
    Tensor::from_vec(input.shape, data).expect("same shape")
}

pub fn maxpool2<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let (shape, data, _) = kernels::maxpool2_forward(input.shape, &input.data);
    Tensor::from_vec(shape, data).expect("pool shape")
}

/// Batch normalisation over the spatial extent of each channel. In training
/// mode the running statistics in `params` are updated in place.
pub fn batchnorm<T: Scalar>(input: &Tensor<T>, params: &mut BatchNormParams<T>) -> Result<Tensor<T>> {
    let mode = if params.training_mode {
        BatchNormMode::Train
    } else {
        BatchNormMode::Infer
    };
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let gamma = g.constant(Tensor::from_vec([params.channels(), 1, 1], params.gamma.clone())?);
    let beta = g.constant(Tensor::from_vec([params.channels(), 1, 1], params.beta.clone())?);
    let (y, stats) = g.batchnorm(x, gamma, beta, params, mode)?;
    if let Some(stats) = stats {
        params.update_running(&stats);
    }
    Ok(g.take_value(y))
}

pub fn bilinear_upsample<T: Scalar>(input: &Tensor<T>, target_h: usize, target_w: usize) -> Result<Tensor<T>> {
    kernels::check_upsample(input.shape, target_h, target_w)?;
    let mut out = vec![T::zero(); input.shape[0] * target_h * target_w];
    kernels::upsample_forward(input.shape, &input.data, target_h, target_w, &mut out);
    Tensor::from_vec([input.shape[0], target_h, target_w], out)
}

/// Dot product of `descriptor` with every pixel column of `map`.
pub fn correlate_1x1<T: Scalar>(descriptor: &[T], map: &Tensor<T>) -> Result<Tensor<T>> {
    if descriptor.len() != map.channels() {
        return Err(shape_err(
            "correlate_1x1",
            format!("descriptor length {} vs {} map channels", descriptor.len(), map.channels()),
        ));
    }
    let hw = map.height() * map.width();
    let mut out = vec![T::zero(); hw];
    kernels::correlate_forward(1, map.channels(), hw, descriptor, &map.data, &mut out);
    Tensor::from_vec([1, map.height(), map.width()], out)
}

/// Softmax over all spatial positions, independently per channel.
pub fn softmax2d<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let mut out = vec![T::zero(); logits.len()];
    kernels::softmax_forward(logits.shape, &logits.data, &mut out);
    Tensor::from_vec(logits.shape, out).expect("same shape")
}

const TENSOR_MAGIC: &[u8; 4] = b"S2DT";
const TENSOR_VERSION: u32 = 1;

/// Writes the raw interchange format: magic, version, 3 x u32 shape, f32 LE payload.
pub fn write_tensor<W: Write>(mut w: W, t: &Tensor<f32>) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&TENSOR_VERSION.to_le_bytes())?;
    for d in t.shape {
        let d = u32::try_from(d).map_err(|_| TensorError::Format("dimension exceeds u32".into()))?;
        w.write_all(&d.to_le_bytes())?;
    }
    for v in &t.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<Tensor<f32>> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(TensorError::Format(format!("bad magic {:?}", magic)));
    }
    let version = read_u32(&mut r)?;
    if version != TENSOR_VERSION {
        return Err(TensorError::Format(format!("unsupported version {}", version)));
    }
    let shape = [
        read_u32(&mut r)? as usize,
        read_u32(&mut r)? as usize,
        read_u32(&mut r)? as usize,
    ];
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| TensorError::Format("shape overflows".into()))?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != n * 4 {
        return Err(TensorError::Format(format!(
            "payload has {} bytes, expected {}",
            bytes.len(),
            n * 4
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::from_vec(shape, data)
}

pub fn save_tensor(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let mut buf = Vec::with_capacity(20 + 4 * t.len());
    write_tensor(&mut buf, t)?;
    fsutil::write_atomic(path, &buf)?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<Tensor<f32>> {
    read_tensor(std::io::BufReader::new(std::fs::File::open(path)?))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => TensorError::Format("truncated header".into()),
        _ => TensorError::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seeded(shape: [usize; 3], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let input = Tensor::<f32>::full([1, 3, 3], 1.0);
        let mut p = ConvParams::same(1, 1, 3);
        p.weight[4] = 1.0;
        assert_eq!(conv2d(&input, &p).unwrap(), input);
    }

    #[test]
    fn zero_kernel_annihilates() {
        let input = seeded([2, 5, 4], 3).cast::<f32>();
        let p = ConvParams::same(3, 2, 3);
        let out = conv2d(&input, &p).unwrap();
        assert_eq!(out.shape(), [3, 5, 4]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_channel_mismatch_is_reported() {
        let input = Tensor::<f32>::zeros([2, 4, 4]);
        let p = ConvParams::same(1, 3, 3);
        let err = conv2d(&input, &p).unwrap_err();
        assert!(matches!(err, TensorError::Shape { .. }), "{err}");
    }

    #[test]
    fn conv_output_size_with_stride() {
        let input = Tensor::<f32>::zeros([1, 7, 6]);
        let mut p = ConvParams::same(1, 1, 3);
        p.stride = 2;
        p.padding = 0;
        // floor((7 - 3) / 2) + 1 = 3, floor((6 - 3) / 2) + 1 = 2
        assert_eq!(conv2d(&input, &p).unwrap().shape(), [1, 3, 2]);
    }

    #[test]
    fn relu_examples() {
        let t = Tensor::from_vec([1, 1, 3], vec![-1.0f32, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&t).data(), &[0.0, 0.0, 2.0]);
        let neg = Tensor::<f32>::full([2, 2, 2], -3.0);
        assert!(relu(&neg).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_gradient_masks_non_positive() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec([1, 1, 2], vec![-1.0, 2.0]).unwrap(), true);
        let y = g.relu(x);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn maxpool_examples() {
        let t = Tensor::from_vec([1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(maxpool2(&t).data(), &[4.0]);
        let c = Tensor::<f32>::full([2, 6, 4], 0.5);
        assert_eq!(maxpool2(&c), Tensor::full([2, 3, 2], 0.5));
    }

    #[test]
    fn maxpool_odd_size_replicates_edge() {
        let t = Tensor::from_fn([1, 3, 3], |_, y, x| (y * 3 + x) as f32);
        let p = maxpool2(&t);
        assert_eq!(p.shape(), [1, 2, 2]);
        assert_eq!(p.data(), &[4.0, 5.0, 7.0, 8.0]);
    }

    #[test]
    fn maxpool_backward_ties_go_to_first() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full([1, 2, 2], 1.0), true);
        let y = g.maxpool2(x);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn batchnorm_training_normalises() {
        let input = seeded([3, 5, 7], 11).cast::<f32>();
        let mut p = BatchNormParams::<f32>::new(3);
        p.training_mode = true;
        let out = batchnorm(&input, &mut p).unwrap();
        for c in 0..3 {
            let plane = out.plane(c);
            let n = plane.len() as f64;
            let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = plane.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-5, "mean {mean}");
            // eps = 1e-5 shrinks the variance slightly below one.
            assert!((var - 1.0).abs() < 1e-3, "var {var}");
        }
        assert!(p.running_mean.iter().any(|&m| m != 0.0));
    }

    #[test]
    fn batchnorm_identity_stats_passthrough() {
        let input = seeded([2, 4, 4], 5).cast::<f32>();
        let mut p = BatchNormParams::<f32>::new(2);
        let out = batchnorm(&input, &mut p).unwrap();
        for (a, b) in out.data().iter().zip(input.data()) {
            assert!((a - b).abs() < 1e-5 * b.abs().max(1.0));
        }
    }

    #[test]
    fn batchnorm_rejects_empty_spatial_extent() {
        let input = Tensor::<f32>::zeros([2, 0, 3]);
        let mut p = BatchNormParams::<f32>::new(2);
        p.training_mode = true;
        assert!(batchnorm(&input, &mut p).is_err());
    }

    #[test]
    fn upsample_examples() {
        let one = Tensor::<f32>::full([1, 1, 1], 2.5);
        assert_eq!(bilinear_upsample(&one, 3, 5).unwrap(), Tensor::full([1, 3, 5], 2.5));
        let row = Tensor::from_vec([1, 1, 2], vec![0.0f64, 1.0]).unwrap();
        let up = bilinear_upsample(&row, 1, 4).unwrap();
        let want = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for (a, b) in up.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(bilinear_upsample(&row, 1, 1).is_err());
    }

    #[test]
    fn correlate_examples() {
        let map = seeded([4, 3, 3], 9);
        let zero = correlate_1x1(&[0.0; 4], &map).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));

        let d = [1.0, -2.0, 0.5, 3.0];
        let mut m = Tensor::<f64>::zeros([4, 3, 3]);
        for (c, &v) in d.iter().enumerate() {
            m.set(c, 1, 2, v);
        }
        let out = correlate_1x1(&d, &m).unwrap();
        for y in 0..3 {
            for x in 0..3 {
                let want = if (y, x) == (1, 2) { 14.25 } else { 0.0 };
                assert_eq!(out.at(0, y, x), want);
            }
        }
        assert!(correlate_1x1(&[1.0; 3], &map).is_err());
    }

    #[test]
    fn softmax_examples() {
        let u = Tensor::<f32>::full([1, 2, 2], 0.7);
        assert!(softmax2d(&u).data().iter().all(|&p| (p - 0.25).abs() < 1e-7));
        let t = Tensor::from_vec([1, 2, 2], vec![0.0f64, 1.0, 2.0, 3.0]).unwrap();
        let p = softmax2d(&t);
        let want = [0.0320586, 0.0871443, 0.2368828, 0.6439142];
        for (a, b) in p.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn tensor_file_round_trip_and_bad_magic() {
        let t = seeded([2, 3, 4], 1).cast::<f32>();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], b"S2DT");
        assert_eq!(read_tensor(&buf[..]).unwrap(), t);
        buf[0] = b'X';
        assert!(matches!(read_tensor(&buf[..]), Err(TensorError::Format(_))));
        let mut short = Vec::new();
        write_tensor(&mut short, &t).unwrap();
        short.truncate(short.len() - 3);
        assert!(read_tensor(&short[..]).is_err());
    }
}
