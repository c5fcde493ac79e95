//! Parameter storage, seeded initialisation and the `S2DW` weight file.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! "S2DW" | version u32 | fingerprint u64 | config_len u32 | config text
//! layer_count u32 | layer*
//! layer := name_len u32 | name | kind u8 | body
//!   kind 0 (conv): out, in, kh, kw, stride, padding (u32 each) | weight f32* | bias f32*
//!   kind 1 (bn):   channels u32 | eps f32 | momentum f32 | gamma | beta | running_mean | running_var
//! ```

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BackboneConfig, BackboneError};
use crate::fsutil;
use crate::tensor::{BatchNormParams, ConvParams, Graph, NodeId, Scalar, Tensor};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"S2DW";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv(ConvParams<f32>),
    BatchNorm(BatchNormParams<f32>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    config: BackboneConfig,
    layers: Vec<(String, Layer)>,
}

/// Layer names and shapes implied by a config, in execution order.
pub(crate) fn layer_plan(cfg: &BackboneConfig) -> Vec<(String, Layer)> {
    let mut plan = Vec::new();
    let mut in_ch = cfg.input_channels;
    let mut block_out = Vec::new();
    for (b, (&width, &convs)) in cfg.trunk_channels.iter().zip(&cfg.convs_per_block).enumerate() {
        for i in 0..convs {
            plan.push((
                format!("block{}.conv{}", b + 1, i + 1),
                Layer::Conv(ConvParams::same(width, in_ch, 3)),
            ));
            in_ch = width;
        }
        block_out.push(width);
    }
    let a = cfg.adaptation_channels;
    for (m, &e) in cfg.extraction_points.iter().enumerate() {
        let src = block_out[e - 1];
        plan.push((
            format!("adapt{}.conv1", m + 1),
            Layer::Conv(ConvParams::same(a, src, cfg.adaptation_kernel)),
        ));
        plan.push((format!("adapt{}.conv2", m + 1), Layer::Conv(ConvParams::same(a, a, 1))));
        plan.push((format!("adapt{}.bn", m + 1), Layer::BatchNorm(BatchNormParams::new(a))));
    }
    plan
}

/// Batch-norm scale at initialisation: `0.5 / sqrt(channels * levels)`.
///
/// Unit-variance descriptors of width `C` over `M` levels correlate to
/// logits with spread about `sqrt(C * M)`, which makes a fresh network
/// confidently wrong. With this scale the self-correlation of a descriptor
/// summed over levels is 0.25.
pub fn initial_gamma(config: &BackboneConfig) -> f32 {
    (0.5 / ((config.adaptation_channels * config.levels()) as f64).sqrt()) as f32
}

impl Weights {
    /// He-uniform conv weights, zero biases, zero beta. Gamma starts at
    /// [`initial_gamma`] so that fresh weights give near-uniform
    /// correspondence maps.
    pub fn init(config: &BackboneConfig) -> Result<Self, BackboneError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut layers = layer_plan(config);
        let gamma = initial_gamma(config);
        for (_, layer) in &mut layers {
            match layer {
                Layer::Conv(p) => {
                    let fan_in = (p.in_ch * p.kh * p.kw) as f64;
                    let bound = (6.0 / fan_in).sqrt();
                    for w in &mut p.weight {
                        *w = rng.random_range(-bound..bound) as f32;
                    }
                }
                Layer::BatchNorm(p) => p.gamma.fill(gamma),
            }
        }
        Ok(Self {
            config: config.clone(),
            layers,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn fingerprint(&self) -> u64 {
        self.config.fingerprint()
    }

    pub fn layers(&self) -> &[(String, Layer)] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&Layer> {
        self.layers.iter().find(|(n, _)| n == name).map(|(_, l)| l)
    }

    pub fn layer_mut(&mut self, name: &str) -> Option<&mut Layer> {
        self.layers.iter_mut().find(|(n, _)| n == name).map(|(_, l)| l)
    }

    pub(crate) fn layer_at_mut(&mut self, i: usize) -> &mut Layer {
        &mut self.layers[i].1
    }

    pub fn check_config(&self, expected: &BackboneConfig) -> Result<(), BackboneError> {
        if self.fingerprint() != expected.fingerprint() {
            return Err(BackboneError::Fingerprint {
                expected: expected.fingerprint(),
                found: self.fingerprint(),
            });
        }
        Ok(())
    }

    /// Trainable tensors in a fixed order: per conv `weight, bias`, per
    /// batch-norm `gamma, beta`.
    pub fn params(&self) -> Vec<&[f32]> {
        let mut out = Vec::new();
        for (_, l) in &self.layers {
            match l {
                Layer::Conv(p) => {
                    out.push(p.weight.as_slice());
                    out.push(p.bias.as_slice());
                }
                Layer::BatchNorm(p) => {
                    out.push(p.gamma.as_slice());
                    out.push(p.beta.as_slice());
                }
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f32>> {
        let mut out = Vec::new();
        for (_, l) in &mut self.layers {
            match l {
                Layer::Conv(p) => {
                    out.push(&mut p.weight);
                    out.push(&mut p.bias);
                }
                Layer::BatchNorm(p) => {
                    out.push(&mut p.gamma);
                    out.push(&mut p.beta);
                }
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// The trainable tensors as graph-ready tensors, in [`Weights::params`] order.
    pub fn param_tensors<T: Scalar>(&self) -> Vec<Tensor<T>> {
        let mut out = Vec::new();
        for (_, l) in &self.layers {
            match l {
                Layer::Conv(p) => {
                    out.push(to_tensor([p.out_ch, p.in_ch, p.kh * p.kw], &p.weight));
                    out.push(to_tensor([p.out_ch, 1, 1], &p.bias));
                }
                Layer::BatchNorm(p) => {
                    out.push(to_tensor([p.channels(), 1, 1], &p.gamma));
                    out.push(to_tensor([p.channels(), 1, 1], &p.beta));
                }
            }
        }
        out
    }

    /// Places every trainable tensor on the tape.
    pub fn to_graph<T: Scalar>(&self, g: &mut Graph<T>, requires_grad: bool) -> ParamNodes {
        let ids = self
            .param_tensors::<T>()
            .into_iter()
            .map(|t| g.leaf(t, requires_grad))
            .collect();
        ParamNodes { ids }
    }

    pub fn save(&self, path: &Path) -> Result<(), BackboneError> {
        fsutil::write_atomic(path, &self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, BackboneError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Loads and checks the file was produced for `expected`'s topology.
    pub fn load_for(path: &Path, expected: &BackboneConfig) -> Result<Self, BackboneError> {
        let w = Self::load(path)?;
        w.check_config(expected)?;
        Ok(w)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHTS_MAGIC);
        put_u32(&mut out, WEIGHTS_VERSION);
        out.extend_from_slice(&self.fingerprint().to_le_bytes());
        let text = self.config.to_text();
        put_u32(&mut out, text.len() as u32);
        out.extend_from_slice(text.as_bytes());
        put_u32(&mut out, self.layers.len() as u32);
        for (name, layer) in &self.layers {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            match layer {
                Layer::Conv(p) => {
                    out.push(0);
                    for v in [p.out_ch, p.in_ch, p.kh, p.kw, p.stride, p.padding] {
                        put_u32(&mut out, v as u32);
                    }
                    put_f32s(&mut out, &p.weight);
                    put_f32s(&mut out, &p.bias);
                }
                Layer::BatchNorm(p) => {
                    out.push(1);
                    put_u32(&mut out, p.channels() as u32);
                    out.extend_from_slice(&p.eps.to_le_bytes());
                    out.extend_from_slice(&p.momentum.to_le_bytes());
                    for v in [&p.gamma, &p.beta, &p.running_mean, &p.running_var] {
                        put_f32s(&mut out, v);
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, BackboneError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != WEIGHTS_MAGIC {
            return Err(BackboneError::Format("bad magic, not a weight file".into()));
        }
        let version = r.u32()?;
        if version != WEIGHTS_VERSION {
            return Err(BackboneError::Version(version));
        }
        let stored_fp = r.u64()?;
        let text_len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(text_len)?)
            .map_err(|_| BackboneError::Format("config text is not UTF-8".into()))?;
        let config = BackboneConfig::parse(text)?;
        if config.fingerprint() != stored_fp {
            return Err(BackboneError::Fingerprint {
                expected: config.fingerprint(),
                found: stored_fp,
            });
        }
        let plan = layer_plan(&config);
        let count = r.u32()? as usize;
        if count != plan.len() {
            return Err(BackboneError::Format(format!(
                "{} layers stored, config implies {}",
                count,
                plan.len()
            )));
        }
        let mut layers = Vec::with_capacity(count);
        for (want_name, want) in plan {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8_lossy(r.take(name_len)?).into_owned();
            if name != want_name {
                return Err(BackboneError::Format(format!("expected layer {}, found {}", want_name, name)));
            }
            let layer = match (r.u8()?, &want) {
                (0, Layer::Conv(w)) => {
                    let mut dims = [0usize; 6];
                    for d in &mut dims {
                        *d = r.u32()? as usize;
                    }
                    let [out_ch, in_ch, kh, kw, stride, padding] = dims;
                    if (out_ch, in_ch, kh, kw) != (w.out_ch, w.in_ch, w.kh, w.kw) {
                        return Err(BackboneError::Format(format!("layer {} has unexpected shape", name)));
                    }
                    Layer::Conv(ConvParams {
                        out_ch,
                        in_ch,
                        kh,
                        kw,
                        weight: r.f32s(out_ch * in_ch * kh * kw)?,
                        bias: r.f32s(out_ch)?,
                        stride,
                        padding,
                    })
                }
                (1, Layer::BatchNorm(w)) => {
                    let c = r.u32()? as usize;
                    if c != w.channels() {
                        return Err(BackboneError::Format(format!("layer {} has unexpected shape", name)));
                    }
                    let eps = r.f32()?;
                    let momentum = r.f32()?;
                    Layer::BatchNorm(BatchNormParams {
                        gamma: r.f32s(c)?,
                        beta: r.f32s(c)?,
                        running_mean: r.f32s(c)?,
                        running_var: r.f32s(c)?,
                        eps,
                        momentum,
                        training_mode: false,
                    })
                }
                (k, _) => return Err(BackboneError::Format(format!("layer {} has kind {}", name, k))),
            };
            layers.push((name, layer));
        }
        if r.pos != bytes.len() {
            return Err(BackboneError::Format("trailing bytes after last layer".into()));
        }
        Ok(Self { config, layers })
    }
}

/// Graph node ids of every trainable tensor, in [`Weights::params`] order.
#[derive(Clone, Debug)]
pub struct ParamNodes {
    pub ids: Vec<NodeId>,
}

impl ParamNodes {
    /// Gradients in [`Weights::params`] order; zero where none flowed.
    pub fn grads<T: Scalar>(&self, g: &Graph<T>) -> Vec<Vec<f32>> {
        self.ids
            .iter()
            .map(|&id| match g.grad(id) {
                Some(v) => v.iter().map(|x| x.to_f64() as f32).collect(),
                None => vec![0.0; g.value(id).len()],
            })
            .collect()
    }
}

fn to_tensor<T: Scalar>(shape: [usize; 3], v: &[f32]) -> Tensor<T> {
    Tensor::from_vec(shape, v.iter().map(|&x| T::from_f64(x as f64)).collect()).expect("param shape")
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], BackboneError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(BackboneError::Truncated)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, BackboneError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, BackboneError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64, BackboneError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f32(&mut self) -> Result<f32, BackboneError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, BackboneError> {
        let b = self.take(n.checked_mul(4).ok_or(BackboneError::Truncated)?)?;
        Ok(b.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_is_bitwise() {
        let w = Weights::init(&BackboneConfig::desk()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.s2dw");
        w.save(&p).unwrap();
        let back = Weights::load(&p).unwrap();
        assert_eq!(back, w);
        assert_eq!(back.to_bytes(), w.to_bytes());
    }

    #[test]
    fn corrupt_magic_and_truncation() {
        let w = Weights::init(&BackboneConfig::desk_two_level()).unwrap();
        let mut b = w.to_bytes();
        let full = b.clone();
        b[1] = b'X';
        assert!(matches!(Weights::from_bytes(&b), Err(BackboneError::Format(_))));
        assert!(matches!(
            Weights::from_bytes(&full[..full.len() - 5]),
            Err(BackboneError::Truncated)
        ));
        let mut v = full.clone();
        v[4] = 7;
        assert!(matches!(Weights::from_bytes(&v), Err(BackboneError::Version(7))));
    }

    #[test]
    fn foreign_config_is_a_fingerprint_error() {
        let w = Weights::init(&BackboneConfig::desk_two_level()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.s2dw");
        w.save(&p).unwrap();
        let err = Weights::load_for(&p, &BackboneConfig::desk()).unwrap_err();
        assert!(matches!(err, BackboneError::Fingerprint { .. }), "{err}");
    }

    #[test]
    fn init_is_seeded() {
        let a = Weights::init(&BackboneConfig::desk()).unwrap();
        let b = Weights::init(&BackboneConfig::desk()).unwrap();
        let c = Weights::init(&BackboneConfig { seed: 1, ..BackboneConfig::desk() }).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.params().iter().all(|p| p.iter().all(|v| v.is_finite())));
    }
}
