//! Forward and backward kernels on flat buffers. Shapes are `(c, h, w)`.
//!
//! Backward kernels accumulate (`+=`) into gradient buffers so that a value
//! consumed by several ops collects all contributions.

use super::{invalid, shape_err, Result, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub out_ch: usize,
    pub in_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.kh % 2 == 0 || self.kw % 2 == 0 {
            return Err(invalid("conv2d", format!("kernel {}x{} must be odd", self.kh, self.kw)));
        }
        if self.stride == 0 {
            return Err(invalid("conv2d", "stride must be positive"));
        }
        Ok(())
    }

    pub fn weight_len(&self) -> usize {
        self.out_ch * self.in_ch * self.kh * self.kw
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    pub fn output_hw(&self, input: [usize; 3]) -> Result<(usize, usize)> {
        if input[0] != self.in_ch {
            return Err(shape_err(
                "conv2d",
                format!("input has {} channels, kernel expects {}", input[0], self.in_ch),
            ));
        }
        let ph = input[1] + 2 * self.padding;
        let pw = input[2] + 2 * self.padding;
        if ph < self.kh || pw < self.kw {
            return Err(shape_err(
                "conv2d",
                format!(
                    "padded input {}x{} smaller than kernel {}x{}",
                    ph, pw, self.kh, self.kw
                ),
            ));
        }
        Ok(((ph - self.kh) / self.stride + 1, (pw - self.kw) / self.stride + 1))
    }
}

fn im2col<T: Scalar>(g: &ConvGeometry, shape: [usize; 3], input: &[T], oh: usize, ow: usize, cols: &mut [T]) {
    let [_, h, w] = shape;
    let n = oh * ow;
    let (s, p) = (g.stride as isize, g.padding as isize);
    for ci in 0..g.in_ch {
        let plane = &input[ci * h * w..(ci + 1) * h * w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..oh {
                    let iy = oy as isize * s + ky as isize - p;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize * s + kx as isize - p;
                        *v = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(g: &ConvGeometry, shape: [usize; 3], cols: &[T], oh: usize, ow: usize, dinput: &mut [T]) {
    let [_, h, w] = shape;
    let n = oh * ow;
    let (s, p) = (g.stride as isize, g.padding as isize);
    for ci in 0..g.in_ch {
        let plane = &mut dinput[ci * h * w..(ci + 1) * h * w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..oh {
                    let iy = oy as isize * s + ky as isize - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = ox as isize * s + kx as isize - p;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `out` must have `out_ch * oh * ow` elements; it is overwritten.
pub fn conv2d_forward<T: Scalar>(g: &ConvGeometry, shape: [usize; 3], input: &[T], weight: &[T], bias: &[T], out: &mut [T]) {
    let (oh, ow) = g.output_hw(shape).expect("validated by caller");
    let n = oh * ow;
    let k = g.patch_len();
    let mut cols = vec![T::zero(); k * n];
    im2col(g, shape, input, oh, ow, &mut cols);
    for (oc, row) in out.chunks_mut(n).enumerate() {
        row.fill(bias[oc]);
    }
    T::gemm(
        g.out_ch, k, n, T::one(), weight, k as isize, 1, &cols, n as isize, 1, T::one(), out, n as isize, 1,
    );
}

pub struct ConvGrads<'a, T> {
    pub input: Option<&'a mut [T]>,
    pub weight: Option<&'a mut [T]>,
    pub bias: Option<&'a mut [T]>,
}

pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeometry,
    shape: [usize; 3],
    input: &[T],
    weight: &[T],
    dout: &[T],
    grads: ConvGrads<'_, T>,
) {
    let (oh, ow) = g.output_hw(shape).expect("validated by caller");
    let n = oh * ow;
    let k = g.patch_len();
    if let Some(db) = grads.bias {
        for (oc, row) in dout.chunks(n).enumerate() {
            let mut s = T::zero();
            for &v in row {
                s += v;
            }
            db[oc] += s;
        }
    }
    if let Some(dw) = grads.weight {
        let mut cols = vec![T::zero(); k * n];
        im2col(g, shape, input, oh, ow, &mut cols);
        T::gemm(
            g.out_ch, n, k, T::one(), dout, n as isize, 1, &cols, 1, n as isize, T::one(), dw, k as isize, 1,
        );
    }
    if let Some(dx) = grads.input {
        let mut dcols = vec![T::zero(); k * n];
        T::gemm(
            k, g.out_ch, n, T::one(), weight, 1, k as isize, dout, n as isize, 1, T::zero(), &mut dcols, n as isize, 1,
        );
        col2im_add(g, shape, &dcols, oh, ow, dx);
    }
}

/// 2x2 stride-2 max pooling. Odd trailing rows/columns are padded by
/// replicating the edge, which amounts to clamping the window. Returns the
/// output shape, values and the flat input index of each window's maximum
/// (first in row-major order on ties).
pub fn maxpool2_forward<T: Scalar>(shape: [usize; 3], input: &[T]) -> ([usize; 3], Vec<T>, Vec<usize>) {
    let [c, h, w] = shape;
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        let base = ci * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for y in 2 * oy..(2 * oy + 2).min(h) {
                    for x in 2 * ox..(2 * ox + 2).min(w) {
                        let i = base + y * w + x;
                        if input[i] > input[best] {
                            best = i;
                        }
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    ([c, oh, ow], out, arg)
}

pub fn check_upsample(shape: [usize; 3], th: usize, tw: usize) -> Result<()> {
    if shape[1] == 0 || shape[2] == 0 {
        return Err(invalid("bilinear_upsample", "empty input"));
    }
    if th < shape[1] || tw < shape[2] {
        return Err(invalid(
            "bilinear_upsample",
            format!("target {}x{} smaller than source {}x{}", th, tw, shape[1], shape[2]),
        ));
    }
    Ok(())
}

/// Align-corners sampling table for one axis: `(i0, i1, frac)` per output index.
pub fn axis_table<T: Scalar>(n_in: usize, n_out: usize) -> Vec<(usize, usize, T)> {
    (0..n_out)
        .map(|o| {
            if n_out == 1 || n_in == 1 {
                return (0, 0, T::zero());
            }
            let src = T::from_usize(o * (n_in - 1)) / T::from_usize(n_out - 1);
            lerp_index(src, n_in)
        })
        .collect()
}

#[inline]
fn lerp_index<T: Scalar>(src: T, n: usize) -> (usize, usize, T) {
    let f = src.floor();
    let i0 = (f.to_f64() as usize).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, src - T::from_usize(i0))
}

#[inline]
pub fn blend<T: Scalar>(a: T, b: T, c: T, d: T, wx: T, wy: T) -> T {
    let one = T::one();
    (one - wy) * ((one - wx) * a + wx * b) + wy * ((one - wx) * c + wx * d)
}

pub fn upsample_forward<T: Scalar>(shape: [usize; 3], input: &[T], th: usize, tw: usize, out: &mut [T]) {
    let [c, h, w] = shape;
    let ty = axis_table::<T>(h, th);
    let tx = axis_table::<T>(w, tw);
    for ci in 0..c {
        let src = &input[ci * h * w..(ci + 1) * h * w];
        let dst = &mut out[ci * th * tw..(ci + 1) * th * tw];
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            let r0 = &src[y0 * w..(y0 + 1) * w];
            let r1 = &src[y1 * w..(y1 + 1) * w];
            let line = &mut dst[oy * tw..(oy + 1) * tw];
            for (v, &(x0, x1, wx)) in line.iter_mut().zip(&tx) {
                *v = blend(r0[x0], r0[x1], r1[x0], r1[x1], wx, wy);
            }
        }
    }
}

pub fn upsample_backward<T: Scalar>(shape: [usize; 3], th: usize, tw: usize, dout: &[T], dinput: &mut [T]) {
    let [c, h, w] = shape;
    let ty = axis_table::<T>(h, th);
    let tx = axis_table::<T>(w, tw);
    let one = T::one();
    for ci in 0..c {
        let src = &dout[ci * th * tw..(ci + 1) * th * tw];
        let dst = &mut dinput[ci * h * w..(ci + 1) * h * w];
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let g = src[oy * tw + ox];
                dst[y0 * w + x0] += (one - wy) * (one - wx) * g;
                dst[y0 * w + x1] += (one - wy) * wx * g;
                dst[y1 * w + x0] += wy * (one - wx) * g;
                dst[y1 * w + x1] += wy * wx * g;
            }
        }
    }
}

/// Bilinear lookup position for a fractional `(x, y)`, clamped to the map.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplePos<T> {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
    pub wx: T,
    pub wy: T,
}

pub fn sample_pos<T: Scalar>(h: usize, w: usize, x: T, y: T) -> SamplePos<T> {
    let clamp = |v: T, n: usize| {
        let hi = T::from_usize(n - 1);
        if v < T::zero() {
            T::zero()
        } else if v > hi {
            hi
        } else {
            v
        }
    };
    let (x0, x1, wx) = lerp_index(clamp(x, w), w);
    let (y0, y1, wy) = lerp_index(clamp(y, h), h);
    SamplePos { x0, x1, y0, y1, wx, wy }
}

/// Gathers the channel column at each sample position; output is `(k, c)`.
pub fn sample_forward<T: Scalar>(shape: [usize; 3], map: &[T], pos: &[SamplePos<T>], out: &mut [T]) {
    let [c, h, w] = shape;
    for (k, p) in pos.iter().enumerate() {
        for ci in 0..c {
            let plane = &map[ci * h * w..(ci + 1) * h * w];
            out[k * c + ci] = blend(
                plane[p.y0 * w + p.x0],
                plane[p.y0 * w + p.x1],
                plane[p.y1 * w + p.x0],
                plane[p.y1 * w + p.x1],
                p.wx,
                p.wy,
            );
        }
    }
}

pub fn sample_backward<T: Scalar>(shape: [usize; 3], pos: &[SamplePos<T>], dout: &[T], dmap: &mut [T]) {
    let [c, h, w] = shape;
    let one = T::one();
    for (k, p) in pos.iter().enumerate() {
        for ci in 0..c {
            let g = dout[k * c + ci];
            let plane = &mut dmap[ci * h * w..(ci + 1) * h * w];
            plane[p.y0 * w + p.x0] += (one - p.wy) * (one - p.wx) * g;
            plane[p.y0 * w + p.x1] += (one - p.wy) * p.wx * g;
            plane[p.y1 * w + p.x0] += p.wy * (one - p.wx) * g;
            plane[p.y1 * w + p.x1] += p.wy * p.wx * g;
        }
    }
}

/// `out[k, p] = sum_d desc[k, d] * map[d, p]`, summed in channel order.
pub fn correlate_forward<T: Scalar>(k: usize, c: usize, hw: usize, desc: &[T], map: &[T], out: &mut [T]) {
    for (kk, row) in out.chunks_mut(hw).take(k).enumerate() {
        row.fill(T::zero());
        for d in 0..c {
            let a = desc[kk * c + d];
            let plane = &map[d * hw..(d + 1) * hw];
            for (o, &m) in row.iter_mut().zip(plane) {
                *o += a * m;
            }
        }
    }
}

pub fn correlate_backward<T: Scalar>(
    k: usize,
    c: usize,
    hw: usize,
    desc: &[T],
    map: &[T],
    dout: &[T],
    ddesc: Option<&mut [T]>,
    dmap: Option<&mut [T]>,
) {
    if let Some(dd) = ddesc {
        // (k x hw) * (hw x c)
        T::gemm(k, hw, c, T::one(), dout, hw as isize, 1, map, 1, hw as isize, T::one(), dd, c as isize, 1);
    }
    if let Some(dm) = dmap {
        // (c x k) * (k x hw)
        T::gemm(c, k, hw, T::one(), desc, 1, c as isize, dout, hw as isize, 1, T::one(), dm, hw as isize, 1);
    }
}

/// Per-channel softmax over the spatial plane.
pub fn softmax_forward<T: Scalar>(shape: [usize; 3], input: &[T], out: &mut [T]) {
    let hw = shape[1] * shape[2];
    if hw == 0 {
        return;
    }
    for (src, dst) in input.chunks(hw).zip(out.chunks_mut(hw)) {
        let max = src.iter().copied().fold(T::neg_infinity(), |m, v| if v > m { v } else { m });
        let mut sum = T::zero();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d = *d / sum;
        }
    }
}

pub fn softmax_backward<T: Scalar>(shape: [usize; 3], probs: &[T], dout: &[T], dinput: &mut [T]) {
    let hw = shape[1] * shape[2];
    if hw == 0 {
        return;
    }
    for ((p, g), dx) in probs.chunks(hw).zip(dout.chunks(hw)).zip(dinput.chunks_mut(hw)) {
        let mut dot = T::zero();
        for (&pi, &gi) in p.iter().zip(g) {
            dot += pi * gi;
        }
        for ((d, &pi), &gi) in dx.iter_mut().zip(p).zip(g) {
            *d += pi * (gi - dot);
        }
    }
}

/// Natural log of the partition function of one plane.
pub fn log_sum_exp<T: Scalar>(plane: &[T]) -> T {
    let max = plane.iter().copied().fold(T::neg_infinity(), |m, v| if v > m { v } else { m });
    let mut sum = T::zero();
    for &v in plane {
        sum += (v - max).exp();
    }
    max + sum.ln()
}

/// Per-channel training statistics and the normalised activations.
pub struct BatchNormCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub fn batchnorm_train_forward<T: Scalar>(
    shape: [usize; 3],
    input: &[T],
    gamma: &[T],
    beta: &[T],
    eps: T,
    out: &mut [T],
) -> BatchNormCache<T> {
    let [c, h, w] = shape;
    let n = h * w;
    let nf = T::from_usize(n);
    let mut cache = BatchNormCache {
        xhat: vec![T::zero(); c * n],
        inv_std: Vec::with_capacity(c),
        mean: Vec::with_capacity(c),
        var: Vec::with_capacity(c),
    };
    for ci in 0..c {
        let x = &input[ci * n..(ci + 1) * n];
        let mut mean = T::zero();
        for &v in x {
            mean += v;
        }
        mean = mean / nf;
        let mut var = T::zero();
        for &v in x {
            var += (v - mean) * (v - mean);
        }
        var = var / nf;
        let inv = T::one() / (var + eps).sqrt();
        let xh = &mut cache.xhat[ci * n..(ci + 1) * n];
        let y = &mut out[ci * n..(ci + 1) * n];
        for ((xh, y), &v) in xh.iter_mut().zip(y.iter_mut()).zip(x) {
            *xh = (v - mean) * inv;
            *y = gamma[ci] * *xh + beta[ci];
        }
        cache.inv_std.push(inv);
        cache.mean.push(mean);
        cache.var.push(var);
    }
    cache
}

pub fn batchnorm_train_backward<T: Scalar>(
    shape: [usize; 3],
    cache: &BatchNormCache<T>,
    gamma: &[T],
    dout: &[T],
    dinput: Option<&mut [T]>,
    dgamma: Option<&mut [T]>,
    dbeta: Option<&mut [T]>,
) {
    let [c, h, w] = shape;
    let n = h * w;
    let nf = T::from_usize(n);
    let mut sums = Vec::with_capacity(c);
    for ci in 0..c {
        let g = &dout[ci * n..(ci + 1) * n];
        let xh = &cache.xhat[ci * n..(ci + 1) * n];
        let mut sg = T::zero();
        let mut sgx = T::zero();
        for (&gi, &xi) in g.iter().zip(xh) {
            sg += gi;
            sgx += gi * xi;
        }
        sums.push((sg, sgx));
    }
    if let Some(db) = dbeta {
        for ci in 0..c {
            db[ci] += sums[ci].0;
        }
    }
    if let Some(dg) = dgamma {
        for ci in 0..c {
            dg[ci] += sums[ci].1;
        }
    }
    if let Some(dx) = dinput {
        for ci in 0..c {
            let (sg, sgx) = sums[ci];
            let k = gamma[ci] * cache.inv_std[ci] / nf;
            let g = &dout[ci * n..(ci + 1) * n];
            let xh = &cache.xhat[ci * n..(ci + 1) * n];
            let d = &mut dx[ci * n..(ci + 1) * n];
            for ((di, &gi), &xi) in d.iter_mut().zip(g).zip(xh) {
                *di += k * (nf * gi - sg - xi * sgx);
            }
        }
    }
}
