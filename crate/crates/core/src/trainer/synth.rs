//! Procedural base images and random-homography training pairs.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::TrainError;
use crate::evaluator::Homography;
use crate::image::Image;

/// Clutter of filled shapes over a smooth gradient with fine texture.
pub fn synthetic_base<R: Rng>(width: usize, height: usize, rng: &mut R) -> Image {
    let (w, h) = (width as f32, height as f32);
    let g0: f32 = rng.random_range(0.2..0.8);
    let gx: f32 = rng.random_range(-0.3..0.3) / w;
    let gy: f32 = rng.random_range(-0.3..0.3) / h;
    let mut img = Image::from_fn(width, height, |x, y| g0 + gx * x as f32 + gy * y as f32);

    let area = (w * h) / (24.0 * 24.0);
    let shapes = (area * 3.0).ceil() as usize + 4;
    for _ in 0..shapes {
        let v: f32 = rng.random_range(0.0..1.0);
        let cx: f32 = rng.random_range(0.0..w);
        let cy: f32 = rng.random_range(0.0..h);
        let rx: f32 = rng.random_range(2.0..(w / 6.0).max(3.0));
        let ry: f32 = rng.random_range(2.0..(h / 6.0).max(3.0));
        let theta: f32 = rng.random_range(0.0..std::f32::consts::PI);
        let (st, ct) = theta.sin_cos();
        let kind = rng.random_range(0..3);
        let inside = |x: f32, y: f32| {
            let dx = x - cx;
            let dy = y - cy;
            let u = (ct * dx + st * dy) / rx;
            let t = (-st * dx + ct * dy) / ry;
            match kind {
                0 => u.abs() <= 1.0 && t.abs() <= 1.0,
                1 => u * u + t * t <= 1.0,
                _ => t >= -1.0 && t <= 1.0 && u.abs() <= (1.0 - t) * 0.5,
            }
        };
        let reach = rx.max(ry) * 1.5;
        let x0 = (cx - reach).floor().max(0.0) as usize;
        let x1 = ((cx + reach).ceil() as usize).min(width);
        let y0 = (cy - reach).floor().max(0.0) as usize;
        let y1 = ((cy + reach).ceil() as usize).min(height);
        for y in y0..y1 {
            for x in x0..x1 {
                if inside(x as f32, y as f32) {
                    img.data[y * width + x] = v;
                }
            }
        }
    }
    let noise = Normal::new(0.0f32, 0.03).expect("valid sigma");
    for p in &mut img.data {
        *p = (*p + noise.sample(rng)).clamp(0.0, 1.0);
    }
    img
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    /// Largest corner displacement as a fraction of the crop size.
    pub corner_jitter: f64,
    /// Additive brightness offset drawn from `[-b, b]`.
    pub brightness: f32,
    /// Contrast factor drawn from `[1 - c, 1 + c]`.
    pub contrast: f32,
    /// Gamma drawn from `exp([-g, g])`.
    pub gamma: f32,
    pub noise_sigma: f32,
    pub blur_prob: f32,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            corner_jitter: 0.15,
            brightness: 0.1,
            contrast: 0.2,
            gamma: 0.2,
            noise_sigma: 0.02,
            blur_prob: 0.2,
        }
    }
}

impl AugmentParams {
    pub fn none() -> Self {
        Self {
            corner_jitter: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            gamma: 0.0,
            noise_sigma: 0.0,
            blur_prob: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainPair {
    pub crop_a: Image,
    pub crop_b: Image,
    /// `(p_A, p_B)` lattice pairs with `p_B = round(H p_A)`.
    pub correspondences: Vec<((usize, usize), (usize, usize))>,
    /// Maps crop A pixel coordinates to crop B.
    pub homography: Homography,
}

fn convex(q: &[(f64, f64); 4]) -> bool {
    let mut sign = 0.0;
    for i in 0..4 {
        let (a, b, c) = (q[i], q[(i + 1) % 4], q[(i + 2) % 4]);
        let cross = (b.0 - a.0) * (c.1 - b.1) - (b.1 - a.1) * (c.0 - b.0);
        if cross.abs() < 1e-9 || (sign != 0.0 && cross.signum() != sign) {
            return false;
        }
        sign = cross.signum();
    }
    true
}

fn blur3(img: &Image) -> Image {
    let (w, h) = (img.width, img.height);
    let at = |x: isize, y: isize| img.data[y.clamp(0, h as isize - 1) as usize * w + x.clamp(0, w as isize - 1) as usize];
    Image::from_fn(w, h, |x, y| {
        let (x, y) = (x as isize, y as isize);
        let mut s = 0.0;
        for (dy, ky) in [(-1, 1.0), (0, 2.0), (1, 1.0)] {
            for (dx, kx) in [(-1, 1.0), (0, 2.0), (1, 1.0)] {
                s += ky * kx * at(x + dx, y + dy);
            }
        }
        s / 16.0
    })
}

fn photometric<R: Rng>(img: &mut Image, aug: &AugmentParams, rng: &mut R) {
    let sym = |rng: &mut R, r: f32| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
    let b = sym(rng, aug.brightness);
    let c = 1.0 + sym(rng, aug.contrast);
    let g = sym(rng, aug.gamma).exp();
    let blur = aug.blur_prob > 0.0 && rng.random::<f32>() < aug.blur_prob;
    if blur {
        *img = blur3(img);
    }
    let noise = (aug.noise_sigma > 0.0).then(|| Normal::new(0.0f32, aug.noise_sigma).expect("valid sigma"));
    for p in &mut img.data {
        let mut v = ((*p - 0.5) * c + 0.5 + b).clamp(0.0, 1.0).powf(g);
        if let Some(n) = &noise {
            v += n.sample(rng);
        }
        *p = v.clamp(0.0, 1.0);
    }
}

/// Crops A from `base`, warps a jittered quadrilateral around it into B and
/// samples up to `max_corr` ground-truth pairs at least `margin` pixels
/// inside both crops. Photometric jitter touches B only.
pub fn generate_pair<R: Rng>(
    base: &Image,
    crop: usize,
    max_corr: usize,
    margin: usize,
    aug: &AugmentParams,
    rng: &mut R,
) -> Result<TrainPair, TrainError> {
    let base = base.to_gray();
    let jitter = aug.corner_jitter * crop as f64;
    let pad = jitter.ceil() as usize;
    if base.width < crop + 2 * pad || base.height < crop + 2 * pad || crop <= 2 * margin {
        return Err(TrainError::BaseTooSmall {
            width: base.width,
            height: base.height,
            needed: crop + 2 * pad,
        });
    }
    let ox = rng.random_range(pad..=base.width - crop - pad) as f64;
    let oy = rng.random_range(pad..=base.height - crop - pad) as f64;
    let e = (crop - 1) as f64;
    let square = [(0.0, 0.0), (e, 0.0), (e, e), (0.0, e)];

    // crop B pixel -> base pixel
    let mut to_base = None;
    for _ in 0..100 {
        let quad: [(f64, f64); 4] = std::array::from_fn(|i| {
            let (dx, dy) = if jitter > 0.0 {
                (rng.random_range(-jitter..=jitter), rng.random_range(-jitter..=jitter))
            } else {
                (0.0, 0.0)
            };
            (square[i].0 + ox + dx, square[i].1 + oy + dy)
        });
        if !convex(&quad) {
            continue;
        }
        if let Ok(g) = Homography::from_correspondences(&square, &quad) {
            to_base = Some(g);
            break;
        }
    }
    let to_base = to_base.ok_or(TrainError::Degenerate)?;
    let homography = Homography::translation(ox, oy)
        .compose(&to_base.inverse().map_err(|_| TrainError::Degenerate)?)
        .map_err(|_| TrainError::Degenerate)?;

    let crop_a = base.crop(ox as usize, oy as usize, crop, crop);
    let mut valid = vec![false; crop * crop];
    let mut data = vec![0.0f32; crop * crop];
    for v in 0..crop {
        for u in 0..crop {
            if let Ok((x, y)) = to_base.apply(u as f64, v as f64) {
                if let Some(s) = base.sample(x, y) {
                    data[v * crop + u] = s;
                    valid[v * crop + u] = true;
                }
            }
        }
    }
    let mut crop_b = Image::gray(crop, crop, data).expect("sized buffer");
    photometric(&mut crop_b, aug, rng);

    let lo = margin as f64;
    let hi = (crop - 1 - margin) as f64;
    let mut candidates = Vec::new();
    for y in margin..crop - margin {
        for x in margin..crop - margin {
            let Ok((bx, by)) = homography.apply(x as f64, y as f64) else { continue };
            let (rx, ry) = (bx.round(), by.round());
            if rx < lo || ry < lo || rx > hi || ry > hi {
                continue;
            }
            let (rx, ry) = (rx as usize, ry as usize);
            if valid[ry * crop + rx] {
                candidates.push(((x, y), (rx, ry)));
            }
        }
    }
    let n = max_corr.min(candidates.len());
    let correspondences = index::sample(rng, candidates.len(), n).into_iter().map(|i| candidates[i]).collect();
    Ok(TrainPair {
        crop_a,
        crop_b,
        correspondences,
        homography,
    })
}
