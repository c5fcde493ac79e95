use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use s2d_core::detector::{harris, harris_response, HarrisParams};
use s2d_core::image::Image;

/// Structure-tensor response computed in f64 with replicated borders.
fn response_oracle(img: &Image, k: f64) -> Vec<f64> {
    let (w, h) = (img.width as isize, img.height as isize);
    let px = |x: isize, y: isize| img.get(x.clamp(0, w - 1) as usize, y.clamp(0, h - 1) as usize) as f64;
    let mut g = vec![(0.0, 0.0, 0.0); (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            let mut gx = 0.0;
            let mut gy = 0.0;
            for (d, s) in [(-1, 1.0), (0, 2.0), (1, 1.0)] {
                gx += s * (px(x + 1, y + d) - px(x - 1, y + d));
                gy += s * (px(x + d, y + 1) - px(x + d, y - 1));
            }
            let (gx, gy) = (gx / 8.0, gy / 8.0);
            g[(y * w + x) as usize] = (gx * gx, gy * gy, gx * gy);
        }
    }
    let at = |x: isize, y: isize| g[(y.clamp(0, h - 1) * w + x.clamp(0, w - 1)) as usize];
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
            for (dy, sy) in [(-1, 1.0), (0, 2.0), (1, 1.0)] {
                for (dx, sx) in [(-1, 1.0), (0, 2.0), (1, 1.0)] {
                    let (p, q, r) = at(x + dx, y + dy);
                    a += sy * sx * p / 16.0;
                    b += sy * sx * q / 16.0;
                    c += sy * sx * r / 16.0;
                }
            }
            out.push(a * b - c * c - k * (a + b) * (a + b));
        }
    }
    out
}

#[test]
fn white_square_gives_its_four_corners() {
    let img = Image::from_fn(40, 40, |x, y| if (10..30).contains(&x) && (10..30).contains(&y) { 1.0 } else { 0.0 });
    let params = HarrisParams::default();
    let oracle = response_oracle(&img, params.k as f64);
    let got = harris_response(&img, params.k).unwrap();
    for (a, b) in got.iter().zip(&oracle) {
        assert!((*a as f64 - b).abs() < 1e-6);
    }
    // brute force: the four strongest separated maxima of the oracle map
    let mut order: Vec<usize> = (0..oracle.len()).collect();
    order.sort_by(|&a, &b| oracle[b].total_cmp(&oracle[a]));
    let mut peaks: Vec<(f32, f32)> = Vec::new();
    for i in order {
        let p = ((i % 40) as f32, (i / 40) as f32);
        if peaks.iter().all(|q| (q.0 - p.0).abs().max((q.1 - p.1).abs()) > 4.0) {
            peaks.push(p);
        }
        if peaks.len() == 4 {
            break;
        }
    }
    let kps = harris(&img, &params).unwrap();
    assert_eq!(kps.len(), 4, "{kps:?}");
    for corner in [(9.5, 9.5), (29.5, 9.5), (9.5, 29.5), (29.5, 29.5)] {
        let near = |p: (f32, f32)| (p.0 - corner.0).abs() <= 2.0 && (p.1 - corner.1).abs() <= 2.0;
        assert!(kps.iter().any(|k| near(k.xy())), "no detection near {corner:?}");
        assert!(peaks.iter().any(|&p| near(p)));
    }
}

fn noise_image(w: usize, h: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::from_fn(w, h, |_, _| rng.random_range(0.0..0.5))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn nms_spacing_order_and_cap(seed in any::<u64>(), r in 1usize..6, cap in 1usize..60) {
        let img = noise_image(32, 24, seed);
        let params = HarrisParams { nms_radius: r, max_keypoints: cap, ..HarrisParams::default() };
        let kps = harris(&img, &params).unwrap();
        prop_assert!(kps.len() <= cap);
        prop_assert!(kps.windows(2).all(|w| w[0].score >= w[1].score));
        for (i, a) in kps.iter().enumerate() {
            for b in &kps[i + 1..] {
                prop_assert!((a.x - b.x).abs().max((a.y - b.y).abs()) > r as f32);
            }
        }
    }

    #[test]
    fn constant_offset_leaves_response_unchanged(seed in any::<u64>(), c in -0.4f32..0.4) {
        let img = noise_image(20, 16, seed);
        let lifted = Image::from_fn(20, 16, |x, y| img.get(x, y) + c);
        let a = harris_response(&img, 0.05).unwrap();
        let b = harris_response(&lifted, 0.05).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-6);
        }
    }
}
