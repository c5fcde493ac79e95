//! Harris corners and plain-text keypoint files.
//!
//! Keypoint coordinates put the origin at the centre of the top-left pixel,
//! x to the right and y down.

use std::fmt::Write as _;
use std::path::Path;

use crate::fsutil;
use crate::image::Image;

#[derive(thiserror::Error, Debug)]
pub enum DetectorError {
    #[error("cannot detect on an empty image")]
    EmptyImage,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("keypoints outside the {width}x{height} image: {}", format_offenders(.offenders))]
    OutOfBounds {
        width: usize,
        height: usize,
        /// `(line, x, y)` of each offending entry.
        offenders: Vec<(usize, f32, f32)>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn format_offenders(o: &[(usize, f32, f32)]) -> String {
    o.iter()
        .map(|(l, x, y)| format!("line {} ({} {})", l, x, y))
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint {
    pub x: f32,
    pub y: f32,
    pub score: f32,
}

impl Keypoint {
    pub fn new(x: f32, y: f32, score: f32) -> Self {
        Self { x, y, score }
    }

    pub fn xy(&self) -> (f32, f32) {
        (self.x, self.y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HarrisParams {
    pub k: f32,
    /// Chebyshev radius of the greedy non-maximum suppression.
    pub nms_radius: usize,
    pub max_keypoints: usize,
    /// Responses must exceed `min_score` times the strongest response.
    pub min_score: f32,
}

impl Default for HarrisParams {
    fn default() -> Self {
        Self {
            k: 0.05,
            nms_radius: 4,
            max_keypoints: 1000,
            min_score: 0.01,
        }
    }
}

/// Harris response `det(M) - k tr(M)^2` of the Sobel structure tensor after
/// 3x3 Gaussian smoothing. Borders replicate the edge pixel.
pub fn harris_response(image: &Image, k: f32) -> Result<Vec<f32>, DetectorError> {
    if image.width == 0 || image.height == 0 || image.data.is_empty() {
        return Err(DetectorError::EmptyImage);
    }
    let img = image.to_gray();
    let (w, h) = (img.width, img.height);
    let px = |x: isize, y: isize| -> f32 {
        let xc = x.clamp(0, w as isize - 1) as usize;
        let yc = y.clamp(0, h as isize - 1) as usize;
        img.data[yc * w + xc]
    };
    let n = w * h;
    let (mut ixx, mut iyy, mut ixy) = (vec![0f32; n], vec![0f32; n], vec![0f32; n]);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (px(x + 1, y - 1) + 2.0 * px(x + 1, y) + px(x + 1, y + 1)
                - px(x - 1, y - 1)
                - 2.0 * px(x - 1, y)
                - px(x - 1, y + 1))
                / 8.0;
            let gy = (px(x - 1, y + 1) + 2.0 * px(x, y + 1) + px(x + 1, y + 1)
                - px(x - 1, y - 1)
                - 2.0 * px(x, y - 1)
                - px(x + 1, y - 1))
                / 8.0;
            let i = y as usize * w + x as usize;
            ixx[i] = gx * gx;
            iyy[i] = gy * gy;
            ixy[i] = gx * gy;
        }
    }
    let smooth = |src: &[f32]| -> Vec<f32> {
        let at = |x: isize, y: isize| {
            src[y.clamp(0, h as isize - 1) as usize * w + x.clamp(0, w as isize - 1) as usize]
        };
        let mut out = vec![0f32; n];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut s = 0.0;
                for (dy, wy) in [(-1, 1.0), (0, 2.0), (1, 1.0)] {
                    for (dx, wx) in [(-1, 1.0), (0, 2.0), (1, 1.0)] {
                        s += wy * wx * at(x + dx, y + dy);
                    }
                }
                out[y as usize * w + x as usize] = s / 16.0;
            }
        }
        out
    };
    let (sxx, syy, sxy) = (smooth(&ixx), smooth(&iyy), smooth(&ixy));
    Ok((0..n)
        .map(|i| {
            let det = sxx[i] * syy[i] - sxy[i] * sxy[i];
            let tr = sxx[i] + syy[i];
            det - k * tr * tr
        })
        .collect())
}

/// Harris corners with greedy non-maximum suppression, strongest first.
pub fn harris(image: &Image, params: &HarrisParams) -> Result<Vec<Keypoint>, DetectorError> {
    let response = harris_response(image, params.k)?;
    let (w, h) = (image.width, image.height);
    let max = response.iter().copied().fold(0.0f32, f32::max);
    let threshold = (params.min_score * max).max(0.0);
    let mut candidates: Vec<usize> = (0..response.len())
        .filter(|&i| response[i] > threshold && response[i] > 0.0)
        .collect();
    // stable sort keeps row-major order among equal responses
    candidates.sort_by(|&a, &b| response[b].total_cmp(&response[a]));

    let r = params.nms_radius;
    let mut suppressed = vec![false; w * h];
    let mut out = Vec::new();
    for i in candidates {
        if out.len() >= params.max_keypoints {
            break;
        }
        if suppressed[i] {
            continue;
        }
        let (x, y) = (i % w, i / w);
        out.push(Keypoint::new(x as f32, y as f32, response[i]));
        for yy in y.saturating_sub(r)..(y + r + 1).min(h) {
            for xx in x.saturating_sub(r)..(x + r + 1).min(w) {
                suppressed[yy * w + xx] = true;
            }
        }
    }
    Ok(out)
}

/// Parses `x y [score]` lines. Blank lines and `#` comments are skipped.
/// Every entry must satisfy `0 <= x < width` and `0 <= y < height`.
pub fn parse_keypoints(text: &str, width: usize, height: usize) -> Result<Vec<Keypoint>, DetectorError> {
    let mut out = Vec::new();
    let mut offenders = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let fields: Vec<&str> = content.split_whitespace().collect();
        if fields.len() < 2 || fields.len() > 3 {
            return Err(DetectorError::Parse {
                line,
                message: format!("expected `x y [score]`, got {:?}", content),
            });
        }
        let num = |s: &str| {
            s.parse::<f32>().ok().filter(|v| v.is_finite()).ok_or_else(|| DetectorError::Parse {
                line,
                message: format!("not a finite number: {:?}", s),
            })
        };
        let x = num(fields[0])?;
        let y = num(fields[1])?;
        let score = fields.get(2).map(|s| num(s)).transpose()?.unwrap_or(0.0);
        if !(x >= 0.0 && y >= 0.0 && x < width as f32 && y < height as f32) {
            offenders.push((line, x, y));
            continue;
        }
        out.push(Keypoint::new(x, y, score));
    }
    if !offenders.is_empty() {
        return Err(DetectorError::OutOfBounds {
            width,
            height,
            offenders,
        });
    }
    Ok(out)
}

pub fn import_keypoints(path: &Path, width: usize, height: usize) -> Result<Vec<Keypoint>, DetectorError> {
    parse_keypoints(&std::fs::read_to_string(path)?, width, height)
}

pub fn format_keypoints(kps: &[Keypoint]) -> String {
    let mut s = String::new();
    for k in kps {
        let _ = writeln!(s, "{} {} {}", k.x, k.y, k.score);
    }
    s
}

pub fn write_keypoints(path: &Path, kps: &[Keypoint]) -> Result<(), DetectorError> {
    fsutil::write_atomic_str(path, &format_keypoints(kps))?;
    Ok(())
}
