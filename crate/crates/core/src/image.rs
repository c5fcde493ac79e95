//! Float images in `[0, 1]` and binary PGM (P5) / PPM (P6) codecs.

use std::path::Path;

use crate::fsutil;
use crate::tensor::Tensor;

#[derive(thiserror::Error, Debug)]
pub enum ImageError {
    #[error("unsupported netpbm variant {0} (only binary P5/P6 are read)")]
    Unsupported(String),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("invalid image: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Interleaved samples, row-major, normalised to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::Invalid(format!("dimensions {}x{}", width, height)));
        }
        if channels != 1 && channels != 3 {
            return Err(ImageError::Invalid(format!("{} channels", channels)));
        }
        if data.len() != width * height * channels {
            return Err(ImageError::Invalid(format!(
                "{} samples for {}x{}x{}",
                data.len(),
                width,
                height,
                channels
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn gray(width: usize, height: usize, data: Vec<f32>) -> Result<Self, ImageError> {
        Self::new(width, height, 1, data)
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            channels: 1,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        debug_assert_eq!(self.channels, 1);
        self.data[y * self.width + x]
    }

    /// Luma conversion with (0.299, 0.587, 0.114); gray images are cloned.
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// Planar `(channels, h, w)` tensor.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let (w, c) = (self.width, self.channels);
        Tensor::from_fn([c, self.height, w], |ci, y, x| self.data[(y * w + x) * c + ci])
    }

    /// Copy of the `w x h` window at `(x0, y0)`; the window must fit.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Image {
        assert!(x0 + w <= self.width && y0 + h <= self.height, "crop outside image");
        let c = self.channels;
        let mut data = Vec::with_capacity(w * h * c);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * c;
            data.extend_from_slice(&self.data[start..start + w * c]);
        }
        Image {
            width: w,
            height: h,
            channels: c,
            data,
        }
    }

    /// Bilinear lookup on a gray image at a fractional position; `None` when
    /// the position is outside the pixel-centre lattice.
    pub fn sample(&self, x: f64, y: f64) -> Option<f32> {
        if !(x >= 0.0 && y >= 0.0 && x <= (self.width - 1) as f64 && y <= (self.height - 1) as f64) {
            return None;
        }
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = (x - x0 as f64) as f32;
        let fy = (y - y0 as f64) as f32;
        let a = self.get(x0, y0);
        let b = self.get(x1, y0);
        let c = self.get(x0, y1);
        let d = self.get(x1, y1);
        Some((1.0 - fy) * ((1.0 - fx) * a + fx * b) + fy * ((1.0 - fx) * c + fx * d))
    }
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: usize,
    payload_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header, ImageError> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(ImageError::Header("missing P magic".into()));
    }
    let magic = [bytes[0], bytes[1]];
    match magic[1] {
        b'5' | b'6' => {}
        b'1'..=b'4' | b'7' => {
            return Err(ImageError::Unsupported(format!("P{}", magic[1] as char)))
        }
        _ => return Err(ImageError::Header("unknown magic".into())),
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(ImageError::Header("unexpected end of header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(ImageError::Header(format!("expected a number at byte {}", start)));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ImageError::Header("number out of range".into()))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(ImageError::Header("missing whitespace after maxval".into())),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(ImageError::Header(format!("dimensions {}x{}", width, height)));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(ImageError::Header(format!("maxval {}", maxval)));
    }
    Ok(Header {
        magic,
        width,
        height,
        maxval,
        payload_start: pos,
    })
}

pub fn decode_netpbm(bytes: &[u8]) -> Result<Image, ImageError> {
    let h = parse_header(bytes)?;
    let channels = if h.magic[1] == b'5' { 1 } else { 3 };
    let n = h.width * h.height * channels;
    let bps = if h.maxval < 256 { 1 } else { 2 };
    let payload = &bytes[h.payload_start..];
    if payload.len() < n * bps {
        return Err(ImageError::Truncated {
            expected: n * bps,
            found: payload.len(),
        });
    }
    let maxval = h.maxval as f32;
    let data = if bps == 1 {
        payload[..n].iter().map(|&b| b as f32 / maxval).collect()
    } else {
        payload[..2 * n]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f32 / maxval)
            .collect()
    };
    Image::new(h.width, h.height, channels, data)
}

/// Encodes as P5/P6 with the given sample depth (8 or 16 bits).
pub fn encode_netpbm(image: &Image, bits: u8) -> Result<Vec<u8>, ImageError> {
    let magic = match image.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(ImageError::Invalid(format!("{} channels", c))),
    };
    let maxval: u32 = match bits {
        8 => 255,
        16 => 65535,
        b => return Err(ImageError::Invalid(format!("{}-bit samples", b))),
    };
    let mut out = format!("{}\n{} {}\n{}\n", magic, image.width, image.height, maxval).into_bytes();
    for &v in &image.data {
        let q = (v.clamp(0.0, 1.0) * maxval as f32).round() as u32;
        if bits == 8 {
            out.push(q as u8);
        } else {
            out.extend_from_slice(&(q as u16).to_be_bytes());
        }
    }
    Ok(out)
}

pub fn load_image(path: &Path) -> Result<Image, ImageError> {
    decode_netpbm(&std::fs::read(path)?)
}

pub fn save_image(path: &Path, image: &Image) -> Result<(), ImageError> {
    save_image_with_depth(path, image, 8)
}

pub fn save_image_with_depth(path: &Path, image: &Image, bits: u8) -> Result<(), ImageError> {
    fsutil::write_atomic(path, &encode_netpbm(image, bits)?)?;
    Ok(())
}
