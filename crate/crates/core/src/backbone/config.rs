use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use super::BackboneError;

/// Topology of the multi-level feature extractor.
///
/// Block indices (`pool_after`, `extraction_points`) are 1-based. Every conv
/// in the trunk is 3x3 "same" followed by a ReLU. Each extraction point feeds
/// an adaptation head: `adaptation_kernel` conv, ReLU, 1x1 conv, batch-norm.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub input_channels: usize,
    pub trunk_channels: Vec<usize>,
    pub convs_per_block: Vec<usize>,
    pub pool_after: Vec<usize>,
    pub extraction_points: Vec<usize>,
    pub adaptation_channels: usize,
    pub adaptation_kernel: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl BackboneConfig {
    /// CPU-trainable default: three levels at downscale 1, 4 and 16.
    pub fn desk() -> Self {
        Self {
            input_channels: 1,
            trunk_channels: vec![8, 16, 32, 32, 32],
            convs_per_block: vec![2; 5],
            pool_after: vec![1, 2, 3, 4],
            extraction_points: vec![1, 3, 5],
            adaptation_channels: 32,
            adaptation_kernel: 3,
            seed: 0,
        }
    }

    /// Two levels at downscale 1 and 4; the profile used for quick training.
    pub fn desk_two_level() -> Self {
        Self {
            trunk_channels: vec![8, 16, 32],
            convs_per_block: vec![2; 3],
            pool_after: vec![1, 2],
            extraction_points: vec![1, 3],
            ..Self::desk()
        }
    }

    /// VGG-16 widths with extraction at conv1_2, conv3_3 and conv5_3 and
    /// 128-channel adaptation heads.
    pub fn vgg16() -> Self {
        Self {
            input_channels: 3,
            trunk_channels: vec![64, 128, 256, 512, 512],
            convs_per_block: vec![2, 2, 3, 3, 3],
            pool_after: vec![1, 2, 3, 4],
            extraction_points: vec![1, 3, 5],
            adaptation_channels: 128,
            adaptation_kernel: 3,
            seed: 0,
        }
    }

    pub fn named(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "desk2" => Some(Self::desk_two_level()),
            "vgg16" | "paper" => Some(Self::vgg16()),
            _ => None,
        }
    }

    pub fn levels(&self) -> usize {
        self.extraction_points.len()
    }

    pub fn validate(&self) -> Result<(), BackboneError> {
        let bad = |m: String| Err(BackboneError::Config(m));
        let blocks = self.trunk_channels.len();
        if blocks == 0 {
            return bad("trunk has no blocks".into());
        }
        if self.convs_per_block.len() != blocks {
            return bad(format!(
                "convs_per_block has {} entries for {} blocks",
                self.convs_per_block.len(),
                blocks
            ));
        }
        if self.input_channels == 0
            || self.adaptation_channels == 0
            || self.trunk_channels.contains(&0)
            || self.convs_per_block.contains(&0)
        {
            return bad("channel widths and conv counts must be positive".into());
        }
        if self.adaptation_kernel % 2 == 0 {
            return bad(format!("adaptation_kernel {} must be odd", self.adaptation_kernel));
        }
        if self.extraction_points.is_empty() {
            return bad("need at least one extraction point".into());
        }
        for (name, list) in [("extraction_points", &self.extraction_points), ("pool_after", &self.pool_after)] {
            if list.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!("{} must be strictly increasing", name));
            }
            if list.iter().any(|&b| b == 0 || b > blocks) {
                return bad(format!("{} refers to a block outside 1..={}", name, blocks));
            }
        }
        Ok(())
    }

    /// Downscale factor of each level: `2^(pools before the extraction point)`.
    pub fn scales(&self) -> Vec<usize> {
        self.extraction_points
            .iter()
            .map(|&e| 1usize << self.pool_after.iter().filter(|&&p| p < e).count())
            .collect()
    }

    /// Canonical `key = value` text. `seed` is written but does not enter the
    /// fingerprint.
    pub fn to_text(&self) -> String {
        let mut s = self.topology_text();
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }

    fn topology_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "input_channels = {}", self.input_channels);
        let _ = writeln!(s, "trunk_channels = {}", list(&self.trunk_channels));
        let _ = writeln!(s, "convs_per_block = {}", list(&self.convs_per_block));
        let _ = writeln!(s, "pool_after = {}", list(&self.pool_after));
        let _ = writeln!(s, "extraction_points = {}", list(&self.extraction_points));
        let _ = writeln!(s, "adaptation_channels = {}", self.adaptation_channels);
        let _ = writeln!(s, "adaptation_kernel = {}", self.adaptation_kernel);
        let _ = writeln!(s, "upsample = align_corners");
        s
    }

    pub fn fingerprint(&self) -> u64 {
        let digest = Sha256::digest(self.topology_text().as_bytes());
        let mut b = [0u8; 8];
        b.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(b)
    }

    /// Parses `key = value` lines; `#` starts a comment. A `profile = name`
    /// line seeds all fields from a named profile before later keys apply.
    pub fn parse(text: &str) -> Result<Self, BackboneError> {
        let mut cfg = Self::desk();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: &str| BackboneError::Config(format!("line {}: {}", lineno + 1, m));
            let (key, value) = line.split_once('=').ok_or_else(|| err("expected key = value"))?;
            let (key, value) = (key.trim(), value.trim());
            let num = |v: &str| v.parse::<usize>().map_err(|_| err(&format!("bad number {:?}", v)));
            let list = |v: &str| -> Result<Vec<usize>, BackboneError> {
                if v.is_empty() {
                    return Ok(Vec::new());
                }
                v.split(',').map(|x| num(x.trim())).collect()
            };
            match key {
                "profile" => cfg = Self::named(value).ok_or_else(|| err(&format!("unknown profile {:?}", value)))?,
                "input_channels" => cfg.input_channels = num(value)?,
                "trunk_channels" => cfg.trunk_channels = list(value)?,
                "convs_per_block" => cfg.convs_per_block = list(value)?,
                "pool_after" => cfg.pool_after = list(value)?,
                "extraction_points" => cfg.extraction_points = list(value)?,
                "adaptation_channels" => cfg.adaptation_channels = num(value)?,
                "adaptation_kernel" => cfg.adaptation_kernel = num(value)?,
                "seed" => cfg.seed = value.parse().map_err(|_| err("bad seed"))?,
                "upsample" if value == "align_corners" => {}
                "upsample" => return Err(err("only align_corners upsampling is supported")),
                _ => return Err(err(&format!("unknown key {:?}", key))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
