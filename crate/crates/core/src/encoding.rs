//! Irregularity-aware image and statistics prompt built from a canonical sample.

use std::path::Path;

use crate::data::CanonicalSample;
use crate::error::{Error, Result};

/// Default sparsity threshold for prompt statistics.
pub const DEFAULT_TAU: f64 = 0.9;

pub const IMAGE_MAGIC: &[u8; 4] = b"MMI1";

/// Stacked `3 x N x L` channels: values, mask, per-variable time gaps.
#[derive(Clone, Debug, PartialEq)]
pub struct IrregularityImage {
    pub n_vars: usize,
    pub len: usize,
    pub data: Vec<f64>,
}

impl IrregularityImage {
    pub const VALUES: usize = 0;
    pub const MASK: usize = 1;
    pub const INTERVALS: usize = 2;

    pub fn shape(&self) -> [usize; 3] {
        [3, self.n_vars, self.len]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.n_vars * self.len;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn at(&self, c: usize, n: usize, l: usize) -> f64 {
        self.channel(c)[n * self.len + l]
    }
}

pub fn build_image(canonical: &CanonicalSample) -> IrregularityImage {
    let (n_vars, len) = (canonical.n_vars, canonical.len);
    let plane = n_vars * len;
    let mut data = vec![0.0; 3 * plane];
    for n in 0..n_vars {
        let mut prev: Option<f64> = None;
        for l in 0..len {
            if !canonical.observed(n, l) {
                continue;
            }
            let i = n * len + l;
            let t = canonical.time(n, l);
            data[i] = canonical.value(n, l);
            data[plane + i] = 1.0;
            data[2 * plane + i] = prev.map_or(0.0, |p| t - p);
            prev = Some(t);
        }
    }
    IrregularityImage { n_vars, len, data }
}

/// `3 x height x width` pixels, each channel min-max scaled to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResizedImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ResizedImage {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; 3 * height * width],
        }
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    /// Pixel bytes as little-endian `f32`, the layout of the image file payload.
    pub fn f32_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect()
    }
}

fn source_coord(i: usize, out: usize, src: usize) -> f64 {
    if out <= 1 || src <= 1 {
        (src as f64 - 1.0).max(0.0) / 2.0
    } else {
        i as f64 * (src - 1) as f64 / (out - 1) as f64
    }
}

/// Corner-aligned bilinear resize of each channel, then per-channel min-max
/// normalization. A constant channel maps to all zeros.
pub fn resize_normalize(image: &IrregularityImage, height: usize, width: usize) -> Result<ResizedImage> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidConfig("image resolution must be at least 1x1".into()));
    }
    let (src_h, src_w) = (image.n_vars, image.len);
    let mut data = Vec::with_capacity(3 * height * width);
    for c in 0..3 {
        let ch = image.channel(c);
        let px = |y: usize, x: usize| ch[y * src_w + x];
        let mut plane = Vec::with_capacity(height * width);
        for i in 0..height {
            let y = source_coord(i, height, src_h);
            let y0 = y.floor() as usize;
            let y1 = (y0 + 1).min(src_h.saturating_sub(1));
            let fy = y - y0 as f64;
            for j in 0..width {
                if src_h == 0 || src_w == 0 {
                    plane.push(0.0);
                    continue;
                }
                let x = source_coord(j, width, src_w);
                let x0 = x.floor() as usize;
                let x1 = (x0 + 1).min(src_w - 1);
                let fx = x - x0 as f64;
                let top = px(y0, x0) * (1.0 - fx) + px(y0, x1) * fx;
                let bottom = px(y1, x0) * (1.0 - fx) + px(y1, x1) * fx;
                plane.push(top * (1.0 - fy) + bottom * fy);
            }
        }
        let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            data.extend(plane.iter().map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)));
        } else {
            data.extend(std::iter::repeat_n(0.0, plane.len()));
        }
    }
    Ok(ResizedImage { height, width, data })
}

/// Writes `MMI1`, dims `3, H, W` as `u32` LE, then row-major `f32` LE pixels.
pub fn write_image_file(path: impl AsRef<Path>, image: &ResizedImage) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + 12 * image.height * image.width);
    bytes.extend_from_slice(IMAGE_MAGIC);
    for d in [3, image.height, image.width] {
        bytes.extend_from_slice(&(d as u32).to_le_bytes());
    }
    bytes.extend_from_slice(&image.f32_bytes());
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_image_file(path: impl AsRef<Path>) -> Result<ResizedImage> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 16 || &bytes[..4] != IMAGE_MAGIC {
        return Err(Error::CorruptRecord("not an MMI1 image".into()));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (c, h, w) = (dim(0), dim(1), dim(2));
    if c != 3 || bytes.len() != 16 + 4 * c * h * w {
        return Err(Error::CorruptRecord("MMI1 dimensions do not match payload".into()));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok(ResizedImage {
        height: h,
        width: w,
        data,
    })
}

/// Summary of one variable's observed entries.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VariableStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    /// `None` when the variable has no observations.
    pub range: Option<(f64, f64)>,
    /// Fraction of the `L` slots that are missing.
    pub missing_rate: f64,
    /// Fraction of the `L` slots that are observed.
    pub density: f64,
    pub observed: usize,
}

impl VariableStats {
    /// `[mean, std, missing_rate, density]`, the gating-network input.
    pub fn vector(&self) -> [f64; 4] {
        [self.mean, self.std, self.missing_rate, self.density]
    }
}

pub fn compute_stats(canonical: &CanonicalSample) -> Vec<VariableStats> {
    (0..canonical.n_vars)
        .map(|n| {
            let values: Vec<f64> = (0..canonical.len)
                .filter(|&l| canonical.observed(n, l))
                .map(|l| canonical.value(n, l))
                .collect();
            let count = values.len();
            let density = if canonical.len == 0 {
                0.0
            } else {
                count as f64 / canonical.len as f64
            };
            let missing_rate = 1.0 - density;
            if count == 0 {
                return VariableStats {
                    mean: 0.0,
                    std: 0.0,
                    range: None,
                    missing_rate: 1.0,
                    density: 0.0,
                    observed: 0,
                };
            }
            let mean = values.iter().sum::<f64>() / count as f64;
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count as f64;
            let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            VariableStats {
                mean: mean.clamp(lo, hi),
                std: if count > 1 { var.sqrt() } else { 0.0 },
                range: Some((lo, hi)),
                missing_rate,
                density,
                observed: count,
            }
        })
        .collect()
}

/// Instruction segments placed ahead of the per-variable statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptTemplates {
    pub image: String,
    pub data: String,
    pub task: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            image: include_str!("../templates/image.txt").trim().to_string(),
            data: include_str!("../templates/data.txt").trim().to_string(),
            task: include_str!("../templates/task.txt").trim().to_string(),
        }
    }
}

impl PromptTemplates {
    /// Reads `image.txt`, `data.txt` and `task.txt` from `dir`.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let read = |name: &str| -> Result<String> {
            let p = dir.join(name);
            std::fs::read_to_string(&p)
                .map(|s| s.trim().to_string())
                .map_err(|e| Error::NotFound(format!("{}: {e}", p.display())))
        };
        Ok(Self {
            image: read("image.txt")?,
            data: read("data.txt")?,
            task: read("task.txt")?,
        })
    }

    /// Substitutes `{dataset_name}` in the data segment.
    pub fn with_dataset_name(&self, name: &str) -> Self {
        Self {
            data: self.data.replace("{dataset_name}", name),
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prompt {
    pub parts: Vec<String>,
    pub rendered: String,
}

impl Prompt {
    pub fn empty() -> Self {
        Self {
            parts: Vec::new(),
            rendered: String::new(),
        }
    }

    fn from_parts(parts: Vec<String>) -> Self {
        let rendered = parts.join("\n");
        Self { parts, rendered }
    }

    /// Number of per-variable statistics segments.
    pub fn stat_segments(&self) -> usize {
        self.parts.len().saturating_sub(3)
    }
}

/// Formats with `digits` significant digits, switching to exponent form
/// outside `[1e-4, 1e6)`.
pub fn format_significant(value: f64, digits: usize) -> String {
    if value == 0.0 {
        return "0".to_string();
    }
    let digits = digits.max(1);
    let sci = format!("{:.*e}", digits - 1, value);
    let exp: i32 = sci.split('e').nth(1).and_then(|e| e.parse().ok()).unwrap_or(0);
    if !(-4..6).contains(&exp) {
        return sci;
    }
    let decimals = (digits as i32 - 1 - exp).max(0) as usize;
    format!("{value:.decimals$}")
}

fn stat_segment(n: usize, s: &VariableStats) -> String {
    match s.range {
        Some((lo, hi)) => format!(
            "Variable {n}: mean {}, min {}, max {}.",
            format_significant(s.mean, 4),
            format_significant(lo, 4),
            format_significant(hi, 4)
        ),
        None => format!("Variable {n}: no observations."),
    }
}

/// `[P_img, P_data, P_task, S_n...]` with `S_n` kept iff `missing_rate <= tau`.
pub fn assemble_prompt(stats: &[VariableStats], tau: f64, templates: &PromptTemplates) -> Result<Prompt> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidConfig(format!("tau {tau} outside [0, 1]")));
    }
    let mut parts = vec![
        templates.image.clone(),
        templates.data.clone(),
        templates.task.clone(),
    ];
    parts.extend(
        stats
            .iter()
            .enumerate()
            .filter(|(_, s)| s.missing_rate <= tau)
            .map(|(n, s)| stat_segment(n, s)),
    );
    Ok(Prompt::from_parts(parts))
}
