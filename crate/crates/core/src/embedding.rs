//! Token-feature matrices from a frozen multimodal model, served either from
//! per-sample cache files or from a deterministic synthetic generator.

use std::io::Write;
use std::path::{Path, PathBuf};

use mmists_autodiff::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::encoding::{Prompt, ResizedImage, VariableStats};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

pub const CACHE_MAGIC: &[u8; 4] = b"MMEC";
pub const CACHE_VERSION: u16 = 1;
pub const DEFAULT_LAYER_OFFSET: u16 = 3;
pub const CACHE_EXTENSION: &str = "emb";

/// `S x d_m` token features stored as `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::DimensionMismatch(format!(
                "embedding must be at least 1x1, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {rows}x{cols} embedding",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSample("embedding contains non-finite values".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.rows, self.cols, self.data.iter().map(|v| *v as f64).collect())
            .expect("shape checked at construction")
    }

    fn bitwise_eq(&self, other: &Self) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CacheRecord {
    pub sample_id: String,
    pub layer_offset: u16,
    pub matrix: EmbeddingMatrix,
}

impl CacheRecord {
    pub fn new(sample_id: impl Into<String>, matrix: EmbeddingMatrix) -> Self {
        Self {
            sample_id: sample_id.into(),
            layer_offset: DEFAULT_LAYER_OFFSET,
            matrix,
        }
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.sample_id == other.sample_id
            && self.layer_offset == other.layer_offset
            && self.matrix.bitwise_eq(&other.matrix)
    }
}

pub fn encode_record(record: &CacheRecord) -> Result<Vec<u8>> {
    if record.layer_offset == 0 {
        return Err(Error::InvalidConfig("layer offset must be at least 1".into()));
    }
    let id = record.sample_id.as_bytes();
    let id_len = u16::try_from(id.len())
        .map_err(|_| Error::InvalidSample(format!("sample id of {} bytes is too long", id.len())))?;
    let m = &record.matrix;
    let mut out = Vec::with_capacity(20 + id.len() + 4 * m.data.len() + 4);
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.extend_from_slice(&record.layer_offset.to_le_bytes());
    out.extend_from_slice(&(m.rows as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols as u32).to_le_bytes());
    out.extend_from_slice(&id_len.to_le_bytes());
    out.extend_from_slice(id);
    let start = out.len();
    for v in &m.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::CorruptRecord("cache record is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_record(bytes: &[u8]) -> Result<CacheRecord> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != CACHE_MAGIC {
        return Err(Error::CorruptRecord("bad magic".into()));
    }
    let version = c.u16()?;
    if version != CACHE_VERSION {
        return Err(Error::CorruptRecord(format!("unsupported cache version {version}")));
    }
    let layer_offset = c.u16()?;
    let rows = c.u32()? as usize;
    let cols = c.u32()? as usize;
    let id_len = c.u16()? as usize;
    let sample_id = String::from_utf8(c.take(id_len)?.to_vec())
        .map_err(|_| Error::CorruptRecord("sample id is not UTF-8".into()))?;
    let payload_len = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::CorruptRecord("dimensions overflow".into()))?;
    let payload = c.take(payload_len)?;
    let crc = c.u32()?;
    if c.pos != bytes.len() {
        return Err(Error::CorruptRecord("trailing bytes after checksum".into()));
    }
    if crc32fast::hash(payload) != crc {
        return Err(Error::CorruptRecord("payload checksum mismatch".into()));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    let matrix = EmbeddingMatrix::new(rows, cols, data)
        .map_err(|e| Error::CorruptRecord(format!("invalid payload: {e}")))?;
    Ok(CacheRecord {
        sample_id,
        layer_offset,
        matrix,
    })
}

/// File name for a sample id: characters outside `[A-Za-z0-9._-]` become `_`.
pub fn cache_file_name(sample_id: &str) -> String {
    let clean: String = sample_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{clean}.{CACHE_EXTENSION}")
}

pub fn cache_path(dir: impl AsRef<Path>, sample_id: &str) -> PathBuf {
    dir.as_ref().join(cache_file_name(sample_id))
}

/// Writes through a temporary file and renames it into place.
pub fn write_record(path: impl AsRef<Path>, record: &CacheRecord) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_record(record)?;
    let tmp = path.with_extension("emb.tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_record(path: impl AsRef<Path>, sample_id: &str) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::NotFound(format!("no cached embedding for `{sample_id}`")))
        }
        Err(e) => return Err(e.into()),
    };
    let record = decode_record(&bytes)?;
    if record.sample_id != sample_id {
        return Err(Error::CorruptRecord(format!(
            "record holds `{}`, expected `{sample_id}`",
            record.sample_id
        )));
    }
    Ok(record.matrix)
}

fn content_hash(image: &ResizedImage, prompt: &Prompt) -> u64 {
    let mut h = Sha256::new();
    h.update((image.height as u64).to_le_bytes());
    h.update((image.width as u64).to_le_bytes());
    for v in &image.data {
        h.update(v.to_le_bytes());
    }
    h.update((prompt.rendered.len() as u64).to_le_bytes());
    h.update(prompt.rendered.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Unit-norm Gaussian rows seeded by `(image, prompt, seed)`; the first
/// `min(N, S)` rows then get `[mean, std, missing_rate, density]` of variable
/// `n` added to columns `0..4`.
pub fn synth_embed(
    image: &ResizedImage,
    prompt: &Prompt,
    stats: &[VariableStats],
    rows: usize,
    cols: usize,
    seed: u64,
) -> Result<EmbeddingMatrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidConfig("embedding dimensions must be at least 1".into()));
    }
    let key = content_hash(image, prompt);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("embedding/{key:016x}")));
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let mut row: Vec<f64> = (0..cols).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let norm = if norm > 0.0 { norm } else { 1.0 };
        row.iter_mut().for_each(|v| *v /= norm);
        if let Some(s) = stats.get(r) {
            for (v, b) in row.iter_mut().zip(s.vector()) {
                *v += b;
            }
        }
        data.extend(row.iter().map(|v| *v as f32));
    }
    EmbeddingMatrix::new(rows, cols, data)
}

/// Inputs a provider may use to produce one sample's embedding.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingRequest<'a> {
    pub sample_id: &'a str,
    pub image: &'a ResizedImage,
    pub prompt: &'a Prompt,
    pub stats: &'a [VariableStats],
}

pub trait EmbeddingProvider: Send + Sync {
    fn name(&self) -> &'static str;

    fn embed(&self, request: &EmbeddingRequest<'_>) -> Result<EmbeddingMatrix>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticProvider {
    pub tokens: usize,
    pub width: usize,
    pub seed: u64,
}

impl EmbeddingProvider for SyntheticProvider {
    fn name(&self) -> &'static str {
        "synthetic"
    }

    fn embed(&self, request: &EmbeddingRequest<'_>) -> Result<EmbeddingMatrix> {
        synth_embed(
            request.image,
            request.prompt,
            request.stats,
            self.tokens,
            self.width,
            self.seed,
        )
    }
}

/// Reads `<dir>/<sanitized id>.emb`; on a miss, optionally falls back to a
/// synthetic provider.
#[derive(Clone, Debug)]
pub struct FileCacheProvider {
    pub dir: PathBuf,
    pub fallback: Option<SyntheticProvider>,
}

impl FileCacheProvider {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            fallback: None,
        }
    }
}

impl EmbeddingProvider for FileCacheProvider {
    fn name(&self) -> &'static str {
        "file-cache"
    }

    fn embed(&self, request: &EmbeddingRequest<'_>) -> Result<EmbeddingMatrix> {
        match read_record(cache_path(&self.dir, request.sample_id), request.sample_id) {
            Err(Error::NotFound(_)) if self.fallback.is_some() => {
                self.fallback.as_ref().expect("checked").embed(request)
            }
            other => other,
        }
    }
}

/// Fetches an embedding and checks it against the expected width `d_m`.
pub fn get_embedding(
    provider: &dyn EmbeddingProvider,
    request: &EmbeddingRequest<'_>,
    width: usize,
) -> Result<EmbeddingMatrix> {
    let m = provider.embed(request)?;
    if m.cols() != width {
        return Err(Error::DimensionMismatch(format!(
            "provider `{}` returned width {} for `{}`, model expects {width}",
            provider.name(),
            m.cols(),
            request.sample_id
        )));
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::PromptTemplates;

    fn image() -> ResizedImage {
        ResizedImage {
            height: 2,
            width: 2,
            data: (0..12).map(|v| v as f64 / 11.0).collect(),
        }
    }

    fn prompt(text: &str) -> Prompt {
        let mut p = crate::encoding::assemble_prompt(&[], 0.9, &PromptTemplates::default()).unwrap();
        p.rendered.push_str(text);
        p
    }

    #[test]
    fn record_round_trip_is_bitwise() {
        let data: Vec<f32> = (0..17 * 32).map(|i| (i as f32 - 100.0) * 0.37).collect();
        let rec = CacheRecord::new("s-1", EmbeddingMatrix::new(17, 32, data).unwrap());
        let back = decode_record(&encode_record(&rec).unwrap()).unwrap();
        assert!(back.bitwise_eq(&rec));
        assert_eq!(back.layer_offset, 3);
    }

    #[test]
    fn header_layout() {
        let rec = CacheRecord::new("ab", EmbeddingMatrix::new(1, 2, vec![1.0, -2.0]).unwrap());
        let b = encode_record(&rec).unwrap();
        assert_eq!(&b[..4], b"MMEC");
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!(&b[6..8], &[3, 0]);
        assert_eq!(&b[8..12], &[1, 0, 0, 0]);
        assert_eq!(&b[12..16], &[2, 0, 0, 0]);
        assert_eq!(&b[16..18], &[2, 0]);
        assert_eq!(&b[18..20], b"ab");
        assert_eq!(&b[20..24], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 20 + 8 + 4);
        let crc = u32::from_le_bytes(b[28..32].try_into().unwrap());
        assert_eq!(crc, crc32fast::hash(&b[20..28]));
    }

    #[test]
    fn truncation_and_corruption_detected() {
        let rec = CacheRecord::new("x", EmbeddingMatrix::new(2, 3, vec![0.5; 6]).unwrap());
        let b = encode_record(&rec).unwrap();
        for cut in [0, 3, 10, b.len() - 1] {
            assert!(matches!(decode_record(&b[..cut]), Err(Error::CorruptRecord(_))));
        }
        let mut bad = b.clone();
        bad[22] ^= 0x10;
        assert!(matches!(decode_record(&bad), Err(Error::CorruptRecord(_))));
        let mut bad = b;
        bad[0] = b'X';
        assert!(matches!(decode_record(&bad), Err(Error::CorruptRecord(_))));
    }

    #[test]
    fn missing_file_is_not_found() {
        let dir = tempfile::tempdir().unwrap();
        let p = FileCacheProvider::new(dir.path());
        let img = image();
        let pr = prompt("");
        let req = EmbeddingRequest {
            sample_id: "nope",
            image: &img,
            prompt: &pr,
            stats: &[],
        };
        assert!(matches!(p.embed(&req), Err(Error::NotFound(_))));
        let with_fallback = FileCacheProvider {
            dir: dir.path().into(),
            fallback: Some(SyntheticProvider {
                tokens: 4,
                width: 6,
                seed: 1,
            }),
        };
        assert_eq!(with_fallback.embed(&req).unwrap().shape(), [4, 6]);
    }

    #[test]
    fn file_cache_hit() {
        let dir = tempfile::tempdir().unwrap();
        let m = EmbeddingMatrix::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        write_record(cache_path(dir.path(), "p/1"), &CacheRecord::new("p/1", m.clone())).unwrap();
        assert!(dir.path().join("p_1.emb").exists());
        let img = image();
        let pr = prompt("");
        let req = EmbeddingRequest {
            sample_id: "p/1",
            image: &img,
            prompt: &pr,
            stats: &[],
        };
        let got = get_embedding(&FileCacheProvider::new(dir.path()), &req, 2).unwrap();
        assert!(got.bitwise_eq(&m));
        assert!(matches!(
            get_embedding(&FileCacheProvider::new(dir.path()), &req, 5),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn synthetic_rows_are_unit_norm_and_deterministic() {
        let img = image();
        let pr = prompt("abc");
        let a = synth_embed(&img, &pr, &[], 10, 16, 9).unwrap();
        let b = synth_embed(&img, &pr, &[], 10, 16, 9).unwrap();
        assert_eq!(a.shape(), [10, 16]);
        assert!(a.bitwise_eq(&b));
        for r in 0..10 {
            let n: f64 = a.data()[r * 16..(r + 1) * 16]
                .iter()
                .map(|v| (*v as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
        let c = synth_embed(&img, &pr, &[], 10, 16, 10).unwrap();
        assert!(!a.bitwise_eq(&c));
    }

    #[test]
    fn statistics_bias_first_rows() {
        let img = image();
        let pr = prompt("");
        let s = VariableStats {
            mean: 5.0,
            std: 1.0,
            range: Some((4.0, 6.0)),
            missing_rate: 0.25,
            density: 0.75,
            observed: 3,
        };
        let plain = synth_embed(&img, &pr, &[], 3, 6, 2).unwrap();
        let biased = synth_embed(&img, &pr, &[s], 3, 6, 2).unwrap();
        let d: Vec<f32> = (0..6).map(|j| biased.data()[j] - plain.data()[j]).collect();
        for (got, want) in d.iter().zip([5.0, 1.0, 0.25, 0.75, 0.0, 0.0]) {
            assert!((*got as f64 - want).abs() < 1e-6);
        }
        assert_eq!(&biased.data()[6..], &plain.data()[6..]);
    }
}
