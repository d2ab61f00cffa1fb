//! ISTS data model, canonical padded representation, splitting,
//! normalization, dataset files and the synthetic generator.
//!
//! Each variable keeps its own timestamps; canonicalization pads every
//! variable independently into a row of fixed width `L`, with observations
//! left-aligned and a binary mask marking real entries.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_for;

/// Minimum standard deviation used by [`Normalizer`].
pub const STD_FLOOR: f64 = 1e-8;

/// Significant digits kept for every real written to a dataset file.
pub const FILE_SIGNIFICANT_DIGITS: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation {
    pub t: f64,
    pub x: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariableSeries {
    pub var_index: usize,
    pub observations: Vec<Observation>,
}

impl VariableSeries {
    pub fn last_time(&self) -> Option<f64> {
        self.observations.last().map(|o| o.t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForecastQuery {
    pub var_index: usize,
    pub q: f64,
    pub target: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub series: Vec<VariableSeries>,
    pub queries: Vec<ForecastQuery>,
}

impl Sample {
    pub fn n_vars(&self) -> usize {
        self.series.len()
    }

    /// Longest per-variable observation count.
    pub fn max_len(&self) -> usize {
        self.series.iter().map(|s| s.observations.len()).max().unwrap_or(0)
    }

    /// Checks the structural invariants: one series per variable index in
    /// order, finite values, strictly increasing timestamps, and queries
    /// strictly after the last observation of their variable.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSample(format!("`{}`: {msg}", self.id)));
        for (i, s) in self.series.iter().enumerate() {
            if s.var_index != i {
                return bad(format!("series {i} has var_index {}", s.var_index));
            }
            for w in s.observations.windows(2) {
                if w[1].t <= w[0].t {
                    return bad(format!("variable {i} timestamps not strictly increasing"));
                }
            }
            if s.observations.iter().any(|o| !o.t.is_finite() || !o.x.is_finite()) {
                return bad(format!("variable {i} has a non-finite observation"));
            }
        }
        for q in &self.queries {
            let Some(series) = self.series.get(q.var_index) else {
                return bad(format!("query for unknown variable {}", q.var_index));
            };
            if !q.q.is_finite() || q.target.is_some_and(|t| !t.is_finite()) {
                return bad("non-finite query".into());
            }
            if series.last_time().is_some_and(|last| q.q <= last) {
                return bad(format!(
                    "query at {} does not follow last observation of variable {}",
                    q.q, q.var_index
                ));
            }
        }
        Ok(())
    }

    /// Drops the oldest observations of any variable longer than `cap`.
    pub fn truncate_oldest(&self, cap: usize) -> Sample {
        let mut out = self.clone();
        for s in &mut out.series {
            let n = s.observations.len();
            if n > cap {
                s.observations.drain(..n - cap);
            }
        }
        out
    }
}

/// Per-variable padded triplet `(T, X, M)`, each `n_vars x len` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CanonicalSample {
    pub n_vars: usize,
    pub len: usize,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub mask: Vec<f64>,
}

impl CanonicalSample {
    fn idx(&self, n: usize, l: usize) -> usize {
        n * self.len + l
    }

    pub fn time(&self, n: usize, l: usize) -> f64 {
        self.times[self.idx(n, l)]
    }

    pub fn value(&self, n: usize, l: usize) -> f64 {
        self.values[self.idx(n, l)]
    }

    pub fn observed(&self, n: usize, l: usize) -> bool {
        self.mask[self.idx(n, l)] > 0.0
    }

    pub fn mask_row(&self, n: usize) -> &[f64] {
        &self.mask[n * self.len..(n + 1) * self.len]
    }

    pub fn observed_count(&self, n: usize) -> usize {
        self.mask_row(n).iter().filter(|m| **m > 0.0).count()
    }

    /// Whether the observed positions of row `n` form a prefix.
    pub fn is_prefix(&self, n: usize) -> bool {
        let k = self.observed_count(n);
        self.mask_row(n)[..k].iter().all(|m| *m > 0.0)
    }

    /// `(t, x)` pairs at observed positions of row `n`.
    pub fn observations(&self, n: usize) -> Vec<Observation> {
        (0..self.len)
            .filter(|&l| self.observed(n, l))
            .map(|l| Observation {
                t: self.time(n, l),
                x: self.value(n, l),
            })
            .collect()
    }

    /// Checks shapes, that the mask is binary and that padded cells hold zero.
    pub fn validate(&self) -> Result<()> {
        let cells = self.n_vars * self.len;
        if self.times.len() != cells || self.values.len() != cells || self.mask.len() != cells {
            return Err(Error::InvalidSample("canonical buffers do not match shape".into()));
        }
        for i in 0..cells {
            let m = self.mask[i];
            if m != 0.0 && m != 1.0 {
                return Err(Error::InvalidSample(format!("mask entry {m} is not binary")));
            }
            if m == 0.0 && self.values[i] != 0.0 {
                return Err(Error::InvalidSample("padded cell holds a non-zero value".into()));
            }
        }
        Ok(())
    }
}

/// Left-aligns each variable's observations into a row of width `len`.
pub fn canonicalize(sample: &Sample, len: usize) -> Result<CanonicalSample> {
    let n_vars = sample.n_vars();
    let mut out = CanonicalSample {
        n_vars,
        len,
        times: vec![0.0; n_vars * len],
        values: vec![0.0; n_vars * len],
        mask: vec![0.0; n_vars * len],
    };
    for (n, s) in sample.series.iter().enumerate() {
        if s.observations.len() > len {
            return Err(Error::SequenceTooLong {
                sample: sample.id.clone(),
                var: n,
                len: s.observations.len(),
                limit: len,
            });
        }
        for (l, o) in s.observations.iter().enumerate() {
            out.times[n * len + l] = o.t;
            out.values[n * len + l] = o.x;
            out.mask[n * len + l] = 1.0;
        }
    }
    Ok(out)
}

/// Dataset-wide `L`: the longest per-variable sequence, optionally capped.
pub fn dataset_seq_len(samples: &[Sample], cap: Option<usize>) -> usize {
    let longest = samples.iter().map(Sample::max_len).max().unwrap_or(0).max(1);
    cap.map_or(longest, |c| longest.min(c.max(1)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Shuffles under `seed` and cuts `floor(0.6k) / floor(0.2k) / rest`.
pub fn split_dataset(samples: Vec<Sample>, seed: u64) -> Result<DatasetSplit> {
    let k = samples.len();
    if k < 5 {
        return Err(Error::TooFewSamples { required: 5, got: k });
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(&mut rng_for(seed, "split"));
    let n_train = k * 6 / 10;
    let n_val = k * 2 / 10;
    let mut slots: Vec<Option<Sample>> = samples.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| -> Vec<Sample> {
        idx.iter()
            .map(|&i| slots[i].take().expect("each index used once"))
            .collect()
    };
    let train = take(&order[..n_train]);
    let val = take(&order[n_train..n_train + n_val]);
    let test = take(&order[n_train + n_val..]);
    Ok(DatasetSplit { train, val, test })
}

/// Per-variable z-score statistics fitted on observed training entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit(train: &[Sample], n_vars: usize) -> Self {
        let mut mean = vec![0.0; n_vars];
        let mut std = vec![1.0; n_vars];
        for n in 0..n_vars {
            let values: Vec<f64> = train
                .iter()
                .filter_map(|s| s.series.get(n))
                .flat_map(|s| s.observations.iter().map(|o| o.x))
                .collect();
            if values.is_empty() {
                continue;
            }
            let mu = values.iter().sum::<f64>() / values.len() as f64;
            let var = values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / values.len() as f64;
            mean[n] = mu;
            std[n] = var.sqrt().max(STD_FLOOR);
        }
        Self { mean, std }
    }

    pub fn identity(n_vars: usize) -> Self {
        Self {
            mean: vec![0.0; n_vars],
            std: vec![1.0; n_vars],
        }
    }

    pub fn apply(&self, value: f64, var: usize) -> f64 {
        (value - self.mean[var]) / self.std[var]
    }

    pub fn invert(&self, value: f64, var: usize) -> f64 {
        value * self.std[var] + self.mean[var]
    }

    /// Copy of `sample` with observed values and targets normalized.
    pub fn normalize_sample(&self, sample: &Sample) -> Sample {
        let mut out = sample.clone();
        for s in &mut out.series {
            for o in &mut s.observations {
                o.x = self.apply(o.x, s.var_index);
            }
        }
        for q in &mut out.queries {
            q.target = q.target.map(|t| self.apply(t, q.var_index));
        }
        out
    }
}

/// Rounds to `digits` significant decimal digits.
pub fn round_significant(value: f64, digits: usize) -> f64 {
    if value == 0.0 || !value.is_finite() {
        return value;
    }
    format!("{:.*e}", digits.saturating_sub(1), value)
        .parse()
        .expect("formatted float parses")
}

fn round9(v: f64) -> f64 {
    round_significant(v, FILE_SIGNIFICANT_DIGITS)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_vars: usize,
    pub l_max: usize,
    pub samples: usize,
    pub obs_rate: f64,
    pub noise: f64,
    /// Forecast queries per variable.
    pub horizon: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_vars: 5,
            l_max: 24,
            samples: 500,
            obs_rate: 0.6,
            noise: 0.1,
            horizon: 3,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.n_vars == 0 || self.l_max == 0 || self.samples == 0 || self.horizon == 0 {
            return bad("n_vars, l_max, samples and horizon must be positive");
        }
        if !(self.obs_rate > 0.0 && self.obs_rate <= 1.0) {
            return bad("obs_rate must lie in (0, 1]");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be a finite non-negative number");
        }
        Ok(())
    }
}

/// End of the observation window; queries fall in `(HISTORY_END, 1]`.
pub const HISTORY_END: f64 = 0.8;

struct VariableShape {
    offset: f64,
    loading: f64,
    amplitudes: [f64; 2],
    frequencies: [f64; 2],
    phases: [f64; 2],
}

/// Deterministic synthetic ISTS dataset.
///
/// Each variable is a fixed two-term sinusoid mixture plus a loading on a
/// per-sample latent trend (level + slope), plus Gaussian noise. Candidate
/// times are `l_max` uniform draws on `[0, 0.8]`, each kept with probability
/// `obs_rate`. Query times are uniform on `(0.8, 1]`.
pub fn generate_synthetic(config: &SynthConfig, seed: u64) -> Result<Vec<Sample>> {
    config.validate()?;
    let mut shape_rng = rng_for(seed, "synthetic/variables");
    let shapes: Vec<VariableShape> = (0..config.n_vars)
        .map(|_| VariableShape {
            offset: shape_rng.random_range(-1.0..1.0),
            loading: shape_rng.random_range(0.5..1.5) * if shape_rng.random_bool(0.5) { 1.0 } else { -1.0 },
            amplitudes: [shape_rng.random_range(0.3..1.0), shape_rng.random_range(0.1..0.5)],
            frequencies: [shape_rng.random_range(0.5..1.5), shape_rng.random_range(1.5..3.0)],
            phases: [
                shape_rng.random_range(0.0..std::f64::consts::TAU),
                shape_rng.random_range(0.0..std::f64::consts::TAU),
            ],
        })
        .collect();

    let mut rng = rng_for(seed, "synthetic/samples");
    let mut out = Vec::with_capacity(config.samples);
    for i in 0..config.samples {
        let level: f64 = rng.sample(StandardNormal);
        let slope: f64 = rng.sample(StandardNormal);
        let shift: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let signal = |v: &VariableShape, t: f64| {
            let periodic: f64 = (0..2)
                .map(|k| {
                    v.amplitudes[k]
                        * (std::f64::consts::TAU * v.frequencies[k] * t + v.phases[k] + shift).sin()
                })
                .sum();
            v.offset + v.loading * (level + slope * t) + periodic
        };

        let mut series = Vec::with_capacity(config.n_vars);
        let mut queries = Vec::new();
        for (n, shape) in shapes.iter().enumerate() {
            let mut times: Vec<f64> = (0..config.l_max)
                .map(|_| round9(rng.random_range(0.0..=HISTORY_END)))
                .collect();
            let keep: Vec<bool> = (0..config.l_max).map(|_| rng.random_bool(config.obs_rate)).collect();
            let mut kept: Vec<f64> = times.drain(..).zip(keep).filter_map(|(t, k)| k.then_some(t)).collect();
            kept.sort_by(f64::total_cmp);
            kept.dedup();
            let observations = kept
                .into_iter()
                .map(|t| {
                    let eps: f64 = rng.sample(StandardNormal);
                    Observation {
                        t,
                        x: round9(signal(shape, t) + config.noise * eps),
                    }
                })
                .collect();
            series.push(VariableSeries {
                var_index: n,
                observations,
            });

            let mut qs: Vec<f64> = (0..config.horizon)
                .map(|_| round9(1.0 - rng.random_range(0.0..1.0 - HISTORY_END)))
                .collect();
            qs.sort_by(f64::total_cmp);
            qs.dedup();
            for q in qs {
                let eps: f64 = rng.sample(StandardNormal);
                queries.push(ForecastQuery {
                    var_index: n,
                    q,
                    target: Some(round9(signal(shape, q) + config.noise * eps)),
                });
            }
        }
        out.push(Sample {
            id: format!("syn-{seed}-{i:05}"),
            series,
            queries,
        });
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct SeriesRecord {
    var: usize,
    t: Vec<f64>,
    x: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct QueryRecord {
    var: usize,
    q: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    id: String,
    series: Vec<SeriesRecord>,
    queries: Vec<QueryRecord>,
}

impl From<&Sample> for SampleRecord {
    fn from(s: &Sample) -> Self {
        Self {
            id: s.id.clone(),
            series: s
                .series
                .iter()
                .map(|v| SeriesRecord {
                    var: v.var_index,
                    t: v.observations.iter().map(|o| round9(o.t)).collect(),
                    x: v.observations.iter().map(|o| round9(o.x)).collect(),
                })
                .collect(),
            queries: s
                .queries
                .iter()
                .map(|q| QueryRecord {
                    var: q.var_index,
                    q: round9(q.q),
                    target: q.target.map(round9),
                })
                .collect(),
        }
    }
}

impl TryFrom<SampleRecord> for Sample {
    type Error = Error;

    fn try_from(r: SampleRecord) -> Result<Self> {
        let series = r
            .series
            .into_iter()
            .map(|s| {
                if s.t.len() != s.x.len() {
                    return Err(Error::InvalidSample(format!(
                        "`{}`: variable {} has {} timestamps and {} values",
                        r.id,
                        s.var,
                        s.t.len(),
                        s.x.len()
                    )));
                }
                Ok(VariableSeries {
                    var_index: s.var,
                    observations: s.t.into_iter().zip(s.x).map(|(t, x)| Observation { t, x }).collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let sample = Sample {
            id: r.id,
            series,
            queries: r
                .queries
                .into_iter()
                .map(|q| ForecastQuery {
                    var_index: q.var,
                    q: q.q,
                    target: q.target,
                })
                .collect(),
        };
        sample.validate()?;
        Ok(sample)
    }
}

/// One JSON object per line; reals rounded to 9 significant digits.
pub fn write_dataset(path: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut w, &SampleRecord::from(s))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|e| Error::NotFound(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SampleRecord = serde_json::from_str(&line)?;
        out.push(Sample::try_from(record)?);
    }
    if let Some(first) = out.first() {
        let n = first.n_vars();
        if let Some(bad) = out.iter().find(|s| s.n_vars() != n) {
            return Err(Error::InvalidSample(format!(
                "`{}` has {} variables, dataset has {n}",
                bad.id,
                bad.n_vars()
            )));
        }
    }
    Ok(out)
}
