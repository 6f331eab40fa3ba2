//! Synthetic temporal-action sequences.
//!
//! Background frames are `N(0, I)`; a frame inside an interval of class `k`
//! is `N(s·μ_k, I)` with `μ_k` a fixed unit direction per class.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::exec::Exec;
use crate::tensor::Tensor;

/// Largest allowed pairwise dot product between class directions.
pub const MAX_DIRECTION_DOT: f64 = 0.3;
const DIRECTION_ATTEMPTS: usize = 100_000;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("infeasible dataset spec: {max_intervals} intervals of up to {max_len} frames do not fit in T={t}")]
    Infeasible {
        max_intervals: usize,
        max_len: usize,
        t: usize,
    },
    #[error("could not place {k} class directions in {d} dimensions with pairwise dot <= {MAX_DIRECTION_DOT}")]
    Directions { k: usize, d: usize },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionInterval {
    /// First frame, inclusive.
    pub start: usize,
    /// One past the last frame.
    pub end: usize,
    /// Class in `1..=K`; 0 is background.
    pub class_id: usize,
}

impl ActionInterval {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, t: usize) -> bool {
        (self.start..self.end).contains(&t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub seq_id: String,
    /// `[T × D]`.
    pub features: Tensor,
    pub intervals: Vec<ActionInterval>,
    pub fg_mask: Vec<u8>,
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.fg_mask.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn fg_mask_f64(&self) -> Vec<f64> {
        self.fg_mask.iter().map(|&m| f64::from(m)).collect()
    }
}

/// Builds the foreground mask implied by a set of intervals.
pub fn mask_from_intervals(t: usize, intervals: &[ActionInterval]) -> Vec<u8> {
    let mut mask = vec![0u8; t];
    for iv in intervals {
        mask[iv.start..iv.end].iter_mut().for_each(|m| *m = 1);
    }
    mask
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub num_sequences: usize,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "D")]
    pub d: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub min_intervals: usize,
    pub max_intervals: usize,
    /// Foreground signal-to-noise ratio `s`.
    pub snr: f64,
    pub seed: u64,
    /// Trailing share of the sequences held out for evaluation.
    #[serde(default = "default_eval_fraction")]
    pub eval_fraction: f64,
}

fn default_eval_fraction() -> f64 {
    0.2
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_sequences: 250,
            t: 128,
            d: 16,
            k: 5,
            min_len: 8,
            max_len: 32,
            min_intervals: 1,
            max_intervals: 3,
            snr: 3.0,
            seed: 0,
            eval_fraction: default_eval_fraction(),
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.to_string()));
        if self.num_sequences == 0 || self.t == 0 || self.d == 0 || self.k == 0 {
            return bad("num_sequences, T, D and K must be positive");
        }
        if self.min_len < 2 {
            return bad("min_len must be at least 2");
        }
        if self.min_len > self.max_len {
            return bad("min_len exceeds max_len");
        }
        if self.min_intervals > self.max_intervals {
            return bad("min_intervals exceeds max_intervals");
        }
        if !(self.snr > 0.0 && self.snr.is_finite()) {
            return bad("snr must be positive");
        }
        if !(0.0..=1.0).contains(&self.eval_fraction) {
            return bad("eval_fraction must lie in [0, 1]");
        }
        if self.max_intervals * self.max_len > self.t {
            return Err(SynthError::Infeasible {
                max_intervals: self.max_intervals,
                max_len: self.max_len,
                t: self.t,
            });
        }
        Ok(())
    }

    /// Number of leading sequences that form the training split.
    pub fn num_train(&self) -> usize {
        let eval = (self.num_sequences as f64 * self.eval_fraction).round() as usize;
        self.num_sequences - eval.min(self.num_sequences)
    }
}

/// `K` unit vectors in `R^D`, pairwise dot product at most
/// [`MAX_DIRECTION_DOT`], drawn by rejection from the seed alone.
pub fn class_directions(k: usize, d: usize, seed: u64) -> Result<Vec<Vec<f64>>, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(k);
    for _ in 0..DIRECTION_ATTEMPTS {
        if dirs.len() == k {
            break;
        }
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        let ok = dirs
            .iter()
            .all(|u| u.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() <= MAX_DIRECTION_DOT);
        if ok {
            dirs.push(v);
        }
    }
    if dirs.len() < k {
        return Err(SynthError::Directions { k, d });
    }
    Ok(dirs)
}

pub fn generate(spec: &DatasetSpec) -> Result<Vec<FeatureSequence>, SynthError> {
    generate_with(spec, Exec::default())
}

/// Each sequence draws from its own ChaCha stream, so the output does not
/// depend on `exec`.
pub fn generate_with(spec: &DatasetSpec, exec: Exec) -> Result<Vec<FeatureSequence>, SynthError> {
    spec.validate()?;
    let dirs = class_directions(spec.k, spec.d, spec.seed)?;
    Ok(exec.map_range(spec.num_sequences, |i| generate_one(spec, &dirs, i)))
}

fn generate_one(spec: &DatasetSpec, dirs: &[Vec<f64>], index: usize) -> FeatureSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);

    let n = rng.random_range(spec.min_intervals..=spec.max_intervals);
    let lens: Vec<usize> = (0..n)
        .map(|_| rng.random_range(spec.min_len..=spec.max_len))
        .collect();
    let free = spec.t - lens.iter().sum::<usize>();
    // stars and bars: n sorted cut points split the free frames into n+1 gaps
    let mut cuts: Vec<usize> = (0..n).map(|_| rng.random_range(0..=free)).collect();
    cuts.sort_unstable();

    let mut intervals = Vec::with_capacity(n);
    let mut cursor = 0;
    let mut prev_cut = 0;
    for (len, cut) in lens.iter().zip(&cuts) {
        cursor += cut - prev_cut;
        prev_cut = *cut;
        let class_id = rng.random_range(1..=spec.k);
        intervals.push(ActionInterval {
            start: cursor,
            end: cursor + len,
            class_id,
        });
        cursor += len;
    }

    let mut data = Vec::with_capacity(spec.t * spec.d);
    let mut class_at = vec![0usize; spec.t];
    for iv in &intervals {
        class_at[iv.start..iv.end].iter_mut().for_each(|c| *c = iv.class_id);
    }
    let zero = vec![0.0; spec.d];
    for &c in &class_at {
        let (dir, scale) = if c == 0 { (&zero, 0.0) } else { (&dirs[c - 1], spec.snr) };
        for &u in dir {
            let noise: f64 = rng.sample(StandardNormal);
            data.push(scale * u + noise);
        }
    }

    FeatureSequence {
        seq_id: format!("seq-{index:05}"),
        features: Tensor::new(vec![spec.t, spec.d], data).expect("shape matches generated data"),
        fg_mask: mask_from_intervals(spec.t, &intervals),
        intervals,
    }
}

/// On-disk layout of one sequence; field order is part of the file format.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    seq_id: String,
    #[serde(rename = "T")]
    t: usize,
    #[serde(rename = "D")]
    d: usize,
    features: Vec<f64>,
    intervals: Vec<[usize; 3]>,
    fg_mask: Vec<u8>,
}

impl Record {
    fn from_sequence(s: &FeatureSequence) -> Self {
        Record {
            seq_id: s.seq_id.clone(),
            t: s.len(),
            d: s.dim(),
            features: s.features.data().to_vec(),
            intervals: s.intervals.iter().map(|iv| [iv.start, iv.end, iv.class_id]).collect(),
            fg_mask: s.fg_mask.clone(),
        }
    }

    fn into_sequence(self) -> Result<FeatureSequence, String> {
        let features = Tensor::new(vec![self.t, self.d], self.features).map_err(|e| e.to_string())?;
        let intervals: Vec<ActionInterval> = self
            .intervals
            .iter()
            .map(|&[start, end, class_id]| ActionInterval { start, end, class_id })
            .collect();
        let mut prev_end = 0;
        for iv in &intervals {
            if iv.start >= iv.end || iv.end > self.t || iv.class_id == 0 {
                return Err(format!("invalid interval {iv:?} for T={}", self.t));
            }
            if iv.start < prev_end {
                return Err("intervals overlap or are unsorted".into());
            }
            prev_end = iv.end;
        }
        if self.fg_mask != mask_from_intervals(self.t, &intervals) {
            return Err("fg_mask disagrees with intervals".into());
        }
        Ok(FeatureSequence {
            seq_id: self.seq_id,
            features,
            intervals,
            fg_mask: self.fg_mask,
        })
    }
}

/// Serializes sequences as JSON lines; floats use shortest round-trip form.
pub fn to_jsonl(seqs: &[FeatureSequence]) -> String {
    let mut out = String::new();
    for s in seqs {
        out.push_str(&serde_json::to_string(&Record::from_sequence(s)).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn write_dataset(seqs: &[FeatureSequence], path: &Path) -> Result<(), SynthError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for s in seqs {
        serde_json::to_writer(&mut w, &Record::from_sequence(s))
            .map_err(|e| SynthError::Io(e.into()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn parse_jsonl(reader: impl BufRead) -> Result<Vec<FeatureSequence>, SynthError> {
    let mut seqs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| SynthError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        seqs.push(record.into_sequence().map_err(|msg| SynthError::Parse { line: i + 1, msg })?);
    }
    Ok(seqs)
}

pub fn read_dataset(path: &Path) -> Result<Vec<FeatureSequence>, SynthError> {
    parse_jsonl(BufReader::new(fs::File::open(path)?))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
