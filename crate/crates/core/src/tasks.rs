//! Synthetic length-generalization tasks: multi-query multi-token associative
//! recall (MQMTAR), sequence reversal and sorting.
//!
//! Every sample is a pure function of `(seed, index)`, so datasets can be
//! regenerated lazily and at any length multiplier.
//!
//! Layouts (targets are the inputs shifted left by one, last target = PAD):
//!
//! ```text
//! reverse/sort: BOS x_1..x_L SEP y_1..y_L EOS
//! mqmtar:       (KV k_a k_b v_a v_b) x P  Q q_1a q_1b .. q_4b  ANS a_1a a_1b .. a_4b
//! ```

use std::io::{BufRead, Write};

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::seeded;

pub const FORMAT: &str = "skam-task/1";

pub const SEQ_VALUES: usize = 32;
pub const BOS: usize = 32;
pub const SEP: usize = 33;
pub const EOS: usize = 34;
pub const SEQ_PAD: usize = 35;
pub const SEQ_VOCAB: usize = 36;

pub const MQ_BASE: usize = 256;
/// Reserved utility ids `256..=258`; no generator emits them.
pub const MQ_UTILITY: [usize; 3] = [256, 257, 258];
pub const KV_DELIM: usize = 259;
pub const Q_DELIM: usize = 260;
pub const ANS_DELIM: usize = 261;
pub const MQ_PAD: usize = 262;
pub const MQ_VOCAB: usize = 263;
pub const MQ_QUERIES: usize = 4;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("invalid task spec: {0}")]
    Spec(String),
    #[error("generation: {0}")]
    Generation(String),
    #[error("evaluation: {0}")]
    Eval(String),
    #[error("dataset format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Mqmtar,
    Reverse,
    Sort,
}

impl TaskKind {
    pub fn vocab(self) -> usize {
        match self {
            TaskKind::Mqmtar => MQ_VOCAB,
            TaskKind::Reverse | TaskKind::Sort => SEQ_VOCAB,
        }
    }

    pub fn pad(self) -> usize {
        match self {
            TaskKind::Mqmtar => MQ_PAD,
            TaskKind::Reverse | TaskKind::Sort => SEQ_PAD,
        }
    }

    pub fn parse(s: &str) -> Option<TaskKind> {
        match s {
            "mqmtar" => Some(TaskKind::Mqmtar),
            "reverse" => Some(TaskKind::Reverse),
            "sort" => Some(TaskKind::Sort),
            _ => None,
        }
    }
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Content length at multiplier 1: sequence length for reverse/sort,
    /// number of stored pairs for MQMTAR.
    pub base_len: usize,
    #[serde(default = "one")]
    pub length_multiplier: f64,
    #[serde(default)]
    pub seed: u64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSample {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
    #[serde(with = "mask_bits")]
    pub mask: Vec<bool>,
}

mod mask_bits {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &[bool], s: S) -> Result<S::Ok, S::Error> {
        m.iter().map(|&b| b as u8).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<bool>, D::Error> {
        let v = Vec::<u8>::deserialize(d)?;
        v.into_iter()
            .map(|b| match b {
                0 => Ok(false),
                1 => Ok(true),
                _ => Err(serde::de::Error::custom("mask entries must be 0 or 1")),
            })
            .collect()
    }
}

impl TaskSample {
    fn from_input(input: Vec<usize>, pad: usize, masked: impl Fn(usize) -> bool) -> Self {
        let n = input.len();
        let mut target: Vec<usize> = input[1..].to_vec();
        target.push(pad);
        let mask = (0..n).map(|t| t + 1 < n && masked(t)).collect();
        Self { input, target, mask }
    }

    pub fn len(&self) -> usize {
        self.input.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input.is_empty()
    }
}

impl TaskSpec {
    pub fn new(kind: TaskKind, base_len: usize, seed: u64, count: usize) -> Self {
        Self {
            kind,
            base_len,
            length_multiplier: 1.0,
            seed,
            count,
        }
    }

    pub fn with_multiplier(&self, m: f64) -> Self {
        Self {
            length_multiplier: m,
            ..self.clone()
        }
    }

    /// `base_len * length_multiplier`, which must be a positive integer.
    pub fn content_len(&self) -> Result<usize, TaskError> {
        let m = self.length_multiplier;
        if !(m > 0.0 && m.is_finite()) {
            return Err(TaskError::Spec(format!("length multiplier {m} must be positive")));
        }
        let x = self.base_len as f64 * m;
        let r = x.round();
        if (x - r).abs() > 1e-9 || r < 1.0 {
            return Err(TaskError::Spec(format!(
                "base_len {} x multiplier {m} is not a positive integer",
                self.base_len
            )));
        }
        Ok(r as usize)
    }

    /// Length of every sample of this spec.
    pub fn sequence_len(&self) -> Result<usize, TaskError> {
        let c = self.content_len()?;
        Ok(match self.kind {
            TaskKind::Reverse | TaskKind::Sort => 2 * c + 3,
            TaskKind::Mqmtar => 5 * c + 2 + 4 * MQ_QUERIES,
        })
    }

    pub fn sample(&self, index: u64) -> Result<TaskSample, TaskError> {
        let len = self.content_len()?;
        match self.kind {
            TaskKind::Reverse => Ok(gen_sequence(self.seed, index, len, false)),
            TaskKind::Sort => Ok(gen_sequence(self.seed, index, len, true)),
            TaskKind::Mqmtar => gen_mqmtar(self.seed, index, len),
        }
    }

    /// Samples `0..count`.
    pub fn generate(&self) -> Result<Vec<TaskSample>, TaskError> {
        (0..self.count as u64).map(|i| self.sample(i)).collect()
    }
}

fn gen_sequence(seed: u64, index: u64, len: usize, sort: bool) -> TaskSample {
    let mut rng = seeded(seed, index);
    let x: Vec<usize> = (0..len).map(|_| rng.gen_range(0..SEQ_VALUES)).collect();
    let mut y = x.clone();
    if sort {
        y.sort_unstable();
    } else {
        y.reverse();
    }
    let mut input = Vec::with_capacity(2 * len + 3);
    input.push(BOS);
    input.extend_from_slice(&x);
    input.push(SEP);
    input.extend_from_slice(&y);
    input.push(EOS);
    // predict y_1..y_L and EOS: positions SEP..=y_L
    TaskSample::from_input(input, SEQ_PAD, |t| t > len)
}

fn gen_mqmtar(seed: u64, index: u64, pairs: usize) -> Result<TaskSample, TaskError> {
    let space = MQ_BASE * MQ_BASE;
    if pairs > space {
        return Err(TaskError::Generation(format!(
            "{pairs} pairs exceed the {space} distinct two-token keys"
        )));
    }
    let mut rng = seeded(seed, index);
    let keys: Vec<usize> = sample_indices(&mut rng, space, pairs).into_vec();
    let values: Vec<usize> = (0..pairs).map(|_| rng.gen_range(0..space)).collect();
    let queries: Vec<usize> = if pairs >= MQ_QUERIES {
        sample_indices(&mut rng, pairs, MQ_QUERIES).into_vec()
    } else {
        (0..MQ_QUERIES).map(|_| rng.gen_range(0..pairs)).collect()
    };
    let split = |x: usize| [x / MQ_BASE, x % MQ_BASE];
    let mut input = Vec::with_capacity(5 * pairs + 2 + 4 * MQ_QUERIES);
    for (&k, &v) in keys.iter().zip(&values) {
        input.push(KV_DELIM);
        input.extend(split(k));
        input.extend(split(v));
    }
    input.push(Q_DELIM);
    for &q in &queries {
        input.extend(split(keys[q]));
    }
    input.push(ANS_DELIM);
    let answer_start = input.len();
    for &q in &queries {
        input.extend(split(values[q]));
    }
    Ok(TaskSample::from_input(input, MQ_PAD, |t| t + 1 >= answer_start))
}

/// Fraction of samples whose masked positions are all predicted correctly.
///
/// Samples with an empty mask are skipped with a warning.
pub fn exact_match(predictions: &[Vec<usize>], samples: &[TaskSample]) -> Result<f64, TaskError> {
    if predictions.len() != samples.len() {
        return Err(TaskError::Eval(format!(
            "{} predictions for {} samples",
            predictions.len(),
            samples.len()
        )));
    }
    let mut scored = 0usize;
    let mut correct = 0usize;
    for (i, (p, s)) in predictions.iter().zip(samples).enumerate() {
        if p.len() != s.len() {
            return Err(TaskError::Eval(format!(
                "sample {i}: {} predictions for {} positions",
                p.len(),
                s.len()
            )));
        }
        if !s.mask.iter().any(|&m| m) {
            log::warn!("sample {i} has an empty mask; excluded from exact match");
            continue;
        }
        scored += 1;
        if s.mask.iter().zip(p.iter().zip(&s.target)).all(|(&m, (a, b))| !m || a == b) {
            correct += 1;
        }
    }
    if scored == 0 {
        return Err(TaskError::Eval("no sample has a non-empty mask".into()));
    }
    Ok(correct as f64 / scored as f64)
}

/// First line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub kind: TaskKind,
    pub vocab: usize,
    pub seed: u64,
    pub base_len: usize,
    pub length_multiplier: f64,
    pub count: usize,
}

impl DatasetHeader {
    pub fn for_spec(spec: &TaskSpec) -> Self {
        Self {
            format: FORMAT.to_string(),
            kind: spec.kind,
            vocab: spec.kind.vocab(),
            seed: spec.seed,
            base_len: spec.base_len,
            length_multiplier: spec.length_multiplier,
            count: spec.count,
        }
    }

    pub fn spec(&self) -> TaskSpec {
        TaskSpec {
            kind: self.kind,
            base_len: self.base_len,
            length_multiplier: self.length_multiplier,
            seed: self.seed,
            count: self.count,
        }
    }
}

fn to_line<T: Serialize>(v: &T) -> Result<String, TaskError> {
    serde_json::to_string(v).map_err(|e| TaskError::Format(e.to_string()))
}

pub fn write_dataset<W: Write>(mut w: W, spec: &TaskSpec) -> Result<(), TaskError> {
    writeln!(w, "{}", to_line(&DatasetHeader::for_spec(spec))?)?;
    for i in 0..spec.count as u64 {
        writeln!(w, "{}", to_line(&spec.sample(i)?)?)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset<R: BufRead>(r: R) -> Result<(DatasetHeader, Vec<TaskSample>), TaskError> {
    let mut lines = r.lines();
    let first = lines
        .next()
        .ok_or_else(|| TaskError::Format("empty file".into()))??;
    let header: DatasetHeader =
        serde_json::from_str(&first).map_err(|e| TaskError::Format(format!("header: {e}")))?;
    if header.format != FORMAT {
        return Err(TaskError::Format(format!("unknown format {:?}", header.format)));
    }
    let mut samples = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: TaskSample =
            serde_json::from_str(&line).map_err(|e| TaskError::Format(format!("line {}: {e}", i + 2)))?;
        if s.target.len() != s.input.len() || s.mask.len() != s.input.len() {
            return Err(TaskError::Format(format!("line {}: ragged sample", i + 2)));
        }
        if s.input.iter().chain(&s.target).any(|&t| t >= header.vocab) {
            return Err(TaskError::Format(format!("line {}: token outside vocabulary", i + 2)));
        }
        samples.push(s);
    }
    Ok((header, samples))
}
