//! Seeded synthetic classification tasks.

use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, SpurError};
use crate::matrix::Matrix;
use crate::models::{Inputs, TokenGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    /// Does the sequence contain a repeated token?
    Duplicate,
    /// Majority bit of a binary sequence.
    Majority,
    /// Gaussian clusters around per-class centers.
    Blobs,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Duplicate => "duplicate",
            Self::Majority => "majority",
            Self::Blobs => "blobs",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = SpurError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "duplicate" => Ok(Self::Duplicate),
            "majority" => Ok(Self::Majority),
            "blobs" => Ok(Self::Blobs),
            other => Err(SpurError::Config(format!("unknown task `{other}`"))),
        }
    }
}

/// Inputs with their class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub inputs: Inputs,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, rows: &[usize]) -> Split {
        Split {
            inputs: self.inputs.select(rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Split,
    pub test: Split,
    pub classes: usize,
}

impl Dataset {
    fn split(inputs: Inputs, labels: Vec<usize>, n_train: usize, classes: usize) -> Self {
        let all = Split { inputs, labels };
        let train_rows: Vec<usize> = (0..n_train).collect();
        let test_rows: Vec<usize> = (n_train..all.len()).collect();
        Self {
            train: all.select(&train_rows),
            test: all.select(&test_rows),
            classes,
        }
    }
}

/// Label 1 sequences hold exactly one repeated token, label 0 sequences are
/// all distinct. Labels alternate so both splits stay balanced.
pub fn gen_duplicate_task(
    seed: u64,
    n_train: usize,
    n_test: usize,
    len: usize,
    vocab: usize,
) -> Result<Dataset> {
    if vocab <= len {
        return Err(SpurError::Config(format!(
            "duplicate task needs vocab > len, got vocab {vocab} and len {len}"
        )));
    }
    if len < 2 {
        return Err(SpurError::Config("duplicate task needs len >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = n_train + n_test;
    let mut ids = Vec::with_capacity(n * len);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        if label == 0 {
            ids.extend(index::sample(&mut rng, vocab, len).into_iter());
        } else {
            let mut seq: Vec<usize> = index::sample(&mut rng, vocab, len - 1).into_vec();
            let dup = seq[rng.gen_range(0..seq.len())];
            seq.push(dup);
            seq.shuffle(&mut rng);
            ids.extend(seq);
        }
        labels.push(label);
    }
    let grid = TokenGrid::new(n, len, ids)?;
    Ok(Dataset::split(Inputs::Tokens(grid), labels, n_train, 2))
}

/// Uniform random bit strings labelled by their majority bit.
pub fn gen_majority_task(seed: u64, n_train: usize, n_test: usize, len: usize) -> Result<Dataset> {
    if len % 2 == 0 {
        return Err(SpurError::Config(format!("majority task needs odd len, got {len}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = n_train + n_test;
    let mut ids = Vec::with_capacity(n * len);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let seq: Vec<usize> = (0..len).map(|_| rng.gen_range(0..2)).collect();
        let ones = seq.iter().filter(|&&b| b == 1).count();
        labels.push(usize::from(2 * ones > len));
        ids.extend(seq);
    }
    let grid = TokenGrid::new(n, len, ids)?;
    Ok(Dataset::split(Inputs::Tokens(grid), labels, n_train, 2))
}

/// Majority label of one bit sequence.
pub fn majority_label(bits: &[usize]) -> usize {
    usize::from(2 * bits.iter().filter(|&&b| b == 1).count() > bits.len())
}

/// Class `c` is centred at `4 * c * e_(c mod dim)` with isotropic noise `spread`.
pub fn gen_blobs(
    seed: u64,
    n_train: usize,
    n_test: usize,
    dim: usize,
    classes: usize,
    spread: f64,
) -> Result<Dataset> {
    if classes < 2 || dim == 0 {
        return Err(SpurError::Config(format!(
            "blobs need classes >= 2 and dim >= 1, got {classes} and {dim}"
        )));
    }
    if !(spread >= 0.0) || !spread.is_finite() {
        return Err(SpurError::Config(format!("blob spread must be >= 0, got {spread}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spread).map_err(|e| SpurError::Config(e.to_string()))?;
    let n = n_train + n_test;
    let mut features = Matrix::zeros(n, dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        for j in 0..dim {
            let center = if j == c % dim { 4.0 * c as f64 } else { 0.0 };
            let jitter = if spread == 0.0 { 0.0 } else { noise.sample(&mut rng) };
            features.set(i, j, center + jitter);
        }
        labels.push(c);
    }
    Ok(Dataset::split(Inputs::Features(features), labels, n_train, classes))
}
