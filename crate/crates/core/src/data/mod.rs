//! Task generators and dataset loaders producing sequence-batch streams:
//! the add task, pixel-sequential and permuted MNIST, Poisson rate-coded
//! MNIST, and repeated static frames.

mod encode;
mod idx;

pub use encode::{
    downsample, make_permutation, normalize_images, rate_encode, repeat_encode, sequentialize,
};
pub use idx::{load_idx, read_idx_images, read_idx_labels, write_idx_images, write_idx_labels,
    IdxImageSet};

use crate::autodiff::Matrix;
use crate::{Error, Result};
use rand::Rng;
use std::ops::Range;

/// Per-sequence training targets.
#[derive(Debug, Clone)]
pub enum Targets {
    /// One class label per batch row.
    Classes(Vec<usize>),
    /// Add-task targets: final sum per row, plus the running partial sum at
    /// every step for per-step supervision.
    AddTask {
        y: Vec<f64>,
        running: Vec<Matrix>,
    },
}

impl Targets {
    pub fn slice_rows(&self, rows: Range<usize>) -> Targets {
        match self {
            Targets::Classes(c) => Targets::Classes(c[rows].to_vec()),
            Targets::AddTask { y, running } => Targets::AddTask {
                y: y[rows.clone()].to_vec(),
                running: running
                    .iter()
                    .map(|m| m.slice_rows(rows.start, rows.len()))
                    .collect(),
            },
        }
    }
}

/// A batch of input sequences with their targets.
#[derive(Debug, Clone)]
pub struct SequenceBatch {
    /// One `batch x input_dim` matrix per step.
    pub steps: Vec<Matrix>,
    pub targets: Targets,
    pub t_len: usize,
    pub batch: usize,
    pub input_dim: usize,
}

impl SequenceBatch {
    pub fn new(steps: Vec<Matrix>, targets: Targets) -> Result<Self> {
        let t_len = steps.len();
        if t_len == 0 {
            return Err(Error::config("sequence batch with no steps"));
        }
        let batch = steps[0].rows();
        let input_dim = steps[0].cols();
        if steps.iter().any(|s| s.shape() != (batch, input_dim)) {
            return Err(Error::config("inconsistent step shapes in batch"));
        }
        let target_rows = match &targets {
            Targets::Classes(c) => c.len(),
            Targets::AddTask { y, .. } => y.len(),
        };
        if target_rows != batch {
            return Err(Error::config(format!(
                "batch of {batch} sequences with {target_rows} targets"
            )));
        }
        Ok(SequenceBatch {
            steps,
            targets,
            t_len,
            batch,
            input_dim,
        })
    }
}

/// Generate one add-task batch: channel 0 holds uniform values in [0,1],
/// channel 1 is a marker that is 1 at exactly two positions; the target is
/// the sum of the two marked values. The first marker falls in [0, T/2),
/// the second in [T/2, T).
pub fn gen_add_task(batch: usize, t_len: usize, rng: &mut impl Rng) -> Result<SequenceBatch> {
    if t_len < 2 {
        return Err(Error::config("add task needs at least two steps"));
    }
    if batch == 0 {
        return Err(Error::config("empty add-task batch"));
    }
    let mut values = vec![vec![0.0f64; t_len]; batch];
    let mut marks = vec![(0usize, 0usize); batch];
    let mut y = vec![0.0f64; batch];
    for (b, row) in values.iter_mut().enumerate() {
        for v in row.iter_mut() {
            *v = rng.random_range(0.0..1.0);
        }
        let i = rng.random_range(0..t_len / 2);
        let j = rng.random_range(t_len / 2..t_len);
        marks[b] = (i, j);
        y[b] = row[i] + row[j];
    }

    let mut steps = Vec::with_capacity(t_len);
    let mut running = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let mut x = Matrix::zeros(batch, 2);
        let mut r = Matrix::zeros(batch, 1);
        for b in 0..batch {
            x.set(b, 0, values[b][t]);
            let (i, j) = marks[b];
            if t == i || t == j {
                x.set(b, 1, 1.0);
            }
            let mut partial = 0.0;
            if t >= i {
                partial += values[b][i];
            }
            if t >= j {
                partial += values[b][j];
            }
            r.set(b, 0, partial);
        }
        steps.push(x);
        running.push(r);
    }
    SequenceBatch::new(steps, Targets::AddTask { y, running })
}
