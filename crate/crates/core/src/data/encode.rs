//! Image-to-sequence encoders: pixel-by-pixel sequentialization (with an
//! optional fixed permutation), Poisson rate coding, repeated static frames,
//! and block-average downsampling.

use super::{SequenceBatch, Targets};
use crate::autodiff::Matrix;
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::Rng;

/// Scale raw bytes to [0,1] by dividing by 255.
pub fn normalize_images(images: &[u8]) -> Vec<f64> {
    images.iter().map(|&b| b as f64 / 255.0).collect()
}

/// Average-pool square images over `k x k` blocks. `side` must be divisible
/// by `k`; returns images of side `side / k`.
pub fn downsample(images: &[f64], n: usize, side: usize, k: usize) -> Result<Vec<f64>> {
    if k == 0 || side % k != 0 {
        return Err(Error::config(format!(
            "cannot pool {side}x{side} images into {k}x{k} blocks"
        )));
    }
    if images.len() != n * side * side {
        return Err(Error::config("image buffer size mismatch"));
    }
    let out_side = side / k;
    let mut out = Vec::with_capacity(n * out_side * out_side);
    let inv = 1.0 / (k * k) as f64;
    for i in 0..n {
        let img = &images[i * side * side..(i + 1) * side * side];
        for r in 0..out_side {
            for c in 0..out_side {
                let mut acc = 0.0;
                for dr in 0..k {
                    for dc in 0..k {
                        acc += img[(r * k + dr) * side + (c * k + dc)];
                    }
                }
                out.push(acc * inv);
            }
        }
    }
    Ok(out)
}

/// Deterministic permutation of `0..n` from a seed.
pub fn make_permutation(n: usize, seed: u64) -> Vec<usize> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    perm
}

fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    if perm.len() != n {
        return Err(Error::config(format!(
            "permutation length {} for {n} pixels",
            perm.len()
        )));
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || seen[p] {
            return Err(Error::config("permutation is not a bijection"));
        }
        seen[p] = true;
    }
    Ok(())
}

/// Reshape each image into a 1-pixel-per-step sequence of length `dim`,
/// optionally reordered by a fixed permutation.
pub fn sequentialize(
    images: &[f64],
    n: usize,
    dim: usize,
    labels: &[usize],
    permutation: Option<&[usize]>,
) -> Result<SequenceBatch> {
    if images.len() != n * dim {
        return Err(Error::config("image buffer size mismatch"));
    }
    if let Some(p) = permutation {
        check_permutation(p, dim)?;
    }
    let mut steps = Vec::with_capacity(dim);
    for t in 0..dim {
        let src = permutation.map_or(t, |p| p[t]);
        let mut x = Matrix::zeros(n, 1);
        for b in 0..n {
            x.set(b, 0, images[b * dim + src]);
        }
        steps.push(x);
    }
    SequenceBatch::new(steps, Targets::Classes(labels.to_vec()))
}

/// Poisson rate coding: at each of `t_len` steps each pixel spikes
/// independently with probability equal to its normalized intensity.
pub fn rate_encode(
    images: &[f64],
    n: usize,
    dim: usize,
    labels: &[usize],
    t_len: usize,
    rng: &mut impl Rng,
) -> Result<SequenceBatch> {
    if images.len() != n * dim {
        return Err(Error::config("image buffer size mismatch"));
    }
    let mut steps = Vec::with_capacity(t_len);
    for _ in 0..t_len {
        let mut x = Matrix::zeros(n, dim);
        for b in 0..n {
            for d in 0..dim {
                let p = images[b * dim + d];
                if rng.random::<f64>() < p {
                    x.set(b, d, 1.0);
                }
            }
        }
        steps.push(x);
    }
    SequenceBatch::new(steps, Targets::Classes(labels.to_vec()))
}

/// Inject pixel intensities identically at every step as constant currents.
pub fn repeat_encode(
    images: &[f64],
    n: usize,
    dim: usize,
    labels: &[usize],
    t_len: usize,
) -> Result<SequenceBatch> {
    if t_len == 0 {
        return Err(Error::config("repeat encoding needs at least one step"));
    }
    if images.len() != n * dim {
        return Err(Error::config("image buffer size mismatch"));
    }
    let mut frame = Matrix::zeros(n, dim);
    for b in 0..n {
        for d in 0..dim {
            frame.set(b, d, images[b * dim + d]);
        }
    }
    let steps = vec![frame; t_len];
    SequenceBatch::new(steps, Targets::Classes(labels.to_vec()))
}
