//! Deterministic k-means codebook fitting.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Rows of `dim` scalars used as vector-quantization centroids.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    dim: usize,
    entries: Vec<f64>,
}

impl Codebook {
    pub fn new(dim: usize, entries: Vec<f64>) -> Result<Self> {
        if dim == 0 || entries.len() % dim != 0 {
            return Err(Error::invalid(format!(
                "codebook of {} values is not a multiple of dimension {dim}",
                entries.len()
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::data("codebook has non-finite entries"));
        }
        Ok(Codebook { dim, entries })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, i: usize) -> &[f64] {
        &self.entries[i * self.dim..(i + 1) * self.dim]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// Codebook with every value rounded through `f32`, as stored on disk.
    pub fn rounded_to_f32(&self) -> Codebook {
        Codebook {
            dim: self.dim,
            entries: self.entries.iter().map(|&v| v as f32 as f64).collect(),
        }
    }

    /// Index of the nearest entry; ties go to the lowest index.
    pub fn nearest(&self, v: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (i, c) in self.entries.chunks_exact(self.dim).enumerate() {
            let d = sq_dist(v, c, best.1);
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    /// Nearest-entry indices for `n` row-major vectors.
    pub fn assign(&self, vectors: &[f64]) -> Vec<u32> {
        vectors
            .chunks_exact(self.dim)
            .map(|v| self.nearest(v).0 as u32)
            .collect()
    }
}

/// Squared distance with early exit once `bound` is exceeded.
#[inline]
fn sq_dist(a: &[f64], b: &[f64], bound: f64) -> f64 {
    let mut acc = 0.0;
    for (chunk_a, chunk_b) in a.chunks(8).zip(b.chunks(8)) {
        for (x, y) in chunk_a.iter().zip(chunk_b) {
            acc += (x - y) * (x - y);
        }
        if acc > bound {
            return acc;
        }
    }
    acc
}

/// Result of [`fit_codebook_traced`]: the codebook and the mean squared
/// quantization error after every Lloyd iteration.
pub struct KMeansFit {
    pub codebook: Codebook,
    pub errors: Vec<f64>,
}

/// Fits at most `size` centroids to `n` row-major vectors of dimension `dim`.
pub fn fit_codebook(vectors: &[f64], dim: usize, size: usize, iters: usize, seed: u64) -> Result<Codebook> {
    fit_codebook_traced(vectors, dim, size, iters, seed).map(|f| f.codebook)
}

pub fn fit_codebook_traced(
    vectors: &[f64],
    dim: usize,
    size: usize,
    iters: usize,
    seed: u64,
) -> Result<KMeansFit> {
    if dim == 0 || vectors.is_empty() || vectors.len() % dim != 0 {
        return Err(Error::invalid(format!(
            "need at least one vector of dimension {dim}, got {} values",
            vectors.len()
        )));
    }
    if size == 0 {
        return Err(Error::invalid("codebook size must be positive"));
    }
    if vectors.iter().any(|v| !v.is_finite()) {
        return Err(Error::data("k-means input has non-finite values"));
    }
    let n = vectors.len() / dim;
    let row = |i: usize| &vectors[i * dim..(i + 1) * dim];

    let distinct = distinct_rows(vectors, dim);
    if distinct.len() <= size {
        let entries = distinct.iter().flat_map(|&i| row(i).iter().copied()).collect();
        return Ok(KMeansFit {
            codebook: Codebook::new(dim, entries)?,
            errors: vec![0.0],
        });
    }

    // k-means++ seeding.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<f64> = Vec::with_capacity(size * dim);
    let first = rng.gen_range(0..n);
    centers.extend_from_slice(row(first));
    let mut min_d: Vec<f64> = (0..n).map(|i| sq_dist(row(i), row(first), f64::INFINITY)).collect();
    while centers.len() < size * dim {
        let total: f64 = min_d.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, d) in min_d.iter().enumerate() {
                if *d > 0.0 && target < *d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            if min_d[chosen] == 0.0 {
                chosen = (0..n).rev().find(|&i| min_d[i] > 0.0).unwrap_or(chosen);
            }
            chosen
        } else {
            break;
        };
        centers.extend_from_slice(row(pick));
        let c = &centers[centers.len() - dim..];
        for (i, d) in min_d.iter_mut().enumerate() {
            let nd = sq_dist(row(i), c, *d);
            if nd < *d {
                *d = nd;
            }
        }
    }
    let k = centers.len() / dim;

    let mut assignment = vec![0usize; n];
    let mut dist = vec![0.0; n];
    let mut errors = Vec::with_capacity(iters + 1);
    let assign = |centers: &[f64], assignment: &mut [usize], dist: &mut [f64]| {
        let book = Codebook {
            dim,
            entries: centers.to_vec(),
        };
        for i in 0..n {
            let (j, d) = book.nearest(row(i));
            assignment[i] = j;
            dist[i] = d;
        }
        dist.iter().sum::<f64>() / n as f64
    };
    errors.push(assign(&centers, &mut assignment, &mut dist));
    for _ in 0..iters {
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let j = assignment[i];
            counts[j] += 1;
            for (s, v) in sums[j * dim..(j + 1) * dim].iter_mut().zip(row(i)) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                for d in 0..dim {
                    centers[j * dim + d] = sums[j * dim + d] / counts[j] as f64;
                }
            }
        }
        // Empty clusters take over the point farthest from its centroid.
        for j in 0..k {
            if counts[j] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
                    .expect("n >= 1");
                if dist[far] > 0.0 {
                    centers[j * dim..(j + 1) * dim].copy_from_slice(row(far));
                    dist[far] = 0.0;
                }
            }
        }
        let previous = assignment.clone();
        let err = assign(&centers, &mut assignment, &mut dist);
        errors.push(err);
        if assignment == previous {
            break;
        }
    }

    // Merge identical centroids.
    let unique = distinct_rows(&centers, dim);
    let entries = unique
        .iter()
        .flat_map(|&j| centers[j * dim..(j + 1) * dim].iter().copied())
        .collect();
    Ok(KMeansFit {
        codebook: Codebook::new(dim, entries)?,
        errors,
    })
}

/// Indices of the first occurrence of every distinct row, in order.
fn distinct_rows(values: &[f64], dim: usize) -> Vec<usize> {
    let mut seen = std::collections::HashSet::new();
    values
        .chunks_exact(dim)
        .enumerate()
        .filter(|(_, r)| seen.insert(r.iter().map(|v| v.to_bits()).collect::<Vec<_>>()))
        .map(|(i, _)| i)
        .collect()
}
