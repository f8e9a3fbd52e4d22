//! Offline evaluation: split scores and the Fréchet distance between feature sets.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::{score_from_logits, Evaluator};
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};

/// Mean and unbiased covariance of a feature set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub dim: usize,
    pub count: usize,
    pub mean: Vec<f64>,
    /// Row-major `dim × dim`.
    pub cov: Vec<f64>,
}

/// Streaming accumulator using shifted sums (shift = first vector), which
/// stays accurate when the mean is large relative to the spread.
#[derive(Clone, Debug)]
pub struct StatsAccumulator {
    dim: usize,
    count: usize,
    shift: Vec<f64>,
    sum: Vec<f64>,
    outer: Vec<f64>,
}

impl StatsAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            count: 0,
            shift: vec![],
            sum: vec![0.0; dim],
            outer: vec![0.0; dim * dim],
        }
    }

    pub fn push(&mut self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::InvalidArgument(format!("feature of length {} for dimension {}", x.len(), self.dim)));
        }
        if self.count == 0 {
            self.shift = x.to_vec();
        }
        let d: Vec<f64> = x.iter().zip(&self.shift).map(|(a, s)| a - s).collect();
        for i in 0..self.dim {
            self.sum[i] += d[i];
            let row = &mut self.outer[i * self.dim..(i + 1) * self.dim];
            for j in i..self.dim {
                row[j] += d[i] * d[j];
            }
        }
        self.count += 1;
        Ok(())
    }

    pub fn finish(self) -> Result<FeatureStats> {
        let n = self.count;
        if n < 2 {
            return Err(Error::InsufficientSamples { needed: 2, got: n });
        }
        let nf = n as f64;
        let dm: Vec<f64> = self.sum.iter().map(|s| s / nf).collect();
        let mut cov = vec![0.0; self.dim * self.dim];
        for i in 0..self.dim {
            for j in i..self.dim {
                let c = (self.outer[i * self.dim + j] - nf * dm[i] * dm[j]) / (nf - 1.0);
                cov[i * self.dim + j] = c;
                cov[j * self.dim + i] = c;
            }
        }
        let mean = dm.iter().zip(&self.shift).map(|(d, s)| d + s).collect();
        Ok(FeatureStats { dim: self.dim, count: n, mean, cov })
    }
}

/// Statistics of the rows of an `N × d` feature matrix.
pub fn accumulate_stats<T: Scalar>(features: &Tensor<T>) -> Result<FeatureStats> {
    let (n, d) = features.rows_cols();
    let mut acc = StatsAccumulator::new(d);
    let data = features.to_f64_vec();
    for r in 0..n {
        acc.push(&data[r * d..(r + 1) * d])?;
    }
    acc.finish()
}

fn sym_matrix(dim: usize, v: &[f64], what: &str) -> Result<DMatrix<f64>> {
    if v.len() != dim * dim {
        return Err(Error::InvalidArgument(format!("{what}: {} entries for a {dim}×{dim} matrix", v.len())));
    }
    let m = DMatrix::from_row_slice(dim, dim, v);
    let scale = m.iter().fold(1.0f64, |a, x| a.max(x.abs()));
    let asym = (0..dim)
        .flat_map(|i| (0..dim).map(move |j| (i, j)))
        .map(|(i, j)| (m[(i, j)] - m[(j, i)]).abs())
        .fold(0.0, f64::max);
    if asym > 1e-8 * scale {
        return Err(Error::Numerical(format!("{what} is not symmetric (max asymmetry {asym:e})")));
    }
    Ok((&m + m.transpose()) * 0.5)
}

fn psd_sqrt(m: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, x| a.max(x.abs()));
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -1e-6 * scale {
            return Err(Error::Numerical(format!("{what} has eigenvalue {v:e} < 0")));
        }
        *v = v.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose())
}

/// `Tr((Σ₁Σ₂)^{1/2})` through `Tr((Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2})`.
pub fn trace_sqrt_product(dim: usize, s1: &[f64], s2: &[f64]) -> Result<f64> {
    let a = sym_matrix(dim, s1, "Σ₁")?;
    let b = sym_matrix(dim, s2, "Σ₂")?;
    let r = psd_sqrt(a, "Σ₁")?;
    let inner = &r * b * &r;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, x| a.max(x.abs()));
    let mut tr = 0.0;
    for &v in eig.eigenvalues.iter() {
        if v < -1e-6 * scale {
            return Err(Error::Numerical(format!("product has eigenvalue {v:e} < 0")));
        }
        tr += v.max(0.0).sqrt();
    }
    Ok(tr)
}

/// `‖μ_a − μ_b‖² + Tr(Σ_a + Σ_b − 2(Σ_aΣ_b)^{1/2})`.
pub fn fid(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim != b.dim {
        return Err(Error::InvalidArgument(format!("feature dimensions differ: {} vs {}", a.dim, b.dim)));
    }
    let d = a.dim;
    let dm: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    let tr: f64 = (0..d).map(|i| a.cov[i * d + i] + b.cov[i * d + i]).sum();
    let v = dm + tr - 2.0 * trace_sqrt_product(d, &a.cov, &b.cov)?;
    if v < 0.0 {
        if v < -1e-6 * (1.0 + tr) {
            return Err(Error::Numerical(format!("Fréchet distance came out negative ({v:e})")));
        }
        return Ok(0.0);
    }
    Ok(v)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitScore {
    pub scores: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub splits: usize,
    pub split_size: usize,
}

impl SplitScore {
    pub fn from_scores(scores: Vec<f64>, split_size: usize) -> Self {
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let std = (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n).sqrt();
        Self { splits: scores.len(), scores, mean, std, split_size }
    }
}

/// Evaluator logits for a large image set, in chunks.
pub fn logits_chunked<T: Scalar>(e: &Evaluator<T>, images: &Tensor<T>, chunk: usize) -> Result<Tensor<T>> {
    let n = images.dim(0);
    let parts = (0..n)
        .step_by(chunk.max(1))
        .map(|s| e.logits_tensor(&images.slice_rows(s, chunk.min(n - s))?))
        .collect::<Result<Vec<_>>>()?;
    Tensor::concat_rows(&parts)
}

/// Score per split of `images` (at least `n_splits × split_size` rows),
/// without gradients.
pub fn split_score<T: Scalar>(images: &Tensor<T>, e: &Evaluator<T>, n_splits: usize, split_size: usize) -> Result<SplitScore> {
    let need = n_splits * split_size;
    let have = images.shape().first().copied().unwrap_or(0);
    if n_splits == 0 || split_size < 2 || have < need {
        return Err(Error::InsufficientSamples { needed: need.max(2), got: have });
    }
    let logits = logits_chunked(e, &images.slice_rows(0, need)?, 256)?;
    let scores = (0..n_splits)
        .map(|k| {
            let tape = Tape::new();
            let l = tape.constant(logits.slice_rows(k * split_size, split_size)?);
            Ok(score_from_logits(l)?.value())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SplitScore::from_scores(scores, split_size))
}

/// Penultimate features of `images` through `e`, in chunks.
pub fn penultimate_features<T: Scalar>(e: &Evaluator<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
    let n = images.dim(0);
    let parts = (0..n)
        .step_by(256)
        .map(|s| e.features_tensor(&images.slice_rows(s, 256.min(n - s))?))
        .collect::<Result<Vec<_>>>()?;
    Tensor::concat_rows(&parts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(rows: &[&[f64]]) -> FeatureStats {
        let d = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        accumulate_stats(&Tensor::<f64>::from_f64(&[rows.len(), d], &flat).unwrap()).unwrap()
    }

    #[test]
    fn hand_stats() {
        let s = stats(&[&[0.0, 0.0], &[2.0, 2.0]]);
        assert_eq!(s.mean, vec![1.0, 1.0]);
        assert_eq!(s.cov, vec![2.0, 2.0, 2.0, 2.0]);
        let c = stats(&[&[3.0, -1.0], &[3.0, -1.0], &[3.0, -1.0]]);
        assert!(c.cov.iter().all(|&v| v == 0.0));
        let one = Tensor::<f64>::zeros(&[1, 2]);
        assert!(accumulate_stats(&one).is_err());
    }

    #[test]
    fn trace_sqrt_cases() {
        let t = trace_sqrt_product(2, &[4.0, 0.0, 0.0, 9.0], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((t - 5.0).abs() < 1e-12);
        let s = [2.0, 0.5, 0.5, 1.0];
        assert!((trace_sqrt_product(2, &s, &s).unwrap() - 3.0).abs() < 1e-12);
        assert!(trace_sqrt_product(2, &[1.0, 0.5, 0.0, 1.0], &s).is_err());
    }

    #[test]
    fn univariate_fid() {
        let mk = |m: f64, v: f64| FeatureStats { dim: 1, count: 10, mean: vec![m], cov: vec![v] };
        assert!((fid(&mk(0.0, 1.0), &mk(3.0, 1.0)).unwrap() - 9.0).abs() < 1e-12);
        assert!((fid(&mk(0.0, 1.0), &mk(1.0, 4.0)).unwrap() - 2.0).abs() < 1e-12);
        assert!(fid(&mk(0.0, 1.0), &mk(0.0, 1.0)).unwrap() <= 1e-10);
        let two = FeatureStats { dim: 2, count: 2, mean: vec![0.0; 2], cov: vec![1.0, 0.0, 0.0, 1.0] };
        assert!(fid(&mk(0.0, 1.0), &two).is_err());
    }

    #[test]
    fn split_score_from_values() {
        let s = SplitScore::from_scores(vec![2.0, 2.0, 2.0], 5);
        assert_eq!((s.mean, s.std), (2.0, 0.0));
        let s = SplitScore::from_scores(vec![1.0, 3.0], 5);
        assert_eq!((s.mean, s.std), (2.0, 1.0));
    }
}
