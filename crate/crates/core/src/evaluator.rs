//! Frozen evaluator, the differentiable batch score and its clamped variant.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::networks::NetworkInstance;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub held_out_accuracy: f64,
    pub iterations: usize,
}

/// A pre-trained classifier with no optimizer attached.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluator<T: Scalar> {
    net: NetworkInstance<T>,
    pub provenance: Provenance,
}

impl<T: Scalar> Evaluator<T> {
    pub fn new(net: NetworkInstance<T>, provenance: Provenance) -> Result<Self> {
        if net.spec.classes < 2 || !net.spec.has_penultimate_tap() {
            return Err(Error::InvalidArgument(format!(
                "`{}` cannot serve as an evaluator (needs ≥ 2 classes and a pooled head)",
                net.spec.name
            )));
        }
        Ok(Self { net, provenance })
    }

    pub fn network(&self) -> &NetworkInstance<T> {
        &self.net
    }

    pub fn classes(&self) -> usize {
        self.net.spec.classes
    }

    pub fn input_shape(&self) -> Vec<usize> {
        self.net.spec.input_shape()
    }

    /// Logits on `tape`; the evaluator's parameters enter as constants.
    pub fn logits<'t>(&self, images: Var<'t, T>) -> Result<Var<'t, T>> {
        let b = self.net.bind_frozen(images.tape())?;
        Ok(self.net.forward_eval(&b, images, None)?.output)
    }

    pub fn logits_tensor(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let x = tape.constant(images.clone());
        Ok(self.logits(x)?.value().as_ref().clone())
    }

    pub fn features_tensor(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let x = tape.constant(images.clone());
        let b = self.net.bind_frozen(&tape)?;
        let f = self.net.forward_eval(&b, x, None)?;
        Ok(f.features.expect("evaluator has a tap").value().as_ref().clone())
    }

    /// Order-sensitive digest of every parameter bit.
    pub fn checksum(&self) -> String {
        crate::tensor::checksum(&self.net.params)
    }
}

/// Score of one batch with its intermediate quantities.
pub struct ScoreBatch<'t, T: Scalar> {
    /// Rows `Pr(Y | x_i)`.
    pub probs: Tensor<T>,
    /// Column mean of `probs`.
    pub marginal: Tensor<T>,
    /// Per-sample `KL(Pr(Y | x_i) ‖ Pr(Y))`.
    pub kl: Tensor<T>,
    /// `exp(mean KL)`.
    pub score: Var<'t, T>,
}

impl<T: Scalar> ScoreBatch<'_, T> {
    pub fn value(&self) -> f64 {
        self.score.value().item().f64()
    }
}

/// Batch score from logits (N×C), computed as `exp(mean_i KL_i)` with the
/// KL terms in log space.
pub fn score_from_logits<'t, T: Scalar>(logits: Var<'t, T>) -> Result<ScoreBatch<'t, T>> {
    let s = logits.shape();
    if s.len() != 2 {
        return Err(shape_err("score", format!("logits must be N×C, got {s:?}")));
    }
    if s[0] < 2 {
        return Err(Error::InvalidArgument(format!("score needs N ≥ 2 samples, got {}", s[0])));
    }
    let logp = logits.log_softmax_rows()?;
    let p = logp.exp();
    let marginal = p.mean_rows()?;
    let log_m = marginal.add_scalar(1e-30).ln();
    let kl = p.mul(logp.sub_rowvec(log_m)?)?.sum_per_sample();
    let score = kl.mean_all().exp();
    Ok(ScoreBatch {
        probs: p.value().as_ref().clone(),
        marginal: marginal.value().as_ref().clone(),
        kl: kl.value().as_ref().clone(),
        score,
    })
}

/// Direct evaluation on a probability matrix; `0·ln 0` is taken as 0.
pub fn score_of_probabilities(probs: &Tensor<f64>) -> Result<f64> {
    let s = probs.shape();
    if s.len() != 2 || s[0] < 2 {
        return Err(Error::InvalidArgument(format!("need an N×C matrix with N ≥ 2, got {s:?}")));
    }
    let (n, c) = (s[0], s[1]);
    let d = probs.data();
    let m: Vec<f64> = (0..c).map(|j| (0..n).map(|i| d[i * c + j]).sum::<f64>() / n as f64).collect();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..c {
            let p = d[i * c + j];
            if p > 0.0 {
                total += p * (p.ln() - m[j].ln());
            }
        }
    }
    Ok((total / n as f64).exp())
}

/// Score of `images` through `e`; gradients reach the images only.
pub fn differentiable_score<'t, T: Scalar>(images: Var<'t, T>, e: &Evaluator<T>) -> Result<ScoreBatch<'t, T>> {
    score_from_logits(e.logits(images)?)
}

/// Which side of `min(score(real), score(gen))` was selected.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RisBranch {
    Generated,
    Real,
}

pub struct Ris<'t, T: Scalar> {
    pub value: Var<'t, T>,
    pub branch: RisBranch,
    pub real_score: f64,
    pub gen_score: f64,
}

/// `min(score(real), score(gen))` with the real score held constant. Ties
/// select the generated branch.
pub fn regularized_score<'t, T: Scalar>(gen: Var<'t, T>, real: &Tensor<T>, e: &Evaluator<T>) -> Result<Ris<'t, T>> {
    if real.rank() == 0 || real.dim(0) < 2 || gen.shape()[0] < 2 {
        return Err(Error::InvalidArgument("both batches need at least 2 samples".into()));
    }
    let real_score = {
        let tape = Tape::new();
        differentiable_score(tape.constant(real.clone()), e)?.value()
    };
    let g = differentiable_score(gen, e)?;
    let gen_score = g.value();
    if gen_score > real_score {
        let c = gen.tape().constant(Tensor::scalar(T::of(real_score)));
        Ok(Ris { value: c, branch: RisBranch::Real, real_score, gen_score })
    } else {
        Ok(Ris { value: g.score, branch: RisBranch::Generated, real_score, gen_score })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(shape: &[usize], d: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, d).unwrap()
    }

    #[test]
    fn analytic_probability_cases() {
        assert!((score_of_probabilities(&probs(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap() - 2.0).abs() < 1e-15);
        assert!((score_of_probabilities(&probs(&[2, 2], &[0.5; 4])).unwrap() - 1.0).abs() < 1e-15);
        let s = score_of_probabilities(&probs(&[2, 2], &[0.9, 0.1, 0.1, 0.9])).unwrap();
        assert!((s - 0.368064f64.exp()).abs() < 1e-5);
        assert!((s - 1.4449).abs() < 1e-4);
    }

    #[test]
    fn logits_path_matches_probability_path() {
        let tape = Tape::<f64>::new();
        // logits ln p reproduce p exactly through softmax
        let p = [0.9f64, 0.1, 0.1, 0.9];
        let l = tape.constant(probs(&[2, 2], &p.map(f64::ln)));
        let s = score_from_logits(l).unwrap();
        assert!((s.value() - score_of_probabilities(&probs(&[2, 2], &p)).unwrap()).abs() < 1e-12);
        let row_sums: Vec<f64> = s.probs.data().chunks(2).map(|r| r.iter().sum()).collect();
        assert!(row_sums.iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert!(s.kl.data().iter().all(|&k| k >= 0.0));
        assert!(score_from_logits(tape.constant(Tensor::zeros(&[1, 3]))).is_err());
    }

    #[test]
    fn rectangular_batches() {
        let tape = Tape::<f64>::new();
        // three samples on class 0, one on class 1: mean KL = (3 ln(4/3) + ln 4) / 4
        let p = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0];
        let want = ((3.0 * (4.0f64 / 3.0).ln() + 4f64.ln()) / 4.0).exp();
        assert!((score_of_probabilities(&probs(&[4, 2], &p)).unwrap() - want).abs() < 1e-15);
        let l = tape.constant(probs(&[4, 2], &p.map(|v| if v > 0.0 { 0.0 } else { -80.0 })));
        let s = score_from_logits(l).unwrap();
        assert_eq!(s.kl.shape(), &[4]);
        assert!((s.value() - want).abs() < 1e-12);
    }
}
