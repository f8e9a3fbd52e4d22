//! Adversarial, classification and penalty objectives plus the γ controller.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::ops::input_gradient;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

fn critic_len<T: Scalar>(v: &Var<'_, T>, what: &str) -> Result<usize> {
    let s = v.shape();
    let n = match s.as_slice() {
        [n] | [n, 1] => *n,
        _ => return Err(shape_err("hinge_losses", format!("{what} must be [N] or [N, 1], got {s:?}"))),
    };
    if n == 0 {
        return Err(Error::InvalidArgument(format!("{what} batch is empty")));
    }
    Ok(n)
}

/// `(mean(relu(1 - d_real)) + mean(relu(1 + d_fake)), -mean(d_fake))`.
pub fn hinge_losses<'t, T: Scalar>(d_real: Var<'t, T>, d_fake: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
    critic_len(&d_real, "d_real")?;
    critic_len(&d_fake, "d_fake")?;
    let real = d_real.neg().add_scalar(1.0).relu().mean_all();
    let fake = d_fake.add_scalar(1.0).relu().mean_all();
    Ok((real.add(fake)?, hinge_generator(d_fake)?))
}

/// The generator half of the hinge loss, `-mean(d_fake)`.
pub fn hinge_generator<'t, T: Scalar>(d_fake: Var<'t, T>) -> Result<Var<'t, T>> {
    critic_len(&d_fake, "d_fake")?;
    Ok(d_fake.mean_all().neg())
}

/// Per-sample interpolates `ε·real + (1-ε)·fake`, ε ~ U(0, 1).
pub fn interpolate<T: Scalar>(real: &Tensor<T>, fake: &Tensor<T>, rng: &mut Rng) -> Result<Tensor<T>> {
    if real.shape() != fake.shape() || real.rank() == 0 {
        return Err(shape_err(
            "gradient_penalty",
            format!("real {:?} and fake {:?} batches differ", real.shape(), fake.shape()),
        ));
    }
    let n = real.dim(0);
    let per = real.len() / n.max(1);
    let eps: Vec<T> = (0..n).map(|_| T::of(rng.uniform())).collect();
    let d = real
        .data()
        .iter()
        .zip(fake.data())
        .enumerate()
        .map(|(i, (&r, &f))| {
            let e = eps[i / per];
            e * r + (T::one() - e) * f
        })
        .collect();
    Tensor::new(real.shape(), d)
}

/// `λ · mean((‖∇ D(x̂)‖₂ - 1)²)` at the interpolates `x_hat`, differentiable
/// with respect to whatever parameters `critic` uses.
pub fn gradient_penalty_at<'t, T: Scalar>(
    tape: &'t Tape<T>,
    critic: impl FnOnce(Var<'t, T>) -> Result<Var<'t, T>>,
    x_hat: Tensor<T>,
    lambda: f64,
) -> Result<Var<'t, T>> {
    let (_, g) = input_gradient(tape, critic, x_hat)?;
    let norms = g.square().sum_per_sample().add_scalar(1e-12).sqrt();
    Ok(norms.add_scalar(-1.0).square().mean_all().scale(lambda))
}

pub fn gradient_penalty<'t, T: Scalar>(
    tape: &'t Tape<T>,
    critic: impl FnOnce(Var<'t, T>) -> Result<Var<'t, T>>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    lambda: f64,
    rng: &mut Rng,
) -> Result<Var<'t, T>> {
    let x_hat = interpolate(real, fake, rng)?;
    gradient_penalty_at(tape, critic, x_hat, lambda)
}

/// Mean cross-entropy of `logits` (N×C) against `labels`.
pub fn classifier_loss<'t, T: Scalar>(logits: Var<'t, T>, labels: &[usize]) -> Result<Var<'t, T>> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
        return Err(shape_err(
            "classifier_loss",
            format!("logits {s:?} vs {} labels", labels.len()),
        ));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= s[1]) {
        return Err(Error::LabelOutOfRange { label: l, classes: s[1] });
    }
    Ok(logits.log_softmax_rows()?.select_cols(labels)?.mean_all().neg())
}

/// `-mean(d_fake) + γ·L_C(gen) - δ·score`. With `delta == 0` the score is ignored.
pub fn generator_loss<'t, T: Scalar>(
    d_fake: Var<'t, T>,
    gen_logits: Option<Var<'t, T>>,
    labels: &[usize],
    gamma: f64,
    score: Option<Var<'t, T>>,
    delta: f64,
) -> Result<Var<'t, T>> {
    if delta < 0.0 || gamma < 0.0 {
        return Err(Error::InvalidArgument(format!("γ ({gamma}) and δ ({delta}) must be ≥ 0")));
    }
    let mut loss = hinge_generator(d_fake)?;
    if let Some(logits) = gen_logits {
        loss = loss.add(classifier_loss(logits, labels)?.scale(gamma))?;
    }
    if delta > 0.0 {
        let s = score.ok_or_else(|| Error::InvalidArgument("δ > 0 requires a score term".into()))?;
        if s.value().len() != 1 {
            return Err(shape_err("generator_loss", "score term must be a scalar"));
        }
        loss = loss.sub(s.reshape(&[])?.scale(delta))?;
    }
    Ok(loss)
}

/// Proportional controller for the classifier weight γ.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaController {
    pub gamma: f64,
    pub rate: f64,
    pub target_ratio: f64,
    pub gamma_max: f64,
}

impl Default for GammaController {
    fn default() -> Self {
        Self {
            gamma: 0.0,
            rate: 0.01,
            target_ratio: 1.0,
            gamma_max: 0.1,
        }
    }
}

impl GammaController {
    /// `γ ← clamp(γ + rate·(L_gen − r·L_real), 0, γ_max)`.
    pub fn update(&mut self, loss_gen: f64, loss_real: f64) -> f64 {
        let next = self.gamma + self.rate * (loss_gen - self.target_ratio * loss_real);
        self.gamma = if next.is_nan() { self.gamma } else { next.clamp(0.0, self.gamma_max) };
        self.gamma
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v<'t>(tape: &'t Tape<f64>, d: &[f64]) -> Var<'t, f64> {
        tape.constant(Tensor::from_f64(&[d.len()], d).unwrap())
    }

    #[test]
    fn hinge_examples() {
        let tape = Tape::<f64>::new();
        let (ld, _) = hinge_losses(v(&tape, &[2.0]), v(&tape, &[-2.0])).unwrap();
        assert_eq!(ld.value().item(), 0.0);
        let (ld, _) = hinge_losses(v(&tape, &[0.0]), v(&tape, &[0.0])).unwrap();
        assert_eq!(ld.value().item(), 2.0);
        let (_, lg) = hinge_losses(v(&tape, &[0.0]), v(&tape, &[0.7])).unwrap();
        assert_eq!(lg.value().item(), -0.7);
        assert!(hinge_losses(v(&tape, &[]), v(&tape, &[1.0])).is_err());
    }

    #[test]
    fn penalty_examples() {
        let mut rng = Rng::new(0, "gp");
        let tape = Tape::<f64>::new();
        let w = tape.constant(Tensor::from_f64(&[3, 1], &[0.6, 0.0, 0.8]).unwrap());
        let real = Tensor::from_fn(&[5, 3], |i| (i as f64).sin());
        let fake = Tensor::from_fn(&[5, 3], |i| (i as f64).cos() * 3.0);
        let gp = gradient_penalty(&tape, |x| x.matmul(w, false, false), &real, &fake, 10.0, &mut rng).unwrap();
        assert!(gp.value().item() <= 1e-12);

        let tape = Tape::<f64>::new();
        let real = Tensor::from_f64(&[2, 1], &[0.3, -1.0]).unwrap();
        let fake = Tensor::from_f64(&[2, 1], &[2.0, 0.5]).unwrap();
        let gp = gradient_penalty(&tape, |x| Ok(x.scale(2.0)), &real, &fake, 10.0, &mut rng).unwrap();
        assert!((gp.value().item() - 10.0).abs() < 1e-9);
    }

    #[test]
    fn classifier_loss_examples() {
        let tape = Tape::<f64>::new();
        let uniform = tape.constant(Tensor::zeros(&[3, 4]));
        let l = classifier_loss(uniform, &[0, 1, 3]).unwrap().value().item();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        let sharp = tape.constant(Tensor::from_f64(&[1, 2], &[20.0, 0.0]).unwrap());
        assert!(classifier_loss(sharp, &[0]).unwrap().value().item() < 1e-8);
        assert!(matches!(
            classifier_loss(uniform, &[0, 4, 1]),
            Err(Error::LabelOutOfRange { label: 4, classes: 4 })
        ));

        // direct -log p[label]
        let mut rng = Rng::new(1, "ce");
        let logits = Tensor::from_fn(&[6, 5], |_| rng.normal() * 3.0);
        let labels = [0, 4, 2, 2, 1, 3];
        let got = classifier_loss(tape.constant(logits.clone()), &labels).unwrap().value().item();
        let mut want = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            let row = &logits.data()[r * 5..(r + 1) * 5];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            want -= (row[l].exp() / z).ln();
        }
        assert!((got - want / 6.0).abs() < 1e-10);
    }

    #[test]
    fn generator_loss_composition() {
        let tape = Tape::<f64>::new();
        let d = v(&tape, &[-1.0, -1.0]);
        assert_eq!(generator_loss(d, None, &[], 0.0, None, 0.0).unwrap().value().item(), 1.0);
        // logits giving L_C = 2 exactly is awkward; use a scalar composition check instead
        let logits = tape.constant(Tensor::from_f64(&[2, 2], &[0.0, 0.0, 0.0, 0.0]).unwrap());
        let lc = 2f64.ln();
        let score = tape.constant(Tensor::scalar(3.0));
        let l = generator_loss(d, Some(logits), &[0, 1], 0.1, Some(score), 0.5).unwrap().value().item();
        assert!((l - (1.0 + 0.1 * lc - 1.5)).abs() < 1e-12);
        assert!(generator_loss(d, None, &[], 0.1, None, 0.5).is_err());
    }

    #[test]
    fn gamma_controller() {
        let mut c = GammaController { gamma: 0.05, ..Default::default() };
        assert_eq!(c.update(1.3, 1.3), 0.05);
        c.gamma = 0.099;
        assert_eq!(c.update(50.0, 0.1), 0.1);
        let mut c = GammaController::default();
        assert_eq!(c.update(0.0, 0.7), 0.0);
    }
}
