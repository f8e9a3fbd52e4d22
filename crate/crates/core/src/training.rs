//! Training configuration, state and the alternating update loop.

use serde::{Deserialize, Serialize};

use crate::data::{augment, Dataset, Minibatches};
use crate::error::{Error, Result};
use crate::evaluator::{differentiable_score, regularized_score, Evaluator, Provenance, RisBranch};
use crate::losses::{classifier_loss, generator_loss, gradient_penalty, hinge_losses, GammaController};
use crate::metrics::{accumulate_stats, fid, penultimate_features, split_score, FeatureStats, SplitScore};
use crate::networks::{NetworkInstance, NetworkSpec, PresetSpecs};
use crate::nn::Mode;
use crate::optim::{AdamConfig, AdamState};
use crate::rng::Rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// What the generator optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Hinge + γ·classifier − δ·RIS (δ = 0 gives the ControlGAN baseline).
    Full,
    /// Unclamped score only; the discriminator and classifier are not trained.
    ScoreOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_d: f64,
    pub lr_g: f64,
    pub lr_c: f64,
    pub halve_at_iteration: u64,
    pub total_iterations: u64,
    pub adam: AdamConfig,
    pub n_critic: usize,
    pub lambda_gp: f64,
    pub spectral_norm: bool,
    pub power_iterations: usize,
    pub gamma_max: f64,
    pub gamma_rate: f64,
    pub gamma_target_ratio: f64,
    pub delta: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Classifier steps on real data before the GAN loop starts.
    pub classifier_pretrain_iterations: u64,
    pub objective: Objective,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_d: 4e-4,
            lr_g: 2e-4,
            lr_c: 2e-4,
            halve_at_iteration: 50_000,
            total_iterations: 100_000,
            adam: AdamConfig::default(),
            n_critic: 5,
            lambda_gp: 10.0,
            spectral_norm: true,
            power_iterations: 1,
            gamma_max: 0.1,
            gamma_rate: 0.01,
            gamma_target_ratio: 1.0,
            delta: 0.5,
            batch_size: 64,
            seed: 0,
            classifier_pretrain_iterations: 0,
            objective: Objective::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [("lr_d", self.lr_d), ("lr_g", self.lr_g), ("lr_c", self.lr_c)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be > 0, got {v}"));
            }
        }
        if self.n_critic < 1 {
            return bad("n_critic must be ≥ 1".into());
        }
        if !(self.gamma_max >= 0.0) || !(self.delta >= 0.0) || !(self.lambda_gp >= 0.0) || !(self.gamma_rate >= 0.0) {
            return bad("gamma_max, gamma_rate, delta and lambda_gp must be ≥ 0".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be ≥ 2, got {}", self.batch_size));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) || !(self.adam.eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps > 0".into());
        }
        Ok(())
    }

    /// `"controlgan-baseline"` when the score term is off, `"scoregan"` otherwise.
    pub fn mode_name(&self) -> &'static str {
        match self.objective {
            Objective::ScoreOnly => "score-only",
            Objective::Full if self.delta == 0.0 => "controlgan-baseline",
            Objective::Full => "scoregan",
        }
    }
}

/// Learning rates `(lr_d, lr_g)` at `iteration`: halved from `halve_at_iteration` on.
pub fn lr_schedule(config: &TrainConfig, iteration: u64) -> (f64, f64) {
    let f = if iteration >= config.halve_at_iteration { 0.5 } else { 1.0 };
    (config.lr_d * f, config.lr_g * f)
}

fn lr_c(config: &TrainConfig, iteration: u64) -> f64 {
    if iteration >= config.halve_at_iteration {
        config.lr_c * 0.5
    } else {
        config.lr_c
    }
}

/// Named random streams of one run.
#[derive(Clone, Debug)]
pub struct Streams {
    pub noise: Rng,
    pub labels: Rng,
    pub gp: Rng,
    pub augment: Rng,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Self {
            noise: Rng::new(seed, "noise"),
            labels: Rng::new(seed, "labels"),
            gp: Rng::new(seed, "gradient-penalty"),
            augment: Rng::new(seed, "augment"),
        }
    }

    pub fn all(&self) -> [&Rng; 4] {
        [&self.noise, &self.labels, &self.gp, &self.augment]
    }
}

/// One row of the metrics history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: u64,
    pub loss_d: f64,
    pub loss_g: f64,
    pub loss_c: f64,
    pub gamma: f64,
    pub toy_is_mean: f64,
    pub toy_is_std: f64,
    pub toy_fid: f64,
}

pub const METRICS_HEADER: &str = "iteration,loss_d,loss_g,loss_c,gamma,toy_is_mean,toy_is_std,toy_fid";

impl MetricsRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.iteration,
            self.loss_d,
            self.loss_g,
            self.loss_c,
            self.gamma,
            self.toy_is_mean,
            self.toy_is_std,
            self.toy_fid
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

/// Everything that changes during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub iteration: u64,
    pub generator: NetworkInstance<f32>,
    pub discriminator: NetworkInstance<f32>,
    pub classifier: NetworkInstance<f32>,
    pub adam_g: AdamState<f32>,
    pub adam_d: AdamState<f32>,
    pub adam_c: AdamState<f32>,
    pub gamma: GammaController,
    pub streams: Streams,
    pub real_d: Minibatches,
    pub real_c: Minibatches,
    /// Generator steps where the clamp selected the real-batch score.
    pub ris_real_branch: u64,
    pub history: Vec<MetricsRow>,
}

/// Scalars produced by one iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationStats {
    pub iteration: u64,
    pub loss_d: f64,
    pub loss_c: f64,
    pub loss_g: f64,
    pub gamma: f64,
    /// Training-evaluator score of the generator batch, when computed.
    pub gen_score: Option<f64>,
    pub real_score: Option<f64>,
    pub ris_branch: Option<RisBranch>,
}

fn finite(what: &str, v: f64, iteration: u64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Divergence(format!("{what} became {v} at iteration {iteration}")))
    }
}

impl TrainState {
    pub fn new(config: &TrainConfig, specs: &PresetSpecs, data: &Dataset) -> Result<Self> {
        config.validate()?;
        if specs.generator.classes != data.classes || specs.classifier.classes != data.classes {
            return Err(Error::Config(format!(
                "networks are built for {} classes but the dataset has {}",
                specs.generator.classes, data.classes
            )));
        }
        let mut dspec = specs.discriminator.clone();
        dspec.spectral_norm = config.spectral_norm;
        let generator = NetworkInstance::build(specs.generator.clone(), &mut Rng::new(config.seed, "init/generator"))?;
        let discriminator = NetworkInstance::build(dspec, &mut Rng::new(config.seed, "init/discriminator"))?;
        let classifier = NetworkInstance::build(specs.classifier.clone(), &mut Rng::new(config.seed, "init/classifier"))?;
        let n = data.train.len();
        Ok(Self {
            iteration: 0,
            adam_g: AdamState::for_params(&generator.params, config.adam),
            adam_d: AdamState::for_params(&discriminator.params, config.adam),
            adam_c: AdamState::for_params(&classifier.params, config.adam),
            generator,
            discriminator,
            classifier,
            gamma: GammaController {
                gamma: 0.0,
                rate: config.gamma_rate,
                target_ratio: config.gamma_target_ratio,
                gamma_max: config.gamma_max,
            },
            streams: Streams::new(config.seed),
            real_d: Minibatches::new(n, config.batch_size, Rng::new(config.seed, "batches/discriminator"))?,
            real_c: Minibatches::new(n, config.batch_size, Rng::new(config.seed, "batches/classifier"))?,
            ris_real_branch: 0,
            history: vec![],
        })
    }

    fn noise(&mut self, n: usize, classes: usize) -> (Tensor<f32>, Vec<usize>) {
        let dim = self.generator.spec.input_shape()[0];
        let z = Tensor::from_fn(&[n, dim], |_| self.streams.noise.normal() as f32);
        let labels = (0..n).map(|_| self.streams.labels.below(classes)).collect();
        (z, labels)
    }

    fn classifier_step(&mut self, config: &TrainConfig, data: &Dataset) -> Result<f64> {
        let idx = self.real_c.next_batch();
        let (x, labels) = data.train.batch::<f32>(&idx)?;
        let x = augment(&x, &mut self.streams.augment)?;
        let tape = Tape::new();
        let b = self.classifier.bind(&tape, true, 0)?;
        let logits = self.classifier.forward(&b, tape.constant(x), None, Mode::Train)?.output;
        let loss = classifier_loss(logits, &labels)?;
        let lv = finite("classifier loss", loss.value().item() as f64, self.iteration)?;
        let grads = tape.gradients(loss, &b.params)?;
        self.adam_c.step(&mut self.classifier.params, &grads, lr_c(config, self.iteration))?;
        Ok(lv)
    }

    /// Classifier-only warm-up on real data.
    pub fn pretrain_classifier(&mut self, config: &TrainConfig, data: &Dataset) -> Result<()> {
        for _ in 0..config.classifier_pretrain_iterations {
            self.classifier_step(config, data)?;
        }
        Ok(())
    }

    fn classifier_loss_on(&self, x: &Tensor<f32>, labels: &[usize]) -> Result<f64> {
        let tape = Tape::new();
        let b = self.classifier.bind_frozen(&tape)?;
        let logits = self.classifier.forward_eval(&b, tape.constant(x.clone()), None)?.output;
        Ok(classifier_loss(logits, labels)?.value().item() as f64)
    }

    /// n_critic discriminator steps, one classifier step, the γ update and one generator step.
    pub fn train_iteration(
        &mut self,
        config: &TrainConfig,
        data: &Dataset,
        evaluator: Option<&Evaluator<f32>>,
    ) -> Result<IterationStats> {
        let classes = data.classes;
        let b = config.batch_size;
        let (lr_d, lr_g) = lr_schedule(config, self.iteration);
        let it = self.iteration;
        let full = config.objective == Objective::Full;

        let mut loss_d = f64::NAN;
        let mut loss_c = f64::NAN;
        let mut last_real = None;
        if full {
            let mut last_fake = None;
            for _ in 0..config.n_critic {
                let idx = self.real_d.next_batch();
                let (real, _) = data.train.batch::<f32>(&idx)?;
                let (z, labels) = self.noise(b, classes);
                let fake = self.generator.generate(&z, &labels, Mode::Train)?;
                let tape = Tape::new();
                let bd = self.discriminator.bind(&tape, true, config.power_iterations)?;
                let d = &mut self.discriminator;
                let dr = d.forward(&bd, tape.constant(real.clone()), None, Mode::Train)?.output;
                let df = d.forward(&bd, tape.constant(fake.clone()), None, Mode::Train)?.output;
                let (mut loss, _) = hinge_losses(dr, df)?;
                if config.lambda_gp > 0.0 {
                    let gp = gradient_penalty(
                        &tape,
                        |x| Ok(d.forward(&bd, x, None, Mode::Train)?.output),
                        &real,
                        &fake,
                        config.lambda_gp,
                        &mut self.streams.gp,
                    )?;
                    loss = loss.add(gp)?;
                }
                loss_d = finite("discriminator loss", loss.value().item() as f64, it)?;
                let grads = tape.gradients(loss, &bd.params)?;
                self.adam_d.step(&mut self.discriminator.params, &grads, lr_d)?;
                last_fake = Some((fake, labels));
                last_real = Some(real);
            }

            loss_c = self.classifier_step(config, data)?;
            let (fake, labels) = last_fake.expect("n_critic ≥ 1");
            let l_gen = finite("classifier loss on generated", self.classifier_loss_on(&fake, &labels)?, it)?;
            self.gamma.update(l_gen, loss_c);
        }

        let (z, labels) = self.noise(b, classes);
        let tape = Tape::new();
        let bg = self.generator.bind(&tape, true, 0)?;
        let x = self.generator.forward(&bg, tape.constant(z), Some(&labels), Mode::Train)?.output;
        let mut stats = IterationStats {
            iteration: it,
            loss_d,
            loss_c,
            loss_g: f64::NAN,
            gamma: self.gamma.gamma,
            gen_score: None,
            real_score: None,
            ris_branch: None,
        };
        let loss = if full {
            let bd = self.discriminator.bind_frozen(&tape)?;
            let d_fake = self.discriminator.forward_eval(&bd, x, None)?.output;
            let bc = self.classifier.bind_frozen(&tape)?;
            let logits = self.classifier.forward_eval(&bc, x, None)?.output;
            let score = if config.delta > 0.0 {
                let e = evaluator.ok_or_else(|| Error::Config("δ > 0 needs a training evaluator".into()))?;
                let real = last_real.as_ref().expect("n_critic ≥ 1");
                let ris = regularized_score(x, real, e)?;
                stats.gen_score = Some(ris.gen_score);
                stats.real_score = Some(ris.real_score);
                stats.ris_branch = Some(ris.branch);
                if ris.branch == RisBranch::Real {
                    self.ris_real_branch += 1;
                }
                Some(ris.value)
            } else {
                None
            };
            generator_loss(d_fake, Some(logits), &labels, self.gamma.gamma, score, config.delta)?
        } else {
            let e = evaluator.ok_or_else(|| Error::Config("the score-only objective needs a training evaluator".into()))?;
            let s = differentiable_score(x, e)?;
            stats.gen_score = Some(s.value());
            s.score.neg()
        };
        stats.loss_g = finite("generator loss", loss.value().item() as f64, it)?;
        let grads = tape.gradients(loss, &bg.params)?;
        self.adam_g.step(&mut self.generator.params, &grads, lr_g)?;
        self.iteration += 1;
        Ok(stats)
    }

    /// `n` generated samples in eval mode from a fixed evaluation stream, labels cycling over classes.
    pub fn sample(&self, n: usize, classes: usize, seed: u64) -> Result<(Tensor<f32>, Vec<usize>)> {
        sample_generator(&self.generator, n, classes, seed)
    }
}

/// Eval-mode samples from a dedicated `eval/samples` stream, in chunks of 256.
pub fn sample_generator(
    g: &NetworkInstance<f32>,
    n: usize,
    classes: usize,
    seed: u64,
) -> Result<(Tensor<f32>, Vec<usize>)> {
    let mut rng = Rng::new(seed, "eval/samples");
    let dim = g.spec.input_shape()[0];
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let mut parts = vec![];
    for s in (0..n).step_by(256) {
        let m = 256.min(n - s);
        let z = Tensor::from_fn(&[m, dim], |_| rng.normal() as f32);
        let tape = Tape::new();
        let b = g.bind_frozen(&tape)?;
        let out = g.forward_eval(&b, tape.constant(z), Some(&labels[s..s + m]))?.output;
        parts.push(out.value().as_ref().clone());
    }
    Ok((Tensor::concat_rows(&parts)?, labels))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_splits: usize,
    pub split_size: usize,
    pub eval_interval: u64,
    /// Generated and real samples per side for the Fréchet distance.
    pub fid_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_splits: 10,
            split_size: 5000,
            eval_interval: 1000,
            fid_samples: 10_000,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_splits == 0 || self.split_size < 2 || self.fid_samples < 2 || self.eval_interval == 0 {
            return Err(Error::Config("eval needs n_splits ≥ 1, split_size ≥ 2, fid_samples ≥ 2, eval_interval ≥ 1".into()));
        }
        Ok(())
    }
}

/// Held-out score and Fréchet distance of a generator against precomputed real statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorEval {
    pub score: SplitScore,
    pub fid: f64,
}

pub fn real_feature_stats(e: &Evaluator<f32>, data: &Dataset, samples: usize) -> Result<FeatureStats> {
    let n = samples.min(data.train.len());
    let x = data.train.images.slice_rows(0, n)?;
    accumulate_stats(&penultimate_features(e, &x)?)
}

pub fn evaluate_generator(
    g: &NetworkInstance<f32>,
    e: &Evaluator<f32>,
    real: &FeatureStats,
    classes: usize,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<GeneratorEval> {
    let (x, _) = sample_generator(g, eval_sample_count(cfg), classes, seed)?;
    evaluate_samples(&x, e, real, cfg)
}

/// Samples needed for both the split score and the Fréchet distance.
pub fn eval_sample_count(cfg: &EvalConfig) -> usize {
    (cfg.n_splits * cfg.split_size).max(cfg.fid_samples)
}

pub fn evaluate_samples(x: &Tensor<f32>, e: &Evaluator<f32>, real: &FeatureStats, cfg: &EvalConfig) -> Result<GeneratorEval> {
    let score = split_score(x, e, cfg.n_splits, cfg.split_size)?;
    let feats = penultimate_features(e, &x.slice_rows(0, cfg.fid_samples)?)?;
    let fid = fid(&accumulate_stats(&feats)?, real)?;
    Ok(GeneratorEval { score, fid })
}

/// Settings for fitting an evaluator classifier on real data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluatorConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub min_accuracy: f64,
}

impl Default for EvaluatorConfig {
    fn default() -> Self {
        Self {
            iterations: 1500,
            batch_size: 32,
            lr: 1e-3,
            min_accuracy: 0.95,
        }
    }
}

/// Fraction of `split` that `net` labels correctly.
pub fn accuracy(net: &NetworkInstance<f32>, split: &crate::data::Split) -> Result<f64> {
    let n = split.len();
    if n == 0 {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let mut correct = 0usize;
    for s in (0..n).step_by(256) {
        let idx: Vec<usize> = (s..n.min(s + 256)).collect();
        let (x, labels) = split.batch::<f32>(&idx)?;
        let tape = Tape::new();
        let b = net.bind_frozen(&tape)?;
        let logits = net.forward_eval(&b, tape.constant(x), None)?.output.value();
        let c = logits.dim(1);
        for (row, &l) in logits.data().chunks(c).zip(&labels) {
            let arg = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                .0;
            correct += (arg == l) as usize;
        }
    }
    Ok(correct as f64 / n as f64)
}

/// Trains a classifier with `spec` on augmented real data and freezes it.
/// Fails when held-out accuracy stays below `cfg.min_accuracy`.
pub fn pretrain_evaluator(
    spec: NetworkSpec,
    data: &Dataset,
    seed: u64,
    cfg: &EvaluatorConfig,
) -> Result<Evaluator<f32>> {
    if spec.classes != data.classes {
        return Err(Error::Config(format!(
            "evaluator has {} classes but the dataset has {}",
            spec.classes, data.classes
        )));
    }
    let mut net = NetworkInstance::build(spec, &mut Rng::new(seed, "evaluator/init"))?;
    let adam = AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 };
    let mut opt = AdamState::for_params(&net.params, adam);
    let mut batches = Minibatches::new(data.train.len(), cfg.batch_size, Rng::new(seed, "evaluator/batches"))?;
    let mut aug = Rng::new(seed, "evaluator/augment");
    for it in 0..cfg.iterations {
        let (x, labels) = data.train.batch::<f32>(&batches.next_batch())?;
        let x = augment(&x, &mut aug)?;
        let tape = Tape::new();
        let b = net.bind(&tape, true, 0)?;
        let logits = net.forward(&b, tape.constant(x), None, Mode::Train)?.output;
        let loss = classifier_loss(logits, &labels)?;
        finite("evaluator loss", loss.value().item() as f64, it)?;
        let grads = tape.gradients(loss, &b.params)?;
        opt.step(&mut net.params, &grads, cfg.lr)?;
    }
    let acc = accuracy(&net, &data.held_out)?;
    if acc < cfg.min_accuracy {
        return Err(Error::EvaluatorAccuracy { achieved: acc, required: cfg.min_accuracy });
    }
    Evaluator::new(net, Provenance { seed, held_out_accuracy: acc, iterations: cfg.iterations as usize })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_schedule() {
        let c = TrainConfig::default();
        assert_eq!((c.lr_d, c.lr_g), (4e-4, 2e-4));
        assert_eq!(lr_schedule(&c, 0), (4e-4, 2e-4));
        assert_eq!(lr_schedule(&c, 49_999), (4e-4, 2e-4));
        assert_eq!(lr_schedule(&c, 50_000), (2e-4, 1e-4));
        let desk = TrainConfig { halve_at_iteration: 1000, ..c.clone() };
        assert_eq!(lr_schedule(&desk, 999), (4e-4, 2e-4));
        assert_eq!(c.mode_name(), "scoregan");
        assert_eq!(TrainConfig { delta: 0.0, ..c }.mode_name(), "controlgan-baseline");
    }

    #[test]
    fn invalid_configs() {
        assert!(TrainConfig { lr_d: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { n_critic: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { delta: -0.1, ..Default::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn csv_header() {
        let row = MetricsRow {
            iteration: 3,
            loss_d: 1.5,
            loss_g: -0.25,
            loss_c: 0.5,
            gamma: 0.0,
            toy_is_mean: 2.0,
            toy_is_std: 0.125,
            toy_fid: 7.0,
        };
        assert_eq!(metrics_csv(&[row]), format!("{METRICS_HEADER}\n3,1.5,-0.25,0.5,0,2,0.125,7\n"));
    }
}
