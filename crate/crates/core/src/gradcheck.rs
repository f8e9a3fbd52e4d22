//! Autodiff against central finite differences, in f64, over every tape op
//! and the composite blocks built from them.

use std::time::{Duration, Instant};

use serde::Serialize;

use crate::error::Result;
use crate::evaluator::{differentiable_score, regularized_score, Evaluator, Provenance};
use crate::kernels::Padding;
use crate::losses::{classifier_loss, generator_loss, gradient_penalty_at, hinge_losses};
use crate::networks::{NetworkInstance, NetworkSpec};
use crate::nn::{cbn_forward, ln_forward, resblock_forward, BlockVariant, Mode, NormKind, NormVars, ResBlockSpec, ResBlockVars, RunningStats, NORM_EPS};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const REL_TOL: f64 = 1e-6;
pub const ABS_TOL: f64 = 1e-8;
const STEP: f64 = 1e-4;
/// Coordinates probed per input tensor when it is larger than this.
const MAX_COORDS: usize = 16;

type Build = Box<dyn for<'t> Fn(&'t Tape<f64>, &[Tensor<f64>]) -> Result<(Var<'t, f64>, Vec<Var<'t, f64>>)>>;

/// A function of some tensors; `build` returns its output and the leaves that
/// carry the inputs (in input order).
pub struct Case {
    pub name: String,
    pub inputs: Vec<Tensor<f64>>,
    build: Build,
}

impl Case {
    /// Every input becomes a trainable leaf and `f` maps them to the output.
    pub fn simple(
        name: &str,
        inputs: Vec<Tensor<f64>>,
        f: impl for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>> + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            inputs,
            build: Box::new(move |tape, xs| {
                let vs: Vec<_> = xs.iter().map(|x| tape.param(x.clone())).collect();
                Ok((f(&vs)?, vs))
            }),
        }
    }

    pub fn custom(name: &str, inputs: Vec<Tensor<f64>>, build: Build) -> Self {
        Self { name: name.into(), inputs, build }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseResult {
    pub name: String,
    pub coordinates: usize,
    /// Coordinates whose difference stencil crossed a relu boundary.
    pub skipped: usize,
    /// Largest relative error over coordinates whose absolute error exceeds [`ABS_TOL`].
    pub max_rel: f64,
    pub max_abs: f64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.coordinates > 0 && self.max_rel <= REL_TOL
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub cases: Vec<CaseResult>,
    pub elapsed: Duration,
}

impl Report {
    pub fn max_rel(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.cases.iter().all(CaseResult::passed)
    }

    pub fn failures(&self) -> Vec<&CaseResult> {
        self.cases.iter().filter(|c| !c.passed()).collect()
    }
}

/// Projects the output onto fixed random weights so every coordinate matters.
fn objective<'t>(out: Var<'t, f64>) -> Result<Var<'t, f64>> {
    let shape = out.shape();
    let mut rng = Rng::new(7, "gradcheck/projection");
    let r = Tensor::from_fn(&shape, |_| rng.normal());
    Ok(out.mul(out.tape().constant(r))?.sum_all())
}

fn value(case: &Case, inputs: &[Tensor<f64>]) -> Result<(f64, Vec<bool>)> {
    let tape = Tape::new();
    let (out, _) = (case.build)(&tape, inputs)?;
    let v = objective(out)?.value().item();
    Ok((v, tape.kink_pattern()))
}

/// Fourth-order central difference (Richardson combination of steps h and h/2).
/// `None` when the stencil crosses a relu boundary, where no difference
/// quotient approximates the one-sided derivative autodiff reports.
fn numeric(case: &Case, base: &[bool], which: usize, at: usize) -> Result<Option<f64>> {
    let mut xs = case.inputs.clone();
    let x0 = xs[which].data()[at];
    let mut smooth = true;
    let mut f = |d: f64| -> Result<f64> {
        xs[which].data_mut()[at] = x0 + d;
        let (v, k) = value(case, &xs)?;
        smooth &= k == base;
        Ok(v)
    };
    let h = STEP;
    let d1 = (f(h)? - f(-h)?) / (2.0 * h);
    let d2 = (f(h / 2.0)? - f(-h / 2.0)?) / h;
    Ok(smooth.then_some((4.0 * d2 - d1) / 3.0))
}

pub fn check(case: &Case) -> Result<CaseResult> {
    let tape = Tape::new();
    let (out, leaves) = (case.build)(&tape, &case.inputs)?;
    let grads = tape.gradients(objective(out)?, &leaves)?;
    let base = tape.kink_pattern();
    let mut rng = Rng::new(11, &format!("gradcheck/{}", case.name));
    let (mut max_rel, mut max_abs, mut n, mut skipped) = (0.0f64, 0.0f64, 0, 0);
    for (i, g) in grads.iter().enumerate() {
        let mut order: Vec<usize> = (0..g.len()).collect();
        rng.shuffle(&mut order);
        let mut taken = 0;
        for at in order {
            if taken == MAX_COORDS {
                break;
            }
            let Some(num) = numeric(case, &base, i, at)? else {
                skipped += 1;
                continue;
            };
            let a = g.data()[at];
            let err = (a - num).abs();
            max_abs = max_abs.max(err);
            if err > ABS_TOL {
                max_rel = max_rel.max(err / a.abs().max(num.abs()));
            }
            taken += 1;
        }
        n += taken;
    }
    Ok(CaseResult { name: case.name.clone(), coordinates: n, skipped, max_rel, max_abs })
}

pub fn run(cases: &[Case]) -> Result<Report> {
    let t = Instant::now();
    let cases = cases.iter().map(check).collect::<Result<Vec<_>>>()?;
    Ok(Report { cases, elapsed: t.elapsed() })
}

/// The whole suite.
pub fn run_suite() -> Result<Report> {
    run(&suite()?)
}

fn randn(shape: &[usize], rng: &mut Rng, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.normal() * scale)
}

/// Values bounded away from zero so kinks stay out of the difference stencil.
fn away_from_zero(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v = rng.uniform() * 1.5 + 0.1;
        if rng.uniform() < 0.5 {
            -v
        } else {
            v
        }
    })
}

fn positive(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.uniform() * 2.0 + 0.2)
}

fn op_cases(rng: &mut Rng) -> Vec<Case> {
    let mut c = vec![];
    let a = randn(&[3, 4], rng, 1.0);
    let b = randn(&[3, 4], rng, 1.0);
    c.push(Case::simple("add", vec![a.clone(), b.clone()], |v| v[0].add(v[1])));
    c.push(Case::simple("sub", vec![a.clone(), b.clone()], |v| v[0].sub(v[1])));
    c.push(Case::simple("mul", vec![a.clone(), b.clone()], |v| v[0].mul(v[1])));
    c.push(Case::simple("scale", vec![a.clone()], |v| Ok(v[0].scale(-1.7))));
    c.push(Case::simple("neg", vec![a.clone()], |v| Ok(v[0].neg())));
    c.push(Case::simple("add_scalar", vec![a.clone()], |v| Ok(v[0].add_scalar(0.3))));
    c.push(Case::simple("add_bias", vec![a.clone(), randn(&[4], rng, 1.0)], |v| v[0].add_bias(v[1])));
    c.push(Case::simple("add_bias_nhwc", vec![randn(&[2, 3, 3, 2], rng, 1.0), randn(&[2], rng, 1.0)], |v| {
        v[0].add_bias(v[1])
    }));
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let l = if ta { randn(&[4, 3], rng, 1.0) } else { randn(&[3, 4], rng, 1.0) };
        let r = if tb { randn(&[5, 4], rng, 1.0) } else { randn(&[4, 5], rng, 1.0) };
        c.push(Case::simple(&format!("matmul_{}{}", ta as u8, tb as u8), vec![l, r], move |v| {
            v[0].matmul(v[1], ta, tb)
        }));
    }
    c.push(Case::simple(
        "dense",
        vec![randn(&[3, 4], rng, 1.0), randn(&[4, 2], rng, 1.0), randn(&[2], rng, 1.0)],
        |v| v[0].dense(v[1], v[2]),
    ));
    for (stride, pad, k, hw) in [(1, Padding::Same, 3, 5), (1, Padding::Valid, 3, 5), (2, Padding::Same, 3, 6), (2, Padding::Valid, 1, 5)] {
        let name = format!("conv2d_k{k}_s{stride}_{}", if pad == Padding::Same { "same" } else { "valid" });
        c.push(Case::simple(
            &name,
            vec![randn(&[2, hw, hw, 2], rng, 1.0), randn(&[k, k, 2, 3], rng, 0.5)],
            move |v| v[0].conv2d(v[1], stride, pad),
        ));
    }
    let kshape = [3, 3, 2, 3];
    c.push(Case::simple(
        "conv2d_input_grad",
        vec![randn(&[2, 5, 5, 3], rng, 1.0), randn(&kshape, rng, 0.5)],
        |v| v[0].conv2d_input_grad(v[1], &[2, 5, 5, 2], 1, Padding::Same),
    ));
    c.push(Case::simple(
        "conv2d_weight_grad",
        vec![randn(&[2, 6, 6, 2], rng, 1.0), randn(&[2, 3, 3, 3], rng, 1.0)],
        move |v| v[0].conv2d_weight_grad(v[1], &kshape, 2, Padding::Same),
    ));
    let kinked = away_from_zero(&[3, 4], rng);
    c.push(Case::simple("relu", vec![kinked.clone()], |v| Ok(v[0].relu())));
    let mask_src = away_from_zero(&[3, 4], rng);
    c.push(Case::custom(
        "relu_mask",
        vec![a.clone()],
        Box::new(move |tape, xs| {
            let g = tape.param(xs[0].clone());
            let m = tape.constant(mask_src.clone());
            Ok((g.relu_mask(m)?, vec![g]))
        }),
    ));
    c.push(Case::simple("tanh", vec![a.clone()], |v| Ok(v[0].tanh())));
    c.push(Case::simple("exp", vec![a.clone()], |v| Ok(v[0].exp())));
    c.push(Case::simple("ln", vec![positive(&[3, 4], rng)], |v| Ok(v[0].ln())));
    c.push(Case::simple("sqrt", vec![positive(&[3, 4], rng)], |v| Ok(v[0].sqrt())));
    c.push(Case::simple("square", vec![a.clone()], |v| Ok(v[0].square())));
    c.push(Case::simple("upsample2x", vec![randn(&[2, 3, 3, 2], rng, 1.0)], |v| v[0].upsample2x()));
    c.push(Case::simple("downsample2x", vec![randn(&[2, 4, 4, 2], rng, 1.0)], |v| v[0].downsample2x()));
    c.push(Case::simple("global_avg_pool", vec![randn(&[2, 3, 3, 4], rng, 1.0)], |v| v[0].global_avg_pool()));
    c.push(Case::simple("spread_hw", vec![randn(&[2, 3], rng, 1.0)], |v| v[0].spread_hw(2, 3)));
    c.push(Case::simple("sum_all", vec![a.clone()], |v| Ok(v[0].sum_all())));
    c.push(Case::simple("mean_all", vec![a.clone()], |v| Ok(v[0].mean_all())));
    c.push(Case::simple("broadcast_to", vec![randn(&[], rng, 1.0)], |v| v[0].broadcast_to(&[2, 3])));
    c.push(Case::simple("sum_per_sample", vec![randn(&[3, 2, 2], rng, 1.0)], |v| Ok(v[0].sum_per_sample())));
    c.push(Case::simple("reshape", vec![a.clone()], |v| v[0].reshape(&[2, 6])));
    c.push(Case::simple("softmax_rows", vec![randn(&[3, 5], rng, 2.0)], |v| v[0].softmax_rows()));
    c.push(Case::simple("log_softmax_rows", vec![randn(&[3, 5], rng, 2.0)], |v| v[0].log_softmax_rows()));
    c.push(Case::simple("mean_rows", vec![a.clone()], |v| v[0].mean_rows()));
    c.push(Case::simple("sub_rowvec", vec![a.clone(), randn(&[4], rng, 1.0)], |v| v[0].sub_rowvec(v[1])));
    c.push(Case::simple("sum_to_last", vec![randn(&[2, 3, 4], rng, 1.0)], |v| Ok(v[0].sum_to_last())));
    c.push(Case::simple("select_cols", vec![a.clone()], |v| v[0].select_cols(&[3, 0, 3])));
    c.push(Case::simple("gather_rows", vec![randn(&[3, 4], rng, 1.0)], |v| v[0].gather_rows(&[2, 0, 2, 1, 2])));
    c.push(Case::simple("channel_norm", vec![randn(&[3, 2, 2, 3], rng, 1.5)], |v| {
        Ok(v[0].channel_norm(NORM_EPS)?.0)
    }));
    let (mean, var) = (vec![0.3, -0.2, 0.1], vec![0.5, 1.5, 2.0]);
    c.push(Case::simple("channel_norm_fixed", vec![randn(&[3, 2, 2, 3], rng, 1.0)], move |v| {
        v[0].channel_norm_fixed(&mean, &var, NORM_EPS)
    }));
    c.push(Case::simple(
        "affine_sample_channel",
        vec![randn(&[2, 2, 2, 3], rng, 1.0), randn(&[2, 3], rng, 1.0), randn(&[2, 3], rng, 1.0)],
        |v| v[0].affine_sample_channel(v[1], v[2]),
    ));
    c.push(Case::simple("sample_norm", vec![randn(&[3, 2, 2, 2], rng, 1.5)], |v| Ok(v[0].sample_norm(NORM_EPS))));
    c.push(Case::simple(
        "affine_feature",
        vec![randn(&[2, 2, 3], rng, 1.0), randn(&[2, 3], rng, 1.0), randn(&[2, 3], rng, 1.0)],
        |v| v[0].affine_feature(v[1], v[2]),
    ));
    c
}

fn small_net(spec: NetworkSpec, seed: u64) -> Result<NetworkInstance<f64>> {
    NetworkInstance::build(spec, &mut Rng::new(seed, "gradcheck/net"))
}

/// Network forward with its parameters (and optionally its input) as inputs.
fn network_case(name: &str, net: NetworkInstance<f64>, x: Tensor<f64>, labels: Option<Vec<usize>>, mode: Mode, with_input: bool) -> Result<Case> {
    let sigmas = net.current_sigmas()?;
    let mut inputs = net.params.clone();
    if with_input {
        inputs.push(x.clone());
    }
    let np = net.params.len();
    Ok(Case::custom(
        name,
        inputs,
        Box::new(move |tape, xs| {
            let mut n = net.clone();
            n.params = xs[..np].to_vec();
            let b = n.bind_with(tape, true, &sigmas)?;
            let mut leaves = b.params.clone();
            let input = if with_input {
                let v = tape.param(xs[np].clone());
                leaves.push(v);
                v
            } else {
                tape.constant(x.clone())
            };
            let out = n.forward(&b, input, labels.as_deref(), mode)?.output;
            Ok((out, leaves))
        }),
    ))
}

fn block_case(name: &str, spec: ResBlockSpec, rng: &mut Rng) -> Case {
    let (ci, co, s) = (spec.in_channels, spec.out_channels, spec.in_size);
    let classes = 3;
    let mut inputs = vec![randn(&[2, s, s, ci], rng, 1.0)];
    let norm_shapes = |c: usize, size: usize| -> Vec<Vec<usize>> {
        match spec.norm {
            NormKind::Cbn => vec![vec![classes, c], vec![classes, c]],
            NormKind::Ln => vec![vec![size, size, c], vec![size, size, c]],
            NormKind::None => vec![],
        }
    };
    let n1 = norm_shapes(ci, s);
    let n2 = norm_shapes(co, spec.mid_size());
    for sh in &n1 {
        inputs.push(Tensor::from_fn(sh, |_| 1.0 + 0.3 * rng.normal()));
    }
    inputs.push(randn(&[3, 3, ci, co], rng, 0.4));
    inputs.push(randn(&[co], rng, 0.1));
    for sh in &n2 {
        inputs.push(Tensor::from_fn(sh, |_| 1.0 + 0.3 * rng.normal()));
    }
    inputs.push(randn(&[3, 3, co, co], rng, 0.4));
    inputs.push(randn(&[co], rng, 0.1));
    if spec.has_shortcut_conv() {
        inputs.push(randn(&[1, 1, ci, co], rng, 0.5));
        inputs.push(randn(&[co], rng, 0.1));
    }
    let labels = vec![2, 0];
    Case::simple(name, inputs, move |v| {
        let mut it = v[1..].iter().copied();
        let mut norm = || match spec.norm {
            NormKind::Cbn => NormVars::Cbn { gamma: it.next().unwrap(), beta: it.next().unwrap() },
            NormKind::Ln => NormVars::Ln { scale: it.next().unwrap(), shift: it.next().unwrap() },
            NormKind::None => NormVars::None,
        };
        let norm1 = norm();
        let mut it2 = v[1 + n1.len()..].iter().copied();
        let conv1 = (it2.next().unwrap(), it2.next().unwrap());
        let norm2 = match spec.norm {
            NormKind::Cbn => NormVars::Cbn { gamma: it2.next().unwrap(), beta: it2.next().unwrap() },
            NormKind::Ln => NormVars::Ln { scale: it2.next().unwrap(), shift: it2.next().unwrap() },
            NormKind::None => NormVars::None,
        };
        let conv2 = (it2.next().unwrap(), it2.next().unwrap());
        let shortcut = if spec.has_shortcut_conv() { Some((it2.next().unwrap(), it2.next().unwrap())) } else { None };
        let vars = ResBlockVars { norm1, conv1, norm2, conv2, shortcut };
        let mut running = [RunningStats::new(ci), RunningStats::new(co)];
        let cbn = spec.norm == NormKind::Cbn;
        resblock_forward(
            v[0],
            &spec,
            &vars,
            cbn.then_some(labels.as_slice()),
            cbn.then_some(&mut running),
            Mode::Train,
        )
    })
}

/// A batch whose score under `e` clears that of `gen` by a margin, so small
/// perturbations of `gen` keep the generated branch selected.
fn real_batch_above(gen: &Tensor<f64>, e: &Evaluator<f64>, rng: &mut Rng) -> Result<Tensor<f64>> {
    let score = |x: &Tensor<f64>| -> Result<f64> {
        let tape = Tape::new();
        Ok(differentiable_score(tape.constant(x.clone()), e)?.value())
    };
    let target = score(gen)? + 1e-3;
    for k in 0..200 {
        let cand = randn(gen.shape(), rng, 0.5 + 0.05 * k as f64);
        if score(&cand)? > target {
            return Ok(cand);
        }
    }
    Err(crate::error::Error::Numerical("no real batch scored above the generated one".into()))
}

fn tiny_classifier(classes: usize) -> Result<NetworkSpec> {
    NetworkSpec::desk_classifier(classes).scaled(0.25)
}

fn composite_cases(rng: &mut Rng) -> Result<Vec<Case>> {
    let mut c = vec![];
    let labels = vec![1, 0, 2, 1];
    c.push(Case::simple(
        "cbn_train",
        vec![randn(&[4, 2, 2, 3], rng, 1.5), randn(&[3, 3], rng, 1.0), randn(&[3, 3], rng, 1.0)],
        move |v| {
            let mut r = RunningStats::new(3);
            cbn_forward(v[0], &labels, v[1], v[2], &mut r, Mode::Train, NORM_EPS)
        },
    ));
    c.push(Case::simple(
        "ln",
        vec![randn(&[3, 2, 2, 3], rng, 1.5), randn(&[2, 2, 3], rng, 1.0), randn(&[2, 2, 3], rng, 1.0)],
        |v| ln_forward(v[0], v[1], v[2], NORM_EPS),
    ));
    let block = |in_channels, out_channels, variant, norm, in_size| ResBlockSpec { in_channels, out_channels, variant, norm, in_size };
    c.push(block_case("resblock_up_cbn", block(3, 2, BlockVariant::Upsample, NormKind::Cbn, 2), rng));
    c.push(block_case("resblock_down_ln", block(2, 3, BlockVariant::Downsample, NormKind::Ln, 4), rng));
    c.push(block_case("resblock_plain_none", block(2, 2, BlockVariant::Plain, NormKind::None, 4), rng));
    c.push(block_case("resblock_plain_ln", block(3, 3, BlockVariant::Plain, NormKind::Ln, 2), rng));

    let g = small_net(NetworkSpec::desk_generator(3).scaled(0.25)?, 1)?;
    let dz = g.spec.input_shape()[0];
    c.push(network_case("generator", g, randn(&[3, dz], rng, 1.0), Some(vec![0, 2, 1]), Mode::Train, true)?);
    let d = small_net(NetworkSpec::desk_discriminator().scaled(0.25)?, 2)?;
    let shape = d.spec.input_shape();
    let img = |n: usize, rng: &mut Rng| randn(&[n, shape[0], shape[1], shape[2]], rng, 0.5);
    c.push(network_case("discriminator_spectral", d.clone(), img(2, rng), None, Mode::Train, true)?);
    let cl = small_net(tiny_classifier(3)?, 3)?;
    c.push(network_case("classifier", cl.clone(), img(2, rng), None, Mode::Eval, true)?);

    let logits_labels = vec![2, 0, 1, 1];
    c.push(Case::simple("classifier_loss", vec![randn(&[4, 3], rng, 2.0)], move |v| {
        classifier_loss(v[0], &logits_labels)
    }));
    let d_real = Tensor::from_f64(&[4], &[1.5, 0.3, -1.4, 2.2])?;
    let d_fake = Tensor::from_f64(&[4], &[-1.6, 0.4, -0.2, -2.5])?;
    c.push(Case::simple("hinge_discriminator", vec![d_real, d_fake], |v| Ok(hinge_losses(v[0], v[1])?.0)));
    c.push(Case::simple("hinge_generator", vec![randn(&[4], rng, 1.0)], |v| {
        Ok(hinge_losses(v[0], v[0])?.1)
    }));
    c.push(Case::simple("score_from_logits", vec![randn(&[5, 3], rng, 2.0)], |v| {
        Ok(crate::evaluator::score_from_logits(v[0])?.score)
    }));

    let e = Evaluator::new(small_net(tiny_classifier(3)?, 4)?, Provenance { seed: 4, held_out_accuracy: 1.0, iterations: 0 })?;
    let e2 = e.clone();
    c.push(Case::simple("differentiable_score", vec![img(3, rng)], move |v| {
        Ok(differentiable_score(v[0], &e)?.score)
    }));
    let gen = img(3, rng);
    let real = real_batch_above(&gen, &e2, rng)?;
    c.push(Case::simple("ris_generated_branch", vec![gen], move |v| {
        Ok(regularized_score(v[0], &real, &e2)?.value)
    }));

    let crit = small_net(NetworkSpec::desk_discriminator().scaled(0.25)?, 5)?;
    let sig = crit.current_sigmas()?;
    let x_hat = img(3, rng);
    let np = crit.params.len();
    c.push(Case::custom(
        "gradient_penalty",
        crit.params.clone(),
        Box::new(move |tape, xs| {
            let mut n = crit.clone();
            n.params = xs[..np].to_vec();
            let b = n.bind_with(tape, true, &sig)?;
            let gp = gradient_penalty_at(tape, |x| Ok(n.forward_eval(&b, x, None)?.output), x_hat.clone(), 10.0)?;
            Ok((gp, b.params.clone()))
        }),
    ));

    let gen_labels = vec![0, 1, 2];
    c.push(Case::simple(
        "generator_loss",
        vec![randn(&[3, 1], rng, 1.0), randn(&[3, 3], rng, 1.5), randn(&[3, 3], rng, 1.0)],
        move |v| {
            let score = crate::evaluator::score_from_logits(v[2])?.score;
            generator_loss(v[0], Some(v[1]), &gen_labels, 0.07, Some(score), 0.5)
        },
    ));
    Ok(c)
}

pub fn suite() -> Result<Vec<Case>> {
    let mut rng = Rng::new(3, "gradcheck/inputs");
    let mut cases = op_cases(&mut rng);
    cases.extend(composite_cases(&mut rng)?);
    Ok(cases)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // relu_mask with the mask tied to its own input has a different true derivative
        let case = Case::simple("tied", vec![Tensor::from_f64(&[2], &[0.7, -0.4]).unwrap()], |v| {
            Ok(v[0].square().relu_mask(v[0])?.scale(1.0))
        });
        assert!(check(&case).unwrap().passed());
        let wrong = Case::custom(
            "wrong",
            vec![Tensor::from_f64(&[2], &[0.7, 0.4]).unwrap()],
            Box::new(|tape, xs| {
                let x = tape.param(xs[0].clone());
                // the value depends on x but the tape sees a constant
                let c = tape.constant(xs[0].map(|v| v * v));
                Ok((x.add(c)?, vec![x]))
            }),
        );
        assert!(!check(&wrong).unwrap().passed());
    }
}
