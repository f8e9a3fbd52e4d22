//! Normalization layers, spectral normalization and pre-activation residual blocks.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::kernels::Padding;
use crate::tape::Var;
use crate::tensor::{Scalar, Tensor};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Cbn,
    Ln,
    None,
}

/// Per-channel running statistics kept by conditional batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T: Scalar> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Weight of the old value in `running = momentum * running + (1 - momentum) * batch`.
    pub momentum: f64,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            momentum: 0.9,
        }
    }

    fn absorb(&mut self, mean: &[T], biased_var: &[T], count: usize) {
        let m = T::of(self.momentum);
        let om = T::of(1.0 - self.momentum);
        let unbias = if count > 1 {
            T::of(count as f64 / (count - 1) as f64)
        } else {
            T::one()
        };
        for k in 0..self.mean.len() {
            self.mean[k] = m * self.mean[k] + om * mean[k];
            self.var[k] = m * self.var[k] + om * biased_var[k] * unbias;
        }
    }
}

/// Owned conditional batch-norm parameters: class-indexed scale and shift tables.
#[derive(Clone, Debug, PartialEq)]
pub struct CbnParams<T: Scalar> {
    /// `[classes, channels]`
    pub gamma: Tensor<T>,
    /// `[classes, channels]`
    pub beta: Tensor<T>,
    pub running: RunningStats<T>,
    pub eps: f64,
}

impl<T: Scalar> CbnParams<T> {
    pub fn new(classes: usize, channels: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[classes, channels]),
            beta: Tensor::zeros(&[classes, channels]),
            running: RunningStats::new(channels),
            eps: NORM_EPS,
        }
    }
}

/// Conditional batch norm. Train mode normalizes with batch statistics and
/// folds them into `running`; eval mode uses `running` only.
pub fn cbn_forward<'t, T: Scalar>(
    x: Var<'t, T>,
    labels: &[usize],
    gamma: Var<'t, T>,
    beta: Var<'t, T>,
    running: &mut RunningStats<T>,
    mode: Mode,
    eps: f64,
) -> Result<Var<'t, T>> {
    let shape = x.shape();
    let c = *shape.last().ok_or_else(|| shape_err("cbn", "scalar input"))?;
    let n = shape[0];
    let table = gamma.shape();
    if table.len() != 2 || table[1] != c || beta.shape() != table {
        return Err(shape_err(
            "cbn",
            format!("tables {table:?}/{:?} must be [classes, {c}]", beta.shape()),
        ));
    }
    if labels.len() != n {
        return Err(shape_err("cbn", format!("{} labels for batch of {n}", labels.len())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= table[0]) {
        return Err(Error::LabelOutOfRange { label: l, classes: table[0] });
    }
    let normalized = match mode {
        Mode::Train => {
            let (y, mean, var) = x.channel_norm(eps)?;
            running.absorb(&mean, &var, x.value().len() / c);
            y
        }
        Mode::Eval => x.channel_norm_fixed(&running.mean, &running.var, eps)?,
    };
    let g = gamma.gather_rows(labels)?;
    let b = beta.gather_rows(labels)?;
    normalized.affine_sample_channel(g, b)
}

/// Owned layer-norm parameters over the non-batch axes.
#[derive(Clone, Debug, PartialEq)]
pub struct LnParams<T: Scalar> {
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
    pub eps: f64,
}

impl<T: Scalar> LnParams<T> {
    pub fn new(feature_shape: &[usize]) -> Self {
        Self {
            scale: Tensor::ones(feature_shape),
            shift: Tensor::zeros(feature_shape),
            eps: NORM_EPS,
        }
    }
}

/// Layer norm: per-sample normalization over all non-batch axes, then scale/shift.
pub fn ln_forward<'t, T: Scalar>(x: Var<'t, T>, scale: Var<'t, T>, shift: Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
    let xs = x.shape();
    if scale.shape() != xs[1..] {
        return Err(shape_err(
            "ln",
            format!("parameter shape {:?} vs normalized axes {:?}", scale.shape(), &xs[1..]),
        ));
    }
    x.sample_norm(eps).affine_feature(scale, shift)
}

/// Persistent power-iteration state for one weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralState {
    /// Left singular-vector estimate, length = output dimension.
    pub u: Vec<f64>,
    pub iterations: usize,
}

impl SpectralState {
    pub fn new(u: Vec<f64>, iterations: usize) -> Result<Self> {
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::InvalidArgument("spectral u must be a non-zero vector".into()));
        }
        Ok(Self {
            u: u.iter().map(|v| v / norm).collect(),
            iterations,
        })
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Estimates the largest singular value of `weight` viewed as an
/// `out × rest` matrix (the last axis is the output axis), running
/// `iterations` power-iteration updates of `state.u` first.
/// With zero iterations `u` is left untouched.
pub fn spectral_sigma<T: Scalar>(weight: &Tensor<T>, state: &mut SpectralState, iterations: usize) -> Result<f64> {
    let out = *weight.shape().last().ok_or_else(|| shape_err("spectral_normalize", "scalar weight"))?;
    if state.u.len() != out {
        return Err(shape_err(
            "spectral_normalize",
            format!("u has length {} but weight output axis is {out}", state.u.len()),
        ));
    }
    let rest = weight.len() / out;
    let w: Vec<f64> = weight.to_f64_vec();
    // stored layout is rest × out; the normalized matrix is its transpose.
    let s_u = |u: &[f64]| -> Vec<f64> {
        (0..rest)
            .map(|r| w[r * out..(r + 1) * out].iter().zip(u).map(|(a, b)| a * b).sum())
            .collect()
    };
    let st_v = |v: &[f64]| -> Vec<f64> {
        let mut o = vec![0.0; out];
        for r in 0..rest {
            let row = &w[r * out..(r + 1) * out];
            for k in 0..out {
                o[k] += row[k] * v[r];
            }
        }
        o
    };
    if iterations == 0 {
        let v = s_u(&state.u);
        let sigma = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if sigma == 0.0 {
            return Err(Error::ZeroWeight);
        }
        return Ok(sigma);
    }
    let mut sigma = 0.0;
    for _ in 0..iterations {
        let mut v = s_u(&state.u);
        if normalize(&mut v) == 0.0 {
            return Err(Error::ZeroWeight);
        }
        let mut u = st_v(&v);
        sigma = normalize(&mut u);
        if sigma == 0.0 {
            return Err(Error::ZeroWeight);
        }
        state.u = u;
    }
    Ok(sigma)
}

/// Runs the configured power iterations and returns `weight / σ̂` with `σ̂`.
pub fn spectral_normalize<T: Scalar>(weight: &Tensor<T>, state: &mut SpectralState) -> Result<(Tensor<T>, f64)> {
    let iters = state.iterations;
    let sigma = spectral_sigma(weight, state, iters)?;
    let inv = T::of(1.0 / sigma);
    Ok((weight.map(|v| v * inv), sigma))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockVariant {
    Plain,
    Upsample,
    Downsample,
}

/// One pre-activation residual block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ResBlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub variant: BlockVariant,
    pub norm: NormKind,
    /// Input height = width; layer-norm parameters span the full feature map.
    pub in_size: usize,
}

impl ResBlockSpec {
    pub fn has_shortcut_conv(&self) -> bool {
        self.in_channels != self.out_channels || self.variant != BlockVariant::Plain
    }

    pub fn mid_size(&self) -> usize {
        match self.variant {
            BlockVariant::Upsample => self.in_size * 2,
            _ => self.in_size,
        }
    }

    pub fn out_size(&self) -> usize {
        match self.variant {
            BlockVariant::Upsample => self.in_size * 2,
            BlockVariant::Plain => self.in_size,
            BlockVariant::Downsample => self.in_size / 2,
        }
    }
}

/// Tape handles for a normalization layer's parameters.
#[derive(Clone, Copy, Debug)]
pub enum NormVars<'t, T: Scalar> {
    Cbn { gamma: Var<'t, T>, beta: Var<'t, T> },
    Ln { scale: Var<'t, T>, shift: Var<'t, T> },
    None,
}

impl<'t, T: Scalar> NormVars<'t, T> {
    fn kind(&self) -> NormKind {
        match self {
            NormVars::Cbn { .. } => NormKind::Cbn,
            NormVars::Ln { .. } => NormKind::Ln,
            NormVars::None => NormKind::None,
        }
    }

    pub fn apply(
        &self,
        x: Var<'t, T>,
        labels: Option<&[usize]>,
        running: Option<&mut RunningStats<T>>,
        mode: Mode,
    ) -> Result<Var<'t, T>> {
        match *self {
            NormVars::Cbn { gamma, beta } => {
                let labels = labels.ok_or_else(|| Error::InvalidArgument("conditional batch norm needs labels".into()))?;
                let running = running.ok_or_else(|| Error::InvalidArgument("conditional batch norm needs running statistics".into()))?;
                cbn_forward(x, labels, gamma, beta, running, mode, NORM_EPS)
            }
            NormVars::Ln { scale, shift } => ln_forward(x, scale, shift, NORM_EPS),
            NormVars::None => Ok(x),
        }
    }
}

/// Tape handles for one residual block; convolution weights are the
/// effective (possibly spectrally normalized) kernels.
#[derive(Clone, Copy, Debug)]
pub struct ResBlockVars<'t, T: Scalar> {
    pub norm1: NormVars<'t, T>,
    pub conv1: (Var<'t, T>, Var<'t, T>),
    pub norm2: NormVars<'t, T>,
    pub conv2: (Var<'t, T>, Var<'t, T>),
    pub shortcut: Option<(Var<'t, T>, Var<'t, T>)>,
}

fn conv_bias<'t, T: Scalar>(x: Var<'t, T>, (w, b): (Var<'t, T>, Var<'t, T>)) -> Result<Var<'t, T>> {
    x.conv2d(w, 1, Padding::Same)?.add_bias(b)
}

/// `shortcut(x) + conv2(act(norm2(conv1(resample(act(norm1(x)))))))`, with
/// downsampling applied after the second convolution.
pub fn resblock_forward<'t, T: Scalar>(
    x: Var<'t, T>,
    spec: &ResBlockSpec,
    params: &ResBlockVars<'t, T>,
    labels: Option<&[usize]>,
    running: Option<&mut [RunningStats<T>; 2]>,
    mode: Mode,
) -> Result<Var<'t, T>> {
    let xs = x.shape();
    if xs.len() != 4 || xs[3] != spec.in_channels {
        return Err(shape_err(
            "resblock",
            format!("input {xs:?} must be NHWC with {} channels on axis 3", spec.in_channels),
        ));
    }
    if (spec.norm == NormKind::Cbn) != labels.is_some() {
        return Err(Error::InvalidArgument(format!(
            "labels must be given exactly when the block uses cbn (norm = {:?})",
            spec.norm
        )));
    }
    let k1 = params.conv1.0.shape();
    let k2 = params.conv2.0.shape();
    if k1[2] != spec.in_channels || k1[3] != spec.out_channels || k2[2] != spec.out_channels || k2[3] != spec.out_channels {
        return Err(shape_err(
            "resblock",
            format!(
                "kernels {k1:?} / {k2:?} disagree with spec {}→{} channels",
                spec.in_channels, spec.out_channels
            ),
        ));
    }
    if params.norm1.kind() != spec.norm || params.norm2.kind() != spec.norm {
        return Err(Error::InvalidArgument("normalization parameters disagree with block spec".into()));
    }
    if params.shortcut.is_some() != spec.has_shortcut_conv() {
        return Err(Error::InvalidArgument("shortcut parameters disagree with block spec".into()));
    }
    let (r1, r2) = match running {
        Some([a, b]) => (Some(a), Some(b)),
        None => (None, None),
    };

    let mut h = params.norm1.apply(x, labels, r1, mode)?.relu();
    if spec.variant == BlockVariant::Upsample {
        h = h.upsample2x()?;
    }
    h = conv_bias(h, params.conv1)?;
    h = params.norm2.apply(h, labels, r2, mode)?.relu();
    h = conv_bias(h, params.conv2)?;
    if spec.variant == BlockVariant::Downsample {
        h = h.downsample2x()?;
    }

    let mut sc = x;
    match spec.variant {
        BlockVariant::Downsample => {
            sc = sc.downsample2x()?;
            if let Some(p) = params.shortcut {
                sc = sc.conv2d(p.0, 1, Padding::Same)?.add_bias(p.1)?;
            }
        }
        _ => {
            if let Some(p) = params.shortcut {
                sc = sc.conv2d(p.0, 1, Padding::Same)?.add_bias(p.1)?;
            }
            if spec.variant == BlockVariant::Upsample {
                sc = sc.upsample2x()?;
            }
        }
    }
    sc.add(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tape::Tape;

    fn randn(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.normal())
    }

    #[test]
    fn cbn_zero_variance_gives_zero() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[4, 2, 2, 3], 1.7));
        let p = CbnParams::<f64>::new(2, 3);
        let mut running = p.running.clone();
        let g = tape.constant(p.gamma.clone());
        let b = tape.constant(p.beta.clone());
        let y = cbn_forward(x, &[0, 1, 0, 1], g, b, &mut running, Mode::Train, 1e-5).unwrap();
        assert!(y.value().data().iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn cbn_scale_selection_by_label() {
        let mut rng = Rng::new(1, "test");
        let tape = Tape::<f64>::new();
        let mut base = randn(&[2, 2, 2, 3], &mut rng);
        // two identical samples
        let half = base.data()[..12].to_vec();
        base.data_mut()[12..].copy_from_slice(&half);
        let x = tape.constant(base);
        let mut p = CbnParams::<f64>::new(2, 3);
        p.gamma = Tensor::from_f64(&[2, 3], &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]).unwrap();
        let (g, b) = (tape.constant(p.gamma.clone()), tape.constant(p.beta.clone()));
        let y = cbn_forward(x, &[0, 1], g, b, &mut p.running, Mode::Train, 1e-5).unwrap().value();
        for i in 0..12 {
            assert_eq!(y.data()[12 + i], 2.0 * y.data()[i]);
        }
    }

    #[test]
    fn cbn_moments_follow_selected_class() {
        let mut rng = Rng::new(2, "test");
        let tape = Tape::<f64>::new();
        let x = tape.constant(randn(&[64, 3, 3, 2], &mut rng).map(|v| 3.0 * v + 1.0));
        let mut p = CbnParams::<f64>::new(3, 2);
        p.gamma = Tensor::from_f64(&[3, 2], &[0.5, 1.5, 2.0, 3.0, 1.0, 1.0]).unwrap();
        p.beta = Tensor::from_f64(&[3, 2], &[-1.0, 0.25, 4.0, -2.0, 0.0, 0.0]).unwrap();
        let (g, b) = (tape.constant(p.gamma.clone()), tape.constant(p.beta.clone()));
        let labels = vec![1usize; 64];
        let y = cbn_forward(x, &labels, g, b, &mut p.running, Mode::Train, 1e-12).unwrap().value();
        // moment recomputation
        for c in 0..2 {
            let vals: Vec<f64> = y.data().iter().skip(c).step_by(2).copied().collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let s = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
            assert!((m - p.beta.data()[2 + c]).abs() < 1e-4);
            assert!((s - p.gamma.data()[2 + c]).abs() < 1e-4);
        }
    }

    #[test]
    fn cbn_label_out_of_range() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[2, 1, 1, 1]));
        let mut p = CbnParams::<f64>::new(2, 1);
        let (g, b) = (tape.constant(p.gamma.clone()), tape.constant(p.beta.clone()));
        let err = cbn_forward(x, &[0, 2], g, b, &mut p.running, Mode::Train, 1e-5).unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { label: 2, classes: 2 }));
    }

    #[test]
    fn cbn_eval_is_per_sample() {
        let mut rng = Rng::new(3, "test");
        let mut p = CbnParams::<f64>::new(2, 2);
        p.running.mean = vec![0.3, -0.2];
        p.running.var = vec![2.0, 0.5];
        let x = randn(&[4, 2, 2, 2], &mut rng);
        let run = |x: Tensor<f64>, labels: &[usize], p: &mut CbnParams<f64>| {
            let tape = Tape::<f64>::new();
            let xv = tape.constant(x);
            let (g, b) = (tape.constant(p.gamma.clone()), tape.constant(p.beta.clone()));
            cbn_forward(xv, labels, g, b, &mut p.running, Mode::Eval, 1e-5).unwrap().value().as_ref().clone()
        };
        let full = run(x.clone(), &[0, 1, 1, 0], &mut p);
        let single = run(x.slice_rows(2, 1).unwrap(), &[1], &mut p);
        assert_eq!(&full.data()[16..24], single.data());
    }

    #[test]
    fn ln_definitional() {
        let mut rng = Rng::new(4, "test");
        let tape = Tape::<f64>::new();
        let x = tape.constant(randn(&[3, 4, 4, 2], &mut rng));
        let p = LnParams::<f64>::new(&[4, 4, 2]);
        let y = ln_forward(x, tape.constant(p.scale.clone()), tape.constant(p.shift.clone()), 1e-12).unwrap().value();
        for row in y.data().chunks(32) {
            let m = row.iter().sum::<f64>() / 32.0;
            let v = row.iter().map(|q| (q - m).powi(2)).sum::<f64>() / 32.0;
            assert!(m.abs() < 1e-5 && (v - 1.0).abs() < 1e-5);
        }
        // constant sample → zeros
        let c = tape.constant(Tensor::full(&[1, 4, 4, 2], 3.0));
        let y = ln_forward(c, tape.constant(p.scale.clone()), tape.constant(p.shift.clone()), 1e-5).unwrap().value();
        assert!(y.data().iter().all(|&v| v == 0.0));
        let bad = tape.constant(Tensor::zeros(&[4, 2]));
        assert!(ln_forward(x, bad, bad, 1e-5).is_err());
    }

    #[test]
    fn ln_matches_two_pass_oracle() {
        let mut rng = Rng::new(5, "test");
        let xt = randn(&[2, 3, 3, 2], &mut rng);
        let scale = randn(&[3, 3, 2], &mut rng);
        let shift = randn(&[3, 3, 2], &mut rng);
        let tape = Tape::<f64>::new();
        let y = ln_forward(tape.constant(xt.clone()), tape.constant(scale.clone()), tape.constant(shift.clone()), 1e-5)
            .unwrap()
            .value();
        for n in 0..2 {
            let row = &xt.data()[n * 18..(n + 1) * 18];
            let m = row.iter().sum::<f64>() / 18.0;
            let v = row.iter().map(|q| (q - m).powi(2)).sum::<f64>() / 18.0;
            for f in 0..18 {
                let want = (row[f] - m) / (v + 1e-5).sqrt() * scale.data()[f] + shift.data()[f];
                assert!((y.data()[n * 18 + f] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn spectral_diag_and_fixed_point() {
        // weight stored rest × out = 2 × 2, diag(2, 0.5)
        let w = Tensor::<f64>::from_f64(&[2, 2], &[2.0, 0.0, 0.0, 0.5]).unwrap();
        let mut st = SpectralState::new(vec![0.6, 0.8], 100).unwrap();
        let (wn, sigma) = spectral_normalize(&w, &mut st).unwrap();
        assert!((sigma - 2.0).abs() < 1e-9);
        assert!((wn.data()[0] - 1.0).abs() < 1e-9 && (wn.data()[3] - 0.25).abs() < 1e-9);
        let norm: f64 = st.u.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);

        let id = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut st = SpectralState::new(vec![0.3, 0.7], 50).unwrap();
        let (wn, _) = spectral_normalize(&id, &mut st).unwrap();
        assert!(wn.max_abs_diff(&id) < 1e-3);
    }

    #[test]
    fn spectral_zero_weight_errors() {
        let w = Tensor::<f64>::zeros(&[3, 2]);
        let mut st = SpectralState::new(vec![1.0, 0.0], 1).unwrap();
        assert!(matches!(spectral_normalize(&w, &mut st), Err(Error::ZeroWeight)));
    }

    fn block_vars<'t>(tape: &'t Tape<f64>, spec: &ResBlockSpec, rng: &mut Rng, zero_convs: bool) -> ResBlockVars<'t, f64> {
        let (i, o) = (spec.in_channels, spec.out_channels);
        let mut p = |shape: &[usize]| {
            if zero_convs {
                tape.param(Tensor::zeros(shape))
            } else {
                tape.param(randn(shape, rng).map(|v| 0.3 * v))
            }
        };
        let conv1 = (p(&[3, 3, i, o]), p(&[o]));
        let conv2 = (p(&[3, 3, o, o]), p(&[o]));
        let shortcut = spec
            .has_shortcut_conv()
            .then(|| (tape.param(randn(&[1, 1, i, o], rng)), tape.param(randn(&[o], rng))));
        let norm = |c: usize, size: usize| match spec.norm {
            NormKind::Ln => NormVars::Ln {
                scale: tape.param(Tensor::ones(&[size, size, c])),
                shift: tape.param(Tensor::zeros(&[size, size, c])),
            },
            NormKind::Cbn => NormVars::Cbn {
                gamma: tape.param(Tensor::ones(&[2, c])),
                beta: tape.param(Tensor::zeros(&[2, c])),
            },
            NormKind::None => NormVars::None,
        };
        ResBlockVars {
            norm1: norm(i, spec.in_size),
            conv1,
            norm2: norm(o, spec.mid_size()),
            conv2,
            shortcut,
        }
    }

    #[test]
    fn zero_residual_path_is_shortcut() {
        let mut rng = Rng::new(6, "test");
        for variant in [BlockVariant::Plain, BlockVariant::Upsample, BlockVariant::Downsample] {
            let spec = ResBlockSpec { in_channels: 3, out_channels: 3, variant, norm: NormKind::None, in_size: 4 };
            let tape = Tape::<f64>::new();
            let x = tape.constant(randn(&[2, 4, 4, 3], &mut rng));
            let vars = block_vars(&tape, &spec, &mut rng, true);
            let y = resblock_forward(x, &spec, &vars, None, None, Mode::Train).unwrap();
            let mut sc = x;
            if variant == BlockVariant::Downsample {
                sc = sc.downsample2x().unwrap();
            }
            if let Some((w, b)) = vars.shortcut {
                sc = sc.conv2d(w, 1, Padding::Same).unwrap().add_bias(b).unwrap();
            }
            if variant == BlockVariant::Upsample {
                sc = sc.upsample2x().unwrap();
            }
            assert_eq!(y.value().data(), sc.value().data());
            if variant == BlockVariant::Plain {
                assert_eq!(y.value().data(), x.value().data());
            }
        }
    }

    #[test]
    fn block_shape_law_and_label_contract() {
        let mut rng = Rng::new(7, "test");
        for (variant, out) in [(BlockVariant::Upsample, 8), (BlockVariant::Downsample, 2), (BlockVariant::Plain, 4)] {
            let spec = ResBlockSpec { in_channels: 2, out_channels: 3, variant, norm: NormKind::Cbn, in_size: 4 };
            let tape = Tape::<f64>::new();
            let x = tape.constant(randn(&[2, 4, 4, 2], &mut rng));
            let vars = block_vars(&tape, &spec, &mut rng, false);
            let mut running = [RunningStats::new(2), RunningStats::new(3)];
            let y = resblock_forward(x, &spec, &vars, Some(&[0, 1]), Some(&mut running), Mode::Train).unwrap();
            assert_eq!(y.shape(), vec![2, out, out, 3]);
            assert!(resblock_forward(x, &spec, &vars, None, Some(&mut running), Mode::Train).is_err());
        }
    }

    #[test]
    fn block_channel_mismatch() {
        let mut rng = Rng::new(8, "test");
        let spec = ResBlockSpec { in_channels: 2, out_channels: 3, variant: BlockVariant::Plain, norm: NormKind::None, in_size: 4 };
        let tape = Tape::<f64>::new();
        let vars = block_vars(&tape, &spec, &mut rng, false);
        let wrong = ResBlockSpec { out_channels: 4, ..spec };
        let x = tape.constant(randn(&[1, 4, 4, 2], &mut rng));
        assert!(resblock_forward(x, &wrong, &vars, None, None, Mode::Train).is_err());
    }
}
