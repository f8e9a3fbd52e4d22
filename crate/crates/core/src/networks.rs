//! Declarative network specs, presets at full and desk scale, and instances
//! holding parameters plus normalization/spectral state.

use std::ops::Range;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::kernels::Padding;
use crate::nn::{
    resblock_forward, BlockVariant, Mode, NormKind, NormVars, ResBlockSpec, ResBlockVars, RunningStats, SpectralState,
};
use crate::ops::Activation;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Generator,
    Discriminator,
    Classifier,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum InputContract {
    Noise { dim: usize },
    Image { height: usize, width: usize, channels: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "layer")]
pub enum Layer {
    Dense { out: usize },
    Reshape { height: usize, width: usize, channels: usize },
    ResBlock { out: usize, variant: BlockVariant, norm: NormKind },
    Norm { kind: NormKind },
    Act { act: Activation },
    GlobalPool,
    Conv { out: usize, kernel: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    pub role: Role,
    pub input: InputContract,
    pub classes: usize,
    pub width_multiplier: f64,
    pub spectral_norm: bool,
    pub layers: Vec<Layer>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    Flat(usize),
    Image(usize, usize, usize),
}

impl Shape {
    fn dims(self) -> Vec<usize> {
        match self {
            Shape::Flat(d) => vec![d],
            Shape::Image(h, w, c) => vec![h, w, c],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ParamKind {
    Weight,
    Bias,
    Ones,
    Zeros,
}

struct ParamDesc {
    name: String,
    shape: Vec<usize>,
    kind: ParamKind,
}

/// One resolved layer: input/output shapes plus its parameter descriptors.
struct Resolved {
    output: Shape,
    block: Option<ResBlockSpec>,
    params: Vec<ParamDesc>,
    cbn_channels: Vec<usize>,
}

fn norm_params(prefix: &str, kind: NormKind, shape: Shape, classes: usize) -> (Vec<ParamDesc>, Vec<usize>) {
    let c = *shape.dims().last().unwrap_or(&0);
    let p = |n: &str, s: Vec<usize>, k| ParamDesc { name: format!("{prefix}.{n}"), shape: s, kind: k };
    match kind {
        NormKind::Cbn => (
            vec![p("gamma", vec![classes, c], ParamKind::Ones), p("beta", vec![classes, c], ParamKind::Zeros)],
            vec![c],
        ),
        NormKind::Ln => (
            vec![p("scale", shape.dims(), ParamKind::Ones), p("shift", shape.dims(), ParamKind::Zeros)],
            vec![],
        ),
        NormKind::None => (vec![], vec![]),
    }
}

impl NetworkSpec {
    fn bad(&self, i: usize, detail: impl std::fmt::Display) -> Error {
        Error::Config(format!("network `{}` layer {i}: {detail}", self.name))
    }

    fn resolve(&self) -> Result<Vec<Resolved>> {
        let mut shape = match self.input {
            InputContract::Noise { dim } => Shape::Flat(dim),
            InputContract::Image { height, width, channels } => Shape::Image(height, width, channels),
        };
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let pre = format!("l{i}");
            let mut block = None;
            let mut cbn_channels = vec![];
            let mut params = vec![];
            let w = |n: &str, s: Vec<usize>| ParamDesc { name: format!("{pre}.{n}"), shape: s, kind: ParamKind::Weight };
            let b = |n: &str, s: Vec<usize>| ParamDesc { name: format!("{pre}.{n}"), shape: s, kind: ParamKind::Bias };
            let next = match *layer {
                Layer::Dense { out } => {
                    let Shape::Flat(d) = shape else {
                        return Err(self.bad(i, "dense layer needs a flat input (add a global pool first)"));
                    };
                    params.push(w("dense.w", vec![d, out]));
                    params.push(b("dense.b", vec![out]));
                    Shape::Flat(out)
                }
                Layer::Reshape { height, width, channels } => {
                    let Shape::Flat(d) = shape else {
                        return Err(self.bad(i, "reshape needs a flat input"));
                    };
                    if d != height * width * channels {
                        return Err(self.bad(i, format!("cannot reshape {d} features to {height}×{width}×{channels}")));
                    }
                    Shape::Image(height, width, channels)
                }
                Layer::ResBlock { out, variant, norm } => {
                    let Shape::Image(h, wd, c) = shape else {
                        return Err(self.bad(i, "residual block needs an image input"));
                    };
                    if h != wd {
                        return Err(self.bad(i, "residual blocks expect square feature maps"));
                    }
                    if variant == BlockVariant::Downsample && h % 2 != 0 {
                        return Err(self.bad(i, format!("cannot downsample odd size {h}")));
                    }
                    if norm == NormKind::Cbn && self.classes == 0 {
                        return Err(self.bad(i, "cbn needs a class count"));
                    }
                    let spec = ResBlockSpec { in_channels: c, out_channels: out, variant, norm, in_size: h };
                    let (n1, r1) = norm_params(&format!("{pre}.norm1"), norm, shape, self.classes);
                    params.extend(n1);
                    params.push(w("conv1.w", vec![3, 3, c, out]));
                    params.push(b("conv1.b", vec![out]));
                    let mid = Shape::Image(spec.mid_size(), spec.mid_size(), out);
                    let (n2, r2) = norm_params(&format!("{pre}.norm2"), norm, mid, self.classes);
                    params.extend(n2);
                    params.push(w("conv2.w", vec![3, 3, out, out]));
                    params.push(b("conv2.b", vec![out]));
                    if spec.has_shortcut_conv() {
                        params.push(w("shortcut.w", vec![1, 1, c, out]));
                        params.push(b("shortcut.b", vec![out]));
                    }
                    cbn_channels = r1.into_iter().chain(r2).collect();
                    block = Some(spec);
                    Shape::Image(spec.out_size(), spec.out_size(), out)
                }
                Layer::Norm { kind } => {
                    if kind == NormKind::Cbn && self.classes == 0 {
                        return Err(self.bad(i, "cbn needs a class count"));
                    }
                    if kind == NormKind::Cbn && !matches!(shape, Shape::Image(..)) {
                        return Err(self.bad(i, "cbn needs an image input"));
                    }
                    let (p, r) = norm_params(&format!("{pre}.norm"), kind, shape, self.classes);
                    params = p;
                    cbn_channels = r;
                    shape
                }
                Layer::Act { .. } => shape,
                Layer::GlobalPool => match shape {
                    Shape::Image(_, _, c) => Shape::Flat(c),
                    Shape::Flat(_) => return Err(self.bad(i, "global pool needs an image input")),
                },
                Layer::Conv { out, kernel } => {
                    let Shape::Image(h, wd, c) = shape else {
                        return Err(self.bad(i, "conv needs an image input"));
                    };
                    params.push(w("conv.w", vec![kernel, kernel, c, out]));
                    params.push(b("conv.b", vec![out]));
                    Shape::Image(h, wd, out)
                }
            };
            shape = next;
            out.push(Resolved { output: shape, block, params, cbn_channels });
        }
        Ok(out)
    }

    /// Output shape per sample (without the batch axis).
    pub fn output_shape(&self) -> Result<Vec<usize>> {
        let r = self.resolve()?;
        Ok(r.last().map(|l| l.output.dims()).unwrap_or_else(|| self.input_shape()))
    }

    pub fn input_shape(&self) -> Vec<usize> {
        match self.input {
            InputContract::Noise { dim } => vec![dim],
            InputContract::Image { height, width, channels } => vec![height, width, channels],
        }
    }

    /// Parameter names and shapes in store order.
    pub fn param_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        Ok(self
            .resolve()?
            .into_iter()
            .flat_map(|r| r.params.into_iter().map(|p| (p.name, p.shape)))
            .collect())
    }

    pub fn has_penultimate_tap(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, Layer::GlobalPool))
    }

    /// The same family with every hidden channel count multiplied by `m`.
    /// Image channels, the output convolution and dense output heads keep their size.
    pub fn scaled(&self, m: f64) -> Result<Self> {
        if !(m > 0.0) {
            return Err(Error::Config(format!("width multiplier must be > 0, got {m}")));
        }
        let sc = |c: usize| ((c as f64 * m).round() as usize).max(1);
        let mut layers = self.layers.clone();
        for i in 0..layers.len() {
            match layers[i] {
                Layer::ResBlock { ref mut out, .. } => *out = sc(*out),
                Layer::Reshape { height, width, ref mut channels } => {
                    *channels = sc(*channels);
                    let c = *channels;
                    if i > 0 {
                        if let Layer::Dense { ref mut out } = layers[i - 1] {
                            *out = height * width * c;
                        }
                    }
                }
                _ => {}
            }
        }
        let s = Self {
            name: format!("{}@{m}", self.name),
            width_multiplier: self.width_multiplier * m,
            layers,
            ..self.clone()
        };
        s.resolve()?;
        Ok(s)
    }

    fn generator(name: &str, classes: usize, noise: usize, ch: usize, ups: usize) -> Self {
        let mut layers = vec![
            Layer::Dense { out: 4 * 4 * ch },
            Layer::Reshape { height: 4, width: 4, channels: ch },
        ];
        layers.extend((0..ups).map(|_| Layer::ResBlock { out: ch, variant: BlockVariant::Upsample, norm: NormKind::Cbn }));
        layers.extend([
            Layer::Norm { kind: NormKind::Cbn },
            Layer::Act { act: Activation::Relu },
            Layer::Conv { out: 3, kernel: 3 },
            Layer::Act { act: Activation::Tanh },
        ]);
        Self {
            name: name.into(),
            role: Role::Generator,
            input: InputContract::Noise { dim: noise },
            classes,
            width_multiplier: 1.0,
            spectral_norm: false,
            layers,
        }
    }

    fn discriminator(name: &str, size: usize, ch: usize) -> Self {
        let blk = |variant| Layer::ResBlock { out: ch, variant, norm: NormKind::None };
        Self {
            name: name.into(),
            role: Role::Discriminator,
            input: InputContract::Image { height: size, width: size, channels: 3 },
            classes: 0,
            width_multiplier: 1.0,
            spectral_norm: true,
            layers: vec![
                blk(BlockVariant::Downsample),
                blk(BlockVariant::Downsample),
                blk(BlockVariant::Plain),
                blk(BlockVariant::Plain),
                Layer::Act { act: Activation::Relu },
                Layer::GlobalPool,
                Layer::Dense { out: 1 },
            ],
        }
    }

    fn classifier_tail(name: &str, size: usize, classes: usize, mut layers: Vec<Layer>) -> Self {
        layers.extend([
            Layer::Norm { kind: NormKind::Ln },
            Layer::Act { act: Activation::Relu },
            Layer::GlobalPool,
            Layer::Dense { out: classes },
        ]);
        Self {
            name: name.into(),
            role: Role::Classifier,
            input: InputContract::Image { height: size, width: size, channels: 3 },
            classes,
            width_multiplier: 1.0,
            spectral_norm: false,
            layers,
        }
    }

    fn full_classifier(name: &str, classes: usize, last: usize) -> Self {
        let mut layers = vec![];
        let ln = NormKind::Ln;
        for ch in [32, 64, 128] {
            layers.extend((0..3).map(|_| Layer::ResBlock { out: ch, variant: BlockVariant::Plain, norm: ln }));
            layers.push(Layer::ResBlock { out: ch, variant: BlockVariant::Downsample, norm: ln });
        }
        layers.extend((0..3).map(|_| Layer::ResBlock { out: last, variant: BlockVariant::Plain, norm: ln }));
        Self::classifier_tail(name, 32, classes, layers)
    }

    pub fn cifar10_generator() -> Self {
        Self::generator("paper-cifar10/generator", 10, 128, 256, 3)
    }
    pub fn cifar10_discriminator() -> Self {
        Self::discriminator("paper-cifar10/discriminator", 32, 256)
    }
    pub fn cifar10_classifier() -> Self {
        Self::full_classifier("paper-cifar10/classifier", 10, 128)
    }
    pub fn cifar100_generator() -> Self {
        Self::generator("paper-cifar100/generator", 100, 128, 256, 3)
    }
    pub fn cifar100_discriminator() -> Self {
        Self::discriminator("paper-cifar100/discriminator", 32, 256)
    }
    pub fn cifar100_classifier() -> Self {
        Self::full_classifier("paper-cifar100/classifier", 100, 256)
    }

    pub fn desk_generator(classes: usize) -> Self {
        Self::generator("desk-small/generator", classes, 128, 32, 2)
    }
    pub fn desk_discriminator() -> Self {
        Self::discriminator("desk-small/discriminator", 16, 32)
    }
    pub fn desk_classifier(classes: usize) -> Self {
        let ln = NormKind::Ln;
        Self::classifier_tail(
            "desk-small/classifier",
            16,
            classes,
            vec![
                Layer::ResBlock { out: 16, variant: BlockVariant::Downsample, norm: ln },
                Layer::ResBlock { out: 32, variant: BlockVariant::Downsample, norm: ln },
                Layer::ResBlock { out: 64, variant: BlockVariant::Plain, norm: ln },
            ],
        )
    }
}

/// The three trainable networks of one preset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PresetSpecs {
    pub generator: NetworkSpec,
    pub discriminator: NetworkSpec,
    pub classifier: NetworkSpec,
}

/// Looks up `paper-cifar10`, `paper-cifar100` or `desk-small`.
pub fn preset(name: &str, classes: usize) -> Result<PresetSpecs> {
    match name {
        "paper-cifar10" => Ok(PresetSpecs {
            generator: NetworkSpec::cifar10_generator(),
            discriminator: NetworkSpec::cifar10_discriminator(),
            classifier: NetworkSpec::cifar10_classifier(),
        }),
        "paper-cifar100" => Ok(PresetSpecs {
            generator: NetworkSpec::cifar100_generator(),
            discriminator: NetworkSpec::cifar100_discriminator(),
            classifier: NetworkSpec::cifar100_classifier(),
        }),
        "desk-small" => Ok(PresetSpecs {
            generator: NetworkSpec::desk_generator(classes),
            discriminator: NetworkSpec::desk_discriminator(),
            classifier: NetworkSpec::desk_classifier(classes),
        }),
        other => Err(Error::Config(format!(
            "unknown network preset `{other}` (expected paper-cifar10, paper-cifar100 or desk-small)"
        ))),
    }
}

/// Semi-orthogonal `rows × cols` matrix (orthonormal columns if rows ≥ cols, rows otherwise).
fn orthogonal(rows: usize, cols: usize, rng: &mut Rng) -> Vec<f64> {
    let (r, c) = (rows.max(cols), rows.min(cols));
    let a = DMatrix::<f64>::from_fn(r, c, |_, _| rng.normal());
    let qr = a.qr();
    let (q, rr) = (qr.q(), qr.r());
    let mut out = vec![0.0; rows * cols];
    for i in 0..r {
        for j in 0..c {
            let s = if rr[(j, j)] < 0.0 { -1.0 } else { 1.0 };
            let v = q[(i, j)] * s;
            if rows >= cols {
                out[i * cols + j] = v;
            } else {
                out[j * cols + i] = v;
            }
        }
    }
    out
}

/// Parameters and persistent state of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkInstance<T: Scalar> {
    pub spec: NetworkSpec,
    pub names: Vec<String>,
    pub params: Vec<Tensor<T>>,
    /// One entry per parameter; `Some` for spectrally normalized weights.
    pub spectral: Vec<Option<SpectralState>>,
    /// One entry per conditional batch-norm layer, in layer order.
    pub running: Vec<RunningStats<T>>,
    groups: Vec<Range<usize>>,
    running_groups: Vec<Range<usize>>,
}

/// Tape handles for one network's parameters.
pub struct Bound<'t, T: Scalar> {
    /// Raw parameter leaves; gradients are taken with respect to these.
    pub params: Vec<Var<'t, T>>,
    effective: Vec<Var<'t, T>>,
}

pub struct Forward<'t, T: Scalar> {
    pub output: Var<'t, T>,
    /// Post-global-pool, pre-final-dense activations when the spec has a pool.
    pub features: Option<Var<'t, T>>,
}

impl<T: Scalar> NetworkInstance<T> {
    /// Deterministic initialization from `rng`.
    pub fn build(spec: NetworkSpec, rng: &mut Rng) -> Result<Self> {
        let resolved = spec.resolve()?;
        let mut names = vec![];
        let mut params = vec![];
        let mut spectral = vec![];
        let mut running = vec![];
        let mut groups = vec![];
        let mut running_groups = vec![];
        for r in resolved {
            let start = params.len();
            let rstart = running.len();
            for p in r.params {
                let t = match p.kind {
                    ParamKind::Weight => {
                        let out = *p.shape.last().unwrap_or(&1);
                        let rows = p.shape.iter().product::<usize>() / out;
                        Tensor::from_f64(&p.shape, &orthogonal(rows, out, rng))?
                    }
                    ParamKind::Bias | ParamKind::Zeros => Tensor::zeros(&p.shape),
                    ParamKind::Ones => Tensor::ones(&p.shape),
                };
                let sn = (p.kind == ParamKind::Weight && spec.spectral_norm)
                    .then(|| {
                        let out = *p.shape.last().unwrap_or(&1);
                        SpectralState::new((0..out).map(|_| rng.normal()).collect(), 1)
                    })
                    .transpose()?;
                if names.contains(&p.name) {
                    return Err(Error::Config(format!("duplicate parameter name `{}`", p.name)));
                }
                names.push(p.name);
                params.push(t);
                spectral.push(sn);
            }
            running.extend(r.cbn_channels.iter().map(|&c| RunningStats::new(c)));
            groups.push(start..params.len());
            running_groups.push(rstart..running.len());
        }
        Ok(Self { spec, names, params, spectral, running, groups, running_groups })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Parameter index range of layer `i`.
    pub fn group(&self, i: usize) -> Range<usize> {
        self.groups[i].clone()
    }

    /// Runs `iterations` power-iteration updates per normalized weight and
    /// returns the resulting σ̂ (None for unnormalized parameters).
    pub fn sigmas(&mut self, iterations: usize) -> Result<Vec<Option<f64>>> {
        self.spectral
            .iter_mut()
            .zip(&self.params)
            .map(|(s, p)| s.as_mut().map(|s| crate::nn::spectral_sigma(p, s, iterations)).transpose())
            .collect()
    }

    /// Places the parameters on `tape`, scaling normalized weights by `1/σ̂`
    /// (σ̂ is a constant on the tape).
    pub fn bind_with<'t>(&self, tape: &'t Tape<T>, trainable: bool, sigmas: &[Option<f64>]) -> Result<Bound<'t, T>> {
        if sigmas.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "{} sigmas for {} parameters",
                sigmas.len(),
                self.params.len()
            )));
        }
        let mut params = Vec::with_capacity(self.params.len());
        let mut effective = Vec::with_capacity(self.params.len());
        for (p, s) in self.params.iter().zip(sigmas) {
            let v = if trainable { tape.param(p.clone()) } else { tape.constant(p.clone()) };
            params.push(v);
            effective.push(match s {
                Some(sigma) => v.scale(1.0 / sigma),
                None => v,
            });
        }
        Ok(Bound { params, effective })
    }

    /// σ̂ from the stored `u` without updating it.
    pub fn current_sigmas(&self) -> Result<Vec<Option<f64>>> {
        self.spectral
            .iter()
            .zip(&self.params)
            .map(|(s, p)| s.clone().map(|mut s| crate::nn::spectral_sigma(p, &mut s, 0)).transpose())
            .collect()
    }

    /// Binds every parameter as a constant using the current σ̂.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape<T>) -> Result<Bound<'t, T>> {
        self.bind_with(tape, false, &self.current_sigmas()?)
    }

    pub fn bind<'t>(&mut self, tape: &'t Tape<T>, trainable: bool, power_iterations: usize) -> Result<Bound<'t, T>> {
        let s = self.sigmas(power_iterations)?;
        self.bind_with(tape, trainable, &s)
    }

    fn check_input(&self, x: &Var<'_, T>) -> Result<()> {
        let xs = x.shape();
        let want = self.spec.input_shape();
        if xs.len() != want.len() + 1 || xs[1..] != want[..] {
            return Err(shape_err(
                "network input",
                format!("`{}` expects [N, {want:?}], got {xs:?}", self.spec.name),
            ));
        }
        Ok(())
    }

    /// Forward pass. Labels are required exactly when the spec uses cbn.
    pub fn forward<'t>(
        &mut self,
        b: &Bound<'t, T>,
        x: Var<'t, T>,
        labels: Option<&[usize]>,
        mode: Mode,
    ) -> Result<Forward<'t, T>> {
        let mut running = std::mem::take(&mut self.running);
        let out = self.forward_impl(b, x, labels, mode, &mut running);
        self.running = running;
        out
    }

    /// Eval-mode forward pass that leaves the instance untouched.
    pub fn forward_eval<'t>(&self, b: &Bound<'t, T>, x: Var<'t, T>, labels: Option<&[usize]>) -> Result<Forward<'t, T>> {
        let mut running = self.running.clone();
        self.forward_impl(b, x, labels, Mode::Eval, &mut running)
    }

    fn forward_impl<'t>(
        &self,
        b: &Bound<'t, T>,
        x: Var<'t, T>,
        labels: Option<&[usize]>,
        mode: Mode,
        running_all: &mut [RunningStats<T>],
    ) -> Result<Forward<'t, T>> {
        self.check_input(&x)?;
        let uses_cbn = !running_all.is_empty();
        if uses_cbn && labels.is_none() {
            return Err(Error::InvalidArgument(format!("`{}` is conditional and needs labels", self.spec.name)));
        }
        if let Some(l) = labels {
            if l.len() != x.shape()[0] {
                return Err(shape_err("network labels", format!("{} labels for batch of {}", l.len(), x.shape()[0])));
            }
        }
        let cbn_labels = if uses_cbn { labels } else { None };
        let e = &b.effective;
        let mut h = x;
        let mut features = None;
        let layers = self.spec.layers.clone();
        let resolved = self.spec.resolve()?;
        for (i, layer) in layers.iter().enumerate() {
            let g = self.groups[i].clone();
            let rg = self.running_groups[i].clone();
            let p = &e[g];
            h = match *layer {
                Layer::Dense { .. } => h.dense(p[0], p[1])?,
                Layer::Reshape { height, width, channels } => {
                    let n = h.shape()[0];
                    h.reshape(&[n, height, width, channels])?
                }
                Layer::ResBlock { norm, .. } => {
                    let spec = resolved[i].block.expect("block layer");
                    let mut it = p.iter().copied();
                    let norm1 = take_norm(norm, &mut it);
                    let conv1 = take_pair(&mut it);
                    let norm2 = take_norm(norm, &mut it);
                    let conv2 = take_pair(&mut it);
                    let shortcut = spec.has_shortcut_conv().then(|| take_pair(&mut it));
                    let vars = ResBlockVars { norm1, conv1, norm2, conv2, shortcut };
                    let running = <&mut [RunningStats<T>; 2]>::try_from(&mut running_all[rg]).ok();
                    resblock_forward(h, &spec, &vars, cbn_labels, running, mode)?
                }
                Layer::Norm { kind } => {
                    let vars = match kind {
                        NormKind::Cbn => NormVars::Cbn { gamma: p[0], beta: p[1] },
                        NormKind::Ln => NormVars::Ln { scale: p[0], shift: p[1] },
                        NormKind::None => NormVars::None,
                    };
                    let running = running_all[rg].first_mut();
                    vars.apply(h, cbn_labels, running, mode)?
                }
                Layer::Act { act } => crate::ops::activation(h, act)?,
                Layer::GlobalPool => {
                    let f = h.global_avg_pool()?;
                    features = Some(f);
                    f
                }
                Layer::Conv { .. } => h.conv2d(p[0], 1, Padding::Same)?.add_bias(p[1])?,
            };
        }
        Ok(Forward { output: h, features })
    }
}

impl<T: Scalar> NetworkInstance<T> {
    fn run_eval(&mut self, x: &Tensor<T>, labels: Option<&[usize]>, mode: Mode, tap: bool) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let b = self.bind_frozen(&tape)?;
        let xv = tape.constant(x.clone());
        let f = match mode {
            Mode::Train => self.forward(&b, xv, labels, mode)?,
            Mode::Eval => self.forward_eval(&b, xv, labels)?,
        };
        if tap {
            let feats = f.features.ok_or_else(|| {
                Error::InvalidArgument(format!("`{}` has no penultimate feature tap", self.spec.name))
            })?;
            Ok(feats.value().as_ref().clone())
        } else {
            Ok(f.output.value().as_ref().clone())
        }
    }

    /// Images in `[-1, 1]` for noise `z` (N×dz) and class labels.
    pub fn generate(&mut self, z: &Tensor<T>, labels: &[usize], mode: Mode) -> Result<Tensor<T>> {
        if self.spec.role != Role::Generator {
            return Err(Error::InvalidArgument(format!("`{}` is not a generator", self.spec.name)));
        }
        self.run_eval(z, Some(labels), mode, false)
    }

    /// Critic values, shape N×1.
    pub fn discriminate(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.run_eval(x, None, Mode::Eval, false)
    }

    /// Logits, shape N×classes.
    pub fn classify(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.run_eval(x, None, Mode::Eval, false)
    }

    /// Post-global-pool features, shape N×d.
    pub fn penultimate(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.run_eval(x, None, Mode::Eval, true)
    }
}

fn take_pair<'t, T: Scalar>(it: &mut impl Iterator<Item = Var<'t, T>>) -> (Var<'t, T>, Var<'t, T>) {
    let a = it.next().expect("parameter layout");
    let b = it.next().expect("parameter layout");
    (a, b)
}

fn take_norm<'t, T: Scalar>(kind: NormKind, it: &mut impl Iterator<Item = Var<'t, T>>) -> NormVars<'t, T> {
    match kind {
        NormKind::Cbn => {
            let (gamma, beta) = take_pair(it);
            NormVars::Cbn { gamma, beta }
        }
        NormKind::Ln => {
            let (scale, shift) = take_pair(it);
            NormVars::Ln { scale, shift }
        }
        NormKind::None => NormVars::None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shapes(spec: &NetworkSpec) -> Vec<(String, Vec<usize>)> {
        spec.param_shapes().unwrap()
    }

    fn up_block(i: usize, classes: usize, cin: usize, c: usize) -> Vec<(String, Vec<usize>)> {
        vec![
            (format!("l{i}.norm1.gamma"), vec![classes, cin]),
            (format!("l{i}.norm1.beta"), vec![classes, cin]),
            (format!("l{i}.conv1.w"), vec![3, 3, cin, c]),
            (format!("l{i}.conv1.b"), vec![c]),
            (format!("l{i}.norm2.gamma"), vec![classes, c]),
            (format!("l{i}.norm2.beta"), vec![classes, c]),
            (format!("l{i}.conv2.w"), vec![3, 3, c, c]),
            (format!("l{i}.conv2.b"), vec![c]),
            (format!("l{i}.shortcut.w"), vec![1, 1, cin, c]),
            (format!("l{i}.shortcut.b"), vec![c]),
        ]
    }

    #[test]
    fn full_generator_table() {
        for (spec, k) in [
            (NetworkSpec::cifar10_generator(), 10),
            (NetworkSpec::cifar100_generator(), 100),
        ] {
            let mut want = vec![("l0.dense.w".to_string(), vec![128, 4096]), ("l0.dense.b".into(), vec![4096])];
            for i in 2..5 {
                want.extend(up_block(i, k, 256, 256));
            }
            want.extend([
                ("l5.norm.gamma".to_string(), vec![k, 256]),
                ("l5.norm.beta".into(), vec![k, 256]),
                ("l7.conv.w".into(), vec![3, 3, 256, 3]),
                ("l7.conv.b".into(), vec![3]),
            ]);
            assert_eq!(shapes(&spec), want);
            assert_eq!(spec.output_shape().unwrap(), vec![32, 32, 3]);
        }
    }

    #[test]
    fn full_discriminator_table() {
        let spec = NetworkSpec::cifar10_discriminator();
        let mut want = vec![];
        for (i, cin) in [(0, 3), (1, 256)] {
            want.extend([
                (format!("l{i}.conv1.w"), vec![3, 3, cin, 256]),
                (format!("l{i}.conv1.b"), vec![256]),
                (format!("l{i}.conv2.w"), vec![3, 3, 256, 256]),
                (format!("l{i}.conv2.b"), vec![256]),
                (format!("l{i}.shortcut.w"), vec![1, 1, cin, 256]),
                (format!("l{i}.shortcut.b"), vec![256]),
            ]);
        }
        for i in 2..4 {
            want.extend([
                (format!("l{i}.conv1.w"), vec![3, 3, 256, 256]),
                (format!("l{i}.conv1.b"), vec![256]),
                (format!("l{i}.conv2.w"), vec![3, 3, 256, 256]),
                (format!("l{i}.conv2.b"), vec![256]),
            ]);
        }
        want.extend([("l6.dense.w".to_string(), vec![256, 1]), ("l6.dense.b".into(), vec![1])]);
        assert_eq!(shapes(&spec), want);
        assert_eq!(spec.output_shape().unwrap(), vec![1]);
        assert!(spec.spectral_norm);
    }

    #[test]
    fn full_classifier_table() {
        for (spec, k, last) in [
            (NetworkSpec::cifar10_classifier(), 10, 128),
            (NetworkSpec::cifar100_classifier(), 100, 256),
        ] {
            // (out channels, downsample) per block, then the spatial size after it
            let rows: Vec<(usize, bool)> = [32, 64, 128]
                .iter()
                .flat_map(|&c| [(c, false), (c, false), (c, false), (c, true)])
                .chain([(last, false); 3])
                .collect();
            let got = shapes(&spec);
            let conv1: Vec<_> = got.iter().filter(|(n, _)| n.ends_with("conv1.w")).map(|(_, s)| s.clone()).collect();
            assert_eq!(conv1.len(), 15);
            let (mut cin, mut size) = (3, 32);
            for (i, &(c, down)) in rows.iter().enumerate() {
                assert_eq!(conv1[i], vec![3, 3, cin, c]);
                let ln = got.iter().find(|(n, _)| *n == format!("l{i}.norm1.scale")).unwrap();
                assert_eq!(ln.1, vec![size, size, cin]);
                cin = c;
                if down {
                    size /= 2;
                }
            }
            assert_eq!(size, 4);
            let tail = &got[got.len() - 4..];
            assert_eq!(tail[0].1, vec![4, 4, last]);
            assert_eq!(tail[2], ("l18.dense.w".to_string(), vec![last, k]));
            assert_eq!(spec.output_shape().unwrap(), vec![k]);
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = NetworkInstance::<f32>::build(NetworkSpec::desk_generator(4), &mut Rng::new(3, "init")).unwrap();
        let b = NetworkInstance::<f32>::build(NetworkSpec::desk_generator(4), &mut Rng::new(3, "init")).unwrap();
        assert_eq!(a, b);
        let c = NetworkInstance::<f32>::build(NetworkSpec::desk_generator(4), &mut Rng::new(4, "init")).unwrap();
        assert_ne!(a.params, c.params);
        assert!(a.param_count() > 0);
    }

    #[test]
    fn width_multiplier_scales_channels() {
        let g = NetworkSpec::cifar10_generator().scaled(0.125).unwrap();
        let s = shapes(&g);
        assert_eq!(s[0].1, vec![128, 4 * 4 * 32]);
        assert_eq!(s.iter().find(|(n, _)| n == "l2.conv1.w").unwrap().1, vec![3, 3, 32, 32]);
        assert_eq!(g.output_shape().unwrap(), vec![32, 32, 3]);
        let c = NetworkSpec::cifar10_classifier().scaled(0.125).unwrap();
        assert_eq!(c.output_shape().unwrap(), vec![10]);
        assert_eq!(shapes(&c).iter().find(|(n, _)| n == "l0.conv1.w").unwrap().1, vec![3, 3, 3, 4]);
        let d = NetworkSpec::cifar10_discriminator().scaled(0.125).unwrap();
        assert_eq!(shapes(&d)[0].1, vec![3, 3, 3, 32]);
    }

    #[test]
    fn inconsistent_spec_rejected() {
        let mut s = NetworkSpec::desk_discriminator();
        s.layers.insert(0, Layer::Dense { out: 3 });
        assert!(matches!(NetworkInstance::<f32>::build(s, &mut Rng::new(0, "x")), Err(Error::Config(_))));
    }

    #[test]
    fn orthogonal_columns() {
        let mut rng = Rng::new(0, "orth");
        let w = orthogonal(9, 4, &mut rng);
        for a in 0..4 {
            for b in 0..4 {
                let dot: f64 = (0..9).map(|r| w[r * 4 + a] * w[r * 4 + b]).sum();
                assert!((dot - if a == b { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
        let w = orthogonal(2, 5, &mut rng);
        for a in 0..2 {
            let n: f64 = (0..5).map(|c| w[a * 5 + c].powi(2)).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn desk_forward_contracts() {
        let mut rng = Rng::new(9, "init");
        let mut g = NetworkInstance::<f32>::build(NetworkSpec::desk_generator(4), &mut rng).unwrap();
        let mut d = NetworkInstance::<f32>::build(NetworkSpec::desk_discriminator(), &mut rng).unwrap();
        let mut c = NetworkInstance::<f32>::build(NetworkSpec::desk_classifier(4), &mut rng).unwrap();
        let z = Tensor::from_fn(&[4, 128], |_| rng.normal() as f32);
        let labels = [0, 1, 2, 3];
        let x = g.generate(&z, &labels, Mode::Train).unwrap();
        assert_eq!(x.shape(), &[4, 16, 16, 3]);
        assert!(x.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let e1 = g.generate(&z, &labels, Mode::Eval).unwrap();
        let e2 = g.generate(&z, &labels, Mode::Eval).unwrap();
        assert_eq!(e1, e2);
        assert!(g.generate(&z, &[0, 1, 2, 4], Mode::Eval).is_err());

        let out = d.discriminate(&x).unwrap();
        assert_eq!(out.shape(), &[4, 1]);
        let twice = d.discriminate(&Tensor::concat_rows(&[x.clone(), x.clone()]).unwrap()).unwrap();
        assert_eq!(&twice.data()[..4], out.data());
        assert_eq!(&twice.data()[4..], out.data());
        assert!(d.discriminate(&z).is_err());

        let logits = c.classify(&x).unwrap();
        assert_eq!(logits.shape(), &[4, 4]);
        assert!(logits.all_finite());
        assert_eq!(c.penultimate(&x).unwrap().shape(), &[4, 64]);
        assert!(g.penultimate(&z).is_err());
    }

    #[test]
    fn full_scale_classifiers_emit_class_logits() {
        let mut rng = Rng::new(1, "init");
        for (spec, k) in [
            (NetworkSpec::cifar10_classifier(), 10),
            (NetworkSpec::cifar100_classifier(), 100),
        ] {
            let mut c = NetworkInstance::<f32>::build(spec, &mut rng).unwrap();
            let x = Tensor::from_fn(&[1, 32, 32, 3], |_| rng.uniform() as f32 * 2.0 - 1.0);
            let l = c.classify(&x).unwrap();
            assert_eq!(l.shape(), &[1, k]);
            assert!(l.all_finite());
        }
    }
}
