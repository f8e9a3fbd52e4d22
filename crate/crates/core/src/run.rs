//! Run configuration, run directories and the experiment drivers.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, restore_evaluator, restore_train_state, train_checkpoint, Checkpoint};
use crate::data::{dataset_from_split, generate_dataset, load_sgsh, Dataset, ShapesSpec};
use crate::error::{Error, Result};
use crate::evaluator::Evaluator;
use crate::io::write_atomic;
use crate::metrics::{split_score, FeatureStats};
use crate::networks::{preset, PresetSpecs};
use crate::training::{
    eval_sample_count, evaluate_samples, metrics_csv, pretrain_evaluator, real_feature_stats, sample_generator, EvalConfig,
    EvaluatorConfig, IterationStats, MetricsRow, Objective, TrainConfig, TrainState,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    Scoregan,
    ControlganBaseline,
    ProbeOverfit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataFile {
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataBuiltin {
    pub builtin: String,
}

/// Where the images come from: an `SGSH` file, a named builtin or an inline spec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DataSource {
    File(DataFile),
    Builtin(DataBuiltin),
    Shapes(ShapesSpec),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Shapes(ShapesSpec::default())
    }
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::File(f) => {
                let (classes, all) = load_sgsh(&f.path)?;
                dataset_from_split(classes, &all)
            }
            DataSource::Builtin(b) => generate_dataset(&ShapesSpec::builtin(&b.builtin)?),
            DataSource::Shapes(s) => generate_dataset(s),
        }
    }

    /// Class count without rendering anything, when it is known up front.
    fn classes(&self) -> Result<Option<usize>> {
        Ok(match self {
            DataSource::File(_) => None,
            DataSource::Builtin(b) => Some(ShapesSpec::builtin(&b.builtin)?.classes),
            DataSource::Shapes(s) => Some(s.classes),
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluatorSources {
    /// Seed of the training evaluator; the metric evaluator uses `seed + 1`.
    pub seed: u64,
    pub train_path: Option<PathBuf>,
    pub metric_path: Option<PathBuf>,
    pub pretrain: EvaluatorConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub mode: RunMode,
    pub train: TrainConfig,
    pub networks: String,
    pub data: DataSource,
    pub eval: EvalConfig,
    pub evaluators: EvaluatorSources,
    /// Save a checkpoint every this many iterations; 0 keeps only the final one.
    pub checkpoint_interval: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: RunMode::Scoregan,
            train: TrainConfig::default(),
            networks: "desk-small".into(),
            data: DataSource::default(),
            eval: EvalConfig::default(),
            evaluators: EvaluatorSources::default(),
            checkpoint_interval: 0,
        }
    }
}

impl RunConfig {
    /// The desk experiment: 4-class shapes, 2,000 iterations, batch 16.
    pub fn desk(seed: u64, delta: f64) -> Self {
        let mode = if delta == 0.0 { RunMode::ControlganBaseline } else { RunMode::Scoregan };
        Self {
            mode,
            train: TrainConfig {
                batch_size: 16,
                total_iterations: 2000,
                halve_at_iteration: 1000,
                delta,
                seed,
                ..TrainConfig::default()
            },
            eval: EvalConfig { n_splits: 10, split_size: 256, eval_interval: 100, fid_samples: 2560 },
            checkpoint_interval: 1000,
            ..Self::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.resolve()
    }

    /// Applies the mode to the training section and validates everything.
    pub fn resolve(mut self) -> Result<Self> {
        match self.mode {
            RunMode::ControlganBaseline => self.train.delta = 0.0,
            RunMode::Scoregan if self.train.delta == 0.0 => {
                return Err(Error::Config("mode scoregan needs train.delta > 0 (use controlgan-baseline for δ = 0)".into()))
            }
            _ => {}
        }
        self.train.validate()?;
        self.eval.validate()?;
        if let Some(c) = self.data.classes()? {
            preset(&self.networks, c)?;
        }
        Ok(self)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Everything a run needs besides its own state.
pub struct Materials {
    pub data: Dataset,
    pub specs: PresetSpecs,
    pub train_evaluator: Evaluator<f32>,
    pub metric_evaluator: Evaluator<f32>,
    pub real_stats: FeatureStats,
}

fn obtain_evaluator(
    path: &Option<PathBuf>,
    seed: u64,
    cfg: &RunConfig,
    specs: &PresetSpecs,
    data: &Dataset,
    save_to: Option<PathBuf>,
) -> Result<Evaluator<f32>> {
    let e = match path {
        Some(p) => restore_evaluator(Checkpoint::load(p)?)?,
        None => {
            let e = pretrain_evaluator(specs.classifier.clone(), data, seed, &cfg.evaluators.pretrain)?;
            if let Some(dir) = save_to {
                checkpoint::evaluator_checkpoint(&e)?.save(&dir)?;
            }
            e
        }
    };
    if e.classes() != data.classes || e.input_shape() != specs.generator.output_shape()? {
        return Err(Error::Config("evaluator does not match the dataset classes or image shape".into()));
    }
    Ok(e)
}

impl Materials {
    /// Loads the data and obtains both evaluators; freshly trained ones are saved under `out/evaluators`.
    pub fn prepare(cfg: &RunConfig, out: Option<&Path>) -> Result<Self> {
        let data = cfg.data.load()?;
        let specs = preset(&cfg.networks, data.classes)?;
        Self::with_data(cfg, data, specs, out)
    }

    pub fn with_data(cfg: &RunConfig, data: Dataset, specs: PresetSpecs, out: Option<&Path>) -> Result<Self> {
        let ev = &cfg.evaluators;
        let dir = |name: &str| out.map(|o| o.join("evaluators").join(name));
        let train_evaluator = obtain_evaluator(&ev.train_path, ev.seed, cfg, &specs, &data, dir("train"))?;
        let metric_evaluator = obtain_evaluator(&ev.metric_path, ev.seed + 1, cfg, &specs, &data, dir("metric"))?;
        Self::assemble(cfg, data, specs, train_evaluator, metric_evaluator)
    }

    pub fn assemble(
        cfg: &RunConfig,
        data: Dataset,
        specs: PresetSpecs,
        train_evaluator: Evaluator<f32>,
        metric_evaluator: Evaluator<f32>,
    ) -> Result<Self> {
        if train_evaluator.checksum() == metric_evaluator.checksum() {
            return Err(Error::Config("the metric evaluator must differ from the training evaluator".into()));
        }
        let real_stats = real_feature_stats(&metric_evaluator, &data, cfg.eval.fid_samples)?;
        Ok(Self { data, specs, train_evaluator, metric_evaluator, real_stats })
    }
}

/// One evaluation point with the extra quantities the experiments report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Snapshot {
    pub row: MetricsRow,
    /// Mean split score of the same samples under the training evaluator.
    pub train_score: f64,
    pub ris_real_branch: u64,
}

/// Metric evaluation of the current generator.
pub fn snapshot(state: &TrainState, stats: &IterationStats, cfg: &RunConfig, m: &Materials) -> Result<Snapshot> {
    let (x, _) = sample_generator(&state.generator, eval_sample_count(&cfg.eval), m.data.classes, cfg.train.seed)?;
    let g = evaluate_samples(&x, &m.metric_evaluator, &m.real_stats, &cfg.eval)?;
    let train = split_score(&x, &m.train_evaluator, cfg.eval.n_splits, cfg.eval.split_size)?;
    Ok(Snapshot {
        row: MetricsRow {
            iteration: state.iteration,
            loss_d: stats.loss_d,
            loss_g: stats.loss_g,
            loss_c: stats.loss_c,
            gamma: stats.gamma,
            toy_is_mean: g.score.mean,
            toy_is_std: g.score.std,
            toy_fid: g.fid,
        },
        train_score: train.mean,
        ris_real_branch: state.ris_real_branch,
    })
}

pub const METRICS_FILE: &str = "metrics.csv";

pub fn checkpoint_dir(out: &Path, iteration: u64) -> PathBuf {
    out.join("checkpoints").join(format!("iter-{iteration:06}"))
}

/// Drives a [`TrainState`] under one configuration.
pub struct Trainer<'a> {
    pub cfg: &'a RunConfig,
    pub materials: &'a Materials,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a RunConfig, materials: &'a Materials) -> Self {
        Self { cfg, materials }
    }

    pub fn start(&self) -> Result<TrainState> {
        let mut s = TrainState::new(&self.cfg.train, &self.materials.specs, &self.materials.data)?;
        s.pretrain_classifier(&self.cfg.train, &self.materials.data)?;
        Ok(s)
    }

    /// Trains until `until` (capped at the configured total), evaluating
    /// every `eval_interval` iterations and at the end. Returns the snapshots taken.
    pub fn advance(&self, state: &mut TrainState, until: u64, out: Option<&Path>) -> Result<Vec<Snapshot>> {
        self.advance_with(state, until, out, |_| {})
    }

    /// [`Trainer::advance`] that also hands every iteration's statistics to `observe`.
    pub fn advance_with(
        &self,
        state: &mut TrainState,
        until: u64,
        out: Option<&Path>,
        mut observe: impl FnMut(&IterationStats),
    ) -> Result<Vec<Snapshot>> {
        let t = &self.cfg.train;
        let until = until.min(t.total_iterations);
        let mut snaps = vec![];
        while state.iteration < until {
            let stats = match state.train_iteration(t, &self.materials.data, Some(&self.materials.train_evaluator)) {
                Ok(s) => s,
                Err(e @ Error::Divergence(_)) => {
                    if let Some(out) = out {
                        self.dump_divergence(state, &e, out)?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            observe(&stats);
            let it = state.iteration;
            if it.is_multiple_of(self.cfg.eval.eval_interval) || it == t.total_iterations {
                let s = snapshot(state, &stats, self.cfg, self.materials)?;
                state.history.push(s.row.clone());
                if let Some(out) = out {
                    write_atomic(&out.join(METRICS_FILE), metrics_csv(&state.history).as_bytes())?;
                }
                snaps.push(s);
            }
            let ci = self.cfg.checkpoint_interval;
            if let Some(out) = out {
                if (ci > 0 && it.is_multiple_of(ci)) || it == t.total_iterations {
                    train_checkpoint(state, t)?.save(&checkpoint_dir(out, it))?;
                }
            }
        }
        Ok(snaps)
    }

    fn dump_divergence(&self, state: &TrainState, err: &Error, out: &Path) -> Result<()> {
        let report = serde_json::json!({
            "error": err.to_string(),
            "iteration": state.iteration,
            "gamma": state.gamma.gamma,
            "last_metrics": state.history.last(),
        });
        write_atomic(&out.join("divergence.json"), (serde_json::to_string_pretty(&report)? + "\n").as_bytes())?;
        train_checkpoint(state, &self.cfg.train)?.save(&out.join("checkpoints").join("diverged"))
    }
}

/// Self-description written next to the resolved config.
#[derive(Clone, Debug, Serialize)]
pub struct RunInfo {
    pub mode: String,
    pub checkpoint_format_version: u32,
    pub seed: u64,
    pub evaluator_seeds: [u64; 2],
    pub train_evaluator_checksum: String,
    pub metric_evaluator_checksum: String,
    pub train_evaluator_accuracy: f64,
    pub metric_evaluator_accuracy: f64,
}

fn write_run_header(cfg: &RunConfig, m: &Materials, out: &Path) -> Result<()> {
    write_atomic(&out.join("config.json"), cfg.to_json()?.as_bytes())?;
    let info = RunInfo {
        mode: cfg.train.mode_name().into(),
        checkpoint_format_version: checkpoint::FORMAT_VERSION,
        seed: cfg.train.seed,
        evaluator_seeds: [m.train_evaluator.provenance.seed, m.metric_evaluator.provenance.seed],
        train_evaluator_checksum: m.train_evaluator.checksum(),
        metric_evaluator_checksum: m.metric_evaluator.checksum(),
        train_evaluator_accuracy: m.train_evaluator.provenance.held_out_accuracy,
        metric_evaluator_accuracy: m.metric_evaluator.provenance.held_out_accuracy,
    };
    write_atomic(&out.join("run.json"), (serde_json::to_string_pretty(&info)? + "\n").as_bytes())
}

/// A full training run; with `out`, writes the run directory.
pub fn run_training(cfg: &RunConfig, m: &Materials, out: Option<&Path>) -> Result<(TrainState, Vec<Snapshot>)> {
    if cfg.mode == RunMode::ProbeOverfit {
        return Err(Error::Config("mode probe-overfit is run with the probe driver".into()));
    }
    if let Some(out) = out {
        fs::create_dir_all(out)?;
        write_run_header(cfg, m, out)?;
    }
    let tr = Trainer::new(cfg, m);
    let mut state = tr.start()?;
    let snaps = tr.advance(&mut state, cfg.train.total_iterations, out)?;
    Ok((state, snaps))
}

/// Continues from a saved checkpoint in `out`.
pub fn resume_training(cfg: &RunConfig, m: &Materials, ck: &Path, out: Option<&Path>) -> Result<(TrainState, Vec<Snapshot>)> {
    let (mut state, saved) = restore_train_state(Checkpoint::load(ck)?, &m.data)?;
    if saved != cfg.train {
        return Err(Error::Config("checkpoint was written under a different training configuration".into()));
    }
    let snaps = Trainer::new(cfg, m).advance(&mut state, cfg.train.total_iterations, out)?;
    Ok((state, snaps))
}

/// One logged point of the overfit probe.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeRow {
    pub run: String,
    pub iteration: u64,
    pub train_score: f64,
    pub held_out_score: f64,
    pub toy_fid: f64,
    pub ris_real_branch: u64,
}

impl ProbeRow {
    fn from_snapshot(run: &str, s: &Snapshot) -> Self {
        Self {
            run: run.into(),
            iteration: s.row.iteration,
            train_score: s.train_score,
            held_out_score: s.row.toy_is_mean,
            toy_fid: s.row.toy_fid,
            ris_real_branch: s.ris_real_branch,
        }
    }
}

pub const PROBE_HEADER: &str = "run,iteration,train_score,held_out_score,toy_fid,ris_real_branch";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeReport {
    /// Real-data score under the training evaluator (same sample count as the generated splits).
    pub real_train_score: f64,
    pub real_held_out_score: f64,
    pub rows: Vec<ProbeRow>,
}

impl ProbeReport {
    pub fn csv(&self) -> String {
        let mut s = format!("{PROBE_HEADER}\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.run, r.iteration, r.train_score, r.held_out_score, r.toy_fid, r.ris_real_branch
            ));
        }
        s
    }

    pub fn last(&self, run: &str) -> Option<&ProbeRow> {
        self.rows.iter().rev().find(|r| r.run == run)
    }
}

/// Score of the first `n_splits × split_size` real training images under `e`.
pub fn real_score(cfg: &RunConfig, data: &Dataset, e: &Evaluator<f32>) -> Result<f64> {
    let n = cfg.eval.n_splits * cfg.eval.split_size;
    if n > data.train.len() {
        return Err(Error::InsufficientSamples { needed: n, got: data.train.len() });
    }
    Ok(split_score(&data.train.images.slice_rows(0, n)?, e, cfg.eval.n_splits, cfg.eval.split_size)?.mean)
}

/// Runs the score-only objective alone.
pub fn score_only_run(cfg: &RunConfig, m: &Materials) -> Result<Vec<Snapshot>> {
    let mut c = cfg.clone();
    c.mode = RunMode::Scoregan;
    c.train.objective = Objective::ScoreOnly;
    let tr = Trainer::new(&c, m);
    let mut state = tr.start()?;
    tr.advance(&mut state, c.train.total_iterations, None)
}

/// The full ScoreGAN objective under the probe's configuration.
pub fn full_objective_config(cfg: &RunConfig) -> RunConfig {
    let mut c = cfg.clone();
    c.mode = RunMode::Scoregan;
    c.train.objective = Objective::Full;
    if c.train.delta == 0.0 {
        c.train.delta = TrainConfig::default().delta;
    }
    c
}

/// Score-only generator (a) against the full objective (b), both logged at
/// every evaluation point.
pub fn probe_overfit(cfg: &RunConfig, m: &Materials, out: Option<&Path>) -> Result<ProbeReport> {
    let a = score_only_run(cfg, m)?;
    let full = full_objective_config(cfg);
    let (_, b) = run_training(&full, m, None)?;
    let report = probe_report(cfg, m, &a, &b)?;
    if let Some(out) = out {
        fs::create_dir_all(out)?;
        write_atomic(&out.join("config.json"), cfg.to_json()?.as_bytes())?;
        write_atomic(&out.join("probe.csv"), report.csv().as_bytes())?;
    }
    Ok(report)
}

pub fn probe_report(cfg: &RunConfig, m: &Materials, score_only: &[Snapshot], full: &[Snapshot]) -> Result<ProbeReport> {
    let mut rows: Vec<ProbeRow> = score_only.iter().map(|s| ProbeRow::from_snapshot("score-only", s)).collect();
    rows.extend(full.iter().map(|s| ProbeRow::from_snapshot("scoregan", s)));
    Ok(ProbeReport {
        real_train_score: real_score(cfg, &m.data, &m.train_evaluator)?,
        real_held_out_score: real_score(cfg, &m.data, &m.metric_evaluator)?,
        rows,
    })
}
