//! End-to-end experiments on the toy networks, driven by one TOML config.
//!
//! Every section of the config has defaults, so an empty file runs the
//! reference setup. Results carry their own report writers.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::analysis::{self, CompareOptions, CompressionPlan, ConvergenceCurve, SensitivityCurves, SimilarityGrid, Snapshot};
use crate::cca::{self, ActivationMatrix};
use crate::error::{Error, Result};
use crate::linalg::RealMatrix;
use crate::report::{self, Format, Report, Table};
use crate::svcca::{self, BaselineMode, Directions};
use crate::toynet::{
    self, ConvTaskSpec, FreezeSchedule, InputSpec, LayerSpec, Metrics, NetSpec, Network, Projection, Task, TrainConfig,
    TrainRun,
};

/// The named experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    ToyRegression,
    TwoInits,
    Freeze,
    ProjectionSweep,
    Compression,
    Sensitivity,
}

impl Experiment {
    pub const ALL: [Experiment; 6] = [
        Experiment::ToyRegression,
        Experiment::TwoInits,
        Experiment::Freeze,
        Experiment::ProjectionSweep,
        Experiment::Compression,
        Experiment::Sensitivity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::ToyRegression => "toy-regression",
            Experiment::TwoInits => "two-inits",
            Experiment::Freeze => "freeze",
            Experiment::ProjectionSweep => "projection-sweep",
            Experiment::Compression => "compression",
            Experiment::Sensitivity => "sensitivity",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL.into_iter().find(|e| e.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Experiment::ALL.iter().map(|e| e.name()).collect();
            Error::InvalidArgument(format!("unknown experiment {s:?} (expected one of {})", names.join(", ")))
        })
    }
}

/// Toy regression MLP and its training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressionConfig {
    pub task_seed: u64,
    pub hidden: usize,
    pub depth: usize,
    pub input_gain: f64,
    pub input_bias_std: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub checkpoint_every: u64,
    /// SVD truncation threshold for every comparison.
    pub threshold: f64,
    /// Canonical correlations closer than this are treated as tied when
    /// ordering directions.
    pub tie_tolerance: f64,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        RegressionConfig {
            task_seed: 0,
            hidden: 200,
            depth: 4,
            input_gain: 10.0,
            input_bias_std: 5.0,
            learning_rate: 0.05,
            batch_size: 16,
            steps: 8000,
            checkpoint_every: 500,
            threshold: svcca::DEFAULT_THRESHOLD,
            tie_tolerance: 0.01,
        }
    }
}

impl RegressionConfig {
    pub fn task(&self) -> Task {
        toynet::toy_regression_task(self.task_seed)
    }

    pub fn net_spec(&self, seed: u64) -> NetSpec {
        let mut spec = NetSpec::mlp(1, self.hidden, self.depth, 4, seed);
        spec.input_gain = Some(self.input_gain);
        spec.input_bias_std = self.input_bias_std;
        spec
    }

    pub fn train_config(&self, shuffle_seed: u64) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            checkpoint_every: self.checkpoint_every,
            shuffle_seed,
        }
    }

    pub fn compare_options(&self) -> CompareOptions {
        CompareOptions {
            threshold: self.threshold,
            ..CompareOptions::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsConfig {
    /// ρ̄ with the final representation that counts as converged.
    pub convergence_threshold: f64,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        DynamicsConfig {
            convergence_threshold: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FreezeConfig {
    /// How many of the lowest layers get a freeze step.
    pub frozen_layers: usize,
}

impl Default for FreezeConfig {
    fn default() -> Self {
        FreezeConfig { frozen_layers: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Representation index (0-based, bottom up) to project.
    pub layer: usize,
    pub ks: Vec<usize>,
    pub baseline_ks: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            layer: 3,
            ks: vec![2, 6, 15, 30, 200],
            baseline_ks: vec![5, 10, 20],
        }
    }
}

/// Where compression directions come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DirectionSource {
    /// SVCCA against the same layer of the second run.
    TwoRun,
    /// SVCCA against the network's own outputs.
    Logits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompressionConfig {
    /// Kept fraction `k/n` of each compressed layer's input width.
    pub ratio: f64,
    /// Number of top dense layers compressed, one after the other.
    pub layers: usize,
    pub source: DirectionSource,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        CompressionConfig {
            ratio: 0.35,
            layers: 2,
            source: DirectionSource::TwoRun,
        }
    }
}

/// Circular-conv classifier on the synthetic frequency task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensitivityConfig {
    pub size: usize,
    pub channels: usize,
    pub classes: usize,
    pub per_class: usize,
    pub noise: f64,
    pub augment: bool,
    pub width: usize,
    pub conv_layers: usize,
    pub kernel: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub threshold: f64,
    pub null_trials: usize,
    pub null_seed: u64,
    /// Classes expected to behave alike.
    pub similar: (usize, usize),
    pub distinct: usize,
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        SensitivityConfig {
            size: 8,
            channels: 2,
            classes: 3,
            per_class: 60,
            noise: 1.0,
            augment: false,
            width: 8,
            conv_layers: 3,
            kernel: 3,
            learning_rate: 0.05,
            batch_size: 16,
            steps: 2000,
            threshold: svcca::DEFAULT_THRESHOLD,
            null_trials: 100,
            null_seed: 7,
            similar: (0, 1),
            distinct: 2,
        }
    }
}

impl SensitivityConfig {
    pub fn task_spec(&self) -> ConvTaskSpec {
        ConvTaskSpec {
            size: self.size,
            channels: self.channels,
            classes: self.classes,
            per_class: self.per_class,
            noise: self.noise,
            augment: self.augment,
        }
    }

    /// `conv_layers × (conv, relu)`, global average pool, dense logits.
    pub fn net_spec(&self, seed: u64) -> NetSpec {
        let mut layers = Vec::new();
        for _ in 0..self.conv_layers {
            layers.push(LayerSpec::Conv {
                channels: self.width,
                kernel: self.kernel,
                stride: 1,
            });
            layers.push(LayerSpec::Relu);
        }
        layers.push(LayerSpec::GlobalAvgPool);
        layers.push(LayerSpec::Dense { out: self.classes });
        NetSpec {
            input: InputSpec::Image {
                size: self.size,
                channels: self.channels,
            },
            layers,
            seed,
            init_gain: std::f64::consts::SQRT_2,
            input_gain: None,
            input_bias_std: 0.0,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            checkpoint_every: self.steps,
            shuffle_seed: seed,
        }
    }
}

/// Full experiment config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub regression: RegressionConfig,
    pub dynamics: DynamicsConfig,
    pub freeze: FreezeConfig,
    pub sweep: SweepConfig,
    pub compression: CompressionConfig,
    pub sensitivity: SensitivityConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Two regression runs that differ only in initialisation: network seeds
/// `2·seed` and `2·seed + 1`, both with minibatch order `seed`.
pub fn train_pair(cfg: &RegressionConfig, seed: u64) -> Result<(Task, TrainRun, TrainRun)> {
    let task = cfg.task();
    let spec = cfg.net_spec(2 * seed);
    let (a, b) = toynet::two_inits_experiment(&spec, &task, &cfg.train_config(seed), (2 * seed, 2 * seed + 1))?;
    Ok((task, a, b))
}

fn matrix_of(run: &TrainRun, layer: usize) -> Result<ActivationMatrix> {
    let layers = &run.checkpoints.last().layers;
    layers
        .get(layer)
        .ok_or_else(|| Error::InvalidArgument(format!("layer index {layer} out of range (network has {})", layers.len())))?
        .acts
        .matrix()
}

/// `h ↦ μ + M_k(h − μ)` for the top `k` of `directions` over `acts`.
pub fn topk_projection(acts: &ActivationMatrix, directions: &Directions, k: usize) -> Result<Projection> {
    let cov = svcca::neuron_covariance(acts)?;
    Projection::about_mean(acts, directions.subspace_map(k, &cov)?)
}

fn fmt_f(v: f64) -> String {
    format!("{v}")
}

fn write_all(out: &Path, stem: &str, r: &dyn Report) -> Result<Vec<PathBuf>> {
    report::emit_report(out, stem, r, &[Format::Csv, Format::Json, Format::Svg])
}

/// Checkpointed training of one regression MLP and its layer dynamics.
pub struct DynamicsResult {
    pub run: TrainRun,
    pub grids: Vec<SimilarityGrid>,
    pub curves: Vec<ConvergenceCurve>,
    /// First step each layer reaches the convergence threshold, bottom up.
    pub convergence_steps: Vec<Option<u64>>,
    pub threshold: f64,
}

/// Layer-by-layer dynamics of an already trained run.
pub fn dynamics_of(run: TrainRun, opts: &CompareOptions, convergence_threshold: f64) -> Result<DynamicsResult> {
    let snaps: Vec<Snapshot> = run
        .checkpoints
        .checkpoints
        .iter()
        .map(|c| Snapshot {
            step: c.step,
            layers: &c.layers,
        })
        .collect();
    let grids = analysis::dynamics_grid(&snaps, opts)?;
    let curves = analysis::convergence_curves(&grids);
    let convergence_steps = analysis::convergence_steps(&curves, convergence_threshold);
    Ok(DynamicsResult {
        run,
        grids,
        curves,
        convergence_steps,
        threshold: convergence_threshold,
    })
}

pub fn toy_regression(cfg: &ExperimentConfig) -> Result<DynamicsResult> {
    let r = &cfg.regression;
    let run = toynet::train(&r.net_spec(2 * cfg.seed), &r.task(), &r.train_config(cfg.seed), None)?;
    dynamics_of(run, &r.compare_options(), cfg.dynamics.convergence_threshold)
}

impl DynamicsResult {
    pub fn summary(&self) -> String {
        let mut s = format!(
            "final loss: train {:.6}, probe {:.6}\nconvergence steps (rho >= {}):",
            self.run.train.loss, self.run.probe.loss, self.threshold
        );
        for (c, step) in self.curves.iter().zip(&self.convergence_steps) {
            let step = step.map_or("never".to_string(), |v| v.to_string());
            s += &format!(
                "\n  {}: {step} (start {:.4}, decreasing pairs {:.2})",
                c.layer,
                c.values.first().copied().unwrap_or(f64::NAN),
                c.decrease_fraction()
            );
        }
        s += &format!("\nbottom-up: {}", analysis::is_bottom_up(&self.convergence_steps));
        s
    }

    pub fn emit(&self, out: &Path) -> Result<Vec<PathBuf>> {
        self.run.checkpoints.write(&out.join("dumps"))?;
        let mut files = vec![out.join("dumps").join("manifest.json")];
        for g in &self.grids {
            files.extend(write_all(out, &format!("grid_step{:08}", g.row_step.unwrap_or(0)), g)?);
        }
        files.extend(write_all(out, "convergence", &report::curves_plot(&self.curves))?);
        let mut t = Table::new(&["step", "probe_loss"]);
        for c in &self.run.checkpoints.checkpoints {
            t.push(vec![c.step.to_string(), fmt_f(c.probe.loss)]);
        }
        files.extend(write_all(out, "losses", &t)?);
        Ok(files)
    }
}

/// Two inits of the regression MLP compared layer by layer.
pub struct TwoInitsResult {
    pub grid: SimilarityGrid,
    /// Canonical correlations of the penultimate layers.
    pub correlations: Vec<f64>,
    /// Largest |Pearson r| between any neuron of one run and any of the
    /// other, penultimate layers.
    pub max_neuron_correlation: f64,
    /// Per layer: ρ̄(untrained A, trained B) and ρ̄(trained A, trained B).
    pub untrained_vs_trained: Vec<(f64, f64)>,
    pub losses: (f64, f64),
}

/// Largest |Pearson r| between a row of `a` and a row of `b`.
pub fn max_neuron_correlation(a: &RealMatrix, b: &RealMatrix) -> f64 {
    let rows = |m: &RealMatrix| -> Vec<Vec<f64>> { m.row_iter().map(|r| r.iter().copied().collect()).collect() };
    let (ra, rb) = (rows(a), rows(b));
    ra.iter()
        .flat_map(|x| rb.iter().map(move |y| cca::pearson(x, y).abs()))
        .filter(|v| v.is_finite())
        .fold(0.0, f64::max)
}

pub fn two_inits_of(cfg: &RegressionConfig, a: &TrainRun, b: &TrainRun) -> Result<TwoInitsResult> {
    let opts = cfg.compare_options();
    let (la, lb) = (&a.checkpoints.last().layers, &b.checkpoints.last().layers);
    let grid = analysis::cross_model_grid(la, lb, &opts)?;
    let pen = la.len().checked_sub(2).ok_or_else(|| Error::InvalidArgument("network has no hidden layer".into()))?;
    let (xa, xb) = (matrix_of(a, pen)?, matrix_of(b, pen)?);
    let r = svcca::svcca(&xa, &xb, cfg.threshold)?;
    let a0 = &a.checkpoints.checkpoints[0].layers;
    let untrained_vs_trained = (0..la.len())
        .map(|l| {
            let before = analysis::compare_layers(&a0[l].acts, &lb[l].acts, false, &opts)?.mean_similarity;
            Ok((before, grid.values[l][l]))
        })
        .collect::<Result<_>>()?;
    Ok(TwoInitsResult {
        grid,
        correlations: svcca::Similarity::correlations(&r).to_vec(),
        max_neuron_correlation: max_neuron_correlation(xa.values(), xb.values()),
        untrained_vs_trained,
        losses: (a.probe.loss, b.probe.loss),
    })
}

pub fn two_inits(cfg: &ExperimentConfig) -> Result<TwoInitsResult> {
    let (_, a, b) = train_pair(&cfg.regression, cfg.seed)?;
    two_inits_of(&cfg.regression, &a, &b)
}

impl TwoInitsResult {
    pub fn summary(&self) -> String {
        let mut s = format!(
            "probe losses: {:.6}, {:.6}\npenultimate: top rho {:.4}, max single-neuron |r| {:.4}\nlayer  untrained-vs-trained  trained-vs-trained",
            self.losses.0,
            self.losses.1,
            self.correlations.first().copied().unwrap_or(0.0),
            self.max_neuron_correlation
        );
        for (name, (u, t)) in self.grid.rows.iter().zip(&self.untrained_vs_trained) {
            s += &format!("\n{name}  {u:.4}  {t:.4}");
        }
        s
    }

    pub fn emit(&self, out: &Path) -> Result<Vec<PathBuf>> {
        let mut files = write_all(out, "cross_model_grid", &self.grid)?;
        let mut t = Table::new(&["layer", "untrained_vs_trained", "trained_vs_trained"]);
        for (name, (u, v)) in self.grid.rows.iter().zip(&self.untrained_vs_trained) {
            t.push(vec![name.clone(), fmt_f(*u), fmt_f(*v)]);
        }
        files.extend(write_all(out, "init_similarity", &t)?);
        Ok(files)
    }
}

/// Plain versus Freeze Training on the regression MLP.
pub struct FreezeResult {
    pub schedule: FreezeSchedule,
    pub baseline: Metrics,
    pub frozen: Metrics,
    /// Every frozen layer is bit-identical across all checkpoints from its
    /// freeze step on.
    pub weights_identical: bool,
    pub skipped_flops: u64,
    pub predicted_skipped_flops: u64,
    pub total_flops: (u64, u64),
}

/// Whether each layer's parameters stay bit-identical at every checkpoint
/// from its freeze step on.
pub fn frozen_layers_identical(run: &TrainRun, schedule: &FreezeSchedule) -> bool {
    let cps = &run.checkpoints.checkpoints;
    schedule.freeze_steps.iter().enumerate().all(|(p, s)| {
        let Some(s) = *s else { return true };
        let after: Vec<_> = cps.iter().filter(|c| c.step >= s).collect();
        after.windows(2).all(|w| {
            let (x, y) = (&w[0].params[p], &w[1].params[p]);
            let bits = |v: &[f64]| v.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            bits(&x.weights) == bits(&y.weights) && bits(&x.bias) == bits(&y.bias)
        })
    })
}

pub fn freeze(cfg: &ExperimentConfig) -> Result<FreezeResult> {
    let r = &cfg.regression;
    let task = r.task();
    let spec = r.net_spec(2 * cfg.seed);
    let train_cfg = r.train_config(cfg.seed);
    let depth = Network::new(&spec)?.depth();
    let schedule = FreezeSchedule::linear(depth, cfg.freeze.frozen_layers, r.steps);
    let mut with_freeze_checkpoints = train_cfg.clone();
    // Checkpoint exactly at every freeze step as well.
    with_freeze_checkpoints.checkpoint_every = schedule
        .freeze_steps
        .iter()
        .flatten()
        .fold(r.checkpoint_every, |g, &s| gcd(g, s.max(1)));
    let baseline = toynet::train(&spec, &task, &train_cfg, None)?;
    let frozen = toynet::train(&spec, &task, &with_freeze_checkpoints, Some(&schedule))?;
    let total = |f: &toynet::TrainFlops| f.forward + f.backward + f.update;
    Ok(FreezeResult {
        weights_identical: frozen_layers_identical(&frozen, &schedule),
        skipped_flops: frozen.flops.skipped,
        predicted_skipped_flops: toynet::predicted_skipped_flops(&frozen.network, &schedule, r.steps, r.batch_size),
        total_flops: (total(&baseline.flops), total(&frozen.flops)),
        baseline: baseline.probe,
        frozen: frozen.probe,
        schedule,
    })
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl FreezeResult {
    pub fn summary(&self) -> String {
        format!(
            "freeze steps: {:?}\nprobe loss: baseline {:.6}, freeze training {:.6}\nfrozen weights bit-identical: {}\nskipped flops: counted {}, predicted {}\ntraining flops: baseline {}, freeze training {}",
            self.schedule.freeze_steps,
            self.baseline.loss,
            self.frozen.loss,
            self.weights_identical,
            self.skipped_flops,
            self.predicted_skipped_flops,
            self.total_flops.0,
            self.total_flops.1
        )
    }

    pub fn emit(&self, out: &Path) -> Result<Vec<PathBuf>> {
        let mut t = Table::new(&["quantity", "value"]);
        let rows = [
            ("baseline_probe_loss", fmt_f(self.baseline.loss)),
            ("freeze_probe_loss", fmt_f(self.frozen.loss)),
            ("weights_identical", self.weights_identical.to_string()),
            ("skipped_flops", self.skipped_flops.to_string()),
            ("predicted_skipped_flops", self.predicted_skipped_flops.to_string()),
            ("baseline_flops", self.total_flops.0.to_string()),
            ("freeze_flops", self.total_flops.1.to_string()),
        ];
        for (k, v) in rows {
            t.push(vec![k.to_string(), v]);
        }
        write_all(out, "freeze", &t)
    }
}

/// Loss with one representation projected onto top-k directions.
pub struct SweepResult {
    pub layer: String,
    pub full_loss: f64,
    /// `(k, loss)` for SVCCA directions.
    pub sweep: Vec<(usize, f64)>,
    /// `(k, svcca, random neurons, max-activation neurons)`.
    pub baselines: Vec<(usize, f64, f64, f64)>,
    /// `(k, loss)` for SVCCA directions in plain correlation order.
    pub plain_order: Vec<(usize, f64)>,
}

pub fn projection_sweep_of(cfg: &ExperimentConfig, task: &Task, a: &TrainRun, b: &TrainRun) -> Result<SweepResult> {
    let (r, s) = (&cfg.regression, &cfg.sweep);
    let (xa, xb) = (matrix_of(a, s.layer)?, matrix_of(b, s.layer)?);
    let ranked = analysis::svcca_directions(&xa, &xb, r.threshold, r.tie_tolerance)?;
    let plain = analysis::svcca_directions(&xa, &xb, r.threshold, 0.0)?;
    let loss = |d: &Directions, k: usize| -> Result<f64> {
        Ok(toynet::eval_with_projection(&a.network, s.layer, &topk_projection(&xa, d, k)?, &task.probe)?.loss)
    };
    let sweep = s.ks.iter().map(|&k| Ok((k, loss(&ranked, k)?))).collect::<Result<_>>()?;
    let mut baselines = Vec::new();
    let mut plain_order = Vec::new();
    for &k in &s.baseline_ks {
        let neurons = |mode| -> Result<f64> {
            let idx = svcca::select_neurons(&xa, k, mode, cfg.seed)?;
            loss(&Directions::neurons(&idx, xa.neurons()), k)
        };
        baselines.push((k, loss(&ranked, k)?, neurons(BaselineMode::Random)?, neurons(BaselineMode::MaxActivation)?));
        plain_order.push((k, loss(&plain, k)?));
    }
    Ok(SweepResult {
        layer: a.checkpoints.last().layers[s.layer].name.clone(),
        full_loss: toynet::evaluate(&a.network, &task.probe).loss,
        sweep,
        baselines,
        plain_order,
    })
}

pub fn projection_sweep(cfg: &ExperimentConfig) -> Result<SweepResult> {
    let (task, a, b) = train_pair(&cfg.regression, cfg.seed)?;
    projection_sweep_of(cfg, &task, &a, &b)
}

impl SweepResult {
    pub fn summary(&self) -> String {
        let mut s = format!("layer {}, full-width probe loss {:.6}\n  k  svcca", self.layer, self.full_loss);
        for (k, l) in &self.sweep {
            s += &format!("\n{k:>3}  {l:.6}");
        }
        s += "\n  k  svcca  random  max-activation  svcca-plain-order";
        for ((k, sv, r, m), (_, p)) in self.baselines.iter().zip(&self.plain_order) {
            s += &format!("\n{k:>3}  {sv:.6}  {r:.6}  {m:.6}  {p:.6}");
        }
        s
    }

    pub fn emit(&self, out: &Path) -> Result<Vec<PathBuf>> {
        let mut t = Table::new(&["k", "svcca_loss"]);
        for (k, l) in &self.sweep {
            t.push(vec![k.to_string(), fmt_f(*l)]);
        }
        let mut files = write_all(out, "projection_sweep", &t)?;
        let mut b = Table::new(&["k", "svcca", "random", "max_activation", "svcca_plain_order"]);
        for ((k, sv, r, m), (_, p)) in self.baselines.iter().zip(&self.plain_order) {
            b.push(vec![k.to_string(), fmt_f(*sv), fmt_f(*r), fmt_f(*m), fmt_f(*p)]);
        }
        files.extend(write_all(out, "baselines", &b)?);
        let plot = report::LinePlot {
            title: format!("loss after projecting {}", self.layer),
            x_label: "k".into(),
            x: self.baselines.iter().map(|b| b.0 as f64).collect(),
            series: vec![
                ("svcca".into(), self.baselines.iter().map(|b| b.1).collect()),
                ("random".into(), self.baselines.iter().map(|b| b.2).collect()),
                ("max-activation".into(), self.baselines.iter().map(|b| b.3).collect()),
            ],
        };
        files.extend(report::emit_report(out, "baselines_plot", &plot, &[Format::Svg])?);
        Ok(files)
    }
}

/// Consecutive compression of the top dense layers.
pub struct CompressionResult {
    pub plans: Vec<CompressionPlan>,
    pub full_loss: f64,
    pub compressed_loss: f64,
    /// Largest gap between each plan's output and `(W·Pᵀ)(P·x) + b′`
    /// computed directly, over the probe inputs of that layer.
    pub algebraic_residual: f64,
    pub source: DirectionSource,
}

pub fn compression_of(cfg: &ExperimentConfig, task: &Task, a: &TrainRun, b: &TrainRun) -> Result<CompressionResult> {
    let (r, c) = (&cfg.regression, &cfg.compression);
    let net = &a.network;
    let depth = net.depth();
    if c.layers == 0 || c.layers >= depth {
        return Err(Error::Config(format!("can compress 1..{} layers, asked for {}", depth - 1, c.layers)));
    }
    let mut plans = Vec::new();
    let mut projections: Vec<(usize, Projection)> = Vec::new();
    let mut residual: f64 = 0.0;
    for p in depth - c.layers..depth {
        let tap = p - 1;
        let (w, bias) = net
            .dense_layer(p)
            .ok_or_else(|| Error::Config(format!("layer {} is not dense", p + 1)))?;
        let refs: Vec<(usize, &Projection)> = projections.iter().map(|(t, q)| (*t, q)).collect();
        let reps = net.representations_projected(&task.probe.inputs, &refs);
        let input = ActivationMatrix::new(reps[tap].clone())?;
        let other = match c.source {
            DirectionSource::TwoRun => matrix_of(b, tap)?,
            DirectionSource::Logits => ActivationMatrix::new(reps[depth - 1].clone())?,
        };
        let dirs = analysis::svcca_directions(&input, &other, r.threshold, r.tie_tolerance)?;
        let k = ((c.ratio * w.ncols() as f64).round() as usize).clamp(1, w.ncols());
        let plan = analysis::build_compression_plan(&format!("layer{}", p + 1), w, bias, &input, &dirs, k)?;
        let mut direct = (w * plan.projection.transpose()) * (&plan.projection * input.values());
        for mut col in direct.column_iter_mut() {
            col += &plan.bias;
        }
        residual = residual.max((plan.apply(input.values()) - direct).abs().max());
        projections.push((tap, plan.input_projection()));
        plans.push(plan);
    }
    let refs: Vec<(usize, &Projection)> = projections.iter().map(|(t, q)| (*t, q)).collect();
    Ok(CompressionResult {
        full_loss: toynet::evaluate(net, &task.probe).loss,
        compressed_loss: toynet::eval_with_projections(net, &refs, &task.probe)?.loss,
        algebraic_residual: residual,
        plans,
        source: c.source,
    })
}

pub fn compression(cfg: &ExperimentConfig) -> Result<CompressionResult> {
    let (task, a, b) = train_pair(&cfg.regression, cfg.seed)?;
    compression_of(cfg, &task, &a, &b)
}

impl CompressionResult {
    pub fn summary(&self) -> String {
        let mut s = format!(
            "directions: {:?}\nprobe loss: full {:.6}, compressed {:.6} (ratio {:.4})\nplan vs algebraic form: max gap {:.3e}",
            self.source,
            self.full_loss,
            self.compressed_loss,
            self.compressed_loss / self.full_loss,
            self.algebraic_residual
        );
        for p in &self.plans {
            s += &format!(
                "\n{}: k {} of {}, params {} -> {}",
                p.layer, p.k, p.n, p.params_original, p.params_folded
            );
        }
        s
    }

    pub fn emit(&self, out: &Path) -> Result<Vec<PathBuf>> {
        let mut files = write_all(out, "compression_plans", &report::Plans(&self.plans))?;
        let mut t = Table::new(&["full_loss", "compressed_loss", "algebraic_residual"]);
        t.push(vec![fmt_f(self.full_loss), fmt_f(self.compressed_loss), fmt_f(self.algebraic_residual)]);
        files.extend(write_all(out, "compression", &t)?);
        Ok(files)
    }
}

/// Per-class sensitivity curves of a trained conv classifier.
pub struct SensitivityResult {
    pub train: Metrics,
    pub probe: Metrics,
    pub curves: SensitivityCurves,
    pub similar: (usize, usize),
    pub distinct: usize,
}

impl SensitivityResult {
    /// Distance between the similar pair's curves.
    pub fn similar_distance(&self) -> f64 {
        self.curves.distance(self.similar.0, self.similar.1)
    }

    /// Distances from each of the similar pair to the distinct class.
    pub fn distinct_distances(&self) -> (f64, f64) {
        (
            self.curves.distance(self.similar.0, self.distinct),
            self.curves.distance(self.similar.1, self.distinct),
        )
    }

    pub fn summary(&self) -> String {
        let (d0, d1) = self.distinct_distances();
        let mut s = format!(
            "train accuracy {:.4}, probe accuracy {:.4}\ncurve distance: similar pair {:.4}, to distinct class {:.4} / {:.4}",
            self.train.accuracy.unwrap_or(0.0),
            self.probe.accuracy.unwrap_or(0.0),
            self.similar_distance(),
            d0,
            d1
        );
        for (l, name) in self.curves.layers.iter().enumerate() {
            let vals: Vec<String> = self.curves.values.iter().map(|c| format!("{:.4}", c[l])).collect();
            s += &format!("\n{name}: {} (null p95 {:.4})", vals.join(" "), self.curves.null_p95[l]);
        }
        s
    }

    pub fn emit(&self, out: &Path) -> Result<Vec<PathBuf>> {
        write_all(out, "sensitivity", &self.curves)
    }
}

pub fn sensitivity(cfg: &ExperimentConfig) -> Result<SensitivityResult> {
    let s = &cfg.sensitivity;
    let (a, b) = s.similar;
    if a.max(b).max(s.distinct) >= s.classes || a == b || a == s.distinct || b == s.distinct {
        return Err(Error::Config("similar and distinct classes must be three different classes".into()));
    }
    let task = toynet::synthetic_conv_task(&s.task_spec(), cfg.seed)?;
    let run = toynet::train(&s.net_spec(cfg.seed), &task, &s.train_config(cfg.seed), None)?;
    let last = run.checkpoints.last();
    let logits = ActivationMatrix::new(run.network.predict(&task.probe.inputs))?;
    let hidden = &last.layers[..last.layers.len() - 1];
    let curves = analysis::class_sensitivity(hidden, &logits, s.threshold, s.null_trials, s.null_seed)?;
    Ok(SensitivityResult {
        train: run.train,
        probe: run.probe,
        curves,
        similar: s.similar,
        distinct: s.distinct,
    })
}

/// Result of any named experiment.
pub enum Outcome {
    Dynamics(Box<DynamicsResult>),
    TwoInits(TwoInitsResult),
    Freeze(FreezeResult),
    Sweep(SweepResult),
    Compression(CompressionResult),
    Sensitivity(SensitivityResult),
}

impl Outcome {
    pub fn summary(&self) -> String {
        match self {
            Outcome::Dynamics(r) => r.summary(),
            Outcome::TwoInits(r) => r.summary(),
            Outcome::Freeze(r) => r.summary(),
            Outcome::Sweep(r) => r.summary(),
            Outcome::Compression(r) => r.summary(),
            Outcome::Sensitivity(r) => r.summary(),
        }
    }

    /// Writes the experiment's reports (and dumps) under `out`.
    pub fn emit(&self, out: &Path) -> Result<Vec<PathBuf>> {
        match self {
            Outcome::Dynamics(r) => r.emit(out),
            Outcome::TwoInits(r) => r.emit(out),
            Outcome::Freeze(r) => r.emit(out),
            Outcome::Sweep(r) => r.emit(out),
            Outcome::Compression(r) => r.emit(out),
            Outcome::Sensitivity(r) => r.emit(out),
        }
    }
}

pub fn run(experiment: Experiment, cfg: &ExperimentConfig) -> Result<Outcome> {
    log::info!("running {experiment} with seed {}", cfg.seed);
    Ok(match experiment {
        Experiment::ToyRegression => Outcome::Dynamics(Box::new(toy_regression(cfg)?)),
        Experiment::TwoInits => Outcome::TwoInits(two_inits(cfg)?),
        Experiment::Freeze => Outcome::Freeze(freeze(cfg)?),
        Experiment::ProjectionSweep => Outcome::Sweep(projection_sweep(cfg)?),
        Experiment::Compression => Outcome::Compression(compression(cfg)?),
        Experiment::Sensitivity => Outcome::Sensitivity(sensitivity(cfg)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for e in Experiment::ALL {
            assert_eq!(e.name().parse::<Experiment>().unwrap(), e);
        }
        assert!("nope".parse::<Experiment>().is_err());
    }

    #[test]
    fn config_defaults_and_overrides() {
        let empty = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(empty, ExperimentConfig::default());
        let c = ExperimentConfig::from_toml("seed = 3\n[regression]\nsteps = 10\n[compression]\nsource = \"logits\"\n").unwrap();
        assert_eq!((c.seed, c.regression.steps, c.regression.hidden), (3, 10, 200));
        assert_eq!(c.compression.source, DirectionSource::Logits);
        assert!(ExperimentConfig::from_toml("[regression]\nwidth = 3\n").is_err());
        let back = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    fn small() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.regression.hidden = 24;
        c.regression.steps = 60;
        c.regression.checkpoint_every = 20;
        c.sweep.ks = vec![2, 24];
        c.sweep.baseline_ks = vec![3];
        c.sensitivity.steps = 30;
        c.sensitivity.per_class = 6;
        c.sensitivity.null_trials = 5;
        c
    }

    #[test]
    fn every_experiment_runs_small() {
        let cfg = small();
        let dir = tempfile::tempdir().unwrap();
        for e in Experiment::ALL {
            let out = run(e, &cfg).unwrap();
            assert!(!out.summary().is_empty());
            let files = out.emit(&dir.path().join(e.name())).unwrap();
            assert!(files.iter().all(|f| f.starts_with(dir.path()) && f.exists()), "{e}");
        }
    }

    #[test]
    fn freeze_counts_match_prediction() {
        let f = freeze(&small()).unwrap();
        assert!(f.weights_identical);
        assert_eq!(f.skipped_flops, f.predicted_skipped_flops);
        assert!(f.skipped_flops > 0);
    }

    #[test]
    fn full_width_projection_is_exact() {
        let cfg = small();
        let s = projection_sweep(&cfg).unwrap();
        let (_, l) = s.sweep.last().unwrap();
        assert!((l - s.full_loss).abs() <= 1e-10 * s.full_loss.max(1.0));
    }
}
