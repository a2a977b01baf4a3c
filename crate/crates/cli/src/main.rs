//! `svcca`: compare activation dumps, replay training dynamics, check the
//! frequency-domain identities and run the toy experiments.
//!
//! Exit codes: 0 success, 1 a verification failed, 2 bad usage or input,
//! 3 the numerics failed.

mod verify;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use svcca_core::analysis::{self, CompareOptions, ConvView, Snapshot};
use svcca_core::convdft::DftMode;
use svcca_core::experiments::{self, Experiment, ExperimentConfig};
use svcca_core::report::{self, Format, Report, Table};
use svcca_core::svcca::Denominator;
use svcca_core::tensorio;
use svcca_core::toynet::{LayerActs, LayerRecord};
use svcca_core::{par, Error};

#[derive(Parser)]
#[command(name = "svcca", version, about = "SVCCA representation similarity toolkit")]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// SVCCA between two activation dumps.
    Compare {
        dump_a: PathBuf,
        dump_b: PathBuf,
        #[command(flatten)]
        opts: CompareArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Every checkpoint of a manifest against its final checkpoint.
    Dynamics {
        manifest: PathBuf,
        #[command(flatten)]
        opts: CompareArgs,
        /// A layer has converged once ρ̄ with its final self reaches this.
        #[arg(long, default_value_t = 0.9)]
        convergence: f64,
        /// Directory for the grid and convergence files.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, value_delimiter = ',', default_value = "csv,json,svg")]
        format: Vec<FormatArg>,
    },
    /// Check a frequency-domain identity on generated data.
    Verify {
        #[arg(value_enum)]
        theorem: verify::Theorem,
        /// Spatial size (or matrix size for dft-diagonal and kronecker).
        #[arg(long, default_value_t = 8)]
        n: usize,
        /// Channels per conv layer.
        #[arg(long, default_value_t = 2)]
        c: usize,
        /// Skip translation augmentation; results are then labelled
        /// approximate and not judged.
        #[arg(long)]
        no_augment: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random instances for dft-diagonal and kronecker.
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Run a named toy experiment end to end.
    Experiment {
        /// toy-regression, two-inits, freeze, projection-sweep, compression
        /// or sensitivity.
        name: String,
        /// TOML overrides of the experiment defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        out: OutArgs,
    },
}

#[derive(Args)]
struct CompareArgs {
    /// Fraction of singular-value mass kept before CCA.
    #[arg(long, default_value_t = 0.99)]
    threshold: f64,
    #[arg(long, value_enum, default_value = "retained")]
    denominator: DenominatorArg,
    /// How conv layers are compared.
    #[arg(long, value_enum, default_value = "auto")]
    mode: ModeArg,
    /// Whether the DFT path may claim exactness.
    #[arg(long, value_enum, default_value = "approximate")]
    dft_mode: DftModeArg,
}

impl CompareArgs {
    fn options(&self) -> CompareOptions {
        CompareOptions {
            threshold: self.threshold,
            denominator: match self.denominator {
                DenominatorArg::Retained => Denominator::Retained,
                DenominatorArg::LayerSize => Denominator::LayerSize,
            },
            conv_view: match self.mode {
                ModeArg::Auto => ConvView::Auto,
                ModeArg::SameLayer => ConvView::SameLayer,
                ModeArg::CrossLayer => ConvView::CrossLayer,
                ModeArg::Dft => ConvView::Dft,
            },
            dft_mode: match self.dft_mode {
                DftModeArg::Exact => DftMode::Exact,
                DftModeArg::Approximate => DftMode::Approximate,
            },
        }
    }
}

#[derive(Args)]
struct OutArgs {
    /// Write report files here; nothing is written without it.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "csv,json,svg")]
    format: Vec<FormatArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DenominatorArg {
    Retained,
    LayerSize,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Auto,
    SameLayer,
    CrossLayer,
    Dft,
}

#[derive(Clone, Copy, ValueEnum)]
enum DftModeArg {
    Exact,
    Approximate,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
    Svg,
}

fn formats(args: &[FormatArg]) -> Vec<Format> {
    args.iter()
        .map(|f| match f {
            FormatArg::Csv => Format::Csv,
            FormatArg::Json => Format::Json,
            FormatArg::Svg => Format::Svg,
        })
        .collect()
}

enum Failure {
    Verification,
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type CmdResult = Result<(), Failure>;

fn emit(out: &OutArgs, stem: &str, r: &dyn Report) -> svcca_core::Result<()> {
    if let Some(dir) = &out.out {
        for f in report::emit_report(dir, stem, r, &formats(&out.format))? {
            log::info!("wrote {}", f.display());
        }
    }
    Ok(())
}

fn load_layer(path: &Path) -> svcca_core::Result<(String, LayerActs)> {
    let dump = tensorio::read_dump(path)?;
    Ok((dump.layer_name.clone(), LayerActs::from_dump(&dump)?))
}

fn compare(a: &Path, b: &Path, args: &CompareArgs, out: &OutArgs) -> CmdResult {
    let (name_a, acts_a) = load_layer(a)?;
    let (name_b, acts_b) = load_layer(b)?;
    if acts_a.datapoints() != acts_b.datapoints() {
        return Err(Error::DatapointMismatch {
            left: acts_a.datapoints(),
            right: acts_b.datapoints(),
        }
        .into());
    }
    let c = analysis::compare_layers(&acts_a, &acts_b, name_a == name_b, &args.options())?;
    println!("{name_a} vs {name_b} ({})", c.method);
    println!("mean similarity: {:.6}", c.mean_similarity);
    println!("kept directions: {} of {}, {} of {}", c.kept.0, c.original.0, c.kept.1, c.original.1);
    if let Some(ob) = &c.off_block {
        println!("ignored off-block covariance: {:.3e} relative", ob.ratio);
    }
    let rho: Vec<String> = c.correlations.iter().map(|r| format!("{r:.6}")).collect();
    println!("correlations: {}", rho.join(" "));
    emit(out, "compare", &c)?;
    Ok(())
}

fn dynamics(manifest: &Path, args: &CompareArgs, convergence: f64, out: &Path, fmt: &[FormatArg]) -> CmdResult {
    let loaded = tensorio::load_manifest(manifest)?;
    let mut checkpoints = Vec::new();
    for cp in &loaded.manifest.checkpoints {
        let layers = cp
            .layers
            .iter()
            .map(|e| {
                let dump = loaded.read_layer(e)?;
                Ok(LayerRecord {
                    name: e.name.clone(),
                    acts: LayerActs::from_dump(&dump)?,
                })
            })
            .collect::<svcca_core::Result<Vec<_>>>()?;
        checkpoints.push((cp.step, layers));
    }
    let snaps: Vec<Snapshot> = checkpoints.iter().map(|(step, layers)| Snapshot { step: *step, layers }).collect();
    let grids = analysis::dynamics_grid(&snaps, &args.options())?;
    let curves = analysis::convergence_curves(&grids);
    let steps = analysis::convergence_steps(&curves, convergence);
    let fmt = formats(fmt);
    let mut written = Vec::new();
    for g in &grids {
        let stem = format!("grid_step{:08}", g.row_step.unwrap_or(0));
        written.extend(report::emit_report(out, &stem, g, &fmt)?);
    }
    written.extend(report::emit_report(out, "convergence", &report::curves_plot(&curves), &fmt)?);
    let mut t = Table::new(&["layer", "convergence_step"]);
    for (c, s) in curves.iter().zip(&steps) {
        t.push(vec![c.layer.clone(), s.map_or_else(|| "none".into(), |s| s.to_string())]);
        println!("{}: converged at {}", c.layer, s.map_or_else(|| "never".into(), |s| s.to_string()));
    }
    written.extend(report::emit_report(out, "convergence_steps", &t, &fmt)?);
    println!("bottom-up: {}", analysis::is_bottom_up(&steps));
    println!("wrote {} files to {}", written.len(), out.display());
    Ok(())
}

fn run_verify(theorem: verify::Theorem, p: &verify::Params, out: &OutArgs) -> CmdResult {
    let v = verify::run(theorem, p)?;
    let label = if v.approximate { " (approximate: not augmented)" } else { "" };
    let name = theorem.to_possible_value().map(|v| v.get_name().to_string()).unwrap_or_default();
    println!("{name} n={} c={}{label}", p.n, p.c);
    for line in v.lines() {
        println!("  {line}");
    }
    emit(out, &format!("verify_{name}"), &v.table())?;
    if v.passed() {
        println!("{}", if v.approximate { "REPORTED" } else { "PASS" });
        Ok(())
    } else {
        println!("FAIL");
        Err(Failure::Verification)
    }
}

fn experiment(name: &str, config: Option<&Path>, seed: Option<u64>, out: &OutArgs) -> CmdResult {
    let exp: Experiment = name.parse()?;
    let mut cfg = match config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let outcome = experiments::run(exp, &cfg)?;
    println!("{}", outcome.summary());
    if let Some(dir) = &out.out {
        let files = outcome.emit(dir)?;
        println!("wrote {} files to {}", files.len(), dir.display());
    }
    Ok(())
}

fn init_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("SVCCA_THREADS") else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::InvalidArgument(format!("SVCCA_THREADS must be a positive integer, got {v:?}")))?;
    if !par::init_global(n) {
        log::debug!("SVCCA_THREADS={n} ignored: thread pool already set up or parallelism disabled");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = init_threads().and_then(|()| match &cli.command {
        Command::Compare { dump_a, dump_b, opts, out } => compare(dump_a, dump_b, opts, out),
        Command::Dynamics {
            manifest,
            opts,
            convergence,
            out,
            format,
        } => dynamics(manifest, opts, *convergence, out, format),
        Command::Verify {
            theorem,
            n,
            c,
            no_augment,
            seed,
            trials,
            out,
        } => {
            let p = verify::Params {
                n: *n,
                c: *c,
                augment: !no_augment,
                seed: *seed,
                trials: *trials,
            };
            run_verify(*theorem, &p, out)
        }
        Command::Experiment { name, config, seed, out } => experiment(name, config.as_deref(), *seed, out),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification) => ExitCode::from(1),
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 2 } else { 3 })
        }
    }
}
