use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::Value;

use sigmoe_core::attention::equivalence_check;
use sigmoe_core::estimation::{fit, synthesize_dataset, Dataset, FitConfig, FitResult, SynthesisConfig};
use sigmoe_core::experiment::{
    check_slopes, emit_outputs, plot_records, run_sweep, ExperimentConfig, Scenario,
};
use sigmoe_core::identifiability::{probe_with_threshold, ProbeMode, DEFAULT_THRESHOLD};
use sigmoe_core::voronoi::{compute_loss, LossKind};
use sigmoe_core::{Activation, CounterRng, ExpertFamily, ExpertSpec, MixingMeasure, ScoreKind, Stream};

const ATTN_THRESHOLD: f64 = 1e-10;

#[derive(Parser)]
#[command(name = "sigmoe", version, about = "Quadratic-gated mixture-of-experts experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare attention rows with their mixture-of-experts form.
    AttnCheck {
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 5)]
        max_n: usize,
        #[arg(long, default_value_t = 4)]
        max_d: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Exit with status 2 when the residual exceeds the threshold.
        #[arg(long)]
        check: bool,
    },
    /// Synthesize a dataset from a JSON synthesis config.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Least-squares fit of a dataset.
    Fit {
        #[arg(long)]
        data: PathBuf,
        /// Synthesis sidecar; defaults to the CSV path with a .json extension.
        #[arg(long)]
        sidecar: Option<PathBuf>,
        /// Fit settings; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Voronoi loss between a fitted and a reference measure.
    Loss {
        /// Fit result or mixing measure JSON.
        #[arg(long)]
        fitted: PathBuf,
        /// Mixing measure or synthesis config JSON.
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long)]
        r: Option<f64>,
    },
    /// Rank test of a derivative family at random atoms.
    IdentProbe {
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long, value_enum)]
        expert: ExpertArg,
        #[arg(long, value_enum, default_value = "full")]
        score: ScoreArg,
        #[arg(long, default_value_t = 2)]
        atoms: usize,
        #[arg(long, default_value_t = 2)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
    },
    /// Sample-size sweep of a scenario.
    Sweep {
        #[arg(long, value_enum)]
        scenario: ScenarioArg,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads; all cores when omitted.
        #[arg(long)]
        jobs: Option<usize>,
        /// Exit with status 2 when a slope misses its target interval.
        #[arg(long)]
        check: bool,
    },
    /// Redraw the chart of a records file.
    Plot {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    L1,
    L2r,
    L3,
    L4,
    L5,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Strong,
    Weak,
    PartialStrong,
    PartialWeak,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExpertArg {
    Linear,
    Poly2,
    Relu,
    Gelu,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScoreArg {
    Full,
    Partial,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    Fig1a,
    Fig1b,
    Fig2a,
    Fig2b,
    Custom,
}

impl From<KindArg> for LossKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::L1 => LossKind::L1,
            KindArg::L2r => LossKind::L2r,
            KindArg::L3 => LossKind::L3,
            KindArg::L4 => LossKind::L4,
            KindArg::L5 => LossKind::L5,
        }
    }
}

impl From<ModeArg> for ProbeMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Strong => ProbeMode::Strong,
            ModeArg::Weak => ProbeMode::Weak,
            ModeArg::PartialStrong => ProbeMode::PartialStrong,
            ModeArg::PartialWeak => ProbeMode::PartialWeak,
        }
    }
}

impl From<ExpertArg> for ExpertFamily {
    fn from(e: ExpertArg) -> Self {
        match e {
            ExpertArg::Linear => ExpertFamily::Linear,
            ExpertArg::Poly2 => ExpertFamily::Polynomial { degree: 2 },
            ExpertArg::Relu => ExpertFamily::TwoLayer {
                activation: Activation::Relu,
            },
            ExpertArg::Gelu => ExpertFamily::TwoLayer {
                activation: Activation::Gelu,
            },
        }
    }
}

impl From<ScoreArg> for ScoreKind {
    fn from(s: ScoreArg) -> Self {
        match s {
            ScoreArg::Full => ScoreKind::FullyQuadratic,
            ScoreArg::Partial => ScoreKind::PartiallyQuadratic,
        }
    }
}

impl From<ScenarioArg> for Scenario {
    fn from(s: ScenarioArg) -> Self {
        match s {
            ScenarioArg::Fig1a => Scenario::Fig1a,
            ScenarioArg::Fig1b => Scenario::Fig1b,
            ScenarioArg::Fig2a => Scenario::Fig2a,
            ScenarioArg::Fig2b => Scenario::Fig2b,
            ScenarioArg::Custom => Scenario::Custom,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::AttnCheck {
            trials,
            max_n,
            max_d,
            seed,
            check,
        } => {
            let report = equivalence_check(trials, max_n, max_d, seed)?;
            let residual = report.max_residual();
            let pass = residual <= ATTN_THRESHOLD;
            println!(
                "trials {trials} sigmoid {:.3e} softmax {:.3e}",
                report.max_residual_sigmoid, report.max_residual_softmax
            );
            println!("max residual {residual:.3e} {}", if pass { "PASS" } else { "FAIL" });
            Ok(verdict_code(pass, check))
        }
        Command::Synth { config, out, seed } => {
            let mut cfg: SynthesisConfig = read_json(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let data = synthesize_dataset(&cfg)?;
            data.write(&out)?;
            log::info!("wrote {} rows to {}", data.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Fit {
            data,
            sidecar,
            config,
            out,
        } => {
            let sidecar = sidecar.unwrap_or_else(|| Dataset::sidecar_path(&data));
            let dataset = Dataset::read(&data, &sidecar)?;
            let cfg: FitConfig = match config {
                Some(path) => read_json(&path)?,
                None => FitConfig::default(),
            };
            let result = fit(&dataset, &cfg)?;
            write_json(&out, &result)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Loss {
            fitted,
            truth,
            kind,
            r,
        } => {
            let fitted = read_measure(&fitted)?;
            let truth = read_measure(&truth)?;
            let report = compute_loss(&fitted, &truth, kind.into(), r)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::IdentProbe {
            mode,
            expert,
            score,
            atoms,
            dim,
            seed,
            threshold,
        } => {
            let expert = ExpertSpec::new(expert.into(), dim)?;
            let mut rng = CounterRng::new(seed, Stream::Probe, 0);
            let report = probe_with_threshold(mode.into(), expert, score.into(), atoms, threshold, &mut rng)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep {
            scenario,
            config,
            out,
            jobs,
            check,
        } => {
            let scenario: Scenario = scenario.into();
            let mut cfg = match config {
                Some(path) => read_json::<ExperimentConfig>(&path)?,
                None => ExperimentConfig::for_scenario(scenario),
            };
            cfg.scenario = scenario;
            let pool = rayon_pool(jobs);
            let result = pool.install(|| run_sweep(&cfg))?;
            let files = emit_outputs(&result, &out)?;
            for c in &result.curves {
                match c.slope {
                    Some(s) => println!("{}: slope {:.3} (stderr {:.3})", c.name(), s.slope, s.stderr),
                    None => println!("{}: slope n/a", c.name()),
                }
            }
            println!("wrote {}", files.records.display());
            let checks = check_slopes(scenario, &result.curves);
            for c in &checks {
                let value = c.value.map_or("n/a".to_string(), |v| format!("{v:.3}"));
                println!(
                    "{} {value} in [{}, {}] {}",
                    c.what,
                    c.lo,
                    c.hi,
                    if c.pass() { "PASS" } else { "FAIL" }
                );
            }
            Ok(verdict_code(checks.iter().all(|c| c.pass()), check))
        }
        Command::Plot { records, out } => {
            let curves = plot_records(&records, &out)?;
            println!("{} curves written to {}", curves.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn rayon_pool(jobs: Option<usize>) -> rayon::ThreadPool {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        b = b.num_threads(j.max(1));
    }
    b.build().expect("thread pool")
}

fn verdict_code(pass: bool, check: bool) -> ExitCode {
    if check && !pass {
        ExitCode::from(2)
    } else {
        ExitCode::SUCCESS
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Accepts a fit result, a synthesis config or a bare mixing measure.
fn read_measure(path: &Path) -> Result<MixingMeasure> {
    let value: Value = read_json(path)?;
    let measure = if value.get("estimate").is_some() {
        serde_json::from_value::<FitResult>(value)?.estimate
    } else if value.get("ground_truth").is_some() {
        serde_json::from_value::<SynthesisConfig>(value)?.ground_truth
    } else if value.get("atoms").is_some() {
        serde_json::from_value::<MixingMeasure>(value)?
    } else {
        bail!("{} holds no mixing measure", path.display());
    };
    Ok(measure)
}
