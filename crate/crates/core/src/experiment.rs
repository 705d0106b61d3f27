//! Sample-size sweeps: synthesize, fit, measure Voronoi losses, aggregate
//! per sample size and fit log-log slopes. Results go to `records.csv`,
//! `summary.json` and a self-contained `plot.svg`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{fit, synthesize_dataset, write_json, FitConfig, InputLaw, SynthesisConfig};
use crate::model::{Activation, Atom, ExpertFamily, ExpertSpec, GatingKind, MixingMeasure, ScoreKind};
use crate::rng::{derive_key, CounterRng, Stream};
use crate::voronoi::{compute_loss, LossKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Fig1a,
    Fig1b,
    Fig2a,
    Fig2b,
    Custom,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::Fig1a => "fig1a",
            Scenario::Fig1b => "fig1b",
            Scenario::Fig2a => "fig2a",
            Scenario::Fig2b => "fig2b",
            Scenario::Custom => "custom",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Atoms 7 and 8 of the truth have zero gating slope and zero bias.
    Sparse,
    Dense,
}

/// One plotted curve: a ground truth and the gating used to fit it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSpec {
    pub label: String,
    pub truth_gating: GatingKind,
    pub fit_gating: GatingKind,
    pub expert: ExpertFamily,
    pub score: ScoreKind,
    pub regime: Regime,
}

impl CurveSpec {
    /// Sparse truths get one extra fitted atom so that a zero-slope atom can
    /// be over-specified; dense ones are fitted with exactly `N*` atoms.
    pub fn n_fit_experts(&self, n_star: usize) -> usize {
        match self.regime {
            Regime::Sparse => n_star + 1,
            Regime::Dense => n_star,
        }
    }

    pub fn loss_kind(&self) -> LossKind {
        match (self.regime, self.score) {
            (Regime::Sparse, ScoreKind::FullyQuadratic) => LossKind::L1,
            (Regime::Sparse, ScoreKind::PartiallyQuadratic) => LossKind::L4,
            (Regime::Dense, ScoreKind::FullyQuadratic) => LossKind::L3,
            (Regime::Dense, ScoreKind::PartiallyQuadratic) => LossKind::L5,
        }
    }
}

fn default_d() -> usize {
    8
}
fn default_n_star() -> usize {
    8
}
fn default_noise() -> f64 {
    0.01
}
fn default_grid() -> Vec<usize> {
    vec![100, 316, 1000, 3162, 10000, 31623, 100000]
}
fn default_trials() -> usize {
    20
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "default_n_star")]
    pub n_star: usize,
    #[serde(default = "default_noise")]
    pub noise_var: f64,
    #[serde(default = "default_grid")]
    pub n_grid: Vec<usize>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    /// Template for every fit; expert count, gating, seed and duplicate
    /// pool are set per curve and trial.
    #[serde(default)]
    pub fit: FitConfig,
    /// Empty means the scenario's preset curves.
    #[serde(default)]
    pub curves: Vec<CurveSpec>,
    /// Record wall-clock seconds; disable for byte-identical records.
    #[serde(default = "default_true")]
    pub timing: bool,
}

impl ExperimentConfig {
    pub fn for_scenario(scenario: Scenario) -> Self {
        Self {
            scenario,
            d: default_d(),
            n_star: default_n_star(),
            noise_var: default_noise(),
            n_grid: default_grid(),
            trials: default_trials(),
            seed: 0,
            fit: FitConfig::default(),
            curves: Vec::new(),
            timing: true,
        }
    }

    /// Curves of the run: explicit ones, else the scenario preset.
    pub fn resolved_curves(&self) -> Vec<CurveSpec> {
        if self.curves.is_empty() {
            preset_curves(self.scenario)
        } else {
            self.curves.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_star == 0 {
            return Err(Error::invalid("d and n_star must be positive"));
        }
        if self.n_grid.is_empty() || self.n_grid.contains(&0) {
            return Err(Error::invalid("n_grid must be non-empty with positive sizes"));
        }
        if self.trials == 0 {
            return Err(Error::invalid("trials must be positive"));
        }
        if !(self.noise_var >= 0.0 && self.noise_var.is_finite()) {
            return Err(Error::invalid("noise_var must be finite and non-negative"));
        }
        let curves = self.resolved_curves();
        if curves.is_empty() {
            return Err(Error::invalid("custom scenario needs at least one curve"));
        }
        for c in &curves {
            ExpertSpec::new(c.expert, self.d)?;
            if c.regime == Regime::Sparse && self.n_star < 2 {
                return Err(Error::invalid("sparse regime needs at least two truth atoms"));
            }
        }
        self.fit.validate()
    }
}

fn relu_ridge() -> ExpertFamily {
    ExpertFamily::Ridge {
        activation: Activation::Relu,
    }
}

fn curve(label: &str, gating: GatingKind, expert: ExpertFamily, regime: Regime) -> CurveSpec {
    CurveSpec {
        label: label.to_string(),
        truth_gating: gating,
        fit_gating: gating,
        expert,
        score: ScoreKind::FullyQuadratic,
        regime,
    }
}

pub fn preset_curves(scenario: Scenario) -> Vec<CurveSpec> {
    use GatingKind::{Sigmoid, Softmax};
    match scenario {
        Scenario::Fig1a => vec![
            curve("relu", Sigmoid, relu_ridge(), Regime::Dense),
            curve("relu", Softmax, relu_ridge(), Regime::Dense),
        ],
        Scenario::Fig1b => vec![
            curve("linear", Sigmoid, ExpertFamily::Linear, Regime::Dense),
            curve("linear", Softmax, ExpertFamily::Linear, Regime::Dense),
        ],
        Scenario::Fig2a => vec![
            curve("linear", Sigmoid, ExpertFamily::Linear, Regime::Sparse),
            curve("relu", Sigmoid, relu_ridge(), Regime::Sparse),
        ],
        Scenario::Fig2b => vec![
            curve("relu", Sigmoid, relu_ridge(), Regime::Dense),
            curve("linear", Sigmoid, ExpertFamily::Linear, Regime::Dense),
        ],
        Scenario::Custom => Vec::new(),
    }
}

/// Truth with `N*` atoms, every entry `N(0, 1/d)`. The sparse regime zeroes
/// `(A, b, c)` of the last two atoms (`A` and `c` for the partial score).
pub fn make_ground_truth(
    d: usize,
    n_star: usize,
    curve: &CurveSpec,
    rng: &mut CounterRng,
) -> Result<MixingMeasure> {
    let expert = ExpertSpec::new(curve.expert, d)?;
    let normal = Normal::new(0.0, (1.0 / d as f64).sqrt()).expect("valid std");
    let mut atoms: Vec<Atom> = (0..n_star)
        .map(|_| Atom {
            a: (0..d * d).map(|_| normal.sample(rng)).collect(),
            b: (0..curve.score.linear_len(d)).map(|_| normal.sample(rng)).collect(),
            c: normal.sample(rng),
            eta: (0..expert.param_dim()).map(|_| normal.sample(rng)).collect(),
        })
        .collect();
    if curve.regime == Regime::Sparse {
        for atom in atoms.iter_mut().skip(n_star.saturating_sub(2)) {
            atom.a.iter_mut().for_each(|v| *v = 0.0);
            atom.b.iter_mut().for_each(|v| *v = 0.0);
            atom.c = 0.0;
        }
    }
    MixingMeasure::new(atoms, expert, curve.score, curve.truth_gating)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    /// Scenario name and curve label, e.g. `fig1a/relu`.
    pub scenario: String,
    pub gating: GatingKind,
    pub n: usize,
    pub trial: usize,
    pub loss_kind: LossKind,
    /// NaN when every restart of the fit failed.
    pub loss: f64,
    pub objective: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeEstimate {
    pub slope: f64,
    pub intercept: f64,
    /// OLS standard error of the slope; 0 when only two points remain.
    pub stderr: f64,
    pub n_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSummary {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation over successful trials.
    pub std: f64,
    pub trials: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub scenario: String,
    pub gating: GatingKind,
    pub loss_kind: LossKind,
    pub points: Vec<PointSummary>,
    pub slope: Option<SlopeEstimate>,
}

impl CurveSummary {
    pub fn name(&self) -> String {
        format!("{} {}", self.scenario, self.gating.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub records: Vec<Record>,
    pub curves: Vec<CurveSummary>,
}

/// Ordinary least squares of `ln loss` on `ln n`. Points with a loss that is
/// not positive and finite are dropped with a warning.
pub fn fit_slope(points: &[(f64, f64)]) -> Result<SlopeEstimate> {
    let kept: Vec<(f64, f64)> = points
        .iter()
        .filter(|&&(n, l)| {
            let ok = n > 0.0 && l > 0.0 && l.is_finite() && n.is_finite();
            if !ok {
                log::warn!("dropping point (n = {n}, loss = {l}) from slope fit");
            }
            ok
        })
        .map(|&(n, l)| (n.ln(), l.ln()))
        .collect();
    let k = kept.len();
    if k < 2 {
        return Err(Error::invalid(format!("slope fit needs two usable points, got {k}")));
    }
    let kf = k as f64;
    let mx = kept.iter().map(|p| p.0).sum::<f64>() / kf;
    let my = kept.iter().map(|p| p.1).sum::<f64>() / kf;
    let sxx: f64 = kept.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("slope fit needs at least two distinct sample sizes"));
    }
    let sxy: f64 = kept.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let stderr = if k > 2 {
        let ssr: f64 = kept.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
        (ssr / (kf - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Ok(SlopeEstimate {
        slope,
        intercept,
        stderr,
        n_points: k,
    })
}

/// Groups records by `(scenario, gating, loss_kind)` in first-seen order and
/// aggregates each sample size.
pub fn summarize(records: &[Record]) -> Vec<CurveSummary> {
    let mut order: Vec<(String, GatingKind, LossKind)> = Vec::new();
    let mut groups: BTreeMap<usize, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for r in records {
        let key = (r.scenario.clone(), r.gating, r.loss_kind);
        let idx = match order.iter().position(|k| *k == key) {
            Some(i) => i,
            None => {
                order.push(key);
                order.len() - 1
            }
        };
        groups.entry(idx).or_default().entry(r.n).or_default().push(r.loss);
    }
    order
        .into_iter()
        .enumerate()
        .map(|(idx, (scenario, gating, loss_kind))| {
            let points: Vec<PointSummary> = groups[&idx]
                .iter()
                .map(|(&n, losses)| point_summary(n, losses))
                .collect();
            let usable: Vec<(f64, f64)> = points
                .iter()
                .filter(|p| p.trials > 0)
                .map(|p| (p.n as f64, p.mean))
                .collect();
            let slope = if usable.len() >= 2 { fit_slope(&usable).ok() } else { None };
            CurveSummary {
                scenario,
                gating,
                loss_kind,
                points,
                slope,
            }
        })
        .collect()
}

fn point_summary(n: usize, losses: &[f64]) -> PointSummary {
    let ok: Vec<f64> = losses.iter().copied().filter(|v| v.is_finite()).collect();
    let k = ok.len();
    let mean = if k > 0 { ok.iter().sum::<f64>() / k as f64 } else { f64::NAN };
    let std = if k > 1 {
        (ok.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1) as f64).sqrt()
    } else {
        0.0
    };
    PointSummary {
        n,
        mean,
        std,
        trials: k,
        failed: losses.len() - k,
    }
}

struct Job {
    curve: usize,
    n_index: usize,
    trial: usize,
}

/// Runs every curve over the grid. Trials are independent and run on the
/// current rayon pool; results are ordered by curve, then `n`, then trial.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepResult> {
    cfg.validate()?;
    let curves = cfg.resolved_curves();
    let truths = curves
        .iter()
        .map(|c| make_ground_truth(cfg.d, cfg.n_star, c, &mut CounterRng::new(cfg.seed, Stream::Truth, 0)))
        .collect::<Result<Vec<_>>>()?;
    let mut jobs = Vec::new();
    for curve in 0..curves.len() {
        for n_index in 0..cfg.n_grid.len() {
            for trial in 0..cfg.trials {
                jobs.push(Job { curve, n_index, trial });
            }
        }
    }
    let records: Vec<Record> = jobs
        .par_iter()
        .map(|job| run_trial(cfg, &curves[job.curve], &truths[job.curve], job))
        .collect::<Result<_>>()?;

    for chunk in records.chunks(cfg.trials) {
        let failed = chunk.iter().filter(|r| !r.loss.is_finite()).count();
        if failed * 5 > cfg.trials {
            return Err(Error::TooManyFailures {
                n: chunk[0].n,
                failed,
                trials: cfg.trials,
            });
        }
    }
    let curves = summarize(&records);
    Ok(SweepResult { records, curves })
}

fn run_trial(cfg: &ExperimentConfig, curve: &CurveSpec, truth: &MixingMeasure, job: &Job) -> Result<Record> {
    let started = Instant::now();
    let n = cfg.n_grid[job.n_index];
    let trial_key = derive_key(
        cfg.seed,
        Stream::Trial,
        ((job.curve as u64) << 40) | ((job.n_index as u64) << 20) | job.trial as u64,
    );
    let data = synthesize_dataset(&SynthesisConfig {
        d: cfg.d,
        n,
        noise_var: cfg.noise_var,
        ground_truth: truth.clone(),
        input_law: InputLaw::UniformCube,
        seed: trial_key,
    })?;
    let mut fit_cfg = cfg.fit.clone();
    fit_cfg.n_fit_experts = curve.n_fit_experts(cfg.n_star);
    fit_cfg.gating = Some(curve.fit_gating);
    fit_cfg.seed = trial_key;
    fit_cfg.duplicate_pool = match curve.regime {
        Regime::Sparse => Some(vec![cfg.n_star - 2, cfg.n_star - 1]),
        Regime::Dense => None,
    };
    let kind = curve.loss_kind();
    let (loss, objective) = match fit(&data, &fit_cfg) {
        Ok(result) => {
            let reference = truth.with_gating(curve.fit_gating);
            let report = compute_loss(&result.estimate, &reference, kind, None)?;
            (report.value, result.final_objective)
        }
        Err(Error::AllRestartsFailed { .. }) => {
            log::warn!("{} n = {n} trial {}: every restart failed", curve.label, job.trial);
            (f64::NAN, f64::NAN)
        }
        Err(e) => return Err(e),
    };
    Ok(Record {
        scenario: format!("{}/{}", cfg.scenario.name(), curve.label),
        gating: curve.fit_gating,
        n,
        trial: job.trial,
        loss_kind: kind,
        loss,
        objective,
        seconds: if cfg.timing { started.elapsed().as_secs_f64() } else { 0.0 },
    })
}

/// Outcome of comparing one fitted slope, or the gap between two, with its
/// target interval.
#[derive(Debug, Clone, PartialEq)]
pub struct SlopeCheck {
    pub what: String,
    pub value: Option<f64>,
    pub lo: f64,
    pub hi: f64,
}

impl SlopeCheck {
    pub fn pass(&self) -> bool {
        self.value.is_some_and(|v| v >= self.lo && v <= self.hi)
    }
}

/// Target slope intervals of each preset scenario, keyed by curve label and
/// fit gating.
pub fn slope_targets(scenario: Scenario) -> Vec<(&'static str, GatingKind, f64, f64)> {
    use GatingKind::{Sigmoid, Softmax};
    match scenario {
        Scenario::Fig1a => vec![("relu", Sigmoid, -0.66, -0.36), ("relu", Softmax, -0.39, -0.09)],
        Scenario::Fig1b => vec![("linear", Sigmoid, -0.61, -0.31), ("linear", Softmax, -0.22, 0.08)],
        Scenario::Fig2a => vec![("linear", Sigmoid, -0.22, 0.08), ("relu", Sigmoid, -0.69, -0.39)],
        Scenario::Fig2b => vec![("relu", Sigmoid, -0.68, -0.38), ("linear", Sigmoid, -0.59, -0.29)],
        Scenario::Custom => Vec::new(),
    }
}

fn find_slope(curves: &[CurveSummary], scenario: Scenario, label: &str, gating: GatingKind) -> Option<f64> {
    let key = format!("{}/{label}", scenario.name());
    curves
        .iter()
        .find(|c| c.scenario == key && c.gating == gating)
        .and_then(|c| c.slope)
        .map(|s| s.slope)
}

/// Slope checks of a preset scenario. Scenario fig1a also requires the sigmoid
/// slope to sit at least 0.15 below the softmax one.
pub fn check_slopes(scenario: Scenario, curves: &[CurveSummary]) -> Vec<SlopeCheck> {
    let mut out: Vec<SlopeCheck> = slope_targets(scenario)
        .into_iter()
        .map(|(label, gating, lo, hi)| SlopeCheck {
            what: format!("{}/{label} {} slope", scenario.name(), gating.name()),
            value: find_slope(curves, scenario, label, gating),
            lo,
            hi,
        })
        .collect();
    if scenario == Scenario::Fig1a {
        let sig = find_slope(curves, scenario, "relu", GatingKind::Sigmoid);
        let soft = find_slope(curves, scenario, "relu", GatingKind::Softmax);
        out.push(SlopeCheck {
            what: "fig1a sigmoid minus softmax slope".into(),
            value: sig.zip(soft).map(|(a, b)| a - b),
            lo: f64::NEG_INFINITY,
            hi: -0.15,
        });
    }
    out
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> Error + '_ {
    move |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for r in records {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<Record>, _>>()
        .map_err(csv_err(path))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Paths written by [`emit_outputs`].
#[derive(Debug, Clone)]
pub struct OutputFiles {
    pub records: PathBuf,
    pub summary: PathBuf,
    pub plot: PathBuf,
}

pub fn emit_outputs(result: &SweepResult, out_dir: &Path) -> Result<OutputFiles> {
    if result.records.is_empty() {
        return Err(Error::invalid("no records to write"));
    }
    fs::create_dir_all(out_dir).map_err(|source| Error::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let files = OutputFiles {
        records: out_dir.join("records.csv"),
        summary: out_dir.join("summary.json"),
        plot: out_dir.join("plot.svg"),
    };
    write_records(&files.records, &result.records)?;
    write_json(&files.summary, &result.curves)?;
    write_text(&files.plot, &render_svg(&result.curves))?;
    Ok(files)
}

/// Reads a records file and writes its chart.
pub fn plot_records(records: &Path, out: &Path) -> Result<Vec<CurveSummary>> {
    let records = read_records(records)?;
    if records.is_empty() {
        return Err(Error::invalid("records file has no rows"));
    }
    let curves = summarize(&records);
    write_text(out, &render_svg(&curves))?;
    Ok(curves)
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Log-log chart with mean markers, ±3σ bars and one dashed trend line per
/// fitted curve.
pub fn render_svg(curves: &[CurveSummary]) -> String {
    let (w, h) = (720.0, 480.0);
    let (left, right, top, bottom) = (70.0, 200.0, 20.0, 50.0);
    let pts = || curves.iter().flat_map(|c| c.points.iter()).filter(|p| p.trials > 0 && p.mean > 0.0);
    let n_lo = pts().map(|p| p.n as f64).fold(f64::INFINITY, f64::min);
    let n_hi = pts().map(|p| p.n as f64).fold(0.0, f64::max);
    let y_lo = pts().map(|p| p.mean).fold(f64::INFINITY, f64::min);
    let y_hi = pts().map(|p| p.mean + 3.0 * p.std).fold(0.0, f64::max);
    let (x0, x1) = padded_decades(n_lo, n_hi);
    let (y0, y1) = padded_decades(y_lo, y_hi);
    let px = |n: f64| left + (n.log10() - x0) / (x1 - x0) * (w - left - right);
    let py = |v: f64| top + (y1 - v.log10()) / (y1 - y0) * (h - top - bottom);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let (ax0, ax1, ay0, ay1) = (left, w - right, top, h - bottom);
    let _ = writeln!(
        s,
        r#"<rect x="{ax0}" y="{ay0}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        ax1 - ax0,
        ay1 - ay0
    );
    for e in (x0.ceil() as i32)..=(x1.floor() as i32) {
        let x = px(10f64.powi(e));
        let _ = writeln!(s, r##"<line x1="{x:.2}" y1="{ay1}" x2="{x:.2}" y2="{:.2}" stroke="#ccc"/>"##, ay1 + 5.0);
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">1e{e}</text>"#, ay1 + 18.0);
    }
    for e in (y0.ceil() as i32)..=(y1.floor() as i32) {
        let y = py(10f64.powi(e));
        let _ = writeln!(s, r##"<line x1="{:.2}" y1="{y:.2}" x2="{ax0}" y2="{y:.2}" stroke="#ccc"/>"##, ax0 - 5.0);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">1e{e}</text>"#, ax0 - 8.0, y + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">sample size n</text>"#, (ax0 + ax1) / 2.0, h - 10.0);
    let _ = writeln!(
        s,
        r#"<text transform="translate(16 {:.2}) rotate(-90)" text-anchor="middle">Voronoi loss</text>"#,
        (ay0 + ay1) / 2.0
    );

    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(s, r#"<g class="curve" stroke="{color}" fill="{color}">"#);
        for p in c.points.iter().filter(|p| p.trials > 0 && p.mean > 0.0) {
            let x = px(p.n as f64);
            let lo = (p.mean - 3.0 * p.std).max(10f64.powf(y0));
            let hi = p.mean + 3.0 * p.std;
            let _ = writeln!(
                s,
                r#"<line class="errbar" x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}"/>"#,
                py(lo),
                py(hi)
            );
            let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{:.2}" r="3.5"/>"#, py(p.mean));
        }
        if let Some(sl) = c.slope {
            let at = |n: f64| (sl.intercept + sl.slope * n.ln()).exp();
            let _ = writeln!(
                s,
                r#"<line class="trend" x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke-dasharray="6 4" stroke-width="1.5"/>"#,
                px(n_lo),
                py(at(n_lo)),
                px(n_hi),
                py(at(n_hi))
            );
        }
        let ly = top + 16.0 + 18.0 * i as f64;
        let slope = c.slope.map_or("n/a".to_string(), |sl| format!("{:.2}", sl.slope));
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{ly:.2}" stroke="none">{} (slope {slope})</text>"#,
            ax1 + 12.0,
            escape(&c.name())
        );
        let _ = writeln!(s, "</g>");
    }
    s.push_str("</svg>\n");
    s
}

fn padded_decades(lo: f64, hi: f64) -> (f64, f64) {
    if !(lo > 0.0 && hi.is_finite() && hi > 0.0) {
        return (0.0, 1.0);
    }
    let (a, b) = (lo.log10().floor(), hi.log10().ceil());
    if a == b {
        (a, a + 1.0)
    } else {
        (a, b)
    }
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_config(scenario: Scenario) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::for_scenario(scenario);
        cfg.d = 2;
        cfg.n_star = 3;
        cfg.n_grid = vec![60, 120];
        cfg.trials = 2;
        cfg.fit.restarts = 1;
        cfg.fit.max_iters = 40;
        cfg.timing = false;
        cfg
    }

    #[test]
    fn sparse_truth_zeroes_last_two_gates() {
        let c = &preset_curves(Scenario::Fig2a)[1];
        let g = make_ground_truth(8, 8, c, &mut CounterRng::new(1, Stream::Truth, 0)).unwrap();
        for atom in &g.atoms[6..] {
            assert!(atom.a.iter().chain(&atom.b).all(|v| *v == 0.0) && atom.c == 0.0);
            assert!(atom.eta.iter().any(|v| *v != 0.0));
        }
        for atom in &g.atoms[..6] {
            assert!(atom.a.iter().any(|v| *v != 0.0));
        }
        let partial = CurveSpec {
            score: ScoreKind::PartiallyQuadratic,
            ..c.clone()
        };
        let g = make_ground_truth(8, 8, &partial, &mut CounterRng::new(1, Stream::Truth, 0)).unwrap();
        assert!(g.atoms[7].b.is_empty() && g.atoms[7].c == 0.0);
    }

    #[test]
    fn dense_truth_is_deterministic_and_nonzero() {
        let c = &preset_curves(Scenario::Fig2b)[0];
        let a = make_ground_truth(8, 8, c, &mut CounterRng::new(5, Stream::Truth, 0)).unwrap();
        let b = make_ground_truth(8, 8, c, &mut CounterRng::new(5, Stream::Truth, 0)).unwrap();
        assert_eq!(a, b);
        assert!(a.atoms.iter().all(|t| t.a.iter().map(|v| v * v).sum::<f64>() > 0.0));
    }

    #[test]
    fn slope_of_exact_power_law() {
        let pts: Vec<(f64, f64)> = [100.0, 316.0, 1000.0, 3162.0].iter().map(|&n: &f64| (n, n.powf(-0.5))).collect();
        let s = fit_slope(&pts).unwrap();
        assert!((s.slope + 0.5).abs() <= 1e-12);
        assert!(s.stderr <= 1e-12);
        let flat: Vec<(f64, f64)> = [10.0, 20.0, 40.0].iter().map(|&n| (n, 0.3)).collect();
        assert!(fit_slope(&flat).unwrap().slope.abs() <= 1e-12);
    }

    #[test]
    fn slope_drops_bad_points() {
        let pts = vec![(10.0, 1.0), (100.0, 0.0), (1000.0, 0.01), (50.0, f64::NAN)];
        let s = fit_slope(&pts).unwrap();
        assert_eq!(s.n_points, 2);
        assert!((s.slope + 1.0).abs() <= 1e-12);
        assert!(fit_slope(&[(10.0, 1.0), (20.0, -1.0)]).is_err());
    }

    #[test]
    fn slope_stderr_is_calibrated() {
        // Monte Carlo: noisy power law with slope −0.46, 7 points
        let ns = [100.0, 316.0, 1000.0, 3162.0, 10000.0, 31623.0, 100000.0];
        let noise = Normal::new(0.0, 0.1).unwrap();
        let mut covered = 0;
        for seed in 0..100 {
            let mut rng = CounterRng::new(seed, Stream::Aux, 0);
            let pts: Vec<(f64, f64)> = ns
                .iter()
                .map(|&n: &f64| (n, 2.0 * n.powf(-0.46) * f64::exp(noise.sample(&mut rng))))
                .collect();
            let s = fit_slope(&pts).unwrap();
            if (s.slope + 0.46).abs() <= 3.0 * s.stderr {
                covered += 1;
            }
        }
        assert!(covered >= 95, "covered {covered}");
    }

    #[test]
    fn noiseless_exact_start_gives_zero_loss() {
        let mut cfg = tiny_config(Scenario::Fig2b);
        cfg.n_grid = vec![100];
        cfg.trials = 1;
        cfg.noise_var = 0.0;
        cfg.fit.init_perturb_scale = 0.0;
        cfg.curves = vec![preset_curves(Scenario::Fig2b)[1].clone()];
        let res = run_sweep(&cfg).unwrap();
        assert_eq!(res.records.len(), 1);
        assert!(res.records[0].loss.abs() <= 1e-8, "{}", res.records[0].loss);
        assert!(res.curves[0].slope.is_none());
    }

    #[test]
    fn sweep_records_every_pair_once_and_is_deterministic() {
        let cfg = tiny_config(Scenario::Fig1a);
        let a = run_sweep(&cfg).unwrap();
        assert_eq!(a.records.len(), 2 * 2 * 2);
        for c in &a.curves {
            let mut seen: Vec<(usize, usize)> = a
                .records
                .iter()
                .filter(|r| r.gating == c.gating)
                .map(|r| (r.n, r.trial))
                .collect();
            seen.sort_unstable();
            seen.dedup();
            assert_eq!(seen.len(), 4);
        }
        let b = run_sweep(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let fa = emit_outputs(&a, &dir.path().join("a")).unwrap();
        let fb = emit_outputs(&b, &dir.path().join("b")).unwrap();
        assert_eq!(fs::read(fa.records).unwrap(), fs::read(fb.records).unwrap());
    }

    #[test]
    fn empty_records_write_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        let empty = SweepResult {
            records: Vec::new(),
            curves: Vec::new(),
        };
        assert!(emit_outputs(&empty, &out).is_err());
        assert!(!out.exists());
    }

    fn fake_records(ns: &[usize], trials: usize) -> Vec<Record> {
        let mut rng = CounterRng::new(3, Stream::Aux, 0);
        let mut out = Vec::new();
        for &n in ns {
            for trial in 0..trials {
                out.push(Record {
                    scenario: "custom/relu".into(),
                    gating: GatingKind::Sigmoid,
                    n,
                    trial,
                    loss_kind: LossKind::L3,
                    loss: (n as f64).powf(-0.5) * rng.gen_range(0.8..1.2),
                    objective: 0.01,
                    seconds: 0.0,
                });
            }
        }
        out
    }

    #[test]
    fn one_trend_line_per_curve_and_csv_round_trip() {
        let ns = [100, 316, 1000, 3162, 10000, 31623, 100000];
        let records = fake_records(&ns, 3);
        let res = SweepResult {
            curves: summarize(&records),
            records,
        };
        let dir = tempfile::tempdir().unwrap();
        let files = emit_outputs(&res, dir.path()).unwrap();
        let back = read_records(&files.records).unwrap();
        assert_eq!(back.len(), 7 * 3);
        let svg = fs::read_to_string(&files.plot).unwrap();
        assert_eq!(svg.matches(r#"class="trend""#).count(), 1);
        assert_eq!(svg.matches(r#"class="errbar""#).count(), 7);
        assert!(!svg.contains("href"));

        let summary: Vec<CurveSummary> =
            serde_json::from_str(&fs::read_to_string(&files.summary).unwrap()).unwrap();
        // independent re-aggregation of the CSV
        for p in &summary[0].points {
            let vals: Vec<f64> = back.iter().filter(|r| r.n == p.n).map(|r| r.loss).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            assert!((mean - p.mean).abs() <= 1e-9);
        }
        let replot = dir.path().join("again.svg");
        let curves = plot_records(&files.records, &replot).unwrap();
        assert_eq!(curves[0].points.len(), 7);
        assert_eq!(fs::read_to_string(replot).unwrap(), svg);
    }

    #[test]
    fn failed_trials_are_excluded_from_means() {
        let mut records = fake_records(&[100, 1000], 2);
        records[0].loss = f64::NAN;
        let s = summarize(&records);
        assert_eq!(s[0].points[0].trials, 1);
        assert_eq!(s[0].points[0].failed, 1);
        assert_eq!(s[0].points[0].mean, records[1].loss);
    }

    #[test]
    fn slope_checks_match_curves() {
        let mk = |gating, slope| CurveSummary {
            scenario: "fig1a/relu".into(),
            gating,
            loss_kind: LossKind::L3,
            points: Vec::new(),
            slope: Some(SlopeEstimate {
                slope,
                intercept: 0.0,
                stderr: 0.0,
                n_points: 5,
            }),
        };
        let checks = check_slopes(Scenario::Fig1a, &[mk(GatingKind::Sigmoid, -0.5), mk(GatingKind::Softmax, -0.25)]);
        assert_eq!(checks.len(), 3);
        assert!(checks.iter().all(SlopeCheck::pass));
        let checks = check_slopes(Scenario::Fig1a, &[mk(GatingKind::Sigmoid, -0.5), mk(GatingKind::Softmax, -0.45)]);
        assert!(!checks[1].pass() && !checks[2].pass());
        assert!(!check_slopes(Scenario::Fig2a, &[])[0].pass());
    }

    #[test]
    fn config_defaults_from_json() {
        let cfg: ExperimentConfig = serde_json::from_str(r#"{"scenario":"fig2a"}"#).unwrap();
        assert_eq!(cfg.n_grid, default_grid());
        assert_eq!(cfg.trials, 20);
        assert_eq!(cfg.resolved_curves().len(), 2);
        cfg.validate().unwrap();
        let custom: ExperimentConfig = serde_json::from_str(r#"{"scenario":"custom"}"#).unwrap();
        assert!(custom.validate().is_err());
    }
}
