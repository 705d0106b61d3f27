//! Synthetic regression data and the least-squares estimator.
//!
//! The objective is the plain sum of squared residuals. The optimizer works on
//! the flat parameter layout of [`MixingMeasure::to_flat`] and divides the
//! gradient by `n` so that one step size suits every sample size.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::model::{
    gate_weights_from_scores, sigmoid, Evaluator, ExpertSpec, GatingKind, MixingMeasure,
    ParamBounds,
};
use crate::rng::{CounterRng, Stream};

/// Law of the inputs; only the unit cube is supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputLaw {
    /// Independent coordinates, each uniform on `[−1, 1]`.
    #[default]
    UniformCube,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisConfig {
    pub d: usize,
    pub n: usize,
    pub noise_var: f64,
    pub ground_truth: MixingMeasure,
    #[serde(default)]
    pub input_law: InputLaw,
    pub seed: u64,
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_var >= 0.0 && self.noise_var.is_finite()) {
            return Err(Error::invalid(format!(
                "noise variance must be a nonnegative number, got {}",
                self.noise_var
            )));
        }
        if self.d == 0 {
            return Err(Error::invalid("input dimension must be positive"));
        }
        self.ground_truth.validate()?;
        check_len("ground truth input dimension", self.d, self.ground_truth.dim())
    }
}

/// `n` inputs (row-major, `n × d`) and responses.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub config: SynthesisConfig,
}

impl Dataset {
    pub fn new(x: Vec<f64>, y: Vec<f64>, config: SynthesisConfig) -> Result<Self> {
        config.validate()?;
        check_len("dataset responses", config.n, y.len())?;
        check_len("dataset inputs", config.n * config.d, x.len())?;
        Ok(Self { x, y, config })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.config.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.x[i * d..(i + 1) * d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.x.chunks(self.dim())
    }

    /// Path of the JSON sidecar that accompanies `csv_path`.
    pub fn sidecar_path(csv_path: &Path) -> PathBuf {
        csv_path.with_extension("json")
    }

    /// Writes the CSV (`x_1..x_d,y`) and its JSON sidecar.
    pub fn write(&self, csv_path: &Path) -> Result<()> {
        let csv_err = |source| Error::Csv {
            path: csv_path.to_path_buf(),
            source,
        };
        let mut w = csv::Writer::from_path(csv_path).map_err(csv_err)?;
        let d = self.dim();
        let header: Vec<String> = (1..=d)
            .map(|k| format!("x_{k}"))
            .chain(std::iter::once("y".to_string()))
            .collect();
        w.write_record(&header).map_err(csv_err)?;
        let mut record = Vec::with_capacity(d + 1);
        for (row, y) in self.rows().zip(&self.y) {
            record.clear();
            record.extend(row.iter().map(|v| v.to_string()));
            record.push(y.to_string());
            w.write_record(&record).map_err(csv_err)?;
        }
        w.flush().map_err(|source| Error::Io {
            path: csv_path.to_path_buf(),
            source,
        })?;
        write_json(&Self::sidecar_path(csv_path), &self.config)
    }

    /// Reads a CSV written by [`Dataset::write`] together with its config.
    pub fn read(csv_path: &Path, config_path: &Path) -> Result<Self> {
        let mut config: SynthesisConfig = read_json(config_path)?;
        let csv_err = |source| Error::Csv {
            path: csv_path.to_path_buf(),
            source,
        };
        let mut r = csv::Reader::from_path(csv_path).map_err(csv_err)?;
        let header = r.headers().map_err(csv_err)?.clone();
        let d = header.len().saturating_sub(1);
        let expected: Vec<String> = (1..=d)
            .map(|k| format!("x_{k}"))
            .chain(std::iter::once("y".to_string()))
            .collect();
        if header.iter().ne(expected.iter().map(String::as_str)) {
            return Err(Error::invalid(format!(
                "{}: header must be x_1..x_d,y",
                csv_path.display()
            )));
        }
        check_len("dataset columns vs config", config.d, d)?;
        let (mut x, mut y) = (Vec::new(), Vec::new());
        for record in r.records() {
            let record = record.map_err(csv_err)?;
            for (k, field) in record.iter().enumerate() {
                let v: f64 = field.trim().parse().map_err(|_| {
                    Error::invalid(format!("{}: bad number {field:?}", csv_path.display()))
                })?;
                if k < d {
                    x.push(v);
                } else {
                    y.push(v);
                }
            }
        }
        // the CSV is authoritative for the sample count
        config.n = y.len();
        Self::new(x, y, config)
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    w.write_all(b"\n")
        .and_then(|_| w.flush())
        .map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_reader(BufReader::new(file)).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Draws `X_i ~ U[−1,1]^d` and `Y_i = f_{G*}(X_i) + ε_i`, `ε_i ~ N(0, ν)`.
pub fn synthesize_dataset(cfg: &SynthesisConfig) -> Result<Dataset> {
    cfg.validate()?;
    let (n, d) = (cfg.n, cfg.d);
    let mut x_rng = CounterRng::new(cfg.seed, Stream::Data, 0);
    let x: Vec<f64> = (0..n * d).map(|_| x_rng.gen_range(-1.0..=1.0)).collect();
    let mut eval = Evaluator::new(&cfg.ground_truth);
    let mut y = x
        .chunks(d)
        .map(|row| eval.eval(row))
        .collect::<Result<Vec<_>>>()?;
    if cfg.noise_var > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_var.sqrt())
            .map_err(|e| Error::invalid(e.to_string()))?;
        let mut e_rng = CounterRng::new(cfg.seed, Stream::Data, 1);
        for v in &mut y {
            *v += noise.sample(&mut e_rng);
        }
    }
    Dataset::new(x, y, cfg.clone())
}

/// Inputs, responses and the precomputed monomials `x_u x_v`, `u ≤ v`.
pub(crate) struct Design {
    n: usize,
    tri: usize,
    x: Vec<f64>,
    quad: Vec<f64>,
    y: Vec<f64>,
}

impl Design {
    pub(crate) fn new(data: &Dataset) -> Self {
        let (n, d) = (data.len(), data.dim());
        let tri = d * (d + 1) / 2;
        let mut quad = Vec::with_capacity(n * tri);
        for row in data.rows() {
            for (u, xu) in row.iter().enumerate() {
                quad.extend(row[u..].iter().map(|xv| xu * xv));
            }
        }
        Self {
            n,
            tri,
            x: data.x.clone(),
            quad,
            y: data.y.clone(),
        }
    }
}

/// Flat-parameter view of a measure's structure.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Layout {
    d: usize,
    nb: usize,
    q: usize,
    atoms: usize,
    expert: ExpertSpec,
    gating: GatingKind,
}

impl Layout {
    pub(crate) fn of(g: &MixingMeasure) -> Self {
        Self {
            d: g.dim(),
            nb: g.score.linear_len(g.dim()),
            q: g.expert.param_dim(),
            atoms: g.len(),
            expert: g.expert,
            gating: g.gating,
        }
    }

    fn stride(&self) -> usize {
        self.d * self.d + self.nb + 1 + self.q
    }

    fn c_offset(&self) -> usize {
        self.d * self.d + self.nb
    }

    fn tri(&self) -> usize {
        self.d * (self.d + 1) / 2
    }
}

/// Reusable buffers.
pub(crate) struct Scratch {
    scores: Vec<f64>,
    weights: Vec<f64>,
    values: Vec<f64>,
    egrad: Vec<f64>,
    /// Per atom, `A_uu` and `A_uv + A_vu` over `u < v`.
    folded: Vec<f64>,
    folded_grad: Vec<f64>,
}

impl Scratch {
    pub(crate) fn new(layout: &Layout) -> Self {
        let tri = layout.tri();
        Self {
            scores: vec![0.0; layout.atoms],
            weights: vec![0.0; layout.atoms],
            values: vec![0.0; layout.atoms],
            egrad: vec![0.0; layout.atoms * layout.q],
            folded: vec![0.0; layout.atoms * tri],
            folded_grad: vec![0.0; layout.atoms * tri],
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let split = n - n % 4;
    for (ca, cb) in a[..split].chunks_exact(4).zip(b[..split].chunks_exact(4)) {
        for k in 0..4 {
            acc[k] += ca[k] * cb[k];
        }
    }
    let mut tail = 0.0;
    for (u, v) in a[split..].iter().zip(&b[split..]) {
        tail += u * v;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Sum of squared residuals, and its gradient when `grad` is given.
pub(crate) fn objective_flat(
    params: &[f64],
    layout: &Layout,
    design: &Design,
    scratch: &mut Scratch,
    mut grad: Option<&mut [f64]>,
) -> Result<f64> {
    let (d, nb, q) = (layout.d, layout.nb, layout.q);
    let dd = d * d;
    let tri = design.tri;
    check_len("design quadratic features", layout.tri(), tri)?;
    let stride = layout.stride();
    let c_off = layout.c_offset();
    for j in 0..layout.atoms {
        let a = &params[j * stride..j * stride + dd];
        let out = &mut scratch.folded[j * tri..(j + 1) * tri];
        let mut k = 0;
        for u in 0..d {
            out[k] = a[u * d + u];
            k += 1;
            for v in u + 1..d {
                out[k] = a[u * d + v] + a[v * d + u];
                k += 1;
            }
        }
    }
    if let Some(g) = grad.as_deref_mut() {
        g.fill(0.0);
        scratch.folded_grad.fill(0.0);
    }
    let with_grad = grad.is_some();
    let mut total = 0.0;
    for i in 0..design.n {
        let x = &design.x[i * d..(i + 1) * d];
        let quad = &design.quad[i * tri..(i + 1) * tri];
        for j in 0..layout.atoms {
            let p = &params[j * stride..(j + 1) * stride];
            scratch.scores[j] = p[c_off]
                + dot(&scratch.folded[j * tri..(j + 1) * tri], quad)
                + dot(&p[dd..dd + nb], x);
            let eta = &p[c_off + 1..];
            scratch.values[j] = if with_grad {
                layout
                    .expert
                    .value_and_grad_unchecked(x, eta, &mut scratch.egrad[j * q..(j + 1) * q])
            } else {
                layout.expert.value_unchecked(x, eta)
            };
        }
        gate_weights_from_scores(&scratch.scores, layout.gating, &mut scratch.weights)?;
        let f = dot(&scratch.weights, &scratch.values);
        let r = design.y[i] - f;
        total += r * r;
        let Some(g) = grad.as_deref_mut() else {
            continue;
        };
        for j in 0..layout.atoms {
            let w = scratch.weights[j];
            let df_ds = match layout.gating {
                GatingKind::Sigmoid => w * (1.0 - w) * scratch.values[j],
                GatingKind::Softmax => w * (scratch.values[j] - f),
            };
            let coef = -2.0 * r * df_ds;
            axpy(coef, quad, &mut scratch.folded_grad[j * tri..(j + 1) * tri]);
            let gj = &mut g[j * stride..(j + 1) * stride];
            axpy(coef, x, &mut gj[dd..dd + nb]);
            gj[c_off] += coef;
            axpy(-2.0 * r * w, &scratch.egrad[j * q..(j + 1) * q], &mut gj[c_off + 1..]);
        }
    }
    if let Some(g) = grad {
        for j in 0..layout.atoms {
            let folded = &scratch.folded_grad[j * tri..(j + 1) * tri];
            let gj = &mut g[j * stride..j * stride + dd];
            let mut k = 0;
            for u in 0..d {
                for v in u..d {
                    gj[u * d + v] = folded[k];
                    gj[v * d + u] = folded[k];
                    k += 1;
                }
            }
        }
    }
    Ok(total)
}

fn check_pair(g: &MixingMeasure, data: &Dataset) -> Result<()> {
    g.validate()?;
    check_len("measure vs dataset input dimension", data.dim(), g.dim())
}

/// `Σ_i (Y_i − f_G(X_i))²`.
pub fn lse_objective(g: &MixingMeasure, data: &Dataset) -> Result<f64> {
    check_pair(g, data)?;
    let mut eval = Evaluator::new(g);
    let mut total = 0.0;
    for (x, y) in data.rows().zip(&data.y) {
        let r = y - eval.eval(x)?;
        total += r * r;
    }
    Ok(total)
}

/// Gradient of [`lse_objective`] in the layout of [`MixingMeasure::to_flat`].
pub fn lse_gradient(g: &MixingMeasure, data: &Dataset) -> Result<Vec<f64>> {
    check_pair(g, data)?;
    let layout = Layout::of(g);
    let design = Design::new(data);
    let mut scratch = Scratch::new(&layout);
    let mut grad = vec![0.0; g.flat_len()];
    objective_flat(&g.to_flat(), &layout, &design, &mut scratch, Some(&mut grad))?;
    Ok(grad)
}

/// `(1/n) Σ_i (f_a(X_i) − f_b(X_i))²` over the dataset inputs.
pub fn regression_gap(a: &MixingMeasure, b: &MixingMeasure, data: &Dataset) -> Result<f64> {
    check_pair(a, data)?;
    check_pair(b, data)?;
    let (mut ea, mut eb) = (Evaluator::new(a), Evaluator::new(b));
    let mut total = 0.0;
    for x in data.rows() {
        let diff = ea.eval(x)? - eb.eval(x)?;
        total += diff * diff;
    }
    Ok(total / data.len().max(1) as f64)
}

/// Bias giving the same total gate weight when an atom is split `k` ways.
fn split_bias(c: f64, k: usize, gating: GatingKind) -> f64 {
    if k <= 1 {
        return c;
    }
    let k = k as f64;
    match gating {
        GatingKind::Sigmoid => {
            let w = sigmoid(c) / k;
            (w / (1.0 - w)).ln()
        }
        GatingKind::Softmax => c - k.ln(),
    }
}

/// Truth atoms plus `N − N*` duplicates of atoms drawn uniformly from `pool`
/// (all truth atoms when `None`), each entry perturbed by `N(0, scale²)`.
///
/// Quadratic terms receive symmetric perturbations. A split atom's bias is
/// lowered so the copies' `σ(c)` (or `exp(c)` under softmax) sum to the
/// original's.
pub fn init_perturbed(
    truth: &MixingMeasure,
    n_atoms: usize,
    scale: f64,
    pool: Option<&[usize]>,
    bounds: &ParamBounds,
    rng: &mut CounterRng,
) -> Result<MixingMeasure> {
    truth.validate()?;
    let n_star = truth.len();
    if n_atoms < n_star {
        return Err(Error::invalid(format!(
            "cannot fit {n_atoms} atoms to a truth with {n_star}"
        )));
    }
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(Error::invalid(format!("perturbation scale must be >= 0, got {scale}")));
    }
    let all: Vec<usize> = (0..n_star).collect();
    let pool = pool.unwrap_or(&all);
    if pool.is_empty() && n_atoms > n_star {
        return Err(Error::invalid("duplicate pool is empty"));
    }
    if let Some(&bad) = pool.iter().find(|&&j| j >= n_star) {
        return Err(Error::IndexOutOfRange { index: bad, len: n_star });
    }

    let mut sources: Vec<usize> = (0..n_star).collect();
    for _ in n_star..n_atoms {
        sources.push(pool[rng.gen_range(0..pool.len())]);
    }
    let mut copies = vec![0usize; n_star];
    for &s in &sources {
        copies[s] += 1;
    }

    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let d = truth.dim();
    let atoms = sources
        .iter()
        .map(|&s| {
            let mut atom = truth.atoms[s].clone();
            atom.c = split_bias(atom.c, copies[s], truth.gating);
            if scale > 0.0 {
                for u in 0..d {
                    for v in u..d {
                        let z = scale * normal.sample(rng);
                        atom.a[u * d + v] += z;
                        if v != u {
                            atom.a[v * d + u] += z;
                        }
                    }
                }
                for v in atom.b.iter_mut().chain(&mut atom.eta) {
                    *v += scale * normal.sample(rng);
                }
                atom.c += scale * normal.sample(rng);
            }
            bounds.clamp_atom(&mut atom);
            atom
        })
        .collect();
    MixingMeasure::new(atoms, truth.expert, truth.score, truth.gating)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    /// Number of fitted atoms `N`.
    pub n_fit_experts: usize,
    pub restarts: usize,
    pub max_iters: usize,
    pub step_size: f64,
    /// The step decays geometrically to `step_size * final_step_fraction`.
    pub final_step_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Stop once `‖∇‖ / n` falls to this value.
    pub grad_tol: f64,
    pub init_perturb_scale: f64,
    pub bounds: ParamBounds,
    pub seed: u64,
    /// Gating of the fitted model; the truth's gating when absent.
    pub gating: Option<GatingKind>,
    /// Truth atoms eligible for duplication; all when absent.
    pub duplicate_pool: Option<Vec<usize>>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            n_fit_experts: 9,
            restarts: 5,
            max_iters: 2000,
            step_size: 0.01,
            final_step_fraction: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            grad_tol: 1e-9,
            init_perturb_scale: 0.05,
            bounds: ParamBounds::default(),
            seed: 0,
            gating: None,
            duplicate_pool: None,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} must be positive, got {v}")))
            }
        };
        if self.restarts == 0 {
            return Err(Error::invalid("restarts must be positive"));
        }
        if self.n_fit_experts == 0 {
            return Err(Error::invalid("n_fit_experts must be positive"));
        }
        positive("step_size", self.step_size)?;
        positive("final_step_fraction", self.final_step_fraction)?;
        positive("epsilon", self.epsilon)?;
        positive("grad_tol", self.grad_tol)?;
        if !(self.init_perturb_scale >= 0.0 && self.init_perturb_scale.is_finite()) {
            return Err(Error::invalid("init_perturb_scale must be >= 0"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        ParamBounds::new(self.bounds.box_radius).map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub estimate: MixingMeasure,
    pub final_objective: f64,
    /// `‖∇‖ / n` at the returned parameters.
    pub grad_norm: f64,
    pub iterations: usize,
    pub restart_index: usize,
    /// Objective at the initialization of the returned restart.
    pub initial_objective: f64,
    /// Restarts abandoned after a non-finite objective.
    pub failed_restarts: Vec<usize>,
}

struct RestartOutcome {
    params: Vec<f64>,
    objective: f64,
    grad_norm: f64,
    iterations: usize,
    initial_objective: f64,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// One Adam run; `None` when the objective turns non-finite.
fn run_restart(
    init: Vec<f64>,
    layout: &Layout,
    design: &Design,
    cfg: &FitConfig,
) -> Option<RestartOutcome> {
    let n = design.n.max(1) as f64;
    let mut scratch = Scratch::new(layout);
    let mut params = init;
    let mut grad = vec![0.0; params.len()];
    let eval = |p: &[f64], g: &mut [f64], s: &mut Scratch| {
        objective_flat(p, layout, design, s, Some(g))
            .ok()
            .filter(|v| v.is_finite())
    };

    let mut obj = eval(&params, &mut grad, &mut scratch)?;
    let initial_objective = obj;
    let mut best = RestartOutcome {
        params: params.clone(),
        objective: obj,
        grad_norm: norm(&grad) / n,
        iterations: 0,
        initial_objective,
    };
    let mut m = vec![0.0; params.len()];
    let mut v = vec![0.0; params.len()];
    let decay = cfg.final_step_fraction.ln() / cfg.max_iters.max(1) as f64;
    let (mut p1, mut p2) = (1.0, 1.0);
    for t in 1..=cfg.max_iters {
        if norm(&grad) / n <= cfg.grad_tol {
            break;
        }
        let step = cfg.step_size * (decay * (t - 1) as f64).exp();
        p1 *= cfg.beta1;
        p2 *= cfg.beta2;
        for k in 0..params.len() {
            let gk = grad[k] / n;
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
            let m_hat = m[k] / (1.0 - p1);
            let v_hat = v[k] / (1.0 - p2);
            params[k] = cfg.bounds.clamp(params[k] - step * m_hat / (v_hat.sqrt() + cfg.epsilon));
        }
        obj = eval(&params, &mut grad, &mut scratch)?;
        if obj < best.objective {
            best.params.copy_from_slice(&params);
            best.objective = obj;
            best.grad_norm = norm(&grad) / n;
        }
        best.iterations = t;
    }
    let _ = obj;
    Some(best)
}

/// Least-squares fit started from perturbations of the dataset's ground truth.
pub fn fit(data: &Dataset, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    let truth = &data.config.ground_truth;
    check_pair(truth, data)?;
    let start = truth.with_gating(cfg.gating.unwrap_or(truth.gating));
    let design = Design::new(data);
    let mut best: Option<(usize, RestartOutcome, MixingMeasure)> = None;
    let mut failed = Vec::new();
    for r in 0..cfg.restarts {
        let mut rng = CounterRng::new(cfg.seed, Stream::Init, r as u64);
        let init = init_perturbed(
            &start,
            cfg.n_fit_experts,
            cfg.init_perturb_scale,
            cfg.duplicate_pool.as_deref(),
            &cfg.bounds,
            &mut rng,
        )?;
        let layout = Layout::of(&init);
        match run_restart(init.to_flat(), &layout, &design, cfg) {
            Some(out) => {
                if best.as_ref().is_none_or(|(_, b, _)| out.objective < b.objective) {
                    best = Some((r, out, init));
                }
            }
            None => {
                log::warn!("restart {r} produced a non-finite objective");
                failed.push(r);
            }
        }
    }
    let (restart_index, out, shape) = best.ok_or(Error::AllRestartsFailed {
        restarts: cfg.restarts,
    })?;
    Ok(FitResult {
        estimate: shape.with_flat(&out.params)?,
        final_objective: out.objective,
        grad_norm: out.grad_norm,
        iterations: out.iterations,
        restart_index,
        initial_objective: out.initial_objective,
        failed_restarts: failed,
    })
}
