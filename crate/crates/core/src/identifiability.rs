//! Numeric rank probes for the derivative families of
//! `F(x; A, b, c, η) = σ(xᵀAx + bᵀx + c) · E(x, η)`.
//!
//! A family is a set of partial derivatives of `F`, each viewed as a function
//! of `x` and sampled at random points. The family counts as linearly
//! independent when the smallest singular value of the column-normalized
//! sample matrix exceeds a threshold.
//!
//! The quadratic term is differentiated in symmetric coordinates `A_uv`,
//! `u ≤ v`, since `xᵀAx` only sees the symmetric part of `A`.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::model::{sigmoid, Atom, ExpertFamily, ExpertSpec, ScoreKind};
use crate::rng::CounterRng;

pub const DEFAULT_THRESHOLD: f64 = 1e-6;
pub const DEFAULT_FD_STEP: f64 = 1e-4;
/// Sample points per family member.
pub const OVERSAMPLING: usize = 8;
/// Minimum distance of a probe point from a ReLU kink.
pub const KINK_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMode {
    Strong,
    Weak,
    PartialStrong,
    PartialWeak,
}

impl ProbeMode {
    pub fn is_strong(self) -> bool {
        matches!(self, ProbeMode::Strong | ProbeMode::PartialStrong)
    }

    /// Partial modes never differentiate in `b`; under a fully quadratic
    /// score `b` is then held at its value.
    pub fn is_partial(self) -> bool {
        matches!(self, ProbeMode::PartialStrong | ProbeMode::PartialWeak)
    }
}

/// Which derivative set is sampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    /// Orders 1 and 2 in `(A, b, η)` with `A = 0`, `b = 0`.
    SecondOrderAtOrigin,
    /// Order 1 in `(A, b, c, η)` at the given atoms.
    FirstOrder,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeFamilySpec {
    pub mode: ProbeMode,
    pub expert: ExpertSpec,
    pub score: ScoreKind,
    pub params: Vec<Atom>,
    pub sample_points: Vec<Vec<f64>>,
    pub fd_step: f64,
}

impl DerivativeFamilySpec {
    pub fn families(&self) -> Vec<FamilyKind> {
        if self.mode.is_strong() {
            vec![FamilyKind::SecondOrderAtOrigin, FamilyKind::FirstOrder]
        } else {
            vec![FamilyKind::FirstOrder]
        }
    }

    /// Number of functions in `family`.
    pub fn family_size(&self, family: FamilyKind) -> usize {
        let d = self.expert.input_dim;
        let gate = d * (d + 1) / 2 + self.lin_len();
        let p = gate + self.expert.param_dim();
        let per_atom = match family {
            FamilyKind::SecondOrderAtOrigin => p + p * (p + 1) / 2,
            FamilyKind::FirstOrder => p + 1,
        };
        per_atom * self.params.len()
    }

    fn lin_len(&self) -> usize {
        if self.mode.is_partial() {
            0
        } else {
            self.score.linear_len(self.expert.input_dim)
        }
    }

    fn validate(&self) -> Result<()> {
        let d = self.expert.input_dim;
        let q = self.expert.param_dim();
        if self.params.is_empty() {
            return Err(Error::invalid("derivative family needs at least one atom"));
        }
        for atom in &self.params {
            atom.validate(d, q, self.score)?;
        }
        for x in &self.sample_points {
            check_len("probe point", d, x.len())?;
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("probe point has non-finite entries"));
            }
        }
        if !(self.fd_step > 0.0 && self.fd_step.is_finite()) {
            return Err(Error::invalid("fd_step must be positive"));
        }
        Ok(())
    }
}

/// A differentiation coordinate of one atom.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Coord {
    /// `A_uv`, counted once per unordered pair when symmetric.
    Quad(usize, usize),
    Lin(usize),
    Bias,
    Expert(usize),
}

impl Coord {
    /// `∂s/∂coord` at `x`; zero for expert coordinates.
    fn score_slope(self, x: &[f64]) -> f64 {
        match self {
            Coord::Quad(u, v) => x[u] * x[v],
            Coord::Lin(u) => x[u],
            Coord::Bias => 1.0,
            Coord::Expert(_) => 0.0,
        }
    }
}

fn coords(d: usize, q: usize, lin: usize, with_bias: bool) -> Vec<Coord> {
    let mut out = Vec::new();
    for u in 0..d {
        for v in u..d {
            out.push(Coord::Quad(u, v));
        }
    }
    out.extend((0..lin).map(Coord::Lin));
    if with_bias {
        out.push(Coord::Bias);
    }
    out.extend((0..q).map(Coord::Expert));
    out
}

/// Value, gradient and Hessian of the expert in `η` at one point.
struct ExpertJet {
    value: f64,
    grad: Vec<f64>,
    hess: Vec<f64>,
}

fn expert_jet(spec: &ExpertSpec, x: &[f64], eta: &[f64], fd_step: f64, hessian: bool) -> ExpertJet {
    let q = spec.param_dim();
    let d = x.len();
    let mut grad = vec![0.0; q];
    let value = spec.value_and_grad_unchecked(x, eta, &mut grad);
    let mut hess = vec![0.0; q * q];
    if hessian {
        match spec.family {
            ExpertFamily::Linear => {}
            ExpertFamily::Polynomial { degree } => {
                let z = eta[d] + x.iter().zip(eta).map(|(a, b)| a * b).sum::<f64>();
                let p = f64::from(degree);
                let scale = if degree >= 2 { p * (p - 1.0) * z.powi(degree as i32 - 2) } else { 0.0 };
                let dz = |k: usize| if k < d { x[k] } else { 1.0 };
                for k in 0..q {
                    for l in 0..q {
                        hess[k * q + l] = scale * dz(k) * dz(l);
                    }
                }
            }
            ExpertFamily::TwoLayer { .. } | ExpertFamily::Ridge { .. } => {
                let mut up = vec![0.0; q];
                let mut down = vec![0.0; q];
                let mut shifted = eta.to_vec();
                for l in 0..q {
                    shifted[l] = eta[l] + fd_step;
                    spec.value_and_grad_unchecked(x, &shifted, &mut up);
                    shifted[l] = eta[l] - fd_step;
                    spec.value_and_grad_unchecked(x, &shifted, &mut down);
                    shifted[l] = eta[l];
                    for k in 0..q {
                        hess[k * q + l] = (up[k] - down[k]) / (2.0 * fd_step);
                    }
                }
                // symmetrize the difference quotients
                for k in 0..q {
                    for l in k + 1..q {
                        let m = 0.5 * (hess[k * q + l] + hess[l * q + k]);
                        hess[k * q + l] = m;
                        hess[l * q + k] = m;
                    }
                }
            }
        }
    }
    ExpertJet { value, grad, hess }
}

struct GateJet {
    s0: f64,
    s1: f64,
    s2: f64,
}

fn gate_jet(s: f64) -> GateJet {
    let s0 = sigmoid(s);
    let s1 = s0 * (1.0 - s0);
    GateJet { s0, s1, s2: s1 * (1.0 - 2.0 * s0) }
}

fn first_partial(c: Coord, x: &[f64], g: &GateJet, e: &ExpertJet) -> f64 {
    match c {
        Coord::Expert(k) => g.s0 * e.grad[k],
        _ => g.s1 * c.score_slope(x) * e.value,
    }
}

fn second_partial(c1: Coord, c2: Coord, x: &[f64], g: &GateJet, e: &ExpertJet, q: usize) -> f64 {
    match (c1, c2) {
        (Coord::Expert(k), Coord::Expert(l)) => g.s0 * e.hess[k * q + l],
        (Coord::Expert(k), gate) | (gate, Coord::Expert(k)) => g.s1 * gate.score_slope(x) * e.grad[k],
        (a, b) => g.s2 * a.score_slope(x) * b.score_slope(x) * e.value,
    }
}

fn check_distinct(atoms: &[Atom], what: &str) -> Result<()> {
    for (i, a) in atoms.iter().enumerate() {
        if atoms[..i].contains(a) {
            return Err(Error::invalid(format!("duplicate {what} at index {i}")));
        }
    }
    Ok(())
}

/// The `m × K` sample matrix of one family.
pub fn eval_family(spec: &DerivativeFamilySpec, family: FamilyKind) -> Result<DMatrix<f64>> {
    spec.validate()?;
    check_distinct(&spec.params, "atom")?;
    let d = spec.expert.input_dim;
    let q = spec.expert.param_dim();
    let at_origin = family == FamilyKind::SecondOrderAtOrigin;
    let atoms: Vec<Atom> = if at_origin {
        spec.params
            .iter()
            .map(|a| Atom {
                a: vec![0.0; d * d],
                b: vec![0.0; a.b.len()],
                ..a.clone()
            })
            .collect()
    } else {
        spec.params.clone()
    };
    if at_origin {
        check_distinct(&atoms, "atom after zeroing (A, b)")?;
    }
    let cs = coords(d, q, spec.lin_len(), !at_origin);
    let per_atom = match family {
        FamilyKind::SecondOrderAtOrigin => cs.len() + cs.len() * (cs.len() + 1) / 2,
        FamilyKind::FirstOrder => cs.len(),
    };
    let m = spec.sample_points.len();
    let mut out = DMatrix::zeros(m, per_atom * atoms.len());
    for (r, x) in spec.sample_points.iter().enumerate() {
        for (i, atom) in atoms.iter().enumerate() {
            let g = gate_jet(crate::model::score_unchecked(x, atom));
            let e = expert_jet(&spec.expert, x, &atom.eta, spec.fd_step, at_origin);
            let mut col = i * per_atom;
            for &c in &cs {
                out[(r, col)] = first_partial(c, x, &g, &e);
                col += 1;
            }
            if at_origin {
                for (k, &c1) in cs.iter().enumerate() {
                    for &c2 in &cs[k..] {
                        out[(r, col)] = second_partial(c1, c2, x, &g, &e, q);
                        col += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Every family of the spec's mode, in [`DerivativeFamilySpec::families`] order.
#[allow(non_snake_case)]
pub fn eval_F_derivatives(spec: &DerivativeFamilySpec) -> Result<Vec<(FamilyKind, DMatrix<f64>)>> {
    spec.families()
        .into_iter()
        .map(|f| eval_family(spec, f).map(|m| (f, m)))
        .collect()
}

/// Smallest singular value after scaling every column to unit norm.
/// A vanishing column gives 0.
pub fn min_singular(matrix: &DMatrix<f64>) -> Result<f64> {
    let (m, k) = matrix.shape();
    if m < k {
        return Err(Error::invalid(format!("need at least as many rows as columns, got {m} x {k}")));
    }
    if k == 0 {
        return Err(Error::invalid("matrix has no columns"));
    }
    let norms: Vec<f64> = matrix.column_iter().map(|c| c.norm()).collect();
    let largest = norms.iter().copied().fold(0.0, f64::max);
    if norms.iter().any(|&n| n <= 1e-12 * largest || !n.is_finite()) {
        return Ok(0.0);
    }
    let mut scaled = matrix.clone();
    for (mut col, n) in scaled.column_iter_mut().zip(&norms) {
        col /= *n;
    }
    let sv = scaled.singular_values();
    Ok(sv.iter().copied().fold(f64::INFINITY, f64::min).max(0.0))
}

/// Residuals of the three second-order identities that tie the gating and
/// linear-expert parameters together, maximized over all index pairs:
///
/// - `∂²F/∂A_uv∂c − ∂²F/∂b_u∂b_v`
/// - `∂²F/∂A_uv∂β − ∂²F/∂b_u∂α_v`
/// - `∂²F/∂b_u∂β − ∂²F/∂c∂α_u`
pub fn check_pde_identities(x: &[f64], atom: &Atom, expert: &ExpertSpec) -> Result<[f64; 3]> {
    if expert.family != ExpertFamily::Linear {
        return Err(Error::invalid("the identities hold for linear experts only"));
    }
    let d = expert.input_dim;
    check_len("identity point", d, x.len())?;
    atom.validate(d, expert.param_dim(), ScoreKind::FullyQuadratic)?;
    let q = expert.param_dim();
    let g = gate_jet(crate::model::score_unchecked(x, atom));
    let e = expert_jet(expert, x, &atom.eta, DEFAULT_FD_STEP, true);
    let h = |a: Coord, b: Coord| second_partial(a, b, x, &g, &e, q);
    let beta = Coord::Expert(d);
    let mut res = [0.0f64; 3];
    for u in 0..d {
        for v in 0..d {
            // ordered pairs: A_uv is a plain (non-symmetrized) coordinate here
            let quad = Coord::Quad(u, v);
            res[0] = res[0].max((h(quad, Coord::Bias) - h(Coord::Lin(u), Coord::Lin(v))).abs());
            res[1] = res[1].max((h(quad, beta) - h(Coord::Lin(u), Coord::Expert(v))).abs());
        }
        res[2] = res[2].max((h(Coord::Lin(u), beta) - h(Coord::Bias, Coord::Expert(u))).abs());
    }
    Ok(res)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Independent,
    Degenerate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyReport {
    pub family: FamilyKind,
    pub family_size: usize,
    pub sample_points: usize,
    pub min_singular_value: f64,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub mode: ProbeMode,
    pub expert: ExpertSpec,
    pub score: ScoreKind,
    pub atoms: usize,
    /// Total size over all families.
    pub family_size: usize,
    /// Minimum over all families.
    pub min_singular_value: f64,
    pub verdict: Verdict,
    pub threshold: f64,
    pub families: Vec<FamilyReport>,
}

fn verdict(min_sv: f64, threshold: f64) -> Verdict {
    if min_sv > threshold {
        Verdict::Independent
    } else {
        Verdict::Degenerate
    }
}

fn random_atom(rng: &mut CounterRng, expert: &ExpertSpec, score: ScoreKind) -> Atom {
    let d = expert.input_dim;
    let gate = Normal::new(0.0, (1.0 / d as f64).sqrt()).expect("valid std");
    let unit = Normal::new(0.0, 1.0).expect("valid std");
    loop {
        let atom = Atom {
            a: (0..d * d).map(|_| gate.sample(rng)).collect(),
            b: (0..score.linear_len(d)).map(|_| gate.sample(rng)).collect(),
            c: unit.sample(rng),
            eta: (0..expert.param_dim()).map(|_| unit.sample(rng)).collect(),
        };
        let alpha_norm = atom.eta[..d].iter().map(|v| v * v).sum::<f64>().sqrt();
        let ok = match expert.family {
            ExpertFamily::TwoLayer { .. } => alpha_norm > 1e-3 && atom.eta[d + 1].abs() > 1e-3,
            ExpertFamily::Ridge { .. } => alpha_norm > 1e-3,
            _ => true,
        };
        if ok {
            return atom;
        }
    }
}

fn near_kink(expert: &ExpertSpec, atoms: &[Atom], x: &[f64]) -> bool {
    let relu = matches!(
        expert.family,
        ExpertFamily::TwoLayer { activation: crate::model::Activation::Relu }
            | ExpertFamily::Ridge { activation: crate::model::Activation::Relu }
    );
    let d = x.len();
    relu && atoms.iter().any(|a| {
        let z = a.eta[d] + x.iter().zip(&a.eta[..d]).map(|(u, v)| u * v).sum::<f64>();
        z.abs() < KINK_MARGIN
    })
}

fn sample_points(rng: &mut CounterRng, expert: &ExpertSpec, atoms: &[Atom], m: usize) -> Vec<Vec<f64>> {
    let d = expert.input_dim;
    let mut out = Vec::with_capacity(m);
    while out.len() < m {
        let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        if !near_kink(expert, atoms, &x) {
            out.push(x);
        }
    }
    out
}

/// Probe with `ℓ` random distinct atoms and the default threshold.
pub fn probe(
    mode: ProbeMode,
    expert: ExpertSpec,
    score: ScoreKind,
    atoms: usize,
    rng: &mut CounterRng,
) -> Result<ProbeReport> {
    probe_with_threshold(mode, expert, score, atoms, DEFAULT_THRESHOLD, rng)
}

pub fn probe_with_threshold(
    mode: ProbeMode,
    expert: ExpertSpec,
    score: ScoreKind,
    atoms: usize,
    threshold: f64,
    rng: &mut CounterRng,
) -> Result<ProbeReport> {
    if atoms == 0 {
        return Err(Error::invalid("probe needs at least one atom"));
    }
    let params: Vec<Atom> = (0..atoms).map(|_| random_atom(rng, &expert, score)).collect();
    let mut spec = DerivativeFamilySpec {
        mode,
        expert,
        score,
        params,
        sample_points: Vec::new(),
        fd_step: DEFAULT_FD_STEP,
    };
    let mut families = Vec::new();
    for family in spec.families() {
        let size = spec.family_size(family);
        spec.sample_points = sample_points(rng, &expert, &spec.params, OVERSAMPLING * size);
        let sv = min_singular(&eval_family(&spec, family)?)?;
        families.push(FamilyReport {
            family,
            family_size: size,
            sample_points: spec.sample_points.len(),
            min_singular_value: sv,
            verdict: verdict(sv, threshold),
        });
    }
    let min_sv = families
        .iter()
        .map(|f| f.min_singular_value)
        .fold(f64::INFINITY, f64::min);
    Ok(ProbeReport {
        mode,
        expert,
        score,
        atoms,
        family_size: families.iter().map(|f| f.family_size).sum(),
        min_singular_value: min_sv,
        verdict: verdict(min_sv, threshold),
        threshold,
        families,
    })
}
