//! Gating functions, quadratic affinity scores, expert families and the
//! mixture-of-experts regression function.
//!
//! An [`Atom`] stores one expert's parameters `(A, b, c, η)`; the quadratic
//! term `A` is kept as a flat row-major `d × d` vector. Under
//! [`ScoreKind::PartiallyQuadratic`] the linear term `b` is empty.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Scores beyond this magnitude saturate the logistic function.
const EXP_CLAMP: f64 = 500.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// `xᵀAx + bᵀx + c`
    FullyQuadratic,
    /// `xᵀAx + c`
    PartiallyQuadratic,
}

impl ScoreKind {
    pub fn has_linear_term(self) -> bool {
        matches!(self, ScoreKind::FullyQuadratic)
    }

    pub fn linear_len(self, d: usize) -> usize {
        if self.has_linear_term() {
            d
        } else {
            0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatingKind {
    /// Independent per-expert weight `σ(s_j)`.
    Sigmoid,
    /// `softmax(s)_j`; weights compete and sum to one.
    Softmax,
}

impl GatingKind {
    pub fn name(self) -> &'static str {
        match self {
            GatingKind::Sigmoid => "sigmoid",
            GatingKind::Softmax => "softmax",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    /// Exact form `z·Φ(z)`.
    Gelu,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Gelu => z * std_normal_cdf(z),
        }
    }

    /// Derivative; the ReLU subgradient at 0 is 0.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => std_normal_cdf(z) + z * std_normal_pdf(z),
        }
    }
}

#[inline]
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

#[inline]
pub fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExpertFamily {
    /// `αᵀx + β`, η = (α, β).
    Linear,
    /// `(αᵀx + β)^p`, η = (α, β).
    Polynomial { degree: u32 },
    /// `λ·φ(αᵀx + β)`, η = (α, β, λ).
    TwoLayer { activation: Activation },
    /// `φ(αᵀx + β)` with no output scale, η = (α, β).
    Ridge { activation: Activation },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExpertSpec {
    pub family: ExpertFamily,
    pub input_dim: usize,
}

impl ExpertSpec {
    pub fn new(family: ExpertFamily, input_dim: usize) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::invalid("expert input dimension must be positive"));
        }
        if let ExpertFamily::Polynomial { degree: 0 } = family {
            return Err(Error::invalid("polynomial degree must be positive"));
        }
        Ok(Self { family, input_dim })
    }

    pub fn linear(d: usize) -> Self {
        Self {
            family: ExpertFamily::Linear,
            input_dim: d,
        }
    }

    pub fn param_dim(&self) -> usize {
        match self.family {
            ExpertFamily::TwoLayer { .. } => self.input_dim + 2,
            _ => self.input_dim + 1,
        }
    }

    /// Whether η splits as (α, β) with nothing else, as the minimax loss requires.
    pub fn is_polynomial_like(&self) -> bool {
        matches!(
            self.family,
            ExpertFamily::Linear | ExpertFamily::Polynomial { .. }
        )
    }

    #[inline]
    fn pre_activation(x: &[f64], eta: &[f64]) -> f64 {
        let d = x.len();
        let mut z = eta[d];
        for (xi, ai) in x.iter().zip(&eta[..d]) {
            z += xi * ai;
        }
        z
    }

    /// Expert output without dimension checks.
    #[inline]
    pub fn value_unchecked(&self, x: &[f64], eta: &[f64]) -> f64 {
        let z = Self::pre_activation(x, eta);
        match self.family {
            ExpertFamily::Linear => z,
            ExpertFamily::Polynomial { degree } => z.powi(degree as i32),
            ExpertFamily::TwoLayer { activation } => eta[x.len() + 1] * activation.apply(z),
            ExpertFamily::Ridge { activation } => activation.apply(z),
        }
    }

    /// Expert output and ∂E/∂η written into `grad` (length q).
    #[inline]
    pub fn value_and_grad_unchecked(&self, x: &[f64], eta: &[f64], grad: &mut [f64]) -> f64 {
        let d = x.len();
        let z = Self::pre_activation(x, eta);
        let (value, dz) = match self.family {
            ExpertFamily::Linear => (z, 1.0),
            ExpertFamily::Polynomial { degree } => {
                let p = degree as i32;
                (z.powi(p), f64::from(degree) * z.powi(p - 1))
            }
            ExpertFamily::TwoLayer { activation } => {
                let lambda = eta[d + 1];
                let phi = activation.apply(z);
                grad[d + 1] = phi;
                (lambda * phi, lambda * activation.derivative(z))
            }
            ExpertFamily::Ridge { activation } => (activation.apply(z), activation.derivative(z)),
        };
        for (g, xi) in grad[..d].iter_mut().zip(x) {
            *g = dz * xi;
        }
        grad[d] = dz;
        value
    }
}

/// One expert's parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    /// Quadratic gating term, row-major `d × d`.
    pub a: Vec<f64>,
    /// Linear gating term; empty under the partially quadratic score.
    pub b: Vec<f64>,
    pub c: f64,
    pub eta: Vec<f64>,
}

impl Atom {
    pub fn zeros(d: usize, q: usize, score: ScoreKind) -> Self {
        Self {
            a: vec![0.0; d * d],
            b: vec![0.0; score.linear_len(d)],
            c: 0.0,
            eta: vec![0.0; q],
        }
    }

    pub fn validate(&self, d: usize, q: usize, score: ScoreKind) -> Result<()> {
        check_len("atom quadratic term", d * d, self.a.len())?;
        check_len("atom linear term", score.linear_len(d), self.b.len())?;
        check_len("atom expert parameters", q, self.eta.len())?;
        let finite = self.a.iter().chain(&self.b).chain(&self.eta).all(|v| v.is_finite())
            && self.c.is_finite();
        if !finite {
            return Err(Error::invalid("atom has non-finite entries"));
        }
        Ok(())
    }

    /// Number of scalar parameters in the flat layout `(vec A, b, c, η)`.
    pub fn flat_len(d: usize, q: usize, score: ScoreKind) -> usize {
        d * d + score.linear_len(d) + 1 + q
    }

    pub fn write_flat(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.a);
        out.extend_from_slice(&self.b);
        out.push(self.c);
        out.extend_from_slice(&self.eta);
    }

    fn read_flat(flat: &[f64], d: usize, q: usize, score: ScoreKind) -> Self {
        let nb = score.linear_len(d);
        let (a, rest) = flat.split_at(d * d);
        let (b, rest) = rest.split_at(nb);
        let c = rest[0];
        Self {
            a: a.to_vec(),
            b: b.to_vec(),
            c,
            eta: rest[1..1 + q].to_vec(),
        }
    }

    /// Whether the gating parameters `(A, b)` vanish (the bias is not considered).
    pub fn has_zero_gating_slope(&self) -> bool {
        self.a.iter().chain(&self.b).all(|v| *v == 0.0)
    }
}

/// Box `[−B, B]` on every parameter entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamBounds {
    pub box_radius: f64,
}

impl Default for ParamBounds {
    fn default() -> Self {
        Self { box_radius: 10.0 }
    }
}

impl ParamBounds {
    pub fn new(box_radius: f64) -> Result<Self> {
        if box_radius > 0.0 && box_radius.is_finite() {
            Ok(Self { box_radius })
        } else {
            Err(Error::invalid(format!("box radius must be positive, got {box_radius}")))
        }
    }

    #[inline]
    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(-self.box_radius, self.box_radius)
    }

    pub fn clamp_slice(&self, values: &mut [f64]) {
        for v in values {
            *v = self.clamp(*v);
        }
    }

    pub fn clamp_atom(&self, atom: &mut Atom) {
        self.clamp_slice(&mut atom.a);
        self.clamp_slice(&mut atom.b);
        atom.c = self.clamp(atom.c);
        self.clamp_slice(&mut atom.eta);
    }

    pub fn contains(&self, atom: &Atom) -> bool {
        atom.a
            .iter()
            .chain(&atom.b)
            .chain(&atom.eta)
            .chain(std::iter::once(&atom.c))
            .all(|v| v.abs() <= self.box_radius)
    }
}

/// A finite collection of atoms sharing one expert family, score and gating.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingMeasure {
    pub atoms: Vec<Atom>,
    pub expert: ExpertSpec,
    pub score: ScoreKind,
    pub gating: GatingKind,
}

impl MixingMeasure {
    pub fn new(
        atoms: Vec<Atom>,
        expert: ExpertSpec,
        score: ScoreKind,
        gating: GatingKind,
    ) -> Result<Self> {
        let g = Self {
            atoms,
            expert,
            score,
            gating,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.atoms.is_empty() {
            return Err(Error::invalid("mixing measure needs at least one atom"));
        }
        let (d, q) = (self.dim(), self.expert.param_dim());
        for atom in &self.atoms {
            atom.validate(d, q, self.score)?;
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.expert.input_dim
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn atom_flat_len(&self) -> usize {
        Atom::flat_len(self.dim(), self.expert.param_dim(), self.score)
    }

    pub fn flat_len(&self) -> usize {
        self.len() * self.atom_flat_len()
    }

    /// Parameters ordered atom by atom as `(vec A, b, c, η)`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        for atom in &self.atoms {
            atom.write_flat(&mut out);
        }
        out
    }

    /// Measure with this one's structure and the given flat parameters.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        check_len("flat parameter vector", self.flat_len(), flat.len())?;
        let (d, q) = (self.dim(), self.expert.param_dim());
        let atoms = flat
            .chunks(self.atom_flat_len())
            .map(|chunk| Atom::read_flat(chunk, d, q, self.score))
            .collect();
        Ok(Self {
            atoms,
            ..self.clone()
        })
    }

    pub fn with_gating(&self, gating: GatingKind) -> Self {
        Self {
            gating,
            ..self.clone()
        }
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z.clamp(-EXP_CLAMP, EXP_CLAMP)).exp())
}

/// `s(x, θ)` without dimension checks.
#[inline]
pub fn score_unchecked(x: &[f64], atom: &Atom) -> f64 {
    let d = x.len();
    let mut s = atom.c;
    for (u, xu) in x.iter().enumerate() {
        let row = &atom.a[u * d..(u + 1) * d];
        let mut acc = 0.0;
        for (auv, xv) in row.iter().zip(x) {
            acc += auv * xv;
        }
        s += xu * acc;
    }
    for (bu, xu) in atom.b.iter().zip(x) {
        s += bu * xu;
    }
    s
}

pub fn affinity_score(x: &[f64], atom: &Atom, score: ScoreKind) -> Result<f64> {
    let d = x.len();
    check_len("affinity score quadratic term", d * d, atom.a.len())?;
    check_len("affinity score linear term", score.linear_len(d), atom.b.len())?;
    Ok(score_unchecked(x, atom))
}

/// Gate weights from precomputed scores; writes into `out`.
pub fn gate_weights_from_scores(scores: &[f64], gating: GatingKind, out: &mut [f64]) -> Result<()> {
    if let Some(atom) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFiniteScore { atom });
    }
    match gating {
        GatingKind::Sigmoid => {
            for (w, s) in out.iter_mut().zip(scores) {
                *w = sigmoid(*s);
            }
        }
        GatingKind::Softmax => softmax_into(scores, out),
    }
    Ok(())
}

/// Max-subtracted softmax.
#[inline]
pub fn softmax_into(scores: &[f64], out: &mut [f64]) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (w, s) in out.iter_mut().zip(scores) {
        *w = (s - max).exp();
        total += *w;
    }
    for w in out.iter_mut() {
        *w /= total;
    }
}

pub fn gate_weights(x: &[f64], g: &MixingMeasure) -> Result<Vec<f64>> {
    check_len("gate input", g.dim(), x.len())?;
    let scores = g
        .atoms
        .iter()
        .map(|atom| affinity_score(x, atom, g.score))
        .collect::<Result<Vec<_>>>()?;
    let mut out = vec![0.0; scores.len()];
    gate_weights_from_scores(&scores, g.gating, &mut out)?;
    Ok(out)
}

pub fn expert_eval(x: &[f64], eta: &[f64], spec: &ExpertSpec) -> Result<f64> {
    check_len("expert input", spec.input_dim, x.len())?;
    check_len("expert parameters", spec.param_dim(), eta.len())?;
    Ok(spec.value_unchecked(x, eta))
}

pub fn expert_grad(x: &[f64], eta: &[f64], spec: &ExpertSpec) -> Result<Vec<f64>> {
    check_len("expert input", spec.input_dim, x.len())?;
    check_len("expert parameters", spec.param_dim(), eta.len())?;
    let mut grad = vec![0.0; spec.param_dim()];
    spec.value_and_grad_unchecked(x, eta, &mut grad);
    Ok(grad)
}

/// `f_G(x) = Σ_j w_j(x) · E(x, η_j)`.
pub fn regression_eval(g: &MixingMeasure, x: &[f64]) -> Result<f64> {
    let weights = gate_weights(x, g)?;
    Ok(weights
        .iter()
        .zip(&g.atoms)
        .map(|(w, atom)| w * g.expert.value_unchecked(x, &atom.eta))
        .sum())
}

/// Reusable buffers for evaluating one measure at many points.
pub(crate) struct Evaluator<'a> {
    g: &'a MixingMeasure,
    scores: Vec<f64>,
    weights: Vec<f64>,
}

impl<'a> Evaluator<'a> {
    pub(crate) fn new(g: &'a MixingMeasure) -> Self {
        let n = g.len();
        Self {
            g,
            scores: vec![0.0; n],
            weights: vec![0.0; n],
        }
    }

    pub(crate) fn eval(&mut self, x: &[f64]) -> Result<f64> {
        for (s, atom) in self.scores.iter_mut().zip(&self.g.atoms) {
            *s = score_unchecked(x, atom);
        }
        gate_weights_from_scores(&self.scores, self.g.gating, &mut self.weights)?;
        Ok(self
            .weights
            .iter()
            .zip(&self.g.atoms)
            .map(|(w, atom)| w * self.g.expert.value_unchecked(x, &atom.eta))
            .sum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{CounterRng, Stream};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_vec(rng: &mut CounterRng, len: usize) -> Vec<f64> {
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn random_atom(rng: &mut CounterRng, d: usize, q: usize, score: ScoreKind) -> Atom {
        Atom {
            a: random_vec(rng, d * d),
            b: random_vec(rng, score.linear_len(d)),
            c: rng.gen_range(-1.0..1.0),
            eta: random_vec(rng, q),
        }
    }

    #[test]
    fn score_at_origin_is_bias() {
        let mut atom = Atom::zeros(3, 4, ScoreKind::FullyQuadratic);
        atom.a = vec![0.3; 9];
        atom.b = vec![-2.0, 1.0, 5.0];
        atom.c = 1.7;
        let s = affinity_score(&[0.0; 3], &atom, ScoreKind::FullyQuadratic).unwrap();
        assert_eq!(s, 1.7);
    }

    #[test]
    fn score_by_hand() {
        let atom = Atom {
            a: vec![1.0, 0.0, 0.0, 1.0],
            b: vec![1.0, 0.0],
            c: 0.0,
            eta: vec![0.0; 3],
        };
        let s = affinity_score(&[1.0, 1.0], &atom, ScoreKind::FullyQuadratic).unwrap();
        assert_eq!(s, 3.0);
    }

    #[test]
    fn score_matches_double_loop() {
        let mut rng = CounterRng::new(11, Stream::Aux, 0);
        for _ in 0..20 {
            let atom = random_atom(&mut rng, 3, 4, ScoreKind::FullyQuadratic);
            let x = random_vec(&mut rng, 3);
            let mut expected = atom.c;
            for u in 0..3 {
                for v in 0..3 {
                    expected += x[u] * atom.a[u * 3 + v] * x[v];
                }
                expected += atom.b[u] * x[u];
            }
            let s = affinity_score(&x, &atom, ScoreKind::FullyQuadratic).unwrap();
            assert_abs_diff_eq!(s, expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn score_rejects_mismatched_dims() {
        let atom = Atom::zeros(2, 3, ScoreKind::FullyQuadratic);
        assert!(matches!(
            affinity_score(&[0.0; 3], &atom, ScoreKind::FullyQuadratic),
            Err(Error::Dimension { .. })
        ));
        // b present but partially quadratic requested
        assert!(affinity_score(&[0.0; 2], &atom, ScoreKind::PartiallyQuadratic).is_err());
    }

    fn measure(n: usize, gating: GatingKind) -> MixingMeasure {
        let atoms = (0..n).map(|_| Atom::zeros(2, 3, ScoreKind::FullyQuadratic)).collect();
        MixingMeasure::new(atoms, ExpertSpec::linear(2), ScoreKind::FullyQuadratic, gating).unwrap()
    }

    #[test]
    fn zero_scores_sigmoid_half() {
        let w = gate_weights(&[0.0, 0.0], &measure(3, GatingKind::Sigmoid)).unwrap();
        assert_eq!(w, vec![0.5; 3]);
    }

    #[test]
    fn equal_scores_softmax_uniform() {
        let mut g = measure(4, GatingKind::Softmax);
        for atom in &mut g.atoms {
            atom.c = 2.5;
        }
        let w = gate_weights(&[0.3, -0.7], &g).unwrap();
        for wi in w {
            assert_abs_diff_eq!(wi, 0.25, epsilon = 1e-15);
        }
    }

    #[test]
    fn softmax_matches_high_precision_reference() {
        // Reference computed with exp/sum in 80-digit arithmetic (mpmath) for these scores.
        let scores = [0.8123, -1.25, 2.0625];
        let expected = [
            0.21653447467841236,
            0.027534775547744004,
            0.7559307497738437,
        ];
        let mut out = [0.0; 3];
        gate_weights_from_scores(&scores, GatingKind::Softmax, &mut out).unwrap();
        for (o, e) in out.iter().zip(expected) {
            assert_abs_diff_eq!(*o, e, epsilon = 1e-12);
        }
    }

    #[test]
    fn non_finite_score_reports_atom() {
        let mut out = [0.0; 3];
        let err = gate_weights_from_scores(&[0.0, f64::NAN, 1.0], GatingKind::Sigmoid, &mut out)
            .unwrap_err();
        assert!(matches!(err, Error::NonFiniteScore { atom: 1 }));
    }

    #[test]
    fn expert_examples() {
        let lin = ExpertSpec::linear(3);
        assert_eq!(expert_eval(&[4.0, -1.0, 9.0], &[0.0, 0.0, 0.0, 2.5], &lin).unwrap(), 2.5);

        let relu = ExpertSpec::new(ExpertFamily::TwoLayer { activation: Activation::Relu }, 2).unwrap();
        assert_eq!(expert_eval(&[3.0, 1.0], &[1.0, -1.0, 0.0, 2.0], &relu).unwrap(), 4.0);

        let cubic = ExpertSpec::new(ExpertFamily::Polynomial { degree: 3 }, 3).unwrap();
        let mut rng = CounterRng::new(5, Stream::Aux, 0);
        for _ in 0..20 {
            let eta = random_vec(&mut rng, 4);
            let x = random_vec(&mut rng, 3);
            let z = eta[0] * x[0] + eta[1] * x[1] + eta[2] * x[2] + eta[3];
            assert_abs_diff_eq!(expert_eval(&x, &eta, &cubic).unwrap(), z * z * z, epsilon = 1e-12);
        }
    }

    #[test]
    fn expert_grad_examples() {
        let lin = ExpertSpec::linear(2);
        assert_eq!(expert_grad(&[0.3, -2.0], &[5.0, 1.0, 7.0], &lin).unwrap(), vec![0.3, -2.0, 1.0]);

        let quad = ExpertSpec::new(ExpertFamily::Polynomial { degree: 2 }, 2).unwrap();
        assert_eq!(expert_grad(&[1.0, 1.0], &[1.0, 0.0, 1.0], &quad).unwrap(), vec![4.0, 4.0, 4.0]);
    }

    #[test]
    fn relu_subgradient_at_kink_is_zero() {
        let relu = ExpertSpec::new(ExpertFamily::TwoLayer { activation: Activation::Relu }, 1).unwrap();
        let g = expert_grad(&[1.0], &[1.0, -1.0, 3.0], &relu).unwrap();
        assert_eq!(g, vec![0.0, 0.0, 0.0]);
    }

    fn finite_diff_grad(spec: &ExpertSpec, x: &[f64], eta: &[f64], h: f64) -> Vec<f64> {
        (0..eta.len())
            .map(|k| {
                let mut p = eta.to_vec();
                let mut m = eta.to_vec();
                p[k] += h;
                m[k] -= h;
                (spec.value_unchecked(x, &p) - spec.value_unchecked(x, &m)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn expert_grad_matches_finite_differences() {
        let families = [
            ExpertFamily::Linear,
            ExpertFamily::Polynomial { degree: 2 },
            ExpertFamily::Polynomial { degree: 3 },
            ExpertFamily::TwoLayer { activation: Activation::Gelu },
            ExpertFamily::TwoLayer { activation: Activation::Relu },
            ExpertFamily::Ridge { activation: Activation::Gelu },
            ExpertFamily::Ridge { activation: Activation::Relu },
        ];
        let mut rng = CounterRng::new(9, Stream::Aux, 0);
        for family in families {
            let spec = ExpertSpec::new(family, 3).unwrap();
            let mut checked = 0;
            while checked < 25 {
                let eta = random_vec(&mut rng, spec.param_dim());
                let x = random_vec(&mut rng, 3);
                let z = eta[0] * x[0] + eta[1] * x[1] + eta[2] * x[2] + eta[3];
                if z.abs() <= 1e-3 {
                    continue;
                }
                let analytic = expert_grad(&x, &eta, &spec).unwrap();
                let numeric = finite_diff_grad(&spec, &x, &eta, 1e-5);
                for (a, n) in analytic.iter().zip(&numeric) {
                    let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
                    assert!(rel <= 1e-5 || (a - n).abs() <= 1e-10, "{family:?}: {a} vs {n}");
                }
                checked += 1;
            }
        }
    }

    #[test]
    fn saturated_single_atom() {
        let mut g = measure(1, GatingKind::Sigmoid);
        g.atoms[0].c = 20.0;
        g.atoms[0].eta = vec![0.0, 0.0, 3.0];
        assert_abs_diff_eq!(regression_eval(&g, &[0.4, -0.1]).unwrap(), 3.0, epsilon = 1e-8);
    }

    #[test]
    fn symmetric_experts_cancel() {
        let mut g = measure(2, GatingKind::Sigmoid);
        g.atoms[0].eta = vec![0.0, 0.0, 1.0];
        g.atoms[1].eta = vec![0.0, 0.0, -1.0];
        assert_eq!(regression_eval(&g, &[0.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn regression_matches_per_term_sum() {
        let mut rng = CounterRng::new(21, Stream::Aux, 0);
        let spec = ExpertSpec::new(ExpertFamily::TwoLayer { activation: Activation::Relu }, 3).unwrap();
        for gating in [GatingKind::Sigmoid, GatingKind::Softmax] {
            let atoms: Vec<_> = (0..3)
                .map(|_| random_atom(&mut rng, 3, spec.param_dim(), ScoreKind::FullyQuadratic))
                .collect();
            let g = MixingMeasure::new(atoms, spec, ScoreKind::FullyQuadratic, gating).unwrap();
            let x = random_vec(&mut rng, 3);
            let scores: Vec<f64> = g
                .atoms
                .iter()
                .map(|a| affinity_score(&x, a, g.score).unwrap())
                .collect();
            let weights: Vec<f64> = match gating {
                GatingKind::Sigmoid => scores.iter().map(|s| 1.0 / (1.0 + (-s).exp())).collect(),
                GatingKind::Softmax => {
                    let z: f64 = scores.iter().map(|s| s.exp()).sum();
                    scores.iter().map(|s| s.exp() / z).collect()
                }
            };
            let expected: f64 = weights
                .iter()
                .zip(&g.atoms)
                .map(|(w, a)| w * expert_eval(&x, &a.eta, &spec).unwrap())
                .sum();
            assert_abs_diff_eq!(regression_eval(&g, &x).unwrap(), expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn flat_layout_round_trips() {
        let mut rng = CounterRng::new(3, Stream::Aux, 0);
        for score in [ScoreKind::FullyQuadratic, ScoreKind::PartiallyQuadratic] {
            let atoms = (0..3).map(|_| random_atom(&mut rng, 2, 3, score)).collect();
            let g = MixingMeasure::new(atoms, ExpertSpec::linear(2), score, GatingKind::Sigmoid).unwrap();
            let flat = g.to_flat();
            assert_eq!(flat.len(), 3 * Atom::flat_len(2, 3, score));
            assert_eq!(g.with_flat(&flat).unwrap(), g);
        }
    }

    fn arb_case() -> impl Strategy<Value = (Vec<f64>, Vec<Vec<f64>>, Vec<f64>)> {
        (1usize..5).prop_flat_map(|n| {
            (
                prop::collection::vec(-1.0f64..1.0, 2),
                prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 4 + 2 + 1 + 3), n),
                prop::collection::vec(-3.0f64..3.0, 1),
            )
        })
    }

    fn build(params: &[Vec<f64>], gating: GatingKind) -> MixingMeasure {
        let atoms = params
            .iter()
            .map(|p| Atom {
                a: p[..4].to_vec(),
                b: p[4..6].to_vec(),
                c: p[6],
                eta: p[7..10].to_vec(),
            })
            .collect();
        MixingMeasure::new(atoms, ExpertSpec::linear(2), ScoreKind::FullyQuadratic, gating).unwrap()
    }

    proptest! {
        #[test]
        fn sigmoid_weights_do_not_compete((x, params, delta) in arb_case()) {
            let g = build(&params, GatingKind::Sigmoid);
            let before = gate_weights(&x, &g).unwrap();
            for w in &before {
                prop_assert!(*w > 0.0 && *w < 1.0);
            }
            let mut bumped = g.clone();
            let shift = delta[0].abs() + 0.1;
            bumped.atoms[0].c += shift;
            let after = gate_weights(&x, &bumped).unwrap();
            prop_assert!(after[0] > before[0]);
            for j in 1..before.len() {
                prop_assert_eq!(after[j], before[j]);
            }
        }

        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant((x, params, delta) in arb_case()) {
            let g = build(&params, GatingKind::Softmax);
            let w = gate_weights(&x, &g).unwrap();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            let mut shifted = g.clone();
            for atom in &mut shifted.atoms {
                atom.c += delta[0];
            }
            let w2 = gate_weights(&x, &shifted).unwrap();
            for (a, b) in w.iter().zip(&w2) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn regression_bounded_by_expert_magnitudes((x, params, _d) in arb_case()) {
            for gating in [GatingKind::Sigmoid, GatingKind::Softmax] {
                let g = build(&params, gating);
                let f = regression_eval(&g, &x).unwrap();
                let bound: f64 = g.atoms.iter().map(|a| g.expert.value_unchecked(&x, &a.eta).abs()).sum();
                prop_assert!(f.abs() <= bound + 1e-12);
            }
        }

        #[test]
        fn polynomial_one_equals_linear(
            x in prop::collection::vec(-1.0f64..1.0, 3),
            eta in prop::collection::vec(-2.0f64..2.0, 4),
        ) {
            let lin = ExpertSpec::linear(3);
            let p1 = ExpertSpec::new(ExpertFamily::Polynomial { degree: 1 }, 3).unwrap();
            let a = expert_eval(&x, &eta, &lin).unwrap();
            let b = expert_eval(&x, &eta, &p1).unwrap();
            prop_assert!((a - b).abs() <= 1e-15);
            let ga = expert_grad(&x, &eta, &lin).unwrap();
            let gb = expert_grad(&x, &eta, &p1).unwrap();
            for (u, v) in ga.iter().zip(&gb) {
                prop_assert!((u - v).abs() <= 1e-15);
            }
        }
    }
}
