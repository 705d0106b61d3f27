//! Softmax and sigmoid self-attention, and the rewriting of each attention
//! row as a mixture of experts with quadratic affinity scores.
//!
//! With `B = W_Q W_Kᵀ / √d_k`, row `i` of `σ(X B Xᵀ) X W_V` equals
//! `Σ_j σ(x_i B x_jᵀ) · x_j W_V`: a gate driven by a quadratic form of the
//! concatenated sequence and an expert `x_j W_V` per token.

use nalgebra::DMatrix;
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{sigmoid, softmax_into, GatingKind};
use crate::rng::{CounterRng, Stream};

/// `N × d` matrix of token rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    x: DMatrix<f64>,
}

impl TokenSequence {
    pub fn new(x: DMatrix<f64>) -> Result<Self> {
        if x.nrows() == 0 || x.ncols() == 0 {
            return Err(Error::invalid("token sequence needs N >= 1 and d >= 1"));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("token sequence has non-finite entries"));
        }
        Ok(Self { x })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::invalid("token rows have unequal lengths"));
        }
        Self::new(DMatrix::from_fn(n, d, |i, j| rows[i][j]))
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.x
    }

    /// `[x_1, …, x_N]` as a `1 × Nd` row.
    pub fn concatenated(&self) -> DMatrix<f64> {
        let (n, d) = (self.len(), self.dim());
        DMatrix::from_fn(1, n * d, |_, k| self.x[(k / d, k % d)])
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            x: DMatrix::from_fn(self.len(), self.dim(), |i, j| self.x[(perm[i], j)]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub w_q: DMatrix<f64>,
    pub w_k: DMatrix<f64>,
    pub w_v: DMatrix<f64>,
}

impl AttentionWeights {
    pub fn new(w_q: DMatrix<f64>, w_k: DMatrix<f64>, w_v: DMatrix<f64>) -> Result<Self> {
        let d = w_q.nrows();
        if w_k.nrows() != d || w_v.nrows() != d {
            return Err(Error::invalid("W_Q, W_K, W_V must share the input dimension"));
        }
        if w_q.ncols() != w_k.ncols() {
            return Err(Error::invalid("W_Q and W_K must share d_k"));
        }
        if w_q.iter().chain(w_k.iter()).chain(w_v.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("attention weights have non-finite entries"));
        }
        Ok(Self { w_q, w_k, w_v })
    }

    pub fn input_dim(&self) -> usize {
        self.w_q.nrows()
    }

    pub fn key_dim(&self) -> usize {
        self.w_q.ncols()
    }

    pub fn value_dim(&self) -> usize {
        self.w_v.ncols()
    }

    /// `B = W_Q W_Kᵀ / √d_k`.
    pub fn bilinear(&self) -> Result<DMatrix<f64>> {
        let dk = self.key_dim();
        if dk == 0 {
            return Err(Error::invalid("d_k must be positive"));
        }
        Ok(&self.w_q * self.w_k.transpose() / (dk as f64).sqrt())
    }

    fn check(&self, seq: &TokenSequence) -> Result<()> {
        if self.key_dim() == 0 {
            return Err(Error::invalid("d_k must be positive"));
        }
        crate::error::check_len("attention input dimension", self.input_dim(), seq.dim())
    }
}

fn scaled_scores(seq: &TokenSequence, w: &AttentionWeights) -> Result<DMatrix<f64>> {
    w.check(seq)?;
    let q = seq.matrix() * &w.w_q;
    let k = seq.matrix() * &w.w_k;
    Ok(q * k.transpose() / (w.key_dim() as f64).sqrt())
}

/// `softmax(QKᵀ/√d_k) V` with a row-wise softmax.
pub fn softmax_attn(seq: &TokenSequence, w: &AttentionWeights) -> Result<DMatrix<f64>> {
    let mut scores = scaled_scores(seq, w)?;
    let n = seq.len();
    let mut row = vec![0.0; n];
    let mut out = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            row[j] = scores[(i, j)];
        }
        softmax_into(&row, &mut out);
        for j in 0..n {
            scores[(i, j)] = out[j];
        }
    }
    Ok(scores * (seq.matrix() * &w.w_v))
}

/// `σ(QKᵀ/√d_k) V` with an element-wise sigmoid.
pub fn sigmoid_attn(seq: &TokenSequence, w: &AttentionWeights) -> Result<DMatrix<f64>> {
    let scores = scaled_scores(seq, w)?.map(sigmoid);
    Ok(scores * (seq.matrix() * &w.w_v))
}

/// Explicit selector, score and value matrices of the per-row expansion.
#[derive(Debug, Clone)]
pub struct MoeDecomposition {
    /// `E_i`, `Nd × d` with an identity block at block row `i`.
    pub selectors: Vec<DMatrix<f64>>,
    /// `M_ij = E_i B E_jᵀ`, each `Nd × Nd`.
    pub score_matrices: Vec<Vec<DMatrix<f64>>>,
    /// `P_j = E_j W_V`, each `Nd × d_v`.
    pub value_maps: Vec<DMatrix<f64>>,
}

pub fn build_decomposition(seq: &TokenSequence, w: &AttentionWeights) -> Result<MoeDecomposition> {
    w.check(seq)?;
    let (n, d) = (seq.len(), seq.dim());
    let b = w.bilinear()?;
    let selectors: Vec<_> = (0..n)
        .map(|i| {
            let mut e = DMatrix::zeros(n * d, d);
            for u in 0..d {
                e[(i * d + u, u)] = 1.0;
            }
            e
        })
        .collect();
    let score_matrices = selectors
        .iter()
        .map(|ei| {
            selectors
                .iter()
                .map(|ej| ei * &b * ej.transpose())
                .collect()
        })
        .collect();
    let value_maps = selectors.iter().map(|ej| ej * &w.w_v).collect();

    let concat = seq.concatenated();
    for (i, e) in selectors.iter().enumerate() {
        let picked = &concat * e;
        if picked.iter().zip(seq.matrix().row(i).iter()).any(|(a, b)| a != b) {
            return Err(Error::invalid(format!("selector {i} does not reproduce its token")));
        }
    }
    Ok(MoeDecomposition {
        selectors,
        score_matrices,
        value_maps,
    })
}

impl MoeDecomposition {
    /// Row `i` evaluated through the explicit matrices: `Σ_j g_j · X P_j`
    /// with `g` from the scores `X M_ij Xᵀ`.
    pub fn row(&self, concat: &DMatrix<f64>, i: usize, gating: GatingKind) -> Result<Vec<f64>> {
        let n = self.selectors.len();
        if i >= n {
            return Err(Error::IndexOutOfRange { index: i, len: n });
        }
        let scores: Vec<f64> = (0..n)
            .map(|j| (concat * &self.score_matrices[i][j] * concat.transpose())[(0, 0)])
            .collect();
        let experts: Vec<DMatrix<f64>> = self.value_maps.iter().map(|p| concat * p).collect();
        Ok(mix_experts(&scores, gating, |j, out| {
            out.iter_mut().zip(experts[j].iter()).for_each(|(o, v)| *o = *v)
        }, experts.first().map_or(0, |e| e.ncols())))
    }
}

fn mix_experts(
    scores: &[f64],
    gating: GatingKind,
    expert: impl Fn(usize, &mut [f64]),
    dv: usize,
) -> Vec<f64> {
    let mut weights = vec![0.0; scores.len()];
    match gating {
        GatingKind::Sigmoid => {
            for (w, s) in weights.iter_mut().zip(scores) {
                *w = sigmoid(*s);
            }
        }
        GatingKind::Softmax => softmax_into(scores, &mut weights),
    }
    let mut out = vec![0.0; dv];
    let mut e = vec![0.0; dv];
    for (j, wj) in weights.iter().enumerate() {
        expert(j, &mut e);
        for (o, ev) in out.iter_mut().zip(&e) {
            *o += wj * ev;
        }
    }
    out
}

/// Row `i` of the attention output computed as a mixture of experts:
/// scores `x_i B x_jᵀ`, experts `x_j W_V`. Uses index arithmetic instead of
/// the `Nd × Nd` score matrices.
pub fn attn_row_as_moe(
    seq: &TokenSequence,
    w: &AttentionWeights,
    i: usize,
    gating: GatingKind,
) -> Result<Vec<f64>> {
    w.check(seq)?;
    let n = seq.len();
    if i >= n {
        return Err(Error::IndexOutOfRange { index: i, len: n });
    }
    let b = w.bilinear()?;
    let x = seq.matrix();
    let xi_b = x.row(i) * &b;
    let scores: Vec<f64> = (0..n).map(|j| xi_b.dot(&x.row(j))).collect();
    let values = x * &w.w_v;
    Ok(mix_experts(
        &scores,
        gating,
        |j, out| {
            for (k, o) in out.iter_mut().enumerate() {
                *o = values[(j, k)];
            }
        },
        w.value_dim(),
    ))
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct EquivalenceReport {
    pub trials: usize,
    pub max_residual_sigmoid: f64,
    pub max_residual_softmax: f64,
}

impl EquivalenceReport {
    pub fn max_residual(&self) -> f64 {
        self.max_residual_sigmoid.max(self.max_residual_softmax)
    }
}

fn random_matrix(rng: &mut CounterRng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
}

/// A random instance with `N ≤ max_n` and `d, d_k, d_v ≤ max_d`.
pub fn random_instance(
    rng: &mut CounterRng,
    max_n: usize,
    max_d: usize,
) -> (TokenSequence, AttentionWeights) {
    let n = rng.gen_range(1..=max_n);
    let d = rng.gen_range(1..=max_d);
    let dk = rng.gen_range(1..=max_d);
    let dv = rng.gen_range(1..=max_d);
    let seq = TokenSequence::new(random_matrix(rng, n, d)).expect("finite sequence");
    let w = AttentionWeights::new(
        random_matrix(rng, d, dk),
        random_matrix(rng, d, dk),
        random_matrix(rng, d, dv),
    )
    .expect("consistent shapes");
    (seq, w)
}

/// Largest absolute gap between every MoE-form row and the corresponding row
/// of the direct attention output, over `trials` random instances.
pub fn equivalence_check(
    trials: usize,
    max_n: usize,
    max_d: usize,
    seed: u64,
) -> Result<EquivalenceReport> {
    if max_n == 0 || max_d == 0 {
        return Err(Error::invalid("max_n and max_d must be positive"));
    }
    let mut report = EquivalenceReport {
        trials,
        max_residual_sigmoid: 0.0,
        max_residual_softmax: 0.0,
    };
    for t in 0..trials {
        let mut rng = CounterRng::new(seed, Stream::Aux, t as u64);
        let (seq, w) = random_instance(&mut rng, max_n, max_d);
        for (gating, direct) in [
            (GatingKind::Sigmoid, sigmoid_attn(&seq, &w)?),
            (GatingKind::Softmax, softmax_attn(&seq, &w)?),
        ] {
            for i in 0..seq.len() {
                let row = attn_row_as_moe(&seq, &w, i, gating)?;
                let gap = row
                    .iter()
                    .zip(direct.row(i).iter())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                let slot = match gating {
                    GatingKind::Sigmoid => &mut report.max_residual_sigmoid,
                    GatingKind::Softmax => &mut report.max_residual_softmax,
                };
                *slot = slot.max(gap);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Literal triple loop over (i, j, k).
    fn nested_loop_attn(seq: &TokenSequence, w: &AttentionWeights, gating: GatingKind) -> DMatrix<f64> {
        let x = seq.matrix();
        let (n, d) = (x.nrows(), x.ncols());
        let (dk, dv) = (w.key_dim(), w.value_dim());
        let proj = |m: &DMatrix<f64>, i: usize, c: usize| (0..d).map(|u| x[(i, u)] * m[(u, c)]).sum::<f64>();
        let mut out = DMatrix::zeros(n, dv);
        for i in 0..n {
            let raw: Vec<f64> = (0..n)
                .map(|j| (0..dk).map(|k| proj(&w.w_q, i, k) * proj(&w.w_k, j, k)).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let weights: Vec<f64> = match gating {
                GatingKind::Sigmoid => raw.iter().map(|s| 1.0 / (1.0 + (-s).exp())).collect(),
                GatingKind::Softmax => {
                    let total: f64 = raw.iter().map(|s| s.exp()).sum();
                    raw.iter().map(|s| s.exp() / total).collect()
                }
            };
            for j in 0..n {
                for c in 0..dv {
                    out[(i, c)] += weights[j] * proj(&w.w_v, j, c);
                }
            }
        }
        out
    }

    fn fixed_instance(seed: u64, n: usize, d: usize, dk: usize, dv: usize) -> (TokenSequence, AttentionWeights) {
        let mut rng = CounterRng::new(seed, Stream::Aux, 0);
        let seq = TokenSequence::new(random_matrix(&mut rng, n, d)).unwrap();
        let w = AttentionWeights::new(
            random_matrix(&mut rng, d, dk),
            random_matrix(&mut rng, d, dk),
            random_matrix(&mut rng, d, dv),
        )
        .unwrap();
        (seq, w)
    }

    fn max_gap(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn zero_query_gives_uniform_attention() {
        let (seq, mut w) = fixed_instance(1, 4, 3, 2, 2);
        w.w_q.fill(0.0);
        let values = seq.matrix() * &w.w_v;
        let mean = values.row_mean();
        let soft = softmax_attn(&seq, &w).unwrap();
        let sig = sigmoid_attn(&seq, &w).unwrap();
        let sum = values.row_sum();
        for i in 0..4 {
            for c in 0..2 {
                assert!((soft[(i, c)] - mean[c]).abs() < 1e-14);
                assert!((sig[(i, c)] - 0.5 * sum[c]).abs() < 1e-14);
            }
        }
        let (seq, mut w) = fixed_instance(2, 3, 2, 2, 3);
        w.w_k.fill(0.0);
        let mean = (seq.matrix() * &w.w_v).row_mean();
        let soft = softmax_attn(&seq, &w).unwrap();
        for i in 0..3 {
            for c in 0..3 {
                assert!((soft[(i, c)] - mean[c]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn single_token() {
        let (seq, w) = fixed_instance(3, 1, 3, 2, 2);
        let values = seq.matrix() * &w.w_v;
        assert_eq!(softmax_attn(&seq, &w).unwrap(), values);
        let mut w0 = w.clone();
        w0.w_q.fill(0.0);
        w0.w_k.fill(0.0);
        assert_eq!(sigmoid_attn(&seq, &w0).unwrap(), values * 0.5);
    }

    #[test]
    fn matches_nested_loops() {
        for seed in 0..5 {
            let (seq, w) = fixed_instance(10 + seed, 3, 2, 2, 2);
            assert!(max_gap(&softmax_attn(&seq, &w).unwrap(), &nested_loop_attn(&seq, &w, GatingKind::Softmax)) <= 1e-12);
            assert!(max_gap(&sigmoid_attn(&seq, &w).unwrap(), &nested_loop_attn(&seq, &w, GatingKind::Sigmoid)) <= 1e-12);
        }
    }

    #[test]
    fn zero_key_dim_rejected() {
        let seq = TokenSequence::new(DMatrix::from_element(2, 2, 1.0)).unwrap();
        let w = AttentionWeights::new(DMatrix::zeros(2, 0), DMatrix::zeros(2, 0), DMatrix::zeros(2, 1)).unwrap();
        assert!(softmax_attn(&seq, &w).is_err());
        assert!(sigmoid_attn(&seq, &w).is_err());
    }

    #[test]
    fn selectors_pick_tokens() {
        let seq = TokenSequence::from_rows(&[vec![3.0], vec![5.0]]).unwrap();
        let w = AttentionWeights::new(
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let dec = build_decomposition(&seq, &w).unwrap();
        let concat = seq.concatenated();
        assert_eq!((&concat * &dec.selectors[0])[(0, 0)], 3.0);
        assert_eq!((&concat * &dec.selectors[1])[(0, 0)], 5.0);
    }

    #[test]
    fn identity_value_map_returns_tokens() {
        let (seq, mut w) = fixed_instance(4, 3, 2, 2, 2);
        w.w_v = DMatrix::identity(2, 2);
        let dec = build_decomposition(&seq, &w).unwrap();
        let concat = seq.concatenated();
        for j in 0..3 {
            let xp = &concat * &dec.value_maps[j];
            for u in 0..2 {
                assert_eq!(xp[(0, u)], seq.matrix()[(j, u)]);
            }
        }
    }

    #[test]
    fn score_matrices_reproduce_quadratic_forms() {
        let (seq, w) = fixed_instance(5, 3, 2, 2, 2);
        let dec = build_decomposition(&seq, &w).unwrap();
        let concat = seq.concatenated();
        let b = &w.w_q * w.w_k.transpose() / 2f64.sqrt();
        let x = seq.matrix();
        for i in 0..3 {
            for j in 0..3 {
                let mut direct = 0.0;
                for u in 0..2 {
                    for v in 0..2 {
                        direct += x[(i, u)] * b[(u, v)] * x[(j, v)];
                    }
                }
                let via = (&concat * &dec.score_matrices[i][j] * concat.transpose())[(0, 0)];
                assert!((direct - via).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn moe_row_examples() {
        let (seq, mut w) = fixed_instance(6, 4, 3, 2, 2);
        w.w_q.fill(0.0);
        let half_sum = (seq.matrix() * &w.w_v).row_sum() * 0.5;
        for i in 0..4 {
            let row = attn_row_as_moe(&seq, &w, i, GatingKind::Sigmoid).unwrap();
            for c in 0..2 {
                assert!((row[c] - half_sum[c]).abs() < 1e-14);
            }
        }

        let (seq, w) = fixed_instance(7, 1, 3, 2, 2);
        let xv = seq.matrix() * &w.w_v;
        let s = (seq.matrix().row(0) * w.bilinear().unwrap()).dot(&seq.matrix().row(0));
        let sig = attn_row_as_moe(&seq, &w, 0, GatingKind::Sigmoid).unwrap();
        let soft = attn_row_as_moe(&seq, &w, 0, GatingKind::Softmax).unwrap();
        for c in 0..2 {
            assert!((sig[c] - sigmoid(s) * xv[(0, c)]).abs() < 1e-14);
            assert!((soft[c] - xv[(0, c)]).abs() < 1e-14);
        }
        assert!(matches!(
            attn_row_as_moe(&seq, &w, 1, GatingKind::Sigmoid),
            Err(Error::IndexOutOfRange { index: 1, len: 1 })
        ));
    }

    #[test]
    fn explicit_matrices_agree_with_index_arithmetic() {
        for seed in 0..10 {
            let mut rng = CounterRng::new(seed, Stream::Aux, 99);
            let (seq, w) = random_instance(&mut rng, 5, 4);
            let dec = build_decomposition(&seq, &w).unwrap();
            let concat = seq.concatenated();
            for gating in [GatingKind::Sigmoid, GatingKind::Softmax] {
                for i in 0..seq.len() {
                    let a = dec.row(&concat, i, gating).unwrap();
                    let b = attn_row_as_moe(&seq, &w, i, gating).unwrap();
                    for (u, v) in a.iter().zip(&b) {
                        assert!((u - v).abs() <= 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn fifty_instances_equivalent() {
        let report = equivalence_check(50, 5, 4, 2024).unwrap();
        assert!(report.max_residual() <= 1e-10, "{report:?}");
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        for seed in 0..10 {
            let mut rng = CounterRng::new(seed, Stream::Aux, 7);
            let (seq, w) = random_instance(&mut rng, 5, 4);
            let n = seq.len();
            let perm: Vec<usize> = (0..n).rev().collect();
            let permuted = seq.permuted(&perm);
            for f in [softmax_attn, sigmoid_attn] {
                let base = f(&seq, &w).unwrap();
                let moved = f(&permuted, &w).unwrap();
                for i in 0..n {
                    for c in 0..w.value_dim() {
                        assert!((moved[(i, c)] - base[(perm[i], c)]).abs() <= 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn softmax_row_weights_sum_to_one() {
        let (seq, w) = fixed_instance(8, 5, 3, 3, 1);
        let scores = scaled_scores(&seq, &w).unwrap();
        for i in 0..5 {
            let row: Vec<f64> = (0..5).map(|j| scores[(i, j)]).collect();
            let mut out = vec![0.0; 5];
            softmax_into(&row, &mut out);
            assert!((out.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for s in row {
                let g = sigmoid(s);
                assert!(g > 0.0 && g < 1.0);
            }
        }
    }
}
