//! Voronoi cells of a reference measure and the parameter losses built on
//! them.
//!
//! Distances use `θ = (A, b, η)` (the bias `c` is excluded) with the Frobenius
//! norm on `A`. Under the partially quadratic score `b` is empty, so the same
//! code yields the losses without linear-term contributions.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::model::{sigmoid, Atom, MixingMeasure};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellClass {
    Empty,
    Exact,
    OverSpecified,
}

impl CellClass {
    pub fn from_size(size: usize) -> Self {
        match size {
            0 => CellClass::Empty,
            1 => CellClass::Exact,
            _ => CellClass::OverSpecified,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoronoiAssignment {
    /// Reference index of each fitted atom.
    pub cell_of: Vec<usize>,
    /// Fitted indices in each reference cell, ascending.
    pub cells: Vec<Vec<usize>>,
    pub classification: Vec<CellClass>,
}

impl VoronoiAssignment {
    /// Number of over-specified cells.
    pub fn over_specified_count(&self) -> usize {
        self.classification
            .iter()
            .filter(|c| **c == CellClass::OverSpecified)
            .count()
    }

    /// Same cells, with `over[j]` marking cells treated as over-specified
    /// regardless of their size. Empty cells stay empty.
    pub fn with_classes(&self, over: &[bool]) -> Result<Self> {
        check_len("over-specified mask", self.cells.len(), over.len())?;
        let classification = self
            .cells
            .iter()
            .zip(over)
            .map(|(cell, &o)| match (cell.is_empty(), o) {
                (true, _) => CellClass::Empty,
                (false, true) => CellClass::OverSpecified,
                (false, false) => CellClass::Exact,
            })
            .collect();
        Ok(Self {
            classification,
            ..self.clone()
        })
    }

    fn check_against(&self, fitted: &MixingMeasure, reference: &MixingMeasure) -> Result<()> {
        check_len("assignment fitted atoms", fitted.len(), self.cell_of.len())?;
        check_len("assignment reference cells", reference.len(), self.cells.len())?;
        check_len("assignment classes", reference.len(), self.classification.len())?;
        if let Some(&j) = self.cell_of.iter().find(|&&j| j >= reference.len()) {
            return Err(Error::IndexOutOfRange { index: j, len: reference.len() });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    L1,
    L2r,
    L3,
    L4,
    L5,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub kind: LossKind,
    pub value: f64,
    /// Contribution of each reference cell.
    pub per_cell_terms: Vec<f64>,
    pub r: Option<f64>,
}

impl LossReport {
    fn new(kind: LossKind, per_cell_terms: Vec<f64>, r: Option<f64>) -> Self {
        Self {
            kind,
            value: per_cell_terms.iter().sum(),
            per_cell_terms,
            r,
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    sq_dist(a, b).sqrt()
}

fn theta_sq_dist(a: &Atom, b: &Atom) -> f64 {
    sq_dist(&a.a, &b.a) + sq_dist(&a.b, &b.b) + sq_dist(&a.eta, &b.eta)
}

fn check_compatible(fitted: &MixingMeasure, reference: &MixingMeasure) -> Result<()> {
    if fitted.score != reference.score {
        return Err(Error::invalid("fitted and reference score kinds differ"));
    }
    if fitted.expert != reference.expert {
        return Err(Error::invalid("fitted and reference expert specs differ"));
    }
    fitted.validate()?;
    reference.validate()
}

/// Nearest reference atom for each fitted atom; ties go to the lower index.
pub fn assign_cells(fitted: &MixingMeasure, reference: &MixingMeasure) -> Result<VoronoiAssignment> {
    if fitted.is_empty() {
        return Err(Error::invalid("fitted measure has no atoms"));
    }
    check_compatible(fitted, reference)?;
    let mut cells = vec![Vec::new(); reference.len()];
    let cell_of: Vec<usize> = fitted
        .atoms
        .iter()
        .enumerate()
        .map(|(i, atom)| {
            let mut best = (f64::INFINITY, 0);
            for (j, r) in reference.atoms.iter().enumerate() {
                let dsq = theta_sq_dist(atom, r);
                if dsq < best.0 {
                    best = (dsq, j);
                }
            }
            cells[best.1].push(i);
            best.1
        })
        .collect();
    let classification = cells.iter().map(|c| CellClass::from_size(c.len())).collect();
    Ok(VoronoiAssignment {
        cell_of,
        cells,
        classification,
    })
}

/// Parameter differences of one fitted atom against its reference atom.
struct Deltas {
    a: f64,
    b: f64,
    c: f64,
    eta: f64,
    /// Only meaningful for (α, β) experts.
    alpha: f64,
    beta: f64,
}

fn deltas(fit: &Atom, truth: &Atom) -> Deltas {
    let q = fit.eta.len();
    Deltas {
        a: dist(&fit.a, &truth.a),
        b: dist(&fit.b, &truth.b),
        c: (fit.c - truth.c).abs(),
        eta: dist(&fit.eta, &truth.eta),
        alpha: dist(&fit.eta[..q - 1], &truth.eta[..q - 1]),
        beta: (fit.eta[q - 1] - truth.eta[q - 1]).abs(),
    }
}

fn weight_gap(cell: &[usize], fitted: &MixingMeasure, truth: &Atom) -> f64 {
    let total: f64 = cell.iter().map(|&i| sigmoid(fitted.atoms[i].c)).sum();
    (total - sigmoid(truth.c)).abs()
}

fn prepare(
    fitted: &MixingMeasure,
    reference: &MixingMeasure,
    assignment: &VoronoiAssignment,
) -> Result<()> {
    check_compatible(fitted, reference)?;
    assignment.check_against(fitted, reference)
}

/// L1 (fully quadratic) or L4 (partially quadratic).
///
/// Over-specified cells: `|Σ σ(c_i) − σ(c*_j)| + Σ (‖ΔA‖² + ‖Δb‖² + ‖Δη‖²)`.
/// Exact cells: `Σ (‖ΔA‖ + ‖Δb‖ + |Δc| + ‖Δη‖)`. Empty cells: 0.
pub fn loss_sparse(
    fitted: &MixingMeasure,
    reference: &MixingMeasure,
    assignment: &VoronoiAssignment,
) -> Result<LossReport> {
    prepare(fitted, reference, assignment)?;
    let terms = assignment
        .cells
        .iter()
        .zip(&assignment.classification)
        .zip(&reference.atoms)
        .map(|((cell, class), truth)| match class {
            CellClass::Empty => 0.0,
            CellClass::OverSpecified => {
                weight_gap(cell, fitted, truth)
                    + cell
                        .iter()
                        .map(|&i| {
                            let dl = deltas(&fitted.atoms[i], truth);
                            dl.a * dl.a + dl.b * dl.b + dl.eta * dl.eta
                        })
                        .sum::<f64>()
            }
            CellClass::Exact => cell
                .iter()
                .map(|&i| {
                    let dl = deltas(&fitted.atoms[i], truth);
                    dl.a + dl.b + dl.c + dl.eta
                })
                .sum(),
        })
        .collect();
    Ok(LossReport::new(sparse_kind(reference), terms, None))
}

fn sparse_kind(g: &MixingMeasure) -> LossKind {
    if g.score.has_linear_term() {
        LossKind::L1
    } else {
        LossKind::L4
    }
}

fn dense_kind(g: &MixingMeasure) -> LossKind {
    if g.score.has_linear_term() {
        LossKind::L3
    } else {
        LossKind::L5
    }
}

/// L2,r for (α, β) experts. Every parameter difference is raised to `r`;
/// the aggregated gate-weight gap of an over-specified cell is not.
pub fn loss_minimax_r(
    fitted: &MixingMeasure,
    reference: &MixingMeasure,
    assignment: &VoronoiAssignment,
    r: f64,
) -> Result<LossReport> {
    if !(r >= 1.0 && r.is_finite()) {
        return Err(Error::invalid(format!("r must be >= 1, got {r}")));
    }
    if !reference.expert.is_polynomial_like() {
        return Err(Error::invalid(
            "the minimax loss is defined only for linear and polynomial experts",
        ));
    }
    prepare(fitted, reference, assignment)?;
    let terms = assignment
        .cells
        .iter()
        .zip(&assignment.classification)
        .zip(&reference.atoms)
        .map(|((cell, class), truth)| {
            let powered = |with_c: bool| {
                cell.iter()
                    .map(|&i| {
                        let dl = deltas(&fitted.atoms[i], truth);
                        let c = if with_c { dl.c.powf(r) } else { 0.0 };
                        dl.a.powf(r) + dl.b.powf(r) + c + dl.alpha.powf(r) + dl.beta.powf(r)
                    })
                    .sum::<f64>()
            };
            match class {
                CellClass::Empty => 0.0,
                CellClass::OverSpecified => weight_gap(cell, fitted, truth) + powered(false),
                CellClass::Exact => powered(true),
            }
        })
        .collect();
    Ok(LossReport::new(LossKind::L2r, terms, Some(r)))
}

/// L3 (fully quadratic) or L5 (partially quadratic): first-power differences
/// including `|Δc|`, summed over every cell member.
pub fn loss_dense(
    fitted: &MixingMeasure,
    reference: &MixingMeasure,
    assignment: &VoronoiAssignment,
) -> Result<LossReport> {
    prepare(fitted, reference, assignment)?;
    let terms = assignment
        .cells
        .iter()
        .zip(&reference.atoms)
        .map(|(cell, truth)| {
            cell.iter()
                .map(|&i| {
                    let dl = deltas(&fitted.atoms[i], truth);
                    dl.a + dl.b + dl.c + dl.eta
                })
                .sum()
        })
        .collect();
    Ok(LossReport::new(dense_kind(reference), terms, None))
}

/// Assigns cells and evaluates the loss of the requested kind.
pub fn compute_loss(
    fitted: &MixingMeasure,
    reference: &MixingMeasure,
    kind: LossKind,
    r: Option<f64>,
) -> Result<LossReport> {
    let assignment = assign_cells(fitted, reference)?;
    let full = reference.score.has_linear_term();
    match kind {
        LossKind::L1 | LossKind::L4 => {
            if full != (kind == LossKind::L1) {
                return Err(Error::invalid(format!(
                    "{kind:?} does not match the measures' score kind"
                )));
            }
            loss_sparse(fitted, reference, &assignment)
        }
        LossKind::L3 | LossKind::L5 => {
            if full != (kind == LossKind::L3) {
                return Err(Error::invalid(format!(
                    "{kind:?} does not match the measures' score kind"
                )));
            }
            loss_dense(fitted, reference, &assignment)
        }
        LossKind::L2r => loss_minimax_r(fitted, reference, &assignment, r.unwrap_or(1.0)),
    }
}
