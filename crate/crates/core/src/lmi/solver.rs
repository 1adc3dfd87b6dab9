use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::conic::{BackendStatus, ClarabelBackend, Cone, ConeBlock, ConicProblem, SdpBackend};
use super::expr::{AffineExpr, MatrixVar, VarLayout};
use crate::error::{Error, Result};
use crate::linalg::{asymmetry, min_eigenvalue};

/// Default margin used to encode `≻ 0` as `⪰ margin·I`.
pub const DEFAULT_MARGIN: f64 = 1e-6;
/// Default post-solve residual tolerance.
pub const DEFAULT_TOLERANCE: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sense {
    Le,
    Ge,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ConstraintKind {
    PositiveDefiniteBlock { margin: f64 },
    /// `row · X · rowᵀ` compared with a bound (the Lemma-style row tests).
    LinearRowBound { sense: Sense, bound: f64 },
    ScalarBound { sense: Sense, bound: f64 },
}

#[derive(Clone, Debug)]
pub struct LmiConstraint {
    pub label: String,
    pub kind: ConstraintKind,
    pub expr: AffineExpr,
}

impl LmiConstraint {
    pub fn positive_definite(label: impl Into<String>, expr: AffineExpr) -> Self {
        Self::positive_definite_with_margin(label, expr, DEFAULT_MARGIN)
    }

    pub fn positive_definite_with_margin(label: impl Into<String>, expr: AffineExpr, margin: f64) -> Self {
        LmiConstraint { label: label.into(), kind: ConstraintKind::PositiveDefiniteBlock { margin }, expr }
    }

    pub fn row_bound(
        label: impl Into<String>,
        var: &MatrixVar,
        row: &DVector<f64>,
        sense: Sense,
        bound: f64,
    ) -> Result<Self> {
        let col = DMatrix::from_column_slice(row.len(), 1, row.as_slice());
        let expr = AffineExpr::var(var).premul(&col.transpose())?.postmul(&col)?;
        Ok(LmiConstraint { label: label.into(), kind: ConstraintKind::LinearRowBound { sense, bound }, expr })
    }

    pub fn scalar_bound(label: impl Into<String>, expr: AffineExpr, sense: Sense, bound: f64) -> Self {
        LmiConstraint { label: label.into(), kind: ConstraintKind::ScalarBound { sense, bound }, expr }
    }

    fn check_shape(&self) -> Result<()> {
        let (r, c) = self.expr.shape();
        match self.kind {
            ConstraintKind::PositiveDefiniteBlock { margin } => {
                if r != c {
                    return Err(Error::Structural(format!("{}: block is {r}x{c}, not square", self.label)));
                }
                if !(margin > 0.0) {
                    return Err(Error::Structural(format!("{}: strictness margin must be positive", self.label)));
                }
            }
            _ => {
                if (r, c) != (1, 1) {
                    return Err(Error::Structural(format!("{}: bound expression is {r}x{c}, not scalar", self.label)));
                }
            }
        }
        Ok(())
    }

    /// Amount by which an assignment violates this constraint (0 when satisfied).
    pub fn violation(&self, assignments: &BTreeMap<String, DMatrix<f64>>) -> Result<f64> {
        let m = self.expr.evaluate(assignments)?;
        Ok(match self.kind {
            ConstraintKind::PositiveDefiniteBlock { margin } => (margin - min_eigenvalue(&m)?).max(0.0),
            ConstraintKind::LinearRowBound { sense, bound } | ConstraintKind::ScalarBound { sense, bound } => {
                let v = m[(0, 0)];
                match sense {
                    Sense::Le => (v - bound).max(0.0),
                    Sense::Ge => (bound - v).max(0.0),
                }
            }
        })
    }

    fn to_cone(&self, layout: &VarLayout) -> Result<ConeBlock> {
        self.check_shape()?;
        let (coef, offset) = self.expr.linearize(layout)?;
        match self.kind {
            ConstraintKind::PositiveDefiniteBlock { margin } => {
                let n = self.expr.shape().0;
                let mut shifted = offset;
                for i in 0..n {
                    shifted[i + i * n] -= margin;
                }
                psd_block(&self.label, n, &coef, &shifted)
            }
            ConstraintKind::LinearRowBound { sense, bound } | ConstraintKind::ScalarBound { sense, bound } => {
                let (a, b) = match sense {
                    Sense::Le => (coef.clone(), bound - offset[0]),
                    Sense::Ge => (-coef.clone(), offset[0] - bound),
                };
                Ok(ConeBlock { cone: Cone::Nonneg(1), a, b: DVector::from_element(1, b) })
            }
        }
    }
}

/// `svec(M(x)) ∈ PSD` where `vec(M(x)) = coef·x + offset` (column major).
fn psd_block(label: &str, n: usize, coef: &DMatrix<f64>, offset: &DVector<f64>) -> Result<ConeBlock> {
    let len = n * (n + 1) / 2;
    let nx = coef.ncols();
    let mut a = DMatrix::zeros(len, nx);
    let mut b = DVector::zeros(len);
    let scale = std::f64::consts::SQRT_2;
    let mut k = 0;
    for j in 0..n {
        for i in 0..=j {
            let (u, l) = (i + j * n, j + i * n);
            let asym = (offset[u] - offset[l]).abs()
                + (0..nx).map(|c| (coef[(u, c)] - coef[(l, c)]).abs()).fold(0.0, f64::max);
            if asym > 1e-9 * (1.0 + offset[u].abs()) {
                return Err(Error::Structural(format!("{label}: block expression is not symmetric")));
            }
            let s = if i == j { 1.0 } else { scale };
            b[k] = s * 0.5 * (offset[u] + offset[l]);
            for c in 0..nx {
                a[(k, c)] = -s * 0.5 * (coef[(u, c)] + coef[(l, c)]);
            }
            k += 1;
        }
    }
    Ok(ConeBlock { cone: Cone::Psd(n), a, b })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolverStatus {
    Optimal,
    Feasible,
    Infeasible,
    NumericalFailure,
}

impl SolverStatus {
    pub fn is_success(&self) -> bool {
        matches!(self, SolverStatus::Optimal | SolverStatus::Feasible)
    }
}

#[derive(Clone, Debug)]
pub struct LmiSolution {
    pub assignments: BTreeMap<String, DMatrix<f64>>,
    pub status: SolverStatus,
    /// Largest constraint violation found by the eigenvalue re-check.
    pub residual: f64,
    /// Per-constraint violations, in input order.
    pub violations: Vec<(String, f64)>,
}

impl LmiSolution {
    pub fn get(&self, name: &str) -> Result<&DMatrix<f64>> {
        self.assignments
            .get(name)
            .ok_or_else(|| Error::Structural(format!("solution has no variable {name}")))
    }
}

#[derive(Clone)]
pub struct LmiSolver {
    backend: Arc<dyn SdpBackend>,
    pub tolerance: f64,
}

impl Default for LmiSolver {
    fn default() -> Self {
        LmiSolver::new(Arc::new(ClarabelBackend::default()))
    }
}

impl std::fmt::Debug for LmiSolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LmiSolver")
            .field("backend", &self.backend.name())
            .field("tolerance", &self.tolerance)
            .finish()
    }
}

const LOGDET_Z: &str = "__logdet_z";
const LOGDET_T: &str = "__logdet_t";

impl LmiSolver {
    pub fn new(backend: Arc<dyn SdpBackend>) -> Self {
        LmiSolver { backend, tolerance: DEFAULT_TOLERANCE }
    }

    pub fn with_tolerance(mut self, tol: f64) -> Self {
        self.tolerance = tol;
        self
    }

    pub fn solve_feasibility(&self, vars: &[MatrixVar], constraints: &[LmiConstraint]) -> Result<LmiSolution> {
        let layout = VarLayout::new(vars)?;
        let blocks = constraints.iter().map(|c| c.to_cone(&layout)).collect::<Result<Vec<_>>>()?;
        let problem = ConicProblem { cost: DVector::zeros(layout.total), blocks };
        self.run(&layout, &problem, constraints, SolverStatus::Feasible, &[])
    }

    /// Maximize `log det X` for the symmetric `objective` subject to `constraints`.
    ///
    /// Uses the usual lifting: `[[X, Z], [Zᵀ, diag Z]] ⪰ 0` with `Z` lower
    /// triangular and `tᵢ ≤ ln Zᵢᵢ` through exponential cones.
    pub fn maximize_logdet(
        &self,
        objective: &MatrixVar,
        vars: &[MatrixVar],
        constraints: &[LmiConstraint],
    ) -> Result<LmiSolution> {
        if !objective.symmetric {
            return Err(Error::Structural(format!("log det objective {} must be symmetric", objective.name)));
        }
        if !vars.iter().any(|v| v == objective) {
            return Err(Error::Structural(format!("objective {} is not among the variables", objective.name)));
        }
        let n = objective.rows;
        let z = MatrixVar::rectangular(LOGDET_Z, n, n);
        let t = MatrixVar::rectangular(LOGDET_T, n, 1);
        let mut all = vars.to_vec();
        all.push(z.clone());
        all.push(t.clone());
        let layout = VarLayout::new(&all)?;
        let mut blocks = constraints.iter().map(|c| c.to_cone(&layout)).collect::<Result<Vec<_>>>()?;

        let ze = AffineExpr::var(&z);
        let mut diag = AffineExpr::zeros(n, n);
        for i in 0..n {
            let mut e = DMatrix::zeros(n, n);
            e[(i, i)] = 1.0;
            diag = diag.plus(&ze.premul(&e)?.postmul(&e)?)?;
        }
        let lift = AffineExpr::block(vec![
            vec![AffineExpr::var(objective), ze.clone()],
            vec![ze.transpose(), diag],
        ])?;
        let (coef, offset) = lift.linearize(&layout)?;
        blocks.push(psd_block("log det lifting", 2 * n, &coef, &offset)?);

        let (z_off, _) = layout.lookup(&z)?;
        let (t_off, _) = layout.lookup(&t)?;
        // strict upper triangle of Z is zero
        let upper: Vec<usize> = (0..n).flat_map(|j| (0..j).map(move |i| z_off + i + j * n)).collect();
        if !upper.is_empty() {
            let mut a = DMatrix::zeros(upper.len(), layout.total);
            for (r, &c) in upper.iter().enumerate() {
                a[(r, c)] = 1.0;
            }
            blocks.push(ConeBlock { cone: Cone::Zero(upper.len()), a, b: DVector::zeros(upper.len()) });
        }
        let mut cost = DVector::zeros(layout.total);
        for i in 0..n {
            let mut a = DMatrix::zeros(3, layout.total);
            a[(0, t_off + i)] = -1.0;
            a[(2, z_off + i + i * n)] = -1.0;
            blocks.push(ConeBlock { cone: Cone::Exp, a, b: DVector::from_column_slice(&[0.0, 1.0, 0.0]) });
            cost[t_off + i] = -1.0;
        }
        let problem = ConicProblem { cost, blocks };
        self.run(&layout, &problem, constraints, SolverStatus::Optimal, &[LOGDET_Z, LOGDET_T])
    }

    fn run(
        &self,
        layout: &VarLayout,
        problem: &ConicProblem,
        constraints: &[LmiConstraint],
        success: SolverStatus,
        hidden: &[&str],
    ) -> Result<LmiSolution> {
        let result = self.backend.solve(problem);
        let mut assignments = layout.unpack(&result.x);
        for h in hidden {
            assignments.remove(*h);
        }
        let mut violations = Vec::with_capacity(constraints.len());
        let mut residual: f64 = 0.0;
        for c in constraints {
            let v = c.violation(&assignments)?;
            residual = residual.max(v);
            violations.push((c.label.clone(), v));
        }
        if !residual.is_finite() {
            residual = f64::INFINITY;
        }
        let status = match result.status {
            BackendStatus::Infeasible => SolverStatus::Infeasible,
            BackendStatus::Failed(_) => SolverStatus::NumericalFailure,
            BackendStatus::Solved | BackendStatus::Inaccurate => {
                if residual <= self.tolerance {
                    success
                } else {
                    SolverStatus::NumericalFailure
                }
            }
        };
        Ok(LmiSolution { assignments, status, residual, violations })
    }
}

/// `true` iff the smallest eigenvalue of `m` is at least `margin`.
pub fn is_positive_definite(m: &DMatrix<f64>, margin: f64) -> Result<bool> {
    if !m.is_square() {
        return Err(Error::Structural(format!("{}x{} matrix is not square", m.nrows(), m.ncols())));
    }
    let scale = 1.0 + m.amax();
    if asymmetry(m) > 1e-9 * scale {
        return Err(Error::Structural("matrix is not symmetric".into()));
    }
    Ok(min_eigenvalue(m)? >= margin)
}

/// Schur-complement test of `[[A, B], [Bᵀ, C]] ≻ 0`: `C ≻ 0` and `A − B C⁻¹ Bᵀ ≻ 0`.
pub fn schur_check(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>, margin: f64) -> Result<bool> {
    if !a.is_square() || !c.is_square() || b.nrows() != a.nrows() || b.ncols() != c.nrows() {
        return Err(Error::Structural(format!(
            "blocks not conformable: A {:?}, B {:?}, C {:?}",
            a.shape(),
            b.shape(),
            c.shape()
        )));
    }
    if !is_positive_definite(c, margin)? {
        return Ok(false);
    }
    let chol = crate::linalg::symmetrize(c)
        .cholesky()
        .ok_or_else(|| Error::Numerical("C block is singular".into()))?;
    let lambda_min = min_eigenvalue(c)?;
    if lambda_min <= 1e-12 * (1.0 + c.amax()) {
        return Err(Error::Numerical("C block is singular within tolerance".into()));
    }
    let schur = a - b * chol.solve(&b.transpose());
    is_positive_definite(&crate::linalg::symmetrize(&schur), margin)
}
