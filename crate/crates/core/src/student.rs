//! Model-based gain `F`, envelope `P` and reward matrix `H` for the student.
//!
//! Variables `Q = P⁻¹` and `R = F·Q`; constraints:
//! * `[[Q, Rᵀ], [R, I/β]] ≻ 0` bounds the model-based action inside `{aᵀ(βI)a ≤ 1}`
//! * `[[αQ, QAᵀ + RᵀBᵀ], [AQ + BR, Q]] ≻ 0` gives `ĀᵀPĀ ≺ αP`
//! * row conditions on `Q` give `Ω ⊆ 𝕏`; the action-set rows only involve `β`.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{row_conditions, ActionSpec, SafetySpec};
use crate::linalg::{self, min_eigenvalue, spd_inverse};
use crate::lmi::{AffineExpr, LmiConstraint, LmiSolver, MatrixVar, Sense, SolverStatus, DEFAULT_MARGIN};

pub const DESIGN_FORMAT: &str = "sec-student-design";
pub const DESIGN_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct StudentDesign {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub alpha: f64,
    pub beta_act: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudentOptions {
    pub alpha: f64,
    pub beta_act: f64,
    pub maximize_volume: bool,
    pub margin: f64,
}

impl Default for StudentOptions {
    fn default() -> Self {
        StudentOptions { alpha: 0.87, beta_act: 0.002, maximize_volume: false, margin: DEFAULT_MARGIN }
    }
}

impl StudentOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !(self.beta_act > 0.0 && self.beta_act.is_finite()) {
            return Err(Error::Config(format!("beta_act must be positive, got {}", self.beta_act)));
        }
        if !(self.margin > 0.0) {
            return Err(Error::Config("strictness margin must be positive".into()));
        }
        Ok(())
    }
}

/// `H = (A + BF)ᵀ P (A + BF)`
pub fn reward_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>, f: &DMatrix<f64>, p: &DMatrix<f64>) -> DMatrix<f64> {
    let abar = a + b * f;
    linalg::symmetrize(&(abar.transpose() * p * &abar))
}

impl StudentDesign {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        f: DMatrix<f64>,
        p: DMatrix<f64>,
        alpha: f64,
        beta_act: f64,
    ) -> Result<Self> {
        let n = a.nrows();
        if !a.is_square() || b.nrows() != n || f.shape() != (b.ncols(), n) || p.shape() != (n, n) {
            return Err(Error::Structural(format!(
                "design shapes disagree: A {:?}, B {:?}, F {:?}, P {:?}",
                a.shape(),
                b.shape(),
                f.shape(),
                p.shape()
            )));
        }
        let h = reward_matrix(&a, &b, &f, &p);
        Ok(StudentDesign { a, b, f, p, h, alpha, beta_act })
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn action_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn closed_loop(&self) -> DMatrix<f64> {
        &self.a + &self.b * &self.f
    }

    /// `det(P⁻¹)`, proportional to the squared envelope volume.
    pub fn envelope_volume_measure(&self) -> Result<f64> {
        Ok((-linalg::log_det_spd(&self.p)?).exp())
    }
}

/// Row-condition families of the synthesis, in the order they are diagnosed.
const FAMILIES: [&str; 3] = ["action-bound", "contraction", "safety-rows"];

fn student_constraints(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    safety: &SafetySpec,
    opts: &StudentOptions,
    q: &MatrixVar,
    r: &MatrixVar,
    skip: Option<&str>,
) -> Result<Vec<LmiConstraint>> {
    let (n, m) = (a.nrows(), b.ncols());
    let qe = AffineExpr::var(q);
    let re = AffineExpr::var(r);
    let mut out = Vec::new();
    if skip != Some("action-bound") {
        let blk = AffineExpr::block(vec![
            vec![qe.clone(), re.transpose()],
            vec![re.clone(), AffineExpr::constant(DMatrix::identity(m, m) / opts.beta_act)],
        ])?;
        out.push(LmiConstraint::positive_definite_with_margin("action-bound", blk, opts.margin));
    }
    if skip != Some("contraction") {
        let lower = qe.premul(a)?.plus(&re.premul(b)?)?;
        let blk = AffineExpr::block(vec![
            vec![qe.scale(opts.alpha), lower.transpose()],
            vec![lower, qe.clone()],
        ])?;
        out.push(LmiConstraint::positive_definite_with_margin("contraction", blk, opts.margin));
    }
    if skip != Some("safety-rows") {
        let scaled = crate::geometry::scaled_constraint_data(safety)?;
        if safety.dim() != n {
            return Err(Error::Structural(format!("safety set is over {} states, model has {n}", safety.dim())));
        }
        for i in 0..safety.rows() {
            let up: DVector<f64> = scaled.upper.row(i).transpose();
            let lo: DVector<f64> = scaled.lower.row(i).transpose();
            out.push(LmiConstraint::row_bound(format!("safety-rows[{i}].upper"), q, &up, Sense::Le, 1.0)?);
            let sense = if scaled.signs[i] == 1 { Sense::Ge } else { Sense::Le };
            out.push(LmiConstraint::row_bound(format!("safety-rows[{i}].lower"), q, &lo, sense, 1.0)?);
        }
    }
    Ok(out)
}

pub fn synthesize_student(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    safety: &SafetySpec,
    action: &ActionSpec,
    opts: &StudentOptions,
) -> Result<StudentDesign> {
    synthesize_student_with(&LmiSolver::default(), a, b, safety, action, opts)
}

pub fn synthesize_student_with(
    solver: &LmiSolver,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    safety: &SafetySpec,
    action: &ActionSpec,
    opts: &StudentOptions,
) -> Result<StudentDesign> {
    opts.validate()?;
    let (n, m) = (a.nrows(), b.ncols());
    if !a.is_square() || b.nrows() != n || m == 0 {
        return Err(Error::Structural(format!("A is {:?}, B is {:?}", a.shape(), b.shape())));
    }
    if action.dim() != m {
        return Err(Error::Structural(format!("action set is over {} inputs, model has {m}", action.dim())));
    }
    // The action-set rows do not involve Q or R: V⁻¹ = I/β is fixed.
    let v_inv = DMatrix::identity(m, m) / opts.beta_act;
    if !row_conditions(&v_inv, action)?.iter().all(|r| r.holds()) {
        return Err(Error::SynthesisInfeasible {
            reason: format!("action ellipsoid with beta_act = {} is not inside the action set", opts.beta_act),
            failing: vec!["action-rows".into()],
        });
    }

    let q = MatrixVar::symmetric("Q", n);
    let r = MatrixVar::rectangular("R", m, n);
    let vars = [q.clone(), r.clone()];
    let cons = student_constraints(a, b, safety, opts, &q, &r, None)?;
    let sol = if opts.maximize_volume {
        solver.maximize_logdet(&q, &vars, &cons)?
    } else {
        solver.solve_feasibility(&vars, &cons)?
    };
    match sol.status {
        SolverStatus::Optimal | SolverStatus::Feasible => {}
        SolverStatus::Infeasible => {
            return Err(Error::SynthesisInfeasible {
                reason: "LMI system has no solution".into(),
                failing: diagnose(solver, a, b, safety, opts, &q, &r)?,
            })
        }
        SolverStatus::NumericalFailure => {
            return Err(Error::Numerical(format!("student synthesis did not converge (residual {:.3e})", sol.residual)))
        }
    }
    let qv = sol.get("Q")?;
    let p = spd_inverse(qv, "Q")?;
    let f = sol.get("R")? * &p;
    let design = StudentDesign::new(a.clone(), b.clone(), f, p, opts.alpha, opts.beta_act)?;
    let report = verify_student_design(&design, safety, action, 0.0)?;
    if !report.all_passed() {
        return Err(Error::Numerical(format!("synthesized design failed verification:\n{report}")));
    }
    Ok(design)
}

/// Families whose removal alone makes the system feasible.
fn diagnose(
    solver: &LmiSolver,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    safety: &SafetySpec,
    opts: &StudentOptions,
    q: &MatrixVar,
    r: &MatrixVar,
) -> Result<Vec<String>> {
    let vars = [q.clone(), r.clone()];
    let mut failing = Vec::new();
    for fam in FAMILIES {
        let cons = student_constraints(a, b, safety, opts, q, r, Some(fam))?;
        if solver.solve_feasibility(&vars, &cons)?.status.is_success() {
            failing.push(fam.to_string());
        }
    }
    if failing.is_empty() {
        failing = FAMILIES.iter().map(|s| s.to_string()).collect();
    }
    Ok(failing)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    /// Positive when the inequality holds with room to spare.
    pub margin: f64,
    pub strict: bool,
    pub tolerance: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        if self.strict {
            self.margin > -self.tolerance
        } else {
            self.margin >= -self.tolerance
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerificationReport {
    pub checks: Vec<Check>,
}

impl VerificationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn min_margin(&self) -> f64 {
        self.checks.iter().map(|c| c.margin).fold(f64::INFINITY, f64::min)
    }
}

impl fmt::Display for VerificationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{:<4} {:<32} margin {:+.6e}", if c.passed() { "PASS" } else { "FAIL" }, c.name, c.margin)?;
        }
        Ok(())
    }
}

/// Re-check every design inequality by eigenvalues; failures become report
/// entries. `tolerance` is the allowed negative margin (published matrices are
/// rounded to four decimals, so they are checked with 1e-3).
pub fn verify_student_design(
    design: &StudentDesign,
    safety: &SafetySpec,
    action: &ActionSpec,
    tolerance: f64,
) -> Result<VerificationReport> {
    let (n, m) = (design.state_dim(), design.action_dim());
    let mut checks = Vec::new();
    let mut push = |name: String, margin: f64, strict: bool| checks.push(Check { name, margin, strict, tolerance });

    push("P positive definite".into(), min_eigenvalue(&design.p)?, true);
    let q = linalg::symmetrize(&linalg::inverse(&design.p, "P")?);
    let r = &design.f * &q;
    let abar = design.closed_loop();

    let contraction = linalg::block(&[
        vec![&q * design.alpha, &q * abar.transpose()],
        vec![&abar * &q, q.clone()],
    ])?;
    push("contraction block".into(), min_eigenvalue(&contraction)?, true);
    let h = reward_matrix(&design.a, &design.b, &design.f, &design.p);
    push("alpha*P - H".into(), min_eigenvalue(&(&design.p * design.alpha - &h))?, true);
    push("H positive definite".into(), min_eigenvalue(&h)?, true);
    let h_err = (&h - &design.h).amax() / (1.0 + h.amax());
    push("H consistency".into(), -h_err, false);

    let bound = linalg::block(&[
        vec![q.clone(), r.transpose()],
        vec![r.clone(), DMatrix::identity(m, m) / design.beta_act],
    ])?;
    push("action-bound block".into(), min_eigenvalue(&bound)?, true);
    let ftf = design.f.transpose() * &design.f * design.beta_act;
    push("P - beta*F'F".into(), min_eigenvalue(&(&design.p - ftf))?, true);

    if safety.dim() != n || action.dim() != m {
        return Err(Error::Structural("specs do not match the design's dimensions".into()));
    }
    for rc in row_conditions(&q, safety)? {
        let side = if rc.upper_side { "upper" } else { "lower" };
        push(format!("safety row {} {side}", rc.row), rc.margin(), false);
    }
    let v_inv = DMatrix::identity(m, m) / design.beta_act;
    for rc in row_conditions(&v_inv, action)? {
        let side = if rc.upper_side { "upper" } else { "lower" };
        push(format!("action row {} {side}", rc.row), rc.margin(), false);
    }
    Ok(VerificationReport { checks })
}

/// The printed cart-pole model and the published four-decimal (P, F).
pub fn published_cartpole_design() -> StudentDesign {
    let a = DMatrix::from_row_slice(
        4,
        4,
        &[1.0, 0.0333, 0.0, 0.0, 0.0, 1.0, -0.0565, 0.0, 0.0, 0.0, 1.0, 0.0333, 0.0, 0.0, 0.8980, 1.0],
    );
    let b = DMatrix::from_column_slice(4, 1, &[0.0, 0.0334, 0.0, -0.0783]);
    let p = DMatrix::from_row_slice(
        4,
        4,
        &[
            13.3812, 6.9085, 17.0004, 3.6284, //
            6.9085, 4.1226, 10.3597, 2.2293, //
            17.0004, 10.3597, 28.2701, 5.8142, //
            3.6284, 2.2293, 5.8142, 1.2723,
        ],
    );
    let f = DMatrix::from_row_slice(1, 4, &[22.4008, 16.9978, 69.0659, 12.6449]);
    StudentDesign::new(a, b, f, p, 0.87, 0.002).expect("static shapes")
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MatrixFile {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl MatrixFile {
    fn from(m: &DMatrix<f64>) -> Self {
        MatrixFile { rows: m.nrows(), cols: m.ncols(), data: linalg::to_row_major(m) }
    }

    fn to_matrix(&self, name: &str) -> Result<DMatrix<f64>> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!("{name} has non-finite entries")));
        }
        linalg::from_row_major(self.rows, self.cols, &self.data)
            .map_err(|e| Error::Format(format!("{name}: {e}")))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DesignFile {
    format: String,
    version: u32,
    alpha: f64,
    beta_act: f64,
    #[serde(rename = "A")]
    a: MatrixFile,
    #[serde(rename = "B")]
    b: MatrixFile,
    #[serde(rename = "F")]
    f: MatrixFile,
    #[serde(rename = "P")]
    p: MatrixFile,
    #[serde(rename = "H")]
    h: MatrixFile,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    meta: BTreeMap<String, String>,
}

impl StudentDesign {
    pub fn to_json(&self) -> Result<String> {
        self.to_json_with_meta(&BTreeMap::new())
    }

    /// Design file carrying free-form provenance (config hash, seed).
    pub fn to_json_with_meta(&self, meta: &BTreeMap<String, String>) -> Result<String> {
        let file = DesignFile {
            format: DESIGN_FORMAT.into(),
            version: DESIGN_VERSION,
            alpha: self.alpha,
            beta_act: self.beta_act,
            a: MatrixFile::from(&self.a),
            b: MatrixFile::from(&self.b),
            f: MatrixFile::from(&self.f),
            p: MatrixFile::from(&self.p),
            h: MatrixFile::from(&self.h),
            meta: meta.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    /// Parse a design file. Shapes, finiteness and the stored `H` are checked;
    /// the inequalities are not (use [`verify_student_design`]).
    pub fn from_json(text: &str) -> Result<Self> {
        let file: DesignFile = serde_json::from_str(text).map_err(|e| Error::Format(format!("design file: {e}")))?;
        if file.format != DESIGN_FORMAT {
            return Err(Error::Format(format!("not a design file (format tag {:?})", file.format)));
        }
        if file.version != DESIGN_VERSION {
            return Err(Error::Format(format!("unsupported design version {}", file.version)));
        }
        if !(file.alpha.is_finite() && file.beta_act.is_finite()) {
            return Err(Error::Format("alpha/beta_act must be finite".into()));
        }
        let design = StudentDesign::new(
            file.a.to_matrix("A")?,
            file.b.to_matrix("B")?,
            file.f.to_matrix("F")?,
            file.p.to_matrix("P")?,
            file.alpha,
            file.beta_act,
        )
        .map_err(|e| Error::Format(e.to_string()))?;
        let stored = file.h.to_matrix("H")?;
        if stored.shape() != design.h.shape() {
            return Err(Error::Format("H has the wrong shape".into()));
        }
        let err = (&stored - &design.h).amax();
        if !(err <= 1e-9 * (1.0 + design.h.amax())) {
            return Err(Error::Format(format!("stored H disagrees with (A+BF)'P(A+BF) by {err:.3e}")));
        }
        Ok(StudentDesign { h: stored, ..design })
    }
}
