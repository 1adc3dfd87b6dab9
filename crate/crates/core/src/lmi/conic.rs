//! Standard conic form and the solver backend behind it.
//!
//! Problems are `min cᵀx  s.t.  b − A·x ∈ K` with `K` a product of zero,
//! nonnegative, exponential and PSD (scaled upper-triangle) cones.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus as ClStatus, SupportedConeT,
};
use nalgebra::{DMatrix, DVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cone {
    Zero(usize),
    Nonneg(usize),
    /// `(x, y, z)` with `y·exp(x/y) ≤ z`.
    Exp,
    /// Scaled upper triangle of a `dim × dim` matrix, column major.
    Psd(usize),
}

impl Cone {
    pub fn len(&self) -> usize {
        match *self {
            Cone::Zero(n) | Cone::Nonneg(n) => n,
            Cone::Exp => 3,
            Cone::Psd(n) => n * (n + 1) / 2,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
pub struct ConeBlock {
    pub cone: Cone,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

#[derive(Clone, Debug)]
pub struct ConicProblem {
    pub cost: DVector<f64>,
    pub blocks: Vec<ConeBlock>,
}

impl ConicProblem {
    pub fn n_vars(&self) -> usize {
        self.cost.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum BackendStatus {
    Solved,
    /// Converged to reduced accuracy; the caller re-verifies.
    Inaccurate,
    Infeasible,
    Failed(String),
}

#[derive(Clone, Debug)]
pub struct BackendResult {
    pub status: BackendStatus,
    pub x: Vec<f64>,
}

pub trait SdpBackend: Send + Sync {
    fn name(&self) -> &str;
    fn solve(&self, problem: &ConicProblem) -> BackendResult;
}

/// Interior-point backend (Clarabel).
#[derive(Clone, Debug)]
pub struct ClarabelBackend {
    pub max_iter: u32,
    pub tol_gap_abs: f64,
    pub tol_gap_rel: f64,
    pub tol_feas: f64,
}

impl Default for ClarabelBackend {
    fn default() -> Self {
        ClarabelBackend { max_iter: 200, tol_gap_abs: 1e-10, tol_gap_rel: 1e-10, tol_feas: 1e-10 }
    }
}

fn to_csc(m: &DMatrix<f64>) -> CscMatrix<f64> {
    let mut colptr = Vec::with_capacity(m.ncols() + 1);
    let mut rowval = Vec::new();
    let mut nzval = Vec::new();
    colptr.push(0);
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            let v = m[(i, j)];
            if v != 0.0 {
                rowval.push(i);
                nzval.push(v);
            }
        }
        colptr.push(rowval.len());
    }
    CscMatrix::new(m.nrows(), m.ncols(), colptr, rowval, nzval)
}

impl SdpBackend for ClarabelBackend {
    fn name(&self) -> &str {
        "clarabel"
    }

    fn solve(&self, problem: &ConicProblem) -> BackendResult {
        let n = problem.n_vars();
        let rows: usize = problem.blocks.iter().map(|b| b.cone.len()).sum();
        let mut a = DMatrix::zeros(rows, n);
        let mut b = Vec::with_capacity(rows);
        let mut cones = Vec::with_capacity(problem.blocks.len());
        let mut r0 = 0;
        for blk in &problem.blocks {
            let len = blk.cone.len();
            a.view_mut((r0, 0), (len, n)).copy_from(&blk.a);
            b.extend(blk.b.iter());
            cones.push(match blk.cone {
                Cone::Zero(k) => SupportedConeT::ZeroConeT(k),
                Cone::Nonneg(k) => SupportedConeT::NonnegativeConeT(k),
                Cone::Exp => SupportedConeT::ExponentialConeT(),
                Cone::Psd(k) => SupportedConeT::PSDTriangleConeT(k),
            });
            r0 += len;
        }
        let p = CscMatrix::new(n, n, vec![0; n + 1], Vec::new(), Vec::new());
        let settings = match DefaultSettingsBuilder::default()
            .verbose(false)
            .max_iter(self.max_iter)
            .tol_gap_abs(self.tol_gap_abs)
            .tol_gap_rel(self.tol_gap_rel)
            .tol_feas(self.tol_feas)
            .build()
        {
            Ok(s) => s,
            Err(e) => return failed(n, format!("settings: {e}")),
        };
        let mut solver = match DefaultSolver::new(&p, problem.cost.as_slice(), &to_csc(&a), &b, &cones, settings) {
            Ok(s) => s,
            Err(e) => return failed(n, format!("setup: {e}")),
        };
        solver.solve();
        let status = match solver.solution.status {
            ClStatus::Solved => BackendStatus::Solved,
            ClStatus::AlmostSolved | ClStatus::MaxIterations | ClStatus::InsufficientProgress => {
                BackendStatus::Inaccurate
            }
            ClStatus::PrimalInfeasible | ClStatus::AlmostPrimalInfeasible => BackendStatus::Infeasible,
            other => BackendStatus::Failed(format!("{other:?}")),
        };
        BackendResult { status, x: solver.solution.x.clone() }
    }
}

fn failed(n: usize, msg: String) -> BackendResult {
    BackendResult { status: BackendStatus::Failed(msg), x: vec![0.0; n] }
}
