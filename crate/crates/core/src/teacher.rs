//! The verified backup controller: per-trigger patch gains `(F̂, P̂)` from
//! LMIs on the state-dependent model, backup actions and dwell guidance.
//!
//! Variables `Q̂ = P̂⁻¹`, `R̂ = F̂·Q̂`:
//! * `Q̂ ≺ P⁻¹ ≺ η·Q̂`, i.e. `P ≺ P̂ ≺ η·P`
//! * `[[c·Q̂, Q̂A(s)ᵀ + R̂ᵀB(s)ᵀ], [A(s)Q̂ + B(s)R̂, Q̂/(1+ω)]] ≻ 0`, `c = β − κη(1 + 1/ω)`

use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, min_eigenvalue, quad_form, spd_inverse};
use crate::lmi::{AffineExpr, LmiConstraint, LmiSolver, MatrixVar, SolverStatus};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub chi: f64,
    /// Lipschitz bound on the model mismatch.
    pub kappa: f64,
    pub eta: f64,
    /// Contraction rate of the patch Lyapunov function.
    pub beta_c: f64,
    pub omega: f64,
    /// Switching threshold on sᵀPs.
    pub epsilon: f64,
    /// Configured minimum dwell, in steps.
    pub tau: usize,
    /// Return-to-student level δ as a fraction of the initial patch value e*ᵀP̂e*.
    pub delta_fraction: f64,
    /// Hard limit on one teacher activation, in steps.
    pub dwell_cap: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            chi: 0.25,
            kappa: 0.001,
            eta: 1.1,
            beta_c: 0.95,
            omega: 0.05,
            epsilon: 0.6,
            tau: 10,
            delta_fraction: 0.25,
            dwell_cap: 200,
        }
    }
}

impl TeacherConfig {
    /// `β − κη(1 + 1/ω)`, the scale of the (1,1) block.
    pub fn contraction_budget(&self) -> f64 {
        self.beta_c - self.kappa * self.eta * (1.0 + 1.0 / self.omega)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.chi > -1.0 && self.chi < 1.0) {
            return bad(format!("teacher.chi must lie in (-1, 1), got {}", self.chi));
        }
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return bad(format!("teacher.kappa must be non-negative, got {}", self.kappa));
        }
        if !(self.eta > 1.0 && self.eta.is_finite()) {
            return bad(format!("teacher.eta must exceed 1, got {}", self.eta));
        }
        if !(self.beta_c > 0.0 && self.beta_c < 1.0) {
            return bad(format!("teacher.beta_c must lie in (0, 1), got {}", self.beta_c));
        }
        if !(self.omega > 0.0 && self.omega.is_finite()) {
            return bad(format!("teacher.omega must be positive, got {}", self.omega));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad(format!("teacher.epsilon must lie in (0, 1), got {}", self.epsilon));
        }
        if self.tau == 0 {
            return bad("teacher.tau must be at least 1".into());
        }
        if !(self.delta_fraction > 0.0 && self.delta_fraction <= 1.0) {
            return bad(format!("teacher.delta_fraction must lie in (0, 1], got {}", self.delta_fraction));
        }
        if self.dwell_cap < self.tau {
            return bad(format!("teacher.dwell_cap ({}) is below tau ({})", self.dwell_cap, self.tau));
        }
        if !patch_condition_holds(self.chi, self.eta, self.epsilon) {
            return bad(format!(
                "patch condition fails: (1-chi)^2*eta*epsilon + chi^2*epsilon = {:.5} > 0.5",
                patch_condition_value(self.chi, self.eta, self.epsilon)
            ));
        }
        if self.contraction_budget() <= 0.0 {
            return bad(format!(
                "beta_c - kappa*eta*(1 + 1/omega) = {:.4} is not positive",
                self.contraction_budget()
            ));
        }
        Ok(())
    }
}

pub fn patch_condition_value(chi: f64, eta: f64, epsilon: f64) -> f64 {
    (1.0 - chi).powi(2) * eta * epsilon + chi * chi * epsilon
}

/// `(1−χ)²·η·ε + χ²·ε ≤ 0.5`
pub fn patch_condition_holds(chi: f64, eta: f64, epsilon: f64) -> bool {
    patch_condition_value(chi, eta, epsilon) <= 0.5
}

pub fn patch_center(s_trigger: &DVector<f64>, chi: f64) -> DVector<f64> {
    s_trigger * chi
}

/// The gain pair of one patch.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGains {
    pub f_hat: DMatrix<f64>,
    pub p_hat: DMatrix<f64>,
}

/// One active safety patch.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherGains {
    pub f_hat: DMatrix<f64>,
    pub p_hat: DMatrix<f64>,
    pub patch_center: DVector<f64>,
    pub trigger_state: DVector<f64>,
    pub activated_at: usize,
    pub dwell_deadline: usize,
}

impl TeacherGains {
    pub fn new(gains: PatchGains, trigger: &DVector<f64>, chi: f64, activated_at: usize, dwell: usize) -> Self {
        TeacherGains {
            f_hat: gains.f_hat,
            p_hat: gains.p_hat,
            patch_center: patch_center(trigger, chi),
            trigger_state: trigger.clone(),
            activated_at,
            dwell_deadline: activated_at + dwell,
        }
    }

    /// e*ᵀP̂e* with e* = s_trigger − s̄*.
    pub fn initial_patch_value(&self) -> f64 {
        quad_form(&self.p_hat, &(&self.trigger_state - &self.patch_center))
    }

    pub fn tracking_value(&self, s: &DVector<f64>) -> f64 {
        quad_form(&self.p_hat, &(s - &self.patch_center))
    }
}

/// `F̂·(s − s̄*)`
pub fn teacher_action(gains: &TeacherGains, s: &DVector<f64>) -> DVector<f64> {
    &gains.f_hat * (s - &gains.patch_center)
}

/// `⌈(ln δ − ln e*ᵀP̂e*) / ln β⌉`, floored at zero.
pub fn dwell_lower_bound(e_star: &DVector<f64>, p_hat: &DMatrix<f64>, delta: f64, beta_c: f64) -> usize {
    let v0 = quad_form(p_hat, e_star);
    dwell_steps(v0, delta, beta_c)
}

/// Steps `k` until `β^k·V₀ ≤ δ`.
pub fn dwell_steps(v0: f64, delta: f64, beta_c: f64) -> usize {
    if !(v0 > 0.0) || !(delta > 0.0) || v0 <= delta {
        return 0;
    }
    let k = ((delta.ln() - v0.ln()) / beta_c.ln()).ceil();
    if k.is_finite() && k > 0.0 {
        k as usize
    } else {
        0
    }
}

/// `(s−s̄*)ᵀP̂(s−s̄*) ≤ (1−χ)²·s_triggerᵀP̂s_trigger`
pub fn in_patch(s: &DVector<f64>, gains: &TeacherGains, chi: f64) -> bool {
    let lhs = gains.tracking_value(s);
    let rhs = (1.0 - chi).powi(2) * quad_form(&gains.p_hat, &gains.trigger_state);
    lhs <= rhs * (1.0 + 1e-12)
}

/// Solve the patch LMIs at `(A(s̄*), B(s̄*))` and re-verify by eigenvalues.
pub fn synthesize_teacher(
    a_s: &DMatrix<f64>,
    b_s: &DMatrix<f64>,
    p_student: &DMatrix<f64>,
    cfg: &TeacherConfig,
) -> Result<PatchGains> {
    synthesize_teacher_with(&LmiSolver::default(), a_s, b_s, p_student, cfg)
}

pub fn synthesize_teacher_with(
    solver: &LmiSolver,
    a_s: &DMatrix<f64>,
    b_s: &DMatrix<f64>,
    p_student: &DMatrix<f64>,
    cfg: &TeacherConfig,
) -> Result<PatchGains> {
    cfg.validate()?;
    let (n, m) = (a_s.nrows(), b_s.ncols());
    if !a_s.is_square() || b_s.nrows() != n || p_student.shape() != (n, n) {
        return Err(Error::Structural(format!(
            "teacher model shapes: A {:?}, B {:?}, P {:?}",
            a_s.shape(),
            b_s.shape(),
            p_student.shape()
        )));
    }
    let p_inv = spd_inverse(p_student, "student P")?;
    let q = MatrixVar::symmetric("Qhat", n);
    let r = MatrixVar::rectangular("Rhat", m, n);
    let qe = AffineExpr::var(&q);
    let re = AffineExpr::var(&r);
    let pinv = AffineExpr::constant(p_inv.clone());
    let lower = qe.premul(a_s)?.plus(&re.premul(b_s)?)?;
    let cons = vec![
        LmiConstraint::positive_definite("Qhat < P^-1", pinv.minus(&qe)?),
        LmiConstraint::positive_definite("P^-1 < eta*Qhat", qe.scale(cfg.eta).minus(&pinv)?),
        LmiConstraint::positive_definite(
            "patch contraction",
            AffineExpr::block(vec![
                vec![qe.scale(cfg.contraction_budget()), lower.transpose()],
                vec![lower, qe.scale(1.0 / (1.0 + cfg.omega))],
            ])?,
        ),
    ];
    let sol = solver.solve_feasibility(&[q, r], &cons)?;
    match sol.status {
        SolverStatus::Feasible | SolverStatus::Optimal => {}
        SolverStatus::Infeasible => return Err(Error::TeacherInfeasible("patch LMIs have no solution".into())),
        SolverStatus::NumericalFailure => {
            return Err(Error::TeacherInfeasible(format!("solver failed (residual {:.3e})", sol.residual)))
        }
    }
    let q_hat = sol.get("Qhat")?.clone();
    let p_hat = spd_inverse(&q_hat, "Qhat")?;
    let f_hat = sol.get("Rhat")? * &p_hat;
    let gains = PatchGains { f_hat, p_hat };
    let v = verify_teacher_gains(&gains, a_s, b_s, p_student, cfg)?;
    if v.iter().any(|(_, margin)| *margin <= 0.0) {
        return Err(Error::TeacherInfeasible(format!("re-verification failed: {v:?}")));
    }
    Ok(gains)
}

/// Eigenvalue margins of the patch conditions, recomputed from `(F̂, P̂)`.
pub fn verify_teacher_gains(
    gains: &PatchGains,
    a_s: &DMatrix<f64>,
    b_s: &DMatrix<f64>,
    p_student: &DMatrix<f64>,
    cfg: &TeacherConfig,
) -> Result<Vec<(&'static str, f64)>> {
    let q_hat = linalg::symmetrize(&linalg::inverse(&gains.p_hat, "P_hat")?);
    let abar = a_s + b_s * &gains.f_hat;
    let block = linalg::block(&[
        vec![&q_hat * cfg.contraction_budget(), &q_hat * abar.transpose()],
        vec![&abar * &q_hat, &q_hat / (1.0 + cfg.omega)],
    ])?;
    Ok(vec![
        ("P_hat - P", min_eigenvalue(&(&gains.p_hat - p_student))?),
        ("eta*P - P_hat", min_eigenvalue(&(p_student * cfg.eta - &gains.p_hat))?),
        ("patch contraction", min_eigenvalue(&block)?),
    ])
}

/// Feasibility of the patch LMIs over a grid of ω values.
pub fn omega_sweep(
    a_s: &DMatrix<f64>,
    b_s: &DMatrix<f64>,
    p_student: &DMatrix<f64>,
    cfg: &TeacherConfig,
    omegas: &[f64],
) -> Vec<(f64, bool)> {
    omegas
        .iter()
        .map(|&omega| {
            let c = TeacherConfig { omega, ..cfg.clone() };
            (omega, synthesize_teacher(a_s, b_s, p_student, &c).is_ok())
        })
        .collect()
}

pub const OMEGA_GRID: [f64; 6] = [0.02, 0.05, 0.1, 0.5, 1.0, 2.0];

/// Model `(A(s), B(s))` known to the teacher.
pub type ModelFn = Arc<dyn Fn(&DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) + Send + Sync>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GainSource {
    /// Solved for this trigger (or a background snapshot of a recent state).
    Fresh,
    /// Synthesis failed; reused the most recent valid gains.
    LastValid,
    /// Synthesis failed and nothing was solved yet; origin-model gains.
    Origin,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ServiceMode {
    Synchronous,
    Background,
}

struct Shared {
    latest_state: Mutex<Option<DVector<f64>>>,
    wake: Condvar,
    snapshot: Mutex<Option<Arc<(DVector<f64>, PatchGains)>>>,
    stop: Mutex<bool>,
}

/// Supplies patch gains to the coordinator. Synchronous mode solves at the
/// trigger; background mode keeps solving for the latest published state and
/// hands out whole snapshots, so readers never see a torn (F̂, P̂) pair.
pub struct TeacherService {
    model: ModelFn,
    p_student: DMatrix<f64>,
    cfg: TeacherConfig,
    origin: PatchGains,
    last_valid: Option<PatchGains>,
    mode: ServiceMode,
    shared: Arc<Shared>,
    worker: Option<JoinHandle<()>>,
}

impl TeacherService {
    pub fn new(model: ModelFn, p_student: DMatrix<f64>, cfg: TeacherConfig, mode: ServiceMode) -> Result<Self> {
        cfg.validate()?;
        let n = p_student.nrows();
        let (a0, b0) = model(&DVector::zeros(n));
        let origin = synthesize_teacher(&a0, &b0, &p_student, &cfg)?;
        let shared = Arc::new(Shared {
            latest_state: Mutex::new(None),
            wake: Condvar::new(),
            snapshot: Mutex::new(None),
            stop: Mutex::new(false),
        });
        let worker = match mode {
            ServiceMode::Synchronous => None,
            ServiceMode::Background => {
                let shared = Arc::clone(&shared);
                let model = Arc::clone(&model);
                let p = p_student.clone();
                let cfg = cfg.clone();
                Some(std::thread::spawn(move || worker_loop(shared, model, p, cfg)))
            }
        };
        Ok(TeacherService { model, p_student, cfg, origin, last_valid: None, mode, shared, worker })
    }

    pub fn config(&self) -> &TeacherConfig {
        &self.cfg
    }

    pub fn origin_gains(&self) -> &PatchGains {
        &self.origin
    }

    /// Publish the latest plant state (background mode solves for it).
    pub fn publish_state(&self, s: &DVector<f64>) {
        if self.mode == ServiceMode::Background {
            *self.shared.latest_state.lock().expect("state lock") = Some(s.clone());
            self.shared.wake.notify_one();
        }
    }

    /// Latest complete background snapshot: (state it was solved for, gains).
    pub fn snapshot(&self) -> Option<Arc<(DVector<f64>, PatchGains)>> {
        self.shared.snapshot.lock().expect("snapshot lock").clone()
    }

    fn solve_for(&self, trigger: &DVector<f64>) -> Result<PatchGains> {
        let center = patch_center(trigger, self.cfg.chi);
        let (a, b) = (self.model)(&center);
        synthesize_teacher(&a, &b, &self.p_student, &self.cfg)
    }

    /// Gains for a trigger at state `s`, with fallbacks on infeasibility.
    pub fn request(&mut self, trigger: &DVector<f64>) -> (PatchGains, GainSource, Option<String>) {
        let attempt = match self.mode {
            ServiceMode::Synchronous => self.solve_for(trigger),
            ServiceMode::Background => match self.snapshot() {
                Some(snap) => Ok(snap.1.clone()),
                None => self.solve_for(trigger),
            },
        };
        match attempt {
            Ok(g) => {
                self.last_valid = Some(g.clone());
                (g, GainSource::Fresh, None)
            }
            Err(e) => match &self.last_valid {
                Some(g) => (g.clone(), GainSource::LastValid, Some(e.to_string())),
                None => (self.origin.clone(), GainSource::Origin, Some(e.to_string())),
            },
        }
    }
}

/// Anything that can hand the coordinator patch gains for a trigger state.
pub trait GainProvider {
    fn request_gains(&mut self, trigger: &DVector<f64>) -> (PatchGains, GainSource, Option<String>);
}

impl GainProvider for TeacherService {
    fn request_gains(&mut self, trigger: &DVector<f64>) -> (PatchGains, GainSource, Option<String>) {
        self.request(trigger)
    }
}

fn worker_loop(shared: Arc<Shared>, model: ModelFn, p: DMatrix<f64>, cfg: TeacherConfig) {
    loop {
        let state = {
            let mut guard = shared.latest_state.lock().expect("state lock");
            loop {
                if *shared.stop.lock().expect("stop lock") {
                    return;
                }
                if let Some(s) = guard.take() {
                    break s;
                }
                guard = shared.wake.wait(guard).expect("state lock");
            }
        };
        let center = patch_center(&state, cfg.chi);
        let (a, b) = model(&center);
        if let Ok(g) = synthesize_teacher(&a, &b, &p, &cfg) {
            *shared.snapshot.lock().expect("snapshot lock") = Some(Arc::new((state, g)));
        }
    }
}

impl Drop for TeacherService {
    fn drop(&mut self) {
        *self.shared.stop.lock().expect("stop lock") = true;
        self.shared.wake.notify_all();
        if let Some(h) = self.worker.take() {
            let _ = h.join();
        }
    }
}

impl std::fmt::Debug for TeacherService {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TeacherService").field("mode", &self.mode).field("cfg", &self.cfg).finish()
    }
}
