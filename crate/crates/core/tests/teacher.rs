use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sec_core::cartpole::{teacher_linearization, CartPoleParams, PlantState};
use sec_core::geometry::ellipsoid_boundary_samples;
use sec_core::linalg::{min_eigenvalue, quad_form};
use sec_core::student::published_cartpole_design;
use sec_core::teacher::*;
use sec_core::Error;

fn v(xs: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(xs)
}

fn cartpole_model() -> ModelFn {
    let p = CartPoleParams::default();
    Arc::new(move |s: &DVector<f64>| teacher_linearization(&PlantState::from_vector(s).unwrap(), &p))
}

fn trigger_at_level(p: &DMatrix<f64>, level: f64, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let d = DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0));
    &d * (level / quad_form(p, &d)).sqrt()
}

#[test]
fn patch_center_examples() {
    assert_eq!(patch_center(&v(&[0.4, 0.0, 0.6, 0.0]), 0.25), v(&[0.1, 0.0, 0.15, 0.0]));
    assert_eq!(patch_center(&v(&[0.4, 1.0, 0.6, -2.0]), 0.0), DVector::zeros(4));
    assert_eq!(patch_center(&DVector::zeros(4), 0.25), DVector::zeros(4));
}

#[test]
fn patch_condition_examples() {
    assert!(patch_condition_holds(0.25, 1.1, 0.6));
    assert!((patch_condition_value(0.25, 1.1, 0.6) - 0.40875).abs() < 1e-15);
    assert!(patch_condition_holds(0.0, 1.0, 0.5));
    assert!(!patch_condition_holds(0.25, 2.0, 0.9));
    assert!((patch_condition_value(0.25, 2.0, 0.9) - 1.06875).abs() < 1e-12);
}

#[test]
fn config_validation() {
    let base = TeacherConfig::default();
    for bad in [
        TeacherConfig { chi: 1.0, ..base.clone() },
        TeacherConfig { eta: 1.0, ..base.clone() },
        TeacherConfig { beta_c: 1.0, ..base.clone() },
        TeacherConfig { omega: 0.0, ..base.clone() },
        TeacherConfig { epsilon: 1.0, ..base.clone() },
        TeacherConfig { tau: 0, ..base.clone() },
        TeacherConfig { dwell_cap: 5, ..base.clone() },
        TeacherConfig { eta: 2.0, epsilon: 0.9, ..base.clone() },
        TeacherConfig { kappa: 0.5, ..base.clone() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
    }
    let text = toml::to_string(&base).unwrap();
    assert_eq!(toml::from_str::<TeacherConfig>(&text).unwrap(), base);
    assert!(toml::from_str::<TeacherConfig>("alpha = 0.95").is_err());
}

#[test]
fn sign_condition_fails_before_solving() {
    let cfg = TeacherConfig { kappa: 1.0, ..Default::default() };
    let one = DMatrix::identity(1, 1);
    let r = synthesize_teacher(&one, &one, &one, &cfg);
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn dwell_examples() {
    let p = DMatrix::from_element(1, 1, 0.6);
    let e = v(&[1.0]);
    assert_eq!(dwell_lower_bound(&e, &p, 0.6, 0.95), 0);
    assert_eq!(dwell_lower_bound(&e, &p, 0.06, 0.95), 45);
    assert_eq!(dwell_lower_bound(&e, &p, 1.0, 0.95), 0);
    assert_eq!(dwell_lower_bound(&DVector::zeros(1), &p, 0.06, 0.95), 0);
}

#[test]
fn dwell_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..100 {
        let v0: f64 = rng.gen_range(0.01..1.0);
        let delta: f64 = rng.gen_range(1e-4..1.0);
        let beta: f64 = rng.gen_range(0.5..0.999);
        let mut val = v0;
        let mut k = 0usize;
        while val > delta {
            val *= beta;
            k += 1;
        }
        assert_eq!(dwell_steps(v0, delta, beta), k, "v0={v0} delta={delta} beta={beta}");
    }
}

fn scalar_gains(f: f64, p: f64, trigger: f64, chi: f64) -> TeacherGains {
    TeacherGains::new(
        PatchGains { f_hat: DMatrix::from_element(1, 1, f), p_hat: DMatrix::from_element(1, 1, p) },
        &v(&[trigger]),
        chi,
        0,
        10,
    )
}

#[test]
fn teacher_action_examples() {
    let g = scalar_gains(-2.0, 1.0, 2.0, 0.25);
    assert_eq!(teacher_action(&g, &v(&[0.5])), v(&[0.0]));
    assert_eq!(teacher_action(&g, &v(&[1.0])), v(&[-1.0]));
    let z = scalar_gains(0.0, 1.0, 2.0, 0.25);
    assert_eq!(teacher_action(&z, &v(&[7.0])), v(&[0.0]));
}

#[test]
fn teacher_action_is_affine() {
    let design = published_cartpole_design();
    let gains = PatchGains { f_hat: design.f.clone(), p_hat: design.p.clone() };
    let g = TeacherGains::new(gains, &v(&[0.2, 0.1, -0.1, 0.3]), 0.25, 3, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let s1 = DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0));
        let s2 = DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0));
        let diff = teacher_action(&g, &s1) - teacher_action(&g, &s2);
        assert!((diff - &g.f_hat * (&s1 - &s2)).abs().max() < 1e-12);
    }
    assert_eq!(g.dwell_deadline, 13);
}

#[test]
fn in_patch_examples() {
    let design = published_cartpole_design();
    let gains = PatchGains { f_hat: design.f.clone(), p_hat: design.p.clone() };
    let trigger = v(&[0.2, 0.1, -0.1, 0.3]);
    let g = TeacherGains::new(gains, &trigger, 0.25, 0, 10);
    assert!(in_patch(&g.patch_center.clone(), &g, 0.25));
    assert!(in_patch(&trigger, &g, 0.25));
    let lhs = g.tracking_value(&trigger);
    let rhs = 0.75f64.powi(2) * quad_form(&g.p_hat, &trigger);
    assert!((lhs - rhs).abs() < 1e-12 * rhs);
    assert!(!in_patch(&(&trigger * 10.0), &g, 0.25));
}

#[test]
fn scalar_synthesis() {
    let one = DMatrix::identity(1, 1);
    let cfg = TeacherConfig { beta_c: 0.5, kappa: 0.0, omega: 1.0, eta: 1.1, epsilon: 0.4, ..Default::default() };
    let g = synthesize_teacher(&one, &one, &one, &cfg).unwrap();
    let (f, p) = (g.f_hat[(0, 0)], g.p_hat[(0, 0)]);
    assert!(2.0 * (1.0 + f).powi(2) * p < 0.5 * p);
    assert!(p > 1.0 && p < 1.1);
}

#[test]
fn paper_kappa_is_infeasible_with_published_envelope() {
    let design = published_cartpole_design();
    let (a, b) = teacher_linearization(&PlantState::new(0.05, 0.0, 0.05, 0.0), &CartPoleParams::default());
    for omega in OMEGA_GRID {
        let cfg = TeacherConfig { kappa: 0.02, omega, ..Default::default() };
        if cfg.validate().is_err() {
            continue;
        }
        assert!(matches!(synthesize_teacher(&a, &b, &design.p, &cfg), Err(Error::TeacherInfeasible(_))), "omega {omega}");
    }
}

#[test]
fn omega_sweep_reports_feasibility() {
    let design = published_cartpole_design();
    let (a, b) = teacher_linearization(&PlantState::zero(), &CartPoleParams::default());
    let sweep = omega_sweep(&a, &b, &design.p, &TeacherConfig::default(), &OMEGA_GRID);
    assert_eq!(sweep.len(), OMEGA_GRID.len());
    let feasible: Vec<f64> = sweep.iter().filter(|(_, ok)| *ok).map(|(w, _)| *w).collect();
    assert!(feasible.contains(&0.05), "{sweep:?}");
    // Large ω inflates the (2,2) block requirement beyond the sandwich budget.
    assert!(!feasible.contains(&2.0), "{sweep:?}");
}

#[test]
fn theorem_properties_on_mismatch_free_surrogate() {
    let design = published_cartpole_design();
    let p = &design.p;
    let cfg = TeacherConfig::default();
    let params = CartPoleParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for _ in 0..5 {
        let level = rng.gen_range(cfg.epsilon..1.0);
        let trigger = trigger_at_level(p, level, &mut rng);
        let center = patch_center(&trigger, cfg.chi);
        let (a, b) = teacher_linearization(&PlantState::from_vector(&center).unwrap(), &params);
        let pg = synthesize_teacher(&a, &b, p, &cfg).unwrap();
        assert!(min_eigenvalue(&(&pg.p_hat - p)).unwrap() > 0.0);
        assert!(min_eigenvalue(&(p * cfg.eta - &pg.p_hat)).unwrap() > 0.0);
        let closed = &a + &b * &pg.f_hat;
        let g = TeacherGains::new(pg, &trigger, cfg.chi, 0, cfg.tau);
        for _ in 0..20 {
            let mut e = DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0));
            for _ in 0..50 {
                let next = &closed * &e;
                assert!(quad_form(&g.p_hat, &next) <= cfg.beta_c * quad_form(&g.p_hat, &e) + 1e-15);
                e = next;
            }
        }
        let radius2 = (1.0 - cfg.chi).powi(2) * quad_form(&g.p_hat, &trigger);
        for e in ellipsoid_boundary_samples(&(&g.p_hat / radius2), 200, 9) {
            let x = &g.patch_center + e;
            assert!(quad_form(p, &x) <= 1.0 + 1e-9);
        }
    }
}

#[test]
fn service_falls_back_when_synthesis_fails() {
    let design = published_cartpole_design();
    let good = cartpole_model();
    // Unstabilisable model away from the origin.
    let model: ModelFn = Arc::new(move |s: &DVector<f64>| {
        if s.norm() > 0.05 {
            (DMatrix::identity(4, 4) * 3.0, DMatrix::zeros(4, 1))
        } else {
            good(s)
        }
    });
    let mut svc = TeacherService::new(model, design.p.clone(), TeacherConfig::default(), ServiceMode::Synchronous).unwrap();
    let far = v(&[0.8, 0.0, 0.4, 0.0]);
    let near = v(&[0.1, 0.0, 0.05, 0.0]);
    let (g, src, err) = svc.request(&far);
    assert_eq!(src, GainSource::Origin);
    assert!(err.is_some());
    assert_eq!(&g, svc.origin_gains());
    let (g_near, src, _) = svc.request(&near);
    assert_eq!(src, GainSource::Fresh);
    let (g2, src, _) = svc.request(&far);
    assert_eq!(src, GainSource::LastValid);
    assert_eq!(g2, g_near);
}

#[test]
fn synchronous_service_is_deterministic() {
    let design = published_cartpole_design();
    let s = v(&[0.3, -0.1, 0.2, 0.1]);
    let mut a = TeacherService::new(cartpole_model(), design.p.clone(), TeacherConfig::default(), ServiceMode::Synchronous).unwrap();
    let mut b = TeacherService::new(cartpole_model(), design.p.clone(), TeacherConfig::default(), ServiceMode::Synchronous).unwrap();
    let (ga, _, _) = a.request(&s);
    let (gb, _, _) = b.request(&s);
    assert_eq!(ga, gb);
}

#[test]
fn background_snapshots_are_consistent() {
    let design = published_cartpole_design();
    let cfg = TeacherConfig::default();
    let params = CartPoleParams::default();
    let svc = TeacherService::new(cartpole_model(), design.p.clone(), cfg.clone(), ServiceMode::Background).unwrap();
    let mut sync = TeacherService::new(cartpole_model(), design.p.clone(), cfg.clone(), ServiceMode::Synchronous).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let s = trigger_at_level(&design.p, rng.gen_range(0.2..0.9), &mut rng);
        svc.publish_state(&s);
    }
    let deadline = Instant::now() + Duration::from_secs(30);
    let snap = loop {
        if let Some(snap) = svc.snapshot() {
            break snap;
        }
        assert!(Instant::now() < deadline, "worker produced no snapshot");
        std::thread::sleep(Duration::from_millis(5));
    };
    let (state, gains) = (&snap.0, &snap.1);
    let center = patch_center(state, cfg.chi);
    let (a, b) = teacher_linearization(&PlantState::from_vector(&center).unwrap(), &params);
    let margins = verify_teacher_gains(gains, &a, &b, &design.p, &cfg).unwrap();
    assert!(margins.iter().all(|(_, m)| *m > 0.0), "{margins:?}");
    let (g_sync, _, _) = sync.request(state);
    assert_eq!(&g_sync, gains);
}
