use nalgebra::DVector;
use sec_core::cartpole::*;

fn frictionless() -> CartPoleParams {
    CartPoleParams::frictionless()
}

fn explicit_step(s: &PlantState, force: f64, p: &CartPoleParams) -> PlantState {
    let (xa, ta) = accelerations(s, force, p);
    PlantState::new(s.x + p.dt * s.v, s.v + p.dt * xa, s.theta + p.dt * s.omega, s.omega + p.dt * ta)
}

/// Linear continuous model advanced with the plant's semi-implicit scheme.
fn linear_semi_implicit(s: &DVector<f64>, force: f64, p: &CartPoleParams) -> DVector<f64> {
    let (a, b) = continuous_model(&PlantState::zero(), p);
    let d = &a * s + &b * force;
    let v = s[1] + p.dt * d[1];
    let w = s[3] + p.dt * d[3];
    DVector::from_vec(vec![s[0] + p.dt * v, v, s[2] + p.dt * w, w])
}

#[test]
fn origin_is_an_equilibrium() {
    let s = nonlinear_step(&PlantState::zero(), 0.0, &frictionless(), 0.0).unwrap();
    assert_eq!(s, PlantState::zero());
    let s = nonlinear_step(&PlantState::zero(), 0.0, &CartPoleParams::default(), 0.0).unwrap();
    assert_eq!(s, PlantState::zero());
}

#[test]
fn upright_equilibrium_is_unstable() {
    let p = frictionless();
    for th in [1e-6, -1e-6] {
        let (_, ta) = accelerations(&PlantState::new(0.0, 0.0, th, 0.0), 0.0, &p);
        assert_eq!(ta.signum(), th.signum());
        let mut s = PlantState::new(0.0, 0.0, th, 0.0);
        for _ in 0..10 {
            s = nonlinear_step(&s, 0.0, &p, 0.0).unwrap();
        }
        assert!(s.theta.abs() > th.abs());
    }
}

#[test]
fn force_is_saturated_but_disturbance_is_not() {
    let p = frictionless();
    let s0 = PlantState::zero();
    let a = nonlinear_step(&s0, 100.0, &p, 0.0).unwrap();
    let b = nonlinear_step(&s0, 30.0, &p, 0.0).unwrap();
    assert_eq!(a, b);
    let c = nonlinear_step(&s0, 100.0, &p, 5.0).unwrap();
    let d = nonlinear_step(&s0, 35.0, &p, 0.0);
    let (xa, _) = accelerations(&s0, 35.0, &p);
    assert!((c.v - p.dt * xa).abs() < 1e-15);
    assert!(d.unwrap().v < c.v);
}

#[test]
fn semi_implicit_and_explicit_differ_by_the_position_correction() {
    // The two schemes differ only in the position update: exactly T²·acceleration.
    let p = frictionless();
    let s = PlantState::new(0.0, 0.0, 0.1, 0.0);
    let si = nonlinear_step(&s, 0.0, &p, 0.0).unwrap();
    let ex = explicit_step(&s, 0.0, &p);
    let (xa, ta) = accelerations(&s, 0.0, &p);
    let t2 = p.dt * p.dt;
    assert!((si.x - ex.x - t2 * xa).abs() < 1e-15);
    assert!((si.theta - ex.theta - t2 * ta).abs() < 1e-15);
    assert_eq!(si.v, ex.v);
    assert_eq!(si.omega, ex.omega);
    // Freeze the measured gap.
    assert!((si.x - ex.x - (-1.867294e-4)).abs() < 1e-9, "{}", si.x - ex.x);
    assert!((si.theta - ex.theta - 2.9832926e-3).abs() < 1e-9, "{:e}", si.theta - ex.theta);
}

#[test]
fn student_linearization_matches_printed_matrices() {
    let (a, b) = student_linearization(&CartPoleParams::default());
    let printed_a = [
        [1.0, 0.0333, 0.0, 0.0],
        [0.0, 1.0, -0.0565, 0.0],
        [0.0, 0.0, 1.0, 0.0333],
        [0.0, 0.0, 0.8980, 1.0],
    ];
    for (i, row) in printed_a.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            assert!((a[(i, j)] - v).abs() < 5e-4, "A[{i}][{j}] = {}", a[(i, j)]);
        }
    }
    for (i, v) in [0.0, 0.0334, 0.0, -0.0783].iter().enumerate() {
        assert!((b[(i, 0)] - v).abs() < 5e-4, "B[{i}] = {}", b[(i, 0)]);
    }
    assert!((a[(0, 1)] - 1.0 / 30.0).abs() < 1e-15);
}

#[test]
fn continuous_time_limit() {
    let p = CartPoleParams { dt: 1e-12, ..Default::default() };
    let (a, b) = student_linearization(&p);
    assert!((a - nalgebra::DMatrix::identity(4, 4)).abs().max() < 1e-10);
    assert!(b.abs().max() < 1e-10);
}

#[test]
fn teacher_model_reduces_to_student_model_at_origin() {
    let p = CartPoleParams::default();
    let (a0, b0) = student_linearization(&p);
    for s in [PlantState::zero(), PlantState::new(0.3, -0.2, 0.0, 0.0), PlantState::new(0.0, 0.0, 1e-12, 0.0)] {
        let (a, b) = teacher_linearization(&s, &p);
        assert!((&a - &a0).abs().max() < 1e-9);
        assert!((&b - &b0).abs().max() < 1e-9);
        assert!(a.iter().chain(b.iter()).all(|v| v.is_finite()));
    }
}

#[test]
fn teacher_model_at_quarter_turn() {
    let p = CartPoleParams::default();
    let th = std::f64::consts::FRAC_PI_2;
    let (a, b) = continuous_model(&PlantState::new(0.0, 0.0, th, 0.0), &p);
    let m = p.total_mass();
    let den = 4.0 / 3.0 * m - p.mass_pole * th.cos().powi(2);
    let expected = p.gravity * (2.0 / std::f64::consts::PI) * m / (p.half_length * den);
    assert!((a[(3, 2)] - expected).abs() < 1e-12);
    // cos(π/2) ≈ 0 kills the cart coupling and the pole input gain.
    assert!(a[(1, 2)].abs() < 1e-15);
    assert!(b[(3, 0)].abs() < 1e-15);
}

#[test]
fn teacher_model_is_continuous_at_zero_angle() {
    let p = CartPoleParams::default();
    let at = |th: f64| teacher_linearization(&PlantState::new(0.0, 0.0, th, 0.0), &p);
    let (a0, b0) = at(0.0);
    let (ap, bp) = at(1e-6);
    let (am, bm) = at(-1e-6);
    let ac = (ap + am) * 0.5;
    let bc = (bp + bm) * 0.5;
    assert!((ac - a0).abs().max() < 1e-6);
    assert!((bc - b0).abs().max() < 1e-6);
}

#[test]
fn small_signal_linear_fidelity() {
    use rand::{Rng, SeedableRng};
    let p = frictionless();
    let (a, b) = student_linearization(&p);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let mut s = DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0));
        s *= rng.gen_range(0.0..0.05) / s.norm();
        let f = rng.gen_range(-1.0..1.0);
        let next = nonlinear_step(&PlantState::from_vector(&s).unwrap(), f, &p, 0.0).unwrap().to_vector();
        let lin = linear_semi_implicit(&s, f, &p);
        assert!((&next - &lin).norm() <= 1e-4, "residual {}", (&next - &lin).norm());
        // Against the forward-Euler model A·s + B·F the remaining gap is the
        // integrator's T² position correction.
        let (a_hat, b_hat) = continuous_model(&PlantState::zero(), &p);
        let d = &a_hat * &s + &b_hat * f;
        let mut correction = DVector::zeros(4);
        correction[0] = p.dt * p.dt * d[1];
        correction[2] = p.dt * p.dt * d[3];
        let eq = &a * &s + &b * f + correction;
        assert!((&lin - &eq).norm() < 1e-14);
    }
}

#[test]
fn energy_has_no_secular_drift_near_the_hanging_rest_point() {
    let p = frictionless();
    for d in [0.05, 0.2] {
        let mut s = PlantState::new(0.0, 0.0, std::f64::consts::PI - d, 0.0);
        let e0 = mechanical_energy(&s, &p);
        let mut rel = Vec::with_capacity(300);
        for _ in 0..300 {
            s = nonlinear_step(&s, 0.0, &p, 0.0).unwrap();
            rel.push((mechanical_energy(&s, &p) - e0) / e0.abs());
        }
        let n = rel.len() as f64;
        let mean_k = (n - 1.0) / 2.0;
        let mean_e = rel.iter().sum::<f64>() / n;
        let (mut num, mut den) = (0.0, 0.0);
        for (k, e) in rel.iter().enumerate() {
            num += (k as f64 - mean_k) * (e - mean_e);
            den += (k as f64 - mean_k).powi(2);
        }
        let slope = num / den;
        assert!(slope.abs() < 1e-4, "d = {d}: trend {slope:e} per step");
        assert!(rel.iter().all(|e| e.abs() < 0.15), "d = {d}: oscillation exceeds bound");
    }
}

#[test]
fn friction_opposes_motion() {
    let p = CartPoleParams::default();
    let s = PlantState::new(0.0, 1.0, 0.0, 0.0);
    let (xa, _) = accelerations(&s, 0.0, &p);
    assert!(xa < 0.0);
    assert!((p.cart_friction(1.0) - p.mu_cart * p.friction_force_scale).abs() < 1e-9);
}

#[test]
fn divergence_is_reported() {
    let p = frictionless();
    let s = PlantState::new(0.0, f64::MAX, 0.0, f64::MAX);
    assert!(matches!(nonlinear_step(&s, 0.0, &p, 0.0), Err(sec_core::Error::Divergence { .. })));
}

#[test]
fn params_roundtrip_through_toml() {
    let p = CartPoleParams { mu_cart: 45.0, ..Default::default() };
    let text = toml::to_string(&p).unwrap();
    let back: CartPoleParams = toml::from_str(&text).unwrap();
    assert_eq!(p, back);
    assert!(toml::from_str::<CartPoleParams>("bogus = 1").is_err());
    assert!(CartPoleParams { half_length: -1.0, ..Default::default() }.validate().is_err());
}
