use std::collections::BTreeMap;

use nalgebra::DMatrix;
use proptest::prelude::*;
use sec_core::lmi::*;
use sec_core::student::published_cartpole_design;

fn scalar(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

#[test]
fn one_dimensional_feasibility() {
    let q = MatrixVar::symmetric("Q", 1);
    let c = LmiConstraint::positive_definite("Q > 0", AffineExpr::var(&q));
    let sol = LmiSolver::default().solve_feasibility(&[q], &[c]).unwrap();
    assert_eq!(sol.status, SolverStatus::Feasible);
    assert!(sol.get("Q").unwrap()[(0, 0)] >= DEFAULT_MARGIN - 1e-9);
    assert!(sol.residual <= DEFAULT_TOLERANCE);
}

#[test]
fn contradictory_bounds_are_infeasible() {
    let q = MatrixVar::symmetric("Q", 2);
    let i = DMatrix::<f64>::identity(2, 2);
    let upper = AffineExpr::var(&q).scale(-1.0).plus_const(&(-&i)).unwrap(); // -Q - I ⪰ 0
    let lower = AffineExpr::var(&q).plus_const(&(-&i)).unwrap(); // Q - I ⪰ 0
    let cons = [
        LmiConstraint::positive_definite("Q <= -I", upper),
        LmiConstraint::positive_definite("Q >= I", lower),
    ];
    let sol = LmiSolver::default().solve_feasibility(&[q], &cons).unwrap();
    assert_eq!(sol.status, SolverStatus::Infeasible);
}

#[test]
fn undeclared_variable_is_structural_error() {
    let q = MatrixVar::symmetric("Q", 1);
    let other = MatrixVar::symmetric("W", 1);
    let c = LmiConstraint::positive_definite("W > 0", AffineExpr::var(&other));
    assert!(matches!(LmiSolver::default().solve_feasibility(&[q], &[c]), Err(sec_core::Error::Structural(_))));
}

#[test]
fn non_symmetric_block_is_structural_error() {
    let r = MatrixVar::rectangular("R", 2, 2);
    let c = LmiConstraint::positive_definite("R > 0", AffineExpr::var(&r));
    assert!(matches!(LmiSolver::default().solve_feasibility(&[r], &[c]), Err(sec_core::Error::Structural(_))));
}

#[test]
fn logdet_attains_identity_bound() {
    let q = MatrixVar::symmetric("Q", 1);
    let c = LmiConstraint::positive_definite_with_margin(
        "Q <= I",
        AffineExpr::identity(1).minus(&AffineExpr::var(&q)).unwrap(),
        1e-12,
    );
    let sol = LmiSolver::default().maximize_logdet(&q, &[q.clone()], &[c]).unwrap();
    assert_eq!(sol.status, SolverStatus::Optimal);
    assert!((sol.get("Q").unwrap()[(0, 0)] - 1.0).abs() < 1e-6);
}

#[test]
fn logdet_diagonal_optimum() {
    // Closed form: the maximizer of log det Q over Q ⪯ diag(4, 9) is diag(4, 9).
    let q = MatrixVar::symmetric("Q", 2);
    let bound = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&[4.0, 9.0]));
    let c = LmiConstraint::positive_definite_with_margin(
        "Q <= diag(4,9)",
        AffineExpr::constant(bound.clone()).minus(&AffineExpr::var(&q)).unwrap(),
        1e-12,
    );
    let sol = LmiSolver::default().maximize_logdet(&q, &[q.clone()], &[c]).unwrap();
    assert_eq!(sol.status, SolverStatus::Optimal);
    let qv = sol.get("Q").unwrap();
    assert!((qv - &bound).amax() < 1e-5, "{qv}");
    let ld = sec_core::linalg::log_det_spd(qv).unwrap();
    assert!((ld - 36f64.ln()).abs() < 1e-5);
}

#[test]
fn solution_residual_matches_independent_eigen_check() {
    let q = MatrixVar::symmetric("Q", 3);
    let a = DMatrix::from_row_slice(3, 3, &[0.9, 0.2, 0.0, 0.0, 0.8, 0.1, 0.05, 0.0, 0.7]);
    let lyap = AffineExpr::block(vec![
        vec![AffineExpr::var(&q), AffineExpr::var(&q).premul(&a).unwrap().transpose()],
        vec![AffineExpr::var(&q).premul(&a).unwrap(), AffineExpr::var(&q)],
    ])
    .unwrap();
    let cons = [
        LmiConstraint::positive_definite("stability", lyap),
        LmiConstraint::scalar_bound(
            "trace <= 3",
            AffineExpr::var(&q)
                .premul(&DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]))
                .unwrap()
                .postmul(&DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0]))
                .unwrap(),
            Sense::Le,
            3.0,
        ),
    ];
    let sol = LmiSolver::default().solve_feasibility(&[q.clone()], &cons).unwrap();
    assert!(sol.status.is_success());
    let qv = sol.get("Q").unwrap();
    let block = sec_core::linalg::block(&[
        vec![qv.clone(), qv * a.transpose()],
        vec![&a * qv, qv.clone()],
    ])
    .unwrap();
    assert!(sec_core::linalg::min_eigenvalue(&block).unwrap() >= -DEFAULT_TOLERANCE);
    assert!(qv[(0, 0)] <= 3.0 + DEFAULT_TOLERANCE);
}

#[test]
fn logdet_dominates_feasibility() {
    let q = MatrixVar::symmetric("Q", 2);
    let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, -0.2, 0.9]);
    let lower = AffineExpr::var(&q).premul(&a).unwrap();
    let cons = [
        LmiConstraint::positive_definite(
            "contraction",
            AffineExpr::block(vec![
                vec![AffineExpr::var(&q).scale(1.2), lower.transpose()],
                vec![lower.clone(), AffineExpr::var(&q)],
            ])
            .unwrap(),
        ),
        LmiConstraint::positive_definite(
            "Q <= I",
            AffineExpr::identity(2).minus(&AffineExpr::var(&q)).unwrap(),
        ),
    ];
    let s = LmiSolver::default();
    let feas = s.solve_feasibility(&[q.clone()], &cons).unwrap();
    let opt = s.maximize_logdet(&q, &[q.clone()], &cons).unwrap();
    let df = feas.get("Q").unwrap().determinant();
    let dopt = opt.get("Q").unwrap().determinant();
    assert!(dopt >= df * (1.0 - 1e-6), "{dopt} < {df}");
}

#[test]
fn is_positive_definite_examples() {
    assert!(is_positive_definite(&DMatrix::identity(4, 4), 0.5).unwrap());
    let d = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&[1.0, -0.01]));
    assert!(!is_positive_definite(&d, 0.0).unwrap());
    assert!(matches!(
        is_positive_definite(&DMatrix::zeros(2, 3), 0.0),
        Err(sec_core::Error::Structural(_))
    ));
}

#[test]
fn published_alpha_p_minus_h_is_positive_definite() {
    let d = published_cartpole_design();
    assert!(is_positive_definite(&(&d.p * 0.87 - &d.h), 0.0).unwrap());
}

#[test]
fn schur_examples() {
    let i2 = DMatrix::<f64>::identity(2, 2);
    assert!(schur_check(&i2, &DMatrix::zeros(2, 2), &i2, 0.0).unwrap());
    assert!(!schur_check(&scalar(1.0), &scalar(2.0), &scalar(1.0), 0.0).unwrap());
}

#[test]
fn schur_singular_c_is_numerical_failure() {
    let r = schur_check(&scalar(1.0), &scalar(0.0), &scalar(0.0), 0.0);
    assert!(matches!(r, Err(sec_core::Error::Numerical(_))));
}

#[test]
fn constraint_violation_reports_amount() {
    let q = MatrixVar::symmetric("Q", 1);
    let c = LmiConstraint::positive_definite_with_margin("Q >= 1", AffineExpr::var(&q), 1.0);
    let mut vals = BTreeMap::new();
    vals.insert("Q".to_string(), scalar(0.25));
    assert!((c.violation(&vals).unwrap() - 0.75).abs() < 1e-15);
}

fn sym(n: usize, vals: &[f64]) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |i, j| vals[(i * 7 + j * 3) % vals.len()]);
    sec_core::linalg::symmetrize(&m)
}

fn block_test(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>) -> bool {
    let m = sec_core::linalg::block(&[vec![a.clone(), b.clone()], vec![b.transpose(), c.clone()]]).unwrap();
    is_positive_definite(&sec_core::linalg::symmetrize(&m), 0.0).unwrap()
}

fn strictly_decided(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>) -> bool {
    let m = sec_core::linalg::block(&[vec![a.clone(), b.clone()], vec![b.transpose(), c.clone()]]).unwrap();
    let lam = sec_core::linalg::min_eigenvalue(&m).unwrap();
    let lc = sec_core::linalg::min_eigenvalue(c).unwrap();
    lam.abs() > 1e-8 && lc.abs() > 1e-8
}

#[test]
fn schur_agrees_with_brute_force_on_100_random_4x4_blocks() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
    let mut checked = 0;
    while checked < 100 {
        let n = 4;
        let a = sec_core::linalg::symmetrize(&DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0)))
            + DMatrix::identity(n, n) * rng.gen_range(0.0..3.0);
        let c = sec_core::linalg::symmetrize(&DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0)))
            + DMatrix::identity(n, n) * rng.gen_range(0.0..3.0);
        let b = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        if !strictly_decided(&a, &b, &c) {
            continue;
        }
        assert_eq!(schur_check(&a, &b, &c, 0.0).unwrap(), block_test(&a, &b, &c));
        checked += 1;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]
    #[test]
    fn schur_matches_block_eigen_test(
        na in 1usize..=6,
        nc in 1usize..=6,
        va in proptest::collection::vec(-2.0f64..2.0, 8),
        vb in proptest::collection::vec(-1.5f64..1.5, 7),
        vc in proptest::collection::vec(-2.0f64..2.0, 9),
        shift_a in 0.0f64..4.0,
        shift_c in 0.0f64..4.0,
    ) {
        let a = sym(na, &va) + DMatrix::identity(na, na) * shift_a;
        let c = sym(nc, &vc) + DMatrix::identity(nc, nc) * shift_c;
        let b = DMatrix::from_fn(na, nc, |i, j| vb[(i * 5 + j) % vb.len()]);
        prop_assume!(strictly_decided(&a, &b, &c));
        prop_assert_eq!(schur_check(&a, &b, &c, 0.0).unwrap(), block_test(&a, &b, &c));
    }
}
