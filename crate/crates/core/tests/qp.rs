mod common;

use armpc::qp::{solve_qp, solve_with, QpProblem, QpSettings, QpStatus};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn matches_projected_gradient_on_random_problems() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..60 {
        let (h, f, g, lo, hi) = common::random_qp(&mut rng);
        let oracle = common::projected_gradient_qp(&h, &f, &g, &lo, &hi, 400_000);
        let sol = solve_qp(&QpProblem::new(h, f, g, lo, hi).unwrap(), 4000, 1e-6).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        worst = worst.max((&sol.z_star - &oracle).amax());
    }
    assert!(worst < 1e-5, "max deviation {worst:e}");
}

#[test]
fn oracle_reproduces_the_unconstrained_minimizer() {
    let h = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
    let f = DVector::from_vec(vec![1.0, -2.0]);
    let g = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
    let (lo, hi) = (
        DVector::from_element(1, -100.0),
        DVector::from_element(1, 100.0),
    );
    let z = common::projected_gradient_qp(&h, &f, &g, &lo, &hi, 10_000);
    let exact = -h.clone().lu().solve(&f).unwrap();
    assert!((z - exact).amax() < 1e-12);
}

#[test]
fn active_bound_is_hit_exactly() {
    // min (z0-2)^2 + (z1+1)^2 with z0 <= 1, z1 >= 0
    let h = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 2.0]));
    let f = DVector::from_vec(vec![-4.0, 2.0]);
    let g = DMatrix::identity(2, 2);
    let lo = DVector::from_vec(vec![f64::NEG_INFINITY, 0.0]);
    let hi = DVector::from_vec(vec![1.0, f64::INFINITY]);
    let sol = solve_qp(&QpProblem::new(h, f, g, lo, hi).unwrap(), 4000, 1e-6).unwrap();
    assert_eq!(sol.status, QpStatus::Optimal);
    assert!((sol.z_star[0] - 1.0).abs() < 1e-9 && sol.z_star[1].abs() < 1e-9);
    // multipliers: positive on the active upper bound, negative on the active lower bound
    assert!(sol.duals[0] > 0.0 && sol.duals[1] < 0.0);
}

#[test]
fn contradictory_rows_are_infeasible() {
    let h = DMatrix::identity(2, 2);
    let f = DVector::zeros(2);
    let g = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
    let lo = DVector::from_vec(vec![1.0, f64::NEG_INFINITY]);
    let hi = DVector::from_vec(vec![f64::INFINITY, -1.0]);
    let sol = solve_qp(&QpProblem::new(h, f, g, lo, hi).unwrap(), 4000, 1e-6).unwrap();
    assert_eq!(sol.status, QpStatus::Infeasible);
}

#[test]
fn empty_row_excluding_zero_is_infeasible_without_iterating() {
    let h = DMatrix::identity(1, 1);
    let g = DMatrix::zeros(1, 1);
    let qp = QpProblem::new(
        h,
        DVector::zeros(1),
        g,
        DVector::from_element(1, 0.5),
        DVector::from_element(1, 1.0),
    )
    .unwrap();
    let sol = solve_qp(&qp, 4000, 1e-6).unwrap();
    assert_eq!((sol.status, sol.iterations), (QpStatus::Infeasible, 0));
}

#[test]
fn tiny_cap_reports_cap_reached() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut capped = 0;
    for _ in 0..20 {
        let (h, f, g, lo, hi) = common::random_qp(&mut rng);
        let qp = QpProblem::new(h, f, g, lo, hi).unwrap();
        let s = QpSettings {
            polish: false,
            ..QpSettings::with_cap(1, 1e-9)
        };
        let sol = solve_with(&qp, &s).unwrap();
        assert!(sol.iterations <= 1);
        capped += usize::from(sol.status == QpStatus::IterationCapReached);
    }
    assert!(capped > 0);
}

#[test]
fn no_constraints_gives_the_linear_solve() {
    let h = DMatrix::from_row_slice(3, 3, &[5.0, 1.0, 0.0, 1.0, 4.0, 1.0, 0.0, 1.0, 3.0]);
    let f = DVector::from_vec(vec![1.0, 2.0, 3.0]);
    let qp = QpProblem::new(
        h.clone(),
        f.clone(),
        DMatrix::zeros(0, 3),
        DVector::zeros(0),
        DVector::zeros(0),
    )
    .unwrap();
    let sol = solve_qp(&qp, 4000, 1e-6).unwrap();
    let exact = -h.lu().solve(&f).unwrap();
    assert!((sol.z_star - exact).amax() < 1e-7);
}

#[test]
fn rejects_inconsistent_data() {
    let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
    assert!(QpProblem::new(
        h,
        DVector::zeros(2),
        DMatrix::zeros(0, 2),
        DVector::zeros(0),
        DVector::zeros(0)
    )
    .is_err());
    let lo = DVector::from_element(1, 2.0);
    let hi = DVector::from_element(1, 1.0);
    assert!(QpProblem::new(
        DMatrix::identity(1, 1),
        DVector::zeros(1),
        DMatrix::identity(1, 1),
        lo,
        hi
    )
    .is_err());
}
