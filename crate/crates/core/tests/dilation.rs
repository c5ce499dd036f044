use opc_core::dilation::{build_shift, dilation_continuity_check, schaffer_matrix, schaffer_path};
use opc_core::instances::{uniform_grid, ScalarFn, TargetPath};
use opc_core::kernel::{self, c, op_norm, ComplexMatrix};
use opc_core::{OpcError, Tolerances};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn contraction(seed: u64, n: usize, norm: f64) -> ComplexMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = kernel::random_matrix(&mut rng, n, n);
    let s = op_norm(&m);
    m * c(norm / s, 0.0)
}

fn power(a: &ComplexMatrix, k: usize) -> ComplexMatrix {
    (0..k).fold(ComplexMatrix::identity(a.nrows(), a.ncols()), |p, _| p * a)
}

// Telescoping the block sums gives, with n positions,
//   W*UW = D − D*^(n−1) D^n + D*^(n−1) − D*^n D
//   W*W  = I − D*^n D^n
fn closed_forms(d: &ComplexMatrix, n: usize) -> (ComplexMatrix, ComplexMatrix) {
    let dh = d.adjoint();
    let dn = power(d, n);
    let dhn1 = power(&dh, n - 1);
    let dhn = &dhn1 * &dh;
    let wrap = d - &dhn1 * &dn + &dhn1 - &dhn * d;
    let gram = ComplexMatrix::identity(d.nrows(), d.nrows()) - &dhn * &dn;
    (wrap, gram)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn truncated_sums_match_closed_forms(seed in any::<u64>(), dim in 1usize..4, n in 2usize..9, norm in 0.05f64..0.95) {
        let tol = Tolerances::default();
        let d = contraction(seed, dim, norm);
        let model = build_shift(dim, n).unwrap();
        let w = schaffer_matrix(n, &d, &tol).unwrap();
        let (wrap, gram) = closed_forms(&d, n);
        prop_assert!(op_norm(&(w.adjoint() * &model.u * &w - wrap)) < 1e-10);
        prop_assert!(op_norm(&(w.adjoint() * &w - gram)) < 1e-10);
    }

    #[test]
    fn sampled_residuals_respect_reported_bounds(seed in any::<u64>(), n in 4usize..24, norm in 0.1f64..0.7) {
        let tol = Tolerances::default();
        let base = contraction(seed, 2, 1.0);
        let d = TargetPath::single(ScalarFn::wave(c(norm, 0.0), 1.0), base);
        let model = build_shift(2, n).unwrap();
        let (_, cert) = schaffer_path(&model, &d, &uniform_grid(33), 1.0, &tol).unwrap();
        prop_assert!(cert.residual <= cert.wrap_bound * (1.0 + 1e-9) + 1e-14);
        prop_assert!(cert.isometry_defect <= cert.defect_bound * (1.0 + 1e-9) + 1e-14);
    }
}

#[test]
fn tail_tolerance_suggests_enough_positions() {
    let tol = Tolerances::default();
    let d = TargetPath::constant(contraction(3, 2, 0.6));
    let model = build_shift(2, 8).unwrap();
    let err = schaffer_path(&model, &d, &uniform_grid(5), 1e-6, &tol).unwrap_err();
    let OpcError::TailTooLarge { suggested, .. } = err else {
        panic!("unexpected {err:?}")
    };
    assert!(0.6f64.powi(suggested as i32) <= 1e-6);
    let model = build_shift(2, suggested).unwrap();
    let (_, cert) = schaffer_path(&model, &d, &uniform_grid(5), 1e-6, &tol).unwrap();
    assert!(cert.residual <= cert.wrap_bound);
}

#[test]
fn non_contractions_are_rejected() {
    let d = TargetPath::constant(contraction(5, 2, 1.0));
    let model = build_shift(2, 6).unwrap();
    let err = schaffer_path(&model, &d, &uniform_grid(3), 1.0, &Tolerances::default()).unwrap_err();
    assert!(matches!(err, OpcError::NormNotStrictContraction(_)));
}

#[test]
fn path_is_continuous_in_the_target() {
    let tol = Tolerances::default();
    let d = TargetPath::single(ScalarFn::wave(c(0.5, 0.0), 2.0), contraction(9, 3, 1.0));
    let model = build_shift(3, 40).unwrap();
    let (w, _) = schaffer_path(&model, &d, &uniform_grid(9), 1.0, &tol).unwrap();
    let report = dilation_continuity_check(&w, &d, &uniform_grid(257), &tol).unwrap();
    assert_eq!(report.violations, 0, "{report:?}");
    assert!(report.worst_ratio <= 1.0);
}
