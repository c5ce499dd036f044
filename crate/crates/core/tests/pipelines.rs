use std::f64::consts::PI;
use std::time::Instant;

use opc_core::instances::{gen_path, gen_reservoir, uniform_grid, PathKind, ReservoirInstance, ScalarFn, TargetPath};
use opc_core::kernel::{self, c, ComplexMatrix, C64};
use opc_core::numrange::GuaranteeRegion;
use opc_core::pathbuild::{grid_cells, l2_grid_compress, t9_pipeline, IsoPathFile, SynthesisOptions};
use opc_core::selfadjoint::two_point_matrix;
use opc_core::Tolerances;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn roots(n: usize) -> Vec<C64> {
    (0..n).map(|k| C64::from_polar(1.0, 2.0 * PI * k as f64 / n as f64)).collect()
}

fn demo_instance() -> ReservoirInstance {
    gen_reservoir(&roots(8), 64, GuaranteeRegion::disk(c(0.0, 0.0), 0.7), 1).unwrap()
}

fn rotating_target() -> TargetPath {
    let mut n = ComplexMatrix::zeros(2, 2);
    n[(0, 1)] = c(1.0, 0.0);
    TargetPath::single(ScalarFn::wave(c(0.2, 0.0), 1.0), n)
}

#[test]
fn t9_demo_meets_its_bounds() {
    let mut inst = demo_instance();
    let tol = Tolerances::default();
    let a = gen_path(&inst, &PathKind::Constant, uniform_grid(2), &tol).unwrap();
    let d = rotating_target();
    let region = inst.region.clone();
    let start = Instant::now();
    let (s, cert, rep) = t9_pipeline(Some(&mut inst), &a, &d, &region, 1e-6, &SynthesisOptions::default()).unwrap();
    let elapsed = start.elapsed();
    println!("t9 demo: {cert:?}\n{rep:?}\n{elapsed:?}");
    assert!(cert.certified_sup_bound <= 1e-6);
    assert!(cert.isometry_defect <= 1e-8);
    // independent spot checks at off-grid times
    for k in 0..37 {
        let t = (k as f64 + 0.37) / 37.0;
        let v = s.eval(t).unwrap();
        let err = kernel::op_norm(&(v.adjoint() * a.apply(t, &v) - d.eval(t)));
        assert!(err <= cert.certified_sup_bound, "t = {t}: {err}");
    }
}

#[test]
fn grid_compression_holds_between_frames() {
    let inst = gen_reservoir(&roots(6), 96, GuaranteeRegion::disk(c(0.0, 0.0), 0.6), 7).unwrap();
    let tol = Tolerances::default();
    let a = gen_path(
        &inst,
        &PathKind::Drift {
            c: ScalarFn::wave(c(0.03, 0.01), 1.0),
        },
        uniform_grid(2),
        &tol,
    )
    .unwrap();
    let d = TargetPath::scalar(ScalarFn::wave(c(0.1, 0.0), 1.0));
    let mut inst = inst;
    let eps = 0.08;
    let (v, cert) = l2_grid_compress(Some(&mut inst), &a, &d, eps, &[], &SynthesisOptions::default()).unwrap();
    assert!(cert.certified_sup_bound <= eps);
    let mut worst: f64 = 0.0;
    for k in 0..501 {
        let t = k as f64 / 500.0;
        let x = v.eval(t).unwrap();
        worst = worst.max(kernel::op_norm(&(x.adjoint() * a.apply(t, &x) - d.eval(t))));
        assert!(kernel::isometry_defect(&x) <= 1e-10);
    }
    assert!(worst <= cert.certified_sup_bound * (1.0 + 1e-9), "{worst} vs {}", cert.certified_sup_bound);

    let file = IsoPathFile::new(v, cert);
    let back = IsoPathFile::from_json(&file.to_json().unwrap()).unwrap();
    for t in [0.0, 0.123, 0.5, 0.999] {
        assert_eq!(back.path.eval(t).unwrap(), file.path.eval(t).unwrap());
    }
}

proptest! {
    #[test]
    fn grid_cells_meet_both_step_limits(lip_a in 0.0f64..5.0, lip_d in 0.0f64..5.0, eps in 0.01f64..1.0) {
        let k = grid_cells(lip_a, lip_d, eps) as f64;
        prop_assert!(k >= 1.0);
        prop_assert!(lip_a / k <= eps / 4.0 * (1.0 + 1e-9));
        prop_assert!(lip_d / k <= eps / 2.0 * (1.0 + 1e-9));
        prop_assert!(k == 1.0 || lip_a / (k - 1.0) > eps / 4.0 || lip_d / (k - 1.0) > eps / 2.0);
    }

    #[test]
    fn two_point_frames_compress_exactly(seed in any::<u64>(), n in 1usize..5, lo in -2.0f64..0.0, width in 0.1f64..3.0) {
        let tol = Tolerances::default();
        let (a, b) = (lo, lo + width);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = kernel::random_unitary(&mut rng, n);
        let spectrum: Vec<f64> = (0..n).map(|i| a + width * (i as f64 + 0.5) / n as f64).collect();
        let d = &u * kernel::real_diag(&spectrum) * u.adjoint();
        let legs = kernel::random_unitary(&mut rng, 2 * n);
        let (leg_a, leg_b) = (legs.columns(0, n).into_owned(), legs.columns(n, n).into_owned());
        let w = two_point_matrix(a, b, &d, &leg_a, &leg_b, &tol).unwrap();
        let op = &leg_a * leg_a.adjoint() * c(a, 0.0) + &leg_b * leg_b.adjoint() * c(b, 0.0);
        prop_assert!(kernel::isometry_defect(&w) < 1e-10);
        prop_assert!(kernel::op_norm(&(w.adjoint() * op * &w - d)) < 1e-10);
    }
}
