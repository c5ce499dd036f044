use std::f64::consts::PI;

use opc_core::diagonals::{index_inverse, index_map, plane_weights, synthesize_basis, DiagSet, DiagonalPlan};
use opc_core::instances::{gen_path, gen_reservoir, uniform_grid, PathKind, ScalarFn};
use opc_core::kernel::{c, hstack, inner, isometry_defect, C64};
use opc_core::numrange::GuaranteeRegion;
use opc_core::{OpcError, Tolerances};
use proptest::prelude::*;

fn roots(n: usize) -> Vec<C64> {
    (0..n).map(|k| C64::from_polar(1.0, 2.0 * PI * k as f64 / n as f64)).collect()
}

proptest! {
    #[test]
    fn index_map_round_trips(n in 1usize..100_000) {
        let (r, s) = index_map(n);
        prop_assert!(r >= 1 && s >= 1);
        prop_assert_eq!(index_inverse(r, s), n);
    }

    #[test]
    fn plane_weights_are_convex_and_exact(k in 3usize..9, radius in 0.0f64..0.85, angle in 0.0f64..(2.0 * PI)) {
        let anchors = roots(k);
        // stay inside the inscribed circle of the polygon
        let z = C64::from_polar(radius * (PI / k as f64).cos(), angle);
        let w = plane_weights(&anchors, z).unwrap();
        let total: f64 = w.iter().map(|&(_, x)| x).sum();
        let point: C64 = w.iter().map(|&(i, x)| anchors[i] * x).sum();
        prop_assert!(w.iter().all(|&(_, x)| x >= -1e-12));
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!((point - z).norm() < 1e-12);
    }

    #[test]
    fn real_anchors_use_the_extreme_pair(x in -0.99f64..0.99) {
        let anchors = [c(-1.0, 0.0), c(0.3, 0.0), c(1.0, 0.0)];
        let w = plane_weights(&anchors, c(x, 0.0)).unwrap();
        let point: C64 = w.iter().map(|&(i, t)| anchors[i] * t).sum();
        prop_assert!((point - c(x, 0.0)).norm() < 1e-14);
        prop_assert!(w.iter().all(|&(i, _)| i != 1));
    }
}

#[test]
fn points_outside_the_hull_are_rejected() {
    assert!(matches!(plane_weights(&roots(4), c(0.9, 0.9)), Err(OpcError::NotInside(_))));
    assert!(matches!(plane_weights(&[c(-1.0, 0.0), c(1.0, 0.0)], c(0.0, 0.1)), Err(OpcError::NotInside(_))));
}

#[test]
fn drifting_path_gets_exact_orthonormal_diagonals() {
    let tol = Tolerances::default();
    let mut inst = gen_reservoir(&roots(6), 48, GuaranteeRegion::disk(c(0.0, 0.0), 0.6), 21).unwrap();
    let a = gen_path(
        &inst,
        &PathKind::Drift {
            c: ScalarFn::wave(c(0.04, 0.02), 1.0),
        },
        uniform_grid(2),
        &tol,
    )
    .unwrap();
    let d = vec![
        ScalarFn::wave(c(0.1, 0.0), 2.0),
        ScalarFn::constant(c(-0.1, 0.05)),
        ScalarFn::affine(c(0.0, -0.1), c(0.1, 0.1)),
        ScalarFn::zero(),
    ];
    let plan = DiagonalPlan::new(d.clone(), 0.2);
    let set = synthesize_basis(&mut inst, &a, &plan, 4, &tol).unwrap();

    // recompute everything node by node from the raw vectors
    let mut gram: f64 = 0.0;
    let mut residual: f64 = 0.0;
    for (i, &t) in set.grid.iter().enumerate() {
        let cols: Vec<_> = set.vectors.iter().map(|v| &v.values[i]).collect();
        gram = gram.max(isometry_defect(&hstack(&cols)));
        for (v, dn) in set.vectors.iter().zip(&d) {
            let x = &v.values[i];
            residual = residual.max((inner(x, &a.apply(t, x)) - dn.eval(t)).norm());
        }
    }
    assert!(gram <= 1e-10, "{gram}");
    assert!(residual <= 1e-10, "{residual}");
    assert!(set.certificate.gram_defect + 1e-12 >= gram);

    let back = DiagSet::from_json(&set.to_json().unwrap()).unwrap();
    assert_eq!(back, set);
}

#[test]
fn diagonals_outside_the_region_fail_validation() {
    let tol = Tolerances::default();
    let mut inst = gen_reservoir(&roots(4), 16, GuaranteeRegion::disk(c(0.0, 0.0), 0.5), 2).unwrap();
    let a = gen_path(&inst, &PathKind::Constant, uniform_grid(2), &tol).unwrap();
    let plan = DiagonalPlan::new(vec![ScalarFn::constant(c(0.6, 0.0))], 0.2);
    assert!(synthesize_basis(&mut inst, &a, &plan, 1, &tol).is_err());
}
