use std::f64::consts::PI;

use opc_core::instances::gen_reservoir;
use opc_core::kernel::{c, op_norm, ComplexMatrix, C64};
use opc_core::numrange::GuaranteeRegion;
use opc_core::smoothfield::{build_cover, build_fields, smooth_step, sqrt_smooth_step, FieldExpr, FieldSet, PlanarDomain};
use proptest::prelude::*;

fn roots(n: usize) -> Vec<C64> {
    (0..n).map(|k| C64::from_polar(1.0, 2.0 * PI * k as f64 / n as f64)).collect()
}

fn field() -> FieldExpr {
    FieldExpr::Sum {
        terms: vec![
            FieldExpr::Poly {
                coeffs: vec![c(0.05, 0.0), c(0.2, 0.1)],
            },
            FieldExpr::Wave {
                amp: c(0.05, 0.0),
                kx: 2.0,
                ky: 1.0,
            },
        ],
    }
}

fn fields() -> (ComplexMatrix, FieldSet) {
    let mut inst = gen_reservoir(&roots(6), 24, GuaranteeRegion::disk(c(0.0, 0.0), 0.6), 4).unwrap();
    let d = field();
    let dom = PlanarDomain::unit_disk();
    let cover = build_cover(&inst, &d, &dom, 0.02, 31).unwrap();
    let set = build_fields(&mut inst, &cover, &d, &dom, 2).unwrap();
    (inst.matrix(), set)
}

proptest! {
    #[test]
    fn smooth_step_is_symmetric(x in -0.5f64..1.5) {
        prop_assert!((smooth_step(x) + smooth_step(1.0 - x) - 1.0).abs() < 1e-14);
        prop_assert!((sqrt_smooth_step(x).powi(2) - smooth_step(x)).abs() < 1e-14);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn field_identities_hold_off_mesh(r in 0.0f64..0.999, angle in 0.0f64..(2.0 * PI)) {
        let (a, set) = fields();
        let w = C64::from_polar(r, angle);
        let z = set.expr.eval(w);
        let weights = set.cover.partition(z).unwrap();
        prop_assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(weights.iter().all(|&f| f >= 0.0));

        let s = set.isometry(w).unwrap();
        let n = s.ncols();
        let id = ComplexMatrix::identity(n, n);
        prop_assert!(op_norm(&(s.adjoint() * &s - &id)) < 1e-12);
        prop_assert!(op_norm(&(s.adjoint() * &a * &s - id * z)) < 1e-12);
    }
}

#[test]
fn fields_from_different_points_stay_orthogonal() {
    let (_, set) = fields();
    let pts = [c(0.0, 0.0), c(0.5, 0.5), c(-0.7, 0.1), c(0.2, -0.9)];
    for &p in &pts {
        for &q in &pts {
            let (u, v) = (set.eval(0, p).unwrap(), set.eval(1, q).unwrap());
            assert!((u.adjoint() * v)[(0, 0)].norm() < 1e-13);
        }
    }
}

#[test]
fn fields_round_trip_through_json() {
    let (_, set) = fields();
    let back = FieldSet::from_json(&set.to_json().unwrap()).unwrap();
    assert_eq!(back, set);
    assert!(FieldSet::from_json(&set.to_json().unwrap().replace("\"smoothfield\"", "\"other\"")).is_err());
}
