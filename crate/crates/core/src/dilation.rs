//! Compressing one fixed unitary to a whole path of strict contractions.
//!
//! The bilateral shift of infinite multiplicity is modeled by a cyclic
//! block shift `U` on `n_positions` copies of `Z`. For a contraction `D`
//! with defect `Δ = (I − D*D)^{1/2}` the isometry
//! `W x = Σ_{j=0}^{J} U^{-j} W0 Δ D^j x` (with `J = n_positions − 1`) obeys
//!
//! * `W*W = I − D*^{J+1} D^{J+1}`
//! * `W*UW − D = D*^J Δ² − D*^J D^{J+1}`
//!
//! so the truncation and the cyclic wrap cost at most `c^{2(J+1)}` and
//! `c^J(1 + c^{J+1})` respectively, where `c = max‖D‖`.

use serde::{Deserialize, Serialize};

use crate::error::{OpcError, Result};
use crate::instances::TargetPath;
use crate::kernel::{self, c, ComplexMatrix};
use crate::par;
use crate::pathbuild::{IsometryPath, PathNode};
use crate::tol::Tolerances;

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftModel {
    pub n_positions: usize,
    pub dim_z: usize,
    /// Block permutation mapping position `i` to position `i + 1`.
    pub u: ComplexMatrix,
    /// Embedding of `Z` as position 0.
    pub w0: ComplexMatrix,
}

pub fn build_shift(dim_z: usize, n_positions: usize) -> Result<ShiftModel> {
    if n_positions < 2 || dim_z == 0 {
        return Err(OpcError::Invalid(format!(
            "shift model needs n_positions >= 2 and dim_z >= 1 (got {n_positions}, {dim_z})"
        )));
    }
    let n = n_positions * dim_z;
    let mut u = ComplexMatrix::zeros(n, n);
    for p in 0..n_positions {
        let q = (p + 1) % n_positions;
        for i in 0..dim_z {
            u[(q * dim_z + i, p * dim_z + i)] = c(1.0, 0.0);
        }
    }
    let mut w0 = ComplexMatrix::zeros(n, dim_z);
    for i in 0..dim_z {
        w0[(i, i)] = c(1.0, 0.0);
    }
    Ok(ShiftModel {
        n_positions,
        dim_z,
        u,
        w0,
    })
}

/// `W = Σ_{j=0}^{n−1} U^{-j} W0 Δ D^j` for one contraction `D`.
pub fn schaffer_matrix(n_positions: usize, d: &ComplexMatrix, tol: &Tolerances) -> Result<ComplexMatrix> {
    let dim_z = kernel::ensure_square(d)?;
    let delta = kernel::defect(d, tol)?;
    let mut w = ComplexMatrix::zeros(n_positions * dim_z, dim_z);
    let mut power = ComplexMatrix::identity(dim_z, dim_z);
    for j in 0..n_positions {
        // U^{-j} W0 lands in position -j mod n
        let pos = (n_positions - j % n_positions) % n_positions;
        w.view_mut((pos * dim_z, 0), (dim_z, dim_z)).copy_from(&(&delta * &power));
        power = &power * d;
    }
    Ok(w)
}

/// Bound on `‖W*UW − D‖` in the reported form `c^J (1 + c)/(1 − c)`.
pub fn wrap_bound(c: f64, j: usize) -> f64 {
    c.powi(j as i32) * (1.0 + c) / (1.0 - c)
}

/// Bound on `‖W*W − I‖`.
pub fn defect_bound(c: f64, j: usize) -> f64 {
    c.powi(2 * (j as i32 + 1)) / (1.0 - c * c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchafferCertificate {
    pub c: f64,
    pub truncation: usize,
    /// Largest sampled `‖W*UW − D‖`.
    pub residual: f64,
    pub wrap_bound: f64,
    /// Largest sampled `‖W*W − I‖`.
    pub isometry_defect: f64,
    pub defect_bound: f64,
    pub grid_size: usize,
}

/// Isometry path `W(t)` with `W*(t) U W(t) ≈ D(t)` for every `t`.
pub fn schaffer_path(
    model: &ShiftModel,
    d: &TargetPath,
    grid: &[f64],
    tail_tol: f64,
    tol: &Tolerances,
) -> Result<(IsometryPath, SchafferCertificate)> {
    if d.dim != model.dim_z {
        return Err(OpcError::DimensionMismatch(format!(
            "target of dimension {} for a shift on dim_z = {}",
            d.dim, model.dim_z
        )));
    }
    let cmax = d.max_norm_bound();
    if cmax >= 1.0 {
        return Err(OpcError::NormNotStrictContraction(cmax));
    }
    let j = model.n_positions - 1;
    let tail = cmax.powi(model.n_positions as i32);
    if tail > tail_tol {
        let suggested = if cmax == 0.0 {
            2
        } else {
            (tail_tol.ln() / cmax.ln()).ceil() as usize
        };
        return Err(OpcError::TailTooLarge {
            tail,
            tol: tail_tol,
            suggested,
        });
    }
    let node = PathNode::Schaffer {
        n_positions: model.n_positions,
        target: d.clone(),
    };
    let path = IsometryPath::new(node, model.n_positions * model.dim_z, model.dim_z);
    let samples = par::map(grid, |&t| -> Result<(f64, f64)> {
        let w = schaffer_matrix(model.n_positions, &d.eval(t), tol)?;
        let res = kernel::op_norm(&(w.adjoint() * &model.u * &w - d.eval(t)));
        Ok((res, kernel::isometry_defect(&w)))
    });
    let mut residual: f64 = 0.0;
    let mut defect: f64 = 0.0;
    for s in samples {
        let (r, e) = s?;
        residual = residual.max(r);
        defect = defect.max(e);
    }
    Ok((
        path,
        SchafferCertificate {
            c: cmax,
            truncation: j,
            residual,
            wrap_bound: wrap_bound(cmax, j),
            isometry_defect: defect,
            defect_bound: defect_bound(cmax, j),
            grid_size: grid.len(),
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuityReport {
    pub pairs: usize,
    pub violations: usize,
    /// Largest ratio of observed difference to allowed bound.
    pub worst_ratio: f64,
}

/// Checks `‖W(t′) − W(t)‖ ≤ (‖D(t′) − D(t)‖ + ‖Δ(t′) − Δ(t)‖)(1/(1−c) + 1/(1−c)²)`
/// on adjacent grid pairs.
pub fn dilation_continuity_check(w: &IsometryPath, d: &TargetPath, grid: &[f64], tol: &Tolerances) -> Result<ContinuityReport> {
    let cmax = d.max_norm_bound();
    if cmax >= 1.0 {
        return Err(OpcError::NormNotStrictContraction(cmax));
    }
    let factor = 1.0 / (1.0 - cmax) + 1.0 / (1.0 - cmax).powi(2);
    let pairs: Vec<(f64, f64)> = grid.windows(2).map(|p| (p[0], p[1])).collect();
    let out = par::map(&pairs, |&(s, t)| -> Result<(f64, f64)> {
        let (ds, dt) = (d.eval(s), d.eval(t));
        let eta = kernel::op_norm(&(&dt - &ds)) + kernel::op_norm(&(kernel::defect(&dt, tol)? - kernel::defect(&ds, tol)?));
        let diff = kernel::op_norm(&(w.eval(t)? - w.eval(s)?));
        Ok((diff, eta * factor + tol.recon))
    });
    let mut report = ContinuityReport {
        pairs: pairs.len(),
        violations: 0,
        worst_ratio: 0.0,
    };
    for o in out {
        let (diff, bound) = o?;
        if diff > bound {
            report.violations += 1;
        }
        if bound > 0.0 {
            report.worst_ratio = report.worst_ratio.max(diff / bound);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::{uniform_grid, ScalarFn};
    use crate::kernel::op_norm;

    fn tol() -> Tolerances {
        Tolerances::default()
    }

    #[test]
    fn shift_examples() {
        let m = build_shift(1, 2).unwrap();
        let swap = kernel::checked_matrix(2, 2, &[c(0., 0.), c(1., 0.), c(1., 0.), c(0., 0.)]).unwrap();
        assert_eq!(m.u, swap);
        let m = build_shift(2, 4).unwrap();
        assert_eq!(m.u.nrows(), 8);
        let mut p = ComplexMatrix::identity(8, 8);
        for _ in 0..4 {
            p = &p * &m.u;
        }
        assert_eq!(p, ComplexMatrix::identity(8, 8));
        assert_eq!(&m.u * m.u.adjoint(), ComplexMatrix::identity(8, 8));
        // wandering blocks are orthogonal
        let mut blocks = vec![m.w0.clone()];
        let uinv = m.u.adjoint();
        for j in 1..4 {
            blocks.push(&uinv * &blocks[j - 1]);
        }
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert_eq!(op_norm(&(blocks[i].adjoint() * &blocks[j])), 0.0);
                }
            }
        }
    }

    #[test]
    fn zero_target_gives_wandering_embedding() {
        let m = build_shift(2, 3).unwrap();
        let w = schaffer_matrix(3, &ComplexMatrix::zeros(2, 2), &tol()).unwrap();
        assert_eq!(w, m.w0);
        assert_eq!(op_norm(&(w.adjoint() * &m.u * &w)), 0.0);
    }

    #[test]
    fn scalar_constant_matches_geometric_series() {
        // D = c I: W*W = 1 − c^{2n}, W*UW = (1 − c²) c Σ_{i<J} c^{2i} + c^J(1 − c²)
        let cval = 0.5;
        let n = 10;
        let j = n - 1;
        let m = build_shift(1, n).unwrap();
        let d = kernel::real_diag(&[cval]);
        let w = schaffer_matrix(n, &d, &tol()).unwrap();
        let gram = (w.ad_mul(&w))[(0, 0)].re;
        assert!((gram - (1.0 - cval.powi(2 * n as i32))).abs() < 1e-15);
        let geo: f64 = (0..j).map(|i| cval.powi(2 * i as i32)).sum();
        let expect = (1.0 - cval * cval) * cval * geo + cval.powi(j as i32) * (1.0 - cval * cval);
        let got = (w.adjoint() * &m.u * &w)[(0, 0)].re;
        assert!((got - expect).abs() < 1e-15);
        assert!((got - cval).abs() <= wrap_bound(cval, j));
    }

    #[test]
    fn long_chain_defect_is_negligible() {
        let cval = 0.5;
        let n = 40;
        let d = TargetPath::constant(kernel::real_diag(&[cval]));
        let m = build_shift(1, n).unwrap();
        let (_, cert) = schaffer_path(&m, &d, &uniform_grid(5), 1e-10, &tol()).unwrap();
        assert!((defect_bound(cval, n - 1) - 0.5f64.powi(80) / 0.75).abs() < 1e-30);
        assert!(cert.isometry_defect <= 1e-15);
    }

    #[test]
    fn rejects_non_contractions_and_short_chains() {
        let m = build_shift(1, 4).unwrap();
        let big = TargetPath::constant(kernel::real_diag(&[1.0]));
        assert!(matches!(
            schaffer_path(&m, &big, &[0.0, 1.0], 1e-3, &tol()),
            Err(OpcError::NormNotStrictContraction(_))
        ));
        let half = TargetPath::constant(kernel::real_diag(&[0.5]));
        match schaffer_path(&m, &half, &[0.0, 1.0], 1e-6, &tol()) {
            Err(OpcError::TailTooLarge { suggested, .. }) => assert_eq!(suggested, 20),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wrap_identity_holds_for_matrix_paths() {
        let e12 = kernel::checked_matrix(2, 2, &[c(0., 0.), c(1., 0.), c(0., 0.), c(0., 0.)]).unwrap();
        let d = TargetPath::new(
            2,
            vec![
                crate::instances::TargetTerm {
                    coeff: ScalarFn::wave(c(0.3, 0.), 1.0),
                    matrix: e12,
                },
                crate::instances::TargetTerm {
                    coeff: ScalarFn::constant(c(0.2, 0.)),
                    matrix: ComplexMatrix::identity(2, 2),
                },
            ],
        )
        .unwrap();
        let n = 12;
        let m = build_shift(2, n).unwrap();
        for i in 0..=10 {
            let t = i as f64 / 10.0;
            let dt = d.eval(t);
            let w = schaffer_matrix(n, &dt, &tol()).unwrap();
            let delta = kernel::defect(&dt, &tol()).unwrap();
            let mut dj = ComplexMatrix::identity(2, 2);
            for _ in 0..n - 1 {
                dj = &dj * &dt;
            }
            let djs = dj.adjoint();
            let predicted = &djs * &delta * &delta - &djs * &dj * &dt;
            let actual = w.adjoint() * &m.u * &w - &dt;
            assert!(op_norm(&(actual - predicted)) < 1e-14);
            let gram_pred = ComplexMatrix::identity(2, 2) - (&dj * &dt).adjoint() * (&dj * &dt);
            assert!(op_norm(&(w.ad_mul(&w) - gram_pred)) < 1e-14);
        }
    }

    #[test]
    fn continuity_examples() {
        let m = build_shift(1, 30).unwrap();
        let constant = TargetPath::constant(kernel::real_diag(&[0.4]));
        let (w, _) = schaffer_path(&m, &constant, &[0.0, 1.0], 1e-6, &tol()).unwrap();
        let r = dilation_continuity_check(&w, &constant, &uniform_grid(11), &tol()).unwrap();
        assert_eq!(r.violations, 0);
        assert_eq!(r.worst_ratio, 0.0);

        let linear = TargetPath::scalar(ScalarFn::affine(c(0., 0.), c(0.3, 0.)));
        let (w, _) = schaffer_path(&m, &linear, &[0.0, 1.0], 1e-6, &tol()).unwrap();
        let r = dilation_continuity_check(&w, &linear, &uniform_grid(101), &tol()).unwrap();
        assert_eq!(r.pairs, 100);
        assert_eq!(r.violations, 0);
    }

    #[test]
    fn continuity_factor_collapses_to_two() {
        let f = |c: f64| 1.0 / (1.0 - c) + 1.0 / (1.0 - c).powi(2);
        assert!((f(1e-12) - 2.0).abs() < 1e-10);
    }
}
