//! Stationary compressions: convex combinations of compressions, the
//! Hermitian split of a matrix into a compression of a diagonal, and exact
//! compressions of reservoir instances.

use serde::{Deserialize, Serialize};

use crate::error::{OpcError, Result};
use crate::instances::{realize_in_reservoir, ReservoirInstance};
use crate::kernel::{self, c, ComplexMatrix, C64};
use crate::numrange;
use crate::tol::Tolerances;

/// One summand `(A_j, Ã_j, U_j)` with `U_j Ã_j U_j* = A_j`.
pub struct PokrzywaBlock<'a> {
    pub a: &'a ComplexMatrix,
    pub a_tilde: &'a ComplexMatrix,
    pub u: &'a ComplexMatrix,
}

/// Isometry `V x = ⊕_j √α_j U_j x` with `V* (⊕ A_j) V = Σ α_j Ã_j`.
pub fn pokrzywa_compress(blocks: &[PokrzywaBlock<'_>], alpha: &[f64], tol: &Tolerances) -> Result<ComplexMatrix> {
    if blocks.len() != alpha.len() || blocks.is_empty() {
        return Err(OpcError::WeightsNotConvex(format!("{} weights for {} blocks", alpha.len(), blocks.len())));
    }
    let sum: f64 = alpha.iter().sum();
    if alpha.iter().any(|&a| !(a >= 0.0)) || (sum - 1.0).abs() > 1e-12 {
        return Err(OpcError::WeightsNotConvex(format!("weights sum to {sum}")));
    }
    let dim_x = blocks[0].a_tilde.nrows();
    let mut pieces = Vec::with_capacity(blocks.len());
    for b in blocks {
        kernel::ensure_square(b.a_tilde)?;
        if b.a_tilde.nrows() != dim_x || b.u.ncols() != dim_x || b.u.nrows() != b.a.nrows() {
            return Err(OpcError::DimensionMismatch("pokrzywa blocks disagree in shape".into()));
        }
        if kernel::isometry_defect(b.u) > tol.ortho {
            return Err(OpcError::EquivalenceViolated(kernel::isometry_defect(b.u)));
        }
        let gap = kernel::op_norm(&(b.u * b.a_tilde * b.u.adjoint() - b.a));
        let scale = kernel::op_norm(b.a).max(1.0);
        if gap > tol.recon * scale {
            return Err(OpcError::EquivalenceViolated(gap));
        }
    }
    for (b, &a) in blocks.iter().zip(alpha) {
        pieces.push(b.u * c(a.sqrt(), 0.0));
    }
    let refs: Vec<&ComplexMatrix> = pieces.iter().collect();
    Ok(kernel::vstack(&refs))
}

/// `B = V* diag(entries) V` with `V` an isometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitDecomp {
    pub entries: Vec<C64>,
    #[serde(with = "kernel::cmx_serde")]
    pub v: ComplexMatrix,
    /// Normal fast path (`‖diag‖ = ‖B‖`) rather than the two-term split.
    pub normal: bool,
}

impl SplitDecomp {
    pub fn diag_norm(&self) -> f64 {
        self.entries.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn reconstruct(&self) -> ComplexMatrix {
        self.v.adjoint() * kernel::diag(&self.entries) * &self.v
    }
}

/// Simultaneous diagonalization of a normal matrix: eigenvectors of `Re B`,
/// refined inside each (numerically) repeated eigenvalue cluster by `Im B`.
fn normal_diagonalize(b: &ComplexMatrix, tol: &Tolerances) -> Result<Option<SplitDecomp>> {
    let n = b.nrows();
    let scale = kernel::op_norm(b).max(f64::MIN_POSITIVE);
    let (vals, q) = kernel::hermitian_eig(&kernel::re_part(b), tol)?;
    let im = kernel::im_part(b);
    let gap = 1e-8 * scale;
    let mut basis = q.clone();
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && vals[end] - vals[end - 1] <= gap {
            end += 1;
        }
        if end - start > 1 {
            let block = q.columns(start, end - start).into_owned();
            let small = block.ad_mul(&im) * &block;
            let (_, r) = kernel::hermitian_eig(&kernel::re_part(&small), tol)?;
            basis.columns_mut(start, end - start).copy_from(&(&block * r));
        }
        start = end;
    }
    let d = basis.ad_mul(b) * &basis;
    let entries: Vec<C64> = (0..n).map(|i| d[(i, i)]).collect();
    let v = basis.adjoint();
    let rec = v.adjoint() * kernel::diag(&entries) * &v;
    if kernel::op_norm(&(rec - b)) > tol.recon * scale.max(1.0) {
        return Ok(None);
    }
    Ok(Some(SplitDecomp { entries, v, normal: true }))
}

/// Writes `B` as a compression `V* D_diag V` of a diagonal matrix.
///
/// Normal inputs are diagonalized directly (`‖D_diag‖ = ‖B‖`). Otherwise
/// `B = ½(2 Re B) + ½(2i Im B)` and each Hermitian part is diagonalized, so
/// `D_diag = 2Λ_re ⊕ 2iΛ_im` and `‖D_diag‖ ≤ 2‖B‖`.
pub fn hermitian_split_decomp(b: &ComplexMatrix, tol: &Tolerances) -> Result<SplitDecomp> {
    let n = kernel::ensure_square(b)?;
    if n == 0 {
        return Ok(SplitDecomp {
            entries: Vec::new(),
            v: ComplexMatrix::zeros(0, 0),
            normal: true,
        });
    }
    let scale = kernel::op_norm(b);
    let comm = kernel::op_norm(&(b * b.adjoint() - b.ad_mul(b)));
    if comm <= tol.recon * scale * scale.max(1.0) {
        if let Some(d) = normal_diagonalize(b, tol)? {
            return Ok(d);
        }
    }
    let (l1, u1) = kernel::hermitian_eig(&kernel::re_part(b), tol)?;
    let (l2, u2) = kernel::hermitian_eig(&kernel::im_part(b), tol)?;
    let d1: Vec<C64> = l1.iter().map(|&x| c(2.0 * x, 0.0)).collect();
    let d2: Vec<C64> = l2.iter().map(|&x| c(0.0, 2.0 * x)).collect();
    let a1 = kernel::diag(&d1);
    let a2 = kernel::diag(&d2);
    let t1 = &u1 * &a1 * u1.adjoint();
    let t2 = &u2 * &a2 * u2.adjoint();
    let u1a = u1.adjoint();
    let u2a = u2.adjoint();
    // Ã_j are the full-weight parts 2Re B, 2i Im B; A_j their diagonal forms
    let v = pokrzywa_compress(
        &[
            PokrzywaBlock { a: &a1, a_tilde: &t1, u: &u1a },
            PokrzywaBlock { a: &a2, a_tilde: &t2, u: &u2a },
        ],
        &[0.5, 0.5],
        tol,
    )?;
    let mut entries = d1;
    entries.extend(d2);
    Ok(SplitDecomp {
        entries,
        v,
        normal: false,
    })
}

/// Checks that every diagonal entry lies in the region.
fn check_entries(inst: &ReservoirInstance, dec: &SplitDecomp, shift: C64) -> Result<()> {
    let scale = inst.region.outer_radius().max(1.0);
    for z in &dec.entries {
        if inst.region.signed_distance(z - shift) < -1e-12 * scale {
            let why = if dec.normal {
                format!("entry {z} lies outside the guarantee region")
            } else {
                format!("entry {z} of the two-term split (which doubles ‖D‖) lies outside the guarantee region")
            };
            return Err(OpcError::MarginViolated(why));
        }
    }
    Ok(())
}

/// Isometry `V` with `V* M V = D` exactly, where `M` is the instance
/// matrix. Vectors are drawn from the instance ledger, so they are orthogonal
/// to every earlier realization and its images, and to `forbidden`.
pub fn exact_compress(
    inst: &mut ReservoirInstance,
    d: &ComplexMatrix,
    forbidden: &[ComplexMatrix],
    tol: &Tolerances,
) -> Result<ComplexMatrix> {
    let dec = hermitian_split_decomp(d, tol)?;
    check_entries(inst, &dec, c(0.0, 0.0))?;
    let mut cols = Vec::with_capacity(dec.entries.len());
    for &z in &dec.entries {
        cols.push(realize_in_reservoir(inst, z, forbidden)?);
    }
    let refs: Vec<&ComplexMatrix> = cols.iter().collect();
    Ok(kernel::hstack(&refs) * &dec.v)
}

/// Approximate compression of a dense matrix through constrained
/// numerical-range solves: each diagonal entry is realized inside the
/// subspace avoiding `forbidden` and all earlier columns with their images.
pub fn approx_compress(
    a: &ComplexMatrix,
    d: &ComplexMatrix,
    forbidden: &[ComplexMatrix],
    tol: &Tolerances,
) -> Result<ComplexMatrix> {
    let n = kernel::ensure_square(a)?;
    let dec = hermitian_split_decomp(d, tol)?;
    let mut avoid: Vec<ComplexMatrix> = forbidden.to_vec();
    let mut cols = Vec::with_capacity(dec.entries.len());
    for &z in &dec.entries {
        let l = kernel::avoidance_subspace(&avoid, &kernel::Subspace::ambient(n), tol).map_err(|_| {
            OpcError::RoomExhausted {
                anchor: 0,
                capacity: n,
                context: format!("avoidance of {} vectors leaves no room", avoid.len()),
            }
        })?;
        let x = numrange::realize_constrained(a, z, &l, tol).map_err(|e| match e {
            OpcError::NotInCompressedRange(z) => OpcError::RoomExhausted {
                anchor: 0,
                capacity: n,
                context: format!("{z} not in the numerical range of the remaining compression"),
            },
            other => other,
        })?;
        avoid.push(a * &x);
        avoid.push(a.ad_mul(&x));
        avoid.push(x.clone());
        cols.push(x);
    }
    let refs: Vec<&ComplexMatrix> = cols.iter().collect();
    Ok(kernel::hstack(&refs) * &dec.v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::gen_reservoir;
    use crate::kernel::{op_norm, random_matrix, random_unitary};
    use crate::numrange::GuaranteeRegion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tol() -> Tolerances {
        Tolerances::default()
    }

    fn square_roots() -> Vec<C64> {
        vec![c(1., 0.), c(0., 1.), c(-1., 0.), c(0., -1.)]
    }

    #[test]
    fn pokrzywa_single_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let u = random_unitary(&mut rng, 3);
        let at = kernel::random_hermitian(&mut rng, 3);
        let a = &u * &at * u.adjoint();
        let v = pokrzywa_compress(&[PokrzywaBlock { a: &a, a_tilde: &at, u: &u }], &[1.0], &tol()).unwrap();
        assert!(op_norm(&(&v - &u)) < 1e-15);
        assert!(op_norm(&(v.ad_mul(&a) * &v - &at)) < 1e-12);
    }

    #[test]
    fn pokrzywa_two_scalars_average_to_zero() {
        let one = kernel::real_diag(&[1.0]);
        let minus = kernel::real_diag(&[-1.0]);
        let id = ComplexMatrix::identity(1, 1);
        let v = pokrzywa_compress(
            &[
                PokrzywaBlock { a: &one, a_tilde: &one, u: &id },
                PokrzywaBlock {
                    a: &minus,
                    a_tilde: &minus,
                    u: &id,
                },
            ],
            &[0.5, 0.5],
            &tol(),
        )
        .unwrap();
        assert!((v[(0, 0)].re - 0.5_f64.sqrt()).abs() < 1e-16);
        let big = kernel::real_diag(&[1.0, -1.0]);
        assert!((v.ad_mul(&big) * &v)[(0, 0)].norm() < 1e-16);
    }

    #[test]
    fn pokrzywa_random_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut a_s = Vec::new();
        let mut at_s = Vec::new();
        let mut u_s = Vec::new();
        for _ in 0..3 {
            let u = random_unitary(&mut rng, 4);
            let at = random_matrix(&mut rng, 4, 4);
            a_s.push(&u * &at * u.adjoint());
            at_s.push(at);
            u_s.push(u);
        }
        let raw: Vec<f64> = (0..3).map(|_| rng.gen_range(0.1..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let alpha: Vec<f64> = raw.iter().map(|x| x / s).collect();
        let alpha_fix = 1.0 - alpha[0] - alpha[1];
        let alpha = vec![alpha[0], alpha[1], alpha_fix];
        let blocks: Vec<_> = (0..3)
            .map(|j| PokrzywaBlock {
                a: &a_s[j],
                a_tilde: &at_s[j],
                u: &u_s[j],
            })
            .collect();
        let v = pokrzywa_compress(&blocks, &alpha, &tol()).unwrap();
        let refs: Vec<&ComplexMatrix> = a_s.iter().collect();
        let big = kernel::direct_sum(&refs);
        let expect: ComplexMatrix = (0..3).fold(ComplexMatrix::zeros(4, 4), |acc, j| acc + &at_s[j] * c(alpha[j], 0.0));
        assert!(op_norm(&(v.ad_mul(&big) * &v - expect)) <= 1e-12);
        assert!(kernel::isometry_defect(&v) < 1e-12);
    }

    #[test]
    fn pokrzywa_rejects_bad_weights() {
        let id = ComplexMatrix::identity(1, 1);
        let blk = [PokrzywaBlock { a: &id, a_tilde: &id, u: &id }];
        assert!(matches!(pokrzywa_compress(&blk, &[0.7], &tol()), Err(OpcError::WeightsNotConvex(_))));
        let two = kernel::real_diag(&[2.0]);
        let bad = [PokrzywaBlock { a: &two, a_tilde: &id, u: &id }];
        assert!(matches!(pokrzywa_compress(&bad, &[1.0], &tol()), Err(OpcError::EquivalenceViolated(_))));
    }

    #[test]
    fn split_identity_takes_fast_path() {
        let dec = hermitian_split_decomp(&ComplexMatrix::identity(3, 3), &tol()).unwrap();
        assert!(dec.normal);
        assert!(dec.entries.iter().all(|z| (z - c(1., 0.)).norm() < 1e-14));
        assert!(op_norm(&(dec.reconstruct() - ComplexMatrix::identity(3, 3))) < 1e-14);
    }

    #[test]
    fn split_nilpotent() {
        let b = kernel::checked_matrix(2, 2, &[c(0., 0.), c(1., 0.), c(0., 0.), c(0., 0.)]).unwrap();
        let dec = hermitian_split_decomp(&b, &tol()).unwrap();
        assert!(!dec.normal);
        let mut re: Vec<f64> = dec.entries[..2].iter().map(|z| z.re).collect();
        re.sort_by(f64::total_cmp);
        assert!((re[0] + 1.0).abs() < 1e-14 && (re[1] - 1.0).abs() < 1e-14);
        let mut im: Vec<f64> = dec.entries[2..].iter().map(|z| z.im).collect();
        im.sort_by(f64::total_cmp);
        assert!((im[0] + 1.0).abs() < 1e-14 && (im[1] - 1.0).abs() < 1e-14);
        assert!(op_norm(&(dec.reconstruct() - b)) <= 1e-12);
        assert!(kernel::isometry_defect(&dec.v) < 1e-14);
    }

    #[test]
    fn split_cyclic_shift_uses_fourier_spectrum() {
        let n = 8;
        let shift = ComplexMatrix::from_fn(n, n, |i, j| if (j + 1) % n == i { c(1., 0.) } else { c(0., 0.) });
        let dec = hermitian_split_decomp(&shift, &tol()).unwrap();
        assert!(dec.normal);
        assert!((dec.diag_norm() - 1.0).abs() < 1e-12);
        // spectrum is the 8th roots of unity
        for z in &dec.entries {
            assert!((z.powu(8) - c(1., 0.)).norm() < 1e-12);
        }
        assert!(op_norm(&(dec.reconstruct() - shift)) < 1e-12);
    }

    #[test]
    fn split_norm_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let b = random_matrix(&mut rng, 4, 4);
            let dec = hermitian_split_decomp(&b, &tol()).unwrap();
            assert!(dec.diag_norm() <= 2.0 * op_norm(&b) + 1e-12);
            assert!(op_norm(&(dec.reconstruct() - &b)) <= 1e-12);
        }
    }

    #[test]
    fn exact_compress_examples() {
        let t = tol();
        let mut inst = gen_reservoir(&square_roots(), 8, GuaranteeRegion::disk(c(0., 0.), 0.6), 0).unwrap();
        let a = inst.matrix();
        let d = kernel::diag(&[c(0.1, 0.), c(-0.2, 0.)]);
        let v = exact_compress(&mut inst, &d, &[], &t).unwrap();
        assert!(op_norm(&(v.ad_mul(&a) * &v - &d)) <= 1e-12);
        assert!(kernel::isometry_defect(&v) <= 1e-12);

        let scalar = kernel::diag(&[c(0.3, 0.2)]);
        let v = exact_compress(&mut inst, &scalar, &[], &t).unwrap();
        assert_eq!(v.ncols(), 1);
        assert!((v.ad_mul(&a) * &v - &scalar)[(0, 0)].norm() < 1e-15);

        let zero = ComplexMatrix::zeros(2, 2);
        let v = exact_compress(&mut inst, &zero, &[], &t).unwrap();
        assert!(op_norm(&(v.ad_mul(&a) * &v)) < 1e-15);
        assert!(kernel::isometry_defect(&v) < 1e-15);
    }

    #[test]
    fn exact_compress_reports_factor_two() {
        let t = tol();
        let mut inst = gen_reservoir(&square_roots(), 8, GuaranteeRegion::disk(c(0., 0.), 0.6), 0).unwrap();
        // ‖D‖ ≈ 0.41 < 0.6, but 2 Re D has eigenvalue 0.8
        let d = kernel::checked_matrix(2, 2, &[c(0.35, 0.), c(0.1, 0.), c(0., 0.), c(0.35, 0.)]).unwrap();
        assert!(op_norm(&d) < 0.6);
        match exact_compress(&mut inst, &d, &[], &t) {
            Err(OpcError::MarginViolated(msg)) => assert!(msg.contains("doubles")),
            other => panic!("expected margin violation, got {other:?}"),
        }
    }

    #[test]
    fn approx_compress_on_dense_matrix() {
        let t = tol();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // large reservoir-like dense matrix: unitary conjugate of a diagonal
        let inst = gen_reservoir(&square_roots(), 6, GuaranteeRegion::disk(c(0., 0.), 0.6), 0).unwrap();
        let u = random_unitary(&mut rng, inst.dim());
        let a = &u * inst.matrix() * u.adjoint();
        let d = kernel::diag(&[c(0.1, 0.1), c(-0.2, 0.)]);
        let v = approx_compress(&a, &d, &[], &t).unwrap();
        assert!(op_norm(&(v.ad_mul(&a) * &v - &d)) <= 1e-8);
        assert!(kernel::isometry_defect(&v) <= 1e-9);
    }

    mod props {
        use super::*;
        use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(200))]

            #[test]
            fn exact_compress_randomized(seed in any::<u64>(), dim in 1usize..4) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let t = Tolerances::default();
                let anchors: Vec<C64> = (0..6).map(|k| C64::from_polar(1.0, std::f64::consts::PI * k as f64 / 3.0)).collect();
                let mut inst = gen_reservoir(&anchors, 4 * dim, GuaranteeRegion::disk(c(0., 0.), 0.8), seed).unwrap();
                let a = inst.matrix();
                let d = random_matrix(&mut rng, dim, dim);
                let d = &d * c(0.35 / op_norm(&d).max(1e-9) * rng.gen_range(0.1..1.0), 0.0);
                let v = exact_compress(&mut inst, &d, &[], &t).unwrap();
                prop_assert!(kernel::isometry_defect(&v) <= 1e-12);
                prop_assert!(op_norm(&(v.ad_mul(&a) * &v - &d)) <= 1e-11);
            }
        }
    }
}
