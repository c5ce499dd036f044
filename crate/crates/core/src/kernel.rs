//! Dense complex matrix primitives.
//!
//! [`ComplexMatrix`] is the universal carrier: operators, isometries and
//! vectors (as single columns) all use it. The eigensolver is nalgebra's
//! Hermitian tridiagonal QR; everything else here is built on top of it.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rand::Rng;

use crate::error::{OpcError, Result};
use crate::tol::Tolerances;

pub type C64 = Complex64;
pub type ComplexMatrix = DMatrix<C64>;

const EIG_MAX_ITER: usize = 10_000;

#[inline]
pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

/// Builds a matrix from row-major entries, rejecting NaN/Inf.
pub fn checked_matrix(rows: usize, cols: usize, entries: &[C64]) -> Result<ComplexMatrix> {
    if entries.len() != rows * cols {
        return Err(OpcError::DimensionMismatch(format!(
            "{} entries for a {rows}x{cols} matrix",
            entries.len()
        )));
    }
    if let Some(i) = entries.iter().position(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(OpcError::NonFinite {
            row: i / cols.max(1),
            col: i % cols.max(1),
        });
    }
    Ok(ComplexMatrix::from_row_slice(rows, cols, entries))
}

pub fn ensure_square(a: &ComplexMatrix) -> Result<usize> {
    if a.nrows() != a.ncols() {
        return Err(OpcError::NotSquare {
            rows: a.nrows(),
            cols: a.ncols(),
        });
    }
    Ok(a.nrows())
}

/// Frobenius norm; cheap upper bound for the operator norm.
pub fn fro_norm(a: &ComplexMatrix) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

pub fn diag(values: &[C64]) -> ComplexMatrix {
    ComplexMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(values))
}

pub fn real_diag(values: &[f64]) -> ComplexMatrix {
    ComplexMatrix::from_fn(values.len(), values.len(), |i, j| {
        if i == j {
            c(values[i], 0.0)
        } else {
            C64::new(0.0, 0.0)
        }
    })
}

/// Hermitian part `(A + A*)/2`.
pub fn re_part(a: &ComplexMatrix) -> ComplexMatrix {
    (a + a.adjoint()) * c(0.5, 0.0)
}

/// Skew part as a Hermitian matrix: `(A - A*)/(2i)`.
pub fn im_part(a: &ComplexMatrix) -> ComplexMatrix {
    (a - a.adjoint()) * c(0.0, -0.5)
}

/// Relative distance from Hermitian symmetry.
pub fn hermitian_defect(h: &ComplexMatrix) -> f64 {
    let scale = fro_norm(h).max(f64::MIN_POSITIVE);
    fro_norm(&(h - h.adjoint())) / scale
}

/// Eigendecomposition of a Hermitian matrix.
///
/// Returns eigenvalues in ascending order and the matching unitary matrix of
/// eigenvectors (as columns).
pub fn hermitian_eig(h: &ComplexMatrix, tol: &Tolerances) -> Result<(Vec<f64>, ComplexMatrix)> {
    let n = ensure_square(h)?;
    if n == 0 {
        return Ok((Vec::new(), ComplexMatrix::zeros(0, 0)));
    }
    let asym = hermitian_defect(h);
    if asym > tol.herm {
        return Err(OpcError::NotHermitian(asym));
    }
    let sym = re_part(h);
    let eig = SymmetricEigen::try_new(sym, f64::EPSILON, EIG_MAX_ITER).ok_or(OpcError::NoConvergence)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = ComplexMatrix::from_fn(n, n, |r, k| eig.eigenvectors[(r, order[k])]);
    Ok((values, vectors))
}

/// Largest singular value.
pub fn op_norm(a: &ComplexMatrix) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    if a.nrows() == 1 || a.ncols() == 1 {
        return fro_norm(a);
    }
    let gram = if a.nrows() <= a.ncols() {
        a * a.adjoint()
    } else {
        a.ad_mul(a)
    };
    let gram = re_part(&gram);
    gram.symmetric_eigenvalues().iter().fold(0.0_f64, |m, &v| m.max(v)).max(0.0).sqrt()
}

/// Unique positive semidefinite square root.
pub fn psd_sqrt(p: &ComplexMatrix, tol: &Tolerances) -> Result<ComplexMatrix> {
    let n = ensure_square(p)?;
    let (values, q) = hermitian_eig(p, tol)?;
    let scale = values.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    let mut roots = Vec::with_capacity(n);
    for &v in &values {
        if v < -tol.psd * scale {
            return Err(OpcError::NotPsd(v));
        }
        roots.push(v.max(0.0).sqrt());
    }
    let scaled = ComplexMatrix::from_fn(n, n, |r, k| q[(r, k)] * roots[k]);
    let root = &scaled * q.adjoint();
    Ok(re_part(&root))
}

/// Defect operator `(I - D*D)^{1/2}` of a contraction.
pub fn defect(d: &ComplexMatrix, tol: &Tolerances) -> Result<ComplexMatrix> {
    let n = ensure_square(d)?;
    let norm = op_norm(d);
    if norm > 1.0 + tol.psd {
        return Err(OpcError::NormExceedsOne(norm));
    }
    let gap = ComplexMatrix::identity(n, n) - d.ad_mul(d);
    psd_sqrt(&gap, tol)
}

/// `x* y` for column vectors.
#[inline]
pub fn inner(x: &ComplexMatrix, y: &ComplexMatrix) -> C64 {
    x.iter().zip(y.iter()).map(|(a, b)| a.conj() * b).sum()
}

pub fn column(a: &ComplexMatrix, j: usize) -> ComplexMatrix {
    a.columns(j, 1).into_owned()
}

/// Concatenates column blocks left to right.
pub fn hstack(blocks: &[&ComplexMatrix]) -> ComplexMatrix {
    let rows = blocks.first().map_or(0, |b| b.nrows());
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = ComplexMatrix::zeros(rows, cols);
    let mut at = 0;
    for b in blocks {
        assert_eq!(b.nrows(), rows, "hstack row mismatch");
        out.columns_mut(at, b.ncols()).copy_from(b);
        at += b.ncols();
    }
    out
}

pub fn vstack(blocks: &[&ComplexMatrix]) -> ComplexMatrix {
    let cols = blocks.first().map_or(0, |b| b.ncols());
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = ComplexMatrix::zeros(rows, cols);
    let mut at = 0;
    for b in blocks {
        assert_eq!(b.ncols(), cols, "vstack column mismatch");
        out.rows_mut(at, b.nrows()).copy_from(b);
        at += b.nrows();
    }
    out
}

/// Block-diagonal direct sum.
pub fn direct_sum(blocks: &[&ComplexMatrix]) -> ComplexMatrix {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = ComplexMatrix::zeros(rows, cols);
    let (mut r, mut k) = (0, 0);
    for b in blocks {
        out.view_mut((r, k), (b.nrows(), b.ncols())).copy_from(b);
        r += b.nrows();
        k += b.ncols();
    }
    out
}

/// `‖V*V − I‖`.
pub fn isometry_defect(v: &ComplexMatrix) -> f64 {
    let n = v.ncols();
    op_norm(&(v.ad_mul(v) - ComplexMatrix::identity(n, n)))
}

/// Orthonormal basis of the span of `vectors` (columns), dropping directions
/// whose residual norm falls below `rank_tol` times the original norm.
/// Uses Gram–Schmidt with one reorthogonalization pass.
pub fn orthonormalize(vectors: &ComplexMatrix, rank_tol: f64) -> ComplexMatrix {
    let mut basis: Vec<ComplexMatrix> = Vec::new();
    for j in 0..vectors.ncols() {
        let mut v = column(vectors, j);
        let norm0 = v.norm();
        if norm0 == 0.0 {
            continue;
        }
        for _ in 0..2 {
            for q in &basis {
                let p = inner(q, &v);
                v -= q * p;
            }
        }
        let norm = v.norm();
        if norm > rank_tol * norm0 && norm > f64::MIN_POSITIVE {
            basis.push(v / c(norm, 0.0));
        }
    }
    let refs: Vec<&ComplexMatrix> = basis.iter().collect();
    if refs.is_empty() {
        ComplexMatrix::zeros(vectors.nrows(), 0)
    } else {
        hstack(&refs)
    }
}

/// Subspace given by an orthonormal basis.
#[derive(Debug, Clone, PartialEq)]
pub struct Subspace {
    basis: ComplexMatrix,
}

impl Subspace {
    /// Wraps a basis after checking orthonormality.
    pub fn new(basis: ComplexMatrix, tol: &Tolerances) -> Result<Self> {
        if basis.ncols() > basis.nrows() {
            return Err(OpcError::DimensionMismatch(format!(
                "{} basis vectors in dimension {}",
                basis.ncols(),
                basis.nrows()
            )));
        }
        if basis.ncols() > 0 && isometry_defect(&basis) > tol.ortho {
            return Err(OpcError::Invalid("basis is not orthonormal".into()));
        }
        Ok(Self { basis })
    }

    /// Span of arbitrary vectors.
    pub fn span(vectors: &ComplexMatrix, tol: &Tolerances) -> Self {
        Self {
            basis: orthonormalize(vectors, tol.rank),
        }
    }

    pub fn ambient(n: usize) -> Self {
        Self {
            basis: ComplexMatrix::identity(n, n),
        }
    }

    /// Span of the listed coordinate vectors.
    pub fn coordinates(n: usize, indices: &[usize]) -> Self {
        let mut basis = ComplexMatrix::zeros(n, indices.len());
        for (k, &i) in indices.iter().enumerate() {
            basis[(i, k)] = c(1.0, 0.0);
        }
        Self { basis }
    }

    pub fn basis(&self) -> &ComplexMatrix {
        &self.basis
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn ambient_dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn projector(&self) -> ComplexMatrix {
        &self.basis * self.basis.adjoint()
    }

    /// Compression `Q* A Q`.
    pub fn compress(&self, a: &ComplexMatrix) -> ComplexMatrix {
        self.basis.ad_mul(a) * &self.basis
    }

    /// Distance of `x` from the subspace.
    pub fn distance(&self, x: &ComplexMatrix) -> f64 {
        let coeff = self.basis.ad_mul(x);
        (x - &self.basis * coeff).norm()
    }
}

/// Largest subspace of `m` orthogonal to every vector in `k`.
///
/// At matrix scale the compact set is finite, so the net is exact and the
/// result is orthogonal to `k` up to rounding.
pub fn avoidance_subspace(k: &[ComplexMatrix], m: &Subspace, tol: &Tolerances) -> Result<Subspace> {
    let n = m.ambient_dim();
    if let Some(bad) = k.iter().find(|x| x.nrows() != n || x.ncols() != 1) {
        return Err(OpcError::DimensionMismatch(format!(
            "vector {}x{} in ambient dimension {n}",
            bad.nrows(),
            bad.ncols()
        )));
    }
    if k.is_empty() {
        return Ok(m.clone());
    }
    let dim = m.dim();
    // coordinates (in the basis of m) of the projections of k
    let proj = {
        let refs: Vec<&ComplexMatrix> = k.iter().collect();
        m.basis.adjoint() * hstack(&refs)
    };
    let scale = k.iter().map(|x| x.norm()).fold(0.0_f64, f64::max).max(f64::MIN_POSITIVE);
    let mut blocked = Vec::new();
    for j in 0..proj.ncols() {
        let col = column(&proj, j);
        if col.norm() > tol.rank * scale {
            blocked.push(col);
        }
    }
    let blocked = if blocked.is_empty() {
        ComplexMatrix::zeros(dim, 0)
    } else {
        let refs: Vec<&ComplexMatrix> = blocked.iter().collect();
        orthonormalize(&hstack(&refs), tol.rank)
    };
    let free = complement(&blocked, dim);
    if free.ncols() == 0 {
        return Err(OpcError::Exhausted {
            dim,
            constraints: k.len(),
        });
    }
    Ok(Subspace {
        basis: orthonormalize(&(&m.basis * free), tol.rank),
    })
}

/// Orthonormal basis of the orthogonal complement of `q` (orthonormal
/// columns) in `C^n`.
pub fn complement(q: &ComplexMatrix, n: usize) -> ComplexMatrix {
    let r = q.ncols();
    let mut cols: Vec<ComplexMatrix> = (0..r).map(|j| column(q, j)).collect();
    let mut out = Vec::with_capacity(n - r.min(n));
    for i in 0..n {
        if cols.len() == n {
            break;
        }
        let mut v = ComplexMatrix::zeros(n, 1);
        v[(i, 0)] = c(1.0, 0.0);
        for _ in 0..2 {
            for b in &cols {
                let p = inner(b, &v);
                v -= b * p;
            }
        }
        let norm = v.norm();
        if norm > 1e-8 {
            let v = v / c(norm, 0.0);
            cols.push(v.clone());
            out.push(v);
        }
    }
    if out.is_empty() {
        return ComplexMatrix::zeros(n, 0);
    }
    let refs: Vec<&ComplexMatrix> = out.iter().collect();
    hstack(&refs)
}

/// Matrix exponential of a skew-Hermitian matrix via its Hermitian
/// eigendecomposition: `exp(K) = Q diag(e^{iλ}) Q*` for `K = iH`.
pub fn expm_skew(k: &ComplexMatrix, tol: &Tolerances) -> Result<ComplexMatrix> {
    let n = ensure_square(k)?;
    let h = k * c(0.0, -1.0);
    let (values, q) = hermitian_eig(&h, tol)?;
    let phases: Vec<C64> = values.iter().map(|&v| C64::from_polar(1.0, v)).collect();
    let scaled = ComplexMatrix::from_fn(n, n, |r, j| q[(r, j)] * phases[j]);
    Ok(scaled * q.adjoint())
}

// ---------------------------------------------------------------------------
// random test objects

pub fn random_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> ComplexMatrix {
    ComplexMatrix::from_fn(rows, cols, |_, _| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
}

pub fn random_hermitian<R: Rng + ?Sized>(rng: &mut R, n: usize) -> ComplexMatrix {
    re_part(&random_matrix(rng, n, n))
}

pub fn random_unit_vector<R: Rng + ?Sized>(rng: &mut R, n: usize) -> ComplexMatrix {
    let v = random_matrix(rng, n, 1);
    let norm = v.norm();
    v / c(norm, 0.0)
}

pub fn random_unitary<R: Rng + ?Sized>(rng: &mut R, n: usize) -> ComplexMatrix {
    loop {
        let q = orthonormalize(&random_matrix(rng, n, n), 1e-6);
        if q.ncols() == n {
            return q;
        }
    }
}

// ---------------------------------------------------------------------------
// "cmx" text format: `rows cols` header, then one `re im` line per entry in
// row-major order.

pub fn write_cmx<W: Write>(mut out: W, a: &ComplexMatrix) -> std::io::Result<()> {
    writeln!(out, "{} {}", a.nrows(), a.ncols())?;
    for r in 0..a.nrows() {
        for k in 0..a.ncols() {
            let z = a[(r, k)];
            writeln!(out, "{:.17e} {:.17e}", z.re, z.im)?;
        }
    }
    Ok(())
}

pub fn to_cmx_string(a: &ComplexMatrix) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{} {}", a.nrows(), a.ncols());
    for r in 0..a.nrows() {
        for k in 0..a.ncols() {
            let z = a[(r, k)];
            let _ = writeln!(s, "{:.17e} {:.17e}", z.re, z.im);
        }
    }
    s
}

pub fn read_cmx<R: BufRead>(input: R) -> Result<ComplexMatrix> {
    let mut lines = input
        .lines()
        .map(|l| l.map_err(|e| OpcError::Parse(e.to_string())))
        .filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()));
    let header = lines.next().ok_or_else(|| OpcError::Parse("empty cmx input".into()))??;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>().map_err(|e| OpcError::Parse(format!("header: {e}"))))
        .collect::<Result<_>>()?;
    let [rows, cols] = dims[..] else {
        return Err(OpcError::Parse(format!("bad header `{header}`")));
    };
    let mut entries = Vec::with_capacity(rows * cols);
    for i in 0..rows * cols {
        let line = lines
            .next()
            .ok_or_else(|| OpcError::Parse(format!("missing entry {i}")))??;
        let parts: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| OpcError::Parse(format!("entry {i}: {e}"))))
            .collect::<Result<_>>()?;
        let [re, im] = parts[..] else {
            return Err(OpcError::Parse(format!("entry {i}: expected `re im`")));
        };
        entries.push(c(re, im));
    }
    if lines.next().is_some() {
        return Err(OpcError::Parse("trailing data after matrix".into()));
    }
    checked_matrix(rows, cols, &entries)
}

pub fn parse_cmx(s: &str) -> Result<ComplexMatrix> {
    read_cmx(std::io::Cursor::new(s))
}

/// Serde adapter storing a matrix as its cmx text.
pub mod cmx_serde {
    use super::{parse_cmx, to_cmx_string, ComplexMatrix};
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(a: &ComplexMatrix, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&to_cmx_string(a))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<ComplexMatrix, D::Error> {
        let text = String::deserialize(d)?;
        parse_cmx(&text).map_err(D::Error::custom)
    }
}

/// Serde adapter for a list of cmx payloads.
pub mod cmx_vec_serde {
    use super::{parse_cmx, to_cmx_string, ComplexMatrix};
    use serde::{de::Error, ser::SerializeSeq, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[ComplexMatrix], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(v.len()))?;
        for a in v {
            seq.serialize_element(&to_cmx_string(a))?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<ComplexMatrix>, D::Error> {
        let texts = Vec::<String>::deserialize(d)?;
        texts.iter().map(|t| parse_cmx(t).map_err(D::Error::custom)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tol() -> Tolerances {
        Tolerances::default()
    }

    #[test]
    fn eig_diagonal_input_sorts() {
        let (vals, q) = hermitian_eig(&real_diag(&[3.0, 1.0, 2.0]), &tol()).unwrap();
        assert_eq!(vals, vec![1.0, 2.0, 3.0]);
        // permutation: column k has a single unit entry
        for k in 0..3 {
            let big = (0..3).filter(|&r| q[(r, k)].norm() > 0.5).count();
            assert_eq!(big, 1);
        }
        assert!(q[(1, 0)].norm() > 0.99 && q[(2, 1)].norm() > 0.99 && q[(0, 2)].norm() > 0.99);
    }

    #[test]
    fn eig_swap_matrix() {
        let h = checked_matrix(2, 2, &[c(0., 0.), c(1., 0.), c(1., 0.), c(0., 0.)]).unwrap();
        let (vals, _) = hermitian_eig(&h, &tol()).unwrap();
        assert!((vals[0] + 1.0).abs() < 1e-15 && (vals[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn eig_random_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = random_hermitian(&mut rng, 50);
        let (vals, q) = hermitian_eig(&h, &tol()).unwrap();
        let rec = &q * real_diag(&vals) * q.adjoint();
        assert!(op_norm(&(rec - &h)) <= 1e-11 * op_norm(&h));
        assert!(isometry_defect(&q) < 1e-12);
    }

    #[test]
    fn eig_rejects_bad_input() {
        let rect = ComplexMatrix::zeros(2, 3);
        assert!(matches!(hermitian_eig(&rect, &tol()), Err(OpcError::NotSquare { .. })));
        let skew = checked_matrix(2, 2, &[c(0., 0.), c(1., 0.), c(0., 0.), c(0., 0.)]).unwrap();
        assert!(matches!(hermitian_eig(&skew, &tol()), Err(OpcError::NotHermitian(_))));
    }

    #[test]
    fn sqrt_examples() {
        let i3 = ComplexMatrix::identity(3, 3);
        assert!(op_norm(&(psd_sqrt(&i3, &tol()).unwrap() - &i3)) < 1e-15);
        let r = psd_sqrt(&real_diag(&[4.0, 9.0]), &tol()).unwrap();
        assert!(op_norm(&(r - real_diag(&[2.0, 3.0]))) < 1e-14);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = random_matrix(&mut rng, 6, 6);
        let p = b.ad_mul(&b);
        let s = psd_sqrt(&p, &tol()).unwrap();
        assert!(op_norm(&(&s * &s - &p)) <= 1e-11 * op_norm(&p));
        assert!(matches!(psd_sqrt(&real_diag(&[1.0, -0.5]), &tol()), Err(OpcError::NotPsd(_))));
    }

    #[test]
    fn defect_examples() {
        let d0 = ComplexMatrix::zeros(2, 2);
        assert!(op_norm(&(defect(&d0, &tol()).unwrap() - ComplexMatrix::identity(2, 2))) < 1e-15);
        let d = real_diag(&[0.6]);
        assert!((defect(&d, &tol()).unwrap()[(0, 0)].re - 0.8).abs() < 1e-15);
        let d = real_diag(&[0.5, 0.0]);
        let expect = real_diag(&[0.75_f64.sqrt(), 1.0]);
        assert!(op_norm(&(defect(&d, &tol()).unwrap() - expect)) < 1e-15);
        assert!(matches!(defect(&real_diag(&[1.5]), &tol()), Err(OpcError::NormExceedsOne(_))));
    }

    #[test]
    fn op_norm_examples() {
        assert!((op_norm(&ComplexMatrix::identity(4, 4)) - 1.0).abs() < 1e-15);
        assert!((op_norm(&real_diag(&[2.0, -3.0])) - 3.0).abs() < 1e-14);
    }

    #[test]
    fn op_norm_matches_power_iteration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_matrix(&mut rng, 12, 9);
        // power iteration on A*A, independent of the eigensolver
        let g = a.ad_mul(&a);
        let mut x = random_unit_vector(&mut rng, 9);
        let mut sigma2 = 0.0;
        for _ in 0..5000 {
            let y = &g * &x;
            sigma2 = y.norm();
            x = y / c(sigma2, 0.0);
        }
        assert!((op_norm(&a) - sigma2.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn avoidance_examples() {
        let t = tol();
        let e1 = Subspace::coordinates(3, &[0]).basis().clone();
        let l = avoidance_subspace(&[e1], &Subspace::ambient(3), &t).unwrap();
        assert_eq!(l.dim(), 2);
        let p = l.projector();
        let expect = Subspace::coordinates(3, &[1, 2]).projector();
        assert!(op_norm(&(p - expect)) < 1e-14);

        let m = Subspace::ambient(4);
        assert_eq!(avoidance_subspace(&[], &m, &t).unwrap(), m);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ks: Vec<_> = (0..3).map(|_| random_matrix(&mut rng, 10, 1)).collect();
        let l = avoidance_subspace(&ks, &Subspace::ambient(10), &t).unwrap();
        assert_eq!(l.dim(), 7);
        for x in &ks {
            for j in 0..l.dim() {
                assert!(inner(x, &column(l.basis(), j)).norm() <= 1e-12);
            }
        }
        let full: Vec<_> = (0..2).map(|i| Subspace::coordinates(2, &[i]).basis().clone()).collect();
        assert!(matches!(
            avoidance_subspace(&full, &Subspace::ambient(2), &t),
            Err(OpcError::Exhausted { .. })
        ));
    }

    #[test]
    fn cmx_roundtrip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_matrix(&mut rng, 3, 4);
        let s = to_cmx_string(&a);
        assert!(s.starts_with("3 4\n"));
        assert_eq!(parse_cmx(&s).unwrap(), a);
    }

    #[test]
    fn cmx_rejects_garbage() {
        assert!(parse_cmx("").is_err());
        assert!(parse_cmx("1 1\n1.0\n").is_err());
        assert!(parse_cmx("1 1\nNaN 0\n").is_err());
        assert!(parse_cmx("1 1\n1 0\n2 0\n").is_err());
    }

    #[test]
    fn expm_of_skew_is_unitary() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = random_hermitian(&mut rng, 5);
        let k = h * c(0.0, 1.0);
        let u = expm_skew(&k, &tol()).unwrap();
        assert!(isometry_defect(&u) < 1e-13);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn quadratic_form_bounded_by_norm(seed in any::<u64>(), n in 2usize..7) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let h = random_hermitian(&mut rng, n);
                let norm = op_norm(&h);
                for _ in 0..20 {
                    let x = random_unit_vector(&mut rng, n);
                    prop_assert!(inner(&x, &(&h * &x)).norm() <= norm + 1e-12);
                }
            }

            #[test]
            fn sqrt_scales_with_root(seed in any::<u64>(), scale in 0.01f64..100.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let b = random_matrix(&mut rng, 4, 4);
                let p = b.ad_mul(&b);
                let t = Tolerances::default();
                let lhs = psd_sqrt(&(&p * c(scale, 0.0)), &t).unwrap();
                let rhs = psd_sqrt(&p, &t).unwrap() * c(scale.sqrt(), 0.0);
                prop_assert!(op_norm(&(lhs - rhs)) <= 1e-10 * scale.sqrt() * op_norm(&p).sqrt().max(1.0));
            }

            #[test]
            fn avoidance_is_orthonormal(seed in any::<u64>(), n in 3usize..9, k in 0usize..3) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let ks: Vec<_> = (0..k).map(|_| random_matrix(&mut rng, n, 1)).collect();
                let l = avoidance_subspace(&ks, &Subspace::ambient(n), &Tolerances::default()).unwrap();
                prop_assert!(isometry_defect(l.basis()) <= 1e-10);
                prop_assert!(l.dim() >= n - k);
            }
        }
    }
}
