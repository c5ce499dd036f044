//! Numerical ranges: support sweeps, membership, and the constrained inverse
//! problem "find a unit vector `x` in a subspace with `x*Ax = λ`".

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{OpcError, Result};
use crate::kernel::{self, c, inner, ComplexMatrix, Subspace, C64};
use crate::tol::Tolerances;

/// Convex region known to sit inside the essential numerical range of an
/// instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegionKind {
    Disk { center: C64, radius: f64 },
    /// Counterclockwise convex polygon.
    Polygon { vertices: Vec<C64> },
    /// Real interval, for self-adjoint instances only.
    Interval { a: f64, b: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuaranteeRegion {
    #[serde(flatten)]
    pub kind: RegionKind,
    #[serde(default)]
    pub margin: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionPoint {
    pub value: C64,
    pub dist_to_boundary: f64,
}

/// Signed distance from `z` to the line through `p → q`; positive on the left.
fn signed_edge_distance(p: C64, q: C64, z: C64) -> f64 {
    let e = q - p;
    let w = z - p;
    (e.re * w.im - e.im * w.re) / e.norm()
}

fn segment_distance(p: C64, q: C64, z: C64) -> f64 {
    let e = q - p;
    let len2 = e.norm_sqr();
    if len2 == 0.0 {
        return (z - p).norm();
    }
    let s = ((z - p) * e.conj()).re / len2;
    (z - (p + e * s.clamp(0.0, 1.0))).norm()
}

/// Signed distance from `z` to the boundary of a ccw convex polygon;
/// positive inside.
pub fn polygon_signed_distance(vertices: &[C64], z: C64) -> f64 {
    let n = vertices.len();
    let inside = (0..n).all(|i| signed_edge_distance(vertices[i], vertices[(i + 1) % n], z) >= 0.0);
    let edge = (0..n)
        .map(|i| segment_distance(vertices[i], vertices[(i + 1) % n], z))
        .fold(f64::INFINITY, f64::min);
    if inside {
        edge
    } else {
        -edge
    }
}

impl GuaranteeRegion {
    pub fn disk(center: C64, radius: f64) -> Self {
        Self {
            kind: RegionKind::Disk { center, radius },
            margin: 0.0,
        }
    }

    pub fn polygon(vertices: Vec<C64>) -> Self {
        Self {
            kind: RegionKind::Polygon { vertices },
            margin: 0.0,
        }
    }

    pub fn interval(a: f64, b: f64) -> Self {
        Self {
            kind: RegionKind::Interval { a, b },
            margin: 0.0,
        }
    }

    pub fn with_margin(mut self, margin: f64) -> Self {
        self.margin = margin;
        self
    }

    pub fn is_interval(&self) -> bool {
        matches!(self.kind, RegionKind::Interval { .. })
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(OpcError::InvalidRegion(format!("margin {} must be >= 0", self.margin)));
        }
        match &self.kind {
            RegionKind::Disk { center, radius } => {
                if !(radius.is_finite() && *radius > 0.0 && center.re.is_finite() && center.im.is_finite()) {
                    return Err(OpcError::InvalidRegion(format!("disk radius {radius} must be > 0")));
                }
            }
            RegionKind::Polygon { vertices } => {
                let n = vertices.len();
                if n < 3 {
                    return Err(OpcError::InvalidRegion("polygon needs at least 3 vertices".into()));
                }
                for i in 0..n {
                    let (p, q, r) = (vertices[i], vertices[(i + 1) % n], vertices[(i + 2) % n]);
                    if (q - p).norm() == 0.0 || signed_edge_distance(p, q, r) <= 0.0 {
                        return Err(OpcError::InvalidRegion(
                            "polygon vertices must be in counterclockwise strictly convex position".into(),
                        ));
                    }
                }
            }
            RegionKind::Interval { a, b } => {
                if !(a.is_finite() && b.is_finite() && a < b) {
                    return Err(OpcError::InvalidRegion(format!("interval [{a}, {b}] needs a < b")));
                }
            }
        }
        Ok(())
    }

    /// Signed distance to the boundary, positive inside. Intervals treat any
    /// nonzero imaginary part as outside.
    pub fn signed_distance(&self, z: C64) -> f64 {
        match &self.kind {
            RegionKind::Disk { center, radius } => radius - (z - center).norm(),
            RegionKind::Polygon { vertices } => polygon_signed_distance(vertices, z),
            RegionKind::Interval { a, b } => {
                let d = (z.re - a).min(b - z.re);
                if z.im.abs() > 0.0 {
                    d.min(0.0) - z.im.abs()
                } else {
                    d
                }
            }
        }
    }

    pub fn contains(&self, z: C64) -> bool {
        self.signed_distance(z) >= 0.0
    }

    /// Points on the boundary, for plotting.
    pub fn boundary_points(&self, n: usize) -> Vec<C64> {
        match &self.kind {
            RegionKind::Disk { center, radius } => (0..n)
                .map(|k| center + C64::from_polar(*radius, 2.0 * PI * k as f64 / n as f64))
                .collect(),
            RegionKind::Polygon { vertices } => vertices.clone(),
            RegionKind::Interval { a, b } => vec![c(*a, 0.0), c(*b, 0.0)],
        }
    }

    /// Smallest disk about the origin containing the region.
    pub fn outer_radius(&self) -> f64 {
        match &self.kind {
            RegionKind::Disk { center, radius } => center.norm() + radius,
            RegionKind::Polygon { vertices } => vertices.iter().map(|v| v.norm()).fold(0.0, f64::max),
            RegionKind::Interval { a, b } => a.abs().max(b.abs()),
        }
    }
}

/// Convex hull (counterclockwise, collinear points dropped) by the monotone
/// chain.
pub fn convex_hull(points: &[C64]) -> Vec<C64> {
    let mut pts: Vec<C64> = points.to_vec();
    pts.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: C64, a: C64, b: C64| (a.re - o.re) * (b.im - o.im) - (a.im - o.im) * (b.re - o.re);
    let mut hull: Vec<C64> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &C64>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Distance from `λ` to the boundary of `region`.
pub fn region_distance(region: &GuaranteeRegion, lambda: C64) -> Result<RegionPoint> {
    let d = region.signed_distance(lambda);
    if d < 0.0 {
        return Err(OpcError::NotInside(lambda));
    }
    Ok(RegionPoint {
        value: lambda,
        dist_to_boundary: d,
    })
}

/// Support point and unit vector for direction `angle`: the top eigenvector
/// of `Re(e^{-i angle} A)`.
pub fn support(a: &ComplexMatrix, angle: f64, tol: &Tolerances) -> Result<(C64, ComplexMatrix)> {
    let rotated = a * C64::from_polar(1.0, -angle);
    let (_, q) = kernel::hermitian_eig(&kernel::re_part(&rotated), tol)?;
    let x = kernel::column(&q, q.ncols() - 1);
    Ok((inner(&x, &(a * &x)), x))
}

fn sweep(a: &ComplexMatrix, n_angles: usize, tol: &Tolerances) -> Result<Vec<(C64, ComplexMatrix)>> {
    (0..n_angles)
        .map(|k| support(a, 2.0 * PI * k as f64 / n_angles as f64, tol))
        .collect()
}

/// `n_angles` support points of the numerical range boundary, ordered by
/// support direction (counterclockwise).
pub fn nr_boundary(a: &ComplexMatrix, n_angles: usize, tol: &Tolerances) -> Result<Vec<C64>> {
    kernel::ensure_square(a)?;
    if n_angles < 3 {
        return Err(OpcError::Invalid(format!("n_angles = {n_angles} < 3")));
    }
    Ok(sweep(a, n_angles, tol)?.into_iter().map(|(p, _)| p).collect())
}

/// Convex polygon through support points, with coincident neighbors merged.
#[derive(Debug, Clone)]
struct SampledHull {
    /// Indices into the sweep, ccw.
    idx: Vec<usize>,
    points: Vec<C64>,
    scale: f64,
}

impl SampledHull {
    fn new(points: &[C64]) -> Self {
        let scale = points.iter().map(|p| p.norm()).fold(1.0_f64, f64::max);
        let merge = 1e-13 * scale;
        let mut idx: Vec<usize> = Vec::new();
        for (i, p) in points.iter().enumerate() {
            if idx.last().is_none_or(|&j| (points[j] - p).norm() > merge) {
                idx.push(i);
            }
        }
        while idx.len() > 1 && (points[idx[0]] - points[*idx.last().unwrap()]).norm() <= merge {
            idx.pop();
        }
        Self {
            points: idx.iter().map(|&i| points[i]).collect(),
            idx,
            scale,
        }
    }

    /// Hull is (numerically) a point or segment.
    fn is_flat(&self) -> bool {
        let n = self.points.len();
        if n < 3 {
            return true;
        }
        let p0 = self.points[0];
        let far = self
            .points
            .iter()
            .max_by(|a, b| (*a - p0).norm().total_cmp(&(*b - p0).norm()))
            .copied()
            .unwrap();
        if (far - p0).norm() <= 1e-13 * self.scale {
            return true;
        }
        self.points
            .iter()
            .all(|&z| signed_edge_distance(p0, far, z).abs() <= 1e-11 * self.scale)
    }

    /// Signed distance to the hull boundary; flat hulls report minus the
    /// distance to the segment.
    fn signed_distance(&self, z: C64) -> f64 {
        if self.is_flat() {
            let (lo, hi) = self.extremes();
            -segment_distance(self.points[lo], self.points[hi], z)
        } else {
            polygon_signed_distance(&self.points, z)
        }
    }

    /// Positions (into `points`) of the two points farthest apart.
    fn extremes(&self) -> (usize, usize) {
        let n = self.points.len();
        let mut best = (0, 0, -1.0);
        for i in 0..n {
            for j in i + 1..n {
                let d = (self.points[i] - self.points[j]).norm();
                if d > best.2 {
                    best = (i, j, d);
                }
            }
        }
        (best.0, best.1)
    }
}

/// Whether `λ` lies in the sampled numerical range hull, shrunk by the
/// region tolerance.
pub fn nr_contains(a: &ComplexMatrix, lambda: C64, tol: &Tolerances) -> Result<bool> {
    let points = nr_boundary(a, tol.n_angles.max(3), tol)?;
    let hull = SampledHull::new(&points);
    let slack = tol.region * hull.scale;
    let d = hull.signed_distance(lambda);
    Ok(if hull.is_flat() { d >= -slack } else { d >= slack })
}

/// Unit vector `z ∈ span{x, y}` with `z*Az = λ`, where `λ` lies on the
/// segment between `α = x*Ax` and `β = y*Ay`.
///
/// After the affine normalization `α ↦ 0`, `β ↦ 1` the cross term becomes
/// real for a suitable phase `φ`, and `z = x + τ e^{iφ} y` reduces to a
/// quadratic in `τ` with exactly one positive root.
fn segment_solve(a: &ComplexMatrix, x: &ComplexMatrix, y: &ComplexMatrix, lambda: C64) -> ComplexMatrix {
    let alpha = inner(x, &(a * x));
    let beta = inner(y, &(a * y));
    let span = beta - alpha;
    if span.norm() <= 1e-15 * (1.0 + alpha.norm()) {
        return x.clone();
    }
    let mu = (((lambda - alpha) * span.conj()).re / span.norm_sqr()).clamp(0.0, 1.0);
    if mu <= 0.0 {
        return x.clone();
    }
    if mu >= 1.0 {
        return y.clone();
    }
    // cross terms of A' = (A - α)/(β - α) = H + iK
    let ay = a * y;
    let ax = a * x;
    let scale = span.inv();
    let xay = (inner(x, &ay) - alpha * inner(x, y)) * scale;
    let yax = (inner(y, &ax) - alpha * inner(y, x)) * scale;
    let xhy = (xay + yax.conj()) * 0.5;
    let xky = (xay - yax.conj()) * c(0.0, -0.5);
    // e^{iφ} x*Ky real-part zero
    let phase = if xky.norm() > 0.0 {
        C64::from_polar(1.0, PI / 2.0 - xky.arg())
    } else {
        c(1.0, 0.0)
    };
    let h = (phase * xhy).re;
    let g = (phase * inner(x, y)).re;
    let qa = 1.0 - mu;
    let qb = 2.0 * (h - mu * g);
    let qc = -mu;
    let disc = (qb * qb - 4.0 * qa * qc).max(0.0).sqrt();
    // stable positive root
    let tau = if qb >= 0.0 {
        2.0 * mu / (qb + disc)
    } else {
        (disc - qb) / (2.0 * qa)
    };
    let z = x + y * (phase * tau);
    let norm = z.norm();
    z / c(norm, 0.0)
}

/// Support sweep refined by doubling until the sampled hull contains `λ`.
fn covering_sweep(
    a: &ComplexMatrix,
    lambda: C64,
    tol: &Tolerances,
) -> Result<(Vec<(C64, ComplexMatrix)>, SampledHull)> {
    let max_angles = tol.n_angles.max(8);
    let mut n = 8;
    loop {
        let sw = sweep(a, n, tol)?;
        let points: Vec<C64> = sw.iter().map(|(p, _)| *p).collect();
        let hull = SampledHull::new(&points);
        let d = hull.signed_distance(lambda);
        let slack = tol.region * hull.scale;
        let inside = if hull.is_flat() { d >= -slack } else { d >= 0.0 };
        if inside {
            return Ok((sw, hull));
        }
        if n >= max_angles {
            return Err(OpcError::NotInRange(lambda));
        }
        n = (2 * n).min(max_angles);
    }
}

/// Unit vector `x` with `x*Ax = λ`.
pub fn realize(a: &ComplexMatrix, lambda: C64, tol: &Tolerances) -> Result<ComplexMatrix> {
    kernel::ensure_square(a)?;
    let (sw, hull) = covering_sweep(a, lambda, tol)?;
    let vec_at = |k: usize| &sw[hull.idx[k]].1;
    let x = if hull.is_flat() {
        let (lo, hi) = hull.extremes();
        segment_solve(a, vec_at(lo), vec_at(hi), lambda)
    } else {
        let p = &hull.points;
        let p0 = p[0];
        // fan triangle (p0, p_i, p_{i+1}) containing λ
        let n = p.len();
        let mut found = None;
        for i in 1..n - 1 {
            let (u, v) = (p[i], p[i + 1]);
            let s1 = signed_edge_distance(p0, u, lambda);
            let s2 = signed_edge_distance(u, v, lambda);
            let s3 = signed_edge_distance(v, p0, lambda);
            let eps = -1e-14 * hull.scale;
            if s1 >= eps && s2 >= eps && s3 >= eps {
                found = Some(i);
                break;
            }
        }
        let i = found.ok_or(OpcError::Degenerate2x2Fallback(lambda))?;
        let (u, v) = (p[i], p[i + 1]);
        let dir = lambda - p0;
        let q = if dir.norm() <= 1e-15 * hull.scale {
            u
        } else {
            // ray p0 + s·dir meets segment u + r(v - u)
            let e = v - u;
            let den = dir.re * e.im - dir.im * e.re;
            if den.abs() <= f64::MIN_POSITIVE {
                u
            } else {
                let w = u - p0;
                let r = (dir.im * w.re - dir.re * w.im) / den;
                u + e * r.clamp(0.0, 1.0)
            }
        };
        let zq = segment_solve(a, vec_at(i), vec_at(i + 1), q);
        segment_solve(a, vec_at(0), &zq, lambda)
    };
    let residual = (inner(&x, &(a * &x)) - lambda).norm();
    if residual > tol.realize * hull.scale.max(1.0) {
        return Err(OpcError::Degenerate2x2Fallback(lambda));
    }
    Ok(x)
}

/// Unit vector `x ∈ L` with `x*Ax = λ`, solved on the compression to `L`.
pub fn realize_constrained(a: &ComplexMatrix, lambda: C64, l: &Subspace, tol: &Tolerances) -> Result<ComplexMatrix> {
    if l.dim() == 0 {
        return Err(OpcError::NotInCompressedRange(lambda));
    }
    let b = l.compress(a);
    let y = realize(&b, lambda, tol).map_err(|e| match e {
        OpcError::NotInRange(z) | OpcError::Degenerate2x2Fallback(z) => OpcError::NotInCompressedRange(z),
        other => other,
    })?;
    Ok(l.basis() * y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{random_matrix, random_unit_vector, real_diag};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tol() -> Tolerances {
        Tolerances::default()
    }

    fn nilpotent() -> ComplexMatrix {
        kernel::checked_matrix(2, 2, &[c(0., 0.), c(2., 0.), c(0., 0.), c(0., 0.)]).unwrap()
    }

    fn quad(a: &ComplexMatrix, x: &ComplexMatrix) -> C64 {
        inner(x, &(a * x))
    }

    #[test]
    fn boundary_of_hermitian_is_segment() {
        let pts = nr_boundary(&real_diag(&[0.0, 1.0]), 16, &tol()).unwrap();
        for p in &pts {
            assert!(p.im.abs() < 1e-15);
            assert!(p.re.abs() < 1e-14 || (p.re - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn boundary_of_normal_hits_spectrum() {
        let a = kernel::diag(&[c(1., 0.), c(0., 1.), c(-1., 0.), c(0., -1.)]);
        let pts = nr_boundary(&a, 8, &tol()).unwrap();
        for v in [c(1., 0.), c(0., 1.), c(-1., 0.), c(0., -1.)] {
            assert!(pts.iter().any(|p| (p - v).norm() < 1e-12));
        }
    }

    #[test]
    fn boundary_of_nilpotent_is_unit_circle() {
        let pts = nr_boundary(&nilpotent(), 720, &tol()).unwrap();
        let dev = pts.iter().map(|p| (p.norm() - 1.0).abs()).fold(0.0, f64::max);
        assert!(dev <= 1e-8, "radial deviation {dev}");
        // independent oracle: random unit vectors never leave the disk and
        // approach the circle
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut max_r: f64 = 0.0;
        for _ in 0..20000 {
            let x = random_unit_vector(&mut rng, 2);
            let r = quad(&nilpotent(), &x).norm();
            assert!(r <= 1.0 + 1e-12);
            max_r = max_r.max(r);
        }
        assert!(max_r > 0.98);
    }

    #[test]
    fn contains_examples() {
        let t = tol();
        assert!(nr_contains(&real_diag(&[0.0, 1.0]), c(0.5, 0.0), &t).unwrap());
        assert!(!nr_contains(&real_diag(&[0.0, 1.0]), c(2.0, 0.0), &t).unwrap());
        assert!(nr_contains(&nilpotent(), c(0.99, 0.0), &t).unwrap());
        assert!(!nr_contains(&nilpotent(), c(1.01, 0.0), &t).unwrap());
    }

    #[test]
    fn realize_examples() {
        let t = tol();
        let h = real_diag(&[0.0, 1.0]);
        let x = realize(&h, c(0.5, 0.0), &t).unwrap();
        assert!((x[(0, 0)].norm() - 0.5_f64.sqrt()).abs() < 1e-12);
        assert!((x[(1, 0)].norm() - 0.5_f64.sqrt()).abs() < 1e-12);
        let x = realize(&h, c(0.0, 0.0), &t).unwrap();
        assert!((x[(0, 0)].norm() - 1.0).abs() < 1e-12);
        let lam = c(0.3, 0.4);
        let x = realize(&nilpotent(), lam, &t).unwrap();
        assert!((quad(&nilpotent(), &x) - lam).norm() <= 1e-10);
        assert!((x.norm() - 1.0).abs() < 1e-14);
        assert!(matches!(realize(&h, c(2.0, 0.0), &t), Err(OpcError::NotInRange(_))));
    }

    #[test]
    fn realize_constrained_examples() {
        let t = tol();
        let a = real_diag(&[0.0, 0.0, 1.0, 1.0]);
        let l = Subspace::coordinates(4, &[1, 3]);
        let x = realize_constrained(&a, c(0.5, 0.0), &l, &t).unwrap();
        assert!(x[(0, 0)].norm() < 1e-15 && x[(2, 0)].norm() < 1e-15);
        assert!((x[(1, 0)].norm() - 0.5_f64.sqrt()).abs() < 1e-12);
        // wrong subspace: both coordinates carry eigenvalue 0
        let l = Subspace::coordinates(4, &[0, 1]);
        assert!(matches!(
            realize_constrained(&a, c(0.5, 0.0), &l, &t),
            Err(OpcError::NotInCompressedRange(_))
        ));
    }

    #[test]
    fn region_distance_examples() {
        let unit = GuaranteeRegion::disk(c(0., 0.), 1.0);
        assert_eq!(region_distance(&unit, c(0., 0.)).unwrap().dist_to_boundary, 1.0);
        assert!((region_distance(&unit, c(0.6, 0.)).unwrap().dist_to_boundary - 0.4).abs() < 1e-15);
        assert!(matches!(region_distance(&unit, c(2., 0.)), Err(OpcError::NotInside(_))));

        let sq = GuaranteeRegion::polygon(vec![c(0., 0.), c(1., 0.), c(1., 1.), c(0., 1.)]);
        let z = c(0.1, 0.2);
        // brute force over edges
        let brute = [z.im, 1.0 - z.re, 1.0 - z.im, z.re].into_iter().fold(f64::INFINITY, f64::min);
        assert!((region_distance(&sq, z).unwrap().dist_to_boundary - brute).abs() < 1e-15);

        let iv = GuaranteeRegion::interval(0.0, 1.0);
        assert!((region_distance(&iv, c(0.3, 0.)).unwrap().dist_to_boundary - 0.3).abs() < 1e-15);
        assert!(region_distance(&iv, c(0.3, 0.1)).is_err());
    }

    #[test]
    fn hull_drops_interior_points() {
        let pts = [c(0., 0.), c(1., 0.), c(0.5, 0.2), c(1., 1.), c(0., 1.), c(0.5, 0.)];
        let h = convex_hull(&pts);
        assert_eq!(h.len(), 4);
        assert!(GuaranteeRegion::polygon(h).validate().is_ok());
    }

    #[test]
    fn region_validation() {
        assert!(GuaranteeRegion::disk(c(0., 0.), -1.0).validate().is_err());
        assert!(GuaranteeRegion::interval(1.0, 0.0).validate().is_err());
        let cw = GuaranteeRegion::polygon(vec![c(0., 0.), c(0., 1.), c(1., 1.), c(1., 0.)]);
        assert!(cw.validate().is_err());
        let ccw = GuaranteeRegion::polygon(vec![c(0., 0.), c(1., 0.), c(1., 1.), c(0., 1.)]);
        assert!(ccw.validate().is_ok());
    }

    #[test]
    fn region_serializes_with_kind_tag() {
        let r = GuaranteeRegion::disk(c(0., 0.), 0.7).with_margin(0.1);
        let s = serde_json::to_string(&r).unwrap();
        assert!(s.contains("\"kind\":\"disk\""));
        let back: GuaranteeRegion = serde_json::from_str(&s).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn realize_residuals_on_random_pairs() {
        let t = tol();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for trial in 0..1000 {
            let n = 2 + trial % 5;
            let a = random_matrix(&mut rng, n, n);
            // λ from a random convex combination of quadratic-form values,
            // hence inside W(A)
            let pts: Vec<C64> = (0..3).map(|_| quad(&a, &random_unit_vector(&mut rng, n))).collect();
            let w: Vec<f64> = (0..3).map(|_| rng.gen_range(0.05..1.0)).collect();
            let s: f64 = w.iter().sum();
            let lam = pts.iter().zip(&w).map(|(p, wi)| p * (wi / s)).sum::<C64>();
            let x = realize(&a, lam, &t).unwrap();
            assert!((quad(&a, &x) - lam).norm() <= t.realize, "trial {trial}");
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};

        fn hull_distance(points: &[C64], z: C64) -> f64 {
            SampledHull::new(points).signed_distance(z)
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn hull_monotone_in_angles(seed in any::<u64>(), n in 8usize..40) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = random_matrix(&mut rng, 4, 4);
                let t = Tolerances::default();
                let coarse = nr_boundary(&a, n, &t).unwrap();
                let fine = nr_boundary(&a, 2 * n, &t).unwrap();
                for p in coarse {
                    prop_assert!(hull_distance(&fine, p) >= -1e-9);
                }
            }

            #[test]
            fn normal_hull_is_spectrum_hull(seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let spec: Vec<C64> = (0..5).map(|_| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
                let u = kernel::random_unitary(&mut rng, 5);
                let a = &u * kernel::diag(&spec) * u.adjoint();
                let t = Tolerances::default();
                let pts = nr_boundary(&a, 720, &t).unwrap();
                // every support point is in conv(spectrum) and every extreme
                // eigenvalue is within reach of a support point
                let spec_hull = convex_hull(&spec);
                for p in &pts {
                    prop_assert!(polygon_signed_distance(&spec_hull, *p) >= -1e-9);
                }
                let hull = SampledHull::new(&pts);
                for s in &spec {
                    prop_assert!(hull.signed_distance(*s) >= -1e-3);
                }
                for v in &spec_hull {
                    prop_assert!(hull.signed_distance(*v) <= 1e-9);
                }
            }

            #[test]
            fn constrained_residual(seed in any::<u64>(), n in 4usize..9) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = random_matrix(&mut rng, n, n);
                let t = Tolerances::default();
                let k: Vec<_> = (0..2).map(|_| random_matrix(&mut rng, n, 1)).collect();
                let l = kernel::avoidance_subspace(&k, &Subspace::ambient(n), &t).unwrap();
                let b = l.compress(&a);
                let m = b.nrows();
                let lam = quad(&b, &random_unit_vector(&mut rng, m));
                let x = realize_constrained(&a, lam, &l, &t).unwrap();
                prop_assert!((quad(&a, &x) - lam).norm() <= t.realize);
                for v in &k {
                    prop_assert!(inner(v, &x).norm() <= 1e-10 * v.norm());
                }
            }
        }
    }
}
