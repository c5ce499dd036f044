//! Smooth unit-vector fields `u_n(ω)` on a planar domain with
//! `⟨A u_n(ω), u_n(ω)⟩ = d(ω)` exactly.
//!
//! The values `d(ω)` are covered by anchor triangles carrying smooth bumps in
//! barycentric coordinates; each field is
//! `u_n = Σ_k √f_k Σ_i √β_k^i(d) v_{n,k}^i` with eigenvectors `v_{n,k}^i` of
//! the instance drawn from distinct slots, so every cross term vanishes.

use serde::{Deserialize, Serialize};

use crate::error::{OpcError, Result};
use crate::instances::ReservoirInstance;
use crate::kernel::{self, c, cmx_vec_serde, ComplexMatrix, C64};
use crate::par;

/// Closed-form complex field `d(ω)` with exact partial derivatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FieldExpr {
    Const { value: C64 },
    /// `Σ coeffs[k] ω^k`.
    Poly { coeffs: Vec<C64> },
    /// `Σ coeffs[k] ω̄^k`.
    ConjPoly { coeffs: Vec<C64> },
    /// `amp · e^{i(kx x + ky y)}`.
    Wave { amp: C64, kx: f64, ky: f64 },
    Sum { terms: Vec<FieldExpr> },
}

fn horner(coeffs: &[C64], z: C64) -> C64 {
    coeffs.iter().rev().fold(c(0.0, 0.0), |acc, &a| acc * z + a)
}

fn horner_deriv(coeffs: &[C64], z: C64) -> C64 {
    coeffs
        .iter()
        .enumerate()
        .skip(1)
        .rev()
        .fold(c(0.0, 0.0), |acc, (k, &a)| acc * z + a * k as f64)
}

impl FieldExpr {
    pub fn linear(slope: C64) -> Self {
        Self::Poly {
            coeffs: vec![c(0.0, 0.0), slope],
        }
    }

    pub fn eval(&self, w: C64) -> C64 {
        match self {
            Self::Const { value } => *value,
            Self::Poly { coeffs } => horner(coeffs, w),
            Self::ConjPoly { coeffs } => horner(coeffs, w.conj()),
            Self::Wave { amp, kx, ky } => amp * C64::from_polar(1.0, kx * w.re + ky * w.im),
            Self::Sum { terms } => terms.iter().map(|f| f.eval(w)).sum(),
        }
    }

    /// `(∂d/∂x, ∂d/∂y)` in the real sense.
    pub fn partials(&self, w: C64) -> (C64, C64) {
        match self {
            Self::Const { .. } => (c(0.0, 0.0), c(0.0, 0.0)),
            Self::Poly { coeffs } => {
                let p = horner_deriv(coeffs, w);
                (p, p * c(0.0, 1.0))
            }
            Self::ConjPoly { coeffs } => {
                let p = horner_deriv(coeffs, w.conj());
                (p, p * c(0.0, -1.0))
            }
            Self::Wave { .. } => {
                let v = self.eval(w);
                let (kx, ky) = match self {
                    Self::Wave { kx, ky, .. } => (*kx, *ky),
                    _ => unreachable!(),
                };
                (v * c(0.0, kx), v * c(0.0, ky))
            }
            Self::Sum { terms } => terms.iter().fold((c(0.0, 0.0), c(0.0, 0.0)), |(x, y), f| {
                let (a, b) = f.partials(w);
                (x + a, y + b)
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlanarDomain {
    Rect { x0: f64, x1: f64, y0: f64, y1: f64 },
    Disk { center: C64, radius: f64 },
}

impl PlanarDomain {
    pub fn unit_disk() -> Self {
        Self::Disk {
            center: c(0.0, 0.0),
            radius: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            Self::Rect { x0, x1, y0, y1 } => x0 < x1 && y0 < y1 && [x0, x1, y0, y1].iter().all(|v| v.is_finite()),
            Self::Disk { center, radius } => *radius > 0.0 && radius.is_finite() && center.norm().is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(OpcError::Invalid(format!("degenerate planar domain {self:?}")))
        }
    }

    pub fn contains(&self, w: C64) -> bool {
        match self {
            Self::Rect { x0, x1, y0, y1 } => w.re > *x0 && w.re < *x1 && w.im > *y0 && w.im < *y1,
            Self::Disk { center, radius } => (w - center).norm() < *radius,
        }
    }

    /// Interior points of an `n × n` lattice over the bounding box.
    pub fn mesh(&self, n: usize) -> Vec<C64> {
        let (x0, x1, y0, y1) = match self {
            Self::Rect { x0, x1, y0, y1 } => (*x0, *x1, *y0, *y1),
            Self::Disk { center, radius } => (center.re - radius, center.re + radius, center.im - radius, center.im + radius),
        };
        let n = n.max(2);
        let mut out = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let w = c(
                    x0 + (x1 - x0) * (i as f64 + 0.5) / n as f64,
                    y0 + (y1 - y0) * (j as f64 + 0.5) / n as f64,
                );
                if self.contains(w) {
                    out.push(w);
                }
            }
        }
        out
    }

    /// Lattice points together with `n_boundary` points on the boundary.
    pub fn closure_mesh(&self, n: usize, n_boundary: usize) -> Vec<C64> {
        let mut out = self.mesh(n);
        match self {
            Self::Disk { center, radius } => {
                for k in 0..n_boundary {
                    out.push(center + C64::from_polar(*radius, 2.0 * std::f64::consts::PI * k as f64 / n_boundary as f64));
                }
            }
            Self::Rect { x0, x1, y0, y1 } => {
                let per = (n_boundary / 4).max(1);
                for k in 0..=per {
                    let s = k as f64 / per as f64;
                    let x = x0 + (x1 - x0) * s;
                    let y = y0 + (y1 - y0) * s;
                    out.extend([c(x, *y0), c(x, *y1), c(*x0, y), c(*x1, y)]);
                }
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// smooth steps

fn h(x: f64) -> f64 {
    if x > 0.0 {
        (-1.0 / x).exp()
    } else {
        0.0
    }
}

/// Smooth step from 0 (at `x ≤ 0`) to 1 (at `x ≥ 1`).
pub fn smooth_step(x: f64) -> f64 {
    let (a, b) = (h(x), h(1.0 - x));
    a / (a + b)
}

/// `√smooth_step(x)`, computed as `e^{−1/(2x)} / √(h(x) + h(1−x))`, which
/// is itself smooth.
pub fn sqrt_smooth_step(x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    (-0.5 / x).exp() / (h(x) + h(1.0 - x)).sqrt()
}

// ---------------------------------------------------------------------------
// triangle cover

fn default_floor() -> f64 {
    0.02
}

fn default_ramp() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriangleCover {
    pub anchors: Vec<C64>,
    pub triangles: Vec<[usize; 3]>,
    /// Bumps vanish unless every barycentric coordinate exceeds this floor.
    #[serde(default = "default_floor")]
    pub bary_floor: f64,
    /// Barycentric width over which a bump rises from 0 to 1.
    #[serde(default = "default_ramp")]
    pub ramp: f64,
}

impl TriangleCover {
    pub fn barycentric(&self, k: usize, z: C64) -> [f64; 3] {
        let [i, j, l] = self.triangles[k];
        let (a, b, p) = (self.anchors[i], self.anchors[j], self.anchors[l]);
        let cross = |u: C64, v: C64| (u.conj() * v).im;
        let area = cross(b - a, p - a);
        let wa = cross(b - z, p - z) / area;
        let wb = cross(p - z, a - z) / area;
        [wa, wb, 1.0 - wa - wb]
    }

    fn sqrt_raw_bump(&self, k: usize, z: C64) -> f64 {
        self.barycentric(k, z)
            .iter()
            .map(|&b| sqrt_smooth_step((b - self.bary_floor) / self.ramp))
            .product()
    }

    /// `(k, √f_k(z), β_k(z))` for every triangle with `f_k(z) > 0`.
    pub fn active(&self, z: C64) -> Result<Vec<(usize, f64, [f64; 3])>> {
        let roots: Vec<f64> = (0..self.triangles.len()).map(|k| self.sqrt_raw_bump(k, z)).collect();
        let total: f64 = roots.iter().map(|r| r * r).sum();
        if !(total > 0.0) {
            return Err(OpcError::CoverageGap(z));
        }
        let norm = total.sqrt();
        Ok(roots
            .iter()
            .enumerate()
            .filter(|(_, &r)| r > 0.0)
            .map(|(k, &r)| (k, r / norm, self.barycentric(k, z)))
            .collect())
    }

    /// Partition of unity `(f_k(z))_k`.
    pub fn partition(&self, z: C64) -> Result<Vec<f64>> {
        let mut f = vec![0.0; self.triangles.len()];
        for (k, r, _) in self.active(z)? {
            f[k] = r * r;
        }
        Ok(f)
    }
}

/// Greedy triangle cover of the values `d(ω)` over the closure mesh of `Ω`:
/// a value counts as covered once some triangle holds it with every
/// barycentric coordinate at least `floor + ramp/2`.
pub fn build_cover(
    inst: &ReservoirInstance,
    d: &FieldExpr,
    domain: &PlanarDomain,
    bary_floor: f64,
    mesh_points: usize,
) -> Result<TriangleCover> {
    domain.validate()?;
    if !(bary_floor > 0.0 && bary_floor < 0.2) {
        return Err(OpcError::Invalid(format!("bary_floor {bary_floor} outside (0, 0.2)")));
    }
    let anchors = inst.anchors.clone();
    let values: Vec<C64> = domain.closure_mesh(mesh_points, 4 * mesh_points).iter().map(|&w| d.eval(w)).collect();
    let mut candidates = Vec::new();
    let n = anchors.len();
    for i in 0..n {
        for j in i + 1..n {
            for l in j + 1..n {
                let area = ((anchors[j] - anchors[i]).conj() * (anchors[l] - anchors[i])).im;
                if area.abs() > 1e-9 {
                    candidates.push(if area > 0.0 { [i, j, l] } else { [i, l, j] });
                }
            }
        }
    }
    let mut cover = TriangleCover {
        anchors,
        triangles: Vec::new(),
        bary_floor,
        ramp: default_ramp(),
    };
    let deep = bary_floor + cover.ramp / 2.0;
    let probe = TriangleCover {
        triangles: candidates.clone(),
        ..cover.clone()
    };
    let depth = |k: usize, z: C64| probe.barycentric(k, z).iter().copied().fold(f64::INFINITY, f64::min);
    let mut uncovered: Vec<C64> = values;
    while !uncovered.is_empty() {
        let mut best: Option<(usize, usize, f64)> = None;
        for k in 0..candidates.len() {
            let mut count = 0;
            let mut worst = f64::INFINITY;
            for &z in &uncovered {
                let m = depth(k, z);
                if m >= deep {
                    count += 1;
                    worst = worst.min(m);
                }
            }
            if count == 0 {
                continue;
            }
            let better = match best {
                None => true,
                Some((_, bc, bw)) => count > bc || (count == bc && worst > bw),
            };
            if better {
                best = Some((k, count, worst));
            }
        }
        let Some((k, _, _)) = best else {
            return Err(OpcError::CoverageGap(uncovered[0]));
        };
        cover.triangles.push(candidates[k]);
        uncovered.retain(|&z| depth(k, z) < deep);
    }
    Ok(cover)
}

// ---------------------------------------------------------------------------
// fields

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSet {
    pub format: String,
    pub expr: FieldExpr,
    pub domain: PlanarDomain,
    pub cover: TriangleCover,
    /// `vectors[n][3k + i]` is the eigenvector for vertex `i` of triangle `k`
    /// in field `n`.
    #[serde(with = "field_serde")]
    pub vectors: Vec<Vec<ComplexMatrix>>,
}

mod field_serde {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Row(#[serde(with = "cmx_vec_serde")] Vec<ComplexMatrix>);

    pub fn serialize<S: Serializer>(v: &[Vec<ComplexMatrix>], s: S) -> std::result::Result<S::Ok, S::Error> {
        let rows: Vec<Row> = v.iter().map(|r| Row(r.clone())).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<Vec<ComplexMatrix>>, D::Error> {
        let rows: Vec<Row> = Vec::deserialize(d)?;
        Ok(rows.into_iter().map(|r| r.0).collect())
    }
}

impl FieldSet {
    pub fn n_fields(&self) -> usize {
        self.vectors.len()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().and_then(|r| r.first()).map_or(0, |v| v.nrows())
    }

    pub fn eval(&self, n: usize, w: C64) -> Result<ComplexMatrix> {
        let z = self.expr.eval(w);
        let mut u = ComplexMatrix::zeros(self.dim(), 1);
        for (k, rf, beta) in self.cover.active(z)? {
            for (i, &b) in beta.iter().enumerate() {
                if b > 0.0 {
                    u += &self.vectors[n][3 * k + i] * c(rf * b.sqrt(), 0.0);
                }
            }
        }
        Ok(u)
    }

    /// `S(ω)` with columns `u_1(ω), …, u_N(ω)`.
    pub fn isometry(&self, w: C64) -> Result<ComplexMatrix> {
        let cols = (0..self.n_fields()).map(|n| self.eval(n, w)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&ComplexMatrix> = cols.iter().collect();
        Ok(kernel::hstack(&refs))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| OpcError::Parse(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: Self = serde_json::from_str(s).map_err(|e| OpcError::Parse(e.to_string()))?;
        if f.format != "smoothfield" {
            return Err(OpcError::Parse(format!("unexpected format tag {:?}", f.format)));
        }
        Ok(f)
    }
}

/// Draws `3 · #triangles` fresh eigenvectors per field from the instance.
pub fn build_fields(
    inst: &mut ReservoirInstance,
    cover: &TriangleCover,
    d: &FieldExpr,
    domain: &PlanarDomain,
    n_fields: usize,
) -> Result<FieldSet> {
    if cover.anchors != inst.anchors {
        return Err(OpcError::Invalid("cover anchors differ from the instance anchors".into()));
    }
    let mut vectors = Vec::with_capacity(n_fields);
    for _ in 0..n_fields {
        let mut row = Vec::with_capacity(3 * cover.triangles.len());
        for tri in &cover.triangles {
            for &k in tri {
                row.push(inst.allocate_eigvec(k, &[], None)?);
            }
        }
        vectors.push(row);
    }
    Ok(FieldSet {
        format: "smoothfield".into(),
        expr: d.clone(),
        domain: domain.clone(),
        cover: cover.clone(),
        vectors,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldCheck {
    pub mesh_size: usize,
    pub partition_defect: f64,
    pub norm_defect: f64,
    pub residual: f64,
    /// `max |⟨u_m(ω), u_n(ω′)⟩|` over `m ≠ n` and all mesh pairs.
    pub cross_gram: f64,
    /// `‖S*(ω) A S(ω) − d(ω) I‖` maximized over the mesh.
    pub compression_defect: f64,
    /// Smallest barycentric coordinate under a square root where the bump is active.
    pub min_bary: f64,
    pub triangles: usize,
}

/// Mesh evaluation of the field identities against the base operator `a`.
pub fn check_fields(a: &ComplexMatrix, set: &FieldSet, mesh: &[C64]) -> Result<FieldCheck> {
    let evals = par::map(mesh, |&w| -> Result<(f64, f64, f64, f64, f64, ComplexMatrix)> {
        let z = set.expr.eval(w);
        let f = set.cover.partition(z)?;
        let min_bary = set
            .cover
            .active(z)?
            .iter()
            .flat_map(|(_, _, b)| b.iter().copied())
            .fold(f64::INFINITY, f64::min);
        let s = set.isometry(w)?;
        let n = s.ncols();
        let comp = s.ad_mul(a) * &s;
        let mut norm: f64 = 0.0;
        let mut res: f64 = 0.0;
        for j in 0..n {
            norm = norm.max((s.column(j).norm() - 1.0).abs());
            res = res.max((comp[(j, j)] - z).norm());
        }
        let target = ComplexMatrix::identity(n, n) * z;
        Ok(((f.iter().sum::<f64>() - 1.0).abs(), norm, res, (comp - target).norm(), min_bary, s))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let mut out = FieldCheck {
        mesh_size: mesh.len(),
        partition_defect: 0.0,
        norm_defect: 0.0,
        residual: 0.0,
        cross_gram: 0.0,
        compression_defect: 0.0,
        min_bary: f64::INFINITY,
        triangles: set.cover.triangles.len(),
    };
    for (p, nd, r, cd, mb, _) in &evals {
        out.partition_defect = out.partition_defect.max(*p);
        out.norm_defect = out.norm_defect.max(*nd);
        out.residual = out.residual.max(*r);
        out.compression_defect = out.compression_defect.max(*cd);
        out.min_bary = out.min_bary.min(*mb);
    }
    let per_field: Vec<ComplexMatrix> = (0..set.n_fields())
        .map(|n| {
            let cols: Vec<ComplexMatrix> = evals.iter().map(|e| kernel::column(&e.5, n)).collect();
            let refs: Vec<&ComplexMatrix> = cols.iter().collect();
            kernel::hstack(&refs)
        })
        .collect();
    for m in 0..per_field.len() {
        for n in m + 1..per_field.len() {
            let g = per_field[m].adjoint() * &per_field[n];
            out.cross_gram = out.cross_gram.max(g.iter().fold(0.0, |x, z| x.max(z.norm())));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// smoothness

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderEstimate {
    /// Step pair `(h, h/2)` the estimate compares.
    pub h: f64,
    /// `sup ‖D_h − D_{h/2}‖` over points, directions and components.
    pub change: f64,
    /// `log2(change(2h) / change(h))`; `None` when differences sit at rounding level.
    pub order: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessReport {
    pub points: usize,
    pub h_list: Vec<f64>,
    pub first: Vec<OrderEstimate>,
    pub second: Vec<OrderEstimate>,
    /// Largest first-difference norm at the smallest step.
    pub max_first_derivative: f64,
    /// Order at the finest step pair, worst over the derivative levels
    /// checked; `None` when every difference sits at rounding level.
    pub order: Option<f64>,
}

const ROUNDING_FLOOR: f64 = 1e-10;

fn orders(changes: Vec<(f64, f64)>) -> Vec<OrderEstimate> {
    let mut out: Vec<OrderEstimate> = changes
        .iter()
        .map(|&(h, change)| OrderEstimate { h, change, order: None })
        .collect();
    for i in 1..out.len() {
        let (a, b) = (out[i - 1].change, out[i].change);
        if a > ROUNDING_FLOOR && b > ROUNDING_FLOOR {
            out[i].order = Some((a / b).log2());
        }
    }
    out
}

/// Central differences of `field` along `x` and `y` at the steps `h_list`
/// (decreasing by factors of two); successive changes of the difference
/// quotients shrink like `h²` for a `C³` field.
pub fn smoothness_check<F>(field: F, points: &[C64], h_list: &[f64], r: usize) -> Result<SmoothnessReport>
where
    F: Fn(C64) -> Result<ComplexMatrix> + Sync,
{
    if h_list.len() < 2 || r == 0 || r > 2 {
        return Err(OpcError::Invalid("need at least two steps and derivative order 1 or 2".into()));
    }
    let per_point = par::map(points, |&w| -> Result<Vec<(Vec<ComplexMatrix>, Vec<ComplexMatrix>)>> {
        let u0 = field(w)?;
        let mut out = Vec::with_capacity(h_list.len());
        for &h in h_list {
            let mut first = Vec::with_capacity(2);
            let mut second = Vec::with_capacity(2);
            for dir in [c(h, 0.0), c(0.0, h)] {
                let (up, dn) = (field(w + dir)?, field(w - dir)?);
                first.push((&up - &dn) / c(2.0 * h, 0.0));
                second.push((&up - &u0 * c(2.0, 0.0) + &dn) / c(h * h, 0.0));
            }
            out.push((first, second));
        }
        Ok(out)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let change = |which: usize| -> Vec<(f64, f64)> {
        (1..h_list.len())
            .map(|i| {
                let sup = per_point
                    .iter()
                    .flat_map(|p| {
                        let (a, b) = if which == 0 { (&p[i - 1].0, &p[i].0) } else { (&p[i - 1].1, &p[i].1) };
                        a.iter().zip(b).map(|(x, y)| (x - y).iter().fold(0.0_f64, |m, z| m.max(z.norm())))
                    })
                    .fold(0.0, f64::max);
                (h_list[i], sup)
            })
            .collect()
    };
    let first = orders(change(0));
    let second = if r == 2 { orders(change(1)) } else { Vec::new() };
    let last = h_list.len() - 1;
    let max_first_derivative = per_point
        .iter()
        .flat_map(|p| p[last].0.iter().map(|m| m.norm()))
        .fold(0.0, f64::max);
    let order = [first.last(), second.last()]
        .into_iter()
        .flatten()
        .filter_map(|o| o.order)
        .fold(None, |acc: Option<f64>, o| Some(acc.map_or(o, |a| a.min(o))));
    Ok(SmoothnessReport {
        points: points.len(),
        h_list: h_list.to_vec(),
        first,
        second,
        max_first_derivative,
        order,
    })
}

/// Mesh points whose `±2h_max` neighbourhood stays inside the domain.
pub fn interior_points(domain: &PlanarDomain, mesh: &[C64], h_max: f64) -> Vec<C64> {
    let r = 2.0 * h_max;
    mesh.iter()
        .copied()
        .filter(|&w| [c(r, 0.0), c(-r, 0.0), c(0.0, r), c(0.0, -r)].iter().all(|&d| domain.contains(w + d)))
        .collect()
}
