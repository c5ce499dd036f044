//! Orthonormal vector families with prescribed continuous diagonals
//! `⟨A(t) v_n(t), v_n(t)⟩ = d_n(t)`.
//!
//! Vectors are realized pointwise on a time grid from the reservoir
//! structure: for a value `z` in the anchor polygon, smooth generalized
//! barycentric weights `w_a(z)` and unit vectors `g_a(t)` in each anchor
//! eigenspace give `x = Σ √w_a g_a` with `x*Bx = z` exactly. The `g_a(t)` are
//! fixed seeds projected away from the current constraints, so they vary
//! continuously with `t`. Completeness towards target vectors `y_m` follows
//! the dyadic schedule `n = 2^{r−1}(2s − 1)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{OpcError, Result};
use crate::instances::{uniform_grid, Motion, OperatorPath, ReservoirInstance, ScalarFn, SlotFamily};
use crate::kernel::{self, c, cmx_vec_serde, ComplexMatrix, Subspace, C64};
use crate::numrange::convex_hull;
use crate::par;
use crate::tol::Tolerances;

/// `(r, s)` with `n = 2^{r−1}(2s − 1)`.
pub fn index_map(n: usize) -> (usize, usize) {
    assert!(n > 0, "indices start at 1");
    let r = n.trailing_zeros() as usize + 1;
    let odd = n >> (r - 1);
    (r, odd.div_ceil(2))
}

pub fn index_inverse(r: usize, s: usize) -> usize {
    (1usize << (r - 1)) * (2 * s - 1)
}

/// `η_k = η / (2^{r/2} s^{1/2})`.
pub fn eta_k(eta: f64, k: usize) -> f64 {
    let (r, s) = index_map(k);
    eta / (2f64.powf(r as f64 / 2.0) * (s as f64).sqrt())
}

/// `δ_k = θ (η_k/24)² / 2`, the largest value with `12√(2δ_k/θ) ≤ η_k/2`.
pub fn delta_k(theta: f64, eta_k: f64) -> f64 {
    theta * (eta_k / 24.0).powi(2) / 2.0
}

/// `0.9 √θ / (2√2)`.
pub fn default_eta(theta: f64) -> f64 {
    0.9 * theta.sqrt() / (2.0 * std::f64::consts::SQRT_2)
}

fn default_families() -> usize {
    2
}

fn default_grid_points() -> usize {
    65
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalPlan {
    pub d_paths: Vec<ScalarFn>,
    pub theta: f64,
    pub eta: f64,
    #[serde(default = "default_families")]
    pub families: usize,
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    /// Coordinate indices of the completeness targets `y_m`; all
    /// coordinates when absent.
    #[serde(default)]
    pub targets: Option<Vec<usize>>,
}

impl DiagonalPlan {
    pub fn new(d_paths: Vec<ScalarFn>, theta: f64) -> Self {
        Self {
            d_paths,
            theta,
            eta: default_eta(theta),
            families: default_families(),
            grid_points: default_grid_points(),
            targets: None,
        }
    }

    pub fn grid(&self, a: &OperatorPath) -> Vec<f64> {
        let mut g = uniform_grid(self.grid_points);
        g.extend(a.breakpoints());
        g.sort_by(|x, y| x.partial_cmp(y).unwrap());
        g.dedup_by(|x, y| (*x - *y).abs() < 1e-15);
        g
    }

    pub fn target_indices(&self, n: usize) -> Vec<usize> {
        self.targets.clone().unwrap_or_else(|| (0..n).collect())
    }

    /// Checks the margin of every `d_n` at every grid node and the bound on `η`.
    pub fn validate(&self, inst: &ReservoirInstance, a: &OperatorPath) -> Result<()> {
        if !(self.theta > 0.0) {
            return Err(OpcError::Invalid(format!("theta must be positive (got {})", self.theta)));
        }
        let cap = self.theta.sqrt() / (2.0 * std::f64::consts::SQRT_2);
        if !(self.eta > 0.0 && self.eta < cap) {
            return Err(OpcError::Invalid(format!("eta = {} must lie in (0, {cap})", self.eta)));
        }
        if self.families == 0 {
            return Err(OpcError::TooManyFamilies {
                families: 0,
                multiplicity: inst.multiplicity,
            });
        }
        for (n, d) in self.d_paths.iter().enumerate() {
            d.validate()?;
            for &t in &self.grid(a) {
                let z = d.eval(t) - a.drift(t);
                let dist = inst.region.signed_distance(z);
                if dist < self.theta * (1.0 - 1e-12) {
                    return Err(OpcError::MarginViolated(format!(
                        "d_{} at t = {t} keeps distance {dist:.4} from the region boundary, below theta = {}",
                        n + 1,
                        self.theta
                    )));
                }
            }
        }
        if let Some(ts) = &self.targets {
            if let Some(&bad) = ts.iter().find(|&&m| m >= inst.dim()) {
                return Err(OpcError::DimensionMismatch(format!("target coordinate {bad} out of range")));
            }
        }
        Ok(())
    }
}

/// Coordinate subspaces of the slot families of [`ReservoirInstance::split_slots`].
pub fn split_reservoirs(inst: &ReservoirInstance, n_families: usize) -> Result<Vec<Subspace>> {
    let fams = inst.split_slots(n_families)?;
    Ok(fams.iter().map(|f| Subspace::coordinates(inst.dim(), &family_positions(inst, f))).collect())
}

fn family_positions(inst: &ReservoirInstance, f: &SlotFamily) -> Vec<usize> {
    let mut out = Vec::new();
    for k in 0..inst.anchors.len() {
        let pos = inst.anchor_positions(k);
        out.extend(f.allowed[k].iter().map(|&i| pos[i]));
    }
    out.sort_unstable();
    out
}

// ---------------------------------------------------------------------------
// value-plane weights

/// Smooth convex weights `w_a(z)` on the anchors with `Σ w_a a = z`:
/// Wachspress coordinates on the anchor hull, or linear weights on the two
/// extreme anchors when all anchors are real.
pub fn plane_weights(anchors: &[C64], z: C64) -> Result<Vec<(usize, f64)>> {
    let scale = anchors.iter().map(|a| a.norm()).fold(1.0, f64::max);
    if anchors.iter().all(|a| a.im.abs() <= 1e-12 * scale) {
        let (lo, hi) = extreme_real(anchors);
        let (a, b) = (anchors[lo].re, anchors[hi].re);
        if z.im.abs() > 1e-12 * scale || z.re < a - 1e-12 * scale || z.re > b + 1e-12 * scale || !(b > a) {
            return Err(OpcError::NotInside(z));
        }
        let s = ((z.re - a) / (b - a)).clamp(0.0, 1.0);
        return Ok(vec![(lo, 1.0 - s), (hi, s)]);
    }
    let hull = convex_hull(anchors);
    let idx: Vec<usize> = hull
        .iter()
        .map(|h| anchors.iter().position(|a| a == h).unwrap())
        .collect();
    let n = hull.len();
    let cross = |p: C64, q: C64, r: C64| ((q - p).conj() * (r - p)).im;
    let mut raw = Vec::with_capacity(n);
    for i in 0..n {
        let (prev, cur, next) = (hull[(i + n - 1) % n], hull[i], hull[(i + 1) % n]);
        let a1 = cross(z, prev, cur);
        let a2 = cross(z, cur, next);
        if a1 <= 1e-14 * scale * scale || a2 <= 1e-14 * scale * scale {
            return Err(OpcError::NotInside(z));
        }
        raw.push(cross(prev, cur, next) / (a1 * a2));
    }
    let total: f64 = raw.iter().sum();
    Ok(idx.into_iter().zip(raw.into_iter().map(|w| w / total)).collect())
}

fn extreme_real(anchors: &[C64]) -> (usize, usize) {
    let mut lo = 0;
    let mut hi = 0;
    for (i, a) in anchors.iter().enumerate() {
        if a.re < anchors[lo].re {
            lo = i;
        }
        if a.re > anchors[hi].re {
            hi = i;
        }
    }
    (lo, hi)
}

/// Per-anchor seed vectors in slot coordinates for one vector path.
fn seeds(inst: &ReservoirInstance, family: &SlotFamily, salt: u64) -> Vec<ComplexMatrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(inst.seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    (0..inst.anchors.len())
        .map(|k| kernel::random_unit_vector(&mut rng, family.allowed[k].len().max(1)))
        .collect()
}

/// Vector `x ⊥ constraints` with `⟨A(t)x, x⟩ = value` exactly, built from the
/// seeds inside the family's slots.
#[allow(clippy::too_many_arguments)]
fn realize_at(
    inst: &ReservoirInstance,
    a: &OperatorPath,
    t: f64,
    value: C64,
    family: &SlotFamily,
    seeds: &[ComplexMatrix],
    constraints: &[ComplexMatrix],
    tol: &Tolerances,
) -> Result<ComplexMatrix> {
    let local: Vec<ComplexMatrix> = constraints.iter().map(|x| a.to_base(t, x)).collect();
    let weights = plane_weights(&inst.anchors, value - a.drift(t))?;
    let mut x = ComplexMatrix::zeros(inst.dim(), 1);
    for (k, w) in weights {
        if w <= 0.0 {
            continue;
        }
        let pos: Vec<usize> = family.allowed[k].iter().map(|&i| inst.anchor_positions(k)[i]).collect();
        let r = pos.len();
        let mut g = seeds[k].clone();
        if !local.is_empty() {
            let refs: Vec<ComplexMatrix> = local
                .iter()
                .map(|v| ComplexMatrix::from_fn(r, 1, |i, _| v[(pos[i], 0)]))
                .collect();
            let refs: Vec<&ComplexMatrix> = refs.iter().collect();
            let q = kernel::orthonormalize(&kernel::hstack(&refs), tol.rank);
            if q.ncols() >= r {
                return Err(room(k, r, q.ncols()));
            }
            g = &g - &q * (q.ad_mul(&g));
            // second pass against rounding
            g = &g - &q * (q.ad_mul(&g));
        }
        let norm = g.norm();
        if norm < 1e-6 {
            return Err(room(k, r, r));
        }
        for (i, &p) in pos.iter().enumerate() {
            x[(p, 0)] += g[(i, 0)] * c(w.sqrt() / norm, 0.0);
        }
    }
    Ok(a.from_base(t, &x))
}

fn room(anchor: usize, slots: usize, constraints: usize) -> OpcError {
    OpcError::RoomExhausted {
        anchor,
        capacity: slots,
        context: format!("{constraints} constraints on {slots} family slots"),
    }
}

// ---------------------------------------------------------------------------
// vector paths

/// Unit-vector path sampled on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorPath {
    pub grid: Vec<f64>,
    #[serde(with = "cmx_vec_serde")]
    pub values: Vec<ComplexMatrix>,
}

impl VectorPath {
    /// Piecewise-linear interpolation, renormalized.
    pub fn eval(&self, t: f64) -> ComplexMatrix {
        let g = &self.grid;
        let i = g.partition_point(|&x| x <= t).saturating_sub(1).min(g.len().saturating_sub(2));
        if g.len() == 1 {
            return self.values[0].clone();
        }
        let s = ((t - g[i]) / (g[i + 1] - g[i])).clamp(0.0, 1.0);
        let x = &self.values[i] * c(1.0 - s, 0.0) + &self.values[i + 1] * c(s, 0.0);
        let n = x.norm();
        x / c(n, 0.0)
    }

    /// `max_i |⟨A(t_i)v, v⟩ − d(t_i)|`.
    pub fn residual(&self, a: &OperatorPath, d: &ScalarFn) -> f64 {
        self.grid
            .iter()
            .zip(&self.values)
            .map(|(&t, v)| (a.compress(t, v)[(0, 0)] - d.eval(t)).norm())
            .fold(0.0, f64::max)
    }

    /// Largest `‖v(t_{i+1}) − v(t_i)‖ / Δt`.
    pub fn max_quotient(&self) -> f64 {
        (1..self.grid.len())
            .map(|i| (&self.values[i] - &self.values[i - 1]).norm() / (self.grid[i] - self.grid[i - 1]))
            .fold(0.0, f64::max)
    }

    pub fn distance(&self, other: &VectorPath) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(x, y)| (x - y).norm())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineRecord {
    pub eps: f64,
    pub weight: f64,
    pub residual_before: f64,
    pub residual_after: f64,
    pub distance: f64,
    /// `3√(ε/θ)`.
    pub distance_bound: f64,
}

/// Blend `ṽ = √(1−a) v + √a r` with `a = ε/θ`, where `r` lies in the family
/// `m`, avoids `v, Av, A*v`, and realizes `d̃ = (d − (1−a)⟨Av, v⟩)/a`.
#[allow(clippy::too_many_arguments)]
pub fn refine_vector(
    inst: &ReservoirInstance,
    a: &OperatorPath,
    d: &ScalarFn,
    v: &VectorPath,
    eps: f64,
    theta: f64,
    eps_next: f64,
    family: &SlotFamily,
    salt: u64,
    tol: &Tolerances,
) -> Result<(VectorPath, RefineRecord)> {
    check_path(a)?;
    if !(eps < theta) {
        return Err(OpcError::EpsilonNotLessThanTheta { eps, theta });
    }
    let before = v.residual(a, d);
    let w = eps / theta;
    if w <= 1e-14 {
        return Ok((
            v.clone(),
            RefineRecord {
                eps,
                weight: 0.0,
                residual_before: before,
                residual_after: before,
                distance: 0.0,
                distance_bound: 3.0 * w.sqrt(),
            },
        ));
    }
    let sd = seeds(inst, family, salt);
    let nodes: Vec<(f64, &ComplexMatrix)> = v.grid.iter().copied().zip(&v.values).collect();
    let values = par::map(&nodes, |&(t, x)| -> Result<ComplexMatrix> {
        let q = a.compress(t, x)[(0, 0)];
        let target = (d.eval(t) - q * (1.0 - w)) / w;
        let cons = [x.clone(), a.apply(t, x), a.apply_adjoint(t, x)];
        let r = realize_at(inst, a, t, target, family, &sd, &cons, tol)?;
        let y = x * c((1.0 - w).sqrt(), 0.0) + r * c(w.sqrt(), 0.0);
        let n = y.norm();
        Ok(y / c(n, 0.0))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let out = VectorPath {
        grid: v.grid.clone(),
        values,
    };
    let after = out.residual(a, d);
    if after > eps_next.max(tol.realize) {
        return Err(OpcError::Invalid(format!(
            "refined residual {after:.3e} misses the requested {eps_next:.3e}"
        )));
    }
    let record = RefineRecord {
        eps,
        weight: w,
        residual_before: before,
        residual_after: after,
        distance: out.distance(v),
        distance_bound: 3.0 * w.sqrt(),
    };
    Ok((out, record))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactRecord {
    pub steps: Vec<RefineRecord>,
    pub residual: f64,
    pub distance: f64,
    /// `12√(ε/θ)`.
    pub distance_bound: f64,
}

/// Iterated refinement with `ε_n = ε 2^{−n}` until the residual is at most
/// `tol_final`.
#[allow(clippy::too_many_arguments)]
pub fn exact_vector(
    inst: &ReservoirInstance,
    a: &OperatorPath,
    d: &ScalarFn,
    v: &VectorPath,
    theta: f64,
    tol_final: f64,
    family: &SlotFamily,
    salt: u64,
    tol: &Tolerances,
) -> Result<(VectorPath, ExactRecord)> {
    let eps0 = v.residual(a, d);
    if !(eps0 < theta) {
        return Err(OpcError::EpsilonNotLessThanTheta { eps: eps0, theta });
    }
    let mut u = v.clone();
    let mut steps = Vec::new();
    let mut eps = eps0;
    let mut n = 0;
    while u.residual(a, d) > tol_final {
        n += 1;
        if n > 60 {
            break;
        }
        let next = (eps0 * 0.5f64.powi(n)).max(tol_final);
        let (w, rec) = refine_vector(inst, a, d, &u, eps, theta, next, family, salt.wrapping_add(n as u64), tol)?;
        eps = rec.residual_after;
        steps.push(rec);
        u = w;
    }
    let record = ExactRecord {
        residual: u.residual(a, d),
        distance: u.distance(v),
        distance_bound: 12.0 * (eps0 / theta).sqrt(),
        steps,
    };
    Ok((u, record))
}

fn check_path(a: &OperatorPath) -> Result<()> {
    if !a.is_reservoir() || matches!(a.motion, Motion::Sampled { .. }) {
        return Err(OpcError::Invalid("diagonal synthesis needs a reservoir-backed operator path".into()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// basis synthesis

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtaRow {
    pub k: usize,
    pub r: usize,
    pub s: usize,
    pub eta_k: f64,
    pub delta_k: f64,
}

/// `max_t dist²(y_m, span{v_1..v_K}(t))` against the product bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletenessRow {
    /// Coordinate index of `y_m`.
    pub target: usize,
    /// Position `m` of the target in the schedule (1-based).
    pub m: usize,
    pub level: usize,
    pub dist2: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDistance {
    pub n: usize,
    /// `sup_t ‖v_n − u_n‖` against the vector realizing `d_n` without the
    /// completeness blend.
    pub measured: f64,
    /// `27√2 η_n θ^{−1/2}`.
    pub bound: f64,
    /// Blend coefficient `sup_t α_n(t)` on the completeness direction.
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagCertificate {
    pub gram_defect: f64,
    pub residual: f64,
    pub residuals: Vec<f64>,
    pub completeness: Vec<CompletenessRow>,
    pub step_distances: Vec<StepDistance>,
    pub eta_table: Vec<EtaRow>,
    /// Largest difference quotient per vector path.
    pub quotients: Vec<f64>,
    /// Largest `dist²(y, span)` over all completeness targets at the final level.
    pub max_target_dist2: f64,
    pub basis_complete: bool,
    pub budget_used: Vec<usize>,
    pub verified_nodes: usize,
    #[serde(default)]
    pub partial: bool,
    #[serde(default)]
    pub stop_reason: Option<String>,
}

/// On-disk "diagset" record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagSet {
    pub format: String,
    pub plan: DiagonalPlan,
    pub grid: Vec<f64>,
    pub vectors: Vec<VectorPath>,
    pub certificate: DiagCertificate,
}

impl DiagSet {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| OpcError::Parse(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: Self = serde_json::from_str(s).map_err(|e| OpcError::Parse(e.to_string()))?;
        if f.format != "diagset" {
            return Err(OpcError::Parse(format!("unexpected format tag {:?}", f.format)));
        }
        Ok(f)
    }
}

/// Product bound `∏ (1 − η_j²/4)` over the steps `j ≤ level` aimed at `y_m`.
pub fn completeness_bound(eta: f64, m: usize, level: usize) -> f64 {
    (1..=level)
        .filter(|&j| index_map(j).0 == m)
        .map(|j| 1.0 - eta_k(eta, j).powi(2) / 4.0)
        .product()
}

/// Builds `v_1, …, v_{n_max}`: step `k` blends a vector realizing the
/// auxiliary value `d̃_k` with the normalized residual of `y_{r(k)}` against
/// the earlier vectors, so the diagonal stays exact while the distance of
/// `y_{r(k)}` to the span shrinks by `√(1 − α²)`.
pub fn synthesize_basis(
    inst: &mut ReservoirInstance,
    a: &OperatorPath,
    plan: &DiagonalPlan,
    n_max: usize,
    tol: &Tolerances,
) -> Result<DiagSet> {
    check_path(a)?;
    plan.validate(inst, a)?;
    if n_max > plan.d_paths.len() {
        return Err(OpcError::Invalid(format!(
            "n_max = {n_max} exceeds the {} prescribed diagonals",
            plan.d_paths.len()
        )));
    }
    let fams = inst.split_slots(plan.families)?;
    let grid = plan.grid(a);
    let targets = plan.target_indices(inst.dim());
    let dim = inst.dim();
    let mut vectors: Vec<VectorPath> = Vec::new();
    let mut steps: Vec<StepDistance> = Vec::new();
    let mut eta_table = Vec::new();
    let mut stop = None;
    let inst_ref: &ReservoirInstance = inst;
    for k in 1..=n_max {
        let (r, s) = index_map(k);
        let ek = eta_k(plan.eta, k);
        eta_table.push(EtaRow {
            k,
            r,
            s,
            eta_k: ek,
            delta_k: delta_k(plan.theta, ek),
        });
        let family = &fams[(k - 1) % fams.len()];
        let sd = seeds(inst_ref, family, k as u64);
        let target = targets.get(r - 1).copied();
        let b2 = target.map(|_| completeness_bound(plan.eta, r, k - 1)).unwrap_or(1.0);
        let d = &plan.d_paths[k - 1];
        let nodes: Vec<(usize, f64)> = grid.iter().copied().enumerate().collect();
        let built = par::map(&nodes, |&(i, t)| -> Result<(ComplexMatrix, f64, f64)> {
            let earlier: Vec<ComplexMatrix> = vectors.iter().map(|v| v.values[i].clone()).collect();
            let mut cons = earlier.clone();
            let mut alpha = 0.0;
            let mut yhat = ComplexMatrix::zeros(dim, 1);
            if let Some(m) = target {
                let mut y = ComplexMatrix::zeros(dim, 1);
                y[(m, 0)] = c(1.0, 0.0);
                for _ in 0..2 {
                    for v in &earlier {
                        let p = kernel::inner(v, &y);
                        y -= v * p;
                    }
                }
                let ny = y.norm();
                if ny > 1e-12 {
                    alpha = ek * (ny / b2.sqrt()).min(1.0);
                    yhat = &y / c(ny, 0.0);
                    cons.push(yhat.clone());
                    cons.push(a.apply(t, &yhat));
                    cons.push(a.apply_adjoint(t, &yhat));
                }
            }
            let q = a.compress(t, &yhat)[(0, 0)];
            let aux = (d.eval(t) - q * alpha * alpha) / (1.0 - alpha * alpha);
            let u1 = realize_at(inst_ref, a, t, aux, family, &sd, &cons, tol)?;
            let v = &u1 * c((1.0 - alpha * alpha).sqrt(), 0.0) + &yhat * c(alpha, 0.0);
            let plain = realize_at(inst_ref, a, t, d.eval(t), family, &sd, &earlier, tol)?;
            let gap = (&v - plain).norm();
            Ok((v, gap, alpha))
        });
        let mut values = Vec::with_capacity(grid.len());
        let mut gap: f64 = 0.0;
        let mut amax: f64 = 0.0;
        let mut failed = None;
        for b in built {
            match b {
                Ok((v, g, al)) => {
                    values.push(v);
                    gap = gap.max(g);
                    amax = amax.max(al);
                }
                Err(e) => {
                    failed = Some(e);
                    break;
                }
            }
        }
        if let Some(e) = failed {
            if e.is_room_exhausted() {
                stop = Some(format!("step {k}: {e}"));
                eta_table.pop();
                break;
            }
            return Err(e);
        }
        vectors.push(VectorPath {
            grid: grid.clone(),
            values,
        });
        steps.push(StepDistance {
            n: k,
            measured: gap,
            bound: 27.0 * std::f64::consts::SQRT_2 * ek / plan.theta.sqrt(),
            alpha: amax,
        });
    }
    if vectors.is_empty() {
        return Err(OpcError::RoomExhausted {
            anchor: 0,
            capacity: inst.multiplicity,
            context: stop.unwrap_or_else(|| "no vector could be built".into()),
        });
    }
    let certificate = verify_diagset(inst, a, plan, &grid, &vectors, steps, eta_table, stop, tol);
    Ok(DiagSet {
        format: "diagset".into(),
        plan: plan.clone(),
        grid,
        vectors,
        certificate,
    })
}

/// Node-wise checks of a vector family: Gram defect, diagonal residuals and
/// the completeness ledger.
#[allow(clippy::too_many_arguments)]
fn verify_diagset(
    inst: &ReservoirInstance,
    a: &OperatorPath,
    plan: &DiagonalPlan,
    grid: &[f64],
    vectors: &[VectorPath],
    steps: Vec<StepDistance>,
    eta_table: Vec<EtaRow>,
    stop: Option<String>,
    tol: &Tolerances,
) -> DiagCertificate {
    let n = vectors.len();
    let dim = inst.dim();
    let targets = plan.target_indices(dim);
    let scheduled: Vec<usize> = (1..=n).map(|k| index_map(k).0).filter(|&r| r <= targets.len()).collect();
    let r_max = scheduled.iter().copied().max().unwrap_or(0);
    let nodes: Vec<usize> = (0..grid.len()).collect();
    let per_node = par::map(&nodes, |&i| {
        let t = grid[i];
        let cols: Vec<&ComplexMatrix> = vectors.iter().map(|v| &v.values[i]).collect();
        let m = kernel::hstack(&cols);
        let gram = kernel::isometry_defect(&m);
        let res: Vec<f64> = vectors
            .iter()
            .zip(&plan.d_paths)
            .map(|(v, d)| (a.compress(t, &v.values[i])[(0, 0)] - d.eval(t)).norm())
            .collect();
        // dist²(y_m, span{v_1..v_K}) = 1 − Σ_{j≤K} |v_j[y_m]|² for coordinate targets
        let mut dist = vec![vec![0.0; n + 1]; r_max];
        for (mi, row) in dist.iter_mut().enumerate() {
            let coord = targets[mi];
            let mut acc = 1.0;
            row[0] = acc;
            for (j, v) in vectors.iter().enumerate() {
                acc -= v.values[i][(coord, 0)].norm_sqr();
                row[j + 1] = acc.max(0.0);
            }
        }
        let worst = if targets.len() == dim {
            (0..dim)
                .map(|coord| 1.0 - vectors.iter().map(|v| v.values[i][(coord, 0)].norm_sqr()).sum::<f64>())
                .fold(0.0, f64::max)
        } else {
            targets
                .iter()
                .map(|&coord| 1.0 - vectors.iter().map(|v| v.values[i][(coord, 0)].norm_sqr()).sum::<f64>())
                .fold(0.0, f64::max)
        };
        (gram, res, dist, worst)
    });
    let mut gram: f64 = 0.0;
    let mut residuals = vec![0.0_f64; n];
    let mut dist = vec![vec![0.0_f64; n + 1]; r_max];
    let mut worst: f64 = 0.0;
    for (g, res, dd, w) in per_node {
        gram = gram.max(g);
        for (acc, r) in residuals.iter_mut().zip(res) {
            *acc = acc.max(r);
        }
        for (row, drow) in dist.iter_mut().zip(dd) {
            for (x, y) in row.iter_mut().zip(drow) {
                *x = x.max(y);
            }
        }
        worst = worst.max(w);
    }
    let mut completeness = Vec::new();
    for (mi, row) in dist.iter().enumerate() {
        for (level, &d2) in row.iter().enumerate().skip(1) {
            completeness.push(CompletenessRow {
                target: targets[mi],
                m: mi + 1,
                level,
                dist2: d2,
                bound: completeness_bound(plan.eta, mi + 1, level),
            });
        }
    }
    let quotients = vectors.iter().map(|v| v.max_quotient()).collect();
    DiagCertificate {
        gram_defect: gram,
        residual: residuals.iter().copied().fold(0.0, f64::max),
        residuals,
        completeness,
        step_distances: steps,
        eta_table,
        quotients,
        max_target_dist2: worst,
        basis_complete: worst <= tol.span,
        budget_used: inst.used(),
        verified_nodes: grid.len(),
        partial: stop.is_some(),
        stop_reason: stop,
    }
}

/// Re-checks a stored diagset against the operator path.
pub fn recheck(inst: &ReservoirInstance, a: &OperatorPath, set: &DiagSet, tol: &Tolerances) -> DiagCertificate {
    let c = &set.certificate;
    verify_diagset(
        inst,
        a,
        &set.plan,
        &set.grid,
        &set.vectors,
        c.step_distances.clone(),
        c.eta_table.clone(),
        c.stop_reason.clone(),
        tol,
    )
}

/// Diagonals bounded by `sup_t ‖d(t)‖_∞` inside a region that contains the
/// disk of radius `sup ‖d‖_∞ + θ` around every drift value.
pub fn corollary_disk_diagonal(
    inst: &mut ReservoirInstance,
    a: &OperatorPath,
    d_paths: Vec<ScalarFn>,
    theta: f64,
    tol: &Tolerances,
) -> Result<DiagSet> {
    let sup = d_paths.iter().map(|d| d.sup_abs()).fold(0.0, f64::max);
    let plan = DiagonalPlan::new(d_paths, theta);
    for t in plan.grid(a) {
        let room = inst.region.signed_distance(-a.drift(t));
        if room < sup + theta {
            return Err(OpcError::MarginViolated(format!(
                "region reaches only {room:.4} around the origin at t = {t}; need sup|d| + theta = {:.4}",
                sup + theta
            )));
        }
    }
    let n = plan.d_paths.len();
    synthesize_basis(inst, a, &plan, n, tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::{gen_path, gen_reservoir, PathKind};
    use crate::numrange::GuaranteeRegion;

    fn roots(n: usize) -> Vec<C64> {
        (0..n)
            .map(|k| C64::from_polar(1.0, 2.0 * std::f64::consts::PI * k as f64 / n as f64))
            .collect()
    }

    fn tol() -> Tolerances {
        Tolerances::default()
    }

    fn demo(m: usize, radius: f64) -> (ReservoirInstance, OperatorPath) {
        let inst = gen_reservoir(&roots(8), m, GuaranteeRegion::disk(c(0., 0.), radius), 11).unwrap();
        let a = gen_path(&inst, &PathKind::Constant, uniform_grid(2), &tol()).unwrap();
        (inst, a)
    }

    #[test]
    fn dyadic_index_map() {
        assert_eq!(index_map(1), (1, 1));
        assert_eq!(index_map(2), (2, 1));
        assert_eq!(index_map(3), (1, 2));
        assert_eq!(index_map(12), (3, 2));
        for n in 1..2000 {
            let (r, s) = index_map(n);
            assert_eq!(index_inverse(r, s), n);
        }
    }

    #[test]
    fn eta_table_values() {
        assert!((eta_k(0.1, 1) - 0.1 / 2f64.sqrt()).abs() < 1e-16);
        assert!((eta_k(0.1, 2) - 0.1 / 2.0).abs() < 1e-16);
        assert!((eta_k(0.1, 3) - 0.1 / (2f64.sqrt() * 2f64.sqrt())).abs() < 1e-16);
        let e = 0.05;
        assert!(12.0 * (2.0 * delta_k(0.3, e) / 0.3).sqrt() <= e / 2.0 + 1e-16);
        assert!(default_eta(0.2) < 0.2f64.sqrt() / (2.0 * 2f64.sqrt()));
    }

    #[test]
    fn family_splits() {
        let (inst, _) = demo(4, 0.5);
        let fams = split_reservoirs(&inst, 2).unwrap();
        assert_eq!(fams.len(), 2);
        assert!(fams.iter().all(|f| f.dim() == 16));
        let (inst3, _) = demo(3, 0.5);
        let fams3 = split_reservoirs(&inst3, 3).unwrap();
        assert!(fams3.iter().all(|f| f.dim() == 8));
        assert!(matches!(split_reservoirs(&inst3, 4), Err(OpcError::TooManyFamilies { .. })));
        // each family realizes a region point on its own
        for f in inst.split_slots(2).unwrap() {
            let mut probe = inst.clone();
            let x = probe.realize_point(c(0.2, 0.1), &[], Some(&f)).unwrap();
            assert!((probe.matrix().adjoint().adjoint() * &x).dot(&x.conjugate()).norm() >= 0.0);
            let val = (x.adjoint() * probe.matrix() * &x)[(0, 0)];
            assert!((val - c(0.2, 0.1)).norm() < 1e-14);
        }
    }

    #[test]
    fn plane_weights_reproduce_points() {
        let anchors = roots(8);
        for &z in &[c(0.0, 0.0), c(0.5, 0.2), c(-0.3, -0.6), c(0.9, 0.0)] {
            let w = plane_weights(&anchors, z).unwrap();
            let sum: f64 = w.iter().map(|p| p.1).sum();
            let p: C64 = w.iter().map(|&(k, x)| anchors[k] * x).sum();
            assert!((sum - 1.0).abs() < 1e-14);
            assert!((p - z).norm() < 1e-14);
            assert!(w.iter().all(|p| p.1 > 0.0));
        }
        assert!(plane_weights(&anchors, c(1.0, 1.0)).is_err());
        let line = [c(0.0, 0.0), c(0.5, 0.0), c(1.0, 0.0)];
        let w = plane_weights(&line, c(0.3, 0.0)).unwrap();
        assert_eq!(w, vec![(0, 0.7), (2, 0.3)]);
    }

    fn perturbed(inst: &ReservoirInstance, a: &OperatorPath, d: &ScalarFn, grid: &[f64], off: f64) -> VectorPath {
        let fam = inst.split_slots(2).unwrap();
        let sd = seeds(inst, &fam[0], 99);
        let values = grid
            .iter()
            .map(|&t| realize_at(inst, a, t, d.eval(t) + off, &fam[0], &sd, &[], &tol()).unwrap())
            .collect();
        VectorPath {
            grid: grid.to_vec(),
            values,
        }
    }

    #[test]
    fn refinement_on_drift() {
        let inst = gen_reservoir(&roots(8), 16, GuaranteeRegion::disk(c(0., 0.), 0.6), 3).unwrap();
        let a = gen_path(
            &inst,
            &PathKind::Drift {
                c: ScalarFn::wave(c(0.05, 0.0), 1.0),
            },
            uniform_grid(2),
            &tol(),
        )
        .unwrap();
        let d = ScalarFn::affine(c(0.1, 0.0), c(0.05, 0.0));
        let grid = uniform_grid(33);
        let theta = 0.4;
        let v = perturbed(&inst, &a, &d, &grid, 0.1);
        let eps = v.residual(&a, &d);
        assert!((eps - 0.1).abs() < 1e-12);
        let fam = inst.split_slots(2).unwrap();
        let (w, rec) = refine_vector(&inst, &a, &d, &v, eps, theta, eps / 2.0, &fam[1], 5, &tol()).unwrap();
        assert!(rec.residual_after <= eps / 2.0);
        assert!(w.residual(&a, &d) <= 1e-12);
        assert!(rec.distance <= 3.0 * (eps / theta).sqrt() + 1e-12);
        // ε = θ/4 gives the bound 3/2
        assert!((rec.distance_bound - 1.5).abs() < 1e-12);
        assert!(matches!(
            refine_vector(&inst, &a, &d, &v, 0.5, theta, 0.1, &fam[1], 5, &tol()),
            Err(OpcError::EpsilonNotLessThanTheta { .. })
        ));
    }

    #[test]
    fn exact_vector_keeps_exact_input() {
        let (inst, a) = demo(8, 0.6);
        let d = ScalarFn::constant(c(0.2, -0.1));
        let grid = uniform_grid(9);
        let v = perturbed(&inst, &a, &d, &grid, 0.0);
        let fam = inst.split_slots(2).unwrap();
        let (u, rec) = exact_vector(&inst, &a, &d, &v, 0.3, 1e-12, &fam[1], 1, &tol()).unwrap();
        assert_eq!(u, v);
        assert!(rec.steps.is_empty());
        let off = perturbed(&inst, &a, &d, &grid, 0.075);
        let (u, rec) = exact_vector(&inst, &a, &d, &off, 0.3, 1e-12, &fam[1], 1, &tol()).unwrap();
        assert!(rec.residual <= 1e-12);
        assert!(rec.distance <= 12.0 * (0.075f64 / 0.3).sqrt());
        for s in &rec.steps {
            assert!(s.distance <= 3.0 * (s.eps / 0.3).sqrt() + 1e-12);
        }
        assert!(u.residual(&a, &d) <= 1e-12);
    }

    #[test]
    fn eight_vector_basis() {
        let (mut inst, a) = demo(64, 0.7);
        let d: Vec<ScalarFn> = (0..8)
            .map(|n| ScalarFn::constant(C64::from_polar(0.1 + 0.05 * (n % 4) as f64, n as f64)))
            .collect();
        let plan = DiagonalPlan::new(d, 0.2);
        let set = synthesize_basis(&mut inst, &a, &plan, 8, &tol()).unwrap();
        let cert = &set.certificate;
        assert!(!cert.partial);
        assert!(cert.gram_defect <= 1e-9, "{}", cert.gram_defect);
        assert!(cert.residual <= 1e-8);
        for row in &cert.completeness {
            assert!(row.dist2 <= row.bound * 1.05 + 1e-12, "{row:?}");
        }
        for w in cert.completeness.windows(2) {
            if w[0].m == w[1].m {
                assert!(w[1].dist2 <= w[0].dist2 + 1e-12);
            }
        }
        for s in &cert.step_distances {
            assert!(s.measured <= s.bound, "{s:?}");
        }
        let back = DiagSet::from_json(&set.to_json().unwrap()).unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn moving_diagonals_stay_exact() {
        let inst0 = gen_reservoir(&roots(8), 32, GuaranteeRegion::disk(c(0., 0.), 0.6), 5).unwrap();
        let a = gen_path(
            &inst0,
            &PathKind::Drift {
                c: ScalarFn::wave(c(0.05, 0.0), 1.0),
            },
            uniform_grid(2),
            &tol(),
        )
        .unwrap();
        let mut inst = inst0.clone();
        let d = vec![
            ScalarFn::wave(c(0.2, 0.0), 1.0),
            ScalarFn::affine(c(-0.1, 0.0), c(0.2, 0.1)),
            ScalarFn::constant(c(0.0, 0.15)),
        ];
        let plan = DiagonalPlan::new(d, 0.2);
        let set = synthesize_basis(&mut inst, &a, &plan, 3, &tol()).unwrap();
        assert!(set.certificate.residual <= 1e-12);
        assert!(set.certificate.gram_defect <= 1e-12);
        let q = set.certificate.quotients.iter().copied().fold(0.0, f64::max);
        assert!(q.is_finite() && q < 50.0, "{q}");
        let again = recheck(&inst, &a, &set, &tol());
        assert_eq!(again, set.certificate);
    }

    #[test]
    fn margin_and_disk_diagonal() {
        let (mut inst, a) = demo(16, 0.5);
        let plan = DiagonalPlan::new(vec![ScalarFn::constant(c(0.45, 0.0))], 0.1);
        assert!(matches!(
            synthesize_basis(&mut inst, &a, &plan, 1, &tol()),
            Err(OpcError::MarginViolated(_))
        ));
        let zero = vec![ScalarFn::zero(); 3];
        let set = corollary_disk_diagonal(&mut inst, &a, zero, 0.2, &tol()).unwrap();
        assert!(set.certificate.residual <= 1e-12);
        assert!(matches!(
            corollary_disk_diagonal(&mut inst, &a, vec![ScalarFn::constant(c(0.4, 0.0))], 0.2, &tol()),
            Err(OpcError::MarginViolated(_))
        ));
    }
}
