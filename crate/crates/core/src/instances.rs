//! Finite instances emulating operators with a prescribed essential
//! numerical range, plus the time-dependent operator and target paths built
//! on them.
//!
//! A [`ReservoirInstance`] is a diagonal matrix in which every anchor value
//! occupies `m` shuffled diagonal slots. Any point of the anchors' convex hull
//! is realized exactly by mixing eigenvectors of two or three anchors with
//! barycentric weights, and every realization permanently consumes one
//! direction per anchor it touches. Because the consumed directions are
//! eigenvectors, later realizations are orthogonal both to earlier vectors
//! and to their images under the matrix, with no extra bookkeeping.

use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{OpcError, Result};
use crate::kernel::{self, c, cmx_serde, cmx_vec_serde, ComplexMatrix, C64};
use crate::numrange::{convex_hull, polygon_signed_distance, GuaranteeRegion, RegionKind};
use crate::tol::Tolerances;

// ---------------------------------------------------------------------------
// scalar functions of t

/// Closed-form complex function on `[0, 1]` with exact derivative and
/// Lipschitz bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScalarFn {
    Const { value: C64 },
    /// `Σ coeffs[k] t^k`.
    Poly { coeffs: Vec<C64> },
    /// `amp · e^{i(2π freq t + phase)}`.
    Wave {
        amp: C64,
        freq: f64,
        #[serde(default)]
        phase: f64,
    },
    /// Piecewise linear through `(knots[i], values[i])`.
    Linear { knots: Vec<f64>, values: Vec<C64> },
    Sum { terms: Vec<ScalarFn> },
}

impl ScalarFn {
    pub fn constant(value: C64) -> Self {
        Self::Const { value }
    }

    pub fn zero() -> Self {
        Self::constant(c(0.0, 0.0))
    }

    /// `a + b t`.
    pub fn affine(a: C64, b: C64) -> Self {
        Self::Poly { coeffs: vec![a, b] }
    }

    pub fn wave(amp: C64, freq: f64) -> Self {
        Self::Wave { amp, freq, phase: 0.0 }
    }

    fn linear_cell(knots: &[f64], t: f64) -> usize {
        let n = knots.len();
        match knots.iter().position(|&k| k > t) {
            Some(0) => 0,
            Some(i) => (i - 1).min(n - 2),
            None => n - 2,
        }
    }

    pub fn eval(&self, t: f64) -> C64 {
        match self {
            Self::Const { value } => *value,
            Self::Poly { coeffs } => coeffs.iter().rev().fold(c(0.0, 0.0), |acc, &k| acc * t + k),
            Self::Wave { amp, freq, phase } => amp * C64::from_polar(1.0, 2.0 * std::f64::consts::PI * freq * t + phase),
            Self::Linear { knots, values } => {
                if knots.len() == 1 {
                    return values[0];
                }
                let i = Self::linear_cell(knots, t);
                let s = (t - knots[i]) / (knots[i + 1] - knots[i]);
                values[i] * (1.0 - s) + values[i + 1] * s
            }
            Self::Sum { terms } => terms.iter().map(|f| f.eval(t)).sum(),
        }
    }

    pub fn deriv(&self, t: f64) -> C64 {
        match self {
            Self::Const { .. } => c(0.0, 0.0),
            Self::Poly { coeffs } => coeffs
                .iter()
                .enumerate()
                .skip(1)
                .rev()
                .fold(c(0.0, 0.0), |acc, (k, &ck)| acc * t + ck * k as f64),
            Self::Wave { freq, .. } => self.eval(t) * c(0.0, 2.0 * std::f64::consts::PI * freq),
            Self::Linear { knots, values } => {
                if knots.len() == 1 {
                    return c(0.0, 0.0);
                }
                let i = Self::linear_cell(knots, t);
                (values[i + 1] - values[i]) / (knots[i + 1] - knots[i])
            }
            Self::Sum { terms } => terms.iter().map(|f| f.deriv(t)).sum(),
        }
    }

    /// Upper bound for `sup |f'|` on `[0, 1]`.
    pub fn lip(&self) -> f64 {
        match self {
            Self::Const { .. } => 0.0,
            Self::Poly { coeffs } => coeffs.iter().enumerate().map(|(k, ck)| k as f64 * ck.norm()).sum(),
            Self::Wave { amp, freq, .. } => amp.norm() * 2.0 * std::f64::consts::PI * freq.abs(),
            Self::Linear { knots, values } => knots
                .windows(2)
                .zip(values.windows(2))
                .map(|(k, v)| (v[1] - v[0]).norm() / (k[1] - k[0]))
                .fold(0.0, f64::max),
            Self::Sum { terms } => terms.iter().map(ScalarFn::lip).sum(),
        }
    }

    /// Upper bound for `sup |f|` on `[0, 1]`.
    pub fn sup_abs(&self) -> f64 {
        match self {
            Self::Const { value } => value.norm(),
            Self::Poly { coeffs } => coeffs.iter().map(|k| k.norm()).sum(),
            Self::Wave { amp, .. } => amp.norm(),
            Self::Linear { values, .. } => values.iter().map(|v| v.norm()).fold(0.0, f64::max),
            Self::Sum { terms } => terms.iter().map(ScalarFn::sup_abs).sum(),
        }
    }

    pub fn is_constant(&self) -> bool {
        self.lip() == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Linear { knots, values } => {
                if knots.is_empty() || knots.len() != values.len() {
                    return Err(OpcError::Invalid("linear function needs matching knots/values".into()));
                }
                if knots.windows(2).any(|w| !(w[1] > w[0])) {
                    return Err(OpcError::Invalid("linear knots must increase".into()));
                }
            }
            Self::Wave { freq, phase, .. } if !(freq.is_finite() && phase.is_finite()) => {
                return Err(OpcError::Invalid("wave parameters must be finite".into()));
            }
            Self::Sum { terms } => {
                for f in terms {
                    f.validate()?;
                }
            }
            _ => {}
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// target paths

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetTerm {
    pub coeff: ScalarFn,
    #[serde(with = "cmx_serde")]
    pub matrix: ComplexMatrix,
}

/// Small-matrix target `D(t) = Σ φ_i(t) C_i`; scalar targets are the 1×1
/// case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetPath {
    pub dim: usize,
    pub terms: Vec<TargetTerm>,
}

impl TargetPath {
    pub fn new(dim: usize, terms: Vec<TargetTerm>) -> Result<Self> {
        for term in &terms {
            if term.matrix.nrows() != dim || term.matrix.ncols() != dim {
                return Err(OpcError::DimensionMismatch(format!(
                    "target term {}x{} in a {dim}-dimensional target",
                    term.matrix.nrows(),
                    term.matrix.ncols()
                )));
            }
            term.coeff.validate()?;
        }
        Ok(Self { dim, terms })
    }

    pub fn constant(d: ComplexMatrix) -> Self {
        Self {
            dim: d.nrows(),
            terms: vec![TargetTerm {
                coeff: ScalarFn::constant(c(1.0, 0.0)),
                matrix: d,
            }],
        }
    }

    /// Scalar target `d(t)`.
    pub fn scalar(f: ScalarFn) -> Self {
        Self {
            dim: 1,
            terms: vec![TargetTerm {
                coeff: f,
                matrix: ComplexMatrix::identity(1, 1),
            }],
        }
    }

    /// `φ(t) · C`.
    pub fn single(f: ScalarFn, matrix: ComplexMatrix) -> Self {
        Self {
            dim: matrix.nrows(),
            terms: vec![TargetTerm { coeff: f, matrix }],
        }
    }

    pub fn eval(&self, t: f64) -> ComplexMatrix {
        let mut out = ComplexMatrix::zeros(self.dim, self.dim);
        for term in &self.terms {
            out += &term.matrix * term.coeff.eval(t);
        }
        out
    }

    pub fn deriv(&self, t: f64) -> ComplexMatrix {
        let mut out = ComplexMatrix::zeros(self.dim, self.dim);
        for term in &self.terms {
            out += &term.matrix * term.coeff.deriv(t);
        }
        out
    }

    /// Declared Lipschitz constant in operator norm.
    pub fn lip(&self) -> f64 {
        self.terms.iter().map(|t| t.coeff.lip() * kernel::op_norm(&t.matrix)).sum()
    }

    pub fn is_constant(&self) -> bool {
        self.lip() == 0.0
    }

    /// Upper bound for `max_t ‖D(t)‖`, exact for single-term targets with
    /// constant-modulus coefficients.
    pub fn max_norm_bound(&self) -> f64 {
        let coarse: f64 = self.terms.iter().map(|t| t.coeff.sup_abs() * kernel::op_norm(&t.matrix)).sum();
        if self.terms.len() <= 1 {
            return coarse;
        }
        let n = 2048;
        let sampled = (0..=n)
            .map(|i| kernel::op_norm(&self.eval(i as f64 / n as f64)))
            .fold(0.0, f64::max);
        coarse.min(sampled + self.lip() * 0.5 / n as f64)
    }

    /// `s · D`.
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            dim: self.dim,
            terms: self
                .terms
                .iter()
                .map(|t| TargetTerm {
                    coeff: t.coeff.clone(),
                    matrix: &t.matrix * c(s, 0.0),
                })
                .collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// reservoir instances

/// Reproducible description of a reservoir instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceSpec {
    pub anchors: Vec<C64>,
    pub multiplicity: usize,
    pub region: GuaranteeRegion,
    #[serde(default)]
    pub seed: u64,
}

/// Restriction of each anchor's eigenspace to a subset of its slots
/// (indices `0..m` local to the anchor).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotFamily {
    pub allowed: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct ReservoirInstance {
    pub anchors: Vec<C64>,
    pub multiplicity: usize,
    pub region: GuaranteeRegion,
    pub seed: u64,
    /// Anchor index of each diagonal position.
    slot_anchor: Vec<usize>,
    /// Diagonal positions of each anchor, in slot order.
    slots: Vec<Vec<usize>>,
    /// Consumed directions per anchor, as orthonormal vectors in slot
    /// coordinates.
    ledger: Vec<Vec<ComplexMatrix>>,
}

/// Checks `region ⊕ margin ⊆ conv(anchors)`.
fn check_coverage(anchors: &[C64], region: &GuaranteeRegion) -> Result<()> {
    let m = region.margin;
    let scale = anchors.iter().map(|a| a.norm()).fold(1.0, f64::max);
    let slack = 1e-12 * scale;
    if let RegionKind::Interval { a, b } = region.kind {
        if anchors.iter().any(|z| z.im.abs() > slack) {
            return Err(OpcError::RegionNotCovered("interval regions need real anchors".into()));
        }
        let lo = anchors.iter().map(|z| z.re).fold(f64::INFINITY, f64::min);
        let hi = anchors.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
        if a - m < lo - slack || b + m > hi + slack {
            return Err(OpcError::RegionNotCovered(format!(
                "[{}, {}] with margin {m} not inside [{lo}, {hi}]",
                a, b
            )));
        }
        return Ok(());
    }
    let hull = convex_hull(anchors);
    if hull.len() < 3 {
        return Err(OpcError::RegionNotCovered("anchors span no planar region".into()));
    }
    match &region.kind {
        RegionKind::Disk { center, radius } => {
            let d = polygon_signed_distance(&hull, *center);
            if d + slack < radius + m {
                return Err(OpcError::RegionNotCovered(format!(
                    "disk of radius {radius} plus margin {m} exceeds anchor hull (center depth {d})"
                )));
            }
        }
        RegionKind::Polygon { vertices } => {
            for v in vertices {
                if polygon_signed_distance(&hull, *v) + slack < m {
                    return Err(OpcError::RegionNotCovered(format!("vertex {v} too close to anchor hull")));
                }
            }
        }
        RegionKind::Interval { .. } => unreachable!(),
    }
    Ok(())
}

/// Builds a diagonal instance with `m` slots per anchor, slot positions
/// shuffled by `seed`.
pub fn gen_reservoir(anchors: &[C64], m: usize, region: GuaranteeRegion, seed: u64) -> Result<ReservoirInstance> {
    if anchors.is_empty() || m == 0 {
        return Err(OpcError::Invalid("need at least one anchor and multiplicity >= 1".into()));
    }
    for (i, a) in anchors.iter().enumerate() {
        if !(a.re.is_finite() && a.im.is_finite()) {
            return Err(OpcError::Invalid(format!("anchor {i} is not finite")));
        }
        if anchors[..i].iter().any(|b| b == a) {
            return Err(OpcError::Invalid(format!("anchor {a} repeated")));
        }
    }
    region.validate()?;
    check_coverage(anchors, &region)?;
    let mut slot_anchor: Vec<usize> = (0..anchors.len()).flat_map(|k| std::iter::repeat_n(k, m)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    slot_anchor.shuffle(&mut rng);
    let mut slots = vec![Vec::with_capacity(m); anchors.len()];
    for (pos, &k) in slot_anchor.iter().enumerate() {
        slots[k].push(pos);
    }
    Ok(ReservoirInstance {
        anchors: anchors.to_vec(),
        multiplicity: m,
        region,
        seed,
        slot_anchor,
        slots,
        ledger: vec![Vec::new(); anchors.len()],
    })
}

pub fn gen_from_spec(spec: &InstanceSpec) -> Result<ReservoirInstance> {
    gen_reservoir(&spec.anchors, spec.multiplicity, spec.region.clone(), spec.seed)
}

/// Barycentric weights of `λ` in one simplex of anchors, as `(anchor, β)`.
pub type Weights = Vec<(usize, f64)>;

impl ReservoirInstance {
    pub fn spec(&self) -> InstanceSpec {
        InstanceSpec {
            anchors: self.anchors.clone(),
            multiplicity: self.multiplicity,
            region: self.region.clone(),
            seed: self.seed,
        }
    }

    pub fn dim(&self) -> usize {
        self.slot_anchor.len()
    }

    pub fn diagonal(&self) -> Vec<C64> {
        self.slot_anchor.iter().map(|&k| self.anchors[k]).collect()
    }

    pub fn matrix(&self) -> ComplexMatrix {
        kernel::diag(&self.diagonal())
    }

    pub fn slot_anchor(&self) -> &[usize] {
        &self.slot_anchor
    }

    /// Diagonal positions carrying anchor `k`.
    pub fn anchor_positions(&self, k: usize) -> &[usize] {
        &self.slots[k]
    }

    /// Consumed dimensions per anchor.
    pub fn used(&self) -> Vec<usize> {
        self.ledger.iter().map(Vec::len).collect()
    }

    pub fn remaining(&self, k: usize) -> usize {
        self.multiplicity - self.ledger[k].len()
    }

    /// Forgets all consumption.
    pub fn reset_budget(&mut self) {
        for l in &mut self.ledger {
            l.clear();
        }
    }

    pub fn is_selfadjoint(&self) -> bool {
        self.anchors.iter().all(|a| a.im == 0.0)
    }

    fn family_capacity(&self, k: usize, family: Option<&SlotFamily>) -> usize {
        match family {
            None => self.remaining(k),
            Some(f) => {
                let allowed = &f.allowed[k];
                let taken = self.ledger[k]
                    .iter()
                    .filter(|z| allowed.iter().any(|&i| z[(i, 0)].norm() > 1e-12))
                    .count();
                allowed.len().saturating_sub(taken)
            }
        }
    }

    /// All simplices (points, segments, triangles) of anchors containing
    /// `λ`, best first: most remaining capacity, then fewest anchors, then
    /// largest smallest weight.
    pub fn barycentric_candidates(&self, lambda: C64, family: Option<&SlotFamily>) -> Vec<Weights> {
        let a = &self.anchors;
        let n = a.len();
        let scale = a.iter().map(|z| z.norm()).fold(1.0, f64::max);
        let eps = 1e-12 * scale;
        let mut out: Vec<Weights> = Vec::new();
        for i in 0..n {
            if (a[i] - lambda).norm() <= eps {
                out.push(vec![(i, 1.0)]);
            }
        }
        for i in 0..n {
            for j in i + 1..n {
                let e = a[j] - a[i];
                let w = lambda - a[i];
                let len2 = e.norm_sqr();
                let s = (w * e.conj()).re / len2;
                let off = (w.re * e.im - w.im * e.re).abs() / len2.sqrt();
                if off <= eps && s > 0.0 && s < 1.0 {
                    out.push(vec![(i, 1.0 - s), (j, s)]);
                }
            }
        }
        for i in 0..n {
            for j in i + 1..n {
                for k in j + 1..n {
                    let (p, q, r) = (a[i], a[j], a[k]);
                    let det = (q - p).re * (r - p).im - (q - p).im * (r - p).re;
                    if det.abs() <= 1e-12 * scale * scale {
                        continue;
                    }
                    let w = lambda - p;
                    let bq = (w.re * (r - p).im - w.im * (r - p).re) / det;
                    let br = ((q - p).re * w.im - (q - p).im * w.re) / det;
                    let bp = 1.0 - bq - br;
                    let floor = -1e-13;
                    if bp < floor || bq < floor || br < floor {
                        continue;
                    }
                    let ws = [(i, bp.max(0.0)), (j, bq.max(0.0)), (k, br.max(0.0))];
                    if ws.iter().any(|w| w.1 <= 1e-15) {
                        // lies on an edge: already covered by the pair list
                        continue;
                    }
                    let total: f64 = ws.iter().map(|w| w.1).sum();
                    out.push(ws.iter().map(|&(k, b)| (k, b / total)).collect());
                }
            }
        }
        let score = |w: &Weights| -> (usize, usize, f64) {
            let cap = w.iter().map(|&(k, _)| self.family_capacity(k, family)).min().unwrap_or(0);
            let minw = w.iter().map(|x| x.1).fold(f64::INFINITY, f64::min);
            (cap, w.len(), minw)
        };
        let mut scored: Vec<(usize, (usize, usize, f64), Weights)> =
            out.into_iter().enumerate().map(|(i, w)| (i, score(&w), w)).collect();
        scored.sort_by(|x, y| {
            y.1 .0
                .cmp(&x.1 .0)
                .then(x.1 .1.cmp(&y.1 .1))
                .then(y.1 .2.total_cmp(&x.1 .2))
                .then(x.0.cmp(&y.0))
        });
        scored.into_iter().filter(|s| s.1 .0 > 0).map(|s| s.2).collect()
    }

    /// Fresh unit vector (slot coordinates) in anchor `k`'s eigenspace,
    /// orthogonal to the ledger and to the forbidden vectors.
    fn fresh_direction(&self, k: usize, forbidden: &[ComplexMatrix], family: Option<&SlotFamily>) -> Option<ComplexMatrix> {
        let m = self.multiplicity;
        let slots = &self.slots[k];
        let allowed: Vec<usize> = match family {
            Some(f) => f.allowed[k].clone(),
            None => (0..m).collect(),
        };
        let r = allowed.len();
        if r == 0 {
            return None;
        }
        let mut constraints: Vec<ComplexMatrix> = Vec::with_capacity(self.ledger[k].len() + forbidden.len());
        for z in &self.ledger[k] {
            constraints.push(ComplexMatrix::from_fn(r, 1, |i, _| z[(allowed[i], 0)]));
        }
        for f in forbidden {
            constraints.push(ComplexMatrix::from_fn(r, 1, |i, _| f[(slots[allowed[i]], 0)]));
        }
        let basis: Vec<ComplexMatrix> = if constraints.is_empty() {
            Vec::new()
        } else {
            let refs: Vec<&ComplexMatrix> = constraints.iter().collect();
            let q = kernel::orthonormalize(&kernel::hstack(&refs), 1e-10);
            (0..q.ncols()).map(|j| kernel::column(&q, j)).collect()
        };
        if basis.len() >= r {
            return None;
        }
        let mut best: Option<(f64, ComplexMatrix)> = None;
        for i in 0..r {
            let mut v = ComplexMatrix::zeros(r, 1);
            v[(i, 0)] = c(1.0, 0.0);
            for _ in 0..2 {
                for b in &basis {
                    let p = kernel::inner(b, &v);
                    v -= b * p;
                }
            }
            let norm = v.norm();
            if norm >= 0.5 {
                best = Some((norm, v));
                break;
            }
            if best.as_ref().is_none_or(|(bn, _)| norm > *bn) {
                best = Some((norm, v));
            }
        }
        let (norm, v) = best?;
        if norm < 1e-6 {
            return None;
        }
        let v = v / c(norm, 0.0);
        let mut z = ComplexMatrix::zeros(m, 1);
        for (i, &a) in allowed.iter().enumerate() {
            z[(a, 0)] = v[(i, 0)];
        }
        Some(z)
    }

    fn embed(&self, k: usize, z: &ComplexMatrix) -> ComplexMatrix {
        let mut x = ComplexMatrix::zeros(self.dim(), 1);
        for (i, &pos) in self.slots[k].iter().enumerate() {
            x[(pos, 0)] = z[(i, 0)];
        }
        x
    }

    /// `x = Σ √β_k z_k` for the given weights, consuming one direction per
    /// anchor. Fails (without consuming anything) when some anchor has no
    /// admissible direction left.
    pub fn realize_weights(
        &mut self,
        weights: &[(usize, f64)],
        forbidden: &[ComplexMatrix],
        family: Option<&SlotFamily>,
    ) -> std::result::Result<ComplexMatrix, usize> {
        let mut picks = Vec::with_capacity(weights.len());
        for &(k, _) in weights {
            match self.fresh_direction(k, forbidden, family) {
                Some(z) => picks.push(z),
                None => return Err(k),
            }
        }
        let mut x = ComplexMatrix::zeros(self.dim(), 1);
        for (&(k, beta), z) in weights.iter().zip(picks) {
            x += self.embed(k, &z) * c(beta.sqrt(), 0.0);
            self.ledger[k].push(z);
        }
        Ok(x)
    }

    /// Unit vector with `x* M x = λ` exactly, for any `λ` in the anchor hull.
    pub fn realize_point(
        &mut self,
        lambda: C64,
        forbidden: &[ComplexMatrix],
        family: Option<&SlotFamily>,
    ) -> Result<ComplexMatrix> {
        let candidates = self.barycentric_candidates(lambda, family);
        if candidates.is_empty() {
            let hull = convex_hull(&self.anchors);
            let inside = hull.len() >= 3 && polygon_signed_distance(&hull, lambda) >= -1e-12;
            let starved = (0..self.anchors.len())
                .min_by_key(|&k| self.family_capacity(k, family))
                .unwrap_or(0);
            if inside || self.barycentric_candidates_any(lambda) {
                return Err(OpcError::RoomExhausted {
                    anchor: starved,
                    capacity: self.multiplicity,
                    context: format!("no anchor simplex with remaining room contains {lambda}"),
                });
            }
            return Err(OpcError::NotInside(lambda));
        }
        let mut last = 0;
        for w in &candidates {
            match self.realize_weights(w, forbidden, family) {
                Ok(x) => return Ok(x),
                Err(k) => last = k,
            }
        }
        Err(OpcError::RoomExhausted {
            anchor: last,
            capacity: self.multiplicity,
            context: format!("realizing {lambda} against {} forbidden vectors", forbidden.len()),
        })
    }

    fn barycentric_candidates_any(&self, lambda: C64) -> bool {
        let mut fresh = self.clone();
        fresh.reset_budget();
        !fresh.barycentric_candidates(lambda, None).is_empty()
    }

    /// Fresh eigenvector of anchor `k`.
    pub fn allocate_eigvec(&mut self, k: usize, forbidden: &[ComplexMatrix], family: Option<&SlotFamily>) -> Result<ComplexMatrix> {
        self.realize_weights(&[(k, 1.0)], forbidden, family)
            .map_err(|k| OpcError::RoomExhausted {
                anchor: k,
                capacity: self.multiplicity,
                context: "allocating an eigenvector".into(),
            })
    }

    /// Partitions every anchor's slots into `n` disjoint families.
    pub fn split_slots(&self, n: usize) -> Result<Vec<SlotFamily>> {
        if n == 0 || n > self.multiplicity {
            return Err(OpcError::TooManyFamilies {
                families: n,
                multiplicity: self.multiplicity,
            });
        }
        let m = self.multiplicity;
        Ok((0..n)
            .map(|f| SlotFamily {
                allowed: (0..self.anchors.len())
                    .map(|_| (0..m).filter(|i| i % n == f).collect())
                    .collect(),
            })
            .collect())
    }
}

/// Unit vector `x ⊥ forbidden` with `x*Mx = λ` exactly; the chosen
/// eigen-directions are recorded in the instance ledger.
pub fn realize_in_reservoir(inst: &mut ReservoirInstance, lambda: C64, forbidden: &[ComplexMatrix]) -> Result<ComplexMatrix> {
    let scale = inst.region.outer_radius().max(1.0);
    if inst.region.signed_distance(lambda) < -1e-12 * scale {
        return Err(OpcError::NotInside(lambda));
    }
    inst.realize_point(lambda, forbidden, None)
}

// ---------------------------------------------------------------------------
// operator paths

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaseOperator {
    Diagonal { entries: Vec<C64> },
    Dense {
        #[serde(with = "cmx_serde")]
        matrix: ComplexMatrix,
    },
}

impl BaseOperator {
    pub fn dim(&self) -> usize {
        match self {
            Self::Diagonal { entries } => entries.len(),
            Self::Dense { matrix } => matrix.nrows(),
        }
    }

    pub fn apply(&self, x: &ComplexMatrix) -> ComplexMatrix {
        match self {
            Self::Diagonal { entries } => ComplexMatrix::from_fn(x.nrows(), x.ncols(), |r, k| entries[r] * x[(r, k)]),
            Self::Dense { matrix } => matrix * x,
        }
    }

    pub fn apply_adjoint(&self, x: &ComplexMatrix) -> ComplexMatrix {
        match self {
            Self::Diagonal { entries } => {
                ComplexMatrix::from_fn(x.nrows(), x.ncols(), |r, k| entries[r].conj() * x[(r, k)])
            }
            Self::Dense { matrix } => matrix.ad_mul(x),
        }
    }

    pub fn to_dense(&self) -> ComplexMatrix {
        match self {
            Self::Diagonal { entries } => kernel::diag(entries),
            Self::Dense { matrix } => matrix.clone(),
        }
    }

    pub fn norm(&self) -> f64 {
        match self {
            Self::Diagonal { entries } => entries.iter().map(|z| z.norm()).fold(0.0, f64::max),
            Self::Dense { matrix } => kernel::op_norm(matrix),
        }
    }
}

/// Time dependence of an operator path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Motion {
    Constant,
    /// `A(t) = B + c(t) I`.
    Drift { c: ScalarFn },
    /// `A(t) = e^{tK} (B + c(t) I) e^{-tK}` with `K` skew-Hermitian.
    Rotation {
        #[serde(with = "cmx_serde")]
        generator: ComplexMatrix,
        drift: ScalarFn,
    },
    /// Piecewise-linear interpolation of dense samples on the path grid.
    Sampled {
        #[serde(with = "cmx_vec_serde")]
        values: Vec<ComplexMatrix>,
    },
}

/// How `A(t)` was produced; selects the generation routine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PathKind {
    Constant,
    Drift { c: ScalarFn },
    Rotation {
        #[serde(with = "cmx_serde")]
        generator: ComplexMatrix,
        #[serde(default = "ScalarFn::zero")]
        drift: ScalarFn,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OperatorPath {
    pub base: BaseOperator,
    pub motion: Motion,
    pub lip_a: f64,
    pub grid: Vec<f64>,
    /// Eigendecomposition of `-iK` for rotations.
    #[serde(skip)]
    rotation: OnceLock<(Vec<f64>, ComplexMatrix)>,
}

impl PartialEq for OperatorPath {
    fn eq(&self, other: &Self) -> bool {
        self.base == other.base && self.motion == other.motion && self.lip_a == other.lip_a && self.grid == other.grid
    }
}

/// One term `g(t) B` of an affine decomposition of `A` on a time cell, with
/// bounds for `|g|` and `|g'|` on the cell.
#[derive(Debug, Clone)]
pub struct AffineTerm {
    pub g_sup: f64,
    pub dg_sup: f64,
    pub op: TermOp,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TermOp {
    Base,
    Identity,
    Sample(usize),
}

pub fn uniform_grid(points: usize) -> Vec<f64> {
    let n = points.max(2) - 1;
    (0..=n).map(|i| i as f64 / n as f64).collect()
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.len() < 2 || grid[0] != 0.0 || *grid.last().unwrap() != 1.0 || grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(OpcError::Invalid("grid must increase from 0 to 1".into()));
    }
    Ok(())
}

impl OperatorPath {
    fn assemble(base: BaseOperator, motion: Motion, lip_a: f64, grid: Vec<f64>) -> Self {
        Self {
            base,
            motion,
            lip_a,
            grid,
            rotation: OnceLock::new(),
        }
    }

    /// Dense samples on `grid`, linearly interpolated. The declared `lip_a`
    /// is checked on adjacent pairs.
    pub fn from_samples(grid: Vec<f64>, values: Vec<ComplexMatrix>, lip_a: f64, tol: &Tolerances) -> Result<Self> {
        check_grid(&grid)?;
        if values.len() != grid.len() {
            return Err(OpcError::DimensionMismatch(format!("{} samples on {} grid points", values.len(), grid.len())));
        }
        let n = kernel::ensure_square(&values[0])?;
        for v in &values {
            if v.nrows() != n || v.ncols() != n {
                return Err(OpcError::DimensionMismatch("samples differ in shape".into()));
            }
        }
        let base = BaseOperator::Dense { matrix: values[0].clone() };
        let path = Self::assemble(base, Motion::Sampled { values }, lip_a, grid);
        let ratio = path.measured_lipschitz();
        if ratio > lip_a + tol.recon * (1.0 + lip_a) {
            return Err(OpcError::Invalid(format!(
                "declared lip_a {lip_a} below sampled difference quotient {ratio}"
            )));
        }
        Ok(path)
    }

    /// Constant path on an arbitrary dense matrix.
    pub fn constant_dense(matrix: ComplexMatrix) -> Self {
        Self::assemble(BaseOperator::Dense { matrix }, Motion::Constant, 0.0, vec![0.0, 1.0])
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    /// Reservoir-backed paths realize targets exactly from the ledger.
    pub fn is_reservoir(&self) -> bool {
        matches!(self.base, BaseOperator::Diagonal { .. }) && !matches!(self.motion, Motion::Sampled { .. })
    }

    pub fn is_rotation(&self) -> bool {
        matches!(self.motion, Motion::Rotation { .. })
    }

    /// Scalar drift `c(t)`.
    pub fn drift(&self, t: f64) -> C64 {
        match &self.motion {
            Motion::Drift { c } => c.eval(t),
            Motion::Rotation { drift, .. } => drift.eval(t),
            _ => c(0.0, 0.0),
        }
    }

    fn rotation_data(&self) -> Option<&(Vec<f64>, ComplexMatrix)> {
        match &self.motion {
            Motion::Rotation { generator, .. } => Some(self.rotation.get_or_init(|| {
                let h = generator * c(0.0, -1.0);
                kernel::hermitian_eig(&kernel::re_part(&h), &Tolerances::default())
                    .expect("generator eigendecomposition")
            })),
            _ => None,
        }
    }

    /// `e^{tK} x` (identity unless rotating).
    pub fn from_base(&self, t: f64, x: &ComplexMatrix) -> ComplexMatrix {
        match self.rotation_data() {
            Some((h, p)) => {
                let mut y = p.ad_mul(x);
                for (r, &hr) in h.iter().enumerate() {
                    let ph = C64::from_polar(1.0, t * hr);
                    for k in 0..y.ncols() {
                        y[(r, k)] *= ph;
                    }
                }
                p * y
            }
            None => x.clone(),
        }
    }

    /// `e^{-tK} x`.
    pub fn to_base(&self, t: f64, x: &ComplexMatrix) -> ComplexMatrix {
        match self.rotation_data() {
            Some(_) => self.from_base(-t, x),
            None => x.clone(),
        }
    }

    fn sample_cell(&self, t: f64) -> (usize, f64) {
        let g = &self.grid;
        let i = match g.iter().position(|&k| k > t) {
            Some(0) => 0,
            Some(i) => (i - 1).min(g.len() - 2),
            None => g.len() - 2,
        };
        (i, ((t - g[i]) / (g[i + 1] - g[i])).clamp(0.0, 1.0))
    }

    /// `A(t) x`.
    pub fn apply(&self, t: f64, x: &ComplexMatrix) -> ComplexMatrix {
        match &self.motion {
            Motion::Constant => self.base.apply(x),
            Motion::Drift { c } => self.base.apply(x) + x * c.eval(t),
            Motion::Rotation { drift, .. } => {
                let y = self.to_base(t, x);
                let z = self.base.apply(&y) + &y * drift.eval(t);
                self.from_base(t, &z)
            }
            Motion::Sampled { values } => {
                let (i, s) = self.sample_cell(t);
                &values[i] * x * c(1.0 - s, 0.0) + &values[i + 1] * x * c(s, 0.0)
            }
        }
    }

    /// `A(t)* x`.
    pub fn apply_adjoint(&self, t: f64, x: &ComplexMatrix) -> ComplexMatrix {
        match &self.motion {
            Motion::Constant => self.base.apply_adjoint(x),
            Motion::Drift { c } => self.base.apply_adjoint(x) + x * c.eval(t).conj(),
            Motion::Rotation { drift, .. } => {
                let y = self.to_base(t, x);
                let z = self.base.apply_adjoint(&y) + &y * drift.eval(t).conj();
                self.from_base(t, &z)
            }
            Motion::Sampled { values } => {
                let (i, s) = self.sample_cell(t);
                values[i].adjoint() * x * c(1.0 - s, 0.0) + values[i + 1].adjoint() * x * c(s, 0.0)
            }
        }
    }

    /// Dense `A(t)`.
    pub fn eval(&self, t: f64) -> ComplexMatrix {
        self.apply(t, &ComplexMatrix::identity(self.dim(), self.dim()))
    }

    /// `V* A(t) V`.
    pub fn compress(&self, t: f64, v: &ComplexMatrix) -> ComplexMatrix {
        v.ad_mul(&self.apply(t, v))
    }

    /// Upper bound for `sup_t ‖A(t)‖`.
    pub fn norm_bound(&self) -> f64 {
        match &self.motion {
            Motion::Constant => self.base.norm(),
            Motion::Drift { c } | Motion::Rotation { drift: c, .. } => self.base.norm() + c.sup_abs(),
            Motion::Sampled { values } => values.iter().map(kernel::op_norm).fold(0.0, f64::max),
        }
    }

    /// Largest difference quotient `‖A(t_{i+1}) − A(t_i)‖ / Δt` on the grid.
    pub fn measured_lipschitz(&self) -> f64 {
        self.grid
            .windows(2)
            .map(|w| kernel::op_norm(&(self.eval(w[1]) - self.eval(w[0]))) / (w[1] - w[0]))
            .fold(0.0, f64::max)
    }

    /// Affine decomposition `A(t) = Σ g_m(t) B_m` valid on `[t0, t1]`, or
    /// `None` for rotations. `[t0, t1]` must not straddle a sample node.
    pub fn affine_terms(&self, t0: f64, t1: f64) -> Option<Vec<AffineTerm>> {
        match &self.motion {
            Motion::Constant => Some(vec![AffineTerm {
                g_sup: 1.0,
                dg_sup: 0.0,
                op: TermOp::Base,
            }]),
            Motion::Drift { c } => {
                let sup = c.sup_abs().min(cell_sup(c, t0, t1));
                Some(vec![
                    AffineTerm {
                        g_sup: 1.0,
                        dg_sup: 0.0,
                        op: TermOp::Base,
                    },
                    AffineTerm {
                        g_sup: sup,
                        dg_sup: c.lip(),
                        op: TermOp::Identity,
                    },
                ])
            }
            Motion::Rotation { .. } => None,
            Motion::Sampled { .. } => {
                let (i, _) = self.sample_cell(0.5 * (t0 + t1));
                let rate = 1.0 / (self.grid[i + 1] - self.grid[i]);
                Some(vec![
                    AffineTerm {
                        g_sup: 1.0,
                        dg_sup: rate,
                        op: TermOp::Sample(i),
                    },
                    AffineTerm {
                        g_sup: 1.0,
                        dg_sup: rate,
                        op: TermOp::Sample(i + 1),
                    },
                ])
            }
        }
    }

    /// Applies one affine-term operator.
    pub fn apply_term(&self, op: TermOp, x: &ComplexMatrix) -> ComplexMatrix {
        match (op, &self.motion) {
            (TermOp::Base, _) => self.base.apply(x),
            (TermOp::Identity, _) => x.clone(),
            (TermOp::Sample(i), Motion::Sampled { values }) => &values[i] * x,
            (TermOp::Sample(_), _) => unreachable!("sample term on an analytic path"),
        }
    }

    /// Breakpoints where the path is not smooth.
    pub fn breakpoints(&self) -> Vec<f64> {
        match &self.motion {
            Motion::Sampled { .. } => self.grid.clone(),
            Motion::Drift { c: ScalarFn::Linear { knots, .. } } => knots.clone(),
            _ => vec![0.0, 1.0],
        }
    }

    pub fn is_selfadjoint_at(&self, t: f64, tol: &Tolerances) -> bool {
        let a = self.eval(t);
        kernel::hermitian_defect(&a) <= tol.herm
    }
}

/// `sup |c|` on `[t0, t1]` from endpoint values and the Lipschitz bound.
fn cell_sup(c: &ScalarFn, t0: f64, t1: f64) -> f64 {
    c.eval(t0).norm().max(c.eval(t1).norm()) + 0.5 * c.lip() * (t1 - t0)
}

/// Operator path over a reservoir instance.
pub fn gen_path(inst: &ReservoirInstance, kind: &PathKind, grid: Vec<f64>, tol: &Tolerances) -> Result<OperatorPath> {
    check_grid(&grid)?;
    let base = BaseOperator::Diagonal { entries: inst.diagonal() };
    let (motion, lip) = match kind {
        PathKind::Constant => (Motion::Constant, 0.0),
        PathKind::Drift { c } => {
            c.validate()?;
            (Motion::Drift { c: c.clone() }, c.lip())
        }
        PathKind::Rotation { generator, drift } => {
            drift.validate()?;
            if generator.nrows() != inst.dim() || generator.ncols() != inst.dim() {
                return Err(OpcError::DimensionMismatch(format!(
                    "generator {}x{} for a {}-dimensional instance",
                    generator.nrows(),
                    generator.ncols(),
                    inst.dim()
                )));
            }
            let skew = kernel::fro_norm(&(generator + generator.adjoint())) / kernel::fro_norm(generator).max(1e-300);
            if skew > tol.herm {
                return Err(OpcError::Invalid("rotation generator must be skew-Hermitian".into()));
            }
            let lip = 2.0 * kernel::op_norm(generator) * (base.norm() + drift.sup_abs()) + drift.lip();
            (
                Motion::Rotation {
                    generator: generator.clone(),
                    drift: drift.clone(),
                },
                lip,
            )
        }
    };
    let path = OperatorPath::assemble(base, motion, lip, grid);
    for &t in &path.grid {
        let shift = path.drift(t);
        if !(shift.re.is_finite() && shift.im.is_finite()) {
            return Err(OpcError::RegionViolatedAtT(t));
        }
    }
    Ok(path)
}
