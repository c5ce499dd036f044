//! Isometry-valued paths `V(t)` with `V*(t) A(t) V(t) ≈ D(t)`.
//!
//! A path is stored as a small expression tree ([`PathNode`]). Leaves are
//! grids of frames joined by the cos/sin rule
//! `V(t) = V(t_j) cos f_j(t) + V(t_{j+1}) sin f_j(t)` with
//! `f_j(t) = (π/2)(t − t_j)/(t_{j+1} − t_j)`; inner nodes blend, extend or
//! multiply paths. Every construction returns a [`Certificate`] obtained by
//! direct evaluation on a verification grid plus a Lipschitz bound for the
//! error between samples.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::dilation;
use crate::error::{OpcError, Result};
use crate::instances::{OperatorPath, ReservoirInstance, TargetPath, TermOp};
use crate::kernel::{self, c, cmx_serde, cmx_vec_serde, ComplexMatrix, C64};
use crate::numrange::GuaranteeRegion;
use crate::par;
use crate::pinch;
use crate::selfadjoint;
use crate::tol::Tolerances;

// ---------------------------------------------------------------------------
// path trees

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum PathNode {
    /// Frames on a grid joined by the cos/sin rule. Adjacent frames must
    /// have orthogonal ranges.
    CosSin {
        grid: Vec<f64>,
        #[serde(with = "cmx_vec_serde")]
        frames: Vec<ComplexMatrix>,
    },
    /// `√(1 − weight) · base + √weight · correction`.
    Blend {
        weight: f64,
        base: Box<PathNode>,
        correction: Box<PathNode>,
    },
    /// Column concatenation `[V_1 V_2 …]`.
    Extend { blocks: Vec<PathNode> },
    /// `left(t) · right(t)`.
    Product { left: Box<PathNode>, right: Box<PathNode> },
    Fixed {
        #[serde(with = "cmx_serde")]
        matrix: ComplexMatrix,
    },
    /// Truncated defect series of a contraction path on a cyclic shift.
    Schaffer { n_positions: usize, target: TargetPath },
    /// Closed-form dilation of a self-adjoint path to the two-point
    /// operator `a ⊕ b`.
    TwoPoint {
        a: f64,
        b: f64,
        target: TargetPath,
        /// Lower bound for `min(b − λ_max(D), λ_min(D) − a)` over `t`.
        margin: f64,
        #[serde(with = "cmx_serde")]
        leg_a: ComplexMatrix,
        #[serde(with = "cmx_serde")]
        leg_b: ComplexMatrix,
    },
}

fn cell_index(grid: &[f64], t: f64) -> usize {
    let i = grid.partition_point(|&g| g <= t);
    i.saturating_sub(1).min(grid.len() - 2)
}

impl PathNode {
    pub fn eval(&self, t: f64, tol: &Tolerances) -> Result<ComplexMatrix> {
        match self {
            Self::CosSin { grid, frames } => {
                let j = cell_index(grid, t);
                let f = FRAC_PI_2 * ((t - grid[j]) / (grid[j + 1] - grid[j])).clamp(0.0, 1.0);
                Ok(&frames[j] * c(f.cos(), 0.0) + &frames[j + 1] * c(f.sin(), 0.0))
            }
            Self::Blend {
                weight,
                base,
                correction,
            } => Ok(base.eval(t, tol)? * c((1.0 - weight).sqrt(), 0.0) + correction.eval(t, tol)? * c(weight.sqrt(), 0.0)),
            Self::Extend { blocks } => {
                let parts = blocks.iter().map(|b| b.eval(t, tol)).collect::<Result<Vec<_>>>()?;
                let refs: Vec<&ComplexMatrix> = parts.iter().collect();
                Ok(kernel::hstack(&refs))
            }
            Self::Product { left, right } => {
                let r = right.eval(t, tol)?;
                left.apply(t, &r, tol)
            }
            Self::Fixed { matrix } => Ok(matrix.clone()),
            Self::Schaffer { n_positions, target } => dilation::schaffer_matrix(*n_positions, &target.eval(t), tol),
            Self::TwoPoint {
                a,
                b,
                target,
                leg_a,
                leg_b,
                ..
            } => selfadjoint::two_point_matrix(*a, *b, &target.eval(t), leg_a, leg_b, tol),
        }
    }

    /// `V(t) x` without forming `V(t)` when the tree allows it.
    pub fn apply(&self, t: f64, x: &ComplexMatrix, tol: &Tolerances) -> Result<ComplexMatrix> {
        match self {
            Self::CosSin { grid, frames } => {
                let j = cell_index(grid, t);
                let f = FRAC_PI_2 * ((t - grid[j]) / (grid[j + 1] - grid[j])).clamp(0.0, 1.0);
                Ok(&frames[j] * (x * c(f.cos(), 0.0)) + &frames[j + 1] * (x * c(f.sin(), 0.0)))
            }
            Self::Blend {
                weight,
                base,
                correction,
            } => Ok(base.apply(t, x, tol)? * c((1.0 - weight).sqrt(), 0.0)
                + correction.apply(t, x, tol)? * c(weight.sqrt(), 0.0)),
            Self::Product { left, right } => {
                let y = right.apply(t, x, tol)?;
                left.apply(t, &y, tol)
            }
            Self::Fixed { matrix } => Ok(matrix * x),
            _ => Ok(self.eval(t, tol)? * x),
        }
    }

    pub fn rows(&self) -> usize {
        match self {
            Self::CosSin { frames, .. } => frames[0].nrows(),
            Self::Blend { base, .. } => base.rows(),
            Self::Extend { blocks } => blocks[0].rows(),
            Self::Product { left, .. } => left.rows(),
            Self::Fixed { matrix } => matrix.nrows(),
            Self::Schaffer { n_positions, target } => n_positions * target.dim,
            Self::TwoPoint { leg_a, .. } => leg_a.nrows(),
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            Self::CosSin { frames, .. } => frames[0].ncols(),
            Self::Blend { base, .. } => base.cols(),
            Self::Extend { blocks } => blocks.iter().map(|b| b.cols()).sum(),
            Self::Product { right, .. } => right.cols(),
            Self::Fixed { matrix } => matrix.ncols(),
            Self::Schaffer { target, .. } => target.dim,
            Self::TwoPoint { target, .. } => target.dim,
        }
    }

    /// Times where the path is not smooth, always including 0 and 1.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut out = vec![0.0, 1.0];
        self.collect_breakpoints(&mut out);
        sorted_unique(out)
    }

    fn collect_breakpoints(&self, out: &mut Vec<f64>) {
        match self {
            Self::CosSin { grid, .. } => out.extend_from_slice(grid),
            Self::Blend { base, correction, .. } => {
                base.collect_breakpoints(out);
                correction.collect_breakpoints(out);
            }
            Self::Extend { blocks } => blocks.iter().for_each(|b| b.collect_breakpoints(out)),
            Self::Product { left, right } => {
                left.collect_breakpoints(out);
                right.collect_breakpoints(out);
            }
            Self::Fixed { .. } => {}
            Self::Schaffer { target, .. } | Self::TwoPoint { target, .. } => out.extend(target_knots(target)),
        }
    }

    /// Lipschitz bound of `t ↦ V(t)` on `[t0, t1]` (a subset of one smooth
    /// cell), or on all of `[0, 1]` when `cell` is `None`.
    pub fn lip(&self, cell: Option<(f64, f64)>) -> f64 {
        match self {
            Self::CosSin { grid, .. } => match cell {
                Some((t0, t1)) => {
                    let j = cell_index(grid, 0.5 * (t0 + t1));
                    FRAC_PI_2 / (grid[j + 1] - grid[j])
                }
                None => grid.windows(2).map(|w| FRAC_PI_2 / (w[1] - w[0])).fold(0.0, f64::max),
            },
            Self::Blend {
                weight,
                base,
                correction,
            } => (1.0 - weight).sqrt() * base.lip(cell) + weight.sqrt() * correction.lip(cell),
            Self::Extend { blocks } => blocks.iter().map(|b| b.lip(cell).powi(2)).sum::<f64>().sqrt(),
            Self::Product { left, right } => left.lip(cell) * right.norm_bound() + left.norm_bound() * right.lip(cell),
            Self::Fixed { .. } => 0.0,
            Self::Schaffer { target, .. } => {
                let cmax = target.max_norm_bound();
                let lip_d = target.lip();
                let lip_defect = cmax * lip_d / (1.0 - cmax * cmax).sqrt();
                (lip_d + lip_defect) * (1.0 / (1.0 - cmax) + 1.0 / (1.0 - cmax).powi(2))
            }
            Self::TwoPoint {
                a, b, target, margin, ..
            } => {
                if *margin <= 0.0 {
                    return f64::INFINITY;
                }
                let leg = target.lip() / (2.0 * (margin * (b - a)).sqrt());
                std::f64::consts::SQRT_2 * leg
            }
        }
    }

    /// Upper bound for `sup_t ‖V(t)‖`.
    pub fn norm_bound(&self) -> f64 {
        match self {
            Self::CosSin { frames, .. } => frames.iter().map(kernel::op_norm).fold(0.0, f64::max) * std::f64::consts::SQRT_2,
            Self::Blend {
                weight,
                base,
                correction,
            } => (1.0 - weight).sqrt() * base.norm_bound() + weight.sqrt() * correction.norm_bound(),
            Self::Extend { blocks } => blocks.iter().map(|b| b.norm_bound().powi(2)).sum::<f64>().sqrt(),
            Self::Product { left, right } => left.norm_bound() * right.norm_bound(),
            Self::Fixed { matrix } => kernel::op_norm(matrix),
            Self::Schaffer { .. } | Self::TwoPoint { .. } => 1.0,
        }
    }

    /// All stored frame columns (leaves and fixed factors).
    fn leaf_columns(&self, out: &mut Vec<ComplexMatrix>) {
        match self {
            Self::CosSin { frames, .. } => out.extend(frames.iter().cloned()),
            Self::Blend { base, correction, .. } => {
                base.leaf_columns(out);
                correction.leaf_columns(out);
            }
            Self::Extend { blocks } => blocks.iter().for_each(|b| b.leaf_columns(out)),
            Self::Product { left, .. } => left.leaf_columns(out),
            Self::Fixed { matrix } => out.push(matrix.clone()),
            Self::Schaffer { .. } | Self::TwoPoint { .. } => {}
        }
    }

    /// Number of stored frames (over all leaves).
    pub fn frame_count(&self) -> usize {
        match self {
            Self::CosSin { frames, .. } => frames.len(),
            Self::Blend { base, correction, .. } => base.frame_count() + correction.frame_count(),
            Self::Extend { blocks } => blocks.iter().map(|b| b.frame_count()).sum(),
            Self::Product { left, right } => left.frame_count() + right.frame_count(),
            _ => 0,
        }
    }
}

fn target_knots(target: &TargetPath) -> Vec<f64> {
    use crate::instances::ScalarFn;
    fn walk(f: &ScalarFn, out: &mut Vec<f64>) {
        match f {
            ScalarFn::Linear { knots, .. } => out.extend_from_slice(knots),
            ScalarFn::Sum { terms } => terms.iter().for_each(|t| walk(t, out)),
            _ => {}
        }
    }
    let mut out = Vec::new();
    for term in &target.terms {
        walk(&term.coeff, &mut out);
    }
    out
}

fn sorted_unique(mut v: Vec<f64>) -> Vec<f64> {
    v.retain(|t| (0.0..=1.0).contains(t));
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v.dedup_by(|a, b| (*a - *b).abs() < 1e-15);
    v
}

fn merge_breakpoints(parts: &[Vec<f64>]) -> Vec<f64> {
    sorted_unique(parts.concat())
}

/// Isometry-valued path `V: [0, 1] → B(C^cols, C^rows)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsometryPath {
    pub root: PathNode,
    pub rows: usize,
    pub cols: usize,
    pub lip_v: f64,
    /// Dimension of the span of all stored frame columns.
    pub z_dim: usize,
}

impl IsometryPath {
    pub fn new(root: PathNode, rows: usize, cols: usize) -> Self {
        let lip_v = root.lip(None);
        Self {
            root,
            rows,
            cols,
            lip_v,
            z_dim: 0,
        }
    }

    fn from_node(root: PathNode) -> Self {
        let (rows, cols) = (root.rows(), root.cols());
        Self::new(root, rows, cols)
    }

    /// Fills in `z_dim`.
    pub fn with_span_dim(mut self, tol: &Tolerances) -> Self {
        self.z_dim = span_basis(&self.root, tol).ncols();
        self
    }

    pub fn eval(&self, t: f64) -> Result<ComplexMatrix> {
        self.root.eval(t, &Tolerances::default())
    }

    pub fn breakpoints(&self) -> Vec<f64> {
        self.root.breakpoints()
    }
}

/// Orthonormal basis of the span of all stored frame columns.
pub fn span_basis(node: &PathNode, tol: &Tolerances) -> ComplexMatrix {
    let mut cols = Vec::new();
    node.leaf_columns(&mut cols);
    if cols.is_empty() {
        return ComplexMatrix::zeros(node.rows(), 0);
    }
    let refs: Vec<&ComplexMatrix> = cols.iter().collect();
    kernel::orthonormalize(&kernel::hstack(&refs), tol.rank)
}

fn columns(m: &ComplexMatrix) -> impl Iterator<Item = ComplexMatrix> + '_ {
    (0..m.ncols()).map(move |j| kernel::column(m, j))
}

// ---------------------------------------------------------------------------
// certificates

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub n: usize,
    /// Accuracy requested at this iteration.
    pub target: f64,
    /// Grid size of the newest interpolation leaf.
    pub k: usize,
    /// Blend weight (0 for the first iteration).
    pub weight: f64,
    pub sup_error: f64,
    pub certified_error: f64,
    /// Sampled `sup ‖V_n − V_{n−1}‖`.
    #[serde(default)]
    pub distance: Option<f64>,
    /// `√(2 err_{n−1}/θ)`.
    #[serde(default)]
    pub distance_bound: Option<f64>,
}

/// Entry `(n₀, l_{n₀})` of the realized modulus table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModulusEntry {
    pub n0: usize,
    pub lip: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub sup_error: f64,
    pub certified_sup_bound: f64,
    pub isometry_defect: f64,
    pub lip_v: f64,
    /// Largest sampled difference quotient of `V`.
    pub measured_lip_v: f64,
    pub budget_used: Vec<usize>,
    /// Largest adjacent `‖P(t) − P(s)‖` for the range projections.
    pub gap_path_bound: f64,
    /// Largest adjacent `‖V(t) − V(s)‖`.
    pub max_step: f64,
    pub verified_grid_size: usize,
    #[serde(default)]
    pub partial: bool,
    #[serde(default)]
    pub stop_reason: Option<String>,
    #[serde(default)]
    pub iterations: Vec<IterationRecord>,
    #[serde(default)]
    pub modulus: Vec<ModulusEntry>,
    #[serde(default)]
    pub notes: Vec<String>,
}

/// Controls for synthesis and certification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisOptions {
    pub tol: Tolerances,
    /// Minimum number of verification samples.
    pub min_grid: usize,
    /// Samples per smooth cell are capped so the total stays near this.
    pub max_grid: usize,
    /// Target inter-sample slack as a fraction of the requested accuracy.
    pub slack_fraction: f64,
    pub max_iterations: usize,
    /// Largest admissible number of interpolation cells.
    pub max_k: usize,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        Self {
            tol: Tolerances::default(),
            min_grid: 1024,
            max_grid: 20_000,
            slack_fraction: 0.02,
            max_iterations: 40,
            max_k: 4096,
        }
    }
}

/// Norms `‖Z1* B Z2‖` for each affine term operator of `A`.
#[derive(Debug, Clone)]
struct CrossNorms {
    base: f64,
    identity: f64,
    samples: Vec<f64>,
}

impl CrossNorms {
    fn get(&self, op: TermOp) -> f64 {
        match op {
            TermOp::Base => self.base,
            TermOp::Identity => self.identity,
            TermOp::Sample(i) => self.samples[i],
        }
    }
}

/// Per-node data reused across certifications: span bases and the
/// operator norms of cross compressions between sibling spans.
#[derive(Debug, Clone)]
pub struct Analysis {
    z: ComplexMatrix,
    kind: AnalysisKind,
}

#[derive(Debug, Clone)]
enum AnalysisKind {
    Leaf,
    Blend {
        base: Box<Analysis>,
        correction: Box<Analysis>,
        cross: Option<CrossNorms>,
    },
    Extend {
        blocks: Vec<Analysis>,
        /// `cross[i][j]` for `i < j`.
        cross: Vec<Vec<Option<CrossNorms>>>,
    },
    Opaque,
}

fn cross_norms(a: &OperatorPath, z1: &ComplexMatrix, z2: &ComplexMatrix) -> Option<CrossNorms> {
    if a.is_rotation() || z1.ncols() == 0 || z2.ncols() == 0 {
        return None;
    }
    let base = kernel::op_norm(&z1.ad_mul(&a.apply_term(TermOp::Base, z2)));
    let identity = kernel::op_norm(&(z1.ad_mul(z2)));
    let samples = match &a.motion {
        crate::instances::Motion::Sampled { values } => {
            values.iter().map(|m| kernel::op_norm(&(z1.ad_mul(m) * z2))).collect()
        }
        _ => Vec::new(),
    };
    Some(CrossNorms {
        base,
        identity,
        samples,
    })
}

fn merge_spans(parts: &[&ComplexMatrix], tol: &Tolerances) -> ComplexMatrix {
    let nonempty: Vec<&ComplexMatrix> = parts.iter().copied().filter(|m| m.ncols() > 0).collect();
    if nonempty.is_empty() {
        return parts[0].clone();
    }
    kernel::orthonormalize(&kernel::hstack(&nonempty), tol.rank)
}

impl Analysis {
    pub fn of(node: &PathNode, a: &OperatorPath, tol: &Tolerances) -> Self {
        match node {
            PathNode::CosSin { .. } => Self {
                z: span_basis(node, tol),
                kind: AnalysisKind::Leaf,
            },
            PathNode::Blend { base, correction, .. } => {
                Self::blend(Self::of(base, a, tol), Self::of(correction, a, tol), a, tol)
            }
            PathNode::Extend { blocks } => {
                let parts: Vec<Analysis> = blocks.iter().map(|b| Self::of(b, a, tol)).collect();
                Self::extend(parts, a, tol)
            }
            _ => Self {
                z: ComplexMatrix::zeros(node.rows(), 0),
                kind: AnalysisKind::Opaque,
            },
        }
    }

    /// Analysis of `Blend { base, correction }` from the parts.
    pub fn blend(base: Analysis, correction: Analysis, a: &OperatorPath, tol: &Tolerances) -> Self {
        let cross = cross_norms(a, &base.z, &correction.z);
        let z = merge_spans(&[&base.z, &correction.z], tol);
        Self {
            z,
            kind: AnalysisKind::Blend {
                base: Box::new(base),
                correction: Box::new(correction),
                cross,
            },
        }
    }

    pub fn extend(blocks: Vec<Analysis>, a: &OperatorPath, tol: &Tolerances) -> Self {
        let cross = (0..blocks.len())
            .map(|i| {
                (0..blocks.len())
                    .map(|j| if j > i { cross_norms(a, &blocks[i].z, &blocks[j].z) } else { None })
                    .collect()
            })
            .collect();
        let zs: Vec<&ComplexMatrix> = blocks.iter().map(|b| &b.z).collect();
        let z = merge_spans(&zs, tol);
        Self {
            z,
            kind: AnalysisKind::Extend { blocks, cross },
        }
    }

    pub fn span_dim(&self) -> usize {
        self.z.ncols()
    }
}

/// Bounds `(sup ‖C(t)‖, sup ‖C′(t)‖)` for the coefficients of a node in its
/// span basis on one cell.
fn coeff_bounds(node: &PathNode, t0: f64, t1: f64) -> Option<(f64, f64)> {
    match node {
        PathNode::CosSin { .. } => {
            let f = node.lip(Some((t0, t1)));
            Some((std::f64::consts::SQRT_2, std::f64::consts::SQRT_2 * f))
        }
        PathNode::Blend {
            weight,
            base,
            correction,
        } => {
            let (b0, b1) = coeff_bounds(base, t0, t1)?;
            let (c0, c1) = coeff_bounds(correction, t0, t1)?;
            let (p, q) = ((1.0 - weight).sqrt(), weight.sqrt());
            Some((p * b0 + q * c0, p * b1 + q * c1))
        }
        PathNode::Extend { blocks } => {
            let mut s = (0.0, 0.0);
            for b in blocks {
                let (x, y) = coeff_bounds(b, t0, t1)?;
                s.0 += x;
                s.1 += y;
            }
            Some(s)
        }
        _ => None,
    }
}

fn cross_lip(
    n1: &PathNode,
    n2: &PathNode,
    cross: &Option<CrossNorms>,
    a: &OperatorPath,
    t0: f64,
    t1: f64,
) -> Option<f64> {
    let cross = cross.as_ref()?;
    let (l0a, l1a) = coeff_bounds(n1, t0, t1)?;
    let (l0b, l1b) = coeff_bounds(n2, t0, t1)?;
    let terms = a.affine_terms(t0, t1)?;
    Some(
        terms
            .iter()
            .map(|m| (m.dg_sup * l0a * l0b + m.g_sup * (l1a * l0b + l0a * l1b)) * cross.get(m.op))
            .sum(),
    )
}

/// Lipschitz bound of `t ↦ V*(t) A(t) V(t)` on a cell inside one smooth
/// piece of every leaf, computed from stored frames.
fn compression_lip(node: &PathNode, an: &Analysis, a: &OperatorPath, t0: f64, t1: f64) -> Option<f64> {
    match (node, &an.kind) {
        (PathNode::CosSin { grid, frames }, AnalysisKind::Leaf) => {
            let j = cell_index(grid, 0.5 * (t0 + t1));
            let fp = FRAC_PI_2 / (grid[j + 1] - grid[j]);
            let (p, q) = (&frames[j], &frames[j + 1]);
            let terms = a.affine_terms(t0, t1)?;
            let mut lip = 0.0;
            for m in &terms {
                let bp = a.apply_term(m.op, p);
                let bq = a.apply_term(m.op, q);
                let pm = p.ad_mul(&bp);
                let qm = q.ad_mul(&bq);
                let xm = p.ad_mul(&bq) + q.ad_mul(&bp);
                let (np, nq, nx) = (kernel::op_norm(&pm), kernel::op_norm(&qm), kernel::op_norm(&xm));
                lip += m.dg_sup * (np.max(nq) + 0.5 * nx) + m.g_sup * fp * (kernel::op_norm(&(qm - pm)) + nx);
            }
            Some(lip)
        }
        (
            PathNode::Blend {
                weight,
                base,
                correction,
            },
            AnalysisKind::Blend {
                base: ab,
                correction: ac,
                cross,
            },
        ) => {
            let lb = compression_lip(base, ab, a, t0, t1)?;
            let lc = compression_lip(correction, ac, a, t0, t1)?;
            let lx = cross_lip(base, correction, cross, a, t0, t1)?;
            let w = *weight;
            Some((1.0 - w) * lb + w * lc + 2.0 * (w * (1.0 - w)).sqrt() * lx)
        }
        (PathNode::Extend { blocks }, AnalysisKind::Extend { blocks: ab, cross }) => {
            let mut sq = 0.0;
            for i in 0..blocks.len() {
                sq += compression_lip(&blocks[i], &ab[i], a, t0, t1)?.powi(2);
                for j in i + 1..blocks.len() {
                    sq += 2.0 * cross_lip(&blocks[i], &blocks[j], &cross[i][j], a, t0, t1)?.powi(2);
                }
            }
            Some(sq.sqrt())
        }
        _ => None,
    }
}

fn nan_max(a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() {
        f64::NAN
    } else {
        a.max(b)
    }
}

/// `‖V V* − W W*‖` for isometries of equal rank, as `‖(I − V V*) W‖`.
fn projection_gap(v: &ComplexMatrix, w: &ComplexMatrix) -> f64 {
    kernel::op_norm(&(w - v * (v.ad_mul(w))))
}

#[derive(Debug, Clone, Default)]
struct Sweep {
    sup_error: f64,
    certified: f64,
    defect: f64,
    gap: f64,
    step: f64,
    quotient: f64,
    distance: f64,
    points: usize,
}

impl Sweep {
    fn merge(mut self, o: Sweep) -> Sweep {
        self.sup_error = nan_max(self.sup_error, o.sup_error);
        self.certified = nan_max(self.certified, o.certified);
        self.defect = self.defect.max(o.defect);
        self.gap = self.gap.max(o.gap);
        self.step = self.step.max(o.step);
        self.quotient = self.quotient.max(o.quotient);
        self.distance = self.distance.max(o.distance);
        self.points += o.points;
        self
    }
}

struct Sample {
    v: ComplexMatrix,
    err: f64,
}

fn sample(a: &OperatorPath, d: &TargetPath, v: &IsometryPath, t: f64, tol: &Tolerances) -> Result<Sample> {
    let vt = v.root.eval(t, tol)?;
    let e = a.compress(t, &vt) - d.eval(t);
    Ok(Sample {
        err: kernel::op_norm(&e),
        v: vt,
    })
}

/// Samples every smooth cell densely enough that the first-order slack
/// `lip(E) h / 2` stays near `slack`, and returns the sweep summary.
fn sweep(
    a: &OperatorPath,
    d: &TargetPath,
    v: &IsometryPath,
    an: &Analysis,
    slack: f64,
    reference: Option<&IsometryPath>,
    opts: &SynthesisOptions,
) -> Result<Sweep> {
    let tol = &opts.tol;
    let cells = merge_breakpoints(&[v.breakpoints(), a.breakpoints(), target_knots(d)]);
    let cells: Vec<(f64, f64)> = cells.windows(2).map(|w| (w[0], w[1])).collect();
    let ncell = cells.len();
    let min_per = opts.min_grid.div_ceil(ncell).max(2);
    let cap_per = (opts.max_grid / ncell).max(min_per);
    let lip_d = d.lip();
    let norm_a = a.norm_bound();
    let parts = par::map(&cells, |&(t0, t1)| -> Result<Sweep> {
        let lip_q = compression_lip(&v.root, an, a, t0, t1)
            .unwrap_or_else(|| 2.0 * v.root.lip(Some((t0, t1))) * norm_a * v.root.norm_bound() + a.lip_a * v.root.norm_bound().powi(2));
        let lip_e = lip_q + lip_d;
        let h = t1 - t0;
        let want = if lip_e == 0.0 { 1.0 } else { (lip_e * h / (2.0 * slack)).ceil() };
        let n = (want.min(cap_per as f64) as usize).max(min_per);
        let mut s = Sweep::default();
        let mut prev: Option<(f64, Sample)> = None;
        for i in 0..=n {
            let t = if i == n { t1 } else { t0 + h * i as f64 / n as f64 };
            let cur = sample(a, d, v, t, tol)?;
            s.sup_error = nan_max(s.sup_error, cur.err);
            s.defect = s.defect.max(kernel::isometry_defect(&cur.v));
            if let Some(r) = reference {
                s.distance = s.distance.max(kernel::op_norm(&(r.root.eval(t, tol)? - &cur.v)));
            }
            if let Some((tp, p)) = &prev {
                let dt = t - tp;
                let step = kernel::op_norm(&(&cur.v - &p.v));
                s.step = s.step.max(step);
                s.quotient = s.quotient.max(step / dt);
                s.gap = s.gap.max(projection_gap(&cur.v, &p.v));
                s.certified = nan_max(s.certified, cur.err.max(p.err) + 0.5 * lip_e * dt);
            }
            if i > 0 {
                s.points += 1;
            }
            prev = Some((t, cur));
        }
        Ok(s)
    });
    let mut total = Sweep {
        points: 1,
        ..Sweep::default()
    };
    for p in parts {
        total = total.merge(p?);
    }
    if !total.certified.is_finite() || !total.sup_error.is_finite() {
        total.certified = f64::INFINITY;
    }
    Ok(total)
}

fn certificate_from(sweep: &Sweep, v: &IsometryPath, budget: Vec<usize>) -> Certificate {
    Certificate {
        sup_error: sweep.sup_error,
        certified_sup_bound: sweep.certified.max(sweep.sup_error),
        isometry_defect: sweep.defect,
        lip_v: v.lip_v,
        measured_lip_v: sweep.quotient,
        budget_used: budget,
        gap_path_bound: sweep.gap,
        max_step: sweep.step,
        verified_grid_size: sweep.points,
        partial: false,
        stop_reason: None,
        iterations: Vec::new(),
        modulus: Vec::new(),
        notes: Vec::new(),
    }
}

/// Certificate for an arbitrary path by sampling, with inter-sample slack
/// aimed at `slack`.
pub fn certify(
    a: &OperatorPath,
    d: &TargetPath,
    v: &IsometryPath,
    slack: f64,
    opts: &SynthesisOptions,
) -> Result<Certificate> {
    let an = Analysis::of(&v.root, a, &opts.tol);
    let s = sweep(a, d, v, &an, slack, None, opts)?;
    Ok(certificate_from(&s, v, Vec::new()))
}

/// Pointwise `(t, ‖V*AV − D‖, ‖V*V − I‖)` on a grid.
pub fn error_profile(
    a: &OperatorPath,
    d: &TargetPath,
    v: &IsometryPath,
    grid: &[f64],
    tol: &Tolerances,
) -> Result<Vec<(f64, f64, f64)>> {
    par::map(grid, |&t| -> Result<(f64, f64, f64)> {
        let s = sample(a, d, v, t, tol)?;
        Ok((t, s.err, kernel::isometry_defect(&s.v)))
    })
    .into_iter()
    .collect()
}

// ---------------------------------------------------------------------------
// grid interpolation

/// Number of cells forced by `‖A(t′) − A(t)‖ ≤ ε/4` and
/// `‖D(t′) − D(t)‖ ≤ ε/2` on every cell.
pub fn grid_cells(lip_a: f64, lip_d: f64, eps: f64) -> usize {
    let k = (4.0 * lip_a / eps).max(2.0 * lip_d / eps).max(1.0);
    // guard against 16.000000000000004
    let r = k.round();
    if (k - r).abs() <= 1e-9 * r {
        r as usize
    } else {
        k.ceil() as usize
    }
}

type Instance<'a> = Option<&'a mut ReservoirInstance>;

/// Whether frames come from the ledger with exact cross-term vanishing.
fn ledger_route(inst: &Instance<'_>, a: &OperatorPath) -> bool {
    inst.is_some() && a.is_reservoir() && !a.is_rotation()
}

fn build_frame(
    inst: &mut Instance<'_>,
    a: &OperatorPath,
    t: f64,
    target: &ComplexMatrix,
    forbidden: &[ComplexMatrix],
    tol: &Tolerances,
) -> Result<ComplexMatrix> {
    match inst {
        Some(inst) if a.is_reservoir() => {
            let dim = target.nrows();
            let shifted = target - ComplexMatrix::identity(dim, dim) * a.drift(t);
            if a.is_rotation() {
                let local: Vec<ComplexMatrix> = forbidden.iter().map(|f| a.to_base(t, f)).collect();
                let v = pinch::exact_compress(inst, &shifted, &local, tol)?;
                Ok(a.from_base(t, &v))
            } else {
                pinch::exact_compress(inst, &shifted, forbidden, tol)
            }
        }
        _ => pinch::approx_compress(&a.eval(t), target, forbidden, tol),
    }
}

/// Builds the frames of one interpolation leaf for the target function
/// `target` with `lip(target) ≤ lip_d`. `extra(t)` lists vectors the frame
/// at `t` must avoid beyond the instance ledger.
fn l2_leaf(
    inst: &mut Instance<'_>,
    a: &OperatorPath,
    target: &dyn Fn(f64) -> Result<ComplexMatrix>,
    k: usize,
    extra: &dyn Fn(f64) -> Result<Vec<ComplexMatrix>>,
    tol: &Tolerances,
) -> Result<PathNode> {
    let explicit = !ledger_route(inst, a);
    let grid: Vec<f64> = (0..=k).map(|j| j as f64 / k as f64).collect();
    let mut frames: Vec<ComplexMatrix> = Vec::with_capacity(k + 1);
    for (j, &t) in grid.iter().enumerate() {
        let mut forbidden = extra(t)?;
        if explicit && j > 0 {
            let prev = &frames[j - 1];
            let tp = grid[j - 1];
            forbidden.extend(columns(prev));
            for s in [tp, t] {
                forbidden.extend(columns(&a.apply(s, prev)));
                forbidden.extend(columns(&a.apply_adjoint(s, prev)));
            }
        }
        let goal = target(t)?;
        let frame = build_frame(inst, a, t, &goal, &forbidden, tol).map_err(|e| match e {
            OpcError::RoomExhausted {
                anchor,
                capacity,
                context,
            } => OpcError::RoomExhausted {
                anchor,
                capacity,
                context: format!("{context}; frame {j} of {} needed for k = {k}", k + 1),
            },
            other => other,
        })?;
        frames.push(frame);
    }
    Ok(PathNode::CosSin { grid, frames })
}

fn budget(inst: &Instance<'_>) -> Vec<usize> {
    inst.as_ref().map(|i| i.used()).unwrap_or_default()
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(OpcError::Invalid(format!("accuracy must be positive (got {eps})")));
    }
    Ok(())
}

fn check_shapes(a: &OperatorPath, d: &TargetPath, forbidden: &[ComplexMatrix]) -> Result<()> {
    if d.dim == 0 || d.dim > a.dim() {
        return Err(OpcError::DimensionMismatch(format!(
            "target of dimension {} for an operator of dimension {}",
            d.dim,
            a.dim()
        )));
    }
    if forbidden.iter().any(|f| f.nrows() != a.dim()) {
        return Err(OpcError::DimensionMismatch("forbidden vectors in the wrong ambient dimension".into()));
    }
    Ok(())
}

fn split_columns(forbidden: &[ComplexMatrix]) -> Vec<ComplexMatrix> {
    forbidden.iter().flat_map(columns).collect()
}

/// Grid interpolation: frames at `t_j = j/k` realizing `D(t_j)` exactly,
/// joined by the cos/sin rule. `k` follows the ε/4–ε/2 rule and is doubled
/// if the certified error still exceeds `ε`.
pub fn l2_grid_compress(
    inst: Option<&mut ReservoirInstance>,
    a: &OperatorPath,
    d: &TargetPath,
    eps: f64,
    forbidden: &[ComplexMatrix],
    opts: &SynthesisOptions,
) -> Result<(IsometryPath, Certificate)> {
    check_eps(eps)?;
    check_shapes(a, d, forbidden)?;
    let mut inst = inst;
    let forbidden = split_columns(forbidden);
    let (v, cert, _) = l2_certified(&mut inst, a, d, &|t| Ok(d.eval(t)), d.lip(), eps, &|_| Ok(forbidden.clone()), opts)?;
    Ok((v.with_span_dim(&opts.tol), cert))
}

#[allow(clippy::too_many_arguments)]
fn l2_certified(
    inst: &mut Instance<'_>,
    a: &OperatorPath,
    d: &TargetPath,
    target: &dyn Fn(f64) -> Result<ComplexMatrix>,
    lip_target: f64,
    eps: f64,
    extra: &dyn Fn(f64) -> Result<Vec<ComplexMatrix>>,
    opts: &SynthesisOptions,
) -> Result<(IsometryPath, Certificate, Analysis)> {
    let mut k = grid_cells(a.lip_a, lip_target, eps);
    loop {
        if k > opts.max_k {
            return Err(OpcError::RoomExhausted {
                anchor: 0,
                capacity: inst.as_ref().map(|i| i.multiplicity).unwrap_or(a.dim()),
                context: format!("accuracy {eps:.3e} needs k = {k} cells (limit {})", opts.max_k),
            });
        }
        let leaf = l2_leaf(inst, a, target, k, extra, &opts.tol)?;
        let v = IsometryPath::from_node(leaf);
        let an = Analysis::of(&v.root, a, &opts.tol);
        let s = sweep(a, d, &v, &an, opts.slack_fraction * eps, None, opts)?;
        let cert = certificate_from(&s, &v, budget(inst));
        if cert.certified_sup_bound <= eps || a.is_rotation() && k * 2 > opts.max_k {
            return Ok((v, cert, an));
        }
        k *= 2;
    }
}

// ---------------------------------------------------------------------------
// refinement

/// Blend `Ṽ = √(1−a) V + √a R` with `a = ε/θ`, where `R` compresses `A` to
/// `D̃ = (D + (a − 1) V*AV)/a` and avoids `V` and its images.
#[allow(clippy::too_many_arguments)]
pub fn p4_refine(
    inst: Option<&mut ReservoirInstance>,
    a: &OperatorPath,
    d: &TargetPath,
    v: &IsometryPath,
    eps: f64,
    theta: f64,
    eps_next: f64,
    forbidden: &[ComplexMatrix],
    opts: &SynthesisOptions,
) -> Result<(IsometryPath, Certificate)> {
    check_eps(eps_next)?;
    check_shapes(a, d, forbidden)?;
    let mut inst = inst;
    let forbidden = split_columns(forbidden);
    let an = Analysis::of(&v.root, a, &opts.tol);
    let step = refine_step(&mut inst, a, d, v, &an, eps, theta, eps_next, &forbidden, opts)?;
    let mut cert = step.cert;
    cert.iterations.push(step.record);
    Ok((step.path.with_span_dim(&opts.tol), cert))
}

struct Step {
    path: IsometryPath,
    analysis: Analysis,
    cert: Certificate,
    record: IterationRecord,
}

#[allow(clippy::too_many_arguments)]
fn refine_step(
    inst: &mut Instance<'_>,
    a: &OperatorPath,
    d: &TargetPath,
    v: &IsometryPath,
    an: &Analysis,
    eps: f64,
    theta: f64,
    eps_next: f64,
    forbidden: &[ComplexMatrix],
    opts: &SynthesisOptions,
) -> Result<Step> {
    let tol = &opts.tol;
    let w = eps / theta;
    if !(w < 1.0) {
        return Err(OpcError::ThetaTooSmall(w));
    }
    if w <= 1e-14 {
        // already exact up to rounding
        let s = sweep(a, d, v, an, opts.slack_fraction * eps_next, Some(v), opts)?;
        let cert = certificate_from(&s, v, budget(inst));
        let record = IterationRecord {
            n: 0,
            target: eps_next,
            k: 0,
            weight: 0.0,
            sup_error: cert.sup_error,
            certified_error: cert.certified_sup_bound,
            distance: Some(0.0),
            distance_bound: Some((2.0 * w).sqrt()),
        };
        return Ok(Step {
            path: v.clone(),
            analysis: an.clone(),
            cert,
            record,
        });
    }
    let lip_qv = global_compression_lip(&v.root, an, a);
    let lip_tilde = (d.lip() + (1.0 - w) * lip_qv) / w;
    let eps_r = eps_next / (2.0 * w);
    let target = |t: f64| -> Result<ComplexMatrix> {
        let vt = v.root.eval(t, tol)?;
        let q = a.compress(t, &vt);
        Ok((d.eval(t) + q * c(w - 1.0, 0.0)) * c(1.0 / w, 0.0))
    };
    let explicit = !ledger_route(inst, a);
    let zv: Vec<ComplexMatrix> = if explicit { columns(&an.z).collect() } else { Vec::new() };
    let extra = |t: f64| -> Result<Vec<ComplexMatrix>> {
        let mut out = forbidden.to_vec();
        if explicit {
            out.extend(zv.iter().cloned());
            let vt = v.root.eval(t, tol)?;
            out.extend(columns(&a.apply(t, &vt)));
            out.extend(columns(&a.apply_adjoint(t, &vt)));
        }
        Ok(out)
    };
    let mut k = grid_cells(a.lip_a, lip_tilde, eps_r);
    loop {
        if k > opts.max_k {
            return Err(OpcError::RoomExhausted {
                anchor: 0,
                capacity: inst.as_ref().map(|i| i.multiplicity).unwrap_or(a.dim()),
                context: format!("refinement to {eps_next:.3e} needs k = {k} cells (limit {})", opts.max_k),
            });
        }
        let leaf = l2_leaf(inst, a, &target, k, &extra, tol)?;
        let r_an = Analysis::of(&leaf, a, tol);
        let node = PathNode::Blend {
            weight: w,
            base: Box::new(v.root.clone()),
            correction: Box::new(leaf),
        };
        let path = IsometryPath::from_node(node);
        let analysis = Analysis::blend(an.clone(), r_an, a, tol);
        let s = sweep(a, d, &path, &analysis, opts.slack_fraction * eps_next, Some(v), opts)?;
        let cert = certificate_from(&s, &path, budget(inst));
        if cert.certified_sup_bound <= eps_next || k * 2 > opts.max_k {
            let record = IterationRecord {
                n: 0,
                target: eps_next,
                k,
                weight: w,
                sup_error: cert.sup_error,
                certified_error: cert.certified_sup_bound,
                distance: Some(s.distance),
                distance_bound: Some((2.0 * w).sqrt()),
            };
            return Ok(Step {
                path,
                analysis,
                cert,
                record,
            });
        }
        k *= 2;
    }
}

/// Lipschitz bound of `V*AV` over the whole interval.
fn global_compression_lip(node: &PathNode, an: &Analysis, a: &OperatorPath) -> f64 {
    let cells = merge_breakpoints(&[node.breakpoints(), a.breakpoints()]);
    let lips = par::map(&cells.windows(2).map(|w| (w[0], w[1])).collect::<Vec<_>>(), |&(t0, t1)| {
        compression_lip(node, an, a, t0, t1)
            .unwrap_or_else(|| 2.0 * node.lip(Some((t0, t1))) * a.norm_bound() * node.norm_bound() + a.lip_a * node.norm_bound().powi(2))
    });
    lips.into_iter().fold(0.0, nan_max)
}

// ---------------------------------------------------------------------------
// exact loop

/// Smallest region distance of the entries the pinch decomposition of
/// `D(t) − c(t)` must realize, sampled over `t`.
pub fn target_margin(a: &OperatorPath, d: &TargetPath, region: &GuaranteeRegion, tol: &Tolerances) -> Result<f64> {
    let times = merge_breakpoints(&[a.breakpoints(), target_knots(d), crate::instances::uniform_grid(65)]);
    let margins = par::map(&times, |&t| -> Result<f64> {
        let dt = d.eval(t) - ComplexMatrix::identity(d.dim, d.dim) * a.drift(t);
        let dec = pinch::hermitian_split_decomp(&dt, tol)?;
        Ok(dec.entries.iter().map(|&z| region.signed_distance(z)).fold(f64::INFINITY, f64::min))
    });
    let mut m = f64::INFINITY;
    for x in margins {
        m = m.min(x?);
    }
    Ok(m)
}

/// Iterated refinement with `ε_n = θ 2^{−n}` until the certified error is at
/// most `tol_final`. Running out of room yields a partial certificate for
/// the last completed iterate.
#[allow(clippy::too_many_arguments)]
pub fn t5_exact(
    inst: Option<&mut ReservoirInstance>,
    a: &OperatorPath,
    d: &TargetPath,
    theta: f64,
    tol_final: f64,
    forbidden: &[ComplexMatrix],
    opts: &SynthesisOptions,
) -> Result<(IsometryPath, Certificate)> {
    check_eps(theta)?;
    check_eps(tol_final)?;
    check_shapes(a, d, forbidden)?;
    let tol = &opts.tol;
    let mut inst = inst;
    if let Some(i) = inst.as_ref() {
        if a.is_reservoir() {
            let margin = target_margin(a, d, &i.region, tol)?;
            if margin < theta * (1.0 - 1e-9) {
                return Err(OpcError::MarginViolated(format!(
                    "target entries keep distance {margin:.3e} from the region boundary, below theta = {theta:.3e}"
                )));
            }
        }
    }
    let forbidden = split_columns(forbidden);
    let eps1 = 0.5 * theta;
    let (mut v, mut cert, mut an) = l2_certified(
        &mut inst,
        a,
        d,
        &|t| Ok(d.eval(t)),
        d.lip(),
        eps1,
        &|_| Ok(forbidden.clone()),
        opts,
    )?;
    let mut records = vec![IterationRecord {
        n: 1,
        target: eps1,
        k: grid_cells(a.lip_a, d.lip(), eps1),
        weight: 0.0,
        sup_error: cert.sup_error,
        certified_error: cert.certified_sup_bound,
        distance: None,
        distance_bound: None,
    }];
    let mut modulus = vec![ModulusEntry { n0: 1, lip: v.lip_v }];
    let mut stop: Option<String> = None;
    let mut n = 1;
    while cert.certified_sup_bound > tol_final {
        if n >= opts.max_iterations {
            stop = Some(format!("iteration limit {} reached", opts.max_iterations));
            break;
        }
        let err = cert.certified_sup_bound;
        let eps_next = theta * 0.5f64.powi(n as i32 + 1);
        match refine_step(&mut inst, a, d, &v, &an, err, theta, eps_next, &forbidden, opts) {
            Ok(step) => {
                n += 1;
                let mut record = step.record;
                record.n = n;
                records.push(record);
                v = step.path;
                an = step.analysis;
                cert = step.cert;
                modulus.push(ModulusEntry { n0: n, lip: v.lip_v });
            }
            Err(e @ (OpcError::RoomExhausted { .. } | OpcError::MarginViolated(_) | OpcError::ThetaTooSmall(_))) => {
                stop = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        }
    }
    cert.partial = stop.is_some();
    cert.stop_reason = stop;
    cert.iterations = records;
    cert.modulus = modulus;
    cert.budget_used = budget(&inst);
    v.z_dim = an.span_dim();
    Ok((v, cert))
}

// ---------------------------------------------------------------------------
// growing diagonal targets

/// One level of a nested family: the path on the first `size` entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NestedLevel {
    pub k: usize,
    pub size: usize,
    pub path: IsometryPath,
    pub certificate: Certificate,
    /// Certified error of the block added at this level.
    pub block_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NestedFamily {
    pub levels: Vec<NestedLevel>,
    /// Set when the budget stopped the schedule before `k_max`.
    pub truncated: bool,
    #[serde(default)]
    pub stop_reason: Option<String>,
}

/// Paths on `X_k = span{x_j : j < 2^k}` for the stationary diagonal target
/// with the given entries, each extending the previous one by a new block of
/// columns built in the same ledger session.
#[allow(clippy::too_many_arguments)]
pub fn p6_extend(
    inst: Option<&mut ReservoirInstance>,
    a: &OperatorPath,
    entries: &[C64],
    k_max: usize,
    theta: f64,
    tol_final: f64,
    opts: &SynthesisOptions,
) -> Result<NestedFamily> {
    if entries.is_empty() {
        return Err(OpcError::Invalid("no diagonal entries".into()));
    }
    let mut inst = inst;
    let mut blocks: Vec<PathNode> = Vec::new();
    let mut analyses: Vec<Analysis> = Vec::new();
    let mut errors: Vec<f64> = Vec::new();
    let mut levels = Vec::new();
    let mut stop = None;
    let mut done = 0;
    for k in 0..=k_max {
        let size = (1usize << k).min(entries.len());
        if size == done {
            break;
        }
        let new = &entries[done..size];
        let target = TargetPath::constant(kernel::diag(new));
        let sub = match t5_exact(inst.as_deref_mut(), a, &target, theta, tol_final, &[], opts) {
            Ok(r) => r,
            Err(e @ (OpcError::RoomExhausted { .. } | OpcError::MarginViolated(_))) => {
                stop = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        };
        if sub.1.partial && !levels.is_empty() {
            // keep the completed prefix rather than an inexact block
            stop = sub.1.stop_reason.clone();
            break;
        }
        blocks.push(sub.0.root.clone());
        analyses.push(Analysis::of(&sub.0.root, a, &opts.tol));
        errors.push(sub.1.certified_sup_bound);
        done = size;
        let node = PathNode::Extend { blocks: blocks.clone() };
        let path = IsometryPath::from_node(node);
        let an = Analysis::extend(analyses.clone(), a, &opts.tol);
        let slack = opts.slack_fraction * tol_final.max(errors.iter().cloned().fold(0.0, f64::max));
        let full = TargetPath::constant(kernel::diag(&entries[..size]));
        let s = sweep(a, &full, &path, &an, slack, None, opts)?;
        let mut cert = certificate_from(&s, &path, budget(&inst));
        cert.partial = sub.1.partial;
        cert.stop_reason = sub.1.stop_reason.clone();
        let mut path = path;
        path.z_dim = an.span_dim();
        levels.push(NestedLevel {
            k,
            size,
            path,
            certificate: cert,
            block_error: sub.1.certified_sup_bound,
        });
        if sub.1.partial {
            stop = sub.1.stop_reason;
            break;
        }
    }
    if levels.is_empty() {
        return Err(OpcError::RoomExhausted {
            anchor: 0,
            capacity: inst.as_ref().map(|i| i.multiplicity).unwrap_or(0),
            context: stop.unwrap_or_else(|| "no level could be built".into()),
        });
    }
    let truncated = stop.is_some() || done < entries.len().min(1 << k_max);
    Ok(NestedFamily {
        levels,
        truncated,
        stop_reason: stop,
    })
}

// ---------------------------------------------------------------------------
// composition pipeline

/// Choice of the two radii `max‖D‖ < b₁ < b₂ < r`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Radii {
    pub max_norm: f64,
    pub inradius: f64,
    pub b1: f64,
    pub b2: f64,
}

/// `b₁ = 2 max‖D‖` (or `r/2` for a zero target) and `b₂ = (b₁ + r)/2`.
pub fn select_radii(max_norm: f64, inradius: f64) -> Result<Radii> {
    let b1 = if max_norm == 0.0 { 0.5 * inradius } else { 2.0 * max_norm };
    if !(b1 < inradius) {
        return Err(OpcError::MarginViolated(format!(
            "max ‖D‖ = {max_norm:.4} needs 2·max ‖D‖ < inradius = {inradius:.4}"
        )));
    }
    Ok(Radii {
        max_norm,
        inradius,
        b1,
        b2: 0.5 * (b1 + inradius),
    })
}

/// Smallest distance from 0 to the boundary of the region of `A(t)`,
/// sampled densely and reduced by the drift's Lipschitz slack.
pub fn inradius(a: &OperatorPath, region: &GuaranteeRegion) -> f64 {
    let n = 1024;
    let mut r = f64::INFINITY;
    for i in 0..=n {
        let t = i as f64 / n as f64;
        r = r.min(region.signed_distance(-a.drift(t)));
    }
    let lip_c = match &a.motion {
        crate::instances::Motion::Drift { c } | crate::instances::Motion::Rotation { drift: c, .. } => c.lip(),
        _ => 0.0,
    };
    r - 0.5 * lip_c / n as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub radii: Radii,
    pub n_positions: usize,
    /// Contraction ratio `max‖D‖ / b₁`.
    pub c: f64,
    pub wrap_bound: f64,
    pub defect_bound: f64,
    /// Certified error of the inner compression `V*AV ≈ b₁ D_diag`.
    pub inner_error: f64,
    pub inner_iterations: usize,
}

/// `S(t) = V(t) J W(t)`: `W` dilates `D/b₁` to the cyclic shift `U`,
/// `J*ΛJ = U` diagonalizes `U`, and `V` compresses `A` to `b₁Λ`.
pub fn t9_pipeline(
    inst: Option<&mut ReservoirInstance>,
    a: &OperatorPath,
    d: &TargetPath,
    region: &GuaranteeRegion,
    tol_final: f64,
    opts: &SynthesisOptions,
) -> Result<(IsometryPath, Certificate, PipelineReport)> {
    check_eps(tol_final)?;
    let tol = &opts.tol;
    let r = inradius(a, region);
    if !(r > 0.0) {
        return Err(OpcError::MarginViolated(format!("0 is not inside the region (inradius {r:.3e})")));
    }
    let max_norm = d.max_norm_bound();
    let radii = select_radii(max_norm, r)?;
    let cratio = max_norm / radii.b1;
    // smallest J with b₁ · wrap ≤ tol_final/10 and defect ≤ tol_final/100
    let mut j = 1;
    while cratio > 0.0
        && (radii.b1 * dilation::wrap_bound(cratio, j) > 0.1 * tol_final || dilation::defect_bound(cratio, j) > 0.01 * tol_final)
    {
        j += 1;
    }
    let n_positions = j + 1;
    let model = dilation::build_shift(d.dim, n_positions)?;
    let dec = pinch::hermitian_split_decomp(&model.u, tol)?;
    if !dec.normal {
        return Err(OpcError::EquivalenceViolated(kernel::op_norm(&(dec.reconstruct() - &model.u))));
    }
    let inner = TargetPath::constant(kernel::diag(&dec.entries) * c(radii.b1, 0.0));
    let theta = match inst.as_ref() {
        Some(i) if a.is_reservoir() => target_margin(a, &inner, &i.region, tol)?,
        _ => radii.inradius - radii.b1,
    };
    if !(theta > 0.0) {
        return Err(OpcError::MarginViolated(format!("inner target leaves the region (margin {theta:.3e})")));
    }
    let scaled = d.scaled(1.0 / radii.b1);
    let (v, vcert) = t5_exact(inst, a, &inner, theta, 0.5 * tol_final, &[], opts)?;
    let node = PathNode::Product {
        left: Box::new(PathNode::Product {
            left: Box::new(v.root.clone()),
            right: Box::new(PathNode::Fixed { matrix: dec.v.clone() }),
        }),
        right: Box::new(PathNode::Schaffer {
            n_positions,
            target: scaled,
        }),
    };
    let mut s_path = IsometryPath::from_node(node);
    s_path.z_dim = v.z_dim;
    let wrap = dilation::wrap_bound(cratio, j);
    let wdef = dilation::defect_bound(cratio, j);
    let analytic = vcert.certified_sup_bound + radii.b1 * wrap + 1e-12;
    let an = Analysis::of(&s_path.root, a, tol);
    let sweep_opts = SynthesisOptions {
        max_grid: opts.max_grid.min(4096),
        ..opts.clone()
    };
    let s = sweep(a, d, &s_path, &an, tol_final, None, &sweep_opts)?;
    let mut cert = certificate_from(&s, &s_path, vcert.budget_used.clone());
    cert.certified_sup_bound = analytic.min(cert.certified_sup_bound).max(cert.sup_error);
    cert.partial = vcert.partial;
    cert.stop_reason = vcert.stop_reason.clone();
    cert.iterations = vcert.iterations.clone();
    cert.modulus = vcert.modulus.clone();
    cert.notes.push(format!(
        "analytic bound: inner {:.3e} + b1·wrap {:.3e}; isometry defect bound {:.3e}",
        vcert.certified_sup_bound,
        radii.b1 * wrap,
        vcert.isometry_defect + wdef
    ));
    let report = PipelineReport {
        radii,
        n_positions,
        c: cratio,
        wrap_bound: wrap,
        defect_bound: wdef,
        inner_error: vcert.certified_sup_bound,
        inner_iterations: vcert.iterations.len(),
    };
    Ok((s_path, cert, report))
}

// ---------------------------------------------------------------------------
// serialization

/// On-disk "isopath" record: the path tree with its certificate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsoPathFile {
    pub format: String,
    pub interp: String,
    pub path: IsometryPath,
    pub certificate: Certificate,
}

impl IsoPathFile {
    pub fn new(path: IsometryPath, certificate: Certificate) -> Self {
        Self {
            format: "isopath".into(),
            interp: "cos_sin".into(),
            path,
            certificate,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| OpcError::Parse(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: Self = serde_json::from_str(s).map_err(|e| OpcError::Parse(e.to_string()))?;
        if f.format != "isopath" {
            return Err(OpcError::Parse(format!("unexpected format tag {:?}", f.format)));
        }
        Ok(f)
    }
}
