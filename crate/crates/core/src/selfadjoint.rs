//! Self-adjoint shortcuts: paths of Hermitian targets whose spectra stay in
//! `[a, b]` are compressions of the two-point operator `aI ⊕ bI` in closed
//! form, so no iteration is needed once that operator has been found inside
//! the instance.

use serde::{Deserialize, Serialize};

use crate::diagonals::{self, DiagSet, DiagonalPlan};
use crate::error::{OpcError, Result};
use crate::instances::{uniform_grid, Motion, OperatorPath, ReservoirInstance, TargetPath};
use crate::kernel::{self, c, ComplexMatrix, Subspace};
use crate::numrange::RegionKind;
use crate::pathbuild::{self, Certificate, IsometryPath, PathNode, SynthesisOptions};
use crate::tol::Tolerances;

fn anchor_index(inst: &ReservoirInstance, value: f64) -> Result<usize> {
    inst.anchors
        .iter()
        .position(|z| (z.re - value).abs() <= 1e-12 * value.abs().max(1.0) && z.im.abs() <= 1e-12)
        .ok_or_else(|| OpcError::Invalid(format!("{value} is not an anchor of the instance")))
}

/// Orthonormal `e_1..e_p` in the `a`-eigenspace and `f_1..f_p` in the
/// `b`-eigenspace, avoiding `forbidden` and earlier ledger entries.
pub fn two_point_reservoir(
    inst: &mut ReservoirInstance,
    a: f64,
    b: f64,
    p: usize,
    forbidden: &[ComplexMatrix],
    tol: &Tolerances,
) -> Result<(Subspace, Subspace)> {
    if !inst.is_selfadjoint() {
        return Err(OpcError::NotSelfAdjoint(0.0));
    }
    let (ka, kb) = (anchor_index(inst, a)?, anchor_index(inst, b)?);
    let mut legs = Vec::with_capacity(2);
    for k in [ka, kb] {
        let mut cols = Vec::with_capacity(p);
        for _ in 0..p {
            cols.push(inst.allocate_eigvec(k, forbidden, None)?);
        }
        let refs: Vec<&ComplexMatrix> = cols.iter().collect();
        let basis = if p == 0 {
            ComplexMatrix::zeros(inst.dim(), 0)
        } else {
            kernel::hstack(&refs)
        };
        legs.push(Subspace::new(basis, tol)?);
    }
    let hb = legs.pop().unwrap();
    Ok((legs.pop().unwrap(), hb))
}

/// `W x = L_a ((b − D)/(b − a))^{1/2} x + L_b ((D − a)/(b − a))^{1/2} x`.
pub fn two_point_matrix(
    a: f64,
    b: f64,
    d: &ComplexMatrix,
    leg_a: &ComplexMatrix,
    leg_b: &ComplexMatrix,
    tol: &Tolerances,
) -> Result<ComplexMatrix> {
    let n = kernel::ensure_square(d)?;
    let scale = d.iter().fold(1.0_f64, |m, z| m.max(z.norm()));
    let asym = kernel::hermitian_defect(d);
    if asym > tol.herm * scale {
        return Err(OpcError::NotHermitian(asym));
    }
    let id = ComplexMatrix::identity(n, n);
    let w = 1.0 / (b - a);
    let lower = kernel::psd_sqrt(&((&id * c(b, 0.0) - d) * c(w, 0.0)), tol)?;
    let upper = kernel::psd_sqrt(&((d - &id * c(a, 0.0)) * c(w, 0.0)), tol)?;
    Ok(leg_a.columns(0, n) * lower + leg_b.columns(0, n) * upper)
}

fn spectrum_range(d: &TargetPath, times: &[f64], tol: &Tolerances) -> Result<Vec<(f64, f64, f64)>> {
    times
        .iter()
        .map(|&t| {
            let dt = d.eval(t);
            let scale = dt.iter().fold(1.0_f64, |m, z| m.max(z.norm()));
            let asym = kernel::hermitian_defect(&dt);
            if asym > tol.herm * scale {
                return Err(OpcError::NotHermitian(asym));
            }
            let (values, _) = kernel::hermitian_eig(&kernel::re_part(&dt), tol)?;
            Ok((t, values[0], *values.last().unwrap()))
        })
        .collect()
}

fn check_times(d: &TargetPath) -> Vec<f64> {
    let mut times = uniform_grid(201);
    for term in &d.terms {
        if let crate::instances::ScalarFn::Linear { knots, .. } = &term.coeff {
            times.extend_from_slice(knots);
        }
    }
    times.sort_by(|x, y| x.partial_cmp(y).unwrap());
    times.dedup();
    times
}

/// Closed-form isometry path into `H_a ⊕ H_b` with `W*(aP_a + bP_b)W = D`.
pub fn selfadjoint_dilate(
    h_a: &Subspace,
    h_b: &Subspace,
    a: f64,
    b: f64,
    d: &TargetPath,
    tol: &Tolerances,
) -> Result<IsometryPath> {
    if !(a < b) {
        return Err(OpcError::Invalid(format!("need a < b (got {a}, {b})")));
    }
    if d.dim > h_a.dim() || d.dim > h_b.dim() {
        return Err(OpcError::DimensionMismatch(format!(
            "target of dimension {} but legs of dimension {} and {}",
            d.dim,
            h_a.dim(),
            h_b.dim()
        )));
    }
    let slack = tol.psd * a.abs().max(b.abs()).max(1.0);
    let mut margin = f64::INFINITY;
    for (t, lo, hi) in spectrum_range(d, &check_times(d), tol)? {
        if lo < a - slack || hi > b + slack {
            return Err(OpcError::SpectrumOutsideInterval { a, b, t });
        }
        margin = margin.min(b - hi).min(lo - a);
    }
    let node = PathNode::TwoPoint {
        a,
        b,
        target: d.clone(),
        margin: margin.max(0.0),
        leg_a: h_a.basis().columns(0, d.dim).into_owned(),
        leg_b: h_b.basis().columns(0, d.dim).into_owned(),
    };
    let rows = h_a.ambient_dim();
    Ok(IsometryPath::new(node, rows, d.dim))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoPointReport {
    pub a: f64,
    pub b: f64,
    pub a_inner: f64,
    pub b_inner: f64,
    pub theta: f64,
    pub inner_error: f64,
}

/// `a′ = (a + min σ)/2`, `b′ = (b + max σ)/2`.
pub fn inner_interval(a: f64, b: f64, sigma_min: f64, sigma_max: f64) -> (f64, f64) {
    (0.5 * (a + sigma_min), 0.5 * (b + sigma_max))
}

/// Interval `[a, b]` of the instance together with the range of a real
/// drift, giving the interval available at every `t`.
fn effective_interval(inst: &ReservoirInstance, path: &OperatorPath) -> Result<(f64, f64)> {
    let (a, b) = match inst.region.kind {
        RegionKind::Interval { a, b } => (a, b),
        _ => return Err(OpcError::InvalidRegion("self-adjoint pipeline needs an interval region".into())),
    };
    let (mut lo, mut hi) = (0.0_f64, 0.0_f64);
    if let Motion::Drift { c } = &path.motion {
        for t in uniform_grid(1025) {
            let z = c.eval(t);
            if z.im.abs() > 1e-12 {
                return Err(OpcError::NotSelfAdjoint(t));
            }
            lo = lo.min(z.re);
            hi = hi.max(z.re);
        }
        let pad = 0.5 * c.lip() / 1024.0;
        lo -= pad;
        hi += pad;
    } else if !matches!(path.motion, Motion::Constant) {
        return Err(OpcError::Invalid("self-adjoint pipeline supports constant and drift paths".into()));
    }
    Ok((a + hi, b + lo))
}

/// `S(t) = V(t) W(t)`: `V` compresses `A` to the stationary `a′I ⊕ b′I` and
/// `W` is the closed-form dilation of `D` to that two-point operator.
pub fn t2self_pipeline(
    inst: &mut ReservoirInstance,
    path: &OperatorPath,
    d: &TargetPath,
    tol_final: f64,
    opts: &SynthesisOptions,
) -> Result<(IsometryPath, Certificate, TwoPointReport)> {
    let tol = &opts.tol;
    for &t in &path.grid {
        if !path.is_selfadjoint_at(t, tol) {
            return Err(OpcError::NotSelfAdjoint(t));
        }
    }
    let (a, b) = effective_interval(inst, path)?;
    let spectra = spectrum_range(d, &check_times(d), tol)?;
    let lo = spectra.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
    let hi = spectra.iter().map(|s| s.2).fold(f64::NEG_INFINITY, f64::max);
    if let Some(&(t, _, _)) = spectra.iter().find(|s| s.1 <= a || s.2 >= b) {
        return Err(OpcError::SpectrumOutsideInterval { a, b, t });
    }
    let (ai, bi) = inner_interval(a, b, lo, hi);
    let n = d.dim;
    let mut entries = vec![c(ai, 0.0); n];
    entries.extend(std::iter::repeat_n(c(bi, 0.0), n));
    let inner = TargetPath::constant(kernel::diag(&entries));
    let theta = pathbuild::target_margin(path, &inner, &inst.region, tol)?;
    let (v, vcert) = pathbuild::t5_exact(Some(inst), path, &inner, theta, tol_final, &[], opts)?;
    let legs = ComplexMatrix::identity(2 * n, 2 * n);
    let w = selfadjoint_dilate(
        &Subspace::new(legs.columns(0, n).into_owned(), tol)?,
        &Subspace::new(legs.columns(n, n).into_owned(), tol)?,
        ai,
        bi,
        d,
        tol,
    )?;
    let node = PathNode::Product {
        left: Box::new(v.root.clone()),
        right: Box::new(w.root),
    };
    let mut s = IsometryPath::new(node, v.rows, n);
    s.z_dim = v.z_dim;
    let mut cert = pathbuild::certify(path, d, &s, tol_final, opts)?;
    cert.certified_sup_bound = cert.certified_sup_bound.min(vcert.certified_sup_bound + 1e-12).max(cert.sup_error);
    cert.budget_used = vcert.budget_used.clone();
    cert.partial = vcert.partial;
    cert.stop_reason = vcert.stop_reason.clone();
    cert.iterations = vcert.iterations.clone();
    cert.modulus = vcert.modulus.clone();
    let report = TwoPointReport {
        a,
        b,
        a_inner: ai,
        b_inner: bi,
        theta,
        inner_error: vcert.certified_sup_bound,
    };
    Ok((s, cert, report))
}

/// Self-adjoint variant: interval region, Hermitian path, real diagonals.
pub fn diagonalself(
    inst: &mut ReservoirInstance,
    a: &OperatorPath,
    plan: &DiagonalPlan,
    n_max: usize,
    tol: &Tolerances,
) -> Result<DiagSet> {
    if !matches!(inst.region.kind, RegionKind::Interval { .. }) {
        return Err(OpcError::InvalidRegion("self-adjoint diagonals need an interval region".into()));
    }
    for &t in &a.grid {
        if !a.is_selfadjoint_at(t, tol) {
            return Err(OpcError::NotSelfAdjoint(t));
        }
    }
    for t in plan.grid(a) {
        for d in &plan.d_paths {
            if d.eval(t).im.abs() > tol.herm {
                return Err(OpcError::NotSelfAdjoint(t));
            }
        }
    }
    diagonals::synthesize_basis(inst, a, plan, n_max, tol)
}
