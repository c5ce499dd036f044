//! Independent re-check of a stored artifact.
//!
//! The instance, operator path and target are rebuilt from the embedded
//! scenario and every identity is evaluated directly from the stored
//! output on a grid finer than the one used at certification time.

use serde::Serialize;

use opc_core::dilation::build_shift;
use opc_core::instances::{uniform_grid, OperatorPath, TargetPath};
use opc_core::kernel::{self, ComplexMatrix, C64};
use opc_core::par;
use opc_core::pathbuild::IsometryPath;
use opc_core::smoothfield::FieldSet;
use opc_core::diagonals::DiagSet;
use opc_core::OpcError;

use crate::run::{Artifact, TaskResult};

/// Isometry defect accepted on re-evaluation.
pub const DEFECT_LIMIT: f64 = 1e-8;
/// Field identities accepted on the dense mesh.
pub const FIELD_LIMIT: f64 = 1e-10;

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub limit: f64,
    pub passed: bool,
}

impl Check {
    fn new(name: &str, measured: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            limit,
            passed: measured.is_finite() && measured <= limit,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub task: String,
    pub points: usize,
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Verifies `art`, sampling `fine_factor` times as densely as recorded.
/// Returns `Ok(None)` for artifacts that carry no output.
pub fn verify(art: &Artifact, fine_factor: usize) -> Result<Option<VerifyReport>, OpcError> {
    let Some(result) = &art.result else {
        return Ok(None);
    };
    let fine = fine_factor.max(1);
    let report = match result {
        TaskResult::Isopath { file, .. } => {
            let (a, d) = operator_and_target(art)?;
            let points = (fine * file.certificate.verified_grid_size).max(2);
            let (err, defect) = sample_isometry(&file.path, &a, &d, points)?;
            let bound = file.certificate.certified_sup_bound;
            VerifyReport {
                task: art.task.clone(),
                points,
                checks: vec![
                    Check::new("compression_error", err, bound * (1.0 + 1e-9) + 1e-15),
                    Check::new("isometry_defect", defect, DEFECT_LIMIT),
                ],
            }
        }
        TaskResult::Dilation { path, certificate } => {
            let d = target(art)?;
            let model = build_shift(d.dim, certificate.truncation + 1)?;
            let points = (fine * certificate.grid_size).max(2);
            let grid = uniform_grid(points);
            let samples = par::map(&grid, |&t| -> Result<(f64, f64), OpcError> {
                let w = path.eval(t)?;
                let res = kernel::op_norm(&(w.ad_mul(&(&model.u * &w)) - d.eval(t)));
                Ok((res, kernel::isometry_defect(&w)))
            });
            let (res, defect) = fold_max(samples)?;
            VerifyReport {
                task: art.task.clone(),
                points,
                checks: vec![
                    Check::new("dilation_residual", res, certificate.wrap_bound * (1.0 + 1e-9) + 1e-13),
                    Check::new("isometry_defect", defect, certificate.defect_bound * (1.0 + 1e-9) + 1e-13),
                ],
            }
        }
        TaskResult::Diagset { set } => verify_diagset(art, set)?,
        TaskResult::Smoothfield { fields, .. } => verify_fields(art, fields, fine)?,
    };
    Ok(Some(report))
}

fn target(art: &Artifact) -> Result<TargetPath, OpcError> {
    art.scenario
        .task
        .as_ref()
        .and_then(|t| t.target())
        .ok_or_else(|| OpcError::Invalid("artifact scenario has no target".into()))?
        .build()
}

fn operator_and_target(art: &Artifact) -> Result<(OperatorPath, TargetPath), OpcError> {
    let inst = art.scenario.build_instance()?;
    Ok((art.scenario.build_path(&inst)?, target(art)?))
}

fn fold_max(samples: Vec<Result<(f64, f64), OpcError>>) -> Result<(f64, f64), OpcError> {
    let mut acc = (0.0_f64, 0.0_f64);
    for s in samples {
        let (x, y) = s?;
        // NaN must not be swallowed by max
        acc.0 = if x.is_nan() { f64::NAN } else { acc.0.max(x) };
        acc.1 = if y.is_nan() { f64::NAN } else { acc.1.max(y) };
    }
    Ok(acc)
}

/// Largest `‖V*AV − D‖` and `‖V*V − I‖` over a uniform grid of `points`.
pub fn sample_isometry(v: &IsometryPath, a: &OperatorPath, d: &TargetPath, points: usize) -> Result<(f64, f64), OpcError> {
    let grid = uniform_grid(points);
    let samples = par::map(&grid, |&t| -> Result<(f64, f64), OpcError> {
        let (err, defect) = errors_at(v, a, d, t)?;
        Ok((err, defect))
    });
    fold_max(samples)
}

/// `(‖V*AV − D‖, ‖V*V − I‖)` at time `t`.
pub fn errors_at(v: &IsometryPath, a: &OperatorPath, d: &TargetPath, t: f64) -> Result<(f64, f64), OpcError> {
    let vt = v.eval(t)?;
    let av = a.apply(t, &vt);
    Ok((kernel::op_norm(&(vt.ad_mul(&av) - d.eval(t))), kernel::isometry_defect(&vt)))
}

/// Node-wise check of a diagonal set against its recorded values.
fn verify_diagset(art: &Artifact, set: &DiagSet) -> Result<VerifyReport, OpcError> {
    let inst = art.scenario.build_instance()?;
    let a = art.scenario.build_path(&inst)?;
    if set.vectors.iter().any(|v| v.values.len() != set.grid.len()) {
        return Err(OpcError::DimensionMismatch("vector samples do not match the grid".into()));
    }
    let nodes: Vec<usize> = (0..set.grid.len()).collect();
    let per_node = par::map(&nodes, |&i| {
        let t = set.grid[i];
        let cols: Vec<&ComplexMatrix> = set.vectors.iter().map(|v| &v.values[i]).collect();
        let gram = if cols.is_empty() {
            0.0
        } else {
            kernel::isometry_defect(&kernel::hstack(&cols))
        };
        let res: Vec<f64> = set
            .vectors
            .iter()
            .zip(&set.plan.d_paths)
            .map(|(v, d)| {
                let x = &v.values[i];
                (kernel::inner(x, &a.apply(t, x)) - d.eval(t)).norm()
            })
            .collect();
        (gram, res)
    });
    let mut gram: f64 = 0.0;
    let mut residual: f64 = 0.0;
    for (g, res) in per_node {
        gram = if g.is_nan() { f64::NAN } else { gram.max(g) };
        for r in res {
            residual = if r.is_nan() { f64::NAN } else { residual.max(r) };
        }
    }
    let cert = &set.certificate;
    Ok(VerifyReport {
        task: art.task.clone(),
        points: set.grid.len(),
        checks: vec![
            Check::new("gram_defect", gram, cert.gram_defect + 1e-12),
            Check::new("diagonal_residual", residual, cert.residual + 1e-12),
        ],
    })
}

fn verify_fields(art: &Artifact, set: &FieldSet, fine: usize) -> Result<VerifyReport, OpcError> {
    let inst = art.scenario.build_instance()?;
    let a = inst.matrix();
    let mesh = set.domain.mesh(10 * fine + 1);
    let samples = par::map(&mesh, |&w| -> Result<(f64, f64, f64), OpcError> {
        let s = set.isometry(w)?;
        let z: C64 = set.expr.eval(w);
        let comp = s.ad_mul(&(&a * &s));
        let n = s.ncols();
        let resid = (0..n).map(|j| (comp[(j, j)] - z).norm()).fold(0.0, f64::max);
        let compression = kernel::op_norm(&(comp - ComplexMatrix::identity(n, n) * z));
        Ok((kernel::isometry_defect(&s), resid, compression))
    });
    let (mut defect, mut resid, mut comp) = (0.0_f64, 0.0_f64, 0.0_f64);
    for s in samples {
        let (x, y, z) = s?;
        defect = if x.is_nan() { f64::NAN } else { defect.max(x) };
        resid = if y.is_nan() { f64::NAN } else { resid.max(y) };
        comp = if z.is_nan() { f64::NAN } else { comp.max(z) };
    }
    Ok(VerifyReport {
        task: art.task.clone(),
        points: mesh.len(),
        checks: vec![
            Check::new("isometry_defect", defect, FIELD_LIMIT),
            Check::new("diagonal_residual", resid, FIELD_LIMIT),
            Check::new("compression_defect", comp, FIELD_LIMIT),
        ],
    })
}
