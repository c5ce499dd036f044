//! Task dispatch for `opc run`.

use serde::{Deserialize, Serialize};

use opc_core::diagonals::{self, DiagSet};
use opc_core::dilation::{self, SchafferCertificate};
use opc_core::instances::{uniform_grid, ReservoirInstance};
use opc_core::pathbuild::{self, IsoPathFile, IsometryPath, PipelineReport};
use opc_core::selfadjoint::{self, TwoPointReport};
use opc_core::smoothfield::{self, FieldCheck, FieldSet, SmoothnessReport};
use opc_core::OpcError;

use crate::scenario::{CompressMode, Scenario, TaskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Certified,
    Partial,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskResult {
    Isopath {
        file: IsoPathFile,
        #[serde(default)]
        pipeline: Option<PipelineReport>,
        #[serde(default)]
        two_point: Option<TwoPointReport>,
    },
    Dilation {
        path: IsometryPath,
        certificate: SchafferCertificate,
    },
    Diagset {
        set: DiagSet,
    },
    Smoothfield {
        fields: FieldSet,
        check: FieldCheck,
        smoothness: SmoothnessReport,
        requested: usize,
    },
}

/// Everything `opc verify` and `opc report` need: the scenario echo and the
/// task output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub format: String,
    pub task: String,
    pub scenario: Scenario,
    pub status: Status,
    #[serde(default)]
    pub message: Option<String>,
    #[serde(default)]
    pub result: Option<TaskResult>,
}

pub const ARTIFACT_FORMAT: &str = "opc-artifact";

impl Artifact {
    fn new(scenario: &Scenario, task: &str, status: Status, message: Option<String>, result: Option<TaskResult>) -> Self {
        Self {
            format: ARTIFACT_FORMAT.into(),
            task: task.into(),
            scenario: scenario.clone(),
            status,
            message,
            result,
        }
    }
}

fn partial_flag(partial: bool) -> Status {
    if partial {
        Status::Partial
    } else {
        Status::Certified
    }
}

/// Runs the scenario task. Errors raised before anything was built come
/// back as `Err`; budget exhaustion with usable output is a `Partial`
/// artifact.
pub fn run_task(scenario: &Scenario, task: &TaskSpec) -> Result<Artifact, OpcError> {
    let mut inst = scenario.build_instance()?;
    let name = task.name();
    let result = match task {
        TaskSpec::Dilate {
            target,
            n_positions,
            tail_tol,
            grid_points,
        } => {
            let d = target.build()?;
            let cmax = d.max_norm_bound();
            let n = match n_positions {
                Some(n) => *n,
                None if cmax <= 0.0 => 2,
                None if cmax < 1.0 => ((tail_tol.ln() / cmax.ln()).ceil() as usize).max(2),
                None => return Err(OpcError::NormNotStrictContraction(cmax)),
            };
            let model = dilation::build_shift(d.dim, n)?;
            let (path, certificate) =
                dilation::schaffer_path(&model, &d, &uniform_grid(*grid_points), *tail_tol, &scenario.tolerances())?;
            (Status::Certified, TaskResult::Dilation { path, certificate })
        }
        TaskSpec::Diagonals { n_max, .. } => {
            let plan = task.diagonal_plan().expect("diagonal task");
            let a = scenario.build_path(&inst)?;
            let n = n_max.unwrap_or(plan.d_paths.len());
            let tol = scenario.tolerances();
            let set = if inst.region.is_interval() {
                selfadjoint::diagonalself(&mut inst, &a, &plan, n, &tol)?
            } else {
                diagonals::synthesize_basis(&mut inst, &a, &plan, n, &tol)?
            };
            (partial_flag(set.certificate.partial), TaskResult::Diagset { set })
        }
        TaskSpec::SmoothField {
            field,
            domain,
            n_fields,
            bary_floor,
            cover_mesh,
            check_mesh,
        } => {
            let cover = smoothfield::build_cover(&inst, field, domain, *bary_floor, *cover_mesh)?;
            let (fields, stop) = fields_until_exhausted(&mut inst, &cover, field, domain, *n_fields)?;
            let mesh = domain.mesh(*check_mesh);
            let check = smoothfield::check_fields(&inst.matrix(), &fields, &mesh)?;
            let h = [0.02, 0.01, 0.005, 0.0025];
            let points = smoothfield::interior_points(domain, &domain.mesh(9), h[0]);
            let smoothness = smoothfield::smoothness_check(|w| fields.eval(0, w), &points, &h, 2)?;
            let status = partial_flag(stop.is_some());
            return Ok(Artifact::new(
                scenario,
                name,
                status,
                stop,
                Some(TaskResult::Smoothfield {
                    fields,
                    check,
                    smoothness,
                    requested: *n_fields,
                }),
            ));
        }
        TaskSpec::CompressPath {
            target,
            mode,
            eps,
            theta,
            tol_final,
        } => {
            let a = scenario.build_path(&inst)?;
            let d = target.build()?;
            let opts = scenario.options();
            let (v, cert) = match mode {
                CompressMode::Grid => {
                    let eps = eps.ok_or_else(|| OpcError::Invalid("grid mode needs `eps`".into()))?;
                    pathbuild::l2_grid_compress(Some(&mut inst), &a, &d, eps, &[], &opts)?
                }
                CompressMode::Exact => {
                    let theta = match theta {
                        Some(t) => *t,
                        None => pathbuild::target_margin(&a, &d, &inst.region, &opts.tol)?,
                    };
                    pathbuild::t5_exact(Some(&mut inst), &a, &d, theta, *tol_final, &[], &opts)?
                }
            };
            let status = partial_flag(cert.partial);
            (
                status,
                TaskResult::Isopath {
                    file: IsoPathFile::new(v, cert),
                    pipeline: None,
                    two_point: None,
                },
            )
        }
        TaskSpec::Selfadjoint { target, tol_final } => {
            let a = scenario.build_path(&inst)?;
            let d = target.build()?;
            let (s, cert, rep) = selfadjoint::t2self_pipeline(&mut inst, &a, &d, *tol_final, &scenario.options())?;
            (
                partial_flag(cert.partial),
                TaskResult::Isopath {
                    file: IsoPathFile::new(s, cert),
                    pipeline: None,
                    two_point: Some(rep),
                },
            )
        }
        TaskSpec::T9 { target, tol_final } => {
            let a = scenario.build_path(&inst)?;
            let d = target.build()?;
            let region = inst.region.clone();
            let (s, cert, rep) = pathbuild::t9_pipeline(Some(&mut inst), &a, &d, &region, *tol_final, &scenario.options())?;
            (
                partial_flag(cert.partial),
                TaskResult::Isopath {
                    file: IsoPathFile::new(s, cert),
                    pipeline: Some(rep),
                    two_point: None,
                },
            )
        }
    };
    let (status, result) = result;
    let message = match &result {
        TaskResult::Isopath { file, .. } => file.certificate.stop_reason.clone(),
        TaskResult::Diagset { set } => set.certificate.stop_reason.clone(),
        _ => None,
    };
    Ok(Artifact::new(scenario, name, status, message, Some(result)))
}

/// Builds fields one at a time so budget exhaustion keeps the finished ones.
fn fields_until_exhausted(
    inst: &mut ReservoirInstance,
    cover: &smoothfield::TriangleCover,
    field: &smoothfield::FieldExpr,
    domain: &smoothfield::PlanarDomain,
    n_fields: usize,
) -> Result<(FieldSet, Option<String>), OpcError> {
    let mut set: Option<FieldSet> = None;
    for n in 0..n_fields {
        match smoothfield::build_fields(inst, cover, field, domain, 1) {
            Ok(one) => match &mut set {
                None => set = Some(one),
                Some(s) => s.vectors.extend(one.vectors),
            },
            Err(e) if e.is_room_exhausted() && set.is_some() => {
                return Ok((set.unwrap(), Some(format!("field {}: {e}", n + 1))));
            }
            Err(e) => return Err(e),
        }
    }
    Ok((set.expect("at least one field requested"), None))
}

/// Artifact for a run that failed before producing output.
pub fn failed_artifact(scenario: &Scenario, task: &str, err: &OpcError) -> Artifact {
    let status = if err.is_room_exhausted() {
        Status::Partial
    } else {
        Status::Failed
    };
    Artifact::new(scenario, task, status, Some(err.to_string()), None)
}
