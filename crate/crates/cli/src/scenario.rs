//! Scenario files: the JSON input of `opc gen` and `opc run`.
//!
//! ```json
//! {
//!   "seed": 1,
//!   "instance": {"anchors": {"roots_of_unity": 8}, "multiplicity": 64,
//!                "region": {"kind": "disk", "center": [0, 0], "radius": 0.7}},
//!   "path": {"kind": "constant", "grid_points": 2},
//!   "task": {"name": "t9", "target": {"terms": [...]}, "tol_final": 1e-6},
//!   "tolerances": {"ortho": 1e-10}
//! }
//! ```

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use opc_core::diagonals::DiagonalPlan;
use opc_core::instances::{gen_path, gen_reservoir, uniform_grid, OperatorPath, PathKind, ReservoirInstance, ScalarFn, TargetPath, TargetTerm};
use opc_core::kernel::{c, ComplexMatrix, C64};
use opc_core::numrange::GuaranteeRegion;
use opc_core::pathbuild::SynthesisOptions;
use opc_core::smoothfield::{FieldExpr, PlanarDomain};
use opc_core::{OpcError, Tolerances};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub seed: u64,
    pub instance: InstanceSection,
    #[serde(default)]
    pub path: PathSection,
    #[serde(default)]
    pub task: Option<TaskSpec>,
    /// Replaces the profile selected by `OPC_TOL_PROFILE` when present.
    #[serde(default)]
    pub tolerances: Option<Tolerances>,
    #[serde(default)]
    pub options: Option<OptionsSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Anchors {
    List(Vec<C64>),
    Roots {
        roots_of_unity: usize,
        #[serde(default = "one")]
        radius: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl Anchors {
    pub fn points(&self) -> Vec<C64> {
        match self {
            Anchors::List(v) => v.clone(),
            Anchors::Roots { roots_of_unity, radius } => (0..*roots_of_unity)
                .map(|k| C64::from_polar(*radius, 2.0 * PI * k as f64 / *roots_of_unity as f64))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceSection {
    pub anchors: Anchors,
    pub multiplicity: usize,
    pub region: GuaranteeRegion,
}

fn default_path_grid() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSection {
    #[serde(flatten)]
    pub kind: PathKind,
    #[serde(default = "default_path_grid")]
    pub grid_points: usize,
    /// Declared Lipschitz constant; rejected when below the computed one.
    #[serde(default)]
    pub lip: Option<f64>,
}

impl Default for PathSection {
    fn default() -> Self {
        Self {
            kind: PathKind::Constant,
            grid_points: default_path_grid(),
            lip: None,
        }
    }
}

/// Subset of [`SynthesisOptions`] exposed to scenarios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptionsSection {
    #[serde(default)]
    pub min_grid: Option<usize>,
    #[serde(default)]
    pub max_grid: Option<usize>,
    #[serde(default)]
    pub max_iterations: Option<usize>,
    #[serde(default)]
    pub max_k: Option<usize>,
}

/// One target term `coeff(t) · matrix`, the matrix given as rows of
/// `[re, im]` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermSpec {
    #[serde(default = "unit_coeff")]
    pub coeff: ScalarFn,
    pub matrix: Vec<Vec<C64>>,
}

fn unit_coeff() -> ScalarFn {
    ScalarFn::constant(c(1.0, 0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub terms: Vec<TermSpec>,
}

impl TargetSpec {
    pub fn build(&self) -> Result<TargetPath, OpcError> {
        let dim = self
            .terms
            .first()
            .map(|t| t.matrix.len())
            .ok_or_else(|| OpcError::Invalid("target has no terms".into()))?;
        let mut terms = Vec::with_capacity(self.terms.len());
        for (i, t) in self.terms.iter().enumerate() {
            if t.matrix.len() != dim || t.matrix.iter().any(|r| r.len() != dim) {
                return Err(OpcError::DimensionMismatch(format!("target term {i} is not {dim}x{dim}")));
            }
            let entries: Vec<C64> = t.matrix.iter().flatten().copied().collect();
            terms.push(TargetTerm {
                coeff: t.coeff.clone(),
                matrix: ComplexMatrix::from_row_slice(dim, dim, &entries),
            });
        }
        TargetPath::new(dim, terms)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompressMode {
    /// Iterated refinement down to `tol_final`.
    #[default]
    Exact,
    /// One interpolation pass at accuracy `eps`.
    Grid,
}

fn tol_t9() -> f64 {
    1e-6
}

fn tol_exact() -> f64 {
    1e-8
}

fn tail_tol() -> f64 {
    1e-12
}

fn grid_201() -> usize {
    201
}

fn families() -> usize {
    2
}

fn grid_65() -> usize {
    65
}

fn n_fields() -> usize {
    2
}

fn bary_floor() -> f64 {
    0.02
}

fn mesh_41() -> usize {
    41
}

fn mesh_21() -> usize {
    21
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TaskSpec {
    CompressPath {
        target: TargetSpec,
        #[serde(default)]
        mode: CompressMode,
        /// Accuracy of the `grid` mode.
        #[serde(default)]
        eps: Option<f64>,
        /// Margin of the `exact` mode; measured from the region when absent.
        #[serde(default)]
        theta: Option<f64>,
        #[serde(default = "tol_exact")]
        tol_final: f64,
    },
    Dilate {
        target: TargetSpec,
        /// Number of shift positions; chosen from the tail tolerance when absent.
        #[serde(default)]
        n_positions: Option<usize>,
        #[serde(default = "tail_tol")]
        tail_tol: f64,
        #[serde(default = "grid_201")]
        grid_points: usize,
    },
    Diagonals {
        d_paths: Vec<ScalarFn>,
        theta: f64,
        #[serde(default)]
        eta: Option<f64>,
        #[serde(default = "families")]
        families: usize,
        #[serde(default = "grid_65")]
        grid_points: usize,
        #[serde(default)]
        n_max: Option<usize>,
        #[serde(default)]
        targets: Option<Vec<usize>>,
    },
    SmoothField {
        field: FieldExpr,
        #[serde(default = "PlanarDomain::unit_disk")]
        domain: PlanarDomain,
        #[serde(default = "n_fields")]
        n_fields: usize,
        #[serde(default = "bary_floor")]
        bary_floor: f64,
        #[serde(default = "mesh_41")]
        cover_mesh: usize,
        #[serde(default = "mesh_21")]
        check_mesh: usize,
    },
    Selfadjoint {
        target: TargetSpec,
        #[serde(default = "tol_exact")]
        tol_final: f64,
    },
    T9 {
        target: TargetSpec,
        #[serde(default = "tol_t9")]
        tol_final: f64,
    },
}

impl TaskSpec {
    pub fn name(&self) -> &'static str {
        match self {
            TaskSpec::CompressPath { .. } => "compress-path",
            TaskSpec::Dilate { .. } => "dilate",
            TaskSpec::Diagonals { .. } => "diagonals",
            TaskSpec::SmoothField { .. } => "smooth-field",
            TaskSpec::Selfadjoint { .. } => "selfadjoint",
            TaskSpec::T9 { .. } => "t9",
        }
    }

    pub fn target(&self) -> Option<&TargetSpec> {
        match self {
            TaskSpec::CompressPath { target, .. }
            | TaskSpec::Dilate { target, .. }
            | TaskSpec::Selfadjoint { target, .. }
            | TaskSpec::T9 { target, .. } => Some(target),
            _ => None,
        }
    }

    pub fn diagonal_plan(&self) -> Option<DiagonalPlan> {
        match self {
            TaskSpec::Diagonals {
                d_paths,
                theta,
                eta,
                families,
                grid_points,
                targets,
                ..
            } => {
                let mut plan = DiagonalPlan::new(d_paths.clone(), *theta);
                if let Some(e) = eta {
                    plan.eta = *e;
                }
                plan.families = *families;
                plan.grid_points = *grid_points;
                plan.targets = targets.clone();
                Some(plan)
            }
            _ => None,
        }
    }
}

pub const TASK_NAMES: [&str; 6] = ["compress-path", "dilate", "diagonals", "smooth-field", "selfadjoint", "t9"];

/// Parses a scenario, reporting the failing field path with line and column.
pub fn parse_scenario(text: &str) -> Result<Scenario, String> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        format!("at `{path}`: {inner}")
    })
}

impl Scenario {
    pub fn tolerances(&self) -> Tolerances {
        self.tolerances.unwrap_or_else(Tolerances::from_env)
    }

    pub fn options(&self) -> SynthesisOptions {
        let mut o = SynthesisOptions {
            tol: self.tolerances(),
            ..SynthesisOptions::default()
        };
        if let Some(s) = &self.options {
            o.min_grid = s.min_grid.unwrap_or(o.min_grid);
            o.max_grid = s.max_grid.unwrap_or(o.max_grid);
            o.max_iterations = s.max_iterations.unwrap_or(o.max_iterations);
            o.max_k = s.max_k.unwrap_or(o.max_k);
        }
        o
    }

    pub fn region(&self) -> GuaranteeRegion {
        self.instance.region.clone()
    }

    pub fn build_instance(&self) -> Result<ReservoirInstance, OpcError> {
        gen_reservoir(&self.instance.anchors.points(), self.instance.multiplicity, self.region(), self.seed).map_err(|e| match e {
            OpcError::InvalidRegion(m) => OpcError::InvalidRegion(format!("instance.region: {m}")),
            OpcError::RegionNotCovered(m) => OpcError::RegionNotCovered(format!("instance.region: {m}")),
            e => e,
        })
    }

    pub fn build_path(&self, inst: &ReservoirInstance) -> Result<OperatorPath, OpcError> {
        let tol = self.tolerances();
        let path = gen_path(inst, &self.path.kind, uniform_grid(self.path.grid_points.max(2)), &tol)?;
        if let Some(lip) = self.path.lip {
            if lip + 1e-12 < path.lip_a {
                return Err(OpcError::Invalid(format!(
                    "declared path lip {lip} is below the computed {}",
                    path.lip_a
                )));
            }
        }
        Ok(path)
    }

    /// Task section, checked against an explicit `--task` choice.
    pub fn task(&self, requested: Option<&str>) -> Result<&TaskSpec, String> {
        match (&self.task, requested) {
            (None, Some(name)) => Err(format!("scenario has no task section for `{name}`")),
            (None, None) => Err("scenario has no task section".into()),
            (Some(t), Some(name)) if t.name() != name => Err(format!(
                "--task {name} does not match the scenario task `{}`",
                t.name()
            )),
            (Some(t), _) => Ok(t),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_scenario_parses() {
        let s = parse_scenario(
            r#"{"instance": {"anchors": {"roots_of_unity": 4}, "multiplicity": 2,
                 "region": {"kind": "disk", "center": [0, 0], "radius": 0.5}}}"#,
        )
        .unwrap();
        assert_eq!(s.instance.anchors.points().len(), 4);
        assert_eq!(s.path, PathSection::default());
        assert!(s.task.is_none());
    }

    #[test]
    fn errors_name_the_field() {
        let err = parse_scenario(
            r#"{"instance": {"anchors": [[1, 0], [0, 1], [-1, 0]], "multiplicity": 2,
                 "region": {"kind": "disk", "center": [0, 0], "radius": 0.2}},
                "task": {"name": "t9", "target": {"terms": [{"matrix": [[[0, 0]]]}]}, "tol_final": "x"}}"#,
        )
        .unwrap_err();
        assert!(err.contains("task"), "{err}");
        assert!(err.contains("line"), "{err}");
    }

    #[test]
    fn target_rows_build_matrix() {
        let t = TargetSpec {
            terms: vec![TermSpec {
                coeff: unit_coeff(),
                matrix: vec![vec![c(0.0, 0.0), c(0.2, 0.0)], vec![c(0.0, 0.0), c(0.0, 0.0)]],
            }],
        };
        let d = t.build().unwrap();
        assert_eq!(d.eval(0.3)[(0, 1)], c(0.2, 0.0));
    }
}
