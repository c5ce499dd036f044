//! Library side of the `opc` command: scenario parsing, task dispatch,
//! verification and reports. `main.rs` only maps arguments and exit codes.

pub mod report;
pub mod run;
pub mod scenario;
pub mod verify;

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use opc_core::OpcError;

use crate::run::{Artifact, Status, TaskResult, ARTIFACT_FORMAT};
use crate::scenario::Scenario;

pub const EXIT_OK: i32 = 0;
pub const EXIT_SCHEMA: i32 = 2;
pub const EXIT_ROOM: i32 = 3;
pub const EXIT_PRECONDITION: i32 = 4;
pub const EXIT_VERIFY: i32 = 5;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {message}")]
    Schema { path: String, message: String },
    #[error("{0}")]
    Core(#[from] OpcError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("verification failed: {0}")]
    Verify(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Schema { .. } | CliError::Io { .. } => EXIT_SCHEMA,
            CliError::Core(e) => core_exit_code(e),
            CliError::Verify(_) => EXIT_VERIFY,
        }
    }
}

pub fn core_exit_code(e: &OpcError) -> i32 {
    match e {
        OpcError::Parse(_)
        | OpcError::InvalidRegion(_)
        | OpcError::RegionNotCovered(_)
        | OpcError::Invalid(_)
        | OpcError::DimensionMismatch(_)
        | OpcError::NonFinite { .. }
        | OpcError::NotSquare { .. } => EXIT_SCHEMA,
        OpcError::RoomExhausted { .. } => EXIT_ROOM,
        _ => EXIT_PRECONDITION,
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|source| CliError::Io {
                path: dir.display().to_string(),
                source,
            })?;
        }
    }
    fs::write(path, text).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

pub fn load_scenario(path: &Path) -> Result<Scenario, CliError> {
    let text = read(path)?;
    scenario::parse_scenario(&text).map_err(|message| CliError::Schema {
        path: path.display().to_string(),
        message,
    })
}

pub fn load_artifact(path: &Path) -> Result<Artifact, CliError> {
    let text = read(path)?;
    let art: Artifact = serde_json::from_str(&text).map_err(|e| CliError::Schema {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    if art.format != ARTIFACT_FORMAT {
        return Err(CliError::Schema {
            path: path.display().to_string(),
            message: format!("unexpected format tag {:?}", art.format),
        });
    }
    Ok(art)
}

/// `opc gen`: instance, region and budget files for the scenario.
pub fn cmd_gen(scenario: &Scenario, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let inst = scenario.build_instance()?;
    let budget = serde_json::json!({
        "multiplicity": inst.multiplicity,
        "anchors": inst.anchors.len(),
        "dim": inst.dim(),
        "used": inst.used(),
    });
    let files = [
        ("instance.json", to_json(&inst.spec())),
        ("region.json", to_json(&inst.region)),
        ("budget.json", to_json(&budget)),
    ];
    let mut written = Vec::new();
    for (name, text) in files {
        let p = out.join(name);
        write(&p, &text)?;
        written.push(p);
    }
    Ok(written)
}

/// Outcome of `opc run`: the artifact that was written and the exit code.
#[derive(Debug)]
pub struct RunOutcome {
    pub artifact: Artifact,
    pub path: PathBuf,
    pub exit_code: i32,
}

/// `opc run`: always writes `artifact.json` (also for failures) plus the
/// task's own output file.
pub fn cmd_run(scenario: &Scenario, task: Option<&str>, out: &Path) -> Result<RunOutcome, CliError> {
    let spec = scenario.task(task).map_err(|message| CliError::Schema {
        path: "task".into(),
        message,
    })?;
    let (artifact, exit_code) = match run::run_task(scenario, spec) {
        Ok(a) => {
            let code = if a.status == Status::Partial { EXIT_ROOM } else { EXIT_OK };
            (a, code)
        }
        Err(e) => (run::failed_artifact(scenario, spec.name(), &e), core_exit_code(&e)),
    };
    let path = out.join("artifact.json");
    write(&path, &to_json(&artifact))?;
    match &artifact.result {
        Some(TaskResult::Isopath { file, .. }) => write(&out.join("isopath.json"), &file.to_json()?)?,
        Some(TaskResult::Diagset { set }) => write(&out.join("diagset.json"), &set.to_json()?)?,
        Some(TaskResult::Smoothfield { fields, .. }) => write(&out.join("smoothfield.json"), &fields.to_json()?)?,
        _ => {}
    }
    Ok(RunOutcome {
        artifact,
        path,
        exit_code,
    })
}

/// `opc verify`: `Ok(None)` when the artifact carries nothing to check.
pub fn cmd_verify(art: &Artifact, fine_factor: usize) -> Result<Option<verify::VerifyReport>, CliError> {
    let report = verify::verify(art, fine_factor).map_err(|e| match e {
        e @ (OpcError::Parse(_) | OpcError::DimensionMismatch(_) | OpcError::Invalid(_)) => CliError::Core(e),
        e => CliError::Verify(e.to_string()),
    })?;
    if let Some(r) = &report {
        if !r.passed() {
            let failed: Vec<String> = r
                .checks
                .iter()
                .filter(|c| !c.passed)
                .map(|c| format!("{} = {:.3e} > {:.3e}", c.name, c.measured, c.limit))
                .collect();
            return Err(CliError::Verify(failed.join("; ")));
        }
    }
    Ok(report)
}

/// `opc report`: writes `report.csv` and optionally `report.svg`.
pub fn cmd_report(art: &Artifact, out: &Path, svg: bool) -> Result<Vec<PathBuf>, CliError> {
    let mut written = Vec::new();
    let p = out.join("report.csv");
    write(&p, &report::csv_report(art)?)?;
    written.push(p);
    if svg {
        let p = out.join("report.svg");
        write(&p, &report::svg_report(art)?)?;
        written.push(p);
    }
    Ok(written)
}
