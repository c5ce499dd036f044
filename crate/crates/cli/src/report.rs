//! CSV and SVG summaries of an artifact.

use std::fmt::Write as _;

use opc_core::instances::uniform_grid;
use opc_core::kernel::{self, C64};
use opc_core::numrange::{nr_boundary, RegionKind};
use opc_core::OpcError;

use crate::run::{Artifact, TaskResult};
use crate::scenario::TaskSpec;
use crate::verify::errors_at;

/// Per-sample table of the artifact on its own verification grid. Empty
/// artifacts give a header-only table.
pub fn csv_report(art: &Artifact) -> Result<String, OpcError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| OpcError::Invalid(format!("csv: {e}"));
    let f = |x: f64| format!("{x:.6e}");
    match &art.result {
        Some(TaskResult::Smoothfield { .. }) => {
            w.write_record(["x", "y", "error", "isometry_defect"]).map_err(io)?;
        }
        None if matches!(art.scenario.task, Some(TaskSpec::SmoothField { .. })) => {
            w.write_record(["x", "y", "error", "isometry_defect"]).map_err(io)?;
        }
        _ => {
            let mut header = vec!["t".to_string(), "error".into(), "isometry_defect".into()];
            let residuals = match (&art.result, &art.scenario.task) {
                (Some(TaskResult::Diagset { set }), _) => set.vectors.len(),
                (None, Some(TaskSpec::Diagonals { d_paths, .. })) => d_paths.len(),
                _ => 0,
            };
            header.extend((1..=residuals).map(|n| format!("residual_{n}")));
            w.write_record(&header).map_err(io)?;
        }
    }
    match &art.result {
        None => {}
        Some(TaskResult::Isopath { file, .. }) => {
            let inst = art.scenario.build_instance()?;
            let a = art.scenario.build_path(&inst)?;
            let d = target(art)?;
            let grid = uniform_grid(file.certificate.verified_grid_size.max(2));
            let rows = opc_core::par::map(&grid, |&t| errors_at(&file.path, &a, &d, t));
            for (t, r) in grid.iter().zip(rows) {
                let (e, def) = r?;
                w.write_record([f(*t), f(e), f(def)]).map_err(io)?;
            }
        }
        Some(TaskResult::Dilation { path, certificate }) => {
            let d = target(art)?;
            let model = opc_core::dilation::build_shift(d.dim, certificate.truncation + 1)?;
            for t in uniform_grid(certificate.grid_size.max(2)) {
                let v = path.eval(t)?;
                let e = kernel::op_norm(&(v.ad_mul(&(&model.u * &v)) - d.eval(t)));
                w.write_record([f(t), f(e), f(kernel::isometry_defect(&v))]).map_err(io)?;
            }
        }
        Some(TaskResult::Diagset { set }) => {
            let inst = art.scenario.build_instance()?;
            let a = art.scenario.build_path(&inst)?;
            for (i, &t) in set.grid.iter().enumerate() {
                let res: Vec<f64> = set
                    .vectors
                    .iter()
                    .zip(&set.plan.d_paths)
                    .map(|(v, d)| (kernel::inner(&v.values[i], &a.apply(t, &v.values[i])) - d.eval(t)).norm())
                    .collect();
                let cols: Vec<_> = set.vectors.iter().map(|v| &v.values[i]).collect();
                let gram = if cols.is_empty() {
                    0.0
                } else {
                    kernel::isometry_defect(&kernel::hstack(&cols))
                };
                let mut row = vec![f(t), f(res.iter().copied().fold(0.0, f64::max)), f(gram)];
                row.extend(res.into_iter().map(f));
                w.write_record(&row).map_err(io)?;
            }
        }
        Some(TaskResult::Smoothfield { fields, check, .. }) => {
            let a = art.scenario.build_instance()?.matrix();
            let side = (check.mesh_size as f64).sqrt().ceil() as usize;
            for wpt in fields.domain.mesh(side.max(2)) {
                let s = fields.isometry(wpt)?;
                let z = fields.expr.eval(wpt);
                let comp = s.ad_mul(&(&a * &s));
                let e = (0..s.ncols()).map(|j| (comp[(j, j)] - z).norm()).fold(0.0, f64::max);
                w.write_record([f(wpt.re), f(wpt.im), f(e), f(kernel::isometry_defect(&s))]).map_err(io)?;
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| OpcError::Invalid(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| OpcError::Invalid(e.to_string()))
}

fn target(art: &Artifact) -> Result<opc_core::instances::TargetPath, OpcError> {
    art.scenario
        .task
        .as_ref()
        .and_then(|t| t.target())
        .ok_or_else(|| OpcError::Invalid("artifact scenario has no target".into()))?
        .build()
}

const SVG_SIZE: f64 = 480.0;

/// Numerical range boundary of the anchor diagonal, as plotted.
pub fn anchor_boundary(art: &Artifact) -> Result<Vec<C64>, OpcError> {
    let anchors = art.scenario.instance.anchors.points();
    nr_boundary(&kernel::diag(&anchors), 256, &art.scenario.tolerances())
}

/// Complex-plane picture: anchor hull boundary, guarantee region and, for
/// diagonal sets, the prescribed trajectories.
pub fn svg_report(art: &Artifact) -> Result<String, OpcError> {
    let hull = anchor_boundary(art)?;
    let region = art.scenario.region();
    let mut curves: Vec<Vec<C64>> = Vec::new();
    if let Some(TaskResult::Diagset { set }) = &art.result {
        let ts = uniform_grid(129);
        curves = set.plan.d_paths.iter().map(|d| ts.iter().map(|&t| d.eval(t)).collect()).collect();
    }
    let r = hull
        .iter()
        .chain(curves.iter().flatten())
        .map(|z| z.re.abs().max(z.im.abs()))
        .fold(region.outer_radius(), f64::max)
        * 1.1;
    let size = SVG_SIZE;
    let map = |z: C64| ((z.re + r) / (2.0 * r) * size, (r - z.im) / (2.0 * r) * size);
    let points = |zs: &[C64]| {
        zs.iter()
            .map(|&z| {
                let (x, y) = map(z);
                format!("{x:.3},{y:.3}")
            })
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}" data-radius="{r:e}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r##"<polygon id="anchor-range" fill="none" stroke="#555" stroke-width="1.5" points="{}"/>"##,
        points(&hull)
    );
    let boundary = region.boundary_points(256);
    let region_elem = if matches!(region.kind, RegionKind::Interval { .. }) {
        "polyline"
    } else {
        "polygon"
    };
    let _ = writeln!(
        s,
        r##"<{region_elem} id="region" fill="#cde" fill-opacity="0.5" stroke="#246" points="{}"/>"##,
        points(&boundary)
    );
    for (n, curve) in curves.iter().enumerate() {
        let _ = writeln!(
            s,
            r##"<polyline id="diagonal-{}" fill="none" stroke="#c33" points="{}"/>"##,
            n + 1,
            points(curve)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Parses the `points` attribute of the element with the given id back to
/// plane coordinates.
pub fn svg_points(svg: &str, id: &str) -> Option<Vec<C64>> {
    let attr = |line: &str, name: &str| -> Option<String> {
        let key = format!("{name}=\"");
        let start = line.find(&key)? + key.len();
        let end = start + line[start..].find('"')?;
        Some(line[start..end].to_string())
    };
    let r: f64 = attr(svg.lines().next()?, "data-radius")?.parse().ok()?;
    let key = format!(r#"id="{id}""#);
    let line = svg.lines().find(|l| l.contains(&key))?;
    attr(line, "points")?
        .split_whitespace()
        .map(|p| {
            let (x, y) = p.split_once(',')?;
            let (x, y): (f64, f64) = (x.parse().ok()?, y.parse().ok()?);
            Some(C64::new(x / SVG_SIZE * 2.0 * r - r, r - y / SVG_SIZE * 2.0 * r))
        })
        .collect()
}
