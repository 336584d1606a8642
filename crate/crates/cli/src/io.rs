//! Trajectory JSONL and small CSV writers.
//!
//! A trajectory file is one header object followed by one object per time level.
//! Floats use the shortest round-trip decimal form.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use spde_ldp::dynamics::StepDiagnostics;
use spde_ldp::{DomainKind, StateVector, TimeGrid, Trajectory};

pub const TRAJECTORY_FORMAT: &str = "spde-ldp-trajectory";

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryHeader {
    pub format: String,
    pub domain: DomainKind,
    pub num_points: usize,
    pub horizon: f64,
    pub steps: usize,
    pub level: Option<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Row {
    k: usize,
    t: f64,
    state: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    diag: Option<StepDiagnostics>,
}

pub fn trajectory_to_string(traj: &Trajectory, domain: DomainKind) -> String {
    let header = TrajectoryHeader {
        format: TRAJECTORY_FORMAT.into(),
        domain,
        num_points: traj.states.first().map_or(0, |s| s.len()),
        horizon: traj.grid.horizon(),
        steps: traj.grid.num_steps(),
        level: traj.level,
    };
    let mut out = serde_json::to_string(&header).expect("header serialises");
    out.push('\n');
    for (k, s) in traj.states.iter().enumerate() {
        // diagnostics belong to steps 1..=K
        let diag = if k > 0 { traj.diagnostics.get(k - 1).copied() } else { None };
        let row = Row { k, t: traj.grid.time(k), state: s.0.clone(), diag };
        out.push_str(&serde_json::to_string(&row).expect("finite row"));
        out.push('\n');
    }
    out
}

pub fn trajectory_from_str(text: &str) -> Result<(TrajectoryHeader, Trajectory), FormatError> {
    let fail = |line: usize, message: String| FormatError::Format { line, message };
    let mut lines = text.lines().enumerate();
    let (_, first) = lines.next().ok_or_else(|| fail(1, "empty file".into()))?;
    let header: TrajectoryHeader = serde_json::from_str(first).map_err(|e| fail(1, format!("bad header: {e}")))?;
    if header.format != TRAJECTORY_FORMAT {
        return Err(fail(1, format!("unexpected format `{}`", header.format)));
    }
    let grid = TimeGrid::new(header.horizon, header.steps).map_err(|e| fail(1, e.to_string()))?;
    let mut states = Vec::with_capacity(header.steps + 1);
    let mut diagnostics = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let row: Row = serde_json::from_str(line).map_err(|e| fail(i + 1, e.to_string()))?;
        if row.k != states.len() {
            return Err(fail(i + 1, format!("row index {} out of order (expected {})", row.k, states.len())));
        }
        if row.state.len() != header.num_points {
            return Err(fail(i + 1, format!("state has {} values, header says {}", row.state.len(), header.num_points)));
        }
        if let Some(d) = row.diag {
            diagnostics.push(d);
        }
        states.push(StateVector(row.state));
    }
    if states.len() != header.steps + 1 {
        return Err(fail(text.lines().count(), format!("{} states for {} steps (need steps + 1)", states.len(), header.steps)));
    }
    if !diagnostics.is_empty() && diagnostics.len() != header.steps {
        return Err(fail(1, "diagnostics must cover every step or none".into()));
    }
    Ok((header.clone(), Trajectory { grid, level: header.level, states, diagnostics }))
}

pub fn write_trajectory(traj: &Trajectory, domain: DomainKind, path: &Path) -> Result<(), FormatError> {
    std::fs::write(path, trajectory_to_string(traj, domain))?;
    Ok(())
}

pub fn read_trajectory(path: &Path) -> Result<(TrajectoryHeader, Trajectory), FormatError> {
    trajectory_from_str(&std::fs::read_to_string(path)?)
}

/// `x,value` rows for one state.
pub fn state_csv(nodes: &[f64], state: &[f64]) -> String {
    let mut out = String::from("x,value\n");
    for (x, v) in nodes.iter().zip(state) {
        writeln!(out, "{},{}", num(*x), num(*v)).unwrap();
    }
    out
}

/// Shortest round-trip decimal, with an exponent for very small or large magnitudes.
pub fn num(x: f64) -> String {
    format!("{x:?}")
}

/// Join pre-formatted CSV fields.
pub fn csv_row(fields: &[String]) -> String {
    let mut s = fields.join(",");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use spde_ldp::dynamics::simulate_stream;
    use spde_ldp::{BuiltinModel, Control, SchemeOpts};

    fn sample() -> Trajectory {
        let m = BuiltinModel::Heat { noise_modes: 2 }.build(8).unwrap();
        let grid = TimeGrid::new(0.1, 7).unwrap();
        let x0 = StateVector((0..8).map(|i| (i as f64 * 0.7).sin() * 1e-3).collect());
        simulate_stream(&m, &x0, &Control::zero(grid, 2), 0.3, grid, 4, 1, None, &SchemeOpts::default()).unwrap().0
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let t = sample();
        let (h, back) = trajectory_from_str(&trajectory_to_string(&t, DomainKind::Periodic)).unwrap();
        assert_eq!(h.num_points, 8);
        for (a, b) in t.states.iter().zip(&back.states) {
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(t, back);
    }

    #[test]
    fn header_mismatch_is_a_format_error() {
        let text = trajectory_to_string(&sample(), DomainKind::Periodic).replacen("\"num_points\":8", "\"num_points\":9", 1);
        assert!(matches!(trajectory_from_str(&text), Err(FormatError::Format { line: 2, .. })));
    }

    #[test]
    fn missing_states_are_a_format_error() {
        let text = trajectory_to_string(&sample(), DomainKind::Periodic);
        let header = text.lines().next().unwrap();
        assert!(matches!(trajectory_from_str(header), Err(FormatError::Format { .. })));
    }
}
