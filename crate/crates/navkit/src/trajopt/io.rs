//! Versioned on-disk form of the path library: JSON with per-path flat
//! arrays (inputs, row-major 2x3 gains, states). JSON float formatting is
//! shortest-roundtrip, so read(write(lib)) reproduces the library exactly.

use crate::dynamics::{Input, State};
use crate::trajopt::{PathEntry, PathLibrary};
use nalgebra::Matrix2x3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const LIBRARY_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum LibraryIoError {
    #[error("library io: {0}")]
    Io(#[from] std::io::Error),
    #[error("library parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported library version {0} (expected {LIBRARY_FORMAT_VERSION})")]
    Version(u32),
    #[error("malformed library: {0}")]
    Malformed(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct LibraryFile {
    version: u32,
    #[serde(rename = "Ts")]
    ts: f64,
    #[serde(rename = "T")]
    horizon: usize,
    delta: f64,
    center_path_index: usize,
    paths: Vec<PathFile>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PathFile {
    path_index: usize,
    lateral_offset: f64,
    converged: bool,
    primal_residual: f64,
    dual_residual: f64,
    admm_iterations: usize,
    plan_time: f64,
    /// T pairs (v, omega).
    mu: Vec<f64>,
    /// T row-major 2x3 blocks.
    k: Vec<f64>,
    /// T+1 triples (px, py, theta).
    x: Vec<f64>,
    /// tau pairs (px, py).
    waypoints: Vec<f64>,
    waypoint_indices: Vec<usize>,
}

fn entry_to_file(e: &PathEntry) -> PathFile {
    PathFile {
        path_index: e.path_index,
        lateral_offset: e.lateral_offset,
        converged: e.converged,
        primal_residual: e.primal_residual,
        dual_residual: e.dual_residual,
        admm_iterations: e.admm_iterations,
        plan_time: e.plan_time,
        mu: e.mu_star.iter().flat_map(|u| [u.v, u.omega]).collect(),
        k: e
            .k_star
            .iter()
            .flat_map(|k| {
                [
                    k[(0, 0)],
                    k[(0, 1)],
                    k[(0, 2)],
                    k[(1, 0)],
                    k[(1, 1)],
                    k[(1, 2)],
                ]
            })
            .collect(),
        x: e
            .x_star
            .iter()
            .flat_map(|s| [s.px, s.py, s.theta])
            .collect(),
        waypoints: e.waypoints.iter().flat_map(|w| [w[0], w[1]]).collect(),
        waypoint_indices: e.waypoint_indices.clone(),
    }
}

fn entry_from_file(p: PathFile, horizon: usize) -> Result<PathEntry, LibraryIoError> {
    if p.mu.len() != 2 * horizon || p.k.len() != 6 * horizon || p.x.len() != 3 * (horizon + 1) {
        return Err(LibraryIoError::Malformed(format!(
            "path {} arrays inconsistent with T = {horizon}",
            p.path_index
        )));
    }
    if p.waypoints.len() != 2 * p.waypoint_indices.len() {
        return Err(LibraryIoError::Malformed(format!(
            "path {} waypoint arrays inconsistent",
            p.path_index
        )));
    }
    Ok(PathEntry {
        path_index: p.path_index,
        lateral_offset: p.lateral_offset,
        mu_star: p.mu.chunks_exact(2).map(|c| Input::new(c[0], c[1])).collect(),
        k_star: p
            .k
            .chunks_exact(6)
            .map(|c| Matrix2x3::new(c[0], c[1], c[2], c[3], c[4], c[5]))
            .collect(),
        x_star: p
            .x
            .chunks_exact(3)
            .map(|c| State {
                px: c[0],
                py: c[1],
                theta: c[2],
            })
            .collect(),
        waypoints: p.waypoints.chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
        waypoint_indices: p.waypoint_indices,
        converged: p.converged,
        primal_residual: p.primal_residual,
        dual_residual: p.dual_residual,
        admm_iterations: p.admm_iterations,
        plan_time: p.plan_time,
    })
}

pub fn library_to_string(lib: &PathLibrary) -> String {
    let file = LibraryFile {
        version: LIBRARY_FORMAT_VERSION,
        ts: lib.ts,
        horizon: lib.horizon,
        delta: lib.delta,
        center_path_index: lib.center_path_index,
        paths: lib.entries.iter().map(entry_to_file).collect(),
    };
    serde_json::to_string_pretty(&file).expect("library serialization is infallible")
}

pub fn library_from_str(s: &str) -> Result<PathLibrary, LibraryIoError> {
    let file: LibraryFile = serde_json::from_str(s)?;
    if file.version != LIBRARY_FORMAT_VERSION {
        return Err(LibraryIoError::Version(file.version));
    }
    if file.paths.is_empty() {
        return Err(LibraryIoError::Malformed("library has no paths".into()));
    }
    if file.center_path_index >= file.paths.len() {
        return Err(LibraryIoError::Malformed(
            "center path index out of range".into(),
        ));
    }
    let horizon = file.horizon;
    Ok(PathLibrary {
        ts: file.ts,
        horizon,
        delta: file.delta,
        center_path_index: file.center_path_index,
        entries: file
            .paths
            .into_iter()
            .map(|p| entry_from_file(p, horizon))
            .collect::<Result<_, _>>()?,
    })
}

pub fn write_library(lib: &PathLibrary, path: &std::path::Path) -> Result<(), LibraryIoError> {
    std::fs::write(path, library_to_string(lib))?;
    Ok(())
}

pub fn read_library(path: &std::path::Path) -> Result<PathLibrary, LibraryIoError> {
    library_from_str(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::InputBounds;
    use crate::trajopt::{build_library, TrajoptConfig};

    #[test]
    fn round_trip_is_exact() {
        let cfg = TrajoptConfig {
            horizon: 8,
            tau: 1,
            ..Default::default()
        };
        let lib = build_library(
            &State::new(0.0, 0.0, 0.0),
            &State::new(3.0, 0.5, 0.0),
            &cfg,
            &InputBounds::default(),
        )
        .unwrap();
        let text = library_to_string(&lib);
        let back = library_from_str(&text).unwrap();
        assert_eq!(lib, back, "decimal round trip must reproduce the library exactly");
    }

    #[test]
    fn version_mismatch_rejected() {
        let text = r#"{"version": 99, "Ts": 0.5, "T": 1, "delta": 0.8, "center_path_index": 0, "paths": [] }"#;
        assert!(matches!(
            library_from_str(text),
            Err(LibraryIoError::Version(99))
        ));
    }

    #[test]
    fn malformed_arrays_rejected() {
        let text = r#"{"version": 1, "Ts": 0.5, "T": 2, "delta": 0.8, "center_path_index": 0,
            "paths": [{"path_index": 0, "lateral_offset": 0.0, "converged": true,
            "primal_residual": 0.0, "dual_residual": 0.0, "admm_iterations": 1, "plan_time": 0.0,
            "mu": [0.1], "k": [], "x": [], "waypoints": [], "waypoint_indices": []}] }"#;
        assert!(matches!(
            library_from_str(text),
            Err(LibraryIoError::Malformed(_))
        ));
    }
}
