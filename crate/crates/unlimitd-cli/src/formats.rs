//! On-disk formats owned by the CLI: the line-JSON dataset file, the small
//! prediction/context CSVs, and the resolved-config manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use unlimitd::taskgen::{FiniteDataset, TaskSpec, CONTEXT_NOISE_STD};

use crate::CliError;

/// One dataset line: the task parameters and its frozen `(x, y)` points.
#[derive(Serialize, Deserialize)]
pub struct DatasetLine {
    pub task: TaskSpec,
    pub points: Vec<(f64, f64)>,
}

/// Serializes a finite dataset as line-oriented JSON, one task per line.
pub fn dataset_to_lines(dataset: &FiniteDataset) -> Result<String, CliError> {
    let mut out = String::new();
    for i in 0..dataset.n_tasks() {
        let line = DatasetLine {
            task: *dataset.task(i),
            points: dataset
                .task_inputs(i)
                .iter()
                .copied()
                .zip(dataset.task_observations(i).iter().copied())
                .collect(),
        };
        out.push_str(&serde_json::to_string(&line).map_err(CliError::serialization)?);
        out.push('\n');
    }
    Ok(out)
}

/// Parses a line-JSON dataset file back into a frozen dataset.
pub fn load_dataset(path: &Path) -> Result<FiniteDataset, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    let mut tasks = Vec::new();
    let mut inputs = Vec::new();
    let mut observations = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: DatasetLine = serde_json::from_str(line).map_err(|e| {
            CliError::io(format!("{} line {}: {e}", path.display(), idx + 1))
        })?;
        tasks.push(parsed.task);
        inputs.push(parsed.points.iter().map(|p| p.0).collect());
        observations.push(parsed.points.iter().map(|p| p.1).collect());
    }
    FiniteDataset::from_parts(tasks, inputs, observations, CONTEXT_NOISE_STD)
        .map_err(CliError::from)
}

/// Parses a two-column `x,y` CSV (header required) with line-numbered
/// diagnostics.
pub fn load_context_csv(path: &Path) -> Result<(Vec<f64>, Vec<f64>), CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if idx == 0 || line.trim().is_empty() {
            continue; // header
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 2 {
            return Err(CliError::io(format!(
                "{} line {}: expected two comma-separated fields, found {}",
                path.display(),
                idx + 1,
                fields.len()
            )));
        }
        let parse = |s: &str, col: &str| -> Result<f64, CliError> {
            s.trim().parse::<f64>().map_err(|_| {
                CliError::io(format!(
                    "{} line {}: {col} value '{}' is not a number",
                    path.display(),
                    idx + 1,
                    s.trim()
                ))
            })
        };
        xs.push(parse(fields[0], "x")?);
        ys.push(parse(fields[1], "y")?);
    }
    Ok((xs, ys))
}

/// Parses a one-column `x` CSV (header required). An empty file or a bare
/// header yields an empty list.
pub fn load_query_csv(path: &Path) -> Result<Vec<f64>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    let mut xs = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if idx == 0 || line.trim().is_empty() {
            continue;
        }
        let first = line.split(',').next().unwrap_or("").trim();
        xs.push(first.parse::<f64>().map_err(|_| {
            CliError::io(format!(
                "{} line {}: x value '{first}' is not a number",
                path.display(),
                idx + 1
            ))
        })?);
    }
    Ok(xs)
}

/// Prediction rows: mean always, std for probabilistic models, the inferred
/// cluster for mixtures.
pub fn predictions_to_csv(
    xs: &[f64],
    means: &[f64],
    stds: Option<&[f64]>,
    cluster: Option<usize>,
) -> String {
    let mut out = String::new();
    match (stds.is_some(), cluster.is_some()) {
        (true, true) => out.push_str("x,mean,std,cluster\n"),
        (true, false) => out.push_str("x,mean,std\n"),
        (false, _) => out.push_str("x,mean\n"),
    }
    for (i, (&x, &m)) in xs.iter().zip(means.iter()).enumerate() {
        match (stds, cluster) {
            (Some(s), Some(c)) => {
                let _ = writeln!(out, "{x},{m},{},{c}", s[i]);
            }
            (Some(s), None) => {
                let _ = writeln!(out, "{x},{m},{}", s[i]);
            }
            (None, _) => {
                let _ = writeln!(out, "{x},{m}");
            }
        }
    }
    out
}

/// Resolved-config manifest written next to every command's outputs. The hash
/// covers the command, build and resolved config; report files cite it.
#[derive(Serialize)]
struct Manifest<'a, C: Serialize> {
    command: &'a str,
    build: &'a str,
    config: &'a C,
    hash: &'a str,
}

pub fn write_manifest<C: Serialize>(
    dir: &Path,
    command: &str,
    config: &C,
) -> Result<String, CliError> {
    let build = env!("CARGO_PKG_VERSION");
    let unhashed = serde_json::json!({
        "command": command,
        "build": build,
        "config": config,
    });
    let canonical = serde_json::to_string(&unhashed).map_err(CliError::serialization)?;
    let hash = hex::encode(Sha256::digest(canonical.as_bytes()));
    let manifest = Manifest {
        command,
        build,
        config,
        hash: &hash,
    };
    let mut text =
        serde_json::to_string_pretty(&manifest).map_err(CliError::serialization)?;
    text.push('\n');
    fs::create_dir_all(dir).map_err(|e| CliError::io(format!("{}: {e}", dir.display())))?;
    let path = dir.join("manifest.json");
    fs::write(&path, text).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    Ok(hash)
}
