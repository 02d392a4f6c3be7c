//! Metrics CSV rows and JSON-lines episode logs.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use coarse2fine::control::EpisodeOutcome;
use serde::{Deserialize, Serialize};

pub const HEADER: &str = "experiment_id,seed,task,controller,modality,arch,dataset_frames,success_rate,mean_steps,mean_final_err_mm";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub experiment_id: String,
    pub seed: u64,
    pub task: String,
    pub controller: String,
    pub modality: String,
    pub arch: String,
    pub dataset_frames: usize,
    pub success_rate: f64,
    pub mean_steps: f64,
    pub mean_final_err_mm: f64,
}

/// Which model produced a row, for the descriptive columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowLabels {
    pub experiment_id: String,
    pub modality: String,
    pub arch: String,
    pub dataset_frames: usize,
}

pub fn summarize(labels: &RowLabels, seed: u64, outcomes: &[EpisodeOutcome]) -> MetricsRow {
    let n = outcomes.len().max(1) as f64;
    let first = outcomes.first();
    MetricsRow {
        experiment_id: labels.experiment_id.clone(),
        seed,
        task: first.map(|o| o.task.clone()).unwrap_or_default(),
        controller: first.map(|o| o.controller.clone()).unwrap_or_default(),
        modality: labels.modality.clone(),
        arch: labels.arch.clone(),
        dataset_frames: labels.dataset_frames,
        success_rate: outcomes.iter().filter(|o| o.success).count() as f64 / n,
        mean_steps: outcomes.iter().map(|o| o.steps as f64).sum::<f64>() / n,
        mean_final_err_mm: outcomes.iter().map(|o| o.final_error_mm).sum::<f64>() / n,
    }
}

pub fn sort_rows(rows: &mut [MetricsRow]) {
    rows.sort_by(|a, b| (&a.experiment_id, a.seed).cmp(&(&b.experiment_id, b.seed)));
}

/// Appends rows, writing the header first when the file is new or empty.
pub fn append_rows(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new().create(true).append(true).open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_rows(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let _ = fs::remove_file(path);
    if rows.is_empty() {
        fs::write(path, format!("{HEADER}\n"))?;
        return Ok(());
    }
    append_rows(path, rows)
}

pub fn read_rows(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(r.deserialize().collect::<Result<Vec<MetricsRow>, _>>()?)
}

pub fn append_episodes(path: &Path, outcomes: &[EpisodeOutcome]) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    for o in outcomes {
        writeln!(f, "{}", serde_json::to_string(o)?)?;
    }
    Ok(())
}
