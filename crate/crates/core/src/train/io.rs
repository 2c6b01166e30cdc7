use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::json;

use super::{Checkpoint, TrainOutcome};
use crate::error::Result;
use crate::eval::csv_err;

/// Paths written by [`write_run`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunFiles {
    pub checkpoints: Vec<PathBuf>,
    pub metrics: PathBuf,
    pub trajectory: PathBuf,
}

/// Writes `checkpoints/epoch_XXX.json`, `metrics.jsonl` and
/// `trajectory.csv` under `dir`.
pub fn write_run(outcome: &TrainOutcome, dir: impl AsRef<Path>) -> Result<RunFiles> {
    let dir = dir.as_ref();
    let ck_dir = dir.join("checkpoints");
    fs::create_dir_all(&ck_dir)?;
    let mut checkpoints = Vec::new();
    for c in &outcome.checkpoints {
        let p = ck_dir.join(format!("epoch_{:03}.json", c.epoch));
        serde_json::to_writer(std::io::BufWriter::new(fs::File::create(&p)?), c)?;
        checkpoints.push(p);
    }

    let metrics = dir.join("metrics.jsonl");
    let mut f = std::io::BufWriter::new(fs::File::create(&metrics)?);
    for c in &outcome.checkpoints {
        let line = json!({ "epoch": c.epoch, "metrics": c.metrics, "loss": c.loss });
        writeln!(f, "{line}")?;
    }
    f.flush()?;

    let trajectory = dir.join("trajectory.csv");
    let mut w = csv::Writer::from_path(&trajectory).map_err(csv_err)?;
    let width = outcome.trajectory.first().map_or(0, Vec::len);
    let mut header = vec!["epoch".to_string()];
    header.extend((0..width).map(|i| format!("p{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for (e, point) in outcome.trajectory.iter().enumerate() {
        let mut rec = vec![e.to_string()];
        rec.extend(point.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;

    Ok(RunFiles {
        checkpoints,
        metrics,
        trajectory,
    })
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let f = std::io::BufReader::new(fs::File::open(path)?);
    Ok(serde_json::from_reader(f)?)
}
