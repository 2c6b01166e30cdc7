use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{prepare, run_ablation, run_search, run_trial_to, score, write_ablation_table, BaseNewSetup, Experiment, SearchSpace};
use crate::data::write_dataset;
use crate::error::{Error, Result};
use crate::eval::{aggregate_trials, paired_tests, write_paired_tests, pca_landscape, write_aggregates, write_landscape, write_results, Grid, TrialRow};
use crate::model::{Model, ModelCheckpoint};
use crate::train::{objective_at_means, Checkpoint, Strategy, TrainConfig};

/// What a run did, with the inputs that are not part of the experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RunKind {
    GenData,
    Train,
    Eval { checkpoint: PathBuf },
    Search { space: SearchSpace },
    Ablate,
    BaseToNew,
    Landscape { grid: Grid },
    Stats { pairs: PathBuf },
}

/// Record of one command: enough to run it again and get the same files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run: RunKind,
    pub experiment: Experiment,
    pub seeds: Vec<u64>,
    pub strategy: Strategy,
    pub dataset_hash: String,
    pub version: String,
    /// Files written, relative to the output directory.
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub const FILE: &'static str = "manifest.json";

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let p = dir.as_ref().join(Self::FILE);
        fs::write(&p, serde_json::to_string_pretty(self)?)?;
        Ok(p)
    }
}

fn relative(out: &Path, p: &Path) -> PathBuf {
    p.strip_prefix(out).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf())
}

fn write_rows(rows: &[TrialRow], out: &Path, outputs: &mut Vec<PathBuf>) -> Result<()> {
    let results = out.join("results.csv");
    write_results(rows, &results)?;
    outputs.push(results);
    let table = crate::eval::TrialTable { rows: rows.to_vec() };
    let agg = out.join("aggregates.csv");
    write_aggregates(&aggregate_trials(&table)?, &agg)?;
    outputs.push(agg);
    Ok(())
}

/// A checkpoint file from a training run or a bare model checkpoint.
fn load_model(path: &Path) -> Result<Model> {
    let text = fs::read_to_string(path)?;
    let ck = match serde_json::from_str::<Checkpoint>(&text) {
        Ok(c) => c.model,
        Err(_) => serde_json::from_str::<ModelCheckpoint>(&text)?,
    };
    Model::from_checkpoint(ck)
}

/// Runs `run` and writes its files and manifest under `out`.
pub fn execute(run: RunKind, exp: &Experiment, seeds: &[u64], strategy: Strategy, out: &Path) -> Result<RunManifest> {
    fs::create_dir_all(out)?;
    let mut exp = exp.clone();
    if matches!(run, RunKind::BaseToNew) && exp.base_new.is_none() {
        exp.base_new = Some(BaseNewSetup { fraction_base: 0.75 });
    }
    let mut seeds = seeds.to_vec();
    if let RunKind::Search { space } = &run {
        seeds = space.seeds.clone();
    }
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let dataset = match run {
        RunKind::Stats { .. } => None,
        _ => Some(exp.generate()?),
    };
    let dataset = dataset.as_ref();
    let ds = || dataset.expect("generated above");
    let mut outputs = Vec::new();
    match &run {
        RunKind::GenData => {
            let p = out.join("dataset.jsonl");
            write_dataset(ds(), &p)?;
            outputs.push(p);
        }
        RunKind::Train | RunKind::BaseToNew => {
            let mut rows = Vec::new();
            for &s in &seeds {
                let dir = out.join("runs").join(format!("seed_{s}"));
                let t = run_trial_to(&exp, ds(), s, strategy, &dir)?;
                outputs.push(dir);
                rows.push(t.row);
            }
            write_rows(&rows, out, &mut outputs)?;
        }
        RunKind::Eval { checkpoint } => {
            let model = load_model(checkpoint)?;
            let mut rows = Vec::new();
            for &s in &seeds {
                let prepared = prepare(&exp, ds(), s)?;
                rows.push(score(&exp, ds(), &prepared, &model, s, strategy)?);
            }
            write_rows(&rows, out, &mut outputs)?;
        }
        RunKind::Search { space } => {
            let r = run_search(space, &exp, ds(), strategy)?;
            write_rows(&r.table.rows, out, &mut outputs)?;
            let best = out.join("best.json");
            fs::write(&best, serde_json::to_string_pretty(&r.best)?)?;
            outputs.push(best);
            if !r.failures.is_empty() {
                let f = out.join("failures.json");
                fs::write(&f, serde_json::to_string_pretty(&r.failures)?)?;
                outputs.push(f);
            }
        }
        RunKind::Ablate => {
            let ab = run_ablation(&exp, ds(), &seeds, strategy)?;
            write_rows(&ab.table.rows, out, &mut outputs)?;
            let p = out.join("ablation.csv");
            write_ablation_table(&ab, &p)?;
            outputs.push(p);
        }
        RunKind::Landscape { grid } => {
            let s = seeds[0];
            let dir = out.join("run");
            let t = run_trial_to(&exp, ds(), s, strategy, &dir)?;
            outputs.push(dir);
            let prepared = prepare(&exp, ds(), s)?;
            let cfg = TrainConfig {
                seed: s,
                ..exp.train.clone()
            };
            let mut probe = t.outcome.model.clone();
            let land = pca_landscape(
                &t.outcome.trajectory,
                |p| {
                    probe.set_flat_means(p)?;
                    Ok(objective_at_means(&probe, &prepared.data.train, &cfg)?.total)
                },
                grid,
            )?;
            outputs.extend(write_landscape(&land, out)?);
            write_rows(&[t.row], out, &mut outputs)?;
        }
        RunKind::Stats { pairs } => {
            let p = out.join("stats.csv");
            write_paired_tests(&paired_tests(pairs)?, &p)?;
            outputs.push(p);
        }
    }
    let manifest = RunManifest {
        run,
        dataset_hash: exp.dataset.hash(),
        experiment: exp,
        seeds,
        strategy,
        version: env!("CARGO_PKG_VERSION").to_string(),
        outputs: outputs.iter().map(|p| relative(out, p)).collect(),
    };
    manifest.write(out)?;
    Ok(manifest)
}

/// Runs the command recorded in `manifest` again, writing under `out`.
pub fn replay(manifest: &RunManifest, out: &Path) -> Result<RunManifest> {
    if manifest.experiment.dataset.hash() != manifest.dataset_hash {
        return Err(Error::Protocol("manifest dataset hash does not match its dataset spec".into()));
    }
    if manifest.version != env!("CARGO_PKG_VERSION") {
        log::warn!(
            "manifest written by version {}, replaying with {}",
            manifest.version,
            env!("CARGO_PKG_VERSION")
        );
    }
    execute(
        manifest.run.clone(),
        &manifest.experiment,
        &manifest.seeds,
        manifest.strategy,
        out,
    )
}
