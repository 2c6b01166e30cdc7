use std::path::Path;

use rayon::prelude::*;

use super::{run_trial, Experiment};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{aggregate_trials, csv_err, AggregateRow, TrialTable};
use crate::train::Strategy;

/// Column order of the ablation table.
pub const ABLATION_HEADER: [&str; 10] = [
    "dataset",
    "strategy",
    "remove_env_mean",
    "remove_env_se",
    "remove_irm_mean",
    "remove_irm_se",
    "remove_orth_mean",
    "remove_orth_se",
    "full_mean",
    "full_se",
];

/// Variant suffixes, in table order.
const VARIANTS: [&str; 4] = ["remove-env", "remove-irm", "remove-orth", "full"];

#[derive(Debug, Clone)]
pub struct Ablation {
    pub table: TrialTable,
    /// One row per variant, in [`ABLATION_HEADER`] order.
    pub aggregates: Vec<AggregateRow>,
}

impl Ablation {
    pub fn variant(&self, suffix: &str) -> Option<&AggregateRow> {
        self.aggregates.iter().find(|a| a.config_id.ends_with(suffix))
    }
}

/// The full objective and the three variants with one penalty weight set
/// to zero, each over `seeds`.
pub fn run_ablation(base: &Experiment, dataset: &Dataset, seeds: &[u64], strategy: Strategy) -> Result<Ablation> {
    let variants: Vec<Experiment> = VARIANTS
        .iter()
        .map(|v| {
            let mut e = base.clone();
            e.config_id = format!("{}-{v}", base.config_id);
            let o = &mut e.train.objective;
            match *v {
                "remove-env" => o.lambda1 = 0.0,
                "remove-irm" => o.lambda2 = 0.0,
                "remove-orth" => o.lambda3 = 0.0,
                _ => {}
            }
            e
        })
        .collect();
    let jobs: Vec<(usize, u64)> = (0..variants.len()).flat_map(|v| seeds.iter().map(move |&s| (v, s))).collect();
    let rows = jobs
        .par_iter()
        .map(|&(v, s)| run_trial(&variants[v], dataset, s, strategy).map(|t| t.row))
        .collect::<Result<Vec<_>>>()?;
    let mut table = TrialTable::default();
    for r in rows {
        table.push(r)?;
    }
    let all = aggregate_trials(&table)?;
    let aggregates = variants
        .iter()
        .map(|v| {
            all.iter()
                .find(|a| a.config_id == v.config_id)
                .cloned()
                .ok_or_else(|| Error::Protocol(format!("no results for {}", v.config_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Ablation { table, aggregates })
}

/// Writes the one-row ablation table of test accuracy.
pub fn write_ablation_table(ab: &Ablation, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(ABLATION_HEADER).map_err(csv_err)?;
    let first = ab.aggregates.first().ok_or_else(|| Error::Protocol("empty ablation".into()))?;
    let mut rec = vec![first.dataset.clone(), first.strategy.clone()];
    for a in &ab.aggregates {
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        rec.push(cell(a.mean("acc")));
        rec.push(cell(a.std_error("acc")));
    }
    w.write_record(&rec).map_err(csv_err)?;
    w.flush()?;
    Ok(())
}
