use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::pca::csv_err;
use crate::error::{Error, Result};

/// Column order of the results CSV.
pub const RESULTS_HEADER: [&str; 11] = [
    "config_id",
    "seed",
    "dataset",
    "strategy",
    "acc",
    "acc_star",
    "retention",
    "iid_acc",
    "ood_acc",
    "iid_acc_star",
    "ood_acc_star",
];

const METRICS: [&str; 7] = ["acc", "acc_star", "retention", "iid_acc", "ood_acc", "iid_acc_star", "ood_acc_star"];

/// One (configuration, seed) result. Metrics a run did not produce are
/// empty cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub config_id: String,
    pub seed: u64,
    pub dataset: String,
    pub strategy: String,
    pub acc: Option<f64>,
    pub acc_star: Option<f64>,
    pub retention: Option<f64>,
    pub iid_acc: Option<f64>,
    pub ood_acc: Option<f64>,
    pub iid_acc_star: Option<f64>,
    pub ood_acc_star: Option<f64>,
}

impl TrialRow {
    pub fn new(config_id: &str, seed: u64, dataset: &str, strategy: &str) -> Self {
        Self {
            config_id: config_id.into(),
            seed,
            dataset: dataset.into(),
            strategy: strategy.into(),
            acc: None,
            acc_star: None,
            retention: None,
            iid_acc: None,
            ood_acc: None,
            iid_acc_star: None,
            ood_acc_star: None,
        }
    }

    fn metrics(&self) -> [Option<f64>; 7] {
        [
            self.acc,
            self.acc_star,
            self.retention,
            self.iid_acc,
            self.ood_acc,
            self.iid_acc_star,
            self.ood_acc_star,
        ]
    }

    fn key(&self) -> (String, String, String) {
        (self.config_id.clone(), self.dataset.clone(), self.strategy.clone())
    }
}

/// Rows where each configuration (id, dataset, strategy) has each seed at
/// most once.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrialTable {
    pub rows: Vec<TrialRow>,
}

impl TrialTable {
    pub fn push(&mut self, row: TrialRow) -> Result<()> {
        if self.rows.iter().any(|r| r.key() == row.key() && r.seed == row.seed) {
            return Err(Error::Protocol(format!(
                "duplicate result for config {} seed {}",
                row.config_id, row.seed
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Mean and standard error of every metric of one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub config_id: String,
    pub dataset: String,
    pub strategy: String,
    pub n_seeds: usize,
    pub means: [Option<f64>; 7],
    pub std_errors: [Option<f64>; 7],
}

impl AggregateRow {
    fn index(metric: &str) -> Option<usize> {
        METRICS.iter().position(|m| *m == metric)
    }

    pub fn mean(&self, metric: &str) -> Option<f64> {
        Self::index(metric).and_then(|i| self.means[i])
    }

    pub fn std_error(&self, metric: &str) -> Option<f64> {
        Self::index(metric).and_then(|i| self.std_errors[i])
    }
}

/// Mean and `s/√n` with the sample standard deviation `s`; a single value
/// has standard error 0.
pub fn mean_and_std_error(values: &[f64]) -> Option<(f64, f64)> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    Some((mean, (var / n as f64).sqrt()))
}

/// Per-configuration aggregates, ordered by configuration key. Metrics are
/// aggregated over the seeds that report them.
pub fn aggregate_trials(table: &TrialTable) -> Result<Vec<AggregateRow>> {
    let mut seen = BTreeSet::new();
    let mut groups: BTreeMap<(String, String, String), Vec<&TrialRow>> = BTreeMap::new();
    for r in &table.rows {
        if !seen.insert((r.key(), r.seed)) {
            return Err(Error::Protocol(format!(
                "duplicate result for config {} seed {}",
                r.config_id, r.seed
            )));
        }
        groups.entry(r.key()).or_default().push(r);
    }
    Ok(groups
        .into_iter()
        .map(|((config_id, dataset, strategy), rows)| {
            let mut rows = rows;
            rows.sort_by_key(|r| r.seed);
            let mut means = [None; 7];
            let mut std_errors = [None; 7];
            for k in 0..7 {
                let vals: Vec<f64> = rows.iter().filter_map(|r| r.metrics()[k]).collect();
                if let Some((m, s)) = mean_and_std_error(&vals) {
                    means[k] = Some(m);
                    std_errors[k] = Some(s);
                }
            }
            AggregateRow {
                config_id,
                dataset,
                strategy,
                n_seeds: rows.len(),
                means,
                std_errors,
            }
        })
        .collect())
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes the results CSV with [`RESULTS_HEADER`] columns.
pub fn write_results(rows: &[TrialRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(RESULTS_HEADER).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![r.config_id.clone(), r.seed.to_string(), r.dataset.clone(), r.strategy.clone()];
        rec.extend(r.metrics().iter().map(|m| cell(*m)));
        w.write_record(rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes aggregates with a `<metric>_mean, <metric>_se` column pair per
/// metric.
pub fn write_aggregates(rows: &[AggregateRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header: Vec<String> = ["config_id", "dataset", "strategy", "n_seeds"].map(String::from).to_vec();
    for m in METRICS {
        header.push(format!("{m}_mean"));
        header.push(format!("{m}_se"));
    }
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![r.config_id.clone(), r.dataset.clone(), r.strategy.clone(), r.n_seeds.to_string()];
        for k in 0..7 {
            rec.push(cell(r.means[k]));
            rec.push(cell(r.std_errors[k]));
        }
        w.write_record(rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(config: &str, seed: u64, acc: f64) -> TrialRow {
        TrialRow {
            acc: Some(acc),
            ..TrialRow::new(config, seed, "cmnist", "test-domain")
        }
    }

    #[test]
    fn mean_and_standard_error() {
        let mut t = TrialTable::default();
        for (s, v) in [(1, 1.0), (2, 2.0), (3, 3.0)] {
            t.push(row("a", s, v)).unwrap();
        }
        t.push(row("b", 1, 0.4)).unwrap();
        let agg = aggregate_trials(&t).unwrap();
        assert_eq!(agg[0].mean("acc"), Some(2.0));
        assert!((agg[0].std_error("acc").unwrap() - 0.5773502691896258).abs() < 1e-12);
        assert_eq!(agg[1].std_error("acc"), Some(0.0));
        assert_eq!(agg[0].mean("iid_acc"), None);
    }

    #[test]
    fn duplicates_rejected() {
        let mut t = TrialTable::default();
        t.push(row("a", 1, 0.5)).unwrap();
        assert!(matches!(t.push(row("a", 1, 0.6)), Err(Error::Protocol(_))));
        let raw = TrialTable {
            rows: vec![row("a", 1, 0.5), row("a", 1, 0.6)],
        };
        assert!(aggregate_trials(&raw).is_err());
    }

    #[test]
    fn row_order_does_not_matter() {
        let rows = vec![row("a", 1, 0.1), row("b", 2, 0.7), row("a", 2, 0.4), row("a", 3, 0.9)];
        let mut rev = rows.clone();
        rev.reverse();
        assert_eq!(
            aggregate_trials(&TrialTable { rows }).unwrap(),
            aggregate_trials(&TrialTable { rows: rev }).unwrap()
        );
    }

    #[test]
    fn results_csv_header_is_fixed() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        write_results(&[row("a", 1, 0.25)], &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(
            text,
            "config_id,seed,dataset,strategy,acc,acc_star,retention,iid_acc,ood_acc,iid_acc_star,ood_acc_star\n\
             a,1,cmnist,test-domain,0.25,,,,,,\n"
        );
    }
}
