use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{run_trial, Experiment};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{TrialRow, TrialTable};
use crate::model::ClassTokenPosition;
use crate::seed;
use crate::train::Strategy;

/// Stream offset of the per-trial hyperparameter draws.
const STREAM_SEARCH: u64 = 1 << 32;

/// `10^u` with `u` uniform on `[low, high]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRange {
    pub low: f64,
    pub high: f64,
}

impl LogRange {
    pub fn new(low: f64, high: f64) -> Self {
        Self { low, high }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        let u = if self.low == self.high {
            self.low
        } else {
            rng.gen_range(self.low..self.high)
        };
        10f64.powf(u)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchSpace {
    pub lambda1: LogRange,
    pub lambda2: LogRange,
    pub lambda3: LogRange,
    /// Empty means keep the experiment's value.
    pub ctp: Vec<ClassTokenPosition>,
    pub csc: Vec<bool>,
    pub trials: usize,
    pub seeds: Vec<u64>,
    pub master_seed: u64,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self::preset("coloredmnist").expect("known preset")
    }
}

impl SearchSpace {
    /// Search ranges per benchmark family: `pacs`, `officehome`, `vlcs`,
    /// `coloredmnist`, `nico` or `ccd`.
    pub fn preset(name: &str) -> Result<Self> {
        let r = LogRange::new;
        let both_ctp = vec![ClassTokenPosition::End, ClassTokenPosition::Middle];
        let (l1, l2, l3, ctp, csc) = match name {
            "pacs" => (r(-4.0, -1.0), r(-1.0, 0.0), r(-4.0, -1.0), vec![], vec![]),
            "officehome" => (r(-3.0, 0.0), r(-2.0, 0.0), r(-3.0, 0.0), vec![], vec![]),
            "vlcs" => (r(-2.0, -1.0), r(-1.0, 0.0), r(-2.0, -1.0), vec![], vec![]),
            "coloredmnist" => (r(-3.0, 0.0), r(-1.0, 1.0), r(-3.0, 0.0), both_ctp, vec![true, false]),
            "nico" => (r(-3.0, 0.0), r(-2.0, 0.0), r(-3.0, 0.0), vec![], vec![]),
            "ccd" => (r(-1.0, 0.0), r(-1.0, 1.0), r(-1.0, 0.0), both_ctp, vec![]),
            other => return Err(Error::Config(format!("unknown search preset {other}"))),
        };
        Ok(Self {
            lambda1: l1,
            lambda2: l2,
            lambda3: l3,
            ctp,
            csc,
            trials: 20,
            seeds: vec![1, 2, 3],
            master_seed: 0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(r.low <= r.high) || !r.low.is_finite() || !r.high.is_finite() {
                return Err(Error::Config(format!("{name} range [{}, {}] is invalid", r.low, r.high)));
            }
        }
        if self.trials == 0 {
            return Err(Error::Config("trial count must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("search needs at least one seed".into()));
        }
        Ok(())
    }
}

/// `base` with λ's, and when the space lists them, CTP and CSC of the
/// category prompt drawn from `space`.
pub fn sample_hyperparams(space: &SearchSpace, base: &Experiment, rng: &mut impl Rng) -> Experiment {
    let mut exp = base.clone();
    let obj = &mut exp.train.objective;
    obj.lambda1 = space.lambda1.sample(rng);
    obj.lambda2 = space.lambda2.sample(rng);
    obj.lambda3 = space.lambda3.sample(rng);
    if let Some(c) = space.ctp.choose(rng) {
        exp.train.model.category.ctp = *c;
    }
    if let Some(c) = space.csc.choose(rng) {
        exp.train.model.category.csc = *c;
    }
    exp
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub best: Experiment,
    /// Mean selected-validation accuracy of `best` over its seeds.
    pub best_score: f64,
    pub candidates: Vec<Experiment>,
    /// Rows of every successful run, ordered by candidate then seed.
    pub table: TrialTable,
    /// Runs that failed, with their error message.
    pub failures: Vec<(String, u64, String)>,
}

/// Random search: `space.trials` configurations drawn from `space`
/// around `base`, each trained once per seed. Trial `t` draws its
/// hyperparameters from its own stream of `space.master_seed`, so results
/// do not depend on scheduling.
pub fn run_search(space: &SearchSpace, base: &Experiment, dataset: &Dataset, strategy: Strategy) -> Result<SearchOutcome> {
    space.validate()?;
    let candidates: Vec<Experiment> = (0..space.trials)
        .map(|t| {
            let mut rng = seed::rng(space.master_seed, STREAM_SEARCH + t as u64);
            let mut exp = sample_hyperparams(space, base, &mut rng);
            exp.config_id = format!("{}-t{:02}", base.config_id, t);
            exp
        })
        .collect();
    run_search_candidates(candidates, &space.seeds, dataset, strategy)
}

/// Trains every candidate with every seed and keeps the candidate with the
/// best mean selected-validation accuracy. Ties go to the earlier
/// candidate. Failed runs are skipped.
pub fn run_search_candidates(
    candidates: Vec<Experiment>,
    seeds: &[u64],
    dataset: &Dataset,
    strategy: Strategy,
) -> Result<SearchOutcome> {
    if candidates.is_empty() {
        return Err(Error::Config("no candidates to search".into()));
    }
    let jobs: Vec<(usize, u64)> = (0..candidates.len()).flat_map(|c| seeds.iter().map(move |&s| (c, s))).collect();
    let results: Vec<(usize, u64, Result<(TrialRow, f64)>)> = jobs
        .par_iter()
        .map(|&(c, s)| {
            let r = run_trial(&candidates[c], dataset, s, strategy).map(|t| (t.row, t.selected_score));
            (c, s, r)
        })
        .collect();

    let mut table = TrialTable::default();
    let mut failures = Vec::new();
    let mut scores: Vec<Vec<f64>> = vec![Vec::new(); candidates.len()];
    for (c, s, r) in results {
        match r {
            Ok((row, score)) => {
                table.push(row)?;
                scores[c].push(score);
            }
            Err(e) => {
                log::warn!("trial {} seed {s} failed: {e}", candidates[c].config_id);
                failures.push((candidates[c].config_id.clone(), s, e.to_string()));
            }
        }
    }
    let mut best: Option<(usize, f64)> = None;
    for (c, v) in scores.iter().enumerate() {
        if v.is_empty() {
            continue;
        }
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        if best.map_or(true, |(_, b)| mean > b) {
            best = Some((c, mean));
        }
    }
    let (c, best_score) = best.ok_or_else(|| Error::Protocol("every search trial failed".into()))?;
    Ok(SearchOutcome {
        best: candidates[c].clone(),
        best_score,
        candidates,
        table,
        failures,
    })
}
