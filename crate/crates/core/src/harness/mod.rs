//! Experiment definitions, single trials, random search, ablations and run
//! manifests.

mod ablation;
mod manifest;
mod search;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{generate, split_base_new, Dataset, DatasetSpec, ExperimentSplits, Split};
use crate::error::{Error, Result};
use crate::eval::{acc_star, accuracy, base_to_new_eval, confidence_threshold, predict, BaseToNewData, EvalSettings, Partition, TrialRow};
use crate::model::{BranchConfig, LabeledBatch, Model, ModelConfig, Vocabulary};
use crate::objective::ObjectiveConfig;
use crate::seed;
use crate::train::{
    select_model, train_task, write_run, zero_shot, Strategy, TaskData, TrainConfig, TrainOutcome, STREAM_EVAL, STREAM_INIT,
    STREAM_SPLIT,
};

pub use ablation::{run_ablation, write_ablation_table, Ablation, ABLATION_HEADER};
pub use manifest::{execute, replay, RunKind, RunManifest};

pub use search::{run_search, run_search_candidates, sample_hyperparams, LogRange, SearchOutcome, SearchSpace};

/// How a trial obtains its model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Optimize the objective from `TrainConfig`.
    #[default]
    Learn,
    /// No learning: zero context, frozen text only.
    ZeroShot,
}

/// Train on a random subset of classes and evaluate on the rest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaseNewSetup {
    pub fraction_base: f64,
}

/// Everything one trial needs besides its seed and selection strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Experiment {
    pub config_id: String,
    pub dataset_name: String,
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    pub method: Method,
    /// Training shots per class, spread over the training domains.
    pub k_shot: usize,
    /// Validation shots per class for every validation split.
    pub k_val: usize,
    pub base_new: Option<BaseNewSetup>,
    pub retention: f64,
    pub quantile_literal: bool,
}

impl Default for Experiment {
    fn default() -> Self {
        Self {
            config_id: "bayes-cal".into(),
            dataset_name: "cmnist".into(),
            dataset: DatasetSpec::colored_benchmark(0),
            train: TrainConfig::default(),
            method: Method::Learn,
            k_shot: 16,
            k_val: 16,
            base_new: None,
            retention: 0.95,
            quantile_literal: false,
        }
    }
}

impl Experiment {
    /// The colored benchmark with the shipped Bayes-CAL settings: context
    /// prompts of 4 tokens, class-specific contexts, λ = (1, 0.1, 1).
    pub fn colored() -> Self {
        let branch = BranchConfig {
            n_ctx: 4,
            token_dim: 64,
            csc: true,
            ..BranchConfig::default()
        };
        let model = ModelConfig {
            category: branch.clone(),
            environment: branch,
            ..ModelConfig::default()
        };
        Self {
            train: TrainConfig {
                model,
                objective: ObjectiveConfig {
                    lambda1: 1.0,
                    lambda2: 0.1,
                    lambda3: 1.0,
                    ..ObjectiveConfig::default()
                },
                ..TrainConfig::default()
            },
            ..Self::default()
        }
    }

    /// Eight classes under style shift, three quarters used for training.
    /// The category prompt shares its context across classes so it can be
    /// carried to unseen names.
    pub fn base_to_new() -> Self {
        let mut exp = Self::colored();
        exp.dataset_name = "styles8".into();
        exp.dataset = DatasetSpec::diversity_benchmark(8, 3, 0);
        exp.dataset.noise_sigma = 1.0;
        exp.train.model.category.csc = false;
        exp.base_new = Some(BaseNewSetup { fraction_base: 0.75 });
        exp
    }

    /// One of the shipped baselines on top of `self`: `zero-shot`, `coop`
    /// (all λ zero, deterministic), `cal` (deterministic) or `bayes-cal`.
    pub fn baseline(&self, name: &str) -> Result<Self> {
        let mut exp = self.clone();
        exp.config_id = name.to_string();
        match name {
            "zero-shot" => exp.method = Method::ZeroShot,
            "coop" => {
                exp.train.bayesian = false;
                exp.train.objective.lambda1 = 0.0;
                exp.train.objective.lambda2 = 0.0;
                exp.train.objective.lambda3 = 0.0;
            }
            "cal" => exp.train.bayesian = false,
            "bayes-cal" => exp.train.bayesian = true,
            other => return Err(Error::Config(format!("unknown baseline {other}"))),
        }
        Ok(exp)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.train.validate()?;
        if self.k_shot == 0 {
            return Err(Error::Config("k_shot must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.retention) {
            return Err(Error::Config(format!("retention {} outside [0, 1]", self.retention)));
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<Dataset> {
        generate(&self.dataset)
    }

    fn eval_settings(&self, seed: u64) -> EvalSettings {
        EvalSettings {
            temperature: self.train.objective.temperature,
            rule: self.train.inference,
            seed: seed::split(seed, STREAM_EVAL),
            retention: self.retention,
            quantile_literal: self.quantile_literal,
        }
    }
}

/// Outcome of one (experiment, seed, strategy) run.
#[derive(Debug, Clone)]
pub struct Trial {
    pub row: TrialRow,
    pub outcome: TrainOutcome,
    pub selected: usize,
    /// Validation accuracy of the selected checkpoint under the strategy.
    pub selected_score: f64,
}

fn validation<'a>(data: &'a TaskData, strategy: Strategy) -> Option<&'a LabeledBatch> {
    match strategy {
        Strategy::TrainDomain => data.val_train.as_ref(),
        Strategy::TestDomain => data.val_test.as_ref(),
        Strategy::Ood => data.val_ood.as_ref(),
    }
}

/// Splits, class partition, initial model and encoded data of one seed.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub data: TaskData,
    /// Base and new classes when the experiment trains on a subset.
    pub classes: Option<(Vec<usize>, Vec<usize>)>,
    pub model: Model,
}

/// Draws the few-shot splits and initializes the model for `seed`. The
/// dataset itself is fixed by its own spec.
pub fn prepare(exp: &Experiment, dataset: &Dataset, seed: u64) -> Result<Prepared> {
    exp.validate()?;
    let split_seed = seed::split(seed, STREAM_SPLIT);
    let splits = ExperimentSplits::build(dataset, exp.k_shot, exp.k_val, split_seed)?;
    let classes = match exp.base_new {
        Some(b) => {
            let all: Vec<usize> = (0..exp.dataset.n_classes).collect();
            Some(split_base_new(&all, b.fraction_base, split_seed)?)
        }
        None => None,
    };
    let base = classes.as_ref().map(|(b, _)| b.as_slice());
    let model = Model::for_dataset(exp.train.model.clone(), &exp.dataset, base, seed::split(seed, STREAM_INIT))?;
    let data = TaskData::build(&model, dataset, &splits, base)?;
    Ok(Prepared { data, classes, model })
}

/// Result row of `model` on the prepared splits: test accuracy, Acc* with
/// the threshold from the strategy's validation split and, for base/new
/// experiments, the new-class metrics.
pub fn score(
    exp: &Experiment,
    dataset: &Dataset,
    prepared: &Prepared,
    model: &Model,
    seed: u64,
    strategy: Strategy,
) -> Result<TrialRow> {
    let settings = exp.eval_settings(seed);
    let (t, rule, es) = (settings.temperature, settings.rule, settings.seed);
    let data = &prepared.data;
    let mut row = TrialRow::new(&exp.config_id, seed, &exp.dataset_name, strategy.name());
    let val = validation(data, strategy).ok_or_else(|| Error::Protocol("missing validation split".into()))?;
    let val_pred = predict(model, val, t, rule, es, Partition::Base)?;
    let threshold = match confidence_threshold(&val_pred, settings.retention, settings.quantile_literal) {
        Ok(th) => Some(th),
        Err(Error::Degenerate(_)) => None,
        Err(e) => return Err(e),
    };
    if let Some(test) = data.test.as_ref() {
        let pred = predict(model, test, t, rule, es, Partition::Test)?;
        row.acc = Some(accuracy(&pred)?);
        if let Some(th) = threshold {
            let a = acc_star(&pred, th)?;
            row.acc_star = a.acc;
            row.retention = Some(a.retention);
        }
    }

    if let (Some((base, new)), Some(_)) = (&prepared.classes, threshold) {
        let new_batch = |split: Split| -> Result<LabeledBatch> {
            let idx = dataset.indices(|s| s.split == split && new.contains(&s.y_cat));
            LabeledBatch::from_samples(
                &model.encoder,
                &dataset.select(&idx),
                Some(new),
                new.len(),
                model.environment.n_names(),
            )
        };
        let (iid, ood) = (new_batch(Split::Train)?, new_batch(Split::Test)?);
        let r = base_to_new_eval(
            model,
            BaseToNewData {
                base_classes: base,
                new_classes: new,
                new_vocab: Vocabulary::categories(&exp.dataset, &model.encoder, Some(new))?,
                base_val: val,
                iid_new: &iid,
                ood_new: &ood,
            },
            &settings,
        )?;
        row.iid_acc = Some(r.iid_acc);
        row.ood_acc = Some(r.ood_acc);
        row.iid_acc_star = r.iid_acc_star;
        row.ood_acc_star = r.ood_acc_star;
    }
    Ok(row)
}

/// Trains (or evaluates zero-shot) with `seed` driving the data split, the
/// initialization and the sampling noise, then scores the checkpoint that
/// `strategy` selects.
pub fn run_trial(exp: &Experiment, dataset: &Dataset, seed: u64, strategy: Strategy) -> Result<Trial> {
    let prepared = prepare(exp, dataset, seed)?;
    let cfg = TrainConfig {
        seed,
        strategy,
        ..exp.train.clone()
    };
    let outcome = match exp.method {
        Method::Learn => train_task(&cfg, prepared.model.clone(), &prepared.data)?,
        Method::ZeroShot => zero_shot(&cfg, prepared.model.clone(), &prepared.data)?,
    };
    if outcome.frozen_before != outcome.frozen_after {
        return Err(Error::Contract("frozen components changed during training".into()));
    }
    let (selected, selected_score) = select_model(&outcome.checkpoints, strategy)?;
    let chosen = Model::from_checkpoint(outcome.checkpoints[selected].model.clone())?;
    let row = score(exp, dataset, &prepared, &chosen, seed, strategy)?;
    Ok(Trial {
        row,
        outcome,
        selected,
        selected_score,
    })
}

/// [`run_trial`] plus the per-run files under `dir`.
pub fn run_trial_to(exp: &Experiment, dataset: &Dataset, seed: u64, strategy: Strategy, dir: &Path) -> Result<Trial> {
    let t = run_trial(exp, dataset, seed, strategy)?;
    write_run(&t.outcome, dir)?;
    Ok(t)
}

pub fn read_experiment(path: impl AsRef<Path>) -> Result<Experiment> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}
