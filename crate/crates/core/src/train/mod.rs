//! Variational training loop, SGD with momentum, checkpoints and model
//! selection.

mod io;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ExperimentSplits};
use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::eval::{accuracy, predict, Partition};
use crate::model::{BranchKind, InferenceRule, LabeledBatch, Model, ModelCheckpoint, ModelConfig};
use crate::objective::{total_objective, LossBreakdown, ObjectiveConfig};
use crate::seed;

pub use io::{read_checkpoint, write_run, RunFiles};

/// Seed streams of one run.
pub const STREAM_INIT: u64 = 1;
pub const STREAM_NOISE: u64 = 2;
pub const STREAM_EVAL: u64 = 3;
pub const STREAM_SPLIT: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Strategy {
    /// Best accuracy on held-out data from the training domains.
    #[serde(rename = "train-domain")]
    TrainDomain,
    /// The last checkpoint, scored on data from the test distribution.
    #[default]
    #[serde(rename = "test-domain")]
    TestDomain,
    /// Best accuracy on an environment that is neither training nor test.
    #[serde(rename = "ood")]
    Ood,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::TrainDomain => "train-domain",
            Strategy::TestDomain => "test-domain",
            Strategy::Ood => "ood",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train-domain" => Ok(Strategy::TrainDomain),
            "test-domain" => Ok(Strategy::TestDomain),
            "ood" => Ok(Strategy::Ood),
            other => Err(Error::Config(format!("unknown selection strategy {other}"))),
        }
    }
}

/// How the training set is presented per optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchRule {
    /// The whole few-shot training set every step.
    #[default]
    FullBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub objective: ObjectiveConfig,
    /// Sample parameters and add the KL terms. When off, training uses the
    /// posterior means and the objective has no KL.
    pub bayesian: bool,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch: BatchRule,
    /// Monte Carlo draws per step.
    pub mc_samples: usize,
    pub seed: u64,
    pub strategy: Strategy,
    pub inference: InferenceRule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            objective: ObjectiveConfig::default(),
            bayesian: true,
            lr: 0.01,
            momentum: 0.9,
            epochs: 30,
            batch: BatchRule::FullBatch,
            mc_samples: 1,
            seed: 1,
            strategy: Strategy::TestDomain,
            inference: InferenceRule::PosteriorMean,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        if !(self.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.mc_samples == 0 {
            return Err(Error::Config("mc_samples must be at least 1".into()));
        }
        Ok(())
    }

    /// The objective actually optimized: deterministic runs carry no KL.
    pub fn effective_objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            include_kl: self.bayesian && self.objective.include_kl,
            ..self.objective.clone()
        }
    }
}

/// Encoded splits of one run.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub train: LabeledBatch,
    pub val_train: Option<LabeledBatch>,
    pub val_test: Option<LabeledBatch>,
    pub val_ood: Option<LabeledBatch>,
    pub test: Option<LabeledBatch>,
}

impl TaskData {
    /// Encodes `splits` of `dataset`. With `classes`, category labels are
    /// remapped into that list and samples of other classes are dropped.
    pub fn build(model: &Model, dataset: &Dataset, splits: &ExperimentSplits, classes: Option<&[usize]>) -> Result<Self> {
        let n_cat = model.category.n_names();
        let n_env = model.environment.n_names();
        let batch = |idx: &[usize]| -> Result<Option<LabeledBatch>> {
            let kept: Vec<usize> = idx
                .iter()
                .copied()
                .filter(|&i| classes.map_or(true, |c| c.contains(&dataset.samples[i].y_cat)))
                .collect();
            if kept.is_empty() {
                return Ok(None);
            }
            LabeledBatch::from_samples(&model.encoder, &dataset.select(&kept), classes, n_cat, n_env).map(Some)
        };
        Ok(Self {
            train: batch(&splits.train)?.ok_or_else(|| Error::Protocol("empty training split".into()))?,
            val_train: batch(&splits.val_train)?,
            val_test: batch(&splits.val_test)?,
            val_ood: batch(&splits.val_ood)?,
            test: batch(&splits.test)?,
        })
    }
}

/// Accuracies at one checkpoint; `None` where the split is absent.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub train: Option<f64>,
    pub val_train: Option<f64>,
    pub val_test: Option<f64>,
    pub val_ood: Option<f64>,
    pub test: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    /// 0 is the initialization; epoch `e` follows the `e`-th update.
    pub epoch: usize,
    pub model: ModelCheckpoint,
    pub metrics: Metrics,
    /// The objective at the step that produced this checkpoint; absent at
    /// initialization.
    pub loss: Option<LossBreakdown>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoints: Vec<Checkpoint>,
    /// Flattened posterior means after each epoch, initialization first.
    pub trajectory: Vec<Vec<f64>>,
    pub model: Model,
    pub frozen_before: String,
    pub frozen_after: String,
}

/// Momentum buffers, one per parameter array.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SgdState {
    pub velocity: Vec<Tensor>,
}

/// Classical momentum: `v ← m·v + g`, `p ← p − lr·v`.
pub fn optimizer_step(params: &mut [&mut Tensor], grads: &[Tensor], lr: f64, momentum: f64, state: &mut SgdState) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Contract(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    if state.velocity.is_empty() {
        state.velocity = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        if p.shape() != g.shape() || v.shape() != g.shape() {
            return Err(Error::Shape {
                op: "optimizer_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        for ((pi, gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = momentum * *vi + gi;
            *pi -= lr * *vi;
        }
    }
    Ok(())
}

/// Mutable references to every `mu` and `rho`, in leaf order.
fn param_refs(model: &mut Model) -> Vec<&mut Tensor> {
    let mut out = Vec::new();
    for b in [&mut model.category, &mut model.environment] {
        for p in b.params.values_mut() {
            out.push(&mut p.mu);
            out.push(&mut p.rho);
        }
    }
    out
}

/// One objective evaluation and its gradient with respect to every `mu`
/// and `rho`. With several draws the data terms are averaged over draws
/// and the KL enters once.
pub fn objective_and_gradient(
    model: &Model,
    batch: &LabeledBatch,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let obj_cfg = config.effective_objective();
    let draws = if config.bayesian { config.mc_samples } else { 1 };
    let data_cfg = ObjectiveConfig {
        include_kl: false,
        ..obj_cfg.clone()
    };
    let tape = Tape::new();
    let bound = model.bind(&tape);
    let scale = 1.0 / draws as f64;
    let mut breakdown = LossBreakdown::default();
    let mut total: Option<Var> = None;
    for _ in 0..draws {
        let noise = if config.bayesian { Some(model.draw_noise(rng)) } else { None };
        let sampled = model.sample(&bound, noise.as_ref())?;
        let obj = total_objective(&tape, model, &bound, &sampled, batch, &data_cfg)?;
        let b = obj.breakdown;
        breakdown.ce_cat += scale * b.ce_cat;
        breakdown.ce_env += scale * b.ce_env;
        breakdown.irm += scale * b.irm;
        breakdown.orth += scale * b.orth;
        let t = obj.total.scale(scale)?;
        total = Some(match total {
            None => t,
            Some(acc) => acc.add(t)?,
        });
    }
    let mut total = total.expect("at least one draw");
    if obj_cfg.include_kl {
        let (mut kc, mut ke) = model.kl(&tape, &bound, obj_cfg.kl_mode)?;
        if obj_cfg.kl_per_datum {
            kc = kc.scale(1.0 / batch.len() as f64)?;
            ke = ke.scale(1.0 / batch.len() as f64)?;
        }
        breakdown.kl_cat = kc.item();
        breakdown.kl_env = ke.item();
        total = total.add(kc)?.add(ke)?;
    }
    breakdown.total = total.item();
    if !breakdown.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss: {}",
            serde_json::to_string(&breakdown).unwrap_or_default()
        )));
    }
    let leaves: Vec<Var> = bound.leaves().iter().flat_map(|(_, _, mu, rho)| [*mu, *rho]).collect();
    let g = tape.grad(total, &leaves)?;
    Ok((breakdown, (0..leaves.len()).map(|i| g.get(i).eval()).collect()))
}

/// The objective of `config` at the posterior means, without sampling.
pub fn objective_at_means(model: &Model, batch: &LabeledBatch, config: &TrainConfig) -> Result<LossBreakdown> {
    let tape = Tape::new();
    let bound = model.bind(&tape);
    let sampled = model.sample(&bound, None)?;
    Ok(total_objective(&tape, model, &bound, &sampled, batch, &config.effective_objective())?.breakdown)
}

/// Accuracy of `model` on every split of `data`.
pub fn evaluate(model: &Model, data: &TaskData, config: &TrainConfig, eval_seed: u64) -> Result<Metrics> {
    let t = config.objective.temperature;
    let acc = |b: &Option<LabeledBatch>| -> Result<Option<f64>> {
        match b {
            None => Ok(None),
            Some(b) => accuracy(&predict(model, b, t, config.inference, eval_seed, Partition::Test)?).map(Some),
        }
    };
    Ok(Metrics {
        train: Some(accuracy(&predict(model, &data.train, t, config.inference, eval_seed, Partition::Base)?)?),
        val_train: acc(&data.val_train)?,
        val_test: acc(&data.val_test)?,
        val_ood: acc(&data.val_ood)?,
        test: acc(&data.test)?,
    })
}

/// Trains `model` on `data.train`: one full-batch step per epoch, with a
/// checkpoint after every epoch and one at initialization.
pub fn train_task(config: &TrainConfig, mut model: Model, data: &TaskData) -> Result<TrainOutcome> {
    config.validate()?;
    if config.objective.lambda2 > 0.0 && data.train.env_partition.len() < 2 {
        return Err(Error::Protocol("the IRM penalty needs at least two training environments".into()));
    }
    let mut noise_rng = seed::rng(config.seed, STREAM_NOISE);
    let eval_seed = seed::split(config.seed, STREAM_EVAL);
    let frozen_before = model.frozen_fingerprint();
    let mut state = SgdState::default();
    let mut checkpoints = Vec::with_capacity(config.epochs + 1);
    let mut trajectory = Vec::with_capacity(config.epochs + 1);

    checkpoints.push(Checkpoint {
        epoch: 0,
        model: model.to_checkpoint(),
        metrics: evaluate(&model, data, config, eval_seed)?,
        loss: None,
    });
    trajectory.push(model.flat_means());

    for epoch in 1..=config.epochs {
        let (loss, grads) = objective_and_gradient(&model, &data.train, config, &mut noise_rng)?;
        optimizer_step(&mut param_refs(&mut model), &grads, config.lr, config.momentum, &mut state)?;
        let metrics = evaluate(&model, data, config, eval_seed)?;
        log::debug!("epoch {epoch}: total {:.5} train acc {:?}", loss.total, metrics.train);
        checkpoints.push(Checkpoint {
            epoch,
            model: model.to_checkpoint(),
            metrics,
            loss: Some(loss),
        });
        trajectory.push(model.flat_means());
    }
    let frozen_after = model.frozen_fingerprint();
    Ok(TrainOutcome {
        checkpoints,
        trajectory,
        model,
        frozen_before,
        frozen_after,
    })
}

/// The untrained prompt: every context mean set to zero, so each name's
/// text feature is its frozen token through the mixer. Only prompt
/// branches have this reading.
pub fn zero_shot(config: &TrainConfig, mut model: Model, data: &TaskData) -> Result<TrainOutcome> {
    if model.category.kind() != BranchKind::Pl || model.environment.kind() != BranchKind::Pl {
        return Err(Error::Config("zero-shot evaluation needs prompt branches".into()));
    }
    let frozen_before = model.frozen_fingerprint();
    model.set_flat_means(&vec![0.0; model.n_params()])?;
    let metrics = evaluate(&model, data, config, seed::split(config.seed, STREAM_EVAL))?;
    Ok(TrainOutcome {
        checkpoints: vec![Checkpoint {
            epoch: 0,
            model: model.to_checkpoint(),
            metrics,
            loss: None,
        }],
        trajectory: vec![model.flat_means()],
        frozen_after: model.frozen_fingerprint(),
        frozen_before,
        model,
    })
}

/// Index of the checkpoint chosen by `strategy` and its validation score.
/// Argmax strategies break ties toward the earliest epoch.
pub fn select_model(checkpoints: &[Checkpoint], strategy: Strategy) -> Result<(usize, f64)> {
    if checkpoints.is_empty() {
        return Err(Error::Protocol("no checkpoints to select from".into()));
    }
    let score = |c: &Checkpoint| match strategy {
        Strategy::TrainDomain => c.metrics.val_train,
        Strategy::TestDomain => c.metrics.val_test,
        Strategy::Ood => c.metrics.val_ood,
    };
    let missing = || {
        Error::Protocol(format!(
            "strategy {} needs its validation set at every checkpoint",
            strategy.name()
        ))
    };
    match strategy {
        Strategy::TestDomain => {
            let last = checkpoints.len() - 1;
            Ok((last, score(&checkpoints[last]).ok_or_else(missing)?))
        }
        _ => {
            let mut best: Option<(usize, f64)> = None;
            for (i, c) in checkpoints.iter().enumerate() {
                let s = score(c).ok_or_else(missing)?;
                if best.map_or(true, |(_, b)| s > b) {
                    best = Some((i, s));
                }
            }
            Ok(best.expect("nonempty"))
        }
    }
}
