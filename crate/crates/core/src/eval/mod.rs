//! Accuracy, confidence-thresholded accuracy, significance testing,
//! trial aggregation and loss-landscape export.

mod pca;
mod trials;
mod wilcoxon;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{InferenceRule, LabeledBatch, Model, Vocabulary};

pub(crate) use pca::csv_err;
pub use pca::{pca_landscape, principal_components, write_landscape, Grid, Landscape, Pca};
pub use trials::{aggregate_trials, write_aggregates, write_results, AggregateRow, TrialRow, TrialTable, RESULTS_HEADER};
pub use wilcoxon::{paired_tests, wilcoxon_signed_rank, write_paired_tests, PairedTest, Wilcoxon};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    IidNew,
    OodNew,
    Base,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub label: usize,
    pub predicted: usize,
    /// Largest class probability.
    pub confidence: f64,
    pub tag: Partition,
}

impl PredictionRecord {
    pub fn correct(&self) -> bool {
        self.label == self.predicted
    }
}

/// Predictions of the category branch on `batch`. Ties in the argmax go to
/// the lowest class index.
pub fn predict(
    model: &Model,
    batch: &LabeledBatch,
    temperature: f64,
    rule: InferenceRule,
    seed: u64,
    tag: Partition,
) -> Result<Vec<PredictionRecord>> {
    if batch.is_empty() {
        return Ok(Vec::new());
    }
    let probs = model.predict_proba(&batch.features, temperature, rule, seed)?;
    Ok((0..batch.len())
        .map(|i| {
            let row = probs.row(i);
            let (predicted, confidence) = row
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (j, p)| if p > b.1 { (j, p) } else { b });
            PredictionRecord {
                label: batch.y_cat[i],
                predicted,
                confidence,
                tag,
            }
        })
        .collect())
}

pub fn accuracy(predictions: &[PredictionRecord]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Protocol("accuracy of an empty prediction set".into()));
    }
    let correct = predictions.iter().filter(|p| p.correct()).count();
    Ok(correct as f64 / predictions.len() as f64)
}

/// Nearest-rank `q`-quantile of ascending `sorted`: the element of rank
/// `max(1, ceil(q·n))`.
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let k = ((q * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    sorted[k - 1]
}

/// Confidence threshold that keeps at least `retention` of the correctly
/// classified validation predictions: their nearest-rank `1 − retention`
/// quantile. With `literal`, the `retention` quantile itself is returned
/// instead.
pub fn confidence_threshold(validation: &[PredictionRecord], retention: f64, literal: bool) -> Result<f64> {
    if !(0.0..=1.0).contains(&retention) {
        return Err(Error::Config(format!("retention {retention} outside [0, 1]")));
    }
    let mut conf: Vec<f64> = validation.iter().filter(|p| p.correct()).map(|p| p.confidence).collect();
    if conf.is_empty() {
        return Err(Error::Degenerate("no correctly classified validation predictions".into()));
    }
    conf.sort_by(f64::total_cmp);
    let q = if literal { retention } else { 1.0 - retention };
    Ok(nearest_rank(&conf, q))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccStar {
    /// Accuracy over retained predictions; `None` when nothing is retained.
    pub acc: Option<f64>,
    /// Fraction of predictions retained.
    pub retention: f64,
}

impl AccStar {
    pub fn undefined(&self) -> bool {
        self.acc.is_none()
    }
}

/// Accuracy over the predictions with confidence at or above `threshold`.
pub fn acc_star(test: &[PredictionRecord], threshold: f64) -> Result<AccStar> {
    if test.is_empty() {
        return Err(Error::Protocol("Acc* of an empty prediction set".into()));
    }
    let kept: Vec<PredictionRecord> = test.iter().filter(|p| p.confidence >= threshold).copied().collect();
    let retention = kept.len() as f64 / test.len() as f64;
    Ok(AccStar {
        acc: if kept.is_empty() { None } else { Some(accuracy(&kept)?) },
        retention,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaseToNew {
    pub iid_acc: f64,
    pub ood_acc: f64,
    pub iid_acc_star: Option<f64>,
    pub ood_acc_star: Option<f64>,
    pub threshold: f64,
}

/// Inputs of [`base_to_new_eval`].
pub struct BaseToNewData<'a> {
    pub base_classes: &'a [usize],
    pub new_classes: &'a [usize],
    /// Vocabulary of the new classes, in `new_classes` order.
    pub new_vocab: Vocabulary,
    /// Base-class validation batch, labels indexed like the trained model.
    pub base_val: &'a LabeledBatch,
    /// New-class batches from training domains and from the test domain,
    /// labels indexed like `new_classes`.
    pub iid_new: &'a LabeledBatch,
    pub ood_new: &'a LabeledBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub temperature: f64,
    pub rule: InferenceRule,
    pub seed: u64,
    pub retention: f64,
    pub quantile_literal: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            temperature: 10.0,
            rule: InferenceRule::PosteriorMean,
            seed: 0,
            retention: 0.95,
            quantile_literal: false,
        }
    }
}

/// Evaluates a model trained on base classes on new classes, in and out of
/// the training domains. The threshold comes from base validation.
pub fn base_to_new_eval(model: &Model, data: BaseToNewData<'_>, settings: &EvalSettings) -> Result<BaseToNew> {
    if let Some(c) = data.base_classes.iter().find(|c| data.new_classes.contains(c)) {
        return Err(Error::Protocol(format!("class {c} is both base and new")));
    }
    let s = settings;
    let base = predict(model, data.base_val, s.temperature, s.rule, s.seed, Partition::Base)?;
    let threshold = confidence_threshold(&base, s.retention, s.quantile_literal)?;
    let novel = model.with_categories(data.new_vocab)?;
    let iid = predict(&novel, data.iid_new, s.temperature, s.rule, s.seed, Partition::IidNew)?;
    let ood = predict(&novel, data.ood_new, s.temperature, s.rule, s.seed, Partition::OodNew)?;
    Ok(BaseToNew {
        iid_acc: accuracy(&iid)?,
        ood_acc: accuracy(&ood)?,
        iid_acc_star: acc_star(&iid, threshold)?.acc,
        ood_acc_star: acc_star(&ood, threshold)?.acc,
        threshold,
    })
}

#[cfg(test)]
mod tests;
