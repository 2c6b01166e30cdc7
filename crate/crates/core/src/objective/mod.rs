//! Loss terms and the full training objective.
//!
//! Two penalties are functions of first-order gradients: the squared
//! cosine between the category and environment loss gradients at each image
//! feature, and the IRM penalty (the squared derivative of each
//! environment's loss under a scalar logit scale at 1). Both stay on the
//! tape, so the total remains differentiable in every variational
//! parameter.

use serde::{Deserialize, Serialize};

use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{alignment_logits, normalize_rows, BoundParams, KlMode, LabeledBatch, Model, Sampled};

/// How per-example squared cosines are reduced over the batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrthReduction {
    #[default]
    Mean,
    Sum,
    /// One squared cosine between the two whole gradient matrices.
    Flattened,
}

/// Which branch's logits the IRM penalty is computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IrmTarget {
    #[default]
    Category,
    Environment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub temperature: f64,
    pub kl_mode: KlMode,
    /// Adds the KL terms. Off for deterministic variants.
    pub include_kl: bool,
    /// Divides the KL terms by the number of training examples.
    pub kl_per_datum: bool,
    pub orth_reduction: OrthReduction,
    pub irm_target: IrmTarget,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            temperature: 10.0,
            kl_mode: KlMode::Paper,
            include_kl: true,
            kl_per_datum: false,
            orth_reduction: OrthReduction::Mean,
            irm_target: IrmTarget::Category,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, l) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::Config(format!("{name} = {l} must be a non-negative number")));
            }
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Mean squared cosine between the two branches' per-example feature
/// gradients on `batch`, at the posterior means.
pub fn gradient_alignment(model: &Model, batch: &LabeledBatch, temperature: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Protocol("gradient alignment of an empty batch".into()));
    }
    let tape = Tape::new();
    let bound = model.bind(&tape);
    let s = model.sample(&bound, None)?;
    let image = tape.leaf(batch.features.clone());
    let cat: Vec<usize> = (0..model.category.n_names()).collect();
    let env: Vec<usize> = (0..model.environment.n_names()).collect();
    let (cl, _) = alignment_logits(image, model.category.text_features(&tape, &cat, &s.category)?, temperature)?;
    let (el, _) = alignment_logits(image, model.environment.text_features(&tape, &env, &s.environment)?, temperature)?;
    let (g1, g2) = feature_gradients(image, cl, &batch.y_cat, el, &batch.y_env)?;
    Ok(orth_penalty(g1, g2, OrthReduction::Mean)?.0.item())
}

/// Values of every term of one objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce_cat: f64,
    pub ce_env: f64,
    pub irm: f64,
    pub orth: f64,
    pub kl_cat: f64,
    pub kl_env: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `ce_cat + λ1·ce_env + λ2·irm + λ3·orth + kl_cat + kl_env`.
    pub fn reassemble(&self, lambda1: f64, lambda2: f64, lambda3: f64) -> f64 {
        self.ce_cat + lambda1 * self.ce_env + lambda2 * self.irm + lambda3 * self.orth + self.kl_cat + self.kl_env
    }

    pub fn is_finite(&self) -> bool {
        [self.ce_cat, self.ce_env, self.irm, self.orth, self.kl_cat, self.kl_env, self.total]
            .iter()
            .all(|x| x.is_finite())
    }
}

/// Conditions that did not stop the computation but are worth reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Degeneracy {
    /// An all-zero feature row met the cosine guard.
    pub zero_feature: bool,
    /// Some example had both loss gradients below the cosine guard.
    pub zero_gradients: bool,
}

/// A differentiable total with its breakdown.
pub struct Objective<'t> {
    pub total: Var<'t>,
    pub breakdown: LossBreakdown,
    pub flags: Degeneracy,
}

fn check_labels(logits: Var<'_>, labels: &[usize]) -> Result<()> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::Shape {
            op: "cross_entropy",
            left: s,
            right: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= s[1]) {
        return Err(Error::Vocabulary { index: bad, size: s[1] });
    }
    Ok(())
}

/// Summed negative log-likelihood of `labels` under row softmaxes.
pub fn cross_entropy_sum<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    check_labels(logits, labels)?;
    logits.log_softmax()?.gather(labels)?.sum()?.neg()
}

/// Mean negative log-likelihood of `labels` under row softmaxes.
pub fn cross_entropy<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    if labels.is_empty() {
        return Err(Error::Protocol("cross-entropy of an empty batch".into()));
    }
    cross_entropy_sum(logits, labels)?.scale(1.0 / labels.len() as f64)
}

/// Per-example gradients of the category and environment losses with
/// respect to the image feature rows. `image` must be a differentiable leaf.
/// Both results remain differentiable in the text-side parameters.
pub fn feature_gradients<'t>(
    image: Var<'t>,
    cat_logits: Var<'t>,
    y_cat: &[usize],
    env_logits: Var<'t>,
    y_env: &[usize],
) -> Result<(Var<'t>, Var<'t>)> {
    let tape = image.tape();
    // Row i of the summed loss depends on feature row i only, so the
    // gradient of the sum holds each example's own gradient.
    let g1 = tape.grad(cross_entropy_sum(cat_logits, y_cat)?, &[image])?.get(0);
    let g2 = tape.grad(cross_entropy_sum(env_logits, y_env)?, &[image])?.get(0);
    for g in [g1, g2] {
        let v = g.value();
        for i in 0..v.rows() {
            if v.row(i).iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!("non-finite feature gradient at example {i}")));
            }
        }
    }
    Ok((g1, g2))
}

/// Squared cosine between `g1` and `g2` rows, reduced per `reduction`.
/// The flag is set when some row has both gradients below the guard.
pub fn orth_penalty<'t>(g1: Var<'t>, g2: Var<'t>, reduction: OrthReduction) -> Result<(Var<'t>, bool)> {
    if g1.shape() != g2.shape() || g1.shape().len() != 2 {
        return Err(Error::Shape {
            op: "orth_penalty",
            left: g1.shape(),
            right: g2.shape(),
        });
    }
    let n = g1.shape()[0];
    if n == 0 {
        return Err(Error::Protocol("orthogonality penalty of an empty batch".into()));
    }
    let (a, _) = normalize_rows(g1)?;
    let (b, _) = normalize_rows(g2)?;
    let (va, vb) = (g1.value(), g2.value());
    let tiny = |v: &Tensor, i: usize| v.row(i).iter().map(|x| x * x).sum::<f64>().sqrt() < crate::model::COSINE_EPS;
    let degenerate = (0..n).any(|i| tiny(&va, i) && tiny(&vb, i));
    let value = match reduction {
        OrthReduction::Mean => a.mul(b)?.sum_rows()?.square()?.mean()?,
        OrthReduction::Sum => a.mul(b)?.sum_rows()?.square()?.sum()?,
        OrthReduction::Flattened => g1.cosine(g2, crate::model::COSINE_EPS)?.square()?,
    };
    Ok((value, degenerate))
}

/// `Σ_e (d/dw ℓ_e(w · logits_e) at w = 1)²`.
pub fn irm_penalty<'t>(tape: &'t Tape, per_env: &[(Var<'t>, Vec<usize>)]) -> Result<Var<'t>> {
    if per_env.is_empty() {
        return Err(Error::Protocol("IRM penalty needs at least one environment".into()));
    }
    let mut total = tape.scalar(0.0);
    for (e, (logits, labels)) in per_env.iter().enumerate() {
        if labels.is_empty() {
            return Err(Error::Protocol(format!("environment {e} has no examples")));
        }
        let w = tape.leaf(Tensor::scalar(1.0));
        let loss = cross_entropy(logits.mul(w)?, labels)?;
        let dw = tape.grad(loss, &[w])?.get(0);
        total = total.add(dw.square()?)?;
    }
    Ok(total)
}

/// Splits `logits` rows and `labels` by the batch's environment partition.
pub fn partition_by_env<'t>(
    batch: &LabeledBatch,
    logits: Var<'t>,
    labels: &[usize],
) -> Result<Vec<(Var<'t>, Vec<usize>)>> {
    batch
        .env_partition
        .values()
        .map(|rows| Ok((logits.index_rows(rows)?, rows.iter().map(|&r| labels[r]).collect())))
        .collect()
}

/// The full objective on `batch` for parameter draws `sampled`, whose
/// leaves are `bound`.
pub fn total_objective<'t>(
    tape: &'t Tape,
    model: &Model,
    bound: &BoundParams<'t>,
    sampled: &Sampled<'t>,
    batch: &LabeledBatch,
    cfg: &ObjectiveConfig,
) -> Result<Objective<'t>> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::Protocol("objective of an empty batch".into()));
    }
    let image = tape.leaf(batch.features.clone());
    let cat_names: Vec<usize> = (0..model.category.n_names()).collect();
    let env_names: Vec<usize> = (0..model.environment.n_names()).collect();
    let cat_text = model.category.text_features(tape, &cat_names, &sampled.category)?;
    let env_text = model.environment.text_features(tape, &env_names, &sampled.environment)?;
    let (cat_logits, z1) = alignment_logits(image, cat_text, cfg.temperature)?;
    let (env_logits, z2) = alignment_logits(image, env_text, cfg.temperature)?;

    let ce_cat = cross_entropy(cat_logits, &batch.y_cat)?;
    let ce_env = cross_entropy(env_logits, &batch.y_env)?;

    let per_env = match cfg.irm_target {
        IrmTarget::Category => partition_by_env(batch, cat_logits, &batch.y_cat)?,
        IrmTarget::Environment => partition_by_env(batch, env_logits, &batch.y_env)?,
    };
    let irm = irm_penalty(tape, &per_env)?;

    let (g1, g2) = feature_gradients(image, cat_logits, &batch.y_cat, env_logits, &batch.y_env)?;
    let (orth, zero_gradients) = orth_penalty(g1, g2, cfg.orth_reduction)?;

    let (mut kl_cat, mut kl_env) = if cfg.include_kl {
        model.kl(tape, bound, cfg.kl_mode)?
    } else {
        (tape.scalar(0.0), tape.scalar(0.0))
    };
    if cfg.include_kl && cfg.kl_per_datum {
        let s = 1.0 / batch.len() as f64;
        kl_cat = kl_cat.scale(s)?;
        kl_env = kl_env.scale(s)?;
    }

    // Terms with a zero weight stay out of the graph.
    let mut total = ce_cat;
    for (lambda, term) in [(cfg.lambda1, ce_env), (cfg.lambda2, irm), (cfg.lambda3, orth)] {
        if lambda > 0.0 {
            total = total.add(term.scale(lambda)?)?;
        }
    }
    if cfg.include_kl {
        total = total.add(kl_cat)?.add(kl_env)?;
    }

    let breakdown = LossBreakdown {
        ce_cat: ce_cat.item(),
        ce_env: ce_env.item(),
        irm: irm.item(),
        orth: orth.item(),
        kl_cat: kl_cat.item(),
        kl_env: kl_env.item(),
        total: total.item(),
    };
    Ok(Objective {
        total,
        breakdown,
        flags: Degeneracy {
            zero_feature: z1 || z2,
            zero_gradients,
        },
    })
}
