//! Task-specific text branches.
//!
//! Three instantiations share one interface: given sampled parameters and a
//! list of name indices, produce one text feature row per name.
//!
//! * `Pl`: learnable context tokens composed with a frozen class-token
//!   embedding and passed through a frozen linear text mixer.
//! * `Lv`: a learnable feature row per name.
//! * `W2v`: fixed per-name word vectors through a learnable two-layer
//!   perceptron.

use std::collections::BTreeMap;
use std::rc::Rc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::variational::VariationalParam;
use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchKind {
    Pl,
    Lv,
    W2v,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassTokenPosition {
    #[default]
    End,
    Middle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BranchConfig {
    pub kind: BranchKind,
    /// Number of context tokens `M` (PL).
    pub n_ctx: usize,
    pub ctp: ClassTokenPosition,
    /// Class-specific context: one context set per name (PL).
    pub csc: bool,
    pub token_dim: usize,
    pub w2v_dim: usize,
    pub w2v_hidden: usize,
    pub init_std: f64,
    pub init_sigma: f64,
    pub prior_mu: f64,
    pub prior_sigma: f64,
    /// Relative size of the position-specific part of the PL mixer.
    pub mixer_jitter: f64,
}

impl Default for BranchConfig {
    fn default() -> Self {
        Self {
            kind: BranchKind::Pl,
            n_ctx: 16,
            ctp: ClassTokenPosition::End,
            csc: false,
            token_dim: 512,
            w2v_dim: 300,
            w2v_hidden: 64,
            init_std: 0.02,
            init_sigma: 0.05,
            prior_mu: 0.0,
            prior_sigma: 1.0,
            mixer_jitter: 0.1,
        }
    }
}

impl BranchConfig {
    pub fn with_kind(kind: BranchKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
enum Frozen {
    Pl { mixer: Rc<Tensor>, tokens: Tensor },
    Lv,
    W2v { embeddings: Tensor },
}

/// A text branch with its variational parameters and frozen parts.
#[derive(Debug, Clone)]
pub struct TextBranch {
    pub config: BranchConfig,
    pub names: Vec<String>,
    pub feature_dim: usize,
    pub frozen_seed: u64,
    /// Feature-space target of each name's frozen token (PL only).
    pub anchors: Option<Tensor>,
    pub params: BTreeMap<String, VariationalParam>,
    frozen: Frozen,
}

impl TextBranch {
    pub fn new(
        config: BranchConfig,
        names: Vec<String>,
        feature_dim: usize,
        anchors: Option<Tensor>,
        frozen_seed: u64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let n = names.len();
        let c = &config;
        let init = |shape: &[usize], std: f64, rng: &mut _| {
            VariationalParam::init(shape, std, c.init_sigma, c.prior_mu, c.prior_sigma, rng)
        };
        let mut params = BTreeMap::new();
        match c.kind {
            BranchKind::Pl => {
                let shape = if c.csc {
                    vec![n, c.n_ctx * c.token_dim]
                } else {
                    vec![c.n_ctx, c.token_dim]
                };
                params.insert("ctx".into(), init(&shape, c.init_std, rng)?);
            }
            BranchKind::Lv => {
                params.insert("table".into(), init(&[n, feature_dim], c.init_std, rng)?);
            }
            BranchKind::W2v => {
                let (i, h, d) = (c.w2v_dim, c.w2v_hidden, feature_dim);
                params.insert("w1".into(), init(&[i, h], 1.0 / (i as f64).sqrt(), rng)?);
                params.insert("b1".into(), init(&[h], c.init_std, rng)?);
                params.insert("w2".into(), init(&[h, d], 1.0 / (h as f64).sqrt(), rng)?);
                params.insert("b2".into(), init(&[d], c.init_std, rng)?);
            }
        }
        Self::from_parts(config, names, feature_dim, anchors, frozen_seed, params)
    }

    /// Rebuilds a branch from stored parameters; frozen parts are
    /// regenerated from `frozen_seed`.
    pub fn from_parts(
        config: BranchConfig,
        names: Vec<String>,
        feature_dim: usize,
        anchors: Option<Tensor>,
        frozen_seed: u64,
        params: BTreeMap<String, VariationalParam>,
    ) -> Result<Self> {
        if let Some(a) = &anchors {
            if a.shape() != [names.len(), feature_dim] {
                return Err(Error::Shape {
                    op: "anchors",
                    left: vec![names.len(), feature_dim],
                    right: a.shape().to_vec(),
                });
            }
        }
        if config.kind == BranchKind::Pl && config.n_ctx == 0 {
            return Err(Error::Config("prompt branch needs at least one context token".into()));
        }
        let frozen = build_frozen(&config, &names, feature_dim, anchors.as_ref(), frozen_seed)?;
        let branch = Self {
            config,
            names,
            feature_dim,
            frozen_seed,
            anchors,
            params,
            frozen,
        };
        branch.check_params()?;
        Ok(branch)
    }

    fn check_params(&self) -> Result<()> {
        let c = &self.config;
        let (n, d) = (self.names.len(), self.feature_dim);
        let expected: Vec<(&str, Vec<usize>)> = match c.kind {
            BranchKind::Pl if c.csc => vec![("ctx", vec![n, c.n_ctx * c.token_dim])],
            BranchKind::Pl => vec![("ctx", vec![c.n_ctx, c.token_dim])],
            BranchKind::Lv => vec![("table", vec![n, d])],
            BranchKind::W2v => vec![
                ("b1", vec![c.w2v_hidden]),
                ("b2", vec![d]),
                ("w1", vec![c.w2v_dim, c.w2v_hidden]),
                ("w2", vec![c.w2v_hidden, d]),
            ],
        };
        if self.params.len() != expected.len() {
            return Err(Error::Config(format!(
                "expected parameter blocks {:?}, found {:?}",
                expected.iter().map(|e| e.0).collect::<Vec<_>>(),
                self.params.keys().collect::<Vec<_>>()
            )));
        }
        for (name, shape) in expected {
            let p = self
                .params
                .get(name)
                .ok_or_else(|| Error::Config(format!("missing parameter block {name}")))?;
            if p.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    op: "branch parameter",
                    left: shape,
                    right: p.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// The same learned parameters over a different name vocabulary. Only
    /// branches whose parameters are not tied to names can be rebound.
    pub fn rebind(&self, names: Vec<String>, anchors: Option<Tensor>) -> Result<Self> {
        let tied = match self.config.kind {
            BranchKind::Pl => self.config.csc,
            BranchKind::Lv => true,
            BranchKind::W2v => false,
        };
        if tied {
            return Err(Error::Protocol(
                "branch parameters are per name and cannot describe unseen names".into(),
            ));
        }
        if self.anchors.is_some() != anchors.is_some() {
            return Err(Error::Protocol("rebinding must keep anchored tokens consistent".into()));
        }
        Self::from_parts(
            self.config.clone(),
            names,
            self.feature_dim,
            anchors,
            self.frozen_seed,
            self.params.clone(),
        )
    }

    pub fn kind(&self) -> BranchKind {
        self.config.kind
    }

    pub fn n_names(&self) -> usize {
        self.names.len()
    }

    /// Total number of learnable scalars (the `K` of the KL term).
    pub fn n_params(&self) -> usize {
        self.params.values().map(VariationalParam::numel).sum()
    }

    /// Posterior means concatenated in parameter-name order.
    pub fn flat_means(&self) -> Vec<f64> {
        self.params.values().flat_map(|p| p.mu.data().iter().copied()).collect()
    }

    /// The frozen PL mixer, if any: `[(M+1)·token_dim, feature_dim]`.
    pub fn mixer(&self) -> Option<&Tensor> {
        match &self.frozen {
            Frozen::Pl { mixer, .. } => Some(mixer),
            _ => None,
        }
    }

    /// SHA-256 over every frozen array.
    pub fn frozen_fingerprint(&self) -> String {
        let mut h = Sha256::new();
        let mut feed = |t: &Tensor| {
            for x in t.data() {
                h.update(x.to_le_bytes());
            }
        };
        match &self.frozen {
            Frozen::Pl { mixer, tokens } => {
                feed(mixer);
                feed(tokens);
            }
            Frozen::Lv => {}
            Frozen::W2v { embeddings } => feed(embeddings),
        }
        hex::encode(h.finalize())
    }

    /// Text features for the names `idx`, one row each, from parameter
    /// values `sampled` (keyed like `params`). Rows are not normalized.
    pub fn text_features<'t>(
        &self,
        tape: &'t Tape,
        idx: &[usize],
        sampled: &BTreeMap<String, Var<'t>>,
    ) -> Result<Var<'t>> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.names.len()) {
            return Err(Error::Vocabulary {
                index: bad,
                size: self.names.len(),
            });
        }
        let get = |name: &str| {
            sampled
                .get(name)
                .copied()
                .ok_or_else(|| Error::Contract(format!("no sampled value for parameter block {name}")))
        };
        let k = idx.len();
        match &self.frozen {
            Frozen::Pl { mixer, tokens } => {
                let c = &self.config;
                let width = c.n_ctx * c.token_dim;
                let ctx = get("ctx")?;
                let ctx_rows = if c.csc {
                    ctx.index_rows(idx)?
                } else {
                    ctx.reshape(&[1, width])?.expand(&[k, width])?
                };
                let cls = tape.constant(select_rows(tokens, idx)?);
                let input = match c.ctp {
                    ClassTokenPosition::End => tape.concat(&[ctx_rows, cls], 1)?,
                    ClassTokenPosition::Middle => {
                        let h = c.n_ctx / 2;
                        let mut parts = Vec::with_capacity(3);
                        if h > 0 {
                            parts.push(ctx_rows.slice(1, 0, h * c.token_dim)?);
                        }
                        parts.push(cls);
                        parts.push(ctx_rows.slice(1, h * c.token_dim, (c.n_ctx - h) * c.token_dim)?);
                        tape.concat(&parts, 1)?
                    }
                };
                input.matmul(tape.constant_shared(Rc::clone(mixer)))
            }
            Frozen::Lv => get("table")?.index_rows(idx),
            Frozen::W2v { embeddings } => {
                let emb = tape.constant(select_rows(embeddings, idx)?);
                let hidden = emb.matmul(get("w1")?)?.add(get("b1")?)?.softplus()?;
                hidden.matmul(get("w2")?)?.add(get("b2")?)
            }
        }
    }
}

fn select_rows(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let c = t.cols();
    let mut data = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        data.extend_from_slice(t.row(i));
    }
    Tensor::new(vec![idx.len(), c], data)
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// A fixed standard-normal vector per name, seeded by the name itself so a
/// name keeps its vector in any vocabulary.
fn per_name(names: &[String], seed: u64, dim: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(names.len() * dim);
    for name in names {
        let digest = Sha256::digest(name.as_bytes());
        let mut key = [0u8; 8];
        key.copy_from_slice(&digest[..8]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ u64::from_le_bytes(key));
        data.extend(gaussian(&mut rng, dim, 1.0));
    }
    Tensor::new(vec![names.len(), dim], data)
}

fn build_frozen(
    config: &BranchConfig,
    names: &[String],
    feature_dim: usize,
    anchors: Option<&Tensor>,
    seed: u64,
) -> Result<Frozen> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(match config.kind {
        BranchKind::Lv => Frozen::Lv,
        BranchKind::W2v => Frozen::W2v {
            embeddings: per_name(names, seed, config.w2v_dim)?,
        },
        BranchKind::Pl => {
            let (t, d, blocks) = (config.token_dim, feature_dim, config.n_ctx + 1);
            let std = 1.0 / ((blocks * t) as f64).sqrt();
            // Every position block is a shared map plus a small
            // position-specific perturbation.
            let shared = gaussian(&mut rng, t * d, std);
            let mut mixer = Vec::with_capacity(blocks * t * d);
            for _ in 0..blocks {
                let jitter = gaussian(&mut rng, t * d, std * config.mixer_jitter);
                mixer.extend(shared.iter().zip(&jitter).map(|(a, b)| a + b));
            }
            let tokens = match anchors {
                Some(a) => aligned_tokens(&shared, t, d, a)?,
                None => per_name(names, seed, t)?,
            };
            Frozen::Pl {
                mixer: Rc::new(Tensor::new(vec![blocks * t, d], mixer)?),
                tokens,
            }
        }
    })
}

/// Minimum-norm tokens `e` with `e · shared = anchor` for each anchor row,
/// so the frozen mixer carries each name to its anchor direction.
fn aligned_tokens(shared: &[f64], t: usize, d: usize, anchors: &Tensor) -> Result<Tensor> {
    if t < d {
        return Err(Error::Config(format!(
            "anchored prompts need token_dim {t} >= feature_dim {d}"
        )));
    }
    let a = DMatrix::from_row_slice(t, d, shared);
    let gram = a.transpose() * &a;
    let inv = gram
        .try_inverse()
        .ok_or_else(|| Error::Numeric("text mixer is rank deficient".into()))?;
    let proj = &inv * a.transpose(); // d × t
    let n = anchors.rows();
    let mut data = Vec::with_capacity(n * t);
    for r in 0..n {
        let row = nalgebra::RowDVector::from_row_slice(anchors.row(r));
        let e = row * &proj;
        data.extend(e.iter().copied());
    }
    Tensor::new(vec![n, t], data)
}
