//! The frozen image tower, the two variational text branches and the
//! cosine alignment between them.

mod align;
mod batch;
mod branch;
mod encoder;
mod variational;

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::DatasetSpec;
use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub use align::{alignment_logits, normalize_rows, COSINE_EPS};
pub use batch::LabeledBatch;
pub use branch::{BranchConfig, BranchKind, ClassTokenPosition, TextBranch};
pub use encoder::FrozenImageEncoder;
pub use variational::{kl_divergence_var, sample_variational, softplus_inv, KlMode, VariationalParam};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchId {
    Category,
    Environment,
}

/// How category probabilities are formed at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule", content = "samples")]
pub enum InferenceRule {
    /// Softmax of the logits at the posterior means.
    #[default]
    PosteriorMean,
    /// Softmax averaged over this many posterior draws.
    MonteCarlo(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub feature_dim: usize,
    /// Seed of every frozen component; shared by all runs that use the same
    /// "pretrained" model.
    pub frozen_seed: u64,
    pub category: BranchConfig,
    pub environment: BranchConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            frozen_seed: 0,
            category: BranchConfig::default(),
            environment: BranchConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn encoder(&self) -> FrozenImageEncoder {
        FrozenImageEncoder::new(self.feature_dim, self.frozen_seed)
    }
}

/// Names of one branch and, optionally, the feature-space direction each
/// name's frozen token points to.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    pub names: Vec<String>,
    pub anchors: Option<Tensor>,
}

impl Vocabulary {
    pub fn plain(names: Vec<String>) -> Self {
        Self { names, anchors: None }
    }

    /// Category names of `spec` (restricted to `classes` when given),
    /// anchored at their encoded noise-free prototypes.
    pub fn categories(spec: &DatasetSpec, encoder: &FrozenImageEncoder, classes: Option<&[usize]>) -> Result<Self> {
        let all: Vec<usize> = (0..spec.n_classes).collect();
        let ids = classes.unwrap_or(&all);
        let names = spec.class_names();
        let protos = spec.category_prototypes();
        let mut rows = Vec::with_capacity(ids.len());
        let mut picked = Vec::with_capacity(ids.len());
        for &c in ids {
            let name = names.get(c).ok_or(Error::Vocabulary {
                index: c,
                size: names.len(),
            })?;
            picked.push(name.clone());
            rows.push(encoder.encode_latent(&protos[c])?);
        }
        Ok(Self {
            names: picked,
            anchors: Some(Tensor::from_rows(&rows)?),
        })
    }

    pub fn environments(spec: &DatasetSpec, encoder: &FrozenImageEncoder) -> Result<Self> {
        let rows = spec
            .environment_prototypes()
            .iter()
            .map(|p| encoder.encode_latent(p))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            names: spec.env_names(),
            anchors: Some(Tensor::from_rows(&rows)?),
        })
    }
}

/// Standard-normal noise for every block of both branches.
#[derive(Debug, Clone, PartialEq)]
pub struct Noise {
    pub category: BTreeMap<String, Tensor>,
    pub environment: BTreeMap<String, Tensor>,
}

/// One block's `(mu, rho)` leaves on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundBlock<'t> {
    pub mu: Var<'t>,
    pub rho: Var<'t>,
}

/// All variational parameters as differentiable leaves.
#[derive(Debug, Clone)]
pub struct BoundParams<'t> {
    pub category: BTreeMap<String, BoundBlock<'t>>,
    pub environment: BTreeMap<String, BoundBlock<'t>>,
}

impl<'t> BoundParams<'t> {
    /// Every leaf in a fixed order: category before environment, blocks by
    /// name, `mu` before `rho`.
    pub fn leaves(&self) -> Vec<(BranchId, String, Var<'t>, Var<'t>)> {
        let mut out = Vec::new();
        for (id, map) in [(BranchId::Category, &self.category), (BranchId::Environment, &self.environment)] {
            for (name, b) in map {
                out.push((id, name.clone(), b.mu, b.rho));
            }
        }
        out
    }
}

/// Parameter values drawn for one forward pass.
#[derive(Debug, Clone)]
pub struct Sampled<'t> {
    pub category: BTreeMap<String, Var<'t>>,
    pub environment: BTreeMap<String, Var<'t>>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: FrozenImageEncoder,
    pub category: TextBranch,
    pub environment: TextBranch,
}

impl Model {
    pub fn new(config: ModelConfig, categories: Vocabulary, environments: Vocabulary, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.feature_dim;
        let category = TextBranch::new(
            config.category.clone(),
            categories.names,
            d,
            categories.anchors,
            config.frozen_seed.wrapping_add(1),
            &mut rng,
        )?;
        let environment = TextBranch::new(
            config.environment.clone(),
            environments.names,
            d,
            environments.anchors,
            config.frozen_seed.wrapping_add(2),
            &mut rng,
        )?;
        Ok(Self {
            encoder: config.encoder(),
            config,
            category,
            environment,
        })
    }

    /// Model for `spec` with anchored vocabularies, optionally restricted to
    /// a subset of categories.
    pub fn for_dataset(config: ModelConfig, spec: &DatasetSpec, classes: Option<&[usize]>, seed: u64) -> Result<Self> {
        if spec.latent_dim != config.feature_dim {
            return Err(Error::Config(format!(
                "dataset latent_dim {} differs from model feature_dim {}",
                spec.latent_dim, config.feature_dim
            )));
        }
        let encoder = config.encoder();
        let cats = Vocabulary::categories(spec, &encoder, classes)?;
        let envs = Vocabulary::environments(spec, &encoder)?;
        Self::new(config, cats, envs, seed)
    }

    pub fn branch(&self, id: BranchId) -> &TextBranch {
        match id {
            BranchId::Category => &self.category,
            BranchId::Environment => &self.environment,
        }
    }

    pub fn branch_mut(&mut self, id: BranchId) -> &mut TextBranch {
        match id {
            BranchId::Category => &mut self.category,
            BranchId::Environment => &mut self.environment,
        }
    }

    /// Same parameters, different category vocabulary.
    pub fn with_categories(&self, categories: Vocabulary) -> Result<Self> {
        Ok(Self {
            category: self.category.rebind(categories.names, categories.anchors)?,
            ..self.clone()
        })
    }

    pub fn n_params(&self) -> usize {
        self.category.n_params() + self.environment.n_params()
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundParams<'t> {
        let bind = |b: &TextBranch| {
            b.params
                .iter()
                .map(|(k, p)| {
                    let block = BoundBlock {
                        mu: tape.leaf(p.mu.clone()),
                        rho: tape.leaf(p.rho.clone()),
                    };
                    (k.clone(), block)
                })
                .collect()
        };
        BoundParams {
            category: bind(&self.category),
            environment: bind(&self.environment),
        }
    }

    /// Every `mu` and `rho` in [`BoundParams::leaves`] order, flattened.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 * self.n_params());
        for b in [&self.category, &self.environment] {
            for p in b.params.values() {
                v.extend_from_slice(p.mu.data());
                v.extend_from_slice(p.rho.data());
            }
        }
        v
    }

    /// Binds slices of one flat vector `x` (laid out as by
    /// [`Model::flat_params`]) in place of separate leaves.
    pub fn bind_flat<'t>(&self, x: Var<'t>) -> Result<BoundParams<'t>> {
        if x.shape() != [2 * self.n_params()] {
            return Err(Error::Shape {
                op: "bind_flat",
                left: vec![2 * self.n_params()],
                right: x.shape(),
            });
        }
        let mut pos = 0;
        let mut take = |shape: &[usize]| -> Result<Var<'t>> {
            let n: usize = shape.iter().product();
            let v = x.slice(0, pos, n)?.reshape(shape)?;
            pos += n;
            Ok(v)
        };
        let mut bind = |b: &TextBranch| -> Result<BTreeMap<String, BoundBlock<'t>>> {
            let mut m = BTreeMap::new();
            for (k, p) in &b.params {
                let mu = take(p.shape())?;
                let rho = take(p.shape())?;
                m.insert(k.clone(), BoundBlock { mu, rho });
            }
            Ok(m)
        };
        let category = bind(&self.category)?;
        let environment = bind(&self.environment)?;
        Ok(BoundParams { category, environment })
    }

    pub fn draw_noise(&self, rng: &mut impl Rng) -> Noise {
        let draw = |b: &TextBranch, rng: &mut _| b.params.iter().map(|(k, p)| (k.clone(), p.draw_noise(rng))).collect();
        let category = draw(&self.category, rng);
        let environment = draw(&self.environment, rng);
        Noise { category, environment }
    }

    /// Reparameterized draws from `noise`, or the posterior means when
    /// `noise` is `None`.
    pub fn sample<'t>(&self, bound: &BoundParams<'t>, noise: Option<&Noise>) -> Result<Sampled<'t>> {
        let draw = |blocks: &BTreeMap<String, BoundBlock<'t>>, noise: Option<&BTreeMap<String, Tensor>>| {
            blocks
                .iter()
                .map(|(k, b)| {
                    let v = match noise {
                        None => b.mu,
                        Some(n) => {
                            let eps = n
                                .get(k)
                                .ok_or_else(|| Error::Contract(format!("no noise for parameter block {k}")))?;
                            sample_variational(b.mu, b.rho, eps, 1.0)?
                        }
                    };
                    Ok((k.clone(), v))
                })
                .collect::<Result<BTreeMap<_, _>>>()
        };
        Ok(Sampled {
            category: draw(&bound.category, noise.map(|n| &n.category))?,
            environment: draw(&bound.environment, noise.map(|n| &n.environment))?,
        })
    }

    /// KL of each branch's posterior to its prior.
    pub fn kl<'t>(&self, tape: &'t Tape, bound: &BoundParams<'t>, mode: KlMode) -> Result<(Var<'t>, Var<'t>)> {
        let kl = |b: &TextBranch, blocks: &BTreeMap<String, BoundBlock<'t>>| {
            let mut total = tape.scalar(0.0);
            for (k, p) in &b.params {
                let blk = blocks[k];
                total = total.add(kl_divergence_var(blk.mu, blk.rho, p, mode)?)?;
            }
            Ok::<_, Error>(total)
        };
        Ok((kl(&self.category, &bound.category)?, kl(&self.environment, &bound.environment)?))
    }

    /// Category probabilities for each feature row.
    pub fn predict_proba(&self, features: &Tensor, temperature: f64, rule: InferenceRule, seed: u64) -> Result<Tensor> {
        let all: Vec<usize> = (0..self.category.n_names()).collect();
        let run = |noise: Option<&Noise>| -> Result<Tensor> {
            let tape = Tape::new();
            let bound = self.bind(&tape);
            let s = self.sample(&bound, noise)?;
            let text = self.category.text_features(&tape, &all, &s.category)?;
            let image = tape.constant(features.clone());
            Ok(alignment_logits(image, text, temperature)?.0.softmax()?.eval())
        };
        match rule {
            InferenceRule::PosteriorMean => run(None),
            InferenceRule::MonteCarlo(0) => Err(Error::Config("Monte Carlo inference needs at least one sample".into())),
            InferenceRule::MonteCarlo(s) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut acc = run(Some(&self.draw_noise(&mut rng)))?;
                for _ in 1..s {
                    let p = run(Some(&self.draw_noise(&mut rng)))?;
                    acc = acc.zip_map(&p, "mc_average", |a, b| a + b)?;
                }
                Ok(acc.map(|x| x / s as f64))
            }
        }
    }

    /// Posterior means of both branches, category first.
    pub fn flat_means(&self) -> Vec<f64> {
        let mut v = self.category.flat_means();
        v.extend(self.environment.flat_means());
        v
    }

    /// Inverse of [`Model::flat_means`].
    pub fn set_flat_means(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::Shape {
                op: "set_flat_means",
                left: vec![self.n_params()],
                right: vec![flat.len()],
            });
        }
        let mut pos = 0;
        for id in [BranchId::Category, BranchId::Environment] {
            for p in self.branch_mut(id).params.values_mut() {
                let n = p.numel();
                p.mu.data_mut().copy_from_slice(&flat[pos..pos + n]);
                pos += n;
            }
        }
        Ok(())
    }

    /// SHA-256 over all frozen arrays.
    pub fn frozen_fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.encoder.fingerprint());
        h.update(self.category.frozen_fingerprint());
        h.update(self.environment.frozen_fingerprint());
        hex::encode(h.finalize())
    }

    pub fn to_checkpoint(&self) -> ModelCheckpoint {
        let state = |b: &TextBranch| BranchState {
            names: b.names.clone(),
            frozen_seed: b.frozen_seed,
            anchors: b.anchors.clone(),
            params: b.params.clone(),
        };
        ModelCheckpoint {
            config: self.config.clone(),
            category: state(&self.category),
            environment: state(&self.environment),
        }
    }

    pub fn from_checkpoint(ck: ModelCheckpoint) -> Result<Self> {
        let d = ck.config.feature_dim;
        let build = |cfg: &BranchConfig, s: BranchState| {
            TextBranch::from_parts(cfg.clone(), s.names, d, s.anchors, s.frozen_seed, s.params)
        };
        Ok(Self {
            encoder: ck.config.encoder(),
            category: build(&ck.config.category, ck.category)?,
            environment: build(&ck.config.environment, ck.environment)?,
            config: ck.config,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, &self.to_checkpoint())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::from_checkpoint(serde_json::from_reader(f)?)
    }
}

/// Learned state of one branch. Frozen arrays are not stored; they are
/// regenerated from `frozen_seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchState {
    pub names: Vec<String>,
    pub frozen_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchors: Option<Tensor>,
    pub params: BTreeMap<String, VariationalParam>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    pub category: BranchState,
    pub environment: BranchState,
}
