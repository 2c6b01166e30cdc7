//! Synthetic two-dimensional-shift datasets.
//!
//! Each sample is emitted in a fixed latent basis laid out as
//! `[category signal | environment signal | nuisance noise]`; the frozen
//! image encoder later mixes these axes with a random rotation.

mod fewshot;
mod generate;
mod io;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use fewshot::{sample_few_shot, sample_few_shot_with, split_base_new, ExperimentSplits, FewShot};
pub use generate::{generate, generate_correlation_shift, generate_diversity_shift};
pub use io::{read_dataset, write_dataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One synthetic example before encoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSample {
    pub category_signal: Vec<f64>,
    pub environment_signal: Vec<f64>,
    pub noise: Vec<f64>,
    /// Observed category label.
    pub y_cat: usize,
    /// Environment label predicted by the environment branch. In
    /// correlation-shift data this is the spurious attribute (the color); in
    /// diversity-shift data it equals `domain`.
    pub y_env: usize,
    /// Index of the generating environment; drives environment partitions.
    pub domain: usize,
    pub split: Split,
}

impl RawSample {
    /// The latent vector `[category | environment | noise]`.
    pub fn latent(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.category_signal.len() + self.environment_signal.len() + self.noise.len());
        v.extend_from_slice(&self.category_signal);
        v.extend_from_slice(&self.environment_signal);
        v.extend_from_slice(&self.noise);
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftMode {
    Correlation,
    Diversity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvRole {
    Train,
    Test,
    /// Held-out environment used only for OoD validation.
    OodVal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: String,
    pub role: EnvRole,
    /// Probability that the color agrees with the label (correlation mode).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corr: Option<f64>,
    /// Style offset of the environment signal (diversity mode).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style_offset: Option<Vec<f64>>,
    /// Overrides `samples_per_class_per_env` for this environment.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples_per_class: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub mode: ShiftMode,
    pub n_classes: usize,
    pub envs: Vec<EnvSpec>,
    #[serde(default)]
    pub label_noise: f64,
    pub noise_sigma: f64,
    /// Total latent width; must equal the encoder's feature dimension.
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    /// Width of the style signal in diversity mode.
    #[serde(default = "default_style_dim")]
    pub style_dim: usize,
    pub samples_per_class_per_env: usize,
    pub seed: u64,
}

fn default_latent_dim() -> usize {
    32
}

fn default_style_dim() -> usize {
    4
}

impl DatasetSpec {
    /// ColoredMNIST-style correlation benchmark: two classes, two colors,
    /// label noise 0.25, training environments with color/label agreement
    /// 0.9 and 0.8, test environment 0.1.
    pub fn colored_benchmark(seed: u64) -> Self {
        let env = |name: &str, role, corr, n| EnvSpec {
            name: name.into(),
            role,
            corr: Some(corr),
            style_offset: None,
            samples_per_class: n,
        };
        Self {
            mode: ShiftMode::Correlation,
            n_classes: 2,
            envs: vec![
                env("env_0", EnvRole::Train, 0.9, None),
                env("env_1", EnvRole::Train, 0.8, None),
                env("env_2", EnvRole::Test, 0.1, Some(500)),
            ],
            label_noise: 0.25,
            noise_sigma: 0.2,
            latent_dim: 32,
            style_dim: 4,
            samples_per_class_per_env: 64,
            seed,
        }
    }

    /// Diversity-shift benchmark with `n_train` training styles, one OoD
    /// validation style and one test style, all at distinct offsets.
    pub fn diversity_benchmark(n_classes: usize, n_train: usize, seed: u64) -> Self {
        let style_dim = 4;
        let mut envs = Vec::new();
        let total = n_train + 2;
        for e in 0..total {
            let mut offset = vec![0.0; style_dim];
            offset[e % style_dim] = if (e / style_dim) % 2 == 0 { 1.0 } else { -1.0 };
            let role = if e < n_train {
                EnvRole::Train
            } else if e == n_train {
                EnvRole::OodVal
            } else {
                EnvRole::Test
            };
            envs.push(EnvSpec {
                name: format!("env_{e}"),
                role,
                corr: None,
                style_offset: Some(offset),
                samples_per_class: None,
            });
        }
        Self {
            mode: ShiftMode::Diversity,
            n_classes,
            envs,
            label_noise: 0.0,
            noise_sigma: 0.2,
            latent_dim: 32,
            style_dim,
            samples_per_class_per_env: 64,
            seed,
        }
    }

    /// Width of the environment block of the latent vector.
    pub fn env_dim(&self) -> usize {
        match self.mode {
            ShiftMode::Correlation => self.n_classes,
            ShiftMode::Diversity => self.style_dim,
        }
    }

    pub fn noise_dim(&self) -> usize {
        self.latent_dim.saturating_sub(self.n_classes + self.env_dim())
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.n_classes).map(|c| format!("class_{c}")).collect()
    }

    /// Vocabulary of the environment branch.
    pub fn env_names(&self) -> Vec<String> {
        match self.mode {
            ShiftMode::Correlation => (0..self.n_classes).map(|c| format!("color_{c}")).collect(),
            ShiftMode::Diversity => self.envs.iter().map(|e| e.name.clone()).collect(),
        }
    }

    pub fn train_envs(&self) -> Vec<usize> {
        self.envs_with(EnvRole::Train)
    }

    pub fn envs_with(&self, role: EnvRole) -> Vec<usize> {
        self.envs.iter().enumerate().filter(|(_, e)| e.role == role).map(|(i, _)| i).collect()
    }

    /// Noise-free latent vector of each category name.
    pub fn category_prototypes(&self) -> Vec<Vec<f64>> {
        (0..self.n_classes)
            .map(|c| {
                let mut v = vec![0.0; self.latent_dim];
                v[c] = 1.0;
                v
            })
            .collect()
    }

    /// Noise-free latent vector of each environment-branch name.
    pub fn environment_prototypes(&self) -> Vec<Vec<f64>> {
        let base = self.n_classes;
        match self.mode {
            ShiftMode::Correlation => (0..self.n_classes)
                .map(|c| {
                    let mut v = vec![0.0; self.latent_dim];
                    v[base + c] = 1.0;
                    v
                })
                .collect(),
            ShiftMode::Diversity => self
                .envs
                .iter()
                .map(|e| {
                    let mut v = vec![0.0; self.latent_dim];
                    for (k, x) in e.style_offset.iter().flatten().enumerate() {
                        v[base + k] = *x;
                    }
                    v
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 1 {
            return Err(Error::Config("n_classes must be positive".into()));
        }
        if self.train_envs().len() < 2 {
            return Err(Error::Config("at least two training environments are required".into()));
        }
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !prob(self.label_noise) {
            return Err(Error::Config(format!("label_noise {} outside [0, 1]", self.label_noise)));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be non-negative".into()));
        }
        if self.n_classes + self.env_dim() > self.latent_dim {
            return Err(Error::Config(format!(
                "latent_dim {} too small for {} category + {} environment dims",
                self.latent_dim,
                self.n_classes,
                self.env_dim()
            )));
        }
        for e in &self.envs {
            if let Some(p) = e.corr {
                if !prob(p) {
                    return Err(Error::Config(format!("corr {p} of {} outside [0, 1]", e.name)));
                }
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON encoding.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// An immutable collection of samples with its name vocabularies.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub env_names: Vec<String>,
    pub domain_names: Vec<String>,
    pub samples: Vec<RawSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Vec<&RawSample> {
        idx.iter().map(|&i| &self.samples[i]).collect()
    }

    /// Indices of samples matching `pred`, in dataset order.
    pub fn indices(&self, pred: impl Fn(&RawSample) -> bool) -> Vec<usize> {
        self.samples.iter().enumerate().filter(|(_, s)| pred(s)).map(|(i, _)| i).collect()
    }
}
