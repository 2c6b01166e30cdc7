use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::data::RawSample;
use crate::diff::Tensor;
use crate::error::{Error, Result};

/// Stand-in for a pretrained image tower: a fixed random rotation of the
/// latent `[category | environment | noise]` vector. Never trained.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenImageEncoder {
    feature_dim: usize,
    seed: u64,
    mixing: Tensor,
}

impl FrozenImageEncoder {
    /// Orthogonal mixing matrix from the QR factorization of a seeded
    /// Gaussian matrix.
    pub fn new(feature_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = DMatrix::<f64>::from_fn(feature_dim, feature_dim, |_, _| rng.sample(StandardNormal));
        let qr = g.qr();
        let (q, r) = (qr.q(), qr.r());
        let mut data = Vec::with_capacity(feature_dim * feature_dim);
        for i in 0..feature_dim {
            for j in 0..feature_dim {
                // Fix column signs so the factorization is unique.
                let s = if r[(j, j)] < 0.0 { -1.0 } else { 1.0 };
                data.push(q[(i, j)] * s);
            }
        }
        Self {
            feature_dim,
            seed,
            mixing: Tensor::new(vec![feature_dim, feature_dim], data).expect("square"),
        }
    }

    pub fn with_mixing(mixing: Tensor, seed: u64) -> Result<Self> {
        if mixing.rank() != 2 || mixing.shape()[0] != mixing.shape()[1] {
            return Err(Error::Shape {
                op: "encoder",
                left: mixing.shape().to_vec(),
                right: vec![],
            });
        }
        Ok(Self {
            feature_dim: mixing.shape()[0],
            seed,
            mixing,
        })
    }

    pub fn identity(feature_dim: usize) -> Self {
        let mut m = Tensor::zeros(&[feature_dim, feature_dim]);
        for i in 0..feature_dim {
            m.data_mut()[i * feature_dim + i] = 1.0;
        }
        Self {
            feature_dim,
            seed: 0,
            mixing: m,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn mixing(&self) -> &Tensor {
        &self.mixing
    }

    /// `mixing · latent`.
    pub fn encode_latent(&self, latent: &[f64]) -> Result<Vec<f64>> {
        if latent.len() != self.feature_dim {
            return Err(Error::Shape {
                op: "image_encode",
                left: vec![self.feature_dim],
                right: vec![latent.len()],
            });
        }
        Ok((0..self.feature_dim)
            .map(|i| self.mixing.row(i).iter().zip(latent).map(|(m, x)| m * x).sum())
            .collect())
    }

    pub fn image_encode(&self, raw: &RawSample) -> Result<Vec<f64>> {
        self.encode_latent(&raw.latent())
    }

    /// Encodes samples into an `N × feature_dim` matrix.
    pub fn encode_batch(&self, samples: &[&RawSample]) -> Result<Tensor> {
        let rows = samples.iter().map(|s| self.image_encode(s)).collect::<Result<Vec<_>>>()?;
        if rows.is_empty() {
            return Tensor::new(vec![0, self.feature_dim], vec![]);
        }
        Tensor::from_rows(&rows)
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for x in self.mixing.data() {
            h.update(x.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}
