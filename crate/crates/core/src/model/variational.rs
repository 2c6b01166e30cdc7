//! Mean-field Gaussian posteriors over one parameter block.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diff::{softplus_f64, Tensor, Var};
use crate::error::{Error, Result};

/// Which closed form of the Gaussian KL to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlMode {
    /// `Σ log(σ₁/σ₂) + ½(σ₂² + (μ₂−μ₁)²)/σ₁²`, without the `−½` per coordinate.
    #[default]
    Paper,
    /// The true KL divergence: the `Paper` form minus `K/2`.
    Exact,
}

/// Posterior `N(mu, softplus(rho)²)` per coordinate, with its prior
/// `N(prior_mu, prior_sigma²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalParam {
    pub mu: Tensor,
    pub rho: Tensor,
    pub prior_mu: Tensor,
    pub prior_sigma: Tensor,
}

/// Inverse of softplus, for initializing `rho` from a target `σ`.
pub fn softplus_inv(sigma: f64) -> f64 {
    if sigma > 30.0 {
        sigma
    } else {
        sigma.exp_m1().ln()
    }
}

impl VariationalParam {
    pub fn new(mu: Tensor, rho: Tensor, prior_mu: Tensor, prior_sigma: Tensor) -> Result<Self> {
        for (name, t) in [("rho", &rho), ("prior_mu", &prior_mu), ("prior_sigma", &prior_sigma)] {
            if t.shape() != mu.shape() {
                return Err(Error::Shape {
                    op: name,
                    left: mu.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
        }
        if prior_sigma.data().iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("prior sigma must be positive".into()));
        }
        Ok(Self {
            mu,
            rho,
            prior_mu,
            prior_sigma,
        })
    }

    /// Means drawn from `N(0, init_std²)`, posterior spread `init_sigma`,
    /// isotropic prior `N(prior_mu, prior_sigma²)`.
    pub fn init(
        shape: &[usize],
        init_std: f64,
        init_sigma: f64,
        prior_mu: f64,
        prior_sigma: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let n: usize = shape.iter().product();
        let mu = (0..n)
            .map(|_| init_std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self::new(
            Tensor::new(shape.to_vec(), mu)?,
            Tensor::full(shape, softplus_inv(init_sigma)),
            Tensor::full(shape, prior_mu),
            Tensor::full(shape, prior_sigma),
        )
    }

    pub fn shape(&self) -> &[usize] {
        self.mu.shape()
    }

    pub fn numel(&self) -> usize {
        self.mu.numel()
    }

    /// Posterior standard deviation `softplus(rho)`.
    pub fn sigma(&self) -> Tensor {
        self.rho.map(softplus_f64)
    }

    /// Closed-form KL to the prior as a plain number.
    pub fn kl_divergence(&self, mode: KlMode) -> f64 {
        let sigma = self.sigma();
        let mut total = 0.0;
        for i in 0..self.numel() {
            let (s1, m1) = (self.prior_sigma.data()[i], self.prior_mu.data()[i]);
            let (s2, m2) = (sigma.data()[i], self.mu.data()[i]);
            total += (s1 / s2).ln() + 0.5 * (s2 * s2 + (m2 - m1).powi(2)) / (s1 * s1);
        }
        match mode {
            KlMode::Paper => total,
            KlMode::Exact => total - 0.5 * self.numel() as f64,
        }
    }

    /// Fresh standard-normal noise shaped like this block.
    pub fn draw_noise(&self, rng: &mut impl Rng) -> Tensor {
        let data = (0..self.numel())
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor::new(self.shape().to_vec(), data).expect("shape matches numel")
    }
}

/// Reparameterized draw `mu + scale · softplus(rho) ⊙ noise`, differentiable
/// in `mu` and `rho`. `scale = 0` yields the posterior mean.
pub fn sample_variational<'t>(mu: Var<'t>, rho: Var<'t>, noise: &Tensor, scale: f64) -> Result<Var<'t>> {
    if noise.shape() != mu.shape().as_slice() {
        return Err(Error::Shape {
            op: "sample_variational",
            left: mu.shape(),
            right: noise.shape().to_vec(),
        });
    }
    if scale == 0.0 {
        return Ok(mu);
    }
    let eps = mu.tape().constant(noise.clone());
    mu.add(rho.softplus()?.mul(eps)?.scale(scale)?)
}

/// KL of the posterior `(mu, rho)` to `param`'s prior, on the tape.
pub fn kl_divergence_var<'t>(mu: Var<'t>, rho: Var<'t>, param: &VariationalParam, mode: KlMode) -> Result<Var<'t>> {
    let tape = mu.tape();
    let prior_mu = tape.constant(param.prior_mu.clone());
    let prior_var = tape.constant(param.prior_sigma.map(|s| s * s));
    let log_prior_sigma: f64 = param.prior_sigma.data().iter().map(|s| s.ln()).sum();

    let sigma = rho.softplus()?;
    let quad = sigma.square()?.add(mu.sub(prior_mu)?.square()?)?.div(prior_var)?.scale(0.5)?;
    let total = quad.sub(sigma.log()?)?.sum()?.add_scalar(log_prior_sigma)?;
    match mode {
        KlMode::Paper => Ok(total),
        KlMode::Exact => total.add_scalar(-0.5 * param.numel() as f64),
    }
}
