use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Dataset, DatasetSpec, EnvRole, RawSample, ShiftMode, Split};
use crate::error::{Error, Result};

/// Dispatches on `spec.mode`.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    match spec.mode {
        ShiftMode::Correlation => generate_correlation_shift(spec),
        ShiftMode::Diversity => generate_diversity_shift(spec),
    }
}

fn split_of(role: EnvRole) -> Split {
    match role {
        EnvRole::Train => Split::Train,
        EnvRole::Test => Split::Test,
        EnvRole::OodVal => Split::Val,
    }
}

fn noisy(base: &[f64], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    base.iter().map(|b| b + sigma * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn one_hot(n: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[k] = 1.0;
    v
}

/// Uniformly picks an index in `0..n` other than `k`.
fn other(n: usize, k: usize, rng: &mut ChaCha8Rng) -> usize {
    if n < 2 {
        return k;
    }
    let j = rng.gen_range(0..n - 1);
    if j >= k {
        j + 1
    } else {
        j
    }
}

fn dataset_from(spec: &DatasetSpec, samples: Vec<RawSample>) -> Dataset {
    Dataset {
        class_names: spec.class_names(),
        env_names: spec.env_names(),
        domain_names: spec.envs.iter().map(|e| e.name.clone()).collect(),
        samples,
    }
}

/// Label-conditioned generation: each (environment, label) cell receives
/// exactly its sample count. The shape class disagrees with the label with
/// probability `label_noise`; the color agrees with the label with
/// probability `corr` of the environment.
pub fn generate_correlation_shift(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    if let Some(e) = spec.envs.iter().find(|e| e.corr.is_none()) {
        return Err(Error::Config(format!("environment {} has no correlation strength", e.name)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n_classes;
    let mut samples = Vec::new();
    for (d, env) in spec.envs.iter().enumerate() {
        let rho = env.corr.expect("checked above");
        let count = env.samples_per_class.unwrap_or(spec.samples_per_class_per_env);
        for label in 0..n {
            for _ in 0..count {
                let shape = if rng.gen_bool(spec.label_noise) { other(n, label, &mut rng) } else { label };
                let color = if rng.gen_bool(rho) { label } else { other(n, label, &mut rng) };
                samples.push(RawSample {
                    category_signal: noisy(&one_hot(n, shape), spec.noise_sigma, &mut rng),
                    environment_signal: noisy(&one_hot(n, color), spec.noise_sigma, &mut rng),
                    noise: noisy(&vec![0.0; spec.noise_dim()], spec.noise_sigma, &mut rng),
                    y_cat: label,
                    y_env: color,
                    domain: d,
                    split: split_of(env.role),
                });
            }
        }
    }
    Ok(dataset_from(spec, samples))
}

/// Category signal independent of environment; the environment signal is
/// the environment's style offset plus noise.
pub fn generate_diversity_shift(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut offsets: Vec<&Vec<f64>> = Vec::new();
    for env in &spec.envs {
        let o = env
            .style_offset
            .as_ref()
            .ok_or_else(|| Error::Config(format!("environment {} has no style offset", env.name)))?;
        if o.len() != spec.style_dim {
            return Err(Error::Config(format!(
                "style offset of {} has length {}, expected {}",
                env.name,
                o.len(),
                spec.style_dim
            )));
        }
        if offsets.iter().any(|p| *p == o) {
            return Err(Error::Config(format!("duplicate style offset for {}", env.name)));
        }
        offsets.push(o);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n_classes;
    let mut samples = Vec::new();
    for (d, env) in spec.envs.iter().enumerate() {
        let count = env.samples_per_class.unwrap_or(spec.samples_per_class_per_env);
        for label in 0..n {
            for _ in 0..count {
                let shape = if rng.gen_bool(spec.label_noise) { other(n, label, &mut rng) } else { label };
                samples.push(RawSample {
                    category_signal: noisy(&one_hot(n, shape), spec.noise_sigma, &mut rng),
                    environment_signal: noisy(offsets[d], spec.noise_sigma, &mut rng),
                    noise: noisy(&vec![0.0; spec.noise_dim()], spec.noise_sigma, &mut rng),
                    y_cat: label,
                    y_env: d,
                    domain: d,
                    split: split_of(env.role),
                });
            }
        }
    }
    Ok(dataset_from(spec, samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::EnvSpec;

    #[test]
    fn perfect_correlation_colors_every_sample_by_label() {
        let mut spec = DatasetSpec::colored_benchmark(1);
        spec.label_noise = 0.0;
        for e in &mut spec.envs {
            e.corr = Some(1.0);
        }
        let ds = generate(&spec).unwrap();
        assert!(ds.samples.iter().all(|s| s.y_env == s.y_cat));
    }

    #[test]
    fn half_correlation_is_within_binomial_bound() {
        let mut spec = DatasetSpec::colored_benchmark(9);
        for e in &mut spec.envs {
            e.corr = Some(0.5);
            e.samples_per_class = Some(2000);
        }
        let ds = generate(&spec).unwrap();
        let n = ds.len() as f64;
        let agree = ds.samples.iter().filter(|s| s.y_env == s.y_cat).count() as f64 / n;
        assert!((agree - 0.5).abs() <= 3.0 / n.sqrt(), "{agree}");
    }

    #[test]
    fn cell_counts_are_exact() {
        let spec = DatasetSpec::colored_benchmark(2);
        let ds = generate(&spec).unwrap();
        for (d, env) in spec.envs.iter().enumerate() {
            let want = env.samples_per_class.unwrap_or(spec.samples_per_class_per_env);
            for c in 0..spec.n_classes {
                let got = ds.samples.iter().filter(|s| s.domain == d && s.y_cat == c).count();
                assert_eq!(got, want);
            }
        }
    }

    #[test]
    fn missing_correlation_is_a_config_error() {
        let mut spec = DatasetSpec::colored_benchmark(2);
        spec.envs[1].corr = None;
        assert!(matches!(generate(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn single_training_environment_rejected() {
        let mut spec = DatasetSpec::colored_benchmark(2);
        spec.envs.remove(0);
        assert!(matches!(generate(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn noiseless_styles_share_environment_signal() {
        let mut spec = DatasetSpec::diversity_benchmark(3, 2, 4);
        spec.noise_sigma = 0.0;
        let ds = generate(&spec).unwrap();
        for d in 0..spec.envs.len() {
            let mut sigs = ds.samples.iter().filter(|s| s.domain == d).map(|s| &s.environment_signal);
            let first = sigs.next().unwrap();
            assert!(sigs.all(|s| s == first));
        }
    }

    #[test]
    fn duplicate_style_offsets_rejected() {
        let mut spec = DatasetSpec::diversity_benchmark(3, 2, 4);
        let dup = spec.envs[0].style_offset.clone();
        spec.envs[1] = EnvSpec {
            style_offset: dup,
            ..spec.envs[1].clone()
        };
        assert!(matches!(generate(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn generation_is_pure() {
        let spec = DatasetSpec::diversity_benchmark(3, 2, 4);
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
    }
}
