use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Split};
use crate::error::{Error, Result};

/// Disjoint few-shot training and validation indices drawn from the
/// training environments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShot {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// `k` shots per class, spread over training domains as evenly as possible.
/// When `k` is not divisible by the number of domains, the remainder goes
/// one extra shot each to the lowest-indexed domains.
pub fn sample_few_shot(dataset: &Dataset, k: usize, seed: u64) -> Result<FewShot> {
    sample_few_shot_with(dataset, k, k, seed)
}

pub fn sample_few_shot_with(dataset: &Dataset, k_train: usize, k_val: usize, seed: u64) -> Result<FewShot> {
    let domains: BTreeSet<usize> =
        dataset.samples.iter().filter(|s| s.split == Split::Train).map(|s| s.domain).collect();
    let domains: Vec<usize> = domains.into_iter().collect();
    if domains.is_empty() {
        return Err(Error::Protocol("dataset has no training samples".into()));
    }
    let share = |k: usize, pos: usize| k / domains.len() + usize::from(pos < k % domains.len());

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = FewShot {
        train: Vec::new(),
        val: Vec::new(),
    };
    for class in 0..dataset.class_names.len() {
        for (pos, &d) in domains.iter().enumerate() {
            let mut pool = dataset.indices(|s| s.split == Split::Train && s.domain == d && s.y_cat == class);
            let (nt, nv) = (share(k_train, pos), share(k_val, pos));
            if pool.len() < nt + nv {
                return Err(Error::Capacity {
                    class,
                    env: d,
                    need: nt + nv,
                    have: pool.len(),
                });
            }
            pool.shuffle(&mut rng);
            out.train.extend_from_slice(&pool[..nt]);
            out.val.extend_from_slice(&pool[nt..nt + nv]);
        }
    }
    Ok(out)
}

/// All index sets one training run needs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentSplits {
    pub train: Vec<usize>,
    /// Held out from the training domains.
    pub val_train: Vec<usize>,
    /// Drawn from the test domains and excluded from `test`.
    pub val_test: Vec<usize>,
    /// Drawn from environments that are neither training nor test.
    pub val_ood: Vec<usize>,
    pub test: Vec<usize>,
}

impl ExperimentSplits {
    pub fn build(dataset: &Dataset, k_train: usize, k_val: usize, seed: u64) -> Result<Self> {
        let fs = sample_few_shot_with(dataset, k_train, k_val, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15);
        let mut val_test = Vec::new();
        let mut test = Vec::new();
        let mut val_ood = Vec::new();
        for class in 0..dataset.class_names.len() {
            let mut pool = dataset.indices(|s| s.split == Split::Test && s.y_cat == class);
            pool.shuffle(&mut rng);
            let take = k_val.min(pool.len() / 2);
            val_test.extend_from_slice(&pool[..take]);
            test.extend_from_slice(&pool[take..]);

            let mut ood = dataset.indices(|s| s.split == Split::Val && s.y_cat == class);
            ood.shuffle(&mut rng);
            ood.truncate(k_val);
            val_ood.extend(ood);
        }
        test.sort_unstable();
        Ok(Self {
            train: fs.train,
            val_train: fs.val,
            val_test,
            val_ood,
            test,
        })
    }
}

/// Random base/new partition of `class_ids`; both halves come back sorted.
pub fn split_base_new(class_ids: &[usize], fraction_base: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if class_ids.len() < 2 {
        return Err(Error::Protocol("base/new split needs at least two classes".into()));
    }
    if !(fraction_base > 0.0 && fraction_base < 1.0) {
        return Err(Error::Config(format!("fraction_base {fraction_base} outside (0, 1)")));
    }
    let n = class_ids.len();
    let n_base = ((fraction_base * n as f64).round() as usize).clamp(1, n - 1);
    let mut ids = class_ids.to_vec();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (mut base, mut new) = (ids[..n_base].to_vec(), ids[n_base..].to_vec());
    base.sort_unstable();
    new.sort_unstable();
    Ok((base, new))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, DatasetSpec};

    fn four_domain_spec() -> DatasetSpec {
        let mut spec = DatasetSpec::diversity_benchmark(3, 4, 11);
        spec.samples_per_class_per_env = 40;
        spec
    }

    fn per_cell(ds: &Dataset, idx: &[usize], class: usize, domain: usize) -> usize {
        idx.iter().filter(|&&i| ds.samples[i].y_cat == class && ds.samples[i].domain == domain).count()
    }

    #[test]
    fn sixteen_shots_over_four_domains() {
        let ds = generate(&four_domain_spec()).unwrap();
        let fs = sample_few_shot(&ds, 16, 1).unwrap();
        for c in 0..3 {
            for d in 0..4 {
                assert_eq!(per_cell(&ds, &fs.train, c, d), 4);
                assert_eq!(per_cell(&ds, &fs.val, c, d), 4);
            }
        }
        let t: BTreeSet<_> = fs.train.iter().collect();
        assert!(fs.val.iter().all(|i| !t.contains(i)));
    }

    #[test]
    fn eight_shots_over_four_domains() {
        let ds = generate(&four_domain_spec()).unwrap();
        let fs = sample_few_shot(&ds, 8, 1).unwrap();
        for d in 0..4 {
            assert_eq!(per_cell(&ds, &fs.train, 0, d), 2);
        }
    }

    #[test]
    fn remainder_goes_to_lowest_domains() {
        let ds = generate(&four_domain_spec()).unwrap();
        let fs = sample_few_shot(&ds, 6, 1).unwrap();
        let counts: Vec<_> = (0..4).map(|d| per_cell(&ds, &fs.train, 1, d)).collect();
        assert_eq!(counts, vec![2, 2, 1, 1]);
    }

    #[test]
    fn same_seed_same_indices() {
        let ds = generate(&four_domain_spec()).unwrap();
        assert_eq!(sample_few_shot(&ds, 16, 7).unwrap(), sample_few_shot(&ds, 16, 7).unwrap());
        assert_ne!(sample_few_shot(&ds, 16, 7).unwrap(), sample_few_shot(&ds, 16, 8).unwrap());
    }

    #[test]
    fn capacity_error_names_the_cell() {
        let ds = generate(&four_domain_spec()).unwrap();
        match sample_few_shot(&ds, 100, 1) {
            Err(Error::Capacity { class, env, need, have }) => {
                assert_eq!((class, env, need, have), (0, 0, 50, 40))
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn base_new_cardinalities() {
        let (b, n) = split_base_new(&(0..7).collect::<Vec<_>>(), 5.0 / 7.0, 3).unwrap();
        assert_eq!((b.len(), n.len()), (5, 2));
        let (b, n) = split_base_new(&(0..19).collect::<Vec<_>>(), 13.0 / 19.0, 3).unwrap();
        assert_eq!((b.len(), n.len()), (13, 6));
        let mut all: Vec<_> = b.iter().chain(&n).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..19).collect::<Vec<_>>());
        assert!(split_base_new(&[0], 0.5, 1).is_err());
        assert!(split_base_new(&[0, 1], 1.0, 1).is_err());
    }
}
