use std::collections::BTreeMap;

use super::FrozenImageEncoder;
use crate::data::RawSample;
use crate::diff::Tensor;
use crate::error::{Error, Result};

/// Encoded features with their labels, partitioned by generating environment.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub features: Tensor,
    pub y_cat: Vec<usize>,
    pub y_env: Vec<usize>,
    pub env_partition: BTreeMap<usize, Vec<usize>>,
    pub n_cat: usize,
    pub n_env: usize,
}

impl LabeledBatch {
    pub fn new(
        features: Tensor,
        y_cat: Vec<usize>,
        y_env: Vec<usize>,
        domains: &[usize],
        n_cat: usize,
        n_env: usize,
    ) -> Result<Self> {
        let n = y_cat.len();
        if features.rank() != 2 || features.rows() != n || y_env.len() != n || domains.len() != n {
            return Err(Error::Shape {
                op: "labeled_batch",
                left: features.shape().to_vec(),
                right: vec![n, y_env.len(), domains.len()],
            });
        }
        if let Some(&bad) = y_cat.iter().find(|&&y| y >= n_cat) {
            return Err(Error::Vocabulary { index: bad, size: n_cat });
        }
        if let Some(&bad) = y_env.iter().find(|&&y| y >= n_env) {
            return Err(Error::Vocabulary { index: bad, size: n_env });
        }
        let mut env_partition: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &d) in domains.iter().enumerate() {
            env_partition.entry(d).or_default().push(i);
        }
        Ok(Self {
            features,
            y_cat,
            y_env,
            env_partition,
            n_cat,
            n_env,
        })
    }

    /// Encodes `samples`. When `classes` is given, category labels are
    /// remapped to positions in that list and samples of other classes are
    /// an error.
    pub fn from_samples(
        encoder: &FrozenImageEncoder,
        samples: &[&RawSample],
        classes: Option<&[usize]>,
        n_cat: usize,
        n_env: usize,
    ) -> Result<Self> {
        let features = encoder.encode_batch(samples)?;
        let y_cat = samples
            .iter()
            .map(|s| match classes {
                None => Ok(s.y_cat),
                Some(list) => list.iter().position(|&c| c == s.y_cat).ok_or_else(|| {
                    Error::Protocol(format!("sample of class {} outside the branch vocabulary", s.y_cat))
                }),
            })
            .collect::<Result<Vec<_>>>()?;
        let y_env = samples.iter().map(|s| s.y_env).collect();
        let domains: Vec<usize> = samples.iter().map(|s| s.domain).collect();
        Self::new(features, y_cat, y_env, &domains, n_cat, n_env)
    }

    pub fn len(&self) -> usize {
        self.y_cat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y_cat.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;

    fn raw(y_cat: usize, domain: usize) -> RawSample {
        RawSample {
            category_signal: vec![1.0, 0.0],
            environment_signal: vec![0.0, 1.0],
            noise: vec![0.0],
            y_cat,
            y_env: domain,
            domain,
            split: Split::Train,
        }
    }

    #[test]
    fn partition_covers_each_row_once() {
        let enc = FrozenImageEncoder::identity(5);
        let s = [raw(0, 1), raw(1, 0), raw(1, 1), raw(0, 2)];
        let refs: Vec<_> = s.iter().collect();
        let b = LabeledBatch::from_samples(&enc, &refs, None, 2, 3).unwrap();
        let mut all: Vec<usize> = b.env_partition.values().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert_eq!(b.env_partition[&1], vec![0, 2]);
    }

    #[test]
    fn labels_checked_and_remapped() {
        let enc = FrozenImageEncoder::identity(5);
        let s = [raw(3, 0), raw(5, 1)];
        let refs: Vec<_> = s.iter().collect();
        assert!(matches!(
            LabeledBatch::from_samples(&enc, &refs, None, 2, 2),
            Err(Error::Vocabulary { index: 3, size: 2 })
        ));
        let b = LabeledBatch::from_samples(&enc, &refs, Some(&[5, 3]), 2, 2).unwrap();
        assert_eq!(b.y_cat, vec![1, 0]);
        assert!(LabeledBatch::from_samples(&enc, &refs, Some(&[5]), 1, 2).is_err());
    }
}
