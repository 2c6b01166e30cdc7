use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wilcoxon {
    /// Exact two-sided p-value.
    pub p: f64,
    /// Number of nonzero differences.
    pub n: usize,
    /// Sum of ranks of positive differences.
    pub w_plus: f64,
    /// All differences were zero; `p` is 1.
    pub degenerate: bool,
}

/// Ranks of `|d|` with ties averaged, doubled so they are integers.
fn doubled_ranks(abs: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..abs.len()).collect();
    order.sort_by(|&a, &b| abs[a].total_cmp(&abs[b]));
    let mut ranks = vec![0; abs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && abs[order[j + 1]] == abs[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j+1 averaged, times two.
        let r = (i + 1 + j + 1) as u64;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn prepare(differences: &[f64]) -> Result<(Vec<u64>, u64)> {
    if differences.iter().any(|d| !d.is_finite()) {
        return Err(Error::Numeric("non-finite paired difference".into()));
    }
    let nz: Vec<f64> = differences.iter().copied().filter(|&d| d != 0.0).collect();
    let abs: Vec<f64> = nz.iter().map(|d| d.abs()).collect();
    let ranks = doubled_ranks(&abs);
    let w: u64 = ranks.iter().zip(&nz).filter(|(_, &d)| d > 0.0).map(|(r, _)| r).sum();
    Ok((ranks, w))
}

fn two_sided(le: f64, ge: f64, total: f64) -> f64 {
    (2.0 * le.min(ge) / total).min(1.0)
}

/// Exact two-sided Wilcoxon signed-rank test. Zero differences are dropped
/// and tied magnitudes share their average rank. The null distribution of
/// the positive rank sum is counted exactly over all `2ⁿ` sign patterns.
pub fn wilcoxon_signed_rank(differences: &[f64]) -> Result<Wilcoxon> {
    let (ranks, w) = prepare(differences)?;
    let n = ranks.len();
    if n == 0 {
        return Ok(Wilcoxon {
            p: 1.0,
            n: 0,
            w_plus: 0.0,
            degenerate: true,
        });
    }
    let max: u64 = ranks.iter().sum();
    // counts[s]: sign patterns whose doubled positive rank sum is s.
    let mut counts = vec![0f64; max as usize + 1];
    counts[0] = 1.0;
    let mut reach = 0usize;
    for &r in &ranks {
        let r = r as usize;
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let w = w as usize;
    let le: f64 = counts[..=w].iter().sum();
    let ge: f64 = counts[w..].iter().sum();
    Ok(Wilcoxon {
        p: two_sided(le, ge, 2f64.powi(n as i32)),
        n,
        w_plus: w as f64 / 2.0,
        degenerate: false,
    })
}

/// Test of one named comparison from a pairs file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub comparison: String,
    pub test: Wilcoxon,
}

/// Reads a CSV with columns `comparison, unit, baseline, ours` and tests
/// `ours − baseline` per comparison, in order of first appearance.
pub fn paired_tests(path: impl AsRef<std::path::Path>) -> Result<Vec<PairedTest>> {
    #[derive(Deserialize)]
    struct Pair {
        comparison: String,
        #[allow(dead_code)]
        unit: String,
        baseline: f64,
        ours: f64,
    }
    let mut r = csv::Reader::from_path(path).map_err(super::csv_err)?;
    let mut groups: Vec<(String, Vec<f64>)> = Vec::new();
    for (line, rec) in r.deserialize::<Pair>().enumerate() {
        let p = rec.map_err(|e| Error::Parse {
            line: line + 2,
            msg: e.to_string(),
        })?;
        let d = p.ours - p.baseline;
        match groups.iter_mut().find(|(c, _)| *c == p.comparison) {
            Some((_, v)) => v.push(d),
            None => groups.push((p.comparison, vec![d])),
        }
    }
    groups
        .into_iter()
        .map(|(comparison, d)| {
            Ok(PairedTest {
                comparison,
                test: wilcoxon_signed_rank(&d)?,
            })
        })
        .collect()
}

/// Writes `comparison, n, w_plus, p` rows.
pub fn write_paired_tests(tests: &[PairedTest], path: impl AsRef<std::path::Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(super::csv_err)?;
    w.write_record(["comparison", "n", "w_plus", "p"]).map_err(super::csv_err)?;
    for t in tests {
        w.write_record([
            t.comparison.clone(),
            t.test.n.to_string(),
            t.test.w_plus.to_string(),
            t.test.p.to_string(),
        ])
        .map_err(super::csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_positive_differences() {
        let r = wilcoxon_signed_rank(&[0.5, 1.2, 3.0, 0.1, 2.2, 0.7]).unwrap();
        assert_eq!(r.p, 2.0 / 64.0);
        assert_eq!(r.w_plus, 21.0);
    }

    #[test]
    fn five_positive_differences() {
        assert_eq!(wilcoxon_signed_rank(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap().p, 2.0 / 32.0);
    }

    #[test]
    fn sign_symmetry_and_zero_handling() {
        let d = [1.0, -2.0, 3.5, 0.0, 4.0, -0.5];
        let neg: Vec<f64> = d.iter().map(|x| -x).collect();
        let (a, b) = (wilcoxon_signed_rank(&d).unwrap(), wilcoxon_signed_rank(&neg).unwrap());
        assert_eq!(a.p, b.p);
        assert_eq!(a.n, 5);
        let z = wilcoxon_signed_rank(&[0.0, 0.0]).unwrap();
        assert!(z.degenerate && z.p == 1.0);
    }

    #[test]
    fn ties_share_average_ranks() {
        assert_eq!(doubled_ranks(&[1.0, 2.0, 2.0, 3.0]), vec![2, 5, 5, 8]);
        // Doubled ranks 2, 5, 5, 8 with signs +, -, +, +: W+ doubled = 15.
        // Of the 16 patterns, 14 have sum <= 15 and 4 have sum >= 15.
        let r = wilcoxon_signed_rank(&[1.0, -2.0, 2.0, 3.0]).unwrap();
        assert_eq!(r.w_plus, 7.5);
        assert_eq!(r.p, 2.0 * 4.0 / 16.0);
    }
}
