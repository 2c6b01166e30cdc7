use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, RawSample, Split};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct Names {
    category: String,
    environment: String,
    domain: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    category_signal: Vec<f64>,
    environment_signal: Vec<f64>,
    noise: Vec<f64>,
    y_cat: usize,
    y_env: usize,
    domain: usize,
    split: Split,
    names: Names,
}

/// One JSON object per sample, one sample per line.
pub fn write_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in &dataset.samples {
        let name = |v: &[String], i: usize, prefix: &str| v.get(i).cloned().unwrap_or_else(|| format!("{prefix}_{i}"));
        let rec = Record {
            category_signal: s.category_signal.clone(),
            environment_signal: s.environment_signal.clone(),
            noise: s.noise.clone(),
            y_cat: s.y_cat,
            y_env: s.y_env,
            domain: s.domain,
            split: s.split,
            names: Names {
                category: name(&dataset.class_names, s.y_cat, "class"),
                environment: name(&dataset.env_names, s.y_env, "env"),
                domain: name(&dataset.domain_names, s.domain, "env"),
            },
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a file written by [`write_dataset`]. Vocabularies are rebuilt from
/// the per-record names; blank lines are skipped.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let reader = BufReader::new(File::open(path)?);
    let mut samples = Vec::new();
    let mut cats = BTreeMap::new();
    let mut envs = BTreeMap::new();
    let mut doms = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        cats.insert(rec.y_cat, rec.names.category);
        envs.insert(rec.y_env, rec.names.environment);
        doms.insert(rec.domain, rec.names.domain);
        samples.push(RawSample {
            category_signal: rec.category_signal,
            environment_signal: rec.environment_signal,
            noise: rec.noise,
            y_cat: rec.y_cat,
            y_env: rec.y_env,
            domain: rec.domain,
            split: rec.split,
        });
    }
    let vocab = |m: BTreeMap<usize, String>, prefix: &str| -> Vec<String> {
        let n = m.keys().next_back().map_or(0, |k| k + 1);
        (0..n).map(|i| m.get(&i).cloned().unwrap_or_else(|| format!("{prefix}_{i}"))).collect()
    };
    Ok(Dataset {
        class_names: vocab(cats, "class"),
        env_names: vocab(envs, "env"),
        domain_names: vocab(doms, "env"),
        samples,
    })
}
