use std::path::Path;
use std::process::{Command, Output};

use bayescal::data::{read_dataset, DatasetSpec};
use bayescal::harness::{Experiment, RunManifest};

fn bayescal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bayescal")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_writes_dataset_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cmnist.json");
    let mut spec = DatasetSpec::colored_benchmark(4);
    spec.samples_per_class_per_env = 10;
    std::fs::write(&cfg, serde_json::to_string(&spec).unwrap()).unwrap();
    let out = dir.path().join("d");
    let o = bayescal(&["gen-data", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ds = read_dataset(out.join("dataset.jsonl")).unwrap();
    let per_class: usize = spec.envs.iter().map(|e| e.samples_per_class.unwrap_or(10)).sum();
    assert_eq!(ds.samples.len(), 2 * per_class);
    let m = RunManifest::read(out.join(RunManifest::FILE)).unwrap();
    assert_eq!(m.dataset_hash, spec.hash());
}

#[test]
fn train_writes_run_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    let mut exp = Experiment::colored();
    exp.train.epochs = 3;
    std::fs::write(&cfg, serde_json::to_string(&exp).unwrap()).unwrap();
    let out = dir.path().join("r");
    let o = bayescal(&["train", "--config", s(&cfg), "--seed", "1", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run = out.join("runs/seed_1");
    for e in 0..=3 {
        assert!(run.join(format!("checkpoints/epoch_{e:03}.json")).exists());
    }
    assert_eq!(std::fs::read_to_string(run.join("metrics.jsonl")).unwrap().lines().count(), 4);
    assert!(run.join("trajectory.csv").exists());
    let results = std::fs::read_to_string(out.join("results.csv")).unwrap();
    assert!(results.starts_with("config_id,seed,dataset,strategy,acc,"));
    assert_eq!(results.lines().count(), 2);
}

#[test]
fn stats_prints_p_per_comparison() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = dir.path().join("results.csv");
    let mut text = String::from("comparison,unit,baseline,ours\n");
    for (i, d) in [0.5, 1.2, 0.3, 2.0, 0.8, 1.1].iter().enumerate() {
        text.push_str(&format!("cal-vs-coop,u{i},50,{}\n", 50.0 + d));
        text.push_str(&format!("flat,u{i},50,{}\n", if i % 2 == 0 { 50.0 + d } else { 50.0 - d }));
    }
    std::fs::write(&pairs, text).unwrap();
    let o = bayescal(&["stats", "--pairs", s(&pairs)]);
    assert!(o.status.success());
    let stdout = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("cal-vs-coop") && lines[0].ends_with("p=0.03125"), "{}", lines[0]);
    assert!(lines[1].starts_with("flat"));
}

#[test]
fn exit_codes() {
    assert_eq!(bayescal(&["--help"]).status.code(), Some(0));
    assert_eq!(bayescal(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(bayescal(&["train"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    let o = bayescal(&["train", "--config", s(&missing), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    let o = bayescal(&["train", "--strategy", "oracle", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
}
