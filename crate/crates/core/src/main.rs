use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bayescal::data::DatasetSpec;
use bayescal::eval::{paired_tests, Grid};
use bayescal::harness::{execute, read_experiment, replay, Experiment, RunKind, RunManifest, SearchSpace};
use bayescal::train::Strategy;
use bayescal::{Error, Result};

#[derive(Parser)]
#[command(name = "bayescal", version, about = "Bayesian cross-modal alignment experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed; repeat for several.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<Strategy>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset from a dataset spec or an experiment config.
    GenData(Common),
    /// Train one run per seed.
    Train(Common),
    /// Score a saved checkpoint on the experiment's splits.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Random hyperparameter search.
    Search {
        #[command(flatten)]
        common: Common,
        /// JSON search space.
        #[arg(long, conflicts_with = "preset")]
        space: Option<PathBuf>,
        /// Named search space.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        master_seed: Option<u64>,
    },
    /// Full objective against each single-penalty removal.
    Ablate(Common),
    /// Train on base classes, evaluate on new ones.
    BaseToNew(Common),
    /// Wilcoxon signed-rank test per comparison of a pairs CSV.
    Stats {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train, then export the loss landscape around the trajectory.
    Landscape {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 21)]
        resolution: usize,
        #[arg(long, default_value_t = 0.5)]
        margin: f64,
    },
    /// Run the command recorded in a manifest again.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn experiment(common: &Common, fallback: Experiment) -> Result<Experiment> {
    match &common.config {
        Some(p) => read_experiment(p),
        None => Ok(fallback),
    }
}

fn seeds(common: &Common, default: &[u64]) -> Vec<u64> {
    if common.seeds.is_empty() {
        default.to_vec()
    } else {
        common.seeds.clone()
    }
}

fn strategy(common: &Common) -> Strategy {
    common.strategy.unwrap_or_default()
}

/// A bare dataset spec or a full experiment.
fn gen_data_experiment(common: &Common) -> Result<Experiment> {
    let mut exp = Experiment::colored();
    if let Some(p) = &common.config {
        let text = std::fs::read_to_string(p)?;
        match serde_json::from_str::<DatasetSpec>(&text) {
            Ok(spec) => exp.dataset = spec,
            Err(_) => exp = serde_json::from_str(&text)?,
        }
    }
    if let Some(&s) = common.seeds.first() {
        exp.dataset.seed = s;
    }
    Ok(exp)
}

fn report(m: &RunManifest, out: &Path) {
    println!("wrote {} outputs under {}", m.outputs.len(), out.display());
    let results = out.join("results.csv");
    if let Ok(text) = std::fs::read_to_string(results) {
        print!("{text}");
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => {
            let exp = gen_data_experiment(&c)?;
            let m = execute(RunKind::GenData, &exp, &[exp.dataset.seed], strategy(&c), &c.out)?;
            report(&m, &c.out);
        }
        Command::Train(c) => {
            let exp = experiment(&c, Experiment::colored())?;
            let m = execute(RunKind::Train, &exp, &seeds(&c, &[1]), strategy(&c), &c.out)?;
            report(&m, &c.out);
        }
        Command::Eval { common: c, checkpoint } => {
            let exp = experiment(&c, Experiment::colored())?;
            let m = execute(RunKind::Eval { checkpoint }, &exp, &seeds(&c, &[1]), strategy(&c), &c.out)?;
            report(&m, &c.out);
        }
        Command::Search {
            common: c,
            space,
            preset,
            trials,
            master_seed,
        } => {
            let exp = experiment(&c, Experiment::colored())?;
            let mut sp = match (space, preset) {
                (Some(p), _) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
                (None, Some(name)) => SearchSpace::preset(&name)?,
                (None, None) => SearchSpace::default(),
            };
            if let Some(t) = trials {
                sp.trials = t;
            }
            if let Some(s) = master_seed {
                sp.master_seed = s;
            }
            if !c.seeds.is_empty() {
                sp.seeds = c.seeds.clone();
            }
            let m = execute(RunKind::Search { space: sp }, &exp, &[], strategy(&c), &c.out)?;
            report(&m, &c.out);
        }
        Command::Ablate(c) => {
            let exp = experiment(&c, Experiment::colored())?;
            let m = execute(RunKind::Ablate, &exp, &seeds(&c, &[1, 2, 3]), strategy(&c), &c.out)?;
            report(&m, &c.out);
            if let Ok(text) = std::fs::read_to_string(c.out.join("ablation.csv")) {
                print!("{text}");
            }
        }
        Command::BaseToNew(c) => {
            let exp = experiment(&c, Experiment::base_to_new())?;
            let m = execute(RunKind::BaseToNew, &exp, &seeds(&c, &[1, 2, 3]), strategy(&c), &c.out)?;
            report(&m, &c.out);
        }
        Command::Stats { pairs, out } => {
            for t in paired_tests(&pairs)? {
                println!("{}\tn={}\tW+={}\tp={}", t.comparison, t.test.n, t.test.w_plus, t.test.p);
            }
            if let Some(out) = out {
                execute(RunKind::Stats { pairs }, &Experiment::default(), &[0], Strategy::default(), &out)?;
            }
        }
        Command::Landscape {
            common: c,
            resolution,
            margin,
        } => {
            let exp = experiment(&c, Experiment::colored())?;
            let grid = Grid { resolution, margin };
            let m = execute(RunKind::Landscape { grid }, &exp, &seeds(&c, &[1]), strategy(&c), &c.out)?;
            report(&m, &c.out);
        }
        Command::Replay { manifest, out } => {
            let m = replay(&RunManifest::read(&manifest)?, &out)?;
            report(&m, &out);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
