use std::path::{Path, PathBuf};
use std::process::ExitCode;

use atv_core::error::Result;
use atv_core::harness::commands::{
    cmd_ablate_capacity, cmd_ablate_layers, cmd_eval, cmd_export_vectors, cmd_gen_data, cmd_theory, cmd_train,
};
use atv_core::harness::config::RunConfig;
use atv_core::harness::run::run_dir;
use atv_core::tasks::Split;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "atv", version, about = "Adaptive task vector experiments on synthetic tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// key = value config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seeds; repeatable.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra `key=value` override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        for s in &self.sets {
            let (k, v) = s.split_once('=').unwrap_or((s.as_str(), ""));
            cfg.set(k.trim(), v.trim())?;
        }
        if !self.seeds.is_empty() {
            cfg.seeds = self.seeds.clone();
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct RunsArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Saved run directory; repeatable. Defaults to the runs the config names.
    #[arg(long = "run")]
    runs: Vec<PathBuf>,
}

impl RunsArgs {
    fn resolve(&self) -> Result<(Vec<PathBuf>, PathBuf)> {
        let cfg = self.config.load()?;
        let runs = if self.runs.is_empty() {
            cfg.seeds.iter().map(|&s| run_dir(&cfg.out_dir, cfg.method, s)).collect()
        } else {
            self.runs.clone()
        };
        Ok((runs, cfg.out_dir))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the backbone and train the configured method, one run per seed.
    Train(ConfigArgs),
    /// Score saved runs on test splits and write accuracy reports.
    Eval {
        #[command(flatten)]
        runs: RunsArgs,
        /// Split to evaluate; repeatable. Defaults to all test splits.
        #[arg(long = "split")]
        splits: Vec<Split>,
    },
    /// Held-out-template accuracy with injection limited to each third of the layers.
    AblateLayers(RunsArgs),
    /// Train the generator at every width of the capacity ladder.
    AblateCapacity(ConfigArgs),
    /// Dump per-query task vectors, layer norms and a PCA projection.
    ExportVectors {
        /// Saved ATV or fixed-vector run directory.
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "test_unseen_template")]
        split: Split,
        #[arg(long, default_value = "vectors")]
        out: PathBuf,
    },
    /// Numerically check the low-rank and attention-decomposition identities.
    Theory {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Relative tolerance for every check.
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the generated splits as JSON lines.
    GenData(ConfigArgs),
}

fn show(path: &Path) -> String {
    path.display().to_string()
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train(args) => {
            for dir in cmd_train(&args.load()?)? {
                println!("saved {}", show(&dir));
            }
        }
        Command::Eval { runs, splits } => {
            let (dirs, out) = runs.resolve()?;
            let splits = if splits.is_empty() {
                vec![Split::TestSeenTemplate, Split::TestUnseenTemplate, Split::UnseenTask]
            } else {
                splits
            };
            let result = cmd_eval(&dirs, &splits, &out)?;
            let fmt = |m: Option<f64>, s: Option<f64>| match (m, s) {
                (Some(m), Some(s)) => format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * s),
                _ => "-".into(),
            };
            println!("method\ttrain_template\theld_out_template\tunseen_task\tprompt_tokens");
            for r in &result.summary {
                println!(
                    "{}\t{}\t{}\t{}\t{:.1}",
                    r.method,
                    fmt(r.train_template_mean, r.train_template_std),
                    fmt(r.held_out_template_mean, r.held_out_template_std),
                    fmt(r.unseen_task_mean, r.unseen_task_std),
                    r.mean_prompt_tokens
                );
            }
            println!("wrote {}", show(&out));
        }
        Command::AblateLayers(runs) => {
            let (dirs, out) = runs.resolve()?;
            println!("region\tlayers\taccuracy\tdiff_vs_all");
            for r in cmd_ablate_layers(&dirs, &out)? {
                println!(
                    "{}\t{}\t{:.2} ± {:.2}\t{:+.2}",
                    r.region,
                    r.layers,
                    100.0 * r.accuracy_mean,
                    100.0 * r.accuracy_std,
                    100.0 * r.diff_vs_all
                );
            }
        }
        Command::AblateCapacity(args) => {
            let cfg = args.load()?;
            println!("d_small\tgenerator_params\ttrainable_params\taccuracy");
            for r in cmd_ablate_capacity(&cfg, &cfg.out_dir)? {
                println!(
                    "{}\t{}\t{}\t{:.2} ± {:.2}",
                    r.d_small,
                    r.generator_params,
                    r.trainable_params,
                    100.0 * r.accuracy_mean,
                    100.0 * r.accuracy_std
                );
            }
        }
        Command::ExportVectors { run, split, out } => {
            let e = cmd_export_vectors(&run, split, &out)?;
            for v in &e.variance {
                println!("{}\tn={}\twithin_variance={:e}", v.family, v.n, v.within_variance);
            }
            println!("wrote {} vectors to {}", e.vectors.len(), show(&out));
        }
        Command::Theory { trials, seed, tol, out } => {
            let report = cmd_theory(trials, seed, tol, out.as_deref())?;
            for r in [&report.theorem1, &report.theorem2] {
                println!(
                    "{}: {} trials, max relative error {:e}, {}",
                    r.suite,
                    r.trials,
                    r.max_rel_err,
                    if r.passed() { "pass" } else { "FAIL" }
                );
            }
            for f in &report.failed {
                println!(
                    "failed {} trial {} check {} error {:e} (replay with --trials 1 --seed {})",
                    f.suite, f.trial, f.check, f.max_rel_err, f.replay_seed
                );
            }
            return Ok(report.passed);
        }
        Command::GenData(args) => {
            let cfg = args.load()?;
            println!("wrote {}", show(&cmd_gen_data(&cfg, &cfg.out_dir)?));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
