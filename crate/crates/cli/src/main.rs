use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use starprompt::experiment::{self, ExperimentConfig};
use starprompt::trainer::Variant;
use starprompt::verify::{self, DEFAULT_TRIALS, RANDOM_GRAPH_TOL, STAGE2_TOL};
use starprompt::Result;

/// Class-incremental learning with two-level prompt codebooks and
/// mixture-of-Gaussians replay.
#[derive(Parser, Debug)]
#[command(name = "starprompt", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Overrides {
    /// Run a single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Method variant (overrides `variant`).
    #[arg(long, global = true)]
    variant: Option<Variant>,
    /// Hyperparameter preset (overrides `preset`).
    #[arg(long, global = true)]
    preset: Option<String>,
}

impl Overrides {
    fn pairs(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        if let Some(s) = self.seed {
            out.push(("seeds".into(), s.to_string()));
        }
        if let Some(o) = &self.out {
            out.push(("out".into(), o.display().to_string()));
        }
        if let Some(v) = self.variant {
            out.push(("variant".into(), v.name().into()));
        }
        if let Some(p) = &self.preset {
            out.push(("preset".into(), p.clone()));
        }
        out
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a full multi-seed experiment from a config file.
    Run {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Print the prompt-retrieval confusion of a saved checkpoint.
    Diag {
        checkpoint: PathBuf,
        /// Config describing the stream the checkpoint was trained on.
        stream: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run the gradient verification suite.
    Gradcheck {
        #[arg(long, default_value_t = DEFAULT_TRIALS)]
        trials: usize,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run the full method and every ablation, writing `ablation.csv`.
    Ablate {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
}

fn fmt_row(row: &[f64]) -> String {
    row.iter()
        .map(|v| format!("{v:.3}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn run(config: &Path, o: &Overrides) -> Result<()> {
    let cfg = ExperimentConfig::from_file_with(config, &o.pairs())?;
    let report = experiment::run_with_progress(&cfg, &mut |seed, task, r| {
        eprintln!(
            "seed {seed} task {task}: stage-1 loss {:.4}, stage-2 loss {:.4}",
            r.stage1_main.last().copied().unwrap_or(f64::NAN),
            r.stage2_main.last().copied().unwrap_or(f64::NAN)
        );
    })?;
    for s in &report.summary.seeds {
        let ff = s
            .final_forgetting
            .map_or("n/a".into(), |f| format!("{f:.4}"));
        println!("seed {}: FAA {:.4}, FF {ff}", s.seed, s.faa);
    }
    let faa = &report.summary.faa;
    println!("FAA {:.4} ± {:.4}", faa.mean, faa.std);
    if let Some(ff) = &report.summary.final_forgetting {
        println!("FF  {:.4} ± {:.4}", ff.mean, ff.std);
    }
    if let Some(out) = &cfg.out {
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn diag(checkpoint: &Path, stream: &Path, o: &Overrides) -> Result<()> {
    let cfg = ExperimentConfig::from_file_with(stream, &o.pairs())?;
    let c = experiment::diag(checkpoint, &cfg)?;
    println!(
        "retrieval confusion after task {} (rows: query task, cols: key task)",
        c.after_task
    );
    for (i, row) in c.matrix.iter().enumerate() {
        println!("{i:>3}: {}", fmt_row(row));
    }
    if let Some(out) = &o.out {
        let path = out.join("retrieval_confusion.csv");
        experiment::write_confusion(&path, &c)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn gradcheck(trials: usize, o: &Overrides) -> Result<bool> {
    let r = verify::run_suite(trials, o.seed.unwrap_or(0))?;
    let failed: Vec<_> = r.failures().collect();
    println!(
        "random graphs: {}/{} within {RANDOM_GRAPH_TOL:e} (max rel err {:.3e})",
        r.trials.len() - failed.len(),
        r.trials.len(),
        r.random_max_rel_err
    );
    for f in &failed {
        println!(
            "  trial {} (depth {}): {:.3e}",
            f.trial, f.depth, f.max_rel_err
        );
    }
    println!(
        "stage-2 loss through 2-block ViT: max rel err {:.3e} (tol {STAGE2_TOL:e}) {}",
        r.stage2.max_rel_err,
        if r.stage2.passed { "ok" } else { "FAILED" }
    );
    println!("elapsed {:.2?}", r.elapsed);
    Ok(r.passed())
}

fn ablate(config: &Path, o: &Overrides) -> Result<()> {
    let mut pairs = o.pairs();
    pairs.retain(|(k, _)| k != "variant");
    let cfg = ExperimentConfig::from_file_with(config, &pairs)?;
    let rows = experiment::ablate(&cfg, &Variant::ALL, &mut |v, seed, task| {
        eprintln!("{v}: seed {seed} task {task} done");
    })?;
    print!("{}", experiment::ablation_csv(&rows));
    if let Some(out) = &cfg.out {
        println!("wrote {}", out.join("ablation.csv").display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { config, overrides } => run(config, overrides).map(|_| true),
        Command::Diag {
            checkpoint,
            stream,
            overrides,
        } => diag(checkpoint, stream, overrides).map(|_| true),
        Command::Gradcheck { trials, overrides } => gradcheck(*trials, overrides),
        Command::Ablate { config, overrides } => ablate(config, overrides).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
