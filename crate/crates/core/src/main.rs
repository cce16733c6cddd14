use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dpvqa::harness::ablate::{ablate, margin, ordering_violations, table, write_report};
use dpvqa::harness::gradcheck::{gradcheck, GradcheckConfig};
use dpvqa::harness::train::{evaluate_checkpoint, train, Dataset};
use dpvqa::harness::RunConfig;
use dpvqa::synth::{generate_corpus, CorpusConfig, Split};
use dpvqa::Result;

#[derive(Parser)]
#[command(name = "dpvqa", version, about = "Clip relation network + MAC video QA toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a synthetic corpus.
    Generate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8000)]
        items: usize,
    },
    /// Train one model variant.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Corpus directory; defaults to the one recorded in the checkpoint.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Train all seven variants and print the comparison table.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare backward() against central differences at toy sizes.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        probes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(path: Option<PathBuf>, corpus: Option<PathBuf>, out: Option<PathBuf>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(&p)?,
        None => RunConfig::default(),
    }
    .with_env()?;
    if corpus.is_some() {
        cfg.corpus = corpus;
    }
    if out.is_some() {
        cfg.out = out;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Generate { seed, out, items } => {
            let corpus = generate_corpus(&CorpusConfig::new(seed, items))?;
            corpus.write(&out)?;
            println!(
                "wrote {} items over {} scenes to {}",
                corpus.items.len(),
                corpus.scenes.len(),
                out.display()
            );
        }
        Command::Train { config, corpus, out } => {
            let cfg = load_config(config, corpus, out)?;
            let s = train(&cfg)?;
            println!(
                "best epoch {}: test accuracy {:.4}; outputs in {}",
                s.best_epoch,
                s.test.accuracy,
                s.out.display()
            );
        }
        Command::Eval {
            checkpoint,
            split,
            corpus,
        } => {
            let r = evaluate_checkpoint(&checkpoint, split, corpus.as_deref())?;
            println!("{}", serde_json::to_string(&r)?);
        }
        Command::Ablate { config, corpus, out } => {
            let cfg = load_config(config, corpus, out)?;
            let dir = cfg
                .corpus
                .clone()
                .ok_or_else(|| dpvqa::Error::Config("`corpus` is not set".into()))?;
            let data = Dataset::load(&dir, cfg.workers)?;
            let rows = ablate(&cfg, &data)?;
            print!("{}", table(&rows));
            println!("margin crn_mac - linguistic_only: {:.4}", margin(&rows)?);
            for v in ordering_violations(&rows)? {
                println!("ordering: {v}");
            }
            if let Some(out) = &cfg.out {
                write_report(out, &rows)?;
            }
        }
        Command::Gradcheck { probes, seed } => {
            let report = gradcheck(&GradcheckConfig { probes, seed, ..GradcheckConfig::default() })?;
            print!("{report}");
            return Ok(report.passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
