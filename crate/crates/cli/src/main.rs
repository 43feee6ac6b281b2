use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cartal_core::corpus::write_corpus;
use cartal_core::harness::{
    run_experiment, sweep_nadd, CorpusSource, ExperimentConfig, ExperimentSummary, OracleKind, SplitSource,
};
use cartal_core::synthdata::{generate, ClassCounts, CorpusSpec};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "cartal",
    version,
    about = "Active learning for change detection on image pairs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus on disk.
    Gen {
        /// Corpus parameters as JSON; omitted fields take their defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Initial-set class counts recorded in the index, as `changed,unchanged`.
        #[arg(long, default_value = "10,10", value_parser = parse_counts)]
        initial: ClassCounts,
        /// Test-set class counts recorded in the index, as `changed,unchanged`.
        #[arg(long, default_value = "100,100", value_parser = parse_counts)]
        test: ClassCounts,
        #[arg(long, default_value_t = 0)]
        split_seed: u64,
    },
    /// Run an experiment over every configured seed.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an experiment once per N_add value until each reaches `--min-labels`.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        nadd: Vec<usize>,
        #[arg(long)]
        min_labels: usize,
        #[arg(long, default_value = "sweep")]
        out: PathBuf,
    },
    /// Run the loop on a stored corpus with masks supplied over HTTP.
    Serve {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Experiment settings; the corpus, split and oracle fields are overridden.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "served")]
        out: PathBuf,
    },
}

fn parse_counts(s: &str) -> Result<ClassCounts, String> {
    let parts: Vec<&str> = s.split(',').collect();
    match parts.as_slice() {
        [c, u] => Ok(ClassCounts::new(
            c.trim().parse().map_err(|e| format!("{c}: {e}"))?,
            u.trim().parse().map_err(|e| format!("{u}: {e}"))?,
        )),
        _ => Err(format!("expected `changed,unchanged`, got `{s}`")),
    }
}

fn print_summary(s: &ExperimentSummary) {
    println!("{} / {}, N_add {}, seeds {:?}", s.method, s.metric, s.n_add, s.seeds);
    println!("{:>5} {:>7} {:>16} {:>16}", "iter", "labels", "auc", "change_frac");
    for it in &s.iterations {
        println!(
            "{:>5} {:>7.0} {:>8.4} ± {:<6.4} {:>8.4} ± {:<6.4}",
            it.iteration,
            it.labels_used.mean,
            it.auc.mean,
            it.auc.stderr,
            it.change_fraction.mean,
            it.change_fraction.stderr
        );
    }
    if let Some(f) = &s.full_supervision {
        println!(
            "full supervision ({} labels): auc {:.4} ± {:.4}",
            f.labels_used, f.auc.mean, f.auc.stderr
        );
    }
}

fn gen(
    spec: Option<&Path>,
    out: &Path,
    initial: ClassCounts,
    test: ClassCounts,
    split_seed: u64,
) -> Result<(), String> {
    let spec: CorpusSpec = match spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| format!("{}: {e}", p.display()))?
        }
        None => CorpusSpec::default(),
    };
    let tiles = generate(&spec).map_err(|e| e.to_string())?;
    let index = write_corpus(out, &tiles, Some(&spec), initial, test, split_seed).map_err(|e| e.to_string())?;
    println!(
        "wrote {} tiles of side {} to {} (change prior {:.4})",
        index.tiles.len(),
        index.tile_side,
        out.display(),
        spec.change_prior()
    );
    Ok(())
}

fn load(path: &Path) -> Result<ExperimentConfig, String> {
    ExperimentConfig::load(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Gen {
            spec,
            out,
            initial,
            test,
            split_seed,
        } => gen(spec.as_deref(), &out, initial, test, split_seed),
        Command::Run { config, out } => load(&config).and_then(|cfg| {
            let result = run_experiment(&cfg, &out).map_err(|e| e.to_string())?;
            print_summary(&result.summary);
            Ok(())
        }),
        Command::Sweep {
            config,
            nadd,
            min_labels,
            out,
        } => load(&config).and_then(|cfg| {
            let entries = sweep_nadd(&cfg, &nadd, min_labels, &out).map_err(|e| e.to_string())?;
            for e in &entries {
                print_summary(&e.summary);
                println!("reached {min_labels} labels: {}\n", e.reached_target);
            }
            Ok(())
        }),
        Command::Serve {
            corpus,
            port,
            config,
            out,
        } => {
            let base = match config {
                Some(p) => load(&p),
                None => Ok(ExperimentConfig {
                    seeds: vec![0],
                    ..Default::default()
                }),
            };
            base.and_then(|base| {
                let index = cartal_core::corpus::read_index(&corpus).map_err(|e| e.to_string())?;
                let cfg = ExperimentConfig {
                    corpus: CorpusSource::Path(corpus),
                    split: SplitSource::Corpus,
                    initial: index.initial,
                    test: index.test,
                    oracle: OracleKind::Http { port },
                    ..base
                };
                cfg.validate().map_err(|e| e.to_string())?;
                println!("labelling server on http://0.0.0.0:{port}");
                let result = run_experiment(&cfg, &out).map_err(|e| e.to_string())?;
                print_summary(&result.summary);
                Ok(())
            })
        }
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
