use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use aurora_core::encoder::{read_checkpoint, write_checkpoint};
use aurora_core::harness::{self, ExperimentConfig};
use aurora_core::metrics::pca_2d;
use aurora_core::synthcohort::{generate, read_cohort, write_cohort, CohortRecord};
use aurora_core::{Error, Result};

#[derive(Parser)]
#[command(name = "aurora", about = "Contextual subspace representation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured synthetic cohort as CSV.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the configured method; writes the checkpoint and `<out>.log.csv`.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode every record of a cohort file into an embedding store.
    Embed {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute the metric table on the held-out split.
    Evaluate {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Evaluation settings; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Method name written into the table.
        #[arg(long, default_value = "model")]
        method: String,
    },
    /// Train and evaluate every grid method; writes the report and metrics CSVs.
    Grid {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of consecutive seeds, starting at the configured one.
        #[arg(long, default_value_t = 1)]
        seeds: usize,
    },
    /// Two-dimensional PCA coordinates of a store's latents as CSV.
    Project {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    fs::read_to_string(path)?.parse()
}

fn load_records(path: &Path) -> Result<Vec<CohortRecord>> {
    Ok(read_cohort(BufReader::new(File::open(path)?))?.records)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(bytes)?;
    f.flush()?;
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn threads() -> Result<usize> {
    match std::env::var("AURORA_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::config(format!("AURORA_THREADS must be a positive integer, got `{v}`"))),
        Err(_) => Ok(1),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { config, out } => {
            let cfg = load_config(&config)?;
            let cohort = generate(&cfg.cohort)?;
            let mut f = BufWriter::new(File::create(&out)?);
            write_cohort(&mut f, cfg.cohort.p, cfg.cohort.sites, &cohort.records)?;
            f.flush()?;
        }
        Command::Train { config, out } => {
            let cfg = load_config(&config)?;
            let result = harness::train(&cfg)?;
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, &result.bundle)?;
            write_file(&out, &buf)?;
            let log = harness::write_log_csv(&result.log, cfg.encoder.subspaces);
            write_file(&with_suffix(&out, ".log.csv"), log.as_bytes())?;
            if let Some(e) = result.diverged {
                return Err(e);
            }
        }
        Command::Embed { ckpt, cohort, out } => {
            let bundle = read_checkpoint(&mut BufReader::new(File::open(&ckpt)?))?;
            let records = load_records(&cohort)?;
            let set = harness::embed(&bundle, &records)?;
            let mut buf = Vec::new();
            harness::write_store(&mut buf, &set)?;
            write_file(&out, &buf)?;
        }
        Command::Evaluate { store, cohort, out, config, method } => {
            let cfg = match config {
                Some(p) => load_config(&p)?,
                None => ExperimentConfig::with_seed(0),
            };
            let set = harness::read_store(&mut BufReader::new(File::open(&store)?))?;
            let records = load_records(&cohort)?;
            let ev = harness::evaluate(&set, &records, &cfg, &method)?;
            for n in &ev.notes {
                eprintln!("note: {n}");
            }
            write_file(&out, ev.table.to_csv().as_bytes())?;
        }
        Command::Grid { config, out, seeds } => {
            let cfg = load_config(&config)?;
            let stem = out.with_extension("");
            let csv_path = |seed: u64| {
                if seeds == 1 {
                    with_suffix(&stem, ".csv")
                } else {
                    with_suffix(&stem, &format!("_seed{seed}.csv"))
                }
            };
            let mut flush = |seed: u64, table: &aurora_core::metrics::MetricsTable| {
                write_file(&csv_path(seed), table.to_csv().as_bytes())
            };
            let result = harness::run_grid(&cfg, seeds, threads()?, &mut flush)?;
            write_file(&out, result.report.as_bytes())?;
        }
        Command::Project { store, out } => {
            let set = harness::read_store(&mut BufReader::new(File::open(&store)?))?;
            let p = pca_2d(&set.z)?;
            let mut s = String::from("id,pc1,pc2\n");
            for (i, id) in set.ids.iter().enumerate() {
                s.push_str(&format!("{id},{:.6},{:.6}\n", p.get(i, 0), p.get(i, 1)));
            }
            write_file(&out, s.as_bytes())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
