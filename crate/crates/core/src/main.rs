use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use moment_closure::closure::ClosureKind;
use moment_closure::data::Dataset;
use moment_closure::experiment::{uq_run, write_history, LoadedConfig, Overrides};
use moment_closure::moment_system::RunStatus;
use moment_closure::sigma::SigmaSpec;
use moment_closure::snapshots::{compare, write_error_table, ErrorTableMetadata, SnapshotFile, ERROR_TABLE_FORMAT};
use moment_closure::data::{sidecar_path, GENERATOR, SCHEMA_VERSION};
use moment_closure::{Error, Result};

/// Learned moment closures for the linear semiconductor Boltzmann equation.
#[derive(Parser)]
#[command(name = "moment-closure", version)]
struct Cli {
    /// Worker threads for independent runs (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Collision frequency: a number or an expression in z such as "2 + z".
    #[arg(long)]
    sigma: Option<String>,
    #[arg(long = "N")]
    n: Option<usize>,
    #[arg(long = "K")]
    k: Option<usize>,
}

impl Common {
    fn load(&self, closure: Option<ClosureKind>) -> Result<LoadedConfig> {
        let overrides = Overrides {
            seed: self.seed,
            closure,
            sigma: self.sigma.as_deref().map(SigmaSpec::parse).transpose()?,
            n: self.n,
            k: self.k,
        };
        LoadedConfig::from_path(self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a training dataset from kinetic reference runs.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a closure on a dataset; writes the checkpoint and <out>.history.csv.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        closure: Option<ClosureKind>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve the test problem with a closure, or with the kinetic solver.
    Solve {
        #[command(flatten)]
        common: Common,
        /// pn, lm, lg, lg-hyper or kinetic.
        #[arg(long)]
        closure: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Relative L2 errors of snapshot files against a kinetic reference.
    Compare {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        candidates: Vec<PathBuf>,
    },
    /// gen-data, train, solve and compare in one go; outputs land in --out.
    UqRun {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        closure: Option<ClosureKind>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::BlowUp { .. } => 3,
        Error::Io { .. } | Error::Format { .. } => 4,
        _ => 1,
    }
}

fn history_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".history.csv");
    PathBuf::from(s)
}

fn blow_up(status: RunStatus) -> Result<()> {
    match status {
        RunStatus::Completed => Ok(()),
        RunStatus::BlowUp { t, step } => Err(Error::BlowUp { t, step }),
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(j) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build_global()
            .map_err(|e| Error::Config(format!("cannot size the thread pool: {e}")))?;
    }
    match cli.command {
        Command::GenData { common, out } => {
            let loaded = common.load(None)?;
            let ds = loaded.generate_dataset()?;
            ds.save(&out)?;
            log::info!("wrote {} rows to {}", ds.len(), out.display());
        }
        Command::Train {
            common,
            data,
            closure,
            out,
        } => {
            let loaded = common.load(closure)?;
            let ds = Dataset::load(&data)?;
            let outcome = loaded.train(&ds)?;
            outcome.model.save(&out)?;
            write_history(&history_path(&out), &outcome.history, Some(&loaded.echo))?;
            if let Some(last) = outcome.history.last() {
                log::info!("final validation relative L2 {:.3e}", last.val_rel_l2);
            }
        }
        Command::Solve {
            common,
            closure,
            checkpoint,
            out,
        } => {
            let kinetic = closure.as_deref() == Some("kinetic");
            let kind = match closure.as_deref() {
                None | Some("kinetic") => None,
                Some(s) => Some(s.parse::<ClosureKind>()?),
            };
            let loaded = common.load(kind)?;
            let file = if kinetic {
                loaded.solve_reference()?
            } else {
                let model = loaded.load_model(loaded.config.closure.kind, checkpoint.as_deref())?;
                let ckpt = checkpoint.or_else(|| loaded.config.closure.checkpoint.clone());
                loaded.solve_closure(model, ckpt.as_deref())?
            };
            file.save(&out)?;
            log::info!("wrote {} snapshots to {}", file.snapshots.len(), out.display());
            blow_up(file.meta.status)?;
        }
        Command::Compare {
            reference,
            out,
            candidates,
        } => {
            let r = SnapshotFile::load(&reference)?;
            let mut rows = Vec::new();
            let mut hashes = vec![r.meta.config.as_ref().map(|c| c.sha256.clone())];
            for c in &candidates {
                let f = SnapshotFile::load(c)?;
                let label = c.display().to_string();
                rows.extend(compare(&r, &f, &label)?);
                hashes.push(f.meta.config.as_ref().map(|c| c.sha256.clone()));
            }
            write_error_table(&out, &rows)?;
            let meta = ErrorTableMetadata {
                format: ERROR_TABLE_FORMAT.into(),
                schema_version: SCHEMA_VERSION,
                generator: GENERATOR.into(),
                reference: reference.display().to_string(),
                candidates: candidates.iter().map(|c| c.display().to_string()).collect(),
                input_hashes: hashes,
                config: None,
            };
            let side = sidecar_path(&out);
            std::fs::write(&side, serde_json::to_string_pretty(&meta).expect("json"))
                .map_err(|e| Error::Io { path: side.clone(), source: e })?;
        }
        Command::UqRun { common, closure, out } => {
            let loaded = common.load(closure)?;
            let result = uq_run(&loaded, &out)?;
            for row in result.errors.iter().filter(|r| r.t == loaded.config.kinetic.t_final) {
                println!("{}\t{}\t{:.6e}", row.candidate, row.field, row.rel_l2);
            }
            blow_up(result.status)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
