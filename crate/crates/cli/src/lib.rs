//! `visicrit` command-line front end.

pub mod commands;
pub mod config;
pub mod serve;

use std::ffi::OsString;
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::PathBuf;
use std::sync::atomic::Ordering;

use clap::{Parser, Subcommand, ValueEnum};

use visicrit_core::model::{read_records_file, SchemaMode};
use visicrit_core::pipeline::PipelineError;
use visicrit_core::postedit::EditVariant;

use commands::{EvalOptions, UsageError};
use config::{ConfigError, PipelineConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "visicrit",
    version,
    about = "Critic-guided data-to-text generation pipeline",
    long_about = "Critic-guided data-to-text generation pipeline.\n\n\
                  Every stage reads a JSON config; all model calls go through a \
                  content-addressed cache so warm reruns are byte-identical."
)]
pub struct Cli {
    /// Pipeline config file (JSON).
    #[arg(long, short, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Raise log verbosity (-v info, -vv debug).
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Pruned,
    Appended,
    Combined,
}

impl From<VariantArg> for EditVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Pruned => EditVariant::Pruned,
            VariantArg::Appended => EditVariant::Appended,
            VariantArg::Combined => EditVariant::Combined,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate the corpus and write it back normalized.
    Ingest {
        /// Replace the corpus with N generated mock-world records first.
        #[arg(long, value_name = "N")]
        synthetic: Option<usize>,
        /// Seed for --synthetic.
        #[arg(long, default_value_t = 7, requires = "synthetic")]
        synthetic_seed: u64,
    },
    /// Generate draft descriptions.
    Generate,
    /// Collect critic feedback on the drafts.
    Feedback,
    /// Post-edit drafts with critic feedback.
    Edit {
        /// Which edit to write.
        #[arg(long, value_enum)]
        variant: VariantArg,
    },
    /// Build the critic training sets.
    BuildTrainset,
    /// Filter ground-truth texts down to faithful features.
    PreprocessGt,
    /// Score every variant against the preprocessed ground truth.
    Eval {
        /// Also report critic accuracy on this classification JSONL file.
        #[arg(long, value_name = "FILE")]
        classification: Option<PathBuf>,
        /// Also report critic salient-list similarity on this JSONL file.
        #[arg(long, value_name = "FILE")]
        salient: Option<PathBuf>,
    },
    /// Serve the critic protocol from corpus manifests.
    MockServe {
        /// Port to listen on.
        #[arg(long, default_value_t = 8099)]
        port: u16,
        /// Address to bind.
        #[arg(long, default_value_t = IpAddr::V4(Ipv4Addr::LOCALHOST))]
        host: IpAddr,
        /// Corpus whose image manifests answer requests.
        #[arg(long, value_name = "FILE")]
        world: PathBuf,
        /// Ignore unknown record keys.
        #[arg(long)]
        lax: bool,
    },
}

fn exit_code(e: &anyhow::Error) -> i32 {
    if e.downcast_ref::<UsageError>().is_some() || e.downcast_ref::<ConfigError>().is_some() {
        EXIT_USAGE
    } else {
        EXIT_RUNTIME
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<PipelineConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| UsageError(ConfigError::Invalid("--config is required for this command".into())))?;
    Ok(PipelineConfig::load(path).map_err(UsageError)?)
}

/// Parse `argv`, run the command and return its exit code. With
/// `install_interrupt`, Ctrl-C drains in-flight work and exits 1.
pub fn run<I, T>(argv: I, install_interrupt: bool) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::from_default_env()
        .filter_level(level)
        .parse_default_env()
        .try_init();
    match execute(&cli, install_interrupt) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

pub fn execute(cli: &Cli, install_interrupt: bool) -> anyhow::Result<()> {
    if let Command::MockServe { port, host, world, lax } = &cli.command {
        let mode = if *lax { SchemaMode::Lax } else { SchemaMode::Strict };
        let records = read_records_file(world, mode)
            .map_err(|e| UsageError(ConfigError::Invalid(format!("world {}: {e}", world.display()))))?;
        let index = serve::ManifestIndex::from_records(&records);
        log::info!("{} images indexed", index.len());
        return serve::serve_blocking(index, SocketAddr::new(*host, *port));
    }

    let cfg = load_config(cli)?;
    visicrit_core::exec::init_workers(cfg.workers);
    if let Command::Ingest {
        synthetic,
        synthetic_seed,
    } = &cli.command
    {
        let s = commands::ingest(&cfg, synthetic.map(|n| (n, *synthetic_seed)))?;
        println!("ingested {} records", s.records);
        return Ok(());
    }

    let records = commands::load_corpus(&cfg)?;
    let p = commands::pipeline(&cfg, &records)?;
    if install_interrupt {
        let flag = p.cancel_flag();
        if let Err(e) = ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst)) {
            log::warn!("interrupt handler not installed: {e}");
        }
    }
    let summary = match &cli.command {
        Command::Generate => commands::generate(&cfg, &p, &records)?,
        Command::Feedback => commands::feedback(&cfg, &p, &records)?,
        Command::Edit { variant } => commands::edit(&cfg, &p, &records, (*variant).into())?,
        Command::BuildTrainset => commands::build_trainset(&cfg, &p, &records)?,
        Command::PreprocessGt => commands::preprocess_gt(&cfg, &p, &records)?,
        Command::Eval {
            classification,
            salient,
        } => {
            let opts = EvalOptions {
                classification: classification.clone(),
                salient: salient.clone(),
            };
            let (report, s) = commands::evaluate(&cfg, &p, &records, &opts)?;
            print!("{}", report.render_table());
            s
        }
        Command::Ingest { .. } | Command::MockServe { .. } => unreachable!(),
    };
    if p.check_cancelled().is_err() {
        return Err(PipelineError::Cancelled.into());
    }
    let stats = p.gateway.stats();
    println!(
        "{} records, {} failed; wrote {} ({} cache hits, {} backend calls)",
        summary.records,
        summary.failed.len(),
        summary.outputs.join(", "),
        stats.cache_hits,
        stats.backend_calls
    );
    Ok(())
}
