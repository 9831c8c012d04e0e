use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hybridq_core::bench::{self, CurationManifest, CurationOutputs, EngineConfig, HybridEngine, Suite};
use hybridq_core::catalog::DatabaseHandle;
use hybridq_core::evaluator::MetricsReport;
use hybridq_core::generation::{PlanMode, ProviderConfig, ProviderMode};
use hybridq_core::materializer::write_rejections;
use hybridq_core::{Error, Result};

/// Hybrid SQL over SQLite and language-model virtual tables.
#[derive(Debug, Parser)]
#[command(name = "hybridq", version, arg_required_else_help = true)]
struct Cli {
    /// Provider config file (TOML with a [provider] table).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Log more (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a curated database, specs and gold values from a full database.
    Curate {
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one hybrid query against a suite's curated database.
    Query {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        sql: String,
        /// Database id; defaults to the suite's only database.
        #[arg(long)]
        database: Option<String>,
        #[arg(long, value_enum, default_value_t = ModeArg::Full)]
        mode: ModeArg,
    },
    /// Generate and cache rows of one virtual table for all its keys.
    Materialize {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        spec: String,
    },
    /// Suite commands.
    #[command(subcommand)]
    Bench(BenchCommand),
    /// Print a stored report.
    Score {
        #[arg(long)]
        run: PathBuf,
        /// Print the JSON document instead of the table.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Subcommand)]
enum BenchCommand {
    /// Run every case of a suite and write a metrics report.
    Run {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value_t = ModeArg::Full)]
        mode: ModeArg,
        #[arg(long)]
        report: PathBuf,
        /// Drop existing cache tables first.
        #[arg(long)]
        fresh: bool,
        /// Append rejected generated rows here as JSON lines.
        #[arg(long)]
        rejections: Option<PathBuf>,
    },
    /// Write oracle mock fixtures transcribed from the suite's gold values.
    Fixtures {
        #[arg(long)]
        suite: PathBuf,
        /// Defaults to the suite's fixture path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the suite invariants without calling a provider.
    Check {
        #[arg(long)]
        suite: PathBuf,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    suite: PathBuf,
    /// Overrides the provider mode of the config.
    #[arg(long, value_enum)]
    provider: Option<ProviderArg>,
    /// Few-shot examples per prompt; defaults to the suite's default_k.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ProviderArg {
    Live,
    Mock,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Full,
    Pushdown,
}

impl From<ModeArg> for PlanMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Full => PlanMode::Full,
            ModeArg::Pushdown => PlanMode::Pushdown,
        }
    }
}

fn provider_config(config: Option<&Path>, provider: Option<ProviderArg>, suite: &Suite) -> Result<ProviderConfig> {
    let mut c = match config {
        Some(path) => ProviderConfig::load(path)?,
        None => ProviderConfig::default(),
    };
    let suite_fixtures = || suite.fixtures.clone().unwrap_or_default();
    match provider {
        Some(ProviderArg::Live) => c.mode = ProviderMode::Live,
        Some(ProviderArg::Mock) => {
            if !matches!(&c.mode, ProviderMode::Mock(p) if !p.as_os_str().is_empty()) {
                c.mode = ProviderMode::Mock(suite_fixtures());
            }
        }
        None => {
            if matches!(&c.mode, ProviderMode::Mock(p) if p.as_os_str().is_empty()) {
                c.mode = ProviderMode::Mock(suite_fixtures());
            }
        }
    }
    Ok(c)
}

fn engine_config(cli_config: Option<&Path>, run: &RunArgs, suite: &Suite, mode: PlanMode) -> Result<EngineConfig> {
    Ok(EngineConfig {
        provider: provider_config(cli_config, run.provider, suite)?,
        mode,
        k: run.k.unwrap_or(suite.default_k),
    })
}

fn run(cli: Cli) -> Result<()> {
    let config = cli.config.as_deref();
    match cli.command {
        Command::Curate { db, manifest, out } => {
            let m = CurationManifest::load(&manifest)?;
            let full = DatabaseHandle::open(&m.database_id, &db)?;
            let outputs = CurationOutputs::in_dir(&out, &m.database_id);
            let c = bench::curate(&full, &m, &outputs.curated_db)?;
            bench::write_curation(&c, &outputs)?;
            println!(
                "curated {} -> {} ({} virtual tables)",
                db.display(),
                outputs.curated_db.display(),
                c.specs.len()
            );
        }
        Command::Query { run, sql, database, mode } => {
            let suite = Suite::load(&run.suite)?;
            let ec = engine_config(config, &run, &suite, mode.into())?;
            let provider = ec.provider.build()?;
            let database = match database {
                Some(d) => d,
                None => match suite.databases.as_slice() {
                    [only] => only.id.clone(),
                    _ => return Err(Error::config("query", "suite has several databases; pass --database")),
                },
            };
            let engine = HybridEngine::new(&suite.catalog, provider.as_ref(), ec);
            let outcome = engine.query(&database, &sql)?;
            println!("{}", outcome.result.render());
            eprintln!(
                "{} rows; {} keys cached, {} generated in {} requests",
                outcome.result.rows.len(),
                outcome.fill.hits,
                outcome.fill.misses,
                outcome.fill.invocations
            );
        }
        Command::Materialize { run, spec } => {
            let suite = Suite::load(&run.suite)?;
            let ec = engine_config(config, &run, &suite, PlanMode::Full)?;
            let provider = ec.provider.build()?;
            let engine = HybridEngine::new(&suite.catalog, provider.as_ref(), ec);
            let fill = engine.materialize_spec(&spec)?;
            let m = &fill.materialized;
            println!(
                "{spec}: {} cached, {} requested in {} requests; inserted {}, updated {}, rejected {}, failed {}",
                fill.hits,
                fill.misses,
                fill.invocations,
                m.inserted,
                m.updated,
                m.rejected,
                fill.failed_keys.len()
            );
        }
        Command::Bench(BenchCommand::Run { run, mode, report, fresh, rejections }) => {
            let suite = Suite::load(&run.suite)?;
            if fresh {
                suite.clear_caches()?;
            }
            let ec = engine_config(config, &run, &suite, mode.into())?;
            let provider = ec.provider.build()?;
            let result = bench::run_suite(&suite, &ec, provider.as_ref())?;
            result.report.save(&report)?;
            if let Some(path) = rejections {
                write_rejections(&path, &result.rejections)?;
            }
            print!("{}", result.report.render_table());
            eprintln!("{} provider requests; report written to {}", result.invocations, report.display());
        }
        Command::Bench(BenchCommand::Fixtures { suite, out }) => {
            let suite = Suite::load(&suite)?;
            let set = bench::oracle_fixtures(suite.catalog.specs(), &suite.gold)?;
            let path = out
                .or_else(|| suite.fixtures.clone())
                .ok_or_else(|| Error::config("bench fixtures", "suite declares no fixture path; pass --out"))?;
            set.save(&path)?;
            println!("wrote {} fixtures to {}", set.len(), path.display());
        }
        Command::Bench(BenchCommand::Check { suite }) => {
            let suite = Suite::load(&suite)?;
            suite.check()?;
            println!("suite {} ok: {} cases, {} virtual tables", suite.name, suite.cases.len(), suite.catalog.size().1);
        }
        Command::Score { run, json } => {
            let report = MetricsReport::load(&run)?;
            if json {
                print!("{}", report.to_json_string());
            } else {
                print!("{}", report.render_table());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.class().exit_code() as u8)
        }
    }
}
