//! `concm` command-line tool: generate synthetic benchmarks, run the full
//! incremental pipeline on a manifest, and render saved reports.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 runtime
//! failure, 3 I/O failure. Failures also print a one-line JSON record
//! `{"error": <kind>, "message": <text>}` on stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use concm::eval::RunReport;
use concm::session::{load_benchmark, run_all, write_benchmark, GenConfig, SessionConfig, Strategy};
use concm::Error;

#[derive(Debug, Parser)]
#[command(
    name = "concm",
    version,
    about = "Few-shot class-incremental learning on frozen features"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic benchmark (features, attributes, embeddings, truth,
    /// manifest and a matching run config) into a directory.
    Gen {
        /// Generator config JSON; omitted fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the base session and every incremental session of a manifest.
    Run {
        #[arg(long)]
        manifest: PathBuf,
        /// Run config JSON; omitted fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "concm")]
        strategy: String,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a saved report as a table.
    Report { path: PathBuf },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 3,
        Error::InvalidInput(_)
        | Error::InvalidConfig(_)
        | Error::Parse { .. }
        | Error::Schema { .. }
        | Error::UnknownClass(_)
        | Error::MissingEmbedding(_)
        | Error::EmptyAttribute(_)
        | Error::MissingClass(_)
        | Error::DimensionTooSmall { .. }
        | Error::InsufficientSamples { .. }
        | Error::LabelOutOfRange { .. }
        | Error::ProtocolViolation(_)
        | Error::Shape { .. } => 1,
        _ => 2,
    }
}

fn error_record(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": kind, "message": message }).to_string()
}

fn write(path: &Path, contents: &str) -> concm::Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn gen(config: Option<&Path>, out: &Path) -> concm::Result<()> {
    let gen_cfg = match config {
        Some(p) => GenConfig::load(p)?,
        None => GenConfig::default(),
    };
    gen_cfg.validate()?;
    let manifest = write_benchmark(&gen_cfg, out)?;
    let run_cfg = SessionConfig {
        n_way: gen_cfg.n_way,
        k_shot: gen_cfg.k_shot,
        sessions: gen_cfg.sessions,
        base_classes: gen_cfg.base_classes,
        d_g: gen_cfg.d_g,
        seed: gen_cfg.seed,
        ..SessionConfig::default()
    };
    let mut json = serde_json::to_string_pretty(&run_cfg).expect("config serializes");
    json.push('\n');
    write(&out.join("config.json"), &json)?;
    info!(
        "wrote base and {} session files to {}",
        manifest.sessions.len(),
        out.display()
    );
    println!("{}", out.join("manifest.json").display());
    Ok(())
}

fn run(manifest: &Path, config: Option<&Path>, strategy: &str, seed: Option<u64>, out: &Path) -> concm::Result<()> {
    let strategy: Strategy = strategy.parse()?;
    let mut cfg = match config {
        Some(p) => SessionConfig::load(p)?,
        None => SessionConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let bench = load_benchmark(manifest)?;
    info!("running {} with seed {}", strategy.name(), cfg.seed);
    let output = run_all(&cfg, strategy, &bench)?;

    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write(&out.join("report.json"), &output.report.to_json())?;
    write(&out.join("report.csv"), &output.report.to_csv())?;
    for log in &output.logs {
        write(&out.join(format!("session_{}.log", log.t)), &log.render())?;
    }
    print!("{}", output.report.render_table());
    Ok(())
}

fn report(path: &Path) -> concm::Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let report = RunReport::from_json(&bytes, &path.display().to_string())?;
    print!("{}", report.render_table());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CONCM_LOG", "error")).init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            eprintln!("{}", error_record("UsageError", &e.kind().to_string()));
            return ExitCode::from(1);
        }
    };

    let result = match &cli.command {
        Command::Gen { config, out } => gen(config.as_deref(), out),
        Command::Run {
            manifest,
            config,
            strategy,
            seed,
            out,
        } => run(manifest, config.as_deref(), strategy, *seed, out),
        Command::Report { path } => report(path),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_record(e.kind(), &e.to_string()));
            ExitCode::from(exit_code(&e))
        }
    }
}
