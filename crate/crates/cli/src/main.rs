use std::net::{Ipv4Addr, SocketAddr};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use pcb_cli::run::{analysis_of, analyze_run, dirs, eval_run, gen, load_frozen, train_run};
use pcb_cli::service::{serve, ServiceState};
use pcb_cli::{exit, CliError, RunConfig};

#[derive(Parser)]
#[command(name = "pcb", version, about = "Partial concept bottleneck risk models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory: the dataset for `gen`, the run directory otherwise.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dataset directory read by `train`, `eval`, `analyze` and `serve`.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted synthetic cohort.
    Gen,
    /// Train a model and write a checkpoint and history.
    Train,
    /// Evaluate the checkpoint on the validation split.
    Eval,
    /// Write cluster, UpSet and sanity reports.
    Analyze,
    /// Serve the frozen model over HTTP.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    match cli.command {
        Command::Gen => {
            let out = cli.out.unwrap_or_else(|| cfg.paths.data.clone());
            let ds = gen(&cfg, &out)?;
            eprintln!("wrote {} patients to {}", ds.len(), out.display());
        }
        Command::Train => {
            let (data, run) = dirs(&cfg, cli.data, cli.out);
            let r = train_run(&cfg, &data, &run, |line| eprintln!("{line}"))?;
            eprintln!(
                "best epoch {} (tuning loss {:.5}); checkpoint in {}",
                r.best_epoch,
                r.best_tune_loss,
                run.display()
            );
        }
        Command::Eval => {
            let (data, run) = dirs(&cfg, cli.data, cli.out);
            println!("{}", to_json(&eval_run(&cfg, &data, &run)?));
        }
        Command::Analyze => {
            let (data, run) = dirs(&cfg, cli.data, cli.out);
            let a = analyze_run(&cfg, &data, &run)?;
            eprintln!(
                "{} clusters, {} major; reports in {}",
                a.clusters.len(),
                a.clusters.iter().filter(|c| c.major).count(),
                run.display()
            );
            println!("{}", to_json(&a.sanity));
        }
        Command::Serve { port } => {
            let (data, run) = dirs(&cfg, cli.data, cli.out);
            let frozen = load_frozen(&cfg, &data, &run)?;
            let analysis = analysis_of(&cfg, &frozen)?;
            let state = Arc::new(ServiceState::new(cfg.template, frozen.model, analysis));
            let addr = SocketAddr::from((Ipv4Addr::LOCALHOST, port));
            let rt = tokio::runtime::Runtime::new()?;
            eprintln!("listening on http://{addr}");
            rt.block_on(serve(state, addr))
                .map_err(|e| CliError::usage(format!("cannot serve on {addr}: {e}")))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE } else { exit::OK });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::from(exit::OK),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.status)
        }
    }
}
