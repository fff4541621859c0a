use std::fs::File;
use std::net::IpAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use bm_core::session::{Reveal, SessionConfig};
use bm_core::testkit::{brightness_model, random_model};
use bm_core::encode_model;
use bm_server::{Server, ServerConfig, DEFAULT_FRAME_RATE, DEFAULT_PORT};
use clap::{Parser, Subcommand, ValueEnum};
use log::LevelFilter;

const LOG_ENV: &str = "BM_LOG_LEVEL";

#[derive(Parser)]
#[command(name = "breakable-machine", version, about = "Classroom server for the Breakable Machine game")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Host a game on the local network.
    Serve(ServeArgs),
    /// Write a BMNet-Tiny model file for trying the game out.
    GenModel(GenModelArgs),
}

#[derive(clap::Args)]
struct ServeArgs {
    /// BMN1 model file.
    #[arg(long)]
    model: PathBuf,
    /// Dataset directory students may browse once unlocked.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// TCP port; 0 picks a free one.
    #[arg(long, default_value_t = DEFAULT_PORT)]
    port: u16,
    /// Address to listen on.
    #[arg(long, default_value = "0.0.0.0")]
    bind: IpAddr,
    /// Host name or address to put in printed URLs.
    #[arg(long)]
    advertise: Option<String>,
    /// How many top scores are shown: a count or `hidden`.
    #[arg(long, default_value = "hidden")]
    reveal: Reveal,
    #[arg(long, default_value_t = 40)]
    max_players: usize,
    /// Frames per second each player may submit.
    #[arg(long, default_value_t = DEFAULT_FRAME_RATE)]
    frame_rate: f64,
    /// Directory with the built browser app.
    #[arg(long)]
    web_root: Option<PathBuf>,
    /// Write the log here instead of stderr.
    #[arg(long)]
    log_file: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelKind {
    /// Random weights.
    Random,
    /// Scores only frame brightness: dark frames are the first label, bright
    /// frames the second.
    Brightness,
}

#[derive(clap::Args)]
struct GenModelArgs {
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated class labels.
    #[arg(long, value_delimiter = ',', default_values_t = ["dark".to_string(), "bright".to_string()])]
    labels: Vec<String>,
    #[arg(long, value_enum, default_value_t = ModelKind::Brightness)]
    kind: ModelKind,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn init_logging(log_file: Option<&PathBuf>) -> Result<(), String> {
    let level = match std::env::var(LOG_ENV) {
        Ok(v) => v
            .parse::<LevelFilter>()
            .map_err(|_| format!("{LOG_ENV}={v} is not one of off, error, warn, info, debug, trace"))?,
        Err(_) => LevelFilter::Info,
    };
    let mut builder = env_logger::Builder::new();
    // dependencies log request details at debug level, so keep them quiet
    builder
        .filter_level(level.min(LevelFilter::Warn))
        .filter_module("bm_server", level)
        .filter_module("bm_core", level)
        .filter_module("breakable_machine", level);
    if let Some(path) = log_file {
        let file = File::create(path).map_err(|e| format!("cannot create log file {}: {e}", path.display()))?;
        builder.target(env_logger::Target::Pipe(Box::new(file)));
    }
    builder.try_init().map_err(|e| e.to_string())
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
}

async fn serve(args: ServeArgs) -> Result<(), String> {
    init_logging(args.log_file.as_ref())?;
    let config = ServerConfig {
        dataset: args.dataset,
        bind: args.bind,
        port: args.port,
        advertise: args.advertise,
        session: SessionConfig {
            reveal: args.reveal,
            max_players: args.max_players,
            ..SessionConfig::default()
        },
        frame_rate: args.frame_rate,
        web_root: args.web_root,
        announce: true,
        ..ServerConfig::new(args.model)
    };
    let server = Server::bind(config).await.map_err(|e| e.to_string())?;
    println!("Breakable Machine listening on {}", server.local_addr());
    println!("Port:               {}", server.local_addr().port());
    println!("{}", bm_server::session_banner(server.first_session()));
    println!("Press Ctrl-C to end the game and stop the server.");
    server.run(shutdown_signal()).await;
    Ok(())
}

fn gen_model(args: GenModelArgs) -> Result<(), String> {
    if args.labels.len() < 2 {
        return Err("a model needs at least two labels".into());
    }
    let model = match args.kind {
        ModelKind::Random => random_model(args.seed, 56, &[8, 16, 32], args.labels.clone()),
        ModelKind::Brightness => {
            if args.labels.len() != 2 {
                return Err("the brightness model has exactly two labels".into());
            }
            let labels: Vec<&str> = args.labels.iter().map(String::as_str).collect();
            brightness_model(&labels, &[0.0, 4.0], &[0.0, -4.0])
        }
    };
    std::fs::write(&args.out, encode_model(&model)).map_err(|e| format!("cannot write {}: {e}", args.out.display()))?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Serve(args) => match tokio::runtime::Runtime::new() {
            Ok(rt) => rt.block_on(serve(args)),
            Err(e) => Err(e.to_string()),
        },
        Command::GenModel(args) => gen_model(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
