use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use bm_sim::{SimConfig, CREDENTIAL_ENV};
use clap::Parser;

/// Drive a Breakable Machine server with a scripted classroom.
#[derive(Parser)]
#[command(name = "bm-sim", version)]
struct Cli {
    /// Server base URL or the printed teacher URL (`.../#teacher=<credential>`).
    #[arg(long)]
    server: String,
    /// Scenario script.
    #[arg(long)]
    scenario: PathBuf,
    /// Where to write the JSON transcript.
    #[arg(long)]
    out: PathBuf,
    /// Teacher credential, when the server URL does not carry one.
    #[arg(long, env = CREDENTIAL_ENV, hide_env_values = true)]
    credential: Option<String>,
    /// Longest wait for any one server reply, in milliseconds.
    #[arg(long, default_value_t = 10_000)]
    timeout_ms: u64,
}

async fn run(cli: Cli) -> Result<bool, String> {
    let mut config = SimConfig::from_server_url(&cli.server).map_err(|e| e.to_string())?;
    if cli.credential.is_some() {
        config.teacher_credential = cli.credential;
    }
    config.timeout = Duration::from_millis(cli.timeout_ms);
    let text = std::fs::read_to_string(&cli.scenario).map_err(|e| format!("{}: {e}", cli.scenario.display()))?;
    let base = cli.scenario.parent().unwrap_or(Path::new("."));
    let scenario = bm_sim::parse(&text, base).map_err(|e| e.to_string())?;
    let transcript = bm_sim::run(config, &scenario).await;
    let json = serde_json::to_vec_pretty(&transcript).map_err(|e| e.to_string())?;
    std::fs::write(&cli.out, json).map_err(|e| format!("{}: {e}", cli.out.display()))?;
    for step in transcript.steps.iter().filter(|s| !s.ok) {
        eprintln!("line {}: {}: {}", step.line, step.step, step.error.as_deref().unwrap_or("failed"));
    }
    let ran = transcript.steps.len();
    println!(
        "{} of {} steps ran; transcript written to {}",
        ran,
        scenario.steps.len(),
        cli.out.display()
    );
    Ok(transcript.ok && ran == scenario.steps.len())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    match runtime.block_on(run(cli)) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
