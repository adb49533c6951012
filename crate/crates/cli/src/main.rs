mod commands;
mod transcript;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::commands::Failure;

#[derive(Parser)]
#[command(name = "learnflow", version, about = "Design, run and replay instructional conversation flows")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a flow document and print its validation report.
    Validate { flow: PathBuf },
    /// Run a session in the terminal.
    Run(RunArgs),
    /// Print the transcript of a session log and verify it replays.
    Replay {
        log: PathBuf,
        /// Show only what this slot could see.
        #[arg(long = "as")]
        viewer: Option<String>,
        /// Flow document, when the log has no session manifest beside it.
        #[arg(long)]
        flow: Option<PathBuf>,
        /// Materials directory the session ran with.
        #[arg(long)]
        materials: Option<PathBuf>,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "learnflow-data")]
        data_dir: PathBuf,
        #[command(flatten)]
        provider: ProviderArgs,
        #[arg(long)]
        materials: Option<PathBuf>,
    },
    /// Write the bundled exemplar flows to a directory.
    Examples {
        dir: PathBuf,
        /// Overwrite files in a non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Fill a bundled template's placeholders and print the flow.
    Instantiate {
        /// drill, debate or collaborate
        template: String,
        /// `name=value`, repeatable.
        #[arg(long = "bind", value_name = "NAME=VALUE")]
        bindings: Vec<String>,
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    flow: PathBuf,
    #[command(flatten)]
    provider: ProviderArgs,
    /// JSON array of `{slot, content}`; without it turns are read from stdin.
    #[arg(long)]
    inputs: Option<PathBuf>,
    #[arg(long, default_value = "learnflow-data")]
    data_dir: PathBuf,
    /// Directory of `.txt`/`.md` reference materials.
    #[arg(long)]
    materials: Option<PathBuf>,
    /// `slot=human|ai` for alternative slots, repeatable.
    #[arg(long = "toggle", value_name = "SLOT=SOURCE")]
    toggles: Vec<String>,
    /// Defaults to `<flow id>-<n>`, the first unused in the data directory.
    #[arg(long)]
    session_id: Option<String>,
    /// Do not print events while running.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Args)]
struct ProviderArgs {
    #[arg(long, value_enum, default_value_t = ProviderKind::Stub)]
    provider: ProviderKind,
    /// Stub script: JSON array of `{match?, response}`.
    #[arg(long)]
    script: Option<PathBuf>,
    #[arg(long)]
    base_url: Option<String>,
    #[arg(long)]
    model: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProviderKind {
    Stub,
    Http,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Validate { flow } => commands::validate(&flow),
        Command::Run(args) => commands::run(args),
        Command::Replay {
            log,
            viewer,
            flow,
            materials,
        } => commands::replay(&log, viewer.as_deref(), flow.as_deref(), materials.as_deref()),
        Command::Serve {
            port,
            data_dir,
            provider,
            materials,
        } => commands::serve(port, data_dir, &provider, materials.as_deref()),
        Command::Examples { dir, force } => commands::examples(&dir, force),
        Command::Instantiate {
            template,
            bindings,
            output,
        } => commands::instantiate(&template, &bindings, output.as_deref()),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.downcast_ref::<Failure>().map_or(2, |f| f.0))
        }
    }
}
