//! `pseudovault` command-line front end.
//!
//! Exit codes: 0 success with nothing to report, 1 findings or anomalies
//! were reported, 2 operational error (`CODE: message` on stderr).

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "pseudovault",
    version,
    about = "Integrity checks and reversible pseudonymisation for health record tables"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Default)]
pub enum Format {
    #[default]
    Text,
    Csv,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check 16-digit healthcare identifiers.
    ValidateHi {
        #[arg(long, value_enum, default_value_t)]
        format: Format,
        #[arg(required = true)]
        ids: Vec<String>,
    },
    /// Build an identifier from issuer and account digits.
    GenHi {
        #[arg(long)]
        iin: String,
        #[arg(long)]
        iai: String,
    },
    /// Report coded-entry and data-entry risks.
    Lint {
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t)]
        format: Format,
        csv: PathBuf,
    },
    /// Group records by identifier and report mismatches.
    Link {
        #[arg(long)]
        schema: PathBuf,
        #[arg(long, default_value = "Healthcare Identifier")]
        hi_column: String,
        #[arg(long, default_value = "Name")]
        name_column: String,
        #[arg(long, value_enum, default_value_t)]
        format: Format,
        csv: PathBuf,
    },
    /// Replace identifying columns with pseudonyms.
    Pseudo(PseudoArgs),
    /// Restore original values of a release.
    Reid {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Resolve tokens as of this epoch.
        #[arg(long)]
        epoch: Option<u64>,
        /// Defaults to the release path with a `.manifest` extension.
        #[arg(long)]
        manifest: Option<PathBuf>,
        released: PathBuf,
    },
    /// Reissue all active pseudonyms of the given columns.
    Rotate {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        columns: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Mapping store maintenance.
    Store {
        #[command(subcommand)]
        command: StoreCommand,
    },
}

#[derive(Debug, Args)]
pub struct PseudoArgs {
    #[arg(long)]
    schema: PathBuf,
    #[arg(long)]
    policy: PathBuf,
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the policy seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Warn instead of failing on invalid identifiers.
    #[arg(long)]
    allow_invalid_hi: bool,
    csv: PathBuf,
}

#[derive(Debug, Subcommand)]
enum StoreCommand {
    /// Create an empty store.
    Init {
        #[arg(long)]
        store: PathBuf,
    },
    /// Print the active mapping tables.
    Export {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, value_enum, default_value_t)]
        format: Format,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::ValidateHi { format, ids } => commands::validate_hi(&ids, format),
        Command::GenHi { iin, iai } => commands::gen_hi(&iin, &iai),
        Command::Lint {
            schema,
            vocab,
            config,
            format,
            csv,
        } => commands::lint(&schema, &vocab, config.as_deref(), &csv, format),
        Command::Link {
            schema,
            hi_column,
            name_column,
            format,
            csv,
        } => commands::link(&schema, &hi_column, &name_column, &csv, format),
        Command::Pseudo(args) => commands::pseudo(&args),
        Command::Reid {
            store,
            out,
            epoch,
            manifest,
            released,
        } => commands::reid(&store, &out, epoch, manifest.as_deref(), &released),
        Command::Rotate { store, columns, seed } => commands::rotate(&store, &columns, seed),
        Command::Store { command } => match command {
            StoreCommand::Init { store } => commands::store_init(&store),
            StoreCommand::Export { store, format } => commands::store_export(&store, format),
        },
    };
    match result {
        Ok(outcome) => outcome.exit_code(),
        Err(e) => {
            eprintln!("{}: {}", e.code, e.message);
            ExitCode::from(2)
        }
    }
}
