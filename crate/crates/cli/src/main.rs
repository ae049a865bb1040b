use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use scepsim::group::Backend;
use scepsim::scep::ScepVariant;
use scepsim::sim::world::WorldConfig;

mod pki;
mod sim;

#[derive(Parser, Debug)]
#[command(name = "scepsim", version, about = "Screening protocol simulator")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, global = true, value_enum, default_value_t = BackendArg::Test)]
    pub backend: BackendArg,
    /// Output path (file prefix for pki commands, transcript file otherwise).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = VariantArg::Scep)]
    pub scep_variant: VariantArg,
    #[arg(long, global = true, value_enum, default_value_t = Switch::Off)]
    pub resumption: Switch,
    #[arg(long, global = true, value_enum, default_value_t = Switch::Off)]
    pub bind_responses: Switch,
    /// Sequences per 24 hours allowed to a synthesizer token.
    #[arg(long, global = true, default_value_t = 100)]
    pub rate_limit: u64,
    #[arg(long, global = true, default_value_t = 2)]
    pub threshold: usize,
    #[arg(long, global = true, default_value_t = 3)]
    pub keyservers: usize,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendArg {
    Test,
    Prod,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum VariantArg {
    Scep,
    ScepPlus,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        self == Switch::On
    }
}

impl Common {
    fn validate(&self) -> Result<(), CliError> {
        if self.keyservers == 0 {
            return Err(CliError::Usage("--keyservers must be at least 1".into()));
        }
        if self.threshold == 0 || self.threshold > self.keyservers {
            return Err(CliError::Usage(format!(
                "--threshold must be in 1..={} (got {})",
                self.keyservers, self.threshold
            )));
        }
        Ok(())
    }

    pub fn world(&self) -> WorldConfig {
        WorldConfig {
            backend: match self.backend {
                BackendArg::Test => Backend::Test,
                BackendArg::Prod => Backend::Prod,
            },
            variant: match self.scep_variant {
                VariantArg::Scep => ScepVariant::Scep,
                VariantArg::ScepPlus => ScepVariant::ScepPlus,
            },
            resumption: self.resumption.on(),
            binding: self.bind_responses.on(),
            rate_limit: self.rate_limit,
            threshold: self.threshold,
            keyservers: self.keyservers,
            ..WorldConfig::default()
        }
    }

    /// Generator for one command. The command label and output path are
    /// mixed in so that two artifacts made under the same seed differ.
    pub fn rng(&self, label: &str) -> ChaCha20Rng {
        let out = self.out.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let seed = scepsim::crypto::hash_fields(&[&self.seed.to_be_bytes()[..], label.as_bytes(), out.as_bytes()]);
        ChaCha20Rng::from_seed(seed)
    }

    pub fn out_prefix(&self) -> Result<&PathBuf, CliError> {
        self.out.as_ref().ok_or_else(|| CliError::Usage("--out is required".into()))
    }
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Certificates, tokens and revocation lists.
    #[command(subcommand)]
    Pki(pki::PkiCmd),
    /// Keyed hashed hazard databases.
    #[command(subcommand)]
    Hdb(sim::HdbCmd),
    /// One screening query against a fresh world.
    Run(sim::RunArgs),
    /// Scripted attack against a fresh world.
    Attack(sim::AttackArgs),
    /// Shipped or user-written scenario scripts.
    #[command(subcommand)]
    Scenario(sim::ScenarioCmd),
    /// Pretty-prints a JSONL transcript.
    Transcript(sim::TranscriptArgs),
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    /// Printed by name alone.
    Named(&'static str, String),
    Io(String),
    Invalid(String),
}

impl From<scepsim::pki::PkiError> for CliError {
    fn from(e: scepsim::pki::PkiError) -> Self {
        CliError::Named(e.name(), e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

/// Whether the command reached the result its flags call for.
pub type Outcome = bool;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = cli.common.validate().and_then(|()| match cli.command {
        Cmd::Pki(c) => pki::run(&cli.common, c),
        Cmd::Hdb(c) => sim::hdb(&cli.common, c),
        Cmd::Run(a) => sim::run(&cli.common, a),
        Cmd::Attack(a) => sim::attack(&cli.common, a),
        Cmd::Scenario(c) => sim::scenario(&cli.common, c),
        Cmd::Transcript(a) => sim::transcript(a),
    });
    match result {
        Ok(true) => {
            println!("OUTCOME: expected");
            ExitCode::SUCCESS
        }
        Ok(false) => {
            println!("OUTCOME: unexpected");
            ExitCode::FAILURE
        }
        Err(e) => {
            let code = match &e {
                CliError::Named(name, detail) => {
                    eprintln!("{name}");
                    eprintln!("  {detail}");
                    1
                }
                CliError::Usage(m) => {
                    eprintln!("usage error: {m}");
                    2
                }
                CliError::Io(m) => {
                    eprintln!("io error: {m}");
                    1
                }
                CliError::Invalid(m) => {
                    eprintln!("error: {m}");
                    1
                }
            };
            println!("OUTCOME: error");
            ExitCode::from(code)
        }
    }
}
