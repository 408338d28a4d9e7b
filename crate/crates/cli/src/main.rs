//! `stability`: verification sweeps, bounds, gradient probes and reports.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or I/O error.

mod bound;
mod output;
mod probe;
mod report;
mod scaling;
mod theta;
mod verify;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use stability_core::{Arch, Convention};

pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Parser)]
#[command(name = "stability", version, about = "Transformer stability diagnostics")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Global {
    /// Emit machine-readable JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    /// RNG seed.
    #[arg(long, global = true, env = "STABILITY_SEED", default_value_t = DEFAULT_SEED)]
    pub seed: u64,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check ‖J_softmax‖_{∞→1} = θ(p)/τ on random logits.
    VerifySoftmax(verify::VerifyArgs),
    /// Balanced-mass factor of a preset or a JSON distribution.
    Theta(theta::ThetaArgs),
    /// Attention and full-layer Lipschitz bounds.
    Bound(bound::BoundArgs),
    /// Per-layer gradient norms through a random stack.
    Probe(probe::ProbeArgs),
    /// Depth scaling recommendation.
    Scaling(scaling::ScalingArgs),
    /// Temperature warmup schedule.
    Warmup(scaling::WarmupArgs),
    /// Markdown summary of CSV outputs.
    Report(report::ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ArchArg {
    #[value(name = "preln", alias = "pre_ln")]
    PreLn,
    #[value(name = "postln", alias = "post_ln")]
    PostLn,
    #[value(name = "deepnorm")]
    DeepNorm,
}

impl From<ArchArg> for Arch {
    fn from(a: ArchArg) -> Self {
        match a {
            ArchArg::PreLn => Arch::PreLn,
            ArchArg::PostLn => Arch::PostLn,
            ArchArg::DeepNorm => Arch::DeepNorm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ConventionArg {
    Plain,
    Deepnorm,
}

impl From<ConventionArg> for Convention {
    fn from(c: ConventionArg) -> Self {
        match c {
            ConventionArg::Plain => Convention::Plain,
            ConventionArg::Deepnorm => Convention::DeepNorm,
        }
    }
}

/// Result of a command that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
}

impl Status {
    pub fn from_pass(pass: bool) -> Self {
        if pass {
            Status::Pass
        } else {
            Status::Fail
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let g = &cli.global;
    let result = match cli.command {
        Command::VerifySoftmax(a) => verify::run(&a, g),
        Command::Theta(a) => theta::run(&a, g),
        Command::Bound(a) => bound::run(&a, g),
        Command::Probe(a) => probe::run(&a, g),
        Command::Scaling(a) => scaling::run_scaling(&a, g),
        Command::Warmup(a) => scaling::run_warmup(&a, g),
        Command::Report(a) => report::run(&a, g),
    };
    match result {
        Ok(Status::Pass) => ExitCode::SUCCESS,
        Ok(Status::Fail) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
