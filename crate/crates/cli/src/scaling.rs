use anyhow::Result;
use clap::Args;
use serde::Serialize;
use stability_core::scaling::{
    recommend_scaling_with, temperature_warmup_schedule, verify_boundedness, BoundednessTable,
};
use stability_core::{Convention, ScalingRecommendation};

use crate::output::print_json;
use crate::{ConventionArg, Global, Status};

#[derive(Debug, Args)]
pub struct ScalingArgs {
    /// Multiplicative maps in the sensitive pathway (4 for Q, K, V, O).
    #[arg(long, default_value_t = 4)]
    pub m: usize,
    /// Depth N.
    #[arg(long = "layers", short = 'n')]
    pub n_layers: usize,
    #[arg(long, value_enum, default_value_t = ConventionArg::Plain)]
    pub convention: ConventionArg,
    /// Residual sublayers per layer multiplying N (2 for deepnorm, 1 for plain by default).
    #[arg(long)]
    pub sublayers: Option<usize>,
    /// Also tabulate depth products over these N values.
    #[arg(long, value_delimiter = ',')]
    pub grid: Vec<usize>,
    /// Per-layer sensitivity constant for the depth products.
    #[arg(long, default_value_t = 1.0)]
    pub c0: f64,
}

#[derive(Debug, Serialize)]
struct ScalingOutput {
    recommendation: ScalingRecommendation,
    boundedness: Option<BoundednessTable>,
}

pub fn run_scaling(args: &ScalingArgs, g: &Global) -> Result<Status> {
    let convention: Convention = args.convention.into();
    let sublayers = args.sublayers.unwrap_or(convention.sublayers_per_layer());
    let rec = recommend_scaling_with(args.m, args.n_layers, convention, sublayers)?;
    let table = if args.grid.is_empty() {
        None
    } else {
        Some(verify_boundedness(args.m, args.c0, &args.grid)?)
    };
    let status = Status::from_pass(table.as_ref().is_none_or(BoundednessTable::passed));
    if g.json {
        print_json(&ScalingOutput {
            recommendation: rec,
            boundedness: table,
        })?;
        return Ok(status);
    }
    println!("m={} N={} convention={} sublayers={}", rec.m, rec.n_layers, rec.convention, rec.sublayers_per_layer);
    println!("beta: {}", rec.beta);
    println!("alpha: {}", rec.alpha);
    println!("{}", rec.rationale);
    if let Some(t) = &table {
        println!("\n{:>8}  {:>22}  {:>22}", "N", "critical", "super-critical");
        for r in &t.rows {
            println!("{:>8}  {:>22.12}  {:>22.6e}", r.n_layers, r.critical, r.super_critical);
        }
        println!("critical <= e^C0 ({:.6}): {}", t.cap, t.critical_bounded);
        println!("super-critical strictly increasing: {}", t.super_monotone);
        println!("super-critical > 10x critical at largest N: {}", t.super_exceeds_tenfold);
    }
    Ok(status)
}

#[derive(Debug, Args)]
pub struct WarmupArgs {
    #[arg(long)]
    pub tau_init: f64,
    #[arg(long)]
    pub tau_final: f64,
    /// Warmup length in steps.
    #[arg(long)]
    pub steps: usize,
    /// Print every k-th step; steps/10 when omitted.
    #[arg(long)]
    pub every: Option<usize>,
}

#[derive(Debug, Serialize)]
struct WarmupRow {
    step: usize,
    tau: f64,
}

pub fn run_warmup(args: &WarmupArgs, g: &Global) -> Result<Status> {
    let every = args.every.unwrap_or((args.steps / 10).max(1)).max(1);
    let mut steps: Vec<usize> = (0..=args.steps).step_by(every).collect();
    if steps.last() != Some(&args.steps) {
        steps.push(args.steps);
    }
    let rows = steps
        .into_iter()
        .map(|step| {
            Ok(WarmupRow {
                step,
                tau: temperature_warmup_schedule(args.tau_init, args.tau_final, args.steps, step)?,
            })
        })
        .collect::<stability_core::Result<Vec<_>>>()?;
    if g.json {
        print_json(&rows)?;
    } else {
        println!("{:>8}  {:>12}", "step", "tau");
        for r in &rows {
            println!("{:>8}  {:>12.6}", r.step, r.tau);
        }
    }
    Ok(Status::Pass)
}
