use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use serde::Serialize;
use stability_core::linalg::Rng;
use stability_core::sensitivity::{
    opnorm_inf_to_1_exhaustive, softmax, softmax_jacobian, theta_exact, theta_greedy, EXHAUSTIVE_MAX_LEN,
};

use crate::output::{float, print_json, CsvOut};
use crate::{Global, Status};

/// Greedy θ counts as equal to exact θ within this relative error, which
/// absorbs summation-order rounding only.
pub const GREEDY_MATCH_TOL: f64 = 1e-12;

pub const COLUMNS: [&str; 6] = ["L", "tau", "sample", "lhs", "rhs", "rel_err"];

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Sequence lengths (at most 20 each).
    #[arg(long, value_delimiter = ',', default_values_t = [2usize, 4, 8, 16])]
    pub lengths: Vec<usize>,
    /// Logit vectors per length.
    #[arg(long, default_value_t = 500)]
    pub samples: usize,
    /// Temperatures.
    #[arg(long, value_delimiter = ',', default_values_t = [0.5f64, 1.0, 2.0])]
    pub taus: Vec<f64>,
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 1e-12)]
    pub tol: f64,
    /// Also compare greedy θ against exact θ; any mismatch fails.
    #[arg(long)]
    pub greedy: bool,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Row {
    pub len: usize,
    pub tau: f64,
    pub sample: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub rel_err: f64,
    pub greedy_match: bool,
}

#[derive(Debug, Serialize)]
struct Summary {
    rows: usize,
    max_rel_err: f64,
    tol: f64,
    greedy_checked: bool,
    greedy_mismatches: usize,
    pass: bool,
}

fn rel_err(lhs: f64, rhs: f64) -> f64 {
    let diff = (lhs - rhs).abs();
    if rhs == 0.0 {
        diff
    } else {
        diff / rhs.abs()
    }
}

/// One row per (length, temperature, sample), sorted in that order. Each
/// length draws its logits from its own stream so that adding a length does
/// not change the others; all temperatures share the same logits.
pub fn sweep(lengths: &[usize], samples: usize, taus: &[f64], seed: u64) -> Result<Vec<Row>> {
    let mut lengths = lengths.to_vec();
    lengths.sort_unstable();
    lengths.dedup();
    if let Some(&too_long) = lengths.iter().find(|&&l| l > EXHAUSTIVE_MAX_LEN) {
        anyhow::bail!(
            "length {too_long} exceeds the exact-mode limit of {EXHAUSTIVE_MAX_LEN}; \
             use `stability theta` (greedy fallback) for longer rows"
        );
    }
    if lengths.first() == Some(&0) {
        anyhow::bail!("lengths must be >= 1");
    }
    let mut taus = taus.to_vec();
    taus.sort_by(f64::total_cmp);
    taus.dedup();
    let base = Rng::new(seed);
    let mut rows = Vec::with_capacity(lengths.len() * samples * taus.len());
    for &len in &lengths {
        let mut rng = base.fork(len as u64);
        let logits: Vec<Vec<f64>> = (0..samples).map(|_| rng.normal_vec(len)).collect();
        for &tau in &taus {
            for (sample, u) in logits.iter().enumerate() {
                let p = softmax(u, tau)?;
                let (lhs, _) = opnorm_inf_to_1_exhaustive(&softmax_jacobian(&p, tau)?)?;
                let exact = theta_exact(&p)?;
                let rhs = exact.theta / tau;
                rows.push(Row {
                    len,
                    tau,
                    sample,
                    lhs,
                    rhs,
                    rel_err: rel_err(lhs, rhs),
                    greedy_match: rel_err(theta_greedy(&p).theta, exact.theta) <= GREEDY_MATCH_TOL,
                });
            }
        }
    }
    Ok(rows)
}

pub fn run(args: &VerifyArgs, g: &Global) -> Result<Status> {
    let rows = sweep(&args.lengths, args.samples, &args.taus, g.seed)?;
    if let Some(path) = &args.out {
        let mut w = CsvOut::create(path, &[("seed", g.seed.to_string())], &COLUMNS)?;
        for r in &rows {
            w.row([
                r.len.to_string(),
                float(r.tau),
                r.sample.to_string(),
                float(r.lhs),
                float(r.rhs),
                float(r.rel_err),
            ])?;
        }
        w.finish().with_context(|| format!("writing {}", path.display()))?;
    }
    let max_rel_err = rows.iter().map(|r| r.rel_err).fold(0.0, f64::max);
    let mismatches = rows.iter().filter(|r| !r.greedy_match).count();
    let identity_pass = max_rel_err < args.tol;
    let pass = identity_pass && (!args.greedy || mismatches == 0);
    let summary = Summary {
        rows: rows.len(),
        max_rel_err,
        tol: args.tol,
        greedy_checked: args.greedy,
        greedy_mismatches: mismatches,
        pass,
    };
    if g.json {
        print_json(&summary)?;
    } else {
        println!("rows: {}", summary.rows);
        println!("max relative error: {max_rel_err:.3e} (tolerance {:.1e})", args.tol);
        if args.greedy {
            println!("greedy mismatches: {mismatches} of {}", rows.len());
            for r in rows.iter().filter(|r| !r.greedy_match).take(10) {
                println!("  L={} tau={} sample={}", r.len, r.tau, r.sample);
            }
        }
        println!("identity {}", if identity_pass { "PASS" } else { "FAIL" });
        if args.greedy {
            println!("greedy == exact {}", if mismatches == 0 { "PASS" } else { "FAIL" });
        }
    }
    Ok(Status::from_pass(pass))
}
