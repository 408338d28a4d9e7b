use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use serde::Serialize;
use stability_core::sensitivity::{
    regime_distribution, theta_auto, theta_exact, theta_greedy, theta_regime, Regime, MEET_IN_MIDDLE_MAX_LEN,
};
use stability_core::{ProbDist, ThetaResult};

use crate::output::print_json;
use crate::{Global, Status};

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Method {
    Auto,
    Exact,
    Greedy,
}

#[derive(Debug, Args)]
pub struct ThetaArgs {
    /// `uniform:L`, `onehot:L`, `topk:k:L`, `peaked:kappa:L`, or a JSON file `{"p": [...]}`.
    pub input: String,
    #[arg(long, value_enum, default_value_t = Method::Auto)]
    pub method: Method,
}

#[derive(Debug, Serialize)]
struct Output {
    input: String,
    len: usize,
    #[serde(flatten)]
    result: ThetaResult,
    /// Closed-form value for presets (an upper bound for `peaked`).
    closed_form: Option<f64>,
}

fn parse_field<T: std::str::FromStr>(preset: &str, field: &str, name: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    field
        .parse()
        .map_err(|e| anyhow::anyhow!("preset {preset:?}: bad {name} {field:?}: {e}"))
}

fn parse_preset(s: &str) -> Result<Option<(Regime, usize)>> {
    let parts: Vec<&str> = s.split(':').collect();
    let regime = match parts.as_slice() {
        ["uniform", l] => {
            let len = parse_field(s, l, "length")?;
            (Regime::Uniform { len }, len)
        }
        ["onehot", l] => (Regime::OneHot, parse_field(s, l, "length")?),
        ["topk", k, l] => (Regime::TopKUniform { k: parse_field(s, k, "k")? }, parse_field(s, l, "length")?),
        ["peaked", kappa, l] => (
            Regime::Peaked { kappa: parse_field(s, kappa, "kappa")? },
            parse_field(s, l, "length")?,
        ),
        [name, ..] if matches!(*name, "uniform" | "onehot" | "topk" | "peaked") => {
            bail!("preset {s:?} has the wrong number of fields (uniform:L, onehot:L, topk:k:L, peaked:kappa:L)")
        }
        _ => return Ok(None),
    };
    Ok(Some(regime))
}

pub fn run(args: &ThetaArgs, g: &Global) -> Result<Status> {
    let (p, closed_form) = match parse_preset(&args.input)? {
        Some((regime, len)) => (regime_distribution(regime, len)?, Some(theta_regime(regime)?)),
        None => {
            let path = Path::new(&args.input);
            if !path.exists() {
                bail!(
                    "{:?} is neither a preset (uniform:L, onehot:L, topk:k:L, peaked:kappa:L) nor a file",
                    args.input
                );
            }
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let p: ProbDist = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            (p, None)
        }
    };
    let result = match args.method {
        Method::Auto => theta_auto(&p, MEET_IN_MIDDLE_MAX_LEN),
        Method::Exact => theta_exact(&p)?,
        Method::Greedy => theta_greedy(&p),
    };
    let out = Output {
        input: args.input.clone(),
        len: p.len(),
        result,
        closed_form,
    };
    if g.json {
        print_json(&out)?;
    } else {
        println!("theta: {}", out.result.theta);
        println!("subset mass: {}", out.result.subset_mass);
        println!("subset: {:?}", out.result.best_subset);
        println!("method: {}", out.result.method.as_str());
        if let Some(c) = closed_form {
            println!("closed form: {c}");
        }
    }
    Ok(Status::Pass)
}
