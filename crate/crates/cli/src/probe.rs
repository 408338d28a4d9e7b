use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use serde::Serialize;
use stability_core::blocks::run_probe;
use stability_core::linalg::Rng;
use stability_core::metrics::{sensitivity_proxy, RECORD_COLUMNS};
use stability_core::{Arch, GradientProbeResult, ModelConfig, SensitivityRecord};

use crate::output::{float, opt_float, print_json, CsvOut};
use crate::{ArchArg, Global, Status};

pub const COLUMNS: [&str; 4] = ["layer", "grad_rms", "x_rms", "identity_residue"];

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long, value_enum, default_value_t = ArchArg::PreLn)]
    pub arch: ArchArg,
    /// Number of layers N.
    #[arg(long, default_value_t = 12)]
    pub layers: usize,
    #[arg(long, default_value_t = 32)]
    pub d_model: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    /// Head width; d_model / heads when omitted.
    #[arg(long)]
    pub d_head: Option<usize>,
    /// Sequence length L.
    #[arg(long, default_value_t = 16)]
    pub seq_len: usize,
    /// FFN hidden width; 4·d_model when omitted.
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    pub tau: f64,
    /// Residual multiplier; (2N)^(-1/4) for deepnorm when omitted.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, default_value_t = 0.02)]
    pub init_std: f64,
    /// Extra factor on the attention projection init std.
    #[arg(long, default_value_t = 1.0)]
    pub proj_scale: f64,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    /// Also write per-layer sensitivity records here.
    #[arg(long)]
    pub metrics_out: Option<PathBuf>,
}

impl ProbeArgs {
    pub fn config(&self, seed: u64) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::new(self.arch.into(), self.layers, self.d_model, self.heads, self.seq_len);
        if let Some(dh) = self.d_head {
            cfg.d_head = dh;
        }
        if let Some(dff) = self.d_ff {
            cfg.d_ff = dff;
        }
        if let Some(a) = self.alpha {
            cfg.alpha = a;
        }
        cfg.tau = self.tau;
        cfg.init_std = self.init_std;
        cfg.proj_scale = self.proj_scale;
        cfg.seed = seed;
        cfg.validate()?;
        if cfg.n_layers == 0 {
            anyhow::bail!("--layers must be >= 1");
        }
        Ok(cfg)
    }
}

#[derive(Debug, Serialize)]
struct Output<'a> {
    #[serde(flatten)]
    result: &'a GradientProbeResult,
    first_last_ratio: f64,
    records: Option<&'a [SensitivityRecord]>,
}

fn metadata(cfg: &ModelConfig) -> Vec<(&'static str, String)> {
    vec![
        ("arch", cfg.arch.to_string()),
        ("seed", cfg.seed.to_string()),
        ("n_layers", cfg.n_layers.to_string()),
        ("d_model", cfg.d_model.to_string()),
        ("n_heads", cfg.n_heads.to_string()),
        ("d_head", cfg.d_head.to_string()),
        ("d_ff", cfg.d_ff.to_string()),
        ("seq_len", cfg.seq_len.to_string()),
        ("tau", float(cfg.tau)),
        ("alpha", float(cfg.alpha)),
        ("init_std", float(cfg.init_std)),
    ]
}

pub fn write_probe_csv(path: &Path, cfg: &ModelConfig, r: &GradientProbeResult) -> Result<()> {
    let mut w = CsvOut::create(path, &metadata(cfg), &COLUMNS)?;
    for l in 0..r.grad_rms.len() {
        w.row([
            l.to_string(),
            float(r.grad_rms[l]),
            float(r.x_rms[l]),
            opt_float(r.identity_residue[l]),
        ])?;
    }
    w.finish().with_context(|| format!("writing {}", path.display()))
}

pub fn write_records_csv(path: &Path, records: &[SensitivityRecord]) -> Result<()> {
    let mut w = CsvOut::create(path, &[("g_convention", "max_over_heads".to_string())], &RECORD_COLUMNS)?;
    for r in records {
        w.row([
            r.step.to_string(),
            r.layer.to_string(),
            r.arch.to_string(),
            r.seed.to_string(),
            float(r.theta_over_tau),
            float(r.b_bar),
            float(r.g),
            float(r.s),
            opt_float(r.grad_rms),
            r.theta_method.as_str().to_string(),
        ])?;
    }
    w.finish().with_context(|| format!("writing {}", path.display()))
}

pub fn run(args: &ProbeArgs, g: &Global) -> Result<Status> {
    let cfg = args.config(g.seed)?;
    let run = run_probe(&cfg, &mut Rng::new(g.seed))?;
    let ratio = run.result.first_last_ratio().expect("at least one layer");
    if let Some(path) = &args.out {
        write_probe_csv(path, &cfg, &run.result)?;
    }
    let records = match &args.metrics_out {
        Some(path) => {
            let recs = sensitivity_proxy(&run.trace, &run.weights, &cfg, Some(&run.result.grad_rms), 0)?;
            write_records_csv(path, &recs)?;
            Some(recs)
        }
        None => None,
    };
    if g.json {
        print_json(&Output {
            result: &run.result,
            first_last_ratio: ratio,
            records: records.as_deref(),
        })?;
    } else {
        println!(
            "{} N={} d={} H={} L={} alpha={:.6} seed={}",
            cfg.arch, cfg.n_layers, cfg.d_model, cfg.n_heads, cfg.seq_len, cfg.alpha, cfg.seed
        );
        for (l, v) in run.result.grad_rms.iter().enumerate() {
            println!("  layer {l:>3}: grad_rms {v:.6e}  x_rms {:.6e}", run.result.x_rms[l]);
        }
        println!("first/last gradient ratio: {ratio:.6}");
        if cfg.arch == Arch::PreLn {
            let max_res = run.result.identity_residue.iter().flatten().copied().fold(0.0, f64::max);
            println!("max identity residue: {max_res:.6e}");
        }
    }
    Ok(Status::Pass)
}
