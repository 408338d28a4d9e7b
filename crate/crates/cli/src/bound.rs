use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use serde::Serialize;
use stability_core::attention::{mha_empirical_lipschitz, mha_lipschitz_bound, mha_worst_case_bound, input_magnitude};
use stability_core::blocks::{layer_empirical_lipschitz, layer_lipschitz_bound, stack_forward, LayerBound};
use stability_core::linalg::{Matrix, Rng, DEFAULT_SPECTRAL_TOL};
use stability_core::normlayer::layernorm_rows;
use stability_core::{Arch, MhaBoundBreakdown, ModelConfig, ModelWeights};

use crate::output::{float, opt_float, print_json, CsvOut};
use crate::{ArchArg, Global, Status};

pub const COLUMNS: [&str; 13] = [
    "layer",
    "arch",
    "b_u",
    "theta_tilde_max",
    "l_mha",
    "l_ffn",
    "lip_ln1",
    "lip_ln2",
    "total",
    "mha_empirical_max",
    "layer_empirical_max",
    "trials",
    "pass",
];

#[derive(Debug, Args)]
pub struct BoundArgs {
    /// Model config JSON; a 2-layer pre-LN toy model when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Weights JSON; random Gaussian init from --seed when omitted.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Override the config's architecture.
    #[arg(long, value_enum)]
    pub arch: Option<ArchArg>,
    /// Sample this many perturbation pairs per layer and compare with the bounds.
    #[arg(long)]
    pub check: Option<usize>,
    /// Use θ̃ = 1 for the attention bound instead of the realized attention.
    #[arg(long)]
    pub worst_case: bool,
    /// Row RMS of the random input.
    #[arg(long, default_value_t = 1.0)]
    pub input_rms: f64,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct LayerReport {
    layer: usize,
    mha: MhaBoundBreakdown,
    /// Full-layer bound for each architecture sharing these weights.
    layer_bounds: Vec<LayerBound>,
    mha_empirical_max: Option<f64>,
    layer_empirical_max: Option<f64>,
    violations: Option<usize>,
}

#[derive(Debug, Serialize)]
struct Report {
    arch: Arch,
    seed: u64,
    worst_case: bool,
    trials: Option<usize>,
    layers: Vec<LayerReport>,
    pass: Option<bool>,
}

fn default_config() -> ModelConfig {
    let mut cfg = ModelConfig::new(Arch::PreLn, 2, 16, 2, 8);
    cfg.init_std = 0.1;
    cfg
}

fn with_arch(cfg: &ModelConfig, arch: Arch) -> ModelConfig {
    let mut c = cfg.clone();
    if arch != cfg.arch {
        c.arch = arch;
        c.alpha = match arch {
            Arch::DeepNorm => stability_core::scaling::deepnorm_alpha(cfg.n_layers.max(1)),
            _ => 1.0,
        };
    }
    c
}

fn unit_rows(rows: usize, cols: usize, rms: f64, rng: &mut Rng) -> Matrix {
    let mut m = rng.normal_matrix(rows, cols, 1.0);
    for i in 0..rows {
        let r = m.row_mut(i);
        let n = (r.iter().map(|v| v * v).sum::<f64>() / cols as f64).sqrt();
        r.iter_mut().for_each(|v| *v *= rms / n);
    }
    m
}

pub fn run(args: &BoundArgs, g: &Global) -> Result<Status> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            ModelConfig::from_json(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => default_config(),
    };
    if let Some(a) = args.arch {
        cfg = with_arch(&cfg, a.into());
    }
    cfg.validate()?;
    if !(args.input_rms > 0.0 && args.input_rms.is_finite()) {
        anyhow::bail!("--input-rms must be > 0");
    }
    let mut rng = Rng::new(g.seed);
    let weights = match &args.weights {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            ModelWeights::from_json(&text, &cfg).with_context(|| format!("loading {}", path.display()))?
        }
        None => ModelWeights::random(&cfg, &mut rng),
    };
    let x0 = unit_rows(cfg.seq_len, cfg.d_model, args.input_rms, &mut rng);
    let trace = stack_forward(&x0, &weights, &cfg)?;

    let mut archs = vec![Arch::PreLn, Arch::PostLn];
    if cfg.arch == Arch::DeepNorm {
        archs.push(Arch::DeepNorm);
    }
    let mut layers = Vec::with_capacity(cfg.n_layers);
    let mut all_pass = true;
    for (l, w) in weights.layers.iter().enumerate() {
        let x = &trace[l];
        let u = if cfg.arch.is_pre_ln() { layernorm_rows(x, &w.ln1)? } else { x.clone() };
        let mha = if args.worst_case {
            mha_worst_case_bound(&w.mha, input_magnitude(&u)?, cfg.tau, DEFAULT_SPECTRAL_TOL)?
        } else {
            mha_lipschitz_bound(&u, &w.mha, cfg.tau, DEFAULT_SPECTRAL_TOL)?
        };
        let first_input = (l == 0).then(|| args.input_rms * (cfg.d_model as f64).sqrt());
        let layer_bounds = archs
            .iter()
            .map(|&a| layer_lipschitz_bound(w, &with_arch(&cfg, a), first_input, DEFAULT_SPECTRAL_TOL))
            .collect::<stability_core::Result<Vec<_>>>()?;

        let (mut mha_emp, mut layer_emp, mut violations) = (None, None, None);
        if let Some(trials) = args.check {
            let mut check_rng = Rng::new(g.seed).fork(l as u64);
            let m = mha_empirical_lipschitz(&u, &w.mha, cfg.tau, trials, &mut check_rng)?;
            let f = layer_empirical_lipschitz(x, w, &cfg, trials, &mut check_rng)?;
            let v = m.violations + f.violations;
            all_pass &= v == 0;
            mha_emp = Some(m.max_ratio);
            layer_emp = Some(f.max_ratio);
            violations = Some(v);
        }
        layers.push(LayerReport {
            layer: l,
            mha,
            layer_bounds,
            mha_empirical_max: mha_emp,
            layer_empirical_max: layer_emp,
            violations,
        });
    }
    let pass = args.check.map(|_| all_pass);

    if let Some(path) = &args.out {
        let mut w = CsvOut::create(
            path,
            &[("arch", cfg.arch.to_string()), ("seed", g.seed.to_string())],
            &COLUMNS,
        )?;
        for lr in &layers {
            for b in &lr.layer_bounds {
                let own = b.arch == cfg.arch;
                let theta_max = b.mha.theta_tilde.iter().copied().fold(0.0, f64::max);
                w.row([
                    lr.layer.to_string(),
                    b.arch.to_string(),
                    float(b.mha.b_u),
                    float(theta_max),
                    float(b.l_mha),
                    float(b.l_ffn),
                    float(b.lip_ln1),
                    float(b.lip_ln2),
                    float(b.total),
                    opt_float(lr.mha_empirical_max.filter(|_| own)),
                    opt_float(lr.layer_empirical_max.filter(|_| own)),
                    args.check.filter(|_| own).map(|t| t.to_string()).unwrap_or_default(),
                    lr.violations.filter(|_| own).map(|v| (v == 0).to_string()).unwrap_or_default(),
                ])?;
            }
        }
        w.finish().with_context(|| format!("writing {}", path.display()))?;
    }

    let report = Report {
        arch: cfg.arch,
        seed: g.seed,
        worst_case: args.worst_case,
        trials: args.check,
        layers,
        pass,
    };
    if g.json {
        print_json(&report)?;
    } else {
        print_text(&report, &cfg);
    }
    Ok(Status::from_pass(pass.unwrap_or(true)))
}

fn print_text(r: &Report, cfg: &ModelConfig) {
    println!(
        "arch {} | N={} H={} d={} d_h={} L={} tau={} alpha={}",
        cfg.arch, cfg.n_layers, cfg.n_heads, cfg.d_model, cfg.d_head, cfg.seq_len, cfg.tau, cfg.alpha
    );
    for lr in &r.layers {
        let m = &lr.mha;
        println!(
            "layer {}: MHA bound {:.6e} (B_U {:.4}, |W_O| {:.4}{})",
            lr.layer,
            m.total,
            m.b_u,
            m.wo_norm,
            if r.worst_case { ", theta=1" } else { "" }
        );
        for h in 0..m.value_pathway.len() {
            println!(
                "  head {h}: value {:.6e}  attention {:.6e}  (theta {:.6}, phi {:.6e})",
                m.value_pathway[h], m.attn_pathway[h], m.theta_tilde[h], m.phi[h]
            );
        }
        for b in &lr.layer_bounds {
            println!(
                "  {} layer bound {:.6e} = f(Lip LN {:.4e}/{:.4e}, L_MHA {:.6e}, L_FFN {:.6e})",
                b.arch, b.total, b.lip_ln1, b.lip_ln2, b.l_mha, b.l_ffn
            );
        }
        if let (Some(a), Some(b)) = (lr.mha_empirical_max, lr.layer_empirical_max) {
            println!("  empirical max ratio: MHA {a:.6e}, layer {b:.6e}");
        }
    }
    if let Some(pass) = r.pass {
        println!("empirical <= bound: {}", if pass { "PASS" } else { "FAIL" });
    }
}
