use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::Serialize;
use sha2::{Digest, Sha256};
use stability_core::metrics::{coefficient_of_variation, RECORD_COLUMNS};

use crate::output::{print_json, SCHEMA_VERSION};
use crate::{bound, probe, verify, Global, Status};

/// Identity rows count as verified below this relative error.
pub const IDENTITY_TOL: f64 = 1e-12;

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// CSV files written by verify-softmax, bound, or probe (`--out` / `--metrics-out`).
    pub inputs: Vec<PathBuf>,
    /// Write the markdown here instead of stdout.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
enum Kind {
    Verify,
    Bound,
    Probe,
    Metrics,
}

struct Table {
    path: String,
    sha256: String,
    kind: Kind,
    meta: BTreeMap<String, String>,
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn col(&self, name: &str) -> usize {
        self.header.iter().position(|h| h == name).expect("header checked on load")
    }

    fn floats(&self, name: &str) -> Result<Vec<f64>> {
        let c = self.col(name);
        self.rows
            .iter()
            .enumerate()
            .filter(|(_, r)| !r[c].is_empty())
            .map(|(i, r)| {
                r[c].parse::<f64>()
                    .with_context(|| format!("{}: row {}: column {name}: bad number {:?}", self.path, i + 1, r[c]))
            })
            .collect()
    }
}

fn detect(path: &str, header: &[String]) -> Result<Kind> {
    let known: [(Kind, &[&str]); 4] = [
        (Kind::Verify, &verify::COLUMNS),
        (Kind::Bound, &bound::COLUMNS),
        (Kind::Probe, &probe::COLUMNS),
        (Kind::Metrics, &RECORD_COLUMNS),
    ];
    for (kind, cols) in known {
        if header.iter().map(String::as_str).eq(cols.iter().copied()) {
            return Ok(kind);
        }
    }
    let all: Vec<&str> = known.iter().flat_map(|(_, c)| c.iter().copied()).collect();
    match header.iter().find(|h| !all.contains(&h.as_str())) {
        Some(bad) => bail!("{path}: unrecognized column {bad:?}"),
        None => bail!("{path}: header {header:?} matches no known CSV layout"),
    }
}

fn load(path: &Path) -> Result<Table> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let sha256: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
    let text = String::from_utf8(bytes).with_context(|| format!("{} is not UTF-8", path.display()))?;
    let name = path.display().to_string();

    let mut meta = BTreeMap::new();
    for line in text.lines().take_while(|l| l.starts_with('#')) {
        if let Some((k, v)) = line.trim_start_matches('#').trim().split_once('=') {
            meta.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    match meta.get("schema_version") {
        Some(v) if v == &SCHEMA_VERSION.to_string() => {}
        Some(v) => bail!("{name}: unsupported schema_version {v}"),
        None => bail!("{name}: missing `# schema_version` line"),
    }

    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .with_context(|| format!("{name}: reading header"))?
        .iter()
        .map(str::to_string)
        .collect();
    let kind = detect(&name, &header)?;
    let rows = reader
        .records()
        .map(|r| r.map(|r| r.iter().map(str::to_string).collect()))
        .collect::<Result<Vec<Vec<String>>, _>>()
        .with_context(|| format!("{name}: reading rows"))?;
    Ok(Table {
        path: name,
        sha256,
        kind,
        meta,
        header,
        rows,
    })
}

#[derive(Debug, Serialize)]
struct InputSummary {
    path: String,
    sha256: String,
    kind: Kind,
    rows: usize,
}

#[derive(Debug, Serialize)]
struct IdentitySummary {
    path: String,
    rows: usize,
    max_rel_err: f64,
    pass: bool,
}

#[derive(Debug, Serialize)]
struct BoundSummary {
    path: String,
    checked_layers: usize,
    failed_layers: usize,
    /// Largest empirical / bound ratio among checked rows.
    max_empirical_over_bound: Option<f64>,
    pass: bool,
}

#[derive(Debug, Serialize)]
struct RatioSummary {
    path: String,
    arch: String,
    n_layers: usize,
    first_last_ratio: f64,
}

#[derive(Debug, Serialize)]
struct SpreadSummary {
    arch: String,
    step: u64,
    layers: usize,
    cv_s: f64,
}

#[derive(Debug, Serialize)]
struct Summary {
    schema_version: u32,
    inputs: Vec<InputSummary>,
    identity: Vec<IdentitySummary>,
    bounds: Vec<BoundSummary>,
    gradient_ratios: Vec<RatioSummary>,
    sensitivity_spread: Vec<SpreadSummary>,
    pass: bool,
}

fn identity(t: &Table) -> Result<IdentitySummary> {
    let errs = t.floats("rel_err")?;
    let max_rel_err = errs.iter().copied().fold(0.0, f64::max);
    Ok(IdentitySummary {
        path: t.path.clone(),
        rows: t.rows.len(),
        max_rel_err,
        pass: max_rel_err < IDENTITY_TOL,
    })
}

fn bounds(t: &Table) -> Result<BoundSummary> {
    let (pass_c, total_c) = (t.col("pass"), t.col("total"));
    let emp_c = t.col("layer_empirical_max");
    let (mut checked, mut failed) = (0, 0);
    let mut worst: Option<f64> = None;
    for (i, r) in t.rows.iter().enumerate() {
        match r[pass_c].as_str() {
            "" => continue,
            "true" => checked += 1,
            "false" => {
                checked += 1;
                failed += 1;
            }
            other => bail!("{}: row {}: column pass: expected true/false, got {other:?}", t.path, i + 1),
        }
        let total: f64 = r[total_c].parse().with_context(|| format!("{}: row {}: column total", t.path, i + 1))?;
        if let Ok(emp) = r[emp_c].parse::<f64>() {
            if total > 0.0 {
                worst = Some(worst.map_or(emp / total, |w: f64| w.max(emp / total)));
            }
        }
    }
    Ok(BoundSummary {
        path: t.path.clone(),
        checked_layers: checked,
        failed_layers: failed,
        max_empirical_over_bound: worst,
        pass: failed == 0,
    })
}

fn ratio(t: &Table) -> Result<RatioSummary> {
    let g = t.floats("grad_rms")?;
    let (Some(first), Some(last)) = (g.first(), g.last()) else {
        bail!("{}: no rows", t.path);
    };
    Ok(RatioSummary {
        path: t.path.clone(),
        arch: t.meta.get("arch").cloned().unwrap_or_else(|| "unknown".into()),
        n_layers: g.len(),
        first_last_ratio: first / last,
    })
}

fn spread(tables: &[&Table]) -> Result<Vec<SpreadSummary>> {
    let mut groups: BTreeMap<(String, u64), Vec<f64>> = BTreeMap::new();
    for t in tables {
        let (arch_c, step_c, s_c) = (t.col("arch"), t.col("step"), t.col("s"));
        for (i, r) in t.rows.iter().enumerate() {
            let at = |c: &str| format!("{}: row {}: column {c}", t.path, i + 1);
            let step: u64 = r[step_c].parse().with_context(|| at("step"))?;
            let s: f64 = r[s_c].parse().with_context(|| at("s"))?;
            groups.entry((r[arch_c].clone(), step)).or_default().push(s);
        }
    }
    groups
        .into_iter()
        .map(|((arch, step), s)| {
            Ok(SpreadSummary {
                cv_s: coefficient_of_variation(&s).with_context(|| format!("S spread for {arch} at step {step}"))?,
                arch,
                step,
                layers: s.len(),
            })
        })
        .collect()
}

fn summarize(tables: &[Table]) -> Result<Summary> {
    let of = |k: Kind| tables.iter().filter(move |t| t.kind == k);
    let identity = of(Kind::Verify).map(identity).collect::<Result<Vec<_>>>()?;
    let bounds = of(Kind::Bound).map(bounds).collect::<Result<Vec<_>>>()?;
    let gradient_ratios = of(Kind::Probe).map(ratio).collect::<Result<Vec<_>>>()?;
    let sensitivity_spread = spread(&of(Kind::Metrics).collect::<Vec<_>>())?;
    let pass = identity.iter().all(|s| s.pass) && bounds.iter().all(|s| s.pass);
    Ok(Summary {
        schema_version: SCHEMA_VERSION,
        inputs: tables
            .iter()
            .map(|t| InputSummary {
                path: t.path.clone(),
                sha256: t.sha256.clone(),
                kind: t.kind,
                rows: t.rows.len(),
            })
            .collect(),
        identity,
        bounds,
        gradient_ratios,
        sensitivity_spread,
        pass,
    })
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

fn markdown(s: &Summary) -> String {
    let mut md = String::new();
    let _ = writeln!(md, "# Stability report\n");
    let _ = writeln!(md, "Overall: **{}**\n", verdict(s.pass));

    let _ = writeln!(md, "## Inputs\n\n| file | kind | rows | sha256 |\n|---|---|---|---|");
    for i in &s.inputs {
        let _ = writeln!(md, "| `{}` | {:?} | {} | `{}` |", i.path, i.kind, i.rows, i.sha256);
    }

    if !s.identity.is_empty() {
        let _ = writeln!(md, "\n## Softmax Jacobian identity\n\nTolerance: {IDENTITY_TOL:e}\n");
        let _ = writeln!(md, "| file | rows | max rel. error | result |\n|---|---|---|---|");
        for r in &s.identity {
            let _ = writeln!(md, "| `{}` | {} | {:.3e} | {} |", r.path, r.rows, r.max_rel_err, verdict(r.pass));
        }
    }
    if !s.bounds.is_empty() {
        let _ = writeln!(md, "\n## Lipschitz bound checks\n");
        let _ = writeln!(md, "| file | checked | failed | max empirical/bound | result |\n|---|---|---|---|---|");
        for b in &s.bounds {
            let worst = b.max_empirical_over_bound.map(|v| format!("{v:.4e}")).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                md,
                "| `{}` | {} | {} | {} | {} |",
                b.path,
                b.checked_layers,
                b.failed_layers,
                worst,
                verdict(b.pass)
            );
        }
    }
    if !s.gradient_ratios.is_empty() {
        let _ = writeln!(md, "\n## Gradient norm ratio (first / last layer)\n");
        let _ = writeln!(md, "| file | arch | layers | ratio |\n|---|---|---|---|");
        for r in &s.gradient_ratios {
            let _ = writeln!(md, "| `{}` | {} | {} | {:.6} |", r.path, r.arch, r.n_layers, r.first_last_ratio);
        }
    }
    if !s.sensitivity_spread.is_empty() {
        let _ = writeln!(md, "\n## Sensitivity spread across layers\n");
        let _ = writeln!(md, "| arch | step | layers | CV of S |\n|---|---|---|---|");
        for r in &s.sensitivity_spread {
            let _ = writeln!(md, "| {} | {} | {} | {:.6} |", r.arch, r.step, r.layers, r.cv_s);
        }
    }
    md
}

pub fn run(args: &ReportArgs, g: &Global) -> Result<Status> {
    if args.inputs.is_empty() {
        bail!("no input CSV files given");
    }
    let tables = args.inputs.iter().map(|p| load(p)).collect::<Result<Vec<_>>>()?;
    let summary = summarize(&tables)?;
    let md = markdown(&summary);
    match &args.out {
        Some(path) => std::fs::write(path, &md).with_context(|| format!("writing {}", path.display()))?,
        None if !g.json => print!("{md}"),
        None => {}
    }
    if g.json {
        print_json(&summary)?;
    }
    Ok(Status::from_pass(summary.pass))
}
