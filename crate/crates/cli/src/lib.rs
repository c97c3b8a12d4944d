//! Command implementations behind the `multiway` binary.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use multiway_core::bootstrap::{write_bands_csv, BandResult};
use multiway_core::estimator::Flavor;
use multiway_core::signals::ate_estimate;
use multiway_core::simulation::{coverage_tsv, run_coverage, DgpConfig};
use multiway_core::{load_csv, run_estimation, write_csv, Error, ErrorClass, Result, RunConfig};
use serde_json::{json, Value};

#[derive(Debug, Parser)]
#[command(name = "multiway", version, about = "Causal function estimation with two-way clustered data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the configured estimators to a CSV sample and write bands.
    Estimate {
        #[command(flatten)]
        common: Common,
        /// Input CSV; overrides `input` in the config.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Replicated coverage study on the configured design.
    Coverage {
        #[command(flatten)]
        common: Common,
    },
    /// Draw one sample from the configured design.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON configuration; every field is optional.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed; overrides the config.
    #[arg(long, env = "MC_SEED")]
    pub seed: Option<u64>,
    /// Cap on worker threads.
    #[arg(long)]
    pub workers: Option<usize>,
}

pub fn exit_code(e: &Error) -> i32 {
    match e.class() {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numeric => 4,
    }
}

fn resolve(common: &Common) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_json(&fs::read_to_string(p).map_err(|e| Error::config("config", format!("{}: {e}", p.display())))?)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = Some(out.clone());
    }
    let out = cfg.out.clone().ok_or_else(|| Error::config("out", "no output directory given"))?;
    if common.workers == Some(0) {
        return Err(Error::config("workers", "must be at least 1"));
    }
    fs::create_dir_all(&out)?;
    Ok((cfg, out))
}

fn with_workers<T>(workers: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T>
where
    T: Send,
{
    match workers {
        None => f(),
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .map_err(|e| Error::config("workers", e.to_string()))?
            .install(f),
    }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path)?))
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Estimate { common, input } => {
            let (mut cfg, out) = resolve(&common)?;
            if let Some(i) = input {
                cfg.input = Some(i);
            }
            with_workers(common.workers, || cmd_estimate(&cfg, &out))
        }
        Command::Coverage { common } => {
            let (cfg, out) = resolve(&common)?;
            with_workers(common.workers, || cmd_coverage(&cfg, &out))
        }
        Command::Simulate { common } => {
            let (cfg, out) = resolve(&common)?;
            cmd_simulate(&cfg, &out)
        }
    }
}

fn flavor_name(f: Flavor) -> String {
    match f {
        Flavor::FullSample => "full_sample".into(),
        Flavor::PerBlock(k, l) => format!("block_{k}_{l}"),
        Flavor::AveragedCrossFit => "averaged_cross_fit".into(),
    }
}

/// Writes `bands.csv` and `fit.json`.
pub fn cmd_estimate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let input = cfg.input.as_ref().ok_or_else(|| Error::config("input", "no input CSV given"))?;
    let sample = load_csv(input, cfg.mode, &cfg.csv)?;
    let result = run_estimation(&sample, &cfg.estimation, cfg.seed)?;
    let config_json = cfg.to_json()?;

    let labelled: Vec<(&str, &BandResult)> =
        result.results.iter().flat_map(|r| r.bands.iter().map(move |b| (r.estimator.name(), b))).collect();
    let mut w = create(&out.join("bands.csv"))?;
    write_bands_csv(&labelled, &mut w, Some(&config_json))?;

    let estimators: Vec<Value> = result
        .results
        .iter()
        .map(|r| {
            let f = &r.fit;
            json!({
                "estimator": r.estimator.name(),
                "flavor": flavor_name(f.flavor),
                "ate": ate_estimate(&f.signal_matrix(cfg.mode)),
                "beta": f.beta.as_slice(),
                "ridge": f.ridge(),
                "trace_q": f.gram.trace(),
                "blocks": f.blocks.iter().map(|b| json!({
                    "k": b.k, "l": b.l, "rows": b.rows.len(), "cols": b.cols.len(), "beta": b.fit.beta.as_slice(),
                })).collect::<Vec<_>>(),
                "bands": r.bands.iter().map(|b| json!({
                    "method": b.method.name(),
                    "critical_value": b.critical_value,
                    "alpha": b.alpha,
                    "draws": b.draws,
                    "seed": b.seed,
                    "scale_n": b.scale_n,
                    "variance": b.variance,
                    "variance_mode": b.variance_mode,
                })).collect::<Vec<_>>(),
            })
        })
        .collect();
    let doc = json!({
        "config": serde_json::from_str::<Value>(&config_json)?,
        "seed": cfg.seed,
        "sample": { "rows": sample.n_rows(), "cols": sample.n_cols(), "covariates": sample.covariate_dim(), "mode": sample.mode() },
        "basis": result.basis,
        "grid": result.grid.points,
        "estimators": estimators,
    });
    write_json(&out.join("fit.json"), &doc)
}

/// Writes `coverage.json` and `coverage.tsv`, one report per configured shape.
pub fn cmd_coverage(cfg: &RunConfig, out: &Path) -> Result<()> {
    let config_json = cfg.to_json()?;
    let mut reports = Vec::new();
    for &shape in &cfg.shapes {
        let report = run_coverage(&cfg.coverage(shape), cfg.seed)?;
        if let Some(rt) = &report.runtime {
            eprintln!("{}: {} replications in {:.1}s on {} threads", shape.label(), report.replications, rt.seconds, rt.threads);
        }
        for f in &report.failures {
            log::warn!("replication {} skipped: {}", f.replication, f.error);
        }
        reports.push(report);
    }
    let doc = json!({
        "config": serde_json::from_str::<Value>(&config_json)?,
        "seed": cfg.seed,
        "reports": reports,
    });
    write_json(&out.join("coverage.json"), &doc)?;
    let mut tsv = String::new();
    for line in config_json.lines() {
        tsv.push_str("# ");
        tsv.push_str(line);
        tsv.push('\n');
    }
    tsv.push_str(&coverage_tsv(&reports));
    fs::write(out.join("coverage.tsv"), tsv)?;
    Ok(())
}

/// Writes `sample.csv` and the `sample.json` sidecar.
pub fn cmd_simulate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (sample, truth) = cfg.dgp.simulate(cfg.seed)?;
    let config_json = cfg.to_json()?;
    let mut w = create(&out.join("sample.csv"))?;
    write_csv(&sample, &mut w, Some(&config_json))?;
    let params = match &cfg.dgp {
        DgpConfig::Cate(c) => json!({ "zeta": c.zeta(), "mu0": "x", "mu1": c.mu1.label() }),
        DgpConfig::Cte(c) => json!({
            "zeta": c.zeta(),
            "gamma": c.gamma(),
            "g": c.g.label(),
            "covariates_centered": true,
        }),
    };
    let doc = json!({
        "config": serde_json::from_str::<Value>(&config_json)?,
        "seed": cfg.seed,
        "true_tau": truth,
        "true_tau_label": match truth {
            multiway_core::simulation::TrueCurve::CateDifference(s) => format!("{} - x", s.label()),
            multiway_core::simulation::TrueCurve::Response(s) => s.label().to_owned(),
        },
        "parameters": params,
    });
    write_json(&out.join("sample.json"), &doc)
}
