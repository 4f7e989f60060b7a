//! Command-line surface: synthesize, fit, predict, evaluate and ablate.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geogrid::{load_grid, write_grid, ColumnSchema, GridDataset, Node, DEFAULT_DPM_FLOOR};
use crate::inference::{
    fit, load_checkpoint, predict, prepare_grid, save_checkpoint, write_fit_log, write_posterior_csv, FitConfig,
};
use crate::io::write_with;
use crate::metrics::{hazard_metrics, roc_points, write_roc_csv, write_summary_csv, HazardMetrics, ScoredLabels};
use crate::synth::{generate, write_truth_csv, SynthConfig, SyntheticTruth};

#[derive(Debug, Parser)]
#[command(name = "geocausal", version, about = "Variational multi-hazard posterior estimation on feature grids")]
pub struct Cli {
    /// TOML run configuration; every key is optional.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides both the fit and the synthesis seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: logical cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic grid and its ground truth.
    Synth(SynthArgs),
    /// Fit the model to a grid and write a checkpoint.
    Fit(FitArgs),
    /// Posterior probabilities and coefficient maps from a checkpoint.
    Predict(PredictArgs),
    /// Score a posterior CSV against a truth CSV.
    Eval(EvalArgs),
    /// Flow-depth ablation on a synthetic dataset.
    AblateK(AblateArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub grid_out: Option<PathBuf>,
    #[arg(long)]
    pub truth_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub grid: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub grid: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub mc_samples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub posterior: Option<PathBuf>,
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Metrics summary CSV; ROC curves are written next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Flow depths, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0usize, 2, 4, 6])]
    pub k: Vec<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// File locations used when a command-line path is not given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub grid: PathBuf,
    pub truth: PathBuf,
    pub checkpoint: PathBuf,
    pub fit_log: PathBuf,
    pub posterior: PathBuf,
    pub metrics: PathBuf,
    pub ablation: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            grid: "grid.csv".into(),
            truth: "truth.csv".into(),
            checkpoint: "model.ckpt".into(),
            fit_log: "fit_log.csv".into(),
            posterior: "posterior.csv".into(),
            metrics: "metrics.csv".into(),
            ablation: "ablation.csv".into(),
        }
    }
}

/// Whole-run configuration file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub fit: FitConfig,
    pub synth: SynthConfig,
    pub schema: ColumnSchema,
    pub paths: Paths,
    /// Lower bound applied to observations before taking logs.
    pub dpm_floor: Option<f64>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn dpm_floor(&self) -> f64 {
        self.dpm_floor.unwrap_or(DEFAULT_DPM_FLOOR)
    }

    fn read_grid(&self, path: &Path) -> Result<GridDataset> {
        let mut g = load_grid(path, &self.schema)?;
        g.dpm_floor = self.dpm_floor();
        Ok(g)
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.fit.seed = s;
        cfg.synth.seed = s;
    }
    cfg.fit.validate()?;
    cfg.synth.validate()?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve(cli)?;
    match &cli.command {
        Command::Synth(a) => cmd_synth(
            &cfg,
            a.grid_out.as_deref().unwrap_or(&cfg.paths.grid),
            a.truth_out.as_deref().unwrap_or(&cfg.paths.truth),
        ),
        Command::Fit(a) => cmd_fit(
            &cfg,
            a.grid.as_deref().unwrap_or(&cfg.paths.grid),
            a.checkpoint.as_deref().unwrap_or(&cfg.paths.checkpoint),
            a.log.as_deref().unwrap_or(&cfg.paths.fit_log),
        ),
        Command::Predict(a) => cmd_predict(
            &cfg,
            a.checkpoint.as_deref().unwrap_or(&cfg.paths.checkpoint),
            a.grid.as_deref().unwrap_or(&cfg.paths.grid),
            a.out.as_deref().unwrap_or(&cfg.paths.posterior),
            a.mc_samples.unwrap_or(cfg.fit.predict_mc_samples),
            cli.seed,
        ),
        Command::Eval(a) => cmd_eval(
            a.posterior.as_deref().unwrap_or(&cfg.paths.posterior),
            a.truth.as_deref().unwrap_or(&cfg.paths.truth),
            a.out.as_deref().unwrap_or(&cfg.paths.metrics),
        )
        .map(|_| ()),
        Command::AblateK(a) => cmd_ablate_k(&cfg, &a.k, a.out.as_deref().unwrap_or(&cfg.paths.ablation)).map(|_| ()),
    }
}

pub fn cmd_synth(cfg: &RunConfig, grid_out: &Path, truth_out: &Path) -> Result<()> {
    let (grid, truth) = generate(&cfg.synth)?;
    write_with(grid_out, |b| write_grid(&grid, b))?;
    write_with(truth_out, |b| write_truth_csv(&truth, b))?;
    println!("seed {}  N {}", cfg.synth.seed, grid.len());
    Ok(())
}

fn partial_path(p: &Path) -> PathBuf {
    let mut s = p.as_os_str().to_os_string();
    s.push(".partial");
    PathBuf::from(s)
}

pub fn cmd_fit(cfg: &RunConfig, grid: &Path, checkpoint: &Path, log_path: &Path) -> Result<()> {
    let grid = cfg.read_grid(grid)?;
    let out = fit(&grid, &cfg.fit)?;
    write_with(log_path, |b| write_fit_log(&out.trace, b))?;
    if let Some(msg) = out.failure {
        let partial = partial_path(checkpoint);
        save_checkpoint(&out.state, &partial)?;
        return Err(Error::FitFailure(format!("{msg}; last good state saved to {}", partial.display())));
    }
    save_checkpoint(&out.state, checkpoint)?;
    match out.trace.last() {
        Some(r) => println!("final ELBO {:.6} at iteration {}", r.elbo.total, r.iter),
        None => println!("no finite ELBO evaluation"),
    }
    Ok(())
}

pub fn cmd_predict(
    cfg: &RunConfig,
    checkpoint: &Path,
    grid: &Path,
    out: &Path,
    mc_samples: usize,
    seed: Option<u64>,
) -> Result<()> {
    let state = load_checkpoint(checkpoint)?;
    let raw = cfg.read_grid(grid)?;
    let seed = seed.unwrap_or(state.config.seed);
    let pred = predict(&state, &raw, mc_samples, seed)?;
    let g = prepare_grid(&raw, state.config.prior_floor, Some(&state.feature_stats))?;
    write_with(out, |b| write_posterior_csv(&g, &pred, b))?;
    info!("wrote {} rows to {}", g.len(), out.display());
    Ok(())
}

const HAZARDS: [(&str, Node); 3] = [
    ("ls", Node::Landslide),
    ("lf", Node::Liquefaction),
    ("bd", Node::BuildingDamage),
];

fn header_index(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::MissingColumn(name.to_string()))
}

fn parse_cell(rec: &csv::StringRecord, c: usize, row: usize, name: &str) -> Result<f64> {
    let cell = rec.get(c).unwrap_or("").trim();
    cell.parse().map_err(|_| Error::Parse {
        row,
        column: name.to_string(),
        message: format!("`{cell}` is not a number"),
    })
}

/// Reads `id` plus three named columns.
fn read_triples(path: &Path, cols: [&str; 3]) -> Result<Vec<(i64, [f64; 3])>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let h = rdr.headers()?.clone();
    let ci = header_index(&h, "id")?;
    let cs = [header_index(&h, cols[0])?, header_index(&h, cols[1])?, header_index(&h, cols[2])?];
    let mut out = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let id = parse_cell(&rec, ci, row, "id")?;
        if id.fract() != 0.0 {
            return Err(Error::Parse {
                row,
                column: "id".into(),
                message: format!("`{id}` is not an integer"),
            });
        }
        let mut v = [0.0; 3];
        for i in 0..3 {
            v[i] = parse_cell(&rec, cs[i], row, cols[i])?;
        }
        out.push((id as i64, v));
    }
    Ok(out)
}

/// Pairs posterior scores with truth labels by id.
pub fn join_by_id(post: &[(i64, [f64; 3])], truth: &[(i64, [f64; 3])]) -> Result<(Vec<[f64; 3]>, Vec<[bool; 3]>)> {
    let index: HashMap<i64, [f64; 3]> = truth.iter().copied().collect();
    let mut scores = Vec::with_capacity(post.len());
    let mut labels = Vec::with_capacity(post.len());
    for (id, q) in post {
        let t = index.get(id).ok_or(Error::Join(*id))?;
        scores.push(*q);
        labels.push(t.map(|v| v >= 0.5));
    }
    if truth.len() != post.len() {
        let ids: std::collections::HashSet<i64> = post.iter().map(|p| p.0).collect();
        if let Some((id, _)) = truth.iter().find(|t| !ids.contains(&t.0)) {
            return Err(Error::Join(*id));
        }
    }
    Ok((scores, labels))
}

/// Metrics per hazard for aligned scores and labels.
pub fn evaluate_hazards(scores: &[[f64; 3]], labels: &[[bool; 3]]) -> Result<Vec<(HazardMetrics, Option<Vec<(f64, f64)>>)>> {
    HAZARDS
        .iter()
        .map(|(name, node)| {
            let i = node.index();
            let data = ScoredLabels::new(scores.iter().map(|s| s[i]).collect(), labels.iter().map(|l| l[i]).collect());
            let m = hazard_metrics(name, &data)?;
            let roc = roc_points(&data).ok();
            Ok((m, roc))
        })
        .collect()
}

/// Scores each hazard in `truth` against `posterior`.
pub fn cmd_eval(posterior: &Path, truth: &Path, out: &Path) -> Result<Vec<HazardMetrics>> {
    let post = read_triples(posterior, ["q_ls", "q_lf", "q_bd"])?;
    let tr = read_triples(truth, ["x_ls", "x_lf", "x_bd"])?;
    let (scores, labels) = join_by_id(&post, &tr)?;
    let results = evaluate_hazards(&scores, &labels)?;
    for (m, roc) in &results {
        match (m.auc, roc) {
            (Some(_), Some(pts)) => {
                let path = roc_path(out, &m.hazard);
                write_with(&path, |b| write_roc_csv(pts, b))?;
            }
            _ => eprintln!(
                "notice: AUC undefined for `{}` ({} positive, {} negative)",
                m.hazard, m.n_pos, m.n_neg
            ),
        }
    }
    let rows: Vec<HazardMetrics> = results.into_iter().map(|(m, _)| m).collect();
    write_with(out, |b| write_summary_csv(&rows, b))?;
    println!("{:<8}{:>10}{:>10}{:>8}{:>8}", "hazard", "auc", "f1", "n_pos", "n_neg");
    for m in &rows {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
        println!("{:<8}{:>10}{:>10}{:>8}{:>8}", m.hazard, f(m.auc), f(m.f1), m.n_pos, m.n_neg);
    }
    Ok(rows)
}

fn roc_path(out: &Path, hazard: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}_roc_{hazard}.csv"))
}

/// One ablation row; metric fields are `None` when the sub-run failed.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub k: usize,
    pub auc: [Option<f64>; 3],
    pub final_elbo: Option<f64>,
    pub error: Option<String>,
}

fn fitted_aucs(grid: &GridDataset, truth: &SyntheticTruth, cfg: &FitConfig) -> Result<([Option<f64>; 3], f64)> {
    let out = fit(grid, cfg)?;
    if let Some(msg) = out.failure {
        return Err(Error::FitFailure(msg));
    }
    let elbo = out
        .trace
        .last()
        .map(|r| r.elbo.total)
        .ok_or_else(|| Error::FitFailure("no finite evaluation".into()))?;
    let scores: Vec<[f64; 3]> = out.state.posterior.q.clone();
    let res = evaluate_hazards(&scores, &truth.x)?;
    Ok(([res[0].0.auc, res[1].0.auc, res[2].0.auc], elbo))
}

/// Deduplicates `ks` keeping first occurrences, in order.
pub fn dedup_depths(ks: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    for &k in ks {
        if out.contains(&k) {
            warn!("duplicate flow depth {k} ignored");
        } else {
            out.push(k);
        }
    }
    out
}

pub fn cmd_ablate_k(cfg: &RunConfig, ks: &[usize], out: &Path) -> Result<Vec<AblationRow>> {
    let (grid, truth) = generate(&cfg.synth)?;
    let rows: Vec<AblationRow> = dedup_depths(ks)
        .into_iter()
        .map(|k| {
            let fc = FitConfig {
                flow_depth: k,
                ..cfg.fit.clone()
            };
            match fitted_aucs(&grid, &truth, &fc) {
                Ok((auc, elbo)) => AblationRow {
                    k,
                    auc,
                    final_elbo: Some(elbo),
                    error: None,
                },
                Err(e) => {
                    warn!("flow depth {k} failed: {e}");
                    AblationRow {
                        k,
                        auc: [None; 3],
                        final_elbo: None,
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect();
    write_with(out, |b| {
        let mut w = csv::Writer::from_writer(b);
        w.write_record(["k", "auc_ls", "auc_lf", "auc_bd", "final_elbo"])?;
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &rows {
            w.write_record([r.k.to_string(), f(r.auc[0]), f(r.auc[1]), f(r.auc[2]), f(r.final_elbo)])?;
        }
        w.flush().map_err(|e| Error::io(out, e))?;
        Ok(())
    })?;
    for r in &rows {
        println!("k={:<3} auc {:?} elbo {:?}", r.k, r.auc, r.final_elbo);
    }
    Ok(rows)
}
