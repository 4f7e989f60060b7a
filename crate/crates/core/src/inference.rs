//! Stochastic variational EM: batched E-step fixed points, preconditioned
//! M-step ascent, convergence control, prediction and checkpoints.

use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use log::{debug, info, warn};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::causal_elbo::{
    clamp_q, evaluate, logit, ElboBreakdown, EStepSettings, EvalRequest, Model, NoiseWeights, PosteriorGrid,
    N_NOISE_PARAMS,
};
use crate::coeff_field::{field_posterior_mean_map, init_field, FieldName, MeanNetwork, ParamGroup};
use crate::error::{Error, Result};
use crate::flows::{FlowStack, PlanarLayer};
use crate::geogrid::{FeatureEncoding, FeatureStats, GridDataset, Node, N_FEATURES};
use crate::gp::{kmeans_inducing, InducingSet, MaternHyper, VariationalGaussian};
use crate::rng;

/// Adaptive diagonal preconditioner settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrecondConfig {
    /// Decay of the running squared-gradient average.
    pub decay: f64,
    pub epsilon: f64,
}

impl Default for PrecondConfig {
    fn default() -> Self {
        PrecondConfig {
            decay: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub batch_size: usize,
    /// Monte Carlo draws per location during training.
    pub mc_samples: usize,
    /// Draws per location for the periodic full-data evaluation.
    pub eval_mc_samples: usize,
    /// Draws per location for the final posterior refinement and prediction.
    pub predict_mc_samples: usize,
    pub flow_depth: usize,
    pub inducing_count: usize,
    pub rank_r: usize,
    pub hidden_units: usize,
    pub learning_rate: f64,
    pub precond: PrecondConfig,
    pub e_step_damping: f64,
    pub e_step_sweeps: usize,
    pub e_step_tol: f64,
    /// Restart each local posterior update from its best corner.
    pub e_step_restart: bool,
    pub max_iters: usize,
    pub eval_every: usize,
    /// Consecutive small-improvement evaluations before stopping.
    pub patience: usize,
    pub elbo_tol: f64,
    pub prior_floor: f64,
    pub seed: u64,
    pub init_variance: f64,
    pub init_length_scale: f64,
    pub init_diag: f64,
    /// Initial output bias of every coefficient mean network; a positive
    /// value fixes the orientation of each latent node.
    pub init_coefficient: f64,
    pub kmeans_iters: usize,
    pub pruning: bool,
    pub encoding: FeatureEncoding,
    pub learn_fields: bool,
    pub learn_kernel: bool,
    /// Multiplier on the step size of mean-network weights; 0 freezes them.
    pub mean_net_lr_scale: f64,
    pub learn_noise: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            batch_size: 1024,
            mc_samples: 8,
            eval_mc_samples: 64,
            predict_mc_samples: 256,
            flow_depth: 6,
            inducing_count: 64,
            rank_r: 8,
            hidden_units: 32,
            learning_rate: 0.01,
            precond: PrecondConfig::default(),
            e_step_damping: 0.5,
            e_step_sweeps: 10,
            e_step_tol: 1e-8,
            e_step_restart: true,
            max_iters: 2000,
            eval_every: 25,
            patience: 3,
            elbo_tol: 1e-4,
            prior_floor: 0.0,
            seed: 0,
            init_variance: 1.0,
            init_length_scale: 2.0,
            init_diag: 0.1,
            init_coefficient: 1.0,
            kmeans_iters: 25,
            pruning: true,
            encoding: FeatureEncoding::Codes,
            learn_fields: true,
            learn_kernel: true,
            mean_net_lr_scale: 0.0,
            learn_noise: true,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.mc_samples == 0 || self.eval_mc_samples == 0 || self.predict_mc_samples == 0 {
            return bad("Monte Carlo sample counts must be at least 1");
        }
        if !(self.e_step_damping > 0.0 && self.e_step_damping <= 1.0) {
            return bad("e_step_damping must lie in (0, 1]");
        }
        if self.inducing_count == 0 || self.hidden_units == 0 {
            return bad("inducing_count and hidden_units must be positive");
        }
        if !(self.learning_rate > 0.0) || !(self.elbo_tol > 0.0) {
            return bad("learning_rate and elbo_tol must be positive");
        }
        if !(self.mean_net_lr_scale >= 0.0 && self.mean_net_lr_scale.is_finite()) {
            return bad("mean_net_lr_scale must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.prior_floor) {
            return bad("prior_floor must lie in [0, 1)");
        }
        if !(self.precond.decay > 0.0 && self.precond.decay < 1.0) || !(self.precond.epsilon > 0.0) {
            return bad("precond.decay must lie in (0, 1) and precond.epsilon be positive");
        }
        if !(self.init_variance > 0.0 && self.init_length_scale > 0.0 && self.init_diag > 0.0) {
            return bad("initial kernel and covariance scales must be positive");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1");
        }
        Ok(())
    }

    /// `ρ_t = ρ·(1 + t/1000)^(−0.6)`
    pub fn step_size(&self, t: u64) -> f64 {
        self.learning_rate * (1.0 + t as f64 / 1000.0).powf(-0.6)
    }

    fn e_step_settings(&self) -> EStepSettings {
        EStepSettings {
            damping: self.e_step_damping,
            sweeps: self.e_step_sweeps,
            tol: self.e_step_tol,
            restart: self.e_step_restart,
        }
    }

    fn eval_seed(&self) -> u64 {
        rng::stream_key(&[self.seed, u64::MAX])
    }
}

/// Diagonal preconditioner with a bias-corrected running average of
/// squared gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptiveDiag {
    pub second_moment: Vec<f64>,
    pub steps: u64,
    pub config: PrecondConfig,
}

impl AdaptiveDiag {
    pub fn new(n: usize, config: PrecondConfig) -> Self {
        AdaptiveDiag {
            second_moment: vec![0.0; n],
            steps: 0,
            config,
        }
    }

    /// One ascent step with per-entry step multipliers; entries with a zero
    /// multiplier keep their parameter and second-moment state.
    pub fn ascend(&mut self, params: &mut [f64], grad: &[f64], lr: f64, rate: &[f64]) {
        self.steps += 1;
        let d = self.config.decay;
        let correction = 1.0 - d.powf(self.steps as f64);
        for i in 0..params.len() {
            if rate[i] == 0.0 {
                continue;
            }
            let v = &mut self.second_moment[i];
            *v = d * *v + (1.0 - d) * grad[i] * grad[i];
            let v_hat = *v / correction;
            params[i] += rate[i] * lr * grad[i] / (v_hat.sqrt() + self.config.epsilon);
        }
    }
}

/// One row of the evaluation trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: u64,
    pub elbo: ElboBreakdown,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Diagnostics {
    /// Monte Carlo draws clamped inside `exp`, over all training steps.
    pub clamp_count: u64,
    pub skipped_e_updates: u64,
    pub skipped_groups: u64,
    /// Largest decrease of the batch objective across any E-step sweep.
    pub max_sweep_decrease: f64,
    pub sweeps_checked: u64,
    pub trace: Vec<TraceRow>,
}

/// Everything learned, plus what is needed to continue or predict.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: FitConfig,
    pub model: Model,
    pub posterior: PosteriorGrid,
    pub iteration: u64,
    pub optimizer: AdaptiveDiag,
    pub feature_stats: FeatureStats,
    pub diagnostics: Diagnostics,
}

/// Standardizes (if needed) and computes masks.
pub fn prepare_grid(grid: &GridDataset, floor: f64, stats: Option<&FeatureStats>) -> Result<GridDataset> {
    let mut g = grid.clone();
    if !g.is_standardized() {
        match stats {
            Some(s) => g.apply_feature_stats(s)?,
            None => g.standardize_features()?,
        }
    }
    g.compute_active_masks(floor);
    Ok(g)
}

fn population(grid: &GridDataset, pruning: bool) -> Vec<usize> {
    if pruning {
        grid.active_locations()
    } else {
        (0..grid.len()).collect()
    }
}

/// Initial model and posterior for a prepared grid.
pub fn initialize(grid: &GridDataset, design: &DMatrix<f64>, config: &FitConfig) -> Result<ModelState> {
    config.validate()?;
    let pop = grid.active_locations();
    if pop.is_empty() {
        return Err(Error::Invalid("no active locations".into()));
    }
    let rows = DMatrix::from_fn(pop.len(), design.ncols(), |i, j| design[(pop[i], j)]);
    let m = config.inducing_count.min(pop.len());
    let points = match kmeans_inducing(&rows, m, config.seed, config.kmeans_iters) {
        Ok(p) => p,
        Err(Error::Invalid(msg)) => {
            warn!("{msg}; falling back to distinct feature vectors");
            distinct_rows(&rows, m)
        }
        Err(e) => return Err(e),
    };
    let hyper = MaternHyper::new(config.init_variance, config.init_length_scale)?;
    let fields = FieldName::ALL
        .iter()
        .map(|&n| {
            init_field(
                n,
                points.clone(),
                hyper,
                config.rank_r,
                config.flow_depth,
                config.hidden_units,
                config.init_diag,
                config.seed,
            )
            .map(|mut f| {
                f.mean_net.set_output_bias(config.init_coefficient);
                // Zero residual at the inducing points, so the field starts at its prior mean.
                f.inducing.q_u.mean = f.inducing_prior_mean();
                f
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let log_y: Vec<f64> = pop
        .iter()
        .filter_map(|&l| grid.locations[l].log_dpm(grid.dpm_floor))
        .collect();
    let (w0_y, we_y) = if log_y.len() >= 2 {
        let mean = log_y.iter().sum::<f64>() / log_y.len() as f64;
        let var = log_y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / log_y.len() as f64;
        // Baseline at the lower decile breaks the mirror symmetry between a
        // node being present and absent: damage is added on top of w0_y.
        let mut sorted = log_y.clone();
        sorted.sort_by(f64::total_cmp);
        (sorted[sorted.len() / 10], var.sqrt().max(1e-3))
    } else {
        (log_y.first().copied().unwrap_or(0.0), 1.0)
    };
    let mut w0 = [0.0; 3];
    for n in [Node::Landslide, Node::Liquefaction] {
        let act: Vec<f64> = pop
            .iter()
            .filter(|&&l| grid.is_active(n, l))
            .map(|&l| grid.locations[l].prior(n))
            .collect();
        if !act.is_empty() {
            w0[n.index()] = logit(clamp_q(act.iter().sum::<f64>() / act.len() as f64));
        }
    }
    let model = Model {
        fields,
        noise: NoiseWeights {
            w0_y,
            we_y,
            w0,
            we: [0.5; 3],
        },
        encoding: config.encoding,
    };
    let n_params = model.n_params();
    Ok(ModelState {
        config: config.clone(),
        model,
        posterior: PosteriorGrid::from_priors(grid),
        iteration: 0,
        optimizer: AdaptiveDiag::new(n_params, config.precond),
        feature_stats: grid.feature_stats.clone().unwrap_or_else(FeatureStats::identity),
        diagnostics: Diagnostics::default(),
    })
}

fn distinct_rows(rows: &DMatrix<f64>, m: usize) -> DMatrix<f64> {
    let mut picked: Vec<usize> = Vec::new();
    for i in 0..rows.nrows() {
        if picked.iter().all(|&j| rows.row(i) != rows.row(j)) {
            picked.push(i);
            if picked.len() == m {
                break;
            }
        }
    }
    DMatrix::from_fn(picked.len(), rows.ncols(), |i, j| rows[(picked[i], j)])
}

/// Summary of one training iteration.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepReport {
    pub batch_elbo: ElboBreakdown,
    pub sweep_trace: Vec<f64>,
    pub skipped_groups: usize,
}

/// Posterior-update outcome on a batch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EStepReport {
    /// Batch objective before and after each sweep.
    pub sweep_trace: Vec<f64>,
    pub skipped: usize,
}

/// Drives the EM iterations over one prepared grid.
pub struct Trainer {
    pub grid: GridDataset,
    pub design: DMatrix<f64>,
    pub state: ModelState,
    population: Vec<usize>,
}

impl Trainer {
    pub fn new(grid: &GridDataset, config: &FitConfig) -> Result<Self> {
        config.validate()?;
        let grid = prepare_grid(grid, config.prior_floor, None)?;
        let design = grid.design_matrix(config.encoding);
        let state = initialize(&grid, &design, config)?;
        Ok(Self::assemble(grid, design, state))
    }

    /// Continues from an existing state; the grid is prepared with the
    /// state's stored feature transform.
    pub fn from_state(grid: &GridDataset, state: ModelState) -> Result<Self> {
        let grid = prepare_grid(grid, state.config.prior_floor, Some(&state.feature_stats))?;
        if state.posterior.q.len() != grid.len() {
            return Err(Error::Shape("posterior does not match grid".into()));
        }
        let design = grid.design_matrix(state.config.encoding);
        Ok(Self::assemble(grid, design, state))
    }

    fn assemble(grid: GridDataset, design: DMatrix<f64>, state: ModelState) -> Self {
        let population = population(&grid, state.config.pruning);
        Trainer {
            grid,
            design,
            state,
            population,
        }
    }

    /// Batch for iteration `t`: consecutive slices of a per-epoch permutation.
    pub fn batch(&self, t: u64) -> (Vec<usize>, f64) {
        let p = self.population.len();
        let b = self.state.config.batch_size.min(p);
        if b == p {
            return (self.population.clone(), 1.0);
        }
        let per_epoch = p.div_ceil(b) as u64;
        let epoch = t / per_epoch;
        let idx = (t % per_epoch) as usize;
        let mut perm = self.population.clone();
        perm.shuffle(&mut rng::stream(&[rng::TAG_BATCH, self.state.config.seed, epoch]));
        let mut batch = perm[idx * b..((idx + 1) * b).min(p)].to_vec();
        batch.sort_unstable();
        let scale = p as f64 / batch.len() as f64;
        (batch, scale)
    }

    fn iteration_seed(&self) -> u64 {
        rng::stream_key(&[self.state.config.seed, self.state.iteration])
    }

    fn request<'a>(&self, locs: &'a [usize], scale: f64, gradient: bool, e_step: bool) -> EvalRequest<'a> {
        EvalRequest {
            locs,
            scale,
            m_samples: self.state.config.mc_samples,
            seed: self.iteration_seed(),
            pruning: self.state.config.pruning,
            gradient,
            e_step: e_step.then(|| self.state.config.e_step_settings()),
        }
    }

    /// Posterior update on `batch` with this iteration's frozen draws.
    pub fn e_step(&mut self, batch: &[usize], scale: f64) -> Result<EStepReport> {
        let req = self.request(batch, scale, false, true);
        let res = evaluate(&self.grid, &self.design, &mut self.state.posterior, &self.state.model, &req)?;
        self.record_sweeps(&res.sweep_trace, res.skipped_updates);
        Ok(EStepReport {
            sweep_trace: res.sweep_trace,
            skipped: res.skipped_updates,
        })
    }

    /// One preconditioned ascent step with this iteration's frozen draws.
    pub fn m_step(&mut self, batch: &[usize], scale: f64) -> Result<StepReport> {
        let req = self.request(batch, scale, true, false);
        let res = evaluate(&self.grid, &self.design, &mut self.state.posterior, &self.state.model, &req)?;
        let skipped = self.apply_gradient(res.grad.as_deref().unwrap())?;
        self.state.diagnostics.clamp_count += res.breakdown.clamp_count as u64;
        Ok(StepReport {
            batch_elbo: res.breakdown,
            sweep_trace: Vec::new(),
            skipped_groups: skipped,
        })
    }

    fn record_sweeps(&mut self, trace: &[f64], skipped: usize) {
        let d = &mut self.state.diagnostics;
        d.skipped_e_updates += skipped as u64;
        for w in trace.windows(2) {
            d.max_sweep_decrease = d.max_sweep_decrease.max(w[0] - w[1]);
            d.sweeps_checked += 1;
        }
    }

    fn group_mask(&self) -> Vec<(std::ops::Range<usize>, f64)> {
        let c = &self.state.config;
        let mut out = Vec::new();
        let mut o = 0;
        for f in &self.state.model.fields {
            for (g, n) in f.shape().group_sizes() {
                let learn = match g {
                    _ if !c.learn_fields => 0.0,
                    ParamGroup::Kernel if !c.learn_kernel => 0.0,
                    ParamGroup::MeanNet => c.mean_net_lr_scale,
                    _ => 1.0,
                };
                out.push((o..o + n, learn));
                o += n;
            }
        }
        out.push((o..o + N_NOISE_PARAMS, if c.learn_noise { 1.0 } else { 0.0 }));
        out
    }

    fn apply_gradient(&mut self, grad: &[f64]) -> Result<usize> {
        let mut rate = vec![0.0; grad.len()];
        let mut skipped = 0;
        for (range, learn) in self.group_mask() {
            if learn == 0.0 {
                continue;
            }
            if grad[range.clone()].iter().all(|g| g.is_finite()) {
                rate[range].iter_mut().for_each(|e| *e = learn);
            } else {
                skipped += 1;
            }
        }
        self.state.diagnostics.skipped_groups += skipped as u64;
        if rate.iter().any(|&e| e > 0.0) {
            let mut p = self.state.model.params();
            let lr = self.state.config.step_size(self.state.iteration);
            self.state.optimizer.ascend(&mut p, grad, lr, &rate);
            self.state.model.set_params(&p)?;
            self.state.model.enforce_flows();
        }
        Ok(skipped)
    }

    /// E-step then M-step on the iteration's batch, sharing one set of draws.
    pub fn step(&mut self) -> Result<StepReport> {
        let (batch, scale) = self.batch(self.state.iteration);
        let req = self.request(&batch, scale, true, true);
        let res = evaluate(&self.grid, &self.design, &mut self.state.posterior, &self.state.model, &req);
        let report = match res {
            Ok(res) => {
                self.record_sweeps(&res.sweep_trace, res.skipped_updates);
                self.state.diagnostics.clamp_count += res.breakdown.clamp_count as u64;
                let skipped = self.apply_gradient(res.grad.as_deref().unwrap())?;
                StepReport {
                    batch_elbo: res.breakdown,
                    sweep_trace: res.sweep_trace,
                    skipped_groups: skipped,
                }
            }
            Err(Error::NonFinite(what)) => {
                warn!("iteration {}: non-finite {what}; step skipped", self.state.iteration);
                self.state.diagnostics.skipped_groups += 1;
                StepReport::default()
            }
            Err(e) => return Err(e),
        };
        self.state.iteration += 1;
        Ok(report)
    }

    /// Full-data objective at the fixed evaluation seed.
    pub fn evaluate(&self) -> Result<ElboBreakdown> {
        let req = EvalRequest {
            locs: &self.population,
            scale: 1.0,
            m_samples: self.state.config.eval_mc_samples,
            seed: self.state.config.eval_seed(),
            pruning: self.state.config.pruning,
            gradient: false,
            e_step: None,
        };
        let mut q = self.state.posterior.clone();
        Ok(evaluate(&self.grid, &self.design, &mut q, &self.state.model, &req)?.breakdown)
    }

    /// Runs the E-step to convergence on every location with frozen
    /// parameters and the large prediction sample count.
    pub fn refine_posterior(&mut self) -> Result<()> {
        let c = &self.state.config;
        let req = EvalRequest {
            locs: &self.population,
            scale: 1.0,
            m_samples: c.predict_mc_samples,
            seed: c.eval_seed(),
            pruning: c.pruning,
            gradient: false,
            e_step: Some(EStepSettings {
                damping: c.e_step_damping,
                sweeps: 1000,
                tol: 1e-12,
                restart: c.e_step_restart,
            }),
        };
        evaluate(&self.grid, &self.design, &mut self.state.posterior, &self.state.model, &req)?;
        Ok(())
    }
}

/// Result of a fit.
#[derive(Clone, Debug)]
pub struct FitOutcome {
    /// Final state, or the last state with a finite evaluation on failure.
    pub state: ModelState,
    pub trace: Vec<TraceRow>,
    pub converged: bool,
    pub failure: Option<String>,
}

pub fn fit(grid: &GridDataset, config: &FitConfig) -> Result<FitOutcome> {
    let trainer = Trainer::new(grid, config)?;
    run(trainer)
}

/// Evaluations averaged by the stopping rule.
const SMOOTHING_WINDOW: usize = 3;

fn mean_of_last(v: &[f64], n: usize) -> f64 {
    let tail = &v[v.len().saturating_sub(n)..];
    tail.iter().sum::<f64>() / tail.len() as f64
}

/// Runs the training loop of an already-constructed trainer. Stops once the
/// running mean of the last few evaluation objectives improves by less than
/// `elbo_tol` (relative) `patience` times in a row.
pub fn run(mut trainer: Trainer) -> Result<FitOutcome> {
    let start = Instant::now();
    let config = trainer.state.config.clone();
    let mut trace = Vec::new();
    let mut last_good = trainer.state.clone();
    let mut bad_evals = 0;
    let mut small = 0;
    let mut converged = false;

    let record = |tr: &mut Trainer, trace: &mut Vec<TraceRow>| -> Option<f64> {
        match tr.evaluate() {
            Ok(b) if b.total.is_finite() => {
                let row = TraceRow {
                    iter: tr.state.iteration,
                    elbo: b,
                    seconds: start.elapsed().as_secs_f64(),
                };
                info!("iter {:>6}  elbo {:.6e}  kl {:.4e}", row.iter, b.total, b.kl);
                trace.push(row);
                Some(b.total)
            }
            Ok(_) | Err(Error::NonFinite(_)) => None,
            Err(e) => {
                warn!("evaluation failed: {e}");
                None
            }
        }
    };

    let mut prev = record(&mut trainer, &mut trace);
    let mut recent: Vec<f64> = prev.into_iter().collect();
    if prev.is_none() {
        bad_evals += 1;
    }
    while (trainer.state.iteration as usize) < config.max_iters {
        let rep = trainer.step()?;
        debug!("iter {} batch elbo {:.6e}", trainer.state.iteration, rep.batch_elbo.total);
        if !(trainer.state.iteration as usize).is_multiple_of(config.eval_every) {
            continue;
        }
        match record(&mut trainer, &mut trace) {
            Some(v) => {
                bad_evals = 0;
                last_good = trainer.state.clone();
                recent.push(v);
                let smoothed = mean_of_last(&recent, SMOOTHING_WINDOW);
                if let Some(p) = prev {
                    if (smoothed - p) / p.abs().max(1e-12) < config.elbo_tol {
                        small += 1;
                    } else {
                        small = 0;
                    }
                }
                prev = Some(smoothed);
                if small >= config.patience {
                    converged = true;
                    break;
                }
            }
            None => {
                bad_evals += 1;
                if bad_evals >= 3 {
                    last_good.diagnostics.trace = trace.clone();
                    return Ok(FitOutcome {
                        state: last_good,
                        trace,
                        converged: false,
                        failure: Some("objective was non-finite at three consecutive evaluations".into()),
                    });
                }
            }
        }
    }
    if trainer.state.iteration > 0 {
        trainer.refine_posterior()?;
    }
    trainer.state.diagnostics.trace = trace.clone();
    Ok(FitOutcome {
        state: trainer.state,
        trace,
        converged,
        failure: None,
    })
}

/// Posterior probabilities and coefficient maps for one grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub q: PosteriorGrid,
    /// Posterior-mean coefficient per field (in [`FieldName::ALL`] order)
    /// and location; `None` where the location is inactive.
    pub coefficients: Vec<Vec<Option<f64>>>,
}

/// Posterior at every location of `grid` with frozen parameters.
pub fn predict(state: &ModelState, grid: &GridDataset, mc_samples: usize, seed: u64) -> Result<Prediction> {
    let mut st = state.clone();
    st.config.predict_mc_samples = mc_samples;
    st.config.seed = seed;
    let fresh = st.posterior.q.len() != grid.len();
    if fresh {
        st.posterior = PosteriorGrid { q: vec![[0.0; 3]; grid.len()] };
    }
    let mut trainer = Trainer::from_state(grid, st)?;
    if fresh || trainer.state.iteration == 0 {
        trainer.state.posterior = PosteriorGrid::from_priors(&trainer.grid);
    }
    if trainer.state.iteration > 0 {
        trainer.refine_posterior()?;
    }
    trainer.state.posterior.normalize(&trainer.grid);
    let coeff_seed = trainer.state.config.eval_seed();
    let coefficients = trainer
        .state
        .model
        .fields
        .iter()
        .map(|f| field_posterior_mean_map(f, &trainer.grid, &trainer.design, mc_samples, coeff_seed))
        .collect::<Result<_>>()?;
    Ok(Prediction {
        q: trainer.state.posterior,
        coefficients,
    })
}

pub const POSTERIOR_HEADER: [&str; 6] = ["id", "lon", "lat", "q_ls", "q_lf", "q_bd"];

pub fn write_posterior_csv<W: Write>(grid: &GridDataset, pred: &Prediction, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = POSTERIOR_HEADER.iter().map(|s| s.to_string()).collect();
    header.extend(FieldName::ALL.iter().map(|f| f.column().to_string()));
    w.write_record(&header)?;
    for (l, loc) in grid.locations.iter().enumerate() {
        let mut rec = vec![loc.id.to_string(), loc.lon.to_string(), loc.lat.to_string()];
        rec.extend(pred.q.q[l].iter().map(|v| v.to_string()));
        for f in &pred.coefficients {
            rec.push(f[l].map(|v| v.to_string()).unwrap_or_default());
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<posterior writer>", e))?;
    Ok(())
}

pub const FIT_LOG_HEADER: [&str; 8] = ["iter", "elbo", "obs", "latent", "entropy", "kl", "clamp_count", "seconds"];

pub fn write_fit_log<W: Write>(trace: &[TraceRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(FIT_LOG_HEADER)?;
    for r in trace {
        let e = &r.elbo;
        w.write_record([
            r.iter.to_string(),
            e.total.to_string(),
            e.obs.to_string(),
            e.latent.to_string(),
            e.entropy.to_string(),
            e.kl.to_string(),
            e.clamp_count.to_string(),
            format!("{:.3}", r.seconds),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<fit log writer>", e))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoints: magic, u32 version, u32 section count, then named sections.
// Each section is (u16 name length, name, u8 kind, u64 element count, data)
// with kind 0 = f64, 1 = u64, 2 = raw bytes, all little-endian.

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GCVEMCK\0";
pub const CHECKPOINT_VERSION: u32 = 1;

enum Section {
    F64(Vec<f64>),
    U64(Vec<u64>),
    Bytes(Vec<u8>),
}

struct SectionWriter {
    buf: Vec<u8>,
    count: u32,
}

impl SectionWriter {
    fn put(&mut self, name: &str, s: Section) {
        self.buf.extend((name.len() as u16).to_le_bytes());
        self.buf.extend(name.as_bytes());
        match s {
            Section::F64(v) => {
                self.buf.push(0);
                self.buf.extend((v.len() as u64).to_le_bytes());
                v.iter().for_each(|x| self.buf.extend(x.to_le_bytes()));
            }
            Section::U64(v) => {
                self.buf.push(1);
                self.buf.extend((v.len() as u64).to_le_bytes());
                v.iter().for_each(|x| self.buf.extend(x.to_le_bytes()));
            }
            Section::Bytes(v) => {
                self.buf.push(2);
                self.buf.extend((v.len() as u64).to_le_bytes());
                self.buf.extend(v);
            }
        }
        self.count += 1;
    }
}

pub fn checkpoint_bytes(state: &ModelState) -> Result<Vec<u8>> {
    let mut w = SectionWriter {
        buf: Vec::new(),
        count: 0,
    };
    let config = toml::to_string(&state.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
    w.put("config", Section::Bytes(config.into_bytes()));
    let m = &state.model;
    w.put(
        "meta",
        Section::U64(vec![
            state.iteration,
            state.optimizer.steps,
            state.posterior.q.len() as u64,
            m.fields.len() as u64,
        ]),
    );
    let fs = &state.feature_stats;
    w.put("feature_stats", Section::F64(fs.mean.iter().chain(&fs.std).copied().collect()));
    for f in &m.fields {
        let s = f.shape();
        let p = format!("field.{}", f.name.column());
        w.put(
            &format!("{p}.shape"),
            Section::U64(vec![s.n_inducing as u64, s.rank as u64, s.depth as u64, s.d_in as u64, s.hidden as u64]),
        );
        let pts = &f.inducing.points;
        w.put(
            &format!("{p}.points"),
            Section::F64((0..pts.nrows()).flat_map(|i| pts.row(i).iter().copied().collect::<Vec<_>>()).collect()),
        );
        let q = &f.inducing.q_u;
        w.put(&format!("{p}.mean"), Section::F64(q.mean.iter().copied().collect()));
        w.put(&format!("{p}.low_rank"), Section::F64(q.low_rank.iter().copied().collect()));
        w.put(&format!("{p}.diag"), Section::F64(q.diag.iter().copied().collect()));
        w.put(
            &format!("{p}.flow"),
            Section::F64(f.flow.layers.iter().flat_map(|l| [l.u, l.c, l.b]).collect()),
        );
        w.put(&format!("{p}.mean_net"), Section::F64(f.mean_net.params.clone()));
        w.put(
            &format!("{p}.kernel"),
            Section::F64(vec![f.hyper.variance, f.hyper.length_scale, f.hyper.jitter]),
        );
    }
    let n = &m.noise;
    w.put(
        "noise",
        Section::F64(vec![n.w0_y, n.we_y, n.w0[0], n.w0[1], n.w0[2], n.we[0], n.we[1], n.we[2]]),
    );
    w.put("posterior", Section::F64(state.posterior.q.iter().flatten().copied().collect()));
    w.put("optimizer", Section::F64(state.optimizer.second_moment.clone()));
    let d = &state.diagnostics;
    w.put(
        "diagnostics",
        Section::U64(vec![d.clamp_count, d.skipped_e_updates, d.skipped_groups, d.sweeps_checked]),
    );
    w.put(
        "trace",
        Section::F64(
            d.trace
                .iter()
                .flat_map(|r| {
                    let e = &r.elbo;
                    [r.iter as f64, e.total, e.obs, e.latent, e.entropy, e.kl, e.clamp_count as f64, r.seconds]
                })
                .collect(),
        ),
    );

    let mut out = Vec::with_capacity(w.buf.len() + 16);
    out.extend(CHECKPOINT_MAGIC);
    out.extend(CHECKPOINT_VERSION.to_le_bytes());
    out.extend(w.count.to_le_bytes());
    out.extend(w.buf);
    Ok(out)
}

struct SectionReader {
    sections: std::collections::HashMap<String, Section>,
}

impl SectionReader {
    fn parse(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(corrupt("missing magic header"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let count = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
        let mut pos = 16;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or_else(|| corrupt("truncated file"))?;
            pos += n;
            Ok(s)
        };
        let mut sections = std::collections::HashMap::new();
        for _ in 0..count {
            let nl = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(nl)?.to_vec()).map_err(|_| corrupt("section name"))?;
            let kind = take(1)?[0];
            let len = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
            let s = match kind {
                0 => Section::F64(
                    take(len.checked_mul(8).ok_or_else(|| corrupt("length"))?)?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                1 => Section::U64(
                    take(len.checked_mul(8).ok_or_else(|| corrupt("length"))?)?
                        .chunks_exact(8)
                        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                2 => Section::Bytes(take(len)?.to_vec()),
                _ => return Err(corrupt("unknown section kind")),
            };
            sections.insert(name, s);
        }
        Ok(SectionReader { sections })
    }

    fn f64s(&self, name: &str, len: Option<usize>) -> Result<&[f64]> {
        match self.sections.get(name) {
            Some(Section::F64(v)) if len.is_none_or(|n| n == v.len()) => Ok(v),
            _ => Err(Error::Checkpoint(format!("section `{name}` missing or malformed"))),
        }
    }

    fn u64s(&self, name: &str, len: usize) -> Result<&[u64]> {
        match self.sections.get(name) {
            Some(Section::U64(v)) if v.len() == len => Ok(v),
            _ => Err(Error::Checkpoint(format!("section `{name}` missing or malformed"))),
        }
    }

    fn bytes(&self, name: &str) -> Result<&[u8]> {
        match self.sections.get(name) {
            Some(Section::Bytes(v)) => Ok(v),
            _ => Err(Error::Checkpoint(format!("section `{name}` missing or malformed"))),
        }
    }
}

pub fn state_from_checkpoint_bytes(bytes: &[u8]) -> Result<ModelState> {
    let r = SectionReader::parse(bytes)?;
    let cfg_text = std::str::from_utf8(r.bytes("config")?).map_err(|_| Error::Checkpoint("config text".into()))?;
    let config: FitConfig = toml::from_str(cfg_text).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let meta = r.u64s("meta", 4)?;
    let (iteration, steps, n_loc) = (meta[0], meta[1], meta[2] as usize);
    if meta[3] != 7 {
        return Err(Error::Checkpoint("expected seven fields".into()));
    }
    let fs = r.f64s("feature_stats", Some(2 * N_FEATURES))?;
    let mut feature_stats = FeatureStats::identity();
    feature_stats.mean.copy_from_slice(&fs[..N_FEATURES]);
    feature_stats.std.copy_from_slice(&fs[N_FEATURES..]);

    let mut fields = Vec::with_capacity(7);
    for name in FieldName::ALL {
        let p = format!("field.{}", name.column());
        let s = r.u64s(&format!("{p}.shape"), 5)?;
        let (m, rank, depth, d_in, hidden) = (s[0] as usize, s[1] as usize, s[2] as usize, s[3] as usize, s[4] as usize);
        let points = DMatrix::from_row_slice(m, d_in, r.f64s(&format!("{p}.points"), Some(m * d_in))?);
        let q_u = VariationalGaussian::new(
            DVector::from_column_slice(r.f64s(&format!("{p}.mean"), Some(m))?),
            DMatrix::from_column_slice(m, rank, r.f64s(&format!("{p}.low_rank"), Some(m * rank))?),
            DVector::from_column_slice(r.f64s(&format!("{p}.diag"), Some(m))?),
        )?;
        let fl = r.f64s(&format!("{p}.flow"), Some(3 * depth))?;
        let flow = FlowStack::new(
            fl.chunks_exact(3)
                .map(|c| PlanarLayer {
                    u: c[0],
                    c: c[1],
                    b: c[2],
                })
                .collect(),
        );
        let np = MeanNetwork::n_params(d_in, hidden);
        let mean_net = MeanNetwork {
            d_in,
            hidden,
            params: r.f64s(&format!("{p}.mean_net"), Some(np))?.to_vec(),
        };
        let k = r.f64s(&format!("{p}.kernel"), Some(3))?;
        let hyper = MaternHyper {
            variance: k[0],
            length_scale: k[1],
            jitter: k[2],
        };
        hyper.validate()?;
        fields.push(crate::coeff_field::CoefficientField {
            name,
            mean_net,
            hyper,
            inducing: InducingSet::new(points, q_u)?,
            flow,
        });
    }
    let nz = r.f64s("noise", Some(8))?;
    let noise = NoiseWeights {
        w0_y: nz[0],
        we_y: nz[1],
        w0: [nz[2], nz[3], nz[4]],
        we: [nz[5], nz[6], nz[7]],
    };
    let model = Model {
        fields,
        noise,
        encoding: config.encoding,
    };
    model.validate()?;
    let post = r.f64s("posterior", Some(3 * n_loc))?;
    let posterior = PosteriorGrid {
        q: post.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
    };
    let optimizer = AdaptiveDiag {
        second_moment: r.f64s("optimizer", Some(model.n_params()))?.to_vec(),
        steps,
        config: config.precond,
    };
    let dg = r.u64s("diagnostics", 4)?;
    let tr = r.f64s("trace", None)?;
    if tr.len() % 8 != 0 {
        return Err(Error::Checkpoint("trace length".into()));
    }
    let trace = tr
        .chunks_exact(8)
        .map(|c| TraceRow {
            iter: c[0] as u64,
            elbo: ElboBreakdown {
                total: c[1],
                obs: c[2],
                latent: c[3],
                entropy: c[4],
                kl: c[5],
                clamp_count: c[6] as usize,
            },
            seconds: c[7],
        })
        .collect();
    Ok(ModelState {
        config,
        model,
        posterior,
        iteration,
        optimizer,
        feature_stats,
        diagnostics: Diagnostics {
            clamp_count: dg[0],
            skipped_e_updates: dg[1],
            skipped_groups: dg[2],
            max_sweep_decrease: 0.0,
            sweeps_checked: dg[3],
            trace,
        },
    })
}

pub fn save_checkpoint(state: &ModelState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = checkpoint_bytes(state)?;
    crate::io::write_atomic(path, &bytes)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelState> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    state_from_checkpoint_bytes(&bytes)
}
