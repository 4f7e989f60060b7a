//! The causal graph and every term of the evidence lower bound.
//!
//! Local (per-location) terms are closed-form functions of the posterior
//! triple, the Monte Carlo coefficient moments and the noise weights. Their
//! analytic derivatives feed both the E-step fixed point and the M-step
//! backward pass through the coefficient fields.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coeff_field::{CoefficientField, FieldEval, FieldGradAcc, FieldName, LocationDraw, MomentAdjoint};
use crate::error::{Error, Result};
use crate::geogrid::{FeatureEncoding, GridDataset, Node};

/// Posterior probabilities of active nodes stay within `[Q_MIN, 1 − Q_MIN]`.
pub const Q_MIN: f64 = 1e-6;

/// Locations are grouped into fixed id ranges of this size for parallel
/// work; partial sums are reduced in range order.
pub const CHUNK: usize = 64;

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn clamp_q(q: f64) -> f64 {
    q.clamp(Q_MIN, 1.0 - Q_MIN)
}

/// A parent of a latent node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Parent {
    /// Continuous prior probability, entering the logit as its value.
    Prior(Node),
    /// Binary latent node.
    Latent(Node),
}

/// The fixed causal structure. Observation parents are the three latent
/// nodes; building damage has the two hazards as parents; each hazard has
/// its prior probability as its only parent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CausalGraph;

impl CausalGraph {
    pub fn observation_parents(&self) -> [(Node, FieldName); 3] {
        [
            (Node::Landslide, FieldName::LamLs),
            (Node::Liquefaction, FieldName::LamLf),
            (Node::BuildingDamage, FieldName::LamBd),
        ]
    }

    pub fn parents(&self, node: Node) -> Vec<(Parent, FieldName)> {
        match node {
            Node::Landslide => vec![(Parent::Prior(Node::Landslide), FieldName::GamAlphaLs)],
            Node::Liquefaction => vec![(Parent::Prior(Node::Liquefaction), FieldName::GamAlphaLf)],
            Node::BuildingDamage => vec![
                (Parent::Latent(Node::Landslide), FieldName::GamLs),
                (Parent::Latent(Node::Liquefaction), FieldName::GamLf),
            ],
        }
    }

    /// Latent nodes in an order where every parent precedes its children.
    pub fn topological_order(&self) -> Option<Vec<Node>> {
        let mut done: Vec<Node> = Vec::new();
        while done.len() < 3 {
            let next = Node::ALL.iter().copied().find(|n| {
                !done.contains(n)
                    && self.parents(*n).iter().all(|(p, _)| match p {
                        Parent::Latent(q) => done.contains(q),
                        Parent::Prior(_) => true,
                    })
            })?;
            done.push(next);
        }
        Some(done)
    }

    pub fn is_acyclic(&self) -> bool {
        self.topological_order().is_some()
    }
}

/// Global biases and noise scales.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseWeights {
    pub w0_y: f64,
    /// Observation noise scale; optimized through its log.
    pub we_y: f64,
    /// Logit bias per latent node.
    pub w0: [f64; 3],
    /// Logit noise scale per latent node; enters only squared.
    pub we: [f64; 3],
}

/// Number of unconstrained noise parameters.
pub const N_NOISE_PARAMS: usize = 8;

impl NoiseWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w0_y, self.we_y]
            .into_iter()
            .chain(self.w0)
            .chain(self.we);
        if all.into_iter().any(|v| !v.is_finite()) || !(self.we_y > 0.0) {
            return Err(Error::Invalid(format!("noise weights {self:?}")));
        }
        Ok(())
    }

    /// `[w0_y, log we_y, w0_ls, w0_lf, w0_bd, we_ls, we_lf, we_bd]`
    pub fn params(&self) -> [f64; N_NOISE_PARAMS] {
        [
            self.w0_y,
            self.we_y.ln(),
            self.w0[0],
            self.w0[1],
            self.w0[2],
            self.we[0],
            self.we[1],
            self.we[2],
        ]
    }

    pub fn set_params(&mut self, p: &[f64]) {
        self.w0_y = p[0];
        self.we_y = p[1].exp();
        self.w0.copy_from_slice(&p[2..5]);
        self.we.copy_from_slice(&p[5..8]);
    }
}

/// Mean-field Bernoulli posteriors; inactive nodes hold exactly 0.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorGrid {
    pub q: Vec<[f64; 3]>,
}

impl PosteriorGrid {
    /// Starts every active node at its prior (0.5 for building damage).
    pub fn from_priors(grid: &GridDataset) -> Self {
        let q = (0..grid.len())
            .map(|l| {
                let loc = &grid.locations[l];
                let mut t = [0.0; 3];
                for n in Node::ALL {
                    if grid.is_active(n, l) {
                        t[n.index()] = clamp_q(loc.prior(n));
                    }
                }
                t
            })
            .collect();
        PosteriorGrid { q }
    }

    /// Re-applies the clamp on active nodes and pins inactive nodes to 0.
    pub fn normalize(&mut self, grid: &GridDataset) {
        for (l, t) in self.q.iter_mut().enumerate() {
            for n in Node::ALL {
                let i = n.index();
                t[i] = if grid.is_active(n, l) { clamp_q(t[i]) } else { 0.0 };
            }
        }
    }
}

/// Per-location Monte Carlo moments consumed by the local terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LocalMoments {
    /// `E[λ_k]` for k = LS, LF, BD.
    pub lam_e1: [f64; 3],
    /// `E[λ_k²]`.
    pub lam_e2: [f64; 3],
    /// `E[exp(γ_α·α)]` for the LS and LF prior parents.
    pub prior_pos: [f64; 2],
    /// `E[exp(−γ_α·α)]`.
    pub prior_neg: [f64; 2],
    /// `E[exp(γ_k)]` for the LS and LF parents of BD.
    pub parent_pos: [f64; 2],
    /// `E[exp(−γ_k)]`.
    pub parent_neg: [f64; 2],
}

/// Adjoints with the same layout as [`LocalMoments`].
pub type LocalAdjoint = LocalMoments;

/// What the local terms need to know about a location.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalSite {
    /// `log y`, absent when the observation is missing.
    pub log_y: Option<f64>,
    pub active: [bool; 3],
}

impl LocalSite {
    pub fn from_grid(grid: &GridDataset, l: usize) -> Self {
        LocalSite {
            log_y: grid.locations[l].log_dpm(grid.dpm_floor),
            active: [
                grid.is_active(Node::Landslide, l),
                grid.is_active(Node::Liquefaction, l),
                grid.is_active(Node::BuildingDamage, l),
            ],
        }
    }

    pub fn any_active(&self) -> bool {
        self.active.iter().any(|&a| a)
    }
}

/// Expected log-density of the observation under the posterior.
pub fn obs_term(log_y: f64, q: &[f64; 3], lam_e1: &[f64; 3], lam_e2: &[f64; 3], noise: &NoiseWeights) -> f64 {
    let s = noise.we_y;
    let q_quad = obs_quadratic(log_y, q, lam_e1, lam_e2, noise.w0_y);
    -log_y - s.ln() - q_quad / (2.0 * s * s)
}

/// `E[(log y − w0 − Σλ_k x_k)²]` under the mean-field posterior.
fn obs_quadratic(log_y: f64, q: &[f64; 3], e1: &[f64; 3], e2: &[f64; 3], w0: f64) -> f64 {
    let r = w0 - log_y;
    let mut s1 = 0.0;
    let mut s2 = 0.0;
    let mut cross = 0.0;
    for k in 0..3 {
        s1 += e1[k] * q[k];
        s2 += e2[k] * q[k];
        for j in 0..k {
            cross += e1[j] * e1[k] * q[j] * q[k];
        }
    }
    r * r + s2 + 2.0 * cross + 2.0 * r * s1
}

/// Jensen lower bound on `E[log p(x_i | parents)]`, given the products
/// `P± = E[exp(±Σ γ_k x_k)]` over parents.
pub fn latent_bound(q_i: f64, p_pos: f64, p_neg: f64, w0: f64, we: f64) -> f64 {
    let h = 0.5 * we * we;
    -q_i * softplus(p_neg.ln() + h - w0) - (1.0 - q_i) * softplus(p_pos.ln() + h + w0)
}

/// `Σ q log q + (1 − q) log(1 − q)`, the negative entropy of the listed
/// Bernoulli posteriors.
pub fn entropy_term(q: &[f64]) -> f64 {
    q.iter().map(|&p| p * p.ln() + (1.0 - p) * (1.0 - p).ln()).sum()
}

/// The three local groups at one location.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LocalTerms {
    pub obs: f64,
    pub latent: f64,
    /// Negative entropy; enters the objective with a minus sign.
    pub neg_entropy: f64,
}

impl LocalTerms {
    pub fn total(&self) -> f64 {
        self.obs + self.latent - self.neg_entropy
    }
}

/// Derivatives of `obs + latent` (entropy excluded).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LocalGrad {
    pub dq: [f64; 3],
    pub moments: LocalAdjoint,
    /// Same layout as [`NoiseWeights::params`].
    pub noise: [f64; N_NOISE_PARAMS],
}

/// `P±` for building damage and their log-derivatives with respect to the
/// parent posteriors and moments.
struct BdProducts {
    log_pos: f64,
    log_neg: f64,
    mix_pos: [f64; 2],
    mix_neg: [f64; 2],
}

fn bd_products(q: &[f64; 3], m: &LocalMoments) -> BdProducts {
    let mut out = BdProducts {
        log_pos: 0.0,
        log_neg: 0.0,
        mix_pos: [1.0; 2],
        mix_neg: [1.0; 2],
    };
    for k in 0..2 {
        out.mix_pos[k] = (1.0 - q[k]) + q[k] * m.parent_pos[k];
        out.mix_neg[k] = (1.0 - q[k]) + q[k] * m.parent_neg[k];
        out.log_pos += out.mix_pos[k].ln();
        out.log_neg += out.mix_neg[k].ln();
    }
    out
}

pub fn local_terms(site: &LocalSite, q: &[f64; 3], m: &LocalMoments, noise: &NoiseWeights) -> LocalTerms {
    let mut t = LocalTerms::default();
    if !site.any_active() {
        return t;
    }
    if let Some(ly) = site.log_y {
        t.obs = obs_term(ly, q, &m.lam_e1, &m.lam_e2, noise);
    }
    for k in 0..2 {
        if site.active[k] {
            t.latent += latent_bound(q[k], m.prior_pos[k], m.prior_neg[k], noise.w0[k], noise.we[k]);
            t.neg_entropy += entropy_term(&[q[k]]);
        }
    }
    if site.active[2] {
        let p = bd_products(q, m);
        let h = 0.5 * noise.we[2] * noise.we[2];
        t.latent += -q[2] * softplus(p.log_neg + h - noise.w0[2]) - (1.0 - q[2]) * softplus(p.log_pos + h + noise.w0[2]);
        t.neg_entropy += entropy_term(&[q[2]]);
    }
    t
}

/// Value and analytic derivatives of the local terms.
pub fn local_grad(site: &LocalSite, q: &[f64; 3], m: &LocalMoments, noise: &NoiseWeights) -> (LocalTerms, LocalGrad) {
    let mut t = LocalTerms::default();
    let mut g = LocalGrad::default();
    if !site.any_active() {
        return (t, g);
    }
    if let Some(ly) = site.log_y {
        let s = noise.we_y;
        let inv = 1.0 / (2.0 * s * s);
        let (e1, e2) = (&m.lam_e1, &m.lam_e2);
        let r = noise.w0_y - ly;
        let s1: f64 = (0..3).map(|k| e1[k] * q[k]).sum();
        let quad = obs_quadratic(ly, q, e1, e2, noise.w0_y);
        t.obs = -ly - s.ln() - quad * inv;
        for k in 0..3 {
            let rest = s1 - e1[k] * q[k];
            g.dq[k] -= inv * (e2[k] + 2.0 * e1[k] * rest + 2.0 * r * e1[k]);
            g.moments.lam_e1[k] -= inv * (2.0 * q[k] * rest + 2.0 * r * q[k]);
            g.moments.lam_e2[k] -= inv * q[k];
        }
        g.noise[0] -= inv * 2.0 * (r + s1);
        g.noise[1] += -1.0 + quad / (s * s);
    }
    // Hazards: P± are the prior-parent moments themselves.
    for k in 0..2 {
        if !site.active[k] {
            continue;
        }
        let (w0, we) = (noise.w0[k], noise.we[k]);
        let h = 0.5 * we * we;
        let a_neg = m.prior_neg[k].ln() + h - w0;
        let a_pos = m.prior_pos[k].ln() + h + w0;
        let (sn, sp) = (softplus(a_neg), softplus(a_pos));
        let (dn, dp) = (q[k] * sigmoid(a_neg), (1.0 - q[k]) * sigmoid(a_pos));
        t.latent += -q[k] * sn - (1.0 - q[k]) * sp;
        t.neg_entropy += entropy_term(&[q[k]]);
        g.dq[k] += sp - sn;
        g.moments.prior_neg[k] -= dn / m.prior_neg[k];
        g.moments.prior_pos[k] -= dp / m.prior_pos[k];
        g.noise[2 + k] += dn - dp;
        g.noise[5 + k] -= (dn + dp) * we;
    }
    if site.active[2] {
        let p = bd_products(q, m);
        let (w0, we) = (noise.w0[2], noise.we[2]);
        let h = 0.5 * we * we;
        let a_neg = p.log_neg + h - w0;
        let a_pos = p.log_pos + h + w0;
        let (sn, sp) = (softplus(a_neg), softplus(a_pos));
        let (dn, dp) = (q[2] * sigmoid(a_neg), (1.0 - q[2]) * sigmoid(a_pos));
        t.latent += -q[2] * sn - (1.0 - q[2]) * sp;
        t.neg_entropy += entropy_term(&[q[2]]);
        g.dq[2] += sp - sn;
        for k in 0..2 {
            g.dq[k] -= dn * (m.parent_neg[k] - 1.0) / p.mix_neg[k] + dp * (m.parent_pos[k] - 1.0) / p.mix_pos[k];
            g.moments.parent_neg[k] -= dn * q[k] / p.mix_neg[k];
            g.moments.parent_pos[k] -= dp * q[k] / p.mix_pos[k];
        }
        g.noise[4] += dn - dp;
        g.noise[7] -= (dn + dp) * we;
    }
    (t, g)
}

/// Damped fixed-point settings for the posterior update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EStepSettings {
    pub damping: f64,
    pub sweeps: usize,
    /// Sweeps stop early once no `q` moves by more than this.
    pub tol: f64,
    /// Also ascend from the best corner configuration.
    pub restart: bool,
}

/// Outcome of the local E-step at one location.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LocalEStep {
    /// Local objective before the first sweep and after each sweep.
    pub trace: Vec<f64>,
    /// Updates skipped because the fixed-point target was not finite.
    pub skipped: usize,
}

/// Runs damped updates `q_i ← (1−d)q_i + d·σ(g_i)` node by node. A step is
/// halved until the local objective does not decrease, so every sweep is
/// monotone for fixed moments. With `restart`, the ascent is repeated from
/// the best-scoring corner of the active nodes and kept only if it ends
/// higher, which escapes explaining-away optima of the coordinate updates.
pub fn e_step_local(
    site: &LocalSite,
    q: &mut [f64; 3],
    m: &LocalMoments,
    noise: &NoiseWeights,
    settings: &EStepSettings,
) -> LocalEStep {
    let mut out = LocalEStep::default();
    let value = |q: &[f64; 3]| local_terms(site, q, m, noise).total();
    let mut current = value(q);
    out.trace.push(current);
    ascend_local(site, q, &mut current, m, noise, settings, &mut out);
    if settings.restart {
        let mut best: Option<([f64; 3], f64)> = None;
        for cfg in 0..8u8 {
            if (0..3).any(|i| cfg >> i & 1 == 1 && !site.active[i]) {
                continue;
            }
            let mut c = *q;
            for i in (0..3).filter(|&i| site.active[i]) {
                c[i] = clamp_q(f64::from(cfg >> i & 1));
            }
            let v = value(&c);
            if v.is_finite() && best.is_none_or(|(_, b)| v > b) {
                best = Some((c, v));
            }
        }
        if let Some((mut c, mut v)) = best {
            let mut scratch = LocalEStep::default();
            ascend_local(site, &mut c, &mut v, m, noise, settings, &mut scratch);
            out.skipped += scratch.skipped;
            if v > current {
                *q = c;
                current = v;
                out.trace.push(current);
            }
        }
    }
    out
}

fn ascend_local(
    site: &LocalSite,
    q: &mut [f64; 3],
    current: &mut f64,
    m: &LocalMoments,
    noise: &NoiseWeights,
    settings: &EStepSettings,
    out: &mut LocalEStep,
) {
    let value = |q: &[f64; 3]| local_terms(site, q, m, noise).total();
    for _ in 0..settings.sweeps {
        let mut moved: f64 = 0.0;
        for i in 0..3 {
            if !site.active[i] {
                continue;
            }
            let (_, g) = local_grad(site, q, m, noise);
            let target = sigmoid(g.dq[i]);
            if !g.dq[i].is_finite() || !target.is_finite() {
                out.skipped += 1;
                continue;
            }
            let old = q[i];
            let mut d = settings.damping;
            for _ in 0..40 {
                let mut trial = *q;
                trial[i] = clamp_q((1.0 - d) * old + d * target);
                let v = value(&trial);
                if v >= *current {
                    moved = moved.max((trial[i] - old).abs());
                    *q = trial;
                    *current = v;
                    break;
                }
                d *= 0.5;
            }
        }
        out.trace.push(*current);
        if moved < settings.tol {
            break;
        }
    }
}

/// All learnable quantities of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    /// One field per [`FieldName`], in [`FieldName::ALL`] order.
    pub fields: Vec<CoefficientField>,
    pub noise: NoiseWeights,
    pub encoding: FeatureEncoding,
}

impl Model {
    pub fn validate(&self) -> Result<()> {
        if self.fields.len() != 7 || self.fields.iter().zip(FieldName::ALL).any(|(f, n)| f.name != n) {
            return Err(Error::Invalid("a model needs exactly the seven fields in canonical order".into()));
        }
        self.noise.validate()
    }

    pub fn field(&self, name: FieldName) -> &CoefficientField {
        &self.fields[name.index()]
    }

    pub fn n_params(&self) -> usize {
        self.fields.iter().map(|f| f.shape().n_params()).sum::<usize>() + N_NOISE_PARAMS
    }

    /// Flat unconstrained parameter vector: each field's block in order,
    /// then the noise block.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for f in &self.fields {
            f.write_params(&mut out);
        }
        out.extend(self.noise.params());
        out
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.n_params() {
            return Err(Error::Shape(format!("expected {} parameters, got {}", self.n_params(), p.len())));
        }
        let mut i = 0;
        for f in &mut self.fields {
            i += f.read_params(&p[i..]);
        }
        self.noise.set_params(&p[i..]);
        Ok(())
    }

    /// Offsets of each field block plus the noise block in the flat vector.
    pub fn block_offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(8);
        let mut o = 0;
        for f in &self.fields {
            out.push(o);
            o += f.shape().n_params();
        }
        out.push(o);
        out
    }

    pub fn enforce_flows(&mut self) {
        for f in &mut self.fields {
            f.flow.enforce_all();
        }
    }
}

/// Objective split into its groups. Local groups carry the batch scale.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub obs: f64,
    pub latent: f64,
    /// Summed negative entropy; subtracted in `total`.
    pub entropy: f64,
    /// Summed KL penalties; subtracted in `total`.
    pub kl: f64,
    pub total: f64,
    pub clamp_count: usize,
}

/// What to evaluate on a set of locations.
#[derive(Clone, Copy, Debug)]
pub struct EvalRequest<'a> {
    pub locs: &'a [usize],
    /// Multiplier on local terms (population size over batch size).
    pub scale: f64,
    pub m_samples: usize,
    pub seed: u64,
    /// When false, every listed location is computed and inactive
    /// contributions are multiplied by zero.
    pub pruning: bool,
    pub gradient: bool,
    /// Runs the E-step on each location before the terms are evaluated.
    pub e_step: Option<EStepSettings>,
}

#[derive(Clone, Debug, Default)]
pub struct EvalResult {
    pub breakdown: ElboBreakdown,
    /// Gradient in the [`Model::params`] layout.
    pub grad: Option<Vec<f64>>,
    /// Derivative of the objective with respect to each listed location's q,
    /// in the order of `locs` (sorted).
    pub dq: Option<Vec<[f64; 3]>>,
    /// Scaled batch objective (local part) before and after each E-step sweep.
    pub sweep_trace: Vec<f64>,
    pub skipped_updates: usize,
}

struct ChunkOut {
    terms: LocalTerms,
    clamps: usize,
    fields: Option<Vec<FieldGradAcc>>,
    noise: [f64; N_NOISE_PARAMS],
    dq: Vec<[f64; 3]>,
    q_new: Vec<(usize, [f64; 3])>,
    sweeps: Vec<f64>,
    skipped: usize,
}

/// Multiplier inside the exponential moments of each field at a location.
fn exp_scale(name: FieldName, grid: &GridDataset, l: usize) -> f64 {
    match name {
        FieldName::GamAlphaLs => grid.locations[l].prior_ls,
        FieldName::GamAlphaLf => grid.locations[l].prior_lf,
        _ => 1.0,
    }
}

/// Which fields' moments are consumed at a site.
fn needed(site: &LocalSite, pruning: bool) -> [bool; 7] {
    if !pruning {
        return [true; 7];
    }
    let obs = site.log_y.is_some() && site.any_active();
    let [ls, lf, bd] = site.active;
    [obs, obs, obs, ls, lf, bd, bd]
}

fn gather_moments(draws: &[Option<LocationDraw>], grid: &GridDataset, l: usize) -> (LocalMoments, usize) {
    let mut m = LocalMoments {
        prior_pos: [1.0; 2],
        prior_neg: [1.0; 2],
        parent_pos: [1.0; 2],
        parent_neg: [1.0; 2],
        ..Default::default()
    };
    let mut clamps = 0;
    for name in FieldName::ALL {
        let Some(d) = &draws[name.index()] else { continue };
        let (e1, e2, ep, em, c) = d.moments(exp_scale(name, grid, l));
        clamps += c;
        match name {
            FieldName::LamLs | FieldName::LamLf | FieldName::LamBd => {
                m.lam_e1[name.index()] = e1;
                m.lam_e2[name.index()] = e2;
            }
            FieldName::GamAlphaLs | FieldName::GamAlphaLf => {
                let k = name.index() - 3;
                m.prior_pos[k] = ep;
                m.prior_neg[k] = em;
            }
            FieldName::GamLs | FieldName::GamLf => {
                let k = name.index() - 5;
                m.parent_pos[k] = ep;
                m.parent_neg[k] = em;
            }
        }
    }
    (m, clamps)
}

fn field_adjoint(name: FieldName, a: &LocalAdjoint, scale: f64) -> MomentAdjoint {
    let i = name.index();
    match name {
        FieldName::LamLs | FieldName::LamLf | FieldName::LamBd => MomentAdjoint {
            e1: a.lam_e1[i],
            e2: a.lam_e2[i],
            ep: 0.0,
            em: 0.0,
            scale,
        },
        FieldName::GamAlphaLs | FieldName::GamAlphaLf => MomentAdjoint {
            e1: 0.0,
            e2: 0.0,
            ep: a.prior_pos[i - 3],
            em: a.prior_neg[i - 3],
            scale,
        },
        FieldName::GamLs | FieldName::GamLf => MomentAdjoint {
            e1: 0.0,
            e2: 0.0,
            ep: a.parent_pos[i - 5],
            em: a.parent_neg[i - 5],
            scale,
        },
    }
}

fn scale_adjoint(a: &mut LocalAdjoint, s: f64) {
    for v in a
        .lam_e1
        .iter_mut()
        .chain(a.lam_e2.iter_mut())
        .chain(a.prior_pos.iter_mut())
        .chain(a.prior_neg.iter_mut())
        .chain(a.parent_pos.iter_mut())
        .chain(a.parent_neg.iter_mut())
    {
        *v *= s;
    }
}

/// Splits sorted location ids into runs sharing the same `id / CHUNK`.
fn id_chunks(locs: &[usize]) -> Vec<&[usize]> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=locs.len() {
        if i == locs.len() || locs[i] / CHUNK != locs[start] / CHUNK {
            out.push(&locs[start..i]);
            start = i;
        }
    }
    out
}

/// Evaluates the objective (and optionally its gradient and an E-step) on
/// the listed locations.
pub fn evaluate(
    grid: &GridDataset,
    design: &DMatrix<f64>,
    posterior: &mut PosteriorGrid,
    model: &Model,
    req: &EvalRequest<'_>,
) -> Result<EvalResult> {
    model.validate()?;
    if req.m_samples == 0 {
        return Err(Error::Invalid("at least one Monte Carlo sample is required".into()));
    }
    if design.nrows() != grid.len() || posterior.q.len() != grid.len() {
        return Err(Error::Shape("grid, design matrix and posterior disagree in length".into()));
    }
    let mut locs: Vec<usize> = req.locs.to_vec();
    locs.sort_unstable();
    locs.dedup();
    if locs.last().is_some_and(|&l| l >= grid.len()) {
        return Err(Error::Invalid("location index out of range".into()));
    }
    let evals: Vec<FieldEval<'_>> = model
        .fields
        .iter()
        .map(|f| f.precompute())
        .collect::<Result<_>>()?;
    let shapes: Vec<_> = model.fields.iter().map(|f| f.shape()).collect();
    let noise = &model.noise;
    let q_in = &posterior.q;

    let chunks = id_chunks(&locs);
    let outs: Vec<ChunkOut> = chunks
        .par_iter()
        .map(|chunk| {
            let mut out = ChunkOut {
                terms: LocalTerms::default(),
                clamps: 0,
                fields: req
                    .gradient
                    .then(|| shapes.iter().map(FieldGradAcc::zeros).collect()),
                noise: [0.0; N_NOISE_PARAMS],
                dq: Vec::new(),
                q_new: Vec::new(),
                sweeps: Vec::new(),
                skipped: 0,
            };
            for &l in chunk.iter() {
                let site = LocalSite::from_grid(grid, l);
                let weight = if grid.location_active(l) { 1.0 } else { 0.0 };
                if req.pruning && weight == 0.0 {
                    if req.gradient {
                        out.dq.push([0.0; 3]);
                    }
                    continue;
                }
                let x: Vec<f64> = design.row(l).iter().copied().collect();
                let need = needed(&site, req.pruning);
                let draws: Vec<Option<LocationDraw>> = evals
                    .iter()
                    .zip(need)
                    .map(|(e, n)| n.then(|| e.draw(&x, req.m_samples, req.seed, l)))
                    .collect();
                let (mom, clamps) = gather_moments(&draws, grid, l);
                out.clamps += clamps;

                let mut q = q_in[l];
                if let Some(settings) = &req.e_step {
                    let es = e_step_local(&site, &mut q, &mom, noise, settings);
                    out.skipped += es.skipped;
                    let last = *es.trace.last().unwrap();
                    for s in 0..=settings.sweeps {
                        let v = es.trace.get(s).copied().unwrap_or(last);
                        if out.sweeps.len() <= s {
                            out.sweeps.push(0.0);
                        }
                        out.sweeps[s] += req.scale * weight * v;
                    }
                    out.q_new.push((l, q));
                }

                let w = req.scale * weight;
                if !req.gradient {
                    let t = local_terms(&site, &q, &mom, noise);
                    out.terms.obs += w * t.obs;
                    out.terms.latent += w * t.latent;
                    out.terms.neg_entropy += w * t.neg_entropy;
                    continue;
                }
                let (t, mut g) = local_grad(&site, &q, &mom, noise);
                out.terms.obs += w * t.obs;
                out.terms.latent += w * t.latent;
                out.terms.neg_entropy += w * t.neg_entropy;
                let mut dq = [0.0; 3];
                for i in 0..3 {
                    if site.active[i] {
                        dq[i] = w * (g.dq[i] - logit(q[i]));
                    }
                }
                out.dq.push(dq);
                for k in 0..N_NOISE_PARAMS {
                    out.noise[k] += w * g.noise[k];
                }
                if w == 0.0 {
                    continue;
                }
                scale_adjoint(&mut g.moments, w);
                let accs = out.fields.as_mut().unwrap();
                for name in FieldName::ALL {
                    let f = name.index();
                    if let Some(d) = &draws[f] {
                        let adj = field_adjoint(name, &g.moments, exp_scale(name, grid, l));
                        evals[f].backward(&x, d, &adj, &mut accs[f]);
                    }
                }
            }
            out
        })
        .collect();

    let mut res = EvalResult::default();
    let mut terms = LocalTerms::default();
    let mut clamps = 0;
    let mut accs: Option<Vec<FieldGradAcc>> = req
        .gradient
        .then(|| shapes.iter().map(FieldGradAcc::zeros).collect());
    let mut noise_grad = [0.0; N_NOISE_PARAMS];
    let mut dq_all = Vec::new();
    for o in &outs {
        terms.obs += o.terms.obs;
        terms.latent += o.terms.latent;
        terms.neg_entropy += o.terms.neg_entropy;
        clamps += o.clamps;
        res.skipped_updates += o.skipped;
        if let (Some(a), Some(b)) = (accs.as_mut(), o.fields.as_ref()) {
            for (x, y) in a.iter_mut().zip(b) {
                x.add(y);
            }
        }
        for k in 0..N_NOISE_PARAMS {
            noise_grad[k] += o.noise[k];
        }
        dq_all.extend_from_slice(&o.dq);
        for (s, v) in o.sweeps.iter().enumerate() {
            if res.sweep_trace.len() <= s {
                res.sweep_trace.push(0.0);
            }
            res.sweep_trace[s] += v;
        }
        for &(l, q) in &o.q_new {
            posterior.q[l] = q;
        }
    }

    let mut kl_total = 0.0;
    if let Some(accs) = accs {
        let mut grad = Vec::with_capacity(model.n_params());
        for (e, a) in evals.iter().zip(&accs) {
            kl_total += e.finish_gradient(a, 1.0, &mut grad)?;
        }
        grad.extend(noise_grad);
        res.grad = Some(grad);
        res.dq = Some(dq_all);
    } else {
        for e in &evals {
            kl_total += e.kl()?;
        }
    }
    let total = terms.total() - kl_total;
    if !total.is_finite() {
        return Err(Error::NonFinite("objective value".into()));
    }
    res.breakdown = ElboBreakdown {
        obs: terms.obs,
        latent: terms.latent,
        entropy: terms.neg_entropy,
        kl: kl_total,
        total,
        clamp_count: clamps,
    };
    Ok(res)
}

/// Full-data objective over every active location.
pub fn elbo(
    grid: &GridDataset,
    posterior: &PosteriorGrid,
    model: &Model,
    m_samples: usize,
    seed: u64,
) -> Result<ElboBreakdown> {
    let design = grid.design_matrix(model.encoding);
    let locs = grid.active_locations();
    let mut q = posterior.clone();
    let req = EvalRequest {
        locs: &locs,
        scale: 1.0,
        m_samples,
        seed,
        pruning: true,
        gradient: false,
        e_step: None,
    };
    Ok(evaluate(grid, &design, &mut q, model, &req)?.breakdown)
}
