//! Spatially-varying causal coefficient fields.
//!
//! A field composes a feature-space mean network, a sparse Matérn GP over
//! the latent `z`, and a planar flow mapping `z` to the coefficient `v`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flows::{FlowStack, LayerGrad, PlanarLayer};
use crate::geogrid::GridDataset;
use crate::gp::{self, InducingSet, MaternHyper, SparsePrecomp, VariationalGaussian};
use crate::rng;

pub const HIDDEN: usize = 32;

/// Exponent clamp applied inside `exp(±v)` moments.
pub const EXP_CLAMP: f64 = 30.0;

/// Feedforward map `R^d → R` with two tanh hidden layers and a linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanNetwork {
    pub d_in: usize,
    pub hidden: usize,
    /// Flat parameters: W1 (h×d), b1 (h), W2 (h×h), b2 (h), w3 (h), b3 (1).
    pub params: Vec<f64>,
}

impl MeanNetwork {
    pub fn n_params(d_in: usize, hidden: usize) -> usize {
        hidden * d_in + hidden + hidden * hidden + hidden + hidden + 1
    }

    pub fn zeros(d_in: usize, hidden: usize) -> Self {
        MeanNetwork {
            d_in,
            hidden,
            params: vec![0.0; Self::n_params(d_in, hidden)],
        }
    }

    /// Weights drawn from `N(0, 1/fan_in)`, biases zero.
    pub fn init(d_in: usize, hidden: usize, seed: &[u64]) -> Self {
        let mut net = Self::zeros(d_in, hidden);
        let mut z = vec![0.0; net.params.len()];
        rng::normals_into(seed, &mut z);
        let (o1, o2, o3, o4, o5) = net.offsets();
        for i in 0..o1 {
            net.params[i] = z[i] / (d_in as f64).sqrt();
        }
        for i in o2..o3 {
            net.params[i] = z[i] / (hidden as f64).sqrt();
        }
        for i in o4..o5 {
            net.params[i] = z[i] / (hidden as f64).sqrt();
        }
        net
    }

    /// Start offsets of b1, W2, b2, w3, b3.
    fn offsets(&self) -> (usize, usize, usize, usize, usize) {
        let (d, h) = (self.d_in, self.hidden);
        let b1 = h * d;
        let w2 = b1 + h;
        let b2 = w2 + h * h;
        let w3 = b2 + h;
        let b3 = w3 + h;
        (b1, w2, b2, w3, b3)
    }

    /// Sets the output bias.
    pub fn set_output_bias(&mut self, value: f64) {
        let n = self.params.len();
        self.params[n - 1] = value;
    }

    fn hidden_layers(&self, x: &[f64], h1: &mut [f64], h2: &mut [f64]) {
        let (d, h) = (self.d_in, self.hidden);
        let (ob1, ow2, ob2, _, _) = self.offsets();
        let p = &self.params;
        for i in 0..h {
            let row = &p[i * d..(i + 1) * d];
            let s: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + p[ob1 + i];
            h1[i] = s.tanh();
        }
        for i in 0..h {
            let row = &p[ow2 + i * h..ow2 + (i + 1) * h];
            let s: f64 = row.iter().zip(h1.iter()).map(|(w, v)| w * v).sum::<f64>() + p[ob2 + i];
            h2[i] = s.tanh();
        }
    }

    pub fn forward(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.d_in);
        let h = self.hidden;
        let mut h1 = vec![0.0; h];
        let mut h2 = vec![0.0; h];
        self.hidden_layers(x, &mut h1, &mut h2);
        let (_, _, _, ow3, ob3) = self.offsets();
        let p = &self.params;
        p[ow3..ow3 + h].iter().zip(&h2).map(|(w, v)| w * v).sum::<f64>() + p[ob3]
    }

    /// Accumulates `dout · ∂forward(x)/∂params` into `grad`.
    pub fn backward(&self, x: &[f64], dout: f64, grad: &mut [f64]) {
        let (d, h) = (self.d_in, self.hidden);
        let mut h1 = vec![0.0; h];
        let mut h2 = vec![0.0; h];
        self.hidden_layers(x, &mut h1, &mut h2);
        let (ob1, ow2, ob2, ow3, ob3) = self.offsets();
        let p = &self.params;
        grad[ob3] += dout;
        let mut a2 = vec![0.0; h];
        for i in 0..h {
            grad[ow3 + i] += dout * h2[i];
            a2[i] = dout * p[ow3 + i] * (1.0 - h2[i] * h2[i]);
        }
        let mut a1 = vec![0.0; h];
        for i in 0..h {
            grad[ob2 + i] += a2[i];
            let row = ow2 + i * h;
            for j in 0..h {
                grad[row + j] += a2[i] * h1[j];
                a1[j] += a2[i] * p[row + j];
            }
        }
        for j in 0..h {
            let aj = a1[j] * (1.0 - h1[j] * h1[j]);
            grad[ob1 + j] += aj;
            for k in 0..d {
                grad[j * d + k] += aj * x[k];
            }
        }
    }
}

/// The seven causal edges carrying a spatially-varying coefficient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FieldName {
    /// landslide → observation
    LamLs,
    /// liquefaction → observation
    LamLf,
    /// building damage → observation
    LamBd,
    /// landslide prior → landslide
    GamAlphaLs,
    /// liquefaction prior → liquefaction
    GamAlphaLf,
    /// landslide → building damage
    GamLs,
    /// liquefaction → building damage
    GamLf,
}

impl FieldName {
    pub const ALL: [FieldName; 7] = [
        FieldName::LamLs,
        FieldName::LamLf,
        FieldName::LamBd,
        FieldName::GamAlphaLs,
        FieldName::GamAlphaLf,
        FieldName::GamLs,
        FieldName::GamLf,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn column(self) -> &'static str {
        match self {
            FieldName::LamLs => "lam_ls",
            FieldName::LamLf => "lam_lf",
            FieldName::LamBd => "lam_bd",
            FieldName::GamAlphaLs => "gam_als",
            FieldName::GamAlphaLf => "gam_alf",
            FieldName::GamLs => "gam_ls",
            FieldName::GamLf => "gam_lf",
        }
    }

    pub fn targets_observation(self) -> bool {
        matches!(self, FieldName::LamLs | FieldName::LamLf | FieldName::LamBd)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientField {
    pub name: FieldName,
    pub mean_net: MeanNetwork,
    pub hyper: MaternHyper,
    pub inducing: InducingSet,
    pub flow: FlowStack,
}

/// Sizes of one field's parameter blocks in the flat layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FieldShape {
    pub n_inducing: usize,
    pub rank: usize,
    pub depth: usize,
    pub d_in: usize,
    pub hidden: usize,
}

/// Parameter group tags, used to skip updates group-by-group.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    InducingMean,
    LowRank,
    LogDiag,
    Flow,
    MeanNet,
    Kernel,
}

impl FieldShape {
    pub fn group_sizes(&self) -> [(ParamGroup, usize); 6] {
        [
            (ParamGroup::InducingMean, self.n_inducing),
            (ParamGroup::LowRank, self.n_inducing * self.rank),
            (ParamGroup::LogDiag, self.n_inducing),
            (ParamGroup::Flow, 3 * self.depth),
            (ParamGroup::MeanNet, MeanNetwork::n_params(self.d_in, self.hidden)),
            (ParamGroup::Kernel, 2),
        ]
    }

    pub fn n_params(&self) -> usize {
        self.group_sizes().iter().map(|g| g.1).sum()
    }
}

impl CoefficientField {
    pub fn shape(&self) -> FieldShape {
        FieldShape {
            n_inducing: self.inducing.len(),
            rank: self.inducing.q_u.rank(),
            depth: self.flow.depth(),
            d_in: self.mean_net.d_in,
            hidden: self.mean_net.hidden,
        }
    }

    /// Unconstrained parameters: μ_u, L (column-major), log δ, flow (u,c,b per
    /// layer), mean-network weights, log σ², log ℓ.
    pub fn write_params(&self, out: &mut Vec<f64>) {
        let q = &self.inducing.q_u;
        out.extend(q.mean.iter());
        out.extend(q.low_rank.iter());
        out.extend(q.diag.iter().map(|d| d.ln()));
        for l in &self.flow.layers {
            out.extend([l.u, l.c, l.b]);
        }
        out.extend(self.mean_net.params.iter());
        out.push(self.hyper.variance.ln());
        out.push(self.hyper.length_scale.ln());
    }

    /// Inverse of [`write_params`](Self::write_params); returns the number of values read.
    pub fn read_params(&mut self, src: &[f64]) -> usize {
        let s = self.shape();
        let mut i = 0;
        let mut take = |n: usize| {
            let slice = &src[i..i + n];
            i += n;
            slice
        };
        let q = &mut self.inducing.q_u;
        q.mean.copy_from_slice(take(s.n_inducing));
        q.low_rank.copy_from_slice(take(s.n_inducing * s.rank));
        for (d, v) in q.diag.iter_mut().zip(take(s.n_inducing)) {
            *d = v.exp();
        }
        let flow = take(3 * s.depth);
        for (k, l) in self.flow.layers.iter_mut().enumerate() {
            *l = PlanarLayer {
                u: flow[3 * k],
                c: flow[3 * k + 1],
                b: flow[3 * k + 2],
            };
        }
        let np = self.mean_net.params.len();
        self.mean_net.params.copy_from_slice(take(np));
        let h = take(2);
        self.hyper.variance = h[0].exp();
        self.hyper.length_scale = h[1].exp();
        i
    }

    /// Prior mean of the latent field at the inducing inputs.
    pub fn inducing_prior_mean(&self) -> DVector<f64> {
        let p = &self.inducing.points;
        DVector::from_fn(p.nrows(), |i, _| {
            let x: Vec<f64> = p.row(i).iter().copied().collect();
            self.mean_net.forward(&x)
        })
    }

    pub fn precompute(&self) -> Result<FieldEval<'_>> {
        let m_u = self.inducing_prior_mean();
        let pre = SparsePrecomp::new(&self.inducing, &self.hyper, &m_u)?;
        let points: Vec<Vec<f64>> = (0..self.inducing.len())
            .map(|i| self.inducing.points.row(i).iter().copied().collect())
            .collect();
        Ok(FieldEval {
            field: self,
            pre,
            m_u,
            points,
        })
    }
}

/// Per-iteration cache of one field's inducing-point algebra.
pub struct FieldEval<'a> {
    pub field: &'a CoefficientField,
    pub pre: SparsePrecomp,
    pub m_u: DVector<f64>,
    points: Vec<Vec<f64>>,
}

/// Latent draws at one location for one field.
#[derive(Clone, Debug, Default)]
pub struct LocationDraw {
    pub mean: f64,
    /// Conditional variance before clamping at zero.
    pub raw_var: f64,
    pub eps: Vec<f64>,
    pub v: Vec<f64>,
}

impl LocationDraw {
    pub fn std(&self) -> f64 {
        self.raw_var.max(0.0).sqrt()
    }

    /// `(E[v], E[v²], E[exp(s·v)], E[exp(−s·v)], clamps)` with the exponent
    /// clamped to `±EXP_CLAMP`.
    pub fn moments(&self, scale: f64) -> (f64, f64, f64, f64, usize) {
        let m = self.v.len() as f64;
        let (mut e1, mut e2, mut ep, mut em) = (0.0, 0.0, 0.0, 0.0);
        let mut clamps = 0;
        for &v in &self.v {
            e1 += v;
            e2 += v * v;
            let a = scale * v;
            if a.abs() > EXP_CLAMP {
                clamps += 1;
            }
            let a = a.clamp(-EXP_CLAMP, EXP_CLAMP);
            ep += a.exp();
            em += (-a).exp();
        }
        (e1 / m, e2 / m, ep / m, em / m, clamps)
    }
}

/// Adjoints of the four per-location moments of one field.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MomentAdjoint {
    pub e1: f64,
    pub e2: f64,
    pub ep: f64,
    pub em: f64,
    /// Multiplier inside the exponentials.
    pub scale: f64,
}

impl MomentAdjoint {
    pub fn is_zero(&self) -> bool {
        self.e1 == 0.0 && self.e2 == 0.0 && self.ep == 0.0 && self.em == 0.0
    }
}

/// Gradient accumulator for one field, in the flat parameter layout plus
/// the intermediate adjoints of `α` and `B` that are resolved once per step.
#[derive(Clone, Debug)]
pub struct FieldGradAcc {
    pub flow: Vec<LayerGrad>,
    pub mean_net: Vec<f64>,
    pub log_var: f64,
    pub log_ls: f64,
    pub alpha_bar: DVector<f64>,
    pub b_bar: DMatrix<f64>,
}

impl FieldGradAcc {
    pub fn zeros(shape: &FieldShape) -> Self {
        FieldGradAcc {
            flow: vec![LayerGrad::default(); shape.depth],
            mean_net: vec![0.0; MeanNetwork::n_params(shape.d_in, shape.hidden)],
            log_var: 0.0,
            log_ls: 0.0,
            alpha_bar: DVector::zeros(shape.n_inducing),
            b_bar: DMatrix::zeros(shape.n_inducing, shape.n_inducing),
        }
    }

    pub fn add(&mut self, other: &FieldGradAcc) {
        for (a, b) in self.flow.iter_mut().zip(&other.flow) {
            a.u += b.u;
            a.c += b.c;
            a.b += b.b;
        }
        for (a, b) in self.mean_net.iter_mut().zip(&other.mean_net) {
            *a += b;
        }
        self.log_var += other.log_var;
        self.log_ls += other.log_ls;
        self.alpha_bar += &other.alpha_bar;
        self.b_bar += &other.b_bar;
    }
}

impl<'a> FieldEval<'a> {
    fn k_vec(&self, x: &[f64]) -> DVector<f64> {
        let h = &self.field.hyper;
        DVector::from_iterator(
            self.points.len(),
            self.points.iter().map(|p| h.eval_r(gp::sq_dist(p, x).sqrt())),
        )
    }

    /// Conditional mean and raw variance of the latent at feature vector `x`.
    pub fn conditional(&self, x: &[f64]) -> (f64, f64) {
        let k = self.k_vec(x);
        let (off, var) = self.pre.moments(&self.field.hyper, &k);
        (self.field.mean_net.forward(x) + off, var)
    }

    /// Draws `m` samples of the coefficient at location `loc`.
    pub fn draw(&self, x: &[f64], m: usize, seed: u64, loc: usize) -> LocationDraw {
        let (mean, raw_var) = self.conditional(x);
        let mut eps = vec![0.0; m];
        rng::normals_into(
            &[rng::TAG_MC, seed, self.field.name.index() as u64, loc as u64],
            &mut eps,
        );
        let s = raw_var.max(0.0).sqrt();
        let v = eps.iter().map(|e| self.field.flow.apply(mean + s * e)).collect();
        LocationDraw {
            mean,
            raw_var,
            eps,
            v,
        }
    }

    /// Pulls moment adjoints at one location back to the field parameters.
    pub fn backward(&self, x: &[f64], draw: &LocationDraw, adj: &MomentAdjoint, acc: &mut FieldGradAcc) {
        if adj.is_zero() {
            return;
        }
        let m = draw.v.len() as f64;
        let s = draw.std();
        let mut mean_bar = 0.0;
        let mut std_bar = 0.0;
        for (&e, &v) in draw.eps.iter().zip(&draw.v) {
            let a = adj.scale * v;
            let mut dv = adj.e1 + 2.0 * v * adj.e2;
            if a.abs() <= EXP_CLAMP {
                dv += adj.scale * (adj.ep * a.exp() - adj.em * (-a).exp());
            }
            let dv = dv / m;
            let z = draw.mean + s * e;
            let dz = self.field.flow.backward(z, dv, &mut acc.flow);
            mean_bar += dz;
            std_bar += dz * e;
        }
        let var_bar = if draw.raw_var > 0.0 { std_bar / (2.0 * s) } else { 0.0 };

        let h = &self.field.hyper;
        self.field.mean_net.backward(x, mean_bar, &mut acc.mean_net);
        // var = σ² + kᵀBk ; mean = NN(x) + kᵀα
        acc.log_var += var_bar * h.variance;
        let k = self.k_vec(x);
        let bk = &self.pre.b * &k;
        acc.alpha_bar.axpy(mean_bar, &k, 1.0);
        acc.b_bar.ger(var_bar, &k, &k, 1.0);
        for (j, p) in self.points.iter().enumerate() {
            let kbar = mean_bar * self.pre.alpha[j] + 2.0 * var_bar * bk[j];
            if kbar != 0.0 {
                let (_, dlv, dll) = h.eval_r_with_grad(gp::sq_dist(p, x).sqrt());
                acc.log_var += kbar * dlv;
                acc.log_ls += kbar * dll;
            }
        }
    }

    /// KL of the inducing-point posterior against the GP prior.
    pub fn kl(&self) -> Result<f64> {
        Ok(gp::kl_with_inverse(&self.field.inducing.q_u, &self.m_u, &self.pre.kuu_inv, self.pre.kuu_log_det)?.value)
    }

    /// Resolves the accumulated adjoints plus `−weight_kl·KL` into a flat
    /// gradient (same layout as [`CoefficientField::write_params`]).
    pub fn finish_gradient(&self, acc: &FieldGradAcc, kl_weight: f64, out: &mut Vec<f64>) -> Result<f64> {
        let f = self.field;
        let q = &f.inducing.q_u;
        let kinv = &self.pre.kuu_inv;
        let kl = gp::kl_with_inverse(q, &self.m_u, kinv, self.pre.kuu_log_det)?;

        let kinv_abar = kinv * &acc.alpha_bar;
        let mut mu_bar = kinv_abar.clone() - &kl.d_mean * kl_weight;
        let mut mu_prior_bar = -&kinv_abar - &kl.d_prior_mean * kl_weight;
        let mut k_bar = -&kinv_abar * self.pre.alpha.transpose() - &kl.d_prior_cov * kl_weight;

        let p = kinv * &acc.b_bar * kinv;
        let sk = &self.pre.sigma_u * kinv;
        k_bar += &p - &p * &sk - sk.transpose() * &p;
        let sym = &p + p.transpose();
        let low_rank_bar = &sym * &q.low_rank - &kl.d_low_rank * kl_weight;
        let diag_bar = p.diagonal() - &kl.d_diag * kl_weight;

        let mut mean_net = acc.mean_net.clone();
        for i in 0..self.points.len() {
            f.mean_net.backward(&self.points[i], mu_prior_bar[i], &mut mean_net);
        }
        let mut log_var = acc.log_var;
        let mut log_ls = acc.log_ls;
        for i in 0..self.points.len() {
            for j in 0..self.points.len() {
                let kb = k_bar[(i, j)];
                let (_, dlv, dll) = f.hyper.eval_r_with_grad(gp::sq_dist(&self.points[i], &self.points[j]).sqrt());
                log_var += kb * dlv;
                log_ls += kb * dll;
            }
        }

        out.extend(mu_bar.iter());
        out.extend(low_rank_bar.iter());
        out.extend(diag_bar.iter().zip(q.diag.iter()).map(|(g, d)| g * d));
        for g in &acc.flow {
            out.extend([g.u, g.c, g.b]);
        }
        out.extend(mean_net.iter());
        out.push(log_var);
        out.push(log_ls);
        mu_bar.fill(0.0);
        mu_prior_bar.fill(0.0);
        Ok(kl.value)
    }
}

/// Monte Carlo moment caches for one field over the active locations.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentSamples {
    pub m: usize,
    pub locations: Vec<usize>,
    /// Row-major `locations.len() × m` coefficient draws.
    pub v: Vec<f64>,
    pub e_v: Vec<f64>,
    pub e_v2: Vec<f64>,
    pub e_exp: Vec<f64>,
    pub e_exp_neg: Vec<f64>,
    pub clamp_count: usize,
}

impl MomentSamples {
    pub fn draws(&self, i: usize) -> &[f64] {
        &self.v[i * self.m..(i + 1) * self.m]
    }

    /// Recomputes the cached moments from the stored draws.
    pub fn recompute(&self) -> MomentSamples {
        let mut out = self.clone();
        out.clamp_count = 0;
        for i in 0..self.locations.len() {
            let d = LocationDraw {
                v: self.draws(i).to_vec(),
                ..Default::default()
            };
            let (a, b, c, e, n) = d.moments(1.0);
            out.e_v[i] = a;
            out.e_v2[i] = b;
            out.e_exp[i] = c;
            out.e_exp_neg[i] = e;
            out.clamp_count += n;
        }
        out
    }
}

fn feature_row(features: &DMatrix<f64>, i: usize) -> Vec<f64> {
    features.row(i).iter().copied().collect()
}

/// Draws `m_samples` coefficient values at every active location of `grid`
/// and caches their sample moments. Deterministic for a fixed seed.
pub fn draw_moments(
    field: &CoefficientField,
    grid: &GridDataset,
    features: &DMatrix<f64>,
    m_samples: usize,
    noise_seed: u64,
) -> Result<MomentSamples> {
    if m_samples == 0 {
        return Err(Error::Invalid("at least one Monte Carlo sample is required".into()));
    }
    if features.nrows() != grid.len() || features.ncols() != field.mean_net.d_in {
        return Err(Error::Shape("feature matrix does not match grid and field".into()));
    }
    let eval = field.precompute()?;
    let locations = grid.active_locations();
    let draws: Vec<LocationDraw> = locations
        .par_iter()
        .map(|&l| eval.draw(&feature_row(features, l), m_samples, noise_seed, l))
        .collect();
    let n = locations.len();
    let mut out = MomentSamples {
        m: m_samples,
        v: Vec::with_capacity(n * m_samples),
        e_v: vec![0.0; n],
        e_v2: vec![0.0; n],
        e_exp: vec![0.0; n],
        e_exp_neg: vec![0.0; n],
        clamp_count: 0,
        locations,
    };
    for (i, d) in draws.iter().enumerate() {
        out.v.extend_from_slice(&d.v);
        let (a, b, c, e, k) = d.moments(1.0);
        out.e_v[i] = a;
        out.e_v2[i] = b;
        out.e_exp[i] = c;
        out.e_exp_neg[i] = e;
        out.clamp_count += k;
    }
    Ok(out)
}

/// Posterior-mean coefficient per location; `None` where the location is
/// inactive.
pub fn field_posterior_mean_map(
    field: &CoefficientField,
    grid: &GridDataset,
    features: &DMatrix<f64>,
    m_samples: usize,
    seed: u64,
) -> Result<Vec<Option<f64>>> {
    let ms = draw_moments(field, grid, features, m_samples, seed)?;
    let mut out = vec![None; grid.len()];
    for (i, &l) in ms.locations.iter().enumerate() {
        out[l] = Some(ms.e_v[i]);
    }
    Ok(out)
}

/// Builds a field with the standard initialization: μ_u = 0, small random
/// low-rank factor, δ = `init_diag`, near-identity flows.
#[allow(clippy::too_many_arguments)]
pub fn init_field(
    name: FieldName,
    inducing_points: DMatrix<f64>,
    hyper: MaternHyper,
    rank: usize,
    depth: usize,
    hidden: usize,
    init_diag: f64,
    seed: u64,
) -> Result<CoefficientField> {
    let m = inducing_points.nrows();
    let d = inducing_points.ncols();
    let tag = name.index() as u64;
    let rank = rank.min(m);
    let mut lr = vec![0.0; m * rank];
    rng::normals_into(&[rng::TAG_INIT, seed, tag, 1], &mut lr);
    let low_rank = DMatrix::from_column_slice(m, rank, &lr) * 1e-2;
    let q_u = VariationalGaussian::new(DVector::zeros(m), low_rank, DVector::from_element(m, init_diag))?;
    let inducing = InducingSet::new(inducing_points, q_u)?;
    let mut fl = vec![0.0; 2 * depth];
    rng::normals_into(&[rng::TAG_INIT, seed, tag, 2], &mut fl);
    let mut flow = FlowStack::new(
        (0..depth)
            .map(|k| PlanarLayer {
                u: 0.1 * fl[2 * k],
                c: 0.1 * fl[2 * k + 1],
                b: 0.0,
            })
            .collect(),
    );
    flow.enforce_all();
    Ok(CoefficientField {
        name,
        mean_net: MeanNetwork::init(d, hidden, &[rng::TAG_INIT, seed, tag, 3]),
        hyper,
        inducing,
        flow,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geogrid::{Location, N_FEATURES};

    fn grid(n: usize) -> (GridDataset, DMatrix<f64>) {
        let locs = (0..n)
            .map(|i| {
                let mut gf = [0.0; N_FEATURES];
                for (j, g) in gf.iter_mut().enumerate() {
                    *g = ((i * 7 + j * 3) as f64 * 0.61).sin() * 1.5;
                }
                Location {
                    id: i,
                    lon: 0.0,
                    lat: 0.0,
                    gf,
                    prior_ls: 0.2,
                    prior_lf: 0.2,
                    has_building: true,
                    dpm: Some(1.0),
                }
            })
            .collect();
        let g = GridDataset::new(locs).unwrap();
        let f = g.design_matrix(crate::geogrid::FeatureEncoding::Codes);
        (g, f)
    }

    /// Field whose latent is N(mean, var) everywhere: far-away inducing
    /// point, zero network with constant output bias.
    fn constant_field(mean: f64, var: f64, depth: usize) -> CoefficientField {
        let pts = DMatrix::from_element(1, N_FEATURES, 1e4);
        let mut f = init_field(FieldName::LamLs, pts, MaternHyper::new(var, 1.0).unwrap(), 1, depth, 4, 0.1, 0).unwrap();
        f.mean_net = MeanNetwork::zeros(N_FEATURES, 4);
        f.mean_net.set_output_bias(mean);
        f
    }

    #[test]
    fn lognormal_moment_of_identity_flow() {
        let (g, x) = grid(4);
        let f = constant_field(0.0, 1.0, 0);
        let m = 10_000;
        let ms = draw_moments(&f, &g, &x, m, 9).unwrap();
        let expect = 0.5f64.exp();
        // sd of exp(Z) for Z ~ N(0,1)
        let sd = ((1f64.exp() - 1.0) * 1f64.exp()).sqrt();
        for i in 0..4 {
            assert!((ms.e_exp[i] - expect).abs() < 3.0 * sd / (m as f64).sqrt());
        }
    }

    #[test]
    fn degenerate_latent_gives_exact_moments() {
        let (g, x) = grid(3);
        let mut f = constant_field(2.0, 1.0, 0);
        f.hyper.variance = 1e-14;
        let ms = draw_moments(&f, &g, &x, 16, 1).unwrap();
        for i in 0..3 {
            assert!((ms.e_v[i] - 2.0).abs() < 1e-5);
            assert!((ms.e_v2[i] - 4.0).abs() < 1e-4);
            assert!((ms.e_exp[i] - 2f64.exp()).abs() < 1e-4);
        }
        let map = field_posterior_mean_map(&f, &g, &x, 8, 3).unwrap();
        assert!(map.iter().all(|v| (v.unwrap() - 2.0).abs() < 1e-5));
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let (g, x) = grid(10);
        let f = init_field(FieldName::GamLs, x.rows(0, 4).into_owned(), MaternHyper::new(1.0, 1.0).unwrap(), 2, 3, 8, 0.1, 5).unwrap();
        let a = draw_moments(&f, &g, &x, 8, 42).unwrap();
        let b = draw_moments(&f, &g, &x, 8, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.recompute(), a);
        let c = draw_moments(&f, &g, &x, 8, 43).unwrap();
        assert_ne!(a.v, c.v);
    }

    #[test]
    fn masked_location_is_absent() {
        let (mut g, x) = grid(3);
        g.locations[1].has_building = false;
        g.locations[1].prior_ls = 0.0;
        g.locations[1].prior_lf = 0.0;
        g.compute_active_masks(0.01);
        let f = constant_field(1.0, 1.0, 0);
        let map = field_posterior_mean_map(&f, &g, &x, 8, 3).unwrap();
        assert!(map[0].is_some() && map[1].is_none() && map[2].is_some());
    }

    #[test]
    fn moment_consistency() {
        let (g, x) = grid(8);
        let f = init_field(FieldName::GamLs, x.rows(0, 4).into_owned(), MaternHyper::new(1.0, 1.0).unwrap(), 2, 4, 8, 0.3, 5).unwrap();
        let ms = draw_moments(&f, &g, &x, 1000, 2).unwrap();
        for i in 0..8 {
            assert!(ms.e_v2[i] - ms.e_v[i] * ms.e_v[i] >= -1e-9);
            assert!(ms.e_exp[i] * ms.e_exp_neg[i] >= 1.0 - 1e-6);
        }
    }

    #[test]
    fn mean_network_gradient_matches_finite_differences() {
        let net = MeanNetwork::init(3, 5, &[1, 2]);
        let x = [0.3, -1.2, 0.8];
        let mut g = vec![0.0; net.params.len()];
        net.backward(&x, 1.0, &mut g);
        for i in 0..net.params.len() {
            let mut p = net.clone();
            let mut m = net.clone();
            p.params[i] += 1e-6;
            m.params[i] -= 1e-6;
            let fd = (p.forward(&x) - m.forward(&x)) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-7 * fd.abs().max(1.0), "param {i}");
        }
    }

    #[test]
    fn params_round_trip() {
        let (_, x) = grid(10);
        let f = init_field(FieldName::LamBd, x.rows(0, 5).into_owned(), MaternHyper::new(1.3, 0.7).unwrap(), 2, 3, 6, 0.1, 1).unwrap();
        let mut flat = Vec::new();
        f.write_params(&mut flat);
        assert_eq!(flat.len(), f.shape().n_params());
        let mut g = f.clone();
        g.inducing.q_u.mean.fill(9.0);
        assert_eq!(g.read_params(&flat), flat.len());
        let mut back = Vec::new();
        g.write_params(&mut back);
        for (a, b) in flat.iter().zip(&back) {
            assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
        }
    }
}
