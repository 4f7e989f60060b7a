//! Forward sampling of the causal model on a synthetic lattice, plus an
//! exact enumeration posterior for single locations.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::causal_elbo::{sigmoid, Model, NoiseWeights};
use crate::coeff_field::{CoefficientField, FieldName, MeanNetwork};
use crate::error::{Error, Result};
use crate::flows::{FlowStack, PlanarLayer};
use crate::geogrid::{
    FeatureEncoding, GridDataset, Location, Node, DEFAULT_DPM_FLOOR, FEAT_CTI, FEAT_LANDCOVER, FEAT_LITHOLOGY,
    FEAT_SLOPE, FEAT_WATER, N_FEATURES,
};
use crate::gp::{InducingSet, MaternHyper, VariationalGaussian};
use crate::rng::{self, TAG_SYNTH};

/// One ground-truth coefficient surface over standardized features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrueSurface {
    /// `offset + scale · standardize(flow(z(x)))` where `z` is a Matérn-3/2
    /// random-feature draw over standardized features and `flow` is a random
    /// invertible planar stack of `flow_depth` layers.
    GpFlow {
        offset: f64,
        scale: f64,
        length_scale: f64,
        flow_depth: usize,
    },
    /// `offset + weights · x`
    Linear { offset: f64, weights: [f64; N_FEATURES] },
    Constant { value: f64 },
}

impl TrueSurface {
    fn validate(&self) -> Result<()> {
        let ok = match self {
            TrueSurface::GpFlow {
                offset,
                scale,
                length_scale,
                ..
            } => offset.is_finite() && scale.is_finite() && *length_scale > 0.0,
            TrueSurface::Linear { offset, weights } => offset.is_finite() && weights.iter().all(|w| w.is_finite()),
            TrueSurface::Constant { value } => value.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config("true surface parameters must be finite with positive length scale".into()))
        }
    }
}

fn gp_flow(offset: f64, scale: f64) -> TrueSurface {
    TrueSurface::GpFlow {
        offset,
        scale,
        length_scale: 2.0,
        flow_depth: 6,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrueFields {
    pub lam_ls: TrueSurface,
    pub lam_lf: TrueSurface,
    pub lam_bd: TrueSurface,
    pub gam_als: TrueSurface,
    pub gam_alf: TrueSurface,
    pub gam_ls: TrueSurface,
    pub gam_lf: TrueSurface,
}

impl Default for TrueFields {
    fn default() -> Self {
        TrueFields {
            lam_ls: gp_flow(1.5, 0.4),
            lam_lf: gp_flow(2.5, 0.5),
            lam_bd: gp_flow(3.0, 0.6),
            gam_als: gp_flow(6.0, 1.5),
            gam_alf: gp_flow(6.0, 1.5),
            gam_ls: gp_flow(3.0, 0.8),
            gam_lf: gp_flow(3.0, 0.8),
        }
    }
}

impl TrueFields {
    pub fn get(&self, name: FieldName) -> &TrueSurface {
        match name {
            FieldName::LamLs => &self.lam_ls,
            FieldName::LamLf => &self.lam_lf,
            FieldName::LamBd => &self.lam_bd,
            FieldName::GamAlphaLs => &self.gam_als,
            FieldName::GamAlphaLf => &self.gam_alf,
            FieldName::GamLs => &self.gam_ls,
            FieldName::GamLf => &self.gam_lf,
        }
    }

    pub fn get_mut(&mut self, name: FieldName) -> &mut TrueSurface {
        match name {
            FieldName::LamLs => &mut self.lam_ls,
            FieldName::LamLf => &mut self.lam_lf,
            FieldName::LamBd => &mut self.lam_bd,
            FieldName::GamAlphaLs => &mut self.gam_als,
            FieldName::GamAlphaLf => &mut self.gam_alf,
            FieldName::GamLs => &mut self.gam_ls,
            FieldName::GamLf => &mut self.gam_lf,
        }
    }

    /// Sets every `GpFlow` surface to use `depth` truth flow layers.
    pub fn with_flow_depth(mut self, depth: usize) -> Self {
        for n in FieldName::ALL {
            if let TrueSurface::GpFlow { flow_depth, .. } = self.get_mut(n) {
                *flow_depth = depth;
            }
        }
        self
    }
}

/// Smooth random feature fields on the lattice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureModel {
    /// Correlation length of each feature field, in grid cells.
    pub length_scales: [f64; N_FEATURES],
    /// Random Fourier basis size per field.
    pub n_basis: usize,
}

impl Default for FeatureModel {
    fn default() -> Self {
        FeatureModel {
            length_scales: [12.0, 6.0, 8.0, 16.0, 6.0, 10.0, 14.0],
            n_basis: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// (rows, cols)
    pub grid_dims: [usize; 2],
    pub feature_model: FeatureModel,
    pub true_fields: TrueFields,
    pub true_noise: NoiseWeights,
    pub building_rate: f64,
    /// Intercept of the landslide prior logit (slope in degrees).
    pub alpha_ls_offset: f64,
    /// Intercept of the liquefaction prior logit (standardized CTI and water distance).
    pub alpha_lf_offset: f64,
    pub dpm_floor: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            grid_dims: [64, 64],
            feature_model: FeatureModel::default(),
            true_fields: TrueFields::default(),
            true_noise: NoiseWeights {
                w0_y: 0.0,
                we_y: 0.4,
                w0: [-3.0, -3.0, -1.5],
                we: [0.5; 3],
            },
            building_rate: 0.4,
            alpha_ls_offset: -3.0,
            alpha_lf_offset: -3.0,
            dpm_floor: DEFAULT_DPM_FLOOR,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_dims[0] == 0 || self.grid_dims[1] == 0 {
            return Err(Error::Config("grid_dims must be positive".into()));
        }
        if self.grid_dims[0] * self.grid_dims[1] < 2 {
            return Err(Error::Config("synthetic grids need at least two cells".into()));
        }
        if !(0.0..=1.0).contains(&self.building_rate) {
            return Err(Error::Config("building_rate must lie in [0, 1]".into()));
        }
        if !(self.dpm_floor > 0.0) {
            return Err(Error::Config("dpm_floor must be positive".into()));
        }
        if self.feature_model.n_basis == 0 || self.feature_model.length_scales.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::Config("feature model needs positive length scales and basis size".into()));
        }
        self.true_noise.validate()?;
        for n in FieldName::ALL {
            self.true_fields.get(n).validate()?;
        }
        Ok(())
    }
}

/// What the generator drew, per location.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTruth {
    /// Binary draws indexed by [`Node::index`].
    pub x: Vec<[bool; 3]>,
    /// True coefficient values indexed by [`FieldName::index`].
    pub coefficients: Vec<[f64; 7]>,
    /// Realized noise (ε_LS, ε_LF, ε_BD, ε_y).
    pub eps: Vec<[f64; 4]>,
}

/// Random Fourier features: `sqrt(2/D) Σ cos(ωᵀx + b)`.
struct FourierField {
    omega: DMatrix<f64>,
    phase: DVector<f64>,
}

impl FourierField {
    /// `dof = None` gives a squared-exponential spectrum, `Some(3.0)` Matérn-3/2.
    fn new(key: &[u64], dim: usize, n_basis: usize, length_scale: f64, dof: Option<f64>) -> Self {
        let mut r = rng::stream(key);
        let mut omega = DMatrix::zeros(n_basis, dim);
        let mut phase = DVector::zeros(n_basis);
        for k in 0..n_basis {
            let mix = match dof {
                Some(nu) => {
                    let chi: f64 = (0..nu as usize)
                        .map(|_| {
                            let g: f64 = StandardNormal.sample(&mut r);
                            g * g
                        })
                        .sum();
                    (nu / chi).sqrt()
                }
                None => 1.0,
            };
            for j in 0..dim {
                let g: f64 = StandardNormal.sample(&mut r);
                omega[(k, j)] = g * mix / length_scale;
            }
            phase[k] = r.random::<f64>() * std::f64::consts::TAU;
        }
        FourierField { omega, phase }
    }

    fn eval(&self, x: &[f64]) -> f64 {
        let d = self.omega.nrows();
        let mut s = 0.0;
        for k in 0..d {
            let dot: f64 = x.iter().enumerate().map(|(j, v)| self.omega[(k, j)] * v).sum();
            s += (dot + self.phase[k]).cos();
        }
        s * (2.0 / d as f64).sqrt()
    }
}

fn random_flow(key: &[u64], depth: usize) -> FlowStack {
    let mut r = rng::stream(key);
    let mut flow = FlowStack::new(
        (0..depth)
            .map(|_| {
                let sign = if r.random::<bool>() { 1.0 } else { -1.0 };
                let b: f64 = StandardNormal.sample(&mut r);
                PlanarLayer {
                    u: sign * r.random_range(0.5..1.5),
                    c: r.random_range(0.8..2.0),
                    b: 0.5 * b,
                }
            })
            .collect(),
    );
    flow.enforce_all();
    flow
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Maps a roughly standard-normal field value to a physical feature value.
fn physical_feature(j: usize, f: f64) -> f64 {
    match j {
        0 => (400.0 + 150.0 * f).max(100.0),
        FEAT_SLOPE => (15.0 + 10.0 * f).clamp(0.0, 60.0),
        FEAT_LANDCOVER => (std_normal_cdf(f) * 8.0).floor().min(7.0),
        3 => 300.0 + 200.0 * f,
        FEAT_CTI => 8.0 + 3.0 * f,
        FEAT_WATER => (2.0 + 1.5 * f).max(0.0),
        FEAT_LITHOLOGY => (std_normal_cdf(f) * 5.0).floor().min(4.0),
        _ => unreachable!(),
    }
}

/// Landslide prior from slope in degrees.
pub fn alpha_ls(slope_deg: f64, offset: f64) -> f64 {
    sigmoid(0.15 * slope_deg + offset)
}

/// Liquefaction prior from standardized CTI and water distance.
pub fn alpha_lf(cti_z: f64, water_z: f64, offset: f64) -> f64 {
    sigmoid(2.0 * cti_z - 0.5 * water_z + offset)
}

/// Evaluates every truth surface at every location of a standardized grid.
fn truth_coefficients(cfg: &SynthConfig, design: &DMatrix<f64>) -> Vec<[f64; 7]> {
    let n = design.nrows();
    let d = design.ncols();
    let mut out = vec![[0.0; 7]; n];
    for name in FieldName::ALL {
        let fi = name.index();
        let col: Vec<f64> = match cfg.true_fields.get(name) {
            TrueSurface::Constant { value } => vec![*value; n],
            TrueSurface::Linear { offset, weights } => (0..n)
                .map(|l| offset + (0..d).map(|j| weights[j] * design[(l, j)]).sum::<f64>())
                .collect(),
            TrueSurface::GpFlow {
                offset,
                scale,
                length_scale,
                flow_depth,
            } => {
                let rff = FourierField::new(&[TAG_SYNTH, cfg.seed, 2, fi as u64], d, 256, *length_scale, Some(3.0));
                let flow = random_flow(&[TAG_SYNTH, cfg.seed, 3, fi as u64], *flow_depth);
                let raw: Vec<f64> = (0..n)
                    .into_par_iter()
                    .map(|l| {
                        let x: Vec<f64> = design.row(l).iter().copied().collect();
                        flow.apply(rff.eval(&x))
                    })
                    .collect();
                let mean = raw.iter().sum::<f64>() / n as f64;
                let sd = (raw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
                let sd = if sd > 1e-12 { sd } else { 1.0 };
                raw.iter().map(|v| offset + scale * (v - mean) / sd).collect()
            }
        };
        for (l, v) in col.into_iter().enumerate() {
            out[l][fi] = v;
        }
    }
    out
}

/// Samples a synthetic dataset and the truth that produced it.
///
/// A latent whose prior is exactly zero is treated as structurally absent
/// and never activates, matching the pruning convention for inactive nodes.
pub fn generate(cfg: &SynthConfig) -> Result<(GridDataset, SyntheticTruth)> {
    cfg.validate()?;
    let [rows, cols] = cfg.grid_dims;
    let n = rows * cols;

    let fields: Vec<FourierField> = (0..N_FEATURES)
        .map(|j| {
            FourierField::new(
                &[TAG_SYNTH, cfg.seed, 1, j as u64],
                2,
                cfg.feature_model.n_basis,
                cfg.feature_model.length_scales[j],
                None,
            )
        })
        .collect();
    // Each lattice field is standardized over the grid so every feature
    // spans its physical range regardless of grid size.
    let mut latent: Vec<[f64; N_FEATURES]> = (0..n)
        .into_par_iter()
        .map(|l| {
            let p = [(l / cols) as f64, (l % cols) as f64];
            let mut g = [0.0; N_FEATURES];
            for j in 0..N_FEATURES {
                g[j] = fields[j].eval(&p);
            }
            g
        })
        .collect();
    for j in 0..N_FEATURES {
        let mean = latent.iter().map(|g| g[j]).sum::<f64>() / n as f64;
        let sd = (latent.iter().map(|g| (g[j] - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        let sd = if sd > 1e-12 { sd } else { 1.0 };
        latent.iter_mut().for_each(|g| g[j] = (g[j] - mean) / sd);
    }
    let gf: Vec<[f64; N_FEATURES]> = latent
        .iter()
        .map(|z| std::array::from_fn(|j| physical_feature(j, z[j])))
        .collect();

    let mut locations: Vec<Location> = (0..n)
        .map(|l| Location {
            id: l,
            lon: (l % cols) as f64,
            lat: (l / cols) as f64,
            gf: gf[l],
            prior_ls: 0.0,
            prior_lf: 0.0,
            has_building: false,
            dpm: None,
        })
        .collect();
    let mut std_grid = GridDataset::new(locations.clone())?;
    std_grid.standardize_features()?;
    let design = std_grid.design_matrix(FeatureEncoding::Codes);
    let coefficients = truth_coefficients(cfg, &design);

    let noise = &cfg.true_noise;
    let sampled: Vec<(f64, f64, bool, [bool; 3], [f64; 4], f64)> = (0..n)
        .into_par_iter()
        .map(|l| {
            let z = &std_grid.locations[l].gf;
            let a_ls = alpha_ls(gf[l][FEAT_SLOPE], cfg.alpha_ls_offset);
            let a_lf = alpha_lf(z[FEAT_CTI], z[FEAT_WATER], cfg.alpha_lf_offset);
            let c = &coefficients[l];
            let mut r = rng::stream(&[TAG_SYNTH, cfg.seed, 4, l as u64]);
            let mut eps = [0.0; 4];
            for e in &mut eps {
                *e = StandardNormal.sample(&mut r);
            }
            let u: [f64; 4] = [r.random(), r.random(), r.random(), r.random()];
            let building = u[3] < cfg.building_rate;
            let draw = |logit: f64, ui: f64| ui < sigmoid(logit);
            let x_ls = a_ls > 0.0
                && draw(
                    noise.w0[0] + c[FieldName::GamAlphaLs.index()] * a_ls + noise.we[0] * eps[0],
                    u[0],
                );
            let x_lf = a_lf > 0.0
                && draw(
                    noise.w0[1] + c[FieldName::GamAlphaLf.index()] * a_lf + noise.we[1] * eps[1],
                    u[1],
                );
            let x_bd = building
                && draw(
                    noise.w0[2]
                        + c[FieldName::GamLs.index()] * f64::from(u8::from(x_ls))
                        + c[FieldName::GamLf.index()] * f64::from(u8::from(x_lf))
                        + noise.we[2] * eps[2],
                    u[2],
                );
            let x = [x_ls, x_lf, x_bd];
            let lam = [
                c[FieldName::LamLs.index()],
                c[FieldName::LamLf.index()],
                c[FieldName::LamBd.index()],
            ];
            let log_y = noise.w0_y
                + (0..3).map(|i| lam[i] * f64::from(u8::from(x[i]))).sum::<f64>()
                + noise.we_y * eps[3];
            let y = log_y.exp().max(cfg.dpm_floor);
            (a_ls, a_lf, building, x, eps, y)
        })
        .collect();

    let mut x = Vec::with_capacity(n);
    let mut eps = Vec::with_capacity(n);
    for (loc, (a_ls, a_lf, building, xl, el, y)) in locations.iter_mut().zip(sampled) {
        loc.prior_ls = a_ls;
        loc.prior_lf = a_lf;
        loc.has_building = building;
        loc.dpm = Some(y);
        x.push(xl);
        eps.push(el);
    }
    let mut grid = GridDataset::new(locations)?;
    grid.dpm_floor = cfg.dpm_floor;
    Ok((
        grid,
        SyntheticTruth {
            x,
            coefficients,
            eps,
        },
    ))
}

/// Gauss–Hermite nodes and weights for `∫ e^{−x²} f(x) dx`, by Newton
/// iteration on the orthonormal Hermite recurrence.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let mut z = 0.0f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * n as f64 + 1.0).sqrt() - 1.85575 * (2.0 * n as f64 + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * (n as f64).powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                p1 = z * (2.0 / (j as f64 + 1.0)).sqrt() * p2 - (j as f64 / (j as f64 + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * n as f64).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// `E[σ(a + s·ε)]`, ε ~ N(0,1), by 32-node Gauss–Hermite quadrature.
fn expected_sigmoid(a: f64, s: f64, gh: &(Vec<f64>, Vec<f64>)) -> f64 {
    let (x, w) = gh;
    let norm = std::f64::consts::PI.sqrt();
    x.iter()
        .zip(w)
        .map(|(xi, wi)| wi * sigmoid(a + s * std::f64::consts::SQRT_2 * xi))
        .sum::<f64>()
        / norm
}

/// Exact posterior marginals (LS, LF, BD) at one location given known
/// deterministic coefficients (indexed by [`FieldName::index`]).
///
/// Enumerates the joint latent configurations of the active nodes. Latent
/// noise is integrated by quadrature; the Gaussian observation noise has a
/// closed-form marginal.
pub fn exact_small_posterior(grid: &GridDataset, coefficients: &[f64; 7], noise: &NoiseWeights, loc: usize) -> [f64; 3] {
    let gh = gauss_hermite(32);
    let site = &grid.locations[loc];
    let act = Node::ALL.map(|n| grid.is_active(n, loc));
    let c = coefficients;
    let p_ls = expected_sigmoid(noise.w0[0] + c[FieldName::GamAlphaLs.index()] * site.prior_ls, noise.we[0], &gh);
    let p_lf = expected_sigmoid(noise.w0[1] + c[FieldName::GamAlphaLf.index()] * site.prior_lf, noise.we[1], &gh);
    let lam = [
        c[FieldName::LamLs.index()],
        c[FieldName::LamLf.index()],
        c[FieldName::LamBd.index()],
    ];
    let log_y = site.log_dpm(grid.dpm_floor);

    let mut log_w = Vec::with_capacity(8);
    for cfg in 0..8u8 {
        let x = [cfg & 1 == 1, cfg & 2 == 2, cfg & 4 == 4];
        if (0..3).any(|i| x[i] && !act[i]) {
            continue;
        }
        let xf = x.map(|b| f64::from(u8::from(b)));
        let bern = |p: f64, on: bool, active: bool| if !active { 1.0 } else if on { p } else { 1.0 - p };
        let p_bd = expected_sigmoid(
            noise.w0[2] + c[FieldName::GamLs.index()] * xf[0] + c[FieldName::GamLf.index()] * xf[1],
            noise.we[2],
            &gh,
        );
        let mut lw = (bern(p_ls, x[0], act[0]) * bern(p_lf, x[1], act[1]) * bern(p_bd, x[2], act[2])).ln();
        if let Some(ly) = log_y {
            let mu = noise.w0_y + (0..3).map(|i| lam[i] * xf[i]).sum::<f64>();
            lw += -0.5 * ((ly - mu) / noise.we_y).powi(2);
        }
        log_w.push((x, lw));
    }
    let mx = log_w.iter().map(|(_, l)| *l).fold(f64::NEG_INFINITY, f64::max);
    let mut marg = [0.0; 3];
    let mut total = 0.0;
    for (x, lw) in &log_w {
        let p = (lw - mx).exp();
        total += p;
        for i in 0..3 {
            if x[i] {
                marg[i] += p;
            }
        }
    }
    marg.map(|m| m / total)
}

/// A field whose value is `value` everywhere with negligible variance:
/// zero-weight mean network with output bias `value`, identity flow and one
/// inducing point far from any standardized feature vector.
pub fn deterministic_field(name: FieldName, value: f64, d_in: usize) -> Result<CoefficientField> {
    let variance = 1e-16;
    let hyper = MaternHyper::new(variance, 1.0)?;
    let points = DMatrix::from_element(1, d_in, 1e3);
    let q_u = VariationalGaussian::new(
        DVector::from_element(1, value),
        DMatrix::zeros(1, 1),
        DVector::from_element(1, variance),
    )?;
    let mut mean_net = MeanNetwork::zeros(d_in, 1);
    mean_net.set_output_bias(value);
    Ok(CoefficientField {
        name,
        mean_net,
        hyper,
        inducing: InducingSet::new(points, q_u)?,
        flow: FlowStack::identity(),
    })
}

/// A model whose seven fields are the constants `coefficients`.
pub fn deterministic_model(
    coefficients: &[f64; 7],
    noise: NoiseWeights,
    encoding: FeatureEncoding,
    d_in: usize,
) -> Result<Model> {
    let fields = FieldName::ALL
        .iter()
        .map(|&n| deterministic_field(n, coefficients[n.index()], d_in))
        .collect::<Result<Vec<_>>>()?;
    Ok(Model {
        fields,
        noise,
        encoding,
    })
}

pub const TRUTH_HEADER: [&str; 11] = [
    "id",
    "x_ls",
    "x_lf",
    "x_bd",
    "true_lam_ls",
    "true_lam_lf",
    "true_lam_bd",
    "true_gam_als",
    "true_gam_alf",
    "true_gam_ls",
    "true_gam_lf",
];

pub fn write_truth_csv<W: Write>(truth: &SyntheticTruth, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(TRUTH_HEADER)?;
    for (l, (x, c)) in truth.x.iter().zip(&truth.coefficients).enumerate() {
        let mut rec = vec![l.to_string()];
        rec.extend(x.iter().map(|&b| u8::from(b).to_string()));
        rec.extend(c.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<truth writer>", e))?;
    Ok(())
}
