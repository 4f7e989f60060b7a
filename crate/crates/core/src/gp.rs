//! Matérn-3/2 kernels over standardized feature space, sparse inducing-point
//! conditionals, low-rank-plus-diagonal Gaussians and their KL divergences.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

const SQRT3: f64 = 1.732_050_807_568_877_2;

/// Relative jitter used when a kernel is created from a variance alone.
pub const DEFAULT_RELATIVE_JITTER: f64 = 1e-6;
const MAX_JITTER_DOUBLINGS: u32 = 8;

/// Hyperparameters of a Matérn kernel with smoothness fixed at 3/2.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaternHyper {
    pub variance: f64,
    pub length_scale: f64,
    pub jitter: f64,
}

impl MaternHyper {
    pub fn new(variance: f64, length_scale: f64) -> Result<Self> {
        let h = MaternHyper {
            variance,
            length_scale,
            jitter: DEFAULT_RELATIVE_JITTER * variance,
        };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.variance) || !ok(self.length_scale) || !ok(self.jitter) {
            return Err(Error::Invalid(format!(
                "kernel hyperparameters must be positive and finite: {self:?}"
            )));
        }
        Ok(())
    }

    /// Kernel value at Euclidean feature distance `r`.
    #[inline]
    pub fn eval_r(&self, r: f64) -> f64 {
        let a = SQRT3 * r / self.length_scale;
        self.variance * (1.0 + a) * (-a).exp()
    }

    /// `(k, dk/dlog σ², dk/dlog ℓ)` at distance `r`.
    #[inline]
    pub fn eval_r_with_grad(&self, r: f64) -> (f64, f64, f64) {
        let a = SQRT3 * r / self.length_scale;
        let e = (-a).exp();
        let k = self.variance * (1.0 + a) * e;
        (k, k, self.variance * a * a * e)
    }
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn matern32(gf_i: &[f64], gf_j: &[f64], hyper: &MaternHyper) -> Result<f64> {
    if gf_i.len() != gf_j.len() {
        return Err(Error::Shape(format!(
            "feature vectors of length {} and {}",
            gf_i.len(),
            gf_j.len()
        )));
    }
    if gf_i.iter().chain(gf_j).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("kernel input".into()));
    }
    hyper.validate()?;
    Ok(hyper.eval_r(sq_dist(gf_i, gf_j).sqrt()))
}

fn row(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    m.row(i).iter().copied().collect()
}

/// Rows of `points_a` against rows of `points_b`.
pub fn gram(
    points_a: &DMatrix<f64>,
    points_b: &DMatrix<f64>,
    hyper: &MaternHyper,
    add_jitter: bool,
) -> Result<DMatrix<f64>> {
    if points_a.ncols() != points_b.ncols() {
        return Err(Error::Shape(format!(
            "feature dimensions {} and {}",
            points_a.ncols(),
            points_b.ncols()
        )));
    }
    let ra: Vec<Vec<f64>> = (0..points_a.nrows()).map(|i| row(points_a, i)).collect();
    let rb: Vec<Vec<f64>> = (0..points_b.nrows()).map(|i| row(points_b, i)).collect();
    let mut k = DMatrix::from_fn(ra.len(), rb.len(), |i, j| {
        hyper.eval_r(sq_dist(&ra[i], &rb[j]).sqrt())
    });
    if add_jitter && k.is_square() {
        for i in 0..k.nrows() {
            k[(i, i)] += hyper.jitter;
        }
    }
    Ok(k)
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Cholesky of `m + extra·I`, doubling `extra` up to eight times on failure.
/// Returns the factor and the extra diagonal that was actually added.
pub fn robust_cholesky(m: &DMatrix<f64>, jitter: f64) -> Result<(Cholesky<f64, Dyn>, f64)> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok((c, 0.0));
    }
    let mut extra = jitter;
    for _ in 0..MAX_JITTER_DOUBLINGS {
        let mut a = m.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += extra;
        }
        if let Some(c) = Cholesky::new(a) {
            return Ok((c, extra));
        }
        extra *= 2.0;
    }
    Err(Error::Conditioning {
        jitter: extra,
        min_eigenvalue: min_eigenvalue(m),
    })
}

pub(crate) fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Gaussian `N(mean, L·Lᵀ + diag(diag))`.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalGaussian {
    pub mean: DVector<f64>,
    pub low_rank: DMatrix<f64>,
    pub diag: DVector<f64>,
}

impl VariationalGaussian {
    pub fn new(mean: DVector<f64>, low_rank: DMatrix<f64>, diag: DVector<f64>) -> Result<Self> {
        let n = mean.len();
        if low_rank.nrows() != n || diag.len() != n || low_rank.ncols() > n {
            return Err(Error::Shape(format!(
                "mean {n}, low rank {}x{}, diag {}",
                low_rank.nrows(),
                low_rank.ncols(),
                diag.len()
            )));
        }
        if diag.iter().any(|&d| !(d > 0.0)) {
            return Err(Error::Invalid("diagonal must be strictly positive".into()));
        }
        Ok(VariationalGaussian {
            mean,
            low_rank,
            diag,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn rank(&self) -> usize {
        self.low_rank.ncols()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let mut s = &self.low_rank * self.low_rank.transpose();
        for i in 0..self.dim() {
            s[(i, i)] += self.diag[i];
        }
        s
    }
}

/// `μ + L·eps1 + diag(√δ)·eps2`.
pub fn sample_reparam(q: &VariationalGaussian, eps1: &[f64], eps2: &[f64]) -> Result<DVector<f64>> {
    if eps1.len() != q.rank() || eps2.len() != q.dim() {
        return Err(Error::Shape(format!(
            "noise lengths ({}, {}) for rank {} dimension {}",
            eps1.len(),
            eps2.len(),
            q.rank(),
            q.dim()
        )));
    }
    let e1 = DVector::from_column_slice(eps1);
    let mut out = &q.mean + &q.low_rank * e1;
    for i in 0..q.dim() {
        out[i] += q.diag[i].sqrt() * eps2[i];
    }
    Ok(out)
}

/// KL divergence and its gradients.
#[derive(Clone, Debug)]
pub struct KlGrad {
    pub value: f64,
    pub d_mean: DVector<f64>,
    pub d_low_rank: DMatrix<f64>,
    pub d_diag: DVector<f64>,
    pub d_prior_mean: DVector<f64>,
    /// Gradient with respect to every entry of the prior covariance.
    pub d_prior_cov: DMatrix<f64>,
}

fn check_prior(q: &VariationalGaussian, prior_mean: &DVector<f64>, prior_cov: &DMatrix<f64>) -> Result<()> {
    let n = q.dim();
    if prior_mean.len() != n || prior_cov.nrows() != n || prior_cov.ncols() != n {
        return Err(Error::Shape(format!(
            "q has dimension {n}, prior mean {} and covariance {}x{}",
            prior_mean.len(),
            prior_cov.nrows(),
            prior_cov.ncols()
        )));
    }
    Ok(())
}

fn prior_cholesky(prior_cov: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(prior_cov.clone()).ok_or_else(|| Error::Conditioning {
        jitter: 0.0,
        min_eigenvalue: min_eigenvalue(prior_cov),
    })
}

/// `KL(q ‖ N(prior_mean, prior_cov))`.
pub fn kl_gaussian(
    q: &VariationalGaussian,
    prior_mean: &DVector<f64>,
    prior_cov: &DMatrix<f64>,
) -> Result<f64> {
    check_prior(q, prior_mean, prior_cov)?;
    let kc = prior_cholesky(prior_cov)?;
    let sigma = q.covariance();
    let sc = Cholesky::new(sigma.clone())
        .ok_or_else(|| Error::NonFinite("variational covariance".into()))?;
    let d = &q.mean - prior_mean;
    let kinv_sigma = kc.solve(&sigma);
    let kinv_d = kc.solve(&d);
    let n = q.dim() as f64;
    Ok(0.5 * (kinv_sigma.trace() + d.dot(&kinv_d) + log_det(&kc) - log_det(&sc) - n))
}

pub fn kl_gaussian_with_grad(
    q: &VariationalGaussian,
    prior_mean: &DVector<f64>,
    prior_cov: &DMatrix<f64>,
) -> Result<KlGrad> {
    check_prior(q, prior_mean, prior_cov)?;
    let kc = prior_cholesky(prior_cov)?;
    let kinv = kc.inverse();
    kl_with_inverse(q, prior_mean, &kinv, log_det(&kc))
}

/// KL and gradients given a precomputed prior inverse and log-determinant.
pub(crate) fn kl_with_inverse(
    q: &VariationalGaussian,
    prior_mean: &DVector<f64>,
    kinv: &DMatrix<f64>,
    prior_log_det: f64,
) -> Result<KlGrad> {
    let sigma = q.covariance();
    let sc = Cholesky::new(sigma.clone())
        .ok_or_else(|| Error::NonFinite("variational covariance".into()))?;
    let sinv = sc.inverse();
    let d = &q.mean - prior_mean;
    let kinv_d = kinv * &d;
    let kinv_sigma = kinv * &sigma;
    let n = q.dim() as f64;
    let value = 0.5 * (kinv_sigma.trace() + d.dot(&kinv_d) + prior_log_det - log_det(&sc) - n);

    let d_sigma = (kinv - &sinv) * 0.5;
    let d_low_rank = (&d_sigma + d_sigma.transpose()) * &q.low_rank;
    let d_diag = d_sigma.diagonal();
    let d_prior_cov = (kinv - &kinv_sigma * kinv - &kinv_d * kinv_d.transpose()) * 0.5;
    Ok(KlGrad {
        value,
        d_mean: kinv_d.clone(),
        d_low_rank,
        d_diag,
        d_prior_mean: -kinv_d,
        d_prior_cov,
    })
}

/// Inducing inputs in feature space and the variational distribution over
/// the latent field values there.
#[derive(Clone, Debug, PartialEq)]
pub struct InducingSet {
    pub points: DMatrix<f64>,
    pub q_u: VariationalGaussian,
}

impl InducingSet {
    pub fn new(points: DMatrix<f64>, q_u: VariationalGaussian) -> Result<Self> {
        let m = points.nrows();
        if m == 0 {
            return Err(Error::Invalid("at least one inducing point is required".into()));
        }
        if q_u.dim() != m {
            return Err(Error::Shape(format!(
                "{m} inducing points but q_u has dimension {}",
                q_u.dim()
            )));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("inducing points".into()));
        }
        for i in 0..m {
            for j in 0..i {
                let d: f64 = (0..points.ncols())
                    .map(|c| (points[(i, c)] - points[(j, c)]).powi(2))
                    .sum();
                if d <= 0.0 {
                    return Err(Error::Invalid(format!(
                        "inducing points {j} and {i} coincide"
                    )));
                }
            }
        }
        Ok(InducingSet { points, q_u })
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }
}

/// Selects `m` distinct inducing inputs by k-means over the rows of
/// `features` (k-means++ seeding, fixed iteration count).
pub fn kmeans_inducing(features: &DMatrix<f64>, m: usize, seed: u64, iterations: usize) -> Result<DMatrix<f64>> {
    use rand::Rng;

    let n = features.nrows();
    let d = features.ncols();
    let rows: Vec<Vec<f64>> = (0..n).map(|i| row(features, i)).collect();
    let mut distinct: Vec<usize> = Vec::new();
    for i in 0..n {
        if distinct.iter().all(|&j| sq_dist(&rows[i], &rows[j]) > 0.0) {
            distinct.push(i);
            if distinct.len() > m {
                break;
            }
        }
    }
    if distinct.len() < m {
        return Err(Error::Invalid(format!(
            "requested {m} inducing points but only {} distinct feature vectors exist",
            distinct.len()
        )));
    }
    if distinct.len() == m && m == n {
        return Ok(features.clone());
    }

    let mut rng = rng::stream(&[rng::TAG_KMEANS, seed]);
    let mut centers: Vec<Vec<f64>> = vec![rows[rng.random_range(0..n)].clone()];
    let mut nearest = vec![f64::INFINITY; n];
    while centers.len() < m {
        let last = centers.last().unwrap();
        for i in 0..n {
            nearest[i] = nearest[i].min(sq_dist(&rows[i], last));
        }
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut t = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if t < w {
                    chosen = i;
                    break;
                }
                t -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.push(rows[pick].clone());
    }

    let mut assign = vec![0usize; n];
    for _ in 0..iterations {
        for i in 0..n {
            let mut best = (f64::INFINITY, 0);
            for (c, ctr) in centers.iter().enumerate() {
                let dd = sq_dist(&rows[i], ctr);
                if dd < best.0 {
                    best = (dd, c);
                }
            }
            assign[i] = best.1;
        }
        let mut sums = vec![vec![0.0; d]; m];
        let mut counts = vec![0usize; m];
        for i in 0..n {
            counts[assign[i]] += 1;
            for c in 0..d {
                sums[assign[i]][c] += rows[i][c];
            }
        }
        for c in 0..m {
            if counts[c] > 0 {
                for k in 0..d {
                    centers[c][k] = sums[c][k] / counts[c] as f64;
                }
            } else {
                // re-seed an empty cluster at the point farthest from its center
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(&rows[a], &centers[assign[a]])
                            .total_cmp(&sq_dist(&rows[b], &centers[assign[b]]))
                    })
                    .unwrap();
                centers[c] = rows[far].clone();
            }
        }
    }

    // Coincident centers can only come from duplicate seeds; nudge them apart.
    for c in 1..m {
        while (0..c).any(|p| sq_dist(&centers[c], &centers[p]) <= 1e-20) {
            centers[c][0] += 1e-6;
        }
    }
    Ok(DMatrix::from_fn(m, d, |i, j| centers[i][j]))
}

/// Quantities of the inducing-point conditional shared by every target.
#[derive(Clone, Debug)]
pub struct SparsePrecomp {
    pub kuu_inv: DMatrix<f64>,
    pub kuu_log_det: f64,
    /// `K_uu⁻¹(μ_u − m_u)`
    pub alpha: DVector<f64>,
    /// `K_uu⁻¹ Σ_u K_uu⁻¹ − K_uu⁻¹`
    pub b: DMatrix<f64>,
    pub sigma_u: DMatrix<f64>,
    /// Diagonal actually added to `K_uu` (kernel jitter plus any escalation).
    pub jitter_used: f64,
}

impl SparsePrecomp {
    pub fn new(inducing: &InducingSet, hyper: &MaternHyper, prior_mean_u: &DVector<f64>) -> Result<Self> {
        if prior_mean_u.len() != inducing.len() {
            return Err(Error::Shape("prior mean at inducing points".into()));
        }
        let kuu = gram(&inducing.points, &inducing.points, hyper, true)?;
        let (chol, extra) = robust_cholesky(&kuu, hyper.jitter)?;
        let kuu_inv = chol.inverse();
        let sigma_u = inducing.q_u.covariance();
        let alpha = &kuu_inv * (&inducing.q_u.mean - prior_mean_u);
        let b = &kuu_inv * &sigma_u * &kuu_inv - &kuu_inv;
        Ok(SparsePrecomp {
            kuu_log_det: log_det(&chol),
            kuu_inv,
            alpha,
            b,
            sigma_u,
            jitter_used: hyper.jitter + extra,
        })
    }

    /// Cross-covariance vector `k_u(t)` for one target.
    pub fn k_vec(&self, inducing: &InducingSet, hyper: &MaternHyper, target: &[f64]) -> DVector<f64> {
        let m = inducing.len();
        DVector::from_fn(m, |j, _| {
            let p: Vec<f64> = inducing.points.row(j).iter().copied().collect();
            hyper.eval_r(sq_dist(&p, target).sqrt())
        })
    }

    /// Conditional mean offset `k·α` and raw (unclamped) marginal variance.
    pub fn moments(&self, hyper: &MaternHyper, k: &DVector<f64>) -> (f64, f64) {
        let bk = &self.b * k;
        (k.dot(&self.alpha), hyper.variance + k.dot(&bk))
    }
}

/// Marginal mean and variance of the sparse conditional at each target row.
/// Negative variances from round-off are clamped to zero; the number of
/// clamps is returned alongside.
pub fn sparse_conditional(
    inducing: &InducingSet,
    hyper: &MaternHyper,
    targets: &DMatrix<f64>,
    prior_mean_u: &DVector<f64>,
    prior_mean_t: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>, usize)> {
    if targets.ncols() != inducing.points.ncols() {
        return Err(Error::Shape("target feature dimension".into()));
    }
    if prior_mean_t.len() != targets.nrows() {
        return Err(Error::Shape("prior mean at targets".into()));
    }
    let pre = SparsePrecomp::new(inducing, hyper, prior_mean_u)?;
    let n = targets.nrows();
    let mut mean = DVector::zeros(n);
    let mut var = DVector::zeros(n);
    let mut clamps = 0;
    for t in 0..n {
        let tr = row(targets, t);
        let k = pre.k_vec(inducing, hyper, &tr);
        let (off, v) = pre.moments(hyper, &k);
        mean[t] = prior_mean_t[t] + off;
        if v < 0.0 {
            clamps += 1;
            var[t] = 0.0;
        } else {
            var[t] = v;
        }
    }
    Ok((mean, var, clamps))
}
