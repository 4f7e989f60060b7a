//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any failed. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 1 12`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use geocausal::causal_elbo::{evaluate, latent_bound, EvalRequest, Model, NoiseWeights, PosteriorGrid};
use geocausal::coeff_field::{init_field, FieldName};
use geocausal::flows::{FlowStack, PlanarLayer};
use geocausal::geogrid::{FeatureEncoding, GridDataset, Location, Node, N_FEATURES};
use geocausal::gp::{kl_gaussian, matern32, sample_reparam, sparse_conditional, InducingSet, MaternHyper, VariationalGaussian};
use geocausal::inference::{fit, FitConfig, FitOutcome, Trainer};
use geocausal::metrics::{best_f1, roc_auc, ScoredLabels};
use geocausal::synth::{generate, SynthConfig, SyntheticTruth};
use geocausal::Error;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal(r: &mut ChaCha8Rng) -> f64 {
    r.sample(StandardNormal)
}

fn within(elapsed: Duration, limit_s: f64) -> Result<(), String> {
    if elapsed.as_secs_f64() < limit_s {
        Ok(())
    } else {
        Err(format!("runtime {:.1}s exceeds {limit_s}s", elapsed.as_secs_f64()))
    }
}

// ---------------------------------------------------------------- oracles

/// `K_ν(x) = ∫₀^∞ exp(−x·cosh t)·cosh(νt) dt` by the trapezoid rule, which
/// converges geometrically for this analytic, doubly-exponentially decaying
/// integrand.
fn bessel_k(nu: f64, x: f64) -> f64 {
    let upper = (800.0 / x + 1.0).acosh() + 1.0;
    let h = 0.01;
    let n = (upper / h).ceil() as usize;
    let f = |t: f64| (-x * t.cosh() + nu * t).exp() * 0.5 + (-x * t.cosh() - nu * t).exp() * 0.5;
    let mut s = 0.5 * f(0.0);
    for i in 1..=n {
        s += f(i as f64 * h);
    }
    s * h
}

/// General Matérn covariance at smoothness `nu`.
fn matern_general(r: f64, variance: f64, ls: f64, nu: f64) -> f64 {
    if r == 0.0 {
        return variance;
    }
    let x = (2.0 * nu).sqrt() * r / ls;
    variance * 2f64.powf(1.0 - nu) / statrs::function::gamma::gamma(nu) * x.powf(nu) * bessel_k(nu, x)
}

/// Gauss–Hermite rule for the standard normal from the eigen-decomposition
/// of the probabilists' Hermite Jacobi matrix.
fn golub_welsch(n: usize) -> (Vec<f64>, Vec<f64>) {
    let j = DMatrix::from_fn(n, n, |a, b| if a.abs_diff(b) == 1 { (a.max(b) as f64).sqrt() } else { 0.0 });
    let eig = SymmetricEigen::new(j);
    let nodes: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    let weights: Vec<f64> = (0..n).map(|i| eig.eigenvectors[(0, i)].powi(2)).collect();
    (nodes, weights)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn matern32_closed(r: f64, variance: f64, ls: f64) -> f64 {
    let a = 3f64.sqrt() * r / ls;
    variance * (1.0 + a) * (-a).exp()
}

fn brute_auc(s: &[f64], l: &[bool]) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0, 0usize);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if l[i] && !l[j] {
                pairs += 1;
                wins += if s[i] > s[j] {
                    1.0
                } else if s[i] == s[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    (pairs > 0).then(|| wins / pairs as f64)
}

fn brute_f1(s: &[f64], l: &[bool]) -> Option<(f64, f64)> {
    if !l.iter().any(|&x| x) {
        return None;
    }
    let mut best: Option<(f64, f64)> = None;
    for &t in s {
        let (mut tp, mut fp, mut fnn) = (0, 0, 0);
        for i in 0..s.len() {
            match (s[i] >= t, l[i]) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fnn += 1,
                _ => {}
            }
        }
        let f = 2.0 * tp as f64 / (2 * tp + fp + fnn) as f64;
        best = match best {
            Some((bf, bt)) if bf > f || (bf == f && bt <= t) => Some((bf, bt)),
            _ => Some((f, t)),
        };
    }
    best
}

// ---------------------------------------------------------------- helpers

fn column_auc(scores: &[[f64; 3]], labels: &[[bool; 3]], i: usize) -> Result<f64, Error> {
    roc_auc(&ScoredLabels::new(scores.iter().map(|v| v[i]).collect(), labels.iter().map(|v| v[i]).collect()))
}

fn prior_scores(grid: &GridDataset) -> Vec<[f64; 3]> {
    grid.locations.iter().map(|l| Node::ALL.map(|n| l.prior(n))).collect()
}

fn random_stack(r: &mut ChaCha8Rng, depth: usize) -> FlowStack {
    let mut s = FlowStack::new(
        (0..depth)
            .map(|_| PlanarLayer {
                u: normal(r),
                c: normal(r),
                b: normal(r),
            })
            .collect(),
    );
    s.enforce_all();
    s
}

/// A 4-location model with non-trivial values in every parameter block.
fn small_instance() -> (GridDataset, DMatrix<f64>, PosteriorGrid, Model) {
    let locs: Vec<Location> = (0..4)
        .map(|i| {
            let mut gf = [0.0; N_FEATURES];
            for (j, g) in gf.iter_mut().enumerate() {
                *g = ((i * 7 + j * 2) as f64 * 0.61).cos();
            }
            Location {
                id: i,
                lon: i as f64,
                lat: 0.0,
                gf,
                prior_ls: 0.25 + 0.1 * i as f64,
                prior_lf: 0.55 - 0.1 * i as f64,
                has_building: i != 1,
                dpm: if i == 2 { None } else { Some(0.3 + 0.9 * i as f64) },
            }
        })
        .collect();
    let grid = GridDataset::new(locs).unwrap();
    let design = grid.design_matrix(FeatureEncoding::Codes);
    let pts = DMatrix::from_fn(3, N_FEATURES, |i, j| ((i * 3 + j) as f64 * 0.9).sin());
    let fields = FieldName::ALL
        .iter()
        .map(|&n| {
            let k = n.index() as f64;
            let mut f = init_field(n, pts.clone(), MaternHyper::new(0.7, 1.3).unwrap(), 2, 3, 6, 0.15, 5).unwrap();
            for (i, m) in f.inducing.q_u.mean.iter_mut().enumerate() {
                *m = 0.25 * ((i as f64) - k).cos();
            }
            f.inducing.q_u.low_rank *= 15.0;
            for (i, l) in f.flow.layers.iter_mut().enumerate() {
                l.u = 0.5 - 0.25 * i as f64;
                l.c = 0.6 + 0.05 * k;
                l.b = 0.1 * k - 0.2;
            }
            f.flow.enforce_all();
            f
        })
        .collect();
    let model = Model {
        fields,
        noise: NoiseWeights {
            w0_y: 0.2,
            we_y: 0.7,
            w0: [-0.3, 0.1, 0.2],
            we: [0.4, 0.35, 0.5],
        },
        encoding: FeatureEncoding::Codes,
    };
    let mut post = PosteriorGrid::from_priors(&grid);
    post.q[0][2] = 0.3;
    post.q[3][0] = 0.8;
    (grid, design, post, model)
}

// ---------------------------------------------------------------- criteria

fn c1_kernel() -> Outcome {
    let t = Instant::now();
    let mut r = rng(1);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let rad = r.random_range(0.0..4.0);
        let var = r.random_range(0.1..4.0);
        let ls = r.random_range(0.2..3.0);
        let got = matern32(&[0.0], &[rad], &MaternHyper::new(var, ls).unwrap()).unwrap();
        worst = worst.max((got - matern_general(rad, var, ls, 1.5)).abs());
    }
    let unit = matern32(&[0.0], &[1.0], &MaternHyper::new(1.0, 1.0).unwrap()).unwrap();
    within(t.elapsed(), 1.0)?;
    let closed = (1.0 + 3f64.sqrt()) * (-(3f64.sqrt())).exp();
    check(
        worst < 1e-10 && (unit - closed).abs() < 1e-15 && (unit - 0.483_356).abs() < 5e-6,
        format!("max |Δ| {worst:.2e} over 1000 draws, k(1) = {unit:.6}"),
    )
}

fn c2_flows() -> Outcome {
    let t = Instant::now();
    let mut r = rng(2);
    let (mut worst_ld, mut worst_mass): (f64, f64) = (0.0, 0.0);
    for _ in 0..100 {
        let depth = r.random_range(1..=6);
        let s = random_stack(&mut r, depth);
        for _ in 0..5 {
            let z: f64 = r.random_range(-3.0..3.0);
            let h = 1e-3;
            let d = (-s.apply(z + 2.0 * h) + 8.0 * s.apply(z + h) - 8.0 * s.apply(z - h) + s.apply(z - 2.0 * h)) / (12.0 * h);
            worst_ld = worst_ld.max((s.forward(z).1 - d.abs().ln()).abs());
        }
        let n = 20_001;
        let (mut mass, mut prev) = (0.0, None::<(f64, f64)>);
        for i in 0..n {
            let z = -10.0 + 20.0 * i as f64 / (n - 1) as f64;
            let (v, ld) = s.forward(z);
            let p = (-0.5 * z * z - ld).exp() / (2.0 * std::f64::consts::PI).sqrt();
            if let Some((pv, pp)) = prev {
                mass += 0.5 * (p + pp) * (v - pv);
            }
            prev = Some((v, p));
        }
        worst_mass = worst_mass.max((mass - 1.0).abs());
    }
    within(t.elapsed(), 30.0)?;
    check(
        worst_ld < 1e-5 && worst_mass < 1e-3,
        format!("max log-det error {worst_ld:.2e}, max |mass − 1| {worst_mass:.2e}"),
    )
}

fn c3_kl_reparam() -> Outcome {
    let t = Instant::now();
    let q = |m: f64, v: f64| VariationalGaussian::new(DVector::from_element(1, m), DMatrix::zeros(1, 0), DVector::from_element(1, v)).unwrap();
    let k1 = kl_gaussian(&q(0.0, 1.0), &DVector::from_element(1, 1.0), &DMatrix::from_element(1, 1, 1.0)).map_err(|e| e.to_string())?;
    let k2 = kl_gaussian(&q(0.0, 2.0), &DVector::from_element(1, 0.0), &DMatrix::from_element(1, 1, 1.0)).map_err(|e| e.to_string())?;
    let e2 = 0.5 * (2.0 - 2f64.ln() - 1.0);
    let mut r = rng(3);
    let (n, rank, draws) = (5, 2, 100_000);
    let low = DMatrix::from_fn(n, rank, |_, _| normal(&mut r));
    let diag = DVector::from_fn(n, |_, _| r.random_range(0.2..1.5));
    let vg = VariationalGaussian::new(DVector::from_fn(n, |i, _| i as f64), low, diag).unwrap();
    let mut sum = DVector::zeros(n);
    let mut outer = DMatrix::zeros(n, n);
    for _ in 0..draws {
        let e1: Vec<f64> = (0..rank).map(|_| normal(&mut r)).collect();
        let e2: Vec<f64> = (0..n).map(|_| normal(&mut r)).collect();
        let x = sample_reparam(&vg, &e1, &e2).unwrap();
        sum += &x;
        outer += &x * x.transpose();
    }
    let mean = sum / draws as f64;
    let cov = outer / draws as f64 - &mean * mean.transpose();
    let target = vg.covariance();
    let rel = (&cov - &target).norm() / target.norm();
    within(t.elapsed(), 30.0)?;
    check(
        (k1 - 0.5).abs() < 1e-9 && (k2 - e2).abs() < 1e-9 && (k2 - 0.153_426).abs() < 1e-6 && rel < 0.05,
        format!("KL {k1:.12} and {k2:.12}; covariance relative Frobenius error {rel:.4}"),
    )
}

fn c4_jensen() -> Outcome {
    let t = Instant::now();
    let (nodes, weights) = golub_welsch(80);
    // E[−softplus(s·a)] for a ~ N(mu, var)
    let expect = |mu: f64, var: f64, s: f64| -> f64 {
        nodes
            .iter()
            .zip(&weights)
            .map(|(x, w)| -w * softplus(s * (mu + var.sqrt() * x)))
            .sum()
    };
    let mut r = rng(4);
    let mut worst = f64::NEG_INFINITY;
    for inst in 0..200 {
        let qi = r.random_range(0.01..0.99);
        let w0 = 2.0 * normal(&mut r);
        let we = r.random_range(0.0..1.5);
        let (bound, exact) = if inst % 4 == 3 {
            // continuous prior-probability parent
            let alpha = r.random_range(0.0..1.0);
            let (m, s) = (3.0 * normal(&mut r), r.random_range(0.0..1.5));
            let pp = (m * alpha + 0.5 * s * s * alpha * alpha).exp();
            let pn = (-m * alpha + 0.5 * s * s * alpha * alpha).exp();
            let mu = w0 + m * alpha;
            let var = we * we + s * s * alpha * alpha;
            (
                latent_bound(qi, pp, pn, w0, we),
                qi * expect(mu, var, -1.0) + (1.0 - qi) * expect(mu, var, 1.0),
            )
        } else {
            let np = inst % 3;
            let par: Vec<(f64, f64, f64)> = (0..np)
                .map(|_| (r.random_range(0.0..1.0), 2.0 * normal(&mut r), r.random_range(0.0..1.0)))
                .collect();
            let (mut pp, mut pn) = (1.0, 1.0);
            for &(qk, m, s) in &par {
                pp *= 1.0 - qk + qk * (m + 0.5 * s * s).exp();
                pn *= 1.0 - qk + qk * (-m + 0.5 * s * s).exp();
            }
            let mut exact = 0.0;
            for cfg in 0..(1usize << np) {
                let (mut p, mut mu, mut var) = (1.0, w0, we * we);
                for (k, &(qk, m, s)) in par.iter().enumerate() {
                    if cfg >> k & 1 == 1 {
                        p *= qk;
                        mu += m;
                        var += s * s;
                    } else {
                        p *= 1.0 - qk;
                    }
                }
                exact += p * (qi * expect(mu, var, -1.0) + (1.0 - qi) * expect(mu, var, 1.0));
            }
            (latent_bound(qi, pp, pn, w0, we), exact)
        };
        worst = worst.max(bound - exact);
    }
    within(t.elapsed(), 60.0)?;
    check(worst <= 1e-9, format!("max (bound − exact) over 200 instances {worst:.3e}"))
}

fn c5_gradients() -> Outcome {
    let t = Instant::now();
    let (grid, design, post, model) = small_instance();
    let locs: Vec<usize> = (0..grid.len()).collect();
    let req = |gradient| EvalRequest {
        locs: &locs,
        scale: 1.3,
        m_samples: 6,
        seed: 17,
        pruning: true,
        gradient,
        e_step: None,
    };
    let value = |post: &PosteriorGrid, model: &Model| {
        evaluate(&grid, &design, &mut post.clone(), model, &req(false)).unwrap().breakdown.total
    };
    let res = evaluate(&grid, &design, &mut post.clone(), &model, &req(true)).map_err(|e| e.to_string())?;
    let g = res.grad.unwrap();
    let rel = |fd: f64, an: f64| (fd - an).abs() / fd.abs().max(an.abs()).max(1e-2);
    let p = model.params();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..p.len() {
        let (mut a, mut b) = (model.clone(), model.clone());
        let (mut pa, mut pb) = (p.clone(), p.clone());
        pa[i] += h;
        pb[i] -= h;
        a.set_params(&pa).unwrap();
        b.set_params(&pb).unwrap();
        worst = worst.max(rel((value(&post, &a) - value(&post, &b)) / (2.0 * h), g[i]));
    }
    let dq = res.dq.unwrap();
    for (l, row) in dq.iter().enumerate() {
        for (i, n) in Node::ALL.iter().enumerate() {
            if !grid.is_active(*n, l) {
                continue;
            }
            let (mut a, mut b) = (post.clone(), post.clone());
            a.q[l][i] += h;
            b.q[l][i] -= h;
            worst = worst.max(rel((value(&a, &model) - value(&b, &model)) / (2.0 * h), row[i]));
        }
    }
    within(t.elapsed(), 120.0)?;
    check(worst < 1e-4, format!("{} parameters and all active q; worst relative error {worst:.2e}", p.len()))
}

fn c6_sparse_gp() -> Outcome {
    let t = Instant::now();
    let mut r = rng(6);
    let (n, d, n_test) = (48, N_FEATURES, 30);
    let hyper = MaternHyper::new(1.3, 1.7).unwrap();
    let x = DMatrix::from_fn(n, d, |_, _| normal(&mut r));
    let xt = DMatrix::from_fn(n_test, d, |_, _| normal(&mut r));
    let y = DVector::from_fn(n, |_, _| normal(&mut r));
    let prior_x = DVector::from_fn(n, |i, _| 0.3 * x[(i, 0)]);
    let prior_t = DVector::from_fn(n_test, |i, _| 0.3 * xt[(i, 0)]);
    let noise = 0.1;
    let dist = |a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize| (a.row(i) - b.row(j)).norm();
    // jitter is part of the prior covariance at distinct inputs
    let kxx = DMatrix::from_fn(n, n, |i, j| {
        matern32_closed(dist(&x, i, &x, j), hyper.variance, hyper.length_scale) + if i == j { hyper.jitter } else { 0.0 }
    });
    let a = (&kxx + DMatrix::identity(n, n) * noise).lu();
    // exact posterior of the latent values at the training inputs
    let mu_u = &prior_x + &kxx * a.solve(&(&y - &prior_x)).unwrap();
    let sigma_u = &kxx - &kxx * a.solve(&kxx).unwrap();
    let sigma_u = (&sigma_u + sigma_u.transpose()) * 0.5;
    let delta = 1e-10;
    let chol = (&sigma_u - DMatrix::identity(n, n) * delta).cholesky().ok_or("posterior covariance not PD")?;
    let q_u = VariationalGaussian::new(mu_u, chol.l(), DVector::from_element(n, delta)).unwrap();
    let inducing = InducingSet::new(x.clone(), q_u).unwrap();
    // dense predictive mean and variance of the latent function at `targets`
    let dense = |targets: &DMatrix<f64>, prior_t: &DVector<f64>| {
        let kt = DMatrix::from_fn(targets.nrows(), n, |i, j| {
            matern32_closed(dist(targets, i, &x, j), hyper.variance, hyper.length_scale)
        });
        let mean = prior_t + &kt * a.solve(&(&y - &prior_x)).unwrap();
        let var = DVector::from_fn(targets.nrows(), |i, _| {
            let k = kt.row(i).transpose();
            hyper.variance - k.dot(&a.solve(&k).unwrap())
        });
        (mean, var)
    };
    let mut err: f64 = 0.0;
    for (targets, prior_t) in [(&xt, &prior_t), (&x, &prior_x)] {
        let (m_s, v_s, _) = sparse_conditional(&inducing, &hyper, targets, &prior_x, prior_t).map_err(|e| e.to_string())?;
        let (m_d, v_d) = dense(targets, prior_t);
        err = err.max((&m_s - &m_d).amax()).max((&v_s - &v_d).amax());
    }
    within(t.elapsed(), 10.0)?;
    check(err < 1e-6, format!("M_u = N = {n}: max |Δ| over mean and variance {err:.2e}"))
}

fn c7_estep_monotone() -> Outcome {
    let t = Instant::now();
    let (grid, _) = generate(&SynthConfig {
        grid_dims: [16, 16],
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let cfg = FitConfig {
        max_iters: 100,
        ..Default::default()
    };
    let mut tr = Trainer::new(&grid, &cfg).map_err(|e| e.to_string())?;
    let (mut worst, mut sweeps) = (f64::NEG_INFINITY, 0usize);
    for _ in 0..100 {
        let rep = tr.step().map_err(|e| e.to_string())?;
        for w in rep.sweep_trace.windows(2) {
            worst = worst.max(w[0] - w[1]);
            sweeps += 1;
        }
    }
    within(t.elapsed(), 600.0)?;
    check(
        sweeps > 0 && worst <= 1e-9,
        format!("{sweeps} sweeps over 100 iterations; largest decrease {worst:.2e}"),
    )
}

struct RecoveryFit {
    grid: GridDataset,
    truth: SyntheticTruth,
    outcome: FitOutcome,
    seconds: f64,
}

fn recovery_fit(depth: usize) -> Result<RecoveryFit, String> {
    let (grid, truth) = generate(&SynthConfig::default()).map_err(|e| e.to_string())?;
    let t = Instant::now();
    let outcome = fit(
        &grid,
        &FitConfig {
            flow_depth: depth,
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())?;
    if let Some(f) = &outcome.failure {
        return Err(format!("fit failed: {f}"));
    }
    Ok(RecoveryFit {
        grid,
        truth,
        outcome,
        seconds: t.elapsed().as_secs_f64(),
    })
}

fn fitted_aucs(f: &RecoveryFit) -> Result<[f64; 3], String> {
    let mut out = [0.0; 3];
    for (i, o) in out.iter_mut().enumerate() {
        *o = column_auc(&f.outcome.state.posterior.q, &f.truth.x, i).map_err(|e| e.to_string())?;
    }
    Ok(out)
}

fn c8_recovery(k6: &RecoveryFit) -> Outcome {
    let post = fitted_aucs(k6)?;
    let prior = prior_scores(&k6.grid);
    let mut ok = k6.seconds < 1800.0;
    let mut parts = Vec::new();
    for (i, n) in Node::ALL.iter().enumerate() {
        let base = column_auc(&prior, &k6.truth.x, i).map_err(|e| e.to_string())?;
        ok &= post[i] >= base + 0.05 && post[i] > 0.80;
        parts.push(format!("{} {:.3} (prior {:.3})", n.short(), post[i], base));
    }
    check(
        ok,
        format!("{}; {} iterations in {:.0}s", parts.join(", "), k6.outcome.state.iteration, k6.seconds),
    )
}

fn c9_flow_depth(k6: &RecoveryFit) -> Outcome {
    let k2 = recovery_fit(2)?;
    let (a6, a2) = (fitted_aucs(k6)?, fitted_aucs(&k2)?);
    let final_elbo = |f: &RecoveryFit| f.outcome.trace.last().map(|r| r.elbo.total).unwrap_or(f64::NAN);
    let (e6, e2) = (final_elbo(k6), final_elbo(&k2));
    let ok = (0..3).all(|i| a6[i] >= a2[i] - 0.01) && e6 >= e2 && k6.seconds + k2.seconds < 5400.0;
    check(
        ok,
        format!(
            "AUC K=6 {:.3}/{:.3}/{:.3} vs K=2 {:.3}/{:.3}/{:.3}; ELBO {e6:.1} vs {e2:.1}",
            a6[0], a6[1], a6[2], a2[0], a2[1], a2[2]
        ),
    )
}

fn c10_pruning() -> Outcome {
    let t0 = Instant::now();
    let (mut grid, _) = generate(&SynthConfig {
        grid_dims: [32, 32],
        building_rate: 0.9,
        seed: 10,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let mut r = rng(10);
    for loc in &mut grid.locations {
        if r.random_bool(0.35) {
            loc.prior_ls = 0.0;
        }
        if r.random_bool(0.35) {
            loc.prior_lf = 0.0;
        }
    }
    let floor = 0.01;
    let active = |l: &Location| [l.prior_ls >= floor, l.prior_lf >= floor, l.has_building];
    let total = 3 * grid.len();
    let inactive: usize = grid.locations.iter().map(|l| active(l).iter().filter(|a| !**a).count()).sum();
    let run = |pruning| -> Result<(FitOutcome, f64), String> {
        let cfg = FitConfig {
            max_iters: 50,
            prior_floor: floor,
            pruning,
            ..Default::default()
        };
        let t = Instant::now();
        let out = fit(&grid, &cfg).map_err(|e| e.to_string())?;
        Ok((out, t.elapsed().as_secs_f64()))
    };
    // alternating order cancels drift in machine load; minima estimate the intrinsic cost
    let mut best = [f64::INFINITY; 2];
    let mut outs: [Option<FitOutcome>; 2] = [None, None];
    for round in 0..5 {
        let order = if round % 2 == 0 { [true, false] } else { [false, true] };
        for pruning in order {
            let (out, t) = run(pruning)?;
            let k = usize::from(!pruning);
            best[k] = best[k].min(t);
            outs[k].get_or_insert(out);
        }
    }
    let [Some(pruned), Some(full)] = outs else {
        return Err("missing run".into());
    };
    let [tp, tf] = best;
    let mut worst: f64 = 0.0;
    for l in 0..grid.len() {
        for i in 0..3 {
            if active(&grid.locations[l])[i] {
                worst = worst.max((pruned.state.posterior.q[l][i] - full.state.posterior.q[l][i]).abs());
            }
        }
    }
    within(t0.elapsed(), 600.0)?;
    check(
        worst <= 1e-9 && tp < tf,
        format!(
            "{:.0}% inactive nodes; max |Δq| {worst:.1e}; pruned {tp:.1}s vs unpruned {tf:.1}s",
            100.0 * inactive as f64 / total as f64
        ),
    )
}

fn c11_scaling() -> Outcome {
    let t0 = Instant::now();
    let mut trainers = Vec::new();
    for dims in [[32, 32], [32, 64], [64, 64]] {
        let (grid, _) = generate(&SynthConfig {
            grid_dims: dims,
            ..Default::default()
        })
        .map_err(|e| e.to_string())?;
        let cfg = FitConfig {
            batch_size: grid.len(),
            inducing_count: 64,
            ..Default::default()
        };
        let mut tr = Trainer::new(&grid, &cfg).map_err(|e| e.to_string())?;
        for _ in 0..3 {
            tr.step().map_err(|e| e.to_string())?;
        }
        trainers.push(tr);
    }
    // round-robin over the grids so drift in machine load hits every size alike
    let mut times = vec![Vec::new(); trainers.len()];
    for _ in 0..15 {
        for (tr, ts) in trainers.iter_mut().zip(&mut times) {
            let t = Instant::now();
            tr.step().map_err(|e| e.to_string())?;
            ts.push(t.elapsed().as_secs_f64());
        }
    }
    let per_iter: Vec<f64> = times
        .iter_mut()
        .map(|ts| {
            ts.sort_by(f64::total_cmp);
            ts[ts.len() / 2]
        })
        .collect();
    let ratios = [per_iter[1] / per_iter[0], per_iter[2] / per_iter[1]];
    within(t0.elapsed(), 900.0)?;
    check(
        ratios.iter().all(|r| (1.6..=2.6).contains(r)),
        format!(
            "median s/iter {:.3}/{:.3}/{:.3} at N = 1024/2048/4096; ratios {:.2}, {:.2}",
            per_iter[0], per_iter[1], per_iter[2], ratios[0], ratios[1]
        ),
    )
}

fn c12_metrics() -> Outcome {
    let t = Instant::now();
    let mut r = rng(12);
    let mut cases = 0usize;
    let mut bad = Vec::new();
    let mut test = |s: &[f64], l: &[bool]| {
        cases += 1;
        let d = ScoredLabels::new(s.to_vec(), l.to_vec());
        let auc_ok = match (roc_auc(&d), brute_auc(s, l)) {
            (Ok(a), Some(b)) => (a - b).abs() < 1e-12,
            (Err(Error::UndefinedMetric(_)), None) => true,
            _ => false,
        };
        let f1_ok = match (best_f1(&d), brute_f1(s, l)) {
            (Ok((f, th)), Some((bf, bt))) => (f - bf).abs() < 1e-12 && th == bt,
            (Err(Error::UndefinedMetric(_)), None) => true,
            _ => false,
        };
        if (!auc_ok || !f1_ok) && bad.len() < 3 {
            bad.push(format!("{s:?} {l:?}"));
        }
    };
    for n in 1..=12usize {
        let labels: Vec<Vec<bool>> = (0..1usize << n).map(|m| (0..n).map(|i| m >> i & 1 == 1).collect()).collect();
        let scores: Vec<Vec<f64>> = if n <= 5 {
            // every assignment from a 4-level alphabet, ties included
            (0..4usize.pow(n as u32))
                .map(|m| (0..n).map(|i| (m / 4usize.pow(i as u32) % 4) as f64 / 4.0).collect())
                .collect()
        } else {
            (0..4)
                .map(|k| {
                    (0..n)
                        .map(|_| if k % 2 == 0 { r.random_range(0..4) as f64 / 4.0 } else { r.random::<f64>() })
                        .collect()
                })
                .collect()
        };
        for s in &scores {
            for l in &labels {
                test(s, l);
            }
        }
    }
    within(t.elapsed(), 60.0)?;
    check(bad.is_empty(), format!("{cases} instances; mismatches {bad:?}"))
}

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |n: usize| selected.is_empty() || selected.contains(&n);
    let mut k6: Option<Result<RecoveryFit, String>> = None;
    let shared = |k6: &mut Option<Result<RecoveryFit, String>>| {
        if k6.is_none() {
            *k6 = Some(recovery_fit(6));
        }
    };
    let mut failures = 0;
    let mut report = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match res {
            Ok(d) => println!("PASS  {n:>2} {name}: {d} [{secs:.1}s]"),
            Err(d) => {
                failures += 1;
                println!("FAIL  {n:>2} {name}: {d} [{secs:.1}s]");
            }
        }
    };
    let simple: [(usize, &str, fn() -> Outcome); 7] = [
        (1, "kernel oracle", c1_kernel),
        (2, "flow correctness", c2_flows),
        (3, "KL and reparameterization", c3_kl_reparam),
        (4, "Jensen bound validity", c4_jensen),
        (5, "gradient fidelity", c5_gradients),
        (6, "sparse GP exactness", c6_sparse_gp),
        (7, "E-step monotonicity", c7_estep_monotone),
    ];
    for (n, name, f) in simple {
        if want(n) {
            report(n, name, &mut || f());
        }
    }
    if want(8) {
        shared(&mut k6);
        report(8, "synthetic recovery", &mut || c8_recovery(k6.as_ref().unwrap().as_ref().map_err(Clone::clone)?));
    }
    if want(9) {
        shared(&mut k6);
        report(9, "flow-depth trend", &mut || c9_flow_depth(k6.as_ref().unwrap().as_ref().map_err(Clone::clone)?));
    }
    let rest: [(usize, &str, fn() -> Outcome); 3] = [
        (10, "pruning equivalence", c10_pruning),
        (11, "scaling trend", c11_scaling),
        (12, "metric oracles", c12_metrics),
    ];
    for (n, name, f) in rest {
        if want(n) {
            report(n, name, &mut || f());
        }
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
