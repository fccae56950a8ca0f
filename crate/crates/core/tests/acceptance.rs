//! Acceptance harness: one PASS/FAIL/SKIP line per criterion.
//!
//! 1. Synthetic GLMM recovery (4 replicates, 200 servers x 150 returners).
//! 2. Near-zero variance components reduce to plain logistic regression.
//! 3. Laplace marginal likelihood vs 20-node adaptive Gauss-Hermite.
//! 4. Feature code vs brute-force reimplementations; entropy bounds.
//! 5. Evaluation GLM on data generated from known scores; grid-search oracle.
//! 6. Weighted Elo identities.
//! 7. Paper-scale reproduction on the public slam data (skipped if absent).
//! 8. Two identical pipeline runs produce byte-identical artifacts.
//!
//! Criterion 7 looks for the data in `$SQS_DATA_DIR`, falling back to
//! `data/` at the workspace root.

use std::collections::{BTreeMap, HashMap};
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use sqs_core::eval::{grouped_binomial_glm, pearson_r};
use sqs_core::features::{
    aggregate, bin_index, location_entropy, max_entropy, standardize, ServeStats,
};
use sqs_core::glmm::{fit_at, fit_glmm, laplace_from_mode, pirls, DesignMatrix, FitOptions, PirlsOptions, VarianceComponents};
use sqs_core::ingest::{
    matches_file, points_file, Dataset, Gender, LocationBin, PointRecord, Tournament, SEASONS,
};
use sqs_core::pipeline::{run, PipelineConfig, StageSelection};
use sqs_core::simulate::{simulate_glmm, write_slam_files, GlmmSim, SlamSim};
use sqs_core::welo::{expected_score, k_factor, ratings_at_cutoff, MatchResult, WeloState, INITIAL_RATING};

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

type Check = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log1pexp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

// ---------------------------------------------------------------- 1 ----

fn criterion_1() -> Check {
    let truth = GlmmSim::default();
    let n_rep = 4;
    let p = truth.beta.len();
    let mut beta_hits = vec![0usize; p];
    let (mut sigma_hits, mut tau_hits) = (0, 0);
    let mut slowest = 0.0f64;
    let mut lines = Vec::new();
    for rep in 0..n_rep {
        let sim = simulate_glmm(&truth, 1000 + rep as u64).map_err(|e| e.to_string())?;
        let start = Instant::now();
        let fit = fit_glmm(&sim.design, FitOptions::default()).map_err(|e| e.to_string())?;
        let secs = start.elapsed().as_secs_f64();
        slowest = slowest.max(secs);
        ensure(fit.converged, || format!("replicate {rep} did not converge"))?;
        for (k, fe) in fit.fixed_effects.iter().enumerate() {
            if (fe.estimate - truth.beta[k]).abs() <= 3.0 * fe.std_error {
                beta_hits[k] += 1;
            }
        }
        let (s, t) = (fit.vc.sigma2.sqrt(), fit.vc.tau2.sqrt());
        sigma_hits += ((s - truth.sigma).abs() <= 0.3 * truth.sigma) as usize;
        tau_hits += ((t - truth.tau).abs() <= 0.3 * truth.tau) as usize;
        lines.push(format!("rep{rep}: sigma={s:.3} tau={t:.3} {secs:.1}s"));
    }
    for (k, hits) in beta_hits.iter().enumerate() {
        ensure(*hits >= 3, || format!("beta[{k}] within 3 SE in only {hits}/4; {}", lines.join(", ")))?;
    }
    ensure(sigma_hits >= 3, || format!("sigma within 30% in {sigma_hits}/4; {}", lines.join(", ")))?;
    ensure(tau_hits >= 3, || format!("tau within 30% in {tau_hits}/4; {}", lines.join(", ")))?;
    ensure(slowest <= 60.0, || format!("slowest fit {slowest:.1}s > 60s"))?;
    Ok(format!(
        "beta hits {beta_hits:?}, sigma {sigma_hits}/4, tau {tau_hits}/4, slowest fit {slowest:.2}s"
    ))
}

// ---------------------------------------------------------------- 2 ----

/// Plain logistic regression by Newton's method on the normal equations.
fn logistic_newton(x: &DMatrix<f64>, y: &[bool]) -> Vec<f64> {
    let (n, p) = (x.nrows(), x.ncols());
    let mut beta = DVector::<f64>::zeros(p);
    for _ in 0..100 {
        let eta = x * &beta;
        let mut grad = DVector::<f64>::zeros(p);
        let mut info = DMatrix::<f64>::zeros(p, p);
        for i in 0..n {
            let mu = logistic(eta[i]);
            let r = y[i] as u8 as f64 - mu;
            let w = mu * (1.0 - mu);
            let xi = x.row(i).transpose();
            grad += &xi * r;
            info += &xi * xi.transpose() * w;
        }
        let step = info.cholesky().expect("information is positive definite").solve(&grad);
        beta += &step;
        if step.amax() < 1e-13 {
            break;
        }
    }
    beta.iter().copied().collect()
}

fn criterion_2() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let std: Normal<f64> = Normal::new(0.0, 1.0).unwrap();
    let n = 500;
    let (n_servers, n_returners) = (25, 15);
    let truth = [-0.4, 0.8, -0.5];
    let mut y = Vec::with_capacity(n);
    let x = DMatrix::from_fn(n, 3, |_, c| if c == 0 { 1.0 } else { 0.0 });
    let mut x = x;
    for i in 0..n {
        x[(i, 1)] = std.sample(&mut rng);
        x[(i, 2)] = std.sample(&mut rng);
        let eta = truth[0] + truth[1] * x[(i, 1)] + truth[2] * x[(i, 2)];
        y.push(rng.gen::<f64>() < logistic(eta));
    }
    let design = DesignMatrix::new(
        y.clone(),
        x.clone(),
        (0..n).map(|i| i % n_servers).collect(),
        (0..n).map(|i| (i * 7) % n_returners).collect(),
        (0..n_servers).map(|j| format!("s{j}")).collect(),
        (0..n_returners).map(|k| format!("r{k}")).collect(),
        vec!["(Intercept)".into(), "x1".into(), "x2".into()],
    )
    .map_err(|e| e.to_string())?;
    let fit = fit_at(&design, VarianceComponents::new(1e-8, 1e-8)).map_err(|e| e.to_string())?;
    let oracle = logistic_newton(&x, &y);
    let worst = fit
        .beta()
        .iter()
        .zip(&oracle)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    ensure(worst <= 1e-4, || format!("max |beta - oracle| = {worst:.2e}"))?;
    Ok(format!("max |beta - oracle| = {worst:.2e}"))
}

// ---------------------------------------------------------------- 3 ----

/// Gauss-Hermite nodes and weights (weight function exp(-x^2)) from the
/// eigen-decomposition of the Jacobi matrix.
fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let j = DMatrix::from_fn(n, n, |r, c| {
        if r + 1 == c || c + 1 == r {
            (r.max(c) as f64 / 2.0).sqrt()
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            let v0 = eig.eigenvectors[(0, k)];
            (eig.eigenvalues[k], std::f64::consts::PI.sqrt() * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// Log marginal likelihood of one group's Bernoulli outcomes with shared
/// offset `eta0` and random intercept `u ~ N(0, sigma2)`, by adaptive
/// Gauss-Hermite quadrature centred at the integrand's mode.
fn agq_group(ys: &[bool], eta0: f64, sigma2: f64, nodes: &[f64], weights: &[f64]) -> f64 {
    let h = |u: f64| -> f64 {
        ys.iter().map(|&y| if y { eta0 + u } else { 0.0 } - log1pexp(eta0 + u)).sum::<f64>()
            - u * u / (2.0 * sigma2)
            - 0.5 * (2.0 * std::f64::consts::PI * sigma2).ln()
    };
    let n = ys.len() as f64;
    let s: f64 = ys.iter().filter(|&&y| y).count() as f64;
    let mut u = 0.0;
    let mut curv = 0.0;
    for _ in 0..100 {
        let mu = logistic(eta0 + u);
        let g = s - n * mu - u / sigma2;
        curv = n * mu * (1.0 - mu) + 1.0 / sigma2;
        let step = g / curv;
        u += step;
        if step.abs() < 1e-14 {
            break;
        }
    }
    let scale = std::f64::consts::SQRT_2 / curv.sqrt();
    let h0 = h(u);
    let sum: f64 = nodes
        .iter()
        .zip(weights)
        .map(|(x, w)| w * (x * x).exp() * (h(u + scale * x) - h0).exp())
        .sum();
    h0 + (scale * sum).ln()
}

/// Scalar Laplace approximation for one group, for cross-checking.
fn laplace_group(ys: &[bool], eta0: f64, sigma2: f64) -> f64 {
    let n = ys.len() as f64;
    let s: f64 = ys.iter().filter(|&&y| y).count() as f64;
    let mut u = 0.0;
    for _ in 0..200 {
        let mu = logistic(eta0 + u);
        let step = (s - n * mu - u / sigma2) / (n * mu * (1.0 - mu) + 1.0 / sigma2);
        u += step;
        if step.abs() < 1e-15 {
            break;
        }
    }
    let mu = logistic(eta0 + u);
    let ll: f64 = ys.iter().map(|&y| if y { eta0 + u } else { 0.0 } - log1pexp(eta0 + u)).sum();
    ll - u * u / (2.0 * sigma2) - 0.5 * (1.0 + sigma2 * n * mu * (1.0 - mu)).ln()
}

fn criterion_3() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let groups = 10;
    let per = 20;
    let true_u: Vec<f64> = (0..groups).map(|_| rng.gen_range(-0.8..0.8)).collect();
    let mut y = Vec::new();
    let mut idx = Vec::new();
    for (j, u) in true_u.iter().enumerate() {
        for _ in 0..per {
            y.push(rng.gen::<f64>() < logistic(0.2 + u));
            idx.push(j);
        }
    }
    let design = DesignMatrix::new(
        y.clone(),
        DMatrix::from_element(groups * per, 1, 1.0),
        idx.clone(),
        Vec::new(),
        (0..groups).map(|j| format!("g{j}")).collect(),
        Vec::new(),
        vec!["(Intercept)".into()],
    )
    .map_err(|e| e.to_string())?;
    let (nodes, weights) = gauss_hermite(20);
    let group_ys: Vec<Vec<bool>> = (0..groups)
        .map(|j| (0..y.len()).filter(|&i| idx[i] == j).map(|i| y[i]).collect())
        .collect();
    let gaps = |sigma2: f64| -> std::result::Result<(f64, f64), String> {
        let mode = pirls(&design, VarianceComponents::new(sigma2, 1.0), None, PirlsOptions::default())
            .map_err(|e| e.to_string())?;
        let laplace = laplace_from_mode(&mode);
        let eta0 = mode.beta[0];
        let quad: f64 = group_ys.iter().map(|ys| agq_group(ys, eta0, sigma2, &nodes, &weights)).sum();
        let scalar: f64 = group_ys.iter().map(|ys| laplace_group(ys, eta0, sigma2)).sum();
        Ok(((laplace - quad).abs(), (laplace - scalar).abs()))
    };
    // Variances spanning the range the serve models live in (sigma up to ~0.7).
    let (mut worst, mut worst_impl) = (0.0f64, 0.0f64);
    for sigma2 in [0.01, 0.05, 0.1, 0.25, 0.5] {
        let (q, s) = gaps(sigma2)?;
        worst = worst.max(q);
        worst_impl = worst_impl.max(s);
    }
    ensure(worst_impl <= 1e-8, || format!("Laplace differs from the scalar formula by {worst_impl:.2e}"))?;
    ensure(worst <= 0.1, || format!("max |Laplace - AGQ| = {worst:.4}"))?;
    // Reported only: with 20 Bernoulli draws per group the Laplace error
    // itself grows past 0.01 per group once sigma exceeds 1.
    let (wide, _) = gaps(2.0)?;
    Ok(format!(
        "max |Laplace - AGQ| = {worst:.2e} for sigma2 in [0.01, 0.5] (at sigma2 = 2: {wide:.3}); matches scalar Laplace to {worst_impl:.0e}"
    ))
}

// ---------------------------------------------------------------- 4 ----

fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<PointRecord> {
    let servers = ["Ann", "Bea", "Cat", "Dee", "Eve", "Fay", "Gil"];
    (0..n)
        .map(|_| {
            let bin = sqs_core::features::bin_from_index(rng.gen_range(0..LocationBin::COUNT));
            PointRecord {
                match_id: "2019-wimbledon-2101".into(),
                server: servers[rng.gen_range(0..servers.len())].into(),
                returner: "Ret".into(),
                serve_type: rng.gen_range(1..=2),
                speed_mph: rng.gen_range(70.0..135.0),
                location: bin,
                rally_count: rng.gen_range(1..12),
                server_won: rng.gen(),
                efficient: false,
            }
        })
        .collect()
}

fn brute_entropy(bins: &[LocationBin]) -> f64 {
    let mut counts: HashMap<LocationBin, f64> = HashMap::new();
    for b in bins {
        *counts.entry(*b).or_default() += 1.0;
    }
    let n = bins.len() as f64;
    counts.values().map(|c| -(c / n) * (c / n).log2()).sum::<f64>().max(0.0)
}

fn brute_mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn brute_mode(bins: &[LocationBin]) -> LocationBin {
    let mut counts: BTreeMap<LocationBin, usize> = BTreeMap::new();
    for b in bins {
        *counts.entry(*b).or_default() += 1;
    }
    let top = *counts.values().max().unwrap();
    *counts.iter().find(|(_, c)| **c == top).unwrap().0
}

fn criterion_4() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let points = random_points(&mut rng, 1000);
    let mut worst = 0.0f64;
    let mut track = |a: f64, b: f64| worst = worst.max((a - b).abs());
    for st in [1u8, 2] {
        let feats = aggregate(&points, st);
        let mut by_server: BTreeMap<&str, Vec<&PointRecord>> = BTreeMap::new();
        for p in points.iter().filter(|p| p.serve_type == st) {
            by_server.entry(&p.server).or_default().push(p);
        }
        ensure(feats.len() == by_server.len(), || "server count differs".into())?;
        for f in &feats {
            let ps = &by_server[f.server.as_str()];
            let speeds: Vec<f64> = ps.iter().map(|p| p.speed_mph).collect();
            let bins: Vec<LocationBin> = ps.iter().map(|p| p.location).collect();
            let (m, s) = brute_mean_sd(&speeds);
            ensure(f.n == ps.len(), || format!("{}: n differs", f.server))?;
            ensure(f.modal_loc == brute_mode(&bins), || format!("{}: modal bin differs", f.server))?;
            track(f.avg_speed, m);
            track(f.sd_speed, s);
            track(f.loc_entropy, brute_entropy(&bins));
        }
        let (z, _) = standardize(feats.clone()).map_err(|e| e.to_string())?;
        for (col, get) in [
            ("avg_speed", (|f: &sqs_core::features::ServerFeatures| f.avg_speed) as fn(&_) -> f64),
            ("sd_speed", |f| f.sd_speed),
            ("loc_entropy", |f| f.loc_entropy),
        ] {
            let xs: Vec<f64> = feats.iter().map(get).collect();
            let (m, s) = brute_mean_sd(&xs);
            for (f, raw) in z.iter().zip(&xs) {
                let zs = f.z.unwrap();
                let got = match col {
                    "avg_speed" => zs.avg_speed,
                    "sd_speed" => zs.sd_speed,
                    _ => zs.loc_entropy,
                };
                track(got, (raw - m) / s);
            }
        }
    }
    ensure(worst <= 1e-9, || format!("max deviation from brute force {worst:.2e}"))?;

    // Fuzzed entropy bounds, including degenerate and huge tables.
    let hmax = max_entropy();
    for case in 0..5000 {
        let counts: Vec<u64> = (0..LocationBin::COUNT)
            .map(|_| match case % 4 {
                0 => rng.gen_range(0..3),
                1 => rng.gen_range(0..1_000_000),
                2 => {
                    if rng.gen_bool(0.2) {
                        rng.gen_range(1..u32::MAX as u64)
                    } else {
                        0
                    }
                }
                _ => 7,
            })
            .collect();
        match location_entropy(counts.iter().copied()) {
            Ok(h) => ensure((0.0..=hmax + 1e-12).contains(&h), || format!("H = {h} for {counts:?}"))?,
            Err(_) => ensure(counts.iter().all(|&c| c == 0), || format!("error on {counts:?}"))?,
        }
    }
    // Streaming statistics agree with the batch summary under merging.
    let mut a = ServeStats::default();
    let mut b = ServeStats::default();
    let mut whole = ServeStats::default();
    for (i, p) in points.iter().enumerate() {
        whole.push(p.speed_mph, p.location);
        if i % 3 == 0 { &mut a } else { &mut b }.push(p.speed_mph, p.location);
    }
    a.merge(&b);
    ensure((a.mean() - whole.mean()).abs() < 1e-9 && (a.sd() - whole.sd()).abs() < 1e-9, || {
        "merged stats differ from batch".into()
    })?;
    ensure(a.bins == whole.bins && a.bins[bin_index(points[0].location)] > 0, || "bin counts differ".into())?;
    Ok(format!("max deviation {worst:.1e}; 5000 fuzzed entropy tables within [0, {hmax:.4}]"))
}

// ---------------------------------------------------------------- 5 ----

fn binomial_ll(s: &[u64], n: &[u64], x: &[f64], a: f64, g: f64) -> f64 {
    s.iter()
        .zip(n)
        .zip(x)
        .map(|((&s, &n), &x)| {
            let eta = a + g * x;
            s as f64 * eta - n as f64 * log1pexp(eta)
        })
        .sum()
}

/// Profile likelihood over the slope: for each slope the intercept is
/// optimized by bisection on its score, then the slope is located by a
/// coarse grid followed by golden-section refinement.
fn grid_search_slope(s: &[u64], n: &[u64], x: &[f64]) -> f64 {
    let best_intercept = |g: f64| -> f64 {
        let score = |a: f64| -> f64 {
            s.iter()
                .zip(n)
                .zip(x)
                .map(|((&s, &n), &x)| s as f64 - n as f64 * logistic(a + g * x))
                .sum()
        };
        let (mut lo, mut hi) = (-50.0, 50.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if score(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    };
    let profile = |g: f64| binomial_ll(s, n, x, best_intercept(g), g);
    let grid: Vec<f64> = (-2000..=2000).map(|i| i as f64 * 0.005).collect();
    let g0 = grid
        .iter()
        .copied()
        .max_by(|a, b| profile(*a).total_cmp(&profile(*b)))
        .unwrap();
    let (mut lo, mut hi) = (g0 - 0.01, g0 + 0.01);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..200 {
        let c = hi - phi * (hi - lo);
        let d = lo + phi * (hi - lo);
        if profile(c) > profile(d) {
            hi = d;
        } else {
            lo = c;
        }
    }
    0.5 * (lo + hi)
}

fn criterion_5() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let std: Normal<f64> = Normal::new(0.0, 1.0).unwrap();
    let servers = 80;
    let sqs: Vec<f64> = (0..servers).map(|_| 0.5 * std.sample(&mut rng)).collect();
    let trials: Vec<u64> = (0..servers).map(|_| rng.gen_range(150..400)).collect();
    let successes: Vec<u64> = sqs
        .iter()
        .zip(&trials)
        .map(|(q, &n)| (0..n).filter(|_| rng.gen::<f64>() < logistic(-0.4 + q)).count() as u64)
        .collect();
    let fit = grouped_binomial_glm(&successes, &trials, &sqs).map_err(|e| e.to_string())?;
    let rates: Vec<f64> = successes.iter().zip(&trials).map(|(s, n)| *s as f64 / *n as f64).collect();
    let r = pearson_r(&sqs, &rates).map_err(|e| e.to_string())?;
    ensure(fit.coefficient > 0.0 && fit.p_value < 1e-10, || {
        format!("coefficient {} p {:e}", fit.coefficient, fit.p_value)
    })?;
    ensure(r > 0.9, || format!("r = {r}"))?;

    let mut worst = 0.0f64;
    for _ in 0..10 {
        let x: Vec<f64> = (0..5).map(|_| std.sample(&mut rng)).collect();
        let n: Vec<u64> = (0..5).map(|_| rng.gen_range(20..200)).collect();
        let s: Vec<u64> = x
            .iter()
            .zip(&n)
            .map(|(x, &n)| (0..n).filter(|_| rng.gen::<f64>() < logistic(0.3 + 0.7 * x)).count() as u64)
            .collect();
        let fit = grouped_binomial_glm(&s, &n, &x).map_err(|e| e.to_string())?;
        worst = worst.max((fit.coefficient - grid_search_slope(&s, &n, &x)).abs());
    }
    ensure(worst <= 1e-6, || format!("max |gamma - grid| = {worst:.2e}"))?;
    Ok(format!(
        "gamma={:.3}, p={:.1e}, r={r:.3}; grid oracle max diff {worst:.1e}",
        fit.coefficient, fit.p_value
    ))
}

// ---------------------------------------------------------------- 6 ----

fn result(w: &str, l: &str, gw: u32, gl: u32, order: i64) -> MatchResult {
    MatchResult {
        match_id: format!("m{order}"),
        winner: w.into(),
        loser: l.into(),
        games_winner: gw,
        games_loser: gl,
        date_order: order,
    }
}

fn criterion_6() -> Check {
    // Zero-sum whenever both players have played the same number of matches.
    let mut s = WeloState::new();
    let rounds = [("a", "b", 13, 7), ("b", "a", 12, 10), ("a", "b", 19, 17), ("b", "a", 6, 0)];
    for (i, (w, l, gw, gl)) in rounds.iter().enumerate() {
        let before = s.rating("a") + s.rating("b");
        ensure(k_factor(s.matches_played("a")) == k_factor(s.matches_played("b")), || "K differs".into())?;
        s.update(&result(w, l, *gw, *gl, i as i64 + 1)).map_err(|e| e.to_string())?;
        let after = s.rating("a") + s.rating("b");
        ensure((after - before).abs() < 1e-9, || format!("round {i}: sum moved by {}", after - before))?;
    }
    ensure((s.rating("a") + s.rating("b") - 2.0 * INITIAL_RATING).abs() < 1e-9, || "total drifted".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..1000 {
        let (a, b) = (rng.gen_range(800.0..2600.0), rng.gen_range(800.0..2600.0));
        let sum = expected_score(a, b) + expected_score(b, a);
        ensure((sum - 1.0).abs() < 1e-12, || format!("E({a},{b}) + E({b},{a}) = {sum}"))?;
    }
    let e400 = expected_score(1900.0, 1500.0);
    ensure((e400 - 10.0 / 11.0).abs() < 1e-12, || format!("400-point edge gives {e400}"))?;

    // Folding a prefix gives the same state regardless of what follows.
    let players = ["p", "q", "r", "s", "t"];
    let results: Vec<MatchResult> = (1..=60)
        .map(|i| {
            let w = rng.gen_range(0..players.len());
            let l = (w + rng.gen_range(1..players.len())) % players.len();
            result(players[w], players[l], rng.gen_range(6..20), rng.gen_range(0..18), i * 10)
        })
        .collect();
    for cut in [0usize, 1, 17, 42, 60] {
        let cutoff = if cut == 0 { 0 } else { results[cut - 1].date_order };
        let a = ratings_at_cutoff(&results, cutoff).map_err(|e| e.to_string())?;
        let b = ratings_at_cutoff(&results[..cut], i64::MAX).map_err(|e| e.to_string())?;
        ensure(a == b && a.table() == b.table(), || format!("prefix {cut} differs"))?;
    }
    Ok("zero-sum, symmetry (1000 pairs), 10/11 identity, prefix folds".into())
}

// ---------------------------------------------------------------- 7 ----

fn data_dir() -> PathBuf {
    std::env::var_os("SQS_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).ancestors().nth(2).unwrap().join("data"))
}

fn criterion_7() -> Verdict {
    let dir = data_dir();
    let present: Vec<i32> = SEASONS
        .iter()
        .copied()
        .filter(|&y| {
            matches_file(&dir, y, Tournament::Wimbledon).is_file() && points_file(&dir, y, Tournament::Wimbledon).is_file()
        })
        .collect();
    if present.is_empty() {
        return Verdict::Skip(format!("no slam point data under {}", dir.display()));
    }
    let out = tempfile::tempdir().expect("temp dir");
    let tournaments: Vec<Tournament> = [Tournament::Wimbledon, Tournament::UsOpen]
        .into_iter()
        .filter(|t| present.iter().all(|&y| points_file(&dir, y, *t).is_file()))
        .collect();
    let datasets: Vec<Dataset> = tournaments
        .iter()
        .flat_map(|&t| [Dataset::new(t, Gender::M), Dataset::new(t, Gender::W)])
        .collect();
    let cfg = PipelineConfig {
        data_dir: dir,
        output_dir: out.path().to_path_buf(),
        datasets: datasets.clone(),
        years: present.clone(),
        ..PipelineConfig::default()
    };
    let summary = match run(&cfg, StageSelection::All) {
        Ok(s) => s,
        Err(e) => return Verdict::Fail(e.to_string()),
    };
    let mut notes = Vec::new();
    let mut wm = None;
    for ds in &datasets {
        let path = cfg.dataset_dir(*ds).join("eval.csv");
        let Ok(text) = std::fs::read_to_string(&path) else {
            notes.push(format!("{ds}: no evaluation ({:?})", summary.manifest.datasets));
            continue;
        };
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
        let rows: Vec<HashMap<String, String>> = rdr.deserialize().filter_map(|r| r.ok()).collect();
        let pick = |pred: &str| {
            rows.iter()
                .find(|r| r["serve_type"] == "1" && r["outcome"] == "Serve efficiency" && r["predictor"] == pred)
                .cloned()
        };
        let num = |r: &HashMap<String, String>, k: &str| r[k].parse::<f64>().unwrap_or(f64::NAN);
        if let (Some(sqs), Some(welo)) = (pick("SQS_1"), pick("wElo")) {
            let (c, p, r, rw) = (num(&sqs, "coefficient"), num(&sqs, "p_value"), num(&sqs, "pearson_r"), num(&welo, "pearson_r"));
            notes.push(format!("{ds}: SQS1 coef {c:.3} p {p:.1e} r {r:.3}; wElo r {rw:.3}"));
            if *ds == Dataset::new(Tournament::Wimbledon, Gender::M) {
                wm = Some((c, p, r, rw));
            }
        }
    }
    match wm {
        Some((c, p, r, rw)) if c > 0.0 && p < 1e-5 && r >= 0.45 && rw.abs() <= 0.35 => Verdict::Pass(notes.join("; ")),
        Some(_) => Verdict::Fail(notes.join("; ")),
        None => Verdict::Fail(format!("Wimbledon men evaluation missing; {}", notes.join("; "))),
    }
}

// ---------------------------------------------------------------- 8 ----

fn criterion_8() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = tmp.path().join("data");
    write_slam_files(&data, Tournament::Wimbledon, &SlamSim::default(), 8).map_err(|e| e.to_string())?;
    let run_into = |name: &str| {
        let cfg = PipelineConfig {
            data_dir: data.clone(),
            output_dir: tmp.path().join(name),
            datasets: vec![Dataset::new(Tournament::Wimbledon, Gender::M), Dataset::new(Tournament::Wimbledon, Gender::W)],
            years: vec![2018, 2019],
            seed: 7,
            jobs: 2,
            ..PipelineConfig::default()
        };
        run(&cfg, StageSelection::All).map_err(|e| e.to_string())
    };
    let a = run_into("first")?;
    let b = run_into("second")?;
    ensure(a.exit_code() == 0, || format!("{:?}", a.manifest.datasets))?;
    let bytes = |p: &Path| std::fs::read(p).unwrap_or_default();
    ensure(bytes(&a.manifest_path) == bytes(&b.manifest_path), || "manifests differ".into())?;
    for art in &a.manifest.artifacts {
        let (x, y) = (tmp.path().join("first").join(&art.path), tmp.path().join("second").join(&art.path));
        ensure(bytes(&x) == bytes(&y), || format!("{} differs", art.path))?;
    }
    Ok(format!("{} artifacts byte-identical across two runs", a.manifest.artifacts.len()))
}

fn guarded(f: impl FnOnce() -> Verdict) -> Verdict {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(v) => v,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Verdict::Fail(format!("panicked: {msg}"))
        }
    }
}

fn check(f: fn() -> Check) -> impl FnOnce() -> Verdict {
    move || match f() {
        Ok(d) => Verdict::Pass(d),
        Err(d) => Verdict::Fail(d),
    }
}

fn main() {
    let criteria: Vec<(&str, Box<dyn FnOnce() -> Verdict>)> = vec![
        ("synthetic GLMM recovery", Box::new(check(criterion_1))),
        ("degenerate-variance oracle", Box::new(check(criterion_2))),
        ("Laplace vs adaptive quadrature", Box::new(check(criterion_3))),
        ("feature correctness", Box::new(check(criterion_4))),
        ("evaluation harness", Box::new(check(criterion_5))),
        ("wElo properties", Box::new(check(criterion_6))),
        ("paper-scale reproduction", Box::new(criterion_7)),
        ("determinism", Box::new(check(criterion_8))),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let verdict = guarded(f);
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match verdict {
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Verdict::Skip(d) => ("SKIP", d),
        };
        println!("criterion {} {name}: {tag} ({secs:.1}s) {detail}", i + 1);
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
