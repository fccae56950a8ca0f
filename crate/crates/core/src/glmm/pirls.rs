//! Conditional mode of the crossed random-intercept logistic model for
//! fixed variance components.
//!
//! The negative Hessian of the penalized log-likelihood
//!
//! ```text
//! H = [X S R]' W [X S R] + diag(0, I/sigma2, I/tau2)
//! ```
//!
//! is factorized by eliminating the larger random-effect block first. That
//! block is diagonal, so its Schur complement is a dense matrix over the
//! remaining random effects plus the fixed effects, built from sparse
//! server-returner pair weights.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use super::design::DesignMatrix;
use crate::error::{Error, Result};
use crate::math::{log1p_exp, logistic};

/// Smallest variance used in the prior precision.
pub const VARIANCE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponents {
    /// Server random-intercept variance.
    pub sigma2: f64,
    /// Returner random-intercept variance.
    pub tau2: f64,
}

impl VarianceComponents {
    pub fn new(sigma2: f64, tau2: f64) -> Self {
        Self { sigma2, tau2 }
    }

    fn floored(self) -> (f64, f64) {
        (self.sigma2.max(VARIANCE_FLOOR), self.tau2.max(VARIANCE_FLOOR))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PirlsOptions {
    /// Convergence threshold on the max-norm of the penalized score.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PirlsOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 200,
        }
    }
}

/// Penalized mode (beta, u, v) and the curvature quantities at it.
#[derive(Debug, Clone)]
pub struct Mode {
    pub beta: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    /// Bernoulli log-likelihood at the mode.
    pub loglik: f64,
    /// `loglik - u'u/(2 sigma2) - v'v/(2 tau2)`.
    pub penalized_loglik: f64,
    /// IRLS weights mu(1 - mu) at the mode.
    pub weights: Vec<f64>,
    /// `log det(I + L Z'WZ L)`, L = diag(sigma, .., tau, ..), over the random block.
    pub log_det_random: f64,
    /// Fixed-effect block of the inverse penalized Hessian.
    pub fixed_cov: DMatrix<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub max_score: f64,
    pub diagnostic: Option<String>,
}

/// Sparsity pattern of the design, computed once per design.
#[derive(Debug, Clone)]
pub(crate) struct Structure {
    p: usize,
    n_servers: usize,
    n_returners: usize,
    /// Whether servers (rather than returners) form the eliminated block.
    elim_servers: bool,
    n_elim: usize,
    n_other: usize,
    elim_of_row: Vec<usize>,
    other_of_row: Vec<usize>,
    pair_of_row: Vec<usize>,
    /// CSR over eliminated levels: pairs `pair_ptr[a]..pair_ptr[a + 1]`.
    pair_ptr: Vec<usize>,
    pair_other: Vec<usize>,
}

impl Structure {
    pub(crate) fn new(d: &DesignMatrix) -> Self {
        let (j, k) = (d.n_servers(), d.n_returners());
        let elim_servers = j >= k;
        let (elim_of_row, other_of_row, n_elim, n_other) = if elim_servers {
            (d.server_index.clone(), d.returner_index.clone(), j, k)
        } else {
            (d.returner_index.clone(), d.server_index.clone(), k, j)
        };
        let mut pair_of_row = Vec::new();
        let mut pair_ptr = vec![0; n_elim + 1];
        let mut pair_other = Vec::new();
        if n_other > 0 {
            let mut pairs: Vec<(usize, usize)> =
                elim_of_row.iter().copied().zip(other_of_row.iter().copied()).collect();
            pairs.sort_unstable();
            pairs.dedup();
            for &(a, _) in &pairs {
                pair_ptr[a + 1] += 1;
            }
            for a in 0..n_elim {
                pair_ptr[a + 1] += pair_ptr[a];
            }
            pair_other = pairs.iter().map(|&(_, o)| o).collect();
            pair_of_row = elim_of_row
                .iter()
                .zip(&other_of_row)
                .map(|(&a, &o)| {
                    let range = pair_ptr[a]..pair_ptr[a + 1];
                    range.start + pair_other[range].binary_search(&o).unwrap()
                })
                .collect();
        }
        Self {
            p: d.n_fixed(),
            n_servers: j,
            n_returners: k,
            elim_servers,
            n_elim,
            n_other,
            elim_of_row,
            other_of_row,
            pair_of_row,
            pair_ptr,
            pair_other,
        }
    }

    fn n_rest(&self) -> usize {
        self.n_other + self.p
    }
}

/// Factorized negative Hessian at one iterate.
struct Factor {
    /// Diagonal of the eliminated block, prior precision included.
    diag: Vec<f64>,
    /// Weighted pair sums, aligned with `Structure::pair_other`.
    pair_w: Vec<f64>,
    /// Eliminated-level by fixed-column weighted sums, row-major n_elim x p.
    elim_x: Vec<f64>,
    chol: Cholesky<f64, Dyn>,
}

/// Splits a parameter-ordered vector `[beta, u, v]` into (eliminated, rest)
/// with rest = `[other random block, beta]`.
fn split(s: &Structure, theta: &[f64]) -> (Vec<f64>, DVector<f64>) {
    let p = s.p;
    let (u, v) = theta[p..].split_at(s.n_servers);
    let (elim, other) = if s.elim_servers { (u, v) } else { (v, u) };
    let mut rest = DVector::zeros(s.n_rest());
    rest.as_mut_slice()[..s.n_other].copy_from_slice(other);
    rest.as_mut_slice()[s.n_other..].copy_from_slice(&theta[..p]);
    (elim.to_vec(), rest)
}

fn join(s: &Structure, elim: &[f64], rest: &DVector<f64>) -> Vec<f64> {
    let p = s.p;
    let other = &rest.as_slice()[..s.n_other];
    let (u, v) = if s.elim_servers { (elim, other) } else { (other, elim) };
    let mut theta = Vec::with_capacity(p + s.n_servers + s.n_returners);
    theta.extend_from_slice(&rest.as_slice()[s.n_other..]);
    theta.extend_from_slice(u);
    theta.extend_from_slice(v);
    theta
}

impl Factor {
    fn build(s: &Structure, d: &DesignMatrix, w: &[f64], prec_elim: f64, prec_other: f64) -> Result<Self> {
        let p = s.p;
        let m = s.n_other;
        let mut diag = vec![prec_elim; s.n_elim];
        let mut other_diag = vec![prec_other; m];
        let mut pair_w = vec![0.0; s.pair_other.len()];
        let mut elim_x = vec![0.0; s.n_elim * p];
        let mut other_x = vec![0.0; m * p];
        let mut xx = DMatrix::<f64>::zeros(p, p);

        let mut xi = vec![0.0; p];
        for (i, &wi) in w.iter().enumerate() {
            for (c, v) in xi.iter_mut().enumerate() {
                *v = d.x[(i, c)];
            }
            let a = s.elim_of_row[i];
            diag[a] += wi;
            for c in 0..p {
                elim_x[a * p + c] += wi * xi[c];
            }
            if m > 0 {
                let o = s.other_of_row[i];
                other_diag[o] += wi;
                pair_w[s.pair_of_row[i]] += wi;
                for c in 0..p {
                    other_x[o * p + c] += wi * xi[c];
                }
            }
            for c in 0..p {
                let wc = wi * xi[c];
                for e in c..p {
                    xx[(c, e)] += wc * xi[e];
                }
            }
        }

        let n = m + p;
        let mut schur = DMatrix::<f64>::zeros(n, n);
        for o in 0..m {
            schur[(o, o)] = other_diag[o];
            for c in 0..p {
                schur[(o, m + c)] = other_x[o * p + c];
            }
        }
        for c in 0..p {
            for e in c..p {
                schur[(m + c, m + e)] = xx[(c, e)];
            }
        }

        // Subtract b b' / diag[a] for each eliminated level, where b holds the
        // sparse pair weights followed by the dense fixed-effect sums.
        let mut idx: Vec<usize> = Vec::new();
        let mut val: Vec<f64> = Vec::new();
        for a in 0..s.n_elim {
            idx.clear();
            val.clear();
            for q in s.pair_ptr[a]..s.pair_ptr[a + 1] {
                idx.push(s.pair_other[q]);
                val.push(pair_w[q]);
            }
            for c in 0..p {
                idx.push(m + c);
                val.push(elim_x[a * p + c]);
            }
            let inv = 1.0 / diag[a];
            for (r, (&ir, &vr)) in idx.iter().zip(&val).enumerate() {
                let scaled = vr * inv;
                for (&ic, &vc) in idx[r..].iter().zip(&val[r..]) {
                    // idx is increasing, so (ir, ic) stays in the upper triangle.
                    schur[(ir, ic)] -= scaled * vc;
                }
            }
        }
        schur.fill_lower_triangle_with_upper_triangle();

        let chol = Cholesky::new(schur).ok_or(Error::NotPositiveDefinite)?;
        Ok(Self {
            diag,
            pair_w,
            elim_x,
            chol,
        })
    }

    /// Solves H x = g with g in parameter order.
    fn solve(&self, s: &Structure, g: &[f64]) -> Vec<f64> {
        let p = s.p;
        let m = s.n_other;
        let (g_elim, mut rhs) = split(s, g);
        for a in 0..s.n_elim {
            let f = g_elim[a] / self.diag[a];
            for q in s.pair_ptr[a]..s.pair_ptr[a + 1] {
                rhs[s.pair_other[q]] -= self.pair_w[q] * f;
            }
            for c in 0..p {
                rhs[m + c] -= self.elim_x[a * p + c] * f;
            }
        }
        let rest = self.chol.solve(&rhs);
        let elim: Vec<f64> = (0..s.n_elim)
            .map(|a| {
                let mut t = g_elim[a];
                for q in s.pair_ptr[a]..s.pair_ptr[a + 1] {
                    t -= self.pair_w[q] * rest[s.pair_other[q]];
                }
                for c in 0..p {
                    t -= self.elim_x[a * p + c] * rest[m + c];
                }
                t / self.diag[a]
            })
            .collect();
        join(s, &elim, &rest)
    }

    /// log det of the random-effects block of H (fixed effects excluded).
    fn log_det_random_block(&self, s: &Structure) -> f64 {
        let l = self.chol.l_dirty();
        let other: f64 = (0..s.n_other).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0;
        self.diag.iter().map(|d| d.ln()).sum::<f64>() + other
    }

    fn fixed_cov(&self, s: &Structure) -> DMatrix<f64> {
        let n = s.n_rest();
        let mut rhs = DMatrix::<f64>::zeros(n, s.p);
        for c in 0..s.p {
            rhs[(s.n_other + c, c)] = 1.0;
        }
        let sol = self.chol.solve(&rhs);
        sol.rows(s.n_other, s.p).into_owned()
    }
}

/// Evaluation of the model at one parameter vector `[beta, u, v]`.
struct Eval {
    loglik: f64,
    penalized: f64,
    mu: Vec<f64>,
}

fn evaluate(d: &DesignMatrix, theta: &[f64], sigma2: f64, tau2: f64) -> Eval {
    let p = d.n_fixed();
    let j = d.n_servers();
    let (beta, re) = theta.split_at(p);
    let (u, v) = re.split_at(j);
    let beta = DVector::from_column_slice(beta);
    let xb = &d.x * beta;
    let mut loglik = 0.0;
    let mut mu = Vec::with_capacity(d.n_rows());
    for i in 0..d.n_rows() {
        let mut eta = xb[i] + u[d.server_index[i]];
        if !v.is_empty() {
            eta += v[d.returner_index[i]];
        }
        if d.y[i] {
            loglik += eta;
        }
        loglik -= log1p_exp(eta);
        mu.push(logistic(eta));
    }
    let penalty = u.iter().map(|x| x * x).sum::<f64>() / (2.0 * sigma2)
        + v.iter().map(|x| x * x).sum::<f64>() / (2.0 * tau2);
    Eval {
        loglik,
        penalized: loglik - penalty,
        mu,
    }
}

/// Penalized score `d/dtheta` of the penalized log-likelihood, parameter order.
fn score(d: &DesignMatrix, theta: &[f64], mu: &[f64], sigma2: f64, tau2: f64) -> Vec<f64> {
    let p = d.n_fixed();
    let j = d.n_servers();
    let mut g = vec![0.0; theta.len()];
    for i in 0..d.n_rows() {
        let r = if d.y[i] { 1.0 } else { 0.0 } - mu[i];
        for c in 0..p {
            g[c] += r * d.x[(i, c)];
        }
        g[p + d.server_index[i]] += r;
        if !d.returner_index.is_empty() {
            g[p + j + d.returner_index[i]] += r;
        }
    }
    for (k, gk) in g[p..].iter_mut().enumerate() {
        let prec = if k < j { 1.0 / sigma2 } else { 1.0 / tau2 };
        *gk -= theta[p + k] * prec;
    }
    g
}

/// Penalized log-likelihood and its score at an arbitrary parameter vector
/// `[beta, u, v]`; exposed for derivative checks.
pub fn penalized_objective(d: &DesignMatrix, vc: VarianceComponents, theta: &[f64]) -> (f64, Vec<f64>) {
    let (s2, t2) = vc.floored();
    let e = evaluate(d, theta, s2, t2);
    let g = score(d, theta, &e.mu, s2, t2);
    (e.penalized, g)
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Newton iterations with step-halving on the penalized log-likelihood.
///
/// `start` warm-starts from a previous mode (same design). A result with
/// `converged == false` is still the best iterate found.
pub fn pirls(d: &DesignMatrix, vc: VarianceComponents, start: Option<&Mode>, opts: PirlsOptions) -> Result<Mode> {
    pirls_with(d, &Structure::new(d), vc, start, opts)
}

pub(crate) fn pirls_with(
    d: &DesignMatrix,
    s: &Structure,
    vc: VarianceComponents,
    start: Option<&Mode>,
    opts: PirlsOptions,
) -> Result<Mode> {
    let (sigma2, tau2) = vc.floored();
    let (prec_elim, prec_other) = if s.elim_servers {
        (1.0 / sigma2, 1.0 / tau2)
    } else {
        (1.0 / tau2, 1.0 / sigma2)
    };
    let p = d.n_fixed();
    let mut theta: Vec<f64> = match start {
        Some(m) => [m.beta.as_slice(), &m.u, &m.v].concat(),
        None => vec![0.0; p + d.n_servers() + d.n_returners()],
    };

    let mut cur = evaluate(d, &theta, sigma2, tau2);
    let mut g = score(d, &theta, &cur.mu, sigma2, tau2);
    let mut max_score = max_abs(&g);
    let mut converged = false;
    let mut diagnostic = None;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        if max_score < opts.tol {
            converged = true;
            break;
        }
        iterations += 1;
        let w: Vec<f64> = cur.mu.iter().map(|m| m * (1.0 - m)).collect();
        let factor = Factor::build(s, d, &w, prec_elim, prec_other)?;
        let step = factor.solve(s, &g);

        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let cand: Vec<f64> = theta.iter().zip(&step).map(|(t, d)| t + scale * d).collect();
            let e = evaluate(d, &cand, sigma2, tau2);
            if e.penalized.is_finite() && e.penalized >= cur.penalized - 1e-12 * cur.penalized.abs() {
                accepted = Some((cand, e));
                break;
            }
            scale *= 0.5;
        }
        let Some((cand, e)) = accepted else {
            // No ascent possible along the Newton direction: numerically stationary.
            converged = max_score < opts.tol.max(1e-6);
            diagnostic = Some(format!("step-halving stalled at max score {max_score:.3e}"));
            break;
        };
        theta = cand;
        cur = e;
        g = score(d, &theta, &cur.mu, sigma2, tau2);
        max_score = max_abs(&g);
    }
    if !converged && iterations >= opts.max_iter && max_score < opts.tol {
        converged = true;
    }
    if !converged && diagnostic.is_none() {
        diagnostic = Some(format!("iteration cap {} reached, max score {max_score:.3e}", opts.max_iter));
    }

    if d.y.iter().all(|&y| y == d.y[0]) {
        converged = false;
        diagnostic = Some("separation: every outcome is identical".into());
    } else if max_abs(&theta[..p]) > 25.0 {
        converged = false;
        diagnostic = Some("separation: fixed effects diverging".into());
    }

    let w: Vec<f64> = cur.mu.iter().map(|m| m * (1.0 - m)).collect();
    let factor = Factor::build(s, d, &w, prec_elim, prec_other)?;
    let scale_log = d.n_servers() as f64 * sigma2.ln() + d.n_returners() as f64 * tau2.ln();
    let log_det_random = factor.log_det_random_block(s) + scale_log;
    let fixed_cov = factor.fixed_cov(s);

    let j = d.n_servers();
    Ok(Mode {
        beta: theta[..p].to_vec(),
        u: theta[p..p + j].to_vec(),
        v: theta[p + j..].to_vec(),
        loglik: cur.loglik,
        penalized_loglik: cur.penalized,
        weights: w,
        log_det_random,
        fixed_cov,
        converged,
        iterations,
        max_score,
        diagnostic,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_design(seed: u64, j: usize, k: usize, n: usize) -> DesignMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<f64> = (0..j).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut y = Vec::new();
        let mut si = Vec::new();
        let mut ri = Vec::new();
        for i in 0..n {
            let s = i % j;
            si.push(s);
            ri.push(rng.gen_range(0..k));
            y.push(rng.gen_bool(0.3 + 0.2 * (xs[s] + 1.0) / 2.0));
        }
        let x = DMatrix::from_fn(n, 2, |i, c| if c == 0 { 1.0 } else { xs[si[i]] });
        DesignMatrix::new(
            y,
            x,
            si,
            ri,
            (0..j).map(|s| format!("s{s}")).collect(),
            (0..k).map(|r| format!("r{r}")).collect(),
            vec!["(Intercept)".into(), "x".into()],
        )
        .unwrap()
    }

    /// Dense negative Hessian of the penalized log-likelihood, parameter order.
    fn dense_hessian(d: &DesignMatrix, w: &[f64], s2: f64, t2: f64) -> DMatrix<f64> {
        let p = d.n_fixed();
        let j = d.n_servers();
        let q = p + j + d.n_returners();
        let mut h = DMatrix::zeros(q, q);
        for i in 0..d.n_rows() {
            let mut z = vec![0.0; q];
            for c in 0..p {
                z[c] = d.x[(i, c)];
            }
            z[p + d.server_index[i]] = 1.0;
            z[p + j + d.returner_index[i]] = 1.0;
            for a in 0..q {
                for b in 0..q {
                    h[(a, b)] += w[i] * z[a] * z[b];
                }
            }
        }
        for k in p..q {
            h[(k, k)] += if k < p + j { 1.0 / s2 } else { 1.0 / t2 };
        }
        h
    }

    #[test]
    fn block_solve_matches_dense() {
        for (j, k) in [(7, 4), (3, 9)] {
            let d = small_design(11, j, k, 120);
            let s = Structure::new(&d);
            let w: Vec<f64> = (0..d.n_rows()).map(|i| 0.05 + 0.2 * ((i * 7) % 5) as f64 / 5.0).collect();
            let (s2, t2) = (0.4, 0.15);
            let (pe, po) = if s.elim_servers { (1.0 / s2, 1.0 / t2) } else { (1.0 / t2, 1.0 / s2) };
            let f = Factor::build(&s, &d, &w, pe, po).unwrap();
            let h = dense_hessian(&d, &w, s2, t2);
            let g: Vec<f64> = (0..h.nrows()).map(|i| (i as f64 * 0.37).sin()).collect();
            let x = f.solve(&s, &g);
            let hx = &h * DVector::from_vec(x);
            for (a, b) in hx.iter().zip(&g) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }

            let p = d.n_fixed();
            let rr = h.view((p, p), (h.nrows() - p, h.nrows() - p)).into_owned();
            let dense_logdet: f64 = rr.cholesky().unwrap().l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
            assert!((f.log_det_random_block(&s) - dense_logdet).abs() < 1e-9);

            let hinv = h.try_inverse().unwrap();
            let cov = f.fixed_cov(&s);
            for a in 0..p {
                for b in 0..p {
                    assert!((cov[(a, b)] - hinv[(a, b)]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn mode_has_zero_score_and_monotone_path() {
        let d = small_design(3, 12, 8, 400);
        let vc = VarianceComponents::new(0.3, 0.2);
        let m = pirls(&d, vc, None, PirlsOptions::default()).unwrap();
        assert!(m.converged, "{:?}", m.diagnostic);
        let theta = [m.beta.clone(), m.u.clone(), m.v.clone()].concat();
        let (pl, g) = penalized_objective(&d, vc, &theta);
        assert!((pl - m.penalized_loglik).abs() < 1e-12);
        assert!(max_abs(&g) < 1e-8);

        let mut prev = f64::NEG_INFINITY;
        for it in 1..=m.iterations {
            let mi = pirls(&d, vc, None, PirlsOptions { tol: 0.0, max_iter: it }).unwrap();
            assert!(mi.penalized_loglik >= prev - 1e-9);
            prev = mi.penalized_loglik;
        }
    }

    #[test]
    fn all_same_outcome_flags_separation() {
        let mut d = small_design(5, 4, 3, 60);
        d.y = vec![true; 60];
        let m = pirls(&d, VarianceComponents::new(0.2, 0.2), None, PirlsOptions::default()).unwrap();
        assert!(!m.converged);
        assert!(m.diagnostic.unwrap().contains("separation"));
    }
}
