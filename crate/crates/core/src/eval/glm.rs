//! Grouped binomial logistic regression with one predictor, Wald tests and
//! Pearson correlation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{log1p_exp, logistic};

/// Two-sided normal tail probability `P(|Z| > |z|)`, via the complementary
/// error function so tails as small as 1e-300 keep full relative accuracy.
pub fn two_sided_p(z: f64) -> f64 {
    libm::erfc(z.abs() / std::f64::consts::SQRT_2)
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupedGlm {
    pub intercept: f64,
    pub intercept_se: f64,
    pub coefficient: f64,
    pub std_error: f64,
    pub z: f64,
    pub p_value: f64,
    pub iterations: usize,
}

fn loglik(s: &[f64], n: &[f64], x: &[f64], a: f64, g: f64) -> f64 {
    s.iter()
        .zip(n)
        .zip(x)
        .map(|((s, n), x)| {
            let eta = a + g * x;
            s * eta - n * log1p_exp(eta)
        })
        .sum()
}

/// Fits `logit(pi_j) = a + g x_j`, `s_j ~ Binomial(n_j, pi_j)`, by Newton's
/// method; the p-value is the two-sided Wald test on `g`.
pub fn grouped_binomial_glm(successes: &[u64], trials: &[u64], x: &[f64]) -> Result<GroupedGlm> {
    let m = x.len();
    if successes.len() != m || trials.len() != m {
        return Err(Error::Invalid("grouped GLM inputs differ in length".into()));
    }
    if m < 3 {
        return Err(Error::TooFewLevels {
            what: "groups",
            needed: 3,
            got: m,
        });
    }
    if trials.iter().zip(successes).any(|(n, s)| *n == 0 || s > n) {
        return Err(Error::Invalid("each group needs 1 <= trials and successes <= trials".into()));
    }
    let xbar = x.iter().sum::<f64>() / m as f64;
    let x_spread = x.iter().map(|v| (v - xbar).abs()).fold(0.0, f64::max);
    if !(x_spread > 1e-12 * xbar.abs().max(1.0)) {
        return Err(Error::ConstantPredictor);
    }
    let s: Vec<f64> = successes.iter().map(|&v| v as f64).collect();
    let n: Vec<f64> = trials.iter().map(|&v| v as f64).collect();
    let (s_tot, n_tot) = (s.iter().sum::<f64>(), n.iter().sum::<f64>());
    if s_tot == 0.0 || s_tot == n_tot {
        return Err(Error::Separation);
    }

    // Work on centered x for conditioning, map back at the end.
    let xc: Vec<f64> = x.iter().map(|v| v - xbar).collect();
    let mut a = (s_tot / (n_tot - s_tot)).ln();
    let mut g = 0.0;
    let mut ll = loglik(&s, &n, &xc, a, g);
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..100 {
        iterations = it + 1;
        let (mut g0, mut g1) = (0.0, 0.0);
        let mut info = [[0.0; 2]; 2];
        for j in 0..m {
            let mu = logistic(a + g * xc[j]);
            let r = s[j] - n[j] * mu;
            let w = n[j] * mu * (1.0 - mu);
            g0 += r;
            g1 += r * xc[j];
            info[0][0] += w;
            info[0][1] += w * xc[j];
            info[1][1] += w * xc[j] * xc[j];
        }
        let det = info[0][0] * info[1][1] - info[0][1] * info[0][1];
        if !(det > 0.0) {
            return Err(Error::Separation);
        }
        let da = (info[1][1] * g0 - info[0][1] * g1) / det;
        let dg = (info[0][0] * g1 - info[0][1] * g0) / det;

        let mut t = 1.0;
        loop {
            let (na, ng) = (a + t * da, g + t * dg);
            let nll = loglik(&s, &n, &xc, na, ng);
            if nll >= ll - 1e-12 * ll.abs() || t < 1e-10 {
                a = na;
                g = ng;
                ll = nll;
                break;
            }
            t *= 0.5;
        }
        if (g * x_spread).abs() > 50.0 {
            return Err(Error::Separation);
        }
        if (t * da).abs() < 1e-12 * (1.0 + a.abs()) && (t * dg).abs() < 1e-12 * (1.0 + g.abs()) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NotConverged("grouped binomial GLM"));
    }
    // Information at the final estimate.
    let mut info = [[0.0; 2]; 2];
    for j in 0..m {
        let mu = logistic(a + g * xc[j]);
        let w = n[j] * mu * (1.0 - mu);
        info[0][0] += w;
        info[0][1] += w * xc[j];
        info[1][1] += w * xc[j] * xc[j];
    }
    let det = info[0][0] * info[1][1] - info[0][1] * info[0][1];
    let var_g = info[0][0] / det;
    let var_a_c = info[1][1] / det;
    let cov_ag = -info[0][1] / det;
    // intercept on the original x scale: a - g * xbar
    let intercept = a - g * xbar;
    let var_int = var_a_c + xbar * xbar * var_g - 2.0 * xbar * cov_ag;
    let std_error = var_g.sqrt();
    let z = g / std_error;
    Ok(GroupedGlm {
        intercept,
        intercept_se: var_int.max(0.0).sqrt(),
        coefficient: g,
        std_error,
        z,
        p_value: two_sided_p(z),
        iterations,
    })
}

/// Unweighted Pearson correlation.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64> {
    weighted_pearson_r(x, y, &vec![1.0; x.len()])
}

/// Pearson correlation with non-negative observation weights.
pub fn weighted_pearson_r(x: &[f64], y: &[f64], w: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() != w.len() {
        return Err(Error::Invalid("correlation inputs differ in length".into()));
    }
    if x.len() < 2 {
        return Err(Error::TooFewLevels {
            what: "points",
            needed: 2,
            got: x.len(),
        });
    }
    let sw: f64 = w.iter().sum();
    let mx = x.iter().zip(w).map(|(a, w)| a * w).sum::<f64>() / sw;
    let my = y.iter().zip(w).map(|(a, w)| a * w).sum::<f64>() / sw;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for ((a, b), w) in x.iter().zip(y).zip(w) {
        let (dx, dy) = (a - mx, b - my);
        sxx += w * dx * dx;
        syy += w * dy * dy;
        sxy += w * dx * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::ConstantInput);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}
