use std::cell::{Cell, RefCell};
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::design::{DesignMatrix, FixedLayout};
use super::nelder_mead::{self, NelderMeadOptions};
use super::pirls::{pirls_with, Mode, PirlsOptions, Structure, VarianceComponents, VARIANCE_FLOOR};
use crate::error::{Error, Result};

/// Laplace approximation to the log marginal likelihood at the joint mode.
///
/// Exactly `l(b, u, v) - u'u/(2 s2) - v'v/(2 t2) - 1/2 log det(I + L Z'WZ L)`,
/// which is the Laplace approximation of
/// `log ∫ p(y | b, u, v) N(u; 0, s2 I) N(v; 0, t2 I) du dv` with b held at
/// its joint mode. No constants are dropped, so values are directly
/// comparable with a quadrature evaluation of the same integral.
pub fn laplace_from_mode(mode: &Mode) -> f64 {
    mode.penalized_loglik - 0.5 * mode.log_det_random
}

pub fn laplace_objective(design: &DesignMatrix, vc: VarianceComponents) -> Result<f64> {
    let s = Structure::new(design);
    let mode = pirls_with(design, &s, vc, None, PirlsOptions::default())?;
    if !mode.converged {
        return Err(Error::NotConverged("penalized IRLS"));
    }
    Ok(laplace_from_mode(&mode))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    /// Starting variances for both components.
    pub start: VarianceComponents,
    pub outer: NelderMeadOptions,
    pub inner: PirlsOptions,
    /// Upper bound on either variance.
    pub max_variance: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            start: VarianceComponents::new(0.25, 0.25),
            outer: NelderMeadOptions::default(),
            inner: PirlsOptions::default(),
            max_variance: 1e3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedEffect {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomEffect {
    pub player: String,
    pub estimate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Iterations {
    pub outer: usize,
    /// PIRLS iterations summed over every objective evaluation.
    pub inner: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmmFit {
    pub fixed_effects: Vec<FixedEffect>,
    pub servers: Vec<RandomEffect>,
    pub returners: Vec<RandomEffect>,
    pub vc: VarianceComponents,
    pub laplace_loglik: f64,
    pub converged: bool,
    pub n_points: usize,
    pub iterations: Iterations,
    /// Components pinned at the variance floor (`"sigma2"`, `"tau2"`).
    pub degenerate: Vec<String>,
    pub warnings: Vec<String>,
    pub layout: Option<FixedLayout>,
}

impl GlmmFit {
    pub fn beta(&self) -> Vec<f64> {
        self.fixed_effects.iter().map(|f| f.estimate).collect()
    }

    pub fn beta_se(&self) -> Vec<f64> {
        self.fixed_effects.iter().map(|f| f.std_error).collect()
    }

    pub fn column_names(&self) -> Vec<String> {
        self.fixed_effects.iter().map(|f| f.name.clone()).collect()
    }

    pub fn u(&self) -> Vec<f64> {
        self.servers.iter().map(|r| r.estimate).collect()
    }

    pub fn v(&self) -> Vec<f64> {
        self.returners.iter().map(|r| r.estimate).collect()
    }

    pub fn server_effects(&self) -> HashMap<&str, f64> {
        self.servers.iter().map(|r| (r.player.as_str(), r.estimate)).collect()
    }
}

fn assemble(design: &DesignMatrix, mode: &Mode, vc: VarianceComponents) -> GlmmFit {
    let fixed_effects = design
        .column_names
        .iter()
        .enumerate()
        .map(|(c, name)| FixedEffect {
            name: name.clone(),
            estimate: mode.beta[c],
            std_error: mode.fixed_cov[(c, c)].max(0.0).sqrt(),
        })
        .collect();
    let table = |labels: &[String], est: &[f64]| {
        labels
            .iter()
            .zip(est)
            .map(|(p, e)| RandomEffect {
                player: p.clone(),
                estimate: *e,
            })
            .collect()
    };
    GlmmFit {
        fixed_effects,
        servers: table(&design.server_labels, &mode.u),
        returners: table(&design.returner_labels, &mode.v),
        vc,
        laplace_loglik: laplace_from_mode(mode),
        converged: mode.converged,
        n_points: design.n_rows(),
        iterations: Iterations {
            outer: 0,
            inner: mode.iterations,
        },
        degenerate: Vec::new(),
        warnings: mode.diagnostic.iter().cloned().collect(),
        layout: design.layout.clone(),
    }
}

/// Evaluates the fit at fixed variance components (no outer search).
pub fn fit_at(design: &DesignMatrix, vc: VarianceComponents) -> Result<GlmmFit> {
    let s = Structure::new(design);
    let mode = pirls_with(design, &s, vc, None, PirlsOptions::default())?;
    Ok(assemble(design, &mode, vc))
}

/// Maximizes the Laplace objective over `(log sigma2, log tau2)` with a
/// simplex search and returns the fit at the optimum. A design without
/// returner levels fits the server variance only.
pub fn fit_glmm(design: &DesignMatrix, opts: FitOptions) -> Result<GlmmFit> {
    if design.n_servers() < 2 {
        return Err(Error::TooFewLevels {
            what: "servers",
            needed: 2,
            got: design.n_servers(),
        });
    }
    if design.n_returners() == 1 {
        return Err(Error::TooFewLevels {
            what: "returners",
            needed: 2,
            got: 1,
        });
    }
    let has_returners = design.n_returners() > 0;
    let s = Structure::new(design);
    let lo = VARIANCE_FLOOR.ln();
    let hi = opts.max_variance.ln();
    let to_vc = |x: &[f64]| {
        let sigma2 = x[0].clamp(lo, hi).exp();
        let tau2 = if has_returners { x[1].clamp(lo, hi).exp() } else { VARIANCE_FLOOR };
        VarianceComponents::new(sigma2, tau2)
    };

    let warm: RefCell<Option<Mode>> = RefCell::new(None);
    let inner_total = Cell::new(0usize);
    let first_error: RefCell<Option<Error>> = RefCell::new(None);
    let objective = |x: &[f64]| -> f64 {
        let result = pirls_with(design, &s, to_vc(x), warm.borrow().as_ref(), opts.inner);
        match result {
            Ok(mode) => {
                inner_total.set(inner_total.get() + mode.iterations);
                let value = if mode.converged { -laplace_from_mode(&mode) } else { f64::INFINITY };
                *warm.borrow_mut() = Some(mode);
                value
            }
            Err(e) => {
                first_error.borrow_mut().get_or_insert(e);
                f64::INFINITY
            }
        }
    };

    let mut x0 = vec![opts.start.sigma2.ln()];
    if has_returners {
        x0.push(opts.start.tau2.ln());
    }
    let min = nelder_mead::minimize(&objective, &x0, opts.outer);
    if !min.f.is_finite() {
        if let Some(e) = first_error.borrow_mut().take() {
            return Err(e);
        }
        // Every evaluation failed to converge; report the start point.
        let mode = pirls_with(design, &s, opts.start, None, opts.inner)?;
        let mut fit = assemble(design, &mode, opts.start);
        fit.converged = false;
        fit.warnings.push("no variance components gave a converged mode".into());
        return Ok(fit);
    }

    // Pin components whose floor value is as good as the interior optimum.
    let mut best = min.x.clone();
    let mut best_f = min.f;
    let mut degenerate = Vec::new();
    for (k, name) in ["sigma2", "tau2"].into_iter().enumerate().take(x0.len()) {
        let mut trial = best.clone();
        trial[k] = lo;
        let f = objective(&trial);
        if f <= best_f + 1e-7 {
            if f < best_f {
                best_f = f;
            }
            best = trial;
        }
        if best[k] <= lo + 1e-9 {
            degenerate.push(name.to_string());
        }
    }

    let vc = to_vc(&best);
    let mode = pirls_with(design, &s, vc, None, opts.inner)?;
    let mut fit = assemble(design, &mode, vc);
    fit.iterations = Iterations {
        outer: min.iterations,
        inner: inner_total.get() + mode.iterations,
    };
    fit.converged = mode.converged && min.converged;
    if !min.converged {
        fit.warnings
            .push(format!("variance search hit the iteration cap ({})", opts.outer.max_iter));
    }
    for name in &degenerate {
        log::warn!("variance component {name} pinned at the floor {VARIANCE_FLOOR:e}");
        fit.warnings.push(format!("degenerate variance: {name} at floor"));
    }
    fit.degenerate = degenerate;
    Ok(fit)
}
