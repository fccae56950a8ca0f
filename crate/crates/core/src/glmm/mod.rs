//! Logistic mixed-effects model with crossed server and returner random
//! intercepts, fitted by maximizing a Laplace-approximated marginal
//! likelihood over the two variance components.

mod design;
mod fit;
pub mod nelder_mead;
mod pirls;

pub use design::{build_design, DesignMatrix, DesignReport, FixedLayout};
pub use fit::{
    fit_at, fit_glmm, laplace_from_mode, laplace_objective, FitOptions, FixedEffect, GlmmFit, Iterations,
    RandomEffect,
};
pub use pirls::{penalized_objective, pirls, Mode, PirlsOptions, VarianceComponents, VARIANCE_FLOOR};
