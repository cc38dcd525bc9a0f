//! Multilevel multidimensional latent-class IRT models for binary items.
//!
//! Students are nested in schools. Each student belongs to one of `k_V`
//! discrete ability classes and each school to one of `k_U` latent types;
//! covariates at both levels shift class and type membership through
//! multinomial logits. Item responses follow an LC, 1PL or 2PL model given the
//! student's class. Parameters are estimated by maximum marginal likelihood
//! with the EM algorithm.
//!
//! Module map:
//! - [`model`]: specification, parameters, item response probabilities
//! - [`weights`]: covariate-dependent mixing weights at both levels
//! - [`likelihood`]: datasets and log-likelihood evaluation
//! - [`em`]: E-step, M-step blocks, initialization and the fit loop
//! - [`selection`]: BIC, the school-type sweep, MAP classification, summaries
//! - [`simulate`]: synthetic data generation and recovery scoring
//! - [`io`] / [`commands`]: file formats and the `mlirt` command line

pub mod commands;
pub mod em;
pub mod error;
pub mod io;
pub mod likelihood;
pub mod math;
pub mod model;
pub mod selection;
pub mod simulate;
pub mod weights;

pub use em::{
    e_step, fit, initialize, m_step, multistart_fit, FitControls, FitResult, InitStrategy,
    PosteriorTables,
};
pub use error::{Error, Result};
pub use likelihood::{
    brute_force_loglik, group_conditional_loglik, marginal_loglik, student_conditional_loglik,
    Group, ResponseDataset, Student,
};
pub use model::{
    apply_identifiability, count_free_parameters, item_success_prob, validate_spec, ItemBank,
    ModelSpec, ParameterSet, Parameterization,
};
pub use weights::{school_type_weights, student_class_weights};
