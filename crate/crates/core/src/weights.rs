//! Covariate-dependent mixing weights (multinomial logits with the first
//! category as reference).

use crate::error::{Error, Result};
use crate::model::{class_log_weights_unchecked, type_log_weights_unchecked, ParameterSet};

/// Log of `P(V = v | U = u, X = x)` for every class `v`.
pub fn student_class_log_weights(x: &[f64], u: usize, params: &ParameterSet) -> Result<Vec<f64>> {
    let ku = params.class_intercepts.len();
    if u >= ku {
        return Err(Error::TypeOutOfRange { index: u, count: ku });
    }
    let m = params.class_slopes.first().map_or(x.len(), Vec::len);
    if x.len() != m {
        return Err(Error::CovariateLength {
            expected: m,
            found: x.len(),
        });
    }
    check_finite(x)?;
    Ok(class_log_weights_unchecked(x, u, params))
}

/// `P(V = v | U = u, X = x)` for every class `v`.
pub fn student_class_weights(x: &[f64], u: usize, params: &ParameterSet) -> Result<Vec<f64>> {
    student_class_log_weights(x, u, params).map(exp_all)
}

/// Log of `P(U = u | W = w)` for every type `u`.
pub fn school_type_log_weights(w: &[f64], params: &ParameterSet) -> Result<Vec<f64>> {
    let m = params.type_slopes.first().map_or(w.len(), Vec::len);
    if w.len() != m {
        return Err(Error::CovariateLength {
            expected: m,
            found: w.len(),
        });
    }
    check_finite(w)?;
    Ok(type_log_weights_unchecked(w, params))
}

/// `P(U = u | W = w)` for every type `u`.
pub fn school_type_weights(w: &[f64], params: &ParameterSet) -> Result<Vec<f64>> {
    school_type_log_weights(w, params).map(exp_all)
}

fn exp_all(mut v: Vec<f64>) -> Vec<f64> {
    v.iter_mut().for_each(|x| *x = x.exp());
    v
}

fn check_finite(x: &[f64]) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("covariates"))
    }
}
