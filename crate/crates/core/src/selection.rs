//! Model selection by BIC and post-estimation summaries: MAP classification,
//! average weights, school support points and covariate-profile tables.

use crate::em::{derive_seed, multistart_fit, FitControls, PosteriorTables};
use crate::error::{Error, Result};
use crate::likelihood::ResponseDataset;
use crate::math::argmax;
use crate::model::{
    class_ability_summary, class_log_weights_unchecked, count_free_parameters, ModelSpec,
    ParameterSet,
};
use crate::weights::school_type_weights;

/// `-2 loglik + ln(n) * n_par`.
pub fn bic(loglik: f64, n_par: usize, n: usize) -> f64 {
    -2.0 * loglik + (n as f64).ln() * n_par as f64
}

pub fn aic(loglik: f64, n_par: usize) -> f64 {
    -2.0 * loglik + 2.0 * n_par as f64
}

/// Which count plays the role of the sample size in [`bic`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BicSampleSize {
    Students,
    Schools,
    Explicit(usize),
}

impl BicSampleSize {
    pub fn resolve(self, data: &ResponseDataset) -> usize {
        match self {
            Self::Students => data.n_students(),
            Self::Schools => data.n_groups(),
            Self::Explicit(n) => n,
        }
    }
}

impl std::str::FromStr for BicSampleSize {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "students" => Ok(Self::Students),
            "schools" => Ok(Self::Schools),
            other => match other.parse::<usize>() {
                Ok(n) if n >= 1 => Ok(Self::Explicit(n)),
                _ => Err(format!("expected 'students', 'schools' or a positive integer, got '{other}'")),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub n_types: usize,
    pub n_par: usize,
    pub loglik: Option<f64>,
    pub bic: Option<f64>,
    pub converged: bool,
    /// Set when the fit for this row failed.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub chosen_n_types: Option<usize>,
    pub warnings: Vec<String>,
}

/// Applies the stopping rule to BIC values listed in sweep order: at the first
/// increase the previous entry is chosen; without an increase the last one is.
/// Returns the position in `bics`, or `None` for an empty slice.
pub fn stop_at_first_increase(bics: &[f64]) -> Option<usize> {
    if bics.is_empty() {
        return None;
    }
    for i in 1..bics.len() {
        if bics[i] > bics[i - 1] {
            return Some(i - 1);
        }
    }
    Some(bics.len() - 1)
}

/// Fits the model for increasing numbers of school types and stops as soon as
/// BIC increases. Failed fits are recorded and skipped by the stopping rule.
pub fn sweep_school_types(
    data: &ResponseDataset,
    base: &ModelSpec,
    type_counts: &[usize],
    controls: &FitControls,
    bic_n: usize,
) -> Result<SweepResult> {
    if type_counts.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidControls(
            "school type counts must be strictly increasing".into(),
        ));
    }
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    let mut ok_bics: Vec<(usize, f64)> = Vec::new();
    for &ku in type_counts {
        let spec = ModelSpec {
            n_types: ku,
            ..base.clone()
        };
        if ku < spec.n_classes {
            warnings.push(format!(
                "{ku} school types is fewer than the {} student classes",
                spec.n_classes
            ));
        }
        let n_par = count_free_parameters(&spec);
        let c = FitControls {
            seed: derive_seed(controls.seed, ku as u64),
            ..controls.clone()
        };
        match multistart_fit(data, &spec, &c) {
            Ok(res) => {
                let b = bic(res.loglik, n_par, bic_n);
                rows.push(SweepRow {
                    n_types: ku,
                    n_par,
                    loglik: Some(res.loglik),
                    bic: Some(b),
                    converged: res.converged,
                    error: None,
                });
                if let Some(&(_, prev)) = ok_bics.last() {
                    ok_bics.push((ku, b));
                    if b > prev {
                        break;
                    }
                } else {
                    ok_bics.push((ku, b));
                }
            }
            Err(e) => rows.push(SweepRow {
                n_types: ku,
                n_par,
                loglik: None,
                bic: None,
                converged: false,
                error: Some(e.to_string()),
            }),
        }
    }
    let values: Vec<f64> = ok_bics.iter().map(|&(_, b)| b).collect();
    let chosen_n_types = stop_at_first_increase(&values).map(|i| ok_bics[i].0);
    Ok(SweepResult {
        rows,
        chosen_n_types,
        warnings,
    })
}

/// A MAP label with its posterior probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Assignment {
    pub label: usize,
    pub posterior: f64,
}

fn map_label(post: &[f64]) -> Assignment {
    let label = argmax(post);
    Assignment {
        label,
        posterior: post[label],
    }
}

/// MAP class of every student (ties go to the lowest class).
pub fn assign_students(post: &PosteriorTables) -> Vec<Vec<Assignment>> {
    post.class_post
        .iter()
        .map(|g| g.iter().map(|z| map_label(z)).collect())
        .collect()
}

/// MAP type of every school (ties go to the lowest type).
pub fn assign_schools(post: &PosteriorTables) -> Vec<Assignment> {
    post.type_post.iter().map(|z| map_label(z)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AverageWeights {
    pub classes: Vec<f64>,
    pub types: Vec<f64>,
}

/// Average student-class weights (each student's weights mixed over school
/// types with the type posterior) and average type posteriors over schools.
pub fn average_class_weights(
    data: &ResponseDataset,
    params: &ParameterSet,
    post: &PosteriorTables,
) -> AverageWeights {
    let kv = post.n_classes;
    let ku = post.n_types;
    let mut classes = vec![0.0; kv];
    let mut types = vec![0.0; ku];
    let mut n = 0usize;
    for (h, g) in data.groups.iter().enumerate() {
        for (t, z) in types.iter_mut().zip(&post.type_post[h]) {
            *t += z;
        }
        for s in &g.students {
            n += 1;
            for (u, zu) in post.type_post[h].iter().enumerate() {
                let w = class_log_weights_unchecked(&s.covariates, u, params);
                for (c, lw) in classes.iter_mut().zip(&w) {
                    *c += zu * lw.exp();
                }
            }
        }
    }
    classes.iter_mut().for_each(|c| *c /= n as f64);
    types.iter_mut().for_each(|t| *t /= data.n_groups() as f64);
    AverageWeights { classes, types }
}

/// Per-dimension weighted standardization: subtract the weighted mean and
/// divide by the weighted (population) standard deviation. Dimensions with
/// zero variance map to zeros.
pub fn standardize_abilities(abilities: &[Vec<f64>], weights: &[f64]) -> Vec<Vec<f64>> {
    let s = abilities.first().map_or(0, Vec::len);
    let mut out = abilities.to_vec();
    for d in 0..s {
        let (mean, sd) = weighted_moments(abilities.iter().map(|row| row[d]), weights);
        for row in out.iter_mut() {
            row[d] = if sd > 1e-12 { (row[d] - mean) / sd } else { 0.0 };
        }
    }
    out
}

fn weighted_moments(values: impl Iterator<Item = f64> + Clone, weights: &[f64]) -> (f64, f64) {
    let total: f64 = weights.iter().sum();
    let mean = values.clone().zip(weights).map(|(x, w)| w * x).sum::<f64>() / total;
    let var = values
        .zip(weights)
        .map(|(x, w)| w * (x - mean) * (x - mean))
        .sum::<f64>()
        / total;
    (mean, var.max(0.0).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupportPoints {
    /// `None` when no school carries posterior mass for the type.
    pub raw: Vec<Option<f64>>,
    /// On the scale of the student ability distribution (mean 0, sd 1).
    pub standardized: Vec<Option<f64>>,
}

/// School-level support points: for each type, the posterior-weighted mean
/// over schools of the school's expected student ability (averaged over
/// students and dimensions) given that type.
pub fn school_support_points(
    data: &ResponseDataset,
    params: &ParameterSet,
    post: &PosteriorTables,
    spec: &ModelSpec,
) -> SupportPoints {
    let kv = spec.n_classes;
    let ku = spec.n_types;
    let class_mean: Vec<f64> = class_ability_summary(params, spec)
        .iter()
        .map(|row| row.iter().sum::<f64>() / row.len() as f64)
        .collect();
    let mut num = vec![0.0; ku];
    let mut den = vec![0.0; ku];
    for (h, g) in data.groups.iter().enumerate() {
        for u in 0..ku {
            let mut expected = 0.0;
            for s in &g.students {
                let w = class_log_weights_unchecked(&s.covariates, u, params);
                expected += (0..kv).map(|v| w[v].exp() * class_mean[v]).sum::<f64>();
            }
            expected /= g.students.len() as f64;
            num[u] += post.type_post[h][u] * expected;
            den[u] += post.type_post[h][u];
        }
    }
    let raw: Vec<Option<f64>> = num
        .iter()
        .zip(&den)
        .map(|(n, d)| if *d > 1e-12 { Some(n / d) } else { None })
        .collect();
    let avg = average_class_weights(data, params, post);
    let (mean, sd) = weighted_moments(class_mean.iter().copied(), &avg.classes);
    let standardized = raw
        .iter()
        .map(|r| r.map(|x| if sd > 1e-12 { (x - mean) / sd } else { 0.0 }))
        .collect();
    SupportPoints { raw, standardized }
}

/// School-type probabilities at each covariate profile.
pub fn type_probabilities_by_profile(params: &ParameterSet, profiles: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    profiles.iter().map(|w| school_type_weights(w, params)).collect()
}

/// Everything reported after a fit, derived from the final posteriors.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationResult {
    pub students: Vec<Vec<Assignment>>,
    pub schools: Vec<Assignment>,
    pub average_weights: AverageWeights,
    pub support_points: SupportPoints,
    pub standardized_abilities: Vec<Vec<f64>>,
}

pub fn classify(
    data: &ResponseDataset,
    params: &ParameterSet,
    post: &PosteriorTables,
    spec: &ModelSpec,
) -> ClassificationResult {
    let average_weights = average_class_weights(data, params, post);
    let standardized_abilities =
        standardize_abilities(&class_ability_summary(params, spec), &average_weights.classes);
    ClassificationResult {
        students: assign_students(post),
        schools: assign_schools(post),
        support_points: school_support_points(data, params, post, spec),
        average_weights,
        standardized_abilities,
    }
}
