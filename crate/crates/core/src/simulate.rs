//! Synthetic data from a known parameter set, label alignment and recovery
//! scoring.
//!
//! Every school draws from its own ChaCha8 stream: the generator is seeded
//! with the design seed and switched to stream `h` for school `h`. Datasets
//! are therefore identical across platforms and thread counts.

use itertools::Itertools;
use rand::distr::weighted::WeightedIndex;
use rand::distr::{Bernoulli, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::em::{FitResult, PosteriorTables};
use crate::error::{Error, Result};
use crate::likelihood::{marginal_loglik, Group, ResponseDataset, Student};
use crate::math::argmax;
use crate::model::{
    class_log_weights_unchecked, item_success_prob, type_log_weights_unchecked, ItemBank,
    ModelSpec, ParameterSet, Parameterization,
};

const MAX_ALIGNMENT: usize = 8;

/// Distribution of one covariate. A categorical covariate with `c` levels
/// produces `c - 1` indicator columns (level 0 is the reference).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CovariateGenerator {
    Bernoulli { p: f64 },
    Categorical { probs: Vec<f64> },
    Normal { mean: f64, sd: f64 },
}

impl CovariateGenerator {
    pub fn n_columns(&self) -> usize {
        match self {
            Self::Categorical { probs } => probs.len().saturating_sub(1),
            _ => 1,
        }
    }

    fn check(&self) -> std::result::Result<(), String> {
        match self {
            Self::Bernoulli { p } if !(0.0..=1.0).contains(p) => {
                Err(format!("Bernoulli probability {p} outside [0, 1]"))
            }
            Self::Categorical { probs }
                if probs.len() < 2
                    || probs.iter().any(|p| !(*p >= 0.0) || !p.is_finite())
                    || !(probs.iter().sum::<f64>() > 0.0) =>
            {
                Err(format!("invalid categorical probabilities {probs:?}"))
            }
            Self::Normal { mean, sd } if !mean.is_finite() || !(*sd >= 0.0) || !sd.is_finite() => {
                Err(format!("invalid normal covariate N({mean}, {sd})"))
            }
            _ => Ok(()),
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng, out: &mut Vec<f64>) {
        match self {
            Self::Bernoulli { p } => {
                let b = Bernoulli::new(*p).expect("checked probability");
                out.push(f64::from(u8::from(b.sample(rng))));
            }
            Self::Categorical { probs } => {
                let level = WeightedIndex::new(probs).expect("checked weights").sample(rng);
                out.extend((1..probs.len()).map(|c| f64::from(u8::from(c == level))));
            }
            Self::Normal { mean, sd } => {
                out.push(Normal::new(*mean, *sd).expect("checked sd").sample(rng));
            }
        }
    }
}

/// Number of students per school.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GroupSizes {
    Fixed(usize),
    /// Uniform on `min..=max`.
    Range { min: usize, max: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationDesign {
    pub seed: u64,
    pub n_groups: usize,
    pub group_sizes: GroupSizes,
    /// Probability that any single response is masked as missing.
    #[serde(default)]
    pub missing_rate: f64,
    #[serde(default)]
    pub student_covariates: Vec<CovariateGenerator>,
    #[serde(default)]
    pub school_covariates: Vec<CovariateGenerator>,
    pub spec: ModelSpec,
    pub truth: ParameterSet,
}

impl SimulationDesign {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidDesign(m));
        self.spec.validate()?;
        self.truth.check(&self.spec)?;
        if self.n_groups == 0 {
            return bad("at least one school is required".into());
        }
        match self.group_sizes {
            GroupSizes::Fixed(0) => return bad("schools need at least one student".into()),
            GroupSizes::Range { min, max } if min == 0 || min > max => {
                return bad(format!("invalid group size range {min}..={max}"))
            }
            _ => {}
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return bad(format!("missing rate {} outside [0, 1)", self.missing_rate));
        }
        for g in self.student_covariates.iter().chain(&self.school_covariates) {
            g.check().map_err(Error::InvalidDesign)?;
        }
        let mv: usize = self.student_covariates.iter().map(CovariateGenerator::n_columns).sum();
        let mu: usize = self.school_covariates.iter().map(CovariateGenerator::n_columns).sum();
        if mv != self.spec.n_student_covariates || mu != self.spec.n_school_covariates {
            return bad(format!(
                "generators produce {mv} student and {mu} school columns, the model expects {} and {}",
                self.spec.n_student_covariates, self.spec.n_school_covariates
            ));
        }
        Ok(())
    }
}

/// Latent labels drawn by the generator (0-based).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrueLabels {
    pub types: Vec<usize>,
    pub classes: Vec<Vec<usize>>,
}

/// The reference simulation: 200 schools of 20 students, 15 unidimensional
/// 2PL items, three classes at abilities -1.5, 0 and 1.5, two school types and
/// one binary covariate at each level with slope 0.5.
pub fn default_design(seed: u64) -> SimulationDesign {
    let r = 15;
    let spec = ModelSpec {
        items: ItemBank::unidimensional(r),
        n_classes: 3,
        n_types: 2,
        parameterization: Parameterization::TwoPl,
        n_student_covariates: 1,
        n_school_covariates: 1,
    };
    let mut truth = ParameterSet::neutral(&spec);
    for j in 1..r {
        truth.difficulty[j] = -1.5 + 3.0 * (j - 1) as f64 / (r - 2) as f64;
        truth.discrimination[j] = 0.7 + 0.8 * ((3 * j) % (r - 1)) as f64 / (r - 2) as f64;
    }
    truth.ability = vec![vec![-1.5], vec![0.0], vec![1.5]];
    truth.class_intercepts = vec![vec![0.0, -1.5], vec![1.0, 2.0]];
    truth.class_slopes = vec![vec![0.5], vec![0.5]];
    truth.type_intercepts = vec![0.0];
    truth.type_slopes = vec![vec![0.5]];
    SimulationDesign {
        seed,
        n_groups: 200,
        group_sizes: GroupSizes::Fixed(20),
        missing_rate: 0.0,
        student_covariates: vec![CovariateGenerator::Bernoulli { p: 0.5 }],
        school_covariates: vec![CovariateGenerator::Bernoulli { p: 0.5 }],
        spec,
        truth,
    }
}

/// School and student identifiers used by the generator.
pub fn school_id(h: usize) -> String {
    format!("S{:04}", h + 1)
}

/// Draws a dataset and its latent labels from the design.
pub fn generate_dataset(design: &SimulationDesign) -> Result<(ResponseDataset, TrueLabels)> {
    design.validate()?;
    let spec = &design.spec;
    let probs: Vec<Vec<f64>> = (0..spec.n_classes)
        .map(|v| {
            (0..spec.n_items())
                .map(|j| item_success_prob(j, v, &design.truth, spec))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let drawn: Vec<(Group, usize, Vec<usize>)> = (0..design.n_groups)
        .into_par_iter()
        .map(|h| simulate_group(design, &probs, h))
        .collect();
    let mut groups = Vec::with_capacity(drawn.len());
    let mut labels = TrueLabels {
        types: Vec::with_capacity(drawn.len()),
        classes: Vec::with_capacity(drawn.len()),
    };
    for (g, u, vs) in drawn {
        groups.push(g);
        labels.types.push(u);
        labels.classes.push(vs);
    }
    Ok((ResponseDataset { groups }, labels))
}

fn simulate_group(design: &SimulationDesign, probs: &[Vec<f64>], h: usize) -> (Group, usize, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(design.seed);
    rng.set_stream(h as u64);
    let n = match design.group_sizes {
        GroupSizes::Fixed(n) => n,
        GroupSizes::Range { min, max } => rng.random_range(min..=max),
    };
    let mut w = Vec::new();
    for g in &design.school_covariates {
        g.draw(&mut rng, &mut w);
    }
    let u = draw_category(&type_log_weights_unchecked(&w, &design.truth), &mut rng);
    let mut students = Vec::with_capacity(n);
    let mut classes = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = Vec::new();
        for g in &design.student_covariates {
            g.draw(&mut rng, &mut x);
        }
        let v = draw_category(&class_log_weights_unchecked(&x, u, &design.truth), &mut rng);
        let responses = probs[v]
            .iter()
            .map(|&p| {
                let y = rng.random::<f64>() < p;
                if design.missing_rate > 0.0 && rng.random::<f64>() < design.missing_rate {
                    None
                } else {
                    Some(y)
                }
            })
            .collect();
        students.push(Student {
            id: (i + 1).to_string(),
            covariates: x,
            responses,
        });
        classes.push(v);
    }
    let group = Group {
        id: school_id(h),
        covariates: w,
        students,
    };
    (group, u, classes)
}

fn draw_category(log_weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let w: Vec<f64> = log_weights.iter().map(|l| l.exp()).collect();
    WeightedIndex::new(&w).expect("softmax weights").sample(rng)
}

/// Label permutations that map the truth onto an estimate: true class `v`
/// corresponds to estimated class `classes[v]`, likewise for types.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub classes: Vec<usize>,
    pub types: Vec<usize>,
    pub class_distance: f64,
    pub type_distance: f64,
}

impl Alignment {
    /// The estimate relabelled onto the truth's labels.
    pub fn apply(&self, estimate: &ParameterSet) -> ParameterSet {
        estimate.permute_classes(&self.classes).permute_types(&self.types)
    }
}

/// Exhaustive search for the class permutation minimizing the squared
/// distance between class profiles (abilities, or response logits for LC),
/// then for the type permutation minimizing the distance between the
/// type-specific class intercepts and the log type weights at zero covariates.
pub fn align_labels(truth: &ParameterSet, estimate: &ParameterSet, spec: &ModelSpec) -> Result<Alignment> {
    truth.check(spec)?;
    estimate.check(spec)?;
    let kv = spec.n_classes;
    let ku = spec.n_types;
    if kv.max(ku) > MAX_ALIGNMENT {
        return Err(Error::AlignmentTooLarge(kv.max(ku)));
    }
    let profile = |p: &ParameterSet, v: usize| -> Vec<f64> {
        let mut f = p.ability[v].clone();
        if let Some(row) = p.lc_logit.get(v) {
            f.extend(row);
        }
        f
    };
    let t_class: Vec<Vec<f64>> = (0..kv).map(|v| profile(truth, v)).collect();
    let e_class: Vec<Vec<f64>> = (0..kv).map(|v| profile(estimate, v)).collect();
    let (classes, class_distance) = best_permutation(kv, |perm| {
        (0..kv).map(|v| sq_dist(&t_class[v], &e_class[perm[v]])).sum()
    });

    let relabelled = estimate.permute_classes(&classes);
    let type_profile = |p: &ParameterSet| -> Vec<Vec<f64>> {
        let lw = type_log_weights_unchecked(&vec![0.0; spec.n_school_covariates], p);
        (0..ku)
            .map(|u| {
                let mut f = p.class_intercepts[u].clone();
                f.push(lw[u]);
                f
            })
            .collect()
    };
    let t_type = type_profile(truth);
    let e_type = type_profile(&relabelled);
    let (types, type_distance) = best_permutation(ku, |perm| {
        (0..ku).map(|u| sq_dist(&t_type[u], &e_type[perm[u]])).sum()
    });
    Ok(Alignment {
        classes,
        types,
        class_distance,
        type_distance,
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

// Lexicographic order puts the identity first, so exact ties keep labels.
fn best_permutation(k: usize, cost: impl Fn(&[usize]) -> f64) -> (Vec<usize>, f64) {
    let mut best = ((0..k).collect::<Vec<_>>(), f64::INFINITY);
    for perm in (0..k).permutations(k) {
        let c = cost(&perm);
        if c < best.1 {
            best = (perm, c);
        }
    }
    best
}

/// Error summary of one parameter block.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BlockError {
    pub rmse: f64,
    pub max_abs: f64,
    pub median_abs: f64,
    pub count: usize,
}

impl BlockError {
    pub fn new(truth: &[f64], estimate: &[f64]) -> Self {
        let mut abs: Vec<f64> = truth.iter().zip(estimate).map(|(t, e)| (t - e).abs()).collect();
        if abs.is_empty() {
            return Self::default();
        }
        abs.sort_by(f64::total_cmp);
        let n = abs.len();
        let median = if n % 2 == 1 {
            abs[n / 2]
        } else {
            (abs[n / 2 - 1] + abs[n / 2]) / 2.0
        };
        Self {
            rmse: (abs.iter().map(|a| a * a).sum::<f64>() / n as f64).sqrt(),
            max_abs: abs[n - 1],
            median_abs: median,
            count: n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub alignment: Alignment,
    /// Free difficulties (reference items excluded).
    pub difficulty: BlockError,
    /// Free discriminations (reference items excluded; empty unless 2PL).
    pub discrimination: BlockError,
    pub ability: BlockError,
    /// Response logits of the unrestricted parameterization.
    pub lc_logit: BlockError,
    /// Class intercepts and slopes.
    pub class_coefficients: BlockError,
    /// Type intercepts and slopes.
    pub type_coefficients: BlockError,
    /// All logit coefficients of both levels pooled.
    pub coefficients: BlockError,
    pub student_accuracy: f64,
    pub school_accuracy: f64,
    pub loglik_truth: f64,
    pub loglik_fitted: f64,
}

/// Scores a fit against the truth that generated `data`.
pub fn recovery_report(
    truth: &ParameterSet,
    fit: &FitResult,
    labels: &TrueLabels,
    data: &ResponseDataset,
    spec: &ModelSpec,
) -> Result<RecoveryReport> {
    let alignment = align_labels(truth, &fit.params, spec)?;
    let est = alignment.apply(&fit.params);
    let free: Vec<usize> = (0..spec.n_items()).filter(|&j| !spec.items.is_reference(j)).collect();
    let pick = |v: &[f64]| free.iter().map(|&j| v[j]).collect::<Vec<f64>>();
    let (difficulty, discrimination) = match spec.parameterization {
        Parameterization::Lc => (BlockError::default(), BlockError::default()),
        Parameterization::OnePl => (
            BlockError::new(&pick(&truth.difficulty), &pick(&est.difficulty)),
            BlockError::default(),
        ),
        Parameterization::TwoPl => (
            BlockError::new(&pick(&truth.difficulty), &pick(&est.difficulty)),
            BlockError::new(&pick(&truth.discrimination), &pick(&est.discrimination)),
        ),
    };
    let (ability, lc_logit) = match spec.parameterization {
        Parameterization::Lc => (
            BlockError::default(),
            BlockError::new(&flat(&truth.lc_logit), &flat(&est.lc_logit)),
        ),
        _ => (
            BlockError::new(&flat(&truth.ability), &flat(&est.ability)),
            BlockError::default(),
        ),
    };
    let class_t = [flat(&truth.class_intercepts), flat(&truth.class_slopes)].concat();
    let class_e = [flat(&est.class_intercepts), flat(&est.class_slopes)].concat();
    let type_t = [truth.type_intercepts.clone(), flat(&truth.type_slopes)].concat();
    let type_e = [est.type_intercepts.clone(), flat(&est.type_slopes)].concat();
    let coefficients = BlockError::new(&[class_t.clone(), type_t.clone()].concat(), &[class_e.clone(), type_e.clone()].concat());

    let (student_accuracy, school_accuracy) = accuracies(&fit.posteriors, &alignment, labels);
    Ok(RecoveryReport {
        difficulty,
        discrimination,
        ability,
        lc_logit,
        class_coefficients: BlockError::new(&class_t, &class_e),
        type_coefficients: BlockError::new(&type_t, &type_e),
        coefficients,
        student_accuracy,
        school_accuracy,
        loglik_truth: marginal_loglik(data, truth, spec)?,
        loglik_fitted: fit.loglik,
        alignment,
    })
}

fn flat(m: &[Vec<f64>]) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

fn inverse(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (t, &e) in perm.iter().enumerate() {
        inv[e] = t;
    }
    inv
}

/// Fractions of students and schools whose MAP label, translated to the
/// truth's labels, equals the true label.
pub fn accuracies(post: &PosteriorTables, alignment: &Alignment, labels: &TrueLabels) -> (f64, f64) {
    let class_of = inverse(&alignment.classes);
    let type_of = inverse(&alignment.types);
    let (mut hit, mut n) = (0usize, 0usize);
    for (g, truth) in post.class_post.iter().zip(&labels.classes) {
        for (z, &v) in g.iter().zip(truth) {
            n += 1;
            hit += usize::from(class_of[argmax(z)] == v);
        }
    }
    let school_hits = post
        .type_post
        .iter()
        .zip(&labels.types)
        .filter(|(z, &u)| type_of[argmax(z)] == u)
        .count();
    (
        hit as f64 / n.max(1) as f64,
        school_hits as f64 / labels.types.len().max(1) as f64,
    )
}
