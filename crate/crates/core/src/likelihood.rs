//! Response data and marginal log-likelihood evaluation.
//!
//! Everything is accumulated in log space: per-item log-probabilities come
//! from a stable log-logistic, mixtures over classes and types go through
//! max-shifted log-sum-exp, and the group likelihood is never exponentiated.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::math::{log_logistic, log_sum_exp};
use crate::model::{
    class_log_weights_unchecked, item_logit, type_log_weights_unchecked, ModelSpec, ParameterSet,
    Parameterization,
};

/// Default cap on the number of enumerated latent configurations in
/// [`brute_force_loglik`].
pub const DEFAULT_ENUMERATION_CAP: u128 = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Student {
    pub id: String,
    pub covariates: Vec<f64>,
    /// `Some(true)` correct, `Some(false)` wrong, `None` missing.
    pub responses: Vec<Option<bool>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub id: String,
    pub covariates: Vec<f64>,
    pub students: Vec<Student>,
}

/// Binary responses of students nested in schools.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResponseDataset {
    pub groups: Vec<Group>,
}

impl ResponseDataset {
    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn n_students(&self) -> usize {
        self.groups.iter().map(|g| g.students.len()).sum()
    }

    pub fn students(&self) -> impl Iterator<Item = &Student> {
        self.groups.iter().flat_map(|g| g.students.iter())
    }

    /// Checks the dataset against the shape declared by `spec`.
    pub fn check(&self, spec: &ModelSpec) -> Result<()> {
        let bad = |msg: String| Err(Error::DataShape(msg));
        if self.groups.is_empty() {
            return bad("dataset has no groups".into());
        }
        for g in &self.groups {
            if g.students.is_empty() {
                return bad(format!("group '{}' has no students", g.id));
            }
            if g.covariates.len() != spec.n_school_covariates {
                return bad(format!(
                    "group '{}' has {} covariates, expected {}",
                    g.id,
                    g.covariates.len(),
                    spec.n_school_covariates
                ));
            }
            for s in &g.students {
                if s.responses.len() != spec.n_items() {
                    return bad(format!(
                        "student '{}' in group '{}' has {} responses, expected {}",
                        s.id,
                        g.id,
                        s.responses.len(),
                        spec.n_items()
                    ));
                }
                if s.covariates.len() != spec.n_student_covariates {
                    return bad(format!(
                        "student '{}' in group '{}' has {} covariates, expected {}",
                        s.id,
                        g.id,
                        s.covariates.len(),
                        spec.n_student_covariates
                    ));
                }
                if !s.covariates.iter().all(|v| v.is_finite()) {
                    return bad(format!("student '{}' has non-finite covariates", s.id));
                }
            }
            if !g.covariates.iter().all(|v| v.is_finite()) {
                return bad(format!("group '{}' has non-finite covariates", g.id));
            }
        }
        Ok(())
    }
}

/// Per (class, item) log-probabilities of a correct and a wrong answer.
#[derive(Debug, Clone)]
pub(crate) struct ItemLogTable {
    n_items: usize,
    log_correct: Vec<f64>,
    log_wrong: Vec<f64>,
}

impl ItemLogTable {
    pub(crate) fn new(params: &ParameterSet, spec: &ModelSpec) -> Result<Self> {
        let r = spec.n_items();
        let kv = spec.n_classes;
        let mut log_correct = Vec::with_capacity(kv * r);
        let mut log_wrong = Vec::with_capacity(kv * r);
        for v in 0..kv {
            for j in 0..r {
                let z = item_logit(j, v, params, spec)?;
                log_correct.push(log_logistic(z));
                log_wrong.push(log_logistic(-z));
            }
        }
        Ok(Self {
            n_items: r,
            log_correct,
            log_wrong,
        })
    }

    pub(crate) fn student_loglik(&self, responses: &[Option<bool>], class: usize) -> f64 {
        let base = class * self.n_items;
        responses
            .iter()
            .enumerate()
            .map(|(j, y)| match y {
                Some(true) => self.log_correct[base + j],
                Some(false) => self.log_wrong[base + j],
                None => 0.0,
            })
            .sum()
    }
}

/// Log-space quantities of one group under every school type.
#[derive(Debug, Clone)]
pub(crate) struct GroupEval {
    /// `log P(U = u | W)`.
    pub log_type_prior: Vec<f64>,
    /// `log rho_h(u)`.
    pub log_rho: Vec<f64>,
    /// Per student, `log pi_{v|u} + log p(y | v)` laid out `u * k_V + v`.
    pub log_joint: Vec<Vec<f64>>,
    /// Per student and type, log-sum-exp of `log_joint` over classes.
    pub log_mix: Vec<Vec<f64>>,
}

impl GroupEval {
    pub(crate) fn loglik(&self) -> f64 {
        let terms: Vec<f64> = self
            .log_type_prior
            .iter()
            .zip(&self.log_rho)
            .map(|(a, b)| a + b)
            .collect();
        log_sum_exp(&terms)
    }
}

pub(crate) fn evaluate_group(
    group: &Group,
    table: &ItemLogTable,
    params: &ParameterSet,
    spec: &ModelSpec,
) -> GroupEval {
    let kv = spec.n_classes;
    let ku = spec.n_types;
    let mut log_rho = vec![0.0; ku];
    let mut log_joint = Vec::with_capacity(group.students.len());
    let mut log_mix = Vec::with_capacity(group.students.len());
    for student in &group.students {
        let cond: Vec<f64> = (0..kv)
            .map(|v| table.student_loglik(&student.responses, v))
            .collect();
        let mut joint = Vec::with_capacity(ku * kv);
        let mut mix = Vec::with_capacity(ku);
        for (u, rho) in log_rho.iter_mut().enumerate() {
            let lw = class_log_weights_unchecked(&student.covariates, u, params);
            let start = joint.len();
            joint.extend(lw.iter().zip(&cond).map(|(w, c)| w + c));
            let m = log_sum_exp(&joint[start..]);
            *rho += m;
            mix.push(m);
        }
        log_joint.push(joint);
        log_mix.push(mix);
    }
    GroupEval {
        log_type_prior: type_log_weights_unchecked(&group.covariates, params),
        log_rho,
        log_joint,
        log_mix,
    }
}

fn prepare(data: &ResponseDataset, params: &ParameterSet, spec: &ModelSpec) -> Result<ItemLogTable> {
    spec.validate()?;
    params.check(spec)?;
    data.check(spec)?;
    ItemLogTable::new(params, spec)
}

/// `log p(y | V = class)` under local independence; missing items are skipped.
pub fn student_conditional_loglik(
    responses: &[Option<bool>],
    class: usize,
    params: &ParameterSet,
    spec: &ModelSpec,
) -> Result<f64> {
    if responses.len() != spec.n_items() {
        return Err(Error::DataShape(format!(
            "response vector has length {}, expected {}",
            responses.len(),
            spec.n_items()
        )));
    }
    if class >= spec.n_classes {
        return Err(Error::ClassOutOfRange {
            index: class,
            count: spec.n_classes,
        });
    }
    params.check(spec)?;
    Ok(ItemLogTable::new(params, spec)?.student_loglik(responses, class))
}

/// `log rho_h(u)`: the group's log-likelihood given it is of type `u`.
pub fn group_conditional_loglik(
    group: &Group,
    u: usize,
    params: &ParameterSet,
    spec: &ModelSpec,
) -> Result<f64> {
    if u >= spec.n_types {
        return Err(Error::TypeOutOfRange {
            index: u,
            count: spec.n_types,
        });
    }
    let single = ResponseDataset {
        groups: vec![group.clone()],
    };
    let table = prepare(&single, params, spec)?;
    Ok(evaluate_group(group, &table, params, spec).log_rho[u])
}

/// Marginal log-likelihood of the whole dataset.
///
/// Groups are evaluated in parallel; the final sum runs in group order so the
/// result does not depend on the thread count.
pub fn marginal_loglik(data: &ResponseDataset, params: &ParameterSet, spec: &ModelSpec) -> Result<f64> {
    let table = prepare(data, params, spec)?;
    let per_group: Vec<f64> = data
        .groups
        .par_iter()
        .map(|g| evaluate_group(g, &table, params, spec).loglik())
        .collect();
    Ok(per_group.iter().sum())
}

/// Reference evaluation of the marginal log-likelihood by explicit
/// enumeration of every joint latent configuration `(u, v_1, ..., v_n)` of
/// each group, in linear arithmetic.
///
/// Only meant for small instances; the number of enumerated configurations,
/// `sum_h k_U * k_V^(n_h)`, must stay below `cap`.
pub fn brute_force_loglik(
    data: &ResponseDataset,
    params: &ParameterSet,
    spec: &ModelSpec,
    cap: u128,
) -> Result<f64> {
    spec.validate()?;
    params.check(spec)?;
    data.check(spec)?;
    let kv = spec.n_classes;
    let ku = spec.n_types;
    let mut terms: u128 = 0;
    for g in &data.groups {
        let per = (kv as u128)
            .checked_pow(g.students.len() as u32)
            .and_then(|x| x.checked_mul(ku as u128))
            .unwrap_or(u128::MAX);
        terms = terms.saturating_add(per);
    }
    if terms > cap {
        return Err(Error::EnumerationCap { terms, cap });
    }

    let softmax = |logits: &[f64]| -> Vec<f64> {
        let e: Vec<f64> = logits.iter().map(|z| z.exp()).collect();
        let total: f64 = e.iter().sum();
        e.into_iter().map(|x| x / total).collect()
    };
    let success = |j: usize, v: usize| -> f64 {
        let z = match spec.parameterization {
            Parameterization::Lc => params.lc_logit[v][j],
            _ => {
                params.discrimination[j]
                    * (params.ability[v][spec.items.dim_of(j)] - params.difficulty[j])
            }
        };
        1.0 / (1.0 + (-z).exp())
    };

    let mut total = 0.0;
    for g in &data.groups {
        let mut type_logits = vec![0.0];
        for (b0, slope) in params.type_intercepts.iter().zip(&params.type_slopes) {
            type_logits.push(b0 + slope.iter().zip(&g.covariates).map(|(a, b)| a * b).sum::<f64>());
        }
        let type_w = softmax(&type_logits);

        // class_w[i][u][v] and cond[i][v] in linear space
        let n = g.students.len();
        let mut class_w = Vec::with_capacity(n);
        let mut cond = Vec::with_capacity(n);
        for s in &g.students {
            let per_u: Vec<Vec<f64>> = (0..ku)
                .map(|u| {
                    let mut logits = vec![0.0];
                    for (b0, slope) in params.class_intercepts[u].iter().zip(&params.class_slopes) {
                        logits.push(
                            b0 + slope.iter().zip(&s.covariates).map(|(a, b)| a * b).sum::<f64>(),
                        );
                    }
                    softmax(&logits)
                })
                .collect();
            class_w.push(per_u);
            cond.push(
                (0..kv)
                    .map(|v| {
                        let mut p = 1.0;
                        for (j, y) in s.responses.iter().enumerate() {
                            match y {
                                Some(true) => p *= success(j, v),
                                Some(false) => p *= 1.0 - success(j, v),
                                None => {}
                            }
                        }
                        p
                    })
                    .collect::<Vec<f64>>(),
            );
        }

        let mut group_lik = 0.0;
        for u in 0..ku {
            let mut labels = vec![0usize; n];
            loop {
                let mut term = type_w[u];
                for i in 0..n {
                    term *= class_w[i][u][labels[i]] * cond[i][labels[i]];
                }
                group_lik += term;
                // odometer increment
                let mut pos = 0;
                while pos < n {
                    labels[pos] += 1;
                    if labels[pos] < kv {
                        break;
                    }
                    labels[pos] = 0;
                    pos += 1;
                }
                if pos == n {
                    break;
                }
            }
        }
        total += group_lik.ln();
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ItemBank;

    fn spec(r: usize, kv: usize, ku: usize) -> ModelSpec {
        ModelSpec {
            items: ItemBank::unidimensional(r),
            n_classes: kv,
            n_types: ku,
            parameterization: Parameterization::TwoPl,
            n_student_covariates: 0,
            n_school_covariates: 0,
        }
    }

    fn student(responses: Vec<Option<bool>>) -> Student {
        Student {
            id: "s".into(),
            covariates: vec![],
            responses,
        }
    }

    #[test]
    fn conditional_loglik_examples() {
        let sp = spec(2, 1, 1);
        let p = ParameterSet::neutral(&sp);
        let l = student_conditional_loglik(&[Some(true), Some(false)], 0, &p, &sp).unwrap();
        assert!((l - 0.25f64.ln()).abs() < 1e-14);

        let sp = spec(1, 1, 1);
        let mut p = ParameterSet::neutral(&sp);
        p.ability[0][0] = 0.7;
        p.difficulty[0] = 0.7;
        let l = student_conditional_loglik(&[Some(true)], 0, &p, &sp).unwrap();
        assert!((l - 0.5f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn conditional_loglik_hand_product() {
        // logits giving p = (0.75, 0.5, 0.2)
        let sp = spec(3, 1, 1);
        let mut p = ParameterSet::neutral(&sp);
        p.difficulty = vec![0.0, 0.0, -crate::math::logit(0.2)];
        p.ability[0][0] = 0.0;
        p.discrimination = vec![1.0, 1.0, 1.0];
        p.difficulty[0] = -3f64.ln();
        let l = student_conditional_loglik(&[Some(true), Some(true), Some(false)], 0, &p, &sp).unwrap();
        assert!((l - 0.3f64.ln()).abs() < 1e-12, "{l}");
        assert!((l + 1.203_972_804_325_936).abs() < 1e-12);
    }

    #[test]
    fn missing_items_contribute_nothing() {
        let sp = spec(3, 1, 1);
        let p = ParameterSet::neutral(&sp);
        let l = student_conditional_loglik(&[None, Some(true), None], 0, &p, &sp).unwrap();
        assert!((l - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn group_mixture_by_hand() {
        // one student, weights (0.5, 0.5), conditional probs 0.4 and 0.8
        let sp = spec(1, 2, 1);
        let mut p = ParameterSet::neutral(&sp);
        p.ability = vec![vec![crate::math::logit(0.4)], vec![crate::math::logit(0.8)]];
        let g = Group {
            id: "g".into(),
            covariates: vec![],
            students: vec![student(vec![Some(true)])],
        };
        let l = group_conditional_loglik(&g, 0, &p, &sp).unwrap();
        assert!((l - 0.6f64.ln()).abs() < 1e-14);
        assert!(group_conditional_loglik(&g, 1, &p, &sp).is_err());
    }

    #[test]
    fn single_class_group_is_sum_of_students() {
        let sp = spec(2, 1, 1);
        let mut p = ParameterSet::neutral(&sp);
        p.difficulty[1] = 0.8;
        p.discrimination[1] = 1.7;
        let students = vec![
            student(vec![Some(true), Some(false)]),
            student(vec![Some(false), Some(true)]),
        ];
        let expected: f64 = students
            .iter()
            .map(|s| student_conditional_loglik(&s.responses, 0, &p, &sp).unwrap())
            .sum();
        let g = Group {
            id: "g".into(),
            covariates: vec![],
            students,
        };
        let l = group_conditional_loglik(&g, 0, &p, &sp).unwrap();
        assert!((l - expected).abs() < 1e-14);
    }

    #[test]
    fn marginal_loglik_trivial_instance() {
        let sp = spec(1, 1, 1);
        let p = ParameterSet::neutral(&sp);
        let data = ResponseDataset {
            groups: vec![Group {
                id: "g".into(),
                covariates: vec![],
                students: vec![student(vec![Some(true)])],
            }],
        };
        let l = marginal_loglik(&data, &p, &sp).unwrap();
        assert!((l + 0.693_147_180_559_945_3).abs() < 1e-14);
        let b = brute_force_loglik(&data, &p, &sp, DEFAULT_ENUMERATION_CAP).unwrap();
        assert!((l - b).abs() < 1e-15);
    }

    #[test]
    fn identical_types_match_single_type() {
        let sp1 = spec(2, 2, 1);
        let mut p1 = ParameterSet::neutral(&sp1);
        p1.ability = vec![vec![-1.0], vec![1.0]];
        p1.class_intercepts = vec![vec![0.4]];
        let sp2 = spec(2, 2, 2);
        let mut p2 = ParameterSet::neutral(&sp2);
        p2.ability = p1.ability.clone();
        p2.class_intercepts = vec![vec![0.4], vec![0.4]];
        let data = ResponseDataset {
            groups: vec![Group {
                id: "g".into(),
                covariates: vec![],
                students: vec![
                    student(vec![Some(true), Some(true)]),
                    student(vec![Some(false), Some(true)]),
                ],
            }],
        };
        let a = marginal_loglik(&data, &p1, &sp1).unwrap();
        let b = marginal_loglik(&data, &p2, &sp2).unwrap();
        assert!((a - b).abs() < 1e-13);
    }

    #[test]
    fn brute_force_respects_cap() {
        let sp = spec(1, 3, 2);
        let p = ParameterSet::neutral(&sp);
        let data = ResponseDataset {
            groups: vec![Group {
                id: "g".into(),
                covariates: vec![],
                students: (0..15).map(|_| student(vec![Some(true)])).collect(),
            }],
        };
        assert!(matches!(
            brute_force_loglik(&data, &p, &sp, DEFAULT_ENUMERATION_CAP),
            Err(Error::EnumerationCap { .. })
        ));
    }

    #[test]
    fn extreme_abilities_stay_finite() {
        let sp = spec(67, 2, 1);
        let mut p = ParameterSet::neutral(&sp);
        p.ability = vec![vec![-40.0], vec![40.0]];
        let data = ResponseDataset {
            groups: vec![Group {
                id: "g".into(),
                covariates: vec![],
                students: (0..30).map(|_| student(vec![Some(true); 67])).collect(),
            }],
        };
        let l = marginal_loglik(&data, &p, &sp).unwrap();
        assert!(l.is_finite() && l < 0.0);
    }
}
