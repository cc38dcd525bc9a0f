//! EM estimation of the multilevel model.
//!
//! The E-step computes exact posteriors of the school types and of the
//! (type, class) pairs of every student. The M-step maximizes the expected
//! complete log-likelihood, which splits into three independent blocks:
//! item/ability parameters, student-class logit coefficients and school-type
//! logit coefficients.

mod init;
mod items;
mod mlogit;

use std::collections::HashMap;

use rayon::prelude::*;

pub use init::{derive_seed, initialize, InitStrategy};
pub use items::{item_block_objective, ItemStats};

use crate::error::{Error, Result};
use crate::likelihood::{evaluate_group, ItemLogTable, ResponseDataset};
use crate::model::{
    class_log_weights_unchecked, type_log_weights_unchecked, ModelSpec, ParameterSet,
};
use mlogit::MlogitProblem;

/// Posterior expectations of the latent indicators.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorTables {
    pub n_types: usize,
    pub n_classes: usize,
    /// `P(U_h = u | data)`, one row per group.
    pub type_post: Vec<Vec<f64>>,
    /// `P(U_h = u, V_hi = v | data)` per group and student, laid out `u * k_V + v`.
    pub joint: Vec<Vec<Vec<f64>>>,
    /// `P(V_hi = v | data)` per group and student.
    pub class_post: Vec<Vec<Vec<f64>>>,
    /// Marginal log-likelihood at the parameters the tables were computed from.
    pub loglik: f64,
}

impl PosteriorTables {
    pub fn joint_at(&self, h: usize, i: usize, u: usize, v: usize) -> f64 {
        self.joint[h][i][u * self.n_classes + v]
    }

    /// Largest deviation from the normalization identities: type rows sum to
    /// one, joint rows marginalize to the type posterior, class posteriors are
    /// joint column sums.
    pub fn max_normalization_error(&self) -> f64 {
        let kv = self.n_classes;
        let mut worst: f64 = 0.0;
        for (h, row) in self.type_post.iter().enumerate() {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            for (i, joint) in self.joint[h].iter().enumerate() {
                let mut total = 0.0;
                for (u, &zu) in row.iter().enumerate() {
                    let s: f64 = joint[u * kv..(u + 1) * kv].iter().sum();
                    worst = worst.max((s - zu).abs());
                    total += s;
                }
                worst = worst.max((total - 1.0).abs());
                for v in 0..kv {
                    let col: f64 = (0..self.n_types).map(|u| joint[u * kv + v]).sum();
                    worst = worst.max((col - self.class_post[h][i][v]).abs());
                }
            }
        }
        worst
    }
}

/// Stopping rules and optimizer settings.
#[derive(Debug, Clone, PartialEq)]
pub struct FitControls {
    pub max_iter: usize,
    /// Absolute change in log-likelihood below which EM stops.
    pub tol_loglik: f64,
    /// Largest absolute parameter change below which EM stops.
    pub tol_param: f64,
    pub newton_max_iter: usize,
    pub newton_tol: f64,
    pub n_starts: usize,
    pub seed: u64,
}

impl Default for FitControls {
    fn default() -> Self {
        Self {
            max_iter: 5000,
            tol_loglik: 1e-8,
            tol_param: 1e-6,
            newton_max_iter: 50,
            newton_tol: 1e-9,
            n_starts: 10,
            seed: 0,
        }
    }
}

impl FitControls {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tol_loglik", self.tol_loglik),
            ("tol_param", self.tol_param),
            ("newton_tol", self.newton_tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::InvalidControls(format!("{name} must be positive, got {v}")));
            }
        }
        if self.n_starts == 0 {
            return Err(Error::InvalidControls("n_starts must be at least 1".into()));
        }
        if self.newton_max_iter == 0 {
            return Err(Error::InvalidControls("newton_max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ParameterSet,
    pub loglik: f64,
    /// Log-likelihood at the starting point and after every iteration.
    pub trace: Vec<f64>,
    pub n_iter: usize,
    pub converged: bool,
    pub start_index: usize,
    /// Posteriors at the final parameters.
    pub posteriors: PosteriorTables,
}

/// Exact posteriors of the latent indicators at `params`.
pub fn e_step(data: &ResponseDataset, params: &ParameterSet, spec: &ModelSpec) -> Result<PosteriorTables> {
    spec.validate()?;
    params.check(spec)?;
    data.check(spec)?;
    e_step_unchecked(data, params, spec)
}

fn e_step_unchecked(data: &ResponseDataset, params: &ParameterSet, spec: &ModelSpec) -> Result<PosteriorTables> {
    let table = ItemLogTable::new(params, spec)?;
    let kv = spec.n_classes;
    let ku = spec.n_types;
    type GroupPost = (Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>, f64);
    let groups: Vec<Result<GroupPost>> = data
        .groups
        .par_iter()
        .enumerate()
        .map(|(h, g)| {
            let eval = evaluate_group(g, &table, params, spec);
            let mut type_post: Vec<f64> = eval
                .log_type_prior
                .iter()
                .zip(&eval.log_rho)
                .map(|(a, b)| a + b)
                .collect();
            let norm = crate::math::normalize_log_weights(&mut type_post);
            if !norm.is_finite() {
                return Err(Error::NonFiniteLikelihood { group: h });
            }
            let mut joints = Vec::with_capacity(g.students.len());
            let mut classes = Vec::with_capacity(g.students.len());
            for (lj, lm) in eval.log_joint.iter().zip(&eval.log_mix) {
                let mut joint = vec![0.0; ku * kv];
                let mut class = vec![0.0; kv];
                for u in 0..ku {
                    for v in 0..kv {
                        let z = (lj[u * kv + v] - lm[u]).exp() * type_post[u];
                        joint[u * kv + v] = z;
                        class[v] += z;
                    }
                }
                joints.push(joint);
                classes.push(class);
            }
            Ok((type_post, joints, classes, norm))
        })
        .collect();

    let mut post = PosteriorTables {
        n_types: ku,
        n_classes: kv,
        type_post: Vec::with_capacity(data.n_groups()),
        joint: Vec::with_capacity(data.n_groups()),
        class_post: Vec::with_capacity(data.n_groups()),
        loglik: 0.0,
    };
    for g in groups {
        let (t, j, c, l) = g?;
        post.type_post.push(t);
        post.joint.push(j);
        post.class_post.push(c);
        post.loglik += l;
    }
    Ok(post)
}

/// Expected complete log-likelihood of the student-class logit block.
pub fn class_weight_objective(data: &ResponseDataset, post: &PosteriorTables, params: &ParameterSet) -> f64 {
    let kv = post.n_classes;
    let mut f = 0.0;
    for (h, g) in data.groups.iter().enumerate() {
        for (i, s) in g.students.iter().enumerate() {
            for u in 0..post.n_types {
                let lw = class_log_weights_unchecked(&s.covariates, u, params);
                for (v, l) in lw.iter().enumerate() {
                    let z = post.joint[h][i][u * kv + v];
                    if z != 0.0 {
                        f += z * l;
                    }
                }
            }
        }
    }
    f
}

/// Expected complete log-likelihood of the school-type logit block.
pub fn type_weight_objective(data: &ResponseDataset, post: &PosteriorTables, params: &ParameterSet) -> f64 {
    let mut f = 0.0;
    for (h, g) in data.groups.iter().enumerate() {
        let lw = type_log_weights_unchecked(&g.covariates, params);
        for (z, l) in post.type_post[h].iter().zip(&lw) {
            if *z != 0.0 {
                f += z * l;
            }
        }
    }
    f
}

// Packed layout: intercepts u-major (k_U x (k_V-1)) then slopes ((k_V-1) x m_V).
// Students with bit-identical covariates share one case per type; their
// posterior targets are summed, which leaves the objective unchanged.
fn class_problem(data: &ResponseDataset, post: &PosteriorTables, m: usize) -> MlogitProblem {
    let kv = post.n_classes;
    let ku = post.n_types;
    let n_int = ku * (kv - 1);
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut patterns: Vec<&[f64]> = Vec::new();
    let mut targets: Vec<f64> = Vec::new();
    for (h, g) in data.groups.iter().enumerate() {
        for (i, s) in g.students.iter().enumerate() {
            let key: Vec<u64> = s.covariates.iter().map(|x| x.to_bits()).collect();
            let k = *index.entry(key).or_insert_with(|| {
                patterns.push(&s.covariates);
                targets.resize(targets.len() + ku * kv, 0.0);
                patterns.len() - 1
            });
            for (t, z) in targets[k * ku * kv..(k + 1) * ku * kv].iter_mut().zip(&post.joint[h][i]) {
                *t += z;
            }
        }
    }
    let mut prob = MlogitProblem::new(kv, n_int + (kv - 1) * m);
    for (k, x) in patterns.iter().enumerate() {
        for u in 0..ku {
            let base = (k * ku + u) * kv;
            prob.push_case(&targets[base..base + kv], |v, out| {
                out.push((u * (kv - 1) + v - 1, 1.0));
                for (c, &xc) in x.iter().enumerate() {
                    out.push((n_int + (v - 1) * m + c, xc));
                }
            });
        }
    }
    prob
}

fn pack_class_coefs(params: &ParameterSet) -> Vec<f64> {
    let mut out: Vec<f64> = params.class_intercepts.iter().flatten().copied().collect();
    out.extend(params.class_slopes.iter().flatten());
    out
}

fn unpack_class_coefs(x: &[f64], params: &mut ParameterSet) {
    let mut it = x.iter().copied();
    for row in params.class_intercepts.iter_mut().chain(params.class_slopes.iter_mut()) {
        for v in row.iter_mut() {
            *v = it.next().expect("packed class coefficients");
        }
    }
}

// Packed layout: per non-reference type, intercept then slopes.
fn type_problem(data: &ResponseDataset, post: &PosteriorTables, m: usize) -> MlogitProblem {
    let ku = post.n_types;
    let mut prob = MlogitProblem::new(ku, (ku - 1) * (m + 1));
    for (h, g) in data.groups.iter().enumerate() {
        prob.push_case(&post.type_post[h], |u, out| {
            let base = (u - 1) * (m + 1);
            out.push((base, 1.0));
            for (k, &w) in g.covariates.iter().enumerate() {
                out.push((base + 1 + k, w));
            }
        });
    }
    prob
}

fn pack_type_coefs(params: &ParameterSet) -> Vec<f64> {
    params
        .type_intercepts
        .iter()
        .zip(&params.type_slopes)
        .flat_map(|(b, s)| std::iter::once(*b).chain(s.iter().copied()))
        .collect()
}

fn unpack_type_coefs(x: &[f64], params: &mut ParameterSet) {
    let m = params.type_slopes.first().map_or(0, Vec::len);
    for (u, chunk) in x.chunks(m + 1).enumerate() {
        params.type_intercepts[u] = chunk[0];
        params.type_slopes[u].copy_from_slice(&chunk[1..]);
    }
}

/// Maximizes the item/ability block (LC probabilities in closed form).
pub fn maximize_item_block(
    data: &ResponseDataset,
    post: &PosteriorTables,
    params: &ParameterSet,
    spec: &ModelSpec,
    controls: &FitControls,
) -> Result<ParameterSet> {
    let stats = ItemStats::collect(data, post, spec);
    items::maximize_item_block(&stats, params, spec, controls.newton_max_iter, controls.newton_tol)
}

/// Maximizes the student-class logit block by Newton-Raphson.
pub fn maximize_class_weight_block(
    data: &ResponseDataset,
    post: &PosteriorTables,
    params: &ParameterSet,
    spec: &ModelSpec,
    controls: &FitControls,
) -> Result<ParameterSet> {
    let mut out = params.clone();
    if spec.n_classes > 1 {
        let prob = class_problem(data, post, spec.n_student_covariates);
        let coef = prob.maximize(
            &pack_class_coefs(params),
            controls.newton_max_iter,
            controls.newton_tol,
            "student-class weight",
        )?;
        unpack_class_coefs(&coef, &mut out);
    }
    Ok(out)
}

/// Maximizes the school-type logit block by Newton-Raphson.
pub fn maximize_type_weight_block(
    data: &ResponseDataset,
    post: &PosteriorTables,
    params: &ParameterSet,
    spec: &ModelSpec,
    controls: &FitControls,
) -> Result<ParameterSet> {
    let mut out = params.clone();
    if spec.n_types > 1 {
        let prob = type_problem(data, post, spec.n_school_covariates);
        let coef = prob.maximize(
            &pack_type_coefs(params),
            controls.newton_max_iter,
            controls.newton_tol,
            "school-type weight",
        )?;
        unpack_type_coefs(&coef, &mut out);
    }
    Ok(out)
}

/// One M-step: maximizes each block of the expected complete log-likelihood.
pub fn m_step(
    data: &ResponseDataset,
    post: &PosteriorTables,
    params: &ParameterSet,
    spec: &ModelSpec,
    controls: &FitControls,
) -> Result<ParameterSet> {
    let items = maximize_item_block(data, post, params, spec, controls)?;
    let classes = maximize_class_weight_block(data, post, params, spec, controls)?;
    let types = maximize_type_weight_block(data, post, params, spec, controls)?;
    Ok(ParameterSet {
        difficulty: items.difficulty,
        discrimination: items.discrimination,
        ability: items.ability,
        lc_logit: items.lc_logit,
        class_intercepts: classes.class_intercepts,
        class_slopes: classes.class_slopes,
        type_intercepts: types.type_intercepts,
        type_slopes: types.type_slopes,
    })
}

/// Runs EM from `init` until a stopping rule fires.
pub fn fit(data: &ResponseDataset, spec: &ModelSpec, controls: &FitControls, init: &ParameterSet) -> Result<FitResult> {
    fit_observed(data, spec, controls, init, |_| {})
}

/// [`fit`] with a callback receiving the posterior tables of every E-step.
pub fn fit_observed(
    data: &ResponseDataset,
    spec: &ModelSpec,
    controls: &FitControls,
    init: &ParameterSet,
    mut observe: impl FnMut(&PosteriorTables),
) -> Result<FitResult> {
    spec.validate()?;
    controls.validate()?;
    data.check(spec)?;
    let mut params = crate::model::apply_identifiability(init, spec)?;
    params.check(spec)?;

    let mut post = e_step_unchecked(data, &params, spec)?;
    observe(&post);
    let mut trace = vec![post.loglik];
    let mut n_iter = 0;
    let mut converged = false;
    while n_iter < controls.max_iter {
        let next = m_step(data, &post, &params, spec, controls)?;
        let next_post = e_step_unchecked(data, &next, spec)?;
        observe(&next_post);
        let dl = next_post.loglik - post.loglik;
        let dp = next.max_abs_diff(&params);
        params = next;
        post = next_post;
        n_iter += 1;
        trace.push(post.loglik);
        if dl.abs() < controls.tol_loglik || dp < controls.tol_param {
            converged = true;
            break;
        }
    }
    Ok(FitResult {
        loglik: post.loglik,
        params,
        trace,
        n_iter,
        converged,
        start_index: 0,
        posteriors: post,
    })
}

/// Fits from one deterministic and `n_starts - 1` random starting points and
/// keeps the highest log-likelihood. A later start must beat the incumbent by
/// more than `1e-8` to replace it.
pub fn multistart_fit(data: &ResponseDataset, spec: &ModelSpec, controls: &FitControls) -> Result<FitResult> {
    controls.validate()?;
    let runs: Vec<Result<FitResult>> = (0..controls.n_starts)
        .into_par_iter()
        .map(|k| {
            let strategy = if k == 0 {
                InitStrategy::Deterministic
            } else {
                InitStrategy::Random
            };
            let init = initialize(data, spec, strategy, derive_seed(controls.seed, k as u64))?;
            let mut res = fit(data, spec, controls, &init)?;
            res.start_index = k;
            Ok(res)
        })
        .collect();

    let mut best: Option<FitResult> = None;
    let mut failures = Vec::new();
    for (k, run) in runs.into_iter().enumerate() {
        match run {
            Ok(res) => {
                if best.as_ref().is_none_or(|b| res.loglik > b.loglik + 1e-8) {
                    best = Some(res);
                }
            }
            Err(e) => failures.push(format!("start {k}: {e}")),
        }
    }
    best.ok_or(Error::AllStartsFailed(failures))
}
