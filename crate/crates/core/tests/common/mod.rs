//! Independent reference implementations shared by the integration tests.
//!
//! Nothing here calls into the estimator's likelihood or optimizer code; the
//! library is used only for its data types.

#![allow(dead_code)]

use mlirt::{Group, ItemBank, ModelSpec, ParameterSet, Parameterization, PosteriorTables, ResponseDataset, Student};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// `ln sigmoid(t)` without overflow.
pub fn ln_sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        -(-t).exp().ln_1p()
    } else {
        t - t.exp().ln_1p()
    }
}

/// Category probabilities with category 0 at logit zero.
pub fn softmax0(eta: &[f64]) -> Vec<f64> {
    let mut full = vec![0.0];
    full.extend_from_slice(eta);
    let m = full.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = full.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Success logit of item `j` for class `v`.
pub fn logit_of(spec: &ModelSpec, p: &ParameterSet, v: usize, j: usize) -> f64 {
    match spec.parameterization {
        Parameterization::Lc => p.lc_logit[v][j],
        Parameterization::OnePl => p.ability[v][spec.items.dim_of(j)] - p.difficulty[j],
        Parameterization::TwoPl => p.discrimination[j] * (p.ability[v][spec.items.dim_of(j)] - p.difficulty[j]),
    }
}

pub fn class_probs(p: &ParameterSet, x: &[f64], u: usize) -> Vec<f64> {
    let eta: Vec<f64> = p.class_intercepts[u]
        .iter()
        .zip(&p.class_slopes)
        .map(|(a, b)| a + dot(x, b))
        .collect();
    softmax0(&eta)
}

pub fn type_probs(p: &ParameterSet, w: &[f64]) -> Vec<f64> {
    let eta: Vec<f64> = p.type_intercepts.iter().zip(&p.type_slopes).map(|(a, b)| a + dot(w, b)).collect();
    softmax0(&eta)
}

/// Response-pattern probability of one student in class `v`.
pub fn pattern_prob(spec: &ModelSpec, p: &ParameterSet, s: &Student, v: usize) -> f64 {
    let mut prob = 1.0;
    for (j, y) in s.responses.iter().enumerate() {
        if let Some(y) = y {
            let q = sigmoid(logit_of(spec, p, v, j));
            prob *= if *y { q } else { 1.0 - q };
        }
    }
    prob
}

/// Log-likelihood by summing the joint probability of every configuration
/// of school type and student classes, in linear space.
pub fn enumerate_loglik(data: &ResponseDataset, p: &ParameterSet, spec: &ModelSpec) -> f64 {
    let kv = spec.n_classes;
    let mut total = 0.0;
    for g in &data.groups {
        let n = g.students.len();
        let pu = type_probs(p, &g.covariates);
        let mut lik = 0.0;
        for u in 0..spec.n_types {
            let mut labels = vec![0usize; n];
            loop {
                let mut term = pu[u];
                for (s, &v) in g.students.iter().zip(&labels) {
                    term *= class_probs(p, &s.covariates, u)[v] * pattern_prob(spec, p, s, v);
                }
                lik += term;
                let mut k = 0;
                while k < n {
                    labels[k] += 1;
                    if labels[k] < kv {
                        break;
                    }
                    labels[k] = 0;
                    k += 1;
                }
                if k == n {
                    break;
                }
            }
        }
        total += lik.ln();
    }
    total
}

pub struct InstanceShape {
    pub max_groups: usize,
    pub max_size: usize,
    pub max_items: usize,
    pub max_classes: usize,
    pub max_types: usize,
}

/// A random specification, parameter set and dataset with missing responses.
pub fn random_instance(rng: &mut ChaCha8Rng, shape: &InstanceShape) -> (ModelSpec, ParameterSet, ResponseDataset) {
    let r = rng.random_range(1..=shape.max_items);
    let s = rng.random_range(1..=r.min(2));
    let mut dims: Vec<usize> = (0..r).map(|j| if j < s { j } else { rng.random_range(0..s) }).collect();
    // shuffle so reference items are not always the first ones
    for j in (1..r).rev() {
        let k = rng.random_range(0..=j);
        dims.swap(j, k);
    }
    let param = [Parameterization::Lc, Parameterization::OnePl, Parameterization::TwoPl][rng.random_range(0..3)];
    let spec = ModelSpec {
        items: ItemBank::with_first_references(dims, s).unwrap(),
        n_classes: rng.random_range(1..=shape.max_classes),
        n_types: rng.random_range(1..=shape.max_types),
        parameterization: param,
        n_student_covariates: rng.random_range(0..=2),
        n_school_covariates: rng.random_range(0..=1),
    };
    let p = random_params(rng, &spec);
    let data = random_data(rng, &spec, shape.max_groups, shape.max_size);
    (spec, p, data)
}

pub fn normal(rng: &mut ChaCha8Rng, sd: f64) -> f64 {
    Normal::new(0.0, sd).unwrap().sample(rng)
}

pub fn random_params(rng: &mut ChaCha8Rng, spec: &ModelSpec) -> ParameterSet {
    let mut p = ParameterSet::neutral(spec);
    for j in 0..spec.n_items() {
        if !spec.items.is_reference(j) && spec.parameterization != Parameterization::Lc {
            p.difficulty[j] = normal(rng, 1.0);
            if spec.parameterization == Parameterization::TwoPl {
                p.discrimination[j] = rng.random_range(0.5..2.0);
            }
        }
    }
    if spec.parameterization == Parameterization::Lc {
        for x in p.lc_logit.iter_mut().flatten() {
            *x = normal(rng, 1.5);
        }
    } else {
        for x in p.ability.iter_mut().flatten() {
            *x = normal(rng, 1.5);
        }
    }
    for x in p
        .class_intercepts
        .iter_mut()
        .chain(p.class_slopes.iter_mut())
        .chain(p.type_slopes.iter_mut())
        .flatten()
        .chain(p.type_intercepts.iter_mut())
    {
        *x = normal(rng, 1.0);
    }
    p
}

pub fn random_data(rng: &mut ChaCha8Rng, spec: &ModelSpec, max_groups: usize, max_size: usize) -> ResponseDataset {
    let h = rng.random_range(1..=max_groups);
    ResponseDataset {
        groups: (0..h)
            .map(|g| Group {
                id: format!("g{g}"),
                covariates: (0..spec.n_school_covariates).map(|_| normal(rng, 1.0)).collect(),
                students: (0..rng.random_range(1..=max_size))
                    .map(|i| Student {
                        id: format!("s{i}"),
                        covariates: (0..spec.n_student_covariates).map(|_| normal(rng, 1.0)).collect(),
                        responses: (0..spec.n_items())
                            .map(|_| if rng.random::<f64>() < 0.1 { None } else { Some(rng.random::<bool>()) })
                            .collect(),
                    })
                    .collect(),
            })
            .collect(),
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Central-difference gradient.
pub fn fd_gradient(f: &impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut y = x.to_vec();
    for k in 0..x.len() {
        let h = 1e-5 * x[k].abs().max(1.0);
        y[k] = x[k] + h;
        let fp = f(&y);
        y[k] = x[k] - h;
        let fm = f(&y);
        y[k] = x[k];
        g[k] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Quasi-Newton (BFGS) maximization with finite-difference gradients and
/// backtracking line search. Returns the maximizer and the maximum.
pub fn bfgs_maximize(f: impl Fn(&[f64]) -> f64, x0: &[f64], max_iter: usize) -> (Vec<f64>, f64) {
    let n = x0.len();
    let neg = |x: &[f64]| -f(x);
    let mut x = x0.to_vec();
    let mut fx = neg(&x);
    let mut g = fd_gradient(&neg, &x);
    let mut hinv = identity(n);
    for _ in 0..max_iter {
        if g.iter().all(|v| v.abs() < 1e-10) {
            break;
        }
        let mut d: Vec<f64> = (0..n).map(|i| -dot(&hinv[i], &g)).collect();
        if dot(&d, &g) >= 0.0 {
            hinv = identity(n);
            d = g.iter().map(|v| -v).collect();
        }
        let slope = dot(&d, &g);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let xn: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + t * b).collect();
            let fnew = neg(&xn);
            if fnew.is_finite() && fnew <= fx + 1e-4 * t * slope {
                accepted = Some((xn, fnew));
                break;
            }
            t *= 0.5;
        }
        let Some((xn, fnew)) = accepted else { break };
        let gn = fd_gradient(&neg, &xn);
        let sv: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&sv, &yv);
        if sy > 1e-14 {
            let hy: Vec<f64> = (0..n).map(|i| dot(&hinv[i], &yv)).collect();
            let yhy = dot(&yv, &hy);
            for i in 0..n {
                for j in 0..n {
                    hinv[i][j] += (sy + yhy) * sv[i] * sv[j] / (sy * sy) - (hy[i] * sv[j] + sv[i] * hy[j]) / sy;
                }
            }
        }
        let done = (fx - fnew).abs() < 1e-15 * fx.abs().max(1.0) && sv.iter().all(|v| v.abs() < 1e-12);
        x = xn;
        fx = fnew;
        g = gn;
        if done {
            break;
        }
    }
    (x, -fx)
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect()
}

/// Expected complete log-likelihood of the item/ability block.
pub fn item_block_q(data: &ResponseDataset, post: &PosteriorTables, p: &ParameterSet, spec: &ModelSpec) -> f64 {
    let mut q = 0.0;
    for (h, g) in data.groups.iter().enumerate() {
        for (i, s) in g.students.iter().enumerate() {
            for v in 0..spec.n_classes {
                let z = post.class_post[h][i][v];
                for (j, y) in s.responses.iter().enumerate() {
                    if let Some(y) = y {
                        let t = logit_of(spec, p, v, j);
                        q += z * if *y { ln_sigmoid(t) } else { ln_sigmoid(-t) };
                    }
                }
            }
        }
    }
    q
}

/// Expected complete log-likelihood of the student-class weight block.
pub fn class_block_q(data: &ResponseDataset, post: &PosteriorTables, p: &ParameterSet) -> f64 {
    let kv = post.n_classes;
    let mut q = 0.0;
    for (h, g) in data.groups.iter().enumerate() {
        for (i, s) in g.students.iter().enumerate() {
            for u in 0..post.n_types {
                let pr = class_probs(p, &s.covariates, u);
                for v in 0..kv {
                    q += post.joint[h][i][u * kv + v] * pr[v].ln();
                }
            }
        }
    }
    q
}

/// Expected complete log-likelihood of the school-type weight block.
pub fn type_block_q(data: &ResponseDataset, post: &PosteriorTables, p: &ParameterSet) -> f64 {
    data.groups
        .iter()
        .enumerate()
        .map(|(h, g)| {
            let pr = type_probs(p, &g.covariates);
            (0..post.n_types).map(|u| post.type_post[h][u] * pr[u].ln()).sum::<f64>()
        })
        .sum()
}

/// Free item/ability coordinates in a fixed order.
pub fn pack_items(p: &ParameterSet, spec: &ModelSpec) -> Vec<f64> {
    let free: Vec<usize> = (0..spec.n_items()).filter(|&j| !spec.items.is_reference(j)).collect();
    let mut x = Vec::new();
    match spec.parameterization {
        Parameterization::Lc => x.extend(p.lc_logit.iter().flatten()),
        param => {
            x.extend(free.iter().map(|&j| p.difficulty[j]));
            if param == Parameterization::TwoPl {
                x.extend(free.iter().map(|&j| p.discrimination[j]));
            }
            x.extend(p.ability.iter().flatten());
        }
    }
    x
}

pub fn unpack_items(x: &[f64], base: &ParameterSet, spec: &ModelSpec) -> ParameterSet {
    let free: Vec<usize> = (0..spec.n_items()).filter(|&j| !spec.items.is_reference(j)).collect();
    let mut p = base.clone();
    let mut it = x.iter().copied();
    match spec.parameterization {
        Parameterization::Lc => p.lc_logit.iter_mut().flatten().for_each(|v| *v = it.next().unwrap()),
        param => {
            for &j in &free {
                p.difficulty[j] = it.next().unwrap();
            }
            if param == Parameterization::TwoPl {
                for &j in &free {
                    p.discrimination[j] = it.next().unwrap();
                }
            }
            p.ability.iter_mut().flatten().for_each(|v| *v = it.next().unwrap());
        }
    }
    p
}

pub fn pack_class(p: &ParameterSet) -> Vec<f64> {
    p.class_intercepts.iter().chain(&p.class_slopes).flatten().copied().collect()
}

pub fn unpack_class(x: &[f64], base: &ParameterSet) -> ParameterSet {
    let mut p = base.clone();
    let mut it = x.iter().copied();
    p.class_intercepts
        .iter_mut()
        .chain(p.class_slopes.iter_mut())
        .flatten()
        .for_each(|v| *v = it.next().unwrap());
    p
}

pub fn pack_type(p: &ParameterSet) -> Vec<f64> {
    p.type_intercepts.iter().chain(p.type_slopes.iter().flatten()).copied().collect()
}

pub fn unpack_type(x: &[f64], base: &ParameterSet) -> ParameterSet {
    let mut p = base.clone();
    let mut it = x.iter().copied();
    p.type_intercepts
        .iter_mut()
        .chain(p.type_slopes.iter_mut().flatten())
        .for_each(|v| *v = it.next().unwrap());
    p
}

/// Single-level latent-class IRT: students are independent draws from a
/// `k`-class mixture with constant class weights.
pub struct SingleLevel<'a> {
    pub spec: &'a ModelSpec,
    pub students: Vec<&'a Student>,
}

impl SingleLevel<'_> {
    /// Layout: class logits (k - 1), then the free item/ability coordinates.
    pub fn loglik(&self, theta: &[f64], base: &ParameterSet) -> f64 {
        let k = self.spec.n_classes;
        let pi = softmax0(&theta[..k - 1]);
        let p = unpack_items(&theta[k - 1..], base, self.spec);
        self.students
            .iter()
            .map(|s| (0..k).map(|v| pi[v] * pattern_prob(self.spec, &p, s, v)).sum::<f64>().ln())
            .sum()
    }

    pub fn pack(&self, p: &ParameterSet) -> Vec<f64> {
        let mut theta: Vec<f64> = p.class_intercepts[0].clone();
        theta.extend(pack_items(p, self.spec));
        theta
    }

    /// Best of BFGS runs from each starting point.
    pub fn maximize(&self, starts: &[Vec<f64>], base: &ParameterSet) -> f64 {
        starts
            .iter()
            .map(|x0| bfgs_maximize(|t| self.loglik(t, base), x0, 2000).1)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}
