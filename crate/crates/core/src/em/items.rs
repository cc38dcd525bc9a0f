//! Item and ability block of the M-step.
//!
//! The expected complete log-likelihood of this block depends on the data only
//! through posterior-weighted counts of correct and wrong answers per
//! (class, item) cell, collected in [`ItemStats`].

use nalgebra::{DMatrix, DVector};

use super::PosteriorTables;
use crate::error::Result;
use crate::likelihood::ResponseDataset;
use crate::math::{log_logistic, logistic, logit};
use crate::model::{ModelSpec, ParameterSet, Parameterization};

/// Bound on abilities and difficulties.
pub(crate) const LOCATION_BOUND: f64 = 30.0;
/// Bound on the magnitude of discriminations.
pub(crate) const SCALE_BOUND: f64 = 30.0;
const MIN_SCALE: f64 = 1e-4;
const LC_CLAMP: f64 = 1e-8;
const MAX_HALVINGS: usize = 40;

/// Posterior-weighted response counts, laid out `class * r + item`.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemStats {
    pub n_items: usize,
    pub correct: Vec<f64>,
    pub wrong: Vec<f64>,
}

impl ItemStats {
    pub fn collect(data: &ResponseDataset, post: &PosteriorTables, spec: &ModelSpec) -> Self {
        let r = spec.n_items();
        let kv = spec.n_classes;
        let mut correct = vec![0.0; kv * r];
        let mut wrong = vec![0.0; kv * r];
        for (h, g) in data.groups.iter().enumerate() {
            for (i, s) in g.students.iter().enumerate() {
                let z = &post.class_post[h][i];
                for (j, y) in s.responses.iter().enumerate() {
                    let target = match y {
                        Some(true) => &mut correct,
                        Some(false) => &mut wrong,
                        None => continue,
                    };
                    for v in 0..kv {
                        target[v * r + j] += z[v];
                    }
                }
            }
        }
        Self {
            n_items: r,
            correct,
            wrong,
        }
    }

    fn cell(&self, v: usize, j: usize) -> (f64, f64) {
        let k = v * self.n_items + j;
        (self.correct[k], self.wrong[k])
    }
}

fn cell_objective(c: f64, w: f64, eta: f64) -> f64 {
    let mut f = 0.0;
    if c != 0.0 {
        f += c * log_logistic(eta);
    }
    if w != 0.0 {
        f += w * log_logistic(-eta);
    }
    f
}

fn eta(params: &ParameterSet, spec: &ModelSpec, v: usize, j: usize) -> f64 {
    match spec.parameterization {
        Parameterization::Lc => params.lc_logit[v][j],
        _ => params.discrimination[j] * (params.ability[v][spec.items.dim_of(j)] - params.difficulty[j]),
    }
}

/// Expected complete log-likelihood of the item/ability block.
pub fn item_block_objective(stats: &ItemStats, params: &ParameterSet, spec: &ModelSpec) -> f64 {
    let mut f = 0.0;
    for v in 0..spec.n_classes {
        for j in 0..spec.n_items() {
            let (c, w) = stats.cell(v, j);
            f += cell_objective(c, w, eta(params, spec, v, j));
        }
    }
    f
}

/// Maximizes the item/ability block starting from `params`.
pub(crate) fn maximize_item_block(
    stats: &ItemStats,
    params: &ParameterSet,
    spec: &ModelSpec,
    max_iter: usize,
    tol: f64,
) -> Result<ParameterSet> {
    let mut out = params.clone();
    if spec.parameterization == Parameterization::Lc {
        for v in 0..spec.n_classes {
            for j in 0..spec.n_items() {
                let (c, w) = stats.cell(v, j);
                if c + w > 0.0 {
                    let p = (c / (c + w)).clamp(LC_CLAMP, 1.0 - LC_CLAMP);
                    out.lc_logit[v][j] = logit(p);
                }
            }
        }
        return Ok(out);
    }

    let layout = FreeLayout::new(spec);
    for _ in 0..max_iter {
        let before = layout.pack(&out);
        sweep(stats, &mut out, spec, max_iter, tol);
        joint_newton_step(stats, &mut out, spec, &layout);
        if crate::math::max_abs_diff(&before, &layout.pack(&out)) < tol {
            break;
        }
    }
    Ok(out)
}

/// One pass of per-item then per-ability one-block maximizations.
fn sweep(stats: &ItemStats, p: &mut ParameterSet, spec: &ModelSpec, max_iter: usize, tol: f64) {
    let kv = spec.n_classes;
    for j in 0..spec.n_items() {
        if spec.items.is_reference(j) {
            continue;
        }
        let d = spec.items.dim_of(j);
        let cells: Vec<(f64, f64, f64)> = (0..kv)
            .map(|v| {
                let (c, w) = stats.cell(v, j);
                (c, w, p.ability[v][d])
            })
            .collect();
        let item_obj = |gamma: f64, beta: f64| -> f64 {
            cells
                .iter()
                .map(|&(c, w, xi)| cell_objective(c, w, gamma * (xi - beta)))
                .sum()
        };
        let f0 = item_obj(p.discrimination[j], p.difficulty[j]);
        let (gamma, beta) = match spec.parameterization {
            Parameterization::OnePl => {
                // eta = xi - beta is linear in beta
                let beta = newton_1d(
                    p.difficulty[j],
                    |b| item_obj(1.0, b),
                    |b| {
                        cells.iter().fold((0.0, 0.0), |(g, h), &(c, w, xi)| {
                            let s = logistic(xi - b);
                            (g - (c - (c + w) * s), h - (c + w) * s * (1.0 - s))
                        })
                    },
                    -LOCATION_BOUND,
                    LOCATION_BOUND,
                    max_iter,
                    tol,
                );
                (1.0, beta)
            }
            _ => two_pl_item(&cells, p.discrimination[j], p.difficulty[j], max_iter, tol),
        };
        if item_obj(gamma, beta) >= f0 {
            p.discrimination[j] = gamma;
            p.difficulty[j] = beta;
        }
    }

    for v in 0..kv {
        for d in 0..spec.n_dims() {
            let cells: Vec<(f64, f64, f64, f64)> = spec
                .items
                .items_of(d)
                .map(|j| {
                    let (c, w) = stats.cell(v, j);
                    (c, w, p.discrimination[j], p.difficulty[j])
                })
                .collect();
            if cells.iter().all(|&(c, w, _, _)| c + w == 0.0) {
                continue;
            }
            let obj = |xi: f64| -> f64 {
                cells
                    .iter()
                    .map(|&(c, w, g, b)| cell_objective(c, w, g * (xi - b)))
                    .sum()
            };
            p.ability[v][d] = newton_1d(
                p.ability[v][d],
                obj,
                |xi| {
                    cells.iter().fold((0.0, 0.0), |(gr, h), &(c, w, g, b)| {
                        let s = logistic(g * (xi - b));
                        (gr + g * (c - (c + w) * s), h - g * g * (c + w) * s * (1.0 - s))
                    })
                },
                -LOCATION_BOUND,
                LOCATION_BOUND,
                max_iter,
                tol,
            );
        }
    }
}

/// Concave one-dimensional Newton with step halving inside `[lo, hi]`.
/// `deriv` returns (first, second) derivatives.
fn newton_1d(
    start: f64,
    obj: impl Fn(f64) -> f64,
    deriv: impl Fn(f64) -> (f64, f64),
    lo: f64,
    hi: f64,
    max_iter: usize,
    tol: f64,
) -> f64 {
    let mut x = start;
    let mut f = obj(x);
    for _ in 0..max_iter {
        let (g, h) = deriv(x);
        if g == 0.0 {
            break;
        }
        let step = if h < 0.0 { -g / h } else { g.signum() };
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..MAX_HALVINGS {
            let cand = (x + t * step).clamp(lo, hi);
            let fc = obj(cand);
            if fc.is_finite() && fc >= f {
                moved = (cand - x).abs() >= tol;
                x = cand;
                f = fc;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }
    x
}

/// 2PL item update in the concave parameterization `eta = a * xi - b`
/// (`a = gamma`, `b = gamma * beta`).
fn two_pl_item(cells: &[(f64, f64, f64)], gamma: f64, beta: f64, max_iter: usize, tol: f64) -> (f64, f64) {
    let obj = |a: f64, b: f64| -> f64 { cells.iter().map(|&(c, w, xi)| cell_objective(c, w, a * xi - b)).sum() };
    let mut a = gamma;
    let mut b = gamma * beta;
    let mut f = obj(a, b);
    for _ in 0..max_iter {
        let (mut ga, mut gb, mut haa, mut hab, mut hbb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for &(c, w, xi) in cells {
            let n = c + w;
            let s = logistic(a * xi - b);
            let g = c - n * s;
            let h = n * s * (1.0 - s);
            ga += g * xi;
            gb -= g;
            haa += h * xi * xi;
            hab -= h * xi;
            hbb += h;
        }
        // solve [haa hab; hab hbb] d = [ga gb]
        let det = haa * hbb - hab * hab;
        let (da, db) = if det > 1e-14 * (haa * hbb).max(1e-300) && haa > 0.0 {
            ((hbb * ga - hab * gb) / det, (haa * gb - hab * ga) / det)
        } else {
            let scale = (haa + hbb).max(1e-8);
            (ga / scale, gb / scale)
        };
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..MAX_HALVINGS {
            let na = (a + t * da).clamp(-SCALE_BOUND, SCALE_BOUND);
            let nb = b + t * db;
            let fc = obj(na, nb);
            if fc.is_finite() && fc >= f && na.abs() >= MIN_SCALE && (nb / na).abs() <= LOCATION_BOUND {
                moved = (na - a).abs().max((nb - b).abs()) >= tol;
                a = na;
                b = nb;
                f = fc;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }
    (a, b / a)
}

/// Positions of the free item/ability parameters in a packed vector:
/// non-reference difficulties, non-reference discriminations (2PL only),
/// then abilities row by row.
pub(crate) struct FreeLayout {
    beta_idx: Vec<Option<usize>>,
    gamma_idx: Vec<Option<usize>>,
    xi_start: usize,
    n_dims: usize,
    len: usize,
}

impl FreeLayout {
    pub(crate) fn new(spec: &ModelSpec) -> Self {
        let r = spec.n_items();
        let mut next = 0;
        let mut beta_idx = vec![None; r];
        for (j, slot) in beta_idx.iter_mut().enumerate() {
            if !spec.items.is_reference(j) {
                *slot = Some(next);
                next += 1;
            }
        }
        let mut gamma_idx = vec![None; r];
        if spec.parameterization == Parameterization::TwoPl {
            for (j, slot) in gamma_idx.iter_mut().enumerate() {
                if !spec.items.is_reference(j) {
                    *slot = Some(next);
                    next += 1;
                }
            }
        }
        let xi_start = next;
        let len = next + spec.n_classes * spec.n_dims();
        Self {
            beta_idx,
            gamma_idx,
            xi_start,
            n_dims: spec.n_dims(),
            len,
        }
    }

    pub(crate) fn len(&self) -> usize {
        self.len
    }

    pub(crate) fn pack(&self, p: &ParameterSet) -> Vec<f64> {
        let mut out = vec![0.0; self.len];
        for (j, idx) in self.beta_idx.iter().enumerate() {
            if let Some(k) = idx {
                out[*k] = p.difficulty[j];
            }
        }
        for (j, idx) in self.gamma_idx.iter().enumerate() {
            if let Some(k) = idx {
                out[*k] = p.discrimination[j];
            }
        }
        for (v, row) in p.ability.iter().enumerate() {
            for (d, x) in row.iter().enumerate() {
                out[self.xi_start + v * self.n_dims + d] = *x;
            }
        }
        out
    }

    pub(crate) fn unpack(&self, x: &[f64], p: &mut ParameterSet) {
        for (j, idx) in self.beta_idx.iter().enumerate() {
            if let Some(k) = idx {
                p.difficulty[j] = x[*k];
            }
        }
        for (j, idx) in self.gamma_idx.iter().enumerate() {
            if let Some(k) = idx {
                p.discrimination[j] = x[*k];
            }
        }
        for (v, row) in p.ability.iter_mut().enumerate() {
            for (d, val) in row.iter_mut().enumerate() {
                *val = x[self.xi_start + v * self.n_dims + d];
            }
        }
    }

    fn xi(&self, v: usize, d: usize) -> usize {
        self.xi_start + v * self.n_dims + d
    }
}

/// Analytic gradient and Hessian of the block objective in packed coordinates.
pub(crate) fn item_block_derivatives(
    stats: &ItemStats,
    p: &ParameterSet,
    spec: &ModelSpec,
    layout: &FreeLayout,
) -> (DVector<f64>, DMatrix<f64>) {
    let n = layout.len();
    let mut grad = DVector::zeros(n);
    let mut hess = DMatrix::zeros(n, n);
    for v in 0..spec.n_classes {
        for j in 0..spec.n_items() {
            let (c, w) = stats.cell(v, j);
            let total = c + w;
            if total == 0.0 {
                continue;
            }
            let d = spec.items.dim_of(j);
            let gamma = p.discrimination[j];
            let e = p.ability[v][d] - p.difficulty[j];
            let s = logistic(gamma * e);
            let g = c - total * s;
            let h = total * s * (1.0 - s);
            let mut partials: [(usize, f64); 3] = [(usize::MAX, 0.0); 3];
            let mut np = 0;
            if let Some(k) = layout.beta_idx[j] {
                partials[np] = (k, -gamma);
                np += 1;
            }
            if let Some(k) = layout.gamma_idx[j] {
                partials[np] = (k, e);
                np += 1;
            }
            let kx = layout.xi(v, d);
            partials[np] = (kx, gamma);
            np += 1;
            for &(a, da) in &partials[..np] {
                grad[a] += g * da;
                for &(b, db) in &partials[..np] {
                    hess[(a, b)] -= h * da * db;
                }
            }
            if let (Some(kb), Some(kg)) = (layout.beta_idx[j], layout.gamma_idx[j]) {
                hess[(kb, kg)] -= g;
                hess[(kg, kb)] -= g;
            }
            if let Some(kg) = layout.gamma_idx[j] {
                hess[(kg, kx)] += g;
                hess[(kx, kg)] += g;
            }
        }
    }
    (grad, hess)
}

/// Full Newton step on the whole block, taken only when the Hessian is
/// negative definite and the objective improves.
fn joint_newton_step(stats: &ItemStats, p: &mut ParameterSet, spec: &ModelSpec, layout: &FreeLayout) {
    let (grad, hess) = item_block_derivatives(stats, p, spec, layout);
    let neg = -&hess;
    let Some(ch) = neg.cholesky() else {
        return;
    };
    let step = ch.solve(&grad);
    if !step.iter().all(|x| x.is_finite()) {
        return;
    }
    let x0 = layout.pack(p);
    let f0 = item_block_objective(stats, p, spec);
    let mut cand = p.clone();
    let mut t = 1.0;
    for _ in 0..MAX_HALVINGS {
        let x: Vec<f64> = x0.iter().zip(step.iter()).map(|(a, s)| a + t * s).collect();
        layout.unpack(&x, &mut cand);
        if within_bounds(&cand) {
            let f = item_block_objective(stats, &cand, spec);
            if f.is_finite() && f >= f0 {
                *p = cand;
                return;
            }
        }
        t *= 0.5;
    }
}

fn within_bounds(p: &ParameterSet) -> bool {
    p.difficulty.iter().all(|b| b.abs() <= LOCATION_BOUND)
        && p.discrimination
            .iter()
            .all(|g| g.abs() <= SCALE_BOUND && g.abs() >= MIN_SCALE)
        && p.ability.iter().flatten().all(|x| x.abs() <= LOCATION_BOUND)
}
