//! Weighted multinomial logistic regression solved by safeguarded Newton-Raphson.
//!
//! Each case carries a vector of (possibly fractional) category counts and a
//! sparse design for the logit of every non-reference category. Category 0 is
//! the reference with logit fixed at zero.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::math::log_softmax_with_reference;

/// Coefficients are kept inside this box.
pub(crate) const COEF_BOUND: f64 = 50.0;
const MAX_HALVINGS: usize = 40;

#[derive(Debug, Clone)]
pub(crate) struct MlogitProblem {
    n_categories: usize,
    n_coef: usize,
    targets: Vec<f64>,
    totals: Vec<f64>,
    offsets: Vec<usize>,
    entries: Vec<(usize, f64)>,
}

impl MlogitProblem {
    pub(crate) fn new(n_categories: usize, n_coef: usize) -> Self {
        Self {
            n_categories,
            n_coef,
            targets: Vec::new(),
            totals: Vec::new(),
            offsets: vec![0],
            entries: Vec::new(),
        }
    }

    /// Adds a case; `design(v, out)` pushes `(coef index, value)` pairs for the
    /// logit of category `v` (`1..n_categories`).
    pub(crate) fn push_case(&mut self, targets: &[f64], mut design: impl FnMut(usize, &mut Vec<(usize, f64)>)) {
        debug_assert_eq!(targets.len(), self.n_categories);
        self.targets.extend_from_slice(targets);
        self.totals.push(targets.iter().sum());
        for v in 1..self.n_categories {
            design(v, &mut self.entries);
            self.offsets.push(self.entries.len());
        }
    }

    fn n_cases(&self) -> usize {
        self.totals.len()
    }

    fn design(&self, case: usize, v: usize) -> &[(usize, f64)] {
        let k = case * (self.n_categories - 1) + (v - 1);
        &self.entries[self.offsets[k]..self.offsets[k + 1]]
    }

    fn log_probs(&self, case: usize, coef: &[f64]) -> Vec<f64> {
        log_softmax_with_reference(
            (1..self.n_categories).map(|v| self.design(case, v).iter().map(|&(p, x)| coef[p] * x).sum()),
        )
    }

    pub(crate) fn objective(&self, coef: &[f64]) -> f64 {
        let k = self.n_categories;
        let mut f = 0.0;
        for c in 0..self.n_cases() {
            if self.totals[c] == 0.0 {
                continue;
            }
            let lp = self.log_probs(c, coef);
            for v in 0..k {
                let t = self.targets[c * k + v];
                if t != 0.0 {
                    f += t * lp[v];
                }
            }
        }
        f
    }

    pub(crate) fn gradient_hessian(&self, coef: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let k = self.n_categories;
        let mut grad = DVector::zeros(self.n_coef);
        let mut hess = DMatrix::zeros(self.n_coef, self.n_coef);
        let mut mean = vec![0.0; self.n_coef];
        let mut touched: Vec<usize> = Vec::new();
        for c in 0..self.n_cases() {
            let total = self.totals[c];
            if total == 0.0 {
                continue;
            }
            let prob: Vec<f64> = self.log_probs(c, coef).iter().map(|x| x.exp()).collect();
            touched.clear();
            for v in 1..k {
                let resid = self.targets[c * k + v] - total * prob[v];
                for &(p, x) in self.design(c, v) {
                    grad[p] += resid * x;
                    if !touched.contains(&p) {
                        touched.push(p);
                    }
                    mean[p] += prob[v] * x;
                }
            }
            // -H = total * (sum_v pi_v a_v a_v' - m m')
            for v in 1..k {
                let d = self.design(c, v);
                for &(p, x) in d {
                    for &(q, y) in d {
                        hess[(p, q)] -= total * prob[v] * x * y;
                    }
                }
            }
            for &p in &touched {
                for &q in &touched {
                    hess[(p, q)] += total * mean[p] * mean[q];
                }
            }
            for &p in &touched {
                mean[p] = 0.0;
            }
        }
        (grad, hess)
    }

    /// Newton-Raphson with step halving; never returns a point with a lower
    /// objective than `start`.
    pub(crate) fn maximize(
        &self,
        start: &[f64],
        max_iter: usize,
        tol: f64,
        block: &'static str,
    ) -> Result<Vec<f64>> {
        let mut coef = start.to_vec();
        if self.n_coef == 0 {
            return Ok(coef);
        }
        let mut f = self.objective(&coef);
        if !f.is_finite() {
            return Err(Error::Newton {
                block,
                reason: "objective is not finite at the starting point".into(),
            });
        }
        for _ in 0..max_iter {
            let (grad, hess) = self.gradient_hessian(&coef);
            let Some(step) = newton_direction(&grad, &hess) else {
                break;
            };
            let mut t = 1.0;
            let mut accepted = None;
            let mut any_finite = false;
            for _ in 0..MAX_HALVINGS {
                let cand: Vec<f64> = coef
                    .iter()
                    .zip(step.iter())
                    .map(|(c, s)| (c + t * s).clamp(-COEF_BOUND, COEF_BOUND))
                    .collect();
                let fc = self.objective(&cand);
                if fc.is_finite() {
                    any_finite = true;
                    if fc >= f {
                        accepted = Some((cand, fc));
                        break;
                    }
                }
                t *= 0.5;
            }
            match accepted {
                Some((cand, fc)) => {
                    let change = crate::math::max_abs_diff(&cand, &coef);
                    coef = cand;
                    f = fc;
                    if change < tol {
                        break;
                    }
                }
                None if !any_finite => {
                    return Err(Error::Newton {
                        block,
                        reason: format!("objective non-finite after {MAX_HALVINGS} step halvings"),
                    })
                }
                None => break,
            }
        }
        Ok(coef)
    }
}

/// Solves `(-H) d = g`, adding a growing ridge when `-H` is not positive definite.
pub(crate) fn newton_direction(grad: &DVector<f64>, hess: &DMatrix<f64>) -> Option<DVector<f64>> {
    let neg = -hess;
    let scale = neg.diagonal().iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-12);
    let mut ridge = 0.0;
    for _ in 0..12 {
        let mut m = neg.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += ridge;
        }
        if let Some(ch) = m.cholesky() {
            let d = ch.solve(grad);
            if d.iter().all(|x| x.is_finite()) {
                return Some(d);
            }
        }
        ridge = if ridge == 0.0 { 1e-10 * scale } else { ridge * 10.0 };
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn intercept_only_matches_proportions() {
        // three categories, counts pooled to (2, 3, 5)
        let mut prob = MlogitProblem::new(3, 2);
        for t in [[1.0, 1.0, 3.0], [1.0, 2.0, 2.0]] {
            prob.push_case(&t, |v, out| out.push((v - 1, 1.0)));
        }
        let coef = prob.maximize(&[0.0, 0.0], 50, 1e-12, "test").unwrap();
        assert!((coef[0] - (3.0f64 / 2.0).ln()).abs() < 1e-9);
        assert!((coef[1] - (5.0f64 / 2.0).ln()).abs() < 1e-9);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut prob = MlogitProblem::new(3, 4);
        let xs = [0.3, -1.2, 2.0, 0.7];
        for (i, &x) in xs.iter().enumerate() {
            let t = [0.2 + 0.1 * i as f64, 0.5, 0.9 - 0.2 * i as f64];
            prob.push_case(&t, |v, out| {
                out.push((v - 1, 1.0));
                out.push((1 + v, x));
            });
        }
        let coef = [0.1, -0.3, 0.5, 0.2];
        let (g, h) = prob.gradient_hessian(&coef);
        let eps = 1e-6;
        for p in 0..4 {
            let mut a = coef;
            let mut b = coef;
            a[p] += eps;
            b[p] -= eps;
            let fd = (prob.objective(&a) - prob.objective(&b)) / (2.0 * eps);
            assert!((fd - g[p]).abs() < 1e-6, "grad {p}: {fd} vs {}", g[p]);
            let (ga, _) = prob.gradient_hessian(&a);
            let (gb, _) = prob.gradient_hessian(&b);
            for q in 0..4 {
                let fd2 = (ga[q] - gb[q]) / (2.0 * eps);
                assert!((fd2 - h[(q, p)]).abs() < 1e-5);
            }
        }
    }
}
