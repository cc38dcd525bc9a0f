//! Scalar helpers shared by the likelihood and the optimizers.

/// Inverse logit.
pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(logistic(z))` without overflow or cancellation.
pub fn log_logistic(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Max-shifted log-sum-exp. Returns `-inf` for an empty slice or all `-inf`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Log-probabilities of a multinomial logit whose first category has logit 0.
///
/// `logits` holds the logits of categories `2..=k` relative to the first.
pub fn log_softmax_with_reference(logits: impl IntoIterator<Item = f64>) -> Vec<f64> {
    let mut out = vec![0.0];
    out.extend(logits);
    let norm = log_sum_exp(&out);
    for v in out.iter_mut() {
        *v -= norm;
    }
    out
}

/// Normalizes log-weights in place into probabilities; returns the log normalizer.
pub fn normalize_log_weights(log_w: &mut [f64]) -> f64 {
    let norm = log_sum_exp(log_w);
    for w in log_w.iter_mut() {
        *w = (*w - norm).exp();
    }
    norm
}

/// Index of the first maximal entry.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_logistic_is_stable_at_extremes() {
        assert_eq!(log_logistic(800.0), 0.0);
        assert!((log_logistic(-800.0) + 800.0).abs() < 1e-12);
        assert!((log_logistic(0.0) - 0.5f64.ln()).abs() < 1e-15);
        assert!((logistic(3f64.ln()) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn log_sum_exp_handles_large_values() {
        let v = [700.0, 700.0];
        assert!((log_sum_exp(&v) - (700.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY; 3]), f64::NEG_INFINITY);
    }

    #[test]
    fn softmax_reference_category() {
        let lp = log_softmax_with_reference([2f64.ln()]);
        assert!((lp[0].exp() - 1.0 / 3.0).abs() < 1e-15);
        assert!((lp[1].exp() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.2, 0.5, 0.5]), 1);
        assert_eq!(argmax(&[1.0, 1.0]), 0);
    }
}
