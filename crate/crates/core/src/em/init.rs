use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::likelihood::ResponseDataset;
use crate::math::logit;
use crate::model::{apply_identifiability, ModelSpec, ParameterSet, Parameterization};

const DIFFICULTY_CLAMP: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitStrategy {
    Deterministic,
    /// Deterministic values plus seeded uniform perturbations.
    Random,
}

/// Mixes a base seed with a stream index (splitmix64 finalizer).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Equally spaced grid on `[-k/2, k/2]`; a single point sits at zero.
pub(crate) fn ability_grid(k: usize) -> Vec<f64> {
    if k == 1 {
        return vec![0.0];
    }
    let half = k as f64 / 2.0;
    (0..k)
        .map(|v| -half + k as f64 * v as f64 / (k - 1) as f64)
        .collect()
}

/// Starting values for EM.
///
/// Difficulties start at minus the logit of each item's observed proportion
/// correct (clamped to +-5 for items nobody or everybody solved), abilities on
/// an equally spaced grid, discriminations at one and logit coefficients at
/// zero except for the class intercepts, which are spread across school
/// types from favouring the lowest class to favouring the highest. The result is re-anchored so reference items have difficulty zero.
/// `seed` is only used by [`InitStrategy::Random`].
pub fn initialize(
    data: &ResponseDataset,
    spec: &ModelSpec,
    strategy: InitStrategy,
    seed: u64,
) -> Result<ParameterSet> {
    spec.validate()?;
    data.check(spec)?;
    let r = spec.n_items();
    let mut correct = vec![0usize; r];
    let mut seen = vec![0usize; r];
    for s in data.students() {
        for (j, y) in s.responses.iter().enumerate() {
            if let Some(y) = y {
                seen[j] += 1;
                correct[j] += usize::from(*y);
            }
        }
    }

    let mut p = ParameterSet::neutral(spec);
    for j in 0..r {
        p.difficulty[j] = if seen[j] == 0 {
            0.0
        } else {
            let prop = correct[j] as f64 / seen[j] as f64;
            (-logit(prop)).clamp(-DIFFICULTY_CLAMP, DIFFICULTY_CLAMP)
        };
    }
    let grid = ability_grid(spec.n_classes);
    for (row, g) in p.ability.iter_mut().zip(&grid) {
        row.iter_mut().for_each(|x| *x = *g);
    }
    // With identical type-specific intercepts the types never separate, so
    // tilt type u towards higher classes by an amount growing with u.
    let (kv, ku) = (spec.n_classes, spec.n_types);
    if ku > 1 && kv > 1 {
        for (u, row) in p.class_intercepts.iter_mut().enumerate() {
            let tilt = 2.0 * u as f64 / (ku - 1) as f64 - 1.0;
            for (v, z) in row.iter_mut().enumerate() {
                *z = tilt * (v + 1) as f64 / (kv - 1) as f64;
            }
        }
    }

    if strategy == InitStrategy::Random {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for x in p.ability.iter_mut().flatten() {
            *x += rng.random_range(-1.0..1.0);
        }
        for b in p.difficulty.iter_mut() {
            *b += rng.random_range(-0.5..0.5);
        }
        for z in p.class_intercepts.iter_mut().flatten() {
            *z += rng.random_range(-1.0..1.0);
        }
        for z in p.type_intercepts.iter_mut() {
            *z += rng.random_range(-1.0..1.0);
        }
    }

    if spec.parameterization == Parameterization::Lc {
        for v in 0..spec.n_classes {
            for j in 0..r {
                p.lc_logit[v][j] = p.ability[v][spec.items.dim_of(j)] - p.difficulty[j];
            }
        }
        p.ability = vec![vec![0.0; spec.n_dims()]; spec.n_classes];
        p.difficulty = vec![0.0; r];
        return Ok(p);
    }
    apply_identifiability(&p, spec)
}
