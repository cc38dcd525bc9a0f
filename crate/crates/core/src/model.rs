//! Model specification, parameters and the item response function.
//!
//! Indices are zero-based throughout the library. Class `0` is the reference
//! category of the student-level multinomial logit and type `0` the reference of
//! the school-level one.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{log_softmax_with_reference, logistic};

/// Partition of the items into latent dimensions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemBank {
    dim_of: Vec<usize>,
    reference_item: Vec<usize>,
}

impl ItemBank {
    /// Builds a bank without checking it; see [`validate_spec`].
    pub fn new(dim_of: Vec<usize>, reference_item: Vec<usize>) -> Self {
        Self {
            dim_of,
            reference_item,
        }
    }

    /// Uses the first item of each dimension as its reference item.
    pub fn with_first_references(dim_of: Vec<usize>, n_dims: usize) -> Result<Self> {
        let mut reference_item = Vec::with_capacity(n_dims);
        for d in 0..n_dims {
            match dim_of.iter().position(|&x| x == d) {
                Some(j) => reference_item.push(j),
                None => {
                    return Err(Error::InvalidSpec(vec![format!(
                        "empty dimension {d}: no item measures it"
                    )]))
                }
            }
        }
        Ok(Self {
            dim_of,
            reference_item,
        })
    }

    /// All items on a single dimension with item 0 as reference.
    pub fn unidimensional(n_items: usize) -> Self {
        Self {
            dim_of: vec![0; n_items],
            reference_item: vec![0],
        }
    }

    pub fn n_items(&self) -> usize {
        self.dim_of.len()
    }

    pub fn n_dims(&self) -> usize {
        self.reference_item.len()
    }

    pub fn dim_of(&self, item: usize) -> usize {
        self.dim_of[item]
    }

    pub fn dims(&self) -> &[usize] {
        &self.dim_of
    }

    pub fn reference_items(&self) -> &[usize] {
        &self.reference_item
    }

    pub fn is_reference(&self, item: usize) -> bool {
        self.reference_item.contains(&item)
    }

    /// Items belonging to dimension `d`.
    pub fn items_of(&self, d: usize) -> impl Iterator<Item = usize> + '_ {
        self.dim_of
            .iter()
            .enumerate()
            .filter(move |(_, &x)| x == d)
            .map(|(j, _)| j)
    }
}

/// Item response parameterization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Parameterization {
    /// Free success probability per (class, item).
    #[serde(rename = "lc")]
    Lc,
    /// Rasch: discriminations fixed at one.
    #[serde(rename = "1pl")]
    OnePl,
    #[serde(rename = "2pl")]
    TwoPl,
}

impl FromStr for Parameterization {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "lc" => Ok(Self::Lc),
            "1pl" | "rasch" => Ok(Self::OnePl),
            "2pl" => Ok(Self::TwoPl),
            other => Err(format!("unknown parameterization '{other}' (expected lc, 1pl or 2pl)")),
        }
    }
}

impl fmt::Display for Parameterization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Lc => "lc",
            Self::OnePl => "1pl",
            Self::TwoPl => "2pl",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub items: ItemBank,
    /// Number of student ability classes (`k_V`).
    pub n_classes: usize,
    /// Number of latent school types (`k_U`).
    pub n_types: usize,
    pub parameterization: Parameterization,
    /// Student covariate columns after indicator expansion (`m_V`).
    pub n_student_covariates: usize,
    /// School covariate columns after indicator expansion (`m_U`).
    pub n_school_covariates: usize,
}

impl ModelSpec {
    pub fn n_items(&self) -> usize {
        self.items.n_items()
    }

    pub fn n_dims(&self) -> usize {
        self.items.n_dims()
    }

    pub fn validate(&self) -> Result<()> {
        let violations = validate_spec(self);
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidSpec(violations))
        }
    }
}

/// Lists every violated constraint of `spec`; an empty list means valid.
pub fn validate_spec(spec: &ModelSpec) -> Vec<String> {
    let mut out = Vec::new();
    let bank = &spec.items;
    let s = bank.n_dims();
    if bank.n_items() == 0 {
        out.push("item bank is empty".to_string());
    }
    if s == 0 {
        out.push("item bank has no dimensions".to_string());
    }
    for (j, &d) in bank.dim_of.iter().enumerate() {
        if d >= s {
            out.push(format!("item {j} assigned to dimension {d}, but only {s} dimensions exist"));
        }
    }
    for d in 0..s {
        if bank.items_of(d).next().is_none() {
            out.push(format!("empty dimension {d}: no item measures it"));
        }
        let j = bank.reference_item[d];
        if j >= bank.n_items() {
            out.push(format!("reference item {j} of dimension {d} does not exist"));
        } else if bank.dim_of[j] != d {
            out.push(format!(
                "reference item {j} of dimension {d} belongs to dimension {}",
                bank.dim_of[j]
            ));
        }
    }
    if spec.n_classes == 0 {
        out.push("number of student classes must be at least 1".to_string());
    }
    if spec.n_types == 0 {
        out.push("number of school types must be at least 1".to_string());
    }
    out
}

/// Free parameters of the model.
///
/// Matrices are stored row-major as nested vectors. Student-class slopes are
/// shared across school types; intercepts are type-specific.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    /// Item difficulties, one per item (unused under LC).
    pub difficulty: Vec<f64>,
    /// Item discriminations, one per item (unused under LC).
    pub discrimination: Vec<f64>,
    /// Class abilities, `k_V x s` (unused under LC).
    pub ability: Vec<Vec<f64>>,
    /// Student-class intercepts, `k_U x (k_V - 1)`.
    pub class_intercepts: Vec<Vec<f64>>,
    /// Student-class covariate slopes, `(k_V - 1) x m_V`.
    pub class_slopes: Vec<Vec<f64>>,
    /// School-type intercepts, `k_U - 1`.
    pub type_intercepts: Vec<f64>,
    /// School-type covariate slopes, `(k_U - 1) x m_U`.
    pub type_slopes: Vec<Vec<f64>>,
    /// LC success logits, `k_V x r`; empty for 1PL/2PL.
    pub lc_logit: Vec<Vec<f64>>,
}

impl ParameterSet {
    /// Neutral parameters: zero difficulties, unit discriminations, zero
    /// abilities and regression coefficients, success probability 1/2 under LC.
    pub fn neutral(spec: &ModelSpec) -> Self {
        let r = spec.n_items();
        let s = spec.n_dims();
        let kv = spec.n_classes;
        let ku = spec.n_types;
        Self {
            difficulty: vec![0.0; r],
            discrimination: vec![1.0; r],
            ability: vec![vec![0.0; s]; kv],
            class_intercepts: vec![vec![0.0; kv - 1]; ku],
            class_slopes: vec![vec![0.0; spec.n_student_covariates]; kv - 1],
            type_intercepts: vec![0.0; ku - 1],
            type_slopes: vec![vec![0.0; spec.n_school_covariates]; ku - 1],
            lc_logit: if spec.parameterization == Parameterization::Lc {
                vec![vec![0.0; r]; kv]
            } else {
                Vec::new()
            },
        }
    }

    pub fn n_classes(&self) -> usize {
        self.class_slopes.len() + 1
    }

    pub fn n_types(&self) -> usize {
        self.type_intercepts.len() + 1
    }

    /// Checks dimensions and finiteness against `spec`.
    pub fn check(&self, spec: &ModelSpec) -> Result<()> {
        let r = spec.n_items();
        let s = spec.n_dims();
        let kv = spec.n_classes;
        let ku = spec.n_types;
        let shape = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::ParameterShape(what.to_string()))
            }
        };
        shape(self.difficulty.len() == r, "difficulty length")?;
        shape(self.discrimination.len() == r, "discrimination length")?;
        shape(
            self.ability.len() == kv && self.ability.iter().all(|row| row.len() == s),
            "ability matrix shape",
        )?;
        shape(
            self.class_intercepts.len() == ku
                && self.class_intercepts.iter().all(|row| row.len() == kv - 1),
            "class intercept shape",
        )?;
        shape(
            self.class_slopes.len() == kv - 1
                && self
                    .class_slopes
                    .iter()
                    .all(|row| row.len() == spec.n_student_covariates),
            "class slope shape",
        )?;
        shape(self.type_intercepts.len() == ku - 1, "type intercept length")?;
        shape(
            self.type_slopes.len() == ku - 1
                && self
                    .type_slopes
                    .iter()
                    .all(|row| row.len() == spec.n_school_covariates),
            "type slope shape",
        )?;
        if spec.parameterization == Parameterization::Lc {
            shape(
                self.lc_logit.len() == kv && self.lc_logit.iter().all(|row| row.len() == r),
                "LC probability shape",
            )?;
        }
        if !self.flatten().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("parameter set"));
        }
        Ok(())
    }

    /// All values in a fixed order; used for change criteria and alignment.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend(&self.difficulty);
        out.extend(&self.discrimination);
        self.ability.iter().for_each(|r| out.extend(r));
        self.class_intercepts.iter().for_each(|r| out.extend(r));
        self.class_slopes.iter().for_each(|r| out.extend(r));
        out.extend(&self.type_intercepts);
        self.type_slopes.iter().for_each(|r| out.extend(r));
        self.lc_logit.iter().for_each(|r| out.extend(r));
        out
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        crate::math::max_abs_diff(&self.flatten(), &other.flatten())
    }

    /// LC success probabilities, `k_V x r`.
    pub fn lc_prob(&self) -> Vec<Vec<f64>> {
        self.lc_logit
            .iter()
            .map(|row| row.iter().map(|&z| logistic(z)).collect())
            .collect()
    }

    /// Relabels student classes: new class `v` is old class `perm[v]`.
    ///
    /// Logit coefficients are re-expressed against the new reference class so
    /// the implied weights are unchanged.
    pub fn permute_classes(&self, perm: &[usize]) -> Self {
        let mut out = self.clone();
        out.ability = perm.iter().map(|&c| self.ability[c].clone()).collect();
        if !self.lc_logit.is_empty() {
            out.lc_logit = perm.iter().map(|&c| self.lc_logit[c].clone()).collect();
        }
        out.class_intercepts = self
            .class_intercepts
            .iter()
            .map(|row| relabel_logits(row, perm))
            .collect();
        let m = self.class_slopes.first().map_or(0, Vec::len);
        let slope_cols: Vec<Vec<f64>> = (0..m)
            .map(|k| {
                let col: Vec<f64> = self.class_slopes.iter().map(|row| row[k]).collect();
                relabel_logits(&col, perm)
            })
            .collect();
        out.class_slopes = (0..perm.len() - 1)
            .map(|v| slope_cols.iter().map(|col| col[v]).collect())
            .collect();
        out
    }

    /// Relabels school types: new type `u` is old type `perm[u]`.
    pub fn permute_types(&self, perm: &[usize]) -> Self {
        let mut out = self.clone();
        out.class_intercepts = perm
            .iter()
            .map(|&u| self.class_intercepts[u].clone())
            .collect();
        out.type_intercepts = relabel_logits(&self.type_intercepts, perm);
        let m = self.type_slopes.first().map_or(0, Vec::len);
        let slope_cols: Vec<Vec<f64>> = (0..m)
            .map(|k| {
                let col: Vec<f64> = self.type_slopes.iter().map(|row| row[k]).collect();
                relabel_logits(&col, perm)
            })
            .collect();
        out.type_slopes = (0..perm.len() - 1)
            .map(|u| slope_cols.iter().map(|col| col[u]).collect())
            .collect();
        out
    }
}

// `coefs[c - 1]` is the coefficient of category `c` against category 0.
fn relabel_logits(coefs: &[f64], perm: &[usize]) -> Vec<f64> {
    let eta = |c: usize| if c == 0 { 0.0 } else { coefs[c - 1] };
    let base = eta(perm[0]);
    perm[1..].iter().map(|&c| eta(c) - base).collect()
}

/// Response logit of `item` for a student of class `class`.
pub fn item_logit(item: usize, class: usize, params: &ParameterSet, spec: &ModelSpec) -> Result<f64> {
    let r = spec.n_items();
    if item >= r {
        return Err(Error::ItemOutOfRange { item, n_items: r });
    }
    if class >= spec.n_classes {
        return Err(Error::ClassOutOfRange {
            index: class,
            count: spec.n_classes,
        });
    }
    let z = match spec.parameterization {
        Parameterization::Lc => params.lc_logit[class][item],
        Parameterization::OnePl | Parameterization::TwoPl => irt_logit(
            params.discrimination[item],
            params.difficulty[item],
            params.ability[class][spec.items.dim_of(item)],
        ),
    };
    if z.is_finite() {
        Ok(z)
    } else {
        Err(Error::NonFinite("item logit"))
    }
}

/// `gamma * (ability - beta)`.
pub fn irt_logit(discrimination: f64, difficulty: f64, ability: f64) -> f64 {
    discrimination * (ability - difficulty)
}

/// Probability of a correct response to `item` in class `class`.
pub fn item_success_prob(
    item: usize,
    class: usize,
    params: &ParameterSet,
    spec: &ModelSpec,
) -> Result<f64> {
    item_logit(item, class, params, spec).map(logistic)
}

/// Re-expresses 1PL/2PL parameters so every reference item has difficulty 0
/// and discrimination 1, leaving all response probabilities unchanged.
pub fn apply_identifiability(params: &ParameterSet, spec: &ModelSpec) -> Result<ParameterSet> {
    if spec.parameterization == Parameterization::Lc {
        return Ok(params.clone());
    }
    let mut out = params.clone();
    for (d, &jd) in spec.items.reference_items().iter().enumerate() {
        let scale = params.discrimination[jd];
        let shift = params.difficulty[jd];
        if scale == 0.0 {
            return Err(Error::ZeroReferenceDiscrimination { item: jd });
        }
        for j in spec.items.items_of(d) {
            out.discrimination[j] = params.discrimination[j] / scale;
            out.difficulty[j] = scale * (params.difficulty[j] - shift);
        }
        for (row, old) in out.ability.iter_mut().zip(&params.ability) {
            row[d] = scale * (old[d] - shift);
        }
        out.discrimination[jd] = 1.0;
        out.difficulty[jd] = 0.0;
    }
    Ok(out)
}

/// Number of free parameters of the model described by `spec`.
pub fn count_free_parameters(spec: &ModelSpec) -> usize {
    let kv = spec.n_classes;
    let ku = spec.n_types;
    let r = spec.n_items();
    let s = spec.n_dims();
    let weights = (kv - 1) * (spec.n_student_covariates + ku) + (ku - 1) * (spec.n_school_covariates + 1);
    match spec.parameterization {
        Parameterization::TwoPl => weights + kv * s + 2 * (r - s),
        Parameterization::OnePl => weights + kv * s + (r - s),
        Parameterization::Lc => weights + kv * r,
    }
}

/// Mean success logit per (class, dimension); equals the abilities up to item
/// offsets for 1PL/2PL and summarizes LC classes on the same footing.
pub fn class_ability_summary(params: &ParameterSet, spec: &ModelSpec) -> Vec<Vec<f64>> {
    match spec.parameterization {
        Parameterization::Lc => params
            .lc_logit
            .iter()
            .map(|row| {
                (0..spec.n_dims())
                    .map(|d| {
                        let items: Vec<usize> = spec.items.items_of(d).collect();
                        items.iter().map(|&j| row[j]).sum::<f64>() / items.len() as f64
                    })
                    .collect()
            })
            .collect(),
        _ => params.ability.clone(),
    }
}

/// Student class log-weights conditional on type `u`; unchecked fast path.
pub(crate) fn class_log_weights_unchecked(x: &[f64], u: usize, params: &ParameterSet) -> Vec<f64> {
    log_softmax_with_reference(
        params.class_intercepts[u]
            .iter()
            .zip(&params.class_slopes)
            .map(|(b0, slope)| b0 + dot(x, slope)),
    )
}

pub(crate) fn type_log_weights_unchecked(w: &[f64], params: &ParameterSet) -> Vec<f64> {
    log_softmax_with_reference(
        params
            .type_intercepts
            .iter()
            .zip(&params.type_slopes)
            .map(|(b0, slope)| b0 + dot(w, slope)),
    )
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
