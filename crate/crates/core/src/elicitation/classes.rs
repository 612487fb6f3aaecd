//! Class covariance scaling and belief-separation completion.
//!
//! The joint matrix over `(X, mu_1, ..., mu_m)` is indexed by [`Element`]s,
//! with block 0 holding `X` and block `i + 1` holding class `i`. Scaling
//! fills every within-block entry and every cross-block entry on matching
//! variables; the cross-block entries on different variables are completed
//! afterwards.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{ElicitationError, Result};
use crate::linear_belief::{check_coherence, pseudo_inverse, BeliefSpec, JointBelief, VariableSet};
use crate::synthesis::ClassStructure;

/// Per-variable correlations between the means of two classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanCorrelation {
    pub first: String,
    pub second: String,
    pub values: Vec<f64>,
}

/// Correlation tables and variance fractions for the model classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassElicitation {
    pub class_labels: Vec<String>,
    pub counts: Vec<usize>,
    /// `Var(mu_i)` as a percentage of `Var(X)`.
    pub mean_fraction_pct: Vec<f64>,
    /// `Var(R_ij)` as a percentage of `Var(X)`.
    pub residual_fraction_pct: Vec<f64>,
    /// `Corr(X_l, mu_il)` per class.
    pub quantity_mean_correlation: Vec<Vec<f64>>,
    /// `Corr(mu_il, mu_kl)` for every pair of classes.
    pub mean_correlations: Vec<MeanCorrelation>,
    /// `P(mu_i)` per class; defaults to `P(X)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prevision_mu: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Element {
    pub block: usize,
    pub variable: usize,
}

impl Element {
    pub fn new(block: usize, variable: usize) -> Self {
        Element { block, variable }
    }
}

/// `Cov(a, b) = Cov(a, mediator) Var(mediator)† Cov(mediator, b)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeparationRule {
    pub a: Element,
    pub b: Element,
    pub mediator: Element,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompletionMode {
    Separation,
    ZeroFill,
}

/// Joint specification over `(X, mu)` with a mask of populated entries.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialClassStructure {
    prior_x: BeliefSpec,
    class_labels: Vec<String>,
    counts: Vec<usize>,
    prevision_mu: DVector<f64>,
    var_resid: Vec<DMatrix<f64>>,
    joint: DMatrix<f64>,
    known: DMatrix<bool>,
}

impl PartialClassStructure {
    pub fn q(&self) -> usize {
        self.prior_x.dim()
    }

    pub fn m(&self) -> usize {
        self.class_labels.len()
    }

    pub fn quantity(&self) -> &VariableSet {
        self.prior_x.variables()
    }

    pub fn joint(&self) -> &DMatrix<f64> {
        &self.joint
    }

    pub fn index(&self, e: Element) -> usize {
        e.block * self.q() + e.variable
    }

    fn contains(&self, e: Element) -> bool {
        e.block <= self.m() && e.variable < self.q()
    }

    pub fn is_known(&self, a: Element, b: Element) -> bool {
        self.known[(self.index(a), self.index(b))]
    }

    pub fn get(&self, a: Element, b: Element) -> f64 {
        self.joint[(self.index(a), self.index(b))]
    }

    fn set(&mut self, a: Element, b: Element, v: f64) {
        let (i, j) = (self.index(a), self.index(b));
        self.joint[(i, j)] = v;
        self.joint[(j, i)] = v;
        self.known[(i, j)] = true;
        self.known[(j, i)] = true;
    }

    /// Unpopulated pairs `(a, b)` with `a.block < b.block`.
    pub fn missing(&self) -> Vec<(Element, Element)> {
        let (q, m) = (self.q(), self.m());
        let mut out = Vec::new();
        for ba in 0..=m {
            for bb in ba + 1..=m {
                for l in 0..q {
                    for k in 0..q {
                        let (a, b) = (Element::new(ba, l), Element::new(bb, k));
                        if !self.is_known(a, b) {
                            out.push((a, b));
                        }
                    }
                }
            }
        }
        out
    }

    fn into_structure(self) -> Result<ClassStructure> {
        let (q, m) = (self.q(), self.m());
        let cov_x_mu = self.joint.view((0, q), (q, m * q)).into_owned();
        let var_mu = self.joint.view((q, q), (m * q, m * q)).into_owned();
        let joint = JointBelief::new(
            self.prior_x.prevision().clone(),
            self.prevision_mu.clone(),
            self.prior_x.covariance().clone(),
            var_mu.clone(),
            cov_x_mu.clone(),
        )?;
        let verdict = check_coherence(&joint)?;
        if !verdict.passed() {
            return Err(ElicitationError::IncoherentElicitation(format!("completed joint over (X, mu): {verdict}")));
        }
        Ok(ClassStructure::new(
            self.prior_x.variables().clone(),
            self.class_labels,
            self.counts,
            self.prevision_mu,
            var_mu,
            self.var_resid,
            cov_x_mu,
        )?)
    }
}

fn invalid<T>(msg: String) -> Result<T> {
    Err(ElicitationError::InvalidInput(msg))
}

fn check_correlations(values: &[f64], q: usize, what: &str) -> Result<()> {
    if values.len() != q {
        return invalid(format!("{what}: {} values, expected {q}", values.len()));
    }
    if let Some(c) = values.iter().find(|c| !c.is_finite() || c.abs() > 1.0) {
        return invalid(format!("{what}: correlation {c} outside [-1, 1]"));
    }
    Ok(())
}

/// Builds the known entries of the joint `(X, mu)` specification by reusing
/// the correlation structure of `Var(X)` with scaled standard deviations.
pub fn scale_class_covariances(prior_x: &BeliefSpec, elic: &ClassElicitation) -> Result<PartialClassStructure> {
    let q = prior_x.dim();
    let m = elic.class_labels.len();
    if m == 0 {
        return invalid("no classes".into());
    }
    let mut seen = HashSet::new();
    for l in &elic.class_labels {
        if !seen.insert(l.as_str()) {
            return invalid(format!("duplicate class label {l:?}"));
        }
    }
    for (what, len) in [
        ("counts", elic.counts.len()),
        ("mean fractions", elic.mean_fraction_pct.len()),
        ("residual fractions", elic.residual_fraction_pct.len()),
        ("quantity-mean correlations", elic.quantity_mean_correlation.len()),
    ] {
        if len != m {
            return invalid(format!("{len} {what} for {m} classes"));
        }
    }
    if elic.counts.contains(&0) {
        return invalid("class counts must be at least 1".into());
    }
    for i in 0..m {
        let (fm, fr) = (elic.mean_fraction_pct[i], elic.residual_fraction_pct[i]);
        for f in [fm, fr] {
            if !(f > 0.0 && f <= 100.0) {
                return invalid(format!("class {:?}: fraction {f} outside (0, 100]", elic.class_labels[i]));
            }
        }
        if fm + fr > 100.0 {
            return invalid(format!(
                "class {:?}: mean and residual fractions sum to {} > 100",
                elic.class_labels[i],
                fm + fr
            ));
        }
        check_correlations(
            &elic.quantity_mean_correlation[i],
            q,
            &format!("Corr(X, mu) for class {:?}", elic.class_labels[i]),
        )?;
    }

    let index_of = |label: &str| elic.class_labels.iter().position(|l| l == label);
    let mut pairs = HashSet::new();
    let mut mean_corr = Vec::new();
    for mc in &elic.mean_correlations {
        let (Some(i), Some(k)) = (index_of(&mc.first), index_of(&mc.second)) else {
            return invalid(format!("mean correlation for unknown classes {:?}/{:?}", mc.first, mc.second));
        };
        if i == k {
            return invalid(format!("mean correlation of class {:?} with itself", mc.first));
        }
        if !pairs.insert((i.min(k), i.max(k))) {
            return invalid(format!("mean correlation {:?}/{:?} given twice", mc.first, mc.second));
        }
        check_correlations(&mc.values, q, &format!("Corr(mu) for {:?}/{:?}", mc.first, mc.second))?;
        mean_corr.push((i, k, &mc.values));
    }
    if pairs.len() != m * (m - 1) / 2 {
        return invalid(format!("{} of {} class pairs have mean correlations", pairs.len(), m * (m - 1) / 2));
    }

    let prevision_mu = match &elic.prevision_mu {
        None => DVector::from_iterator(m * q, (0..m).flat_map(|_| prior_x.prevision().iter().copied())),
        Some(p) => {
            if p.len() != m || p.iter().any(|v| v.len() != q) {
                return invalid("P(mu) must have one vector of length q per class".into());
            }
            if p.iter().flatten().any(|v| !v.is_finite()) {
                return invalid("P(mu) has non-finite entries".into());
            }
            DVector::from_iterator(m * q, p.iter().flatten().copied())
        }
    };

    let var_x = prior_x.covariance();
    let sd_x = prior_x.std_devs();
    let fm: Vec<f64> = elic.mean_fraction_pct.iter().map(|f| f / 100.0).collect();
    let sd_mu = |i: usize, l: usize| fm[i].sqrt() * sd_x[l];

    let dim = (m + 1) * q;
    let mut partial = PartialClassStructure {
        prior_x: prior_x.clone(),
        class_labels: elic.class_labels.clone(),
        counts: elic.counts.clone(),
        prevision_mu,
        var_resid: elic
            .residual_fraction_pct
            .iter()
            .map(|f| var_x * (f / 100.0))
            .collect(),
        joint: DMatrix::zeros(dim, dim),
        known: DMatrix::from_element(dim, dim, false),
    };
    for l in 0..q {
        for k in 0..q {
            partial.set(Element::new(0, l), Element::new(0, k), var_x[(l, k)]);
            for (i, f) in fm.iter().enumerate() {
                partial.set(Element::new(i + 1, l), Element::new(i + 1, k), f * var_x[(l, k)]);
            }
        }
    }
    for i in 0..m {
        for l in 0..q {
            let c = elic.quantity_mean_correlation[i][l];
            partial.set(Element::new(0, l), Element::new(i + 1, l), c * sd_x[l] * sd_mu(i, l));
        }
    }
    for (i, k, values) in mean_corr {
        for (l, v) in values.iter().enumerate() {
            partial.set(Element::new(i + 1, l), Element::new(k + 1, l), v * sd_mu(i, l) * sd_mu(k, l));
        }
    }
    Ok(partial)
}

/// One rule per missing entry, with the mediator chosen by the variable
/// ordering: the element of the earlier-ordered variable mediates.
pub fn preference_rules(partial: &PartialClassStructure) -> Vec<SeparationRule> {
    partial
        .missing()
        .into_iter()
        .map(|(a, b)| {
            let mediator = if a.variable < b.variable {
                Element::new(b.block, a.variable)
            } else {
                Element::new(a.block, b.variable)
            };
            SeparationRule { a, b, mediator }
        })
        .collect()
}

fn normalized(a: Element, b: Element) -> (Element, Element) {
    if (a.block, a.variable) <= (b.block, b.variable) {
        (a, b)
    } else {
        (b, a)
    }
}

/// Fills every missing entry by its separation rule and validates coherence
/// of the completed joint.
pub fn complete_by_separation(partial: &PartialClassStructure, rules: &[SeparationRule]) -> Result<ClassStructure> {
    let missing: HashSet<(Element, Element)> = partial.missing().into_iter().collect();
    let mut covered = HashSet::new();
    let mut filled = partial.clone();
    for rule in rules {
        let bad = |msg: &str| Err(ElicitationError::InvalidRule(format!("{rule:?}: {msg}")));
        if !partial.contains(rule.a) || !partial.contains(rule.b) || !partial.contains(rule.mediator) {
            return bad("element out of range");
        }
        let target = normalized(rule.a, rule.b);
        if !missing.contains(&target) {
            return bad("target is already populated");
        }
        if !covered.insert(target) {
            return bad("target covered by more than one rule");
        }
        let med = rule.mediator;
        let shape_ok = (med.block == rule.a.block && med.variable == rule.b.variable)
            || (med.block == rule.b.block && med.variable == rule.a.variable);
        if !shape_ok {
            return bad("mediator must share a block with one element and a variable with the other");
        }
        if !partial.is_known(rule.a, med) || !partial.is_known(med, rule.b) || !partial.is_known(med, med) {
            return bad("mediator covariances are not populated");
        }
        let var_med = DMatrix::from_element(1, 1, partial.get(med, med));
        let v = partial.get(rule.a, med) * pseudo_inverse(&var_med)?[(0, 0)] * partial.get(med, rule.b);
        filled.set(rule.a, rule.b, v);
    }
    if covered.len() != missing.len() {
        let first = missing.iter().find(|t| !covered.contains(*t)).copied();
        return Err(ElicitationError::IncompleteRules(format!(
            "{} of {} missing entries covered; first uncovered {:?}",
            covered.len(),
            missing.len(),
            first
        )));
    }
    filled.into_structure()
}

/// Sets every missing entry to zero.
pub fn complete_zero_fill(partial: &PartialClassStructure) -> Result<ClassStructure> {
    let mut filled = partial.clone();
    for (a, b) in partial.missing() {
        filled.set(a, b, 0.0);
    }
    filled.into_structure()
}
