//! Co-exchangeable model classes and the posterior belief assessment.
//!
//! Each model output `Z_ij` (model `j` in class `i`) is represented as a
//! class mean plus an uncorrelated, zero-prevision residual,
//! `Z_ij = mu_i + R_ij`, and the quantity of interest as
//! `X = A mu + U` with a discrepancy `U` uncorrelated with every class mean.
//! Class means are stacked class-major: all `q` entries of class 1, then all
//! `q` entries of class 2, and so on.
//!
//! The assessment adjusts the class means by the per-class sample means and
//! then maps the adjusted means through `A`.

use std::collections::HashSet;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linear_belief::{
    self, adjust_variance, check_coherence, psd_check, psd_check_scaled, pseudo_inverse,
    range_residual, symmetrize, symmetrize_checked, BeliefError, BeliefSpec, CoherenceVerdict, JointBelief,
    VariableSet, RANGE_TOL,
};

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error(transparent)]
    Belief(#[from] BeliefError),

    #[error("class structure is invalid: {0}")]
    InvalidStructure(String),

    #[error("class {0:?} has no model outputs")]
    EmptyClass(String),

    #[error("model outputs do not conform to the class structure: {0}")]
    NonConforming(String),

    #[error("joint prior over the quantity and class means is incoherent: {0}")]
    IncoherentPrior(CoherenceVerdict),

    #[error(
        "incoherent elicitation: Var(U) has eigenvalue {min_eigenvalue:.6e} below floor -{floor:.6e}; \
         the judgements claim the models are more informative than Var(X) allows"
    )]
    IncoherentElicitation { min_eigenvalue: f64, floor: f64 },
}

pub type Result<T> = std::result::Result<T, SynthesisError>;

// ---------------------------------------------------------------------------
// Class structure
// ---------------------------------------------------------------------------

/// Second-order specification of the class means and residuals together with
/// their covariance with the quantity of interest.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassStructure {
    quantity: VariableSet,
    class_labels: Vec<String>,
    counts: Vec<usize>,
    prevision_mu: DVector<f64>,
    var_mu: DMatrix<f64>,
    var_resid: Vec<DMatrix<f64>>,
    cov_x_mu: DMatrix<f64>,
}

impl ClassStructure {
    pub fn new(
        quantity: VariableSet,
        class_labels: Vec<String>,
        counts: Vec<usize>,
        prevision_mu: DVector<f64>,
        var_mu: DMatrix<f64>,
        var_resid: Vec<DMatrix<f64>>,
        cov_x_mu: DMatrix<f64>,
    ) -> Result<Self> {
        let q = quantity.len();
        let m = class_labels.len();
        let invalid = |msg: String| Err(SynthesisError::InvalidStructure(msg));
        if m == 0 {
            return invalid("no classes".into());
        }
        let mut seen = HashSet::new();
        for l in &class_labels {
            if !seen.insert(l.as_str()) {
                return invalid(format!("duplicate class label {l:?}"));
            }
        }
        if counts.len() != m {
            return invalid(format!("{} counts for {m} classes", counts.len()));
        }
        if let Some(i) = counts.iter().position(|&n| n == 0) {
            return invalid(format!("class {:?} has count 0", class_labels[i]));
        }
        if prevision_mu.len() != m * q {
            return invalid(format!("P(mu) has length {}, expected {}", prevision_mu.len(), m * q));
        }
        if var_mu.shape() != (m * q, m * q) {
            return invalid(format!("Var(mu) is {:?}, expected ({1}, {1})", var_mu.shape(), m * q));
        }
        if cov_x_mu.shape() != (q, m * q) {
            return invalid(format!("Cov(X,mu) is {:?}, expected ({q}, {})", cov_x_mu.shape(), m * q));
        }
        if var_resid.len() != m {
            return invalid(format!("{} residual variances for {m} classes", var_resid.len()));
        }
        let finite = |x: &f64| x.is_finite();
        if !prevision_mu.iter().all(finite) || !var_mu.iter().all(finite) || !cov_x_mu.iter().all(finite) {
            return invalid("non-finite entries".into());
        }

        let var_mu = symmetrize_checked(&var_mu, "Var(mu)");
        let check = psd_check(&var_mu);
        if !check.is_psd() {
            return invalid(format!("Var(mu) is indefinite (min eigenvalue {:.6e})", check.min_eigenvalue));
        }
        let mut resid_sym = Vec::with_capacity(m);
        for (i, r) in var_resid.iter().enumerate() {
            if r.shape() != (q, q) {
                return invalid(format!("Var(R) for class {:?} is {:?}", class_labels[i], r.shape()));
            }
            if !r.iter().all(finite) {
                return invalid(format!("Var(R) for class {:?} has non-finite entries", class_labels[i]));
            }
            let r = symmetrize_checked(r, "Var(R)");
            let check = psd_check(&r);
            if !check.is_psd() {
                return invalid(format!(
                    "Var(R) for class {:?} is indefinite (min eigenvalue {:.6e})",
                    class_labels[i], check.min_eigenvalue
                ));
            }
            resid_sym.push(r);
        }

        Ok(ClassStructure {
            quantity,
            class_labels,
            counts,
            prevision_mu,
            var_mu,
            var_resid: resid_sym,
            cov_x_mu,
        })
    }

    pub fn quantity(&self) -> &VariableSet {
        &self.quantity
    }

    pub fn q(&self) -> usize {
        self.quantity.len()
    }

    pub fn m(&self) -> usize {
        self.class_labels.len()
    }

    pub fn class_labels(&self) -> &[String] {
        &self.class_labels
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn prevision_mu(&self) -> &DVector<f64> {
        &self.prevision_mu
    }

    pub fn var_mu(&self) -> &DMatrix<f64> {
        &self.var_mu
    }

    pub fn var_resid(&self) -> &[DMatrix<f64>] {
        &self.var_resid
    }

    pub fn cov_x_mu(&self) -> &DMatrix<f64> {
        &self.cov_x_mu
    }

    /// Index range of class `i` in the stacked mean vector.
    pub fn block(&self, i: usize) -> Range<usize> {
        let q = self.q();
        i * q..(i + 1) * q
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.class_labels.iter().position(|l| l == label)
    }

    /// `Cov(mu_i, mu_k)`.
    pub fn mean_block(&self, i: usize, k: usize) -> DMatrix<f64> {
        let q = self.q();
        self.var_mu.view((i * q, k * q), (q, q)).into_owned()
    }

    /// `Cov(X, mu_i)`.
    pub fn quantity_block(&self, i: usize) -> DMatrix<f64> {
        let q = self.q();
        self.cov_x_mu.view((0, i * q), (q, q)).into_owned()
    }

    /// Same structure with different per-class counts.
    pub fn with_counts(&self, counts: Vec<usize>) -> Result<Self> {
        ClassStructure::new(
            self.quantity.clone(),
            self.class_labels.clone(),
            counts,
            self.prevision_mu.clone(),
            self.var_mu.clone(),
            self.var_resid.clone(),
            self.cov_x_mu.clone(),
        )
    }

    /// `Var(Z̄)`: `Var(mu)` plus `Var(R_i)/n_i` on the diagonal blocks.
    pub fn var_zbar(&self) -> DMatrix<f64> {
        self.var_zbar_scaled(1.0)
    }

    /// `Var(Z̄)` with every residual contribution multiplied by `scale`.
    pub fn var_zbar_scaled(&self, scale: f64) -> DMatrix<f64> {
        let q = self.q();
        let mut v = self.var_mu.clone();
        for (i, r) in self.var_resid.iter().enumerate() {
            let add = r * (scale / self.counts[i] as f64);
            let mut blk = v.view_mut((i * q, i * q), (q, q));
            blk += add;
        }
        v
    }

    /// Joint specification of `(X, mu)`.
    pub fn joint_with_quantity(&self, prior_x: &BeliefSpec) -> Result<JointBelief> {
        self.check_quantity(prior_x)?;
        Ok(JointBelief::new(
            prior_x.prevision().clone(),
            self.prevision_mu.clone(),
            prior_x.covariance().clone(),
            self.var_mu.clone(),
            self.cov_x_mu.clone(),
        )?)
    }

    /// The joint `(X, mu)` specification must be coherent.
    pub fn check_coherent_with(&self, prior_x: &BeliefSpec) -> Result<CoherenceVerdict> {
        let joint = self.joint_with_quantity(prior_x)?;
        Ok(check_coherence(&joint)?)
    }

    fn check_quantity(&self, prior_x: &BeliefSpec) -> Result<()> {
        if prior_x.variables().names() != self.quantity.names() {
            return Err(SynthesisError::InvalidStructure(format!(
                "prior variables {:?} differ from class structure variables {:?}",
                prior_x.variables().names(),
                self.quantity.names()
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Model outputs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelOutput {
    pub model_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassOutputs {
    pub label: String,
    pub models: Vec<ModelOutput>,
}

/// Observed model estimates grouped by class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelOutputBatch {
    pub variables: Vec<String>,
    pub classes: Vec<ClassOutputs>,
}

impl ModelOutputBatch {
    /// Per-class outputs in the order of `cs`, after checking labels, counts,
    /// dimensions and finiteness.
    pub fn conforming<'a>(&'a self, cs: &ClassStructure) -> Result<Vec<&'a ClassOutputs>> {
        let bad = |msg: String| Err(SynthesisError::NonConforming(msg));
        if self.variables.as_slice() != cs.quantity().names() {
            return bad(format!("batch variables {:?} differ from {:?}", self.variables, cs.quantity().names()));
        }
        if self.classes.len() != cs.m() {
            return bad(format!("batch has {} classes, structure has {}", self.classes.len(), cs.m()));
        }
        let mut ordered = Vec::with_capacity(cs.m());
        for (i, label) in cs.class_labels().iter().enumerate() {
            let class = self
                .classes
                .iter()
                .find(|c| &c.label == label)
                .ok_or_else(|| SynthesisError::NonConforming(format!("class {label:?} missing from batch")))?;
            if class.models.is_empty() {
                return Err(SynthesisError::EmptyClass(label.clone()));
            }
            if class.models.len() != cs.counts()[i] {
                return bad(format!(
                    "class {label:?} has {} outputs, structure expects {}",
                    class.models.len(),
                    cs.counts()[i]
                ));
            }
            for model in &class.models {
                if model.values.len() != cs.q() {
                    return bad(format!("model {:?} has {} values, expected {}", model.model_id, model.values.len(), cs.q()));
                }
                if !model.values.iter().all(|v| v.is_finite()) {
                    return bad(format!("model {:?} has non-finite values", model.model_id));
                }
            }
            ordered.push(class);
        }
        Ok(ordered)
    }

    pub fn model_count(&self) -> usize {
        self.classes.iter().map(|c| c.models.len()).sum()
    }
}

/// Stacked sample means and their second-order specification.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMeans {
    pub zbar: DVector<f64>,
    pub var_zbar: DMatrix<f64>,
    /// `Cov(mu, Z̄)`, which equals `Var(mu)`.
    pub cov_mu_zbar: DMatrix<f64>,
}

pub fn sample_means(cs: &ClassStructure, batch: &ModelOutputBatch) -> Result<SampleMeans> {
    let classes = batch.conforming(cs)?;
    let q = cs.q();
    let mut zbar = DVector::zeros(cs.m() * q);
    for (i, class) in classes.iter().enumerate() {
        let n = class.models.len() as f64;
        for l in 0..q {
            let sum: f64 = class.models.iter().map(|m| m.values[l]).sum();
            zbar[i * q + l] = sum / n;
        }
    }
    Ok(SampleMeans {
        zbar,
        var_zbar: cs.var_zbar(),
        cov_mu_zbar: cs.var_mu().clone(),
    })
}

// ---------------------------------------------------------------------------
// Weights
// ---------------------------------------------------------------------------

/// `A`, `P(U)` and `Var(U)` in `X = A mu + U`.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisWeights {
    /// `q x (m q)`, block row `(A_1, ..., A_m)`.
    pub a: DMatrix<f64>,
    pub prevision_u: DVector<f64>,
    pub var_u: DMatrix<f64>,
}

impl SynthesisWeights {
    /// Block `A_i`.
    pub fn block(&self, i: usize) -> DMatrix<f64> {
        let q = self.a.nrows();
        self.a.view((0, i * q), (q, q)).into_owned()
    }

    /// Evaluates `A mu + P(U)`.
    pub fn apply(&self, mu: &DVector<f64>) -> DVector<f64> {
        &self.a * mu + &self.prevision_u
    }
}

/// Derives `A = Cov(X,mu) Var(mu)†`, `P(U) = P(X) - A P(mu)` and
/// `Var(U) = Var(X) - A Var(mu) Aᵀ`.
///
/// When `Var(mu)` is rank deficient this is the minimum-norm solution.
pub fn derive_weights(prior_x: &BeliefSpec, cs: &ClassStructure) -> Result<SynthesisWeights> {
    cs.check_quantity(prior_x)?;
    let var_mu_pinv = pseudo_inverse(cs.var_mu())?;
    let cov_mu_x = cs.cov_x_mu().transpose();
    let residual = range_residual(cs.var_mu(), &cov_mu_x)?;
    let scale = cov_mu_x.amax().max((prior_x.covariance().amax() * cs.var_mu().amax()).sqrt());
    if residual > RANGE_TOL * scale {
        let verdict = check_coherence(&cs.joint_with_quantity(prior_x)?)?;
        return Err(SynthesisError::IncoherentPrior(verdict));
    }

    let a = cs.cov_x_mu() * &var_mu_pinv;
    let prevision_u = prior_x.prevision() - &a * cs.prevision_mu();
    let explained = &a * cs.var_mu() * a.transpose();
    let (var_u, _) = symmetrize(&(prior_x.covariance() - explained));
    let scale = prior_x.covariance().diagonal().amax();
    let check = psd_check_scaled(&var_u, scale);
    if !check.is_psd() {
        return Err(SynthesisError::IncoherentElicitation {
            min_eigenvalue: check.min_eigenvalue,
            floor: check.floor,
        });
    }
    Ok(SynthesisWeights { a, prevision_u, var_u })
}

// ---------------------------------------------------------------------------
// Assessment
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct PbaReport {
    pub variables: VariableSet,
    pub class_labels: Vec<String>,
    pub sample_means: DVector<f64>,
    /// `P_Z̄(mu)`, stacked class-major.
    pub adjusted_class_means: DVector<f64>,
    /// `P_𝒵(X)`.
    pub pba: DVector<f64>,
    /// `Var_𝒵(X)`.
    pub adjusted_var: DMatrix<f64>,
    pub prior_var_diag: DVector<f64>,
    pub resolved_pct: Vec<f64>,
    pub max_resolvable_pct: Vec<f64>,
    pub weights: SynthesisWeights,
}

impl PbaReport {
    pub fn q(&self) -> usize {
        self.variables.len()
    }

    /// Adjusted mean of class `i`.
    pub fn adjusted_class_mean(&self, i: usize) -> DVector<f64> {
        let q = self.q();
        self.adjusted_class_means.rows(i * q, q).into_owned()
    }
}

/// Adjusts the class means by `zbar` (with the given `Var(Z̄)`) and maps
/// them through the weights. Returns the adjusted means and the assessment.
fn assess(
    cs: &ClassStructure,
    weights: &SynthesisWeights,
    zbar: &DVector<f64>,
    var_zbar: &DMatrix<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if zbar.len() != var_zbar.nrows() || zbar.len() != cs.prevision_mu().len() {
        return Err(SynthesisError::NonConforming(format!(
            "sample means have length {}, expected {}",
            zbar.len(),
            cs.prevision_mu().len()
        )));
    }
    // (mu, Z̄) is coherent by construction: Var(Z̄) = Var(mu) + a PSD block
    // diagonal and Cov(mu, Z̄) = Var(mu). Re-testing it would only measure
    // cancellation in Var(mu) - Var(mu) Var(Z̄)† Var(mu) when the residual
    // variance is small.
    let adjusted_mu = cs.prevision_mu() + cs.var_mu() * (pseudo_inverse(var_zbar)? * (zbar - cs.prevision_mu()));
    let pba = weights.apply(&adjusted_mu);
    Ok((adjusted_mu, pba))
}

/// `Var_𝒵(X)`.
fn assessed_variance(prior_x: &BeliefSpec, cs: &ClassStructure, var_zbar: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    // Equal to the variance adjusted by Z̄ itself, since Cov(X, Z̄) = Cov(X, mu)
    // lies in the range of Var(mu). Adjusting by Z̄ avoids forming
    // Var(𝒵) = Var(mu) Var(Z̄)† Var(mu), which is badly conditioned when
    // Var(mu) is singular and the residuals are small.
    let by_zbar = JointBelief::new(
        prior_x.prevision().clone(),
        cs.prevision_mu().clone(),
        prior_x.covariance().clone(),
        var_zbar.clone(),
        cs.cov_x_mu().clone(),
    )?;
    Ok(adjust_variance(&by_zbar)?)
}

fn percent_resolved(remaining: &DVector<f64>, prior: &DVector<f64>) -> Vec<f64> {
    remaining
        .iter()
        .zip(prior.iter())
        .map(|(r, p)| if *p > 0.0 { (1.0 - r / p) * 100.0 } else { 0.0 })
        .collect()
}

/// The posterior belief assessment of `X` given the observed model outputs.
pub fn pba(prior_x: &BeliefSpec, cs: &ClassStructure, batch: &ModelOutputBatch) -> Result<PbaReport> {
    let weights = derive_weights(prior_x, cs)?;
    let means = sample_means(cs, batch)?;
    let (adjusted_mu, assessment) = assess(cs, &weights, &means.zbar, &means.var_zbar)?;
    let adjusted_var = assessed_variance(prior_x, cs, &means.var_zbar)?;
    let prior_var_diag = prior_x.covariance().diagonal();
    let resolved_pct = percent_resolved(&adjusted_var.diagonal(), &prior_var_diag);
    let max_resolvable_pct = percent_resolved(&weights.var_u.diagonal(), &prior_var_diag);
    Ok(PbaReport {
        variables: prior_x.variables().clone(),
        class_labels: cs.class_labels().to_vec(),
        sample_means: means.zbar,
        adjusted_class_means: adjusted_mu,
        pba: assessment,
        adjusted_var,
        prior_var_diag,
        resolved_pct,
        max_resolvable_pct,
        weights,
    })
}

// ---------------------------------------------------------------------------
// Dominance
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominanceRow {
    pub class_label: String,
    pub model_id: String,
    /// Prior-quantified squared distance `||X - Z_ij||²` per variable.
    pub distance: Vec<f64>,
    /// `||X - Z_ij||² - ||X - P_𝒵(X)||²` per variable.
    pub margin: Vec<f64>,
    pub dominated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominanceTable {
    /// `||X - P_𝒵(X)||²` per variable (the adjusted variance diagonal).
    pub pba_distance: Vec<f64>,
    pub rows: Vec<DominanceRow>,
}

impl DominanceTable {
    pub fn holds(&self) -> bool {
        self.rows.iter().all(|r| r.dominated)
    }
}

/// Compares the assessment with every individual model output under the
/// prior mean-squared distance.
pub fn dominance_check(prior_x: &BeliefSpec, cs: &ClassStructure, batch: &ModelOutputBatch) -> Result<DominanceTable> {
    let report = pba(prior_x, cs, batch)?;
    let classes = batch.conforming(cs)?;
    let q = cs.q();
    let var_x = prior_x.covariance();
    let pba_distance: Vec<f64> = report.adjusted_var.diagonal().iter().copied().collect();
    let mut rows = Vec::new();
    for (i, class) in classes.iter().enumerate() {
        let var_mu_i = cs.mean_block(i, i);
        let cov_x_mu_i = cs.quantity_block(i);
        let var_r = &cs.var_resid()[i];
        let mut distance = Vec::with_capacity(q);
        for l in 0..q {
            let var_z = var_mu_i[(l, l)] + var_r[(l, l)];
            let bias = prior_x.prevision()[l] - cs.prevision_mu()[i * q + l];
            distance.push(var_x[(l, l)] + var_z - 2.0 * cov_x_mu_i[(l, l)] + bias * bias);
        }
        let margin: Vec<f64> = distance.iter().zip(&pba_distance).map(|(d, p)| d - p).collect();
        let dominated = margin
            .iter()
            .enumerate()
            .all(|(l, mg)| *mg >= -linear_belief::PSD_TOL * var_x[(l, l)].abs().max(distance[l].abs()));
        for model in &class.models {
            rows.push(DominanceRow {
                class_label: class.label.clone(),
                model_id: model.model_id.clone(),
                distance: distance.clone(),
                margin: margin.clone(),
                dominated,
            });
        }
    }
    Ok(DominanceTable { pba_distance, rows })
}

// ---------------------------------------------------------------------------
// Convergence
// ---------------------------------------------------------------------------

/// Residual scale factors used by the convergence diagnostic.
pub const CONVERGENCE_SCALES: [f64; 4] = [1.0, 1e-2, 1e-4, 1e-6];

/// Limit of the assessment as every class count grows without bound.
#[derive(Debug, Clone)]
pub struct ConvergenceLimit {
    cs: ClassStructure,
    weights: SynthesisWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceDiagnostic {
    pub limit: DVector<f64>,
    pub scales: Vec<f64>,
    pub assessments: Vec<DVector<f64>>,
    /// Euclidean distance from each assessment to the limit.
    pub distances: Vec<f64>,
}

impl ConvergenceDiagnostic {
    pub fn is_monotone(&self) -> bool {
        let slack = 1e-9 * self.limit.amax().max(1.0);
        self.distances.windows(2).all(|w| w[1] <= w[0] + slack)
    }
}

impl ConvergenceLimit {
    pub fn weights(&self) -> &SynthesisWeights {
        &self.weights
    }

    /// `A mu* + P(U)`.
    pub fn limit(&self, mu_star: &DVector<f64>) -> DVector<f64> {
        self.weights.apply(mu_star)
    }

    /// Assessments with the sample means fixed at `mu_star` and the residual
    /// variance contribution shrunk by each of [`CONVERGENCE_SCALES`].
    pub fn diagnostic(&self, mu_star: &DVector<f64>) -> Result<ConvergenceDiagnostic> {
        if mu_star.len() != self.cs.m() * self.cs.q() {
            return Err(SynthesisError::NonConforming(format!(
                "mu* has length {}, expected {}",
                mu_star.len(),
                self.cs.m() * self.cs.q()
            )));
        }
        let limit = self.limit(mu_star);
        let mut assessments = Vec::new();
        let mut distances = Vec::new();
        for &scale in &CONVERGENCE_SCALES {
            let var_zbar = self.cs.var_zbar_scaled(scale);
            let (_, assessment) = assess(&self.cs, &self.weights, mu_star, &var_zbar)?;
            distances.push((&assessment - &limit).norm());
            assessments.push(assessment);
        }
        Ok(ConvergenceDiagnostic {
            limit,
            scales: CONVERGENCE_SCALES.to_vec(),
            assessments,
            distances,
        })
    }
}

pub fn convergence_limit(prior_x: &BeliefSpec, cs: &ClassStructure) -> Result<ConvergenceLimit> {
    let weights = derive_weights(prior_x, cs)?;
    Ok(ConvergenceLimit {
        cs: cs.clone(),
        weights,
    })
}
