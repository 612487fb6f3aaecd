//! Iterative conditional-prevision elicitation of a covariance matrix.
//!
//! Variable `k` is elicited by asking for its prevision conditional on the
//! first `j` variables taking hypothetical values `N_1..N_j`, for every
//! `j = 1..k`. Writing `Cov(X_k, X_{1:k-1}) = (U g)ᵀ`, those answers give a
//! square system in `g`; the conditional variance then fixes
//! `Var(X_k) = condvar + gᵀ U g` and the matrix grows by one row and column.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{ElicitationError, Result};
use crate::linear_belief::{correlation_from_covariance, psd_check_scaled, BeliefSpec, VariableSet};

/// Relative singular-value floor below which the conditioning system is
/// declared degenerate.
const CONDITIONING_TOL: f64 = 1e-12;

/// How the hypothetical value of a completed variable is chosen:
/// latest conditional prevision plus `multiplier` conditional standard
/// deviations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HypotheticalPolicy {
    pub multiplier: f64,
}

impl Default for HypotheticalPolicy {
    fn default() -> Self {
        HypotheticalPolicy { multiplier: 0.5 }
    }
}

impl HypotheticalPolicy {
    /// Rounded half away from zero when `integral`.
    pub fn hypothetical(&self, prevision: f64, variance: f64, integral: bool) -> f64 {
        let n = prevision + self.multiplier * variance.max(0.0).sqrt();
        if integral {
            n.round()
        } else {
            n
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    InProgress,
    Finalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GivenValue {
    pub variable: String,
    pub value: f64,
}

/// What the expert must supply next.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QuestionPrompt {
    /// `P(X_k | X_1..X_j = N_1..N_j)` for each listed conditioning set, the
    /// conditional variance given all of them, and the unconditional
    /// prevision of `X_k`.
    ConditionalPrevisions {
        step: usize,
        variable: String,
        unit: String,
        hypotheticals: Vec<GivenValue>,
        conditioning: Vec<Vec<GivenValue>>,
        questions: Vec<String>,
    },
    /// Every variable has been elicited; directly assessed marginal variances
    /// are needed to rescale.
    MarginalVariances {
        variables: Vec<String>,
        elicited_variances: Vec<f64>,
    },
}

/// Answers for one variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepAnswers {
    pub conditional_previsions: Vec<f64>,
    pub conditional_variance: f64,
    pub prior_prevision: f64,
}

/// Result of an accepted step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub step: usize,
    pub variable: String,
    pub g: Vec<f64>,
    pub variance: f64,
    /// Covariances with the previously elicited variables.
    pub covariances: Vec<f64>,
    pub hypothetical: Option<f64>,
    pub min_eigenvalue: f64,
    pub status: SessionStatus,
}

/// Everything needed to rebuild a session deterministically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionTranscript {
    pub variables: VariableSet,
    pub policy: HypotheticalPolicy,
    pub first_prevision: f64,
    pub first_variance: f64,
    pub steps: Vec<StepAnswers>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub marginal_variances: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct ElicitationSession {
    variables: VariableSet,
    policy: HypotheticalPolicy,
    first_prevision: f64,
    first_variance: f64,
    previsions: Vec<f64>,
    u: DMatrix<f64>,
    g_history: Vec<DVector<f64>>,
    hypotheticals: Vec<f64>,
    steps: Vec<StepAnswers>,
    marginal_variances: Option<Vec<f64>>,
    result: Option<BeliefSpec>,
}

fn check_finite(x: f64, what: &str) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(ElicitationError::InvalidInput(format!("{what} is not finite")))
    }
}

pub fn start_session(
    variables: VariableSet,
    first_prevision: f64,
    first_variance: f64,
    policy: HypotheticalPolicy,
) -> Result<ElicitationSession> {
    check_finite(first_prevision, "first prevision")?;
    check_finite(first_variance, "first variance")?;
    if first_variance <= 0.0 {
        return Err(ElicitationError::InvalidInput(format!("first variance {first_variance} must be positive")));
    }
    if variables.is_empty() {
        return Err(ElicitationError::InvalidInput("no variables".into()));
    }
    if !policy.multiplier.is_finite() || policy.multiplier <= 0.0 {
        return Err(ElicitationError::InvalidInput(format!(
            "hypothetical multiplier {} must be positive",
            policy.multiplier
        )));
    }
    let mut hypotheticals = Vec::new();
    if variables.len() > 1 {
        hypotheticals.push(policy.hypothetical(first_prevision, first_variance, variables.is_integral(0)));
    }
    Ok(ElicitationSession {
        variables,
        policy,
        first_prevision,
        first_variance,
        previsions: vec![first_prevision],
        u: DMatrix::from_element(1, 1, first_variance),
        g_history: Vec::new(),
        hypotheticals,
        steps: Vec::new(),
        marginal_variances: None,
        result: None,
    })
}

impl ElicitationSession {
    pub fn variables(&self) -> &VariableSet {
        &self.variables
    }

    pub fn policy(&self) -> HypotheticalPolicy {
        self.policy
    }

    /// Number of variables elicited so far.
    pub fn elicited(&self) -> usize {
        self.u.nrows()
    }

    pub fn status(&self) -> SessionStatus {
        if self.result.is_some() {
            SessionStatus::Finalized
        } else {
            SessionStatus::InProgress
        }
    }

    /// The running (unrescaled) covariance matrix.
    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.u
    }

    pub fn g_history(&self) -> &[DVector<f64>] {
        &self.g_history
    }

    pub fn hypotheticals(&self) -> &[f64] {
        &self.hypotheticals
    }

    pub fn previsions(&self) -> &[f64] {
        &self.previsions
    }

    pub fn result(&self) -> Option<&BeliefSpec> {
        self.result.as_ref()
    }

    pub fn next_question(&self) -> Result<QuestionPrompt> {
        if self.result.is_some() {
            return Err(ElicitationError::SessionClosed);
        }
        let k = self.elicited();
        if k == self.variables.len() {
            return Ok(QuestionPrompt::MarginalVariances {
                variables: self.variables.names().to_vec(),
                elicited_variances: self.u.diagonal().iter().copied().collect(),
            });
        }
        let given: Vec<GivenValue> = (0..k)
            .map(|j| GivenValue {
                variable: self.variables.name(j).to_string(),
                value: self.hypotheticals[j],
            })
            .collect();
        let conditioning: Vec<Vec<GivenValue>> = (1..=k).map(|j| given[..j].to_vec()).collect();
        let target = self.variables.name(k);
        let unit = self.variables.unit(k);
        let questions = conditioning
            .iter()
            .map(|set| {
                let cond = set
                    .iter()
                    .map(|g| format!("{}={}", g.variable, g.value))
                    .collect::<Vec<_>>()
                    .join(", ");
                format!("Expected {target} given {cond}?")
            })
            .chain(std::iter::once(format!(
                "Variance of {target} given all of the above, and its unconditional expectation?"
            )))
            .collect();
        Ok(QuestionPrompt::ConditionalPrevisions {
            step: k,
            variable: target.to_string(),
            unit: unit.to_string(),
            hypotheticals: given,
            conditioning,
            questions,
        })
    }

    /// Accepts the answers for the next variable. The session is unchanged
    /// when an error is returned.
    pub fn submit_answers(&mut self, answers: StepAnswers) -> Result<StepSummary> {
        if self.result.is_some() {
            return Err(ElicitationError::SessionClosed);
        }
        let k = self.elicited();
        if k == self.variables.len() {
            return Err(ElicitationError::InvalidInput(
                "all variables elicited; finalize with marginal variances".into(),
            ));
        }
        let variable = self.variables.name(k).to_string();
        if answers.conditional_previsions.len() != k {
            return Err(ElicitationError::InvalidInput(format!(
                "{variable}: {} conditional previsions supplied, {k} required",
                answers.conditional_previsions.len()
            )));
        }
        for c in &answers.conditional_previsions {
            check_finite(*c, "conditional prevision")?;
        }
        check_finite(answers.prior_prevision, "prior prevision")?;
        check_finite(answers.conditional_variance, "conditional variance")?;
        if answers.conditional_variance <= 0.0 {
            return Err(ElicitationError::InvalidInput(format!(
                "{variable}: conditional variance {} must be positive",
                answers.conditional_variance
            )));
        }

        let degenerate = |detail: String| ElicitationError::DegenerateConditioning {
            variable: variable.clone(),
            detail,
        };
        let shift = DVector::from_fn(k, |j, _| self.hypotheticals[j] - self.previsions[j]);

        // Row j: Cov(X_k, X_{1:k-1}) coefficients of g implied by conditioning on X_{1:j+1}.
        let mut m = DMatrix::zeros(k, k);
        for j in 0..k {
            let ub = self.u.view((0, 0), (j + 1, j + 1)).into_owned();
            let chol = ub
                .cholesky()
                .ok_or_else(|| degenerate(format!("leading {} block is not positive definite", j + 1)))?;
            let w = chol.solve(&shift.rows(0, j + 1).into_owned());
            let row = self.u.columns(0, j + 1) * w;
            m.set_row(j, &row.transpose());
        }
        let sv = m.singular_values();
        let smax = sv.max();
        if smax <= 0.0 || sv.min() <= CONDITIONING_TOL * smax {
            return Err(degenerate(format!(
                "singular values range {:.3e}..{:.3e}; a hypothetical equals its prevision",
                sv.min(),
                smax
            )));
        }
        let rhs = DVector::from_iterator(
            k,
            answers.conditional_previsions.iter().map(|c| c - answers.prior_prevision),
        );
        let g = m.lu().solve(&rhs).ok_or_else(|| degenerate("LU solve failed".into()))?;

        let column = &self.u * &g;
        let variance = answers.conditional_variance + g.dot(&column);
        let mut u = self.u.clone().resize(k + 1, k + 1, 0.0);
        for i in 0..k {
            u[(i, k)] = column[i];
            u[(k, i)] = column[i];
        }
        u[(k, k)] = variance;

        let check = psd_check_scaled(&u, u.diagonal().amax());
        if !check.is_pd() {
            return Err(ElicitationError::IncoherentStep {
                variable,
                margin: check.min_eigenvalue,
                floor: check.floor,
            });
        }

        let hypothetical = if k + 1 < self.variables.len() {
            let latest = *answers.conditional_previsions.last().unwrap_or(&answers.prior_prevision);
            Some(self.policy.hypothetical(latest, answers.conditional_variance, self.variables.is_integral(k)))
        } else {
            None
        };

        self.u = u;
        self.previsions.push(answers.prior_prevision);
        self.g_history.push(g.clone());
        if let Some(n) = hypothetical {
            self.hypotheticals.push(n);
        }
        self.steps.push(answers);

        Ok(StepSummary {
            step: k,
            variable,
            g: g.iter().copied().collect(),
            variance,
            covariances: column.iter().copied().collect(),
            hypothetical,
            min_eigenvalue: check.min_eigenvalue,
            status: self.status(),
        })
    }

    /// Rescales the elicited correlation structure by directly assessed
    /// marginal variances and closes the session.
    pub fn finalize(&mut self, marginal_variances: &[f64]) -> Result<BeliefSpec> {
        if self.result.is_some() {
            return Err(ElicitationError::SessionClosed);
        }
        let q = self.variables.len();
        if self.elicited() != q {
            return Err(ElicitationError::InvalidInput(format!(
                "{} of {q} variables elicited",
                self.elicited()
            )));
        }
        if marginal_variances.len() != q {
            return Err(ElicitationError::InvalidInput(format!(
                "{} marginal variances supplied, {q} required",
                marginal_variances.len()
            )));
        }
        if let Some(v) = marginal_variances.iter().find(|v| !v.is_finite() || **v <= 0.0) {
            return Err(ElicitationError::InvalidInput(format!("marginal variance {v} must be positive")));
        }
        let corr = correlation_from_covariance(&self.u);
        let sd: Vec<f64> = marginal_variances.iter().map(|v| v.sqrt()).collect();
        let cov = DMatrix::from_fn(q, q, |i, j| {
            if i == j {
                marginal_variances[i]
            } else {
                corr[(i, j)] * sd[i] * sd[j]
            }
        });
        let spec = BeliefSpec::new(self.variables.clone(), DVector::from_vec(self.previsions.clone()), cov)
            .map_err(|e| ElicitationError::IncoherentElicitation(format!("rescaled covariance: {e}")))?;
        self.marginal_variances = Some(marginal_variances.to_vec());
        self.result = Some(spec.clone());
        Ok(spec)
    }

    pub fn transcript(&self) -> SessionTranscript {
        SessionTranscript {
            variables: self.variables.clone(),
            policy: self.policy,
            first_prevision: self.first_prevision,
            first_variance: self.first_variance,
            steps: self.steps.clone(),
            marginal_variances: self.marginal_variances.clone(),
        }
    }
}

impl SessionTranscript {
    /// Rebuilds the session by resubmitting every recorded answer.
    pub fn replay(&self) -> Result<ElicitationSession> {
        let mut s = start_session(self.variables.clone(), self.first_prevision, self.first_variance, self.policy)?;
        for step in &self.steps {
            s.submit_answers(step.clone())?;
        }
        if let Some(mv) = &self.marginal_variances {
            s.finalize(mv)?;
        }
        Ok(s)
    }
}

/// Answers a perfectly consistent expert would give for variable `k` of a
/// known covariance matrix, given the session's hypotheticals so far.
pub fn consistent_answers(
    cov: &DMatrix<f64>,
    previsions: &[f64],
    hypotheticals: &[f64],
    k: usize,
) -> StepAnswers {
    let mut c = Vec::with_capacity(k);
    for j in 1..=k {
        let block = cov.view((0, 0), (j, j)).into_owned();
        let shift = DVector::from_fn(j, |i, _| hypotheticals[i] - previsions[i]);
        let w = block.cholesky().expect("positive definite").solve(&shift);
        let cross = cov.view((k, 0), (1, j));
        c.push(previsions[k] + (cross * w)[0]);
    }
    let block = cov.view((0, 0), (k, k)).into_owned();
    let cross = cov.view((0, k), (k, 1)).into_owned();
    let cond_var = if k == 0 {
        cov[(0, 0)]
    } else {
        let w = block.cholesky().expect("positive definite").solve(&cross);
        cov[(k, k)] - (cross.transpose() * w)[0]
    };
    StepAnswers {
        conditional_previsions: c,
        conditional_variance: cond_var,
        prior_prevision: previsions[k],
    }
}
