//! Regional Omicron case-count fixtures.
//!
//! Nine UK regions, four epidemic models in three classes. The fixtures hold
//! the elicited prior, the conditional-prevision answers used to build its
//! correlation structure, the class correlation tables and variance
//! fractions, the model outputs, and the published results used as checks.
//! Values marked as derived in the fixtures were reconstructed, not printed.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::elicitation::{
    complete_by_separation, preference_rules, scale_class_covariances, ClassElicitation, ElicitationError,
    SessionTranscript,
};
use crate::linear_belief::{BeliefSpec, VariableSet};
use crate::synthesis::{ClassStructure, ModelOutputBatch, SynthesisWeights};
use crate::workbench::documents::{self, Matrix, PriorDocument};
use crate::workbench::ingest::{self, DeclaredModel};

pub const REGIONS: [&str; 9] = ["L", "SE", "NW", "E", "EM", "WM", "Y", "NE", "SW"];

pub const PRIOR_JSON: &str = include_str!("../fixtures/case_study/prior_x.json");
pub const KADANE_JSON: &str = include_str!("../fixtures/case_study/kadane_session.json");
pub const CLASS_ELICITATION_JSON: &str = include_str!("../fixtures/case_study/class_elicitation.json");
pub const MODEL_OUTPUTS_CSV: &str = include_str!("../fixtures/case_study/model_outputs.csv");
pub const PUBLISHED_JSON: &str = include_str!("../fixtures/case_study/published.json");

/// Recorded answers for the conditional-prevision elicitation of `Var(X)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KadaneFixture {
    pub transcript: SessionTranscript,
    pub published_hypotheticals: Vec<f64>,
    /// `"published"` or `"derived"` per step.
    pub conditional_variance_source: Vec<String>,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublishedAssessment {
    /// Adjusted class means, one row per class.
    pub adjusted_class_means: Matrix,
    pub pba: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublishedVariances {
    pub adjusted_variance: Vec<f64>,
    pub prior_variance: Vec<f64>,
    pub discrepancy_variance: Vec<f64>,
    pub resolved_pct: Vec<f64>,
    pub max_resolvable_pct: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublishedWeights {
    /// `A_i` per class.
    pub a: Vec<Matrix>,
    pub prevision_u: Vec<f64>,
}

impl PublishedWeights {
    /// `(A_1, ..., A_m)` as one block row.
    pub fn block_row(&self) -> DMatrix<f64> {
        let q = self.prevision_u.len();
        let m = self.a.len();
        DMatrix::from_fn(q, m * q, |r, c| self.a[c / q][r][c % q])
    }
}

/// Published results, transcribed at their printed precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Published {
    pub variables: Vec<String>,
    pub prior_covariance: Matrix,
    pub assessment: PublishedAssessment,
    pub variances: PublishedVariances,
    pub hypotheticals: Vec<f64>,
    pub elicited_correlation: Matrix,
    pub weights: PublishedWeights,
}

pub fn variables() -> VariableSet {
    VariableSet::uniform(&REGIONS, "cases", true).expect("static regions")
}

pub fn prior_document() -> PriorDocument {
    documents::from_bytes(PRIOR_JSON.as_bytes()).expect("shipped prior fixture parses")
}

pub fn prior() -> BeliefSpec {
    prior_document().to_spec().expect("shipped prior fixture is coherent")
}

pub fn kadane() -> KadaneFixture {
    serde_json::from_str(KADANE_JSON).expect("shipped elicitation fixture parses")
}

pub fn class_elicitation() -> ClassElicitation {
    serde_json::from_str(CLASS_ELICITATION_JSON).expect("shipped class fixture parses")
}

pub fn published() -> Published {
    serde_json::from_str(PUBLISHED_JSON).expect("shipped published fixture parses")
}

pub fn declared_models() -> Vec<DeclaredModel> {
    [("1", "M1"), ("2", "M2"), ("2", "M3"), ("3", "M4")]
        .iter()
        .map(|(c, m)| DeclaredModel {
            class: c.to_string(),
            model_id: m.to_string(),
        })
        .collect()
}

pub fn model_outputs() -> ModelOutputBatch {
    ingest::parse_outputs(MODEL_OUTPUTS_CSV.as_bytes(), &variables(), &declared_models())
        .expect("shipped model outputs parse")
}

/// Class structure from the correlation tables, completed by separation with
/// the region preference ordering.
pub fn class_structure() -> Result<ClassStructure, ElicitationError> {
    let partial = scale_class_covariances(&prior(), &class_elicitation())?;
    complete_by_separation(&partial, &preference_rules(&partial))
}

/// The published weights as a [`SynthesisWeights`] with no discrepancy
/// variance (which is not printed in full).
pub fn published_weights() -> SynthesisWeights {
    let p = published();
    let q = p.variables.len();
    SynthesisWeights {
        a: p.weights.block_row(),
        prevision_u: DVector::from_vec(p.weights.prevision_u.clone()),
        var_u: DMatrix::zeros(q, q),
    }
}

/// Published adjusted class means stacked class-major.
pub fn published_adjusted_means() -> DVector<f64> {
    let p = published();
    DVector::from_iterator(
        p.assessment.adjusted_class_means.len() * p.variables.len(),
        p.assessment.adjusted_class_means.iter().flatten().copied(),
    )
}
