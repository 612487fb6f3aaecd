//! JSON document types persisted by the workbench.
//!
//! Every document carries `schema_version` and `kind`. Matrices are stored
//! row-major as arrays of rows, with the variable order (and for class means
//! the class-major element order) embedded in the document. Serialization is
//! pretty-printed JSON with a trailing newline; since `f64` values are written
//! in shortest round-trip form, `to_bytes(from_bytes(b)) == b` for any bytes
//! written by this module.

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::elicitation::{ClassElicitation, CompletionMode, SessionStatus, SessionTranscript};
use crate::linear_belief::{BeliefError, BeliefSpec, VariableSet};
use crate::synthesis::{
    ClassOutputs, ClassStructure, DominanceTable, ModelOutputBatch, PbaReport, SynthesisError,
};

pub const SCHEMA_VERSION: u32 = 1;

pub type Matrix = Vec<Vec<f64>>;

#[derive(Debug, Error)]
pub enum DocumentError {
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),

    #[error("unsupported schema_version {0}")]
    Version(u32),

    #[error("expected a {expected:?} document, found {found:?}")]
    Kind { expected: &'static str, found: String },

    #[error("document is inconsistent: {0}")]
    Schema(String),

    #[error(transparent)]
    Belief(#[from] BeliefError),

    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
}

pub type Result<T> = std::result::Result<T, DocumentError>;

/// A persisted document type.
pub trait Document: Serialize + DeserializeOwned {
    const KIND: &'static str;
}

macro_rules! document {
    ($ty:ty, $kind:literal) => {
        impl Document for $ty {
            const KIND: &'static str = $kind;
        }
    };
}

pub fn to_bytes<D: Document>(doc: &D) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(doc).expect("documents always serialize");
    out.push(b'\n');
    out
}

#[derive(Deserialize)]
struct Header {
    schema_version: u32,
    kind: String,
}

pub fn from_bytes<D: Document>(bytes: &[u8]) -> Result<D> {
    let header: Header = serde_json::from_slice(bytes)?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(DocumentError::Version(header.schema_version));
    }
    if header.kind != D::KIND {
        return Err(DocumentError::Kind {
            expected: D::KIND,
            found: header.kind,
        });
    }
    Ok(serde_json::from_slice(bytes)?)
}

pub fn matrix_rows(m: &DMatrix<f64>) -> Matrix {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn matrix_from_rows(rows: &Matrix, nrows: usize, ncols: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(DocumentError::Schema(format!("{what} must be {nrows} x {ncols}")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

fn vector(v: &[f64], len: usize, what: &str) -> Result<DVector<f64>> {
    if v.len() != len {
        return Err(DocumentError::Schema(format!("{what} has length {}, expected {len}", v.len())));
    }
    Ok(DVector::from_column_slice(v))
}

fn split_blocks(v: &DVector<f64>, q: usize) -> Matrix {
    v.as_slice().chunks(q).map(|c| c.to_vec()).collect()
}

/// Labels of the stacked class means, `"<class>:<variable>"`.
pub fn mean_order(class_labels: &[String], variables: &[String]) -> Vec<String> {
    class_labels
        .iter()
        .flat_map(|c| variables.iter().map(move |v| format!("{c}:{v}")))
        .collect()
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorDocument {
    pub schema_version: u32,
    pub kind: String,
    pub variables: VariableSet,
    pub prevision: Vec<f64>,
    pub covariance: Matrix,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<String>,
}
document!(PriorDocument, "prior");

impl PriorDocument {
    pub fn from_spec(spec: &BeliefSpec, provenance: Option<String>) -> Self {
        PriorDocument {
            schema_version: SCHEMA_VERSION,
            kind: Self::KIND.into(),
            variables: spec.variables().clone(),
            prevision: spec.prevision().iter().copied().collect(),
            covariance: matrix_rows(spec.covariance()),
            provenance,
        }
    }

    pub fn to_spec(&self) -> Result<BeliefSpec> {
        let q = self.variables.len();
        Ok(BeliefSpec::new(
            self.variables.clone(),
            vector(&self.prevision, q, "prevision")?,
            matrix_from_rows(&self.covariance, q, q, "covariance")?,
        )?)
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDocument {
    pub schema_version: u32,
    pub kind: String,
    pub variables: VariableSet,
    pub class_labels: Vec<String>,
    pub counts: Vec<usize>,
    pub mean_order: Vec<String>,
    pub prevision_mu: Vec<f64>,
    pub var_mu: Matrix,
    pub var_resid: Vec<Matrix>,
    pub cov_x_mu: Matrix,
    /// Inputs the structure was built from, needed for what-if edits.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elicitation: Option<ClassElicitation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion: Option<CompletionMode>,
}
document!(ClassDocument, "class_structure");

impl ClassDocument {
    pub fn from_structure(
        cs: &ClassStructure,
        elicitation: Option<ClassElicitation>,
        completion: Option<CompletionMode>,
    ) -> Self {
        ClassDocument {
            schema_version: SCHEMA_VERSION,
            kind: Self::KIND.into(),
            variables: cs.quantity().clone(),
            class_labels: cs.class_labels().to_vec(),
            counts: cs.counts().to_vec(),
            mean_order: mean_order(cs.class_labels(), cs.quantity().names()),
            prevision_mu: cs.prevision_mu().iter().copied().collect(),
            var_mu: matrix_rows(cs.var_mu()),
            var_resid: cs.var_resid().iter().map(matrix_rows).collect(),
            cov_x_mu: matrix_rows(cs.cov_x_mu()),
            elicitation,
            completion,
        }
    }

    pub fn to_structure(&self) -> Result<ClassStructure> {
        let q = self.variables.len();
        let m = self.class_labels.len();
        if self.mean_order != mean_order(&self.class_labels, self.variables.names()) {
            return Err(DocumentError::Schema(
                "mean_order does not match class-major stacking of class_labels x variables".into(),
            ));
        }
        if self.var_resid.len() != m {
            return Err(DocumentError::Schema(format!("{} residual blocks for {m} classes", self.var_resid.len())));
        }
        let var_resid = self
            .var_resid
            .iter()
            .map(|r| matrix_from_rows(r, q, q, "var_resid"))
            .collect::<Result<Vec<_>>>()?;
        Ok(ClassStructure::new(
            self.variables.clone(),
            self.class_labels.clone(),
            self.counts.clone(),
            vector(&self.prevision_mu, m * q, "prevision_mu")?,
            matrix_from_rows(&self.var_mu, m * q, m * q, "var_mu")?,
            var_resid,
            matrix_from_rows(&self.cov_x_mu, q, m * q, "cov_x_mu")?,
        )?)
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchDocument {
    pub schema_version: u32,
    pub kind: String,
    pub variables: Vec<String>,
    pub classes: Vec<ClassOutputs>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}
document!(BatchDocument, "model_outputs");

impl BatchDocument {
    pub fn from_batch(batch: &ModelOutputBatch, source: Option<String>) -> Self {
        BatchDocument {
            schema_version: SCHEMA_VERSION,
            kind: Self::KIND.into(),
            variables: batch.variables.clone(),
            classes: batch.classes.clone(),
            source,
        }
    }

    pub fn to_batch(&self) -> ModelOutputBatch {
        ModelOutputBatch {
            variables: self.variables.clone(),
            classes: self.classes.clone(),
        }
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputRef {
    pub id: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportInputs {
    pub prior: InputRef,
    pub class_structure: InputRef,
    pub batch: InputRef,
}

/// Sparse edit of the class elicitation used by what-if runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Override {
    /// `Corr(X_l, mu_il)`.
    QuantityCorrelation { class: String, variable: String, value: f64 },
    /// `Corr(mu_il, mu_kl)`.
    MeanCorrelation {
        first: String,
        second: String,
        variable: String,
        value: f64,
    },
    /// `Var(mu_i)` as a percentage of `Var(X)`.
    MeanFraction { class: String, value: f64 },
    /// `Var(R_ij)` as a percentage of `Var(X)`.
    ResidualFraction { class: String, value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsDocument {
    /// `A_i` per class.
    pub a: Vec<Matrix>,
    pub prevision_u: Vec<f64>,
    pub var_u: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub schema_version: u32,
    pub kind: String,
    pub inputs: ReportInputs,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub overrides: Vec<Override>,
    pub variables: Vec<String>,
    pub class_labels: Vec<String>,
    /// Per-class sample means.
    pub sample_means: Matrix,
    /// Per-class adjusted means.
    pub adjusted_class_means: Matrix,
    pub pba: Vec<f64>,
    pub adjusted_variance: Matrix,
    pub prior_variance: Vec<f64>,
    pub resolved_pct: Vec<f64>,
    pub max_resolvable_pct: Vec<f64>,
    pub weights: WeightsDocument,
    pub dominance: DominanceTable,
}
document!(ReportDocument, "pba_report");

impl ReportDocument {
    pub fn new(inputs: ReportInputs, overrides: Vec<Override>, report: &PbaReport, dominance: DominanceTable) -> Self {
        let q = report.q();
        ReportDocument {
            schema_version: SCHEMA_VERSION,
            kind: Self::KIND.into(),
            inputs,
            overrides,
            variables: report.variables.names().to_vec(),
            class_labels: report.class_labels.clone(),
            sample_means: split_blocks(&report.sample_means, q),
            adjusted_class_means: split_blocks(&report.adjusted_class_means, q),
            pba: report.pba.iter().copied().collect(),
            adjusted_variance: matrix_rows(&report.adjusted_var),
            prior_variance: report.prior_var_diag.iter().copied().collect(),
            resolved_pct: report.resolved_pct.clone(),
            max_resolvable_pct: report.max_resolvable_pct.clone(),
            weights: WeightsDocument {
                a: (0..report.class_labels.len())
                    .map(|i| matrix_rows(&report.weights.block(i)))
                    .collect(),
                prevision_u: report.weights.prevision_u.iter().copied().collect(),
                var_u: matrix_rows(&report.weights.var_u),
            },
            dominance,
        }
    }

    pub fn adjusted_variance_diag(&self) -> Vec<f64> {
        self.adjusted_variance.iter().enumerate().map(|(i, r)| r[i]).collect()
    }

    pub fn discrepancy_variance_diag(&self) -> Vec<f64> {
        self.weights.var_u.iter().enumerate().map(|(i, r)| r[i]).collect()
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionDocument {
    pub schema_version: u32,
    pub kind: String,
    pub id: String,
    pub status: SessionStatus,
    pub transcript: SessionTranscript,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_id: Option<String>,
}
document!(SessionDocument, "elicitation_session");

impl SessionDocument {
    pub fn new(id: String, status: SessionStatus, transcript: SessionTranscript, prior_id: Option<String>) -> Self {
        SessionDocument {
            schema_version: SCHEMA_VERSION,
            kind: Self::KIND.into(),
            id,
            status,
            transcript,
            prior_id,
        }
    }
}
