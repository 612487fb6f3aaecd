//! Building coherent prior specifications.
//!
//! [`kadane`] grows a positive definite covariance matrix one variable at a
//! time from conditional previsions at hypothetical values. [`classes`] turns
//! per-class correlation tables and variance fractions into a class structure
//! and completes the unelicited cross covariances by belief separation.

pub mod classes;
pub mod kadane;

use thiserror::Error;

use crate::linear_belief::BeliefError;
use crate::synthesis::SynthesisError;

pub use classes::{
    complete_by_separation, complete_zero_fill, preference_rules, scale_class_covariances, ClassElicitation,
    CompletionMode, Element, MeanCorrelation, PartialClassStructure, SeparationRule,
};
pub use kadane::{
    consistent_answers, start_session, ElicitationSession, GivenValue, HypotheticalPolicy, QuestionPrompt, SessionStatus, SessionTranscript,
    StepAnswers, StepSummary,
};

#[derive(Debug, Error)]
pub enum ElicitationError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("session is finalized")]
    SessionClosed,

    #[error("conditioning system for {variable:?} is singular: {detail}")]
    DegenerateConditioning { variable: String, detail: String },

    #[error(
        "answers for {variable:?} make the covariance matrix indefinite \
         (min eigenvalue {margin:.6e}, floor {floor:.6e})"
    )]
    IncoherentStep { variable: String, margin: f64, floor: f64 },

    #[error("incoherent elicitation: {0}")]
    IncoherentElicitation(String),

    #[error("separation rules incomplete: {0}")]
    IncompleteRules(String),

    #[error("invalid separation rule: {0}")]
    InvalidRule(String),

    #[error(transparent)]
    Belief(#[from] BeliefError),

    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
}

pub type Result<T> = std::result::Result<T, ElicitationError>;
