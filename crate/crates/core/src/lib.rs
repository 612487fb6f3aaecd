//! Posterior belief assessment workbench.
//!
//! Turns the estimates produced by several competing predictive models into a
//! single set of second-order beliefs owned by the modeller. The crate is
//! organised bottom-up:
//!
//! * [`linear_belief`]: belief specifications, the Moore-Penrose inverse,
//!   coherence checks and the Bayes linear adjustment.
//! * [`synthesis`]: co-exchangeable model classes, derivation of the class
//!   weights and discrepancy, and the assessment itself with its diagnostics.
//! * [`elicitation`]: building coherent prior specifications (iterative
//!   conditional-prevision protocol, class covariance scaling, belief
//!   separations).
//! * [`workbench`]: documents, ingestion, persistence, rendering and the
//!   HTTP service used by the CLI.
//! * [`case_study`]: the regional Omicron case-count fixtures shipped with
//!   the crate.

pub mod case_study;
pub mod elicitation;
pub mod linear_belief;
pub mod synthesis;
pub mod workbench;

pub use linear_belief::{BeliefError, BeliefSpec, JointBelief, VariableSet};
pub use synthesis::{ClassStructure, ModelOutputBatch, PbaReport, SynthesisWeights};
