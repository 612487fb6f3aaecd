//! Operations shared by the CLI and the HTTP API.

use std::collections::HashMap;
use std::fmt;
use std::io::Read;
use std::path::PathBuf;
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::documents::{
    self, BatchDocument, ClassDocument, DocumentError, InputRef, Override, PriorDocument, ReportDocument,
    ReportInputs, SessionDocument,
};
use super::ingest::{self, DeclaredModel, IngestError};
use super::render;
use super::store::{Loaded, StoreError, WorkspaceStore};
use crate::case_study;
use crate::elicitation::{
    complete_by_separation, complete_zero_fill, preference_rules, scale_class_covariances, start_session,
    ClassElicitation, CompletionMode, ElicitationError, ElicitationSession, HypotheticalPolicy, QuestionPrompt,
    StepAnswers, StepSummary,
};
use crate::linear_belief::{BeliefError, BeliefSpec, VariableSet};
use crate::synthesis::{dominance_check, pba, ClassStructure, ModelOutputBatch, SynthesisError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    NotFound,
    Input,
    Conflict,
    Incoherent,
    Internal,
}

/// Error carried to the CLI and the API with a stable machine-readable code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceError {
    pub kind: ErrorKind,
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<serde_json::Value>,
}

impl fmt::Display for ServiceError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

impl std::error::Error for ServiceError {}

impl ServiceError {
    pub fn new(kind: ErrorKind, code: &str, message: impl Into<String>) -> Self {
        ServiceError {
            kind,
            code: code.to_string(),
            message: message.into(),
            detail: None,
        }
    }

    pub fn input(code: &str, message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Input, code, message)
    }

    fn with_detail(mut self, detail: serde_json::Value) -> Self {
        self.detail = Some(detail);
        self
    }

    /// 1 for input problems, 2 for incoherent beliefs, 3 for internal faults.
    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::NotFound | ErrorKind::Input | ErrorKind::Conflict => 1,
            ErrorKind::Incoherent => 2,
            ErrorKind::Internal => 3,
        }
    }
}

impl From<BeliefError> for ServiceError {
    fn from(e: BeliefError) -> Self {
        match &e {
            BeliefError::NotPsd { .. } | BeliefError::Coherence(_) => {
                ServiceError::new(ErrorKind::Incoherent, "incoherent_belief", e.to_string())
            }
            _ => ServiceError::input("invalid_belief", e.to_string()),
        }
    }
}

impl From<SynthesisError> for ServiceError {
    fn from(e: SynthesisError) -> Self {
        match e {
            SynthesisError::Belief(b) => b.into(),
            SynthesisError::IncoherentElicitation { min_eigenvalue, floor } => ServiceError::new(
                ErrorKind::Incoherent,
                "incoherent_elicitation",
                e.to_string(),
            )
            .with_detail(json!({ "min_eigenvalue": min_eigenvalue, "floor": floor })),
            SynthesisError::IncoherentPrior(_) => {
                ServiceError::new(ErrorKind::Incoherent, "incoherent_prior", e.to_string())
            }
            SynthesisError::EmptyClass(_) => ServiceError::input("empty_class", e.to_string()),
            SynthesisError::NonConforming(_) => ServiceError::input("nonconforming_batch", e.to_string()),
            SynthesisError::InvalidStructure(_) => ServiceError::input("invalid_class_structure", e.to_string()),
        }
    }
}

impl From<ElicitationError> for ServiceError {
    fn from(e: ElicitationError) -> Self {
        match e {
            ElicitationError::Belief(b) => b.into(),
            ElicitationError::Synthesis(s) => s.into(),
            ElicitationError::SessionClosed => ServiceError::new(ErrorKind::Conflict, "session_closed", e.to_string()),
            ElicitationError::IncoherentStep { margin, floor, .. } => {
                ServiceError::new(ErrorKind::Incoherent, "incoherent_step", e.to_string())
                    .with_detail(json!({ "margin": margin, "floor": floor }))
            }
            ElicitationError::IncoherentElicitation(_) => {
                ServiceError::new(ErrorKind::Incoherent, "incoherent_elicitation", e.to_string())
            }
            ElicitationError::DegenerateConditioning { .. } => {
                ServiceError::input("degenerate_conditioning", e.to_string())
            }
            ElicitationError::IncompleteRules(_) => ServiceError::input("incomplete_rules", e.to_string()),
            ElicitationError::InvalidRule(_) => ServiceError::input("invalid_rule", e.to_string()),
            ElicitationError::InvalidInput(_) => ServiceError::input("invalid_input", e.to_string()),
        }
    }
}

impl From<DocumentError> for ServiceError {
    fn from(e: DocumentError) -> Self {
        match e {
            DocumentError::Belief(b) => b.into(),
            DocumentError::Synthesis(s) => s.into(),
            other => ServiceError::input("invalid_document", other.to_string()),
        }
    }
}

impl From<StoreError> for ServiceError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound { .. } => ServiceError::new(ErrorKind::NotFound, "not_found", e.to_string()),
            StoreError::InvalidId(_) => ServiceError::new(ErrorKind::NotFound, "not_found", e.to_string()),
            StoreError::Document { source, .. } => source.into(),
            StoreError::Io(_) => ServiceError::new(ErrorKind::Internal, "store_io", e.to_string()),
        }
    }
}

impl From<IngestError> for ServiceError {
    fn from(e: IngestError) -> Self {
        let code = match &e {
            IngestError::Io { .. } => "unreadable_file",
            IngestError::IncompleteModel { .. } => "incomplete_model",
            IngestError::Schema(_) => "schema_error",
            IngestError::Value { .. } => "value_error",
        };
        ServiceError::input(code, e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, ServiceError>;

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateSession {
    pub variables: VariableSet,
    pub first_prevision: f64,
    pub first_variance: f64,
    #[serde(default)]
    pub policy: Option<HypotheticalPolicy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisRequest {
    pub prior_id: String,
    pub class_id: String,
    pub batch_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhatIfRequest {
    pub report_id: String,
    #[serde(default)]
    pub overrides: Vec<Override>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildClassesRequest {
    pub prior_id: String,
    pub elicitation: ClassElicitation,
    #[serde(default = "default_completion")]
    pub completion: CompletionMode,
}

fn default_completion() -> CompletionMode {
    CompletionMode::Separation
}

/// A computed report with its serialized bytes; `id` is set when persisted.
#[derive(Debug, Clone)]
pub struct ReportOutcome {
    pub id: Option<String>,
    pub doc: ReportDocument,
    pub bytes: Vec<u8>,
    pub text: String,
}

/// Ids of the case-study documents imported into a store.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseStudyIds {
    pub prior_id: String,
    pub class_id: String,
    pub batch_id: String,
}

struct SessionEntry {
    session: ElicitationSession,
    prior_id: Option<String>,
}

pub struct Workbench {
    store: WorkspaceStore,
    sessions: Mutex<HashMap<String, Arc<Mutex<SessionEntry>>>>,
}

fn build_structure(prior: &BeliefSpec, elicitation: &ClassElicitation, mode: CompletionMode) -> Result<ClassStructure> {
    let partial = scale_class_covariances(prior, elicitation)?;
    Ok(match mode {
        CompletionMode::Separation => complete_by_separation(&partial, &preference_rules(&partial))?,
        CompletionMode::ZeroFill => complete_zero_fill(&partial)?,
    })
}

fn apply_override(e: &mut ClassElicitation, variables: &VariableSet, o: &Override) -> Result<()> {
    let class = |label: &str| {
        e.class_labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| ServiceError::input("invalid_override", format!("unknown class {label:?}")))
    };
    let variable = |name: &str| {
        variables
            .index_of(name)
            .ok_or_else(|| ServiceError::input("invalid_override", format!("unknown variable {name:?}")))
    };
    match o {
        Override::QuantityCorrelation { class: c, variable: v, value } => {
            let (i, l) = (class(c)?, variable(v)?);
            e.quantity_mean_correlation[i][l] = *value;
        }
        Override::MeanCorrelation {
            first,
            second,
            variable: v,
            value,
        } => {
            let l = variable(v)?;
            let entry = e
                .mean_correlations
                .iter_mut()
                .find(|mc| (&mc.first == first && &mc.second == second) || (&mc.first == second && &mc.second == first))
                .ok_or_else(|| {
                    ServiceError::input("invalid_override", format!("no mean correlation for {first:?}/{second:?}"))
                })?;
            entry.values[l] = *value;
        }
        Override::MeanFraction { class: c, value } => {
            let i = class(c)?;
            e.mean_fraction_pct[i] = *value;
        }
        Override::ResidualFraction { class: c, value } => {
            let i = class(c)?;
            e.residual_fraction_pct[i] = *value;
        }
    }
    Ok(())
}

impl Workbench {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        Ok(Workbench {
            store: WorkspaceStore::open(root)?,
            sessions: Mutex::new(HashMap::new()),
        })
    }

    pub fn store(&self) -> &WorkspaceStore {
        &self.store
    }

    // -- documents ----------------------------------------------------------

    pub fn put_prior(&self, doc: &PriorDocument) -> Result<Loaded<PriorDocument>> {
        doc.to_spec()?;
        Ok(self.store.save(doc)?)
    }

    pub fn put_classes(&self, doc: &ClassDocument) -> Result<Loaded<ClassDocument>> {
        doc.to_structure()?;
        Ok(self.store.save(doc)?)
    }

    pub fn put_batch(&self, doc: &BatchDocument) -> Result<Loaded<BatchDocument>> {
        if doc.classes.iter().flat_map(|c| &c.models).any(|m| m.values.len() != doc.variables.len()) {
            return Err(ServiceError::input("invalid_document", "model value count differs from variable count"));
        }
        Ok(self.store.save(doc)?)
    }

    pub fn ingest_csv<R: Read>(
        &self,
        reader: R,
        variables: &VariableSet,
        declared: &[DeclaredModel],
        source: Option<String>,
    ) -> Result<Loaded<BatchDocument>> {
        let batch = ingest::parse_outputs(reader, variables, declared)?;
        Ok(self.store.save(&BatchDocument::from_batch(&batch, source))?)
    }

    pub fn build_classes(&self, req: &BuildClassesRequest) -> Result<Loaded<ClassDocument>> {
        let prior = self.store.load::<PriorDocument>(&req.prior_id)?.doc.to_spec()?;
        let cs = build_structure(&prior, &req.elicitation, req.completion)?;
        let doc = ClassDocument::from_structure(&cs, Some(req.elicitation.clone()), Some(req.completion));
        Ok(self.store.save(&doc)?)
    }

    /// Imports the shipped case-study prior, class structure and outputs.
    pub fn import_case_study(&self) -> Result<CaseStudyIds> {
        let prior = self.put_prior(&case_study::prior_document())?;
        let classes = self.build_classes(&BuildClassesRequest {
            prior_id: prior.id.clone(),
            elicitation: case_study::class_elicitation(),
            completion: CompletionMode::Separation,
        })?;
        let batch = self.store.save(&BatchDocument::from_batch(
            &case_study::model_outputs(),
            Some("case study model outputs".into()),
        ))?;
        Ok(CaseStudyIds {
            prior_id: prior.id,
            class_id: classes.id,
            batch_id: batch.id,
        })
    }

    // -- synthesis ----------------------------------------------------------

    fn compute(
        &self,
        prior: &BeliefSpec,
        cs: &ClassStructure,
        batch: &ModelOutputBatch,
        inputs: ReportInputs,
        overrides: Vec<Override>,
    ) -> Result<ReportDocument> {
        let report = pba(prior, cs, batch)?;
        let dominance = dominance_check(prior, cs, batch)?;
        Ok(ReportDocument::new(inputs, overrides, &report, dominance))
    }

    fn finish(&self, doc: ReportDocument, persist: bool) -> Result<ReportOutcome> {
        let text = render::render_report(&doc);
        if persist {
            let saved = self.store.save(&doc)?;
            self.store.save_report_text(&saved.id, &text)?;
            Ok(ReportOutcome {
                id: Some(saved.id),
                doc,
                bytes: saved.bytes,
                text,
            })
        } else {
            Ok(ReportOutcome {
                id: None,
                bytes: documents::to_bytes(&doc),
                doc,
                text,
            })
        }
    }

    pub fn run_synthesis(&self, req: &SynthesisRequest) -> Result<ReportOutcome> {
        let prior = self.store.load::<PriorDocument>(&req.prior_id)?;
        let classes = self.store.load::<ClassDocument>(&req.class_id)?;
        let batch = self.store.load::<BatchDocument>(&req.batch_id)?;
        let inputs = ReportInputs {
            prior: InputRef {
                id: prior.id.clone(),
                sha256: prior.sha256.clone(),
            },
            class_structure: InputRef {
                id: classes.id.clone(),
                sha256: classes.sha256.clone(),
            },
            batch: InputRef {
                id: batch.id.clone(),
                sha256: batch.sha256.clone(),
            },
        };
        let spec = prior.doc.to_spec()?;
        let cs = classes.doc.to_structure()?;
        let doc = self.compute(&spec, &cs, &batch.doc.to_batch(), inputs, Vec::new())?;
        self.finish(doc, true)
    }

    pub fn report(&self, id: &str) -> Result<Loaded<ReportDocument>> {
        Ok(self.store.load(id)?)
    }

    /// Recomputes a stored report with sparse edits to the class elicitation.
    /// The result is persisted only when `save` is set.
    pub fn whatif(&self, req: &WhatIfRequest, save: bool) -> Result<ReportOutcome> {
        let base = self.store.load::<ReportDocument>(&req.report_id)?.doc;
        let inputs = base.inputs.clone();
        let prior = self.store.load::<PriorDocument>(&inputs.prior.id)?;
        let classes = self.store.load::<ClassDocument>(&inputs.class_structure.id)?;
        let batch = self.store.load::<BatchDocument>(&inputs.batch.id)?;
        for (what, r, sha) in [
            ("prior", &inputs.prior, &prior.sha256),
            ("class structure", &inputs.class_structure, &classes.sha256),
            ("batch", &inputs.batch, &batch.sha256),
        ] {
            if &r.sha256 != sha {
                return Err(ServiceError::new(
                    ErrorKind::Conflict,
                    "input_changed",
                    format!("{what} {:?} changed since the report was computed", r.id),
                ));
            }
        }
        let spec = prior.doc.to_spec()?;
        let mut overrides = base.overrides.clone();
        overrides.extend(req.overrides.iter().cloned());
        let cs = if overrides.is_empty() {
            classes.doc.to_structure()?
        } else {
            let mut elicitation = classes.doc.elicitation.clone().ok_or_else(|| {
                ServiceError::input(
                    "no_elicitation",
                    "class structure was uploaded without elicitation inputs; what-if edits need them",
                )
            })?;
            for o in &overrides {
                apply_override(&mut elicitation, spec.variables(), o)?;
            }
            let mode = classes.doc.completion.unwrap_or(CompletionMode::Separation);
            build_structure(&spec, &elicitation, mode)?
        };
        let doc = self.compute(&spec, &cs, &batch.doc.to_batch(), inputs, overrides)?;
        self.finish(doc, save)
    }

    // -- sessions -----------------------------------------------------------

    fn persist_session(&self, id: &str, entry: &SessionEntry) -> Result<Loaded<SessionDocument>> {
        let doc = SessionDocument::new(
            id.to_string(),
            entry.session.status(),
            entry.session.transcript(),
            entry.prior_id.clone(),
        );
        Ok(self.store.save_as(id, &doc)?)
    }

    fn session_entry(&self, id: &str) -> Result<Arc<Mutex<SessionEntry>>> {
        let mut map = self.sessions.lock();
        if let Some(e) = map.get(id) {
            return Ok(e.clone());
        }
        let doc = self.store.load::<SessionDocument>(id)?.doc;
        let session = doc.transcript.replay()?;
        let entry = Arc::new(Mutex::new(SessionEntry {
            session,
            prior_id: doc.prior_id,
        }));
        map.insert(id.to_string(), entry.clone());
        Ok(entry)
    }

    pub fn create_session(&self, req: &CreateSession) -> Result<Loaded<SessionDocument>> {
        let session = start_session(
            req.variables.clone(),
            req.first_prevision,
            req.first_variance,
            req.policy.unwrap_or_default(),
        )?;
        let id = super::store::new_id();
        let entry = SessionEntry {
            session,
            prior_id: None,
        };
        let saved = self.persist_session(&id, &entry)?;
        self.sessions.lock().insert(id, Arc::new(Mutex::new(entry)));
        Ok(saved)
    }

    pub fn session(&self, id: &str) -> Result<SessionDocument> {
        let entry = self.session_entry(id)?;
        let e = entry.lock();
        Ok(SessionDocument::new(
            id.to_string(),
            e.session.status(),
            e.session.transcript(),
            e.prior_id.clone(),
        ))
    }

    pub fn next_question(&self, id: &str) -> Result<QuestionPrompt> {
        let entry = self.session_entry(id)?;
        let e = entry.lock();
        Ok(e.session.next_question()?)
    }

    pub fn submit_answers(&self, id: &str, answers: &StepAnswers) -> Result<StepSummary> {
        let entry = self.session_entry(id)?;
        let mut e = entry.lock();
        let before = e.session.clone();
        let summary = e.session.submit_answers(answers.clone())?;
        if let Err(err) = self.persist_session(id, &e) {
            e.session = before;
            return Err(err);
        }
        Ok(summary)
    }

    pub fn finalize(&self, id: &str, marginal_variances: &[f64]) -> Result<Loaded<PriorDocument>> {
        let entry = self.session_entry(id)?;
        let mut e = entry.lock();
        let before = e.session.clone();
        let spec = e.session.finalize(marginal_variances)?;
        let doc = PriorDocument::from_spec(&spec, Some(format!("elicitation session {id}")));
        let result = self.store.save(&doc).map_err(ServiceError::from).and_then(|saved| {
            e.prior_id = Some(saved.id.clone());
            self.persist_session(id, &e).map(|_| saved)
        });
        if result.is_err() {
            e.session = before;
            e.prior_id = None;
        }
        result
    }

    /// Drops in-memory session state; sessions are reloaded from the store
    /// on next use.
    pub fn evict_sessions(&self) {
        self.sessions.lock().clear();
    }
}
