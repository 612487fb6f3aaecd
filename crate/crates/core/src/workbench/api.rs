//! HTTP/JSON API under `/v1`.
//!
//! Error bodies are `{"code": ..., "message": ..., "detail": ...}`. Report
//! responses return the exact persisted document bytes; ids and input hashes
//! travel in `x-report-id` and `x-input-sha256` headers.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::JsonRejection;
use axum::extract::{FromRequest, Path, Query, Request, State};
use axum::http::{header, HeaderMap, HeaderName, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::json;

use super::documents::{BatchDocument, ClassDocument, PriorDocument, ReportInputs};
use super::ingest::DeclaredModel;
use super::service::{
    BuildClassesRequest, CreateSession, ErrorKind, ReportOutcome, ServiceError, SynthesisRequest, WhatIfRequest,
    Workbench,
};
use super::store::{Loaded, Stored};
use crate::elicitation::StepAnswers;

pub const REPORT_ID: HeaderName = HeaderName::from_static("x-report-id");
pub const PRIOR_ID: HeaderName = HeaderName::from_static("x-prior-id");
pub const INPUT_SHA256: HeaderName = HeaderName::from_static("x-input-sha256");

pub struct ApiError(pub ServiceError);

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        ApiError(e)
    }
}

pub fn status_for(kind: ErrorKind) -> StatusCode {
    match kind {
        ErrorKind::NotFound => StatusCode::NOT_FOUND,
        ErrorKind::Input | ErrorKind::Incoherent => StatusCode::UNPROCESSABLE_ENTITY,
        ErrorKind::Conflict => StatusCode::CONFLICT,
        ErrorKind::Internal => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let e = self.0;
        if e.kind == ErrorKind::Internal {
            log::error!("{e}");
        }
        let mut body = json!({ "code": e.code, "message": e.message });
        if let Some(d) = e.detail {
            body["detail"] = d;
        }
        (status_for(e.kind), Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// `Json` whose rejections use the API error body.
pub struct ApiJson<T>(pub T);

impl<S, T> FromRequest<S> for ApiJson<T>
where
    T: DeserializeOwned,
    S: Send + Sync,
{
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        match Json::<T>::from_request(req, state).await {
            Ok(Json(v)) => Ok(ApiJson(v)),
            Err(rejection) => {
                let rejection: JsonRejection = rejection;
                Err(ApiError(ServiceError::input("invalid_request", rejection.body_text())))
            }
        }
    }
}

type AppState = Arc<Workbench>;

async fn blocking<T, F>(wb: AppState, f: F) -> ApiResult<T>
where
    F: FnOnce(&Workbench) -> Result<T, ServiceError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&wb))
        .await
        .map_err(|e| ApiError(ServiceError::new(ErrorKind::Internal, "task_failed", e.to_string())))?
        .map_err(ApiError)
}

fn json_bytes(status: StatusCode, bytes: Vec<u8>, extra: HeaderMap) -> Response {
    let mut resp = (status, bytes).into_response();
    resp.headers_mut()
        .insert(header::CONTENT_TYPE, HeaderValue::from_static("application/json"));
    resp.headers_mut().extend(extra);
    resp
}

fn header_value(s: &str) -> HeaderValue {
    HeaderValue::from_str(s).unwrap_or_else(|_| HeaderValue::from_static("invalid"))
}

fn input_hashes(inputs: &ReportInputs) -> HeaderValue {
    header_value(&format!(
        "prior={};class_structure={};batch={}",
        inputs.prior.sha256, inputs.class_structure.sha256, inputs.batch.sha256
    ))
}

fn report_response(outcome: ReportOutcome) -> Response {
    let mut headers = HeaderMap::new();
    if let Some(id) = &outcome.id {
        headers.insert(REPORT_ID, header_value(id));
    }
    headers.insert(INPUT_SHA256, input_hashes(&outcome.doc.inputs));
    json_bytes(StatusCode::OK, outcome.bytes, headers)
}

fn created<D>(saved: Loaded<D>) -> Response {
    (StatusCode::CREATED, Json(json!({ "id": saved.id, "sha256": saved.sha256 }))).into_response()
}

fn document_response<D>(loaded: Loaded<D>) -> Response {
    let mut headers = HeaderMap::new();
    headers.insert(HeaderName::from_static("x-document-sha256"), header_value(&loaded.sha256));
    json_bytes(StatusCode::OK, loaded.bytes, headers)
}

// -- sessions ---------------------------------------------------------------

async fn create_session(State(wb): State<AppState>, ApiJson(req): ApiJson<CreateSession>) -> ApiResult<Response> {
    let saved = blocking(wb, move |wb| wb.create_session(&req)).await?;
    Ok((StatusCode::CREATED, Json(json!({ "session_id": saved.id }))).into_response())
}

async fn get_session(State(wb): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let doc = blocking(wb, move |wb| wb.session(&id)).await?;
    Ok(Json(doc).into_response())
}

async fn next_question(State(wb): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let prompt = blocking(wb, move |wb| wb.next_question(&id)).await?;
    Ok(Json(prompt).into_response())
}

async fn submit_answers(
    State(wb): State<AppState>,
    Path(id): Path<String>,
    ApiJson(answers): ApiJson<StepAnswers>,
) -> ApiResult<Response> {
    let summary = blocking(wb, move |wb| wb.submit_answers(&id, &answers)).await?;
    Ok(Json(summary).into_response())
}

#[derive(Deserialize)]
struct FinalizeRequest {
    marginal_variances: Vec<f64>,
}

async fn finalize(
    State(wb): State<AppState>,
    Path(id): Path<String>,
    ApiJson(req): ApiJson<FinalizeRequest>,
) -> ApiResult<Response> {
    let saved = blocking(wb, move |wb| wb.finalize(&id, &req.marginal_variances)).await?;
    let mut headers = HeaderMap::new();
    headers.insert(PRIOR_ID, header_value(&saved.id));
    headers.insert(HeaderName::from_static("x-document-sha256"), header_value(&saved.sha256));
    Ok(json_bytes(StatusCode::OK, saved.bytes, headers))
}

// -- documents --------------------------------------------------------------

async fn put_prior(State(wb): State<AppState>, ApiJson(doc): ApiJson<PriorDocument>) -> ApiResult<Response> {
    Ok(created(blocking(wb, move |wb| wb.put_prior(&doc)).await?))
}

async fn put_classes(State(wb): State<AppState>, ApiJson(doc): ApiJson<ClassDocument>) -> ApiResult<Response> {
    Ok(created(blocking(wb, move |wb| wb.put_classes(&doc)).await?))
}

async fn build_classes(
    State(wb): State<AppState>,
    ApiJson(req): ApiJson<BuildClassesRequest>,
) -> ApiResult<Response> {
    Ok(created(blocking(wb, move |wb| wb.build_classes(&req)).await?))
}

async fn put_batch(State(wb): State<AppState>, ApiJson(doc): ApiJson<BatchDocument>) -> ApiResult<Response> {
    Ok(created(blocking(wb, move |wb| wb.put_batch(&doc)).await?))
}

#[derive(Deserialize)]
struct CsvQuery {
    prior_id: String,
    /// Comma-separated `class:model_id` pairs.
    #[serde(default)]
    expect: Option<String>,
}

pub fn parse_declared(spec: &str) -> Result<Vec<DeclaredModel>, ServiceError> {
    spec.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|pair| {
            let (class, model) = pair
                .split_once(':')
                .ok_or_else(|| ServiceError::input("invalid_request", format!("expected class:model, got {pair:?}")))?;
            Ok(DeclaredModel {
                class: class.trim().to_string(),
                model_id: model.trim().to_string(),
            })
        })
        .collect()
}

async fn put_batch_csv(State(wb): State<AppState>, Query(q): Query<CsvQuery>, body: Bytes) -> ApiResult<Response> {
    let saved = blocking(wb, move |wb| {
        let prior = wb.store().load::<PriorDocument>(&q.prior_id)?;
        let declared = parse_declared(q.expect.as_deref().unwrap_or(""))?;
        wb.ingest_csv(body.as_ref(), &prior.doc.variables, &declared, Some("uploaded CSV".into()))
    })
    .await?;
    Ok(created(saved))
}

async fn get_document<D: Stored + Send + 'static>(wb: AppState, id: String) -> ApiResult<Response> {
    let loaded = blocking(wb, move |wb| Ok(wb.store().load::<D>(&id)?)).await?;
    Ok(document_response(loaded))
}

async fn get_prior(State(wb): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    get_document::<PriorDocument>(wb, id).await
}

async fn get_classes(State(wb): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    get_document::<ClassDocument>(wb, id).await
}

async fn get_batch(State(wb): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    get_document::<BatchDocument>(wb, id).await
}

// -- synthesis --------------------------------------------------------------

async fn synthesis(State(wb): State<AppState>, ApiJson(req): ApiJson<SynthesisRequest>) -> ApiResult<Response> {
    Ok(report_response(blocking(wb, move |wb| wb.run_synthesis(&req)).await?))
}

async fn get_report(State(wb): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let loaded = blocking(wb, move |wb| wb.report(&id)).await?;
    let mut headers = HeaderMap::new();
    headers.insert(REPORT_ID, header_value(&loaded.id));
    headers.insert(INPUT_SHA256, input_hashes(&loaded.doc.inputs));
    Ok(json_bytes(StatusCode::OK, loaded.bytes, headers))
}

#[derive(Deserialize)]
struct WhatIfQuery {
    #[serde(default)]
    save: bool,
}

async fn whatif(
    State(wb): State<AppState>,
    Query(q): Query<WhatIfQuery>,
    ApiJson(req): ApiJson<WhatIfRequest>,
) -> ApiResult<Response> {
    Ok(report_response(blocking(wb, move |wb| wb.whatif(&req, q.save)).await?))
}

async fn case_study(State(wb): State<AppState>) -> ApiResult<Response> {
    let ids = blocking(wb, |wb| wb.import_case_study()).await?;
    Ok((StatusCode::CREATED, Json(ids)).into_response())
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "schema_version": super::documents::SCHEMA_VERSION }))
}

async fn fallback() -> ApiError {
    ApiError(ServiceError::new(ErrorKind::NotFound, "not_found", "no such endpoint"))
}

pub fn router(wb: Arc<Workbench>) -> Router {
    let v1 = Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/next", get(next_question))
        .route("/sessions/{id}/answers", post(submit_answers))
        .route("/sessions/{id}/finalize", post(finalize))
        .route("/priors", post(put_prior))
        .route("/priors/{id}", get(get_prior))
        .route("/classes", post(put_classes))
        .route("/classes/build", post(build_classes))
        .route("/classes/{id}", get(get_classes))
        .route("/batches", post(put_batch))
        .route("/batches/csv", post(put_batch_csv))
        .route("/batches/{id}", get(get_batch))
        .route("/synthesis", post(synthesis))
        .route("/reports/{id}", get(get_report))
        .route("/whatif", post(whatif))
        .route("/case-study", post(case_study));
    Router::new().nest("/v1", v1).fallback(fallback).with_state(wb)
}

/// Serves until ctrl-c.
pub async fn serve(wb: Arc<Workbench>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(wb))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
