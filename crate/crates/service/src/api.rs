use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::{BytesRejection, JsonRejection};
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use gatedgan::latent::{project, render_session, EditSession, FieldError, LatentArchive, ProjectOptions, SessionLimits};
use gatedgan::model::ImageTensor;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::error::ServiceError;
use crate::jobs::{JobStatus, LossSummary};
use crate::state::{AppState, LoadedModel, SlotState};

pub fn router(state: Arc<AppState>) -> Router {
    let limit = state.config.max_upload_bytes;
    Router::new()
        .route("/v1/models", get(list_models))
        .route("/v1/generate", post(generate))
        .route("/v1/project", post(start_projection))
        .route("/v1/jobs/{job_id}", get(job_status))
        .route("/v1/pca/{model_id}", get(pca_summary))
        .route("/v1/latent", post(upload_latent))
        .route("/v1/latent/{archive_id}", get(download_latent))
        .route("/v1/latent/{archive_id}/render", get(render_latent))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

fn json_body<T>(body: Result<Json<T>, JsonRejection>) -> Result<T, ServiceError> {
    body.map(|Json(v)| v).map_err(|r| {
        if r.status() == StatusCode::PAYLOAD_TOO_LARGE {
            ServiceError::PayloadTooLarge(r.body_text())
        } else {
            ServiceError::BadRequest(r.body_text())
        }
    })
}

fn raw_body(body: Result<Bytes, BytesRejection>) -> Result<Bytes, ServiceError> {
    body.map_err(|r| {
        if r.status() == StatusCode::PAYLOAD_TOO_LARGE {
            ServiceError::PayloadTooLarge(r.body_text())
        } else {
            ServiceError::BadRequest(r.body_text())
        }
    })
}

/// Runs `f` on the blocking pool once one of the model's workers is free.
async fn on_worker<T: Send + 'static>(
    state: &AppState,
    model_id: &str,
    f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static,
) -> Result<T, ServiceError> {
    let permit = state
        .slot(model_id)?
        .workers
        .clone()
        .acquire_owned()
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))?;
    tokio::task::spawn_blocking(move || {
        let _permit = permit;
        f()
    })
    .await
    .map_err(|e| ServiceError::Internal(e.to_string()))?
}

fn png_response(png: Vec<u8>, extra: &[(&'static str, String)]) -> Response {
    let mut resp = (StatusCode::OK, [(header::CONTENT_TYPE, "image/png")], png).into_response();
    for (k, v) in extra {
        if let Ok(v) = v.parse() {
            resp.headers_mut().insert(*k, v);
        }
    }
    resp
}

/// Hex SHA-256 of the session's canonical JSON.
pub fn session_hash(session: &EditSession) -> String {
    let bytes = serde_json::to_vec(session).expect("session serializes");
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Default, Deserialize)]
struct FormatQuery {
    format: Option<String>,
}

impl FormatQuery {
    fn wants_png(&self) -> Result<bool, ServiceError> {
        match self.format.as_deref() {
            None | Some("json") => Ok(false),
            Some("png") => Ok(true),
            Some(f) => Err(ServiceError::BadRequest(format!("unknown format '{f}', expected json or png"))),
        }
    }
}

#[derive(Debug, Serialize)]
struct ModelEntry {
    model_id: String,
    status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    detail: Option<ModelDetail>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

#[derive(Debug, Serialize)]
struct ModelDetail {
    resolution: usize,
    gate_config: String,
    gates: gatedgan::model::NoiseGateConfig,
    latent_dim: usize,
    num_ws: usize,
    basis_available: bool,
    basis_k: usize,
    limits: SessionLimits,
}

fn detail(m: &LoadedModel) -> ModelDetail {
    let arch = m.ckpt.arch();
    let l = m.ckpt.generator.num_ws();
    ModelDetail {
        resolution: arch.resolution,
        gate_config: m.ckpt.gates.describe(),
        gates: m.ckpt.gates.clone(),
        latent_dim: arch.latent_dim,
        num_ws: l,
        basis_available: m.basis.is_some(),
        basis_k: m.basis.as_ref().map_or(0, |b| b.k()),
        limits: SessionLimits::for_model(l),
    }
}

async fn list_models(State(st): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let entries: Vec<ModelEntry> = st
        .models
        .iter()
        .map(|(id, slot)| {
            let state = slot.state.read().expect("slot lock").clone();
            ModelEntry {
                model_id: id.clone(),
                status: state.label(),
                detail: match &state {
                    SlotState::Ready(m) => Some(detail(m)),
                    _ => None,
                },
                error: match state {
                    SlotState::Failed(e) => Some(e),
                    _ => None,
                },
            }
        })
        .collect();
    Json(json!({ "models": entries }))
}

async fn generate(
    State(st): State<Arc<AppState>>,
    Query(q): Query<FormatQuery>,
    body: Result<Json<EditSession>, JsonRejection>,
) -> Result<Response, ServiceError> {
    let session = json_body(body)?;
    let as_png = q.wants_png()?;
    let model = st.model(&session.model_id)?;
    let limits = SessionLimits::for_model(model.ckpt.generator.num_ws());
    let mut errs = session.field_errors(&limits, model.basis.as_ref().map(|b| b.k()));
    if !session.pca_edits.is_empty() && model.basis.is_none() {
        errs.push(FieldError {
            field: "pca_edits".into(),
            message: format!("model '{}' has no PCA basis", model.id),
        });
    }
    if !errs.is_empty() {
        return Err(ServiceError::Fields(errs));
    }
    let hash = session_hash(&session);
    let provenance = serde_json::to_value(&session).map_err(|e| ServiceError::Internal(e.to_string()))?;
    let m = model.clone();
    let (png, archive) = on_worker(&st, &model.id, move || {
        let (img, w, noise) = render_session(&session, &m.ckpt, m.basis.as_ref())?;
        let archive = LatentArchive::new(m.id.clone(), &m.ckpt, w, &noise, provenance)?;
        Ok((img.to_png(), archive.to_bytes()))
    })
    .await?;
    let latent_id = st.store_archive(archive);
    tracing::info!(model = %model.id, session_hash = %hash, latent_id = %latent_id, "generate");
    if as_png {
        return Ok(png_response(png, &[("x-session-hash", hash), ("x-latent-id", latent_id)]));
    }
    Ok(Json(json!({
        "model_id": model.id,
        "session_hash": hash,
        "latent_id": latent_id,
        "image_png_base64": BASE64.encode(&png),
    }))
    .into_response())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProjectRequest {
    model_id: String,
    image_png_base64: String,
    #[serde(default)]
    options: ProjectOptions,
}

async fn start_projection(
    State(st): State<Arc<AppState>>,
    body: Result<Json<ProjectRequest>, JsonRejection>,
) -> Result<Response, ServiceError> {
    let req = json_body(body)?;
    let model = st.model(&req.model_id)?;
    req.options.validate()?;
    let png = BASE64
        .decode(req.image_png_base64.as_bytes())
        .map_err(|e| ServiceError::Unprocessable(format!("image_png_base64: {e}")))?;
    let target = ImageTensor::from_png(&png)?;
    let res = model.ckpt.arch().resolution;
    if target.size() != res {
        return Err(ServiceError::Unprocessable(format!(
            "image is {0}x{0}, model '{1}' expects {res}x{res}",
            target.size(),
            model.id
        )));
    }
    let job_id = st.jobs.create(&model.id);
    tracing::info!(model = %model.id, job = %job_id, steps = req.options.steps, "projection queued");
    let (st2, id2) = (st.clone(), job_id.clone());
    tokio::spawn(async move {
        let model_id = model.id.clone();
        let (st3, id3, mid) = (st2.clone(), id2.clone(), model_id.clone());
        let result = on_worker(&st2, &model_id, move || {
            st3.jobs.set(&id3, JobStatus::Running { model_id: mid });
            run_projection(&model, &target, &req.options)
        })
        .await;
        let status = match result {
            Ok((archive, loss)) => JobStatus::Done {
                model_id: model_id.clone(),
                latent_id: st2.store_archive(archive),
                loss,
            },
            Err(e) => JobStatus::Failed {
                model_id: model_id.clone(),
                code: e.code().to_string(),
                message: e.to_string(),
            },
        };
        tracing::info!(model = %model_id, job = %id2, status = ?status, "projection finished");
        st2.jobs.set(&id2, status);
    });
    Ok((StatusCode::ACCEPTED, Json(json!({ "job_id": job_id }))).into_response())
}

fn run_projection(
    m: &LoadedModel,
    target: &ImageTensor,
    opts: &ProjectOptions,
) -> Result<(Vec<u8>, LossSummary), ServiceError> {
    let r = project(target, &m.ckpt, opts)?;
    let provenance = json!({ "projection": opts, "best_step": r.best_step });
    let archive = LatentArchive::new(m.id.clone(), &m.ckpt, r.w_plus, &r.noise, provenance)?;
    let noise = archive.noise_buffers(m.ckpt.arch())?;
    let render = m.ckpt.generator.synthesize(&archive.w_plus, &noise, &m.ckpt.gates)?;
    let shown = ImageTensor::from_png(&render.to_png())?;
    let loss = |i: usize| r.loss_trace.get(i).map_or(f32::NAN, |t| t.1);
    let summary = LossSummary {
        steps: r.loss_trace.len().saturating_sub(1),
        initial: loss(0),
        final_loss: loss(r.loss_trace.len().saturating_sub(1)),
        best: r
            .loss_trace
            .iter()
            .find(|t| t.0 == r.best_step)
            .map_or(f32::NAN, |t| t.1),
        best_step: r.best_step,
        mse: shown.mse(target),
    };
    Ok((archive.to_bytes(), summary))
}

async fn job_status(State(st): State<Arc<AppState>>, Path(job_id): Path<String>) -> Result<Response, ServiceError> {
    let status = st
        .jobs
        .get(&job_id)
        .ok_or_else(|| ServiceError::NotFound(format!("unknown job '{job_id}'")))?;
    let mut v = serde_json::to_value(status).map_err(|e| ServiceError::Internal(e.to_string()))?;
    v["job_id"] = job_id.into();
    Ok(Json(v).into_response())
}

#[derive(Debug, Deserialize)]
struct PcaQuery {
    k: Option<usize>,
}

async fn pca_summary(
    State(st): State<Arc<AppState>>,
    Path(model_id): Path<String>,
    Query(q): Query<PcaQuery>,
) -> Result<Response, ServiceError> {
    let model = st.model(&model_id)?;
    let basis = model
        .basis
        .as_ref()
        .ok_or_else(|| ServiceError::NotFound(format!("model '{model_id}' has no PCA basis")))?;
    let k = q.k.unwrap_or(st.config.pca_top_k);
    if k == 0 {
        return Err(ServiceError::Fields(vec![FieldError {
            field: "k".into(),
            message: "must be at least 1".into(),
        }]));
    }
    let k = k.min(basis.k());
    Ok(Json(json!({
        "model_id": model_id,
        "k": k,
        "components": basis.k(),
        "variances": &basis.variances[..k],
        "samples": st.config.pca_samples,
        "seed": st.config.pca_seed,
    }))
    .into_response())
}

async fn download_latent(
    State(st): State<Arc<AppState>>,
    Path(archive_id): Path<String>,
) -> Result<Response, ServiceError> {
    let bytes = st.archive(&archive_id)?;
    Ok((
        StatusCode::OK,
        [
            (header::CONTENT_TYPE, "application/octet-stream".to_string()),
            (
                header::CONTENT_DISPOSITION,
                format!("attachment; filename=\"{archive_id}.latent\""),
            ),
        ],
        bytes.as_ref().clone(),
    )
        .into_response())
}

#[derive(Debug, Deserialize)]
struct UploadQuery {
    model_id: Option<String>,
}

async fn upload_latent(
    State(st): State<Arc<AppState>>,
    Query(q): Query<UploadQuery>,
    body: Result<Bytes, BytesRejection>,
) -> Result<Response, ServiceError> {
    let bytes = raw_body(body)?;
    let mut archive = LatentArchive::from_bytes(&bytes)?;
    let target = q.model_id.unwrap_or_else(|| archive.model_id.clone());
    let model = st.model(&target)?;
    archive.check_compatible(&model.ckpt)?;
    let stored = if archive.model_id == target {
        bytes.to_vec()
    } else {
        archive.model_id = target.clone();
        archive.to_bytes()
    };
    let latent_id = st.store_archive(stored);
    tracing::info!(model = %target, latent_id = %latent_id, "latent uploaded");
    Ok((
        StatusCode::CREATED,
        Json(json!({ "latent_id": latent_id, "model_id": target })),
    )
        .into_response())
}

async fn render_latent(
    State(st): State<Arc<AppState>>,
    Path(archive_id): Path<String>,
) -> Result<Response, ServiceError> {
    let bytes = st.archive(&archive_id)?;
    let archive = LatentArchive::from_bytes(&bytes)?;
    let model = st.model(&archive.model_id)?;
    archive.check_compatible(&model.ckpt)?;
    let m = model.clone();
    let png = on_worker(&st, &model.id, move || {
        let noise = archive.noise_buffers(m.ckpt.arch())?;
        Ok(m.ckpt.generator.synthesize(&archive.w_plus, &noise, &m.ckpt.gates)?.to_png())
    })
    .await?;
    tracing::info!(model = %model.id, latent_id = %archive_id, "render latent");
    Ok(png_response(png, &[("x-latent-id", archive_id)]))
}
