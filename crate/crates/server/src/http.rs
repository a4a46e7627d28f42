//! Admin HTTP API. Request bodies are parsed by hand so every malformed body
//! maps to 422, and responses are canonical JSON.

use std::convert::Infallible;
use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::Router;
use campus_pass_core::card::{CardRecord, CardStatus, CardUid, DeviceId, Phone, Role};
use campus_pass_core::event::to_canonical_json;
use campus_pass_core::wire::CommandName;
use campus_pass_core::world::{NewCard, WorldError};
use futures::stream::{self, StreamExt};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::hub::Hub;

pub const ADMIN_TOKEN_HEADER: &str = "x-admin-token";
const DEFAULT_EVENT_LIMIT: usize = 1000;

#[derive(Clone)]
struct App {
    hub: Arc<Hub>,
    admin_token: Option<String>,
}

pub fn router(hub: Arc<Hub>, admin_token: Option<String>) -> Router {
    let app = App { hub, admin_token };
    Router::new()
        .route("/cards", post(register_card).get(list_cards))
        .route("/cards/{uid}", delete(revoke_card))
        .route("/sessions", post(open_session).get(list_sessions))
        .route("/sessions/{id}/close", post(close_session))
        .route("/sessions/{id}/attendance.csv", get(attendance_csv))
        .route("/accounts/{uid}", get(account))
        .route("/accounts/{uid}/topup", post(topup))
        .route("/doors", get(doors))
        .route("/doors/{id}/shutdown", post(shutdown_door))
        .route("/doors/{id}/clear", post(clear_door))
        .route("/devices", get(devices))
        .route("/events", get(events))
        .route("/events/stream", get(event_stream))
        .layer(middleware::from_fn_with_state(app.clone(), require_token))
        .with_state(app)
}

async fn require_token(State(app): State<App>, req: Request, next: Next) -> Response {
    if let Some(expected) = &app.admin_token {
        let given = req.headers().get(ADMIN_TOKEN_HEADER).and_then(|v| v.to_str().ok());
        if given != Some(expected.as_str()) {
            return error(StatusCode::UNAUTHORIZED, "missing or wrong admin token");
        }
    }
    next.run(req).await
}

fn json_response<T: Serialize>(status: StatusCode, value: &T) -> Response {
    match to_canonical_json(value) {
        Ok(body) => (status, [(header::CONTENT_TYPE, "application/json")], body).into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, &e.to_string()),
    }
}

fn error(status: StatusCode, message: &str) -> Response {
    let body = to_canonical_json(&json!({ "error": message })).unwrap_or_default();
    (status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
}

struct ApiError {
    status: StatusCode,
    message: String,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        error(self.status, &self.message)
    }
}

impl From<WorldError> for ApiError {
    fn from(e: WorldError) -> Self {
        ApiError {
            status: world_status(&e),
            message: e.to_string(),
        }
    }
}

type ApiResult = Result<Response, ApiError>;

fn world_status(e: &WorldError) -> StatusCode {
    match e {
        WorldError::DuplicateUid(_) | WorldError::DuplicateSession(_) | WorldError::SessionClosed(_) => {
            StatusCode::CONFLICT
        }
        WorldError::UnknownCard(_) | WorldError::UnknownSession(_) | WorldError::UnknownDoor(_) => {
            StatusCode::NOT_FOUND
        }
        WorldError::Forbidden(_) => StatusCode::FORBIDDEN,
        WorldError::InvalidRequest(_) => StatusCode::UNPROCESSABLE_ENTITY,
        WorldError::Persist(_) => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError {
        status: StatusCode::UNPROCESSABLE_ENTITY,
        message: e.to_string(),
    })
}

fn parse_uid(text: &str) -> Result<CardUid, ApiError> {
    CardUid::parse(text).map_err(|e| ApiError {
        status: StatusCode::NOT_FOUND,
        message: e.to_string(),
    })
}

/// Card fields safe to show to any API caller.
#[derive(Serialize)]
struct CardView<'a> {
    uid: CardUid,
    holder_name: &'a str,
    role: Role,
    status: CardStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    owner_phone: Option<&'a Phone>,
    registered_at: campus_pass_core::Timestamp,
}

impl<'a> From<&'a CardRecord> for CardView<'a> {
    fn from(c: &'a CardRecord) -> Self {
        CardView {
            uid: c.uid,
            holder_name: &c.holder_name,
            role: c.role,
            status: c.status,
            owner_phone: c.owner_phone.as_ref(),
            registered_at: c.registered_at,
        }
    }
}

async fn register_card(State(app): State<App>, body: Bytes) -> ApiResult {
    let new: NewCard = parse_body(&body)?;
    let (card, _, _) = app.hub.mutate(|w, now| (w.register_card(new, now), Default::default()));
    Ok(json_response(StatusCode::CREATED, &CardView::from(&card?)))
}

/// Full records, salted digests included, so networked door controllers can
/// verify PINs locally.
async fn list_cards(State(app): State<App>) -> Response {
    let cards: Vec<CardRecord> = app.hub.read(|w| w.registry().iter().cloned().collect());
    json_response(StatusCode::OK, &cards)
}

async fn revoke_card(State(app): State<App>, Path(uid): Path<String>) -> ApiResult {
    let uid = parse_uid(&uid)?;
    let (result, _, _) = app.hub.mutate(|w, now| (w.revoke_card(uid, now), Default::default()));
    result?;
    let card = app
        .hub
        .read(|w| w.registry().get(&uid).cloned())
        .ok_or(WorldError::UnknownCard(uid))?;
    Ok(json_response(StatusCode::OK, &CardView::from(&card)))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct OpenSession {
    session_id: String,
    course: String,
    device_id: DeviceId,
}

async fn open_session(State(app): State<App>, body: Bytes) -> ApiResult {
    let req: OpenSession = parse_body(&body)?;
    let (session, _, _) = app.hub.mutate(|w, now| {
        (w.open_session(&req.session_id, &req.course, req.device_id, now), Default::default())
    });
    Ok(json_response(StatusCode::CREATED, &session?))
}

async fn list_sessions(State(app): State<App>) -> Response {
    let sessions: Vec<_> = app.hub.read(|w| w.attendance().sessions().cloned().collect());
    json_response(StatusCode::OK, &sessions)
}

async fn close_session(State(app): State<App>, Path(id): Path<String>) -> ApiResult {
    let (session, _, _) = app.hub.mutate(|w, now| (w.close_session(&id, now), Default::default()));
    Ok(json_response(StatusCode::OK, &session?))
}

async fn attendance_csv(State(app): State<App>, Path(id): Path<String>) -> ApiResult {
    let csv = app.hub.read(|w| w.export_csv(&id))?;
    Ok((StatusCode::OK, [(header::CONTENT_TYPE, "text/csv")], csv).into_response())
}

async fn account(State(app): State<App>, Path(uid): Path<String>) -> ApiResult {
    let uid = parse_uid(&uid)?;
    let account = app.hub.read(|w| w.account(&uid))?;
    Ok(json_response(StatusCode::OK, &account))
}

fn http_device() -> DeviceId {
    DeviceId::new("http").expect("valid id")
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Topup {
    amount_minor: i64,
    vendor_uid: CardUid,
    #[serde(default = "http_device")]
    device_id: DeviceId,
}

async fn topup(State(app): State<App>, Path(uid): Path<String>, body: Bytes) -> ApiResult {
    let uid = parse_uid(&uid)?;
    let req: Topup = parse_body(&body)?;
    let (result, _, _) = app.hub.mutate(|w, now| {
        (w.topup(uid, req.amount_minor, req.vendor_uid, req.device_id, now), Default::default())
    });
    result?;
    let account = app.hub.read(|w| w.account(&uid))?;
    Ok(json_response(StatusCode::OK, &account))
}

async fn doors(State(app): State<App>) -> Response {
    let doors = app.hub.read(|w| w.doors().clone());
    json_response(StatusCode::OK, &doors)
}

async fn devices(State(app): State<App>) -> Response {
    json_response(StatusCode::OK, &app.hub.connected_devices())
}

fn door_command(app: &App, id: &str, name: CommandName) -> ApiResult {
    let (result, _, _) = app.hub.mutate(|w, now| match w.door_command(id, name, "http", now) {
        Ok(effects) => (Ok(()), effects),
        Err(e) => (Err(e), Default::default()),
    });
    result?;
    let status = app.hub.read(|w| w.doors().iter().find(|(d, _)| d.as_str() == id).map(|(_, s)| *s));
    Ok(json_response(StatusCode::OK, &json!({ "door_id": id, "status": status })))
}

async fn shutdown_door(State(app): State<App>, Path(id): Path<String>) -> ApiResult {
    door_command(&app, &id, CommandName::Shutdown)
}

async fn clear_door(State(app): State<App>, Path(id): Path<String>) -> ApiResult {
    door_command(&app, &id, CommandName::Clear)
}

#[derive(Deserialize)]
struct EventsQuery {
    since: Option<u64>,
    limit: Option<usize>,
}

async fn events(State(app): State<App>, Query(q): Query<EventsQuery>) -> Response {
    let limit = q.limit.unwrap_or(DEFAULT_EVENT_LIMIT);
    let events = app.hub.read(|w| w.events().since(q.since.unwrap_or(0), limit).to_vec());
    json_response(StatusCode::OK, &events)
}

/// Newline-delimited EventRecords: the backlog after `since`, then live appends.
async fn event_stream(State(app): State<App>, Query(q): Query<EventsQuery>) -> Response {
    let (backlog, rx) = app.hub.subscribe(q.since.unwrap_or(0));
    let line = |e: campus_pass_core::EventRecord| Ok::<_, Infallible>(Bytes::from(e.to_line()));
    let live = stream::unfold(rx, |mut rx| async move { rx.recv().await.map(|e| (e, rx)) });
    let body = stream::iter(backlog).chain(live).map(line);
    let mut response = Response::new(Body::from_stream(body));
    response
        .headers_mut()
        .insert(header::CONTENT_TYPE, HeaderValue::from_static("application/x-ndjson"));
    response
}
