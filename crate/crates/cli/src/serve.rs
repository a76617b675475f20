//! HTTP and WebSocket frame server.
//!
//! * `GET /info` returns [`ServerInfo`] as JSON.
//! * `GET /frame?pose=<base64>&time=&w=&h=&fov_y=` returns one PNG.
//! * `GET /stream` upgrades to a WebSocket speaking the [`crate::protocol`]
//!   messages. Only the newest pending pose is rendered; poses whose id is
//!   not above the last answered id are dropped.

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Instant;

use anyhow::Result;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use futures::{SinkExt, StreamExt};
use hyperreel_core::checkpoint::Checkpoint;
use hyperreel_core::geometry::Camera;
use hyperreel_core::render::SceneModel;
use serde::{Deserialize, Serialize};
use tokio::sync::{mpsc, watch};
use tokio::task::JoinHandle;

use crate::commands::render_png;
use crate::protocol::{
    camera_from_pose, decode_pose_param, encode_frame, parse_pose_message, ErrorReply, FrameMeta,
    PoseMessage, DEFAULT_FOV_Y, MAX_FRAME_EDGE,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServerInfo {
    pub dynamic: bool,
    pub keyframe_times: Vec<f64>,
    pub primitive_kind: String,
    pub n_primitives: usize,
    pub iteration: u64,
    pub default_fov_y: f64,
    pub max_frame_edge: u32,
}

pub struct ServerState {
    pub model: SceneModel,
    pub info: ServerInfo,
}

impl ServerState {
    pub fn new(checkpoint: Checkpoint) -> Self {
        let model = checkpoint.model;
        let info = ServerInfo {
            dynamic: model.dynamic(),
            keyframe_times: model.volume.keyframe_times.clone(),
            primitive_kind: format!("{:?}", model.network_config.primitive_kind),
            n_primitives: model.network_config.n_primitives,
            iteration: checkpoint.iteration,
            default_fov_y: DEFAULT_FOV_Y,
            max_frame_edge: MAX_FRAME_EDGE,
        };
        ServerState { model, info }
    }
}

pub fn router(state: Arc<ServerState>) -> Router {
    Router::new()
        .route("/info", get(info))
        .route("/frame", get(frame))
        .route("/stream", get(stream))
        .with_state(state)
}

/// Binds `addr` and serves in a background task. Returns the bound address,
/// which matters when `addr` asks for port 0.
pub async fn start(
    state: Arc<ServerState>,
    addr: SocketAddr,
) -> Result<(SocketAddr, JoinHandle<std::io::Result<()>>)> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    let bound = listener.local_addr()?;
    let handle = tokio::spawn(async move { axum::serve(listener, router(state)).await });
    Ok((bound, handle))
}

/// Serves until the process is stopped.
pub async fn run(state: Arc<ServerState>, addr: SocketAddr) -> Result<()> {
    let (bound, handle) = start(state, addr).await?;
    log::info!("listening on http://{bound}");
    handle.await??;
    Ok(())
}

async fn info(State(state): State<Arc<ServerState>>) -> Json<ServerInfo> {
    Json(state.info.clone())
}

#[derive(Debug, Deserialize)]
pub struct FrameQuery {
    pub pose: String,
    pub time: Option<f64>,
    pub w: u32,
    pub h: u32,
    pub fov_y: Option<f64>,
}

fn bad_request(reason: String) -> Response {
    (StatusCode::BAD_REQUEST, Json(ErrorReply::new(None, reason))).into_response()
}

async fn render_blocking(
    state: Arc<ServerState>,
    camera: Camera,
    time: Option<f64>,
) -> Result<(Vec<u8>, f64)> {
    tokio::task::spawn_blocking(move || {
        let t0 = Instant::now();
        let png = render_png(&state.model, &camera, time)?;
        Ok((png, t0.elapsed().as_secs_f64() * 1e3))
    })
    .await?
}

async fn frame(State(state): State<Arc<ServerState>>, Query(q): Query<FrameQuery>) -> Response {
    let camera = match decode_pose_param(&q.pose)
        .and_then(|pose| camera_from_pose(&pose, q.fov_y.unwrap_or(DEFAULT_FOV_Y), q.w, q.h))
    {
        Ok(c) => c,
        Err(e) => return bad_request(format!("{e:#}")),
    };
    match render_blocking(state, camera, q.time).await {
        Ok((png, ms)) => (
            [
                (header::CONTENT_TYPE, "image/png".to_string()),
                (
                    header::HeaderName::from_static("x-render-milliseconds"),
                    format!("{ms:.3}"),
                ),
            ],
            png,
        )
            .into_response(),
        Err(e) => (
            StatusCode::INTERNAL_SERVER_ERROR,
            Json(ErrorReply::new(None, format!("{e:#}"))),
        )
            .into_response(),
    }
}

async fn stream(State(state): State<Arc<ServerState>>, ws: WebSocketUpgrade) -> Response {
    ws.on_upgrade(move |socket| session(state, socket))
}

fn error_message(request_id: Option<u32>, reason: String) -> Message {
    Message::Text(
        serde_json::to_string(&ErrorReply::new(request_id, reason))
            .expect("error reply serializes"),
    )
}

async fn session(state: Arc<ServerState>, socket: WebSocket) {
    let (mut sink, mut incoming) = socket.split();
    let (out_tx, mut out_rx) = mpsc::unbounded_channel::<Message>();
    let (pose_tx, mut pose_rx) = watch::channel::<Option<PoseMessage>>(None);

    let writer = tokio::spawn(async move {
        while let Some(msg) = out_rx.recv().await {
            if sink.send(msg).await.is_err() {
                break;
            }
        }
    });

    let render_out = out_tx.clone();
    let renderer = tokio::spawn(async move {
        let mut last_answered: Option<u32> = None;
        while pose_rx.changed().await.is_ok() {
            let Some(msg) = pose_rx.borrow_and_update().clone() else {
                continue;
            };
            if last_answered.is_some_and(|last| msg.request_id <= last) {
                continue;
            }
            last_answered = Some(msg.request_id);
            let camera =
                match camera_from_pose(&msg.camera_to_world, msg.fov_y, msg.width, msg.height) {
                    Ok(c) => c,
                    Err(e) => {
                        let _ =
                            render_out.send(error_message(Some(msg.request_id), format!("{e:#}")));
                        continue;
                    }
                };
            let replies = match render_blocking(state.clone(), camera, Some(msg.time)).await {
                Ok((png, ms)) => vec![
                    Message::Text(
                        serde_json::to_string(&FrameMeta::new(msg.request_id, ms))
                            .expect("meta serializes"),
                    ),
                    Message::Binary(encode_frame(msg.request_id, &png)),
                ],
                Err(e) => vec![error_message(Some(msg.request_id), format!("{e:#}"))],
            };
            for r in replies {
                if render_out.send(r).is_err() {
                    return;
                }
            }
        }
    });

    while let Some(Ok(msg)) = incoming.next().await {
        match msg {
            Message::Text(text) => match parse_pose_message(&text) {
                Ok(pose) => {
                    pose_tx.send_replace(Some(pose));
                }
                Err(e) => {
                    let _ = out_tx.send(error_message(None, format!("{e:#}")));
                }
            },
            Message::Binary(_) => {
                let _ = out_tx.send(error_message(
                    None,
                    "binary messages are not accepted".into(),
                ));
            }
            Message::Close(_) => break,
            Message::Ping(_) | Message::Pong(_) => {}
        }
    }
    drop(pose_tx);
    let _ = renderer.await;
    drop(out_tx);
    let _ = writer.await;
}
