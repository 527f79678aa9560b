//! Hosts one live session: a single engine thread applies every input in
//! arrival order, and any number of observers follow its event stream.
//!
//! Routes:
//! - `GET /scenario`: the current repository as a scenario document
//! - `GET /ws`: websocket carrying [`WireMessage`] frames
//! - `POST /safety`: safety-curtain trip
//! - `GET /checkpoint`: checkpoint export of the repository
//! - `GET /log`: the session log as NDJSON

use std::sync::{mpsc, Arc, Mutex};
use std::thread;
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures_util::{SinkExt, StreamExt};
use tokio::sync::{broadcast, oneshot};

use bimtwin_core::bim::ScenarioDocument;
use bimtwin_core::workflow::{LogEntry, Session, SupervisorCommand, WorkflowEvent, WorkflowState};

use crate::wire::{AckPayload, ErrorPayload, EventPayload, HelloPayload, WireBody, WireMessage, WIRE_VERSION};

const BROADCAST_CAPACITY: usize = 4096;

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub session_id: String,
    /// Pause between execution ticks so observers can follow the motion.
    pub tick_delay: Duration,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self { session_id: "session-0".into(), tick_delay: Duration::ZERO }
    }
}

enum Request {
    Command(SupervisorCommand, oneshot::Sender<Result<WorkflowState, String>>),
    SafetyInterrupt(oneshot::Sender<Result<WorkflowState, String>>),
    Log(oneshot::Sender<String>),
    Checkpoint(oneshot::Sender<String>),
}

struct Published {
    events: Vec<EventPayload>,
    state: WorkflowState,
    document: ScenarioDocument,
}

struct Inner {
    session_id: String,
    published: Mutex<Published>,
    events_tx: broadcast::Sender<EventPayload>,
}

/// Handle to a running session engine.
#[derive(Clone)]
pub struct Service {
    inner: Arc<Inner>,
    /// Dropping the last handle closes the channel and stops the engine.
    requests: Arc<Mutex<mpsc::Sender<Request>>>,
}

struct Engine {
    session: Session,
    inner: Arc<Inner>,
    published_records: usize,
    tick_delay: Duration,
}

impl Engine {
    fn publish(&mut self) {
        let new: Vec<_> = self.session.log()[self.published_records..]
            .iter()
            .filter_map(|r| match &r.entry {
                LogEntry::Event(e) => Some((r.time, e.clone())),
                _ => None,
            })
            .collect();
        self.published_records = self.session.log().len();
        let refresh = new.iter().any(|(_, e)| !matches!(e, WorkflowEvent::ExecutionState { .. }));
        let document = refresh.then(|| self.session.repo().to_document());
        let mut p = self.inner.published.lock().expect("publisher lock");
        for (time, event) in new {
            let payload = EventPayload { index: p.events.len() as u64, time, event };
            p.events.push(payload.clone());
            let _ = self.inner.events_tx.send(payload);
        }
        p.state = self.session.state();
        if let Some(d) = document {
            p.document = d;
        }
    }

    fn serve(&mut self, req: Request) {
        match req {
            Request::Command(cmd, reply) => {
                let r = self.session.handle(cmd).map(|_| self.session.state()).map_err(|e| e.to_string());
                self.publish();
                let _ = reply.send(r);
            }
            Request::SafetyInterrupt(reply) => {
                let r = self.session.safety_interrupt().map(|_| self.session.state()).map_err(|e| e.to_string());
                self.publish();
                let _ = reply.send(r);
            }
            Request::Log(reply) => {
                let _ = reply.send(self.session.log_ndjson());
            }
            Request::Checkpoint(reply) => {
                let _ = reply.send(self.session.repo().export_checkpoint());
            }
        }
    }

    fn run(mut self, rx: mpsc::Receiver<Request>) {
        if self.session.state() == WorkflowState::Idle {
            let _ = self.session.start();
            self.publish();
        }
        loop {
            while let Ok(req) = rx.try_recv() {
                self.serve(req);
            }
            if self.session.state().is_autonomous() {
                let executing = self.session.state() == WorkflowState::Executing;
                let _ = self.session.step();
                self.publish();
                if executing && !self.tick_delay.is_zero() {
                    thread::sleep(self.tick_delay);
                }
            } else {
                match rx.recv() {
                    Ok(req) => self.serve(req),
                    Err(_) => return,
                }
            }
        }
    }
}

impl Service {
    /// Starts the engine thread for `session`; an idle session is started.
    pub fn spawn(session: Session, opts: ServeOptions) -> Self {
        let (tx, rx) = mpsc::channel();
        let (events_tx, _) = broadcast::channel(BROADCAST_CAPACITY);
        let inner = Arc::new(Inner {
            session_id: opts.session_id,
            published: Mutex::new(Published {
                events: vec![],
                state: session.state(),
                document: session.repo().to_document(),
            }),
            events_tx,
        });
        let mut engine = Engine { session, inner: inner.clone(), published_records: 0, tick_delay: opts.tick_delay };
        engine.publish();
        thread::Builder::new()
            .name("bimtwin-engine".into())
            .spawn(move || engine.run(rx))
            .expect("engine thread starts");
        Self { inner, requests: Arc::new(Mutex::new(tx)) }
    }

    pub fn session_id(&self) -> &str {
        &self.inner.session_id
    }

    pub fn state(&self) -> WorkflowState {
        self.inner.published.lock().expect("publisher lock").state
    }

    pub fn document(&self) -> ScenarioDocument {
        self.inner.published.lock().expect("publisher lock").document.clone()
    }

    /// Events published so far plus a receiver for everything after them.
    pub fn subscribe(&self) -> (Vec<EventPayload>, broadcast::Receiver<EventPayload>) {
        let p = self.inner.published.lock().expect("publisher lock");
        (p.events.clone(), self.inner.events_tx.subscribe())
    }

    fn events_from(&self, index: u64) -> Vec<EventPayload> {
        let p = self.inner.published.lock().expect("publisher lock");
        p.events.get(index as usize..).map(<[_]>::to_vec).unwrap_or_default()
    }

    fn request<T>(&self, make: impl FnOnce(oneshot::Sender<T>) -> Request) -> oneshot::Receiver<T> {
        let (tx, rx) = oneshot::channel();
        let _ = self.requests.lock().expect("request lock").send(make(tx));
        rx
    }

    pub async fn submit(&self, cmd: SupervisorCommand) -> Result<WorkflowState, String> {
        self.request(|tx| Request::Command(cmd, tx)).await.map_err(|_| "engine stopped".to_string())?
    }

    pub async fn safety_interrupt(&self) -> Result<WorkflowState, String> {
        self.request(Request::SafetyInterrupt).await.map_err(|_| "engine stopped".to_string())?
    }

    pub async fn log_ndjson(&self) -> String {
        self.request(Request::Log).await.unwrap_or_default()
    }

    pub async fn checkpoint(&self) -> String {
        self.request(Request::Checkpoint).await.unwrap_or_default()
    }
}

pub fn router(service: Service) -> Router {
    Router::new()
        .route("/scenario", get(scenario))
        .route("/ws", get(ws_upgrade))
        .route("/safety", post(safety))
        .route("/checkpoint", get(checkpoint))
        .route("/log", get(log))
        .with_state(service)
}

async fn scenario(State(s): State<Service>) -> Json<ScenarioDocument> {
    Json(s.document())
}

async fn safety(State(s): State<Service>) -> Response {
    match s.safety_interrupt().await {
        Ok(state) => Json(state).into_response(),
        Err(e) => (StatusCode::CONFLICT, e).into_response(),
    }
}

async fn checkpoint(State(s): State<Service>) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], s.checkpoint().await).into_response()
}

async fn log(State(s): State<Service>) -> Response {
    ([(header::CONTENT_TYPE, "application/x-ndjson")], s.log_ndjson().await).into_response()
}

async fn ws_upgrade(State(s): State<Service>, ws: WebSocketUpgrade) -> Response {
    ws.on_upgrade(move |socket| observe(socket, s))
}

struct Outbound {
    seq: u64,
    session_id: String,
}

impl Outbound {
    fn frame(&mut self, body: WireBody) -> Message {
        let m = WireMessage::new(self.seq, self.session_id.clone(), body);
        self.seq += 1;
        Message::Text(m.to_json().into())
    }

    fn error(&mut self, in_reply_to: Option<u64>, message: impl Into<String>) -> Message {
        self.frame(WireBody::Error(ErrorPayload { in_reply_to, message: message.into() }))
    }
}

async fn observe(socket: WebSocket, service: Service) {
    let (mut sink, mut stream) = socket.split();
    let mut out = Outbound { seq: 0, session_id: service.session_id().to_string() };
    let (backlog, mut live) = service.subscribe();
    let hello = HelloPayload { supported_versions: vec![WIRE_VERSION], state: Some(service.state()) };
    if sink.send(out.frame(WireBody::Hello(hello))).await.is_err() {
        return;
    }
    let mut next_index = 0u64;
    for e in backlog {
        next_index = e.index + 1;
        if sink.send(out.frame(WireBody::Event(e))).await.is_err() {
            return;
        }
    }
    let mut last_client_seq: Option<u64> = None;
    loop {
        tokio::select! {
            received = live.recv() => {
                let batch = match received {
                    Ok(e) if e.index < next_index => continue,
                    Ok(e) if e.index == next_index => vec![e],
                    Ok(_) | Err(broadcast::error::RecvError::Lagged(_)) => service.events_from(next_index),
                    Err(broadcast::error::RecvError::Closed) => return,
                };
                for e in batch {
                    next_index = e.index + 1;
                    if sink.send(out.frame(WireBody::Event(e))).await.is_err() {
                        return;
                    }
                }
            }
            incoming = stream.next() => {
                let text = match incoming {
                    Some(Ok(Message::Text(t))) => t,
                    Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return,
                    Some(Ok(Message::Binary(_))) => {
                        let reply = out.error(None, "binary frames are not supported");
                        if sink.send(reply).await.is_err() { return; }
                        continue;
                    }
                    Some(Ok(_)) => continue,
                };
                let reply = match client_frame(&service, text.as_str(), &mut last_client_seq).await {
                    Ok(Some(body)) => out.frame(body),
                    Ok(None) => continue,
                    Err((seq, msg)) => out.error(seq, msg),
                };
                if sink.send(reply).await.is_err() {
                    return;
                }
            }
        }
    }
}

async fn client_frame(
    service: &Service,
    text: &str,
    last_seq: &mut Option<u64>,
) -> Result<Option<WireBody>, (Option<u64>, String)> {
    let m = WireMessage::parse(text).map_err(|(seq, e)| (seq, e.to_string()))?;
    let seq = Some(m.seq);
    if m.session_id != service.session_id() {
        return Err((seq, format!("unknown session '{}'", m.session_id)));
    }
    if last_seq.is_some_and(|last| m.seq <= last) {
        return Err((seq, format!("sequence number {} does not increase", m.seq)));
    }
    *last_seq = Some(m.seq);
    match m.body {
        WireBody::Hello(h) if h.supported_versions.contains(&WIRE_VERSION) => Ok(None),
        WireBody::Hello(h) => Err((seq, format!("no common protocol version in {:?}", h.supported_versions))),
        WireBody::Command(cmd) => match service.submit(cmd).await {
            Ok(state) => Ok(Some(WireBody::Ack(AckPayload { ack_seq: m.seq, state }))),
            Err(e) => Err((seq, e)),
        },
        other => Err((seq, format!("clients may not send '{}' frames", other.type_tag()))),
    }
}
