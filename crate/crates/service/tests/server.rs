use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{connect_async, MaybeTlsStream, WebSocketStream};

use bimtwin_core::bim::ScenarioDocument;
use bimtwin_core::scenarios::{self, BlockOptions};
use bimtwin_core::workflow::{Policy, Session, SupervisorCommand, WorkflowEvent, WorkflowState};
use bimtwin_service::server::{router, ServeOptions, Service};
use bimtwin_service::wire::{EventPayload, WireBody, WireMessage};

type Ws = WebSocketStream<MaybeTlsStream<TcpStream>>;

const SESSION: &str = "test-session";

async fn serve() -> (Service, String) {
    let doc = scenarios::blocks(&BlockOptions::new(0.010));
    let session = Session::new(doc, 1, Policy::Interactive).unwrap();
    let service = Service::spawn(session, ServeOptions { session_id: SESSION.into(), tick_delay: Duration::ZERO });
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let app = router(service.clone());
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    (service, format!("127.0.0.1:{}", addr.port()))
}

/// Reads frames and audits the per-connection sequence numbering.
struct Observer {
    ws: Ws,
    next_seq: u64,
    events: Vec<EventPayload>,
}

impl Observer {
    async fn connect(addr: &str) -> Self {
        let (ws, _) = connect_async(format!("ws://{addr}/ws")).await.unwrap();
        let mut o = Self { ws, next_seq: 0, events: vec![] };
        let hello = o.frame().await;
        assert!(matches!(hello.body, WireBody::Hello(ref h) if h.supported_versions == [1]));
        o
    }

    async fn frame(&mut self) -> WireMessage {
        loop {
            let msg = tokio::time::timeout(Duration::from_secs(20), self.ws.next())
                .await
                .expect("frame within timeout")
                .expect("stream open")
                .expect("valid websocket message");
            let Message::Text(text) = msg else { continue };
            let m = WireMessage::parse(text.as_str()).expect("server frames parse");
            assert_eq!(m.seq, self.next_seq, "outbound sequence gap");
            assert_eq!(m.session_id, SESSION);
            self.next_seq += 1;
            if let WireBody::Event(e) = &m.body {
                assert_eq!(e.index, self.events.len() as u64, "event index gap");
                self.events.push(e.clone());
            }
            return m;
        }
    }

    /// Consumes frames until an event moves the session into `state`.
    async fn until_state(&mut self, state: WorkflowState) {
        loop {
            if let WireBody::Event(e) = self.frame().await.body {
                if matches!(e.event, WorkflowEvent::StateChanged { to, .. } if to == state) {
                    return;
                }
            }
        }
    }

    /// Consumes frames until a non-event reply arrives.
    async fn reply(&mut self) -> WireBody {
        loop {
            let m = self.frame().await;
            if !matches!(m.body, WireBody::Event(_)) {
                return m.body;
            }
        }
    }

    async fn send_text(&mut self, text: String) {
        self.ws.send(Message::Text(text.into())).await.unwrap();
    }

    async fn command(&mut self, seq: u64, cmd: SupervisorCommand) -> WireBody {
        self.send_text(WireMessage::new(seq, SESSION, WireBody::Command(cmd)).to_json()).await;
        self.reply().await
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn scenario_endpoint_serves_the_live_document() {
    let (_service, addr) = serve().await;
    let body = reqwest::get(format!("http://{addr}/scenario")).await.unwrap().text().await.unwrap();
    let doc = ScenarioDocument::parse(&body).unwrap();
    assert_eq!(doc.name, "blocks");
    assert!(!doc.stacks.is_empty());
}

#[tokio::test(flavor = "multi_thread")]
async fn commands_are_acked_or_rejected_and_streams_stay_ordered() {
    let (service, addr) = serve().await;
    let mut a = Observer::connect(&addr).await;
    a.until_state(WorkflowState::AwaitTargetConfirm).await;

    a.send_text("{not json".into()).await;
    assert!(matches!(a.reply().await, WireBody::Error(ref e) if e.in_reply_to.is_none()));
    a.send_text(r#"{"type":"teleport","seq":1,"session_id":"test-session","version":1,"payload":{}}"#.into()).await;
    assert!(matches!(a.reply().await, WireBody::Error(ref e) if e.in_reply_to == Some(1)));
    assert_eq!(service.state(), WorkflowState::AwaitTargetConfirm);

    match a.command(2, SupervisorCommand::ApprovePlan).await {
        WireBody::Error(e) => assert_eq!(e.in_reply_to, Some(2)),
        other => panic!("illegal command accepted: {other:?}"),
    }
    assert_eq!(service.state(), WorkflowState::AwaitTargetConfirm);
    match a.command(2, SupervisorCommand::ConfirmTarget).await {
        WireBody::Error(e) => assert!(e.message.contains("does not increase")),
        other => panic!("replayed sequence accepted: {other:?}"),
    }
    let bogus = WireMessage::new(3, "other", WireBody::Command(SupervisorCommand::ConfirmTarget));
    a.send_text(bogus.to_json()).await;
    assert!(matches!(a.reply().await, WireBody::Error(_)));
    assert_eq!(service.state(), WorkflowState::AwaitTargetConfirm);

    match a.command(4, SupervisorCommand::ConfirmTarget).await {
        WireBody::Ack(ack) => assert_eq!(ack.ack_seq, 4),
        other => panic!("legal command rejected: {other:?}"),
    }
    a.until_state(WorkflowState::AwaitPlanApproval).await;

    let status = reqwest::Client::new().post(format!("http://{addr}/safety")).send().await.unwrap().status();
    assert_eq!(status.as_u16(), 409);

    let mut b = Observer::connect(&addr).await;
    b.until_state(WorkflowState::AwaitPlanApproval).await;
    assert_eq!(a.events, b.events[..a.events.len()]);

    match a.command(5, SupervisorCommand::ApprovePlan).await {
        WireBody::Ack(_) => {}
        other => panic!("approval rejected: {other:?}"),
    }
    a.until_state(WorkflowState::AwaitTargetConfirm).await;
    b.until_state(WorkflowState::AwaitTargetConfirm).await;
    let n = a.events.len().min(b.events.len());
    assert_eq!(a.events[..n], b.events[..n]);
    assert!(a.events.iter().any(|e| matches!(e.event, WorkflowEvent::TargetCompleted { .. })));

    let log = reqwest::get(format!("http://{addr}/log")).await.unwrap().text().await.unwrap();
    let replayed = bimtwin_core::workflow::replay(&bimtwin_core::workflow::parse_log(&log).unwrap(), true).unwrap();
    let checkpoint = reqwest::get(format!("http://{addr}/checkpoint")).await.unwrap().text().await.unwrap();
    assert_eq!(replayed.repo().export_checkpoint(), checkpoint);
}
