// SPDX-License-Identifier: Apache-2.0

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde_json::{json, Value};
use tokio::sync::oneshot;

use spotkit::backend::{Backend, BackendError, BackendRequest, BackendResponse};
use spotkit::session::{serve, FileStore, MemoryStore, SessionManager, SessionStore};

#[derive(Default)]
struct Mock {
    down: AtomicBool,
    delay_ms: AtomicU64,
}

impl Backend for Mock {
    fn id(&self) -> String {
        "mock".into()
    }

    fn complete(&self, req: &BackendRequest) -> Result<BackendResponse, BackendError> {
        std::thread::sleep(Duration::from_millis(self.delay_ms.load(Ordering::SeqCst)));
        if self.down.load(Ordering::SeqCst) {
            return Err(BackendError::Transport("connection refused".into()));
        }
        Ok(BackendResponse {
            text: format!("turns={}", req.turns.len()),
            confidence: None,
        })
    }
}

struct Server {
    base: String,
    stop: Option<oneshot::Sender<()>>,
    done: Option<std::thread::JoinHandle<()>>,
}

impl Server {
    fn start(store: Arc<dyn SessionStore>, backend: Arc<Mock>) -> Self {
        let manager = Arc::new(SessionManager::new(store, backend));
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        listener.set_nonblocking(true).unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let (stop, rx) = oneshot::channel::<()>();
        let done = std::thread::spawn(move || {
            let rt = tokio::runtime::Runtime::new().unwrap();
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener).unwrap();
                serve(listener, manager, async {
                    let _ = rx.await;
                })
                .await
                .unwrap();
            });
        });
        Self { base, stop: Some(stop), done: Some(done) }
    }

    fn shutdown(&mut self) {
        if let Some(s) = self.stop.take() {
            let _ = s.send(());
        }
        if let Some(d) = self.done.take() {
            d.join().unwrap();
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn agent() -> ureq::Agent {
    ureq::Agent::config_builder().http_status_as_error(false).build().into()
}

fn post(base: &str, path: &str, body: &str) -> (u16, Value) {
    let mut resp = agent()
        .post(format!("{base}{path}"))
        .header("content-type", "application/json")
        .send(body)
        .unwrap();
    let code = resp.status().as_u16();
    (code, resp.body_mut().read_json().unwrap_or(Value::Null))
}

fn get(base: &str, path: &str) -> (u16, Value) {
    let mut resp = agent().get(format!("{base}{path}")).call().unwrap();
    let code = resp.status().as_u16();
    (code, resp.body_mut().read_json().unwrap_or(Value::Null))
}

fn create(base: &str) -> String {
    let (code, body) = post(base, "/v1/sessions", r#"{"image_uri":"img/kitchen.jpg","width":800,"height":600}"#);
    assert_eq!(code, 201, "{body}");
    body["session_id"].as_str().unwrap().to_string()
}

#[test]
fn healthz_and_a_full_exchange() {
    let server = Server::start(Arc::new(MemoryStore::new()), Arc::new(Mock::default()));
    let base = &server.base;
    assert_eq!(get(base, "/v1/healthz"), (200, json!({"status": "ok"})));

    let id = create(base);
    assert_eq!(id.len(), 32);
    let msg = json!({
        "text": "What is on the table <region>?",
        "events": [{"kind": "box", "points_px": [[400, 300], [80, 60]]}]
    });
    let (code, reply) = post(base, &format!("/v1/sessions/{id}/messages"), &msg.to_string());
    assert_eq!(code, 200, "{reply}");
    assert_eq!(reply["turn"]["text"], "turns=1");
    assert_eq!(reply["rendered_user_text"], "What is on the table <box>0.100,0.100,0.500,0.500</box>?");

    let (code, reply) = post(base, &format!("/v1/sessions/{id}/messages"), r#"{"text":"Anything else?"}"#);
    assert_eq!(code, 200, "{reply}");
    assert_eq!(reply["turn"]["text"], "turns=3");

    let (code, view) = get(base, &format!("/v1/sessions/{id}"));
    assert_eq!(code, 200);
    assert_eq!(view["width"], 800);
    let turns = view["turns"].as_array().unwrap();
    assert_eq!(turns.len(), 4);
    assert_eq!(turns[0]["role"], "user");
    assert_eq!(turns[0]["regions_px"][0], json!([[80.0, 60.0], [400.0, 300.0]]));
    assert_eq!(turns[1]["role"], "assistant");
}

#[test]
fn errors_map_to_status_codes() {
    let server = Server::start(Arc::new(MemoryStore::new()), Arc::new(Mock::default()));
    let base = &server.base;
    let (code, body) = get(base, "/v1/sessions/00000000000000000000000000000000");
    assert_eq!(code, 404);
    assert_eq!(body["error"], "not_found");
    assert_eq!(post(base, "/v1/sessions/feed/messages", r#"{"text":"hi"}"#).0, 404);

    assert_eq!(post(base, "/v1/sessions", "{not json").0, 422);
    assert_eq!(post(base, "/v1/sessions", r#"{"image_uri":"x.jpg"}"#).0, 422);
    assert_eq!(post(base, "/v1/sessions", r#"{"image_uri":"x.jpg","width":0,"height":5}"#).0, 422);

    let id = create(base);
    let path = format!("/v1/sessions/{id}/messages");
    let (code, body) = post(base, &path, r#"{"text":"compare <region> and <region>","events":[{"kind":"click","points_px":[[1,1]]}]}"#);
    assert_eq!(code, 422);
    assert_eq!(body["error"], "validation");
    assert!(!body["detail"].as_str().unwrap().is_empty());
    let outside = r#"{"text":"what is <region>","events":[{"kind":"click","points_px":[[900,10]]}]}"#;
    assert_eq!(post(base, &path, outside).0, 422);
    assert_eq!(post(base, &path, r#"{"text":"   "}"#).0, 422);
    assert_eq!(get(base, &format!("/v1/sessions/{id}")).1["turns"], json!([]));
}

#[test]
fn backend_outage_is_a_bad_gateway_and_the_service_stays_up() {
    let backend = Arc::new(Mock::default());
    let server = Server::start(Arc::new(MemoryStore::new()), backend.clone());
    let base = &server.base;
    let id = create(base);
    let path = format!("/v1/sessions/{id}/messages");
    backend.down.store(true, Ordering::SeqCst);
    let (code, body) = post(base, &path, r#"{"text":"hello"}"#);
    assert_eq!(code, 502);
    assert_eq!(body["error"], "backend");
    assert_eq!(get(base, &format!("/v1/sessions/{id}")).1["turns"], json!([]));
    assert_eq!(get(base, "/v1/healthz").0, 200);

    backend.down.store(false, Ordering::SeqCst);
    assert_eq!(post(base, &path, r#"{"text":"hello"}"#).0, 200);
    assert_eq!(get(base, &format!("/v1/sessions/{id}")).1["turns"].as_array().unwrap().len(), 2);
}

#[test]
fn shutdown_lets_in_flight_requests_finish() {
    let backend = Arc::new(Mock::default());
    let mut server = Server::start(Arc::new(MemoryStore::new()), backend.clone());
    let base = server.base.clone();
    let id = create(&base);
    backend.delay_ms.store(400, Ordering::SeqCst);
    let path = format!("/v1/sessions/{id}/messages");
    let pending = std::thread::spawn({
        let base = base.clone();
        move || post(&base, &path, r#"{"text":"slow one"}"#)
    });
    std::thread::sleep(Duration::from_millis(100));
    server.shutdown();
    let (code, body) = pending.join().unwrap();
    assert_eq!(code, 200, "{body}");
    assert!(agent().get(format!("{base}/v1/healthz")).call().is_err());
}

#[test]
fn file_store_survives_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let store = || -> Arc<dyn SessionStore> { Arc::new(FileStore::open(dir.path(), None).unwrap()) };
    let mut first = Server::start(store(), Arc::new(Mock::default()));
    let id = create(&first.base);
    assert_eq!(post(&first.base, &format!("/v1/sessions/{id}/messages"), r#"{"text":"hi"}"#).0, 200);
    first.shutdown();

    let second = Server::start(store(), Arc::new(Mock::default()));
    let (code, view) = get(&second.base, &format!("/v1/sessions/{id}"));
    assert_eq!(code, 200);
    assert_eq!(view["turns"].as_array().unwrap().len(), 2);
}
