// SPDX-License-Identifier: Apache-2.0

//! The session HTTP API on an ephemeral port, exercised with a plain HTTP
//! client and shut down gracefully.

use std::sync::Arc;

use serde_json::{json, Value};
use spotkit::backend::{GtIndex, ImageTruth, PerfectOracle};
use spotkit::corpus::GtObject;
use spotkit::geometry::Region;
use spotkit::session::{serve, MemoryStore, SessionManager};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut gt = GtIndex::default();
    gt.insert(
        "img/street.jpg",
        ImageTruth {
            objects: vec![GtObject { category: "bicycle".into(), bbox: Region::bbox(0.1, 0.4, 0.4, 0.9)? }],
            texts: vec![],
        },
    );
    let manager = Arc::new(SessionManager::new(Arc::new(MemoryStore::new()), Arc::new(PerfectOracle::new(gt))));

    let rt = tokio::runtime::Runtime::new()?;
    let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0"))?;
    let base = format!("http://{}", listener.local_addr()?);
    let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
    let server = rt.spawn(serve(listener, manager, async {
        let _ = stopped.await;
    }));

    let agent: ureq::Agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
    let health: Value = agent.get(format!("{base}/v1/healthz")).call()?.body_mut().read_json()?;
    println!("healthz: {health}");

    let created: Value = agent
        .post(format!("{base}/v1/sessions"))
        .send_json(json!({"image_uri": "img/street.jpg", "width": 1000, "height": 800}))?
        .body_mut()
        .read_json()?;
    let id = created["session_id"].as_str().unwrap().to_string();
    println!("session {id}");

    let body = json!({
        "text": "What can you see in this region? <region>",
        "events": [{"kind": "box", "points_px": [[100, 320], [400, 720]]}],
    });
    let mut resp = agent.post(format!("{base}/v1/sessions/{id}/messages")).send_json(&body)?;
    println!("{} {}", resp.status(), resp.body_mut().read_to_string()?);

    let mut resp = agent.get(format!("{base}/v1/sessions/unknown")).call()?;
    println!("{} {}", resp.status(), resp.body_mut().read_to_string()?);

    let _ = stop.send(());
    rt.block_on(server)??;
    println!("server stopped");
    Ok(())
}
