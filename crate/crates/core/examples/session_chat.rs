// SPDX-License-Identifier: Apache-2.0

//! A multi-turn referring session driven in-process: clicks and drags become
//! `<box>` spans in the prompt sent to the backend.

use std::sync::Arc;

use spotkit::backend::{Backend, BackendError, BackendRequest, BackendResponse};
use spotkit::session::{MemoryStore, ReferringEvent, SessionManager};

/// Echoes what the model would see.
struct Echo;

impl Backend for Echo {
    fn id(&self) -> String {
        "echo".into()
    }

    fn complete(&self, req: &BackendRequest) -> Result<BackendResponse, BackendError> {
        Ok(BackendResponse {
            text: format!("({} turn(s) of context) you asked: {}", req.turns.len(), req.last_user_text()),
            confidence: None,
        })
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let manager = SessionManager::new(Arc::new(MemoryStore::new()), Arc::new(Echo)).with_history_window(6);
    let id = manager.create_session("img/kitchen.jpg", 800, 600)?;

    let reply = manager.post_message(&id, "What is <region> used for?", &[ReferringEvent::drag(420.0, 330.0, 120.0, 90.0)])?;
    println!("user: {}\nassistant: {}", reply.rendered_user_text, reply.turn.text);

    let reply = manager.post_message(&id, "And how does it compare with", &[ReferringEvent::click(600.0, 450.0)])?;
    println!("user: {}\nassistant: {}", reply.rendered_user_text, reply.turn.text);

    if let Err(e) = manager.post_message(&id, "Compare <region> with <region>", &[ReferringEvent::click(1.0, 1.0)]) {
        println!("rejected: {e}");
    }

    let view = manager.get_transcript(&id)?;
    println!("\n{} turns stored for {}", view.turns.len(), view.image_uri);
    for t in &view.turns {
        println!("  {:<9} {} {:?}", t.role.to_string(), t.text, t.regions_px);
    }
    Ok(())
}
