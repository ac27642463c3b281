// SPDX-License-Identifier: Apache-2.0

//! Region-grounded dialogue generation against a canned generator. Swap
//! `Canned` for `HttpLlmClient` to talk to a real chat-completions endpoint.

use std::path::Path;

use spotkit::backend::{BackendError, LlmClient};
use spotkit::corpus::{build_generation_prompt, generate_region_chats, read_jsonl, ChatContext, GenerationConfig, SeedExample};

struct Canned;

impl LlmClient for Canned {
    fn complete_text(&self, prompt: &str) -> Result<String, BackendError> {
        let task = prompt.rsplit("### Task").next().unwrap_or_default();
        Ok(if task.contains("brown dog") {
            "User: What is the dog at <box>0.100,0.500,0.450,0.900</box> doing?\n\
             Assistant: It is lying on the rug, next to a red ball at [0.6, 0.7, 0.7, 0.8]."
                .into()
        } else {
            // cites a region that is not in the context; rejected every time
            "User: What is at <box>0.700,0.700,0.900,0.900</box>?\nAssistant: A bird.".into()
        })
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let contexts: Vec<ChatContext> = read_jsonl(&fixtures.join("contexts.jsonl"))?;
    let seeds: Vec<SeedExample> = read_jsonl(&fixtures.join("seeds.jsonl"))?;
    let config = GenerationConfig::default();

    println!("--- prompt for {} ---\n{}", contexts[0].image.uri, build_generation_prompt(&contexts[0], &seeds, config.rounds));

    for (ctx, result) in contexts.iter().zip(generate_region_chats(&contexts, &seeds, &Canned, &config, 2)) {
        match result {
            Ok(chat) => {
                println!("{}: accepted", ctx.image.uri);
                for t in &chat.record.turns {
                    println!("  {}: {}", t.role, t.text);
                }
                println!("  regions: {:?}", chat.record.regions.iter().map(|r| r.points().to_vec()).collect::<Vec<_>>());
            }
            Err(e) => println!("{}: {e}", ctx.image.uri),
        }
    }
    Ok(())
}
