// SPDX-License-Identifier: Apache-2.0

//! Converts the bundled detection, OCR and VQA samples into one instruction
//! corpus with a held-out evaluation split.

use std::path::Path;

use spotkit::corpus::{
    ingest_detection_file, ingest_ocr_file, ingest_vqa_file, partition, read_records, write_records, IngestOptions,
    OutputMeta, PartitionPolicy, Referent,
};
use spotkit::instructgen::{render_conversation, TemplateRegistry};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let registry = TemplateRegistry::default();

    let mut records = Vec::new();
    let det = ingest_detection_file(&fixtures.join("detection.json"), &registry, &IngestOptions::new("coco"))?;
    let ocr = ingest_ocr_file(&fixtures.join("ocr.json"), &registry, &IngestOptions::new("coco_text"))?;
    let vqa = ingest_vqa_file(&fixtures.join("vqa.jsonl"), &registry, Referent::Box, &IngestOptions::new("v7w"))?;
    for out in [det, ocr, vqa] {
        for (reason, n) in out.diagnostic_summary() {
            println!("skipped {n}: {reason}");
        }
        records.extend(out.records);
    }

    let mut policy = PartitionPolicy::default();
    policy.eval_sources.insert("v7w".into());
    policy.holdout.insert("coco".into(), 0.3);
    let records = partition(records, &policy)?;

    let dir = tempfile_dir();
    let path = dir.join("corpus.jsonl");
    write_records(&path, &records, Some(&OutputMeta::new("example")))?;
    let reread = read_records(&path)?;
    println!("{} records written to {}", reread.len(), path.display());
    for r in reread.iter().take(4) {
        println!("\n[{} / {:?} / {}]", r.task, r.split, r.source);
        for (role, text) in render_conversation(r)? {
            println!("  {role}: {text}");
        }
    }
    Ok(())
}

fn tempfile_dir() -> std::path::PathBuf {
    let dir = std::env::temp_dir().join("spotkit-example");
    std::fs::create_dir_all(&dir).unwrap();
    dir
}
