// SPDX-License-Identifier: Apache-2.0

//! Regional classification with ground-truth boxes and with detector boxes,
//! scored by the offline oracles.

use std::path::Path;

use spotkit::backend::{GtIndex, IouThresholdOracle, PerfectOracle};
use spotkit::corpus::{ingest_detection_file, IngestOptions};
use spotkit::evalkit::{eval_detector_boxes, eval_regional_classification, read_external_boxes, EvalOptions, TrigramEmbedder};
use spotkit::instructgen::TemplateRegistry;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let registry = TemplateRegistry::default();
    let records = ingest_detection_file(&fixtures.join("detection.json"), &registry, &IngestOptions::new("coco"))?.records;
    let gt = GtIndex::from_records(&records);
    let opts = EvalOptions::default();

    let perfect = PerfectOracle::new(gt.clone());
    let eval = eval_regional_classification(&records, &perfect, &TrigramEmbedder, &registry, &opts)?;
    println!("{}", eval.report);

    let boxes = read_external_boxes(&fixtures.join("detector_boxes.jsonl"))?;
    let noisy = IouThresholdOracle::new(gt, 0.5);
    let eval = eval_detector_boxes(&records, &boxes, "detector", &noisy, &TrigramEmbedder, &registry, &opts)?;
    println!("{}", eval.report);
    for o in &eval.outcomes {
        println!("{:<28} -> {:<40} matched {:?}", o.image_uri, o.response_text, o.matched_class);
    }
    Ok(())
}
