// SPDX-License-Identifier: Apache-2.0

//! Accuracy of an IoU-threshold oracle as query boxes get noisier.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spotkit::backend::{GtIndex, IouThresholdOracle};
use spotkit::corpus::{ingest_detection, IngestOptions};
use spotkit::evalkit::{robustness_sweep, EvalOptions, TrigramEmbedder, DEFAULT_SCALES};
use spotkit::instructgen::TemplateRegistry;

const CLASSES: [&str; 6] = ["person", "dog", "cat", "car", "chair", "bottle"];

/// Forty images with four objects each, some of them touching.
fn synthetic_coco() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut images, mut anns) = (vec![], vec![]);
    for i in 0..40 {
        images.push(serde_json::json!({"id": i, "file_name": format!("syn/{i}.jpg"), "width": 640, "height": 480}));
        for k in 0..4 {
            let (w, h): (f64, f64) = (rng.random_range(60.0..200.0), rng.random_range(60.0..200.0));
            let x = (40.0 + 140.0 * k as f64).min(640.0 - w);
            anns.push(serde_json::json!({
                "id": i * 10 + k, "image_id": i, "category_id": rng.random_range(0..CLASSES.len()),
                "bbox": [x, rng.random_range(0.0..480.0 - h), w, h],
            }));
        }
    }
    let cats: Vec<_> = CLASSES.iter().enumerate().map(|(i, n)| serde_json::json!({"id": i, "name": n})).collect();
    serde_json::json!({"images": images, "annotations": anns, "categories": cats}).to_string()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let registry = TemplateRegistry::default();
    let records = ingest_detection(&synthetic_coco(), &registry, &IngestOptions::new("synthetic"))?.records;
    let oracle = IouThresholdOracle::new(GtIndex::from_records(&records), 0.5);
    let seeds: Vec<u64> = (0..10).collect();
    let sweep = robustness_sweep(&records, &DEFAULT_SCALES, &seeds, &oracle, &TrigramEmbedder, &registry, &EvalOptions::default())?;
    println!("{}", sweep.report);
    Ok(())
}
