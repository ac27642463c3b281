// SPDX-License-Identifier: Apache-2.0

//! Acceptance gate. Each criterion prints one PASS/FAIL line; the binary
//! exits non-zero when any criterion fails.

use std::collections::{BTreeSet, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;

use spotkit::backend::{
    class_sentence, Backend, BackendError, BackendRequest, BackendResponse, GtIndex, IouThresholdOracle, LlmClient,
    PerfectOracle,
};
use spotkit::corpus::{
    generate_region_chat, ingest_detection, ingest_ocr_file, ingest_vqa_file, read_records, ChatContext,
    GenerationConfig, GenerationError, GroundTruth, GtObject, ImageRef, IngestOptions, InstructionRecord,
    Referent, RegionCaption, Rejection, Split, Turn,
};
use spotkit::evalkit::{
    compute_ap, eval_regional_classification, eval_text_task, hallucination_ratio, robustness_sweep, Detection,
    EvalOptions, GtBox, HallucinationDenominator, TrigramEmbedder, IOU_THRESHOLDS,
};
use spotkit::geometry::{denormalize_region, iou, normalize_region, ImageDims, Point, Region, RegionKind};
use spotkit::instructgen::{parse_region_tokens, serialize_region, Role, Style, TaskKind, TemplateRegistry};
use spotkit::session::{MemoryStore, SessionManager};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn fixture(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn boxr(x1: f64, y1: f64, x2: f64, y2: f64) -> Region {
    Region::bbox(x1, y1, x2, y2).unwrap()
}

fn corners(r: &Region) -> [f64; 4] {
    let p = r.points();
    [p[0].x, p[0].y, p[1].x, p[1].y]
}

// ---------------------------------------------------------------------------
// Round trips

fn random_region(rng: &mut ChaCha8Rng, dims: ImageDims) -> (RegionKind, Vec<Point>) {
    let (w, h) = (f64::from(dims.width()), f64::from(dims.height()));
    match rng.random_range(0..3) {
        0 => (RegionKind::Point, vec![Point::new(rng.random_range(0.0..=w), rng.random_range(0.0..=h))]),
        1 => {
            // keep sides above 2e-3 of the frame so 3-decimal rounding cannot collapse them
            let (x1, y1) = (rng.random_range(0.0..0.99 * w), rng.random_range(0.0..0.99 * h));
            let x2 = rng.random_range(x1 + 0.003 * w..=w);
            let y2 = rng.random_range(y1 + 0.003 * h..=h);
            (RegionKind::Box, vec![Point::new(x1, y1), Point::new(x2, y2)])
        }
        _ => {
            let n = rng.random_range(3..9);
            let pts = (0..n)
                .map(|_| Point::new(rng.random_range(0.0..=w), rng.random_range(0.0..=h)))
                .collect();
            (RegionKind::Polygon, pts)
        }
    }
}

fn round_trips() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut worst_px, mut worst_text) = (0.0f64, 0.0f64);
    for i in 0..10_000 {
        let dims = ImageDims::new(rng.random_range(1..5000), rng.random_range(1..5000)).unwrap();
        let (kind, px) = random_region(&mut rng, dims);
        let region = normalize_region(&px, kind, dims).map_err(|e| format!("case {i}: {e}"))?;
        let back = denormalize_region(&region, dims);
        for (a, b) in px.iter().zip(&back) {
            worst_px = worst_px.max((a.x - b.x).abs()).max((a.y - b.y).abs());
        }

        let text = serialize_region(&region);
        let spans = parse_region_tokens(&format!("look at {text} please")).map_err(|e| format!("case {i}: {e}"))?;
        ensure!(spans.len() == 1, "case {i}: {} spans in {text}", spans.len());
        let parsed = &spans[0].region;
        ensure!(parsed.kind() == kind, "case {i}: kind {:?} != {kind:?}", parsed.kind());
        ensure!(parsed.points().len() == region.points().len(), "case {i}: vertex count");
        for (a, b) in region.points().iter().zip(parsed.points()) {
            worst_text = worst_text.max((a.x - b.x).abs()).max((a.y - b.y).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(worst_px <= 1e-9, "pixel round trip error {worst_px:e}");
    ensure!(worst_text <= 5e-4, "text round trip error {worst_text:e}");
    ensure!(secs < 10.0, "took {secs:.2} s");
    Ok(format!("10000 regions, max errors {worst_px:.1e} px / {worst_text:.1e}, {secs:.2} s"))
}

// ---------------------------------------------------------------------------
// IoU against pixel counting

const GRID: u32 = 2000;

/// Pixels `[lo, hi)` of one axis, as a membership mask.
fn axis_pixels(lo: u32, hi: u32) -> Vec<bool> {
    (0..GRID).map(|i| i >= lo && i < hi).collect()
}

/// Counts covered pixels of a 2000x2000 image. Box pixel sets are products
/// of per-axis sets, so each count is a product of per-axis counts.
fn grid_iou(a: [u32; 4], b: [u32; 4]) -> f64 {
    let count = |v: &[bool]| v.iter().filter(|&&c| c).count() as f64;
    let both = |p: &[bool], q: &[bool]| p.iter().zip(q).filter(|(x, y)| **x && **y).count() as f64;
    let (ax, ay) = (axis_pixels(a[0], a[2]), axis_pixels(a[1], a[3]));
    let (bx, by) = (axis_pixels(b[0], b[2]), axis_pixels(b[1], b[3]));
    let inter = both(&ax, &bx) * both(&ay, &by);
    let union = count(&ax) * count(&ay) + count(&bx) * count(&by) - inter;
    if union == 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn iou_oracle() -> Outcome {
    let hand = iou(&boxr(0.0, 0.0, 0.2, 0.2), &boxr(0.1, 0.1, 0.3, 0.3)).unwrap();
    ensure!((hand - 1.0 / 7.0).abs() <= 1e-12, "hand case gave {hand}");

    let dims = ImageDims::new(GRID, GRID).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    let mut overlapping = 0;
    for i in 0..1000 {
        let mut draw = |near: Option<[u32; 4]>| {
            let side = |rng: &mut ChaCha8Rng| rng.random_range(1..800u32);
            let (w, h) = (side(&mut rng), side(&mut rng));
            let (x, y) = match near {
                Some(n) => (
                    n[0].saturating_sub(w / 2) + rng.random_range(0..=(n[2] - n[0])),
                    n[1].saturating_sub(h / 2) + rng.random_range(0..=(n[3] - n[1])),
                ),
                None => (rng.random_range(0..GRID), rng.random_range(0..GRID)),
            };
            let (x, y) = (x.min(GRID - w), y.min(GRID - h));
            [x, y, x + w, y + h]
        };
        let a = draw(None);
        let b = draw(if i % 4 == 0 { None } else { Some(a) });
        let region = |c: [u32; 4]| {
            let pts = [Point::new(f64::from(c[0]), f64::from(c[1])), Point::new(f64::from(c[2]), f64::from(c[3]))];
            normalize_region(&pts, RegionKind::Box, dims).unwrap()
        };
        let got = iou(&region(a), &region(b)).unwrap();
        let want = grid_iou(a, b);
        if want > 0.0 {
            overlapping += 1;
        }
        worst = worst.max((got - want).abs());
        ensure!((got - want).abs() <= 2e-3, "pair {i}: iou {got} vs grid {want} for {a:?} {b:?}");
    }
    Ok(format!("1/7 exact; 1000 pixel-aligned pairs ({overlapping} overlapping), max deviation {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// AP against a brute-force precision/recall enumeration

/// Straightforward reference: global score ranking per category, greedy
/// matching, precision envelope by scanning every rank at or beyond each
/// recall level.
fn reference_ap(dets: &[Detection], gts: &[GtBox], threshold: f64) -> f64 {
    let cats: BTreeSet<&str> = gts.iter().map(|g| g.category.as_str()).collect();
    let mut sum = 0.0;
    for cat in &cats {
        let cat_gts: Vec<&GtBox> = gts.iter().filter(|g| g.category == *cat).collect();
        let mut ranked: Vec<(usize, &Detection)> = dets.iter().enumerate().filter(|(_, d)| d.category == *cat).collect();
        ranked.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap().then(a.0.cmp(&b.0)));
        let mut per_image: HashMap<&str, usize> = HashMap::new();
        ranked.retain(|(_, d)| {
            let n = per_image.entry(d.image_id.as_str()).or_insert(0);
            *n += 1;
            *n <= 100
        });
        let mut taken = vec![false; cat_gts.len()];
        let mut hits = Vec::new();
        for (_, d) in &ranked {
            let dc = corners(&d.bbox);
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in cat_gts.iter().enumerate() {
                if taken[gi] || g.image_id != d.image_id {
                    continue;
                }
                let gc = corners(&g.bbox);
                let iw = (dc[2].min(gc[2]) - dc[0].max(gc[0])).max(0.0);
                let ih = (dc[3].min(gc[3]) - dc[1].max(gc[1])).max(0.0);
                let inter = iw * ih;
                let union = (dc[2] - dc[0]) * (dc[3] - dc[1]) + (gc[2] - gc[0]) * (gc[3] - gc[1]) - inter;
                let o = if union > 0.0 { inter / union } else { 0.0 };
                if o >= threshold && best.is_none_or(|(_, b)| o > b) {
                    best = Some((gi, o));
                }
            }
            if let Some((gi, _)) = best {
                taken[gi] = true;
            }
            hits.push(best.is_some());
        }
        let npos = cat_gts.len() as f64;
        let mut points = Vec::new();
        let mut tp = 0.0;
        for (k, &h) in hits.iter().enumerate() {
            if h {
                tp += 1.0;
            }
            points.push((tp / npos, tp / (k + 1) as f64));
        }
        let mut area = 0.0;
        for i in 0..=100 {
            let r = i as f64 / 100.0;
            let p = points.iter().filter(|(rec, _)| *rec >= r).map(|(_, p)| *p).fold(0.0, f64::max);
            area += p;
        }
        sum += area / 101.0;
    }
    sum / cats.len() as f64
}

fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<Detection>, Vec<GtBox>) {
    let images = rng.random_range(1..=20);
    let ncat = rng.random_range(1..=5);
    let cat = |rng: &mut ChaCha8Rng| format!("c{}", rng.random_range(0..ncat));
    let rand_box = |rng: &mut ChaCha8Rng| {
        let (x, y) = (rng.random_range(0.0..0.8), rng.random_range(0.0..0.8));
        boxr(x, y, x + rng.random_range(0.02..0.2), y + rng.random_range(0.02..0.2))
    };
    let (mut gts, mut dets) = (Vec::new(), Vec::new());
    for img in 0..images {
        let image_id = format!("im{img}");
        for _ in 0..rng.random_range(0..4) {
            let b = rand_box(rng);
            let category = cat(rng);
            let mut d = corners(&b);
            if rng.random_bool(0.7) {
                for v in &mut d {
                    *v = (*v + rng.random_range(-0.02..0.02)).clamp(0.0, 1.0);
                }
                let category = if rng.random_bool(0.8) { category.clone() } else { cat(rng) };
                if d[0] < d[2] && d[1] < d[3] {
                    dets.push(Detection {
                        image_id: image_id.clone(),
                        bbox: boxr(d[0], d[1], d[2], d[3]),
                        category,
                        score: (rng.random_range(0..10) as f64) / 10.0,
                        area_px: 1000.0,
                    });
                }
            }
            gts.push(GtBox { image_id: image_id.clone(), bbox: b, category, area_px: 1000.0 });
        }
        for _ in 0..rng.random_range(0..3) {
            dets.push(Detection {
                image_id: image_id.clone(),
                bbox: rand_box(rng),
                category: cat(rng),
                score: (rng.random_range(0..10) as f64) / 10.0,
                area_px: 1000.0,
            });
        }
    }
    if gts.is_empty() {
        gts.push(GtBox { image_id: "im0".into(), bbox: boxr(0.1, 0.1, 0.3, 0.3), category: "c0".into(), area_px: 1000.0 });
    }
    (dets, gts)
}

fn ap_reference() -> Outcome {
    let g = |x: f64| GtBox { image_id: "a".into(), bbox: boxr(x, 0.1, x + 0.2, 0.3), category: "dog".into(), area_px: 5000.0 };
    let d = |x: f64, s: f64| Detection {
        image_id: "a".into(),
        bbox: boxr(x, 0.1, x + 0.2, 0.3),
        category: "dog".into(),
        score: s,
        area_px: 5000.0,
    };
    let (gts, dets) = (vec![g(0.0), g(0.5)], vec![d(0.0, 0.9), d(0.75, 0.8), d(0.5, 0.7)]);
    let worked = compute_ap(&dets, &gts).ap50;
    let by_hand = (51.0 + 50.0 * (2.0 / 3.0)) / 101.0;
    let by_reference = reference_ap(&dets, &gts, 0.5);
    ensure!((worked - 0.8349).abs() <= 1e-4, "worked case AP50 = {worked}");
    ensure!((by_reference - by_hand).abs() <= 1e-12, "reference disagrees with hand value: {by_reference}");
    ensure!((worked - by_reference).abs() <= 1e-9, "worked case {worked} vs reference {by_reference}");

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let (dets, gts) = random_instance(&mut rng);
        let table = compute_ap(&dets, &gts);
        let mut mean = 0.0;
        for (k, &t) in IOU_THRESHOLDS.iter().enumerate() {
            let want = reference_ap(&dets, &gts, t);
            mean += want / IOU_THRESHOLDS.len() as f64;
            let got = table.per_threshold[k];
            worst = worst.max((got - want).abs());
            ensure!((got - want).abs() <= 1e-9, "case {case} @ {t}: {got} vs {want}");
        }
        ensure!((table.ap - mean).abs() <= 1e-9, "case {case}: ap {} vs {mean}", table.ap);
        ensure!(table.ap50 == table.per_threshold[0] && table.ap75 == table.per_threshold[5], "case {case}: columns");
    }
    Ok(format!("AP50 worked case {worked:.4}; 200 random instances, max deviation {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// Synthetic corpora

const VOCAB: [&str; 12] = [
    "person", "bicycle", "car", "dog", "cat", "horse", "bottle", "chair", "couch", "laptop", "clock", "umbrella",
];

/// COCO-style file: `images` images of 640x480, five objects each laid out
/// in a loose grid so neighbours can overlap slightly.
fn synthetic_detection(images: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut imgs = Vec::new();
    let mut anns = Vec::new();
    for i in 0..images {
        imgs.push(serde_json::json!({"id": i, "file_name": format!("syn/{i:05}.jpg"), "width": 640, "height": 480}));
        for k in 0..5 {
            let (cx, cy): (f64, f64) = (64.0 + 128.0 * k as f64, rng.random_range(120.0..360.0));
            let (w, h): (f64, f64) = (rng.random_range(20.0..200.0), rng.random_range(20.0..220.0));
            let (x, y) = ((cx - w / 2.0).max(0.0), (cy - h / 2.0).max(0.0));
            let (w, h) = (w.min(640.0 - x), h.min(480.0 - y));
            anns.push(serde_json::json!({
                "id": i * 10 + k,
                "image_id": i,
                "category_id": rng.random_range(0..VOCAB.len()),
                "bbox": [x, y, w, h],
            }));
        }
    }
    let cats: Vec<_> = VOCAB.iter().enumerate().map(|(i, n)| serde_json::json!({"id": i, "name": n})).collect();
    serde_json::json!({"images": imgs, "annotations": anns, "categories": cats}).to_string()
}

fn synthetic_records(images: usize, seed: u64) -> Vec<InstructionRecord> {
    let out = ingest_detection(&synthetic_detection(images, seed), &TemplateRegistry::default(), &IngestOptions::new("synthetic"))
        .expect("synthetic corpus");
    assert!(out.diagnostics.is_empty(), "{:?}", out.diagnostics);
    out.records
}

fn opts() -> EvalOptions {
    EvalOptions { workers: 8, ..EvalOptions::default() }
}

/// Answers a fixed class per call, cycling through the vocabulary.
struct Spinner(AtomicUsize);

impl Backend for Spinner {
    fn id(&self) -> String {
        "spinner".into()
    }

    fn complete(&self, _: &BackendRequest) -> Result<BackendResponse, BackendError> {
        let n = self.0.fetch_add(7, Ordering::SeqCst);
        Ok(BackendResponse { text: class_sentence(VOCAB[n % VOCAB.len()]), confidence: None })
    }
}

fn gt_box_invariance() -> Outcome {
    let records = synthetic_records(60, 3);
    let gt = GtIndex::from_records(&records);
    let registry = TemplateRegistry::default();
    let backends: Vec<Box<dyn Backend>> = vec![
        Box::new(PerfectOracle::new(gt.clone())),
        Box::new(IouThresholdOracle::new(gt, 0.5)),
        Box::new(Spinner(AtomicUsize::new(0))),
    ];
    let mut seen = Vec::new();
    for b in &backends {
        let eval = eval_regional_classification(&records, b.as_ref(), &TrigramEmbedder, &registry, &opts())
            .map_err(|e| e.to_string())?;
        let ap = eval.report.metrics.ap.ok_or("no AP table")?;
        ensure!(ap.ap == ap.ap50 && ap.ap50 == ap.ap75, "{}: ap {} ap50 {} ap75 {}", b.id(), ap.ap, ap.ap50, ap.ap75);
        ensure!(ap.per_threshold.iter().all(|&v| v == ap.ap50), "{}: thresholds differ", b.id());
        seen.push(format!("{}={:.3}", b.id(), ap.ap));
    }
    Ok(format!("ap = ap50 = ap75 for {}", seen.join(", ")))
}

fn perfect_oracle_end_to_end() -> Outcome {
    let start = Instant::now();
    let records = synthetic_records(100, 9);
    ensure!(records.len() == 500, "{} records", records.len());
    let registry = TemplateRegistry::default();
    let oracle = PerfectOracle::new(GtIndex::from_records(&records));
    let eval = eval_regional_classification(&records, &oracle, &TrigramEmbedder, &registry, &opts())
        .map_err(|e| e.to_string())?;
    let m = &eval.report.metrics;
    let ap = m.ap.as_ref().ok_or("no AP table")?;
    ensure!(m.accuracy == Some(1.0), "accuracy {:?}", m.accuracy);
    ensure!(ap.ap == 1.0, "ap {}", ap.ap);
    ensure!(eval.report.hallucination_ratio == Some(0.0), "hallucination {:?}", eval.report.hallucination_ratio);

    let mut text_acc = Vec::new();
    let ocr = ingest_ocr_file(&fixture("ocr.json"), &registry, &IngestOptions::new("ocr")).map_err(|e| e.to_string())?;
    let vqa = ingest_vqa_file(&fixture("vqa.jsonl"), &registry, Referent::Box, &IngestOptions::new("vqa"))
        .map_err(|e| e.to_string())?;
    let plain_vqa = ingest_vqa_file(&fixture("vqa.jsonl"), &registry, Referent::None, &IngestOptions::new("vqa"))
        .map_err(|e| e.to_string())?;
    for (name, recs) in [("ocr", ocr.records), ("region vqa", vqa.records), ("vqa", plain_vqa.records)] {
        let oracle = PerfectOracle::new(GtIndex::from_records(&recs));
        let eval = eval_text_task(&recs, &oracle, &registry, &opts()).map_err(|e| e.to_string())?;
        ensure!(eval.report.metrics.accuracy == Some(1.0), "{name}: accuracy {:?}", eval.report.metrics.accuracy);
        text_acc.push(format!("{name} {}", recs.len()));
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.1} s");
    Ok(format!("500 records: acc 1.0, ap 1.0, hallucination 0.0; text tasks at 1.0 ({}); {secs:.2} s", text_acc.join(", ")))
}

fn robustness_monotone() -> Outcome {
    let records = synthetic_records(60, 21);
    let registry = TemplateRegistry::default();
    let gt = GtIndex::from_records(&records);
    let oracle = IouThresholdOracle::new(gt.clone(), 0.5);
    let seeds: Vec<u64> = (0..10).collect();
    let sweep = robustness_sweep(&records, &[0.0, 0.1, 0.2, 0.3], &seeds, &oracle, &TrigramEmbedder, &registry, &opts())
        .map_err(|e| e.to_string())?;
    let curve = sweep.report.robustness_curve.ok_or("no curve")?;
    let acc: Vec<f64> = curve.iter().map(|p| p.accuracy).collect();
    ensure!(acc.windows(2).all(|w| w[1] <= w[0]), "accuracy not non-increasing: {acc:?}");
    ensure!(acc[3] < acc[0], "noise had no effect: {acc:?}");

    let plain = eval_regional_classification(&records, &oracle, &TrigramEmbedder, &registry, &opts())
        .map_err(|e| e.to_string())?;
    let plain_acc = plain.report.metrics.accuracy.ok_or("no accuracy")?;
    ensure!(curve[0].accuracy.to_bits() == plain_acc.to_bits(), "scale 0 {} vs plain {plain_acc}", curve[0].accuracy);
    let plain_h = hallucination_ratio(&plain.outcomes, &gt, HallucinationDenominator::AllOutcomes).map_err(|e| e.to_string())?;
    ensure!(
        curve[0].hallucination_ratio.map(f64::to_bits) == Some(plain_h.to_bits()),
        "scale 0 hallucination {:?} vs plain {plain_h}",
        curve[0].hallucination_ratio
    );
    let shown: Vec<String> = acc.iter().map(|a| format!("{a:.4}")).collect();
    Ok(format!("10 seeds, accuracy {} at scales 0/0.1/0.2/0.3; scale 0 bitwise equal", shown.join(" >= ")))
}

// ---------------------------------------------------------------------------
// Hallucination

fn class_record(i: usize, class: &str, query: Region, objects: Vec<GtObject>) -> InstructionRecord {
    InstructionRecord {
        id: format!("h-{i:03}"),
        image: ImageRef { uri: format!("h/{i:03}.jpg"), dims: ImageDims::new(500, 500).unwrap(), id: None },
        task: TaskKind::RegionClass,
        turns: vec![Turn::user("What can you see in this region? <region:0>"), Turn::assistant(class)],
        regions: vec![query],
        style: Style::None,
        source: "constructed".into(),
        split: Split::Eval,
        ground_truth: Some(GroundTruth { class_label: Some(class.into()), answer: None, all_objects: Some(objects) }),
    }
}

/// Replies a scripted class per image.
struct Scripted(HashMap<String, String>);

impl Backend for Scripted {
    fn id(&self) -> String {
        "scripted".into()
    }

    fn complete(&self, req: &BackendRequest) -> Result<BackendResponse, BackendError> {
        Ok(BackendResponse { text: class_sentence(&self.0[&req.image_uri]), confidence: None })
    }
}

fn hallucination_metric() -> Outcome {
    let obj = |c: &str, r: Region| GtObject { category: c.into(), bbox: r };
    let mut records = Vec::new();
    let mut answers = HashMap::new();
    for i in 0..100 {
        let rec = if i < 10 {
            // a cat overlapping the queried dog at IoU 0.6
            let dog = boxr(0.0, 0.0, 0.4, 0.5);
            let cat = boxr(0.0, 0.0, 0.4, 0.3);
            class_record(i, "dog", dog.clone(), vec![obj("dog", dog), obj("cat", cat)])
        } else if i < 20 {
            let dog = boxr(0.0, 0.0, 0.2, 0.2);
            class_record(i, "dog", dog.clone(), vec![obj("dog", dog), obj("cat", boxr(0.7, 0.7, 0.9, 0.9))])
        } else {
            let dog = boxr(0.3, 0.3, 0.6, 0.6);
            class_record(i, "dog", dog.clone(), vec![obj("dog", dog), obj("cat", boxr(0.0, 0.0, 0.1, 0.1))])
        };
        answers.insert(rec.image.uri.clone(), if i < 20 { "cat" } else { "dog" }.to_string());
        records.push(rec);
    }
    let planted = iou(&boxr(0.0, 0.0, 0.4, 0.5), &boxr(0.0, 0.0, 0.4, 0.3)).unwrap();
    ensure!((planted - 0.6).abs() < 1e-12, "planted IoU {planted}");

    let eval = eval_regional_classification(&records, &Scripted(answers), &TrigramEmbedder, &TemplateRegistry::default(), &opts())
        .map_err(|e| e.to_string())?;
    let ratio = hallucination_ratio(&eval.outcomes, &GtIndex::from_records(&records), HallucinationDenominator::AllOutcomes)
        .map_err(|e| e.to_string())?;
    ensure!(ratio == 0.10, "ratio {ratio}");
    ensure!(eval.report.hallucination_ratio == Some(0.10), "report ratio {:?}", eval.report.hallucination_ratio);
    let far_flagged = eval.outcomes[10..20].iter().filter(|o| o.hallucination).count();
    ensure!(far_flagged == 0, "{far_flagged} far misses counted");
    ensure!(eval.outcomes[..10].iter().all(|o| o.hallucination && !o.correct), "planted cases not all counted");
    ensure!(eval.report.metrics.accuracy == Some(0.8), "accuracy {:?}", eval.report.metrics.accuracy);
    Ok("ratio 0.10 (10 planted counted, 10 far misses not counted)".into())
}

// ---------------------------------------------------------------------------
// Corpus determinism

fn convert_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let input = fixture("detection.json");
    let mut outputs = Vec::new();
    for name in ["first.jsonl", "second.jsonl"] {
        let out = dir.path().join(name);
        let args = ["spotkit", "convert", "--kind", "detection", "--input", input.to_str().unwrap(), "--output", out.to_str().unwrap()];
        let code = spotkit::cli::main_with_args(args);
        ensure!(code == 0, "convert exited {code}");
        outputs.push(out);
    }
    let (a, b) = (std::fs::read(&outputs[0]).unwrap(), std::fs::read(&outputs[1]).unwrap());
    ensure!(a == b, "outputs differ");
    let records = read_records(&outputs[0]).map_err(|e| e.to_string())?;
    ensure!(records.len() == 7, "{} records", records.len());
    for r in &records {
        r.validate().map_err(|e| format!("{}: {e}", r.id))?;
    }
    Ok(format!("2 runs byte-identical ({} bytes), 7/7 records valid", a.len()))
}

// ---------------------------------------------------------------------------
// Generation validation

/// Replays a fixed list of replies, repeating the last.
struct ScriptedLlm {
    replies: Vec<String>,
    calls: AtomicUsize,
}

impl ScriptedLlm {
    fn new(replies: Vec<String>) -> Self {
        Self { replies, calls: AtomicUsize::new(0) }
    }
}

impl LlmClient for ScriptedLlm {
    fn complete_text(&self, _prompt: &str) -> Result<String, BackendError> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(self.replies[n.min(self.replies.len() - 1)].clone())
    }
}

fn fmt_tuple(c: [f64; 4], bare: bool) -> String {
    let s = c.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(",");
    if bare {
        format!("[{}]", s.replace(',', ", "))
    } else {
        format!("<box>{s}</box>")
    }
}

fn max_diff(a: [f64; 4], b: [f64; 4]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Every coordinate tuple cited in `text`, in order.
fn cited(text: &str) -> Vec<[f64; 4]> {
    let re = Regex::new(r"(?:<box>|\[)\s*([0-9.]+)\s*,\s*([0-9.]+)\s*,\s*([0-9.]+)\s*,\s*([0-9.]+)\s*(?:</box>|\])").unwrap();
    re.captures_iter(text)
        .map(|c| [1, 2, 3, 4].map(|i| c[i].parse::<f64>().unwrap()))
        .collect()
}

fn generation_validation() -> Outcome {
    let config = GenerationConfig::default();
    let ctx = |regions: &[[f64; 4]]| ChatContext {
        image: ImageRef { uri: "vg/1.jpg".into(), dims: ImageDims::new(800, 600).unwrap(), id: None },
        regions: regions
            .iter()
            .enumerate()
            .map(|(i, c)| RegionCaption { caption: format!("object {i}"), region: boxr(c[0], c[1], c[2], c[3]) })
            .collect(),
    };

    // one off-context reply, then a faithful one
    let context = ctx(&[[0.1, 0.1, 0.4, 0.5]]);
    let llm = ScriptedLlm::new(vec![
        "User: What is at <box>0.600,0.600,0.900,0.900</box>?\nAssistant: A lamp.".into(),
        "User: What is at <box>0.100,0.100,0.400,0.500</box>?\nAssistant: A dog.".into(),
    ]);
    let chat = generate_region_chat(&context, &[], &llm, &config).map_err(|e| e.to_string())?;
    ensure!(llm.calls.load(Ordering::SeqCst) == 2, "expected one retry");
    ensure!(matches!(chat.rejections.as_slice(), [Rejection::OffContext { .. }]), "rejections {:?}", chat.rejections);
    ensure!(chat.record.regions == vec![boxr(0.1, 0.1, 0.4, 0.5)], "stored {:?}", chat.record.regions);

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut accepted, mut rejected) = (0, 0);
    for case in 0..1000 {
        let n = rng.random_range(1..=4);
        let regions: Vec<[f64; 4]> = (0..n)
            .map(|_| {
                let (x, y) = (rng.random_range(0.05..0.6), rng.random_range(0.05..0.6));
                [x, y, x + rng.random_range(0.05..0.35), y + rng.random_range(0.05..0.35)]
            })
            .collect();
        let context = ctx(&regions);
        let mode = rng.random_range(0..3);
        let pairs = rng.random_range(1..=3);
        let mut lines = Vec::new();
        for p in 0..pairs {
            let cite = |rng: &mut ChaCha8Rng, off: bool| {
                let c = if off {
                    loop {
                        let (x, y) = (rng.random_range(0.0..0.7), rng.random_range(0.0..0.7));
                        let c = [x, y, x + 0.1, y + 0.1];
                        if regions.iter().all(|r| max_diff(*r, c) >= 0.03) {
                            break c;
                        }
                    }
                } else {
                    let r = regions[rng.random_range(0..regions.len())];
                    r.map(|v| (v + rng.random_range(-0.012..0.012)).clamp(0.0, 1.0))
                };
                fmt_tuple(c, rng.random_bool(0.3))
            };
            let off = mode == 1 && p == pairs - 1;
            let q = cite(&mut rng, off);
            lines.push(format!("User: What can you tell me about {q}?"));
            let a = if rng.random_bool(0.5) { format!(" It sits next to {}.", cite(&mut rng, false)) } else { String::new() };
            lines.push(format!("Assistant: Something interesting.{a}"));
        }
        if mode == 2 {
            // structural damage: swap the first two turns
            lines.swap(0, 1);
        }
        let reply = lines.join("\n");
        let llm = ScriptedLlm::new(vec![reply.clone()]);
        match generate_region_chat(&context, &[], &llm, &config) {
            Ok(chat) => {
                accepted += 1;
                ensure!(mode == 0, "case {case}: accepted a corrupted reply:\n{reply}");
                let record = &chat.record;
                record.validate().map_err(|e| format!("case {case}: {e}"))?;
                // the placeholders, in order, must stand for the cited tuples
                let raw: Vec<&str> = reply.lines().collect();
                for (turn, line) in record.turns.iter().zip(raw) {
                    let placeholders: Vec<usize> = Regex::new(r"<region:(\d+)>")
                        .unwrap()
                        .captures_iter(&turn.text)
                        .map(|c| c[1].parse().unwrap())
                        .collect();
                    let tuples = cited(line);
                    ensure!(placeholders.len() == tuples.len(), "case {case}: placeholder count");
                    for (slot, tuple) in placeholders.iter().zip(tuples) {
                        let stored = corners(&record.regions[*slot]);
                        ensure!(max_diff(stored, tuple) <= 0.02, "case {case}: {stored:?} stored for {tuple:?}");
                        ensure!(regions.contains(&stored), "case {case}: stored region not from context");
                    }
                }
            }
            Err(GenerationError::Rejected { rejections, .. }) => {
                rejected += 1;
                ensure!(mode != 0, "case {case}: rejected a faithful reply ({rejections:?}):\n{reply}");
                ensure!(rejections.len() == config.max_attempts, "case {case}: {} attempts", rejections.len());
                if mode == 1 {
                    ensure!(matches!(rejections[0], Rejection::OffContext { .. }), "case {case}: {:?}", rejections[0]);
                }
            }
            Err(e) => return Err(format!("case {case}: {e}")),
        }
    }
    Ok(format!("retry on off-context reply; 1000 fuzzed replies: {accepted} accepted, {rejected} rejected, no violations"))
}

// ---------------------------------------------------------------------------
// Session atomicity

/// Fails the first calls (every other one), then recovers.
struct Flaky {
    calls: AtomicUsize,
}

impl Backend for Flaky {
    fn id(&self) -> String {
        "flaky".into()
    }

    fn complete(&self, req: &BackendRequest) -> Result<BackendResponse, BackendError> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        std::thread::sleep(Duration::from_millis(2));
        if n < 60 && n % 2 == 0 {
            return Err(BackendError::Transport("backend restarting".into()));
        }
        Ok(BackendResponse { text: format!("re: {}", req.last_user_text()), confidence: None })
    }
}

fn session_atomicity() -> Outcome {
    let manager = Arc::new(SessionManager::new(
        Arc::new(MemoryStore::new()),
        Arc::new(Flaky { calls: AtomicUsize::new(0) }),
    ));
    let ids: Vec<String> = (0..10)
        .map(|i| manager.create_session(&format!("img/{i}.jpg"), 640, 480).unwrap())
        .collect();
    let failed = Arc::new(Mutex::new(Vec::new()));
    let handles: Vec<_> = (0..100)
        .map(|k| {
            let (manager, id, failed) = (manager.clone(), ids[k % 10].clone(), failed.clone());
            std::thread::spawn(move || {
                let text = format!("message {k}");
                match manager.post_message(&id, &text, &[]) {
                    Ok(reply) => {
                        assert_eq!(reply.turn.text, format!("re: {text}"));
                        true
                    }
                    Err(_) => {
                        failed.lock().unwrap().push(text);
                        false
                    }
                }
            })
        })
        .collect();
    let ok = handles.into_iter().map(|h| h.join().unwrap()).filter(|&b| b).count();
    let failed = failed.lock().unwrap().clone();
    ensure!(!failed.is_empty() && ok > 0, "backend never failed or never recovered ({ok} ok)");

    let mut turns_total = 0;
    for id in &ids {
        let view = manager.get_transcript(id).map_err(|e| e.to_string())?;
        ensure!(view.turns.len() % 2 == 0, "{id}: odd transcript");
        for pair in view.turns.chunks(2) {
            ensure!(pair[0].role == Role::User && pair[1].role == Role::Assistant, "{id}: alternation broken");
            ensure!(pair[1].text == format!("re: {}", pair[0].text), "{id}: reply not paired with its message");
            ensure!(!failed.contains(&pair[0].text), "{id}: failed message `{}` recorded", pair[0].text);
        }
        turns_total += view.turns.len();
    }
    ensure!(turns_total == 2 * ok, "{turns_total} turns for {ok} successful posts");
    Ok(format!("100 posts over 10 sessions: {ok} ok, {} failed, transcripts consistent", failed.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("round-trip suite", round_trips),
        ("iou vs pixel-grid oracle", iou_oracle),
        ("ap reference equivalence", ap_reference),
        ("gt-box structural invariance", gt_box_invariance),
        ("perfect-oracle end-to-end", perfect_oracle_end_to_end),
        ("robustness sweep", robustness_monotone),
        ("hallucination metric", hallucination_metric),
        ("corpus determinism", convert_determinism),
        ("generation validation", generation_validation),
        ("session atomicity", session_atomicity),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failures = 0;
    for (name, check) in criteria {
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        match result {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failures += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
