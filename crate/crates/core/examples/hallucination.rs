// SPDX-License-Identifier: Apache-2.0

//! Region referring hallucination: a wrong answer only counts when it names
//! a neighbouring object the query box overlaps.

use spotkit::backend::GtIndex;
use spotkit::corpus::{GroundTruth, GtObject, ImageRef, InstructionRecord, Split, Turn};
use spotkit::evalkit::{hallucination_ratio, is_hallucination, EvalOutcome, HallucinationDenominator};
use spotkit::geometry::{iou, ImageDims, Region};
use spotkit::instructgen::{Style, TaskKind};

fn boxr(x1: f64, y1: f64, x2: f64, y2: f64) -> Region {
    Region::bbox(x1, y1, x2, y2).unwrap()
}

fn main() {
    let dog = boxr(0.0, 0.0, 0.4, 0.5);
    let near_cat = boxr(0.0, 0.0, 0.4, 0.3);
    let far_cat = boxr(0.6, 0.6, 0.9, 0.9);
    println!("dog/near cat IoU {:.2}, dog/far cat IoU {:.2}", iou(&dog, &near_cat).unwrap(), iou(&dog, &far_cat).unwrap());

    let objects = |cat: &Region| {
        vec![
            GtObject { category: "dog".into(), bbox: dog.clone() },
            GtObject { category: "cat".into(), bbox: cat.clone() },
        ]
    };
    println!("answer `cat`, cat nearby: {}", is_hallucination(&dog, "dog", "cat", &objects(&near_cat)));
    println!("answer `cat`, cat far away: {}", is_hallucination(&dog, "dog", "cat", &objects(&far_cat)));

    // a small run: one confusion, one far miss, two correct answers
    let mut records = Vec::new();
    let mut outcomes = Vec::new();
    for (i, (cat, answer)) in [(&near_cat, "cat"), (&far_cat, "cat"), (&far_cat, "dog"), (&near_cat, "dog")].into_iter().enumerate() {
        let uri = format!("img/{i}.jpg");
        records.push(InstructionRecord {
            id: format!("r{i}"),
            image: ImageRef { uri: uri.clone(), dims: ImageDims::new(100, 100).unwrap(), id: None },
            task: TaskKind::RegionClass,
            turns: vec![Turn::user("What can you see in this region? <region:0>"), Turn::assistant("dog")],
            regions: vec![dog.clone()],
            style: Style::None,
            source: "demo".into(),
            split: Split::Eval,
            ground_truth: Some(GroundTruth { class_label: Some("dog".into()), answer: None, all_objects: Some(objects(cat)) }),
        });
        outcomes.push(EvalOutcome {
            record_id: format!("r{i}"),
            image_uri: uri,
            queried_region: dog.clone(),
            gt_class: Some("dog".into()),
            gt_answer: None,
            response_text: format!("I can see a {answer} in this region."),
            matched_class: Some(answer.into()),
            match_score: 1.0,
            confidence: None,
            correct: answer == "dog",
            hallucination: false,
            error: None,
        });
    }
    let gt = GtIndex::from_records(&records);
    for denom in [HallucinationDenominator::AllOutcomes, HallucinationDenominator::Misclassified] {
        println!("{denom:?}: {:.2}", hallucination_ratio(&outcomes, &gt, denom).unwrap());
    }
}
