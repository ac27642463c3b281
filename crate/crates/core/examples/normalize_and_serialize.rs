// SPDX-License-Identifier: Apache-2.0

//! Pixel box -> normalized region -> instruction text and back.

use spotkit::geometry::{denormalize_region, iou, normalize_region, perturb_box, ImageDims, Point, RegionKind};
use spotkit::instructgen::{parse_region_tokens, serialize_region, TemplateRegistry};

fn main() {
    let dims = ImageDims::new(640, 426).unwrap();
    // a chair, as a detector would report it (corners in any order)
    let px = [Point::new(352.91, 316.06), Point::new(291.79, 218.76)];
    let region = normalize_region(&px, RegionKind::Box, dims).unwrap();
    println!("normalized: {}", serialize_region(&region));

    let registry = TemplateRegistry::default();
    let template = registry.get("region_class").unwrap();
    let rendered = registry.render(template, None, std::slice::from_ref(&region)).unwrap();
    println!("instruction: {}", rendered.text);

    let parsed = parse_region_tokens(&rendered.text).unwrap();
    let back = denormalize_region(&parsed[0].region, dims);
    println!("parsed back to pixels: ({:.1}, {:.1}) - ({:.1}, {:.1})", back[0].x, back[0].y, back[1].x, back[1].y);
    println!("task guessed from text: {:?}", registry.identify_task(&rendered.text));

    let click = normalize_region(&[Point::new(320.0, 213.0)], RegionKind::Point, dims).unwrap();
    println!("click: {}", serialize_region(&click));

    for scale in [0.1, 0.2, 0.3] {
        let noisy = perturb_box(&region, scale, 42).unwrap();
        println!("noise {scale}: {}  iou {:.3}", serialize_region(&noisy), iou(&region, &noisy).unwrap());
    }
}
