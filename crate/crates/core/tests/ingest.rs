use pipe_core::ingest::{ingest_coco_style, ingest_coco_with, mask_to_rle, rle_to_mask, IngestOptions};
use pipe_core::raster::{encode_png_rgb, is_set};
use proptest::prelude::*;
use serde_json::json;

/// Even-odd test of one point against a polygon, by ray crossing.
fn inside(px: f64, py: f64, poly: &[(f64, f64)]) -> bool {
    let mut c = false;
    let n = poly.len();
    for i in 0..n {
        let (x1, y1) = poly[i];
        let (x2, y2) = poly[(i + n - 1) % n];
        if (y1 > py) != (y2 > py) && px < (x2 - x1) * (py - y1) / (y2 - y1) + x1 {
            c = !c;
        }
    }
    c
}

fn brute_area(w: u32, h: u32, poly: &[(f64, f64)]) -> u64 {
    let mut n = 0;
    for y in 0..h {
        for x in 0..w {
            if inside(x as f64 + 0.5, y as f64 + 0.5, poly) {
                n += 1;
            }
        }
    }
    n
}

fn flat(poly: &[(f64, f64)]) -> Vec<f64> {
    poly.iter().flat_map(|&(x, y)| [x, y]).collect()
}

#[test]
fn four_image_fixture_matches_brute_force_areas() {
    let dir = tempfile::tempdir().unwrap();
    let polys: Vec<(u32, u32, Vec<(f64, f64)>)> = vec![
        (40, 30, vec![(5.0, 5.0), (25.0, 5.0), (25.0, 20.0), (5.0, 20.0)]),
        (50, 40, vec![(10.2, 3.7), (44.9, 18.1), (12.5, 36.4)]),
        (32, 32, vec![(2.0, 2.0), (30.0, 2.0), (16.0, 16.0), (30.0, 30.0), (2.0, 30.0)]),
        (64, 48, (0..12).map(|k| {
            let a = k as f64 * std::f64::consts::TAU / 12.0;
            (32.0 + 20.0 * a.cos(), 24.0 + 15.0 * a.sin())
        }).collect()),
    ];
    let mut images = Vec::new();
    let mut anns = Vec::new();
    for (i, (w, h, poly)) in polys.iter().enumerate() {
        let name = format!("img{i}.png");
        std::fs::write(dir.path().join(&name), encode_png_rgb(&image::RgbImage::new(*w, *h)).unwrap()).unwrap();
        images.push(json!({"id": i + 1, "file_name": name, "width": w, "height": h}));
        anns.push(json!({"id": 100 + i, "image_id": i + 1, "category_id": 1, "segmentation": [flat(poly)]}));
    }
    let coco = json!({"images": images, "annotations": anns, "categories": [{"id": 1, "name": "dog"}]});
    let path = dir.path().join("ann.json");
    std::fs::write(&path, coco.to_string()).unwrap();

    let out = ingest_coco_style(&path, dir.path()).unwrap();
    assert_eq!(out.records.len(), 4);
    assert_eq!(out.masks.len(), 4);
    for (m, (w, h, poly)) in out.masks.iter().zip(&polys) {
        assert_eq!(m.area_px, brute_area(*w, *h, poly), "annotation {}", m.annotation_id);
        for y in 0..*h {
            for x in 0..*w {
                assert_eq!(is_set(m.mask.get_pixel(x, y).0[0]), inside(x as f64 + 0.5, y as f64 + 0.5, poly));
            }
        }
    }
}

#[test]
fn missing_images_and_categories_are_counted_not_fatal() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("a.png"), encode_png_rgb(&image::RgbImage::new(10, 10)).unwrap()).unwrap();
    let sq = vec![1.0, 1.0, 8.0, 1.0, 8.0, 8.0, 1.0, 8.0];
    let coco = json!({
        "images": [{"id": 1, "file_name": "a.png", "width": 10, "height": 10},
                   {"id": 2, "file_name": "gone.png", "width": 10, "height": 10}],
        "annotations": [
            {"id": 1, "image_id": 1, "category_id": 1, "segmentation": [sq]},
            {"id": 2, "image_id": 2, "category_id": 1, "segmentation": [sq]},
            {"id": 3, "image_id": 1, "category_id": 9, "segmentation": [sq]},
            {"id": 4, "image_id": 1, "category_id": 1, "segmentation": [sq]}
        ],
        "categories": [{"id": 1, "name": "cup"}]
    });
    let path = dir.path().join("ann.json");
    std::fs::write(&path, coco.to_string()).unwrap();
    let out = ingest_coco_with(&path, dir.path(), &IngestOptions::default()).unwrap();
    assert_eq!(out.masks.len(), 2);
    assert_eq!(out.warnings, 2);
    let dedup = IngestOptions {
        dedup_iou: Some(0.9),
        ..Default::default()
    };
    let out = ingest_coco_with(&path, dir.path(), &dedup).unwrap();
    assert_eq!(out.masks.len(), 1);
    assert_eq!(out.deduplicated, 1);
}

proptest! {
    #[test]
    fn rle_round_trips(w in 1u32..24, h in 1u32..24, bits in prop::collection::vec(any::<bool>(), 576)) {
        let mask = image::GrayImage::from_fn(w, h, |x, y| image::Luma([if bits[(y * 24 + x) as usize] { 255 } else { 0 }]));
        let counts = mask_to_rle(&mask);
        prop_assert_eq!(counts.iter().sum::<u64>(), (w * h) as u64);
        prop_assert_eq!(rle_to_mask(&counts, w, h).unwrap(), mask);
    }
}
