//! Oracles and fixtures shared by the integration tests.

#![allow(dead_code)]

use qcprobe::eval::{BBox, Detection, GroundTruth};
use qcprobe::harness::coco::{class_to_category, CocoAnnotation, CocoCategory, CocoDataset, CocoImage, DetectionRecord};
use qcprobe::detector::Sample;
use qcprobe::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_image(n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec(&[3, n, n], (0..3 * n * n).map(|_| rng.gen::<f64>()).collect()).unwrap()
}

/// Random image with a good share of pixels pinned at exactly 0 or 1, so
/// box clipping is exercised on both sides.
pub fn saturated_image(n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..3 * n * n)
        .map(|_| match rng.gen_range(0..4) {
            0 => 0.0,
            1 => 1.0,
            _ => rng.gen::<f64>(),
        })
        .collect();
    Tensor::from_vec(&[3, n, n], data).unwrap()
}

fn overlap(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x + a.w).min(b.x + b.w) - a.x.max(b.x);
    let h = (a.y + a.h).min(b.y + b.h) - a.y.max(b.y);
    if w <= 0.0 || h <= 0.0 {
        return 0.0;
    }
    let inter = w * h;
    inter / (a.w * a.h + b.w * b.h - inter)
}

/// TP flags of the `k` highest-ranked detections of one class, matched
/// from scratch image by image.
fn prefix_hits(ranked: &[Detection], k: usize, gts: &[GroundTruth]) -> usize {
    let mut used = vec![false; gts.len()];
    let mut hits = 0;
    for d in &ranked[..k] {
        let mut pick: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if used[j] || g.image_id != d.image_id || g.class_id != d.class_id {
                continue;
            }
            let o = overlap(&d.bbox, &g.bbox);
            if o >= 0.5 && pick.is_none_or(|(_, best)| o > best) {
                pick = Some((j, o));
            }
        }
        if let Some((j, _)) = pick {
            used[j] = true;
            hits += 1;
        }
    }
    hits
}

/// Brute-force mAP@50: for every class and every rank cutoff, recompute
/// precision and recall from scratch, then take the 101-point
/// interpolated precision as the best precision at or beyond each recall
/// level.
pub fn brute_force_map50(dets: &[Detection], gts: &[GroundTruth]) -> f64 {
    let mut classes: Vec<usize> = gts.iter().map(|g| g.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut total = 0.0;
    for &c in &classes {
        let n_gt = gts.iter().filter(|g| g.class_id == c).count();
        let mut ranked: Vec<Detection> = dets
            .iter()
            .filter(|d| d.class_id == c && d.confidence >= 0.001)
            .copied()
            .collect();
        // Stable: equal confidences keep input order.
        ranked.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).unwrap());
        let points: Vec<(f64, f64)> = (1..=ranked.len())
            .map(|k| {
                let tp = prefix_hits(&ranked, k, gts);
                (tp as f64 / k as f64, tp as f64 / n_gt as f64)
            })
            .collect();
        let mut ap = 0.0;
        for level in 0..=100 {
            let r = level as f64 / 100.0;
            ap += points
                .iter()
                .filter(|(_, rec)| *rec >= r)
                .map(|(p, _)| *p)
                .fold(0.0, f64::max);
        }
        total += ap / 101.0;
    }
    total / classes.len() as f64
}

/// A small random instance: up to 8 detections and 4 ground truths over
/// two images, with coarse coordinates and scores so ties and exact IoU
/// boundaries come up often.
pub fn random_case(rng: &mut ChaCha8Rng) -> (Vec<Detection>, Vec<GroundTruth>) {
    let classes = rng.gen_range(1..=3);
    let images = rng.gen_range(1..=2u64);
    let boxed = |rng: &mut ChaCha8Rng| {
        BBox::new(
            rng.gen_range(0..8) as f64,
            rng.gen_range(0..8) as f64,
            rng.gen_range(1..6) as f64,
            rng.gen_range(1..6) as f64,
        )
    };
    let n_gt = rng.gen_range(1..=4);
    let gts: Vec<GroundTruth> = (0..n_gt)
        .map(|_| GroundTruth {
            bbox: boxed(rng),
            class_id: rng.gen_range(0..classes),
            image_id: rng.gen_range(0..images),
        })
        .collect();
    let n_det = rng.gen_range(0..=8);
    let dets = (0..n_det)
        .map(|_| {
            // Half the detections jitter a ground truth so matches happen.
            let bbox = if rng.gen_bool(0.5) {
                let g = gts[rng.gen_range(0..gts.len())].bbox;
                BBox::new(
                    g.x + rng.gen_range(-1..=1) as f64,
                    g.y + rng.gen_range(-1..=1) as f64,
                    g.w + rng.gen_range(0..=1) as f64,
                    g.h,
                )
            } else {
                boxed(rng)
            };
            Detection {
                bbox,
                class_id: rng.gen_range(0..classes),
                confidence: rng.gen_range(0..=5) as f64 / 5.0,
                image_id: rng.gen_range(0..images),
            }
        })
        .collect();
    (dets, gts)
}

pub fn dataset_of(samples: &[Sample], size: u32, classes: usize) -> CocoDataset {
    let mut annotations = Vec::new();
    for s in samples {
        for g in &s.gts {
            annotations.push(CocoAnnotation {
                id: annotations.len() as u64 + 1,
                image_id: s.image_id,
                category_id: class_to_category(g.class_id),
                bbox: [g.bbox.x, g.bbox.y, g.bbox.w, g.bbox.h],
                area: g.bbox.area(),
                iscrowd: 0,
            });
        }
    }
    CocoDataset {
        images: samples
            .iter()
            .map(|s| CocoImage {
                id: s.image_id,
                file_name: format!("{:06}.png", s.image_id),
                width: size,
                height: size,
            })
            .collect(),
        annotations,
        categories: (0..classes)
            .map(|c| CocoCategory {
                id: class_to_category(c),
                name: format!("class{c}"),
            })
            .collect(),
    }
}

/// One confident detection exactly on every ground truth.
pub fn perfect_dump(samples: &[Sample]) -> Vec<DetectionRecord> {
    samples
        .iter()
        .flat_map(|s| s.gts.iter())
        .map(|g| DetectionRecord {
            image_id: g.image_id,
            category_id: class_to_category(g.class_id),
            bbox: [g.bbox.x, g.bbox.y, g.bbox.w, g.bbox.h],
            score: 0.9,
        })
        .collect()
}

/// Same records, same count, same classes and scores, each box moved to
/// where it overlaps no ground truth of its image.
pub fn displaced_dump(clean: &[DetectionRecord], samples: &[Sample], size: f64) -> Vec<DetectionRecord> {
    clean
        .iter()
        .map(|r| {
            let gts = &samples.iter().find(|s| s.image_id == r.image_id).unwrap().gts;
            let [_, _, w, h] = r.bbox;
            let free = |x: f64, y: f64| gts.iter().all(|g| overlap(&BBox::new(x, y, w, h), &g.bbox) == 0.0);
            let mut spot = None;
            'search: for yi in 0..=(size - h).max(0.0) as usize {
                for xi in 0..=(size - w).max(0.0) as usize {
                    if free(xi as f64, yi as f64) {
                        spot = Some((xi as f64, yi as f64));
                        break 'search;
                    }
                }
            }
            // Crowded image: park the box beside the frame.
            let (x, y) = spot.unwrap_or((size, 0.0));
            DetectionRecord {
                bbox: [x, y, w, h],
                ..*r
            }
        })
        .collect()
}

/// Keeps a single detection in every tenth image and drops the rest.
pub fn suppressed_dump(clean: &[DetectionRecord]) -> Vec<DetectionRecord> {
    let mut seen = Vec::new();
    clean
        .iter()
        .filter(|r| {
            if r.image_id % 10 != 0 || seen.contains(&r.image_id) {
                return false;
            }
            seen.push(r.image_id);
            true
        })
        .copied()
        .collect()
}
