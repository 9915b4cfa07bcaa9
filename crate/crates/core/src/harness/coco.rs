//! COCO-format annotations and detection results (the subset used here).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::detector::Sample;
use crate::error::{Error, Result};
use crate::eval::{BBox, Detection, GroundTruth};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [f64; 4],
    pub area: f64,
    pub iscrowd: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoDataset {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

/// One record of a COCO results file.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [f64; 4],
    pub score: f64,
}

/// COCO category ids start at 1; class indices at 0.
pub fn category_to_class(category_id: u64) -> Option<usize> {
    category_id.checked_sub(1).map(|c| c as usize)
}

pub fn class_to_category(class_id: usize) -> u64 {
    class_id as u64 + 1
}

impl DetectionRecord {
    pub fn from_detection(d: &Detection) -> Self {
        Self {
            image_id: d.image_id,
            category_id: class_to_category(d.class_id),
            bbox: [d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h],
            score: d.confidence,
        }
    }

    pub fn to_detection(&self) -> Detection {
        let [x, y, w, h] = self.bbox;
        Detection {
            bbox: BBox::new(x, y, w, h),
            class_id: category_to_class(self.category_id).unwrap_or(usize::MAX),
            confidence: self.score,
            image_id: self.image_id,
        }
    }
}

impl CocoDataset {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ds: CocoDataset = serde_json::from_str(&text)?;
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let sizes: BTreeMap<u64, (u32, u32)> = self.images.iter().map(|i| (i.id, (i.width, i.height))).collect();
        if sizes.len() != self.images.len() {
            return Err(Error::Schema {
                index: 0,
                reason: "duplicate image id".into(),
            });
        }
        for (index, a) in self.annotations.iter().enumerate() {
            let bad = |reason: String| Err(Error::Schema { index, reason });
            let Some(&(w, h)) = sizes.get(&a.image_id) else {
                return bad(format!("annotation refers to unknown image {}", a.image_id));
            };
            if !self.categories.iter().any(|c| c.id == a.category_id) {
                return bad(format!("unknown category {}", a.category_id));
            }
            let [x, y, bw, bh] = a.bbox;
            if !(x >= 0.0 && y >= 0.0 && bw >= 0.0 && bh >= 0.0 && x + bw <= w as f64 && y + bh <= h as f64) {
                return bad(format!("bbox {:?} outside the {w}x{h} image", a.bbox));
            }
        }
        Ok(())
    }

    pub fn ground_truth(&self) -> Vec<GroundTruth> {
        self.annotations
            .iter()
            .map(|a| GroundTruth {
                bbox: BBox::new(a.bbox[0], a.bbox[1], a.bbox[2], a.bbox[3]),
                class_id: category_to_class(a.category_id).unwrap_or(usize::MAX),
                image_id: a.image_id,
            })
            .collect()
    }

    /// Image ids in ascending order.
    pub fn image_ids(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self.images.iter().map(|i| i.id).collect();
        ids.sort_unstable();
        ids
    }
}

/// Parses a results file, reporting the index of the first bad record.
pub fn parse_dump(text: &str) -> Result<Vec<DetectionRecord>> {
    let value: Value = serde_json::from_str(text)?;
    let Value::Array(items) = value else {
        return Err(Error::Schema {
            index: 0,
            reason: "results must be a JSON array".into(),
        });
    };
    items
        .into_iter()
        .enumerate()
        .map(|(index, item)| {
            let rec: DetectionRecord = serde_json::from_value(item).map_err(|e| Error::Schema {
                index,
                reason: e.to_string(),
            })?;
            if !(0.0..=1.0).contains(&rec.score) {
                return Err(Error::Schema {
                    index,
                    reason: format!("score {} outside [0, 1]", rec.score),
                });
            }
            if rec.bbox.iter().any(|v| !v.is_finite()) || rec.bbox[2] < 0.0 || rec.bbox[3] < 0.0 {
                return Err(Error::Schema {
                    index,
                    reason: format!("invalid bbox {:?}", rec.bbox),
                });
            }
            Ok(rec)
        })
        .collect()
}

pub fn load_dump(path: &Path) -> Result<Vec<DetectionRecord>> {
    parse_dump(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

pub fn dump_to_string(records: &[DetectionRecord]) -> Result<String> {
    Ok(serde_json::to_string(records)?)
}

pub fn save_dump(records: &[DetectionRecord], path: &Path) -> Result<()> {
    fs::write(path, dump_to_string(records)?).map_err(|e| Error::io(path, e))
}

pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0.0; 3 * w * h];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * w * h + y as usize * w + x as usize] = px[c] as f64 / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

/// Loads a dataset directory (`annotations.json` plus the images it
/// names), ordered by image id. `subset` keeps the first N ids.
pub fn load_samples(dir: &Path, subset: Option<usize>) -> Result<Vec<Sample>> {
    let ds = CocoDataset::load(&dir.join("annotations.json"))?;
    let mut by_image: BTreeMap<u64, Vec<GroundTruth>> = BTreeMap::new();
    for gt in ds.ground_truth() {
        by_image.entry(gt.image_id).or_default().push(gt);
    }
    let mut images = ds.images.clone();
    images.sort_by_key(|i| i.id);
    images.truncate(subset.unwrap_or(usize::MAX));
    images
        .iter()
        .map(|im| {
            Ok(Sample {
                image_id: im.id,
                image: load_image(&dir.join(&im.file_name))?,
                gts: by_image.remove(&im.id).unwrap_or_default(),
            })
        })
        .collect()
}
