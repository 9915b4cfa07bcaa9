//! Synthetic shapes dataset: solid circles, squares and triangles on a
//! flat noisy background, with tight COCO boxes.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::coco::{class_to_category, CocoAnnotation, CocoCategory, CocoDataset, CocoImage};
use crate::detector::Sample;
use crate::error::{Error, Result};
use crate::eval::{BBox, GroundTruth};
use crate::tensor::Tensor;

pub const SHAPE_NAMES: [&str; 3] = ["circle", "square", "triangle"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShapesDatasetConfig {
    pub n_images: usize,
    pub image_size: u32,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub min_size: u32,
    pub max_size: u32,
    /// Uniform per-pixel noise amplitude, in 8-bit levels.
    pub noise: u8,
    /// Shape centres must fall in distinct cells of this size.
    pub cell: u32,
    pub seed: u64,
}

impl Default for ShapesDatasetConfig {
    fn default() -> Self {
        Self {
            n_images: 600,
            image_size: 64,
            min_shapes: 1,
            max_shapes: 5,
            min_size: 10,
            max_size: 22,
            noise: 6,
            cell: 8,
            seed: 0,
        }
    }
}

impl ShapesDatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return Err(Error::InvalidConfig("need 1 <= min_shapes <= max_shapes".into()));
        }
        if self.min_size < 3 || self.min_size > self.max_size || self.max_size > self.image_size {
            return Err(Error::InvalidConfig("shape sizes must fit the image".into()));
        }
        if self.cell == 0 {
            return Err(Error::InvalidConfig("cell size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Placed {
    class: usize,
    x: u32,
    y: u32,
    size: u32,
}

impl Placed {
    fn bbox(&self) -> BBox {
        BBox::new(self.x as f64, self.y as f64, self.size as f64, self.size as f64)
    }

    fn covers(&self, px: u32, py: u32) -> bool {
        let s = self.size as f64;
        let (u, v) = (px as f64 + 0.5 - self.x as f64, py as f64 + 0.5 - self.y as f64);
        if !(0.0..s).contains(&u) || !(0.0..s).contains(&v) {
            return false;
        }
        match self.class {
            0 => (u - s / 2.0).powi(2) + (v - s / 2.0).powi(2) <= (s / 2.0).powi(2),
            1 => true,
            // Apex at the top centre, base along the bottom edge.
            _ => (u - s / 2.0).abs() <= v / 2.0,
        }
    }
}

fn overlaps(a: &Placed, b: &Placed, margin: u32) -> bool {
    let (a0, a1) = (a.x, a.x + a.size + margin);
    let (b0, b1) = (b.x, b.x + b.size + margin);
    let (c0, c1) = (a.y, a.y + a.size + margin);
    let (d0, d1) = (b.y, b.y + b.size + margin);
    a0 < b1 && b0 < a1 && c0 < d1 && d0 < c1
}

fn colour(rng: &mut ChaCha8Rng, bright: bool) -> [u8; 3] {
    let (lo, hi) = if bright { (140, 255) } else { (0, 90) };
    [rng.gen_range(lo..=hi), rng.gen_range(lo..=hi), rng.gen_range(lo..=hi)]
}

/// Renders image `index` of the dataset; each image has its own stream.
fn render(cfg: &ShapesDatasetConfig, index: usize) -> (RgbImage, Vec<Placed>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let n = cfg.image_size;
    let want = rng.gen_range(cfg.min_shapes..=cfg.max_shapes);
    let mut placed: Vec<Placed> = Vec::new();
    for _ in 0..want * 50 {
        if placed.len() == want {
            break;
        }
        let size = rng.gen_range(cfg.min_size..=cfg.max_size);
        let cand = Placed {
            class: rng.gen_range(0..SHAPE_NAMES.len()),
            x: rng.gen_range(0..=n - size),
            y: rng.gen_range(0..=n - size),
            size,
        };
        let cell_of = |p: &Placed| {
            let (cx, cy) = p.bbox().center();
            ((cx / cfg.cell as f64) as u32, (cy / cfg.cell as f64) as u32)
        };
        if placed.iter().all(|p| !overlaps(p, &cand, 2) && cell_of(p) != cell_of(&cand)) {
            placed.push(cand);
        }
    }
    let bg = colour(&mut rng, false);
    let fills: Vec<[u8; 3]> = placed.iter().map(|_| colour(&mut rng, true)).collect();
    let mut img = RgbImage::new(n, n);
    for (px, py, pixel) in img.enumerate_pixels_mut() {
        let base = placed.iter().zip(&fills).find(|(p, _)| p.covers(px, py)).map_or(bg, |(_, f)| *f);
        let mut out = [0u8; 3];
        for c in 0..3 {
            let jitter = rng.gen_range(-(cfg.noise as i16)..=cfg.noise as i16);
            out[c] = (base[c] as i16 + jitter).clamp(0, 255) as u8;
        }
        *pixel = Rgb(out);
    }
    (img, placed)
}

fn to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0.0; 3 * w * h];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * w * h + y as usize * w + x as usize] = px[c] as f64 / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], data).expect("image dimensions")
}

/// In-memory generation; image ids run from 1.
pub fn generate_samples(cfg: &ShapesDatasetConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    Ok((0..cfg.n_images)
        .map(|i| {
            let (img, placed) = render(cfg, i);
            let image_id = i as u64 + 1;
            Sample {
                image_id,
                image: to_tensor(&img),
                gts: placed
                    .iter()
                    .map(|p| GroundTruth {
                        bbox: p.bbox(),
                        class_id: p.class,
                        image_id,
                    })
                    .collect(),
            }
        })
        .collect())
}

/// Writes `images/NNNNNN.png` and `annotations.json` under `dir`.
pub fn generate_shapes(cfg: &ShapesDatasetConfig, dir: &Path) -> Result<CocoDataset> {
    cfg.validate()?;
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut ds = CocoDataset {
        images: Vec::with_capacity(cfg.n_images),
        annotations: Vec::new(),
        categories: SHAPE_NAMES
            .iter()
            .enumerate()
            .map(|(c, name)| CocoCategory {
                id: class_to_category(c),
                name: name.to_string(),
            })
            .collect(),
    };
    for i in 0..cfg.n_images {
        let (img, placed) = render(cfg, i);
        let id = i as u64 + 1;
        let file_name = format!("images/{id:06}.png");
        let path = dir.join(&file_name);
        img.save(&path)?;
        ds.images.push(CocoImage {
            id,
            file_name,
            width: cfg.image_size,
            height: cfg.image_size,
        });
        for p in placed {
            let b = p.bbox();
            ds.annotations.push(CocoAnnotation {
                id: ds.annotations.len() as u64 + 1,
                image_id: id,
                category_id: class_to_category(p.class),
                bbox: [b.x, b.y, b.w, b.h],
                area: b.area(),
                iscrowd: 0,
            });
        }
    }
    ds.save(&dir.join("annotations.json"))?;
    Ok(ds)
}

/// Splits by image id: the first `n_train` ids train, the rest evaluate.
pub fn split(samples: Vec<Sample>, n_train: usize) -> (Vec<Sample>, Vec<Sample>) {
    let mut samples = samples;
    samples.sort_by_key(|s| s.image_id);
    let eval = samples.split_off(n_train.min(samples.len()));
    (samples, eval)
}
