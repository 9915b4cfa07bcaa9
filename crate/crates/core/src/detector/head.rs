use crate::autodiff::sigmoid;
use crate::error::{Error, Result};
use crate::eval::{BBox, Detection};
use crate::tensor::Tensor;

/// Channels before the class logits: objectness, x/y offsets, log w/h.
pub const HEAD_FIXED: usize = 5;

pub const OBJ: usize = 0;
pub const OFF_X: usize = 1;
pub const OFF_Y: usize = 2;
pub const LOG_W: usize = 3;
pub const LOG_H: usize = 4;

/// Log-size logits are clamped before exponentiation when decoding.
const LOG_SIZE_LIMIT: f64 = 4.0;

/// Head tensor laid out channel-major as `[5 + C, S, S]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawHeadOutput {
    tensor: Tensor,
    grid: usize,
    classes: usize,
}

impl RawHeadOutput {
    pub fn new(tensor: Tensor, grid: usize, classes: usize) -> Result<Self> {
        let expected = [HEAD_FIXED + classes, grid, grid];
        if tensor.shape() != expected {
            return Err(Error::ShapeMismatch {
                op: "head output",
                expected: expected.to_vec(),
                got: tensor.shape().to_vec(),
            });
        }
        Ok(Self { tensor, grid, classes })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    #[inline]
    pub fn at(&self, channel: usize, row: usize, col: usize) -> f64 {
        self.tensor.data()[(channel * self.grid + row) * self.grid + col]
    }

    pub fn objectness_logits(&self) -> &[f64] {
        &self.tensor.data()[..self.grid * self.grid]
    }
}

/// One candidate per cell with confidence `sigmoid(obj) * max softmax`,
/// kept when the confidence reaches `conf_thresh`. Boxes are clipped to
/// the image.
pub fn decode_head(raw: &RawHeadOutput, conf_thresh: f64, cell: f64, image_size: f64, image_id: u64) -> Vec<Detection> {
    let s = raw.grid;
    let mut out = Vec::new();
    for row in 0..s {
        for col in 0..s {
            let obj = sigmoid(raw.at(OBJ, row, col));
            let logits: Vec<f64> = (0..raw.classes)
                .map(|c| raw.at(HEAD_FIXED + c, row, col))
                .collect();
            let max_logit = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = logits.iter().map(|z| (z - max_logit).exp()).sum();
            let class_id = logits
                .iter()
                .position(|&z| z == max_logit)
                .expect("at least one class");
            let confidence = obj / denom;
            if confidence < conf_thresh {
                continue;
            }
            let cx = (col as f64 + sigmoid(raw.at(OFF_X, row, col))) * cell;
            let cy = (row as f64 + sigmoid(raw.at(OFF_Y, row, col))) * cell;
            let w = raw.at(LOG_W, row, col).clamp(-LOG_SIZE_LIMIT, LOG_SIZE_LIMIT).exp() * cell;
            let h = raw.at(LOG_H, row, col).clamp(-LOG_SIZE_LIMIT, LOG_SIZE_LIMIT).exp() * cell;
            let x0 = (cx - 0.5 * w).clamp(0.0, image_size);
            let y0 = (cy - 0.5 * h).clamp(0.0, image_size);
            let x1 = (cx + 0.5 * w).clamp(0.0, image_size);
            let y1 = (cy + 0.5 * h).clamp(0.0, image_size);
            out.push(Detection {
                bbox: BBox::new(x0, y0, x1 - x0, y1 - y0),
                class_id,
                confidence,
                image_id,
            });
        }
    }
    out
}
