//! Detection training loss and an Adam loop over image batches.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::head::{HEAD_FIXED, LOG_H, LOG_W, OBJ, OFF_X, OFF_Y};
use super::{DetectorConfig, GraphOptions, Sample, SpikingModel};
use crate::autodiff::sigmoid;
use crate::error::{Error, Result};
use crate::eval::GroundTruth;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub box_weight: f64,
    pub obj_weight: f64,
    pub cls_weight: f64,
    /// Global gradient-norm clip, if any.
    pub grad_clip: Option<f64>,
    /// Evaluate validation mAP every this many epochs (0 = never).
    pub eval_every: usize,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 1e-3,
            seed: 0,
            box_weight: 5.0,
            obj_weight: 1.0,
            cls_weight: 1.0,
            grad_clip: Some(10.0),
            eval_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub val_map: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
}

/// Loss weights applied by [`detection_loss`].
#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub boxes: f64,
    pub obj: f64,
    pub cls: f64,
}

impl From<&TrainHyper> for LossWeights {
    fn from(h: &TrainHyper) -> Self {
        Self {
            boxes: h.box_weight,
            obj: h.obj_weight,
            cls: h.cls_weight,
        }
    }
}

/// Grid cell responsible for each ground truth; later boxes whose centre
/// falls in an already-claimed cell are dropped.
fn assign_cells(gts: &[GroundTruth], cfg: &DetectorConfig) -> Vec<(usize, usize, GroundTruth)> {
    let cell = cfg.cell_size();
    let s = cfg.grid;
    let mut taken = vec![false; s * s];
    let mut out = Vec::new();
    for gt in gts {
        let (cx, cy) = gt.bbox.center();
        let col = ((cx / cell).floor().max(0.0) as usize).min(s - 1);
        let row = ((cy / cell).floor().max(0.0) as usize).min(s - 1);
        if !taken[row * s + col] {
            taken[row * s + col] = true;
            out.push((row, col, *gt));
        }
    }
    out
}

/// Objectness BCE over every cell plus box MSE and class cross-entropy on
/// responsible cells. Returns the loss and its gradient with respect to
/// the head tensor.
pub fn detection_loss(head: &Tensor, gts: &[GroundTruth], cfg: &DetectorConfig, w: LossWeights) -> (f64, Tensor) {
    let s = cfg.grid;
    let plane = s * s;
    let z = head.data();
    let mut grad = vec![0.0; z.len()];
    let mut loss = 0.0;
    let assigned = assign_cells(gts, cfg);
    let mut positive = vec![false; plane];
    for &(row, col, _) in &assigned {
        positive[row * s + col] = true;
    }
    for cell in 0..plane {
        let logit = z[OBJ * plane + cell];
        let y = if positive[cell] { 1.0 } else { 0.0 };
        // softplus(z) - y z, computed stably
        let softplus = logit.max(0.0) + (-logit.abs()).exp().ln_1p();
        loss += w.obj * (softplus - y * logit);
        grad[OBJ * plane + cell] = w.obj * (sigmoid(logit) - y);
    }
    let cell_size = cfg.cell_size();
    for (row, col, gt) in assigned {
        let cell = row * s + col;
        let (cx, cy) = gt.bbox.center();
        let targets = [
            (OFF_X, cx / cell_size - col as f64, true),
            (OFF_Y, cy / cell_size - row as f64, true),
            (LOG_W, (gt.bbox.w.max(1e-3) / cell_size).ln(), false),
            (LOG_H, (gt.bbox.h.max(1e-3) / cell_size).ln(), false),
        ];
        for (ch, target, squash) in targets {
            let raw = z[ch * plane + cell];
            let (pred, dpred) = if squash {
                let p = sigmoid(raw);
                (p, p * (1.0 - p))
            } else {
                (raw, 1.0)
            };
            loss += w.boxes * (pred - target).powi(2);
            grad[ch * plane + cell] = w.boxes * 2.0 * (pred - target) * dpred;
        }
        let logits: Vec<f64> = (0..cfg.classes)
            .map(|c| z[(HEAD_FIXED + c) * plane + cell])
            .collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        loss += w.cls * (m + denom.ln() - logits[gt.class_id]);
        for (c, l) in logits.iter().enumerate() {
            let p = (l - m).exp() / denom;
            let y = if c == gt.class_id { 1.0 } else { 0.0 };
            grad[(HEAD_FIXED + c) * plane + cell] = w.cls * (p - y);
        }
    }
    (loss, Tensor::from_vec(head.shape(), grad).expect("same shape as head"))
}

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &[Tensor], lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.len() {
                let gi = g.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                p.data_mut()[i] -= self.lr * (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
            }
        }
    }
}

/// Loss and parameter gradients for one image.
fn image_grads(model: &SpikingModel, image: &Tensor, gts: &[GroundTruth], w: LossWeights) -> Result<(f64, Vec<Tensor>)> {
    let fwd = model.forward(
        image,
        GraphOptions {
            param_grad: true,
            ..GraphOptions::default()
        },
    )?;
    let (loss, seed) = detection_loss(fwd.graph.value(fwd.head), gts, model.config(), w);
    let mut grads = fwd.graph.backward(fwd.head, Some(&seed))?;
    let g = fwd
        .params
        .iter()
        .zip(model.params())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok((loss, g))
}

/// One optimiser step on a batch; returns the mean image loss.
pub(crate) fn train_batch(
    model: &mut SpikingModel,
    adam: &mut Adam,
    batch: &[(&Tensor, &[GroundTruth])],
    w: LossWeights,
    grad_clip: Option<f64>,
) -> Result<f64> {
    let per_image: Vec<(f64, Vec<Tensor>)> = batch
        .par_iter()
        .map(|(img, gts)| image_grads(model, img, gts, w))
        .collect::<Result<_>>()?;
    let n = batch.len() as f64;
    let mut total = 0.0;
    let mut grads: Vec<Tensor> = model.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
    for (loss, g) in &per_image {
        total += loss;
        for (acc, gi) in grads.iter_mut().zip(g) {
            acc.add_assign(gi)?;
        }
    }
    for g in &mut grads {
        g.data_mut().iter_mut().for_each(|v| *v /= n);
    }
    if let Some(clip) = grad_clip {
        let norm = grads.iter().map(|g| g.norm_l2().powi(2)).sum::<f64>().sqrt();
        if norm > clip {
            let k = clip / norm;
            grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= k));
        }
    }
    let mean = total / n;
    if mean.is_finite() {
        adam.step(model.params_mut(), &grads);
    }
    Ok(mean)
}

/// Trains in place. Aborts with [`Error::Diverged`] on a non-finite loss.
pub fn train(model: &mut SpikingModel, data: &[Sample], val: Option<&[Sample]>, hyper: &TrainHyper) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::InvalidConfig("training set is empty".into()));
    }
    let mut adam = Adam::new(model.params(), hyper.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport::default();
    let w = LossWeights::from(hyper);
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(hyper.batch_size.max(1)).enumerate() {
            let batch: Vec<(&Tensor, &[GroundTruth])> = chunk
                .iter()
                .map(|&i| (&data[i].image, data[i].gts.as_slice()))
                .collect();
            let loss = train_batch(model, &mut adam, &batch, w, hyper.grad_clip)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    loss,
                });
            }
            sum += loss;
            batches += 1;
        }
        let val_map = match val {
            Some(v) if hyper.eval_every > 0 && ((epoch + 1) % hyper.eval_every == 0 || epoch + 1 == hyper.epochs) => {
                Some(super::evaluate(model, v, None)?.map)
            }
            _ => None,
        };
        log::info!(
            "{} epoch {epoch}: loss {:.4}{}",
            model.id,
            sum / batches as f64,
            val_map.map(|m| format!(", val mAP@50 {m:.3}")).unwrap_or_default()
        );
        report.epochs.push(EpochMetrics {
            epoch,
            loss: sum / batches as f64,
            val_map,
        });
    }
    Ok(report)
}
