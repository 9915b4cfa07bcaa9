//! Defense battery: input purification, PGD adversarial training and a
//! paired undefended/defended evaluation with a verdict.

mod purify;

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{attack_cell, run_attack, AttackConfig};
use crate::detector::{evaluate, train_batch, Adam, EvalPass, LossWeights, Sample, SpikingModel, TrainHyper};
use crate::error::{Error, Result};
use crate::eval::{map50, GroundTruth};
use crate::qc::CellResult;
use crate::tensor::Tensor;

pub use self::purify::{catalog, purify, PurifyMethod, SignalDomain};

/// Fraction of clean mAP a defended attack must retain to count as restored.
pub const RESTORE_FRACTION: f64 = 0.5;
/// DRR increase, in points, that counts as a mode shift.
pub const MODE_SHIFT_DRR: f64 = 20.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Defense {
    Identity,
    Purify(PurifyMethod),
    /// Discards every detection; the degenerate suppressor.
    DropAll,
}

impl fmt::Display for Defense {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Defense::Identity => f.write_str("identity"),
            Defense::Purify(m) => write!(f, "{m}"),
            Defense::DropAll => f.write_str("drop_all"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Restored,
    ModeShifted,
    NoEffect,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Restored => "restored",
            Verdict::ModeShifted => "mode_shifted",
            Verdict::NoEffect => "no_effect",
        })
    }
}

/// Verdict from the paired rows alone. Restored: the defended attack keeps
/// at least half the clean mAP and beats the undefended attack. Mode
/// shifted: otherwise, DRR rises by at least 20 points. With no clean
/// detections DRR is undefined and a mode shift cannot be claimed.
pub fn verdict(undefended: &CellResult, defended: &CellResult) -> Verdict {
    if defended.map_adv >= RESTORE_FRACTION * defended.map_clean && defended.map_adv > undefended.map_adv {
        return Verdict::Restored;
    }
    if let (Ok(d), Ok(u)) = (defended.drr(), undefended.drr()) {
        if d - u >= MODE_SHIFT_DRR {
            return Verdict::ModeShifted;
        }
    }
    Verdict::NoEffect
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefenseEval {
    pub defense: String,
    pub undefended: CellResult,
    /// Scored against the undefended model's clean pass.
    pub defended: CellResult,
    pub verdict: Verdict,
}

/// Attacks the bare model, then scores the defended pipeline on the same
/// adversarial inputs. Both rows share the undefended clean baseline.
pub fn evaluate_defense(model: &SpikingModel, defense: &Defense, cfg: &AttackConfig, samples: &[Sample]) -> Result<DefenseEval> {
    let clean = evaluate(model, samples, None)?;
    let run = attack_cell(model, samples, cfg, &clean)?;
    defended_row(model, defense, samples, &clean, &run.cell, &run.perturbations)
}

/// Defended row for perturbations already crafted on `model`.
pub fn defended_row(
    model: &SpikingModel,
    defense: &Defense,
    samples: &[Sample],
    clean: &EvalPass,
    undefended: &CellResult,
    perturbations: &[crate::attacks::Perturbation],
) -> Result<DefenseEval> {
    let (map_adv, count_adv) = match defense {
        Defense::DropAll => {
            let gts: Vec<GroundTruth> = samples.iter().flat_map(|s| s.gts.iter().copied()).collect();
            (map50(&[], &gts)?, 0)
        }
        Defense::Identity | Defense::Purify(_) => {
            let images: Vec<Tensor> = samples
                .par_iter()
                .zip(perturbations)
                .map(|(s, p)| {
                    let adv = p.apply(&s.image)?;
                    match defense {
                        Defense::Purify(m) => purify(&adv, m),
                        _ => Ok(adv),
                    }
                })
                .collect::<Result<_>>()?;
            let pass = evaluate(model, samples, Some(&images))?;
            (pass.map, pass.count)
        }
    };
    let defended = CellResult {
        model_id: format!("{}+{defense}", model.id),
        map_clean: clean.map,
        count_clean: clean.count,
        map_adv,
        count_adv,
        ..undefended.clone()
    };
    Ok(DefenseEval {
        defense: defense.to_string(),
        verdict: verdict(undefended, &defended),
        undefended: undefended.clone(),
        defended,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AtConfig {
    pub lr: f64,
    pub epochs: usize,
    pub attack: AttackConfig,
    /// Evaluate every this many epochs; the final epoch is always evaluated.
    pub eval_every: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for AtConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs: 10,
            attack: AttackConfig::default(),
            eval_every: 1,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl AtConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate must be positive, got {}", self.lr)));
        }
        self.attack.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtRow {
    pub epoch: usize,
    pub map_clean: f64,
    pub map_pgd: f64,
    pub drr: Option<f64>,
    pub qci: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AtTrajectory {
    pub rows: Vec<AtRow>,
    /// Set when training stopped early on a non-finite loss.
    pub aborted: Option<String>,
}

impl AtTrajectory {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn at_row(model: &SpikingModel, epoch: usize, eval: &[Sample], cfg: &AttackConfig) -> Result<AtRow> {
    let clean = evaluate(model, eval, None)?;
    let cell = attack_cell(model, eval, cfg, &clean)?.cell;
    Ok(AtRow {
        epoch,
        map_clean: cell.map_clean,
        map_pgd: cell.map_adv,
        drr: cell.drr().ok(),
        qci: cell.qci().ok(),
    })
}

/// Each epoch crafts attacks on the current weights for every training
/// image and takes optimiser steps on the attacked batch. Row 0 is the
/// starting model. The evaluation split is only read.
pub fn adversarial_train(model: &mut SpikingModel, data: &[Sample], eval: &[Sample], at: &AtConfig) -> Result<AtTrajectory> {
    at.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidConfig("training set is empty".into()));
    }
    let mut traj = AtTrajectory {
        rows: vec![at_row(model, 0, eval, &at.attack)?],
        aborted: None,
    };
    let hyper = TrainHyper::default();
    let weights = LossWeights::from(&hyper);
    let mut adam = Adam::new(model.params(), at.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(at.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=at.epochs {
        order.shuffle(&mut rng);
        for (b, chunk) in order.chunks(at.batch_size.max(1)).enumerate() {
            let advs: Vec<Tensor> = chunk
                .par_iter()
                .map(|&i| run_attack(model, &data[i].image, &at.attack)?.apply(&data[i].image))
                .collect::<Result<_>>()?;
            let batch: Vec<(&Tensor, &[GroundTruth])> = chunk
                .iter()
                .zip(&advs)
                .map(|(&i, img)| (img, data[i].gts.as_slice()))
                .collect();
            let loss = train_batch(model, &mut adam, &batch, weights, hyper.grad_clip)?;
            if !loss.is_finite() {
                traj.aborted = Some(format!("non-finite loss {loss} at epoch {epoch}, batch {b}"));
                return Ok(traj);
            }
        }
        if (at.eval_every > 0 && epoch % at.eval_every == 0) || epoch == at.epochs {
            traj.rows.push(at_row(model, epoch, eval, &at.attack)?);
        }
    }
    Ok(traj)
}
