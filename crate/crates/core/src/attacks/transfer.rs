//! Cell-level attack evaluation, the random-noise control and transfer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{project, run_attack, AttackConfig, Norm, Perturbation};
use crate::detector::{evaluate, EvalPass, Sample, SpikingModel};
use crate::error::{Error, Result};
use crate::qc::CellResult;
use crate::tensor::Tensor;

/// Outcome of attacking one model over a sample set.
pub struct AttackRun {
    pub cell: CellResult,
    pub adv: EvalPass,
    pub perturbations: Vec<Perturbation>,
}

fn adversarial_images(samples: &[Sample], perts: &[Perturbation]) -> Result<Vec<Tensor>> {
    samples.iter().zip(perts).map(|(s, p)| p.apply(&s.image)).collect()
}

pub(crate) fn cell(model_id: &str, norm: String, cfg: &AttackConfig, loss: String, clean: &EvalPass, adv: &EvalPass) -> CellResult {
    CellResult {
        model_id: model_id.to_string(),
        norm,
        eps: cfg.eps,
        steps: cfg.steps,
        loss,
        map_clean: clean.map,
        map_adv: adv.map,
        count_clean: clean.count,
        count_adv: adv.count,
    }
}

/// White-box attack on every sample followed by adversarial evaluation,
/// scored against the given clean pass of the same model.
pub fn attack_cell(model: &SpikingModel, samples: &[Sample], cfg: &AttackConfig, clean: &EvalPass) -> Result<AttackRun> {
    let perturbations: Vec<Perturbation> = samples
        .par_iter()
        .map(|s| run_attack(model, &s.image, cfg))
        .collect::<Result<_>>()?;
    let adv_images = adversarial_images(samples, &perturbations)?;
    let adv = evaluate(model, samples, Some(&adv_images))?;
    Ok(AttackRun {
        cell: cell(&model.id, cfg.norm.label().into(), cfg, cfg.loss_label(), clean, &adv),
        adv,
        perturbations,
    })
}

/// Random perturbation at the full budget: uniform signs for l-infinity,
/// a uniformly random direction for l2.
pub fn random_noise(image: &Tensor, cfg: &AttackConfig, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d = Tensor::zeros(image.shape());
    match cfg.norm {
        Norm::Linf => d
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = if rng.gen::<bool>() { cfg.eps } else { -cfg.eps }),
        Norm::L2 => {
            // Box-Muller normals give an isotropic direction.
            for v in d.data_mut() {
                let (u1, u2): (f64, f64) = (rng.gen_range(f64::EPSILON..1.0), rng.gen());
                *v = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            }
            let n = d.norm_l2();
            d.data_mut().iter_mut().for_each(|v| *v *= cfg.eps / n);
        }
    }
    project(image, &mut d, cfg);
    d
}

pub struct TransferResult {
    pub cell: CellResult,
    /// Same budget, random direction, same target.
    pub control: CellResult,
    /// Backward passes taken on the target; always zero on success.
    pub target_queries: u64,
}

/// Crafts perturbations on `source` and evaluates them on `target`. Fails
/// with [`Error::TargetQueried`] if the target saw any gradient query.
pub fn transfer(source: &SpikingModel, target: &SpikingModel, samples: &[Sample], cfg: &AttackConfig) -> Result<TransferResult> {
    if source.id == target.id {
        return Err(Error::InvalidConfig(format!("transfer needs distinct models, both are {}", source.id)));
    }
    let before = target.gradient_queries();
    let perturbations: Vec<Perturbation> = samples
        .par_iter()
        .map(|s| run_attack(source, &s.image, cfg))
        .collect::<Result<_>>()?;
    let clean = evaluate(target, samples, None)?;
    let adv = evaluate(target, samples, Some(&adversarial_images(samples, &perturbations)?))?;
    let noisy: Vec<Tensor> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let d = random_noise(&s.image, cfg, cfg.seed.wrapping_add(i as u64));
            s.image.zip_map(&d, |a, b| a + b)
        })
        .collect::<Result<_>>()?;
    let control = evaluate(target, samples, Some(&noisy))?;
    let queries = target.gradient_queries() - before;
    if queries != 0 {
        return Err(Error::TargetQueried(queries));
    }
    let norm = cfg.norm.label().to_string();
    Ok(TransferResult {
        cell: cell(&format!("{}<-{}", target.id, source.id), norm.clone(), cfg, cfg.loss_label(), &clean, &adv),
        control: cell(&target.id, norm, cfg, "random_noise".into(), &clean, &control),
        target_queries: queries,
    })
}
