//! Iterative first-order attacks. All of them minimise the detection
//! objective (less confidence means fewer detections), optionally minus a
//! membrane-disruption term.

use rayon::prelude::*;

use super::{detection_objective, initial_delta, project, sign, AttackConfig, Method, Norm, Perturbation};
use crate::autodiff::Var;
use crate::detector::{Forward, GraphOptions, SpikingModel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Clean membrane potentials `[layer][timestep]` and the term weight.
struct MembraneTerm {
    lambda: f64,
    clean: Vec<Vec<Tensor>>,
}

/// `L_det - lambda * mean_l( mean_t MSE(U_l,t(x+d), U_l,t(x)) )`.
fn objective(f: &mut Forward, cfg: &AttackConfig, membrane: Option<&MembraneTerm>) -> Result<Var> {
    let det = detection_objective(f, cfg.loss)?;
    let Some(term) = membrane else {
        return Ok(det);
    };
    let trace = f.trace.clone().ok_or(Error::InvalidConfig("membrane capture missing".into()))?;
    let mut layer_terms = Vec::with_capacity(trace.len());
    for (layer, clean_layer) in trace.iter().zip(&term.clean) {
        let mut acc: Option<Var> = None;
        for (&u, clean) in layer.iter().zip(clean_layer) {
            let c = f.graph.constant(clean.clone())?;
            let m = f.graph.mse(u, c)?;
            acc = Some(match acc {
                Some(a) => f.graph.add(a, m)?,
                None => m,
            });
        }
        let sum = acc.ok_or(Error::InvalidConfig("empty membrane trace".into()))?;
        layer_terms.push(f.graph.scale(sum, 1.0 / layer.len() as f64)?);
    }
    let mut total = layer_terms[0];
    for &t in &layer_terms[1..] {
        total = f.graph.add(total, t)?;
    }
    let weighted = f.graph.scale(total, -term.lambda / layer_terms.len() as f64)?;
    f.graph.add(det, weighted)
}

/// Objective value without a backward pass; not a gradient query.
fn objective_value(model: &SpikingModel, image: &Tensor, cfg: &AttackConfig, membrane: Option<&MembraneTerm>) -> Result<f64> {
    let mut f = model.forward(
        image,
        GraphOptions {
            capture: membrane.is_some(),
            ..GraphOptions::default()
        },
    )?;
    let out = objective(&mut f, cfg, membrane)?;
    Ok(f.graph.value(out).item())
}

fn value_and_grad(
    model: &SpikingModel,
    x: &Tensor,
    delta: &Tensor,
    cfg: &AttackConfig,
    membrane: Option<&MembraneTerm>,
) -> Result<(f64, Tensor)> {
    let adv = x.zip_map(delta, |a, b| a + b)?;
    model.input_gradient(&adv, membrane.is_some(), |f| objective(f, cfg, membrane))
}

/// Descent direction for one step, or `None` for a zero l2 gradient.
fn direction(g: &Tensor, norm: Norm) -> Option<Tensor> {
    match norm {
        Norm::Linf => Some(g.map(sign)),
        Norm::L2 => {
            let n = g.norm_l2();
            (n > 0.0).then(|| g.map(|v| v / n))
        }
    }
}

fn step(x: &Tensor, delta: &Tensor, g: &Tensor, size: f64, cfg: &AttackConfig) -> Result<Tensor> {
    let Some(dir) = direction(g, cfg.norm) else {
        return Ok(delta.clone());
    };
    let mut next = delta.zip_map(&dir, |d, s| d - size * s)?;
    project(x, &mut next, cfg);
    Ok(next)
}

fn pgd_loop(model: &SpikingModel, x: &Tensor, cfg: &AttackConfig, membrane: Option<&MembraneTerm>) -> Result<Perturbation> {
    cfg.validate()?;
    let alpha = cfg.alpha();
    let mut delta = initial_delta(x, cfg);
    let mut history = Vec::with_capacity(cfg.steps + 1);
    for _ in 0..cfg.steps {
        let (loss, g) = value_and_grad(model, x, &delta, cfg, membrane)?;
        history.push(loss);
        delta = step(x, &delta, &g, alpha, cfg)?;
    }
    let adv = x.zip_map(&delta, |a, b| a + b)?;
    history.push(objective_value(model, &adv, cfg, membrane)?);
    Ok(Perturbation {
        delta,
        crafted_on: model.id.clone(),
        config: cfg.clone(),
        loss_history: history,
    })
}

fn require_norm(cfg: &AttackConfig, norm: Norm, who: &str) -> Result<()> {
    if cfg.norm != norm {
        return Err(Error::InvalidConfig(format!("{who} needs the {} norm", norm.label())));
    }
    Ok(())
}

/// Sign-gradient PGD in the l-infinity ball. Ignores `fmp_lambda`.
pub fn pgd(model: &SpikingModel, image: &Tensor, cfg: &AttackConfig) -> Result<Perturbation> {
    require_norm(cfg, Norm::Linf, "pgd")?;
    pgd_loop(model, image, cfg, None)
}

/// Normalised-gradient PGD in the l2 ball. A zero gradient skips the step.
pub fn pgd_l2(model: &SpikingModel, image: &Tensor, cfg: &AttackConfig) -> Result<Perturbation> {
    require_norm(cfg, Norm::L2, "pgd_l2")?;
    pgd_loop(model, image, cfg, None)
}

/// PGD on the detection loss minus `fmp_lambda` times the mean squared
/// displacement of every spiking layer's membrane potential from its clean
/// value. Models without spiking layers fall back to plain PGD.
pub fn fmp(model: &SpikingModel, image: &Tensor, cfg: &AttackConfig) -> Result<Perturbation> {
    if model.spiking_layer_count() == 0 {
        log::warn!("{}: no spiking layers, membrane probe runs as plain PGD", model.id);
        return pgd_loop(model, image, cfg, None);
    }
    let (_, trace) = model.infer(image, true)?;
    let clean = trace.ok_or(Error::InvalidConfig("membrane capture missing".into()))?;
    let term = MembraneTerm {
        lambda: cfg.fmp_lambda,
        clean: clean.layers,
    };
    pgd_loop(model, image, cfg, Some(&term))
}

/// APGD knobs. `momentum` weighs the previous displacement; the new
/// projected step gets `1 - momentum`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ApgdParams {
    pub momentum: f64,
    /// First step size; `None` means `2 * eps`.
    pub initial_step: Option<f64>,
    pub halving: bool,
    /// Minimum fraction of improving steps per checkpoint window.
    pub rho: f64,
}

impl Default for ApgdParams {
    fn default() -> Self {
        Self {
            momentum: 0.25,
            initial_step: None,
            halving: true,
            rho: 0.75,
        }
    }
}

impl ApgdParams {
    /// Momentum off, no halving, PGD step size: the PGD trajectory.
    pub fn degenerate(cfg: &AttackConfig) -> Self {
        Self {
            momentum: 0.0,
            initial_step: Some(cfg.alpha()),
            halving: false,
            rho: 0.75,
        }
    }
}

pub struct ApgdOutcome {
    /// Lowest-loss iterate.
    pub best: Perturbation,
    pub last: Tensor,
    pub step_sizes: Vec<f64>,
}

/// Iterations at which step size is reconsidered, for `n` total steps.
pub fn checkpoints(n: usize) -> Vec<usize> {
    let mut p = vec![0.0f64, 0.22];
    loop {
        let k = p.len();
        let next = p[k - 1] + (p[k - 1] - p[k - 2] - 0.03).max(0.06);
        if next > 1.0 {
            break;
        }
        p.push(next);
    }
    let mut w: Vec<usize> = p.iter().map(|v| (v * n as f64 - 1e-9).ceil() as usize).collect();
    w.dedup();
    w.retain(|&c| c > 0 && c < n);
    w
}

pub fn apgd(model: &SpikingModel, image: &Tensor, cfg: &AttackConfig, params: ApgdParams) -> Result<ApgdOutcome> {
    cfg.validate()?;
    let x = image;
    let marks = checkpoints(cfg.steps);
    let mut eta = params.initial_step.unwrap_or(2.0 * cfg.eps);
    let mut delta = initial_delta(x, cfg);
    let mut prev = delta.clone();
    let mut history = Vec::with_capacity(cfg.steps + 1);
    let mut step_sizes = Vec::with_capacity(cfg.steps);
    let (mut best, mut best_loss) = (delta.clone(), f64::INFINITY);
    let mut improved = 0usize;
    let (mut last_mark, mut eta_at_mark, mut best_at_mark) = (0usize, eta, f64::INFINITY);

    for k in 0..cfg.steps {
        let (loss, g) = value_and_grad(model, x, &delta, cfg, None)?;
        if k > 0 && loss < history[k - 1] {
            improved += 1;
        }
        history.push(loss);
        if loss < best_loss {
            best_loss = loss;
            best = delta.clone();
        }
        if params.halving && marks.contains(&k) {
            let window = k - last_mark;
            let stalled = (improved as f64) < params.rho * window as f64;
            let flat = eta == eta_at_mark && best_loss == best_at_mark;
            eta_at_mark = eta;
            best_at_mark = best_loss;
            last_mark = k;
            improved = 0;
            if stalled || flat {
                eta /= 2.0;
                if delta != best {
                    // Restart from the best point; its gradient is recomputed
                    // on the next iteration.
                    delta = best.clone();
                    prev = best.clone();
                    step_sizes.push(0.0);
                    continue;
                }
            }
        }
        step_sizes.push(eta);
        let z = step(x, &delta, &g, eta, cfg)?;
        let next = if k == 0 || params.momentum == 0.0 {
            z
        } else {
            let a = 1.0 - params.momentum;
            let mut n = Tensor::zeros(x.shape());
            for (i, v) in n.data_mut().iter_mut().enumerate() {
                let (d, p, zi) = (delta.data()[i], prev.data()[i], z.data()[i]);
                *v = d + a * (zi - d) + params.momentum * (d - p);
            }
            project(x, &mut n, cfg);
            n
        };
        prev = std::mem::replace(&mut delta, next);
    }
    let adv = x.zip_map(&delta, |a, b| a + b)?;
    let final_loss = objective_value(model, &adv, cfg, None)?;
    history.push(final_loss);
    if final_loss < best_loss {
        best = delta.clone();
    }
    Ok(ApgdOutcome {
        best: Perturbation {
            delta: best,
            crafted_on: model.id.clone(),
            config: cfg.clone(),
            loss_history: history,
        },
        last: delta,
        step_sizes,
    })
}

/// Dispatches on the config: APGD, the membrane probe when
/// `fmp_lambda > 0`, otherwise PGD for the configured norm.
pub fn run_attack(model: &SpikingModel, image: &Tensor, cfg: &AttackConfig) -> Result<Perturbation> {
    match cfg.method {
        Method::Apgd => Ok(apgd(model, image, cfg, ApgdParams::default())?.best),
        Method::Pgd if cfg.fmp_lambda > 0.0 => fmp(model, image, cfg),
        Method::Pgd => pgd_loop(model, image, cfg, None),
    }
}

/// Attacks every image in parallel.
pub fn run_batch(model: &SpikingModel, images: &[&Tensor], cfg: &AttackConfig) -> Result<Vec<Perturbation>> {
    images.par_iter().map(|img| run_attack(model, img, cfg)).collect()
}
