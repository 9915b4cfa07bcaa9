//! Input-space attacks on detectors: confidence-sum and CW-margin losses,
//! PGD under both norms, APGD, the membrane probe and transfer.

mod pgd;
mod transfer;

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{sigmoid, Var};
use crate::detector::{Forward, RawHeadOutput};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use self::pgd::{apgd, checkpoints, fmp, pgd, pgd_l2, run_attack, run_batch, ApgdOutcome, ApgdParams};
pub use self::transfer::{attack_cell, random_noise, transfer, AttackRun, TransferResult};

/// Default membrane-term weight of the probe.
pub const FMP_DEFAULT_LAMBDA: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    Linf,
    L2,
}

impl Norm {
    pub fn label(self) -> &'static str {
        match self {
            Norm::Linf => "linf",
            Norm::L2 => "l2",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    DetSum,
    CwMargin,
}

impl LossKind {
    pub fn label(self) -> &'static str {
        match self {
            LossKind::DetSum => "det_sum",
            LossKind::CwMargin => "cw_margin",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Pgd,
    Apgd,
}

/// Everything that determines a perturbation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub norm: Norm,
    /// Budget on the [0, 1] pixel scale; 8/255 is written `8.0 / 255.0`.
    pub eps: f64,
    pub steps: usize,
    /// Step size; `None` means `eps / 4`.
    pub step_size: Option<f64>,
    pub loss: LossKind,
    pub fmp_lambda: f64,
    pub method: Method,
    pub seed: u64,
    /// Start from uniform noise in the budget instead of zero.
    pub random_start: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            norm: Norm::Linf,
            eps: 8.0 / 255.0,
            steps: 10,
            step_size: None,
            loss: LossKind::DetSum,
            fmp_lambda: 0.0,
            method: Method::Pgd,
            seed: 0,
            random_start: false,
        }
    }
}

impl AttackConfig {
    pub fn linf(eps_255: f64, steps: usize) -> Self {
        Self {
            eps: eps_255 / 255.0,
            steps,
            ..Self::default()
        }
    }

    pub fn l2(eps: f64, steps: usize) -> Self {
        Self {
            norm: Norm::L2,
            eps,
            steps,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::InvalidConfig(format!("eps must be positive, got {}", self.eps)));
        }
        if self.steps == 0 {
            return Err(Error::InvalidConfig("attack needs at least one step".into()));
        }
        if let Some(a) = self.step_size {
            if !(a >= 0.0 && a.is_finite()) {
                return Err(Error::InvalidConfig(format!("step size must be non-negative, got {a}")));
            }
        }
        if !(self.fmp_lambda >= 0.0 && self.fmp_lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!("fmp_lambda must be >= 0, got {}", self.fmp_lambda)));
        }
        Ok(())
    }

    pub fn alpha(&self) -> f64 {
        self.step_size.unwrap_or(self.eps / 4.0)
    }

    /// Short human label, e.g. `pgd-linf-8/255-10`.
    pub fn describe(&self) -> String {
        let method = match (self.method, self.fmp_lambda > 0.0) {
            (Method::Apgd, _) => "apgd".to_string(),
            (Method::Pgd, true) => format!("fmp{}", self.fmp_lambda),
            (Method::Pgd, false) => "pgd".to_string(),
        };
        let eps = match self.norm {
            Norm::Linf => format!("{}/255", fmt_num(self.eps * 255.0)),
            Norm::L2 => fmt_num(self.eps),
        };
        format!("{method}-{}-{eps}-{}", self.norm.label(), self.steps)
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    /// Loss column label, including the membrane term when present.
    pub fn loss_label(&self) -> String {
        if self.fmp_lambda > 0.0 {
            format!("{}+fmp{}", self.loss.label(), self.fmp_lambda)
        } else {
            self.loss.label().to_string()
        }
    }
}

fn fmt_num(v: f64) -> String {
    let r = (v * 1e6).round() / 1e6;
    if r.fract() == 0.0 {
        format!("{r:.0}")
    } else {
        format!("{r}")
    }
}

/// A crafted perturbation and how it was made.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub delta: Tensor,
    pub crafted_on: String,
    pub config: AttackConfig,
    /// Objective value at each iterate, starting point included.
    pub loss_history: Vec<f64>,
}

const PERTURBATION_MAGIC: &str = "QCPROBE-PERTURBATION v1";

#[derive(Serialize, Deserialize)]
struct PerturbationHeader {
    crafted_on: String,
    config: AttackConfig,
    seed: u64,
    shape: Vec<usize>,
    loss_history: Vec<f64>,
}

impl Perturbation {
    /// The attacked image. Projection guarantees the sum stays in [0, 1].
    pub fn apply(&self, image: &Tensor) -> Result<Tensor> {
        image.zip_map(&self.delta, |x, d| x + d)
    }

    /// Magic line, JSON header, then the delta as little-endian f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = PerturbationHeader {
            crafted_on: self.crafted_on.clone(),
            config: self.config.clone(),
            seed: self.config.seed,
            shape: self.delta.shape().to_vec(),
            loss_history: self.loss_history.clone(),
        };
        let mut out = format!(
            "{PERTURBATION_MAGIC}\n{}\n",
            serde_json::to_string(&header).expect("header serializes")
        )
        .into_bytes();
        for v in self.delta.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |r: &str| Error::InvalidConfig(format!("malformed perturbation: {r}"));
        let mut parts = bytes.splitn(3, |&b| b == b'\n');
        if parts.next() != Some(PERTURBATION_MAGIC.as_bytes()) {
            return Err(bad("missing magic line"));
        }
        let header: PerturbationHeader = serde_json::from_slice(parts.next().ok_or_else(|| bad("no header"))?)?;
        let body = parts.next().ok_or_else(|| bad("no data"))?;
        let n: usize = header.shape.iter().product();
        if body.len() != 8 * n {
            return Err(bad("data length does not match shape"));
        }
        let data = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Self {
            delta: Tensor::from_vec(&header.shape, data)?,
            crafted_on: header.crafted_on,
            config: header.config,
            loss_history: header.loss_history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Margin anchor of the CW loss: the logit of the counting threshold.
pub fn cw_tau() -> f64 {
    (0.25f64 / 0.75).ln()
}

/// Sum of objectness confidences over all cells.
pub fn det_sum_loss(raw: &RawHeadOutput) -> f64 {
    raw.objectness_logits().iter().map(|&z| sigmoid(z)).sum()
}

/// Sum over cells of `max(z_obj - tau, -kappa)` with `kappa = 0`.
pub fn cw_margin_loss(raw: &RawHeadOutput) -> f64 {
    let tau = cw_tau();
    raw.objectness_logits().iter().map(|&z| (z - tau).max(0.0)).sum()
}

/// Ones on the objectness plane of a `[5+C, S, S]` head, zeros elsewhere.
fn objectness_mask(shape: &[usize]) -> Tensor {
    let plane = shape[1] * shape[2];
    let mut m = Tensor::zeros(shape);
    m.data_mut()[..plane].iter_mut().for_each(|v| *v = 1.0);
    m
}

/// Records the detection loss on top of a forward pass.
pub(crate) fn detection_objective(f: &mut Forward, loss: LossKind) -> Result<Var> {
    let shape = f.graph.value(f.head).shape().to_vec();
    let mask = f.graph.constant(objectness_mask(&shape))?;
    let per_cell = match loss {
        LossKind::DetSum => f.graph.sigmoid(f.head)?,
        LossKind::CwMargin => {
            let shift = f.graph.constant(Tensor::full(&shape, -cw_tau()))?;
            let z = f.graph.add(f.head, shift)?;
            f.graph.maximum(z, 0.0)?
        }
    };
    let masked = f.graph.mul(per_cell, mask)?;
    f.graph.sum(masked)
}

/// `sign` with `sign(0) = 0`, so a zero gradient leaves a pixel alone.
pub(crate) fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Pulls each `x + d` back into [0, 1], nudging `d` toward zero by ulps
/// where rounding of the sum would overshoot.
fn clip_to_box(x: &Tensor, delta: &mut Tensor) {
    for (&xi, d) in x.data().iter().zip(delta.data_mut()) {
        *d = d.clamp(-xi, 1.0 - xi);
        while xi + *d > 1.0 {
            *d = d.next_down();
        }
        while xi + *d < 0.0 {
            *d = d.next_up();
        }
    }
}

/// Projects onto `{|d|_inf <= eps} ∩ {x + d ∈ [0,1]}`.
pub fn project_linf(x: &Tensor, delta: &mut Tensor, eps: f64) {
    delta.data_mut().iter_mut().for_each(|d| *d = d.clamp(-eps, eps));
    clip_to_box(x, delta);
}

/// Projects onto the l2 ball by radial scaling, then clips to the box.
/// Clipping only shrinks coordinates, so the ball constraint survives.
pub fn project_l2(x: &Tensor, delta: &mut Tensor, eps: f64) {
    let n = delta.norm_l2();
    if n > eps {
        let k = eps / n;
        delta.data_mut().iter_mut().for_each(|d| *d *= k);
    }
    clip_to_box(x, delta);
}

pub(crate) fn project(x: &Tensor, delta: &mut Tensor, cfg: &AttackConfig) {
    match cfg.norm {
        Norm::Linf => project_linf(x, delta, cfg.eps),
        Norm::L2 => project_l2(x, delta, cfg.eps),
    }
}

/// Starting perturbation: zero, or uniform in the budget when requested.
pub(crate) fn initial_delta(x: &Tensor, cfg: &AttackConfig) -> Tensor {
    let mut d = Tensor::zeros(x.shape());
    if cfg.random_start {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let bound = match cfg.norm {
            Norm::Linf => cfg.eps,
            Norm::L2 => cfg.eps / (x.len() as f64).sqrt(),
        };
        d.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-bound..=bound));
        project(x, &mut d, cfg);
    }
    d
}

/// Fails if sweep cells were run with different attack configurations.
pub fn assert_constant_config<'a>(hashes: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
    let mut first: Option<(&str, &str)> = None;
    for (model, h) in hashes {
        match first {
            None => first = Some((model, h)),
            Some((m0, h0)) if h0 != h => {
                return Err(Error::InvalidConfig(format!(
                    "attack configuration differs between models {m0} and {model}"
                )))
            }
            _ => {}
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests;
