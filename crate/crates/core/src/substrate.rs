//! Neuron dynamics, input encoding, and the hardware-deployability classifier.
//!
//! Three neuron families are modelled, each with hard reset semantics chosen
//! to match its spike alphabet:
//!
//! | kind       | spikes            | reset                       | leak |
//! |------------|-------------------|-----------------------------|------|
//! | `Lif`      | `{0, 1}`          | to 0 on fire                | β    |
//! | `ILif`     | `{0, .., d_max}`  | subtract `level * v_th`     | β    |
//! | `SignedIf` | `{-1, 0, 1}`      | to 0 on either fire         | none |
//!
//! The I-LIF and SignedIF rules reproduce the value ranges of those neurons;
//! their internals are approximations.

use serde::{Deserialize, Serialize};

use crate::autodiff::SurrogateSpec;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeuronKind {
    Lif,
    ILif,
    SignedIf,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronParams {
    pub kind: NeuronKind,
    /// Leak factor in `(0, 1]`. Ignored by `SignedIf`.
    pub beta: f64,
    pub v_th: f64,
    /// Largest integer spike level (`ILif` only).
    pub d_max: u32,
}

impl NeuronParams {
    pub fn lif() -> Self {
        Self {
            kind: NeuronKind::Lif,
            beta: 0.5,
            v_th: 1.0,
            d_max: 1,
        }
    }

    pub fn ilif() -> Self {
        Self {
            kind: NeuronKind::ILif,
            d_max: 4,
            ..Self::lif()
        }
    }

    pub fn signed_if() -> Self {
        Self {
            kind: NeuronKind::SignedIf,
            beta: 1.0,
            ..Self::lif()
        }
    }

    pub fn for_kind(kind: NeuronKind) -> Self {
        match kind {
            NeuronKind::Lif => Self::lif(),
            NeuronKind::ILif => Self::ilif(),
            NeuronKind::SignedIf => Self::signed_if(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "beta must lie in (0, 1], got {}",
                self.beta
            )));
        }
        if !(self.v_th > 0.0 && self.v_th.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "v_th must be positive, got {}",
                self.v_th
            )));
        }
        if self.kind == NeuronKind::ILif && self.d_max < 1 {
            return Err(Error::InvalidConfig("I-LIF needs d_max >= 1".into()));
        }
        Ok(())
    }

    /// Leak actually applied: integrate-and-fire neurons do not leak.
    pub fn effective_beta(&self) -> f64 {
        match self.kind {
            NeuronKind::SignedIf => 1.0,
            _ => self.beta,
        }
    }
}

/// How spiking nonlinearities evaluate in the forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FireMode {
    /// Hard threshold; the surrogate only appears in the backward pass.
    #[default]
    Hard,
    /// The threshold is replaced by the surrogate's primitive so that the
    /// backward pass is the exact derivative. Used for gradient checking.
    Relaxed,
}

/// Per-element result of one firing decision.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fired {
    pub spike: f64,
    /// Membrane after reset.
    pub membrane: f64,
    /// d spike / d potential.
    pub d_spike: f64,
    /// d membrane / d potential.
    pub d_membrane: f64,
}

#[inline]
fn step(x: f64, s: &SurrogateSpec, mode: FireMode) -> f64 {
    match mode {
        FireMode::Hard => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        FireMode::Relaxed => s.primitive(x),
    }
}

/// Fire on an integrated potential `v` (the value after leak and input).
#[inline]
pub fn fire(p: &NeuronParams, s: &SurrogateSpec, mode: FireMode, v: f64) -> Fired {
    match p.kind {
        NeuronKind::Lif => {
            let x = v - p.v_th;
            let spike = step(x, s, mode);
            let g = s.grad(x);
            Fired {
                spike,
                membrane: v * (1.0 - spike),
                d_spike: g,
                d_membrane: (1.0 - spike) - v * g,
            }
        }
        NeuronKind::ILif => {
            let (level, d_level) = match mode {
                FireMode::Hard => {
                    let level = (v / p.v_th).floor().clamp(0.0, p.d_max as f64);
                    let d = (1..=p.d_max)
                        .map(|k| s.grad(v - k as f64 * p.v_th))
                        .sum::<f64>();
                    (level, d)
                }
                FireMode::Relaxed => (1..=p.d_max).fold((0.0, 0.0), |(l, d), k| {
                    let x = v - k as f64 * p.v_th;
                    (l + s.primitive(x), d + s.grad(x))
                }),
            };
            Fired {
                spike: level,
                membrane: v - level * p.v_th,
                d_spike: d_level,
                d_membrane: 1.0 - p.v_th * d_level,
            }
        }
        NeuronKind::SignedIf => {
            let up = v - p.v_th;
            let down = -v - p.v_th;
            let pos = step(up, s, mode);
            let neg = step(down, s, mode);
            let (g_up, g_down) = (s.grad(up), s.grad(down));
            Fired {
                spike: pos - neg,
                membrane: v * (1.0 - pos - neg),
                d_spike: g_up + g_down,
                d_membrane: (1.0 - pos - neg) - v * (g_up - g_down),
            }
        }
    }
}

/// Identifies the differentiable piece of [`fire`] containing `v`.
pub fn fire_segment(p: &NeuronParams, s: &SurrogateSpec, mode: FireMode, v: f64) -> i64 {
    let seg = |x: f64| -> i64 {
        match mode {
            FireMode::Hard => (x > 0.0) as i64,
            FireMode::Relaxed => s.segment(x) as i64,
        }
    };
    match p.kind {
        NeuronKind::Lif => seg(v - p.v_th),
        NeuronKind::ILif => (1..=p.d_max).fold(0, |acc, k| acc * 3 + seg(v - k as f64 * p.v_th) + 1),
        NeuronKind::SignedIf => seg(v - p.v_th) * 3 + seg(-v - p.v_th),
    }
}

/// Membrane potentials of one population and the number of steps taken.
#[derive(Clone, Debug, PartialEq)]
pub struct MembraneState {
    pub u: Tensor,
    pub t: usize,
}

impl MembraneState {
    pub fn resting(shape: &[usize]) -> Self {
        Self {
            u: Tensor::zeros(shape),
            t: 0,
        }
    }
}

fn neuron_step(
    state: &MembraneState,
    x_t: &Tensor,
    p: &NeuronParams,
) -> Result<(MembraneState, Tensor)> {
    state.u.expect_shape("neuron step", x_t.shape())?;
    let s = SurrogateSpec::default();
    let beta = p.effective_beta();
    let mut u = Vec::with_capacity(x_t.len());
    let mut spikes = Vec::with_capacity(x_t.len());
    for (&u0, &x) in state.u.data().iter().zip(x_t.data()) {
        let f = fire(p, &s, FireMode::Hard, beta * u0 + x);
        u.push(f.membrane);
        spikes.push(f.spike);
    }
    let shape = x_t.shape();
    Ok((
        MembraneState {
            u: Tensor::from_vec(shape, u)?,
            t: state.t + 1,
        },
        Tensor::from_vec(shape, spikes)?,
    ))
}

fn expect_kind(p: &NeuronParams, kind: NeuronKind) -> Result<()> {
    p.validate()?;
    if p.kind != kind {
        return Err(Error::InvalidConfig(format!(
            "expected {kind:?} neuron parameters, got {:?}",
            p.kind
        )));
    }
    Ok(())
}

/// `u' = beta*u + x`; fire where `u' > v_th` and reset those neurons to 0.
pub fn lif_step(
    state: &MembraneState,
    x_t: &Tensor,
    p: &NeuronParams,
) -> Result<(MembraneState, Tensor)> {
    expect_kind(p, NeuronKind::Lif)?;
    neuron_step(state, x_t, p)
}

/// Integer spikes `clamp(floor(u'/v_th), 0, d_max)`, subtracted from the membrane.
pub fn ilif_step(
    state: &MembraneState,
    x_t: &Tensor,
    p: &NeuronParams,
) -> Result<(MembraneState, Tensor)> {
    expect_kind(p, NeuronKind::ILif)?;
    neuron_step(state, x_t, p)
}

/// Ternary spikes: `+1` above `v_th`, `-1` below `-v_th`. No leak.
pub fn signed_if_step(
    state: &MembraneState,
    x_t: &Tensor,
    p: &NeuronParams,
) -> Result<(MembraneState, Tensor)> {
    expect_kind(p, NeuronKind::SignedIf)?;
    neuron_step(state, x_t, p)
}

/// Hard threshold with strict inequality, outside any graph.
pub fn spike_threshold(u: &Tensor, v_th: f64) -> Tensor {
    u.map(|v| if v > v_th { 1.0 } else { 0.0 })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    Binary01,
    Integer0ToD,
    Ternary,
}

/// Three-valued answer for the binary-spike constraint; ternary spikes
/// split into excitatory and inhibitory binary channels and so satisfy it
/// conditionally.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    Yes,
    Conditional,
    No,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubstrateSpec {
    pub encoding: Encoding,
    pub neuron: NeuronKind,
    pub timesteps: usize,
    /// (i) binary spikes.
    pub c1_binary_spikes: Constraint,
    /// (ii) accumulate-only arithmetic.
    pub c2_ac_only: bool,
    /// (iii) no dense matrix multiplication.
    pub c3_no_dense_matmul: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Deployability {
    HardwareDeployable,
    NonDeployable,
}

impl SubstrateSpec {
    /// Binary LIF, all three constraints met (EMS-YOLO row).
    pub fn deployable_lif(timesteps: usize) -> Self {
        Self {
            encoding: Encoding::Binary01,
            neuron: NeuronKind::Lif,
            timesteps,
            c1_binary_spikes: Constraint::Yes,
            c2_ac_only: true,
            c3_no_dense_matmul: true,
        }
    }

    /// Integer I-LIF (SpikeYOLO row).
    pub fn integer_ilif(timesteps: usize) -> Self {
        Self {
            encoding: Encoding::Integer0ToD,
            neuron: NeuronKind::ILif,
            timesteps,
            c1_binary_spikes: Constraint::No,
            c2_ac_only: false,
            c3_no_dense_matmul: true,
        }
    }

    /// Ternary SignedIF (SpikingYOLOX row).
    pub fn ternary_signed_if(timesteps: usize) -> Self {
        Self {
            encoding: Encoding::Ternary,
            neuron: NeuronKind::SignedIf,
            timesteps,
            c1_binary_spikes: Constraint::Conditional,
            c2_ac_only: false,
            c3_no_dense_matmul: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.timesteps == 0 {
            return Err(Error::InvalidConfig("timesteps must be >= 1".into()));
        }
        let implied = match self.encoding {
            Encoding::Binary01 => Constraint::Yes,
            Encoding::Ternary => Constraint::Conditional,
            Encoding::Integer0ToD => Constraint::No,
        };
        if self.c1_binary_spikes != implied {
            return Err(Error::InvalidConfig(format!(
                "{:?} encoding implies binary-spike constraint {implied:?}, got {:?}",
                self.encoding, self.c1_binary_spikes
            )));
        }
        Ok(())
    }
}

/// Deployable only when every constraint holds unconditionally.
pub fn classify_substrate(spec: &SubstrateSpec) -> Deployability {
    if spec.c1_binary_spikes == Constraint::Yes && spec.c2_ac_only && spec.c3_no_dense_matmul {
        Deployability::HardwareDeployable
    } else {
        Deployability::NonDeployable
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputScheme {
    /// The analog image is injected as a constant current at every step.
    #[default]
    Direct,
}

pub fn encode_input(image: &Tensor, timesteps: usize, scheme: InputScheme) -> Vec<Tensor> {
    match scheme {
        InputScheme::Direct => vec![image.clone(); timesteps],
    }
}
