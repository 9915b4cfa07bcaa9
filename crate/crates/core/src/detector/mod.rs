//! A small single-scale grid detector with a swappable activation substrate.
//!
//! Backbone: four 3x3 convolutions, each followed by the substrate's
//! activation. The first `log2(input/grid)` convolutions have stride 2,
//! the rest stride 1, so the last map is `grid x grid`. A 1x1 head reads
//! the final layer averaged over timesteps (for spiking substrates this is
//! a non-firing membrane accumulator) and emits, per cell, objectness,
//! two centre offsets, two log-sizes and `classes` class logits.

mod checkpoint;
mod head;
mod train;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, SurrogateSpec, Var};
use crate::error::{Error, Result};
use rayon::prelude::*;

use crate::eval::{map50, nms, Detection, GroundTruth, COUNT_CONF_THRESH, MAP_CONF_THRESH, NMS_IOU_THRESH};
use crate::substrate::{FireMode, NeuronKind, NeuronParams, SubstrateSpec};
use crate::tensor::Tensor;

pub use self::checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader};
pub use self::head::{decode_head, RawHeadOutput, HEAD_FIXED};
pub use self::train::{detection_loss, train, Adam, EpochMetrics, LossWeights, TrainHyper, TrainReport};
pub(crate) use self::train::train_batch;

pub const BACKBONE_DEPTH: usize = 4;
pub const IMAGE_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub input_size: usize,
    pub channels: [usize; BACKBONE_DEPTH],
    pub grid: usize,
    pub classes: usize,
    pub substrate: SubstrateSpec,
    pub neuron: NeuronParams,
    pub surrogate: SurrogateSpec,
    /// Replace every spiking layer by ReLU and run a single timestep.
    pub ann_twin: bool,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            channels: [16, 32, 32, 32],
            grid: 8,
            classes: 3,
            substrate: SubstrateSpec::deployable_lif(4),
            neuron: NeuronParams::lif(),
            surrogate: SurrogateSpec::default(),
            ann_twin: false,
            seed: 0,
        }
    }
}

impl DetectorConfig {
    pub fn spiking(substrate: SubstrateSpec) -> Self {
        Self {
            neuron: NeuronParams::for_kind(substrate.neuron),
            substrate,
            ..Self::default()
        }
    }

    pub fn ann() -> Self {
        Self {
            ann_twin: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 || !self.input_size.is_multiple_of(self.grid) {
            return Err(Error::InvalidConfig(format!(
                "input size {} is not divisible by grid {}",
                self.input_size, self.grid
            )));
        }
        let ratio = self.input_size / self.grid;
        if !ratio.is_power_of_two() || ratio.trailing_zeros() as usize > BACKBONE_DEPTH {
            return Err(Error::InvalidConfig(format!(
                "input/grid ratio {ratio} must be a power of two reachable with {BACKBONE_DEPTH} stride-2 stages"
            )));
        }
        if self.classes == 0 {
            return Err(Error::InvalidConfig("need at least one class".into()));
        }
        if self.channels.contains(&0) {
            return Err(Error::InvalidConfig("channel counts must be positive".into()));
        }
        self.surrogate.validate()?;
        if !self.ann_twin {
            self.substrate.validate()?;
            self.neuron.validate()?;
            if self.neuron.kind != self.substrate.neuron {
                return Err(Error::InvalidConfig(format!(
                    "neuron parameters are {:?} but the substrate uses {:?}",
                    self.neuron.kind, self.substrate.neuron
                )));
            }
        }
        Ok(())
    }

    pub fn strides(&self) -> [usize; BACKBONE_DEPTH] {
        let downs = (self.input_size / self.grid).trailing_zeros() as usize;
        std::array::from_fn(|i| if i < downs { 2 } else { 1 })
    }

    pub fn head_channels(&self) -> usize {
        HEAD_FIXED + self.classes
    }

    pub fn cell_size(&self) -> f64 {
        (self.input_size / self.grid) as f64
    }

    pub fn timesteps(&self) -> usize {
        if self.ann_twin {
            1
        } else {
            self.substrate.timesteps
        }
    }
}

/// Nonlinearity after each backbone convolution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    /// Stateless hard threshold; the single-timestep limit of LIF.
    Threshold { v_th: f64 },
    Neuron(NeuronParams),
}

#[derive(Clone, Copy, Debug)]
pub struct GraphOptions {
    pub mode: FireMode,
    pub input_grad: bool,
    pub param_grad: bool,
    pub capture: bool,
}

impl Default for GraphOptions {
    fn default() -> Self {
        Self {
            mode: FireMode::Hard,
            input_grad: false,
            param_grad: false,
            capture: false,
        }
    }
}

/// A recorded forward pass.
pub struct Forward {
    pub graph: Graph,
    pub image: Var,
    pub params: Vec<Var>,
    pub head: Var,
    /// Pre-reset membrane potentials, `[layer][timestep]`.
    pub trace: Option<Vec<Vec<Var>>>,
}

impl Forward {
    pub fn spiking_layers(&self) -> usize {
        self.trace.as_ref().map_or(0, Vec::len)
    }
}

/// Captured membrane potentials of every spiking layer.
#[derive(Clone, Debug, PartialEq)]
pub struct MembraneTrace {
    pub layers: Vec<Vec<Tensor>>,
}

impl MembraneTrace {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }
}

#[derive(Debug)]
pub struct SpikingModel {
    pub id: String,
    cfg: DetectorConfig,
    activation: Activation,
    /// `[w1, b1, .., w4, b4, w_head, b_head]`.
    params: Vec<Tensor>,
    grad_queries: AtomicU64,
}

impl Clone for SpikingModel {
    fn clone(&self) -> Self {
        Self {
            id: self.id.clone(),
            cfg: self.cfg.clone(),
            activation: self.activation,
            params: self.params.clone(),
            grad_queries: AtomicU64::new(0),
        }
    }
}

/// Builds a detector with seeded He-uniform weights.
pub fn build_detector(id: impl Into<String>, cfg: &DetectorConfig) -> Result<SpikingModel> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = Vec::with_capacity(2 * BACKBONE_DEPTH + 2);
    let mut in_ch = IMAGE_CHANNELS;
    // Spiking layers see sparse inputs and must cross a threshold, so
    // their weights start larger than the ReLU gain.
    let gain = if cfg.ann_twin { 1.0 } else { 2.0 };
    for (layer, &out_ch) in cfg.channels.iter().enumerate() {
        let fan_in = in_ch * 9;
        let bound = gain * (6.0 / fan_in as f64).sqrt();
        let w: Vec<f64> = (0..out_ch * fan_in).map(|_| rng.gen_range(-bound..bound)).collect();
        params.push(Tensor::from_vec(&[out_ch, in_ch, 3, 3], w)?);
        let b = if cfg.ann_twin || layer == 0 { 0.0 } else { 0.1 };
        params.push(Tensor::full(&[out_ch], b));
        in_ch = out_ch;
    }
    let head_ch = cfg.head_channels();
    let bound = (3.0 / in_ch as f64).sqrt();
    let w: Vec<f64> = (0..head_ch * in_ch).map(|_| rng.gen_range(-bound..bound)).collect();
    params.push(Tensor::from_vec(&[head_ch, in_ch, 1, 1], w)?);
    let mut hb = vec![0.0; head_ch];
    hb[0] = -2.0;
    params.push(Tensor::from_vec(&[head_ch], hb)?);

    let activation = if cfg.ann_twin {
        Activation::Relu
    } else {
        Activation::Neuron(cfg.neuron)
    };
    Ok(SpikingModel {
        id: id.into(),
        cfg: cfg.clone(),
        activation,
        params,
        grad_queries: AtomicU64::new(0),
    })
}

impl SpikingModel {
    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                params.len()
            )));
        }
        for (old, new) in self.params.iter().zip(&params) {
            old.expect_shape("set_params", new.shape())?;
        }
        self.params = params;
        Ok(())
    }

    /// Number of layers with membrane state.
    pub fn spiking_layer_count(&self) -> usize {
        match self.activation {
            Activation::Neuron(_) => BACKBONE_DEPTH,
            _ => 0,
        }
    }

    /// Same weights with the stateless threshold activation.
    pub fn threshold_twin(&self) -> Self {
        let mut twin = self.clone();
        twin.id = format!("{}-threshold", self.id);
        twin.activation = Activation::Threshold {
            v_th: self.cfg.neuron.v_th,
        };
        twin
    }

    /// Backward passes taken with respect to this model's input.
    pub fn gradient_queries(&self) -> u64 {
        self.grad_queries.load(Ordering::SeqCst)
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let n = self.cfg.input_size;
        image.expect_shape("detector input", &[IMAGE_CHANNELS, n, n]).map_err(|_| Error::ShapeMismatch {
            op: "detector input",
            expected: vec![IMAGE_CHANNELS, n, n],
            got: image.shape().to_vec(),
        })?;
        if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidConfig("pixel values must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Records the full forward pass of one image.
    pub fn forward(&self, image: &Tensor, opts: GraphOptions) -> Result<Forward> {
        self.check_image(image)?;
        let mut g = Graph::with_mode(self.cfg.surrogate, opts.mode);
        let img = g.leaf(image.clone(), opts.input_grad)?;
        let params = self
            .params
            .iter()
            .map(|p| g.leaf(p.clone(), opts.param_grad))
            .collect::<Result<Vec<_>>>()?;
        let strides = self.cfg.strides();
        let conv = |g: &mut Graph, x: Var, layer: usize| -> Result<Var> {
            g.conv2d(x, params[2 * layer], Some(params[2 * layer + 1]), strides[layer], 1)
        };

        let (readout, trace) = match self.activation {
            Activation::Relu => {
                let mut x = img;
                for layer in 0..BACKBONE_DEPTH {
                    let c = conv(&mut g, x, layer)?;
                    x = g.relu(c)?;
                }
                (x, None)
            }
            Activation::Threshold { v_th } => {
                let mut x = img;
                for layer in 0..BACKBONE_DEPTH {
                    let c = conv(&mut g, x, layer)?;
                    x = g.spike(c, v_th)?;
                }
                (x, None)
            }
            Activation::Neuron(p) => {
                let steps = self.cfg.substrate.timesteps;
                // Direct encoding: the image is a constant current, so the
                // first convolution is shared by every timestep.
                let first = conv(&mut g, img, 0)?;
                let mut currents = vec![first; steps];
                let mut trace = Vec::with_capacity(BACKBONE_DEPTH);
                let mut spikes = Vec::new();
                for layer in 0..BACKBONE_DEPTH {
                    if layer > 0 {
                        currents = spikes
                            .iter()
                            .map(|&s| conv(&mut g, s, layer))
                            .collect::<Result<Vec<_>>>()?;
                    }
                    let mut membrane = None;
                    let mut layer_trace = Vec::with_capacity(steps);
                    spikes = Vec::with_capacity(steps);
                    for &x in &currents {
                        let out = g.neuron(membrane, x, p)?;
                        membrane = Some(out.membrane);
                        spikes.push(out.spikes);
                        layer_trace.push(out.potential);
                    }
                    trace.push(layer_trace);
                }
                let mut acc = spikes[0];
                for &s in &spikes[1..] {
                    acc = g.add(acc, s)?;
                }
                if steps > 1 {
                    acc = g.scale(acc, 1.0 / steps as f64)?;
                }
                (acc, opts.capture.then_some(trace))
            }
        };
        let k = 2 * BACKBONE_DEPTH;
        let head = g.conv2d(readout, params[k], Some(params[k + 1]), 1, 0)?;
        Ok(Forward {
            graph: g,
            image: img,
            params,
            head,
            trace,
        })
    }

    /// Deterministic inference with optional membrane capture.
    pub fn infer(&self, image: &Tensor, capture: bool) -> Result<(RawHeadOutput, Option<MembraneTrace>)> {
        let fwd = self.forward(
            image,
            GraphOptions {
                capture,
                ..GraphOptions::default()
            },
        )?;
        let raw = RawHeadOutput::new(fwd.graph.value(fwd.head).clone(), self.cfg.grid, self.cfg.classes)?;
        let trace = fwd.trace.as_ref().map(|layers| MembraneTrace {
            layers: layers
                .iter()
                .map(|steps| steps.iter().map(|&v| fwd.graph.value(v).clone()).collect())
                .collect(),
        });
        Ok((raw, trace))
    }

    /// Value and input gradient of a scalar built on top of the forward
    /// pass. Counts as one gradient query.
    pub fn input_gradient<F>(&self, image: &Tensor, capture: bool, loss: F) -> Result<(f64, Tensor)>
    where
        F: FnOnce(&mut Forward) -> Result<Var>,
    {
        self.input_gradient_with(image, capture, FireMode::Hard, loss)
    }

    pub fn input_gradient_with<F>(&self, image: &Tensor, capture: bool, mode: FireMode, loss: F) -> Result<(f64, Tensor)>
    where
        F: FnOnce(&mut Forward) -> Result<Var>,
    {
        self.grad_queries.fetch_add(1, Ordering::SeqCst);
        let mut fwd = self.forward(
            image,
            GraphOptions {
                mode,
                input_grad: true,
                capture,
                ..GraphOptions::default()
            },
        )?;
        let out = loss(&mut fwd)?;
        let value = fwd.graph.value(out).item();
        let mut grads = fwd.graph.backward(out, None)?;
        let g = grads
            .take(fwd.image)
            .unwrap_or_else(|| Tensor::zeros(image.shape()));
        if !g.is_finite() {
            return Err(Error::NonFinite("input gradient"));
        }
        Ok((value, g))
    }

    /// Post-NMS detections at the mAP confidence floor.
    pub fn detect(&self, image: &Tensor, image_id: u64) -> Result<Vec<Detection>> {
        let (raw, _) = self.infer(image, false)?;
        let cand = decode_head(&raw, MAP_CONF_THRESH, self.cfg.cell_size(), self.cfg.input_size as f64, image_id);
        Ok(nms(&cand, MAP_CONF_THRESH, NMS_IOU_THRESH))
    }
}

/// Detections kept for counting (post-NMS, confidence >= 0.25). Greedy NMS
/// only lets higher-ranked boxes suppress lower ones, so filtering the
/// mAP-floor output gives the same set as running NMS at 0.25.
pub fn count_view(dets: &[Detection]) -> Vec<Detection> {
    dets.iter()
        .filter(|d| d.confidence >= COUNT_CONF_THRESH)
        .copied()
        .collect()
}

/// One training or evaluation image.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image_id: u64,
    pub image: Tensor,
    pub gts: Vec<GroundTruth>,
}

/// Detections and summary metrics of one model over a sample set.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalPass {
    pub map: f64,
    /// Total detections at the counting threshold.
    pub count: usize,
    /// Per-sample detections at the mAP floor, in sample order.
    pub dets: Vec<Vec<Detection>>,
}

impl EvalPass {
    pub fn count_views(&self) -> Vec<Vec<Detection>> {
        self.dets.iter().map(|d| count_view(d)).collect()
    }
}

/// Runs `model` on every sample, or on `images[i]` in place of sample
/// `i` when replacement images are given, and scores against the
/// samples' ground truth.
pub fn evaluate(model: &SpikingModel, samples: &[Sample], images: Option<&[Tensor]>) -> Result<EvalPass> {
    if let Some(imgs) = images {
        if imgs.len() != samples.len() {
            return Err(Error::InvalidConfig(format!(
                "{} replacement images for {} samples",
                imgs.len(),
                samples.len()
            )));
        }
    }
    let dets: Vec<Vec<Detection>> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| model.detect(images.map_or(&s.image, |imgs| &imgs[i]), s.image_id))
        .collect::<Result<_>>()?;
    let flat: Vec<Detection> = dets.iter().flatten().copied().collect();
    let gts: Vec<GroundTruth> = samples.iter().flat_map(|s| s.gts.iter().copied()).collect();
    Ok(EvalPass {
        map: map50(&flat, &gts)?,
        count: dets.iter().map(|d| count_view(d).len()).sum(),
        dets,
    })
}

/// Whether this substrate is a spiking one, for display.
pub fn substrate_label(cfg: &DetectorConfig) -> String {
    if cfg.ann_twin {
        return "ANN".into();
    }
    let kind = match cfg.substrate.neuron {
        NeuronKind::Lif => "LIF",
        NeuronKind::ILif => "I-LIF",
        NeuronKind::SignedIf => "SignedIF",
    };
    format!("{kind} T={}", cfg.substrate.timesteps)
}

#[cfg(test)]
mod tests;
