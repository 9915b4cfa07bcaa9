//! Pseudo-derivatives for the spike threshold.
//!
//! The forward pass of a spiking nonlinearity is a hard step. Its true
//! derivative is zero almost everywhere, so the backward pass substitutes a
//! window function centred on the threshold. Each surrogate also has a
//! primitive (its antiderivative, rising from 0 to 1); running the graph in
//! relaxed mode replaces the hard step with that primitive, which makes the
//! surrogate the exact derivative of the forward computation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateKind {
    /// Box window of height `1/width` on `|x| <= width/2`.
    Rectangular,
    /// Lorentzian window `(1/width) / (1 + (pi x / width)^2)`.
    ArcTan,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateSpec {
    pub kind: SurrogateKind,
    pub width: f64,
}

impl Default for SurrogateSpec {
    fn default() -> Self {
        Self {
            kind: SurrogateKind::Rectangular,
            width: 1.0,
        }
    }
}

impl SurrogateSpec {
    pub fn new(kind: SurrogateKind, width: f64) -> Result<Self> {
        let spec = Self { kind, width };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0 && self.width.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "surrogate width must be positive, got {}",
                self.width
            )));
        }
        Ok(())
    }

    /// Pseudo-derivative at `x = u - v_th`.
    #[inline]
    pub fn grad(&self, x: f64) -> f64 {
        match self.kind {
            SurrogateKind::Rectangular => {
                if x.abs() <= 0.5 * self.width {
                    1.0 / self.width
                } else {
                    0.0
                }
            }
            SurrogateKind::ArcTan => {
                let z = std::f64::consts::PI * x / self.width;
                (1.0 / self.width) / (1.0 + z * z)
            }
        }
    }

    /// Antiderivative of [`grad`](Self::grad), normalised to rise from 0 to 1.
    #[inline]
    pub fn primitive(&self, x: f64) -> f64 {
        match self.kind {
            SurrogateKind::Rectangular => (x / self.width + 0.5).clamp(0.0, 1.0),
            SurrogateKind::ArcTan => {
                0.5 + (std::f64::consts::PI * x / self.width).atan() / std::f64::consts::PI
            }
        }
    }

    /// Which smooth piece of the relaxed step `x` falls in. Two inputs with
    /// the same segment are joined by a path on which the primitive is
    /// differentiable.
    #[inline]
    pub fn segment(&self, x: f64) -> i8 {
        match self.kind {
            SurrogateKind::Rectangular => {
                let half = 0.5 * self.width;
                if x < -half {
                    -1
                } else if x > half {
                    1
                } else {
                    0
                }
            }
            SurrogateKind::ArcTan => 0,
        }
    }
}
