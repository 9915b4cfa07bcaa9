//! Measurement, attack and defense toolkit for count-preserving accuracy
//! collapse ("quality corruption") in spiking object detectors.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`] and [`autodiff`]: dense arrays and a reverse-mode tape with
//!   surrogate derivatives for spike thresholds.
//! * [`substrate`]: LIF / I-LIF / SignedIF dynamics and the deployability
//!   classifier.
//! * [`detector`]: a small grid detector whose activation substrate can be
//!   swapped, with an ANN twin.
//! * [`eval`] and [`qc`]: IoU, NMS, mAP@50, DRR, the quality-corruption
//!   index, failure-mode labels and the count monitor.
//! * [`attacks`] and [`defenses`]: PGD variants, APGD, the membrane probe,
//!   transfer, purification and adversarial training.
//! * [`harness`]: synthetic data, COCO I/O, sweeps and reports.

pub mod attacks;
pub mod autodiff;
pub mod defenses;
pub mod detector;
pub mod error;
pub mod eval;
pub mod harness;
pub mod qc;
pub mod substrate;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
