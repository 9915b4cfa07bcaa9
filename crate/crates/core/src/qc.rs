//! Count/accuracy coupling metrics.
//!
//! The detection rate reduction (DRR) measures how many detections an
//! attack removes; the quality-corruption index (QCI) subtracts it from
//! the relative mAP drop:
//!
//! ```text
//! QCI = (1 - mAP_adv / mAP_clean) * 100 - DRR
//! ```
//!
//! QCI near zero means count and accuracy fall together. Large positive
//! QCI at low DRR means detections survive while their accuracy does not.
//! The failure-mode thresholds below are reporting conveniences; raw QCI
//! and DRR are always reported alongside the label.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{per_image_precision, Detection, GroundTruth};

/// QCI at or above which a low-DRR cell counts as quality corruption.
pub const QC_TAU: f64 = 20.0;
/// DRR at or below which positive QCI counts as quality corruption.
pub const DRR_TAU: f64 = 50.0;
/// DRR at or above which a cell is labelled suppression.
pub const SUPPRESSION_DRR: f64 = 80.0;

/// Percentage of detections removed; negative when detections increase.
pub fn drr(count_clean: usize, count_adv: usize) -> Result<f64> {
    if count_clean == 0 {
        return Err(Error::Undefined("DRR", "no clean detections"));
    }
    Ok((1.0 - count_adv as f64 / count_clean as f64) * 100.0)
}

/// Relative mAP drop in percent.
pub fn map_drop_pct(map_clean: f64, map_adv: f64) -> Result<f64> {
    if map_clean <= 0.0 {
        return Err(Error::Undefined("QCI", "clean mAP is zero"));
    }
    Ok((1.0 - map_adv / map_clean) * 100.0)
}

pub fn qci(map_clean: f64, map_adv: f64, drr: f64) -> Result<f64> {
    Ok(map_drop_pct(map_clean, map_adv)? - drr)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FailureLabel {
    Suppression,
    Coupled,
    QualityCorruption,
}

impl std::fmt::Display for FailureLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FailureLabel::Suppression => "Suppression",
            FailureLabel::Coupled => "Coupled",
            FailureLabel::QualityCorruption => "QualityCorruption",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureMode {
    pub label: FailureLabel,
    pub qci: f64,
    pub drr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeThresholds {
    pub qc_tau: f64,
    pub drr_tau: f64,
    pub suppression_drr: f64,
}

impl Default for ModeThresholds {
    fn default() -> Self {
        Self {
            qc_tau: QC_TAU,
            drr_tau: DRR_TAU,
            suppression_drr: SUPPRESSION_DRR,
        }
    }
}

pub fn classify_failure_mode(qci: f64, drr: f64) -> FailureMode {
    classify_with(qci, drr, &ModeThresholds::default())
}

pub fn classify_with(qci: f64, drr: f64, th: &ModeThresholds) -> FailureMode {
    let label = if qci >= th.qc_tau && drr <= th.drr_tau && drr < th.suppression_drr {
        FailureLabel::QualityCorruption
    } else if drr >= th.suppression_drr {
        FailureLabel::Suppression
    } else {
        FailureLabel::Coupled
    };
    FailureMode { label, qci, drr }
}

/// Per-image QCI with precision standing in for mAP. Returns `None` for
/// images that must be excluded: no clean detections, or clean precision
/// of zero. An attacked image with no detections has precision 0.
pub fn per_image_qci(dets_clean: &[Detection], dets_adv: &[Detection], gts: &[GroundTruth]) -> Option<f64> {
    let prec_clean = per_image_precision(dets_clean, gts)?;
    if prec_clean == 0.0 {
        return None;
    }
    let prec_adv = per_image_precision(dets_adv, gts).unwrap_or(0.0);
    let drr_img = drr(dets_clean.len(), dets_adv.len()).ok()?;
    Some((1.0 - prec_adv / prec_clean) * 100.0 - drr_img)
}

/// Why an image was left out of the per-image distribution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Exclusion {
    NoCleanDetections,
    ZeroCleanPrecision,
}

pub fn per_image_qci_checked(
    dets_clean: &[Detection],
    dets_adv: &[Detection],
    gts: &[GroundTruth],
) -> Result<f64, Exclusion> {
    match per_image_precision(dets_clean, gts) {
        None => Err(Exclusion::NoCleanDetections),
        Some(0.0) => Err(Exclusion::ZeroCleanPrecision),
        Some(_) => per_image_qci(dets_clean, dets_adv, gts).ok_or(Exclusion::NoCleanDetections),
    }
}

/// Summary of a per-image QCI distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerImageSummary {
    pub n_images: usize,
    pub n_excluded: usize,
    pub median: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
    /// Share of included images with positive QCI.
    pub corruption_dominant: f64,
}

pub fn summarize_per_image(values: &[f64], n_excluded: usize) -> PerImageSummary {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = if sorted.is_empty() {
        None
    } else if sorted.len() % 2 == 1 {
        Some(sorted[sorted.len() / 2])
    } else {
        Some(0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2]))
    };
    let pos = values.iter().filter(|&&v| v > 0.0).count();
    PerImageSummary {
        n_images: values.len(),
        n_excluded,
        median,
        min: sorted.first().copied(),
        max: sorted.last().copied(),
        corruption_dominant: if values.is_empty() {
            0.0
        } else {
            pos as f64 / values.len() as f64
        },
    }
}

/// Fixed-width histogram over `[lo, hi)`; values outside land in the end bins.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<(f64, f64, usize)> {
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in values {
        let k = ((v - lo) / width).floor();
        let k = if k < 0.0 { 0 } else { (k as usize).min(bins - 1) };
        counts[k] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| (lo + i as f64 * width, lo + (i + 1) as f64 * width, c))
        .collect()
}

/// Clean-stream statistics the count monitor compares against.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountBaseline {
    pub mean: f64,
    pub std: f64,
    pub n_images: usize,
}

pub const MIN_BASELINE_IMAGES: usize = 30;

impl CountBaseline {
    pub fn from_counts(counts: &[usize]) -> Result<Self> {
        if counts.len() < MIN_BASELINE_IMAGES {
            return Err(Error::InvalidConfig(format!(
                "count baseline needs at least {MIN_BASELINE_IMAGES} clean images, got {}",
                counts.len()
            )));
        }
        let n = counts.len() as f64;
        let mean = counts.iter().sum::<usize>() as f64 / n;
        let var = counts.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / n;
        Ok(Self {
            mean,
            std: var.sqrt(),
            n_images: counts.len(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonitorConfig {
    pub window: usize,
    /// Alarm when the window mean drops below `(1 - f) * baseline mean`.
    pub alarm_drop_fraction: f64,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            window: 10,
            alarm_drop_fraction: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowVerdict {
    pub start: usize,
    pub mean_count: f64,
    pub alarm: bool,
}

/// Sliding-window detection-count monitor. Only counts enter the
/// decision, so two streams with equal counts always get equal verdicts.
pub fn count_monitor(baseline: &CountBaseline, observed: &[usize], cfg: &MonitorConfig) -> Vec<WindowVerdict> {
    let window = cfg.window.max(1);
    let floor = (1.0 - cfg.alarm_drop_fraction) * baseline.mean;
    if observed.is_empty() {
        return Vec::new();
    }
    let starts = if observed.len() <= window {
        0..1
    } else {
        0..observed.len() - window + 1
    };
    starts
        .map(|start| {
            let end = (start + window).min(observed.len());
            let slice = &observed[start..end];
            let mean_count = slice.iter().sum::<usize>() as f64 / slice.len() as f64;
            WindowVerdict {
                start,
                mean_count,
                alarm: mean_count < floor,
            }
        })
        .collect()
}

pub fn alarm_count(verdicts: &[WindowVerdict]) -> usize {
    verdicts.iter().filter(|v| v.alarm).count()
}

/// Ground-truth-free distribution signals of a detection dump.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpSignals {
    pub n_detections: usize,
    pub mean_confidence: f64,
    pub mean_box_area: f64,
    /// Shannon entropy (nats) of the predicted class histogram.
    pub class_entropy: f64,
}

pub fn dump_signals(dets: &[Detection]) -> DumpSignals {
    let n = dets.len();
    if n == 0 {
        return DumpSignals {
            n_detections: 0,
            mean_confidence: 0.0,
            mean_box_area: 0.0,
            class_entropy: 0.0,
        };
    }
    let mut hist: BTreeMap<usize, usize> = BTreeMap::new();
    for d in dets {
        *hist.entry(d.class_id).or_default() += 1;
    }
    let entropy = hist
        .values()
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.ln()
        })
        .sum();
    DumpSignals {
        n_detections: n,
        mean_confidence: dets.iter().map(|d| d.confidence).sum::<f64>() / n as f64,
        mean_box_area: dets.iter().map(|d| d.bbox.area()).sum::<f64>() / n as f64,
        class_entropy: entropy,
    }
}

/// One model x attack evaluation: the raw inputs of DRR and QCI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub model_id: String,
    /// `linf`, `l2`, `none` for a clean baseline, or a defense/control tag.
    pub norm: String,
    /// Budget in the norm's own units (pixel scale for both norms).
    pub eps: f64,
    pub steps: usize,
    pub loss: String,
    pub map_clean: f64,
    pub map_adv: f64,
    pub count_clean: usize,
    pub count_adv: usize,
}

impl CellResult {
    pub fn drr(&self) -> Result<f64> {
        drr(self.count_clean, self.count_adv)
    }

    pub fn map_drop_pct(&self) -> Result<f64> {
        map_drop_pct(self.map_clean, self.map_adv)
    }

    pub fn qci(&self) -> Result<f64> {
        qci(self.map_clean, self.map_adv, self.drr()?)
    }

    pub fn failure_mode(&self) -> Result<FailureMode> {
        Ok(classify_failure_mode(self.qci()?, self.drr()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::BBox;
    use proptest::prelude::*;

    #[test]
    fn drr_examples() {
        assert!((drr(1000, 710).unwrap() - 29.0).abs() < 1e-9);
        assert_eq!(drr(7, 7).unwrap(), 0.0);
        assert_eq!(drr(5, 10).unwrap(), -100.0);
        assert!(drr(0, 3).is_err());
    }

    #[test]
    fn qci_examples() {
        let v = qci(0.528, 0.042, 29.0).unwrap();
        assert!((v - 63.045_454_545).abs() < 1e-6);
        assert!((v - 63.0).abs() < 0.1);
        assert_eq!(qci(0.4, 0.4, 0.0).unwrap(), 0.0);
        assert!(qci(0.0, 0.1, 0.0).is_err());
        // YOLOv3-tiny row: mAP drop 95.9, DRR 99.6
        let m_adv = 0.468 * (1.0 - 0.959);
        assert!((qci(0.468, m_adv, 99.6).unwrap() + 3.7).abs() < 1e-9);
    }

    #[test]
    fn failure_modes() {
        use FailureLabel::*;
        assert_eq!(classify_failure_mode(63.0, 29.0).label, QualityCorruption);
        assert_eq!(classify_failure_mode(-3.7, 99.6).label, Suppression);
        assert_eq!(classify_failure_mode(5.5, 85.6).label, Suppression);
        assert_eq!(classify_failure_mode(8.8, 72.2).label, Coupled);
        assert_eq!(classify_failure_mode(-16.3, 75.4).label, Coupled);
    }

    fn d(x: f64, class_id: usize) -> Detection {
        Detection {
            bbox: BBox::new(x, 0.0, 10.0, 10.0),
            class_id,
            confidence: 0.9,
            image_id: 0,
        }
    }

    fn g(x: f64, class_id: usize) -> GroundTruth {
        GroundTruth {
            bbox: BBox::new(x, 0.0, 10.0, 10.0),
            class_id,
            image_id: 0,
        }
    }

    #[test]
    fn per_image_qci_cases() {
        let gts = vec![g(0.0, 0)];
        let clean = vec![d(0.0, 0)];
        assert_eq!(per_image_qci(&clean, &[d(200.0, 0)], &gts), Some(100.0));
        let adv: Vec<Detection> = (0..14).map(|i| d(100.0 + 20.0 * i as f64, 0)).collect();
        assert_eq!(per_image_qci(&clean, &adv, &gts), Some(1400.0));
        assert_eq!(per_image_qci(&clean, &clean, &gts), Some(0.0));
        // Excluded: no clean detections, or no correct clean detection.
        assert_eq!(per_image_qci(&[], &adv, &gts), None);
        assert_eq!(
            per_image_qci_checked(&[d(300.0, 0)], &adv, &gts),
            Err(Exclusion::ZeroCleanPrecision)
        );
        // Full suppression couples exactly.
        assert_eq!(per_image_qci(&clean, &[], &gts), Some(0.0));
    }

    #[test]
    fn monitor_cases() {
        let base = CountBaseline::from_counts(&[5; 40]).unwrap();
        let cfg = MonitorConfig::default();
        assert_eq!(alarm_count(&count_monitor(&base, &[5; 40], &cfg)), 0);
        assert!(alarm_count(&count_monitor(&base, &[0; 40], &cfg)) > 0);
        assert!(CountBaseline::from_counts(&[5; 10]).is_err());
    }

    #[test]
    fn histogram_counts_everything() {
        let h = histogram(&[-500.0, 0.0, 10.0, 2000.0], -300.0, 1500.0, 18);
        assert_eq!(h.iter().map(|b| b.2).sum::<usize>(), 4);
        assert_eq!(h[0].2, 1);
        assert_eq!(h[17].2, 1);
    }

    #[test]
    fn signals() {
        let s = dump_signals(&[d(0.0, 0), d(10.0, 1)]);
        assert_eq!(s.n_detections, 2);
        assert!((s.class_entropy - 2f64.ln()).abs() < 1e-12);
        assert_eq!(s.mean_box_area, 100.0);
    }

    proptest! {
        #[test]
        fn qci_identity(mc in 0.01f64..1.0, ma in 0.0f64..1.0, cc in 1usize..500, ca in 0usize..800) {
            let r = drr(cc, ca).unwrap();
            let q = qci(mc, ma, r).unwrap();
            prop_assert_eq!(q, (1.0 - ma / mc) * 100.0 - r);
        }

        #[test]
        fn heavy_suppression_never_qc(q in -500.0f64..500.0, r in 80.0f64..100.0) {
            prop_assert_ne!(classify_failure_mode(q, r).label, FailureLabel::QualityCorruption);
        }

        #[test]
        fn monitor_sees_only_counts(counts in proptest::collection::vec(0usize..10, 1..60)) {
            let base = CountBaseline::from_counts(&[4; 30]).unwrap();
            let cfg = MonitorConfig::default();
            let a = count_monitor(&base, &counts, &cfg);
            let b = count_monitor(&base, &counts.clone(), &cfg);
            prop_assert_eq!(a, b);
        }
    }
}
