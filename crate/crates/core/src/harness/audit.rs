//! Audits externally produced clean/attacked detection dumps against
//! COCO ground truth: DRR, QCI, per-image QCI and the count monitor.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::coco::{CocoDataset, DetectionRecord};
use crate::error::Result;
use crate::eval::{map50, per_image_precision, Detection, GroundTruth, COUNT_CONF_THRESH, MAP_CONF_THRESH};
use crate::qc::{
    alarm_count, classify_with, count_monitor, dump_signals, histogram, per_image_qci_checked, summarize_per_image,
    CellResult, CountBaseline, DumpSignals, Exclusion, FailureMode, ModeThresholds, MonitorConfig, PerImageSummary,
    WindowVerdict,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditThresholds {
    pub map_conf: f64,
    pub count_conf: f64,
    pub modes: ModeThresholds,
    pub monitor: MonitorConfig,
}

impl Default for AuditThresholds {
    fn default() -> Self {
        Self {
            map_conf: MAP_CONF_THRESH,
            count_conf: COUNT_CONF_THRESH,
            modes: ModeThresholds::default(),
            monitor: MonitorConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerImageQci {
    pub image_id: u64,
    pub qci: Option<f64>,
    pub excluded: Option<Exclusion>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub thresholds: AuditThresholds,
    pub cell: CellResult,
    pub mode: FailureMode,
    pub per_image: Vec<PerImageQci>,
    pub per_image_summary: PerImageSummary,
    /// `(lo, hi, count)` bins of the per-image QCI values.
    pub histogram: Vec<(f64, f64, usize)>,
    /// Mean per-image precision of the attacked dump over images that
    /// have attacked detections.
    pub mean_adv_precision: Option<f64>,
    pub monitor: Vec<WindowVerdict>,
    pub alarms: usize,
    pub signals_clean: DumpSignals,
    pub signals_adv: DumpSignals,
}

/// Count-threshold detections grouped by image, over every annotated image.
fn per_image(records: &[DetectionRecord], ids: &[u64], conf: f64) -> BTreeMap<u64, Vec<Detection>> {
    let mut out: BTreeMap<u64, Vec<Detection>> = ids.iter().map(|&id| (id, Vec::new())).collect();
    for r in records.iter().filter(|r| r.score >= conf) {
        out.entry(r.image_id).or_default().push(r.to_detection());
    }
    out
}

pub fn audit(
    annotations: &CocoDataset,
    clean: &[DetectionRecord],
    adv: &[DetectionRecord],
    th: &AuditThresholds,
) -> Result<AuditReport> {
    let gts = annotations.ground_truth();
    let ids = annotations.image_ids();
    let scored = |recs: &[DetectionRecord]| -> Vec<Detection> {
        recs.iter().filter(|r| r.score >= th.map_conf).map(|r| r.to_detection()).collect()
    };
    let clean_imgs = per_image(clean, &ids, th.count_conf);
    let adv_imgs = per_image(adv, &ids, th.count_conf);
    let mut gt_by_image: BTreeMap<u64, Vec<GroundTruth>> = BTreeMap::new();
    for g in &gts {
        gt_by_image.entry(g.image_id).or_default().push(*g);
    }
    let cell = CellResult {
        model_id: "external".into(),
        norm: "dump".into(),
        eps: 0.0,
        steps: 0,
        loss: "unknown".into(),
        map_clean: map50(&scored(clean), &gts)?,
        map_adv: map50(&scored(adv), &gts)?,
        count_clean: clean_imgs.values().map(Vec::len).sum(),
        count_adv: adv_imgs.values().map(Vec::len).sum(),
    };
    let mode = classify_with(cell.qci()?, cell.drr()?, &th.modes);

    let empty = Vec::new();
    let mut per_image_rows = Vec::with_capacity(ids.len());
    let mut values = Vec::new();
    let mut precisions = Vec::new();
    for &id in &ids {
        let g = gt_by_image.get(&id).unwrap_or(&empty);
        let (c, a) = (&clean_imgs[&id], &adv_imgs[&id]);
        if let Some(p) = per_image_precision(a, g) {
            precisions.push(p);
        }
        let row = match per_image_qci_checked(c, a, g) {
            Ok(q) => {
                values.push(q);
                PerImageQci {
                    image_id: id,
                    qci: Some(q),
                    excluded: None,
                }
            }
            Err(e) => PerImageQci {
                image_id: id,
                qci: None,
                excluded: Some(e),
            },
        };
        per_image_rows.push(row);
    }
    let n_excluded = per_image_rows.len() - values.len();
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let hist = if values.is_empty() { Vec::new() } else { histogram(&values, lo, hi, 20) };

    let clean_counts: Vec<usize> = clean_imgs.values().map(Vec::len).collect();
    let adv_counts: Vec<usize> = adv_imgs.values().map(Vec::len).collect();
    let baseline = CountBaseline::from_counts(&clean_counts)?;
    let monitor = count_monitor(&baseline, &adv_counts, &th.monitor);
    let flat = |m: &BTreeMap<u64, Vec<Detection>>| m.values().flatten().copied().collect::<Vec<_>>();
    Ok(AuditReport {
        thresholds: *th,
        mode,
        per_image_summary: summarize_per_image(&values, n_excluded),
        histogram: hist,
        mean_adv_precision: (!precisions.is_empty()).then(|| precisions.iter().sum::<f64>() / precisions.len() as f64),
        alarms: alarm_count(&monitor),
        monitor,
        signals_clean: dump_signals(&flat(&clean_imgs)),
        signals_adv: dump_signals(&flat(&adv_imgs)),
        per_image: per_image_rows,
        cell,
    })
}
