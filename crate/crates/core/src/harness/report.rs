//! Report rows with a fixed column order, rendered as CSV, JSON or a
//! plain-text table.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{COUNT_CONF_THRESH, MAP_CONF_THRESH, NMS_IOU_THRESH};
use crate::qc::{classify_with, CellResult, ModeThresholds};

/// One report line. Field order is the column order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub norm: String,
    pub eps: f64,
    pub steps: usize,
    pub loss: String,
    pub map_clean: f64,
    pub map_adv: f64,
    pub count_clean: usize,
    pub count_adv: usize,
    /// Empty when undefined (no clean detections).
    pub drr: Option<f64>,
    pub map_drop_pct: Option<f64>,
    pub qci: Option<f64>,
    pub mode: String,
}

pub const COLUMNS: [&str; 13] = [
    "model",
    "norm",
    "eps",
    "steps",
    "loss",
    "map_clean",
    "map_adv",
    "count_clean",
    "count_adv",
    "drr",
    "map_drop_pct",
    "qci",
    "mode",
];

impl ReportRow {
    pub fn from_cell(cell: &CellResult, th: &ModeThresholds) -> Self {
        let drr = cell.drr().ok();
        let qci = cell.qci().ok();
        let mode = match (qci, drr) {
            _ if cell.norm == "none" => "clean".to_string(),
            (Some(q), Some(d)) => classify_with(q, d, th).label.to_string(),
            _ => "undefined".to_string(),
        };
        Self {
            model: cell.model_id.clone(),
            norm: cell.norm.clone(),
            eps: cell.eps,
            steps: cell.steps,
            loss: cell.loss.clone(),
            map_clean: cell.map_clean,
            map_adv: cell.map_adv,
            count_clean: cell.count_clean,
            count_adv: cell.count_adv,
            drr,
            map_drop_pct: cell.map_drop_pct().ok(),
            qci,
            mode,
        }
    }

    /// The clean-baseline row of a model.
    pub fn baseline(model: &str, map: f64, count: usize) -> Self {
        let cell = CellResult {
            model_id: model.to_string(),
            norm: "none".into(),
            eps: 0.0,
            steps: 0,
            loss: "none".into(),
            map_clean: map,
            map_adv: map,
            count_clean: count,
            count_adv: count,
        };
        Self::from_cell(&cell, &ModeThresholds::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub seed: u64,
    /// SHA-256 of the run configuration.
    pub config_hash: String,
    pub version: String,
    pub nms_iou: f64,
    pub map_conf: f64,
    pub count_conf: f64,
    pub mode_thresholds: ModeThresholds,
}

impl ReportMeta {
    pub fn new(seed: u64, config_hash: String) -> Self {
        Self {
            seed,
            config_hash,
            version: env!("CARGO_PKG_VERSION").to_string(),
            nms_iou: NMS_IOU_THRESH,
            map_conf: MAP_CONF_THRESH,
            count_conf: COUNT_CONF_THRESH,
            mode_thresholds: ModeThresholds::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub meta: ReportMeta,
    pub rows: Vec<ReportRow>,
    /// Cells that failed, with the error text.
    #[serde(default)]
    pub failures: Vec<String>,
    /// Rows whose attack raised mAP, where QCI is applied as written.
    #[serde(default)]
    pub flags: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
    Table,
}

impl Format {
    pub fn from_extension(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => Ok(Format::Csv),
            Some("json") => Ok(Format::Json),
            Some("txt") => Ok(Format::Table),
            other => Err(Error::InvalidConfig(format!("unknown report extension {other:?}"))),
        }
    }
}

pub fn flags_for(rows: &[ReportRow]) -> Vec<String> {
    rows.iter()
        .filter(|r| r.map_drop_pct.is_some_and(|d| d < 0.0))
        .map(|r| format!("{} {} eps={}: attacked mAP exceeds clean mAP", r.model, r.norm, r.eps))
        .collect()
}

pub fn to_csv(rows: &[ReportRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record(COLUMNS)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidConfig(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn from_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

fn eps_label(norm: &str, eps: f64) -> String {
    if norm == "linf" {
        let k = eps * 255.0;
        if (k - k.round()).abs() < 1e-9 {
            return format!("{}/255", k.round());
        }
    }
    format!("{eps:.3}")
}

fn opt(v: Option<f64>, signed: bool) -> String {
    match v {
        Some(x) if signed => format!("{x:+.1}"),
        Some(x) => format!("{x:.1}"),
        None => "n/a".into(),
    }
}

/// Text table sorted by (model, norm, eps).
pub fn to_table(rows: &[ReportRow]) -> String {
    let mut sorted: Vec<&ReportRow> = rows.iter().collect();
    sorted.sort_by(|a, b| {
        (&a.model, &a.norm)
            .cmp(&(&b.model, &b.norm))
            .then(a.eps.total_cmp(&b.eps))
            .then(a.steps.cmp(&b.steps))
            .then(a.loss.cmp(&b.loss))
    });
    let header = ["Model", "Norm", "eps", "Steps", "Loss", "mAP", "mAP adv", "DRR", "mAP drop", "QCI", "Mode"];
    let cells: Vec<[String; 11]> = sorted
        .iter()
        .map(|r| {
            [
                r.model.clone(),
                r.norm.clone(),
                eps_label(&r.norm, r.eps),
                r.steps.to_string(),
                r.loss.clone(),
                format!("{:.3}", r.map_clean),
                format!("{:.3}", r.map_adv),
                opt(r.drr, false),
                opt(r.map_drop_pct, false),
                opt(r.qci, true),
                r.mode.clone(),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|i| cells.iter().map(|c| c[i].chars().count()).chain([header[i].len()]).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    let line = |out: &mut String, vals: &[&str]| {
        let parts: Vec<String> = vals.iter().zip(&widths).map(|(v, w)| format!("{v:<w$}")).collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&mut out, &header);
    line(&mut out, &widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().iter().map(String::as_str).collect::<Vec<_>>());
    for c in &cells {
        line(&mut out, &c.iter().map(String::as_str).collect::<Vec<_>>());
    }
    out
}

/// Renders the rows of `report`; JSON carries the metadata too.
pub fn emit_report(report: &Report, format: Format) -> Result<String> {
    match format {
        Format::Csv => to_csv(&report.rows),
        Format::Json => Ok(serde_json::to_string_pretty(report)?),
        Format::Table => {
            let m = &report.meta;
            let mut s = format!(
                "# qcprobe {} seed={} config={}\n# nms_iou={} map_conf={} count_conf={} qc_tau={} drr_tau={} suppression_drr={}\n",
                m.version,
                m.seed,
                m.config_hash,
                m.nms_iou,
                m.map_conf,
                m.count_conf,
                m.mode_thresholds.qc_tau,
                m.mode_thresholds.drr_tau,
                m.mode_thresholds.suppression_drr
            );
            s.push_str(&to_table(&report.rows));
            for f in report.failures.iter().chain(&report.flags) {
                let _ = writeln!(s, "# {f}");
            }
            Ok(s)
        }
    }
}

pub fn write_report(report: &Report, path: &Path) -> Result<()> {
    let text = emit_report(report, Format::from_extension(path)?)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json_report(path: &Path) -> Result<Report> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
