//! Model x attack (x defense) sweeps on a worker pool.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::coco::load_samples;
use super::report::{flags_for, write_report, Report, ReportMeta, ReportRow};
use crate::attacks::{assert_constant_config, attack_cell, AttackConfig};
use crate::defenses::{defended_row, Defense, DefenseEval};
use crate::detector::{build_detector, evaluate, load_checkpoint, train, DetectorConfig, EvalPass, Sample, SpikingModel, TrainHyper};
use crate::error::{Error, Result};
use crate::qc::{histogram, per_image_qci_checked, summarize_per_image, ModeThresholds, PerImageSummary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum ModelSpec {
    Checkpoint { path: PathBuf },
    Train { id: String, config: Box<DetectorConfig>, hyper: TrainHyper },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub models: Vec<ModelSpec>,
    pub attacks: Vec<AttackConfig>,
    #[serde(default)]
    pub defenses: Vec<Defense>,
    /// Evaluation dataset directory.
    pub dataset: PathBuf,
    /// Training dataset directory, needed by `ModelSpec::Train`.
    #[serde(default)]
    pub train_dataset: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Keep only the first N images by id.
    #[serde(default)]
    pub subset: Option<usize>,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_workers() -> usize {
    1
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() || self.attacks.is_empty() {
            return Err(Error::InvalidConfig("a sweep needs at least one model and one attack".into()));
        }
        self.attacks.iter().try_for_each(AttackConfig::validate)
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

/// Per-image QCI values of one cell, laid out for a histogram plot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerImageRecord {
    pub model: String,
    pub attack: String,
    pub values: Vec<(u64, f64)>,
    pub excluded: Vec<u64>,
    pub summary: PerImageSummary,
    pub histogram: Vec<(f64, f64, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepOutput {
    pub report: Report,
    pub per_image: Vec<PerImageRecord>,
    pub defenses: Vec<DefenseEval>,
}

struct CellOutput {
    row: ReportRow,
    per_image: PerImageRecord,
    defenses: Vec<DefenseEval>,
}

pub fn per_image_record(model: &str, attack: &str, samples: &[Sample], clean: &EvalPass, adv: &EvalPass) -> PerImageRecord {
    let (cv, av) = (clean.count_views(), adv.count_views());
    let mut values = Vec::new();
    let mut excluded = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        match per_image_qci_checked(&cv[i], &av[i], &s.gts) {
            Ok(q) => values.push((s.image_id, q)),
            Err(_) => excluded.push(s.image_id),
        }
    }
    let raw: Vec<f64> = values.iter().map(|v| v.1).collect();
    let (lo, hi) = raw.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    PerImageRecord {
        model: model.to_string(),
        attack: attack.to_string(),
        summary: summarize_per_image(&raw, excluded.len()),
        histogram: if raw.is_empty() { Vec::new() } else { histogram(&raw, lo, hi, 20) },
        values,
        excluded,
    }
}

fn run_cell(
    model: &SpikingModel,
    cfg: &AttackConfig,
    defenses: &[Defense],
    samples: &[Sample],
    clean: &EvalPass,
) -> Result<CellOutput> {
    let run = attack_cell(model, samples, cfg, clean)?;
    let defenses = defenses
        .iter()
        .map(|d| defended_row(model, d, samples, clean, &run.cell, &run.perturbations))
        .collect::<Result<_>>()?;
    Ok(CellOutput {
        row: ReportRow::from_cell(&run.cell, &ModeThresholds::default()),
        per_image: per_image_record(&model.id, &cfg.describe(), samples, clean, &run.adv),
        defenses,
    })
}

/// Runs every model against every attack. A failing cell is recorded in
/// `report.failures` and the sweep continues.
pub fn run_cells(
    models: &[SpikingModel],
    attacks: &[AttackConfig],
    defenses: &[Defense],
    samples: &[Sample],
    workers: usize,
    meta: ReportMeta,
) -> Result<SweepOutput> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    pool.install(|| {
        let cleans: Vec<EvalPass> = models
            .iter()
            .map(|m| evaluate(m, samples, None))
            .collect::<Result<_>>()?;
        let mut rows: Vec<ReportRow> = models
            .iter()
            .zip(&cleans)
            .map(|(m, c)| ReportRow::baseline(&m.id, c.map, c.count))
            .collect();
        for cfg in attacks {
            let h = cfg.hash();
            assert_constant_config(models.iter().map(|m| (m.id.as_str(), h.as_str())))?;
        }
        let jobs: Vec<(usize, usize)> = (0..attacks.len()).flat_map(|a| (0..models.len()).map(move |m| (m, a))).collect();
        let results: Vec<Result<CellOutput>> = jobs
            .par_iter()
            .map(|&(m, a)| run_cell(&models[m], &attacks[a], defenses, samples, &cleans[m]))
            .collect();
        let mut out = SweepOutput {
            report: Report {
                meta,
                rows: Vec::new(),
                failures: Vec::new(),
                flags: Vec::new(),
            },
            per_image: Vec::new(),
            defenses: Vec::new(),
        };
        for (&(m, a), r) in jobs.iter().zip(results) {
            match r {
                Ok(c) => {
                    rows.push(c.row);
                    out.per_image.push(c.per_image);
                    out.defenses.extend(c.defenses);
                }
                Err(e) => {
                    log::error!("cell {} / {} failed: {e}", models[m].id, attacks[a].describe());
                    out.report.failures.push(format!("{} {}: {e}", models[m].id, attacks[a].describe()));
                }
            }
        }
        out.report.flags = flags_for(&rows);
        out.report.rows = rows;
        Ok(out)
    })
}

fn obtain_model(spec: &ModelSpec, train_dir: Option<&Path>, subset: Option<usize>) -> Result<SpikingModel> {
    match spec {
        ModelSpec::Checkpoint { path } => load_checkpoint(path),
        ModelSpec::Train { id, config, hyper } => {
            let dir = train_dir.ok_or_else(|| Error::InvalidConfig("training requested but no train_dataset".into()))?;
            let data = load_samples(dir, subset)?;
            let mut model = build_detector(id.clone(), config)?;
            train(&mut model, &data, None, hyper)?;
            Ok(model)
        }
    }
}

/// Loads data and models, runs the sweep and writes `report.{csv,json,txt}`,
/// `per_image_qci.json` and, with defenses, `defenses.json`.
pub fn run_sweep(cfg: &SweepConfig) -> Result<SweepOutput> {
    cfg.validate()?;
    let samples = load_samples(&cfg.dataset, cfg.subset)?;
    let models = cfg
        .models
        .iter()
        .map(|m| obtain_model(m, cfg.train_dataset.as_deref(), None))
        .collect::<Result<Vec<_>>>()?;
    let out = run_cells(&models, &cfg.attacks, &cfg.defenses, &samples, cfg.workers, ReportMeta::new(cfg.seed, cfg.hash()))?;
    write_outputs(&out, &cfg.output_dir)?;
    Ok(out)
}

pub fn write_outputs(out: &SweepOutput, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for name in ["report.csv", "report.json", "report.txt"] {
        write_report(&out.report, &dir.join(name))?;
    }
    let p = dir.join("per_image_qci.json");
    fs::write(&p, serde_json::to_string_pretty(&out.per_image)?).map_err(|e| Error::io(&p, e))?;
    if !out.defenses.is_empty() {
        let p = dir.join("defenses.json");
        fs::write(&p, serde_json::to_string_pretty(&out.defenses)?).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}
