use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use qcprobe::attacks::{transfer, AttackConfig, LossKind, Method, Norm};
use qcprobe::defenses::{adversarial_train, catalog, AtConfig, Defense, PurifyMethod};
use qcprobe::detector::{build_detector, load_checkpoint, save_checkpoint, train, DetectorConfig, TrainHyper};
use qcprobe::harness::audit::{audit, AuditThresholds};
use qcprobe::harness::coco::{load_dump, load_samples, CocoDataset};
use qcprobe::harness::report::{emit_report, read_json_report, write_report, Format, Report, ReportMeta, ReportRow};
use qcprobe::harness::shapes::{generate_shapes, ShapesDatasetConfig};
use qcprobe::harness::sweep::{run_cells, run_sweep, write_outputs, SweepConfig};
use qcprobe::qc::ModeThresholds;
use qcprobe::substrate::SubstrateSpec;

#[derive(Parser)]
#[command(name = "qcprobe", version, about = "Quality-corruption probes for toy spiking detectors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic shapes dataset (PNG + COCO JSON)
    GenData(GenDataArgs),
    /// Train a detector and write a checkpoint
    Train(TrainArgs),
    /// Attack a checkpoint on a dataset and report the cell
    Attack(AttackArgs),
    /// Audit external clean/attacked COCO result dumps
    Audit(AuditArgs),
    /// Run a model x attack sweep from a config file
    Sweep(SweepArgs),
    /// Purification grid or adversarial training
    Defend(DefendArgs),
    /// Re-render a JSON report as a table, CSV or JSON
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Substrate {
    Ann,
    Lif,
    Ilif,
    SignedIf,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormArg {
    Linf,
    L2,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    DetSum,
    CwMargin,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Pgd,
    Apgd,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Table,
    Csv,
    Json,
}

/// Reads a TOML file into `T`, or `T::default()` when no path is given.
fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    image_size: Option<u32>,
}

#[derive(Default, Deserialize)]
#[serde(default)]
struct TrainFile {
    detector: Option<DetectorConfig>,
    hyper: Option<TrainHyper>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory with annotations.json
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "model")]
    id: String,
    #[arg(long, value_enum)]
    substrate: Option<Substrate>,
    #[arg(long)]
    timesteps: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Train on the first N images by id
    #[arg(long)]
    subset: Option<usize>,
    /// Held-out dataset for per-epoch validation mAP
    #[arg(long)]
    val: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct AttackFlags {
    /// Attack config file (TOML, fields of AttackConfig)
    #[arg(long)]
    attack_config: Option<PathBuf>,
    #[arg(long, value_enum)]
    norm: Option<NormArg>,
    /// Budget: in 1/255 units for linf, pixel-norm units for l2
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    #[arg(long)]
    fmp_lambda: Option<f64>,
    #[arg(long)]
    attack_seed: Option<u64>,
    #[arg(long)]
    random_start: bool,
}

impl AttackFlags {
    fn build(&self) -> Result<AttackConfig> {
        let mut cfg: AttackConfig = load_config(self.attack_config.as_deref())?;
        if let Some(n) = self.norm {
            cfg.norm = match n {
                NormArg::Linf => Norm::Linf,
                NormArg::L2 => Norm::L2,
            };
        }
        if let Some(e) = self.eps {
            cfg.eps = match cfg.norm {
                Norm::Linf => e / 255.0,
                Norm::L2 => e,
            };
        }
        set(&mut cfg.steps, self.steps);
        if self.step_size.is_some() {
            cfg.step_size = self.step_size;
        }
        if let Some(l) = self.loss {
            cfg.loss = match l {
                LossArg::DetSum => LossKind::DetSum,
                LossArg::CwMargin => LossKind::CwMargin,
            };
        }
        if let Some(m) = self.method {
            cfg.method = match m {
                MethodArg::Pgd => Method::Pgd,
                MethodArg::Apgd => Method::Apgd,
            };
        }
        set(&mut cfg.fmp_lambda, self.fmp_lambda);
        set(&mut cfg.seed, self.attack_seed);
        cfg.random_start |= self.random_start;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Evaluate perturbations crafted on --checkpoint against this model
    #[arg(long)]
    transfer_to: Option<PathBuf>,
    #[arg(long)]
    subset: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    attack: AttackFlags,
}

#[derive(Args)]
struct AuditArgs {
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long)]
    clean: PathBuf,
    #[arg(long)]
    adv: PathBuf,
    /// Write the full audit as JSON here
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    count_conf: Option<f64>,
    #[arg(long)]
    qc_tau: Option<f64>,
    #[arg(long)]
    drr_tau: Option<f64>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    subset: Option<usize>,
}

#[derive(Args)]
struct DefendArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    subset: Option<usize>,
    /// Purification methods (comma-separated names); default is the full catalog
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Run PGD adversarial training on this dataset instead of purification
    #[arg(long)]
    at_train: Option<PathBuf>,
    #[arg(long)]
    at_config: Option<PathBuf>,
    #[arg(long)]
    at_epochs: Option<usize>,
    #[arg(long)]
    at_lr: Option<f64>,
    #[command(flatten)]
    attack: AttackFlags,
}

#[derive(Args)]
struct ReportArgs {
    /// A report.json written by attack, sweep or defend
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "table")]
    format: FormatArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn detector_for(substrate: Substrate, timesteps: usize) -> DetectorConfig {
    match substrate {
        Substrate::Ann => DetectorConfig::ann(),
        Substrate::Lif => DetectorConfig::spiking(SubstrateSpec::deployable_lif(timesteps)),
        Substrate::Ilif => DetectorConfig::spiking(SubstrateSpec::integer_ilif(timesteps)),
        Substrate::SignedIf => DetectorConfig::spiking(SubstrateSpec::ternary_signed_if(timesteps)),
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut cfg: ShapesDatasetConfig = load_config(a.config.as_deref())?;
    set(&mut cfg.n_images, a.n);
    set(&mut cfg.seed, a.seed);
    set(&mut cfg.image_size, a.image_size);
    let ds = generate_shapes(&cfg, &a.out)?;
    println!(
        "wrote {} images, {} annotations to {}",
        ds.images.len(),
        ds.annotations.len(),
        a.out.display()
    );
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let file: TrainFile = load_config(a.config.as_deref())?;
    let mut det = match (a.substrate, file.detector) {
        (Some(s), _) => detector_for(s, a.timesteps.unwrap_or(4)),
        (None, Some(d)) => d,
        (None, None) => DetectorConfig::default(),
    };
    if let (Some(t), false) = (a.timesteps, det.ann_twin) {
        det.substrate.timesteps = t;
    }
    set(&mut det.seed, a.seed);
    let mut hyper = file.hyper.unwrap_or_default();
    set(&mut hyper.epochs, a.epochs);
    set(&mut hyper.lr, a.lr);
    set(&mut hyper.seed, a.seed);
    let data = load_samples(&a.data, a.subset)?;
    let val = a.val.as_deref().map(|p| load_samples(p, None)).transpose()?;
    if val.is_some() && hyper.eval_every == 0 {
        hyper.eval_every = 5;
    }
    let mut model = build_detector(a.id, &det)?;
    let report = train(&mut model, &data, val.as_deref(), &hyper)?;
    for e in &report.epochs {
        match e.val_map {
            Some(m) => println!("epoch {:>3}  loss {:.4}  val mAP@50 {:.3}", e.epoch, e.loss, m),
            None => println!("epoch {:>3}  loss {:.4}", e.epoch, e.loss),
        }
    }
    save_checkpoint(&model, &a.out)?;
    println!("saved {}", a.out.display());
    Ok(())
}

fn attack_cmd(a: AttackArgs) -> Result<()> {
    let cfg = a.attack.build()?;
    let model = load_checkpoint(&a.checkpoint)?;
    let samples = load_samples(&a.data, a.subset)?;
    let meta = ReportMeta::new(cfg.seed, cfg.hash());
    let out = match &a.transfer_to {
        None => run_cells(std::slice::from_ref(&model), std::slice::from_ref(&cfg), &[], &samples, 1, meta)?,
        Some(target_path) => {
            let target = load_checkpoint(target_path)?;
            let t = transfer(&model, &target, &samples, &cfg)?;
            let th = ModeThresholds::default();
            let rows = vec![
                ReportRow::baseline(&target.id, t.cell.map_clean, t.cell.count_clean),
                ReportRow::from_cell(&t.cell, &th),
                ReportRow::from_cell(&t.control, &th),
            ];
            println!("target gradient queries: {}", t.target_queries);
            qcprobe::harness::sweep::SweepOutput {
                report: Report {
                    meta,
                    rows,
                    failures: Vec::new(),
                    flags: Vec::new(),
                },
                per_image: Vec::new(),
                defenses: Vec::new(),
            }
        }
    };
    write_outputs(&out, &a.out)?;
    print!("{}", emit_report(&out.report, Format::Table)?);
    Ok(())
}

fn audit_cmd(a: AuditArgs) -> Result<()> {
    let ann = CocoDataset::load(&a.annotations)?;
    let clean = load_dump(&a.clean)?;
    let adv = load_dump(&a.adv)?;
    let mut th = AuditThresholds::default();
    set(&mut th.count_conf, a.count_conf);
    set(&mut th.modes.qc_tau, a.qc_tau);
    set(&mut th.modes.drr_tau, a.drr_tau);
    let r = audit(&ann, &clean, &adv, &th)?;
    println!(
        "mAP clean {:.4}  adv {:.4}  count clean {}  adv {}",
        r.cell.map_clean, r.cell.map_adv, r.cell.count_clean, r.cell.count_adv
    );
    println!("DRR {:.1}  QCI {:+.1}  label {}", r.mode.drr, r.mode.qci, r.mode.label);
    println!(
        "count monitor: {} alarms over {} windows; mean adversarial per-image precision {}",
        r.alarms,
        r.monitor.len(),
        r.mean_adv_precision.map_or("n/a".into(), |p| format!("{p:.3}"))
    );
    println!(
        "per-image QCI over {} images ({} excluded): median {}",
        r.per_image_summary.n_images,
        r.per_image_summary.n_excluded,
        r.per_image_summary.median.map_or("n/a".into(), |m| format!("{m:+.1}"))
    );
    if let Some(out) = a.out {
        fs::write(&out, serde_json::to_string_pretty(&r)?).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn sweep_cmd(a: SweepArgs) -> Result<()> {
    let text = fs::read_to_string(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let mut cfg: SweepConfig = toml::from_str(&text).with_context(|| format!("parsing {}", a.config.display()))?;
    set(&mut cfg.output_dir, a.out);
    set(&mut cfg.workers, a.workers);
    if a.subset.is_some() {
        cfg.subset = a.subset;
    }
    let out = run_sweep(&cfg)?;
    print!("{}", emit_report(&out.report, Format::Table)?);
    if !out.report.failures.is_empty() {
        bail!("{} sweep cells failed", out.report.failures.len());
    }
    Ok(())
}

fn defend_cmd(a: DefendArgs) -> Result<()> {
    let cfg = a.attack.build()?;
    let mut model = load_checkpoint(&a.checkpoint)?;
    let eval = load_samples(&a.data, a.subset)?;
    fs::create_dir_all(&a.out)?;
    if let Some(train_dir) = &a.at_train {
        let mut at: AtConfig = load_config(a.at_config.as_deref())?;
        at.attack = cfg;
        set(&mut at.epochs, a.at_epochs);
        set(&mut at.lr, a.at_lr);
        let data = load_samples(train_dir, None)?;
        let traj = adversarial_train(&mut model, &data, &eval, &at)?;
        let path = a.out.join("at_trajectory.csv");
        traj.write_csv(&path)?;
        for r in &traj.rows {
            println!(
                "epoch {:>3}  clean {:.3}  pgd {:.3}  DRR {}  QCI {}",
                r.epoch,
                r.map_clean,
                r.map_pgd,
                r.drr.map_or("n/a".into(), |d| format!("{d:.1}")),
                r.qci.map_or("n/a".into(), |q| format!("{q:+.1}"))
            );
        }
        if let Some(why) = traj.aborted {
            bail!("adversarial training aborted: {why}");
        }
        save_checkpoint(&model, &a.out.join("at_model.ckpt"))?;
        return Ok(());
    }
    let methods: Vec<PurifyMethod> = match &a.methods {
        None => catalog(),
        Some(names) => names.iter().map(|n| PurifyMethod::from_name(n)).collect::<qcprobe::Result<_>>()?,
    };
    let defenses: Vec<Defense> = methods.into_iter().map(Defense::Purify).collect();
    let out = run_cells(
        std::slice::from_ref(&model),
        std::slice::from_ref(&cfg),
        &defenses,
        &eval,
        1,
        ReportMeta::new(cfg.seed, cfg.hash()),
    )?;
    let th = ModeThresholds::default();
    let mut report = out.report.clone();
    for d in &out.defenses {
        report.rows.push(ReportRow::from_cell(&d.defended, &th));
        println!("{:<14} {}", d.defense, d.verdict);
    }
    write_report(&report, &a.out.join("report.json"))?;
    write_report(&report, &a.out.join("report.csv"))?;
    write_report(&report, &a.out.join("report.txt"))?;
    fs::write(a.out.join("defenses.json"), serde_json::to_string_pretty(&out.defenses)?)?;
    print!("{}", emit_report(&report, Format::Table)?);
    Ok(())
}

fn report_cmd(a: ReportArgs) -> Result<()> {
    let report = read_json_report(&a.input)?;
    let format = match a.format {
        FormatArg::Table => Format::Table,
        FormatArg::Csv => Format::Csv,
        FormatArg::Json => Format::Json,
    };
    let text = emit_report(&report, format)?;
    match a.out {
        Some(p) => fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Attack(a) => attack_cmd(a),
        Command::Audit(a) => audit_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Defend(a) => defend_cmd(a),
        Command::Report(a) => report_cmd(a),
    }
}
