//! Command implementations behind the `mtl` binary.

pub mod manifest;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use mtl_core::checkpoint::ModelBundle;
use mtl_core::config::RunConfig;
use mtl_core::episodes::{generate_synthetic, Dataset, MetaSplit, SyntheticGeometry};
use mtl_core::io::{file_hash, write_atomic};
use mtl_core::meta::{meta_test, sample_tasks, train, MetaTestSummary, TrainOutcome};
use mtl_core::models::{FeatureExtractor, VariantSpec};
use mtl_core::pretrain::{pretrain, PretrainedModel};
use mtl_core::Rng;

pub use manifest::{FileRecord, RunManifest};

const CONFIG_HELP: &str = "Configuration precedence, lowest to highest: the profile's \
built-in values (quickstart unless the file says `profile = paper`), then `key = value` \
lines of --config, then --set KEY=VALUE flags in the order given, then dedicated flags \
such as --ht. Unknown keys are errors. MTL_THREADS caps the worker threads.";

#[derive(Parser, Debug)]
#[command(name = "mtl", version, about = "Meta-transfer learning for few-shot classification", after_help = CONFIG_HELP)]
pub struct Cli {
    /// Log level (error|warn|info|debug|trace); RUST_LOG takes precedence.
    #[arg(long, global = true, default_value = "info")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Generate a synthetic few-shot dataset.
    GenData(GenDataArgs),
    /// Pre-train and freeze the feature extractor.
    Pretrain(PretrainArgs),
    /// Meta-train one variant from a pre-trained extractor.
    MetaTrain(MetaTrainArgs),
    /// Evaluate a meta-trained checkpoint on unseen tasks.
    MetaTest(MetaTestArgs),
    /// Meta-train and meta-test a list of variants under one seed.
    Bench(BenchArgs),
    /// Meta-validation curves for a list of variants.
    EvalConvergence(EvalConvergenceArgs),
    /// Re-run a command from its manifest and compare the outputs.
    Replay(ReplayArgs),
}

#[derive(Args, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub classes: usize,
    #[arg(long, default_value_t = 60)]
    pub per_class: usize,
    #[arg(long, default_value_t = 3)]
    pub channels: usize,
    #[arg(long, default_value_t = 16)]
    pub height: usize,
    #[arg(long, default_value_t = 16)]
    pub width: usize,
    #[arg(long, default_value_t = 0.15)]
    pub noise: f64,
    #[arg(long, default_value_t = 2)]
    pub jitter: usize,
    #[arg(long, default_value_t = 0.3)]
    pub contrast: f64,
    #[arg(long, default_value_t = 3)]
    pub blobs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Checkpoint path; metrics go to `<out>.metrics.csv`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Switch {
    On,
    Off,
}

impl Switch {
    pub fn is_on(self) -> bool {
        self == Switch::On
    }

    fn label(on: bool) -> &'static str {
        if on {
            "on"
        } else {
            "off"
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HtSet {
    On,
    Off,
    Both,
}

impl HtSet {
    fn values(self) -> Vec<bool> {
        match self {
            HtSet::On => vec![true],
            HtSet::Off => vec![false],
            HtSet::Both => vec![false, true],
        }
    }
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaTrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub pretrained: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_parser = parse_variant)]
    pub variant: VariantSpec,
    /// Hard-task meta-batches; overrides `ht.enabled`.
    #[arg(long, value_enum)]
    pub ht: Option<Switch>,
    /// Best-validation checkpoint. Side outputs: `<out>.metrics.csv`,
    /// `<out>.val.csv`, `<out>.log`, `<out>.last`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaTestArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset; defaults to the one recorded in the checkpoint's manifest.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Defaults to the checkpoint manifest's resolved config when present.
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Number of unseen tasks; defaults to `test.tasks`.
    #[arg(long)]
    pub tasks: Option<usize>,
    /// Per-task accuracy CSV; defaults to `<ckpt>.test.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub pretrained: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_delimiter = ',', default_value = "update_head,ft_full,ss_full", value_parser = parse_variant)]
    pub variants: Vec<VariantSpec>,
    #[arg(long, value_enum, default_value_t = HtSet::Both)]
    pub ht: HtSet,
    /// CSV output; the aligned table goes to `<out>.txt` and stdout.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConvergenceArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub pretrained: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_delimiter = ',', default_value = "ft_full,ss_full", value_parser = parse_variant)]
    pub variants: Vec<VariantSpec>,
    #[arg(long, value_enum, default_value_t = HtSet::Both)]
    pub ht: HtSet,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory receiving the replayed outputs.
    #[arg(long)]
    pub out_dir: PathBuf,
}

fn parse_variant(s: &str) -> std::result::Result<VariantSpec, String> {
    s.parse().map_err(|e: mtl_core::Error| e.to_string())
}

/// Worker threads: `MTL_THREADS` if set, else the available cores.
pub fn threads() -> Result<usize> {
    match std::env::var("MTL_THREADS") {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .map_err(|_| anyhow!("MTL_THREADS must be a positive integer, got `{v}`"))?;
            if n == 0 {
                bail!("MTL_THREADS must be at least 1");
            }
            Ok(n)
        }
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Resolve the effective config: file (or `fallback` text when there is no
/// file), then `--set` overrides.
pub fn resolve_config(args: &ConfigArgs, fallback: Option<&str>) -> Result<RunConfig> {
    let text = match (&args.config, fallback) {
        (Some(p), _) => std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?,
        (None, Some(t)) => t.to_string(),
        (None, None) => String::new(),
    };
    let mut cfg = RunConfig::parse(&text).context("invalid config")?;
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got `{kv}`"))?;
        cfg.set(k.trim(), v.trim()).with_context(|| format!("--set {kv}"))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Append `suffix` to the full file name of `path`.
pub fn side_path(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn manifest_path(primary_out: &Path) -> PathBuf {
    side_path(primary_out, ".manifest.json")
}

fn csv_bytes<T: Serialize>(rows: &[T], header_if_empty: &[&str]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(header_if_empty)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| anyhow!("csv buffer: {e}"))
}

/// Collects output files and their hashes for the manifest.
struct Outputs {
    files: BTreeMap<String, FileRecord>,
}

impl Outputs {
    fn new() -> Self {
        Outputs { files: BTreeMap::new() }
    }

    fn write(&mut self, name: &str, path: &Path, bytes: &[u8]) -> Result<()> {
        write_atomic(path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.record(name, path)
    }

    fn record(&mut self, name: &str, path: &Path) -> Result<()> {
        self.files.insert(name.to_string(), FileRecord::of(path)?);
        Ok(())
    }
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_extractor(path: &Path) -> Result<FeatureExtractor> {
    if !path.exists() {
        bail!("pretrained checkpoint {} does not exist", path.display());
    }
    Ok(PretrainedModel::load(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?
        .extractor)
}

fn input_record(inputs: &mut BTreeMap<String, FileRecord>, name: &str, path: &Path) -> Result<()> {
    inputs.insert(name.to_string(), FileRecord::of(path)?);
    Ok(())
}

/// Run a command, writing its outputs and manifest. Returns the manifest.
pub fn run(command: &Command) -> Result<RunManifest> {
    let cfg = match command {
        Command::GenData(_) => None,
        Command::Pretrain(a) => Some(resolve_config(&a.config, None)?),
        Command::MetaTrain(a) => Some(resolve_config(&a.config, None)?),
        Command::MetaTest(a) => {
            let fallback = if a.config.config.is_none() {
                RunManifest::read(&manifest_path(&a.ckpt)).ok().map(|m| m.config_text())
            } else {
                None
            };
            Some(resolve_config(&a.config, fallback.as_deref())?)
        }
        Command::Bench(a) => Some(resolve_config(&a.config, None)?),
        Command::EvalConvergence(a) => Some(resolve_config(&a.config, None)?),
        Command::Replay(a) => {
            let report = replay(a)?;
            print!("{}", report.text());
            if !report.all_match() {
                bail!("replay outputs differ from the manifest");
            }
            return Ok(report.manifest);
        }
    };
    run_resolved(command, cfg)
}

/// Run with an already-resolved config (the replay path).
pub fn run_resolved(command: &Command, cfg: Option<RunConfig>) -> Result<RunManifest> {
    let started = Instant::now();
    let threads = threads()?;
    let mut m = RunManifest::new(command.clone(), cfg.as_ref(), threads);
    let mut outputs = Outputs::new();
    let primary: PathBuf = match command {
        Command::GenData(a) => {
            gen_data(a, &mut m, &mut outputs)?;
            a.out.clone()
        }
        Command::Pretrain(a) => {
            cmd_pretrain(a, cfg.as_ref().unwrap(), &mut m, &mut outputs)?;
            a.out.clone()
        }
        Command::MetaTrain(a) => {
            let mut cfg = cfg.unwrap();
            if let Some(ht) = a.ht {
                cfg.train.curriculum.enabled = ht.is_on();
                m.set_config(&cfg);
            }
            cmd_meta_train(a, &cfg, threads, &mut m, &mut outputs)?;
            a.out.clone()
        }
        Command::MetaTest(a) => {
            cmd_meta_test(a, cfg.as_ref().unwrap(), threads, &mut m, &mut outputs)?;
            meta_test_out(a)
        }
        Command::Bench(a) => {
            cmd_bench(a, cfg.as_ref().unwrap(), threads, &mut m, &mut outputs)?;
            a.out.clone()
        }
        Command::EvalConvergence(a) => {
            cmd_eval_convergence(a, cfg.as_ref().unwrap(), threads, &mut m, &mut outputs)?;
            a.out.clone()
        }
        Command::Replay(_) => bail!("replay cannot be nested"),
    };
    m.outputs = outputs.files;
    m.wall_clock_s.insert("total".into(), started.elapsed().as_secs_f64());
    m.write(&manifest_path(&primary))?;
    Ok(m)
}

fn gen_data(a: &GenDataArgs, m: &mut RunManifest, out: &mut Outputs) -> Result<()> {
    let t = Instant::now();
    let geometry = SyntheticGeometry {
        noise: a.noise,
        jitter: a.jitter,
        contrast: a.contrast,
        blobs: a.blobs,
    };
    let ds = generate_synthetic(
        a.classes,
        a.per_class,
        (a.channels, a.height, a.width),
        &geometry,
        &mut Rng::new(a.seed),
    )?;
    ds.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    out.record("dataset", &a.out)?;
    out.record("splits", &Dataset::splits_path(&a.out))?;
    m.wall_clock_s.insert("generate".into(), t.elapsed().as_secs_f64());
    m.summary.insert("samples".into(), ds.len() as f64);
    m.summary.insert("classes".into(), ds.num_classes() as f64);
    for split in [MetaSplit::Train, MetaSplit::Val, MetaSplit::Test] {
        m.summary
            .insert(format!("{split}_classes"), ds.classes(split).len() as f64);
    }
    log::info!(
        "wrote {} samples of {} classes to {}",
        ds.len(),
        ds.num_classes(),
        a.out.display()
    );
    Ok(())
}

fn cmd_pretrain(a: &PretrainArgs, cfg: &RunConfig, m: &mut RunManifest, out: &mut Outputs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    input_record(&mut m.inputs, "data", &a.data)?;
    let t = Instant::now();
    let model = pretrain(&ds, &cfg.pretrain, &mut Rng::new(a.seed))?;
    m.wall_clock_s.insert("pretrain".into(), t.elapsed().as_secs_f64());
    model.save(&a.out)?;
    out.record("checkpoint", &a.out)?;
    let metrics = side_path(&a.out, ".metrics.csv");
    out.write("metrics", &metrics, &csv_bytes(&model.curve, &["iteration", "lr", "loss", "acc"])?)?;
    if let Some(last) = model.curve.last() {
        m.summary.insert("final_loss".into(), last.loss);
        m.summary.insert("final_acc".into(), last.acc);
        log::info!("pretrain done: loss {:.4} acc {:.3}", last.loss, last.acc);
    }
    Ok(())
}

#[derive(Serialize)]
struct MetricCsvRow {
    iteration: u64,
    phase: String,
    task_idx: usize,
    test_loss: f64,
    mean_acc: f64,
    hardest_class: u32,
}

fn metric_rows(o: &TrainOutcome) -> Vec<MetricCsvRow> {
    o.rows
        .iter()
        .map(|r| MetricCsvRow {
            iteration: r.iteration,
            phase: r.phase.to_string(),
            task_idx: r.task_idx,
            test_loss: r.test_loss,
            mean_acc: r.mean_acc,
            hardest_class: r.hardest_class,
        })
        .collect()
}

fn cmd_meta_train(a: &MetaTrainArgs, cfg: &RunConfig, threads: usize, m: &mut RunManifest, out: &mut Outputs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    input_record(&mut m.inputs, "data", &a.data)?;
    let extractor = load_extractor(&a.pretrained)?;
    input_record(&mut m.inputs, "pretrained", &a.pretrained)?;
    let mut tcfg = cfg.train.clone();
    tcfg.threads = threads;
    let t = Instant::now();
    let o = train(&ds, &extractor, a.variant, &tcfg, &Rng::new(a.seed))?;
    m.wall_clock_s.insert("meta_train".into(), t.elapsed().as_secs_f64());

    o.best.save(&a.out)?;
    out.record("checkpoint", &a.out)?;
    let last = side_path(&a.out, ".last");
    o.last.save(&last)?;
    out.record("last_checkpoint", &last)?;
    out.write(
        "metrics",
        &side_path(&a.out, ".metrics.csv"),
        &csv_bytes(
            &metric_rows(&o),
            &["iteration", "phase", "task_idx", "test_loss", "mean_acc", "hardest_class"],
        )?,
    )?;
    out.write(
        "validation",
        &side_path(&a.out, ".val.csv"),
        &csv_bytes(&o.val_curve, &["iteration", "val_acc", "ci95"])?,
    )?;
    let mut log_text = o.log.join("\n");
    log_text.push('\n');
    out.write("run_log", &side_path(&a.out, ".log"), log_text.as_bytes())?;

    m.summary.insert("hard_phases".into(), o.hard_phases.len() as f64);
    if let Some(i) = o.best_index {
        m.summary.insert("best_val_acc".into(), o.val_curve[i].val_acc);
        m.summary.insert("best_val_iteration".into(), o.val_curve[i].iteration as f64);
    }
    if let Some(p) = o.val_curve.last() {
        m.summary.insert("final_val_acc".into(), p.val_acc);
    }
    log::info!("meta-train {} done", a.variant);
    Ok(())
}

fn meta_test_out(a: &MetaTestArgs) -> PathBuf {
    a.out.clone().unwrap_or_else(|| side_path(&a.ckpt, ".test.csv"))
}

#[derive(Serialize)]
struct TaskAccRow {
    task_idx: usize,
    acc: f64,
}

/// Meta-test accuracy of a bundle on `tasks` episodes of the test split, as
/// `meta-test` and `bench` report it.
pub fn test_summary(ds: &Dataset, bundle: &ModelBundle, variant: VariantSpec, cfg: &RunConfig, tasks: usize, seed: u64, threads: usize) -> Result<MetaTestSummary> {
    let root = Rng::new(seed);
    let mut mcfg = cfg.train.meta.clone();
    if let Some(tag) = &bundle.tag {
        mcfg.bn_mode = tag.bn;
    }
    let eps = sample_tasks(ds, MetaSplit::Test, mcfg.shape(), tasks, &mut root.split_named("test"))?;
    Ok(meta_test(ds, &eps, bundle, variant, &mcfg, &root.split_named("test-heads"), threads)?)
}

fn cmd_meta_test(a: &MetaTestArgs, cfg: &RunConfig, threads: usize, m: &mut RunManifest, out: &mut Outputs) -> Result<()> {
    let data = match &a.data {
        Some(d) => d.clone(),
        None => RunManifest::read(&manifest_path(&a.ckpt))
            .ok()
            .and_then(|mm| mm.inputs.get("data").map(|r| r.path.clone()))
            .ok_or_else(|| anyhow!("--data not given and the checkpoint has no manifest naming one"))?,
    };
    let ds = load_dataset(&data)?;
    input_record(&mut m.inputs, "data", &data)?;
    if !a.ckpt.exists() {
        bail!("checkpoint {} does not exist", a.ckpt.display());
    }
    let bundle = ModelBundle::load(&a.ckpt).with_context(|| format!("loading checkpoint {}", a.ckpt.display()))?;
    input_record(&mut m.inputs, "checkpoint", &a.ckpt)?;
    let variant = bundle
        .tag
        .as_ref()
        .map(|t| t.variant)
        .ok_or_else(|| anyhow!("{} is not a meta-trained checkpoint (no variant tag)", a.ckpt.display()))?;
    let tasks = a.tasks.unwrap_or(cfg.test_tasks);
    let t = Instant::now();
    let s = test_summary(&ds, &bundle, variant, cfg, tasks, a.seed, threads)?;
    m.wall_clock_s.insert("meta_test".into(), t.elapsed().as_secs_f64());
    m.summary.insert("mean_acc".into(), s.mean_acc);
    m.summary.insert("ci95".into(), s.ci95);
    m.summary.insert("tasks".into(), tasks as f64);
    println!(
        "{variant}: {:.2}% ± {:.2}% over {tasks} tasks",
        100.0 * s.mean_acc,
        100.0 * s.ci95
    );
    let rows: Vec<TaskAccRow> = s
        .task_acc
        .iter()
        .enumerate()
        .map(|(task_idx, &acc)| TaskAccRow { task_idx, acc })
        .collect();
    out.write("task_accuracy", &meta_test_out(a), &csv_bytes(&rows, &["task_idx", "acc"])?)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub variant: String,
    pub ht: String,
    #[serde(rename = "1shot_acc")]
    pub acc: f64,
    pub ci: f64,
}

/// Rows for `(variant, ht)` pairs. Baselines have no meta-training, so they
/// get a single `ht = off` row.
pub fn bench_rows(
    ds: &Dataset,
    extractor: &FeatureExtractor,
    variants: &[VariantSpec],
    ht: HtSet,
    cfg: &RunConfig,
    seed: u64,
    threads: usize,
) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &v in variants {
        let hts = if v.is_baseline() { vec![false] } else { ht.values() };
        for on in hts {
            let mut tcfg = cfg.train.clone();
            tcfg.curriculum.enabled = on;
            tcfg.threads = threads;
            let o = train(ds, extractor, v, &tcfg, &Rng::new(seed))?;
            let s = test_summary(ds, &o.best, v, cfg, cfg.test_tasks, seed, threads)?;
            log::info!("{v} ht={}: {:.4} ± {:.4}", Switch::label(on), s.mean_acc, s.ci95);
            rows.push(BenchRow {
                variant: v.to_string(),
                ht: Switch::label(on).into(),
                acc: s.mean_acc,
                ci: s.ci95,
            });
        }
    }
    Ok(rows)
}

pub fn bench_table(rows: &[BenchRow], shot: usize) -> String {
    let mut s = format!("{:<12} {:<4} {:>10} {:>8}\n", "variant", "ht", format!("{shot}-shot %"), "± ci");
    for r in rows {
        s += &format!("{:<12} {:<4} {:>10.2} {:>8.2}\n", r.variant, r.ht, 100.0 * r.acc, 100.0 * r.ci);
    }
    s
}

fn cmd_bench(a: &BenchArgs, cfg: &RunConfig, threads: usize, m: &mut RunManifest, out: &mut Outputs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    input_record(&mut m.inputs, "data", &a.data)?;
    let extractor = load_extractor(&a.pretrained)?;
    input_record(&mut m.inputs, "pretrained", &a.pretrained)?;
    let t = Instant::now();
    let rows = bench_rows(&ds, &extractor, &a.variants, a.ht, cfg, a.seed, threads)?;
    m.wall_clock_s.insert("bench".into(), t.elapsed().as_secs_f64());
    out.write("bench", &a.out, &csv_bytes(&rows, &["variant", "ht", "1shot_acc", "ci"])?)?;
    let table = bench_table(&rows, cfg.train.meta.shot);
    out.write("table", &side_path(&a.out, ".txt"), table.as_bytes())?;
    print!("{table}");
    for r in &rows {
        m.summary.insert(format!("{}_ht_{}", r.variant, r.ht), r.acc);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    /// Normal meta-batches completed at the checkpoint.
    pub iteration: u64,
    pub variant: String,
    pub ht: String,
    pub val_acc: f64,
}

pub fn convergence_rows(
    ds: &Dataset,
    extractor: &FeatureExtractor,
    variants: &[VariantSpec],
    ht: HtSet,
    cfg: &RunConfig,
    seed: u64,
    threads: usize,
) -> Result<Vec<ConvergenceRow>> {
    let mut rows = Vec::new();
    for &v in variants {
        if v.is_baseline() {
            bail!("{v} has no meta-training, so no validation curve");
        }
        for on in ht.values() {
            let mut tcfg = cfg.train.clone();
            tcfg.curriculum.enabled = on;
            tcfg.threads = threads;
            let o = train(ds, extractor, v, &tcfg, &Rng::new(seed))?;
            rows.extend(o.val_curve.iter().map(|p| ConvergenceRow {
                iteration: p.iteration,
                variant: v.to_string(),
                ht: Switch::label(on).into(),
                val_acc: p.val_acc,
            }));
        }
    }
    Ok(rows)
}

fn cmd_eval_convergence(a: &EvalConvergenceArgs, cfg: &RunConfig, threads: usize, m: &mut RunManifest, out: &mut Outputs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    input_record(&mut m.inputs, "data", &a.data)?;
    let extractor = load_extractor(&a.pretrained)?;
    input_record(&mut m.inputs, "pretrained", &a.pretrained)?;
    let t = Instant::now();
    let rows = convergence_rows(&ds, &extractor, &a.variants, a.ht, cfg, a.seed, threads)?;
    m.wall_clock_s.insert("eval_convergence".into(), t.elapsed().as_secs_f64());
    out.write(
        "convergence",
        &a.out,
        &csv_bytes(&rows, &["iteration", "variant", "ht", "val_acc"])?,
    )?;
    Ok(())
}

/// Per-output comparison of a replay against its manifest.
#[derive(Clone, Debug)]
pub struct ReplayReport {
    pub manifest: RunManifest,
    /// (output name, recorded hash, replayed hash)
    pub outputs: Vec<(String, String, String)>,
}

impl ReplayReport {
    pub fn all_match(&self) -> bool {
        self.outputs.iter().all(|(_, a, b)| a == b)
    }

    pub fn text(&self) -> String {
        self.outputs
            .iter()
            .map(|(n, a, b)| format!("{n}: {}\n", if a == b { "identical" } else { "DIFFERS" }))
            .collect()
    }
}

/// Move every output of `cmd` into `dir`, keeping file names.
pub fn redirect_outputs(cmd: &Command, dir: &Path) -> Result<Command> {
    let mv = |p: &Path| -> Result<PathBuf> {
        Ok(dir.join(p.file_name().ok_or_else(|| anyhow!("output path {} has no file name", p.display()))?))
    };
    let mut c = cmd.clone();
    match &mut c {
        Command::GenData(a) => a.out = mv(&a.out)?,
        Command::Pretrain(a) => a.out = mv(&a.out)?,
        Command::MetaTrain(a) => a.out = mv(&a.out)?,
        Command::MetaTest(a) => a.out = Some(mv(&meta_test_out(a))?),
        Command::Bench(a) => a.out = mv(&a.out)?,
        Command::EvalConvergence(a) => a.out = mv(&a.out)?,
        Command::Replay(_) => bail!("replay cannot be nested"),
    }
    Ok(c)
}

/// Re-run the recorded command with its recorded config and inputs, writing
/// into `out_dir`, and compare output hashes.
pub fn replay(a: &ReplayArgs) -> Result<ReplayReport> {
    let recorded = RunManifest::read(&a.manifest)?;
    for (name, rec) in &recorded.inputs {
        let now = file_hash(&rec.path).with_context(|| format!("input `{name}` at {}", rec.path.display()))?;
        if now != rec.hash {
            bail!("input `{name}` ({}) changed since the run", rec.path.display());
        }
    }
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let cmd = redirect_outputs(&recorded.command, &a.out_dir)?;
    let cfg = match &recorded.command {
        Command::GenData(_) => None,
        _ => Some(RunConfig::parse(&recorded.config_text())?),
    };
    let replayed = run_resolved(&cmd, cfg)?;
    let outputs = recorded
        .outputs
        .iter()
        .map(|(n, r)| {
            let h = replayed.outputs.get(n).map_or_else(String::new, |x| x.hash.clone());
            (n.clone(), r.hash.clone(), h)
        })
        .collect();
    Ok(ReplayReport {
        manifest: replayed,
        outputs,
    })
}
