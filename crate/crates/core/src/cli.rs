//! Command-line front end: `gen`, `extract`, `train-v`, `train-va`, `eval`,
//! `localize` and `cost`.
//!
//! Exit codes: 0 success, 2 usage, 3 invalid input, 4 failure while running.
//! Settings resolve as command-line flag, then `--config` file, then the
//! built-in defaults.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::cost::{compare, model_cost, published, CostReport};
use crate::error::{Error, Result};
use crate::eval::{self, Classifier, EvalReport, ImageVerdict};
use crate::localize::{self, bounding_box, render_overlay};
use crate::model::{self, build_mmv, build_mmva, ModelConfig, Variant, DONOR_LAYER};
use crate::nn::{load_weights, param_name, save_weights};
use crate::patch::{self, build_corpus, DatasetManifest, PatchCorpus, Role, SplitConfig};
use crate::report::{self, EvalRow, Header};
use crate::synth::{self, DonorShape, Regime, SynthConfig};
use crate::train::{run_trial, select_donor, HyperParams, TrainingData, TrialSummary};

pub const THREADS_ENV: &str = "MISSMARPLE_THREADS";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INVALID: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

pub const WEIGHTS_FILE: &str = "weights.mmwt";
pub const MODEL_FILE: &str = "model.toml";
pub const DONOR_FILE: &str = "donor.mmwt";
pub const SELECTION_FILE: &str = "selection.txt";
pub const TRAIN_REPORT: &str = "train_report.txt";
pub const TRAIN_LOG: &str = "train_log.txt";
pub const GEN_REPORT: &str = "gen_report.txt";
pub const EXTRACT_REPORT: &str = "extract_report.txt";

#[derive(Parser, Debug)]
#[command(name = "missmarple", version, about = "Twin CNN toolkit for image-splicing detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic splice dataset with masks and a manifest.
    Gen(GenArgs),
    /// Cut a balanced patch corpus from a manifest.
    Extract(ExtractArgs),
    /// Train the village model (MM-V) and export its donor layer.
    TrainV(TrainArgs),
    /// Train the transfer model (MM-V-A) around a frozen donor layer.
    TrainVa(TrainVaArgs),
    /// Classify held-out images and report the metric suite.
    Eval(EvalArgs),
    /// Outline the fake-scored region of images with a bounding box.
    Localize(LocalizeArgs),
    /// Count convolution multiplications.
    Cost(CostArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    regime: Option<Regime>,
    /// Images per role.
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    size: Option<u32>,
    #[arg(long)]
    shape: Option<DonorShape>,
    #[arg(long)]
    seed: Option<u64>,
    /// TOML file with any `SynthConfig` fields.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExtractArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output corpus directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Overrides the manifest's fake-overlap fraction.
    #[arg(long)]
    overlap: Option<f64>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    #[arg(long, default_value_t = 0.7)]
    train_fraction: f64,
}

/// `[model]` and `[train]` tables of a run configuration file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: HyperParams,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", file_label(path))))
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Corpus directory written by `extract`.
    #[arg(long)]
    corpus: PathBuf,
    /// Output directory for weights and reports.
    #[arg(long)]
    out: PathBuf,
    /// Iteration i trains with seed `seed + i`.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    iterations: usize,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// TOML file with optional `[model]` and `[train]` tables.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainVaArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Donor weights written by `train-v`.
    #[arg(long)]
    donor: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Model directory written by `train-v` or `train-va`; repeatable.
    #[arg(long = "model", required = true)]
    models: Vec<PathBuf>,
    /// Fixed image threshold; searched on development images when absent.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, default_value_t = 0.01)]
    grid_step: f64,
    #[arg(long, default_value_t = eval::DEFAULT_STRIDE)]
    stride: usize,
    /// Report path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct LocalizeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "image", required = true)]
    images: Vec<PathBuf>,
    /// Where annotated copies go; beside each input when absent.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    threshold: f64,
    #[arg(long, default_value_t = localize::DEFAULT_CUTOFF)]
    cutoff: f64,
    #[arg(long, default_value_t = eval::DEFAULT_STRIDE)]
    stride: usize,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Preset {
    /// Published totals and the two reference comparisons.
    Table3,
    /// Per-layer counts of the default MM-V and MM-V-A.
    Default,
}

#[derive(Args, Debug)]
struct CostArgs {
    #[arg(long, conflicts_with = "config")]
    preset: Option<Preset>,
    /// Run configuration whose `[model]` table is costed.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Runs the tool with `argv` (program name first), writing to the process's
/// stdout and stderr.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(argv, &mut stdout.lock(), &mut stderr.lock())
}

pub fn run_with<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    let result = configure_threads().and_then(|()| dispatch(cli.command, out));
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let kind = if e.is_validation() { "invalid input" } else { "error" };
            let _ = writeln!(err, "missmarple: {kind}: {e}");
            if e.is_validation() {
                EXIT_INVALID
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
    // A global pool can only be installed once per process; later calls keep it.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<()> {
    let text = match cmd {
        Command::Gen(a) => gen(a)?,
        Command::Extract(a) => extract(a)?,
        Command::TrainV(a) => train_v(a)?,
        Command::TrainVa(a) => train_va(a)?,
        Command::Eval(a) => evaluate(a)?,
        Command::Localize(a) => localize(a)?,
        Command::Cost(a) => cost(a)?,
    };
    out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

/// Final path component, so reports do not depend on where a run lives.
fn file_label(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| p.to_string_lossy().into_owned())
}

fn require_exists(flag: &str, p: &Path) -> Result<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!("--{flag}: `{}` does not exist", p.display())))
    }
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    std::fs::write(p, text).map_err(|e| Error::io(p, e))
}

fn gen(a: GenArgs) -> Result<String> {
    let mut cfg = match &a.config {
        Some(p) => {
            require_exists("config", p)?;
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str::<SynthConfig>(&text).map_err(|e| Error::Config(format!("{}: {e}", file_label(p))))?
        }
        None => SynthConfig::for_regime(a.regime.unwrap_or(Regime::Coarse), 10, 0),
    };
    if let Some(r) = a.regime {
        if r != cfg.regime {
            let d = SynthConfig::for_regime(r, cfg.images_per_role, cfg.seed);
            cfg.regime = r;
            cfg.feather_radius = d.feather_radius;
            cfg.color_match = d.color_match;
        }
    }
    if let Some(c) = a.count {
        cfg.images_per_role = c;
    }
    if let Some(s) = a.size {
        cfg.image_size = s;
    }
    if let Some(s) = a.shape {
        cfg.shape = s;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    create_dir(&a.out)?;
    let manifest = synth::generate_dataset(&cfg, &a.out)?;
    let mut header = Header::new("gen", Some(cfg.seed)).with("out", file_label(&a.out));
    let echo = toml::to_string(&cfg).map_err(|e| Error::Config(e.to_string()))?;
    for line in echo.lines().filter(|l| !l.trim().is_empty()) {
        if let Some((k, v)) = line.split_once(" = ") {
            header = header.with(&format!("synth.{k}"), v);
        }
    }
    let mut s = header.render();
    s.push_str(&format!(
        "[values]\nmanifest = {}\ndataset = {}\nauthentic_images = {}\nspliced_images = {}\n",
        synth::MANIFEST_FILE,
        manifest.name,
        manifest.ids_with_role(Role::Authentic).len(),
        manifest.ids_with_role(Role::Spliced).len()
    ));
    write_text(&a.out.join(GEN_REPORT), &s)?;
    Ok(s)
}

fn extract(a: ExtractArgs) -> Result<String> {
    require_exists("manifest", &a.manifest)?;
    let mut manifest = DatasetManifest::load(&a.manifest)?;
    if let Some(o) = a.overlap {
        manifest.fake_overlap = o;
    }
    if let Some(s) = a.stride {
        manifest.stride = s;
    }
    manifest.validate()?;
    let split = SplitConfig {
        test_fraction: a.test_fraction,
        train_fraction: a.train_fraction,
    };
    let corpus = build_corpus(&manifest, &split, a.seed)?;
    corpus.save(&a.out)?;
    let header = Header::new("extract", Some(a.seed))
        .with("manifest", file_label(&a.manifest))
        .with("out", file_label(&a.out))
        .with("patch_size", manifest.patch_size)
        .with("overlap", manifest.fake_overlap)
        .with("stride", manifest.stride)
        .with("test_fraction", split.test_fraction)
        .with("train_fraction", split.train_fraction);
    let s = report::corpus_report(&header, &corpus);
    write_text(&a.out.join(EXTRACT_REPORT), &s)?;
    Ok(s)
}

fn resolve_run_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            require_exists("config", p)?;
            RunConfig::load(p)?
        }
        None => RunConfig::default(),
    };
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(p) = a.patience {
        cfg.train.patience = p;
    }
    if let Some(lr) = a.learning_rate {
        cfg.train.optimizer.learning_rate = lr;
    }
    cfg.train.validate()?;
    if a.iterations == 0 {
        return Err(Error::Config("--iterations must be at least 1".into()));
    }
    Ok(cfg)
}

fn train_header(command: &str, a: &TrainArgs, cfg: &RunConfig) -> Header {
    let h = &cfg.train;
    let m = &cfg.model;
    Header::new(command, Some(a.seed))
        .with("corpus", file_label(&a.corpus))
        .with("out", file_label(&a.out))
        .with("iterations", a.iterations)
        .with("epochs", h.epochs)
        .with("batch_size", h.batch_size)
        .with("patience", h.patience)
        .with("optimizer", "rmsprop")
        .with("learning_rate", h.optimizer.learning_rate)
        .with("rho", h.optimizer.rho)
        .with("epsilon", h.optimizer.epsilon)
        .with("model.input_size", m.input_size)
        .with("model.filters", format!("{:?}", m.filters))
        .with("model.kernel_size", m.kernel_size)
        .with("model.dense_units", m.dense_units)
        .with("model.dropout", format!("{}/{}", m.dropout_conv, m.dropout_dense))
        .with("model.batchnorm", format!("{}/{}", m.batchnorm_momentum, m.batchnorm_epsilon))
}

fn load_corpus(p: &Path) -> Result<PatchCorpus> {
    require_exists("corpus", p)?;
    PatchCorpus::load(p)
}

/// Writes weights, config, selection and the report and log of a trial.
fn save_trial(out: &Path, cfg: &ModelConfig, trial: &TrialSummary, report_text: &str) -> Result<()> {
    create_dir(out)?;
    let best = trial.best_run();
    save_weights(&best.weights, out.join(WEIGHTS_FILE))?;
    cfg.save(out.join(MODEL_FILE))?;
    write_text(
        &out.join(SELECTION_FILE),
        &format!(
            "iteration = {}\nseed = {}\nepoch = {}\n",
            best.iteration,
            best.seed,
            best.best().epoch
        ),
    )?;
    write_text(&out.join(TRAIN_REPORT), report_text)?;
    write_text(&out.join(TRAIN_LOG), &report::training_log(trial))
}

fn train_v(a: TrainArgs) -> Result<String> {
    let cfg = resolve_run_config(&a)?;
    let model_cfg = cfg.model.clone().with_variant(Variant::Village);
    let corpus = load_corpus(&a.corpus)?;
    check_input_size(&model_cfg, &corpus)?;
    let data = TrainingData::from_corpus(&corpus);
    let factory = |seed: u64| build_mmv(&model_cfg, seed);
    let trial = run_trial(Variant::Village.label(), &factory, &data, &cfg.train, a.iterations, a.seed)?;
    let donor = select_donor(&trial, DONOR_LAYER)?;
    let text = report::training_report(&train_header("train-v", &a, &cfg), &corpus.dataset, &trial);
    save_trial(&a.out, &model_cfg, &trial, &text)?;
    save_weights(&donor, a.out.join(DONOR_FILE))?;
    Ok(text)
}

fn train_va(a: TrainVaArgs) -> Result<String> {
    let TrainVaArgs { train: a, donor } = a;
    let cfg = resolve_run_config(&a)?;
    let model_cfg = cfg.model.clone().with_variant(Variant::Transfer);
    require_exists("donor", &donor)?;
    let donor_weights = load_weights(&donor)?;
    let corpus = load_corpus(&a.corpus)?;
    check_input_size(&model_cfg, &corpus)?;
    let data = TrainingData::from_corpus(&corpus);
    let factory = |seed: u64| build_mmva(&model_cfg, &donor_weights, seed);
    let trial = run_trial(Variant::Transfer.label(), &factory, &data, &cfg.train, a.iterations, a.seed)?;
    let key = param_name(DONOR_LAYER, crate::nn::network::KERNEL);
    let frozen = trial.runs.iter().all(|r| r.weights.get(&key) == donor_weights.get(&key));
    let header = train_header("train-va", &a, &cfg).with("donor", file_label(&donor));
    let mut text = report::training_report(&header, &corpus.dataset, &trial);
    text.push_str(&format!("donor_kernel_unchanged = {frozen}\n"));
    save_trial(&a.out, &model_cfg, &trial, &text)?;
    Ok(text)
}

fn check_input_size(cfg: &ModelConfig, corpus: &PatchCorpus) -> Result<()> {
    if cfg.input_size != corpus.patch_size {
        return Err(Error::Config(format!(
            "model input_size {} differs from corpus patch size {}",
            cfg.input_size, corpus.patch_size
        )));
    }
    Ok(())
}

/// A trained model directory.
pub struct TrainedModel {
    pub label: String,
    pub classifier: Classifier,
    pub iteration: Option<usize>,
}

pub fn load_model_dir(dir: &Path) -> Result<TrainedModel> {
    require_exists("model", dir)?;
    let cfg = ModelConfig::load(dir.join(MODEL_FILE))?;
    let weights = load_weights(dir.join(WEIGHTS_FILE))?;
    let model = model::restore(&cfg, &weights)?;
    let iteration = std::fs::read_to_string(dir.join(SELECTION_FILE)).ok().and_then(|t| {
        t.lines()
            .find_map(|l| l.strip_prefix("iteration = "))
            .and_then(|v| v.trim().parse().ok())
    });
    Ok(TrainedModel {
        label: format!("{} [{}]", cfg.variant.label(), file_label(dir)),
        classifier: Classifier { model, weights },
        iteration,
    })
}

fn grid_from_step(step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::Config(format!("--grid-step must be in (0,1], got {step}")));
    }
    let n = (1.0 / step).round() as usize;
    Ok((0..=n).map(|i| ((i as f64 * step) * 1e9).round() / 1e9).filter(|t| *t <= 1.0).collect())
}

/// Evaluates one model on the corpus's held-out images.
pub fn evaluate_model(
    m: &TrainedModel,
    manifest: &DatasetManifest,
    corpus: &PatchCorpus,
    threshold: Option<f64>,
    grid: &[f64],
    stride: usize,
) -> Result<(EvalRow, Vec<(String, String, ImageVerdict)>)> {
    if let Some(bad) = corpus.test_images.iter().find(|&&id| id as usize >= manifest.entries.len()) {
        return Err(Error::Config(format!(
            "corpus test image {bad} is not in manifest `{}`",
            manifest.name
        )));
    }
    let role = |id: u32| manifest.entries[id as usize].role;
    let t = match threshold {
        Some(t) => t,
        None => {
            let dev = corpus.development_images(manifest);
            let maps = eval::score_images(&m.classifier, manifest, &dev, stride)?;
            let samples: Vec<(Role, f64)> = dev
                .iter()
                .zip(&maps)
                .map(|(&id, map)| ImageVerdict::from_map(id, map, 0.0).map(|v| (role(id), v.fake_fraction)))
                .collect::<Result<_>>()?;
            eval::search_threshold(&samples, grid)?
        }
    };
    let maps = eval::score_images(&m.classifier, manifest, &corpus.test_images, stride)?;
    let mut verdicts = Vec::new();
    let mut samples = Vec::new();
    for (&id, map) in corpus.test_images.iter().zip(&maps) {
        let v = ImageVerdict::from_map(id, map, t)?;
        samples.push((role(id), v.fake_fraction));
        let name = file_label(&manifest.entries[id as usize].image);
        verdicts.push((name, role(id).as_str().to_string(), v));
    }
    let report: EvalReport = eval::report_at(&samples, t)?;
    Ok((
        EvalRow {
            model: m.label.clone(),
            dataset: corpus.dataset.clone(),
            iteration: m.iteration,
            report,
        },
        verdicts,
    ))
}

fn evaluate(a: EvalArgs) -> Result<String> {
    require_exists("manifest", &a.manifest)?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let corpus = load_corpus(&a.corpus)?;
    let grid = grid_from_step(a.grid_step)?;
    if let Some(t) = a.threshold {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Config(format!("--threshold must be in [0,1], got {t}")));
        }
    }
    let mut header = Header::new("eval", None)
        .with("manifest", file_label(&a.manifest))
        .with("corpus", file_label(&a.corpus))
        .with("stride", a.stride)
        .with(
            "threshold",
            a.threshold.map_or(format!("searched on development images, step {}", a.grid_step), |t| t.to_string()),
        );
    let mut rows = Vec::new();
    let mut verdicts = Vec::new();
    let mut timing = String::new();
    for dir in &a.models {
        header = header.with("model", file_label(dir));
        let start = Instant::now();
        let m = load_model_dir(dir)?;
        let (row, v) = evaluate_model(&m, &manifest, &corpus, a.threshold, &grid, a.stride)?;
        timing.push_str(&format!("{} wall_ms = {}\n", m.label, start.elapsed().as_millis()));
        verdicts.push((m.label.clone(), v));
        rows.push(row);
    }
    let text = report::eval_report(&header, &rows, &verdicts);
    write_text(&a.out, &text)?;
    write_text(&timing_path(&a.out), &timing)?;
    Ok(text)
}

/// `report.txt` becomes `report.timing.txt`.
pub fn timing_path(report: &Path) -> PathBuf {
    let stem = report.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    report.with_file_name(format!("{stem}.timing.txt"))
}

fn localize(a: LocalizeArgs) -> Result<String> {
    if !(0.0..=1.0).contains(&a.cutoff) || !(0.0..=1.0).contains(&a.threshold) {
        return Err(Error::Config("--cutoff and --threshold must be in [0,1]".into()));
    }
    let m = load_model_dir(&a.model)?;
    let mut rows = Vec::new();
    for img_path in &a.images {
        require_exists("image", img_path)?;
        let img = patch::load_rgb(img_path)?;
        let (v, map) = eval::classify_image(&m.classifier, 0, &img, a.threshold, a.stride)?;
        let bbox = if v.label == Role::Spliced { bounding_box(&map, a.cutoff) } else { None };
        let annotated = render_overlay(&img, bbox.as_ref())?;
        let target = localize::localized_path(img_path);
        let target = match &a.out_dir {
            Some(d) => {
                create_dir(d)?;
                d.join(target.file_name().expect("localized path has a file name"))
            }
            None => target,
        };
        synth::save_png(&annotated, &target)?;
        rows.push((file_label(img_path), v, bbox));
    }
    let header = Header::new("localize", None)
        .with("model", file_label(&a.model))
        .with("threshold", a.threshold)
        .with("cutoff", a.cutoff)
        .with("stride", a.stride);
    let text = report::localize_report(&header, &rows);
    if let Some(p) = &a.report {
        write_text(p, &text)?;
    }
    Ok(text)
}

/// Cost of the MM-V and MM-V-A built from `cfg`, itemized per layer.
pub fn twin_cost(cfg: &ModelConfig) -> Result<CostReport> {
    let v = model::mmv_model(&cfg.clone().with_variant(Variant::Village), Variant::Village)?;
    let donor_shape = [cfg.kernel_size, cfg.kernel_size, cfg.filters[1], cfg.filters[2]];
    let va = model::mmva_model(cfg, &donor_shape)?;
    Ok(CostReport::combine(&[model_cost(&v)?, model_cost(&va)?]))
}

fn published_text() -> Result<String> {
    let mut t = report::Table::new(&["model", "multiplications", "difference", "faster"]);
    t.row(vec![
        "MissMarple (published total)".into(),
        published::MISSMARPLE_TOTAL.to_string(),
        "-".into(),
        "-".into(),
    ]);
    let refs = [("Rao & Ni", published::RAO_NI_TOTAL), ("Pomari et al.", published::POMARI_TOTAL)];
    let mut values = String::from("[values]\n");
    for (i, (name, total)) in refs.iter().enumerate() {
        let c = compare(published::MISSMARPLE_TOTAL, *total)?;
        t.row(vec![name.to_string(), total.to_string(), c.difference.to_string(), c.percent_string()]);
        values.push_str(&format!(
            "comparison{}.reference = {name}\ncomparison{}.difference = {}\ncomparison{}.percent_faster = {}\n",
            i + 1,
            i + 1,
            c.difference,
            i + 1,
            c.percent_string()
        ));
    }
    let ours = twin_cost(&ModelConfig::default())?;
    let mut s = t.render();
    s.push_str(&format!(
        "\nthis implementation, default config (MM-V + MM-V-A): {} multiplications, {} without the frozen transfer branch\n\n",
        ours.total,
        ours.total - ours.transferred_total()
    ));
    values.push_str(&format!("default_config_total = {}\n", ours.total));
    s.push_str(&values);
    Ok(s)
}

fn cost(a: CostArgs) -> Result<String> {
    let (header, body) = match (a.preset, &a.config) {
        (Some(Preset::Table3), _) => (Header::new("cost", None).with("preset", "table3"), published_text()?),
        (_, Some(p)) => {
            require_exists("config", p)?;
            let cfg = RunConfig::load(p)?.model;
            let r = twin_cost(&cfg)?;
            (Header::new("cost", None).with("config", file_label(p)), r.render())
        }
        (Some(Preset::Default) | None, None) => {
            let r = twin_cost(&ModelConfig::default())?;
            (Header::new("cost", None).with("preset", "default"), r.render())
        }
    };
    let text = header.render() + &body;
    if let Some(p) = &a.out {
        write_text(p, &text)?;
    }
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let argv: Vec<&str> = std::iter::once("missmarple").chain(args.iter().copied()).collect();
        let code = run_with(argv, &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn no_arguments_is_a_usage_error() {
        let (code, _, err) = run_capture(&[]);
        assert_eq!(code, EXIT_USAGE);
        assert!(err.contains("Usage"), "{err}");
        let (code, _, _) = run_capture(&["cost", "--bogus"]);
        assert_eq!(code, EXIT_USAGE);
    }

    #[test]
    fn published_totals_preset() {
        let (code, out, _) = run_capture(&["cost", "--preset", "table3"]);
        assert_eq!(code, EXIT_OK);
        assert!(out.contains("68.3890%") && out.contains("99.1102%"), "{out}");
        assert!(out.contains("24967098") && out.contains("1285397376"));
    }

    #[test]
    fn default_cost_matches_hand_computation() {
        let r = twin_cost(&ModelConfig::default()).unwrap();
        assert_eq!(r.total, 20_054_016 + 27_131_904);
        let (code, out, _) = run_capture(&["cost"]);
        assert_eq!(code, EXIT_OK);
        assert!(out.contains("total_multiplications = 47185920"), "{out}");
    }

    #[test]
    fn missing_inputs_are_validation_errors() {
        let (code, _, err) = run_capture(&["extract", "--manifest", "/nonexistent/m.txt", "--out", "/tmp/x"]);
        assert_eq!(code, EXIT_INVALID, "{err}");
        assert!(err.contains("--manifest"));
    }

    #[test]
    fn grid_steps() {
        assert_eq!(grid_from_step(0.25).unwrap(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(grid_from_step(0.01).unwrap().len(), 101);
        assert!(grid_from_step(0.0).is_err());
    }

    #[test]
    fn run_config_sections() {
        let c: RunConfig = toml::from_str("[train]\nepochs = 3\n[model]\ndense_units = 8\n").unwrap();
        assert_eq!((c.train.epochs, c.model.dense_units, c.train.batch_size), (3, 8, 32));
        assert!(toml::from_str::<RunConfig>("[trian]\nepochs = 3\n").is_err());
    }
}
