//! The `onn` command-line tool.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error,
//! 4 numerical divergence with no surviving run.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backprop::{train, Batch, LrSchedule, TrainConfig, TrainHook, TraceEntry};
use crate::error::OnnError;
use crate::io::{encode_pgm, write_atomic};
use crate::network::{Architecture, LayerSpec, OnnModel, Resample};
use crate::operators::{OperatorConstants, OperatorSubLibrary, SubLibraryIds};
use crate::rng::{derive_seed, rng_for};
use crate::spm::{build_network, prior_bp, HealthLedger, Selection, SpmConfig};
use crate::tasks::{
    best_run, build_folds, evaluate, fold_pairs, run_fold, Corpus, ExperimentConfig, ExperimentReport, FoldPlan,
    FoldResult, ImagePair, RunResult, Scores, TaskKind, TaskSpec,
};
use crate::FeatureMap;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;

/// Environment variable overriding the configured seed.
pub const SEED_ENV: &str = "ONN_SEED";

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_DATA,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<OnnError> for CliError {
    fn from(e: OnnError) -> Self {
        let code = match e {
            OnnError::Divergence { .. } | OnnError::NonFiniteGradient => EXIT_DIVERGED,
            OnnError::Io(_)
            | OnnError::Json(_)
            | OnnError::Format(_)
            | OnnError::CorpusTooSmall(_)
            | OnnError::DegenerateRange
            | OnnError::Shape(_) => EXIT_DATA,
            _ => EXIT_USAGE,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "onn", version, about = "Operational neural networks with SPM operator search")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Convert a directory of images into a grayscale PGM corpus.
    Import {
        src: PathBuf,
        dst: PathBuf,
        #[arg(long, default_value_t = 60)]
        size: u32,
    },
    /// Run the prior BP of every fold and write the HF ledgers.
    Spm {
        #[arg(long)]
        config: PathBuf,
        /// Only this fold (1-based).
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Configure a fresh network from an HF ledger.
    Build {
        #[arg(long)]
        ledger: PathBuf,
        #[arg(long, conflicts_with = "bottom", required_unless_present = "bottom")]
        top: Option<usize>,
        #[arg(long)]
        bottom: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Supplies the architecture, constants, weight range and seed.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model on one fold, keeping the best of several runs.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 1)]
        fold: usize,
        #[arg(long, default_value_t = 10)]
        runs: usize,
        #[arg(long, default_value_t = 240)]
        iters: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Score a model on one fold.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 1)]
        fold: usize,
        #[arg(long, value_enum, default_value_t = Metric::Snr)]
        metric: Metric,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Prior BP, five candidates and evaluation for every fold.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Overrides the configured output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    Snr,
    Mse,
}

/// Runs the tool and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Import { src, dst, size } => cmd_import(&src, &dst, size).map(|_| ()),
        Command::Spm { config, fold } => cmd_spm(&config, fold),
        Command::Build {
            ledger,
            top,
            bottom,
            out,
            config,
            seed,
        } => {
            let (s, which) = match (top, bottom) {
                (Some(s), None) => (s, Selection::Elite),
                (None, Some(s)) => (s, Selection::Worst),
                _ => return Err(CliError::usage("exactly one of --top or --bottom is required")),
            };
            cmd_build(&ledger, s, which, &out, config.as_deref(), seed)
        }
        Command::Train {
            config,
            model,
            fold,
            runs,
            iters,
            out,
            jobs,
        } => with_jobs(jobs, || cmd_train(&config, &model, fold, runs, iters, &out)),
        Command::Eval {
            config,
            model,
            fold,
            metric,
            out,
        } => cmd_eval(&config, &model, fold, metric, out.as_deref()),
        Command::Experiment { config, jobs, out } => {
            with_jobs(jobs, || cmd_experiment(&config, out.as_deref())).map(|_| ())
        }
    }
}

fn with_jobs<T: Send>(jobs: usize, f: impl FnOnce() -> CliResult<T> + Send) -> CliResult<T> {
    if jobs == 0 {
        return Err(CliError::usage("--jobs must be at least 1"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::usage(format!("thread pool: {e}")))?;
    pool.install(f)
}

// ---------------------------------------------------------------- config

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: TaskKind,
    /// Directory of PGM images; the synthetic corpus is used when absent.
    pub corpus: Option<PathBuf>,
    pub output: PathBuf,
    pub folds: usize,
    /// BP runs per candidate.
    pub runs: usize,
    pub seed: u64,
    pub weight_range: f64,
    pub synthetic: SyntheticSection,
    pub task_params: TaskParams,
    pub sublibrary: Option<SubLibraryIds>,
    pub architecture: ArchitectureSection,
    pub constants: OperatorConstants,
    pub spm: SpmSection,
    pub train: TrainSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::Denoise,
            corpus: None,
            output: PathBuf::from("onn-out"),
            folds: 10,
            runs: 10,
            seed: 0,
            weight_range: 0.1,
            synthetic: SyntheticSection::default(),
            task_params: TaskParams::default(),
            sublibrary: None,
            architecture: ArchitectureSection::default(),
            constants: OperatorConstants::default(),
            spm: SpmSection::default(),
            train: TrainSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSection {
    pub count: usize,
    pub seed: u64,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        Self { count: 100, seed: 0 }
    }
}

/// Overrides of the task defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskParams {
    pub pairs_per_fold: Option<usize>,
    pub noise_p: Option<f64>,
    pub train_fraction: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchitectureSection {
    /// Odd kernel side.
    pub kernel: usize,
    pub hidden: Vec<HiddenLayer>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HiddenLayer {
    pub neurons: usize,
    #[serde(default = "no_resample")]
    pub resample: Resample,
}

fn no_resample() -> Resample {
    Resample::None
}

impl Default for ArchitectureSection {
    fn default() -> Self {
        Self::from(&Architecture::default())
    }
}

impl From<&Architecture> for ArchitectureSection {
    fn from(arch: &Architecture) -> Self {
        Self {
            kernel: arch.kernel_rows,
            hidden: arch.layers[..arch.hidden_layers()]
                .iter()
                .map(|l| HiddenLayer {
                    neurons: l.neurons,
                    resample: l.resample,
                })
                .collect(),
        }
    }
}

impl ArchitectureSection {
    pub fn to_architecture(&self) -> Architecture {
        let mut layers: Vec<LayerSpec> = self
            .hidden
            .iter()
            .map(|h| LayerSpec {
                neurons: h.neurons,
                resample: h.resample,
                assignable: true,
            })
            .collect();
        layers.push(LayerSpec {
            neurons: 1,
            resample: Resample::None,
            assignable: false,
        });
        Architecture {
            inputs: 1,
            layers,
            kernel_rows: self.kernel,
            kernel_cols: self.kernel,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpmSection {
    pub iterations_per_session: usize,
    pub sessions: usize,
}

impl Default for SpmSection {
    fn default() -> Self {
        let d = SpmConfig::default();
        Self {
            iterations_per_session: d.iterations_per_session,
            sessions: d.sessions,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub iterations: usize,
    pub lr0: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lr_max: f64,
    pub lr_min: f64,
    /// 0 for full batch, otherwise the mini-batch size.
    pub batch: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            iterations: d.iterations,
            lr0: d.lr0,
            alpha: d.schedule.alpha,
            beta: d.schedule.beta,
            lr_max: d.schedule.lr_max,
            lr_min: d.schedule.lr_min,
            batch: 0,
        }
    }
}

impl TrainSection {
    pub fn to_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            iterations: self.iterations,
            lr0: self.lr0,
            schedule: LrSchedule {
                alpha: self.alpha,
                beta: self.beta,
                lr_max: self.lr_max,
                lr_min: self.lr_min,
            },
            batch: if self.batch == 0 {
                Batch::Full
            } else {
                Batch::Mini(self.batch)
            },
            seed,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::usage(format!("config: {e}")))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    /// Reads, applies the seed override and validates.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.seed = v
                .trim()
                .parse()
                .map_err(|_| CliError::usage(format!("{SEED_ENV}={v} is not an unsigned integer")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn task_spec(&self) -> CliResult<TaskSpec> {
        let mut spec = TaskSpec::new(self.task);
        if let Some(v) = self.task_params.pairs_per_fold {
            spec.pairs_per_fold = v;
        }
        if let Some(v) = self.task_params.noise_p {
            spec.noise_p = v;
        }
        if let Some(v) = self.task_params.train_fraction {
            spec.train_fraction = v;
        }
        if let Some(ids) = &self.sublibrary {
            spec.sublibrary = OperatorSubLibrary::try_from(ids.clone())
                .map_err(|e| CliError::usage(format!("config sublibrary: {e}")))?;
        }
        spec.validate()
            .map_err(|e| CliError::usage(format!("config task_params: {e}")))?;
        Ok(spec)
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            architecture: self.architecture.to_architecture(),
            constants: self.constants,
            spm: SpmConfig {
                iterations_per_session: self.spm.iterations_per_session,
                sessions: self.spm.sessions,
                seed: self.seed,
                weight_range: self.weight_range,
            },
            train: self.train.to_config(self.seed),
            runs: self.runs,
            weight_range: self.weight_range,
            seed: self.seed,
        }
    }

    /// Field-level checks, run before any computation.
    pub fn validate(&self) -> CliResult<()> {
        let field = |name: &str, e: OnnError| CliError::usage(format!("config {name}: {e}"));
        if self.folds == 0 {
            return Err(CliError::usage("config folds: must be at least 1"));
        }
        if self.runs == 0 {
            return Err(CliError::usage("config runs: must be at least 1"));
        }
        if !(self.weight_range.is_finite() && self.weight_range > 0.0) {
            return Err(CliError::usage("config weight_range: must be > 0"));
        }
        if self.corpus.is_none() && self.synthetic.count == 0 {
            return Err(CliError::usage("config synthetic.count: must be positive without a corpus"));
        }
        if self.architecture.hidden.is_empty() {
            return Err(CliError::usage("config architecture.hidden: needs at least one layer"));
        }
        self.architecture
            .to_architecture()
            .validate()
            .map_err(|e| field("architecture", e))?;
        self.constants.validate().map_err(|e| field("constants", e))?;
        let exp = self.experiment();
        exp.spm.validate().map_err(|e| field("spm", e))?;
        exp.train.validate().map_err(|e| field("train", e))?;
        self.task_spec()?;
        Ok(())
    }

    pub fn corpus(&self) -> CliResult<Corpus> {
        match &self.corpus {
            Some(dir) => {
                let c = Corpus::load_dir(dir)
                    .map_err(|e| CliError::data(format!("corpus {}: {e}", dir.display())))?;
                if c.is_empty() {
                    return Err(CliError::data(format!("corpus {} has no PGM images", dir.display())));
                }
                Ok(c)
            }
            None => Ok(Corpus::synthetic(self.synthetic.count, self.synthetic.seed)),
        }
    }

    /// Hash of the canonical config text, output location excluded; ties
    /// on-disk fold state to the configuration that produced it.
    pub fn fingerprint(&self) -> String {
        let canonical = Self {
            output: PathBuf::new(),
            ..self.clone()
        };
        sha256_hex(canonical.to_toml().as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

struct Context {
    cfg: RunConfig,
    spec: TaskSpec,
    corpus: Corpus,
    plans: Vec<FoldPlan>,
}

fn context(path: &Path) -> CliResult<Context> {
    let cfg = RunConfig::load(path)?;
    let spec = cfg.task_spec()?;
    let corpus = cfg.corpus()?;
    let plans = build_folds(&corpus.ids(), &spec, cfg.folds, cfg.seed)?;
    Ok(Context {
        cfg,
        spec,
        corpus,
        plans,
    })
}

impl Context {
    fn plan(&self, fold: usize) -> CliResult<&FoldPlan> {
        self.plans
            .iter()
            .find(|p| p.fold == fold)
            .ok_or_else(|| CliError::usage(format!("fold {fold} outside 1..={}", self.plans.len())))
    }

    fn pairs(&self, fold: usize) -> CliResult<(Vec<ImagePair>, Vec<ImagePair>)> {
        Ok(fold_pairs(&self.spec, &self.corpus, self.plan(fold)?, self.cfg.seed)?)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(OnnError::from)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------- import

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub size: u32,
    pub images: Vec<ManifestEntry>,
    pub failed: Vec<ImportFailure>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub source: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportFailure {
    pub source: String,
    pub error: String,
}

/// Grayscale, centre-cropped to a square and bilinearly resized.
pub fn thumbnail(img: &image::DynamicImage, size: u32) -> FeatureMap {
    let gray = img.to_luma8();
    let (w, h) = gray.dimensions();
    let side = w.min(h);
    let cropped = image::imageops::crop_imm(&gray, (w - side) / 2, (h - side) / 2, side, side).to_image();
    let resized = image::imageops::resize(&cropped, size, size, image::imageops::FilterType::Triangle);
    FeatureMap::from_fn(size as usize, size as usize, |r, c| {
        resized.get_pixel(c as u32, r as u32).0[0] as f64
    })
}

pub fn cmd_import(src: &Path, dst: &Path, size: u32) -> CliResult<Manifest> {
    if size == 0 {
        return Err(CliError::usage("--size must be positive"));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(src)
        .map_err(|e| CliError::usage(format!("{}: {e}", src.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.file_name().is_some_and(|n| !n.to_string_lossy().starts_with('.')))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::usage(format!("{} contains no images", src.display())));
    }
    let mut manifest = Manifest {
        size,
        images: Vec::new(),
        failed: Vec::new(),
    };
    for path in files {
        let source = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let id = path.file_stem().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        match image::open(&path) {
            Ok(img) => {
                let bytes = encode_pgm(&thumbnail(&img, size));
                write_atomic(&dst.join(format!("{id}.pgm")), &bytes)?;
                manifest.images.push(ManifestEntry {
                    id,
                    source,
                    sha256: sha256_hex(&bytes),
                });
            }
            Err(e) => {
                eprintln!("skipping {source}: {e}");
                manifest.failed.push(ImportFailure {
                    source,
                    error: e.to_string(),
                });
            }
        }
    }
    write_json(&dst.join("manifest.json"), &manifest)?;
    if manifest.images.is_empty() {
        return Err(CliError::data("no image could be imported"));
    }
    println!("imported {} images ({} failed)", manifest.images.len(), manifest.failed.len());
    Ok(manifest)
}

// ---------------------------------------------------------------- spm

fn fold_seed(cfg: &RunConfig, fold: usize) -> u64 {
    derive_seed(cfg.seed, &[0x7072_696f, fold as u64])
}

fn cmd_spm(config: &Path, only: Option<usize>) -> CliResult<()> {
    let ctx = context(config)?;
    let exp = ctx.cfg.experiment();
    let folds: Vec<usize> = match only {
        Some(f) => vec![ctx.plan(f)?.fold],
        None => ctx.plans.iter().map(|p| p.fold).collect(),
    };
    for fold in folds {
        let (train_pairs, _) = ctx.pairs(fold)?;
        let tuples: Vec<_> = train_pairs.iter().map(ImagePair::as_tuple).collect();
        let spm = SpmConfig {
            seed: fold_seed(&ctx.cfg, fold),
            ..exp.spm.clone()
        };
        let out = prior_bp(&tuples, &ctx.spec.sublibrary, &spm, &exp.train, &exp.architecture, exp.constants, false)?;
        let dir = ctx.cfg.output.join("spm").join(format!("fold{fold:02}"));
        write_ledger(&dir, &out.ledger)?;
        println!("fold {fold}: {} prior BP iterations, ledger in {}", out.iterations, dir.display());
    }
    Ok(())
}

fn write_ledger(dir: &Path, ledger: &HealthLedger) -> CliResult<()> {
    write_json(&dir.join("hf.json"), ledger)?;
    write_atomic(&dir.join("hf.csv"), ledger.to_csv().as_bytes())?;
    Ok(())
}

// ---------------------------------------------------------------- build

fn cmd_build(
    ledger: &Path,
    s: usize,
    which: Selection,
    out: &Path,
    config: Option<&Path>,
    seed: Option<u64>,
) -> CliResult<()> {
    let ledger: HealthLedger = read_json(ledger)?;
    let cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let arch = cfg.architecture.to_architecture();
    let seed = seed.unwrap_or(cfg.seed);
    let mut rng = rng_for(seed, &[0x6275_696c]);
    let model = build_network(&ledger, s, which, &arch, cfg.constants, &mut rng, cfg.weight_range)?;
    model.save(out)?;
    for l in 0..model.hidden_layers() {
        let sets: Vec<String> = model.layer_sets(l).iter().map(|s| s.index().to_string()).collect();
        println!("layer {}: {}", l + 1, sets.join(" "));
    }
    Ok(())
}

// ---------------------------------------------------------------- train

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub fold: usize,
    pub runs: Vec<RunResult>,
    pub best_run: Option<usize>,
    pub best_model_sha256: Option<String>,
}

struct Recorder {
    run: usize,
    rows: Vec<(usize, TraceEntry)>,
}

impl TrainHook for Recorder {
    fn after_step(&mut self, _: &OnnModel, entry: &mut TraceEntry) -> crate::Result<()> {
        self.rows.push((self.run, entry.clone()));
        Ok(())
    }
}

fn cmd_train(config: &Path, model: &Path, fold: usize, runs: usize, iters: usize, out: &Path) -> CliResult<()> {
    use rayon::prelude::*;

    if runs == 0 {
        return Err(CliError::usage("--runs must be at least 1"));
    }
    let ctx = context(config)?;
    let base = OnnModel::load(model)?;
    let (train_pairs, test_pairs) = ctx.pairs(fold)?;
    let tuples: Vec<(FeatureMap, FeatureMap)> = train_pairs.iter().map(ImagePair::as_tuple).collect();

    // run 0 continues from the given weights, later runs start afresh
    let outcomes: Vec<CliResult<(RunResult, OnnModel, Vec<(usize, TraceEntry)>)>> = (0..runs)
        .into_par_iter()
        .map(|r| {
            let seed = derive_seed(ctx.cfg.seed, &[0x7472_6169, fold as u64, r as u64]);
            let mut m = base.clone();
            if r > 0 {
                m.init_weights(&mut rng_for(seed, &[0x696e_6974]), ctx.cfg.weight_range)?;
            }
            let cfg = TrainConfig {
                iterations: iters,
                ..ctx.cfg.train.to_config(seed)
            };
            let mut rec = Recorder { run: r, rows: Vec::new() };
            let result = match train(&mut m, &tuples, &cfg, &mut rec) {
                Ok(_) => RunResult {
                    run: r,
                    seed,
                    train: Some(evaluate(&m, &train_pairs)?),
                    test: if test_pairs.is_empty() {
                        None
                    } else {
                        Some(evaluate(&m, &test_pairs)?)
                    },
                    final_loss: rec.rows.last().map(|(_, e)| e.loss),
                },
                Err(OnnError::Divergence { iteration }) => {
                    eprintln!("run {r} diverged at iteration {iteration}");
                    RunResult {
                        run: r,
                        seed,
                        train: None,
                        test: None,
                        final_loss: None,
                    }
                }
                Err(e) => return Err(e.into()),
            };
            Ok((result, m, rec.rows))
        })
        .collect();

    let mut results = Vec::with_capacity(runs);
    let mut models = Vec::with_capacity(runs);
    let mut csv = String::from("run,iter,E,lr\n");
    for o in outcomes {
        let (r, m, rows) = o?;
        for (run, e) in rows {
            csv.push_str(&format!("{run},{},{},{}\n", e.iter, e.loss, e.lr));
        }
        results.push(r);
        models.push(m);
    }
    write_atomic(&out.join("metrics.csv"), csv.as_bytes())?;
    let best = best_run(&results);
    let mut summary = TrainSummary {
        fold,
        runs: results,
        best_run: best,
        best_model_sha256: None,
    };
    if let Some(i) = best {
        let path = out.join("best_model.json");
        models[i].save(&path)?;
        summary.best_model_sha256 = Some(sha256_hex(&fs::read(&path).map_err(OnnError::from)?));
    }
    write_json(&out.join("runs.json"), &summary)?;
    match best {
        Some(i) => {
            let snr = summary.runs[i].train.as_ref().map(|s| s.snr).unwrap_or(f64::NAN);
            println!("best run {i}: train SNR {snr:.3} dB");
            Ok(())
        }
        None => Err(CliError {
            code: EXIT_DIVERGED,
            message: "every run diverged".into(),
        }),
    }
}

// ---------------------------------------------------------------- eval

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fold: usize,
    pub train: Scores,
    pub test: Option<Scores>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("split,id,snr,mse\n");
        let mut section = |split: &str, s: &Scores| {
            for p in &s.pairs {
                out.push_str(&format!("{split},{},{},{}\n", p.id, crate::io::format_float(p.snr), p.mse));
            }
            out.push_str(&format!("{split},mean,{},{}\n", crate::io::format_float(s.snr), s.mse));
        };
        section("train", &self.train);
        if let Some(t) = &self.test {
            section("test", t);
        }
        out
    }
}

fn cmd_eval(config: &Path, model: &Path, fold: usize, metric: Metric, out: Option<&Path>) -> CliResult<()> {
    let ctx = context(config)?;
    let model = OnnModel::load(model)?;
    let (train_pairs, test_pairs) = ctx.pairs(fold)?;
    let report = EvalReport {
        fold,
        train: evaluate(&model, &train_pairs)?,
        test: if test_pairs.is_empty() {
            None
        } else {
            Some(evaluate(&model, &test_pairs)?)
        },
    };
    let pick = |s: &Scores| match metric {
        Metric::Snr => format!("SNR {} dB", crate::io::format_float(s.snr)),
        Metric::Mse => format!("MSE {}", s.mse),
    };
    println!("train {}", pick(&report.train));
    if let Some(t) = &report.test {
        println!("test {}", pick(t));
    }
    if let Some(dir) = out {
        write_json(&dir.join("eval.json"), &report)?;
        write_atomic(&dir.join("eval.csv"), report.to_csv().as_bytes())?;
    }
    Ok(())
}

// ---------------------------------------------------------------- experiment

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct FoldState {
    config_sha256: String,
    result: FoldResult,
}

pub fn cmd_experiment(config: &Path, out: Option<&Path>) -> CliResult<ExperimentReport> {
    let mut ctx = context(config)?;
    if let Some(dir) = out {
        ctx.cfg.output = dir.to_path_buf();
    }
    let exp = ctx.cfg.experiment();
    let fingerprint = ctx.cfg.fingerprint();
    let mut results = Vec::with_capacity(ctx.plans.len());
    for plan in &ctx.plans {
        let dir = ctx.cfg.output.join(format!("fold{:02}", plan.fold));
        let state_path = dir.join("state.json");
        if let Ok(state) = read_json::<FoldState>(&state_path) {
            if state.config_sha256 == fingerprint && state.result.plan == *plan {
                println!("fold {}: complete, skipped", plan.fold);
                results.push(state.result);
                continue;
            }
            eprintln!("fold {}: stale state from another config, recomputing", plan.fold);
        }
        let result = run_fold(&ctx.spec, &ctx.corpus, plan, &exp)
            .map_err(|e| CliError::from(e).with_context(format!("fold {}", plan.fold)))?;
        write_ledger(&dir, &result.ledger)?;
        write_json(
            &state_path,
            &FoldState {
                config_sha256: fingerprint.clone(),
                result: result.clone(),
            },
        )?;
        let line: Vec<String> = result
            .candidates
            .iter()
            .map(|c| format!("{}={}", c.candidate, c.train_snr().map_or("-".into(), |v| format!("{v:.2}"))))
            .collect();
        println!("fold {}: {}", plan.fold, line.join(" "));
        results.push(result);
    }
    let report = ExperimentReport::from_folds(ctx.spec.kind, results);
    write_json(&ctx.cfg.output.join("report.json"), &report)?;
    write_atomic(&ctx.cfg.output.join("report.csv"), report.to_csv().as_bytes())?;
    Ok(report)
}

impl CliError {
    fn with_context(mut self, what: String) -> Self {
        self.message = format!("{what}: {}", self.message);
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
        let custom = RunConfig {
            task: TaskKind::Transform,
            corpus: Some("data".into()),
            sublibrary: Some(OperatorSubLibrary::regression().ids()),
            task_params: TaskParams {
                pairs_per_fold: Some(8),
                ..Default::default()
            },
            ..Default::default()
        };
        assert_eq!(RunConfig::parse(&custom.to_toml()).unwrap(), custom);
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let e = RunConfig::parse("task = \"synth\"\nfolsd = 3\n").unwrap_err();
        assert_eq!(e.code, EXIT_USAGE);
        assert!(e.message.contains("folsd"));
        let e = RunConfig::parse("[train]\nlr = 0.1\n").unwrap_err();
        assert!(e.message.contains("lr"));
    }

    #[test]
    fn config_validation_names_the_field() {
        let mut cfg = RunConfig::parse("task = \"synth\"\nruns = 0\n").unwrap();
        assert!(cfg.validate().unwrap_err().message.contains("runs"));
        cfg.runs = 1;
        cfg.train.lr0 = 2.0;
        assert!(cfg.validate().unwrap_err().message.contains("train"));
        cfg.train.lr0 = 0.01;
        cfg.architecture.kernel = 4;
        assert!(cfg.validate().unwrap_err().message.contains("architecture"));
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = RunConfig::parse("task = \"transform\"\n").unwrap();
        assert_eq!(cfg.folds, 10);
        assert_eq!(cfg.architecture.to_architecture(), Architecture::default());
        assert_eq!(cfg.experiment().spm.total_iterations(), 2400);
        assert_eq!(cfg.task_spec().unwrap().sublibrary, OperatorSubLibrary::regression());
    }
}
