//! The `itb` command-line tool.
//!
//! Every flag can also come from a JSON file passed with `--config`; keys are
//! the flag names in snake case, and flags given on the command line win.
//! Each run writes a [`RunManifest`] next to its main output, whether it
//! succeeds or not. Exit codes: 0 success, 2 invalid input or configuration,
//! 3 runtime failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::backend::{backend_from_id, DiffusionBackend, ToyEmbedder, ToyPerceptual, DEFAULT_BACKEND_ID};
use crate::bank::{load_bank, save_bank, InstructionBank, DEFAULT_SEGMENTS};
use crate::benchmark::{
    evaluate_suite, load_pair_images, load_pairs_dir, load_suite, make_synthetic_suite, BenchmarkSuite,
    SyntheticSpec, METADATA_FILE,
};
use crate::editor::{edit_image, EditConfig, DEFAULT_IMAGE_GUIDANCE, DEFAULT_SAMPLER_STEPS, DEFAULT_TEXT_GUIDANCE};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::initializer::{initialize, InitializerConfig, PhraseVocabulary, Side, DEFAULT_CAPTION_LEN, DEFAULT_ETA};
use crate::optimizer::{
    checkpoint_path, run_inversion, ExemplarSet, InversionConfig, OptimizerKind, DEFAULT_BATCH_SIZE,
    DEFAULT_LEARNING_RATE, DEFAULT_STEPS_PER_SEGMENT,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "itb", version, about = "Learn instruction banks from before/after pairs and edit with them")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Learn an instruction bank from exemplar pairs.
    Invert(InvertArgs),
    /// Edit an image with a trained bank.
    Edit(EditArgs),
    /// Score banks on a benchmark suite.
    Evaluate(EvaluateArgs),
    /// Show the phrase search behind the initial instruction.
    InitPreview(InitPreviewArgs),
    /// Write a procedurally generated benchmark suite.
    MakeSynthetic(MakeSyntheticArgs),
}

#[derive(Debug, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InvertArgs {
    /// Benchmark dataset directory (its train/ split is used) or a bare pairs directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output bank path (`.itb`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Initialize from this instruction instead of searching phrases.
    #[arg(long, conflicts_with = "no_init")]
    pub init_text: Option<String>,
    /// Initialize from the empty instruction.
    #[arg(long)]
    pub no_init: bool,
    #[arg(long)]
    pub j: Option<usize>,
    #[arg(long)]
    pub steps_per_segment: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub backend: Option<String>,
    /// `adaptive-moment` or `plain-sgd`.
    #[arg(long)]
    pub optimizer: Option<OptimizerKind>,
    /// Phrase vocabulary file, one phrase per line.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub r: Option<usize>,
    #[arg(long)]
    pub eta: Option<f64>,
    /// Save the bank to `<out>.ckpt` every 250 steps.
    #[arg(long)]
    pub checkpoint: bool,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Manifest path (default `<out>.run.json`).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditArgs {
    #[arg(long)]
    pub bank: Option<PathBuf>,
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Apply the bank only at timesteps at or above this value.
    #[arg(long)]
    pub switch_t: Option<usize>,
    #[arg(long)]
    pub s_t: Option<f64>,
    #[arg(long)]
    pub s_i: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub bench: Option<PathBuf>,
    /// Directory holding `<dataset name>.itb` banks.
    #[arg(long)]
    pub banks: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Fail when a dataset has no bank or cannot be evaluated.
    #[arg(long)]
    pub strict: bool,
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub switch_t: Option<usize>,
    #[arg(long)]
    pub s_t: Option<f64>,
    #[arg(long)]
    pub s_i: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitPreviewArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub r: Option<usize>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Manifest path (default `itb-init-preview.run.json`).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MakeSyntheticArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub test: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Keep only these datasets of the standard spec.
    #[arg(long, value_delimiter = ',')]
    pub datasets: Option<Vec<String>>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

/// Record of one command invocation.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config: Value,
    pub seed: Option<u64>,
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: BTreeMap<String, PathBuf>,
    pub results: Map<String, Value>,
    pub started_at: String,
    pub finished_at: String,
    pub exit_code: i32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunManifest {
    fn new(command: &str) -> Self {
        Self {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            started_at: now(),
            ..Default::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// `path` with `suffix` appended to its file name.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

/// Overlays non-default flags onto the `--config` file, if any.
fn resolve<T: Serialize + DeserializeOwned>(flags: &T, config: Option<&Path>) -> Result<T> {
    let mut merged = match config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Validation(vec![format!("{}: {e}", path.display())]))?;
            match serde_json::from_str::<Value>(&text) {
                Ok(Value::Object(map)) => map,
                Ok(_) => return Err(Error::Validation(vec![format!("{}: expected a JSON object", path.display())])),
                Err(e) => return Err(Error::Validation(vec![format!("{}: {e}", path.display())])),
            }
        }
        None => Map::new(),
    };
    if let Value::Object(given) = serde_json::to_value(flags)? {
        for (k, v) in given {
            if !v.is_null() && v != Value::Bool(false) {
                merged.insert(k, v);
            }
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| {
        let source = config.map_or_else(|| "flags".to_string(), |p| p.display().to_string());
        Error::Validation(vec![format!("{source}: {e}")])
    })
}

fn required<T: Clone>(value: &Option<T>, flag: &str) -> Result<T> {
    value
        .clone()
        .ok_or_else(|| Error::Validation(vec![format!("missing required option --{flag}")]))
}

/// Input problems are reported as validation failures.
fn input_error(e: Error) -> Error {
    if e.is_validation() {
        e
    } else {
        Error::Validation(vec![e.to_string()])
    }
}

fn exit_code(e: &Error) -> i32 {
    if e.is_validation() {
        EXIT_VALIDATION
    } else {
        EXIT_RUNTIME
    }
}

/// Training pairs from a benchmark dataset directory or a bare pairs directory.
pub fn load_training_pairs(dir: &Path) -> Result<Vec<(Image, Image)>> {
    let pairs_dir = if dir.join(METADATA_FILE).is_file() || dir.join("train").is_dir() {
        dir.join("train")
    } else {
        dir.to_path_buf()
    };
    let pairs = load_pairs_dir(&pairs_dir)?;
    load_pair_images(&pairs).map_err(input_error)
}

fn load_vocabulary(path: &Option<PathBuf>) -> Result<PhraseVocabulary> {
    match path {
        Some(p) => PhraseVocabulary::load(p).map_err(input_error),
        None => Ok(PhraseVocabulary::bundled()),
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => execute(cli.command),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                EXIT_VALIDATION
            } else {
                EXIT_OK
            }
        }
    }
}

pub fn execute(command: Command) -> i32 {
    let (name, explicit_manifest) = match &command {
        Command::Invert(a) => ("invert", a.manifest.clone()),
        Command::Edit(a) => ("edit", a.manifest.clone()),
        Command::Evaluate(a) => ("evaluate", a.manifest.clone()),
        Command::InitPreview(a) => ("init-preview", a.manifest.clone()),
        Command::MakeSynthetic(a) => ("make-synthetic", a.manifest.clone()),
    };
    let mut manifest = RunManifest::new(name);
    let mut manifest_path = explicit_manifest;
    let outcome = match command {
        Command::Invert(a) => cmd_invert(&a, &mut manifest, &mut manifest_path),
        Command::Edit(a) => cmd_edit(&a, &mut manifest, &mut manifest_path),
        Command::Evaluate(a) => cmd_evaluate(&a, &mut manifest, &mut manifest_path),
        Command::InitPreview(a) => cmd_init_preview(&a, &mut manifest),
        Command::MakeSynthetic(a) => cmd_make_synthetic(&a, &mut manifest, &mut manifest_path),
    };
    let code = match &outcome {
        Ok(code) => *code,
        Err(e) => {
            eprintln!("error: {e}");
            manifest.error = Some(e.to_string());
            exit_code(e)
        }
    };
    manifest.exit_code = code;
    manifest.finished_at = now();
    let path = manifest_path.unwrap_or_else(|| PathBuf::from(format!("itb-{name}.run.json")));
    let written = serde_json::to_string_pretty(&manifest)
        .map_err(Error::from)
        .and_then(|text| fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e)));
    if let Err(e) = written {
        eprintln!("error: could not write run manifest: {e}");
        return if code == EXIT_OK { EXIT_RUNTIME } else { code };
    }
    code
}

#[derive(Debug, Serialize)]
struct InvertResolved {
    data: PathBuf,
    out: PathBuf,
    init: &'static str,
    init_text: Option<String>,
    j: usize,
    steps_per_segment: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
    backend: String,
    optimizer: OptimizerKind,
    vocab: Option<PathBuf>,
    r: usize,
    eta: f64,
    checkpoint: bool,
}

fn cmd_invert(flags: &InvertArgs, manifest: &mut RunManifest, manifest_path: &mut Option<PathBuf>) -> Result<i32> {
    let args: InvertArgs = resolve(flags, flags.config.as_deref())?;
    if let Some(out) = &args.out {
        manifest_path.get_or_insert_with(|| sibling(out, ".run.json"));
    }
    if args.no_init && args.init_text.is_some() {
        return Err(Error::Validation(vec!["--init-text and --no-init are mutually exclusive".into()]));
    }
    let cfg = InvertResolved {
        data: required(&args.data, "data")?,
        out: required(&args.out, "out")?,
        init: if args.no_init {
            "none"
        } else if args.init_text.is_some() {
            "text"
        } else {
            "search"
        },
        init_text: args.init_text.clone(),
        j: args.j.unwrap_or(DEFAULT_SEGMENTS),
        steps_per_segment: args.steps_per_segment.unwrap_or(DEFAULT_STEPS_PER_SEGMENT),
        lr: args.lr.unwrap_or(DEFAULT_LEARNING_RATE),
        batch_size: args.batch_size.unwrap_or(DEFAULT_BATCH_SIZE),
        seed: args.seed.unwrap_or(0),
        backend: args.backend.clone().unwrap_or_else(|| DEFAULT_BACKEND_ID.into()),
        optimizer: args.optimizer.unwrap_or(OptimizerKind::AdaptiveMoment),
        vocab: args.vocab.clone(),
        r: args.r.unwrap_or(DEFAULT_CAPTION_LEN),
        eta: args.eta.unwrap_or(DEFAULT_ETA),
        checkpoint: args.checkpoint,
    };
    manifest.config = serde_json::to_value(&cfg)?;
    manifest.seed = Some(cfg.seed);
    manifest.inputs.insert("data".into(), cfg.data.clone());

    let inversion = InversionConfig {
        steps_per_segment: cfg.steps_per_segment,
        learning_rate: cfg.lr,
        batch_size: cfg.batch_size,
        j: cfg.j,
        seed: cfg.seed,
        optimizer: cfg.optimizer,
    };
    inversion.validate()?;
    let backend = backend_from_id(&cfg.backend)?;
    let (w, h) = backend.descriptor().image_resolution;
    let pairs: Vec<(Image, Image)> = load_training_pairs(&cfg.data)?
        .into_iter()
        .map(|(b, a)| (b.resized(w, h), a.resized(w, h)))
        .collect();
    let exemplars = ExemplarSet::new(pairs)?;

    let init_text = match cfg.init {
        "none" => None,
        "text" => cfg.init_text.clone(),
        _ => {
            let vocab = load_vocabulary(&cfg.vocab)?;
            let outcome = initialize(
                &exemplars.before(),
                &exemplars.after(),
                &vocab,
                InitializerConfig { r: cfg.r, eta: cfg.eta },
                &ToyEmbedder::new(),
            )?;
            manifest.results.insert("p_x".into(), json!(outcome.p_x));
            manifest.results.insert("p_y".into(), json!(outcome.p_y));
            outcome.instruction_text
        }
    };
    eprintln!(
        "initial instruction: {}",
        init_text.as_deref().unwrap_or("NONE")
    );

    let ckpt = cfg.checkpoint.then(|| checkpoint_path(&cfg.out));
    let (bank, trace) = run_inversion(backend.as_ref(), &exemplars, init_text.as_deref(), &inversion, ckpt.as_deref())?;
    save_bank(&bank, &cfg.out)?;
    let trace_path = sibling(&cfg.out, ".trace.jsonl");
    trace.save_jsonl(&trace_path)?;
    if let Some(ckpt) = &ckpt {
        let _ = fs::remove_file(ckpt);
    }

    manifest.outputs.insert("bank".into(), cfg.out.clone());
    manifest.outputs.insert("trace".into(), trace_path);
    manifest.results.insert("init_text".into(), json!(init_text.as_deref().unwrap_or("NONE")));
    manifest.results.insert("m".into(), json!(bank.m()));
    manifest.results.insert("backend_id".into(), json!(bank.backend_id()));
    if let Some(last) = trace.records.last() {
        manifest.results.insert("final_loss".into(), json!(last.loss));
    }
    println!("wrote {}", cfg.out.display());
    Ok(EXIT_OK)
}

fn edit_config(
    backend: &dyn DiffusionBackend,
    s_t: Option<f64>,
    s_i: Option<f64>,
    steps: Option<usize>,
    seed: Option<u64>,
    switch_t: Option<usize>,
) -> Result<EditConfig> {
    let config = EditConfig {
        s_t: s_t.unwrap_or(DEFAULT_TEXT_GUIDANCE),
        s_i: s_i.unwrap_or(DEFAULT_IMAGE_GUIDANCE),
        steps: steps.unwrap_or(DEFAULT_SAMPLER_STEPS),
        seed: seed.unwrap_or(0),
        switch_t,
        ..EditConfig::for_backend(backend)
    };
    config.validate(backend.descriptor().train_timesteps)?;
    Ok(config)
}

fn load_bank_with_backend(path: &Path) -> Result<(InstructionBank, Box<dyn DiffusionBackend>)> {
    let bank = load_bank(path).map_err(input_error)?;
    let backend = backend_from_id(bank.backend_id())?;
    bank.check_backend(backend.as_ref())?;
    if !bank.is_trained() {
        return Err(Error::UntrainedBank);
    }
    Ok((bank, backend))
}

/// Edits at the backend's resolution and resizes back to the input size.
fn apply_bank(backend: &dyn DiffusionBackend, bank: &InstructionBank, image: &Image, config: &EditConfig) -> Result<Image> {
    let out = edit_image(backend, bank, image, config)?;
    Ok(out.resized(image.width(), image.height()))
}

fn cmd_edit(flags: &EditArgs, manifest: &mut RunManifest, manifest_path: &mut Option<PathBuf>) -> Result<i32> {
    let args: EditArgs = resolve(flags, flags.config.as_deref())?;
    if let Some(out) = &args.out {
        manifest_path.get_or_insert_with(|| sibling(out, ".run.json"));
    }
    let bank_path = required(&args.bank, "bank")?;
    let image_path = required(&args.image, "image")?;
    let out = required(&args.out, "out")?;
    manifest.inputs.insert("bank".into(), bank_path.clone());
    manifest.inputs.insert("image".into(), image_path.clone());

    let (bank, backend) = load_bank_with_backend(&bank_path)?;
    let config = edit_config(backend.as_ref(), args.s_t, args.s_i, args.steps, args.seed, args.switch_t)?;
    manifest.config = serde_json::to_value(&config)?;
    manifest.seed = Some(config.seed);
    let image = Image::load(&image_path).map_err(input_error)?;
    let edited = apply_bank(backend.as_ref(), &bank, &image, &config)?;
    edited.save_png(&out)?;
    manifest.outputs.insert("image".into(), out.clone());
    println!("wrote {}", out.display());
    Ok(EXIT_OK)
}

fn cmd_evaluate(flags: &EvaluateArgs, manifest: &mut RunManifest, manifest_path: &mut Option<PathBuf>) -> Result<i32> {
    let args: EvaluateArgs = resolve(flags, flags.config.as_deref())?;
    if let Some(report) = &args.report {
        manifest_path.get_or_insert_with(|| sibling(report, ".run.json"));
    }
    let bench = required(&args.bench, "bench")?;
    let banks_dir = required(&args.banks, "banks")?;
    let report_path = required(&args.report, "report")?;
    manifest.inputs.insert("bench".into(), bench.clone());
    manifest.inputs.insert("banks".into(), banks_dir.clone());

    let suite = load_suite(&bench)?;
    let mut banks = BTreeMap::new();
    let mut skipped = Vec::new();
    let mut config = None;
    for ds in &suite.datasets {
        let path = banks_dir.join(format!("{}.itb", ds.name));
        if !path.is_file() {
            eprintln!("warning: no bank for dataset `{}` ({})", ds.name, path.display());
            skipped.push(ds.name.clone());
            continue;
        }
        let (bank, backend) = load_bank_with_backend(&path)?;
        if config.is_none() {
            config = Some(edit_config(backend.as_ref(), args.s_t, args.s_i, args.steps, args.seed, args.switch_t)?);
        }
        banks.insert(ds.name.clone(), (bank, backend));
    }
    if args.strict && !skipped.is_empty() {
        return Err(Error::Validation(
            skipped.iter().map(|n| format!("dataset `{n}` has no bank")).collect(),
        ));
    }
    let config = match config {
        Some(c) => c,
        None => {
            let backend = backend_from_id(DEFAULT_BACKEND_ID)?;
            edit_config(backend.as_ref(), args.s_t, args.s_i, args.steps, args.seed, args.switch_t)?
        }
    };
    manifest.config = json!({
        "edit": config,
        "strict": args.strict,
        "method": args.method,
    });
    manifest.seed = Some(config.seed);

    let evaluated = BenchmarkSuite {
        root: suite.root.clone(),
        datasets: suite.datasets.iter().filter(|d| banks.contains_key(&d.name)).cloned().collect(),
    };
    let mut report = evaluate_suite(
        &evaluated,
        |ds, image| {
            let (bank, backend) = &banks[&ds.name];
            apply_bank(backend.as_ref(), bank, image, &config)
        },
        &ToyEmbedder::new(),
        &ToyPerceptual::new(0),
    );
    report.skipped = skipped;
    fs::write(&report_path, report.to_json()? + "\n").map_err(|e| Error::io(&report_path, e))?;
    manifest.outputs.insert("report".into(), report_path.clone());
    print!("{}", report.table(args.method.as_deref().unwrap_or("Ours")));
    let failed: Vec<String> = report
        .failed()
        .map(|d| format!("{}: {}", d.name, d.error.as_deref().unwrap_or_default()))
        .collect();
    for f in &failed {
        eprintln!("warning: dataset {f}");
    }
    manifest.results.insert("evaluated".into(), json!(report.datasets.len() - failed.len()));
    manifest.results.insert("failed".into(), json!(failed.len()));
    manifest.results.insert("skipped".into(), json!(report.skipped.len()));
    if args.strict && !failed.is_empty() {
        return Ok(EXIT_RUNTIME);
    }
    Ok(EXIT_OK)
}

fn cmd_init_preview(flags: &InitPreviewArgs, manifest: &mut RunManifest) -> Result<i32> {
    let args: InitPreviewArgs = resolve(flags, flags.config.as_deref())?;
    let data = required(&args.data, "data")?;
    let config = InitializerConfig {
        r: args.r.unwrap_or(DEFAULT_CAPTION_LEN),
        eta: args.eta.unwrap_or(DEFAULT_ETA),
    };
    manifest.config = json!({ "data": data, "vocab": args.vocab, "r": config.r, "eta": config.eta });
    manifest.inputs.insert("data".into(), data.clone());
    let pairs = load_training_pairs(&data)?;
    let vocab = load_vocabulary(&args.vocab)?;
    let (before, after): (Vec<Image>, Vec<Image>) = pairs.into_iter().unzip();
    let outcome = initialize(&before, &after, &vocab, config, &ToyEmbedder::new())?;
    print!("{}", format_init_preview(&outcome, config));
    manifest.results.insert("p_x".into(), json!(outcome.p_x));
    manifest.results.insert("p_y".into(), json!(outcome.p_y));
    manifest.results.insert(
        "instruction".into(),
        json!(outcome.instruction_text.as_deref().unwrap_or("NONE")),
    );
    Ok(EXIT_OK)
}

/// Human-readable audit of an initializer run.
pub fn format_init_preview(outcome: &crate::initializer::InitOutcome, config: InitializerConfig) -> String {
    let mut out = format!("r = {}, eta = {}\n", config.r, config.eta);
    for (side, label) in [(Side::X, "CAP_x (before)"), (Side::Y, "CAP_y (after)")] {
        out.push_str(&format!("{label}:\n"));
        for s in outcome.scores.iter().filter(|s| s.side == side) {
            out.push_str(&format!(
                "  {:<24} sim_x {:>8.4}  sim_y {:>8.4}  sensitivity {:>8.4}\n",
                s.phrase, s.similarity_x, s.similarity_y, s.sensitivity
            ));
        }
    }
    let show = |p: &Option<String>| p.clone().unwrap_or_else(|| "(none)".into());
    out.push_str(&format!("p_x: {}\n", show(&outcome.p_x)));
    out.push_str(&format!("p_y: {}\n", show(&outcome.p_y)));
    out.push_str(&format!(
        "instruction: {}\n",
        outcome.instruction_text.as_deref().unwrap_or("NONE")
    ));
    out
}

fn cmd_make_synthetic(
    flags: &MakeSyntheticArgs,
    manifest: &mut RunManifest,
    manifest_path: &mut Option<PathBuf>,
) -> Result<i32> {
    let args: MakeSyntheticArgs = resolve(flags, flags.config.as_deref())?;
    let out = required(&args.out, "out")?;
    let seed = args.seed.unwrap_or(0);
    let mut spec = SyntheticSpec::standard(args.train.unwrap_or(4), args.test.unwrap_or(2));
    if let Some(names) = &args.datasets {
        let unknown: Vec<String> = names
            .iter()
            .filter(|n| !spec.datasets.iter().any(|d| &d.name == *n))
            .map(|n| format!("unknown synthetic dataset `{n}`"))
            .collect();
        if !unknown.is_empty() {
            return Err(Error::Validation(unknown));
        }
        spec.datasets.retain(|d| names.contains(&d.name));
    }
    manifest.config = serde_json::to_value(&spec)?;
    manifest.seed = Some(seed);
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    manifest_path.get_or_insert_with(|| out.join("..").join(format!(
        "{}.run.json",
        out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "synthetic".into())
    )));
    make_synthetic_suite(&out, &spec, seed)?;
    manifest.outputs.insert("suite".into(), out.clone());
    println!("wrote {} datasets to {}", spec.datasets.len(), out.display());
    Ok(EXIT_OK)
}
