//! Paired-edit benchmark suites: on-disk layout, validation, synthetic
//! fixtures, evaluation and Table 1 style reports.
//!
//! A suite root holds one directory per editing effect:
//!
//! ```text
//! root/<dataset>/metadata.json   {"name", "category": "local"|"global", "instruction"}
//! root/<dataset>/train/before_000.png, after_000.png, ...
//! root/<dataset>/test/before_000.png, after_000.png, ...
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{Embedder, PerceptualFeatures};
use crate::error::{Error, Result};
use crate::image::{Image, LUMA_WEIGHTS};
use crate::metrics::{self, MetricsReport};

pub const DEFAULT_TRAIN_PAIRS: usize = 10;
pub const DEFAULT_TEST_PAIRS: usize = 5;
pub const METADATA_FILE: &str = "metadata.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Global,
    Local,
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "global" => Ok(Category::Global),
            "local" => Ok(Category::Local),
            other => Err(Error::InvalidArgument(format!(
                "category `{other}` is neither `local` nor `global`"
            ))),
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::Global => "global",
            Category::Local => "local",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImagePair {
    pub before: PathBuf,
    pub after: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkDataset {
    pub name: String,
    pub category: Category,
    pub instruction_text: String,
    pub train_pairs: Vec<ImagePair>,
    pub test_pairs: Vec<ImagePair>,
}

impl BenchmarkDataset {
    pub fn load_train(&self) -> Result<Vec<(Image, Image)>> {
        load_pair_images(&self.train_pairs)
    }

    pub fn load_test(&self) -> Result<Vec<(Image, Image)>> {
        load_pair_images(&self.test_pairs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSuite {
    pub root: PathBuf,
    pub datasets: Vec<BenchmarkDataset>,
}

impl BenchmarkSuite {
    pub fn dataset(&self, name: &str) -> Option<&BenchmarkDataset> {
        self.datasets.iter().find(|d| d.name == name)
    }

    pub fn count(&self, category: Category) -> usize {
        self.datasets.iter().filter(|d| d.category == category).count()
    }
}

pub fn load_pair_images(pairs: &[ImagePair]) -> Result<Vec<(Image, Image)>> {
    pairs
        .iter()
        .map(|p| Ok((Image::load(&p.before)?, Image::load(&p.after)?)))
        .collect()
}

#[derive(Deserialize)]
struct Metadata {
    name: String,
    category: String,
    instruction: String,
}

#[derive(Serialize)]
struct MetadataOut<'a> {
    name: &'a str,
    category: Category,
    instruction: &'a str,
}

fn parse_pair_name(file: &str) -> Option<(bool, &str)> {
    let stem = file.strip_suffix(".png")?;
    let (is_before, idx) = if let Some(idx) = stem.strip_prefix("before_") {
        (true, idx)
    } else {
        (false, stem.strip_prefix("after_")?)
    };
    (!idx.is_empty() && idx.bytes().all(|b| b.is_ascii_digit())).then_some((is_before, idx))
}

/// Collects `before_NNN.png` / `after_NNN.png` pairs from `dir`, appending one
/// message per problem to `errors`. Every image is decoded to check it.
fn scan_pairs(dir: &Path, errors: &mut Vec<String>) -> Vec<ImagePair> {
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) => {
            errors.push(format!("{}: {e}", dir.display()));
            return Vec::new();
        }
    };
    let mut befores = BTreeMap::new();
    let mut afters = BTreeMap::new();
    for entry in entries.flatten() {
        let file = entry.file_name().to_string_lossy().into_owned();
        if let Some((is_before, idx)) = parse_pair_name(&file) {
            let side = if is_before { &mut befores } else { &mut afters };
            side.insert(idx.to_string(), entry.path());
        }
    }
    let indices: BTreeSet<&String> = befores.keys().chain(afters.keys()).collect();
    let mut pairs = Vec::new();
    for idx in indices {
        match (befores.get(idx), afters.get(idx)) {
            (Some(b), Some(a)) => {
                let dims = |p: &Path, errors: &mut Vec<String>| match Image::load(p) {
                    Ok(img) => Some((img.width(), img.height())),
                    Err(e) => {
                        errors.push(format!("{}: unreadable image: {e}", p.display()));
                        None
                    }
                };
                if let (Some(db), Some(da)) = (dims(b, errors), dims(a, errors)) {
                    if db != da {
                        errors.push(format!(
                            "{}: pair {idx} sizes differ ({}×{} before, {}×{} after)",
                            dir.display(),
                            db.0,
                            db.1,
                            da.0,
                            da.1
                        ));
                    }
                }
                pairs.push(ImagePair {
                    before: b.clone(),
                    after: a.clone(),
                });
            }
            (Some(b), None) => errors.push(format!(
                "{}: pair {idx} has before_{idx}.png but no after_{idx}.png",
                b.display()
            )),
            (None, Some(a)) => errors.push(format!(
                "{}: pair {idx} has after_{idx}.png but no before_{idx}.png",
                a.display()
            )),
            (None, None) => unreachable!(),
        }
    }
    if pairs.is_empty() && errors.is_empty() {
        errors.push(format!("{}: no before/after pairs", dir.display()));
    }
    pairs
}

/// Loads and validates a bare directory of `before_NNN.png` / `after_NNN.png`.
pub fn load_pairs_dir(dir: &Path) -> Result<Vec<ImagePair>> {
    let mut errors = Vec::new();
    let pairs = scan_pairs(dir, &mut errors);
    if errors.is_empty() {
        Ok(pairs)
    } else {
        Err(Error::Validation(errors))
    }
}

fn load_dataset(dir: &Path, errors: &mut Vec<String>) -> Option<BenchmarkDataset> {
    let meta_path = dir.join(METADATA_FILE);
    let before = errors.len();
    let meta = match fs::read_to_string(&meta_path) {
        Ok(text) => match serde_json::from_str::<Metadata>(&text) {
            Ok(m) => Some(m),
            Err(e) => {
                errors.push(format!("{}: malformed metadata: {e}", meta_path.display()));
                None
            }
        },
        Err(e) => {
            errors.push(format!("{}: missing metadata: {e}", meta_path.display()));
            None
        }
    };
    let category = meta.as_ref().and_then(|m| match m.category.parse::<Category>() {
        Ok(c) => Some(c),
        Err(e) => {
            errors.push(format!("{}: {e}", meta_path.display()));
            None
        }
    });
    let train_pairs = scan_pairs(&dir.join("train"), errors);
    let test_pairs = scan_pairs(&dir.join("test"), errors);
    let meta = meta?;
    if meta.name.trim().is_empty() {
        errors.push(format!("{}: empty dataset name", meta_path.display()));
    }
    (errors.len() == before).then(|| BenchmarkDataset {
        name: meta.name,
        category: category.expect("category parsed when no errors were added"),
        instruction_text: meta.instruction,
        train_pairs,
        test_pairs,
    })
}

/// Loads every dataset under `root`, reporting all problems at once.
pub fn load_suite(root: &Path) -> Result<BenchmarkSuite> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs: Vec<PathBuf> = entries
        .flatten()
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut errors = Vec::new();
    let mut datasets: Vec<BenchmarkDataset> = Vec::new();
    for dir in &dirs {
        if let Some(ds) = load_dataset(dir, &mut errors) {
            if datasets.iter().any(|d| d.name == ds.name) {
                errors.push(format!("{}: duplicate dataset name `{}`", dir.display(), ds.name));
            } else {
                datasets.push(ds);
            }
        }
    }
    if datasets.is_empty() && errors.is_empty() {
        errors.push(format!("{}: no datasets", root.display()));
    }
    if !errors.is_empty() {
        return Err(Error::Validation(errors));
    }
    Ok(BenchmarkSuite {
        root: root.to_path_buf(),
        datasets,
    })
}

/// An exactly known edit applied to 8-bit samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyntheticEdit {
    /// Adds `levels` to one channel, saturating at 0 and 255.
    ChannelShift { channel: usize, levels: i16 },
    /// Replaces every pixel with its rounded BT.601 luma.
    Grayscale,
    /// Paints a block-aligned square covering a quarter of the image.
    RegionRecolor { rgb: [u8; 3] },
}

impl SyntheticEdit {
    pub fn category(&self) -> Category {
        match self {
            SyntheticEdit::RegionRecolor { .. } => Category::Local,
            _ => Category::Global,
        }
    }

    pub fn instruction(&self) -> String {
        match *self {
            SyntheticEdit::ChannelShift { channel, levels } => {
                let color = ["red", "green", "blue"].get(channel).copied().unwrap_or("tinted");
                if levels >= 0 {
                    format!("make it more {color}")
                } else {
                    format!("make it less {color}")
                }
            }
            SyntheticEdit::Grayscale => "make it black and white".into(),
            SyntheticEdit::RegionRecolor { .. } => "paint a square patch".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub name: String,
    pub edit: SyntheticEdit,
    pub train: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub datasets: Vec<SyntheticDataset>,
    /// Square image side; images are made of 2×2 pixel blocks.
    pub size: usize,
}

impl SyntheticSpec {
    /// Red shift, grayscale and square recolor datasets.
    pub fn standard(train: usize, test: usize) -> Self {
        let ds = |name: &str, edit| SyntheticDataset {
            name: name.into(),
            edit,
            train,
            test,
        };
        Self {
            datasets: vec![
                ds("red_shift", SyntheticEdit::ChannelShift { channel: 0, levels: 77 }),
                ds("grayscale", SyntheticEdit::Grayscale),
                ds("blue_square", SyntheticEdit::RegionRecolor { rgb: [40, 60, 220] }),
            ],
            size: 16,
        }
    }

    pub fn single(name: &str, edit: SyntheticEdit, train: usize, test: usize) -> Self {
        Self {
            datasets: vec![SyntheticDataset {
                name: name.into(),
                edit,
                train,
                test,
            }],
            size: 16,
        }
    }
}

fn synthetic_pair(edit: SyntheticEdit, size: usize, rng: &mut ChaCha8Rng) -> (image::RgbImage, image::RgbImage) {
    let blocks = size.div_ceil(2);
    let vals: Vec<u8> = (0..blocks * blocks * 3).map(|_| rng.random_range(13..=166)).collect();
    let before = image::RgbImage::from_fn(size as u32, size as u32, |x, y| {
        let b = (y as usize / 2) * blocks + x as usize / 2;
        image::Rgb([vals[b * 3], vals[b * 3 + 1], vals[b * 3 + 2]])
    });
    let mut after = before.clone();
    match edit {
        SyntheticEdit::ChannelShift { channel, levels } => {
            for px in after.pixels_mut() {
                if let Some(v) = px.0.get_mut(channel) {
                    *v = (i16::from(*v) + levels).clamp(0, 255) as u8;
                }
            }
        }
        SyntheticEdit::Grayscale => {
            for px in after.pixels_mut() {
                let y: f64 = px.0.iter().zip(LUMA_WEIGHTS).map(|(&v, w)| f64::from(v) * w).sum();
                let y = y.round().clamp(0.0, 255.0) as u8;
                px.0 = [y, y, y];
            }
        }
        SyntheticEdit::RegionRecolor { rgb } => {
            let side = (blocks / 2).max(1);
            let x0 = 2 * rng.random_range(0..=blocks - side);
            let y0 = 2 * rng.random_range(0..=blocks - side);
            for y in y0..(y0 + 2 * side).min(size) {
                for x in x0..(x0 + 2 * side).min(size) {
                    after.put_pixel(x as u32, y as u32, image::Rgb(rgb));
                }
            }
        }
    }
    (before, after)
}

fn write_png(img: &image::RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Writes a procedurally generated suite under `root`. Output is a pure
/// function of `spec` and `seed`.
pub fn make_synthetic_suite(root: &Path, spec: &SyntheticSpec, seed: u64) -> Result<()> {
    if spec.size < 2 {
        return Err(Error::InvalidArgument("synthetic image size must be at least 2".into()));
    }
    for (k, ds) in spec.datasets.iter().enumerate() {
        if ds.train == 0 || ds.test == 0 {
            return Err(Error::InvalidArgument(format!(
                "synthetic dataset `{}` needs at least one train and one test pair",
                ds.name
            )));
        }
        let dir = root.join(&ds.name);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        for (split, count) in [("train", ds.train), ("test", ds.test)] {
            let split_dir = dir.join(split);
            fs::create_dir_all(&split_dir).map_err(|e| Error::io(&split_dir, e))?;
            for i in 0..count {
                let (before, after) = synthetic_pair(ds.edit, spec.size, &mut rng);
                write_png(&before, &split_dir.join(format!("before_{i:03}.png")))?;
                write_png(&after, &split_dir.join(format!("after_{i:03}.png")))?;
            }
        }
        let meta = MetadataOut {
            name: &ds.name,
            category: ds.edit.category(),
            instruction: &ds.edit.instruction(),
        };
        let meta_path = dir.join(METADATA_FILE);
        fs::write(&meta_path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&meta_path, e))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetResult {
    pub name: String,
    pub category: Category,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Per-dataset results plus unweighted category means, in Table 1 order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub global: Option<MetricsReport>,
    pub local: Option<MetricsReport>,
    pub overall: Option<MetricsReport>,
    pub datasets: Vec<DatasetResult>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped: Vec<String>,
}

impl EvaluationReport {
    pub fn failed(&self) -> impl Iterator<Item = &DatasetResult> {
        self.datasets.iter().filter(|d| d.error.is_some())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Table 1 layout with a single method row per group.
    pub fn table(&self, method: &str) -> String {
        let row = |m: &Option<MetricsReport>| {
            vec![TableRow {
                method: method.to_string(),
                scores: m.map(Scores::from),
            }]
        };
        render_table(&[
            ("TOP-Global".to_string(), row(&self.global)),
            ("TOP-Local".to_string(), row(&self.local)),
            ("TOP-Bench".to_string(), row(&self.overall)),
        ])
    }
}

fn mean_report(reports: &[MetricsReport]) -> Option<MetricsReport> {
    if reports.is_empty() {
        return None;
    }
    let n = reports.len() as f64;
    let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    Some(MetricsReport {
        psnr_db: mean(|r| r.psnr_db),
        ssim: mean(|r| r.ssim),
        lpips: mean(|r| r.lpips),
        clip_direction: mean(|r| r.clip_direction),
        count: reports.len(),
    })
}

fn evaluate_dataset<F>(
    dataset: &BenchmarkDataset,
    edit_fn: &F,
    embedder: &dyn Embedder,
    provider: &dyn PerceptualFeatures,
) -> Result<MetricsReport>
where
    F: Fn(&BenchmarkDataset, &Image) -> Result<Image> + Sync,
{
    let train = dataset.load_train()?;
    let test = dataset.load_test()?;
    let mut inputs = Vec::with_capacity(test.len());
    let mut outputs = Vec::with_capacity(test.len());
    let (mut psnr, mut ssim, mut lpips) = (0.0, 0.0, 0.0);
    for (before, after) in &test {
        let out = edit_fn(dataset, before)?;
        psnr += metrics::psnr(&out, after)?;
        ssim += metrics::ssim(&out, after)?;
        lpips += metrics::lpips(&out, after, provider)?;
        inputs.push(before.clone());
        outputs.push(out);
    }
    let (ref_before, ref_after): (Vec<Image>, Vec<Image>) = train.into_iter().unzip();
    let clip_direction = match metrics::clip_directional(&inputs, &outputs, &ref_before, &ref_after, embedder) {
        Err(Error::DegenerateDirection(_)) => 1.0,
        other => other?,
    };
    let n = test.len() as f64;
    Ok(MetricsReport {
        psnr_db: psnr / n,
        ssim: ssim / n,
        lpips: lpips / n,
        clip_direction,
        count: test.len(),
    })
}

/// Runs `edit_fn` over every test input and scores it against the
/// ground-truth after-images. Datasets are evaluated concurrently; a dataset
/// whose edit or scoring fails is recorded with its error and excluded from
/// the aggregates. Results are sorted by name so dataset order never changes
/// a reported number.
pub fn evaluate_suite<F>(
    suite: &BenchmarkSuite,
    edit_fn: F,
    embedder: &dyn Embedder,
    provider: &dyn PerceptualFeatures,
) -> EvaluationReport
where
    F: Fn(&BenchmarkDataset, &Image) -> Result<Image> + Sync,
{
    let mut results: Vec<DatasetResult> = std::thread::scope(|scope| {
        let handles: Vec<_> = suite
            .datasets
            .iter()
            .map(|ds| {
                let edit_fn = &edit_fn;
                scope.spawn(move || (ds, evaluate_dataset(ds, edit_fn, embedder, provider)))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                let (ds, outcome) = h.join().expect("dataset evaluation panicked");
                DatasetResult {
                    name: ds.name.clone(),
                    category: ds.category,
                    error: outcome.as_ref().err().map(ToString::to_string),
                    metrics: outcome.ok(),
                }
            })
            .collect()
    });
    results.sort_by(|a, b| a.name.cmp(&b.name));
    let collect = |cat: Option<Category>| -> Vec<MetricsReport> {
        results
            .iter()
            .filter(|r| cat.is_none_or(|c| r.category == c))
            .filter_map(|r| r.metrics)
            .collect()
    };
    EvaluationReport {
        global: mean_report(&collect(Some(Category::Global))),
        local: mean_report(&collect(Some(Category::Local))),
        overall: mean_report(&collect(None)),
        datasets: results,
        skipped: Vec::new(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub psnr: f64,
    pub ssim: f64,
    pub lpips: f64,
    pub direct: f64,
}

impl From<MetricsReport> for Scores {
    fn from(r: MetricsReport) -> Self {
        Self {
            psnr: r.psnr_db,
            ssim: r.ssim,
            lpips: r.lpips,
            direct: r.clip_direction,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub method: String,
    /// `None` renders as dashes (no datasets in the group).
    pub scores: Option<Scores>,
}

pub const TABLE_HEADER: [&str; 6] = ["Datasets", "Method", "PSNR ↑", "SSIM ↑", "LPIPS ↓", "Direct. ↓"];

/// Plain-text table with the dataset group named on its first row only.
/// PSNR is printed with two decimals, the other columns with four.
pub fn render_table(groups: &[(String, Vec<TableRow>)]) -> String {
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut rules = Vec::new();
    for (g, (label, group_rows)) in groups.iter().enumerate() {
        if g > 0 {
            rules.push(rows.len());
        }
        for (i, row) in group_rows.iter().enumerate() {
            let mut cells = vec![if i == 0 { label.clone() } else { String::new() }, row.method.clone()];
            match row.scores {
                Some(s) => cells.extend([
                    format!("{:.2}", s.psnr),
                    format!("{:.4}", s.ssim),
                    format!("{:.4}", s.lpips),
                    format!("{:.4}", s.direct),
                ]),
                None => cells.extend(std::iter::repeat_n("-".to_string(), 4)),
            }
            rows.push(cells);
        }
    }
    let header: Vec<String> = TABLE_HEADER.iter().map(|s| s.to_string()).collect();
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in &rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: &[String]| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        padded.join(" | ").trim_end().to_string()
    };
    let rule = widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().join("-+-");
    let mut out = vec![line(&header), rule.clone()];
    for (i, r) in rows.iter().enumerate() {
        if rules.contains(&i) {
            out.push(rule.clone());
        }
        out.push(line(r));
    }
    out.join("\n") + "\n"
}
