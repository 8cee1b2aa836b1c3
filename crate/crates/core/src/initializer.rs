//! Transformation-oriented instruction initialization.
//!
//! Each image set gets a caption of the `r` vocabulary phrases most similar
//! to it. Every caption phrase is scored by its sensitivity, the difference
//! between its mean similarity to its own set and to the other set. The most
//! sensitive phrase survives if it reaches `eta`. The surviving phrases fill
//! the template `turn <p_x> into <p_y>`.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::Embedder;
use crate::error::{Error, Result};
use crate::image::Image;

pub const DEFAULT_CAPTION_LEN: usize = 5;
pub const DEFAULT_ETA: f64 = 0.15;

/// Phrase list bundled with the crate.
pub const BUNDLED_VOCABULARY: &str = include_str!("../assets/vocabulary.txt");

#[derive(Debug, Clone, PartialEq)]
pub struct PhraseVocabulary {
    phrases: Vec<String>,
    source_path: Option<PathBuf>,
}

impl PhraseVocabulary {
    /// One phrase per line; blank lines and duplicates are dropped, first
    /// occurrence wins.
    pub fn parse(text: &str, source_path: Option<PathBuf>) -> Result<Self> {
        let mut seen = HashSet::new();
        let phrases: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .filter(|l| seen.insert(l.to_string()))
            .map(str::to_owned)
            .collect();
        if phrases.is_empty() {
            return Err(Error::InvalidArgument("phrase vocabulary is empty".into()));
        }
        Ok(Self { phrases, source_path })
    }

    pub fn from_phrases<S: AsRef<str>>(phrases: &[S]) -> Result<Self> {
        let text = phrases.iter().map(AsRef::as_ref).collect::<Vec<_>>().join("\n");
        Self::parse(&text, None)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, Some(path.to_path_buf()))
    }

    pub fn bundled() -> Self {
        Self::parse(BUNDLED_VOCABULARY, None).expect("bundled vocabulary is nonempty")
    }

    pub fn phrases(&self) -> &[String] {
        &self.phrases
    }

    pub fn source_path(&self) -> Option<&Path> {
        self.source_path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    X,
    Y,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::X => "x",
            Side::Y => "y",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhraseScore {
    pub side: Side,
    pub phrase: String,
    pub similarity_x: f64,
    pub similarity_y: f64,
    /// `similarity_x - similarity_y` for side x, mirrored for side y.
    pub sensitivity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitOutcome {
    pub p_x: Option<String>,
    pub p_y: Option<String>,
    /// `None` means initialize from the empty instruction.
    pub instruction_text: Option<String>,
    pub scores: Vec<PhraseScore>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitializerConfig {
    pub r: usize,
    pub eta: f64,
}

impl Default for InitializerConfig {
    fn default() -> Self {
        Self {
            r: DEFAULT_CAPTION_LEN,
            eta: DEFAULT_ETA,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("embedding dims {} vs {}", a.len(), b.len())));
    }
    let denom = dot(a, a).sqrt() * dot(b, b).sqrt();
    if denom == 0.0 {
        return Err(Error::InvalidArgument("zero-norm embedding".into()));
    }
    Ok((dot(a, b) / denom).clamp(-1.0, 1.0))
}

/// Embeds every image of a set once.
fn embed_set(images: &[Image], embedder: &dyn Embedder) -> Result<Vec<Vec<f64>>> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("image set is empty".into()));
    }
    images.iter().map(|img| embedder.embed_image(img)).collect()
}

fn mean_cosine(text: &[f64], image_embeddings: &[Vec<f64>]) -> Result<f64> {
    let total = image_embeddings
        .iter()
        .map(|e| cosine(text, e))
        .sum::<Result<f64>>()?;
    Ok(total / image_embeddings.len() as f64)
}

/// Mean cosine similarity between a phrase and each image of a set.
pub fn set_similarity(phrase: &str, images: &[Image], embedder: &dyn Embedder) -> Result<f64> {
    let set = embed_set(images, embedder)?;
    mean_cosine(&embedder.embed_text(phrase)?, &set)
}

fn top_phrases(vocab: &PhraseVocabulary, scores: &[f64], r: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..vocab.len()).collect();
    // Stable sort keeps vocabulary order among equal scores.
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order.truncate(r);
    order
}

fn check_caption_len(vocab: &PhraseVocabulary, r: usize) -> Result<()> {
    if r == 0 {
        return Err(Error::InvalidArgument("caption length r must be at least 1".into()));
    }
    if vocab.len() < r {
        return Err(Error::InvalidArgument(format!(
            "vocabulary has {} phrases, caption needs {r}",
            vocab.len()
        )));
    }
    Ok(())
}

/// The `r` phrases most similar to the image set, best first; ties keep
/// vocabulary order.
pub fn caption_search(
    images: &[Image],
    vocab: &PhraseVocabulary,
    r: usize,
    embedder: &dyn Embedder,
) -> Result<Vec<String>> {
    check_caption_len(vocab, r)?;
    let set = embed_set(images, embedder)?;
    let scores = vocab
        .phrases()
        .iter()
        .map(|p| mean_cosine(&embedder.embed_text(p)?, &set))
        .collect::<Result<Vec<_>>>()?;
    Ok(top_phrases(vocab, &scores, r)
        .into_iter()
        .map(|i| vocab.phrases()[i].clone())
        .collect())
}

/// Picks the most sensitive caption phrase for one side, or `None` when the
/// best sensitivity falls below `eta`. Returns the audit scores either way.
pub fn unique_phrase(
    side: Side,
    before: &[Image],
    after: &[Image],
    vocab: &PhraseVocabulary,
    config: InitializerConfig,
    embedder: &dyn Embedder,
) -> Result<(Option<String>, Vec<PhraseScore>)> {
    check_caption_len(vocab, config.r)?;
    let set_x = embed_set(before, embedder)?;
    let set_y = embed_set(after, embedder)?;
    let text: Vec<Vec<f64>> = vocab
        .phrases()
        .iter()
        .map(|p| embedder.embed_text(p))
        .collect::<Result<_>>()?;

    let own = match side {
        Side::X => &set_x,
        Side::Y => &set_y,
    };
    let own_scores = text.iter().map(|t| mean_cosine(t, own)).collect::<Result<Vec<_>>>()?;
    let caption = top_phrases(vocab, &own_scores, config.r);

    let mut scores = Vec::with_capacity(caption.len());
    for i in caption {
        let similarity_x = mean_cosine(&text[i], &set_x)?;
        let similarity_y = mean_cosine(&text[i], &set_y)?;
        let sensitivity = match side {
            Side::X => similarity_x - similarity_y,
            Side::Y => similarity_y - similarity_x,
        };
        scores.push(PhraseScore {
            side,
            phrase: vocab.phrases()[i].clone(),
            similarity_x,
            similarity_y,
            sensitivity,
        });
    }
    // First maximum wins, i.e. the higher-ranked caption phrase.
    let best = scores
        .iter()
        .fold(None::<&PhraseScore>, |best, s| match best {
            Some(b) if b.sensitivity >= s.sensitivity => Some(b),
            _ => Some(s),
        })
        .filter(|s| s.sensitivity >= config.eta)
        .map(|s| s.phrase.clone());
    Ok((best, scores))
}

/// Fills the transformation template.
pub fn build_init_instruction(p_x: Option<&str>, p_y: Option<&str>) -> Option<String> {
    match (p_x, p_y) {
        (_, None) => None,
        (Some(x), Some(y)) => Some(format!("turn {x} into {y}")),
        (None, Some(y)) => Some(format!("turn it into {y}")),
    }
}

/// Runs both sides and assembles the initial instruction.
pub fn initialize(
    before: &[Image],
    after: &[Image],
    vocab: &PhraseVocabulary,
    config: InitializerConfig,
    embedder: &dyn Embedder,
) -> Result<InitOutcome> {
    let (p_x, mut scores) = unique_phrase(Side::X, before, after, vocab, config, embedder)?;
    let (p_y, scores_y) = unique_phrase(Side::Y, before, after, vocab, config, embedder)?;
    scores.extend(scores_y);
    let instruction_text = build_init_instruction(p_x.as_deref(), p_y.as_deref());
    Ok(InitOutcome {
        p_x,
        p_y,
        instruction_text,
        scores,
    })
}
