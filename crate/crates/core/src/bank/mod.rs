//! Time-segmented attention instruction banks.
//!
//! A bank holds, for each of `j` timestep segments and each cross-attention
//! layer, an `m × d` key block and an `m × d` value block that replace the
//! first `m` instruction rows of that layer. Values are stored as `f32`,
//! which is also the on-disk precision, so saving and loading is lossless.

mod format;

use std::ops::Range;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backend::{DiffusionBackend, KvPair, LayerShapeSpec};
use crate::error::{Error, Result};

pub use format::{decode_bank, encode_bank, load_bank, save_bank, BankManifest, FORMAT_VERSION, MAGIC};

/// Row count used when initializing without instruction text.
pub const EMPTY_INIT_TOKENS: usize = 10;
pub const DEFAULT_SEGMENTS: usize = 5;

/// Equal partition of `[0, train_timesteps)` into `j` contiguous segments.
///
/// Segment 0 holds the lowest-noise timesteps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeSegmentation {
    j: usize,
    train_timesteps: usize,
}

impl TimeSegmentation {
    pub fn new(j: usize, train_timesteps: usize) -> Result<Self> {
        if j == 0 || j > train_timesteps {
            return Err(Error::InvalidArgument(format!(
                "segment count {j} must lie in 1..={train_timesteps}"
            )));
        }
        Ok(Self { j, train_timesteps })
    }

    pub fn segments(&self) -> usize {
        self.j
    }

    pub fn train_timesteps(&self) -> usize {
        self.train_timesteps
    }

    /// `floor(t * j / T)`.
    pub fn segment_index(&self, t: usize) -> Result<usize> {
        if t >= self.train_timesteps {
            return Err(Error::TimestepOutOfRange {
                t,
                train_timesteps: self.train_timesteps,
            });
        }
        Ok(t * self.j / self.train_timesteps)
    }

    /// Half-open timestep range owned by `segment`.
    pub fn range(&self, segment: usize) -> Range<usize> {
        let bound = |s: usize| (s * self.train_timesteps).div_ceil(self.j);
        bound(segment)..bound(segment + 1)
    }
}

/// One layer's override block at storage precision.
#[derive(Debug, Clone, PartialEq)]
pub struct KvBlock {
    pub keys: Array2<f32>,
    pub values: Array2<f32>,
}

impl KvBlock {
    pub fn from_f64(pair: &KvPair) -> Self {
        Self {
            keys: pair.keys.mapv(|v| v as f32),
            values: pair.values.mapv(|v| v as f32),
        }
    }

    pub fn to_f64(&self) -> KvPair {
        KvPair {
            keys: self.keys.mapv(f64::from),
            values: self.values.mapv(f64::from),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstructionBank {
    pub(crate) m: usize,
    pub(crate) segmentation: TimeSegmentation,
    pub(crate) layers: Vec<LayerShapeSpec>,
    /// Indexed `[segment][layer]`.
    pub(crate) blocks: Vec<Vec<KvBlock>>,
    pub(crate) init_text: Option<String>,
    pub(crate) backend_id: String,
    pub(crate) trained: bool,
    /// Echo of the configuration that produced the bank, if any.
    pub(crate) training_config: Option<serde_json::Value>,
}

impl InstructionBank {
    /// Builds a bank from explicit blocks, validating every invariant.
    pub fn from_parts(
        backend_id: impl Into<String>,
        segmentation: TimeSegmentation,
        layers: Vec<LayerShapeSpec>,
        blocks: Vec<Vec<KvBlock>>,
        init_text: Option<String>,
    ) -> Result<Self> {
        let m = blocks
            .first()
            .and_then(|seg| seg.first())
            .map(|b| b.keys.nrows())
            .unwrap_or(0);
        let bank = Self {
            m,
            segmentation,
            layers,
            blocks,
            init_text,
            backend_id: backend_id.into(),
            trained: false,
            training_config: None,
        };
        bank.validate()?;
        Ok(bank)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Shape("bank has zero instruction rows".into()));
        }
        if self.layers.is_empty() {
            return Err(Error::Shape("bank has no layers".into()));
        }
        if self.blocks.len() != self.segmentation.segments() {
            return Err(Error::Shape(format!(
                "{} segments of blocks for j = {}",
                self.blocks.len(),
                self.segmentation.segments()
            )));
        }
        for (s, segment) in self.blocks.iter().enumerate() {
            if segment.len() != self.layers.len() {
                return Err(Error::Shape(format!(
                    "segment {s} has {} layers, expected {}",
                    segment.len(),
                    self.layers.len()
                )));
            }
            for (block, spec) in segment.iter().zip(&self.layers) {
                let expected = (self.m, spec.feature_dim);
                if block.keys.dim() != expected || block.values.dim() != expected {
                    return Err(Error::Shape(format!(
                        "segment {s} layer {}: blocks {:?}/{:?}, expected {expected:?}",
                        spec.layer_index,
                        block.keys.dim(),
                        block.values.dim()
                    )));
                }
                if block.keys.iter().chain(block.values.iter()).any(|v| !v.is_finite()) {
                    return Err(Error::InvalidArgument(format!(
                        "segment {s} layer {} has non-finite entries",
                        spec.layer_index
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn segments(&self) -> usize {
        self.segmentation.segments()
    }

    pub fn segmentation(&self) -> TimeSegmentation {
        self.segmentation
    }

    pub fn layers(&self) -> &[LayerShapeSpec] {
        &self.layers
    }

    pub fn init_text(&self) -> Option<&str> {
        self.init_text.as_deref()
    }

    pub fn backend_id(&self) -> &str {
        &self.backend_id
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn training_config(&self) -> Option<&serde_json::Value> {
        self.training_config.as_ref()
    }

    pub fn mark_trained(&mut self, config: Option<serde_json::Value>) {
        self.trained = true;
        self.training_config = config;
    }

    pub fn segment_blocks(&self, segment: usize) -> &[KvBlock] {
        &self.blocks[segment]
    }

    pub fn segment_blocks_mut(&mut self, segment: usize) -> &mut [KvBlock] {
        &mut self.blocks[segment]
    }

    /// Blocks of the segment owning timestep `t`.
    pub fn overrides_for(&self, t: usize) -> Result<&[KvBlock]> {
        let segment = self.segmentation.segment_index(t)?;
        Ok(&self.blocks[segment])
    }

    /// [`overrides_for`](Self::overrides_for) widened to backend precision.
    pub fn overrides_for_f64(&self, t: usize) -> Result<Vec<KvPair>> {
        Ok(self.overrides_for(t)?.iter().map(KvBlock::to_f64).collect())
    }

    pub fn check_backend(&self, backend: &dyn DiffusionBackend) -> Result<()> {
        let desc = backend.descriptor();
        if desc.backend_id != self.backend_id {
            return Err(Error::BackendMismatch {
                bank: self.backend_id.clone(),
                backend: desc.backend_id.clone(),
            });
        }
        if desc.attention_layers != self.layers || desc.train_timesteps != self.segmentation.train_timesteps() {
            return Err(Error::Shape(format!(
                "bank layout does not match backend `{}`",
                desc.backend_id
            )));
        }
        Ok(())
    }
}

/// Creates an untrained bank whose every segment starts from the backend's
/// own keys/values of `init_text`, or of the empty instruction when `None`.
///
/// With text, `m` is its content-token count; without, `m` is
/// [`EMPTY_INIT_TOKENS`].
pub fn bank_init_from_text(
    backend: &dyn DiffusionBackend,
    init_text: Option<&str>,
    j: usize,
) -> Result<InstructionBank> {
    let desc = backend.descriptor();
    let segmentation = TimeSegmentation::new(j, desc.train_timesteps)?;
    let (tokens, m) = match init_text {
        Some(text) => {
            let tokens = backend.tokenize(text)?;
            let m = tokens.content_len();
            (tokens, m)
        }
        None => (backend.empty_instruction(), EMPTY_INIT_TOKENS),
    };
    if m == 0 || m > desc.max_tokens {
        return Err(Error::TokenCount {
            count: m,
            max: desc.max_tokens,
        });
    }
    let initial: Vec<KvBlock> = backend
        .instruction_kv(&tokens)?
        .iter()
        .map(|kv| KvBlock::from_f64(&kv.leading_rows(m)))
        .collect();
    InstructionBank::from_parts(
        desc.backend_id.clone(),
        segmentation,
        desc.attention_layers.clone(),
        vec![initial; j],
        init_text.map(str::to_owned),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ToyBackend;

    #[test]
    fn segment_index_examples() {
        let seg = TimeSegmentation::new(5, 1000).unwrap();
        assert_eq!(seg.segment_index(0).unwrap(), 0);
        assert_eq!(seg.segment_index(999).unwrap(), 4);
        assert_eq!(seg.segment_index(800).unwrap(), 4);
        assert_eq!(seg.segment_index(199).unwrap(), 0);
        assert_eq!(seg.segment_index(200).unwrap(), 1);
        assert!(matches!(seg.segment_index(1000), Err(Error::TimestepOutOfRange { .. })));
    }

    #[test]
    fn segmentation_bounds() {
        assert!(TimeSegmentation::new(0, 1000).is_err());
        assert!(TimeSegmentation::new(1001, 1000).is_err());
        assert_eq!(TimeSegmentation::new(5, 1000).unwrap().range(1), 200..400);
    }

    #[test]
    fn init_from_text_copies_leading_rows() {
        let backend = ToyBackend::new(0);
        let text = "turn a photo of a dog into cats";
        let bank = bank_init_from_text(&backend, Some(text), 5).unwrap();
        assert_eq!(bank.m(), 8);
        assert_eq!(bank.segments(), 5);
        assert!(!bank.is_trained());
        let tokens = backend.tokenize(text).unwrap();
        for layer in 0..2 {
            let kv = backend.text_kv(&tokens, layer).unwrap();
            for s in 0..5 {
                let block = &bank.segment_blocks(s)[layer];
                for r in 0..8 {
                    for c in 0..kv.keys.ncols() {
                        assert_eq!(block.keys[[r, c]], kv.keys[[r, c]] as f32);
                        assert_eq!(block.values[[r, c]], kv.values[[r, c]] as f32);
                    }
                }
            }
        }
    }

    #[test]
    fn init_without_text_uses_ten_rows() {
        let bank = bank_init_from_text(&ToyBackend::new(0), None, 5).unwrap();
        assert_eq!(bank.m(), 10);
        assert_eq!(bank.init_text(), None);
    }

    #[test]
    fn init_rejects_empty_or_overlong_text() {
        let backend = ToyBackend::new(0);
        assert!(bank_init_from_text(&backend, Some("  "), 5).is_err());
        let long = vec!["x"; 17].join(" ");
        assert!(bank_init_from_text(&backend, Some(&long), 5).is_err());
        assert!(bank_init_from_text(&backend, None, 0).is_err());
    }

    #[test]
    fn overrides_follow_segment_boundaries() {
        let backend = ToyBackend::new(0);
        let mut bank = bank_init_from_text(&backend, Some("make it red"), 5).unwrap();
        bank.segment_blocks_mut(1)[0].keys[[0, 0]] += 1.0;
        let at = |t| bank.overrides_for(t).unwrap().to_vec();
        assert_eq!(at(0), at(199));
        assert_eq!(at(199), bank.segment_blocks(0).to_vec());
        assert_eq!(at(200), bank.segment_blocks(1).to_vec());
        assert_ne!(at(199), at(200));
        assert!(bank.overrides_for(1000).is_err());
    }

    #[test]
    fn backend_mismatch_is_rejected() {
        let bank = bank_init_from_text(&ToyBackend::new(0), None, 2).unwrap();
        assert!(matches!(
            bank.check_backend(&ToyBackend::new(1)),
            Err(Error::BackendMismatch { .. })
        ));
    }
}
