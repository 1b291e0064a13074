//! Text prior prompts: a size-category sentence ("track a tiny drone")
//! encoded by a small text transformer into prompt tokens that are
//! re-injected in front of the template and search tokens at every
//! encoder layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{box_diagonal, BBox};
use crate::encoder::{init_block, transformer_block, Segment, SegmentTokens, TokenLabel, TokenModality, TokenState};
use crate::error::{Error, Result};
use crate::numerics::{Array, Var};
use crate::params::{Bound, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeCategory {
    Tiny,
    Small,
    Medium,
    Normal,
}

impl SizeCategory {
    pub const ALL: [SizeCategory; 4] = [Self::Tiny, Self::Small, Self::Medium, Self::Normal];

    pub fn word(self) -> &'static str {
        match self {
            Self::Tiny => "tiny",
            Self::Small => "small",
            Self::Medium => "medium",
            Self::Normal => "normal",
        }
    }

    pub fn from_word(word: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.word() == word)
    }
}

impl std::fmt::Display for SizeCategory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.word())
    }
}

pub const PAD_TOKEN: &str = "<pad>";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptConfig {
    /// Upper diagonal bounds (px) of tiny, small and medium.
    pub thresholds: [f64; 3],
    pub text_layers: usize,
    pub max_len: usize,
    /// Prompt tokens per encoder layer, split evenly between template and search.
    pub prompt_tokens: usize,
    pub text_dim: usize,
    pub text_heads: usize,
    pub vocab: Vec<String>,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            thresholds: [10.0, 25.0, 45.0],
            text_layers: 2,
            max_len: 8,
            prompt_tokens: 2,
            text_dim: 16,
            text_heads: 2,
            vocab: [PAD_TOKEN, "track", "a", "tiny", "small", "medium", "normal", "drone"]
                .map(String::from)
                .to_vec(),
        }
    }
}

impl PromptConfig {
    pub fn validate(&self) -> Result<()> {
        let [t1, t2, t3] = self.thresholds;
        if !(0.0 < t1 && t1 < t2 && t2 < t3) {
            return Err(Error::Config(format!("thresholds {:?} must be increasing and positive", self.thresholds)));
        }
        if self.prompt_tokens == 0 || self.prompt_tokens % 2 != 0 {
            return Err(Error::Config(format!("prompt_tokens {} must be even and positive", self.prompt_tokens)));
        }
        if self.prompt_tokens > self.max_len {
            return Err(Error::Config(format!(
                "prompt_tokens {} exceeds max_len {}",
                self.prompt_tokens, self.max_len
            )));
        }
        if self.text_layers == 0 || self.text_dim == 0 || self.text_heads == 0 || self.text_dim % self.text_heads != 0 {
            return Err(Error::Config("text encoder sizes must be positive with heads dividing text_dim".into()));
        }
        if self.vocab.first().map(String::as_str) != Some(PAD_TOKEN) {
            return Err(Error::Config(format!("vocab must start with {PAD_TOKEN}")));
        }
        Ok(())
    }
}

/// Size category of a target by bounding-box diagonal. Each boundary
/// belongs to the lower category.
pub fn categorize(diag: f64, config: &PromptConfig) -> Result<SizeCategory> {
    if !(diag > 0.0) || !diag.is_finite() {
        return Err(Error::Parameter(format!("diagonal must be positive, got {diag}")));
    }
    let [t1, t2, t3] = config.thresholds;
    Ok(if diag <= t1 {
        SizeCategory::Tiny
    } else if diag <= t2 {
        SizeCategory::Small
    } else if diag <= t3 {
        SizeCategory::Medium
    } else {
        SizeCategory::Normal
    })
}

pub fn render_prompt(category: SizeCategory) -> String {
    format!("track a {category} drone")
}

/// Inverse of [`render_prompt`].
pub fn parse_prompt(text: &str) -> Option<SizeCategory> {
    let word = text.strip_prefix("track a ")?.strip_suffix(" drone")?;
    SizeCategory::from_word(word)
}

/// Word ids padded to `max_len`.
pub fn tokenize(text: &str, config: &PromptConfig) -> Result<Vec<usize>> {
    let mut ids = text
        .split_whitespace()
        .map(|w| {
            config
                .vocab
                .iter()
                .position(|v| v == w)
                .ok_or_else(|| Error::Vocabulary(w.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    if ids.len() > config.max_len {
        return Err(Error::Parameter(format!(
            "{} words exceed max_len {}",
            ids.len(),
            config.max_len
        )));
    }
    ids.resize(config.max_len, 0);
    Ok(ids)
}

/// Encoded prompt: one `n × D` prompt per text-encoder layer.
#[derive(Debug, Clone)]
pub struct PromptState<'t> {
    pub text: String,
    pub layers: Vec<Var<'t>>,
}

impl<'t> PromptState<'t> {
    /// Template/search halves of the prompt feeding encoder layer `layer`.
    /// Layers beyond the text depth reuse the last text layer's prompt.
    pub fn for_layer(&self, layer: usize) -> Result<(Var<'t>, Var<'t>)> {
        let idx = layer.min(self.layers.len() - 1);
        split_prompt(&self.layers[idx])
    }
}

/// Embedding lookup, `text_layers` transformer layers, and per layer
/// `Linear(ReLU(·))` on the first `prompt_tokens` positions.
pub fn encode_text<'t>(
    text: &str,
    config: &PromptConfig,
    params: &Bound<'t, '_>,
) -> Result<PromptState<'t>> {
    let ids = tokenize(text, config)?;
    let table = params.get("text.embed")?;
    let mut h = table.gather_rows(&ids)?.add(&params.get("text.pos")?)?;
    let mut layers = Vec::with_capacity(config.text_layers);
    for k in 0..config.text_layers {
        h = transformer_block(&h, params, &format!("text.{k}"), config.text_heads, |_| Ok(None))?;
        let p = h
            .slice_rows(0, config.prompt_tokens)?
            .relu()?
            .matmul(&params.get(&format!("text.proj.{k}.w"))?)?
            .add_row(&params.get(&format!("text.proj.{k}.b"))?)?;
        layers.push(p);
    }
    Ok(PromptState { text: text.to_string(), layers })
}

/// First half of the rows feeds the template branch, second half the search branch.
pub fn split_prompt<'t>(p: &Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let n = p.value().rows();
    if n % 2 != 0 {
        return Err(Error::Contract(format!("prompt has an odd token count {n}")));
    }
    p.split_rows(n / 2)
}

/// Concatenates `[p_t; H_t; p_s; H_s]` and labels the segments.
pub fn inject_prompt<'t>(
    h_t: &SegmentTokens<'t>,
    h_s: &SegmentTokens<'t>,
    p_t: Var<'t>,
    p_s: Var<'t>,
) -> Result<TokenState<'t>> {
    let d = h_t.tokens.value().cols();
    for part in [&h_s.tokens, &p_t, &p_s] {
        let shape = part.shape();
        if shape.len() != 2 || shape[1] != d {
            return Err(Error::dim("inject_prompt", &[h_t.tokens.value().rows(), d], &shape));
        }
    }
    let prompt_label = |segment| TokenLabel { segment, modality: TokenModality::Fused };
    let mut labels = Vec::new();
    labels.extend(std::iter::repeat(prompt_label(Segment::PromptTemplate)).take(p_t.value().rows()));
    labels.extend(h_t.modality.iter().map(|&modality| TokenLabel { segment: Segment::Template, modality }));
    labels.extend(std::iter::repeat(prompt_label(Segment::PromptSearch)).take(p_s.value().rows()));
    labels.extend(h_s.modality.iter().map(|&modality| TokenLabel { segment: Segment::Search, modality }));
    TokenState::new(Var::concat_rows(&[p_t, h_t.tokens, p_s, h_s.tokens])?, labels)
}

/// Replaces whatever prompt tokens `state` carries with `p_t` / `p_s`.
pub fn inject_prompt_into<'t>(state: &TokenState<'t>, p_t: Var<'t>, p_s: Var<'t>) -> Result<TokenState<'t>> {
    state.check_order()?;
    let missing = |what: &str| Error::Contract(format!("token state has no {what} segment"));
    let h_t = state.segment(Segment::Template)?.ok_or_else(|| missing("template"))?;
    let h_s = state.segment(Segment::Search)?.ok_or_else(|| missing("search"))?;
    inject_prompt(&h_t, &h_s, p_t, p_s)
}

/// Prompt category for a frame: ground truth on frame 0, the last
/// predicted box afterwards, and the previous category when the last
/// prediction is missing.
pub fn prompt_for_frame(
    frame_index: usize,
    ground_truth: Option<&BBox>,
    last_prediction: Option<&BBox>,
    previous: Option<SizeCategory>,
    config: &PromptConfig,
) -> Result<(SizeCategory, String)> {
    let category = if frame_index == 0 {
        let gt = ground_truth
            .ok_or_else(|| Error::Contract("frame 0 prompt needs the ground-truth box".into()))?;
        categorize(box_diagonal(gt)?, config)?
    } else {
        match (last_prediction, previous) {
            (Some(b), _) => categorize(box_diagonal(b)?, config)?,
            (None, Some(prev)) => prev,
            (None, None) => {
                return Err(Error::Contract(format!(
                    "frame {frame_index}: no prediction and no earlier category to carry forward"
                )))
            }
        }
    };
    Ok((category, render_prompt(category)))
}

/// Adds text encoder and prompt projection parameters.
pub fn init_params<R: Rng>(config: &PromptConfig, embed_dim: usize, store: &mut ParamStore, rng: &mut R) {
    let dt = config.text_dim;
    store.insert("text.embed", Array::randn(vec![config.vocab.len(), dt], 1.0, rng));
    store.insert("text.pos", Array::randn(vec![config.max_len, dt], 0.02, rng));
    for k in 0..config.text_layers {
        init_block(store, rng, &format!("text.{k}"), dt, 4 * dt, false);
    }
    for k in 0..config.text_layers {
        let std = 1.0 / (dt as f64).sqrt();
        store.insert(format!("text.proj.{k}.w"), Array::randn(vec![dt, embed_dim], std, rng));
        store.insert(format!("text.proj.{k}.b"), Array::zeros(vec![embed_dim]));
    }
}
