//! Patch embedding and the one-stream transformer encoder.
//!
//! Template and search tokens of every modality share one sequence. Each
//! layer is a pre-norm block: joint self-attention over the whole sequence
//! and, when both RGB and TIR tokens are present, a cross-modal branch in
//! which each modality queries the other. Both branch outputs are added to
//! the residual stream before the MLP.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Modality, UnifiedInput};
use crate::error::{Error, Result};
use crate::numerics::{Array, Var};
use crate::params::{Bound, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub patch_size: usize,
    pub template_size: usize,
    pub search_size: usize,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            embed_dim: 32,
            num_layers: 2,
            num_heads: 2,
            patch_size: 8,
            template_size: 32,
            search_size: 64,
            mlp_ratio: 4,
        }
    }
}

impl EncoderConfig {
    /// Sizes used by the full-scale tracker: 112 px template, 224 px search.
    pub fn full_scale() -> Self {
        EncoderConfig {
            embed_dim: 384,
            num_layers: 12,
            num_heads: 6,
            patch_size: 16,
            template_size: 112,
            search_size: 224,
            mlp_ratio: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.embed_dim,
            self.num_heads,
            self.patch_size,
            self.template_size,
            self.search_size,
            self.mlp_ratio,
        ];
        if positive.contains(&0) {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "num_heads {} does not divide embed_dim {}",
                self.num_heads, self.embed_dim
            )));
        }
        if self.template_size % self.patch_size != 0 || self.search_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "patch_size {} must divide template_size {} and search_size {}",
                self.patch_size, self.template_size, self.search_size
            )));
        }
        Ok(())
    }

    pub fn key_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn size_for(&self, role: Role) -> usize {
        match role {
            Role::Template => self.template_size,
            Role::Search => self.search_size,
        }
    }

    /// Patches per side for a role.
    pub fn grid(&self, role: Role) -> usize {
        self.size_for(role) / self.patch_size
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 6
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Template,
    Search,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Segment {
    PromptTemplate,
    Template,
    PromptSearch,
    Search,
}

impl Segment {
    fn rank(self) -> u8 {
        match self {
            Segment::PromptTemplate => 0,
            Segment::Template => 1,
            Segment::PromptSearch => 2,
            Segment::Search => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenModality {
    Rgb,
    Tir,
    Fused,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TokenLabel {
    pub segment: Segment,
    pub modality: TokenModality,
}

/// A token sequence on the tape plus one label per row.
#[derive(Debug, Clone)]
pub struct TokenState<'t> {
    pub tokens: Var<'t>,
    pub labels: Vec<TokenLabel>,
}

/// Contiguous rows of one segment with their modality labels.
#[derive(Debug, Clone)]
pub struct SegmentTokens<'t> {
    pub tokens: Var<'t>,
    pub modality: Vec<TokenModality>,
}

impl<'t> TokenState<'t> {
    pub fn new(tokens: Var<'t>, labels: Vec<TokenLabel>) -> Result<Self> {
        let rows = tokens.value().rows();
        if rows != labels.len() {
            return Err(Error::Shape(format!("{rows} tokens but {} labels", labels.len())));
        }
        Ok(TokenState { tokens, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Fails unless segments appear in the order prompt_t, template, prompt_s, search.
    pub fn check_order(&self) -> Result<()> {
        let ordered = self.labels.windows(2).all(|w| w[0].segment.rank() <= w[1].segment.rank());
        if ordered {
            Ok(())
        } else {
            Err(Error::Contract(
                "token segments must be ordered prompt_t, template, prompt_s, search".into(),
            ))
        }
    }

    /// Start and length of a segment's rows (length 0 when absent).
    pub fn segment_range(&self, segment: Segment) -> (usize, usize) {
        let start = self.labels.iter().position(|l| l.segment == segment);
        match start {
            Some(s) => (s, self.labels[s..].iter().take_while(|l| l.segment == segment).count()),
            None => (0, 0),
        }
    }

    pub fn segment(&self, segment: Segment) -> Result<Option<SegmentTokens<'t>>> {
        let (start, len) = self.segment_range(segment);
        if len == 0 {
            return Ok(None);
        }
        Ok(Some(SegmentTokens {
            tokens: self.tokens.slice_rows(start, len)?,
            modality: self.labels[start..start + len].iter().map(|l| l.modality).collect(),
        }))
    }

    pub fn rows_with(&self, modality: TokenModality) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i].modality == modality).collect()
    }

    /// True when both RGB and TIR tokens are present.
    pub fn is_multimodal(&self) -> bool {
        let has = |m| self.labels.iter().any(|l| l.modality == m);
        has(TokenModality::Rgb) && has(TokenModality::Tir)
    }
}

/// Rows of flattened patches, row-major over the patch grid; each row
/// lists the patch pixels row-major with 6 channels per pixel.
pub fn extract_patches(input: &UnifiedInput, patch: usize) -> Result<Array> {
    if input.width % patch != 0 || input.height % patch != 0 {
        return Err(Error::Shape(format!(
            "{}x{} input is not divisible into {patch}px patches",
            input.width, input.height
        )));
    }
    let (gw, gh) = (input.width / patch, input.height / patch);
    let dim = patch * patch * 6;
    let mut data = Vec::with_capacity(gw * gh * dim);
    for py in 0..gh {
        for px in 0..gw {
            for dy in 0..patch {
                let row = (py * patch + dy) * input.width + px * patch;
                data.extend(input.pixels[row * 6..(row + patch) * 6].iter().map(|&v| f64::from(v)));
            }
        }
    }
    Array::new(vec![gw * gh, dim], data)
}

/// Patch matrices for each modality group of an input: one group for a
/// single modality, an RGB group then a TIR group for RGB-T. Each RGB-T
/// group is the matching half replicated over six channels, the same
/// layout a single-modality frame gets.
pub fn modality_patches(input: &UnifiedInput, patch: usize) -> Result<Vec<(TokenModality, Array)>> {
    Ok(match input.modality {
        Modality::Rgb => vec![(TokenModality::Rgb, extract_patches(input, patch)?)],
        Modality::Tir => vec![(TokenModality::Tir, extract_patches(input, patch)?)],
        Modality::Rgbt => vec![
            (TokenModality::Rgb, extract_patches(&input.replicate_group(0), patch)?),
            (TokenModality::Tir, extract_patches(&input.replicate_group(1), patch)?),
        ],
    })
}

fn role_name(role: Role) -> &'static str {
    match role {
        Role::Template => "template",
        Role::Search => "search",
    }
}

fn modality_name(m: TokenModality) -> &'static str {
    match m {
        TokenModality::Rgb => "rgb",
        TokenModality::Tir => "tir",
        TokenModality::Fused => "fused",
    }
}

/// Linear patch projection plus positional, role and modality embeddings.
pub fn embed_patches<'t>(
    input: &UnifiedInput,
    role: Role,
    config: &EncoderConfig,
    params: &Bound<'t, '_>,
) -> Result<TokenState<'t>> {
    let size = config.size_for(role);
    if input.width != size || input.height != size {
        return Err(Error::Shape(format!(
            "{} input is {}x{}, configured size is {size}x{size}",
            role_name(role),
            input.width,
            input.height
        )));
    }
    let groups = modality_patches(input, config.patch_size)?;
    embed_patch_groups(&groups, role, params)
}

/// [`embed_patches`] on pre-extracted patch matrices.
pub fn embed_patch_groups<'t>(
    groups: &[(TokenModality, Array)],
    role: Role,
    params: &Bound<'t, '_>,
) -> Result<TokenState<'t>> {
    let w = params.get("embed.patch.w")?;
    let b = params.get("embed.patch.b")?;
    let pos = params.get(&format!("embed.pos.{}", role_name(role)))?;
    let role_emb = params.get(&format!("embed.role.{}", role_name(role)))?;
    let segment = match role {
        Role::Template => Segment::Template,
        Role::Search => Segment::Search,
    };

    let mut parts = Vec::with_capacity(groups.len());
    let mut labels = Vec::new();
    for (modality, patches) in groups {
        let modality_emb = params.get(&format!("embed.modality.{}", modality_name(*modality)))?;
        let x = w.tape().constant(patches.clone());
        let tokens = x
            .matmul(&w)?
            .add_row(&b)?
            .add(&pos)?
            .add_row(&role_emb)?
            .add_row(&modality_emb)?;
        labels.extend(std::iter::repeat(TokenLabel { segment, modality: *modality }).take(patches.rows()));
        parts.push(tokens);
    }
    TokenState::new(Var::concat_rows(&parts)?, labels)
}

/// Query/key/value/output weights of one attention block.
pub struct AttentionWeights<'t> {
    pub wq: Var<'t>,
    pub wk: Var<'t>,
    pub wv: Var<'t>,
    pub wo: Var<'t>,
    pub bo: Var<'t>,
}

impl<'t> AttentionWeights<'t> {
    pub fn load(params: &Bound<'t, '_>, prefix: &str) -> Result<Self> {
        Ok(AttentionWeights {
            wq: params.get(&format!("{prefix}.wq"))?,
            wk: params.get(&format!("{prefix}.wk"))?,
            wv: params.get(&format!("{prefix}.wv"))?,
            wo: params.get(&format!("{prefix}.wo"))?,
            bo: params.get(&format!("{prefix}.bo"))?,
        })
    }
}

/// Multi-head `softmax(Q Kᵀ / √d_k) V` with queries from `queries` and
/// keys/values from `context`; heads are concatenated, no output projection.
pub fn attend<'t>(queries: &Var<'t>, context: &Var<'t>, w: &AttentionWeights<'t>, heads: usize) -> Result<Var<'t>> {
    let q = queries.matmul(&w.wq)?;
    let k = context.matmul(&w.wk)?;
    let v = context.matmul(&w.wv)?;
    multi_head(&q, &k, &v, heads)
}

fn multi_head<'t>(q: &Var<'t>, k: &Var<'t>, v: &Var<'t>, heads: usize) -> Result<Var<'t>> {
    let d = q.value().cols();
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("{heads} heads do not divide width {d}")));
    }
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let outs = (0..heads)
        .map(|h| {
            let (qh, kh, vh) = if heads == 1 {
                (*q, *k, *v)
            } else {
                (q.slice_cols(h * dk, dk)?, k.slice_cols(h * dk, dk)?, v.slice_cols(h * dk, dk)?)
            };
            qh.matmul_t(&kh)?.scale(scale)?.softmax_rows()?.matmul(&vh)
        })
        .collect::<Result<Vec<_>>>()?;
    if heads == 1 {
        Ok(outs[0])
    } else {
        Var::concat_cols(&outs)
    }
}

/// Joint self-attention over template and search tokens of one modality.
/// Prompt tokens (modality `Fused`) may ride along.
pub fn self_attention<'t>(h: &TokenState<'t>, w: &AttentionWeights<'t>, heads: usize) -> Result<Var<'t>> {
    let mut visual = h.labels.iter().map(|l| l.modality).filter(|&m| m != TokenModality::Fused);
    if let Some(first) = visual.next() {
        if visual.any(|m| m != first) {
            return Err(Error::Contract("self_attention expects tokens of a single modality".into()));
        }
    }
    attend(&h.tokens, &h.tokens, w, heads)
}

/// Template/search split of one modality's tokens.
#[derive(Debug, Clone, Copy)]
pub struct ModalityTokens<'t> {
    pub template: Var<'t>,
    pub search: Var<'t>,
}

/// Softmax similarity sub-blocks of one head: rows are template/search
/// queries, columns template/search keys.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlocks {
    pub s_tt: Array,
    pub s_ts: Array,
    pub s_st: Array,
    pub s_ss: Array,
}

impl AttentionBlocks {
    /// `[S_tt V_t + S_ts V_s ; S_st V_t + S_ss V_s]`
    pub fn compose(&self, v_t: &Array, v_s: &Array) -> Result<Array> {
        let top = add(&self.s_tt.matmul(v_t)?, &self.s_ts.matmul(v_s)?);
        let bottom = add(&self.s_st.matmul(v_t)?, &self.s_ss.matmul(v_s)?);
        let mut data = top.into_data();
        let n = v_t.cols();
        data.extend(bottom.into_data());
        Array::new(vec![data.len() / n, n], data)
    }
}

fn add(a: &Array, b: &Array) -> Array {
    Array::from_fn(a.shape().to_vec(), |i| a.data()[i] + b.data()[i])
}

fn split_block(s: &Array, rows: (usize, usize), cols: (usize, usize)) -> Array {
    let (r0, rn) = rows;
    let (c0, cn) = cols;
    Array::from_fn(vec![rn, cn], |i| s.at(r0 + i / cn, c0 + i % cn))
}

pub struct CrossAttention<'t> {
    /// Dense attention output, template query rows first.
    pub output: Var<'t>,
    /// Per-head similarity blocks.
    pub blocks: Vec<AttentionBlocks>,
}

/// Tolerance for the block-decomposition check in [`cross_modal_attention`].
pub const BLOCK_IDENTITY_TOL: f64 = 1e-9;

/// Cross-modal attention: TIR tokens query RGB keys and values. Returns
/// the dense output and the per-head similarity blocks, after checking
/// that recomposing the blocks reproduces the dense result.
pub fn cross_modal_attention<'t>(
    tir: &ModalityTokens<'t>,
    rgb: &ModalityTokens<'t>,
    w: &AttentionWeights<'t>,
    heads: usize,
) -> Result<CrossAttention<'t>> {
    let queries = Var::concat_rows(&[tir.template, tir.search])?;
    let context = Var::concat_rows(&[rgb.template, rgb.search])?;
    let output = attend(&queries, &context, w, heads)?;

    let (qt, kt) = (tir.template.value().rows(), rgb.template.value().rows());
    let (qs, ks) = (tir.search.value().rows(), rgb.search.value().rows());
    let q = queries.value().matmul(&w.wq.value())?;
    let k = context.value().matmul(&w.wk.value())?;
    let v = context.value().matmul(&w.wv.value())?;
    let d = q.cols();
    let dk = d / heads;
    let mut blocks = Vec::with_capacity(heads);
    let mut recomposed = Array::zeros(vec![qt + qs, d]);
    for h in 0..heads {
        let cols = |a: &Array| Array::from_fn(vec![a.rows(), dk], |i| a.at(i / dk, h * dk + i % dk));
        let (qh, kh, vh) = (cols(&q), cols(&k), cols(&v));
        let logits = qh.matmul(&kh.transpose()?)?;
        let scale = 1.0 / (dk as f64).sqrt();
        let s = Array::new(
            logits.shape().to_vec(),
            (0..logits.rows())
                .flat_map(|r| crate::numerics::softmax(&logits.row(r).iter().map(|x| x * scale).collect::<Vec<_>>()))
                .collect(),
        )?;
        let block = AttentionBlocks {
            s_tt: split_block(&s, (0, qt), (0, kt)),
            s_ts: split_block(&s, (0, qt), (kt, ks)),
            s_st: split_block(&s, (qt, qs), (0, kt)),
            s_ss: split_block(&s, (qt, qs), (kt, ks)),
        };
        let v_t = split_block(&vh, (0, kt), (0, dk));
        let v_s = split_block(&vh, (kt, ks), (0, dk));
        let part = block.compose(&v_t, &v_s)?;
        for r in 0..qt + qs {
            for c in 0..dk {
                recomposed.data_mut()[r * d + h * dk + c] = part.at(r, c);
            }
        }
        blocks.push(block);
    }
    let gap = recomposed.max_abs_diff(&output.value());
    if gap > BLOCK_IDENTITY_TOL {
        return Err(Error::Contract(format!(
            "block-decomposed cross attention differs from dense result by {gap:e}"
        )));
    }
    Ok(CrossAttention { output, blocks })
}

pub(crate) fn affine_norm<'t>(x: &Var<'t>, params: &Bound<'t, '_>, prefix: &str) -> Result<Var<'t>> {
    x.layer_norm()?
        .mul_row(&params.get(&format!("{prefix}.g"))?)?
        .add_row(&params.get(&format!("{prefix}.b"))?)
}

fn mlp<'t>(x: &Var<'t>, params: &Bound<'t, '_>, prefix: &str) -> Result<Var<'t>> {
    x.matmul(&params.get(&format!("{prefix}.w1"))?)?
        .add_row(&params.get(&format!("{prefix}.b1"))?)?
        .relu()?
        .matmul(&params.get(&format!("{prefix}.w2"))?)?
        .add_row(&params.get(&format!("{prefix}.b2"))?)
}

/// Pre-norm transformer block over an unlabeled sequence:
/// `x + Attn(LN(x))`, then `x + MLP(LN(x))`. `extra` adds further
/// residual branches computed from the normed input.
pub fn transformer_block<'t>(
    x: &Var<'t>,
    params: &Bound<'t, '_>,
    prefix: &str,
    heads: usize,
    extra: impl FnOnce(&Var<'t>) -> Result<Option<Var<'t>>>,
) -> Result<Var<'t>> {
    let y = affine_norm(x, params, &format!("{prefix}.ln1"))?;
    let w = AttentionWeights::load(params, &format!("{prefix}.attn"))?;
    let a = attend(&y, &y, &w, heads)?.matmul(&w.wo)?.add_row(&w.bo)?;
    let mut x = x.add(&a)?;
    if let Some(branch) = extra(&y)? {
        x = x.add(&branch)?;
    }
    let z = affine_norm(&x, params, &format!("{prefix}.ln2"))?;
    x.add(&mlp(&z, params, &format!("{prefix}.mlp"))?)
}

/// Both directions of cross-modal attention, scattered back onto the rows
/// of their query tokens (zero on prompt rows) and projected.
fn cross_branch<'t>(
    y: &Var<'t>,
    h: &TokenState<'t>,
    params: &Bound<'t, '_>,
    prefix: &str,
    heads: usize,
) -> Result<Var<'t>> {
    let w = AttentionWeights::load(params, &format!("{prefix}.cross"))?;
    let rgb_rows = h.rows_with(TokenModality::Rgb);
    let tir_rows = h.rows_with(TokenModality::Tir);
    let y_rgb = y.gather_rows(&rgb_rows)?;
    let y_tir = y.gather_rows(&tir_rows)?;
    let tir_out = attend(&y_tir, &y_rgb, &w, heads)?;
    let rgb_out = attend(&y_rgb, &y_tir, &w, heads)?;
    let d = y.value().cols();
    let zero = y.tape().constant(Array::zeros(vec![1, d]));
    let stacked = Var::concat_rows(&[tir_out, rgb_out])?.matmul(&w.wo)?.add_row(&w.bo)?;
    let stacked = Var::concat_rows(&[stacked, zero])?;

    let zero_row = tir_rows.len() + rgb_rows.len();
    let mut index = vec![zero_row; h.len()];
    for (k, &r) in tir_rows.iter().enumerate() {
        index[r] = k;
    }
    for (k, &r) in rgb_rows.iter().enumerate() {
        index[r] = tir_rows.len() + k;
    }
    stacked.gather_rows(&index)
}

/// One encoder layer. Multimodal sequences get the cross-modal branch.
pub fn encoder_layer<'t>(
    h: &TokenState<'t>,
    params: &Bound<'t, '_>,
    layer: usize,
    config: &EncoderConfig,
) -> Result<TokenState<'t>> {
    h.check_order()?;
    let prefix = format!("encoder.{layer}");
    let multimodal = h.is_multimodal();
    let out = transformer_block(&h.tokens, params, &prefix, config.num_heads, |y| {
        if multimodal {
            cross_branch(y, h, params, &prefix, config.num_heads).map(Some)
        } else {
            Ok(None)
        }
    })?;
    TokenState::new(out, h.labels.clone())
}

/// Runs `config.num_layers` encoder layers. When `prompts` is given,
/// layer `i` first has its prompt tokens replaced by `prompts(i)`.
pub fn run_encoder<'t>(
    h0: TokenState<'t>,
    config: &EncoderConfig,
    params: &Bound<'t, '_>,
    mut prompts: Option<&mut dyn FnMut(usize) -> Result<(Var<'t>, Var<'t>)>>,
) -> Result<TokenState<'t>> {
    let mut h = h0;
    for layer in 0..config.num_layers {
        if let Some(next) = prompts.as_mut() {
            let (p_t, p_s) = next(layer)?;
            h = crate::prompt::inject_prompt_into(&h, p_t, p_s)?;
        }
        h = encoder_layer(&h, params, layer, config)?;
    }
    Ok(h)
}

fn randn<R: Rng>(rng: &mut R, shape: Vec<usize>, fan_in: usize) -> Array {
    Array::randn(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

pub(crate) fn init_block<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, d: usize, hidden: usize, cross: bool) {
    store.insert(format!("{prefix}.ln1.g"), Array::ones(vec![d]));
    store.insert(format!("{prefix}.ln1.b"), Array::zeros(vec![d]));
    let mut attn = |name: &str| {
        for w in ["wq", "wk", "wv", "wo"] {
            store.insert(format!("{prefix}.{name}.{w}"), randn(rng, vec![d, d], d));
        }
        store.insert(format!("{prefix}.{name}.bo"), Array::zeros(vec![d]));
    };
    attn("attn");
    if cross {
        attn("cross");
    }
    store.insert(format!("{prefix}.ln2.g"), Array::ones(vec![d]));
    store.insert(format!("{prefix}.ln2.b"), Array::zeros(vec![d]));
    store.insert(format!("{prefix}.mlp.w1"), randn(rng, vec![d, hidden], d));
    store.insert(format!("{prefix}.mlp.b1"), Array::zeros(vec![hidden]));
    store.insert(format!("{prefix}.mlp.w2"), randn(rng, vec![hidden, d], hidden));
    store.insert(format!("{prefix}.mlp.b2"), Array::zeros(vec![d]));
}

/// Adds randomly initialized embedding and encoder parameters.
pub fn init_params<R: Rng>(config: &EncoderConfig, store: &mut ParamStore, rng: &mut R) {
    let d = config.embed_dim;
    store.insert("embed.patch.w", randn(rng, vec![config.patch_dim(), d], config.patch_dim()));
    store.insert("embed.patch.b", Array::zeros(vec![d]));
    for role in [Role::Template, Role::Search] {
        let n = config.grid(role).pow(2);
        store.insert(format!("embed.pos.{}", role_name(role)), Array::randn(vec![n, d], 0.02, rng));
        store.insert(format!("embed.role.{}", role_name(role)), Array::randn(vec![d], 0.02, rng));
    }
    for m in [TokenModality::Rgb, TokenModality::Tir] {
        store.insert(format!("embed.modality.{}", modality_name(m)), Array::randn(vec![d], 0.02, rng));
    }
    for layer in 0..config.num_layers {
        init_block(store, rng, &format!("encoder.{layer}"), d, d * config.mlp_ratio, true);
    }
}
