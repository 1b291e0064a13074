//! The full tracker network and its on-disk format.
//!
//! File layout (little-endian): the 8-byte magic `UAUTRK01`, a u32 length
//! and that many bytes of TOML config, a u32 block count, then per block a
//! u32 name length, the name, a u32 rank, u32 extents and f32 values.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datamodel::{Modality, UnifiedInput};
use crate::encoder::{embed_patches, run_encoder, EncoderConfig, Role, TokenState};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::headloss::{head_forward, head_input, HeadOutput};
use crate::numerics::{seeded_rng, Array, Tape, Var};
use crate::params::{Bound, ParamStore};
use crate::prompt::{encode_text, PromptConfig, PromptState};
use crate::{encoder, headloss, prompt};

pub const MAGIC: &[u8; 8] = b"UAUTRK01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Modality the model was trained for; RGBT models accept any input.
    pub modality: Modality,
    pub encoder: EncoderConfig,
    pub prompt: PromptConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            modality: Modality::Rgbt,
            encoder: EncoderConfig::default(),
            prompt: PromptConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.prompt.validate()
    }

    /// Whether data of `data` modality can be tracked by this model.
    pub fn accepts(&self, data: Modality) -> bool {
        self.modality == Modality::Rgbt || self.modality == data
    }
}

/// How prompt tokens enter the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PromptMode {
    /// Encoded size-category text.
    #[default]
    Text,
    /// Prompt tokens present but all zero.
    Zeroed,
    /// No prompt tokens.
    Off,
}

impl std::str::FromStr for PromptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(PromptMode::Text),
            "zeroed" => Ok(PromptMode::Zeroed),
            "off" => Ok(PromptMode::Off),
            other => Err(Error::Config(format!("unknown prompt mode {other:?}"))),
        }
    }
}

pub enum Prompting<'a, 't> {
    Encoded(&'a PromptState<'t>),
    Zeroed,
    Off,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

fn round_f32(store: &mut ParamStore) {
    for (_, v) in store.iter_mut() {
        v.data_mut().iter_mut().for_each(|x| *x = f64::from(*x as f32));
    }
}

impl TrackerModel {
    /// Random initialization. Values are rounded to f32 so that a saved
    /// and reloaded model is identical to the in-memory one.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(seed);
        let mut params = ParamStore::new();
        encoder::init_params(&config.encoder, &mut params, &mut rng);
        prompt::init_params(&config.prompt, config.encoder.embed_dim, &mut params, &mut rng);
        headloss::init_params(config.encoder.embed_dim, &mut params, &mut rng);
        round_f32(&mut params);
        Ok(TrackerModel { config, params })
    }

    pub fn round_to_f32(&mut self) {
        round_f32(&mut self.params);
    }

    pub fn encode_prompt<'t>(&self, params: &Bound<'t, '_>, text: &str) -> Result<PromptState<'t>> {
        encode_text(text, &self.config.prompt, params)
    }

    /// Template and search crops through embedding, encoder and head.
    pub fn forward<'t>(
        &self,
        params: &Bound<'t, '_>,
        template: &UnifiedInput,
        search: &UnifiedInput,
        prompting: Prompting<'_, 't>,
    ) -> Result<HeadOutput<'t>> {
        let cfg = &self.config.encoder;
        let t = embed_patches(template, Role::Template, cfg, params)?;
        let s = embed_patches(search, Role::Search, cfg, params)?;
        let labels = t.labels.iter().chain(&s.labels).copied().collect();
        let h0 = TokenState::new(Var::concat_rows(&[t.tokens, s.tokens])?, labels)?;
        let half = self.config.prompt.prompt_tokens / 2;
        let h = match prompting {
            Prompting::Off => run_encoder(h0, cfg, params, None)?,
            Prompting::Encoded(state) => {
                let mut next = |layer: usize| state.for_layer(layer);
                run_encoder(h0, cfg, params, Some(&mut next))?
            }
            Prompting::Zeroed => {
                let tape = params.get("embed.patch.b")?.tape();
                let mut next = |_| {
                    let z = tape.constant(Array::zeros(vec![half, cfg.embed_dim]));
                    Ok((z, z))
                };
                run_encoder(h0, cfg, params, Some(&mut next))?
            }
        };
        head_forward(&head_input(&h)?, params)
    }

    /// Per-layer prompt values for `text`, for reuse as constants.
    pub fn prompt_values(&self, text: &str) -> Result<Vec<Array>> {
        let tape = Tape::new();
        let bound = self.params.bind_frozen(&tape);
        let state = self.encode_prompt(&bound, text)?;
        Ok(state.layers.iter().map(|v| (*v.value()).clone()).collect())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = toml::to_string(&self.config).map_err(|e| Error::Config(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        push_u32(&mut out, header.len())?;
        out.extend_from_slice(header.as_bytes());
        push_u32(&mut out, self.params.len())?;
        for (name, value) in self.params.iter() {
            push_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            push_u32(&mut out, value.ndim())?;
            for &d in value.shape() {
                push_u32(&mut out, d)?;
            }
            for &x in value.data() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses a model file, checking that every block matches the layout
    /// the stored config implies.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::ModelFile("bad magic".into()));
        }
        let n = r.u32()?;
        let header = std::str::from_utf8(r.take(n)?).map_err(|_| Error::ModelFile("header is not UTF-8".into()))?;
        let config: ModelConfig = toml::from_str(header).map_err(|e| Error::ModelFile(format!("header: {e}")))?;
        let layout = Self::init(config.clone(), 0)?;
        let count = r.u32()?;
        if count != layout.params.len() {
            return Err(Error::ModelFile(format!(
                "{count} parameter blocks, config implies {}",
                layout.params.len()
            )));
        }
        let mut params = ParamStore::new();
        for (want_name, want) in layout.params.iter() {
            let len = r.u32()?;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| Error::ModelFile("block name is not UTF-8".into()))?;
            if name != want_name {
                return Err(Error::ModelFile(format!("expected block {want_name:?}, found {name:?}")));
            }
            let ndim = r.u32()?;
            let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            if shape != want.shape() {
                return Err(Error::ModelFile(format!(
                    "block {name:?} has shape {shape:?}, expected {:?}",
                    want.shape()
                )));
            }
            let data = r
                .take(4 * want.len())?
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect();
            let value = Array::new(shape, data).map_err(|e| Error::ModelFile(format!("block {name:?}: {e}")))?;
            params.insert(name, value);
        }
        if r.pos != bytes.len() {
            return Err(Error::ModelFile(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(TrackerModel { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// One `name<TAB>shape` line per block, in file order.
    pub fn manifest(&self) -> String {
        self.params
            .iter()
            .map(|(n, v)| format!("{n}\t{:?}\n", v.shape()))
            .collect()
    }

    /// SHA-256 of the serialized model, hex encoded.
    pub fn hash(&self) -> Result<String> {
        Ok(hash_bytes(&self.to_bytes()?))
    }

    /// SHA-256 of each parameter block's f32 bytes.
    pub fn block_hashes(&self) -> BTreeMap<String, String> {
        self.params
            .iter()
            .map(|(n, v)| {
                let bytes: Vec<u8> = v.data().iter().flat_map(|&x| (x as f32).to_le_bytes()).collect();
                (n.to_string(), hash_bytes(&bytes))
            })
            .collect()
    }
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn push_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::ModelFile(format!("{v} does not fit a u32 field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::ModelFile(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}
