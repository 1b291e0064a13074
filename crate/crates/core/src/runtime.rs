//! Frame-by-frame tracking: search cropping, forward pass, Hanning-penalized
//! decoding, presence decision, template update and prompt refresh.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::datamodel::{crop_resize, pack_unified, BBox, CropMapping, Frame, Modality, Sequence, UnifiedInput};
use crate::error::{Error, Result};
use crate::headloss::decode_with_scores;
use crate::model::{PromptMode, Prompting, TrackerModel};
use crate::numerics::{Array, Tape};
use crate::prompt::{prompt_for_frame, PromptState, SizeCategory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuntimeConfig {
    pub update_interval: usize,
    /// The template is replaced only when confidence strictly exceeds this.
    pub conf_threshold: f64,
    /// The target is reported present when confidence reaches this.
    pub absent_threshold: f64,
    pub hann_weight: f64,
    pub crop_factor_search: f64,
    pub crop_factor_template: f64,
    /// Search window growth per absent frame.
    pub absent_growth: f64,
    /// Cap on the accumulated growth.
    pub max_growth: f64,
    /// Smallest search side in pixels.
    pub min_search_side: f64,
    pub prompt_mode: PromptMode,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        RuntimeConfig {
            update_interval: 25,
            conf_threshold: 0.7,
            absent_threshold: 0.5,
            hann_weight: 0.3,
            crop_factor_search: 4.0,
            crop_factor_template: 2.0,
            absent_growth: 1.05,
            max_growth: 2.0,
            min_search_side: 16.0,
            prompt_mode: PromptMode::Text,
        }
    }
}

impl RuntimeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.update_interval == 0 {
            return Err(Error::Config("update_interval must be at least 1".into()));
        }
        for (name, v) in [
            ("conf_threshold", self.conf_threshold),
            ("absent_threshold", self.absent_threshold),
            ("hann_weight", self.hann_weight),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} must lie in [0, 1]")));
            }
        }
        for (name, v) in [
            ("crop_factor_search", self.crop_factor_search),
            ("crop_factor_template", self.crop_factor_template),
            ("min_search_side", self.min_search_side),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} = {v} must be positive")));
            }
        }
        if !(self.absent_growth >= 1.0 && self.max_growth >= 1.0) {
            return Err(Error::Config("absent growth factors must be at least 1".into()));
        }
        Ok(())
    }
}

/// The two-condition template update rule.
pub fn should_update_template(frame_index: usize, confidence: f64, interval: usize, threshold: f64) -> bool {
    frame_index % interval == 0 && confidence > threshold
}

/// Symmetric Hanning window of length `s`, without zero end points.
pub fn hann(s: usize) -> Vec<f64> {
    let mut h = vec![0.0; s];
    for i in 0..s.div_ceil(2) {
        let v = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * (i + 1) as f64 / (s + 1) as f64).cos();
        h[i] = v;
        h[s - 1 - i] = v;
    }
    h
}

/// Outer product of two Hanning windows, as an `s × s` array.
pub fn hann2d(s: usize) -> Array {
    let h = hann(s);
    Array::from_fn(vec![s, s], |k| h[k / s] * h[k % s])
}

/// `(1 − w)·score + w·hann2d`.
pub fn penalize(score: &Array, weight: f64) -> Array {
    let s = score.shape()[0];
    let window = hann2d(s);
    Array::from_fn(vec![s, s], |k| (1.0 - weight) * score.data()[k] + weight * window.data()[k])
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackState {
    pub template: UnifiedInput,
    /// Index of the last processed frame.
    pub frame_index: usize,
    pub last_box: Option<BBox>,
    pub last_confidence: f64,
    pub size_category: SizeCategory,
    /// Center of the next search crop.
    pub center: (f64, f64),
    /// Search side before absence growth.
    pub base_side: f64,
    pub absent_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramePrediction {
    pub frame: usize,
    pub present: bool,
    #[serde(rename = "box")]
    pub bbox: Option<BBox>,
    pub confidence: f64,
    pub prompt: String,
}

/// Runs one model over frames of one modality.
pub struct Tracker<'m> {
    model: &'m TrackerModel,
    config: RuntimeConfig,
    modality: Modality,
    prompts: HashMap<SizeCategory, Vec<Array>>,
}

impl<'m> Tracker<'m> {
    pub fn new(model: &'m TrackerModel, config: RuntimeConfig, modality: Modality) -> Result<Self> {
        config.validate()?;
        if !model.config.accepts(modality) {
            return Err(Error::Config(format!(
                "{} model cannot track {modality} data",
                model.config.modality
            )));
        }
        Ok(Tracker { model, config, modality, prompts: HashMap::new() })
    }

    pub fn config(&self) -> &RuntimeConfig {
        &self.config
    }

    fn search_side(&self, b: &BBox) -> f64 {
        (self.config.crop_factor_search * b.mean_side()).max(self.config.min_search_side)
    }

    pub fn init(&self, frame: &Frame, gt: &BBox) -> Result<(TrackState, FramePrediction)> {
        let (w, h) = (frame.width() as f64, frame.height() as f64);
        let (cx, cy) = gt.center();
        if !gt.is_finite() || gt.w <= 0.0 || gt.h <= 0.0 || !(0.0..w).contains(&cx) || !(0.0..h).contains(&cy) {
            return Err(Error::Parameter(format!("initial box {gt:?} is not a valid box inside the {w}x{h} frame")));
        }
        let (category, prompt) = prompt_for_frame(0, Some(gt), None, None, &self.model.config.prompt)?;
        let template = self.crop_template(frame, gt)?;
        let state = TrackState {
            template,
            frame_index: 0,
            last_box: Some(*gt),
            last_confidence: 1.0,
            size_category: category,
            center: (cx, cy),
            base_side: self.search_side(gt),
            absent_frames: 0,
        };
        let pred = FramePrediction { frame: 0, present: true, bbox: Some(*gt), confidence: 1.0, prompt };
        Ok((state, pred))
    }

    fn crop_template(&self, frame: &Frame, b: &BBox) -> Result<UnifiedInput> {
        let (cx, cy) = b.center();
        let side = self.config.crop_factor_template * b.mean_side();
        let packed = pack_unified(frame, self.modality)?;
        Ok(crop_resize(&packed, cx, cy, side, self.model.config.encoder.template_size)?.0)
    }

    /// Search crop for the next frame: centered on the last box, or on the
    /// last known center with a grown window while the target is missing.
    pub fn crop_search(&self, frame: &Frame, state: &TrackState) -> Result<(UnifiedInput, CropMapping, bool)> {
        let growth = self
            .config
            .absent_growth
            .powi(state.absent_frames.min(i32::MAX as usize) as i32)
            .min(self.config.max_growth);
        let (cx, cy) = match state.last_box {
            Some(b) => b.center(),
            None => state.center,
        };
        let packed = pack_unified(frame, self.modality)?;
        crop_resize(&packed, cx, cy, state.base_side * growth, self.model.config.encoder.search_size)
    }

    fn prompt_values(&mut self, category: SizeCategory, text: &str) -> Result<&[Array]> {
        if !self.prompts.contains_key(&category) {
            let values = self.model.prompt_values(text)?;
            self.prompts.insert(category, values);
        }
        Ok(&self.prompts[&category])
    }

    pub fn step(&mut self, frame: &Frame, state: &TrackState) -> Result<(FramePrediction, TrackState)> {
        let index = state.frame_index + 1;
        let (category, prompt) = prompt_for_frame(
            index,
            None,
            state.last_box.as_ref(),
            Some(state.size_category),
            &self.model.config.prompt,
        )?;
        let (search, mapping, _) = self.crop_search(frame, state)?;
        let enc = &self.model.config.encoder;
        let (patch, search_size) = (enc.patch_size, enc.search_size);
        let mode = self.config.prompt_mode;
        let values = match mode {
            PromptMode::Text => Some(self.prompt_values(category, &prompt)?.to_vec()),
            _ => None,
        };

        let tape = Tape::new();
        let params = self.model.params.bind_frozen(&tape);
        let encoded = values.map(|v| PromptState {
            text: prompt.clone(),
            layers: v.into_iter().map(|a| tape.constant(a)).collect(),
        });
        let prompting = match (&encoded, mode) {
            (Some(p), _) => Prompting::Encoded(p),
            (None, PromptMode::Zeroed) => Prompting::Zeroed,
            _ => Prompting::Off,
        };
        let maps = self.model.forward(&params, &state.template, &search, prompting)?.maps()?;
        let penalized = penalize(&maps.score, self.config.hann_weight);
        let (crop_box, confidence) = decode_with_scores(&maps, &penalized, patch, search_size)?;

        let image_box = mapping.to_image(&crop_box);
        if !image_box.is_finite() || !confidence.is_finite() {
            return Err(Error::Numeric(format!("frame {index}: non-finite prediction")));
        }
        let clipped = image_box.clip(frame.width() as f64, frame.height() as f64);
        let present = confidence >= self.config.absent_threshold && clipped.is_some();
        let bbox = if present { clipped } else { None };

        let mut next = state.clone();
        next.frame_index = index;
        next.last_box = bbox;
        next.last_confidence = confidence;
        next.size_category = category;
        match bbox {
            Some(b) => {
                next.center = b.center();
                next.base_side = self.search_side(&b);
                next.absent_frames = 0;
                if should_update_template(index, confidence, self.config.update_interval, self.config.conf_threshold) {
                    next.template = self.crop_template(frame, &b)?;
                }
            }
            None => next.absent_frames += 1,
        }
        Ok((FramePrediction { frame: index, present, bbox, confidence, prompt }, next))
    }
}

/// Tracks a whole sequence from its first ground-truth box.
pub fn track_sequence(seq: &Sequence, model: &TrackerModel, config: &RuntimeConfig) -> Result<Vec<FramePrediction>> {
    let first = seq
        .frames
        .first()
        .ok_or_else(|| Error::Parameter(format!("sequence {} is empty", seq.id)))?;
    let gt = seq
        .annotation
        .boxes
        .first()
        .copied()
        .flatten()
        .ok_or_else(|| Error::Parameter(format!("sequence {}: target not visible in frame 0", seq.id)))?;
    let mut tracker = Tracker::new(model, *config, seq.modality)?;
    let (mut state, pred) = tracker.init(first, &gt)?;
    let mut out = Vec::with_capacity(seq.frames.len());
    out.push(pred);
    for frame in &seq.frames[1..] {
        let (pred, next) = tracker.step(frame, &state)?;
        out.push(pred);
        state = next;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::headloss::{argmax, HeadMaps};

    #[test]
    fn update_rule_examples() {
        assert!(should_update_template(50, 0.8, 25, 0.7));
        assert!(!should_update_template(50, 0.6, 25, 0.7));
        assert!(!should_update_template(30, 0.9, 25, 0.7));
        assert!(!should_update_template(25, 0.7, 25, 0.7));
    }

    #[test]
    fn hann_is_symmetric_and_positive() {
        for s in 1..12 {
            let h = hann(s);
            assert!(h.iter().all(|&v| v > 0.0 && v <= 1.0));
            for i in 0..s {
                assert_eq!(h[i], h[s - 1 - i]);
            }
        }
        assert_eq!(hann(3)[1], 1.0);
    }

    #[test]
    fn uniform_map_decodes_to_window_peak() {
        let s = 5;
        let score = Array::full(vec![s, s], 0.3);
        assert_eq!(argmax(penalize(&score, 0.3).data()), 12);
        let maps = HeadMaps {
            score: Array::from_fn(vec![s, s], |k| (k as f64 * 0.37).sin()),
            size: Array::full(vec![s, s, 2], 0.1),
            offset: Array::full(vec![s, s, 2], 0.5),
            presence_logit: 0.0,
        };
        let plain = argmax(maps.score.data());
        assert_eq!(argmax(penalize(&maps.score, 0.0).data()), plain);
    }
}
