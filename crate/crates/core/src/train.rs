//! Toy-scale training: sampled template/search pairs, the composite loss
//! and Adam updates.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{box_diagonal, crop_resize, pack_unified, BBox, Sequence, SequenceDataset, UnifiedInput};
use crate::error::{Error, Result};
use crate::headloss::{total_loss, LossBreakdown, LossConfig};
use crate::model::{PromptMode, Prompting, TrackerModel};
use crate::numerics::{derive_rng, Array, Tape};
use crate::prompt::{categorize, render_prompt};
use crate::runtime::RuntimeConfig;

const SAMPLER_STREAM: u64 = 11;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient norm cap; 0 disables clipping.
    pub clip_norm: f64,
    /// Only parameters outside the encoder layers are updated.
    pub freeze_encoder: bool,
    /// Share of samples drawn as displaced, target-free crops.
    pub negative_fraction: f64,
    /// Largest search-center shift as a fraction of the crop side.
    pub center_jitter: f64,
    /// Search side is scaled by `exp(u)`, `u` uniform in `±scale_jitter`.
    pub scale_jitter: f64,
    /// Largest frame gap between template and search frames.
    pub max_frame_gap: usize,
    pub prompt_mode: PromptMode,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            steps_per_epoch: 100,
            batch_size: 8,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 5.0,
            freeze_encoder: false,
            negative_fraction: 0.15,
            center_jitter: 0.2,
            scale_jitter: 0.15,
            max_frame_gap: 24,
            prompt_mode: PromptMode::Text,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("learning rate must be positive and betas in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.negative_fraction) || !(self.center_jitter >= 0.0) || !(self.scale_jitter >= 0.0) {
            return Err(Error::Config("sampling fractions must be nonnegative (negative_fraction at most 1)".into()));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::Config("clip_norm must be nonnegative".into()));
        }
        self.loss.weights.validate()
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }
}

/// Whether a parameter is updated under the given freeze setting.
pub fn is_trainable(name: &str, freeze_encoder: bool) -> bool {
    !(freeze_encoder && name.starts_with("encoder."))
}

/// One training pair. `gt` is the target box in search-crop coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub template: UnifiedInput,
    pub search: UnifiedInput,
    pub gt: Option<BBox>,
    pub prompt: String,
}

/// Draws sample `index` of the run deterministically from `seed`.
pub fn draw_sample(
    dataset: &SequenceDataset,
    model: &TrackerModel,
    runtime: &RuntimeConfig,
    config: &TrainConfig,
    seed: u64,
    index: u64,
) -> Result<Sample> {
    let mut rng = derive_rng(seed, SAMPLER_STREAM, index);
    let candidates: Vec<&Sequence> = dataset
        .sequences
        .iter()
        .filter(|s| s.annotation.boxes.iter().any(Option::is_some))
        .collect();
    if candidates.is_empty() {
        return Err(Error::Data("no sequence has a visible target to train on".into()));
    }
    let seq = candidates[rng.gen_range(0..candidates.len())];
    let boxes = &seq.annotation.boxes;
    let visible: Vec<usize> = (0..boxes.len()).filter(|&t| boxes[t].is_some()).collect();
    let t0 = visible[rng.gen_range(0..visible.len())];
    let lo = t0.saturating_sub(config.max_frame_gap);
    let hi = (t0 + config.max_frame_gap).min(boxes.len() - 1);
    let t1 = rng.gen_range(lo..=hi);
    let enc = &model.config.encoder;

    let template_box = boxes[t0].expect("visible frame");
    let (tcx, tcy) = template_box.center();
    let packed0 = pack_unified(&seq.frames[t0], seq.modality)?;
    let side_t = runtime.crop_factor_template * template_box.mean_side();
    let template = crop_resize(&packed0, tcx, tcy, side_t, enc.template_size)?.0;

    // search window placed as the tracker would place it: sized from a
    // nearby box, centered near the target
    let anchor = boxes[t1].unwrap_or(template_box);
    let scale = (rng.gen_range(-1.0..=1.0) * config.scale_jitter).exp();
    let side = (runtime.crop_factor_search * anchor.mean_side()).max(runtime.min_search_side) * scale;
    let (acx, acy) = anchor.center();
    let displaced = rng.gen_bool(config.negative_fraction);
    let (dx, dy) = if displaced {
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let dist = side * rng.gen_range(0.75..1.0);
        (dist * angle.cos(), dist * angle.sin())
    } else {
        let j = config.center_jitter * side;
        (rng.gen_range(-j..=j), rng.gen_range(-j..=j))
    };
    let packed1 = pack_unified(&seq.frames[t1], seq.modality)?;
    let (search, mapping, _) = crop_resize(&packed1, acx + dx, acy + dy, side, enc.search_size)?;
    let extent = enc.search_size as f64;
    let gt = boxes[t1].map(|b| mapping.to_crop(&b)).filter(|b| {
        let (cx, cy) = b.center();
        (0.0..extent).contains(&cx) && (0.0..extent).contains(&cy)
    });
    let category = categorize(box_diagonal(&anchor)?, &model.config.prompt)?;
    Ok(Sample { template, search, gt, prompt: render_prompt(category) })
}

/// Loss and gradients (in parameter order) of one sample.
pub fn sample_gradients(
    model: &TrackerModel,
    sample: &Sample,
    config: &TrainConfig,
) -> Result<(LossBreakdown, Vec<Array>)> {
    let tape = Tape::new();
    let params = model.params.bind(&tape, |n| is_trainable(n, config.freeze_encoder));
    let prompt;
    let prompting = match config.prompt_mode {
        PromptMode::Text => {
            prompt = model.encode_prompt(&params, &sample.prompt)?;
            Prompting::Encoded(&prompt)
        }
        PromptMode::Zeroed => Prompting::Zeroed,
        PromptMode::Off => Prompting::Off,
    };
    let out = model.forward(&params, &sample.template, &sample.search, prompting)?;
    let (loss, breakdown) = total_loss(&out, sample.gt.as_ref(), &model.config.encoder, &config.loss)?;
    let grads = tape.backward(loss)?;
    Ok((breakdown, params.gradients(&grads)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub class: f64,
    pub giou: f64,
    pub l1: f64,
    pub task: f64,
    pub total: f64,
}

/// Adam moments for every parameter block.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(model: &TrackerModel) -> Self {
        let zeros: Vec<Vec<f64>> = model.params.iter().map(|(_, a)| vec![0.0; a.len()]).collect();
        Adam { m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn update(&mut self, model: &mut TrackerModel, grads: &[Array], config: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (config.beta1, config.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for (i, (name, value)) in model.params.iter_mut().enumerate() {
            if !is_trainable(name, config.freeze_encoder) {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, (x, g)) in value.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
                m[k] = b1 * m[k] + (1.0 - b1) * g;
                v[k] = b2 * v[k] + (1.0 - b2) * g * g;
                *x -= config.learning_rate * (m[k] / c1) / ((v[k] / c2).sqrt() + config.adam_eps);
            }
        }
    }
}

fn mean_breakdown(parts: &[LossBreakdown], config: &TrainConfig) -> LossBreakdown {
    let n = parts.len() as f64;
    let avg = |f: fn(&LossBreakdown) -> f64| parts.iter().map(f).sum::<f64>() / n;
    LossBreakdown::new(avg(|b| b.class), avg(|b| b.giou), avg(|b| b.l1), avg(|b| b.task), &config.loss.weights)
}

/// Trains in place for `config.total_steps()` steps, calling `on_step`
/// after each. Per-sample work runs on the rayon pool; gradients are
/// summed in sample order so results do not depend on the thread count.
pub fn train(
    model: &mut TrackerModel,
    dataset: &SequenceDataset,
    runtime: &RuntimeConfig,
    config: &TrainConfig,
    seed: u64,
    mut on_step: impl FnMut(&StepLog) -> Result<()>,
) -> Result<Vec<StepLog>> {
    config.validate()?;
    runtime.validate()?;
    if let Some(seq) = dataset.sequences.iter().find(|s| !model.config.accepts(s.modality)) {
        return Err(Error::Config(format!(
            "{} model cannot train on {} sequence {}",
            model.config.modality, seq.modality, seq.id
        )));
    }
    let mut adam = Adam::new(model);
    let mut log = Vec::with_capacity(config.total_steps());
    let batch = config.batch_size as u64;
    for step in 0..config.total_steps() {
        let snapshot: &TrackerModel = model;
        let results: Vec<(LossBreakdown, Vec<Array>)> = (0..batch)
            .into_par_iter()
            .map(|i| {
                let sample = draw_sample(dataset, snapshot, runtime, config, seed, step as u64 * batch + i)?;
                sample_gradients(snapshot, &sample, config)
            })
            .collect::<Result<_>>()?;

        let mut sum: Vec<Array> = results[0].1.clone();
        for (_, g) in &results[1..] {
            for (acc, x) in sum.iter_mut().zip(g) {
                acc.data_mut().iter_mut().zip(x.data()).for_each(|(a, b)| *a += b);
            }
        }
        let scale = 1.0 / results.len() as f64;
        let norm = sum.iter().flat_map(|a| a.data()).map(|g| (g * scale).powi(2)).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Numeric(format!("step {}: gradient norm is {norm}", step + 1)));
        }
        let clip = if config.clip_norm > 0.0 && norm > config.clip_norm { config.clip_norm / norm } else { 1.0 };
        for a in &mut sum {
            a.data_mut().iter_mut().for_each(|g| *g *= scale * clip);
        }
        adam.update(model, &sum, config);

        let parts: Vec<LossBreakdown> = results.iter().map(|r| r.0).collect();
        let b = mean_breakdown(&parts, config);
        if !b.total.is_finite() {
            return Err(Error::Numeric(format!("step {}: loss diverged ({:?})", step + 1, b)));
        }
        let entry = StepLog { step: step + 1, class: b.class, giou: b.giou, l1: b.l1, task: b.task, total: b.total };
        on_step(&entry)?;
        log.push(entry);
    }
    model.round_to_f32();
    Ok(log)
}
