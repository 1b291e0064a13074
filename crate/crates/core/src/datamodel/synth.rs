//! Deterministic synthetic drone sequences: a bright elliptical blob
//! moving over smooth structured clutter, rendered for RGB and thermal.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Annotation, BBox, Frame, Image, Modality, Sequence, SequenceDataset};
use crate::error::{Error, Result};
use crate::numerics::{derive_rng, seeded_rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Motion {
    /// Constant velocity in px/frame, reflecting off the image borders.
    Linear { vx: f64, vy: f64 },
    /// Gaussian steps with the given per-axis standard deviation.
    RandomWalk { step_std: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub seed: u64,
    pub length: usize,
    pub img_size: usize,
    pub motion: Motion,
    pub target_diag_px: f64,
    /// Inclusive frame ranges during which the target is hidden.
    pub occlusion_windows: Vec<(usize, usize)>,
    pub modality: Modality,
    /// Width/height ratio of the target box.
    pub aspect: f64,
    /// Initial center; random inside the image when `None`.
    pub start_center: Option<(f64, f64)>,
}

impl SynthParams {
    pub fn new(seed: u64, length: usize, img_size: usize, motion: Motion, target_diag_px: f64) -> Self {
        SynthParams {
            seed,
            length,
            img_size,
            motion,
            target_diag_px,
            occlusion_windows: Vec::new(),
            modality: Modality::Rgbt,
            aspect: 1.3,
            start_center: None,
        }
    }
}

struct Clutter {
    waves: Vec<(f64, f64, f64, f64)>,
}

impl Clutter {
    fn new<R: Rng>(rng: &mut R, count: usize) -> Self {
        let waves = (0..count)
            .map(|_| {
                let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                let freq = rng.gen_range(0.02..0.12) * std::f64::consts::TAU;
                (freq * angle.cos(), freq * angle.sin(), rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.3..1.0))
            })
            .collect();
        Clutter { waves }
    }

    /// Smooth field in roughly `[-1, 1]`.
    fn at(&self, x: f64, y: f64) -> f64 {
        let total: f64 = self.waves.iter().map(|w| w.3).sum();
        self.waves.iter().map(|&(kx, ky, ph, a)| a * (kx * x + ky * y + ph).sin()).sum::<f64>() / total
    }
}

fn quantize(v: f64) -> f32 {
    // Same arithmetic as decoding an 8-bit file, so saved frames load back bit-exact.
    f32::from((v.clamp(0.0, 1.0) * 255.0).round() as u8) / 255.0
}

/// Maps a thermal intensity to three pseudo-color channels.
fn pseudo_color(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    [v.sqrt(), v.powf(1.5), 0.6 * (std::f64::consts::PI * v).sin()]
}

fn reflect(pos: f64, vel: f64, lo: f64, hi: f64) -> (f64, f64) {
    let (mut p, mut v) = (pos, vel);
    for _ in 0..4 {
        if p < lo {
            p = 2.0 * lo - p;
            v = -v;
        } else if p > hi {
            p = 2.0 * hi - p;
            v = -v;
        } else {
            break;
        }
    }
    (p.clamp(lo, hi), v)
}

/// Generates one sequence. Identical parameters give bit-identical output.
pub fn synth_sequence(params: &SynthParams) -> Result<(Vec<Frame>, Annotation, Modality)> {
    let size = params.img_size as f64;
    if params.length == 0 {
        return Err(Error::Parameter("sequence length must be positive".into()));
    }
    if !(params.target_diag_px > 0.0) || !(params.aspect > 0.0) {
        return Err(Error::Parameter("target diagonal and aspect must be positive".into()));
    }
    let norm = (1.0 + params.aspect * params.aspect).sqrt();
    let (w, h) = (params.target_diag_px * params.aspect / norm, params.target_diag_px / norm);
    if w >= size || h >= size {
        return Err(Error::Parameter(format!(
            "target {w:.1}x{h:.1} does not fit a {0}x{0} image",
            params.img_size
        )));
    }

    let mut rng = seeded_rng(params.seed);
    let (lo_x, hi_x, lo_y, hi_y) = (w / 2.0, size - w / 2.0, h / 2.0, size - h / 2.0);
    let (mut cx, mut cy) = match params.start_center {
        Some((x, y)) => (x, y),
        None => (
            rng.gen_range(lo_x.max(size * 0.25)..hi_x.min(size * 0.75)),
            rng.gen_range(lo_y.max(size * 0.25)..hi_y.min(size * 0.75)),
        ),
    };
    if !(lo_x..=hi_x).contains(&cx) || !(lo_y..=hi_y).contains(&cy) {
        return Err(Error::Parameter(format!("start center ({cx}, {cy}) puts the target outside the image")));
    }

    let sky = Clutter::new(&mut rng, 4);
    let heat = Clutter::new(&mut rng, 3);
    let sky_tint = [rng.gen_range(0.35..0.5), rng.gen_range(0.45..0.6), rng.gen_range(0.6..0.75)];
    let heat_base = rng.gen_range(0.15..0.3);
    let drift = (rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3));
    let pixel_noise = Normal::new(0.0, 0.02).expect("valid std");
    let walk = match params.motion {
        Motion::RandomWalk { step_std } => {
            Some(Normal::new(0.0, step_std).map_err(|e| Error::Parameter(e.to_string()))?)
        }
        Motion::Linear { .. } => None,
    };
    let (mut vx, mut vy) = match params.motion {
        Motion::Linear { vx, vy } => (vx, vy),
        Motion::RandomWalk { .. } => (0.0, 0.0),
    };

    let n = params.img_size;
    let mut frames = Vec::with_capacity(params.length);
    let mut annotation = Annotation::default();
    for t in 0..params.length {
        if t > 0 {
            if let Some(step) = &walk {
                vx = step.sample(&mut rng);
                vy = step.sample(&mut rng);
            }
            let (x, nvx) = reflect(cx + vx, vx, lo_x, hi_x);
            let (y, nvy) = reflect(cy + vy, vy, lo_y, hi_y);
            (cx, cy) = (x, y);
            if walk.is_none() {
                (vx, vy) = (nvx, nvy);
            }
        }
        let visible = !params.occlusion_windows.iter().any(|&(a, b)| (a..=b).contains(&t));
        let gt = BBox::from_center(cx, cy, w, h);
        annotation.exist.push(visible);
        annotation.boxes.push(visible.then_some(gt));

        let (ox, oy) = (drift.0 * t as f64, drift.1 * t as f64);
        let mut rgb = Vec::with_capacity(n * n * 3);
        let mut tir = Vec::with_capacity(n * n * 3);
        for py in 0..n {
            for px in 0..n {
                let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
                let alpha = if visible {
                    let (dx, dy) = ((x - cx) / (w / 2.0), (y - cy) / (h / 2.0));
                    (-(dx * dx + dy * dy) * 1.5).exp()
                } else {
                    0.0
                };
                let cloud = sky.at(x + ox, y + oy);
                for (c, tint) in sky_tint.iter().enumerate() {
                    let bg = tint + 0.18 * cloud + pixel_noise.sample(&mut rng);
                    let target = [0.98, 0.95, 0.9][c];
                    rgb.push(quantize(bg * (1.0 - alpha) + target * alpha));
                }
                let temp = heat_base + 0.1 * heat.at(x + ox, y + oy) + pixel_noise.sample(&mut rng);
                let temp = temp * (1.0 - alpha) + 0.95 * alpha;
                tir.extend(pseudo_color(temp).map(quantize));
            }
        }
        let rgb = params.modality.has_rgb().then(|| Image { width: n, height: n, data: rgb });
        let tir = params.modality.has_tir().then(|| Image { width: n, height: n, data: tir });
        frames.push(Frame { rgb, tir, index: t });
    }
    Ok((frames, annotation, params.modality))
}

/// Knobs for a whole synthetic dataset; per-sequence size, aspect and
/// velocity are drawn from the seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDatasetParams {
    pub seed: u64,
    pub count: usize,
    pub length: usize,
    pub img_size: usize,
    pub modality: Modality,
    pub occlusion_windows: Vec<(usize, usize)>,
    pub random_walk: bool,
    pub diag_range: (f64, f64),
    pub max_speed: f64,
}

impl Default for SynthDatasetParams {
    fn default() -> Self {
        SynthDatasetParams {
            seed: 0,
            count: 8,
            length: 48,
            img_size: 64,
            modality: Modality::Rgbt,
            occlusion_windows: Vec::new(),
            random_walk: false,
            diag_range: (7.0, 16.0),
            max_speed: 1.2,
        }
    }
}

pub fn synth_dataset(p: &SynthDatasetParams) -> Result<SequenceDataset> {
    let mut sequences = Vec::with_capacity(p.count);
    for i in 0..p.count {
        let mut rng = derive_rng(p.seed, 1, i as u64);
        let diag = rng.gen_range(p.diag_range.0..=p.diag_range.1);
        let motion = if p.random_walk {
            Motion::RandomWalk { step_std: p.max_speed / 2.0 }
        } else {
            let speed = rng.gen_range(0.3 * p.max_speed..=p.max_speed);
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            Motion::Linear { vx: speed * angle.cos(), vy: speed * angle.sin() }
        };
        let mut params = SynthParams::new(rng.gen(), p.length, p.img_size, motion, diag);
        params.aspect = rng.gen_range(0.8..1.6);
        params.modality = p.modality;
        params.occlusion_windows = p.occlusion_windows.clone();
        let (frames, annotation, modality) = synth_sequence(&params)?;
        sequences.push(Sequence { id: format!("seq_{i:03}"), modality, frames, annotation });
    }
    Ok(SequenceDataset { sequences })
}
