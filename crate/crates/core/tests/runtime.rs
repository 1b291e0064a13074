//! Tracking loop: template updates, cropping, decoding and absence handling.

mod common;

use common::state_oracle::{update_oracle, update_rule_mismatches, UPDATE_BOUNDARIES};
use uautrack::datamodel::{synth_dataset, BBox, Modality, Sequence, SynthDatasetParams};
use uautrack::headloss::{argmax, cell_of, decode_box, HeadMaps};
use uautrack::model::{ModelConfig, PromptMode, TrackerModel};
use uautrack::numerics::{seeded_rng, Array};
use uautrack::prompt::{parse_prompt, SizeCategory};
use uautrack::runtime::{hann, hann2d, penalize, should_update_template, track_sequence, RuntimeConfig, Tracker};
use uautrack::Error;

fn sequence(seed: u64, length: usize, occlusion: Vec<(usize, usize)>) -> Sequence {
    synth_dataset(&SynthDatasetParams {
        seed,
        count: 1,
        length,
        occlusion_windows: occlusion,
        ..SynthDatasetParams::default()
    })
    .unwrap()
    .sequences
    .remove(0)
}

fn model() -> TrackerModel {
    TrackerModel::init(ModelConfig::default(), 3).unwrap()
}

/// A model whose score map is the constant `sigmoid(bias)`.
fn constant_score_model(bias: f64) -> TrackerModel {
    let mut m = model();
    for (name, v) in m.params.iter_mut() {
        if name == "head.score.w2" {
            v.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        if name == "head.score.b2" {
            v.data_mut().iter_mut().for_each(|x| *x = bias);
        }
    }
    m
}

#[test]
fn update_rule_matches_oracle_on_10k_pairs() {
    assert_eq!(update_rule_mismatches(5, 10_000), 0);
}

#[test]
fn update_rule_boundaries() {
    for (index, conf, expected) in UPDATE_BOUNDARIES {
        assert_eq!(should_update_template(index, conf, 25, 0.7), expected, "({index}, {conf})");
        assert_eq!(update_oracle(index, conf), expected);
    }
}

#[test]
fn template_changes_only_when_the_rule_fires() {
    let seq = sequence(11, 60, vec![]);
    let m = constant_score_model(6.0);
    let cfg = RuntimeConfig::default();
    let mut tracker = Tracker::new(&m, cfg, seq.modality).unwrap();
    let (mut state, _) = tracker.init(&seq.frames[0], &seq.annotation.boxes[0].unwrap()).unwrap();
    let mut updates = Vec::new();
    for frame in &seq.frames[1..] {
        let (pred, next) = tracker.step(frame, &state).unwrap();
        let fired = pred.present && should_update_template(pred.frame, pred.confidence, 25, 0.7);
        assert_eq!(next.template != state.template, fired, "frame {}", pred.frame);
        if fired {
            updates.push(pred.frame);
        }
        state = next;
    }
    assert_eq!(updates, vec![25, 50]);
}

#[test]
fn low_scores_mean_absent_with_growing_window_and_carried_prompt() {
    let seq = sequence(12, 30, vec![]);
    let m = constant_score_model(-6.0);
    let cfg = RuntimeConfig::default();
    let mut tracker = Tracker::new(&m, cfg, seq.modality).unwrap();
    let gt = seq.annotation.boxes[0].unwrap();
    let (mut state, first) = tracker.init(&seq.frames[0], &gt).unwrap();
    let mut sides = Vec::new();
    for frame in &seq.frames[1..] {
        let (_, mapping, _) = tracker.crop_search(frame, &state).unwrap();
        sides.push(mapping.scale * m.config.encoder.search_size as f64);
        let (pred, next) = tracker.step(frame, &state).unwrap();
        assert!(!pred.present && pred.bbox.is_none());
        assert_eq!(pred.prompt, first.prompt);
        assert_eq!(next.template, state.template);
        assert_eq!(next.center, state.center);
        state = next;
    }
    let base = sides[0];
    for (k, s) in sides.iter().enumerate() {
        let expected = base * 1.05f64.powi(k as i32).min(2.0);
        assert!((s - expected).abs() < 1e-9, "frame {}: {s} vs {expected}", k + 1);
    }
}

#[test]
fn init_picks_tiny_at_the_first_boundary() {
    let seq = sequence(13, 2, vec![]);
    let m = model();
    let tracker = Tracker::new(&m, RuntimeConfig::default(), seq.modality).unwrap();
    let (state, pred) = tracker.init(&seq.frames[0], &BBox::new(10.0, 10.0, 8.0, 6.0)).unwrap();
    assert_eq!(state.size_category, SizeCategory::Tiny);
    assert_eq!(pred.prompt, "track a tiny drone");
    assert_eq!((state.frame_index, state.last_confidence), (0, 1.0));
    let again = tracker.init(&seq.frames[0], &BBox::new(10.0, 10.0, 8.0, 6.0)).unwrap();
    assert_eq!(again.0, state);
    assert!(matches!(
        tracker.init(&seq.frames[0], &BBox::new(10.0, 10.0, 0.0, 6.0)),
        Err(Error::Parameter(_))
    ));
}

#[test]
fn crop_mapping_round_trip_within_half_pixel() {
    let seq = sequence(14, 2, vec![]);
    let m = model();
    let enc = &m.config.encoder;
    let (patch, size) = (enc.patch_size, enc.search_size);
    let s = size / patch;
    let tracker = Tracker::new(&m, RuntimeConfig::default(), seq.modality).unwrap();
    let mut rng = seeded_rng(15);
    for _ in 0..200 {
        let v = Array::uniform(vec![4], 0.0, 1.0, &mut rng).into_data();
        let gt = BBox::from_center(2.0 + 60.0 * v[0], 2.0 + 60.0 * v[1], 3.0 + 12.0 * v[2], 3.0 + 12.0 * v[3]);
        let (state, _) = tracker.init(&seq.frames[0], &gt).unwrap();
        let (_, mapping, _) = tracker.crop_search(&seq.frames[1], &state).unwrap();
        let in_crop = mapping.to_crop(&gt);
        let (cx, cy) = in_crop.center();
        assert!((cx - size as f64 / 2.0).abs() < 1e-9 && (cy - size as f64 / 2.0).abs() < 1e-9);

        let (row, col) = cell_of(cx, cy, patch, s).unwrap();
        let k = row * s + col;
        let mut score = Array::zeros(vec![s, s]);
        score.data_mut()[k] = 1.0;
        let mut offset = Array::zeros(vec![s, s, 2]);
        let mut sz = Array::zeros(vec![s, s, 2]);
        offset.data_mut()[2 * k] = cx / patch as f64 - col as f64;
        offset.data_mut()[2 * k + 1] = cy / patch as f64 - row as f64;
        sz.data_mut()[2 * k] = in_crop.w / size as f64;
        sz.data_mut()[2 * k + 1] = in_crop.h / size as f64;
        let maps = HeadMaps { score, size: sz, offset, presence_logit: 0.0 };
        let back = mapping.to_image(&decode_box(&maps, patch, size).0);
        for (a, b) in [(back.x, gt.x), (back.y, gt.y), (back.w, gt.w), (back.h, gt.h)] {
            assert!((a - b).abs() < 0.5);
        }
    }
}

#[test]
fn corner_target_gets_a_padded_crop() {
    let seq = sequence(16, 2, vec![]);
    let m = model();
    let tracker = Tracker::new(&m, RuntimeConfig::default(), seq.modality).unwrap();
    let (state, _) = tracker.init(&seq.frames[0], &BBox::new(0.0, 0.0, 6.0, 6.0)).unwrap();
    let (_, _, padded) = tracker.crop_search(&seq.frames[1], &state).unwrap();
    assert!(padded);
    let (state, _) = tracker.init(&seq.frames[0], &BBox::new(28.0, 28.0, 6.0, 6.0)).unwrap();
    assert!(!tracker.crop_search(&seq.frames[1], &state).unwrap().2);
}

#[test]
fn one_frame_sequence_echoes_ground_truth() {
    let seq = sequence(17, 1, vec![]);
    let preds = track_sequence(&seq, &model(), &RuntimeConfig::default()).unwrap();
    let gt = seq.annotation.boxes[0].unwrap();
    assert_eq!(preds.len(), 1);
    assert_eq!(preds[0].bbox, Some(gt));
    assert!(preds[0].present && preds[0].confidence == 1.0);
    assert_eq!(gt.iou(&preds[0].bbox.unwrap()), 1.0);
}

#[test]
fn tracking_is_deterministic_finite_and_clipped() {
    let seq = sequence(18, 30, vec![(10, 14)]);
    let m = model();
    for mode in [PromptMode::Text, PromptMode::Zeroed, PromptMode::Off] {
        let cfg = RuntimeConfig { prompt_mode: mode, ..RuntimeConfig::default() };
        let a = track_sequence(&seq, &m, &cfg).unwrap();
        let b = track_sequence(&seq, &m, &cfg).unwrap();
        assert_eq!(a, b);
        for p in &a {
            assert!(p.confidence.is_finite());
            assert_eq!(p.present, p.bbox.is_some());
            if let Some(b) = p.bbox {
                assert!(b.is_finite() && b.x >= 0.0 && b.y >= 0.0 && b.right() <= 64.0 && b.bottom() <= 64.0);
            }
        }
        // The prompt follows the category of the previous prediction.
        for w in a.windows(2) {
            let expected = match w[0].bbox {
                Some(b) => uautrack::prompt::categorize(b.w.hypot(b.h), &m.config.prompt).unwrap(),
                None => parse_prompt(&w[0].prompt).unwrap(),
            };
            assert_eq!(parse_prompt(&w[1].prompt), Some(expected));
        }
    }
}

#[test]
fn modality_mismatch_is_rejected() {
    let m = TrackerModel::init(ModelConfig { modality: Modality::Tir, ..ModelConfig::default() }, 1).unwrap();
    assert!(matches!(Tracker::new(&m, RuntimeConfig::default(), Modality::Rgb), Err(Error::Config(_))));
    assert!(Tracker::new(&m, RuntimeConfig::default(), Modality::Tir).is_ok());
    let bad = RuntimeConfig { update_interval: 0, ..RuntimeConfig::default() };
    assert!(Tracker::new(&m, bad, Modality::Tir).is_err());
}

#[test]
fn zero_hann_weight_keeps_the_raw_argmax() {
    let mut rng = seeded_rng(19);
    for s in [3, 4, 8, 9] {
        for _ in 0..100 {
            let score = Array::uniform(vec![s, s], 0.0, 1.0, &mut rng);
            let p = penalize(&score, 0.0);
            assert_eq!(p, score);
            assert_eq!(argmax(p.data()), argmax(score.data()));
        }
    }
}

#[test]
fn uniform_map_decodes_at_the_window_peak() {
    for s in [3usize, 5, 7, 4, 8] {
        let p = penalize(&Array::full(vec![s, s], 0.4), 0.3);
        let k = argmax(p.data());
        let (row, col) = (k / s, k % s);
        // Odd grids have one center; even grids resolve to the upper-left
        // of the four central cells.
        assert_eq!((row, col), ((s - 1) / 2, (s - 1) / 2), "s = {s}");
    }
}

#[test]
fn hann_window_is_symmetric_and_positive() {
    for s in 1..20 {
        let h = hann(s);
        assert!(h.iter().all(|&v| v > 0.0 && v <= 1.0));
        for i in 0..s {
            assert_eq!(h[i], h[s - 1 - i]);
        }
        let w = hann2d(s);
        assert_eq!(w, w.transpose().unwrap().reshape(vec![s, s]).unwrap());
    }
    assert!((hann(1)[0] - 1.0).abs() < 1e-15);
}
