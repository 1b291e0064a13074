//! Randomized record sets and a direct per-frame state-accuracy oracle.

use rand::Rng as _;
use std::collections::BTreeMap;
use uautrack::datamodel::{synth_dataset, BBox, Modality, SequenceDataset, SynthDatasetParams};
use uautrack::eval::{state_accuracy, success_thresholds, FrameRecord, MetricReport, StreamingSa};
use uautrack::numerics::{seeded_rng, Rng};
use uautrack::runtime::FramePrediction;

/// Intersection-over-union written out from corner coordinates. Rounding
/// in `x + w − x` can push identical boxes just above 1, hence the clamp.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = ((a.x + a.w).min(b.x + b.w) - a.x.max(b.x)).max(0.0);
    let ih = ((a.y + a.h).min(b.y + b.h) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    (inter / (a.w * a.h + b.w * b.h - inter)).min(1.0)
}

/// One frame: ground truth (None when invisible) and prediction (None when
/// reported missing).
pub type Pair = (Option<BBox>, Option<BBox>);

fn random_box(rng: &mut Rng) -> BBox {
    BBox::new(rng.gen_range(0.0..50.0), rng.gen_range(0.0..50.0), rng.gen_range(1.0..20.0), rng.gen_range(1.0..20.0))
}

/// Mixes ordinary, all-invisible and perfect sets.
pub fn random_pairs(rng: &mut Rng) -> Vec<Pair> {
    let n = rng.gen_range(1..60);
    let kind = rng.gen_range(0..6);
    (0..n)
        .map(|_| {
            let gt = match kind {
                0 => None,
                1 => Some(random_box(rng)),
                _ => rng.gen_bool(0.8).then(|| random_box(rng)),
            };
            let pred = match (kind, gt) {
                (0, _) if rng.gen_bool(0.5) => None,
                (1, g) => g,
                (_, Some(g)) if rng.gen_bool(0.3) => Some(g.translate(rng.gen_range(-3.0..3.0), 0.0)),
                _ => rng.gen_bool(0.7).then(|| random_box(rng)),
            };
            (gt, pred)
        })
        .collect()
}

/// The per-frame sum: IoU where the target is visible, 1 for a correct
/// missing report where it is not.
pub fn sa_oracle(pairs: &[Pair]) -> f64 {
    let mut total = 0.0;
    for (gt, pred) in pairs {
        let visible = gt.is_some();
        let reported_missing = pred.is_none();
        total += match (gt, pred) {
            (Some(g), Some(p)) => iou(g, p),
            _ if !visible && reported_missing => 1.0,
            _ => 0.0,
        };
    }
    total / pairs.len() as f64
}

pub struct SaTrial {
    pub streaming: f64,
    pub batch: f64,
    pub oracle: f64,
}

pub fn sa_trial(seed: u64) -> SaTrial {
    let mut rng = seeded_rng(seed);
    let pairs = random_pairs(&mut rng);
    let records: Vec<FrameRecord> = pairs.iter().map(|(g, p)| FrameRecord::new(g.as_ref(), p.as_ref())).collect();
    let mut s = StreamingSa::default();
    records.iter().for_each(|r| s.push(r));
    SaTrial { streaming: s.value().unwrap(), batch: state_accuracy(&records).unwrap(), oracle: sa_oracle(&pairs) }
}

/// Success AUC by enumerating the thresholds directly.
pub fn auc_brute_force(ious: &[f64]) -> f64 {
    let thresholds = success_thresholds();
    let mut sum = 0.0;
    for t in &thresholds {
        let pass = ious.iter().filter(|&&v| v > *t).count();
        sum += pass as f64 / ious.len() as f64;
    }
    sum / thresholds.len() as f64
}

/// A small synthetic dataset with an occlusion window.
pub fn occluded_dataset(seed: u64) -> SequenceDataset {
    synth_dataset(&SynthDatasetParams {
        seed,
        count: 3,
        length: 20,
        img_size: 64,
        modality: Modality::Rgbt,
        occlusion_windows: vec![(8, 12)],
        ..SynthDatasetParams::default()
    })
    .unwrap()
}

/// Predictions that repeat the ground truth exactly.
pub fn echo_predictions(ds: &SequenceDataset) -> BTreeMap<String, Vec<FramePrediction>> {
    ds.sequences
        .iter()
        .map(|seq| {
            let preds = seq
                .annotation
                .boxes
                .iter()
                .enumerate()
                .map(|(frame, b)| FramePrediction {
                    frame,
                    present: b.is_some(),
                    bbox: *b,
                    confidence: 1.0,
                    prompt: String::new(),
                })
                .collect();
            (seq.id.clone(), preds)
        })
        .collect()
}

/// Aggregate SA, precision and normalized precision of a report.
pub fn headline(report: &MetricReport) -> (f64, Option<f64>, Option<f64>) {
    let a = &report.aggregate;
    (a.sa, a.precision, a.norm_precision)
}
