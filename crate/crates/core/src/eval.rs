//! Anti-UAV metrics: state accuracy, success AUC, precision and
//! normalized precision, per sequence and macro-averaged.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datamodel::{BBox, SequenceDataset};
use crate::error::{Error, Result};
use crate::fsutil::{read_to_string, write_atomic, write_json};
use crate::runtime::FramePrediction;

pub const PRECISION_THRESHOLD_PX: f64 = 20.0;

/// `0.00, 0.05, …, 1.00`.
pub fn success_thresholds() -> Vec<f64> {
    (0..=20).map(|i| i as f64 * 0.05).collect()
}

/// `0, 1, …, 50` pixels.
pub fn precision_thresholds() -> Vec<f64> {
    (0..=50).map(f64::from).collect()
}

/// `0.00, 0.05, …, 0.50`.
pub fn norm_precision_thresholds() -> Vec<f64> {
    (0..=10).map(|i| i as f64 * 0.05).collect()
}

/// Per-frame comparison of a prediction with the ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    /// IoU when both boxes exist, else 0.
    pub iou: f64,
    pub visible: bool,
    /// The tracker reported the target missing.
    pub missing: bool,
    /// Center distance in pixels when both boxes exist.
    pub center_error: Option<f64>,
    /// Center error with each axis divided by the ground-truth extent.
    pub norm_error: Option<f64>,
}

impl FrameRecord {
    pub fn new(gt: Option<&BBox>, pred: Option<&BBox>) -> Self {
        match (gt, pred) {
            (Some(g), Some(p)) => {
                let ((gx, gy), (px, py)) = (g.center(), p.center());
                let (dx, dy) = (px - gx, py - gy);
                FrameRecord {
                    iou: g.iou(p),
                    visible: true,
                    missing: false,
                    center_error: Some(dx.hypot(dy)),
                    norm_error: Some((dx / g.w).hypot(dy / g.h)),
                }
            }
            _ => FrameRecord {
                iou: 0.0,
                visible: gt.is_some(),
                missing: pred.is_none(),
                center_error: None,
                norm_error: None,
            },
        }
    }

    /// The summand of state accuracy for this frame.
    pub fn sa_term(&self) -> f64 {
        if self.visible {
            self.iou
        } else if self.missing {
            1.0
        } else {
            0.0
        }
    }
}

/// Mean over frames of IoU on visible frames and missing-report
/// correctness on invisible ones.
pub fn state_accuracy(records: &[FrameRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Parameter("state accuracy of an empty record list".into()));
    }
    Ok(records.iter().map(FrameRecord::sa_term).sum::<f64>() / records.len() as f64)
}

fn visible(records: &[FrameRecord], metric: &str) -> Result<Vec<FrameRecord>> {
    if records.is_empty() {
        return Err(Error::Parameter(format!("{metric} of an empty record list")));
    }
    let v: Vec<FrameRecord> = records.iter().filter(|r| r.visible).copied().collect();
    if v.is_empty() {
        return Err(Error::UndefinedMetric(format!("{metric}: no frame has a visible target")));
    }
    Ok(v)
}

fn fraction(records: &[FrameRecord], pass: impl Fn(&FrameRecord) -> bool) -> f64 {
    records.iter().filter(|r| pass(r)).count() as f64 / records.len() as f64
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Fraction of visible frames with IoU strictly above each threshold, and
/// the mean of that curve.
pub fn success_auc(records: &[FrameRecord]) -> Result<(Vec<f64>, f64)> {
    let v = visible(records, "success")?;
    let curve: Vec<f64> = success_thresholds().iter().map(|&t| fraction(&v, |r| r.iou > t)).collect();
    let auc = mean(&curve);
    Ok((curve, auc))
}

/// Fraction of visible frames whose predicted center lies within
/// `threshold` pixels (inclusive). Missing predictions fail.
pub fn precision(records: &[FrameRecord], threshold: f64) -> Result<f64> {
    let v = visible(records, "precision")?;
    Ok(fraction(&v, |r| r.center_error.is_some_and(|e| e <= threshold)))
}

pub fn precision_curve(records: &[FrameRecord]) -> Result<Vec<f64>> {
    precision_thresholds().iter().map(|&t| precision(records, t)).collect()
}

/// Normalized-precision curve over `0..=0.5` and its mean.
pub fn norm_precision(records: &[FrameRecord]) -> Result<(Vec<f64>, f64)> {
    let v = visible(records, "normalized precision")?;
    let curve: Vec<f64> = norm_precision_thresholds()
        .iter()
        .map(|&t| fraction(&v, |r| r.norm_error.is_some_and(|e| e <= t)))
        .collect();
    let value = mean(&curve);
    Ok((curve, value))
}

/// Incremental state accuracy; agrees exactly with [`state_accuracy`] on
/// the same frames in the same order.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StreamingSa {
    sum: f64,
    count: usize,
}

impl StreamingSa {
    pub fn push(&mut self, record: &FrameRecord) {
        self.sum += record.sa_term();
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn value(&self) -> Result<f64> {
        if self.count == 0 {
            return Err(Error::Parameter("state accuracy of an empty record list".into()));
        }
        Ok(self.sum / self.count as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Curves {
    pub success: Option<Vec<f64>>,
    pub precision: Option<Vec<f64>>,
    pub norm_precision: Option<Vec<f64>>,
}

/// Metrics of one sequence. Metrics that exclude invisible frames are
/// `None` when no frame is visible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceReport {
    pub id: String,
    pub frames: usize,
    pub visible_frames: usize,
    pub sa: f64,
    pub auc: Option<f64>,
    pub precision: Option<f64>,
    pub norm_precision: Option<f64>,
    pub curves: Curves,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Aggregate {
    pub sequences: usize,
    pub frames: usize,
    pub sa: f64,
    pub auc: Option<f64>,
    pub precision: Option<f64>,
    pub norm_precision: Option<f64>,
    pub curves: Curves,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    pub success_thresholds: Vec<f64>,
    pub precision_thresholds: Vec<f64>,
    pub norm_precision_thresholds: Vec<f64>,
    pub precision_threshold_px: f64,
    pub aggregate: Aggregate,
    pub sequences: Vec<SequenceReport>,
}

fn defined<T>(r: Result<T>) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

pub fn sequence_report(id: &str, records: &[FrameRecord]) -> Result<SequenceReport> {
    let success = defined(success_auc(records))?;
    let norm = defined(norm_precision(records))?;
    Ok(SequenceReport {
        id: id.to_string(),
        frames: records.len(),
        visible_frames: records.iter().filter(|r| r.visible).count(),
        sa: state_accuracy(records)?,
        auc: success.as_ref().map(|s| s.1),
        precision: defined(precision(records, PRECISION_THRESHOLD_PX))?,
        norm_precision: norm.as_ref().map(|n| n.1),
        curves: Curves {
            success: success.map(|s| s.0),
            precision: defined(precision_curve(records))?,
            norm_precision: norm.map(|n| n.0),
        },
    })
}

fn macro_mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| mean(&v))
}

fn macro_curve<'a>(curves: impl Iterator<Item = &'a Option<Vec<f64>>>) -> Option<Vec<f64>> {
    let c: Vec<&Vec<f64>> = curves.flatten().collect();
    let first = c.first()?;
    Some((0..first.len()).map(|i| c.iter().map(|v| v[i]).sum::<f64>() / c.len() as f64).collect())
}

/// Macro-average over sequences in the order given.
pub fn aggregate(sequences: Vec<SequenceReport>) -> Result<MetricReport> {
    if sequences.is_empty() {
        return Err(Error::Parameter("no sequences to evaluate".into()));
    }
    let aggregate = Aggregate {
        sequences: sequences.len(),
        frames: sequences.iter().map(|s| s.frames).sum(),
        sa: mean(&sequences.iter().map(|s| s.sa).collect::<Vec<_>>()),
        auc: macro_mean(sequences.iter().map(|s| s.auc)),
        precision: macro_mean(sequences.iter().map(|s| s.precision)),
        norm_precision: macro_mean(sequences.iter().map(|s| s.norm_precision)),
        curves: Curves {
            success: macro_curve(sequences.iter().map(|s| &s.curves.success)),
            precision: macro_curve(sequences.iter().map(|s| &s.curves.precision)),
            norm_precision: macro_curve(sequences.iter().map(|s| &s.curves.norm_precision)),
        },
    };
    Ok(MetricReport {
        success_thresholds: success_thresholds(),
        precision_thresholds: precision_thresholds(),
        norm_precision_thresholds: norm_precision_thresholds(),
        precision_threshold_px: PRECISION_THRESHOLD_PX,
        aggregate,
        sequences,
    })
}

/// Frame records of one sequence; frame numbers must run `0..T`.
pub fn frame_records(id: &str, gt: &[Option<BBox>], preds: &[FramePrediction]) -> Result<Vec<FrameRecord>> {
    let err = |message: String| Error::Evaluation { sequence: id.to_string(), message };
    if preds.len() != gt.len() {
        return Err(err(format!("{} predictions for {} frames", preds.len(), gt.len())));
    }
    preds
        .iter()
        .zip(gt)
        .enumerate()
        .map(|(t, (p, g))| {
            if p.frame != t {
                return Err(err(format!("prediction {t} is numbered {}", p.frame)));
            }
            if p.present != p.bbox.is_some() {
                return Err(err(format!("frame {t}: present flag disagrees with box")));
            }
            Ok(FrameRecord::new(g.as_ref(), p.bbox.as_ref()))
        })
        .collect()
}

/// Evaluates predictions keyed by sequence id against the dataset.
pub fn evaluate_run(predictions: &BTreeMap<String, Vec<FramePrediction>>, dataset: &SequenceDataset) -> Result<MetricReport> {
    let mut ids: Vec<&str> = dataset.ids();
    ids.sort_unstable();
    if let Some(extra) = predictions.keys().find(|k| dataset.get(k).is_none()) {
        return Err(Error::Evaluation { sequence: extra.clone(), message: "no such sequence in the dataset".into() });
    }
    let mut reports = Vec::with_capacity(ids.len());
    for id in ids {
        let seq = dataset.get(id).expect("listed id");
        let preds = predictions
            .get(id)
            .ok_or_else(|| Error::Evaluation { sequence: id.to_string(), message: "missing prediction file".into() })?;
        let records = frame_records(id, &seq.annotation.boxes, preds)?;
        reports.push(sequence_report(id, &records)?);
    }
    aggregate(reports)
}

pub fn prediction_path(dir: &Path, id: &str) -> std::path::PathBuf {
    dir.join(format!("{id}.jsonl"))
}

pub fn read_predictions(path: &Path) -> Result<Vec<FramePrediction>> {
    let text = read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| Error::Ingestion {
                file: path.to_path_buf(),
                line: Some(i + 1),
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn write_predictions(path: &Path, preds: &[FramePrediction]) -> Result<()> {
    let mut out = String::new();
    for p in preds {
        out.push_str(&serde_json::to_string(p).map_err(|e| Error::Json { path: path.into(), source: e })?);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Reads `<dir>/<id>.jsonl` for every dataset sequence.
pub fn load_predictions(dir: &Path, dataset: &SequenceDataset) -> Result<BTreeMap<String, Vec<FramePrediction>>> {
    let mut out = BTreeMap::new();
    for id in dataset.ids() {
        let path = prediction_path(dir, id);
        if !path.exists() {
            return Err(Error::Evaluation {
                sequence: id.to_string(),
                message: format!("missing prediction file {}", path.display()),
            });
        }
        out.insert(id.to_string(), read_predictions(&path)?);
    }
    Ok(out)
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

/// Aligned plain-text table.
pub fn render_text(report: &MetricReport) -> String {
    let rows: Vec<[String; 7]> = report
        .sequences
        .iter()
        .map(|s| {
            [
                s.id.clone(),
                s.frames.to_string(),
                s.visible_frames.to_string(),
                format!("{:.4}", s.sa),
                cell(s.auc),
                cell(s.precision),
                cell(s.norm_precision),
            ]
        })
        .chain(std::iter::once({
            let a = &report.aggregate;
            [
                "mean".to_string(),
                a.frames.to_string(),
                String::new(),
                format!("{:.4}", a.sa),
                cell(a.auc),
                cell(a.precision),
                cell(a.norm_precision),
            ]
        }))
        .collect();
    let header = ["sequence", "frames", "visible", "SA", "AUC", "P", "P_norm"];
    let widths: Vec<usize> = (0..7)
        .map(|c| rows.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: &[&str]| {
        let mut s = String::new();
        for (c, v) in cells.iter().enumerate() {
            if c == 0 {
                let _ = write!(s, "{v:<w$}", w = widths[c]);
            } else {
                let _ = write!(s, "  {v:>w$}", w = widths[c]);
            }
        }
        s.push('\n');
        s
    };
    let mut out = line(&header);
    let dashes: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    out.push_str(&line(&dashes.iter().map(String::as_str).collect::<Vec<_>>()));
    for r in &rows {
        out.push_str(&line(&r.iter().map(String::as_str).collect::<Vec<_>>()));
    }
    out
}

fn curve_csv(thresholds: &[f64], values: &[f64]) -> String {
    let mut s = String::from("threshold,value\n");
    for (t, v) in thresholds.iter().zip(values) {
        let _ = writeln!(s, "{t:.2},{v}");
    }
    s
}

/// Writes `report.json`, `report.txt` and one CSV per aggregate curve.
pub fn write_report(dir: &Path, report: &MetricReport) -> Result<()> {
    write_json(&dir.join("report.json"), report)?;
    write_atomic(&dir.join("report.txt"), render_text(report).as_bytes())?;
    let c = &report.aggregate.curves;
    for (name, thresholds, values) in [
        ("success", &report.success_thresholds, &c.success),
        ("precision", &report.precision_thresholds, &c.precision),
        ("norm_precision", &report.norm_precision_thresholds, &c.norm_precision),
    ] {
        if let Some(v) = values {
            write_atomic(&dir.join(format!("curve_{name}.csv")), curve_csv(thresholds, v).as_bytes())?;
        }
    }
    Ok(())
}

pub fn read_report(path: &Path) -> Result<MetricReport> {
    serde_json::from_str(&read_to_string(path)?).map_err(|e| Error::Json { path: path.into(), source: e })
}
