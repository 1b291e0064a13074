//! Center-point prediction head (score, size and offset maps plus a
//! presence logit) and the composite training loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::BBox;
use crate::encoder::{affine_norm, EncoderConfig, Segment, TokenModality, TokenState};
use crate::error::{Error, Result};
use crate::numerics::{Array, Var};
use crate::params::{Bound, ParamStore};

/// Head outputs on the tape. Maps are stored as `s² × k` row-major grids.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutput<'t> {
    pub grid: usize,
    pub score_logits: Var<'t>,
    pub score: Var<'t>,
    pub size: Var<'t>,
    pub offset: Var<'t>,
    pub presence_logit: Var<'t>,
}

/// Plain-value copy of a head output for decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadMaps {
    /// `s × s`, values in (0, 1).
    pub score: Array,
    /// `s × s × 2`, width and height as fractions of the search size.
    pub size: Array,
    /// `s × s × 2`, sub-cell center offsets.
    pub offset: Array,
    pub presence_logit: f64,
}

impl HeadMaps {
    pub fn grid(&self) -> usize {
        self.score.shape()[0]
    }
}

impl HeadOutput<'_> {
    pub fn maps(&self) -> Result<HeadMaps> {
        let s = self.grid;
        Ok(HeadMaps {
            score: self.score.value().reshape(vec![s, s])?,
            size: self.size.value().reshape(vec![s, s, 2])?,
            offset: self.offset.value().reshape(vec![s, s, 2])?,
            presence_logit: self.presence_logit.item()?,
        })
    }
}

/// Search-segment tokens in grid order. Multimodal states carry one RGB
/// and one TIR token per position; the two are averaged.
pub fn head_input<'t>(state: &TokenState<'t>) -> Result<Var<'t>> {
    let seg = state
        .segment(Segment::Search)?
        .ok_or_else(|| Error::Contract("token state has no search segment".into()))?;
    let pick = |m: TokenModality| -> Vec<usize> {
        seg.modality.iter().enumerate().filter(|(_, &x)| x == m).map(|(i, _)| i).collect()
    };
    let (rgb, tir) = (pick(TokenModality::Rgb), pick(TokenModality::Tir));
    if rgb.is_empty() || tir.is_empty() {
        return Ok(seg.tokens);
    }
    if rgb.len() != tir.len() {
        return Err(Error::Contract(format!(
            "search segment has {} RGB and {} TIR tokens",
            rgb.len(),
            tir.len()
        )));
    }
    seg.tokens.gather_rows(&rgb)?.add(&seg.tokens.gather_rows(&tir)?)?.scale(0.5)
}

fn branch<'t>(x: &Var<'t>, params: &Bound<'t, '_>, name: &str) -> Result<Var<'t>> {
    let p = |s: &str| params.get(&format!("head.{name}.{s}"));
    x.matmul(&p("w1")?)?
        .add_row(&p("b1")?)?
        .relu()?
        .matmul(&p("w2")?)?
        .add_row(&p("b2")?)
}

/// Maps `s² × D` search tokens to score, size and offset grids.
pub fn head_forward<'t>(search_tokens: &Var<'t>, params: &Bound<'t, '_>) -> Result<HeadOutput<'t>> {
    let shape = search_tokens.shape();
    if shape.len() != 2 {
        return Err(Error::Shape(format!("head expects 2-d tokens, got {shape:?}")));
    }
    let n = shape[0];
    let grid = (n as f64).sqrt().round() as usize;
    if grid * grid != n {
        return Err(Error::Shape(format!("{n} search tokens do not form a square grid")));
    }
    let x = affine_norm(search_tokens, params, "head.ln")?;
    let score_logits = branch(&x, params, "score")?;
    let presence_logit = x
        .mean_rows()?
        .matmul(&params.get("head.presence.w")?)?
        .add_row(&params.get("head.presence.b")?)?;
    Ok(HeadOutput {
        grid,
        score: score_logits.sigmoid()?,
        score_logits,
        size: branch(&x, params, "size")?.sigmoid()?,
        offset: branch(&x, params, "offset")?.sigmoid()?,
        presence_logit,
    })
}

pub fn init_params<R: Rng>(embed_dim: usize, store: &mut ParamStore, rng: &mut R) {
    let d = embed_dim;
    let std = 1.0 / (d as f64).sqrt();
    store.insert("head.ln.g", Array::ones(vec![d]));
    store.insert("head.ln.b", Array::zeros(vec![d]));
    for (name, k) in [("score", 1), ("size", 2), ("offset", 2)] {
        store.insert(format!("head.{name}.w1"), Array::randn(vec![d, d], std, rng));
        store.insert(format!("head.{name}.b1"), Array::zeros(vec![d]));
        store.insert(format!("head.{name}.w2"), Array::randn(vec![d, k], std, rng));
        store.insert(format!("head.{name}.b2"), Array::zeros(vec![k]));
    }
    store.insert("head.presence.w", Array::randn(vec![d, 1], std, rng));
    store.insert("head.presence.b", Array::zeros(vec![1]));
}

fn check_extent(b: &BBox) -> Result<()> {
    if !b.is_finite() || b.w < 0.0 || b.h < 0.0 {
        return Err(Error::Parameter(format!("box {b:?} has a negative or non-finite extent")));
    }
    Ok(())
}

/// Generalized IoU in [−1, 1].
pub fn giou(a: &BBox, b: &BBox) -> Result<f64> {
    check_extent(a)?;
    check_extent(b)?;
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    let iou = if union > 0.0 {
        inter / union
    } else if a == b {
        1.0
    } else {
        0.0
    };
    let cw = a.right().max(b.right()) - a.x.min(b.x);
    let ch = a.bottom().max(b.bottom()) - a.y.min(b.y);
    let c = cw * ch;
    if c > 0.0 {
        Ok(iou - (c - union) / c)
    } else {
        Ok(iou)
    }
}

/// GIoU between `1 × 4` corner rows `[x1, y1, x2, y2]`.
pub fn giou_var<'t>(a: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
    let col = |v: &Var<'t>, i| v.slice_cols(i, 1);
    let (ax1, ay1, ax2, ay2) = (col(a, 0)?, col(a, 1)?, col(a, 2)?, col(a, 3)?);
    let (bx1, by1, bx2, by2) = (col(b, 0)?, col(b, 1)?, col(b, 2)?, col(b, 3)?);
    let iw = ax2.minimum(&bx2)?.sub(&ax1.maximum(&bx1)?)?.relu()?;
    let ih = ay2.minimum(&by2)?.sub(&ay1.maximum(&by1)?)?.relu()?;
    let inter = iw.mul(&ih)?;
    let area_a = ax2.sub(&ax1)?.mul(&ay2.sub(&ay1)?)?;
    let area_b = bx2.sub(&bx1)?.mul(&by2.sub(&by1)?)?;
    let union = area_a.add(&area_b)?.sub(&inter)?;
    let cw = ax2.maximum(&bx2)?.sub(&ax1.minimum(&bx1)?)?;
    let ch = ay2.maximum(&by2)?.sub(&ay1.minimum(&by1)?)?;
    let c = cw.mul(&ch)?;
    inter.div(&union)?.sub(&c.sub(&union)?.div(&c)?)
}

fn check_maps(pred: &Array, target: &Array) -> Result<usize> {
    if pred.len() != target.len() {
        return Err(Error::dim("focal_loss", pred.shape(), target.shape()));
    }
    if let Some(t) = target.data().iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::Domain(format!("target value {t} outside [0, 1]")));
    }
    Ok(target.data().iter().filter(|&&t| t == 1.0).count())
}

fn split_cells(target: &Array) -> (Vec<usize>, Vec<usize>, Vec<f64>) {
    let (mut pos, mut neg, mut weight) = (Vec::new(), Vec::new(), Vec::new());
    for (i, &t) in target.data().iter().enumerate() {
        if t == 1.0 {
            pos.push(i);
        } else {
            neg.push(i);
            weight.push(1.0 - t);
        }
    }
    (pos, neg, weight)
}

/// Sums `−(1−p)^α·log p` over peaks and `−(1−t)^β·p^α·log(1−p)` elsewhere,
/// divided by `max(1, peak count)`. `log_p` and `log_q` are `log p` and
/// `log(1−p)` for every cell.
fn focal_terms<'t>(
    p: &Var<'t>,
    log_p: impl Fn(&[usize]) -> Result<Var<'t>>,
    log_q: impl Fn(&[usize]) -> Result<Var<'t>>,
    target: &Array,
    alpha: f64,
    beta: f64,
) -> Result<Var<'t>> {
    let tape = p.tape();
    let (pos, neg, weight) = split_cells(target);
    let mut total: Option<Var<'t>> = None;
    let mut accumulate = |term: Var<'t>| -> Result<()> {
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
        Ok(())
    };
    if !pos.is_empty() {
        let pp = p.gather(&pos)?;
        accumulate(pp.rsub_scalar(1.0)?.powf(alpha)?.mul(&log_p(&pos)?)?.sum()?)?;
    }
    if !neg.is_empty() {
        let pn = p.gather(&neg)?;
        let w = tape.constant(Array::from_parts(vec![neg.len()], weight.iter().map(|w| w.powf(beta)).collect()));
        accumulate(w.mul(&pn.powf(alpha)?)?.mul(&log_q(&neg)?)?.sum()?)?;
    }
    let total = total.expect("a map has at least one cell");
    total.scale(-1.0 / pos.len().max(1) as f64)
}

/// Penalty-reduced focal loss on probabilities in [0, 1]. A prediction
/// that makes the loss infinite (0 at a peak, 1 elsewhere) is a domain error.
pub fn focal_loss_var<'t>(pred: &Var<'t>, target: &Array, alpha: f64, beta: f64) -> Result<Var<'t>> {
    let p_val = pred.value();
    check_maps(&p_val, target)?;
    if let Some(p) = p_val.data().iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Domain(format!("prediction {p} outside [0, 1]")));
    }
    for (&p, &t) in p_val.data().iter().zip(target.data()) {
        if (t == 1.0 && p == 0.0) || (t < 1.0 && p == 1.0) {
            return Err(Error::Domain(format!("prediction {p} against target {t} gives an infinite loss")));
        }
    }
    let p = pred.reshape(vec![p_val.len()])?;
    let q = p.rsub_scalar(1.0)?;
    focal_terms(&p, |i| p.gather(i)?.log(), |i| q.gather(i)?.log(), target, alpha, beta)
}

/// Focal loss evaluated from score logits, with `log p = −softplus(−z)`
/// and `log(1−p) = −softplus(z)`.
pub fn focal_loss_logits<'t>(logits: &Var<'t>, target: &Array, alpha: f64, beta: f64) -> Result<Var<'t>> {
    check_maps(&logits.value(), target)?;
    let z = logits.reshape(vec![target.len()])?;
    let p = z.sigmoid()?;
    focal_terms(
        &p,
        |i| z.gather(i)?.scale(-1.0)?.softplus()?.scale(-1.0),
        |i| z.gather(i)?.softplus()?.scale(-1.0),
        target,
        alpha,
        beta,
    )
}

/// Plain-value focal loss.
pub fn focal_loss(pred: &Array, target: &Array, alpha: f64, beta: f64) -> Result<f64> {
    let tape = crate::numerics::Tape::new();
    focal_loss_var(&tape.constant(pred.clone()), target, alpha, beta)?.item()
}

/// Grid cell `(row, col)` holding the point `(x, y)` in search coordinates.
pub fn cell_of(x: f64, y: f64, patch: usize, grid: usize) -> Result<(usize, usize)> {
    let extent = (patch * grid) as f64;
    if !(0.0..extent).contains(&x) || !(0.0..extent).contains(&y) {
        return Err(Error::Contract(format!("point ({x}, {y}) outside the {extent} px search region")));
    }
    Ok(((y / patch as f64) as usize, (x / patch as f64) as usize))
}

/// Gaussian classification target around the ground-truth center cell.
/// The center cell is exactly 1; cells beyond the radius are 0.
pub fn gaussian_target(gt: &BBox, patch: usize, grid: usize) -> Result<Array> {
    let (cx, cy) = gt.center();
    let (r0, c0) = cell_of(cx, cy, patch, grid)?;
    let diag = gt.w.hypot(gt.h);
    let radius = (diag / (4.0 * patch as f64)).max(1.0);
    let sigma = (2.0 * radius + 1.0) / 6.0;
    Ok(Array::from_fn(vec![grid, grid], |k| {
        let (dr, dc) = ((k / grid) as f64 - r0 as f64, (k % grid) as f64 - c0 as f64);
        if dr.abs() > radius || dc.abs() > radius {
            0.0
        } else {
            (-(dr * dr + dc * dc) / (2.0 * sigma * sigma)).exp()
        }
    }))
}

/// First index of the largest value.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Box predicted at grid cell `k`, in search coordinates.
pub fn box_at(maps: &HeadMaps, k: usize, patch: usize, search_size: usize) -> BBox {
    let s = maps.grid();
    let (row, col) = ((k / s) as f64, (k % s) as f64);
    let (off, size) = (maps.offset.data(), maps.size.data());
    let p = patch as f64;
    let cx = (col + off[2 * k]) * p;
    let cy = (row + off[2 * k + 1]) * p;
    let ss = search_size as f64;
    BBox::from_center(cx, cy, size[2 * k] * ss, size[2 * k + 1] * ss)
}

/// Decodes at the argmax of `scores` (any `s × s` map, e.g. a penalized one).
pub fn decode_with_scores(maps: &HeadMaps, scores: &Array, patch: usize, search_size: usize) -> Result<(BBox, f64)> {
    if scores.shape() != maps.score.shape() {
        return Err(Error::dim("decode", maps.score.shape(), scores.shape()));
    }
    let k = argmax(scores.data());
    Ok((box_at(maps, k, patch, search_size), scores.data()[k]))
}

pub fn decode_box(maps: &HeadMaps, patch: usize, search_size: usize) -> (BBox, f64) {
    let k = argmax(maps.score.data());
    (box_at(maps, k, patch, search_size), maps.score.data()[k])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub class: f64,
    pub giou: f64,
    pub l1: f64,
    pub task: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { class: 1.0, giou: 2.0, l1: 5.0, task: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("class", self.class), ("giou", self.giou), ("l1", self.l1), ("task", self.task)] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Config(format!("loss weight {name} = {w} must be nonnegative")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub class: f64,
    pub giou: f64,
    pub l1: f64,
    pub task: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(class: f64, giou: f64, l1: f64, task: f64, w: &LossWeights) -> Self {
        LossBreakdown {
            class,
            giou,
            l1,
            task,
            total: w.class * class + w.giou * giou + w.l1 * l1 + w.task * task,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub focal_alpha: f64,
    pub focal_beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { weights: LossWeights::default(), focal_alpha: 2.0, focal_beta: 4.0 }
    }
}

/// Predicted `1 × 4` (cx, cy, w, h) row at cell `k`.
fn predicted_cxcywh<'t>(out: &HeadOutput<'t>, k: usize, patch: usize, search_size: usize) -> Result<Var<'t>> {
    let tape = out.score.tape();
    let s = out.grid;
    let (p, ss) = (patch as f64, search_size as f64);
    let raw = Var::concat_cols(&[out.offset, out.size])?
        .gather(&[4 * k, 4 * k + 1, 4 * k + 2, 4 * k + 3])?
        .reshape(vec![1, 4])?;
    let scale = tape.constant(Array::from_parts(vec![4], vec![p, p, ss, ss]));
    let shift = tape.constant(Array::from_parts(vec![4], vec![(k % s) as f64 * p, (k / s) as f64 * p, 0.0, 0.0]));
    raw.mul_row(&scale)?.add_row(&shift)
}

/// `(cx, cy, w, h)` row to `(x1, y1, x2, y2)`.
fn corners<'t>(cxcywh: &Var<'t>) -> Result<Var<'t>> {
    let m = Array::from_rows(&[
        vec![1.0, 0.0, 1.0, 0.0],
        vec![0.0, 1.0, 0.0, 1.0],
        vec![-0.5, 0.0, 0.5, 0.0],
        vec![0.0, -0.5, 0.0, 0.5],
    ])?;
    cxcywh.matmul(&cxcywh.tape().constant(m))
}

/// Loss for one sample. `gt` is the target box in search coordinates, or
/// `None` for a target-free crop (class target all zero, no regression).
pub fn total_loss<'t>(
    out: &HeadOutput<'t>,
    gt: Option<&BBox>,
    encoder: &EncoderConfig,
    config: &LossConfig,
) -> Result<(Var<'t>, LossBreakdown)> {
    let tape = out.score.tape();
    let (patch, ss, s) = (encoder.patch_size, encoder.search_size, out.grid);
    let target = match gt {
        Some(b) => gaussian_target(b, patch, s)?,
        None => Array::zeros(vec![s, s]),
    };
    let class = focal_loss_logits(&out.score_logits, &target, config.focal_alpha, config.focal_beta)?;
    let y = if gt.is_some() { 1.0 } else { 0.0 };
    let z = out.presence_logit.reshape(vec![1])?;
    let task = z.softplus()?.sub(&z.scale(y)?)?;
    let w = &config.weights;
    let mut total = class.scale(w.class)?.add(&task.scale(w.task)?)?;
    let (mut giou_v, mut l1_v) = (0.0, 0.0);
    if let Some(b) = gt {
        let (cx, cy) = b.center();
        let (row, col) = cell_of(cx, cy, patch, s)?;
        let pred = predicted_cxcywh(out, row * s + col, patch, ss)?;
        let truth = tape.constant(Array::new(vec![1, 4], vec![cx, cy, b.w, b.h])?);
        let l1 = pred.sub(&truth)?.abs()?.mean()?.scale(1.0 / ss as f64)?;
        let g = giou_var(&corners(&pred)?, &corners(&truth)?)?.reshape(vec![1])?.rsub_scalar(1.0)?;
        giou_v = g.item()?;
        l1_v = l1.item()?;
        total = total.add(&g.scale(w.giou)?)?.add(&l1.scale(w.l1)?)?;
    }
    let breakdown = LossBreakdown::new(class.item()?, giou_v, l1_v, task.item()?, w);
    Ok((total, breakdown))
}
