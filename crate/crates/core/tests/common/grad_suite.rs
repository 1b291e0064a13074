//! Central-difference checks for every differentiable op and loss.
//!
//! Each case draws one random instance from an rng and returns the worst
//! relative error reported by `grad_check_many`. Non-scalar outputs are
//! reduced with a fixed random weighting so that every output entry
//! contributes a distinct gradient.

use rand::Rng as _;
use uautrack::datamodel::{BBox, Modality, UnifiedInput};
use uautrack::encoder::{attend, AttentionWeights, EncoderConfig};
use uautrack::headloss::{focal_loss_logits, focal_loss_var, gaussian_target, giou_var, total_loss, HeadOutput, LossConfig, LossWeights};
use uautrack::model::{ModelConfig, Prompting, TrackerModel};
use uautrack::numerics::gradcheck::{grad_check_many, DEFAULT_EPS};
use uautrack::numerics::{seeded_rng, Array, Rng, Tape, Var};
use uautrack::prompt::PromptConfig;
use uautrack::Result;

pub struct Case {
    pub name: &'static str,
    pub check: fn(&mut Rng) -> f64,
}

/// Reduces `f`'s output to a scalar with fixed random weights, then checks.
fn weighted<F>(rng: &mut Rng, xs: &[Array], f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let shape = {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        f(&tape, &vars).unwrap().shape()
    };
    let r = Array::randn(shape, 1.0, rng);
    grad_check_many(
        |tape, v| f(tape, v)?.mul(&tape.constant(r.clone()))?.sum(),
        xs,
        DEFAULT_EPS,
    )
    .unwrap()
}

fn dim(rng: &mut Rng) -> usize {
    rng.gen_range(1..=4)
}

fn randn(rng: &mut Rng, shape: Vec<usize>) -> Array {
    Array::randn(shape, 1.0, rng)
}

/// Entries with magnitude in [0.1, 2] and random sign, away from kinks at 0.
fn away_from_zero(rng: &mut Rng, shape: Vec<usize>) -> Array {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..2.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Array::new(shape, data).unwrap()
}

fn positive(rng: &mut Rng, shape: Vec<usize>) -> Array {
    Array::uniform(shape, 0.3, 2.0, rng)
}

fn unary(rng: &mut Rng, x: Array, op: for<'t> fn(&Var<'t>) -> Result<Var<'t>>) -> f64 {
    weighted(rng, &[x], move |_, v| op(&v[0]))
}

fn binary(rng: &mut Rng, a: Array, b: Array, op: for<'t> fn(&Var<'t>, &Var<'t>) -> Result<Var<'t>>) -> f64 {
    weighted(rng, &[a, b], move |_, v| op(&v[0], &v[1]))
}

fn matrix(rng: &mut Rng) -> Array {
    let (m, n) = (dim(rng), dim(rng));
    randn(rng, vec![m, n])
}

fn pair(rng: &mut Rng) -> (Array, Array) {
    let a = matrix(rng);
    let b = randn(rng, a.shape().to_vec());
    (a, b)
}

/// Second operand at least 0.1 away from the first in every entry.
fn separated(rng: &mut Rng) -> (Array, Array) {
    let a = matrix(rng);
    let d = away_from_zero(rng, a.shape().to_vec());
    let b = Array::from_fn(a.shape().to_vec(), |i| a.data()[i] + d.data()[i]);
    (a, b)
}

fn random_box(rng: &mut Rng, extent: f64) -> BBox {
    let (w, h) = (rng.gen_range(3.0..extent / 2.0), rng.gen_range(3.0..extent / 2.0));
    let cx = rng.gen_range(1.0..extent - 1.0);
    let cy = rng.gen_range(1.0..extent - 1.0);
    BBox::from_center(cx, cy, w, h)
}

fn corner_row(rng: &mut Rng) -> Array {
    let x1 = rng.gen_range(-5.0..5.0);
    let y1 = rng.gen_range(-5.0..5.0);
    let w = rng.gen_range(0.5..6.0);
    let h = rng.gen_range(0.5..6.0);
    Array::new(vec![1, 4], vec![x1, y1, x1 + w, y1 + h]).unwrap()
}

const HEAD_CFG: EncoderConfig = EncoderConfig {
    embed_dim: 8,
    num_layers: 1,
    num_heads: 2,
    patch_size: 8,
    template_size: 16,
    search_size: 32,
    mlp_ratio: 2,
};

/// Checks `total_loss` with respect to raw head tensors under `weights`.
fn head_loss_case(rng: &mut Rng, weights: LossWeights, with_target: bool) -> f64 {
    let s = HEAD_CFG.search_size / HEAD_CFG.patch_size;
    let n = s * s;
    let xs = [
        randn(rng, vec![n, 1]),
        randn(rng, vec![n, 2]),
        randn(rng, vec![n, 2]),
        randn(rng, vec![1, 1]),
    ];
    let gt = with_target.then(|| random_box(rng, HEAD_CFG.search_size as f64));
    let config = LossConfig { weights, ..LossConfig::default() };
    grad_check_many(
        |_, v| {
            let out = HeadOutput {
                grid: s,
                score_logits: v[0],
                score: v[0].sigmoid()?,
                size: v[1].sigmoid()?,
                offset: v[2].sigmoid()?,
                presence_logit: v[3],
            };
            Ok(total_loss(&out, gt.as_ref(), &HEAD_CFG, &config)?.0)
        },
        &xs,
        DEFAULT_EPS,
    )
    .unwrap()
}

fn only(class: f64, giou: f64, l1: f64, task: f64) -> LossWeights {
    LossWeights { class, giou, l1, task }
}

pub fn cases() -> Vec<Case> {
    vec![
        Case {
            name: "matmul",
            check: |rng| {
                let (m, k, n) = (dim(rng), dim(rng), dim(rng));
                let (a, b) = (randn(rng, vec![m, k]), randn(rng, vec![k, n]));
                binary(rng, a, b, |a, b| a.matmul(b))
            },
        },
        Case {
            name: "matmul_t",
            check: |rng| {
                let (m, k, n) = (dim(rng), dim(rng), dim(rng));
                let (a, b) = (randn(rng, vec![m, k]), randn(rng, vec![n, k]));
                binary(rng, a, b, |a, b| a.matmul_t(b))
            },
        },
        Case { name: "transpose", check: |rng| {
            let a = matrix(rng);
            unary(rng, a, |a| a.transpose())
        } },
        Case { name: "add", check: |rng| {
            let (a, b) = pair(rng);
            binary(rng, a, b, |a, b| a.add(b))
        } },
        Case { name: "sub", check: |rng| {
            let (a, b) = pair(rng);
            binary(rng, a, b, |a, b| a.sub(b))
        } },
        Case { name: "mul", check: |rng| {
            let (a, b) = pair(rng);
            binary(rng, a, b, |a, b| a.mul(b))
        } },
        Case {
            name: "div",
            check: |rng| {
                let a = matrix(rng);
                let b = positive(rng, a.shape().to_vec());
                binary(rng, a, b, |a, b| a.div(b))
            },
        },
        Case { name: "maximum", check: |rng| {
            let (a, b) = separated(rng);
            binary(rng, a, b, |a, b| a.maximum(b))
        } },
        Case { name: "minimum", check: |rng| {
            let (a, b) = separated(rng);
            binary(rng, a, b, |a, b| a.minimum(b))
        } },
        Case {
            name: "add_row",
            check: |rng| {
                let a = matrix(rng);
                let b = randn(rng, vec![1, a.cols()]);
                binary(rng, a, b, |a, b| a.add_row(b))
            },
        },
        Case {
            name: "mul_row",
            check: |rng| {
                let a = matrix(rng);
                let b = randn(rng, vec![a.cols()]);
                binary(rng, a, b, |a, b| a.mul_row(b))
            },
        },
        Case { name: "scale", check: |rng| {
            let a = matrix(rng);
            let c = rng.gen_range(-3.0..3.0);
            weighted(rng, &[a], move |_, v| v[0].scale(c))
        } },
        Case { name: "add_scalar", check: |rng| {
            let a = matrix(rng);
            let c = rng.gen_range(-3.0..3.0);
            weighted(rng, &[a], move |_, v| v[0].add_scalar(c))
        } },
        Case { name: "rsub_scalar", check: |rng| {
            let a = matrix(rng);
            let c = rng.gen_range(-3.0..3.0);
            weighted(rng, &[a], move |_, v| v[0].rsub_scalar(c))
        } },
        Case { name: "relu", check: |rng| {
            let (m, n) = (dim(rng), dim(rng));
            let a = away_from_zero(rng, vec![m, n]);
            unary(rng, a, |a| a.relu())
        } },
        Case { name: "sigmoid", check: |rng| {
            let a = matrix(rng);
            unary(rng, a.clone(), |a| a.scale(3.0)?.sigmoid())
        } },
        Case { name: "log", check: |rng| {
            let (m, n) = (dim(rng), dim(rng));
            let a = positive(rng, vec![m, n]);
            unary(rng, a, |a| a.log())
        } },
        Case { name: "exp", check: |rng| {
            let a = matrix(rng);
            unary(rng, a, |a| a.exp())
        } },
        Case { name: "softplus", check: |rng| {
            let a = matrix(rng);
            unary(rng, a, |a| a.scale(3.0)?.softplus())
        } },
        Case { name: "abs", check: |rng| {
            let (m, n) = (dim(rng), dim(rng));
            let a = away_from_zero(rng, vec![m, n]);
            unary(rng, a, |a| a.abs())
        } },
        Case {
            name: "powf",
            check: |rng| {
                let (m, n) = (dim(rng), dim(rng));
                let a = positive(rng, vec![m, n]);
                let k = [0.5, 1.5, 2.0, 3.0, 4.0][rng.gen_range(0..5)];
                weighted(rng, &[a], move |_, v| v[0].powf(k))
            },
        },
        Case { name: "softmax_rows", check: |rng| {
            let a = matrix(rng);
            unary(rng, a, |a| a.scale(2.0)?.softmax_rows())
        } },
        Case {
            name: "layer_norm",
            check: |rng| {
                let m = dim(rng);
                let n = rng.gen_range(2..=6);
                let a = randn(rng, vec![m, n]);
                unary(rng, a, |a| a.layer_norm())
            },
        },
        Case {
            name: "concat_rows",
            check: |rng| {
                let a = matrix(rng);
                let r = dim(rng);
                let b = randn(rng, vec![r, a.cols()]);
                weighted(rng, &[a, b], |_, v| Var::concat_rows(v))
            },
        },
        Case {
            name: "concat_cols",
            check: |rng| {
                let a = matrix(rng);
                let c = dim(rng);
                let b = randn(rng, vec![a.rows(), c]);
                weighted(rng, &[a, b], |_, v| Var::concat_cols(v))
            },
        },
        Case {
            name: "slice_rows",
            check: |rng| {
                let a = randn(rng, vec![4, 3]);
                let start = rng.gen_range(0..4);
                let len = rng.gen_range(1..=4 - start);
                weighted(rng, &[a], move |_, v| v[0].slice_rows(start, len))
            },
        },
        Case {
            name: "slice_cols",
            check: |rng| {
                let a = randn(rng, vec![3, 4]);
                let start = rng.gen_range(0..4);
                let len = rng.gen_range(1..=4 - start);
                weighted(rng, &[a], move |_, v| v[0].slice_cols(start, len))
            },
        },
        Case {
            name: "gather_rows",
            check: |rng| {
                let a = matrix(rng);
                let index: Vec<usize> = (0..rng.gen_range(1..=6)).map(|_| rng.gen_range(0..a.rows())).collect();
                weighted(rng, &[a], move |_, v| v[0].gather_rows(&index))
            },
        },
        Case {
            name: "gather",
            check: |rng| {
                let a = matrix(rng);
                let index: Vec<usize> = (0..rng.gen_range(1..=6)).map(|_| rng.gen_range(0..a.len())).collect();
                weighted(rng, &[a], move |_, v| v[0].gather(&index))
            },
        },
        Case {
            name: "reshape",
            check: |rng| {
                let a = matrix(rng);
                let n = a.len();
                weighted(rng, &[a], move |_, v| v[0].reshape(vec![1, n]))
            },
        },
        Case { name: "sum", check: |rng| {
            let a = matrix(rng);
            unary(rng, a, |a| a.sum())
        } },
        Case { name: "mean", check: |rng| {
            let a = matrix(rng);
            unary(rng, a, |a| a.mean())
        } },
        Case { name: "mean_rows", check: |rng| {
            let a = matrix(rng);
            unary(rng, a, |a| a.mean_rows())
        } },
        Case {
            name: "attention",
            check: |rng| {
                let heads = rng.gen_range(1..=2);
                let d = heads * rng.gen_range(1..=3);
                let (nq, nk) = (dim(rng), dim(rng));
                let xs = [
                    randn(rng, vec![nq, d]),
                    randn(rng, vec![nk, d]),
                    randn(rng, vec![d, d]),
                    randn(rng, vec![d, d]),
                    randn(rng, vec![d, d]),
                ];
                weighted(rng, &xs, move |tape, v| {
                    let w = AttentionWeights {
                        wq: v[2],
                        wk: v[3],
                        wv: v[4],
                        wo: tape.constant(Array::zeros(vec![d, d])),
                        bo: tape.constant(Array::zeros(vec![1, d])),
                    };
                    attend(&v[0], &v[1], &w, heads)
                })
            },
        },
        Case {
            name: "focal (probabilities)",
            check: |rng| {
                let s = rng.gen_range(3..=6);
                let target = gaussian_target(&random_box(rng, (8 * s) as f64), 8, s).unwrap();
                let p = Array::uniform(vec![s, s], 0.05, 0.95, rng);
                grad_check_many(|_, v| focal_loss_var(&v[0], &target, 2.0, 4.0), &[p], DEFAULT_EPS).unwrap()
            },
        },
        Case {
            name: "focal (logits)",
            check: |rng| {
                let s = rng.gen_range(3..=6);
                let target = if rng.gen_bool(0.8) {
                    gaussian_target(&random_box(rng, (8 * s) as f64), 8, s).unwrap()
                } else {
                    Array::zeros(vec![s, s])
                };
                let z = Array::randn(vec![s * s, 1], 2.0, rng);
                grad_check_many(|_, v| focal_loss_logits(&v[0], &target, 2.0, 4.0), &[z], DEFAULT_EPS).unwrap()
            },
        },
        Case {
            name: "giou",
            check: |rng| {
                let (a, b) = (corner_row(rng), corner_row(rng));
                grad_check_many(|_, v| giou_var(&v[0], &v[1])?.sum(), &[a, b], DEFAULT_EPS).unwrap()
            },
        },
        Case { name: "loss: class", check: |rng| head_loss_case(rng, only(1.0, 0.0, 0.0, 0.0), true) },
        Case { name: "loss: giou", check: |rng| head_loss_case(rng, only(0.0, 1.0, 0.0, 0.0), true) },
        Case { name: "loss: l1", check: |rng| head_loss_case(rng, only(0.0, 0.0, 1.0, 0.0), true) },
        Case {
            name: "loss: task",
            check: |rng| {
                let present = rng.gen_bool(0.5);
                head_loss_case(rng, only(0.0, 0.0, 0.0, 1.0), present)
            },
        },
        Case {
            name: "loss: composite",
            check: |rng| {
                let present = rng.gen_bool(0.8);
                head_loss_case(rng, LossWeights::default(), present)
            },
        },
    ]
}

/// Worst error of `case` over `instances` seeded draws.
pub fn run_case(case: &Case, instances: u64) -> f64 {
    (0..instances)
        .map(|i| {
            let mut rng = seeded_rng(0x6ad0 + i);
            (case.check)(&mut rng)
        })
        .fold(0.0, f64::max)
}

/// A small RGB-T model with a 32×32 search crop.
pub fn toy_model(seed: u64) -> TrackerModel {
    let config = ModelConfig {
        modality: Modality::Rgbt,
        encoder: EncoderConfig { num_layers: 2, ..HEAD_CFG },
        prompt: PromptConfig { text_dim: 8, ..PromptConfig::default() },
    };
    TrackerModel::init(config, seed).unwrap()
}

fn random_input(rng: &mut Rng, side: usize) -> UnifiedInput {
    let pixels = (0..side * side * 6).map(|_| rng.gen_range(0.0f32..1.0)).collect();
    UnifiedInput { width: side, height: side, pixels, modality: Modality::Rgbt }
}

/// Checks every parameter coordinate of the toy model's forward pass plus
/// composite loss against central differences. Returns the worst error
/// and the number of coordinates checked.
pub fn toy_model_check(seed: u64) -> (f64, usize) {
    let mut rng = seeded_rng(seed);
    let mut model = toy_model(seed);
    let cfg = model.config.encoder.clone();
    let template = random_input(&mut rng, cfg.template_size);
    let search = random_input(&mut rng, cfg.search_size);
    let gt = random_box(&mut rng, cfg.search_size as f64);
    let text = "track a small drone";
    let loss_cfg = LossConfig::default();

    let loss = |model: &TrackerModel, tape: &Tape, trainable: bool| -> (f64, Option<Vec<Array>>) {
        let bound = model.params.bind(tape, |_| trainable);
        let prompt = model.encode_prompt(&bound, text).unwrap();
        let out = model.forward(&bound, &template, &search, Prompting::Encoded(&prompt)).unwrap();
        let (l, _) = total_loss(&out, Some(&gt), &cfg, &loss_cfg).unwrap();
        let value = l.item().unwrap();
        let grads = trainable.then(|| bound.gradients(&tape.backward(l).unwrap()));
        (value, grads)
    };

    let analytic = loss(&model, &Tape::new(), true).1.unwrap();
    let names: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (name, grad) in names.iter().zip(&analytic) {
        for k in 0..grad.len() {
            let orig = model.params.get(name).unwrap().data()[k];
            model.params.get_mut(name).unwrap().data_mut()[k] = orig + DEFAULT_EPS;
            let plus = loss(&model, &Tape::new(), false).0;
            model.params.get_mut(name).unwrap().data_mut()[k] = orig - DEFAULT_EPS;
            let minus = loss(&model, &Tape::new(), false).0;
            model.params.get_mut(name).unwrap().data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * DEFAULT_EPS);
            let a = grad.data()[k];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
            checked += 1;
        }
    }
    (worst, checked)
}
