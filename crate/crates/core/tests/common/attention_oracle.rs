//! Brute-force attention written with plain loops and unstabilized exp.

use rand::Rng as _;
use uautrack::encoder::{
    cross_modal_attention, self_attention, AttentionWeights, ModalityTokens, Segment, TokenLabel, TokenModality,
    TokenState,
};
use uautrack::numerics::{seeded_rng, Array, Rng, Tape};

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(a: &Array) -> Mat {
    (0..a.rows()).map(|r| a.row(r).to_vec()).collect()
}

pub fn mm(a: &Mat, b: &Mat) -> Mat {
    let n = b[0].len();
    a.iter()
        .map(|row| (0..n).map(|j| row.iter().zip(b).map(|(x, brow)| x * brow[j]).sum()).collect())
        .collect()
}

/// Per-head probability matrices and the concatenated head outputs.
pub fn oracle(queries: &Mat, context: &Mat, wq: &Mat, wk: &Mat, wv: &Mat, heads: usize) -> (Vec<Mat>, Mat) {
    let q = mm(queries, wq);
    let k = mm(context, wk);
    let v = mm(context, wv);
    let d = q[0].len();
    let dk = d / heads;
    let mut probs = Vec::new();
    let mut out = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        let cols = h * dk..(h + 1) * dk;
        let mut p = Vec::new();
        for (i, qi) in q.iter().enumerate() {
            let e: Vec<f64> = k
                .iter()
                .map(|kj| (cols.clone().map(|c| qi[c] * kj[c]).sum::<f64>() / (dk as f64).sqrt()).exp())
                .collect();
            let z: f64 = e.iter().sum();
            let row: Vec<f64> = e.iter().map(|x| x / z).collect();
            for c in cols.clone() {
                out[i][c] = row.iter().zip(&v).map(|(pj, vj)| pj * vj[c]).sum();
            }
            p.push(row);
        }
        probs.push(p);
    }
    (probs, out)
}

pub fn max_gap(a: &Mat, b: &Mat) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub struct Trial {
    pub heads: usize,
    pub d: usize,
    pub nt: usize,
    pub ns: usize,
    pub wq: Array,
    pub wk: Array,
    pub wv: Array,
}

pub fn trial(rng: &mut Rng) -> Trial {
    let heads = rng.gen_range(1..=3);
    let d = heads * rng.gen_range(1..=4);
    let (nt, ns) = (rng.gen_range(1..=5), rng.gen_range(1..=9));
    let mut w = || Array::randn(vec![d, d], 1.0 / (d as f64).sqrt(), rng);
    let (wq, wk, wv) = (w(), w(), w());
    Trial { heads, d, nt, ns, wq, wk, wv }
}

pub fn weights<'t>(tape: &'t Tape, t: &Trial) -> AttentionWeights<'t> {
    AttentionWeights {
        wq: tape.constant(t.wq.clone()),
        wk: tape.constant(t.wk.clone()),
        wv: tape.constant(t.wv.clone()),
        wo: tape.constant(Array::zeros(vec![t.d, t.d])),
        bo: tape.constant(Array::zeros(vec![1, t.d])),
    }
}

pub fn labels(template: usize, search: usize, modality: TokenModality) -> Vec<TokenLabel> {
    let mk = |segment| TokenLabel { segment, modality };
    std::iter::repeat(mk(Segment::Template))
        .take(template)
        .chain(std::iter::repeat(mk(Segment::Search)).take(search))
        .collect()
}

/// Largest deviation of joint self-attention from the oracle.
pub fn self_attention_gap(seed: u64) -> f64 {
    let mut rng = seeded_rng(seed);
    let t = trial(&mut rng);
    let x = Array::randn(vec![t.nt + t.ns, t.d], 1.0, &mut rng);
    let tape = Tape::new();
    let state = TokenState::new(tape.constant(x.clone()), labels(t.nt, t.ns, TokenModality::Tir)).unwrap();
    let got = self_attention(&state, &weights(&tape, &t), t.heads).unwrap();
    let m = to_mat(&x);
    let (_, want) = oracle(&m, &m, &to_mat(&t.wq), &to_mat(&t.wk), &to_mat(&t.wv), t.heads);
    max_gap(&to_mat(&got.value()), &want)
}

/// Deviations found in one cross-attention trial.
pub struct CrossGaps {
    /// Dense output against the oracle.
    pub dense: f64,
    /// Recomposed blocks against the oracle output.
    pub recomposed: f64,
    /// Block entries against the oracle probabilities.
    pub blocks: f64,
    /// Worst `|row sum − 1|` over the joined blocks.
    pub row_sum: f64,
    pub min_prob: f64,
}

pub fn cross_attention_gaps(seed: u64, input_std: f64) -> CrossGaps {
    let mut rng = seeded_rng(seed);
    let t = trial(&mut rng);
    let (nt, ns) = (t.nt, t.ns);
    let tir = Array::randn(vec![nt + ns, t.d], input_std, &mut rng);
    let rgb = Array::randn(vec![nt + ns, t.d], input_std, &mut rng);
    let tape = Tape::new();
    let split = |a: &Array| {
        let v = tape.constant(a.clone());
        ModalityTokens { template: v.slice_rows(0, nt).unwrap(), search: v.slice_rows(nt, ns).unwrap() }
    };
    let cross = cross_modal_attention(&split(&tir), &split(&rgb), &weights(&tape, &t), t.heads).unwrap();
    let (probs, want) = oracle(&to_mat(&tir), &to_mat(&rgb), &to_mat(&t.wq), &to_mat(&t.wk), &to_mat(&t.wv), t.heads);

    let mut gaps = CrossGaps {
        dense: max_gap(&to_mat(&cross.output.value()), &want),
        recomposed: 0.0,
        blocks: 0.0,
        row_sum: 0.0,
        min_prob: f64::INFINITY,
    };
    let v = mm(&to_mat(&rgb), &to_mat(&t.wv));
    let dk = t.d / t.heads;
    for (h, b) in cross.blocks.iter().enumerate() {
        for i in 0..nt + ns {
            let mut sum = 0.0;
            for j in 0..nt + ns {
                let got = match (i < nt, j < nt) {
                    (true, true) => b.s_tt.at(i, j),
                    (true, false) => b.s_ts.at(i, j - nt),
                    (false, true) => b.s_st.at(i - nt, j),
                    (false, false) => b.s_ss.at(i - nt, j - nt),
                };
                sum += got;
                gaps.min_prob = gaps.min_prob.min(got);
                gaps.blocks = gaps.blocks.max((got - probs[h][i][j]).abs());
            }
            gaps.row_sum = gaps.row_sum.max((sum - 1.0).abs());
        }
        let vh = |r0: usize, n: usize| Array::from_fn(vec![n, dk], |k| v[r0 + k / dk][h * dk + k % dk]);
        let recomposed = b.compose(&vh(0, nt), &vh(nt, ns)).unwrap();
        for (i, row) in want.iter().enumerate() {
            for c in 0..dk {
                gaps.recomposed = gaps.recomposed.max((recomposed.at(i, c) - row[h * dk + c]).abs());
            }
        }
    }
    gaps
}

/// Worst `|row sum − 1|` of `softmax_rows` on a random matrix with large entries.
pub fn softmax_row_sum_gap(seed: u64) -> f64 {
    let mut rng = seeded_rng(seed);
    let (r, c) = (rng.gen_range(1..=8), rng.gen_range(1..=16));
    let a = Array::randn(vec![r, c], 20.0, &mut rng);
    let tape = Tape::new();
    let s = tape.constant(a).softmax_rows().unwrap().value();
    (0..r).map(|i| (s.row(i).iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max)
}
