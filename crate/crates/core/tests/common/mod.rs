//! Shared test oracles.
#![allow(dead_code)]

use mantis::autograd::{Tape, Var};
use mantis::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// Worst elementwise `|a - n| / max(|a|, |n|, floor)`. Two exact zeros agree.
pub fn worst_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            let diff = (a - n).abs();
            if diff == 0.0 {
                0.0
            } else {
                diff / a.abs().max(n.abs()).max(floor)
            }
        })
        .fold(0.0, f64::max)
}

const OP_STEP: f64 = 1e-3;

/// Fourth-order central finite differences of a scalar function of several
/// inputs: `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`.
pub fn numeric_grads(inputs: &[Tensor<f64>], h: f64, f: &dyn Fn(&[Tensor<f64>]) -> f64) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut g = Vec::with_capacity(inputs[i].numel());
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            let mut at = |k: f64| {
                work[i].data_mut()[j] = orig + k * h;
                f(&work)
            };
            let (p2, p1, m1, m2) = (at(2.0), at(1.0), at(-1.0), at(-2.0));
            work[i].data_mut()[j] = orig;
            g.push((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h));
        }
        out.push(g);
    }
    out
}

/// Builds `sum(op(inputs) ⊙ weights)` on a fresh tape so the upstream gradient
/// is a random tensor, then compares analytic and numeric gradients of every
/// input. Returns the worst relative error.
pub fn check_op(inputs: &[Tensor<f64>], seed: u64, op: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
    let eval = |xs: &[Tensor<f64>], want_grad: bool| -> (f64, Vec<Vec<f64>>) {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
        let y = op(&mut tape, &vars);
        let shape = tape.shape(y).to_vec();
        let w = tape.constant(random_tensor(&shape, seed ^ 0x5eed));
        let prod = tape.mul(y, w).unwrap();
        let s = tape.sum(prod);
        let value = tape.value(s)[0];
        if !want_grad {
            return (value, Vec::new());
        }
        let grads = tape.backward(s).unwrap();
        (value, vars.iter().map(|v| grads.get(*v)).collect())
    };
    let (_, analytic) = eval(inputs, true);
    let numeric = numeric_grads(inputs, OP_STEP, &|xs| eval(xs, false).0);
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| worst_rel_err(a, n, 0.0))
        .fold(0.0, f64::max)
}

use mantis::conditioner::ConditioningBundle;
use mantis::tokenizer::{train_bpe, Vocab};
use mantis::vision::{Image, ImageInput};

pub fn toy_vocab() -> Vocab {
    train_bpe(&["a red wool scarf for women", "striped cotton shirt for men", "a small dotted circle"], 300).unwrap()
}

pub fn random_image(rng: &mut impl Rng, size: usize) -> ImageInput {
    ImageInput::Pixels(Image::new(size, size, (0..size * size).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap())
}

/// Random bundle with `m` images, `n` name tokens and `t` target tokens drawn
/// from the non-special ids below `id_bound`.
pub fn random_bundle(rng: &mut impl Rng, m: usize, n: usize, t: usize, id_bound: u32) -> ConditioningBundle {
    ConditioningBundle {
        images: (0..m).map(|_| random_image(rng, 24)).collect(),
        name_ids: (0..n).map(|_| rng.gen_range(0..id_bound)).collect(),
        target_ids: (0..t).map(|_| rng.gen_range(0..id_bound)).collect(),
    }
}

/// Worst finite-difference error of every differentiable tape operation,
/// by name.
pub fn op_gradcheck_suite() -> Vec<(&'static str, f64)> {
    use mantis::autograd::{AttnMask, ConvGeom};
    let mut out = Vec::new();
    let a = random_tensor(&[3, 5], 10);
    let b = random_tensor(&[3, 5], 11);
    let r = random_tensor(&[5], 12);
    out.push(("matmul", check_op(&[random_tensor(&[3, 4], 1), random_tensor(&[4, 2], 2)], 3, &|t, v| t.matmul(v[0], v[1]).unwrap())));
    out.push(("matmul_bt", check_op(&[random_tensor(&[3, 4], 4), random_tensor(&[5, 4], 5)], 6, &|t, v| t.matmul_bt(v[0], v[1]).unwrap())));
    out.push(("add", check_op(&[a.clone(), b.clone()], 1, &|t, v| t.add(v[0], v[1]).unwrap())));
    out.push(("sub", check_op(&[a.clone(), b.clone()], 2, &|t, v| t.sub(v[0], v[1]).unwrap())));
    out.push(("mul", check_op(&[a.clone(), b.clone()], 3, &|t, v| t.mul(v[0], v[1]).unwrap())));
    out.push(("add_row", check_op(&[a.clone(), r.clone()], 4, &|t, v| t.add_row(v[0], v[1]).unwrap())));
    out.push(("mul_row", check_op(&[a.clone(), r.clone()], 5, &|t, v| t.mul_row(v[0], v[1]).unwrap())));
    out.push(("scale", check_op(&[a.clone()], 6, &|t, v| t.scale(v[0], -1.7))));
    let c: Vec<f64> = (0..15).map(|i| (i % 3) as f64 * 0.5).collect();
    out.push(("mul_const", check_op(&[a.clone()], 7, &|t, v| t.mul_const(v[0], c.clone()).unwrap())));
    out.push(("reshape", check_op(&[a], 8, &|t, v| t.reshape(v[0], vec![5, 3]).unwrap())));
    let x = Tensor::from_fn(vec![12], |i| (i as f64 - 6.0) * 0.6);
    out.push(("gelu", check_op(&[x], 1, &|t, v| t.gelu(v[0]))));
    out.push((
        "layernorm",
        check_op(&[random_tensor(&[2, 8], 20), random_tensor(&[8], 21), random_tensor(&[8], 22)], 23, &|t, v| {
            t.layernorm(v[0], v[1], v[2], 1e-5).unwrap()
        }),
    ));
    out.push(("softmax_rows", check_op(&[random_tensor(&[3, 6], 30)], 31, &|t, v| t.softmax_rows(v[0]))));
    let table = random_tensor(&[6, 4], 40);
    let other = random_tensor(&[2, 4], 41);
    out.push(("embedding", check_op(&[table.clone()], 42, &|t, v| t.embedding(v[0], &[5, 0, 5, 2]).unwrap())));
    out.push((
        "gather_rows",
        check_op(&[table, other], 43, &|t, v| t.gather_rows(&[v[0], v[1]], &[(0, 1), (1, 1), (1, 0), (0, 1)]).unwrap()),
    ));
    out.push((
        "masked_cross_entropy",
        check_op(&[random_tensor(&[4, 7], 50)], 51, &|t, v| t.masked_cross_entropy(v[0], &[1, 6, 0, 3], &[true, false, true, true]).unwrap()),
    ));
    // two sequences, 3 queries over 4 keys, ragged mask including an empty row
    let mut allowed = vec![true; 2 * 3 * 4];
    allowed[1] = false;
    allowed[3] = false;
    for j in 0..4 {
        allowed[12 + 4 + j] = false;
    }
    let mask = AttnMask::new(2, 3, 4, allowed).unwrap();
    out.push((
        "attention",
        check_op(&[random_tensor(&[6, 8], 60), random_tensor(&[8, 8], 61), random_tensor(&[8, 8], 62)], 63, &|t, v| {
            t.attention(v[0], v[1], v[2], 2, &mask).unwrap()
        }),
    ));
    out.push(("concat_seq", check_op(&[random_tensor(&[4, 3], 70), random_tensor(&[6, 3], 71)], 72, &|t, v| t.concat_seq(v[0], v[1], 2).unwrap())));
    let geom = ConvGeom { batch: 2, height: 5, width: 5, channels: 2, kernel: 3, stride: 2, pad: 1 };
    out.push((
        "im2col+group_mean",
        check_op(&[random_tensor(&[2, 5, 5, 2], 80), random_tensor(&[3, 18], 81), random_tensor(&[3], 82)], 83, &|t, v| {
            let cols = t.im2col(v[0], geom).unwrap();
            let y = t.matmul_bt(cols, v[1]).unwrap();
            let y = t.add_row(y, v[2]).unwrap();
            let y = t.gelu(y);
            t.group_mean(y, 2).unwrap()
        }),
    ));
    out.push((
        "composite",
        check_op(&[random_tensor(&[3, 3], 90), random_tensor(&[3, 3], 91)], 92, &|t, v| {
            let p = t.mul(v[0], v[1]).unwrap();
            let q = t.matmul(p, v[0]).unwrap();
            t.softmax_rows(q)
        }),
    ));
    out
}

/// Hand-built input for a 20-id model whose last four ids act as BOS, SEP,
/// EOS and PAD: one image, two name tokens and two target tokens.
pub fn tiny_model_input(mode: mantis::conditioner::CondMode, rng: &mut impl Rng) -> mantis::conditioner::ModelInput {
    use mantis::conditioner::{CondMode, CondSequence, ModelInput, Segment::*, SequenceBatch, Slot::*};
    let (bos, sep, eos) = (16, 17, 18);
    let images = vec![random_image(rng, 24)];
    let bare = || SequenceBatch::from_parts(vec![Token(bos), Token(5), Token(6), Token(eos)], vec![0, 1, 2, 3], vec![Bos, Tgt, Tgt, Eos]);
    match mode {
        CondMode::Mantis => ModelInput {
            text: SequenceBatch::from_parts(
                vec![Token(bos), Image(0), Token(sep), Token(3), Token(4), Token(sep), Token(5), Token(6), Token(eos)],
                vec![0, 1, 2, 0, 1, 2, 0, 1, 2],
                vec![Bos, Img, Sep, Name, Name, Sep, Tgt, Tgt, Eos],
            ),
            cond: None,
            images,
        },
        CondMode::PseudoSelf | CondMode::ContextAttn => ModelInput {
            text: bare(),
            cond: Some(CondSequence {
                slots: vec![Image(0), Token(sep), Token(3), Token(4)],
                position_ids: vec![1, 2, 0, 1],
                segment_labels: vec![Img, Sep, Name, Name],
                attendable: vec![true; 4],
            }),
            images,
        },
        CondMode::Unconditional => ModelInput { text: bare(), cond: None, images: Vec::new() },
    }
}

/// Finite-difference comparison of one parameter tensor.
pub struct ParamGradErr {
    pub name: String,
    /// Worst relative error, with the denominator floored at 1e-8: below
    /// that the finite-difference estimate itself is only good to about
    /// 1e-12, and attention key biases have structurally zero gradient.
    pub rel: f64,
    /// Worst absolute difference.
    pub abs: f64,
}

/// Per-parameter gradient errors of the full 2-layer, D = 16, V = 20 model in
/// double precision with dropout off. Zero-initialised gates and output
/// projections are randomised first so every path carries gradient.
pub fn full_model_gradcheck(mode: mantis::conditioner::CondMode) -> Vec<ParamGradErr> {
    let (analytic, numeric, names) = raw_model_grads(mode);
    names
        .into_iter()
        .zip(&analytic)
        .zip(&numeric)
        .map(|((name, a), n)| ParamGradErr {
            name,
            rel: worst_rel_err(a, n, 1e-8),
            abs: a.iter().zip(n).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max),
        })
        .collect()
}

/// Analytic and numeric gradients of every parameter, with their names.
fn raw_model_grads(mode: mantis::conditioner::CondMode) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<String>) {
    use mantis::model::{Model, ModelConfig};
    use mantis::params::Binding;

    let cfg = ModelConfig { vocab_size: 20, max_pos: 8, dropout: 0.0, cond_mode: mode, ..ModelConfig::tiny(20) };
    let mut m: Model<f64> = Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for p in m.store.iter_mut() {
        if p.name.ends_with(".gate") || (p.name.starts_with("context.") && p.name.contains(".o.")) {
            p.value = Tensor::from_fn(p.value.shape().to_vec(), |_| rng.gen_range(-0.5..0.5));
        }
    }
    let input = tiny_model_input(mode, &mut rng);

    let mut tape = Tape::new();
    let mut bind = Binding::new(&m.store);
    let loss = m.loss(&mut tape, &mut bind, &[&input], None).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut store = m.store.clone();
    store.zero_grads();
    store.accumulate(&grads, &bind);
    let analytic: Vec<Vec<f64>> = store.iter().map(|p| p.grad.clone()).collect();

    let params: Vec<Tensor<f64>> = m.store.iter().map(|p| p.value.clone()).collect();
    let numeric = numeric_grads(&params, 1e-3, &|xs| {
        let mut mm = m.clone();
        for (p, x) in mm.store.iter_mut().zip(xs) {
            p.value = x.clone();
        }
        let mut tape = Tape::inference();
        let mut bind = Binding::new(&mm.store);
        let loss = mm.loss(&mut tape, &mut bind, &[&input], None).unwrap();
        tape.value(loss)[0]
    });
    (analytic, numeric, m.store.iter().map(|p| p.name.clone()).collect())
}
