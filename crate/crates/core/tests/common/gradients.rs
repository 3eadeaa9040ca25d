//! Finite-difference checks for every tape op and the composite blocks.

use distil_asr::autodiff::gradcheck::check_gradients;
use distil_asr::autodiff::{Bound, Tape, Tensor, Var};
use distil_asr::distillation::{combined_loss_var, student_losses, SoftEntry};
use distil_asr::models::{
    additive_attention, lstm_step, EncoderOutput, LmMode, LstmState, Seq2SeqConfig, Seq2SeqModel, TransformerConfig,
    TransformerLm,
};
use distil_asr::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const POINTS: u64 = 10;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Reduces `out` to a scalar with fixed random weights so every element of
/// the output contributes a distinct gradient.
fn project(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

fn uniform(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, 1.0, r)
}

/// Uniform values kept at least 0.1 away from zero (for ReLU's kink).
fn off_zero(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    let mut t = uniform(shape, r);
    for x in t.data_mut() {
        *x = x.signum() * (0.1 + x.abs());
    }
    t
}

fn positive(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    let mut t = uniform(shape, r);
    for x in t.data_mut() {
        *x = 1.25 + 0.75 * *x;
    }
    t
}

type Op = fn(&mut Tape, &[Var]) -> Result<Var>;

/// (name, input generator, output shape, op)
struct Case {
    name: &'static str,
    inputs: fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    out_shape: &'static [usize],
    op: Op,
}

fn op_cases() -> Vec<Case> {
    vec![
        Case {
            name: "matmul",
            inputs: |r| vec![uniform(&[3, 4], r), uniform(&[4, 2], r)],
            out_shape: &[3, 2],
            op: |t, v| t.matmul(v[0], v[1]),
        },
        Case {
            name: "matmul batched",
            inputs: |r| vec![uniform(&[2, 3, 4], r), uniform(&[2, 4, 2], r)],
            out_shape: &[2, 3, 2],
            op: |t, v| t.matmul(v[0], v[1]),
        },
        Case {
            name: "add",
            inputs: |r| vec![uniform(&[3, 4], r), uniform(&[3, 4], r)],
            out_shape: &[3, 4],
            op: |t, v| t.add(v[0], v[1]),
        },
        Case {
            name: "add broadcast",
            inputs: |r| vec![uniform(&[3, 4], r), uniform(&[4], r)],
            out_shape: &[3, 4],
            op: |t, v| t.add(v[0], v[1]),
        },
        Case {
            name: "mul",
            inputs: |r| vec![uniform(&[3, 4], r), uniform(&[3, 4], r)],
            out_shape: &[3, 4],
            op: |t, v| t.mul(v[0], v[1]),
        },
        Case {
            name: "mul broadcast",
            inputs: |r| vec![uniform(&[2, 3, 4], r), uniform(&[3, 4], r)],
            out_shape: &[2, 3, 4],
            op: |t, v| t.mul(v[0], v[1]),
        },
        Case {
            name: "sub",
            inputs: |r| vec![uniform(&[3, 4], r), uniform(&[3, 4], r)],
            out_shape: &[3, 4],
            op: |t, v| t.sub(v[0], v[1]),
        },
        Case {
            name: "scale",
            inputs: |r| vec![uniform(&[5], r)],
            out_shape: &[5],
            op: |t, v| Ok(t.scale(v[0], -1.7)),
        },
        Case {
            name: "tanh",
            inputs: |r| vec![uniform(&[2, 5], r)],
            out_shape: &[2, 5],
            op: |t, v| Ok(t.tanh(v[0])),
        },
        Case {
            name: "sigmoid",
            inputs: |r| vec![uniform(&[2, 5], r)],
            out_shape: &[2, 5],
            op: |t, v| Ok(t.sigmoid(v[0])),
        },
        Case {
            name: "relu",
            inputs: |r| vec![off_zero(&[2, 5], r)],
            out_shape: &[2, 5],
            op: |t, v| Ok(t.relu(v[0])),
        },
        Case {
            name: "exp",
            inputs: |r| vec![uniform(&[2, 5], r)],
            out_shape: &[2, 5],
            op: |t, v| Ok(t.exp(v[0])),
        },
        Case {
            name: "log",
            inputs: |r| vec![positive(&[2, 5], r)],
            out_shape: &[2, 5],
            op: |t, v| Ok(t.log(v[0])),
        },
        Case {
            name: "softmax axis 0",
            inputs: |r| vec![uniform(&[3, 4], r)],
            out_shape: &[3, 4],
            op: |t, v| t.softmax(v[0], 0),
        },
        Case {
            name: "softmax axis 1",
            inputs: |r| vec![uniform(&[3, 4], r)],
            out_shape: &[3, 4],
            op: |t, v| t.softmax(v[0], 1),
        },
        Case {
            name: "softmax axis 2",
            inputs: |r| vec![uniform(&[2, 3, 4], r)],
            out_shape: &[2, 3, 4],
            op: |t, v| t.softmax(v[0], 2),
        },
        Case {
            name: "log_softmax",
            inputs: |r| vec![uniform(&[3, 4], r)],
            out_shape: &[3, 4],
            op: |t, v| Ok(t.log_softmax(v[0])),
        },
        Case {
            name: "concat axis 0",
            inputs: |r| vec![uniform(&[2, 3], r), uniform(&[1, 3], r)],
            out_shape: &[3, 3],
            op: |t, v| t.concat(&[v[0], v[1]], 0),
        },
        Case {
            name: "concat axis 1",
            inputs: |r| vec![uniform(&[2, 3], r), uniform(&[2, 2], r)],
            out_shape: &[2, 5],
            op: |t, v| t.concat(&[v[0], v[1]], 1),
        },
        Case {
            name: "slice",
            inputs: |r| vec![uniform(&[3, 6], r)],
            out_shape: &[3, 3],
            op: |t, v| t.slice(v[0], 1, 2, 5),
        },
        Case {
            name: "embedding_lookup",
            inputs: |r| vec![uniform(&[5, 3], r)],
            out_shape: &[4, 3],
            op: |t, v| t.embedding_lookup(v[0], &[4, 0, 4, 2]),
        },
        Case {
            name: "layer_norm",
            inputs: |r| vec![uniform(&[3, 5], r), uniform(&[5], r), uniform(&[5], r)],
            out_shape: &[3, 5],
            op: |t, v| t.layer_norm(v[0], v[1], v[2]),
        },
        Case {
            name: "dropout",
            inputs: |r| vec![uniform(&[4, 5], r)],
            out_shape: &[4, 5],
            op: |t, v| t.dropout(v[0], 0.3, &mut ChaCha8Rng::seed_from_u64(7)),
        },
        Case {
            name: "sum",
            inputs: |r| vec![uniform(&[3, 4], r)],
            out_shape: &[1],
            op: |t, v| {
                let s = t.sum(v[0]);
                t.reshape(s, &[1])
            },
        },
        Case {
            name: "reshape",
            inputs: |r| vec![uniform(&[3, 4], r)],
            out_shape: &[2, 6],
            op: |t, v| t.reshape(v[0], &[2, 6]),
        },
        Case {
            name: "transpose",
            inputs: |r| vec![uniform(&[3, 4], r)],
            out_shape: &[4, 3],
            op: |t, v| t.transpose(v[0]),
        },
        Case {
            name: "transpose batched",
            inputs: |r| vec![uniform(&[2, 3, 4], r)],
            out_shape: &[2, 4, 3],
            op: |t, v| t.transpose(v[0]),
        },
    ]
}

/// Worst relative error of `f` over `POINTS` random draws of its inputs.
fn worst_over_points<G, F>(gen: G, f: F) -> Result<f64>
where
    G: Fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Tensor),
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut worst: f64 = 0.0;
    for seed in 0..POINTS {
        let mut r = rng(1000 + seed);
        let (inputs, weights) = gen(&mut r);
        let report = check_gradients(&inputs, EPS, |tape, vars| {
            let out = f(tape, vars)?;
            project(tape, out, &weights)
        })?;
        worst = worst.max(report.max_rel_error);
    }
    Ok(worst)
}

fn lstm_case() -> Result<f64> {
    let h = 3;
    worst_over_points(
        |r| {
            let inputs = vec![
                uniform(&[1, 4 * h], r),
                uniform(&[1, h], r),
                uniform(&[1, h], r),
                uniform(&[h, 4 * h], r),
                uniform(&[4 * h], r),
            ];
            (inputs, uniform(&[1, 2 * h], r))
        },
        |tape, v| {
            let s = lstm_step(tape, v[0], LstmState { h: v[1], c: v[2] }, v[3], v[4])?;
            tape.concat(&[s.h, s.c], 1)
        },
    )
}

fn attention_case() -> Result<f64> {
    let (frames, enc_dim, att, q) = (4, 6, 3, 3);
    worst_over_points(
        |r| {
            let inputs = vec![
                uniform(&[frames, enc_dim], r),
                uniform(&[frames, att], r),
                uniform(&[1, q], r),
                uniform(&[q, att], r),
                uniform(&[att, 1], r),
            ];
            (inputs, uniform(&[1, enc_dim + frames], r))
        },
        |tape, v| {
            let enc = EncoderOutput { states: v[0], keys: v[1] };
            let (context, weights) = additive_attention(tape, enc, v[2], v[3], v[4])?;
            tape.concat(&[context, weights], 1)
        },
    )
}

fn small_transformer(mode: LmMode, seed: u64) -> TransformerLm {
    let cfg = TransformerConfig {
        vocab_size: 7,
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        d_ff: 12,
        max_len: 4,
        mode,
        dropout: 0.0,
    };
    TransformerLm::new(cfg, &mut rng(seed)).expect("valid config")
}

fn transformer_case() -> Result<f64> {
    let ids = vec![vec![5u32, 3, 6, 2]];
    let mut worst: f64 = 0.0;
    for seed in 0..POINTS {
        let model = small_transformer(LmMode::Mlm, 2000 + seed);
        let mut r = rng(3000 + seed);
        let weights = uniform(&[4, 8], &mut r);
        let report = check_gradients(model.params.tensors(), EPS, |tape, vars| {
            let bound = Bound::from_vars(vars.to_vec());
            let hidden = model.hidden(tape, &bound, &ids, None)?;
            project(tape, hidden, &weights)
        })?;
        worst = worst.max(report.max_rel_error);
    }
    Ok(worst)
}

fn small_student(seed: u64) -> Seq2SeqModel {
    let cfg = Seq2SeqConfig {
        input_dim: 3,
        vocab_size: 6,
        encoder_layers: 1,
        encoder_hidden: 3,
        decoder_hidden: 3,
        embed_dim: 2,
        attention_dim: 3,
    };
    Seq2SeqModel::new(cfg, &mut rng(seed))
}

fn random_soft(r: &mut ChaCha8Rng, n: usize, v: u32) -> Vec<Vec<SoftEntry>> {
    (0..n)
        .map(|_| {
            let a = r.gen_range(0..v);
            let b = (a + 1 + r.gen_range(0..v - 1)) % v;
            let p: f64 = r.gen_range(0.5..0.95);
            vec![(a, p), (b, 1.0 - p)]
        })
        .collect()
}

fn combined_loss_case() -> Result<f64> {
    let mut worst: f64 = 0.0;
    for seed in 0..POINTS {
        let model = small_student(4000 + seed);
        let mut r = rng(5000 + seed);
        let frames: Vec<Vec<f64>> = (0..4).map(|_| (0..3).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
        let targets = vec![4u32, 5, 2];
        let soft = random_soft(&mut r, 2, 6);
        let alpha = r.gen_range(0.1..0.9);
        let report = check_gradients(model.params.tensors(), EPS, |tape, vars| {
            let bound = Bound::from_vars(vars.to_vec());
            let logits = model.teacher_forced_logits(tape, &bound, &frames, &targets)?;
            let (ce, kd) = student_losses(tape, logits, &targets, Some(&soft), 0.1)?;
            combined_loss_var(tape, ce, kd, alpha)
        })?;
        worst = worst.max(report.max_rel_error);
    }
    Ok(worst)
}

/// Every check with the worst relative error over its random points.
pub fn gradient_suite() -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for case in op_cases() {
        let shape = case.out_shape;
        let gen = case.inputs;
        let worst = worst_over_points(|r| (gen(r), uniform(shape, r)), case.op)?;
        out.push((case.name.to_string(), worst));
    }
    out.push(("lstm step".to_string(), lstm_case()?));
    out.push(("attention step".to_string(), attention_case()?));
    out.push(("transformer block".to_string(), transformer_case()?));
    out.push(("combined loss through student".to_string(), combined_loss_case()?));
    Ok(out)
}
