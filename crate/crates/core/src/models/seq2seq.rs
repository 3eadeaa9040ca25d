//! Attention-based encoder-decoder: stacked bidirectional LSTM encoder, a
//! single-layer LSTM decoder and additive (content-based) attention.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::tokenizer::SOS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seq2SeqConfig {
    pub input_dim: usize,
    pub vocab_size: usize,
    pub encoder_layers: usize,
    pub encoder_hidden: usize,
    pub decoder_hidden: usize,
    pub embed_dim: usize,
    pub attention_dim: usize,
}

impl Seq2SeqConfig {
    /// 5 × bi-LSTM(320) encoder, LSTM(320) decoder.
    pub fn full_scale(input_dim: usize, vocab_size: usize) -> Self {
        Seq2SeqConfig {
            input_dim,
            vocab_size,
            encoder_layers: 5,
            encoder_hidden: 320,
            decoder_hidden: 320,
            embed_dim: 320,
            attention_dim: 320,
        }
    }

    /// 2 × bi-LSTM(64) encoder, LSTM(64) decoder.
    pub fn desk(input_dim: usize, vocab_size: usize) -> Self {
        Seq2SeqConfig {
            input_dim,
            vocab_size,
            encoder_layers: 2,
            encoder_hidden: 64,
            decoder_hidden: 64,
            embed_dim: 32,
            attention_dim: 64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct LstmIdx {
    w_ih: usize,
    w_hh: usize,
    b: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Indices {
    encoder: Vec<[LstmIdx; 2]>,
    embed: usize,
    decoder: LstmIdx,
    att_keys: usize,
    att_query: usize,
    att_bias: usize,
    att_v: usize,
    out_hidden_w: usize,
    out_hidden_b: usize,
    out_w: usize,
    out_b: usize,
}

/// LSTM hidden and cell state, each `[1, hidden]`.
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

/// Encoder states and their precomputed attention key projections.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    /// `[frames, 2 · encoder_hidden]`
    pub states: Var,
    /// `[frames, attention_dim]`
    pub keys: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    /// `[1, vocab]` unnormalised scores.
    pub logits: Var,
    /// `[1, frames]`
    pub attention: Var,
    pub state: LstmState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Seq2SeqModel {
    pub config: Seq2SeqConfig,
    pub params: ParamStore,
    idx: Indices,
}

/// One LSTM step given the precomputed input projection `x_proj = x · W_ih`
/// (`[1, 4H]`); gate order is input, forget, cell, output.
pub fn lstm_step(
    tape: &mut Tape,
    x_proj: Var,
    state: LstmState,
    w_hh: Var,
    bias: Var,
) -> Result<LstmState> {
    let hidden = tape.shape(state.h)[1];
    let rec = tape.matmul(state.h, w_hh)?;
    let pre = tape.add(x_proj, rec)?;
    let gates = tape.add(pre, bias)?;
    let i = tape.slice(gates, 1, 0, hidden)?;
    let i = tape.sigmoid(i);
    let f = tape.slice(gates, 1, hidden, 2 * hidden)?;
    let f = tape.sigmoid(f);
    let g = tape.slice(gates, 1, 2 * hidden, 3 * hidden)?;
    let g = tape.tanh(g);
    let o = tape.slice(gates, 1, 3 * hidden, 4 * hidden)?;
    let o = tape.sigmoid(o);
    let keep = tape.mul(f, state.c)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let squashed = tape.tanh(c);
    let h = tape.mul(o, squashed)?;
    Ok(LstmState { h, c })
}

/// Additive attention of a `[1, Q]` query over encoder states; returns
/// (context `[1, 2H]`, weights `[1, frames]`).
pub fn additive_attention(
    tape: &mut Tape,
    enc: EncoderOutput,
    query: Var,
    w_query: Var,
    v: Var,
) -> Result<(Var, Var)> {
    let q = tape.matmul(query, w_query)?;
    let a = tape.shape(q)[1];
    let q = tape.reshape(q, &[a])?;
    let e = tape.add(enc.keys, q)?;
    let e = tape.tanh(e);
    let scores = tape.matmul(e, v)?;
    let frames = tape.shape(scores)[0];
    let scores = tape.reshape(scores, &[1, frames])?;
    let weights = tape.softmax(scores, 1)?;
    let context = tape.matmul(weights, enc.states)?;
    Ok((context, weights))
}

fn init_lstm<R: Rng + ?Sized>(
    params: &mut ParamStore,
    prefix: &str,
    input: usize,
    hidden: usize,
    rng: &mut R,
) -> LstmIdx {
    let bound = 1.0 / (hidden as f64).sqrt();
    let w_ih = params.insert(format!("{prefix}.w_ih"), Tensor::uniform(&[input, 4 * hidden], bound, rng));
    let w_hh = params.insert(format!("{prefix}.w_hh"), Tensor::uniform(&[hidden, 4 * hidden], bound, rng));
    let mut b = Tensor::zeros(&[4 * hidden]);
    b.data_mut()[hidden..2 * hidden].iter_mut().for_each(|x| *x = 1.0);
    let b = params.insert(format!("{prefix}.b"), b);
    LstmIdx { w_ih, w_hh, b }
}

fn expect_shape(params: &ParamStore, name: &str, shape: &[usize]) -> Result<usize> {
    let i = params.position(name)?;
    let actual = params.tensors()[i].shape();
    if actual != shape {
        return Err(Error::shape("checkpoint", shape, actual));
    }
    Ok(i)
}

impl Seq2SeqModel {
    pub fn new<R: Rng + ?Sized>(config: Seq2SeqConfig, rng: &mut R) -> Self {
        let c = &config;
        let mut p = ParamStore::new();
        let h = c.encoder_hidden;
        for l in 0..c.encoder_layers {
            let input = if l == 0 { c.input_dim } else { 2 * h };
            init_lstm(&mut p, &format!("enc.{l}.fw"), input, h, rng);
            init_lstm(&mut p, &format!("enc.{l}.bw"), input, h, rng);
        }
        p.insert("dec.embed", Tensor::randn(&[c.vocab_size, c.embed_dim], 0.1, rng));
        init_lstm(&mut p, "dec.lstm", c.embed_dim, c.decoder_hidden, rng);
        let ctx = 2 * h;
        let b = |n: usize| 1.0 / (n as f64).sqrt();
        p.insert("att.w_keys", Tensor::uniform(&[ctx, c.attention_dim], b(ctx), rng));
        p.insert("att.w_query", Tensor::uniform(&[c.decoder_hidden, c.attention_dim], b(c.decoder_hidden), rng));
        p.insert("att.b", Tensor::zeros(&[c.attention_dim]));
        p.insert("att.v", Tensor::uniform(&[c.attention_dim, 1], b(c.attention_dim), rng));
        let joint = c.decoder_hidden + ctx;
        p.insert("out.hidden_w", Tensor::uniform(&[joint, c.decoder_hidden], b(joint), rng));
        p.insert("out.hidden_b", Tensor::zeros(&[c.decoder_hidden]));
        p.insert("out.w", Tensor::uniform(&[c.decoder_hidden, c.vocab_size], b(c.decoder_hidden), rng));
        p.insert("out.b", Tensor::zeros(&[c.vocab_size]));
        Seq2SeqModel::from_params(config, p).expect("freshly initialised parameters are consistent")
    }

    pub fn from_params(config: Seq2SeqConfig, params: ParamStore) -> Result<Self> {
        let c = &config;
        let h = c.encoder_hidden;
        let lstm = |prefix: &str, input: usize, hidden: usize| -> Result<LstmIdx> {
            Ok(LstmIdx {
                w_ih: expect_shape(&params, &format!("{prefix}.w_ih"), &[input, 4 * hidden])?,
                w_hh: expect_shape(&params, &format!("{prefix}.w_hh"), &[hidden, 4 * hidden])?,
                b: expect_shape(&params, &format!("{prefix}.b"), &[4 * hidden])?,
            })
        };
        let mut encoder = Vec::with_capacity(c.encoder_layers);
        for l in 0..c.encoder_layers {
            let input = if l == 0 { c.input_dim } else { 2 * h };
            encoder.push([
                lstm(&format!("enc.{l}.fw"), input, h)?,
                lstm(&format!("enc.{l}.bw"), input, h)?,
            ]);
        }
        let ctx = 2 * h;
        let joint = c.decoder_hidden + ctx;
        let idx = Indices {
            encoder,
            embed: expect_shape(&params, "dec.embed", &[c.vocab_size, c.embed_dim])?,
            decoder: lstm("dec.lstm", c.embed_dim, c.decoder_hidden)?,
            att_keys: expect_shape(&params, "att.w_keys", &[ctx, c.attention_dim])?,
            att_query: expect_shape(&params, "att.w_query", &[c.decoder_hidden, c.attention_dim])?,
            att_bias: expect_shape(&params, "att.b", &[c.attention_dim])?,
            att_v: expect_shape(&params, "att.v", &[c.attention_dim, 1])?,
            out_hidden_w: expect_shape(&params, "out.hidden_w", &[joint, c.decoder_hidden])?,
            out_hidden_b: expect_shape(&params, "out.hidden_b", &[c.decoder_hidden])?,
            out_w: expect_shape(&params, "out.w", &[c.decoder_hidden, c.vocab_size])?,
            out_b: expect_shape(&params, "out.b", &[c.vocab_size])?,
        };
        Ok(Seq2SeqModel { config, params, idx })
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn run_direction(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        input: Var,
        cell: LstmIdx,
        reverse: bool,
    ) -> Result<Var> {
        let frames = tape.shape(input)[0];
        let hidden = self.config.encoder_hidden;
        let proj = tape.matmul(input, bound.var(cell.w_ih))?;
        let mut state = LstmState {
            h: tape.constant(Tensor::zeros(&[1, hidden])),
            c: tape.constant(Tensor::zeros(&[1, hidden])),
        };
        let mut outputs = vec![state.h; frames];
        let order: Vec<usize> = if reverse {
            (0..frames).rev().collect()
        } else {
            (0..frames).collect()
        };
        for t in order {
            let x = tape.slice(proj, 0, t, t + 1)?;
            state = lstm_step(tape, x, state, bound.var(cell.w_hh), bound.var(cell.b))?;
            outputs[t] = state.h;
        }
        tape.concat(&outputs, 0)
    }

    /// One state of dimension `2 · encoder_hidden` per input frame.
    pub fn encode(&self, tape: &mut Tape, bound: &Bound, frames: &[Vec<f64>]) -> Result<EncoderOutput> {
        if frames.is_empty() {
            return Err(Error::Usage("cannot encode zero frames".into()));
        }
        if let Some(f) = frames.iter().find(|f| f.len() != self.config.input_dim) {
            return Err(Error::shape("encode", &[self.config.input_dim], &[f.len()]));
        }
        let mut x = tape.constant(Tensor::from_rows(frames)?);
        for layer in &self.idx.encoder {
            let fw = self.run_direction(tape, bound, x, layer[0], false)?;
            let bw = self.run_direction(tape, bound, x, layer[1], true)?;
            x = tape.concat(&[fw, bw], 1)?;
        }
        let keys = tape.matmul(x, bound.var(self.idx.att_keys))?;
        let keys = tape.add(keys, bound.var(self.idx.att_bias))?;
        Ok(EncoderOutput { states: x, keys })
    }

    pub fn initial_state(&self, tape: &mut Tape) -> LstmState {
        let d = self.config.decoder_hidden;
        LstmState {
            h: tape.constant(Tensor::zeros(&[1, d])),
            c: tape.constant(Tensor::zeros(&[1, d])),
        }
    }

    /// Decoder LSTM + attention from a projected input row; returns the
    /// pre-output joint vector `[1, Hd + 2H]`, attention weights and state.
    fn advance(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        enc: EncoderOutput,
        x_proj: Var,
        state: LstmState,
    ) -> Result<(Var, Var, LstmState)> {
        let d = self.idx.decoder;
        let state = lstm_step(tape, x_proj, state, bound.var(d.w_hh), bound.var(d.b))?;
        let (context, weights) = additive_attention(
            tape,
            enc,
            state.h,
            bound.var(self.idx.att_query),
            bound.var(self.idx.att_v),
        )?;
        let joint = tape.concat(&[state.h, context], 1)?;
        Ok((joint, weights, state))
    }

    fn project(&self, tape: &mut Tape, bound: &Bound, joint: Var) -> Result<Var> {
        let h = tape.matmul(joint, bound.var(self.idx.out_hidden_w))?;
        let h = tape.add(h, bound.var(self.idx.out_hidden_b))?;
        let h = tape.tanh(h);
        let logits = tape.matmul(h, bound.var(self.idx.out_w))?;
        tape.add(logits, bound.var(self.idx.out_b))
    }

    pub fn decoder_step(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        enc: EncoderOutput,
        prev_token: u32,
        state: LstmState,
    ) -> Result<StepOutput> {
        if prev_token as usize >= self.config.vocab_size {
            return Err(Error::Data(format!("token {prev_token} outside vocabulary")));
        }
        let emb = tape.embedding_lookup(bound.var(self.idx.embed), &[prev_token as usize])?;
        let x_proj = tape.matmul(emb, bound.var(self.idx.decoder.w_ih))?;
        let (joint, attention, state) = self.advance(tape, bound, enc, x_proj, state)?;
        let logits = self.project(tape, bound, joint)?;
        Ok(StepOutput {
            logits,
            attention,
            state,
        })
    }

    /// Logits `[N, V]` for every target position under teacher forcing; the
    /// decoder input is `SOS` followed by `targets[..N-1]`.
    pub fn teacher_forced_logits(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        frames: &[Vec<f64>],
        targets: &[u32],
    ) -> Result<Var> {
        if targets.is_empty() {
            return Err(Error::Usage("empty target sequence".into()));
        }
        let enc = self.encode(tape, bound, frames)?;
        let mut inputs = Vec::with_capacity(targets.len());
        inputs.push(SOS as usize);
        inputs.extend(targets[..targets.len() - 1].iter().map(|&t| t as usize));
        if let Some(&bad) = inputs.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Data(format!("token {bad} outside vocabulary")));
        }
        let emb = tape.embedding_lookup(bound.var(self.idx.embed), &inputs)?;
        let proj = tape.matmul(emb, bound.var(self.idx.decoder.w_ih))?;
        let mut state = self.initial_state(tape);
        let mut joints = Vec::with_capacity(targets.len());
        for i in 0..targets.len() {
            let x = tape.slice(proj, 0, i, i + 1)?;
            let (joint, _, next) = self.advance(tape, bound, enc, x, state)?;
            joints.push(joint);
            state = next;
        }
        let joint = tape.concat(&joints, 0)?;
        self.project(tape, bound, joint)
    }

    /// Encoder output as plain values, for decoding without a tape.
    pub fn encode_frames(&self, frames: &[Vec<f64>]) -> Result<EncodedFrames> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let enc = self.encode(&mut tape, &bound, frames)?;
        Ok(EncodedFrames {
            states: tape.value(enc.states).clone(),
            keys: tape.value(enc.keys).clone(),
        })
    }

    pub fn start_state(&self) -> DecoderState {
        let d = self.config.decoder_hidden;
        DecoderState {
            h: vec![0.0; d],
            c: vec![0.0; d],
        }
    }

    /// Log-probabilities of the next token after `prev`, computed directly
    /// from parameter values; matches [`Seq2SeqModel::decoder_step`].
    pub fn step_log_probs(&self, enc: &EncodedFrames, prev: u32, state: &DecoderState) -> Result<(Vec<f64>, DecoderState)> {
        let c = &self.config;
        if prev as usize >= c.vocab_size {
            return Err(Error::Data(format!("token {prev} outside vocabulary")));
        }
        let p = |i: usize| &self.params.tensors()[i];
        let hd = c.decoder_hidden;
        let emb = p(self.idx.embed).row(prev as usize);
        let mut gates = p(self.idx.decoder.b).data().to_vec();
        vec_mat_acc(emb, p(self.idx.decoder.w_ih), &mut gates);
        vec_mat_acc(&state.h, p(self.idx.decoder.w_hh), &mut gates);
        let sig = crate::autodiff::sigmoid;
        let mut next = DecoderState {
            h: vec![0.0; hd],
            c: vec![0.0; hd],
        };
        for j in 0..hd {
            let i = sig(gates[j]);
            let f = sig(gates[hd + j]);
            let g = gates[2 * hd + j].tanh();
            let o = sig(gates[3 * hd + j]);
            next.c[j] = f * state.c[j] + i * g;
            next.h[j] = o * next.c[j].tanh();
        }

        let mut q = vec![0.0; c.attention_dim];
        vec_mat_acc(&next.h, p(self.idx.att_query), &mut q);
        let v = p(self.idx.att_v).data();
        let frames = enc.keys.rows();
        let scores: Vec<f64> = (0..frames)
            .map(|t| {
                enc.keys
                    .row(t)
                    .iter()
                    .zip(&q)
                    .zip(v)
                    .map(|((k, q), v)| (k + q).tanh() * v)
                    .sum()
            })
            .collect();
        let lse = crate::autodiff::log_sum_exp(&scores);
        let ctx_dim = enc.states.last_dim();
        let mut joint = next.h.clone();
        joint.resize(hd + ctx_dim, 0.0);
        for (t, s) in scores.iter().enumerate() {
            let w = (s - lse).exp();
            for (j, x) in enc.states.row(t).iter().enumerate() {
                joint[hd + j] += w * x;
            }
        }

        let mut hidden = p(self.idx.out_hidden_b).data().to_vec();
        vec_mat_acc(&joint, p(self.idx.out_hidden_w), &mut hidden);
        hidden.iter_mut().for_each(|x| *x = x.tanh());
        let mut logits = p(self.idx.out_b).data().to_vec();
        vec_mat_acc(&hidden, p(self.idx.out_w), &mut logits);
        let lse = crate::autodiff::log_sum_exp(&logits);
        logits.iter_mut().for_each(|x| *x -= lse);
        Ok((logits, next))
    }
}

/// Encoder states and attention keys of one utterance.
#[derive(Clone, Debug)]
pub struct EncodedFrames {
    pub states: Tensor,
    pub keys: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

/// `out += x · m` for a row vector `x` and matrix `m` `[len(x), len(out)]`.
fn vec_mat_acc(x: &[f64], m: &Tensor, out: &mut [f64]) {
    let cols = m.last_dim();
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (o, w) in out.iter_mut().zip(&m.data()[i * cols..(i + 1) * cols]) {
            *o += xi * w;
        }
    }
}
