//! Pre-norm transformer language model used as the distillation teacher,
//! either bidirectional (masked LM) or causal (left-to-right).

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::tokenizer::PAD;

/// Additive mask value; `exp` of it underflows to exactly zero.
const MASKED: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LmMode {
    /// Every position attends to every non-pad position.
    Mlm,
    /// Position `i` attends to positions `<= i`.
    Causal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    /// Longest input accepted (learned positional table size).
    pub max_len: usize,
    pub mode: LmMode,
    pub dropout: f64,
}

impl TransformerConfig {
    /// 6 layers, 512 hidden, 8 heads.
    pub fn full_scale(vocab_size: usize, max_len: usize, mode: LmMode) -> Self {
        TransformerConfig {
            vocab_size,
            d_model: 512,
            n_heads: 8,
            n_layers: 6,
            d_ff: 2048,
            max_len,
            mode,
            dropout: 0.1,
        }
    }

    /// 2 layers, 128 hidden, 4 heads.
    pub fn desk(vocab_size: usize, max_len: usize, mode: LmMode) -> Self {
        TransformerConfig {
            vocab_size,
            d_model: 128,
            n_heads: 4,
            n_layers: 2,
            d_ff: 256,
            max_len,
            mode,
            dropout: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct LayerIdx {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    bq: usize,
    bk: usize,
    bv: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Indices {
    tok: usize,
    pos: usize,
    layers: Vec<LayerIdx>,
    lnf_g: usize,
    lnf_b: usize,
    out_w: usize,
    out_b: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerLm {
    pub config: TransformerConfig,
    pub params: ParamStore,
    idx: Indices,
}

fn layer_names(l: usize) -> [String; 16] {
    [
        "ln1.g",
        "ln1.b",
        "attn.wq",
        "attn.wk",
        "attn.wv",
        "attn.wo",
        "attn.bq",
        "attn.bk",
        "attn.bv",
        "attn.bo",
        "ln2.g",
        "ln2.b",
        "ff.w1",
        "ff.b1",
        "ff.w2",
        "ff.b2",
    ]
    .map(|s| format!("layer{l}.{s}"))
}

fn layer_shapes(c: &TransformerConfig) -> [Vec<usize>; 16] {
    let (d, f) = (c.d_model, c.d_ff);
    [
        vec![d],
        vec![d],
        vec![d, d],
        vec![d, d],
        vec![d, d],
        vec![d, d],
        vec![d],
        vec![d],
        vec![d],
        vec![d],
        vec![d],
        vec![d],
        vec![d, f],
        vec![f],
        vec![f, d],
        vec![d],
    ]
}

fn lookup(params: &ParamStore, name: &str, shape: &[usize]) -> Result<usize> {
    let i = params.position(name)?;
    if params.tensors()[i].shape() != shape {
        return Err(Error::shape("checkpoint", shape, params.tensors()[i].shape()));
    }
    Ok(i)
}

impl TransformerLm {
    pub fn new<R: Rng + ?Sized>(config: TransformerConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut p = ParamStore::new();
        p.insert("tok_emb", Tensor::randn(&[c.vocab_size, c.d_model], 0.1, rng));
        p.insert("pos_emb", Tensor::randn(&[c.max_len, c.d_model], 0.1, rng));
        for l in 0..c.n_layers {
            for (name, shape) in layer_names(l).into_iter().zip(layer_shapes(c)) {
                let t = if name.ends_with(".g") {
                    Tensor::full(&shape, 1.0)
                } else if shape.len() == 1 {
                    Tensor::zeros(&shape)
                } else {
                    let mut std = 1.0 / (shape[0] as f64).sqrt();
                    if name.ends_with("wo") || name.ends_with("w2") {
                        std /= (2.0 * c.n_layers as f64).sqrt();
                    }
                    Tensor::randn(&shape, std, rng)
                };
                p.insert(name, t);
            }
        }
        p.insert("ln_f.g", Tensor::full(&[c.d_model], 1.0));
        p.insert("ln_f.b", Tensor::zeros(&[c.d_model]));
        p.insert(
            "out.w",
            Tensor::randn(&[c.d_model, c.vocab_size], 1.0 / (c.d_model as f64).sqrt(), rng),
        );
        p.insert("out.b", Tensor::zeros(&[c.vocab_size]));
        TransformerLm::from_params(config, p)
    }

    pub fn from_params(config: TransformerConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut layers = Vec::with_capacity(c.n_layers);
        for l in 0..c.n_layers {
            let ids = layer_names(l)
                .into_iter()
                .zip(layer_shapes(c))
                .map(|(n, s)| lookup(&params, &n, &s))
                .collect::<Result<Vec<_>>>()?;
            layers.push(LayerIdx {
                ln1_g: ids[0],
                ln1_b: ids[1],
                wq: ids[2],
                wk: ids[3],
                wv: ids[4],
                wo: ids[5],
                bq: ids[6],
                bk: ids[7],
                bv: ids[8],
                bo: ids[9],
                ln2_g: ids[10],
                ln2_b: ids[11],
                w1: ids[12],
                b1: ids[13],
                w2: ids[14],
                b2: ids[15],
            });
        }
        let idx = Indices {
            tok: lookup(&params, "tok_emb", &[c.vocab_size, c.d_model])?,
            pos: lookup(&params, "pos_emb", &[c.max_len, c.d_model])?,
            layers,
            lnf_g: lookup(&params, "ln_f.g", &[c.d_model])?,
            lnf_b: lookup(&params, "ln_f.b", &[c.d_model])?,
            out_w: lookup(&params, "out.w", &[c.d_model, c.vocab_size])?,
            out_b: lookup(&params, "out.b", &[c.vocab_size])?,
        };
        Ok(TransformerLm { config, params, idx })
    }

    pub fn mode(&self) -> LmMode {
        self.config.mode
    }

    fn attention_mask(&self, batch: &[Vec<u32>]) -> Option<Tensor> {
        let n = batch[0].len();
        let causal = self.config.mode == LmMode::Causal;
        let padded = batch.iter().any(|s| s.contains(&PAD));
        if !causal && !padded {
            return None;
        }
        let per_seq = |seq: &[u32]| {
            let mut m = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    if (causal && j > i) || (seq[j] == PAD && j != i) {
                        m[i * n + j] = MASKED;
                    }
                }
            }
            m
        };
        if padded {
            let data: Vec<f64> = batch.iter().flat_map(|s| per_seq(s)).collect();
            Some(Tensor::new(vec![batch.len(), n, n], data).expect("mask shape"))
        } else {
            Some(Tensor::new(vec![n, n], per_seq(&batch[0])).expect("mask shape"))
        }
    }

    /// Final-layer hidden states `[B · n, d_model]` for a batch of equal-length
    /// sequences. Dropout is applied only when an RNG is supplied.
    pub fn hidden(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        batch: &[Vec<u32>],
        mut dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let first = batch
            .first()
            .ok_or_else(|| Error::Usage("empty batch".into()))?;
        let n = first.len();
        if n == 0 {
            return Err(Error::Usage("empty sequence".into()));
        }
        if n > self.config.max_len {
            return Err(Error::Window {
                len: n,
                window: self.config.max_len,
            });
        }
        if let Some(s) = batch.iter().find(|s| s.len() != n) {
            return Err(Error::shape("transformer batch", &[n], &[s.len()]));
        }
        let c = &self.config;
        let ids: Vec<usize> = batch.iter().flatten().map(|&t| t as usize).collect();
        if let Some(&bad) = ids.iter().find(|&&t| t >= c.vocab_size) {
            return Err(Error::Data(format!("token {bad} outside vocabulary")));
        }
        let b = batch.len();
        let (d, heads) = (c.d_model, c.n_heads);
        let dh = d / heads;
        let pos_ids: Vec<usize> = (0..b).flat_map(|_| 0..n).collect();
        let tok = tape.embedding_lookup(bound.var(self.idx.tok), &ids)?;
        let pos = tape.embedding_lookup(bound.var(self.idx.pos), &pos_ids)?;
        let mut x = tape.add(tok, pos)?;
        let mask = self.attention_mask(batch).map(|m| tape.constant(m));
        let scale = 1.0 / (dh as f64).sqrt();

        for layer in &self.idx.layers {
            let v = |i: usize| bound.var(i);
            let h = tape.layer_norm(x, v(layer.ln1_g), v(layer.ln1_b))?;
            let proj = |w: usize, bias: usize, tape: &mut Tape| -> Result<Var> {
                let y = tape.matmul(h, v(w))?;
                tape.add(y, v(bias))
            };
            let q = proj(layer.wq, layer.bq, tape)?;
            let k = proj(layer.wk, layer.bk, tape)?;
            let val = proj(layer.wv, layer.bv, tape)?;
            let mut head_outputs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let split = |t: Var, tape: &mut Tape| -> Result<Var> {
                    let s = tape.slice(t, 1, hd * dh, (hd + 1) * dh)?;
                    tape.reshape(s, &[b, n, dh])
                };
                let qh = split(q, tape)?;
                let kh = split(k, tape)?;
                let vh = split(val, tape)?;
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let mut scores = tape.scale(scores, scale);
                if let Some(m) = mask {
                    scores = tape.add(scores, m)?;
                }
                let weights = tape.softmax(scores, 2)?;
                let out = tape.matmul(weights, vh)?;
                head_outputs.push(tape.reshape(out, &[b * n, dh])?);
            }
            let merged = tape.concat(&head_outputs, 1)?;
            let attn = tape.matmul(merged, v(layer.wo))?;
            let mut attn = tape.add(attn, v(layer.bo))?;
            if let Some(rng) = dropout_rng.as_deref_mut() {
                attn = tape.dropout(attn, c.dropout, rng)?;
            }
            x = tape.add(x, attn)?;

            let h = tape.layer_norm(x, v(layer.ln2_g), v(layer.ln2_b))?;
            let f = tape.matmul(h, v(layer.w1))?;
            let f = tape.add(f, v(layer.b1))?;
            let f = tape.relu(f);
            let f = tape.matmul(f, v(layer.w2))?;
            let mut f = tape.add(f, v(layer.b2))?;
            if let Some(rng) = dropout_rng.as_deref_mut() {
                f = tape.dropout(f, c.dropout, rng)?;
            }
            x = tape.add(x, f)?;
        }
        tape.layer_norm(x, bound.var(self.idx.lnf_g), bound.var(self.idx.lnf_b))
    }

    /// Output logits for the selected rows of a [`TransformerLm::hidden`] result.
    pub fn logits_at(&self, tape: &mut Tape, bound: &Bound, hidden: Var, rows: &[usize]) -> Result<Var> {
        let picked = tape.embedding_lookup(hidden, rows)?;
        let logits = tape.matmul(picked, bound.var(self.idx.out_w))?;
        tape.add(logits, bound.var(self.idx.out_b))
    }

    /// Logits `[n, V]` at every position of one sequence.
    pub fn logits(&self, ids: &[u32]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let batch = [ids.to_vec()];
        let hidden = self.hidden(&mut tape, &bound, &batch, None)?;
        let rows: Vec<usize> = (0..ids.len()).collect();
        let out = self.logits_at(&mut tape, &bound, hidden, &rows)?;
        Ok(tape.value(out).clone())
    }

    /// Per-position logits of a masked LM; only masked positions are meaningful.
    pub fn mlm_forward(&self, ids: &[u32]) -> Result<Tensor> {
        if self.config.mode != LmMode::Mlm {
            return Err(Error::Usage("mlm_forward on a causal model".into()));
        }
        self.logits(ids)
    }

    /// Logits at position `i` predict the token at position `i + 1`.
    pub fn causal_forward(&self, ids: &[u32]) -> Result<Tensor> {
        if self.config.mode != LmMode::Causal {
            return Err(Error::Usage("causal_forward on a masked LM".into()));
        }
        self.logits(ids)
    }

    /// Logits `[B, V]` at one position per sequence of a batch; used for
    /// masked prediction where each sequence carries its own MASK position.
    pub fn batch_logits_at(&self, batch: &[Vec<u32>], positions: &[usize]) -> Result<Tensor> {
        let n = batch.first().map_or(0, Vec::len);
        if positions.len() != batch.len() || positions.iter().any(|&p| p >= n) {
            return Err(Error::Usage("one in-range position per sequence required".into()));
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let hidden = self.hidden(&mut tape, &bound, batch, None)?;
        let rows: Vec<usize> = positions.iter().enumerate().map(|(b, &p)| b * n + p).collect();
        let out = self.logits_at(&mut tape, &bound, hidden, &rows)?;
        Ok(tape.value(out).clone())
    }
}
