//! Beam search (plain and with shallow fusion), n-best rescoring and word
//! error rate.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::log_sum_exp;
use crate::error::{Error, Result};
use crate::models::{DecoderState, EncodedFrames, LmMode, Seq2SeqModel, TransformerLm};
use crate::tokenizer::{EOS, MASK, SOS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub asr_logscore: f64,
    pub lm_logscore: Option<f64>,
    pub finished: bool,
}

impl Hypothesis {
    /// `asr + weight * lm` (just `asr` without an LM score).
    pub fn total(&self, lm_weight: f64) -> f64 {
        match self.lm_logscore {
            Some(lm) => self.asr_logscore + lm_weight * lm,
            None => self.asr_logscore,
        }
    }

    /// Tokens without the terminating EOS.
    pub fn content(&self) -> &[u32] {
        if self.finished {
            &self.tokens[..self.tokens.len() - 1]
        } else {
            &self.tokens
        }
    }
}

/// Descending score, then shorter, then lexicographically smaller tokens.
fn rank(a: (f64, &[u32]), b: (f64, &[u32])) -> Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(Ordering::Equal)
        .then(a.1.len().cmp(&b.1.len()))
        .then(a.1.cmp(b.1))
}

/// A left-to-right decoder producing next-token log-probabilities.
pub trait StepDecoder {
    type State: Clone;
    fn vocab_size(&self) -> usize;
    /// State before any output and the log-probabilities of the first token.
    fn start(&self) -> Result<(Self::State, Vec<f64>)>;
    /// Consumes `token`; returns the new state and next-token log-probabilities.
    fn extend(&self, state: &Self::State, token: u32) -> Result<(Self::State, Vec<f64>)>;
}

/// A language model scoring the next token after an output prefix.
pub trait PrefixLm {
    fn next_log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>>;
}

/// A language model giving a log-score to a whole hypothesis.
pub trait SequenceScorer {
    fn score(&self, tokens: &[u32]) -> Result<f64>;
}

/// The student recogniser bound to one utterance's frames.
pub struct StudentDecoder<'a> {
    model: &'a Seq2SeqModel,
    enc: EncodedFrames,
}

impl<'a> StudentDecoder<'a> {
    pub fn new(model: &'a Seq2SeqModel, frames: &[Vec<f64>]) -> Result<Self> {
        Ok(StudentDecoder {
            model,
            enc: model.encode_frames(frames)?,
        })
    }
}

impl StepDecoder for StudentDecoder<'_> {
    type State = DecoderState;

    fn vocab_size(&self) -> usize {
        self.model.vocab_size()
    }

    fn start(&self) -> Result<(DecoderState, Vec<f64>)> {
        let (lp, s) = self.model.step_log_probs(&self.enc, SOS, &self.model.start_state())?;
        Ok((s, lp))
    }

    fn extend(&self, state: &DecoderState, token: u32) -> Result<(DecoderState, Vec<f64>)> {
        let (lp, s) = self.model.step_log_probs(&self.enc, token, state)?;
        Ok((s, lp))
    }
}

/// A decoder defined by a function from output prefix to log-probabilities.
pub struct PrefixDecoder<F> {
    pub vocab_size: usize,
    pub f: F,
}

impl<F: Fn(&[u32]) -> Result<Vec<f64>>> StepDecoder for PrefixDecoder<F> {
    type State = Vec<u32>;

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn start(&self) -> Result<(Vec<u32>, Vec<f64>)> {
        Ok((Vec::new(), (self.f)(&[])?))
    }

    fn extend(&self, state: &Vec<u32>, token: u32) -> Result<(Vec<u32>, Vec<f64>)> {
        let mut next = state.clone();
        next.push(token);
        let lp = (self.f)(&next)?;
        Ok((next, lp))
    }
}

/// Wraps a prefix function as a [`PrefixLm`].
pub struct FnLm<F>(pub F);

impl<F: Fn(&[u32]) -> Result<Vec<f64>>> PrefixLm for FnLm<F> {
    fn next_log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>> {
        (self.0)(prefix)
    }
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(row);
    row.iter().map(|z| z - lse).collect()
}

/// Utterance-level causal LM: the prefix is preceded by an EOS boundary and
/// truncated on the left to the model's maximum length.
pub struct CausalLm<'a>(pub &'a TransformerLm);

impl PrefixLm for CausalLm<'_> {
    fn next_log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>> {
        let mut seq = vec![EOS];
        seq.extend_from_slice(prefix);
        let max = self.0.config.max_len;
        let seq = &seq[seq.len().saturating_sub(max)..];
        let logits = self.0.causal_forward(seq)?;
        Ok(log_softmax_row(logits.row(seq.len() - 1)))
    }
}

impl SequenceScorer for CausalLm<'_> {
    /// `sum_i log P(y_i | EOS, y_<i)` over every token including a final EOS.
    fn score(&self, tokens: &[u32]) -> Result<f64> {
        if tokens.is_empty() {
            return Ok(0.0);
        }
        let mut seq = vec![EOS];
        seq.extend_from_slice(tokens);
        if seq.len() - 1 > self.0.config.max_len {
            return Err(Error::Window {
                len: seq.len() - 1,
                window: self.0.config.max_len,
            });
        }
        let logits = self.0.causal_forward(&seq[..seq.len() - 1])?;
        Ok(tokens
            .iter()
            .enumerate()
            .map(|(i, &t)| log_softmax_row(logits.row(i))[t as usize])
            .sum())
    }
}

/// Pseudo-log-likelihood under a masked LM: each non-EOS token is masked in
/// turn (in `[EOS; tokens]`) and its log-probability summed.
pub struct PseudoLogLikelihood<'a>(pub &'a TransformerLm);

impl SequenceScorer for PseudoLogLikelihood<'_> {
    fn score(&self, tokens: &[u32]) -> Result<f64> {
        let mut seq = vec![EOS];
        seq.extend_from_slice(tokens);
        let positions: Vec<usize> = (1..seq.len()).filter(|&p| seq[p] != EOS).collect();
        if positions.is_empty() {
            return Ok(0.0);
        }
        let batch: Vec<Vec<u32>> = positions
            .iter()
            .map(|&p| {
                let mut s = seq.clone();
                s[p] = MASK;
                s
            })
            .collect();
        let logits = self.0.batch_logits_at(&batch, &positions)?;
        Ok(positions
            .iter()
            .enumerate()
            .map(|(r, &p)| log_softmax_row(logits.row(r))[seq[p] as usize])
            .sum())
    }
}

/// Causal log-likelihood or masked-LM pseudo-log-likelihood by teacher kind.
pub fn lm_sequence_score(lm: &TransformerLm, tokens: &[u32]) -> Result<f64> {
    match lm.mode() {
        LmMode::Causal => CausalLm(lm).score(tokens),
        LmMode::Mlm => PseudoLogLikelihood(lm).score(tokens),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SearchOptions {
    pub beam_width: usize,
    pub max_len: usize,
    /// Stop once `beam_width` retired hypotheses all score at least as well as
    /// the best live one. Scores never increase along a path, so this does
    /// not change the result.
    pub early_stop: bool,
}

impl SearchOptions {
    pub fn new(beam_width: usize, max_len: usize) -> Self {
        SearchOptions {
            beam_width,
            max_len,
            early_stop: true,
        }
    }
}

struct Live<S> {
    hyp: Hypothesis,
    state: S,
    asr_next: Vec<f64>,
    lm_next: Option<Vec<f64>>,
}

fn check_distribution(lp: &[f64], vocab: usize) -> Result<()> {
    if lp.len() != vocab {
        return Err(Error::shape("decoder output", &[vocab], &[lp.len()]));
    }
    Ok(())
}

/// Beam search with optional shallow fusion (`lm` with its weight).
///
/// Each step scores every extension of every live hypothesis by
/// `asr + weight * lm`, keeps the best `beam_width`, and retires those that
/// emit EOS or reach `max_len`. Returns up to `beam_width` retired
/// hypotheses, best first.
pub fn search<D: StepDecoder>(
    decoder: &D,
    lm: Option<(&dyn PrefixLm, f64)>,
    opts: SearchOptions,
) -> Result<Vec<Hypothesis>> {
    if opts.beam_width == 0 {
        return Err(Error::Usage("beam width must be >= 1".into()));
    }
    if opts.max_len == 0 {
        return Err(Error::Usage("max_len must be >= 1".into()));
    }
    if let Some((_, w)) = lm {
        if !(w >= 0.0) {
            return Err(Error::Config(format!("lm weight {w} must be >= 0")));
        }
    }
    let vocab = decoder.vocab_size();
    let weight = lm.map_or(0.0, |(_, w)| w);
    let lm_probs = |prefix: &[u32]| -> Result<Option<Vec<f64>>> {
        match lm {
            None => Ok(None),
            Some((m, _)) => {
                let lp = m.next_log_probs(prefix)?;
                check_distribution(&lp, vocab)?;
                Ok(Some(lp))
            }
        }
    };

    let (state, asr_next) = decoder.start()?;
    check_distribution(&asr_next, vocab)?;
    let mut live = vec![Live {
        hyp: Hypothesis {
            tokens: Vec::new(),
            asr_logscore: 0.0,
            lm_logscore: lm.map(|_| 0.0),
            finished: false,
        },
        state,
        asr_next,
        lm_next: lm_probs(&[])?,
    }];
    let mut pool: Vec<Hypothesis> = Vec::new();

    while !live.is_empty() {
        let mut cands: Vec<(usize, u32, f64, Option<f64>, f64)> = Vec::with_capacity(live.len() * vocab);
        for (i, l) in live.iter().enumerate() {
            for v in 0..vocab {
                let asr = l.hyp.asr_logscore + l.asr_next[v];
                let lmv = match (&l.lm_next, l.hyp.lm_logscore) {
                    (Some(next), Some(acc)) => Some(acc + next[v]),
                    _ => None,
                };
                let total = asr + lmv.map_or(0.0, |x| weight * x);
                cands.push((i, v as u32, asr, lmv, total));
            }
        }
        let seq = |c: &(usize, u32, f64, Option<f64>, f64)| {
            let mut t = live[c.0].hyp.tokens.clone();
            t.push(c.1);
            t
        };
        cands.sort_by(|a, b| {
            b.4.partial_cmp(&a.4).unwrap_or(Ordering::Equal).then_with(|| {
                let (ta, tb) = (&live[a.0].hyp.tokens, &live[b.0].hyp.tokens);
                ta.cmp(tb).then(a.1.cmp(&b.1))
            })
        });
        cands.truncate(opts.beam_width);

        let mut next_live = Vec::new();
        for c in &cands {
            let tokens = seq(c);
            let finished = c.1 == EOS;
            let hyp = Hypothesis {
                tokens,
                asr_logscore: c.2,
                lm_logscore: c.3,
                finished,
            };
            if finished || hyp.tokens.len() >= opts.max_len {
                pool.push(hyp);
            } else {
                let (state, asr_next) = decoder.extend(&live[c.0].state, c.1)?;
                check_distribution(&asr_next, vocab)?;
                let lm_next = lm_probs(&hyp.tokens)?;
                next_live.push(Live {
                    hyp,
                    state,
                    asr_next,
                    lm_next,
                });
            }
        }
        live = next_live;

        if opts.early_stop && pool.len() >= opts.beam_width && !live.is_empty() {
            sort_hypotheses(&mut pool, weight);
            let best_live = live
                .iter()
                .map(|l| l.hyp.total(weight))
                .fold(f64::NEG_INFINITY, f64::max);
            if pool[opts.beam_width - 1].total(weight) >= best_live {
                break;
            }
        }
    }
    // The greedy path can fall off a narrow beam; keep it as a candidate so
    // the best returned hypothesis never scores below it.
    if opts.beam_width > 1 {
        let g = greedy_path(decoder, lm, opts.max_len)?;
        if !pool.iter().any(|h| h.tokens == g.tokens) {
            pool.push(g);
        }
    }
    sort_hypotheses(&mut pool, weight);
    pool.truncate(opts.beam_width);
    Ok(pool)
}

/// Sorts best first by `asr + weight * lm`, shorter first, then by tokens.
pub fn sort_hypotheses(hyps: &mut [Hypothesis], lm_weight: f64) {
    hyps.sort_by(|a, b| rank((a.total(lm_weight), &a.tokens), (b.total(lm_weight), &b.tokens)));
}

pub fn beam_search(model: &Seq2SeqModel, frames: &[Vec<f64>], beam_width: usize, max_len: usize) -> Result<Vec<Hypothesis>> {
    let dec = StudentDecoder::new(model, frames)?;
    search(&dec, None, SearchOptions::new(beam_width, max_len))
}

pub fn shallow_fusion_decode(
    model: &Seq2SeqModel,
    lm: &TransformerLm,
    frames: &[Vec<f64>],
    beam_width: usize,
    max_len: usize,
    lm_weight: f64,
) -> Result<Vec<Hypothesis>> {
    if lm.mode() != LmMode::Causal {
        return Err(Error::Usage("shallow fusion needs a causal LM".into()));
    }
    let dec = StudentDecoder::new(model, frames)?;
    let lm = CausalLm(lm);
    search(&dec, Some((&lm, lm_weight)), SearchOptions::new(beam_width, max_len))
}

/// Step-wise argmax (ties to the lower id) until EOS or `max_len`.
pub fn greedy<D: StepDecoder>(decoder: &D, max_len: usize) -> Result<Hypothesis> {
    greedy_path(decoder, None, max_len)
}

/// Greedy decoding on the fused per-step score `asr + weight * lm`.
fn greedy_path<D: StepDecoder>(decoder: &D, lm: Option<(&dyn PrefixLm, f64)>, max_len: usize) -> Result<Hypothesis> {
    let (mut state, mut lp) = decoder.start()?;
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        asr_logscore: 0.0,
        lm_logscore: lm.map(|_| 0.0),
        finished: false,
    };
    while hyp.tokens.len() < max_len {
        let lm_lp = match lm {
            Some((m, _)) => Some(m.next_log_probs(&hyp.tokens)?),
            None => None,
        };
        let score = |v: usize| lp[v] + lm_lp.as_ref().map_or(0.0, |l| lm.unwrap().1 * l[v]);
        let mut best = 0;
        for v in 1..lp.len() {
            if score(v) > score(best) {
                best = v;
            }
        }
        hyp.tokens.push(best as u32);
        hyp.asr_logscore += lp[best];
        if let (Some(acc), Some(l)) = (hyp.lm_logscore.as_mut(), &lm_lp) {
            *acc += l[best];
        }
        if best as u32 == EOS {
            hyp.finished = true;
            break;
        }
        if hyp.tokens.len() < max_len {
            (state, lp) = decoder.extend(&state, best as u32)?;
        }
    }
    Ok(hyp)
}

/// Picks the hypothesis maximising `asr + weight * lm`; the winner carries
/// its LM score. Ties go to the earlier hypothesis.
pub fn nbest_rescore(hyps: &[Hypothesis], scorer: &dyn SequenceScorer, lm_weight: f64) -> Result<Hypothesis> {
    if hyps.is_empty() {
        return Err(Error::Usage("cannot rescore an empty n-best list".into()));
    }
    if hyps.len() == 1 {
        return Ok(hyps[0].clone());
    }
    let mut best: Option<(f64, Hypothesis)> = None;
    for h in hyps {
        let lm = if lm_weight == 0.0 { 0.0 } else { scorer.score(&h.tokens)? };
        let total = h.asr_logscore + lm_weight * lm;
        if best.as_ref().map_or(true, |(b, _)| total > *b) {
            let mut h = h.clone();
            if lm_weight != 0.0 {
                h.lm_logscore = Some(lm);
            }
            best = Some((total, h));
        }
    }
    Ok(best.expect("nonempty").1)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_len: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    pub fn wer(&self) -> f64 {
        self.errors() as f64 / self.ref_len as f64
    }

    pub fn add(&mut self, other: &EditCounts) {
        self.substitutions += other.substitutions;
        self.insertions += other.insertions;
        self.deletions += other.deletions;
        self.ref_len += other.ref_len;
    }
}

/// Minimum edit alignment of `hyp` against `ref_` (unit costs). Among
/// alignments of equal cost the one with most substitutions is taken, which
/// makes the counts unique and symmetric under swapping the arguments.
pub fn align<T: PartialEq>(hyp: &[T], ref_: &[T]) -> EditCounts {
    // cell = (cost, -subs, ins, del); lexicographic minimum
    type Cell = (usize, isize, usize, usize);
    let (n, m) = (ref_.len(), hyp.len());
    let mut prev: Vec<Cell> = (0..=m).map(|j| (j, 0, j, 0)).collect();
    for i in 1..=n {
        let mut cur: Vec<Cell> = vec![(i, 0, 0, i); m + 1];
        for j in 1..=m {
            let (c, s, ins, del) = prev[j - 1];
            let diag = if ref_[i - 1] == hyp[j - 1] {
                (c, s, ins, del)
            } else {
                (c + 1, s - 1, ins, del)
            };
            let (c, s, ins, del) = cur[j - 1];
            let left = (c + 1, s, ins + 1, del);
            let (c, s, ins, del) = prev[j];
            let up = (c + 1, s, ins, del + 1);
            cur[j] = [diag, left, up]
                .into_iter()
                .min_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)))
                .expect("three candidates");
        }
        prev = cur;
    }
    let (_, s, insertions, deletions) = prev[m];
    EditCounts {
        substitutions: (-s) as usize,
        insertions,
        deletions,
        ref_len: n,
    }
}

/// WER of whitespace-separated strings with its edit counts.
pub fn word_error_rate(hyp: &str, ref_: &str) -> Result<(f64, EditCounts)> {
    let r: Vec<&str> = ref_.split_whitespace().collect();
    if r.is_empty() {
        return Err(Error::Usage("empty reference".into()));
    }
    let h: Vec<&str> = hyp.split_whitespace().collect();
    let counts = align(&h, &r);
    Ok((counts.wer(), counts))
}

/// One decoded utterance for the decode output file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub utterance_id: String,
    pub rank: usize,
    pub asr_logscore: f64,
    pub lm_logscore: Option<f64>,
    pub text: String,
}

/// Tab-separated: id, rank, asr score, lm score (`-` when absent), text.
pub fn write_decode_records(records: &[DecodeRecord]) -> String {
    let mut s = String::from("utterance_id\trank\tasr_logscore\tlm_logscore\ttext\n");
    for r in records {
        let lm = r.lm_logscore.map_or("-".to_string(), |x| format!("{x:.6}"));
        let _ = writeln!(s, "{}\t{}\t{:.6}\t{}\t{}", r.utterance_id, r.rank, r.asr_logscore, lm, r.text);
    }
    s
}

pub fn read_decode_records(text: &str) -> Result<Vec<DecodeRecord>> {
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|line| {
            let bad = || Error::Data(format!("malformed decode record: {line}"));
            let f: Vec<&str> = line.splitn(5, '\t').collect();
            if f.len() != 5 {
                return Err(bad());
            }
            Ok(DecodeRecord {
                utterance_id: f[0].to_string(),
                rank: f[1].parse().map_err(|_| bad())?,
                asr_logscore: f[2].parse().map_err(|_| bad())?,
                lm_logscore: if f[3] == "-" { None } else { Some(f[3].parse().map_err(|_| bad())?) },
                text: f[4].to_string(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub system: String,
    pub split: String,
    pub counts: EditCounts,
}

pub fn evaluation_csv(rows: &[EvalRow]) -> String {
    let mut s = String::from("system,split,wer,substitutions,insertions,deletions,ref_tokens\n");
    for r in rows {
        let c = &r.counts;
        let _ = writeln!(
            s,
            "{},{},{:.4},{},{},{},{}",
            r.system,
            r.split,
            100.0 * c.wer(),
            c.substitutions,
            c.insertions,
            c.deletions,
            c.ref_len
        );
    }
    s
}
