//! Teacher soft labels and the student's distillation objective.
//!
//! For every target position of a training utterance the frozen teacher sees
//! the utterance with that position masked, optionally surrounded by tokens
//! of neighbouring utterances, and its temperature-scaled prediction is cut
//! to the top K entries and renormalised. The student then minimises
//! `(1 - alpha) * CE(hard) + alpha * CE(soft)`.

use std::fmt::Write as _;
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{log_sum_exp, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::models::{LmMode, TransformerLm};
use crate::tokenizer::{EOS, MASK};

/// One (token id, probability) entry of a soft label.
pub type SoftEntry = (u32, f64);

/// How much context the teacher sees around the current utterance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextSize {
    /// The current utterance only.
    Utterance,
    /// A fixed total of `W` tokens spanning neighbouring utterances.
    Window(usize),
}

impl ContextSize {
    pub fn label(&self) -> String {
        match self {
            ContextSize::Utterance => "utterance".to_string(),
            ContextSize::Window(w) => w.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub context: ContextSize,
    pub top_k: usize,
    pub temperature: f64,
    pub alpha: f64,
    pub label_smoothing: f64,
    /// Keep smoothing the hard-label term while distilling. When false,
    /// smoothing applies only to runs with `alpha == 0`.
    pub smooth_hard_when_distilling: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            context: ContextSize::Window(256),
            top_k: 8,
            temperature: 1.0,
            alpha: 0.5,
            label_smoothing: 0.1,
            smooth_hard_when_distilling: true,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be >= 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature {} must be > 0", self.temperature)));
        }
        check_alpha(self.alpha)?;
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label smoothing {} not in [0, 1)",
                self.label_smoothing
            )));
        }
        Ok(())
    }

    /// Smoothing mass applied to the hard-label term for this run.
    pub fn effective_smoothing(&self) -> f64 {
        if self.alpha > 0.0 && !self.smooth_hard_when_distilling {
            0.0
        } else {
            self.label_smoothing
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} not in [0, 1]")));
    }
    Ok(())
}

/// Token stream of one document: a leading EOS (document boundary) followed
/// by every EOS-terminated utterance, with each utterance's span.
#[derive(Clone, Debug, PartialEq)]
pub struct DocumentTokens {
    pub stream: Vec<u32>,
    pub spans: Vec<Range<usize>>,
}

impl DocumentTokens {
    pub fn new(stream: Vec<u32>, spans: Vec<Range<usize>>) -> Result<Self> {
        let mut prev_end = 0;
        for s in &spans {
            if s.start < prev_end || s.end > stream.len() || s.start >= s.end {
                return Err(Error::Data(format!("bad utterance span {s:?}")));
            }
            prev_end = s.end;
        }
        Ok(DocumentTokens { stream, spans })
    }

    /// `targets` are EOS-terminated utterance token sequences.
    pub fn from_targets(targets: &[Vec<u32>]) -> Self {
        let mut stream = vec![EOS];
        let mut spans = Vec::with_capacity(targets.len());
        for t in targets {
            let start = stream.len();
            stream.extend_from_slice(t);
            spans.push(start..stream.len());
        }
        DocumentTokens { stream, spans }
    }

    pub fn utterance(&self, index: usize) -> &[u32] {
        &self.stream[self.spans[index].clone()]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContextWindow {
    pub left: Vec<u32>,
    pub current: Vec<u32>,
    pub right: Vec<u32>,
}

impl ContextWindow {
    pub fn len(&self) -> usize {
        self.left.len() + self.current.len() + self.right.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn concat(&self) -> Vec<u32> {
        [&self.left[..], &self.current, &self.right].concat()
    }
}

fn current_span(doc: &DocumentTokens, utt_index: usize) -> Result<Range<usize>> {
    doc.spans
        .get(utt_index)
        .cloned()
        .ok_or_else(|| Error::Usage(format!("utterance {utt_index} not in document")))
}

/// Surrounds utterance `utt_index` with up to `W - N` neighbouring tokens,
/// split as `L = floor(B / 2)`, `R = ceil(B / 2)`; a side that runs out of
/// document hands its deficit to the other side.
pub fn assemble_context_window(doc: &DocumentTokens, utt_index: usize, window: usize) -> Result<ContextWindow> {
    let span = current_span(doc, utt_index)?;
    let n = span.len();
    if n > window {
        return Err(Error::Window { len: n, window });
    }
    let budget = window - n;
    let avail_left = span.start;
    let avail_right = doc.stream.len() - span.end;
    let (want_left, want_right) = (budget / 2, budget - budget / 2);
    let (l, r) = if avail_left < want_left {
        (avail_left, avail_right.min(budget - avail_left))
    } else if avail_right < want_right {
        (avail_left.min(budget - avail_right), avail_right)
    } else {
        (want_left, want_right)
    };
    Ok(ContextWindow {
        left: doc.stream[span.start - l..span.start].to_vec(),
        current: doc.stream[span.clone()].to_vec(),
        right: doc.stream[span.end..span.end + r].to_vec(),
    })
}

/// Left-only context for a causal teacher: up to `W - N` preceding tokens
/// (at least the boundary EOS that precedes every utterance).
pub fn assemble_left_window(doc: &DocumentTokens, utt_index: usize, context: ContextSize) -> Result<ContextWindow> {
    let span = current_span(doc, utt_index)?;
    let n = span.len();
    let l = match context {
        ContextSize::Utterance => 1,
        ContextSize::Window(w) => {
            if n > w {
                return Err(Error::Window { len: n, window: w });
            }
            span.start.min(w - n).max(1)
        }
    }
    .min(span.start);
    Ok(ContextWindow {
        left: doc.stream[span.start - l..span.start].to_vec(),
        current: doc.stream[span].to_vec(),
        right: Vec::new(),
    })
}

/// Bidirectional window for `context` (the bare utterance for `Utterance`).
pub fn window_for(doc: &DocumentTokens, utt_index: usize, context: ContextSize) -> Result<ContextWindow> {
    match context {
        ContextSize::Window(w) => assemble_context_window(doc, utt_index, w),
        ContextSize::Utterance => Ok(ContextWindow {
            left: Vec::new(),
            current: doc.utterance(utt_index).to_vec(),
            right: Vec::new(),
        }),
    }
}

/// `[left; current with position i replaced by MASK; right]` (`i` is 0-based).
pub fn mask_target(window: &ContextWindow, i: usize) -> Result<Vec<u32>> {
    if i >= window.current.len() {
        return Err(Error::Usage(format!(
            "target position {i} outside utterance of length {}",
            window.current.len()
        )));
    }
    let mut seq = window.concat();
    seq[window.left.len() + i] = MASK;
    Ok(seq)
}

/// `exp(z_v / T) / sum_j exp(z_j / T)`, computed with max subtraction.
pub fn softmax_temperature(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature {temperature} must be > 0")));
    }
    let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// The `k` most probable entries (ties to the lower id), renormalised and
/// sorted by descending probability. `k > V` keeps all `V` entries.
pub fn topk_normalize(dist: &[f64], k: usize) -> Vec<SoftEntry> {
    let mut order: Vec<u32> = (0..dist.len() as u32).collect();
    order.sort_by(|&a, &b| {
        dist[b as usize]
            .partial_cmp(&dist[a as usize])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k.min(dist.len()));
    let mass: f64 = order.iter().map(|&v| dist[v as usize]).sum();
    order.into_iter().map(|v| (v, dist[v as usize] / mass)).collect()
}

/// Soft labels of one utterance: one entry list per non-EOS target position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceSoftLabels {
    pub utterance_id: String,
    pub positions: Vec<Vec<SoftEntry>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftLabelHeader {
    pub teacher_hash: String,
    pub context: ContextSize,
    pub top_k: usize,
    pub temperature: f64,
    pub vocab_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SoftLabelSet {
    pub header: SoftLabelHeader,
    pub utterances: Vec<UtteranceSoftLabels>,
}

/// A training utterance addressed inside its document.
#[derive(Clone, Copy, Debug)]
pub struct UtteranceRef<'a> {
    pub doc: &'a DocumentTokens,
    pub index: usize,
}

/// Teacher batch for one utterance: the sequences and, for each non-EOS
/// target, the row whose prediction is its soft label.
pub fn teacher_queries(
    teacher_mode: LmMode,
    utt: UtteranceRef<'_>,
    context: ContextSize,
) -> Result<(Vec<Vec<u32>>, Vec<usize>)> {
    let targets = utt.doc.utterance(utt.index).len() - 1;
    match teacher_mode {
        LmMode::Mlm => {
            let window = window_for(utt.doc, utt.index, context)?;
            let seqs = (0..targets)
                .map(|i| mask_target(&window, i))
                .collect::<Result<Vec<_>>>()?;
            let pos = (0..targets).map(|i| window.left.len() + i).collect();
            Ok((seqs, pos))
        }
        LmMode::Causal => {
            let window = assemble_left_window(utt.doc, utt.index, context)?;
            let mut seq = window.left.clone();
            seq.extend_from_slice(&window.current[..targets]);
            let pos = (0..targets).map(|i| window.left.len() - 1 + i).collect();
            Ok((vec![seq], pos))
        }
    }
}

/// Teacher logits `[N, V]` for the non-EOS targets of one utterance; all
/// masked copies go through the teacher as one batch.
pub fn teacher_logits(teacher: &TransformerLm, utt: UtteranceRef<'_>, context: ContextSize) -> Result<Tensor> {
    let (seqs, positions) = teacher_queries(teacher.mode(), utt, context)?;
    let v = teacher.config.vocab_size;
    if positions.is_empty() {
        return Tensor::new(vec![0, v], Vec::new());
    }
    match teacher.mode() {
        LmMode::Mlm => teacher.batch_logits_at(&seqs, &positions),
        LmMode::Causal => {
            let all = teacher.causal_forward(&seqs[0])?;
            let data = positions.iter().flat_map(|&p| all.row(p).to_vec()).collect();
            Tensor::new(vec![positions.len(), v], data)
        }
    }
}

/// Temperature softmax and top-K cut of every row.
pub fn soft_labels_from_logits(logits: &Tensor, cfg: &DistillConfig) -> Result<Vec<Vec<SoftEntry>>> {
    (0..logits.rows())
        .map(|r| Ok(topk_normalize(&softmax_temperature(logits.row(r), cfg.temperature)?, cfg.top_k)))
        .collect()
}

/// Soft labels for one utterance.
pub fn soft_labels_for(teacher: &TransformerLm, utt: UtteranceRef<'_>, cfg: &DistillConfig) -> Result<Vec<Vec<SoftEntry>>> {
    soft_labels_from_logits(&teacher_logits(teacher, utt, cfg.context)?, cfg)
}

/// Soft labels for every utterance, in input order. Utterances are processed
/// in parallel; the teacher is only read.
pub fn precompute_soft_labels(
    teacher: &TransformerLm,
    utterances: &[(String, UtteranceRef<'_>)],
    cfg: &DistillConfig,
    header: SoftLabelHeader,
) -> Result<SoftLabelSet> {
    cfg.validate()?;
    let utterances = utterances
        .par_iter()
        .map(|(id, utt)| {
            Ok(UtteranceSoftLabels {
                utterance_id: id.clone(),
                positions: soft_labels_for(teacher, *utt, cfg)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SoftLabelSet { header, utterances })
}

impl SoftLabelSet {
    /// Header line, then one line per utterance:
    /// `id <TAB> N <TAB> group_1 <TAB> ... group_N`, a group being
    /// space-separated `token:probability` pairs (9 significant digits).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "#soft-labels {}", serde_json::to_string(&self.header).expect("header"));
        for u in &self.utterances {
            let _ = write!(s, "{}\t{}", u.utterance_id, u.positions.len());
            for group in &u.positions {
                s.push('\t');
                let parts: Vec<String> = group.iter().map(|(t, p)| format!("{t}:{p:.8e}")).collect();
                s.push_str(&parts.join(" "));
            }
            s.push('\n');
        }
        s
    }

    /// Parses a soft-label file; the vocabulary hash must match.
    pub fn from_text(text: &str, expected_vocab_hash: &str) -> Result<Self> {
        let mut lines = text.lines();
        let head = lines
            .next()
            .and_then(|l| l.strip_prefix("#soft-labels "))
            .ok_or_else(|| Error::Data("soft-label file lacks header".into()))?;
        let header: SoftLabelHeader = serde_json::from_str(head)?;
        if header.vocab_hash != expected_vocab_hash {
            return Err(Error::Data(format!(
                "soft labels built with vocabulary {}, expected {}",
                header.vocab_hash, expected_vocab_hash
            )));
        }
        let mut utterances = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let mut fields = line.split('\t');
            let bad = || Error::Data(format!("malformed soft-label line: {line}"));
            let id = fields.next().ok_or_else(bad)?.to_string();
            let n: usize = fields.next().and_then(|f| f.parse().ok()).ok_or_else(bad)?;
            let mut positions = Vec::with_capacity(n);
            for group in fields {
                let entries = group
                    .split(' ')
                    .filter(|e| !e.is_empty())
                    .map(|e| {
                        let (t, p) = e.split_once(':').ok_or_else(bad)?;
                        Ok((t.parse().map_err(|_| bad())?, p.parse().map_err(|_| bad())?))
                    })
                    .collect::<Result<Vec<SoftEntry>>>()?;
                positions.push(entries);
            }
            if positions.len() != n {
                return Err(bad());
            }
            utterances.push(UtteranceSoftLabels {
                utterance_id: id,
                positions,
            });
        }
        Ok(SoftLabelSet { header, utterances })
    }
}

fn check_lengths(p_asr: &[Vec<f64>], n: usize) -> Result<()> {
    if p_asr.len() != n {
        return Err(Error::shape("loss", &[p_asr.len()], &[n]));
    }
    Ok(())
}

/// `-sum_i sum_v q(v, y_i) log P_ASR(i, v)` with `q` the hard label smoothed
/// by spreading `smoothing` uniformly over all classes. Summed over steps.
pub fn asr_ce_loss(p_asr: &[Vec<f64>], targets: &[u32], smoothing: f64) -> Result<f64> {
    check_lengths(p_asr, targets.len())?;
    let mut loss = 0.0;
    for (p, &y) in p_asr.iter().zip(targets) {
        let v = p.len() as f64;
        if y as usize >= p.len() {
            return Err(Error::Data(format!("target {y} outside vocabulary {}", p.len())));
        }
        if smoothing > 0.0 {
            loss -= p.iter().map(|x| smoothing / v * x.ln()).sum::<f64>();
        }
        loss -= (1.0 - smoothing) * p[y as usize].ln();
    }
    Ok(loss)
}

/// `-sum_i sum_{(v, p) in soft_i} p log P_ASR(i, v)`; positions beyond the
/// soft labels (the final EOS) contribute nothing.
pub fn kd_loss(p_asr: &[Vec<f64>], soft: &[Vec<SoftEntry>]) -> Result<f64> {
    if soft.len() > p_asr.len() {
        return Err(Error::shape("kd_loss", &[p_asr.len()], &[soft.len()]));
    }
    let mut loss = 0.0;
    for (p, labels) in p_asr.iter().zip(soft) {
        for &(v, q) in labels {
            let pv = p
                .get(v as usize)
                .ok_or_else(|| Error::Data(format!("soft label token {v} outside vocabulary {}", p.len())))?;
            loss -= q * pv.ln();
        }
    }
    Ok(loss)
}

/// `(1 - alpha) * ce + alpha * kd`.
pub fn combined_loss(ce: f64, kd: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok((1.0 - alpha) * ce + alpha * kd)
}

/// The same objective written as one cross-entropy against the mixed target
/// `(1 - alpha) * delta(v, y_i) + alpha * P_teacher(i, v)` (no smoothing).
pub fn mixed_label_loss(p_asr: &[Vec<f64>], targets: &[u32], soft: &[Vec<SoftEntry>], alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    check_lengths(p_asr, targets.len())?;
    let mut loss = 0.0;
    for (i, (p, &y)) in p_asr.iter().zip(targets).enumerate() {
        let mut q = vec![0.0; p.len()];
        q[y as usize] += 1.0 - alpha;
        if let Some(labels) = soft.get(i) {
            for &(v, w) in labels {
                q[v as usize] += alpha * w;
            }
        }
        loss -= q.iter().zip(p).map(|(qv, pv)| if *qv == 0.0 { 0.0 } else { qv * pv.ln() }).sum::<f64>();
    }
    Ok(loss)
}

/// `KL(p || q) = sum_v p_v log(p_v / q_v)`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pv, _)| **pv > 0.0)
        .map(|(pv, qv)| pv * (pv / qv).ln())
        .sum()
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// Cross-entropy losses on the tape from student logits `[N, V]`.
///
/// Returns `(ce, kd)`; `kd` is `None` without soft labels.
pub fn student_losses(
    tape: &mut Tape,
    logits: Var,
    targets: &[u32],
    soft: Option<&[Vec<SoftEntry>]>,
    smoothing: f64,
) -> Result<(Var, Option<Var>)> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(Error::shape("student_losses", &shape, &[targets.len()]));
    }
    let (n, v) = (shape[0], shape[1]);
    let log_probs = tape.log_softmax(logits);

    let mut hard = vec![0.0; n * v];
    for (i, &y) in targets.iter().enumerate() {
        if y as usize >= v {
            return Err(Error::Data(format!("target {y} outside vocabulary {v}")));
        }
        if smoothing > 0.0 {
            hard[i * v..(i + 1) * v].iter_mut().for_each(|x| *x = smoothing / v as f64);
        }
        hard[i * v + y as usize] += 1.0 - smoothing;
    }
    let weights = tape.constant(Tensor::new(vec![n, v], hard)?);
    let weighted = tape.mul(log_probs, weights)?;
    let total = tape.sum(weighted);
    let ce = tape.scale(total, -1.0);

    let kd = match soft {
        None => None,
        Some(labels) => {
            if labels.len() > n {
                return Err(Error::shape("student_losses", &[n], &[labels.len()]));
            }
            let mut w = vec![0.0; n * v];
            for (i, group) in labels.iter().enumerate() {
                for &(tok, p) in group {
                    if tok as usize >= v {
                        return Err(Error::Data(format!("soft label token {tok} outside vocabulary {v}")));
                    }
                    w[i * v + tok as usize] += p;
                }
            }
            let weights = tape.constant(Tensor::new(vec![n, v], w)?);
            let weighted = tape.mul(log_probs, weights)?;
            let total = tape.sum(weighted);
            Some(tape.scale(total, -1.0))
        }
    };
    Ok((ce, kd))
}

/// `(1 - alpha) * ce + alpha * kd` on the tape.
pub fn combined_loss_var(tape: &mut Tape, ce: Var, kd: Option<Var>, alpha: f64) -> Result<Var> {
    check_alpha(alpha)?;
    match kd {
        None => Ok(ce),
        Some(kd) => {
            let a = tape.scale(ce, 1.0 - alpha);
            let b = tape.scale(kd, alpha);
            tape.add(a, b)
        }
    }
}

/// Log-probabilities from logits, for value-level checks.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|z| z - lse).collect()
}
