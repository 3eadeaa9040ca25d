//! Training loops for the teacher language models and the recogniser.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::{AsrSettings, Precision, TrainConfig};
use super::data::{apply_masks, sample_mlm_masks, PreparedUtterance};
use super::optim::{adam_step, clip_grad_norm, lr_schedule, AdamState};
use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::decode_eval::{greedy, word_error_rate, EditCounts, StudentDecoder};
use crate::distillation::{combined_loss_var, student_losses, DistillConfig, SoftEntry, SoftLabelSet};
use crate::error::{Error, Result};
use crate::models::{LmMode, Seq2SeqConfig, Seq2SeqModel, TransformerConfig, TransformerLm};
use crate::tokenizer::{Vocabulary, PAD};

/// Mean negative log-likelihood of `targets` (row, token) under row-wise
/// softmax of `logits` `[rows, V]`. Rows not listed get zero gradient.
pub fn nll_at_rows(tape: &mut Tape, logits: Var, targets: &[(usize, u32)]) -> Result<Var> {
    if targets.is_empty() {
        return Err(Error::Usage("no target positions".into()));
    }
    let v = tape.shape(logits)[1];
    let rows: Vec<usize> = targets.iter().map(|t| t.0).collect();
    let picked = tape.embedding_lookup(logits, &rows)?;
    let lp = tape.log_softmax(picked);
    let mut onehot = vec![0.0; targets.len() * v];
    for (i, &(_, tok)) in targets.iter().enumerate() {
        if tok as usize >= v {
            return Err(Error::Data(format!("target {tok} outside vocabulary {v}")));
        }
        onehot[i * v + tok as usize] = 1.0;
    }
    let w = tape.constant(Tensor::new(vec![targets.len(), v], onehot)?);
    let picked = tape.mul(lp, w)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -1.0 / targets.len() as f64))
}

/// Value-level counterpart of [`nll_at_rows`].
pub fn nll_value(logits: &Tensor, targets: &[(usize, u32)]) -> f64 {
    let total: f64 = targets
        .iter()
        .map(|&(r, t)| {
            let row = logits.row(r);
            crate::autodiff::log_sum_exp(row) - row[t as usize]
        })
        .sum();
    total / targets.len() as f64
}

/// Masked-LM inputs and targets for one packed window.
pub fn mlm_example<R: Rng + ?Sized>(window: &[u32], rate: f64, rng: &mut R) -> (Vec<u32>, Vec<(usize, u32)>) {
    let masks = sample_mlm_masks(window, rate, rng);
    let targets = masks.iter().map(|&p| (p, window[p])).collect();
    (apply_masks(window, &masks), targets)
}

/// Next-token targets: position `i` predicts token `i + 1` (PAD excluded).
pub fn causal_targets(window: &[u32]) -> Vec<(usize, u32)> {
    (0..window.len().saturating_sub(1))
        .filter(|&i| window[i + 1] != PAD)
        .map(|i| (i, window[i + 1]))
        .collect()
}

fn round_params(params: &mut ParamStore, precision: Precision) {
    if precision == Precision::F32 {
        for t in params.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherReport {
    /// Training loss per step, all stages in order.
    pub losses: Vec<f64>,
    /// Masked-token (or next-token) accuracy on the dev windows.
    pub dev_accuracy: f64,
}

/// One training stage: packed windows and its optimisation settings.
pub struct TeacherStage<'a> {
    pub windows: &'a [Vec<u32>],
    pub config: &'a TrainConfig,
}

/// Trains a teacher from scratch through the given stages in order; each
/// stage has its own warmup and decay.
pub fn train_teacher(
    config: TransformerConfig,
    init_seed: u64,
    stages: &[TeacherStage<'_>],
    dev: &[Vec<u32>],
) -> Result<(TransformerLm, TeacherReport)> {
    let mut init_rng = ChaCha8Rng::seed_from_u64(init_seed);
    let mut model = TransformerLm::new(config, &mut init_rng)?;
    let mut losses = Vec::new();
    let mut global_step = 0;
    for stage in stages {
        let cfg = stage.config;
        cfg.validate()?;
        if stage.windows.is_empty() {
            return Err(Error::Data("teacher stage has no training windows".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ init_seed.rotate_left(17));
        let mut adam = AdamState::new(&model.params);
        let mut order: Vec<usize> = Vec::new();
        for step in 0..cfg.total_steps {
            global_step += 1;
            let mut inputs = Vec::with_capacity(cfg.batch_size);
            let mut targets = Vec::new();
            for b in 0..cfg.batch_size {
                if order.is_empty() {
                    order = (0..stage.windows.len()).collect();
                    order.shuffle(&mut rng);
                }
                let w = &stage.windows[order.pop().expect("refilled")];
                let n = w.len();
                let (input, t) = match model.mode() {
                    LmMode::Mlm => mlm_example(w, cfg.mlm_mask_rate, &mut rng),
                    LmMode::Causal => (w.clone(), causal_targets(w)),
                };
                targets.extend(t.into_iter().map(|(p, tok)| (b * n + p, tok)));
                inputs.push(input);
            }
            if targets.is_empty() {
                losses.push(0.0);
                continue;
            }
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape, true);
            let dropout: Option<&mut dyn RngCore> = if model.config.dropout > 0.0 {
                Some(&mut rng)
            } else {
                None
            };
            let hidden = model.hidden(&mut tape, &bound, &inputs, dropout)?;
            let rows: Vec<usize> = targets.iter().map(|t| t.0).collect();
            let logits = model.logits_at(&mut tape, &bound, hidden, &rows)?;
            let local: Vec<(usize, u32)> = targets.iter().enumerate().map(|(i, t)| (i, t.1)).collect();
            let loss = nll_at_rows(&mut tape, logits, &local)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Training {
                    step: global_step,
                    reason: format!("non-finite teacher loss {value}"),
                });
            }
            tape.backward(loss)?;
            let mut grads = model.params.gradients(&tape, &bound);
            if cfg.clip_norm > 0.0 {
                clip_grad_norm(&mut grads, cfg.clip_norm);
            }
            let lr = lr_schedule(step + 1, cfg.total_steps, cfg.learning_rate, cfg.warmup_fraction);
            adam_step(&mut model.params, &grads, &mut adam, lr).map_err(|e| match e {
                Error::Training { reason, .. } => Error::Training {
                    step: global_step,
                    reason,
                },
                other => other,
            })?;
            round_params(&mut model.params, cfg.precision);
            losses.push(value);
        }
    }
    let rate = stages.first().map_or(0.15, |s| s.config.mlm_mask_rate);
    let dev_accuracy = teacher_accuracy(&model, dev, rate, 0)?;
    Ok((model, TeacherReport { losses, dev_accuracy }))
}

/// Fraction of correctly predicted targets: masked tokens (masks drawn from
/// `seed`) for an MLM, next tokens for a causal LM.
pub fn teacher_accuracy(model: &TransformerLm, windows: &[Vec<u32>], rate: f64, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut hit, mut total) = (0usize, 0usize);
    for w in windows {
        let (input, targets) = match model.mode() {
            LmMode::Mlm => mlm_example(w, rate, &mut rng),
            LmMode::Causal => (w.clone(), causal_targets(w)),
        };
        if targets.is_empty() {
            continue;
        }
        let logits = model.logits(&input)?;
        for (p, tok) in targets {
            let row = logits.row(p);
            let best = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
            hit += (best as u32 == tok) as usize;
            total += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}

/// Soft labels indexed by utterance id.
pub type SoftLabelLookup = HashMap<String, Vec<Vec<SoftEntry>>>;

/// Indexes a soft-label set after checking it was built with `vocab`.
pub fn soft_label_lookup(set: &SoftLabelSet, vocab: &Vocabulary) -> Result<SoftLabelLookup> {
    let expected = vocab.hash();
    if set.header.vocab_hash != expected {
        return Err(Error::Data(format!(
            "soft labels built with vocabulary {}, expected {}",
            set.header.vocab_hash, expected
        )));
    }
    Ok(set
        .utterances
        .iter()
        .map(|u| (u.utterance_id.clone(), u.positions.clone()))
        .collect())
}

#[derive(Clone, Debug)]
pub struct AsrTrainOutput {
    pub model: Seq2SeqModel,
    /// Mean per-utterance loss of every optimisation step.
    pub losses: Vec<f64>,
    /// Greedy dev WER after every epoch.
    pub dev_wer: Vec<f64>,
    /// Epoch (0-based) whose parameters were kept.
    pub selected_epoch: usize,
}

fn noisy(frames: &[Vec<f64>], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    frames
        .iter()
        .map(|f| f.iter().map(|x| x + sigma * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect()
}

/// Teacher-forced training of the recogniser on `(1 - alpha) CE + alpha KD`.
/// Without soft labels alpha is forced to 0.
#[allow(clippy::too_many_arguments)]
pub fn train_asr(
    config: Seq2SeqConfig,
    train: &[&PreparedUtterance],
    soft: Option<&SoftLabelLookup>,
    settings: &AsrSettings,
    distill: &DistillConfig,
    dev: &[&PreparedUtterance],
    vocab: &Vocabulary,
    seed: u64,
    max_len_margin: usize,
) -> Result<AsrTrainOutput> {
    distill.validate()?;
    if train.is_empty() {
        return Err(Error::Data("no training utterances".into()));
    }
    let alpha = if soft.is_some() { distill.alpha } else { 0.0 };
    let smoothing = if soft.is_some() {
        distill.effective_smoothing()
    } else {
        distill.label_smoothing
    };
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Seq2SeqModel::new(config, &mut init_rng);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5EED));
    let mut adam = AdamState::new(&model.params);
    let mut losses = Vec::new();
    let mut dev_wer = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;

    for epoch in 0..settings.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        for batch in order.chunks(settings.batch_size) {
            let step = losses.len() + 1;
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape, true);
            let mut terms = Vec::with_capacity(batch.len());
            for &i in batch {
                let u = train[i];
                let frames = if settings.feature_noise > 0.0 {
                    noisy(&u.frames, settings.feature_noise, &mut rng)
                } else {
                    u.frames.clone()
                };
                let logits = model.teacher_forced_logits(&mut tape, &bound, &frames, &u.targets)?;
                let labels = match soft {
                    Some(map) => Some(map.get(&u.id).ok_or_else(|| {
                        Error::Data(format!("no soft labels for utterance {}", u.id))
                    })?),
                    None => None,
                };
                let (ce, kd) = student_losses(&mut tape, logits, &u.targets, labels.map(|l| l.as_slice()), smoothing)?;
                terms.push(combined_loss_var(&mut tape, ce, kd, alpha)?);
            }
            let mut total = terms[0];
            for &t in &terms[1..] {
                total = tape.add(total, t)?;
            }
            let loss = tape.scale(total, 1.0 / batch.len() as f64);
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Training {
                    step,
                    reason: format!("non-finite recogniser loss {value}"),
                });
            }
            tape.backward(loss)?;
            let mut grads = model.params.gradients(&tape, &bound);
            if settings.clip_norm > 0.0 {
                clip_grad_norm(&mut grads, settings.clip_norm);
            }
            adam_step(&mut model.params, &grads, &mut adam, settings.learning_rate).map_err(|e| match e {
                Error::Training { reason, .. } => Error::Training { step, reason },
                other => other,
            })?;
            round_params(&mut model.params, settings.precision);
            losses.push(value);
        }
        if !dev.is_empty() {
            let wer = greedy_wer(&model, dev, vocab, max_len_margin)?.wer();
            dev_wer.push(wer);
            if settings.select_best_epoch && best.as_ref().map_or(true, |b| wer < b.0) {
                best = Some((wer, epoch, model.params.clone()));
            }
        }
    }
    let mut selected_epoch = settings.epochs.saturating_sub(1);
    if let Some((_, epoch, params)) = best {
        selected_epoch = epoch;
        model = Seq2SeqModel::from_params(model.config.clone(), params)?;
    }
    Ok(AsrTrainOutput {
        model,
        losses,
        dev_wer,
        selected_epoch,
    })
}

/// Longest hypothesis considered for an utterance with `frames` frames.
pub fn max_decode_len(frames: usize, margin: usize) -> usize {
    frames + margin
}

/// Corpus-level edit counts of greedy decoding.
pub fn greedy_wer(model: &Seq2SeqModel, utts: &[&PreparedUtterance], vocab: &Vocabulary, margin: usize) -> Result<EditCounts> {
    let mut counts = EditCounts::default();
    for u in utts {
        let dec = StudentDecoder::new(model, &u.frames)?;
        let hyp = greedy(&dec, max_decode_len(u.frames.len(), margin))?;
        let text = vocab.decode(hyp.content())?;
        let (_, c) = word_error_rate(&text, &u.text)?;
        counts.add(&c);
    }
    Ok(counts)
}
