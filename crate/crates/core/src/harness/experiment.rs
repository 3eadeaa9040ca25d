//! The experiment matrix: teacher kind × distillation context × seeds, the
//! pre-training / distillation context ablation, and the comparison with
//! inference-time language models.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::data::{pack_sequences, prepare_splits, train_vocabulary, PreparedDocument, PreparedSplits, PreparedUtterance};
use super::train::{max_decode_len, train_asr, train_teacher, AsrTrainOutput, SoftLabelLookup, TeacherReport, TeacherStage};
use crate::autodiff::checkpoint::{archive_bytes, content_hash};
use crate::corpus::{generate_corpus, split_documents};
use crate::decode_eval::{
    beam_search, nbest_rescore, search, word_error_rate, CausalLm, EditCounts, Hypothesis, PseudoLogLikelihood,
    SearchOptions, SequenceScorer, StudentDecoder,
};
use crate::distillation::{soft_labels_from_logits, teacher_logits, ContextSize, DistillConfig, SoftLabelHeader, SoftLabelSet, UtteranceSoftLabels};
use crate::error::{Error, Result};
use crate::models::{LmMode, Seq2SeqModel, TransformerLm};
use crate::tokenizer::Vocabulary;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherKind {
    None,
    Causal,
    Mlm,
}

impl TeacherKind {
    pub fn mode(self) -> Option<LmMode> {
        match self {
            TeacherKind::None => None,
            TeacherKind::Causal => Some(LmMode::Causal),
            TeacherKind::Mlm => Some(LmMode::Mlm),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            TeacherKind::None => "---",
            TeacherKind::Causal => "causal",
            TeacherKind::Mlm => "MLM",
        }
    }
}

/// One trained-recogniser configuration of the matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub name: String,
    pub teacher: TeacherKind,
    pub pretrain_window: usize,
    pub context: ContextSize,
}

impl SystemSpec {
    pub fn baseline() -> Self {
        SystemSpec {
            name: "baseline".into(),
            teacher: TeacherKind::None,
            pretrain_window: 0,
            context: ContextSize::Utterance,
        }
    }

    pub fn distilled(teacher: TeacherKind, pretrain_window: usize, context: ContextSize) -> Self {
        let kind = match teacher {
            TeacherKind::Causal => "causal",
            _ => "mlm",
        };
        SystemSpec {
            name: format!("{kind}-p{pretrain_window}-{}", context.label()),
            teacher,
            pretrain_window,
            context,
        }
    }

    fn key(&self) -> String {
        self.name.clone()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentMatrix {
    /// Baseline, causal and MLM teachers with utterance and full-window context.
    pub table1: Vec<SystemSpec>,
    /// Pre-training window × distillation window ablation (MLM teacher).
    pub table2: Vec<SystemSpec>,
    pub seeds: Vec<u64>,
    /// Baseline and distilled models with and without inference-time LMs.
    pub lm_comparison: bool,
}

impl ExperimentMatrix {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        let w = cfg.teacher.window;
        let table1 = vec![
            SystemSpec::baseline(),
            SystemSpec::distilled(TeacherKind::Causal, w, ContextSize::Utterance),
            SystemSpec::distilled(TeacherKind::Causal, w, ContextSize::Window(w)),
            SystemSpec::distilled(TeacherKind::Mlm, w, ContextSize::Utterance),
            SystemSpec::distilled(TeacherKind::Mlm, w, ContextSize::Window(w)),
        ];
        let mut table2 = Vec::new();
        if cfg.matrix.table2 {
            let ws = &cfg.matrix.pretrain_windows;
            let largest = *ws.iter().max().unwrap_or(&w);
            for &p in ws {
                table2.push(SystemSpec::distilled(TeacherKind::Mlm, p, ContextSize::Utterance));
                if p == largest {
                    for &d in ws {
                        table2.push(SystemSpec::distilled(TeacherKind::Mlm, p, ContextSize::Window(d)));
                    }
                } else {
                    table2.push(SystemSpec::distilled(TeacherKind::Mlm, p, ContextSize::Window(p)));
                }
            }
        }
        ExperimentMatrix {
            table1,
            table2,
            seeds: cfg.matrix.seeds.clone(),
            lm_comparison: cfg.matrix.lm_comparison,
        }
    }

    pub fn baseline_only(seeds: Vec<u64>) -> Self {
        ExperimentMatrix {
            table1: vec![SystemSpec::baseline()],
            table2: Vec::new(),
            seeds,
            lm_comparison: false,
        }
    }

    fn systems(&self) -> Vec<SystemSpec> {
        let mut out: Vec<SystemSpec> = Vec::new();
        for s in self.table1.iter().chain(&self.table2) {
            if !out.iter().any(|o| o.name == s.name) {
                out.push(s.clone());
            }
        }
        out
    }
}

/// One (system, seed) result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub table: String,
    pub system: String,
    pub lm: String,
    pub pretrain_window: usize,
    pub context: String,
    pub seed: u64,
    pub temperature: Option<f64>,
    pub alpha: Option<f64>,
    pub dev_wer: f64,
    pub test_wer: f64,
    pub test_counts: EditCounts,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmComparisonRow {
    pub system: String,
    pub beam: usize,
    pub seed: u64,
    pub lm_weight: f64,
    pub test_wer: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatrixReport {
    pub rows: Vec<ResultRow>,
    pub lm_rows: Vec<LmComparisonRow>,
    pub teacher_reports: Vec<(String, f64)>,
    pub tuning: Vec<(String, f64, f64, f64)>,
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

impl MatrixReport {
    /// Median test WER of a system over seeds.
    pub fn median_test_wer(&self, system: &str) -> Option<f64> {
        let mut v: Vec<f64> = self.rows.iter().filter(|r| r.system == system).map(|r| r.test_wer).collect();
        (!v.is_empty()).then(|| median(&mut v))
    }

    pub fn median_lm_wer(&self, system: &str, beam: usize) -> Option<f64> {
        let mut v: Vec<f64> = self
            .lm_rows
            .iter()
            .filter(|r| r.system == system && r.beam == beam)
            .map(|r| r.test_wer)
            .collect();
        (!v.is_empty()).then(|| median(&mut v))
    }

    pub fn results_csv(&self) -> String {
        let mut s = String::from(
            "table,system,lm,pretrain_window,context,seed,temperature,alpha,dev_wer,test_wer,substitutions,insertions,deletions,ref_tokens,config_hash\n",
        );
        let opt = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v}"));
        for r in &self.rows {
            let c = &r.test_counts;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{:.4},{:.4},{},{},{},{},{}",
                r.table,
                r.system,
                r.lm,
                r.pretrain_window,
                r.context,
                r.seed,
                opt(r.temperature),
                opt(r.alpha),
                100.0 * r.dev_wer,
                100.0 * r.test_wer,
                c.substitutions,
                c.insertions,
                c.deletions,
                c.ref_len,
                r.config_hash
            );
        }
        s
    }

    /// Median over seeds per system.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("table,system,lm,pretrain_window,context,seeds,median_test_wer\n");
        let mut seen: Vec<(&str, &str)> = Vec::new();
        for r in &self.rows {
            if seen.contains(&(r.table.as_str(), r.system.as_str())) {
                continue;
            }
            seen.push((&r.table, &r.system));
            let n = self.rows.iter().filter(|x| x.system == r.system && x.table == r.table).count();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{:.4}",
                r.table,
                r.system,
                r.lm,
                r.pretrain_window,
                r.context,
                n,
                100.0 * self.median_test_wer(&r.system).unwrap_or(f64::NAN)
            );
        }
        s
    }

    /// Plain-text table with columns LM, Context size, WER(%).
    pub fn table1_text(&self) -> String {
        let mut s = format!("{:<8} {:<14} {:>8}\n", "LM", "Context size", "WER(%)");
        let mut seen = Vec::new();
        for r in self.rows.iter().filter(|r| r.table == "table1") {
            if seen.contains(&r.system) {
                continue;
            }
            seen.push(r.system.clone());
            let ctx = if r.lm == "---" { "---".to_string() } else { r.context.clone() };
            let wer = 100.0 * self.median_test_wer(&r.system).unwrap_or(f64::NAN);
            let _ = writeln!(s, "{:<8} {:<14} {:>8.2}", r.lm, ctx, wer);
        }
        s
    }

    pub fn table2_text(&self) -> String {
        let mut s = format!("{:<12} {:<14} {:>8}\n", "Pre-training", "Distillation", "WER(%)");
        let mut seen = Vec::new();
        for r in self.rows.iter().filter(|r| r.table == "table2") {
            if seen.contains(&r.system) {
                continue;
            }
            seen.push(r.system.clone());
            let wer = 100.0 * self.median_test_wer(&r.system).unwrap_or(f64::NAN);
            let _ = writeln!(s, "{:<12} {:<14} {:>8.2}", r.pretrain_window, r.context, wer);
        }
        s
    }

    pub fn lm_comparison_csv(&self) -> String {
        let mut s = String::from("system,beam,seed,lm_weight,test_wer\n");
        for r in &self.lm_rows {
            let _ = writeln!(s, "{},{},{},{},{:.4}", r.system, r.beam, r.seed, r.lm_weight, 100.0 * r.test_wer);
        }
        s
    }

    pub fn lm_comparison_text(&self) -> String {
        let mut beams: Vec<usize> = self.lm_rows.iter().map(|r| r.beam).collect();
        beams.sort_unstable();
        beams.dedup();
        let mut systems: Vec<&str> = Vec::new();
        for r in &self.lm_rows {
            if !systems.contains(&r.system.as_str()) {
                systems.push(&r.system);
            }
        }
        let mut s = format!("{:<26}", "System");
        for b in &beams {
            let _ = write!(s, " {:>8}", format!("beam {b}"));
        }
        s.push('\n');
        for sys in systems {
            let _ = write!(s, "{sys:<26}");
            for &b in &beams {
                let _ = write!(s, " {:>8.2}", 100.0 * self.median_lm_wer(sys, b).unwrap_or(f64::NAN));
            }
            s.push('\n');
        }
        s
    }
}

/// Corpus, vocabulary and token views shared by every stage.
pub struct PreparedExperiment {
    pub vocab: Vocabulary,
    pub data: PreparedSplits,
}

pub fn prepare_experiment(cfg: &ExperimentConfig) -> Result<PreparedExperiment> {
    cfg.validate()?;
    let (_, docs) = generate_corpus(&cfg.corpus, cfg.corpus_seed)?;
    let splits = split_documents(docs, cfg.splits)?;
    let vocab = train_vocabulary(&splits, cfg.vocab_size)?;
    let data = prepare_splits(&splits, &vocab);
    Ok(PreparedExperiment { vocab, data })
}

fn streams(docs: &[PreparedDocument]) -> Vec<&[u32]> {
    docs.iter().map(|d| d.tokens.stream.as_slice()).collect()
}

pub fn utterances(docs: &[PreparedDocument]) -> Vec<&PreparedUtterance> {
    docs.iter().flat_map(|d| &d.utterances).collect()
}

/// Trains a teacher of the given kind and window with the configured stages.
pub fn pretrain_teacher(
    cfg: &ExperimentConfig,
    prep: &PreparedExperiment,
    mode: LmMode,
    window: usize,
) -> Result<(TransformerLm, TeacherReport)> {
    let text = pack_sequences(&streams(&prep.data.text), window)?;
    let transcripts = pack_sequences(&streams(&prep.data.train), window)?;
    let dev = pack_sequences(&streams(&prep.data.dev), window)?;
    let stages = [
        TeacherStage {
            windows: &text,
            config: &cfg.teacher.text_stage,
        },
        TeacherStage {
            windows: &transcripts,
            config: &cfg.teacher.transcript_stage,
        },
    ];
    let model_cfg = cfg.teacher.model_config(prep.vocab.len(), window, mode);
    let seed = cfg.teacher_seed ^ (window as u64) << 8 ^ (mode == LmMode::Causal) as u64;
    let stages: Vec<TeacherStage<'_>> = stages.into_iter().filter(|s| s.config.total_steps > 0).collect();
    train_teacher(model_cfg, seed, &stages, &dev)
}

/// Teacher logits for every training utterance, in corpus order.
pub fn training_logits(
    teacher: &TransformerLm,
    train: &[PreparedDocument],
    context: ContextSize,
) -> Result<Vec<(String, crate::autodiff::Tensor)>> {
    let refs: Vec<(&PreparedDocument, usize)> = train
        .iter()
        .flat_map(|d| (0..d.utterances.len()).map(move |i| (d, i)))
        .collect();
    refs.par_iter()
        .map(|(d, i)| Ok((d.utterances[*i].id.clone(), teacher_logits(teacher, d.utterance_ref(*i), context)?)))
        .collect()
}

/// Soft-label set from precomputed logits.
pub fn soft_labels_from(
    logits: &[(String, crate::autodiff::Tensor)],
    cfg: &DistillConfig,
    teacher: &TransformerLm,
    vocab: &Vocabulary,
) -> Result<SoftLabelSet> {
    let utterances = logits
        .iter()
        .map(|(id, l)| {
            Ok(UtteranceSoftLabels {
                utterance_id: id.clone(),
                positions: soft_labels_from_logits(l, cfg)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SoftLabelSet {
        header: SoftLabelHeader {
            teacher_hash: content_hash(&archive_bytes(&teacher.params, "")),
            context: cfg.context,
            top_k: cfg.top_k,
            temperature: cfg.temperature,
            vocab_hash: vocab.hash(),
        },
        utterances,
    })
}

fn lookup(set: &SoftLabelSet) -> SoftLabelLookup {
    set.utterances
        .iter()
        .map(|u| (u.utterance_id.clone(), u.positions.clone()))
        .collect()
}

/// Corpus-level edit counts of best-first beam search output.
pub fn beam_wer(model: &Seq2SeqModel, utts: &[&PreparedUtterance], vocab: &Vocabulary, beam: usize, margin: usize) -> Result<EditCounts> {
    let per: Vec<EditCounts> = utts
        .par_iter()
        .map(|u| {
            let hyps = beam_search(model, &u.frames, beam, max_decode_len(u.frames.len(), margin))?;
            score_hypothesis(&hyps[0], u, vocab)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(sum_counts(&per))
}

fn score_hypothesis(h: &Hypothesis, u: &PreparedUtterance, vocab: &Vocabulary) -> Result<EditCounts> {
    let text = vocab.decode(h.content())?;
    Ok(word_error_rate(&text, &u.text)?.1)
}

fn sum_counts(per: &[EditCounts]) -> EditCounts {
    let mut total = EditCounts::default();
    per.iter().for_each(|c| total.add(c));
    total
}

/// How an inference-time language model is applied.
#[derive(Clone, Copy, Debug)]
pub enum LmUse<'a> {
    None,
    Fusion(&'a TransformerLm),
    Rescore(&'a TransformerLm),
}

/// Corpus-level edit counts with an optional inference-time LM.
pub fn lm_wer(
    model: &Seq2SeqModel,
    utts: &[&PreparedUtterance],
    vocab: &Vocabulary,
    beam: usize,
    margin: usize,
    lm: LmUse<'_>,
    weight: f64,
) -> Result<EditCounts> {
    let per: Vec<EditCounts> = utts
        .par_iter()
        .map(|u| {
            let dec = StudentDecoder::new(model, &u.frames)?;
            let opts = SearchOptions::new(beam, max_decode_len(u.frames.len(), margin));
            let best = match lm {
                LmUse::None => search(&dec, None, opts)?.remove(0),
                LmUse::Fusion(m) => {
                    let c = CausalLm(m);
                    search(&dec, Some((&c, weight)), opts)?.remove(0)
                }
                LmUse::Rescore(m) => {
                    let hyps = search(&dec, None, opts)?;
                    let scorer: Box<dyn SequenceScorer + '_> = match m.mode() {
                        LmMode::Causal => Box::new(CausalLm(m)),
                        LmMode::Mlm => Box::new(PseudoLogLikelihood(m)),
                    };
                    nbest_rescore(&hyps, scorer.as_ref(), weight)?
                }
            };
            score_hypothesis(&best, u, vocab)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(sum_counts(&per))
}

/// Everything `run_matrix` trains, kept for inspection and artifact output.
pub struct MatrixArtifacts {
    pub teachers: HashMap<(LmMode, usize), TransformerLm>,
    pub models: HashMap<(String, u64), Seq2SeqModel>,
    pub soft_labels: HashMap<String, SoftLabelSet>,
}

/// Runs the matrix; `log` receives one line per completed unit of work.
pub fn run_matrix(
    cfg: &ExperimentConfig,
    matrix: &ExperimentMatrix,
    log: &mut dyn FnMut(&str),
) -> Result<(MatrixReport, MatrixArtifacts)> {
    let prep = prepare_experiment(cfg)?;
    run_matrix_prepared(cfg, &prep, matrix, log)
}

pub fn run_matrix_prepared(
    cfg: &ExperimentConfig,
    prep: &PreparedExperiment,
    matrix: &ExperimentMatrix,
    log: &mut dyn FnMut(&str),
) -> Result<(MatrixReport, MatrixArtifacts)> {
    if matrix.seeds.is_empty() {
        return Err(Error::Config("matrix needs at least one seed".into()));
    }
    let config_hash = cfg.hash();
    let margin = cfg.decode.max_len_margin;
    let train = utterances(&prep.data.train);
    let dev = utterances(&prep.data.dev);
    let test = utterances(&prep.data.test);
    let mut report = MatrixReport::default();
    let mut artifacts = MatrixArtifacts {
        teachers: HashMap::new(),
        models: HashMap::new(),
        soft_labels: HashMap::new(),
    };

    let mut systems = matrix.systems();
    let full = cfg.teacher.window;
    if matrix.lm_comparison {
        for s in [
            SystemSpec::baseline(),
            SystemSpec::distilled(TeacherKind::Mlm, full, ContextSize::Window(full)),
        ] {
            if !systems.iter().any(|x| x.name == s.name) {
                systems.push(s);
            }
        }
    }

    let mut needed: Vec<(LmMode, usize)> = systems
        .iter()
        .filter_map(|s| s.teacher.mode().map(|m| (m, s.pretrain_window)))
        .collect();
    if matrix.lm_comparison {
        needed.push((LmMode::Causal, full));
        needed.push((LmMode::Mlm, full));
    }
    for key in needed {
        if artifacts.teachers.contains_key(&key) {
            continue;
        }
        let (teacher, rep) = pretrain_teacher(cfg, prep, key.0, key.1)?;
        let name = format!("{:?}-{}", key.0, key.1).to_lowercase();
        log(&format!("teacher {name}: dev accuracy {:.3}", rep.dev_accuracy));
        report.teacher_reports.push((name, rep.dev_accuracy));
        artifacts.teachers.insert(key, teacher);
    }

    let student_cfg = cfg.student.model_config(cfg.corpus.feature_dim, prep.vocab.len());
    let train_one = |distill: &DistillConfig, labels: Option<&SoftLabelLookup>, seed: u64| -> Result<AsrTrainOutput> {
        train_asr(
            student_cfg.clone(),
            &train,
            labels,
            &cfg.asr,
            distill,
            &dev,
            &prep.vocab,
            seed,
            margin,
        )
    };
    let best_dev = |out: &AsrTrainOutput| out.dev_wer.iter().copied().fold(f64::INFINITY, f64::min);

    let mut per_system: HashMap<String, Vec<(u64, Option<(f64, f64)>, AsrTrainOutput)>> = HashMap::new();
    for system in &systems {
        let mut runs = Vec::new();
        match system.teacher.mode() {
            None => {
                let d = cfg.distill.config(ContextSize::Utterance, 1.0, 0.0);
                for &seed in &matrix.seeds {
                    let out = train_one(&d, None, seed)?;
                    log(&format!("{} seed {seed}: dev {:.4}", system.name, best_dev(&out)));
                    runs.push((seed, None, out));
                }
            }
            Some(mode) => {
                let teacher = &artifacts.teachers[&(mode, system.pretrain_window)];
                let logits = training_logits(teacher, &prep.data.train, system.context)?;
                let labels_for = |t: f64| -> Result<SoftLabelSet> {
                    soft_labels_from(&logits, &cfg.distill.config(system.context, t, 0.0), teacher, &prep.vocab)
                };
                let mut label_cache: HashMap<u64, SoftLabelSet> = HashMap::new();
                let tune_seeds: Vec<u64> = if cfg.distill.tune_first_seed_only {
                    vec![matrix.seeds[0]]
                } else {
                    matrix.seeds.clone()
                };
                let mut chosen: HashMap<u64, (f64, f64)> = HashMap::new();
                let mut tuned_runs: HashMap<u64, AsrTrainOutput> = HashMap::new();
                for &seed in &tune_seeds {
                    let mut best: Option<(f64, f64, f64, AsrTrainOutput)> = None;
                    for &t in &cfg.distill.temperatures {
                        if !label_cache.contains_key(&t.to_bits()) {
                            label_cache.insert(t.to_bits(), labels_for(t)?);
                        }
                        let map = lookup(&label_cache[&t.to_bits()]);
                        for &a in &cfg.distill.alphas {
                            let d = cfg.distill.config(system.context, t, a);
                            let out = train_one(&d, Some(&map), seed)?;
                            let w = best_dev(&out);
                            report.tuning.push((system.name.clone(), t, a, w));
                            log(&format!("{} tune seed {seed} T={t} alpha={a}: dev {w:.4}", system.name));
                            if best.as_ref().map_or(true, |b| w < b.0) {
                                best = Some((w, t, a, out));
                            }
                        }
                    }
                    let (_, t, a, out) = best.expect("nonempty grid");
                    chosen.insert(seed, (t, a));
                    tuned_runs.insert(seed, out);
                }
                let fallback = chosen[&tune_seeds[0]];
                for &seed in &matrix.seeds {
                    let (t, a) = *chosen.get(&seed).unwrap_or(&fallback);
                    let out = match tuned_runs.remove(&seed) {
                        Some(o) => o,
                        None => {
                            if !label_cache.contains_key(&t.to_bits()) {
                                label_cache.insert(t.to_bits(), labels_for(t)?);
                            }
                            let map = lookup(&label_cache[&t.to_bits()]);
                            let out = train_one(&cfg.distill.config(system.context, t, a), Some(&map), seed)?;
                            log(&format!("{} seed {seed} T={t} alpha={a}: dev {:.4}", system.name, best_dev(&out)));
                            out
                        }
                    };
                    runs.push((seed, Some((t, a)), out));
                }
                let (t, _) = fallback;
                if let Some(set) = label_cache.remove(&t.to_bits()) {
                    artifacts.soft_labels.insert(system.name.clone(), set);
                }
            }
        }
        per_system.insert(system.key(), runs);
    }

    let tables: Vec<(&str, &SystemSpec)> = matrix
        .table1
        .iter()
        .map(|s| ("table1", s))
        .chain(matrix.table2.iter().map(|s| ("table2", s)))
        .collect();
    for (table, system) in tables {
        for (seed, hp, out) in &per_system[&system.key()] {
            let counts = beam_wer(&out.model, &test, &prep.vocab, cfg.decode.beam_width, margin)?;
            report.rows.push(ResultRow {
                table: table.to_string(),
                system: system.name.clone(),
                lm: system.teacher.label().to_string(),
                pretrain_window: system.pretrain_window,
                context: if system.teacher == TeacherKind::None {
                    "---".into()
                } else {
                    system.context.label()
                },
                seed: *seed,
                temperature: hp.map(|h| h.0),
                alpha: hp.map(|h| h.1),
                dev_wer: best_dev(out),
                test_wer: counts.wer(),
                test_counts: counts,
                config_hash: config_hash.clone(),
            });
            log(&format!("{table} {} seed {seed}: test {:.4}", system.name, counts.wer()));
        }
    }

    if matrix.lm_comparison {
        let causal = &artifacts.teachers[&(LmMode::Causal, full)];
        let mlm = &artifacts.teachers[&(LmMode::Mlm, full)];
        let distilled = SystemSpec::distilled(TeacherKind::Mlm, full, ContextSize::Window(full)).name;
        let tune_seed = matrix.seeds[0];
        for (label, key) in [("baseline", "baseline".to_string()), ("distilled", distilled)] {
            let runs = &per_system[&key];
            let tune_model = &runs.iter().find(|r| r.0 == tune_seed).expect("seed run").2.model;
            let variants: [(&str, LmUse<'_>); 4] = [
                ("", LmUse::None),
                ("+SF", LmUse::Fusion(causal)),
                ("+rescore(causal)", LmUse::Rescore(causal)),
                ("+rescore(MLM)", LmUse::Rescore(mlm)),
            ];
            for (suffix, lm) in variants {
                let weight = match lm {
                    LmUse::None => 0.0,
                    _ => {
                        let mut best = (f64::INFINITY, 0.0);
                        for &w in &cfg.decode.lm_weights {
                            let c = lm_wer(tune_model, &dev, &prep.vocab, cfg.decode.beam_width, margin, lm, w)?;
                            if c.wer() < best.0 {
                                best = (c.wer(), w);
                            }
                        }
                        best.1
                    }
                };
                let name = format!("{label}{suffix}");
                for &beam in &cfg.decode.beam_sweep {
                    for (seed, _, out) in runs {
                        let c = lm_wer(&out.model, &test, &prep.vocab, beam, margin, lm, weight)?;
                        report.lm_rows.push(LmComparisonRow {
                            system: name.clone(),
                            beam,
                            seed: *seed,
                            lm_weight: weight,
                            test_wer: c.wer(),
                        });
                    }
                }
                log(&format!("lm comparison {name}: weight {weight}"));
            }
        }
    }

    for (key, runs) in per_system {
        for (seed, _, out) in runs {
            artifacts.models.insert((key.clone(), seed), out.model);
        }
    }
    Ok((report, artifacts))
}

/// Writes reports, resolved config and hashed artifacts into `dir`.
pub fn write_matrix_outputs(
    dir: &Path,
    cfg: &ExperimentConfig,
    prep: &PreparedExperiment,
    report: &MatrixReport,
    artifacts: &MatrixArtifacts,
) -> Result<()> {
    fs::create_dir_all(dir.join("teachers"))?;
    fs::create_dir_all(dir.join("students"))?;
    fs::create_dir_all(dir.join("soft_labels"))?;
    let mut manifest: Vec<(String, String)> = Vec::new();
    let mut put = |rel: String, bytes: &[u8]| -> Result<()> {
        fs::write(dir.join(&rel), bytes)?;
        manifest.push((rel, content_hash(bytes)));
        Ok(())
    };
    put("config.toml".into(), cfg.to_toml().as_bytes())?;
    put("vocab.txt".into(), prep.vocab.to_text().as_bytes())?;
    let mut teachers: Vec<_> = artifacts.teachers.iter().collect();
    teachers.sort_by_key(|(k, _)| (k.1, k.0 == LmMode::Mlm));
    for ((mode, w), t) in teachers {
        let meta = serde_json::to_string(&t.config)?;
        put(
            format!("teachers/{}-{w}.ckpt", format!("{mode:?}").to_lowercase()),
            &archive_bytes(&t.params, &meta),
        )?;
    }
    let mut models: Vec<_> = artifacts.models.iter().collect();
    models.sort_by(|a, b| a.0.cmp(b.0));
    for ((name, seed), m) in models {
        let meta = serde_json::to_string(&m.config)?;
        put(format!("students/{name}-seed{seed}.ckpt"), &archive_bytes(&m.params, &meta))?;
    }
    let mut labels: Vec<_> = artifacts.soft_labels.iter().collect();
    labels.sort_by(|a, b| a.0.cmp(b.0));
    for (name, set) in labels {
        put(format!("soft_labels/{name}.txt"), set.to_text().as_bytes())?;
    }
    put("report.json".into(), serde_json::to_string_pretty(report)?.as_bytes())?;
    put("results.csv".into(), report.results_csv().as_bytes())?;
    put("summary.csv".into(), report.summary_csv().as_bytes())?;
    put("table1.txt".into(), report.table1_text().as_bytes())?;
    if report.rows.iter().any(|r| r.table == "table2") {
        put("table2.txt".into(), report.table2_text().as_bytes())?;
    }
    if !report.lm_rows.is_empty() {
        put("lm_comparison.csv".into(), report.lm_comparison_csv().as_bytes())?;
        put("lm_comparison.txt".into(), report.lm_comparison_text().as_bytes())?;
    }
    let manifest: serde_json::Map<String, serde_json::Value> =
        manifest.into_iter().map(|(k, v)| (k, serde_json::Value::String(v))).collect();
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_cells() {
        let mut cfg = ExperimentConfig::standard();
        let m = ExperimentMatrix::from_config(&cfg);
        assert_eq!(m.table1.len(), 5);
        assert!(m.table2.is_empty());
        cfg.matrix.table2 = true;
        let m = ExperimentMatrix::from_config(&cfg);
        assert_eq!(m.table2.len(), 8);
        let names: std::collections::HashSet<_> = m.table2.iter().map(|s| &s.name).collect();
        assert_eq!(names.len(), 8);
    }

    #[test]
    fn median_values() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
