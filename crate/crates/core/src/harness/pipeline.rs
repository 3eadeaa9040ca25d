//! File-based pipeline stages. Every stage writes its outputs, the resolved
//! configuration and a manifest of input and output content hashes into its
//! own run directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::data::{prepare_splits, train_vocabulary, PreparedSplits, PreparedUtterance};
use super::experiment::{pretrain_teacher, soft_labels_from, training_logits, utterances, PreparedExperiment};
use super::train::{max_decode_len, soft_label_lookup, train_asr};
use crate::autodiff::checkpoint::{archive_bytes, content_hash, read_archive};
use crate::corpus::{generate_corpus, read_corpus, split_documents, write_corpus};
use crate::decode_eval::{
    evaluation_csv, nbest_rescore, read_decode_records, search, word_error_rate, write_decode_records, CausalLm,
    DecodeRecord, EditCounts, EvalRow, PseudoLogLikelihood, SearchOptions, SequenceScorer, StudentDecoder,
};
use crate::distillation::{ContextSize, SoftLabelSet};
use crate::error::{Error, Result};
use crate::models::{LmMode, Seq2SeqConfig, Seq2SeqModel, TransformerConfig, TransformerLm};
use crate::tokenizer::Vocabulary;

pub const CORPUS_STAGE: &str = "gen-corpus";
pub const BPE_STAGE: &str = "train-bpe";
pub const TEACHER_STAGE: &str = "pretrain-teacher";
pub const LABELS_STAGE: &str = "distill-labels";
pub const ASR_STAGE: &str = "train-asr";
pub const DECODE_STAGE: &str = "decode";

pub const VOCAB_FILE: &str = "vocab.txt";
pub const TEACHER_FILE: &str = "teacher.ckpt";
pub const LABELS_FILE: &str = "soft_labels.txt";
pub const STUDENT_FILE: &str = "student.ckpt";
pub const DECODE_FILE: &str = "decode.tsv";

/// Fails with an orchestration error naming `stage` when `path` is missing.
pub fn require(path: &Path, stage: &str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path.to_path_buf())
    } else {
        Err(Error::Orchestration {
            stage: stage.to_string(),
            path: path.display().to_string(),
        })
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_hash: String,
    pub inputs: Vec<(String, String)>,
    pub outputs: Vec<(String, String)>,
}

fn hash_path(path: &Path) -> Result<String> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
        entries.sort();
        let mut joined = String::new();
        for e in entries.iter().filter(|e| e.is_file()) {
            joined.push_str(&format!("{} {}\n", e.file_name().unwrap_or_default().to_string_lossy(), hash_path(e)?));
        }
        Ok(content_hash(joined.as_bytes()))
    } else {
        Ok(content_hash(&fs::read(path)?))
    }
}

/// Writes `config.toml` and `manifest.json` into `out`.
pub fn write_run_record(out: &Path, stage: &str, cfg: &ExperimentConfig, inputs: &[&Path], outputs: &[&str]) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    let manifest = Manifest {
        stage: stage.to_string(),
        config_hash: cfg.hash(),
        inputs: inputs
            .iter()
            .map(|p| {
                let name = p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned());
                Ok((name, hash_path(p)?))
            })
            .collect::<Result<_>>()?,
        outputs: outputs
            .iter()
            .map(|name| Ok((name.to_string(), hash_path(&out.join(name))?)))
            .collect::<Result<_>>()?,
    };
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn gen_corpus(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    let (_, docs) = generate_corpus(&cfg.corpus, cfg.corpus_seed)?;
    write_corpus(out, &docs)?;
    write_run_record(out, CORPUS_STAGE, cfg, &[], &["utterances.jsonl", "frames.bin"])
}

fn load_splits(cfg: &ExperimentConfig, corpus: &Path) -> Result<crate::corpus::Splits> {
    require(&corpus.join("utterances.jsonl"), CORPUS_STAGE)?;
    require(&corpus.join("frames.bin"), CORPUS_STAGE)?;
    split_documents(read_corpus(corpus)?, cfg.splits)
}

pub fn train_bpe(cfg: &ExperimentConfig, corpus: &Path, out: &Path) -> Result<Vocabulary> {
    let splits = load_splits(cfg, corpus)?;
    let vocab = train_vocabulary(&splits, cfg.vocab_size)?;
    fs::create_dir_all(out)?;
    fs::write(out.join(VOCAB_FILE), vocab.to_text())?;
    write_run_record(out, BPE_STAGE, cfg, &[corpus], &[VOCAB_FILE])?;
    Ok(vocab)
}

pub fn load_vocab(path: &Path) -> Result<Vocabulary> {
    let file = if path.is_dir() { path.join(VOCAB_FILE) } else { path.to_path_buf() };
    Vocabulary::from_text(&fs::read_to_string(require(&file, BPE_STAGE)?)?)
}

fn load_prepared(cfg: &ExperimentConfig, corpus: &Path, vocab: &Path) -> Result<PreparedExperiment> {
    let splits = load_splits(cfg, corpus)?;
    let vocab = load_vocab(vocab)?;
    let data: PreparedSplits = prepare_splits(&splits, &vocab);
    Ok(PreparedExperiment { vocab, data })
}

pub fn load_teacher(path: &Path) -> Result<TransformerLm> {
    let file = if path.is_dir() { path.join(TEACHER_FILE) } else { path.to_path_buf() };
    let mut f = fs::File::open(require(&file, TEACHER_STAGE)?)?;
    let (params, meta) = read_archive(&mut f)?;
    let config: TransformerConfig = serde_json::from_str(&meta)?;
    TransformerLm::from_params(config, params)
}

pub fn load_student(path: &Path) -> Result<Seq2SeqModel> {
    let file = if path.is_dir() { path.join(STUDENT_FILE) } else { path.to_path_buf() };
    let mut f = fs::File::open(require(&file, ASR_STAGE)?)?;
    let (params, meta) = read_archive(&mut f)?;
    let config: Seq2SeqConfig = serde_json::from_str(&meta)?;
    Seq2SeqModel::from_params(config, params)
}

pub fn pretrain_teacher_stage(
    cfg: &ExperimentConfig,
    corpus: &Path,
    vocab: &Path,
    mode: LmMode,
    window: usize,
    out: &Path,
) -> Result<f64> {
    let prep = load_prepared(cfg, corpus, vocab)?;
    let (teacher, report) = pretrain_teacher(cfg, &prep, mode, window)?;
    fs::create_dir_all(out)?;
    let meta = serde_json::to_string(&teacher.config)?;
    fs::write(out.join(TEACHER_FILE), archive_bytes(&teacher.params, &meta))?;
    let log = serde_json::json!({ "losses": report.losses, "dev_accuracy": report.dev_accuracy });
    fs::write(out.join("train_log.json"), serde_json::to_string(&log)?)?;
    write_run_record(out, TEACHER_STAGE, cfg, &[corpus, vocab], &[TEACHER_FILE, "train_log.json"])?;
    Ok(report.dev_accuracy)
}

#[allow(clippy::too_many_arguments)]
pub fn distill_labels_stage(
    cfg: &ExperimentConfig,
    corpus: &Path,
    vocab: &Path,
    teacher: &Path,
    context: ContextSize,
    temperature: f64,
    out: &Path,
) -> Result<()> {
    let prep = load_prepared(cfg, corpus, vocab)?;
    let teacher_model = load_teacher(teacher)?;
    let dc = cfg.distill.config(context, temperature, 0.0);
    dc.validate()?;
    let logits = training_logits(&teacher_model, &prep.data.train, context)?;
    let set = soft_labels_from(&logits, &dc, &teacher_model, &prep.vocab)?;
    fs::create_dir_all(out)?;
    fs::write(out.join(LABELS_FILE), set.to_text())?;
    write_run_record(out, LABELS_STAGE, cfg, &[corpus, vocab, teacher], &[LABELS_FILE])
}

#[allow(clippy::too_many_arguments)]
pub fn train_asr_stage(
    cfg: &ExperimentConfig,
    corpus: &Path,
    vocab: &Path,
    labels: Option<&Path>,
    temperature: f64,
    alpha: f64,
    seed: u64,
    out: &Path,
) -> Result<Vec<f64>> {
    let prep = load_prepared(cfg, corpus, vocab)?;
    let set = match labels {
        Some(p) => {
            let file = if p.is_dir() { p.join(LABELS_FILE) } else { p.to_path_buf() };
            let text = fs::read_to_string(require(&file, LABELS_STAGE)?)?;
            Some(SoftLabelSet::from_text(&text, &prep.vocab.hash())?)
        }
        None => None,
    };
    let lookup = set.as_ref().map(|s| soft_label_lookup(s, &prep.vocab)).transpose()?;
    let context = set.as_ref().map_or(ContextSize::Utterance, |s| s.header.context);
    let dc = cfg.distill.config(context, temperature, alpha);
    let train = utterances(&prep.data.train);
    let dev = utterances(&prep.data.dev);
    let student_cfg = cfg.student.model_config(cfg.corpus.feature_dim, prep.vocab.len());
    let result = train_asr(
        student_cfg,
        &train,
        lookup.as_ref(),
        &cfg.asr,
        &dc,
        &dev,
        &prep.vocab,
        seed,
        cfg.decode.max_len_margin,
    )?;
    fs::create_dir_all(out)?;
    let meta = serde_json::to_string(&result.model.config)?;
    fs::write(out.join(STUDENT_FILE), archive_bytes(&result.model.params, &meta))?;
    let log = serde_json::json!({
        "losses": result.losses,
        "dev_wer": result.dev_wer,
        "selected_epoch": result.selected_epoch,
    });
    fs::write(out.join("train_log.json"), serde_json::to_string(&log)?)?;
    let mut inputs: Vec<&Path> = vec![corpus, vocab];
    if let Some(p) = labels {
        inputs.push(p);
    }
    write_run_record(out, ASR_STAGE, cfg, &inputs, &[STUDENT_FILE, "train_log.json"])?;
    Ok(result.dev_wer)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Dev,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Usage(format!("unknown split `{other}` (dev or test)"))),
        }
    }
}

fn split_utterances(prep: &PreparedExperiment, split: Split) -> Vec<&PreparedUtterance> {
    match split {
        Split::Dev => utterances(&prep.data.dev),
        Split::Test => utterances(&prep.data.test),
    }
}

/// Options of the decode stage.
pub struct DecodeOptions<'a> {
    pub split: Split,
    pub beam: usize,
    pub fusion_lm: Option<&'a Path>,
    pub rescore_lm: Option<&'a Path>,
    pub lm_weight: f64,
}

pub fn decode_stage(
    cfg: &ExperimentConfig,
    corpus: &Path,
    vocab: &Path,
    model: &Path,
    opts: &DecodeOptions<'_>,
    out: &Path,
) -> Result<usize> {
    let prep = load_prepared(cfg, corpus, vocab)?;
    let student = load_student(model)?;
    let fusion = opts.fusion_lm.map(load_teacher).transpose()?;
    let rescore = opts.rescore_lm.map(load_teacher).transpose()?;
    if fusion.as_ref().is_some_and(|m| m.mode() != LmMode::Causal) {
        return Err(Error::Usage("shallow fusion needs a causal LM".into()));
    }
    let utts = split_utterances(&prep, opts.split);
    let mut records = Vec::new();
    for u in &utts {
        let dec = StudentDecoder::new(&student, &u.frames)?;
        let search_opts = SearchOptions::new(opts.beam, max_decode_len(u.frames.len(), cfg.decode.max_len_margin));
        let mut hyps = match &fusion {
            Some(lm) => search(&dec, Some((&CausalLm(lm), opts.lm_weight)), search_opts)?,
            None => search(&dec, None, search_opts)?,
        };
        if let Some(lm) = &rescore {
            let scorer: Box<dyn SequenceScorer + '_> = match lm.mode() {
                LmMode::Causal => Box::new(CausalLm(lm)),
                LmMode::Mlm => Box::new(PseudoLogLikelihood(lm)),
            };
            let best = nbest_rescore(&hyps, scorer.as_ref(), opts.lm_weight)?;
            hyps.retain(|h| h.tokens != best.tokens);
            hyps.insert(0, best);
        }
        for (rank, h) in hyps.iter().enumerate() {
            records.push(DecodeRecord {
                utterance_id: u.id.clone(),
                rank,
                asr_logscore: h.asr_logscore,
                lm_logscore: h.lm_logscore,
                text: prep.vocab.decode(h.content())?,
            });
        }
    }
    fs::create_dir_all(out)?;
    fs::write(out.join(DECODE_FILE), write_decode_records(&records))?;
    let mut inputs: Vec<&Path> = vec![corpus, vocab, model];
    inputs.extend(opts.fusion_lm);
    inputs.extend(opts.rescore_lm);
    write_run_record(out, DECODE_STAGE, cfg, &inputs, &[DECODE_FILE])?;
    Ok(utts.len())
}

/// Scores the rank-0 decode records against the references of `split`.
pub fn evaluate_stage(
    cfg: &ExperimentConfig,
    corpus: &Path,
    decode: &Path,
    split: Split,
    system: &str,
    out: &Path,
) -> Result<EvalRow> {
    let splits = load_splits(cfg, corpus)?;
    let file = if decode.is_dir() { decode.join(DECODE_FILE) } else { decode.to_path_buf() };
    let records = read_decode_records(&fs::read_to_string(require(&file, DECODE_STAGE)?)?)?;
    let docs = match split {
        Split::Dev => &splits.dev,
        Split::Test => &splits.test,
    };
    let mut counts = EditCounts::default();
    for d in docs {
        for u in &d.utterances {
            let id = super::data::utterance_id(d.id, u.index_in_doc);
            let hyp = records
                .iter()
                .find(|r| r.utterance_id == id && r.rank == 0)
                .map_or("", |r| r.text.as_str());
            counts.add(&word_error_rate(hyp, &u.text)?.1);
        }
    }
    let row = EvalRow {
        system: system.to_string(),
        split: format!("{split:?}").to_lowercase(),
        counts,
    };
    fs::create_dir_all(out)?;
    fs::write(out.join("evaluation.csv"), evaluation_csv(std::slice::from_ref(&row)))?;
    write_run_record(out, "evaluate", cfg, &[corpus, &file], &["evaluation.csv"])?;
    Ok(row)
}
