//! Small corpora and quickly overfit teachers.

use distil_asr::corpus::{generate_corpus, CorpusSpec, Document, SplitSizes};
use distil_asr::harness::config::{ExperimentConfig, Precision, TrainConfig};
use distil_asr::harness::data::{pack_sequences, prepare_document, PreparedDocument};
use distil_asr::harness::train::{train_teacher, TeacherReport, TeacherStage};
use distil_asr::models::{LmMode, TransformerConfig, TransformerLm};
use distil_asr::tokenizer::{bpe_train, Vocabulary};

/// Ten documents of five utterances each.
pub fn fifty_utterance_spec() -> CorpusSpec {
    CorpusSpec {
        n_documents: 10,
        utterances_per_document: (5, 5),
        utterance_length_range: (2, 5),
        ..CorpusSpec::default()
    }
}

pub struct Fixture {
    pub docs: Vec<Document>,
    pub vocab: Vocabulary,
    pub prepared: Vec<PreparedDocument>,
}

pub fn fifty_utterances() -> Fixture {
    let (_, docs) = generate_corpus(&fifty_utterance_spec(), 5).unwrap();
    let lines: Vec<&str> = docs.iter().flat_map(|d| d.utterances.iter().map(|u| u.text.as_str())).collect();
    let vocab = bpe_train(&lines, 48).unwrap();
    let prepared = docs.iter().map(|d| prepare_document(d, &vocab)).collect();
    Fixture { docs, vocab, prepared }
}

pub const OVERFIT_WINDOW: usize = 16;

pub fn windows(prepared: &[PreparedDocument], window: usize) -> Vec<Vec<u32>> {
    let streams: Vec<&[u32]> = prepared.iter().map(|d| d.tokens.stream.as_slice()).collect();
    pack_sequences(&streams, window).unwrap()
}

/// Every contiguous run of `window` tokens inside each document (stride 1),
/// so any context window assembled later was seen during training.
pub fn sliding_windows(prepared: &[PreparedDocument], window: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    for d in prepared {
        let s = &d.tokens.stream;
        if s.len() <= window {
            out.extend(pack_sequences(&[s.as_slice()], window).unwrap());
        } else {
            out.extend(s.windows(window).map(<[u32]>::to_vec));
        }
    }
    out
}

pub fn overfit_config(mode: LmMode, vocab_size: usize) -> TransformerConfig {
    TransformerConfig {
        vocab_size,
        d_model: 48,
        n_heads: 4,
        n_layers: 2,
        d_ff: 96,
        max_len: OVERFIT_WINDOW,
        mode,
        dropout: 0.0,
    }
}

pub fn overfit_train_config(steps: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: 3e-3,
        warmup_fraction: 0.05,
        total_steps: steps,
        batch_size: 8,
        mlm_mask_rate: 0.15,
        seed: 3,
        precision: Precision::F64,
        clip_norm: 1.0,
    }
}

/// Teacher trained to memorise the fixture's own windows.
pub fn overfit_teacher(fx: &Fixture, mode: LmMode, steps: usize) -> (TransformerLm, TeacherReport, Vec<Vec<u32>>) {
    overfit_teacher_on(fx, mode, steps, windows(&fx.prepared, OVERFIT_WINDOW))
}

pub fn overfit_teacher_on(
    fx: &Fixture,
    mode: LmMode,
    steps: usize,
    w: Vec<Vec<u32>>,
) -> (TransformerLm, TeacherReport, Vec<Vec<u32>>) {
    let cfg = overfit_train_config(steps);
    let stages = [TeacherStage { windows: &w, config: &cfg }];
    let (model, report) = train_teacher(overfit_config(mode, fx.vocab.len()), 17, &stages, &w).unwrap();
    (model, report, w)
}

/// A corpus and models small enough to run every stage in seconds.
pub fn tiny_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::standard();
    c.name = "tiny".into();
    c.splits = SplitSizes {
        text: 6,
        train: 4,
        dev: 2,
        test: 2,
    };
    c.corpus.n_documents = c.splits.total();
    c.corpus.utterances_per_document = (3, 4);
    c.corpus.utterance_length_range = (2, 6);
    c.teacher.d_model = 16;
    c.teacher.n_heads = 2;
    c.teacher.n_layers = 1;
    c.teacher.d_ff = 24;
    c.teacher.window = 16;
    c.teacher.text_stage.total_steps = 12;
    c.teacher.text_stage.batch_size = 4;
    c.teacher.transcript_stage.total_steps = 4;
    c.teacher.transcript_stage.batch_size = 4;
    c.student.encoder_hidden = 8;
    c.student.decoder_hidden = 8;
    c.student.embed_dim = 6;
    c.student.attention_dim = 8;
    c.asr.epochs = 2;
    c.matrix.seeds = vec![1, 2];
    c.matrix.pretrain_windows = vec![8, 16];
    c
}

