//! Run configuration: one TOML file per run, with named presets.

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusSpec, SplitSizes};
use crate::distillation::{ContextSize, DistillConfig};
use crate::error::{Error, Result};
use crate::models::{LmMode, Seq2SeqConfig, TransformerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F64,
    /// Parameters are rounded to single precision after every update;
    /// arithmetic stays in f64.
    F32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    pub mlm_mask_rate: f64,
    pub seed: u64,
    pub precision: Precision,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!(
                "warmup_fraction {} not in [0, 1)",
                self.warmup_fraction
            )));
        }
        if !(self.mlm_mask_rate > 0.0 && self.mlm_mask_rate < 1.0) {
            return Err(Error::Config(format!("mlm_mask_rate {} not in (0, 1)", self.mlm_mask_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherSettings {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub dropout: f64,
    /// Pre-training sequence length; also the largest distillation window.
    pub window: usize,
    /// Stage 1: text-only documents.
    pub text_stage: TrainConfig,
    /// Stage 2: transcripts of the paired training split.
    pub transcript_stage: TrainConfig,
}

impl TeacherSettings {
    pub fn model_config(&self, vocab_size: usize, window: usize, mode: LmMode) -> TransformerConfig {
        TransformerConfig {
            vocab_size,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            d_ff: self.d_ff,
            max_len: window,
            mode,
            dropout: self.dropout,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentSettings {
    pub encoder_layers: usize,
    pub encoder_hidden: usize,
    pub decoder_hidden: usize,
    pub embed_dim: usize,
    pub attention_dim: usize,
}

impl StudentSettings {
    pub fn model_config(&self, input_dim: usize, vocab_size: usize) -> Seq2SeqConfig {
        Seq2SeqConfig {
            input_dim,
            vocab_size,
            encoder_layers: self.encoder_layers,
            encoder_hidden: self.encoder_hidden,
            decoder_hidden: self.decoder_hidden,
            embed_dim: self.embed_dim,
            attention_dim: self.attention_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsrSettings {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    /// Std of Gaussian noise added to training frames; 0 disables.
    pub feature_noise: f64,
    /// Keep the parameters of the epoch with the lowest dev WER.
    pub select_best_epoch: bool,
    pub precision: Precision,
}

impl AsrSettings {
    pub fn train_config(&self, steps: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            warmup_fraction: 0.0,
            total_steps: steps,
            batch_size: self.batch_size,
            mlm_mask_rate: 0.08,
            seed,
            precision: self.precision,
            clip_norm: self.clip_norm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillSettings {
    pub top_k: usize,
    pub label_smoothing: f64,
    pub smooth_hard_when_distilling: bool,
    pub temperatures: Vec<f64>,
    pub alphas: Vec<f64>,
    /// Tune (T, alpha) on the first seed only and reuse the choice for the rest.
    pub tune_first_seed_only: bool,
}

impl DistillSettings {
    pub fn config(&self, context: ContextSize, temperature: f64, alpha: f64) -> DistillConfig {
        DistillConfig {
            context,
            top_k: self.top_k,
            temperature,
            alpha,
            label_smoothing: self.label_smoothing,
            smooth_hard_when_distilling: self.smooth_hard_when_distilling,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeSettings {
    pub beam_width: usize,
    /// Beam widths swept for the comparison with inference-time LMs.
    pub beam_sweep: Vec<usize>,
    pub lm_weights: Vec<f64>,
    /// Hypotheses may be this many tokens longer than the frame count.
    pub max_len_margin: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixSettings {
    pub seeds: Vec<u64>,
    /// Pre-training windows for the context-length ablation.
    pub pretrain_windows: Vec<usize>,
    pub table2: bool,
    pub lm_comparison: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub corpus_seed: u64,
    pub teacher_seed: u64,
    pub corpus: CorpusSpec,
    pub splits: SplitSizes,
    pub vocab_size: usize,
    pub teacher: TeacherSettings,
    pub student: StudentSettings,
    pub asr: AsrSettings,
    pub distill: DistillSettings,
    pub decode: DecodeSettings,
    pub matrix: MatrixSettings,
}

fn train(lr: f64, steps: usize, batch: usize, rate: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: lr,
        warmup_fraction: 0.1,
        total_steps: steps,
        batch_size: batch,
        mlm_mask_rate: rate,
        seed,
        precision: Precision::F64,
        clip_norm: 1.0,
    }
}

impl ExperimentConfig {
    /// Small synthetic setup used by the acceptance suite.
    pub fn standard() -> Self {
        let splits = SplitSizes {
            text: 400,
            train: 40,
            dev: 30,
            test: 40,
        };
        ExperimentConfig {
            name: "standard".into(),
            corpus_seed: 11,
            teacher_seed: 101,
            corpus: CorpusSpec {
                n_documents: splits.total(),
                utterance_length_range: (4, 10),
                ..CorpusSpec::default()
            },
            splits,
            vocab_size: 64,
            teacher: TeacherSettings {
                d_model: 48,
                n_heads: 4,
                n_layers: 2,
                d_ff: 96,
                dropout: 0.1,
                window: 32,
                text_stage: train(1e-3, 2400, 16, 0.15, 1),
                transcript_stage: train(5e-4, 150, 16, 0.15, 2),
            },
            student: StudentSettings {
                encoder_layers: 1,
                encoder_hidden: 32,
                decoder_hidden: 32,
                embed_dim: 16,
                attention_dim: 32,
            },
            asr: AsrSettings {
                learning_rate: 3e-3,
                epochs: 60,
                batch_size: 8,
                clip_norm: 5.0,
                feature_noise: 0.0,
                select_best_epoch: true,
                precision: Precision::F64,
            },
            distill: DistillSettings {
                top_k: 8,
                label_smoothing: 0.1,
                smooth_hard_when_distilling: true,
                temperatures: vec![1.0, 2.0],
                alphas: vec![0.1, 0.3],
                tune_first_seed_only: true,
            },
            decode: DecodeSettings {
                beam_width: 5,
                beam_sweep: vec![1, 2, 5, 10],
                lm_weights: (0..=10).map(|i| i as f64 / 10.0).collect(),
                max_len_margin: 4,
            },
            matrix: MatrixSettings {
                seeds: vec![1, 2, 3, 4, 5],
                pretrain_windows: vec![8, 16, 32],
                table2: false,
                lm_comparison: true,
            },
        }
    }

    /// Larger models and corpus for a single workstation.
    pub fn desk() -> Self {
        let mut c = ExperimentConfig::standard();
        c.name = "desk".into();
        c.splits = SplitSizes {
            text: 3000,
            train: 300,
            dev: 40,
            test: 40,
        };
        c.corpus.n_documents = c.splits.total();
        c.corpus.alphabet_size = 60;
        c.corpus.n_topics = 6;
        c.corpus.utterance_length_range = (2, 12);
        c.corpus.feature_dim = 16;
        c.vocab_size = 160;
        c.teacher.d_model = 128;
        c.teacher.n_layers = 2;
        c.teacher.n_heads = 4;
        c.teacher.d_ff = 256;
        c.teacher.window = 128;
        c.teacher.text_stage.total_steps = 4000;
        c.teacher.text_stage.batch_size = 32;
        c.teacher.text_stage.learning_rate = 5e-4;
        c.teacher.transcript_stage.total_steps = 1000;
        c.teacher.transcript_stage.batch_size = 32;
        c.student = StudentSettings {
            encoder_layers: 2,
            encoder_hidden: 64,
            decoder_hidden: 64,
            embed_dim: 32,
            attention_dim: 64,
        };
        c.asr.learning_rate = 1e-3;
        c.asr.epochs = 30;
        c.distill.temperatures = vec![1.0, 2.0, 5.0];
        c.distill.alphas = vec![0.1, 0.3, 0.5, 0.7, 0.9];
        c.matrix.pretrain_windows = vec![32, 64, 128];
        c.matrix.table2 = true;
        c
    }

    /// Model sizes and hyperparameters as published; not run automatically.
    pub fn full_scale() -> Self {
        let mut c = ExperimentConfig::desk();
        c.name = "full".into();
        c.vocab_size = 7520;
        c.corpus.alphabet_size = 300;
        c.corpus.n_topics = 20;
        c.corpus.utterance_length_range = (1, 118);
        c.corpus.utterances_per_document = (20, 60);
        c.corpus.feature_dim = 80;
        let t = TransformerConfig::full_scale(c.vocab_size, 256, LmMode::Mlm);
        c.teacher.d_model = t.d_model;
        c.teacher.n_heads = t.n_heads;
        c.teacher.n_layers = t.n_layers;
        c.teacher.d_ff = t.d_ff;
        c.teacher.dropout = t.dropout;
        c.teacher.window = 256;
        for stage in [&mut c.teacher.text_stage, &mut c.teacher.transcript_stage] {
            stage.learning_rate = 1e-4;
            stage.batch_size = 150;
            stage.mlm_mask_rate = 0.08;
        }
        c.teacher.text_stage.total_steps = 100_000;
        c.teacher.transcript_stage.total_steps = 20_000;
        let s = Seq2SeqConfig::full_scale(c.corpus.feature_dim, c.vocab_size);
        c.student = StudentSettings {
            encoder_layers: s.encoder_layers,
            encoder_hidden: s.encoder_hidden,
            decoder_hidden: s.decoder_hidden,
            embed_dim: s.embed_dim,
            attention_dim: s.attention_dim,
        };
        c.asr.learning_rate = 1e-4;
        c.asr.batch_size = 25;
        c.asr.epochs = 50;
        c.matrix.pretrain_windows = vec![64, 128, 256];
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "standard" => Ok(ExperimentConfig::standard()),
            "desk" => Ok(ExperimentConfig::desk()),
            "full" => Ok(ExperimentConfig::full_scale()),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: ExperimentConfig = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        if self.corpus.n_documents < self.splits.total() {
            return Err(Error::Config(format!(
                "corpus has {} documents, splits need {}",
                self.corpus.n_documents,
                self.splits.total()
            )));
        }
        self.teacher.text_stage.validate()?;
        self.teacher.transcript_stage.validate()?;
        if self.distill.temperatures.is_empty() || self.distill.alphas.is_empty() {
            return Err(Error::Config("distillation grid is empty".into()));
        }
        for &t in &self.distill.temperatures {
            for &a in &self.distill.alphas {
                self.distill.config(ContextSize::Utterance, t, a).validate()?;
            }
        }
        if self.matrix.seeds.is_empty() {
            return Err(Error::Config("at least one seed required".into()));
        }
        if self.decode.beam_width == 0 || self.decode.beam_sweep.contains(&0) {
            return Err(Error::Config("beam widths must be >= 1".into()));
        }
        if self.matrix.pretrain_windows.iter().any(|&w| w > self.teacher.window) {
            return Err(Error::Config("ablation windows may not exceed the teacher window".into()));
        }
        Ok(())
    }

    /// Stable hash of the resolved configuration.
    pub fn hash(&self) -> String {
        crate::autodiff::checkpoint::content_hash(self.to_toml().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip_through_toml() {
        for name in ["standard", "desk", "full"] {
            let c = ExperimentConfig::preset(name).unwrap();
            c.validate().unwrap();
            let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
            assert_eq!(back, c);
        }
        assert!(ExperimentConfig::preset("huge").is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        let mut c = ExperimentConfig::standard();
        c.teacher.text_stage.warmup_fraction = 1.0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ExperimentConfig::standard();
        c.distill.alphas.push(1.5);
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
