use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use distil_asr::corpus::CorpusSpec;
use distil_asr::distillation::ContextSize;
use distil_asr::harness::experiment::{prepare_experiment, run_matrix_prepared, write_matrix_outputs};
use distil_asr::harness::pipeline::{self, DecodeOptions, Split};
use distil_asr::harness::{ExperimentConfig, ExperimentMatrix, MatrixReport};
use distil_asr::models::LmMode;
use distil_asr::{Error, Result};

#[derive(Parser)]
#[command(name = "distil-asr", version, about = "Synthetic-corpus ASR with LM distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Experiment config file (TOML).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Named preset: standard, desk or full.
    #[arg(long)]
    preset: Option<String>,
}

impl ConfigArgs {
    /// Explicit file, then preset, then the config stored next to `fallback`, then `standard`.
    fn resolve(&self, fallback: Option<&Path>) -> Result<ExperimentConfig> {
        if let Some(p) = &self.config {
            return ExperimentConfig::from_toml(&fs::read_to_string(p)?);
        }
        if let Some(name) = &self.preset {
            return ExperimentConfig::preset(name);
        }
        if let Some(dir) = fallback {
            let stored = dir.join("config.toml");
            if stored.exists() {
                return ExperimentConfig::from_toml(&fs::read_to_string(stored)?);
            }
        }
        Ok(ExperimentConfig::standard())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    GenCorpus {
        /// Corpus spec file (TOML); defaults to the config's corpus section.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the BPE vocabulary on the text and training splits.
    TrainBpe {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Pre-train a causal or masked transformer LM teacher.
    PretrainTeacher {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// mlm or causal
        #[arg(long, default_value = "mlm")]
        kind: String,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Precompute teacher soft labels for the training split.
    DistillLabels {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        /// `utterance` or a token window size.
        #[arg(long, default_value = "utterance")]
        context: String,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the attention seq2seq ASR model, optionally with soft labels.
    TrainAsr {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0.0)]
        alpha: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Beam-search decode a split, with optional fusion or rescoring LM.
    Decode {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 5)]
        beam: usize,
        #[arg(long)]
        fusion_lm: Option<PathBuf>,
        #[arg(long)]
        rescore_lm: Option<PathBuf>,
        #[arg(long, default_value_t = 0.0)]
        lm_weight: f64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score a decode output against the references.
    Evaluate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        decode: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value = "system")]
        system: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run the full experiment matrix end to end.
    RunMatrix {
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seeds overriding the config.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Only train and evaluate the baseline.
        #[arg(long)]
        baseline_only: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Regenerate CSV and text tables from a run-matrix directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

fn parse_kind(s: &str) -> Result<LmMode> {
    match s {
        "mlm" => Ok(LmMode::Mlm),
        "causal" => Ok(LmMode::Causal),
        other => Err(Error::Usage(format!("unknown teacher kind `{other}` (mlm or causal)"))),
    }
}

fn parse_context(s: &str) -> Result<ContextSize> {
    if s == "utterance" {
        return Ok(ContextSize::Utterance);
    }
    s.parse::<usize>()
        .map(ContextSize::Window)
        .map_err(|_| Error::Usage(format!("context must be `utterance` or a window size, got `{s}`")))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus { spec, seed, out, cfg } => {
            let mut config = cfg.resolve(None)?;
            if let Some(p) = spec {
                let corpus: CorpusSpec =
                    toml::from_str(&fs::read_to_string(p)?).map_err(|e| Error::Config(e.to_string()))?;
                config.corpus = corpus;
            }
            if let Some(s) = seed {
                config.corpus_seed = s;
            }
            pipeline::gen_corpus(&config, &out)?;
            eprintln!("corpus written to {}", out.display());
        }
        Command::TrainBpe { corpus, out, cfg } => {
            let config = cfg.resolve(Some(&corpus))?;
            let vocab = pipeline::train_bpe(&config, &corpus, &out)?;
            eprintln!("vocabulary of {} pieces written to {}", vocab.len(), out.display());
        }
        Command::PretrainTeacher { corpus, vocab, kind, window, out, cfg } => {
            let config = cfg.resolve(Some(&corpus))?;
            let window = window.unwrap_or(config.teacher.window);
            let acc = pipeline::pretrain_teacher_stage(&config, &corpus, &vocab, parse_kind(&kind)?, window, &out)?;
            eprintln!("teacher dev accuracy {:.2}%", 100.0 * acc);
        }
        Command::DistillLabels { corpus, vocab, teacher, context, temperature, out, cfg } => {
            let config = cfg.resolve(Some(&corpus))?;
            pipeline::distill_labels_stage(&config, &corpus, &vocab, &teacher, parse_context(&context)?, temperature, &out)?;
            eprintln!("soft labels written to {}", out.display());
        }
        Command::TrainAsr { corpus, vocab, labels, temperature, alpha, seed, out, cfg } => {
            let config = cfg.resolve(Some(&corpus))?;
            let dev = pipeline::train_asr_stage(&config, &corpus, &vocab, labels.as_deref(), temperature, alpha, seed, &out)?;
            for (epoch, wer) in dev.iter().enumerate() {
                eprintln!("epoch {} dev WER {:.2}%", epoch + 1, 100.0 * wer);
            }
        }
        Command::Decode { corpus, vocab, model, split, beam, fusion_lm, rescore_lm, lm_weight, out, cfg } => {
            let config = cfg.resolve(Some(&corpus))?;
            let opts = DecodeOptions {
                split: split.parse::<Split>()?,
                beam,
                fusion_lm: fusion_lm.as_deref(),
                rescore_lm: rescore_lm.as_deref(),
                lm_weight,
            };
            let n = pipeline::decode_stage(&config, &corpus, &vocab, &model, &opts, &out)?;
            eprintln!("decoded {n} utterances");
        }
        Command::Evaluate { corpus, decode, split, system, out, cfg } => {
            let config = cfg.resolve(Some(&corpus))?;
            let row = pipeline::evaluate_stage(&config, &corpus, &decode, split.parse()?, &system, &out)?;
            println!("{} {} WER {:.2}%", row.system, row.split, 100.0 * row.counts.wer());
        }
        Command::RunMatrix { out, seeds, baseline_only, cfg } => {
            let mut config = cfg.resolve(None)?;
            if let Some(s) = seeds {
                config.matrix.seeds = s;
            }
            let matrix = if baseline_only {
                ExperimentMatrix::baseline_only(config.matrix.seeds.clone())
            } else {
                ExperimentMatrix::from_config(&config)
            };
            let prep = prepare_experiment(&config)?;
            let (report, artifacts) = run_matrix_prepared(&config, &prep, &matrix, &mut |line| eprintln!("{line}"))?;
            write_matrix_outputs(&out, &config, &prep, &report, &artifacts)?;
            print!("{}", report.table1_text());
            if !report.lm_rows.is_empty() {
                print!("\n{}", report.lm_comparison_text());
            }
        }
        Command::Report { run } => {
            let path = pipeline::require(&run.join("report.json"), "run-matrix")?;
            let report: MatrixReport = serde_json::from_str(&fs::read_to_string(path)?)?;
            fs::write(run.join("results.csv"), report.results_csv())?;
            fs::write(run.join("summary.csv"), report.summary_csv())?;
            fs::write(run.join("table1.txt"), report.table1_text())?;
            print!("{}", report.table1_text());
            if report.rows.iter().any(|r| r.table == "table2") {
                fs::write(run.join("table2.txt"), report.table2_text())?;
                print!("\n{}", report.table2_text());
            }
            if !report.lm_rows.is_empty() {
                fs::write(run.join("lm_comparison.csv"), report.lm_comparison_csv())?;
                fs::write(run.join("lm_comparison.txt"), report.lm_comparison_text())?;
                print!("\n{}", report.lm_comparison_text());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
