//! Knowledge distillation from a masked-language-model teacher, with
//! cross-utterance context, into an attention-based encoder-decoder
//! speech recogniser, plus shallow-fusion and n-best rescoring baselines.

pub mod autodiff;
pub mod corpus;
pub mod decode_eval;
pub mod distillation;
pub mod error;
pub mod harness;
pub mod models;
pub mod tokenizer;

pub use error::{Error, Result};
