//! The student recogniser and the two teacher language models.

mod seq2seq;
mod transformer;

pub use seq2seq::{
    additive_attention, lstm_step, DecoderState, EncodedFrames, EncoderOutput, LstmState, Seq2SeqConfig, Seq2SeqModel, StepOutput,
};
pub use transformer::{LmMode, TransformerConfig, TransformerLm};
