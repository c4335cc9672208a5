//! Recognition heads and metrics: the shared CTC projection, the
//! Transformer decoder, the hybrid loss, beam search, and word error rate.

mod beam;
mod ctc;
mod decoder;
mod loss;
mod vocab;
mod wer;

pub use beam::{
    beam_search, beam_search_rescored, greedy_decode, Hypothesis, NoRescoring, Rescorer,
};
pub use ctc::{ctc_bruteforce, ctc_loss, ctc_nll_and_grad, ctc_required_frames, CtcProjection};
pub use decoder::{decoder_attention_loss, DecoderConfig, DecoderLayer, TransformerDecoder};
pub use loss::{check_ctc_weight, hybrid_loss, hybrid_value, LossReport};
pub use vocab::{Vocabulary, BLANK, EOS};
pub use wer::{edit_counts, wer, wer_str, EditCounts};
