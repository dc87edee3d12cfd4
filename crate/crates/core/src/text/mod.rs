//! Caption tokenization, text encoders and distillation losses.

pub mod distill;
mod encoder;
mod vocab;

pub use encoder::{masked_mean_pool, TextEncoder, TextEncoderConfig, TextEncoderKind};
pub use vocab::{tokenize, TokenBatch, TokenRow, Vocabulary, MASK_ID, PAD_ID, SEP_ID, SEP_TOKEN, UNK_ID};
