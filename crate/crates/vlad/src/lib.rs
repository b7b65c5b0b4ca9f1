//! Vision-language adapters for a frozen decoder-only language model.
//!
//! The language model's weights stay fixed after pretraining. Images enter
//! the model as a short prefix of soft tokens produced by a trainable visual
//! encoder, and small adapter layers inside each transformer block give the
//! frozen backbone enough slack to integrate the new modality. Everything
//! trainable — encoder, prefix projection, adapters — is optimized with the
//! usual next-token cross-entropy on captioning data, while the base model
//! is byte-for-byte unchanged (and verified so).
//!
//! Modules, bottom-up:
//!
//! * [`tensor`] — tensors, reverse-mode autodiff, Adam, the MGT1 file format
//! * [`lm`] — byte-level tokenizer and the decoder-only transformer
//! * [`adapters`] — bottleneck adapters and their block wiring
//! * [`vision`] — PPM images, the conv encoder, and image-prefix builders
//! * [`model`] — assembled multimodal model with named parameters
//! * [`train`] — frozen/trainable partition, schedules, training loops
//! * [`eval`] — few-shot prompting, VQA accuracy, BLEU@4 captioning eval
//! * [`io`] — run config, checkpoints with CRC verification, manifests
//! * [`synth`] — deterministic synthetic datasets for tests and demos

pub mod adapters;
pub mod cli;
pub mod error;
pub mod eval;
pub mod io;
pub mod lm;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod vision;

pub use error::{Error, Result};
