//! Multimodal video question answering with dual-level attention and
//! supervised frame-selection gates, built on a small reverse-mode
//! autodifferentiation tensor library.
//!
//! Layout:
//! - [`tensor`]: shapes, primitives, and the backward pass
//! - [`gradcheck`]: finite-difference verification of analytic gradients
//! - [`params`]: parameter construction / binding / checkpoint stores
//! - [`encoder`]: positional convolutional sequence encoders
//! - [`attention`]: word/object-level and frame-level attention
//! - [`fusion`]: multi-head self-attention across streams
//! - [`gates`]: frame-selection gates and the answer classifier
//! - [`losses`]: classification and frame-selection losses
//! - [`data`]: synthetic planted-evidence corpus and its audit oracle
//! - [`model`]: the assembled network
//! - [`train`]: Adam optimizer, training loop, checkpoints, evaluation
//! - [`ablate`]: ablation grid with paired bootstrap comparisons

pub mod ablate;
pub mod attention;
pub mod ctx;
pub mod data;
pub mod encoder;
pub mod fusion;
pub mod gates;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;
