//! Task-oriented feature coding for multi-device cooperative edge
//! inference.
//!
//! A set of edge devices each observe one view of a sample. Every device
//! extracts a compact task-relevant feature (a variational information
//! bottleneck encoder), quantizes an encoded version of it to a few bits,
//! and ships those bits to a server that predicts the label. On top of the
//! one-shot coding path sits a selective-retransmission protocol: codes
//! are split into round-sized chunks, the server stops early once its
//! confidence clears a threshold, and learned attention gates decide which
//! devices retransmit in later rounds.
//!
//! The crate is desk-scale by design: dense `f64` layers, a tape autodiff
//! engine, deterministic seeded training, and an evaluation harness that
//! reports accuracy against transmitted bits alongside plug-in estimates
//! of the rate-relevance pair.

pub mod autodiff;
pub mod checkpoint;
// pub mod config;
pub mod data;
pub mod error;
// pub mod eval;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod params;
pub mod quantizer;
// pub mod records;
pub mod rng;
pub mod sim;
pub mod sr;
pub mod tensor;
pub mod vddib;
pub mod vib;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use params::ParamStore;
pub use quantizer::{QuantizedCode, QuantizerSpec};
pub use tensor::Tensor;
