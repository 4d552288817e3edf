//! Transmit-side perturbation attacks on CSI-based wireless positioning.
//!
//! The crate is organized bottom-up:
//!
//! * [`ofdm`]: DFT kernels, convolutions, pilot-based channel estimation,
//!   the perturbation transfer function and the per-subcarrier rate.
//! * [`channel`]: a geometric multipath scene generator that produces
//!   position-labelled CSI datasets.
//! * [`diffgraph`]: a small reverse-mode differentiation tape over real
//!   matrices.
//! * [`features`]: the autocorrelation (F1) and delay-magnitude (F2) CSI
//!   features, as plain functions and as tape subgraphs.
//! * [`posnet`]: the probability-map positioning network, its training
//!   loop (with optional randomized adversarial training) and evaluation.
//! * [`attacks`]: white-box, transfer, pool and random perturbation
//!   generators.

pub mod attacks;
pub mod channel;
pub mod diffgraph;
pub mod error;
pub mod features;
pub mod ofdm;
pub mod posnet;
pub mod util;

pub use error::{Error, Result};
pub use num_complex::Complex64;
