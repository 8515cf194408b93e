//! Partial concept bottleneck (PCB) risk models for longitudinal coded records.
//!
//! The crate is organized bottom-up:
//!
//! * [`synth`] generates cohorts with a planted stratum/concept/outcome structure and
//!   encodes records into token sequences.
//! * [`autograd`] provides tensors, a reverse-mode tape and the Adam optimizer.
//! * [`encoder`] is the hierarchical sliding-window transformer.
//! * [`bottleneck`] holds the concept head, the Gumbel-Softmax quantizer and the
//!   risk classifier over concepts and discrete latents.
//! * [`model`] wires the encoder to either the bottleneck or a black-box head.
//! * [`trainer`] runs optimization, early stopping, metrics and checkpoints.
//! * [`counterfactual`] assigns latent clusters and answers `do(c)` queries.

pub mod autograd;
pub mod bottleneck;
pub mod concept;
pub mod counterfactual;
pub mod encoder;
pub mod error;
pub mod model;
pub mod rng;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
