//! Predictive attention for event cameras.
//!
//! The crate covers the whole loop: synthetic DVS data ([`synth`]), the event
//! frame model and AER codec ([`events`]), event-frame similarity measures
//! ([`metrics`]), a spiking substrate with surrogate-gradient BPTT ([`snn`]),
//! the hybrid SNN/ANN next-frame [`predictor`], the score-estimating
//! [`evaluator`], and the closed-loop sensor gate in [`attention`].

pub mod attention;
pub mod error;
pub mod evaluator;
pub mod events;
pub mod metrics;
pub mod predictor;
pub mod rng;
pub mod snn;
pub mod synth;

pub use error::{Error, Result};
pub use events::{Event, EventFrame, FrameSequence, Geometry, Polarity};
