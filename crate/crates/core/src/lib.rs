//! Gesture recognition from tabletop surface vibrations.
//!
//! The crate covers the whole data-to-model chain: band-pass filtering and
//! the other pre-processing blocks ([`dsp`]), robust onset detection and
//! annotation ([`detect`]), recording storage, windowing and split plans
//! ([`dataset`]), a depthwise-separable 1D CNN with a hand-written backward
//! pass ([`model`]), AdamW training and metrics ([`train`]), the joint
//! pre-processing/model grid search ([`search`]) and a synthetic vibration
//! generator with ground truth ([`synth`]).

pub mod block;
pub mod dataset;
pub mod detect;
pub mod dsp;
pub mod error;
pub mod gesture;
pub mod model;
pub mod pipeline;
pub mod search;
pub mod synth;
pub mod train;

pub use block::{ChunkedStream, SampleBlock};
pub use error::{Error, Result};
pub use gesture::{Gesture, GestureSet};
