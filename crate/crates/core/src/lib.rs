//! Multimodal fusion of instrumented walking sessions.
//!
//! Streams from a session (GPS, visual odometry, eye tracking, wearable
//! physiology, foot IMUs, video-derived walkway geometry) are parsed onto a
//! common clock, registered to geographic coordinates, analyzed per modality
//! and fused into route segments carrying per-segment metrics and hotspot
//! flags.

// `!(x > 0.0)` is used on purpose so NaN fails range checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;

pub mod fusion;
pub mod gait;
pub mod gaze;
pub mod geo;
pub mod ingest;
pub mod manifest;
pub mod model;
pub mod par;
pub mod params;
pub mod physio;
pub mod pipeline;
pub mod synth;
pub mod walkway;

pub use error::{Error, Result};
pub use manifest::{parse_manifest, SessionManifest, StreamKind};
pub use model::{Duration, SampleSeries, Timestamp};
pub use params::Parameters;
