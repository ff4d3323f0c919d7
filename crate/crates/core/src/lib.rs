//! Joint detection of arousals (Ar), limb movements (LM) and sleep-disordered
//! breathing (SDB) in polysomnography records.
//!
//! The pipeline runs signal conditioning, default-window detection geometry,
//! a split-stream recurrent network with additive attention, a three-part
//! detection loss with hard negative mining, Adam training and event-level
//! evaluation. A synthetic record generator with planted events provides
//! ground truth for end-to-end checks.
//!
//! Numerical code (filters, network, loss, optimizer) is generic over
//! [`Scalar`]; concrete `f32`/`f64` aliases are exported below.

pub mod conditioning;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod network;
pub mod parallel;
pub mod sampler;
pub mod scalar;
pub mod signal_io;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use signal_io::{Event, EventClass, Record};

/// Network parameters in single precision, the training default.
pub type Params32 = network::Params<f32>;
/// Network parameters in double precision, used for gradient checks.
pub type Params64 = network::Params<f64>;
pub type NetworkOutput32 = network::NetworkOutput<f32>;
pub type NetworkOutput64 = network::NetworkOutput<f64>;
pub type Adam32 = training::AdamState<f32>;
pub type Adam64 = training::AdamState<f64>;
pub type SosFilter64 = conditioning::FilterCoeffs<f64>;
