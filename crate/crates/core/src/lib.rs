//! Event-camera time-to-collision estimation.
//!
//! The estimator fits a three-parameter affine flow model `a = nu / Z(t_ref)`
//! to raw events in two steps: a robust linear solver over per-event
//! normal-flow constraints, refined by registering warped events against a
//! linear time surface with Levenberg-Marquardt. TTC is the reciprocal of the
//! recovered divergence rate `a_z`.
//!
//! Modules follow the processing order: [`event`] ingestion, [`lts`]
//! rendering and sampling, [`normal_flow`] measurement, [`linear_solver`]
//! initialization, [`registration`] refinement, with [`simulator`], [`eval`]
//! and [`pipeline`] around them.

pub mod event;
pub mod eval;
pub mod linear_solver;
pub mod lts;
pub mod normal_flow;
pub mod pipeline;
pub mod registration;
pub mod simulator;

pub use event::{BoundingBox, CameraIntrinsics, Event, EventSlice};
pub use linear_solver::{AffineParams, FitResult, RansacConfig, Ttc};
pub use lts::{LinearTimeSurface, PixelWindow, SampledEventSet};
pub use normal_flow::{FlowConfig, NormalFlowMeasurement};
pub use pipeline::{PipelineConfig, PipelineOutput, Stage, TtcEstimate};
pub use registration::{LmConfig, RefineResult};
pub use simulator::{GroundTruth, SceneConfig};
