//! Expert-parallel MoE layer toolkit: routing and token maps, traffic
//! statistics, an analytical latency model with its autotuner, a discrete
//! event simulator of the fused dispatch/combine kernels and a bf16
//! reduction lab.

pub mod cli;
pub mod model;
pub mod perf;
pub mod precision;
pub mod scalar;
pub mod sim;
pub mod token_map;
pub mod traffic;
pub mod tune;

pub use model::{HardwareSpec, MoEShape, ModelError, RoutingInstance, TuneConfig};
pub use scalar::Scalar;

pub type Latency = perf::LatencyBreakdown<f64>;
pub type Latency32 = perf::LatencyBreakdown<f32>;
