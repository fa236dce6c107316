//! Joint causal-graph discovery and multi-step streamflow forecasting.
//!
//! The toolkit learns two graphs from data — an instantaneous DAG among
//! meteorological forcings and a lag-windowed routing DAG among river
//! stations — while training a graph-guided forecaster end to end. A
//! synthetic structural-causal-model generator provides ground truth so
//! every discovery and forecasting claim can be checked at desk scale.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod forecast;
pub mod graph;
pub mod linalg;
pub mod nn;
pub mod nwis;
pub mod pipeline;
pub mod plot;
pub mod rng;
pub mod repr;
pub mod scm;
pub mod train;
pub mod types;

pub use error::{Error, Result};
