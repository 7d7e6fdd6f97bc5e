//! Level-K limit order book event modeling toolkit.
//!
//! The pipeline: replay exchange message files into a level-K book
//! ([`book`]), classify every message into the 6K+6 event taxonomy
//! ([`events`]), discretize the classified stream into bin-count /
//! liquidity-state / time-factor sequences ([`binning`]), estimate the
//! Hawkes excitement kernels plus liquidity- and time-dependent baseline
//! by binned least squares with optional LASSO ([`estimator`]), compare
//! model variants by multivariate AIC ([`selection`]), smooth and
//! aggregate the fits ([`postprocess`]), and validate everything against
//! a ground-truth thinning simulator ([`simulator`]).

pub mod binning;
pub mod book;
pub mod estimator;
pub mod events;
pub mod linalg;
pub mod postprocess;
pub mod selection;
pub mod simulator;

use std::fmt;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Scalar type the numeric core is generic over: `f32` or `f64`.
pub trait Real:
    Float + NumAssign + FromPrimitive + ToPrimitive + Sum + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("f64 conversion")
    }
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("f64 conversion")
    }
}

impl<T> Real for T where
    T: Float
        + NumAssign
        + FromPrimitive
        + ToPrimitive
        + Sum
        + Send
        + Sync
        + fmt::Debug
        + fmt::Display
        + 'static
{
}

/// Default scalar for the command-line pipeline.
pub type Scalar = f64;

pub type EstimatorSet = estimator::EstimatorSet<Scalar>;
pub type FitDiagnostics = estimator::FitDiagnostics<Scalar>;
pub type ModelFit = selection::ModelFit<Scalar>;
pub type SelectionReport = selection::SelectionReport<Scalar>;
pub type GroundTruth = simulator::GroundTruth<Scalar>;
pub type SmoothedKernel = postprocess::SmoothedKernel<Scalar>;
pub type AggregateSet = postprocess::AggregateSet<Scalar>;
