//! Distortion-risk pricing with protected covariates: sensitivities of a
//! premium to protected covariates and the nearest measures (in KL) that
//! remove them.

pub mod barycentre;
pub mod dataset;
pub mod distortion;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod oracle;
pub mod rng;
pub mod scenario;
pub mod sensitivity;
pub mod solver;
pub mod special;
pub mod stats;
pub mod tilt;

pub use distortion::{DistortionWeight, MeasureWeights, Normalization};
pub use engine::{BarycentreSweep, EngineConfig, MeasureSpec};
pub use error::{Divergence, Error, Result};
pub use metrics::{build_xgrid, NodeResult, SensitivityReport, XGrid};
pub use scenario::{ConditionalSampleSet, Dataset, RankMode, Scenario};
pub use sensitivity::PhiMatrix;
pub use solver::SolverOptions;
pub use tilt::{BinScheme, TiltParameters, TiltedMeasure};
