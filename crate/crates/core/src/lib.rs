//! Globally linear predictors for exponentially stable nonlinear ODEs.
//!
//! The pipeline: learn an exact-inverse coupling-flow diffeomorphism between a
//! nonlinear system and its Jacobian linearization, build a library of
//! eigenfunctions of the nonlinear system from the principal eigenpairs of the
//! linearization, then predict trajectories with a lift / diagonal-LTI /
//! linear-reconstruction model. Generator-EDMD baselines with monomial and
//! radial-basis dictionaries are included for comparison.
//!
//! All numeric kernels are generic over the [`Scalar`] float type; the
//! aliases below pin the `f64` instantiations the experiment harness uses.

pub mod diffeo;
pub mod dynamics;
pub mod edmd;
pub mod eigen;
pub mod error;
pub mod flow;
pub mod harness;
pub mod io;
pub mod kefmd;
pub mod net;
pub mod scalar;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{cast, Scalar};

/// `f64` instantiations used by the CLI and the experiment presets.
pub type System64 = dynamics::VectorFieldSpec<f64>;
pub type Dataset64 = dynamics::TrajectoryDataset<f64>;
pub type Net64 = net::DenseNet<f64>;
pub type Flow64 = flow::FlowModel<f64>;
pub type Library64 = eigen::EigenfunctionLibrary<f64>;
pub type Model64 = kefmd::LiftedLTIModel<f64>;
pub type EdmdModel64 = edmd::GeneratorEDMDModel<f64>;
