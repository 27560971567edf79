//! Sound source localization on first-order ambisonics (FOA, B-format).
//!
//! The pipeline: short-time Fourier analysis of the 4-channel input
//! ([`dsp`]), per-bin acoustic intensity vectors whose directions point
//! toward the arriving sound ([`intensity`]), time-frequency masks and an
//! epsilon-vector subtraction that clean those vectors before they are
//! summed into per-frame direction estimates, a MUSIC baseline ([`music`]),
//! synthetic benchmark scenes with exact ground truth ([`scene`],
//! [`oracle`]), differentiable losses for fitting a small logistic refiner
//! ([`refine`]), and temporal post-processing plus evaluation metrics
//! ([`tracker`]).
//!
//! # B-format convention
//!
//! A plane wave carrying the mono signal `m` from azimuth `az` (counter-
//! clockwise from the +X axis, in [-pi, pi)) and elevation `el` (up
//! positive, in [-pi/2, pi/2]) encodes as
//!
//! ```text
//! W = m
//! X = m * cos(az) * cos(el)
//! Y = m * sin(az) * cos(el)
//! Z = m * sin(el)
//! ```
//!
//! so W carries pressure with unit gain (no 1/sqrt(2) factor) and X, Y, Z
//! are first-order real spherical harmonics with unit peak gain. Under
//! this convention the intensity vector Re(W* · [X, Y, Z]) of a single
//! plane wave points exactly along the source direction, which the tests
//! exploit. Real-world datasets often use SN3D or N3D scaling instead;
//! convert before feeding such material in, or directions will still be
//! right but channel energies will not satisfy X^2 + Y^2 + Z^2 = W^2.
//!
//! All angles are radians internally; file formats at the CLI boundary
//! use degrees.

pub mod dsp;
pub mod error;
pub mod geom;
pub mod intensity;
pub mod mel;
pub mod music;
pub mod oracle;
pub mod refine;
pub mod scene;
pub mod tracker;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
