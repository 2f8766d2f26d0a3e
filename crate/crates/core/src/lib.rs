//! Rejection-based detection of adversarial examples.
//!
//! The toolkit wires four pieces together:
//!
//! * a desk-scale feed-forward **backbone** with activation taps
//!   ([`backbone`]),
//! * **layer detectors** scoring how on-manifold a tapped representation
//!   looks for each class — SVM-RBF, k-NN, KDE, and prototype-budgeted RBF
//!   networks whose prototypes and bandwidths are trained jointly
//!   ([`detectors`]),
//! * a **combiner/rejector** assembling detector outputs into a defended
//!   classifier with a calibrated reject class ([`defended`]),
//! * a defense-aware **maximum-confidence attack** (projected gradient
//!   descent with exponential line search and bandwidth-smoothed surrogate
//!   gradients) plus the **security-curve** and prototype/latency benchmark
//!   harness ([`attack`], [`evaluation`]).
//!
//! Dataset ingestion, experiment configuration, and the full pipeline live
//! in [`data`], [`config`], and [`experiment`]; the `advrej` binary exposes
//! them as subcommands.

pub mod attack;
pub mod backbone;
pub mod config;
pub mod data;
pub mod defended;
pub mod detectors;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod fileio;
pub mod linalg;
pub mod rng;

pub use error::{Error, Result};
pub use linalg::{DenseMatrix, KernelConvention};
pub use rng::RngSeed;
