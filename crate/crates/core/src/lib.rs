//! Time-tag simulation and correlation analysis for narrowband photon pairs
//! from a cascade decay in cold atoms.
//!
//! The crate covers the whole chain from a Monte Carlo source model to the
//! quantities that characterize such a source: cross- and autocorrelation functions,
//! pair rates and heralding efficiencies, the Cauchy-Schwarz ratio, cavity-scan
//! linewidths and the dependence of the decay rate on optical density.

pub mod config;
pub mod correlator;
pub mod error;
pub mod fitting;
pub mod format;
pub mod report;
pub mod simulator;
pub mod spectro;
pub mod timetag;

pub use correlator::{
    cauchy_schwarz, cross_correlation, cross_correlation_parallel, herald_select, heralding,
    normalize_g2, pair_rate, CorrelationHistogram, LagRange, PairStats,
};
pub use error::{Error, Result};
pub use fitting::{fit_exp_decay, fit_hbt, fit_superradiance, lm_fit, FitResult};
pub use format::{read_stream, write_stream, FormatError};
pub use simulator::{simulate_cavity_scan, simulate_run, superradiant_tau, SourceParams};
pub use spectro::{
    fit_scan, incoherent_spectrum, transform_limit_check, LossBudget, SpectrumScan,
};
pub use timetag::{filter_gated, DutyCycle, StreamHeader, TagStream, TimeTag};
