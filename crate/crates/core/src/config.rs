//! Flat TOML run configuration: source parameters plus analysis settings.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::correlator::LagRange;
use crate::error::{Error, Result};
use crate::simulator::{SourceParams, NATURAL_LINEWIDTH_MHZ};
use crate::spectro::{LossBudget, DEFAULT_CAVITY_FWHM_MHZ};
use crate::timetag::{ns_to_ps, DutyCycle};

/// Preset describing the cold-atom source at OD 32 with its original
/// detection chain.
pub const REFERENCE_PRESET: &str = include_str!("../presets/paper.toml");

/// Everything a verb needs. Keys not listed here are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub wall_duration_s: f64,

    pub mean_pairs_per_mode: f64,
    pub mode_duration_ns: f64,
    pub optical_density: f64,
    pub superradiance_slope: f64,
    pub natural_linewidth_mhz: f64,
    pub signal_path_efficiency: f64,
    pub idler_path_efficiency: f64,
    pub beamsplitter_ratio: f64,
    pub dark_count_rates: [f64; 4],
    pub jitter_sigma_ns: f64,
    pub uncorrelated_singles_rates: [f64; 2],
    pub background_linewidth_mhz: f64,
    pub idler_center_frequency_offset_mhz: f64,
    pub duty_on_ms: f64,
    pub duty_off_ms: f64,

    pub bin_width_ns: f64,
    pub lag_min_ns: f64,
    pub lag_max_ns: f64,
    pub coincidence_window_ns: f64,
    /// Upper end of the exponential fit window, starting at zero lag.
    pub fit_max_lag_ns: f64,
    /// Lag region whose mean g² fixes the baseline B of the exponential fit.
    pub baseline_window_ns: [f64; 2],

    pub hbt_bin_width_ns: f64,
    pub hbt_max_lag_ns: f64,
    /// Bins with |τ| below this enter the bunching fit.
    pub hbt_fit_max_lag_ns: f64,
    /// |τ| region whose mean g² fixes the background C of the bunching fit.
    pub hbt_baseline_window_ns: [f64; 2],
    /// Independent runs of `wall_duration_s` pooled into each autocorrelation.
    pub hbt_runs: u32,

    pub cavity_fwhm_mhz: f64,
    pub scan_min_mhz: f64,
    pub scan_max_mhz: f64,
    pub scan_step_mhz: f64,
    /// Wall time per scan point.
    pub scan_dwell_s: f64,

    pub filter_loss: f64,
    pub optics_loss: f64,
    pub detector_loss: f64,
    pub polarizer_loss: f64,
    pub fiber_loss: f64,

    pub superradiance_ods: Vec<f64>,
    pub superradiance_wall_s: f64,
    /// First lag used when extracting τ₀ at each OD; skips the jitter-smeared bins.
    pub superradiance_fit_start_ns: f64,

    /// Directory for reports and CSV files, relative to the working directory.
    pub output_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = SourceParams::default();
        let budget = LossBudget::default();
        RunConfig {
            seed: 1,
            wall_duration_s: 611.0,
            mean_pairs_per_mode: s.mean_pairs_per_mode,
            mode_duration_ns: s.mode_duration_ns,
            optical_density: s.optical_density,
            superradiance_slope: s.superradiance_slope,
            natural_linewidth_mhz: NATURAL_LINEWIDTH_MHZ,
            signal_path_efficiency: s.signal_path_efficiency,
            idler_path_efficiency: s.idler_path_efficiency,
            beamsplitter_ratio: s.beamsplitter_ratio,
            dark_count_rates: s.dark_count_rates,
            jitter_sigma_ns: s.jitter_sigma_ns,
            uncorrelated_singles_rates: s.uncorrelated_singles_rates,
            background_linewidth_mhz: s.background_linewidth_mhz,
            idler_center_frequency_offset_mhz: s.idler_center_frequency_offset_mhz,
            duty_on_ms: 1.0,
            duty_off_ms: 12.0,
            bin_width_ns: 1.0,
            lag_min_ns: -1000.0,
            lag_max_ns: 1000.0,
            coincidence_window_ns: 30.0,
            fit_max_lag_ns: 125.0,
            baseline_window_ns: [125.0, 1000.0],
            hbt_bin_width_ns: 10.0,
            hbt_max_lag_ns: 500.0,
            hbt_fit_max_lag_ns: 100.0,
            hbt_baseline_window_ns: [300.0, 500.0],
            hbt_runs: 8,
            cavity_fwhm_mhz: DEFAULT_CAVITY_FWHM_MHZ,
            scan_min_mhz: -50.0,
            scan_max_mhz: 50.0,
            scan_step_mhz: 2.0,
            scan_dwell_s: 13.0,
            filter_loss: budget.filter_loss,
            optics_loss: budget.optics_loss,
            detector_loss: budget.detector_loss,
            polarizer_loss: budget.polarizer_loss,
            fiber_loss: budget.fiber_loss,
            superradiance_ods: vec![4.0, 8.0, 16.0, 24.0, 32.0],
            superradiance_wall_s: 611.0,
            superradiance_fit_start_ns: 3.0,
            output_dir: "out".into(),
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} = {v} must be > 0")))
    }
}

impl RunConfig {
    pub fn reference() -> Self {
        Self::from_toml_str(REFERENCE_PRESET).expect("shipped preset is valid")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn duty(&self) -> DutyCycle {
        DutyCycle {
            on_ps: ns_to_ps(self.duty_on_ms * 1e6),
            off_ps: ns_to_ps(self.duty_off_ms * 1e6),
            phase_ps: 0,
        }
    }

    pub fn source_params(&self) -> SourceParams {
        SourceParams {
            mean_pairs_per_mode: self.mean_pairs_per_mode,
            mode_duration_ns: self.mode_duration_ns,
            optical_density: self.optical_density,
            superradiance_slope: self.superradiance_slope,
            natural_linewidth_mhz: self.natural_linewidth_mhz,
            signal_path_efficiency: self.signal_path_efficiency,
            idler_path_efficiency: self.idler_path_efficiency,
            beamsplitter_ratio: self.beamsplitter_ratio,
            dark_count_rates: self.dark_count_rates,
            jitter_sigma_ns: self.jitter_sigma_ns,
            uncorrelated_singles_rates: self.uncorrelated_singles_rates,
            background_linewidth_mhz: self.background_linewidth_mhz,
            idler_center_frequency_offset_mhz: self.idler_center_frequency_offset_mhz,
            duty: self.duty(),
        }
    }

    pub fn lag_range(&self) -> Result<LagRange> {
        LagRange::from_ns(self.lag_min_ns, self.lag_max_ns, self.bin_width_ns)
    }

    /// Symmetric autocorrelation range.
    pub fn hbt_range(&self) -> Result<LagRange> {
        LagRange::from_ns(-self.hbt_max_lag_ns, self.hbt_max_lag_ns, self.hbt_bin_width_ns)
    }

    pub fn coincidence_window_ps(&self) -> u64 {
        ns_to_ps(self.coincidence_window_ns)
    }

    pub fn loss_budget(&self) -> LossBudget {
        LossBudget {
            filter_loss: self.filter_loss,
            optics_loss: self.optics_loss,
            detector_loss: self.detector_loss,
            polarizer_loss: self.polarizer_loss,
            fiber_loss: self.fiber_loss,
        }
    }

    /// Cavity detunings from `scan_min_mhz` to `scan_max_mhz` inclusive.
    pub fn scan_detunings(&self) -> Vec<f64> {
        let n = ((self.scan_max_mhz - self.scan_min_mhz) / self.scan_step_mhz + 1e-9).floor() as usize;
        (0..=n)
            .map(|i| self.scan_min_mhz + i as f64 * self.scan_step_mhz)
            .collect()
    }

    /// Checks every field so no verb starts work on a bad configuration.
    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| match e {
            Error::InvalidArgument(m) => Error::Config(m),
            other => other,
        };
        positive("wall_duration_s", self.wall_duration_s)?;
        for (name, v) in [("duty_on_ms", self.duty_on_ms), ("duty_off_ms", self.duty_off_ms)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} = {v} must be >= 0")));
            }
        }
        self.source_params().validate().map_err(cfg)?;
        let range = self.lag_range().map_err(cfg)?;
        if range.min_ps > 0 || range.max_ps <= 0 {
            return Err(Error::Config("lag range must include zero lag".into()));
        }
        self.hbt_range().map_err(cfg)?;
        positive("coincidence_window_ns", self.coincidence_window_ns)?;
        if self.coincidence_window_ns > self.lag_max_ns {
            return Err(Error::Config(
                "coincidence_window_ns exceeds lag_max_ns".into(),
            ));
        }
        positive("fit_max_lag_ns", self.fit_max_lag_ns)?;
        if self.fit_max_lag_ns > self.lag_max_ns {
            return Err(Error::Config("fit_max_lag_ns exceeds lag_max_ns".into()));
        }
        let [b0, b1] = self.baseline_window_ns;
        if !(b0 >= 0.0 && b1 > b0 && b1 <= self.lag_max_ns) {
            return Err(Error::Config(format!(
                "baseline_window_ns [{b0}, {b1}] must be an increasing window inside the lag range"
            )));
        }
        positive("hbt_fit_max_lag_ns", self.hbt_fit_max_lag_ns)?;
        let [h0, h1] = self.hbt_baseline_window_ns;
        if !(h0 >= 0.0 && h1 > h0 && h1 <= self.hbt_max_lag_ns) {
            return Err(Error::Config(format!(
                "hbt_baseline_window_ns [{h0}, {h1}] must be an increasing window inside the autocorrelation range"
            )));
        }
        if self.hbt_runs == 0 {
            return Err(Error::Config("hbt_runs must be >= 1".into()));
        }
        positive("cavity_fwhm_mhz", self.cavity_fwhm_mhz)?;
        positive("scan_step_mhz", self.scan_step_mhz)?;
        positive("scan_dwell_s", self.scan_dwell_s)?;
        if !(self.scan_max_mhz > self.scan_min_mhz) {
            return Err(Error::Config("scan_max_mhz must exceed scan_min_mhz".into()));
        }
        if self.scan_detunings().len() < 6 {
            return Err(Error::Config("scan needs at least 6 points".into()));
        }
        self.loss_budget().validate().map_err(cfg)?;
        if self.superradiance_ods.iter().any(|o| !(*o >= 0.0)) {
            return Err(Error::Config("superradiance_ods must be >= 0".into()));
        }
        positive("superradiance_wall_s", self.superradiance_wall_s)?;
        if !(self.superradiance_fit_start_ns >= 0.0
            && self.superradiance_fit_start_ns < self.fit_max_lag_ns)
        {
            return Err(Error::Config(
                "superradiance_fit_start_ns must lie in [0, fit_max_lag_ns)".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_parses() {
        let cfg = RunConfig::reference();
        assert_eq!(cfg.optical_density, 32.0);
        assert_eq!(cfg.bin_width_ns, 1.0);
        assert_eq!(cfg.coincidence_window_ns, 30.0);
        assert_eq!(cfg.cavity_fwhm_mhz, 2.8);
        assert_eq!(cfg.duty(), DutyCycle::default());
        let tau = cfg.source_params().tau0_s() * 1e9;
        assert!((tau - 6.686).abs() < 1e-3, "{tau}");
    }

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_toml_str("seed = 3\nmean_pairs = 0.1\n").unwrap_err();
        assert_eq!(err.kind(), "config");
    }

    #[test]
    fn partial_file_uses_defaults() {
        let cfg = RunConfig::from_toml_str("optical_density = 8.0").unwrap();
        assert_eq!(cfg.optical_density, 8.0);
        assert_eq!(cfg.seed, RunConfig::default().seed);
    }

    #[test]
    fn invalid_values_rejected() {
        for text in [
            "signal_path_efficiency = 1.5",
            "bin_width_ns = 0.0",
            "lag_min_ns = -10.0\nlag_max_ns = 5.5",
            "coincidence_window_ns = 2000.0",
            "hbt_runs = 0",
            "fiber_loss = 1.0",
            "scan_step_mhz = 40.0",
            "duty_on_ms = 0.0",
            "baseline_window_ns = [500.0, 200.0]",
            "hbt_baseline_window_ns = [400.0, 900.0]",
        ] {
            let err = RunConfig::from_toml_str(text).unwrap_err();
            assert_eq!(err.kind(), "config", "{text}");
        }
    }

    #[test]
    fn scan_grid_inclusive() {
        let cfg = RunConfig::default();
        let d = cfg.scan_detunings();
        assert_eq!(d.len(), 51);
        assert_eq!(d[0], -50.0);
        assert_eq!(*d.last().unwrap(), 50.0);
    }
}
