//! Scanning Fabry-Perot analysis: Lorentzian deconvolution of cavity scans,
//! loss-corrected subtraction of the heralded from the unheralded spectrum,
//! and the transform-limit product.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitting::{lm_fit, poisson_weights, FitResult};

pub const DEFAULT_CAVITY_FWHM_MHZ: f64 = 2.8;

/// Unit-peak Lorentzian of full width `fwhm` centred on `center`.
pub fn lorentzian(x: f64, center: f64, fwhm: f64) -> f64 {
    let u = 2.0 * (x - center) / fwhm;
    1.0 / (1.0 + u * u)
}

/// Counts recorded at each cavity detuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumScan {
    pub detunings_mhz: Vec<f64>,
    /// Counts per point. Stored as reals so loss-corrected spectra fit here too.
    pub counts: Vec<f64>,
    /// Wall time spent at each point.
    pub dwell_s: f64,
    pub cavity_fwhm_mhz: f64,
    pub heralded: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScanMeta {
    dwell_s: f64,
    cavity_fwhm_mhz: f64,
    heralded: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct ScanRow {
    detuning_mhz: f64,
    counts: f64,
}

impl SpectrumScan {
    pub fn new(
        detunings_mhz: Vec<f64>,
        counts: Vec<f64>,
        dwell_s: f64,
        cavity_fwhm_mhz: f64,
        heralded: bool,
    ) -> Result<Self> {
        if detunings_mhz.len() != counts.len() {
            return Err(Error::arg(format!(
                "{} detunings but {} counts",
                detunings_mhz.len(),
                counts.len()
            )));
        }
        if detunings_mhz.iter().any(|d| !d.is_finite()) {
            return Err(Error::arg("detunings must be finite"));
        }
        if detunings_mhz.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::arg("detunings must be strictly increasing"));
        }
        if counts.iter().any(|c| !(*c >= 0.0 && c.is_finite())) {
            return Err(Error::arg("counts must be finite and >= 0"));
        }
        if !(cavity_fwhm_mhz > 0.0 && cavity_fwhm_mhz.is_finite()) {
            return Err(Error::arg(format!(
                "cavity FWHM {cavity_fwhm_mhz} MHz must be > 0"
            )));
        }
        if !(dwell_s > 0.0 && dwell_s.is_finite()) {
            return Err(Error::arg(format!("dwell {dwell_s} s must be > 0")));
        }
        Ok(SpectrumScan {
            detunings_mhz,
            counts,
            dwell_s,
            cavity_fwhm_mhz,
            heralded,
        })
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn total_counts(&self) -> f64 {
        self.counts.iter().sum()
    }

    /// Metadata file written next to the CSV: same stem, `.json` extension.
    pub fn sidecar_path(csv_path: &Path) -> PathBuf {
        csv_path.with_extension("json")
    }

    /// Writes `detuning_mhz,counts` rows and the JSON sidecar.
    pub fn write(&self, csv_path: impl AsRef<Path>) -> Result<()> {
        let csv_path = csv_path.as_ref();
        let mut w = csv::Writer::from_path(csv_path)?;
        for (&detuning_mhz, &counts) in self.detunings_mhz.iter().zip(&self.counts) {
            w.serialize(ScanRow {
                detuning_mhz,
                counts,
            })?;
        }
        w.flush()?;
        let meta = ScanMeta {
            dwell_s: self.dwell_s,
            cavity_fwhm_mhz: self.cavity_fwhm_mhz,
            heralded: self.heralded,
        };
        std::fs::write(
            Self::sidecar_path(csv_path),
            serde_json::to_string_pretty(&meta)?,
        )?;
        Ok(())
    }

    pub fn read(csv_path: impl AsRef<Path>) -> Result<Self> {
        let csv_path = csv_path.as_ref();
        let meta: ScanMeta =
            serde_json::from_str(&std::fs::read_to_string(Self::sidecar_path(csv_path))?)?;
        let mut detunings = Vec::new();
        let mut counts = Vec::new();
        for row in csv::Reader::from_path(csv_path)?.deserialize() {
            let row: ScanRow = row?;
            detunings.push(row.detuning_mhz);
            counts.push(row.counts);
        }
        SpectrumScan::new(
            detunings,
            counts,
            meta.dwell_s,
            meta.cavity_fwhm_mhz,
            meta.heralded,
        )
    }
}

/// Fractional losses between the source and the detectors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossBudget {
    pub filter_loss: f64,
    pub optics_loss: f64,
    pub detector_loss: f64,
    pub polarizer_loss: f64,
    pub fiber_loss: f64,
}

impl Default for LossBudget {
    fn default() -> Self {
        LossBudget {
            filter_loss: 0.11,
            optics_loss: 0.07,
            detector_loss: 0.60,
            polarizer_loss: 0.12,
            fiber_loss: 0.30,
        }
    }
}

impl LossBudget {
    fn losses(&self) -> [f64; 5] {
        [
            self.filter_loss,
            self.optics_loss,
            self.detector_loss,
            self.polarizer_loss,
            self.fiber_loss,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.losses().iter().any(|l| !(0.0..1.0).contains(l)) {
            return Err(Error::arg("every loss must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Combined transmission Π(1 − lossᵢ).
    pub fn transmission(&self) -> f64 {
        self.losses().iter().map(|l| 1.0 - l).product()
    }
}

/// Observed profile: `baseline + amplitude·L(ν; center, photon_fwhm + cavity_fwhm)`.
///
/// Parameters are `[amplitude, center, photon_fwhm, baseline]`.
pub fn scan_model(p: &[f64], detuning: f64, cavity_fwhm_mhz: f64) -> f64 {
    p[3] + p[0] * lorentzian(detuning, p[1], p[2] + cavity_fwhm_mhz)
}

pub const SCAN_PARAMS: [&str; 4] = ["amplitude", "center", "photon_fwhm", "baseline"];

/// Fits the scan and returns the deconvolved photon linewidth.
///
/// A Lorentzian seen through a Lorentzian cavity is again Lorentzian with the
/// two widths added, so the cavity width is subtracted inside the model.
/// Weights are 1/max(count, 1).
pub fn fit_scan(scan: &SpectrumScan) -> Result<FitResult> {
    if scan.len() < 6 {
        return Err(Error::arg(format!(
            "scan fit needs at least 6 points, got {}",
            scan.len()
        )));
    }
    let x = &scan.detunings_mhz;
    let y = &scan.counts;
    let cavity = scan.cavity_fwhm_mhz;

    let (peak_i, &peak) = y
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty");
    let baseline = y.iter().copied().fold(f64::INFINITY, f64::min);
    let amplitude = peak - baseline;
    let half = baseline + amplitude / 2.0;
    let left = (0..peak_i)
        .rev()
        .find(|&i| y[i] < half)
        .map_or(x[0], |i| x[i]);
    let right = (peak_i..y.len())
        .find(|&i| y[i] < half)
        .map_or(x[x.len() - 1], |i| x[i]);
    let observed = (right - left).max(x[1] - x[0]);
    let photon = (observed - cavity).max(observed / 4.0);
    let p0 = [amplitude.max(1.0), x[peak_i], photon, baseline];

    let model = |p: &[f64], d: f64| scan_model(p, d, cavity);
    let mut fit = lm_fit(&model, x, y, &poisson_weights(y), &p0)?;
    fit.names = SCAN_PARAMS.iter().map(|s| s.to_string()).collect();
    // the width enters squared, so report its magnitude
    if fit.params[2] + cavity < 0.0 {
        fit.params[2] = -fit.params[2] - 2.0 * cavity;
    }
    Ok(fit)
}

/// Result of subtracting the loss-corrected heralded spectrum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncoherentSpectrum {
    pub scan: SpectrumScan,
    /// Points whose difference came out negative and were set to zero.
    pub clamped: Vec<usize>,
}

/// `unheralded − heralded / transmission`, point by point.
pub fn incoherent_spectrum(
    unheralded: &SpectrumScan,
    heralded: &SpectrumScan,
    budget: &LossBudget,
) -> Result<IncoherentSpectrum> {
    budget.validate()?;
    if unheralded.detunings_mhz != heralded.detunings_mhz {
        return Err(Error::GridMismatch("detuning grids differ".into()));
    }
    if unheralded.dwell_s != heralded.dwell_s {
        return Err(Error::GridMismatch(format!(
            "dwell {} s vs {} s",
            unheralded.dwell_s, heralded.dwell_s
        )));
    }
    let t = budget.transmission();
    let mut clamped = Vec::new();
    let counts = unheralded
        .counts
        .iter()
        .zip(&heralded.counts)
        .enumerate()
        .map(|(i, (u, h))| {
            let v = u - h / t;
            if v < 0.0 {
                clamped.push(i);
                0.0
            } else {
                v
            }
        })
        .collect();
    Ok(IncoherentSpectrum {
        scan: SpectrumScan::new(
            unheralded.detunings_mhz.clone(),
            counts,
            unheralded.dwell_s,
            unheralded.cavity_fwhm_mhz,
            false,
        )?,
        clamped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformLimit {
    /// Δν·2π·τ₀, exactly 1 for an exponential decay with Lorentzian spectrum.
    pub rho: f64,
    pub deviation: f64,
}

pub fn transform_limit_check(photon_fwhm_mhz: f64, tau0_ns: f64) -> Result<TransformLimit> {
    if !(photon_fwhm_mhz > 0.0 && tau0_ns > 0.0) {
        return Err(Error::arg("linewidth and decay time must be > 0"));
    }
    let rho = photon_fwhm_mhz * 1e6 * 2.0 * PI * tau0_ns * 1e-9;
    Ok(TransformLimit {
        rho,
        deviation: (rho - 1.0).abs(),
    })
}
