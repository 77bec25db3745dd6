//! Analysis pipeline shared by the command-line verbs, and the full
//! reproduction report.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::correlator::{
    cauchy_schwarz, cross_correlation, cross_correlation_parallel, normalize_g2, pair_rate,
    CorrelationHistogram, LagRange,
};
use crate::error::{Error, Result};
use crate::fitting::{
    fit_exp_decay_with, fit_hbt_with, fit_superradiance, hbt_zero_lag, poisson_weights_scaled,
    Baseline, FitResult,
};
use crate::simulator::{seed_for, simulate_cavity_scan, simulate_run, SourceParams};
use crate::spectro::{fit_scan, incoherent_spectrum, transform_limit_check, SpectrumScan, TransformLimit};
use crate::timetag::{channel, TagStream, PS_PER_NS};

pub const SCHEMA_VERSION: u32 = 1;

// sub-seed streams, kept apart from the per-point scan seeds
const HBT_STREAM: u64 = 1 << 32;
const HERALDED_SCAN_STREAM: u64 = 2 << 32;
const UNHERALDED_SCAN_STREAM: u64 = 3 << 32;
const SWEEP_STREAM: u64 = 4 << 32;

fn chunks() -> usize {
    rayon::current_num_threads() * 4
}

/// Signal-idler cross-correlation with its exponential fit.
#[derive(Debug, Clone, Serialize)]
pub struct CrossAnalysis {
    #[serde(skip)]
    pub histogram: CorrelationHistogram,
    pub signal_rate: f64,
    pub idler_rate: f64,
    pub gated_time_s: f64,
    /// Mean g² over the baseline window, and its standard error.
    pub baseline: f64,
    pub baseline_err: f64,
    pub tau0_ns: f64,
    pub tau0_err_ns: f64,
    pub amplitude: f64,
    pub amplitude_err: f64,
    /// A + B, the fitted zero-lag value.
    pub g2_si_peak: f64,
    pub g2_si_peak_err: f64,
    /// Normalized value of the bin starting at zero lag.
    pub g2_first_bin: f64,
    pub fit: FitResult,
}

/// Mean of `values` over `lags` in `[from, to)`, with its standard error.
fn window_mean(lags: &[f64], values: &[f64], from: f64, to: f64) -> Result<(f64, f64)> {
    let vals: Vec<f64> = lags
        .iter()
        .zip(values)
        .filter(|(t, _)| **t >= from && **t < to)
        .map(|(_, g)| *g)
        .collect();
    if vals.len() < 2 {
        return Err(Error::arg(format!(
            "window [{from}, {to}) ns holds fewer than 2 bins"
        )));
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

/// Mean g² and its standard error over bins starting in `[from_ns, to_ns)`.
pub fn baseline_level(hist: &CorrelationHistogram, g2: &[f64], from_ns: f64, to_ns: f64) -> Result<(f64, f64)> {
    window_mean(&hist.lag_starts_ns(), g2, from_ns, to_ns)
}

/// Fits `B + A·exp(−τ/τ₀)` to bins starting in `[from_ns, to_ns)` with B held
/// at `baseline` and Poisson weights from the raw counts. Lags are left bin
/// edges.
pub fn fit_decay_window(
    hist: &CorrelationHistogram,
    g2: &[f64],
    from_ns: f64,
    to_ns: f64,
    baseline: (f64, f64),
) -> Result<FitResult> {
    let norm = hist.accidental_level();
    let weights_all = poisson_weights_scaled(&hist.counts, norm);
    let (mut lags, mut ys, mut ws) = (Vec::new(), Vec::new(), Vec::new());
    for ((t, g), w) in hist.lag_starts_ns().into_iter().zip(g2).zip(weights_all) {
        if t >= from_ns && t < to_ns {
            lags.push(t);
            ys.push(*g);
            ws.push(w);
        }
    }
    // the exponential model is defined from its first lag on
    let shift = lags.first().copied().unwrap_or(0.0);
    let shifted: Vec<f64> = lags.iter().map(|t| t - shift).collect();
    let mut fit = fit_exp_decay_with(
        &shifted,
        &ys,
        &ws,
        Baseline::Fixed {
            value: baseline.0,
            error: baseline.1,
        },
    )?;
    if shift != 0.0 {
        // refer the amplitude back to zero lag
        let tau = fit.params[2];
        let scale = (shift / tau).exp();
        fit.params[0] *= scale;
        fit.errors[0] *= scale;
        for v in fit.covariance[0].iter_mut() {
            *v *= scale;
        }
        for row in fit.covariance.iter_mut() {
            row[0] *= scale;
        }
    }
    Ok(fit)
}

pub fn analyze_cross(stream: &TagStream, cfg: &RunConfig) -> Result<CrossAnalysis> {
    let range = cfg.lag_range()?;
    let hist = cross_correlation_parallel(
        stream,
        &channel::SIGNAL,
        &channel::IDLER,
        range,
        stream.duty(),
        chunks(),
    )?;
    cross_from_histogram(hist, cfg, 0.0)
}

/// Exponential fit of a signal-idler histogram, starting at `fit_start_ns`.
pub fn cross_from_histogram(
    hist: CorrelationHistogram,
    cfg: &RunConfig,
    fit_start_ns: f64,
) -> Result<CrossAnalysis> {
    let g2 = normalize_g2(&hist)?;
    let [b0, b1] = cfg.baseline_window_ns;
    let (baseline, baseline_err) = baseline_level(&hist, &g2, b0, b1)?;
    let fit = fit_decay_window(&hist, &g2, fit_start_ns, cfg.fit_max_lag_ns, (baseline, baseline_err))?;
    let cov = &fit.covariance;
    let g2_si_peak = fit.params[0] + fit.params[1];
    let g2_si_peak_err = (cov[0][0] + cov[1][1] + 2.0 * cov[0][1]).max(0.0).sqrt();
    let zero = hist
        .lag_starts_ns()
        .iter()
        .position(|&t| t == 0.0)
        .map_or(f64::NAN, |k| g2[k]);
    Ok(CrossAnalysis {
        signal_rate: hist.rate_a(),
        idler_rate: hist.rate_b(),
        gated_time_s: hist.gated_time_s(),
        baseline,
        baseline_err,
        tau0_ns: fit.params[2],
        tau0_err_ns: fit.errors[2],
        amplitude: fit.params[0],
        amplitude_err: fit.errors[0],
        g2_si_peak,
        g2_si_peak_err,
        g2_first_bin: zero,
        fit,
        histogram: hist,
    })
}

/// Pair rate in the coincidence window and the raw heralding ratios.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PairSummary {
    pub pair_rate: f64,
    pub signal_rate: f64,
    pub idler_rate: f64,
    /// r_P / r_S, absent when the signal rate is zero.
    pub signal_heralding: Option<f64>,
    pub idler_heralding: Option<f64>,
    pub coincidence_window_ns: f64,
    pub gated_time_s: f64,
}

pub fn pair_summary(hist: &CorrelationHistogram, tau_c_ps: u64) -> Result<PairSummary> {
    let r_p = pair_rate(hist, tau_c_ps)?;
    let t = hist.gated_time_s();
    let (r_s, r_i) = if t > 0.0 {
        (hist.rate_a(), hist.rate_b())
    } else {
        (0.0, 0.0)
    };
    Ok(PairSummary {
        pair_rate: r_p,
        signal_rate: r_s,
        idler_rate: r_i,
        signal_heralding: (r_s > 0.0).then(|| r_p / r_s),
        idler_heralding: (r_i > 0.0).then(|| r_p / r_i),
        coincidence_window_ns: tau_c_ps as f64 / PS_PER_NS as f64,
        gated_time_s: t,
    })
}

/// Beamsplitter autocorrelation of one arm with its bunching fit.
#[derive(Debug, Clone, Serialize)]
pub struct HbtAnalysis {
    #[serde(skip)]
    pub histogram: CorrelationHistogram,
    /// C·(1 + D).
    pub g2_zero: f64,
    pub g2_zero_err: f64,
    pub gated_time_s: f64,
    pub fit: FitResult,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ArmName {
    Signal,
    Idler,
}

impl ArmName {
    pub fn channels(self) -> [u8; 2] {
        match self {
            ArmName::Signal => channel::SIGNAL,
            ArmName::Idler => channel::IDLER,
        }
    }
}

/// Autocorrelation histogram between the two detectors of one arm.
pub fn hbt_histogram(stream: &TagStream, arm: ArmName, range: LagRange) -> Result<CorrelationHistogram> {
    let [a, b] = arm.channels();
    cross_correlation(stream, &[a], &[b], range, stream.duty())
}

/// Fits `C·(1 + D·exp(−|τ|/τ₀))` at bin centres with |τ| below
/// `hbt_fit_max_lag_ns`, C held at the mean g² over `hbt_baseline_window_ns`
/// in |τ|, and Poisson weights.
pub fn fit_autocorrelation(hist: CorrelationHistogram, cfg: &RunConfig) -> Result<HbtAnalysis> {
    let g2 = normalize_g2(&hist)?;
    let centers = hist.lag_centers_ns();
    let abs: Vec<f64> = centers.iter().map(|t| t.abs()).collect();
    let [b0, b1] = cfg.hbt_baseline_window_ns;
    let (c, c_err) = window_mean(&abs, &g2, b0, b1)?;
    let weights_all = poisson_weights_scaled(&hist.counts, hist.accidental_level());
    let (mut lags, mut ys, mut ws) = (Vec::new(), Vec::new(), Vec::new());
    for (i, &t) in centers.iter().enumerate() {
        if t.abs() < cfg.hbt_fit_max_lag_ns {
            lags.push(t);
            ys.push(g2[i]);
            ws.push(weights_all[i]);
        }
    }
    let fit = fit_hbt_with(&lags, &ys, &ws, Baseline::Fixed { value: c, error: c_err })?;
    let (g2_zero, g2_zero_err) = hbt_zero_lag(&fit);
    Ok(HbtAnalysis {
        g2_zero,
        g2_zero_err,
        gated_time_s: hist.gated_time_s(),
        fit,
        histogram: hist,
    })
}

/// Pools autocorrelation histograms of `cfg.hbt_runs` independent runs.
pub fn simulated_autocorrelations(cfg: &RunConfig, seed: u64) -> Result<(HbtAnalysis, HbtAnalysis)> {
    let params = cfg.source_params();
    let range = cfg.hbt_range()?;
    let hists = (0..cfg.hbt_runs as u64)
        .into_par_iter()
        .map(|i| {
            let stream = simulate_run(&params, cfg.wall_duration_s, seed_for(seed, HBT_STREAM + i))?;
            Ok((
                hbt_histogram(&stream, ArmName::Signal, range)?,
                hbt_histogram(&stream, ArmName::Idler, range)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut it = hists.into_iter();
    let (mut ss, mut ii) = it.next().expect("at least one run");
    for (s, i) in it {
        ss.accumulate(&s)?;
        ii.accumulate(&i)?;
    }
    Ok((fit_autocorrelation(ss, cfg)?, fit_autocorrelation(ii, cfg)?))
}

#[derive(Debug, Clone, Serialize)]
pub struct ScanAnalysis {
    #[serde(skip)]
    pub scan: SpectrumScan,
    pub photon_fwhm_mhz: f64,
    pub photon_fwhm_err_mhz: f64,
    pub total_counts: f64,
    pub fit: FitResult,
}

pub fn analyze_scan(scan: SpectrumScan) -> Result<ScanAnalysis> {
    let fit = fit_scan(&scan)?;
    Ok(ScanAnalysis {
        photon_fwhm_mhz: fit.params[2],
        photon_fwhm_err_mhz: fit.errors[2],
        total_counts: scan.total_counts(),
        fit,
        scan,
    })
}

pub fn simulated_scan(cfg: &RunConfig, seed: u64, heralded: bool) -> Result<SpectrumScan> {
    let stream = if heralded {
        HERALDED_SCAN_STREAM
    } else {
        UNHERALDED_SCAN_STREAM
    };
    simulate_cavity_scan(
        &cfg.source_params(),
        cfg.cavity_fwhm_mhz,
        &cfg.scan_detunings(),
        cfg.scan_dwell_s,
        seed_for(seed, stream),
        heralded,
    )
}

#[derive(Debug, Clone, Serialize)]
pub struct IncoherentAnalysis {
    /// Points where the subtraction went negative and was set to zero.
    pub clamped: Vec<usize>,
    pub transmission: f64,
    /// Fit of the residual, absent when it failed.
    pub photon_fwhm_mhz: Option<f64>,
    pub photon_fwhm_err_mhz: Option<f64>,
    pub fit: Option<FitResult>,
    #[serde(skip)]
    pub scan: SpectrumScan,
}

pub fn analyze_incoherent(
    unheralded: &SpectrumScan,
    heralded: &SpectrumScan,
    cfg: &RunConfig,
) -> Result<IncoherentAnalysis> {
    let budget = cfg.loss_budget();
    let inc = incoherent_spectrum(unheralded, heralded, &budget)?;
    let fit = fit_scan(&inc.scan).ok().filter(|f| f.converged);
    Ok(IncoherentAnalysis {
        clamped: inc.clamped,
        transmission: budget.transmission(),
        photon_fwhm_mhz: fit.as_ref().map(|f| f.params[2]),
        photon_fwhm_err_mhz: fit.as_ref().map(|f| f.errors[2]),
        fit,
        scan: inc.scan,
    })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SweepPoint {
    pub optical_density: f64,
    pub tau0_ns: f64,
    pub tau0_err_ns: f64,
    pub fwhm_mhz: f64,
    pub fwhm_err_mhz: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepAnalysis {
    pub points: Vec<SweepPoint>,
    pub natural_linewidth_mhz: f64,
    pub slope: f64,
    pub slope_err: f64,
    pub configured_slope: f64,
    /// Γ(OD)/Γ₀ from the fitted law at the largest swept OD.
    pub max_od: f64,
    pub gamma_ratio_at_max_od: f64,
    pub fit: FitResult,
}

/// Decay time and linewidth at each OD from simulated cross-correlations,
/// then the linear law Γ = Γ₀(1 + k·OD) fitted through them.
pub fn superradiance_sweep(cfg: &RunConfig, ods: &[f64], seed: u64) -> Result<SweepAnalysis> {
    let range = cfg.lag_range()?;
    let points = ods
        .par_iter()
        .enumerate()
        .map(|(i, &od)| {
            let params = SourceParams {
                optical_density: od,
                ..cfg.source_params()
            };
            let stream = simulate_run(&params, cfg.superradiance_wall_s, seed_for(seed, SWEEP_STREAM + i as u64))?;
            let hist = cross_correlation(&stream, &channel::SIGNAL, &channel::IDLER, range, stream.duty())?;
            let cross = cross_from_histogram(hist, cfg, cfg.superradiance_fit_start_ns)?;
            let fwhm = 1e3 / (2.0 * std::f64::consts::PI * cross.tau0_ns);
            Ok(SweepPoint {
                optical_density: od,
                tau0_ns: cross.tau0_ns,
                tau0_err_ns: cross.tau0_err_ns,
                fwhm_mhz: fwhm,
                fwhm_err_mhz: fwhm * cross.tau0_err_ns / cross.tau0_ns,
                converged: cross.fit.converged,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let od: Vec<f64> = points.iter().map(|p| p.optical_density).collect();
    let fwhm: Vec<f64> = points.iter().map(|p| p.fwhm_mhz).collect();
    let sigma: Vec<f64> = points.iter().map(|p| p.fwhm_err_mhz).collect();
    let sigma = sigma.iter().all(|s| *s > 0.0).then_some(sigma.as_slice());
    let fit = fit_superradiance(&od, &fwhm, sigma, cfg.natural_linewidth_mhz)?;
    let max_od = od.iter().copied().fold(0.0, f64::max);
    Ok(SweepAnalysis {
        natural_linewidth_mhz: cfg.natural_linewidth_mhz,
        slope: fit.params[0],
        slope_err: fit.errors[0],
        configured_slope: cfg.superradiance_slope,
        max_od,
        gamma_ratio_at_max_od: 1.0 + fit.params[0] * max_od,
        fit,
        points,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub wall_duration_s: f64,
    pub gated_time_s: f64,
    pub tags: usize,
    pub expected_signal_rate: f64,
    pub expected_idler_rate: f64,
    pub expected_pair_rate: f64,
    pub configured_tau0_ns: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TransformSummary {
    pub photon_fwhm_mhz: f64,
    pub tau0_ns: f64,
    pub fourier_limit_mhz: f64,
    #[serde(flatten)]
    pub check: TransformLimit,
}

/// Full reproduction report. Field names are part of the versioned schema.
#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub schema_version: u32,
    pub seed: u64,
    pub tau0_ns: f64,
    pub g2_si_peak: f64,
    pub g2_ss_0: f64,
    pub g2_ii_0: f64,
    #[serde(rename = "R")]
    pub cauchy_schwarz: f64,
    pub pair_rate: f64,
    pub run: RunSummary,
    pub cross: CrossAnalysis,
    pub pairs: PairSummary,
    pub hbt_signal: HbtAnalysis,
    pub hbt_idler: HbtAnalysis,
    pub heralded_scan: ScanAnalysis,
    pub unheralded_scan: ScanAnalysis,
    pub incoherent: IncoherentAnalysis,
    pub transform_limit: TransformSummary,
    pub superradiance: SweepAnalysis,
    pub files: Vec<String>,
    pub config: RunConfig,
}

impl Report {
    /// Names of the fits that did not converge.
    pub fn unconverged(&self) -> Vec<&'static str> {
        [
            ("cross", self.cross.fit.converged),
            ("hbt_signal", self.hbt_signal.fit.converged),
            ("hbt_idler", self.hbt_idler.fit.converged),
            ("heralded_scan", self.heralded_scan.fit.converged),
            ("unheralded_scan", self.unheralded_scan.fit.converged),
            (
                "superradiance",
                self.superradiance.points.iter().all(|p| p.converged),
            ),
        ]
        .into_iter()
        .filter(|(_, ok)| !ok)
        .map(|(name, _)| name)
        .collect()
    }
}

/// Runs the whole chain and returns the report without writing anything.
pub fn run_report(cfg: &RunConfig, seed: u64) -> Result<Report> {
    let params = cfg.source_params();
    let stream = simulate_run(&params, cfg.wall_duration_s, seed)?;
    let cross = analyze_cross(&stream, cfg)?;
    let pairs = pair_summary(&cross.histogram, cfg.coincidence_window_ps())?;
    let (hbt_signal, hbt_idler) = simulated_autocorrelations(cfg, seed)?;
    let r = cauchy_schwarz(cross.g2_si_peak, hbt_idler.g2_zero, hbt_signal.g2_zero)?;

    let (heralded, unheralded) = rayon::join(
        || simulated_scan(cfg, seed, true),
        || simulated_scan(cfg, seed, false),
    );
    let heralded_scan = analyze_scan(heralded?)?;
    let unheralded_scan = analyze_scan(unheralded?)?;
    let incoherent = analyze_incoherent(&unheralded_scan.scan, &heralded_scan.scan, cfg)?;
    let check = transform_limit_check(heralded_scan.photon_fwhm_mhz, cross.tau0_ns)?;
    let transform_limit = TransformSummary {
        photon_fwhm_mhz: heralded_scan.photon_fwhm_mhz,
        tau0_ns: cross.tau0_ns,
        fourier_limit_mhz: 1e3 / (2.0 * std::f64::consts::PI * cross.tau0_ns),
        check,
    };
    let superradiance = superradiance_sweep(cfg, &cfg.superradiance_ods, seed)?;

    Ok(Report {
        schema_version: SCHEMA_VERSION,
        seed,
        tau0_ns: cross.tau0_ns,
        g2_si_peak: cross.g2_si_peak,
        g2_ss_0: hbt_signal.g2_zero,
        g2_ii_0: hbt_idler.g2_zero,
        cauchy_schwarz: r,
        pair_rate: pairs.pair_rate,
        run: RunSummary {
            wall_duration_s: cfg.wall_duration_s,
            gated_time_s: cross.gated_time_s,
            tags: stream.len(),
            expected_signal_rate: params.expected_signal_rate(),
            expected_idler_rate: params.expected_idler_rate(),
            expected_pair_rate: params.detected_pair_rate(),
            configured_tau0_ns: params.tau0_s() * 1e9,
        },
        cross,
        pairs,
        hbt_signal,
        hbt_idler,
        heralded_scan,
        unheralded_scan,
        incoherent,
        transform_limit,
        superradiance,
        files: Vec::new(),
        config: cfg.clone(),
    })
}

pub const REPORT_FILE: &str = "report.json";

/// Writes `report.json` and one CSV per figure into `dir`.
pub fn write_report(report: &mut Report, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    report.cross.histogram.write_g2_csv(dir.join("fig2a_g2_signal_idler.csv"))?;
    report.hbt_signal.histogram.write_g2_csv(dir.join("fig2b_g2_signal_signal.csv"))?;
    report.hbt_idler.histogram.write_g2_csv(dir.join("fig2c_g2_idler_idler.csv"))?;
    report.heralded_scan.scan.write(dir.join("fig3a_heralded_scan.csv"))?;
    report.unheralded_scan.scan.write(dir.join("fig3b_unheralded_scan.csv"))?;
    report.incoherent.scan.write(dir.join("fig3c_incoherent_scan.csv"))?;
    write_sweep_csv(&report.superradiance, &dir.join("fig4_superradiance.csv"))?;
    report.files = [
        "fig2a_g2_signal_idler.csv",
        "fig2b_g2_signal_signal.csv",
        "fig2c_g2_idler_idler.csv",
        "fig3a_heralded_scan.csv",
        "fig3a_heralded_scan.json",
        "fig3b_unheralded_scan.csv",
        "fig3b_unheralded_scan.json",
        "fig3c_incoherent_scan.csv",
        "fig3c_incoherent_scan.json",
        "fig4_superradiance.csv",
        REPORT_FILE,
    ]
    .map(String::from)
    .to_vec();
    let path = dir.join(REPORT_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(report)?)?;
    Ok(path)
}

pub fn write_sweep_csv(sweep: &SweepAnalysis, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["optical_density", "tau0_ns", "fwhm_mhz", "fwhm_err_mhz"])?;
    for p in &sweep.points {
        w.write_record([
            p.optical_density.to_string(),
            p.tau0_ns.to_string(),
            p.fwhm_mhz.to_string(),
            p.fwhm_err_mhz.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
