//! Monte Carlo generator of detector tag streams for a cascade-decay pair source.
//!
//! Pump-on windows are cut into temporal-mode slots. Each slot holds a
//! Bose-Einstein distributed number of pairs, which makes each arm thermal on
//! its own while signal and idler stay tightly correlated. The idler follows
//! its signal after an exponential delay whose time constant shrinks with
//! optical density (collectively enhanced decay), and carries a Lorentzian
//! frequency detuning of the matching Fourier-limited width.

use std::f64::consts::PI;

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Cauchy, Distribution, Exp, Geometric, Normal};
use serde::{Deserialize, Serialize};

use crate::correlator::herald_select;
use crate::error::{Error, Result};
use crate::spectro::{lorentzian, SpectrumScan};
use crate::timetag::{
    channel, filter_gated, ns_to_ps, s_to_ps, DutyCycle, StreamHeader, TagStream, TimeTag,
    PS_PER_NS,
};

/// Natural linewidth Γ₀/2π of the 5P1/2 → 5S1/2 idler transition, in MHz.
pub const NATURAL_LINEWIDTH_MHZ: f64 = 5.8;

/// Coincidence window used to decide whether an idler photon was heralded.
pub const HERALD_WINDOW_PS: u64 = 30 * PS_PER_NS;

pub const CHANNEL_COUNT: u8 = 4;

/// Full physical model of the source and detection chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceParams {
    /// Thermal mean pair number per temporal mode.
    pub mean_pairs_per_mode: f64,
    pub mode_duration_ns: f64,
    pub optical_density: f64,
    /// `k` in Γ = Γ₀(1 + k·OD).
    pub superradiance_slope: f64,
    pub natural_linewidth_mhz: f64,
    pub signal_path_efficiency: f64,
    pub idler_path_efficiency: f64,
    /// Probability that a signal (idler) photon goes to D1 (D3) rather than D2 (D4).
    pub beamsplitter_ratio: f64,
    /// Dark count rate of D1..D4, per second.
    pub dark_count_rates: [f64; 4],
    pub jitter_sigma_ns: f64,
    /// Uncorrelated photon rate in the signal and idler arm during pump-on, per second.
    pub uncorrelated_singles_rates: [f64; 2],
    /// FWHM of the uncorrelated idler background spectrum.
    pub background_linewidth_mhz: f64,
    pub idler_center_frequency_offset_mhz: f64,
    pub duty: DutyCycle,
}

impl Default for SourceParams {
    fn default() -> Self {
        SourceParams {
            mean_pairs_per_mode: 1e-3,
            mode_duration_ns: 10.0,
            optical_density: 0.0,
            superradiance_slope: 0.0,
            natural_linewidth_mhz: NATURAL_LINEWIDTH_MHZ,
            signal_path_efficiency: 0.4,
            idler_path_efficiency: 0.4,
            beamsplitter_ratio: 0.5,
            dark_count_rates: [40.0, 40.0, 40.0, 40.0],
            jitter_sigma_ns: 0.6,
            uncorrelated_singles_rates: [0.0, 0.0],
            background_linewidth_mhz: NATURAL_LINEWIDTH_MHZ,
            idler_center_frequency_offset_mhz: 0.0,
            duty: DutyCycle::default(),
        }
    }
}

fn check_probability(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::arg(format!("{name} = {p} is not a probability")));
    }
    Ok(())
}

fn check_nonnegative(name: &str, x: f64) -> Result<()> {
    if !(x >= 0.0 && x.is_finite()) {
        return Err(Error::arg(format!("{name} = {x} must be finite and >= 0")));
    }
    Ok(())
}

impl SourceParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.mean_pairs_per_mode > 0.0 && self.mean_pairs_per_mode.is_finite()) {
            return Err(Error::arg("mean_pairs_per_mode must be > 0"));
        }
        if !(self.mode_duration_ns > 0.0) || ns_to_ps(self.mode_duration_ns) == 0 {
            return Err(Error::arg("mode_duration_ns must be >= 1 ps"));
        }
        check_nonnegative("optical_density", self.optical_density)?;
        check_nonnegative("superradiance_slope", self.superradiance_slope)?;
        check_nonnegative("jitter_sigma_ns", self.jitter_sigma_ns)?;
        check_probability("signal_path_efficiency", self.signal_path_efficiency)?;
        check_probability("idler_path_efficiency", self.idler_path_efficiency)?;
        check_probability("beamsplitter_ratio", self.beamsplitter_ratio)?;
        for (i, r) in self.dark_count_rates.iter().enumerate() {
            check_nonnegative(&format!("dark_count_rates[{i}]"), *r)?;
        }
        for (i, r) in self.uncorrelated_singles_rates.iter().enumerate() {
            check_nonnegative(&format!("uncorrelated_singles_rates[{i}]"), *r)?;
        }
        if !(self.background_linewidth_mhz > 0.0) {
            return Err(Error::arg("background_linewidth_mhz must be > 0"));
        }
        if !self.idler_center_frequency_offset_mhz.is_finite() {
            return Err(Error::arg("idler_center_frequency_offset_mhz must be finite"));
        }
        self.duty.validate()?;
        superradiant_tau(
            self.optical_density,
            self.superradiance_slope,
            self.natural_linewidth_mhz * 1e6,
        )?;
        Ok(())
    }

    /// Idler decay time τ₀ in seconds.
    pub fn tau0_s(&self) -> f64 {
        superradiant_tau(
            self.optical_density,
            self.superradiance_slope,
            self.natural_linewidth_mhz * 1e6,
        )
        .expect("validated parameters")
    }

    /// Fourier-limited idler FWHM, 1/(2πτ₀), in MHz.
    pub fn photon_fwhm_mhz(&self) -> f64 {
        1.0 / (2.0 * PI * self.tau0_s()) / 1e6
    }

    /// Generated pairs per second of pump-on time.
    pub fn generated_pair_rate(&self) -> f64 {
        self.mean_pairs_per_mode / (self.mode_duration_ns * 1e-9)
    }

    /// Detected pairs per second of pump-on time, before any coincidence window.
    pub fn detected_pair_rate(&self) -> f64 {
        self.generated_pair_rate() * self.signal_path_efficiency * self.idler_path_efficiency
    }

    /// Expected gated singles rate of the signal arm (D1 + D2).
    pub fn expected_signal_rate(&self) -> f64 {
        (self.generated_pair_rate() + self.uncorrelated_singles_rates[0])
            * self.signal_path_efficiency
            + self.dark_count_rates[0]
            + self.dark_count_rates[1]
    }

    /// Expected gated singles rate of the idler arm (D3 + D4).
    pub fn expected_idler_rate(&self) -> f64 {
        (self.generated_pair_rate() + self.uncorrelated_singles_rates[1])
            * self.idler_path_efficiency
            + self.dark_count_rates[2]
            + self.dark_count_rates[3]
    }
}

/// Idler decay time τ₀ = 1/(2π·Γ₀/2π·(1 + k·OD)) in seconds, `gamma0_hz` being Γ₀/2π.
pub fn superradiant_tau(od: f64, slope: f64, gamma0_hz: f64) -> Result<f64> {
    if !(gamma0_hz > 0.0 && gamma0_hz.is_finite()) {
        return Err(Error::arg(format!("natural linewidth {gamma0_hz} Hz must be > 0")));
    }
    if !(od >= 0.0) || !(slope >= 0.0) {
        return Err(Error::arg(format!(
            "optical density {od} and slope {slope} must be >= 0"
        )));
    }
    Ok(1.0 / (2.0 * PI * gamma0_hz * (1.0 + slope * od)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Arm {
    Signal,
    Idler,
}

/// A photon before detection. Emission time is `base_ps + offset_ps`, kept
/// split so long runs do not lose picosecond precision in `f64`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PhotonEvent {
    pub arm: Arm,
    pub base_ps: u64,
    pub offset_ps: f64,
    pub detuning_mhz: f64,
}

pub(crate) fn seed_for(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sampling machinery derived once from validated parameters.
struct Emitter<'a> {
    params: &'a SourceParams,
    slot_ps: u64,
    /// Empty slots before the next occupied one.
    skip: Geometric,
    /// Pairs beyond the first in an occupied slot.
    extra: Geometric,
    delay: Exp<f64>,
    idler_line: Cauchy<f64>,
    background_line: Cauchy<f64>,
    jitter: Option<Normal<f64>>,
}

impl<'a> Emitter<'a> {
    fn new(params: &'a SourceParams) -> Result<Self> {
        params.validate()?;
        let nbar = params.mean_pairs_per_mode;
        let tau0_ps = params.tau0_s() * 1e12;
        let center = params.idler_center_frequency_offset_mhz;
        let jitter_ps = params.jitter_sigma_ns * PS_PER_NS as f64;
        Ok(Emitter {
            params,
            slot_ps: ns_to_ps(params.mode_duration_ns),
            skip: Geometric::new(nbar / (1.0 + nbar)).map_err(|e| Error::arg(e.to_string()))?,
            extra: Geometric::new(1.0 / (1.0 + nbar)).map_err(|e| Error::arg(e.to_string()))?,
            delay: Exp::new(1.0 / tau0_ps).map_err(|e| Error::arg(e.to_string()))?,
            idler_line: Cauchy::new(center, params.photon_fwhm_mhz() / 2.0)
                .map_err(|e| Error::arg(e.to_string()))?,
            background_line: Cauchy::new(center, params.background_linewidth_mhz / 2.0)
                .map_err(|e| Error::arg(e.to_string()))?,
            jitter: (jitter_ps > 0.0).then(|| Normal::new(0.0, jitter_ps).expect("sigma > 0")),
        })
    }

    fn emit_pair<R: Rng>(
        &self,
        rng: &mut R,
        slot_start: u64,
        slot_len: u64,
        with_frequency: bool,
        sink: &mut impl FnMut(&mut R, PhotonEvent),
    ) {
        let signal_offset = rng.random::<f64>() * slot_len as f64;
        let idler_offset = signal_offset + self.delay.sample(rng);
        let detuning = if with_frequency {
            self.idler_line.sample(rng)
        } else {
            0.0
        };
        sink(
            rng,
            PhotonEvent {
                arm: Arm::Signal,
                base_ps: slot_start,
                offset_ps: signal_offset,
                detuning_mhz: 0.0,
            },
        );
        sink(
            rng,
            PhotonEvent {
                arm: Arm::Idler,
                base_ps: slot_start,
                offset_ps: idler_offset,
                detuning_mhz: detuning,
            },
        );
    }

    /// Emits every pair photon and background photon of one pump-on window.
    fn emit_window<R: Rng>(
        &self,
        rng: &mut R,
        start: u64,
        end: u64,
        with_frequency: bool,
        sink: &mut impl FnMut(&mut R, PhotonEvent),
    ) {
        let nbar = self.params.mean_pairs_per_mode;
        let full_slots = (end - start) / self.slot_ps;
        let mut slot = 0u64;
        loop {
            slot = slot.saturating_add(self.skip.sample(rng));
            if slot >= full_slots {
                break;
            }
            let slot_start = start + slot * self.slot_ps;
            let pairs = 1 + self.extra.sample(rng);
            for _ in 0..pairs {
                self.emit_pair(rng, slot_start, self.slot_ps, with_frequency, sink);
            }
            slot += 1;
        }
        // a trailing partial slot keeps the same mean pair density
        let tail_start = start + full_slots * self.slot_ps;
        let tail_len = end - tail_start;
        if tail_len > 0 {
            let mean = nbar * tail_len as f64 / self.slot_ps as f64;
            let pairs = Geometric::new(1.0 / (1.0 + mean))
                .expect("valid probability")
                .sample(rng);
            for _ in 0..pairs {
                self.emit_pair(rng, tail_start, tail_len, with_frequency, sink);
            }
        }

        for (arm, rate) in [Arm::Signal, Arm::Idler]
            .into_iter()
            .zip(self.params.uncorrelated_singles_rates)
        {
            poisson_times(rng, rate, start, end, |rng, offset| {
                let detuning = if with_frequency && arm == Arm::Idler {
                    self.background_line.sample(rng)
                } else {
                    0.0
                };
                sink(
                    rng,
                    PhotonEvent {
                        arm,
                        base_ps: start,
                        offset_ps: offset,
                        detuning_mhz: detuning,
                    },
                );
            });
        }
    }

    /// Path loss, beamsplitter routing and timing jitter. Returns `None` for a
    /// lost photon or one landing at or after `duration_ps`.
    fn detect<R: Rng>(&self, rng: &mut R, photon: &PhotonEvent, duration_ps: u64) -> Option<TimeTag> {
        let (efficiency, channels) = match photon.arm {
            Arm::Signal => (self.params.signal_path_efficiency, channel::SIGNAL),
            Arm::Idler => (self.params.idler_path_efficiency, channel::IDLER),
        };
        if !rng.random_bool(efficiency) {
            return None;
        }
        let ch = if rng.random_bool(self.params.beamsplitter_ratio) {
            channels[0]
        } else {
            channels[1]
        };
        let jitter = self.jitter.map_or(0.0, |j| j.sample(rng));
        let t = photon.base_ps as i128 + (photon.offset_ps + jitter).round() as i128;
        let t = t.max(0);
        if t >= duration_ps as i128 {
            return None;
        }
        Some(TimeTag::new(t as u64, ch))
    }

    fn dark_counts<R: Rng>(&self, rng: &mut R, duration_ps: u64, tags: &mut Vec<TimeTag>) {
        for (ch, rate) in self.params.dark_count_rates.iter().enumerate() {
            poisson_times(rng, *rate, 0, duration_ps, |_, offset| {
                let t = offset.round() as u64;
                if t < duration_ps {
                    tags.push(TimeTag::new(t, ch as u8));
                }
            });
        }
    }
}

/// Homogeneous Poisson process of `rate_per_s` on `[start, end)`; the callback
/// receives offsets from `start` in picoseconds.
fn poisson_times<R: Rng>(
    rng: &mut R,
    rate_per_s: f64,
    start: u64,
    end: u64,
    mut f: impl FnMut(&mut R, f64),
) {
    if rate_per_s <= 0.0 || end <= start {
        return;
    }
    let gap = Exp::new(rate_per_s * 1e-12).expect("positive rate");
    let span = (end - start) as f64;
    let mut offset = gap.sample(rng);
    while offset < span {
        f(rng, offset);
        offset += gap.sample(rng);
    }
}

/// Simulates a run of `wall_duration_s` seconds. Deterministic in `seed`.
pub fn simulate_run(params: &SourceParams, wall_duration_s: f64, seed: u64) -> Result<TagStream> {
    if !(wall_duration_s > 0.0 && wall_duration_s.is_finite()) {
        return Err(Error::arg(format!(
            "wall duration {wall_duration_s} s must be > 0"
        )));
    }
    let emitter = Emitter::new(params)?;
    let duration = s_to_ps(wall_duration_s);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tags = Vec::new();

    for (start, end) in params.duty.windows(0, duration) {
        emitter.emit_window(&mut rng, start, end, false, &mut |rng, photon| {
            if let Some(tag) = emitter.detect(rng, &photon, duration) {
                tags.push(tag);
            }
        });
    }
    emitter.dark_counts(&mut rng, duration, &mut tags);

    let header = StreamHeader::new(CHANNEL_COUNT, params.duty, duration);
    TagStream::from_unsorted(header, tags)
}

/// Simulates a scanning Fabry-Perot measurement of the idler spectrum.
///
/// At every cavity detuning a fresh run of `dwell_s` wall seconds is
/// generated; idler photons pass the cavity with a unit-peak Lorentzian
/// probability of width `cavity_fwhm_mhz`. Counts are idler clicks during
/// pump-on time, restricted to those preceded by a signal click within
/// [`HERALD_WINDOW_PS`] when `heralded` is set.
pub fn simulate_cavity_scan(
    params: &SourceParams,
    cavity_fwhm_mhz: f64,
    detunings_mhz: &[f64],
    dwell_s: f64,
    seed: u64,
    heralded: bool,
) -> Result<SpectrumScan> {
    if detunings_mhz.is_empty() {
        return Err(Error::arg("empty detuning list"));
    }
    if !(cavity_fwhm_mhz > 0.0) {
        return Err(Error::arg(format!(
            "cavity FWHM {cavity_fwhm_mhz} MHz must be > 0"
        )));
    }
    if !(dwell_s > 0.0 && dwell_s.is_finite()) {
        return Err(Error::arg(format!("dwell {dwell_s} s must be > 0")));
    }
    let emitter = Emitter::new(params)?;
    let duration = s_to_ps(dwell_s);

    let counts = detunings_mhz
        .iter()
        .enumerate()
        .map(|(i, &cavity_center)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed_for(seed, i as u64));
            let mut tags = Vec::new();
            for (start, end) in params.duty.windows(0, duration) {
                emitter.emit_window(&mut rng, start, end, true, &mut |rng, photon| {
                    if photon.arm == Arm::Idler {
                        let pass = lorentzian(photon.detuning_mhz, cavity_center, cavity_fwhm_mhz);
                        if !rng.random_bool(pass) {
                            return;
                        }
                    } else if !heralded {
                        return;
                    }
                    if let Some(tag) = emitter.detect(rng, &photon, duration) {
                        tags.push(tag);
                    }
                });
            }
            emitter.dark_counts(&mut rng, duration, &mut tags);
            let header = StreamHeader::new(CHANNEL_COUNT, params.duty, duration);
            let stream = TagStream::from_unsorted(header, tags)?;
            let gated = filter_gated(&stream, &params.duty);
            let counted = if heralded {
                herald_select(&gated, &channel::SIGNAL, &channel::IDLER, HERALD_WINDOW_PS)
                    .len()
            } else {
                gated.count_channels(&channel::IDLER)
            };
            Ok(counted as f64)
        })
        .collect::<Result<Vec<f64>>>()?;

    SpectrumScan::new(
        detunings_mhz.to_vec(),
        counts,
        dwell_s,
        cavity_fwhm_mhz,
        heralded,
    )
}
