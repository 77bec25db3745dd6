//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::f64::consts::PI;
use std::time::Instant;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use photon_pairs::config::RunConfig;
use photon_pairs::correlator::{
    cauchy_schwarz, cross_correlation, cross_correlation_parallel, normalize_g2, pair_rate,
    LagRange,
};
use photon_pairs::format::{decode_bytes, encode, FormatError, HEADER_LEN, RECORD_LEN};
use photon_pairs::report::{
    analyze_cross, analyze_scan, simulated_autocorrelations, simulated_scan, superradiance_sweep,
    CrossAnalysis,
};
use photon_pairs::simulator::{simulate_cavity_scan, simulate_run, SourceParams};
use photon_pairs::spectro::{fit_scan, transform_limit_check};
use photon_pairs::timetag::{channel, DutyCycle, StreamHeader, TagStream, TimeTag, PS_PER_MS};

const SEED: u64 = 20_260_101;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// P(0 ≤ X + J < width) for X ~ Exp(τ) and J ~ N(0, σ²), by Simpson
/// integration of the convolution density.
fn first_bin_probability(tau: f64, sigma: f64, width: f64) -> f64 {
    let gauss = |x: f64| (-(x * x) / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * PI).sqrt());
    let density = |t: f64| {
        let upper = t + 10.0 * sigma;
        if upper <= 0.0 {
            return 0.0;
        }
        let n = 2000;
        let h = upper / n as f64;
        let f = |x: f64| (-x / tau).exp() / tau * gauss(t - x);
        let mut s = f(0.0) + f(upper);
        for k in 1..n {
            s += f(k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    };
    let n = 400;
    let h = width / n as f64;
    let mut s = density(0.0) + density(width);
    for k in 1..n {
        s += density(k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

fn criterion_1(cfg: &RunConfig, cross: &CrossAnalysis, elapsed_s: f64) -> Outcome {
    let params = cfg.source_params();
    let tau_true = params.tau0_s() * 1e9;
    let sigma = 2f64.sqrt() * cfg.jitter_sigma_ns;
    let p0 = first_bin_probability(tau_true, sigma, cfg.bin_width_ns);
    let r_p = params.detected_pair_rate();
    let oracle = 1.0 + r_p * p0 / (cross.idler_rate * cross.signal_rate * cfg.bin_width_ns * 1e-9);
    let tau_ok = (cross.tau0_ns / tau_true - 1.0).abs() <= 0.15;
    let b_ok = (1.0..=1.3).contains(&cross.baseline);
    let peak_ok = (2900.0..=11_600.0).contains(&cross.g2_si_peak);
    let oracle_ok = (cross.g2_first_bin / oracle - 1.0).abs() <= 0.10;
    let time_ok = elapsed_s < 60.0;
    outcome(
        tau_ok && b_ok && peak_ok && oracle_ok && time_ok && cross.fit.converged,
        format!(
            "tau0 {:.3} ns (set {:.3}), B {:.3}, A+B {:.0}, first bin {:.0} vs oracle {:.0} (p0 {:.5}), {:.1} s",
            cross.tau0_ns, tau_true, cross.baseline, cross.g2_si_peak, cross.g2_first_bin, oracle, p0, elapsed_s
        ),
    )
}

fn criterion_2(g2_ss: f64, g2_ss_err: f64, g2_ii: f64, g2_ii_err: f64) -> Outcome {
    let ok = |g: f64| (g - 2.0).abs() <= 0.15;
    outcome(
        ok(g2_ss) && ok(g2_ii),
        format!("g2_SS(0) {g2_ss:.3} ± {g2_ss_err:.3}, g2_II(0) {g2_ii:.3} ± {g2_ii_err:.3}"),
    )
}

fn criterion_3(cross: &CrossAnalysis, g2_ss: f64, g2_ii: f64) -> Outcome {
    let r = cauchy_schwarz(cross.g2_si_peak, g2_ii, g2_ss).unwrap();
    let fixed = cauchy_schwarz(5800.0, 2.03, 2.06).unwrap();
    // 5800²/(2.03·2.06) = 8.0444e6, which rounds to 8.05e6
    let fixed_ok = (fixed / 8.05e6 - 1.0).abs() < 1e-3;
    outcome(
        r > 1e6 && fixed_ok,
        format!("end-to-end R {r:.3e}; fixed inputs R {fixed:.5e}"),
    )
}

fn criterion_4() -> Outcome {
    let tau_ns = 6.7;
    let params = SourceParams {
        mean_pairs_per_mode: 1e-4,
        mode_duration_ns: 10.0,
        natural_linewidth_mhz: 1e3 / (2.0 * PI * tau_ns),
        signal_path_efficiency: 1.0,
        idler_path_efficiency: 1.0,
        dark_count_rates: [0.0; 4],
        jitter_sigma_ns: 0.0,
        duty: DutyCycle::ungated(),
        ..SourceParams::default()
    };
    let stream = simulate_run(&params, 100.0, SEED + 4).unwrap();
    let injected = stream.count_channels(&channel::SIGNAL) as f64;
    let range = LagRange::from_ns(-100.0, 100.0, 1.0).unwrap();
    let hist = cross_correlation(&stream, &channel::SIGNAL, &channel::IDLER, range, stream.duty())
        .unwrap();
    // accidentals per bin from the negative-lag side
    let negative: u64 = hist.counts[..50].iter().sum();
    let accidental_per_bin = negative as f64 / 50.0;
    let captured = pair_rate(&hist, 30_000).unwrap() * hist.gated_time_s() - 30.0 * accidental_per_bin;
    let fraction = captured / injected;
    let expected = 1.0 - (-30.0 / tau_ns).exp();
    outcome(
        (fraction / expected - 1.0).abs() <= 0.005,
        format!("captured {fraction:.5} of {injected:.0} pairs, closed form {expected:.5}"),
    )
}

fn criterion_5(cfg: &RunConfig, tau_fit_ns: f64) -> Outcome {
    let scan = simulated_scan(cfg, SEED, true).unwrap();
    let fit = analyze_scan(scan).unwrap();
    let limit = 1e3 / (2.0 * PI * cfg.source_params().tau0_s() * 1e9);
    let rho = transform_limit_check(fit.photon_fwhm_mhz, tau_fit_ns).unwrap().rho;
    let width_ok = (fit.photon_fwhm_mhz / limit - 1.0).abs() <= 0.10;
    outcome(
        width_ok && (0.9..=1.1).contains(&rho) && fit.fit.converged,
        format!(
            "heralded FWHM {:.2} ± {:.2} MHz vs 1/(2πτ₀) {:.2} MHz, rho {:.3}, {:.0} counts",
            fit.photon_fwhm_mhz, fit.photon_fwhm_err_mhz, limit, rho, fit.total_counts
        ),
    )
}

fn criterion_6() -> Outcome {
    let params = SourceParams {
        mean_pairs_per_mode: 0.01,
        mode_duration_ns: 10.0,
        natural_linewidth_mhz: 20.0,
        idler_path_efficiency: 1.0,
        dark_count_rates: [0.0; 4],
        duty: DutyCycle::ungated(),
        ..SourceParams::default()
    };
    let detunings: Vec<f64> = (-25..=25).map(|i| i as f64 * 2.0).collect();
    let mut passed = 0;
    let mut min_counts = f64::INFINITY;
    for seed in 0..100 {
        let scan = simulate_cavity_scan(&params, 2.8, &detunings, 8e-3, SEED + 600 + seed, false)
            .unwrap();
        min_counts = min_counts.min(scan.total_counts());
        let fit = fit_scan(&scan).unwrap();
        if fit.converged && (fit.params[2] - 20.0).abs() <= 1.0 {
            passed += 1;
        }
    }
    outcome(
        passed >= 95,
        format!("{passed}/100 scans within 20.0 ± 1.0 MHz (fewest counts {min_counts:.0})"),
    )
}

fn criterion_7(cfg: &RunConfig) -> Outcome {
    let sweep = superradiance_sweep(cfg, &[4.0, 8.0, 16.0, 24.0, 32.0], SEED).unwrap();
    let k_ok = (sweep.slope - cfg.superradiance_slope).abs() <= 3.0 * sweep.slope_err;
    let expected_ratio = 1.0 + cfg.superradiance_slope * 32.0;
    let ratio = 1.0 + sweep.slope * 32.0;
    let ratio_ok = (ratio / expected_ratio - 1.0).abs() <= 0.10;
    outcome(
        k_ok && ratio_ok,
        format!(
            "k {:.4} ± {:.4} (set {}), Gamma(32)/Gamma0 {:.3}",
            sweep.slope, sweep.slope_err, cfg.superradiance_slope, ratio
        ),
    )
}

fn poisson_tags(rng: &mut ChaCha8Rng, rate_per_s: f64, duration_ps: u64, ch: u8, out: &mut Vec<TimeTag>) {
    let gap = Exp::new(rate_per_s * 1e-12).unwrap();
    let mut t = gap.sample(rng);
    while t < duration_ps as f64 {
        out.push(TimeTag::new(t as u64, ch));
        t += gap.sample(rng);
    }
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 8);
    let duration = 10 * 1_000_000_000_000u64;
    let mut tags = Vec::new();
    poisson_tags(&mut rng, 5e5, duration, 0, &mut tags);
    poisson_tags(&mut rng, 5e5, duration, 2, &mut tags);
    let header = StreamHeader::new(4, DutyCycle::ungated(), duration);
    let stream = TagStream::from_unsorted(header, tags).unwrap();
    let range = LagRange::from_ns(-1000.0, 1000.0, 1.0).unwrap();
    let hist = cross_correlation(&stream, &[0], &[2], range, stream.duty()).unwrap();
    let g2 = normalize_g2(&hist).unwrap();
    let mean = g2.iter().sum::<f64>() / g2.len() as f64;
    outcome(
        (mean - 1.0).abs() <= 0.02,
        format!("{} tags, mean g2 {mean:.4} over {} bins", stream.len(), g2.len()),
    )
}

/// Pump-on test written out from the window definition.
fn on(duty: &DutyCycle, t: u64) -> bool {
    if duty.on_ps == 0 && duty.off_ps == 0 {
        return true;
    }
    let period = (duty.on_ps + duty.off_ps) as i128;
    (t as i128 - duty.phase_ps as i128).rem_euclid(period) < duty.on_ps as i128
}

fn brute_force(stream: &TagStream, a: &[u8], b: &[u8], range: &LagRange, duty: &DutyCycle) -> Vec<u64> {
    let mut counts = vec![0u64; range.bins()];
    let tags = stream.tags();
    for (i, x) in tags.iter().enumerate() {
        if !a.contains(&x.channel) || !on(duty, x.timestamp) {
            continue;
        }
        for (j, y) in tags.iter().enumerate() {
            if i == j || !b.contains(&y.channel) || !on(duty, y.timestamp) {
                continue;
            }
            let lag = y.timestamp as i128 - x.timestamp as i128;
            if lag >= range.min_ps as i128 && lag < range.max_ps as i128 {
                counts[((lag - range.min_ps as i128) / range.bin_ps as i128) as usize] += 1;
            }
        }
    }
    counts
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 9);
    let mut mismatches = 0;
    for _ in 0..200 {
        let n = rng.random_range(0..=1000usize);
        let span = rng.random_range(1_000u64..5_000_000);
        let tags: Vec<TimeTag> = (0..n)
            .map(|_| TimeTag::new(rng.random_range(0..span), rng.random_range(0..4u8)))
            .collect();
        let duty = if rng.random_bool(0.5) {
            DutyCycle::ungated()
        } else {
            DutyCycle {
                on_ps: rng.random_range(1..200_000),
                off_ps: rng.random_range(0..400_000),
                phase_ps: rng.random_range(0..100_000),
            }
        };
        let header = StreamHeader::new(4, duty, span);
        let stream = TagStream::from_unsorted(header, tags).unwrap();
        let bin = rng.random_range(1u64..500);
        let below = rng.random_range(0i64..60) * bin as i64;
        let above = rng.random_range(1i64..60) * bin as i64;
        let range = LagRange::new(-below, above, bin).unwrap();
        let a: Vec<u8> = (0..4).filter(|_| rng.random_bool(0.5)).collect();
        let b: Vec<u8> = (0..4).filter(|_| rng.random_bool(0.5)).collect();
        if a.is_empty() || b.is_empty() {
            continue;
        }
        let sweep = cross_correlation(&stream, &a, &b, range, &duty).unwrap();
        if sweep.counts != brute_force(&stream, &a, &b, &range, &duty) {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("{mismatches} mismatching streams of 200"))
}

fn criterion_10() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 10);
    let duration = 10 * 1_000_000_000_000u64;
    let mut tags = Vec::with_capacity(10_100_000);
    for ch in 0..4 {
        poisson_tags(&mut rng, 2.5e5, duration, ch, &mut tags);
    }
    let header = StreamHeader::new(4, DutyCycle::ungated(), duration);
    let stream = TagStream::from_unsorted(header, tags).unwrap();
    let range = LagRange::from_ns(-1000.0, 1000.0, 1.0).unwrap();

    let start = Instant::now();
    let serial = cross_correlation(&stream, &channel::SIGNAL, &channel::IDLER, range, stream.duty())
        .unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let parallel = cross_correlation_parallel(
        &stream,
        &channel::SIGNAL,
        &channel::IDLER,
        range,
        stream.duty(),
        16,
    )
    .unwrap();
    outcome(
        elapsed <= 2.0 && serial == parallel,
        format!(
            "{} tags in {elapsed:.3} s single-threaded, {} pairs, parallel identical: {}",
            stream.len(),
            serial.counts.iter().sum::<u64>(),
            serial == parallel
        ),
    )
}

fn criterion_11() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 11);
    let mut round_trip_failures = 0;
    for _ in 0..100 {
        let n = rng.random_range(0..500usize);
        let mut t = 0u64;
        let tags: Vec<TimeTag> = (0..n)
            .map(|_| {
                let scale: u32 = rng.random_range(1..40);
                t += rng.random_range(0..1u64 << scale);
                TimeTag::new(t, rng.random_range(0..4u8))
            })
            .collect();
        let duty = DutyCycle {
            on_ps: rng.random_range(1..PS_PER_MS),
            off_ps: rng.random_range(0..12 * PS_PER_MS),
            phase_ps: 0,
        };
        let duration = tags.last().map_or(0, |x| x.timestamp + 1);
        let stream = TagStream::from_unsorted(StreamHeader::new(4, duty, duration), tags).unwrap();
        let bytes = encode(&stream).unwrap();
        let back = decode_bytes(&bytes).unwrap();
        if back.tags() != stream.tags() || encode(&back).unwrap() != bytes {
            round_trip_failures += 1;
        }
    }

    let tags = vec![TimeTag::new(10, 0), TimeTag::new(20, 3), TimeTag::new(30, 1)];
    let good = encode(&TagStream::new(StreamHeader::new(4, DutyCycle::default(), 31), tags).unwrap())
        .unwrap();
    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    let mut bad_version = good.clone();
    bad_version[4] = 9;
    let truncated = good[..good.len() - 5].to_vec();
    let mut out_of_order = good.clone();
    let second = HEADER_LEN + RECORD_LEN;
    out_of_order[second..second + 8].copy_from_slice(&1u64.to_le_bytes());
    let mut bad_channel = good.clone();
    bad_channel[second + 8..second + 12].copy_from_slice(&7u32.to_le_bytes());

    let kinds: Vec<&str> = [bad_magic, bad_version, truncated, out_of_order, bad_channel]
        .iter()
        .map(|b| decode_bytes(b).map_or_else(|e: FormatError| e.kind(), |_| "accepted"))
        .collect();
    let expected = [
        "bad-magic",
        "unsupported-version",
        "truncated",
        "out-of-order",
        "channel-out-of-range",
    ];
    outcome(
        round_trip_failures == 0 && kinds == expected,
        format!("{round_trip_failures} round-trip failures of 100; malformed kinds {kinds:?}"),
    )
}

fn main() {
    let cfg = RunConfig::reference();
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();

    let start = Instant::now();
    let stream = simulate_run(&cfg.source_params(), cfg.wall_duration_s, SEED).unwrap();
    let cross = analyze_cross(&stream, &cfg).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    drop(stream);
    results.push((1, "cross-correlation shape", criterion_1(&cfg, &cross, elapsed)));

    let (ss, ii) = simulated_autocorrelations(&cfg, SEED).unwrap();
    results.push((
        2,
        "thermal statistics",
        criterion_2(ss.g2_zero, ss.g2_zero_err, ii.g2_zero, ii.g2_zero_err),
    ));
    results.push((3, "Cauchy-Schwarz violation", criterion_3(&cross, ss.g2_zero, ii.g2_zero)));
    results.push((4, "pair capture", criterion_4()));
    results.push((5, "transform limit", criterion_5(&cfg, cross.tau0_ns)));
    results.push((6, "deconvolution", criterion_6()));
    results.push((7, "superradiance law", criterion_7(&cfg)));
    results.push((8, "normalization", criterion_8()));
    results.push((9, "oracle equivalence", criterion_9()));
    results.push((10, "performance", criterion_10()));
    results.push((11, "file format", criterion_11()));

    let mut failed = 0;
    for (n, name, o) in &results {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {n:>2} [{tag}] {name}: {}", o.detail);
        failed += usize::from(!o.pass);
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
