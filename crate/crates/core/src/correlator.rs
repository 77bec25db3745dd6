//! Coincidence histogramming and the scalar statistics derived from it.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::timetag::{ps_to_s, DutyCycle, TagStream, TimeTag, PS_PER_NS};

/// Lag axis of a histogram: `[min_ps, max_ps)` cut into bins of `bin_ps`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LagRange {
    pub min_ps: i64,
    pub max_ps: i64,
    pub bin_ps: u64,
}

impl LagRange {
    pub fn new(min_ps: i64, max_ps: i64, bin_ps: u64) -> Result<Self> {
        if bin_ps == 0 {
            return Err(Error::arg("bin width must be positive"));
        }
        if max_ps <= min_ps {
            return Err(Error::arg(format!(
                "empty lag range [{min_ps}, {max_ps}) ps"
            )));
        }
        let span = (max_ps as i128 - min_ps as i128) as u128;
        if !span.is_multiple_of(bin_ps as u128) {
            return Err(Error::arg(format!(
                "lag span {span} ps is not a multiple of the bin width {bin_ps} ps"
            )));
        }
        Ok(LagRange {
            min_ps,
            max_ps,
            bin_ps,
        })
    }

    /// Range in nanoseconds, e.g. `LagRange::from_ns(-20.0, 100.0, 1.0)`.
    pub fn from_ns(min_ns: f64, max_ns: f64, bin_ns: f64) -> Result<Self> {
        LagRange::new(
            (min_ns * PS_PER_NS as f64).round() as i64,
            (max_ns * PS_PER_NS as f64).round() as i64,
            (bin_ns * PS_PER_NS as f64).round() as u64,
        )
    }

    pub fn bins(&self) -> usize {
        ((self.max_ps as i128 - self.min_ps as i128) / self.bin_ps as i128) as usize
    }
}

/// Binned coincidence counts G²(τ) plus what is needed to normalize them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationHistogram {
    pub range: LagRange,
    pub counts: Vec<u64>,
    pub channels_a: Vec<u8>,
    pub channels_b: Vec<u8>,
    /// Pump-on time T over which tags were accepted.
    pub gated_time_ps: u64,
    /// Gated singles in channel set A and B.
    pub singles_a: u64,
    pub singles_b: u64,
}

impl CorrelationHistogram {
    pub fn bin_width_s(&self) -> f64 {
        ps_to_s(self.range.bin_ps)
    }

    pub fn gated_time_s(&self) -> f64 {
        ps_to_s(self.gated_time_ps)
    }

    pub fn rate_a(&self) -> f64 {
        self.singles_a as f64 / self.gated_time_s()
    }

    pub fn rate_b(&self) -> f64 {
        self.singles_b as f64 / self.gated_time_s()
    }

    pub fn bin_start_ps(&self, k: usize) -> i64 {
        self.range.min_ps + (k as u64 * self.range.bin_ps) as i64
    }

    /// Left bin edges in ns.
    pub fn lag_starts_ns(&self) -> Vec<f64> {
        (0..self.counts.len())
            .map(|k| self.bin_start_ps(k) as f64 / PS_PER_NS as f64)
            .collect()
    }

    /// Bin centres in ns.
    pub fn lag_centers_ns(&self) -> Vec<f64> {
        let half = self.range.bin_ps as f64 / 2.0;
        (0..self.counts.len())
            .map(|k| (self.bin_start_ps(k) as f64 + half) / PS_PER_NS as f64)
            .collect()
    }

    /// Expected counts per bin for uncorrelated channels, r_A·r_B·Δτ·T.
    pub fn accidental_level(&self) -> f64 {
        self.rate_a() * self.rate_b() * self.bin_width_s() * self.gated_time_s()
    }

    /// Accumulates a histogram from an independent run with the same binning
    /// and channel sets.
    pub fn accumulate(&mut self, other: &CorrelationHistogram) -> Result<()> {
        if self.range != other.range
            || self.channels_a != other.channels_a
            || self.channels_b != other.channels_b
        {
            return Err(Error::arg("histograms differ in binning or channels"));
        }
        for (c, o) in self.counts.iter_mut().zip(&other.counts) {
            *c += o;
        }
        self.gated_time_ps += other.gated_time_ps;
        self.singles_a += other.singles_a;
        self.singles_b += other.singles_b;
        Ok(())
    }

    /// Two-column CSV: `lag_ns,g2`, lag being the bin centre.
    pub fn write_g2_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let g2 = normalize_g2(self)?;
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "lag_ns,g2")?;
        for (lag, g) in self.lag_centers_ns().iter().zip(g2) {
            writeln!(out, "{lag},{g}")?;
        }
        out.flush()?;
        Ok(())
    }
}

struct ChannelMask([bool; 256]);

impl ChannelMask {
    fn new(channels: &[u8]) -> Self {
        let mut mask = [false; 256];
        for &c in channels {
            mask[c as usize] = true;
        }
        ChannelMask(mask)
    }

    #[inline]
    fn has(&self, c: u8) -> bool {
        self.0[c as usize]
    }
}

fn check_channels(a: &[u8], b: &[u8]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::arg("channel sets must be non-empty"));
    }
    Ok(())
}

/// Histograms lags `t_b − t_a` for every A tag with index in `a_span`.
///
/// The B window of each A tag may reach outside `a_span`; the lower edge
/// pointer only moves forward because timestamps are sorted.
fn sweep(
    tags: &[TimeTag],
    a_span: std::ops::Range<usize>,
    a: &ChannelMask,
    b: &ChannelMask,
    duty: &DutyCycle,
    range: &LagRange,
    counts: &mut [u64],
) {
    let min = range.min_ps as i128;
    let max = range.max_ps as i128;
    let bin = range.bin_ps as i128;
    let Some(first) = tags.get(a_span.start) else {
        return;
    };
    let first_low = first.timestamp as i128 + min;
    let mut lo = tags.partition_point(|t| (t.timestamp as i128) < first_low);

    for i in a_span {
        let ta = tags[i];
        if !a.has(ta.channel) || !duty.contains(ta.timestamp) {
            continue;
        }
        let t0 = ta.timestamp as i128;
        let low = t0 + min;
        while lo < tags.len() && (tags[lo].timestamp as i128) < low {
            lo += 1;
        }
        let high = t0 + max;
        let mut j = lo;
        while j < tags.len() {
            let tb = tags[j];
            let lag = tb.timestamp as i128 - t0;
            if lag + t0 >= high {
                break;
            }
            if j != i && b.has(tb.channel) && duty.contains(tb.timestamp) {
                counts[((lag - min) / bin) as usize] += 1;
            }
            j += 1;
        }
    }
}

fn gated_singles(tags: &[TimeTag], mask: &ChannelMask, duty: &DutyCycle) -> u64 {
    tags.iter()
        .filter(|t| mask.has(t.channel) && duty.contains(t.timestamp))
        .count() as u64
}

fn finish(
    stream: &TagStream,
    a: &[u8],
    b: &[u8],
    range: LagRange,
    duty: &DutyCycle,
    counts: Vec<u64>,
) -> Result<CorrelationHistogram> {
    Ok(CorrelationHistogram {
        range,
        counts,
        channels_a: a.to_vec(),
        channels_b: b.to_vec(),
        gated_time_ps: duty.gated_time(0, stream.duration_ps())?,
        singles_a: gated_singles(stream.tags(), &ChannelMask::new(a), duty),
        singles_b: gated_singles(stream.tags(), &ChannelMask::new(b), duty),
    })
}

/// Multi-stop coincidence histogram between channel sets A and B.
///
/// Every (a, b) pair of distinct pump-on tags with `t_b − t_a` inside the lag
/// range is counted, not only nearest neighbours. Bins are closed-open.
pub fn cross_correlation(
    stream: &TagStream,
    channels_a: &[u8],
    channels_b: &[u8],
    range: LagRange,
    duty: &DutyCycle,
) -> Result<CorrelationHistogram> {
    check_channels(channels_a, channels_b)?;
    duty.validate()?;
    let mut counts = vec![0u64; range.bins()];
    sweep(
        stream.tags(),
        0..stream.len(),
        &ChannelMask::new(channels_a),
        &ChannelMask::new(channels_b),
        duty,
        &range,
        &mut counts,
    );
    finish(stream, channels_a, channels_b, range, duty, counts)
}

/// Same result as [`cross_correlation`], computed over `chunks` time slices
/// in parallel.
///
/// Each chunk owns the A tags whose index falls in it and reads B tags past
/// its end as far as the lag range requires, so every pair is attributed to
/// exactly one chunk and the merged counts equal the serial ones.
pub fn cross_correlation_parallel(
    stream: &TagStream,
    channels_a: &[u8],
    channels_b: &[u8],
    range: LagRange,
    duty: &DutyCycle,
    chunks: usize,
) -> Result<CorrelationHistogram> {
    check_channels(channels_a, channels_b)?;
    duty.validate()?;
    let chunks = chunks.max(1);
    let n = stream.len();
    let a = ChannelMask::new(channels_a);
    let b = ChannelMask::new(channels_b);
    let bins = range.bins();
    let step = n.div_ceil(chunks).max(1);
    let counts = (0..chunks)
        .into_par_iter()
        .map(|k| {
            let mut local = vec![0u64; bins];
            let span = (k * step).min(n)..((k + 1) * step).min(n);
            sweep(stream.tags(), span, &a, &b, duty, &range, &mut local);
            local
        })
        .reduce(
            || vec![0u64; bins],
            |mut x, y| {
                for (p, q) in x.iter_mut().zip(y) {
                    *p += q;
                }
                x
            },
        );
    finish(stream, channels_a, channels_b, range, duty, counts)
}

/// g²(τ_k) = G²(τ_k) / (r_A·r_B·Δτ·T).
pub fn normalize_g2(hist: &CorrelationHistogram) -> Result<Vec<f64>> {
    if hist.gated_time_ps == 0 {
        return Err(Error::UndefinedNormalization("gated time is zero".into()));
    }
    if hist.singles_a == 0 || hist.singles_b == 0 {
        return Err(Error::UndefinedNormalization(format!(
            "zero singles rate (A: {}, B: {})",
            hist.singles_a, hist.singles_b
        )));
    }
    let norm = hist.accidental_level();
    Ok(hist.counts.iter().map(|&c| c as f64 / norm).collect())
}

/// Pair rate and heralding efficiencies of a signal/idler histogram.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairStats {
    /// Pairs per second of pump-on time.
    pub pair_rate: f64,
    /// r_P / r_S.
    pub signal_heralding: f64,
    /// r_P / r_I.
    pub idler_heralding: f64,
    pub coincidence_window_ns: f64,
}

impl PairStats {
    /// Treats channel set A as the signal arm and B as the idler arm.
    pub fn from_histogram(hist: &CorrelationHistogram, tau_c_ps: u64) -> Result<Self> {
        let pair_rate = pair_rate(hist, tau_c_ps)?;
        let (signal_heralding, idler_heralding) =
            heralding(pair_rate, hist.rate_a(), hist.rate_b())?;
        Ok(PairStats {
            pair_rate,
            signal_heralding,
            idler_heralding,
            coincidence_window_ns: tau_c_ps as f64 / PS_PER_NS as f64,
        })
    }
}

/// r_P = (1/T)·Σ G²(τ) over the bins starting in `[0, τ_c)`.
pub fn pair_rate(hist: &CorrelationHistogram, tau_c_ps: u64) -> Result<f64> {
    if tau_c_ps == 0 {
        return Err(Error::arg("coincidence window must be positive"));
    }
    if tau_c_ps as i128 > hist.range.max_ps as i128 || hist.range.min_ps > 0 {
        return Err(Error::arg(format!(
            "coincidence window [0, {tau_c_ps}) ps exceeds histogram range [{}, {}) ps",
            hist.range.min_ps, hist.range.max_ps
        )));
    }
    let total: u64 = (0..hist.counts.len())
        .filter(|&k| {
            let start = hist.bin_start_ps(k);
            start >= 0 && (start as u64) < tau_c_ps
        })
        .map(|k| hist.counts[k])
        .sum();
    if total == 0 {
        return Ok(0.0);
    }
    if hist.gated_time_ps == 0 {
        return Err(Error::UndefinedNormalization("gated time is zero".into()));
    }
    Ok(total as f64 / hist.gated_time_s())
}

/// Heralding efficiencies (η_S, η_I) = (r_P/r_S, r_P/r_I).
pub fn heralding(pair_rate: f64, signal_rate: f64, idler_rate: f64) -> Result<(f64, f64)> {
    if !(signal_rate > 0.0 && idler_rate > 0.0) {
        return Err(Error::UndefinedNormalization(format!(
            "singles rates must be positive (signal {signal_rate}, idler {idler_rate})"
        )));
    }
    if pair_rate < 0.0 {
        return Err(Error::arg("pair rate must be >= 0"));
    }
    Ok((pair_rate / signal_rate, pair_rate / idler_rate))
}

/// R = [g²_SI]² / (g²_II(0)·g²_SS(0)). Classical fields obey R ≤ 1; the value
/// is reported as is.
pub fn cauchy_schwarz(g2_si_peak: f64, g2_ii_0: f64, g2_ss_0: f64) -> Result<f64> {
    if !(g2_ii_0 > 0.0 && g2_ss_0 > 0.0) {
        return Err(Error::arg(format!(
            "autocorrelations must be positive (g2_II = {g2_ii_0}, g2_SS = {g2_ss_0})"
        )));
    }
    Ok(g2_si_peak * g2_si_peak / (g2_ii_0 * g2_ss_0))
}

/// Target-channel tags preceded by a herald-channel tag no more than
/// `window_ps` earlier, i.e. with a herald in `[t − window, t]`.
pub fn herald_select(
    stream: &TagStream,
    herald_channels: &[u8],
    target_channels: &[u8],
    window_ps: u64,
) -> TagStream {
    let herald = ChannelMask::new(herald_channels);
    let target = ChannelMask::new(target_channels);
    let tags = stream.tags();
    let mut ahead = 0usize;
    let mut last_herald: Option<u64> = None;
    let mut kept = Vec::new();
    for tag in tags {
        if !target.has(tag.channel) {
            continue;
        }
        while ahead < tags.len() && tags[ahead].timestamp <= tag.timestamp {
            if herald.has(tags[ahead].channel) {
                last_herald = Some(tags[ahead].timestamp);
            }
            ahead += 1;
        }
        if last_herald.is_some_and(|h| tag.timestamp - h <= window_ps) {
            kept.push(*tag);
        }
    }
    TagStream::from_parts_unchecked(*stream.header(), kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timetag::{StreamHeader, PS_PER_S};

    fn stream(tags: Vec<TimeTag>, duration: u64) -> TagStream {
        TagStream::from_unsorted(StreamHeader::new(4, DutyCycle::ungated(), duration), tags)
            .unwrap()
    }

    #[test]
    fn single_pair_lands_in_its_bin() {
        let s = stream(vec![TimeTag::new(0, 0), TimeTag::new(5_000, 1)], PS_PER_S);
        let h = cross_correlation(
            &s,
            &[0],
            &[1],
            LagRange::from_ns(0.0, 10.0, 1.0).unwrap(),
            &DutyCycle::ungated(),
        )
        .unwrap();
        assert_eq!(h.counts, vec![0, 0, 0, 0, 0, 1, 0, 0, 0, 0]);
    }

    #[test]
    fn range_must_divide() {
        assert!(LagRange::from_ns(0.0, 10.5, 1.0).is_err());
        assert!(LagRange::from_ns(10.0, 10.0, 1.0).is_err());
        assert!(LagRange::new(0, 10, 0).is_err());
        assert_eq!(LagRange::from_ns(-5.0, 10.0, 0.5).unwrap().bins(), 30);
    }

    #[test]
    fn empty_channel_sets_rejected() {
        let s = stream(vec![], 10);
        let r = LagRange::from_ns(0.0, 10.0, 1.0).unwrap();
        assert!(cross_correlation(&s, &[], &[1], r, &DutyCycle::ungated()).is_err());
        assert!(cross_correlation(&s, &[0], &[], r, &DutyCycle::ungated()).is_err());
    }

    #[test]
    fn multi_stop_counts_all_partners() {
        let s = stream(
            vec![
                TimeTag::new(0, 0),
                TimeTag::new(1_500, 1),
                TimeTag::new(2_500, 1),
                TimeTag::new(3_500, 1),
            ],
            PS_PER_S,
        );
        let h = cross_correlation(
            &s,
            &[0],
            &[1],
            LagRange::from_ns(0.0, 5.0, 1.0).unwrap(),
            &DutyCycle::ungated(),
        )
        .unwrap();
        assert_eq!(h.counts, vec![0, 1, 1, 1, 0]);
    }

    #[test]
    fn negative_lags_and_self_pairs() {
        // channel 0 against itself: a tag never pairs with itself
        let s = stream(vec![TimeTag::new(10_000, 0), TimeTag::new(12_000, 0)], PS_PER_S);
        let h = cross_correlation(
            &s,
            &[0],
            &[0],
            LagRange::from_ns(-3.0, 3.0, 1.0).unwrap(),
            &DutyCycle::ungated(),
        )
        .unwrap();
        assert_eq!(h.counts, vec![0, 1, 0, 0, 0, 1]);
    }

    #[test]
    fn off_window_tags_ignored() {
        let duty = DutyCycle::default();
        let off = 5 * crate::timetag::PS_PER_MS;
        let s = stream(vec![TimeTag::new(off, 0), TimeTag::new(off + 1000, 1)], PS_PER_S);
        let h = cross_correlation(&s, &[0], &[1], LagRange::from_ns(0.0, 10.0, 1.0).unwrap(), &duty)
            .unwrap();
        assert_eq!(h.counts.iter().sum::<u64>(), 0);
        assert_eq!(h.singles_a, 0);
    }

    #[test]
    fn normalization_matches_eq_inputs() {
        // counts 2197 at r_A = 2600/s, r_B = 3100/s, 1 ns, T = 47 s
        let t = 47 * PS_PER_S;
        let h = CorrelationHistogram {
            range: LagRange::from_ns(0.0, 2.0, 1.0).unwrap(),
            counts: vec![2197, 0],
            channels_a: vec![2],
            channels_b: vec![0],
            gated_time_ps: t,
            singles_a: 2600 * 47,
            singles_b: 3100 * 47,
        };
        let g2 = normalize_g2(&h).unwrap();
        assert!((g2[0] - 5800.0).abs() < 1.0, "{}", g2[0]);
        assert_eq!(g2[1], 0.0);
        // flat level 1.20 corresponds to ~0.45 counts per bin
        assert!((1.20 * h.accidental_level() - 0.4546).abs() < 1e-3);
    }

    #[test]
    fn normalization_needs_rates() {
        let h = CorrelationHistogram {
            range: LagRange::from_ns(0.0, 1.0, 1.0).unwrap(),
            counts: vec![1],
            channels_a: vec![0],
            channels_b: vec![1],
            gated_time_ps: PS_PER_S,
            singles_a: 0,
            singles_b: 5,
        };
        assert!(matches!(normalize_g2(&h), Err(Error::UndefinedNormalization(_))));
        let h = CorrelationHistogram {
            gated_time_ps: 0,
            singles_a: 5,
            ..h
        };
        assert!(normalize_g2(&h).is_err());
    }

    #[test]
    fn pair_rate_of_empty_histogram() {
        let h = CorrelationHistogram {
            range: LagRange::from_ns(-10.0, 50.0, 1.0).unwrap(),
            counts: vec![0; 60],
            channels_a: vec![0],
            channels_b: vec![2],
            gated_time_ps: PS_PER_S,
            singles_a: 0,
            singles_b: 0,
        };
        assert_eq!(pair_rate(&h, 30 * PS_PER_NS).unwrap(), 0.0);
        assert!(pair_rate(&h, 60 * PS_PER_NS).is_err());
        assert!(pair_rate(&h, 0).is_err());
    }

    #[test]
    fn pair_rate_sums_nonnegative_window() {
        let mut counts = vec![0u64; 60];
        counts[5] = 100; // lag -5 ns, excluded
        counts[10] = 7; // lag 0
        counts[39] = 3; // lag 29 ns
        counts[40] = 1000; // lag 30 ns, excluded
        let h = CorrelationHistogram {
            range: LagRange::from_ns(-10.0, 50.0, 1.0).unwrap(),
            counts,
            channels_a: vec![0],
            channels_b: vec![2],
            gated_time_ps: 2 * PS_PER_S,
            singles_a: 10,
            singles_b: 10,
        };
        assert_eq!(pair_rate(&h, 30 * PS_PER_NS).unwrap(), 5.0);
    }

    #[test]
    fn heralding_ratios() {
        let (s, i) = heralding(400.0, 3100.0, 2600.0).unwrap();
        assert!((s - 0.129).abs() < 1e-3);
        assert!((i - 0.154).abs() < 1e-3);
        assert_eq!(heralding(7.0, 7.0, 7.0).unwrap(), (1.0, 1.0));
        assert!(heralding(1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn cauchy_schwarz_values() {
        assert_eq!(cauchy_schwarz(1.0, 1.0, 1.0).unwrap(), 1.0);
        assert_eq!(cauchy_schwarz(2.0, 2.0, 2.0).unwrap(), 1.0);
        let r = cauchy_schwarz(5800.0, 2.03, 2.06).unwrap();
        assert_eq!(r, 5800.0 * 5800.0 / (2.03 * 2.06));
        assert!((r / 8.05e6 - 1.0).abs() < 1e-3);
        assert!(cauchy_schwarz(5.0, 0.0, 1.0).is_err());
        assert!(cauchy_schwarz(5.0, 1.0, -1.0).is_err());
    }

    #[test]
    fn herald_selection() {
        let s = stream(
            vec![
                TimeTag::new(0, 0),
                TimeTag::new(10_000, 2),
                TimeTag::new(50_000, 2),
            ],
            PS_PER_S,
        );
        let kept = herald_select(&s, &[0, 1], &[2, 3], 30_000);
        assert_eq!(kept.tags(), &[TimeTag::new(10_000, 2)]);

        let no_herald = stream(vec![TimeTag::new(10, 2), TimeTag::new(20, 3)], 100);
        assert!(herald_select(&no_herald, &[0, 1], &[2, 3], 30_000).is_empty());
    }

    #[test]
    fn herald_at_same_instant_counts() {
        // herald channel sorts after target at equal timestamps
        let s = stream(vec![TimeTag::new(100, 1), TimeTag::new(100, 3)], 1000);
        let kept = herald_select(&s, &[3], &[1], 10);
        assert_eq!(kept.len(), 1);
    }

    #[test]
    fn accumulate_requires_matching_axes() {
        let h = CorrelationHistogram {
            range: LagRange::from_ns(0.0, 2.0, 1.0).unwrap(),
            counts: vec![1, 2],
            channels_a: vec![0],
            channels_b: vec![1],
            gated_time_ps: 5,
            singles_a: 3,
            singles_b: 4,
        };
        let mut sum = h.clone();
        sum.accumulate(&h).unwrap();
        assert_eq!(sum.counts, vec![2, 4]);
        assert_eq!(sum.gated_time_ps, 10);
        let other = CorrelationHistogram {
            channels_b: vec![2],
            ..h.clone()
        };
        assert!(sum.accumulate(&other).is_err());
    }
}
