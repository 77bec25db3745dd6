//! Detector click events, tag streams and pump duty-cycle gating.
//!
//! All times are integer picoseconds. A stream is an immutable, time-ordered
//! sequence of [`TimeTag`]s together with the header describing how it was
//! acquired.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PS_PER_NS: u64 = 1_000;
pub const PS_PER_US: u64 = 1_000_000;
pub const PS_PER_MS: u64 = 1_000_000_000;
pub const PS_PER_S: u64 = 1_000_000_000_000;

/// Channel ids of the four detectors.
pub mod channel {
    pub const D1: u8 = 0;
    pub const D2: u8 = 1;
    pub const D3: u8 = 2;
    pub const D4: u8 = 3;
    pub const SIGNAL: [u8; 2] = [D1, D2];
    pub const IDLER: [u8; 2] = [D3, D4];
}

pub fn ps_to_s(ps: u64) -> f64 {
    ps as f64 * 1e-12
}

pub fn s_to_ps(s: f64) -> u64 {
    (s * PS_PER_S as f64).round() as u64
}

pub fn ns_to_ps(ns: f64) -> u64 {
    (ns * PS_PER_NS as f64).round() as u64
}

pub fn ns_to_ps_signed(ns: f64) -> i64 {
    (ns * PS_PER_NS as f64).round() as i64
}

/// A single detector click.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TimeTag {
    /// Picoseconds since run start.
    pub timestamp: u64,
    pub channel: u8,
}

impl TimeTag {
    pub fn new(timestamp: u64, channel: u8) -> Self {
        TimeTag { timestamp, channel }
    }

    fn order_key(&self) -> (u64, u8) {
        (self.timestamp, self.channel)
    }
}

/// Alternation of pump-on (pair generation) and pump-off (trap reload) periods.
///
/// Pump-on windows are `[phase + k·P, phase + k·P + on)` for every integer `k`,
/// with `P = on + off`. A duty cycle with `on == off == 0` disables gating.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DutyCycle {
    pub on_ps: u64,
    pub off_ps: u64,
    pub phase_ps: u64,
}

impl Default for DutyCycle {
    fn default() -> Self {
        DutyCycle {
            on_ps: PS_PER_MS,
            off_ps: 12 * PS_PER_MS,
            phase_ps: 0,
        }
    }
}

impl DutyCycle {
    pub fn new(on_ps: u64, off_ps: u64) -> Result<Self> {
        let duty = DutyCycle {
            on_ps,
            off_ps,
            phase_ps: 0,
        };
        duty.validate()?;
        Ok(duty)
    }

    /// Always-on: every instant counts as pump-on time.
    pub fn ungated() -> Self {
        DutyCycle {
            on_ps: 0,
            off_ps: 0,
            phase_ps: 0,
        }
    }

    pub fn with_phase(mut self, phase_ps: u64) -> Self {
        self.phase_ps = phase_ps;
        self
    }

    pub fn is_gated(&self) -> bool {
        !(self.on_ps == 0 && self.off_ps == 0)
    }

    pub fn period_ps(&self) -> u64 {
        self.on_ps.saturating_add(self.off_ps)
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_gated() && self.on_ps == 0 {
            return Err(Error::arg("duty cycle on-duration must be positive"));
        }
        Ok(())
    }

    /// Fraction of wall time the pump is on.
    pub fn on_fraction(&self) -> f64 {
        if !self.is_gated() {
            return 1.0;
        }
        self.on_ps as f64 / (self.on_ps as f64 + self.off_ps as f64)
    }

    pub fn contains(&self, t: u64) -> bool {
        if !self.is_gated() || self.off_ps == 0 {
            return true;
        }
        match self.on_ps.checked_add(self.off_ps) {
            Some(period) if period <= u64::MAX / 2 => {
                let shift = period - self.phase_ps % period;
                (t % period + shift) % period < self.on_ps
            }
            _ => {
                let period = self.on_ps as u128 + self.off_ps as u128;
                let shift = period - (self.phase_ps as u128 % period);
                (t as u128 + shift) % period < self.on_ps as u128
            }
        }
    }

    /// Pump-on time accumulated in `[phase, phase + u)`, extended periodically
    /// to negative `u`.
    fn cumulative_on(&self, u: i128) -> i128 {
        let period = self.on_ps as i128 + self.off_ps as i128;
        let on = self.on_ps as i128;
        u.div_euclid(period) * on + u.rem_euclid(period).min(on)
    }

    /// Total pump-on time inside `[start, end)`.
    pub fn gated_time(&self, start: u64, end: u64) -> Result<u64> {
        if start > end {
            return Err(Error::arg(format!(
                "inverted window: start {start} ps > end {end} ps"
            )));
        }
        if !self.is_gated() {
            return Ok(end - start);
        }
        let phase = self.phase_ps as i128;
        let on = self.cumulative_on(end as i128 - phase) - self.cumulative_on(start as i128 - phase);
        Ok(on as u64)
    }

    /// Pump-on windows intersecting `[start, end)`, clipped to it.
    pub fn windows(&self, start: u64, end: u64) -> OnWindows {
        OnWindows::new(*self, start, end)
    }
}

/// Iterator over the clipped pump-on windows of a [`DutyCycle`].
#[derive(Debug, Clone)]
pub struct OnWindows {
    duty: DutyCycle,
    next_start: i128,
    end: u64,
    lower: u64,
    done: bool,
}

impl OnWindows {
    fn new(duty: DutyCycle, start: u64, end: u64) -> Self {
        let next_start = if !duty.is_gated() || duty.off_ps == 0 {
            start as i128
        } else {
            let period = duty.on_ps as i128 + duty.off_ps as i128;
            let phase = duty.phase_ps as i128;
            let k = (start as i128 - phase).div_euclid(period);
            phase + k * period
        };
        OnWindows {
            duty,
            next_start,
            end,
            lower: start,
            done: start >= end,
        }
    }
}

impl Iterator for OnWindows {
    type Item = (u64, u64);

    fn next(&mut self) -> Option<(u64, u64)> {
        if self.done {
            return None;
        }
        if !self.duty.is_gated() || self.duty.off_ps == 0 {
            self.done = true;
            return Some((self.lower, self.end));
        }
        let period = self.duty.on_ps as i128 + self.duty.off_ps as i128;
        loop {
            let win_start = self.next_start;
            let win_end = win_start + self.duty.on_ps as i128;
            self.next_start += period;
            if win_start >= self.end as i128 {
                self.done = true;
                return None;
            }
            let lo = win_start.max(self.lower as i128) as u64;
            let hi = win_end.min(self.end as i128) as u64;
            if lo < hi {
                return Some((lo, hi));
            }
        }
    }
}

/// Acquisition metadata carried with every stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamHeader {
    pub channel_count: u8,
    pub duty: DutyCycle,
    /// Wall duration of the run. Not stored in QTT1 files; on read it is
    /// taken as one tick past the last timestamp.
    pub duration_ps: u64,
}

impl StreamHeader {
    pub fn new(channel_count: u8, duty: DutyCycle, duration_ps: u64) -> Self {
        StreamHeader {
            channel_count,
            duty,
            duration_ps,
        }
    }
}

/// Time-ordered detector clicks with their acquisition header.
///
/// Ordering is by timestamp, ties broken by ascending channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagStream {
    header: StreamHeader,
    tags: Vec<TimeTag>,
}

impl TagStream {
    /// Builds a stream, rejecting out-of-order tags and unknown channels.
    pub fn new(header: StreamHeader, tags: Vec<TimeTag>) -> Result<Self> {
        header.duty.validate()?;
        for (i, tag) in tags.iter().enumerate() {
            if tag.channel >= header.channel_count {
                return Err(Error::arg(format!(
                    "tag {i}: channel {} outside channel count {}",
                    tag.channel, header.channel_count
                )));
            }
            if i > 0 && tags[i - 1].order_key() > tag.order_key() {
                return Err(Error::arg(format!(
                    "tag {i}: timestamp {} ps (channel {}) precedes previous tag",
                    tag.timestamp, tag.channel
                )));
            }
        }
        Ok(TagStream { header, tags })
    }

    /// Builds a stream from tags in arbitrary order.
    pub fn from_unsorted(header: StreamHeader, mut tags: Vec<TimeTag>) -> Result<Self> {
        tags.sort_unstable_by_key(TimeTag::order_key);
        TagStream::new(header, tags)
    }

    pub(crate) fn from_parts_unchecked(header: StreamHeader, tags: Vec<TimeTag>) -> Self {
        debug_assert!(tags.windows(2).all(|w| w[0].order_key() <= w[1].order_key()));
        TagStream { header, tags }
    }

    pub fn empty(header: StreamHeader) -> Self {
        TagStream {
            header,
            tags: Vec::new(),
        }
    }

    pub fn header(&self) -> &StreamHeader {
        &self.header
    }

    pub fn duty(&self) -> &DutyCycle {
        &self.header.duty
    }

    pub fn duration_ps(&self) -> u64 {
        self.header.duration_ps
    }

    pub fn tags(&self) -> &[TimeTag] {
        &self.tags
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn into_tags(self) -> Vec<TimeTag> {
        self.tags
    }

    /// Replaces the duration recorded in the header.
    pub fn with_duration(mut self, duration_ps: u64) -> Self {
        self.header.duration_ps = duration_ps;
        self
    }

    pub fn count_channels(&self, channels: &[u8]) -> usize {
        self.tags
            .iter()
            .filter(|t| channels.contains(&t.channel))
            .count()
    }

    /// Pump-on time inside `[start, end)` according to this stream's duty cycle.
    pub fn gated_time(&self, start: u64, end: u64) -> Result<u64> {
        self.header.duty.gated_time(start, end)
    }

    /// Pump-on time over the whole run.
    pub fn total_gated_time(&self) -> u64 {
        self.header
            .duty
            .gated_time(0, self.header.duration_ps)
            .expect("0 <= duration")
    }
}

/// Keeps only tags that fall inside pump-on windows of `duty`.
pub fn filter_gated(stream: &TagStream, duty: &DutyCycle) -> TagStream {
    let tags = stream
        .tags
        .iter()
        .copied()
        .filter(|t| duty.contains(t.timestamp))
        .collect();
    TagStream::from_parts_unchecked(stream.header, tags)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(duty: DutyCycle, duration_ps: u64) -> StreamHeader {
        StreamHeader::new(4, duty, duration_ps)
    }

    #[test]
    fn default_duty_is_one_thirteenth() {
        let duty = DutyCycle::default();
        assert_eq!(duty.on_fraction(), 1.0 / 13.0);
    }

    #[test]
    fn gated_time_one_cycle() {
        let duty = DutyCycle::default();
        assert_eq!(duty.gated_time(0, 13 * PS_PER_MS).unwrap(), PS_PER_MS);
    }

    #[test]
    fn gated_time_130_s() {
        let duty = DutyCycle::default();
        assert_eq!(duty.gated_time(0, 130 * PS_PER_S).unwrap(), 10 * PS_PER_S);
    }

    #[test]
    fn gated_time_611_s_gives_47_s() {
        let stream = TagStream::empty(header(DutyCycle::default(), 611 * PS_PER_S));
        assert_eq!(stream.total_gated_time(), 47 * PS_PER_S);
    }

    #[test]
    fn gated_time_partial_windows() {
        let duty = DutyCycle::default();
        // half of the first on window
        assert_eq!(duty.gated_time(PS_PER_MS / 2, 5 * PS_PER_MS).unwrap(), PS_PER_MS / 2);
        // entirely inside an off window
        assert_eq!(duty.gated_time(2 * PS_PER_MS, 12 * PS_PER_MS).unwrap(), 0);
        // straddles a cycle boundary
        assert_eq!(
            duty.gated_time(12 * PS_PER_MS, 13 * PS_PER_MS + 10).unwrap(),
            10
        );
    }

    #[test]
    fn gated_time_with_phase() {
        let duty = DutyCycle::default().with_phase(5 * PS_PER_MS);
        assert_eq!(duty.gated_time(0, 5 * PS_PER_MS).unwrap(), 0);
        assert_eq!(duty.gated_time(0, 6 * PS_PER_MS).unwrap(), PS_PER_MS);
        assert!(duty.contains(5 * PS_PER_MS));
        assert!(!duty.contains(4 * PS_PER_MS));
    }

    #[test]
    fn gated_time_is_linear_in_whole_cycles() {
        let duty = DutyCycle::default();
        let period = duty.period_ps();
        for cycles in [1u64, 7, 100] {
            let one = duty.gated_time(0, cycles * period).unwrap();
            let two = duty.gated_time(0, 2 * cycles * period).unwrap();
            assert_eq!(two, 2 * one);
        }
    }

    #[test]
    fn inverted_window_is_rejected() {
        let duty = DutyCycle::default();
        assert!(matches!(duty.gated_time(10, 5), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn ungated_counts_everything() {
        let duty = DutyCycle::ungated();
        assert_eq!(duty.gated_time(3, 10).unwrap(), 7);
        assert!(duty.contains(u64::MAX));
    }

    #[test]
    fn window_boundary_is_closed_open() {
        let duty = DutyCycle::default();
        let k = 5;
        let start = k * duty.period_ps();
        assert!(duty.contains(start));
        assert!(duty.contains(start + PS_PER_MS - 1));
        assert!(!duty.contains(start + PS_PER_MS));
        assert!(!duty.contains(start - 1));
    }

    #[test]
    fn filter_gated_drops_off_window_tags() {
        let duty = DutyCycle::default();
        let tags = vec![
            TimeTag::new(2 * PS_PER_MS, 0),
            TimeTag::new(5 * PS_PER_MS, 1),
            TimeTag::new(12 * PS_PER_MS, 2),
        ];
        let stream = TagStream::new(header(duty, 13 * PS_PER_MS), tags).unwrap();
        assert!(filter_gated(&stream, &duty).is_empty());
    }

    #[test]
    fn filter_gated_keeps_window_start() {
        let duty = DutyCycle::default();
        let tags = vec![
            TimeTag::new(13 * PS_PER_MS, 0),
            TimeTag::new(14 * PS_PER_MS, 0),
        ];
        let stream = TagStream::new(header(duty, 26 * PS_PER_MS), tags).unwrap();
        let kept = filter_gated(&stream, &duty);
        assert_eq!(kept.tags(), &[TimeTag::new(13 * PS_PER_MS, 0)]);
    }

    #[test]
    fn windows_iterator_clips() {
        let duty = DutyCycle::default();
        let w: Vec<_> = duty.windows(PS_PER_MS / 2, 27 * PS_PER_MS).collect();
        assert_eq!(
            w,
            vec![
                (PS_PER_MS / 2, PS_PER_MS),
                (13 * PS_PER_MS, 14 * PS_PER_MS),
                (26 * PS_PER_MS, 27 * PS_PER_MS),
            ]
        );
        let total: u64 = w.iter().map(|(a, b)| b - a).sum();
        assert_eq!(total, duty.gated_time(PS_PER_MS / 2, 27 * PS_PER_MS).unwrap());
    }

    #[test]
    fn stream_rejects_disorder_and_bad_channel() {
        let h = header(DutyCycle::ungated(), 100);
        assert!(TagStream::new(h, vec![TimeTag::new(5, 0), TimeTag::new(4, 0)]).is_err());
        assert!(TagStream::new(h, vec![TimeTag::new(5, 1), TimeTag::new(5, 0)]).is_err());
        assert!(TagStream::new(h, vec![TimeTag::new(5, 4)]).is_err());
        let sorted =
            TagStream::from_unsorted(h, vec![TimeTag::new(5, 1), TimeTag::new(5, 0)]).unwrap();
        assert_eq!(sorted.tags()[0], TimeTag::new(5, 0));
    }
}
