//! Timeline primitives shared by every stream.
//!
//! Time is integer microseconds since the Unix epoch (UTC). Intervals are
//! half-open `[t0, t1)` throughout the crate.

use std::fmt;
use std::ops::{Add, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp(pub i64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Duration(pub i64);

impl Timestamp {
    pub fn micros(self) -> i64 {
        self.0
    }

    pub fn from_secs_f64(secs: f64) -> Self {
        Timestamp((secs * 1e6).round() as i64)
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 * 1e-6
    }

    /// Midpoint, rounded toward negative infinity.
    pub fn midpoint(self, other: Timestamp) -> Timestamp {
        Timestamp(self.0 + (other.0 - self.0).div_euclid(2))
    }
}

impl Duration {
    pub const ZERO: Duration = Duration(0);

    pub fn from_secs_f64(secs: f64) -> Self {
        Duration((secs * 1e6).round() as i64)
    }

    pub fn from_millis(ms: i64) -> Self {
        Duration(ms * 1_000)
    }

    pub fn micros(self) -> i64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 * 1e-6
    }

    pub fn as_millis_f64(self) -> f64 {
        self.0 as f64 * 1e-3
    }

    pub fn as_minutes_f64(self) -> f64 {
        self.0 as f64 / 60e6
    }
}

impl Sub for Timestamp {
    type Output = Duration;
    fn sub(self, rhs: Timestamp) -> Duration {
        Duration(self.0 - rhs.0)
    }
}

impl Add<Duration> for Timestamp {
    type Output = Timestamp;
    fn add(self, rhs: Duration) -> Timestamp {
        Timestamp(self.0 + rhs.0)
    }
}

impl Sub<Duration> for Timestamp {
    type Output = Timestamp;
    fn sub(self, rhs: Duration) -> Timestamp {
        Timestamp(self.0 - rhs.0)
    }
}

impl Add for Duration {
    type Output = Duration;
    fn add(self, rhs: Duration) -> Duration {
        Duration(self.0 + rhs.0)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}µs", self.0)
    }
}

/// A timestamped stream: parallel timestamp and value vectors with strictly
/// increasing timestamps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSeries<V> {
    timestamps: Vec<Timestamp>,
    values: Vec<V>,
}

impl<V> Default for SampleSeries<V> {
    fn default() -> Self {
        Self {
            timestamps: Vec::new(),
            values: Vec::new(),
        }
    }
}

impl<V> SampleSeries<V> {
    /// Builds a series, checking equal lengths and strict monotonicity.
    pub fn new(timestamps: Vec<Timestamp>, values: Vec<V>) -> Result<Self> {
        if timestamps.len() != values.len() {
            return Err(Error::Dim {
                expected: timestamps.len(),
                got: values.len(),
            });
        }
        if let Some(i) = timestamps.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::InvalidRange {
                t0: timestamps[i].0,
                t1: timestamps[i + 1].0,
            });
        }
        Ok(Self { timestamps, values })
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (Timestamp, V)>) -> Result<Self> {
        let (timestamps, values) = pairs.into_iter().unzip();
        Self::new(timestamps, values)
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn timestamps(&self) -> &[Timestamp] {
        &self.timestamps
    }

    pub fn values(&self) -> &[V] {
        &self.values
    }

    pub fn first_time(&self) -> Option<Timestamp> {
        self.timestamps.first().copied()
    }

    pub fn last_time(&self) -> Option<Timestamp> {
        self.timestamps.last().copied()
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = (Timestamp, &V)> + '_ {
        self.timestamps.iter().copied().zip(self.values.iter())
    }

    pub fn into_parts(self) -> (Vec<Timestamp>, Vec<V>) {
        (self.timestamps, self.values)
    }

    /// Last timestamp minus first.
    pub fn duration(&self) -> Result<Duration> {
        match (self.timestamps.first(), self.timestamps.last()) {
            (Some(&a), Some(&b)) => Ok(b - a),
            _ => Err(Error::EmptyStream),
        }
    }

    /// Index range of samples with `t0 <= t < t1`.
    pub fn index_range(&self, t0: Timestamp, t1: Timestamp) -> std::ops::Range<usize> {
        let lo = self.timestamps.partition_point(|&t| t < t0);
        let hi = self.timestamps.partition_point(|&t| t < t1);
        lo..hi.max(lo)
    }

    pub fn map<W>(&self, f: impl FnMut(&V) -> W) -> SampleSeries<W> {
        SampleSeries {
            timestamps: self.timestamps.clone(),
            values: self.values.iter().map(f).collect(),
        }
    }
}

impl<V: Clone> SampleSeries<V> {
    /// Samples with `t0 <= t < t1`, order preserved.
    pub fn slice_by_time(&self, t0: Timestamp, t1: Timestamp) -> Result<Self> {
        if t0 > t1 {
            return Err(Error::InvalidRange { t0: t0.0, t1: t1.0 });
        }
        let r = self.index_range(t0, t1);
        Ok(Self {
            timestamps: self.timestamps[r.clone()].to_vec(),
            values: self.values[r].to_vec(),
        })
    }

    /// Appends `other`, which must start strictly after this series ends.
    pub fn concat(mut self, other: Self) -> Result<Self> {
        if let (Some(a), Some(b)) = (self.last_time(), other.first_time()) {
            if b <= a {
                return Err(Error::InvalidRange { t0: a.0, t1: b.0 });
            }
        }
        self.timestamps.extend(other.timestamps);
        self.values.extend(other.values);
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn uniform(n: usize, rate_hz: f64) -> SampleSeries<f64> {
        let period = (1e6 / rate_hz).round() as i64;
        SampleSeries::new(
            (0..n).map(|i| Timestamp(i as i64 * period)).collect(),
            (0..n).map(|i| i as f64).collect(),
        )
        .unwrap()
    }

    #[test]
    fn duration_examples() {
        let one = SampleSeries::new(vec![Timestamp(5)], vec![1.0]).unwrap();
        assert_eq!(one.duration().unwrap(), Duration(0));
        let two = SampleSeries::new(vec![Timestamp(0), Timestamp(1_000_000)], vec![0.0, 1.0]).unwrap();
        assert_eq!(two.duration().unwrap(), Duration(1_000_000));
        assert_eq!(uniform(300, 200.0).duration().unwrap(), Duration(1_495_000));
        assert!(matches!(
            SampleSeries::<f64>::default().duration(),
            Err(Error::EmptyStream)
        ));
    }

    #[test]
    fn slice_examples() {
        let s = uniform(10, 1.0);
        let all = s.slice_by_time(Timestamp(0), Timestamp(10_000_000)).unwrap();
        assert_eq!(all, s);
        let end = s.last_time().unwrap();
        assert!(s.slice_by_time(end + Duration(1), end + Duration(2)).unwrap().is_empty());
        let mid = s.slice_by_time(Timestamp(2_000_000), Timestamp(5_000_000)).unwrap();
        assert_eq!(mid.len(), 3);
        assert_eq!(mid.values(), &[2.0, 3.0, 4.0]);
        assert!(matches!(
            s.slice_by_time(Timestamp(5), Timestamp(4)),
            Err(Error::InvalidRange { .. })
        ));
    }

    #[test]
    fn rejects_non_monotonic() {
        assert!(SampleSeries::new(vec![Timestamp(1), Timestamp(1)], vec![0, 0]).is_err());
        assert!(SampleSeries::new(vec![Timestamp(1)], vec![0, 0]).is_err());
    }

    proptest! {
        #[test]
        fn slices_partition_the_series(
            n in 1usize..200,
            mut cuts in proptest::collection::vec(0i64..250_000, 0..6),
        ) {
            let s = uniform(n, 1000.0);
            cuts.sort_unstable();
            let (lo, hi) = (s.first_time().unwrap().0, s.last_time().unwrap().0 + 1);
            let mut bounds = vec![lo];
            bounds.extend(cuts.iter().copied().filter(|&c| c > lo && c < hi));
            bounds.push(hi);
            bounds.dedup();
            let mut joined = SampleSeries::default();
            // slice durations plus the gaps between adjacent slices add up
            let mut total = Duration::ZERO;
            let mut prev_last: Option<Timestamp> = None;
            for w in bounds.windows(2) {
                let part = s.slice_by_time(Timestamp(w[0]), Timestamp(w[1])).unwrap();
                if let Ok(d) = part.duration() {
                    prop_assert!(d.0 >= 0);
                    if let Some(p) = prev_last {
                        total = total + (part.first_time().unwrap() - p);
                    }
                    total = total + d;
                    prev_last = part.last_time();
                }
                joined = joined.concat(part).unwrap();
            }
            prop_assert_eq!(&joined, &s);
            prop_assert_eq!(total, s.duration().unwrap());
        }
    }
}
