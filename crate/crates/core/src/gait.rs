//! Stride segmentation from foot-mounted gyroscopes and stride-time
//! stability metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::ImuSample;
use crate::model::{Duration, SampleSeries, Timestamp};
use crate::params::Parameters;
use crate::physio::window_starts;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Foot {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrideEvent {
    pub t_heel_strike: Timestamp,
    pub foot: Foot,
    pub t_midswing_peak: Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaitMetrics {
    pub step_count: usize,
    pub mean_stride_time_s: f64,
    pub stv_s: f64,
    pub stv_cv: f64,
    /// `None` unless both feet contribute stride times.
    pub asymmetry: Option<f64>,
    /// Stride times dropped as standing pauses.
    pub excluded_strides: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaitWindow {
    pub t_start: Timestamp,
    pub t_end: Timestamp,
    pub t_center: Timestamp,
    pub metrics: GaitMetrics,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Gx,
    Gy,
    Gz,
}

impl Axis {
    pub fn parse(s: &str) -> Result<Axis> {
        match s {
            "gx" => Ok(Axis::Gx),
            "gy" => Ok(Axis::Gy),
            "gz" => Ok(Axis::Gz),
            other => Err(Error::manifest("/parameters/gait_axis", format!("unknown axis `{other}`"))),
        }
    }

    fn pick(self, s: &ImuSample) -> f64 {
        match self {
            Axis::Gx => s.gx,
            Axis::Gy => s.gy,
            Axis::Gz => s.gz,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrideParams {
    pub axis: Axis,
    pub omega_min: f64,
    pub min_gap: Duration,
    pub max_stride: Duration,
    pub min_rate_hz: f64,
}

impl StrideParams {
    pub fn from_params(p: &Parameters) -> Result<Self> {
        Ok(StrideParams {
            axis: Axis::parse(&p.gait_axis)?,
            omega_min: p.omega_min,
            min_gap: Duration::from_secs_f64(p.min_stride_gap_s),
            max_stride: Duration::from_secs_f64(p.max_stride_time_s),
            min_rate_hz: p.min_imu_rate_hz,
        })
    }
}

impl Default for StrideParams {
    fn default() -> Self {
        StrideParams::from_params(&Parameters::default()).expect("default axis")
    }
}

/// Sampling rate from the median inter-sample interval.
pub fn median_rate_hz(ts: &[Timestamp]) -> Option<f64> {
    if ts.len() < 2 {
        return None;
    }
    let mut dt: Vec<i64> = ts.windows(2).map(|w| (w[1] - w[0]).0).collect();
    let mid = dt.len() / 2;
    let (_, m, _) = dt.select_nth_unstable(mid);
    Some(1e6 / *m as f64)
}

/// Topographic prominence with the base search bounded to `reach` samples
/// on either side.
fn prominence(x: &[f64], i: usize, reach: usize) -> f64 {
    let peak = x[i];
    let mut left = peak;
    for k in (i.saturating_sub(reach)..i).rev() {
        if x[k] > peak {
            break;
        }
        left = left.min(x[k]);
    }
    let mut right = peak;
    for &v in x.iter().skip(i + 1).take(reach) {
        if v > peak {
            break;
        }
        right = right.min(v);
    }
    peak - left.max(right)
}

/// Mid-swing peaks of the chosen gyro axis, each paired with the first
/// negative-going zero crossing that follows it (linearly interpolated).
pub fn detect_strides(imu: &SampleSeries<ImuSample>, foot: Foot, p: &StrideParams) -> Result<Vec<StrideEvent>> {
    let ts = imu.timestamps();
    let Some(rate) = median_rate_hz(ts) else {
        return Ok(Vec::new());
    };
    if rate < p.min_rate_hz {
        return Err(Error::Rate { rate_hz: rate, min_hz: p.min_rate_hz });
    }
    let x: Vec<f64> = imu.values().iter().map(|s| p.axis.pick(s)).collect();
    let n = x.len();
    let reach = ((p.max_stride.as_secs_f64() * rate).ceil() as usize).max(1);

    let mut peaks = Vec::new();
    let mut i = 1;
    while i + 1 < n {
        if x[i] > x[i - 1] {
            let mut k = i;
            while k + 1 < n && x[k + 1] == x[i] {
                k += 1;
            }
            if k + 1 < n && x[k + 1] < x[i] && prominence(&x, i, reach) >= p.omega_min {
                peaks.push(i);
            }
            i = k + 1;
        } else {
            i += 1;
        }
    }

    // spacing: tallest first, earlier on ties
    let mut order = peaks.clone();
    order.sort_by(|&a, &b| x[b].total_cmp(&x[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for c in order {
        if kept.iter().all(|&q| (ts[q] - ts[c]).0.abs() >= p.min_gap.0) {
            kept.push(c);
        }
    }
    kept.sort_unstable();

    let mut events: Vec<StrideEvent> = Vec::with_capacity(kept.len());
    for (j, &pk) in kept.iter().enumerate() {
        let stop = kept.get(j + 1).copied().unwrap_or(n - 1);
        let Some(k) = (pk..stop).find(|&k| x[k] > 0.0 && x[k + 1] <= 0.0) else {
            continue;
        };
        let frac = x[k] / (x[k] - x[k + 1]);
        let dt = (ts[k + 1] - ts[k]).0 as f64;
        let hs = ts[k] + Duration((frac * dt).round() as i64);
        if let Some(prev) = events.last() {
            if hs - prev.t_heel_strike < p.min_gap {
                continue;
            }
        }
        events.push(StrideEvent { t_heel_strike: hs, foot, t_midswing_peak: ts[pk] });
    }
    Ok(events)
}

fn stride_times(events: &[StrideEvent]) -> Vec<f64> {
    events
        .windows(2)
        .map(|w| (w[1].t_heel_strike - w[0].t_heel_strike).as_secs_f64())
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Pooled stride-time statistics over both feet. Stride times above
/// `max_stride` are treated as pauses and left out.
pub fn gait_metrics(left: &[StrideEvent], right: &[StrideEvent], max_stride: Duration) -> Result<GaitMetrics> {
    if left.len() < 2 && right.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "need 2 heel strikes on one foot, got {} left and {} right",
            left.len(),
            right.len()
        )));
    }
    let limit = max_stride.as_secs_f64();
    let mut excluded = 0;
    let mut keep = |v: Vec<f64>| -> Vec<f64> {
        let before = v.len();
        let out: Vec<f64> = v.into_iter().filter(|&s| s <= limit).collect();
        excluded += before - out.len();
        out
    };
    let l = keep(stride_times(left));
    let r = keep(stride_times(right));
    let all: Vec<f64> = l.iter().chain(&r).copied().collect();
    if all.is_empty() {
        return Err(Error::InsufficientData("every stride exceeds the pause limit".into()));
    }
    let m = mean(&all);
    // deviations from the first stride keep identical strides at exactly 0
    let stv = if all.len() > 1 {
        let d: Vec<f64> = all.iter().map(|s| s - all[0]).collect();
        let dm = mean(&d);
        (d.iter().map(|x| (x - dm).powi(2)).sum::<f64>() / (all.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    let asymmetry = (!l.is_empty() && !r.is_empty()).then(|| (mean(&l) - mean(&r)).abs() / m);
    Ok(GaitMetrics {
        step_count: left.len() + right.len(),
        mean_stride_time_s: m,
        stv_s: stv,
        stv_cv: stv / m,
        asymmetry,
        excluded_strides: excluded,
    })
}

/// Sliding-window gait metrics; events belong to the window holding their
/// heel strike. Windows without enough strikes are omitted.
pub fn gait_windows(
    left: &[StrideEvent],
    right: &[StrideEvent],
    window: Duration,
    step: Duration,
    max_stride: Duration,
) -> Vec<GaitWindow> {
    let all = left.iter().chain(right).map(|e| e.t_heel_strike);
    let (Some(first), Some(last)) = (all.clone().min(), all.max()) else {
        return Vec::new();
    };
    let starts = window_starts(first, last, window, step);
    let within = |ev: &[StrideEvent], s: Timestamp, e: Timestamp| -> Vec<StrideEvent> {
        ev.iter().filter(|x| x.t_heel_strike >= s && x.t_heel_strike < e).copied().collect()
    };
    crate::par::map(&starts, |&s| {
        let e = s + window;
        let metrics = gait_metrics(&within(left, s, e), &within(right, s, e), max_stride).ok()?;
        Some(GaitWindow { t_start: s, t_end: e, t_center: s.midpoint(e), metrics })
    })
    .into_iter()
    .flatten()
    .collect()
}
