//! Electrodermal and heart-rate-variability analytics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Duration, SampleSeries, Timestamp};
use crate::params::Parameters;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdaDecomposition {
    pub tonic: SampleSeries<f64>,
    pub phasic: SampleSeries<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScrPeak {
    pub t_peak: Timestamp,
    pub amplitude_us: f64,
    pub rise_time_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysioWindow {
    pub t_start: Timestamp,
    pub t_end: Timestamp,
    pub t_center: Timestamp,
    pub rmssd_ms: f64,
    pub pnn10: f64,
    pub n_intervals: usize,
    pub scr_rate_per_min: f64,
}

fn median(buf: &mut [f64]) -> f64 {
    let n = buf.len();
    let mid = n / 2;
    let (lower, m, _) = buf.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *m;
    if n % 2 == 1 {
        upper
    } else {
        0.5 * (lower.iter().copied().fold(f64::NEG_INFINITY, f64::max) + upper)
    }
}

/// Tonic level as a centered moving median over `w_tonic` (the window
/// shrinks symmetrically-clipped at the edges); phasic is the remainder.
///
/// Expects a uniformly sampled series.
pub fn decompose_eda(eda: &SampleSeries<f64>, w_tonic: Duration) -> Result<EdaDecomposition> {
    let span = eda.duration()?;
    if span < w_tonic || eda.len() < 2 {
        return Err(Error::WindowTooLong { span_us: span.0, window_us: w_tonic.0 });
    }
    let dt = span.0 as f64 / (eda.len() - 1) as f64;
    let half = (w_tonic.0 as f64 / dt).round() as usize / 2;
    let x = eda.values();
    let n = x.len();
    let mut buf = Vec::with_capacity(2 * half + 1);
    let mut tonic = Vec::with_capacity(n);
    for i in 0..n {
        let lo = i.saturating_sub(half);
        let hi = (i + half).min(n - 1);
        buf.clear();
        buf.extend_from_slice(&x[lo..=hi]);
        tonic.push(median(&mut buf));
    }
    let phasic = x.iter().zip(&tonic).map(|(v, t)| v - t).collect();
    let ts = eda.timestamps().to_vec();
    Ok(EdaDecomposition {
        tonic: SampleSeries::new(ts.clone(), tonic)?,
        phasic: SampleSeries::new(ts, phasic)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScrParams {
    pub min_amplitude: f64,
    pub refractory: Duration,
}

impl ScrParams {
    pub fn from_params(p: &Parameters) -> Self {
        ScrParams {
            min_amplitude: p.scr_min_amplitude_us,
            refractory: Duration::from_secs_f64(p.scr_refractory_s),
        }
    }
}

/// Local maxima of the phasic signal rising at least `min_amplitude` above
/// the preceding trough (the lowest sample between the peak and the nearest
/// earlier sample that is higher than it). Peaks closer than the refractory interval
/// compete: the larger amplitude wins, the earlier peak on an exact tie.
pub fn detect_scr_peaks(phasic: &SampleSeries<f64>, p: &ScrParams) -> Vec<ScrPeak> {
    let x = phasic.values();
    let ts = phasic.timestamps();
    let n = x.len();
    let mut candidates = Vec::new();
    let mut i = 1;
    while i + 1 < n {
        if x[i] > x[i - 1] {
            // plateau: walk to its end, the peak sits on its first sample
            let mut k = i;
            while k + 1 < n && x[k + 1] == x[i] {
                k += 1;
            }
            if k + 1 < n && x[k + 1] < x[i] {
                // trough: lowest point back to the nearest higher sample
                let mut m = i - 1;
                let mut j = i - 1;
                while j > 0 && x[j - 1] <= x[i] {
                    j -= 1;
                    if x[j] < x[m] {
                        m = j;
                    }
                }
                let amplitude = x[i] - x[m];
                if amplitude >= p.min_amplitude {
                    candidates.push(ScrPeak {
                        t_peak: ts[i],
                        amplitude_us: amplitude,
                        rise_time_ms: (ts[i] - ts[m]).as_millis_f64(),
                    });
                }
            }
            i = k + 1;
        } else {
            i += 1;
        }
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        candidates[b]
            .amplitude_us
            .total_cmp(&candidates[a].amplitude_us)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<ScrPeak> = Vec::new();
    for k in order {
        let c = candidates[k];
        if kept.iter().all(|q| (q.t_peak - c.t_peak).0.abs() >= p.refractory.0) {
            kept.push(c);
        }
    }
    kept.sort_by_key(|q| q.t_peak);
    kept
}

/// Root mean square of successive differences.
pub fn rmssd(ibi: &[f64]) -> Result<f64> {
    if ibi.len() < 2 {
        return Err(Error::InsufficientData(format!("rmssd needs 2 intervals, got {}", ibi.len())));
    }
    let ss: f64 = ibi.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum();
    Ok((ss / (ibi.len() - 1) as f64).sqrt())
}

/// Fraction of successive differences strictly greater than 10 ms.
pub fn pnn10(ibi: &[f64]) -> Result<f64> {
    if ibi.len() < 2 {
        return Err(Error::InsufficientData(format!("pnn10 needs 2 intervals, got {}", ibi.len())));
    }
    let over = ibi.windows(2).filter(|w| (w[1] - w[0]).abs() > 10.0).count();
    Ok(over as f64 / (ibi.len() - 1) as f64)
}

/// Drops physiologically impossible intervals; returns the survivors and the
/// number dropped.
pub fn filter_ibi(ibi: &SampleSeries<f64>, min_ms: f64, max_ms: f64) -> (SampleSeries<f64>, usize) {
    let kept: Vec<(Timestamp, f64)> = ibi
        .iter()
        .filter(|(_, v)| (min_ms..=max_ms).contains(*v))
        .map(|(t, v)| (t, *v))
        .collect();
    let dropped = ibi.len() - kept.len();
    (SampleSeries::from_pairs(kept).expect("subset of a valid series"), dropped)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowParams {
    pub window: Duration,
    pub step: Duration,
    pub min_beats: usize,
}

impl WindowParams {
    pub fn from_params(p: &Parameters) -> Self {
        WindowParams {
            window: Duration::from_secs_f64(p.hrv_window_s),
            step: Duration::from_secs_f64(p.hrv_step_s),
            min_beats: p.hrv_min_beats,
        }
    }
}

/// Window start times `first, first + step, …` for windows that fit inside
/// `[first, last]`.
pub fn window_starts(first: Timestamp, last: Timestamp, window: Duration, step: Duration) -> Vec<Timestamp> {
    let mut out = Vec::new();
    if step.0 <= 0 {
        return out;
    }
    let mut s = first;
    while s + window <= last {
        out.push(s);
        s = s + step;
    }
    if out.is_empty() && first <= last {
        // sessions shorter than one window still get one (short) window
        out.push(first);
    }
    out
}

/// Sliding-window HRV and SCR rate. Windows with fewer than `min_beats`
/// intervals are omitted.
pub fn physio_windows(ibi: &SampleSeries<f64>, scr: &[ScrPeak], p: &WindowParams) -> Vec<PhysioWindow> {
    let (Some(first), Some(last)) = (ibi.first_time(), ibi.last_time()) else {
        return Vec::new();
    };
    let starts = window_starts(first, last, p.window, p.step);
    crate::par::map(&starts, |&s| {
        let e = s + p.window;
        let vals = &ibi.values()[ibi.index_range(s, e)];
        if vals.len() < p.min_beats.max(2) {
            return None;
        }
        let peaks = scr.iter().filter(|q| q.t_peak >= s && q.t_peak < e).count();
        Some(PhysioWindow {
            t_start: s,
            t_end: e,
            t_center: s.midpoint(e),
            rmssd_ms: rmssd(vals).ok()?,
            pnn10: pnn10(vals).ok()?,
            n_intervals: vals.len(),
            scr_rate_per_min: peaks as f64 / p.window.as_minutes_f64(),
        })
    })
    .into_iter()
    .flatten()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform(vals: Vec<f64>, rate_hz: f64) -> SampleSeries<f64> {
        let period = (1e6 / rate_hz).round() as i64;
        SampleSeries::new((0..vals.len()).map(|i| Timestamp(i as i64 * period)).collect(), vals).unwrap()
    }

    fn brute_rmssd(x: &[f64]) -> f64 {
        let mut acc = 0.0;
        let mut count = 0;
        for i in 1..x.len() {
            let d = x[i] - x[i - 1];
            acc += d * d;
            count += 1;
        }
        (acc / count as f64).sqrt()
    }

    fn brute_pnn10(x: &[f64]) -> f64 {
        let mut over = 0;
        for i in 1..x.len() {
            if (x[i] - x[i - 1]).abs() > 10.0 {
                over += 1;
            }
        }
        over as f64 / (x.len() - 1) as f64
    }

    #[test]
    fn hrv_worked_example() {
        let x = [800.0, 810.0, 790.0];
        assert!((rmssd(&x).unwrap() - 15.811_388_300_841_896).abs() < 1e-12);
        assert_eq!(pnn10(&x).unwrap(), 0.5);
        assert_eq!(rmssd(&[800.0; 10]).unwrap(), 0.0);
        assert_eq!(pnn10(&[800.0; 10]).unwrap(), 0.0);
        let steps: Vec<f64> = (0..10).map(|i| 800.0 + 11.0 * i as f64).collect();
        assert_eq!(pnn10(&steps).unwrap(), 1.0);
        assert!(matches!(rmssd(&[800.0]), Err(Error::InsufficientData(_))));
        assert!(matches!(pnn10(&[]), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn rmssd_is_order_sensitive() {
        let a = [800.0, 900.0, 800.0, 900.0];
        let b = [800.0, 800.0, 900.0, 900.0];
        assert_ne!(rmssd(&a).unwrap(), rmssd(&b).unwrap());
    }

    #[test]
    fn constant_eda() {
        let d = decompose_eda(&uniform(vec![0.3; 100], 4.0), Duration::from_secs_f64(8.0)).unwrap();
        assert!(d.tonic.values().iter().all(|&v| v == 0.3));
        assert!(d.phasic.values().iter().all(|&v| v == 0.0));
        assert!(detect_scr_peaks(&d.phasic, &ScrParams { min_amplitude: 0.05, refractory: Duration(1_000_000) }).is_empty());
    }

    #[test]
    fn ramp_has_no_phasic_away_from_edges() {
        let x: Vec<f64> = (0..200).map(|i| 0.2 + 0.001 * i as f64).collect();
        let d = decompose_eda(&uniform(x, 4.0), Duration::from_secs_f64(8.0)).unwrap();
        for v in &d.phasic.values()[16..184] {
            assert!(v.abs() < 1e-6);
        }
    }

    #[test]
    fn gaussian_bump_is_phasic() {
        let x: Vec<f64> = (0..240)
            .map(|i| {
                let t = i as f64 / 4.0;
                0.3 + 0.2 * (-0.5 * ((t - 30.0) / 0.5f64).powi(2)).exp()
            })
            .collect();
        let d = decompose_eda(&uniform(x, 4.0), Duration::from_secs_f64(8.0)).unwrap();
        let peak = d.phasic.values().iter().copied().fold(f64::MIN, f64::max);
        assert!((peak - 0.2).abs() < 0.02);
        let p = detect_scr_peaks(&d.phasic, &ScrParams { min_amplitude: 0.05, refractory: Duration(1_000_000) });
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].t_peak, Timestamp(30_000_000));
    }

    #[test]
    fn short_series_rejected() {
        assert!(matches!(
            decompose_eda(&uniform(vec![0.3; 10], 4.0), Duration::from_secs_f64(8.0)),
            Err(Error::WindowTooLong { .. })
        ));
    }

    #[test]
    fn refractory_keeps_larger_peak() {
        let mut x = vec![0.0; 40];
        x[10] = 0.1;
        x[12] = 0.3; // 0.5 s later at 4 Hz
        let s = uniform(x, 4.0);
        let p = detect_scr_peaks(&s, &ScrParams { min_amplitude: 0.05, refractory: Duration(1_000_000) });
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].t_peak, Timestamp(3_000_000));

        let mut tie = vec![0.0; 40];
        tie[10] = 0.2;
        tie[12] = 0.2;
        let p = detect_scr_peaks(&uniform(tie, 4.0), &ScrParams { min_amplitude: 0.05, refractory: Duration(1_000_000) });
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].t_peak, Timestamp(2_500_000));
    }

    #[test]
    fn windows_examples() {
        let ibi = SampleSeries::new(
            (1..=400).map(|i| Timestamp(i * 800_000)).collect(),
            vec![800.0; 400],
        )
        .unwrap();
        let p = WindowParams { window: Duration::from_secs_f64(60.0), step: Duration::from_secs_f64(5.0), min_beats: 20 };
        let w = physio_windows(&ibi, &[], &p);
        assert!(!w.is_empty());
        assert!(w.iter().all(|w| w.rmssd_ms == 0.0 && w.pnn10 == 0.0 && w.scr_rate_per_min == 0.0));

        let first = ibi.first_time().unwrap();
        let peaks: Vec<ScrPeak> = [10.0, 20.0, 30.0]
            .iter()
            .map(|s| ScrPeak { t_peak: first + Duration::from_secs_f64(*s), amplitude_us: 0.2, rise_time_ms: 1000.0 })
            .collect();
        let w = physio_windows(&ibi, &peaks, &p);
        assert_eq!(w[0].scr_rate_per_min, 3.0);

        let sparse = SampleSeries::new((0..5).map(|i| Timestamp(i * 12_000_000)).collect(), vec![800.0; 5]).unwrap();
        assert!(physio_windows(&sparse, &[], &p).is_empty());
    }

    #[test]
    fn oracle_equivalence_on_random_series() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..1000 {
            let n = rng.random_range(2..120);
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(400.0..1400.0)).collect();
            let a = rmssd(&x).unwrap();
            let b = brute_rmssd(&x);
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
            assert_eq!(pnn10(&x).unwrap(), brute_pnn10(&x));
        }
    }

    proptest! {
        #[test]
        fn decomposition_conserves_input(vals in proptest::collection::vec(0.0f64..20.0, 40..200)) {
            let s = uniform(vals, 4.0);
            let d = decompose_eda(&s, Duration::from_secs_f64(8.0)).unwrap();
            for ((x, t), p) in s.values().iter().zip(d.tonic.values()).zip(d.phasic.values()) {
                prop_assert!((t + p - x).abs() <= 1e-9);
            }
        }

        #[test]
        fn peaks_respect_refractory(vals in proptest::collection::vec(0.0f64..1.0, 3..300)) {
            let p = ScrParams { min_amplitude: 0.05, refractory: Duration(1_000_000) };
            let peaks = detect_scr_peaks(&uniform(vals, 4.0), &p);
            for w in peaks.windows(2) {
                prop_assert!(w[1].t_peak - w[0].t_peak >= p.refractory);
            }
            prop_assert!(peaks.iter().all(|q| q.amplitude_us >= p.min_amplitude));
        }

        #[test]
        fn hrv_is_shift_invariant(
            x in proptest::collection::vec(400.0f64..1400.0, 2..100),
            c in -300.0f64..300.0,
        ) {
            let y: Vec<f64> = x.iter().map(|v| v + c).collect();
            prop_assert!((rmssd(&x).unwrap() - rmssd(&y).unwrap()).abs() < 1e-9);
            // differences near the 10 ms boundary may round across it
            let near = x.windows(2).any(|w| ((w[1] - w[0]).abs() - 10.0).abs() < 1e-9);
            if !near {
                prop_assert_eq!(pnn10(&x).unwrap(), pnn10(&y).unwrap());
            }
        }
    }
}
