//! Fixation detection and attention metrics.
//!
//! Gaze is first stabilized against head motion by subtracting the
//! cumulative scene-camera shift, then swept with a dispersion-threshold
//! (I-DT) detector whose threshold adapts to the local sample noise.
//! Fixations are looked up in semantic label rasters to attribute dwell time
//! to scene classes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{GazeSample, HeadFlow};
use crate::model::{Duration, SampleSeries, Timestamp};
use crate::params::Parameters;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fixation {
    pub t_start: Timestamp,
    pub t_end: Timestamp,
    /// Mean of the head-motion-compensated samples.
    pub centroid: [f64; 2],
    /// Mean of the raw scene-camera samples over the same interval; this is
    /// what gets looked up in scene-frame label rasters.
    pub scene_centroid: [f64; 2],
    pub disp_h: f64,
    pub disp_v: f64,
    pub n_samples: usize,
    /// Dispersion threshold in force when the fixation was emitted.
    pub theta: f64,
}

impl Fixation {
    pub fn duration(&self) -> Duration {
        self.t_end - self.t_start
    }

    pub fn midpoint(&self) -> Timestamp {
        self.t_start.midpoint(self.t_end)
    }
}

/// A semantic segmentation of one scene frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRaster {
    pub t: Timestamp,
    pub width: usize,
    pub height: usize,
    /// Row-major class ids.
    pub classes: Vec<i64>,
    pub legend: BTreeMap<i64, String>,
}

impl LabelRaster {
    /// Class under a normalized point; the cell is `floor(x * W), floor(y * H)`
    /// with the far edge folded into the last cell.
    pub fn class_at(&self, x: f64, y: f64) -> Option<&str> {
        if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
            return None;
        }
        let col = ((x * self.width as f64).floor() as usize).min(self.width - 1);
        let row = ((y * self.height as f64).floor() as usize).min(self.height - 1);
        let id = self.classes[row * self.width + col];
        self.legend.get(&id).map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GazeTargetRecord {
    pub fixation: Fixation,
    pub class_name: String,
    pub raster_t: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AttentionMetrics {
    pub fixation_rate_per_min: f64,
    pub mean_duration_ms: f64,
    pub mean_disp_h: f64,
    pub mean_disp_v: f64,
    pub dwell_by_class: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdtParams {
    pub theta_base: f64,
    pub k_noise: f64,
    pub min_duration: Duration,
    pub min_confidence: f64,
    pub noise_window: Duration,
}

impl IdtParams {
    pub fn from_params(p: &Parameters) -> Self {
        IdtParams {
            theta_base: p.theta_base,
            k_noise: p.k_noise,
            min_duration: Duration::from_millis(p.min_fix_duration_ms),
            min_confidence: p.min_confidence,
            noise_window: Duration::from_millis(p.noise_window_ms),
        }
    }
}

impl Default for IdtParams {
    fn default() -> Self {
        Self::from_params(&Parameters::default())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Compensated {
    pub gaze: SampleSeries<GazeSample>,
    /// Indices of samples outside the flow stream's time range, passed
    /// through unchanged.
    pub uncovered: Vec<usize>,
}

/// World-stabilized gaze: each sample minus the sum of all flow
/// displacements stamped at or before it.
pub fn compensate_head_motion(gaze: &SampleSeries<GazeSample>, flow: &SampleSeries<HeadFlow>) -> Compensated {
    let (first, last) = match (flow.first_time(), flow.last_time()) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Compensated {
                gaze: gaze.clone(),
                uncovered: (0..gaze.len()).collect(),
            }
        }
    };
    let ft = flow.timestamps();
    let fv = flow.values();
    let mut j = 0usize;
    let (mut cu, mut cv) = (0.0, 0.0);
    let mut uncovered = Vec::new();
    let mut out = Vec::with_capacity(gaze.len());
    for (i, (t, g)) in gaze.iter().enumerate() {
        while j < ft.len() && ft[j] <= t {
            cu += fv[j].du;
            cv += fv[j].dv;
            j += 1;
        }
        if t < first || t > last {
            uncovered.push(i);
            out.push(*g);
        } else {
            out.push(GazeSample {
                gx: g.gx - cu,
                gy: g.gy - cv,
                confidence: g.confidence,
            });
        }
    }
    Compensated {
        gaze: SampleSeries::new(gaze.timestamps().to_vec(), out).expect("same timeline"),
        uncovered,
    }
}

/// Horizontal and vertical extent (max − min) of a window.
pub fn dispersion(window: &[GazeSample]) -> Result<(f64, f64)> {
    let first = window.first().ok_or(Error::EmptyWindow)?;
    let (mut x0, mut x1, mut y0, mut y1) = (first.gx, first.gx, first.gy, first.gy);
    for s in &window[1..] {
        x0 = x0.min(s.gx);
        x1 = x1.max(s.gx);
        y0 = y0.min(s.gy);
        y1 = y1.max(s.gy);
    }
    Ok((x1 - x0, y1 - y0))
}

fn median_in_place(v: &mut [f64]) -> f64 {
    let n = v.len();
    let mid = n / 2;
    let (_, m, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *m;
    if n % 2 == 1 {
        upper
    } else {
        let lower = v[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

/// Median absolute deviation scaled to a normal-consistent sigma.
pub fn robust_sigma(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let mut v = values.to_vec();
    let med = median_in_place(&mut v);
    for x in v.iter_mut() {
        *x = (*x - med).abs();
    }
    1.4826 * median_in_place(&mut v)
}

struct Extent {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Extent {
    fn of(s: &[GazeSample]) -> Self {
        let mut e = Extent {
            x0: f64::INFINITY,
            x1: f64::NEG_INFINITY,
            y0: f64::INFINITY,
            y1: f64::NEG_INFINITY,
        };
        for g in s {
            e.push(g);
        }
        e
    }

    fn push(&mut self, g: &GazeSample) {
        self.x0 = self.x0.min(g.gx);
        self.x1 = self.x1.max(g.gx);
        self.y0 = self.y0.min(g.gy);
        self.y1 = self.y1.max(g.gy);
    }

    fn with(&self, g: &GazeSample) -> f64 {
        (self.x1.max(g.gx) - self.x0.min(g.gx)) + (self.y1.max(g.gy) - self.y0.min(g.gy))
    }

    fn total(&self) -> f64 {
        (self.x1 - self.x0) + (self.y1 - self.y0)
    }
}

/// Dispersion-threshold fixation detection.
///
/// Samples under `min_confidence` are dropped first. From each start sample
/// the window is first grown to span `min_duration`; if its dispersion
/// (`disp_h + disp_v`) is within the threshold it keeps growing until the
/// next sample would break it, and is emitted as a fixation. Otherwise the
/// start advances by one sample. The threshold is
/// `max(theta_base, k_noise * 1.4826 * MAD)` of sample-to-sample
/// displacements over the trailing noise window.
pub fn detect_fixations_idt(gaze: &SampleSeries<GazeSample>, p: &IdtParams) -> Vec<Fixation> {
    let (ts, gs): (Vec<Timestamp>, Vec<GazeSample>) = gaze
        .iter()
        .filter(|(_, g)| g.confidence >= p.min_confidence)
        .map(|(t, g)| (t, *g))
        .unzip();
    let n = ts.len();
    let step: Vec<f64> = (0..n)
        .map(|k| if k == 0 { f64::NAN } else { (gs[k].gx - gs[k - 1].gx).hypot(gs[k].gy - gs[k - 1].gy) })
        .collect();
    let mut fixations = Vec::new();
    let mut scratch = Vec::new();
    let mut i = 0usize;
    let mut j_min = 0usize;
    while i < n {
        j_min = j_min.max(i);
        while j_min < n && ts[j_min] - ts[i] < p.min_duration {
            j_min += 1;
        }
        if j_min >= n {
            break;
        }
        let theta = if p.k_noise > 0.0 {
            // displacements ending inside the trailing window
            let lo = ts.partition_point(|&t| t < ts[i] - p.noise_window);
            scratch.clear();
            scratch.extend(step[(lo + 1).min(i + 1)..=i].iter().copied());
            p.theta_base.max(p.k_noise * robust_sigma(&scratch))
        } else {
            p.theta_base
        };
        let mut ext = Extent::of(&gs[i..=j_min]);
        if ext.total() > theta {
            i += 1;
            continue;
        }
        let mut j = j_min;
        while j + 1 < n && ext.with(&gs[j + 1]) <= theta {
            j += 1;
            ext.push(&gs[j]);
        }
        let count = (j - i + 1) as f64;
        let cx = gs[i..=j].iter().map(|g| g.gx).sum::<f64>() / count;
        let cy = gs[i..=j].iter().map(|g| g.gy).sum::<f64>() / count;
        fixations.push(Fixation {
            t_start: ts[i],
            t_end: ts[j],
            centroid: [cx, cy],
            scene_centroid: [cx, cy],
            disp_h: ext.x1 - ext.x0,
            disp_v: ext.y1 - ext.y0,
            n_samples: j - i + 1,
            theta,
        });
        i = j + 1;
    }
    fixations
}

/// Replaces each fixation's scene centroid with the mean raw (uncompensated)
/// gaze over its interval.
pub fn set_scene_centroids(fixations: &mut [Fixation], raw: &SampleSeries<GazeSample>, min_confidence: f64) {
    for f in fixations.iter_mut() {
        let r = raw.index_range(f.t_start, f.t_end + Duration(1));
        let (mut sx, mut sy, mut k) = (0.0, 0.0, 0usize);
        for g in raw.values()[r].iter().filter(|g| g.confidence >= min_confidence) {
            sx += g.gx;
            sy += g.gy;
            k += 1;
        }
        if k > 0 {
            f.scene_centroid = [sx / k as f64, sy / k as f64];
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Intersection {
    pub records: Vec<GazeTargetRecord>,
    /// Fixations with no raster within tolerance.
    pub unmatched: usize,
    /// Fixations whose scene centroid lies outside the frame.
    pub out_of_frame: usize,
}

/// Attributes each fixation to the class under its scene centroid in the
/// raster nearest its midpoint (earlier raster on ties).
pub fn intersect_fixations(fixations: &[Fixation], rasters: &[LabelRaster], tol: Duration) -> Intersection {
    let mut out = Intersection::default();
    for f in fixations {
        let mid = f.midpoint();
        let i = rasters.partition_point(|r| r.t < mid);
        let best = [i.checked_sub(1), (i < rasters.len()).then_some(i)]
            .into_iter()
            .flatten()
            .min_by_key(|&k| ((rasters[k].t - mid).0.abs(), k));
        let Some(k) = best.filter(|&k| (rasters[k].t - mid).0.abs() <= tol.0) else {
            out.unmatched += 1;
            continue;
        };
        let r = &rasters[k];
        match r.class_at(f.scene_centroid[0], f.scene_centroid[1]) {
            Some(class) => out.records.push(GazeTargetRecord {
                fixation: *f,
                class_name: class.to_string(),
                raster_t: r.t,
            }),
            None => out.out_of_frame += 1,
        }
    }
    out
}

/// Rate, mean duration, mean dispersion and per-class dwell over `span`.
pub fn attention_metrics(fixations: &[Fixation], targets: &[GazeTargetRecord], span: Duration) -> Result<AttentionMetrics> {
    if span.0 <= 0 {
        return Err(Error::InvalidRange { t0: 0, t1: span.0 });
    }
    if fixations.is_empty() {
        return Ok(AttentionMetrics::default());
    }
    let n = fixations.len() as f64;
    let mut dwell: BTreeMap<String, f64> = BTreeMap::new();
    for t in targets {
        *dwell.entry(t.class_name.clone()).or_default() += t.fixation.duration().as_millis_f64();
    }
    Ok(AttentionMetrics {
        fixation_rate_per_min: n / span.as_minutes_f64(),
        mean_duration_ms: fixations.iter().map(|f| f.duration().as_millis_f64()).sum::<f64>() / n,
        mean_disp_h: fixations.iter().map(|f| f.disp_h).sum::<f64>() / n,
        mean_disp_v: fixations.iter().map(|f| f.disp_v).sum::<f64>() / n,
        dwell_by_class: dwell,
    })
}

/// Converts a normalized dispersion to degrees given the camera field of
/// view along that axis (small-angle, linear mapping).
pub fn dispersion_degrees(disp_norm: f64, fov_deg: f64) -> f64 {
    disp_norm * fov_deg
}
