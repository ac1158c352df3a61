//! Segments along the fused trajectory, per-segment metrics, hotspot
//! scoring and the on-disk session bundle.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::gait::{GaitWindow, StrideEvent};
use crate::gaze::{Fixation, GazeTargetRecord};
use crate::geo::{enu_to_geodetic, Alignment, EnuPoint, FusedTrajectory, GeoOrigin};
use crate::model::{Duration, SampleSeries, Timestamp};
use crate::params::Parameters;
use crate::physio::{PhysioWindow, ScrPeak};
use crate::walkway::{MaterialLabel, WidthEstimate};

pub const BUNDLE_VERSION: &str = "mobiscope-bundle/1";

/// Numeric per-segment metrics addressable by name.
pub const METRIC_NAMES: &[&str] = &[
    "fixation_count",
    "fixation_rate",
    "mean_fix_duration_ms",
    "mean_disp_h",
    "mean_disp_v",
    "scr_count",
    "scr_rate_per_min",
    "rmssd_ms",
    "pnn10",
    "stv_s",
    "mean_stride_time_s",
    "step_count",
    "mean_width_m",
];

pub const BUNDLE_DOCUMENTS: &[&str] = &[
    "bundle.json",
    "trajectory.json",
    "events.json",
    "windows.json",
    "segments.geojson",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentMode {
    Distance,
    Time,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentSpec {
    pub mode: SegmentMode,
    /// Meters in distance mode, seconds in time mode.
    pub length: f64,
    pub min_fill: f64,
}

impl SegmentSpec {
    pub fn from_params(p: &Parameters) -> Result<Self> {
        let mode = match p.segment_mode.as_str() {
            "distance" => SegmentMode::Distance,
            "time" => SegmentMode::Time,
            other => {
                return Err(Error::manifest("/parameters/segment_mode", format!("unknown mode `{other}`")));
            }
        };
        Ok(SegmentSpec { mode, length: p.segment_length, min_fill: p.min_fill })
    }

    /// Parses `distance:10` or `time:30`.
    pub fn parse(s: &str, min_fill: f64) -> Result<Self> {
        let bad = || Error::manifest("/segments", format!("expected `distance:<m>` or `time:<s>`, got `{s}`"));
        let (mode, len) = s.split_once(':').ok_or_else(bad)?;
        let mode = match mode {
            "distance" => SegmentMode::Distance,
            "time" => SegmentMode::Time,
            _ => return Err(bad()),
        };
        let length: f64 = len.parse().map_err(|_| bad())?;
        if !(length.is_finite() && length > 0.0) {
            return Err(bad());
        }
        Ok(SegmentSpec { mode, length, min_fill })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SegmentMetrics {
    pub fixation_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixation_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_fix_duration_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_disp_h: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_disp_v: Option<f64>,
    #[serde(default)]
    pub dwell_by_class: BTreeMap<String, f64>,
    pub scr_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scr_rate_per_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rmssd_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pnn10: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stv_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_stride_time_s: Option<f64>,
    pub step_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_width_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub material_mode: Option<String>,
    /// Covered duration over segment duration, per metric.
    #[serde(default)]
    pub sample_coverage: BTreeMap<String, f64>,
}

impl SegmentMetrics {
    pub fn value(&self, name: &str) -> Option<f64> {
        match name {
            "fixation_count" => Some(self.fixation_count as f64),
            "fixation_rate" => self.fixation_rate,
            "mean_fix_duration_ms" => self.mean_fix_duration_ms,
            "mean_disp_h" => self.mean_disp_h,
            "mean_disp_v" => self.mean_disp_v,
            "scr_count" => Some(self.scr_count as f64),
            "scr_rate_per_min" => self.scr_rate_per_min,
            "rmssd_ms" => self.rmssd_ms,
            "pnn10" => self.pnn10,
            "stv_s" => self.stv_s,
            "mean_stride_time_s" => self.mean_stride_time_s,
            "step_count" => Some(self.step_count as f64),
            "mean_width_m" => self.mean_width_m,
            _ => None,
        }
    }

    pub fn coverage(&self, name: &str) -> f64 {
        self.sample_coverage.get(name).copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub index: usize,
    pub t_start: Timestamp,
    pub t_end: Timestamp,
    pub arc_start_m: f64,
    pub arc_end_m: f64,
    pub geometry_enu: Vec<EnuPoint>,
    #[serde(flatten)]
    pub metrics: SegmentMetrics,
}

impl Segment {
    pub fn duration(&self) -> Duration {
        self.t_end - self.t_start
    }

    pub fn contains(&self, t: Timestamp) -> bool {
        t >= self.t_start && t < self.t_end
    }
}

fn lerp_enu(a: &EnuPoint, b: &EnuPoint, w: f64) -> EnuPoint {
    EnuPoint::new(a.e + w * (b.e - a.e), a.n + w * (b.n - a.n), a.u + w * (b.u - a.u))
}

/// Position where the cumulative distance first reaches `arc`.
fn point_at_arc(traj: &FusedTrajectory, arc: f64) -> (Timestamp, EnuPoint) {
    let pts = &traj.points;
    let i = pts.partition_point(|p| p.arc_m < arc);
    if i == 0 {
        return (pts[0].t, pts[0].enu);
    }
    if i == pts.len() {
        let p = pts[pts.len() - 1];
        return (p.t, p.enu);
    }
    let (a, b) = (&pts[i - 1], &pts[i]);
    let w = (arc - a.arc_m) / (b.arc_m - a.arc_m);
    let t = a.t.0 as f64 + w * (b.t - a.t).0 as f64;
    (Timestamp((t.round() as i64).clamp(a.t.0, b.t.0)), lerp_enu(&a.enu, &b.enu, w))
}

fn point_at_time(traj: &FusedTrajectory, t: Timestamp) -> (f64, EnuPoint) {
    let loc = traj.locate(t).expect("cut inside the trajectory");
    (loc.arc_m, loc.enu)
}

/// Cuts the trajectory into consecutive segments. The trailing partial
/// segment is kept only if it reaches `min_fill` of the nominal length.
pub fn build_segments(traj: &FusedTrajectory, spec: &SegmentSpec) -> Vec<Segment> {
    let Some((t0, t1)) = traj.time_range() else {
        return Vec::new();
    };
    // (time, arc, position) at each cut
    let mut cuts: Vec<(Timestamp, f64, EnuPoint)> = Vec::new();
    match spec.mode {
        SegmentMode::Distance => {
            let total = traj.total_arc_m();
            let full = (total / spec.length).floor() as usize;
            for k in 0..=full {
                let arc = k as f64 * spec.length;
                let (t, p) = point_at_arc(traj, arc);
                cuts.push((t, arc, p));
            }
            let rest = total - full as f64 * spec.length;
            if rest > 0.0 && rest >= spec.min_fill * spec.length {
                let last = traj.points[traj.points.len() - 1];
                cuts.push((last.t, total, last.enu));
            }
        }
        SegmentMode::Time => {
            let step = Duration::from_secs_f64(spec.length);
            let span = (t1 - t0).0;
            let full = (span / step.0) as usize;
            for k in 0..=full {
                let t = t0 + Duration(k as i64 * step.0);
                let (arc, p) = point_at_time(traj, t);
                cuts.push((t, arc, p));
            }
            let rest = span - full as i64 * step.0;
            if rest > 0 && rest as f64 >= spec.min_fill * step.0 as f64 {
                let (arc, p) = point_at_time(traj, t1);
                cuts.push((t1, arc, p));
            }
        }
    }
    cuts.windows(2)
        .enumerate()
        .map(|(index, w)| {
            let (ta, aa, pa) = w[0];
            let (tb, ab, pb) = w[1];
            let mut geometry_enu = vec![pa];
            let lo = traj.points.partition_point(|p| p.t <= ta);
            let hi = traj.points.partition_point(|p| p.t < tb);
            geometry_enu.extend(traj.points[lo..hi.max(lo)].iter().map(|p| p.enu));
            geometry_enu.push(pb);
            Segment {
                index,
                t_start: ta,
                t_end: tb,
                arc_start_m: aa,
                arc_end_m: ab,
                geometry_enu,
                metrics: SegmentMetrics::default(),
            }
        })
        .collect()
}

/// Everything `attach_metrics` draws from. Spans are the time ranges the
/// underlying sensor streams actually cover.
#[derive(Debug, Clone, Copy, Default)]
pub struct MetricInputs<'a> {
    pub fixations: &'a [Fixation],
    pub targets: &'a [GazeTargetRecord],
    pub gaze_span: Option<(Timestamp, Timestamp)>,
    pub scr: &'a [ScrPeak],
    pub eda_span: Option<(Timestamp, Timestamp)>,
    pub physio: &'a [PhysioWindow],
    pub strides: &'a [StrideEvent],
    pub imu_span: Option<(Timestamp, Timestamp)>,
    pub gait: &'a [GaitWindow],
    pub widths: &'a [WidthEstimate],
    pub materials: Option<&'a SampleSeries<MaterialLabel>>,
}

fn overlap(a: (i64, i64), b: (i64, i64)) -> i64 {
    (a.1.min(b.1) - a.0.max(b.0)).max(0)
}

/// Length of the union of `intervals` (sorted by start) inside `seg`.
fn union_cover(intervals: impl Iterator<Item = (i64, i64)>, seg: (i64, i64)) -> i64 {
    let mut covered = 0;
    let mut reach = seg.0;
    for (a, b) in intervals {
        let a = a.max(reach);
        let b = b.min(seg.1);
        if b > a {
            covered += b - a;
            reach = b;
        }
    }
    covered
}

fn half_period(ts: &[Timestamp]) -> i64 {
    if ts.len() < 2 {
        return 0;
    }
    let mut dt: Vec<i64> = ts.windows(2).map(|w| (w[1] - w[0]).0).collect();
    let mid = dt.len() / 2;
    *dt.select_nth_unstable(mid).1 / 2
}

fn weighted<W>(
    windows: &[W],
    span: impl Fn(&W) -> (i64, i64),
    value: impl Fn(&W) -> f64,
    seg: (i64, i64),
) -> (Option<f64>, i64) {
    let mut acc = 0.0;
    let mut weight = 0i64;
    for w in windows {
        let o = overlap(span(w), seg);
        if o > 0 {
            acc += value(w) * o as f64;
            weight += o;
        }
    }
    let cover = union_cover(windows.iter().map(&span).filter(|s| overlap(*s, seg) > 0), seg);
    ((weight > 0).then(|| acc / weight as f64), cover)
}

fn segment_metrics(seg: &Segment, inp: &MetricInputs, width_half: i64, material_half: i64) -> SegmentMetrics {
    let s = (seg.t_start.0, seg.t_end.0);
    let dur = (s.1 - s.0) as f64;
    let mut m = SegmentMetrics::default();
    let mut cov = BTreeMap::new();
    let frac = |c: i64| if dur > 0.0 { c as f64 / dur } else { 0.0 };
    let span_cover = |span: Option<(Timestamp, Timestamp)>| span.map_or(0, |(a, b)| overlap((a.0, b.0 + 1), s));

    // gaze: fixations belong to the segment holding their midpoint
    let gaze_c = span_cover(inp.gaze_span);
    let owned: Vec<&Fixation> = inp.fixations.iter().filter(|f| seg.contains(f.midpoint())).collect();
    m.fixation_count = owned.len();
    cov.insert("fixation_count", frac(gaze_c));
    if gaze_c > 0 {
        m.fixation_rate = Some(owned.len() as f64 / Duration(gaze_c).as_minutes_f64());
        cov.insert("fixation_rate", frac(gaze_c));
    }
    if !owned.is_empty() {
        let n = owned.len() as f64;
        m.mean_fix_duration_ms = Some(owned.iter().map(|f| f.duration().as_millis_f64()).sum::<f64>() / n);
        m.mean_disp_h = Some(owned.iter().map(|f| f.disp_h).sum::<f64>() / n);
        m.mean_disp_v = Some(owned.iter().map(|f| f.disp_v).sum::<f64>() / n);
        for k in ["mean_fix_duration_ms", "mean_disp_h", "mean_disp_v"] {
            cov.insert(k, frac(gaze_c));
        }
    }
    for t in inp.targets.iter().filter(|t| seg.contains(t.fixation.midpoint())) {
        *m.dwell_by_class.entry(t.class_name.clone()).or_default() += t.fixation.duration().as_millis_f64();
    }
    if !m.dwell_by_class.is_empty() {
        cov.insert("dwell_by_class", frac(gaze_c));
    }

    let eda_c = span_cover(inp.eda_span);
    m.scr_count = inp.scr.iter().filter(|p| seg.contains(p.t_peak)).count();
    cov.insert("scr_count", frac(eda_c));
    if eda_c > 0 {
        m.scr_rate_per_min = Some(m.scr_count as f64 / Duration(eda_c).as_minutes_f64());
        cov.insert("scr_rate_per_min", frac(eda_c));
    }

    let pspan = |w: &PhysioWindow| (w.t_start.0, w.t_end.0);
    let (rmssd, c) = weighted(inp.physio, pspan, |w| w.rmssd_ms, s);
    m.rmssd_ms = rmssd;
    let (pnn, _) = weighted(inp.physio, pspan, |w| w.pnn10, s);
    m.pnn10 = pnn;
    if c > 0 {
        cov.insert("rmssd_ms", frac(c));
        cov.insert("pnn10", frac(c));
    }

    let gspan = |w: &GaitWindow| (w.t_start.0, w.t_end.0);
    let (stv, c) = weighted(inp.gait, gspan, |w| w.metrics.stv_s, s);
    m.stv_s = stv;
    let (mst, _) = weighted(inp.gait, gspan, |w| w.metrics.mean_stride_time_s, s);
    m.mean_stride_time_s = mst;
    if c > 0 {
        cov.insert("stv_s", frac(c));
        cov.insert("mean_stride_time_s", frac(c));
    }

    m.step_count = inp.strides.iter().filter(|e| seg.contains(e.t_heel_strike)).count();
    cov.insert("step_count", frac(span_cover(inp.imu_span)));

    let widths: Vec<&WidthEstimate> = inp.widths.iter().filter(|w| seg.contains(w.t)).collect();
    if !widths.is_empty() {
        m.mean_width_m = Some(widths.iter().map(|w| w.width_m).sum::<f64>() / widths.len() as f64);
        let c = union_cover(inp.widths.iter().map(|w| (w.t.0 - width_half, w.t.0 + width_half.max(1))), s);
        cov.insert("mean_width_m", frac(c));
    }

    if let Some(mats) = inp.materials {
        let r = mats.index_range(seg.t_start, seg.t_end);
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for l in &mats.values()[r] {
            *counts.entry(l.class_name.as_str()).or_default() += 1;
        }
        // most frequent; BTreeMap order breaks ties by name
        let mut best: Option<(&str, usize)> = None;
        for (name, c) in counts {
            if best.is_none_or(|(_, bc)| c > bc) {
                best = Some((name, c));
            }
        }
        if let Some((name, _)) = best {
            m.material_mode = Some(name.to_string());
            let c = union_cover(
                mats.timestamps().iter().map(|t| (t.0 - material_half, t.0 + material_half.max(1))),
                s,
            );
            cov.insert("material_mode", frac(c));
        }
    }

    m.sample_coverage = cov.into_iter().map(|(k, v)| (k.to_string(), v.clamp(0.0, 1.0))).collect();
    m
}

/// Fills every segment's metrics. Point events go to the segment holding
/// their timestamp (fixations: their midpoint); windowed series are averaged
/// over overlapping windows weighted by overlap duration.
pub fn attach_metrics(segments: &mut [Segment], inp: &MetricInputs) {
    let wts: Vec<Timestamp> = inp.widths.iter().map(|w| w.t).collect();
    let width_half = half_period(&wts);
    let material_half = inp.materials.map_or(0, |m| half_period(m.timestamps()));
    let metrics = crate::par::map(segments, |seg| segment_metrics(seg, inp, width_half, material_half));
    for (seg, m) in segments.iter_mut().zip(metrics) {
        seg.metrics = m;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricStats {
    pub mean: f64,
    pub sd: f64,
    pub usable: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SegmentFlags {
    pub index: usize,
    pub z: BTreeMap<String, f64>,
    pub hotspot: bool,
    pub coincidence: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct HotspotReport {
    pub metrics: Vec<String>,
    pub z_thresh: f64,
    pub min_coverage: f64,
    pub stats: BTreeMap<String, MetricStats>,
    /// Metrics that could not be scored, with the reason.
    pub errors: BTreeMap<String, String>,
    pub segments: Vec<SegmentFlags>,
}

/// Population z-scores; all zero when the values do not vary.
pub fn zscores(values: &[f64]) -> (Vec<f64>, f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let z = if sd > 0.0 {
        values.iter().map(|v| (v - mean) / sd).collect()
    } else {
        vec![0.0; values.len()]
    };
    (z, mean, sd)
}

/// Scores one metric across segments with enough coverage.
pub fn metric_zscores(segments: &[Segment], metric: &str, min_coverage: f64) -> Result<(Vec<(usize, f64)>, MetricStats)> {
    let usable: Vec<(usize, f64)> = segments
        .iter()
        .filter(|s| s.metrics.coverage(metric) >= min_coverage)
        .filter_map(|s| s.metrics.value(metric).map(|v| (s.index, v)))
        .collect();
    if usable.len() < 2 {
        return Err(Error::InsufficientSegments { metric: metric.to_string(), usable: usable.len() });
    }
    let vals: Vec<f64> = usable.iter().map(|(_, v)| *v).collect();
    let (z, mean, sd) = zscores(&vals);
    let stats = MetricStats { mean, sd, usable: usable.len() };
    Ok((usable.iter().map(|(i, _)| *i).zip(z).collect(), stats))
}

/// Per-metric z-scores with hotspot (`|z| >= z_thresh` on any metric) and
/// coincidence (high SCR rate together with high fixation dispersion) flags.
pub fn hotspot_zscores(segments: &[Segment], metrics: &[String], z_thresh: f64, min_coverage: f64) -> HotspotReport {
    let mut report = HotspotReport {
        metrics: metrics.to_vec(),
        z_thresh,
        min_coverage,
        segments: segments.iter().map(|s| SegmentFlags { index: s.index, ..Default::default() }).collect(),
        ..Default::default()
    };
    let pos: BTreeMap<usize, usize> = segments.iter().enumerate().map(|(k, s)| (s.index, k)).collect();
    for metric in metrics {
        match metric_zscores(segments, metric, min_coverage) {
            Ok((z, stats)) => {
                for (idx, v) in z {
                    report.segments[pos[&idx]].z.insert(metric.clone(), v);
                }
                report.stats.insert(metric.clone(), stats);
            }
            Err(e) => {
                report.errors.insert(metric.clone(), e.to_string());
            }
        }
    }
    for f in &mut report.segments {
        f.hotspot = f.z.values().any(|z| z.abs() >= z_thresh);
        let scr = f.z.get("scr_rate_per_min").copied();
        let disp = [f.z.get("mean_disp_h"), f.z.get("mean_disp_v")]
            .into_iter()
            .flatten()
            .copied()
            .fold(None, |acc: Option<f64>, z| Some(acc.map_or(z, |a| a.max(z))));
        f.coincidence = matches!((scr, disp), (Some(s), Some(d)) if s >= z_thresh && d >= z_thresh);
    }
    report
}

fn position(p: &EnuPoint, origin: GeoOrigin) -> Value {
    let (lat, lon, h) = enu_to_geodetic(*p, origin);
    json!([lon, lat, h])
}

/// RFC 7946 FeatureCollection: the whole trajectory first (with per-point
/// `t_us` and `arc_m` arrays), then one LineString per segment carrying its metrics and hotspot flags. Positions
/// are `[lon, lat, ellipsoidal height]`.
pub fn export_geojson(session_id: &str, traj: &FusedTrajectory, segments: &[Segment], report: &HotspotReport) -> Value {
    let mut features = Vec::with_capacity(segments.len() + 1);
    let (t0, t1) = traj.time_range().unwrap_or((Timestamp(0), Timestamp(0)));
    let mut coords: Vec<Value> = traj.points.iter().map(|p| position(&p.enu, traj.origin)).collect();
    let mut t_us: Vec<Timestamp> = traj.points.iter().map(|p| p.t).collect();
    let mut arc_m: Vec<f64> = traj.points.iter().map(|p| p.arc_m).collect();
    if coords.len() == 1 {
        coords.push(coords[0].clone());
        t_us.push(t_us[0]);
        arc_m.push(arc_m[0]);
    }
    features.push(json!({
        "type": "Feature",
        "geometry": {"type": "LineString", "coordinates": coords},
        "properties": {
            "kind": "trajectory",
            "session_id": session_id,
            "t_start": t0,
            "t_end": t1,
            "total_arc_m": traj.total_arc_m(),
            "origin": traj.origin,
            // parallel to the coordinates
            "t_us": t_us,
            "arc_m": arc_m,
        }
    }));
    let flags: BTreeMap<usize, &SegmentFlags> = report.segments.iter().map(|f| (f.index, f)).collect();
    for seg in segments {
        let mut props = match serde_json::to_value(seg) {
            Ok(Value::Object(m)) => m,
            _ => Map::new(),
        };
        props.insert("kind".into(), json!("segment"));
        let f = flags.get(&seg.index);
        props.insert("z".into(), json!(f.map(|f| f.z.clone()).unwrap_or_default()));
        props.insert("hotspot".into(), json!(f.is_some_and(|f| f.hotspot)));
        props.insert("coincidence".into(), json!(f.is_some_and(|f| f.coincidence)));
        let coords: Vec<Value> = seg.geometry_enu.iter().map(|p| position(p, traj.origin)).collect();
        features.push(json!({
            "type": "Feature",
            "geometry": {"type": "LineString", "coordinates": coords},
            "properties": props,
        }));
    }
    json!({"type": "FeatureCollection", "features": features})
}

/// Strict structural check against RFC 7946; returns every violation found.
pub fn validate_geojson(doc: &Value) -> Vec<String> {
    let mut errs = Vec::new();
    let Some(obj) = doc.as_object() else {
        return vec!["root is not an object".into()];
    };
    if obj.get("type").and_then(Value::as_str) != Some("FeatureCollection") {
        errs.push("root type is not FeatureCollection".into());
    }
    if obj.contains_key("crs") {
        errs.push("`crs` member is not allowed".into());
    }
    let Some(features) = obj.get("features").and_then(Value::as_array) else {
        errs.push("`features` is not an array".into());
        return errs;
    };
    for (i, f) in features.iter().enumerate() {
        let at = format!("/features/{i}");
        let Some(f) = f.as_object() else {
            errs.push(format!("{at}: not an object"));
            continue;
        };
        if f.get("type").and_then(Value::as_str) != Some("Feature") {
            errs.push(format!("{at}: type is not Feature"));
        }
        match f.get("properties") {
            Some(Value::Object(_)) | Some(Value::Null) => {}
            _ => errs.push(format!("{at}: properties must be an object or null")),
        }
        match f.get("geometry") {
            Some(Value::Null) => {}
            Some(g) => validate_geometry(g, &format!("{at}/geometry"), &mut errs),
            None => errs.push(format!("{at}: missing geometry")),
        }
    }
    errs
}

fn validate_position(p: &Value, at: &str, errs: &mut Vec<String>) {
    let Some(a) = p.as_array() else {
        errs.push(format!("{at}: position is not an array"));
        return;
    };
    if !(2..=3).contains(&a.len()) {
        errs.push(format!("{at}: position has {} elements", a.len()));
        return;
    }
    let nums: Vec<Option<f64>> = a.iter().map(Value::as_f64).collect();
    if nums.iter().any(|v| !v.is_some_and(f64::is_finite)) {
        errs.push(format!("{at}: non-numeric coordinate"));
        return;
    }
    let (lon, lat) = (nums[0].unwrap_or(0.0), nums[1].unwrap_or(0.0));
    if !(-180.0..=180.0).contains(&lon) || !(-90.0..=90.0).contains(&lat) {
        errs.push(format!("{at}: ({lon}, {lat}) outside lon/lat bounds"));
    }
}

fn validate_geometry(g: &Value, at: &str, errs: &mut Vec<String>) {
    let ty = g.get("type").and_then(Value::as_str).unwrap_or("");
    let coords = g.get("coordinates");
    match (ty, coords.and_then(Value::as_array)) {
        ("Point", Some(_)) => validate_position(coords.unwrap_or(&Value::Null), at, errs),
        ("LineString", Some(c)) | ("MultiPoint", Some(c)) => {
            if ty == "LineString" && c.len() < 2 {
                errs.push(format!("{at}: LineString needs two or more positions"));
            }
            for (k, p) in c.iter().enumerate() {
                validate_position(p, &format!("{at}/coordinates/{k}"), errs);
            }
        }
        (other, _) => errs.push(format!("{at}: unsupported or malformed geometry `{other}`")),
    }
}

/// Reads segments back from the feature properties of `segments.geojson`.
pub fn segments_from_geojson(doc: &Value) -> Result<Vec<Segment>> {
    let features = doc
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| json_err("segments.geojson", "missing features"))?;
    let mut out = Vec::new();
    for f in features {
        let Some(Value::Object(props)) = f.get("properties") else {
            continue;
        };
        if props.get("kind").and_then(Value::as_str) != Some("segment") {
            continue;
        }
        let mut props = props.clone();
        for k in ["kind", "z", "hotspot", "coincidence"] {
            props.remove(k);
        }
        out.push(
            serde_json::from_value(Value::Object(props)).map_err(|e| Error::Json { path: "segments.geojson".into(), source: e })?,
        );
    }
    Ok(out)
}

fn json_err(path: &str, msg: &str) -> Error {
    Error::Json { path: path.into(), source: serde::de::Error::custom(msg) }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BundleSummary {
    pub n_trajectory_points: usize,
    pub total_arc_m: f64,
    pub n_segments: usize,
    pub n_fixations: usize,
    pub n_scr_peaks: usize,
    pub n_strides: usize,
    pub n_widths: usize,
    pub n_materials: usize,
    /// Events falling outside the trajectory's time range, by kind.
    pub out_of_range: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleIndex {
    pub format_version: String,
    pub session_id: String,
    pub manifest: Value,
    pub parameters: Parameters,
    pub segment_spec: SegmentSpec,
    pub summary: BundleSummary,
    pub hotspots: HotspotReport,
    pub warnings: Vec<String>,
    pub documents: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryDoc {
    pub alignment: Option<Alignment>,
    pub anchor_rms_m: Option<f64>,
    pub anchors_kept: usize,
    pub anchors_rejected: usize,
    pub trajectory: FusedTrajectory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedMaterial {
    pub t: Timestamp,
    #[serde(flatten)]
    pub label: MaterialLabel,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EventsDoc {
    pub fixations: Vec<Fixation>,
    pub gaze_targets: Vec<GazeTargetRecord>,
    pub scr_peaks: Vec<ScrPeak>,
    pub strides: Vec<StrideEvent>,
    pub widths: Vec<WidthEstimate>,
    pub materials: Vec<TimedMaterial>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct WindowsDoc {
    pub physio: Vec<PhysioWindow>,
    pub gait: Vec<GaitWindow>,
    pub eda_tonic: Option<SampleSeries<f64>>,
    pub eda_phasic: Option<SampleSeries<f64>>,
}

/// The complete in-memory form of a bundle directory.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionBundle {
    pub index: BundleIndex,
    pub trajectory: TrajectoryDoc,
    pub events: EventsDoc,
    pub windows: WindowsDoc,
    pub segments: Vec<Segment>,
}

impl SessionBundle {
    pub fn geojson(&self) -> Value {
        export_geojson(&self.index.session_id, &self.trajectory.trajectory, &self.segments, &self.index.hotspots)
    }
}

/// Pretty-printed JSON with object keys in sorted order and a trailing
/// newline. Floats use the shortest representation that round-trips.
pub fn canonical_json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let value = serde_json::to_value(v).map_err(|e| Error::Json { path: String::new(), source: e })?;
    let mut out = serde_json::to_vec_pretty(&value).map_err(|e| Error::Json { path: String::new(), source: e })?;
    out.push(b'\n');
    Ok(out)
}

pub fn export_bundle(bundle: &SessionBundle, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let docs: [(&str, Vec<u8>); 5] = [
        ("bundle.json", canonical_json(&bundle.index)?),
        ("trajectory.json", canonical_json(&bundle.trajectory)?),
        ("events.json", canonical_json(&bundle.events)?),
        ("windows.json", canonical_json(&bundle.windows)?),
        ("segments.geojson", canonical_json(&bundle.geojson())?),
    ];
    for (name, bytes) in docs {
        let path = dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn read_doc<T: DeserializeOwned>(dir: &Path, name: &str) -> Result<T> {
    let path = dir.join(name);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json { path: path.display().to_string(), source: e })
}

/// Reads and checks only the bundle index.
pub fn load_bundle_index(dir: &Path) -> Result<BundleIndex> {
    let raw: Value = read_doc(dir, "bundle.json")?;
    let found = raw.get("format_version").and_then(Value::as_str).unwrap_or("");
    if found != BUNDLE_VERSION {
        return Err(Error::Version { found: found.to_string(), expected: BUNDLE_VERSION.to_string() });
    }
    serde_json::from_value(raw).map_err(|e| Error::Json { path: dir.join("bundle.json").display().to_string(), source: e })
}

pub fn load_bundle(dir: &Path) -> Result<SessionBundle> {
    let index = load_bundle_index(dir)?;
    let geo: Value = read_doc(dir, "segments.geojson")?;
    Ok(SessionBundle {
        index,
        trajectory: read_doc(dir, "trajectory.json")?,
        events: read_doc(dir, "events.json")?,
        windows: read_doc(dir, "windows.json")?,
        segments: segments_from_geojson(&geo)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gait::{Foot, GaitMetrics};
    use crate::geo::GeoOrigin;
    use proptest::prelude::*;

    const ORIGIN: GeoOrigin = GeoOrigin { lat: 1.3, lon: 103.8 };

    /// Straight line east at `speed` m/s, one point per second.
    fn line(len_m: f64, speed: f64) -> FusedTrajectory {
        let n = (len_m / speed).ceil() as i64;
        FusedTrajectory::from_enu(
            ORIGIN,
            (0..=n).map(|k| {
                let e = (k as f64 * speed).min(len_m);
                (Timestamp(k * 1_000_000), EnuPoint::new(e, 0.0, 0.0))
            }),
        )
    }

    fn spec(length: f64) -> SegmentSpec {
        SegmentSpec { mode: SegmentMode::Distance, length, min_fill: 0.5 }
    }

    fn seg_with(index: usize, values: &[(&str, f64)]) -> Segment {
        let mut m = SegmentMetrics::default();
        for &(k, v) in values {
            match k {
                "scr_rate_per_min" => m.scr_rate_per_min = Some(v),
                "mean_disp_h" => m.mean_disp_h = Some(v),
                "mean_disp_v" => m.mean_disp_v = Some(v),
                "rmssd_ms" => m.rmssd_ms = Some(v),
                _ => unreachable!(),
            }
            m.sample_coverage.insert(k.to_string(), 1.0);
        }
        Segment {
            index,
            t_start: Timestamp(index as i64),
            t_end: Timestamp(index as i64 + 1),
            arc_start_m: 0.0,
            arc_end_m: 1.0,
            geometry_enu: vec![],
            metrics: m,
        }
    }

    #[test]
    fn distance_segment_counts() {
        let s = build_segments(&line(100.0, 1.0), &spec(10.0));
        assert_eq!(s.len(), 10);
        for (k, seg) in s.iter().enumerate() {
            assert_eq!(seg.arc_start_m, 10.0 * k as f64);
            assert_eq!(seg.arc_end_m, 10.0 * (k + 1) as f64);
        }
        assert_eq!(build_segments(&line(95.0, 1.0), &spec(10.0)).len(), 10);
        assert_eq!(build_segments(&line(94.9, 1.0), &spec(10.0)).len(), 9);
    }

    #[test]
    fn time_segments() {
        let t = line(100.0, 1.0);
        let s = build_segments(&t, &SegmentSpec { mode: SegmentMode::Time, length: 30.0, min_fill: 0.5 });
        // 100 s: three full 30 s segments, 10 s rest under half a segment
        assert_eq!(s.len(), 3);
        assert_eq!(s[2].t_end, Timestamp(90_000_000));
        assert!((s[1].arc_start_m - 30.0).abs() < 1e-12);
    }

    #[test]
    fn segments_tile() {
        let s = build_segments(&line(123.4, 1.3), &spec(10.0));
        assert_eq!(s[0].arc_start_m, 0.0);
        for w in s.windows(2) {
            assert_eq!(w[0].arc_end_m, w[1].arc_start_m);
            assert_eq!(w[0].t_end, w[1].t_start);
            assert_eq!(w[0].geometry_enu.last(), w[1].geometry_enu.first());
        }
        for seg in &s {
            let len: f64 = seg.geometry_enu.windows(2).map(|w| w[0].distance(&w[1])).sum();
            assert!((len - (seg.arc_end_m - seg.arc_start_m)).abs() < 1e-9);
        }
    }

    #[test]
    fn spec_parsing() {
        assert_eq!(SegmentSpec::parse("distance:10", 0.5).unwrap(), spec(10.0));
        assert_eq!(SegmentSpec::parse("time:30", 0.5).unwrap().mode, SegmentMode::Time);
        assert!(SegmentSpec::parse("time:-1", 0.5).is_err());
        assert!(SegmentSpec::parse("space:1", 0.5).is_err());
    }

    #[test]
    fn attach_examples() {
        let traj = line(120.0, 1.0);
        let mut segs = build_segments(&traj, &SegmentSpec { mode: SegmentMode::Time, length: 60.0, min_fill: 0.5 });
        assert_eq!(segs.len(), 2);
        let peaks: Vec<ScrPeak> = [5.0, 20.0, 40.0]
            .iter()
            .map(|s| ScrPeak { t_peak: Timestamp::from_secs_f64(*s), amplitude_us: 0.2, rise_time_ms: 500.0 })
            .collect();
        let fix = |a: f64, b: f64| Fixation {
            t_start: Timestamp::from_secs_f64(a),
            t_end: Timestamp::from_secs_f64(b),
            centroid: [0.5, 0.5],
            scene_centroid: [0.5, 0.5],
            disp_h: 0.01,
            disp_v: 0.02,
            n_samples: 10,
            theta: 0.03,
        };
        // straddles the 60 s boundary, midpoint 60.5 s
        let fixations = vec![fix(10.0, 10.5), fix(59.5, 61.5)];
        let strides: Vec<StrideEvent> = (0..120)
            .map(|k| StrideEvent {
                t_heel_strike: Timestamp(k * 1_000_000 + 500_000),
                foot: Foot::Left,
                t_midswing_peak: Timestamp(k * 1_000_000),
            })
            .collect();
        let gm = |stv| GaitMetrics { step_count: 60, mean_stride_time_s: 1.0, stv_s: stv, stv_cv: stv, asymmetry: None, excluded_strides: 0 };
        let gait = vec![
            GaitWindow { t_start: Timestamp(0), t_end: Timestamp(60_000_000), t_center: Timestamp(30_000_000), metrics: gm(0.02) },
            GaitWindow { t_start: Timestamp(30_000_000), t_end: Timestamp(90_000_000), t_center: Timestamp(60_000_000), metrics: gm(0.05) },
        ];
        let span = Some((Timestamp(0), Timestamp(120_000_000)));
        let inp = MetricInputs {
            fixations: &fixations,
            gaze_span: span,
            scr: &peaks,
            eda_span: span,
            strides: &strides,
            imu_span: span,
            gait: &gait,
            ..Default::default()
        };
        attach_metrics(&mut segs, &inp);
        let (a, b) = (&segs[0].metrics, &segs[1].metrics);
        assert_eq!(a.scr_count, 3);
        assert!((a.scr_rate_per_min.unwrap() - 3.0).abs() < 1e-12);
        assert_eq!(b.scr_count, 0);
        assert_eq!(b.scr_rate_per_min, Some(0.0));
        assert_eq!((a.fixation_count, b.fixation_count), (1, 1));
        assert_eq!(a.step_count + b.step_count, 120);
        // segment 0: window 0 covers 60 s, window 1 covers 30 s
        assert!((a.stv_s.unwrap() - (0.02 * 60.0 + 0.05 * 30.0) / 90.0).abs() < 1e-12);
        assert_eq!(b.stv_s, Some(0.05));
        assert!((b.coverage("stv_s") - 0.5).abs() < 1e-12);
        assert_eq!(a.coverage("stv_s"), 1.0);
        assert_eq!(a.rmssd_ms, None);
        assert_eq!(a.coverage("rmssd_ms"), 0.0);
    }

    #[test]
    fn zscore_examples() {
        let (z, _, _) = zscores(&[3.0; 5]);
        assert!(z.iter().all(|&v| v == 0.0));
        let (z, mean, sd) = zscores(&[1.0, 1.0, 1.0, 5.0]);
        assert_eq!(mean, 2.0);
        assert!((sd - 3f64.sqrt()).abs() < 1e-12);
        assert!((z[3] - 3.0 / 3f64.sqrt()).abs() < 1e-12);

        let segs: Vec<Segment> = [1.0, 1.0, 1.0, 5.0]
            .iter()
            .enumerate()
            .map(|(i, v)| seg_with(i, &[("scr_rate_per_min", *v)]))
            .collect();
        let r = hotspot_zscores(&segs, &["scr_rate_per_min".into()], 2.0, 0.5);
        assert!(r.segments.iter().all(|f| !f.hotspot));
    }

    #[test]
    fn coincidence_flag() {
        // Values chosen so that segment 0 has scr z = 2.5 and disp_h z = 2.1
        // using population SD over 25 segments.
        let n = 25usize;
        // exact z0 at index 0, the rest alternating around the mean
        let target = |z0: f64| -> Vec<f64> {
            // x0 = z0 * s + m with the rest symmetric around m
            let mut v = vec![0.0; n];
            v[0] = z0;
            let rest = -z0 / (n - 1) as f64;
            let spread = ((n as f64 - z0 * z0 - rest * rest * (n - 1) as f64) / (n - 1) as f64).sqrt();
            for (k, x) in v.iter_mut().enumerate().skip(1) {
                *x = rest + if k % 2 == 0 { spread } else { -spread };
            }
            v
        };
        let scr = target(2.5);
        let disp = target(2.1);
        let segs: Vec<Segment> = (0..n)
            .map(|i| seg_with(i, &[("scr_rate_per_min", scr[i] + 10.0), ("mean_disp_h", disp[i] + 1.0)]))
            .collect();
        let r = hotspot_zscores(&segs, &["scr_rate_per_min".into(), "mean_disp_h".into()], 2.0, 0.5);
        let f = &r.segments[0];
        assert!((f.z["scr_rate_per_min"] - 2.5).abs() < 0.05, "{:?}", f.z);
        assert!((f.z["mean_disp_h"] - 2.1).abs() < 0.05);
        assert!(f.coincidence && f.hotspot);
        assert!(r.segments[1..].iter().all(|f| !f.coincidence));
    }

    #[test]
    fn insufficient_segments_reported() {
        let segs = vec![seg_with(0, &[("rmssd_ms", 30.0)]), seg_with(1, &[])];
        let r = hotspot_zscores(&segs, &["rmssd_ms".into()], 2.0, 0.5);
        assert!(r.errors.contains_key("rmssd_ms"));
        assert!(matches!(
            metric_zscores(&segs, "rmssd_ms", 0.5),
            Err(Error::InsufficientSegments { usable: 1, .. })
        ));
    }

    #[test]
    fn geojson_feature_count_and_validity() {
        let traj = line(100.0, 1.0);
        let segs = build_segments(&traj, &spec(10.0));
        let doc = export_geojson("s", &traj, &segs, &HotspotReport::default());
        assert_eq!(doc["features"].as_array().unwrap().len(), 11);
        assert!(validate_geojson(&doc).is_empty());
        let t = &doc["features"][0];
        let n = t["geometry"]["coordinates"].as_array().unwrap().len();
        assert_eq!(t["properties"]["t_us"].as_array().unwrap().len(), n);
        assert_eq!(t["properties"]["arc_m"][0], 0.0);
        let back = segments_from_geojson(&doc).unwrap();
        assert_eq!(back, segs);
        let bad = json!({"type": "FeatureCollection", "features": [
            {"type": "Feature", "properties": {}, "geometry": {"type": "LineString", "coordinates": [[200.0, 0.0]]}}
        ]});
        assert_eq!(validate_geojson(&bad).len(), 2);
    }

    proptest! {
        #[test]
        fn zscores_are_standardized(v in proptest::collection::vec(-1e3f64..1e3, 2..200)) {
            let (z, _, sd) = zscores(&v);
            if sd > 1e-9 {
                let n = z.len() as f64;
                let m = z.iter().sum::<f64>() / n;
                let s = (z.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
                prop_assert!(m.abs() < 1e-9);
                prop_assert!((s - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn distance_segments_tile(len in 1.0f64..500.0, seg in 0.5f64..50.0, speed in 0.3f64..3.0) {
            let traj = line(len, speed);
            let s = build_segments(&traj, &spec(seg));
            for (k, w) in s.iter().enumerate() {
                prop_assert_eq!(w.index, k);
                prop_assert!(w.arc_end_m > w.arc_start_m);
            }
            for w in s.windows(2) {
                prop_assert_eq!(w[0].arc_end_m, w[1].arc_start_m);
                prop_assert_eq!(w[0].t_end, w[1].t_start);
            }
            if let Some(first) = s.first() {
                prop_assert_eq!(first.arc_start_m, 0.0);
            }
        }
    }
}
