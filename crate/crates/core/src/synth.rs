//! Synthetic sessions with known ground truth.
//!
//! Every random draw comes from ChaCha8 seeded with the scenario seed; each
//! stream uses its own ChaCha stream id (see [`stream_id`]) so adding a
//! stream never perturbs another. Generation is single-threaded.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::fusion::{canonical_json, SessionBundle};
use crate::geo::{enu_to_geodetic, geodetic_to_enu, rotation_angle_between, surface_point, EnuPoint, GeoOrigin, SimilarityTransform};
use crate::ingest::{
    legend_path, write_embeddings, write_raster_index, write_records, write_scalar, write_skeleton, GazeSample, GpsFix,
    HeadFlow, ImuSample, Keypoint, RasterRef, SkeletonFrame, SlamPose, WalkwayEdges,
};
use crate::manifest::{parse_manifest, SessionManifest, StreamKind};
use crate::model::{SampleSeries, Timestamp};
use crate::params::Parameters;
use crate::walkway::{default_class_names, LinearProbeModel};

pub const TRUTH_VERSION: &str = "mobiscope-truth/1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub start_s: f64,
    pub duration_s: f64,
}

impl Interval {
    fn end_s(&self) -> f64 {
        self.start_s + self.duration_s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpsSpec {
    pub rate_hz: f64,
    pub noise_sigma_m: f64,
    pub h_acc_m: f64,
    /// Windows in which the receiver reports degraded fixes.
    pub dropouts: Vec<Interval>,
    pub dropout_h_acc_m: f64,
    pub dropout_noise_sigma_m: f64,
}

impl Default for GpsSpec {
    fn default() -> Self {
        GpsSpec {
            rate_hz: 1.0,
            noise_sigma_m: 3.0,
            h_acc_m: 4.0,
            dropouts: vec![Interval { start_s: 240.0, duration_s: 60.0 }],
            dropout_h_acc_m: 35.0,
            dropout_noise_sigma_m: 15.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlamSpec {
    pub rate_hz: f64,
    /// True map from SLAM to ENU: `enu = scale * R * slam + translation`.
    pub scale: f64,
    pub yaw_deg: f64,
    pub pitch_deg: f64,
    pub roll_deg: f64,
    pub translation: [f64; 3],
    /// Accumulated position error per meter walked.
    pub drift_rate: f64,
    pub drift_heading_deg: f64,
}

impl Default for SlamSpec {
    fn default() -> Self {
        SlamSpec {
            rate_hz: 20.0,
            scale: 1.25,
            yaw_deg: 35.0,
            pitch_deg: 0.0,
            roll_deg: 0.0,
            translation: [15.0, -8.0, 0.0],
            drift_rate: 0.005,
            drift_heading_deg: 60.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GazeSpec {
    pub rate_hz: f64,
    pub min_fix_ms: f64,
    pub max_fix_ms: f64,
    pub saccade_samples: usize,
    pub min_jump: f64,
    /// Half-width of the uniform jitter around each cluster center.
    pub noise: f64,
    pub confidence: f64,
    pub head_pan_amplitude: f64,
    pub head_pan_period_s: f64,
    pub flow_rate_hz: f64,
    pub raster_rate_hz: f64,
    pub raster_width: usize,
    pub raster_height: usize,
}

impl Default for GazeSpec {
    fn default() -> Self {
        GazeSpec {
            rate_hz: 200.0,
            min_fix_ms: 200.0,
            max_fix_ms: 600.0,
            saccade_samples: 6,
            min_jump: 0.15,
            noise: 0.002,
            confidence: 0.95,
            head_pan_amplitude: 0.1,
            head_pan_period_s: 6.0,
            flow_rate_hz: 30.0,
            raster_rate_hz: 1.0,
            raster_width: 32,
            raster_height: 24,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EdaSpec {
    pub rate_hz: f64,
    pub baseline_us: f64,
    pub ramp_us_per_min: f64,
    pub scr_first_s: f64,
    pub scr_interval_s: f64,
    pub scr_jitter_s: f64,
    pub scr_amplitude_us: f64,
    pub scr_sigma_s: f64,
    pub noise_us: f64,
}

impl Default for EdaSpec {
    fn default() -> Self {
        EdaSpec {
            rate_hz: 4.0,
            baseline_us: 2.0,
            ramp_us_per_min: 0.01,
            scr_first_s: 20.0,
            scr_interval_s: 30.0,
            scr_jitter_s: 5.0,
            scr_amplitude_us: 0.2,
            scr_sigma_s: 0.5,
            noise_us: 0.002,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IbiSpec {
    pub mean_ms: f64,
    pub sd_ms: f64,
}

impl Default for IbiSpec {
    fn default() -> Self {
        IbiSpec { mean_ms: 800.0, sd_ms: 25.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrideDist {
    pub mean_s: f64,
    pub sd_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaitSpec {
    pub rate_hz: f64,
    pub left: StrideDist,
    pub right: StrideDist,
    /// Peak sagittal angular velocity, rad/s.
    pub amplitude: f64,
    pub noise: f64,
    /// Written into the IMU files' clock and declared in the manifest.
    pub clock_offset_us: i64,
}

impl Default for GaitSpec {
    fn default() -> Self {
        let d = StrideDist { mean_s: 1.05, sd_s: 0.03 };
        GaitSpec { rate_hz: 100.0, left: d, right: d, amplitude: 3.0, noise: 0.05, clock_offset_us: 250_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterialSpan {
    pub length_m: f64,
    pub class_name: String,
    pub width_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VideoSpec {
    pub rate_hz: f64,
    pub embedding_dim: usize,
    pub embedding_noise: f64,
    pub meters_per_pixel: f64,
    /// Relative amplitude of the slow change in camera-to-subject distance.
    pub scale_variation: f64,
    /// Repeating walkway timeline along the distance walked.
    pub materials: Vec<MaterialSpan>,
}

impl Default for VideoSpec {
    fn default() -> Self {
        let span = |length_m, class_name: &str, width_m| MaterialSpan { length_m, class_name: class_name.into(), width_m };
        VideoSpec {
            rate_hz: 10.0,
            embedding_dim: 16,
            embedding_noise: 0.05,
            meters_per_pixel: 0.005,
            scale_variation: 0.2,
            materials: vec![
                span(40.0, "brushed_concrete", 1.8),
                span(30.0, "asphalt", 3.0),
                span(50.0, "granite", 2.2),
                span(35.0, "exposed_aggregate_concrete", 1.5),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthScenario {
    pub seed: u64,
    pub session_id: String,
    pub start_us: i64,
    pub duration_s: f64,
    pub origin: GeoOrigin,
    /// ENU waypoints walked back and forth.
    pub route: Vec<[f64; 2]>,
    pub speed_mps: f64,
    pub pauses: Vec<Interval>,
    pub stature_m: f64,
    pub gps: GpsSpec,
    pub slam: SlamSpec,
    pub gaze: GazeSpec,
    pub eda: EdaSpec,
    pub ibi: IbiSpec,
    pub gait: GaitSpec,
    pub video: VideoSpec,
    pub omit_streams: Vec<StreamKind>,
    /// Written verbatim into the manifest's `parameters`.
    pub parameters: Map<String, Value>,
}

impl Default for SynthScenario {
    fn default() -> Self {
        SynthScenario {
            seed: 7,
            session_id: "synthetic".into(),
            start_us: 1_700_000_000_000_000,
            duration_s: 600.0,
            origin: GeoOrigin { lat: 1.2966, lon: 103.7764 },
            route: vec![[0.0, 0.0], [120.0, 0.0], [120.0, 80.0], [260.0, 80.0], [260.0, -40.0]],
            speed_mps: 1.2,
            pauses: vec![Interval { start_s: 400.0, duration_s: 20.0 }],
            stature_m: 1.68,
            gps: GpsSpec::default(),
            slam: SlamSpec::default(),
            gaze: GazeSpec::default(),
            eda: EdaSpec::default(),
            ibi: IbiSpec::default(),
            gait: GaitSpec::default(),
            video: VideoSpec::default(),
            omit_streams: Vec::new(),
            parameters: Map::new(),
        }
    }
}

impl SynthScenario {
    /// Default layout with every noise source, dropout and drift removed.
    pub fn noiseless(seed: u64) -> Self {
        let mut s = SynthScenario { seed, ..Default::default() };
        s.gps.noise_sigma_m = 0.0;
        s.gps.dropouts.clear();
        s.slam.drift_rate = 0.0;
        s.gaze.noise = 0.0;
        s.eda.noise_us = 0.0;
        s.gait.noise = 0.0;
        s.video.embedding_noise = 0.0;
        s
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Json { path: path.display().to_string(), source: e })
    }

    fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InsufficientData(format!("scenario: {m}")));
        if self.route.len() < 2 || !(self.speed_mps > 0.0) || !(self.duration_s > 0.0) {
            return bad("route needs two waypoints, positive speed and duration");
        }
        if self.video.materials.is_empty() || self.video.materials.iter().any(|m| !(m.length_m > 0.0 && m.width_m > 0.0)) {
            return bad("material spans need positive length and width");
        }
        let names = default_class_names();
        if let Some(m) = self.video.materials.iter().find(|m| !names.contains(&m.class_name)) {
            return Err(Error::ProbeModel(format!("unknown material class `{}`", m.class_name)));
        }
        if self.video.embedding_dim < names.len() {
            return bad("embedding_dim must be at least the number of probe classes");
        }
        if self.gaze.raster_width == 0 || self.gaze.raster_height == 0 || self.gaze.saccade_samples == 0 {
            return bad("raster size and saccade length must be positive");
        }
        Ok(())
    }

    fn stature_fraction(&self) -> f64 {
        self.parameters
            .get("stature_fraction")
            .and_then(Value::as_f64)
            .unwrap_or_else(|| Parameters::default().stature_fraction)
    }

    pub fn true_transform(&self) -> SimilarityTransform {
        let s = &self.slam;
        let r = Rotation3::from_euler_angles(s.roll_deg.to_radians(), s.pitch_deg.to_radians(), s.yaw_deg.to_radians());
        SimilarityTransform::from_parts(s.scale, r.matrix(), &Vector3::from(s.translation))
    }
}

/// ChaCha stream ids, one per generated stream.
pub fn stream_id(kind: StreamKind) -> u64 {
    StreamKind::ALL.iter().position(|k| *k == kind).unwrap_or(0) as u64 + 1
}

fn rng_for(seed: u64, kind: StreamKind) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream_id(kind));
    r
}

fn normal(sd: f64) -> Normal<f64> {
    Normal::new(0.0, sd.max(0.0)).expect("finite sd")
}

/// The walker's motion: back and forth along the route at constant speed,
/// standing still during pauses.
#[derive(Debug, Clone)]
pub struct Walk {
    pts: Vec<[f64; 2]>,
    cum: Vec<f64>,
    speed: f64,
    pauses: Vec<(f64, f64)>,
}

impl Walk {
    pub fn new(s: &SynthScenario) -> Self {
        let mut cum = vec![0.0];
        for w in s.route.windows(2) {
            let d = (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]);
            cum.push(cum.last().copied().unwrap_or(0.0) + d);
        }
        let mut pauses: Vec<(f64, f64)> = s.pauses.iter().map(|p| (p.start_s, p.end_s())).collect();
        pauses.sort_by(|a, b| a.0.total_cmp(&b.0));
        Walk { pts: s.route.clone(), cum, speed: s.speed_mps, pauses }
    }

    pub fn is_moving(&self, t_s: f64) -> bool {
        !self.pauses.iter().any(|&(a, b)| t_s >= a && t_s < b)
    }

    /// Distance walked by `t_s` seconds into the session.
    pub fn traveled(&self, t_s: f64) -> f64 {
        let paused: f64 = self.pauses.iter().map(|&(a, b)| (t_s.min(b) - a).max(0.0)).sum();
        self.speed * (t_s - paused).max(0.0)
    }

    /// ENU position after walking `arc` meters.
    pub fn position(&self, arc: f64) -> [f64; 2] {
        let len = *self.cum.last().unwrap_or(&0.0);
        if len <= 0.0 {
            return self.pts[0];
        }
        let mut m = arc.rem_euclid(2.0 * len);
        if m > len {
            m = 2.0 * len - m;
        }
        let i = self.cum.partition_point(|&c| c < m).clamp(1, self.cum.len() - 1);
        let (a, b) = (self.pts[i - 1], self.pts[i]);
        let seg = self.cum[i] - self.cum[i - 1];
        let w = if seg > 0.0 { (m - self.cum[i - 1]) / seg } else { 0.0 };
        [a[0] + w * (b[0] - a[0]), a[1] + w * (b[1] - a[1])]
    }

    pub fn position_at(&self, t_s: f64) -> [f64; 2] {
        self.position(self.traveled(t_s))
    }
}

fn material_at(spans: &[MaterialSpan], arc: f64) -> &MaterialSpan {
    let cycle: f64 = spans.iter().map(|s| s.length_m).sum();
    let mut m = arc.rem_euclid(cycle);
    for s in spans {
        if m < s.length_m {
            return s;
        }
        m -= s.length_m;
    }
    &spans[spans.len() - 1]
}

/// Sample times `start + round(k * 1e6 / rate)` inside the session.
fn grid(start_us: i64, duration_s: f64, rate_hz: f64) -> Vec<Timestamp> {
    let end = duration_s * 1e6;
    (0..)
        .map(|k| (k as f64 * 1e6 / rate_hz).round())
        .take_while(|&off| off < end)
        .map(|off| Timestamp(start_us + off as i64))
        .collect()
}

fn rel_s(s: &SynthScenario, t: Timestamp) -> f64 {
    (t.0 - s.start_us) as f64 / 1e6
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeSpan {
    pub t_start: Timestamp,
    pub t_end: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub version: String,
    pub session_id: String,
    pub scenario: SynthScenario,
    pub slam_to_enu: SimilarityTransform,
    pub fixations: Vec<TimeSpan>,
    pub scr_peaks: Vec<Timestamp>,
    pub heel_strikes_left: Vec<Timestamp>,
    pub heel_strikes_right: Vec<Timestamp>,
    /// Nominal sample period per stream kind, microseconds.
    pub sample_period_us: BTreeMap<String, i64>,
    pub gps_dropouts: Vec<TimeSpan>,
}

impl GroundTruth {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: Value = serde_json::from_str(&text).map_err(|e| Error::Json { path: path.display().to_string(), source: e })?;
        let found = raw.get("version").and_then(Value::as_str).unwrap_or("");
        if found != TRUTH_VERSION {
            return Err(Error::Version { found: found.into(), expected: TRUTH_VERSION.into() });
        }
        serde_json::from_value(raw).map_err(|e| Error::Json { path: path.display().to_string(), source: e })
    }

    pub fn period(&self, kind: StreamKind) -> i64 {
        self.sample_period_us.get(kind.as_str()).copied().unwrap_or(0)
    }
}

struct Out<'a> {
    dir: &'a Path,
    streams: Vec<Value>,
    omit: &'a [StreamKind],
}

impl Out<'_> {
    fn wants(&self, kind: StreamKind) -> bool {
        !self.omit.contains(&kind)
    }

    fn file(&self, name: &str) -> Result<BufWriter<File>> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        File::create(&path).map(BufWriter::new).map_err(|e| Error::io(&path, e))
    }

    fn write(
        &mut self,
        kind: StreamKind,
        rate: f64,
        offset: i64,
        body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
    ) -> Result<()> {
        if !self.wants(kind) {
            return Ok(());
        }
        let name = format!("{}.csv", kind.as_str());
        let mut f = self.file(&name)?;
        body(&mut f).and_then(|_| f.flush()).map_err(|e| Error::io(self.dir.join(&name), e))?;
        self.streams.push(json!({
            "kind": kind,
            "path": name,
            "clock_offset_us": offset,
            "nominal_rate_hz": rate,
        }));
        Ok(())
    }
}

/// Writes a complete session directory and returns its manifest and truth.
pub fn generate_session(s: &SynthScenario, out_dir: &Path) -> Result<(SessionManifest, GroundTruth)> {
    s.check()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let walk = Walk::new(s);
    let mut out = Out { dir: out_dir, streams: Vec::new(), omit: &s.omit_streams };
    let period = |rate: f64| (1e6 / rate).round() as i64;
    let mut periods = BTreeMap::new();

    // gps
    let mut rng = rng_for(s.seed, StreamKind::Gps);
    let gps_t = grid(s.start_us, s.duration_s, s.gps.rate_hz);
    let mut fixes = Vec::with_capacity(gps_t.len());
    for &t in &gps_t {
        let ts = rel_s(s, t);
        let [e, n] = walk.position_at(ts);
        let degraded = s.gps.dropouts.iter().any(|d| ts >= d.start_s && ts < d.end_s());
        let (sd, acc) = if degraded {
            (s.gps.dropout_noise_sigma_m, s.gps.dropout_h_acc_m)
        } else {
            (s.gps.noise_sigma_m, s.gps.h_acc_m)
        };
        let d = normal(sd);
        let (de, dn) = (d.sample(&mut rng), d.sample(&mut rng));
        let g = surface_point(e + de, n + dn, s.origin)?;
        fixes.push(GpsFix { lat: g.lat, lon: g.lon, h_acc_m: acc });
    }
    let gps = SampleSeries::new(gps_t, fixes)?;
    out.write(StreamKind::Gps, s.gps.rate_hz, 0, |f| write_records(f, &gps))?;
    periods.insert(StreamKind::Gps, period(s.gps.rate_hz));

    // slam: inverse of the true transform applied to the drifted position
    let truth_tf = s.true_transform();
    let inv = truth_tf.inverse();
    let heading = s.slam.drift_heading_deg.to_radians();
    let slam_t = grid(s.start_us, s.duration_s, s.slam.rate_hz);
    let poses: Vec<SlamPose> = slam_t
        .iter()
        .map(|&t| {
            let ts = rel_s(s, t);
            let arc = walk.traveled(ts);
            let [e, n] = walk.position(arc);
            let drift = s.slam.drift_rate * arc;
            let p = Vector3::new(e + drift * heading.sin(), n + drift * heading.cos(), 0.0);
            let x = inv.apply(&p);
            SlamPose { x: x.x, y: x.y, z: x.z, qx: 0.0, qy: 0.0, qz: 0.0, qw: 1.0 }
        })
        .collect();
    let slam = SampleSeries::new(slam_t, poses)?;
    out.write(StreamKind::SlamPose, s.slam.rate_hz, 0, |f| write_records(f, &slam))?;
    periods.insert(StreamKind::SlamPose, period(s.slam.rate_hz));

    let fixations = gen_gaze(s, &mut out)?;
    periods.insert(StreamKind::Gaze, period(s.gaze.rate_hz));
    periods.insert(StreamKind::HeadFlow, period(s.gaze.flow_rate_hz));
    periods.insert(StreamKind::LabelRaster, period(s.gaze.raster_rate_hz));

    let scr_peaks = gen_eda(s, &mut out)?;
    periods.insert(StreamKind::Eda, period(s.eda.rate_hz));
    gen_ibi(s, &mut out)?;

    let (hl, hr) = gen_imu(s, &walk, &mut out)?;
    periods.insert(StreamKind::ImuFootLeft, period(s.gait.rate_hz));
    periods.insert(StreamKind::ImuFootRight, period(s.gait.rate_hz));

    gen_video(s, &walk, &mut out)?;
    for k in [StreamKind::Skeleton, StreamKind::WalkwayEdges, StreamKind::MaterialEmbedding] {
        periods.insert(k, period(s.video.rate_hz));
    }

    let at = |secs: f64| Timestamp(s.start_us + (secs * 1e6).round() as i64);
    let truth = GroundTruth {
        version: TRUTH_VERSION.into(),
        session_id: s.session_id.clone(),
        scenario: s.clone(),
        slam_to_enu: truth_tf,
        fixations,
        scr_peaks,
        heel_strikes_left: hl,
        heel_strikes_right: hr,
        sample_period_us: periods.into_iter().map(|(k, v)| (k.as_str().to_string(), v)).collect(),
        gps_dropouts: s.gps.dropouts.iter().map(|d| TimeSpan { t_start: at(d.start_s), t_end: at(d.end_s()) }).collect(),
    };
    let manifest = json!({
        "session_id": s.session_id,
        "participant": {"id": format!("synthetic-{}", s.seed), "stature_m": s.stature_m, "cohort_tag": "synthetic"},
        "streams": out.streams,
        "parameters": s.parameters,
    });
    let mut f = out.file("session.json")?;
    f.write_all(&canonical_json(&manifest)?).and_then(|_| f.flush()).map_err(|e| Error::io(out_dir.join("session.json"), e))?;
    let mut f = out.file("ground_truth.json")?;
    f.write_all(&canonical_json(&truth)?)
        .and_then(|_| f.flush())
        .map_err(|e| Error::io(out_dir.join("ground_truth.json"), e))?;
    Ok((parse_manifest(out_dir)?, truth))
}

const SCENE_CLASSES: [&str; 8] = ["sky", "building", "vegetation", "sidewalk", "road", "signage", "person", "vehicle"];

fn gen_gaze(s: &SynthScenario, out: &mut Out) -> Result<Vec<TimeSpan>> {
    let g = &s.gaze;
    let mut rng = rng_for(s.seed, StreamKind::Gaze);
    let ts = grid(s.start_us, s.duration_s, g.rate_hz);
    let n = ts.len();
    let jitter = g.noise;
    let mut world: Vec<[f64; 2]> = Vec::with_capacity(n);
    let mut truth = Vec::new();
    let mut center = [rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)];
    while world.len() < n {
        let ms = rng.random_range(g.min_fix_ms..=g.max_fix_ms);
        let count = ((ms * g.rate_hz / 1000.0).round() as usize).max(2);
        let first = world.len();
        if first + count > n {
            // tail too short for a whole cluster: alternate far-apart samples
            for k in 0..n - first {
                world.push(if k % 2 == 0 { [0.15, 0.15] } else { [0.85, 0.85] });
            }
            break;
        }
        for _ in 0..count {
            let dx = if jitter > 0.0 { rng.random_range(-jitter..=jitter) } else { 0.0 };
            let dy = if jitter > 0.0 { rng.random_range(-jitter..=jitter) } else { 0.0 };
            world.push([center[0] + dx, center[1] + dy]);
        }
        truth.push(TimeSpan { t_start: ts[first], t_end: ts[world.len() - 1] });
        let next = loop {
            let c = [rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)];
            if (c[0] - center[0]).hypot(c[1] - center[1]) >= g.min_jump {
                break c;
            }
        };
        let k = g.saccade_samples;
        // saccade samples span the middle of the jump, clear of both clusters
        for j in 0..k {
            let w = if k == 1 { 0.5 } else { 0.3 + 0.4 * j as f64 / (k - 1) as f64 };
            world.push([center[0] + w * (next[0] - center[0]), center[1] + w * (next[1] - center[1])]);
        }
        center = next;
    }
    world.truncate(n);

    // head pan: cumulative scene shift follows a slow sinusoid
    let pan = |t: Timestamp| {
        let x = 2.0 * PI * rel_s(s, t) / g.head_pan_period_s;
        [g.head_pan_amplitude * x.sin(), 0.5 * g.head_pan_amplitude * (0.7 * x).sin()]
    };
    let flow_period = 1e6 / g.flow_rate_hz;
    let flow_t: Vec<Timestamp> = (0..)
        .map(|k| Timestamp(s.start_us + (k as f64 * flow_period).round() as i64))
        .take_while(|t| t.0 - s.start_us < (s.duration_s * 1e6) as i64 + flow_period as i64)
        .collect();
    let mut prev = [0.0, 0.0];
    let flows: Vec<HeadFlow> = flow_t
        .iter()
        .map(|&t| {
            let c = pan(t);
            let f = HeadFlow { du: c[0] - prev[0], dv: c[1] - prev[1] };
            prev = c;
            f
        })
        .collect();
    // raw = world + the same running sum the compensation subtracts
    let mut j = 0;
    let (mut cu, mut cv) = (0.0, 0.0);
    let samples: Vec<GazeSample> = ts
        .iter()
        .zip(&world)
        .map(|(&t, w)| {
            while j < flow_t.len() && flow_t[j] <= t {
                cu += flows[j].du;
                cv += flows[j].dv;
                j += 1;
            }
            GazeSample { gx: (w[0] + cu).clamp(0.0, 1.0), gy: (w[1] + cv).clamp(0.0, 1.0), confidence: g.confidence }
        })
        .collect();
    let gaze = SampleSeries::new(ts, samples)?;
    out.write(StreamKind::Gaze, g.rate_hz, 0, |f| write_records(f, &gaze))?;
    let flow = SampleSeries::new(flow_t, flows)?;
    out.write(StreamKind::HeadFlow, g.flow_rate_hz, 0, |f| write_records(f, &flow))?;

    if out.wants(StreamKind::LabelRaster) {
        let (w, h) = (g.raster_width, g.raster_height);
        for v in 0..4usize {
            let mut f = out.file(&format!("rasters/grid_{v}.txt"))?;
            let mut text = format!("{w} {h}\n");
            for y in 0..h {
                let row: Vec<String> = (0..w)
                    .map(|x| {
                        let band = if y * 3 < h { 0 } else if y * 3 < 2 * h { 1 } else { 2 };
                        let id = (band * 3 + (x * 3 / w) + v) % SCENE_CLASSES.len();
                        id.to_string()
                    })
                    .collect();
                text.push_str(&row.join(" "));
                text.push('\n');
            }
            f.write_all(text.as_bytes()).and_then(|_| f.flush()).map_err(|e| Error::io(out.dir, e))?;
        }
        let mut f = out.file(legend_path(Path::new(""), 0).to_str().unwrap_or("legend_0.csv"))?;
        let mut text = String::from("id,class_name\n");
        for (i, c) in SCENE_CLASSES.iter().enumerate() {
            text.push_str(&format!("{i},{c}\n"));
        }
        f.write_all(text.as_bytes()).and_then(|_| f.flush()).map_err(|e| Error::io(out.dir, e))?;
        let rt = grid(s.start_us, s.duration_s, g.raster_rate_hz);
        let refs: Vec<RasterRef> = (0..rt.len())
            .map(|k| RasterRef { grid_path: format!("rasters/grid_{}.txt", k % 4), legend_id: 0 })
            .collect();
        let index = SampleSeries::new(rt, refs)?;
        out.write(StreamKind::LabelRaster, g.raster_rate_hz, 0, |f| write_raster_index(f, &index))?;
    }
    Ok(truth)
}

fn gen_eda(s: &SynthScenario, out: &mut Out) -> Result<Vec<Timestamp>> {
    let e = &s.eda;
    let mut rng = rng_for(s.seed, StreamKind::Eda);
    let ts = grid(s.start_us, s.duration_s, e.rate_hz);
    let dt = 1.0 / e.rate_hz;
    // planted responses on the sample grid, at least 15 s apart and clear of
    // the session edges
    let mut planted: Vec<f64> = Vec::new();
    let mut t = e.scr_first_s;
    while t < s.duration_s - 15.0 {
        let snapped = (t / dt).round() * dt;
        if planted.last().is_none_or(|&p| snapped - p >= 15.0) {
            planted.push(snapped);
        }
        let j = if e.scr_jitter_s > 0.0 { rng.random_range(-e.scr_jitter_s..=e.scr_jitter_s) } else { 0.0 };
        t += e.scr_interval_s + j;
    }
    let noise = normal(e.noise_us);
    let vals: Vec<f64> = ts
        .iter()
        .map(|&ts_| {
            let x = rel_s(s, ts_);
            let bumps: f64 = planted
                .iter()
                .filter(|&&p| (x - p).abs() < 8.0 * e.scr_sigma_s)
                .map(|&p| e.scr_amplitude_us * (-0.5 * ((x - p) / e.scr_sigma_s).powi(2)).exp())
                .sum();
            (e.baseline_us + e.ramp_us_per_min * x / 60.0 + bumps + noise.sample(&mut rng)).max(0.0)
        })
        .collect();
    let eda = SampleSeries::new(ts, vals)?;
    out.write(StreamKind::Eda, e.rate_hz, 0, |f| write_scalar(f, StreamKind::Eda, &eda))?;
    Ok(planted.iter().map(|p| Timestamp(s.start_us + (p * 1e6).round() as i64)).collect())
}

fn gen_ibi(s: &SynthScenario, out: &mut Out) -> Result<()> {
    let mut rng = rng_for(s.seed, StreamKind::Ibi);
    let d = normal(s.ibi.sd_ms);
    let end = s.start_us + (s.duration_s * 1e6) as i64;
    let mut t = s.start_us + 500_000;
    let mut pairs = Vec::new();
    loop {
        let ibi_us = ((s.ibi.mean_ms + d.sample(&mut rng)).clamp(400.0, 1500.0) * 1000.0).round() as i64;
        t += ibi_us;
        if t >= end {
            break;
        }
        pairs.push((Timestamp(t), ibi_us as f64 / 1000.0));
    }
    let ibi = SampleSeries::from_pairs(pairs)?;
    out.write(StreamKind::Ibi, 1000.0 / s.ibi.mean_ms, 0, |f| write_scalar(f, StreamKind::Ibi, &ibi))
}

/// Planted stride cycles `(start_s, end_s)` for one foot.
fn stride_cycles(s: &SynthScenario, walk: &Walk, dist: StrideDist, phase_s: f64, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let d = Normal::new(dist.mean_s, dist.sd_s.max(0.0)).expect("finite stride distribution");
    let mut cycles = Vec::new();
    let mut t = 1.0 + phase_s;
    let last = s.duration_s - 1.0;
    loop {
        let len = d.sample(rng).clamp(0.6, 2.0);
        if t + len > last {
            break;
        }
        if let Some(&(_, b)) = walk.pauses.iter().find(|&&(a, b)| t < b && t + len > a) {
            t = b + 0.3 + phase_s;
            continue;
        }
        cycles.push((t, t + len));
        t += len;
    }
    cycles
}

fn gen_imu(s: &SynthScenario, walk: &Walk, out: &mut Out) -> Result<(Vec<Timestamp>, Vec<Timestamp>)> {
    let g = &s.gait;
    let ts = grid(s.start_us, s.duration_s, g.rate_hz);
    let mut strikes = Vec::new();
    for (kind, dist, phase) in [
        (StreamKind::ImuFootLeft, g.left, 0.0),
        (StreamKind::ImuFootRight, g.right, 0.5 * g.right.mean_s),
    ] {
        let mut rng = rng_for(s.seed, kind);
        let cycles = stride_cycles(s, walk, dist, phase, &mut rng);
        let noise = normal(g.noise);
        let mut k = 0;
        let samples: Vec<(Timestamp, ImuSample)> = ts
            .iter()
            .map(|&t| {
                let x = rel_s(s, t);
                while k < cycles.len() && cycles[k].1 <= x {
                    k += 1;
                }
                let gy = match cycles.get(k) {
                    Some(&(a, b)) if x >= a => -g.amplitude * (2.0 * PI * (x - a) / (b - a)).sin(),
                    _ => 0.0,
                };
                let sample = ImuSample { ax: 0.0, ay: 0.0, az: 9.81, gx: 0.0, gy: gy + noise.sample(&mut rng), gz: 0.0 };
                (Timestamp(t.0 - g.clock_offset_us), sample)
            })
            .collect();
        let imu = SampleSeries::from_pairs(samples)?;
        out.write(kind, g.rate_hz, g.clock_offset_us, |f| write_records(f, &imu))?;
        strikes.push(cycles.iter().map(|&(_, b)| Timestamp(s.start_us + (b * 1e6).round() as i64)).collect());
    }
    let right = strikes.pop().unwrap_or_default();
    let left = strikes.pop().unwrap_or_default();
    Ok((left, right))
}

fn gen_video(s: &SynthScenario, walk: &Walk, out: &mut Out) -> Result<()> {
    let v = &s.video;
    let mut rng = rng_for(s.seed, StreamKind::MaterialEmbedding);
    let ts = grid(s.start_us, s.duration_s, v.rate_hz);
    let names = default_class_names();
    let fraction = s.stature_fraction();
    let noise = normal(v.embedding_noise);
    let (foot_row, cx) = (900.0, 960.0);
    let mut frames = Vec::with_capacity(ts.len());
    let mut edges = Vec::with_capacity(ts.len());
    let mut embeds = Vec::with_capacity(ts.len());
    for &t in &ts {
        let x = rel_s(s, t);
        let mpp = v.meters_per_pixel * (1.0 + v.scale_variation * (2.0 * PI * x / 37.0).sin());
        let body_px = s.stature_m * fraction / mpp;
        let kp = |name: &str, px: f64, py: f64| Keypoint { name: name.into(), px, py, confidence: 0.9 };
        frames.push(SkeletonFrame {
            joints: vec![
                kp("head", cx, foot_row - body_px),
                kp("left_ankle", cx - 20.0, foot_row),
                kp("right_ankle", cx + 20.0, foot_row),
            ],
        });
        let span = material_at(&v.materials, walk.traveled(x));
        let half = 0.5 * span.width_m / mpp;
        edges.push(WalkwayEdges { left_px: cx - half, right_px: cx + half, foot_row_px: foot_row });
        let class = names.iter().position(|n| *n == span.class_name).unwrap_or(0);
        let e: Vec<f64> = (0..v.embedding_dim)
            .map(|i| if i == class { 1.0 } else { 0.0 } + noise.sample(&mut rng))
            .collect();
        embeds.push(e);
    }
    let skel = SampleSeries::new(ts.clone(), frames)?;
    out.write(StreamKind::Skeleton, v.rate_hz, 0, |f| write_skeleton(f, &skel))?;
    let ed = SampleSeries::new(ts.clone(), edges)?;
    out.write(StreamKind::WalkwayEdges, v.rate_hz, 0, |f| write_records(f, &ed))?;
    let em = SampleSeries::new(ts, embeds)?;
    out.write(StreamKind::MaterialEmbedding, v.rate_hz, 0, |f| write_embeddings(f, v.embedding_dim, &em))?;

    // probe: class c reads embedding component c
    let weights = (0..names.len())
        .map(|c| (0..v.embedding_dim).map(|i| if i == c { 1.0 } else { 0.0 }).collect())
        .collect();
    let probe = LinearProbeModel::new(names.clone(), vec![0.0; names.len()], weights)?;
    let name = Parameters::default().material_probe;
    let mut f = out.file(&name)?;
    probe.write_csv(&mut f).and_then(|_| f.flush()).map_err(|e| Error::io(out.dir.join(&name), e))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionScore {
    pub truth: usize,
    pub detected: usize,
    pub matched: usize,
    /// Absent when nothing was detected.
    pub precision: Option<f64>,
    /// Absent when there was nothing to find.
    pub recall: Option<f64>,
    pub tolerance_us: i64,
}

impl DetectionScore {
    fn new(truth: usize, detected: usize, matched: usize, tolerance_us: i64) -> Self {
        DetectionScore {
            truth,
            detected,
            matched,
            precision: (detected > 0).then(|| matched as f64 / detected as f64),
            recall: (truth > 0).then(|| matched as f64 / truth as f64),
            tolerance_us,
        }
    }

    pub fn is_perfect(&self) -> bool {
        self.precision == Some(1.0) && self.recall == Some(1.0)
    }
}

/// One-to-one greedy matching of two time-sorted lists within `tol`.
pub fn match_events(truth: &[Timestamp], detected: &[Timestamp], tol: i64) -> usize {
    let (mut i, mut j, mut m) = (0, 0, 0);
    while i < truth.len() && j < detected.len() {
        let d = (detected[j] - truth[i]).0;
        if d.abs() <= tol {
            m += 1;
            i += 1;
            j += 1;
        } else if d > 0 {
            i += 1;
        } else {
            j += 1;
        }
    }
    m
}

pub fn match_spans(truth: &[TimeSpan], detected: &[TimeSpan], tol: i64) -> usize {
    let (mut i, mut j, mut m) = (0, 0, 0);
    while i < truth.len() && j < detected.len() {
        let ds = (detected[j].t_start - truth[i].t_start).0;
        if ds.abs() <= tol {
            if (detected[j].t_end - truth[i].t_end).0.abs() <= tol {
                m += 1;
            }
            i += 1;
            j += 1;
        } else if ds > 0 {
            i += 1;
        } else {
            j += 1;
        }
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub session_id: String,
    pub fixations: DetectionScore,
    pub scr_peaks: DetectionScore,
    pub heel_strikes: DetectionScore,
    pub trajectory_rmse_m: Option<f64>,
    pub trajectory_max_error_m: Option<f64>,
    pub scale_rel_error: Option<f64>,
    pub rotation_error_deg: Option<f64>,
    pub translation_error_m: Option<f64>,
    pub width_mae_m: Option<f64>,
    pub material_accuracy: Option<f64>,
}

impl ScoreReport {
    pub fn detectors_perfect(&self) -> bool {
        self.fixations.is_perfect() && self.scr_peaks.is_perfect() && self.heel_strikes.is_perfect()
    }
}

/// Compares a bundle with the truth of the scenario that produced it.
pub fn score_against_truth(bundle: &SessionBundle, truth: &GroundTruth) -> Result<ScoreReport> {
    if bundle.index.session_id != truth.session_id {
        return Err(Error::ScenarioMismatch { bundle: bundle.index.session_id.clone(), truth: truth.session_id.clone() });
    }
    let sc = &truth.scenario;
    let walk = Walk::new(sc);
    let ev = &bundle.events;

    let det_fix: Vec<TimeSpan> = ev.fixations.iter().map(|f| TimeSpan { t_start: f.t_start, t_end: f.t_end }).collect();
    let tol = truth.period(StreamKind::Gaze);
    let fixations = DetectionScore::new(truth.fixations.len(), det_fix.len(), match_spans(&truth.fixations, &det_fix, tol), tol);

    let tol = truth.period(StreamKind::Eda);
    let det_scr: Vec<Timestamp> = ev.scr_peaks.iter().map(|p| p.t_peak).collect();
    let scr_peaks = DetectionScore::new(truth.scr_peaks.len(), det_scr.len(), match_events(&truth.scr_peaks, &det_scr, tol), tol);

    let tol = truth.period(StreamKind::ImuFootLeft);
    let side = |foot| -> Vec<Timestamp> {
        ev.strides.iter().filter(|e| e.foot == foot).map(|e| e.t_heel_strike).collect()
    };
    let (dl, dr) = (side(crate::gait::Foot::Left), side(crate::gait::Foot::Right));
    let matched = match_events(&truth.heel_strikes_left, &dl, tol) + match_events(&truth.heel_strikes_right, &dr, tol);
    let heel_strikes = DetectionScore::new(
        truth.heel_strikes_left.len() + truth.heel_strikes_right.len(),
        dl.len() + dr.len(),
        matched,
        tol,
    );

    // bring estimated ENU into the truth frame through geodetic coordinates
    let traj = &bundle.trajectory.trajectory;
    let reframe = |p: &EnuPoint| -> Result<EnuPoint> {
        let (lat, lon, h) = enu_to_geodetic(*p, traj.origin);
        geodetic_to_enu(lat, lon, h, sc.origin)
    };
    let mut errs = Vec::with_capacity(traj.points.len());
    for p in &traj.points {
        let est = reframe(&p.enu)?;
        let [e, n] = walk.position_at(rel_s(sc, p.t));
        errs.push((est.e - e).hypot(est.n - n));
    }
    let trajectory_rmse_m = (!errs.is_empty()).then(|| (errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64).sqrt());
    let trajectory_max_error_m = errs.iter().copied().reduce(f64::max);

    let (mut scale_rel_error, mut rotation_error_deg, mut translation_error_m) = (None, None, None);
    if let Some(al) = &bundle.trajectory.alignment {
        let g = al.global();
        let t = &truth.slam_to_enu;
        scale_rel_error = Some((g.scale - t.scale).abs() / t.scale);
        rotation_error_deg = Some(rotation_angle_between(&g.rotation_matrix(), &t.rotation_matrix()).to_degrees());
        let est_t = reframe(&EnuPoint::from_vector(&g.translation_vector()))?;
        translation_error_m = Some((est_t.to_vector() - t.translation_vector()).norm());
    }

    let width_errs: Vec<f64> = ev
        .widths
        .iter()
        .map(|w| (w.width_m - material_at(&sc.video.materials, walk.traveled(rel_s(sc, w.t))).width_m).abs())
        .collect();
    let width_mae_m = (!width_errs.is_empty()).then(|| width_errs.iter().sum::<f64>() / width_errs.len() as f64);
    let hits = ev
        .materials
        .iter()
        .filter(|m| material_at(&sc.video.materials, walk.traveled(rel_s(sc, m.t))).class_name == m.label.class_name)
        .count();
    let material_accuracy = (!ev.materials.is_empty()).then(|| hits as f64 / ev.materials.len() as f64);

    Ok(ScoreReport {
        session_id: truth.session_id.clone(),
        fixations,
        scr_peaks,
        heel_strikes,
        trajectory_rmse_m,
        trajectory_max_error_m,
        scale_rel_error,
        rotation_error_deg,
        translation_error_m,
        width_mae_m,
        material_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn short(seed: u64) -> SynthScenario {
        SynthScenario { duration_s: 90.0, pauses: vec![], seed, ..SynthScenario::noiseless(seed) }
    }

    #[test]
    fn walk_folds_back_along_route() {
        let s = SynthScenario { route: vec![[0.0, 0.0], [10.0, 0.0]], speed_mps: 1.0, pauses: vec![], ..Default::default() };
        let w = Walk::new(&s);
        assert_eq!(w.position_at(5.0), [5.0, 0.0]);
        assert_eq!(w.position_at(15.0), [5.0, 0.0]);
        assert_eq!(w.position_at(20.0), [0.0, 0.0]);
        let p = SynthScenario { pauses: vec![Interval { start_s: 2.0, duration_s: 3.0 }], ..s };
        let w = Walk::new(&p);
        assert_eq!(w.traveled(4.0), 2.0);
        assert_eq!(w.traveled(6.0), 3.0);
        assert!(!w.is_moving(3.0));
    }

    #[test]
    fn grid_spacing() {
        let g = grid(0, 1.0, 3.0);
        assert_eq!(g, vec![Timestamp(0), Timestamp(333_333), Timestamp(666_667)]);
    }

    #[test]
    fn same_seed_same_bytes() {
        let s = SynthScenario { duration_s: 40.0, ..Default::default() };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        generate_session(&s, a.path()).unwrap();
        generate_session(&s, b.path()).unwrap();
        let mut names: Vec<_> = std::fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        assert!(names.len() >= 14);
        for n in names {
            let pa = a.path().join(&n);
            if pa.is_file() {
                assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(b.path().join(&n)).unwrap(), "{n:?}");
            }
        }
    }

    #[test]
    fn generated_streams_ingest_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        let (m, truth) = generate_session(&short(3), dir.path()).unwrap();
        assert_eq!(m.streams.len(), 12);
        for d in &m.streams {
            crate::ingest::parse_stream(d, &m.dir).unwrap();
        }
        assert!(!truth.fixations.is_empty());
        assert!(!truth.scr_peaks.is_empty());
        assert!(truth.heel_strikes_left.len() > 50);
        let t = GroundTruth::load(&dir.path().join("ground_truth.json")).unwrap();
        assert_eq!(t, truth);
    }

    #[test]
    fn omitted_streams_are_not_declared() {
        let dir = tempfile::tempdir().unwrap();
        let s = SynthScenario { omit_streams: vec![StreamKind::Gaze], ..short(4) };
        let (m, _) = generate_session(&s, dir.path()).unwrap();
        assert!(m.stream(StreamKind::Gaze).is_none());
        assert!(!dir.path().join("gaze.csv").exists());
    }

    #[test]
    fn matching_rules() {
        let t = |v: &[i64]| v.iter().map(|&x| Timestamp(x)).collect::<Vec<_>>();
        assert_eq!(match_events(&t(&[0, 100, 200]), &t(&[5, 210]), 10), 2);
        assert_eq!(match_events(&t(&[0, 100]), &t(&[0, 0, 100]), 0), 2);
        let s = DetectionScore::new(3, 0, 0, 10);
        assert_eq!(s.precision, None);
        assert_eq!(s.recall, Some(0.0));
    }
}
