//! End-to-end run: parse every stream, register, analyze each modality,
//! fuse into segments and assemble the bundle.
//!
//! GPS and SLAM are required. Every other stream is optional; when one is
//! missing or its stage fails the dependent metrics are left absent and a
//! warning is recorded instead.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::fusion::{
    attach_metrics, build_segments, canonical_json, hotspot_zscores, BundleIndex, BundleSummary, EventsDoc,
    MetricInputs, SegmentSpec, SessionBundle, TimedMaterial, TrajectoryDoc, WindowsDoc, BUNDLE_DOCUMENTS,
    BUNDLE_VERSION,
};
use crate::gait::{detect_strides, gait_windows, Foot, StrideEvent, StrideParams};
use crate::gaze::{compensate_head_motion, detect_fixations_idt, intersect_fixations, set_scene_centroids, IdtParams};
use crate::geo::register_session;
use crate::ingest::{load_label_rasters, parse_stream, resample_uniform, AnyStream};
use crate::manifest::{SessionManifest, StreamDecl, StreamKind};
use crate::model::{Duration, SampleSeries, Timestamp};
use crate::params::Parameters;
use crate::physio::{decompose_eda, detect_scr_peaks, filter_ibi, physio_windows, ScrParams, WindowParams};
use crate::walkway::{classify_series, pixel_scale, smooth_materials, width_series, LinearProbeModel, ScaleParams};

pub const RUN_REPORT_FILE: &str = "run_report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamReport {
    pub kind: StreamKind,
    pub path: String,
    pub clock_offset_us: i64,
    pub samples: usize,
    pub t_first: Option<Timestamp>,
    pub t_last: Option<Timestamp>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub session_id: String,
    pub bundle_version: String,
    /// Every parameter in force for the run, defaults included.
    pub parameters: Parameters,
    /// The manifest's own overrides.
    pub manifest_overrides: Map<String, Value>,
    pub streams: Vec<StreamReport>,
    pub warnings: Vec<String>,
    pub summary: BundleSummary,
}

impl RunReport {
    /// Reads the effective parameters back out of a saved report.
    pub fn parameters_from_file(path: &Path) -> Result<Map<String, Value>> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: Value = serde_json::from_str(&text).map_err(|e| Error::Json { path: path.display().to_string(), source: e })?;
        match doc.get("parameters") {
            Some(Value::Object(m)) => Ok(m.clone()),
            _ => Err(Error::manifest("/parameters", format!("{} has no parameters object", path.display()))),
        }
    }
}

/// Parses every declared stream; results keep the manifest's order.
pub fn load_streams(manifest: &SessionManifest) -> Vec<(StreamDecl, Result<AnyStream>)> {
    let parsed = crate::par::map(&manifest.streams, |d| parse_stream(d, &manifest.dir));
    manifest.streams.iter().cloned().zip(parsed).collect()
}

#[derive(Default)]
struct Streams {
    by_kind: BTreeMap<StreamKind, AnyStream>,
}

macro_rules! getter {
    ($name:ident, $variant:ident, $t:ty) => {
        fn $name(&self) -> Option<&SampleSeries<$t>> {
            match self.by_kind.get(&StreamKind::$variant) {
                Some(AnyStream::$variant(s)) => Some(s),
                _ => None,
            }
        }
    };
}

impl Streams {
    getter!(gps, Gps, crate::ingest::GpsFix);
    getter!(slam, SlamPose, crate::ingest::SlamPose);
    getter!(gaze, Gaze, crate::ingest::GazeSample);
    getter!(head_flow, HeadFlow, crate::ingest::HeadFlow);
    getter!(rasters, LabelRaster, crate::ingest::RasterRef);
    getter!(eda, Eda, f64);
    getter!(ibi, Ibi, f64);
    getter!(imu_left, ImuFootLeft, crate::ingest::ImuSample);
    getter!(imu_right, ImuFootRight, crate::ingest::ImuSample);
    getter!(skeleton, Skeleton, crate::ingest::SkeletonFrame);
    getter!(edges, WalkwayEdges, crate::ingest::WalkwayEdges);
    getter!(embeddings, MaterialEmbedding, Vec<f64>);
}

fn span<V>(s: &SampleSeries<V>) -> Option<(Timestamp, Timestamp)> {
    Some((s.first_time()?, s.last_time()?))
}

/// Bundle and run report for one session.
#[derive(Debug, Clone, PartialEq)]
pub struct FuseOutput {
    pub bundle: SessionBundle,
    pub report: RunReport,
}

/// Runs the whole pipeline with `params` (normally the manifest's effective
/// parameters, possibly with command-line overrides on top).
pub fn fuse_session(manifest: &SessionManifest, params: &Parameters) -> Result<FuseOutput> {
    let mut warnings = Vec::new();
    let mut streams = Streams::default();
    let mut stream_reports = Vec::new();
    for (decl, parsed) in load_streams(manifest) {
        let s = parsed?;
        let (samples, t_first, t_last) = s.summary();
        stream_reports.push(StreamReport {
            kind: decl.kind,
            path: decl.path.clone(),
            clock_offset_us: decl.clock_offset_us,
            samples,
            t_first,
            t_last,
        });
        streams.by_kind.insert(decl.kind, s);
    }
    for kind in StreamKind::ALL {
        if !streams.by_kind.contains_key(&kind) {
            warnings.push(format!("{kind} stream absent; dependent metrics omitted"));
        }
    }

    let (Some(gps), Some(slam)) = (streams.gps(), streams.slam()) else {
        return Err(Error::manifest("/streams", "gps and slam_pose streams are required for fusion"));
    };
    let reg = register_session(gps, slam, params)?;
    let traj = &reg.trajectory;

    // gaze
    let mut fixations = Vec::new();
    let mut targets = Vec::new();
    if let Some(raw) = streams.gaze() {
        let gaze = match streams.head_flow() {
            Some(flow) => {
                let c = compensate_head_motion(raw, flow);
                if !c.uncovered.is_empty() {
                    warnings.push(format!("gaze: {} samples outside head_flow coverage left uncompensated", c.uncovered.len()));
                }
                c.gaze
            }
            None => raw.clone(),
        };
        fixations = detect_fixations_idt(&gaze, &IdtParams::from_params(params));
        set_scene_centroids(&mut fixations, raw, params.min_confidence);
        if let (Some(index), Some(decl)) = (streams.rasters(), manifest.stream(StreamKind::LabelRaster)) {
            let path = manifest.resolve(&decl.path);
            let dir = path.parent().unwrap_or(&manifest.dir);
            match load_label_rasters(index, dir) {
                Ok(rasters) => {
                    let hit = intersect_fixations(&fixations, &rasters, Duration::from_millis(params.raster_tol_ms));
                    if hit.unmatched > 0 || hit.out_of_frame > 0 {
                        warnings.push(format!(
                            "gaze: {} fixations without a raster in tolerance, {} outside the frame",
                            hit.unmatched, hit.out_of_frame
                        ));
                    }
                    targets = hit.records;
                }
                Err(e) => warnings.push(format!("label_raster: {} ({})", e, e.code())),
            }
        }
    }

    // physiology
    let mut scr = Vec::new();
    let (mut tonic, mut phasic) = (None, None);
    if let Some(eda) = streams.eda() {
        let res = resample_uniform(eda, params.eda_resample_hz)
            .and_then(|r| decompose_eda(&r, Duration::from_secs_f64(params.w_tonic_s)));
        match res {
            Ok(d) => {
                scr = detect_scr_peaks(&d.phasic, &ScrParams::from_params(params));
                tonic = Some(d.tonic);
                phasic = Some(d.phasic);
            }
            Err(e) => warnings.push(format!("eda: {} ({})", e, e.code())),
        }
    }
    let mut physio = Vec::new();
    if let Some(ibi) = streams.ibi() {
        let (clean, dropped) = filter_ibi(ibi, params.ibi_min_ms, params.ibi_max_ms);
        if dropped > 0 {
            warnings.push(format!("ibi: {dropped} intervals outside [{}, {}] ms dropped", params.ibi_min_ms, params.ibi_max_ms));
        }
        physio = physio_windows(&clean, &scr, &WindowParams::from_params(params));
    }

    // gait
    let stride_params = StrideParams::from_params(params)?;
    let mut feet: [Vec<StrideEvent>; 2] = Default::default();
    for (slot, foot, imu) in [(0, Foot::Left, streams.imu_left()), (1, Foot::Right, streams.imu_right())] {
        if let Some(imu) = imu {
            match detect_strides(imu, foot, &stride_params) {
                Ok(ev) => feet[slot] = ev,
                Err(e) => warnings.push(format!("{foot:?} foot: {} ({})", e, e.code())),
            }
        }
    }
    let [left, right] = feet;
    let gait = gait_windows(
        &left,
        &right,
        Duration::from_secs_f64(params.gait_window_s),
        Duration::from_secs_f64(params.gait_step_s),
        stride_params.max_stride,
    );
    let mut strides: Vec<StrideEvent> = left.iter().chain(&right).copied().collect();
    strides.sort_by_key(|e| (e.t_heel_strike, e.foot));
    let imu_span = [streams.imu_left().and_then(span), streams.imu_right().and_then(span)]
        .into_iter()
        .flatten()
        .reduce(|a, b| (a.0.min(b.0), a.1.max(b.1)));

    // walkway
    let mut widths = Vec::new();
    if let (Some(skel), Some(edges)) = (streams.skeleton(), streams.edges()) {
        let sp = ScaleParams::from_params(params);
        let stature = manifest.participant.stature_m;
        let scales: Vec<_> = skel.iter().filter_map(|(t, f)| pixel_scale(t, f, stature, &sp).ok()).collect();
        if scales.len() < skel.len() {
            warnings.push(format!("skeleton: {} frames gave no usable scale", skel.len() - scales.len()));
        }
        let (w, skipped) = width_series(edges, &scales, Duration::from_secs_f64(params.max_scale_age_s));
        if skipped > 0 {
            warnings.push(format!("walkway_edges: {skipped} frames without a usable scale"));
        }
        widths = w;
    }
    let mut materials = None;
    if let Some(emb) = streams.embeddings() {
        let res = LinearProbeModel::from_csv(&manifest.resolve(&params.material_probe))
            .and_then(|m| classify_series(emb, &m))
            .map(|l| smooth_materials(&l, params.material_smooth_window));
        match res {
            Ok(l) => materials = Some(l),
            Err(e) => warnings.push(format!("material_embedding: {} ({})", e, e.code())),
        }
    }

    // fusion
    let spec = SegmentSpec::from_params(params)?;
    let mut segments = build_segments(traj, &spec);
    attach_metrics(
        &mut segments,
        &MetricInputs {
            fixations: &fixations,
            targets: &targets,
            gaze_span: streams.gaze().and_then(span),
            scr: &scr,
            eda_span: streams.eda().and_then(span),
            physio: &physio,
            strides: &strides,
            imu_span,
            gait: &gait,
            widths: &widths,
            materials: materials.as_ref(),
        },
    );
    let hotspots = hotspot_zscores(&segments, &params.hotspot_metrics, params.z_thresh, params.min_coverage);
    for (m, e) in &hotspots.errors {
        warnings.push(format!("hotspots: {m}: {e}"));
    }

    let mut out_of_range = BTreeMap::new();
    if let Some((a, b)) = traj.time_range() {
        let outside = |ts: &mut dyn Iterator<Item = Timestamp>| ts.filter(|t| *t < a || *t > b).count();
        let mut count = |name: &str, n: usize| {
            if n > 0 {
                out_of_range.insert(name.to_string(), n);
            }
        };
        count("fixations", outside(&mut fixations.iter().map(|f| f.t_start.midpoint(f.t_end))));
        count("scr_peaks", outside(&mut scr.iter().map(|p| p.t_peak)));
        count("strides", outside(&mut strides.iter().map(|s| s.t_heel_strike)));
        count("widths", outside(&mut widths.iter().map(|w| w.t)));
        if let Some(m) = &materials {
            count("materials", outside(&mut m.timestamps().iter().copied()));
        }
    }
    for (k, n) in &out_of_range {
        warnings.push(format!("{k}: {n} events outside the trajectory time range"));
    }

    let materials: Vec<TimedMaterial> = materials
        .map(|m| m.iter().map(|(t, l)| TimedMaterial { t, label: l.clone() }).collect())
        .unwrap_or_default();
    let summary = BundleSummary {
        n_trajectory_points: traj.points.len(),
        total_arc_m: traj.total_arc_m(),
        n_segments: segments.len(),
        n_fixations: fixations.len(),
        n_scr_peaks: scr.len(),
        n_strides: strides.len(),
        n_widths: widths.len(),
        n_materials: materials.len(),
        out_of_range,
    };
    let bundle = SessionBundle {
        index: BundleIndex {
            format_version: BUNDLE_VERSION.into(),
            session_id: manifest.session_id.clone(),
            manifest: manifest.to_json(),
            parameters: params.clone(),
            segment_spec: spec,
            summary: summary.clone(),
            hotspots,
            warnings: warnings.clone(),
            documents: BUNDLE_DOCUMENTS.iter().map(|d| d.to_string()).collect(),
        },
        trajectory: TrajectoryDoc {
            alignment: Some(reg.alignment.clone()),
            anchor_rms_m: Some(reg.anchor_rms_m),
            anchors_kept: reg.selection.kept.len(),
            anchors_rejected: reg.selection.rejected.len(),
            trajectory: reg.trajectory,
        },
        events: EventsDoc { fixations, gaze_targets: targets, scr_peaks: scr, strides, widths, materials },
        windows: WindowsDoc { physio, gait, eda_tonic: tonic, eda_phasic: phasic },
        segments,
    };
    let report = RunReport {
        session_id: manifest.session_id.clone(),
        bundle_version: BUNDLE_VERSION.into(),
        parameters: params.clone(),
        manifest_overrides: manifest.overrides.clone(),
        streams: stream_reports,
        warnings,
        summary,
    };
    Ok(FuseOutput { bundle, report })
}

/// Writes the bundle documents plus `run_report.json` into `dir`.
pub fn write_output(out: &FuseOutput, dir: &Path) -> Result<()> {
    crate::fusion::export_bundle(&out.bundle, dir)?;
    let path = dir.join(RUN_REPORT_FILE);
    std::fs::write(&path, canonical_json(&out.report)?).map_err(|e| Error::io(&path, e))
}
