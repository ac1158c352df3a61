//! `session.json`: the document that binds a session's streams together.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::params::Parameters;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    Gps,
    SlamPose,
    Gaze,
    HeadFlow,
    LabelRaster,
    Eda,
    Ibi,
    ImuFootLeft,
    ImuFootRight,
    Skeleton,
    WalkwayEdges,
    MaterialEmbedding,
}

impl StreamKind {
    pub const ALL: [StreamKind; 12] = [
        StreamKind::Gps,
        StreamKind::SlamPose,
        StreamKind::Gaze,
        StreamKind::HeadFlow,
        StreamKind::LabelRaster,
        StreamKind::Eda,
        StreamKind::Ibi,
        StreamKind::ImuFootLeft,
        StreamKind::ImuFootRight,
        StreamKind::Skeleton,
        StreamKind::WalkwayEdges,
        StreamKind::MaterialEmbedding,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StreamKind::Gps => "gps",
            StreamKind::SlamPose => "slam_pose",
            StreamKind::Gaze => "gaze",
            StreamKind::HeadFlow => "head_flow",
            StreamKind::LabelRaster => "label_raster",
            StreamKind::Eda => "eda",
            StreamKind::Ibi => "ibi",
            StreamKind::ImuFootLeft => "imu_foot_left",
            StreamKind::ImuFootRight => "imu_foot_right",
            StreamKind::Skeleton => "skeleton",
            StreamKind::WalkwayEdges => "walkway_edges",
            StreamKind::MaterialEmbedding => "material_embedding",
        }
    }
}

impl fmt::Display for StreamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamDecl {
    pub kind: StreamKind,
    pub path: String,
    #[serde(default)]
    pub clock_offset_us: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nominal_rate_hz: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Participant {
    pub id: String,
    pub stature_m: f64,
    #[serde(default)]
    pub cohort_tag: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    session_id: String,
    participant: Participant,
    streams: Vec<StreamDecl>,
    #[serde(default)]
    parameters: Map<String, Value>,
}

/// A validated session manifest. `parameters` holds the effective values
/// (defaults with the manifest's overrides applied); `overrides` keeps the
/// manifest's own entries verbatim.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionManifest {
    pub session_id: String,
    pub participant: Participant,
    pub streams: Vec<StreamDecl>,
    pub parameters: Parameters,
    pub overrides: Map<String, Value>,
    pub dir: PathBuf,
}

impl SessionManifest {
    pub fn stream(&self, kind: StreamKind) -> Option<&StreamDecl> {
        self.streams.iter().find(|s| s.kind == kind)
    }

    pub fn resolve(&self, relative: &str) -> PathBuf {
        self.dir.join(relative)
    }

    /// The manifest document as written to disk (effective parameters are
    /// not inlined; only the overrides are).
    pub fn to_json(&self) -> Value {
        let raw = RawManifest {
            session_id: self.session_id.clone(),
            participant: self.participant.clone(),
            streams: self.streams.clone(),
            parameters: self.overrides.clone(),
        };
        serde_json::to_value(raw).unwrap_or(Value::Null)
    }

    /// Builds and validates a manifest from a JSON document; `dir` anchors
    /// relative stream paths.
    pub fn from_json(doc: &Value, dir: &Path) -> Result<Self> {
        let raw: RawManifest = serde_path_to_error::deserialize(doc.clone()).map_err(|e| {
            let pointer = json_pointer(e.path());
            Error::manifest(pointer, e.into_inner().to_string())
        })?;
        let p = &raw.participant;
        if !(p.stature_m > 1.0 && p.stature_m < 2.2) {
            return Err(Error::manifest(
                "/participant/stature_m",
                format!("stature {} m outside (1.0, 2.2)", p.stature_m),
            ));
        }
        for (i, s) in raw.streams.iter().enumerate() {
            if raw.streams[..i].iter().any(|o| o.kind == s.kind) {
                return Err(Error::manifest(
                    format!("/streams/{i}/kind"),
                    format!("duplicate stream kind `{}`", s.kind),
                ));
            }
            if let Some(r) = s.nominal_rate_hz {
                if !(r.is_finite() && r > 0.0) {
                    return Err(Error::manifest(
                        format!("/streams/{i}/nominal_rate_hz"),
                        "rate must be positive",
                    ));
                }
            }
            if !dir.join(&s.path).exists() {
                return Err(Error::manifest(
                    format!("/streams/{i}/path"),
                    format!("stream file `{}` does not exist", s.path),
                ));
            }
        }
        let parameters = Parameters::default().with_overrides(&raw.parameters, "/parameters")?;
        Ok(SessionManifest {
            session_id: raw.session_id,
            participant: raw.participant,
            streams: raw.streams,
            parameters,
            overrides: raw.parameters,
            dir: dir.to_path_buf(),
        })
    }
}

/// Reads and validates `session.json` (or a session directory containing it).
pub fn parse_manifest(path: &Path) -> Result<SessionManifest> {
    let file = if path.is_dir() {
        path.join("session.json")
    } else {
        path.to_path_buf()
    };
    let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    let doc: Value = serde_json::from_str(&text).map_err(|e| Error::manifest("", e.to_string()))?;
    let dir = file.parent().map(Path::to_path_buf).unwrap_or_default();
    SessionManifest::from_json(&doc, &dir)
}

fn json_pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        match seg {
            Segment::Seq { index } => out.push_str(&format!("/{index}")),
            Segment::Map { key } => {
                out.push('/');
                out.push_str(&key.replace('~', "~0").replace('/', "~1"));
            }
            Segment::Enum { variant } => {
                out.push('/');
                out.push_str(variant);
            }
            Segment::Unknown => out.push_str("/?"),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn write_session(doc: &Value) -> (tempfile::TempDir, Result<SessionManifest>) {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("gps.csv"), "t_us,lat_deg,lon_deg,h_acc_m\n").unwrap();
        std::fs::write(dir.path().join("session.json"), doc.to_string()).unwrap();
        let m = parse_manifest(dir.path());
        (dir, m)
    }

    fn minimal() -> Value {
        json!({
            "session_id": "s1",
            "participant": {"id": "p1", "stature_m": 1.65, "cohort_tag": "knee_oa"},
            "streams": [{"kind": "gps", "path": "gps.csv", "clock_offset_us": 0}]
        })
    }

    #[test]
    fn minimal_manifest_fills_defaults() {
        let (_d, m) = write_session(&minimal());
        let m = m.unwrap();
        assert_eq!(m.parameters, Parameters::default());
        assert_eq!(m.stream(StreamKind::Gps).unwrap().path, "gps.csv");
    }

    #[test]
    fn stature_out_of_range() {
        let mut doc = minimal();
        doc["participant"]["stature_m"] = json!(0.5);
        let (_d, m) = write_session(&doc);
        assert!(matches!(m, Err(Error::Manifest { ref pointer, .. }) if pointer == "/participant/stature_m"));
    }

    #[test]
    fn duplicate_kind_rejected() {
        let mut doc = minimal();
        doc["streams"] = json!([
            {"kind": "gps", "path": "gps.csv"},
            {"kind": "gps", "path": "gps.csv"}
        ]);
        let (_d, m) = write_session(&doc);
        assert!(matches!(m, Err(Error::Manifest { ref pointer, .. }) if pointer == "/streams/1/kind"));
    }

    #[test]
    fn schema_violation_points_at_field() {
        let mut doc = minimal();
        doc["streams"][0]["kind"] = json!("sonar");
        let (_d, m) = write_session(&doc);
        assert!(matches!(m, Err(Error::Manifest { ref pointer, .. }) if pointer == "/streams/0/kind"));
    }

    #[test]
    fn missing_stream_file_and_unknown_parameter() {
        let mut doc = minimal();
        doc["streams"][0]["path"] = json!("missing.csv");
        let (_d, m) = write_session(&doc);
        assert!(matches!(m, Err(Error::Manifest { ref pointer, .. }) if pointer == "/streams/0/path"));

        let mut doc = minimal();
        doc["parameters"] = json!({"bogus": 1});
        let (_d, m) = write_session(&doc);
        assert!(matches!(m, Err(Error::Manifest { ref pointer, .. }) if pointer == "/parameters/bogus"));
    }

    #[test]
    fn missing_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            parse_manifest(&dir.path().join("session.json")),
            Err(Error::Io { .. })
        ));
    }
}
