use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the engine can report.
///
/// Variants map one-to-one onto the error names used in reports; [`Error::code`]
/// gives the module-qualified code the CLI prints.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty stream")]
    EmptyStream,
    #[error("invalid range: start {t0} µs is after end {t1} µs")]
    InvalidRange { t0: i64, t1: i64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest error at {pointer}: {message}")]
    Manifest { pointer: String, message: String },
    #[error("{file}:{line}: {message}")]
    Parse {
        file: String,
        line: u64,
        message: String,
    },
    #[error("{file}:{line}: timestamp not strictly increasing")]
    StreamOrder { file: String, line: u64 },
    #[error("invalid geodetic coordinate: {0}")]
    Geodesy(String),
    #[error("insufficient GPS anchors: {found} usable, {required} required")]
    InsufficientAnchors { found: usize, required: usize },
    #[error("degenerate anchor geometry: {0}")]
    DegenerateGeometry(String),
    #[error("implausible SLAM-to-ENU scale {0}")]
    ImplausibleScale(f64),
    #[error("timestamp {t} µs outside trajectory range [{first}, {last}]")]
    OutOfRange { t: i64, first: i64, last: i64 },
    #[error("empty window")]
    EmptyWindow,
    #[error("series spans {span_us} µs, shorter than the {window_us} µs window")]
    WindowTooLong { span_us: i64, window_us: i64 },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("sampling rate {rate_hz:.2} Hz below required {min_hz:.2} Hz")]
    Rate { rate_hz: f64, min_hz: f64 },
    #[error("skeleton frame lacks joint `{0}` at sufficient confidence")]
    SkeletonIncomplete(String),
    #[error("skeleton spans {px:.1} px, below the {min_px:.1} px minimum")]
    TooSmall { px: f64, min_px: f64 },
    #[error("walkway edges out of order: left {left} px, right {right} px")]
    EdgeOrder { left: f64, right: f64 },
    #[error("pixel scale is {age_us} µs away from the edge sample")]
    StaleScale { age_us: i64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dim { expected: usize, got: usize },
    #[error("probe model: {0}")]
    ProbeModel(String),
    #[error("metric `{metric}`: {usable} usable segments, at least 2 required")]
    InsufficientSegments { metric: String, usable: usize },
    #[error("unsupported format version `{found}`, expected `{expected}`")]
    Version { found: String, expected: String },
    #[error("bundle session `{bundle}` does not match truth session `{truth}`")]
    ScenarioMismatch { bundle: String, truth: String },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn manifest(pointer: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Manifest {
            pointer: pointer.into(),
            message: message.into(),
        }
    }

    pub(crate) fn parse(file: &str, line: u64, message: impl Into<String>) -> Self {
        Error::Parse {
            file: file.to_string(),
            line,
            message: message.into(),
        }
    }

    /// Module-qualified error code, e.g. `ingest.StreamOrderError`.
    pub fn code(&self) -> &'static str {
        match self {
            Error::EmptyStream => "core.EmptyStream",
            Error::InvalidRange { .. } => "core.InvalidRange",
            Error::Io { .. } => "io.IoError",
            Error::Manifest { .. } => "ingest.ManifestError",
            Error::Parse { .. } => "ingest.ParseError",
            Error::StreamOrder { .. } => "ingest.StreamOrderError",
            Error::Geodesy(_) => "geo.GeodesyError",
            Error::InsufficientAnchors { .. } => "geo.InsufficientAnchors",
            Error::DegenerateGeometry(_) => "geo.DegenerateGeometry",
            Error::ImplausibleScale(_) => "geo.ImplausibleScale",
            Error::OutOfRange { .. } => "geo.OutOfRange",
            Error::EmptyWindow => "gaze.EmptyWindow",
            Error::WindowTooLong { .. } => "physio.WindowTooLong",
            Error::InsufficientData(_) => "analysis.InsufficientData",
            Error::Rate { .. } => "gait.RateError",
            Error::SkeletonIncomplete(_) => "walkway.SkeletonIncomplete",
            Error::TooSmall { .. } => "walkway.TooSmall",
            Error::EdgeOrder { .. } => "walkway.EdgeOrderError",
            Error::StaleScale { .. } => "walkway.StaleScale",
            Error::Dim { .. } => "walkway.DimError",
            Error::ProbeModel(_) => "walkway.ProbeModelError",
            Error::InsufficientSegments { .. } => "fusion.InsufficientSegments",
            Error::Version { .. } => "fusion.VersionError",
            Error::ScenarioMismatch { .. } => "synth.ScenarioMismatch",
            Error::Json { .. } => "io.JsonError",
        }
    }
}
