//! Tunable parameters with their defaults.
//!
//! Every threshold used anywhere in the pipeline lives here so that a session
//! is reproducible from its manifest (plus any `key=value` overrides) alone.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Parameters {
    // geo
    pub max_h_acc_m: f64,
    pub max_speed_mps: f64,
    pub pair_tol_ms: i64,
    pub min_anchor_diag_m: f64,
    pub min_scale: f64,
    pub max_scale: f64,
    pub piecewise: bool,
    pub piecewise_window: usize,

    // gaze
    pub min_fix_duration_ms: i64,
    pub theta_base: f64,
    pub k_noise: f64,
    pub noise_window_ms: i64,
    pub min_confidence: f64,
    pub raster_tol_ms: i64,
    pub camera_fov_h_deg: Option<f64>,
    pub camera_fov_v_deg: Option<f64>,

    // physio
    pub eda_resample_hz: f64,
    pub w_tonic_s: f64,
    pub scr_min_amplitude_us: f64,
    pub scr_refractory_s: f64,
    pub hrv_window_s: f64,
    pub hrv_step_s: f64,
    pub hrv_min_beats: usize,
    pub ibi_min_ms: f64,
    pub ibi_max_ms: f64,

    // gait
    pub gait_axis: String,
    pub omega_min: f64,
    pub min_stride_gap_s: f64,
    pub max_stride_time_s: f64,
    pub min_imu_rate_hz: f64,
    pub gait_window_s: f64,
    pub gait_step_s: f64,

    // walkway
    pub stature_fraction: f64,
    pub head_joint: String,
    pub left_ankle_joint: String,
    pub right_ankle_joint: String,
    pub min_kp_conf: f64,
    pub min_skeleton_px: f64,
    pub max_scale_age_s: f64,
    pub material_smooth_window: usize,
    pub material_probe: String,

    // fusion
    pub segment_mode: String,
    pub segment_length: f64,
    pub min_fill: f64,
    pub min_coverage: f64,
    pub z_thresh: f64,
    pub hotspot_metrics: Vec<String>,
}

impl Default for Parameters {
    fn default() -> Self {
        Self {
            max_h_acc_m: 10.0,
            max_speed_mps: 3.0,
            pair_tol_ms: 200,
            min_anchor_diag_m: 20.0,
            min_scale: 0.2,
            max_scale: 5.0,
            piecewise: false,
            piecewise_window: 10,

            min_fix_duration_ms: 100,
            theta_base: 0.03,
            k_noise: 3.0,
            noise_window_ms: 1000,
            min_confidence: 0.6,
            raster_tol_ms: 500,
            camera_fov_h_deg: None,
            camera_fov_v_deg: None,

            eda_resample_hz: 4.0,
            w_tonic_s: 8.0,
            scr_min_amplitude_us: 0.05,
            scr_refractory_s: 1.0,
            hrv_window_s: 60.0,
            hrv_step_s: 5.0,
            hrv_min_beats: 20,
            ibi_min_ms: 300.0,
            ibi_max_ms: 2000.0,

            gait_axis: "gy".into(),
            omega_min: 1.0,
            min_stride_gap_s: 0.4,
            max_stride_time_s: 2.5,
            min_imu_rate_hz: 50.0,
            gait_window_s: 60.0,
            gait_step_s: 5.0,

            stature_fraction: 0.93,
            head_joint: "head".into(),
            left_ankle_joint: "left_ankle".into(),
            right_ankle_joint: "right_ankle".into(),
            min_kp_conf: 0.5,
            min_skeleton_px: 50.0,
            max_scale_age_s: 2.0,
            material_smooth_window: 5,
            material_probe: "material_probe.csv".into(),

            segment_mode: "distance".into(),
            segment_length: 10.0,
            min_fill: 0.5,
            min_coverage: 0.5,
            z_thresh: 2.0,
            hotspot_metrics: vec![
                "scr_rate_per_min".into(),
                "mean_disp_h".into(),
                "mean_disp_v".into(),
                "stv_s".into(),
                "rmssd_ms".into(),
            ],
        }
    }
}

impl Parameters {
    /// Names of every known parameter, sorted.
    pub fn keys() -> Vec<String> {
        match serde_json::to_value(Self::default()) {
            Ok(Value::Object(map)) => map.keys().cloned().collect(),
            _ => Vec::new(),
        }
    }

    pub fn to_map(&self) -> Map<String, Value> {
        match serde_json::to_value(self) {
            Ok(Value::Object(map)) => map,
            _ => Map::new(),
        }
    }

    /// Applies JSON-valued overrides; unknown keys and mistyped values are
    /// rejected with a pointer of the form `{prefix}/{key}`.
    pub fn with_overrides(&self, overrides: &Map<String, Value>, prefix: &str) -> Result<Self> {
        let mut map = self.to_map();
        for (key, value) in overrides {
            let pointer = format!("{prefix}/{key}");
            let Some(current) = map.get(key) else {
                return Err(Error::manifest(pointer, "unknown parameter key"));
            };
            if !same_kind(current, value, key) {
                return Err(Error::manifest(
                    pointer,
                    format!("expected {}, got {}", kind_name(current), kind_name(value)),
                ));
            }
            map.insert(key.clone(), value.clone());
        }
        let params: Parameters = serde_json::from_value(Value::Object(map))
            .map_err(|e| Error::manifest(prefix.to_string(), e.to_string()))?;
        params.validate(prefix)?;
        Ok(params)
    }

    /// Applies a `key=value` override from the command line. The value is
    /// read as JSON when it parses, otherwise as a bare string.
    pub fn with_assignment(&self, assignment: &str) -> Result<Self> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::manifest("/parameters", format!("`{assignment}` is not key=value")))?;
        let value = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut m = Map::new();
        m.insert(key.trim().to_string(), value);
        self.with_overrides(&m, "/parameters")
    }

    fn validate(&self, prefix: &str) -> Result<()> {
        let positive = [
            ("max_h_acc_m", self.max_h_acc_m),
            ("max_speed_mps", self.max_speed_mps),
            ("min_scale", self.min_scale),
            ("eda_resample_hz", self.eda_resample_hz),
            ("w_tonic_s", self.w_tonic_s),
            ("hrv_window_s", self.hrv_window_s),
            ("hrv_step_s", self.hrv_step_s),
            ("min_imu_rate_hz", self.min_imu_rate_hz),
            ("gait_window_s", self.gait_window_s),
            ("gait_step_s", self.gait_step_s),
            ("stature_fraction", self.stature_fraction),
            ("segment_length", self.segment_length),
        ];
        for (key, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::manifest(format!("{prefix}/{key}"), "must be positive"));
            }
        }
        if self.max_scale <= self.min_scale {
            return Err(Error::manifest(format!("{prefix}/max_scale"), "must exceed min_scale"));
        }
        if self.hrv_step_s > self.hrv_window_s {
            return Err(Error::manifest(format!("{prefix}/hrv_step_s"), "must not exceed hrv_window_s"));
        }
        if self.gait_step_s > self.gait_window_s {
            return Err(Error::manifest(format!("{prefix}/gait_step_s"), "must not exceed gait_window_s"));
        }
        if self.material_smooth_window.is_multiple_of(2) {
            return Err(Error::manifest(
                format!("{prefix}/material_smooth_window"),
                "must be odd and at least 1",
            ));
        }
        if self.piecewise_window < 3 {
            return Err(Error::manifest(format!("{prefix}/piecewise_window"), "must be at least 3"));
        }
        if !matches!(self.segment_mode.as_str(), "distance" | "time") {
            return Err(Error::manifest(
                format!("{prefix}/segment_mode"),
                "must be `distance` or `time`",
            ));
        }
        if !matches!(self.gait_axis.as_str(), "gx" | "gy" | "gz") {
            return Err(Error::manifest(format!("{prefix}/gait_axis"), "must be gx, gy or gz"));
        }
        for (i, m) in self.hotspot_metrics.iter().enumerate() {
            if !crate::fusion::METRIC_NAMES.contains(&m.as_str()) {
                return Err(Error::manifest(format!("{prefix}/hotspot_metrics/{i}"), format!("unknown metric `{m}`")));
            }
        }
        if !(0.0..=1.0).contains(&self.min_fill) || !(0.0..=1.0).contains(&self.min_coverage) {
            return Err(Error::manifest(format!("{prefix}/min_fill"), "fractions must lie in [0, 1]"));
        }
        Ok(())
    }
}

fn kind_name(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(n) if n.is_f64() => "number",
        Value::Number(_) => "integer",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

fn same_kind(current: &Value, new: &Value, key: &str) -> bool {
    match (current, new) {
        // optional reals (camera field of view) default to null
        (Value::Null, Value::Null | Value::Number(_)) => key.starts_with("camera_fov"),
        (Value::Number(a), Value::Number(b)) => a.is_f64() || !b.is_f64(),
        (Value::Bool(_), Value::Bool(_)) | (Value::String(_), Value::String(_)) => true,
        (Value::Array(_), Value::Array(items)) => items.iter().all(Value::is_string),
        _ => false,
    }
}
