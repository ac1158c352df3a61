//! Walkway width from skeleton-scaled pixel geometry, and surface material
//! from a linear probe over frame embeddings.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{SkeletonFrame, WalkwayEdges};
use crate::model::{Duration, SampleSeries, Timestamp};
use crate::params::Parameters;

pub const PROBE_CLASSES: usize = 14;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelScale {
    pub meters_per_pixel: f64,
    pub t: Timestamp,
    pub source_skeleton_px: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WidthEstimate {
    pub t: Timestamp,
    pub width_m: f64,
    pub width_px: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterialLabel {
    pub class_name: String,
    /// Raw (pre-softmax) score of the winning class.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleParams {
    pub stature_fraction: f64,
    pub head_joint: String,
    pub left_ankle_joint: String,
    pub right_ankle_joint: String,
    pub min_kp_conf: f64,
    pub min_px: f64,
}

impl ScaleParams {
    pub fn from_params(p: &Parameters) -> Self {
        ScaleParams {
            stature_fraction: p.stature_fraction,
            head_joint: p.head_joint.clone(),
            left_ankle_joint: p.left_ankle_joint.clone(),
            right_ankle_joint: p.right_ankle_joint.clone(),
            min_kp_conf: p.min_kp_conf,
            min_px: p.min_skeleton_px,
        }
    }
}

impl Default for ScaleParams {
    fn default() -> Self {
        ScaleParams::from_params(&Parameters::default())
    }
}

/// Meters per pixel from the participant's height in the frame: vertical
/// distance from the head joint to the ankle midpoint.
pub fn pixel_scale(t: Timestamp, frame: &SkeletonFrame, stature_m: f64, p: &ScaleParams) -> Result<PixelScale> {
    let get = |name: &str| {
        frame
            .joint(name)
            .filter(|k| k.confidence >= p.min_kp_conf)
            .ok_or_else(|| Error::SkeletonIncomplete(format!("joint `{name}` missing or below confidence")))
    };
    let head = get(&p.head_joint)?;
    let la = get(&p.left_ankle_joint)?;
    let ra = get(&p.right_ankle_joint)?;
    let px = (0.5 * (la.py + ra.py) - head.py).abs();
    if px < p.min_px {
        return Err(Error::TooSmall { px, min_px: p.min_px });
    }
    Ok(PixelScale { meters_per_pixel: stature_m * p.stature_fraction / px, t, source_skeleton_px: px })
}

pub fn estimate_width(t: Timestamp, edges: &WalkwayEdges, scale: &PixelScale, max_age: Duration) -> Result<WidthEstimate> {
    if edges.right_px <= edges.left_px {
        return Err(Error::EdgeOrder { left: edges.left_px, right: edges.right_px });
    }
    let age = (t - scale.t).0.abs();
    if age > max_age.0 {
        return Err(Error::StaleScale { age_us: age });
    }
    let width_px = edges.right_px - edges.left_px;
    Ok(WidthEstimate { t, width_m: width_px * scale.meters_per_pixel, width_px })
}

/// Nearest usable scale within `max_age` of each edge frame; frames with no
/// such scale are skipped and counted.
pub fn width_series(
    edges: &SampleSeries<WalkwayEdges>,
    scales: &[PixelScale],
    max_age: Duration,
) -> (Vec<WidthEstimate>, usize) {
    let mut out = Vec::new();
    let mut skipped = 0;
    for (t, e) in edges.iter() {
        let k = scales.partition_point(|s| s.t < t);
        let best = [k.checked_sub(1), Some(k)]
            .into_iter()
            .flatten()
            .filter_map(|i| scales.get(i))
            .min_by_key(|s| (s.t - t).0.abs());
        match best.map(|s| estimate_width(t, e, s, max_age)) {
            Some(Ok(w)) => out.push(w),
            _ => skipped += 1,
        }
    }
    (out, skipped)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProbeModel {
    /// Row-major `14 x d`.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub class_names: Vec<String>,
    pub embedding_dim: usize,
}

impl LinearProbeModel {
    pub fn new(class_names: Vec<String>, bias: Vec<f64>, weights: Vec<Vec<f64>>) -> Result<Self> {
        if class_names.len() != PROBE_CLASSES {
            return Err(Error::ProbeModel(format!(
                "expected {PROBE_CLASSES} classes, got {}",
                class_names.len()
            )));
        }
        if bias.len() != class_names.len() || weights.len() != class_names.len() {
            return Err(Error::ProbeModel("row count does not match class names".into()));
        }
        let d = weights[0].len();
        if d == 0 || weights.iter().any(|r| r.len() != d) {
            return Err(Error::ProbeModel("ragged or empty weight rows".into()));
        }
        Ok(LinearProbeModel { weights, bias, class_names, embedding_dim: d })
    }

    /// Reads a probe CSV: header `class_name,bias,w0..w{d-1}` then one row
    /// per class.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let file = path.display().to_string();
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .flexible(true)
            .from_path(path)
            .map_err(|e| Error::parse(&file, 0, e.to_string()))?;
        let mut names = Vec::new();
        let mut bias = Vec::new();
        let mut weights = Vec::new();
        let mut d = None;
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::parse(&file, 0, e.to_string()))?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            match d {
                None => {
                    let ok = rec.len() >= 3
                        && &rec[0] == "class_name"
                        && &rec[1] == "bias"
                        && (2..rec.len()).all(|i| rec[i] == format!("w{}", i - 2));
                    if !ok {
                        return Err(Error::parse(&file, line, "expected header class_name,bias,w0..w{d-1}"));
                    }
                    d = Some(rec.len() - 2);
                }
                Some(dim) => {
                    if rec.len() != dim + 2 {
                        return Err(Error::parse(&file, line, format!("expected {} fields, got {}", dim + 2, rec.len())));
                    }
                    let num = |i: usize| -> Result<f64> {
                        rec[i]
                            .parse::<f64>()
                            .ok()
                            .filter(|v| v.is_finite())
                            .ok_or_else(|| Error::parse(&file, line, format!("bad number `{}`", &rec[i])))
                    };
                    names.push(rec[0].to_string());
                    bias.push(num(1)?);
                    weights.push((2..dim + 2).map(num).collect::<Result<Vec<f64>>>()?);
                }
            }
        }
        if d.is_none() {
            return Err(Error::ProbeModel("empty probe file".into()));
        }
        LinearProbeModel::new(names, bias, weights)
    }

    pub fn write_csv(&self, out: &mut impl std::io::Write) -> std::io::Result<()> {
        let mut header = vec!["class_name".to_string(), "bias".to_string()];
        header.extend((0..self.embedding_dim).map(|i| format!("w{i}")));
        writeln!(out, "{}", header.join(","))?;
        for ((name, b), row) in self.class_names.iter().zip(&self.bias).zip(&self.weights) {
            let cells: Vec<String> = row.iter().map(|w| w.to_string()).collect();
            writeln!(out, "{name},{b},{}", cells.join(","))?;
        }
        Ok(())
    }

    pub fn scores(&self, embedding: &[f64]) -> Result<Vec<f64>> {
        if embedding.len() != self.embedding_dim {
            return Err(Error::Dim { expected: self.embedding_dim, got: embedding.len() });
        }
        Ok(self
            .weights
            .iter()
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(embedding).map(|(w, x)| w * x).sum::<f64>() + b)
            .collect())
    }
}

/// Argmax of the probe scores; exact ties go to the lowest class index.
pub fn classify_material(embedding: &[f64], model: &LinearProbeModel) -> Result<MaterialLabel> {
    let scores = model.scores(embedding)?;
    let mut best = 0;
    for (i, s) in scores.iter().enumerate().skip(1) {
        if *s > scores[best] {
            best = i;
        }
    }
    Ok(MaterialLabel { class_name: model.class_names[best].clone(), score: scores[best] })
}

pub fn classify_series(
    embeddings: &SampleSeries<Vec<f64>>,
    model: &LinearProbeModel,
) -> Result<SampleSeries<MaterialLabel>> {
    let labels = crate::par::map(embeddings.values(), |e| classify_material(e, model))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    SampleSeries::new(embeddings.timestamps().to_vec(), labels)
}

/// Temporal mode filter over `window` frames (clipped at the ends). When
/// several labels tie for the mode the center frame's label wins if it is
/// among them, otherwise the earliest tied label in the window.
pub fn smooth_materials(labels: &SampleSeries<MaterialLabel>, window: usize) -> SampleSeries<MaterialLabel> {
    let v = labels.values();
    let n = v.len();
    let half = window.max(1) / 2;
    let out = (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(n - 1);
            let win = &v[lo..=hi];
            let count = |name: &str| win.iter().filter(|l| l.class_name == name).count();
            let center = count(&v[i].class_name);
            let mut best: Option<(&MaterialLabel, usize)> = None;
            for l in win {
                let c = count(&l.class_name);
                if best.is_none_or(|(_, bc)| c > bc) {
                    best = Some((l, c));
                }
            }
            match best {
                Some((l, c)) if c > center => l.clone(),
                _ => v[i].clone(),
            }
        })
        .collect();
    SampleSeries::new(labels.timestamps().to_vec(), out).expect("same timeline")
}

/// The seeded class vocabulary.
pub fn default_class_names() -> Vec<String> {
    let mut names: Vec<String> = [
        "concrete",
        "asphalt",
        "tiles",
        "bricks",
        "brushed_concrete",
        "granite",
        "exposed_aggregate_concrete",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    names.extend((1..=PROBE_CLASSES - names.len()).map(|i| format!("other_{i}")));
    names
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Keypoint;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn frame(head_y: f64, ankle_y: f64, with_ankles: bool) -> SkeletonFrame {
        let kp = |name: &str, py: f64| Keypoint { name: name.into(), px: 100.0, py, confidence: 0.9 };
        let mut joints = vec![kp("head", head_y)];
        if with_ankles {
            joints.push(kp("left_ankle", ankle_y));
            joints.push(kp("right_ankle", ankle_y));
        }
        SkeletonFrame { joints }
    }

    fn identity_probe() -> LinearProbeModel {
        let w = (0..14).map(|i| (0..14).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        LinearProbeModel::new(default_class_names(), vec![0.0; 14], w).unwrap()
    }

    fn label(name: &str) -> MaterialLabel {
        MaterialLabel { class_name: name.into(), score: 1.0 }
    }

    fn labels(names: &[&str]) -> SampleSeries<MaterialLabel> {
        SampleSeries::from_pairs(names.iter().enumerate().map(|(i, n)| (Timestamp(i as i64), label(n)))).unwrap()
    }

    #[test]
    fn scale_examples() {
        let f = frame(100.0, 440.0, true);
        let p = ScaleParams { stature_fraction: 1.0, ..Default::default() };
        let s = pixel_scale(Timestamp(0), &f, 1.70, &p).unwrap();
        assert!((s.meters_per_pixel - 0.005).abs() < 1e-15);
        let s = pixel_scale(Timestamp(0), &f, 1.70, &ScaleParams::default()).unwrap();
        assert!((s.meters_per_pixel - 0.00465).abs() < 1e-12);
        assert!(matches!(
            pixel_scale(Timestamp(0), &frame(100.0, 440.0, false), 1.7, &p),
            Err(Error::SkeletonIncomplete(_))
        ));
        assert!(matches!(
            pixel_scale(Timestamp(0), &frame(100.0, 130.0, true), 1.7, &p),
            Err(Error::TooSmall { .. })
        ));
    }

    #[test]
    fn width_examples() {
        let s = PixelScale { meters_per_pixel: 0.005, t: Timestamp(0), source_skeleton_px: 340.0 };
        let age = Duration::from_secs_f64(2.0);
        let e = |l: f64, r: f64| WalkwayEdges { left_px: l, right_px: r, foot_row_px: 500.0 };
        assert!((estimate_width(Timestamp(0), &e(100.0, 400.0), &s, age).unwrap().width_m - 1.5).abs() < 1e-12);
        assert!((estimate_width(Timestamp(0), &e(100.0, 360.0), &s, age).unwrap().width_m - 1.3).abs() < 1e-12);
        assert!(matches!(estimate_width(Timestamp(0), &e(200.0, 200.0), &s, age), Err(Error::EdgeOrder { .. })));
        assert!(matches!(
            estimate_width(Timestamp(3_000_000), &e(100.0, 400.0), &s, age),
            Err(Error::StaleScale { .. })
        ));
    }

    #[test]
    fn identity_probe_picks_hot_index() {
        let mut e = vec![0.0; 14];
        e[3] = 1.0;
        assert_eq!(classify_material(&e, &identity_probe()).unwrap().class_name, "bricks");
        assert!(matches!(classify_material(&[1.0; 3], &identity_probe()), Err(Error::Dim { expected: 14, got: 3 })));
        // all-zero scores tie everywhere
        assert_eq!(classify_material(&[0.0; 14], &identity_probe()).unwrap().class_name, "concrete");
    }

    #[test]
    fn brute_force_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let d = 16;
        let w: Vec<Vec<f64>> = (0..14).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let b: Vec<f64> = (0..14).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = LinearProbeModel::new(default_class_names(), b.clone(), w.clone()).unwrap();
        for _ in 0..1000 {
            let e: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mut best = (f64::NEG_INFINITY, 0);
            for c in 0..14 {
                let mut s = b[c];
                for k in 0..d {
                    s += w[c][k] * e[k];
                }
                if s > best.0 {
                    best = (s, c);
                }
            }
            assert_eq!(classify_material(&e, &m).unwrap().class_name, m.class_names[best.1]);
        }
    }

    #[test]
    fn probe_csv_round_trip_and_row_count() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("probe.csv");
        let m = identity_probe();
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        std::fs::write(&path, &buf).unwrap();
        assert_eq!(LinearProbeModel::from_csv(&path).unwrap(), m);

        let text = String::from_utf8(buf).unwrap();
        let short: Vec<&str> = text.lines().take(14).collect();
        std::fs::write(&path, short.join("\n")).unwrap();
        assert!(matches!(LinearProbeModel::from_csv(&path), Err(Error::ProbeModel(_))));
        let mut long = text.clone();
        long.push_str("extra,0");
        long.push_str(&",0".repeat(14));
        long.push('\n');
        std::fs::write(&path, long).unwrap();
        assert!(matches!(LinearProbeModel::from_csv(&path), Err(Error::ProbeModel(_))));
    }

    #[test]
    fn smoothing_examples() {
        let s = labels(&["a", "b", "a", "c"]);
        assert_eq!(smooth_materials(&s, 1), s);
        let s = smooth_materials(&labels(&["a", "a", "b", "a", "a"]), 5);
        assert_eq!(s.values()[2].class_name, "a");
        let c = labels(&["a"; 9]);
        assert_eq!(smooth_materials(&c, 5), c);
        // two-way tie including the center keeps the center
        let s = smooth_materials(&labels(&["a", "b", "b", "a", "c"]), 5);
        assert_eq!(s.values()[2].class_name, "b");
    }

    proptest! {
        #[test]
        fn width_is_homogeneous(gap in 1.0f64..1000.0, mpp in 1e-4f64..0.1, k in 0.1f64..10.0) {
            let age = Duration::from_secs_f64(2.0);
            let s = PixelScale { meters_per_pixel: mpp, t: Timestamp(0), source_skeleton_px: 100.0 };
            let e = WalkwayEdges { left_px: 10.0, right_px: 10.0 + gap, foot_row_px: 0.0 };
            let base = estimate_width(Timestamp(0), &e, &s, age).unwrap().width_m;
            let s2 = PixelScale { meters_per_pixel: mpp * k, ..s };
            let scaled = estimate_width(Timestamp(0), &e, &s2, age).unwrap().width_m;
            prop_assert!((scaled - k * base).abs() <= 1e-9 * scaled.abs().max(1.0));
        }

        #[test]
        fn argmax_shift_and_scale_invariant(
            e in proptest::collection::vec(-5.0f64..5.0, 14),
            c in -10.0f64..10.0,
            k in 0.1f64..10.0,
        ) {
            let m = identity_probe();
            let base = classify_material(&e, &m).unwrap().class_name;
            let shifted = LinearProbeModel { bias: vec![c; 14], ..m.clone() };
            prop_assert_eq!(&classify_material(&e, &shifted).unwrap().class_name, &base);
            let scaled: Vec<f64> = e.iter().map(|x| x * k).collect();
            prop_assert_eq!(&classify_material(&scaled, &m).unwrap().class_name, &base);
        }

        #[test]
        fn smoothing_alphabet_closed(idx in proptest::collection::vec(0usize..4, 1..60), w in 0usize..4) {
            let names = ["a", "b", "c", "d"];
            let s = labels(&idx.iter().map(|&i| names[i]).collect::<Vec<_>>());
            let out = smooth_materials(&s, 2 * w + 1);
            for l in out.values() {
                prop_assert!(s.values().iter().any(|x| x.class_name == l.class_name));
            }
        }
    }
}
