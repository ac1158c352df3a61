//! Global registration of the SLAM trajectory.
//!
//! Reliable GPS fixes are gated into anchors, paired in time with SLAM poses,
//! and a closed-form least-squares similarity transform (Umeyama) maps the
//! local SLAM frame onto a local East-North-Up plane. Every SLAM pose is then
//! pushed through the transform, so the fused trajectory has SLAM's density
//! and continuity even where GPS drops out.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{GpsFix, SlamPose};
use crate::model::{Duration, SampleSeries, Timestamp};
use crate::params::Parameters;

const WGS84_A: f64 = 6_378_137.0;
const WGS84_F: f64 = 1.0 / 298.257_223_563;
const WGS84_E2: f64 = WGS84_F * (2.0 - WGS84_F);

/// Geodetic origin of a local tangent plane (ellipsoid height 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoOrigin {
    pub lat: f64,
    pub lon: f64,
}

impl From<GpsFix> for GeoOrigin {
    fn from(f: GpsFix) -> Self {
        GeoOrigin { lat: f.lat, lon: f.lon }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EnuPoint {
    pub e: f64,
    pub n: f64,
    pub u: f64,
}

impl EnuPoint {
    pub fn new(e: f64, n: f64, u: f64) -> Self {
        EnuPoint { e, n, u }
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.e, self.n, self.u)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        EnuPoint::new(v.x, v.y, v.z)
    }

    pub fn distance(&self, other: &EnuPoint) -> f64 {
        (self.to_vector() - other.to_vector()).norm()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

fn check_geodetic(lat: f64, lon: f64) -> Result<()> {
    if !lat.is_finite() || !lon.is_finite() || !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
        return Err(Error::Geodesy(format!("({lat}, {lon})")));
    }
    Ok(())
}

fn geodetic_to_ecef(lat: f64, lon: f64, h: f64) -> Vector3<f64> {
    let (sp, cp) = lat.to_radians().sin_cos();
    let (sl, cl) = lon.to_radians().sin_cos();
    let n = WGS84_A / (1.0 - WGS84_E2 * sp * sp).sqrt();
    Vector3::new((n + h) * cp * cl, (n + h) * cp * sl, (n * (1.0 - WGS84_E2) + h) * sp)
}

fn ecef_to_geodetic(x: &Vector3<f64>) -> (f64, f64, f64) {
    let p = x.x.hypot(x.y);
    let lon = x.y.atan2(x.x);
    let mut lat = x.z.atan2(p * (1.0 - WGS84_E2));
    for _ in 0..8 {
        let s = lat.sin();
        let n = WGS84_A / (1.0 - WGS84_E2 * s * s).sqrt();
        lat = (x.z + WGS84_E2 * n * s).atan2(p);
    }
    let (s, c) = lat.sin_cos();
    let h = p * c + x.z * s - WGS84_A * (1.0 - WGS84_E2 * s * s).sqrt();
    (lat.to_degrees(), lon.to_degrees(), h)
}

fn enu_basis(origin: GeoOrigin) -> Matrix3<f64> {
    let (sp, cp) = origin.lat.to_radians().sin_cos();
    let (sl, cl) = origin.lon.to_radians().sin_cos();
    Matrix3::new(-sl, cl, 0.0, -sp * cl, -sp * sl, cp, cp * cl, cp * sl, sp)
}

/// Geodetic (degrees, ellipsoid height in meters) to local ENU.
pub fn geodetic_to_enu(lat: f64, lon: f64, h: f64, origin: GeoOrigin) -> Result<EnuPoint> {
    check_geodetic(lat, lon)?;
    check_geodetic(origin.lat, origin.lon)?;
    let d = geodetic_to_ecef(lat, lon, h) - geodetic_to_ecef(origin.lat, origin.lon, 0.0);
    Ok(EnuPoint::from_vector(&(enu_basis(origin) * d)))
}

/// Inverse of [`geodetic_to_enu`]: returns `(lat, lon, h)`.
pub fn enu_to_geodetic(p: EnuPoint, origin: GeoOrigin) -> (f64, f64, f64) {
    let ecef = geodetic_to_ecef(origin.lat, origin.lon, 0.0) + enu_basis(origin).transpose() * p.to_vector();
    ecef_to_geodetic(&ecef)
}

/// A GPS fix (on the ellipsoid surface) in the ENU frame of `origin`.
pub fn wgs84_to_enu(fix: &GpsFix, origin: GeoOrigin) -> Result<EnuPoint> {
    geodetic_to_enu(fix.lat, fix.lon, 0.0, origin)
}

/// Back-projects an ENU point to latitude/longitude, discarding height.
pub fn enu_to_wgs84(p: EnuPoint, origin: GeoOrigin) -> GeoPoint {
    let (lat, lon, _) = enu_to_geodetic(p, origin);
    GeoPoint { lat, lon }
}

/// The surface point whose ENU coordinates have horizontal part `(e, n)`.
/// Used to synthesize GPS fixes that land exactly on a planar route.
pub fn surface_point(e: f64, n: f64, origin: GeoOrigin) -> Result<GeoPoint> {
    let mut u = 0.0;
    let mut g = enu_to_wgs84(EnuPoint::new(e, n, u), origin);
    for _ in 0..4 {
        u = geodetic_to_enu(g.lat, g.lon, 0.0, origin)?.u;
        g = enu_to_wgs84(EnuPoint::new(e, n, u), origin);
    }
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Accuracy,
    Speed,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AnchorSelection {
    pub kept: SampleSeries<GpsFix>,
    pub rejected: Vec<(Timestamp, RejectReason)>,
}

/// Keeps fixes that are accurate enough and imply a walking-plausible speed
/// from the previously kept fix.
pub fn select_gps_anchors(gps: &SampleSeries<GpsFix>, max_h_acc_m: f64, max_speed_mps: f64) -> AnchorSelection {
    let mut kept_t: Vec<Timestamp> = Vec::new();
    let mut kept_v: Vec<GpsFix> = Vec::new();
    let mut rejected = Vec::new();
    for (t, fix) in gps.iter() {
        if fix.h_acc_m > max_h_acc_m {
            rejected.push((t, RejectReason::Accuracy));
            continue;
        }
        if let (Some(&pt), Some(pf)) = (kept_t.last(), kept_v.last()) {
            let dt = (t - pt).as_secs_f64();
            let d = wgs84_to_enu(fix, GeoOrigin::from(*pf)).map(|p| p.e.hypot(p.n)).unwrap_or(f64::INFINITY);
            if d / dt > max_speed_mps {
                rejected.push((t, RejectReason::Speed));
                continue;
            }
        }
        kept_t.push(t);
        kept_v.push(*fix);
    }
    AnchorSelection {
        kept: SampleSeries::new(kept_t, kept_v).expect("subset of a valid series"),
        rejected,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorPair {
    pub t: Timestamp,
    pub slam: [f64; 3],
    pub enu: EnuPoint,
}

/// Pairs each anchor with the nearest-in-time SLAM pose within `tol`.
/// Anchors are placed on the tangent plane (`u = 0`).
pub fn pair_anchors(
    slam: &SampleSeries<SlamPose>,
    anchors: &SampleSeries<GpsFix>,
    origin: GeoOrigin,
    tol: Duration,
) -> Result<Vec<AnchorPair>> {
    let ts = slam.timestamps();
    let mut pairs = Vec::new();
    for (t, fix) in anchors.iter() {
        let i = ts.partition_point(|&s| s < t);
        let best = [i.checked_sub(1), (i < ts.len()).then_some(i)]
            .into_iter()
            .flatten()
            .min_by_key(|&j| ((ts[j] - t).0.abs(), j));
        let Some(j) = best else { continue };
        if (ts[j] - t).0.abs() > tol.0 {
            continue;
        }
        let mut enu = wgs84_to_enu(fix, origin)?;
        enu.u = 0.0;
        pairs.push(AnchorPair {
            t,
            slam: slam.values()[j].position(),
            enu,
        });
    }
    Ok(pairs)
}

/// `y = scale * R * x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTransform {
    pub scale: f64,
    /// Row-major rotation matrix.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        Self::from_parts(1.0, &Matrix3::identity(), &Vector3::zeros())
    }

    pub fn from_parts(scale: f64, rotation: &Matrix3<f64>, translation: &Vector3<f64>) -> Self {
        let mut r = [[0.0; 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = rotation[(i, j)];
            }
        }
        SimilarityTransform {
            scale,
            rotation: r,
            translation: [translation.x, translation.y, translation.z],
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|i, j| self.rotation[i][j])
    }

    pub fn translation_vector(&self) -> Vector3<f64> {
        Vector3::from(self.translation)
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation_matrix() * x) + self.translation_vector()
    }

    /// Largest deviation of `RᵀR` from identity and of `det R` from one.
    pub fn orthonormality_error(&self) -> f64 {
        let r = self.rotation_matrix();
        let e = (r.transpose() * r - Matrix3::identity()).abs().max();
        e.max((r.determinant() - 1.0).abs())
    }

    pub fn inverse(&self) -> SimilarityTransform {
        let rt = self.rotation_matrix().transpose();
        let t = -(rt * self.translation_vector()) / self.scale;
        SimilarityTransform::from_parts(1.0 / self.scale, &rt, &t)
    }
}

/// Closed-form similarity between paired point sets (Umeyama 1991) with no
/// plausibility checks on the result.
///
/// Minimizes `Σ‖dst_i − (s·R·src_i + t)‖²`: centroids, cross-covariance,
/// SVD, and the sign correction that forces `det R = +1`.
pub fn umeyama(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<SimilarityTransform> {
    let n = src.len();
    if n < 3 || dst.len() != n {
        return Err(Error::InsufficientAnchors { found: n.min(dst.len()), required: 3 });
    }
    let inv_n = 1.0 / n as f64;
    let mu_x = src.iter().sum::<Vector3<f64>>() * inv_n;
    let mu_y = dst.iter().sum::<Vector3<f64>>() * inv_n;
    let mut cov_x = Matrix3::zeros();
    let mut cov_xy = Matrix3::zeros();
    let mut var_x = 0.0;
    for (x, y) in src.iter().zip(dst) {
        let dx = x - mu_x;
        let dy = y - mu_y;
        cov_x += dx * dx.transpose();
        cov_xy += dy * dx.transpose();
        var_x += dx.norm_squared();
    }
    cov_x *= inv_n;
    cov_xy *= inv_n;
    var_x *= inv_n;

    let sx = cov_x.singular_values();
    let mut sxv: Vec<f64> = sx.iter().copied().collect();
    sxv.sort_by(|a, b| b.total_cmp(a));
    if !(sxv[0] > 0.0) || sxv[1] <= 1e-12 * sxv[0] {
        return Err(Error::DegenerateGeometry("SLAM anchor points are collinear".into()));
    }

    let svd = cov_xy.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::DegenerateGeometry("SVD did not converge".into())),
    };
    let d = svd.singular_values;
    // the sign flip goes on the direction with the smallest singular value
    let k_min = (0..3).min_by(|&a, &b| d[a].total_cmp(&d[b])).unwrap_or(2);
    let mut s = Vector3::new(1.0, 1.0, 1.0);
    if u.determinant() * v_t.determinant() < 0.0 {
        s[k_min] = -1.0;
    }
    let r = u * Matrix3::from_diagonal(&s) * v_t;
    let scale = d.component_mul(&s).sum() / var_x;
    let t = mu_y - scale * (r * mu_x);
    Ok(SimilarityTransform::from_parts(scale, &r, &t))
}

/// Umeyama alignment of anchor pairs with the default scale bounds [0.2, 5].
pub fn umeyama_align(pairs: &[AnchorPair]) -> Result<SimilarityTransform> {
    umeyama_align_bounded(pairs, 0.2, 5.0)
}

pub fn umeyama_align_bounded(pairs: &[AnchorPair], min_scale: f64, max_scale: f64) -> Result<SimilarityTransform> {
    if pairs.len() < 3 {
        return Err(Error::InsufficientAnchors { found: pairs.len(), required: 3 });
    }
    let src: Vec<_> = pairs.iter().map(|p| Vector3::from(p.slam)).collect();
    let dst: Vec<_> = pairs.iter().map(|p| p.enu.to_vector()).collect();
    let tf = umeyama(&src, &dst)?;
    if !(tf.scale >= min_scale && tf.scale <= max_scale) {
        return Err(Error::ImplausibleScale(tf.scale));
    }
    Ok(tf)
}

/// Root-mean-square anchor residual after applying `tf`.
pub fn residual_rms(pairs: &[AnchorPair], tf: &SimilarityTransform) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let ss: f64 = pairs
        .iter()
        .map(|p| (tf.apply(&Vector3::from(p.slam)) - p.enu.to_vector()).norm_squared())
        .sum();
    (ss / pairs.len() as f64).sqrt()
}

fn bbox_diagonal(pairs: &[AnchorPair]) -> f64 {
    let (mut lo, mut hi) = (Vector3::repeat(f64::INFINITY), Vector3::repeat(f64::NEG_INFINITY));
    for p in pairs {
        let v = p.enu.to_vector();
        lo = lo.inf(&v);
        hi = hi.sup(&v);
    }
    if pairs.is_empty() {
        0.0
    } else {
        (hi - lo).norm()
    }
}

/// A transform fitted to one window of anchors, centered at `t_center`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentKnot {
    pub t_center: Timestamp,
    pub transform: SimilarityTransform,
}

/// One global transform, or per-window transforms blended linearly in time
/// between window centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Alignment {
    Global { transform: SimilarityTransform },
    Piecewise { global: SimilarityTransform, knots: Vec<AlignmentKnot> },
}

impl Alignment {
    pub fn global(&self) -> &SimilarityTransform {
        match self {
            Alignment::Global { transform } => transform,
            Alignment::Piecewise { global, .. } => global,
        }
    }

    /// Maps a SLAM position observed at `t` into ENU.
    pub fn apply(&self, t: Timestamp, x: &Vector3<f64>) -> Vector3<f64> {
        match self {
            Alignment::Global { transform } => transform.apply(x),
            Alignment::Piecewise { global, knots } => {
                if knots.is_empty() {
                    return global.apply(x);
                }
                let i = knots.partition_point(|k| k.t_center <= t);
                if i == 0 {
                    return knots[0].transform.apply(x);
                }
                if i == knots.len() {
                    return knots[i - 1].transform.apply(x);
                }
                let (a, b) = (&knots[i - 1], &knots[i]);
                let w = (t - a.t_center).0 as f64 / (b.t_center - a.t_center).0 as f64;
                (1.0 - w) * a.transform.apply(x) + w * b.transform.apply(x)
            }
        }
    }
}

/// Fits windows of `window` anchors with 50% overlap. Each window keeps the
/// global scale and rotation and re-fits only the translation, which stays
/// well-posed on short or nearly straight stretches.
pub fn align_piecewise(pairs: &[AnchorPair], window: usize, global: SimilarityTransform) -> Alignment {
    let n = pairs.len();
    let window = window.max(3);
    let step = (window / 2).max(1);
    let mut starts: Vec<usize> = (0..).map(|k| k * step).take_while(|&s| s + window <= n).collect();
    if n >= window && starts.last().is_some_and(|&s| s + window < n) {
        starts.push(n - window);
    }
    let (scale, rot) = (global.scale, global.rotation_matrix());
    let mut knots = Vec::new();
    for s in starts {
        let w = &pairs[s..s + window];
        let k = w.len() as f64;
        let resid: Vector3<f64> = w.iter().map(|p| p.enu.to_vector() - scale * (rot * Vector3::from(p.slam))).sum();
        let transform = SimilarityTransform::from_parts(scale, &rot, &(resid / k));
        let mean_t = w.iter().map(|p| p.t.0 as i128).sum::<i128>() / w.len() as i128;
        let t_center = Timestamp(mean_t as i64);
        if knots.last().is_some_and(|k: &AlignmentKnot| k.t_center >= t_center) {
            continue;
        }
        knots.push(AlignmentKnot { t_center, transform });
    }
    Alignment::Piecewise { global, knots }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub t: Timestamp,
    pub enu: EnuPoint,
    pub geo: GeoPoint,
    pub arc_m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub enu: EnuPoint,
    pub geo: GeoPoint,
    pub arc_m: f64,
}

/// Globally referenced polyline with per-point time and cumulative distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedTrajectory {
    pub origin: GeoOrigin,
    pub points: Vec<TrajectoryPoint>,
}

impl FusedTrajectory {
    /// Builds a trajectory from timed ENU points, computing geo coordinates and
    /// cumulative chord length.
    pub fn from_enu(origin: GeoOrigin, timed: impl IntoIterator<Item = (Timestamp, EnuPoint)>) -> Self {
        let mut points: Vec<TrajectoryPoint> = Vec::new();
        for (t, enu) in timed {
            let arc_m = points.last().map_or(0.0, |p| p.arc_m + p.enu.distance(&enu));
            points.push(TrajectoryPoint {
                t,
                enu,
                geo: enu_to_wgs84(enu, origin),
                arc_m,
            });
        }
        FusedTrajectory { origin, points }
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn time_range(&self) -> Option<(Timestamp, Timestamp)> {
        Some((self.points.first()?.t, self.points.last()?.t))
    }

    pub fn total_arc_m(&self) -> f64 {
        self.points.last().map_or(0.0, |p| p.arc_m)
    }

    /// Position at time `t`, linearly interpolated between bracketing points.
    pub fn locate(&self, t: Timestamp) -> Result<Location> {
        let (first, last) = self.time_range().ok_or(Error::EmptyStream)?;
        if t < first || t > last {
            return Err(Error::OutOfRange { t: t.0, first: first.0, last: last.0 });
        }
        let i = self.points.partition_point(|p| p.t < t);
        let b = &self.points[i];
        if b.t == t || i == 0 {
            return Ok(Location { enu: b.enu, geo: b.geo, arc_m: b.arc_m });
        }
        let a = &self.points[i - 1];
        let w = (t - a.t).0 as f64 / (b.t - a.t).0 as f64;
        let enu = EnuPoint::from_vector(&a.enu.to_vector().lerp(&b.enu.to_vector(), w));
        Ok(Location {
            enu,
            geo: enu_to_wgs84(enu, self.origin),
            arc_m: a.arc_m + w * (b.arc_m - a.arc_m),
        })
    }

    /// Earliest time at which the cumulative distance reaches `arc_m`
    /// (clamped to the trajectory).
    pub fn time_at_arc(&self, arc_m: f64) -> Option<Timestamp> {
        let i = self.points.partition_point(|p| p.arc_m < arc_m);
        if i == 0 {
            return self.points.first().map(|p| p.t);
        }
        if i == self.points.len() {
            return self.points.last().map(|p| p.t);
        }
        let (a, b) = (&self.points[i - 1], &self.points[i]);
        let w = (arc_m - a.arc_m) / (b.arc_m - a.arc_m);
        let t = a.t.0 as f64 + w * (b.t - a.t).0 as f64;
        Some(Timestamp((t.round() as i64).clamp(a.t.0, b.t.0)))
    }
}

/// Maps every SLAM pose through the alignment.
pub fn fuse_trajectory(slam: &SampleSeries<SlamPose>, alignment: &Alignment, origin: GeoOrigin) -> FusedTrajectory {
    FusedTrajectory::from_enu(
        origin,
        slam.iter()
            .map(|(t, p)| (t, EnuPoint::from_vector(&alignment.apply(t, &Vector3::from(p.position()))))),
    )
}

/// Everything the registration stage produced, for reporting and export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Registration {
    pub origin: GeoOrigin,
    pub selection: AnchorSelection,
    pub pairs: Vec<AnchorPair>,
    pub alignment: Alignment,
    pub anchor_rms_m: f64,
    pub trajectory: FusedTrajectory,
}

/// Anchor gating, pairing, alignment and fusion with the session parameters.
pub fn register_session(
    gps: &SampleSeries<GpsFix>,
    slam: &SampleSeries<SlamPose>,
    params: &Parameters,
) -> Result<Registration> {
    let selection = select_gps_anchors(gps, params.max_h_acc_m, params.max_speed_mps);
    let origin = selection
        .kept
        .values()
        .first()
        .map(|&f| GeoOrigin::from(f))
        .ok_or(Error::InsufficientAnchors { found: 0, required: 3 })?;
    let pairs = pair_anchors(slam, &selection.kept, origin, Duration::from_millis(params.pair_tol_ms))?;
    if pairs.len() < 3 {
        return Err(Error::InsufficientAnchors { found: pairs.len(), required: 3 });
    }
    let diag = bbox_diagonal(&pairs);
    if diag < params.min_anchor_diag_m {
        return Err(Error::DegenerateGeometry(format!(
            "anchor bounding-box diagonal {diag:.2} m below {} m",
            params.min_anchor_diag_m
        )));
    }
    let global = umeyama_align_bounded(&pairs, params.min_scale, params.max_scale)?;
    let alignment = if params.piecewise {
        align_piecewise(&pairs, params.piecewise_window, global)
    } else {
        Alignment::Global { transform: global }
    };
    let ss: f64 = pairs
        .iter()
        .map(|p| (alignment.apply(p.t, &Vector3::from(p.slam)) - p.enu.to_vector()).norm_squared())
        .sum();
    let anchor_rms_m = (ss / pairs.len() as f64).sqrt();
    let trajectory = fuse_trajectory(slam, &alignment, origin);
    Ok(Registration {
        origin,
        selection,
        pairs,
        alignment,
        anchor_rms_m,
        trajectory,
    })
}

/// Rotation angle (radians) between two rotation matrices.
pub fn rotation_angle_between(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(a.transpose() * b));
    q.angle()
}
