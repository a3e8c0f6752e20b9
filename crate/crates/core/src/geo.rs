//! GPS geometry and motion features.
//!
//! Turns raw (lat, lon, t) trajectories into per-point motion features —
//! relative distance, speed, acceleration, jerk — using geodesic distances
//! on the WGS84 ellipsoid, then chops feature series into fixed-length,
//! zero-padded segments and standardizes them per channel.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// WGS84 semi-major axis in meters.
const WGS84_A: f64 = 6_378_137.0;
/// WGS84 flattening.
const WGS84_F: f64 = 1.0 / 298.257_223_563;
/// Mean earth radius in meters, used by the spherical fallback.
const EARTH_RADIUS_MEAN: f64 = 6_371_008.8;
/// Convergence threshold for the Vincenty lambda iteration, radians.
const VINCENTY_EPS: f64 = 1e-12;
/// Iteration cap before declaring non-convergence (near-antipodal inputs).
const VINCENTY_MAX_ITERS: usize = 200;
/// Floor applied to per-channel standard deviations before dividing.
const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum GeoError {
    #[error("coordinate out of range: lat {lat}, lon {lon}")]
    InvalidCoordinate { lat: f64, lon: f64 },
    #[error("geodesic iteration did not converge (near-antipodal points)")]
    NonConvergence,
    #[error("trip needs at least 2 points, got {got}")]
    TooFewPoints { got: usize },
    #[error("timestamps must be strictly increasing (violation at index {index})")]
    NonMonotonicTime { index: usize },
    #[error("operation requires at least one segment with valid data")]
    EmptyInput,
    #[error("normalizer has {expected} channels but segment has {got}")]
    ChannelMismatch { expected: usize, got: usize },
}

/// A single GPS fix: degrees latitude/longitude and a timestamp in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpsPoint {
    pub lat: f64,
    pub lon: f64,
    pub t: f64,
}

impl GpsPoint {
    pub fn new(lat: f64, lon: f64, t: f64) -> Result<Self, GeoError> {
        check_coords(lat, lon)?;
        Ok(Self { lat, lon, t })
    }
}

fn check_coords(lat: f64, lon: f64) -> Result<(), GeoError> {
    let ok = lat.is_finite()
        && lon.is_finite()
        && (-90.0..=90.0).contains(&lat)
        && (-180.0..=180.0).contains(&lon);
    if ok {
        Ok(())
    } else {
        Err(GeoError::InvalidCoordinate { lat, lon })
    }
}

/// A travel mode: dense class index plus a human-readable name.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModeLabel {
    pub index: usize,
    pub name: String,
}

impl ModeLabel {
    pub fn new(index: usize, name: impl Into<String>) -> Self {
        Self { index, name: name.into() }
    }
}

/// One labeled trajectory with strictly increasing timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct Trip {
    pub points: Vec<GpsPoint>,
    pub mode: ModeLabel,
}

impl Trip {
    pub fn new(points: Vec<GpsPoint>, mode: ModeLabel) -> Result<Self, GeoError> {
        if points.len() < 2 {
            return Err(GeoError::TooFewPoints { got: points.len() });
        }
        for (i, p) in points.iter().enumerate() {
            check_coords(p.lat, p.lon)?;
            if i > 0 && p.t <= points[i - 1].t {
                return Err(GeoError::NonMonotonicTime { index: i });
            }
        }
        Ok(Self { points, mode })
    }
}

/// Geodesic distance in meters between two points on the WGS84 ellipsoid
/// (Vincenty's inverse formula). Fails with `NonConvergence` for
/// near-antipodal pairs; use [`relative_distance`] for a total function.
pub fn vincenty_inverse(p1: &GpsPoint, p2: &GpsPoint) -> Result<f64, GeoError> {
    check_coords(p1.lat, p1.lon)?;
    check_coords(p2.lat, p2.lon)?;

    let a = WGS84_A;
    let f = WGS84_F;
    let b = a * (1.0 - f);

    let phi1 = p1.lat.to_radians();
    let phi2 = p2.lat.to_radians();
    let l = (p2.lon - p1.lon).to_radians();

    // Reduced latitudes.
    let u1 = ((1.0 - f) * phi1.tan()).atan();
    let u2 = ((1.0 - f) * phi2.tan()).atan();
    let (sin_u1, cos_u1) = u1.sin_cos();
    let (sin_u2, cos_u2) = u2.sin_cos();

    let mut lambda = l;
    let mut iters = 0;
    let (sin_sigma, cos_sigma, sigma, cos_sq_alpha, cos_2sigma_m) = loop {
        let (sin_lambda, cos_lambda) = lambda.sin_cos();
        let sin_sigma = ((cos_u2 * sin_lambda).powi(2)
            + (cos_u1 * sin_u2 - sin_u1 * cos_u2 * cos_lambda).powi(2))
        .sqrt();
        if sin_sigma == 0.0 {
            // Coincident points.
            return Ok(0.0);
        }
        let cos_sigma = sin_u1 * sin_u2 + cos_u1 * cos_u2 * cos_lambda;
        let sigma = sin_sigma.atan2(cos_sigma);
        let sin_alpha = cos_u1 * cos_u2 * sin_lambda / sin_sigma;
        let cos_sq_alpha = 1.0 - sin_alpha * sin_alpha;
        // Both points on the equator: the azimuth term vanishes.
        let cos_2sigma_m = if cos_sq_alpha == 0.0 {
            0.0
        } else {
            cos_sigma - 2.0 * sin_u1 * sin_u2 / cos_sq_alpha
        };
        let c = f / 16.0 * cos_sq_alpha * (4.0 + f * (4.0 - 3.0 * cos_sq_alpha));
        let lambda_prev = lambda;
        lambda = l
            + (1.0 - c)
                * f
                * sin_alpha
                * (sigma
                    + c * sin_sigma
                        * (cos_2sigma_m
                            + c * cos_sigma * (-1.0 + 2.0 * cos_2sigma_m * cos_2sigma_m)));
        if (lambda - lambda_prev).abs() < VINCENTY_EPS {
            break (sin_sigma, cos_sigma, sigma, cos_sq_alpha, cos_2sigma_m);
        }
        iters += 1;
        if iters >= VINCENTY_MAX_ITERS {
            return Err(GeoError::NonConvergence);
        }
    };

    let u_sq = cos_sq_alpha * (a * a - b * b) / (b * b);
    let big_a = 1.0 + u_sq / 16384.0 * (4096.0 + u_sq * (-768.0 + u_sq * (320.0 - 175.0 * u_sq)));
    let big_b = u_sq / 1024.0 * (256.0 + u_sq * (-128.0 + u_sq * (74.0 - 47.0 * u_sq)));
    let delta_sigma = big_b
        * sin_sigma
        * (cos_2sigma_m
            + big_b / 4.0
                * (cos_sigma * (-1.0 + 2.0 * cos_2sigma_m * cos_2sigma_m)
                    - big_b / 6.0
                        * cos_2sigma_m
                        * (-3.0 + 4.0 * sin_sigma * sin_sigma)
                        * (-3.0 + 4.0 * cos_2sigma_m * cos_2sigma_m)));

    Ok(b * big_a * (sigma - delta_sigma))
}

/// Haversine distance in meters on a sphere of mean earth radius.
pub fn great_circle(p1: &GpsPoint, p2: &GpsPoint) -> f64 {
    let phi1 = p1.lat.to_radians();
    let phi2 = p2.lat.to_radians();
    let d_phi = phi2 - phi1;
    let d_lambda = (p2.lon - p1.lon).to_radians();
    let h = (d_phi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (d_lambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_MEAN * h.sqrt().min(1.0).asin()
}

/// Distance in meters between consecutive fixes: Vincenty, falling back to
/// the spherical great-circle value when the iteration does not converge.
pub fn relative_distance(p1: &GpsPoint, p2: &GpsPoint) -> Result<f64, GeoError> {
    match vincenty_inverse(p1, p2) {
        Ok(d) => Ok(d),
        Err(GeoError::NonConvergence) => Ok(great_circle(p1, p2)),
        Err(e) => Err(e),
    }
}

/// The four motion-feature channels, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Distance,
    Speed,
    Accel,
    Jerk,
}

impl Channel {
    pub const ALL: [Channel; 4] =
        [Channel::Distance, Channel::Speed, Channel::Accel, Channel::Jerk];

    pub fn name(self) -> &'static str {
        match self {
            Channel::Distance => "distance",
            Channel::Speed => "speed",
            Channel::Accel => "accel",
            Channel::Jerk => "jerk",
        }
    }
}

/// Per-point motion features of one trip; all vectors share the trip length.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionFeatures {
    pub distance: Vec<f64>,
    pub speed: Vec<f64>,
    pub accel: Vec<f64>,
    pub jerk: Vec<f64>,
}

impl MotionFeatures {
    pub fn len(&self) -> usize {
        self.distance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.distance.is_empty()
    }

    pub fn channel(&self, ch: Channel) -> &[f64] {
        match ch {
            Channel::Distance => &self.distance,
            Channel::Speed => &self.speed,
            Channel::Accel => &self.accel,
            Channel::Jerk => &self.jerk,
        }
    }
}

/// Motion features for every point of a trip.
///
/// For points `i` in `0..n-1` (with `dt_i = t[i+1] - t[i]`):
/// distance `d_i` to the next fix, speed `s_i = d_i / dt_i`, acceleration
/// `a_i = (s[i+1] - s[i]) / dt_i`, jerk `j_i = (a[i+1] - a[i]) / dt_i`.
/// The last point has no successor, so `d = 0`, `s` repeats its predecessor,
/// and `a = j = 0`.
pub fn compute_motion_features(trip: &Trip) -> Result<MotionFeatures, GeoError> {
    let pts = &trip.points;
    let n = pts.len();
    if n < 2 {
        return Err(GeoError::TooFewPoints { got: n });
    }

    let mut dt = vec![0.0; n - 1];
    for i in 0..n - 1 {
        if pts[i + 1].t <= pts[i].t {
            return Err(GeoError::NonMonotonicTime { index: i + 1 });
        }
        dt[i] = pts[i + 1].t - pts[i].t;
    }

    let mut distance = vec![0.0; n];
    let mut speed = vec![0.0; n];
    let mut accel = vec![0.0; n];
    let mut jerk = vec![0.0; n];

    for i in 0..n - 1 {
        distance[i] = relative_distance(&pts[i], &pts[i + 1])?;
        speed[i] = distance[i] / dt[i];
    }
    speed[n - 1] = speed[n - 2];

    for i in 0..n - 1 {
        accel[i] = (speed[i + 1] - speed[i]) / dt[i];
    }
    for i in 0..n - 1 {
        jerk[i] = (accel[i + 1] - accel[i]) / dt[i];
    }

    Ok(MotionFeatures { distance, speed, accel, jerk })
}

/// A fixed-length, zero-padded slice of a trip's feature series.
///
/// Data is channel-major: channel `c` occupies `data[c*seq_len .. (c+1)*seq_len]`.
/// Only the first `valid_len` columns carry trip data; the rest are exactly 0.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSegment {
    data: Vec<f64>,
    n_channels: usize,
    seq_len: usize,
    valid_len: usize,
    label: ModeLabel,
}

impl FeatureSegment {
    /// Builds a segment directly from channel-major data. Padding columns
    /// (index >= `valid_len`) must already be zero.
    pub fn new(
        data: Vec<f64>,
        n_channels: usize,
        seq_len: usize,
        valid_len: usize,
        label: ModeLabel,
    ) -> Self {
        assert_eq!(data.len(), n_channels * seq_len, "data length mismatch");
        assert!(valid_len >= 1 && valid_len <= seq_len, "valid_len out of range");
        debug_assert!(
            (0..n_channels).all(|c| (valid_len..seq_len).all(|t| data[c * seq_len + t] == 0.0)),
            "padding columns must be zero"
        );
        Self { data, n_channels, seq_len, valid_len, label }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn valid_len(&self) -> usize {
        self.valid_len
    }

    pub fn label(&self) -> &ModeLabel {
        &self.label
    }

    /// Value of channel `c` at time column `t`.
    pub fn at(&self, c: usize, t: usize) -> f64 {
        self.data[c * self.seq_len + t]
    }

    fn at_mut(&mut self, c: usize, t: usize) -> &mut f64 {
        &mut self.data[c * self.seq_len + t]
    }
}

/// Chops a feature series into consecutive windows of `seq_len` points.
/// Every point lands in exactly one segment; the trailing window is
/// zero-padded and remembers how many columns are real via `valid_len`.
pub fn segment_trip(
    features: &MotionFeatures,
    mode: &ModeLabel,
    seq_len: usize,
    channels: &[Channel],
) -> Vec<FeatureSegment> {
    assert!(seq_len >= 1, "seq_len must be positive");
    assert!(!channels.is_empty(), "need at least one channel");
    let n = features.len();
    let mut segments = Vec::with_capacity(n.div_ceil(seq_len));
    let mut start = 0;
    while start < n {
        let valid = (n - start).min(seq_len);
        let mut data = vec![0.0; channels.len() * seq_len];
        for (c, &ch) in channels.iter().enumerate() {
            let src = features.channel(ch);
            data[c * seq_len..c * seq_len + valid].copy_from_slice(&src[start..start + valid]);
        }
        segments.push(FeatureSegment::new(data, channels.len(), seq_len, valid, mode.clone()));
        start += valid;
    }
    segments
}

/// Per-channel standardization parameters fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    /// Per-channel mean over non-padded columns.
    pub mean: Vec<f64>,
    /// Per-channel population standard deviation, floored at 1e-8.
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn n_channels(&self) -> usize {
        self.mean.len()
    }
}

/// Fits per-channel mean and population standard deviation over the
/// non-padded columns of `segments`. Padding never contributes.
pub fn fit_normalizer(segments: &[FeatureSegment]) -> Result<Normalizer, GeoError> {
    let first = segments.first().ok_or(GeoError::EmptyInput)?;
    let n_channels = first.n_channels();
    let mut sum = vec![0.0; n_channels];
    let mut count = 0usize;
    for seg in segments {
        if seg.n_channels() != n_channels {
            return Err(GeoError::ChannelMismatch { expected: n_channels, got: seg.n_channels() });
        }
        for (c, s) in sum.iter_mut().enumerate() {
            for t in 0..seg.valid_len() {
                *s += seg.at(c, t);
            }
        }
        count += seg.valid_len();
    }
    if count == 0 {
        return Err(GeoError::EmptyInput);
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();

    let mut sq = vec![0.0; n_channels];
    for seg in segments {
        for (c, s) in sq.iter_mut().enumerate() {
            for t in 0..seg.valid_len() {
                let d = seg.at(c, t) - mean[c];
                *s += d * d;
            }
        }
    }
    let std: Vec<f64> = sq.iter().map(|s| (s / count as f64).sqrt().max(STD_FLOOR)).collect();
    Ok(Normalizer { mean, std })
}

/// Standardizes the non-padded columns of a segment in place; padding
/// columns stay exactly zero.
pub fn apply_normalizer(norm: &Normalizer, seg: &mut FeatureSegment) -> Result<(), GeoError> {
    if norm.n_channels() != seg.n_channels() {
        return Err(GeoError::ChannelMismatch {
            expected: norm.n_channels(),
            got: seg.n_channels(),
        });
    }
    for c in 0..seg.n_channels() {
        for t in 0..seg.valid_len() {
            let v = seg.at(c, t);
            *seg.at_mut(c, t) = (v - norm.mean[c]) / norm.std[c];
        }
    }
    Ok(())
}
