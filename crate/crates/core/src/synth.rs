//! Synthetic labeled GPS trips and dataset plumbing.
//!
//! Trips are random walks whose per-step displacement follows
//! mode-dependent kinematics (speed distribution, dwell stops, occasional
//! acceleration bursts), standing in for a real travel survey. Also houses
//! the proxy/train/test split and the label-restricted non-IID partition
//! into worker shards.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::geo::{FeatureSegment, GeoError, GpsPoint, ModeLabel, Trip};
use crate::rng::{mix_seed, rng_from, stream};

/// Trip start area (Montréal).
const BASE_LAT: f64 = 45.5;
const BASE_LON: f64 = -73.6;
/// Meters per degree of latitude, and per degree of longitude at the
/// equator, for the local displacement-to-coordinates projection.
const M_PER_DEG_LAT: f64 = 111_132.0;
const M_PER_DEG_LON_EQ: f64 = 111_320.0;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("no kinematics defined for mode {0:?}")]
    UnknownMode(String),
    #[error("need at least {need} segments to split, got {got}")]
    TooFewSegments { got: usize, need: usize },
    #[error("infeasible partition: {0}")]
    InfeasiblePartition(String),
    #[error(transparent)]
    Geo(#[from] GeoError),
}

/// Movement profile of one travel mode.
#[derive(Debug, Clone)]
pub struct ModeKinematics {
    pub mode: ModeLabel,
    /// Mean cruise speed, m/s.
    pub speed_mean: f64,
    /// Speed standard deviation, m/s.
    pub speed_std: f64,
    /// Probability a step carries an extra acceleration burst.
    pub accel_burst_prob: f64,
    /// Maximum extra speed a burst adds over one second, m/s.
    pub accel_magnitude: f64,
    /// Probability a point is a stop (zero displacement).
    pub dwell_prob: f64,
}

/// Default four-mode profile: walk, bike, car, public transit.
pub fn default_kinematics() -> Vec<ModeKinematics> {
    vec![
        ModeKinematics {
            mode: ModeLabel::new(0, "walk"),
            speed_mean: 1.4,
            speed_std: 0.3,
            accel_burst_prob: 0.0,
            accel_magnitude: 0.0,
            dwell_prob: 0.0,
        },
        ModeKinematics {
            mode: ModeLabel::new(1, "bike"),
            speed_mean: 4.5,
            speed_std: 1.0,
            accel_burst_prob: 0.1,
            accel_magnitude: 0.8,
            dwell_prob: 0.02,
        },
        ModeKinematics {
            mode: ModeLabel::new(2, "car"),
            speed_mean: 12.0,
            speed_std: 5.0,
            accel_burst_prob: 0.2,
            accel_magnitude: 2.0,
            dwell_prob: 0.05,
        },
        ModeKinematics {
            mode: ModeLabel::new(3, "public_transit"),
            speed_mean: 8.0,
            speed_std: 4.0,
            accel_burst_prob: 0.2,
            accel_magnitude: 1.5,
            dwell_prob: 0.15,
        },
    ]
}

/// One trip at 1 Hz: per-second displacement drawn from the mode's
/// kinematics, integrated along a slowly wandering heading from a start
/// point near Montréal. Speeds are clipped to [0, mean + 6·std] so the
/// commanded speed range is bounded; dwell points emit zero displacement.
pub fn generate_trip(
    kin: &ModeKinematics,
    n_points: usize,
    rng_seed: u64,
) -> Result<Trip, SynthError> {
    assert!(n_points >= 2, "a trip needs at least 2 points");
    let mut rng = rng_from(&[rng_seed]);
    let speed_dist = Normal::new(kin.speed_mean, kin.speed_std)
        .expect("speed_std must be finite and non-negative");

    let mut lat = BASE_LAT + rng.random_range(-0.05..0.05);
    let mut lon = BASE_LON + rng.random_range(-0.05..0.05);
    let mut heading: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let heading_jitter = Normal::new(0.0, 0.15).unwrap();

    let mut points = Vec::with_capacity(n_points);
    points.push(GpsPoint { lat, lon, t: 0.0 });
    for i in 1..n_points {
        heading += heading_jitter.sample(&mut rng);
        let speed = if rng.random::<f64>() < kin.dwell_prob {
            0.0
        } else {
            let mut s: f64 = speed_dist.sample(&mut rng);
            s = s.clamp(0.0, kin.speed_mean + 6.0 * kin.speed_std);
            if rng.random::<f64>() < kin.accel_burst_prob && kin.accel_magnitude > 0.0 {
                s += rng.random_range(0.0..kin.accel_magnitude);
            }
            s
        };
        // One second of travel, projected to degrees locally.
        let north = speed * heading.cos();
        let east = speed * heading.sin();
        lat += north / M_PER_DEG_LAT;
        lon += east / (M_PER_DEG_LON_EQ * lat.to_radians().cos());
        points.push(GpsPoint { lat, lon, t: i as f64 });
    }
    Ok(Trip::new(points, kin.mode.clone())?)
}

/// Looks up a mode's kinematics by label name.
pub fn kinematics_for<'a>(
    table: &'a [ModeKinematics],
    mode: &ModeLabel,
) -> Result<&'a ModeKinematics, SynthError> {
    table
        .iter()
        .find(|k| k.mode.name == mode.name)
        .ok_or_else(|| SynthError::UnknownMode(mode.name.clone()))
}

/// All trips for an experiment: `trips_per_mode` trips for every mode in
/// the table, with per-trip seeds derived from (master, mode, index) so
/// generation order never matters.
pub fn generate_dataset(
    table: &[ModeKinematics],
    trips_per_mode: usize,
    points_per_trip: usize,
    master_seed: u64,
) -> Result<Vec<Trip>, SynthError> {
    assert!(trips_per_mode >= 1, "need at least one trip per mode");
    let mut trips = Vec::with_capacity(table.len() * trips_per_mode);
    for (mode_idx, kin) in table.iter().enumerate() {
        for trip_idx in 0..trips_per_mode {
            let seed = mix_seed(&[master_seed, stream::TRIP, mode_idx as u64, trip_idx as u64]);
            trips.push(generate_trip(kin, points_per_trip, seed)?);
        }
    }
    Ok(trips)
}

/// Chief-held proxy set plus train/test pools.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    /// Small population-representative sample held by the chief (for
    /// global pre-training and meta-learner training). ~5% of the data.
    pub proxy: Vec<FeatureSegment>,
    /// 80% of the remainder, to be partitioned across workers.
    pub train: Vec<FeatureSegment>,
    /// Held-out 20% used for every reported metric.
    pub test: Vec<FeatureSegment>,
}

/// Minimum dataset size the splitter accepts.
pub const MIN_SPLIT_SEGMENTS: usize = 20;

/// Stratified proxy/train/test split: segments are shuffled within each
/// class and interleaved across classes (so even the small proxy slice
/// sees every class), then cut at floor(0.05·n) for the proxy and
/// floor(0.8·remainder) for train, leaving the rest as test.
pub fn split_dataset(
    segments: Vec<FeatureSegment>,
    rng_seed: u64,
) -> Result<DatasetSplit, SynthError> {
    let n = segments.len();
    if n < MIN_SPLIT_SEGMENTS {
        return Err(SynthError::TooFewSegments { got: n, need: MIN_SPLIT_SEGMENTS });
    }

    // Group by class, shuffle each class with its own derived stream.
    let max_class = segments.iter().map(|s| s.label().index).max().unwrap();
    let mut by_class: Vec<Vec<FeatureSegment>> = (0..=max_class).map(|_| Vec::new()).collect();
    for seg in segments {
        by_class[seg.label().index].push(seg);
    }
    for (class, list) in by_class.iter_mut().enumerate() {
        let mut rng = rng_from(&[rng_seed, stream::SPLIT, class as u64]);
        list.shuffle(&mut rng);
    }

    // Round-robin interleave so any prefix is close to class-balanced.
    let mut iters: Vec<std::vec::IntoIter<FeatureSegment>> =
        by_class.into_iter().map(Vec::into_iter).collect();
    let mut interleaved = Vec::with_capacity(n);
    while interleaved.len() < n {
        for it in &mut iters {
            interleaved.extend(it.next());
        }
    }

    let n_proxy = n / 20; // floor(0.05 n)
    let rest = n - n_proxy;
    let n_train = rest * 4 / 5; // floor(0.8 rest)
    let mut it = interleaved.into_iter();
    let proxy: Vec<_> = it.by_ref().take(n_proxy).collect();
    let train: Vec<_> = it.by_ref().take(n_train).collect();
    let test: Vec<_> = it.collect();
    Ok(DatasetSplit { proxy, train, test })
}

/// One worker's private shard.
#[derive(Debug, Clone)]
pub struct WorkerDataset {
    worker_id: usize,
    segments: Vec<FeatureSegment>,
}

impl WorkerDataset {
    pub fn new(worker_id: usize, segments: Vec<FeatureSegment>) -> Self {
        assert!(!segments.is_empty(), "worker shard must be non-empty");
        Self { worker_id, segments }
    }

    pub fn worker_id(&self) -> usize {
        self.worker_id
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// The worker's raw segments. Reads are counted by the data-locality
    /// instrumentation in `fed`; only a worker's own local training is
    /// expected to touch them.
    pub fn segments(&self) -> &[FeatureSegment] {
        crate::fed::note_worker_data_access();
        &self.segments
    }
}

/// Label-restricted sharding: label slots are dealt round-robin (slot
/// `w·modes_per_worker + j` carries label `slot mod K`), each label's
/// segments are shuffled and split evenly across the workers holding it.
/// The output multiset equals the input exactly.
pub fn partition_non_iid(
    train: Vec<FeatureSegment>,
    n_workers: usize,
    modes_per_worker: usize,
    rng_seed: u64,
) -> Result<Vec<WorkerDataset>, SynthError> {
    assert!(n_workers >= 1, "need at least one worker");
    let n_classes = match train.iter().map(|s| s.label().index).max() {
        Some(max) => max + 1,
        None => {
            return Err(SynthError::InfeasiblePartition("no training segments".into()));
        }
    };
    if modes_per_worker < 1 || modes_per_worker > n_classes {
        return Err(SynthError::InfeasiblePartition(format!(
            "modes_per_worker {modes_per_worker} outside [1, {n_classes}]"
        )));
    }
    if n_workers * modes_per_worker < n_classes {
        return Err(SynthError::InfeasiblePartition(format!(
            "{n_workers} workers x {modes_per_worker} modes cannot cover {n_classes} labels"
        )));
    }

    // Workers assigned to each label, ascending worker id.
    let mut holders: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for w in 0..n_workers {
        for j in 0..modes_per_worker {
            holders[(w * modes_per_worker + j) % n_classes].push(w);
        }
    }

    let mut by_class: Vec<Vec<FeatureSegment>> = (0..n_classes).map(|_| Vec::new()).collect();
    for seg in train {
        by_class[seg.label().index].push(seg);
    }

    let mut shards: Vec<Vec<FeatureSegment>> = vec![Vec::new(); n_workers];
    for (class, mut list) in by_class.into_iter().enumerate() {
        let workers = &holders[class];
        if list.len() < workers.len() {
            return Err(SynthError::InfeasiblePartition(format!(
                "label {class} has {} segments for {} assigned workers",
                list.len(),
                workers.len()
            )));
        }
        let mut rng = rng_from(&[rng_seed, stream::PART, class as u64]);
        list.shuffle(&mut rng);
        // Deal contiguous near-equal chunks; the first (len mod k) chunks
        // take one extra.
        let k = workers.len();
        let base = list.len() / k;
        let extra = list.len() % k;
        let mut drain = list.into_iter();
        for (i, &w) in workers.iter().enumerate() {
            let take = base + usize::from(i < extra);
            shards[w].extend(drain.by_ref().take(take));
        }
    }

    Ok(shards.into_iter().enumerate().map(|(w, segs)| WorkerDataset::new(w, segs)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{compute_motion_features, segment_trip, Channel};
    use std::collections::HashMap;

    fn walk() -> ModeKinematics {
        default_kinematics()[0].clone()
    }

    #[test]
    fn trips_are_seed_deterministic() {
        let kin = walk();
        let a = generate_trip(&kin, 20, 42).unwrap();
        let b = generate_trip(&kin, 20, 42).unwrap();
        assert_eq!(a, b);
        let c = generate_trip(&kin, 20, 43).unwrap();
        assert_ne!(a, c);
    }

    // Walk kinematics: mean 1.4, std 0.3, clipped at mean + 6 std, no
    // bursts. Derived speeds stay within [0, 3.5] m/s (the local
    // projection error is far below the 0.3 m/s headroom).
    #[test]
    fn walk_speeds_bounded() {
        let kin = walk();
        for seed in 0..50 {
            let trip = generate_trip(&kin, 10, seed).unwrap();
            let f = compute_motion_features(&trip).unwrap();
            for &s in &f.speed {
                assert!((0.0..=3.5).contains(&s), "seed {seed}: speed {s}");
            }
        }
    }

    #[test]
    fn full_dwell_means_stationary() {
        let mut kin = walk();
        kin.dwell_prob = 1.0;
        let trip = generate_trip(&kin, 15, 7).unwrap();
        let f = compute_motion_features(&trip).unwrap();
        assert!(f.distance.iter().all(|&d| d == 0.0));
        assert!(f.speed.iter().all(|&s| s == 0.0));
        assert!(f.accel.iter().all(|&a| a == 0.0));
        assert!(f.jerk.iter().all(|&j| j == 0.0));
    }

    #[test]
    fn dataset_counts_and_determinism() {
        let table = default_kinematics();
        let trips = generate_dataset(&table, 50, 12, 99).unwrap();
        assert_eq!(trips.len(), 200);
        let mut per_mode = HashMap::new();
        for t in &trips {
            *per_mode.entry(t.mode.index).or_insert(0usize) += 1;
        }
        assert!(per_mode.values().all(|&c| c == 50));

        let again = generate_dataset(&table, 50, 12, 99).unwrap();
        assert_eq!(trips, again);

        let single = generate_dataset(&table, 1, 5, 0).unwrap();
        assert_eq!(single.len(), 4);
    }

    fn toy_segments(n: usize, n_classes: usize) -> Vec<FeatureSegment> {
        (0..n)
            .map(|i| {
                let class = i % n_classes;
                FeatureSegment::new(
                    vec![i as f64, 1.0],
                    1,
                    2,
                    2,
                    ModeLabel::new(class, format!("m{class}")),
                )
            })
            .collect()
    }

    #[test]
    fn split_counts_follow_floor_arithmetic() {
        let split = split_dataset(toy_segments(200, 4), 1).unwrap();
        assert_eq!((split.proxy.len(), split.train.len(), split.test.len()), (10, 152, 38));
        let split = split_dataset(toy_segments(100, 4), 1).unwrap();
        assert_eq!((split.proxy.len(), split.train.len(), split.test.len()), (5, 76, 19));
    }

    #[test]
    fn split_is_deterministic_disjoint_and_stratified() {
        let segs = toy_segments(200, 4);
        let a = split_dataset(segs.clone(), 5).unwrap();
        let b = split_dataset(segs.clone(), 5).unwrap();
        assert_eq!(a.proxy, b.proxy);
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);

        // Partition: every input segment appears exactly once overall.
        let mut seen: Vec<f64> =
            a.proxy.iter().chain(&a.train).chain(&a.test).map(|s| s.at(0, 0)).collect();
        seen.sort_by(f64::total_cmp);
        let want: Vec<f64> = (0..200).map(|i| i as f64).collect();
        assert_eq!(seen, want);

        // Every class shows up in every split.
        for (name, part) in [("proxy", &a.proxy), ("train", &a.train), ("test", &a.test)] {
            let classes: std::collections::HashSet<usize> =
                part.iter().map(|s| s.label().index).collect();
            assert_eq!(classes.len(), 4, "{name} is missing classes");
        }
    }

    #[test]
    fn split_rejects_tiny_datasets() {
        assert!(matches!(
            split_dataset(toy_segments(19, 2), 0),
            Err(SynthError::TooFewSegments { got: 19, need: 20 })
        ));
    }

    #[test]
    fn partition_round_robin_label_counts() {
        // 4 labels, 10 workers, one mode each: worker w gets label w mod 4,
        // so labels land on {3, 3, 2, 2} workers.
        let segs = toy_segments(400, 4);
        let workers = partition_non_iid(segs, 10, 1, 7).unwrap();
        assert_eq!(workers.len(), 10);
        let mut holders_per_label = HashMap::new();
        for w in &workers {
            let labels: std::collections::HashSet<usize> =
                w.segments().iter().map(|s| s.label().index).collect();
            assert_eq!(labels.len(), 1, "worker {} should be single-label", w.worker_id());
            *holders_per_label.entry(*labels.iter().next().unwrap()).or_insert(0usize) += 1;
        }
        let mut counts: Vec<usize> = holders_per_label.values().copied().collect();
        counts.sort_unstable();
        assert_eq!(counts, vec![2, 2, 3, 3]);
    }

    #[test]
    fn partition_full_modes_gives_every_worker_all_labels() {
        let segs = toy_segments(400, 4);
        let workers = partition_non_iid(segs, 10, 4, 7).unwrap();
        for w in &workers {
            let labels: std::collections::HashSet<usize> =
                w.segments().iter().map(|s| s.label().index).collect();
            assert_eq!(labels.len(), 4);
        }
    }

    #[test]
    fn partition_conserves_segments_exactly() {
        for (n_workers, mpw) in [(10, 1), (10, 2), (7, 3), (4, 4), (1, 4), (13, 2)] {
            let segs = toy_segments(260, 4);
            let want: Vec<f64> = segs.iter().map(|s| s.at(0, 0)).collect();
            let workers = partition_non_iid(segs, n_workers, mpw, 3).unwrap();
            let mut got: Vec<f64> =
                workers.iter().flat_map(|w| w.segments().iter().map(|s| s.at(0, 0))).collect();
            got.sort_by(f64::total_cmp);
            let mut want_sorted = want;
            want_sorted.sort_by(f64::total_cmp);
            assert_eq!(got, want_sorted, "workers={n_workers} mpw={mpw}");
        }
    }

    #[test]
    fn partition_infeasible_cases() {
        // 2 workers x 1 mode cannot cover 4 labels.
        assert!(matches!(
            partition_non_iid(toy_segments(100, 4), 2, 1, 0),
            Err(SynthError::InfeasiblePartition(_))
        ));
        // A label with fewer segments than assigned workers: 20 of class 0
        // but a single class-1 segment, dealt to 4 workers holding both.
        let segs = toy_segments(40, 2);
        let starved: Vec<FeatureSegment> = segs
            .iter()
            .filter(|s| s.label().index == 0)
            .chain(segs.iter().filter(|s| s.label().index == 1).take(1))
            .cloned()
            .collect();
        assert!(matches!(
            partition_non_iid(starved, 4, 2, 0),
            Err(SynthError::InfeasiblePartition(_))
        ));
    }

    // The synthetic task must be learnable before any neural training is
    // trusted: nearest-centroid on mean segment speed alone reaches 90%.
    #[test]
    fn modes_separable_by_mean_speed() {
        let table = default_kinematics();
        let trips = generate_dataset(&table, 50, 60, 2024).unwrap();
        let mut segments = Vec::new();
        for trip in &trips {
            let f = compute_motion_features(trip).unwrap();
            segments.extend(segment_trip(&f, &trip.mode, 10, &[Channel::Speed]));
        }
        let mean_speed = |s: &FeatureSegment| -> f64 {
            (0..s.valid_len()).map(|t| s.at(0, t)).sum::<f64>() / s.valid_len() as f64
        };
        let mut centroid = [0.0; 4];
        let mut count = [0usize; 4];
        for s in &segments {
            centroid[s.label().index] += mean_speed(s);
            count[s.label().index] += 1;
        }
        for (c, n) in centroid.iter_mut().zip(&count) {
            *c /= *n as f64;
        }
        let correct = segments
            .iter()
            .filter(|s| {
                let v = mean_speed(s);
                let pred = (0..4)
                    .min_by(|&a, &b| (centroid[a] - v).abs().total_cmp(&(centroid[b] - v).abs()))
                    .unwrap();
                pred == s.label().index
            })
            .count();
        let acc = correct as f64 / segments.len() as f64;
        assert!(acc >= 0.90, "nearest-centroid accuracy {acc}");
    }
}
