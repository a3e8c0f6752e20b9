//! End-to-end experiment orchestration: synthetic trips, CSV I/O,
//! preprocessing, federation, ensembling, and reproducible persistence of
//! metrics and checkpoints.
//!
//! Output layout under the run directory:
//! `trips.csv` (generate), `metrics.csv`, `config.echo.json`,
//! `preprocess.json` (the fitted normalizer), and one checkpoint per model
//! (`lstm.ckpt`, `gru.ckpt`, `cnn1d.ckpt`, `meta.ckpt`).

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig};
use crate::ensemble::{
    collect_base_predictions, train_meta_learner, Combiner, EnsembleError, EnsembleModel,
    META_EPOCHS,
};
use crate::fed::{run_federation, FedError, FederationState};
use crate::geo::{
    apply_normalizer, compute_motion_features, fit_normalizer, segment_trip, FeatureSegment,
    GeoError, GpsPoint, ModeLabel, Normalizer, Trip,
};
use crate::nn::{
    build_model, evaluate, load_checkpoint, save_checkpoint, Architecture, ModelSpec, NnError,
    ParamSet,
};
use crate::rng::{mix_seed, stream};
use crate::synth::{
    default_kinematics, generate_dataset, partition_non_iid, split_dataset, DatasetSplit,
    ModeKinematics, SynthError, WorkerDataset,
};

pub const TRIPS_FILE: &str = "trips.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_ECHO_FILE: &str = "config.echo.json";
pub const PREPROCESS_FILE: &str = "preprocess.json";
pub const META_CHECKPOINT: &str = "meta.ckpt";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("geo: {0}")]
    Geo(#[from] GeoError),
    #[error("synth: {0}")]
    Synth(#[from] SynthError),
    #[error("model: {0}")]
    Nn(#[from] NnError),
    #[error("federation: {0}")]
    Fed(#[from] FedError),
    #[error("ensemble: {0}")]
    Ensemble(#[from] EnsembleError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("data: {0}")]
    Data(String),
}

// --- trips CSV ----------------------------------------------------------

/// Writes trips as `trip_id,lat,lon,timestamp,mode` rows, one row per
/// point. Floats use the shortest representation that parses back
/// bit-exactly.
pub fn write_trips_csv(path: &Path, trips: &[Trip]) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["trip_id", "lat", "lon", "timestamp", "mode"])?;
    for (id, trip) in trips.iter().enumerate() {
        for p in &trip.points {
            w.write_record([
                id.to_string(),
                p.lat.to_string(),
                p.lon.to_string(),
                p.t.to_string(),
                trip.mode.name.clone(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Deserialize)]
struct TripRow {
    trip_id: String,
    lat: f64,
    lon: f64,
    timestamp: f64,
    mode: String,
}

/// Reads a trips CSV, grouping consecutive rows by `trip_id`. Mode names
/// map to class indices by their position in `class_names`.
pub fn read_trips_csv(path: &Path, class_names: &[String]) -> Result<Vec<Trip>, PipelineError> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut trips = Vec::new();
    let mut current: Option<(String, Vec<GpsPoint>, ModeLabel)> = None;

    let finish = |cur: Option<(String, Vec<GpsPoint>, ModeLabel)>,
                  trips: &mut Vec<Trip>|
     -> Result<(), PipelineError> {
        if let Some((id, points, mode)) = cur {
            let trip = Trip::new(points, mode)
                .map_err(|e| PipelineError::Data(format!("trip {id:?}: {e}")))?;
            trips.push(trip);
        }
        Ok(())
    };

    for row in reader.deserialize() {
        let row: TripRow = row?;
        let class = class_names
            .iter()
            .position(|n| *n == row.mode)
            .ok_or_else(|| PipelineError::Data(format!("unknown mode {:?}", row.mode)))?;
        let point = GpsPoint::new(row.lat, row.lon, row.timestamp)?;
        match &mut current {
            Some((id, points, mode)) if *id == row.trip_id => {
                if mode.name != row.mode {
                    return Err(PipelineError::Data(format!(
                        "trip {:?} mixes modes {:?} and {:?}",
                        row.trip_id, mode.name, row.mode
                    )));
                }
                points.push(point);
            }
            _ => {
                finish(current.take(), &mut trips)?;
                current = Some((row.trip_id, vec![point], ModeLabel::new(class, row.mode)));
            }
        }
    }
    finish(current, &mut trips)?;
    if trips.is_empty() {
        return Err(PipelineError::Data("trips CSV holds no rows".into()));
    }
    Ok(trips)
}

// --- dataset preparation -------------------------------------------------

/// Kinematics table for the configured classes, reindexed so class i is
/// `class_names[i]`.
pub fn kinematics_for_config(
    config: &ExperimentConfig,
) -> Result<Vec<ModeKinematics>, PipelineError> {
    let known = default_kinematics();
    config
        .dataset
        .class_names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let profile = known
                .iter()
                .find(|k| k.mode.name == *name)
                .ok_or_else(|| SynthError::UnknownMode(name.clone()))?;
            Ok(ModeKinematics { mode: ModeLabel::new(i, name.clone()), ..profile.clone() })
        })
        .collect()
}

/// Fixed base-learner order: LSTM, GRU, CNN1D, sized from the config.
pub fn base_specs(config: &ExperimentConfig) -> Vec<ModelSpec> {
    Architecture::BASE
        .iter()
        .map(|&arch| {
            let mut spec = ModelSpec::new(
                arch,
                config.dataset.channels.len(),
                config.dataset.seq_len,
                config.n_classes(),
            );
            spec.hidden = config.model.hidden;
            spec.cnn_filters = config.model.cnn_filters;
            spec.dropout = config.model.dropout;
            spec
        })
        .collect()
}

/// Everything federation needs: normalized proxy/train/test splits and
/// per-worker shards.
#[derive(Debug)]
pub struct PreparedData {
    pub split: DatasetSplit,
    pub workers: Vec<WorkerDataset>,
    pub normalizer: Normalizer,
}

/// Trips → motion features → fixed-length segments, in trip order.
pub fn segments_from_trips(
    trips: &[Trip],
    config: &ExperimentConfig,
) -> Result<Vec<FeatureSegment>, PipelineError> {
    let mut segments = Vec::new();
    for trip in trips {
        let features = compute_motion_features(trip)?;
        segments.extend(segment_trip(
            &features,
            &trip.mode,
            config.dataset.seq_len,
            &config.dataset.channels,
        ));
    }
    Ok(segments)
}

/// Splits segments, fits the normalizer on the training pool, normalizes
/// every split, and shards the training pool across workers.
pub fn prepare_from_segments(
    segments: Vec<FeatureSegment>,
    config: &ExperimentConfig,
) -> Result<PreparedData, PipelineError> {
    let mut split = split_dataset(segments, config.seed)?;
    let normalizer = fit_normalizer(&split.train)?;
    for part in [&mut split.proxy, &mut split.train, &mut split.test] {
        for seg in part.iter_mut() {
            apply_normalizer(&normalizer, seg)?;
        }
    }
    let workers = partition_non_iid(
        split.train.clone(),
        config.federation.n_workers,
        config.dataset.modes_per_worker,
        config.seed,
    )?;
    Ok(PreparedData { split, workers, normalizer })
}

/// Synthetic dataset for the config's master seed, ready to federate.
pub fn prepare_dataset(config: &ExperimentConfig) -> Result<PreparedData, PipelineError> {
    let table = kinematics_for_config(config)?;
    let trips = generate_dataset(
        &table,
        config.dataset.trips_per_mode,
        config.dataset.points_per_trip,
        config.seed,
    )?;
    prepare_from_segments(segments_from_trips(&trips, config)?, config)
}

// --- experiment runner ---------------------------------------------------

/// Per-combiner test metrics, in the fixed emission order.
pub const ENSEMBLE_NAMES: [(&str, Combiner); 3] = [
    ("efeddnn_stacked", Combiner::StackedMlp),
    ("efeddnn_softavg", Combiner::SoftAverage),
    ("efeddnn_vote", Combiner::MajorityVote),
];

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleMetrics {
    pub name: String,
    pub test_accuracy: f64,
    pub test_loss: f64,
}

#[derive(Debug)]
pub struct ExperimentOutcome {
    pub state: FederationState,
    /// The configured combiner's full ensemble.
    pub ensemble: EnsembleModel,
    /// Test metrics for all three combiners.
    pub ensemble_metrics: Vec<EnsembleMetrics>,
}

fn checkpoint_path(dir: &Path, arch: Architecture) -> PathBuf {
    dir.join(format!("{}.ckpt", arch.name()))
}

fn save_base_checkpoints(dir: &Path, state: &FederationState) -> Result<(), NnError> {
    for (spec, params) in state.specs.iter().zip(&state.globals) {
        save_checkpoint(&checkpoint_path(dir, spec.architecture), params)?;
    }
    Ok(())
}

/// The full protocol: generate → features → split → partition → federate
/// → ensemble → evaluate, persisting metrics, checkpoints, the fitted
/// normalizer, and a replayable config echo into `out_dir`.
pub fn run_experiment(
    config: &ExperimentConfig,
    out_dir: &Path,
) -> Result<ExperimentOutcome, PipelineError> {
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join(CONFIG_ECHO_FILE), config.to_json_pretty())?;

    let prepared = prepare_dataset(config)?;
    let specs = base_specs(config);

    let interval = config.checkpoint_interval;
    let state = run_federation(
        &config.federation,
        &specs,
        &prepared.workers,
        &prepared.split,
        config.seed,
        |s| {
            if interval > 0 && s.round % interval == 0 {
                save_base_checkpoints(out_dir, s)?;
            }
            Ok(())
        },
    )?;
    save_base_checkpoints(out_dir, &state)?;

    // Stacking: base predictions on the chief's proxy split only.
    let base: Vec<(ModelSpec, ParamSet)> =
        state.specs.iter().copied().zip(state.globals.iter().cloned()).collect();
    let stacked = collect_base_predictions(&base, &prepared.split.proxy)?;
    let (meta_spec, meta) = train_meta_learner(
        &stacked,
        config.model.hidden,
        META_EPOCHS,
        config.federation.local_batch,
        config.federation.chief_lr,
        mix_seed(&[config.seed, stream::META]),
    )?;
    save_checkpoint(&out_dir.join(META_CHECKPOINT), &meta)?;

    let mut ensemble_metrics = Vec::new();
    let mut configured = None;
    for (name, combiner) in ENSEMBLE_NAMES {
        let stacked_combiner = combiner == Combiner::StackedMlp;
        let model = EnsembleModel {
            combiner,
            base: base.clone(),
            meta_spec: stacked_combiner.then_some(meta_spec),
            meta: stacked_combiner.then(|| meta.clone()),
        };
        let (test_accuracy, test_loss) = model.evaluate(&prepared.split.test)?;
        ensemble_metrics.push(EnsembleMetrics { name: name.into(), test_accuracy, test_loss });
        if combiner == config.combiner {
            configured = Some(model);
        }
    }
    let ensemble = configured.expect("every combiner variant is evaluated");

    write_metrics_csv(&out_dir.join(METRICS_FILE), &state, &ensemble_metrics)?;
    fs::write(
        out_dir.join(PREPROCESS_FILE),
        serde_json::to_string_pretty(&prepared.normalizer)
            .expect("normalizer serialization cannot fail"),
    )?;

    Ok(ExperimentOutcome { state, ensemble, ensemble_metrics })
}

/// Base rows per round in architecture order, then one row per ensemble
/// combiner at the final round. Rewriting the same state gives a
/// byte-identical file.
pub fn write_metrics_csv(
    path: &Path,
    state: &FederationState,
    ensemble_metrics: &[EnsembleMetrics],
) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["round", "architecture", "test_accuracy", "test_loss", "n_participants"])?;
    for m in &state.history {
        w.write_record([
            m.round.to_string(),
            m.architecture.name().to_string(),
            m.test_accuracy.to_string(),
            m.test_loss.to_string(),
            m.participants.len().to_string(),
        ])?;
    }
    let final_participants = state.history.last().map_or(0, |m| m.participants.len());
    for em in ensemble_metrics {
        w.write_record([
            state.round.to_string(),
            em.name.clone(),
            em.test_accuracy.to_string(),
            em.test_loss.to_string(),
            final_participants.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `generate`: write the config's synthetic trips (and the config echo)
/// to `out_dir`; returns the CSV path.
pub fn run_generate(config: &ExperimentConfig, out_dir: &Path) -> Result<PathBuf, PipelineError> {
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join(CONFIG_ECHO_FILE), config.to_json_pretty())?;
    let table = kinematics_for_config(config)?;
    let trips = generate_dataset(
        &table,
        config.dataset.trips_per_mode,
        config.dataset.points_per_trip,
        config.seed,
    )?;
    let path = out_dir.join(TRIPS_FILE);
    write_trips_csv(&path, &trips)?;
    Ok(path)
}

/// One model's held-out metrics from an `evaluate` run.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub name: String,
    pub accuracy: f64,
    pub loss: f64,
}

/// `evaluate`: score checkpointed models against a labeled trips CSV.
/// The checkpoint directory must hold a run's `config.echo.json`,
/// `preprocess.json`, and model checkpoints; features are normalized with
/// the run's saved statistics, never refitted.
pub fn run_evaluate(checkpoint_dir: &Path, data: &Path) -> Result<Vec<EvalRow>, PipelineError> {
    // A missing or corrupted checkpoint directory is a runtime condition, not a
    // config mistake, so it must not surface as a config error (exit code 1).
    let config =
        crate::config::load_config(checkpoint_dir.join(CONFIG_ECHO_FILE)).map_err(|e| {
            PipelineError::Data(format!("checkpoint dir {}: {e}", checkpoint_dir.display()))
        })?;
    let normalizer: Normalizer =
        serde_json::from_str(&fs::read_to_string(checkpoint_dir.join(PREPROCESS_FILE))?)
            .map_err(|e| PipelineError::Data(format!("preprocess.json: {e}")))?;

    let trips = read_trips_csv(data, &config.dataset.class_names)?;
    let mut segments = segments_from_trips(&trips, &config)?;
    for seg in segments.iter_mut() {
        apply_normalizer(&normalizer, seg)?;
    }

    let mut base = Vec::new();
    let mut rows = Vec::new();
    for spec in base_specs(&config) {
        let params = load_checkpoint(&checkpoint_path(checkpoint_dir, spec.architecture))?;
        let skeleton = build_model(&spec, 0)?;
        if !params.layout_matches(&skeleton) {
            return Err(PipelineError::Data(format!(
                "checkpoint for {} does not match the configured architecture",
                spec.architecture.name()
            )));
        }
        let (accuracy, loss) = evaluate(&params, &spec, &segments)?;
        rows.push(EvalRow { name: spec.architecture.name().into(), accuracy, loss });
        base.push((spec, params));
    }

    let meta_spec = crate::ensemble::meta_spec(base.len(), config.n_classes(), config.model.hidden);
    let meta = load_checkpoint(&checkpoint_dir.join(META_CHECKPOINT))?;
    for (name, combiner) in ENSEMBLE_NAMES {
        let stacked_combiner = combiner == Combiner::StackedMlp;
        let model = EnsembleModel {
            combiner,
            base: base.clone(),
            meta_spec: stacked_combiner.then_some(meta_spec),
            meta: stacked_combiner.then(|| meta.clone()),
        };
        let (accuracy, loss) = model.evaluate(&segments)?;
        rows.push(EvalRow { name: name.into(), accuracy, loss });
    }
    Ok(rows)
}
