//! Chief/worker federated training: broadcast, local updates, weighted
//! model averaging, optional server-side optimizer, per-round evaluation.
//!
//! The chief never sees raw worker data — aggregation consumes only
//! (parameters, sample-count) pairs. Worker-shard reads are counted so an
//! instrumented run can prove the point (see [`foreign_data_reads`]).

use std::cell::Cell;
use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{
    build_model, evaluate, train_local, AdamState, Architecture, ModelSpec, NnError, ParamSet,
    Tensor,
};
use crate::rng::{mix_seed, rng_from, stream};
use crate::synth::{DatasetSplit, WorkerDataset};

#[derive(Debug, Error)]
pub enum FedError {
    #[error("no updates to aggregate")]
    EmptyUpdateList,
    #[error("parameter layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("invalid federation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// How worker updates become the new global model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Weighted parameter mean becomes the global model directly.
    PlainFedavg,
    /// The mean is fed to a chief-side Adam as a pseudo-gradient.
    ServerAdam,
}

/// Which workers train which base architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchAssignment {
    /// Every worker trains all base architectures each round.
    Replicated,
    /// Workers are split into fixed contiguous groups, one architecture
    /// per group (4/3/3 for 10 workers and 3 architectures).
    Partitioned,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    pub n_workers: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub local_batch: usize,
    pub worker_lr: f64,
    pub chief_lr: f64,
    pub aggregation: Aggregation,
    pub architecture_assignment: ArchAssignment,
    pub client_fraction: f64,
    /// Seed the global models with one epoch of training on the chief's
    /// proxy set before round 1.
    pub pretrain_proxy: bool,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            n_workers: 10,
            rounds: 20,
            local_epochs: 10,
            local_batch: 30,
            worker_lr: 0.0005,
            chief_lr: 0.001,
            aggregation: Aggregation::PlainFedavg,
            architecture_assignment: ArchAssignment::Replicated,
            client_fraction: 1.0,
            pretrain_proxy: true,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<(), FedError> {
        let bad = |m: String| Err(FedError::InvalidConfig(m));
        if self.n_workers < 1 {
            return bad("n_workers must be at least 1".into());
        }
        if self.rounds < 1 {
            return bad("rounds must be at least 1".into());
        }
        if self.local_batch < 1 {
            return bad("local_batch must be at least 1".into());
        }
        if !(self.client_fraction > 0.0 && self.client_fraction <= 1.0) {
            return bad(format!("client_fraction {} outside (0, 1]", self.client_fraction));
        }
        for (name, lr) in [("worker_lr", self.worker_lr), ("chief_lr", self.chief_lr)] {
            if !(lr.is_finite() && lr >= 0.0) {
                return bad(format!("{name} {lr} must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

/// Test accuracy/loss of one architecture's global model after one round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    /// 1-based communication round.
    pub round: usize,
    pub architecture: Architecture,
    pub test_accuracy: f64,
    pub test_loss: f64,
    /// Workers whose updates entered this round's aggregate, ascending.
    pub participants: Vec<usize>,
}

/// Chief-side state: one global model per base architecture plus the
/// metric history.
#[derive(Debug)]
pub struct FederationState {
    pub specs: Vec<ModelSpec>,
    pub globals: Vec<ParamSet>,
    /// Chief optimizer state, present only under server_adam.
    pub chief_adam: Vec<Option<AdamState>>,
    /// Rounds completed so far.
    pub round: usize,
    /// One entry per (round, architecture), round-major, architectures in
    /// `specs` order.
    pub history: Vec<RoundMetrics>,
}

// --- data-locality instrumentation ------------------------------------

thread_local! {
    static IN_WORKER_SCOPE: Cell<bool> = const { Cell::new(false) };
}
static FOREIGN_READS: AtomicU64 = AtomicU64::new(0);

/// Called by [`WorkerDataset::segments`]; counts reads that happen
/// outside any worker's local training scope.
pub(crate) fn note_worker_data_access() {
    if !IN_WORKER_SCOPE.with(Cell::get) {
        FOREIGN_READS.fetch_add(1, Ordering::Relaxed);
    }
}

/// Process-wide count of worker-shard reads made outside local training.
/// A correctly wired experiment leaves this at zero.
pub fn foreign_data_reads() -> u64 {
    FOREIGN_READS.load(Ordering::Relaxed)
}

pub fn reset_foreign_data_reads() {
    FOREIGN_READS.store(0, Ordering::Relaxed);
}

/// RAII marker: worker-shard reads on this thread are local while alive.
/// [`local_round`] enters it automatically; code that trains on a worker's
/// shard through some other path (e.g. a centralized baseline over the same
/// data) must enter it explicitly to keep read attribution honest.
pub struct WorkerScope {
    prev: bool,
}

impl WorkerScope {
    pub fn enter() -> Self {
        let prev = IN_WORKER_SCOPE.with(|f| f.replace(true));
        Self { prev }
    }
}

impl Drop for WorkerScope {
    fn drop(&mut self) {
        let prev = self.prev;
        IN_WORKER_SCOPE.with(|f| f.set(prev));
    }
}

// --- round mechanics ---------------------------------------------------

/// The ids participating in one round: ceil(client_fraction · n) distinct
/// workers, uniform without replacement, ascending, deterministic per
/// (round, seed).
pub fn select_workers(round: usize, config: &FederationConfig, master_seed: u64) -> Vec<usize> {
    let n = config.n_workers;
    let k = ((config.client_fraction * n as f64).ceil() as usize).clamp(1, n);
    let mut rng = rng_from(&[master_seed, stream::SELECT, round as u64]);
    let mut ids = rand::seq::index::sample(&mut rng, n, k).into_vec();
    ids.sort_unstable();
    ids
}

/// Value-identical, independently owned parameter copies for each
/// selected worker.
pub fn broadcast(global: &ParamSet, workers: &[usize]) -> Vec<ParamSet> {
    workers.iter().map(|_| global.clone()).collect()
}

/// Deterministic per-worker training seed for one round of one
/// architecture.
pub fn local_seed(master_seed: u64, round: usize, arch_index: usize, worker_id: usize) -> u64 {
    mix_seed(&[master_seed, stream::LOCAL, round as u64, arch_index as u64, worker_id as u64])
}

/// One worker's local contribution: E epochs of minibatch Adam from the
/// broadcast parameters, with optimizer state fresh each round. Returns
/// the updated parameters and the worker's sample count for weighting.
pub fn local_round(
    worker: &WorkerDataset,
    params: &ParamSet,
    spec: &ModelSpec,
    config: &FederationConfig,
    rng_seed: u64,
) -> Result<(ParamSet, usize), FedError> {
    let _scope = WorkerScope::enter();
    let (updated, n) = train_local(
        params,
        spec,
        worker.segments(),
        config.local_epochs,
        config.local_batch,
        config.worker_lr,
        rng_seed,
    )?;
    Ok((updated, n))
}

/// Coordinate-wise weighted mean of worker updates, weights n_k / Σn.
/// Callers pass updates in ascending worker-id order; summation follows
/// that order so results are reproducible under parallel training.
pub fn fedavg_aggregate(updates: &[(ParamSet, usize)]) -> Result<ParamSet, FedError> {
    let (first, _) = updates.first().ok_or(FedError::EmptyUpdateList)?;
    for (p, _) in updates {
        if !p.layout_matches(first) {
            return Err(FedError::LayoutMismatch("updates disagree on parameter layout".into()));
        }
    }
    if updates.len() == 1 {
        return Ok(first.clone());
    }

    let total: usize = updates.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(FedError::EmptyUpdateList);
    }
    let mut out = first.clone();
    for t in out.tensors_mut() {
        t.data_mut().fill(0.0);
    }
    for (params, n) in updates {
        let w = *n as f64 / total as f64;
        for (acc, src) in out.tensors_mut().zip(params.tensors()) {
            for (a, x) in acc.data_mut().iter_mut().zip(src.data()) {
                *a += w * x;
            }
        }
    }
    Ok(out)
}

/// Chief-side optimizer step: the aggregate is consumed as a
/// pseudo-gradient g = global − aggregate and applied through the
/// persistent chief Adam state.
pub fn server_apply(
    global: &mut ParamSet,
    aggregate: &ParamSet,
    chief_adam: &mut AdamState,
) -> Result<(), FedError> {
    if !global.layout_matches(aggregate) {
        return Err(FedError::LayoutMismatch("aggregate does not match global layout".into()));
    }
    let grads: Vec<Tensor> = global
        .tensors()
        .zip(aggregate.tensors())
        .map(|(g, a)| {
            let data = g.data().iter().zip(a.data()).map(|(g, a)| g - a).collect();
            Tensor::from_vec(g.shape().0, g.shape().1, data)
        })
        .collect();
    chief_adam.step(global, &grads)?;
    Ok(())
}

/// Worker ids assigned to one architecture. Replicated: everyone.
/// Partitioned: fixed contiguous blocks, the first (n mod groups) blocks
/// one larger — 10 workers over 3 architectures gives 4/3/3.
pub fn architecture_group(
    assignment: ArchAssignment,
    n_workers: usize,
    arch_index: usize,
    n_architectures: usize,
) -> std::ops::Range<usize> {
    match assignment {
        ArchAssignment::Replicated => 0..n_workers,
        ArchAssignment::Partitioned => {
            let base = n_workers / n_architectures;
            let extra = n_workers % n_architectures;
            let start = arch_index * base + arch_index.min(extra);
            let len = base + usize::from(arch_index < extra);
            start..start + len
        }
    }
}

/// The full synchronous loop: T rounds of select → broadcast → local
/// training → weighted averaging → apply → test-set evaluation, run
/// independently for every base architecture. `on_round` fires after each
/// round (checkpointing hook).
pub fn run_federation(
    config: &FederationConfig,
    specs: &[ModelSpec],
    workers: &[WorkerDataset],
    split: &DatasetSplit,
    master_seed: u64,
    mut on_round: impl FnMut(&FederationState) -> Result<(), FedError>,
) -> Result<FederationState, FedError> {
    config.validate()?;
    if workers.len() != config.n_workers {
        return Err(FedError::InvalidConfig(format!(
            "config names {} workers but {} datasets were provided",
            config.n_workers,
            workers.len()
        )));
    }
    if specs.is_empty() {
        return Err(FedError::InvalidConfig("no architectures to federate".into()));
    }

    // Initial globals: seeded per architecture, optionally warmed for one
    // epoch on the chief's proxy data.
    let mut globals = Vec::with_capacity(specs.len());
    for (ai, spec) in specs.iter().enumerate() {
        let mut params = build_model(spec, mix_seed(&[master_seed, stream::INIT, ai as u64, 0]))?;
        if config.pretrain_proxy && !split.proxy.is_empty() {
            let seed = mix_seed(&[master_seed, stream::INIT, ai as u64, 1]);
            (params, _) = train_local(
                &params,
                spec,
                &split.proxy,
                1,
                config.local_batch,
                config.chief_lr,
                seed,
            )?;
        }
        globals.push(params);
    }

    let chief_adam = specs
        .iter()
        .zip(&globals)
        .map(|(_, g)| match config.aggregation {
            Aggregation::ServerAdam => Some(AdamState::new(g, config.chief_lr)),
            Aggregation::PlainFedavg => None,
        })
        .collect();

    let mut state = FederationState {
        specs: specs.to_vec(),
        globals,
        chief_adam,
        round: 0,
        history: Vec::with_capacity(config.rounds * specs.len()),
    };

    for round in 0..config.rounds {
        let selected = select_workers(round, config, master_seed);

        // Participants per architecture: the round's selection restricted
        // to the architecture's worker group, ascending.
        let participants: Vec<Vec<usize>> = (0..specs.len())
            .map(|ai| {
                let group = architecture_group(
                    config.architecture_assignment,
                    workers.len(),
                    ai,
                    specs.len(),
                );
                selected.iter().copied().filter(|w| group.contains(w)).collect()
            })
            .collect();

        // All (architecture, worker) tasks run in parallel; results are
        // keyed so aggregation order never depends on scheduling.
        let tasks: Vec<(usize, usize)> = participants
            .iter()
            .enumerate()
            .flat_map(|(ai, ws)| ws.iter().map(move |&w| (ai, w)))
            .collect();
        let mut results: Vec<((usize, usize), (ParamSet, usize))> = tasks
            .into_par_iter()
            .map(|(ai, w)| {
                let update = local_round(
                    &workers[w],
                    &state.globals[ai],
                    &state.specs[ai],
                    config,
                    local_seed(master_seed, round, ai, w),
                )?;
                Ok(((ai, w), update))
            })
            .collect::<Result<_, FedError>>()?;
        results.sort_by_key(|(key, _)| *key);

        for (ai, ws) in participants.iter().enumerate() {
            let updates: Vec<(ParamSet, usize)> =
                results.iter().filter(|((a, _), _)| *a == ai).map(|(_, u)| u.clone()).collect();
            if !updates.is_empty() {
                let aggregate = fedavg_aggregate(&updates)?;
                match state.chief_adam[ai].as_mut() {
                    Some(adam) => server_apply(&mut state.globals[ai], &aggregate, adam)?,
                    None => state.globals[ai] = aggregate,
                }
            }
            let (acc, loss) = evaluate(&state.globals[ai], &state.specs[ai], &split.test)?;
            state.history.push(RoundMetrics {
                round: round + 1,
                architecture: state.specs[ai].architecture,
                test_accuracy: acc,
                test_loss: loss,
                participants: ws.clone(),
            });
        }

        state.round = round + 1;
        on_round(&state)?;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{FeatureSegment, ModeLabel};
    use crate::rng::rng_from;
    use rand::Rng;

    fn seg(class: usize, rng: &mut impl Rng) -> FeatureSegment {
        // Class-separated 2-channel toy data, already "normalized".
        let data: Vec<f64> = (0..8).map(|_| class as f64 + rng.random_range(-0.3..0.3)).collect();
        FeatureSegment::new(data, 2, 4, 4, ModeLabel::new(class, format!("m{class}")))
    }

    fn toy_split(n_per_class: usize, seed: u64) -> (Vec<FeatureSegment>, DatasetSplit) {
        let mut rng = rng_from(&[seed]);
        let mut all = Vec::new();
        for class in 0..3 {
            for _ in 0..n_per_class {
                all.push(seg(class, &mut rng));
            }
        }
        let split = crate::synth::split_dataset(all.clone(), seed).unwrap();
        (all, split)
    }

    fn mlp_spec() -> ModelSpec {
        let mut s = ModelSpec::new(Architecture::Mlp, 2, 4, 3);
        s.hidden = 8;
        s
    }

    fn params_of(values: &[f64]) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("w", Tensor::from_vec(1, values.len(), values.to_vec()));
        p
    }

    #[test]
    fn selection_is_deterministic_and_well_formed() {
        let mut config = FederationConfig::default();
        assert_eq!(select_workers(0, &config, 9), vec![0, 1, 2, 3, 4, 5, 6, 7, 8, 9]);

        config.client_fraction = 0.5;
        let a = select_workers(3, &config, 9);
        assert_eq!(a, select_workers(3, &config, 9));
        assert_eq!(a.len(), 5);
        assert!(a.windows(2).all(|w| w[0] < w[1]), "ids must ascend: {a:?}");
        assert!(a.iter().all(|&w| w < 10));
        assert_ne!(a, select_workers(4, &config, 9), "rounds draw fresh selections");
    }

    #[test]
    fn broadcast_copies_are_independent() {
        let global = params_of(&[1.0, 2.0]);
        let mut copies = broadcast(&global, &[0, 1, 2]);
        assert_eq!(copies.len(), 3);
        assert!(copies.iter().all(|c| c.bits_eq(&global)));
        copies[0].tensors_mut().next().unwrap().data_mut()[0] = 99.0;
        assert!(copies[1].bits_eq(&global), "sibling copy mutated");
        assert_eq!(global.get("w").unwrap().data()[0], 1.0, "global mutated");
        assert!(broadcast(&global, &[]).is_empty());
    }

    #[test]
    fn aggregate_weighted_mean_and_identity() {
        let single = [(params_of(&[2.0, -0.0]), 7)];
        assert!(fedavg_aggregate(&single).unwrap().bits_eq(&single[0].0));

        let updates = [(params_of(&[2.0]), 1), (params_of(&[4.0]), 3)];
        let agg = fedavg_aggregate(&updates).unwrap();
        assert_eq!(agg.get("w").unwrap().data(), &[3.5]);

        assert!(matches!(fedavg_aggregate(&[]), Err(FedError::EmptyUpdateList)));
        let mut other_layout = ParamSet::new();
        other_layout.push("v", Tensor::zeros(1, 1));
        assert!(matches!(
            fedavg_aggregate(&[(params_of(&[1.0]), 1), (other_layout, 1)]),
            Err(FedError::LayoutMismatch(_))
        ));
    }

    #[test]
    fn aggregate_scale_equivariant_and_order_fixed() {
        let updates: Vec<(ParamSet, usize)> =
            (0..4).map(|i| (params_of(&[i as f64, 1.0 / (i + 1) as f64]), i + 1)).collect();
        let scaled: Vec<(ParamSet, usize)> =
            updates.iter().map(|(p, n)| (p.clone(), n * 17)).collect();
        let a = fedavg_aggregate(&updates).unwrap();
        let b = fedavg_aggregate(&scaled).unwrap();
        assert!(a.bits_eq(&b), "weights n_k/Σn are scale-free");

        // Sorting by worker id before summation makes the result
        // independent of completion order.
        let mut shuffled = updates.clone();
        shuffled.swap(0, 3);
        shuffled.swap(1, 2);
        shuffled.sort_by_key(|(_, n)| *n);
        let c = fedavg_aggregate(&shuffled).unwrap();
        assert!(a.bits_eq(&c));
    }

    #[test]
    fn aggregate_idempotent_on_identical_updates() {
        let p = params_of(&[0.25, -3.5, 1e-9]);
        let updates = vec![(p.clone(), 5), (p.clone(), 2), (p.clone(), 9)];
        let agg = fedavg_aggregate(&updates).unwrap();
        for (got, want) in agg.tensors().zip(p.tensors()) {
            for (g, w) in got.data().iter().zip(want.data()) {
                approx::assert_abs_diff_eq!(g, w, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn server_apply_zero_gradient_and_first_step() {
        let mut global = params_of(&[1.0]);
        let mut adam = AdamState::new(&global, 0.001);
        let aggregate = global.clone();
        server_apply(&mut global, &aggregate, &mut adam).unwrap();
        assert!(global.bits_eq(&aggregate), "zero pseudo-gradient must not move params");

        let mut global = params_of(&[1.0]);
        let mut adam = AdamState::new(&global, 0.001);
        server_apply(&mut global, &params_of(&[0.0]), &mut adam).unwrap();
        approx::assert_abs_diff_eq!(global.get("w").unwrap().data()[0], 0.999, epsilon = 1e-9);
    }

    #[test]
    fn partitioned_groups_are_contiguous_and_sized() {
        let groups: Vec<_> =
            (0..3).map(|ai| architecture_group(ArchAssignment::Partitioned, 10, ai, 3)).collect();
        assert_eq!(groups, vec![0..4, 4..7, 7..10]);
        for ai in 0..3 {
            assert_eq!(architecture_group(ArchAssignment::Replicated, 10, ai, 3), 0..10);
        }
        let even: Vec<_> =
            (0..3).map(|ai| architecture_group(ArchAssignment::Partitioned, 9, ai, 3)).collect();
        assert_eq!(even, vec![0..3, 3..6, 6..9]);
    }

    #[test]
    fn single_worker_federation_degenerates_to_centralized() {
        let (_, split) = toy_split(30, 11);
        let spec = mlp_spec();
        let config = FederationConfig {
            n_workers: 1,
            rounds: 3,
            local_epochs: 2,
            local_batch: 8,
            pretrain_proxy: false,
            ..FederationConfig::default()
        };
        let shard = split.train.clone();
        let workers = vec![WorkerDataset::new(0, shard.clone())];
        let state = run_federation(&config, &[spec], &workers, &split, 77, |_| Ok(())).unwrap();

        let mut central = build_model(&spec, mix_seed(&[77, stream::INIT, 0, 0])).unwrap();
        for round in 0..config.rounds {
            (central, _) = train_local(
                &central,
                &spec,
                &shard,
                config.local_epochs,
                config.local_batch,
                config.worker_lr,
                local_seed(77, round, 0, 0),
            )
            .unwrap();
        }
        assert!(state.globals[0].bits_eq(&central), "single-worker FedAvg must be exact");
    }

    #[test]
    fn federation_learns_and_is_deterministic() {
        let (_, split) = toy_split(40, 5);
        let spec = mlp_spec();
        let config = FederationConfig {
            n_workers: 3,
            rounds: 20,
            local_epochs: 3,
            local_batch: 10,
            worker_lr: 0.01,
            ..FederationConfig::default()
        };
        let workers = crate::synth::partition_non_iid(split.train.clone(), 3, 2, 5).unwrap();
        let run =
            |seed| run_federation(&config, &[spec], &workers, &split, seed, |_| Ok(())).unwrap();
        let a = run(123);
        let b = run(123);
        assert!(a.globals[0].bits_eq(&b.globals[0]));
        assert_eq!(a.history.len(), 20);
        let last = a.history.last().unwrap();
        assert_eq!(last.participants, vec![0, 1, 2]);
        assert!(last.test_accuracy > 0.8, "toy task should be learned: {}", last.test_accuracy);
        assert!(a.history[0].test_accuracy <= last.test_accuracy + 0.2);
    }

    #[test]
    fn replicated_and_partitioned_groups_differ() {
        let (_, split) = toy_split(40, 6);
        let specs = vec![mlp_spec(), mlp_spec()];
        let mut config = FederationConfig {
            n_workers: 4,
            rounds: 1,
            local_epochs: 1,
            local_batch: 16,
            ..FederationConfig::default()
        };
        let workers = crate::synth::partition_non_iid(split.train.clone(), 4, 3, 6).unwrap();

        let state = run_federation(&config, &specs, &workers, &split, 1, |_| Ok(())).unwrap();
        assert!(state.history.iter().all(|m| m.participants == vec![0, 1, 2, 3]));

        config.architecture_assignment = ArchAssignment::Partitioned;
        let state = run_federation(&config, &specs, &workers, &split, 1, |_| Ok(())).unwrap();
        assert_eq!(state.history[0].participants, vec![0, 1]);
        assert_eq!(state.history[1].participants, vec![2, 3]);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let ok = FederationConfig::default();
        ok.validate().unwrap();
        for bad in [
            FederationConfig { rounds: 0, ..ok },
            FederationConfig { n_workers: 0, ..ok },
            FederationConfig { client_fraction: 0.0, ..ok },
            FederationConfig { client_fraction: 1.5, ..ok },
            FederationConfig { worker_lr: f64::NAN, ..ok },
            FederationConfig { local_batch: 0, ..ok },
        ] {
            assert!(bad.validate().is_err(), "{bad:?} should be rejected");
        }
    }
}
