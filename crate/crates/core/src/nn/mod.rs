//! Neural network core: tensors, a reverse-mode autodiff tape, the four
//! architectures (MLP, LSTM, GRU, 1-D CNN), Adam, local training, gradient
//! checking, and bit-exact checkpoints. All arithmetic is 64-bit.

mod adam;
mod checkpoint;
mod gradcheck;
mod model;
mod params;
mod tape;
mod tensor;

use thiserror::Error;

pub use adam::{AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use gradcheck::{
    grad_check, grad_check_vectors, gradcheck_specs, max_normalized_error, FD_STEP,
    GRADCHECK_SEEDS, PASS_THRESHOLD,
};
pub use model::{
    build_model, evaluate, forward_model, train_local, Architecture, ModelSpec, CONV_KERNEL,
    CONV_STRIDE,
};
pub use params::ParamSet;
pub use tape::{
    argmax_rows, cross_entropy_from_probs, softmax_rows, Gradients, NodeId, Tape, PROB_FLOOR,
};
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("numerical error: {0}")]
    NumericalError(String),
    #[error("stride must be >= 1, got {0}")]
    InvalidStride(usize),
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{FeatureSegment, ModeLabel};
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_spec(arch: Architecture) -> ModelSpec {
        let mut spec = ModelSpec::new(arch, 2, 6, 3);
        spec.hidden = 5;
        spec.cnn_filters = 3;
        spec
    }

    /// Random fully-valid segments with the given label set.
    fn toy_segments(spec: &ModelSpec, n: usize, seed: u64) -> Vec<FeatureSegment> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let class = i % spec.n_classes;
                // Class-dependent offset makes the set separable.
                let data: Vec<f64> = (0..spec.input_channels * spec.seq_len)
                    .map(|_| rng.random_range(-0.5..0.5) + class as f64)
                    .collect();
                FeatureSegment::new(
                    data,
                    spec.input_channels,
                    spec.seq_len,
                    spec.seq_len,
                    ModeLabel::new(class, format!("mode{class}")),
                )
            })
            .collect()
    }

    #[test]
    fn build_is_deterministic_and_seed_changes_values() {
        for arch in [Architecture::Mlp, Architecture::Lstm, Architecture::Gru, Architecture::Cnn1d]
        {
            let spec = small_spec(arch);
            let a = build_model(&spec, 7).unwrap();
            let b = build_model(&spec, 7).unwrap();
            assert!(a.bits_eq(&b), "{arch}");
            let c = build_model(&spec, 8).unwrap();
            assert!(a.layout_matches(&c), "{arch}");
            assert!(!a.bits_eq(&c), "{arch}");
        }
    }

    #[test]
    fn parameter_count_is_seed_independent() {
        for arch in [Architecture::Mlp, Architecture::Lstm, Architecture::Gru, Architecture::Cnn1d]
        {
            let spec = small_spec(arch);
            let counts: Vec<usize> =
                (0..4).map(|s| build_model(&spec, s).unwrap().n_scalars()).collect();
            assert!(counts.windows(2).all(|w| w[0] == w[1]), "{arch}: {counts:?}");
        }
    }

    #[test]
    fn mlp_head_width_matches_flattened_segment() {
        let spec = ModelSpec::new(Architecture::Mlp, 4, 10, 4);
        let p = build_model(&spec, 1).unwrap();
        assert_eq!(p.get("head.fc1.w").unwrap().shape(), (40, 64));
    }

    #[test]
    fn cnn_body_width_is_filters_plus_channels_after_pooling() {
        let spec = ModelSpec::new(Architecture::Cnn1d, 4, 10, 4);
        // Two kernel-3 stride-1 valid convolutions (10 -> 8 -> 6 columns),
        // then mean pooling over the 6 positions leaves one value per filter,
        // plus one input mean per channel.
        assert_eq!(spec.body_width(), 36);
        let p = build_model(&spec, 1).unwrap();
        assert_eq!(p.get("head.fc1.w").unwrap().shape(), (36, 64));
    }

    #[test]
    fn lstm_zero_params_zero_state() {
        // With all parameters zero, gates are 0.5 and the candidate is 0,
        // so both the cell and hidden state stay exactly 0.
        let spec = small_spec(Architecture::Lstm);
        let mut p = build_model(&spec, 3).unwrap();
        for t in p.tensors_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let segs = toy_segments(&spec, 2, 5);
        let probs = forward_model(&p, &spec, &segs).unwrap();
        // Head is all zero too: logits 0, probabilities uniform.
        for i in 0..2 {
            for j in 0..spec.n_classes {
                assert_abs_diff_eq!(probs.get(i, j), 1.0 / 3.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn lstm_saturated_forget_gate_preserves_cell() {
        // b_f = 50 saturates the forget gate to 1 within 1e-12; with input
        // gate at sigma(0) = 0.5 and candidate tanh(0) = 0 the cell passes
        // through unchanged. Exercised via the cell equations directly.
        let mut tape = Tape::new();
        let c_prev = tape.leaf(Tensor::from_vec(1, 2, vec![0.3, -0.7]));
        let f_pre = tape.leaf(Tensor::from_vec(1, 2, vec![50.0, 50.0]));
        let i_pre = tape.leaf(Tensor::zeros(1, 2));
        let g_pre = tape.leaf(Tensor::zeros(1, 2));
        let f = tape.sigmoid(f_pre);
        let i = tape.sigmoid(i_pre);
        let g = tape.tanh(g_pre);
        let fc = tape.mul(f, c_prev).unwrap();
        let ig = tape.mul(i, g).unwrap();
        let c_t = tape.add(fc, ig).unwrap();
        assert_abs_diff_eq!(tape.value(c_t).get(0, 0), 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(tape.value(c_t).get(0, 1), -0.7, epsilon = 1e-12);
    }

    #[test]
    fn gru_zero_params_halves_hidden_state() {
        // z = sigma(0) = 0.5 and candidate tanh(0) = 0, so one step maps
        // h to 0.5 h. Exercised via the cell equations directly.
        let mut tape = Tape::new();
        let h_prev = tape.leaf(Tensor::from_vec(1, 3, vec![0.4, -1.0, 2.0]));
        let z_pre = tape.leaf(Tensor::zeros(1, 3));
        let cand = tape.leaf(Tensor::zeros(1, 3)); // tanh of zero preactivation
        let z = tape.sigmoid(z_pre);
        let diff = tape.sub(cand, h_prev).unwrap();
        let step = tape.mul(z, diff).unwrap();
        let h_t = tape.add(h_prev, step).unwrap();
        assert_eq!(tape.value(h_t).data(), &[0.2, -0.5, 1.0]);
    }

    #[test]
    fn forward_rows_sum_to_one_and_are_batch_independent() {
        for arch in [Architecture::Mlp, Architecture::Lstm, Architecture::Gru, Architecture::Cnn1d]
        {
            let spec = small_spec(arch);
            let p = build_model(&spec, 42).unwrap();
            let mut segs = toy_segments(&spec, 6, 9);
            // Duplicate a row to check identical inputs give identical outputs.
            segs[3] = segs[0].clone();
            let probs = forward_model(&p, &spec, &segs).unwrap();
            for i in 0..segs.len() {
                let s: f64 = probs.row(i).iter().sum();
                assert_abs_diff_eq!(s, 1.0, epsilon = 1e-9);
            }
            assert_eq!(probs.row(0), probs.row(3), "{arch}: duplicate inputs diverged");

            // Permuting the batch permutes outputs identically.
            let perm: Vec<FeatureSegment> = segs.iter().rev().cloned().collect();
            let probs_rev = forward_model(&p, &spec, &perm).unwrap();
            for i in 0..segs.len() {
                assert_eq!(probs.row(i), probs_rev.row(segs.len() - 1 - i), "{arch}");
            }
        }
    }

    #[test]
    fn train_zero_epochs_returns_params_unchanged() {
        let spec = small_spec(Architecture::Gru);
        let p = build_model(&spec, 1).unwrap();
        let segs = toy_segments(&spec, 8, 2);
        let (q, n) = train_local(&p, &spec, &segs, 0, 4, 0.001, 99).unwrap();
        assert_eq!(n, 8);
        assert!(p.bits_eq(&q));
    }

    #[test]
    fn train_zero_lr_is_bitwise_noop() {
        let spec = small_spec(Architecture::Lstm);
        let p = build_model(&spec, 1).unwrap();
        let segs = toy_segments(&spec, 8, 2);
        let (q, _) = train_local(&p, &spec, &segs, 2, 4, 0.0, 99).unwrap();
        assert!(p.bits_eq(&q));
    }

    #[test]
    fn training_reduces_loss_on_separable_data() {
        for arch in [Architecture::Mlp, Architecture::Lstm, Architecture::Gru, Architecture::Cnn1d]
        {
            let spec = small_spec(arch);
            let p = build_model(&spec, 5).unwrap();
            let segs = toy_segments(&spec, 30, 77);
            let (_, loss_before) = evaluate(&p, &spec, &segs).unwrap();
            let (trained, _) = train_local(&p, &spec, &segs, 10, 10, 0.005, 11).unwrap();
            let (_, loss_after) = evaluate(&trained, &spec, &segs).unwrap();
            assert!(loss_after < loss_before, "{arch}: {loss_before} -> {loss_after}");
        }
    }

    #[test]
    fn training_is_deterministic() {
        let spec = small_spec(Architecture::Cnn1d);
        let p = build_model(&spec, 5).unwrap();
        let segs = toy_segments(&spec, 16, 3);
        let (a, _) = train_local(&p, &spec, &segs, 3, 5, 0.01, 42).unwrap();
        let (b, _) = train_local(&p, &spec, &segs, 3, 5, 0.01, 42).unwrap();
        assert!(a.bits_eq(&b));
        let (c, _) = train_local(&p, &spec, &segs, 3, 5, 0.01, 43).unwrap();
        assert!(!a.bits_eq(&c), "different shuffling seeds should diverge");
    }

    #[test]
    fn train_empty_dataset_is_an_error() {
        let spec = small_spec(Architecture::Mlp);
        let p = build_model(&spec, 1).unwrap();
        assert!(matches!(train_local(&p, &spec, &[], 1, 4, 0.01, 0), Err(NnError::EmptyDataset)));
    }

    #[test]
    fn dropout_training_still_learns_and_is_seeded() {
        let mut spec = small_spec(Architecture::Mlp);
        spec.dropout = 0.3;
        let p = build_model(&spec, 5).unwrap();
        let segs = toy_segments(&spec, 24, 8);
        let (a, _) = train_local(&p, &spec, &segs, 4, 8, 0.005, 21).unwrap();
        let (b, _) = train_local(&p, &spec, &segs, 4, 8, 0.005, 21).unwrap();
        assert!(a.bits_eq(&b), "dropout masks must be seed-deterministic");
        // Inference ignores dropout: probabilities are mask-free and stable.
        let p1 = forward_model(&a, &spec, &segs).unwrap();
        let p2 = forward_model(&a, &spec, &segs).unwrap();
        assert!(p1.bits_eq(&p2));
    }

    #[test]
    fn untrained_accuracy_is_near_chance() {
        let spec = ModelSpec::new(Architecture::Mlp, 4, 10, 4);
        let mut balanced = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for i in 0..400 {
            let class = i % 4;
            let data: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
            balanced.push(FeatureSegment::new(
                data,
                4,
                10,
                10,
                ModeLabel::new(class, format!("m{class}")),
            ));
        }
        let p = build_model(&spec, 7).unwrap();
        let (acc, _) = evaluate(&p, &spec, &balanced).unwrap();
        assert!((acc - 0.25).abs() < 0.1, "chance-level accuracy expected, got {acc}");
    }
}
