//! Generators shared by the format tests and the acceptance run.

#![allow(dead_code)]

use proptest::collection::vec;
use proptest::prelude::*;
use tridira_core::data::FeatureSequence;
use tridira_core::optim::{AdamW, Moments};
use tridira_core::trainer::{Checkpoint, RngState, Stage};
use tridira_core::{Matrix, Modality, ParamStore};

fn modality() -> impl Strategy<Value = Modality> {
    prop_oneof![Just(Modality::Text), Just(Modality::Audio), Just(Modality::Visual)]
}

/// Any finite `f32`, including subnormals and negative zero, widened to `f64`.
pub fn f32_value() -> impl Strategy<Value = f64> {
    any::<u32>().prop_map(f32::from_bits).prop_filter("finite", |v| v.is_finite()).prop_map(f64::from)
}

pub fn sequence() -> impl Strategy<Value = FeatureSequence> {
    (modality(), 1usize..12, 1usize..10).prop_flat_map(|(m, tau, dim)| {
        (vec(f32_value(), tau * dim), vec(any::<bool>(), tau), 0..tau).prop_map(move |(values, mut mask, forced)| {
            mask[forced] = true;
            FeatureSequence::new(m, Matrix::from_vec(tau, dim, values), mask).expect("valid sequence")
        })
    })
}

/// Matrices of arbitrary bit patterns, NaNs included.
fn raw_matrix() -> impl Strategy<Value = Matrix> {
    (0usize..5, 0usize..5).prop_flat_map(|(r, c)| vec(any::<u64>().prop_map(f64::from_bits), r * c).prop_map(move |d| Matrix::from_vec(r, c, d)))
}

pub fn checkpoint() -> impl Strategy<Value = Checkpoint> {
    let params = vec(raw_matrix(), 0..6);
    let moments = vec(proptest::option::of((raw_matrix(), raw_matrix())), 0..6);
    (
        "[a-z0-9]{0,64}",
        prop_oneof![Just(Stage::One), Just(Stage::Two)],
        (0usize..1000, any::<u64>()),
        (any::<[u8; 32]>(), any::<u64>(), any::<u128>()),
        params,
        (any::<u64>(), any::<u64>(), any::<u64>()),
        moments,
    )
        .prop_map(|(fingerprint, stage, (epoch, seed), (rs, stream, word_pos), params, (lr, wd, step), moments)| {
            let mut store = ParamStore::new();
            for (i, m) in params.into_iter().enumerate() {
                store.add(format!("block.{i}.weight"), m);
            }
            let optimizer = AdamW {
                learning_rate: f64::from_bits(lr),
                weight_decay: f64::from_bits(wd),
                step,
                moments: moments.into_iter().map(|s| s.map(|(first, second)| Moments { first, second })).collect(),
            };
            Checkpoint {
                fingerprint,
                stage,
                epoch,
                seed,
                rng: RngState { seed: rs, stream, word_pos },
                params: store,
                optimizer,
            }
        })
}
