//! Property tests of batching, masking, the loss estimators and metrics.

use proptest::collection::vec;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tridira_core::config::{HsicKernel, LossWeights};
use tridira_core::data::{make_batches, FeatureSequence, UtteranceBatch, UtteranceRecord};
use tridira_core::disentangler::{dual_output_attention, DualAttention};
use tridira_core::encoder::Ctx;
use tridira_core::gradcheck::suite;
use tridira_core::losses::{check_decomposition, cmd_value, hsic_value, total_loss, LossComponents};
use tridira_core::metrics::{compute_metrics, pearson, weighted_f1};
use tridira_core::model::Model;
use tridira_core::{Graph, Matrix, Modality, ParamStore, Task};

const DIMS: [usize; 3] = suite::INPUT_DIMS;

fn sequence(m: Modality) -> impl Strategy<Value = FeatureSequence> {
    (1usize..5).prop_flat_map(move |len| {
        (vec(-2.0f64..2.0, len * DIMS[m.index()]), vec(any::<bool>(), len), 0..len).prop_map(move |(v, mut mask, keep)| {
            mask[keep] = true;
            FeatureSequence::new(m, Matrix::from_vec(len, DIMS[m.index()], v), mask).unwrap()
        })
    })
}

fn records(max: usize) -> impl Strategy<Value = Vec<UtteranceRecord>> {
    vec((sequence(Modality::Text), sequence(Modality::Audio), sequence(Modality::Visual), -3.0f64..3.0), 1..max).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (t, a, vis, label))| UtteranceRecord { id: format!("r{i}"), label, features: [t, a, vis] })
            .collect()
    })
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    vec(-2.0f64..2.0, rows * cols).prop_map(move |d| Matrix::from_vec(rows, cols, d))
}

fn stage_two_model(seed: u64) -> (ParamStore, Model) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut model = Model::new(&mut store, &suite::config(), Task::Regression, DIMS, &mut rng).unwrap();
    model.attach_disentangler(&mut store, &mut rng).unwrap();
    (store, model)
}

/// Values of the prediction and every disentangled part, in a fixed order.
fn outputs(model: &Model, store: &ParamStore, batch: &UtteranceBatch) -> Vec<Matrix> {
    let mut g = Graph::new(store);
    let o = model.forward_stage2(&mut g, batch, &mut Ctx::eval()).unwrap();
    let mut out = vec![g.value(o.prediction).clone()];
    for p in &o.parts {
        out.extend([p.r_star, p.r_cap_u, p.u_star].map(|v| g.value(v).clone()));
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn batches_cover_every_record_once(recs in records(20), bs in 1usize..8, seed in any::<u64>(), shuffle in any::<bool>()) {
        let batches: Vec<UtteranceBatch> = make_batches(&recs, bs, seed, shuffle).unwrap().collect();
        prop_assert_eq!(batches.len(), recs.len().div_ceil(bs));
        let mut ids: Vec<String> = batches.iter().flat_map(|b| b.ids.clone()).collect();
        if !shuffle {
            prop_assert_eq!(&ids, &recs.iter().map(|r| r.id.clone()).collect::<Vec<_>>());
        }
        ids.sort();
        let mut expect: Vec<String> = recs.iter().map(|r| r.id.clone()).collect();
        expect.sort();
        prop_assert_eq!(ids, expect);
        for b in &batches {
            for (i, id) in b.ids.iter().enumerate() {
                let rec = recs.iter().find(|r| &r.id == id).unwrap();
                prop_assert_eq!(b.labels[i], rec.label);
                for m in Modality::ALL {
                    let bm = b.modality(m);
                    let f = rec.feature(m);
                    for t in 0..bm.len {
                        let row = bm.values.row(i * bm.len + t);
                        if t < f.len() {
                            prop_assert_eq!(row, f.values().row(t));
                            prop_assert_eq!(bm.mask[i * bm.len + t], f.mask()[t]);
                        } else {
                            prop_assert!(!bm.mask[i * bm.len + t]);
                            prop_assert!(row.iter().all(|v| *v == 0.0));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn padded_and_masked_frames_do_not_affect_outputs(recs in records(6), noise in vec(-50.0f64..50.0, 64), seed in 0u64..4) {
        let (store, model) = stage_two_model(seed);
        let refs: Vec<&UtteranceRecord> = recs.iter().collect();
        let batch = UtteranceBatch::from_records(&refs).unwrap();
        let mut scrambled = batch.clone();
        let mut k = 0;
        for bm in &mut scrambled.modalities {
            for r in 0..bm.mask.len() {
                if !bm.mask[r] {
                    for v in bm.values.row_mut(r) {
                        *v = noise[k % noise.len()];
                        k += 1;
                    }
                }
            }
        }
        prop_assert_eq!(outputs(&model, &store, &batch), outputs(&model, &store, &scrambled));
    }

    #[test]
    fn a_record_does_not_see_its_batch_mates(recs in records(6), seed in 0u64..4) {
        let (store, model) = stage_two_model(seed);
        let refs: Vec<&UtteranceRecord> = recs.iter().collect();
        let together = outputs(&model, &store, &UtteranceBatch::from_records(&refs).unwrap());
        for (i, rec) in recs.iter().enumerate() {
            let alone = outputs(&model, &store, &UtteranceBatch::from_records(&[rec]).unwrap());
            for (a, t) in alone.iter().zip(&together) {
                for (x, y) in a.row(0).iter().zip(t.row(i)) {
                    prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()), "{x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn dual_attention_outputs_partition_the_value_sum(r in matrix(3, 8), u in matrix(3, 8), seed in any::<u64>(), tokens in prop_oneof![Just(1usize), Just(2), Just(4), Just(8)]) {
        let mut store = ParamStore::new();
        let w = DualAttention::new(&mut store, "dual", 8 / tokens, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut g = Graph::new(&store);
        let (rv, uv) = (g.constant(r.clone()), g.constant(u.clone()));
        let out = dual_output_attention(&mut g, &w, rv, uv, tokens).unwrap();
        for (attended, complement, src, wv) in [(out.r_cap_u_ur, out.r_star, &r, w.value_r), (out.r_cap_u_ru, out.u_star, &u, w.value_u)] {
            let d_k = 8 / tokens;
            let v = Matrix::from_vec(3 * tokens, d_k, src.data().to_vec()).matmul(store.get(wv));
            for b in 0..3 {
                for c in 0..8 {
                    let col = c % d_k;
                    let total: f64 = (0..tokens).map(|t| v.get(b * tokens + t, col)).sum();
                    let got = g.value(attended).get(b, c) + g.value(complement).get(b, c);
                    prop_assert!((got - total).abs() < 1e-9, "{got} vs {total}");
                }
            }
        }
        if tokens == 1 {
            prop_assert!(g.value(out.r_star).data().iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn cmd_is_a_symmetric_nonnegative_discrepancy(z in matrix(5, 3), w in matrix(5, 3), order in 1usize..6) {
        prop_assert!(cmd_value(&z, &z, order, -2.0, 2.0).unwrap().abs() < 1e-12);
        let a = cmd_value(&z, &w, order, -2.0, 2.0).unwrap();
        let b = cmd_value(&w, &z, order, -2.0, 2.0).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() < 1e-12);
        // order-one CMD is the distance between the means
        let (mz, mw) = (z.col_sums(), w.col_sums());
        let first = mz.data().iter().zip(mw.data()).map(|(a, b)| (a - b) * (a - b) / 25.0).sum::<f64>().sqrt() / 4.0;
        prop_assert!((cmd_value(&z, &w, 1, -2.0, 2.0).unwrap() - first).abs() < 1e-12);
    }

    #[test]
    fn hsic_is_symmetric_nonnegative_and_order_free(z in matrix(6, 3), w in matrix(6, 2), perm in Just((0..6usize).collect::<Vec<_>>()).prop_shuffle(), sigma in 0.3f64..3.0) {
        for kernel in [HsicKernel::Rbf, HsicKernel::NormProduct] {
            let h = hsic_value(&z, &w, sigma, kernel).unwrap();
            // only a positive semidefinite kernel guarantees a nonnegative estimate
            if kernel == HsicKernel::Rbf {
                prop_assert!(h >= -1e-12);
            }
            prop_assert!((h - hsic_value(&w, &z, sigma, kernel).unwrap()).abs() < 1e-10);
            let hp = hsic_value(&z.select_rows(&perm), &w.select_rows(&perm), sigma, kernel).unwrap();
            prop_assert!((h - hp).abs() < 1e-10);
            let constant = Matrix::filled(6, 3, 0.7);
            prop_assert!(hsic_value(&constant, &w, sigma, kernel).unwrap().abs() < 1e-10);
        }
    }

    #[test]
    fn weighted_total_matches_its_components(c in vec(0.0f64..10.0, 7), w in vec(0.0f64..2.0, 6)) {
        let comps = LossComponents::from_values(c.clone().try_into().unwrap());
        let weights = LossWeights { task: w[0], sim: w[1], ucorr: w[2], recon: w[3], modality: w[4], h: w[5] };
        let report = total_loss(comps, &weights).unwrap();
        let by_hand = c[0] * w[0] + c[1] * w[4] + c[2] * w[2] + c[3] * w[1] + (c[4] + c[5]) * w[5] + c[6] * w[3];
        prop_assert!(check_decomposition(&report, by_hand).is_ok());
        prop_assert!(check_decomposition(&report, by_hand * 1.01 + 1.0).is_err());
    }

    #[test]
    fn metrics_stay_in_range(pred in vec(-4.0f64..4.0, 2..40), shift in -1.0f64..1.0) {
        let labels: Vec<f64> = pred.iter().map(|p| (p + shift).clamp(-3.0, 3.0)).collect();
        let r = compute_metrics(&pred, &labels, Task::Regression).unwrap();
        for (name, v) in r.entries() {
            if name == "corr" {
                prop_assert!((-1.0..=1.0).contains(&v));
            } else {
                prop_assert!(v >= 0.0 && (name == "mae" || v <= 100.0), "{name} {v}");
            }
        }
        let p = pearson(&pred, &labels);
        prop_assert!((-1.0..=1.0).contains(&p));
        let classes: Vec<usize> = pred.iter().map(|v| (v.abs() as usize) % 3).collect();
        let truth: Vec<usize> = labels.iter().map(|v| (v.abs() as usize) % 3).collect();
        let f1 = weighted_f1(&classes, &truth, 3);
        prop_assert!((0.0..=100.0).contains(&f1));
        prop_assert_eq!(weighted_f1(&truth, &truth, 3), 100.0);
    }
}
