use proptest::prelude::*;
use ual_core::eval::{self, RetrievalRun};
use ual_core::inference::{self, GaussianEmbedding};
use ual_core::loss;
use ual_core::reliability;
use ual_core::synthdata::{corrupt, split_by_identity, split_multi_query, CorruptionPlan, LabeledSample};
use ual_core::Tensor;

fn instance(classes: usize, c: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (
        prop::collection::vec(-2.0..2.0f64, c),
        prop::collection::vec(-2.0..2.0f64, classes * c),
    )
}

fn embeddings(n: usize) -> impl Strategy<Value = Vec<GaussianEmbedding>> {
    prop::collection::vec(
        (0usize..4, 0usize..3, prop::collection::vec(-1.0..1.0f64, 3), 0.01..5.0f64, 0.0..2.0f64),
        n,
    )
    .prop_map(|rows| {
        rows.into_iter()
            .enumerate()
            .map(|(i, (identity, camera, mean, d, m))| GaussianEmbedding {
                sample_id: i,
                identity,
                camera,
                mean,
                data_uncertainty: d,
                model_uncertainty: m,
            })
            .collect()
    })
}

fn samples(n: usize) -> impl Strategy<Value = Vec<LabeledSample>> {
    prop::collection::vec((0usize..5, 0usize..2, prop::collection::vec(-3.0..3.0f64, 4)), n).prop_map(|rows| {
        rows.into_iter()
            .enumerate()
            .map(|(i, (identity, camera, input))| LabeledSample {
                sample_id: i,
                identity,
                camera,
                eta: 0.0,
                input,
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn posterior_is_a_distribution((mu, w) in instance(6, 4), s2 in 0.01..50.0f64, k in 0.01..20.0f64) {
        let w = Tensor::matrix(6, 4, w).unwrap();
        let p = loss::posterior(&mu, &w, s2).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        let scaled: Vec<f64> = mu.iter().map(|v| v * k).collect();
        let q = loss::posterior(&scaled, &w, s2).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn data_loss_is_bounded_below_by_its_minimum(ce in 0.001..20.0f64, s2 in 0.001..100.0f64) {
        let at_min = loss::data_uncertainty_value(ce, ce).unwrap();
        prop_assert!(loss::data_uncertainty_value(ce, s2).unwrap() >= at_min - 1e-12);
    }

    #[test]
    fn reliability_weights_form_a_distribution(
        rows in prop::collection::vec((0.0..10.0f64, 0.0..10.0f64), 1..12),
        tau_min in 0.05..1.0f64,
        width in 0.0..2.0f64,
    ) {
        let (d, m): (Vec<f64>, Vec<f64>) = rows.into_iter().unzip();
        let tau_max = tau_min + width;
        let r = reliability::multi_query_weights(&d, &m, tau_min, tau_max).unwrap();
        prop_assert!(r.w.iter().all(|&w| w >= 0.0));
        prop_assert!((r.w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for v in r.d.iter().chain(&r.m) {
            prop_assert!(*v >= tau_min - 1e-12 && *v <= tau_max + 1e-12);
        }
    }

    #[test]
    fn projection_maps_extremes_and_ignores_affine_rescaling(
        values in prop::collection::vec(-5.0..5.0f64, 2..12),
        a in 0.1..10.0f64,
        b in -10.0..10.0f64,
    ) {
        let p = reliability::project(&values, 0.5, 1.0);
        let argmin = (0..values.len()).min_by(|&i, &j| values[i].total_cmp(&values[j])).unwrap();
        prop_assert_eq!(p[argmin], 1.0);
        let rescaled: Vec<f64> = values.iter().map(|v| a * v + b).collect();
        let q = reliability::project(&rescaled, 0.5, 1.0);
        let spread = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - values.iter().cloned().fold(f64::INFINITY, f64::min);
        if spread > 1e-6 {
            for (x, y) in p.iter().zip(&q) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gate_retains_fewer_queries_as_alpha_grows(queries in embeddings(10), mut alphas in prop::collection::vec(0.0..=1.0f64, 2..6)) {
        alphas.sort_by(f64::total_cmp);
        let counts: Vec<usize> = alphas
            .iter()
            .map(|&a| reliability::gate(&queries, a).unwrap().kept_ids().len())
            .collect();
        prop_assert!(counts.windows(2).all(|w| w[0] >= w[1]), "{:?}", counts);
        prop_assert_eq!(reliability::gate(&queries, 0.0).unwrap().kept_ids().len(), queries.len());
    }

    #[test]
    fn average_precision_lies_in_unit_interval(pattern in prop::collection::vec(any::<bool>(), 1..40)) {
        if let Some(ap) = eval::average_precision(&pattern) {
            prop_assert!((0.0..=1.0).contains(&ap));
        }
    }

    #[test]
    fn evaluation_ignores_gallery_order(
        queries in embeddings(4),
        gallery in embeddings(12),
        shuffle_seed in any::<u64>(),
    ) {
        let gallery: Vec<GaussianEmbedding> = gallery
            .into_iter()
            .map(|mut g| { g.sample_id += 100; g })
            .collect();
        let base = eval::single_query_eval(&RetrievalRun::single(queries.clone(), gallery.clone())).unwrap();
        let mut permuted = gallery;
        let mut state = shuffle_seed;
        for i in (1..permuted.len()).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            permuted.swap(i, (state >> 33) as usize % (i + 1));
        }
        let other = eval::single_query_eval(&RetrievalRun::single(queries, permuted)).unwrap();
        if base.map.is_nan() {
            prop_assert!(other.map.is_nan());
        } else {
            prop_assert!((0.0..=1.0).contains(&base.map));
            prop_assert_eq!(base.map, other.map);
            prop_assert_eq!(base.rank1, other.rank1);
        }
    }

    #[test]
    fn model_uncertainty_is_translation_invariant(
        grids in prop::collection::vec(prop::collection::vec(-2.0..2.0f64, 6), 2..12),
        shift in -100.0..100.0f64,
    ) {
        let base: Vec<Tensor> = grids.iter().map(|g| Tensor::vector(g.clone()).unwrap()).collect();
        let moved: Vec<Tensor> = grids
            .iter()
            .map(|g| Tensor::vector(g.iter().map(|v| v + shift).collect()).unwrap())
            .collect();
        let a = inference::model_uncertainty(&base).unwrap();
        let b = inference::model_uncertainty(&moved).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn corruption_keeps_labels(data in samples(6), eta in 0.0..5.0f64, seed in any::<u64>()) {
        for s in &data {
            let c = corrupt(s, eta, seed).unwrap();
            prop_assert_eq!((c.sample_id, c.identity, c.camera), (s.sample_id, s.identity, s.camera));
            prop_assert_eq!(c.eta, eta);
            prop_assert_eq!(c.input.len(), s.input.len());
        }
    }

    #[test]
    fn identity_split_partitions_the_input(data in samples(20), cut in 0usize..6) {
        let (train, test) = split_by_identity(&data, cut);
        prop_assert_eq!(train.len() + test.len(), data.len());
        prop_assert!(train.iter().all(|s| test.iter().all(|t| t.identity != s.identity)));
        let mut ids: Vec<usize> = train.iter().chain(&test).map(|s| s.sample_id).collect();
        ids.sort();
        prop_assert_eq!(ids, (0..data.len()).collect::<Vec<_>>());
    }

    #[test]
    fn query_split_partitions_each_group(per_group in 2usize..6, fraction in 0.05..0.95f64, seed in any::<u64>()) {
        let data: Vec<LabeledSample> = (0..3 * 2 * per_group)
            .map(|i| LabeledSample {
                sample_id: i,
                identity: i / (2 * per_group),
                camera: (i / per_group) % 2,
                eta: 0.0,
                input: vec![i as f64],
            })
            .collect();
        let (q, g) = split_multi_query(&data, fraction, &CorruptionPlan::none(), seed).unwrap();
        let mut ids: Vec<usize> = q.iter().chain(&g).map(|s| s.sample_id).collect();
        ids.sort();
        prop_assert_eq!(ids, (0..data.len()).collect::<Vec<_>>());
        prop_assert!(q.iter().all(|s| g.iter().all(|t| t.sample_id != s.sample_id)));
    }
}
