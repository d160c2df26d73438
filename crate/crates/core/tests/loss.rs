use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tirg_core::metric::{build_negative_sets, metric_loss, NegativeSets};
use tirg_core::selfcheck::{loss_algebra, pipelines, tiny_model_config};
use tirg_core::tensor::{Graph, Tensor};
use tirg_core::{Kernel, Model};

fn loss_value(q: &Tensor, t: &Tensor, sets: &NegativeSets, kernel: Kernel) -> f64 {
    let mut g = Graph::new();
    let (qv, tv) = (g.constant(q.clone()), g.constant(t.clone()));
    let l = metric_loss(&mut g, qv, tv, sets, kernel).unwrap();
    g.value(l).item().unwrap()
}

fn mat(rows: &[[f64; 2]]) -> Tensor {
    Tensor::new(&[rows.len(), 2], rows.iter().flatten().copied().collect()).unwrap()
}

#[test]
fn hand_fixed_batch_matches_scalar_transcription() {
    let q = mat(&[[1.0, 0.5], [-0.3, 2.0], [0.7, -1.1]]);
    let t = mat(&[[0.2, 0.9], [1.5, -0.4], [-0.6, 0.8]]);
    let sets = build_negative_sets(3, 2, 2, 0).unwrap();

    let dot = |a: [f64; 2], b: [f64; 2]| a[0] * b[0] + a[1] * b[1];
    let qs = [[1.0, 0.5], [-0.3, 2.0], [0.7, -1.1]];
    let ts = [[0.2, 0.9], [1.5, -0.4], [-0.6, 0.8]];
    let mut total = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            if j != i {
                let pos = dot(qs[i], ts[i]).exp();
                let neg = dot(qs[i], ts[j]).exp();
                total -= (pos / (pos + neg)).ln();
            }
        }
    }
    let expect = total / 6.0;
    let got = loss_value(&q, &t, &sets, Kernel::Dot);
    assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
}

#[test]
fn single_candidate_softmax_has_zero_loss() {
    let sets = NegativeSets::from_sets(vec![vec![vec![0]]]).unwrap();
    let v = Tensor::new(&[1, 2], vec![0.3, -4.0]).unwrap();
    assert_eq!(loss_value(&v, &v, &sets, Kernel::Dot), 0.0);
}

#[test]
fn equal_similarities_give_log_two() {
    let v = Tensor::new(&[4, 3], [0.2, -0.1, 0.7].repeat(4)).unwrap();
    let sets = build_negative_sets(4, 2, 3, 0).unwrap();
    for kernel in [Kernel::Dot, Kernel::NegL2] {
        assert!((loss_value(&v, &v, &sets, kernel) - std::f64::consts::LN_2).abs() < 1e-12);
    }
}

#[test]
fn loss_forms_agree_on_fifty_batches() {
    let a = loss_algebra(50, 11).unwrap();
    assert!(a.triplet_value < 1e-10, "{a:?}");
    assert!(a.triplet_grad < 1e-8, "{a:?}");
    assert!(a.batch_softmax < 1e-10, "{a:?}");
    assert!(a.symmetric_log2 < 1e-12, "{a:?}");
}

#[test]
fn extreme_scores_stay_finite() {
    let q = Tensor::new(&[2, 1], vec![1e3, -1e3]).unwrap();
    let t = Tensor::new(&[2, 1], vec![1e3, 1e3]).unwrap();
    let sets = build_negative_sets(2, 2, 1, 0).unwrap();
    let l = loss_value(&q, &t, &sets, Kernel::Dot);
    assert!(l.is_finite() && l >= 0.0, "{l}");
}

#[test]
fn every_reachable_parameter_receives_gradient() {
    for (strategy, mode) in pipelines() {
        let model = Model::new(tiny_model_config(strategy, mode), 5).unwrap();
        let mut hits = vec![false; model.store.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for trial in 0..8 {
            let px = model.config.image.canvas_px;
            let mut g = Graph::new();
            let x = g.constant(Tensor::uniform(&[4, px, px, 3], 1.0, &mut rng));
            let y = g.constant(Tensor::uniform(&[4, px, px, 3], 1.0, &mut rng));
            let tokens: Vec<Vec<usize>> = (0..4).map(|i| vec![(i + trial) % model.vocab.len(), 3]).collect();
            let q = model.query_embedding::<ChaCha8Rng>(&mut g, x, &tokens, None).unwrap();
            let t = model.target_embedding(&mut g, y).unwrap();
            let sets = build_negative_sets(4, 2, 3, 0).unwrap();
            let l = metric_loss(&mut g, q, t, &sets, Kernel::Dot).unwrap();
            g.backward(l).unwrap();
            let mut store = model.store.clone();
            store.accumulate_grads(&g).unwrap();
            for (k, (_, p)) in store.iter().enumerate() {
                if p.grad.as_ref().is_some_and(|gr| gr.data().iter().any(|v| *v != 0.0)) {
                    hits[k] = true;
                }
            }
        }
        for (k, (_, p)) in model.store.iter().enumerate() {
            // Image-only never reads the text encoder.
            let unused = strategy == tirg_core::Strategy::ImageOnly && p.name.starts_with("text.");
            if !unused {
                assert!(hits[k], "{strategy}/{mode}: `{}` never received a gradient", p.name);
            }
        }
    }
}

fn batch(b: usize, d: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (
        prop::collection::vec(-2.0f64..2.0, b * d),
        prop::collection::vec(-2.0f64..2.0, b * d),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_is_non_negative(b in 2usize..6, d in 1usize..4, seed in any::<u64>(), l2 in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = Tensor::uniform(&[b, d], 3.0, &mut rng);
        let t = Tensor::uniform(&[b, d], 3.0, &mut rng);
        let kernel = if l2 { Kernel::NegL2 } else { Kernel::Dot };
        for k in [2, b] {
            let m = if k == 2 { b - 1 } else { 1 };
            let sets = build_negative_sets(b, k, m, 0).unwrap();
            prop_assert!(loss_value(&q, &t, &sets, kernel) >= 0.0);
        }
    }

    #[test]
    fn batch_order_does_not_matter((qd, td) in batch(5, 3), perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle()) {
        let q = Tensor::new(&[5, 3], qd.clone()).unwrap();
        let t = Tensor::new(&[5, 3], td.clone()).unwrap();
        let pick = |d: &[f64]| perm.iter().flat_map(|&i| d[i * 3..i * 3 + 3].to_vec()).collect::<Vec<_>>();
        let qp = Tensor::new(&[5, 3], pick(&qd)).unwrap();
        let tp = Tensor::new(&[5, 3], pick(&td)).unwrap();
        for (k, m) in [(2, 4), (5, 1)] {
            let sets = build_negative_sets(5, k, m, 0).unwrap();
            let a = loss_value(&q, &t, &sets, Kernel::Dot);
            let b = loss_value(&qp, &tp, &sets, Kernel::Dot);
            prop_assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
        }
    }

    #[test]
    fn neg_l2_ignores_a_common_shift((qd, td) in batch(4, 3), shift in prop::collection::vec(-5.0f64..5.0, 3)) {
        let q = Tensor::new(&[4, 3], qd.clone()).unwrap();
        let t = Tensor::new(&[4, 3], td.clone()).unwrap();
        let moved = |d: &[f64]| d.iter().enumerate().map(|(i, v)| v + shift[i % 3]).collect::<Vec<_>>();
        let qs = Tensor::new(&[4, 3], moved(&qd)).unwrap();
        let ts = Tensor::new(&[4, 3], moved(&td)).unwrap();
        for (k, m) in [(2, 3), (3, 2), (4, 1)] {
            let sets = build_negative_sets(4, k, m, 1).unwrap();
            let a = loss_value(&q, &t, &sets, Kernel::NegL2);
            let b = loss_value(&qs, &ts, &sets, Kernel::NegL2);
            prop_assert!((a - b).abs() < 1e-10, "{} vs {}", a, b);
        }
    }
}
