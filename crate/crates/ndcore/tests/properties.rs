use ndcore::{sgd_step, Graph, LrSchedule, Mode, ParamStore, Tensor, Tensor64};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor64> {
    prop::collection::vec(-50.0f64..50.0, rows * cols)
        .prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(x in (1usize..6, 1usize..8).prop_flat_map(|(r, c)| matrix(r, c))) {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let p = g.softmax(v).unwrap();
        let cols = x.shape()[1];
        for row in g.value(p).data().chunks(cols) {
            prop_assert!(row.iter().all(|&q| (0.0..=1.0).contains(&q)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn grad_reverse_forward_is_bitwise_identity(x in matrix(3, 4), lambda in 0.0f64..5.0) {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let r = g.grad_reverse(v, lambda).unwrap();
        let same = g.value(r).data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        prop_assert!(same);
    }

    #[test]
    fn lr_is_non_increasing(alpha in 0.001f64..100.0, beta in 0.001f64..3.0, a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let s = LrSchedule { eta0: 0.01, alpha, beta };
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(s.lr_at(hi).unwrap() <= s.lr_at(lo).unwrap());
    }

    #[test]
    fn forward_and_backward_stay_finite(x in matrix(4, 3), w in matrix(3, 5)) {
        let mut store = ParamStore::new();
        let wid = store.add("w", w);
        let bid = store.add("b", Tensor::zeros(&[5]));
        let mut g = Graph::new();
        let xv = g.constant(x);
        let wv = g.param(&store, wid);
        let bv = g.param(&store, bid);
        let h = g.linear(xv, wv, bv).unwrap();
        let p = g.softmax(h).unwrap();
        let loss = g.cross_entropy(p, &[0, 1, 2, 3]).unwrap();
        prop_assert!(g.value(loss).data()[0].is_finite());
        g.backward(loss, &mut store).unwrap();
        prop_assert!(store.iter().all(|p| p.grad.data().iter().all(|v| v.is_finite())));
    }
}

fn tiny_training_run(seed: u64) -> Vec<u64> {
    let mut store: ParamStore<f64> = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = store.add(
        "w",
        Tensor::new(
            vec![2, 1, 3, 3],
            (0..18).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        )
        .unwrap(),
    );
    let b = store.add("b", Tensor::zeros(&[2]));
    let scale = store.add("bn.scale", Tensor::full(&[2], 1.0));
    let shift = store.add("bn.shift", Tensor::zeros(&[2]));
    let fc = store.add(
        "fc",
        Tensor::new(
            vec![8, 3],
            (0..24).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        )
        .unwrap(),
    );
    let fcb = store.add("fc.b", Tensor::zeros(&[3]));
    let mut stats = ndcore::BatchNormStats::new(2);
    for _ in 0..5 {
        let x = Tensor::new(
            vec![4, 1, 4, 4],
            (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x);
        let (wv, bv) = (g.param(&store, w), g.param(&store, b));
        let c = g.conv2d(xv, wv, bv, 1, 1).unwrap();
        let a = g.leaky_relu(c, 0.1);
        let m = g.maxpool2(a).unwrap();
        let (sv, hv) = (g.param(&store, scale), g.param(&store, shift));
        let n = g.batch_norm(m, sv, hv, &mut stats, Mode::Train).unwrap();
        let f = g.flatten(n).unwrap();
        let (fv, fbv) = (g.param(&store, fc), g.param(&store, fcb));
        let h = g.linear(f, fv, fbv).unwrap();
        let p = g.softmax(h).unwrap();
        let loss = g.cross_entropy(p, &[0, 1, 2, 0]).unwrap();
        g.backward(loss, &mut store).unwrap();
        sgd_step(&mut store, 0.05, 0.9);
    }
    store
        .iter()
        .flat_map(|p| p.value.data().iter().map(|v| v.to_bits()))
        .collect()
}

#[test]
fn training_is_bitwise_reproducible() {
    assert_eq!(tiny_training_run(7), tiny_training_run(7));
    assert_ne!(tiny_training_run(7), tiny_training_run(8));
}

#[test]
fn single_precision_graph_runs() {
    let mut g = Graph::<f32>::new();
    let v = g.constant(Tensor::from_f64(vec![1, 3], &[1.0, 2.0, 3.0]).unwrap());
    let p = g.softmax(v).unwrap();
    let sum: f32 = g.value(p).data().iter().sum();
    assert!((sum - 1.0).abs() < 1e-6);
}
