use proptest::prelude::*;

use dnllab::io::{self, WeightsFile};
use dnllab::metrics::{self, BinaryMap, LabelMap};
use dnllab::tensor::{self, FeatureMap, Tensor};
use dnllab::train;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, rows * cols)
        .prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn close(a: &Tensor, b: &Tensor, tol: f64) -> bool {
    a.shape() == b.shape() && a.max_abs_diff(b) <= tol * (1.0 + a.max_abs().max(b.max_abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_is_associative(
        (a, b, c) in (1usize..6, 1usize..6, 1usize..6, 1usize..6)
            .prop_flat_map(|(m, k, n, p)| (matrix(m, k), matrix(k, n), matrix(n, p)))
    ) {
        let left = tensor::matmul(&tensor::matmul(&a, &b).unwrap(), &c).unwrap();
        let right = tensor::matmul(&a, &tensor::matmul(&b, &c).unwrap()).unwrap();
        prop_assert!(close(&left, &right, 1e-12));
    }

    #[test]
    fn transposed_products_agree(
        (a, b) in (1usize..7, 1usize..7, 1usize..7).prop_flat_map(|(m, k, n)| (matrix(m, k), matrix(n, k)))
    ) {
        let direct = tensor::matmul_t(&a, false, &b, true).unwrap();
        let explicit = tensor::matmul(&a, &b.transpose().unwrap()).unwrap();
        prop_assert_eq!(&direct, &explicit);
        let tt = tensor::matmul_t(&a.transpose().unwrap(), true, &b, true).unwrap();
        prop_assert!(close(&tt, &explicit, 1e-14));
    }

    #[test]
    fn softmax_ignores_row_shifts(m in matrix(3, 5), shifts in prop::collection::vec(-50.0f64..50.0, 3)) {
        let shifted = Tensor::from_fn(&[3, 5], |i| m.data()[i] + shifts[i / 5]).unwrap();
        let a = tensor::softmax_rows(&m).unwrap();
        let b = tensor::softmax_rows(&shifted).unwrap();
        prop_assert!(a.max_abs_diff(&b) <= 1e-12);
        for i in 0..3 {
            prop_assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn embedding_is_linear(
        x in matrix(4, 6),
        w1 in matrix(2, 4),
        w2 in matrix(2, 4),
        s in -2.0f64..2.0,
        t in -2.0f64..2.0,
    ) {
        let fm = FeatureMap::from_matrix(&x, 2, 3).unwrap();
        let combo = tensor::add(&tensor::scale(&w1, s).unwrap(), &tensor::scale(&w2, t).unwrap()).unwrap();
        let lhs = tensor::embed_1x1(&fm, &combo).unwrap().to_matrix();
        let e1 = tensor::embed_1x1(&fm, &w1).unwrap().to_matrix();
        let e2 = tensor::embed_1x1(&fm, &w2).unwrap().to_matrix();
        let rhs = tensor::add(&tensor::scale(&e1, s).unwrap(), &tensor::scale(&e2, t).unwrap()).unwrap();
        prop_assert!(close(&lhs, &rhs, 1e-12));
    }

    #[test]
    fn miou_invariant_under_relabeling(
        pred in prop::collection::vec(0usize..3, 12),
        gt in prop::collection::vec(0usize..3, 12),
        perm in Just(vec![0usize, 1, 2]).prop_shuffle(),
    ) {
        let map = |v: &[usize]| LabelMap::new(3, 4, 3, v.to_vec()).unwrap();
        let relabel = |v: &[usize]| v.iter().map(|&l| perm[l]).collect::<Vec<_>>();
        let a = train::miou(&map(&pred), &map(&gt)).unwrap();
        let b = train::miou(&map(&relabel(&pred)), &map(&relabel(&gt))).unwrap();
        prop_assert!((a - b).abs() <= 1e-15);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn overlap_is_linear(
        u in prop::collection::vec(0.0f64..1.0, 16),
        v in prop::collection::vec(0.0f64..1.0, 16),
        bits in prop::collection::vec(0u8..2, 16),
        s in 0.0f64..3.0,
    ) {
        let g = BinaryMap::new(4, 4, bits).unwrap();
        let mixed: Vec<f64> = u.iter().zip(&v).map(|(a, b)| s * a + b).collect();
        let lhs = metrics::overlap(&mixed, &g).unwrap();
        let rhs = s * metrics::overlap(&u, &g).unwrap() + metrics::overlap(&v, &g).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-12);
    }

    #[test]
    fn pgm_round_trip_preserves_order(values in prop::collection::vec(-5.0f64..5.0, 12)) {
        let (bytes, lo, hi) = io::encode_pgm(&values, 4, 3).unwrap();
        let (w, h, px) = io::decode_pgm(&bytes).unwrap();
        prop_assert_eq!((w, h), (4, 3));
        for (i, j) in (0..12).flat_map(|i| (0..12).map(move |j| (i, j))) {
            if values[i] < values[j] {
                prop_assert!(px[i] <= px[j]);
            }
        }
        let tol = (hi - lo) / 255.0 * 0.5 + 1e-12;
        for (p, x) in px.iter().zip(&values) {
            prop_assert!((lo + *p as f64 / 255.0 * (hi - lo) - x).abs() <= tol);
        }
    }

    #[test]
    fn weights_file_round_trip(t in matrix(3, 4), key in "[a-z]{1,8}", value in "[a-z0-9.]{0,8}") {
        let w = WeightsFile { metadata: vec![(key, value)], tensors: vec![("w".into(), t)] };
        prop_assert_eq!(WeightsFile::from_bytes(&w.to_bytes().unwrap()).unwrap(), w);
    }
}
