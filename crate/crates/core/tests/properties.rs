use fspll_core::pll::{knn_indices, nearest_prototype, predict, smooth_confidence, update_confidence, ConfidenceMatrix};
use fspll_core::{
    classify_proba, init_network, rectify, CandidateMatrix, DistanceKind, Matrix, NetworkSpec, PrototypeSet, RectifyConfig,
};
use ndarray::{s, Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random candidate matrix where every label has a sample and every sample a candidate.
fn candidates(rng: &mut ChaCha8Rng, l: usize, n: usize) -> CandidateMatrix {
    let mut mask = Array2::from_elem((l, n), false);
    for i in 0..n {
        let truth = if i < l { i } else { rng.random_range(0..l) };
        mask[(truth, i)] = true;
        for c in 0..l {
            if rng.random_bool(0.4) {
                mask[(c, i)] = true;
            }
        }
    }
    CandidateMatrix::new(mask).unwrap()
}

fn uniform(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Matrix {
    Matrix::from_shape_fn((r, c), |_| rng.random_range(-scale..scale))
}

fn assert_stochastic(q: &Matrix, y: &CandidateMatrix) {
    for (i, col) in q.columns().into_iter().enumerate() {
        assert!((col.sum() - 1.0).abs() < 1e-9, "column {i} sums to {}", col.sum());
        for (c, &v) in col.iter().enumerate() {
            if !y.is_candidate(c, i) {
                assert_eq!(v, 0.0);
            } else {
                assert!(v >= 0.0);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn confidence_update_is_column_stochastic(seed: u64, l in 2usize..6, extra in 0usize..8, scale in 0.1f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = l + extra;
        let y = candidates(&mut rng, l, n);
        let d = uniform(&mut rng, l, n, scale).mapv(f64::abs);
        let q = update_confidence(&d, &y).unwrap();
        assert_stochastic(q.values(), &y);
    }

    #[test]
    fn smoothing_is_column_stochastic(seed: u64, l in 2usize..6, extra in 0usize..8, lambda in 0.0f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = (l + extra).max(2);
        let y = candidates(&mut rng, l, n);
        let q = update_confidence(&uniform(&mut rng, l, n, 3.0).mapv(f64::abs), &y).unwrap();
        let z = uniform(&mut rng, 3, n, 2.0);
        let nb = knn_indices(&z, rng.random_range(1..n)).unwrap();
        let smoothed = smooth_confidence(&q, &y, &nb, lambda).unwrap();
        assert_stochastic(smoothed.values(), &y);
        let unchanged = smooth_confidence(&q, &y, &nb, 0.0).unwrap();
        prop_assert_eq!(unchanged.values(), q.values());
    }

    #[test]
    fn confidence_update_ignores_distance_offset(seed: u64, l in 2usize..6, extra in 0usize..8, offset in -100.0f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = l + extra;
        let y = candidates(&mut rng, l, n);
        let d = uniform(&mut rng, l, n, 4.0).mapv(f64::abs);
        let a = update_confidence(&d, &y).unwrap().into_inner();
        let b = update_confidence(&(&d + offset), &y).unwrap().into_inner();
        for (x, y) in a.iter().zip(b.iter()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn rectification_commutes_with_translation(seed: u64, l in 2usize..5, extra in 0usize..7, lambda in 0.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = (l + extra).max(2);
        let m = 3;
        let y = candidates(&mut rng, l, n);
        let z = uniform(&mut rng, m, n, 2.0);
        let shift = Array1::from_shape_fn(m, |_| rng.random_range(-5.0..5.0));
        let mut moved = z.clone();
        for mut col in moved.columns_mut() {
            col += &shift;
        }
        let cfg = RectifyConfig { lambda, k: Some(rng.random_range(1..n)), ..Default::default() };
        let a = rectify(&z, &y, &cfg).unwrap();
        let b = rectify(&moved, &y, &cfg).unwrap();
        for (x, w) in a.confidence.values().iter().zip(b.confidence.values().iter()) {
            prop_assert!((x - w).abs() < 1e-9);
        }
        for c in 0..l {
            let expected = &a.prototypes.prototype(c) + &shift;
            for (x, w) in expected.iter().zip(b.prototypes.prototype(c).iter()) {
                prop_assert!((x - w).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn prediction_is_nearest_prototype(seed: u64, l in 2usize..7, nq in 1usize..10, tie: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = uniform(&mut rng, l, 3, 2.0);
        if tie {
            let src = rows.row(0).to_owned();
            rows.row_mut(l - 1).assign(&src);
        }
        let p = PrototypeSet::from_rows(rows);
        let zq = uniform(&mut rng, 3, nq, 2.0);
        for kind in [DistanceKind::Euclidean, DistanceKind::SquaredEuclidean] {
            let via_probs = predict(&classify_proba(&zq, &p, kind).unwrap());
            prop_assert_eq!(&via_probs, &nearest_prototype(&zq, &p, kind).unwrap());
            if tie {
                prop_assert!(via_probs.iter().all(|&c| c != l - 1));
            }
        }
    }

    #[test]
    fn embedding_acts_on_columns_independently(seed: u64, d in 1usize..6, n in 1usize..8, hidden in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = init_network(&NetworkSpec::new(d, vec![hidden, hidden], 4), seed).unwrap();
        let x = uniform(&mut rng, d, n, 3.0);
        let batch = net.embed_values(&x).unwrap();
        for j in 0..n {
            let single = net.embed_values(&x.slice(s![.., j..j + 1]).to_owned()).unwrap();
            prop_assert_eq!(single.column(0), batch.column(j));
        }
    }

    #[test]
    fn uniform_confidence_is_normalized_candidates(seed: u64, l in 2usize..6, extra in 0usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = candidates(&mut rng, l, l + extra);
        let q = ConfidenceMatrix::uniform(&y);
        assert_stochastic(q.values(), &y);
    }
}
