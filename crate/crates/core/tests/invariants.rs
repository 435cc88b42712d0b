use nnclr::augment::{make_view_batch, AugmentMode, AugmentPolicy};
use nnclr::data::{epoch_batches, gen_blobs, BlobSpec, Split};
use nnclr::numerics::{l2_normalize, softmax_rows};
use nnclr::optim::{lr_at, Schedule};
use nnclr::support_set::{Replacement, SupportSet};
use nnclr::Matrix;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix<f64>> {
    proptest::collection::vec(-3.0f64..3.0, rows * cols)
        .prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

fn sized_matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Matrix<f64>> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| matrix(r, c))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn normalized_rows_have_unit_norm(x in sized_matrix(8, 8)) {
        prop_assume!(x.row_norms().iter().all(|&n| n > 1e-6));
        let y = l2_normalize(&x, 1e-12).unwrap();
        for n in y.row_norms() {
            prop_assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_are_distributions(x in sized_matrix(6, 10), shift in -50.0f64..50.0) {
        let y = softmax_rows(&x);
        let shifted = softmax_rows(&Matrix::from_fn(x.rows(), x.cols(), |r, c| x.get(r, c) + shift));
        for r in 0..y.rows() {
            prop_assert!((y.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(y.row(r).iter().all(|&p| p > 0.0));
            for (a, b) in y.row(r).iter().zip(shifted.row(r)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn schedule_stays_in_range(
        base in 0.0f64..5.0,
        warmup in 0u64..50,
        extra in 1u64..500,
        frac in 0.0f64..=1.0,
    ) {
        let total = warmup + extra;
        let s = Schedule::new(base, warmup, total).unwrap();
        let step = (frac * total as f64) as u64;
        let lr = lr_at(step, &s).unwrap();
        prop_assert!((0.0..=base * (1.0 + 1e-12)).contains(&lr));
        prop_assert!(lr_at(total, &s).unwrap().abs() < 1e-12 * (1.0 + base));
        prop_assert_eq!(lr_at(0, &s).unwrap(), if warmup == 0 { base } else { 0.0 });
        prop_assert!(lr_at(total + 1, &s).is_err());
    }

    #[test]
    fn epoch_batches_are_disjoint_full_batches(
        n in 0usize..300,
        bs in 1usize..64,
        seed in any::<u64>(),
        epoch in 0u64..100,
    ) {
        let batches = epoch_batches(n, bs, seed, epoch);
        prop_assert_eq!(batches.len(), n / bs);
        let mut all: Vec<usize> = batches.iter().flatten().copied().collect();
        prop_assert!(batches.iter().all(|b| b.len() == bs));
        all.sort_unstable();
        all.dedup();
        prop_assert_eq!(all.len(), (n / bs) * bs);
        prop_assert!(all.iter().all(|&i| i < n));
        prop_assert_eq!(batches, epoch_batches(n, bs, seed, epoch));
    }

    #[test]
    fn soft_weights_sum_to_one_and_hard_pick_is_the_argmax(
        buf in sized_matrix(64, 6),
        seed in any::<u64>(),
        temp in 0.01f64..2.0,
    ) {
        prop_assume!(buf.row_norms().iter().all(|&n| n > 1e-6));
        let q = SupportSet::from_rows(&buf, Replacement::Fifo, seed).unwrap();
        let query = Matrix::from_fn(3, buf.cols(), |r, c| ((r * 7 + c * 3) as f64).sin() + 0.1);
        let soft = q.soft_nn(&query, temp).unwrap();
        let hard = q.nearest(&query).unwrap();
        for r in 0..3 {
            let w = soft.weights.row(r);
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let top = hard.indices[r];
            prop_assert!(w.iter().all(|&v| v <= w[top]));
            prop_assert_eq!(hard.neighbors.row(r), q.buffer().row(top));
        }
    }

    #[test]
    fn views_depend_only_on_seed_epoch_and_index(
        seed in any::<u64>(),
        epoch in 0u64..10,
        picks in proptest::collection::vec(0usize..40, 1..12),
    ) {
        let data = gen_blobs::<f64>(
            &BlobSpec { num_classes: 4, samples_per_class: 10, ambient_dim: 5, cluster_std: 0.2, seed: 3 },
            Split::Train,
        ).unwrap();
        let policy = AugmentPolicy { mode: AugmentMode::Full, ..AugmentPolicy::default() };
        let (a1, a2) = make_view_batch(&data, &picks, &policy, seed, epoch).unwrap();
        let reversed: Vec<usize> = picks.iter().rev().copied().collect();
        let (b1, b2) = make_view_batch(&data, &reversed, &policy, seed, epoch).unwrap();
        let n = picks.len();
        for i in 0..n {
            prop_assert_eq!(a1.row(i), b1.row(n - 1 - i));
            prop_assert_eq!(a2.row(i), b2.row(n - 1 - i));
        }
    }
}
