use proptest::prelude::*;

use rdec::dec;
use rdec::metrics;
use rdec::network::{Activation, Network};
use rdec::rng::{self, Stream};
use rdec::Matrix;

fn matrix(rows: usize, cols: usize, scale: f64) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-scale..scale, rows * cols).prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

fn embedding_and_centroids() -> impl Strategy<Value = (Matrix, Matrix)> {
    (1usize..12, 2usize..6, 1usize..5, prop::sample::select(vec![0.1, 1.0, 50.0]))
        .prop_flat_map(|(n, k, d, s)| (matrix(n, d, s), matrix(k, d, s)))
}

fn simplex_row(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, k).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

fn partitions(max_k: usize) -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    (1usize..50).prop_flat_map(move |n| {
        (prop::collection::vec(0..max_k, n), prop::collection::vec(0..max_k, n))
    })
}

fn brute_force_matches(labels: &[usize], assign: &[usize]) -> usize {
    let kp = assign.iter().max().unwrap() + 1;
    let kt = labels.iter().max().unwrap() + 1;
    let size = kp.max(kt);
    let mut best = 0;
    let mut perm: Vec<usize> = (0..size).collect();
    heap_permutations(&mut perm, size, &mut |p| {
        let hits = labels.iter().zip(assign).filter(|(&l, &c)| p[c] == l).count();
        best = best.max(hits);
    });
    best
}

fn heap_permutations(v: &mut [usize], k: usize, f: &mut impl FnMut(&[usize])) {
    if k <= 1 {
        f(v);
        return;
    }
    for i in 0..k {
        heap_permutations(v, k - 1, f);
        let j = if k.is_multiple_of(2) { i } else { 0 };
        v.swap(j, k - 1);
    }
}

proptest! {
    #[test]
    fn soft_assignment_and_target_are_row_stochastic((z, u) in embedding_and_centroids()) {
        let q = dec::soft_assign(&z, &u, dec::ALPHA).unwrap();
        for row in q.q.iter_rows() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
        }
        let p = dec::target_distribution(&q, dec::DEFAULT_S).unwrap();
        for row in p.p.iter_rows() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
        let f = q.q.col_sums();
        for (a, b) in p.frequencies.iter().zip(&f) {
            prop_assert!((a - b).abs() <= 1e-12 * b.max(1.0));
        }
    }

    #[test]
    fn target_sharpens_toward_weighted_argmax((z, u) in embedding_and_centroids(), s in 1.5f64..4.0) {
        let q = dec::soft_assign(&z, &u, dec::ALPHA).unwrap();
        let p = dec::target_distribution(&q, s).unwrap();
        for i in 0..q.q.rows() {
            let weighted: Vec<f64> = q.q.row(i).iter().zip(&p.frequencies).map(|(v, f)| v.powf(s) / f).collect();
            let top = weighted.iter().cloned().fold(f64::MIN, f64::max);
            let pi = p.p.row(i);
            let arg = (0..pi.len()).max_by(|&a, &b| pi[a].total_cmp(&pi[b])).unwrap();
            // Ties in the weighted scores can resolve to either index.
            prop_assert!(weighted[arg] >= top * (1.0 - 1e-12));
        }
    }

    #[test]
    fn uniform_frequencies_raise_the_peak(rows in prop::collection::vec(simplex_row(3), 1..6)) {
        // Cyclic shifts of each row give exactly equal column sums.
        let mut data = Vec::new();
        for r in &rows {
            for shift in 0..3 {
                data.extend((0..3).map(|j| r[(j + shift) % 3]));
            }
        }
        let q = Matrix::from_vec(rows.len() * 3, 3, data).unwrap();
        let sa = dec::SoftAssignment { q: q.clone(), alpha: dec::ALPHA };
        let p = dec::target_distribution(&sa, dec::DEFAULT_S).unwrap();
        for i in 0..q.rows() {
            let qmax = q.row(i).iter().cloned().fold(0.0, f64::max);
            let pmax = p.p.row(i).iter().cloned().fold(0.0, f64::max);
            prop_assert!(pmax >= qmax - 1e-12);
        }
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_the_diagonal(k in 2usize..10, seed in any::<u64>()) {
        let mut r = rng::stream(seed, Stream::Synthetic, 0);
        let draw = |r: &mut rng::Rng| {
            use rand::Rng as _;
            let v: Vec<f64> = (0..k).map(|_| r.gen_range(0.001..1.0)).collect();
            let s: f64 = v.iter().sum();
            Matrix::from_vec(1, k, v.into_iter().map(|x| x / s).collect()).unwrap()
        };
        let p = draw(&mut r);
        let q = draw(&mut r);
        prop_assert!(dec::kl_divergence(&p, &q).unwrap() >= 0.0);
        prop_assert_eq!(dec::kl_divergence(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn hungarian_accuracy_equals_brute_force((labels, assign) in partitions(6)) {
        let (acc, _) = metrics::accuracy(&labels, &assign).unwrap();
        let brute = brute_force_matches(&labels, &assign) as f64 / labels.len() as f64;
        prop_assert_eq!(acc, brute);
    }

    #[test]
    fn accuracy_ignores_relabeling(
        (labels, assign) in partitions(5),
        cluster_perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle(),
        label_perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let (acc, _) = metrics::accuracy(&labels, &assign).unwrap();
        let a2: Vec<usize> = assign.iter().map(|&c| cluster_perm[c]).collect();
        let l2: Vec<usize> = labels.iter().map(|&l| label_perm[l]).collect();
        prop_assert_eq!(metrics::accuracy(&l2, &a2).unwrap().0, acc);
    }

    #[test]
    fn ari_is_symmetric((a, b) in partitions(4)) {
        prop_assume!(a.len() >= 2);
        let ab = metrics::adjusted_rand_index(&a, &b).unwrap();
        let ba = metrics::adjusted_rand_index(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-12);
    }

    #[test]
    fn ari_of_a_partition_with_itself_is_one(a in prop::collection::vec(0usize..4, 2..40)) {
        prop_assume!(a.iter().any(|&x| x != a[0]));
        prop_assert_eq!(metrics::adjusted_rand_index(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn encode_is_deterministic(seed in any::<u64>(), x in matrix(5, 6, 1.0)) {
        let mut r = rng::stream(seed, Stream::Encoder, 0);
        let net = Network::new(&[6, 8, 3], &[Activation::Relu, Activation::Identity], &mut r).unwrap();
        let a = net.forward(&x).unwrap();
        let b = net.clone().forward(&x).unwrap();
        prop_assert_eq!(a.as_slice(), b.as_slice());
    }
}
