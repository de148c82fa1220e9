use graphhash::augment::orthant_noise;
use graphhash::graph::{normalize, BipartiteGraph};
use graphhash::index::{hamming_distance, select_top, HammingIndex, QueryCodes};
use graphhash::linalg::Matrix;
use graphhash::table::{pack_signs, unpack_signs, HashTable};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn graph_strategy() -> impl Strategy<Value = BipartiteGraph> {
    (1usize..8, 1usize..8).prop_flat_map(|(n1, n2)| {
        proptest::collection::vec((0..n1, 0..n2), 1..30)
            .prop_map(move |edges| BipartiteGraph::from_edges(n1, n2, edges).unwrap())
    })
}

proptest! {
    #[test]
    fn normalized_operator_is_symmetric_and_bipartite(g in graph_strategy()) {
        let op = normalize(&g);
        let n = g.num_nodes();
        for i in 0..n {
            for j in 0..n {
                let a = op.entry(i, j);
                prop_assert_eq!(a, op.entry(j, i));
                if (i < g.n1()) == (j < g.n1()) {
                    prop_assert_eq!(a, 0.0);
                }
                if a != 0.0 {
                    let want = 1.0 / ((g.degree(i) * g.degree(j)) as f64).sqrt();
                    prop_assert!((a - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn propagation_does_not_expand(g in graph_strategy(), seed in any::<u64>()) {
        let op = normalize(&g);
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = Matrix::<f64>::random_normal(g.num_nodes(), 3, 1.0, &mut r);
        let y = op.propagate(&x).unwrap();
        let norm = |m: &Matrix<f64>| m.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(norm(&y) <= norm(&x) * (1.0 + 1e-12));
    }

    #[test]
    fn sign_packing_round_trips(v in proptest::collection::vec(-1.0f32..1.0, 1..200)) {
        let signs = unpack_signs(&pack_signs(&v), v.len());
        for (s, x) in signs.iter().zip(&v) {
            prop_assert_eq!(*s, if *x >= 0.0 { 1 } else { -1 });
        }
    }

    #[test]
    fn hamming_is_a_metric(a in proptest::collection::vec(any::<bool>(), 1..150), seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let d = a.len();
        let as_f: Vec<f32> = a.iter().map(|&b| if b { 1.0 } else { -1.0 }).collect();
        let b: Vec<f32> = (0..d).map(|_| if rand::Rng::random::<bool>(&mut r) { 1.0 } else { -1.0 }).collect();
        let (pa, pb) = (pack_signs(&as_f), pack_signs(&b));
        let dist = hamming_distance(&pa, &pb, d).unwrap();
        let want = as_f.iter().zip(&b).filter(|(x, y)| x != y).count() as u32;
        prop_assert_eq!(dist, want);
        prop_assert_eq!(hamming_distance(&pa, &pa, d).unwrap(), 0);
        let dot: f32 = as_f.iter().zip(&b).map(|(x, y)| x * y).sum();
        prop_assert_eq!(dot as i64, d as i64 - 2 * dist as i64);
    }

    #[test]
    fn table_round_trips_through_bytes(n1 in 1usize..6, n2 in 1usize..6, d in 1usize..200, l in 0usize..4, seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let t = HashTable::random(n1, n2, d, l, &mut r);
        prop_assert_eq!(HashTable::from_bytes(&t.to_bytes()).unwrap(), t);
    }

    #[test]
    fn top_n_is_a_sorted_prefix(scores in proptest::collection::vec(-5i32..5, 0..60), n in 1usize..70) {
        let s: Vec<f64> = scores.iter().map(|&v| v as f64).collect();
        let got = select_top(&s, n, None).unwrap().ids();
        let mut all: Vec<usize> = (0..s.len()).collect();
        all.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
        all.truncate(n);
        prop_assert_eq!(got, all);
    }

    #[test]
    fn index_scores_match_table_scores(n1 in 1usize..5, n2 in 1usize..40, d in 1usize..130, l in 0usize..3, seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let t = HashTable::random(n1, n2, d, l, &mut r);
        let index = HammingIndex::build(&t);
        for x in 0..n1 {
            let scores = index.scores(&QueryCodes::from_table(&t, x).unwrap()).unwrap();
            for (y, s) in scores.iter().enumerate() {
                prop_assert_eq!(*s, t.score(x, y).unwrap());
            }
        }
    }

    #[test]
    fn orthant_noise_has_fixed_norm(signs in proptest::collection::vec(prop_oneof![Just(1i8), Just(-1i8)], 1..100), tau in 1e-3f64..10.0, seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let eps = orthant_noise(&signs, tau, &mut r).unwrap();
        let norm = eps.iter().map(|e| e * e).sum::<f64>().sqrt();
        prop_assert!((norm - tau).abs() <= 1e-12 * tau);
        prop_assert!(eps.iter().zip(&signs).all(|(e, &s)| e * s as f64 >= 0.0));
    }
}
