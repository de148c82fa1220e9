use graphhash::config::RunConfig;
use graphhash::eval::{
    candidate_counts, evaluate, planted_graph, random_recall, recall_ndcg, split, truth_lists, StorageReport,
};
use graphhash::graph::BipartiteGraph;
use graphhash::table::HashTable;
use graphhash::train::Trainer;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const PER_BLOCK: usize = 50;

#[test]
fn hand_computed_metrics() {
    let rankings = vec![vec![3, 1, 2], vec![0, 4, 9]];
    let truth = vec![vec![1, 5], vec![]];
    let r = recall_ndcg(&rankings, &truth, &[1, 2]).unwrap();
    assert_eq!((r.queries, r.skipped), (1, 1));
    assert_eq!(r.recall(1), 0.0);
    assert_eq!(r.recall(2), 0.5);
    let g = 1.0 / 3f64.log2();
    assert!((r.ndcg(2) - g / (1.0 + g)).abs() < 1e-15);
}

#[test]
fn storage_bits_follow_layout() {
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let t = HashTable::random(4, 6, 128, 2, &mut r);
    let s = StorageReport::of(&t);
    assert_eq!(s.code_bits, 10 * (128 * 3 + 32 * 3));
    assert_eq!(s.float32_bits, 10 * 32 * 128 * 3);
}

/// Held-out Recall@20 of a ranking that knows the planted blocks: unseen
/// same-block items first in random order, then everything else.
fn block_oracle_lift(p_in: f64, seed: u64) -> f64 {
    let g = planted_graph(4, PER_BLOCK, p_in, 0.01, seed).unwrap();
    let (train_g, test) = split(&g, 0.2, seed).unwrap();
    let truth = truth_lists(g.n1(), &test);
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let (mut rankings, mut truths) = (Vec::new(), Vec::new());
    for (u, t) in truth.into_iter().enumerate() {
        if t.is_empty() {
            continue;
        }
        let unseen = |same: bool| -> Vec<usize> {
            (0..g.n2())
                .filter(|&v| !train_g.has_edge(u, v) && (v / PER_BLOCK == u / PER_BLOCK) == same)
                .collect()
        };
        let (mut inside, mut outside) = (unseen(true), unseen(false));
        inside.shuffle(&mut r);
        outside.shuffle(&mut r);
        inside.extend(outside);
        rankings.push(inside);
        truths.push(t);
    }
    let report = recall_ndcg(&rankings, &truths, &[20]).unwrap();
    report.recall(20) / random_recall(&candidate_counts(g.n2(), Some(&train_g), &test, g.n1()), 20)
}

fn mean_oracle_lift(p_in: f64) -> f64 {
    (0..10).map(|s| block_oracle_lift(p_in, s)).sum::<f64>() / 10.0
}

#[test]
fn block_oracle_bounds_attainable_lift() {
    let sparse = mean_oracle_lift(0.3);
    let dense = mean_oracle_lift(0.5);
    assert!(sparse < 5.0, "oracle lift at p_in 0.3: {sparse}");
    assert!(dense > 5.0, "oracle lift at p_in 0.5: {dense}");
}

fn trained_lift(p_in: f64, seed: u64) -> f64 {
    let g: BipartiteGraph = planted_graph(4, PER_BLOCK, p_in, 0.01, seed).unwrap();
    let (train_g, test) = split(&g, 0.2, seed).unwrap();
    let mut rc = RunConfig::default();
    rc.train.reseed(seed);
    let mut t = Trainer::new(train_g.clone(), rc.train).unwrap();
    t.train(|_, _| Ok(())).unwrap();
    let report = evaluate(&t.table().unwrap(), Some(&train_g), &test, &[20]).unwrap();
    report.recall(20) / random_recall(&candidate_counts(g.n2(), Some(&train_g), &test, g.n1()), 20)
}

#[test]
#[ignore = "p_in 0.3 lies below the block-oracle ceiling of 5x; see block_oracle_bounds_attainable_lift"]
fn sparse_planted_graph_reaches_five_fold_lift() {
    let lift = (0..3).map(|s| trained_lift(0.3, s)).sum::<f64>() / 3.0;
    assert!(lift >= 5.0, "{lift}");
}
