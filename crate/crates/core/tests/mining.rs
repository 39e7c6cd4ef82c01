use std::collections::BTreeSet;

use collection_forge::datagen::{lccs, mine_preferences, BoardTitle, MiningOptions, MiningRecord};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn brute_lccs(a: &[String], b: &[String]) -> usize {
    let mut best = 0;
    for i in 0..a.len() {
        for j in 0..b.len() {
            let mut n = 0;
            while i + n < a.len() && j + n < b.len() && a[i + n] == b[j + n] {
                n += 1;
            }
            best = best.max(n);
        }
    }
    best
}

fn words(rng: &mut ChaCha8Rng, vocab: &[String], n: usize) -> Vec<String> {
    (0..n).map(|_| vocab[rng.random_range(0..vocab.len())].clone()).collect()
}

#[test]
fn embedded_queries_select_exactly_their_boards() {
    let vocab: Vec<String> = (0..40).map(|i| format!("w{i}")).collect();
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let queries: Vec<Vec<String>> = (0..5).map(|_| words(&mut rng, &vocab, 5)).collect();
        let mut boards = Vec::new();
        let mut embeds: Vec<BTreeSet<String>> = vec![BTreeSet::new(); queries.len()];
        for b in 0..60 {
            let id = format!("b{b:03}");
            let lead = rng.random_range(1..4);
            let mut title = words(&mut rng, &vocab, lead);
            if b % 4 == 0 {
                let q = rng.random_range(0..queries.len());
                title.extend(queries[q].iter().cloned());
                title.extend(words(&mut rng, &vocab, 2));
            } else {
                title.extend(words(&mut rng, &vocab, 3));
            }
            boards.push(BoardTitle { id, title });
        }
        // ground truth from the oracle, not from how the titles were built
        for (q, query) in queries.iter().enumerate() {
            for b in &boards {
                if brute_lccs(query, &b.title) == query.len() {
                    embeds[q].insert(b.id.clone());
                }
            }
        }
        let records: Vec<MiningRecord> = queries
            .iter()
            .enumerate()
            .map(|(i, q)| MiningRecord { user_id: format!("u{i}"), query: q.clone(), clicked: format!("c{i}"), category: None })
            .collect();
        let tuples = mine_preferences(&records, &boards, &MiningOptions { negatives: 10, seed });
        for t in &tuples {
            let q: usize = t.user_id[1..].parse().unwrap();
            let positive: BTreeSet<String> = t.positive.iter().cloned().collect();
            let query = &queries[q];
            let best = boards.iter().map(|b| brute_lccs(query, &b.title)).max().unwrap();
            let expected: BTreeSet<String> = boards.iter().filter(|b| brute_lccs(query, &b.title) == best).map(|b| b.id.clone()).collect();
            assert_eq!(positive, expected);
            if !embeds[q].is_empty() {
                assert_eq!(positive, embeds[q]);
            }
            assert!(t.negative.iter().all(|n| !positive.contains(n)));
        }

        let mut shuffled = boards.clone();
        shuffled.shuffle(&mut rng);
        assert_eq!(mine_preferences(&records, &shuffled, &MiningOptions { negatives: 10, seed }), tuples);
    }
}

#[test]
fn lccs_matches_brute_force() {
    let vocab: Vec<String> = (0..4).map(|i| format!("t{i}")).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..500 {
        let (n, m) = (rng.random_range(0..9), rng.random_range(0..9));
        let a = words(&mut rng, &vocab, n);
        let b = words(&mut rng, &vocab, m);
        assert_eq!(lccs(&a, &b), brute_lccs(&a, &b));
        assert_eq!(lccs(&a, &b), lccs(&b, &a));
    }
}
