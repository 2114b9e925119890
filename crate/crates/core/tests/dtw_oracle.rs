mod common;

use common::{brute_force_dtw, random_matrix};
use proptest::prelude::*;
use qbe_core::dtwsearch::{length_filter, search, subsequence_dtw, subsequence_dtw_on, DistanceMatrix, SearchItem};
use qbe_core::features::{FeatureKind, FeatureMatrix};
use qbe_core::scores::SENTINEL;

fn distances() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..=6, 1usize..=9).prop_flat_map(|(m, n)| (Just(m), Just(n), prop::collection::vec(0.0f64..2.0, m * n)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn matches_exhaustive_enumeration((m, n, d) in distances()) {
        let fast = subsequence_dtw_on(&DistanceMatrix::new(m, n, d.clone()).unwrap());
        let slow = brute_force_dtw(&d, m, n);
        prop_assert_eq!(fast.is_some(), slow.is_some());
        if let (Some(h), Some((cost, _, _))) = (fast, slow) {
            prop_assert!((h.cost - cost).abs() < 1e-9, "{} vs {}", h.cost, cost);
        }
    }

    #[test]
    fn span_respects_slope_bounds((m, n, d) in distances()) {
        if let Some(h) = subsequence_dtw_on(&DistanceMatrix::new(m, n, d).unwrap()) {
            prop_assert!(h.span() >= m.div_ceil(2));
            prop_assert!(h.span() <= 2 * m);
            prop_assert!(h.end < n);
        }
    }

    #[test]
    fn constant_shift_moves_cost_by_the_shift((m, n, d) in distances(), c in 0.0f64..3.0) {
        let base = subsequence_dtw_on(&DistanceMatrix::new(m, n, d.clone()).unwrap());
        let shifted = subsequence_dtw_on(&DistanceMatrix::new(m, n, d.iter().map(|v| v + c).collect()).unwrap());
        match (base, shifted) {
            (Some(a), Some(b)) => prop_assert!((b.cost - a.cost - c).abs() < 1e-9),
            (None, None) => {}
            _ => prop_assert!(false, "existence changed under a shift"),
        }
    }

    #[test]
    fn verbatim_occurrence_beats_orthogonal_utterance(m in 3usize..10, pre in 0usize..12, post in 0usize..12, seed in 0u64..1000) {
        // Query lives in the first four dimensions, the distractor in the last four.
        let q = random_matrix(m, 4, seed);
        let padded = |f: &FeatureMatrix, offset: usize| -> Vec<Vec<f32>> {
            f.rows().map(|r| {
                let mut v = vec![0.0f32; 8];
                v[offset..offset + 4].copy_from_slice(r);
                v
            }).collect()
        };
        let query = FeatureMatrix::from_rows(&padded(&q, 0), FeatureKind::Bottleneck).unwrap();
        let filler = random_matrix(pre + post, 4, seed + 1);
        let mut rows = padded(&filler, 4);
        let tail = rows.split_off(pre);
        rows.extend(padded(&q, 0));
        rows.extend(tail);
        let containing = FeatureMatrix::from_rows(&rows, FeatureKind::Bottleneck).unwrap();
        let orthogonal = FeatureMatrix::from_rows(&padded(&random_matrix(m + pre + post, 4, seed + 2), 4), FeatureKind::Bottleneck).unwrap();

        let hit = subsequence_dtw(&query, &containing).unwrap().unwrap();
        let miss = subsequence_dtw(&query, &orthogonal).unwrap().unwrap();
        prop_assert!(hit.score() > miss.score());
        prop_assert!(hit.cost.abs() < 1e-6);
        prop_assert_eq!((hit.start, hit.end), (pre, pre + m - 1));
    }
}

fn item(id: &str, frames: usize, seed: u64, short: bool) -> SearchItem {
    SearchItem {
        id: id.into(),
        features: random_matrix(frames, 5, seed),
        short,
    }
}

#[test]
fn search_scores_every_pair_queries_outermost() {
    let queries = vec![item("qa", 6, 1, false), item("qb", 4, 2, true), item("qc", 30, 3, false)];
    let utterances = vec![item("u1", 40, 4, false), item("u2", 12, 5, false), item("u3", 20, 6, true)];
    let out = search(&queries, &utterances).unwrap();
    assert_eq!(out.len(), 9);
    let order: Vec<(&str, &str)> = out.iter().map(|r| (r.query.as_str(), r.utterance.as_str())).collect();
    assert_eq!(order[0], ("qa", "u1"));
    assert_eq!(order[3], ("qb", "u1"));
    assert_eq!(order[8], ("qc", "u3"));
    for r in &out {
        let expect_sentinel = r.query == "qb" || r.utterance == "u3" || (r.query == "qc" && r.utterance == "u2");
        assert_eq!(r.score == SENTINEL, expect_sentinel, "{r:?}");
        if !expect_sentinel {
            let q = &queries.iter().find(|q| q.id == r.query).unwrap().features;
            let u = &utterances.iter().find(|u| u.id == r.utterance).unwrap().features;
            let h = subsequence_dtw(q, u).unwrap().unwrap();
            assert_eq!(r.score, h.score());
            assert!(length_filter(&h, q.frames()));
        }
    }
}

#[test]
fn three_by_five_case_matches_enumeration() {
    let d: Vec<f64> = (0..15).map(|i| ((i * 7) % 11) as f64 / 10.0).collect();
    let h = subsequence_dtw_on(&DistanceMatrix::new(3, 5, d.clone()).unwrap()).unwrap();
    let (cost, _, _) = brute_force_dtw(&d, 3, 5).unwrap();
    assert!((h.cost - cost).abs() < 1e-12);
    assert!((2..=3).contains(&h.length));
}
