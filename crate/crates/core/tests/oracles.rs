mod common;

use chrono::{Duration, NaiveDate};
use proptest::prelude::*;
use rand::Rng;

use common::{brute_dbi, dense_subtree_level, rand_tensor, rng};
use dualcast::attention::{linear_attention, naive_linear_attention, subtree_levels};
use dualcast::graphs::{build_rct_adjacency, rct_nnz, SensorGraph};
use dualcast::losses::dbi_loss;
use dualcast::ndtensor::{Tape, Tensor};
use dualcast::patterns::{PatternCalendar, PATTERN_COUNT};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn linear_attention_matches_loops(seed in 0u64..100_000, rows in 1usize..33, d in 1usize..9, dense in 0.0f64..1.0) {
        let (q, k, v) = (rand_tensor(&[rows, d], seed), rand_tensor(&[rows, d], seed + 1), rand_tensor(&[rows, d], seed + 2));
        let mut r = rng(seed + 3);
        let mask = Tensor::new(vec![rows, rows], (0..rows * rows).map(|_| f64::from(u8::from(r.random::<f64>() < dense))).collect()).unwrap();
        let tape = Tape::new();
        let fast = linear_attention(tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()), &mask).unwrap();
        let slow = naive_linear_attention(&q, &k, &v, &mask).unwrap();
        prop_assert!(fast.value().max_abs_diff(&slow) < 1e-9);
    }

    #[test]
    fn subtree_levels_match_matrix_powers(seed in 0u64..100_000, n in 1usize..9, steps in 1usize..4, levels in 1usize..4, p in 0.0f64..1.0) {
        let graph = SensorGraph::random(n, p, &mut rng(seed));
        let adj = build_rct_adjacency(&graph, steps, 1).unwrap();
        let rows = n * steps;
        let (q, k, v) = (rand_tensor(&[rows, 3], seed + 1), rand_tensor(&[rows, 3], seed + 2), rand_tensor(&[rows, 2], seed + 3));
        let tape = Tape::new();
        let outs = subtree_levels(tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()), &adj, levels).unwrap();
        let dense = adj.to_dense();
        for (level, h) in outs.iter().enumerate().skip(1) {
            let want = dense_subtree_level(&q, &k, &v, &dense, level);
            let scale = want.data().iter().fold(1.0f64, |m, x| m.max(x.abs()));
            prop_assert!(h.value().max_abs_diff(&want) <= 1e-9 * scale, "level {level}");
        }
    }

    #[test]
    fn dbi_matches_loops(seed in 0u64..100_000, ids in proptest::collection::vec(0usize..6, 1..10)) {
        let psi = rand_tensor(&[6, 2, 2, 3], seed);
        let z = rand_tensor(&[ids.len(), 2, 2, 3], seed + 1);
        let tape = Tape::new();
        let got = dbi_loss(tape.constant(z.clone()), tape.constant(psi.clone()), &ids).unwrap().item().unwrap();
        let want = brute_dbi(&z, &psi, &ids);
        prop_assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0), "{got} vs {want}");
    }

    #[test]
    fn rct_nnz_matches_closed_form(seed in 0u64..100_000, n in 1usize..12, steps in 1usize..5, span in 1usize..4, p in 0.0f64..1.0) {
        let graph = SensorGraph::random(n, p, &mut rng(seed));
        let adj = build_rct_adjacency(&graph, steps, span).unwrap();
        prop_assert_eq!(adj.nnz(), rct_nnz(graph.edge_count(), n, steps, span));
        prop_assert!(adj.pattern().is_symmetric());
    }
}

#[test]
fn a_year_of_timestamps_maps_to_one_pattern_each() {
    let mut cal = PatternCalendar::default();
    let holiday = NaiveDate::from_ymd_opt(2024, 7, 4).unwrap();
    cal.holidays.insert(holiday);
    let start = NaiveDate::from_ymd_opt(2024, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
    let mut seen = [0usize; PATTERN_COUNT];
    for minute in (0..366 * 24 * 60).step_by(5) {
        let ts = start + Duration::minutes(minute);
        let id = cal.assign_pattern(&ts);
        assert!(id < PATTERN_COUNT);
        seen[id] += 1;
        if ts.date() == holiday {
            assert_eq!(id, 16);
            assert!(!cal.is_complex_time(&ts));
        }
    }
    assert!(seen.iter().all(|&c| c > 0), "{seen:?}");
}
