//! Randomized invariants across the crate: graph unfolding, simulator
//! accounting, paired-run prefixes, tree conservation, metric algebra and
//! the row CSV format.

use std::collections::BTreeMap;

use proptest::prelude::*;
use rca_core::evaluation::{hit_at_k, time_difference, BenchmarkReport, PeakMeta, PeakOutcome, PeakScores};
use rca_core::graph::{Mode, NodeId, SummaryGraph};
use rca_core::heuristic::{FittedTree, HeuristicError, LinearTree};
use rca_core::injection::{InjectionKind, InjectionSpec, PairedRun};
use rca_core::plant::{self, PlantConfig};
use rca_core::series::Series;
use rca_core::Aggregation;

/// Nodes `n0..n{count}` with random lagged edges. Zero-lag edges only run
/// forward in node order, so the summary graph is always valid.
fn summary_graph_strategy() -> impl Strategy<Value = SummaryGraph> {
    (2usize..6, proptest::collection::vec((0usize..6, 0usize..6, 0u32..4), 0..12)).prop_map(
        |(count, raw_edges)| {
            let nodes: Vec<String> = (0..count).map(|i| format!("n{i}")).collect();
            let mut edges = Vec::new();
            for (a, b, lag) in raw_edges {
                let (src, dst) = (a % count, b % count);
                if src == dst {
                    continue;
                }
                // Instantaneous cycles are invalid; force those edges forward.
                let (src, dst) =
                    if lag == 0 && src > dst { (dst, src) } else { (src, dst) };
                edges.push((nodes[src].as_str(), nodes[dst].as_str(), lag));
            }
            edges.sort();
            edges.dedup();
            SummaryGraph::new(nodes.clone(), edges).expect("forward zero-lag edges keep it valid")
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// The window covers exactly the lags up to the cap; everything beyond
    /// is a dangling direct parent of a window instance.
    #[test]
    fn unfolding_splits_instances_at_the_window_edge(
        graph in summary_graph_strategy(),
        max_lag in 0u32..5,
        truncated in any::<bool>(),
    ) {
        let mode = if truncated { Mode::Truncated } else { Mode::NonTruncated };
        let target = graph.nodes().next().unwrap().clone();
        let unfolded = graph.unfold(&target, max_lag, mode).unwrap();

        prop_assert_eq!(
            unfolded.window().len(),
            graph.node_count() * (max_lag as usize + 1)
        );
        for inst in unfolded.window() {
            prop_assert!(inst.lag <= max_lag);
        }
        for inst in unfolded.dangling() {
            prop_assert!(inst.lag > max_lag);
            let feeds_window = graph.children(&inst.node).iter().any(|(_, edge_lag)| {
                inst.lag >= *edge_lag && inst.lag - edge_lag <= max_lag
            });
            prop_assert!(feeds_window, "dangling {inst:?} feeds no window instance");
        }
    }

    /// Parents always precede their children in the topological order, and
    /// dangling instances keep parents only in non-truncated mode.
    #[test]
    fn unfolded_topological_order_puts_parents_first(
        graph in summary_graph_strategy(),
        max_lag in 0u32..5,
        truncated in any::<bool>(),
    ) {
        let mode = if truncated { Mode::Truncated } else { Mode::NonTruncated };
        let target = graph.nodes().next().unwrap().clone();
        let unfolded = graph.unfold(&target, max_lag, mode).unwrap();

        let order = unfolded.topological_order();
        prop_assert_eq!(order.len(), unfolded.instance_count());
        let mut position = vec![usize::MAX; order.len()];
        for (pos, &idx) in order.iter().enumerate() {
            position[idx] = pos;
        }
        for idx in 0..unfolded.instance_count() {
            for &p in unfolded.parent_indices(idx) {
                prop_assert!(position[p] < position[idx]);
            }
            if truncated && unfolded.is_dangling_idx(idx) {
                prop_assert!(unfolded.parent_indices(idx).is_empty());
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// The grid column always decomposes into its four feeders plus the
    /// recorded noise, at every step of every run.
    #[test]
    fn grid_always_equals_feeders_plus_recorded_noise(
        seed in any::<u64>(),
        t_start in 0usize..2000,
        duration in 50usize..250,
    ) {
        let cfg = PlantConfig::bundled();
        let trace = plant::simulate(&cfg, seed, t_start, duration).unwrap();
        for step in 0..trace.len() {
            let residual = trace.noise_residual(step);
            prop_assert!(
                (residual - trace.grid_noise[step]).abs() <= 1e-9,
                "step {step}: residual {residual} vs noise {}",
                trace.grid_noise[step]
            );
        }
    }

    /// Battery charge is a physical fraction and both runs of a pair agree
    /// on every column before the fault begins.
    #[test]
    fn paired_runs_stay_identical_until_the_fault(
        seed in any::<u64>(),
        kind_pick in 0usize..7,
        t_i in 50usize..150,
    ) {
        let cfg = PlantConfig::bundled();
        let kind = InjectionKind::catalog()[kind_pick % InjectionKind::catalog().len()];
        let spec = InjectionSpec::with_duration(kind, t_i, 20);
        // simulate() itself rejects pairs whose prefixes diverge.
        let run = PairedRun::simulate(&cfg, seed, 0, t_i + 40, spec).unwrap();
        for &v in run.faulty.column("SOC") {
            prop_assert!((0.0..=1.0).contains(&v), "charge fraction {v} out of bounds");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Walk-back scores always telescope: they sum to the reweighted
    /// target increase no matter the tree shape or data.
    #[test]
    fn tree_scores_conserve_the_target_increase(
        parents in proptest::collection::vec(0usize..5, 4),
        raw in proptest::collection::vec(-50.0f64..50.0, 24 * 5),
        threshold_quantile in 0.05f64..0.95,
    ) {
        // Node i > 0 hangs off some earlier node, so edges always reach n0.
        let names: Vec<String> = (0..5).map(|i| format!("n{i}")).collect();
        let edges: Vec<(NodeId, NodeId)> = (1..5)
            .map(|i| (NodeId::new(names[i].clone()), NodeId::new(names[parents[i - 1] % i].clone())))
            .collect();
        let tree = LinearTree::new(NodeId::new("n0"), &edges).unwrap();

        let mut series = Series::new(names.clone()).unwrap();
        for step in 0..24 {
            // A distinct ramp per column keeps every variance positive.
            let row: Vec<f64> = (0..5)
                .map(|col| raw[step * 5 + col] + (col as f64 + 1.0) * step as f64)
                .collect();
            series.push_row(&row).unwrap();
        }
        let fitted = FittedTree::fit(tree, &series).unwrap();

        let target_col = series.column(&NodeId::new("n0")).unwrap();
        let t = series.len() - 1;
        let lo = target_col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = target_col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let threshold = lo + (hi - lo) * threshold_quantile;
        match fitted.attribute(&series, t, threshold) {
            Ok(att) => {
                let total: f64 = att.scores.iter().map(|(_, s)| s).sum();
                prop_assert!(
                    (total - att.target_increase).abs() <= 1e-9 * (1.0 + att.target_increase.abs()),
                    "scores sum {total} vs increase {}",
                    att.target_increase
                );
            }
            Err(HeuristicError::NoOvershootFound { .. }) => {}
            Err(e) => return Err(TestCaseError::fail(format!("unexpected error: {e}"))),
        }
    }
}

fn node_scores_strategy() -> impl Strategy<Value = BTreeMap<NodeId, Vec<(u32, f64)>>> {
    proptest::collection::btree_map(
        "[a-f]{1,4}".prop_map(NodeId::new),
        proptest::collection::vec((0u32..8, -100.0f64..100.0), 1..5),
        1..6,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    /// Scaling every contribution by one positive factor never changes the
    /// ranking, under either lag fold.
    #[test]
    fn rankings_ignore_positive_rescaling(
        by_node in node_scores_strategy(),
        scale in 1e-3f64..1e3,
        use_max in any::<bool>(),
    ) {
        let agg = if use_max { Aggregation::Max } else { Aggregation::Sum };
        let scaled = by_node
            .iter()
            .map(|(n, lags)| {
                (n.clone(), lags.iter().map(|&(l, v)| (l, v * scale)).collect())
            })
            .collect();
        let order: Vec<NodeId> =
            PeakScores::new(by_node).aggregate(agg).into_iter().map(|(n, _)| n).collect();
        let scaled_order: Vec<NodeId> =
            PeakScores::new(scaled).aggregate(agg).into_iter().map(|(n, _)| n).collect();
        prop_assert_eq!(order, scaled_order);
    }

    /// A prediction offset is zero exactly inside the closed fault window
    /// and measures the overshoot past its end otherwise.
    #[test]
    fn offsets_vanish_exactly_inside_the_fault_window(
        t_i in 0usize..5000,
        duration in 0u32..200,
        predicted in -6000i64..12000,
    ) {
        let d = time_difference(t_i, duration, predicted);
        let start = t_i as i64;
        let end = start + duration as i64;
        if predicted >= start && predicted <= end {
            prop_assert_eq!(d, 0);
        } else {
            prop_assert_eq!(d, predicted - end);
        }
    }

    /// Growing k never loses hits.
    #[test]
    fn hit_rate_is_monotone_in_k(
        ranks in proptest::collection::vec(0usize..12, 1..40),
        ks in proptest::collection::vec(0usize..15, 2..6),
    ) {
        let outcomes: Vec<PeakOutcome> = ranks
            .iter()
            .map(|&rank| PeakOutcome {
                meta: PeakMeta {
                    injection: "x".into(),
                    case: 0,
                    model: "m".into(),
                    agg: "max".into(),
                    cause: NodeId::new("c"),
                    t_i: 0,
                    duration: 0,
                    peak_t: 0,
                    peak_magnitude: 0.0,
                    it_score: None,
                },
                rank,
                scored: true,
                predicted_t: None,
                d: None,
            })
            .collect();
        let refs: Vec<&PeakOutcome> = outcomes.iter().collect();
        let mut ks = ks;
        ks.sort_unstable();
        let rates: Vec<f64> =
            ks.iter().map(|&k| hit_at_k(&refs, k).unwrap()).collect();
        for pair in rates.windows(2) {
            prop_assert!(pair[0] <= pair[1]);
        }
    }
}

fn outcome_strategy() -> impl Strategy<Value = PeakOutcome> {
    (
        ("[a-z-]{1,10}", 0usize..20, "[a-zL0-9-]{1,14}", "(max|sum|none)"),
        ("[A-Za-z]{1,6}", 0usize..5000, 0u32..100, 0usize..5000),
        (-1e6f64..1e6, proptest::option::of(-1e3f64..1e3)),
        (0usize..15, any::<bool>(), proptest::option::of(-5000i64..5000)),
    )
        .prop_map(
            |(
                (injection, case, model, agg),
                (cause, t_i, duration, peak_t),
                (peak_magnitude, it_score),
                (rank, scored, predicted_t),
            )| {
                let d = predicted_t.map(|p| time_difference(t_i, duration, p));
                PeakOutcome {
                    meta: PeakMeta {
                        injection,
                        case,
                        model,
                        agg,
                        cause: NodeId::new(cause),
                        t_i,
                        duration,
                        peak_t,
                        peak_magnitude,
                        it_score,
                    },
                    rank,
                    scored,
                    predicted_t,
                    d,
                }
            },
        )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// The row CSV format loses nothing: any report survives a write/read
    /// cycle unchanged, bytes included.
    #[test]
    fn benchmark_rows_survive_the_csv_format(
        rows in proptest::collection::vec(outcome_strategy(), 0..25),
    ) {
        let report = BenchmarkReport::new(rows);
        let text = report.to_csv_string();
        let back = BenchmarkReport::from_csv_str(&text).unwrap();
        prop_assert_eq!(&back, &report);
        prop_assert_eq!(back.to_csv_string(), text);
    }
}
