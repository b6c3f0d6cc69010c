//! Tiny end-to-end benchmark: two training runs, two cases per fault kind,
//! both scorer families. Checks determinism and row-level sanity, not
//! headline rates; those belong to the full-size acceptance run.

use rca_core::pipeline::{self, BenchParams};
use rca_core::plant::PlantConfig;

fn tiny_params() -> BenchParams {
    BenchParams {
        master_seed: 42,
        train_runs: 2,
        train_minutes: 6_000,
        cases_per_kind: 2,
        t_i: 400,
        tau: 30,
        trailing: 20,
        samples: 200,
        permutations: 40,
    }
}

/// Full desk-scale dry run with timings and headline rates. Run with
/// `cargo test -p rca-core --test bench_pipeline desk_probe -- --ignored --nocapture`.
#[test]
#[ignore]
fn desk_probe() {
    use std::time::Instant;

    let cfg = PlantConfig::bundled();
    let params = BenchParams::desk(1);
    let keys = pipeline::model_keys(&[0, 3, 7, 10], &[]);

    let t0 = Instant::now();
    let traces = pipeline::training_traces(&cfg, &params).unwrap();
    let train = pipeline::training_series(&traces, cfg.warmup_minutes);
    println!("training: {:?}", t0.elapsed());

    let t1 = Instant::now();
    let models = pipeline::fit_models(&cfg, &keys, &train).unwrap();
    let tree = pipeline::fit_tree(&train).unwrap();
    println!("fitting: {:?}", t1.elapsed());
    for (key, scm) in &models {
        println!("  {} attributable players: {}", key.label(), scm.attributable().len());
    }

    let t2 = Instant::now();
    let corpus = pipeline::build_corpus(&cfg, &params).unwrap();
    println!("corpus: {:?}", t2.elapsed());
    let mut by_kind: std::collections::BTreeMap<&str, (usize, Vec<i64>)> = Default::default();
    for case in &corpus.cases {
        let entry = by_kind.entry(case.run.spec.kind.label()).or_default();
        entry.0 += case.peaks.len();
        entry.1.extend(case.peaks.iter().map(|p| p.t as i64 - params.t_i as i64));
    }
    for (kind, (count, mut delays)) in by_kind {
        delays.sort_unstable();
        let median = delays.get(delays.len() / 2).copied().unwrap_or(-1);
        println!("  {kind:<18} peaks {count:>3} median delay {median:>3}");
    }

    let t3 = Instant::now();
    let report = pipeline::score_corpus(&corpus, &models, Some(&tree), &cfg).unwrap();
    println!("scoring: {:?} ({} rows)", t3.elapsed(), report.rows.len());

    println!("{}", report.hit_table(&[1, 3]));
    println!("{}", report.d_table(10));
    println!("total: {:?}", t0.elapsed());
}

#[test]
fn tiny_bench_is_deterministic_and_sane() {
    let cfg = PlantConfig::bundled();
    let params = tiny_params();
    let keys = pipeline::model_keys(&[0, 2], &[2]);

    let run1 = pipeline::run_bench(&cfg, &params, &keys, true).unwrap();
    let run2 = pipeline::run_bench(&cfg, &params, &keys, true).unwrap();
    let csv = run1.report.to_csv_string();
    assert_eq!(csv, run2.report.to_csv_string(), "reruns must re-produce bytes");

    let peaks: usize = run1.corpus.cases.iter().map(|c| c.peaks.len()).sum();
    assert!(peaks > 0, "tiny corpus yielded no attributable peaks");

    let rows_of = |model: &str, agg: &str| {
        run1.report
            .rows
            .iter()
            .filter(|r| r.meta.model == model && r.meta.agg == agg)
            .count()
    };
    for key in &keys {
        assert_eq!(rows_of(&key.label(), "max"), peaks);
        assert_eq!(rows_of(&key.label(), "sum"), peaks);
    }
    assert_eq!(rows_of("heuristic", "none"), peaks);

    for row in &run1.report.rows {
        assert!(row.rank < 11, "rank {} escapes the node set", row.rank);
        if let (Some(p), Some(d)) = (row.predicted_t, row.d) {
            let start = row.meta.t_i as i64;
            let end = start + row.meta.duration as i64;
            assert_eq!(d == 0, (start..=end).contains(&p));
        }
        if row.meta.model == "heuristic" {
            assert!(row.meta.it_score.is_none());
        } else {
            assert!(row.meta.it_score.is_some());
            assert!(row.meta.it_score.unwrap() >= 0.0);
        }
    }
}
