//! Scoring of attributions against known fault injections: per-node ranks,
//! hit rates, predicted anomaly times, and the benchmark report that ties
//! them together.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::attribution::{Aggregation, AttributionResult};
use crate::graph::NodeId;
use crate::heuristic::TreeAttribution;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no peaks match the query")]
    EmptyCorpus,
    #[error("{0} has no attributed lags")]
    NodeNotAttributable(NodeId),
    #[error("csv line {line}: {message}")]
    Format { line: usize, message: String },
}

/// Per-(node, lag) contributions for one peak, scorer-agnostic: lagged
/// attributions carry one entry per lag, the tree baseline one entry per
/// node at its single walk-back lag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeakScores {
    by_node: BTreeMap<NodeId, Vec<(u32, f64)>>,
}

impl PeakScores {
    pub fn new(by_node: BTreeMap<NodeId, Vec<(u32, f64)>>) -> Self {
        let by_node = by_node
            .into_iter()
            .map(|(n, mut lags)| {
                lags.sort_by_key(|(l, _)| *l);
                (n, lags)
            })
            .collect();
        PeakScores { by_node }
    }

    pub fn from_attribution(result: &AttributionResult) -> Self {
        let mut by_node: BTreeMap<NodeId, Vec<(u32, f64)>> = BTreeMap::new();
        for (inst, phi) in &result.contributions {
            by_node.entry(inst.node.clone()).or_default().push((inst.lag, *phi));
        }
        PeakScores::new(by_node)
    }

    pub fn from_tree(att: &TreeAttribution) -> Self {
        let by_node = att
            .scores
            .iter()
            .map(|(n, phi)| (n.clone(), vec![(att.lag, *phi)]))
            .collect();
        PeakScores { by_node }
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeId> {
        self.by_node.keys()
    }

    pub fn lags(&self, node: &NodeId) -> Option<&[(u32, f64)]> {
        self.by_node.get(node).map(Vec::as_slice)
    }

    /// One score per node, folded over lags, ranked descending with
    /// name-ascending ties.
    pub fn aggregate(&self, agg: Aggregation) -> Vec<(NodeId, f64)> {
        let mut out: Vec<(NodeId, f64)> = self
            .by_node
            .iter()
            .map(|(n, lags)| {
                let mut vals = lags.iter().map(|(_, v)| *v);
                let first = vals.next().expect("non-empty lag list");
                let folded = match agg {
                    Aggregation::Max => vals.fold(first, f64::max),
                    Aggregation::Sum => first + vals.sum::<f64>(),
                };
                (n.clone(), folded)
            })
            .collect();
        out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        out
    }

    /// Zero-based rank of `node` under `agg`. Nodes the scorer did not
    /// score rank strictly below every scored node, ordered by name among
    /// themselves within `universe`; the flag says whether it was scored.
    pub fn effective_rank(
        &self,
        node: &NodeId,
        agg: Aggregation,
        universe: &[NodeId],
    ) -> (usize, bool) {
        let ranked = self.aggregate(agg);
        if let Some(pos) = ranked.iter().position(|(n, _)| n == node) {
            return (pos, true);
        }
        let mut absent: Vec<&NodeId> =
            universe.iter().filter(|n| !self.by_node.contains_key(n)).collect();
        absent.sort();
        absent.dedup();
        let before = absent.iter().filter(|n| **n < node).count();
        (ranked.len() + before, false)
    }

    /// Peak time minus the node's strongest lag; ties go to the smallest
    /// lag.
    pub fn predicted_time(&self, node: &NodeId, peak_t: usize) -> Result<i64, EvalError> {
        let lags = self
            .by_node
            .get(node)
            .filter(|lags| !lags.is_empty())
            .ok_or_else(|| EvalError::NodeNotAttributable(node.clone()))?;
        let mut best = lags[0];
        for &(l, phi) in &lags[1..] {
            if phi > best.1 {
                best = (l, phi);
            }
        }
        Ok(peak_t as i64 - best.0 as i64)
    }
}

/// Signed offset of a predicted time from the injection window: zero
/// anywhere inside `[t_i, t_i + duration]`, otherwise the distance from the
/// window end. Predictions before the window therefore come out negative
/// by more than their distance from the start; the asymmetry is kept as is.
pub fn time_difference(t_i: usize, duration: u32, predicted_t: i64) -> i64 {
    let start = t_i as i64;
    let end = start + duration as i64;
    if predicted_t >= start && predicted_t <= end {
        0
    } else {
        predicted_t - end
    }
}

/// Everything known about one peak before scoring.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeakMeta {
    /// Injection kind label.
    pub injection: String,
    /// Index of the paired run within its kind.
    pub case: usize,
    /// Scorer label, e.g. `truncated-L7` or `heuristic`.
    pub model: String,
    /// Lag fold label: `max`, `sum`, or `none` for single-lag scorers.
    pub agg: String,
    /// Ground-truth fault node.
    pub cause: NodeId,
    pub t_i: usize,
    pub duration: u32,
    pub peak_t: usize,
    pub peak_magnitude: f64,
    /// Surprise of the peak under the scorer's noise model, when it has one.
    pub it_score: Option<f64>,
}

/// One scored peak: the raw record reports are built from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeakOutcome {
    pub meta: PeakMeta,
    /// Zero-based rank of the true cause.
    pub rank: usize,
    /// Whether the scorer produced a score for the true cause at all.
    pub scored: bool,
    pub predicted_t: Option<i64>,
    pub d: Option<i64>,
}

impl PeakOutcome {
    pub fn evaluate(
        meta: PeakMeta,
        scores: &PeakScores,
        agg: Aggregation,
        universe: &[NodeId],
    ) -> PeakOutcome {
        let (rank, scored) = scores.effective_rank(&meta.cause, agg, universe);
        let predicted_t = scores.predicted_time(&meta.cause, meta.peak_t).ok();
        let d = predicted_t.map(|p| time_difference(meta.t_i, meta.duration, p));
        PeakOutcome { meta, rank, scored, predicted_t, d }
    }

    pub fn hit(&self, k: usize) -> bool {
        self.rank < k
    }

    /// Steps from injection start to the peak.
    pub fn peak_delay(&self) -> i64 {
        self.meta.peak_t as i64 - self.meta.t_i as i64
    }
}

/// Fraction of peaks whose top-k nodes contain the true cause.
pub fn hit_at_k(outcomes: &[&PeakOutcome], k: usize) -> Result<f64, EvalError> {
    if outcomes.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let hits = outcomes.iter().filter(|o| o.hit(k)).count();
    Ok(hits as f64 / outcomes.len() as f64)
}

/// Summary of a set of d values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DStats {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

impl DStats {
    pub fn from_values(values: &[i64]) -> Option<DStats> {
        if values.is_empty() {
            return None;
        }
        let mut sorted: Vec<f64> = values.iter().map(|&v| v as f64).collect();
        sorted.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let h = (sorted.len() - 1) as f64 * p;
            let lo = h.floor() as usize;
            let hi = h.ceil() as usize;
            sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
        };
        Some(DStats {
            count: sorted.len(),
            mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
            min: sorted[0],
            q25: q(0.25),
            median: q(0.5),
            q75: q(0.75),
            max: sorted[sorted.len() - 1],
        })
    }
}

/// All scored peaks of a benchmark run, with the query and rendering
/// helpers the report command uses.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub rows: Vec<PeakOutcome>,
}

impl BenchmarkReport {
    pub fn new(rows: Vec<PeakOutcome>) -> Self {
        BenchmarkReport { rows }
    }

    /// Distinct (model, agg) pairs in first-seen order.
    pub fn scorers(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for row in &self.rows {
            let key = (row.meta.model.clone(), row.meta.agg.clone());
            if !out.contains(&key) {
                out.push(key);
            }
        }
        out
    }

    /// Distinct injection labels in name order.
    pub fn injections(&self) -> Vec<String> {
        let mut out: Vec<String> = self.rows.iter().map(|r| r.meta.injection.clone()).collect();
        out.sort();
        out.dedup();
        out
    }

    pub fn rows_for(
        &self,
        model: &str,
        agg: &str,
        injection: Option<&str>,
    ) -> Vec<&PeakOutcome> {
        self.rows
            .iter()
            .filter(|r| r.meta.model == model && r.meta.agg == agg)
            .filter(|r| injection.is_none_or(|i| r.meta.injection == i))
            .collect()
    }

    /// Pooled hit rate over all of a scorer's peaks, or one injection's.
    pub fn hit_rate(
        &self,
        model: &str,
        agg: &str,
        injection: Option<&str>,
        k: usize,
    ) -> Result<f64, EvalError> {
        hit_at_k(&self.rows_for(model, agg, injection), k)
    }

    /// d values of one scorer, optionally only for peaks that follow the
    /// injection within `max_delay` steps.
    pub fn d_values(&self, model: &str, agg: &str, max_delay: Option<i64>) -> Vec<i64> {
        self.rows_for(model, agg, None)
            .iter()
            .filter(|r| max_delay.is_none_or(|m| r.peak_delay() <= m))
            .filter_map(|r| r.d)
            .collect()
    }

    pub fn d_stats(&self, model: &str, agg: &str, max_delay: Option<i64>) -> Option<DStats> {
        DStats::from_values(&self.d_values(model, agg, max_delay))
    }

    /// Hit-rate table over every scorer and injection, one block per k.
    pub fn hit_table(&self, ks: &[usize]) -> String {
        let mut out = String::new();
        let injections = self.injections();
        for &k in ks {
            let _ = writeln!(out, "hit@{k}");
            let mut header = format!("{:<24} {:<6} {:>8}", "model", "agg", "overall");
            for inj in &injections {
                let _ = write!(header, " {inj:>18}");
            }
            let _ = writeln!(out, "{header}");
            for (model, agg) in self.scorers() {
                let overall = self
                    .hit_rate(&model, &agg, None, k)
                    .map(|r| format!("{r:.4}"))
                    .unwrap_or_else(|_| "-".into());
                let mut line = format!("{model:<24} {agg:<6} {overall:>8}");
                for inj in &injections {
                    let cell = self
                        .hit_rate(&model, &agg, Some(inj), k)
                        .map(|r| format!("{r:.4}"))
                        .unwrap_or_else(|_| "-".into());
                    let _ = write!(line, " {cell:>18}");
                }
                let _ = writeln!(out, "{line}");
            }
            let _ = writeln!(out);
        }
        out
    }

    /// Table of d summaries per scorer, overall and delay-restricted.
    pub fn d_table(&self, max_delay: i64) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<24} {:<6} {:<12} {:>6} {:>10} {:>8} {:>8} {:>8} {:>8} {:>8}",
            "model", "agg", "peaks", "count", "mean", "min", "q25", "median", "q75", "max"
        );
        for (model, agg) in self.scorers() {
            for (label, cap) in [("all", None), ("fast", Some(max_delay))] {
                let Some(s) = self.d_stats(&model, &agg, cap) else { continue };
                let _ = writeln!(
                    out,
                    "{:<24} {:<6} {:<12} {:>6} {:>10.4} {:>8} {:>8} {:>8} {:>8} {:>8}",
                    model, agg, label, s.count, s.mean, s.min, s.q25, s.median, s.q75, s.max
                );
            }
        }
        out
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from(
            "injection,case,model,agg,cause,t_i,duration,peak_t,peak_magnitude,it_score,rank,scored,predicted_t,d\n",
        );
        for row in &self.rows {
            let m = &row.meta;
            let it = m.it_score.map(|v| format!("{v}")).unwrap_or_default();
            let pt = row.predicted_t.map(|v| v.to_string()).unwrap_or_default();
            let d = row.d.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                m.injection,
                m.case,
                m.model,
                m.agg,
                m.cause,
                m.t_i,
                m.duration,
                m.peak_t,
                m.peak_magnitude,
                it,
                row.rank,
                row.scored,
                pt,
                d,
            );
        }
        out
    }

    pub fn from_csv_str(text: &str) -> Result<Self, EvalError> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(EvalError::Format {
            line: 1,
            message: "missing header".into(),
        })?;
        let expected = "injection,case,model,agg,cause,t_i,duration,peak_t,peak_magnitude,it_score,rank,scored,predicted_t,d";
        if header != expected {
            return Err(EvalError::Format { line: 1, message: "unexpected header".into() });
        }
        let mut rows = Vec::new();
        for (idx, line) in lines {
            if line.is_empty() {
                continue;
            }
            let err = |message: &str| EvalError::Format {
                line: idx + 1,
                message: message.into(),
            };
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 14 {
                return Err(err("wrong field count"));
            }
            let opt = |f: &str, what: &str| -> Result<Option<i64>, EvalError> {
                if f.is_empty() {
                    Ok(None)
                } else {
                    f.parse().map(Some).map_err(|_| err(what))
                }
            };
            rows.push(PeakOutcome {
                meta: PeakMeta {
                    injection: fields[0].to_string(),
                    case: fields[1].parse().map_err(|_| err("bad case"))?,
                    model: fields[2].to_string(),
                    agg: fields[3].to_string(),
                    cause: NodeId::new(fields[4]),
                    t_i: fields[5].parse().map_err(|_| err("bad t_i"))?,
                    duration: fields[6].parse().map_err(|_| err("bad duration"))?,
                    peak_t: fields[7].parse().map_err(|_| err("bad peak_t"))?,
                    peak_magnitude: fields[8]
                        .parse()
                        .map_err(|_| err("bad peak_magnitude"))?,
                    it_score: if fields[9].is_empty() {
                        None
                    } else {
                        Some(fields[9].parse().map_err(|_| err("bad it_score"))?)
                    },
                },
                rank: fields[10].parse().map_err(|_| err("bad rank"))?,
                scored: fields[11].parse().map_err(|_| err("bad scored"))?,
                predicted_t: opt(fields[12], "bad predicted_t")?,
                d: opt(fields[13], "bad d")?,
            });
        }
        Ok(BenchmarkReport { rows })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(s: &str) -> NodeId {
        NodeId::new(s)
    }

    fn scores(entries: &[(&str, &[(u32, f64)])]) -> PeakScores {
        PeakScores::new(
            entries
                .iter()
                .map(|(n, lags)| (node(n), lags.to_vec()))
                .collect(),
        )
    }

    fn universe() -> Vec<NodeId> {
        ["A", "B", "C", "D"].into_iter().map(NodeId::new).collect()
    }

    fn meta(cause: &str, t_i: usize, duration: u32, peak_t: usize) -> PeakMeta {
        PeakMeta {
            injection: "test".into(),
            case: 0,
            model: "m".into(),
            agg: "sum".into(),
            cause: node(cause),
            t_i,
            duration,
            peak_t,
            peak_magnitude: 1700.0,
            it_score: Some(2.5),
        }
    }

    #[test]
    fn lag_folds_follow_the_chosen_aggregation() {
        let s = scores(&[("A", &[(0, 1.0), (3, 2.0)]), ("B", &[(2, 5.0)])]);
        let sum = s.aggregate(Aggregation::Sum);
        assert_eq!(sum[0], (node("B"), 5.0));
        assert_eq!(sum[1], (node("A"), 3.0));
        let max = s.aggregate(Aggregation::Max);
        assert_eq!(max[1], (node("A"), 2.0));
        assert_eq!(max[0], (node("B"), 5.0), "single lag is agg-invariant");
    }

    #[test]
    fn rankings_ignore_common_rescaling() {
        let s1 = scores(&[("A", &[(0, 1.0)]), ("B", &[(0, 4.0)]), ("C", &[(0, 2.0)])]);
        let s2 = scores(&[("A", &[(0, 10.0)]), ("B", &[(0, 40.0)]), ("C", &[(0, 20.0)])]);
        let u = universe();
        for n in &u[..3] {
            assert_eq!
                (s1.effective_rank(n, Aggregation::Sum, &u),
                s2.effective_rank(n, Aggregation::Sum, &u));
        }
    }

    #[test]
    fn unscored_nodes_rank_below_every_scored_node() {
        let s = scores(&[("B", &[(0, -3.0)]), ("D", &[(1, -8.0)])]);
        let u = universe();
        assert_eq!(s.effective_rank(&node("B"), Aggregation::Sum, &u), (0, true));
        assert_eq!(s.effective_rank(&node("D"), Aggregation::Sum, &u), (1, true));
        assert_eq!(s.effective_rank(&node("A"), Aggregation::Sum, &u), (2, false));
        assert_eq!(s.effective_rank(&node("C"), Aggregation::Sum, &u), (3, false));
    }

    #[test]
    fn predicted_time_takes_the_strongest_then_smallest_lag() {
        let s = scores(&[("A", &[(0, 0.5), (4, 2.0), (7, 1.0)])]);
        assert_eq!(s.predicted_time(&node("A"), 100).unwrap(), 96);
        let uniform = scores(&[("A", &[(0, 1.0), (3, 1.0), (9, 1.0)])]);
        assert_eq!(uniform.predicted_time(&node("A"), 100).unwrap(), 100);
        let single = scores(&[("A", &[(5, 0.1)])]);
        assert_eq!(single.predicted_time(&node("A"), 100).unwrap(), 95);
        assert!(matches!(
            s.predicted_time(&node("B"), 100),
            Err(EvalError::NodeNotAttributable(_))
        ));
    }

    #[test]
    fn d_is_zero_exactly_inside_the_window() {
        assert_eq!(time_difference(100, 10, 100), 0);
        assert_eq!(time_difference(100, 10, 104), 0);
        assert_eq!(time_difference(100, 10, 110), 0);
        assert_eq!(time_difference(100, 10, 113), 3);
        assert_eq!(time_difference(100, 10, 98), -12);
        assert_eq!(time_difference(100, 0, 100), 0);
        assert_eq!(time_difference(100, 0, 101), 1);
    }

    #[test]
    fn outcome_evaluation_fills_rank_time_and_d() {
        let s = scores(&[
            ("A", &[(0, 1.0), (6, 3.0)]),
            ("B", &[(0, 9.0)]),
            ("C", &[(2, 0.4)]),
        ]);
        let out = PeakOutcome::evaluate(meta("A", 94, 3, 100), &s, Aggregation::Sum, &universe());
        assert_eq!(out.rank, 1);
        assert!(out.scored);
        assert_eq!(out.predicted_t, Some(94));
        assert_eq!(out.d, Some(0));
        assert!(out.hit(2) && !out.hit(1));

        let absent =
            PeakOutcome::evaluate(meta("D", 94, 3, 100), &s, Aggregation::Sum, &universe());
        assert_eq!(absent.rank, 3);
        assert!(!absent.scored);
        assert_eq!(absent.predicted_t, None);
        assert_eq!(absent.d, None);
    }

    fn outcome(rank: usize, injection: &str, model: &str, d: Option<i64>) -> PeakOutcome {
        let mut m = meta("A", 90, 5, 100);
        m.injection = injection.into();
        m.model = model.into();
        PeakOutcome { meta: m, rank, scored: true, predicted_t: d.map(|_| 0), d }
    }

    #[test]
    fn hit_rates_are_monotone_in_k_and_pool_across_injections() {
        let rows = vec![
            outcome(0, "x", "m", Some(0)),
            outcome(2, "x", "m", Some(3)),
            outcome(1, "y", "m", Some(-2)),
            outcome(5, "y", "m", None),
        ];
        let report = BenchmarkReport::new(rows);
        let mut last = 0.0;
        for k in 1..=6 {
            let rate = report.hit_rate("m", "sum", None, k).unwrap();
            assert!((0.0..=1.0).contains(&rate));
            assert!(rate >= last, "hit rate fell from {last} at k={k}");
            last = rate;
        }
        assert_eq!(report.hit_rate("m", "sum", Some("x"), 1).unwrap(), 0.5);
        assert_eq!(report.hit_rate("m", "sum", None, 1).unwrap(), 0.25);
        assert!(matches!(
            report.hit_rate("nope", "sum", None, 1),
            Err(EvalError::EmptyCorpus)
        ));
    }

    #[test]
    fn d_stats_summarize_and_respect_the_delay_cap() {
        let mut rows = vec![
            outcome(0, "x", "m", Some(-4)),
            outcome(0, "x", "m", Some(0)),
            outcome(0, "x", "m", Some(6)),
        ];
        rows[2].meta.peak_t = 120; // delay 30
        let report = BenchmarkReport::new(rows);
        let all = report.d_stats("m", "sum", None).unwrap();
        assert_eq!(all.count, 3);
        assert!((all.mean - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!((all.min, all.max), (-4.0, 6.0));
        let fast = report.d_stats("m", "sum", Some(10)).unwrap();
        assert_eq!(fast.count, 2);
        assert_eq!(fast.mean, -2.0);
        assert!(report.d_stats("m", "sum", Some(-100)).is_none());
    }

    #[test]
    fn report_rows_round_trip_through_csv() {
        let rows = vec![
            outcome(0, "x", "m", Some(0)),
            outcome(4, "y", "heuristic", None),
        ];
        let report = BenchmarkReport::new(rows);
        let csv = report.to_csv_string();
        let back = BenchmarkReport::from_csv_str(&csv).unwrap();
        assert_eq!(back, report);
        assert_eq!(back.to_csv_string(), csv);
    }

    #[test]
    fn empty_report_renders_empty_tables() {
        let report = BenchmarkReport::default();
        let hit = report.hit_table(&[1, 3]);
        assert!(hit.contains("hit@1") && hit.contains("hit@3"));
        let d = report.d_table(10);
        assert_eq!(d.lines().count(), 1, "header only");
        let back = BenchmarkReport::from_csv_str(&report.to_csv_string()).unwrap();
        assert!(back.rows.is_empty());
    }

    #[test]
    fn tables_render_identically_for_identical_rows() {
        let rows = vec![
            outcome(0, "x", "truncated-L7", Some(0)),
            outcome(1, "y", "truncated-L7", Some(2)),
            outcome(3, "x", "heuristic", None),
        ];
        let a = BenchmarkReport::new(rows.clone());
        let b = BenchmarkReport::new(rows);
        assert_eq!(a.hit_table(&[1, 2, 3]), b.hit_table(&[1, 2, 3]));
        assert_eq!(a.d_table(10), b.d_table(10));
        assert!(a.hit_table(&[1]).contains("truncated-L7"));
    }

    #[test]
    fn tree_scores_enter_as_single_lag_profiles() {
        let att = TreeAttribution {
            t: 50,
            threshold: 1500.0,
            lag: 4,
            target_increase: 30.0,
            scores: vec![(node("A"), 20.0), (node("B"), 10.0)],
        };
        let s = PeakScores::from_tree(&att);
        assert_eq!(s.lags(&node("A")), Some(&[(4, 20.0)][..]));
        assert_eq!(s.predicted_time(&node("B"), 50).unwrap(), 46);
        let folded = s.aggregate(Aggregation::Max);
        assert_eq!(folded, s.aggregate(Aggregation::Sum));
        assert_eq!(folded[0], (node("A"), 20.0));
    }
}
