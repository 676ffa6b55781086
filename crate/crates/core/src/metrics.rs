//! Primary and diagnostic retrieval metrics with macro/micro aggregation:
//! R@K, Set-Recall@K, semantic escape delta, rank jump, and the
//! noise-resilience margin. Also the per-task evaluation drivers and report
//! writers shared by the CLI and the acceptance suite.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::corpus::{CorpusIndex, RetrievalTask};
use crate::error::{Error, Result};
use crate::pool::{build_pool, complete_evidence, RequestMode, StepSchedule};
use crate::search::{rank_of, top_k, RankOutcome, RankedList};

/// 1 iff the target rank exists and is within K.
pub fn recall_at_k(rank: Option<usize>, k: usize) -> u8 {
    match rank {
        Some(r) if r >= 1 && r <= k => 1,
        _ => 0,
    }
}

/// |pool ∩ gold| / |gold|.
pub fn set_recall<'a, I>(pool: I, gold: &[String]) -> Result<f64>
where
    I: IntoIterator<Item = &'a str>,
{
    if gold.is_empty() {
        return Err(Error::InvalidConfig("set_recall needs a nonempty gold set".into()));
    }
    let pool: HashSet<&str> = pool.into_iter().collect();
    let hit = gold.iter().filter(|g| pool.contains(g.as_str())).count();
    Ok(hit as f64 / gold.len() as f64)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Semantic escape delta: sim(q', e_t) − max over the context of sim(q', e_i),
/// cosine similarity. Positive means the steered query escaped the context.
pub fn escape_delta(request: &[f64], target: &[f32], context: &[&[f32]]) -> Result<f64> {
    if context.is_empty() {
        return Err(Error::EmptyContext);
    }
    let sim_target = cosine(request, &widen(target));
    let max_ctx = context
        .iter()
        .map(|e| cosine(request, &widen(e)))
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(sim_target - max_ctx)
}

/// Gold items in the pool that the query-only baseline top-K missed.
pub fn rescued_items(
    pool: &[String],
    gold: &[String],
    baseline_topk: &RankedList,
) -> Vec<String> {
    let baseline: HashSet<&str> = baseline_topk.ids().collect();
    let pool: HashSet<&str> = pool.iter().map(|s| s.as_str()).collect();
    gold.iter()
        .filter(|g| pool.contains(g.as_str()) && !baseline.contains(g.as_str()))
        .cloned()
        .collect()
}

/// Mean baseline rank of rescued items; absent when nothing was rescued
/// (excluded from aggregates, not counted as zero).
pub fn rank_jump(rescued_baseline_ranks: &[usize]) -> Option<f64> {
    if rescued_baseline_ranks.is_empty() {
        return None;
    }
    Some(rescued_baseline_ranks.iter().sum::<usize>() as f64 / rescued_baseline_ranks.len() as f64)
}

/// Jump aggregates across queries that rescued at least one item.
#[derive(Debug, Clone, Serialize)]
pub struct JumpStats {
    pub mean: f64,
    /// Nearest-rank 90th percentile.
    pub p90: f64,
    pub std: f64,
    /// Number of queries contributing.
    pub queries: usize,
}

pub fn jump_stats(per_query: &[Option<f64>]) -> Option<JumpStats> {
    let mut values: Vec<f64> = per_query.iter().flatten().copied().collect();
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    // Nearest-rank percentile: ceil(p·n)-th order statistic.
    let idx = ((0.9 * n as f64).ceil() as usize).clamp(1, n) - 1;
    Some(JumpStats { mean, p90: values[idx], std: var.sqrt(), queries: n })
}

/// Per-task pool evaluation record feeding NRM and jump aggregation.
#[derive(Debug, Clone, Serialize)]
pub struct PoolRecord {
    pub qid: String,
    pub qtype: String,
    pub set_recall: f64,
    pub qo_set_recall: f64,
    /// True when the base chunk contained zero gold items.
    pub zero_gold_base: bool,
    pub jump: Option<f64>,
}

/// Noise-resilience margin: over tasks whose base retrieval contained zero
/// gold items, mean of set_recall(pool) − set_recall(query-only top-K).
/// Undefined (None) when the noisy subset is empty.
pub fn nrm(records: &[PoolRecord]) -> Option<f64> {
    let noisy: Vec<&PoolRecord> = records.iter().filter(|r| r.zero_gold_base).collect();
    if noisy.is_empty() {
        return None;
    }
    Some(noisy.iter().map(|r| r.set_recall - r.qo_set_recall).sum::<f64>() / noisy.len() as f64)
}

/// Macro/micro aggregate of one metric over grouped records.
#[derive(Debug, Clone, Serialize)]
pub struct Aggregate {
    /// Mean over all instances.
    pub micro: f64,
    /// Mean of per-group means.
    pub r#macro: f64,
    pub per_group: BTreeMap<String, f64>,
    pub count: usize,
}

/// Aggregate (group, value) records. The only supported grouping key is
/// `qtype`; anything else is rejected.
pub fn aggregate(records: &[(String, f64)], grouping: &str) -> Result<Aggregate> {
    if grouping != "qtype" {
        return Err(Error::InvalidConfig(format!("unknown grouping key {grouping:?}")));
    }
    if records.is_empty() {
        return Err(Error::InvalidConfig("cannot aggregate zero records".into()));
    }
    let micro = records.iter().map(|(_, v)| v).sum::<f64>() / records.len() as f64;
    let mut sums: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for (g, v) in records {
        let e = sums.entry(g.as_str()).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    let per_group: BTreeMap<String, f64> =
        sums.iter().map(|(g, (s, n))| (g.to_string(), s / *n as f64)).collect();
    let macro_mean = per_group.values().sum::<f64>() / per_group.len() as f64;
    Ok(Aggregate { micro, r#macro: macro_mean, per_group, count: records.len() })
}

/// Per-task diagnostics collected by the evaluation drivers.
#[derive(Debug, Clone, Serialize)]
pub struct TaskDiagnostics {
    pub qid: String,
    pub qtype: String,
    /// Exact rank of the withheld target (completion runs).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    /// R@K per requested K, non-decreasing in K.
    pub recall_at: BTreeMap<usize, u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_esc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w2: Option<f64>,
}

/// Aggregated view over per-task records plus pool diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct DiagnosticsReport {
    pub tasks: Vec<TaskDiagnostics>,
    pub micro_recall: BTreeMap<usize, f64>,
    pub macro_recall: BTreeMap<usize, f64>,
    pub recall_per_qtype: BTreeMap<usize, BTreeMap<String, f64>>,
    pub mean_delta_esc: Option<f64>,
    pub delta_esc_per_qtype: BTreeMap<String, f64>,
}

impl DiagnosticsReport {
    /// Build recall/delta aggregates from completion records.
    pub fn from_tasks(tasks: Vec<TaskDiagnostics>, ks: &[usize]) -> Result<Self> {
        let mut micro_recall = BTreeMap::new();
        let mut macro_recall = BTreeMap::new();
        let mut recall_per_qtype = BTreeMap::new();
        for &k in ks {
            let records: Vec<(String, f64)> = tasks
                .iter()
                .map(|t| (t.qtype.clone(), *t.recall_at.get(&k).unwrap_or(&0) as f64))
                .collect();
            let agg = aggregate(&records, "qtype")?;
            micro_recall.insert(k, agg.micro);
            macro_recall.insert(k, agg.r#macro);
            recall_per_qtype.insert(k, agg.per_group);
        }
        let deltas: Vec<(String, f64)> = tasks
            .iter()
            .filter_map(|t| t.delta_esc.map(|d| (t.qtype.clone(), d)))
            .collect();
        let (mean_delta_esc, delta_esc_per_qtype) = if deltas.is_empty() {
            (None, BTreeMap::new())
        } else {
            let agg = aggregate(&deltas, "qtype")?;
            (Some(agg.micro), agg.per_group)
        };
        Ok(DiagnosticsReport {
            tasks,
            micro_recall,
            macro_recall,
            recall_per_qtype,
            mean_delta_esc,
            delta_esc_per_qtype,
        })
    }
}

// ── evaluation drivers ──────────────────────────────────────────────────

/// Evidence-set-completion evaluation over expanded tasks: per-task rank,
/// R@K at every requested K, escape delta, and steering diagnostics.
pub fn evaluate_completion(
    index: &CorpusIndex,
    tasks: &[RetrievalTask],
    mode: &RequestMode<'_>,
    ks: &[usize],
) -> Result<DiagnosticsReport> {
    if tasks.is_empty() {
        return Err(Error::InvalidConfig("no tasks to evaluate".into()));
    }
    let k_max = ks.iter().copied().max().unwrap_or(10);
    // Collect into Vec<Result> first: this keeps task order regardless of
    // rayon scheduling.
    let records: Vec<Result<TaskDiagnostics>> = tasks
        .par_iter()
        .map(|task| -> Result<TaskDiagnostics> {
            let out = complete_evidence(index, task, mode, k_max)?;
            let target_row = index.row_of(task.target.as_ref().unwrap())?;
            let ctx_vecs: Vec<&[f32]> = task
                .context
                .iter()
                .map(|id| index.row_of(id).map(|r| index.vector(r)))
                .collect::<Result<_>>()?;
            let request: Vec<f64> = match &out.steered {
                Some(s) => s.h_req.clone(),
                None => task.query.iter().map(|&v| v as f64).collect(),
            };
            let delta = escape_delta(&request, index.vector(target_row), &ctx_vecs)?;
            let recall_at: BTreeMap<usize, u8> =
                ks.iter().map(|&k| (k, recall_at_k(Some(out.target_rank), k))).collect();
            Ok(TaskDiagnostics {
                qid: task.qid.clone(),
                qtype: task.qtype.clone().unwrap_or_else(|| "unlabeled".into()),
                rank: Some(out.target_rank),
                recall_at,
                delta_esc: Some(delta),
                gate: out.steered.as_ref().and_then(|s| s.gate),
                w1: out.steered.as_ref().and_then(|s| s.weights.map(|w| w.0)),
                w2: out.steered.as_ref().and_then(|s| s.weights.map(|w| w.1)),
            })
        })
        .collect();
    let records: Vec<TaskDiagnostics> = records.into_iter().collect::<Result<_>>()?;
    DiagnosticsReport::from_tasks(records, ks)
}

/// Aggregates of one sequential pool evaluation.
#[derive(Debug, Clone, Serialize)]
pub struct PoolSummary {
    pub schedule: String,
    pub mode: String,
    pub mean_set_recall: f64,
    pub qo_mean_set_recall: f64,
    pub set_recall_per_qtype: BTreeMap<String, f64>,
    pub jump: Option<JumpStats>,
    pub nrm: Option<f64>,
    pub noisy_tasks: usize,
    pub exhausted_pools: usize,
}

/// Sequential pool construction over all tasks with the query-only baseline
/// computed at the same K and exclusions: per-task Set-Recall, rescued-item
/// jumps, zero-gold-base membership, and the aggregate summary.
pub fn evaluate_pools(
    index: &CorpusIndex,
    tasks: &[RetrievalTask],
    schedule: &StepSchedule,
    mode: &RequestMode<'_>,
) -> Result<(Vec<PoolRecord>, PoolSummary)> {
    if tasks.is_empty() {
        return Err(Error::InvalidConfig("no tasks to evaluate".into()));
    }
    let k = schedule.k();
    let base = schedule.base();
    let no_exclusions = HashSet::new();

    let results: Vec<Result<(PoolRecord, bool)>> = tasks
        .par_iter()
        .map(|task| -> Result<(PoolRecord, bool)> {
            let state = build_pool(index, &task.qid, &task.query, schedule, mode)?;
            let qo = top_k(index, &task.query, k, &no_exclusions)?;

            let sr = set_recall(state.pool.iter().map(|s| s.as_str()), &task.gold)?;
            let qo_sr = set_recall(qo.ids(), &task.gold)?;
            // The base chunk of any builder is the query-only top-A prefix.
            let gold: HashSet<&str> = task.gold.iter().map(|s| s.as_str()).collect();
            let zero_gold_base = qo.hits[..base.min(qo.hits.len())]
                .iter()
                .all(|h| !gold.contains(h.id.as_str()));

            let rescued = rescued_items(&state.pool, &task.gold, &qo);
            let mut ranks = Vec::with_capacity(rescued.len());
            for id in &rescued {
                match rank_of(index, &task.query, id, &no_exclusions)? {
                    RankOutcome::Rank(r) => ranks.push(r),
                    RankOutcome::Excluded => unreachable!("baseline has no exclusions"),
                }
            }
            let record = PoolRecord {
                qid: task.qid.clone(),
                qtype: task.qtype.clone().unwrap_or_else(|| "unlabeled".into()),
                set_recall: sr,
                qo_set_recall: qo_sr,
                zero_gold_base,
                jump: rank_jump(&ranks),
            };
            Ok((record, state.exhausted))
        })
        .collect();
    let results: Vec<(PoolRecord, bool)> = results.into_iter().collect::<Result<_>>()?;

    let exhausted_pools = results.iter().filter(|(_, e)| *e).count();
    let records: Vec<PoolRecord> = results.into_iter().map(|(r, _)| r).collect();

    let sr_records: Vec<(String, f64)> =
        records.iter().map(|r| (r.qtype.clone(), r.set_recall)).collect();
    let agg = aggregate(&sr_records, "qtype")?;
    let per_query_jumps: Vec<Option<f64>> = records.iter().map(|r| r.jump).collect();
    let summary = PoolSummary {
        schedule: schedule.to_string(),
        mode: mode.name().to_string(),
        mean_set_recall: agg.micro,
        qo_mean_set_recall: records.iter().map(|r| r.qo_set_recall).sum::<f64>()
            / records.len() as f64,
        set_recall_per_qtype: agg.per_group,
        jump: jump_stats(&per_query_jumps),
        nrm: nrm(&records),
        noisy_tasks: records.iter().filter(|r| r.zero_gold_base).count(),
        exhausted_pools,
    };
    Ok((records, summary))
}

// ── report writers ──────────────────────────────────────────────────────

/// Leading `# key=value` provenance lines shared by all CSV reports.
pub fn write_config_echo<W: Write>(mut w: W, config: &BTreeMap<String, String>) -> Result<()> {
    for (k, v) in config {
        writeln!(w, "# {k}={v}")?;
    }
    Ok(())
}

/// Per-task completion CSV: qid, qtype, rank, R@K columns, delta_esc, gate,
/// w1, w2.
pub fn write_completion_csv<W: Write>(
    mut w: W,
    report: &DiagnosticsReport,
    ks: &[usize],
    config: &BTreeMap<String, String>,
) -> Result<()> {
    write_config_echo(&mut w, config)?;
    let k_cols: Vec<String> = ks.iter().map(|k| format!("r{k}")).collect();
    writeln!(w, "qid,qtype,rank,{},delta_esc,gate,w1,w2", k_cols.join(","))?;
    for t in &report.tasks {
        let rank = t.rank.map(|r| r.to_string()).unwrap_or_default();
        let recalls: Vec<String> =
            ks.iter().map(|k| t.recall_at.get(k).copied().unwrap_or(0).to_string()).collect();
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            t.qid,
            t.qtype,
            rank,
            recalls.join(","),
            opt(t.delta_esc),
            opt(t.gate),
            opt(t.w1),
            opt(t.w2),
        )?;
    }
    Ok(())
}

/// Per-task pool CSV: qid, qtype, set_recall, qo_set_recall, zero_gold_base,
/// jump.
pub fn write_pool_csv<W: Write>(
    mut w: W,
    records: &[PoolRecord],
    config: &BTreeMap<String, String>,
) -> Result<()> {
    write_config_echo(&mut w, config)?;
    writeln!(w, "qid,qtype,set_recall,qo_set_recall,zero_gold_base,jump")?;
    for r in records {
        writeln!(
            w,
            "{},{},{:.6},{:.6},{},{}",
            r.qid,
            r.qtype,
            r.set_recall,
            r.qo_set_recall,
            r.zero_gold_base,
            r.jump.map(|j| format!("{j:.6}")).unwrap_or_default(),
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search::ScoredHit;

    #[test]
    fn recall_thresholds() {
        assert_eq!(recall_at_k(Some(3), 5), 1);
        assert_eq!(recall_at_k(Some(6), 5), 0);
        assert_eq!(recall_at_k(None, 5), 0);
        assert_eq!(recall_at_k(Some(5), 5), 1);
    }

    #[test]
    fn recall_is_monotone_in_k() {
        for rank in [1usize, 4, 9, 20] {
            let mut prev = 0;
            for k in 1..25 {
                let r = recall_at_k(Some(rank), k);
                assert!(r >= prev);
                prev = r;
            }
        }
    }

    #[test]
    fn set_recall_fractions() {
        let gold = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let pool = ["a", "b", "x", "y"];
        let r = set_recall(pool.iter().copied(), &gold).unwrap();
        assert!((r - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(set_recall(["a", "b", "c", "d"].iter().copied(), &gold).unwrap(), 1.0);
        assert_eq!(set_recall(["x"].iter().copied(), &gold).unwrap(), 0.0);
        assert!(set_recall(["x"].iter().copied(), &[]).is_err());
    }

    #[test]
    fn escape_delta_arithmetic() {
        // sim to target 0.8 and best context sim 0.9 → −0.1.
        let request = vec![1.0, 0.0];
        let target: Vec<f32> = vec![0.8, 0.6]; // cos = 0.8
        let ctx1: Vec<f32> = vec![0.9, (1.0f32 - 0.81).sqrt()]; // cos = 0.9
        let ctx2: Vec<f32> = vec![0.0, 1.0]; // cos = 0
        let d = escape_delta(&request, &target, &[&ctx1, &ctx2]).unwrap();
        assert!((d + 0.1).abs() < 1e-6, "delta {d}");
    }

    #[test]
    fn escape_delta_self_similarity_bound() {
        // q' equal to the target: first term is 1, so delta >= 0.
        let request = vec![0.6, 0.8];
        let target: Vec<f32> = vec![0.6, 0.8];
        let ctx: Vec<f32> = vec![1.0, 0.0];
        let d = escape_delta(&request, &target, &[&ctx]).unwrap();
        assert!(d >= 0.0);
        // Equality iff some context item also has similarity 1.
        let same: Vec<f32> = vec![0.6, 0.8];
        let d2 = escape_delta(&request, &target, &[&same]).unwrap();
        assert!(d2.abs() < 1e-7);
    }

    #[test]
    fn escape_delta_is_rotation_invariant() {
        // Joint 2D rotation leaves cosines unchanged.
        let rotate = |v: &[f32], th: f32| -> Vec<f32> {
            vec![v[0] * th.cos() - v[1] * th.sin(), v[0] * th.sin() + v[1] * th.cos()]
        };
        let request = vec![0.3, -0.7];
        let target: Vec<f32> = vec![0.5, 0.5];
        let ctx: Vec<f32> = vec![-0.2, 0.9];
        let base = escape_delta(&request, &target, &[&ctx]).unwrap();
        for th in [0.3f32, 1.1, 2.7] {
            let rq: Vec<f64> =
                rotate(&[request[0] as f32, request[1] as f32], th).iter().map(|&v| v as f64).collect();
            let rt = rotate(&target, th);
            let rc = rotate(&ctx, th);
            let d = escape_delta(&rq, &rt, &[&rc]).unwrap();
            assert!((d - base).abs() < 1e-6);
        }
    }

    fn ranked(ids: &[&str]) -> RankedList {
        RankedList {
            hits: ids
                .iter()
                .enumerate()
                .map(|(i, id)| ScoredHit {
                    id: id.to_string(),
                    row: i as u32,
                    score: 1.0 - i as f32 * 0.01,
                    rank: i + 1,
                })
                .collect(),
            excluded: 0,
        }
    }

    #[test]
    fn rescued_items_come_from_outside_baseline() {
        let pool: Vec<String> = ["g1", "d1", "g2"].iter().map(|s| s.to_string()).collect();
        let gold: Vec<String> = ["g1", "g2", "g3"].iter().map(|s| s.to_string()).collect();
        let baseline = ranked(&["d1", "g1", "d2"]);
        let rescued = rescued_items(&pool, &gold, &baseline);
        assert_eq!(rescued, vec!["g2".to_string()]);
    }

    #[test]
    fn jump_means() {
        assert_eq!(rank_jump(&[30]), Some(30.0));
        assert_eq!(rank_jump(&[30, 40]), Some(35.0));
        assert_eq!(rank_jump(&[]), None);
    }

    #[test]
    fn empty_rescue_sets_are_skipped_not_zeroed() {
        let stats = jump_stats(&[Some(30.0), None, Some(40.0), None]).unwrap();
        assert_eq!(stats.queries, 2);
        assert!((stats.mean - 35.0).abs() < 1e-12);
        assert!(jump_stats(&[None, None]).is_none());
    }

    #[test]
    fn p90_uses_nearest_rank() {
        let per_query: Vec<Option<f64>> = (1..=10).map(|v| Some(v as f64)).collect();
        let stats = jump_stats(&per_query).unwrap();
        assert_eq!(stats.p90, 9.0);
    }

    fn pool_record(qid: &str, sr: f64, qo: f64, noisy: bool) -> PoolRecord {
        PoolRecord {
            qid: qid.into(),
            qtype: "compose".into(),
            set_recall: sr,
            qo_set_recall: qo,
            zero_gold_base: noisy,
            jump: None,
        }
    }

    #[test]
    fn nrm_of_identical_builders_is_zero() {
        let records = vec![pool_record("a", 0.5, 0.5, true), pool_record("b", 1.0, 1.0, true)];
        assert_eq!(nrm(&records), Some(0.0));
    }

    #[test]
    fn nrm_arithmetic() {
        // Builder recovers 1 of 2 gold where the baseline recovers 0 → +0.5.
        let records = vec![pool_record("a", 0.5, 0.0, true), pool_record("b", 0.5, 0.0, true)];
        assert_eq!(nrm(&records), Some(0.5));
    }

    #[test]
    fn nrm_without_noisy_tasks_is_undefined() {
        let records = vec![pool_record("a", 0.5, 0.0, false)];
        assert_eq!(nrm(&records), None);
    }

    #[test]
    fn aggregate_macro_vs_micro() {
        // Means 0.2 (n=10) and 0.4 (n=30): macro 0.3, micro 0.35.
        let mut records = Vec::new();
        for _ in 0..10 {
            records.push(("t1".to_string(), 0.2));
        }
        for _ in 0..30 {
            records.push(("t2".to_string(), 0.4));
        }
        let agg = aggregate(&records, "qtype").unwrap();
        assert!((agg.r#macro - 0.3).abs() < 1e-12);
        assert!((agg.micro - 0.35).abs() < 1e-12);
    }

    #[test]
    fn aggregate_single_group_macro_equals_micro() {
        let records = vec![("t".to_string(), 0.25), ("t".to_string(), 0.75)];
        let agg = aggregate(&records, "qtype").unwrap();
        assert_eq!(agg.r#macro, agg.micro);
    }

    #[test]
    fn aggregate_is_permutation_invariant() {
        let mut records = vec![
            ("a".to_string(), 0.1),
            ("b".to_string(), 0.9),
            ("a".to_string(), 0.3),
            ("b".to_string(), 0.7),
        ];
        let first = aggregate(&records, "qtype").unwrap();
        records.reverse();
        let second = aggregate(&records, "qtype").unwrap();
        assert_eq!(first.micro, second.micro);
        assert_eq!(first.r#macro, second.r#macro);
    }

    #[test]
    fn unknown_grouping_is_rejected() {
        let records = vec![("a".to_string(), 0.1)];
        assert!(aggregate(&records, "modality").is_err());
    }
}
