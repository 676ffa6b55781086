//! Sequential pool construction: schedule parsing, the hop loop with
//! set-union accumulation, and the evidence-set-completion driver.

use std::collections::HashSet;

use crate::corpus::{CorpusIndex, RetrievalTask};
use crate::error::{Error, Result};
use crate::router::{DispatchCounters, QueryRouter};
use crate::search::{rank_of, top_k, RankOutcome, RankedList};
use crate::steering::{additive_request, gap_request, SteeredQuery, SteeringParams};

/// Ordered slice sizes `[A, M1, …, MT]`; the pool size K is their sum.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepSchedule {
    slices: Vec<usize>,
}

impl StepSchedule {
    pub fn new(slices: Vec<usize>) -> Result<Self> {
        if slices.is_empty() || slices.iter().any(|&s| s == 0) {
            return Err(Error::InvalidSchedule {
                text: format!("{slices:?}"),
                reason: "all slices must be positive".into(),
            });
        }
        Ok(StepSchedule { slices })
    }

    pub fn slices(&self) -> &[usize] {
        &self.slices
    }

    /// Initial chunk size A.
    pub fn base(&self) -> usize {
        self.slices[0]
    }

    /// Total pool size K = A + Σ M_t.
    pub fn k(&self) -> usize {
        self.slices.iter().sum()
    }

    pub fn hops(&self) -> usize {
        self.slices.len() - 1
    }
}

impl std::fmt::Display for StepSchedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.slices.iter().map(|s| s.to_string()).collect();
        write!(f, "{}", parts.join("+"))
    }
}

/// Parse a schedule string: `3+2+3+2`, `2*5`, and bracketed repeats such as
/// `[3+2]*2` (which expands to 3+2+3+2).
pub fn parse_schedule(text: &str) -> Result<StepSchedule> {
    let compact: String = text.chars().filter(|c| !c.is_whitespace()).collect();
    let err = |reason: &str| Error::InvalidSchedule {
        text: text.to_string(),
        reason: reason.to_string(),
    };
    if compact.is_empty() {
        return Err(err("empty schedule"));
    }
    let bytes = compact.as_bytes();
    let mut pos = 0usize;

    fn parse_number(bytes: &[u8], pos: &mut usize) -> Option<usize> {
        let start = *pos;
        while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
            *pos += 1;
        }
        if *pos == start {
            return None;
        }
        std::str::from_utf8(&bytes[start..*pos]).ok()?.parse().ok()
    }

    // expr := item ('+' item)* ; item := (number | '[' expr ']') ('*' number)?
    fn parse_expr(bytes: &[u8], pos: &mut usize, depth: usize) -> Result<Vec<usize>> {
        let malformed = |reason: &str| Error::InvalidSchedule {
            text: String::from_utf8_lossy(bytes).into_owned(),
            reason: reason.to_string(),
        };
        if depth > 8 {
            return Err(malformed("nesting too deep"));
        }
        let mut out = Vec::new();
        loop {
            let unit: Vec<usize> = if *pos < bytes.len() && bytes[*pos] == b'[' {
                *pos += 1;
                let inner = parse_expr(bytes, pos, depth + 1)?;
                if *pos >= bytes.len() || bytes[*pos] != b']' {
                    return Err(malformed("unclosed bracket"));
                }
                *pos += 1;
                inner
            } else {
                let n = parse_number(bytes, pos).ok_or_else(|| malformed("expected a number"))?;
                vec![n]
            };
            let unit = if *pos < bytes.len() && bytes[*pos] == b'*' {
                *pos += 1;
                let reps =
                    parse_number(bytes, pos).ok_or_else(|| malformed("expected repeat count"))?;
                if reps == 0 {
                    return Err(malformed("repeat count must be positive"));
                }
                unit.iter().cloned().cycle().take(unit.len() * reps).collect()
            } else {
                unit
            };
            out.extend(unit);
            if *pos < bytes.len() && bytes[*pos] == b'+' {
                *pos += 1;
                continue;
            }
            break;
        }
        Ok(out)
    }

    let slices = parse_expr(bytes, &mut pos, 0)?;
    if pos != bytes.len() {
        return Err(err("trailing characters"));
    }
    StepSchedule::new(slices).map_err(|_| err("zero slice"))
}

/// Which request construction drives retrieval.
pub enum RequestMode<'a> {
    /// Raw query at every hop.
    QueryOnly,
    /// LN(q + LN(h_ctx)) relevance-feedback baseline.
    Additive { tau_base: f64 },
    /// Gap-aware steering with trained parameters.
    Gap(&'a SteeringParams),
    /// Per-query switch between the two specialists; the decision is made
    /// once per query, before any search.
    Hybrid {
        gap: &'a SteeringParams,
        tau_base: f64,
        router: QueryRouter<'a>,
        counters: Option<&'a DispatchCounters>,
    },
}

impl RequestMode<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            RequestMode::QueryOnly => "query_only",
            RequestMode::Additive { .. } => "additive",
            RequestMode::Gap(_) => "gap",
            RequestMode::Hybrid { .. } => "hybrid",
        }
    }

    /// Resolve a hybrid dispatch to the underlying paradigm for `qid`.
    fn resolve(&self, qid: &str, q: &[f32]) -> Result<ResolvedMode<'_>> {
        Ok(match self {
            RequestMode::QueryOnly => ResolvedMode::QueryOnly,
            RequestMode::Additive { tau_base } => ResolvedMode::Additive { tau_base: *tau_base },
            RequestMode::Gap(p) => ResolvedMode::Gap(p),
            RequestMode::Hybrid { gap, tau_base, router, counters } => {
                match router.decide(qid, q)? {
                    0 => {
                        if let Some(c) = counters {
                            c.additive.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                        }
                        ResolvedMode::Additive { tau_base: *tau_base }
                    }
                    _ => {
                        if let Some(c) = counters {
                            c.gap.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                        }
                        ResolvedMode::Gap(gap)
                    }
                }
            }
        })
    }
}

enum ResolvedMode<'a> {
    QueryOnly,
    Additive { tau_base: f64 },
    Gap(&'a SteeringParams),
}

impl ResolvedMode<'_> {
    fn steer(&self, q: &[f32], ctx: &[&[f32]]) -> Result<Option<SteeredQuery>> {
        Ok(match self {
            ResolvedMode::QueryOnly => None,
            ResolvedMode::Additive { tau_base } => Some(additive_request(q, ctx, *tau_base)?),
            ResolvedMode::Gap(p) => Some(gap_request(q, ctx, p)?),
        })
    }
}

/// Accumulated state of one sequential pool construction.
#[derive(Debug, Clone)]
pub struct PoolState {
    /// Request vector dispatched at each hop (hop 0 is the raw query).
    pub requests: Vec<Vec<f32>>,
    /// New ids retrieved at each hop; disjoint by construction.
    pub blocks: Vec<Vec<String>>,
    /// Union of all blocks in retrieval order; |pool| = K on success.
    pub pool: Vec<String>,
    /// True when the corpus ran out before the schedule completed.
    pub exhausted: bool,
    /// Steering diagnostics per hop (absent for hop 0 and query-only mode).
    pub gates: Vec<Option<f64>>,
}

impl PoolState {
    pub fn pool_set(&self) -> HashSet<&str> {
        self.pool.iter().map(|s| s.as_str()).collect()
    }
}

/// Build a size-K pool from scratch: hop 0 retrieves the base chunk with the
/// raw query, every later hop steers the query against all accumulated
/// evidence and retrieves only new items.
pub fn build_pool(
    index: &CorpusIndex,
    qid: &str,
    query: &[f32],
    schedule: &StepSchedule,
    mode: &RequestMode<'_>,
) -> Result<PoolState> {
    if index.len() < schedule.k() {
        return Err(Error::InvalidConfig(format!(
            "corpus has {} items but the schedule needs K={}",
            index.len(),
            schedule.k()
        )));
    }
    let resolved = mode.resolve(qid, query)?;

    let mut state = PoolState {
        requests: Vec::with_capacity(schedule.slices().len()),
        blocks: Vec::with_capacity(schedule.slices().len()),
        pool: Vec::with_capacity(schedule.k()),
        exhausted: false,
        gates: Vec::with_capacity(schedule.slices().len()),
    };
    let mut excluded_rows: HashSet<u32> = HashSet::new();

    for (hop, &slice) in schedule.slices().iter().enumerate() {
        let request: Vec<f32> = if hop == 0 {
            state.gates.push(None);
            query.to_vec()
        } else {
            let ctx_vecs: Vec<&[f32]> = state
                .pool
                .iter()
                .map(|id| index.row_of(id).map(|r| index.vector(r)))
                .collect::<Result<_>>()?;
            match resolved.steer(query, &ctx_vecs)? {
                Some(steered) => {
                    state.gates.push(steered.gate);
                    steered.request_f32()
                }
                None => {
                    state.gates.push(None);
                    query.to_vec()
                }
            }
        };

        let hits = top_k(index, &request, slice, &excluded_rows)?;
        if hits.hits.len() < slice {
            log::warn!(
                "pool for {qid} exhausted the corpus at hop {hop}: wanted {slice}, got {}",
                hits.hits.len()
            );
            state.exhausted = true;
        }
        let block: Vec<String> = hits.hits.iter().map(|h| h.id.clone()).collect();
        for h in &hits.hits {
            excluded_rows.insert(h.row);
        }
        state.pool.extend(block.iter().cloned());
        state.blocks.push(block);
        state.requests.push(request);
        if state.exhausted {
            break;
        }
    }
    Ok(state)
}

/// Outcome of one evidence-set-completion step.
#[derive(Debug, Clone)]
pub struct Completion {
    pub ranked: RankedList,
    /// 1-based rank of the withheld target with the context excluded.
    pub target_rank: usize,
    /// Steering diagnostics; absent in query-only mode.
    pub steered: Option<SteeredQuery>,
}

/// One steering step from the task's gold context, then top-K retrieval with
/// the context excluded; reports the exact rank of the withheld target.
pub fn complete_evidence(
    index: &CorpusIndex,
    task: &RetrievalTask,
    mode: &RequestMode<'_>,
    k: usize,
) -> Result<Completion> {
    let target = task.target.as_ref().ok_or_else(|| Error::InvalidTask {
        qid: task.qid.clone(),
        reason: "completion needs a withheld target".into(),
    })?;
    if task.context.is_empty() {
        return Err(Error::InvalidTask {
            qid: task.qid.clone(),
            reason: "completion needs a nonempty context".into(),
        });
    }
    if task.context.iter().any(|c| c == target) {
        return Err(Error::InvalidTask {
            qid: task.qid.clone(),
            reason: "target must not be part of the context".into(),
        });
    }
    let target_row = index.row_of(target)?;

    let ctx_vecs: Vec<&[f32]> = task
        .context
        .iter()
        .map(|id| index.row_of(id).map(|r| index.vector(r)))
        .collect::<Result<_>>()?;
    let resolved = mode.resolve(&task.qid, &task.query)?;
    let steered = resolved.steer(&task.query, &ctx_vecs)?;
    let request: Vec<f32> = match &steered {
        Some(s) => s.request_f32(),
        None => task.query.clone(),
    };

    let exclude = index.rows_of(task.context.iter().map(|s| s.as_str()))?;
    debug_assert!(!exclude.contains(&target_row));
    let ranked = top_k(index, &request, k, &exclude)?;
    let target_rank = match rank_of(index, &request, target, &exclude)? {
        RankOutcome::Rank(r) => r,
        RankOutcome::Excluded => unreachable!("target is validated to be outside the context"),
    };
    Ok(Completion { ranked, target_rank, steered })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{EvidenceItem, Modality};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn parses_plus_lists() {
        let s = parse_schedule("3+2+3+2").unwrap();
        assert_eq!(s.slices(), &[3, 2, 3, 2]);
        assert_eq!(s.k(), 10);
        assert_eq!(s.base(), 3);
        assert_eq!(s.hops(), 3);
    }

    #[test]
    fn parses_repeats() {
        assert_eq!(parse_schedule("2*5").unwrap().slices(), &[2, 2, 2, 2, 2]);
        assert_eq!(parse_schedule("1*10").unwrap().slices(), &[1usize; 10]);
    }

    #[test]
    fn parses_bracketed_mixtures() {
        assert_eq!(parse_schedule("[3+2]*2").unwrap().slices(), &[3, 2, 3, 2]);
        assert_eq!(parse_schedule("8+[1]*2").unwrap().slices(), &[8, 1, 1]);
    }

    #[test]
    fn rejects_zero_slices_and_garbage() {
        assert!(parse_schedule("3+0+2").is_err());
        assert!(parse_schedule("").is_err());
        assert!(parse_schedule("3++2").is_err());
        assert!(parse_schedule("[3+2*").is_err());
        assert!(parse_schedule("3*0").is_err());
        assert!(parse_schedule("a+b").is_err());
    }

    fn random_corpus(n: usize, d: usize, seed: u64) -> CorpusIndex {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CorpusIndex::ingest((0..n).map(|i| EvidenceItem {
            id: format!("e{i:04}"),
            modality: Modality::Text,
            vector: (0..d).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
            payload: None,
        }))
        .unwrap()
        .normalize()
        .unwrap()
    }

    #[test]
    fn single_hop_schedule_equals_top_k() {
        let index = random_corpus(200, 12, 4);
        let q: Vec<f32> = (0..12).map(|i| (i as f32 * 0.1).sin()).collect();
        let schedule = StepSchedule::new(vec![10]).unwrap();
        let pool =
            build_pool(&index, "q", &q, &schedule, &RequestMode::QueryOnly).unwrap();
        let direct = top_k(&index, &q, 10, &HashSet::new()).unwrap();
        let direct_ids: Vec<&str> = direct.ids().collect();
        let pool_ids: Vec<&str> = pool.pool.iter().map(|s| s.as_str()).collect();
        assert_eq!(pool_ids, direct_ids);
    }

    #[test]
    fn query_only_multi_hop_reconstructs_top_k() {
        // With the raw query at every hop and explicit exclusion, [3,2,3,2]
        // accumulates exactly the query-only top-10.
        let index = random_corpus(300, 8, 9);
        let q: Vec<f32> = vec![0.7, -0.2, 0.4, 0.0, 0.5, -0.6, 0.1, 0.3];
        let schedule = parse_schedule("3+2+3+2").unwrap();
        let pool =
            build_pool(&index, "q", &q, &schedule, &RequestMode::QueryOnly).unwrap();
        let direct = top_k(&index, &q, 10, &HashSet::new()).unwrap();
        let direct_ids: Vec<&str> = direct.ids().collect();
        let pool_ids: Vec<&str> = pool.pool.iter().map(|s| s.as_str()).collect();
        assert_eq!(pool_ids, direct_ids);
    }

    #[test]
    fn pool_has_exact_size_and_no_duplicates() {
        let index = random_corpus(120, 10, 2);
        let params = SteeringParams::init(10, 4, 7);
        let q: Vec<f32> = (0..10).map(|i| ((i * 3 % 7) as f32 - 3.0) / 5.0).collect();
        for text in ["5+5", "3+2+3+2", "8+1+1", "1*10"] {
            let schedule = parse_schedule(text).unwrap();
            let pool =
                build_pool(&index, "q", &q, &schedule, &RequestMode::Gap(&params)).unwrap();
            assert_eq!(pool.pool.len(), schedule.k(), "schedule {text}");
            let unique: HashSet<&String> = pool.pool.iter().collect();
            assert_eq!(unique.len(), schedule.k(), "schedule {text}");
            // Block sizes follow the schedule: Σ M_t = K − A.
            let sizes: Vec<usize> = pool.blocks.iter().map(|b| b.len()).collect();
            assert_eq!(sizes, schedule.slices());
            assert!(!pool.exhausted);
        }
    }

    #[test]
    fn replay_is_deterministic() {
        let index = random_corpus(150, 8, 5);
        let params = SteeringParams::init(8, 4, 1);
        let q: Vec<f32> = vec![0.4, 0.1, -0.7, 0.2, 0.0, 0.9, -0.3, 0.5];
        let schedule = parse_schedule("3+2+3+2").unwrap();
        let a = build_pool(&index, "q", &q, &schedule, &RequestMode::Gap(&params)).unwrap();
        let b = build_pool(&index, "q", &q, &schedule, &RequestMode::Gap(&params)).unwrap();
        assert_eq!(a.pool, b.pool);
        for (ra, rb) in a.requests.iter().zip(&b.requests) {
            let bits_a: Vec<u32> = ra.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = rb.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn small_corpus_is_rejected_up_front() {
        let index = random_corpus(5, 4, 3);
        let schedule = parse_schedule("3+3").unwrap();
        let err = build_pool(
            &index,
            "q",
            &[1.0, 0.0, 0.0, 0.0],
            &schedule,
            &RequestMode::QueryOnly,
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)));
    }

    fn completion_task(index: &CorpusIndex) -> RetrievalTask {
        RetrievalTask {
            qid: "t".into(),
            query: index.vector(0).to_vec(),
            gold: vec![index.id(0).to_string(), index.id(1).to_string()],
            context: vec![index.id(1).to_string()],
            target: Some(index.id(0).to_string()),
            qtype: Some("compose".into()),
            anchor: None,
        }
    }

    #[test]
    fn completion_ranks_identical_target_first() {
        let index = random_corpus(50, 6, 11);
        let task = completion_task(&index);
        // Query equals the target vector: rank 1 under any mode.
        for mode in [
            RequestMode::QueryOnly,
            RequestMode::Additive { tau_base: 0.05 },
        ] {
            let out = complete_evidence(&index, &task, &mode, 5).unwrap();
            // Query-only matches exactly; additive is anchored toward the
            // context, so only assert the query-only case tightly.
            if matches!(mode, RequestMode::QueryOnly) {
                assert_eq!(out.target_rank, 1);
                assert_eq!(out.ranked.hits[0].id, *task.target.as_ref().unwrap());
            }
            assert!(out.ranked.ids().all(|id| id != "e0001"));
        }
    }

    #[test]
    fn completion_rejects_target_inside_context() {
        let index = random_corpus(10, 4, 1);
        let mut task = completion_task(&index);
        task.context = vec![task.target.clone().unwrap()];
        assert!(complete_evidence(&index, &task, &RequestMode::QueryOnly, 3).is_err());
    }

    #[test]
    fn completion_requires_context_and_target() {
        let index = random_corpus(10, 4, 1);
        let mut no_target = completion_task(&index);
        no_target.target = None;
        assert!(complete_evidence(&index, &no_target, &RequestMode::QueryOnly, 3).is_err());

        let mut no_ctx = completion_task(&index);
        no_ctx.context.clear();
        assert!(complete_evidence(&index, &no_ctx, &RequestMode::QueryOnly, 3).is_err());
    }

    #[test]
    fn hybrid_pool_routes_once_per_query() {
        let index = random_corpus(80, 6, 21);
        let params = SteeringParams::init(6, 4, 2);
        let mut labels = std::collections::HashMap::new();
        labels.insert("q".to_string(), 1u8);
        let counters = DispatchCounters::default();
        let mode = RequestMode::Hybrid {
            gap: &params,
            tau_base: 0.05,
            router: QueryRouter::Oracle(&labels),
            counters: Some(&counters),
        };
        let schedule = parse_schedule("3+2+3+2").unwrap();
        let q: Vec<f32> = vec![0.1, 0.5, -0.2, 0.8, 0.0, -0.4];
        build_pool(&index, "q", &q, &schedule, &mode).unwrap();
        // One routing decision despite three steered hops.
        assert_eq!(counters.totals(), (0, 1));
    }
}
