//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured values. The synthetic-suite fixture (corpus generation,
//! steering training, router training, and all evaluations) is built once
//! and shared; timed criteria force the fixture first so their stopwatches
//! only cover their own work.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::time::Instant;

use once_cell::sync::Lazy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use grail_core::corpus::{CorpusIndex, EvidenceItem, Modality, RetrievalTask};
use grail_core::metrics::{evaluate_completion, evaluate_pools, DiagnosticsReport, PoolSummary};
use grail_core::pool::{build_pool, parse_schedule, RequestMode};
use grail_core::router::{train_router, QueryRouter, RouterParams, RouterReport, RouterTrainConfig};
use grail_core::search::top_k;
use grail_core::steering::{
    gap_request, subtract_projection, SteeringMode, SteeringParams, DEFAULT_TAU_BASE,
};
use grail_core::synth::{generate, SynthOutput, SynthSpec};
use grail_core::tape::{check_gradients, ParamSet, Tape};
use grail_core::trainer::{
    alignment_loss, retrieval_loss, train_steering, AlignmentChain, AlignmentProjections,
    AlignmentStrategy, LossMode, TrainConfig, TrainReport, TrainSample, PROJECTION_PARAM_NAMES,
};

const EVAL_KS: [usize; 4] = [1, 5, 10, 20];

struct Fixture {
    suite: SynthOutput,
    gap: SteeringParams,
    #[allow(dead_code)]
    gap_nomix: SteeringParams,
    train_report: TrainReport,
    probe: RouterParams,
    probe_report: RouterReport,
    label_map: HashMap<String, u8>,
    completion_additive: DiagnosticsReport,
    completion_gap: DiagnosticsReport,
    completion_hybrid_oracle: DiagnosticsReport,
    completion_hybrid_probe: DiagnosticsReport,
    pools_additive: PoolSummary,
    pools_gap: PoolSummary,
    pools_gap_nomix: PoolSummary,
    overall_w1: f64,
    build_seconds: f64,
}

static FIXTURE: Lazy<Fixture> = Lazy::new(|| {
    let started = Instant::now();
    let spec = SynthSpec::default();
    assert_eq!(spec.compose_tasks, 500);
    assert_eq!(spec.aggregation_tasks, 500);
    assert_eq!(spec.seed, 7);
    let suite = generate(&spec).expect("synthetic suite");

    let compose_tasks: Vec<RetrievalTask> = suite
        .tasks
        .iter()
        .filter(|t| t.qtype.as_deref() == Some("compose_like"))
        .cloned()
        .collect();
    let cfg = TrainConfig { lr: 0.01, seed: 7, ..TrainConfig::default() };
    let (gap, train_report) =
        train_steering(&suite.corpus, &compose_tasks, &cfg, true).expect("gap training");
    let (gap_nomix, _) =
        train_steering(&suite.corpus, &compose_tasks, &cfg, false).expect("no-mix training");

    let label_map: HashMap<String, u8> =
        suite.labels.iter().map(|l| (l.qid.clone(), l.label)).collect();
    let router_data: Vec<(Vec<f32>, u8)> = suite
        .tasks
        .iter()
        .map(|t| (t.query.clone(), label_map[&t.qid]))
        .collect();
    let (probe, probe_report) =
        train_router(&router_data, &RouterTrainConfig { seed: 7, ..Default::default() })
            .expect("router training");

    let additive_mode = RequestMode::Additive { tau_base: DEFAULT_TAU_BASE };
    let gap_mode = RequestMode::Gap(&gap);
    let completion_additive =
        evaluate_completion(&suite.corpus, &suite.tasks, &additive_mode, &EVAL_KS).unwrap();
    let completion_gap =
        evaluate_completion(&suite.corpus, &suite.tasks, &gap_mode, &EVAL_KS).unwrap();
    let oracle_mode = RequestMode::Hybrid {
        gap: &gap,
        tau_base: DEFAULT_TAU_BASE,
        router: QueryRouter::Oracle(&label_map),
        counters: None,
    };
    let completion_hybrid_oracle =
        evaluate_completion(&suite.corpus, &suite.tasks, &oracle_mode, &EVAL_KS).unwrap();
    let probe_mode = RequestMode::Hybrid {
        gap: &gap,
        tau_base: DEFAULT_TAU_BASE,
        router: QueryRouter::Probe(&probe),
        counters: None,
    };
    let completion_hybrid_probe =
        evaluate_completion(&suite.corpus, &suite.tasks, &probe_mode, &EVAL_KS).unwrap();

    let schedule = parse_schedule("3+2+3+2").unwrap();
    let (_, pools_additive) =
        evaluate_pools(&suite.corpus, &suite.tasks, &schedule, &additive_mode).unwrap();
    let (_, pools_gap) =
        evaluate_pools(&suite.corpus, &suite.tasks, &schedule, &gap_mode).unwrap();
    let (_, pools_gap_nomix) =
        evaluate_pools(&suite.corpus, &suite.tasks, &schedule, &RequestMode::Gap(&gap_nomix))
            .unwrap();

    let stats = grail_core::trainer::gate_weight_stats(&suite.corpus, &suite.tasks, &gap).unwrap();
    let overall_w1 = stats["overall"].mean_w1;

    Fixture {
        suite,
        gap,
        gap_nomix,
        train_report,
        probe,
        probe_report,
        label_map,
        completion_additive,
        completion_gap,
        completion_hybrid_oracle,
        completion_hybrid_probe,
        pools_additive,
        pools_gap,
        pools_gap_nomix,
        overall_w1,
        build_seconds: started.elapsed().as_secs_f64(),
    }
});

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
    let v: Vec<f32> = (0..d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-9);
    v.into_iter().map(|x| x / n).collect()
}

#[test]
fn criterion_1_orthogonality_at_full_gate() {
    Lazy::force(&FIXTURE);
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for &d in &[8usize, 1024] {
        for _ in 0..1000 {
            let q: Vec<f32> = (0..d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            let h: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let q_gap = subtract_projection(&q, &h, 1.0).unwrap();
            let dot: f64 = q_gap.iter().zip(&h).map(|(a, b)| a * b).sum();
            let qn: f64 = q.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            let hn: f64 = h.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ratio = dot.abs() / (qn * hn);
            worst = worst.max(ratio);
            assert!(ratio <= 1e-5, "residual ratio {ratio} at d={d}");
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 1.0, "orthogonality sweep took {elapsed:.2}s (limit 1s)");
    println!(
        "ACCEPTANCE 1 PASS: |q_gap.h_ctx| <= 1e-5 * |q||h| on 2000 pairs \
         (worst {worst:.2e}) in {elapsed:.2}s"
    );
}

fn toy_corpus(d: usize, n: usize, seed: u64) -> CorpusIndex {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    CorpusIndex::ingest((0..n).map(|i| EvidenceItem {
        id: format!("e{i:03}"),
        modality: Modality::ALL[i % 3],
        vector: random_unit(&mut rng, d),
        payload: None,
    }))
    .unwrap()
    .normalize()
    .unwrap()
}

fn random_train_batch(
    index: &CorpusIndex,
    rng: &mut ChaCha8Rng,
    n: usize,
    d: usize,
) -> Vec<TrainSample> {
    let total = index.len() as u32;
    (0..n)
        .map(|i| {
            let positive_row = (i as u32 * 5 + 1) % total;
            let mut ctx = vec![(i as u32 * 7 + 2) % total, (i as u32 * 11 + 4) % total];
            ctx.retain(|&r| r != positive_row);
            if ctx.is_empty() {
                ctx.push((positive_row + 1) % total);
            }
            TrainSample {
                qid: format!("q{i}"),
                qtype: None,
                query: random_unit(rng, d),
                context_rows: ctx,
                positive_id: index.id(positive_row).to_string(),
                positive_row,
                hard_rows: vec![(i as u32 * 13 + 3) % total],
            }
        })
        .collect()
}

fn random_chains(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<AlignmentChain> {
    (0..n)
        .map(|i| AlignmentChain {
            qid: format!("c{i}"),
            query: random_unit(rng, d),
            evidence: (0..2 + i % 2)
                .map(|j| (Modality::ALL[(i + j) % 3], random_unit(rng, d)))
                .collect(),
            anchor: None,
        })
        .collect()
}

#[test]
fn criterion_2_gradient_fidelity() {
    Lazy::force(&FIXTURE);
    let started = Instant::now();
    let d = 12;
    let hidden = 6;
    let index = toy_corpus(d, 24, 202);
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;

    for batch_idx in 0..10 {
        let batch = random_train_batch(&index, &mut rng, 4, d);
        let mut base = SteeringParams::init(d, hidden, batch_idx);
        for (_, t) in base.tensors_mut() {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
        // Steering tensors through the retrieval loss.
        let mut set = ParamSet::new();
        for (name, t) in base.tensors() {
            set.insert(name, t.clone());
        }
        let report = check_gradients(
            &set,
            |p| {
                let mut params = base.clone();
                params.w_gap = p["w_gap"].clone();
                params.w_mix = p["w_mix"].clone();
                params.temp_w1 = p["temp_w1"].clone();
                params.temp_w2 = p["temp_w2"].clone();
                let mut tape = Tape::new();
                let nodes = params.register(&mut tape)?;
                let mode = LossMode::Gap {
                    nodes,
                    use_mix: true,
                    log_tau_base: params.log_tau_base,
                };
                let (loss, _) =
                    grail_core::trainer::retrieval_loss_graph(&mut tape, &index, &batch, &mode)?;
                let grads = tape.backward(loss)?;
                Ok((tape.scalar_value(loss), grads))
            },
            1e-4,
            None,
            batch_idx,
        )
        .unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "steering batch {batch_idx}: {:?}",
            report.worst
        );
        worst = worst.max(report.max_rel_err);

        // Alignment projections through the alignment loss.
        let chains = random_chains(&mut rng, 4, d);
        let proj = AlignmentProjections::identity(d);
        let mut pset = ParamSet::new();
        pset.insert("proj_text", proj.text.clone());
        pset.insert("proj_table", proj.table.clone());
        pset.insert("proj_image", proj.image.clone());
        let report = check_gradients(
            &pset,
            |p| {
                let mut tape = Tape::new();
                let mut map = BTreeMap::new();
                for (name, _) in PROJECTION_PARAM_NAMES {
                    map.insert(name, tape.param(name, &p[name])?);
                }
                let loss = grail_core::trainer::alignment_loss_graph(
                    &mut tape,
                    &chains,
                    AlignmentStrategy::QueryEvidence,
                    0.2,
                    Some(&map),
                )?;
                let grads = tape.backward(loss)?;
                Ok((tape.scalar_value(loss), grads))
            },
            1e-4,
            Some(48),
            batch_idx,
        )
        .unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "alignment batch {batch_idx}: {:?}",
            report.worst
        );
        worst = worst.max(report.max_rel_err);
    }
    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 30.0, "gradient sweep took {elapsed:.1}s (limit 30s)");
    println!(
        "ACCEPTANCE 2 PASS: every trainable tensor matches central differences \
         (worst rel err {worst:.2e}) on 10 batches of 4 in {elapsed:.1}s"
    );
}

#[test]
fn criterion_3_search_exactness() {
    Lazy::force(&FIXTURE);
    let started = Instant::now();
    let d = 128;
    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut items: Vec<EvidenceItem> = (0..n)
        .map(|i| EvidenceItem {
            id: format!("doc{i:05}"),
            modality: Modality::Text,
            vector: random_unit(&mut rng, d),
            payload: None,
        })
        .collect();
    // Duplicate some vectors under different ids to exercise tie-breaking.
    for j in 0..20 {
        let src = j * 37;
        items[9_000 + j].vector = items[src].vector.clone();
    }
    let index = CorpusIndex::ingest(items).unwrap().normalize().unwrap();

    // Independent full-sort oracle with the (score desc, id asc) order.
    let oracle = |query: &[f32], k: usize| -> Vec<String> {
        let mut scored: Vec<(f32, String)> = (0..index.len() as u32)
            .map(|r| {
                let v = index.vector(r);
                let mut acc = [0.0f32; 4];
                for i in 0..d / 4 {
                    let j = i * 4;
                    acc[0] += query[j] * v[j];
                    acc[1] += query[j + 1] * v[j + 1];
                    acc[2] += query[j + 2] * v[j + 2];
                    acc[3] += query[j + 3] * v[j + 3];
                }
                ((acc[0] + acc[1]) + (acc[2] + acc[3]), index.id(r).to_string())
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        scored.into_iter().take(k).map(|(_, id)| id).collect()
    };

    let pool1 = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let pool4 = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let none = HashSet::new();
    for qi in 0..100 {
        let query = random_unit(&mut rng, d);
        let want = oracle(&query, 10);
        for (workers, pool) in [(1, &pool1), (4, &pool4)] {
            let got: Vec<String> = pool
                .install(|| top_k(&index, &query, 10, &none))
                .unwrap()
                .ids()
                .map(String::from)
                .collect();
            assert_eq!(got, want, "query {qi} at {workers} workers");
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 10.0, "search sweep took {elapsed:.1}s (limit 10s)");
    println!(
        "ACCEPTANCE 3 PASS: top_k matches the full-scan oracle id-for-id on \
         100 queries x 10k x 128 at 1 and 4 workers in {elapsed:.1}s"
    );
}

/// Independent scalar evaluation of the retrieval objective.
fn retrieval_oracle(
    index: &CorpusIndex,
    batch: &[TrainSample],
    params: &SteeringParams,
) -> f64 {
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let widen = |v: &[f32]| -> Vec<f64> { v.iter().map(|&x| x as f64).collect() };
    let mut total = 0.0;
    for (x, s) in batch.iter().enumerate() {
        let ctx: Vec<&[f32]> = s.context_rows.iter().map(|&r| index.vector(r)).collect();
        let steered = gap_request(&s.query, &ctx, params).unwrap();
        let tau = steered.tau_dyn;
        let p = (cos(&steered.h_req, &widen(index.vector(s.positive_row))) / tau).exp();
        let mut n = 0.0;
        for (y, o) in batch.iter().enumerate() {
            if y != x {
                n += (cos(&steered.h_req, &widen(index.vector(o.positive_row))) / tau).exp();
            }
        }
        for &z in &s.hard_rows {
            n += (cos(&steered.h_req, &widen(index.vector(z))) / tau).exp();
        }
        total += (p / (p + n)).ln();
    }
    -total / batch.len() as f64
}

/// Independent scalar evaluation of the alignment objective.
fn alignment_oracle(
    batch: &[AlignmentChain],
    strategy: AlignmentStrategy,
    tau: f64,
) -> f64 {
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let widen = |v: &[f32]| -> Vec<f64> { v.iter().map(|&x| x as f64).collect() };
    let anchor_of = |c: &AlignmentChain| -> Vec<f64> {
        match strategy {
            AlignmentStrategy::QueryEvidence => widen(&c.query),
            AlignmentStrategy::Centroid => {
                let d = c.query.len();
                let mut m = vec![0.0f64; d];
                for (_, e) in &c.evidence {
                    for (mi, &x) in m.iter_mut().zip(e) {
                        *mi += x as f64;
                    }
                }
                m.iter_mut().for_each(|x| *x /= c.evidence.len() as f64);
                m
            }
            AlignmentStrategy::ExternalAnchor => widen(c.anchor.as_ref().unwrap()),
        }
    };
    let n = batch.len() as f64;
    let mut total = 0.0;
    for (x, cx) in batch.iter().enumerate() {
        let anc = anchor_of(cx);
        let mut neg = 0.0;
        for (y, cy) in batch.iter().enumerate() {
            if y == x {
                continue;
            }
            for (_, e) in &cy.evidence {
                neg += (cos(&anc, &widen(e)) / tau).exp();
            }
        }
        let mut chain_sum = 0.0;
        for (_, e) in &cx.evidence {
            let p = (cos(&anc, &widen(e)) / tau).exp();
            chain_sum += (p / (p + neg)).ln();
        }
        total += chain_sum / cx.evidence.len() as f64;
    }
    -total / n
}

#[test]
fn criterion_4_loss_oracles() {
    Lazy::force(&FIXTURE);
    let d = 10;
    let index = toy_corpus(d, 30, 404);
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst: f64 = 0.0;

    for trial in 0..10 {
        let batch = random_train_batch(&index, &mut rng, 2 + trial % 3, d);
        let mut params = SteeringParams::init(d, 4, trial as u64);
        for (_, t) in params.tensors_mut() {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.25..0.25);
            }
        }
        let (got, _) = retrieval_loss(&index, &batch, &params, SteeringMode::Gap).unwrap();
        let want = retrieval_oracle(&index, &batch, &params);
        let diff = (got - want).abs();
        assert!(diff < 1e-10, "retrieval trial {trial}: {got} vs {want}");
        worst = worst.max(diff);
    }
    for trial in 0..10 {
        let chains = random_chains(&mut rng, 2 + trial % 3, d);
        let strategy = if trial % 2 == 0 {
            AlignmentStrategy::QueryEvidence
        } else {
            AlignmentStrategy::Centroid
        };
        let got = alignment_loss(&chains, strategy, 0.3, None).unwrap();
        let want = alignment_oracle(&chains, strategy, 0.3);
        let diff = (got - want).abs();
        assert!(diff < 1e-10, "alignment trial {trial}: {got} vs {want}");
        worst = worst.max(diff);
    }

    // Symmetric two-score cases return ln 2.
    let ln2 = 2.0f64.ln();
    let v = random_unit(&mut rng, d);
    let items = vec![
        EvidenceItem { id: "ctx".into(), modality: Modality::Text, vector: random_unit(&mut rng, d), payload: None },
        EvidenceItem { id: "pos".into(), modality: Modality::Text, vector: v.clone(), payload: None },
        EvidenceItem { id: "dup".into(), modality: Modality::Text, vector: v.clone(), payload: None },
    ];
    let tiny = CorpusIndex::ingest(items).unwrap().normalize().unwrap();
    let sample = TrainSample {
        qid: "q".into(),
        qtype: None,
        query: random_unit(&mut rng, d),
        context_rows: vec![0],
        positive_id: "pos".into(),
        positive_row: 1,
        hard_rows: vec![2],
    };
    let params = SteeringParams::init(d, 4, 9);
    let (sym_loss, _) = retrieval_loss(&tiny, &[sample], &params, SteeringMode::Gap).unwrap();
    assert!((sym_loss - ln2).abs() < 1e-9, "retrieval symmetric case {sym_loss}");

    let e = random_unit(&mut rng, d);
    let mk = |qid: &str| AlignmentChain {
        qid: qid.into(),
        query: random_unit(&mut ChaCha8Rng::seed_from_u64(5), d),
        evidence: vec![(Modality::Text, e.clone())],
        anchor: None,
    };
    let sym_align =
        alignment_loss(&[mk("a"), mk("b")], AlignmentStrategy::QueryEvidence, 0.05, None).unwrap();
    assert!((sym_align - ln2).abs() < 1e-9, "alignment symmetric case {sym_align}");

    println!(
        "ACCEPTANCE 4 PASS: losses match scalar oracles within 1e-10 on 20 \
         batches (worst {worst:.2e}); symmetric cases = ln 2"
    );
}

#[test]
fn criterion_5_pool_contracts() {
    Lazy::force(&FIXTURE);
    let d = 16;
    let index = toy_corpus(d, 200, 505);
    let params = SteeringParams::init(d, 4, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let schedules = ["10", "5+5", "3+7", "8+1+1", "3+2+3+2", "2*5", "1*10"];
    for text in schedules {
        let schedule = parse_schedule(text).unwrap();
        assert_eq!(schedule.k(), 10, "schedule {text}");
        let query = random_unit(&mut rng, d);
        for mode in [
            RequestMode::QueryOnly,
            RequestMode::Additive { tau_base: DEFAULT_TAU_BASE },
            RequestMode::Gap(&params),
        ] {
            let state = build_pool(&index, "q", &query, &schedule, &mode).unwrap();
            assert_eq!(state.pool.len(), schedule.k(), "{text} {}", mode.name());
            let unique: HashSet<&String> = state.pool.iter().collect();
            assert_eq!(unique.len(), schedule.k(), "duplicates under {text}");
            let sizes: Vec<usize> = state.blocks.iter().map(|b| b.len()).collect();
            assert_eq!(sizes, schedule.slices(), "block sizes under {text}");
            let hop_sum: usize = sizes[1..].iter().sum();
            assert_eq!(hop_sum, schedule.k() - schedule.base());
        }
    }
    println!(
        "ACCEPTANCE 5 PASS: |pool| = K with no duplicates and sum(M_t) = K - A \
         for all 7 schedule configurations x 3 modes"
    );
}

#[test]
fn criterion_6_anchoring_reproduction() {
    let f = &*FIXTURE;

    // (a) Escape delta signs on compose-like tasks.
    let gap_delta = f.completion_gap.delta_esc_per_qtype["compose_like"];
    let add_delta = f.completion_additive.delta_esc_per_qtype["compose_like"];
    assert!(gap_delta > 0.0, "gap compose delta_esc {gap_delta}");
    assert!(add_delta < 0.0, "additive compose delta_esc {add_delta}");

    // (b) Set-Recall@10 gap over additive by at least 5pp under 3+2+3+2.
    let sr_gap = f.pools_gap.mean_set_recall;
    let sr_add = f.pools_additive.mean_set_recall;
    assert!(
        sr_gap - sr_add >= 0.05,
        "SetRec@10 gap {sr_gap:.4} vs additive {sr_add:.4}"
    );

    // (c) NRM signs on the zero-gold subset.
    let nrm_gap = f.pools_gap.nrm.expect("noisy subset nonempty");
    let nrm_add = f.pools_additive.nrm.expect("noisy subset nonempty");
    assert!(nrm_gap > 0.0, "gap NRM {nrm_gap}");
    assert!(nrm_add < 0.0, "additive NRM {nrm_add}");

    // (d) Additive R@5 at least gap R@5 on aggregation-like tasks.
    let r5_add = f.completion_additive.recall_per_qtype[&5]["aggregation_like"];
    let r5_gap = f.completion_gap.recall_per_qtype[&5]["aggregation_like"];
    assert!(r5_add >= r5_gap, "aggregation R@5 additive {r5_add} vs gap {r5_gap}");

    assert!(
        f.build_seconds < 300.0,
        "suite pipeline took {:.0}s (limit 300s)",
        f.build_seconds
    );
    println!(
        "ACCEPTANCE 6 PASS: delta_esc gap {gap_delta:+.3} / additive {add_delta:+.3}; \
         SetRec@10 gap {sr_gap:.3} vs additive {sr_add:.3} (+{:.1}pp); \
         NRM gap {nrm_gap:+.3} / additive {nrm_add:+.3}; \
         aggregation R@5 additive {r5_add:.3} >= gap {r5_gap:.3}; \
         pipeline {:.0}s",
        (sr_gap - sr_add) * 100.0,
        f.build_seconds
    );
}

#[test]
fn criterion_7_hybrid_dominance() {
    let f = &*FIXTURE;
    let r1_add = f.completion_additive.micro_recall[&1];
    let r1_gap = f.completion_gap.micro_recall[&1];
    let r1_oracle = f.completion_hybrid_oracle.micro_recall[&1];
    let r1_probe = f.completion_hybrid_probe.micro_recall[&1];

    assert!(
        r1_oracle >= r1_add.max(r1_gap),
        "oracle hybrid {r1_oracle} vs max({r1_add}, {r1_gap})"
    );
    assert!(
        f.probe_report.accuracy >= 0.95,
        "probe holdout accuracy {}",
        f.probe_report.accuracy
    );
    assert!(
        r1_probe >= 0.98 * r1_oracle,
        "probe hybrid {r1_probe} vs 0.98 x oracle {r1_oracle}"
    );

    // Exclusive dispatch: per-type recall equals the routed specialist's.
    for k in EVAL_KS {
        let oracle_agg = f.completion_hybrid_oracle.recall_per_qtype[&k]["aggregation_like"];
        let add_agg = f.completion_additive.recall_per_qtype[&k]["aggregation_like"];
        assert_eq!(oracle_agg, add_agg, "hybrid/additive mismatch at K={k}");
        let oracle_cmp = f.completion_hybrid_oracle.recall_per_qtype[&k]["compose_like"];
        let gap_cmp = f.completion_gap.recall_per_qtype[&k]["compose_like"];
        assert_eq!(oracle_cmp, gap_cmp, "hybrid/gap mismatch at K={k}");
    }
    println!(
        "ACCEPTANCE 7 PASS: hybrid micro-R@1 oracle {r1_oracle:.3} >= \
         max(additive {r1_add:.3}, gap {r1_gap:.3}); probe accuracy {:.3}, \
         probe hybrid {r1_probe:.3}",
        f.probe_report.accuracy
    );
}

#[test]
fn criterion_8_ablation_and_statistics() {
    let f = &*FIXTURE;
    assert!(f.overall_w1 > 0.99, "mean w1 {} after training", f.overall_w1);
    let final_epoch = f.train_report.epochs.last().unwrap();
    assert!(final_epoch.mean_w1 > 0.99, "final epoch mean w1 {}", final_epoch.mean_w1);

    let sr_full = f.pools_gap.mean_set_recall;
    let sr_nomix = f.pools_gap_nomix.mean_set_recall;
    assert!(
        (sr_full - sr_nomix).abs() <= 0.03,
        "no-mix SetRec@10 {sr_nomix:.4} vs full {sr_full:.4}"
    );
    println!(
        "ACCEPTANCE 8 PASS: mean w1 {:.5} > 0.99; no-mix SetRec@10 {:.4} within \
         3pp of full model {:.4}",
        f.overall_w1, sr_nomix, sr_full
    );
}

#[test]
fn criterion_9_determinism_and_round_trips() {
    let f = &*FIXTURE;
    let dir = tempfile::tempdir().unwrap();

    // Byte-identical reports from repeated seeded evaluation runs.
    let tasks = &f.suite.tasks[..64];
    let config: BTreeMap<String, String> = [
        ("seed".to_string(), "7".to_string()),
        ("mode".to_string(), "gap".to_string()),
    ]
    .into();
    let render = || -> Vec<u8> {
        let mode = RequestMode::Gap(&f.gap);
        let report = evaluate_completion(&f.suite.corpus, tasks, &mode, &EVAL_KS).unwrap();
        let mut buf = Vec::new();
        grail_core::metrics::write_completion_csv(&mut buf, &report, &EVAL_KS, &config).unwrap();
        let schedule = parse_schedule("3+2+3+2").unwrap();
        let (records, summary) =
            evaluate_pools(&f.suite.corpus, tasks, &schedule, &mode).unwrap();
        grail_core::metrics::write_pool_csv(&mut buf, &records, &config).unwrap();
        buf.extend_from_slice(serde_json::to_string(&summary).unwrap().as_bytes());
        buf
    };
    let first = render();
    let second = render();
    if first != second {
        let pos = first.iter().zip(&second).position(|(a, b)| a != b).unwrap_or(first.len());
        let lo = pos.saturating_sub(120);
        panic!(
            "reports diverge at byte {pos}:\nfirst:  {:?}\nsecond: {:?}",
            String::from_utf8_lossy(&first[lo..(pos + 120).min(first.len())]),
            String::from_utf8_lossy(&second[lo..(pos + 120).min(second.len())]),
        );
    }

    // Corpus files round-trip bitwise.
    let vp = dir.path().join("suite.grle");
    let mp = dir.path().join("suite.meta.jsonl");
    f.suite.corpus.save(&vp, &mp).unwrap();
    let loaded = CorpusIndex::load(&vp, &mp).unwrap();
    let vp2 = dir.path().join("suite2.grle");
    let mp2 = dir.path().join("suite2.meta.jsonl");
    loaded.save(&vp2, &mp2).unwrap();
    assert_eq!(std::fs::read(&vp).unwrap(), std::fs::read(&vp2).unwrap());
    assert_eq!(std::fs::read(&mp).unwrap(), std::fs::read(&mp2).unwrap());

    // Steering parameter and router files round-trip bitwise.
    let pp = dir.path().join("gap.grlp");
    f.gap.save(&pp).unwrap();
    let reloaded = SteeringParams::load(&pp).unwrap();
    let pp2 = dir.path().join("gap2.grlp");
    reloaded.save(&pp2).unwrap();
    assert_eq!(std::fs::read(&pp).unwrap(), std::fs::read(&pp2).unwrap());

    let rp = dir.path().join("router.bin");
    f.probe.save(&rp).unwrap();
    let reloaded = RouterParams::load(&rp).unwrap();
    let rp2 = dir.path().join("router2.bin");
    reloaded.save(&rp2).unwrap();
    assert_eq!(std::fs::read(&rp).unwrap(), std::fs::read(&rp2).unwrap());

    println!(
        "ACCEPTANCE 9 PASS: byte-identical reports across repeated runs; corpus, \
         steering, and router files round-trip bitwise"
    );
}

#[test]
fn suite_certificates_hold() {
    // Generator self-certification on the acceptance suite: every compose
    // instance is planted so additive anchoring fails and ideal subtraction
    // ranks the target first.
    let f = &*FIXTURE;
    let compose: Vec<_> =
        f.suite.certificates.iter().filter(|c| c.qtype == "compose_like").collect();
    assert_eq!(compose.len(), 500);
    assert!(compose.iter().all(|c| c.additive_fails && c.subtractive_first && c.rank_q > 1));
    // Route labels follow the archetype mapping.
    for t in &f.suite.tasks {
        let want = if t.qtype.as_deref() == Some("compose_like") { 1 } else { 0 };
        assert_eq!(f.label_map[&t.qid], want);
    }
    println!("ACCEPTANCE aux PASS: all 500 compose instances certified; labels consistent");
}
