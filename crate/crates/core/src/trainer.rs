//! End-to-end optimization of the steering parameters, the alignment
//! objective over per-modality linear projections, hard-distractor mining,
//! and the AdamW optimizer.
//!
//! All losses are built on the reverse-mode tape, so the retrieval success
//! signal backpropagates through attention, gate, projection subtraction,
//! mixing, and the dynamic temperature.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::corpus::{CorpusIndex, Modality, RetrievalTask};
use crate::error::{Error, Result};
use crate::search::top_k;
use crate::steering::{
    additive_request_graph, gap_request, gap_request_graph, ParamNodes, SteeringParams,
};
use crate::tape::{GradientMap, NodeRef, Tape, Tensor};

/// Training hyperparameters. Defaults: batch 32, 100 epochs, learning rate
/// 1e-4, temperature 0.05, 4 hard distractors per sample, weight decay 0.01.
#[derive(Debug, Clone, Serialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Alignment temperature (the steering loss uses the dynamic temperature).
    pub tau: f64,
    pub hard_negatives: usize,
    pub seed: u64,
    pub weight_decay: f64,
    /// Hidden width of the temperature MLP.
    pub hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 100,
            lr: 1e-4,
            tau: 0.05,
            hard_negatives: 4,
            seed: 0,
            weight_decay: 0.01,
            hidden: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidConfig("batch size and epochs must be positive".into()));
        }
        if self.lr <= 0.0 || self.tau <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig(
                "learning rate and temperature must be positive".into(),
            ));
        }
        if self.batch_size < 2 {
            log::warn!("batch size below 2: no in-batch negatives will exist");
        }
        Ok(())
    }
}

/// One training instance: query, acquired context, withheld positive, and
/// pre-mined hard distractors.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub qid: String,
    pub qtype: Option<String>,
    pub query: Vec<f32>,
    pub context_rows: Vec<u32>,
    pub positive_id: String,
    pub positive_row: u32,
    pub hard_rows: Vec<u32>,
}

/// Top `count` non-gold items under the raw-query ranking, excluding the gold
/// set and the acquired context. Returns every available non-gold id (with a
/// warning) when the corpus cannot supply `count`.
pub fn mine_hard_distractors(
    index: &CorpusIndex,
    task: &RetrievalTask,
    count: usize,
) -> Result<Vec<String>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let mut exclude = index.rows_of(task.gold.iter().map(|s| s.as_str()))?;
    exclude.extend(index.rows_of(task.context.iter().map(|s| s.as_str()))?);
    let available = index.len() - exclude.len();
    if available < count {
        log::warn!(
            "task {}: only {available} non-gold items available for {count} distractors",
            task.qid
        );
    }
    let hits = top_k(index, &task.query, count.min(available.max(1)), &exclude)?;
    Ok(hits.hits.into_iter().map(|h| h.id).collect())
}

/// Resolve tasks into training samples, mining hard distractors once per task.
pub fn prepare_samples(
    index: &CorpusIndex,
    tasks: &[RetrievalTask],
    hard_count: usize,
) -> Result<Vec<TrainSample>> {
    let mut samples = Vec::with_capacity(tasks.len());
    for task in tasks {
        let target = task.target.as_ref().ok_or_else(|| Error::InvalidTask {
            qid: task.qid.clone(),
            reason: "training needs leave-one-out expanded tasks with targets".into(),
        })?;
        if task.context.is_empty() {
            return Err(Error::InvalidTask {
                qid: task.qid.clone(),
                reason: "training needs a nonempty context".into(),
            });
        }
        let hard = mine_hard_distractors(index, task, hard_count)?;
        samples.push(TrainSample {
            qid: task.qid.clone(),
            qtype: task.qtype.clone(),
            query: task.query.clone(),
            context_rows: task
                .context
                .iter()
                .map(|id| index.row_of(id))
                .collect::<Result<_>>()?,
            positive_id: target.clone(),
            positive_row: index.row_of(target)?,
            hard_rows: hard.iter().map(|id| index.row_of(id)).collect::<Result<_>>()?,
        });
    }
    Ok(samples)
}

/// Which request construction the loss trains or evaluates.
pub enum LossMode {
    Gap { nodes: ParamNodes, use_mix: bool, log_tau_base: f64 },
    Additive { tau_base: f64 },
}

/// Steering diagnostics of one sample inside a batch graph.
pub struct SampleNodes {
    pub gate: Option<NodeRef>,
    pub w1: Option<NodeRef>,
    pub w2: Option<NodeRef>,
    pub tau: NodeRef,
}

/// Multiple-negatives ranking loss over a batch: for each sample the positive
/// competes against the other samples' positives (in-batch negatives) and the
/// sample's own hard distractors, all scored with that sample's request
/// vector and dynamic temperature.
pub fn retrieval_loss_graph(
    tape: &mut Tape,
    index: &CorpusIndex,
    batch: &[TrainSample],
    mode: &LossMode,
) -> Result<(NodeRef, Vec<SampleNodes>)> {
    if batch.is_empty() {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    {
        let mut seen = HashSet::new();
        for s in batch {
            if !seen.insert(s.positive_id.as_str()) {
                return Err(Error::InvalidConfig(format!(
                    "duplicate positive {:?} in batch breaks in-batch negatives",
                    s.positive_id
                )));
            }
        }
    }
    if batch.len() == 1 && batch[0].hard_rows.is_empty() {
        log::warn!("batch of 1 with no hard distractors: retrieval loss is degenerate (0)");
    }

    let unit_row = |tape: &mut Tape, row: u32| -> Result<NodeRef> {
        // Candidates are constants; fold their norm into the leaf so scores
        // are exact cosines even if a row drifted off unit norm.
        let v = index.vector(row);
        let norm = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::ZeroNorm(index.id(row).to_string()));
        }
        let unit: Vec<f64> = v.iter().map(|&x| x as f64 / norm).collect();
        tape.input(&unit)
    };

    let mut per_sample_losses = Vec::with_capacity(batch.len());
    let mut diagnostics = Vec::with_capacity(batch.len());
    for (x, sample) in batch.iter().enumerate() {
        let q = tape.input_f32(&sample.query)?;
        let ctx: Vec<NodeRef> = sample
            .context_rows
            .iter()
            .map(|&r| tape.input_f32(index.vector(r)))
            .collect::<Result<_>>()?;

        let (h_req, tau, nodes) = match mode {
            LossMode::Gap { nodes, use_mix, log_tau_base } => {
                let g = gap_request_graph(tape, q, &ctx, nodes, *use_mix, *log_tau_base)?;
                let (w1, w2) = g.weights.unzip_refs();
                (g.h_req, g.tau, SampleNodes { gate: g.gate, w1, w2, tau: g.tau })
            }
            LossMode::Additive { tau_base } => {
                let g = additive_request_graph(tape, q, &ctx, *tau_base)?;
                (g.h_req, g.tau, SampleNodes { gate: None, w1: None, w2: None, tau: g.tau })
            }
        };

        let norm_sq = tape.dot(h_req, h_req)?;
        let norm_h = tape.sqrt(norm_sq)?;
        let denom = tape.mul(norm_h, tau)?;

        let mut scores = Vec::new();
        let pos = unit_row(tape, sample.positive_row)?;
        let pos_dot = tape.dot(h_req, pos)?;
        scores.push(tape.div(pos_dot, denom)?);
        for (y, other) in batch.iter().enumerate() {
            if y == x {
                continue;
            }
            let neg = unit_row(tape, other.positive_row)?;
            let d = tape.dot(h_req, neg)?;
            scores.push(tape.div(d, denom)?);
        }
        for &z in &sample.hard_rows {
            let neg = unit_row(tape, z)?;
            let d = tape.dot(h_req, neg)?;
            scores.push(tape.div(d, denom)?);
        }

        let stacked = tape.concat(&scores)?;
        let lse = tape.logsumexp(stacked)?;
        let pos_score = tape.index(stacked, 0)?;
        per_sample_losses.push(tape.sub(lse, pos_score)?);
        diagnostics.push(nodes);
    }

    let mut total = per_sample_losses[0];
    for l in &per_sample_losses[1..] {
        total = tape.add(total, *l)?;
    }
    let inv_n = tape.constant(1.0 / batch.len() as f64)?;
    let loss = tape.mul(total, inv_n)?;
    Ok((loss, diagnostics))
}

trait UnzipRefs {
    fn unzip_refs(&self) -> (Option<NodeRef>, Option<NodeRef>);
}

impl UnzipRefs for Option<(NodeRef, NodeRef)> {
    fn unzip_refs(&self) -> (Option<NodeRef>, Option<NodeRef>) {
        match self {
            Some((a, b)) => (Some(*a), Some(*b)),
            None => (None, None),
        }
    }
}

/// Per-sample steering statistics extracted from a batch graph.
#[derive(Debug, Clone, Copy)]
pub struct SampleStats {
    pub gate: Option<f64>,
    pub w1: Option<f64>,
    pub w2: Option<f64>,
    pub tau: f64,
}

/// Value-level retrieval loss for a batch under the given parameters.
pub fn retrieval_loss(
    index: &CorpusIndex,
    batch: &[TrainSample],
    params: &SteeringParams,
    mode: crate::steering::SteeringMode,
) -> Result<(f64, Vec<SampleStats>)> {
    let mut tape = Tape::new();
    let loss_mode = match mode {
        crate::steering::SteeringMode::Gap => LossMode::Gap {
            nodes: params.register(&mut tape)?,
            use_mix: params.use_mix,
            log_tau_base: params.log_tau_base,
        },
        crate::steering::SteeringMode::Additive => {
            LossMode::Additive { tau_base: params.tau_base() }
        }
    };
    let (loss, diag) = retrieval_loss_graph(&mut tape, index, batch, &loss_mode)?;
    let stats = diag
        .iter()
        .map(|d| SampleStats {
            gate: d.gate.map(|n| tape.scalar_value(n)),
            w1: d.w1.map(|n| tape.scalar_value(n)),
            w2: d.w2.map(|n| tape.scalar_value(n)),
            tau: tape.scalar_value(d.tau),
        })
        .collect();
    Ok((tape.scalar_value(loss), stats))
}

// ── AdamW ───────────────────────────────────────────────────────────────

/// Decoupled-weight-decay Adam with bias correction.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay }
    }
}

/// First/second moment buffers per parameter plus the step counter.
#[derive(Debug, Default)]
pub struct OptimState {
    m: BTreeMap<&'static str, Vec<f64>>,
    v: BTreeMap<&'static str, Vec<f64>>,
    pub step: u64,
    pub skipped: u64,
}

/// Apply one AdamW update. A non-finite gradient skips the step (reported via
/// the return value and the skip counter).
pub fn adamw_step(
    opt: &AdamW,
    state: &mut OptimState,
    params: &mut [(&'static str, &mut Tensor)],
    grads: &GradientMap,
) -> Result<bool> {
    if !grads.is_finite() {
        state.skipped += 1;
        log::warn!("non-finite gradient: optimizer step skipped");
        return Ok(false);
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    for (name, tensor) in params.iter_mut() {
        let n = tensor.len();
        let zero = vec![0.0; n];
        let g = grads.get(name).map(|t| t.data()).unwrap_or(&zero);
        if g.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: g.len(),
                context: "adamw gradient shape",
            });
        }
        let m = state.m.entry(name).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name).or_insert_with(|| vec![0.0; n]);
        let w = tensor.data_mut();
        for i in 0..n {
            w[i] *= 1.0 - opt.lr * opt.weight_decay;
            m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g[i];
            v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            w[i] -= opt.lr * m_hat / (v_hat.sqrt() + opt.eps);
        }
    }
    Ok(true)
}

// ── steering training ───────────────────────────────────────────────────

/// One row of the training report CSV.
#[derive(Debug, Clone, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_g: f64,
    pub std_g: f64,
    pub mean_w1: f64,
    pub mean_w2: f64,
}

/// Mean/standard deviation of the gate and mixing weights for one group.
#[derive(Debug, Clone, Serialize)]
pub struct GateStats {
    pub count: usize,
    pub mean_g: f64,
    pub std_g: f64,
    pub mean_w1: f64,
    pub std_w1: f64,
    pub mean_w2: f64,
    pub std_w2: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRow>,
    /// Gate/weight statistics per question type, plus an `overall` row.
    pub gate_stats: BTreeMap<String, GateStats>,
}

impl TrainReport {
    /// CSV with columns epoch, mean_loss, mean_g, std_g, mean_w1, mean_w2.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "epoch,mean_loss,mean_g,std_g,mean_w1,mean_w2")?;
        for row in &self.epochs {
            writeln!(
                w,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                row.epoch, row.mean_loss, row.mean_g, row.std_g, row.mean_w1, row.mean_w2
            )?;
        }
        Ok(())
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Optimize the gap-aware steering parameters end-to-end on leave-one-out
/// expanded tasks. Returns the trained parameters and the loss curve plus
/// gate/weight statistics per question type.
pub fn train_steering(
    index: &CorpusIndex,
    tasks: &[RetrievalTask],
    cfg: &TrainConfig,
    use_mix: bool,
) -> Result<(SteeringParams, TrainReport)> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::InvalidConfig("no training tasks".into()));
    }
    let samples = prepare_samples(index, tasks, cfg.hard_negatives)?;
    let mut params = SteeringParams::init(index.dim(), cfg.hidden, cfg.seed);
    params.use_mix = use_mix;

    let opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut state = OptimState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);

        let mut losses = Vec::new();
        let mut gates = Vec::new();
        let mut w1s = Vec::new();
        let mut w2s = Vec::new();

        let mut remaining = order;
        while !remaining.is_empty() {
            // Greedy batch fill keeping positives distinct within the batch;
            // collisions roll over to the next batch.
            let mut batch_idx = Vec::new();
            let mut seen: HashSet<&str> = HashSet::new();
            let mut rest = Vec::new();
            for idx in remaining.drain(..) {
                if batch_idx.len() < cfg.batch_size
                    && seen.insert(samples[idx].positive_id.as_str())
                {
                    batch_idx.push(idx);
                } else {
                    rest.push(idx);
                }
            }
            remaining = rest;

            let batch: Vec<TrainSample> =
                batch_idx.iter().map(|&i| samples[i].clone()).collect();
            let mut tape = Tape::new();
            let nodes = params.register(&mut tape)?;
            let mode = LossMode::Gap {
                nodes,
                use_mix: params.use_mix,
                log_tau_base: params.log_tau_base,
            };
            let (loss, diag) = retrieval_loss_graph(&mut tape, index, &batch, &mode)?;
            let grads = tape.backward(loss)?;

            for d in &diag {
                if let Some(g) = d.gate {
                    gates.push(tape.scalar_value(g));
                }
                if let Some(w1) = d.w1 {
                    w1s.push(tape.scalar_value(w1));
                }
                if let Some(w2) = d.w2 {
                    w2s.push(tape.scalar_value(w2));
                }
            }
            for _ in 0..batch.len() {
                losses.push(tape.scalar_value(loss));
            }

            let mut tensors = params.tensors_mut();
            adamw_step(&opt, &mut state, &mut tensors, &grads)?;
        }

        let (mean_loss, _) = mean_std(&losses);
        let (mean_g, std_g) = mean_std(&gates);
        let (mean_w1, _) = mean_std(&w1s);
        let (mean_w2, _) = mean_std(&w2s);
        rows.push(EpochRow { epoch, mean_loss, mean_g, std_g, mean_w1, mean_w2 });
    }

    let gate_stats = gate_weight_stats(index, tasks, &params)?;
    Ok((params, TrainReport { epochs: rows, gate_stats }))
}

/// Gate/weight distribution per question type under the given parameters
/// (inference pass over all tasks), mirroring the trained-model statistics
/// table. Includes an `overall` row.
pub fn gate_weight_stats(
    index: &CorpusIndex,
    tasks: &[RetrievalTask],
    params: &SteeringParams,
) -> Result<BTreeMap<String, GateStats>> {
    let mut by_type: BTreeMap<String, (Vec<f64>, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut overall = (Vec::new(), Vec::new(), Vec::new());
    for task in tasks {
        if task.context.is_empty() {
            continue;
        }
        let ctx: Vec<&[f32]> = task
            .context
            .iter()
            .map(|id| index.row_of(id).map(|r| index.vector(r)))
            .collect::<Result<_>>()?;
        let out = gap_request(&task.query, &ctx, params)?;
        let qtype = task.qtype.clone().unwrap_or_else(|| "unlabeled".into());
        let entry = by_type.entry(qtype).or_default();
        if let Some(g) = out.gate {
            entry.0.push(g);
            overall.0.push(g);
        }
        if let Some((w1, w2)) = out.weights {
            entry.1.push(w1);
            entry.2.push(w2);
            overall.1.push(w1);
            overall.2.push(w2);
        }
    }
    let to_stats = |(g, w1, w2): &(Vec<f64>, Vec<f64>, Vec<f64>)| {
        let (mean_g, std_g) = mean_std(g);
        let (mean_w1, std_w1) = mean_std(w1);
        let (mean_w2, std_w2) = mean_std(w2);
        GateStats { count: g.len(), mean_g, std_g, mean_w1, std_w1, mean_w2, std_w2 }
    };
    let mut out: BTreeMap<String, GateStats> =
        by_type.iter().map(|(k, v)| (k.clone(), to_stats(v))).collect();
    out.insert("overall".into(), to_stats(&overall));
    Ok(out)
}

// ── alignment ───────────────────────────────────────────────────────────

/// Anchor construction for the alignment objective. CLS-style and query-set
/// anchors enter through externally supplied vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignmentStrategy {
    Centroid,
    QueryEvidence,
    ExternalAnchor,
}

impl std::str::FromStr for AlignmentStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "centroid" => Ok(AlignmentStrategy::Centroid),
            "query_evidence" => Ok(AlignmentStrategy::QueryEvidence),
            "external" | "external_anchor" => Ok(AlignmentStrategy::ExternalAnchor),
            other => Err(Error::InvalidConfig(format!("unknown alignment strategy {other:?}"))),
        }
    }
}

/// One evidence chain: the query, its gold evidence with modalities, and an
/// optional externally supplied anchor.
#[derive(Debug, Clone)]
pub struct AlignmentChain {
    pub qid: String,
    pub query: Vec<f32>,
    pub evidence: Vec<(Modality, Vec<f32>)>,
    pub anchor: Option<Vec<f32>>,
}

/// Build chains from tasks by resolving gold ids against the corpus.
pub fn chains_from_tasks(
    index: &CorpusIndex,
    tasks: &[RetrievalTask],
) -> Result<Vec<AlignmentChain>> {
    tasks
        .iter()
        .map(|t| {
            let evidence = t
                .gold
                .iter()
                .map(|id| {
                    let row = index.row_of(id)?;
                    Ok((index.modality(row), index.vector(row).to_vec()))
                })
                .collect::<Result<_>>()?;
            Ok(AlignmentChain {
                qid: t.qid.clone(),
                query: t.query.clone(),
                evidence,
                anchor: t.anchor.clone(),
            })
        })
        .collect()
}

/// Per-modality square projection maps, identity-initialized.
#[derive(Debug, Clone)]
pub struct AlignmentProjections {
    pub dim: usize,
    pub text: Tensor,
    pub table: Tensor,
    pub image: Tensor,
}

pub const PROJECTION_PARAM_NAMES: [(&str, Modality); 3] = [
    ("proj_text", Modality::Text),
    ("proj_table", Modality::Table),
    ("proj_image", Modality::Image),
];

impl AlignmentProjections {
    pub fn identity(dim: usize) -> Self {
        AlignmentProjections {
            dim,
            text: Tensor::identity(dim),
            table: Tensor::identity(dim),
            image: Tensor::identity(dim),
        }
    }

    pub fn get(&self, m: Modality) -> &Tensor {
        match m {
            Modality::Text => &self.text,
            Modality::Table => &self.table,
            Modality::Image => &self.image,
        }
    }

    pub fn get_mut(&mut self, m: Modality) -> &mut Tensor {
        match m {
            Modality::Text => &mut self.text,
            Modality::Table => &mut self.table,
            Modality::Image => &mut self.image,
        }
    }

    pub fn param_name(m: Modality) -> &'static str {
        match m {
            Modality::Text => "proj_text",
            Modality::Table => "proj_table",
            Modality::Image => "proj_image",
        }
    }

    /// Apply the modality's projection to a vector (not renormalized).
    pub fn apply(&self, m: Modality, v: &[f32]) -> Vec<f32> {
        let t = self.get(m);
        let d = self.dim;
        let mut out = vec![0.0f32; d];
        for i in 0..d {
            let row = &t.data()[i * d..(i + 1) * d];
            out[i] = row.iter().zip(v).map(|(w, &x)| w * x as f64).sum::<f64>() as f32;
        }
        out
    }

    /// Same container as the steering parameter file: JSON header, `GRLP`
    /// magic, float32 LE tensors in text, table, image order.
    pub fn save<P: AsRef<std::path::Path>>(&self, path: P) -> Result<()> {
        use crate::steering::{write_tensor_f32, PARAM_MAGIC};
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(
            &mut w,
            &serde_json::json!({"kind": "alignment_projection", "dim": self.dim}),
        )?;
        w.write_all(b"\n")?;
        w.write_all(&PARAM_MAGIC)?;
        for t in [&self.text, &self.table, &self.image] {
            write_tensor_f32(&mut w, t)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load<P: AsRef<std::path::Path>>(path: P) -> Result<Self> {
        use crate::steering::{read_json_line, read_tensor, PARAM_MAGIC};
        use std::io::Read;
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let header: serde_json::Value = read_json_line(&mut r)?;
        let dim = header["dim"]
            .as_u64()
            .ok_or_else(|| Error::InvalidConfig("projection header missing dim".into()))?
            as usize;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| Error::Truncated { declared: 1, found: 0 })?;
        if magic != PARAM_MAGIC {
            return Err(Error::BadMagic { expected: PARAM_MAGIC, got: magic });
        }
        let text = read_tensor(&mut r, dim, dim)?;
        let table = read_tensor(&mut r, dim, dim)?;
        let image = read_tensor(&mut r, dim, dim)?;
        Ok(AlignmentProjections { dim, text, table, image })
    }
}

/// Anchor-evidence InfoNCE over a batch of chains (the unified alignment
/// objective): positives are the chain's own evidence, negatives all evidence
/// of the other chains, similarities are cosine at temperature `tau`.
/// Projections, when provided as parameter nodes, are applied to evidence.
pub fn alignment_loss_graph(
    tape: &mut Tape,
    batch: &[AlignmentChain],
    strategy: AlignmentStrategy,
    tau: f64,
    proj: Option<&BTreeMap<&'static str, NodeRef>>,
) -> Result<NodeRef> {
    if batch.is_empty() {
        return Err(Error::InvalidConfig("empty alignment batch".into()));
    }
    for chain in batch {
        if chain.evidence.is_empty() {
            return Err(Error::InvalidTask {
                qid: chain.qid.clone(),
                reason: "alignment chain needs evidence".into(),
            });
        }
    }

    // Projected evidence nodes per chain.
    let mut projected: Vec<Vec<NodeRef>> = Vec::with_capacity(batch.len());
    for chain in batch {
        let mut nodes = Vec::with_capacity(chain.evidence.len());
        for (m, v) in &chain.evidence {
            let raw = tape.input_f32(v)?;
            let node = match proj {
                Some(map) => {
                    let p = map[AlignmentProjections::param_name(*m)];
                    tape.matvec(p, raw)?
                }
                None => raw,
            };
            nodes.push(node);
        }
        projected.push(nodes);
    }

    // Anchors. The centroid anchor is the mean of the (projected) evidence
    // and stays differentiable; query anchors are constants.
    let mut anchors = Vec::with_capacity(batch.len());
    for (chain, nodes) in batch.iter().zip(&projected) {
        let anchor = match strategy {
            AlignmentStrategy::Centroid => {
                let mut acc = nodes[0];
                for n in &nodes[1..] {
                    acc = tape.add(acc, *n)?;
                }
                let inv = tape.constant(1.0 / nodes.len() as f64)?;
                tape.scale(acc, inv)?
            }
            AlignmentStrategy::QueryEvidence => tape.input_f32(&chain.query)?,
            AlignmentStrategy::ExternalAnchor => {
                let v = chain.anchor.as_ref().ok_or_else(|| Error::InvalidTask {
                    qid: chain.qid.clone(),
                    reason: "external_anchor strategy needs anchor_vec in the task file".into(),
                })?;
                tape.input_f32(v)?
            }
        };
        anchors.push(anchor);
    }

    let cos = |tape: &mut Tape, a: NodeRef, b: NodeRef| -> Result<NodeRef> {
        let d = tape.dot(a, b)?;
        let na2 = tape.dot(a, a)?;
        let nb2 = tape.dot(b, b)?;
        let na = tape.sqrt(na2)?;
        let nb = tape.sqrt(nb2)?;
        let denom = tape.mul(na, nb)?;
        tape.div(d, denom)
    };

    let inv_tau = tape.constant(1.0 / tau)?;
    let mut chain_losses = Vec::with_capacity(batch.len());
    for x in 0..batch.len() {
        // Negative scores are shared across this chain's positives.
        let mut neg_scores = Vec::new();
        for (y, nodes) in projected.iter().enumerate() {
            if y == x {
                continue;
            }
            for e in nodes {
                let c = cos(tape, anchors[x], *e)?;
                neg_scores.push(tape.mul(c, inv_tau)?);
            }
        }
        let mut pos_losses = Vec::new();
        for e in &projected[x] {
            let c = cos(tape, anchors[x], *e)?;
            let s = tape.mul(c, inv_tau)?;
            let mut scores = Vec::with_capacity(1 + neg_scores.len());
            scores.push(s);
            scores.extend_from_slice(&neg_scores);
            let stacked = tape.concat(&scores)?;
            let lse = tape.logsumexp(stacked)?;
            let first = tape.index(stacked, 0)?;
            pos_losses.push(tape.sub(lse, first)?);
        }
        let mut total = pos_losses[0];
        for l in &pos_losses[1..] {
            total = tape.add(total, *l)?;
        }
        let inv = tape.constant(1.0 / pos_losses.len() as f64)?;
        chain_losses.push(tape.mul(total, inv)?);
    }

    let mut total = chain_losses[0];
    for l in &chain_losses[1..] {
        total = tape.add(total, *l)?;
    }
    let inv_n = tape.constant(1.0 / batch.len() as f64)?;
    tape.mul(total, inv_n)
}

/// Value-level alignment loss (optionally under trained projections).
pub fn alignment_loss(
    batch: &[AlignmentChain],
    strategy: AlignmentStrategy,
    tau: f64,
    projections: Option<&AlignmentProjections>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let proj_nodes = match projections {
        Some(p) => {
            let mut map = BTreeMap::new();
            for (name, m) in PROJECTION_PARAM_NAMES {
                map.insert(name, tape.param(name, p.get(m))?);
            }
            Some(map)
        }
        None => None,
    };
    let loss = alignment_loss_graph(&mut tape, batch, strategy, tau, proj_nodes.as_ref())?;
    Ok(tape.scalar_value(loss))
}

/// Fit the per-modality projections by minimizing the alignment loss.
pub fn train_alignment(
    chains: &[AlignmentChain],
    strategy: AlignmentStrategy,
    cfg: &TrainConfig,
) -> Result<(AlignmentProjections, TrainReport)> {
    cfg.validate()?;
    if chains.is_empty() {
        return Err(Error::InvalidConfig("no alignment chains".into()));
    }
    let dim = chains[0].query.len();
    let mut proj = AlignmentProjections::identity(dim);
    let opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut state = OptimState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..chains.len()).collect();
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<AlignmentChain> = chunk.iter().map(|&i| chains[i].clone()).collect();
            let mut tape = Tape::new();
            let mut map = BTreeMap::new();
            for (name, m) in PROJECTION_PARAM_NAMES {
                map.insert(name, tape.param(name, proj.get(m))?);
            }
            let loss = alignment_loss_graph(&mut tape, &batch, strategy, cfg.tau, Some(&map))?;
            let grads = tape.backward(loss)?;
            for _ in 0..batch.len() {
                losses.push(tape.scalar_value(loss));
            }
            let mut tensors: Vec<(&'static str, &mut Tensor)> = vec![
                ("proj_text", &mut proj.text),
                ("proj_table", &mut proj.table),
                ("proj_image", &mut proj.image),
            ];
            adamw_step(&opt, &mut state, &mut tensors, &grads)?;
        }
        let (mean_loss, _) = mean_std(&losses);
        rows.push(EpochRow { epoch, mean_loss, mean_g: 0.0, std_g: 0.0, mean_w1: 0.0, mean_w2: 0.0 });
    }
    Ok((proj, TrainReport { epochs: rows, gate_stats: BTreeMap::new() }))
}
