//! Task-adaptive routing: a binary logistic probe over the query embedding
//! and the deterministic paradigm switch between the additive and gap-aware
//! specialists.
//!
//! The probe substitutes for a text classifier since this engine only sees
//! vectors; an oracle-label mode is available for upper-bound experiments.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::steering::{
    additive_request, gap_request, read_json_line, SteeredQuery, SteeringParams,
};
use crate::tape::sigmoid;

/// Binary logistic probe over the query embedding. Once frozen it is
/// immutable and routing refuses to run on an unfrozen probe.
#[derive(Debug, Clone)]
pub struct RouterParams {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub frozen: bool,
}

impl RouterParams {
    pub fn zeros(dim: usize) -> Self {
        RouterParams { weights: vec![0.0; dim], bias: 0.0, frozen: false }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    fn logit(&self, q: &[f32]) -> Result<f64> {
        if q.len() != self.weights.len() {
            return Err(Error::DimensionMismatch {
                expected: self.weights.len(),
                got: q.len(),
                context: "route",
            });
        }
        Ok(self.weights.iter().zip(q).map(|(w, &x)| w * x as f64).sum::<f64>() + self.bias)
    }

    /// Deterministic switch: 1 iff sigmoid(w·q + b) ≥ 0.5 (logit ≥ 0; the
    /// boundary maps to 1). Refuses to run before freezing.
    pub fn route(&self, q: &[f32]) -> Result<u8> {
        if !self.frozen {
            return Err(Error::RouterNotFrozen);
        }
        Ok(if sigmoid(self.logit(q)?) >= 0.5 { 1 } else { 0 })
    }

    /// Router file: one JSON header line {dim, bias, frozen} followed by the
    /// float32 LE weight blob.
    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let header = RouterHeader { dim: self.dim(), bias: self.bias, frozen: self.frozen };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for v in &self.weights {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let header: RouterHeader = read_json_line(&mut r)?;
        let mut bytes = vec![0u8; header.dim * 4];
        r.read_exact(&mut bytes)
            .map_err(|_| Error::Truncated { declared: header.dim, found: 0 })?;
        let weights = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok(RouterParams { weights, bias: header.bias, frozen: header.frozen })
    }
}

#[derive(Serialize, Deserialize)]
struct RouterHeader {
    dim: usize,
    bias: f64,
    frozen: bool,
}

/// Training knobs for the probe.
#[derive(Debug, Clone)]
pub struct RouterTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for RouterTrainConfig {
    fn default() -> Self {
        RouterTrainConfig { epochs: 200, lr: 0.5, holdout_fraction: 0.2, seed: 0 }
    }
}

/// Held-out quality of the trained probe.
#[derive(Debug, Clone, Serialize)]
pub struct RouterReport {
    pub accuracy: f64,
    pub f1: f64,
    pub train_size: usize,
    pub holdout_size: usize,
}

/// Fit the logistic probe with full-batch gradient descent on cross-entropy.
/// Returns the frozen probe and its held-out accuracy/F1.
pub fn train_router(
    data: &[(Vec<f32>, u8)],
    cfg: &RouterTrainConfig,
) -> Result<(RouterParams, RouterReport)> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    if data.is_empty() {
        return Err(Error::InvalidConfig("router training data is empty".into()));
    }
    let classes: std::collections::HashSet<u8> = data.iter().map(|(_, y)| *y).collect();
    if classes.len() < 2 {
        return Err(Error::InvalidConfig("router training needs both classes present".into()));
    }
    let dim = data[0].0.len();

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    order.shuffle(&mut rng);
    let holdout_n = ((data.len() as f64 * cfg.holdout_fraction).round() as usize)
        .min(data.len().saturating_sub(2));
    let (holdout_idx, train_idx) = order.split_at(holdout_n);

    let mut probe = RouterParams::zeros(dim);
    let n = train_idx.len() as f64;
    for _ in 0..cfg.epochs {
        let mut grad_w = vec![0.0f64; dim];
        let mut grad_b = 0.0f64;
        for &i in train_idx {
            let (q, y) = &data[i];
            let err = sigmoid(probe.logit(q)?) - *y as f64;
            for (g, &x) in grad_w.iter_mut().zip(q) {
                *g += err * x as f64;
            }
            grad_b += err;
        }
        for (w, g) in probe.weights.iter_mut().zip(&grad_w) {
            *w -= cfg.lr * g / n;
        }
        probe.bias -= cfg.lr * grad_b / n;
    }
    probe.frozen = true;

    let eval_idx = if holdout_idx.is_empty() { train_idx } else { holdout_idx };
    let (mut correct, mut tp, mut fp, mut fne) = (0usize, 0usize, 0usize, 0usize);
    for &i in eval_idx {
        let (q, y) = &data[i];
        let pred = probe.route(q)?;
        if pred == *y {
            correct += 1;
        }
        match (pred, *y) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fne += 1,
            _ => {}
        }
    }
    let accuracy = correct as f64 / eval_idx.len() as f64;
    let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
    let recall = if tp + fne > 0 { tp as f64 / (tp + fne) as f64 } else { 0.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok((
        probe,
        RouterReport {
            accuracy,
            f1,
            train_size: train_idx.len(),
            holdout_size: holdout_idx.len(),
        },
    ))
}

/// Route decisions either from the trained probe or from oracle labels.
pub enum QueryRouter<'a> {
    Probe(&'a RouterParams),
    Oracle(&'a HashMap<String, u8>),
}

impl QueryRouter<'_> {
    pub fn decide(&self, qid: &str, q: &[f32]) -> Result<u8> {
        match self {
            QueryRouter::Probe(p) => p.route(q),
            QueryRouter::Oracle(labels) => {
                labels.get(qid).copied().ok_or_else(|| Error::UnknownId(qid.to_string()))
            }
        }
    }
}

/// Dispatch counters proving exactly one specialist runs per query.
#[derive(Debug, Default)]
pub struct DispatchCounters {
    pub additive: AtomicU64,
    pub gap: AtomicU64,
}

impl DispatchCounters {
    pub fn totals(&self) -> (u64, u64) {
        (self.additive.load(Ordering::Relaxed), self.gap.load(Ordering::Relaxed))
    }
}

/// The deterministic paradigm switch: additive when the router says 0,
/// gap-aware when it says 1. Exactly one specialist executes.
pub fn hybrid_request(
    qid: &str,
    q: &[f32],
    ctx: &[&[f32]],
    gap_params: &SteeringParams,
    tau_base: f64,
    router: &QueryRouter<'_>,
    counters: Option<&DispatchCounters>,
) -> Result<SteeredQuery> {
    match router.decide(qid, q)? {
        0 => {
            if let Some(c) = counters {
                c.additive.fetch_add(1, Ordering::Relaxed);
            }
            additive_request(q, ctx, tau_base)
        }
        _ => {
            if let Some(c) = counters {
                c.gap.fetch_add(1, Ordering::Relaxed);
            }
            gap_request(q, ctx, gap_params)
        }
    }
}

/// Route-label record emitted by the benchmark generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouteLabel {
    pub qid: String,
    pub label: u8,
}

pub fn save_labels<P: AsRef<Path>>(path: P, labels: &[RouteLabel]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for l in labels {
        serde_json::to_writer(&mut w, l)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_labels<P: AsRef<Path>>(path: P) -> Result<Vec<RouteLabel>> {
    use std::io::BufRead;
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
