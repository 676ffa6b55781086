//! The gap-aware search mechanism: attention-based context aggregation, gated
//! context-subspace removal, adaptive mixing, dynamic temperature, and the
//! additive relevance-feedback baseline.
//!
//! Every operation exists in two forms that share one implementation: a graph
//! builder over a [`Tape`] (used by the trainer, fully differentiable) and a
//! value-level wrapper that builds a private tape and extracts the results
//! (used at inference). Inputs arrive as single-precision corpus vectors and
//! are widened at the tape boundary.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{layernorm_forward, NodeRef, Tape, Tensor};

/// Base temperature for retrieval score calibration.
pub const DEFAULT_TAU_BASE: f64 = 0.05;
/// Default hidden width of the temperature MLP.
pub const DEFAULT_HIDDEN: usize = 64;
/// Clamp range keeping the dynamic temperature (and the loss) finite.
pub const TAU_CLAMP: (f64, f64) = (1e-3, 10.0);
/// Below this norm the aggregated context is treated as information-free.
pub const DEGENERATE_CTX_NORM: f64 = 1e-8;

pub const PARAM_MAGIC: [u8; 4] = *b"GRLP";

/// Which request construction a parameter set belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SteeringMode {
    Gap,
    Additive,
}

/// Trainable tensors of the gap-aware mechanism.
///
/// Shapes: `w_gap` is 1×2d, `w_mix` is 2×2d, the temperature MLP maps
/// 2d→hidden→1 with a tanh hidden activation and no biases.
#[derive(Debug, Clone)]
pub struct SteeringParams {
    pub dim: usize,
    pub hidden: usize,
    pub use_mix: bool,
    pub mode: SteeringMode,
    pub log_tau_base: f64,
    pub w_gap: Tensor,
    pub w_mix: Tensor,
    pub temp_w1: Tensor,
    pub temp_w2: Tensor,
}

/// Tape handles for the registered steering tensors.
#[derive(Debug, Clone, Copy)]
pub struct ParamNodes {
    pub w_gap: NodeRef,
    pub w_mix: NodeRef,
    pub temp_w1: NodeRef,
    pub temp_w2: NodeRef,
}

impl SteeringParams {
    /// Fresh parameters: zero gate/mix weights (symmetric start: g = 0.5,
    /// w = (0.5, 0.5)), small seeded first MLP layer, zero second layer so
    /// the temperature starts exactly at `tau_base`.
    pub fn init(dim: usize, hidden: usize, seed: u64) -> Self {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let temp_w1 = Tensor::from_vec(
            hidden,
            2 * dim,
            (0..hidden * 2 * dim).map(|_| rng.gen_range(-0.05..0.05)).collect(),
        );
        SteeringParams {
            dim,
            hidden,
            use_mix: true,
            mode: SteeringMode::Gap,
            log_tau_base: DEFAULT_TAU_BASE.ln(),
            w_gap: Tensor::zeros(1, 2 * dim),
            w_mix: Tensor::zeros(2, 2 * dim),
            temp_w1,
            temp_w2: Tensor::zeros(1, hidden),
        }
    }

    pub fn tau_base(&self) -> f64 {
        self.log_tau_base.exp()
    }

    pub fn register(&self, tape: &mut Tape) -> Result<ParamNodes> {
        Ok(ParamNodes {
            w_gap: tape.param("w_gap", &self.w_gap)?,
            w_mix: tape.param("w_mix", &self.w_mix)?,
            temp_w1: tape.param("temp_w1", &self.temp_w1)?,
            temp_w2: tape.param("temp_w2", &self.temp_w2)?,
        })
    }

    /// Iterate the trainable tensors in file order.
    pub fn tensors(&self) -> [(&'static str, &Tensor); 4] {
        [
            ("w_gap", &self.w_gap),
            ("w_mix", &self.w_mix),
            ("temp_w1", &self.temp_w1),
            ("temp_w2", &self.temp_w2),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 4] {
        [
            ("w_gap", &mut self.w_gap),
            ("w_mix", &mut self.w_mix),
            ("temp_w1", &mut self.temp_w1),
            ("temp_w2", &mut self.temp_w2),
        ]
    }

    fn validate(&self) -> Result<()> {
        let d2 = 2 * self.dim;
        let checks = [
            (self.w_gap.rows() == 1 && self.w_gap.cols() == d2, "w_gap must be 1x2d"),
            (self.w_mix.rows() == 2 && self.w_mix.cols() == d2, "w_mix must be 2x2d"),
            (
                self.temp_w1.rows() == self.hidden && self.temp_w1.cols() == d2,
                "temp_w1 must be hidden x 2d",
            ),
            (
                self.temp_w2.rows() == 1 && self.temp_w2.cols() == self.hidden,
                "temp_w2 must be 1 x hidden",
            ),
            (self.log_tau_base.is_finite(), "log_tau_base must be finite"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::InvalidConfig(msg.into()));
            }
        }
        Ok(())
    }

    /// Parameter file: one JSON header line, `GRLP` magic, then float32 LE
    /// tensors in order w_gap, w_mix, temp_w1, temp_w2.
    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        self.validate()?;
        let mut w = BufWriter::new(File::create(path)?);
        let header = ParamHeader {
            dim: self.dim,
            hidden: self.hidden,
            use_mix: self.use_mix,
            mode: self.mode,
            log_tau_base: self.log_tau_base,
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        w.write_all(&PARAM_MAGIC)?;
        for (_, t) in self.tensors() {
            for v in t.data() {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let header: ParamHeader = read_json_line(&mut r)?;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| Error::Truncated { declared: 1, found: 0 })?;
        if magic != PARAM_MAGIC {
            return Err(Error::BadMagic { expected: PARAM_MAGIC, got: magic });
        }
        let d2 = 2 * header.dim;
        let shapes = [(1, d2), (2, d2), (header.hidden, d2), (1, header.hidden)];
        let mut tensors = Vec::with_capacity(4);
        for (rows, cols) in shapes {
            tensors.push(read_tensor(&mut r, rows, cols)?);
        }
        let mut it = tensors.into_iter();
        let params = SteeringParams {
            dim: header.dim,
            hidden: header.hidden,
            use_mix: header.use_mix,
            mode: header.mode,
            log_tau_base: header.log_tau_base,
            w_gap: it.next().unwrap(),
            w_mix: it.next().unwrap(),
            temp_w1: it.next().unwrap(),
            temp_w2: it.next().unwrap(),
        };
        params.validate()?;
        Ok(params)
    }
}

#[derive(Serialize, Deserialize)]
struct ParamHeader {
    dim: usize,
    hidden: usize,
    use_mix: bool,
    mode: SteeringMode,
    log_tau_base: f64,
}

pub(crate) fn read_json_line<R: Read, T: serde::de::DeserializeOwned>(r: &mut R) -> Result<T> {
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            break;
        }
        if byte[0] == b'\n' {
            break;
        }
        line.push(byte[0]);
    }
    Ok(serde_json::from_slice(&line)?)
}

pub(crate) fn read_tensor<R: Read>(r: &mut R, rows: usize, cols: usize) -> Result<Tensor> {
    let mut bytes = vec![0u8; rows * cols * 4];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::Truncated { declared: rows * cols, found: 0 })?;
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Tensor::from_vec(rows, cols, data))
}

pub(crate) fn write_tensor_f32<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    for v in t.data() {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

// ── steered query ───────────────────────────────────────────────────────

/// All intermediates of one steering step, kept for diagnostics.
#[derive(Debug, Clone)]
pub struct SteeredQuery {
    pub h_ctx: Vec<f64>,
    /// Gap gate g ∈ (0,1); unset for the additive baseline.
    pub gate: Option<f64>,
    pub q_gap: Option<Vec<f64>>,
    /// Mixing weights (w1, w2) with w1 + w2 = 1; unset for additive.
    pub weights: Option<(f64, f64)>,
    pub h_req: Vec<f64>,
    pub tau_dyn: f64,
    /// True when the aggregated context was numerically zero and the
    /// information-free fallback was taken.
    pub degenerate: bool,
}

impl SteeredQuery {
    /// Request vector narrowed for the single-precision searcher.
    pub fn request_f32(&self) -> Vec<f32> {
        self.h_req.iter().map(|&v| v as f32).collect()
    }
}

// ── graph builders ──────────────────────────────────────────────────────

/// Attention aggregation result on the tape.
pub struct ContextGraph {
    pub h_ctx: NodeRef,
    pub alpha: Option<NodeRef>,
    pub degenerate: bool,
}

/// h_ctx = LN(Σ α_i e_i) with α = softmax((e_i·q)/√d) over the context.
/// A numerically zero aggregate falls back to h_ctx = 0 (no normalization).
pub fn aggregate_context_graph(
    tape: &mut Tape,
    q: NodeRef,
    ctx: &[NodeRef],
) -> Result<ContextGraph> {
    if ctx.is_empty() {
        return Err(Error::EmptyContext);
    }
    let d = tape.value(q).len();
    for e in ctx {
        if tape.value(*e).len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: tape.value(*e).len(),
                context: "aggregate_context",
            });
        }
    }
    let inv_sqrt_d = tape.constant(1.0 / (d as f64).sqrt())?;
    let mut scores = Vec::with_capacity(ctx.len());
    for e in ctx {
        scores.push(tape.dot(*e, q)?);
    }
    let stacked = tape.concat(&scores)?;
    let scaled = tape.scale(stacked, inv_sqrt_d)?;
    let alpha = tape.softmax(scaled)?;

    let mut weighted: Option<NodeRef> = None;
    for (i, e) in ctx.iter().enumerate() {
        let a_i = tape.index(alpha, i)?;
        let term = tape.scale(*e, a_i)?;
        weighted = Some(match weighted {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    let summed = weighted.unwrap();

    let norm: f64 = tape.value(summed).iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < DEGENERATE_CTX_NORM {
        let zero = tape.input(&vec![0.0; d])?;
        return Ok(ContextGraph { h_ctx: zero, alpha: Some(alpha), degenerate: true });
    }
    let h_ctx = tape.layernorm(summed)?;
    Ok(ContextGraph { h_ctx, alpha: Some(alpha), degenerate: false })
}

/// g = sigmoid(W_gap·[q; h_ctx]), query-first concatenation.
pub fn gap_gate_graph(
    tape: &mut Tape,
    q: NodeRef,
    h_ctx: NodeRef,
    w_gap: NodeRef,
) -> Result<NodeRef> {
    let cat = tape.concat(&[q, h_ctx])?;
    let logit_vec = tape.matvec(w_gap, cat)?;
    let logit = tape.index(logit_vec, 0)?;
    tape.sigmoid(logit)
}

/// q_gap = q − g · ((q·h_ctx)/‖h_ctx‖²) · h_ctx.
pub fn subtract_projection_graph(
    tape: &mut Tape,
    q: NodeRef,
    h_ctx: NodeRef,
    gate: NodeRef,
) -> Result<NodeRef> {
    let s_qh = tape.dot(q, h_ctx)?;
    let s_hh = tape.dot(h_ctx, h_ctx)?;
    if tape.scalar_value(s_hh) <= 0.0 {
        return Err(Error::ZeroNorm("h_ctx".into()));
    }
    let ratio = tape.div(s_qh, s_hh)?;
    let coef = tape.mul(gate, ratio)?;
    let proj = tape.scale(h_ctx, coef)?;
    tape.sub(q, proj)
}

/// (w, h_req) with w = softmax(W_mix·[q_gap; h_ctx]) and
/// h_req = LN(w1 q_gap + w2 h_ctx). With `use_mix` off, w is fixed to (1, 0)
/// and h_req = LN(q_gap).
pub fn mix_graph(
    tape: &mut Tape,
    q_gap: NodeRef,
    h_ctx: NodeRef,
    w_mix: NodeRef,
    use_mix: bool,
) -> Result<((NodeRef, NodeRef), NodeRef)> {
    if !use_mix {
        let one = tape.constant(1.0)?;
        let zero = tape.constant(0.0)?;
        let h_req = tape.layernorm(q_gap)?;
        return Ok(((one, zero), h_req));
    }
    let cat = tape.concat(&[q_gap, h_ctx])?;
    let logits = tape.matvec(w_mix, cat)?;
    let w = tape.softmax(logits)?;
    let w1 = tape.index(w, 0)?;
    let w2 = tape.index(w, 1)?;
    let part1 = tape.scale(q_gap, w1)?;
    let part2 = tape.scale(h_ctx, w2)?;
    let blended = tape.add(part1, part2)?;
    let h_req = tape.layernorm(blended)?;
    Ok(((w1, w2), h_req))
}

/// tau_dyn = exp(log_tau_base + MLP([q; h_ctx])), clamped to [1e-3, 10].
pub fn dynamic_temperature_graph(
    tape: &mut Tape,
    q: NodeRef,
    h_ctx: NodeRef,
    temp_w1: NodeRef,
    temp_w2: NodeRef,
    log_tau_base: f64,
) -> Result<NodeRef> {
    let cat = tape.concat(&[q, h_ctx])?;
    let hidden = tape.matvec(temp_w1, cat)?;
    let act = tape.tanh(hidden)?;
    let out_vec = tape.matvec(temp_w2, act)?;
    let offset = tape.index(out_vec, 0)?;
    let base = tape.constant(log_tau_base)?;
    let z = tape.add(base, offset)?;
    let tau = tape.exp(z)?;
    tape.clamp(tau, TAU_CLAMP.0, TAU_CLAMP.1)
}

/// Full gap-aware request on the tape.
pub struct RequestGraph {
    pub h_ctx: NodeRef,
    pub gate: Option<NodeRef>,
    pub q_gap: Option<NodeRef>,
    pub weights: Option<(NodeRef, NodeRef)>,
    pub h_req: NodeRef,
    pub tau: NodeRef,
    pub degenerate: bool,
}

/// Compose aggregation → gate → projection subtraction → mixing → dynamic
/// temperature. A degenerate (zero) context falls back to q_gap = q,
/// h_req = LN(q).
pub fn gap_request_graph(
    tape: &mut Tape,
    q: NodeRef,
    ctx: &[NodeRef],
    nodes: &ParamNodes,
    use_mix: bool,
    log_tau_base: f64,
) -> Result<RequestGraph> {
    let agg = aggregate_context_graph(tape, q, ctx)?;
    let tau = dynamic_temperature_graph(tape, q, agg.h_ctx, nodes.temp_w1, nodes.temp_w2, log_tau_base)?;
    let gate = gap_gate_graph(tape, q, agg.h_ctx, nodes.w_gap)?;

    if agg.degenerate {
        let one = tape.constant(1.0)?;
        let zero = tape.constant(0.0)?;
        let h_req = tape.layernorm(q)?;
        return Ok(RequestGraph {
            h_ctx: agg.h_ctx,
            gate: Some(gate),
            q_gap: Some(q),
            weights: Some((one, zero)),
            h_req,
            tau,
            degenerate: true,
        });
    }

    let q_gap = subtract_projection_graph(tape, q, agg.h_ctx, gate)?;
    let (weights, h_req) = mix_graph(tape, q_gap, agg.h_ctx, nodes.w_mix, use_mix)?;
    Ok(RequestGraph {
        h_ctx: agg.h_ctx,
        gate: Some(gate),
        q_gap: Some(q_gap),
        weights: Some(weights),
        h_req,
        tau,
        degenerate: false,
    })
}

/// Additive baseline: h_req = LN(q + LN(h_ctx)), fixed base temperature.
pub fn additive_request_graph(
    tape: &mut Tape,
    q: NodeRef,
    ctx: &[NodeRef],
    tau_base: f64,
) -> Result<RequestGraph> {
    let agg = aggregate_context_graph(tape, q, ctx)?;
    let inner = tape.layernorm(agg.h_ctx)?;
    let summed = tape.add(q, inner)?;
    let h_req = tape.layernorm(summed)?;
    let tau = tape.constant(tau_base)?;
    Ok(RequestGraph {
        h_ctx: agg.h_ctx,
        gate: None,
        q_gap: None,
        weights: None,
        h_req,
        tau,
        degenerate: agg.degenerate,
    })
}

fn extract(tape: &Tape, g: &RequestGraph) -> SteeredQuery {
    SteeredQuery {
        h_ctx: tape.value(g.h_ctx).to_vec(),
        gate: g.gate.map(|n| tape.scalar_value(n)),
        q_gap: g.q_gap.map(|n| tape.value(n).to_vec()),
        weights: g.weights.map(|(a, b)| (tape.scalar_value(a), tape.scalar_value(b))),
        h_req: tape.value(g.h_req).to_vec(),
        tau_dyn: tape.scalar_value(g.tau),
        degenerate: g.degenerate,
    }
}

// ── value-level operations ──────────────────────────────────────────────

/// Attention weights and aggregated context vector.
pub struct ContextAggregate {
    pub alpha: Vec<f64>,
    pub h_ctx: Vec<f64>,
    pub degenerate: bool,
}

pub fn aggregate_context(q: &[f32], ctx: &[&[f32]]) -> Result<ContextAggregate> {
    let mut tape = Tape::new();
    let qn = tape.input_f32(q)?;
    let ctx_nodes = ctx_nodes(&mut tape, ctx)?;
    let agg = aggregate_context_graph(&mut tape, qn, &ctx_nodes)?;
    Ok(ContextAggregate {
        alpha: tape.value(agg.alpha.unwrap()).to_vec(),
        h_ctx: tape.value(agg.h_ctx).to_vec(),
        degenerate: agg.degenerate,
    })
}

pub fn gap_gate(q: &[f32], h_ctx: &[f64], w_gap: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let qn = tape.input_f32(q)?;
    let hn = tape.input(h_ctx)?;
    let wn = tape.param("w_gap", w_gap)?;
    let g = gap_gate_graph(&mut tape, qn, hn, wn)?;
    Ok(tape.scalar_value(g))
}

pub fn subtract_projection(q: &[f32], h_ctx: &[f64], gate: f64) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let qn = tape.input_f32(q)?;
    let hn = tape.input(h_ctx)?;
    let gn = tape.constant(gate)?;
    let out = subtract_projection_graph(&mut tape, qn, hn, gn)?;
    Ok(tape.value(out).to_vec())
}

pub fn mix(
    q_gap: &[f64],
    h_ctx: &[f64],
    w_mix: &Tensor,
    use_mix: bool,
) -> Result<((f64, f64), Vec<f64>)> {
    let mut tape = Tape::new();
    let qn = tape.input(q_gap)?;
    let hn = tape.input(h_ctx)?;
    let wn = tape.param("w_mix", w_mix)?;
    let ((w1, w2), h_req) = mix_graph(&mut tape, qn, hn, wn, use_mix)?;
    Ok(((tape.scalar_value(w1), tape.scalar_value(w2)), tape.value(h_req).to_vec()))
}

pub fn dynamic_temperature(q: &[f32], h_ctx: &[f64], params: &SteeringParams) -> Result<f64> {
    let mut tape = Tape::new();
    let qn = tape.input_f32(q)?;
    let hn = tape.input(h_ctx)?;
    let w1 = tape.param("temp_w1", &params.temp_w1)?;
    let w2 = tape.param("temp_w2", &params.temp_w2)?;
    let tau = dynamic_temperature_graph(&mut tape, qn, hn, w1, w2, params.log_tau_base)?;
    Ok(tape.scalar_value(tau))
}

/// One gap-aware steering step over a nonempty context.
pub fn gap_request(q: &[f32], ctx: &[&[f32]], params: &SteeringParams) -> Result<SteeredQuery> {
    let mut tape = Tape::new();
    let qn = tape.input_f32(q)?;
    let ctx_nodes = ctx_nodes(&mut tape, ctx)?;
    let nodes = params.register(&mut tape)?;
    let graph =
        gap_request_graph(&mut tape, qn, &ctx_nodes, &nodes, params.use_mix, params.log_tau_base)?;
    Ok(extract(&tape, &graph))
}

/// One additive baseline step: h_req = LN(q + LN(h_ctx)).
pub fn additive_request(q: &[f32], ctx: &[&[f32]], tau_base: f64) -> Result<SteeredQuery> {
    let mut tape = Tape::new();
    let qn = tape.input_f32(q)?;
    let ctx_nodes = ctx_nodes(&mut tape, ctx)?;
    let graph = additive_request_graph(&mut tape, qn, &ctx_nodes, tau_base)?;
    Ok(extract(&tape, &graph))
}

fn ctx_nodes(tape: &mut Tape, ctx: &[&[f32]]) -> Result<Vec<NodeRef>> {
    ctx.iter().map(|e| tape.input_f32(e)).collect()
}

/// Layer normalization of a raw vector (value-level convenience).
pub fn layernorm(x: &[f64]) -> Vec<f64> {
    layernorm_forward(x).0
}
