//! Seeded generator of synthetic embedding corpora that plant the semantic
//! anchoring failure mode.
//!
//! Compose-like tasks put a tight cluster of near-duplicate distractors
//! around the acquired context and the withheld target on an orthogonal
//! direction, so the raw (and context-added) query stays trapped in the
//! cluster while ideal context subtraction ranks the target first.
//! Aggregation-like tasks put the target next to the context cluster behind a
//! wall of query-plane noise, so additive reinforcement wins and subtraction
//! hurts. Every instance carries a machine-checked certificate of brute-force
//! ranks under (q), (q + h_ctx), and (q − proj(q)).
//!
//! Construction invariants: every corpus direction is orthogonal to the
//! all-ones vector (zero coordinate mean, so layer normalization preserves
//! direction) and to a global type-marker direction; queries add ±δ on the
//! marker, which makes the route label linearly readable without disturbing
//! any retrieval geometry.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusIndex, EvidenceItem, Modality, RetrievalTask};
use crate::error::{Error, Result};
use crate::router::RouteLabel;
use crate::search::{rank_of, RankOutcome};
use crate::steering::{aggregate_context, subtract_projection};

/// Strength of the query-type marker mixed into query vectors.
pub const TYPE_MARKER: f64 = 0.3;
/// Shared anisotropy component mixed into every corpus vector. Queries are
/// orthogonal to it, so it shifts all scores of one request uniformly and
/// never changes a ranking, but it gives context summaries a stable
/// direction (real encoder spaces are anisotropic in the same way).
pub const ANISOTROPY: f64 = 0.2;
/// Noise wall size for aggregation-like tasks.
const AGG_NOISE: usize = 8;
/// Junk cluster size that additive anchoring drifts into.
const AGG_JUNK: usize = 6;

/// Generator configuration; the seed fixes all randomness.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub dim: usize,
    /// Background entity-cluster count (redundancy filler).
    pub clusters: usize,
    /// Angular radius scale of planted clusters, radians.
    pub spread: f64,
    /// text/table/image assignment ratios; must sum to 1.
    pub modality_mix: [f64; 3],
    pub compose_tasks: usize,
    pub aggregation_tasks: usize,
    /// How strongly the context cluster dominates the raw query direction;
    /// 0 aims the query straight at the target, 1 anchors it to the cluster.
    pub anchoring: f64,
    /// Near-duplicate distractors per compose-like context cluster.
    pub distractors: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            dim: 256,
            clusters: 40,
            spread: 0.35,
            modality_mix: [0.4, 0.3, 0.3],
            compose_tasks: 500,
            aggregation_tasks: 500,
            anchoring: 1.0,
            distractors: 12,
            seed: 7,
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InfeasibleGeometry(msg));
        if self.dim < self.distractors + 8 {
            return fail(format!(
                "dimension {} too small for {} distractor directions",
                self.dim, self.distractors
            ));
        }
        if !(self.spread > 0.0 && self.spread <= 0.7) {
            return fail(format!("spread {} outside (0, 0.7]", self.spread));
        }
        if !(0.0..=1.0).contains(&self.anchoring) {
            return fail(format!("anchoring strength {} outside [0,1]", self.anchoring));
        }
        let ratio_sum: f64 = self.modality_mix.iter().sum();
        if (ratio_sum - 1.0).abs() > 1e-6 || self.modality_mix.iter().any(|&r| r < 0.0) {
            return fail(format!("modality mix {:?} must be nonnegative and sum to 1", self.modality_mix));
        }
        if self.compose_tasks + self.aggregation_tasks == 0 {
            return fail("at least one task required".into());
        }
        if self.distractors < 3 {
            return fail("compose clusters need at least 3 distractors".into());
        }
        Ok(())
    }

    /// Query angle from the context direction: interpolates from π/2 (no
    /// anchoring, query on the target) down to π/8 at full anchoring.
    fn query_angle(&self) -> f64 {
        let psi_min = std::f64::consts::FRAC_PI_8;
        (1.0 - self.anchoring) * std::f64::consts::FRAC_PI_2 + self.anchoring * psi_min
    }

    /// Whether the planted geometry guarantees the compose certificate
    /// (additive-fails and subtractive-succeeds) so it can be asserted.
    fn certifiable(&self) -> bool {
        let theta_max = 0.75 * self.spread;
        self.query_angle().tan() < theta_max.cos() * 0.98
    }
}

/// Brute-force ranks of the withheld target under the three request vectors,
/// with the context excluded from search.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Certificate {
    pub qid: String,
    pub qtype: String,
    /// Rank of the target under the raw query.
    pub rank_q: usize,
    /// Rank under q + h_ctx.
    pub rank_add: usize,
    /// Rank under q − proj_ctx(q).
    pub rank_sub: usize,
    /// sim(q, e_t) < sim(q, nearest planted distractor).
    pub additive_fails: bool,
    /// rank_sub == 1.
    pub subtractive_first: bool,
}

pub fn save_certificates<P: AsRef<std::path::Path>>(
    path: P,
    certs: &[Certificate],
) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for c in certs {
        serde_json::to_writer(&mut w, c)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Everything one generation run produces.
pub struct SynthOutput {
    pub corpus: CorpusIndex,
    pub tasks: Vec<RetrievalTask>,
    pub labels: Vec<RouteLabel>,
    pub certificates: Vec<Certificate>,
}

struct DirSampler {
    dim: usize,
    ones: Vec<f64>,
    marker: Vec<f64>,
    aniso: Vec<f64>,
}

impl DirSampler {
    fn new(dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let ones = vec![1.0 / (dim as f64).sqrt(); dim];
        let mut s = DirSampler { dim, ones, marker: Vec::new(), aniso: Vec::new() };
        s.marker = s.sample(rng, &[])?;
        s.aniso = s.sample(rng, &[])?;
        Ok(s)
    }

    /// Random unit direction orthogonal to the ones vector, the type marker,
    /// the anisotropy direction, and every direction in `ortho` (exact
    /// Gram-Schmidt).
    fn sample(&self, rng: &mut ChaCha8Rng, ortho: &[&[f64]]) -> Result<Vec<f64>> {
        for _ in 0..64 {
            let mut v: Vec<f64> = (0..self.dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            project_out(&mut v, &self.ones);
            if !self.marker.is_empty() {
                project_out(&mut v, &self.marker);
            }
            if !self.aniso.is_empty() {
                project_out(&mut v, &self.aniso);
            }
            for b in ortho {
                project_out(&mut v, b);
            }
            let norm = l2(&v);
            if norm > 1e-3 {
                v.iter_mut().for_each(|x| *x /= norm);
                return Ok(v);
            }
        }
        Err(Error::InfeasibleGeometry(format!(
            "could not sample an orthogonal direction in dimension {}",
            self.dim
        )))
    }
}

fn project_out(v: &mut [f64], unit: &[f64]) {
    let c: f64 = v.iter().zip(unit).map(|(a, b)| a * b).sum();
    v.iter_mut().zip(unit).for_each(|(a, b)| *a -= c * b);
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn combine(parts: &[(f64, &[f64])]) -> Vec<f64> {
    let d = parts[0].1.len();
    let mut out = vec![0.0; d];
    for (c, dir) in parts {
        for (o, x) in out.iter_mut().zip(*dir) {
            *o += c * x;
        }
    }
    out
}

fn narrow(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn pick_modality(mix: &[f64; 3], rng: &mut ChaCha8Rng) -> Modality {
    let r: f64 = rng.gen_range(0.0..1.0);
    if r < mix[0] {
        Modality::Text
    } else if r < mix[0] + mix[1] {
        Modality::Table
    } else {
        Modality::Image
    }
}

/// Generate the corpus, tasks, route labels, and per-instance certificates.
pub fn generate(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sampler = DirSampler::new(spec.dim, &mut rng)?;
    let marker = sampler.marker.clone();
    let aniso = sampler.aniso.clone();
    let psi = spec.query_angle();
    let scale = 1.0 / (1.0 + TYPE_MARKER * TYPE_MARKER).sqrt();

    let mut items: Vec<EvidenceItem> = Vec::new();
    let mut tasks: Vec<RetrievalTask> = Vec::new();
    let mut labels: Vec<RouteLabel> = Vec::new();
    // Planted distractor ids per qid, for the additive-fails check.
    let mut planted: Vec<(String, Vec<String>)> = Vec::new();

    // Every corpus item gets the shared anisotropy component; rows are
    // unit-normalized again at ingest.
    let push_item = |items: &mut Vec<EvidenceItem>, id: String, v: &[f64], rng: &mut ChaCha8Rng| {
        let shifted = combine(&[(1.0, v), (ANISOTROPY, &aniso)]);
        items.push(EvidenceItem {
            id,
            modality: pick_modality(&spec.modality_mix, rng),
            vector: narrow(&shifted),
            payload: None,
        });
    };

    // ── compose-like tasks ──────────────────────────────────────────────
    for t in 0..spec.compose_tasks {
        let qid = format!("cmp{t:04}");
        let u = sampler.sample(&mut rng, &[])?;
        let v = sampler.sample(&mut rng, &[&u])?;

        // Context cluster: near-duplicate distractors tight around u, the
        // gold context item farther out on its own perturbation direction.
        let mut cluster_ids = Vec::with_capacity(spec.distractors);
        let mut prior: Vec<Vec<f64>> = Vec::new();
        for j in 0..spec.distractors {
            let frac = j as f64 / (spec.distractors - 1).max(1) as f64;
            let theta = spec.spread * (0.25 + 0.5 * frac);
            let ortho: Vec<&[f64]> = std::iter::once(u.as_slice())
                .chain(std::iter::once(v.as_slice()))
                .chain(prior.iter().map(|p| p.as_slice()))
                .collect();
            let p = sampler.sample(&mut rng, &ortho)?;
            let z = combine(&[(theta.cos(), &u), (theta.sin(), &p)]);
            let id = format!("{qid}_z{j:02}");
            push_item(&mut items, id.clone(), &z, &mut rng);
            cluster_ids.push(id);
            prior.push(p);
        }
        let theta_c = spec.spread * rng.gen_range(1.1..1.4);
        let ortho: Vec<&[f64]> = std::iter::once(u.as_slice())
            .chain(std::iter::once(v.as_slice()))
            .chain(prior.iter().map(|p| p.as_slice()))
            .collect();
        let p_ctx = sampler.sample(&mut rng, &ortho)?;
        let ctx_vec = combine(&[(theta_c.cos(), &u), (theta_c.sin(), &p_ctx)]);
        let ctx_id = format!("{qid}_ctx");
        push_item(&mut items, ctx_id.clone(), &ctx_vec, &mut rng);

        // Withheld target sits exactly on the orthogonal direction.
        let tgt_id = format!("{qid}_tgt");
        push_item(&mut items, tgt_id.clone(), &v, &mut rng);

        // Query anchored toward the cluster, plus the type marker.
        let query = combine(&[
            (scale * psi.cos(), &u),
            (scale * psi.sin(), &v),
            (scale * TYPE_MARKER, &marker),
        ]);

        tasks.push(RetrievalTask {
            qid: qid.clone(),
            query: narrow(&query),
            gold: vec![ctx_id.clone(), tgt_id.clone()],
            context: vec![ctx_id],
            target: Some(tgt_id),
            qtype: Some("compose_like".into()),
            anchor: None,
        });
        labels.push(RouteLabel { qid: qid.clone(), label: 1 });
        planted.push((qid, cluster_ids));
    }

    // ── aggregation-like tasks ──────────────────────────────────────────
    let psi_a = std::f64::consts::FRAC_PI_4;
    for t in 0..spec.aggregation_tasks {
        let qid = format!("agg{t:04}");
        let u = sampler.sample(&mut rng, &[])?;
        let w = sampler.sample(&mut rng, &[&u])?;

        // Target hugs the cluster axis; the gold context sits close by.
        let theta_t = 0.03f64;
        let p_t = sampler.sample(&mut rng, &[&u, &w])?;
        let tgt_vec = combine(&[(theta_t.cos(), &u), (theta_t.sin(), &p_t)]);
        let tgt_id = format!("{qid}_tgt");
        push_item(&mut items, tgt_id.clone(), &tgt_vec, &mut rng);

        let theta_c: f64 = rng.gen_range(0.14..0.21);
        let p_c = sampler.sample(&mut rng, &[&u, &w, &p_t])?;
        let ctx_vec = combine(&[(theta_c.cos(), &u), (theta_c.sin(), &p_c)]);
        let ctx_id = format!("{qid}_ctx");
        push_item(&mut items, ctx_id.clone(), &ctx_vec, &mut rng);

        // Noise wall between the query and the gold region (one side of the
        // query in the (u, w) plane), and a junk cluster near 94° that only
        // additive drift reaches.
        let mut noise_ids = Vec::with_capacity(AGG_NOISE);
        for j in 0..AGG_NOISE {
            let eta = psi_a + 0.15 + 0.25 * (j as f64 / (AGG_NOISE - 1) as f64);
            let n = combine(&[(eta.cos(), &u), (eta.sin(), &w)]);
            let id = format!("{qid}_n{j}");
            push_item(&mut items, id.clone(), &n, &mut rng);
            noise_ids.push(id);
        }
        for k in 0..AGG_JUNK {
            let phi = 1.606 + 0.070 * (k as f64 / (AGG_JUNK - 1) as f64);
            let jv = combine(&[(phi.cos(), &u), (phi.sin(), &w)]);
            push_item(&mut items, format!("{qid}_j{k}"), &jv, &mut rng);
        }

        let query = combine(&[
            (scale * psi_a.cos(), &u),
            (scale * psi_a.sin(), &w),
            (-scale * TYPE_MARKER, &marker),
        ]);

        tasks.push(RetrievalTask {
            qid: qid.clone(),
            query: narrow(&query),
            gold: vec![ctx_id.clone(), tgt_id.clone()],
            context: vec![ctx_id],
            target: Some(tgt_id),
            qtype: Some("aggregation_like".into()),
            anchor: None,
        });
        labels.push(RouteLabel { qid: qid.clone(), label: 0 });
        planted.push((qid, noise_ids));
    }

    // ── background entity clusters ──────────────────────────────────────
    for c in 0..spec.clusters {
        let f = sampler.sample(&mut rng, &[])?;
        for i in 0..8 {
            let gamma = spec.spread * rng.gen_range(0.2..1.0);
            let r = sampler.sample(&mut rng, &[&f])?;
            let item = combine(&[(gamma.cos(), &f), (gamma.sin(), &r)]);
            push_item(&mut items, format!("bg{c:03}_{i}"), &item, &mut rng);
        }
    }

    let corpus = CorpusIndex::ingest(items)?.normalize()?;
    for task in &tasks {
        task.validate(&corpus)?;
    }

    // ── certification ───────────────────────────────────────────────────
    let assert_compose = spec.certifiable();
    let mut certificates = Vec::with_capacity(tasks.len());
    for (task, (qid, distractor_ids)) in tasks.iter().zip(&planted) {
        debug_assert_eq!(&task.qid, qid);
        let cert = certify(&corpus, task, distractor_ids)?;
        let is_compose = task.qtype.as_deref() == Some("compose_like");
        if is_compose && assert_compose && !(cert.additive_fails && cert.subtractive_first) {
            return Err(Error::InfeasibleGeometry(format!(
                "compose instance {} failed certification: rank_q={}, rank_add={}, rank_sub={}",
                task.qid, cert.rank_q, cert.rank_add, cert.rank_sub
            )));
        }
        certificates.push(cert);
    }

    Ok(SynthOutput { corpus, tasks, labels, certificates })
}

/// Brute-force ranks of the target under (q), (q + h_ctx), (q − proj(q)).
fn certify(
    corpus: &CorpusIndex,
    task: &RetrievalTask,
    distractor_ids: &[String],
) -> Result<Certificate> {
    let target = task.target.as_ref().expect("synthetic tasks carry targets");
    let exclude = corpus.rows_of(task.context.iter().map(|s| s.as_str()))?;
    let ctx_vecs: Vec<&[f32]> = task
        .context
        .iter()
        .map(|id| corpus.row_of(id).map(|r| corpus.vector(r)))
        .collect::<Result<_>>()?;

    let agg = aggregate_context(&task.query, &ctx_vecs)?;
    let q64: Vec<f64> = task.query.iter().map(|&x| x as f64).collect();
    let add_vec: Vec<f32> = q64.iter().zip(&agg.h_ctx).map(|(a, b)| (a + b) as f32).collect();
    let sub_vec: Vec<f32> = narrow(&subtract_projection(&task.query, &agg.h_ctx, 1.0)?);

    let rank = |vec: &[f32]| -> Result<usize> {
        match rank_of(corpus, vec, target, &exclude)? {
            RankOutcome::Rank(r) => Ok(r),
            RankOutcome::Excluded => unreachable!("target never excluded"),
        }
    };
    let rank_q = rank(&task.query)?;
    let rank_add = rank(&add_vec)?;
    let rank_sub = rank(&sub_vec)?;

    let target_row = corpus.row_of(target)?;
    let sim = |row: u32| -> f64 {
        corpus
            .vector(row)
            .iter()
            .zip(&task.query)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum()
    };
    let sim_target = sim(target_row);
    let nearest_distractor = distractor_ids
        .iter()
        .map(|id| corpus.row_of(id).map(sim))
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max);

    Ok(Certificate {
        qid: task.qid.clone(),
        qtype: task.qtype.clone().unwrap_or_default(),
        rank_q,
        rank_add,
        rank_sub,
        additive_fails: sim_target < nearest_distractor,
        subtractive_first: rank_sub == 1,
    })
}
