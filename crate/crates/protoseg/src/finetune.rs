//! Episodic fine-tuning of an encoder on one labeled support set plus
//! unlabeled query images.
//!
//! Strategies:
//! - `cpc`: prototype contrast between support prototypes and the query's
//!   pseudo-prototypes (weighted by dynamic prediction uncertainty), plus
//!   support cross-entropy and a boundary regularizer on the soft query
//!   prediction.
//! - `sup-ft`: purely supervised — every ordered (support, support) pair
//!   becomes a (pseudo-support, pseudo-query) episode trained with
//!   cross-entropy.
//! - `trans-ft`: support cross-entropy plus mean prediction-entropy of the
//!   query.
//! - `none`: no-op control.
//!
//! The discrete structure of an iteration — which query was sampled, the
//! k-means cluster memberships, the predicted query mask, and the
//! uncertainty weight — is treated as constant for differentiation;
//! gradients flow through features and the prototype averages built from
//! them.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{ArrayD, Ix2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{downsample_mask, Episode, Image, LabelMask, IGNORE_LABEL};
use crate::encoder::{save_checkpoint, sgd_step, Backbone, FeatureMap, OptimizerState, ToyEncoder};
use crate::error::Error;
use crate::guard;
pub use crate::losses::Reduction;
use crate::losses::{uncertainty_weight, EPS};
use crate::prototype::{plan_prototypes, predict_query, PrototypePlan, PrototypeSet};
use crate::scalar::{mix_seed, Real};
use crate::tape::{NodeId, Tape};

/// Fine-tuning strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    #[default]
    Cpc,
    SupFt,
    TransFt,
    None,
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "cpc" => Ok(Strategy::Cpc),
            "sup-ft" => Ok(Strategy::SupFt),
            "trans-ft" => Ok(Strategy::TransFt),
            "none" => Ok(Strategy::None),
            other => Err(Error::invalid_config(format!(
                "unknown strategy '{other}' (expected cpc, sup-ft, trans-ft, or none)"
            ))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Strategy::Cpc => "cpc",
            Strategy::SupFt => "sup-ft",
            Strategy::TransFt => "trans-ft",
            Strategy::None => "none",
        };
        f.write_str(s)
    }
}

/// All knobs of a fine-tuning run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FineTuneConfig {
    pub lr: f64,
    pub momentum: f64,
    pub iterations: usize,
    /// Contrast margin m.
    pub margin: f64,
    /// Blend weight of the holistic (class-mean) term in each prototype.
    pub holistic_blend: f64,
    /// Prototypes per class.
    pub clusters: usize,
    /// Cosine-score scale before the softmax.
    pub softmax_scale: f64,
    pub bd_reduction: Reduction,
    pub strategy: Strategy,
    pub seed: u64,
    /// Loss toggles for ablations; all on by default.
    pub use_ce: bool,
    pub use_pc: bool,
    pub use_bd: bool,
    pub checkpoint_every: usize,
    /// Where to drop periodic checkpoints; `None` disables them.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig {
            lr: 1e-5,
            momentum: 0.9,
            iterations: 1000,
            margin: 0.2,
            holistic_blend: 0.5,
            clusters: 5,
            softmax_scale: 20.0,
            bd_reduction: Reduction::Mean,
            strategy: Strategy::Cpc,
            seed: 0,
            use_ce: true,
            use_pc: true,
            use_bd: true,
            checkpoint_every: 100,
            checkpoint_dir: None,
        }
    }
}

impl FineTuneConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid_config("lr must be positive"));
        }
        if !(self.momentum.is_finite() && (0.0..1.0).contains(&self.momentum)) {
            return Err(Error::invalid_config("momentum must be in [0, 1)"));
        }
        if self.margin < 0.0 || !self.margin.is_finite() {
            return Err(Error::invalid_config("margin must be >= 0"));
        }
        if self.holistic_blend < 0.0 || !self.holistic_blend.is_finite() {
            return Err(Error::invalid_config("holistic blend must be >= 0"));
        }
        if self.clusters == 0 {
            return Err(Error::invalid_config("clusters must be >= 1"));
        }
        if !(self.softmax_scale.is_finite() && self.softmax_scale > 0.0) {
            return Err(Error::invalid_config("softmax scale must be positive"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::invalid_config("checkpoint interval must be >= 1"));
        }
        Ok(())
    }
}

/// One iteration's log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub iteration: usize,
    pub ce: f64,
    pub pc: f64,
    pub bd: f64,
    pub w_un: f64,
    pub total: f64,
    pub d_intra_mean: Option<f64>,
    pub d_inter_mean: Option<f64>,
    pub entropy: Option<f64>,
    pub query_id: String,
    pub wall_ms: f64,
}

/// Full run log: one record per executed iteration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunLog {
    pub strategy: String,
    pub seed: u64,
    pub records: Vec<RunRecord>,
}

impl RunLog {
    /// Writes one JSON record per line.
    pub fn save_jsonl(&self, path: &std::path::Path) -> Result<(), Error> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for r in &self.records {
            let line = serde_json::to_string(r)?;
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn load_jsonl(path: &std::path::Path) -> Result<Vec<RunRecord>, Error> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut out = Vec::new();
        for line in std::io::BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line)?);
        }
        Ok(out)
    }

    /// Equality that ignores wall-clock timing (the only nondeterministic
    /// field).
    pub fn eq_ignoring_wall(&self, other: &RunLog) -> bool {
        self.strategy == other.strategy
            && self.seed == other.seed
            && self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| {
                let mut x = a.clone();
                let mut y = b.clone();
                x.wall_ms = 0.0;
                y.wall_ms = 0.0;
                x == y
            })
    }
}

/// Why a run stopped early.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AbortDiagnostic {
    pub iteration: usize,
    pub detail: String,
}

/// Outcome of a fine-tuning run. On abort, `encoder` holds the last
/// parameters that produced a finite loss.
#[derive(Debug, Clone)]
pub struct FineTuneResult<T: Real> {
    pub encoder: ToyEncoder<T>,
    pub log: RunLog,
    pub aborted: Option<AbortDiagnostic>,
}

// ---- shared graph pieces ----

/// Support shot prepared for the loop: image plus its feature-resolution
/// labels.
struct Shot<'a> {
    image: &'a Image,
    labels: Vec<u8>,
}

fn feature_dims(image: &Image, stride: usize) -> (usize, usize) {
    let (h, w, _) = image.dims();
    (h.div_ceil(stride), w.div_ceil(stride))
}

/// Divergence signal: overflowing parameters can push features to inf/NaN
/// before the loss itself goes non-finite. Reported as a loss-level
/// non-finite event so the loop aborts instead of failing.
fn ensure_finite_features<T: Real>(vals: &ndarray::Array2<T>) -> Result<(), Error> {
    if vals.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { iteration: 0, detail: "non-finite features".to_string() })
    }
}

fn downsample_labels(mask: &LabelMask, image: &Image, stride: usize) -> Result<Vec<u8>, Error> {
    let dims = feature_dims(image, stride);
    let down = downsample_mask(mask, dims)?;
    Ok(down.data.iter().copied().collect())
}

/// Stacks per-class prototype nodes from a plan: each cluster center is the
/// unweighted mean of its member rows, plus `lambda` times the
/// multiplicity-weighted class mean.
fn apply_plan<T: Real>(
    tape: &mut Tape<T>,
    rows: NodeId,
    plan: &PrototypePlan,
    lambda: T,
) -> Vec<Option<NodeId>> {
    plan.classes
        .iter()
        .map(|cp| {
            let cp = cp.as_ref()?;
            let hw: Vec<T> = cp.holistic_weights.iter().map(|&w| T::from_f64(w)).collect();
            let holistic = tape.rows_weighted_sum(rows, cp.holistic_rows.clone(), hw);
            let scaled = tape.affine(holistic, lambda, T::zero());
            let protos: Vec<NodeId> = cp
                .clusters
                .iter()
                .map(|members| {
                    let w = T::one() / T::from_f64(members.len() as f64);
                    let center =
                        tape.rows_weighted_sum(rows, members.clone(), vec![w; members.len()]);
                    tape.add(center, scaled)
                })
                .collect();
            Some(tape.stack_rows(&protos))
        })
        .collect()
}

/// Classifier head: cosine of every row against every prototype, per-class
/// max, scale, softmax. `np_all` must hold the normalized prototypes of all
/// classes stacked in class order, `c` rows each.
fn class_probs<T: Real>(
    tape: &mut Tape<T>,
    rows: NodeId,
    np_all: NodeId,
    c: usize,
    scale: T,
) -> NodeId {
    let n_rows = tape.normalize_rows(rows);
    let cos = tape.matmul_nt(n_rows, np_all);
    let smax = tape.group_max_cols(cos, c);
    let logits = tape.affine(smax, scale, T::zero());
    tape.softmax_rows(logits)
}

/// Asymmetric prototype-set distance as a scalar node: `1 - mean over rows
/// of nq of the best cosine against np`.
fn set_distance_node<T: Real>(tape: &mut Tape<T>, np: NodeId, nq: NodeId, c: usize) -> NodeId {
    let cos = tape.matmul_nt(nq, np);
    let best = tape.group_max_cols(cos, c);
    let mean = tape.mean_all(best);
    tape.affine(mean, -T::one(), T::one())
}

/// Frozen discrete structure of one transductive iteration.
#[derive(Debug, Clone)]
pub struct CpcFrozen {
    pub support_plan: PrototypePlan,
    pub query_plan: PrototypePlan,
    pub w_un: f64,
}

/// Scalar nodes and logged values of one built iteration graph.
pub struct CpcNodes {
    pub total: NodeId,
    pub ce: f64,
    pub pc: Option<f64>,
    pub bd: f64,
    pub w_un: f64,
    pub d_intra: Vec<Option<f64>>,
    pub d_inter: Vec<Option<f64>>,
}

pub struct CpcInputs<'a> {
    pub supports: Vec<(&'a Image, &'a [u8])>,
    pub query: &'a Image,
    pub n: usize,
}

/// Builds the full transductive loss graph on `tape`. With `frozen` absent,
/// the discrete structure (plans, predicted mask, uncertainty) is computed
/// from the current forward values and returned for reuse; with it present,
/// the provided structure is used verbatim, which keeps finite-difference
/// probes consistent with the analytic gradient.
pub fn build_cpc_graph<T: Real>(
    tape: &mut Tape<T>,
    encoder: &ToyEncoder<T>,
    bound: &[(String, NodeId)],
    inputs: &CpcInputs<'_>,
    cfg: &FineTuneConfig,
    seeds: (u64, u64),
    frozen: Option<&CpcFrozen>,
) -> Result<(CpcNodes, CpcFrozen), Error> {
    let n = inputs.n;
    if n == 0 {
        return Err(Error::invalid_input("transductive tuning needs n >= 1"));
    }
    let c = cfg.clusters;
    let lambda = T::from_f64(cfg.holistic_blend);
    let alpha = T::from_f64(cfg.softmax_scale);
    let eps = T::from_f64(EPS);

    // Encode all support shots and the query on the tape.
    let stride = encoder.downsample();
    let mut s_parts = Vec::new();
    let mut s_labels: Vec<u8> = Vec::new();
    for (img, labels) in &inputs.supports {
        let (rows, _, _) = encoder.encode_bound(tape, bound, img)?;
        s_parts.push(rows);
        s_labels.extend_from_slice(labels);
    }
    let s_rows = if s_parts.len() == 1 { s_parts[0] } else { tape.concat_rows(&s_parts) };
    let (qh, qw) = feature_dims(inputs.query, stride);
    let (q_rows, _, _) = encoder.encode_bound(tape, bound, inputs.query)?;

    // Discrete structure: compute or reuse.
    let frozen = match frozen {
        Some(f) => f.clone(),
        None => {
            let s_vals = tape.value(s_rows).view().into_dimensionality::<Ix2>().unwrap().to_owned();
            ensure_finite_features(&s_vals)?;
            let support_plan =
                plan_prototypes(&s_vals.view(), &s_labels, n, c, seeds.0, false)?;
            let q_vals = tape.value(q_rows).view().into_dimensionality::<Ix2>().unwrap().to_owned();
            ensure_finite_features(&q_vals)?;
            // Preview prototypes from forward values only, for the frozen
            // prediction.
            let mut protos = Vec::with_capacity(n + 1);
            for cp in &support_plan.classes {
                let cp = cp.as_ref().expect("strict plan");
                let d = q_vals.shape()[1];
                let mut holistic = ndarray::Array1::<T>::zeros(d);
                for (&r, &w) in cp.holistic_rows.iter().zip(&cp.holistic_weights) {
                    let wt = T::from_f64(w);
                    holistic = holistic + s_vals.row(r).mapv(|v| v * wt);
                }
                let mut mat = ndarray::Array2::<T>::zeros((cp.clusters.len(), d));
                for (j, members) in cp.clusters.iter().enumerate() {
                    let mut ctr = ndarray::Array1::<T>::zeros(d);
                    let w = T::one() / T::from_f64(members.len() as f64);
                    for &r in members {
                        ctr = ctr + s_vals.row(r).mapv(|v| v * w);
                    }
                    for k in 0..d {
                        mat[[j, k]] = ctr[k] + lambda * holistic[k];
                    }
                }
                protos.push(Some(mat));
            }
            let pset = PrototypeSet { protos, clusters: c };
            let d = q_vals.shape()[1];
            let fmap = FeatureMap {
                data: q_vals
                    .into_shape_with_order((qh, qw, d))
                    .expect("query rows reshape")
                    .to_owned(),
            };
            let (probs, predicted) = predict_query(&fmap, &pset, alpha)?;
            let w_un = uncertainty_weight(&probs)?.to_f64();
            let q_labels: Vec<u8> = predicted.labels.iter().copied().collect();
            let q_vals2 =
                tape.value(q_rows).view().into_dimensionality::<Ix2>().unwrap().to_owned();
            let query_plan = plan_prototypes(&q_vals2.view(), &q_labels, n, c, seeds.1, true)?;
            CpcFrozen { support_plan, query_plan, w_un }
        }
    };

    // Differentiable prototypes.
    let p_nodes = apply_plan(tape, s_rows, &frozen.support_plan, lambda);
    let np_per_class: Vec<NodeId> = p_nodes
        .iter()
        .map(|p| tape.normalize_rows(p.expect("support covers all classes")))
        .collect();
    let np_all = if np_per_class.len() == 1 {
        np_per_class[0]
    } else {
        tape.concat_rows(&np_per_class)
    };

    // Support cross-entropy.
    let labeled = s_labels.iter().filter(|&&l| l != IGNORE_LABEL).count();
    if labeled == 0 {
        return Err(Error::NoLabeledPixels);
    }
    let s_probs = class_probs(tape, s_rows, np_all, c, alpha);
    let norm = T::one() / T::from_f64(((n + 1) * labeled) as f64);
    let ce_node = tape.masked_nll(s_probs, s_labels.clone(), IGNORE_LABEL, norm, eps);

    // Boundary on the soft query prediction.
    let q_probs = class_probs(tape, q_rows, np_all, c, alpha);
    let soft_fg = tape.select_sum_cols(q_probs, 1, n + 1);
    let bd_node = tape.boundary(
        soft_fg,
        qh,
        qw,
        eps,
        matches!(cfg.bd_reduction, Reduction::Mean),
    );

    // Prototype contrast against the query's pseudo-prototypes.
    let q_nodes = apply_plan(tape, q_rows, &frozen.query_plan, lambda);
    let nq_per_class: Vec<Option<NodeId>> =
        q_nodes.iter().map(|q| q.map(|id| tape.normalize_rows(id))).collect();
    let mut hinges = Vec::new();
    let mut d_intra = vec![None; n + 1];
    let mut d_inter = vec![None; n + 1];
    for j in 0..=n {
        let Some(nq_j) = nq_per_class[j] else {
            continue;
        };
        let dj = set_distance_node(tape, np_per_class[j], nq_j, c);
        let inv_n = T::one() / T::from_f64(n as f64);
        let inter_terms: Vec<(NodeId, T)> = (0..=n)
            .filter(|&i| i != j)
            .map(|i| (set_distance_node(tape, np_per_class[i], nq_j, c), inv_n))
            .collect();
        let dij = tape.linear_comb(&inter_terms, T::zero());
        d_intra[j] = Some(tape.scalar_value(dj).to_f64());
        d_inter[j] = Some(tape.scalar_value(dij).to_f64());
        let gap = tape.linear_comb(
            &[(dj, T::one()), (dij, -T::one())],
            T::from_f64(cfg.margin),
        );
        hinges.push((tape.relu(gap), T::one()));
    }
    let pc_node = if hinges.is_empty() { None } else { Some(tape.linear_comb(&hinges, T::zero())) };

    // Composite total with the ablation toggles.
    let mut terms: Vec<(NodeId, T)> = Vec::new();
    if cfg.use_ce {
        terms.push((ce_node, T::one()));
    }
    if cfg.use_pc {
        if let Some(pc) = pc_node {
            terms.push((pc, T::from_f64(1.0 - frozen.w_un)));
        }
    }
    if cfg.use_bd {
        terms.push((bd_node, T::one()));
    }
    let total = tape.linear_comb(&terms, T::zero());

    let nodes = CpcNodes {
        total,
        ce: tape.scalar_value(ce_node).to_f64(),
        pc: pc_node.map(|p| tape.scalar_value(p).to_f64()),
        bd: tape.scalar_value(bd_node).to_f64(),
        w_un: frozen.w_un,
        d_intra,
        d_inter,
    };
    Ok((nodes, frozen))
}

/// Supervised pair graph: predict `pq` from `ps`'s prototypes, score against
/// `pq`'s own labels.
fn build_supervised_graph<T: Real>(
    tape: &mut Tape<T>,
    encoder: &ToyEncoder<T>,
    bound: &[(String, NodeId)],
    ps: (&Image, &[u8]),
    pq: (&Image, &[u8]),
    n: usize,
    cfg: &FineTuneConfig,
    seed: u64,
) -> Result<(NodeId, f64), Error> {
    let c = cfg.clusters;
    let lambda = T::from_f64(cfg.holistic_blend);
    let alpha = T::from_f64(cfg.softmax_scale);
    let eps = T::from_f64(EPS);
    let (s_rows, _, _) = encoder.encode_bound(tape, bound, ps.0)?;
    let s_vals = tape.value(s_rows).view().into_dimensionality::<Ix2>().unwrap().to_owned();
    ensure_finite_features(&s_vals)?;
    let plan = plan_prototypes(&s_vals.view(), ps.1, n, c, seed, false)?;
    let p_nodes = apply_plan(tape, s_rows, &plan, lambda);
    let np_per_class: Vec<NodeId> = p_nodes
        .iter()
        .map(|p| tape.normalize_rows(p.expect("strict plan")))
        .collect();
    let np_all =
        if np_per_class.len() == 1 { np_per_class[0] } else { tape.concat_rows(&np_per_class) };
    let (q_rows, _, _) = encoder.encode_bound(tape, bound, pq.0)?;
    let probs = class_probs(tape, q_rows, np_all, c, alpha);
    let labeled = pq.1.iter().filter(|&&l| l != IGNORE_LABEL).count();
    if labeled == 0 {
        return Err(Error::NoLabeledPixels);
    }
    let norm = T::one() / T::from_f64(((n + 1) * labeled) as f64);
    let ce = tape.masked_nll(probs, pq.1.to_vec(), IGNORE_LABEL, norm, eps);
    let val = tape.scalar_value(ce).to_f64();
    Ok((ce, val))
}

/// Support CE plus mean query prediction entropy.
fn build_entropy_graph<T: Real>(
    tape: &mut Tape<T>,
    encoder: &ToyEncoder<T>,
    bound: &[(String, NodeId)],
    inputs: &CpcInputs<'_>,
    cfg: &FineTuneConfig,
    seed: u64,
) -> Result<(NodeId, f64, f64), Error> {
    let c = cfg.clusters;
    let lambda = T::from_f64(cfg.holistic_blend);
    let alpha = T::from_f64(cfg.softmax_scale);
    let eps = T::from_f64(EPS);
    let mut s_parts = Vec::new();
    let mut s_labels: Vec<u8> = Vec::new();
    for (img, labels) in &inputs.supports {
        let (rows, _, _) = encoder.encode_bound(tape, bound, img)?;
        s_parts.push(rows);
        s_labels.extend_from_slice(labels);
    }
    let s_rows = if s_parts.len() == 1 { s_parts[0] } else { tape.concat_rows(&s_parts) };
    let s_vals = tape.value(s_rows).view().into_dimensionality::<Ix2>().unwrap().to_owned();
    ensure_finite_features(&s_vals)?;
    let plan = plan_prototypes(&s_vals.view(), &s_labels, inputs.n, c, seed, false)?;
    let p_nodes = apply_plan(tape, s_rows, &plan, lambda);
    let np_per_class: Vec<NodeId> = p_nodes
        .iter()
        .map(|p| tape.normalize_rows(p.expect("strict plan")))
        .collect();
    let np_all =
        if np_per_class.len() == 1 { np_per_class[0] } else { tape.concat_rows(&np_per_class) };
    let s_probs = class_probs(tape, s_rows, np_all, c, alpha);
    let labeled = s_labels.iter().filter(|&&l| l != IGNORE_LABEL).count();
    if labeled == 0 {
        return Err(Error::NoLabeledPixels);
    }
    let norm = T::one() / T::from_f64(((inputs.n + 1) * labeled) as f64);
    let ce = tape.masked_nll(s_probs, s_labels, IGNORE_LABEL, norm, eps);
    let (q_rows, _, _) = encoder.encode_bound(tape, bound, inputs.query)?;
    let q_probs = class_probs(tape, q_rows, np_all, c, alpha);
    let ent = tape.entropy_mean(q_probs, eps);
    let total = tape.linear_comb(&[(ce, T::one()), (ent, T::one())], T::zero());
    let ce_val = tape.scalar_value(ce).to_f64();
    let ent_val = tape.scalar_value(ent).to_f64();
    let _ = total;
    Ok((total, ce_val, ent_val))
}

// ---- the loop ----

struct LoopState<T: Real> {
    enc: ToyEncoder<T>,
    last_good: ToyEncoder<T>,
    opt: OptimizerState<T>,
    records: Vec<RunRecord>,
    aborted: Option<AbortDiagnostic>,
}

impl<T: Real> LoopState<T> {
    fn abort(&mut self, iteration: usize, detail: String) {
        log::error!("aborting fine-tuning at iteration {iteration}: {detail}");
        self.aborted = Some(AbortDiagnostic { iteration, detail });
    }
}

fn grads_to_map<T: Real>(
    tape: &Tape<T>,
    bound: &[(String, NodeId)],
    root: NodeId,
) -> BTreeMap<String, ArrayD<T>> {
    let grads = tape.backward(root);
    bound
        .iter()
        .filter_map(|(name, id)| grads.get(*id).map(|g| (name.clone(), g.clone())))
        .collect()
}

fn checkpoint_if_due<T: Real>(
    cfg: &FineTuneConfig,
    enc: &ToyEncoder<T>,
    iteration: usize,
    is_final: bool,
) -> Result<(), Error> {
    let Some(dir) = &cfg.checkpoint_dir else {
        return Ok(());
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if is_final {
        save_checkpoint(enc, &dir.join("final.ckpt"))?;
    } else {
        save_checkpoint(enc, &dir.join(format!("ckpt_{:05}.ckpt", iteration + 1)))?;
    }
    Ok(())
}

/// Runs the configured strategy on the episode. Returns the tuned encoder
/// (the input is untouched), the per-iteration log, and an abort diagnostic
/// if the loss went non-finite (in which case the encoder holds the last
/// known-good parameters).
pub fn finetune<T: Real>(
    encoder: &ToyEncoder<T>,
    episode: &Episode,
    config: &FineTuneConfig,
) -> Result<FineTuneResult<T>, Error> {
    config.validate()?;
    let log_of = |records: Vec<RunRecord>| RunLog {
        strategy: config.strategy.to_string(),
        seed: config.seed,
        records,
    };
    if matches!(config.strategy, Strategy::None) {
        return Ok(FineTuneResult { encoder: encoder.clone(), log: log_of(vec![]), aborted: None });
    }
    if episode.n_classes == 0 {
        return Err(Error::invalid_input("episode needs at least one foreground class"));
    }

    // Query labels must never be read from here on.
    let _section = guard::training_section();

    let stride = encoder.downsample();
    let shots: Vec<Shot<'_>> = episode
        .support
        .samples
        .iter()
        .map(|s| {
            Ok(Shot {
                image: &s.image,
                labels: downsample_labels(&s.mask, &s.image, stride)?,
            })
        })
        .collect::<Result<_, Error>>()?;
    let n = episode.n_classes;
    let k = shots.len();

    let mut state = LoopState {
        enc: encoder.clone(),
        last_good: encoder.clone(),
        opt: OptimizerState::new(T::from_f64(config.lr), T::from_f64(config.momentum)),
        records: Vec::with_capacity(config.iterations),
        aborted: None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 0xF17E));
    let base_seed = mix_seed(config.seed, 0xC9C);

    for iteration in 0..config.iterations {
        let t0 = Instant::now();
        let s_seed = mix_seed(base_seed, 2 * iteration as u64);
        let q_seed = mix_seed(base_seed, 2 * iteration as u64 + 1);
        let mut tape = Tape::<T>::new();
        let bound = state.enc.bind_params(&mut tape);

        let built: Result<(NodeId, RunRecord), Error> = match config.strategy {
            Strategy::Cpc => {
                let qi = rng.random_range(0..episode.query.samples.len());
                let q = &episode.query.samples[qi];
                let inputs = CpcInputs {
                    supports: shots.iter().map(|s| (s.image, s.labels.as_slice())).collect(),
                    query: &q.image,
                    n,
                };
                let mean_of = |v: &[Option<f64>]| {
                    let some: Vec<f64> = v.iter().flatten().copied().collect();
                    if some.is_empty() {
                        None
                    } else {
                        Some(some.iter().sum::<f64>() / some.len() as f64)
                    }
                };
                build_cpc_graph(
                    &mut tape,
                    &state.enc,
                    &bound,
                    &inputs,
                    config,
                    (s_seed, q_seed),
                    None,
                )
                .map(|(nodes, _)| {
                    (
                        nodes.total,
                        RunRecord {
                            iteration,
                            ce: nodes.ce,
                            pc: nodes.pc.unwrap_or(0.0),
                            bd: nodes.bd,
                            w_un: nodes.w_un,
                            total: 0.0,
                            d_intra_mean: mean_of(&nodes.d_intra),
                            d_inter_mean: mean_of(&nodes.d_inter),
                            entropy: None,
                            query_id: q.id.clone(),
                            wall_ms: 0.0,
                        },
                    )
                })
            }
            Strategy::SupFt => {
                let pair = rng.random_range(0..k * k);
                let (a, b) = (pair / k, pair % k);
                build_supervised_graph(
                    &mut tape,
                    &state.enc,
                    &bound,
                    (shots[a].image, &shots[a].labels),
                    (shots[b].image, &shots[b].labels),
                    n,
                    config,
                    s_seed,
                )
                .map(|(ce_node, ce_val)| {
                    (
                        ce_node,
                        RunRecord {
                            iteration,
                            ce: ce_val,
                            pc: 0.0,
                            bd: 0.0,
                            w_un: 0.0,
                            total: 0.0,
                            d_intra_mean: None,
                            d_inter_mean: None,
                            entropy: None,
                            query_id: format!(
                                "{}->{}",
                                episode.support.samples[a].id, episode.support.samples[b].id
                            ),
                            wall_ms: 0.0,
                        },
                    )
                })
            }
            Strategy::TransFt => {
                let qi = rng.random_range(0..episode.query.samples.len());
                let q = &episode.query.samples[qi];
                let inputs = CpcInputs {
                    supports: shots.iter().map(|s| (s.image, s.labels.as_slice())).collect(),
                    query: &q.image,
                    n,
                };
                build_entropy_graph(&mut tape, &state.enc, &bound, &inputs, config, s_seed).map(
                    |(total, ce_val, ent_val)| {
                        (
                            total,
                            RunRecord {
                                iteration,
                                ce: ce_val,
                                pc: 0.0,
                                bd: 0.0,
                                w_un: 0.0,
                                total: 0.0,
                                d_intra_mean: None,
                                d_inter_mean: None,
                                entropy: Some(ent_val),
                                query_id: q.id.clone(),
                                wall_ms: 0.0,
                            },
                        )
                    },
                )
            }
            Strategy::None => unreachable!("handled above"),
        };
        let (total_node, mut record) = match built {
            Ok(v) => v,
            Err(Error::NonFiniteLoss { detail, .. }) => {
                state.abort(iteration, detail);
                break;
            }
            Err(e) => return Err(e),
        };

        let total_val = tape.scalar_value(total_node).to_f64();
        record.total = total_val;
        if !total_val.is_finite() {
            state.abort(iteration, format!("non-finite loss {total_val}"));
            break;
        }
        // This iteration's parameters produced a finite loss: they are the
        // new known-good restore point.
        state.last_good = state.enc.clone();

        let grads = grads_to_map(&tape, &bound, total_node);
        drop(tape);
        match sgd_step(&mut state.enc, &grads, &mut state.opt) {
            Ok(()) => {}
            Err(Error::NonFiniteGradient { param }) => {
                state.abort(iteration, format!("non-finite gradient for {param}"));
                break;
            }
            Err(e) => return Err(e),
        }
        record.wall_ms = t0.elapsed().as_secs_f64() * 1e3;
        state.records.push(record);
        if (iteration + 1) % config.checkpoint_every == 0 && iteration + 1 < config.iterations {
            checkpoint_if_due(config, &state.enc, iteration, false)?;
        }
    }

    let final_enc = if state.aborted.is_some() { state.last_good } else { state.enc };
    checkpoint_if_due(config, &final_enc, config.iterations, true)?;
    Ok(FineTuneResult { encoder: final_enc, log: log_of(state.records), aborted: state.aborted })
}
