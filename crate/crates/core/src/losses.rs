//! Training objectives: temporal cycle consistency over clip embeddings,
//! NT-xent and supervised contrastive terms, cross-entropy, and the labeled
//! client's composite objective.
//!
//! Every loss exists in two forms: an `_expr` builder that extends an
//! expression graph (used by training, so gradients come from the engine)
//! and a value-level function over arrays (used by callers and oracles).
//! All exponentials go through max-shifted softmax / log-sum-exp.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{Array, EngineError, Graph, NodeId};
use crate::model::{self, ModelConfig};

/// Probability floor inside cross-entropy.
pub const CROSS_ENTROPY_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("empty sequence: {0}")]
    EmptySequence(String),
    #[error("cycle-back index {index} out of range 1..={len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("need at least 2 clips, got {0}")]
    TooFewClips(usize),
    #[error("class sets hold {actual} embeddings but batch size is {declared}")]
    InconsistentBatchSize { declared: usize, actual: usize },
    #[error("malformed one-hot label: {0}")]
    MalformedOneHot(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("label {0} outside 1..={1}")]
    LabelOutOfRange(usize, usize),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

/// Similarity metric used inside the cycle-consistency softmaxes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    Cosine,
    NegativeSquaredDistance,
}

/// Reading of the Gaussian-prior denominator. `Variance` divides the squared
/// index error by the variance itself (the original cycle-back semantics);
/// `VarianceSquared` is the literal alternative. Both regularize with
/// `lambda_sigma * log(variance)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CycleBackDenominator {
    Variance,
    VarianceSquared,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TccConfig {
    /// Softmax temperature for both similarity softmaxes.
    pub tau: f64,
    /// Weight of the log-variance regularizer.
    pub lambda_sigma: f64,
    /// Weight of the batch cycle-consistency objective.
    pub lambda_t: f64,
    /// Floor on the cycle-back variance; guards log(0) when the return
    /// distribution is one-hot.
    pub variance_floor: f64,
    pub similarity: Similarity,
    pub denominator: CycleBackDenominator,
}

impl Default for TccConfig {
    fn default() -> Self {
        TccConfig {
            tau: 0.05,
            lambda_sigma: 1.0,
            lambda_t: 10.0,
            variance_floor: 1e-6,
            similarity: Similarity::Cosine,
            denominator: CycleBackDenominator::Variance,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveConfig {
    /// NT-xent temperature.
    pub tau: f64,
    /// Weight of the contrastive term in the labeled objective.
    pub lambda_c: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig { tau: 0.1, lambda_c: 10.0 }
    }
}

/// Pairwise similarities between the rows of `a` (n, d) and `b` (m, d).
pub fn similarity_matrix_expr(
    g: &mut Graph,
    a: NodeId,
    b: NodeId,
    sim: Similarity,
) -> Result<NodeId, EngineError> {
    match sim {
        Similarity::Cosine => g.cosine_matrix(a, b),
        Similarity::NegativeSquaredDistance => {
            let (n, m) = (g.shape_of(a)[0], g.shape_of(b)[0]);
            let bt = g.transpose(b)?;
            let cross = g.matmul(a, bt)?;
            let cross2 = g.mul_scalar(cross, 2.0)?;
            let ra = g.row_norms(a)?;
            let sq_a = g.square(ra)?;
            let rb = g.row_norms(b)?;
            let sq_b = g.square(rb)?;
            let col = g.reshape(sq_a, &[n, 1])?;
            let ones_row = g.constant(Array::new(vec![1, m], vec![1.0; m]).expect("ones"));
            let term_a = g.matmul(col, ones_row)?;
            let ones_col = g.constant(Array::new(vec![n, 1], vec![1.0; n]).expect("ones"));
            let row = g.reshape(sq_b, &[1, m])?;
            let term_b = g.matmul(ones_col, row)?;
            let partial = g.sub(cross2, term_a)?;
            g.sub(partial, term_b)
        }
    }
}

fn similarity_pair_expr(
    g: &mut Graph,
    u: NodeId,
    v: NodeId,
    sim: Similarity,
) -> Result<NodeId, EngineError> {
    match sim {
        Similarity::Cosine => g.cosine(u, v),
        Similarity::NegativeSquaredDistance => {
            let d = g.sub(u, v)?;
            let sq = g.dot(d, d)?;
            g.mul_scalar(sq, -1.0)
        }
    }
}

fn require_sequence(g: &Graph, id: NodeId, what: &str) -> Result<(usize, usize), LossError> {
    let shape = g.shape_of(id);
    if shape.len() != 2 || shape[0] == 0 || shape[1] == 0 {
        return Err(LossError::EmptySequence(format!(
            "{what}: expected non-empty (len, dim) embeddings, got {shape:?}"
        )));
    }
    Ok((shape[0], shape[1]))
}

/// Soft nearest neighbor of `u` in the rows of `v_seq`: the similarity
/// softmax `alpha` and the convex combination it induces.
pub fn soft_nearest_neighbor(
    u: &Array,
    v_seq: &Array,
    cfg: &TccConfig,
) -> Result<(Array, Array), LossError> {
    let mut g = Graph::new();
    if v_seq.rank() != 2 || v_seq.shape()[0] == 0 {
        return Err(LossError::EmptySequence("soft_nearest_neighbor: V".into()));
    }
    let m = v_seq.shape()[0];
    let u_mat = g.constant(Array::new(vec![1, u.len()], u.data().to_vec())?);
    let v_node = g.constant(v_seq.clone());
    let sims = similarity_matrix_expr(&mut g, u_mat, v_node, cfg.similarity)?;
    let flat = g.reshape(sims, &[m])?;
    let scaled = g.mul_scalar(flat, 1.0 / cfg.tau)?;
    let alpha = g.softmax(scaled, 0)?;
    let alpha_row = g.reshape(alpha, &[1, m])?;
    let vt_mat = g.matmul(alpha_row, v_node)?;
    let vt = g.reshape(vt_mat, &[v_seq.shape()[1]])?;
    let bindings = Default::default();
    let v_tilde = g.evaluate(vt, &bindings)?;
    let alpha_val = g.evaluate(alpha, &bindings)?;
    Ok((v_tilde, alpha_val))
}

/// One cycle-back term starting at row `k0` (0-based) of `x`, given the
/// precomputed similarity matrix of `x` against `y`. Indices inside the
/// mean/variance are 1-based.
fn cycle_back_from_sims(
    g: &mut Graph,
    k0: usize,
    x: NodeId,
    y: NodeId,
    sims_xy: NodeId,
    cfg: &TccConfig,
) -> Result<NodeId, LossError> {
    let n = g.shape_of(x)[0];
    let m = g.shape_of(y)[0];
    let inv_tau = 1.0 / cfg.tau;

    let row = g.row(sims_xy, k0)?;
    let row_scaled = g.mul_scalar(row, inv_tau)?;
    let alpha = g.softmax(row_scaled, 0)?;
    let alpha_row = g.reshape(alpha, &[1, m])?;
    let v_tilde = g.matmul(alpha_row, y)?;

    let sims_back = similarity_matrix_expr(g, v_tilde, x, cfg.similarity)?;
    let back_flat = g.reshape(sims_back, &[n])?;
    let back_scaled = g.mul_scalar(back_flat, inv_tau)?;
    let beta = g.softmax(back_scaled, 0)?;

    let idx = g.constant(Array::from_vec((1..=n).map(|i| i as f64).collect()));
    let mu = g.dot(beta, idx)?;
    let dev = g.sub(idx, mu)?;
    let dev_sq = g.square(dev)?;
    let var_raw = g.dot(beta, dev_sq)?;
    let var = g.clamp_min(var_raw, cfg.variance_floor);

    let k_scalar = g.scalar((k0 + 1) as f64);
    let err = g.sub(k_scalar, mu)?;
    let err_sq = g.square(err)?;
    let denom = match cfg.denominator {
        CycleBackDenominator::Variance => var,
        CycleBackDenominator::VarianceSquared => g.square(var)?,
    };
    let fit = g.div(err_sq, denom)?;
    let log_var = g.log(var);
    let reg = g.mul_scalar(log_var, cfg.lambda_sigma)?;
    Ok(g.add(fit, reg)?)
}

/// Cycle-back loss for anchor `k` (1-based) of `u_seq` against `v_seq`.
pub fn cycle_back_expr(
    g: &mut Graph,
    k: usize,
    u_seq: NodeId,
    v_seq: NodeId,
    cfg: &TccConfig,
) -> Result<NodeId, LossError> {
    let (n, _) = require_sequence(g, u_seq, "cycle_back")?;
    require_sequence(g, v_seq, "cycle_back")?;
    if k == 0 || k > n {
        return Err(LossError::IndexOutOfRange { index: k, len: n });
    }
    let sims = similarity_matrix_expr(g, u_seq, v_seq, cfg.similarity)?;
    cycle_back_from_sims(g, k - 1, u_seq, v_seq, sims, cfg)
}

pub fn cycle_back_loss(
    k: usize,
    u_seq: &Array,
    v_seq: &Array,
    cfg: &TccConfig,
) -> Result<f64, LossError> {
    let mut g = Graph::new();
    let u = g.constant(u_seq.clone());
    let v = g.constant(v_seq.clone());
    let loss = cycle_back_expr(&mut g, k, u, v, cfg)?;
    Ok(g.evaluate(loss, &Default::default())?.item()?)
}

/// Consistency loss for a pair of embedding sequences: the average of all
/// cycle-back terms in both directions. Symmetric in its arguments, exactly.
pub fn tcc_pair_loss_expr(
    g: &mut Graph,
    u_seq: NodeId,
    v_seq: NodeId,
    cfg: &TccConfig,
) -> Result<NodeId, LossError> {
    let (n, _) = require_sequence(g, u_seq, "tcc_pair_loss")?;
    let (m, _) = require_sequence(g, v_seq, "tcc_pair_loss")?;

    let sims_uv = similarity_matrix_expr(g, u_seq, v_seq, cfg.similarity)?;
    // Both supported metrics are symmetric, so the reverse similarity matrix
    // is the transpose.
    let sims_vu = g.transpose(sims_uv)?;

    let mut u_terms = Vec::with_capacity(n);
    for k0 in 0..n {
        u_terms.push(cycle_back_from_sims(g, k0, u_seq, v_seq, sims_uv, cfg)?);
    }
    let mut v_terms = Vec::with_capacity(m);
    for k0 in 0..m {
        v_terms.push(cycle_back_from_sims(g, k0, v_seq, u_seq, sims_vu, cfg)?);
    }
    let u_pack = g.pack(&u_terms)?;
    let u_sum = g.sum(u_pack);
    let v_pack = g.pack(&v_terms)?;
    let v_sum = g.sum(v_pack);
    let total = g.add(u_sum, v_sum)?;
    Ok(g.mul_scalar(total, 1.0 / (n + m) as f64)?)
}

pub fn tcc_pair_loss(u_seq: &Array, v_seq: &Array, cfg: &TccConfig) -> Result<f64, LossError> {
    let mut g = Graph::new();
    let u = g.constant(u_seq.clone());
    let v = g.constant(v_seq.clone());
    let loss = tcc_pair_loss_expr(&mut g, u, v, cfg)?;
    Ok(g.evaluate(loss, &Default::default())?.item()?)
}

/// Batch objective over clip embeddings: lambda_t scaled mean of the pair
/// loss over all ordered pairs. The pair loss is exactly symmetric, so each
/// unordered pair is built once and counted twice.
pub fn tcc_batch_objective_expr(
    g: &mut Graph,
    clips: &[NodeId],
    cfg: &TccConfig,
) -> Result<NodeId, LossError> {
    let b = clips.len();
    if b < 2 {
        return Err(LossError::TooFewClips(b));
    }
    let mut terms = Vec::with_capacity(b * (b - 1) / 2);
    for i in 0..b {
        for k in (i + 1)..b {
            terms.push(tcc_pair_loss_expr(g, clips[i], clips[k], cfg)?);
        }
    }
    let packed = g.pack(&terms)?;
    let total = g.sum(packed);
    let scale = 2.0 * cfg.lambda_t / (b * (b - 1)) as f64;
    Ok(g.mul_scalar(total, scale)?)
}

pub fn tcc_batch_objective(clips: &[Array], cfg: &TccConfig) -> Result<f64, LossError> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = clips.iter().map(|c| g.constant(c.clone())).collect();
    let loss = tcc_batch_objective_expr(&mut g, &ids, cfg)?;
    Ok(g.evaluate(loss, &Default::default())?.item()?)
}

/// NT-xent term for an anchor, its positive, and a set of negatives. The
/// negatives may be empty, in which case the loss is exactly zero.
pub fn ntxent_expr(
    g: &mut Graph,
    anchor: NodeId,
    positive: NodeId,
    negatives: &[NodeId],
    cfg: &ContrastiveConfig,
) -> Result<NodeId, LossError> {
    let mut sims = Vec::with_capacity(negatives.len() + 1);
    sims.push(similarity_pair_expr(g, anchor, positive, Similarity::Cosine)?);
    for &neg in negatives {
        sims.push(similarity_pair_expr(g, anchor, neg, Similarity::Cosine)?);
    }
    let packed = g.pack(&sims)?;
    let scaled = g.mul_scalar(packed, 1.0 / cfg.tau)?;
    let lse = g.logsumexp(scaled)?;
    let pos_term = g.index(scaled, 0)?;
    Ok(g.sub(lse, pos_term)?)
}

pub fn ntxent(
    anchor: &Array,
    positive: &Array,
    negatives: &[Array],
    cfg: &ContrastiveConfig,
) -> Result<f64, LossError> {
    let mut g = Graph::new();
    let a = g.constant(anchor.clone());
    let p = g.constant(positive.clone());
    let negs: Vec<NodeId> = negatives.iter().map(|n| g.constant(n.clone())).collect();
    let loss = ntxent_expr(&mut g, a, p, &negs, cfg)?;
    Ok(g.evaluate(loss, &Default::default())?.item()?)
}

/// Supervised contrastive loss over a batch embedding node, grouped by the
/// 1-based labels. Classes with fewer than two members contribute nothing
/// (they have no positives); their embeddings still serve as negatives.
pub fn supervised_contrastive_expr(
    g: &mut Graph,
    embeddings: NodeId,
    labels: &[usize],
    num_phases: usize,
    cfg: &ContrastiveConfig,
) -> Result<NodeId, LossError> {
    let shape = g.shape_of(embeddings);
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(LossError::InconsistentBatchSize {
            declared: labels.len(),
            actual: shape.first().copied().unwrap_or(0),
        });
    }
    let batch = labels.len();
    if batch == 0 {
        return Err(LossError::EmptyBatch);
    }
    for &l in labels {
        if l == 0 || l > num_phases {
            return Err(LossError::LabelOutOfRange(l, num_phases));
        }
    }

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_phases];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l - 1].push(i);
    }
    if by_class.iter().all(|c| c.len() < 2) {
        return Ok(g.scalar(0.0));
    }

    let sims = g.cosine_matrix(embeddings, embeddings)?;
    let inv_tau = 1.0 / cfg.tau;
    let mut class_sums = Vec::new();
    for (class0, members) in by_class.iter().enumerate() {
        if members.len() < 2 {
            continue;
        }
        let negatives: Vec<usize> = (0..batch)
            .filter(|i| labels[*i] != class0 + 1)
            .collect();
        let mut terms = Vec::with_capacity(members.len() * (members.len() - 1));
        for &a in members {
            let row = g.row(sims, a)?;
            let row_scaled = g.mul_scalar(row, inv_tau)?;
            for &p in members {
                if p == a {
                    continue;
                }
                let mut picked = Vec::with_capacity(negatives.len() + 1);
                picked.push(p);
                picked.extend_from_slice(&negatives);
                let sel = g.gather(row_scaled, picked)?;
                let lse = g.logsumexp(sel)?;
                let pos = g.index(row_scaled, p)?;
                terms.push(g.sub(lse, pos)?);
            }
        }
        let packed = g.pack(&terms)?;
        let sum = g.sum(packed);
        class_sums.push(g.mul_scalar(sum, 1.0 / (members.len() - 1) as f64)?);
    }
    let packed = g.pack(&class_sums)?;
    let total = g.sum(packed);
    Ok(g.mul_scalar(total, 1.0 / batch as f64)?)
}

/// Value-level supervised contrastive loss over per-class embedding sets.
/// `batch_size` must equal the total number of embeddings.
pub fn supervised_contrastive_batch(
    class_sets: &[Vec<Array>],
    batch_size: usize,
    cfg: &ContrastiveConfig,
) -> Result<f64, LossError> {
    let actual: usize = class_sets.iter().map(Vec::len).sum();
    if actual != batch_size {
        return Err(LossError::InconsistentBatchSize { declared: batch_size, actual });
    }
    if actual == 0 {
        return Err(LossError::EmptyBatch);
    }
    let dim = class_sets
        .iter()
        .flat_map(|s| s.iter())
        .next()
        .map(Array::len)
        .unwrap_or(0);
    let mut rows = Vec::with_capacity(actual);
    let mut labels = Vec::with_capacity(actual);
    for (class0, set) in class_sets.iter().enumerate() {
        for emb in set {
            rows.push(emb.data().to_vec());
            labels.push(class0 + 1);
        }
    }
    let matrix = Array::from_rows(&rows).map_err(|_| {
        LossError::EmptySequence(format!("embeddings of unequal dimension (expected {dim})"))
    })?;
    let mut g = Graph::new();
    let emb = g.constant(matrix);
    let loss = supervised_contrastive_expr(&mut g, emb, &labels, class_sets.len(), cfg)?;
    Ok(g.evaluate(loss, &Default::default())?.item()?)
}

/// Cross-entropy of a probability vector against a one-hot target.
pub fn cross_entropy(y_onehot: &Array, probs: &Array) -> Result<f64, LossError> {
    if y_onehot.rank() != 1 || y_onehot.shape() != probs.shape() {
        return Err(LossError::MalformedOneHot(format!(
            "expected matching vectors, got {:?} and {:?}",
            y_onehot.shape(),
            probs.shape()
        )));
    }
    let mut hot = None;
    for (i, &v) in y_onehot.data().iter().enumerate() {
        if v == 1.0 {
            if hot.replace(i).is_some() {
                return Err(LossError::MalformedOneHot("multiple ones".into()));
            }
        } else if v != 0.0 {
            return Err(LossError::MalformedOneHot(format!("entry {v} is neither 0 nor 1")));
        }
    }
    let hot = hot.ok_or_else(|| LossError::MalformedOneHot("no one set".into()))?;
    Ok(-probs.data()[hot].max(CROSS_ENTROPY_EPS).ln())
}

/// Mean cross-entropy over a batch of probability rows with 1-based labels.
pub fn batch_cross_entropy_expr(
    g: &mut Graph,
    probs: NodeId,
    labels: &[usize],
) -> Result<NodeId, LossError> {
    let shape = g.shape_of(probs);
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(LossError::InconsistentBatchSize {
            declared: labels.len(),
            actual: shape.first().copied().unwrap_or(0),
        });
    }
    if labels.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let classes = shape[1];
    let mut terms = Vec::with_capacity(labels.len());
    for (i, &label) in labels.iter().enumerate() {
        if label == 0 || label > classes {
            return Err(LossError::LabelOutOfRange(label, classes));
        }
        let row = g.row(probs, i)?;
        let p = g.index(row, label - 1)?;
        let clamped = g.clamp_min(p, CROSS_ENTROPY_EPS);
        let log_p = g.log(clamped);
        terms.push(g.mul_scalar(log_p, -1.0)?);
    }
    let packed = g.pack(&terms)?;
    Ok(g.mean(packed)?)
}

/// The labeled client's objective over a frame batch node: mean
/// cross-entropy plus `lambda_c` times the supervised contrastive loss on
/// the extractor's embeddings. A zero `lambda_c` skips the contrastive
/// construction entirely (the term is identically zero).
pub fn labeled_objective_expr(
    g: &mut Graph,
    model_cfg: &ModelConfig,
    frames: NodeId,
    labels: &[usize],
    cfg: &ContrastiveConfig,
) -> Result<NodeId, LossError> {
    if labels.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let embeddings = model::features_expr(g, model_cfg, frames)?;
    let probs = model::probs_expr(g, model_cfg, embeddings)?;
    let ce = batch_cross_entropy_expr(g, probs, labels)?;
    if cfg.lambda_c == 0.0 {
        return Ok(ce);
    }
    let cont = supervised_contrastive_expr(g, embeddings, labels, model_cfg.num_phases, cfg)?;
    let weighted = g.mul_scalar(cont, cfg.lambda_c)?;
    Ok(g.add(ce, weighted)?)
}

pub fn labeled_objective(
    model_cfg: &ModelConfig,
    params: &crate::model::ParameterSet,
    frames: &Array,
    labels: &[usize],
    cfg: &ContrastiveConfig,
) -> Result<f64, LossError> {
    let mut g = Graph::new();
    let x = g.constant(frames.clone());
    let loss = labeled_objective_expr(&mut g, model_cfg, x, labels, cfg)?;
    Ok(g.evaluate(loss, &params.bindings())?.item()?)
}
