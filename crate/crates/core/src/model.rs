//! Global model: a feature extractor (omega) feeding a softmax classifier
//! (theta). At desk scale the extractor is a small rectifier MLP; the final
//! projection to the embedding space is linear so embeddings are free to
//! spread over the whole space.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{Array, Bindings, EngineError, Graph, NodeId};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("parameter '{0}' missing")]
    MissingParameter(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint encoding: {0}")]
    Encoding(#[from] serde_json::Error),
    #[error("unsupported checkpoint format version {0}")]
    FormatVersion(u32),
}

/// Architecture of the global model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub num_phases: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim == 0 {
            return Err(ModelError::InvalidConfig("input_dim must be positive".into()));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(ModelError::InvalidConfig(
                "at least one positive hidden layer required".into(),
            ));
        }
        if self.embed_dim < 2 {
            return Err(ModelError::InvalidConfig("embed_dim must be >= 2".into()));
        }
        if self.num_phases == 0 {
            return Err(ModelError::InvalidConfig("num_phases must be positive".into()));
        }
        Ok(())
    }

    /// Layer widths of the feature extractor: input, hidden..., embed.
    pub fn phi_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.embed_dim);
        dims
    }
}

/// Named parameter arrays for the extractor (omega) and classifier (theta).
///
/// Names and shapes are determined solely by the `ModelConfig`; the maps are
/// ordered, so serialization round-trips byte-identically. The type carries
/// no optimizer state, which keeps aggregation payloads structurally free of
/// optimizer accumulators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    pub omega: BTreeMap<String, Array>,
    pub theta: BTreeMap<String, Array>,
}

impl ParameterSet {
    pub fn omega_names(&self) -> Vec<String> {
        self.omega.keys().cloned().collect()
    }

    pub fn theta_names(&self) -> Vec<String> {
        self.theta.keys().cloned().collect()
    }

    pub fn all_names(&self) -> Vec<String> {
        self.omega.keys().chain(self.theta.keys()).cloned().collect()
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.omega.get(name).or_else(|| self.theta.get(name))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        if let Some(a) = self.omega.get_mut(name) {
            Some(a)
        } else {
            self.theta.get_mut(name)
        }
    }

    /// Leaf bindings for expression graphs built by `features_expr` /
    /// `logits_expr`.
    pub fn bindings(&self) -> Bindings {
        self.omega
            .iter()
            .chain(self.theta.iter())
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// Largest absolute element-wise difference across all arrays.
    pub fn max_abs_diff(&self, other: &ParameterSet) -> f64 {
        let mut worst: f64 = 0.0;
        for (name, a) in self.omega.iter().chain(self.theta.iter()) {
            let b = other.get(name).expect("parameter sets share names");
            for (x, y) in a.data().iter().zip(b.data()) {
                worst = worst.max((x - y).abs());
            }
        }
        worst
    }
}

/// Deterministic initialization: weights uniform in +-1/sqrt(fan_in), biases
/// zero, draw order fixed by layer index.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ParameterSet, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
        let scale = 1.0 / (rows as f64).sqrt();
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
        Array::new(vec![rows, cols], data).expect("finite init")
    };

    let dims = config.phi_dims();
    let mut omega = BTreeMap::new();
    for i in 0..dims.len() - 1 {
        omega.insert(format!("omega.w{i}"), draw(dims[i], dims[i + 1], &mut rng));
        omega.insert(format!("omega.b{i}"), Array::zeros(&[dims[i + 1]]));
    }
    let mut theta = BTreeMap::new();
    theta.insert(
        "theta.w".to_string(),
        draw(config.embed_dim, config.num_phases, &mut rng),
    );
    theta.insert("theta.b".to_string(), Array::zeros(&[config.num_phases]));
    Ok(ParameterSet { omega, theta })
}

/// Build the extractor forward pass over `frames` (a (batch, input_dim)
/// node), registering omega leaves. Returns the (batch, embed_dim) node.
pub fn features_expr(
    g: &mut Graph,
    config: &ModelConfig,
    frames: NodeId,
) -> Result<NodeId, EngineError> {
    let dims = config.phi_dims();
    let mut cur = frames;
    for i in 0..dims.len() - 1 {
        let w = g.leaf(&format!("omega.w{i}"), &[dims[i], dims[i + 1]])?;
        let b = g.leaf(&format!("omega.b{i}"), &[dims[i + 1]])?;
        cur = g.affine(cur, w, b)?;
        if i + 2 < dims.len() {
            cur = g.relu(cur);
        }
    }
    Ok(cur)
}

/// Classifier logits over embeddings, registering theta leaves.
pub fn logits_expr(
    g: &mut Graph,
    config: &ModelConfig,
    embeddings: NodeId,
) -> Result<NodeId, EngineError> {
    let w = g.leaf("theta.w", &[config.embed_dim, config.num_phases])?;
    let b = g.leaf("theta.b", &[config.num_phases])?;
    g.affine(embeddings, w, b)
}

/// Row-wise phase probabilities over embeddings.
pub fn probs_expr(
    g: &mut Graph,
    config: &ModelConfig,
    embeddings: NodeId,
) -> Result<NodeId, EngineError> {
    let logits = logits_expr(g, config, embeddings)?;
    g.softmax(logits, 1)
}

fn check_batch(config: &ModelConfig, frames: &Array, dim: usize, what: &str) -> Result<(), ModelError> {
    if frames.rank() != 2 || frames.shape()[1] != dim {
        return Err(ModelError::Engine(EngineError::ShapeMismatch(format!(
            "{what}: expected (batch, {dim}), got {:?}",
            frames.shape()
        ))));
    }
    let _ = config;
    Ok(())
}

/// Embeddings for a batch of input frames. Pure in (params, frames).
pub fn extract_features(
    config: &ModelConfig,
    params: &ParameterSet,
    frames: &Array,
) -> Result<Array, ModelError> {
    check_batch(config, frames, config.input_dim, "extract_features")?;
    if frames.shape()[0] == 0 {
        return Ok(Array::zeros(&[0, config.embed_dim]));
    }
    let mut g = Graph::new();
    let x = g.constant(frames.clone());
    let emb = features_expr(&mut g, config, x)?;
    Ok(g.evaluate(emb, &params.bindings())?)
}

/// Phase probabilities for a batch of embeddings; rows sum to 1.
pub fn classify(
    config: &ModelConfig,
    params: &ParameterSet,
    embeddings: &Array,
) -> Result<Array, ModelError> {
    check_batch(config, embeddings, config.embed_dim, "classify")?;
    if embeddings.shape()[0] == 0 {
        return Ok(Array::zeros(&[0, config.num_phases]));
    }
    let mut g = Graph::new();
    let e = g.constant(embeddings.clone());
    let probs = probs_expr(&mut g, config, e)?;
    Ok(g.evaluate(probs, &params.bindings())?)
}

/// Frame-wise phase predictions (1-based ids). Ties break to the lowest id.
pub fn predict_phases(
    config: &ModelConfig,
    params: &ParameterSet,
    frames: &Array,
) -> Result<Vec<usize>, ModelError> {
    let emb = extract_features(config, params, frames)?;
    let probs = classify(config, params, &emb)?;
    let mut out = Vec::with_capacity(probs.shape()[0]);
    for i in 0..probs.shape()[0] {
        let row = probs.row(i);
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        out.push(best + 1);
    }
    Ok(out)
}

/// Seeds that produced a checkpoint's parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedLineage {
    pub master_seed: u64,
    pub init_seed: u64,
}

/// Self-describing model snapshot: config, seed lineage, and every named
/// array with shape and row-major values. JSON round-trips bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub seed_lineage: SeedLineage,
    pub params: ParameterSet,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String, ModelError> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(ModelError::FormatVersion(ck.format_version));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Checkpoint::from_json(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ModelConfig {
        ModelConfig {
            input_dim: 4,
            hidden_dims: vec![5],
            embed_dim: 3,
            num_phases: 3,
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = small_config();
        let a = init_params(&cfg, 7).unwrap();
        let b = init_params(&cfg, 7).unwrap();
        assert_eq!(a, b);
        let c = init_params(&cfg, 8).unwrap();
        assert!(a.max_abs_diff(&c) > 0.0);
    }

    #[test]
    fn biases_are_zero_at_init() {
        let cfg = small_config();
        let p = init_params(&cfg, 1).unwrap();
        for (name, arr) in p.omega.iter().chain(p.theta.iter()) {
            if name.contains(".b") {
                assert!(arr.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_config();
        cfg.hidden_dims.clear();
        assert!(cfg.validate().is_err());
        cfg.hidden_dims = vec![4];
        cfg.embed_dim = 1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn empty_batch_gives_empty_embeddings() {
        let cfg = small_config();
        let p = init_params(&cfg, 1).unwrap();
        let emb = extract_features(&cfg, &p, &Array::zeros(&[0, 4])).unwrap();
        assert_eq!(emb.shape(), &[0, 3]);
    }

    #[test]
    fn permuting_rows_permutes_outputs() {
        let cfg = small_config();
        let p = init_params(&cfg, 3).unwrap();
        let frames = Array::from_rows(&[
            vec![0.1, 0.2, 0.3, 0.4],
            vec![-1.0, 0.5, 0.0, 2.0],
            vec![0.7, -0.7, 0.7, -0.7],
        ])
        .unwrap();
        let swapped = Array::from_rows(&[
            vec![-1.0, 0.5, 0.0, 2.0],
            vec![0.1, 0.2, 0.3, 0.4],
            vec![0.7, -0.7, 0.7, -0.7],
        ])
        .unwrap();
        let a = extract_features(&cfg, &p, &frames).unwrap();
        let b = extract_features(&cfg, &p, &swapped).unwrap();
        assert_eq!(a.row(0), b.row(1));
        assert_eq!(a.row(1), b.row(0));
        assert_eq!(a.row(2), b.row(2));
    }

    #[test]
    fn feature_gradient_matches_numeric() {
        let cfg = small_config();
        let p = init_params(&cfg, 11).unwrap();
        let mut g = Graph::new();
        let frames = g.constant(
            Array::from_rows(&[vec![0.4, -0.2, 0.9, 0.1], vec![0.3, 0.8, -0.5, -0.9]]).unwrap(),
        );
        let emb = features_expr(&mut g, &cfg, frames).unwrap();
        let loss = g.mean(emb).unwrap();
        let names = p.omega_names();
        let wrt: Vec<&str> = names.iter().map(String::as_str).collect();
        let b = p.bindings();
        let analytic = g.gradient(loss, &b, &wrt).unwrap();
        let numeric = g.numeric_gradient(loss, &b, &wrt, 1e-5).unwrap();
        for name in &wrt {
            let a = analytic[*name].data();
            let n = numeric[*name].data();
            let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let scale: f64 = n.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(diff <= 1e-4 * scale.max(1e-8), "{name}");
        }
    }

    #[test]
    fn zero_theta_classifies_uniformly() {
        let cfg = small_config();
        let mut p = init_params(&cfg, 2).unwrap();
        for arr in p.theta.values_mut() {
            arr.data_mut().fill(0.0);
        }
        let emb = Array::from_rows(&[vec![0.5, -0.3, 0.2], vec![2.0, 1.0, 0.0]]).unwrap();
        let probs = classify(&cfg, &p, &emb).unwrap();
        for i in 0..2 {
            for &v in probs.row(i) {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn probability_rows_sum_to_one() {
        let cfg = small_config();
        let p = init_params(&cfg, 5).unwrap();
        let frames = Array::from_rows(&[vec![0.2, 0.4, -0.6, 0.8], vec![1.0, -1.0, 1.0, -1.0]])
            .unwrap();
        let emb = extract_features(&cfg, &p, &frames).unwrap();
        let probs = classify(&cfg, &p, &emb).unwrap();
        for i in 0..2 {
            let s: f64 = probs.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_invariant_to_logit_shift() {
        let cfg = small_config();
        let mut p = init_params(&cfg, 9).unwrap();
        let frames = Array::from_rows(&[vec![0.9, 0.1, -0.4, 0.3], vec![-0.2, 0.6, 0.5, -0.8]])
            .unwrap();
        let before = predict_phases(&cfg, &p, &frames).unwrap();
        for v in p.theta.get_mut("theta.b").unwrap().data_mut() {
            *v += 13.5;
        }
        let after = predict_phases(&cfg, &p, &frames).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn checkpoint_roundtrip_is_byte_identical() {
        let cfg = small_config();
        let params = init_params(&cfg, 42).unwrap();
        let ck = Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: cfg,
            seed_lineage: SeedLineage { master_seed: 42, init_seed: 42 },
            params,
        };
        let first = ck.to_json().unwrap();
        let reloaded = Checkpoint::from_json(&first).unwrap();
        let second = reloaded.to_json().unwrap();
        assert_eq!(first, second);
        assert_eq!(ck, reloaded);
    }
}
