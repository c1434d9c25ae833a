//! The federated training protocol: per-round parallel local training,
//! server-side aggregation of the feature extractor with the labeled
//! client's classifier carried over verbatim, validation on the labeled
//! client only, early stopping, and the baseline training modes.
//!
//! Determinism contract: every random draw comes from a stream derived from
//! (master_seed, purpose, client index, round), so two runs with identical
//! config and seed produce bit-identical parameters regardless of physical
//! scheduling. Client updates within a round depend only on the round's
//! broadcast model, never on sibling clients.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{Array, EngineError, Graph};
use crate::losses::{
    labeled_objective_expr, tcc_batch_objective_expr, ContrastiveConfig, LossError, TccConfig,
};
use crate::metrics::{macro_f1, MetricError};
use crate::model::{self, ModelConfig, ParameterSet};
use crate::rng::stream;
use crate::sampling::{sample_epoch_clips, shuffled_indices, Clip, SampleError, SamplerConfig};
use crate::synthdata::{ClientDataset, ClientRole, DataError, Split};

#[derive(Debug, Error)]
pub enum FedError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error("client has {have} clips, need at least {need} for one batch")]
    InsufficientClips { have: usize, need: usize },
    #[error("client '{0}' has no training frames")]
    EmptyDataset(String),
    #[error("aggregation weights sum to {0}, expected 1")]
    WeightSum(f64),
    #[error("aggregation inputs disagree: {0}")]
    AggregationMismatch(String),
    #[error("aggregate left the convex hull at '{0}'")]
    ConvexityViolated(String),
    #[error("invalid federation config: {0}")]
    InvalidConfig(String),
}

/// Training modes: the full method, its no-contrastive ablation, cycle-
/// consistency pretraining plus supervised fine-tuning, supervised training
/// on the labeled client alone, and fully supervised federated averaging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Fedcy,
    FedcyNoCont,
    Fedtcc,
    FullsupLabeledOnly,
    FedavgFullsup,
}

impl TrainMode {
    pub const ALL: [TrainMode; 5] = [
        TrainMode::Fedcy,
        TrainMode::FedcyNoCont,
        TrainMode::Fedtcc,
        TrainMode::FullsupLabeledOnly,
        TrainMode::FedavgFullsup,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TrainMode::Fedcy => "fedcy",
            TrainMode::FedcyNoCont => "fedcy_no_cont",
            TrainMode::Fedtcc => "fedtcc",
            TrainMode::FullsupLabeledOnly => "fullsup_labeled_only",
            TrainMode::FedavgFullsup => "fedavg_fullsup",
        }
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TrainMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TrainMode::ALL
            .iter()
            .find(|m| m.as_str() == s)
            .copied()
            .ok_or_else(|| format!("unknown mode '{s}'"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationConfig {
    pub mode: TrainMode,
    pub rounds_max: u64,
    pub min_epochs: u64,
    pub patience: u64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub labeled_batch_size: usize,
    /// Clips per unsupervised batch (|B|).
    pub clip_batch_size: usize,
    pub sampler: SamplerConfig,
    pub tcc: TccConfig,
    pub contrastive: ContrastiveConfig,
    /// Rounds of federated cycle-consistency pretraining in fedtcc mode.
    pub fedtcc_pretrain_rounds: u64,
    pub master_seed: u64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            mode: TrainMode::Fedcy,
            rounds_max: 30,
            min_epochs: 6,
            patience: 3,
            learning_rate: 5e-5,
            weight_decay: 5e-5,
            labeled_batch_size: 64,
            clip_batch_size: 2,
            sampler: SamplerConfig::default(),
            tcc: TccConfig::default(),
            contrastive: ContrastiveConfig::default(),
            fedtcc_pretrain_rounds: 30,
            master_seed: 0,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<(), FedError> {
        if self.patience == 0 {
            return Err(FedError::InvalidConfig("patience must be >= 1".into()));
        }
        if self.rounds_max == 0 {
            return Err(FedError::InvalidConfig("rounds_max must be >= 1".into()));
        }
        if self.labeled_batch_size == 0 {
            return Err(FedError::InvalidConfig("labeled_batch_size must be >= 1".into()));
        }
        if self.clip_batch_size < 2 {
            return Err(FedError::InvalidConfig(
                "clip_batch_size must be >= 2 (pair loss needs two clips)".into(),
            ));
        }
        if self.learning_rate < 0.0 || self.weight_decay < 0.0 {
            return Err(FedError::InvalidConfig("negative learning rate or decay".into()));
        }
        Ok(())
    }

    /// Contrastive weight actually applied by a mode: only the full method
    /// uses the contrastive term.
    pub fn effective_lambda_c(&self) -> f64 {
        match self.mode {
            TrainMode::Fedcy => self.contrastive.lambda_c,
            _ => 0.0,
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Per-client Adam accumulators. Local to a client for the whole run and
/// never part of an aggregation payload.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    m: BTreeMap<String, Array>,
    v: BTreeMap<String, Array>,
    t: u64,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState::default()
    }

    /// One decoupled-decay Adam step over the named gradients:
    /// p <- p - lr * (mhat / (sqrt(vhat) + eps) + weight_decay * p).
    pub fn step(
        &mut self,
        params: &mut ParameterSet,
        grads: &BTreeMap<String, Array>,
        lr: f64,
        weight_decay: f64,
    ) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (name, grad) in grads {
            let param = params.get_mut(name).expect("gradient names match parameters");
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array::zeros(grad.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Array::zeros(grad.shape()));
            for ((p, g), (mi, vi)) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * g;
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p -= lr * (mhat / (vhat.sqrt() + ADAM_EPS) + weight_decay * *p);
            }
        }
    }
}

/// A client's local view: parameters, optimizer state, and its share of the
/// total training data.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: String,
    pub role: ClientRole,
    pub params: ParameterSet,
    pub optimizer: AdamState,
    pub data_fraction: f64,
}

/// Per-batch record for the replay oracles: the parameters the batch was
/// evaluated at, the batch composition, and the loss the trainer saw.
#[derive(Debug, Clone)]
pub struct UnsupBatchTrace {
    pub params_before: ParameterSet,
    /// (train-video index, clip) pairs in batch order.
    pub clips: Vec<(usize, Clip)>,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct SupBatchTrace {
    pub params_before: ParameterSet,
    /// (train-video index, frame index) pairs in batch order.
    pub items: Vec<(usize, usize)>,
    pub loss: f64,
}

fn clip_frames(video: &crate::synthdata::SyntheticVideo, clip: &Clip) -> Array {
    let rows: Vec<Vec<f64>> = clip
        .frame_ids()
        .iter()
        .map(|&id| video.frames().row(id - 1).to_vec())
        .collect();
    Array::from_rows(&rows).expect("clip rows share the frame dimension")
}

/// One unsupervised epoch: broadcast the global model, resample this
/// epoch's clips (floor(L/k) per training video), shuffle them, and take
/// one Adam step per batch of `clip_batch_size` clips on the cycle-
/// consistency objective. Only omega receives gradients; theta rides along
/// untouched. A trailing batch smaller than |B| is dropped. Returns the mean
/// batch loss.
pub fn local_unsupervised_epoch(
    client: &mut ClientState,
    global: &ParameterSet,
    data: &ClientDataset,
    model_cfg: &ModelConfig,
    cfg: &FederationConfig,
    rng: &mut impl Rng,
) -> Result<f64, FedError> {
    local_unsupervised_epoch_traced(client, global, data, model_cfg, cfg, rng, None)
}

pub fn local_unsupervised_epoch_traced(
    client: &mut ClientState,
    global: &ParameterSet,
    data: &ClientDataset,
    model_cfg: &ModelConfig,
    cfg: &FederationConfig,
    rng: &mut impl Rng,
    mut trace: Option<&mut Vec<UnsupBatchTrace>>,
) -> Result<f64, FedError> {
    client.params = global.clone();
    let videos = data.train_videos();

    let mut clips: Vec<(usize, Clip)> = Vec::new();
    for (vi, video) in videos.iter().enumerate() {
        for clip in sample_epoch_clips(video.num_frames(), &cfg.sampler, rng)? {
            clips.push((vi, clip));
        }
    }
    if clips.len() < cfg.clip_batch_size {
        return Err(FedError::InsufficientClips {
            have: clips.len(),
            need: cfg.clip_batch_size,
        });
    }
    let order = shuffled_indices(clips.len(), rng);

    let omega_names = client.params.omega_names();
    let wrt: Vec<&str> = omega_names.iter().map(String::as_str).collect();
    let mut losses = Vec::new();
    for batch in order.chunks(cfg.clip_batch_size) {
        if batch.len() < cfg.clip_batch_size {
            break;
        }
        let mut g = Graph::new();
        let mut embeds = Vec::with_capacity(batch.len());
        for &ci in batch {
            let (vi, clip) = &clips[ci];
            let frames = g.constant(clip_frames(videos[*vi], clip));
            embeds.push(model::features_expr(&mut g, model_cfg, frames)?);
        }
        let loss_node = tcc_batch_objective_expr(&mut g, &embeds, &cfg.tcc)?;
        let bindings = client.params.bindings();
        let loss = g.evaluate(loss_node, &bindings)?.item()?;
        let grads = g.gradient(loss_node, &bindings, &wrt)?;
        if let Some(t) = trace.as_deref_mut() {
            t.push(UnsupBatchTrace {
                params_before: client.params.clone(),
                clips: batch.iter().map(|&ci| clips[ci].clone()).collect(),
                loss,
            });
        }
        client
            .optimizer
            .step(&mut client.params, &grads, cfg.learning_rate, cfg.weight_decay);
        losses.push(loss);
    }
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// One supervised epoch on the labeled objective: broadcast, shuffle all
/// training frames, and take one Adam step per batch (the trailing partial
/// batch is kept). Both omega and theta are updated. `reveal_labels` forces
/// label access regardless of role and exists for the fully supervised
/// federated baseline.
pub fn local_supervised_epoch(
    client: &mut ClientState,
    global: &ParameterSet,
    data: &ClientDataset,
    model_cfg: &ModelConfig,
    cfg: &FederationConfig,
    lambda_c: f64,
    reveal_labels: bool,
    rng: &mut impl Rng,
) -> Result<f64, FedError> {
    local_supervised_epoch_traced(
        client,
        global,
        data,
        model_cfg,
        cfg,
        lambda_c,
        reveal_labels,
        rng,
        None,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn local_supervised_epoch_traced(
    client: &mut ClientState,
    global: &ParameterSet,
    data: &ClientDataset,
    model_cfg: &ModelConfig,
    cfg: &FederationConfig,
    lambda_c: f64,
    reveal_labels: bool,
    rng: &mut impl Rng,
    mut trace: Option<&mut Vec<SupBatchTrace>>,
) -> Result<f64, FedError> {
    client.params = global.clone();
    let videos = data.train_videos();
    let mut items: Vec<(usize, usize)> = Vec::new();
    for (vi, video) in videos.iter().enumerate() {
        for fi in 0..video.num_frames() {
            items.push((vi, fi));
        }
    }
    if items.is_empty() {
        return Err(FedError::EmptyDataset(client.client_id.clone()));
    }
    let order = shuffled_indices(items.len(), rng);
    let contrastive = ContrastiveConfig { lambda_c, ..cfg.contrastive };

    let all_names = client.params.all_names();
    let wrt: Vec<&str> = all_names.iter().map(String::as_str).collect();
    let mut losses = Vec::new();
    for batch in order.chunks(cfg.labeled_batch_size) {
        let mut rows = Vec::with_capacity(batch.len());
        let mut labels = Vec::with_capacity(batch.len());
        for &ii in batch {
            let (vi, fi) = items[ii];
            rows.push(videos[vi].frames().row(fi).to_vec());
            let video_labels = if reveal_labels {
                data.fullsup_labels(vi)
            } else {
                data.train_labels(vi)?
            };
            labels.push(video_labels[fi]);
        }
        let mut g = Graph::new();
        let frames = g.constant(Array::from_rows(&rows)?);
        let loss_node = labeled_objective_expr(&mut g, model_cfg, frames, &labels, &contrastive)?;
        let bindings = client.params.bindings();
        let loss = g.evaluate(loss_node, &bindings)?.item()?;
        let grads = g.gradient(loss_node, &bindings, &wrt)?;
        if let Some(t) = trace.as_deref_mut() {
            t.push(SupBatchTrace {
                params_before: client.params.clone(),
                items: batch.iter().map(|&ii| items[ii]).collect(),
                loss,
            });
        }
        client
            .optimizer
            .step(&mut client.params, &grads, cfg.learning_rate, cfg.weight_decay);
        losses.push(loss);
    }
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

fn weighted_average(
    arrays: &[&BTreeMap<String, Array>],
    weights: &[f64],
) -> Result<BTreeMap<String, Array>, FedError> {
    let first = arrays[0];
    let mut out = BTreeMap::new();
    for (name, proto) in first {
        let mut acc = Array::zeros(proto.shape());
        let mut lo = vec![f64::INFINITY; proto.len()];
        let mut hi = vec![f64::NEG_INFINITY; proto.len()];
        for (&client, &w) in arrays.iter().zip(weights) {
            let arr = client.get(name).ok_or_else(|| {
                FedError::AggregationMismatch(format!("'{name}' missing on a client"))
            })?;
            if arr.shape() != proto.shape() {
                return Err(FedError::AggregationMismatch(format!(
                    "'{name}' has shape {:?} vs {:?}",
                    arr.shape(),
                    proto.shape()
                )));
            }
            for (i, (a, &x)) in acc.data_mut().iter_mut().zip(arr.data()).enumerate() {
                *a += w * x;
                lo[i] = lo[i].min(x);
                hi[i] = hi[i].max(x);
            }
        }
        for (i, &a) in acc.data().iter().enumerate() {
            if a < lo[i] - 1e-12 || a > hi[i] + 1e-12 {
                return Err(FedError::ConvexityViolated(format!("{name}[{i}]")));
            }
        }
        out.insert(name.clone(), acc);
    }
    Ok(out)
}

fn check_weights(locals_len: usize, weights: &[f64]) -> Result<(), FedError> {
    if locals_len == 0 || weights.len() != locals_len {
        return Err(FedError::AggregationMismatch(format!(
            "{locals_len} parameter sets with {} weights",
            weights.len()
        )));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(FedError::WeightSum(sum));
    }
    Ok(())
}

/// Server aggregation: omega is the data-fraction-weighted average of the
/// local extractors; theta is the labeled client's classifier, copied
/// verbatim. The inputs are bare parameter sets, so optimizer state cannot
/// cross the client/server boundary.
pub fn aggregate(
    locals: &[&ParameterSet],
    weights: &[f64],
    labeled_index: usize,
) -> Result<ParameterSet, FedError> {
    check_weights(locals.len(), weights)?;
    if labeled_index >= locals.len() {
        return Err(FedError::AggregationMismatch(format!(
            "labeled index {labeled_index} out of range"
        )));
    }
    let omegas: Vec<&BTreeMap<String, Array>> = locals.iter().map(|p| &p.omega).collect();
    Ok(ParameterSet {
        omega: weighted_average(&omegas, weights)?,
        theta: locals[labeled_index].theta.clone(),
    })
}

/// Fully supervised federated averaging: both omega and theta are averaged.
/// Used only by the fedavg_fullsup baseline.
pub fn aggregate_full(locals: &[&ParameterSet], weights: &[f64]) -> Result<ParameterSet, FedError> {
    check_weights(locals.len(), weights)?;
    let omegas: Vec<&BTreeMap<String, Array>> = locals.iter().map(|p| &p.omega).collect();
    let thetas: Vec<&BTreeMap<String, Array>> = locals.iter().map(|p| &p.theta).collect();
    Ok(ParameterSet {
        omega: weighted_average(&omegas, weights)?,
        theta: weighted_average(&thetas, weights)?,
    })
}

/// Early-stopping rule: run at least `min_epochs` rounds; afterwards stop
/// once the validation score has gone `patience` consecutive rounds without
/// improving on the best seen so far. With a never-improving trajectory this
/// stops at exactly min_epochs + patience.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    min_epochs: u64,
    patience: u64,
    best: f64,
    streak: u64,
}

impl EarlyStopper {
    pub fn new(min_epochs: u64, patience: u64) -> Self {
        EarlyStopper { min_epochs, patience, best: f64::NEG_INFINITY, streak: 0 }
    }

    /// Observe round `round`'s validation score; true means stop now.
    pub fn observe(&mut self, round: u64, score: f64) -> bool {
        let improved = score > self.best;
        if improved {
            self.best = score;
        }
        if round <= self.min_epochs {
            return false;
        }
        if improved {
            self.streak = 0;
        } else {
            self.streak += 1;
        }
        self.streak >= self.patience
    }
}

/// One federation round's outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: u64,
    /// True for fedtcc's fixed-length pretraining rounds, which do not feed
    /// early stopping or checkpoint selection.
    pub pretraining: bool,
    pub client_losses: Vec<(String, f64)>,
    /// Validation macro-F1 on the labeled client under the new global model.
    pub val_f1: f64,
    pub early_stop: bool,
    pub duration_secs: f64,
}

/// Completed training run: the best-validation checkpoint and the full
/// round log.
#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub mode: TrainMode,
    pub master_seed: u64,
    pub best_round: u64,
    pub best_val_f1: f64,
    pub best_params: ParameterSet,
    pub final_params: ParameterSet,
    pub reports: Vec<RoundReport>,
}

/// Coordinator state for one training run over a labeled client and a set
/// of unlabeled clients. The held-out client never appears here.
pub struct Federation<'a> {
    pub model_cfg: ModelConfig,
    pub cfg: FederationConfig,
    labeled_data: &'a ClientDataset,
    unlabeled_data: Vec<&'a ClientDataset>,
    pub clients: Vec<ClientState>,
    pub global: ParameterSet,
    pub round: u64,
    stopper: EarlyStopper,
    best: Option<(f64, u64, ParameterSet)>,
}

impl<'a> Federation<'a> {
    pub fn new(
        model_cfg: ModelConfig,
        cfg: FederationConfig,
        labeled: &'a ClientDataset,
        unlabeled: Vec<&'a ClientDataset>,
    ) -> Result<Self, FedError> {
        cfg.validate()?;
        model_cfg.validate()?;
        let init_seed = crate::rng::derive_seed(cfg.master_seed, &[3]);
        let global = model::init_params(&model_cfg, init_seed)?;

        // Data fractions: each participating client's share of the total
        // training frames, fixed for the whole run.
        let participants: Vec<&ClientDataset> = match cfg.mode {
            TrainMode::FullsupLabeledOnly => vec![labeled],
            _ => std::iter::once(labeled).chain(unlabeled.iter().copied()).collect(),
        };
        let frames: Vec<f64> = participants
            .iter()
            .map(|c| c.num_frames_in_split(Split::Train) as f64)
            .collect();
        let total: f64 = frames.iter().sum();
        if total == 0.0 {
            return Err(FedError::EmptyDataset("all clients".into()));
        }
        let clients: Vec<ClientState> = participants
            .iter()
            .zip(&frames)
            .map(|(c, &f)| ClientState {
                client_id: c.client_id.clone(),
                role: c.role,
                params: global.clone(),
                optimizer: AdamState::new(),
                data_fraction: f / total,
            })
            .collect();

        let stopper = EarlyStopper::new(cfg.min_epochs, cfg.patience);
        Ok(Federation {
            model_cfg,
            cfg,
            labeled_data: labeled,
            unlabeled_data: unlabeled,
            clients,
            global,
            round: 0,
            stopper,
            best: None,
        })
    }

    fn in_pretraining(&self, round: u64) -> bool {
        self.cfg.mode == TrainMode::Fedtcc && round <= self.cfg.fedtcc_pretrain_rounds
    }

    /// Validation macro-F1 of the labeled client under the current global
    /// model.
    pub fn validation_f1(&self) -> Result<f64, FedError> {
        let mut predictions = Vec::new();
        let mut labels = Vec::new();
        for video in self.labeled_data.videos_in_split(Split::Validation) {
            predictions.extend(model::predict_phases(
                &self.model_cfg,
                &self.global,
                video.frames(),
            )?);
            labels.extend_from_slice(video.eval_labels());
        }
        Ok(macro_f1(&predictions, &labels, self.model_cfg.num_phases)?)
    }

    /// One round: broadcast, local epochs ("in parallel": each client sees
    /// only the broadcast model), aggregation, validation, stop bookkeeping.
    pub fn run_round(&mut self) -> Result<RoundReport, FedError> {
        let start = Instant::now();
        self.round += 1;
        let round = self.round;
        let pretraining = self.in_pretraining(round);
        let mode = self.cfg.mode;
        let lambda_c = self.cfg.effective_lambda_c();
        let global = self.global.clone();

        let mut client_losses = Vec::with_capacity(self.clients.len());
        for idx in 0..self.clients.len() {
            // copy the 'a-lifetime reference out so the client can borrow mutably
            let data: &'a ClientDataset =
                if idx == 0 { self.labeled_data } else { self.unlabeled_data[idx - 1] };
            let mut rng = stream(self.cfg.master_seed, &[2, idx as u64, round]);
            let client = &mut self.clients[idx];
            let supervised_this_round = match mode {
                _ if pretraining => false,
                TrainMode::Fedcy | TrainMode::FedcyNoCont => idx == 0,
                TrainMode::Fedtcc | TrainMode::FullsupLabeledOnly => idx == 0,
                TrainMode::FedavgFullsup => true,
            };
            let participates = match mode {
                _ if pretraining => true,
                TrainMode::Fedtcc | TrainMode::FullsupLabeledOnly => idx == 0,
                _ => true,
            };
            if !participates {
                continue;
            }
            let loss = if supervised_this_round {
                local_supervised_epoch(
                    client,
                    &global,
                    data,
                    &self.model_cfg,
                    &self.cfg,
                    lambda_c,
                    mode == TrainMode::FedavgFullsup && idx != 0,
                    &mut rng,
                )?
            } else {
                local_unsupervised_epoch(
                    client,
                    &global,
                    data,
                    &self.model_cfg,
                    &self.cfg,
                    &mut rng,
                )?
            };
            client_losses.push((client.client_id.clone(), loss));
        }

        // Aggregation. During fedtcc fine-tuning and fullsup only the
        // labeled client participates, so the "average" is its parameters.
        let (params, weights): (Vec<&ParameterSet>, Vec<f64>) = match mode {
            TrainMode::FullsupLabeledOnly => (vec![&self.clients[0].params], vec![1.0]),
            TrainMode::Fedtcc if !pretraining => (vec![&self.clients[0].params], vec![1.0]),
            _ => (
                self.clients.iter().map(|c| &c.params).collect(),
                self.clients.iter().map(|c| c.data_fraction).collect(),
            ),
        };
        self.global = match mode {
            TrainMode::FedavgFullsup => aggregate_full(&params, &weights)?,
            _ => aggregate(&params, &weights, 0)?,
        };
        if mode != TrainMode::FedavgFullsup {
            debug_assert!(
                self.global.theta == self.clients[0].params.theta,
                "classifier must be the labeled client's"
            );
        }

        let val_f1 = self.validation_f1()?;
        let mut early_stop = false;
        if !pretraining {
            let train_round = if mode == TrainMode::Fedtcc {
                round - self.cfg.fedtcc_pretrain_rounds
            } else {
                round
            };
            let is_best = self.best.as_ref().map_or(true, |(f, _, _)| val_f1 > *f);
            if is_best {
                self.best = Some((val_f1, round, self.global.clone()));
            }
            early_stop = self.stopper.observe(train_round, val_f1);
        }

        Ok(RoundReport {
            round,
            pretraining,
            client_losses,
            val_f1,
            early_stop,
            duration_secs: start.elapsed().as_secs_f64(),
        })
    }

    /// Run rounds to completion: fedtcc's pretraining runs for its fixed
    /// budget, then up to `rounds_max` training rounds gated by early
    /// stopping. Returns the best-validation checkpoint.
    pub fn run(mut self) -> Result<TrainingRun, FedError> {
        let mut reports = Vec::new();
        loop {
            let report = self.run_round()?;
            let stop = report.early_stop;
            let pretraining = report.pretraining;
            reports.push(report);
            if stop {
                break;
            }
            if !pretraining {
                let train_rounds = if self.cfg.mode == TrainMode::Fedtcc {
                    self.round - self.cfg.fedtcc_pretrain_rounds
                } else {
                    self.round
                };
                if train_rounds >= self.cfg.rounds_max {
                    break;
                }
            }
        }
        let (best_val_f1, best_round, best_params) =
            self.best.clone().expect("at least one training round ran");
        Ok(TrainingRun {
            mode: self.cfg.mode,
            master_seed: self.cfg.master_seed,
            best_round,
            best_val_f1,
            best_params,
            final_params: self.global,
            reports,
        })
    }
}
