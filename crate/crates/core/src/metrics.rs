//! Macro-F1 evaluation and the reporting layout: per-client scores,
//! the unlabeled-client average, the all-client average, and mean/std
//! aggregation across seeds.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{self, ModelConfig, ParameterSet};
use crate::synthdata::{Scenario, Split};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("predictions ({0}) and labels ({1}) differ in length")]
    LengthMismatch(usize, usize),
    #[error("class id {0} outside 1..={1}")]
    UnknownClass(usize, usize),
    #[error("no frames to score")]
    EmptyInput,
    #[error("client '{client}' has no videos in the {split:?} split")]
    MissingSplit { client: String, split: Split },
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

/// What to do with classes absent from both predictions and labels. Short
/// synthetic videos can miss a phase entirely; excluding such classes keeps
/// scores comparable across videos.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroSupportPolicy {
    Exclude,
    ScoreZero,
}

/// Macro-averaged F1 with the default zero-support policy (exclusion).
pub fn macro_f1(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<f64, MetricError> {
    macro_f1_with_policy(predictions, labels, num_classes, ZeroSupportPolicy::Exclude)
}

pub fn macro_f1_with_policy(
    predictions: &[usize],
    labels: &[usize],
    num_classes: usize,
    policy: ZeroSupportPolicy,
) -> Result<f64, MetricError> {
    if predictions.len() != labels.len() {
        return Err(MetricError::LengthMismatch(predictions.len(), labels.len()));
    }
    if predictions.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fn_ = vec![0usize; num_classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        if p == 0 || p > num_classes {
            return Err(MetricError::UnknownClass(p, num_classes));
        }
        if l == 0 || l > num_classes {
            return Err(MetricError::UnknownClass(l, num_classes));
        }
        if p == l {
            tp[p - 1] += 1;
        } else {
            fp[p - 1] += 1;
            fn_[l - 1] += 1;
        }
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    for c in 0..num_classes {
        let present = tp[c] + fp[c] + fn_[c] > 0;
        if !present && policy == ZeroSupportPolicy::Exclude {
            continue;
        }
        let f1 = if present {
            let precision_den = tp[c] + fp[c];
            let recall_den = tp[c] + fn_[c];
            let precision = if precision_den > 0 { tp[c] as f64 / precision_den as f64 } else { 0.0 };
            let recall = if recall_den > 0 { tp[c] as f64 / recall_den as f64 } else { 0.0 };
            if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            }
        } else {
            0.0
        };
        total += f1;
        counted += 1;
    }
    Ok(total / counted as f64)
}

/// One client's frame-classification score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientScore {
    pub client_id: String,
    pub f1: f64,
}

/// The reporting layout: per-client macro-F1, the macro average over
/// unlabeled clients, the macro average over all training clients, and the
/// held-out client reported separately (it never joins the averages).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub mode: String,
    pub seed: u64,
    pub split: Split,
    pub labeled: ClientScore,
    pub unlabeled: Vec<ClientScore>,
    pub overall_unlabeled: f64,
    pub overall_all: f64,
    pub held_out: ClientScore,
}

impl EvaluationReport {
    /// Per-client scores in reporting order: labeled, unlabeled..., held-out.
    pub fn all_scores(&self) -> Vec<&ClientScore> {
        let mut v = vec![&self.labeled];
        v.extend(self.unlabeled.iter());
        v.push(&self.held_out);
        v
    }
}

fn score_client(
    config: &ModelConfig,
    params: &ParameterSet,
    client: &crate::synthdata::ClientDataset,
    split: Split,
) -> Result<f64, MetricError> {
    let videos = client.videos_in_split(split);
    if videos.is_empty() {
        return Err(MetricError::MissingSplit { client: client.client_id.clone(), split });
    }
    let mut predictions = Vec::new();
    let mut labels = Vec::new();
    for video in videos {
        predictions.extend(model::predict_phases(config, params, video.frames())?);
        labels.extend_from_slice(video.eval_labels());
    }
    macro_f1(&predictions, &labels, config.num_phases)
}

/// Frame-wise evaluation of a model over every client of a scenario.
pub fn evaluate_scenario(
    config: &ModelConfig,
    params: &ParameterSet,
    scenario: &Scenario,
    split: Split,
    mode: &str,
    seed: u64,
) -> Result<EvaluationReport, MetricError> {
    let labeled = ClientScore {
        client_id: scenario.labeled.client_id.clone(),
        f1: score_client(config, params, &scenario.labeled, split)?,
    };
    let mut unlabeled = Vec::with_capacity(scenario.unlabeled.len());
    for client in &scenario.unlabeled {
        unlabeled.push(ClientScore {
            client_id: client.client_id.clone(),
            f1: score_client(config, params, client, split)?,
        });
    }
    let held_out = ClientScore {
        client_id: scenario.held_out.client_id.clone(),
        f1: score_client(config, params, &scenario.held_out, Split::Test)?,
    };
    let overall_unlabeled = if unlabeled.is_empty() {
        0.0
    } else {
        unlabeled.iter().map(|c| c.f1).sum::<f64>() / unlabeled.len() as f64
    };
    let all: Vec<f64> = std::iter::once(labeled.f1)
        .chain(unlabeled.iter().map(|c| c.f1))
        .collect();
    let overall_all = all.iter().sum::<f64>() / all.len() as f64;
    Ok(EvaluationReport {
        mode: mode.to_string(),
        seed,
        split,
        labeled,
        unlabeled,
        overall_unlabeled,
        overall_all,
        held_out,
    })
}

/// Mean and unbiased sample standard deviation of one reported field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldStats {
    pub mean: f64,
    pub std: f64,
}

pub fn field_stats(values: &[f64]) -> Result<FieldStats, MetricError> {
    if values.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() == 1 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok(FieldStats { mean, std })
}

/// Seed-aggregated view of a set of evaluation reports from the same
/// scenario and mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub mode: String,
    pub seeds: Vec<u64>,
    pub per_client: Vec<(String, FieldStats)>,
    pub overall_unlabeled: FieldStats,
    pub overall_all: FieldStats,
    pub held_out: FieldStats,
}

pub fn aggregate_runs(reports: &[EvaluationReport]) -> Result<RunStats, MetricError> {
    if reports.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let first = &reports[0];
    let mut per_client = Vec::new();
    let client_ids: Vec<String> = first
        .all_scores()
        .iter()
        .map(|c| c.client_id.clone())
        .collect();
    for (i, id) in client_ids.iter().enumerate() {
        let vals: Vec<f64> = reports.iter().map(|r| r.all_scores()[i].f1).collect();
        per_client.push((id.clone(), field_stats(&vals)?));
    }
    Ok(RunStats {
        mode: first.mode.clone(),
        seeds: reports.iter().map(|r| r.seed).collect(),
        per_client,
        overall_unlabeled: field_stats(
            &reports.iter().map(|r| r.overall_unlabeled).collect::<Vec<_>>(),
        )?,
        overall_all: field_stats(&reports.iter().map(|r| r.overall_all).collect::<Vec<_>>())?,
        held_out: field_stats(&reports.iter().map(|r| r.held_out.f1).collect::<Vec<_>>())?,
    })
}
