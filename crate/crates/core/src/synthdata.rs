//! Synthetic multicenter workflow data: per-client collections of "videos"
//! whose frames are feature vectors emitted by a phase-structured process.
//!
//! A workflow has P phases; the first Q run strictly in order, the rest are
//! permutable (one phase may optionally recur). Phase durations are
//! log-normal. Cross-client heterogeneity is a single knob driving a
//! per-client feature-space shift and a duration scale. Ground-truth labels
//! are stored for every client but training code reaches them only through
//! role-gated accessors.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{Array, EngineError};
use crate::rng::stream;

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Spread of the per-client duration scale: scale = exp(h * z), z ~ N(0, this).
const DURATION_SCALE_SPREAD: f64 = 0.35;
/// Centroid jitter relative to the spacing, applied to the reference profile.
const CENTROID_JITTER: f64 = 0.1;
/// Client-wide translation per unit of heterogeneity, relative to spacing.
const SHIFT_GLOBAL_W: f64 = 0.4;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid scenario config: {0}")]
    InvalidConfig(String),
    #[error("unknown phase id {0} (workflow has {1} phases)")]
    UnknownPhase(usize, usize),
    #[error("empty label sequence")]
    EmptyLabels,
    #[error("labels of client '{0}' are not exposed to training (role {1:?})")]
    LabelsHidden(String, ClientRole),
    #[error("generated video violates the workflow ordering rule")]
    OrderingViolated,
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset encoding: {0}")]
    Encoding(#[from] serde_json::Error),
    #[error("unsupported dataset format version {0}")]
    FormatVersion(u32),
    #[error("scenario manifest: {0}")]
    Manifest(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientRole {
    Labeled,
    Unlabeled,
    HeldOut,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Phase structure and duration model shared by every client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkflowConfig {
    pub num_phases: usize,
    /// The first Q phases always run consecutively in fixed order; the rest
    /// may appear in any order after them.
    pub sequential_prefix: usize,
    /// A permutable-tail phase allowed to recur as separate runs.
    pub repeatable_phase: Option<usize>,
    /// Probability that the repeatable phase recurs in a video.
    pub repeat_prob: f64,
    /// Mean duration in frames, one entry per phase.
    pub duration_means: Vec<f64>,
    /// Log-space sigma of the log-normal duration draw.
    pub duration_sigma: f64,
}

impl Default for WorkflowConfig {
    fn default() -> Self {
        WorkflowConfig {
            num_phases: 6,
            sequential_prefix: 4,
            repeatable_phase: None,
            repeat_prob: 0.3,
            duration_means: vec![14.0, 40.0, 12.0, 32.0, 12.0, 16.0],
            duration_sigma: 0.3,
        }
    }
}

impl WorkflowConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let p = self.num_phases;
        if p == 0 {
            return Err(DataError::InvalidConfig("num_phases must be positive".into()));
        }
        if self.sequential_prefix > p {
            return Err(DataError::InvalidConfig(format!(
                "sequential_prefix {} exceeds num_phases {p}",
                self.sequential_prefix
            )));
        }
        if self.duration_means.len() != p {
            return Err(DataError::InvalidConfig(format!(
                "duration_means has {} entries for {p} phases",
                self.duration_means.len()
            )));
        }
        if self.duration_means.iter().any(|&m| m < 1.0) {
            return Err(DataError::InvalidConfig("duration means must be >= 1 frame".into()));
        }
        if !(self.duration_sigma > 0.0) {
            return Err(DataError::InvalidConfig("duration_sigma must be positive".into()));
        }
        if let Some(r) = self.repeatable_phase {
            if r <= self.sequential_prefix || r > p {
                return Err(DataError::InvalidConfig(format!(
                    "repeatable_phase {r} must lie in the permutable tail"
                )));
            }
        }
        Ok(())
    }
}

/// One client's data-generating parameters. With heterogeneity 0 every
/// profile equals the reference profile (zero shift, unit duration scale).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientProfile {
    pub client_id: String,
    /// Per-phase feature centroids, shift already applied.
    pub centroids: Vec<Vec<f64>>,
    /// The heterogeneity shift this client's centroids received.
    pub shift: Vec<f64>,
    /// Per-phase within-phase drift directions.
    pub drift: Vec<Vec<f64>>,
    /// Video-global time ramp direction, shared by every client.
    pub ramp: Vec<f64>,
    pub duration_scale: f64,
    pub noise_sigma: f64,
    pub labeled: bool,
}

/// A generated video: frames (L, input_dim) plus per-frame phase labels.
/// Labels are private; `eval_labels` is the evaluation-only accessor, and
/// training obtains labels through the role-gated methods on
/// [`ClientDataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticVideo {
    pub video_id: String,
    frames: Array,
    labels: Vec<usize>,
}

impl SyntheticVideo {
    pub fn frames(&self) -> &Array {
        &self.frames
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    /// Ground-truth labels, for evaluation only.
    pub fn eval_labels(&self) -> &[usize] {
        &self.labels
    }
}

/// A client's videos with their split assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDataset {
    pub client_id: String,
    pub role: ClientRole,
    pub profile: ClientProfile,
    pub generation_seed: u64,
    videos: Vec<(SyntheticVideo, Split)>,
}

impl ClientDataset {
    pub fn videos_in_split(&self, split: Split) -> Vec<&SyntheticVideo> {
        self.videos
            .iter()
            .filter(|(_, s)| *s == split)
            .map(|(v, _)| v)
            .collect()
    }

    pub fn train_videos(&self) -> Vec<&SyntheticVideo> {
        self.videos_in_split(Split::Train)
    }

    pub fn all_videos(&self) -> Vec<&SyntheticVideo> {
        self.videos.iter().map(|(v, _)| v).collect()
    }

    pub fn num_frames_in_split(&self, split: Split) -> usize {
        self.videos_in_split(split).iter().map(|v| v.num_frames()).sum()
    }

    /// Labels of a training video, available only on the labeled client.
    pub fn train_labels(&self, train_index: usize) -> Result<&[usize], DataError> {
        if self.role != ClientRole::Labeled {
            return Err(DataError::LabelsHidden(self.client_id.clone(), self.role));
        }
        Ok(self.train_videos()[train_index].eval_labels())
    }

    /// Labels of a training video with supervision forced on regardless of
    /// role. Exists solely for the fully supervised baseline that treats
    /// every client as labeled.
    pub fn fullsup_labels(&self, train_index: usize) -> &[usize] {
        self.train_videos()[train_index].eval_labels()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl SplitCounts {
    fn total(&self) -> usize {
        self.train + self.validation + self.test
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub input_dim: usize,
    pub workflow: WorkflowConfig,
    /// Number of unlabeled clients (M).
    pub num_unlabeled: usize,
    pub labeled_videos: SplitCounts,
    pub unlabeled_videos: SplitCounts,
    pub held_out_videos: usize,
    /// Cross-client heterogeneity knob; 0 means identical profiles.
    pub heterogeneity: f64,
    pub noise_sigma: f64,
    /// Pairwise distance between reference phase centroids.
    pub centroid_spacing: f64,
    /// Magnitude of the smooth within-phase drift.
    pub drift_amplitude: f64,
    /// Magnitude of a video-global time ramp shared by every client: an
    /// easy-to-align temporal cue that carries no phase information (phase
    /// boundaries fall at different absolute times in every video), the
    /// synthetic analog of phase-unspecific recurring appearance changes.
    pub time_ramp_amplitude: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            input_dim: 10,
            workflow: WorkflowConfig::default(),
            num_unlabeled: 4,
            labeled_videos: SplitCounts { train: 10, validation: 3, test: 4 },
            unlabeled_videos: SplitCounts { train: 8, validation: 2, test: 3 },
            held_out_videos: 4,
            heterogeneity: 0.5,
            noise_sigma: 0.1,
            centroid_spacing: 1.0,
            drift_amplitude: 0.8,
            time_ramp_amplitude: 0.8,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        self.workflow.validate()?;
        if self.input_dim < self.workflow.num_phases {
            return Err(DataError::InvalidConfig(format!(
                "input_dim {} must be at least num_phases {}",
                self.input_dim, self.workflow.num_phases
            )));
        }
        if self.num_unlabeled == 0 {
            return Err(DataError::InvalidConfig("need at least one unlabeled client".into()));
        }
        for (name, counts) in [("labeled", &self.labeled_videos), ("unlabeled", &self.unlabeled_videos)] {
            if counts.train == 0 || counts.test == 0 {
                return Err(DataError::InvalidConfig(format!(
                    "{name} clients need train and test videos, got {counts:?}"
                )));
            }
        }
        if self.labeled_videos.validation == 0 {
            return Err(DataError::InvalidConfig(
                "the labeled client needs a validation split (it drives early stopping)".into(),
            ));
        }
        if self.held_out_videos == 0 {
            return Err(DataError::InvalidConfig("need at least one held-out video".into()));
        }
        if self.heterogeneity < 0.0 {
            return Err(DataError::InvalidConfig("heterogeneity must be >= 0".into()));
        }
        if self.noise_sigma < 0.0
            || self.drift_amplitude < 0.0
            || self.time_ramp_amplitude < 0.0
            || self.centroid_spacing <= 0.0
        {
            return Err(DataError::InvalidConfig("noise, drift, spacing out of range".into()));
        }
        Ok(())
    }
}

/// The full multicenter setup: one labeled client, M unlabeled clients, one
/// held-out client that never trains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub master_seed: u64,
    pub labeled: ClientDataset,
    pub unlabeled: Vec<ClientDataset>,
    pub held_out: ClientDataset,
}

fn unit_gaussian_vec(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / n).collect()
}

/// Reference profile: axis-aligned centroids `spacing / sqrt(2)` apart plus
/// a small deterministic jitter, and per-phase drift directions.
struct ReferenceProfile {
    centroids: Vec<Vec<f64>>,
    drift: Vec<Vec<f64>>,
    ramp: Vec<f64>,
}

fn reference_profile(config: &ScenarioConfig, rng: &mut impl Rng) -> ReferenceProfile {
    let p = config.workflow.num_phases;
    let d = config.input_dim;
    let scale = config.centroid_spacing / 2.0f64.sqrt();
    let mut centroids = Vec::with_capacity(p);
    for phase in 0..p {
        let mut c = vec![0.0; d];
        c[phase] = scale;
        for x in c.iter_mut() {
            *x += CENTROID_JITTER * config.centroid_spacing
                * rng.sample::<f64, _>(StandardNormal)
                / (d as f64).sqrt();
        }
        centroids.push(c);
    }
    let drift = (0..p)
        .map(|_| {
            unit_gaussian_vec(d, rng)
                .into_iter()
                .map(|x| x * config.drift_amplitude)
                .collect()
        })
        .collect();
    let ramp = unit_gaussian_vec(d, rng)
        .into_iter()
        .map(|x| x * config.time_ramp_amplitude)
        .collect();
    ReferenceProfile { centroids, drift, ramp }
}

fn client_profile(
    config: &ScenarioConfig,
    reference: &ReferenceProfile,
    client_id: &str,
    labeled: bool,
    is_reference: bool,
    rng: &mut impl Rng,
) -> ClientProfile {
    let d = config.input_dim;
    let p = config.workflow.num_phases;
    let h = config.heterogeneity;
    // Feature shift: a client-wide translation plus a per-phase pull toward
    // some other phase's centroid (this client performs phase p in a way
    // that looks like phase q). The pull is what breaks naive transfer of a
    // classifier trained on the reference client; within-phase drift
    // dynamics stay shared across clients as the invariant cue. At h = 1 a
    // pulled centroid coincides with its target.
    let (shift, duration_scale) = if is_reference {
        (vec![0.0; d], 1.0)
    } else {
        let dir = unit_gaussian_vec(d, rng);
        let z: f64 = rng.sample(StandardNormal);
        (
            dir.into_iter()
                .map(|x| x * SHIFT_GLOBAL_W * h * config.centroid_spacing)
                .collect::<Vec<f64>>(),
            (h * DURATION_SCALE_SPREAD * z).exp(),
        )
    };
    let centroids = reference
        .centroids
        .iter()
        .enumerate()
        .map(|(phase0, c)| {
            let target = if is_reference || p < 2 {
                c.clone()
            } else {
                let mut q = rng.gen_range(0..p - 1);
                if q >= phase0 {
                    q += 1;
                }
                reference.centroids[q].clone()
            };
            c.iter()
                .zip(&shift)
                .zip(&target)
                .map(|((a, s), t)| a + s + h * (t - a))
                .collect()
        })
        .collect();
    ClientProfile {
        client_id: client_id.to_string(),
        centroids,
        shift,
        drift: reference.drift.clone(),
        ramp: reference.ramp.clone(),
        duration_scale,
        noise_sigma: config.noise_sigma,
        labeled,
    }
}

/// Draw a phase order satisfying the workflow rule, then durations and
/// frames. Frames are centroid + within-phase linear drift + Gaussian noise.
pub fn generate_video(
    profile: &ClientProfile,
    workflow: &WorkflowConfig,
    video_id: &str,
    rng: &mut impl Rng,
) -> Result<SyntheticVideo, DataError> {
    workflow.validate()?;
    let p = workflow.num_phases;
    let q = workflow.sequential_prefix;

    let mut order: Vec<usize> = (1..=q).collect();
    let mut tail: Vec<usize> = (q + 1..=p).collect();
    // Fisher-Yates on the permutable tail.
    for i in (1..tail.len()).rev() {
        let j = rng.gen_range(0..=i);
        tail.swap(i, j);
    }
    if let Some(r) = workflow.repeatable_phase {
        if rng.gen::<f64>() < workflow.repeat_prob {
            let pos = rng.gen_range(0..=tail.len());
            tail.insert(pos, r);
        }
    }
    order.extend(tail);

    let mut durations = Vec::with_capacity(order.len());
    for &phase in &order {
        let mean = workflow.duration_means[phase - 1] * profile.duration_scale;
        let ln_mean = mean.ln() - workflow.duration_sigma * workflow.duration_sigma / 2.0;
        let dist = LogNormal::new(ln_mean, workflow.duration_sigma)
            .map_err(|e| DataError::InvalidConfig(e.to_string()))?;
        durations.push(dist.sample(rng).round().max(1.0) as usize);
    }
    let total: usize = durations.iter().sum();

    let mut labels = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut global_t = 0usize;
    for (&phase, &duration) in order.iter().zip(&durations) {
        let centroid = &profile.centroids[phase - 1];
        let drift = &profile.drift[phase - 1];
        for t in 0..duration {
            let progress = if duration > 1 { t as f64 / (duration - 1) as f64 } else { 0.5 };
            let elapsed = if total > 1 { global_t as f64 / (total - 1) as f64 } else { 0.5 };
            let row: Vec<f64> = centroid
                .iter()
                .zip(drift)
                .zip(&profile.ramp)
                .map(|((c, dr), rp)| {
                    c + (progress - 0.5) * dr
                        + (elapsed - 0.5) * rp
                        + profile.noise_sigma * rng.sample::<f64, _>(StandardNormal)
                })
                .collect();
            rows.push(row);
            labels.push(phase);
            global_t += 1;
        }
    }

    if !validate_workflow(&labels, workflow)? {
        return Err(DataError::OrderingViolated);
    }
    Ok(SyntheticVideo {
        video_id: video_id.to_string(),
        frames: Array::from_rows(&rows)?,
        labels,
    })
}

/// True iff the first Q phases appear as consecutive runs in fixed order and
/// every remaining phase follows as a contiguous run in any order, with
/// repetition allowed only for the configured repeatable phase.
pub fn validate_workflow(labels: &[usize], workflow: &WorkflowConfig) -> Result<bool, DataError> {
    if labels.is_empty() {
        return Err(DataError::EmptyLabels);
    }
    let p = workflow.num_phases;
    for &l in labels {
        if l == 0 || l > p {
            return Err(DataError::UnknownPhase(l, p));
        }
    }
    let mut runs = Vec::new();
    for &l in labels {
        if runs.last() != Some(&l) {
            runs.push(l);
        }
    }
    let q = workflow.sequential_prefix;
    if runs.len() < q {
        return Ok(false);
    }
    for (i, &phase) in runs[..q].iter().enumerate() {
        if phase != i + 1 {
            return Ok(false);
        }
    }
    let mut counts = vec![0usize; p];
    for &phase in &runs[q..] {
        if phase <= q {
            return Ok(false);
        }
        counts[phase - 1] += 1;
    }
    for phase in q + 1..=p {
        let c = counts[phase - 1];
        let repeatable = workflow.repeatable_phase == Some(phase);
        if c == 0 || (c > 1 && !repeatable) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Generate one client's dataset from a profile: `counts.total()` videos in
/// train/validation/test order, each from its own derived rng stream.
pub fn generate_client(
    profile: ClientProfile,
    role: ClientRole,
    workflow: &WorkflowConfig,
    counts: &SplitCounts,
    master_seed: u64,
    client_index: u64,
) -> Result<ClientDataset, DataError> {
    let mut videos = Vec::with_capacity(counts.total());
    for v in 0..counts.total() {
        let split = if v < counts.train {
            Split::Train
        } else if v < counts.train + counts.validation {
            Split::Validation
        } else {
            Split::Test
        };
        let mut rng = stream(master_seed, &[1, client_index, v as u64]);
        let video_id = format!("{}-v{v:02}", profile.client_id);
        videos.push((generate_video(&profile, workflow, &video_id, &mut rng)?, split));
    }
    Ok(ClientDataset {
        client_id: profile.client_id.clone(),
        role,
        generation_seed: master_seed,
        profile,
        videos,
    })
}

/// Build the full scenario: reference profile, per-client shifted profiles,
/// and per-client video sets, all deterministic in `master_seed`.
pub fn generate_scenario(config: &ScenarioConfig, master_seed: u64) -> Result<Scenario, DataError> {
    config.validate()?;
    let mut profile_rng = stream(master_seed, &[0]);
    let reference = reference_profile(config, &mut profile_rng);

    let labeled_profile =
        client_profile(config, &reference, "labeled", true, true, &mut profile_rng);
    let labeled = generate_client(
        labeled_profile,
        ClientRole::Labeled,
        &config.workflow,
        &config.labeled_videos,
        master_seed,
        0,
    )?;

    let mut unlabeled = Vec::with_capacity(config.num_unlabeled);
    for j in 0..config.num_unlabeled {
        let id = format!("site{}", j + 1);
        let profile = client_profile(config, &reference, &id, false, false, &mut profile_rng);
        unlabeled.push(generate_client(
            profile,
            ClientRole::Unlabeled,
            &config.workflow,
            &config.unlabeled_videos,
            master_seed,
            j as u64 + 1,
        )?);
    }

    let held_profile =
        client_profile(config, &reference, "held_out", false, false, &mut profile_rng);
    let held_out = generate_client(
        held_profile,
        ClientRole::HeldOut,
        &config.workflow,
        &SplitCounts { train: 0, validation: 0, test: config.held_out_videos },
        master_seed,
        config.num_unlabeled as u64 + 1,
    )?;

    Ok(Scenario {
        config: config.clone(),
        master_seed,
        labeled,
        unlabeled,
        held_out,
    })
}

// ---- dataset files ---------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct ClientFile {
    format_version: u32,
    client: ClientDataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub client_id: String,
    pub role: ClientRole,
    pub file: String,
}

/// Index of a generated scenario directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioManifest {
    pub format_version: u32,
    pub master_seed: u64,
    pub config: ScenarioConfig,
    pub clients: Vec<ManifestEntry>,
}

impl ScenarioManifest {
    pub fn load(dir: &Path) -> Result<Self, DataError> {
        let manifest: ScenarioManifest =
            serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        if manifest.format_version != DATASET_FORMAT_VERSION {
            return Err(DataError::FormatVersion(manifest.format_version));
        }
        Ok(manifest)
    }

    pub fn entry(&self, role: ClientRole) -> Vec<&ManifestEntry> {
        self.clients.iter().filter(|e| e.role == role).collect()
    }
}

pub fn save_client_file(path: &Path, client: &ClientDataset) -> Result<(), DataError> {
    let file = ClientFile { format_version: DATASET_FORMAT_VERSION, client: client.clone() };
    fs::write(path, serde_json::to_string(&file)?)?;
    Ok(())
}

pub fn load_client_file(path: &Path) -> Result<ClientDataset, DataError> {
    let file: ClientFile = serde_json::from_str(&fs::read_to_string(path)?)?;
    if file.format_version != DATASET_FORMAT_VERSION {
        return Err(DataError::FormatVersion(file.format_version));
    }
    Ok(file.client)
}

impl Scenario {
    /// Write one dataset file per client plus `manifest.json`; returns the
    /// written paths. Byte-identical for identical (config, seed).
    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>, DataError> {
        fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let mut entries = Vec::new();
        let all = std::iter::once(&self.labeled)
            .chain(self.unlabeled.iter())
            .chain(std::iter::once(&self.held_out));
        for client in all {
            let file = format!("client_{}.json", client.client_id);
            let path = dir.join(&file);
            save_client_file(&path, client)?;
            entries.push(ManifestEntry {
                client_id: client.client_id.clone(),
                role: client.role,
                file,
            });
            written.push(path);
        }
        let manifest = ScenarioManifest {
            format_version: DATASET_FORMAT_VERSION,
            master_seed: self.master_seed,
            config: self.config.clone(),
            clients: entries,
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
        written.push(path);
        Ok(written)
    }

    /// Load every client named by the manifest; returns the scenario and the
    /// file paths that were read.
    pub fn load(dir: &Path) -> Result<(Self, Vec<PathBuf>), DataError> {
        let manifest = ScenarioManifest::load(dir)?;
        let mut read = vec![dir.join("manifest.json")];
        let mut labeled = None;
        let mut unlabeled = Vec::new();
        let mut held_out = None;
        for entry in &manifest.clients {
            let path = dir.join(&entry.file);
            let client = load_client_file(&path)?;
            read.push(path);
            match entry.role {
                ClientRole::Labeled => labeled = Some(client),
                ClientRole::Unlabeled => unlabeled.push(client),
                ClientRole::HeldOut => held_out = Some(client),
            }
        }
        let labeled = labeled.ok_or_else(|| DataError::Manifest("no labeled client".into()))?;
        let held_out = held_out.ok_or_else(|| DataError::Manifest("no held-out client".into()))?;
        Ok((
            Scenario {
                config: manifest.config,
                master_seed: manifest.master_seed,
                labeled,
                unlabeled,
                held_out,
            },
            read,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet_profile(sigma: f64, drift: f64) -> (ClientProfile, WorkflowConfig) {
        let workflow = WorkflowConfig::default();
        let centroids: Vec<Vec<f64>> = (0..6)
            .map(|p| {
                let mut c = vec![0.0; 8];
                c[p] = 1.0;
                c
            })
            .collect();
        let drift_vecs: Vec<Vec<f64>> = (0..6)
            .map(|p| {
                let mut v = vec![0.0; 8];
                v[(p + 1) % 8] = drift;
                v
            })
            .collect();
        let profile = ClientProfile {
            client_id: "t".into(),
            centroids,
            shift: vec![0.0; 8],
            drift: drift_vecs,
            ramp: vec![0.0; 8],
            duration_scale: 1.0,
            noise_sigma: sigma,
            labeled: true,
        };
        (profile, workflow)
    }

    #[test]
    fn noiseless_driftless_frames_equal_centroids() {
        let (profile, workflow) = quiet_profile(0.0, 0.0);
        let mut rng = stream(3, &[]);
        let video = generate_video(&profile, &workflow, "v", &mut rng).unwrap();
        for (i, &label) in video.eval_labels().iter().enumerate() {
            assert_eq!(video.frames().row(i), profile.centroids[label - 1].as_slice());
        }
    }

    #[test]
    fn generated_labels_satisfy_workflow_rule() {
        let (profile, workflow) = quiet_profile(0.1, 0.2);
        for seed in 0..50 {
            let mut rng = stream(seed, &[]);
            let video = generate_video(&profile, &workflow, "v", &mut rng).unwrap();
            assert!(validate_workflow(video.eval_labels(), &workflow).unwrap());
        }
    }

    #[test]
    fn repeatable_phase_videos_stay_valid() {
        let (profile, mut workflow) = quiet_profile(0.05, 0.1);
        workflow.repeatable_phase = Some(6);
        workflow.repeat_prob = 1.0;
        let mut saw_repeat = false;
        for seed in 0..20 {
            let mut rng = stream(seed, &[7]);
            let video = generate_video(&profile, &workflow, "v", &mut rng).unwrap();
            assert!(validate_workflow(video.eval_labels(), &workflow).unwrap());
            let runs = video.eval_labels().iter().fold(Vec::new(), |mut acc, &l| {
                if acc.last() != Some(&l) {
                    acc.push(l);
                }
                acc
            });
            if runs.iter().filter(|&&r| r == 6).count() > 1 {
                saw_repeat = true;
            }
        }
        assert!(saw_repeat);
    }

    #[test]
    fn duration_means_match_profile_within_three_se() {
        let (mut profile, mut workflow) = quiet_profile(0.0, 0.0);
        profile.duration_scale = 1.5;
        workflow.duration_means = vec![10.0, 24.0, 8.0, 18.0, 9.0, 12.0];
        let n = 1000;
        let mut totals = vec![0.0f64; 6];
        let mut sumsq = vec![0.0f64; 6];
        for seed in 0..n {
            let mut rng = stream(seed as u64, &[5]);
            let video = generate_video(&profile, &workflow, "v", &mut rng).unwrap();
            let mut counts = vec![0.0f64; 6];
            for &l in video.eval_labels() {
                counts[l - 1] += 1.0;
            }
            for p in 0..6 {
                totals[p] += counts[p];
                sumsq[p] += counts[p] * counts[p];
            }
        }
        for p in 0..6 {
            let mean = totals[p] / n as f64;
            let var = (sumsq[p] / n as f64 - mean * mean).max(0.0);
            let se = (var / n as f64).sqrt();
            let expected = workflow.duration_means[p] * profile.duration_scale;
            assert!(
                (mean - expected).abs() < 3.0 * se + 0.15,
                "phase {}: mean {mean} expected {expected} se {se}",
                p + 1
            );
        }
    }

    #[test]
    fn workflow_validator_examples() {
        let wf = WorkflowConfig::default();
        assert!(validate_workflow(&[1, 1, 2, 3, 4, 5, 6], &wf).unwrap());
        assert!(!validate_workflow(&[1, 3, 2, 4, 5, 6], &wf).unwrap());
        assert!(validate_workflow(&[1, 2, 3, 4, 6, 5], &wf).unwrap());
        // prefix phase recurring after the prefix
        assert!(!validate_workflow(&[1, 2, 3, 4, 1, 5, 6], &wf).unwrap());
        // missing tail phase
        assert!(!validate_workflow(&[1, 2, 3, 4, 5], &wf).unwrap());
        // tail phase repeated without being repeatable
        assert!(!validate_workflow(&[1, 2, 3, 4, 5, 6, 5], &wf).unwrap());
        let mut repeatable = wf.clone();
        repeatable.repeatable_phase = Some(5);
        assert!(validate_workflow(&[1, 2, 3, 4, 5, 6, 5], &repeatable).unwrap());
        // errors
        assert!(matches!(
            validate_workflow(&[], &wf),
            Err(DataError::EmptyLabels)
        ));
        assert!(matches!(
            validate_workflow(&[1, 2, 9], &wf),
            Err(DataError::UnknownPhase(9, 6))
        ));
    }

    #[test]
    fn scenario_is_deterministic() {
        let cfg = ScenarioConfig {
            labeled_videos: SplitCounts { train: 2, validation: 1, test: 1 },
            unlabeled_videos: SplitCounts { train: 2, validation: 1, test: 1 },
            held_out_videos: 1,
            num_unlabeled: 2,
            ..ScenarioConfig::default()
        };
        let a = generate_scenario(&cfg, 11).unwrap();
        let b = generate_scenario(&cfg, 11).unwrap();
        assert_eq!(a, b);
        let c = generate_scenario(&cfg, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_heterogeneity_gives_reference_profiles() {
        let cfg = ScenarioConfig {
            heterogeneity: 0.0,
            num_unlabeled: 2,
            labeled_videos: SplitCounts { train: 1, validation: 1, test: 1 },
            unlabeled_videos: SplitCounts { train: 1, validation: 1, test: 1 },
            held_out_videos: 1,
            ..ScenarioConfig::default()
        };
        let s = generate_scenario(&cfg, 5).unwrap();
        for client in s.unlabeled.iter().chain(std::iter::once(&s.held_out)) {
            assert_eq!(client.profile.centroids, s.labeled.profile.centroids);
            assert_eq!(client.profile.duration_scale, 1.0);
            assert!(client.profile.shift.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn heterogeneity_grows_centroid_distance_monotonically() {
        let mut distances = Vec::new();
        for (i, h) in [0.0, 0.25, 0.5, 0.75, 1.0].iter().enumerate() {
            let cfg = ScenarioConfig {
                heterogeneity: *h,
                num_unlabeled: 3,
                labeled_videos: SplitCounts { train: 1, validation: 1, test: 1 },
                unlabeled_videos: SplitCounts { train: 1, validation: 1, test: 1 },
                held_out_videos: 1,
                ..ScenarioConfig::default()
            };
            let s = generate_scenario(&cfg, 21).unwrap();
            let mut clients = vec![&s.labeled];
            clients.extend(s.unlabeled.iter());
            let mut total = 0.0;
            let mut pairs = 0;
            for a in 0..clients.len() {
                for b in a + 1..clients.len() {
                    for p in 0..cfg.workflow.num_phases {
                        let d: f64 = clients[a].profile.centroids[p]
                            .iter()
                            .zip(&clients[b].profile.centroids[p])
                            .map(|(x, y)| (x - y) * (x - y))
                            .sum::<f64>()
                            .sqrt();
                        total += d;
                    }
                    pairs += 1;
                }
            }
            distances.push(total / pairs as f64);
            if i > 0 {
                assert!(
                    distances[i] > distances[i - 1],
                    "knob {h}: {distances:?} not increasing"
                );
            }
        }
    }

    #[test]
    fn labels_are_role_gated() {
        let cfg = ScenarioConfig {
            num_unlabeled: 1,
            labeled_videos: SplitCounts { train: 1, validation: 1, test: 1 },
            unlabeled_videos: SplitCounts { train: 1, validation: 1, test: 1 },
            held_out_videos: 1,
            ..ScenarioConfig::default()
        };
        let s = generate_scenario(&cfg, 9).unwrap();
        assert!(s.labeled.train_labels(0).is_ok());
        assert!(matches!(
            s.unlabeled[0].train_labels(0),
            Err(DataError::LabelsHidden(..))
        ));
        // the forced-supervision accessor still works for the baseline
        assert!(!s.unlabeled[0].fullsup_labels(0).is_empty());
    }

    #[test]
    fn linear_probe_separates_reference_data() {
        // nearest-class-mean probe on reference-profile videos; this is the
        // desk-scale learnability guarantee behind the default generator
        // settings (noise 0.1, unit spacing).
        let cfg = ScenarioConfig {
            noise_sigma: 0.1,
            centroid_spacing: 1.0,
            heterogeneity: 0.0,
            num_unlabeled: 1,
            labeled_videos: SplitCounts { train: 4, validation: 1, test: 2 },
            unlabeled_videos: SplitCounts { train: 1, validation: 1, test: 1 },
            held_out_videos: 1,
            ..ScenarioConfig::default()
        };
        let s = generate_scenario(&cfg, 33).unwrap();
        let p = cfg.workflow.num_phases;
        let d = cfg.input_dim;
        let mut sums = vec![vec![0.0; d]; p];
        let mut counts = vec![0usize; p];
        for video in s.labeled.train_videos() {
            for (i, &l) in video.eval_labels().iter().enumerate() {
                for (acc, &x) in sums[l - 1].iter_mut().zip(video.frames().row(i)) {
                    *acc += x;
                }
                counts[l - 1] += 1;
            }
        }
        for (s_row, &c) in sums.iter_mut().zip(&counts) {
            for x in s_row.iter_mut() {
                *x /= c.max(1) as f64;
            }
        }
        let mut correct = 0usize;
        let mut total = 0usize;
        for video in s.labeled.videos_in_split(Split::Test) {
            for (i, &l) in video.eval_labels().iter().enumerate() {
                let frame = video.frames().row(i);
                let best = (0..p)
                    .min_by(|&a, &b| {
                        let da: f64 =
                            frame.iter().zip(&sums[a]).map(|(x, m)| (x - m) * (x - m)).sum();
                        let db: f64 =
                            frame.iter().zip(&sums[b]).map(|(x, m)| (x - m) * (x - m)).sum();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                if best + 1 == l {
                    correct += 1;
                }
                total += 1;
            }
        }
        let acc = correct as f64 / total as f64;
        assert!(acc > 0.9, "probe accuracy {acc}");
    }

    #[test]
    fn dataset_files_roundtrip() {
        let cfg = ScenarioConfig {
            num_unlabeled: 1,
            labeled_videos: SplitCounts { train: 1, validation: 1, test: 1 },
            unlabeled_videos: SplitCounts { train: 1, validation: 1, test: 1 },
            held_out_videos: 1,
            ..ScenarioConfig::default()
        };
        let s = generate_scenario(&cfg, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        s.save(dir.path()).unwrap();
        let (loaded, read) = Scenario::load(dir.path()).unwrap();
        assert_eq!(s, loaded);
        assert_eq!(read.len(), 4); // manifest + 3 clients
    }
}
