//! Clip sampling over 1-based frame ids: uniformly strided with a random
//! offset, random with a fixed offset, and partition sampling (one uniform
//! draw per equal partition). An epoch draws floor(L / k) clips per video;
//! partition-sampled epochs are pairwise disjoint by construction.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("video of {len} frames too short for clip size {clip} with stride {stride}")]
    TooShortStrided { len: usize, clip: usize, stride: usize },
    #[error("only {available} frames at offset {offset}, need {clip}")]
    TooShortOffset { available: usize, offset: usize, clip: usize },
    #[error("video of {len} frames shorter than clip size {clip}")]
    TooShort { len: usize, clip: usize },
    #[error("invalid clip: {0}")]
    InvalidClip(String),
}

/// An ordered set of k frame ids sampled from a video of length L.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clip {
    frame_ids: Vec<usize>,
}

impl Clip {
    /// Validates length, strict monotonicity, and the [1, video_len] bounds.
    pub fn new(frame_ids: Vec<usize>, video_len: usize) -> Result<Self, SampleError> {
        if frame_ids.is_empty() {
            return Err(SampleError::InvalidClip("empty clip".into()));
        }
        for pair in frame_ids.windows(2) {
            if pair[1] <= pair[0] {
                return Err(SampleError::InvalidClip(format!(
                    "ids not strictly increasing: {} then {}",
                    pair[0], pair[1]
                )));
            }
        }
        let first = frame_ids[0];
        let last = *frame_ids.last().expect("non-empty");
        if first < 1 || last > video_len {
            return Err(SampleError::InvalidClip(format!(
                "ids [{first}, {last}] outside video bounds [1, {video_len}]"
            )));
        }
        Ok(Clip { frame_ids })
    }

    pub fn frame_ids(&self) -> &[usize] {
        &self.frame_ids
    }

    pub fn len(&self) -> usize {
        self.frame_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_ids.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingStrategy {
    Partition,
    UniformStrided,
    RandomOffset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub strategy: SamplingStrategy,
    pub clip_size: usize,
    /// Fixed stride, used by the strided strategy only.
    pub stride: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            strategy: SamplingStrategy::Partition,
            clip_size: 16,
            stride: 4,
        }
    }
}

/// Strided clip {o, o+s, ..., o+(k-1)s} with offset o uniform over its legal
/// range.
pub fn sample_uniform_strided(
    video_len: usize,
    clip_size: usize,
    stride: usize,
    rng: &mut impl Rng,
) -> Result<Clip, SampleError> {
    let span = (clip_size - 1) * stride;
    if stride == 0 || span >= video_len {
        return Err(SampleError::TooShortStrided {
            len: video_len,
            clip: clip_size,
            stride,
        });
    }
    let offset = rng.gen_range(1..=video_len - span);
    let ids = (0..clip_size).map(|i| offset + i * stride).collect();
    Clip::new(ids, video_len)
}

/// k distinct frame ids at or after `offset`, uniform over such subsets,
/// returned in ascending order.
pub fn sample_random_offset(
    video_len: usize,
    clip_size: usize,
    offset: usize,
    rng: &mut impl Rng,
) -> Result<Clip, SampleError> {
    if offset < 1 || offset > video_len {
        return Err(SampleError::InvalidClip(format!(
            "offset {offset} outside [1, {video_len}]"
        )));
    }
    let available = video_len - offset + 1;
    if available < clip_size {
        return Err(SampleError::TooShortOffset { available, offset, clip: clip_size });
    }
    let mut ids = rand::seq::index::sample(rng, available, clip_size)
        .into_iter()
        .map(|i| offset + i)
        .collect::<Vec<_>>();
    ids.sort_unstable();
    Clip::new(ids, video_len)
}

/// Bounds of partition `i` (1-based) when [1, len] is split into `parts`
/// ceiling-equal partitions: sizes differ by at most one and the union is
/// exactly [1, len].
fn partition_bounds(len: usize, parts: usize, i: usize) -> (usize, usize) {
    let lo = ((i - 1) * len).div_ceil(parts) + 1;
    let hi = (i * len).div_ceil(parts);
    (lo, hi)
}

/// One uniform draw from each of k equal partitions of the video.
pub fn sample_partitioned(
    video_len: usize,
    clip_size: usize,
    rng: &mut impl Rng,
) -> Result<Clip, SampleError> {
    if video_len < clip_size {
        return Err(SampleError::TooShort { len: video_len, clip: clip_size });
    }
    let mut ids = Vec::with_capacity(clip_size);
    for i in 1..=clip_size {
        let (lo, hi) = partition_bounds(video_len, clip_size, i);
        ids.push(rng.gen_range(lo..=hi));
    }
    Clip::new(ids, video_len)
}

/// The clips one training epoch uses for a video: exactly floor(L / k) of
/// them. Under the partition strategy every clip spans the whole video (one
/// frame per partition) and non-overlap is enforced by drawing each
/// partition's frames without replacement, so the clips are pairwise
/// disjoint. The two offset strategies draw independently and may overlap.
pub fn sample_epoch_clips(
    video_len: usize,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<Vec<Clip>, SampleError> {
    let k = cfg.clip_size;
    if video_len < k {
        return Err(SampleError::TooShort { len: video_len, clip: k });
    }
    let count = video_len / k;
    let mut clips = Vec::with_capacity(count);
    match cfg.strategy {
        SamplingStrategy::Partition => {
            // ids[i][j]: the frame partition i contributes to clip j. Every
            // partition holds at least `count` frames, so distinct draws fit.
            let mut columns: Vec<Vec<usize>> = Vec::with_capacity(k);
            for i in 1..=k {
                let (lo, hi) = partition_bounds(video_len, k, i);
                let mut ids: Vec<usize> = rand::seq::index::sample(rng, hi - lo + 1, count)
                    .into_iter()
                    .map(|o| lo + o)
                    .collect();
                ids.shuffle(rng);
                columns.push(ids);
            }
            for j in 0..count {
                let ids: Vec<usize> = columns.iter().map(|c| c[j]).collect();
                clips.push(Clip::new(ids, video_len)?);
            }
        }
        SamplingStrategy::UniformStrided => {
            for _ in 0..count {
                clips.push(sample_uniform_strided(video_len, k, cfg.stride, rng)?);
            }
        }
        SamplingStrategy::RandomOffset => {
            for _ in 0..count {
                clips.push(sample_random_offset(video_len, k, 1, rng)?);
            }
        }
    }
    Ok(clips)
}

/// Shuffle helper shared by the training loops.
pub fn shuffled_indices(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn strided_forced_offset() {
        // L = (k-1)s + 1 leaves exactly one legal offset
        let mut r = rng(0);
        for _ in 0..10 {
            let clip = sample_uniform_strided(7, 3, 3, &mut r).unwrap();
            assert_eq!(clip.frame_ids(), &[1, 4, 7]);
        }
    }

    #[test]
    fn strided_single_frame_clip_covers_video() {
        let mut r = rng(1);
        let mut seen = [false; 9];
        for _ in 0..500 {
            let clip = sample_uniform_strided(9, 1, 1, &mut r).unwrap();
            seen[clip.frame_ids()[0] - 1] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn strided_differences_equal_stride() {
        let mut r = rng(2);
        for _ in 0..100 {
            let clip = sample_uniform_strided(50, 5, 3, &mut r).unwrap();
            for pair in clip.frame_ids().windows(2) {
                assert_eq!(pair[1] - pair[0], 3);
            }
        }
    }

    #[test]
    fn strided_rejects_short_video() {
        let mut r = rng(3);
        assert!(matches!(
            sample_uniform_strided(8, 3, 4, &mut r),
            Err(SampleError::TooShortStrided { .. })
        ));
    }

    #[test]
    fn random_offset_forced_when_exact() {
        let mut r = rng(4);
        let clip = sample_random_offset(10, 4, 7, &mut r).unwrap();
        assert_eq!(clip.frame_ids(), &[7, 8, 9, 10]);
    }

    #[test]
    fn random_offset_respects_offset_and_order() {
        let mut r = rng(5);
        for _ in 0..200 {
            let clip = sample_random_offset(30, 6, 11, &mut r).unwrap();
            assert!(clip.frame_ids().iter().all(|&id| id >= 11 && id <= 30));
            for pair in clip.frame_ids().windows(2) {
                assert!(pair[1] > pair[0]);
            }
        }
    }

    #[test]
    fn random_offset_inclusion_frequency_is_uniform() {
        // each eligible id appears with probability k / (L - o + 1)
        let (video_len, k, offset) = (20usize, 4usize, 3usize);
        let eligible = video_len - offset + 1;
        let p = k as f64 / eligible as f64;
        let draws = 100_000;
        let mut counts = vec![0usize; video_len + 1];
        let mut r = rng(6);
        for _ in 0..draws {
            for &id in sample_random_offset(video_len, k, offset, &mut r)
                .unwrap()
                .frame_ids()
            {
                counts[id] += 1;
            }
        }
        let se = (p * (1.0 - p) / draws as f64).sqrt();
        for id in offset..=video_len {
            let freq = counts[id] as f64 / draws as f64;
            assert!(
                (freq - p).abs() < 3.0 * se,
                "id {id}: freq {freq} vs p {p} (se {se})"
            );
        }
    }

    #[test]
    fn random_offset_rejects_insufficient_frames() {
        let mut r = rng(7);
        assert!(matches!(
            sample_random_offset(10, 5, 8, &mut r),
            Err(SampleError::TooShortOffset { .. })
        ));
    }

    #[test]
    fn partition_of_equal_length_is_identity() {
        let mut r = rng(8);
        let clip = sample_partitioned(5, 5, &mut r).unwrap();
        assert_eq!(clip.frame_ids(), &[1, 2, 3, 4, 5]);
    }

    #[test]
    fn partition_double_length_bounds() {
        let mut r = rng(9);
        for _ in 0..100 {
            let clip = sample_partitioned(12, 6, &mut r).unwrap();
            for (i, &id) in clip.frame_ids().iter().enumerate() {
                let part = i + 1;
                assert!(id == 2 * part - 1 || id == 2 * part, "id {id} partition {part}");
            }
        }
    }

    #[test]
    fn partition_ids_stay_inside_their_partitions() {
        let mut r = rng(10);
        for _ in 0..10_000 {
            let video_len = r.gen_range(2..200);
            let k = r.gen_range(1..=video_len);
            let clip = sample_partitioned(video_len, k, &mut r).unwrap();
            for (i, &id) in clip.frame_ids().iter().enumerate() {
                let (lo, hi) = partition_bounds(video_len, k, i + 1);
                assert!(id >= lo && id <= hi, "id {id} not in [{lo}, {hi}]");
            }
        }
    }

    #[test]
    fn partition_union_is_exact_cover() {
        for len in 1..60usize {
            for parts in 1..=len {
                let mut next = 1;
                for i in 1..=parts {
                    let (lo, hi) = partition_bounds(len, parts, i);
                    assert_eq!(lo, next, "len {len} parts {parts} i {i}");
                    assert!(hi >= lo);
                    let size = hi - lo + 1;
                    assert!(size == len / parts || size == len.div_ceil(parts));
                    next = hi + 1;
                }
                assert_eq!(next, len + 1);
            }
        }
    }

    #[test]
    fn epoch_clip_count_and_disjointness() {
        let cfg = SamplerConfig::default();
        let mut r = rng(11);
        let clips = sample_epoch_clips(100, &cfg, &mut r).unwrap();
        assert_eq!(clips.len(), 6);
        let mut all: Vec<usize> = clips.iter().flat_map(|c| c.frame_ids().to_vec()).collect();
        let before = all.len();
        all.sort_unstable();
        all.dedup();
        assert_eq!(before, 96);
        assert_eq!(all.len(), 96);
    }

    #[test]
    fn epoch_single_clip_when_len_equals_k() {
        let cfg = SamplerConfig::default();
        let mut r = rng(12);
        let clips = sample_epoch_clips(16, &cfg, &mut r).unwrap();
        assert_eq!(clips.len(), 1);
    }

    #[test]
    fn epoch_partition_clips_disjoint_and_span_the_video() {
        let mut r = rng(13);
        for _ in 0..1000 {
            let k = r.gen_range(2..12);
            let video_len = r.gen_range(k..k * 8);
            let cfg = SamplerConfig {
                strategy: SamplingStrategy::Partition,
                clip_size: k,
                stride: 1,
            };
            let clips = sample_epoch_clips(video_len, &cfg, &mut r).unwrap();
            assert_eq!(clips.len(), video_len / k);
            // every clip's i-th frame lies in partition i of the whole video
            for clip in &clips {
                for (i, &id) in clip.frame_ids().iter().enumerate() {
                    let (lo, hi) = partition_bounds(video_len, k, i + 1);
                    assert!(id >= lo && id <= hi, "L={video_len} k={k}: {id} outside [{lo},{hi}]");
                }
            }
            let mut all: Vec<usize> =
                clips.iter().flat_map(|c| c.frame_ids().to_vec()).collect();
            let n = all.len();
            all.sort_unstable();
            all.dedup();
            assert_eq!(all.len(), n, "overlap for L={video_len} k={k}");
        }
    }

    #[test]
    fn epoch_is_deterministic_per_seed() {
        let cfg = SamplerConfig::default();
        let a = sample_epoch_clips(120, &cfg, &mut rng(99)).unwrap();
        let b = sample_epoch_clips(120, &cfg, &mut rng(99)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn epoch_rejects_short_video() {
        let cfg = SamplerConfig::default();
        assert!(matches!(
            sample_epoch_clips(10, &cfg, &mut rng(0)),
            Err(SampleError::TooShort { .. })
        ));
    }
}
