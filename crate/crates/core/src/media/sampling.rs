//! Temporal segmentation of a shot into clips.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ShotRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// One seeded random frame per segment.
    TrainRandom,
    /// The center frame of each segment.
    TestUniform,
}

/// Half-open segment `[lo, hi)` of local frame offsets for clip `k` of `n`.
fn segment_bounds(num_frames: u64, n: usize, k: usize) -> (u64, u64) {
    let lo = (k as u64 * num_frames) / n as u64;
    let hi = ((k as u64 + 1) * num_frames) / n as u64;
    (lo, hi)
}

/// Splits the shot's frames into `n_clips` contiguous, near-equal segments and
/// picks one absolute frame index per segment.
///
/// Shots shorter than `n_clips` produce empty segments; those clamp to the
/// nearest real frame so the result always has `n_clips` entries.
pub fn segment_clips(record: &ShotRecord, n_clips: usize, mode: SamplingMode, seed: u64) -> Vec<u64> {
    let n = n_clips.max(1);
    let frames = record.num_frames().max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|k| {
            let (lo, hi) = segment_bounds(frames, n, k);
            let local = if hi <= lo {
                lo.min(frames - 1)
            } else {
                match mode {
                    SamplingMode::TestUniform => lo + (hi - lo - 1) / 2,
                    SamplingMode::TrainRandom => rng.random_range(lo..hi),
                }
            };
            record.frame_start + local
        })
        .collect()
}

/// `count` consecutive frame indices starting at `anchor`, shifted back so they
/// stay inside the shot when possible and clamped to its last frame otherwise.
pub fn consecutive_frames(record: &ShotRecord, anchor: u64, count: usize) -> Vec<u64> {
    let last = record.frame_end - 1;
    let latest_start = record.frame_end.saturating_sub(count as u64).max(record.frame_start);
    let start = anchor.clamp(record.frame_start, latest_start);
    (0..count as u64).map(|i| (start + i).min(last)).collect()
}
