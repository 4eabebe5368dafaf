//! Context-sensitive chunk geometry shared by the front-end and back-end.
//!
//! An utterance of `T` frames is cut into non-overlapping cores of
//! `chunk_frames`; each core is spliced with up to `left_frames` of past and
//! `right_frames` of future context. Context that would fall outside the
//! utterance is recorded as zero padding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkDescriptor {
    pub core_start: usize,
    pub core_end: usize,
    pub left_ctx_start: usize,
    pub right_ctx_end: usize,
    pub left_pad: usize,
    pub right_pad: usize,
}

impl ChunkDescriptor {
    /// Context bounds for one core inside an utterance of `total_frames`.
    pub fn new(core_start: usize, core_end: usize, left_frames: usize, right_frames: usize, total_frames: usize) -> Self {
        let want_left = core_start as isize - left_frames as isize;
        let want_right = core_end + right_frames;
        Self {
            core_start,
            core_end,
            left_ctx_start: want_left.max(0) as usize,
            right_ctx_end: want_right.min(total_frames),
            left_pad: (-want_left).max(0) as usize,
            right_pad: want_right.saturating_sub(total_frames),
        }
    }

    pub fn core_len(&self) -> usize {
        self.core_end - self.core_start
    }

    /// Frames in the extracted chunk, padding included.
    pub fn chunk_len(&self) -> usize {
        self.left_pad + (self.right_ctx_end - self.left_ctx_start) + self.right_pad
    }

    /// Position of the core inside the extracted chunk.
    pub fn core_offset(&self) -> usize {
        self.left_pad + (self.core_start - self.left_ctx_start)
    }

    pub fn core_range_in_chunk(&self) -> std::ops::Range<usize> {
        let o = self.core_offset();
        o..o + self.core_len()
    }

    pub fn left_context(&self) -> usize {
        self.core_offset()
    }

    pub fn right_context(&self) -> usize {
        self.chunk_len() - self.core_offset() - self.core_len()
    }

    /// Utterance frame index of chunk position `i`, or `None` inside padding.
    pub fn source_index(&self, i: usize) -> Option<usize> {
        let real = self.right_ctx_end - self.left_ctx_start;
        if i < self.left_pad || i >= self.left_pad + real {
            None
        } else {
            Some(self.left_ctx_start + i - self.left_pad)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkPlan {
    pub descriptors: Vec<ChunkDescriptor>,
    pub total_frames: usize,
    pub chunk_frames: usize,
    pub left_frames: usize,
    pub right_frames: usize,
}

impl ChunkPlan {
    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }
}

pub fn plan_chunks(
    total_frames: usize,
    chunk_frames: usize,
    left_frames: usize,
    right_frames: usize,
) -> Result<ChunkPlan> {
    if chunk_frames == 0 {
        return Err(Error::InvalidConfig("chunk size must be at least one frame".into()));
    }
    if total_frames == 0 {
        return Err(Error::InvalidInput("cannot chunk an empty utterance".into()));
    }
    let descriptors = (0..total_frames.div_ceil(chunk_frames))
        .map(|i| {
            let core_start = i * chunk_frames;
            let core_end = (core_start + chunk_frames).min(total_frames);
            ChunkDescriptor::new(core_start, core_end, left_frames, right_frames, total_frames)
        })
        .collect();
    Ok(ChunkPlan {
        descriptors,
        total_frames,
        chunk_frames,
        left_frames,
        right_frames,
    })
}

/// Uniform chunk size in `[low, high]` frames.
pub fn jitter_chunk_size<R: Rng>(base: usize, low: usize, high: usize, rng: &mut R) -> Result<usize> {
    if !(low <= base && base <= high) || low == 0 {
        return Err(Error::InvalidConfig(format!(
            "jitter bounds must satisfy 0 < low <= base <= high, got {low} <= {base} <= {high}"
        )));
    }
    Ok(rng.random_range(low..=high))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Frontend,
    Backend,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextMode {
    None,
    Real,
    Simulated,
}

impl ContextMode {
    pub const ALL: [ContextMode; 3] = [ContextMode::None, ContextMode::Real, ContextMode::Simulated];

    pub fn as_str(&self) -> &'static str {
        match self {
            ContextMode::None => "none",
            ContextMode::Real => "real",
            ContextMode::Simulated => "simulated",
        }
    }
}

impl std::str::FromStr for ContextMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ContextMode::None),
            "real" => Ok(ContextMode::Real),
            "simulated" | "sim" => Ok(ContextMode::Simulated),
            other => Err(Error::InvalidConfig(format!("unknown context mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for ContextMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Right-context randomization for one stage. Probabilities are ordered
/// `[none, real, simulated]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContextPolicy {
    pub stage: Stage,
    pub probabilities: [f64; 3],
}

impl ContextPolicy {
    pub fn new(stage: Stage, probabilities: [f64; 3]) -> Result<Self> {
        let p = Self { stage, probabilities };
        p.validate()?;
        Ok(p)
    }

    pub fn frontend_default() -> Self {
        Self {
            stage: Stage::Frontend,
            probabilities: [0.5, 0.5, 0.0],
        }
    }

    pub fn backend_default() -> Self {
        Self {
            stage: Stage::Backend,
            probabilities: [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
        }
    }

    /// Always the given mode.
    pub fn fixed(stage: Stage, mode: ContextMode) -> Result<Self> {
        let mut probabilities = [0.0; 3];
        probabilities[mode as usize] = 1.0;
        Self::new(stage, probabilities)
    }

    pub fn validate(&self) -> Result<()> {
        if self.probabilities.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::InvalidConfig("context probabilities must be non-negative".into()));
        }
        let sum: f64 = self.probabilities.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("context probabilities sum to {sum}, not 1")));
        }
        if self.stage == Stage::Frontend && self.probabilities[2] > 0.0 {
            return Err(Error::InvalidConfig(
                "the front-end never uses simulated context".into(),
            ));
        }
        Ok(())
    }
}

pub fn draw_context_mode<R: Rng>(policy: &ContextPolicy, rng: &mut R) -> Result<ContextMode> {
    policy.validate()?;
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (mode, p) in ContextMode::ALL.iter().zip(policy.probabilities) {
        acc += p;
        if u < acc {
            return Ok(*mode);
        }
    }
    // Rounding at the top of the cumulative sum: last mode with mass.
    Ok(*ContextMode::ALL
        .iter()
        .zip(policy.probabilities)
        .rev()
        .find(|(_, p)| *p > 0.0)
        .map(|(m, _)| m)
        .expect("validated policy has mass"))
}

/// Copy a context-sensitive chunk out of a `[T][dim]` row-major sequence,
/// filling padded positions with `zero`.
pub fn extract_chunk<T: Copy>(frames: &[T], dim: usize, d: &ChunkDescriptor, zero: T) -> Result<Vec<T>> {
    if dim == 0 || frames.len() % dim != 0 {
        return Err(Error::Shape("frame buffer is not a multiple of dim".into()));
    }
    let total = frames.len() / dim;
    if d.right_ctx_end > total
        || d.left_ctx_start > d.core_start
        || d.core_start >= d.core_end
        || d.core_end > d.right_ctx_end
    {
        return Err(Error::InvalidInput(format!(
            "chunk descriptor {d:?} inconsistent with {total} frames"
        )));
    }
    let mut out = Vec::with_capacity(d.chunk_len() * dim);
    out.extend(std::iter::repeat_n(zero, d.left_pad * dim));
    out.extend_from_slice(&frames[d.left_ctx_start * dim..d.right_ctx_end * dim]);
    out.extend(std::iter::repeat_n(zero, d.right_pad * dim));
    Ok(out)
}

/// Concatenate the core rows of extracted chunks.
pub fn stitch_cores<T: Copy>(chunks: &[Vec<T>], descriptors: &[ChunkDescriptor], dim: usize) -> Vec<T> {
    let mut out = Vec::new();
    for (c, d) in chunks.iter().zip(descriptors) {
        let r = d.core_range_in_chunk();
        out.extend_from_slice(&c[r.start * dim..r.end * dim]);
    }
    out
}
