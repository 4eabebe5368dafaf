//! CTC back-end: a chunk-local BLSTM encoder, CTC loss, greedy decoding and
//! character error rate.

mod ctc;

pub use ctc::{ctc_loss, ctc_loss_var, log_softmax_rows, min_frames, BLANK};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::{add_linear_params, add_lstm_params, blstm_stack, linear, BoundParams, ModelParams, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
}

impl Vocab {
    /// `tokens[0]` is the blank.
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 {
            return Err(Error::InvalidConfig("vocabulary needs a blank and at least one token".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = tokens.iter().find(|t| !seen.insert(t.as_str())) {
            return Err(Error::InvalidConfig(format!("duplicate token {dup}")));
        }
        Ok(Self { tokens })
    }

    /// Blank plus `n` word tokens `w1..wn`.
    pub fn words(n: usize) -> Self {
        let tokens = std::iter::once("<blank>".to_string())
            .chain((1..=n).map(|i| format!("w{i}")))
            .collect();
        Self::new(tokens).expect("distinct generated tokens")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }
    pub fn is_empty(&self) -> bool {
        false
    }
    pub fn blank_id(&self) -> u32 {
        BLANK
    }
    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }
}

/// Label ids without blanks.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenSequence(Vec<u32>);

impl TokenSequence {
    pub fn new(ids: Vec<u32>, vocab: &Vocab) -> Result<Self> {
        if let Some(bad) = ids.iter().find(|&&i| i == BLANK || i as usize >= vocab.len()) {
            return Err(Error::InvalidInput(format!("token id {bad} is blank or out of range")));
        }
        Ok(Self(ids))
    }

    /// Ids produced by decoding, already free of blanks.
    pub(crate) fn from_ids_unchecked(ids: Vec<u32>) -> Self {
        Self(ids)
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }
    pub fn len(&self) -> usize {
        self.0.len()
    }
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
    pub fn extend(&mut self, other: &TokenSequence) {
        self.0.extend_from_slice(&other.0);
    }
}

impl From<TokenSequence> for Vec<u32> {
    fn from(t: TokenSequence) -> Self {
        t.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub layers: usize,
    pub hidden_per_direction: usize,
    pub vocab_size: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 80,
            layers: 2,
            hidden_per_direction: 128,
            vocab_size: crate::scene::toy::VOCAB_SIZE,
            dropout: 0.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.layers == 0 || self.hidden_per_direction == 0 || self.vocab_size < 2 {
            return Err(Error::InvalidConfig("encoder sizes must be positive with at least 2 classes".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig("encoder dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn init_params<R: Rng>(&self, params: &mut ModelParams, rng: &mut R) -> Result<()> {
        self.validate()?;
        let h = self.hidden_per_direction;
        for l in 0..self.layers {
            let input = if l == 0 { self.input_dim } else { 2 * h };
            for dir in ["fw", "bw"] {
                add_lstm_params(params, &format!("enc.blstm.{l}.{dir}"), input, h, rng)?;
            }
        }
        add_linear_params(params, "enc.out", 2 * h, self.vocab_size, rng)
    }
}

/// Per-frame logits `[T][V]`. Recursion never leaves the given frames.
pub fn encoder_forward<R: Rng>(
    tape: &mut Tape,
    bound: &BoundParams,
    cfg: &EncoderConfig,
    features: Var,
    rng: Option<&mut R>,
) -> Result<Var> {
    let cols = tape.value(features).cols();
    if cols != cfg.input_dim {
        return Err(Error::Shape(format!(
            "encoder input has {cols} features, expected {}",
            cfg.input_dim
        )));
    }
    let dropout = rng.map(|r| (cfg.dropout, r));
    let h = blstm_stack(tape, bound, "enc.blstm", cfg.layers, features, dropout)?;
    linear(tape, h, bound.get("enc.out.w")?, bound.get("enc.out.b")?)
}

/// Per-frame argmax; ties go to the lowest id.
pub fn frame_argmax(logits: &Tensor) -> Vec<u32> {
    (0..logits.rows())
        .map(|t| {
            let row = logits.row(t);
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best as u32
        })
        .collect()
}

/// Collapse repeats then drop blanks. `prev` is the last frame label of any
/// preceding segment so a run split across segments is merged.
pub fn collapse(frames: &[u32], prev: Option<u32>) -> Vec<u32> {
    let mut out = Vec::new();
    let mut last = prev;
    for &f in frames {
        if Some(f) != last && f != BLANK {
            out.push(f);
        }
        last = Some(f);
    }
    out
}

pub fn greedy_decode(logits: &Tensor) -> TokenSequence {
    TokenSequence(collapse(&frame_argmax(logits), None))
}

/// Levenshtein distance with unit costs.
pub fn edit_distance(hyp: &[u32], reference: &[u32]) -> usize {
    let mut prev: Vec<usize> = (0..=reference.len()).collect();
    let mut cur = vec![0; reference.len() + 1];
    for (i, h) in hyp.iter().enumerate() {
        cur[0] = i + 1;
        for (j, r) in reference.iter().enumerate() {
            let sub = prev[j] + usize::from(h != r);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[reference.len()]
}

/// `sum(distance) / sum(reference length)` over `(hypothesis, reference)`.
pub fn cer<'a, I>(pairs: I) -> Result<f64>
where
    I: IntoIterator<Item = (&'a [u32], &'a [u32])>,
{
    let (mut errs, mut total) = (0usize, 0usize);
    for (h, r) in pairs {
        errs += edit_distance(h, r);
        total += r.len();
    }
    if total == 0 {
        return Err(Error::InvalidInput("CER needs a non-empty reference corpus".into()));
    }
    Ok(errs as f64 / total as f64)
}
