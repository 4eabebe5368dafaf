//! Synthetic two-segment "words" used as the speech source for the toy
//! recognition task.
//!
//! Each word is two consecutive harmonic tone segments. Every first segment is
//! shared by exactly two words, so a word can only be identified once its
//! second half has been heard.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::signal::Waveform;

/// Segment fundamentals in Hz.
pub const PHONES: [f64; 5] = [320.0, 540.0, 880.0, 1400.0, 2250.0];

/// Phone pairs for token ids `1..=10`; id 0 is the CTC blank.
pub const WORDS: [(usize, usize); 10] = [
    (0, 1),
    (0, 2),
    (1, 2),
    (1, 3),
    (2, 3),
    (2, 4),
    (3, 4),
    (3, 0),
    (4, 0),
    (4, 1),
];

pub const VOCAB_SIZE: usize = WORDS.len() + 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub sample_rate: u32,
    pub min_words: usize,
    pub max_words: usize,
    /// Segment duration range in seconds.
    pub segment_secs: (f64, f64),
    /// Silence between words in seconds.
    pub gap_secs: (f64, f64),
    /// Leading and trailing silence in seconds.
    pub edge_secs: (f64, f64),
    pub amplitude: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            min_words: 2,
            max_words: 4,
            segment_secs: (0.10, 0.14),
            gap_secs: (0.05, 0.15),
            edge_secs: (0.10, 0.25),
            amplitude: 0.12,
        }
    }
}

fn push_silence(out: &mut Vec<f64>, secs: f64, sr: f64) {
    out.extend(std::iter::repeat_n(0.0, (secs * sr).round() as usize));
}

fn push_segment<R: Rng>(out: &mut Vec<f64>, phone: usize, secs: f64, cfg: &ToyConfig, rng: &mut R) {
    let sr = cfg.sample_rate as f64;
    let n = (secs * sr).round() as usize;
    let f0 = PHONES[phone] * rng.random_range(0.97..1.03);
    let gain = cfg.amplitude * rng.random_range(0.8..1.2);
    let phase: f64 = rng.random_range(0.0..2.0 * PI);
    let ramp = (0.01 * sr) as usize;
    for i in 0..n {
        let t = i as f64 / sr;
        let env = if i < ramp {
            i as f64 / ramp as f64
        } else if i + ramp > n {
            (n - i) as f64 / ramp as f64
        } else {
            1.0
        };
        let s = (2.0 * PI * f0 * t + phase).sin() + 0.5 * (4.0 * PI * f0 * t + phase).sin();
        out.push(gain * env * s / 1.5);
    }
}

/// Render a transcript (token ids in `1..VOCAB_SIZE`) as a mono waveform.
pub fn render<R: Rng>(tokens: &[u32], cfg: &ToyConfig, rng: &mut R) -> Waveform {
    let sr = cfg.sample_rate as f64;
    let mut out = Vec::new();
    push_silence(&mut out, rng.random_range(cfg.edge_secs.0..=cfg.edge_secs.1), sr);
    for (i, &tok) in tokens.iter().enumerate() {
        if i > 0 {
            push_silence(&mut out, rng.random_range(cfg.gap_secs.0..=cfg.gap_secs.1), sr);
        }
        let (a, b) = WORDS[tok as usize - 1];
        push_segment(&mut out, a, rng.random_range(cfg.segment_secs.0..=cfg.segment_secs.1), cfg, rng);
        push_segment(&mut out, b, rng.random_range(cfg.segment_secs.0..=cfg.segment_secs.1), cfg, rng);
    }
    push_silence(&mut out, rng.random_range(cfg.edge_secs.0..=cfg.edge_secs.1), sr);
    Waveform::mono(out, cfg.sample_rate).expect("toy waveform is finite")
}

/// Random transcript and its rendering.
pub fn utterance<R: Rng>(cfg: &ToyConfig, rng: &mut R) -> (Vec<u32>, Waveform) {
    let n = rng.random_range(cfg.min_words..=cfg.max_words);
    let tokens: Vec<u32> = (0..n).map(|_| rng.random_range(1..VOCAB_SIZE as u32)).collect();
    let wave = render(&tokens, cfg, rng);
    (tokens, wave)
}
