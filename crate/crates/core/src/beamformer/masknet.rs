use rand::Rng;
use serde::{Deserialize, Serialize};

use super::TimeFrequencyMask;
use crate::error::{Error, Result};
use crate::neural::{add_linear_params, add_lstm_params, blstm_stack, linear, BoundParams, ModelParams, Tape, Tensor, Var};
use crate::signal::MultiChannelSpectrogram;

/// Added to the power before the log so silent bins stay finite.
pub const MASK_POWER_FLOOR: f64 = 1e-8;
/// Scale applied to log-power mask features.
pub const MASK_FEATURE_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskNetConfig {
    pub layers: usize,
    pub hidden_per_direction: usize,
    pub dropout: f64,
    pub num_bins: usize,
}

impl Default for MaskNetConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            hidden_per_direction: 320,
            dropout: 0.5,
            num_bins: 257,
        }
    }
}

impl MaskNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden_per_direction == 0 || self.num_bins == 0 {
            return Err(Error::InvalidConfig("mask network sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig("mask dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Scaled log power of one channel, `[frame][bin]`.
pub fn mask_features(spec: &MultiChannelSpectrogram, channel: usize) -> Result<Tensor> {
    if channel >= spec.num_channels() {
        return Err(Error::InvalidInput(format!("channel {channel} out of range")));
    }
    let data = spec
        .power(channel)
        .into_iter()
        .map(|p| MASK_FEATURE_SCALE * (p + MASK_POWER_FLOOR).ln())
        .collect();
    Tensor::from_vec(spec.num_frames(), spec.num_bins(), data)
}

/// BLSTM stack with two sigmoid heads. Dropout is active only when an RNG is
/// supplied.
pub fn mask_net_forward<R: Rng>(
    tape: &mut Tape,
    bound: &BoundParams,
    cfg: &MaskNetConfig,
    features: Var,
    mut rng: Option<&mut R>,
) -> Result<(Var, Var)> {
    let cols = tape.value(features).cols();
    if cols != cfg.num_bins {
        return Err(Error::Shape(format!(
            "mask features have {cols} bins, network expects {}",
            cfg.num_bins
        )));
    }
    let dropout = rng.as_mut().map(|r| (cfg.dropout, &mut **r));
    let mut h = blstm_stack(tape, bound, "mask.blstm", cfg.layers, features, dropout)?;
    if let Some(r) = rng {
        h = tape.dropout(h, cfg.dropout, r)?;
    }
    let s = linear(tape, h, bound.get("mask.speech.w")?, bound.get("mask.speech.b")?)?;
    let n = linear(tape, h, bound.get("mask.noise.w")?, bound.get("mask.noise.b")?)?;
    Ok((tape.sigmoid(s), tape.sigmoid(n)))
}

pub struct MaskNet<'a> {
    cfg: &'a MaskNetConfig,
}

impl<'a> MaskNet<'a> {
    pub fn new(cfg: &'a MaskNetConfig) -> Self {
        Self { cfg }
    }

    pub fn init_params<R: Rng>(&self, params: &mut ModelParams, rng: &mut R) -> Result<()> {
        self.cfg.validate()?;
        let h = self.cfg.hidden_per_direction;
        for l in 0..self.cfg.layers {
            let input = if l == 0 { self.cfg.num_bins } else { 2 * h };
            for dir in ["fw", "bw"] {
                add_lstm_params(params, &format!("mask.blstm.{l}.{dir}"), input, h, rng)?;
            }
        }
        add_linear_params(params, "mask.speech", 2 * h, self.cfg.num_bins, rng)?;
        add_linear_params(params, "mask.noise", 2 * h, self.cfg.num_bins, rng)
    }

    /// Inference-mode masks for a whole chunk, from the reference channel.
    pub fn masks(
        &self,
        params: &ModelParams,
        chunk: &MultiChannelSpectrogram,
        reference: usize,
    ) -> Result<(TimeFrequencyMask, TimeFrequencyMask)> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let f = tape.constant(mask_features(chunk, reference)?);
        let (s, n) = mask_net_forward::<rand_chacha::ChaCha8Rng>(&mut tape, &bound, self.cfg, f, None)?;
        let (t, k) = (chunk.num_frames(), chunk.num_bins());
        Ok((
            TimeFrequencyMask::new(tape.value(s).data().to_vec(), t, k)?,
            TimeFrequencyMask::new(tape.value(n).data().to_vec(), t, k)?,
        ))
    }
}
