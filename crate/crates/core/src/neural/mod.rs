//! Small deterministic tensor core with reverse-mode autodiff, the recurrent
//! layers the front-end, back-end and simulator need, Adam and checkpoints.

pub mod gradcheck;
mod optim;
mod params;
mod rnn;
mod tape;
mod tensor;

pub use optim::{adam_step, clip_grad_norm, global_norm, AdamConfig, AdamState};
pub use params::{add_grads, load_checkpoint, save_checkpoint, BoundParams, GradMap, ModelParams};
pub use rnn::{blstm, gru, lstm, GruWeights, LstmWeights};
pub use tape::{Function, Gradients, Tape, Var};
pub use tensor::Tensor;

use rand::Rng;

use crate::error::Result;

/// `x @ w + b` with `b` broadcast over rows.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// Uniform initialisation in `[-1/sqrt(fan), 1/sqrt(fan)]`.
pub fn init_uniform<R: Rng>(rows: usize, cols: usize, fan: usize, rng: &mut R) -> Tensor {
    let a = 1.0 / (fan.max(1) as f64).sqrt();
    gradcheck::random_tensor(rows, cols, a, rng)
}

/// Register `prefix.{w_ih,w_hh,b}` for one LSTM direction.
pub fn add_lstm_params<R: Rng>(
    params: &mut ModelParams,
    prefix: &str,
    input: usize,
    hidden: usize,
    rng: &mut R,
) -> Result<()> {
    params.insert(format!("{prefix}.w_ih"), init_uniform(input, 4 * hidden, hidden, rng))?;
    params.insert(format!("{prefix}.w_hh"), init_uniform(hidden, 4 * hidden, hidden, rng))?;
    let mut b = init_uniform(1, 4 * hidden, hidden, rng);
    // Forget-gate bias of one keeps early gradients flowing.
    for v in &mut b.data_mut()[hidden..2 * hidden] {
        *v = 1.0;
    }
    params.insert(format!("{prefix}.b"), b)
}

pub fn bind_lstm(bound: &BoundParams, prefix: &str) -> Result<LstmWeights> {
    Ok(LstmWeights {
        w_ih: bound.get(&format!("{prefix}.w_ih"))?,
        w_hh: bound.get(&format!("{prefix}.w_hh"))?,
        bias: bound.get(&format!("{prefix}.b"))?,
    })
}

pub fn add_gru_params<R: Rng>(
    params: &mut ModelParams,
    prefix: &str,
    input: usize,
    hidden: usize,
    rng: &mut R,
) -> Result<()> {
    params.insert(format!("{prefix}.w_ih"), init_uniform(input, 3 * hidden, hidden, rng))?;
    params.insert(format!("{prefix}.w_hh"), init_uniform(hidden, 3 * hidden, hidden, rng))?;
    params.insert(format!("{prefix}.b_ih"), init_uniform(1, 3 * hidden, hidden, rng))?;
    params.insert(format!("{prefix}.b_hh"), init_uniform(1, 3 * hidden, hidden, rng))
}

pub fn bind_gru(bound: &BoundParams, prefix: &str) -> Result<GruWeights> {
    Ok(GruWeights {
        w_ih: bound.get(&format!("{prefix}.w_ih"))?,
        w_hh: bound.get(&format!("{prefix}.w_hh"))?,
        b_ih: bound.get(&format!("{prefix}.b_ih"))?,
        b_hh: bound.get(&format!("{prefix}.b_hh"))?,
    })
}

pub fn add_linear_params<R: Rng>(
    params: &mut ModelParams,
    prefix: &str,
    input: usize,
    output: usize,
    rng: &mut R,
) -> Result<()> {
    params.insert(format!("{prefix}.w"), init_uniform(input, output, input, rng))?;
    params.insert(format!("{prefix}.b"), Tensor::zeros(1, output))
}

/// A stack of bidirectional LSTM layers with dropout between layers.
pub fn blstm_stack<R: Rng>(
    tape: &mut Tape,
    bound: &BoundParams,
    prefix: &str,
    layers: usize,
    x: Var,
    dropout: Option<(f64, &mut R)>,
) -> Result<Var> {
    let mut h = x;
    let mut dropout = dropout;
    for l in 0..layers {
        if l > 0 {
            if let Some((p, rng)) = dropout.as_mut() {
                h = tape.dropout(h, *p, *rng)?;
            }
        }
        let fw = bind_lstm(bound, &format!("{prefix}.{l}.fw"))?;
        let bw = bind_lstm(bound, &format!("{prefix}.{l}.bw"))?;
        h = blstm(tape, h, &fw, &bw)?;
    }
    Ok(h)
}
