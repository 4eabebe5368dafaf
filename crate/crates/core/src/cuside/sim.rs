use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::{add_gru_params, add_linear_params, bind_gru, gru, linear, BoundParams, ModelParams, Tape, Tensor, Var};

/// Causal future-context simulator: stacked GRUs over the enhanced core
/// frames of each chunk, and a feed-forward head from the last hidden state
/// to `right_frames` feature frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimNetConfig {
    pub layers: usize,
    pub hidden: usize,
    pub right_frames: usize,
    pub feature_dim: usize,
}

impl Default for SimNetConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            hidden: 256,
            right_frames: 40,
            feature_dim: 80,
        }
    }
}

impl SimNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.right_frames == 0 || self.feature_dim == 0 {
            return Err(Error::InvalidConfig("simulator sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn init_params<R: Rng>(&self, params: &mut ModelParams, rng: &mut R) -> Result<()> {
        self.validate()?;
        for l in 0..self.layers {
            let input = if l == 0 { self.feature_dim } else { self.hidden };
            add_gru_params(params, &format!("sim.gru.{l}"), input, self.hidden, rng)?;
        }
        add_linear_params(params, "sim.head", self.hidden, self.right_frames * self.feature_dim, rng)
    }

    /// All-zero recurrent state, one `[1][hidden]` row per layer.
    pub fn zero_state(&self) -> SimState {
        SimState {
            hidden: vec![Tensor::zeros(1, self.hidden); self.layers],
        }
    }
}

/// Recurrent state carried from one chunk to the next.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub hidden: Vec<Tensor>,
}

impl SimState {
    pub fn to_tape(&self, tape: &mut Tape) -> Vec<Var> {
        self.hidden.iter().map(|h| tape.constant(h.clone())).collect()
    }

    pub fn from_tape(tape: &Tape, vars: &[Var]) -> Self {
        Self {
            hidden: vars.iter().map(|v| tape.value(*v).clone()).collect(),
        }
    }
}

/// Consume one chunk `[C][feature_dim]` from state `h_in` and predict the
/// next `right_frames` frames. Returns the prediction and the new state.
pub fn simulate_future(
    tape: &mut Tape,
    bound: &BoundParams,
    cfg: &SimNetConfig,
    chunk: Var,
    h_in: &[Var],
) -> Result<(Var, Vec<Var>)> {
    let [rows, cols] = tape.value(chunk).shape();
    if cols != cfg.feature_dim || rows == 0 {
        return Err(Error::Shape(format!(
            "simulator input [{rows}, {cols}], expected [C>0, {}]",
            cfg.feature_dim
        )));
    }
    if h_in.len() != cfg.layers {
        return Err(Error::Shape(format!("simulator state has {} layers, expected {}", h_in.len(), cfg.layers)));
    }
    let mut x = chunk;
    let mut h_out = Vec::with_capacity(cfg.layers);
    for (l, h0) in h_in.iter().enumerate() {
        let w = bind_gru(bound, &format!("sim.gru.{l}"))?;
        x = gru(tape, x, *h0, &w)?;
        h_out.push(tape.rows(x, rows - 1, rows)?);
    }
    let last = *h_out.last().expect("at least one layer");
    let flat = linear(tape, last, bound.get("sim.head.w")?, bound.get("sim.head.b")?)?;
    let sim = tape.reshape(flat, cfg.right_frames, cfg.feature_dim)?;
    Ok((sim, h_out))
}

/// Mean absolute error over the first `valid_rows` rows of `target`; `None`
/// when nothing is valid (the caller counts those).
pub fn simulation_loss(tape: &mut Tape, sim: Var, target: &Tensor, valid_rows: usize) -> Result<Option<Var>> {
    if tape.value(sim).shape() != target.shape() {
        return Err(Error::Shape(format!(
            "simulated {:?} vs target {:?}",
            tape.value(sim).shape(),
            target.shape()
        )));
    }
    if valid_rows == 0 {
        return Ok(None);
    }
    let cols = target.cols();
    let mask: Vec<bool> = (0..target.len()).map(|i| i / cols < valid_rows).collect();
    tape.l1_loss(sim, target, Some(&mask)).map(Some)
}

/// `L_utt + L_chunk + alpha * L_simu`.
pub fn total_loss(l_utt: f64, l_chunk: f64, l_simu: f64, alpha: f64) -> f64 {
    l_utt + l_chunk + alpha * l_simu
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::gradcheck::{check_gradients, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> SimNetConfig {
        SimNetConfig {
            layers: 2,
            hidden: 3,
            right_frames: 2,
            feature_dim: 2,
        }
    }

    fn run(p: &ModelParams, cfg: &SimNetConfig, x: &Tensor, st: &SimState) -> (Tensor, SimState) {
        let mut tape = Tape::new();
        let b = p.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let h = st.to_tape(&mut tape);
        let (s, h) = simulate_future(&mut tape, &b, cfg, xv, &h).unwrap();
        (tape.value(s).clone(), SimState::from_tape(&tape, &h))
    }

    #[test]
    fn total_loss_weighting() {
        assert!((total_loss(1.0, 2.0, 4.0, 0.975) - 6.9).abs() < 1e-12);
        assert_eq!(total_loss(1.5, 2.5, 7.0, 0.0), 4.0);
        assert_eq!(total_loss(1.5, 2.5, 0.0, 0.3), total_loss(1.5, 2.5, 0.0, 0.9));
    }

    #[test]
    fn loss_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_tensor(3, 4, 1.0, &mut rng);
        let mut tape = Tape::new();
        let v = tape.constant(a.clone());
        let l = simulation_loss(&mut tape, v, &a, 3).unwrap().unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let shifted = a.map(|x| x - 0.25);
        let l = simulation_loss(&mut tape, v, &shifted, 2).unwrap().unwrap();
        assert!((tape.value(l).item() - 0.25).abs() < 1e-12);
        assert!(simulation_loss(&mut tape, v, &a, 0).unwrap().is_none());
    }

    #[test]
    fn state_threading_and_causality() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = ModelParams::new();
        cfg.init_params(&mut p, &mut rng).unwrap();
        let x = random_tensor(6, 2, 1.0, &mut rng);
        let (a, sa) = run(&p, &cfg, &x.slice_rows(0, 3), &cfg.zero_state());
        let (b, _) = run(&p, &cfg, &x.slice_rows(3, 6), &sa);
        // Restarting from a saved copy of the state gives the same output.
        let saved = sa.clone();
        let (b2, _) = run(&p, &cfg, &x.slice_rows(3, 6), &saved);
        assert_eq!(b, b2);
        let mut y = x.clone();
        y.row_mut(5).iter_mut().for_each(|v| *v += 1.0);
        let (a2, _) = run(&p, &cfg, &y.slice_rows(0, 3), &cfg.zero_state());
        assert_eq!(a, a2);
        assert_eq!(a.shape(), [2, 2]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ModelParams::new();
        cfg.init_params(&mut p, &mut rng).unwrap();
        let names: Vec<String> = p.names().cloned().collect();
        let mut leaves: Vec<Tensor> = names.iter().map(|n| p.get(n).unwrap().clone()).collect();
        leaves.push(random_tensor(4, 2, 1.0, &mut rng));
        let target = random_tensor(2, 2, 1.0, &mut rng);
        let nn = names.len();
        check_gradients(&leaves, 1e-3, |t, v| {
            let b = BoundParams::from_vars(names.iter().cloned().zip(v[..nn].iter().copied()).collect());
            let h = cfg.zero_state().to_tape(t);
            let first = t.rows(v[nn], 0, 2)?;
            let (_, h) = simulate_future(t, &b, &cfg, first, &h)?;
            let second = t.rows(v[nn], 2, 4)?;
            let (s, _) = simulate_future(t, &b, &cfg, second, &h)?;
            let sq = t.mul(s, s)?;
            let l1 = simulation_loss(t, s, &target, 1)?.expect("valid rows");
            let a = t.sum(sq);
            t.add(a, l1)
        })
        .unwrap();
    }
}
