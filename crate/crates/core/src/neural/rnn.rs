//! Fused recurrent layers with hand-written backpropagation through time.
//!
//! Gate layouts follow the common convention: LSTM `[i, f, g, o]`, GRU
//! `[r, z, n]` with the reset gate applied to the recurrent candidate term.

use super::tape::{sigmoid_scalar as sigmoid, Function, Tape, Var};
use super::tensor::{axpy, Tensor};
use crate::error::{Error, Result};

/// Weights of one LSTM direction.
#[derive(Debug, Clone, Copy)]
pub struct LstmWeights {
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
}

/// Weights of one GRU layer.
#[derive(Debug, Clone, Copy)]
pub struct GruWeights {
    pub w_ih: Var,
    pub w_hh: Var,
    pub b_ih: Var,
    pub b_hh: Var,
}

struct LstmFn {
    reverse: bool,
    /// Post-activation gates per step, `[T][4H]` in time order.
    gates: Tensor,
    cells: Tensor,
    tanh_cells: Tensor,
}

fn step_order(t_len: usize, reverse: bool) -> Vec<usize> {
    if reverse {
        (0..t_len).rev().collect()
    } else {
        (0..t_len).collect()
    }
}

/// One LSTM direction over `x: [T][D]` with zero initial state; returns
/// `[T][H]` in time order.
pub fn lstm(tape: &mut Tape, x: Var, w: &LstmWeights, reverse: bool) -> Result<Var> {
    let (xv, wih, whh, b) = (tape.value(x), tape.value(w.w_ih), tape.value(w.w_hh), tape.value(w.bias));
    let h4 = wih.cols();
    let h = whh.rows();
    if h4 != 4 * h || whh.cols() != h4 || xv.cols() != wih.rows() || b.shape() != [1, h4] {
        return Err(Error::Shape(format!(
            "lstm: x {:?}, w_ih {:?}, w_hh {:?}, b {:?}",
            xv.shape(),
            wih.shape(),
            whh.shape(),
            b.shape()
        )));
    }
    let t_len = xv.rows();
    let mut pre = xv.matmul(wih);
    for t in 0..t_len {
        axpy(1.0, b.data(), pre.row_mut(t));
    }
    let mut gates = Tensor::zeros(t_len, h4);
    let mut cells = Tensor::zeros(t_len, h);
    let mut tanh_cells = Tensor::zeros(t_len, h);
    let mut out = Tensor::zeros(t_len, h);
    let mut h_prev = vec![0.0; h];
    let mut c_prev = vec![0.0; h];
    for t in step_order(t_len, reverse) {
        let mut a = pre.row(t).to_vec();
        for (j, &hv) in h_prev.iter().enumerate() {
            if hv != 0.0 {
                axpy(hv, whh.row(j), &mut a);
            }
        }
        let g = gates.row_mut(t);
        for j in 0..h {
            g[j] = sigmoid(a[j]);
            g[h + j] = sigmoid(a[h + j]);
            g[2 * h + j] = a[2 * h + j].tanh();
            g[3 * h + j] = sigmoid(a[3 * h + j]);
        }
        for j in 0..h {
            let c = g[h + j] * c_prev[j] + g[j] * g[2 * h + j];
            let tc = c.tanh();
            cells.row_mut(t)[j] = c;
            tanh_cells.row_mut(t)[j] = tc;
            out.row_mut(t)[j] = g[3 * h + j] * tc;
        }
        h_prev.copy_from_slice(out.row(t));
        c_prev.copy_from_slice(cells.row(t));
    }
    let func = LstmFn {
        reverse,
        gates,
        cells,
        tanh_cells,
    };
    Ok(tape.custom(&[x, w.w_ih, w.w_hh, w.bias], out, Box::new(func)))
}

impl Function for LstmFn {
    fn name(&self) -> &'static str {
        "lstm"
    }

    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor], output: &Tensor) -> Vec<Option<Tensor>> {
        let (x, wih, whh) = (inputs[0], inputs[1], inputs[2]);
        let t_len = x.rows();
        let h = whh.rows();
        let order = step_order(t_len, self.reverse);
        let mut d_pre = Tensor::zeros(t_len, 4 * h);
        // Row t holds h_{prev(t)} so that dW_hh = H_prev^T dA.
        let mut h_prev_rows = Tensor::zeros(t_len, h);
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        for (pos, &t) in order.iter().enumerate().rev() {
            let prev = if pos > 0 { Some(order[pos - 1]) } else { None };
            if let Some(p) = prev {
                h_prev_rows.row_mut(t).copy_from_slice(output.row(p));
            }
            let g = self.gates.row(t);
            let tc = self.tanh_cells.row(t);
            let da = d_pre.row_mut(t);
            for j in 0..h {
                let dh = grad_out.row(t)[j] + dh_next[j];
                let (i, f, gg, o) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
                let dc = dh * o * (1.0 - tc[j] * tc[j]) + dc_next[j];
                let c_prev = prev.map_or(0.0, |p| self.cells.row(p)[j]);
                da[j] = dc * gg * i * (1.0 - i);
                da[h + j] = dc * c_prev * f * (1.0 - f);
                da[2 * h + j] = dc * i * (1.0 - gg * gg);
                da[3 * h + j] = dh * tc[j] * o * (1.0 - o);
                dc_next[j] = dc * f;
            }
            for (j, d) in dh_next.iter_mut().enumerate() {
                *d = super::tensor::dot(whh.row(j), da);
            }
        }
        let dx = d_pre.matmul_nt(wih);
        let dwih = x.matmul_tn(&d_pre);
        let dwhh = h_prev_rows.matmul_tn(&d_pre);
        let db = d_pre.sum_rows();
        vec![Some(dx), Some(dwih), Some(dwhh), Some(db)]
    }
}

/// Forward and backward LSTM passes concatenated to `[T][2H]`.
pub fn blstm(tape: &mut Tape, x: Var, fw: &LstmWeights, bw: &LstmWeights) -> Result<Var> {
    let f = lstm(tape, x, fw, false)?;
    let b = lstm(tape, x, bw, true)?;
    tape.concat_cols(&[f, b])
}

struct GruFn {
    r: Tensor,
    z: Tensor,
    n: Tensor,
    /// Recurrent candidate pre-activation `h W_hn + b_hn`.
    gh_n: Tensor,
}

/// Unidirectional GRU over `x: [T][D]` from `h0: [1][H]`; returns `[T][H]`.
/// Output row `t` depends only on rows `0..=t` of `x`.
pub fn gru(tape: &mut Tape, x: Var, h0: Var, w: &GruWeights) -> Result<Var> {
    let (xv, h0v) = (tape.value(x), tape.value(h0));
    let (wih, whh, bih, bhh) = (tape.value(w.w_ih), tape.value(w.w_hh), tape.value(w.b_ih), tape.value(w.b_hh));
    let h = whh.rows();
    let h3 = 3 * h;
    if wih.cols() != h3
        || whh.cols() != h3
        || xv.cols() != wih.rows()
        || h0v.shape() != [1, h]
        || bih.shape() != [1, h3]
        || bhh.shape() != [1, h3]
    {
        return Err(Error::Shape(format!(
            "gru: x {:?}, h0 {:?}, w_ih {:?}, w_hh {:?}",
            xv.shape(),
            h0v.shape(),
            wih.shape(),
            whh.shape()
        )));
    }
    let t_len = xv.rows();
    let mut gi = xv.matmul(wih);
    for t in 0..t_len {
        axpy(1.0, bih.data(), gi.row_mut(t));
    }
    let mut r = Tensor::zeros(t_len, h);
    let mut z = Tensor::zeros(t_len, h);
    let mut n = Tensor::zeros(t_len, h);
    let mut gh_n = Tensor::zeros(t_len, h);
    let mut out = Tensor::zeros(t_len, h);
    let mut h_prev = h0v.data().to_vec();
    for t in 0..t_len {
        let mut gh = bhh.data().to_vec();
        for (j, &hv) in h_prev.iter().enumerate() {
            if hv != 0.0 {
                axpy(hv, whh.row(j), &mut gh);
            }
        }
        let a = gi.row(t);
        for j in 0..h {
            let rj = sigmoid(a[j] + gh[j]);
            let zj = sigmoid(a[h + j] + gh[h + j]);
            let nj = (a[2 * h + j] + rj * gh[2 * h + j]).tanh();
            r.row_mut(t)[j] = rj;
            z.row_mut(t)[j] = zj;
            n.row_mut(t)[j] = nj;
            gh_n.row_mut(t)[j] = gh[2 * h + j];
            out.row_mut(t)[j] = (1.0 - zj) * nj + zj * h_prev[j];
        }
        h_prev.copy_from_slice(out.row(t));
    }
    let func = GruFn { r, z, n, gh_n };
    Ok(tape.custom(&[x, h0, w.w_ih, w.w_hh, w.b_ih, w.b_hh], out, Box::new(func)))
}

impl Function for GruFn {
    fn name(&self) -> &'static str {
        "gru"
    }

    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor], output: &Tensor) -> Vec<Option<Tensor>> {
        let (x, h0, wih, whh) = (inputs[0], inputs[1], inputs[2], inputs[3]);
        let t_len = x.rows();
        let h = whh.rows();
        let mut d_gi = Tensor::zeros(t_len, 3 * h);
        let mut d_gh = Tensor::zeros(t_len, 3 * h);
        let mut h_prev_rows = Tensor::zeros(t_len, h);
        let mut dh_next = vec![0.0; h];
        let mut dgh_row = vec![0.0; 3 * h];
        for t in (0..t_len).rev() {
            let hp: &[f64] = if t > 0 { output.row(t - 1) } else { h0.data() };
            h_prev_rows.row_mut(t).copy_from_slice(hp);
            let (r, z, n, ghn) = (self.r.row(t), self.z.row(t), self.n.row(t), self.gh_n.row(t));
            let dgi = d_gi.row_mut(t);
            let mut dh_direct = vec![0.0; h];
            for j in 0..h {
                let dh = grad_out.row(t)[j] + dh_next[j];
                let dn = dh * (1.0 - z[j]);
                let dz = dh * (hp[j] - n[j]);
                dh_direct[j] = dh * z[j];
                let dan = dn * (1.0 - n[j] * n[j]);
                let dar = dan * ghn[j] * r[j] * (1.0 - r[j]);
                let daz = dz * z[j] * (1.0 - z[j]);
                dgi[j] = dar;
                dgi[h + j] = daz;
                dgi[2 * h + j] = dan;
                dgh_row[j] = dar;
                dgh_row[h + j] = daz;
                dgh_row[2 * h + j] = dan * r[j];
            }
            d_gh.row_mut(t).copy_from_slice(&dgh_row);
            for j in 0..h {
                dh_next[j] = dh_direct[j] + super::tensor::dot(whh.row(j), &dgh_row);
            }
        }
        let dx = d_gi.matmul_nt(wih);
        let dwih = x.matmul_tn(&d_gi);
        let dwhh = h_prev_rows.matmul_tn(&d_gh);
        let dbih = d_gi.sum_rows();
        let dbhh = d_gh.sum_rows();
        let dh0 = Tensor::from_vec(1, h, dh_next).expect("hidden size");
        vec![Some(dx), Some(dh0), Some(dwih), Some(dwhh), Some(dbih), Some(dbhh)]
    }
}
