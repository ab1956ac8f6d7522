//! Fused single-layer LSTM over a full `(B,T,C)` sequence.
//!
//! Gate blocks in the `4H` axis are ordered input, forget, cell candidate,
//! output:
//!
//! ```text
//! z  = x_t·W_x + h_{t-1}·W_h + b
//! i  = σ(z_i)   f = σ(z_f)   g = tanh(z_g)   o = σ(z_o)
//! c_t = f ⊙ c_{t-1} + i ⊙ g
//! h_t = o ⊙ tanh(c_t)
//! ```
//!
//! Internally the recurrence runs time-major `(T,B,·)` so that every step
//! reads and writes contiguous rows.

use super::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};

#[derive(Debug)]
pub(super) struct LstmRecord {
    x: Var,
    w_x: Var,
    w_h: Var,
    bias: Var,
    h0: Vec<f64>,
    c0: Vec<f64>,
    /// Activated gates, `(T,B,4H)`.
    gates: Vec<f64>,
    /// Cell states, `(T,B,H)`.
    cells: Vec<f64>,
    /// Hidden states, `(T,B,H)`.
    hidden: Vec<f64>,
}

struct Dims {
    b: usize,
    t: usize,
    c: usize,
    h: usize,
}

fn check(g: &Graph, x: Var, w_x: Var, w_h: Var, bias: Var) -> Result<Dims> {
    let xs = g.value(x);
    xs.expect_rank("lstm", 3)?;
    let (b, t, c) = (xs.shape()[0], xs.shape()[1], xs.shape()[2]);
    let wx = g.value(w_x);
    wx.expect_rank("lstm", 2)?;
    if wx.shape()[0] != c {
        return Err(Error::shape("lstm", "input weight rows (input channels)", c, wx.shape()[0]));
    }
    let h4 = wx.shape()[1];
    if h4 == 0 || h4 % 4 != 0 {
        return Err(Error::invalid(format!("lstm: input weight has {h4} columns, expected 4·hidden")));
    }
    let h = h4 / 4;
    g.value(w_h).expect_shape("lstm", &[h, h4])?;
    g.value(bias).expect_shape("lstm", &[h4])?;
    Ok(Dims { b, t, c, h })
}

/// `(A,B,n) → (B,A,n)` for a contiguous buffer.
fn swap_leading(src: &[f64], a: usize, b: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for i in 0..a {
        for j in 0..b {
            let s = (i * b + j) * n;
            let d = (j * a + i) * n;
            out[d..d + n].copy_from_slice(&src[s..s + n]);
        }
    }
    out
}

/// Branch-free logistic; saturates cleanly to 0 or 1.
#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `tanh` through one `exp`; exact to a few ulps in absolute terms.
#[inline]
fn tanh(x: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * x).exp() + 1.0)
}

impl Graph {
    /// Runs the recurrence over every step and returns the hidden sequence
    /// `(B,T,H)`. `h0`/`c0` default to zeros and are treated as constants.
    pub fn lstm(
        &mut self,
        x: Var,
        w_x: Var,
        w_h: Var,
        bias: Var,
        h0: Option<&Tensor>,
        c0: Option<&Tensor>,
    ) -> Result<Var> {
        let Dims { b, t, c, h } = check(self, x, w_x, w_h, bias)?;
        let init = |s: Option<&Tensor>| -> Result<Vec<f64>> {
            match s {
                Some(s) => {
                    s.expect_shape("lstm", &[b, h])?;
                    Ok(s.data().to_vec())
                }
                None => Ok(vec![0.0; b * h]),
            }
        };
        let (h0, c0) = (init(h0)?, init(c0)?);
        let h4 = 4 * h;
        let bh = b * h;

        // input projection for every step at once
        let x_tm = swap_leading(self.value(x).data(), b, t, c);
        let bd = self.value(bias).data();
        let mut gates = Vec::with_capacity(t * b * h4);
        for _ in 0..t * b {
            gates.extend_from_slice(bd);
        }
        gemm_acc(&x_tm, self.value(w_x).data(), &mut gates, t * b, c, h4);

        let wh = self.value(w_h).data();
        let mut cells = vec![0.0; t * bh];
        let mut hidden = vec![0.0; t * bh];
        for ti in 0..t {
            let (h_prev, c_prev) = if ti == 0 {
                (&h0[..], &c0[..])
            } else {
                (&hidden[(ti - 1) * bh..ti * bh], &cells[(ti - 1) * bh..ti * bh])
            };
            let z_t = &mut gates[ti * b * h4..(ti + 1) * b * h4];
            gemm_acc(h_prev, wh, z_t, b, h, h4);
            let mut c_t = vec![0.0; bh];
            let mut h_t = vec![0.0; bh];
            for bi in 0..b {
                let z = &mut z_t[bi * h4..(bi + 1) * h4];
                for j in 0..h {
                    let i = sigmoid(z[j]);
                    let f = sigmoid(z[h + j]);
                    let gc = tanh(z[2 * h + j]);
                    let o = sigmoid(z[3 * h + j]);
                    z[j] = i;
                    z[h + j] = f;
                    z[2 * h + j] = gc;
                    z[3 * h + j] = o;
                    let cell = f * c_prev[bi * h + j] + i * gc;
                    c_t[bi * h + j] = cell;
                    h_t[bi * h + j] = o * tanh(cell);
                }
            }
            cells[ti * bh..(ti + 1) * bh].copy_from_slice(&c_t);
            hidden[ti * bh..(ti + 1) * bh].copy_from_slice(&h_t);
        }

        let value = Tensor::new([b, t, h], swap_leading(&hidden, t, b, h))?;
        let rg = self.rg(x) || self.rg(w_x) || self.rg(w_h) || self.rg(bias);
        Ok(self.push(
            value,
            Op::Lstm(Box::new(LstmRecord {
                x,
                w_x,
                w_h,
                bias,
                h0,
                c0,
                gates,
                cells,
                hidden,
            })),
            rg,
        ))
    }
}

impl LstmRecord {
    pub(super) fn backward(&self, g: &Graph, y: &Tensor, gy: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let xt = g.value(self.x);
        let (b, t, c) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
        let h = y.shape()[2];
        let (h4, bh) = (4 * h, b * h);
        let wh = g.value(self.w_h).data();
        let gy_tm = swap_leading(gy.data(), b, t, h);

        // pre-activation gradients for every step, time-major
        let mut dz = vec![0.0; t * b * h4];
        let mut dh_next = vec![0.0; bh];
        let mut dc_next = vec![0.0; bh];
        for ti in (0..t).rev() {
            let c_prev = if ti == 0 {
                &self.c0[..]
            } else {
                &self.cells[(ti - 1) * bh..ti * bh]
            };
            let dz_t = &mut dz[ti * b * h4..(ti + 1) * b * h4];
            for bi in 0..b {
                let gate = &self.gates[(ti * b + bi) * h4..(ti * b + bi + 1) * h4];
                let dzr = &mut dz_t[bi * h4..(bi + 1) * h4];
                for j in 0..h {
                    let k = bi * h + j;
                    let (i, f, gc, o) = (gate[j], gate[h + j], gate[2 * h + j], gate[3 * h + j]);
                    let tc = tanh(self.cells[ti * bh + k]);
                    let dh = gy_tm[ti * bh + k] + dh_next[k];
                    let dc = dh * o * (1.0 - tc * tc) + dc_next[k];
                    dzr[j] = dc * gc * i * (1.0 - i);
                    dzr[h + j] = dc * c_prev[k] * f * (1.0 - f);
                    dzr[2 * h + j] = dc * i * (1.0 - gc * gc);
                    dzr[3 * h + j] = dh * tc * o * (1.0 - o);
                    dc_next[k] = dc * f;
                }
            }
            dh_next.iter_mut().for_each(|v| *v = 0.0);
            // dh_{t-1} = dz_t · W_hᵀ
            gemm_nt_acc(dz_t, wh, &mut dh_next, b, h4, h);
        }

        let mut out = Vec::with_capacity(4);
        let rows = t * b;
        if g.rg(self.x) || g.rg(self.w_x) {
            let x_tm = swap_leading(xt.data(), b, t, c);
            if g.rg(self.x) {
                let mut gx = vec![0.0; rows * c];
                gemm_nt_acc(&dz, g.value(self.w_x).data(), &mut gx, rows, h4, c);
                out.push((self.x, Tensor::new([b, t, c], swap_leading(&gx, t, b, c))?));
            }
            if g.rg(self.w_x) {
                let mut gw = vec![0.0; c * h4];
                gemm_tn_acc(&x_tm, &dz, &mut gw, rows, c, h4);
                out.push((self.w_x, Tensor::new([c, h4], gw)?));
            }
        }
        if g.rg(self.w_h) {
            // h_{t-1} for every step is h0 followed by all but the last hidden state
            let mut gw = vec![0.0; h * h4];
            gemm_tn_acc(&self.h0, &dz[..b * h4], &mut gw, b, h, h4);
            if t > 1 {
                gemm_tn_acc(&self.hidden[..(t - 1) * bh], &dz[b * h4..], &mut gw, (t - 1) * b, h, h4);
            }
            out.push((self.w_h, Tensor::new([h, h4], gw)?));
        }
        if g.rg(self.bias) {
            let mut gb = vec![0.0; h4];
            for row in dz.chunks(h4) {
                for (a, &v) in gb.iter_mut().zip(row) {
                    *a += v;
                }
            }
            out.push((self.bias, Tensor::new([h4], gb)?));
        }
        Ok(out)
    }
}
