//! Batch normalisation over every axis except the last (channels).

use super::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-channel statistics of one training-mode batch.
///
/// `var` is the unbiased estimate used for running averages; the
/// normalisation itself uses the biased variance.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug)]
pub(super) struct BatchNormRecord {
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    /// Statistics came from the batch itself (and so depend on `x`).
    batch_stats: bool,
}

fn check(g: &Graph, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<usize> {
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("batch_norm: eps must be positive, got {eps}")));
    }
    let shape = g.shape(x);
    let c = *shape.last().ok_or(Error::Rank {
        op: "batch_norm",
        expected: 2,
        got: 0,
    })?;
    for (name, v) in [("gamma", gamma), ("beta", beta)] {
        let s = g.shape(v);
        if s != [c] {
            return Err(Error::shape("batch_norm", name, c, s.iter().product()));
        }
    }
    Ok(c)
}

impl Graph {
    fn batch_norm_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        c: usize,
        mean: &[f64],
        inv_std: Vec<f64>,
        batch_stats: bool,
    ) -> Result<Var> {
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(xd.len());
        let mut out = Vec::with_capacity(xd.len());
        for row in xd.chunks(c) {
            for ch in 0..c {
                let h = (row[ch] - mean[ch]) * inv_std[ch];
                xhat.push(h);
                out.push(gd[ch] * h + bd[ch]);
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            value,
            Op::BatchNorm(BatchNormRecord {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            }),
            rg,
        ))
    }

    /// Training-mode batch norm: normalises with the batch's own statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let c = check(self, x, gamma, beta, eps)?;
        let xd = self.value(x).data();
        let n = xd.len() / c;
        if n == 0 {
            return Err(Error::invalid("batch_norm: empty batch"));
        }
        let mut mean = vec![0.0; c];
        for row in xd.chunks(c) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut ss = vec![0.0; c];
        for row in xd.chunks(c) {
            for ((s, &v), &m) in ss.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let inv_std: Vec<f64> = ss.iter().map(|s| 1.0 / (s / n as f64 + eps).sqrt()).collect();
        let unbiased: Vec<f64> = ss.iter().map(|s| s / (n.max(2) - 1) as f64).collect();
        let v = self.batch_norm_apply(x, gamma, beta, c, &mean, inv_std, true)?;
        Ok((v, BatchStats { mean, var: unbiased }))
    }

    /// Inference-mode batch norm: a fixed per-channel affine map built from
    /// running statistics.
    pub fn batch_norm_infer(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let c = check(self, x, gamma, beta, eps)?;
        if running_mean.len() != c {
            return Err(Error::shape("batch_norm", "running mean", c, running_mean.len()));
        }
        if running_var.len() != c {
            return Err(Error::shape("batch_norm", "running variance", c, running_var.len()));
        }
        let inv_std = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.batch_norm_apply(x, gamma, beta, c, running_mean, inv_std, false)
    }
}

impl BatchNormRecord {
    pub(super) fn backward(&self, g: &Graph, gy: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let c = self.inv_std.len();
        let gamma = g.value(self.gamma).data();
        let gyd = gy.data();
        let n = gyd.len() / c;

        let mut sum_gy = vec![0.0; c];
        let mut sum_gy_xhat = vec![0.0; c];
        for (grow, hrow) in gyd.chunks(c).zip(self.xhat.chunks(c)) {
            for ch in 0..c {
                sum_gy[ch] += grow[ch];
                sum_gy_xhat[ch] += grow[ch] * hrow[ch];
            }
        }

        let mut out = Vec::with_capacity(3);
        if g.rg(self.x) {
            let mut gx = Vec::with_capacity(gyd.len());
            let nf = n as f64;
            for (grow, hrow) in gyd.chunks(c).zip(self.xhat.chunks(c)) {
                for ch in 0..c {
                    let scale = gamma[ch] * self.inv_std[ch];
                    let v = if self.batch_stats {
                        scale * (grow[ch] - sum_gy[ch] / nf - hrow[ch] * sum_gy_xhat[ch] / nf)
                    } else {
                        scale * grow[ch]
                    };
                    gx.push(v);
                }
            }
            out.push((self.x, Tensor::new(gy.shape().to_vec(), gx)?));
        }
        if g.rg(self.gamma) {
            out.push((self.gamma, Tensor::new([c], sum_gy_xhat)?));
        }
        if g.rg(self.beta) {
            out.push((self.beta, Tensor::new([c], sum_gy)?));
        }
        Ok(out)
    }
}
