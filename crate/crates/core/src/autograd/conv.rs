use super::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{dot, Tensor};

#[derive(Debug)]
pub(super) struct Conv1dRecord {
    input: Var,
    kernel: Var,
    bias: Var,
    stride: usize,
}

/// Output length: `T` for stride 1, `⌊T/stride⌋` otherwise.
pub fn conv1d_out_len(len: usize, stride: usize) -> usize {
    len / stride
}

/// Shape checks shared by the graph op and the plain tensor kernel.
fn check(input: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize) -> Result<(usize, usize, usize, usize, usize)> {
    input.expect_rank("conv1d", 3)?;
    kernel.expect_rank("conv1d", 3)?;
    bias.expect_rank("conv1d", 1)?;
    if stride == 0 {
        return Err(Error::invalid("conv1d: stride must be positive"));
    }
    let (b, len, cin) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (k, kcin, cout) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]);
    if kcin != cin {
        return Err(Error::shape("conv1d", "input channels", kcin, cin));
    }
    if bias.shape()[0] != cout {
        return Err(Error::shape("conv1d", "bias length", cout, bias.shape()[0]));
    }
    if k == 0 || k > len {
        return Err(Error::shape("conv1d", "kernel width (must be 1..=T)", len, k));
    }
    Ok((b, len, cin, k, cout))
}

/// Plain convolution used outside the graph (and by the graph op).
///
/// `out[b,t,o] = Σ_{k,c} x[b, t·stride + k − ⌊K/2⌋, c] · w[k,c,o] + bias[o]`
/// with zeros outside the input.
pub fn conv1d(input: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    let (b, len, cin, k, cout) = check(input, kernel, bias, stride)?;
    let out_len = conv1d_out_len(len, stride);
    let half = (k / 2) as isize;
    let (x, w) = (input.data(), kernel.data());
    let mut out = vec![0.0; b * out_len * cout];
    for bi in 0..b {
        for t in 0..out_len {
            let orow = &mut out[(bi * out_len + t) * cout..(bi * out_len + t + 1) * cout];
            orow.copy_from_slice(bias.data());
            for ki in 0..k {
                let src = (t * stride) as isize + ki as isize - half;
                if src < 0 || src as usize >= len {
                    continue;
                }
                let xrow = &x[(bi * len + src as usize) * cin..(bi * len + src as usize + 1) * cin];
                for (c, &xv) in xrow.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let wrow = &w[(ki * cin + c) * cout..(ki * cin + c + 1) * cout];
                    for (o, &wv) in orow.iter_mut().zip(wrow) {
                        *o += xv * wv;
                    }
                }
            }
        }
    }
    Tensor::new([b, out_len, cout], out)
}

impl Graph {
    /// 1-D convolution over `(B,T,Cin)` with a `(K,Cin,Cout)` kernel.
    pub fn conv1d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize) -> Result<Var> {
        let value = conv1d(self.value(input), self.value(kernel), self.value(bias), stride)?;
        let rg = self.rg(input) || self.rg(kernel) || self.rg(bias);
        Ok(self.push(
            value,
            Op::Conv1d(Conv1dRecord {
                input,
                kernel,
                bias,
                stride,
            }),
            rg,
        ))
    }
}

impl Conv1dRecord {
    pub(super) fn backward(&self, g: &Graph, gy: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let (xt, wt) = (g.value(self.input), g.value(self.kernel));
        let (b, len, cin) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
        let (k, cout) = (wt.shape()[0], wt.shape()[2]);
        let out_len = gy.shape()[1];
        let half = (k / 2) as isize;
        let (x, w, gyd) = (xt.data(), wt.data(), gy.data());

        let need_x = g.rg(self.input);
        let need_w = g.rg(self.kernel);
        let mut gx = if need_x { vec![0.0; x.len()] } else { Vec::new() };
        let mut gw = if need_w { vec![0.0; w.len()] } else { Vec::new() };

        for bi in 0..b {
            for t in 0..out_len {
                let grow = &gyd[(bi * out_len + t) * cout..(bi * out_len + t + 1) * cout];
                for ki in 0..k {
                    let src = (t * self.stride) as isize + ki as isize - half;
                    if src < 0 || src as usize >= len {
                        continue;
                    }
                    let xo = (bi * len + src as usize) * cin;
                    for c in 0..cin {
                        let wo = (ki * cin + c) * cout;
                        if need_x {
                            gx[xo + c] += dot(&w[wo..wo + cout], grow);
                        }
                        if need_w {
                            let xv = x[xo + c];
                            for (gwv, &gv) in gw[wo..wo + cout].iter_mut().zip(grow) {
                                *gwv += xv * gv;
                            }
                        }
                    }
                }
            }
        }

        let mut out = Vec::with_capacity(3);
        if need_x {
            out.push((self.input, Tensor::new(xt.shape().to_vec(), gx)?));
        }
        if need_w {
            out.push((self.kernel, Tensor::new(wt.shape().to_vec(), gw)?));
        }
        if g.rg(self.bias) {
            let mut gb = vec![0.0; cout];
            for row in gyd.chunks(cout) {
                for (a, &v) in gb.iter_mut().zip(row) {
                    *a += v;
                }
            }
            out.push((self.bias, Tensor::new([cout], gb)?));
        }
        Ok(out)
    }
}
