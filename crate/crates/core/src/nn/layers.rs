use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::nn::params::{Bound, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Sampled kernels, batch statistics, running-stat updates recorded.
    Train,
    /// Posterior means and running statistics; no randomness.
    Infer,
    /// Sampled kernels but running statistics, so only the noise differs
    /// from [`Mode::Infer`].
    TrainFrozenNorms,
}

impl Mode {
    pub fn samples_noise(self) -> bool {
        !matches!(self, Mode::Infer)
    }

    pub fn batch_stats(self) -> bool {
        matches!(self, Mode::Train)
    }
}

/// A running-statistics update produced by one training-mode norm call.
#[derive(Debug, Clone, PartialEq)]
pub struct NormUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
    pub momentum: f64,
}

impl NormUpdate {
    /// `running ← (1 − m)·running + m·batch`
    pub fn apply(&self, store: &mut ParamStore) {
        let m = self.momentum;
        for (r, &b) in store.get_mut(self.mean).data_mut().iter_mut().zip(&self.batch_mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in store.get_mut(self.var).data_mut().iter_mut().zip(&self.batch_var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

/// State shared by every layer during one forward pass.
pub struct Forward<'a> {
    pub g: &'a mut Graph,
    pub bound: &'a Bound,
    pub store: &'a ParamStore,
    pub mode: Mode,
    /// Per-pass generator; layers fork their own stream from it.
    pub rng: Option<Rng>,
    pub updates: Vec<NormUpdate>,
}

impl<'a> Forward<'a> {
    pub fn new(g: &'a mut Graph, bound: &'a Bound, store: &'a ParamStore, mode: Mode, rng: Option<Rng>) -> Self {
        Forward {
            g,
            bound,
            store,
            mode,
            rng,
            updates: Vec::new(),
        }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.bound.var(id)
    }

    /// Noise stream for layer `stream`, or `None` when nothing is sampled.
    pub fn layer_rng(&self, stream: u64) -> Option<Rng> {
        if !self.mode.samples_noise() {
            return None;
        }
        self.rng.as_ref().map(|r| r.fork(stream))
    }
}

fn uniform(shape: &[usize], bound: f64, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| bound * (2.0 * rng.uniform() - 1.0))
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.1;

    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones([channels]), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([channels]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros([channels]), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::ones([channels]), false),
            eps: Self::EPS,
            momentum: Self::MOMENTUM,
        }
    }

    pub fn forward(&self, fw: &mut Forward, x: Var) -> Result<Var> {
        let (gamma, beta) = (fw.var(self.gamma), fw.var(self.beta));
        if fw.mode.batch_stats() {
            let (y, stats) = fw.g.batch_norm_train(x, gamma, beta, self.eps)?;
            fw.updates.push(NormUpdate {
                mean: self.running_mean,
                var: self.running_var,
                batch_mean: stats.mean,
                batch_var: stats.var,
                momentum: self.momentum,
            });
            Ok(y)
        } else {
            let store = fw.store;
            fw.g.batch_norm_infer(
                x,
                gamma,
                beta,
                store.get(self.running_mean).data(),
                store.get(self.running_var).data(),
                self.eps,
            )
        }
    }
}

/// Deterministic pointwise (K = 1) convolution.
#[derive(Debug, Clone)]
pub struct Conv1x1 {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv1x1 {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut Rng) -> Self {
        let bound = (6.0 / (cin + cout) as f64).sqrt();
        Conv1x1 {
            w: store.add(format!("{name}.w"), uniform(&[1, cin, cout], bound, rng), true),
            b: store.add(format!("{name}.b"), Tensor::zeros([cout]), true),
        }
    }

    pub fn forward(&self, fw: &mut Forward, x: Var) -> Result<Var> {
        let (w, b) = (fw.var(self.w), fw.var(self.b));
        fw.g.conv1d(x, w, b, 1)
    }
}

/// Single-layer unidirectional LSTM returning the full hidden sequence.
#[derive(Debug, Clone)]
pub struct Lstm {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        // gate order i, f, g, o; forget bias starts at 1
        let bias = Tensor::from_fn([4 * hidden], |j| if (hidden..2 * hidden).contains(&j) { 1.0 } else { 0.0 });
        Lstm {
            w_x: store.add(format!("{name}.w_x"), uniform(&[input, 4 * hidden], bound, rng), true),
            w_h: store.add(format!("{name}.w_h"), uniform(&[hidden, 4 * hidden], bound, rng), true),
            bias: store.add(format!("{name}.bias"), bias, true),
            hidden,
        }
    }

    pub fn forward(&self, fw: &mut Forward, x: Var) -> Result<Var> {
        let (wx, wh, b) = (fw.var(self.w_x), fw.var(self.w_h), fw.var(self.bias));
        fw.g.lstm(x, wx, wh, b, None, None)
    }
}

/// Affine map on `(B, in)` rows.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut Rng) -> Self {
        let bound = (6.0 / (input + output) as f64).sqrt();
        Dense {
            w: store.add(format!("{name}.w"), uniform(&[input, output], bound, rng), true),
            b: store.add(format!("{name}.b"), Tensor::zeros([output]), true),
        }
    }

    pub fn forward(&self, fw: &mut Forward, x: Var) -> Result<Var> {
        let (w, b) = (fw.var(self.w), fw.var(self.b));
        let y = fw.g.matmul(x, w)?;
        fw.g.add(y, b)
    }
}
