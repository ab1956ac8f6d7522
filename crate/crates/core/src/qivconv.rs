//! Variational convolution with QiRE-perturbed kernels.
//!
//! Each kernel element has a Gaussian posterior `N(μ, σ²)` with
//! `σ = softplus(ρ) = ln(1 + e^ρ)`. In training the kernel is
//! `W = μ + σ ⊙ ε_QiRE`; biases are variational too but use plain Gaussian
//! noise. At inference the posterior means are used and no randomness is
//! consumed. The noise is drawn outside the graph, so gradients reach only
//! `μ` and `ρ`: `∂W/∂μ = 1`, `∂W/∂ρ = softplus′(ρ) ⊙ ε`.
//!
//! The regulariser is the closed-form KL to a zero-mean Gaussian prior,
//! summed over kernel and bias elements:
//!
//! ```text
//! KL = Σ (σ² + μ²)/(2σ²_prior) − ln max(σ, ε) + ln σ_prior − ½,   ε = 1e-8
//! ```

use crate::autograd::{conv1d, softplus, softplus_inv, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::params::{Bound, ParamId, ParamStore};
use crate::qire::{qire_sample, QireConfig};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Stabiliser inside logarithms of the KL and cross-entropy terms.
pub const LOG_EPS: f64 = 1e-8;
pub const DEFAULT_PRIOR_VAR: f64 = 0.01;
pub const DEFAULT_KL_SCALE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    Identity,
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            _ => Err(Error::invalid(format!("unknown activation '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerConfig {
    pub qire: QireConfig,
    /// λ, the weight of the KL term in the total loss.
    pub kl_scale: f64,
    pub activation: Activation,
    pub stride: usize,
}

impl Default for LayerConfig {
    fn default() -> Self {
        LayerConfig {
            qire: QireConfig::default(),
            kl_scale: DEFAULT_KL_SCALE,
            activation: Activation::Relu,
            stride: 1,
        }
    }
}

impl LayerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kl_scale >= 0.0) {
            return Err(Error::invalid(format!("kl scale must be >= 0, got {}", self.kl_scale)));
        }
        if self.stride == 0 {
            return Err(Error::invalid("stride must be positive"));
        }
        Ok(())
    }
}

/// Posterior parameters of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalKernel {
    /// `(K, Cin, Cout)`
    pub mu_w: Tensor,
    pub rho_w: Tensor,
    /// `(Cout)`
    pub mu_b: Tensor,
    pub rho_b: Tensor,
    pub prior_var: f64,
}

impl VariationalKernel {
    /// Fan-based uniform means, zero bias means, and `σ = σ_prior / 2`.
    pub fn init(k: usize, cin: usize, cout: usize, prior_var: f64, rng: &mut Rng) -> Result<Self> {
        if !(prior_var > 0.0) {
            return Err(Error::invalid(format!("prior variance must be positive, got {prior_var}")));
        }
        let bound = (6.0 / (k * cin + cout) as f64).sqrt();
        let rho = softplus_inv(0.5 * prior_var.sqrt());
        Ok(VariationalKernel {
            mu_w: Tensor::from_fn([k, cin, cout], |_| bound * (2.0 * rng.uniform() - 1.0)),
            rho_w: Tensor::full([k, cin, cout], rho),
            mu_b: Tensor::zeros([cout]),
            rho_b: Tensor::full([cout], rho),
            prior_var,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.mu_w.expect_rank("variational kernel", 3)?;
        self.rho_w.expect_shape("variational kernel (rho_w)", self.mu_w.shape())?;
        self.mu_b.expect_shape("variational kernel (mu_b)", &[self.mu_w.shape()[2]])?;
        self.rho_b.expect_shape("variational kernel (rho_b)", self.mu_b.shape())?;
        if !(self.prior_var > 0.0) {
            return Err(Error::invalid(format!(
                "prior variance must be positive, got {}",
                self.prior_var
            )));
        }
        Ok(())
    }

    pub fn sigma_w(&self) -> Tensor {
        self.rho_w.map(softplus)
    }

    pub fn sigma_b(&self) -> Tensor {
        self.rho_b.map(softplus)
    }

    pub fn param_count(&self) -> usize {
        self.mu_w.numel() + self.rho_w.numel() + self.mu_b.numel() + self.rho_b.numel()
    }
}

/// Noise for one training-mode forward call.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    /// QiRE noise shaped like the kernel.
    pub kernel: Tensor,
    /// Standard normal noise for the bias.
    pub bias: Tensor,
}

/// Kernel noise first, then bias noise, from the same stream.
pub fn draw_noise(kernel_shape: &[usize], cout: usize, qire: &QireConfig, rng: &mut Rng) -> Result<NoiseDraw> {
    let kernel = qire_sample(kernel_shape, qire, rng)?.into_values();
    let bias = Tensor::new([cout], rng.normals(cout))?;
    Ok(NoiseDraw { kernel, bias })
}

/// `(W_s, b_s) = (μ_w + σ_w ⊙ ε_QiRE, μ_b + σ_b ⊙ η)`.
pub fn sample_weights(vk: &VariationalKernel, cfg: &LayerConfig, rng: &mut Rng) -> Result<(Tensor, Tensor)> {
    vk.validate()?;
    let noise = draw_noise(vk.mu_w.shape(), vk.mu_b.numel(), &cfg.qire, rng)?;
    let w = reparameterize(&vk.mu_w, &vk.rho_w, &noise.kernel)?;
    let b = reparameterize(&vk.mu_b, &vk.rho_b, &noise.bias)?;
    Ok((w, b))
}

fn reparameterize(mu: &Tensor, rho: &Tensor, eps: &Tensor) -> Result<Tensor> {
    let sigma_eps = rho.zip_map(eps, |r, e| softplus(r) * e)?;
    mu.zip_map(&sigma_eps, |m, s| m + s)
}

fn activate(x: Tensor, act: Activation) -> Tensor {
    match act {
        Activation::Identity => x,
        Activation::Relu => x.map(|v| v.max(0.0)),
        Activation::Tanh => x.map(f64::tanh),
    }
}

/// `Z = φ(conv(X; W_s) + b_s)` with freshly sampled weights.
pub fn forward_train(x: &Tensor, vk: &VariationalKernel, cfg: &LayerConfig, rng: &mut Rng) -> Result<Tensor> {
    let (w, b) = sample_weights(vk, cfg, rng)?;
    Ok(activate(conv1d(x, &w, &b, cfg.stride)?, cfg.activation))
}

/// `Ẑ = φ(conv(X; μ_w) + μ_b)`.
pub fn forward_infer(x: &Tensor, vk: &VariationalKernel, cfg: &LayerConfig) -> Result<Tensor> {
    vk.validate()?;
    Ok(activate(conv1d(x, &vk.mu_w, &vk.mu_b, cfg.stride)?, cfg.activation))
}

fn kl_terms(mu: &Tensor, rho: &Tensor, prior_var: f64) -> f64 {
    let log_prior_sd = 0.5 * prior_var.ln();
    mu.data()
        .iter()
        .zip(rho.data())
        .map(|(&m, &r)| {
            let s = softplus(r);
            (s * s + m * m) / (2.0 * prior_var) - s.max(LOG_EPS).ln() + log_prior_sd - 0.5
        })
        .sum()
}

/// Closed-form KL(q ‖ p) summed over kernel and bias elements.
pub fn kl_divergence(vk: &VariationalKernel) -> Result<f64> {
    vk.validate()?;
    Ok(kl_terms(&vk.mu_w, &vk.rho_w, vk.prior_var) + kl_terms(&vk.mu_b, &vk.rho_b, vk.prior_var))
}

/// `L_total = L_task + λ·KL`.
pub fn total_loss(task_loss: f64, kl_sum: f64, kl_scale: f64) -> f64 {
    task_loss + kl_scale * kl_sum
}

// ── Graph-level layer ────────────────────────────────────────────────

/// Handles of one layer's posterior parameters on a graph.
#[derive(Debug, Clone, Copy)]
pub struct VariationalVars {
    pub mu_w: Var,
    pub rho_w: Var,
    pub mu_b: Var,
    pub rho_b: Var,
}

impl VariationalVars {
    /// Leaves for a standalone kernel (all four trainable).
    pub fn bind(g: &mut Graph, vk: &VariationalKernel) -> Self {
        VariationalVars {
            mu_w: g.param(vk.mu_w.clone()),
            rho_w: g.param(vk.rho_w.clone()),
            mu_b: g.param(vk.mu_b.clone()),
            rho_b: g.param(vk.rho_b.clone()),
        }
    }
}

/// `μ + softplus(ρ) ⊙ ε` on the graph.
pub fn reparameterize_var(g: &mut Graph, mu: Var, rho: Var, eps: &Tensor) -> Result<Var> {
    let sigma = g.softplus(rho);
    let e = g.constant(eps.clone());
    let se = g.mul(sigma, e)?;
    g.add(mu, se)
}

/// Training-mode layer on the graph using pre-drawn noise.
pub fn conv_train_var(
    g: &mut Graph,
    x: Var,
    vars: &VariationalVars,
    noise: &NoiseDraw,
    cfg: &LayerConfig,
) -> Result<Var> {
    let w = reparameterize_var(g, vars.mu_w, vars.rho_w, &noise.kernel)?;
    let b = reparameterize_var(g, vars.mu_b, vars.rho_b, &noise.bias)?;
    let y = g.conv1d(x, w, b, cfg.stride)?;
    Ok(cfg.activation.apply(g, y))
}

/// Inference-mode layer on the graph: posterior means only.
pub fn conv_infer_var(g: &mut Graph, x: Var, vars: &VariationalVars, cfg: &LayerConfig) -> Result<Var> {
    let y = g.conv1d(x, vars.mu_w, vars.mu_b, cfg.stride)?;
    Ok(cfg.activation.apply(g, y))
}

fn kl_var_terms(g: &mut Graph, mu: Var, rho: Var, prior_var: f64) -> Result<Var> {
    let n = g.value(mu).numel() as f64;
    let sigma = g.softplus(rho);
    let s2 = g.square(sigma);
    let m2 = g.square(mu);
    let quad = g.add(s2, m2)?;
    let quad = g.scale(quad, 1.0 / (2.0 * prior_var));
    let log_sigma = g.log_floor(sigma, LOG_EPS)?;
    let diff = g.sub(quad, log_sigma)?;
    let s = g.sum(diff);
    Ok(g.add_scalar(s, n * (0.5 * prior_var.ln() - 0.5)))
}

/// KL summed over kernel and bias, as a scalar graph node.
pub fn kl_var(g: &mut Graph, vars: &VariationalVars, prior_var: f64) -> Result<Var> {
    if !(prior_var > 0.0) {
        return Err(Error::invalid(format!("prior variance must be positive, got {prior_var}")));
    }
    let kw = kl_var_terms(g, vars.mu_w, vars.rho_w, prior_var)?;
    let kb = kl_var_terms(g, vars.mu_b, vars.rho_b, prior_var)?;
    g.add(kw, kb)
}

/// `task + λ·kl` on the graph.
pub fn total_loss_var(g: &mut Graph, task: Var, kl: Var, kl_scale: f64) -> Result<Var> {
    let scaled = g.scale(kl, kl_scale);
    g.add(task, scaled)
}

/// A QiVConv layer whose parameters live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct QiVConv {
    pub mu_w: ParamId,
    pub rho_w: ParamId,
    pub mu_b: ParamId,
    pub rho_b: ParamId,
    pub prior_var: f64,
    pub cfg: LayerConfig,
    pub kernel_shape: [usize; 3],
}

impl QiVConv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        k: usize,
        cin: usize,
        cout: usize,
        prior_var: f64,
        cfg: LayerConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let vk = VariationalKernel::init(k, cin, cout, prior_var, rng)?;
        Ok(QiVConv {
            mu_w: store.add(format!("{name}.mu_w"), vk.mu_w, true),
            rho_w: store.add(format!("{name}.rho_w"), vk.rho_w, true),
            mu_b: store.add(format!("{name}.mu_b"), vk.mu_b, true),
            rho_b: store.add(format!("{name}.rho_b"), vk.rho_b, true),
            prior_var,
            cfg,
            kernel_shape: [k, cin, cout],
        })
    }

    pub fn kernel(&self, store: &ParamStore) -> VariationalKernel {
        VariationalKernel {
            mu_w: store.get(self.mu_w).clone(),
            rho_w: store.get(self.rho_w).clone(),
            mu_b: store.get(self.mu_b).clone(),
            rho_b: store.get(self.rho_b).clone(),
            prior_var: self.prior_var,
        }
    }

    pub fn vars(&self, bound: &Bound) -> VariationalVars {
        VariationalVars {
            mu_w: bound.var(self.mu_w),
            rho_w: bound.var(self.rho_w),
            mu_b: bound.var(self.mu_b),
            rho_b: bound.var(self.rho_b),
        }
    }

    pub fn draw(&self, rng: &mut Rng) -> Result<NoiseDraw> {
        draw_noise(&self.kernel_shape, self.kernel_shape[2], &self.cfg.qire, rng)
    }

    /// Samples noise from `rng` when given (training), else uses the means.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: Var, rng: Option<&mut Rng>) -> Result<Var> {
        let vars = self.vars(bound);
        match rng {
            Some(rng) => {
                let noise = self.draw(rng)?;
                conv_train_var(g, x, &vars, &noise, &self.cfg)
            }
            None => conv_infer_var(g, x, &vars, &self.cfg),
        }
    }

    pub fn kl(&self, g: &mut Graph, bound: &Bound) -> Result<Var> {
        kl_var(g, &self.vars(bound), self.prior_var)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::GradCheck;

    fn cfg_p0() -> LayerConfig {
        LayerConfig {
            qire: QireConfig {
                k: 3,
                p: 0.0,
                rescale_sqrt_n: false,
            },
            ..LayerConfig::default()
        }
    }

    fn kernel(k: usize, cin: usize, cout: usize, seed: u64) -> VariationalKernel {
        VariationalKernel::init(k, cin, cout, DEFAULT_PRIOR_VAR, &mut Rng::new(seed)).unwrap()
    }

    fn per_element_kl(mu: f64, sigma: f64, prior_var: f64) -> f64 {
        let vk = VariationalKernel {
            mu_w: Tensor::full([1, 1, 1], mu),
            rho_w: Tensor::full([1, 1, 1], softplus_inv(sigma)),
            mu_b: Tensor::full([1], mu),
            rho_b: Tensor::full([1], softplus_inv(sigma)),
            prior_var,
        };
        kl_divergence(&vk).unwrap() / 2.0
    }

    #[test]
    fn vanishing_sigma_returns_means() {
        let mut vk = kernel(3, 2, 4, 1);
        vk.rho_w = Tensor::full([3, 2, 4], -40.0);
        vk.rho_b = Tensor::full([4], -40.0);
        let (w, b) = sample_weights(&vk, &LayerConfig::default(), &mut Rng::new(5)).unwrap();
        assert!(w.max_abs_diff(&vk.mu_w) < 1e-15);
        assert!(b.max_abs_diff(&vk.mu_b) < 1e-15);
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let vk = kernel(3, 2, 4, 1);
        let a = sample_weights(&vk, &LayerConfig::default(), &mut Rng::new(5)).unwrap();
        let b = sample_weights(&vk, &LayerConfig::default(), &mut Rng::new(5)).unwrap();
        assert_eq!(a, b);
        let c = sample_weights(&vk, &LayerConfig::default(), &mut Rng::new(6)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn unit_sigma_zero_mean_kernel_has_unit_norm() {
        let mut vk = kernel(5, 3, 4, 2);
        vk.mu_w = Tensor::zeros([5, 3, 4]);
        vk.rho_w = Tensor::full([5, 3, 4], softplus_inv(1.0));
        let (w, _) = sample_weights(&vk, &cfg_p0(), &mut Rng::new(3)).unwrap();
        assert!((w.norm() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn train_approaches_infer_as_sigma_vanishes() {
        let mut vk = kernel(3, 2, 3, 4);
        vk.mu_b = Tensor::new([3], vec![0.1, -0.2, 0.3]).unwrap();
        vk.rho_w = Tensor::full([3, 2, 3], -40.0);
        vk.rho_b = Tensor::full([3], -40.0);
        let x = Tensor::from_fn([2, 8, 2], |i| (i as f64 * 0.3).sin());
        let cfg = LayerConfig::default();
        let a = forward_train(&x, &vk, &cfg, &mut Rng::new(1)).unwrap();
        let b = forward_infer(&x, &vk, &cfg).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-6);
    }

    #[test]
    fn identity_and_scaling_kernels() {
        let x = Tensor::from_fn([1, 6, 1], |i| i as f64 - 2.5);
        let mut vk = VariationalKernel {
            mu_w: Tensor::full([1, 1, 1], 1.0),
            rho_w: Tensor::full([1, 1, 1], -40.0),
            mu_b: Tensor::zeros([1]),
            rho_b: Tensor::full([1], -40.0),
            prior_var: 0.01,
        };
        let cfg = LayerConfig {
            activation: Activation::Identity,
            qire: QireConfig {
                k: 1,
                ..QireConfig::default()
            },
            ..LayerConfig::default()
        };
        let out = forward_train(&x, &vk, &cfg, &mut Rng::new(0)).unwrap();
        assert!(out.max_abs_diff(&x) < 1e-15);
        vk.mu_w = Tensor::full([1, 1, 1], 2.0);
        let out = forward_infer(&x, &vk, &cfg).unwrap();
        assert_eq!(out, x.map(|v| 2.0 * v));
        assert_eq!(out, forward_infer(&x, &vk, &cfg).unwrap());
    }

    #[test]
    fn kl_closed_form_values() {
        assert!(per_element_kl(0.0, 0.1, 0.01).abs() < 2e-7);
        assert!((per_element_kl(0.1, 0.1, 0.01) - 0.5).abs() < 1e-9);
        let mut last = per_element_kl(0.0, 0.07, 0.01);
        for i in 1..20 {
            let next = per_element_kl(0.05 * i as f64, 0.07, 0.01);
            assert!(next > last);
            last = next;
        }
        let mut bad = kernel(1, 1, 1, 0);
        bad.prior_var = 0.0;
        assert!(kl_divergence(&bad).is_err());
    }

    #[test]
    fn kl_graph_matches_closed_form() {
        let vk = kernel(3, 2, 4, 9);
        let mut g = Graph::new();
        let vars = VariationalVars::bind(&mut g, &vk);
        let kl = kl_var(&mut g, &vars, vk.prior_var).unwrap();
        assert!((g.value(kl).item() - kl_divergence(&vk).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn total_loss_arithmetic() {
        assert_eq!(total_loss(0.7, 123.0, 0.0), 0.7);
        assert!((total_loss(1.0, 2e5, 1e-5) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn graph_forward_matches_tensor_forward() {
        let vk = kernel(3, 2, 4, 11);
        let x = Tensor::from_fn([2, 7, 2], |i| (i as f64 * 0.9).cos());
        let cfg = LayerConfig::default();
        let expect = forward_train(&x, &vk, &cfg, &mut Rng::new(42)).unwrap();
        let noise = draw_noise(vk.mu_w.shape(), 4, &cfg.qire, &mut Rng::new(42)).unwrap();
        let mut g = Graph::new();
        let vars = VariationalVars::bind(&mut g, &vk);
        let xv = g.constant(x.clone());
        let y = conv_train_var(&mut g, xv, &vars, &noise, &cfg).unwrap();
        assert!(g.value(y).max_abs_diff(&expect) < 1e-14);

        let mut g = Graph::new();
        let vars = VariationalVars::bind(&mut g, &vk);
        let xv = g.constant(x.clone());
        let y = conv_infer_var(&mut g, xv, &vars, &cfg).unwrap();
        assert_eq!(g.value(y), &forward_infer(&x, &vk, &cfg).unwrap());
    }

    #[test]
    fn gradients_of_total_loss_match_finite_differences() {
        let mut rng = Rng::new(77);
        for lambda in [0.0, 1e-5, 0.5] {
            let mut vk = kernel(3, 2, 2, rng.next_u64());
            // wider posterior so the ρ path is not negligible
            vk.rho_w = Tensor::from_fn([3, 2, 2], |_| -1.0 + rng.normal());
            vk.rho_b = Tensor::from_fn([2], |_| -1.0 + rng.normal());
            let x = Tensor::from_fn([2, 6, 2], |_| rng.normal());
            let target = Tensor::from_fn([2, 6, 2], |_| rng.normal());
            let cfg = LayerConfig {
                activation: Activation::Tanh,
                qire: QireConfig {
                    k: 3,
                    p: 0.05,
                    rescale_sqrt_n: true,
                },
                ..LayerConfig::default()
            };
            let noise = draw_noise(vk.mu_w.shape(), 2, &cfg.qire, &mut rng).unwrap();
            let prior = vk.prior_var;
            let inputs = [vk.mu_w, vk.rho_w, vk.mu_b, vk.rho_b];
            let report = GradCheck::default()
                .run(&inputs, |g, v| {
                    let vars = VariationalVars {
                        mu_w: v[0],
                        rho_w: v[1],
                        mu_b: v[2],
                        rho_b: v[3],
                    };
                    let xv = g.constant(x.clone());
                    let y = conv_train_var(g, xv, &vars, &noise, &cfg)?;
                    let t = g.constant(target.clone());
                    let d = g.sub(y, t)?;
                    let d2 = g.square(d);
                    let task = g.mean(d2);
                    let kl = kl_var(g, &vars, prior)?;
                    total_loss_var(g, task, kl, lambda)
                })
                .unwrap();
            assert!(report.passed(), "λ={lambda}: {report:?}");
        }
    }

    #[test]
    fn parameter_count_is_twice_deterministic() {
        let mut store = ParamStore::new();
        let layer = QiVConv::new(&mut store, "c", 7, 3, 8, 0.01, LayerConfig::default(), &mut Rng::new(0)).unwrap();
        let deterministic = 7 * 3 * 8 + 8;
        assert_eq!(store.trainable_count(), 2 * deterministic);
        assert_eq!(layer.kernel(&store).param_count(), 2 * deterministic);
    }

    #[test]
    fn init_sigma_is_half_prior_sd() {
        let vk = kernel(7, 1, 16, 3);
        for s in vk.sigma_w().data() {
            assert!((s - 0.05).abs() < 1e-12);
        }
        let bound = (6.0f64 / 23.0).sqrt();
        assert!(vk.mu_w.data().iter().all(|m| m.abs() <= bound));
    }
}
