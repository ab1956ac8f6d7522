use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::layers::{BatchNorm, Conv1x1, Dense, Forward, Lstm, Mode, NormUpdate};
use crate::nn::params::{Bound, ParamStore};
use crate::qivconv::{Activation, LayerConfig, QiVConv, DEFAULT_PRIOR_VAR};
use crate::rng::Rng;
use crate::tensor::Tensor;

const INIT_STREAM: u64 = 0x1417;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSpec {
    pub filters: usize,
    pub kernel: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub blocks: Vec<BlockSpec>,
    /// Width-2 max pooling over time between consecutive blocks.
    pub pool_between: bool,
    pub dense_width: usize,
    /// QiRE settings and KL weight shared by every QiVConv layer.
    pub layer: LayerConfig,
    pub prior_var: f64,
    /// Nonlinearity used after every norm.
    pub activation: Activation,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            in_channels: 1,
            blocks: vec![
                BlockSpec { filters: 16, kernel: 7 },
                BlockSpec { filters: 32, kernel: 7 },
            ],
            pool_between: true,
            dense_width: 32,
            layer: LayerConfig::default(),
            prior_var: DEFAULT_PRIOR_VAR,
            activation: Activation::Relu,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::invalid("network needs at least one block"));
        }
        if self.in_channels == 0 || self.dense_width == 0 {
            return Err(Error::invalid("channel counts must be positive"));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.filters == 0 || b.kernel == 0 {
                return Err(Error::invalid(format!("block {i}: filters and kernel must be positive")));
            }
            if i > 0 && b.filters < self.blocks[i - 1].filters {
                return Err(Error::invalid(format!(
                    "block {i}: filter counts must be nondecreasing ({} after {})",
                    b.filters,
                    self.blocks[i - 1].filters
                )));
            }
        }
        if !(self.prior_var > 0.0) {
            return Err(Error::invalid(format!("prior variance must be positive, got {}", self.prior_var)));
        }
        self.layer.validate()?;
        let mut cin = self.in_channels;
        for b in &self.blocks {
            self.layer.qire.validate(b.kernel * cin * b.filters)?;
            cin = b.filters;
        }
        Ok(())
    }
}

/// Reversal-fusion-residual block.
#[derive(Debug, Clone)]
pub struct RfrBlock {
    pub shortcut: Conv1x1,
    pub shortcut_norm: BatchNorm,
    pub fwd_conv: QiVConv,
    pub fwd_norm: BatchNorm,
    pub bwd_conv: QiVConv,
    pub bwd_norm: BatchNorm,
    pub fusion_lstm: Lstm,
    pub fusion_norm: BatchNorm,
    pub refine_lstm: Lstm,
    pub refine_norm: BatchNorm,
    pub activation: Activation,
    /// Noise streams of the two conv paths.
    pub streams: [u64; 2],
}

/// Block output plus the pre-fusion features of both conv paths.
#[derive(Debug, Clone, Copy)]
pub struct BlockOutput {
    pub out: Var,
    pub forward_path: Var,
    pub backward_path: Var,
}

impl RfrBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        spec: BlockSpec,
        layer: LayerConfig,
        prior_var: f64,
        activation: Activation,
        streams: [u64; 2],
        rng: &mut Rng,
    ) -> Result<Self> {
        let f = spec.filters;
        // norm follows the conv, so the layer itself is pre-activation
        let conv_cfg = LayerConfig {
            activation: Activation::Identity,
            stride: 1,
            ..layer
        };
        Ok(RfrBlock {
            shortcut: Conv1x1::new(store, &format!("{name}.shortcut"), cin, f, rng),
            shortcut_norm: BatchNorm::new(store, &format!("{name}.shortcut_norm"), f),
            fwd_conv: QiVConv::new(store, &format!("{name}.fwd"), spec.kernel, cin, f, prior_var, conv_cfg, rng)?,
            fwd_norm: BatchNorm::new(store, &format!("{name}.fwd_norm"), f),
            bwd_conv: QiVConv::new(store, &format!("{name}.bwd"), spec.kernel, cin, f, prior_var, conv_cfg, rng)?,
            bwd_norm: BatchNorm::new(store, &format!("{name}.bwd_norm"), f),
            fusion_lstm: Lstm::new(store, &format!("{name}.fusion"), 2 * f, f, rng),
            fusion_norm: BatchNorm::new(store, &format!("{name}.fusion_norm"), f),
            refine_lstm: Lstm::new(store, &format!("{name}.refine"), 2 * f, f, rng),
            refine_norm: BatchNorm::new(store, &format!("{name}.refine_norm"), f),
            activation,
            streams,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.refine_lstm.hidden
    }

    fn act_norm(&self, fw: &mut Forward, norm: &BatchNorm, x: Var) -> Result<Var> {
        let y = norm.forward(fw, x)?;
        Ok(self.activation.apply(fw.g, y))
    }

    fn conv(&self, fw: &mut Forward, conv: &QiVConv, stream: u64, x: Var) -> Result<Var> {
        let mut rng = fw.layer_rng(stream);
        conv.forward(fw.g, fw.bound, x, rng.as_mut())
    }

    pub fn forward(&self, fw: &mut Forward, x: Var) -> Result<BlockOutput> {
        let s = self.shortcut.forward(fw, x)?;
        let shortcut = self.act_norm(fw, &self.shortcut_norm, s)?;

        let f = self.conv(fw, &self.fwd_conv, self.streams[0], x)?;
        let forward_path = self.act_norm(fw, &self.fwd_norm, f)?;

        let xr = fw.g.reverse_time(x)?;
        let b = self.conv(fw, &self.bwd_conv, self.streams[1], xr)?;
        let b = self.act_norm(fw, &self.bwd_norm, b)?;
        let backward_path = fw.g.reverse_time(b)?;

        let cat = fw.g.concat(&[forward_path, backward_path], 2)?;
        let fused = self.fusion_lstm.forward(fw, cat)?;
        let fused = self.act_norm(fw, &self.fusion_norm, fused)?;

        let cat = fw.g.concat(&[fused, shortcut], 2)?;
        let out = self.refine_lstm.forward(fw, cat)?;
        let out = self.act_norm(fw, &self.refine_norm, out)?;
        Ok(BlockOutput {
            out,
            forward_path,
            backward_path,
        })
    }

    pub fn kl(&self, g: &mut Graph, bound: &Bound) -> Result<Var> {
        let a = self.fwd_conv.kl(g, bound)?;
        let b = self.bwd_conv.kl(g, bound)?;
        g.add(a, b)
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    pub cfg: NetworkConfig,
    pub store: ParamStore,
    pub blocks: Vec<RfrBlock>,
    pub hidden: Dense,
    pub head: Dense,
}

#[derive(Debug, Clone)]
pub struct NetOutput {
    pub logits: Var,
    /// Softmax of the logits, `(B, 2)`.
    pub probs: Var,
    /// Globally max-pooled features of the last block, `(B, F)`.
    pub bottleneck: Var,
    pub blocks: Vec<BlockOutput>,
}

/// Values from one inference-mode pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub probs: Tensor,
    pub bottleneck: Tensor,
}

impl Network {
    pub fn new(cfg: NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(cfg.seed).fork(INIT_STREAM);
        let mut store = ParamStore::new();
        let mut blocks = Vec::with_capacity(cfg.blocks.len());
        let mut cin = cfg.in_channels;
        for (i, spec) in cfg.blocks.iter().enumerate() {
            let streams = [2 * i as u64, 2 * i as u64 + 1];
            blocks.push(RfrBlock::new(
                &mut store,
                &format!("block{i}"),
                cin,
                *spec,
                cfg.layer,
                cfg.prior_var,
                cfg.activation,
                streams,
                &mut rng,
            )?);
            cin = spec.filters;
        }
        let hidden = Dense::new(&mut store, "dense", cin, cfg.dense_width, &mut rng);
        let head = Dense::new(&mut store, "head", cfg.dense_width, 2, &mut rng);
        Ok(Network {
            cfg,
            store,
            blocks,
            hidden,
            head,
        })
    }

    /// Stacked blocks, pooling, global max pool, dense + relu, dense, softmax.
    pub fn forward(&self, fw: &mut Forward, x: Var) -> Result<NetOutput> {
        let shape = fw.g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.cfg.in_channels {
            return Err(Error::shape(
                "network input",
                "channels",
                self.cfg.in_channels,
                shape.get(2).copied().unwrap_or(0),
            ));
        }
        let mut h = x;
        let mut outs = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            if i > 0 && self.cfg.pool_between {
                h = fw.g.max_pool_time(h)?;
            }
            let o = block.forward(fw, h)?;
            h = o.out;
            outs.push(o);
        }
        let bottleneck = fw.g.global_max_pool(h)?;
        let z = self.hidden.forward(fw, bottleneck)?;
        let z = fw.g.relu(z);
        let logits = self.head.forward(fw, z)?;
        let probs = fw.g.softmax(logits)?;
        Ok(NetOutput {
            logits,
            probs,
            bottleneck,
            blocks: outs,
        })
    }

    /// Sum of KL terms over every variational layer.
    pub fn kl(&self, g: &mut Graph, bound: &Bound) -> Result<Var> {
        let mut total = self.blocks[0].kl(g, bound)?;
        for b in &self.blocks[1..] {
            let k = b.kl(g, bound)?;
            total = g.add(total, k)?;
        }
        Ok(total)
    }

    /// Deterministic pass using posterior means and running statistics.
    pub fn infer(&self, x: &Tensor) -> Result<Inference> {
        let mut g = Graph::new();
        let bound = self.store.bind_constants(&mut g);
        let xv = g.constant(x.clone());
        let mut fw = Forward::new(&mut g, &bound, &self.store, Mode::Infer, None);
        let out = self.forward(&mut fw, xv)?;
        Ok(Inference {
            probs: g.value(out.probs).clone(),
            bottleneck: g.value(out.bottleneck).clone(),
        })
    }

    /// Replaces every running norm statistic with the mean batch statistic
    /// of training-mode passes over `batches` that use posterior means
    /// instead of sampled kernels. Trainable parameters are untouched.
    pub fn recalibrate_norms(&mut self, batches: &[Tensor]) -> Result<()> {
        let mut acc: Vec<NormUpdate> = Vec::new();
        for x in batches {
            let mut g = Graph::new();
            let bound = self.store.bind_constants(&mut g);
            let xv = g.constant(x.clone());
            let mut fw = Forward::new(&mut g, &bound, &self.store, Mode::Train, None);
            self.forward(&mut fw, xv)?;
            let ups = std::mem::take(&mut fw.updates);
            if acc.is_empty() {
                acc = ups;
                continue;
            }
            for (a, u) in acc.iter_mut().zip(&ups) {
                a.batch_mean.iter_mut().zip(&u.batch_mean).for_each(|(a, b)| *a += b);
                a.batch_var.iter_mut().zip(&u.batch_var).for_each(|(a, b)| *a += b);
            }
        }
        let n = batches.len() as f64;
        for mut u in acc {
            u.batch_mean.iter_mut().for_each(|v| *v /= n);
            u.batch_var.iter_mut().for_each(|v| *v /= n);
            u.momentum = 1.0;
            u.apply(&mut self.store);
        }
        Ok(())
    }

    pub fn kl_value(&self) -> Result<f64> {
        let mut total = 0.0;
        for b in &self.blocks {
            total += crate::qivconv::kl_divergence(&b.fwd_conv.kernel(&self.store))?;
            total += crate::qivconv::kl_divergence(&b.bwd_conv.kernel(&self.store))?;
        }
        Ok(total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Network {
        let mut cfg = NetworkConfig {
            blocks: vec![BlockSpec { filters: 2, kernel: 3 }, BlockSpec { filters: 3, kernel: 3 }],
            dense_width: 4,
            seed: 9,
            ..NetworkConfig::default()
        };
        cfg.layer.qire.k = 2;
        Network::new(cfg).unwrap()
    }

    fn input(b: usize, t: usize, seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        Tensor::from_fn([b, t, 1], |_| rng.normal())
    }

    #[test]
    fn rows_are_distributions() {
        let p = tiny().infer(&input(3, 16, 1)).unwrap().probs;
        for row in p.data().chunks(2) {
            assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn recalibration_with_one_batch_copies_its_statistics() {
        let mut net = tiny();
        let x = input(4, 400, 2);
        net.recalibrate_norms(std::slice::from_ref(&x)).unwrap();

        let mut g = Graph::new();
        let bound = net.store.bind_constants(&mut g);
        let xv = g.constant(x.clone());
        let mut fw = Forward::new(&mut g, &bound, &net.store, Mode::Train, None);
        let train = net.forward(&mut fw, xv).unwrap().probs;
        let updates = std::mem::take(&mut fw.updates);
        for u in &updates {
            assert_eq!(net.store.get(u.mean).data(), &u.batch_mean[..]);
            assert_eq!(net.store.get(u.var).data(), &u.batch_var[..]);
        }
        // running variances are unbiased, so inference only nearly matches
        let infer = net.infer(&x).unwrap().probs;
        for (a, b) in g.value(train).data().iter().zip(infer.data()) {
            assert!((a - b).abs() < 1e-2, "{a} vs {b}");
        }
    }
}
