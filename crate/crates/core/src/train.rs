//! Mini-batch training with early stopping on validation F1.

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::loss::{composite_loss_var, DiceMode, LossWeights};
use crate::nn::{Forward, Mode, Network, ParamStore};
use crate::optim::Adam;
use crate::pcg::{compute_metrics, Label, MetricsReport, Segment, SEGMENT_LEN};
use crate::qivconv::total_loss_var;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Segments per inference pass.
pub const EVAL_CHUNK: usize = 64;

/// Training segments used to re-estimate norm statistics after each epoch.
pub const NORM_CALIBRATION_SEGMENTS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Non-improving epochs tolerated before stopping.
    pub patience: usize,
    pub val_fraction: f64,
    pub adaptive_weights: bool,
    pub ema_decay: f64,
    pub dice: DiceMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch: 256,
            epochs: 500,
            patience: 50,
            val_fraction: 0.1,
            adaptive_weights: true,
            ema_decay: 0.9,
            dice: DiceMode::AllTerms,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch == 0 || self.epochs == 0 {
            return Err(Error::invalid("batch and epochs must be positive"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::invalid(format!("val_fraction must be in (0, 1), got {}", self.val_fraction)));
        }
        LossWeights::new(self.ema_decay, self.adaptive_weights).validate()
    }
}

/// `(B, 2000, 1)` inputs and `(B, 2)` one-hot targets.
pub fn batch_tensors(segments: &[Segment], idx: &[usize]) -> Result<(Tensor, Tensor)> {
    let mut x = Vec::with_capacity(idx.len() * SEGMENT_LEN);
    let mut y = Vec::with_capacity(idx.len() * 2);
    for &i in idx {
        let s = segments
            .get(i)
            .ok_or_else(|| Error::invalid(format!("segment index {i} out of range")))?;
        if s.values.len() != SEGMENT_LEN {
            return Err(Error::shape("batch", "segment length", SEGMENT_LEN, s.values.len()));
        }
        x.extend_from_slice(&s.values);
        y.extend_from_slice(match s.label {
            Label::Normal => &[1.0, 0.0],
            Label::Abnormal => &[0.0, 1.0],
        });
    }
    Ok((
        Tensor::new([idx.len(), SEGMENT_LEN, 1], x)?,
        Tensor::new([idx.len(), 2], y)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub cce: f64,
    pub dice: f64,
    pub kl: f64,
}

/// One network plus its optimizer and loss weights.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub net: Network,
    pub adam: Adam,
    pub weights: LossWeights,
    pub cfg: TrainConfig,
}

impl Trainer {
    pub fn new(net: Network, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer {
            net,
            adam: Adam::new(cfg.lr),
            weights: LossWeights::new(cfg.ema_decay, cfg.adaptive_weights),
            cfg,
        })
    }

    /// Forward, backward and one Adam update. `rng` drives the kernel
    /// noise; passing the same generator twice repeats the same draw.
    pub fn step(&mut self, x: &Tensor, y: &Tensor, rng: Rng) -> Result<StepStats> {
        let mut g = Graph::new();
        let bound = self.net.store.bind(&mut g);
        let xv = g.constant(x.clone());
        let mut fw = Forward::new(&mut g, &bound, &self.net.store, Mode::Train, Some(rng));
        let out = self.net.forward(&mut fw, xv)?;
        let updates = std::mem::take(&mut fw.updates);
        let parts = composite_loss_var(&mut g, out.probs, y, &self.weights, self.cfg.dice)?;
        let kl = self.net.kl(&mut g, &bound)?;
        let total = total_loss_var(&mut g, parts.total, kl, self.net.cfg.layer.kl_scale)?;
        let stats = StepStats {
            loss: g.value(total).data()[0],
            cce: g.value(parts.cce).data()[0],
            dice: g.value(parts.dice).data()[0],
            kl: g.value(kl).data()[0],
        };
        if !stats.loss.is_finite() {
            return Err(Error::Numerical(format!("training loss is {}", stats.loss)));
        }
        let grads = g.backward(total)?;
        let grads = self.net.store.collect_grads(&bound, &grads);
        self.adam.step(&mut self.net.store, &grads)?;
        for u in &updates {
            u.apply(&mut self.net.store);
        }
        Ok(stats)
    }
}

/// Inference outputs for a list of segments, in input order.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub ids: Vec<String>,
    pub labels: Vec<Label>,
    pub predicted: Vec<Label>,
    /// Abnormal-class probability.
    pub scores: Vec<f64>,
    pub bottleneck: Vec<Vec<f64>>,
}

impl Predictions {
    pub fn metrics(&self) -> Result<MetricsReport> {
        compute_metrics(&self.labels, &self.predicted, &self.scores)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Deterministic inference over `segments[idx]`, [`EVAL_CHUNK`] at a time.
pub fn predict(net: &Network, segments: &[Segment], idx: &[usize]) -> Result<Predictions> {
    let mut p = Predictions {
        ids: Vec::with_capacity(idx.len()),
        labels: Vec::with_capacity(idx.len()),
        predicted: Vec::with_capacity(idx.len()),
        scores: Vec::with_capacity(idx.len()),
        bottleneck: Vec::with_capacity(idx.len()),
    };
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, _) = batch_tensors(segments, chunk)?;
        let inf = net.infer(&x)?;
        let width = inf.bottleneck.shape()[1];
        for (j, &i) in chunk.iter().enumerate() {
            let (pn, pa) = (inf.probs.data()[2 * j], inf.probs.data()[2 * j + 1]);
            p.ids.push(segments[i].id());
            p.labels.push(segments[i].label);
            p.predicted.push(if pa > pn { Label::Abnormal } else { Label::Normal });
            p.scores.push(pa.clamp(0.0, 1.0));
            p.bottleneck.push(inf.bottleneck.data()[j * width..(j + 1) * width].to_vec());
        }
    }
    Ok(p)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub cce: f64,
    pub dice: f64,
    pub w_cce: f64,
    pub w_dice: f64,
    pub kl: f64,
    pub val_f1: f64,
    pub val_acc: f64,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,cce,dice,w_cce,w_dice,kl,val_f1,val_acc";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.10},{:.10},{:.10},{:.10},{:.10},{:.10},{:.10},{:.10}",
            self.epoch, self.train_loss, self.cce, self.dice, self.w_cce, self.w_dice, self.kl, self.val_f1, self.val_acc
        )
    }
}

/// Early-stopping bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub epoch: usize,
    pub best_val_f1: f64,
    pub best_epoch: usize,
    /// Consecutive epochs without a strictly better validation F1.
    pub stale: usize,
    pub best_params: Option<ParamStore>,
}

impl TrainState {
    pub fn new() -> Self {
        TrainState {
            epoch: 0,
            best_val_f1: f64::NEG_INFINITY,
            best_epoch: 0,
            stale: 0,
            best_params: None,
        }
    }

    /// Records one validation score. Returns `true` when training should
    /// stop.
    pub fn observe(&mut self, val_f1: f64, params: &ParamStore, patience: usize) -> bool {
        self.epoch += 1;
        if val_f1 > self.best_val_f1 {
            self.best_val_f1 = val_f1;
            self.best_epoch = self.epoch;
            self.best_params = Some(params.clone());
            self.stale = 0;
            false
        } else {
            self.stale += 1;
            self.stale > patience
        }
    }
}

impl Default for TrainState {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of [`fit`]; the trainer holds the best parameters.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub trainer: Trainer,
    pub log: Vec<EpochLog>,
    pub state: TrainState,
}

fn require_both_classes(what: &str, segments: &[Segment], idx: &[usize]) -> Result<()> {
    let mut seen = [false; 2];
    idx.iter().for_each(|&i| seen[segments[i].label.index()] = true);
    if seen != [true, true] {
        let missing = if seen[0] { Label::Abnormal } else { Label::Normal };
        return Err(Error::Data(format!("{what} split has no {missing} segments")));
    }
    Ok(())
}

/// Trains on `train_idx`, selects the epoch with the best F1 on `val_idx`
/// and restores it. `rng` seeds batch order and kernel noise.
pub fn fit(
    net: Network,
    cfg: TrainConfig,
    segments: &[Segment],
    train_idx: &[usize],
    val_idx: &[usize],
    rng: &Rng,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<FitOutcome> {
    require_both_classes("training", segments, train_idx)?;
    require_both_classes("validation", segments, val_idx)?;
    let mut trainer = Trainer::new(net, cfg)?;
    let (order_root, noise_root) = (rng.fork(0), rng.fork(1));
    let mut state = TrainState::new();
    let mut log = Vec::new();
    let mut order = train_idx.to_vec();
    let mut step = 0u64;
    for epoch in 1..=cfg.epochs {
        order.copy_from_slice(train_idx);
        order_root.fork(epoch as u64).shuffle(&mut order);
        let (mut loss, mut cce, mut dice, mut kl) = (0.0, 0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.batch) {
            let (x, y) = batch_tensors(segments, batch)?;
            let s = trainer.step(&x, &y, noise_root.fork(step))?;
            step += 1;
            let w = batch.len() as f64;
            loss += w * s.loss;
            cce += w * s.cce;
            dice += w * s.dice;
            kl = s.kl;
        }
        let n = order.len() as f64;
        let (loss, cce, dice) = (loss / n, cce / n, dice / n);
        let (w_cce, w_dice) = (trainer.weights.w_cce, trainer.weights.w_dice);
        trainer.weights.update(cce, dice);
        // running averages lag the weights and carry kernel-noise shifts
        let calib = &order[..order.len().min(NORM_CALIBRATION_SEGMENTS)];
        let batches = calib
            .chunks(cfg.batch)
            .map(|c| batch_tensors(segments, c).map(|(x, _)| x))
            .collect::<Result<Vec<_>>>()?;
        trainer.net.recalibrate_norms(&batches)?;
        let val = predict(&trainer.net, segments, val_idx)?.metrics()?;
        let entry = EpochLog {
            epoch,
            train_loss: loss,
            cce,
            dice,
            w_cce,
            w_dice,
            kl,
            val_f1: val.f1,
            val_acc: val.accuracy,
        };
        on_epoch(&entry);
        log.push(entry);
        if state.observe(val.f1, &trainer.net.store, cfg.patience) {
            break;
        }
    }
    if let Some(best) = &state.best_params {
        trainer.net.store.load_from(best)?;
    }
    Ok(FitOutcome { trainer, log, state })
}

/// First three bottleneck coordinates per segment.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentRow {
    pub id: String,
    pub label: Label,
    pub coords: [f64; 3],
}

pub fn export_latent(net: &Network, segments: &[Segment]) -> Result<Vec<LatentRow>> {
    let idx: Vec<usize> = (0..segments.len()).collect();
    let p = predict(net, segments, &idx)?;
    Ok(p.ids
        .into_iter()
        .zip(p.labels)
        .zip(p.bottleneck)
        .map(|((id, label), z)| {
            let mut coords = [0.0; 3];
            for (c, v) in coords.iter_mut().zip(&z) {
                *c = *v;
            }
            LatentRow { id, label, coords }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{BlockSpec, NetworkConfig};

    fn tiny_net(lambda: f64) -> Network {
        let mut cfg = NetworkConfig {
            blocks: vec![BlockSpec { filters: 2, kernel: 3 }],
            dense_width: 4,
            seed: 3,
            ..NetworkConfig::default()
        };
        cfg.layer.kl_scale = lambda;
        cfg.layer.qire.k = 2;
        Network::new(cfg).unwrap()
    }

    fn separable(n: usize) -> Vec<Segment> {
        (0..n)
            .map(|i| {
                let label = if i % 2 == 0 { Label::Normal } else { Label::Abnormal };
                let f = if label == Label::Normal { 0.004 } else { 0.09 };
                let ph = i as f64 * 0.37;
                let values = (0..SEGMENT_LEN).map(|t| (f * t as f64 * std::f64::consts::TAU + ph).sin()).collect();
                Segment {
                    values,
                    label,
                    recording_id: format!("s{i}"),
                    window: 0,
                }
            })
            .collect()
    }

    #[test]
    fn early_stopping_contract() {
        let store = ParamStore::new();
        let mut s = TrainState::new();
        assert!(!s.observe(0.5, &store, 0));
        assert!(s.observe(0.5, &store, 0));
        assert_eq!((s.epoch, s.best_epoch), (2, 1));

        let mut s = TrainState::new();
        let f1 = [0.1, 0.4, 0.3, 0.4, 0.2];
        let stops: Vec<bool> = f1.iter().map(|&v| s.observe(v, &store, 2)).collect();
        assert_eq!(stops, [false, false, false, false, true]);
        assert_eq!(s.best_val_f1, 0.4);
        assert_eq!(s.best_epoch, 2);
    }

    #[test]
    fn loss_decreases_on_a_fixed_batch_with_frozen_noise() {
        let segs = separable(8);
        let idx: Vec<usize> = (0..8).collect();
        let (x, y) = batch_tensors(&segs, &idx).unwrap();
        let cfg = TrainConfig {
            lr: 1e-2,
            adaptive_weights: false,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(tiny_net(0.0), cfg).unwrap();
        let noise = Rng::new(11);
        let losses: Vec<f64> = (0..20).map(|_| t.step(&x, &y, noise.clone()).unwrap().loss).collect();
        assert!(losses[19] < losses[0], "{losses:?}");
    }

    #[test]
    fn fit_restores_the_best_epoch_and_rejects_one_class_splits() {
        let segs = separable(12);
        let train: Vec<usize> = (0..8).collect();
        let val: Vec<usize> = (8..12).collect();
        let cfg = TrainConfig {
            batch: 4,
            epochs: 3,
            patience: 5,
            ..TrainConfig::default()
        };
        let out = fit(tiny_net(1e-5), cfg, &segs, &train, &val, &Rng::new(1), |_| {}).unwrap();
        assert_eq!(out.log.len(), 3);
        let again = predict(&out.trainer.net, &segs, &val).unwrap().metrics().unwrap();
        assert_eq!(again.f1, out.state.best_val_f1);
        assert_eq!(out.log[out.state.best_epoch - 1].val_f1, out.state.best_val_f1);

        let normal_only: Vec<usize> = (0..12).step_by(2).collect();
        assert!(matches!(
            fit(tiny_net(0.0), cfg, &segs, &normal_only, &val, &Rng::new(1), |_| {}),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn latent_rows_match_the_pooled_vector() {
        let net = tiny_net(0.0);
        let mut segs = separable(3);
        segs.push(segs[0].clone());
        let rows = export_latent(&net, &segs).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[0].coords, rows[3].coords);
        let (x, _) = batch_tensors(&segs, &[1]).unwrap();
        let z = net.infer(&x).unwrap().bottleneck;
        assert_eq!(rows[1].coords[..2], z.data()[..2]);
    }
}
