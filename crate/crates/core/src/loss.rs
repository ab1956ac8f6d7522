//! Composite cross-entropy + Dice objective with adaptive weighting.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::qivconv::LOG_EPS;
use crate::tensor::Tensor;

/// Tolerance on row sums when validating probability inputs.
const PROB_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DiceMode {
    /// Over every entry of the flattened `(B, 2)` arrays.
    #[default]
    AllTerms,
    /// Over the positive-class column only.
    PositiveColumn,
}

impl DiceMode {
    pub fn name(self) -> &'static str {
        match self {
            DiceMode::AllTerms => "all",
            DiceMode::PositiveColumn => "positive",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(DiceMode::AllTerms),
            "positive" => Ok(DiceMode::PositiveColumn),
            _ => Err(Error::invalid(format!("unknown dice mode '{s}' (all|positive)"))),
        }
    }
}

/// Weights of the two loss terms, driven by an EMA of their magnitudes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub w_cce: f64,
    pub w_dice: f64,
    pub ema_cce: f64,
    pub ema_dice: f64,
    pub decay: f64,
    /// When false the weights stay at 1/1.
    pub adaptive: bool,
    initialized: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights::new(0.9, true)
    }
}

impl LossWeights {
    pub fn new(decay: f64, adaptive: bool) -> Self {
        LossWeights {
            w_cce: 1.0,
            w_dice: 1.0,
            ema_cce: 0.0,
            ema_dice: 0.0,
            decay,
            adaptive,
            initialized: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(Error::invalid(format!("loss-weight decay must be in (0, 1), got {}", self.decay)));
        }
        Ok(())
    }

    /// Folds one observation of each loss into the EMAs, then sets
    /// `w_i = 2·EMA_i / (EMA_cce + EMA_dice)`.
    pub fn update(&mut self, cce: f64, dice: f64) {
        if !self.adaptive {
            return;
        }
        if self.initialized {
            self.ema_cce = self.decay * self.ema_cce + (1.0 - self.decay) * cce;
            self.ema_dice = self.decay * self.ema_dice + (1.0 - self.decay) * dice;
        } else {
            self.ema_cce = cce;
            self.ema_dice = dice;
            self.initialized = true;
        }
        let (a, b) = (self.ema_cce.max(0.0), self.ema_dice.max(0.0));
        let total = a + b;
        if total > 0.0 && total.is_finite() {
            self.w_cce = 2.0 * a / total;
            self.w_dice = 2.0 - self.w_cce;
        } else {
            self.w_cce = 1.0;
            self.w_dice = 1.0;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub cce: f64,
    pub dice: f64,
}

fn check_probs(pred: &Tensor, target: &Tensor) -> Result<()> {
    pred.expect_rank("composite loss", 2)?;
    target.expect_shape("composite loss (target)", pred.shape())?;
    for row in pred.data().chunks(pred.shape()[1].max(1)) {
        let s: f64 = row.iter().sum();
        if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (s - 1.0).abs() > PROB_TOL {
            return Err(Error::invalid(format!("composite loss: row {row:?} is not a probability vector")));
        }
    }
    Ok(())
}

/// `−(1/B) Σ y ln ŷ`, with ŷ floored at 1e-8.
pub fn cce(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_probs(pred, target)?;
    let b = pred.shape()[0] as f64;
    let s: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &y)| y * p.max(LOG_EPS).ln())
        .sum();
    Ok(-s / b)
}

fn dice_terms<'a>(pred: &'a Tensor, target: &'a Tensor, mode: DiceMode) -> impl Iterator<Item = (f64, f64)> + 'a {
    let c = pred.shape()[1];
    pred.data()
        .iter()
        .zip(target.data())
        .enumerate()
        .filter(move |(i, _)| mode == DiceMode::AllTerms || i % c == c - 1)
        .map(|(_, (&p, &y))| (p, y))
}

/// `1 − 2Σyŷ / (Σy + Σŷ)`.
pub fn dice(pred: &Tensor, target: &Tensor, mode: DiceMode) -> Result<f64> {
    check_probs(pred, target)?;
    let (mut inter, mut denom) = (0.0, 0.0);
    for (p, y) in dice_terms(pred, target, mode) {
        inter += p * y;
        denom += p + y;
    }
    Ok(if denom > 0.0 { 1.0 - 2.0 * inter / denom } else { 0.0 })
}

/// Weighted loss with the current weights, and the weights after folding in
/// this call's losses.
pub fn composite_loss(
    pred: &Tensor,
    target: &Tensor,
    lw: &LossWeights,
    mode: DiceMode,
) -> Result<(LossParts, LossWeights)> {
    let c = cce(pred, target)?;
    let d = dice(pred, target, mode)?;
    let mut next = *lw;
    next.update(c, d);
    Ok((
        LossParts {
            total: lw.w_cce * c + lw.w_dice * d,
            cce: c,
            dice: d,
        },
        next,
    ))
}

/// Graph nodes of one composite-loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub cce: Var,
    pub dice: Var,
}

/// Differentiable composite loss on `(B, 2)` probabilities.
pub fn composite_loss_var(
    g: &mut Graph,
    probs: Var,
    target: &Tensor,
    lw: &LossWeights,
    mode: DiceMode,
) -> Result<LossVars> {
    let shape = g.shape(probs).to_vec();
    if shape.len() != 2 {
        return Err(Error::Rank {
            op: "composite loss",
            expected: 2,
            got: shape.len(),
        });
    }
    target.expect_shape("composite loss (target)", &shape)?;
    let b = shape[0] as f64;
    let y = g.constant(target.clone());

    let logp = g.log_floor(probs, LOG_EPS)?;
    let ylogp = g.mul(y, logp)?;
    let s = g.sum(ylogp);
    let cce = g.scale(s, -1.0 / b);

    let (p, yy) = match mode {
        DiceMode::AllTerms => (probs, target.clone()),
        DiceMode::PositiveColumn => {
            let c = shape[1];
            let mask = Tensor::from_fn(shape.clone(), |i| if i % c == c - 1 { 1.0 } else { 0.0 });
            let m = g.constant(mask.clone());
            (g.mul(probs, m)?, target.zip_map(&mask, |a, b| a * b)?)
        }
    };
    let yv = g.constant(yy.clone());
    let inter = g.mul(p, yv)?;
    let inter = g.sum(inter);
    let psum = g.sum(p);
    let denom = g.add_scalar(psum, yy.sum());
    let ratio = g.div(inter, denom)?;
    let ratio = g.scale(ratio, -2.0);
    let dice = g.add_scalar(ratio, 1.0);

    let a = g.scale(cce, lw.w_cce);
    let d = g.scale(dice, lw.w_dice);
    let total = g.add(a, d)?;
    Ok(LossVars { total, cce, dice })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[[f64; 2]]) -> Tensor {
        Tensor::new([rows.len(), 2], rows.iter().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let p = t(&[[1.0, 0.0], [0.0, 1.0]]);
        assert!(cce(&p, &p).unwrap() <= 1e-7);
        assert_eq!(dice(&p, &p, DiceMode::AllTerms).unwrap(), 0.0);
    }

    #[test]
    fn uniform_prediction_costs_ln2() {
        let p = t(&[[0.5, 0.5], [0.5, 0.5], [0.5, 0.5]]);
        let y = t(&[[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]);
        assert!((cce(&p, &y).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn worked_dice_example() {
        let p = t(&[[0.8, 0.2], [0.4, 0.6]]);
        let y = t(&[[1.0, 0.0], [0.0, 1.0]]);
        assert!((dice(&p, &y, DiceMode::AllTerms).unwrap() - 0.3).abs() < 1e-12);
        // positive column: 1 − 2·0.6 / (1 + 0.8)
        assert!((dice(&p, &y, DiceMode::PositiveColumn).unwrap() - (1.0 - 1.2 / 1.8)).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_probabilities() {
        let y = t(&[[1.0, 0.0]]);
        assert!(cce(&t(&[[0.7, 0.7]]), &y).is_err());
        assert!(dice(&t(&[[1.2, -0.2]]), &y, DiceMode::AllTerms).is_err());
    }

    #[test]
    fn graph_loss_matches_tensor_loss() {
        let p = t(&[[0.8, 0.2], [0.4, 0.6], [0.1, 0.9]]);
        let y = t(&[[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]);
        let mut lw = LossWeights::default();
        lw.update(0.7, 0.2);
        for mode in [DiceMode::AllTerms, DiceMode::PositiveColumn] {
            let (parts, _) = composite_loss(&p, &y, &lw, mode).unwrap();
            let mut g = Graph::new();
            let pv = g.param(p.clone());
            let v = composite_loss_var(&mut g, pv, &y, &lw, mode).unwrap();
            assert!((g.value(v.total).item() - parts.total).abs() < 1e-12);
            assert!((g.value(v.cce).item() - parts.cce).abs() < 1e-12);
            assert!((g.value(v.dice).item() - parts.dice).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_track_the_larger_loss() {
        let mut lw = LossWeights::default();
        lw.update(0.6, 0.2);
        assert!((lw.w_cce - 1.5).abs() < 1e-12);
        assert!((lw.w_dice - 0.5).abs() < 1e-12);
        lw.update(0.2, 0.6);
        // EMA: 0.9·0.6 + 0.1·0.2 = 0.56, 0.9·0.2 + 0.1·0.6 = 0.24
        assert!((lw.w_cce - 2.0 * 0.56 / 0.8).abs() < 1e-12);
        let mut fixed = LossWeights::new(0.9, false);
        fixed.update(5.0, 0.0);
        assert_eq!((fixed.w_cce, fixed.w_dice), (1.0, 1.0));
    }
}
