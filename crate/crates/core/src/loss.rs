//! Soft dice, pixel-wise cross-entropy, and their weighted combination, with
//! analytic gradients with respect to the logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{LabelMap, IGNORE};
use crate::tensor::FeatureMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub dice: f64,
    pub ce_main: f64,
    pub ce_aux: f64,
}

impl LossWeights {
    pub fn new(dice: f64, ce_main: f64, ce_aux: f64) -> Result<Self> {
        let w = Self { dice, ce_main, ce_aux };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.dice, self.ce_main, self.ce_aux];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::config("lambda", "loss weights must be finite and >= 0"));
        }
        if all.iter().all(|&v| v == 0.0) {
            return Err(Error::config("lambda", "at least one loss weight must be positive"));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    /// Dice weighted 5, both cross-entropy terms weighted 1.
    fn default() -> Self {
        Self {
            dice: 5.0,
            ce_main: 1.0,
            ce_aux: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiceReduction {
    /// Mean of per-class dice ratios.
    #[default]
    Class,
    /// One ratio over all classes pooled.
    Micro,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiceOptions {
    pub eps: f64,
    pub reduction: DiceReduction,
}

impl Default for DiceOptions {
    fn default() -> Self {
        Self {
            eps: 1.0,
            reduction: DiceReduction::Class,
        }
    }
}

fn check_shape(map: &FeatureMap, labels: &LabelMap, context: &'static str) -> Result<()> {
    if map.height != labels.height || map.width != labels.width || map.channels != labels.classes {
        return Err(Error::shape(
            context,
            [labels.classes, labels.height, labels.width],
            map.shape(),
        ));
    }
    Ok(())
}

/// Channel-wise softmax at every pixel.
pub fn softmax_channels(logits: &FeatureMap) -> FeatureMap {
    let n = logits.height * logits.width;
    let c = logits.channels;
    let mut out = logits.clone();
    for p in 0..n {
        let m = (0..c).map(|k| logits.data[k * n + p]).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for k in 0..c {
            let e = (logits.data[k * n + p] - m).exp();
            out.data[k * n + p] = e;
            z += e;
        }
        for k in 0..c {
            out.data[k * n + p] /= z;
        }
    }
    out
}

/// Soft dice loss, class-averaged, with smoothing `eps`.
pub fn dice_loss(probs: &FeatureMap, labels: &LabelMap, eps: f64) -> Result<f64> {
    Ok(dice_with_grad(
        probs,
        labels,
        DiceOptions {
            eps,
            reduction: DiceReduction::Class,
        },
    )?
    .0)
}

pub fn dice_loss_with(probs: &FeatureMap, labels: &LabelMap, opts: DiceOptions) -> Result<f64> {
    Ok(dice_with_grad(probs, labels, opts)?.0)
}

/// Dice value and its gradient with respect to `probs`.
pub fn dice_with_grad(probs: &FeatureMap, labels: &LabelMap, opts: DiceOptions) -> Result<(f64, FeatureMap)> {
    check_shape(probs, labels, "dice_loss")?;
    if !(opts.eps > 0.0) {
        return Err(Error::config("dice_eps", "must be > 0"));
    }
    let n = probs.height * probs.width;
    let c = probs.channels;
    debug_assert!(
        (0..n).all(|p| ((0..c).map(|k| probs.data[k * n + p]).sum::<f64>() - 1.0).abs() < 1e-6),
        "dice_loss expects per-pixel normalized probabilities"
    );
    let mut inter = vec![0.0; c];
    let mut pred = vec![0.0; c];
    let mut truth = vec![0.0; c];
    for (p, &y) in labels.data.iter().enumerate() {
        if y == IGNORE {
            continue;
        }
        for k in 0..c {
            pred[k] += probs.data[k * n + p];
        }
        inter[y as usize] += probs.data[y as usize * n + p];
        truth[y as usize] += 1.0;
    }
    let eps = opts.eps;
    let mut grad = FeatureMap::zeros(c, probs.height, probs.width);
    let loss = match opts.reduction {
        DiceReduction::Class => {
            let mut acc = 0.0;
            let mut dpred = vec![0.0; c];
            let mut dinter = vec![0.0; c];
            for k in 0..c {
                let num = 2.0 * inter[k] + eps;
                let den = pred[k] + truth[k] + eps;
                acc += num / den;
                dinter[k] = -2.0 / den / c as f64;
                dpred[k] = num / (den * den) / c as f64;
            }
            fill_dice_grad(&mut grad, labels, &dinter, &dpred);
            1.0 - acc / c as f64
        }
        DiceReduction::Micro => {
            let num = 2.0 * inter.iter().sum::<f64>() + eps;
            let den = pred.iter().sum::<f64>() + truth.iter().sum::<f64>() + eps;
            fill_dice_grad(&mut grad, labels, &vec![-2.0 / den; c], &vec![num / (den * den); c]);
            1.0 - num / den
        }
    };
    Ok((loss, grad))
}

fn fill_dice_grad(grad: &mut FeatureMap, labels: &LabelMap, dinter: &[f64], dpred: &[f64]) {
    let n = grad.height * grad.width;
    for (p, &y) in labels.data.iter().enumerate() {
        if y == IGNORE {
            continue;
        }
        for (k, &dp) in dpred.iter().enumerate() {
            grad.data[k * n + p] = dp;
        }
        grad.data[y as usize * n + p] += dinter[y as usize];
    }
}

/// Cross-entropy value; `all_ignored` is set when no pixel was supervised
/// (the value is then defined as 0).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossEntropy {
    pub value: f64,
    pub all_ignored: bool,
}

pub fn cross_entropy(logits: &FeatureMap, labels: &LabelMap) -> Result<CrossEntropy> {
    Ok(cross_entropy_with_grad(logits, labels)?.0)
}

/// Mean `-log softmax(logits)[y]` over supervised pixels, and its gradient.
pub fn cross_entropy_with_grad(logits: &FeatureMap, labels: &LabelMap) -> Result<(CrossEntropy, FeatureMap)> {
    check_shape(logits, labels, "cross_entropy")?;
    let n = logits.height * logits.width;
    let c = logits.channels;
    let count = labels.data.iter().filter(|&&y| y != IGNORE).count();
    let mut grad = FeatureMap::zeros(c, logits.height, logits.width);
    if count == 0 {
        return Ok((
            CrossEntropy {
                value: 0.0,
                all_ignored: true,
            },
            grad,
        ));
    }
    let inv = 1.0 / count as f64;
    let mut total = 0.0;
    for (p, &y) in labels.data.iter().enumerate() {
        if y == IGNORE {
            continue;
        }
        let m = (0..c).map(|k| logits.data[k * n + p]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..c).map(|k| (logits.data[k * n + p] - m).exp()).sum();
        let lse = m + z.ln();
        total += lse - logits.data[y as usize * n + p];
        for k in 0..c {
            let prob = (logits.data[k * n + p] - lse).exp();
            grad.data[k * n + p] = prob * inv;
        }
        grad.data[y as usize * n + p] -= inv;
    }
    Ok((
        CrossEntropy {
            value: total * inv,
            all_ignored: false,
        },
        grad,
    ))
}

/// Backpropagates a probability gradient through the channel softmax.
fn softmax_backward(probs: &FeatureMap, grad_probs: &FeatureMap) -> FeatureMap {
    let n = probs.height * probs.width;
    let c = probs.channels;
    let mut out = FeatureMap::zeros(c, probs.height, probs.width);
    for p in 0..n {
        let dot: f64 = (0..c).map(|k| probs.data[k * n + p] * grad_probs.data[k * n + p]).sum();
        for k in 0..c {
            out.data[k * n + p] = probs.data[k * n + p] * (grad_probs.data[k * n + p] - dot);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub dice: f64,
    pub ce_main: f64,
    pub ce_aux: f64,
    pub total: f64,
    pub grad_main: FeatureMap,
    pub grad_aux: FeatureMap,
    /// No pixel of the label patch was supervised.
    pub all_ignored: bool,
}

/// `λ₁·dice(softmax(main)) + λ₂·CE(main) + λ₃·CE(aux)` and the gradients
/// with respect to both logit maps.
pub fn total_loss(
    main: &FeatureMap,
    aux: &FeatureMap,
    labels: &LabelMap,
    weights: &LossWeights,
    dice: DiceOptions,
) -> Result<LossBreakdown> {
    let probs = softmax_channels(main);
    let (dice_value, dice_grad_probs) = dice_with_grad(&probs, labels, dice)?;
    let (ce_main, ce_main_grad) = cross_entropy_with_grad(main, labels)?;
    let (ce_aux, ce_aux_grad) = cross_entropy_with_grad(aux, labels)?;

    let mut grad_main = softmax_backward(&probs, &dice_grad_probs);
    grad_main.data.iter_mut().for_each(|g| *g *= weights.dice);
    grad_main.add_scaled(&ce_main_grad, weights.ce_main);
    let mut grad_aux = ce_aux_grad;
    grad_aux.data.iter_mut().for_each(|g| *g *= weights.ce_aux);

    Ok(LossBreakdown {
        dice: dice_value,
        ce_main: ce_main.value,
        ce_aux: ce_aux.value,
        total: weights.dice * dice_value + weights.ce_main * ce_main.value + weights.ce_aux * ce_aux.value,
        grad_main,
        grad_aux,
        all_ignored: ce_main.all_ignored,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(w: usize, h: usize, c: usize, data: &[u8]) -> LabelMap {
        LabelMap::new(w, h, c, data.to_vec()).unwrap()
    }

    fn one_hot(l: &LabelMap) -> FeatureMap {
        let mut f = FeatureMap::zeros(l.classes, l.height, l.width);
        let n = l.width * l.height;
        for (p, &y) in l.data.iter().enumerate() {
            f.data[y as usize * n + p] = 1.0;
        }
        f
    }

    #[test]
    fn dice_perfect_and_disjoint() {
        let l = labels(4, 4, 2, &[0, 1, 1, 0, 0, 0, 1, 1, 0, 1, 0, 1, 1, 1, 0, 0]);
        assert!(dice_loss(&one_hot(&l), &l, 1.0).unwrap().abs() < 1e-15);

        // Every pixel class 0, predictions all class 1, N = 10_000.
        let n = 100;
        let l = LabelMap::filled(n, n, 2, 0).unwrap();
        let mut probs = FeatureMap::zeros(2, n, n);
        probs.plane_mut(1).iter_mut().for_each(|v| *v = 1.0);
        let d = dice_loss(&probs, &l, 1.0).unwrap();
        // class 0: eps / (N + eps); class 1: eps / (N + eps)
        let want = 1.0 - (1.0 / (1e4 + 1.0));
        assert!((d - want).abs() < 1e-12);
    }

    #[test]
    fn dice_hand_summed() {
        // 2x2, probs (0.75, 0.25) everywhere, labels all 0, eps = 1.
        let l = LabelMap::filled(2, 2, 2, 0).unwrap();
        let mut probs = FeatureMap::zeros(2, 2, 2);
        probs.plane_mut(0).iter_mut().for_each(|v| *v = 0.75);
        probs.plane_mut(1).iter_mut().for_each(|v| *v = 0.25);
        // class 0: (2*3 + 1) / (3 + 4 + 1) = 7/8; class 1: 1 / (1 + 0 + 1) = 1/2
        let want = 1.0 - (7.0 / 8.0 + 0.5) / 2.0;
        assert!((dice_loss(&probs, &l, 1.0).unwrap() - want).abs() < 1e-15);
        // micro: (2*3 + 1) / (4 + 4 + 1)
        let micro = dice_loss_with(&probs, &l, DiceOptions { eps: 1.0, reduction: DiceReduction::Micro }).unwrap();
        assert!((micro - (1.0 - 7.0 / 9.0)).abs() < 1e-15);
    }

    #[test]
    fn dice_ignores_ignore_pixels() {
        let l = labels(2, 1, 2, &[0, IGNORE]);
        let probs = FeatureMap::from_vec(2, 1, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(dice_loss(&probs, &l, 1.0).unwrap().abs() < 1e-15);
        let (_, g) = dice_with_grad(&probs, &l, DiceOptions::default()).unwrap();
        assert_eq!((g.get(0, 0, 1), g.get(1, 0, 1)), (0.0, 0.0));
    }

    #[test]
    fn cross_entropy_oracles() {
        let l = LabelMap::filled(3, 2, 4, 2).unwrap();
        let ce = cross_entropy(&FeatureMap::filled(4, 2, 3, 0.7), &l).unwrap();
        assert!((ce.value - 4f64.ln()).abs() < 1e-12);

        // rows [2,0] with label 0 and [0,1] with label 1
        let l = labels(2, 1, 2, &[0, 1]);
        let logits = FeatureMap::from_vec(2, 1, 2, vec![2.0, 0.0, 0.0, 1.0]).unwrap();
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let want = (-(sig(2.0)).ln() - (sig(1.0)).ln()) / 2.0;
        assert!((cross_entropy(&logits, &l).unwrap().value - want).abs() < 1e-12);

        let big = FeatureMap::from_vec(2, 1, 2, vec![60.0, 0.0, 0.0, 60.0]).unwrap();
        assert!(cross_entropy(&big, &l).unwrap().value < 1e-20);
    }

    #[test]
    fn cross_entropy_all_ignored() {
        let l = LabelMap::filled(2, 2, 3, IGNORE).unwrap();
        let ce = cross_entropy(&FeatureMap::zeros(3, 2, 2), &l).unwrap();
        assert_eq!(ce, CrossEntropy { value: 0.0, all_ignored: true });
    }

    #[test]
    fn shape_errors() {
        let l = LabelMap::filled(2, 2, 3, 0).unwrap();
        assert!(cross_entropy(&FeatureMap::zeros(2, 2, 2), &l).is_err());
        assert!(dice_loss(&FeatureMap::zeros(3, 2, 3), &l, 1.0).is_err());
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::new(0.0, 0.0, 0.0).is_err());
        assert!(LossWeights::new(-1.0, 1.0, 0.0).is_err());
        assert!(LossWeights::new(0.0, 1.0, 0.0).is_ok());
    }

    #[test]
    fn total_reduces_to_ce_main() {
        let l = labels(2, 1, 2, &[0, 1]);
        let main = FeatureMap::from_vec(2, 1, 2, vec![2.0, 0.0, 0.0, 1.0]).unwrap();
        let aux = FeatureMap::from_vec(2, 1, 2, vec![0.3, 0.1, -0.2, 0.5]).unwrap();
        let w = LossWeights::new(0.0, 1.0, 0.0).unwrap();
        let t = total_loss(&main, &aux, &l, &w, DiceOptions::default()).unwrap();
        assert_eq!(t.total, cross_entropy(&main, &l).unwrap().value);
        assert!(t.grad_aux.data.iter().all(|&g| g == 0.0));
    }
}
