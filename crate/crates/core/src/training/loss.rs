//! Segmentation and adversarial losses.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::volume::{OneHotTarget, ProbabilityMask};

/// Probabilities are clipped to `[BCE_EPS, 1 - BCE_EPS]` before the log.
pub const BCE_EPS: f64 = 1e-7;

/// Lower bound on any class weight.
pub const MIN_CLASS_WEIGHT: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub w: Vec<f64>,
    /// Set when the target had no positive voxel and the unit convention
    /// was used.
    pub empty_target: bool,
}

/// `W_k = 1 - n_k / sum_j n_j`, clamped below at [`MIN_CLASS_WEIGHT`].
pub fn class_weights_from_counts(counts: &[f64]) -> ClassWeights {
    let total: f64 = counts.iter().sum();
    if total <= 0.0 {
        return ClassWeights {
            w: vec![1.0; counts.len()],
            empty_target: true,
        };
    }
    ClassWeights {
        w: counts.iter().map(|&n| (1.0 - n / total).max(MIN_CLASS_WEIGHT)).collect(),
        empty_target: false,
    }
}

/// Positive voxels per class of a `[D, K, H, W]` one-hot tensor.
pub fn class_counts(target: &Tensor) -> Vec<f64> {
    let (d, k, h, w) = target.dims4();
    let plane = h * w;
    let mut counts = vec![0.0; k];
    for z in 0..d {
        for (c, n) in counts.iter_mut().enumerate() {
            *n += target.data()[(z * k + c) * plane..][..plane].iter().sum::<f64>();
        }
    }
    counts
}

pub fn class_weights(gt: &OneHotTarget) -> ClassWeights {
    class_weights_from_counts(&class_counts(&gt.to_tensor()))
}

/// `gamma / K * sum_k W_k * mean BCE_k` on the graph; `p` and `target` are
/// `[D, K, H, W]`.
pub fn bce_prime_graph(g: &Graph, p: &Var, target: Rc<Tensor>, weights: &[f64], gamma: f64) -> Result<Var> {
    g.weighted_bce(p, target, weights, gamma, BCE_EPS)
}

/// Plain mean BCE of a score map against a constant label.
pub fn bce_const_graph(g: &Graph, scores: &Var, label: f64) -> Result<Var> {
    let target = Rc::new(Tensor::full(scores.shape(), label));
    let (n, rest) = (scores.shape()[0], scores.value().numel() / scores.shape()[0]);
    // one pseudo-class holding everything
    let flat = g.reshape(scores, &[n, 1, rest])?;
    let target = Rc::new((*target).clone().reshape(&[n, 1, rest])?);
    g.weighted_bce(&flat, target, &[1.0], 1.0, BCE_EPS)
}

fn eval<T>(f: impl FnOnce(&Graph) -> Result<T>) -> Result<T> {
    f(&Graph::inference())
}

pub fn bce_prime_with_weights(pd: &ProbabilityMask, gt: &OneHotTarget, weights: &[f64], gamma: f64) -> Result<f64> {
    if pd.dim() != gt.data().dim() {
        return Err(Error::shape(gt.data().dim(), pd.dim()));
    }
    eval(|g| {
        let p = g.constant(pd.to_tensor());
        Ok(bce_prime_graph(g, &p, Rc::new(gt.to_tensor()), weights, gamma)?.value().item())
    })
}

/// Scaled, class-weighted BCE with weights derived from `gt`.
pub fn bce_prime(pd: &ProbabilityMask, gt: &OneHotTarget, gamma: f64) -> Result<f64> {
    bce_prime_with_weights(pd, gt, &class_weights(gt).w, gamma)
}

pub fn bce_const(scores: &Tensor, label: f64) -> Result<f64> {
    eval(|g| Ok(bce_const_graph(g, &g.constant(scores.clone()), label)?.value().item()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscLosses {
    pub l_real: f64,
    pub l_fake: f64,
    pub l_disc: f64,
}

pub fn discriminator_losses(d_real: &Tensor, d_fake: &Tensor) -> Result<DiscLosses> {
    let l_real = bce_const(d_real, 1.0)?;
    let l_fake = bce_const(d_fake, 0.0)?;
    Ok(DiscLosses {
        l_real,
        l_fake,
        l_disc: 0.5 * (l_real + l_fake),
    })
}

/// Label the generator's adversarial term aims for: "real" normally, or
/// "fake" when the loss formula is taken verbatim.
pub fn adversarial_label(literal_lfake: bool) -> f64 {
    if literal_lfake {
        0.0
    } else {
        1.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenLoss {
    pub bce_prime: f64,
    pub adversarial: f64,
    pub total: f64,
}

pub fn generator_loss(
    pd: &ProbabilityMask,
    gt: &OneHotTarget,
    d_fake_for_gen: &Tensor,
    gamma: f64,
    literal_lfake: bool,
) -> Result<GenLoss> {
    let bce_prime = bce_prime(pd, gt, gamma)?;
    let adversarial = bce_const(d_fake_for_gen, adversarial_label(literal_lfake))?;
    Ok(GenLoss {
        bce_prime,
        adversarial,
        total: bce_prime + adversarial,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use std::f64::consts::LN_2;

    fn onehot(counts: [usize; 3], len: usize) -> OneHotTarget {
        let mut a = Array4::zeros((3, 1, 1, len));
        for (k, &n) in counts.iter().enumerate() {
            for x in 0..n {
                a[(k, 0, 0, x)] = 1.0;
            }
        }
        OneHotTarget::new(a).unwrap()
    }

    #[test]
    fn weights_from_class_counts() {
        let w = class_weights(&onehot([25, 25, 50], 50)).w;
        assert!((w[0] - 0.75).abs() < 1e-15 && (w[1] - 0.75).abs() < 1e-15 && (w[2] - 0.5).abs() < 1e-15);
        assert_eq!(class_weights(&onehot([100, 0, 0], 100)).w, [1e-3, 1.0, 1.0]);
        let eq = class_weights(&onehot([7, 7, 7], 7)).w;
        assert!(eq.iter().all(|v| (v - 2.0 / 3.0).abs() < 1e-15));
        let empty = class_weights(&onehot([0, 0, 0], 4));
        assert_eq!(empty.w, [1.0, 1.0, 1.0]);
        assert!(empty.empty_target);
    }

    #[test]
    fn single_voxel_worked_example() {
        // one class, one voxel: y = 1, p = 0.5, W = 0.75
        let g = Graph::inference();
        let p = g.constant(Tensor::full(&[1, 1, 1, 1], 0.5));
        let v = bce_prime_graph(&g, &p, Rc::new(Tensor::full(&[1, 1, 1, 1], 1.0)), &[0.75], 200.0).unwrap();
        let expected = 200.0 * 0.75 * LN_2;
        assert!((v.value().item() - expected).abs() < 1e-12);
        assert!((expected - 103.97).abs() < 0.01);
    }

    #[test]
    fn perfect_prediction_and_zero_gamma() {
        let gt = onehot([3, 1, 2], 4);
        let pd = ProbabilityMask::new(gt.data().clone()).unwrap();
        let v = bce_prime(&pd, &gt, 200.0).unwrap();
        assert!(v >= 0.0 && v < 200.0 * 2e-7, "{v}");
        let half = ProbabilityMask::new(Array4::from_elem((3, 1, 1, 4), 0.5)).unwrap();
        assert_eq!(bce_prime(&half, &gt, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn weighted_average_matches_direct_sum() {
        let gt = onehot([1, 2, 3], 4);
        let pd_arr = Array4::from_shape_fn((3, 1, 1, 4), |(k, _, _, x)| 0.1 + 0.2 * k as f64 + 0.05 * x as f64);
        let pd = ProbabilityMask::new(pd_arr.clone()).unwrap();
        let w = class_weights(&gt).w;
        let mut expected = 0.0;
        for k in 0..3 {
            let mut m = 0.0;
            for x in 0..4 {
                let (p, y) = (pd_arr[(k, 0, 0, x)], gt.data()[(k, 0, 0, x)]);
                m += -(y * f64::ln(p) + (1.0 - y) * f64::ln(1.0 - p)) / 4.0;
            }
            expected += w[k] * m / 3.0;
        }
        assert!((bce_prime(&pd, &gt, 200.0).unwrap() - 200.0 * expected).abs() < 1e-10);
    }

    #[test]
    fn discriminator_loss_symmetric_point_and_limit() {
        let half = Tensor::full(&[2, 1, 3, 3], 0.5);
        let l = discriminator_losses(&half, &half).unwrap();
        assert!((l.l_real - LN_2).abs() < 1e-12 && (l.l_fake - LN_2).abs() < 1e-12);
        assert_eq!(l.l_disc, 0.5 * (l.l_real + l.l_fake));
        let perfect = discriminator_losses(&Tensor::full(&[1, 1, 3, 3], 1.0), &Tensor::zeros(&[1, 1, 3, 3])).unwrap();
        assert!(perfect.l_disc < 1e-6);
    }

    #[test]
    fn generator_loss_decomposes() {
        let gt = onehot([1, 1, 1], 2);
        let pd = ProbabilityMask::new(Array4::from_elem((3, 1, 1, 2), 0.3)).unwrap();
        let half = Tensor::full(&[1, 1, 3, 3], 0.5);
        let l = generator_loss(&pd, &gt, &half, 200.0, false).unwrap();
        assert!((l.adversarial - LN_2).abs() < 1e-12);
        assert_eq!(l.total, l.bce_prime + l.adversarial);
        assert!((l.total - l.bce_prime - l.adversarial).abs() < 1e-12);
        let fooled = generator_loss(&pd, &gt, &Tensor::full(&[1, 1, 3, 3], 1.0), 200.0, false).unwrap();
        assert!(fooled.adversarial < 1e-6);
        let literal = generator_loss(&pd, &gt, &Tensor::full(&[1, 1, 3, 3], 1.0), 200.0, true).unwrap();
        assert!(literal.adversarial > 10.0);
    }
}
