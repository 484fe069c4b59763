//! Photometric, 2D and 3D cross-entropy losses with their gradients.

use crate::field::{softmax_in_place, Classifier, GaussianField, Identity, IDENTITY_DIM};
use crate::{Error, Image, LabeledMaskSet, Result};

use super::ssim::ssim_with_gradient;

/// Weighted training objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBundle {
    pub l_img: f64,
    pub l_2d: f64,
    pub l_3d: f64,
    pub l_plane: f64,
    pub total: f64,
    pub lambda_plane: f64,
    pub lambda_2d: f64,
    pub lambda_3d: f64,
    pub lambda_dssim: f64,
}

impl LossBundle {
    pub fn new(
        l_img: f64,
        l_2d: f64,
        l_3d: f64,
        l_plane: f64,
        lambda_plane: f64,
        lambda_2d: f64,
        lambda_3d: f64,
        lambda_dssim: f64,
    ) -> Self {
        Self {
            l_img,
            l_2d,
            l_3d,
            l_plane,
            total: l_img + lambda_plane * l_plane + lambda_2d * l_2d + lambda_3d * l_3d,
            lambda_plane,
            lambda_2d,
            lambda_3d,
            lambda_dssim,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_img, self.l_2d, self.l_3d, self.l_plane, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// `(1 - λ)·mean|render - target| + λ·(1 - SSIM)/2` and its gradient with
/// respect to `render`. SSIM is skipped entirely when `λ = 0`.
pub fn loss_img(render: &Image, target: &Image, lambda_dssim: f64) -> Result<(f64, Vec<f64>)> {
    if !render.same_shape(target) {
        return Err(Error::invalid(format!(
            "render is {}x{}x{}, target is {}x{}x{}",
            render.width, render.height, render.channels, target.width, target.height, target.channels
        )));
    }
    if !(0.0..=1.0).contains(&lambda_dssim) {
        return Err(Error::invalid("lambda_dssim must lie in [0, 1]"));
    }
    let n = render.data.len().max(1) as f64;
    let w1 = (1.0 - lambda_dssim) / n;
    let mut l1 = 0.0;
    let mut grad: Vec<f64> = render
        .data
        .iter()
        .zip(&target.data)
        .map(|(a, b)| {
            let d = a - b;
            l1 += d.abs();
            if d == 0.0 {
                0.0
            } else {
                w1 * d.signum()
            }
        })
        .collect();
    let mut loss = (1.0 - lambda_dssim) * l1 / n;
    if lambda_dssim > 0.0 {
        let (s, g) = ssim_with_gradient(render, target)?;
        loss += lambda_dssim * (1.0 - s) / 2.0;
        for (o, gs) in grad.iter_mut().zip(g) {
            *o -= 0.5 * lambda_dssim * gs;
        }
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierGrad {
    pub weights: Vec<Identity>,
    pub bias: Vec<f64>,
}

impl ClassifierGrad {
    pub fn zeros(classes: usize) -> Self {
        Self {
            weights: vec![Identity::zeros(); classes],
            bias: vec![0.0; classes],
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &ClassifierGrad, scale: f64) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b * scale;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b * scale;
        }
    }
}

/// Mean cross-entropy and gradients with respect to the input features
/// (flattened, 16 per item) and the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassLoss {
    pub value: f64,
    pub d_features: Vec<f64>,
    pub classifier: ClassifierGrad,
    /// Items that carried a usable label.
    pub labeled: usize,
}

/// Cross-entropy of `softmax(W s + b)` against `targets`, averaged over items
/// with a target in `1..K`. Other items are ignored.
fn class_cross_entropy<'a>(
    features: impl Iterator<Item = &'a [f64]>,
    targets: impl Iterator<Item = usize>,
    count: usize,
    classifier: &Classifier,
) -> ClassLoss {
    let k = classifier.classes();
    let items: Vec<(usize, &[f64], usize)> = features
        .zip(targets)
        .enumerate()
        .filter(|(_, (_, t))| *t != 0 && *t < k)
        .map(|(i, (f, t))| (i, f, t))
        .collect();
    let mut out = ClassLoss {
        value: 0.0,
        d_features: vec![0.0; count * IDENTITY_DIM],
        classifier: ClassifierGrad::zeros(k),
        labeled: items.len(),
    };
    if items.is_empty() {
        return out;
    }
    let inv = 1.0 / items.len() as f64;
    let mut probs = vec![0.0; k];
    for (i, f, t) in items {
        let feature = Identity::from_column_slice(f);
        classifier.logits_into(&feature, &mut probs);
        // Log-sum-exp for the loss, softmax for the gradient.
        let max = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + probs.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        out.value += (lse - probs[t]) * inv;
        softmax_in_place(&mut probs);
        probs[t] -= 1.0;
        let mut d_feature = Identity::zeros();
        for c in 0..k {
            let g = probs[c] * inv;
            d_feature += classifier.weights[c] * g;
            out.classifier.weights[c] += feature * g;
            out.classifier.bias[c] += g;
        }
        out.d_features[i * IDENTITY_DIM..(i + 1) * IDENTITY_DIM].copy_from_slice(d_feature.as_slice());
    }
    out
}

/// Pixel cross-entropy of rendered identity features (`H·W·16`) against
/// consistent masks. Unlabeled pixels and IDs outside the classifier range
/// are excluded.
pub fn loss_2d(features: &[f64], classifier: &Classifier, target: &LabeledMaskSet) -> Result<ClassLoss> {
    let pixels = target.width() * target.height();
    if features.len() != pixels * IDENTITY_DIM {
        return Err(Error::invalid(format!(
            "feature image has {} values, mask needs {}",
            features.len(),
            pixels * IDENTITY_DIM
        )));
    }
    Ok(class_cross_entropy(
        features.chunks_exact(IDENTITY_DIM),
        target.ids().iter().map(|&t| t as usize),
        pixels,
        classifier,
    ))
}

/// Cross-entropy of every labeled splat's identity against its class label.
pub fn loss_3d(field: &GaussianField) -> ClassLoss {
    class_cross_entropy(
        field.splats.iter().map(|s| s.identity.as_slice()),
        field.splats.iter().map(|s| s.class_label as usize),
        field.len(),
        &field.classifier,
    )
}
