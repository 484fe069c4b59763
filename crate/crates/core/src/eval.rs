//! Segmentation and reconstruction metrics.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::Matrix3;
use rayon::prelude::*;

use crate::assignment::{solve_assignment, CostMatrix};
use crate::field::GaussianField;
use crate::spatial::KdTree;
use crate::{Error, Image, InstanceId, LabeledMaskSet, Result, SegmentedPointCloud, Vec3};

pub use crate::render::ssim;

/// Label given to splats farther than `γ` from every ground-truth point.
pub const NO_CATEGORY: usize = usize::MAX;

/// Pooled intersection and union counts per (predicted, ground-truth) ID.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IoUAccumulator {
    pred_sizes: BTreeMap<InstanceId, u64>,
    gt_sizes: BTreeMap<InstanceId, u64>,
    intersections: BTreeMap<(InstanceId, InstanceId), u64>,
}

impl IoUAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one view's counts.
    pub fn add_view(&mut self, pred: &LabeledMaskSet, gt: &LabeledMaskSet) -> Result<()> {
        if pred.width() != gt.width() || pred.height() != gt.height() {
            return Err(Error::invalid(format!(
                "prediction is {}x{}, ground truth is {}x{}",
                pred.width(),
                pred.height(),
                gt.width(),
                gt.height()
            )));
        }
        for (&p, &g) in pred.ids().iter().zip(gt.ids()) {
            if p != 0 {
                *self.pred_sizes.entry(p).or_default() += 1;
            }
            if g != 0 {
                *self.gt_sizes.entry(g).or_default() += 1;
            }
            if p != 0 && g != 0 {
                *self.intersections.entry((p, g)).or_default() += 1;
            }
        }
        Ok(())
    }

    pub fn intersection(&self, pred: InstanceId, gt: InstanceId) -> u64 {
        self.intersections.get(&(pred, gt)).copied().unwrap_or(0)
    }

    pub fn union(&self, pred: InstanceId, gt: InstanceId) -> u64 {
        self.pred_sizes.get(&pred).copied().unwrap_or(0) + self.gt_sizes.get(&gt).copied().unwrap_or(0)
            - self.intersection(pred, gt)
    }

    pub fn iou(&self, pred: InstanceId, gt: InstanceId) -> f64 {
        let u = self.union(pred, gt);
        if u == 0 {
            0.0
        } else {
            self.intersection(pred, gt) as f64 / u as f64
        }
    }

    /// Mean over ground-truth IDs of the IoU under the assignment that
    /// maximizes total IoU; unmatched ground truth scores zero.
    pub fn mean_iou(&self) -> Result<f64> {
        let gts: Vec<InstanceId> = self.gt_sizes.keys().copied().collect();
        if gts.is_empty() {
            return Err(Error::UndefinedMetric("ground truth has no masks".into()));
        }
        let preds: Vec<InstanceId> = self.pred_sizes.keys().copied().collect();
        if preds.is_empty() {
            return Ok(0.0);
        }
        let costs = CostMatrix::from_fn(preds.len(), gts.len(), |r, c| 1.0 - self.iou(preds[r], gts[c]))?;
        let matching = solve_assignment(&costs, 1.0)?;
        let total: f64 = matching.pairs.iter().map(|&(r, c)| self.iou(preds[r], gts[c])).sum();
        Ok(total / gts.len() as f64)
    }
}

/// Single-view mIoU with optimal one-to-one mask matching.
pub fn miou_single(pred: &LabeledMaskSet, gt: &LabeledMaskSet) -> Result<f64> {
    let mut acc = IoUAccumulator::new();
    acc.add_view(pred, gt)?;
    acc.mean_iou()
}

/// Multi-view mIoU: counts are pooled per global ID over all views before
/// the IoU and the matching are computed.
pub fn miou_multi(preds: &[LabeledMaskSet], gts: &[LabeledMaskSet]) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::invalid(format!(
            "{} predicted views but {} ground-truth views",
            preds.len(),
            gts.len()
        )));
    }
    let mut acc = IoUAccumulator::new();
    for (p, g) in preds.iter().zip(gts) {
        acc.add_view(p, g)?;
    }
    acc.mean_iou()
}

/// Transfers ground-truth labels to query points: the label of the nearest
/// ground-truth point if it lies within `gamma`, else [`NO_CATEGORY`].
pub fn transfer_labels(points: &[Vec3], gt: &SegmentedPointCloud, gamma: f64) -> Vec<usize> {
    let tree = KdTree::new(gt.points_as_arrays());
    points
        .par_iter()
        .map(|p| match tree.nearest_within(&[p.x, p.y, p.z], gamma) {
            Some(n) => gt.labels[n.index] as usize,
            None => NO_CATEGORY,
        })
        .collect()
}

/// 3D mIoU over splats.
///
/// Each splat takes the label of its nearest ground-truth point within
/// `gamma` (otherwise "no category", which no prediction can match). Predicted
/// classes (argmax of the classifier; class 0 excluded) are matched one-to-one
/// to ground-truth classes by maximum total IoU, and the result is the mean
/// over the ground-truth classes of the cloud.
pub fn miou_3d(field: &GaussianField, gt: &SegmentedPointCloud, gamma: f64) -> Result<f64> {
    if gt.is_empty() {
        return Err(Error::UndefinedMetric("ground-truth cloud is empty".into()));
    }
    if !(gamma > 0.0) {
        return Err(Error::invalid("gamma must be positive"));
    }
    let truth = transfer_labels(&field.positions(), gt, gamma);
    let predicted = field.predicted_labels();
    Ok(miou_from_labels(&predicted, &truth, &gt.labels))
}

/// Shared core of [`miou_3d`]: per-splat predicted and transferred labels.
pub fn miou_from_labels(predicted: &[usize], truth: &[usize], gt_labels: &[InstanceId]) -> f64 {
    let gt_classes: Vec<usize> = gt_labels
        .iter()
        .map(|&l| l as usize)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let pred_classes: Vec<usize> = predicted
        .iter()
        .copied()
        .filter(|&p| p != 0)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if gt_classes.is_empty() {
        return 0.0;
    }
    let mut pred_size: BTreeMap<usize, u64> = BTreeMap::new();
    let mut truth_size: BTreeMap<usize, u64> = BTreeMap::new();
    let mut inter: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    for (&p, &t) in predicted.iter().zip(truth) {
        *pred_size.entry(p).or_default() += 1;
        *truth_size.entry(t).or_default() += 1;
        if t != NO_CATEGORY {
            *inter.entry((p, t)).or_default() += 1;
        }
    }
    let iou = |p: usize, g: usize| {
        let i = inter.get(&(p, g)).copied().unwrap_or(0);
        let u = pred_size.get(&p).copied().unwrap_or(0) + truth_size.get(&g).copied().unwrap_or(0) - i;
        if u == 0 {
            0.0
        } else {
            i as f64 / u as f64
        }
    };
    if pred_classes.is_empty() {
        return 0.0;
    }
    let costs = CostMatrix::from_fn(pred_classes.len(), gt_classes.len(), |r, c| {
        1.0 - iou(pred_classes[r], gt_classes[c])
    })
    .expect("IoU lies in [0, 1]");
    let matching = solve_assignment(&costs, 1.0).expect("valid matrix");
    let total: f64 = matching
        .pairs
        .iter()
        .map(|&(r, c)| iou(pred_classes[r], gt_classes[c]))
        .sum();
    total / gt_classes.len() as f64
}

/// Mean nearest-neighbor distance from each point of `from` to `to`.
pub fn mean_nn_distance(from: &[Vec3], to: &[Vec3]) -> Result<f64> {
    if from.is_empty() || to.is_empty() {
        return Err(Error::invalid("nearest-neighbor distance needs non-empty point sets"));
    }
    let tree = KdTree::new(to.iter().map(|p| [p.x, p.y, p.z]).collect());
    let dists: Vec<f64> = from
        .par_iter()
        .map(|p| tree.nearest(&[p.x, p.y, p.z]).expect("non-empty").dist2.sqrt())
        .collect();
    Ok(dists.iter().sum::<f64>() / from.len() as f64)
}

/// Symmetric Chamfer distance with Euclidean (unsquared) distances.
pub fn chamfer(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    Ok(0.5 * (mean_nn_distance(a, b)? + mean_nn_distance(b, a)?))
}

/// `10·log10(1 / MSE)`; `+∞` for identical images.
pub fn psnr(img: &Image, reference: &Image) -> Result<f64> {
    if !img.same_shape(reference) || img.data.is_empty() {
        return Err(Error::invalid("PSNR needs non-empty images of equal shape"));
    }
    let mse = img
        .data
        .iter()
        .zip(&reference.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / img.data.len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    })
}

/// Rigid transform `x ↦ R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }
}

/// Least-squares rigid alignment of `source` onto `target` with known
/// correspondences.
pub fn procrustes(source: &[Vec3], target: &[Vec3]) -> Result<RigidTransform> {
    if source.len() != target.len() || source.len() < 3 {
        return Err(Error::invalid("alignment needs at least 3 corresponding point pairs"));
    }
    let n = source.len() as f64;
    let cs = source.iter().sum::<Vec3>() / n;
    let ct = target.iter().sum::<Vec3>() / n;
    let mut h = Matrix3::zeros();
    for (s, t) in source.iter().zip(target) {
        h += (s - cs) * (t - ct).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let mut d = Matrix3::identity();
    if (v_t.transpose() * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rotation = v_t.transpose() * d * u.transpose();
    Ok(RigidTransform {
        rotation,
        translation: ct - rotation * cs,
    })
}
