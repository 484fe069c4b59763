//! The splat collection: initialization from a labeled cloud,
//! densification with class-preserving clone/split, pruning and object
//! edits.

use std::collections::HashMap;

use log::warn;
use nalgebra::SVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::plane::{split_project, PlaneSet};
use crate::spatial::KdTree;
use crate::types::InstanceId;
use crate::{Error, Result, SegmentedPointCloud, Vec3};

pub const IDENTITY_DIM: usize = 16;

pub type Identity = SVector<f64, IDENTITY_DIM>;

/// Children per split splat.
pub const SPLIT_CHILDREN: usize = 2;
/// Scale divisor applied to split children.
pub const SPLIT_SCALE_DIVISOR: f64 = 1.6;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSplat {
    pub position: Vec3,
    pub raw_opacity: f64,
    /// Log of the isotropic standard deviation.
    pub raw_scale: f64,
    pub color: Vec3,
    pub identity: Identity,
    /// `0` marks an unlabeled splat.
    pub class_label: InstanceId,
}

impl GaussianSplat {
    pub fn opacity(&self) -> f64 {
        sigmoid(self.raw_opacity)
    }

    pub fn scale(&self) -> f64 {
        self.raw_scale.exp()
    }
}

/// Linear map from identity features to class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub weights: Vec<Identity>,
    pub bias: Vec<f64>,
}

impl Classifier {
    pub fn zeros(classes: usize) -> Self {
        Self {
            weights: vec![Identity::zeros(); classes],
            bias: vec![0.0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    pub fn logits_into(&self, feature: &Identity, out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.weights[k].dot(feature) + self.bias[k];
        }
    }

    /// Softmax of the logits.
    pub fn probabilities(&self, feature: &Identity) -> Vec<f64> {
        let mut p = vec![0.0; self.classes()];
        self.logits_into(feature, &mut p);
        softmax_in_place(&mut p);
        p
    }

    /// Most likely class, lowest index on ties.
    pub fn predict(&self, feature: &Identity) -> usize {
        let mut logits = vec![0.0; self.classes()];
        self.logits_into(feature, &mut logits);
        argmax(&logits)
    }
}

pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianField {
    pub splats: Vec<GaussianSplat>,
    pub classifier: Classifier,
}

impl GaussianField {
    pub fn len(&self) -> usize {
        self.splats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splats.is_empty()
    }

    /// Number of classes `K`.
    pub fn class_count(&self) -> usize {
        self.classifier.classes()
    }

    pub fn positions(&self) -> Vec<Vec3> {
        self.splats.iter().map(|s| s.position).collect()
    }

    pub fn labels(&self) -> Vec<InstanceId> {
        self.splats.iter().map(|s| s.class_label).collect()
    }

    /// Predicted class of every splat from its identity encoding.
    pub fn predicted_labels(&self) -> Vec<usize> {
        self.splats.iter().map(|s| self.classifier.predict(&s.identity)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.class_count();
        if self.classifier.weights.len() != k {
            return Err(Error::invalid("classifier weight/bias count mismatch"));
        }
        for (i, s) in self.splats.iter().enumerate() {
            let finite = s.position.iter().all(|c| c.is_finite())
                && s.color.iter().all(|c| c.is_finite())
                && s.identity.iter().all(|c| c.is_finite())
                && s.raw_opacity.is_finite()
                && s.raw_scale.is_finite();
            if !finite {
                return Err(Error::invalid(format!("splat {i} has non-finite parameters")));
            }
            if s.class_label as usize >= k {
                return Err(Error::invalid(format!(
                    "splat {i} label {} is not below class count {k}",
                    s.class_label
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleInit {
    Fixed(f64),
    /// Root mean squared distance to the three nearest neighbors.
    NeighborDistance,
}

/// How splats are seeded from a labeled cloud.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitPolicy {
    pub opacity: f64,
    pub scale: ScaleInit,
    pub color: [f64; 3],
    /// Merge points sharing a voxel of this edge length.
    pub voxel_size: Option<f64>,
    /// Standard deviation of the per-label identity initialization.
    pub identity_noise: f64,
}

impl Default for InitPolicy {
    fn default() -> Self {
        Self {
            opacity: 0.1,
            scale: ScaleInit::NeighborDistance,
            color: [0.5; 3],
            voxel_size: None,
            identity_noise: 0.1,
        }
    }
}

/// Deterministic identity vector for a label.
pub fn identity_for_label(label: InstanceId, noise: f64) -> Identity {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1d_e7_17_u64 ^ label as u64);
    Identity::from_fn(|_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * noise
    })
}

/// One splat per cloud point (or per occupied voxel).
pub fn init_from_cloud(cloud: &SegmentedPointCloud, policy: &InitPolicy) -> Result<GaussianField> {
    cloud.validate()?;
    if cloud.is_empty() {
        return Err(Error::invalid("cannot initialize a field from an empty cloud"));
    }
    if !(policy.opacity > 0.0 && policy.opacity < 1.0) {
        return Err(Error::invalid("initial opacity must lie in (0, 1)"));
    }
    let (positions, labels) = match policy.voxel_size {
        Some(v) if v > 0.0 => voxel_downsample(&cloud.positions, &cloud.labels, v),
        Some(_) => return Err(Error::invalid("voxel size must be positive")),
        None => (cloud.positions.clone(), cloud.labels.clone()),
    };
    let scales = match policy.scale {
        ScaleInit::Fixed(s) if s > 0.0 => vec![s; positions.len()],
        ScaleInit::Fixed(_) => return Err(Error::invalid("initial scale must be positive")),
        ScaleInit::NeighborDistance => neighbor_scales(&positions),
    };
    let classes = labels.iter().copied().max().unwrap_or(0) as usize + 1;
    let raw_opacity = logit(policy.opacity);
    let color = Vec3::from(policy.color);
    let splats = positions
        .into_iter()
        .zip(labels)
        .zip(scales)
        .map(|((position, class_label), scale)| GaussianSplat {
            position,
            raw_opacity,
            raw_scale: scale.ln(),
            color,
            identity: identity_for_label(class_label, policy.identity_noise),
            class_label,
        })
        .collect();
    Ok(GaussianField {
        splats,
        classifier: Classifier::zeros(classes),
    })
}

/// Integer voxel coordinate of a point.
pub fn voxel_key(p: &Vec3, size: f64) -> (i64, i64, i64) {
    (
        (p.x / size).floor() as i64,
        (p.y / size).floor() as i64,
        (p.z / size).floor() as i64,
    )
}

/// One point per occupied voxel, in order of first occupancy. The voxel's
/// label is its most frequent label (lowest on ties) and its position the
/// centroid of the points carrying that label.
fn voxel_downsample(positions: &[Vec3], labels: &[InstanceId], size: f64) -> (Vec<Vec3>, Vec<InstanceId>) {
    let mut slot: HashMap<(i64, i64, i64), usize> = HashMap::new();
    let mut cells: Vec<Vec<(InstanceId, Vec3, usize)>> = Vec::new();
    for (p, &l) in positions.iter().zip(labels) {
        let idx = *slot.entry(voxel_key(p, size)).or_insert_with(|| {
            cells.push(Vec::new());
            cells.len() - 1
        });
        let cell = &mut cells[idx];
        match cell.iter_mut().find(|e| e.0 == l) {
            Some(e) => {
                e.1 += p;
                e.2 += 1;
            }
            None => cell.push((l, *p, 1)),
        }
    }
    cells
        .into_iter()
        .map(|cell| {
            let best = cell
                .iter()
                .max_by(|a, b| a.2.cmp(&b.2).then(b.0.cmp(&a.0)))
                .unwrap();
            (best.1 / best.2 as f64, best.0)
        })
        .unzip()
}

fn neighbor_scales(positions: &[Vec3]) -> Vec<f64> {
    let tree = KdTree::new(positions.iter().map(|p| [p.x, p.y, p.z]).collect());
    positions
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let nn = tree.k_nearest_filtered(&[p.x, p.y, p.z], 3, |j| j != i);
            if nn.is_empty() {
                return 0.01;
            }
            let mean = nn.iter().map(|n| n.dist2).sum::<f64>() / nn.len() as f64;
            mean.sqrt().max(1e-7)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensifyParams {
    /// Threshold on the mean screen-space position gradient norm.
    pub grad_threshold: f64,
    /// Splats with scale at or below this are cloned, larger ones split.
    pub scale_threshold: f64,
}

/// Where a splat of a densified field came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lineage {
    Kept(usize),
    Cloned(usize),
    SplitChild(usize),
}

impl Lineage {
    pub fn parent(&self) -> usize {
        match *self {
            Lineage::Kept(i) | Lineage::Cloned(i) | Lineage::SplitChild(i) => i,
        }
    }
}

/// Clones small and splits large high-gradient splats. When `planes` is
/// given, split children with a plane are projected onto it.
pub fn densify(
    field: &GaussianField,
    position_gradient_norms: &[f64],
    params: &DensifyParams,
    planes: Option<&PlaneSet>,
    rng_seed: u64,
) -> GaussianField {
    densify_traced(field, position_gradient_norms, params, planes, rng_seed).0
}

/// [`densify`] that also reports the lineage of every output splat.
///
/// Output order: surviving splats in their original order, then clones in
/// parent order, then split children in parent order.
pub fn densify_traced(
    field: &GaussianField,
    position_gradient_norms: &[f64],
    params: &DensifyParams,
    planes: Option<&PlaneSet>,
    rng_seed: u64,
) -> (GaussianField, Vec<Lineage>) {
    assert_eq!(position_gradient_norms.len(), field.len());
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut kept = Vec::new();
    let mut clones = Vec::new();
    let mut children = Vec::new();
    for (i, splat) in field.splats.iter().enumerate() {
        let hot = position_gradient_norms[i] > params.grad_threshold;
        if !hot {
            kept.push((splat.clone(), Lineage::Kept(i)));
        } else if splat.scale() <= params.scale_threshold {
            kept.push((splat.clone(), Lineage::Kept(i)));
            clones.push((splat.clone(), Lineage::Cloned(i)));
        } else {
            let sigma = splat.scale();
            let plane = planes.and_then(|p| p.get(i));
            for _ in 0..SPLIT_CHILDREN {
                let offset = Vec3::from_fn(|_, _| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * sigma
                });
                let mut child = splat.clone();
                child.position = splat.position + offset;
                if let Some(plane) = plane {
                    child.position = split_project(&child.position, plane);
                }
                child.raw_scale = (sigma / SPLIT_SCALE_DIVISOR).ln();
                children.push((child, Lineage::SplitChild(i)));
            }
        }
    }
    let (splats, lineage) = kept.into_iter().chain(clones).chain(children).unzip();
    (
        GaussianField {
            splats,
            classifier: field.classifier.clone(),
        },
        lineage,
    )
}

/// Removes splats whose opacity is below `opacity_floor`; may return an
/// empty field.
pub fn prune(field: &GaussianField, opacity_floor: f64) -> GaussianField {
    prune_traced(field, opacity_floor).0
}

/// [`prune`] that also returns the original index of every survivor.
pub fn prune_traced(field: &GaussianField, opacity_floor: f64) -> (GaussianField, Vec<usize>) {
    let (splats, kept): (Vec<_>, Vec<_>) = field
        .splats
        .iter()
        .enumerate()
        .filter(|(_, s)| s.opacity() >= opacity_floor)
        .map(|(i, s)| (s.clone(), i))
        .unzip();
    (
        GaussianField {
            splats,
            classifier: field.classifier.clone(),
        },
        kept,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditStatus {
    Applied { affected: usize },
    /// The ID is outside the class range or no splat carries it.
    UnknownId,
}

pub fn delete_object(field: &GaussianField, global_id: InstanceId) -> (GaussianField, EditStatus) {
    let affected = field.splats.iter().filter(|s| s.class_label == global_id).count();
    if global_id as usize >= field.class_count() || affected == 0 {
        warn!("delete: no splats with class {global_id}");
        return (field.clone(), EditStatus::UnknownId);
    }
    let splats = field
        .splats
        .iter()
        .filter(|s| s.class_label != global_id)
        .cloned()
        .collect();
    (
        GaussianField {
            splats,
            classifier: field.classifier.clone(),
        },
        EditStatus::Applied { affected },
    )
}

pub fn move_object(field: &GaussianField, global_id: InstanceId, translation: Vec3) -> (GaussianField, EditStatus) {
    let affected = field.splats.iter().filter(|s| s.class_label == global_id).count();
    if global_id as usize >= field.class_count() || affected == 0 {
        warn!("move: no splats with class {global_id}");
        return (field.clone(), EditStatus::UnknownId);
    }
    let mut out = field.clone();
    for s in out.splats.iter_mut().filter(|s| s.class_label == global_id) {
        s.position += translation;
    }
    (out, EditStatus::Applied { affected })
}
