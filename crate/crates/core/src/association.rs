//! Pointmap-driven mask association across frames.
//!
//! Pixel correspondences come from nearest neighbors between pointmap
//! values, the overlap of two masks is counted through that correspondence,
//! and masks are matched by a thresholded assignment on
//! `1 - overlap / min(|a|, |b|)`.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::{solve_assignment, CostMatrix};
use crate::spatial::KdTree;
use crate::types::InstanceId;
use crate::{Error, LabeledMaskSet, Pointmap, Result, SegmentedPointCloud};

/// Per-pixel map from a source frame into a target frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorrespondenceMap {
    width: usize,
    height: usize,
    target_width: usize,
    /// Row-major target pixel index; meaningless where `defined` is false.
    target: Vec<u32>,
    defined: Vec<bool>,
}

impl CorrespondenceMap {
    /// The identity map on a `width x height` frame, defined where `valid`.
    pub fn identity(width: usize, height: usize, valid: &[bool]) -> Self {
        Self {
            width,
            height,
            target_width: width,
            target: (0..(width * height) as u32).collect(),
            defined: valid.to_vec(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// `(row, col)` in the target frame for source pixel `(row, col)`.
    pub fn get(&self, row: usize, col: usize) -> Option<(usize, usize)> {
        self.target_index(row * self.width + col)
            .map(|t| (t / self.target_width, t % self.target_width))
    }

    pub fn target_index(&self, source_index: usize) -> Option<usize> {
        self.defined[source_index].then(|| self.target[source_index] as usize)
    }
}

/// Maps every valid source pixel to the valid target pixel whose point is
/// closest in 3D, breaking ties by the lowest row-major target index.
pub fn build_correspondence(source: &Pointmap, target: &Pointmap) -> Result<CorrespondenceMap> {
    let (indices, pts): (Vec<usize>, Vec<[f64; 3]>) = (0..target.len())
        .filter(|&k| target.is_valid(k))
        .map(|k| {
            let p = target.point(k);
            (k, [p.x, p.y, p.z])
        })
        .unzip();
    if indices.is_empty() {
        return Err(Error::EmptyTarget);
    }
    // Tree indices follow ascending target pixel order, so the tree's
    // lowest-index tie-break is the row-major one.
    let tree = KdTree::new(pts);
    let target_of: Vec<Option<u32>> = (0..source.len())
        .into_par_iter()
        .map(|k| {
            if !source.is_valid(k) {
                return None;
            }
            let p = source.point(k);
            tree.nearest(&[p.x, p.y, p.z])
                .map(|n| indices[n.index] as u32)
        })
        .collect();
    Ok(CorrespondenceMap {
        width: source.width(),
        height: source.height(),
        target_width: target.width(),
        defined: target_of.iter().map(Option::is_some).collect(),
        target: target_of.into_iter().map(|t| t.unwrap_or(0)).collect(),
    })
}

/// Number of pixels in mask `a` whose correspondence lands in mask `b`.
pub fn masked_overlap(
    mask_a_id: InstanceId,
    masks_a: &LabeledMaskSet,
    mask_b_id: InstanceId,
    masks_b: &LabeledMaskSet,
    phi: &CorrespondenceMap,
) -> usize {
    debug_assert!(masks_a.same_shape(phi.width(), phi.height()));
    masks_a
        .ids()
        .iter()
        .enumerate()
        .filter(|&(k, &id)| {
            id == mask_a_id
                && phi
                    .target_index(k)
                    .is_some_and(|t| masks_b.ids()[t] == mask_b_id)
        })
        .count()
}

/// `1 - overlap / min(size_a, size_b)`.
pub fn matching_cost(overlap: usize, size_a: usize, size_b: usize) -> Result<f64> {
    if size_a == 0 || size_b == 0 {
        return Err(Error::invalid("mask sizes must be at least 1"));
    }
    let smaller = size_a.min(size_b);
    if overlap > smaller {
        return Err(Error::invalid(format!(
            "overlap {overlap} exceeds the smaller mask size {smaller}"
        )));
    }
    Ok(1.0 - overlap as f64 / smaller as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AssociationMode {
    /// Match each frame against the previous frame's relabeled masks only.
    Adjacent,
    /// Match each frame against the labels of the cloud accumulated so far.
    #[default]
    Accumulated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssociationParams {
    pub mode: AssociationMode,
    pub reject_above: f64,
    pub min_mask_pixels: usize,
    /// Radius for reading labels off the accumulated cloud.
    pub gamma_assoc: f64,
}

impl Default for AssociationParams {
    fn default() -> Self {
        Self {
            mode: AssociationMode::Accumulated,
            reject_above: 0.7,
            min_mask_pixels: 16,
            gamma_assoc: 0.1,
        }
    }
}

impl AssociationParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.reject_above) {
            return Err(Error::invalid("reject_above must lie in [0, 1]"));
        }
        if !(self.gamma_assoc > 0.0 && self.gamma_assoc.is_finite()) {
            return Err(Error::invalid("gamma_assoc must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Association {
    /// Masks relabeled with global IDs, one per input frame.
    pub masks: Vec<LabeledMaskSet>,
    pub cloud: SegmentedPointCloud,
}

/// Relabels a sequence of per-frame masks into globally consistent IDs.
pub fn associate_sequence(
    frames: &[(Pointmap, LabeledMaskSet)],
    params: &AssociationParams,
) -> Result<Association> {
    params.validate()?;
    check_frames(frames)?;

    let (first_points, first_masks) = &frames[0];
    let mut next_id = first_masks.id_list().last().copied().unwrap_or(0) as u32 + 1;
    let mut cloud = SegmentedPointCloud::new();
    append_to_cloud(&mut cloud, first_points, first_masks, 0);
    let mut out = vec![first_masks.clone()];

    for t in 1..frames.len() {
        let (points, masks) = &frames[t];
        let (source_ids, phi) = match params.mode {
            AssociationMode::Adjacent => {
                let prev_points = &frames[t - 1].0;
                let phi = match build_correspondence(prev_points, points) {
                    Ok(phi) => Some(phi),
                    Err(Error::EmptyTarget) => None,
                    Err(e) => return Err(e),
                };
                (out[t - 1].clone(), phi)
            }
            AssociationMode::Accumulated => {
                let virtual_mask = project_cloud_labels(&cloud, points, params.gamma_assoc);
                let phi = CorrespondenceMap::identity(
                    points.width(),
                    points.height(),
                    points.valid_flags(),
                );
                (virtual_mask, Some(phi))
            }
        };
        let source_valid = match params.mode {
            AssociationMode::Adjacent => frames[t - 1].0.valid_flags(),
            AssociationMode::Accumulated => points.valid_flags(),
        };

        let mapping = match phi {
            Some(phi) => match_masks(&source_ids, source_valid, masks, points.valid_flags(), &phi, params)?,
            None => BTreeMap::new(),
        };

        let target_sizes = valid_region_sizes(masks, points.valid_flags());
        let mut relabel: BTreeMap<InstanceId, InstanceId> = BTreeMap::new();
        for id in masks.id_list() {
            let global = match mapping.get(&id) {
                Some(&g) => g,
                None if target_sizes.get(&id).copied().unwrap_or(0) >= params.min_mask_pixels => {
                    let fresh = u16::try_from(next_id)
                        .map_err(|_| Error::invalid("global instance IDs exhausted the 16-bit range"))?;
                    next_id += 1;
                    fresh
                }
                None => 0,
            };
            relabel.insert(id, global);
        }
        let ids = masks
            .ids()
            .iter()
            .map(|id| if *id == 0 { 0 } else { relabel[id] })
            .collect();
        let relabeled = LabeledMaskSet::new(masks.width(), masks.height(), ids)?;
        next_id = next_id.max(relabeled.id_list().last().copied().unwrap_or(0) as u32 + 1);
        append_to_cloud(&mut cloud, points, &relabeled, t as u32);
        out.push(relabeled);
    }

    Ok(Association { masks: out, cloud })
}

/// Keeps every frame's own IDs (no cross-frame association) and accumulates
/// the cloud from them. This is the "fusion off" ablation.
pub fn independent_sequence(frames: &[(Pointmap, LabeledMaskSet)]) -> Result<Association> {
    check_frames(frames)?;
    let mut cloud = SegmentedPointCloud::new();
    for (t, (points, masks)) in frames.iter().enumerate() {
        append_to_cloud(&mut cloud, points, masks, t as u32);
    }
    Ok(Association {
        masks: frames.iter().map(|f| f.1.clone()).collect(),
        cloud,
    })
}

fn check_frames(frames: &[(Pointmap, LabeledMaskSet)]) -> Result<()> {
    if frames.is_empty() {
        return Err(Error::invalid("association needs at least one frame"));
    }
    for (t, (p, m)) in frames.iter().enumerate() {
        if !m.same_shape(p.width(), p.height()) {
            return Err(Error::invalid(format!(
                "frame {t}: mask {}x{} does not match pointmap {}x{}",
                m.width(),
                m.height(),
                p.width(),
                p.height()
            )));
        }
    }
    Ok(())
}

fn valid_region_sizes(masks: &LabeledMaskSet, valid: &[bool]) -> BTreeMap<InstanceId, usize> {
    let mut sizes = BTreeMap::new();
    for (&id, _) in masks.ids().iter().zip(valid).filter(|(id, v)| **id != 0 && **v) {
        *sizes.entry(id).or_insert(0) += 1;
    }
    sizes
}

/// Returns target mask ID -> source ID for every accepted match.
fn match_masks(
    source: &LabeledMaskSet,
    source_valid: &[bool],
    target: &LabeledMaskSet,
    target_valid: &[bool],
    phi: &CorrespondenceMap,
    params: &AssociationParams,
) -> Result<BTreeMap<InstanceId, InstanceId>> {
    let source_sizes = valid_region_sizes(source, source_valid);
    let target_sizes = valid_region_sizes(target, target_valid);
    if source_sizes.is_empty() || target_sizes.is_empty() {
        return Ok(BTreeMap::new());
    }
    let mut overlaps: BTreeMap<(InstanceId, InstanceId), usize> = BTreeMap::new();
    for (k, &a) in source.ids().iter().enumerate() {
        if a == 0 || !source_valid[k] {
            continue;
        }
        if let Some(t) = phi.target_index(k) {
            let b = target.ids()[t];
            if b != 0 && target_valid[t] {
                *overlaps.entry((a, b)).or_insert(0) += 1;
            }
        }
    }
    let rows: Vec<(InstanceId, usize)> = source_sizes.into_iter().collect();
    let cols: Vec<(InstanceId, usize)> = target_sizes.into_iter().collect();
    let mut values = Vec::with_capacity(rows.len() * cols.len());
    for &(a, size_a) in &rows {
        for &(b, size_b) in &cols {
            // The correspondence is many-to-one, so the raw count can exceed
            // the smaller mask; saturate at full containment.
            let overlap = overlaps.get(&(a, b)).copied().unwrap_or(0).min(size_a.min(size_b));
            values.push(matching_cost(overlap, size_a, size_b)?);
        }
    }
    let costs = CostMatrix::new(rows.len(), cols.len(), values)?;
    let assignment = solve_assignment(&costs, params.reject_above)?;
    Ok(assignment
        .pairs
        .iter()
        .map(|&(r, c)| (cols[c].0, rows[r].0))
        .collect())
}

/// Per-pixel label of the nearest accumulated cloud point within `radius`.
fn project_cloud_labels(cloud: &SegmentedPointCloud, points: &Pointmap, radius: f64) -> LabeledMaskSet {
    let mut ids = vec![0; points.len()];
    if !cloud.is_empty() {
        let tree = KdTree::new(cloud.points_as_arrays());
        ids = (0..points.len())
            .into_par_iter()
            .map(|k| {
                if !points.is_valid(k) {
                    return 0;
                }
                let p = points.point(k);
                tree.nearest_within(&[p.x, p.y, p.z], radius)
                    .map_or(0, |n| cloud.labels[n.index])
            })
            .collect();
    }
    LabeledMaskSet::new(points.width(), points.height(), ids).expect("pointmap dimensions are valid")
}

fn append_to_cloud(cloud: &mut SegmentedPointCloud, points: &Pointmap, masks: &LabeledMaskSet, frame: u32) {
    for (k, &id) in masks.ids().iter().enumerate() {
        if id != 0 && points.is_valid(k) {
            cloud.push(points.point(k), id, frame);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_pointmap(w: usize, h: usize, f: impl Fn(usize, usize) -> [f32; 3]) -> Pointmap {
        let pts = (0..h).flat_map(|i| (0..w).map(move |j| (i, j))).map(|(i, j)| f(i, j)).collect();
        Pointmap::dense(w, h, pts).unwrap()
    }

    fn brute_correspondence(s: &Pointmap, t: &Pointmap, k: usize) -> usize {
        let p = s.point(k);
        (0..t.len())
            .filter(|&q| t.is_valid(q))
            .min_by(|&a, &b| {
                (t.point(a) - p)
                    .norm_squared()
                    .total_cmp(&(t.point(b) - p).norm_squared())
                    .then(a.cmp(&b))
            })
            .unwrap()
    }

    #[test]
    fn identical_pointmaps_give_identity() {
        let pm = grid_pointmap(5, 4, |i, j| [j as f32, i as f32, (i * j) as f32 * 0.1]);
        let phi = build_correspondence(&pm, &pm).unwrap();
        for i in 0..4 {
            for j in 0..5 {
                assert_eq!(phi.get(i, j), Some((i, j)));
            }
        }
    }

    #[test]
    fn column_shift_is_recovered() {
        let (w, h) = (8, 6);
        let f = |i: usize, j: isize| [j as f32 * 0.3, i as f32 * 0.3, ((i as isize * 7 + j * 3) % 5) as f32 * 0.01];
        let source = grid_pointmap(w, h, |i, j| f(i, j as isize));
        let target = grid_pointmap(w, h, |i, j| f(i, j as isize - 1));
        let phi = build_correspondence(&source, &target).unwrap();
        for i in 0..h {
            for j in 0..w - 1 {
                assert_eq!(phi.get(i, j), Some((i, j + 1)));
                assert_eq!(phi.target_index(i * w + j).unwrap(), brute_correspondence(&source, &target, i * w + j));
            }
        }
    }

    #[test]
    fn cross_mapping_two_pixels() {
        let s = Pointmap::dense(2, 1, vec![[0.0, 0.0, 0.0], [5.0, 5.0, 5.0]]).unwrap();
        let t = Pointmap::dense(2, 1, vec![[5.0, 5.0, 4.0], [0.0, 0.0, 1.0]]).unwrap();
        let phi = build_correspondence(&s, &t).unwrap();
        assert_eq!(phi.get(0, 0), Some((0, 1)));
        assert_eq!(phi.get(0, 1), Some((0, 0)));
    }

    #[test]
    fn invalid_pixels_are_undefined_and_ties_pick_lowest() {
        let s = Pointmap::new(2, 1, vec![[0.0; 3], [1.0; 3]], vec![true, false]).unwrap();
        let t = Pointmap::dense(3, 1, vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
        let phi = build_correspondence(&s, &t).unwrap();
        assert_eq!(phi.get(0, 0), Some((0, 0)));
        assert_eq!(phi.get(0, 1), None);
        let empty = Pointmap::new(1, 1, vec![[0.0; 3]], vec![false]).unwrap();
        assert!(matches!(build_correspondence(&s, &empty), Err(Error::EmptyTarget)));
    }

    #[test]
    fn random_correspondence_matches_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut rand_pm = |w, h| {
            let pts = (0..w * h).map(|_| [rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>()]).collect();
            let valid = (0..w * h).map(|_| rng.random_bool(0.8)).collect();
            Pointmap::new(w, h, pts, valid).unwrap()
        };
        let (s, t) = (rand_pm(12, 9), rand_pm(10, 11));
        let phi = build_correspondence(&s, &t).unwrap();
        for k in 0..s.len() {
            let expect = s.is_valid(k).then(|| brute_correspondence(&s, &t, k));
            assert_eq!(phi.target_index(k), expect);
        }
    }

    fn halves(w: usize, h: usize) -> (LabeledMaskSet, LabeledMaskSet) {
        let left = (0..h).flat_map(|_| (0..w).map(move |j| if j < w / 2 { 1 } else { 0 })).collect();
        let top = (0..h).flat_map(|i| (0..w).map(move |_| if i < h / 2 { 2 } else { 0 })).collect();
        (LabeledMaskSet::new(w, h, left).unwrap(), LabeledMaskSet::new(w, h, top).unwrap())
    }

    #[test]
    fn overlap_examples() {
        let (w, h) = (4, 4);
        let phi = CorrespondenceMap::identity(w, h, &[true; 16]);
        let full_a = LabeledMaskSet::new(w, h, vec![1; 16]).unwrap();
        let full_b = LabeledMaskSet::new(w, h, vec![3; 16]).unwrap();
        assert_eq!(masked_overlap(1, &full_a, 3, &full_b, &phi), 16);

        let (left, top) = halves(w, h);
        assert_eq!(masked_overlap(1, &left, 2, &top, &phi), 4);

        let right = LabeledMaskSet::new(w, h, left.ids().iter().map(|&v| if v == 0 { 5 } else { 0 }).collect()).unwrap();
        assert_eq!(masked_overlap(1, &left, 5, &right, &phi), 0);
    }

    #[test]
    fn cost_examples() {
        assert_eq!(matching_cost(4, 4, 10).unwrap(), 0.0);
        assert_eq!(matching_cost(0, 4, 10).unwrap(), 1.0);
        assert_eq!(matching_cost(3, 6, 4).unwrap(), 0.25);
        assert!(matching_cost(5, 4, 10).is_err());
        assert!(matching_cost(0, 0, 10).is_err());
    }

    fn three_mask_frame(perm: [u16; 3]) -> (Pointmap, LabeledMaskSet) {
        let (w, h) = (12, 8);
        let pm = grid_pointmap(w, h, |i, j| [j as f32 * 0.05, i as f32 * 0.05, 0.0]);
        let ids = (0..h)
            .flat_map(|i| (0..w).map(move |j| (i, j)))
            .map(|(i, j)| if i == 0 { 0 } else { perm[j / 4] })
            .collect();
        (pm, LabeledMaskSet::new(w, h, ids).unwrap())
    }

    #[test]
    fn single_frame_passes_through() {
        let frame = three_mask_frame([4, 9, 2]);
        let out = associate_sequence(std::slice::from_ref(&frame), &AssociationParams::default()).unwrap();
        assert_eq!(out.masks[0], frame.1);
        assert_eq!(out.cloud.len(), 12 * 7);
    }

    #[test]
    fn permuted_second_frame_recovers_ids() {
        for mode in [AssociationMode::Adjacent, AssociationMode::Accumulated] {
            let frames = vec![three_mask_frame([4, 9, 2]), three_mask_frame([7, 1, 3])];
            let params = AssociationParams { mode, ..Default::default() };
            let out = associate_sequence(&frames, &params).unwrap();
            assert_eq!(out.masks[1], frames[0].1, "{mode:?}");
            assert_eq!(out.cloud.len(), 2 * 12 * 7);
        }
    }

    #[test]
    fn small_unmatched_masks_are_dropped_and_large_get_fresh_ids() {
        let (pm, m0) = three_mask_frame([1, 2, 3]);
        // Second frame: a new object in the top row (12 px) plus a big one
        // replacing mask 3 on a different surface.
        let pts2: Vec<[f32; 3]> = (0..pm.len())
            .map(|k| {
                let p = pm.raw_points()[k];
                if k % 12 >= 8 { [p[0], p[1], 5.0] } else { p }
            })
            .collect();
        let pm2 = Pointmap::dense(12, 8, pts2).unwrap();
        let ids2 = (0..pm.len())
            .map(|k| if k < 12 { 6 } else { [8, 5, 4][(k % 12) / 4] })
            .collect();
        let m2 = LabeledMaskSet::new(12, 8, ids2).unwrap();
        let out = associate_sequence(&[(pm, m0), (pm2, m2)], &AssociationParams::default()).unwrap();
        let got = out.masks[1].ids();
        assert_eq!(got[0], 0, "12-pixel unmatched mask must be dropped");
        assert_eq!(got[12], 1);
        assert_eq!(got[12 + 4], 2);
        assert_eq!(got[12 + 8], 4, "unmatched 28-pixel mask gets the next fresh id");
    }

    #[test]
    fn empty_sequence_is_rejected() {
        assert!(associate_sequence(&[], &AssociationParams::default()).is_err());
    }
}
