//! Data shared by every stage: pointmaps, instance masks and labeled clouds.

use std::collections::BTreeMap;

use crate::{Error, Result};

pub type Vec3 = nalgebra::Vector3<f64>;

/// Instance ID stored in masks and point labels. `0` means unlabeled.
pub type InstanceId = u16;

/// Per-pixel 3D points in a world frame shared by all frames of a sequence.
///
/// Pixels are stored row-major; pixel `(i, j)` is row `i`, column `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pointmap {
    width: usize,
    height: usize,
    points: Vec<[f32; 3]>,
    valid: Vec<bool>,
}

impl Pointmap {
    pub fn new(width: usize, height: usize, points: Vec<[f32; 3]>, valid: Vec<bool>) -> Result<Self> {
        let n = width * height;
        if n == 0 {
            return Err(Error::invalid("pointmap must have at least one pixel"));
        }
        if points.len() != n || valid.len() != n {
            return Err(Error::invalid(format!(
                "pointmap {width}x{height} expects {n} points and flags, got {} and {}",
                points.len(),
                valid.len()
            )));
        }
        if let Some(k) = (0..n).find(|&k| valid[k] && points[k].iter().any(|c| !c.is_finite())) {
            return Err(Error::invalid(format!("non-finite point at valid pixel {k}")));
        }
        Ok(Self {
            width,
            height,
            points,
            valid,
        })
    }

    /// A pointmap where every pixel is valid.
    pub fn dense(width: usize, height: usize, points: Vec<[f32; 3]>) -> Result<Self> {
        let valid = vec![true; points.len()];
        Self::new(width, height, points, valid)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn raw_points(&self) -> &[[f32; 3]] {
        &self.points
    }

    pub fn valid_flags(&self) -> &[bool] {
        &self.valid
    }

    pub fn is_valid(&self, idx: usize) -> bool {
        self.valid[idx]
    }

    pub fn point(&self, idx: usize) -> Vec3 {
        let p = self.points[idx];
        Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64)
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Per-pixel instance IDs for one frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledMaskSet {
    width: usize,
    height: usize,
    ids: Vec<InstanceId>,
}

impl LabeledMaskSet {
    pub fn new(width: usize, height: usize, ids: Vec<InstanceId>) -> Result<Self> {
        if width * height == 0 || ids.len() != width * height {
            return Err(Error::invalid(format!(
                "mask {width}x{height} expects {} ids, got {}",
                width * height,
                ids.len()
            )));
        }
        Ok(Self { width, height, ids })
    }

    /// An all-unlabeled mask.
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            ids: vec![0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn ids(&self) -> &[InstanceId] {
        &self.ids
    }

    pub fn ids_mut(&mut self) -> &mut [InstanceId] {
        &mut self.ids
    }

    pub fn get(&self, row: usize, col: usize) -> InstanceId {
        self.ids[row * self.width + col]
    }

    /// Distinct nonzero IDs, ascending.
    pub fn id_list(&self) -> Vec<InstanceId> {
        self.region_sizes().into_keys().collect()
    }

    /// Pixel count of every nonzero ID.
    pub fn region_sizes(&self) -> BTreeMap<InstanceId, usize> {
        let mut sizes = BTreeMap::new();
        for &id in self.ids.iter().filter(|&&id| id != 0) {
            *sizes.entry(id).or_insert(0) += 1;
        }
        sizes
    }

    pub fn same_shape(&self, width: usize, height: usize) -> bool {
        self.width == width && self.height == height
    }
}

/// Labeled 3D points accumulated from associated frames.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SegmentedPointCloud {
    pub positions: Vec<Vec3>,
    pub labels: Vec<InstanceId>,
    pub source_frame: Vec<u32>,
}

impl SegmentedPointCloud {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, position: Vec3, label: InstanceId, frame: u32) {
        self.positions.push(position);
        self.labels.push(label);
        self.source_frame.push(frame);
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Checks the field-length and finiteness invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.positions.len();
        if self.labels.len() != n || self.source_frame.len() != n {
            return Err(Error::invalid("cloud fields have different lengths"));
        }
        if self.positions.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::invalid("cloud contains non-finite positions"));
        }
        Ok(())
    }

    pub fn points_as_arrays(&self) -> Vec<[f64; 3]> {
        self.positions.iter().map(|p| [p.x, p.y, p.z]).collect()
    }
}

/// Interleaved floating-point image, row-major, values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "image {width}x{height}x{channels} expects {} samples, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    /// One channel as a contiguous row-major plane.
    pub fn plane(&self, channel: usize) -> Vec<f64> {
        self.data.iter().skip(channel).step_by(self.channels).copied().collect()
    }
}
