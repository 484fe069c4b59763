//! Isotropic splat rasterization with analytic gradients, the training
//! losses and the optimizer loop.

mod camera;
mod composite;
mod loss;
mod ssim;
mod train;

pub use camera::Camera;
pub use composite::{
    composite, composite_backward, Footprint, PixelComposite, PixelSplat, PixelSplatGrad, MAX_ALPHA,
    MIN_TRANSMITTANCE,
};
pub use loss::{loss_2d, loss_3d, loss_img, ClassLoss, ClassifierGrad, LossBundle};
pub use ssim::{ssim, ssim_with_gradient, SSIM_WINDOW};
pub use train::{train, LearningRates, LossRecord, TrainConfig, TrainOutcome, TrainView};

use rayon::prelude::*;

use crate::field::{softmax_in_place, GaussianField, GaussianSplat, Identity, IDENTITY_DIM};
use crate::{Image, LabeledMaskSet, Vec3};
use composite::{Prepared, Step, ALPHA_CHANNEL, CHANNELS};

/// Splats at or closer than this depth are culled.
pub const NEAR_PLANE: f64 = 0.01;
/// Footprints are truncated at this many standard deviations.
pub const CUTOFF_SIGMAS: f64 = 3.0;

/// A splat mapped to the image plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub center: [f64; 2],
    pub depth: f64,
    /// Footprint standard deviation in pixels.
    pub sigma: f64,
}

/// Projects a splat, or `None` when it is culled.
pub fn project(splat: &GaussianSplat, camera: &Camera) -> Option<Projection> {
    let pc = camera.world_to_camera(&splat.position);
    project_camera_point(&pc, splat.scale(), camera)
}

fn project_camera_point(pc: &Vec3, scale: f64, camera: &Camera) -> Option<Projection> {
    if !(pc.z > NEAR_PLANE) {
        return None;
    }
    let center = camera.project_camera_point(pc);
    let sigma = camera.focal() * scale / pc.z;
    let reach = CUTOFF_SIGMAS * sigma;
    let (w, h) = ((camera.width - 1) as f64, (camera.height - 1) as f64);
    let misses = center[0] < -reach || center[0] > w + reach || center[1] < -reach || center[1] > h + reach;
    if misses || !center[0].is_finite() || !center[1].is_finite() {
        return None;
    }
    Some(Projection {
        center,
        depth: pc.z,
        sigma,
    })
}

/// Depth-sorted visible splats and per-pixel front-to-back lists.
#[derive(Debug, Clone)]
pub struct Raster {
    width: usize,
    height: usize,
    /// Field index of each visible splat, front to back.
    visible: Vec<usize>,
    camera_points: Vec<Vec3>,
    prepared: Vec<Prepared>,
    /// CSR offsets into `entries`, one range per pixel.
    offsets: Vec<usize>,
    /// Positions in `visible`.
    entries: Vec<u32>,
}

impl Raster {
    pub fn visible_count(&self) -> usize {
        self.visible.len()
    }

    /// Total pixel/splat pairs.
    pub fn entry_count(&self) -> usize {
        self.entries.len()
    }

    fn pixel_list(&self, pixel: usize) -> &[u32] {
        &self.entries[self.offsets[pixel]..self.offsets[pixel + 1]]
    }
}

/// Projects, culls and sorts the field for `camera`, and bins splats into the
/// pixels within their cutoff radius.
pub fn rasterize(field: &GaussianField, camera: &Camera) -> Raster {
    let mut projected: Vec<(usize, Vec3, Projection)> = field
        .splats
        .iter()
        .enumerate()
        .filter_map(|(i, s)| {
            let pc = camera.world_to_camera(&s.position);
            project_camera_point(&pc, s.scale(), camera).map(|p| (i, pc, p))
        })
        .collect();
    projected.sort_by(|a, b| a.2.depth.total_cmp(&b.2.depth).then(a.0.cmp(&b.0)));

    let (width, height) = (camera.width, camera.height);
    let mut visible = Vec::with_capacity(projected.len());
    let mut camera_points = Vec::with_capacity(projected.len());
    let mut prepared = Vec::with_capacity(projected.len());
    for (i, pc, p) in &projected {
        let s = &field.splats[*i];
        let footprint = Footprint {
            center: p.center,
            sigma: p.sigma,
            opacity: s.opacity(),
        };
        visible.push(*i);
        camera_points.push(*pc);
        prepared.push(Prepared::new(footprint, &s.color, &s.identity));
    }

    let mut counts = vec![0usize; width * height + 1];
    for_each_covered(&prepared, width, height, |_, pixel| counts[pixel + 1] += 1);
    for i in 1..counts.len() {
        counts[i] += counts[i - 1];
    }
    let offsets = counts;
    let mut cursor = offsets.clone();
    let mut entries = vec![0u32; offsets[width * height]];
    for_each_covered(&prepared, width, height, |k, pixel| {
        entries[cursor[pixel]] = k as u32;
        cursor[pixel] += 1;
    });

    Raster {
        width,
        height,
        visible,
        camera_points,
        prepared,
        offsets,
        entries,
    }
}

/// Calls `f(splat, pixel)` for every pixel within each splat's cutoff, in
/// splat order.
fn for_each_covered(prepared: &[Prepared], width: usize, height: usize, mut f: impl FnMut(usize, usize)) {
    for (k, s) in prepared.iter().enumerate() {
        let fp = &s.footprint;
        let reach = CUTOFF_SIGMAS * fp.sigma;
        let reach2 = reach * reach;
        let c0 = (fp.center[0] - reach).ceil().max(0.0) as usize;
        let c1 = (fp.center[0] + reach).floor().min((width - 1) as f64);
        let r0 = (fp.center[1] - reach).ceil().max(0.0) as usize;
        let r1 = (fp.center[1] + reach).floor().min((height - 1) as f64);
        if c1 < 0.0 || r1 < 0.0 {
            continue;
        }
        let (c1, r1) = (c1 as usize, r1 as usize);
        for row in r0..=r1 {
            let dy = row as f64 - fp.center[1];
            for col in c0..=c1 {
                let dx = col as f64 - fp.center[0];
                if dx * dx + dy * dy <= reach2 {
                    f(k, row * width + col);
                }
            }
        }
    }
}

/// Rendered images, row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    pub classes: usize,
    /// `H·W·3`.
    pub color: Vec<f64>,
    /// `H·W·16` rendered identity features.
    pub feature: Vec<f64>,
    /// `H·W·K` class probabilities.
    pub class_probs: Vec<f64>,
    /// `H·W` accumulated opacity.
    pub alpha: Vec<f64>,
}

impl RenderOutput {
    pub fn color_image(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            channels: 3,
            data: self.color.clone(),
        }
    }

    pub fn feature_at(&self, pixel: usize) -> Identity {
        Identity::from_column_slice(&self.feature[pixel * IDENTITY_DIM..(pixel + 1) * IDENTITY_DIM])
    }

    /// Most probable class per pixel (lowest on ties). Pixels with alpha
    /// below `min_alpha` are unlabeled.
    pub fn argmax_mask(&self, min_alpha: f64) -> LabeledMaskSet {
        let k = self.classes;
        let ids = (0..self.width * self.height)
            .map(|p| {
                if self.alpha[p] < min_alpha {
                    return 0;
                }
                crate::field::argmax(&self.class_probs[p * k..(p + 1) * k]) as u16
            })
            .collect();
        LabeledMaskSet::new(self.width, self.height, ids).expect("dimensions are consistent")
    }
}

/// Renders color, identity features, class probabilities and alpha.
pub fn render(field: &GaussianField, camera: &Camera) -> RenderOutput {
    let raster = rasterize(field, camera);
    render_raster(field, &raster)
}

/// Forward pass over a prepared raster.
pub fn render_raster(field: &GaussianField, raster: &Raster) -> RenderOutput {
    let (w, h) = (raster.width, raster.height);
    let k = field.class_count();
    let mut color = vec![0.0; w * h * 3];
    let mut feature = vec![0.0; w * h * IDENTITY_DIM];
    let mut class_probs = vec![0.0; w * h * k];
    let mut alpha = vec![0.0; w * h];
    color
        .par_chunks_mut(w * 3)
        .zip(feature.par_chunks_mut(w * IDENTITY_DIM))
        .zip(class_probs.par_chunks_mut(w * k.max(1)))
        .zip(alpha.par_chunks_mut(w))
        .enumerate()
        .for_each(|(row, (((c_row, f_row), p_row), a_row))| {
            let mut out = [0.0; CHANNELS];
            for col in 0..w {
                let pixel = row * w + col;
                composite::forward(
                    [col as f64, row as f64],
                    &raster.prepared,
                    raster.pixel_list(pixel),
                    &mut out,
                    None,
                );
                c_row[col * 3..col * 3 + 3].copy_from_slice(&out[..3]);
                f_row[col * IDENTITY_DIM..(col + 1) * IDENTITY_DIM].copy_from_slice(&out[3..3 + IDENTITY_DIM]);
                a_row[col] = out[ALPHA_CHANNEL];
                if k > 0 {
                    let probs = &mut p_row[col * k..(col + 1) * k];
                    let feat = Identity::from_column_slice(&out[3..3 + IDENTITY_DIM]);
                    field.classifier.logits_into(&feat, probs);
                    softmax_in_place(probs);
                }
            }
        });
    RenderOutput {
        width: w,
        height: h,
        classes: k,
        color,
        feature,
        class_probs,
        alpha,
    }
}

/// Per-splat gradients of a scalar loss, indexed like the field.
#[derive(Debug, Clone, PartialEq)]
pub struct SplatGrads {
    pub position: Vec<Vec3>,
    pub raw_opacity: Vec<f64>,
    pub raw_scale: Vec<f64>,
    pub color: Vec<Vec3>,
    pub identity: Vec<Identity>,
    /// Gradient with respect to the projected center, in pixels.
    pub center: Vec<[f64; 2]>,
}

impl SplatGrads {
    pub fn zeros(len: usize) -> Self {
        Self {
            position: vec![Vec3::zeros(); len],
            raw_opacity: vec![0.0; len],
            raw_scale: vec![0.0; len],
            color: vec![Vec3::zeros(); len],
            identity: vec![Identity::zeros(); len],
            center: vec![[0.0; 2]; len],
        }
    }
}

/// Backpropagates image-space gradients (`d_color`: `H·W·3`, `d_feature`:
/// `H·W·16`, optional `d_alpha`: `H·W`) to the splat parameters.
///
/// Position gradients flow through the projected center only.
pub fn render_backward(
    field: &GaussianField,
    camera: &Camera,
    raster: &Raster,
    d_color: &[f64],
    d_feature: &[f64],
    d_alpha: Option<&[f64]>,
) -> SplatGrads {
    let (w, h) = (raster.width, raster.height);
    assert_eq!(d_color.len(), w * h * 3);
    assert_eq!(d_feature.len(), w * h * IDENTITY_DIM);
    let n = raster.visible.len();
    let mut d_values = vec![[0.0; CHANNELS]; n];
    let mut d_opacity = vec![0.0; n];
    let mut d_center = vec![[0.0; 2]; n];
    let mut d_sigma = vec![0.0; n];
    let mut trace: Vec<Step> = Vec::new();
    let mut out = [0.0; CHANNELS];
    let mut grad_out = [0.0; CHANNELS];
    for pixel in 0..w * h {
        let list = raster.pixel_list(pixel);
        if list.is_empty() {
            continue;
        }
        grad_out[..3].copy_from_slice(&d_color[pixel * 3..pixel * 3 + 3]);
        grad_out[3..3 + IDENTITY_DIM].copy_from_slice(&d_feature[pixel * IDENTITY_DIM..(pixel + 1) * IDENTITY_DIM]);
        grad_out[ALPHA_CHANNEL] = d_alpha.map_or(0.0, |a| a[pixel]);
        if grad_out.iter().all(|&g| g == 0.0) {
            continue;
        }
        let p = [(pixel % w) as f64, (pixel / w) as f64];
        trace.clear();
        composite::forward(p, &raster.prepared, list, &mut out, Some(&mut trace));
        composite::backward(p, &raster.prepared, list, &trace, &grad_out, |pos, dv, d_op, d_c, d_s| {
            let k = list[pos] as usize;
            for (acc, v) in d_values[k].iter_mut().zip(dv) {
                *acc += v;
            }
            d_opacity[k] += d_op;
            d_center[k][0] += d_c[0];
            d_center[k][1] += d_c[1];
            d_sigma[k] += d_s;
        });
    }

    let mut grads = SplatGrads::zeros(field.len());
    for (k, &i) in raster.visible.iter().enumerate() {
        let fp = &raster.prepared[k].footprint;
        let dv = &d_values[k];
        grads.color[i] = Vec3::new(dv[0], dv[1], dv[2]);
        grads.identity[i] = Identity::from_column_slice(&dv[3..3 + IDENTITY_DIM]);
        grads.raw_opacity[i] = d_opacity[k] * fp.opacity * (1.0 - fp.opacity);
        // sigma_2d = f * exp(raw_scale) / z.
        grads.raw_scale[i] = d_sigma[k] * fp.sigma;
        let j = camera.projection_jacobian(&raster.camera_points[k]);
        grads.position[i] = j.transpose() * nalgebra::Vector2::new(d_center[k][0], d_center[k][1]);
        grads.center[i] = d_center[k];
    }
    grads
}
