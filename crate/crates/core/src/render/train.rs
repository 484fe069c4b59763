//! Adam optimization of a field against posed views with consistent masks.

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::field::{densify_traced, prune_traced, DensifyParams, GaussianField, Lineage, IDENTITY_DIM};
use crate::plane::{fit_planes, plane_loss, PlaneSet};
use crate::{Error, Image, LabeledMaskSet, Result, Vec3};

use super::loss::{loss_2d, loss_3d, loss_img, ClassifierGrad, LossBundle};
use super::{rasterize, render_backward, render_raster, Camera};

/// Per-group Adam step sizes. The position rate decays exponentially from
/// `position_init` to `position_final` and is scaled by the scene extent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub position_init: f64,
    pub position_final: f64,
    pub opacity: f64,
    pub scale: f64,
    pub color: f64,
    pub identity: f64,
    pub classifier: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position_init: 1.6e-4,
            position_final: 1.6e-6,
            opacity: 0.05,
            scale: 5e-3,
            color: 2.5e-3,
            identity: 2.5e-3,
            classifier: 2.5e-3,
        }
    }
}

impl LearningRates {
    pub fn zero() -> Self {
        Self {
            position_init: 0.0,
            position_final: 0.0,
            opacity: 0.0,
            scale: 0.0,
            color: 0.0,
            identity: 0.0,
            classifier: 0.0,
        }
    }

    fn position_at(&self, iteration: usize, total: usize) -> f64 {
        if self.position_init <= 0.0 || self.position_final <= 0.0 {
            return self.position_init.max(0.0);
        }
        let t = if total > 1 {
            iteration as f64 / (total - 1) as f64
        } else {
            0.0
        };
        ((1.0 - t) * self.position_init.ln() + t * self.position_final.ln()).exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lambda_plane: f64,
    pub lambda_2d: f64,
    pub lambda_3d: f64,
    pub lambda_dssim: f64,
    /// Same-class neighbors per plane fit.
    pub neighbors: usize,
    pub plane_refresh_interval: usize,
    /// Project split children onto their parent's plane.
    pub split_projection: bool,
    /// Densification runs every `densify_interval` iterations in
    /// `(densify_from, densify_until]`.
    pub densify_from: usize,
    pub densify_until: usize,
    pub densify_interval: usize,
    /// Threshold on the mean normalized-device-space position gradient.
    pub grad_threshold: f64,
    /// Clone/split boundary as a fraction of the scene extent.
    pub scale_threshold_fraction: f64,
    pub opacity_floor: f64,
    pub seed: u64,
    pub learning_rates: LearningRates,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            lambda_plane: 10.0,
            lambda_2d: 1.0,
            lambda_3d: 1.0,
            lambda_dssim: 0.2,
            neighbors: 10,
            plane_refresh_interval: 1000,
            split_projection: true,
            densify_from: 500,
            densify_until: 1500,
            densify_interval: 100,
            grad_threshold: 2e-4,
            scale_threshold_fraction: 0.01,
            opacity_floor: 0.005,
            seed: 0,
            learning_rates: LearningRates::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("lambda_plane", self.lambda_plane),
            ("lambda_2d", self.lambda_2d),
            ("lambda_3d", self.lambda_3d),
            ("grad_threshold", self.grad_threshold),
            ("scale_threshold_fraction", self.scale_threshold_fraction),
            ("opacity_floor", self.opacity_floor),
        ];
        for (name, v) in weights {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.lambda_dssim) {
            return Err(Error::invalid("lambda_dssim must lie in [0, 1]"));
        }
        if self.plane_refresh_interval == 0 || self.densify_interval == 0 {
            return Err(Error::invalid("intervals must be at least 1"));
        }
        if self.neighbors < 3 {
            return Err(Error::invalid("plane fits need at least 3 neighbors"));
        }
        let lr = &self.learning_rates;
        for v in [lr.position_init, lr.position_final, lr.opacity, lr.scale, lr.color, lr.identity, lr.classifier] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid("learning rates must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

/// A posed training image with its consistent masks.
#[derive(Debug, Clone)]
pub struct TrainView {
    pub image: Image,
    pub masks: LabeledMaskSet,
    pub camera: Camera,
}

/// Loss components at one iteration, before that iteration's update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub l_img: f64,
    pub l_2d: f64,
    pub l_3d: f64,
    pub l_plane: f64,
    pub total: f64,
    pub splat_count: usize,
}

impl LossRecord {
    pub const CSV_HEADER: &'static str = "iteration,l_img,l_2d,l_3d,l_plane,total,splat_count";

    /// Floats use the shortest representation that parses back exactly.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:?},{:?},{:?},{:?},{:?},{}",
            self.iteration, self.l_img, self.l_2d, self.l_3d, self.l_plane, self.total, self.splat_count
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub field: GaussianField,
    pub log: Vec<LossRecord>,
    pub planes: PlaneSet,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-15;
/// Per-splat optimizer slots: position 3, opacity 1, scale 1, color 3,
/// identity 16.
const SLOTS: usize = 3 + 1 + 1 + 3 + IDENTITY_DIM;

#[derive(Debug, Clone, Copy)]
struct Moments {
    m: [f64; SLOTS],
    v: [f64; SLOTS],
}

const ZERO_MOMENTS: Moments = Moments {
    m: [0.0; SLOTS],
    v: [0.0; SLOTS],
};

#[inline]
fn adam(p: &mut f64, g: f64, m: &mut f64, v: &mut f64, lr: f64, bc1: f64, bc2: f64) {
    *m = BETA1 * *m + (1.0 - BETA1) * g;
    *v = BETA2 * *v + (1.0 - BETA2) * g * g;
    let m_hat = *m / bc1;
    let v_hat = *v / bc2;
    *p -= lr * m_hat / (v_hat.sqrt() + EPS);
}

/// Radius of the camera centers about their mean (×1.1), or of the splat
/// positions when there is a single view.
fn scene_extent(views: &[TrainView], field: &GaussianField) -> f64 {
    let radius = |pts: &[Vec3]| {
        let mean = pts.iter().sum::<Vec3>() / pts.len() as f64;
        pts.iter().map(|p| (p - mean).norm()).fold(0.0, f64::max)
    };
    let centers: Vec<Vec3> = views.iter().map(|v| v.camera.center()).collect();
    let r = 1.1 * radius(&centers);
    if r > 1e-6 {
        return r;
    }
    let r = radius(&field.positions());
    if r > 1e-6 {
        r
    } else {
        1.0
    }
}

fn diagnostic(iteration: usize, view: usize, losses: &LossBundle, field: &GaussianField) -> String {
    let bad = field
        .splats
        .iter()
        .filter(|s| !(s.position.iter().all(|c| c.is_finite()) && s.raw_opacity.is_finite() && s.raw_scale.is_finite()))
        .count();
    format!(
        "iteration={iteration} view={view} l_img={:?} l_2d={:?} l_3d={:?} l_plane={:?} total={:?} splats={} nonfinite_splats={bad}",
        losses.l_img,
        losses.l_2d,
        losses.l_3d,
        losses.l_plane,
        losses.total,
        field.len()
    )
}

/// Optimizes `field` against `views`. Returns the trained field, one loss
/// record per iteration and the last plane set.
pub fn train(field: &GaussianField, views: &[TrainView], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    field.validate()?;
    if views.is_empty() {
        return Err(Error::invalid("training needs at least one view"));
    }
    if field.is_empty() {
        return Err(Error::invalid("training needs a non-empty field"));
    }
    for (i, v) in views.iter().enumerate() {
        v.camera.validate()?;
        let (w, h) = (v.camera.width, v.camera.height);
        if v.image.width != w || v.image.height != h || v.image.channels != 3 || !v.masks.same_shape(w, h) {
            return Err(Error::invalid(format!("view {i}: image, masks and camera sizes disagree")));
        }
    }

    let mut field = field.clone();
    let extent = scene_extent(views, &field);
    let scale_threshold = config.scale_threshold_fraction * extent;
    let lr = config.learning_rates;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut moments = vec![ZERO_MOMENTS; field.len()];
    let k = field.class_count();
    let mut cls_m = ClassifierGrad::zeros(k);
    let mut cls_v = ClassifierGrad::zeros(k);
    let mut grad_accum = vec![0.0; field.len()];
    let mut grad_count = vec![0u32; field.len()];
    let mut planes = PlaneSet::empty(field.len());
    let mut log = Vec::with_capacity(config.iterations);

    for it in 0..config.iterations {
        if it % config.plane_refresh_interval == 0 {
            planes = fit_planes(&field.positions(), &field.labels(), config.neighbors, it);
        }
        if order.is_empty() {
            order = (0..views.len()).collect();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let view_index = order.pop().expect("refilled above");
        let view = &views[view_index];

        let raster = rasterize(&field, &view.camera);
        let out = render_raster(&field, &raster);
        let rendered = out.color_image();
        let (l_img, d_color) = loss_img(&rendered, &view.image, config.lambda_dssim)?;
        let l2 = loss_2d(&out.feature, &field.classifier, &view.masks)?;
        let l3 = loss_3d(&field);
        let positions = field.positions();
        let (l_plane, d_plane) = plane_loss(&positions, &planes);
        let losses = LossBundle::new(
            l_img,
            l2.value,
            l3.value,
            l_plane,
            config.lambda_plane,
            config.lambda_2d,
            config.lambda_3d,
            config.lambda_dssim,
        );
        log.push(LossRecord {
            iteration: it,
            l_img: losses.l_img,
            l_2d: losses.l_2d,
            l_3d: losses.l_3d,
            l_plane: losses.l_plane,
            total: losses.total,
            splat_count: field.len(),
        });
        if !losses.is_finite() {
            return Err(Error::Divergence {
                iteration: it,
                diagnostic: diagnostic(it, view_index, &losses, &field),
            });
        }
        if it % 100 == 0 {
            debug!(
                "iter {it}: total {:.5} img {:.5} 2d {:.5} 3d {:.5} plane {:.6} splats {}",
                losses.total,
                losses.l_img,
                losses.l_2d,
                losses.l_3d,
                losses.l_plane,
                field.len()
            );
        }

        let d_feature: Vec<f64> = l2.d_features.iter().map(|g| g * config.lambda_2d).collect();
        let grads = render_backward(&field, &view.camera, &raster, &d_color, &d_feature, None);

        let (half_w, half_h) = (view.camera.width as f64 / 2.0, view.camera.height as f64 / 2.0);
        for &i in &raster.visible {
            let c = grads.center[i];
            grad_accum[i] += ((c[0] * half_w).powi(2) + (c[1] * half_h).powi(2)).sqrt();
            grad_count[i] += 1;
        }

        // Adam step.
        let t = (it + 1) as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        let lr_pos = lr.position_at(it, config.iterations) * extent;
        for (i, s) in field.splats.iter_mut().enumerate() {
            let mo = &mut moments[i];
            let gp = grads.position[i] + d_plane[i] * config.lambda_plane;
            for a in 0..3 {
                adam(&mut s.position[a], gp[a], &mut mo.m[a], &mut mo.v[a], lr_pos, bc1, bc2);
            }
            adam(&mut s.raw_opacity, grads.raw_opacity[i], &mut mo.m[3], &mut mo.v[3], lr.opacity, bc1, bc2);
            adam(&mut s.raw_scale, grads.raw_scale[i], &mut mo.m[4], &mut mo.v[4], lr.scale, bc1, bc2);
            for a in 0..3 {
                adam(&mut s.color[a], grads.color[i][a], &mut mo.m[5 + a], &mut mo.v[5 + a], lr.color, bc1, bc2);
                s.color[a] = s.color[a].clamp(0.0, 1.0);
            }
            let base = i * IDENTITY_DIM;
            for a in 0..IDENTITY_DIM {
                let g = grads.identity[i][a] + config.lambda_3d * l3.d_features[base + a];
                adam(&mut s.identity[a], g, &mut mo.m[8 + a], &mut mo.v[8 + a], lr.identity, bc1, bc2);
            }
        }
        let mut cls_grad = ClassifierGrad::zeros(k);
        cls_grad.add_scaled(&l2.classifier, config.lambda_2d);
        cls_grad.add_scaled(&l3.classifier, config.lambda_3d);
        let cls = &mut field.classifier;
        for c in 0..k {
            for a in 0..IDENTITY_DIM {
                adam(
                    &mut cls.weights[c][a],
                    cls_grad.weights[c][a],
                    &mut cls_m.weights[c][a],
                    &mut cls_v.weights[c][a],
                    lr.classifier,
                    bc1,
                    bc2,
                );
            }
            adam(&mut cls.bias[c], cls_grad.bias[c], &mut cls_m.bias[c], &mut cls_v.bias[c], lr.classifier, bc1, bc2);
        }

        let n = it + 1;
        if n > config.densify_from && n <= config.densify_until && n % config.densify_interval == 0 {
            let mean_grad: Vec<f64> = grad_accum
                .iter()
                .zip(&grad_count)
                .map(|(&g, &c)| if c > 0 { g / c as f64 } else { 0.0 })
                .collect();
            let params = DensifyParams {
                grad_threshold: config.grad_threshold,
                scale_threshold,
            };
            let seed = config.seed ^ (n as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
            let plane_ref = config.split_projection.then_some(&planes);
            let (dense, lineage) = densify_traced(&field, &mean_grad, &params, plane_ref, seed);
            let (pruned, survivors) = prune_traced(&dense, config.opacity_floor);
            if pruned.is_empty() {
                return Err(Error::Divergence {
                    iteration: it,
                    diagnostic: format!("iteration={it} every splat fell below the opacity floor"),
                });
            }
            moments = survivors
                .iter()
                .map(|&j| match lineage[j] {
                    Lineage::Kept(p) => moments[p],
                    Lineage::Cloned(_) | Lineage::SplitChild(_) => ZERO_MOMENTS,
                })
                .collect();
            info!("iteration {n}: densified {} -> {} splats", field.len(), pruned.len());
            field = pruned;
            grad_accum = vec![0.0; field.len()];
            grad_count = vec![0; field.len()];
            planes = fit_planes(&field.positions(), &field.labels(), config.neighbors, it);
        }
        if !field.splats.iter().all(|s| s.position.iter().all(|c| c.is_finite())) {
            return Err(Error::Divergence {
                iteration: it,
                diagnostic: diagnostic(it, view_index, &losses, &field),
            });
        }
    }
    Ok(TrainOutcome { field, log, planes })
}
