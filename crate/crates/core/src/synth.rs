//! Analytic scenes of axis-aligned boxes and planar panels, ray-cast into
//! pointmaps, images and masks with exact ground truth.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::render::Camera;
use crate::{Error, Image, InstanceId, LabeledMaskSet, Pointmap, Result, SegmentedPointCloud, Vec3};

/// Ray hits closer than this are ignored.
const RAY_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    /// Axis-aligned box between two corners.
    Box { min: [f64; 3], max: [f64; 3] },
    /// Rectangle `center + s·u + t·v` for `s, t ∈ [-1, 1]`; `u ⟂ v`.
    Panel { center: [f64; 3], u: [f64; 3], v: [f64; 3] },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: InstanceId,
    pub shape: Shape,
    pub color: [f64; 3],
}

/// Frames `frames` (half-open, zero-based) in which the detector misses the
/// object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Occlusion {
    pub object_id: InstanceId,
    pub frames: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    /// Half-width of the cube that must contain every object.
    pub extent: f64,
    pub objects: Vec<SceneObject>,
    pub cameras: Vec<Camera>,
    /// Standard deviation of per-coordinate pointmap noise.
    #[serde(default)]
    pub noise_sigma: f64,
    /// Probability that a pointmap pixel is marked invalid.
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub occlusions: Vec<Occlusion>,
    /// Grid spacing of the ground-truth surface samples.
    #[serde(default = "default_gt_spacing")]
    pub gt_spacing: f64,
}

fn default_gt_spacing() -> f64 {
    0.02
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.cameras.is_empty() {
            return Err(Error::invalid("scene needs at least one camera"));
        }
        if self.objects.is_empty() {
            return Err(Error::invalid("scene needs at least one object"));
        }
        for c in &self.cameras {
            c.validate()?;
        }
        let mut ids: Vec<InstanceId> = self.objects.iter().map(|o| o.id).collect();
        ids.sort_unstable();
        if ids[0] == 0 || ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("object IDs must be distinct and nonzero"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid("noise sigma must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must lie in [0, 1)"));
        }
        if !(self.gt_spacing > 0.0) {
            return Err(Error::invalid("gt spacing must be positive"));
        }
        for o in &self.objects {
            match o.shape {
                Shape::Box { min, max } => {
                    if (0..3).any(|a| !(min[a] < max[a])) {
                        return Err(Error::invalid(format!("object {}: box corners are not ordered", o.id)));
                    }
                }
                Shape::Panel { u, v, .. } => {
                    let (u, v) = (Vec3::from(u), Vec3::from(v));
                    if u.norm() == 0.0 || v.norm() == 0.0 || u.dot(&v).abs() > 1e-9 * u.norm() * v.norm() {
                        return Err(Error::invalid(format!(
                            "object {}: panel axes must be nonzero and orthogonal",
                            o.id
                        )));
                    }
                }
            }
            if o.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::invalid(format!("object {}: color outside [0, 1]", o.id)));
            }
            if !self.objects_within_extent(o) {
                return Err(Error::invalid(format!("object {} exceeds the scene extent", o.id)));
            }
        }
        for occ in &self.occlusions {
            if !ids.contains(&occ.object_id) {
                return Err(Error::invalid(format!("occlusion names unknown object {}", occ.object_id)));
            }
        }
        Ok(())
    }

    fn objects_within_extent(&self, o: &SceneObject) -> bool {
        let e = self.extent;
        let inside = |p: Vec3| p.iter().all(|c| c.abs() <= e + 1e-9);
        match o.shape {
            Shape::Box { min, max } => inside(Vec3::from(min)) && inside(Vec3::from(max)),
            Shape::Panel { center, u, v } => {
                let (c, u, v) = (Vec3::from(center), Vec3::from(u), Vec3::from(v));
                [c + u + v, c + u - v, c - u + v, c - u - v].into_iter().all(inside)
            }
        }
    }

    fn occluded(&self, object_id: InstanceId, frame: usize) -> bool {
        self.occlusions
            .iter()
            .any(|o| o.object_id == object_id && o.frames.contains(&frame))
    }

    pub fn object_ids(&self) -> Vec<InstanceId> {
        let mut ids: Vec<InstanceId> = self.objects.iter().map(|o| o.id).collect();
        ids.sort_unstable();
        ids
    }
}

/// Hides `object_id` from the detector during `hide_frames`.
pub fn reappearance_spec(base: &SceneSpec, object_id: InstanceId, hide_frames: Range<usize>) -> Result<SceneSpec> {
    if !base.objects.iter().any(|o| o.id == object_id) {
        return Err(Error::invalid(format!("unknown object {object_id}")));
    }
    if hide_frames.end > base.cameras.len() {
        return Err(Error::invalid(format!(
            "hidden frames {hide_frames:?} exceed the {}-frame trajectory",
            base.cameras.len()
        )));
    }
    let mut spec = base.clone();
    if !hide_frames.is_empty() {
        spec.occlusions.push(Occlusion {
            object_id,
            frames: hide_frames,
        });
    }
    Ok(spec)
}

/// One generated frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub image: Image,
    pub pointmap: Pointmap,
    /// Global ground-truth IDs.
    pub gt_masks: LabeledMaskSet,
    /// Per-frame shuffled IDs with detector misses applied.
    pub masks: LabeledMaskSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneBundle {
    pub spec: SceneSpec,
    pub seed: u64,
    pub frames: Vec<Frame>,
    pub gt_cloud: SegmentedPointCloud,
}

#[derive(Debug, Clone, Copy)]
struct Hit {
    t: f64,
    object: usize,
    normal: Vec3,
}

fn intersect(shape: &Shape, origin: &Vec3, dir: &Vec3) -> Option<(f64, Vec3)> {
    match *shape {
        Shape::Box { min, max } => {
            let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
            let mut axis0 = 0;
            let mut sign0 = -1.0;
            for a in 0..3 {
                if dir[a] == 0.0 {
                    if origin[a] < min[a] || origin[a] > max[a] {
                        return None;
                    }
                    continue;
                }
                let inv = 1.0 / dir[a];
                let (mut near, mut far) = ((min[a] - origin[a]) * inv, (max[a] - origin[a]) * inv);
                let mut sign = -1.0;
                if near > far {
                    std::mem::swap(&mut near, &mut far);
                    sign = 1.0;
                }
                if near > t0 {
                    t0 = near;
                    axis0 = a;
                    sign0 = sign;
                }
                t1 = t1.min(far);
            }
            if t0 > t1 || t0 <= RAY_EPS {
                return None;
            }
            let mut n = Vec3::zeros();
            n[axis0] = sign0;
            Some((t0, n))
        }
        Shape::Panel { center, u, v } => {
            let (c, u, v) = (Vec3::from(center), Vec3::from(u), Vec3::from(v));
            let n = u.cross(&v).normalize();
            let denom = n.dot(dir);
            if denom.abs() < 1e-15 {
                return None;
            }
            let t = n.dot(&(c - origin)) / denom;
            if t <= RAY_EPS {
                return None;
            }
            let d = origin + dir * t - c;
            let (s, r) = (d.dot(&u) / u.norm_squared(), d.dot(&v) / v.norm_squared());
            if s.abs() > 1.0 || r.abs() > 1.0 {
                return None;
            }
            Some((t, if denom < 0.0 { n } else { -n }))
        }
    }
}

fn cast(objects: &[SceneObject], origin: &Vec3, dir: &Vec3) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for (i, o) in objects.iter().enumerate() {
        if let Some((t, normal)) = intersect(&o.shape, origin, dir) {
            if best.is_none_or(|b| t < b.t) {
                best = Some(Hit { t, object: i, normal });
            }
        }
    }
    best
}

fn inside_box(shape: &Shape, p: &Vec3) -> bool {
    match *shape {
        Shape::Box { min, max } => (0..3).all(|a| p[a] > min[a] && p[a] < max[a]),
        Shape::Panel { .. } => false,
    }
}

/// Distance from `p` to the surface of one object.
pub fn shape_distance(shape: &Shape, p: &Vec3) -> f64 {
    match *shape {
        Shape::Box { min, max } => {
            let outside = Vec3::from_fn(|a, _| (min[a] - p[a]).max(0.0).max(p[a] - max[a]));
            if outside.norm() > 0.0 {
                outside.norm()
            } else {
                (0..3)
                    .map(|a| (p[a] - min[a]).min(max[a] - p[a]))
                    .fold(f64::INFINITY, f64::min)
            }
        }
        Shape::Panel { center, u, v } => {
            let (c, u, v) = (Vec3::from(center), Vec3::from(u), Vec3::from(v));
            let d = p - c;
            let s = (d.dot(&u) / u.norm_squared()).clamp(-1.0, 1.0);
            let r = (d.dot(&v) / v.norm_squared()).clamp(-1.0, 1.0);
            (p - (c + u * s + v * r)).norm()
        }
    }
}

/// Distance from `p` to the nearest object surface.
pub fn surface_distance(spec: &SceneSpec, p: &Vec3) -> f64 {
    spec.objects
        .iter()
        .map(|o| shape_distance(&o.shape, p))
        .fold(f64::INFINITY, f64::min)
}

const LIGHT: [f64; 3] = [0.3, -0.5, 0.81];

fn shade(color: &[f64; 3], normal: &Vec3) -> [f64; 3] {
    let l = Vec3::from(LIGHT).normalize();
    let k = 0.55 + 0.45 * normal.dot(&l).abs();
    [color[0] * k, color[1] * k, color[2] * k]
}

fn frame_seed(seed: u64, frame: usize, stream: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (frame as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9) ^ stream
}

fn render_frame(spec: &SceneSpec, seed: u64, frame: usize) -> Result<Frame> {
    let cam = &spec.cameras[frame];
    let origin = cam.center();
    if let Some(o) = spec.objects.iter().find(|o| inside_box(&o.shape, &origin)) {
        return Err(Error::Generation {
            frame,
            message: format!("camera is inside object {}", o.id),
        });
    }
    let (w, h) = (cam.width, cam.height);
    let mut rng = ChaCha8Rng::seed_from_u64(frame_seed(seed, frame, 1));
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("sigma is non-negative");
    let mut points = vec![[0f32; 3]; w * h];
    let mut valid = vec![false; w * h];
    let mut gt = vec![0 as InstanceId; w * h];
    let mut rgb = vec![0.0; w * h * 3];
    for row in 0..h {
        for col in 0..w {
            let k = row * w + col;
            let dir = cam.pixel_ray(col as f64, row as f64);
            // Draw noise for every pixel so the stream does not depend on hits.
            let n = [noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng)];
            let dropped = spec.dropout > 0.0 && rng.random::<f64>() < spec.dropout;
            let Some(hit) = cast(&spec.objects, &origin, &dir) else {
                continue;
            };
            let obj = &spec.objects[hit.object];
            gt[k] = obj.id;
            rgb[k * 3..k * 3 + 3].copy_from_slice(&shade(&obj.color, &hit.normal));
            let p = origin + dir * hit.t;
            points[k] = [(p.x + n[0]) as f32, (p.y + n[1]) as f32, (p.z + n[2]) as f32];
            valid[k] = !dropped;
        }
    }
    let ids = spec.object_ids();
    let mut perm: Vec<InstanceId> = (1..=ids.len() as InstanceId).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(frame_seed(seed, frame, 2)));
    let masks: Vec<InstanceId> = gt
        .iter()
        .map(|&g| {
            if g == 0 || spec.occluded(g, frame) {
                0
            } else {
                perm[ids.binary_search(&g).expect("known object")]
            }
        })
        .collect();
    Ok(Frame {
        image: Image::new(w, h, 3, rgb)?,
        pointmap: Pointmap::new(w, h, points, valid)?,
        gt_masks: LabeledMaskSet::new(w, h, gt)?,
        masks: LabeledMaskSet::new(w, h, masks)?,
    })
}

/// Grid samples over an object's surface.
fn surface_samples(shape: &Shape, spacing: f64) -> Vec<Vec3> {
    let grid = |c: Vec3, u: Vec3, v: Vec3, out: &mut Vec<Vec3>| {
        // Rectangle c + s u + t v, s, t in [-1, 1]; cell-centered samples.
        let nu = ((2.0 * u.norm() / spacing).round() as usize).max(1);
        let nv = ((2.0 * v.norm() / spacing).round() as usize).max(1);
        for i in 0..nu {
            for j in 0..nv {
                let s = -1.0 + (2 * i + 1) as f64 / nu as f64;
                let t = -1.0 + (2 * j + 1) as f64 / nv as f64;
                out.push(c + u * s + v * t);
            }
        }
    };
    let mut out = Vec::new();
    match *shape {
        Shape::Panel { center, u, v } => grid(Vec3::from(center), Vec3::from(u), Vec3::from(v), &mut out),
        Shape::Box { min, max } => {
            let (lo, hi) = (Vec3::from(min), Vec3::from(max));
            let c = (lo + hi) / 2.0;
            let half = (hi - lo) / 2.0;
            for a in 0..3 {
                let (b, d) = ((a + 1) % 3, (a + 2) % 3);
                let mut u = Vec3::zeros();
                u[b] = half[b];
                let mut v = Vec3::zeros();
                v[d] = half[d];
                for sign in [-1.0, 1.0] {
                    let mut fc = c;
                    fc[a] += sign * half[a];
                    grid(fc, u, v, &mut out);
                }
            }
        }
    }
    out
}

fn visible_from(spec: &SceneSpec, p: &Vec3, cam: &Camera) -> bool {
    let pc = cam.world_to_camera(p);
    if pc.z <= 0.0 {
        return false;
    }
    let px = cam.project_camera_point(&pc);
    if px[0] < -0.5 || px[1] < -0.5 || px[0] > cam.width as f64 - 0.5 || px[1] > cam.height as f64 - 0.5 {
        return false;
    }
    let origin = cam.center();
    let to = p - origin;
    let dist = to.norm();
    match cast(&spec.objects, &origin, &(to / dist)) {
        Some(hit) => hit.t >= dist - 1e-6 * dist.max(1.0),
        None => true,
    }
}

/// Surface samples visible from at least one camera, labeled by object.
pub fn ground_truth_cloud(spec: &SceneSpec) -> SegmentedPointCloud {
    let mut cloud = SegmentedPointCloud::new();
    for o in &spec.objects {
        let samples = surface_samples(&o.shape, spec.gt_spacing);
        let keep: Vec<bool> = samples
            .par_iter()
            .map(|p| spec.cameras.iter().any(|c| visible_from(spec, p, c)))
            .collect();
        for (p, k) in samples.into_iter().zip(keep) {
            if k {
                cloud.push(p, o.id, 0);
            }
        }
    }
    cloud
}

/// Ray-casts every frame. Deterministic in `(spec, seed)` regardless of the
/// worker count.
pub fn generate(spec: &SceneSpec, seed: u64) -> Result<SceneBundle> {
    spec.validate()?;
    let frames = (0..spec.cameras.len())
        .into_par_iter()
        .map(|f| render_frame(spec, seed, f))
        .collect::<Result<Vec<_>>>()?;
    Ok(SceneBundle {
        spec: spec.clone(),
        seed,
        frames,
        gt_cloud: ground_truth_cloud(spec),
    })
}

/// `count` cameras on a horizontal arc of `sweep_degrees` around `target`.
pub fn arc_trajectory(
    count: usize,
    target: Vec3,
    radius: f64,
    height: f64,
    start_degrees: f64,
    sweep_degrees: f64,
    size: (usize, usize),
    focal: f64,
) -> Result<Vec<Camera>> {
    (0..count)
        .map(|i| {
            let f = if count > 1 { i as f64 / (count - 1) as f64 } else { 0.5 };
            let a = (start_degrees + f * sweep_degrees).to_radians();
            let eye = target + Vec3::new(radius * a.cos(), radius * a.sin(), height);
            Camera::look_at(eye, target, Vec3::z(), size.0, size.1, focal)
        })
        .collect()
}

/// Default frame edge length.
pub const DEFAULT_SIZE: usize = 128;
/// Default trajectory length.
pub const DEFAULT_FRAMES: usize = 20;

/// A floor, a back wall and three boxes, viewed by a 20-pose arc. Box
/// placement and colors are drawn from `layout_seed`.
pub fn tabletop(layout_seed: u64, size: usize) -> Result<SceneSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(layout_seed);
    let mut objects = vec![
        SceneObject {
            id: 1,
            shape: Shape::Panel {
                center: [0.0, 0.0, 0.0],
                u: [1.5, 0.0, 0.0],
                v: [0.0, 1.5, 0.0],
            },
            color: [0.55, 0.5, 0.45],
        },
        SceneObject {
            id: 2,
            shape: Shape::Panel {
                center: [0.0, 1.5, 0.75],
                u: [1.5, 0.0, 0.0],
                v: [0.0, 0.0, 0.75],
            },
            color: [0.35, 0.45, 0.6],
        },
    ];
    // Three boxes in separate slots along x, jittered.
    for (k, x) in [-0.75, 0.0, 0.75].into_iter().enumerate() {
        let cx = x + rng.random_range(-0.1..0.1);
        let cy = rng.random_range(-0.35..0.35);
        let hx = rng.random_range(0.15..0.25);
        let hy = rng.random_range(0.15..0.25);
        let hz = rng.random_range(0.12..0.3);
        objects.push(SceneObject {
            id: 3 + k as InstanceId,
            shape: Shape::Box {
                min: [cx - hx, cy - hy, 0.0],
                max: [cx + hx, cy + hy, 2.0 * hz],
            },
            color: [rng.random_range(0.2..0.95), rng.random_range(0.2..0.95), rng.random_range(0.2..0.95)],
        });
    }
    let cameras = arc_trajectory(
        DEFAULT_FRAMES,
        Vec3::new(0.0, 0.2, 0.2),
        2.6,
        1.4,
        -150.0,
        120.0,
        (size, size),
        size as f64 * 0.9,
    )?;
    Ok(SceneSpec {
        extent: 2.0,
        objects,
        cameras,
        noise_sigma: 0.0,
        dropout: 0.0,
        occlusions: Vec::new(),
        gt_spacing: 0.02,
    })
}

/// Two large boxes on nothing, for the plane-constraint experiments.
pub fn two_boxes(size: usize, frames: usize) -> Result<SceneSpec> {
    let objects = vec![
        SceneObject {
            id: 1,
            shape: Shape::Box {
                min: [-0.55, -0.3, -0.3],
                max: [0.0, 0.3, 0.25],
            },
            color: [0.85, 0.35, 0.25],
        },
        SceneObject {
            id: 2,
            shape: Shape::Box {
                min: [0.1, -0.25, -0.3],
                max: [0.6, 0.25, 0.1],
            },
            color: [0.25, 0.6, 0.85],
        },
    ];
    let cameras = arc_trajectory(
        frames,
        Vec3::new(0.0, 0.0, -0.05),
        2.0,
        1.0,
        -135.0,
        90.0,
        (size, size),
        size as f64 * 1.1,
    )?;
    Ok(SceneSpec {
        extent: 1.0,
        objects,
        cameras,
        noise_sigma: 0.0,
        dropout: 0.0,
        occlusions: Vec::new(),
        gt_spacing: 0.01,
    })
}
