//! End-to-end steps over on-disk scene directories.
//!
//! A scene directory holds `manifest.json`, `gt_cloud.ply` and per-frame
//! files under `frames/`. An association directory holds `masks/` and
//! `cloud.ply`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::association::{associate_sequence, independent_sequence, Association};
use crate::config::RunConfig;
use crate::eval::{chamfer, miou_3d, miou_multi, miou_single};
use crate::field::{init_from_cloud, GaussianField};
use crate::io;
use crate::render::{render, train, Camera, TrainOutcome, TrainView};
use crate::synth::{surface_distance, SceneBundle, SceneSpec};
use crate::{Error, Image, LabeledMaskSet, Pointmap, Result, SegmentedPointCloud};

pub const MANIFEST: &str = "manifest.json";
pub const GT_CLOUD: &str = "gt_cloud.ply";
pub const ASSOC_CLOUD: &str = "cloud.ply";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub image: PathBuf,
    pub pointmap: PathBuf,
    pub gt_mask: PathBuf,
    pub mask: PathBuf,
    pub camera: Camera,
}

/// Paths are relative to the scene directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub spec: SceneSpec,
    pub gt_cloud: PathBuf,
    pub frames: Vec<FrameEntry>,
}

/// A scene read back from disk.
#[derive(Debug, Clone)]
pub struct Scene {
    pub manifest: Manifest,
    pub images: Vec<Image>,
    pub pointmaps: Vec<Pointmap>,
    pub gt_masks: Vec<LabeledMaskSet>,
    pub masks: Vec<LabeledMaskSet>,
    pub gt_cloud: SegmentedPointCloud,
}

impl Scene {
    pub fn from_bundle(bundle: &SceneBundle) -> Self {
        Self {
            manifest: manifest_for(bundle),
            images: bundle.frames.iter().map(|f| f.image.clone()).collect(),
            pointmaps: bundle.frames.iter().map(|f| f.pointmap.clone()).collect(),
            gt_masks: bundle.frames.iter().map(|f| f.gt_masks.clone()).collect(),
            masks: bundle.frames.iter().map(|f| f.masks.clone()).collect(),
            gt_cloud: bundle.gt_cloud.clone(),
        }
    }

    pub fn cameras(&self) -> Vec<Camera> {
        self.manifest.frames.iter().map(|f| f.camera.clone()).collect()
    }
}

fn manifest_for(bundle: &SceneBundle) -> Manifest {
    let frames = bundle
        .spec
        .cameras
        .iter()
        .enumerate()
        .map(|(t, camera)| FrameEntry {
            image: PathBuf::from(format!("frames/{t:03}_rgb.ppm")),
            pointmap: PathBuf::from(format!("frames/{t:03}_points.pmap")),
            gt_mask: PathBuf::from(format!("frames/{t:03}_gt.pgm")),
            mask: PathBuf::from(format!("frames/{t:03}_mask.pgm")),
            camera: camera.clone(),
        })
        .collect();
    Manifest {
        seed: bundle.seed,
        spec: bundle.spec.clone(),
        gt_cloud: PathBuf::from(GT_CLOUD),
        frames,
    }
}

pub fn write_scene(dir: &Path, bundle: &SceneBundle) -> Result<Manifest> {
    let manifest = manifest_for(bundle);
    for (entry, frame) in manifest.frames.iter().zip(&bundle.frames) {
        io::write_image(&dir.join(&entry.image), &frame.image)?;
        io::write_pointmap(&dir.join(&entry.pointmap), &frame.pointmap)?;
        io::write_mask(&dir.join(&entry.gt_mask), &frame.gt_masks)?;
        io::write_mask(&dir.join(&entry.mask), &frame.masks)?;
    }
    io::write_cloud(&dir.join(&manifest.gt_cloud), &bundle.gt_cloud)?;
    io::write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn load_scene(dir: &Path) -> Result<Scene> {
    let manifest: Manifest = io::read_json(&dir.join(MANIFEST))?;
    let mut scene = Scene {
        images: Vec::new(),
        pointmaps: Vec::new(),
        gt_masks: Vec::new(),
        masks: Vec::new(),
        gt_cloud: io::read_cloud(&dir.join(&manifest.gt_cloud))?,
        manifest,
    };
    for entry in &scene.manifest.frames {
        scene.images.push(io::read_image(&dir.join(&entry.image))?);
        scene.pointmaps.push(io::read_pointmap(&dir.join(&entry.pointmap))?);
        scene.gt_masks.push(io::read_mask(&dir.join(&entry.gt_mask))?);
        scene.masks.push(io::read_mask(&dir.join(&entry.mask))?);
    }
    Ok(scene)
}

/// Associates the scene's per-frame masks, or keeps them per-frame when
/// fusion is disabled.
pub fn associate_scene(scene: &Scene, config: &RunConfig) -> Result<Association> {
    let frames: Vec<(Pointmap, LabeledMaskSet)> = scene
        .pointmaps
        .iter()
        .cloned()
        .zip(scene.masks.iter().cloned())
        .collect();
    if config.ablation.pointmap_fusion {
        associate_sequence(&frames, &config.association)
    } else {
        independent_sequence(&frames)
    }
}

pub fn mask_path(dir: &Path, frame: usize) -> PathBuf {
    dir.join(format!("masks/{frame:03}.pgm"))
}

pub fn write_association(dir: &Path, assoc: &Association) -> Result<()> {
    for (t, m) in assoc.masks.iter().enumerate() {
        io::write_mask(&mask_path(dir, t), m)?;
    }
    io::write_cloud(&dir.join(ASSOC_CLOUD), &assoc.cloud)
}

pub fn load_association_masks(dir: &Path, frames: usize) -> Result<Vec<LabeledMaskSet>> {
    (0..frames).map(|t| io::read_mask(&mask_path(dir, t))).collect()
}

pub fn initial_field(cloud: &SegmentedPointCloud, config: &RunConfig) -> Result<GaussianField> {
    init_from_cloud(cloud, &config.init)
}

/// Trains a field from the association output against the scene images.
pub fn train_scene(
    scene: &Scene,
    masks: &[LabeledMaskSet],
    cloud: &SegmentedPointCloud,
    config: &RunConfig,
) -> Result<TrainOutcome> {
    if masks.len() != scene.images.len() {
        return Err(Error::invalid(format!(
            "{} mask frames for {} images",
            masks.len(),
            scene.images.len()
        )));
    }
    let views: Vec<TrainView> = scene
        .images
        .iter()
        .zip(masks)
        .zip(scene.cameras())
        .map(|((image, masks), camera)| TrainView {
            image: image.clone(),
            masks: masks.clone(),
            camera,
        })
        .collect();
    let field = initial_field(cloud, config)?;
    train(&field, &views, &config.effective_training())
}

/// Ordered metric report.
pub type Report = BTreeMap<String, f64>;

pub fn format_report(report: &Report) -> String {
    report.iter().map(|(k, v)| format!("{k}={v:?}\n")).collect()
}

/// Per-view and pooled mask mIoU.
pub fn eval_2d(preds: &[LabeledMaskSet], gts: &[LabeledMaskSet]) -> Result<Report> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(Error::invalid(format!(
            "{} predicted views for {} ground-truth views",
            preds.len(),
            gts.len()
        )));
    }
    let mut singles = Vec::new();
    for (p, g) in preds.iter().zip(gts) {
        match miou_single(p, g) {
            Ok(v) => singles.push(v),
            Err(Error::UndefinedMetric(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if singles.is_empty() {
        return Err(Error::UndefinedMetric("no view has ground-truth masks".into()));
    }
    let mut r = Report::new();
    r.insert("miou_s".into(), singles.iter().sum::<f64>() / singles.len() as f64);
    r.insert("miou_m".into(), miou_multi(preds, gts)?);
    r.insert("views".into(), preds.len() as f64);
    Ok(r)
}

/// 3D mIoU, Chamfer distance to the ground-truth cloud and mean distance
/// of splats to the analytic surfaces.
pub fn eval_3d(field: &GaussianField, scene: &Scene, gamma: f64) -> Result<Report> {
    let positions = field.positions();
    let mut r = Report::new();
    r.insert("miou_3d".into(), miou_3d(field, &scene.gt_cloud, gamma)?);
    r.insert("chamfer".into(), chamfer(&positions, &scene.gt_cloud.positions)?);
    let spec = &scene.manifest.spec;
    let mean = positions.iter().map(|p| surface_distance(spec, p)).sum::<f64>() / positions.len().max(1) as f64;
    r.insert("surface_distance".into(), mean);
    r.insert("splats".into(), field.len() as f64);
    Ok(r)
}

/// Color image and argmax mask of `field` seen from `camera`.
pub fn render_views(field: &GaussianField, camera: &Camera, min_alpha: f64) -> (Image, LabeledMaskSet) {
    let out = render(field, camera);
    (out.color_image(), out.argmax_mask(min_alpha))
}
