use std::collections::BTreeMap;

use nalgebra::{Rotation3, Vector3};
use proptest::prelude::*;

use segfield_core::association::{associate_sequence, build_correspondence, matching_cost, AssociationParams};
use segfield_core::eval::{chamfer, miou_3d, miou_multi, miou_single};
use segfield_core::field::{
    delete_object, densify_traced, move_object, Classifier, DensifyParams, GaussianField, GaussianSplat, Identity,
    Lineage,
};
use segfield_core::plane::{plane_loss, point_plane_distance, split_project, Plane, PlaneSet};
use segfield_core::render::{composite, render, Camera, Footprint, PixelSplat};
use segfield_core::synth::{generate, shape_distance, tabletop};
use segfield_core::{LabeledMaskSet, Pointmap, SegmentedPointCloud, Vec3};

fn vec3(range: f64) -> impl Strategy<Value = Vec3> {
    prop::array::uniform3(-range..range).prop_map(Vec3::from)
}

fn unit(v: Vec3) -> Vec3 {
    if v.norm() < 1e-3 {
        Vec3::z()
    } else {
        v.normalize()
    }
}

fn rigid() -> impl Strategy<Value = (Rotation3<f64>, Vec3)> {
    (vec3(1.0), -3.0..3.0f64, vec3(5.0)).prop_map(|(axis, angle, t)| {
        (Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(unit(axis)), angle), t)
    })
}

fn field_strategy() -> impl Strategy<Value = GaussianField> {
    prop::collection::vec((vec3(2.0), -3.0..3.0f64, -4.0..-1.0f64, 0u16..4), 1..40).prop_map(|splats| {
        GaussianField {
            splats: splats
                .into_iter()
                .map(|(position, raw_opacity, raw_scale, class_label)| GaussianSplat {
                    position,
                    raw_opacity,
                    raw_scale,
                    color: Vec3::repeat(0.5),
                    identity: Identity::from_fn(|a, _| a as f64 * 0.01 * class_label as f64),
                    class_label,
                })
                .collect(),
            classifier: Classifier::zeros(4),
        }
    })
}

fn mask_strategy(w: usize, h: usize, ids: u16) -> impl Strategy<Value = LabeledMaskSet> {
    prop::collection::vec(0..ids, w * h).prop_map(move |v| LabeledMaskSet::new(w, h, v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matching_cost_range_and_extremes(a in 1usize..500, b in 1usize..500, f in 0.0..=1.0f64) {
        let m = a.min(b);
        let overlap = ((m as f64) * f).floor() as usize;
        let c = matching_cost(overlap, a, b).unwrap();
        prop_assert!((0.0..=1.0).contains(&c));
        prop_assert_eq!(c == 0.0, overlap == m);
        prop_assert_eq!(c == 1.0, overlap == 0);
    }

    #[test]
    fn identical_pointmaps_correspond_to_themselves(
        pts in prop::collection::vec(prop::array::uniform3(-5.0f32..5.0), 36),
        valid in prop::collection::vec(any::<bool>(), 36),
    ) {
        let pm = Pointmap::new(6, 6, pts, valid.clone()).unwrap();
        prop_assume!(pm.valid_count() > 0);
        let phi = build_correspondence(&pm, &pm).unwrap();
        for (i, &v) in valid.iter().enumerate() {
            prop_assert_eq!(phi.target_index(i), if v { Some(i) } else { None });
        }
    }

    #[test]
    fn association_is_a_per_frame_relabeling(
        frames in prop::collection::vec(
            (prop::collection::vec(prop::array::uniform3(-1.0f32..1.0), 64), mask_strategy(8, 8, 4)),
            1..4,
        ),
    ) {
        let input: Vec<(Pointmap, LabeledMaskSet)> = frames
            .into_iter()
            .map(|(p, m)| (Pointmap::dense(8, 8, p).unwrap(), m))
            .collect();
        let params = AssociationParams { min_mask_pixels: 1, ..Default::default() };
        let a = associate_sequence(&input, &params).unwrap();
        let mut labeled = 0;
        for ((_, inp), out) in input.iter().zip(&a.masks) {
            let mut forward: BTreeMap<u16, u16> = BTreeMap::new();
            let mut backward: BTreeMap<u16, u16> = BTreeMap::new();
            for (&i, &o) in inp.ids().iter().zip(out.ids()) {
                prop_assert_eq!(i == 0, o == 0);
                if o != 0 {
                    labeled += 1;
                    prop_assert_eq!(*forward.entry(i).or_insert(o), o);
                    prop_assert_eq!(*backward.entry(o).or_insert(i), i);
                }
            }
        }
        prop_assert_eq!(a.cloud.len(), labeled);
    }

    #[test]
    fn split_projection_lands_on_the_plane_and_is_idempotent(p in vec3(10.0), anchor in vec3(10.0), n in vec3(1.0)) {
        let plane = Plane::through(anchor, unit(n)).unwrap();
        let once = split_project(&p, &plane);
        prop_assert!(point_plane_distance(&once, &plane) <= 1e-9);
        prop_assert!((split_project(&once, &plane) - once).norm() <= 1e-12);
    }

    #[test]
    fn plane_loss_is_rigid_invariant(
        pts in prop::collection::vec((vec3(3.0), vec3(3.0), vec3(1.0)), 1..20),
        (rot, t) in rigid(),
    ) {
        let positions: Vec<Vec3> = pts.iter().map(|p| p.0).collect();
        let planes = PlaneSet {
            planes: pts.iter().map(|p| Some(Plane::through(p.1, unit(p.2)).unwrap())).collect(),
            fitted_at: 0,
        };
        let moved: Vec<Vec3> = positions.iter().map(|p| rot * p + t).collect();
        let moved_planes = PlaneSet {
            planes: planes
                .planes
                .iter()
                .map(|p| p.map(|p| Plane::through(rot * p.anchor + t, rot * p.normal).unwrap()))
                .collect(),
            fitted_at: 0,
        };
        let (a, _) = plane_loss(&positions, &planes);
        let (b, _) = plane_loss(&moved, &moved_planes);
        prop_assert!((a - b).abs() <= 1e-9);
    }

    #[test]
    fn densify_preserves_labels_and_projects_split_children(
        field in field_strategy(),
        grads in prop::collection::vec(0.0..2e-3f64, 40),
        plane_normal in vec3(1.0),
        seed in any::<u64>(),
    ) {
        let plane = Plane::through(Vec3::zeros(), unit(plane_normal)).unwrap();
        let planes = PlaneSet { planes: vec![Some(plane); field.len()], fitted_at: 0 };
        let params = DensifyParams { grad_threshold: 1e-3, scale_threshold: 0.1 };
        let (out, lineage) = densify_traced(&field, &grads[..field.len()], &params, Some(&planes), seed);
        prop_assert_eq!(out.len(), lineage.len());
        for (s, l) in out.splats.iter().zip(&lineage) {
            prop_assert_eq!(s.class_label, field.splats[l.parent()].class_label);
            if let Lineage::SplitChild(_) = l {
                prop_assert!(point_plane_distance(&s.position, &plane) <= 1e-9);
            }
        }
    }

    #[test]
    fn delete_after_move_equals_delete(field in field_strategy(), id in 0u16..4, t in vec3(3.0)) {
        let (moved, _) = move_object(&field, id, t);
        prop_assert_eq!(delete_object(&moved, id).0, delete_object(&field, id).0);
        let (back, _) = move_object(&moved, id, -t);
        for (a, b) in back.splats.iter().zip(&field.splats) {
            prop_assert!((a.position - b.position).norm() <= 1e-12);
        }
    }

    #[test]
    fn compositing_weights_sum_to_at_most_one(
        splats in prop::collection::vec((prop::array::uniform2(-3.0..3.0f64), 0.3..3.0f64, 0.0..1.0f64), 0..12),
        shared in prop::array::uniform16(-1.0..1.0f64),
    ) {
        let v = Identity::from_column_slice(&shared);
        let splats: Vec<PixelSplat> = splats
            .into_iter()
            .map(|(center, sigma, opacity)| PixelSplat {
                footprint: Footprint { center, sigma, opacity },
                color: Vec3::repeat(1.0),
                identity: v,
            })
            .collect();
        let c = composite([0.0, 0.0], &splats);
        prop_assert!((0.0..=1.0).contains(&c.alpha));
        prop_assert!(c.color.iter().all(|&x| x <= c.alpha + 1e-12));
        prop_assert!((c.feature - v * c.alpha).norm() <= 1e-12);
    }

    #[test]
    fn class_probabilities_are_normalized(field in field_strategy(), bias in prop::array::uniform4(-2.0..2.0f64)) {
        let mut field = field;
        field.classifier.bias = bias.to_vec();
        let camera = Camera::look_at(Vec3::new(0.0, -6.0, 1.0), Vec3::zeros(), Vec3::z(), 12, 10, 12.0).unwrap();
        let out = render(&field, &camera);
        for px in out.class_probs.chunks_exact(out.classes) {
            prop_assert!((px.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
        prop_assert!(out.alpha.iter().all(|a| (0.0..=1.0).contains(a)));
    }

    #[test]
    fn chamfer_is_symmetric_and_rigid_invariant(
        a in prop::collection::vec(vec3(2.0), 1..60),
        b in prop::collection::vec(vec3(2.0), 1..60),
        (rot, t) in rigid(),
    ) {
        let ab = chamfer(&a, &b).unwrap();
        prop_assert_eq!(ab, chamfer(&b, &a).unwrap());
        let ma: Vec<Vec3> = a.iter().map(|p| rot * p + t).collect();
        let mb: Vec<Vec3> = b.iter().map(|p| rot * p + t).collect();
        prop_assert!((chamfer(&ma, &mb).unwrap() - ab).abs() <= 1e-9);
        prop_assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn mask_mious_lie_in_unit_interval(
        preds in prop::collection::vec(mask_strategy(5, 4, 5), 3),
        gts in prop::collection::vec(mask_strategy(5, 4, 5), 3),
    ) {
        for (p, g) in preds.iter().zip(&gts) {
            if let Ok(v) = miou_single(p, g) {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
        if let Ok(v) = miou_multi(&preds, &gts) {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn floaters_never_raise_miou_3d(
        pts in prop::collection::vec((vec3(1.0), 1u16..4), 5..40),
        floaters in prop::collection::vec((vec3(1.0), 0u16..4), 1..20),
    ) {
        let mut gt = SegmentedPointCloud::new();
        for (p, l) in &pts {
            gt.push(*p, *l, 0);
        }
        let one_hot = |p: Vec3, l: u16| GaussianSplat {
            position: p,
            raw_opacity: 0.0,
            raw_scale: -2.0,
            color: Vec3::repeat(0.5),
            identity: Identity::from_fn(|a, _| if a == l as usize { 1.0 } else { 0.0 }),
            class_label: l,
        };
        let mut field = GaussianField {
            splats: pts.iter().map(|(p, l)| one_hot(*p, *l)).collect(),
            classifier: Classifier {
                weights: (0..4).map(|k| Identity::from_fn(|a, _| if a == k { 5.0 } else { 0.0 })).collect(),
                bias: vec![0.0; 4],
            },
        };
        let mut last = miou_3d(&field, &gt, 0.5).unwrap();
        prop_assert!((0.0..=1.0).contains(&last));
        for (offset, l) in floaters {
            field.splats.push(one_hot(offset + Vector3::new(10.0, 0.0, 0.0), l));
            let next = miou_3d(&field, &gt, 0.5).unwrap();
            prop_assert!(next <= last);
            last = next;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn synthetic_frames_share_partitions_and_gt_lies_on_surfaces(layout in 0u64..1000, seed in any::<u64>()) {
        let spec = tabletop(layout, 32).unwrap();
        let bundle = generate(&spec, seed).unwrap();
        for f in &bundle.frames {
            let mut forward: BTreeMap<u16, u16> = BTreeMap::new();
            let mut backward: BTreeMap<u16, u16> = BTreeMap::new();
            for (&g, &m) in f.gt_masks.ids().iter().zip(f.masks.ids()) {
                prop_assert_eq!(g == 0, m == 0);
                prop_assert_eq!(*forward.entry(g).or_insert(m), m);
                prop_assert_eq!(*backward.entry(m).or_insert(g), g);
            }
        }
        let shapes: BTreeMap<u16, _> = spec.objects.iter().map(|o| (o.id, o.shape)).collect();
        for (p, l) in bundle.gt_cloud.positions.iter().zip(&bundle.gt_cloud.labels) {
            prop_assert!(shape_distance(&shapes[l], p) <= 1e-9);
        }
    }

    #[test]
    fn noiseless_association_recovers_ground_truth_identity(layout in 0u64..1000, seed in any::<u64>()) {
        let spec = tabletop(layout, 48).unwrap();
        let bundle = generate(&spec, seed).unwrap();
        let frames: Vec<_> = bundle.frames.iter().map(|f| (f.pointmap.clone(), f.masks.clone())).collect();
        let a = associate_sequence(&frames, &AssociationParams::default()).unwrap();
        let mut forward: BTreeMap<u16, u16> = BTreeMap::new();
        let mut backward: BTreeMap<u16, u16> = BTreeMap::new();
        for (f, out) in bundle.frames.iter().zip(&a.masks) {
            for (&g, &o) in f.gt_masks.ids().iter().zip(out.ids()) {
                if o != 0 {
                    prop_assert_eq!(*forward.entry(g).or_insert(o), o);
                    prop_assert_eq!(*backward.entry(o).or_insert(g), g);
                }
            }
        }
    }
}
