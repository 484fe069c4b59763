//! Local planes fitted to same-class neighborhoods, the point-to-plane
//! regularizer and its gradient, and projection of split splats onto planes.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, SymmetricEigen};
use rayon::prelude::*;

use crate::spatial::KdTree;
use crate::types::InstanceId;
use crate::{Error, Result, Vec3};

/// `normal · x + offset = 0`, with `anchor` a point on the plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub normal: Vec3,
    pub offset: f64,
    pub anchor: Vec3,
}

impl Plane {
    /// Builds a plane through `anchor`; the normal is normalized.
    pub fn through(anchor: Vec3, normal: Vec3) -> Result<Self> {
        let len = normal.norm();
        if !(len > 0.0 && len.is_finite()) {
            return Err(Error::DegeneratePlane("zero or non-finite normal".into()));
        }
        let normal = normal / len;
        Ok(Self {
            normal,
            offset: -normal.dot(&anchor),
            anchor,
        })
    }

    pub fn signed_distance(&self, point: &Vec3) -> f64 {
        self.normal.dot(&(point - self.anchor))
    }
}

/// Per-splat planes from the most recent refresh.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PlaneSet {
    pub planes: Vec<Option<Plane>>,
    pub fitted_at: usize,
}

impl PlaneSet {
    pub fn empty(len: usize) -> Self {
        Self {
            planes: vec![None; len],
            fitted_at: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.planes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.planes.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&Plane> {
        self.planes.get(index).and_then(Option::as_ref)
    }

    pub fn count_fitted(&self) -> usize {
        self.planes.iter().filter(|p| p.is_some()).count()
    }
}

/// Indices of the `k` nearest points sharing the query's label, excluding
/// the query itself, nearest first.
pub fn same_class_neighbors(positions: &[Vec3], labels: &[InstanceId], query_index: usize, k: usize) -> Vec<usize> {
    let label = labels[query_index];
    let members: Vec<usize> = (0..positions.len())
        .filter(|&i| labels[i] == label && i != query_index)
        .collect();
    let tree = KdTree::new(members.iter().map(|&i| to_array(&positions[i])).collect());
    tree.k_nearest(&to_array(&positions[query_index]), k)
        .into_iter()
        .map(|n| members[n.index])
        .collect()
}

/// Least-squares plane through the centroid of `points`.
///
/// The normal is the eigenvector of the smallest eigenvalue of the centered
/// scatter matrix, signed so that its first nonzero component is positive.
pub fn fit_plane(points: &[Vec3]) -> Result<Plane> {
    if points.len() < 3 {
        return Err(Error::DegeneratePlane(format!("{} points, need 3", points.len())));
    }
    let centroid = points.iter().sum::<Vec3>() / points.len() as f64;
    let mut scatter = Matrix3::zeros();
    for p in points {
        let d = p - centroid;
        scatter += d * d.transpose();
    }
    let eig = SymmetricEigen::new(scatter);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (lo, mid, hi) = (
        eig.eigenvalues[order[0]],
        eig.eigenvalues[order[1]],
        eig.eigenvalues[order[2]],
    );
    // Collinear (or coincident) points leave two near-zero eigenvalues.
    if !(hi > 0.0) || mid <= hi * 1e-12 || !lo.is_finite() {
        return Err(Error::DegeneratePlane("points are collinear".into()));
    }
    let normal = canonical_sign(eig.eigenvectors.column(order[0]).into_owned().normalize());
    Plane::through(centroid, normal)
}

fn canonical_sign(n: Vec3) -> Vec3 {
    const TINY: f64 = 1e-12;
    match n.iter().find(|c| c.abs() > TINY) {
        Some(&c) if c < 0.0 => -n,
        _ => n,
    }
}

pub fn point_plane_distance(point: &Vec3, plane: &Plane) -> f64 {
    plane.signed_distance(point).abs()
}

/// Mean point-to-plane distance over all `r` points (points without a plane
/// contribute zero) and its gradient with respect to each position.
pub fn plane_loss(positions: &[Vec3], planes: &PlaneSet) -> (f64, Vec<Vec3>) {
    let r = positions.len();
    let mut grad = vec![Vec3::zeros(); r];
    if r == 0 {
        return (0.0, grad);
    }
    let scale = 1.0 / r as f64;
    let mut total = 0.0;
    for (i, p) in positions.iter().enumerate() {
        if let Some(plane) = planes.get(i) {
            let s = plane.signed_distance(p);
            total += s.abs();
            if s != 0.0 {
                grad[i] = plane.normal * (s.signum() * scale);
            }
        }
    }
    (total * scale, grad)
}

/// Moves `point` along the plane normal onto the plane.
pub fn split_project(point: &Vec3, plane: &Plane) -> Vec3 {
    point - plane.normal * plane.signed_distance(point)
}

/// Fits one plane per labeled point from its `k` nearest same-class
/// neighbors. Unlabeled points and classes too small or degenerate get
/// `None`.
pub fn fit_planes(positions: &[Vec3], labels: &[InstanceId], k: usize, iteration: usize) -> PlaneSet {
    assert_eq!(positions.len(), labels.len());
    let mut classes: BTreeMap<InstanceId, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate().filter(|(_, &l)| l != 0) {
        classes.entry(l).or_default().push(i);
    }
    let trees: BTreeMap<InstanceId, (KdTree, &Vec<usize>)> = classes
        .iter()
        .map(|(&l, members)| {
            let pts = members.iter().map(|&i| to_array(&positions[i])).collect();
            (l, (KdTree::new(pts), members))
        })
        .collect();
    let planes = (0..positions.len())
        .into_par_iter()
        .map(|i| {
            let (tree, members) = trees.get(&labels[i])?;
            let neighbors = tree.k_nearest_filtered(&to_array(&positions[i]), k, |m| members[m] != i);
            if neighbors.len() < 3 {
                return None;
            }
            let pts: Vec<Vec3> = neighbors.iter().map(|n| positions[members[n.index]]).collect();
            fit_plane(&pts).ok()
        })
        .collect();
    PlaneSet {
        planes,
        fitted_at: iteration,
    }
}

fn to_array(p: &Vec3) -> [f64; 3] {
    [p.x, p.y, p.z]
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, Rotation3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal, StandardNormal};

    fn v(x: f64, y: f64, z: f64) -> Vec3 {
        Vec3::new(x, y, z)
    }

    fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
        let n: Vec3 = Vec3::from_fn(|_, _| StandardNormal.sample(rng));
        n.normalize()
    }

    #[test]
    fn neighbors_on_a_line() {
        let pos: Vec<Vec3> = (0..5).map(|i| v(i as f64, 0.0, 0.0)).collect();
        let mut got = same_class_neighbors(&pos, &[1; 5], 2, 2);
        got.sort();
        assert_eq!(got, vec![1, 3]);
        assert!(same_class_neighbors(&pos, &[1, 2, 2, 2, 2], 0, 3).is_empty());
    }

    #[test]
    fn neighbors_match_sorted_distance_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let pos: Vec<Vec3> = (0..200).map(|_| v(rng.random(), rng.random(), rng.random())).collect();
        let labels: Vec<u16> = (0..200).map(|_| rng.random_range(1..4)).collect();
        for q in [0, 17, 99, 199] {
            let mut oracle: Vec<usize> = (0..200).filter(|&i| i != q && labels[i] == labels[q]).collect();
            oracle.sort_by(|&a, &b| {
                (pos[a] - pos[q]).norm().total_cmp(&(pos[b] - pos[q]).norm()).then(a.cmp(&b))
            });
            oracle.truncate(10);
            assert_eq!(same_class_neighbors(&pos, &labels, q, 10), oracle);
        }
    }

    #[test]
    fn exact_planes() {
        let p = fit_plane(&[v(0.0, 0.0, 2.0), v(1.0, 0.0, 2.0), v(0.0, 1.0, 2.0)]).unwrap();
        assert!((p.normal - v(0.0, 0.0, 1.0)).norm() < 1e-12);
        assert!((p.offset + 2.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<Vec3> = (0..10)
            .map(|_| {
                let (x, y): (f64, f64) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
                v(x, y, 1.0 - x - y)
            })
            .collect();
        let p = fit_plane(&pts).unwrap();
        assert!((p.normal - v(1.0, 1.0, 1.0) / 3f64.sqrt()).norm() < 1e-9);
        assert!(pts.iter().all(|q| point_plane_distance(q, &p) < 1e-9));
        assert!((p.normal.norm() - 1.0).abs() < 1e-9);
        assert!((p.normal.dot(&p.anchor) + p.offset).abs() < 1e-9);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(fit_plane(&[v(0.0, 0.0, 0.0), v(1.0, 0.0, 0.0)]).is_err());
        let line: Vec<Vec3> = (0..6).map(|i| v(i as f64, 2.0 * i as f64, -(i as f64))).collect();
        assert!(matches!(fit_plane(&line), Err(Error::DegeneratePlane(_))));
        assert!(fit_plane(&[v(1.0, 1.0, 1.0); 4]).is_err());
    }

    #[test]
    fn noisy_plane_matches_svd_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let noise = Normal::new(0.0, 0.01).unwrap();
        let pts: Vec<Vec3> = (0..50)
            .map(|_| v(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), noise.sample(&mut rng)))
            .collect();
        let p = fit_plane(&pts).unwrap();
        let rms = (pts.iter().map(|q| point_plane_distance(q, &p).powi(2)).sum::<f64>() / 50.0).sqrt();
        assert!(rms <= 0.02, "rms {rms}");

        // Independent route: smallest right singular vector of the centered data.
        let c = pts.iter().sum::<Vec3>() / 50.0;
        let m = DMatrix::from_fn(50, 3, |r, col| pts[r][col] - c[col]);
        let svd = m.svd(false, true);
        let vt = svd.v_t.unwrap();
        let k = (0..3).min_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b])).unwrap();
        let n = Vec3::new(vt[(k, 0)], vt[(k, 1)], vt[(k, 2)]);
        assert!(1.0 - p.normal.dot(&n).abs() < 1e-7);
    }

    #[test]
    fn fit_beats_random_candidate_planes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<Vec3> = (0..30).map(|_| v(rng.random(), rng.random(), 0.2 * rng.random::<f64>())).collect();
        let p = fit_plane(&pts).unwrap();
        let resid = |pl: &Plane| pts.iter().map(|q| pl.signed_distance(q).powi(2)).sum::<f64>();
        let best = resid(&p);
        for _ in 0..1000 {
            let cand = Plane::through(p.anchor, random_unit(&mut rng)).unwrap();
            assert!(best <= resid(&cand) + 1e-12);
        }
    }

    #[test]
    fn distance_examples() {
        let z0 = Plane::through(Vec3::zeros(), v(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(point_plane_distance(&v(0.0, 0.0, 3.0), &z0), 3.0);
        assert_eq!(point_plane_distance(&v(4.0, -2.0, 0.0), &z0), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..100 {
            let n = random_unit(&mut rng);
            let plane = Plane::through(v(rng.random(), rng.random(), rng.random()), n).unwrap();
            let q = v(rng.random(), rng.random(), rng.random());
            let formula = (plane.normal.x * q.x + plane.normal.y * q.y + plane.normal.z * q.z + plane.offset).abs();
            assert!((point_plane_distance(&q, &plane) - formula).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_examples() {
        let z0 = Plane::through(Vec3::zeros(), v(0.0, 0.0, 1.0)).unwrap();
        let pos = vec![v(0.0, 0.0, 0.0), v(1.0, 0.0, 0.0), v(0.0, 1.0, 0.0), v(1.0, 1.0, 0.0)];
        let set = PlaneSet { planes: vec![Some(z0); 4], fitted_at: 0 };
        let (loss, grad) = plane_loss(&pos, &set);
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|g| *g == Vec3::zeros()));

        let mut pos2 = pos.clone();
        pos2[1].z = -2.0;
        let (loss, grad) = plane_loss(&pos2, &set);
        assert_eq!(loss, 0.5);
        assert_eq!(grad[1], v(0.0, 0.0, -0.25));
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 20;
        let pos: Vec<Vec3> = (0..n).map(|_| v(rng.random(), rng.random(), rng.random())).collect();
        let planes = PlaneSet {
            planes: (0..n)
                .map(|i| (i % 5 != 0).then(|| Plane::through(v(rng.random(), rng.random(), rng.random()), random_unit(&mut rng)).unwrap()))
                .collect(),
            fitted_at: 0,
        };
        let (_, grad) = plane_loss(&pos, &planes);
        let h = 1e-6;
        for i in 0..n {
            for a in 0..3 {
                let mut plus = pos.clone();
                plus[i][a] += h;
                let mut minus = pos.clone();
                minus[i][a] -= h;
                let fd = (plane_loss(&plus, &planes).0 - plane_loss(&minus, &planes).0) / (2.0 * h);
                let g = grad[i][a];
                assert!((fd - g).abs() <= 1e-5 * g.abs().max(1e-3), "{i},{a}: {fd} vs {g}");
            }
        }
    }

    #[test]
    fn loss_is_rigid_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let pos: Vec<Vec3> = (0..30).map(|_| v(rng.random(), rng.random(), rng.random())).collect();
        let planes: Vec<Option<Plane>> = (0..30)
            .map(|_| Some(Plane::through(v(rng.random(), rng.random(), rng.random()), random_unit(&mut rng)).unwrap()))
            .collect();
        let rot = Rotation3::from_scaled_axis(v(0.3, -1.1, 0.7));
        let t = v(2.0, -1.0, 0.5);
        let pos_t: Vec<Vec3> = pos.iter().map(|p| rot * p + t).collect();
        let planes_t: Vec<Option<Plane>> = planes
            .iter()
            .map(|p| p.map(|p| Plane::through(rot * p.anchor + t, rot * p.normal).unwrap()))
            .collect();
        let a = plane_loss(&pos, &PlaneSet { planes, fitted_at: 0 }).0;
        let b = plane_loss(&pos_t, &PlaneSet { planes: planes_t, fitted_at: 0 }).0;
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn projection_examples() {
        let z0 = Plane::through(Vec3::zeros(), v(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(split_project(&v(1.0, 1.0, 5.0), &z0), v(1.0, 1.0, 0.0));
        assert_eq!(split_project(&v(1.0, 1.0, 0.0), &z0), v(1.0, 1.0, 0.0));
    }

    #[test]
    fn projection_is_closest_point_on_plane() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..20 {
            let plane = Plane::through(v(rng.random(), rng.random(), rng.random()), random_unit(&mut rng)).unwrap();
            let q = v(rng.random(), rng.random(), rng.random()) * 3.0;
            let proj = split_project(&q, &plane);
            assert!(point_plane_distance(&proj, &plane) <= 1e-9);
            assert!((split_project(&proj, &plane) - proj).norm() <= 1e-12);
            // Dense sampling of a patch around the projection.
            let u = plane.normal.cross(&v(0.3, 0.5, 0.8)).normalize();
            let w = plane.normal.cross(&u);
            let best = proj_dist_on_grid(&q, &proj, &u, &w);
            assert!((q - proj).norm() <= best + 1e-12);
        }
    }

    fn proj_dist_on_grid(q: &Vec3, center: &Vec3, u: &Vec3, w: &Vec3) -> f64 {
        let mut best = f64::INFINITY;
        for a in -20..=20 {
            for b in -20..=20 {
                let p = center + u * (a as f64 * 0.05) + w * (b as f64 * 0.05);
                best = best.min((q - p).norm());
            }
        }
        best
    }

    #[test]
    fn fit_planes_skips_small_and_unlabeled() {
        let mut pos: Vec<Vec3> = (0..25).map(|i| v((i % 5) as f64, (i / 5) as f64, 0.0)).collect();
        pos.push(v(10.0, 0.0, 0.0));
        pos.push(v(11.0, 0.0, 0.0));
        let mut labels = vec![1u16; 25];
        labels.extend([2, 2]);
        labels[3] = 0;
        let set = fit_planes(&pos, &labels, 10, 7);
        assert_eq!(set.fitted_at, 7);
        assert!(set.get(3).is_none());
        assert!(set.get(25).is_none() && set.get(26).is_none());
        let p = set.get(0).unwrap();
        assert!((p.normal - v(0.0, 0.0, 1.0)).norm() < 1e-9);
        assert_eq!(set.count_fitted(), 24);
    }
}
