//! Static 3D k-d tree for exact nearest-neighbor queries.
//!
//! Results are ordered by `(squared distance, point index)`, so equal
//! distances always resolve to the lowest index no matter how the tree was
//! split.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

const LEAF_SIZE: usize = 12;

#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<[f64; 3]>,
    perm: Vec<u32>,
    // Split axis of the internal node whose pivot sits at this slot of `perm`.
    axes: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist2: f64,
}

impl Neighbor {
    fn key_cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.index.cmp(&other.index))
    }
}

impl Eq for Neighbor {}

impl PartialOrd for Neighbor {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Neighbor {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key_cmp(other)
    }
}

#[inline]
fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

impl KdTree {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        assert!(points.len() < u32::MAX as usize, "too many points for KdTree");
        let mut perm: Vec<u32> = (0..points.len() as u32).collect();
        let mut axes = vec![0u8; points.len()];
        build(&points, &mut perm, &mut axes, 0);
        Self { points, perm, axes }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, index: usize) -> [f64; 3] {
        self.points[index]
    }

    /// Closest point to `query`, lowest index on ties.
    pub fn nearest(&self, query: &[f64; 3]) -> Option<Neighbor> {
        let mut best = None;
        self.nearest_rec(query, 0, self.perm.len(), &mut best);
        best
    }

    /// Closest point within `radius` (inclusive), if any.
    pub fn nearest_within(&self, query: &[f64; 3], radius: f64) -> Option<Neighbor> {
        // Seed with a sentinel bound; any real point at exactly `radius`
        // beats it because the sentinel index is `usize::MAX`.
        let mut best = Some(Neighbor {
            index: usize::MAX,
            dist2: radius * radius,
        });
        self.nearest_rec(query, 0, self.perm.len(), &mut best);
        best.filter(|n| n.index != usize::MAX)
    }

    fn nearest_rec(&self, q: &[f64; 3], lo: usize, hi: usize, best: &mut Option<Neighbor>) {
        if hi - lo <= LEAF_SIZE {
            for &i in &self.perm[lo..hi] {
                let cand = Neighbor {
                    index: i as usize,
                    dist2: dist2(q, &self.points[i as usize]),
                };
                if best.is_none_or(|b| cand.key_cmp(&b) == Ordering::Less) {
                    *best = Some(cand);
                }
            }
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let axis = self.axes[mid] as usize;
        let pivot = self.perm[mid] as usize;
        let cand = Neighbor {
            index: pivot,
            dist2: dist2(q, &self.points[pivot]),
        };
        if best.is_none_or(|b| cand.key_cmp(&b) == Ordering::Less) {
            *best = Some(cand);
        }
        let diff = q[axis] - self.points[pivot][axis];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.nearest_rec(q, near.0, near.1, best);
        if best.is_none_or(|b| diff * diff <= b.dist2) {
            self.nearest_rec(q, far.0, far.1, best);
        }
    }

    /// The `k` closest points sorted by `(distance, index)`.
    pub fn k_nearest(&self, query: &[f64; 3], k: usize) -> Vec<Neighbor> {
        self.k_nearest_filtered(query, k, |_| true)
    }

    /// Like [`KdTree::k_nearest`] but only points for which `keep` holds
    /// are considered.
    pub fn k_nearest_filtered(
        &self,
        query: &[f64; 3],
        k: usize,
        keep: impl Fn(usize) -> bool,
    ) -> Vec<Neighbor> {
        if k == 0 {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.knn_rec(query, k, &keep, 0, self.perm.len(), &mut heap);
        heap.into_sorted_vec()
    }

    fn knn_rec(
        &self,
        q: &[f64; 3],
        k: usize,
        keep: &impl Fn(usize) -> bool,
        lo: usize,
        hi: usize,
        heap: &mut BinaryHeap<Neighbor>,
    ) {
        let offer = |i: usize, heap: &mut BinaryHeap<Neighbor>| {
            if !keep(i) {
                return;
            }
            let cand = Neighbor {
                index: i,
                dist2: dist2(q, &self.points[i]),
            };
            if heap.len() < k {
                heap.push(cand);
            } else if cand < *heap.peek().unwrap() {
                heap.pop();
                heap.push(cand);
            }
        };
        if hi - lo <= LEAF_SIZE {
            for &i in &self.perm[lo..hi] {
                offer(i as usize, heap);
            }
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let axis = self.axes[mid] as usize;
        let pivot = self.perm[mid] as usize;
        offer(pivot, heap);
        let diff = q[axis] - self.points[pivot][axis];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.knn_rec(q, k, keep, near.0, near.1, heap);
        if heap.len() < k || diff * diff <= heap.peek().unwrap().dist2 {
            self.knn_rec(q, k, keep, far.0, far.1, heap);
        }
    }
}

fn build(points: &[[f64; 3]], perm: &mut [u32], axes: &mut [u8], offset: usize) {
    let n = perm.len();
    if n <= LEAF_SIZE {
        return;
    }
    let axis = widest_axis(points, perm);
    let mid = n / 2;
    perm.select_nth_unstable_by(mid, |&a, &b| {
        points[a as usize][axis]
            .total_cmp(&points[b as usize][axis])
            .then(a.cmp(&b))
    });
    axes[offset + mid] = axis as u8;
    let (left, rest) = perm.split_at_mut(mid);
    build(points, left, axes, offset);
    build(points, &mut rest[1..], axes, offset + mid + 1);
}

fn widest_axis(points: &[[f64; 3]], perm: &[u32]) -> usize {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in perm {
        let p = &points[i as usize];
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    (0..3)
        .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])).then(b.cmp(&a)))
        .unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_sorted(points: &[[f64; 3]], q: &[f64; 3]) -> Vec<Neighbor> {
        let mut all: Vec<Neighbor> = points
            .iter()
            .enumerate()
            .map(|(index, p)| Neighbor {
                index,
                dist2: dist2(p, q),
            })
            .collect();
        all.sort();
        all
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize, grid: bool) -> Vec<[f64; 3]> {
        (0..n)
            .map(|_| {
                if grid {
                    // Coarse lattice: lots of exact distance ties.
                    [
                        rng.random_range(0..4) as f64,
                        rng.random_range(0..4) as f64,
                        rng.random_range(0..2) as f64,
                    ]
                } else {
                    [rng.random(), rng.random(), rng.random()]
                }
            })
            .collect()
    }

    #[test]
    fn nearest_matches_brute_force_including_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &grid in &[false, true] {
            let pts = random_points(&mut rng, 500, grid);
            let tree = KdTree::new(pts.clone());
            for _ in 0..200 {
                let q = if grid {
                    [rng.random_range(0..4) as f64, rng.random_range(0..4) as f64, 0.5]
                } else {
                    [rng.random(), rng.random(), rng.random()]
                };
                assert_eq!(tree.nearest(&q), Some(brute_sorted(&pts, &q)[0]));
            }
        }
    }

    #[test]
    fn knn_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for &grid in &[false, true] {
            let pts = random_points(&mut rng, 300, grid);
            let tree = KdTree::new(pts.clone());
            for k in [1, 3, 10, 40] {
                let q = [rng.random(), rng.random(), rng.random()];
                let expect: Vec<_> = brute_sorted(&pts, &q).into_iter().take(k).collect();
                assert_eq!(tree.k_nearest(&q, k), expect);
            }
        }
    }

    #[test]
    fn nearest_within_respects_radius() {
        let tree = KdTree::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        assert_eq!(tree.nearest_within(&[0.5, 0.0, 0.0], 0.4), None);
        let hit = tree.nearest_within(&[0.5, 0.0, 0.0], 0.5).unwrap();
        assert_eq!(hit.index, 0);
        assert_eq!(tree.nearest_within(&[0.9, 0.0, 0.0], 0.5).unwrap().index, 1);
    }

    #[test]
    fn empty_tree() {
        let tree = KdTree::new(Vec::new());
        assert!(tree.nearest(&[0.0; 3]).is_none());
        assert!(tree.k_nearest(&[0.0; 3], 3).is_empty());
    }
}
