//! Exact nearest-neighbour queries backed by an R*-tree.

use rstar::primitives::GeomWithData;
use rstar::RTree;

use crate::geometry::Point3;

type Entry = GeomWithData<Point3, usize>;

pub struct NeighborIndex {
    tree: RTree<Entry>,
    len: usize,
}

impl NeighborIndex {
    pub fn new(points: &[Point3]) -> Self {
        let entries = points.iter().enumerate().map(|(i, p)| Entry::new(*p, i)).collect();
        Self { tree: RTree::bulk_load(entries), len: points.len() }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Index and squared distance of the closest indexed point (lowest
    /// index among ties).
    pub fn nearest(&self, query: &Point3) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        for (e, d2) in self.tree.nearest_neighbor_iter_with_distance_2(query) {
            if d2 > best.1 {
                break;
            }
            if d2 < best.1 || e.data < best.0 {
                best = (e.data, d2);
            }
        }
        best
    }

    /// The `k` closest points other than `skip`, ordered by distance and then
    /// by index.
    pub fn k_nearest_excluding(&self, query: &Point3, k: usize, skip: usize) -> Vec<usize> {
        let mut found: Vec<(f64, usize)> = Vec::with_capacity(k + 2);
        for (e, d2) in self.tree.nearest_neighbor_iter_with_distance_2(query) {
            if e.data == skip {
                continue;
            }
            // keep collecting past k while distances tie with the k-th
            if found.len() >= k && found.last().is_some_and(|&(last, _)| d2 > last) {
                break;
            }
            found.push((d2, e.data));
        }
        found.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        found.truncate(k);
        found.into_iter().map(|(_, i)| i).collect()
    }
}

pub(crate) fn dist2(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

pub(crate) fn dist(a: &Point3, b: &Point3) -> f64 {
    dist2(a, b).sqrt()
}

/// k nearest neighbours of every point, excluding the point itself.
pub fn knn_graph(points: &[Point3], k: usize) -> Vec<Vec<usize>> {
    let index = NeighborIndex::new(points);
    points.iter().enumerate().map(|(i, p)| index.k_nearest_excluding(p, k, i)).collect()
}
