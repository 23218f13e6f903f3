//! Deterministic nearest-neighbour queries over fixed-dimension points (R*-tree backed).

use rstar::primitives::GeomWithData;
use rstar::RTree;

pub struct PointIndex<const D: usize> {
    tree: RTree<GeomWithData<[f64; D], usize>>,
}

impl<const D: usize> PointIndex<D> {
    /// Items are identified by their position in `points`.
    pub fn new(points: &[[f64; D]]) -> Self {
        let items = points.iter().enumerate().map(|(i, p)| GeomWithData::new(*p, i)).collect();
        Self { tree: RTree::bulk_load(items) }
    }

    pub fn len(&self) -> usize {
        self.tree.size()
    }

    pub fn is_empty(&self) -> bool {
        self.tree.size() == 0
    }

    /// Closest item and its squared distance; ties resolve to the smallest index.
    pub fn nearest(&self, q: &[f64; D]) -> Option<(usize, f64)> {
        self.nearest_k(q, 1).into_iter().next()
    }

    /// `k` closest items sorted by (squared distance, index).
    pub fn nearest_k(&self, q: &[f64; D], k: usize) -> Vec<(usize, f64)> {
        if k == 0 {
            return Vec::new();
        }
        let mut out: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
        for (item, d2) in self.tree.nearest_neighbor_iter_with_distance_2(q) {
            // keep collecting while tied with the current k-th distance
            if out.len() >= k && d2 > out[k - 1].1 {
                break;
            }
            out.push((item.data, d2));
        }
        out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        out.truncate(k);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn knn_matches_exhaustive_search_with_duplicates() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // grid points share coordinates exactly on every axis
        let pts: Vec<[f64; 3]> = (0..400).map(|_| [rng.random_range(0..5) as f64, rng.random_range(0..5) as f64, 0.0]).collect();
        let index = PointIndex::new(&pts);
        for _ in 0..100 {
            let q = [rng.random_range(-1.0..6.0), rng.random_range(-1.0..6.0), rng.random_range(-1.0..1.0)];
            let mut all: Vec<(usize, f64)> = pts.iter().enumerate().map(|(i, p)| (i, (0..3).map(|k| (p[k] - q[k]).powi(2)).sum())).collect();
            all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            assert_eq!(index.nearest_k(&q, 7), all[..7].to_vec());
            assert_eq!(index.nearest(&q), Some(all[0]));
        }
    }

    #[test]
    fn empty_index() {
        let index = PointIndex::<3>::new(&[]);
        assert!(index.is_empty());
        assert_eq!(index.nearest(&[0.0; 3]), None);
    }
}
