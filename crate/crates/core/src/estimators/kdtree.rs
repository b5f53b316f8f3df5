use nalgebra::Vector3;

/// Static 3-d tree for exact nearest-neighbor queries.
///
/// Nodes are stored implicitly: for a slice `[lo, hi)` the median element
/// `(lo + hi) / 2` is the node and the two halves are its subtrees. The split
/// axis cycles x, y, z with depth.
#[derive(Clone, Debug)]
pub struct KdTree {
    points: Vec<Vector3<f64>>,
    index: Vec<usize>,
}

impl KdTree {
    pub fn build(points: &[Vector3<f64>]) -> Self {
        let mut index: Vec<usize> = (0..points.len()).collect();
        split(points, &mut index, 0);
        Self {
            points: points.to_vec(),
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &Vector3<f64> {
        &self.points[i]
    }

    /// Index of the closest point and its squared distance. Ties keep the
    /// first candidate visited.
    pub fn nearest(&self, query: &Vector3<f64>) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(query, 0, self.index.len(), 0, &mut best);
        Some(best)
    }

    fn search(&self, q: &Vector3<f64>, lo: usize, hi: usize, depth: usize, best: &mut (usize, f64)) {
        if lo >= hi {
            return;
        }
        let mid = (lo + hi) / 2;
        let idx = self.index[mid];
        let p = &self.points[idx];
        let d2 = (p - q).norm_squared();
        if d2 < best.1 {
            *best = (idx, d2);
        }
        let axis = depth % 3;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(q, near.0, near.1, depth + 1, best);
        if diff * diff < best.1 {
            self.search(q, far.0, far.1, depth + 1, best);
        }
    }
}

fn split(points: &[Vector3<f64>], index: &mut [usize], depth: usize) {
    if index.len() <= 1 {
        return;
    }
    let axis = depth % 3;
    let mid = index.len() / 2;
    index.select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]));
    let (left, rest) = index.split_at_mut(mid);
    split(points, left, depth + 1);
    split(points, &mut rest[1..], depth + 1);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pts: Vec<_> = (0..500)
            .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let tree = KdTree::build(&pts);
        for _ in 0..300 {
            let q = Vector3::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5));
            let (_, d2) = tree.nearest(&q).unwrap();
            let brute = pts.iter().map(|p| (p - q).norm_squared()).fold(f64::INFINITY, f64::min);
            assert_eq!(d2, brute);
        }
    }

    #[test]
    fn duplicates_and_empty() {
        let pts = vec![Vector3::new(1.0, 1.0, 1.0); 100];
        let tree = KdTree::build(&pts);
        assert_eq!(tree.nearest(&Vector3::zeros()).unwrap().1, 3.0);
        assert!(KdTree::build(&[]).nearest(&Vector3::zeros()).is_none());
    }
}
