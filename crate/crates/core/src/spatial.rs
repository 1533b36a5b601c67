//! Immutable k-d tree over 3D points with ball and k-nearest queries.
//!
//! Both query kinds order results by squared Euclidean distance and break
//! ties by the lower point index, so the tree and the exhaustive scan in
//! [`brute_force_ball_query`] return identical sequences.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::geometry::PointSet;

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

/// k-d tree over the positions of a [`PointSet`].
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    points: Vec<[f64; 3]>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

/// Neighbors returned by a query, nearest first.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighborhood {
    pub indices: Vec<usize>,
    pub distances: Vec<f64>,
    /// Distinct points found inside the ball before replication (ball queries).
    pub found: usize,
    /// True when the ball was empty and the globally nearest point was used.
    pub out_of_ball: bool,
}

#[inline]
fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[inline]
fn cmp_candidate(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// The `k` smallest `(d², index)` pairs seen so far, kept sorted.
struct KBest {
    k: usize,
    items: Vec<(f64, usize)>,
}

impl KBest {
    fn new(k: usize) -> Self {
        Self {
            k,
            items: Vec::with_capacity(k + 1),
        }
    }

    fn worst(&self) -> Option<f64> {
        (self.items.len() == self.k).then(|| self.items[self.k - 1].0)
    }

    fn offer(&mut self, cand: (f64, usize)) {
        if self.items.len() == self.k
            && cmp_candidate(&cand, &self.items[self.k - 1]) != Ordering::Less
        {
            return;
        }
        let pos = self
            .items
            .partition_point(|x| cmp_candidate(x, &cand) == Ordering::Less);
        self.items.insert(pos, cand);
        self.items.truncate(self.k);
    }
}

impl SpatialIndex {
    /// Builds the tree. Fails on an empty point set.
    pub fn build(points: &PointSet) -> Result<Self> {
        Self::from_positions(points.positions().to_vec())
    }

    pub fn from_positions(points: Vec<[f64; 3]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::input("cannot build a spatial index over zero points"));
        }
        if points.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::input("spatial index positions must be finite"));
        }
        let mut index = Self {
            order: (0..points.len()).collect(),
            points,
            nodes: Vec::new(),
        };
        let n = index.points.len();
        index.build_node(0, n);
        Ok(index)
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let axis = self.widest_axis(start, end);
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b))
        });
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    fn widest_axis(&self, start: usize, end: usize) -> usize {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.order[start..end] {
            for a in 0..3 {
                lo[a] = lo[a].min(self.points[i][a]);
                hi[a] = hi[a].max(self.points[i][a]);
            }
        }
        (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])).then(b.cmp(&a)))
            .unwrap()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.points
    }

    /// Collects the `k` best candidates with `d² ≤ radius2` below node `id`.
    fn search(&self, id: usize, center: &[f64; 3], radius2: f64, best: &mut KBest) {
        match self.nodes[id] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d2 = dist2(center, &self.points[i]);
                    if d2 <= radius2 {
                        best.offer((d2, i));
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let delta = center[axis] - value;
                let (near, far) = if delta <= 0.0 { (left, right) } else { (right, left) };
                self.search(near, center, radius2, best);
                let bound = best.worst().map_or(radius2, |w| w.min(radius2));
                // Equal distances must still be visited: a tie with a lower
                // index may sit on the far side.
                if delta * delta <= bound {
                    self.search(far, center, radius2, best);
                }
            }
        }
    }

    /// The `k` nearest points, ascending by distance, ties by lower index.
    pub fn knn_query(&self, center: [f64; 3], k: usize) -> Result<Neighborhood> {
        if k == 0 || k > self.len() {
            return Err(Error::input(format!(
                "knn_query: k = {k} outside 1..={}",
                self.len()
            )));
        }
        let mut best = KBest::new(k);
        self.search(0, &center, f64::INFINITY, &mut best);
        Ok(neighborhood(best.items, k, false))
    }

    /// Exactly `k` neighbors within radius `r`.
    ///
    /// The nearest `k` in-ball points are returned; when only `m < k` exist
    /// they are repeated cyclically nearest-first. An empty ball falls back
    /// to the globally nearest point, repeated `k` times and flagged
    /// [`Neighborhood::out_of_ball`].
    pub fn ball_query(&self, center: [f64; 3], r: f64, k: usize) -> Result<Neighborhood> {
        check_ball_args(r, k)?;
        let mut best = KBest::new(k);
        self.search(0, &center, r * r, &mut best);
        if best.items.is_empty() {
            let mut nearest = KBest::new(1);
            self.search(0, &center, f64::INFINITY, &mut nearest);
            return Ok(neighborhood(nearest.items, k, true));
        }
        Ok(neighborhood(best.items, k, false))
    }
}

fn check_ball_args(r: f64, k: usize) -> Result<()> {
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::input(format!("ball_query radius must be positive, got {r}")));
    }
    if k == 0 {
        return Err(Error::input("ball_query needs K ≥ 1"));
    }
    Ok(())
}

fn neighborhood(found: Vec<(f64, usize)>, k: usize, out_of_ball: bool) -> Neighborhood {
    let m = found.len();
    let (indices, distances) = (0..k)
        .map(|j| {
            let (d2, i) = found[j % m];
            (i, d2.sqrt())
        })
        .unzip();
    Neighborhood {
        indices,
        distances,
        found: if out_of_ball { 0 } else { m },
        out_of_ball,
    }
}

/// Exhaustive-scan version of [`SpatialIndex::ball_query`] with the same contract.
pub fn brute_force_ball_query(
    points: &[[f64; 3]],
    center: [f64; 3],
    r: f64,
    k: usize,
) -> Result<Neighborhood> {
    check_ball_args(r, k)?;
    if points.is_empty() {
        return Err(Error::input("ball query over zero points"));
    }
    let mut all: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| (dist2(&center, p), i))
        .collect();
    all.sort_by(cmp_candidate);
    let r2 = r * r;
    let inside: Vec<(f64, usize)> = all.iter().copied().take_while(|c| c.0 <= r2).take(k).collect();
    if inside.is_empty() {
        return Ok(neighborhood(vec![all[0]], k, true));
    }
    Ok(neighborhood(inside, k, false))
}

/// Exhaustive-scan k-nearest neighbors.
pub fn brute_force_knn(points: &[[f64; 3]], center: [f64; 3], k: usize) -> Result<Neighborhood> {
    if k == 0 || k > points.len() {
        return Err(Error::input(format!("knn: k = {k} outside 1..={}", points.len())));
    }
    let mut all: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| (dist2(&center, p), i))
        .collect();
    all.sort_by(cmp_candidate);
    all.truncate(k);
    Ok(neighborhood(all, k, false))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn index(points: &[[f64; 3]]) -> SpatialIndex {
        SpatialIndex::from_positions(points.to_vec()).unwrap()
    }

    #[test]
    fn single_point() {
        let idx = index(&[[1.0, 2.0, 3.0]]);
        let n = idx.ball_query([1.0, 2.0, 3.0], 10.0, 1).unwrap();
        assert_eq!((n.indices, n.distances), (vec![0], vec![0.0]));
        let far = idx.ball_query([5.0, 2.0, 3.0], 0.1, 3).unwrap();
        assert!(far.out_of_ball);
        assert_eq!(far.indices, vec![0, 0, 0]);
    }

    #[test]
    fn replication_is_cyclic_nearest_first() {
        let pts = [[0.3, 0.0, 0.0], [0.1, 0.0, 0.0], [0.2, 0.0, 0.0], [5.0, 0.0, 0.0]];
        let n = index(&pts).ball_query([0.0; 3], 0.5, 5).unwrap();
        assert_eq!(n.indices, vec![1, 2, 0, 1, 2]);
        assert_eq!(n.found, 3);
    }

    #[test]
    fn duplicates_keep_distinct_indices() {
        let pts = [[1.0, 1.0, 1.0]; 12];
        let idx = index(&pts);
        let n = idx.ball_query([1.0, 1.0, 1.0], 0.1, 4).unwrap();
        assert_eq!(n.indices, vec![0, 1, 2, 3]);
        let b = brute_force_ball_query(&pts, [1.0, 1.0, 1.0], 0.1, 4).unwrap();
        assert_eq!(n, b);
    }

    #[test]
    fn knn_ties_prefer_lower_index() {
        let pts = [[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 3.0, 0.0]];
        let n = index(&pts).knn_query([0.0; 3], 2).unwrap();
        assert_eq!(n.indices, vec![0, 1]);
        let all = index(&pts).knn_query([0.0; 3], 3).unwrap();
        assert_eq!(all.indices, vec![0, 1, 2]);
        assert!(index(&pts).knn_query([0.0; 3], 4).is_err());
    }

    #[test]
    fn empty_index_rejected() {
        assert!(SpatialIndex::build(&PointSet::default()).is_err());
    }

    #[test]
    fn bad_ball_arguments() {
        let idx = index(&[[0.0; 3]]);
        assert!(idx.ball_query([0.0; 3], 0.0, 1).is_err());
        assert!(idx.ball_query([0.0; 3], 1.0, 0).is_err());
    }
}
