//! Exact k-nearest-neighbor search in three dimensions.
//!
//! Neighbors are ordered by `(squared distance, index)`, so ties resolve to
//! the lower index and the tree and the linear scan agree bit for bit.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

pub type Point = [f64; 3];

fn dist2(a: &Point, b: &Point) -> f64 {
    let d0 = a[0] - b[0];
    let d1 = a[1] - b[1];
    let d2 = a[2] - b[2];
    d0 * d0 + d1 * d1 + d2 * d2
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    d2: f64,
    index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2.total_cmp(&other.d2).then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Reference search: scans every point.
pub fn brute_force(points: &[Point], query: &Point, k: usize) -> Vec<usize> {
    let mut all: Vec<Candidate> = points
        .iter()
        .enumerate()
        .map(|(index, p)| Candidate { d2: dist2(p, query), index })
        .collect();
    all.sort_unstable();
    all.truncate(k);
    all.into_iter().map(|c| c.index).collect()
}

#[derive(Debug, Clone)]
struct Node {
    point: usize,
    axis: usize,
    left: Option<usize>,
    right: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Point>,
    nodes: Vec<Node>,
    root: Option<usize>,
}

impl KdTree {
    pub fn build(points: Vec<Point>) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut tree = Self {
            nodes: Vec::with_capacity(points.len()),
            root: None,
            points,
        };
        tree.root = tree.build_rec(&mut order, 0);
        tree
    }

    fn build_rec(&mut self, idx: &mut [usize], depth: usize) -> Option<usize> {
        if idx.is_empty() {
            return None;
        }
        let axis = depth % 3;
        let mid = idx.len() / 2;
        let pts = &self.points;
        idx.select_nth_unstable_by(mid, |a, b| pts[*a][axis].total_cmp(&pts[*b][axis]).then(a.cmp(b)));
        let point = idx[mid];
        let (lo, rest) = idx.split_at_mut(mid);
        let left = self.build_rec(lo, depth + 1);
        let right = self.build_rec(&mut rest[1..], depth + 1);
        self.nodes.push(Node { point, axis, left, right });
        Some(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    /// Indices of the `k` nearest points, nearest first.
    pub fn nearest(&self, query: &Point, k: usize) -> Vec<usize> {
        let mut heap = BinaryHeap::with_capacity(k + 1);
        if k > 0 {
            if let Some(root) = self.root {
                self.search(root, query, k, &mut heap);
            }
        }
        let mut found = heap.into_vec();
        found.sort_unstable();
        found.into_iter().map(|c| c.index).collect()
    }

    fn search(&self, node: usize, query: &Point, k: usize, heap: &mut BinaryHeap<Candidate>) {
        let n = &self.nodes[node];
        let p = &self.points[n.point];
        let cand = Candidate {
            d2: dist2(p, query),
            index: n.point,
        };
        if heap.len() < k {
            heap.push(cand);
        } else if cand < *heap.peek().unwrap() {
            heap.pop();
            heap.push(cand);
        }
        let diff = query[n.axis] - p[n.axis];
        let (near, far) = if diff < 0.0 { (n.left, n.right) } else { (n.right, n.left) };
        if let Some(c) = near {
            self.search(c, query, k, heap);
        }
        if let Some(c) = far {
            // equal distances must still be visited for the index tie-break
            if heap.len() < k || diff * diff <= heap.peek().unwrap().d2 {
                self.search(c, query, k, heap);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_resolve_to_lower_index() {
        let pts = vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 5.0]];
        let tree = KdTree::build(pts.clone());
        assert_eq!(tree.nearest(&[0.0; 3], 2), vec![0, 1]);
        assert_eq!(brute_force(&pts, &[0.0; 3], 2), vec![0, 1]);
    }

    #[test]
    fn duplicates_and_small_buffers() {
        let pts = vec![[2.0, 2.0, 2.0]; 7];
        let tree = KdTree::build(pts.clone());
        assert_eq!(tree.nearest(&[0.0; 3], 5), vec![0, 1, 2, 3, 4]);
        assert_eq!(tree.nearest(&[0.0; 3], 50).len(), 7);
        assert!(KdTree::build(Vec::new()).nearest(&[0.0; 3], 5).is_empty());
    }
}
