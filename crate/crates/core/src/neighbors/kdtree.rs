//! Exact k-d tree over 3D points.
//!
//! Results are ordered by `(squared distance, point index)` so that ties
//! resolve to the lower index, which makes the tree agree element-for-element
//! with a linear scan.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::geometry::Point3;

const LEAF_SIZE: usize = 16;

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: u32,
        end: u32,
    },
    Split {
        axis: u8,
        value: f64,
        left: u32,
        right: u32,
    },
}

#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<[f64; 3]>,
    order: Vec<u32>,
    nodes: Vec<Node>,
    bounds: Vec<([f64; 3], [f64; 3])>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    dist2: f64,
    index: u32,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[inline]
pub(crate) fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

impl KdTree {
    pub fn build(points: &[Point3]) -> Self {
        let points: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
        let mut tree = KdTree {
            order: (0..points.len() as u32).collect(),
            points,
            nodes: Vec::new(),
            bounds: Vec::new(),
        };
        if !tree.points.is_empty() {
            tree.build_node(0, tree.points.len());
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn build_node(&mut self, start: usize, end: usize) -> u32 {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.order[start..end] {
            let p = &self.points[i as usize];
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let id = self.nodes.len() as u32;
        self.bounds.push((lo, hi));
        let axis = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap();
        if end - start <= LEAF_SIZE || hi[axis] - lo[axis] <= 0.0 {
            self.nodes.push(Node::Leaf {
                start: start as u32,
                end: end as u32,
            });
            return id;
        }
        self.nodes.push(Node::Leaf { start: 0, end: 0 });
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a as usize][axis].total_cmp(&points[b as usize][axis])
        });
        let value = self.points[self.order[mid] as usize][axis];
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id as usize] = Node::Split {
            axis: axis as u8,
            value,
            left,
            right,
        };
        id
    }

    fn lower_bound(&self, node: u32, q: &[f64; 3]) -> f64 {
        let (lo, hi) = &self.bounds[node as usize];
        let mut d = 0.0;
        for a in 0..3 {
            let e = if q[a] < lo[a] {
                lo[a] - q[a]
            } else if q[a] > hi[a] {
                q[a] - hi[a]
            } else {
                0.0
            };
            d += e * e;
        }
        d
    }

    /// The `k` nearest points to `query` as `(index, squared distance)`,
    /// ascending by distance then index. Points with squared distance above
    /// `max_dist2` are never returned.
    pub fn knn(&self, query: &Point3, k: usize, max_dist2: f64) -> Vec<(u32, f64)> {
        if k == 0 || self.points.is_empty() {
            return Vec::new();
        }
        let q = [query.x, query.y, query.z];
        let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
        let mut stack = vec![0u32];
        while let Some(node) = stack.pop() {
            let bound = self.lower_bound(node, &q);
            if bound > max_dist2 {
                continue;
            }
            // Equal bounds are still visited: a tie may hold a lower index.
            if heap.len() == k && bound > heap.peek().unwrap().dist2 {
                continue;
            }
            match self.nodes[node as usize] {
                Node::Leaf { start, end } => {
                    for &i in &self.order[start as usize..end as usize] {
                        let d = dist2(&q, &self.points[i as usize]);
                        if d > max_dist2 {
                            continue;
                        }
                        let c = Candidate { dist2: d, index: i };
                        if heap.len() < k {
                            heap.push(c);
                        } else if c < *heap.peek().unwrap() {
                            heap.pop();
                            heap.push(c);
                        }
                    }
                }
                Node::Split {
                    axis,
                    value,
                    left,
                    right,
                } => {
                    let (near, far) = if q[axis as usize] < value {
                        (left, right)
                    } else {
                        (right, left)
                    };
                    stack.push(far);
                    stack.push(near);
                }
            }
        }
        heap.into_sorted_vec()
            .into_iter()
            .map(|c| (c.index, c.dist2))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn linear_scan(points: &[Point3], q: &Point3, k: usize) -> Vec<(u32, f64)> {
        let mut all: Vec<(u32, f64)> = points
            .iter()
            .enumerate()
            .map(|(i, p)| (i as u32, (p - q).norm_squared()))
            .collect();
        all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    #[test]
    fn matches_linear_scan_on_grid_with_ties() {
        // Integer grid: many exactly equal distances.
        let mut pts = Vec::new();
        for x in 0..8 {
            for y in 0..8 {
                for z in 0..4 {
                    pts.push(Point3::new(x as f64, y as f64, z as f64));
                }
            }
        }
        let tree = KdTree::build(&pts);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let q = Point3::new(
                rng.random_range(0..8) as f64,
                rng.random_range(0..8) as f64,
                rng.random_range(0..4) as f64 + 0.5,
            );
            let got: Vec<u32> = tree
                .knn(&q, 10, f64::INFINITY)
                .iter()
                .map(|c| c.0)
                .collect();
            let want: Vec<u32> = linear_scan(&pts, &q, 10).iter().map(|c| c.0).collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn duplicate_points_resolve_by_index() {
        let pts = vec![Point3::new(1.0, 1.0, 1.0); 40];
        let tree = KdTree::build(&pts);
        let got: Vec<u32> = tree
            .knn(&Point3::zeros(), 5, f64::INFINITY)
            .iter()
            .map(|c| c.0)
            .collect();
        assert_eq!(got, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn radius_limit_and_small_clouds() {
        let pts = vec![Point3::new(0.0, 0.0, 0.0), Point3::new(3.0, 0.0, 0.0)];
        let tree = KdTree::build(&pts);
        assert_eq!(tree.knn(&Point3::zeros(), 5, 1.0).len(), 1);
        assert_eq!(tree.knn(&Point3::zeros(), 5, f64::INFINITY).len(), 2);
        assert!(KdTree::build(&[])
            .knn(&Point3::zeros(), 3, f64::INFINITY)
            .is_empty());
    }
}
