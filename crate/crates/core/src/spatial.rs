//! Exact k-nearest-neighbor search over fixed point sets.
//!
//! Low-dimensional sets (dimension ≤ 8) are indexed with an axis-split tree;
//! higher dimensions fall back to an exhaustive scan. Both return exactly
//! what a brute-force scan returns: ascending distance, ties to the lower
//! point id.

use std::cmp::Ordering;

use thiserror::Error;

/// Largest dimension indexed with a tree.
pub const TREE_MAX_DIM: usize = 8;
const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpatialError {
    #[error("cannot index an empty point set")]
    Empty,
    #[error("dimension must be positive")]
    ZeroDimension,
    #[error("point buffer of length {len} is not a multiple of dimension {dim}")]
    Ragged { len: usize, dim: usize },
    #[error("query has dimension {got}, index has {expected}")]
    QueryDimension { expected: usize, got: usize },
    #[error("k = {k} is invalid for an index of {count} points")]
    InvalidK { k: usize, count: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub id: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Tree,
    Flat,
}

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone)]
struct KdTree {
    nodes: Vec<Node>,
    order: Vec<usize>,
}

/// Read-only snapshot of a point set with exact k-NN queries.
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    dim: usize,
    points: Vec<f64>,
    tree: Option<KdTree>,
}

#[inline]
fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn key_cmp(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Bounded sorted candidate list, best first.
struct Candidates {
    k: usize,
    items: Vec<(f64, usize)>,
}

impl Candidates {
    fn new(k: usize) -> Self {
        Self {
            k,
            items: Vec::with_capacity(k + 1),
        }
    }

    fn full(&self) -> bool {
        self.items.len() == self.k
    }

    fn worst(&self) -> f64 {
        self.items.last().map_or(f64::INFINITY, |c| c.0)
    }

    fn offer(&mut self, cand: (f64, usize)) {
        if self.full() && key_cmp(&cand, self.items.last().unwrap()) != Ordering::Less {
            return;
        }
        let pos = self
            .items
            .partition_point(|c| key_cmp(c, &cand) == Ordering::Less);
        self.items.insert(pos, cand);
        self.items.truncate(self.k);
    }
}

impl NeighborIndex {
    /// Indexes `points`, a flat row-major buffer of `dim`-vectors.
    pub fn build(points: &[f64], dim: usize) -> Result<Self, SpatialError> {
        if dim == 0 {
            return Err(SpatialError::ZeroDimension);
        }
        if points.is_empty() {
            return Err(SpatialError::Empty);
        }
        if points.len() % dim != 0 {
            return Err(SpatialError::Ragged {
                len: points.len(),
                dim,
            });
        }
        let tree = (dim <= TREE_MAX_DIM).then(|| KdTree::build(points, dim));
        Ok(Self {
            dim,
            points: points.to_vec(),
            tree,
        })
    }

    pub fn from_rows<const N: usize>(rows: &[[f64; N]]) -> Result<Self, SpatialError> {
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::build(&flat, N)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, id: usize) -> &[f64] {
        &self.points[id * self.dim..(id + 1) * self.dim]
    }

    pub fn strategy(&self) -> Strategy {
        if self.tree.is_some() {
            Strategy::Tree
        } else {
            Strategy::Flat
        }
    }

    /// The `k` nearest stored points to `query`, ascending by distance.
    pub fn k_nearest(&self, query: &[f64], k: usize) -> Result<Vec<Neighbor>, SpatialError> {
        if query.len() != self.dim {
            return Err(SpatialError::QueryDimension {
                expected: self.dim,
                got: query.len(),
            });
        }
        if k == 0 || k > self.len() {
            return Err(SpatialError::InvalidK {
                k,
                count: self.len(),
            });
        }
        let mut cands = Candidates::new(k);
        match &self.tree {
            Some(tree) => tree.search(0, &self.points, self.dim, query, &mut cands),
            None => {
                for (id, p) in self.points.chunks_exact(self.dim).enumerate() {
                    cands.offer((squared_distance(query, p), id));
                }
            }
        }
        Ok(cands
            .items
            .into_iter()
            .map(|(d2, id)| Neighbor {
                id,
                distance: d2.sqrt(),
            })
            .collect())
    }

    /// Single nearest neighbor.
    pub fn nearest(&self, query: &[f64]) -> Result<Neighbor, SpatialError> {
        Ok(self.k_nearest(query, 1)?[0])
    }
}

impl KdTree {
    fn build(points: &[f64], dim: usize) -> Self {
        let n = points.len() / dim;
        let mut tree = KdTree {
            nodes: Vec::new(),
            order: (0..n).collect(),
        };
        tree.split(points, dim, 0, n);
        tree
    }

    fn split(&mut self, points: &[f64], dim: usize, start: usize, end: usize) -> usize {
        let slot = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return slot;
        }
        let coord = |id: usize, axis: usize| points[id * dim + axis];
        let ids = &mut self.order[start..end];
        let axis = (0..dim)
            .map(|axis| {
                let (lo, hi) = ids.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                    (lo.min(coord(i, axis)), hi.max(coord(i, axis)))
                });
                (axis, hi - lo)
            })
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
            .map(|(axis, _)| axis)
            .unwrap_or(0);
        let mid = ids.len() / 2;
        ids.select_nth_unstable_by(mid, |&a, &b| coord(a, axis).total_cmp(&coord(b, axis)));
        let value = coord(ids[mid], axis);
        // left holds coordinates <= value, right holds >= value
        self.nodes.push(Node::Leaf { start, end });
        let left = self.split(points, dim, start, start + mid);
        let right = self.split(points, dim, start + mid, end);
        self.nodes[slot] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        slot
    }

    fn search(&self, node: usize, points: &[f64], dim: usize, q: &[f64], cands: &mut Candidates) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &id in &self.order[start..end] {
                    let p = &points[id * dim..(id + 1) * dim];
                    cands.offer((squared_distance(q, p), id));
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, points, dim, q, cands);
                // equal bounds may still hold a lower-id tie, so prune strictly
                if !cands.full() || diff * diff <= cands.worst() {
                    self.search(far, points, dim, q, cands);
                }
            }
        }
    }
}
