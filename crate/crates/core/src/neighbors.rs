//! Exact Euclidean nearest-neighbor search over training embeddings.
//!
//! The index keeps one k-d tree over all points (for k-NN queries) and one
//! tree per class (for the per-class nearest distance used by the 1-NN
//! score). Trees split on the dimension of largest spread at the median and
//! scan leaves of at most [`LEAF_SIZE`] points linearly. Pruning only skips a
//! subtree when its splitting-plane distance strictly exceeds the current
//! k-th best, so results are exact, ties included.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::types::LabelId;

pub const LEAF_SIZE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeighborHit {
    /// Euclidean distance to the query.
    pub distance: f64,
    pub label: LabelId,
    /// Insertion position of the point in the input to [`NeighborIndex::build`].
    pub point_index: usize,
}

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: u32, end: u32 },
    Split { dim: u32, value: f64, left: u32, right: u32 },
}

/// Candidate ordered by (squared distance, point index); the max-heap top is
/// the current worst of the k best.
#[derive(Debug, Clone, Copy)]
struct Candidate {
    dist2: f64,
    id: u32,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2.total_cmp(&other.dist2).then(self.id.cmp(&other.id))
    }
}

#[derive(Debug, Clone)]
struct KdTree {
    dim: usize,
    /// Coordinates in tree order so each leaf is contiguous.
    coords: Vec<f64>,
    /// Global point index for each slot of `coords`.
    ids: Vec<u32>,
    nodes: Vec<Node>,
}

impl KdTree {
    fn build(points: &[f64], dim: usize, mut subset: Vec<u32>) -> Self {
        let mut nodes = Vec::new();
        let n = subset.len();
        build_node(points, dim, &mut subset, 0, n, &mut nodes);
        let mut coords = Vec::with_capacity(n * dim);
        for &id in &subset {
            let i = id as usize;
            coords.extend_from_slice(&points[i * dim..(i + 1) * dim]);
        }
        Self {
            dim,
            coords,
            ids: subset,
            nodes,
        }
    }

    fn knn(&self, query: &[f64], k: usize) -> Vec<Candidate> {
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search(0, query, k, &mut heap);
        let mut out = heap.into_vec();
        out.sort_unstable();
        out
    }

    fn search(&self, node: usize, query: &[f64], k: usize, heap: &mut BinaryHeap<Candidate>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for slot in start as usize..end as usize {
                    let bound = if heap.len() < k {
                        f64::INFINITY
                    } else {
                        heap.peek().map_or(f64::INFINITY, |c| c.dist2)
                    };
                    let point = &self.coords[slot * self.dim..(slot + 1) * self.dim];
                    let Some(dist2) = squared_distance_bounded(query, point, bound) else {
                        continue;
                    };
                    let cand = Candidate {
                        dist2,
                        id: self.ids[slot],
                    };
                    if heap.len() < k {
                        heap.push(cand);
                    } else if heap.peek().is_some_and(|worst| cand < *worst) {
                        heap.pop();
                        heap.push(cand);
                    }
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = query[dim as usize] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near as usize, query, k, heap);
                let visit_far = heap.len() < k
                    || heap.peek().is_some_and(|worst| diff * diff <= worst.dist2);
                if visit_far {
                    self.search(far as usize, query, k, heap);
                }
            }
        }
    }
}

fn build_node(
    points: &[f64],
    dim: usize,
    order: &mut [u32],
    start: usize,
    end: usize,
    nodes: &mut Vec<Node>,
) -> u32 {
    let me = nodes.len() as u32;
    let slice = &mut order[start..end];
    let coord = |id: u32, d: usize| points[id as usize * dim + d];

    let (split_dim, spread) = (0..dim)
        .map(|d| {
            let (lo, hi) = slice.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &id| {
                let v = coord(id, d);
                (lo.min(v), hi.max(v))
            });
            (d, hi - lo)
        })
        .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });

    if slice.len() <= LEAF_SIZE || spread <= 0.0 {
        nodes.push(Node::Leaf {
            start: start as u32,
            end: end as u32,
        });
        return me;
    }

    let mid = slice.len() / 2;
    slice.select_nth_unstable_by(mid, |&a, &b| {
        coord(a, split_dim)
            .total_cmp(&coord(b, split_dim))
            .then(a.cmp(&b))
    });
    let value = coord(slice[mid], split_dim);

    nodes.push(Node::Split {
        dim: split_dim as u32,
        value,
        left: 0,
        right: 0,
    });
    let left = build_node(points, dim, order, start, start + mid, nodes);
    let right = build_node(points, dim, order, start + mid, end, nodes);
    if let Node::Split {
        left: l, right: r, ..
    } = &mut nodes[me as usize]
    {
        *l = left;
        *r = right;
    }
    me
}

/// Squared Euclidean distance, or `None` once the running sum exceeds `bound`.
///
/// The partial sums are accumulated in the same order as a plain sum, so a
/// completed result is bit-identical to [`squared_distance`].
#[inline]
fn squared_distance_bounded(a: &[f64], b: &[f64], bound: f64) -> Option<f64> {
    let mut acc = 0.0;
    for (ca, cb) in a.chunks(8).zip(b.chunks(8)) {
        for (x, y) in ca.iter().zip(cb) {
            let d = x - y;
            acc += d * d;
        }
        if acc > bound {
            return None;
        }
    }
    Some(acc)
}

#[inline]
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Euclidean distance.
#[inline]
pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    squared_distance(a, b).sqrt()
}

/// Read-only exact k-NN index over labeled points.
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    dim: usize,
    /// Coordinates in insertion order.
    points: Vec<f64>,
    labels: Vec<LabelId>,
    all: KdTree,
    per_class: Vec<Option<KdTree>>,
}

impl NeighborIndex {
    /// Builds the index. Deterministic given the input order.
    pub fn build<'a, I>(points: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a [f64], LabelId)>,
    {
        let mut dim = None;
        let mut coords = Vec::new();
        let mut labels = Vec::new();
        for (p, label) in points {
            match dim {
                None => dim = Some(p.len()),
                Some(d) if d != p.len() => {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        found: p.len(),
                    })
                }
                _ => {}
            }
            coords.extend_from_slice(p);
            labels.push(label);
        }
        let dim = dim.ok_or(Error::Empty("neighbor index needs at least one point"))?;
        if dim == 0 {
            return Err(Error::InvalidParameter("zero-dimensional points".into()));
        }
        if labels.len() > u32::MAX as usize {
            return Err(Error::InvalidParameter("too many points for the index".into()));
        }

        let n = labels.len() as u32;
        let all = KdTree::build(&coords, dim, (0..n).collect());
        let classes = labels.iter().map(|l| l.0 + 1).max().unwrap_or(0);
        let mut members: Vec<Vec<u32>> = vec![Vec::new(); classes];
        for (i, l) in labels.iter().enumerate() {
            members[l.0].push(i as u32);
        }
        let per_class = members
            .into_iter()
            .map(|m| (!m.is_empty()).then(|| KdTree::build(&coords, dim, m)))
            .collect();
        Ok(Self {
            dim,
            points: coords,
            labels,
            all,
            per_class,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Points in insertion order.
    pub fn points(&self) -> impl Iterator<Item = (&[f64], LabelId)> {
        self.points.chunks_exact(self.dim).zip(self.labels.iter().copied())
    }

    /// Whether at least one stored point carries `label`.
    pub fn has_class(&self, label: LabelId) -> bool {
        self.per_class.get(label.0).is_some_and(Option::is_some)
    }

    fn check_dim(&self, v: &[f64]) -> Result<()> {
        if v.len() == self.dim {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                expected: self.dim,
                found: v.len(),
            })
        }
    }

    /// The `min(k, n)` nearest points, nearest first; equal distances are
    /// ordered by insertion index.
    pub fn query_knn(&self, v: &[f64], k: usize) -> Result<Vec<NeighborHit>> {
        self.check_dim(v)?;
        if k == 0 {
            return Err(Error::InvalidParameter("k must be at least 1".into()));
        }
        let k = k.min(self.len());
        Ok(self
            .all
            .knn(v, k)
            .into_iter()
            .map(|c| NeighborHit {
                distance: c.dist2.sqrt(),
                label: self.labels[c.id as usize],
                point_index: c.id as usize,
            })
            .collect())
    }

    /// Distance from `v` to the closest stored point of each class, indexed by
    /// label. Classes without stored points map to `None`.
    pub fn query_nearest_per_class(&self, v: &[f64]) -> Result<Vec<Option<f64>>> {
        self.check_dim(v)?;
        Ok(self
            .per_class
            .iter()
            .map(|tree| {
                tree.as_ref()
                    .and_then(|t| t.knn(v, 1).first().map(|c| c.dist2.sqrt()))
            })
            .collect())
    }

    /// Rough in-memory footprint in bytes.
    pub fn heap_bytes(&self) -> usize {
        let f = std::mem::size_of::<f64>();
        let tree_bytes = |t: &KdTree| {
            t.coords.len() * f + t.ids.len() * 4 + t.nodes.len() * std::mem::size_of::<Node>()
        };
        self.points.len() * f
            + self.labels.len() * std::mem::size_of::<LabelId>()
            + tree_bytes(&self.all)
            + self.per_class.iter().flatten().map(tree_bytes).sum::<usize>()
    }
}
