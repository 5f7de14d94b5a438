use rand::seq::index;
use rand::Rng;

use crate::autodiff::Tensor;

/// Ordered list of 3-D points.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| p.iter().copied()).collect()
    }

    /// `[len, 3]` tensor. Panics on an empty cloud.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.points.len(), 3], self.flat()).expect("non-empty point cloud")
    }

    /// Reads a `[count, 3]` tensor back into points.
    pub fn from_tensor(t: &Tensor) -> Option<Self> {
        if t.shape().len() != 2 || t.shape()[1] != 3 {
            return None;
        }
        Some(Self {
            points: t.iter_rows().map(|r| [r[0], r[1], r[2]]).collect(),
        })
    }

    /// Axis-aligned bounds `(min, max)`; `None` for an empty cloud.
    pub fn bounds(&self) -> Option<([f64; 3], [f64; 3])> {
        let first = *self.points.first()?;
        Some(self.points.iter().fold((first, first), |(mut lo, mut hi), p| {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
            (lo, hi)
        }))
    }

    pub fn select(&self, ids: &[usize]) -> Self {
        Self {
            points: ids.iter().map(|&i| self.points[i]).collect(),
        }
    }
}

/// Point cloud with one class id per point.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledCloud {
    pub cloud: PointCloud,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl LabeledCloud {
    /// Infers the class count as `max label + 1`.
    pub fn new(cloud: PointCloud, labels: Vec<usize>) -> Self {
        let n_classes = labels.iter().max().map_or(0, |m| m + 1);
        Self {
            cloud,
            labels,
            n_classes,
        }
    }

    pub fn len(&self) -> usize {
        self.cloud.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cloud.is_empty()
    }

    pub fn select(&self, ids: &[usize]) -> Self {
        Self {
            cloud: self.cloud.select(ids),
            labels: ids.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
        }
    }

    /// `[len, n_classes]` one-hot rows.
    pub fn one_hot(&self) -> Tensor {
        let mut data = vec![0.0; self.labels.len() * self.n_classes];
        for (row, &l) in self.labels.iter().enumerate() {
            data[row * self.n_classes + l] = 1.0;
        }
        Tensor::new(vec![self.labels.len(), self.n_classes], data).expect("non-empty labeled cloud")
    }
}

/// Row ids that bring a set of `len` points to exactly `count`: every row
/// plus uniform draws with replacement when short, a uniform subset when
/// long. Returns the ids and whether anything changed.
pub fn resample_ids(len: usize, count: usize, rng: &mut impl Rng) -> (Vec<usize>, bool) {
    use std::cmp::Ordering;
    match len.cmp(&count) {
        Ordering::Equal => ((0..len).collect(), false),
        Ordering::Less => {
            let mut ids: Vec<usize> = (0..len).collect();
            ids.extend((len..count).map(|_| rng.random_range(0..len)));
            (ids, true)
        }
        Ordering::Greater => {
            let mut ids = index::sample(rng, len, count).into_vec();
            ids.sort_unstable();
            (ids, true)
        }
    }
}
