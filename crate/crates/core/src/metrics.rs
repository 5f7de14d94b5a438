//! Chamfer distance, F-score and voxel IoU.
//!
//! Reported Chamfer values use table scale factors: ×10³ for L1, ×10⁴ for
//! object-level L2 and ×10³ for scene-level L2. Raw values are unscaled.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::PointCloud;
use crate::spatial::NeighborIndex;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("metric contract violation: {0}")]
    Contract(String),
}

fn contract(msg: impl Into<String>) -> MetricError {
    MetricError::Contract(msg.into())
}

/// Indoor scene classes, indexed by class id; empty space is an unoccupied cell.
pub const NYU_CLASSES: [&str; 11] = [
    "ceiling", "floor", "wall", "window", "chair", "bed", "sofa", "table", "tvs", "furniture",
    "objects",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChamferNorm {
    /// Mean Euclidean distance per direction.
    L1,
    /// Mean squared Euclidean distance per direction.
    L2,
}

impl ChamferNorm {
    pub fn report_scale(self, scene: bool) -> f64 {
        match (self, scene) {
            (ChamferNorm::L1, _) => 1e3,
            (ChamferNorm::L2, false) => 1e4,
            (ChamferNorm::L2, true) => 1e3,
        }
    }
}

fn index_of(cloud: &PointCloud, what: &str) -> Result<NeighborIndex, MetricError> {
    if cloud.is_empty() {
        return Err(contract(format!("{what} cloud is empty")));
    }
    NeighborIndex::from_rows(&cloud.points).map_err(|e| contract(e.to_string()))
}

/// Distance from each point of `from` to its nearest point in `to`.
fn nearest_distances(from: &PointCloud, to: &NeighborIndex) -> Vec<f64> {
    from.points
        .par_iter()
        .map(|p| to.nearest(p).expect("index built from a non-empty 3-d cloud").distance)
        .collect()
}

fn both_directions(pred: &PointCloud, gt: &PointCloud) -> Result<(Vec<f64>, Vec<f64>), MetricError> {
    let pred_index = index_of(pred, "predicted")?;
    let gt_index = index_of(gt, "ground-truth")?;
    Ok((nearest_distances(pred, &gt_index), nearest_distances(gt, &pred_index)))
}

fn mean(v: impl Iterator<Item = f64>, n: usize) -> f64 {
    v.sum::<f64>() / n as f64
}

/// Symmetric Chamfer distance: the average of the two directed means.
pub fn chamfer(pred: &PointCloud, gt: &PointCloud, norm: ChamferNorm) -> Result<f64, MetricError> {
    let (forward, backward) = both_directions(pred, gt)?;
    let directed = |d: &[f64]| match norm {
        ChamferNorm::L1 => mean(d.iter().copied(), d.len()),
        ChamferNorm::L2 => mean(d.iter().map(|x| x * x), d.len()),
    };
    Ok(0.5 * (directed(&forward) + directed(&backward)))
}

/// F-score at an inclusive distance threshold.
pub fn fscore(pred: &PointCloud, gt: &PointCloud, threshold: f64) -> Result<f64, MetricError> {
    if !(threshold > 0.0) {
        return Err(contract(format!("fscore threshold must be positive, got {threshold}")));
    }
    let (forward, backward) = both_directions(pred, gt)?;
    let within = |d: &[f64]| d.iter().filter(|&&x| x <= threshold).count() as f64 / d.len() as f64;
    let (precision, recall) = (within(&forward), within(&backward));
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

pub const FSCORE_THRESHOLD: f64 = 0.01;

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Bounds {
    /// The normalized cube `[-1, 1]³`.
    pub const UNIT: Bounds = Bounds {
        min: [-1.0; 3],
        max: [1.0; 3],
    };
}

/// Dense grid of `x × floor(0.6x) × x` cells, each empty or holding a class id.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub resolution: [usize; 3],
    pub origin: [f64; 3],
    pub cell_size: [f64; 3],
    pub cells: Vec<Option<usize>>,
}

impl VoxelGrid {
    pub fn resolution_for(x: usize) -> [usize; 3] {
        [x, (x * 3) / 5, x]
    }

    fn flat(&self, i: [usize; 3]) -> usize {
        (i[0] * self.resolution[1] + i[1]) * self.resolution[2] + i[2]
    }

    pub fn get(&self, i: [usize; 3]) -> Option<usize> {
        self.cells[self.flat(i)]
    }

    pub fn occupied(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }

    /// Centers of occupied cells with their classes.
    pub fn cell_centers(&self) -> (PointCloud, Vec<usize>) {
        let [_, ny, nz] = self.resolution;
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for (flat, cell) in self.cells.iter().enumerate() {
            if let Some(c) = cell {
                let idx = [flat / (ny * nz), (flat / nz) % ny, flat % nz];
                points.push([0, 1, 2].map(|k| self.origin[k] + (idx[k] as f64 + 0.5) * self.cell_size[k]));
                labels.push(*c);
            }
        }
        (PointCloud::new(points), labels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Voxelized {
    pub grid: VoxelGrid,
    /// Points that fell outside the bounds and were ignored.
    pub outside: usize,
}

/// Bins points into the grid; each occupied cell takes the majority label of
/// its points, ties going to the lowest class id. Unlabeled points count as
/// class 0.
pub fn voxelize(
    cloud: &PointCloud,
    labels: Option<&[usize]>,
    x: usize,
    bounds: Bounds,
) -> Result<Voxelized, MetricError> {
    if x == 0 {
        return Err(contract("voxel resolution must be at least 1"));
    }
    let resolution = VoxelGrid::resolution_for(x);
    if resolution[1] == 0 {
        return Err(contract(format!("resolution {x} leaves an empty middle axis")));
    }
    for k in 0..3 {
        if !(bounds.max[k] > bounds.min[k]) || !bounds.min[k].is_finite() || !bounds.max[k].is_finite() {
            return Err(contract(format!("degenerate bounds on axis {k}")));
        }
    }
    if let Some(l) = labels {
        if l.len() != cloud.len() {
            return Err(contract(format!("{} labels for {} points", l.len(), cloud.len())));
        }
    }
    let cell_size = [0, 1, 2].map(|k| (bounds.max[k] - bounds.min[k]) / resolution[k] as f64);
    let mut grid = VoxelGrid {
        resolution,
        origin: bounds.min,
        cell_size,
        cells: vec![None; resolution.iter().product()],
    };
    let mut votes: Vec<Vec<(usize, usize)>> = vec![Vec::new(); grid.cells.len()];
    let mut outside = 0;
    'points: for (i, p) in cloud.points.iter().enumerate() {
        let mut idx = [0; 3];
        for k in 0..3 {
            if !(p[k] >= bounds.min[k] && p[k] <= bounds.max[k]) {
                outside += 1;
                continue 'points;
            }
            idx[k] = (((p[k] - bounds.min[k]) / cell_size[k]).floor() as usize).min(resolution[k] - 1);
        }
        let class = labels.map_or(0, |l| l[i]);
        let cell = &mut votes[grid.flat(idx)];
        match cell.iter_mut().find(|(c, _)| *c == class) {
            Some((_, n)) => *n += 1,
            None => cell.push((class, 1)),
        }
    }
    for (slot, tally) in grid.cells.iter_mut().zip(&votes) {
        *slot = tally
            .iter()
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
            .map(|&(c, _)| c);
    }
    if outside > 0 {
        log::warn!("voxelize: {outside} points outside bounds were ignored");
    }
    Ok(Voxelized { grid, outside })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    /// `None` for classes absent from both grids.
    pub per_class: Vec<Option<f64>>,
    pub mean: Option<f64>,
}

pub fn iou(pred: &VoxelGrid, gt: &VoxelGrid, n_classes: usize) -> Result<IouReport, MetricError> {
    if pred.resolution != gt.resolution {
        return Err(contract(format!(
            "resolution mismatch {:?} vs {:?}",
            pred.resolution, gt.resolution
        )));
    }
    let mut inter = vec![0usize; n_classes];
    let mut union = vec![0usize; n_classes];
    for (&p, &g) in pred.cells.iter().zip(&gt.cells) {
        for c in [p, g].into_iter().flatten() {
            if c >= n_classes {
                return Err(contract(format!("class id {c} out of range for {n_classes} classes")));
            }
        }
        match (p, g) {
            (Some(a), Some(b)) if a == b => {
                inter[a] += 1;
                union[a] += 1;
            }
            _ => {
                for c in [p, g].into_iter().flatten() {
                    union[c] += 1;
                }
            }
        }
    }
    let per_class: Vec<Option<f64>> = inter
        .iter()
        .zip(&union)
        .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    Ok(IouReport { per_class, mean })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub chamfer_l1_raw: f64,
    pub chamfer_l2_raw: f64,
    pub chamfer_l1_scaled: f64,
    pub chamfer_l2_scaled: f64,
    pub fscore_at_1pct: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_class_iou: Option<Vec<Option<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_iou: Option<f64>,
}

impl MetricReport {
    pub fn evaluate(pred: &PointCloud, gt: &PointCloud, scene: bool) -> Result<Self, MetricError> {
        let l1 = chamfer(pred, gt, ChamferNorm::L1)?;
        let l2 = chamfer(pred, gt, ChamferNorm::L2)?;
        Ok(Self {
            chamfer_l1_raw: l1,
            chamfer_l2_raw: l2,
            chamfer_l1_scaled: l1 * ChamferNorm::L1.report_scale(scene),
            chamfer_l2_scaled: l2 * ChamferNorm::L2.report_scale(scene),
            fscore_at_1pct: fscore(pred, gt, FSCORE_THRESHOLD)?,
            per_class_iou: None,
            mean_iou: None,
        })
    }

    pub fn with_iou(mut self, report: IouReport) -> Self {
        self.per_class_iou = Some(report.per_class);
        self.mean_iou = report.mean;
        self
    }

    /// Arithmetic mean of each field; per-class IoU averages over the
    /// reports where the class is present.
    pub fn aggregate(reports: &[MetricReport]) -> Option<MetricReport> {
        let n = reports.len();
        if n == 0 {
            return None;
        }
        let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n as f64;
        let classes = reports.iter().filter_map(|r| r.per_class_iou.as_ref().map(Vec::len)).max();
        let per_class_iou = classes.map(|k| {
            (0..k)
                .map(|c| {
                    let vals: Vec<f64> = reports
                        .iter()
                        .filter_map(|r| r.per_class_iou.as_ref()?.get(c).copied().flatten())
                        .collect();
                    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
                })
                .collect::<Vec<_>>()
        });
        let mean_iou = per_class_iou.as_ref().and_then(|pc| {
            let present: Vec<f64> = pc.iter().flatten().copied().collect();
            (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
        });
        Some(MetricReport {
            chamfer_l1_raw: avg(|r| r.chamfer_l1_raw),
            chamfer_l2_raw: avg(|r| r.chamfer_l2_raw),
            chamfer_l1_scaled: avg(|r| r.chamfer_l1_scaled),
            chamfer_l2_scaled: avg(|r| r.chamfer_l2_scaled),
            fscore_at_1pct: avg(|r| r.fscore_at_1pct),
            per_class_iou,
            mean_iou,
        })
    }

    pub fn to_key_value(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "chamfer_l1_raw={}", self.chamfer_l1_raw);
        let _ = writeln!(out, "chamfer_l2_raw={}", self.chamfer_l2_raw);
        let _ = writeln!(out, "chamfer_l1_scaled={}", self.chamfer_l1_scaled);
        let _ = writeln!(out, "chamfer_l2_scaled={}", self.chamfer_l2_scaled);
        let _ = writeln!(out, "fscore_at_1pct={}", self.fscore_at_1pct);
        if let Some(pc) = &self.per_class_iou {
            for (c, v) in pc.iter().enumerate() {
                let name = NYU_CLASSES.get(c).map_or_else(|| format!("class{c}"), |s| s.to_string());
                match v {
                    Some(v) => {
                        let _ = writeln!(out, "iou.{name}={v}");
                    }
                    None => {
                        let _ = writeln!(out, "iou.{name}=absent");
                    }
                }
            }
        }
        if let Some(m) = self.mean_iou {
            let _ = writeln!(out, "mean_iou={m}");
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metric report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pc(points: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(points.to_vec())
    }

    #[test]
    fn chamfer_single_pair() {
        let a = pc(&[[0.0, 0.0, 0.0]]);
        let b = pc(&[[1.0, 0.0, 0.0]]);
        let l2 = chamfer(&a, &b, ChamferNorm::L2).unwrap();
        assert_eq!(l2, 1.0);
        assert_eq!(l2 * ChamferNorm::L2.report_scale(false), 10000.0);
        assert_eq!(chamfer(&a, &a, ChamferNorm::L1).unwrap(), 0.0);
    }

    #[test]
    fn chamfer_means_each_direction() {
        // pred→gt: 0 and 2 (mean 1); gt→pred: 0 (mean 0)
        let pred = pc(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        let gt = pc(&[[0.0, 0.0, 0.0]]);
        assert_eq!(chamfer(&pred, &gt, ChamferNorm::L1).unwrap(), 0.5);
        assert_eq!(chamfer(&pred, &gt, ChamferNorm::L2).unwrap(), 1.0);
    }

    #[test]
    fn empty_cloud_rejected() {
        let a = pc(&[[0.0; 3]]);
        assert!(chamfer(&a, &PointCloud::default(), ChamferNorm::L1).is_err());
        assert!(fscore(&PointCloud::default(), &a, 0.01).is_err());
    }

    #[test]
    fn fscore_examples() {
        let gt = pc(&[[0.0, 0.0, 0.0]]);
        let pred = pc(&[[0.005, 0.0, 0.0], [0.5, 0.0, 0.0]]);
        let f = fscore(&pred, &gt, 0.01).unwrap();
        assert!((f - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(fscore(&gt, &gt, 0.01).unwrap(), 1.0);
        assert!(fscore(&gt, &gt, 0.0).is_err());
        let far = pc(&[[1.0, 0.0, 0.0]]);
        assert_eq!(fscore(&far, &gt, 0.01).unwrap(), 0.0);
    }

    #[test]
    fn fscore_boundary_inclusive() {
        let gt = pc(&[[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]);
        let shifted = pc(&[[0.5, 0.0, 0.0], [1.5, 1.0, 1.0]]);
        assert_eq!(fscore(&shifted, &gt, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn single_point_one_cell() {
        let v = voxelize(&pc(&[[0.0, 0.0, 0.0]]), None, 60, Bounds::UNIT).unwrap();
        assert_eq!(v.grid.resolution, [60, 36, 60]);
        assert_eq!(v.grid.occupied(), 1);
        assert_eq!(v.outside, 0);
    }

    #[test]
    fn majority_class_with_ties_low() {
        let cloud = pc(&[[0.1, 0.1, 0.1], [0.11, 0.1, 0.1], [0.12, 0.1, 0.1]]);
        let v = voxelize(&cloud, Some(&[2, 2, 5]), 10, Bounds::UNIT).unwrap();
        assert_eq!(v.grid.cells.iter().flatten().copied().collect::<Vec<_>>(), vec![2]);
        let v = voxelize(&cloud, Some(&[5, 3, 5]), 10, Bounds::UNIT).unwrap();
        assert_eq!(v.grid.cells.iter().flatten().copied().collect::<Vec<_>>(), vec![5]);
        let v = voxelize(&pc(&cloud.points[..2]), Some(&[7, 4]), 10, Bounds::UNIT).unwrap();
        assert_eq!(v.grid.cells.iter().flatten().copied().collect::<Vec<_>>(), vec![4]);
    }

    #[test]
    fn empty_cloud_empty_grid_and_outside_counted() {
        let v = voxelize(&PointCloud::default(), None, 5, Bounds::UNIT).unwrap();
        assert_eq!(v.grid.occupied(), 0);
        let v = voxelize(&pc(&[[2.0, 0.0, 0.0], [1.0, 1.0, 1.0]]), None, 5, Bounds::UNIT).unwrap();
        assert_eq!(v.outside, 1);
        assert_eq!(v.grid.get([4, 2, 4]), Some(0));
        let bad = Bounds {
            min: [0.0; 3],
            max: [1.0, 0.0, 1.0],
        };
        assert!(voxelize(&PointCloud::default(), None, 5, bad).is_err());
    }

    fn toy(cells: &[Option<usize>]) -> VoxelGrid {
        VoxelGrid {
            resolution: [2, 2, 2],
            origin: [0.0; 3],
            cell_size: [1.0; 3],
            cells: cells.to_vec(),
        }
    }

    #[test]
    fn toy_iou_one_third() {
        let s = Some(0);
        let pred = toy(&[s, s, None, None, None, None, None, None]);
        let gt = toy(&[None, s, s, None, None, None, None, None]);
        let r = iou(&pred, &gt, 1).unwrap();
        assert!((r.per_class[0].unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn iou_excludes_absent_and_checks_resolution() {
        let pred = toy(&[Some(0), Some(2), None, None, None, None, None, None]);
        let r = iou(&pred, &pred, 4).unwrap();
        assert_eq!(r.per_class, vec![Some(1.0), None, Some(1.0), None]);
        assert_eq!(r.mean, Some(1.0));
        let disjoint = toy(&[Some(2), Some(0), None, None, None, None, None, None]);
        assert_eq!(iou(&pred, &disjoint, 4).unwrap().mean, Some(0.0));
        let mut other = toy(&[None; 8]);
        other.resolution = [1, 2, 4];
        assert!(iou(&pred, &other, 4).is_err());
    }

    #[test]
    fn report_formats() {
        let a = pc(&[[0.0, 0.0, 0.0], [0.5, 0.5, 0.5]]);
        let r = MetricReport::evaluate(&a, &a, false).unwrap();
        assert_eq!(r.chamfer_l2_raw, 0.0);
        assert_eq!(r.fscore_at_1pct, 1.0);
        let r = r.with_iou(IouReport {
            per_class: vec![Some(1.0), None],
            mean: Some(1.0),
        });
        let kv = r.to_key_value();
        assert!(kv.contains("fscore_at_1pct=1\n"));
        assert!(kv.contains("iou.floor=absent\n"));
        let back: MetricReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
        let agg = MetricReport::aggregate(&[r.clone(), r.clone()]).unwrap();
        assert_eq!(agg, r);
    }

    fn cloud_strategy() -> impl Strategy<Value = PointCloud> {
        prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 1..40).prop_map(PointCloud::new)
    }

    proptest! {
        #[test]
        fn chamfer_symmetric_fscore_bounded(a in cloud_strategy(), b in cloud_strategy()) {
            for norm in [ChamferNorm::L1, ChamferNorm::L2] {
                prop_assert_eq!(chamfer(&a, &b, norm).unwrap(), chamfer(&b, &a, norm).unwrap());
            }
            let f = fscore(&a, &b, 0.2).unwrap();
            prop_assert!((0.0..=1.0).contains(&f));
        }

        #[test]
        fn voxelize_idempotent_on_centers(
            a in cloud_strategy(),
            labels in prop::collection::vec(0usize..4, 40),
            x in 2usize..12,
        ) {
            let v = voxelize(&a, Some(&labels[..a.len()]), x, Bounds::UNIT).unwrap().grid;
            let (centers, classes) = v.cell_centers();
            let again = voxelize(&centers, Some(&classes), x, Bounds::UNIT).unwrap().grid;
            prop_assert_eq!(again, v);
        }

        #[test]
        fn iou_order_invariant(
            cells in prop::collection::vec(prop::option::of(0usize..3), 8),
            other in prop::collection::vec(prop::option::of(0usize..3), 8),
            perm in Just((0..8).collect::<Vec<usize>>()).prop_shuffle(),
        ) {
            let r = iou(&toy(&cells), &toy(&other), 3).unwrap();
            let pc: Vec<_> = perm.iter().map(|&i| cells[i]).collect();
            let po: Vec<_> = perm.iter().map(|&i| other[i]).collect();
            prop_assert_eq!(iou(&toy(&pc), &toy(&po), 3).unwrap(), r.clone());
            for v in r.per_class.iter().flatten() {
                prop_assert!((0.0..=1.0).contains(v));
            }
        }
    }
}
