//! Seeded surface samples of simple shapes, with a half-space visibility cut
//! standing in for a single-view scan.

use std::f64::consts::PI;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cloud::resample_ids;
use super::{DataError, LabeledCloud, PointCloud};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Plane,
    Box,
    Cylinder,
    /// Floor, side wall and a box of furniture, one class each.
    Room,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub family: ShapeFamily,
    pub complete_count: usize,
    pub partial_count: usize,
    /// Points with `p · camera_unit >= cut_offset` are visible.
    pub camera: [f64; 3],
    pub cut_offset: f64,
    pub seed: u64,
    /// One class id per primitive; missing entries default to the primitive index.
    pub class_ids: Vec<usize>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            family: ShapeFamily::Box,
            complete_count: 1024,
            partial_count: 256,
            camera: [0.0, 0.0, 1.0],
            cut_offset: 0.0,
            seed: 0,
            class_ids: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPair {
    pub partial: LabeledCloud,
    pub complete: LabeledCloud,
}

#[derive(Debug, Clone, Copy)]
enum Surface {
    /// `origin + a·u + b·v`, `a, b ∈ [0, 1]`.
    Patch { origin: [f64; 3], u: [f64; 3], v: [f64; 3] },
    Cuboid { lo: [f64; 3], hi: [f64; 3] },
    /// Closed cylinder along y.
    Cylinder { radius: f64, half_height: f64 },
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn norm(a: [f64; 3]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

impl Surface {
    fn area(&self) -> f64 {
        match *self {
            Surface::Patch { u, v, .. } => norm(cross(u, v)),
            Surface::Cuboid { lo, hi } => {
                let [x, y, z] = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
                2.0 * (x * y + y * z + z * x)
            }
            Surface::Cylinder { radius, half_height } => {
                4.0 * PI * radius * half_height + 2.0 * PI * radius * radius
            }
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> [f64; 3] {
        match *self {
            Surface::Patch { origin, u, v } => {
                let (a, b): (f64, f64) = (rng.random(), rng.random());
                [0, 1, 2].map(|k| origin[k] + a * u[k] + b * v[k])
            }
            Surface::Cuboid { lo, hi } => {
                let d = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
                // face pairs normal to x, y, z weighted by area
                let areas = [d[1] * d[2], d[0] * d[2], d[0] * d[1]];
                let axis = WeightedIndex::new(areas).expect("positive box faces").sample(rng);
                let mut p = [0, 1, 2].map(|k| lo[k] + rng.random::<f64>() * d[k]);
                p[axis] = if rng.random::<bool>() { hi[axis] } else { lo[axis] };
                p
            }
            Surface::Cylinder { radius, half_height } => {
                let side = 4.0 * PI * radius * half_height;
                let cap = PI * radius * radius;
                let theta = rng.random::<f64>() * 2.0 * PI;
                if rng.random::<f64>() * (side + 2.0 * cap) < side {
                    let y = (2.0 * rng.random::<f64>() - 1.0) * half_height;
                    [radius * theta.cos(), y, radius * theta.sin()]
                } else {
                    let r = radius * rng.random::<f64>().sqrt();
                    let y = if rng.random::<bool>() { half_height } else { -half_height };
                    [r * theta.cos(), y, r * theta.sin()]
                }
            }
        }
    }
}

fn surfaces(family: ShapeFamily) -> Vec<Surface> {
    match family {
        ShapeFamily::Plane => vec![Surface::Patch {
            origin: [-0.8, -0.8, -0.4],
            u: [1.6, 0.0, 0.0],
            v: [0.0, 1.6, 0.8],
        }],
        ShapeFamily::Box => vec![Surface::Cuboid {
            lo: [-0.7, -0.4, -0.5],
            hi: [0.7, 0.4, 0.5],
        }],
        ShapeFamily::Cylinder => vec![Surface::Cylinder {
            radius: 0.5,
            half_height: 0.7,
        }],
        ShapeFamily::Room => vec![
            Surface::Patch {
                origin: [-1.0, -0.6, -1.0],
                u: [2.0, 0.0, 0.0],
                v: [0.0, 0.0, 2.0],
            },
            Surface::Patch {
                origin: [-1.0, -0.6, -1.0],
                u: [0.0, 1.2, 0.0],
                v: [0.0, 0.0, 2.0],
            },
            Surface::Cuboid {
                lo: [0.1, -0.6, -0.4],
                hi: [0.6, -0.1, 0.3],
            },
        ],
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticPair, DataError> {
    if spec.complete_count == 0 || spec.partial_count == 0 {
        return Err(DataError::Generation("sample counts must be at least 1".into()));
    }
    let cam_len = norm(spec.camera);
    if !(cam_len > 0.0 && cam_len.is_finite()) {
        return Err(DataError::Generation("camera direction must be nonzero".into()));
    }
    let cam = spec.camera.map(|c| c / cam_len);
    let surfaces = surfaces(spec.family);
    let class_of = |i: usize| spec.class_ids.get(i).copied().unwrap_or(i);
    let pick = WeightedIndex::new(surfaces.iter().map(Surface::area)).expect("positive areas");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut points = Vec::with_capacity(spec.complete_count);
    let mut labels = Vec::with_capacity(spec.complete_count);
    for _ in 0..spec.complete_count {
        let s = pick.sample(&mut rng);
        points.push(surfaces[s].sample(&mut rng));
        labels.push(class_of(s));
    }
    let complete = LabeledCloud::new(PointCloud::new(points), labels);

    let visible: Vec<usize> = (0..complete.len())
        .filter(|&i| {
            let p = complete.cloud.points[i];
            p[0] * cam[0] + p[1] * cam[1] + p[2] * cam[2] >= spec.cut_offset
        })
        .collect();
    if visible.is_empty() {
        return Err(DataError::Generation(format!(
            "no surface is visible from camera {:?} beyond offset {}",
            spec.camera, spec.cut_offset
        )));
    }
    let (picks, _) = resample_ids(visible.len(), spec.partial_count, &mut rng);
    let ids: Vec<usize> = picks.into_iter().map(|i| visible[i]).collect();
    let mut partial = complete.select(&ids);
    partial.n_classes = complete.n_classes;
    Ok(SyntheticPair { partial, complete })
}
