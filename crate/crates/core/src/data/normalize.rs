use serde::{Deserialize, Serialize};

use super::{DataError, PointCloud};

/// Affine map `p' = (p - center) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    pub center: [f64; 3],
    pub scale: f64,
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        center: [0.0; 3],
        scale: 1.0,
    };

    /// Centers on the bounding box and scales the longest axis to `[-1, 1]`.
    pub fn fit(cloud: &PointCloud) -> Result<Self, DataError> {
        let (lo, hi) = cloud.bounds().ok_or(DataError::Contract("normalize: empty cloud".into()))?;
        let extent = (0..3).map(|k| hi[k] - lo[k]).fold(0.0, f64::max);
        if !(extent > 0.0 && extent.is_finite()) {
            return Err(DataError::Contract(format!(
                "normalize: degenerate extent {extent}"
            )));
        }
        Ok(Self {
            center: [0, 1, 2].map(|k| 0.5 * (lo[k] + hi[k])),
            scale: 0.5 * extent,
        })
    }

    pub fn apply(&self, cloud: &PointCloud) -> PointCloud {
        PointCloud::new(
            cloud
                .points
                .iter()
                .map(|p| [0, 1, 2].map(|k| (p[k] - self.center[k]) / self.scale))
                .collect(),
        )
    }

    pub fn invert(&self, cloud: &PointCloud) -> PointCloud {
        PointCloud::new(
            cloud
                .points
                .iter()
                .map(|p| [0, 1, 2].map(|k| p[k] * self.scale + self.center[k]))
                .collect(),
        )
    }
}

pub fn normalize(cloud: &PointCloud) -> Result<(PointCloud, Transform), DataError> {
    let t = Transform::fit(cloud)?;
    Ok((t.apply(cloud), t))
}

pub fn denormalize(cloud: &PointCloud, transform: &Transform) -> PointCloud {
    transform.invert(cloud)
}
