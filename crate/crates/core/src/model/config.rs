use std::fmt;

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::operators::{CandidateMode, OperatorConfig};

/// One layer of the direct encoder-decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    FeatureExtraction { s: usize, d_out: usize },
    NeighborPooling { tau: usize },
    MaxPool,
    UpSampling { s: usize, n_up: usize, d_out: usize },
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::FeatureExtraction { s, d_out } => write!(f, "FE({s},{d_out})"),
            LayerSpec::NeighborPooling { tau } => write!(f, "NP({tau})"),
            LayerSpec::MaxPool => write!(f, "MaxPool"),
            LayerSpec::UpSampling { s, n_up, d_out } => write!(f, "Up({s},{n_up},{d_out})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    pub input_points: usize,
    pub output_points: usize,
    pub layers: Vec<LayerSpec>,
    /// Candidate neighborhood size; `None` searches the whole set.
    pub knn_k: Option<usize>,
    pub alpha: f64,
    pub beta: f64,
    /// Class count of the semantic head; the last layer then emits
    /// `3 + n` channels.
    pub semantic_classes: Option<usize>,
}

/// Row count and width of the feature set after each layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapePlan {
    pub shapes: Vec<(usize, usize)>,
    /// Pooling layers whose input count is not a multiple of τ.
    pub floor_warnings: Vec<usize>,
}

impl ArchitectureConfig {
    /// The published direct architecture: 2048 input points, 16384 output.
    pub fn full_scale() -> Self {
        use LayerSpec::*;
        Self {
            input_points: 2048,
            output_points: 16384,
            layers: vec![
                FeatureExtraction { s: 10, d_out: 16 },
                NeighborPooling { tau: 8 },
                FeatureExtraction { s: 10, d_out: 64 },
                NeighborPooling { tau: 4 },
                FeatureExtraction { s: 10, d_out: 64 },
                NeighborPooling { tau: 4 },
                FeatureExtraction { s: 10, d_out: 64 },
                MaxPool,
                UpSampling { s: 5, n_up: 2, d_out: 256 },
                UpSampling { s: 10, n_up: 8, d_out: 64 },
                UpSampling { s: 10, n_up: 4, d_out: 64 },
                UpSampling { s: 10, n_up: 4, d_out: 32 },
                UpSampling { s: 10, n_up: 8, d_out: 3 },
                UpSampling { s: 10, n_up: 1, d_out: 3 },
                UpSampling { s: 10, n_up: 8, d_out: 3 },
            ],
            knn_k: Some(16),
            alpha: 1.0,
            beta: 1e-3,
            semantic_classes: None,
        }
    }

    /// Small preset for single-core experiments: 256 points in, 1024 out.
    pub fn desk() -> Self {
        use LayerSpec::*;
        Self {
            input_points: 256,
            output_points: 1024,
            layers: vec![
                FeatureExtraction { s: 4, d_out: 16 },
                NeighborPooling { tau: 4 },
                FeatureExtraction { s: 4, d_out: 32 },
                NeighborPooling { tau: 4 },
                FeatureExtraction { s: 4, d_out: 32 },
                NeighborPooling { tau: 4 },
                FeatureExtraction { s: 4, d_out: 32 },
                MaxPool,
                UpSampling { s: 4, n_up: 4, d_out: 64 },
                UpSampling { s: 4, n_up: 4, d_out: 64 },
                UpSampling { s: 4, n_up: 4, d_out: 64 },
                UpSampling { s: 4, n_up: 16, d_out: 3 },
            ],
            knn_k: Some(16),
            alpha: 1.0,
            beta: 1e-3,
            semantic_classes: None,
        }
    }

    /// Same layers with the last one widened to carry `n_classes` logits.
    pub fn with_semantic(mut self, n_classes: usize) -> Self {
        let old = self.semantic_classes.unwrap_or(0);
        if let Some(last) = self.layers.last_mut() {
            match last {
                LayerSpec::FeatureExtraction { d_out, .. } | LayerSpec::UpSampling { d_out, .. } => {
                    *d_out = *d_out - old + n_classes;
                }
                _ => {}
            }
        }
        self.semantic_classes = Some(n_classes);
        self
    }

    pub fn operator_config(&self) -> OperatorConfig {
        OperatorConfig {
            alpha: self.alpha,
            beta: self.beta,
            candidates: self.knn_k.map_or(CandidateMode::Exact, CandidateMode::Knn),
        }
    }

    /// Width of the final layer: three coordinates plus any class logits.
    pub fn output_dim(&self) -> usize {
        3 + self.semantic_classes.unwrap_or(0)
    }

    pub fn validate(&self) -> Result<ShapePlan, ModelError> {
        let fail = |layer: Option<usize>, message: String| {
            Err(ModelError::Config {
                layer: layer.map(|i| (i, self.layers[i].to_string())),
                message,
            })
        };
        self.operator_config().validate().map_err(|e| ModelError::Config {
            layer: None,
            message: e.to_string(),
        })?;
        if self.input_points == 0 {
            return fail(None, "input_points must be positive".into());
        }
        if self.layers.is_empty() {
            return fail(None, "no layers".into());
        }
        if self.semantic_classes == Some(0) {
            return fail(None, "semantic head needs at least one class".into());
        }
        let (mut count, mut dim) = (self.input_points, 3);
        let mut has_features = false;
        let mut pooled_to_latent = false;
        let mut plan = ShapePlan {
            shapes: Vec::with_capacity(self.layers.len()),
            floor_warnings: Vec::new(),
        };
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::FeatureExtraction { s, d_out } => {
                    if s == 0 || d_out == 0 {
                        return fail(Some(i), "s and d_out must be positive".into());
                    }
                    dim = d_out;
                    has_features = true;
                }
                LayerSpec::NeighborPooling { tau } => {
                    if !matches!(self.layers.get(i.wrapping_sub(1)), Some(LayerSpec::FeatureExtraction { .. })) {
                        return fail(Some(i), "pooling must directly follow a feature extraction".into());
                    }
                    if tau == 0 || count < tau {
                        return fail(Some(i), format!("cannot pool {count} vectors by tau = {tau}"));
                    }
                    if count % tau != 0 {
                        log::warn!("layer {i} ({layer}): {count} is not a multiple of {tau}, keeping floor");
                        plan.floor_warnings.push(i);
                    }
                    count /= tau;
                }
                LayerSpec::MaxPool => {
                    if !has_features {
                        return fail(Some(i), "pooling before any feature extraction".into());
                    }
                    if pooled_to_latent {
                        return fail(Some(i), "more than one latent max-pool".into());
                    }
                    pooled_to_latent = true;
                    count = 1;
                }
                LayerSpec::UpSampling { s, n_up, d_out } => {
                    if s == 0 || n_up == 0 || d_out == 0 {
                        return fail(Some(i), "s, n_up and d_out must be positive".into());
                    }
                    count *= n_up;
                    dim = d_out;
                    has_features = true;
                }
            }
            plan.shapes.push((count, dim));
        }
        let last = self.layers.len() - 1;
        if !matches!(
            self.layers[last],
            LayerSpec::FeatureExtraction { .. } | LayerSpec::UpSampling { .. }
        ) {
            return fail(Some(last), "the network must end in a feature extraction or up-sampling".into());
        }
        if dim != self.output_dim() {
            return fail(
                Some(last),
                format!("final width {dim} does not match the expected {}", self.output_dim()),
            );
        }
        if count != self.output_points {
            return fail(
                None,
                format!("layers produce {count} points but output_points is {}", self.output_points),
            );
        }
        Ok(plan)
    }

    /// Product of the up-sampling factors after the latent max-pool.
    pub fn decoder_factor(&self) -> usize {
        let start = self
            .layers
            .iter()
            .position(|l| *l == LayerSpec::MaxPool)
            .map_or(0, |p| p + 1);
        self.layers[start..]
            .iter()
            .map(|l| match *l {
                LayerSpec::UpSampling { n_up, .. } => n_up,
                _ => 1,
            })
            .product()
    }
}
