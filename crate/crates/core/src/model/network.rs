use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ArchitectureConfig, LayerSpec, ModelError};
use crate::autodiff::{Tape, Tensor, Var};
use crate::operators::{
    activations, feature_extraction, latent_max_pool, neighbor_pooling, upsampling, BankVars,
    DisplacementBank, Neighborhoods, OperatorConfig, UpBank,
};

#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    Extract(DisplacementBank),
    Pool(usize),
    MaxPool,
    Up(UpBank),
}

/// Parameters of a direct encoder-decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ArchitectureConfig,
    layers: Vec<LayerParams>,
}

/// A forward pass recorded on a tape.
#[derive(Debug)]
pub struct ForwardPass<'t> {
    /// `[output_points, 3]`
    pub points: Var<'t>,
    /// `[output_points, n_classes]` sigmoid probabilities.
    pub probs: Option<Var<'t>>,
    /// Parameter leaves, in [`Model::parameters`] order.
    pub params: Vec<Var<'t>>,
}

/// Values of a forward pass without gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub points: Tensor,
    pub probs: Option<Tensor>,
}

impl Prediction {
    /// Most probable class per point, ties to the lower id.
    pub fn labels(&self) -> Option<Vec<usize>> {
        self.probs.as_ref().map(|p| {
            p.iter_rows()
                .map(|row| {
                    row.iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |best, (c, &v)| if v > best.1 { (c, v) } else { best })
                        .0
                })
                .collect()
        })
    }
}

/// Builds a model with seeded random parameters.
pub fn build_direct(config: ArchitectureConfig, seed: u64) -> Result<Model, ModelError> {
    Model::random(config, &mut ChaCha8Rng::seed_from_u64(seed))
}

impl Model {
    pub fn random(config: ArchitectureConfig, rng: &mut ChaCha8Rng) -> Result<Self, ModelError> {
        Self::assemble(config, |s, d_in, d_out| DisplacementBank::random(s, d_in, d_out, rng))
    }

    /// Every δ, σ and ρ zero.
    pub fn zeros(config: ArchitectureConfig) -> Result<Self, ModelError> {
        Self::assemble(config, DisplacementBank::zeros)
    }

    fn assemble(
        config: ArchitectureConfig,
        mut bank: impl FnMut(usize, usize, usize) -> DisplacementBank,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let mut dim = 3;
        let mut layers = Vec::with_capacity(config.layers.len());
        for layer in &config.layers {
            layers.push(match *layer {
                LayerSpec::FeatureExtraction { s, d_out } => {
                    let b = bank(s, dim, d_out);
                    dim = d_out;
                    LayerParams::Extract(b)
                }
                LayerSpec::NeighborPooling { tau } => LayerParams::Pool(tau),
                LayerSpec::MaxPool => LayerParams::MaxPool,
                LayerSpec::UpSampling { s, n_up, d_out } => {
                    let banks = (0..n_up).map(|_| bank(s, dim, d_out)).collect();
                    dim = d_out;
                    LayerParams::Up(UpBank::new(banks)?)
                }
            });
        }
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &ArchitectureConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    fn banks(&self) -> impl Iterator<Item = &DisplacementBank> {
        self.layers.iter().flat_map(|l| match l {
            LayerParams::Extract(b) => std::slice::from_ref(b),
            LayerParams::Up(u) => &u.banks[..],
            _ => &[],
        })
    }

    /// Every parameter tensor: per bank, in layer order, `deltas`, `sigmas`, `rhos`.
    pub fn parameters(&self) -> Vec<&Tensor> {
        self.banks().flat_map(|b| [&b.deltas, &b.sigmas, &b.rhos]).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            let banks = match layer {
                LayerParams::Extract(b) => std::slice::from_mut(b),
                LayerParams::Up(u) => &mut u.banks[..],
                _ => &mut [],
            };
            for b in banks {
                out.extend([&mut b.deltas, &mut b.sigmas, &mut b.rhos]);
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.banks().map(DisplacementBank::parameter_count).sum()
    }

    fn check_input(&self, input: &Tensor) -> Result<(), ModelError> {
        if input.shape() != [self.config.input_points, 3] {
            return Err(ModelError::Input(format!(
                "expected a [{}, 3] input cloud, got {:?}",
                self.config.input_points,
                input.shape()
            )));
        }
        Ok(())
    }

    /// Records the full forward pass with every parameter as a leaf.
    pub fn forward<'t>(&self, tape: &'t Tape, input: &Tensor) -> Result<ForwardPass<'t>, ModelError> {
        let params: Vec<Var<'t>> = self.parameters().into_iter().map(|t| tape.leaf(t.clone())).collect();
        self.forward_with_params(tape, input, params)
    }

    /// Forward pass reading parameters from `params` (in
    /// [`Model::parameters`] order) instead of the stored tensors.
    pub fn forward_with_params<'t>(
        &self,
        tape: &'t Tape,
        input: &Tensor,
        params: Vec<Var<'t>>,
    ) -> Result<ForwardPass<'t>, ModelError> {
        self.check_input(input)?;
        let expected = self.parameters();
        if params.len() != expected.len()
            || params.iter().zip(&expected).any(|(v, t)| v.shape() != t.shape())
        {
            return Err(ModelError::Input("parameter list does not match the model".into()));
        }
        let cfg = self.config.operator_config();
        let mut next = params.chunks_exact(3);
        let mut current = tape.constant(input.clone());
        let mut last_g = None;
        for layer in &self.layers {
            let shapes: Vec<&DisplacementBank> = match layer {
                LayerParams::Extract(b) => vec![b],
                LayerParams::Up(u) => u.banks.iter().collect(),
                _ => Vec::new(),
            };
            let banks: Vec<BankVars<'t>> = shapes
                .into_iter()
                .map(|b| {
                    let p = next.next().expect("parameter count checked");
                    BankVars {
                        s: b.s,
                        d_in: b.d_in,
                        d_out: b.d_out,
                        deltas: p[0],
                        sigmas: p[1],
                        rhos: p[2],
                    }
                })
                .collect();
            (current, last_g) = apply_layer(layer, &banks, current, last_g.as_ref(), &cfg)?;
        }
        let (points, probs) = self.split_head(tape, current)?;
        Ok(ForwardPass {
            points,
            probs,
            params,
        })
    }

    /// Forward values only. Each layer (each up-sampling block) runs on its
    /// own short-lived tape, so peak memory is one layer's worth.
    pub fn infer(&self, input: &Tensor) -> Result<Prediction, ModelError> {
        self.check_input(input)?;
        let cfg = self.config.operator_config();
        let mut current = input.clone();
        let mut last_g: Option<Tensor> = None;
        for layer in &self.layers {
            match layer {
                LayerParams::Up(u) => {
                    let hoods = Neighborhoods::build(&current, cfg.candidates)?;
                    let mut blocks = Vec::with_capacity(u.n_up() * current.rows() * u.d_out());
                    for bank in &u.banks {
                        let tape = Tape::new();
                        let fin = tape.constant(current.clone());
                        let out = feature_extraction(fin, &bank.bind(&tape), &hoods, &cfg)?;
                        blocks.extend_from_slice(out.features.value().data());
                    }
                    current = Tensor::new(vec![u.n_up() * current.rows(), u.d_out()], blocks)?;
                    last_g = None;
                }
                _ => {
                    let tape = Tape::new();
                    let banks: Vec<BankVars<'_>> = match layer {
                        LayerParams::Extract(b) => vec![b.bind(&tape)],
                        _ => Vec::new(),
                    };
                    let (out, g) =
                        apply_layer(layer, &banks, tape.constant(current), last_g.as_ref(), &cfg)?;
                    current = (*out.value()).clone();
                    last_g = g;
                }
            }
        }
        let tape = Tape::new();
        let (points, probs) = self.split_head(&tape, tape.constant(current))?;
        Ok(Prediction {
            points: (*points.value()).clone(),
            probs: probs.map(|p| (*p.value()).clone()),
        })
    }

    /// Splits `[n, 3 + C]` into coordinates and sigmoid class probabilities.
    fn split_head<'t>(&self, tape: &'t Tape, out: Var<'t>) -> Result<(Var<'t>, Option<Var<'t>>), ModelError> {
        let Some(classes) = self.config.semantic_classes else {
            return Ok((out, None));
        };
        let n = out.value().rows();
        let width = 3 + classes;
        let flat = tape.reshape(out, &[n * width])?;
        let pick = |range: std::ops::Range<usize>| -> Vec<usize> {
            (0..n).flat_map(|r| range.clone().map(move |c| r * width + c)).collect()
        };
        let coords = tape.reshape(tape.gather(flat, &pick(0..3))?, &[n, 3])?;
        let logits = tape.reshape(tape.gather(flat, &pick(3..width))?, &[n, classes])?;
        Ok((coords, Some(tape.sigmoid(logits)?)))
    }
}

fn apply_layer<'t>(
    layer: &LayerParams,
    banks: &[BankVars<'t>],
    fin: Var<'t>,
    last_g: Option<&Tensor>,
    cfg: &OperatorConfig,
) -> Result<(Var<'t>, Option<Tensor>), ModelError> {
    Ok(match layer {
        LayerParams::Extract(_) => {
            let hoods = Neighborhoods::build(&fin.value(), cfg.candidates)?;
            let out = feature_extraction(fin, &banks[0], &hoods, cfg)?;
            (out.features, Some(out.g))
        }
        LayerParams::Pool(tau) => {
            let g = last_g.ok_or_else(|| ModelError::Input("pooling without activations".into()))?;
            (neighbor_pooling(fin, &activations(g), *tau)?.0, None)
        }
        LayerParams::MaxPool => (latent_max_pool(fin)?, None),
        LayerParams::Up(_) => {
            let hoods = Neighborhoods::build(&fin.value(), cfg.candidates)?;
            (upsampling(fin, banks, &hoods, cfg)?, None)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn cloud(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![n, 3], (0..3 * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_model_outputs_zero() {
        let m = Model::zeros(ArchitectureConfig::desk()).unwrap();
        let out = m.infer(&cloud(256, 1)).unwrap();
        assert_eq!(out.points.shape(), &[1024, 3]);
        assert!(out.points.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn desk_forward_matches_infer_and_is_deterministic() {
        let m = build_direct(ArchitectureConfig::desk(), 3).unwrap();
        let x = cloud(256, 2);
        let tape = Tape::new();
        let fwd = m.forward(&tape, &x).unwrap();
        let a = m.infer(&x).unwrap();
        assert_eq!(*fwd.points.value(), a.points);
        assert_eq!(m.infer(&x).unwrap(), a);
        assert_eq!(fwd.params.len(), m.parameters().len());
        assert!(a.points.is_finite());
    }

    #[test]
    fn semantic_head_splits_channels() {
        let m = build_direct(ArchitectureConfig::desk().with_semantic(3), 4).unwrap();
        let out = m.infer(&cloud(256, 5)).unwrap();
        let probs = out.probs.as_ref().unwrap();
        assert_eq!(out.points.shape(), &[1024, 3]);
        assert_eq!(probs.shape(), &[1024, 3]);
        assert!(probs.data().iter().all(|&p| p > 0.0 && p < 1.0));
        assert_eq!(out.labels().unwrap().len(), 1024);
    }

    #[test]
    fn wrong_input_count_rejected() {
        let m = Model::zeros(ArchitectureConfig::desk()).unwrap();
        assert!(matches!(m.infer(&cloud(255, 0)), Err(ModelError::Input(_))));
    }

    #[test]
    fn parameter_order_is_stable() {
        let mut m = build_direct(ArchitectureConfig::desk(), 9).unwrap();
        let counts: Vec<usize> = m.parameters().iter().map(|t| t.len()).collect();
        let mut_counts: Vec<usize> = m.parameters_mut().iter().map(|t| t.len()).collect();
        assert_eq!(counts, mut_counts);
        assert_eq!(counts.iter().sum::<usize>(), m.parameter_count());
    }
}
