use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Adam, AdamConfig, Model, ModelError};
use crate::autodiff::{Tape, Tensor, Var};
use crate::losses::{
    binary_cross_entropy, completion_loss, gamma, matched_distance_sum, one_hot, order_loss,
    Correspondence, MatchMode,
};

/// Multipliers of the objective terms. A zero weight removes the term from
/// the gradient and from the breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub out_to_gt: f64,
    pub gt_to_out: f64,
    pub order: f64,
    /// Multiplies `γ · BCE`.
    pub semantic: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            out_to_gt: 1.0,
            gt_to_out: 1.0,
            order: 1.0,
            semantic: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub matching: MatchMode,
    pub optimizer: AdamConfig,
}

/// One training pair, already at the model's input and target sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    /// `[input_points, 3]`
    pub partial: Tensor,
    /// `[n, 3]`
    pub complete: Tensor,
    /// Class of each complete point.
    pub labels: Option<Vec<usize>>,
}

/// Unweighted term values averaged over the batch; `None` marks a term
/// excluded from the objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub out_to_gt: Option<f64>,
    pub gt_to_out: Option<f64>,
    pub order: Option<f64>,
    pub semantic_bce: Option<f64>,
    pub gamma: Option<f64>,
    /// Weighted objective, including `γ`.
    pub total: f64,
}

impl LossBreakdown {
    pub fn to_line(&self, step: u64) -> String {
        let f = |v: Option<f64>| v.map_or_else(|| "absent".to_string(), |v| format!("{v:.9e}"));
        format!(
            "step={step} total={:.9e} out_to_gt={} gt_to_out={} order={} semantic_bce={} gamma={}",
            self.total,
            f(self.out_to_gt),
            f(self.gt_to_out),
            f(self.order),
            f(self.semantic_bce),
            f(self.gamma)
        )
    }
}

struct SampleResult {
    out_to_gt: f64,
    gt_to_out: f64,
    order: Option<f64>,
    bce: Option<f64>,
    geometry_grads: Option<Vec<Tensor>>,
    semantic_grads: Option<Vec<Tensor>>,
}

fn finite(term: &str, v: f64) -> Result<f64, ModelError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(ModelError::NonFinite { term: term.into() })
    }
}

fn inverse(corr: &Correspondence, distances: &[f64]) -> Correspondence {
    let mut ids = vec![0; corr.ids.len()];
    let mut dist = vec![0.0; corr.ids.len()];
    for (i, &j) in corr.ids.iter().enumerate() {
        ids[j] = i;
        dist[j] = distances[i];
    }
    Correspondence {
        mode: corr.mode,
        ids,
        distances: dist,
    }
}

fn sample_pass(model: &Model, sample: &TrainSample, cfg: &TrainConfig) -> Result<SampleResult, ModelError> {
    let w = cfg.weights;
    let tape = Tape::new();
    let fwd = model.forward(&tape, &sample.partial)?;
    let gt = tape.constant(sample.complete.clone());
    let (l_og, corr) = completion_loss(fwd.points, gt, cfg.matching)?;
    let l_go = match cfg.matching {
        MatchMode::Assignment => matched_distance_sum(gt, fwd.points, &inverse(&corr, &corr.distances))?,
        MatchMode::Nearest => completion_loss(gt, fwd.points, MatchMode::Nearest)?.0,
    };
    let out_to_gt = finite("out_to_gt", l_og.value().item())?;
    let gt_to_out = finite("gt_to_out", l_go.value().item())?;

    let mut terms: Vec<Var<'_>> = Vec::new();
    if w.out_to_gt != 0.0 {
        terms.push(l_og.scale(w.out_to_gt)?);
    }
    if w.gt_to_out != 0.0 {
        terms.push(l_go.scale(w.gt_to_out)?);
    }
    let mut order = None;
    if w.order != 0.0 {
        let term = order_loss(tape.constant(sample.partial.clone()), fwd.points)?;
        order = Some(finite("order", term.loss.value().item())?);
        terms.push(term.loss.scale(w.order)?);
    }
    let grads_of = |root: Var<'_>| -> Result<Vec<Tensor>, ModelError> {
        let g = tape.backward(root)?;
        let out: Vec<Tensor> = fwd.params.iter().map(|&p| g.get(p)).collect();
        if out.iter().any(|t| !t.is_finite()) {
            return Err(ModelError::NonFinite {
                term: "gradient".into(),
            });
        }
        Ok(out)
    };
    let geometry_grads = if terms.is_empty() {
        None
    } else {
        let mut root = terms[0];
        for t in &terms[1..] {
            root = root.add(*t)?;
        }
        Some(grads_of(root)?)
    };

    let (mut bce, mut semantic_grads) = (None, None);
    if w.semantic != 0.0 {
        if let (Some(probs), Some(labels)) = (fwd.probs, sample.labels.as_ref()) {
            let n_classes = model.config().semantic_classes.unwrap_or(0);
            let point_labels = corr
                .ids
                .iter()
                .map(|&j| labels.get(j).copied())
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| ModelError::Input("fewer labels than complete points".into()))?;
            let loss = binary_cross_entropy(probs, &one_hot(&point_labels, n_classes)?)?;
            bce = Some(finite("semantic", loss.value().item())?);
            semantic_grads = Some(grads_of(loss)?);
        }
    }
    Ok(SampleResult {
        out_to_gt,
        gt_to_out,
        order,
        bce,
        geometry_grads,
        semantic_grads,
    })
}

fn accumulate(acc: &mut Option<Vec<Tensor>>, grads: &[Tensor], factor: f64) {
    match acc {
        None => {
            *acc = Some(
                grads
                    .iter()
                    .map(|g| {
                        let mut t = g.clone();
                        t.data_mut().iter_mut().for_each(|v| *v *= factor);
                        t
                    })
                    .collect(),
            )
        }
        Some(sum) => {
            for (s, g) in sum.iter_mut().zip(grads) {
                s.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += factor * b);
            }
        }
    }
}

/// One optimizer update from a batch. Per-sample passes run in parallel;
/// gradients are summed in batch order. The semantic weight `γ` uses the
/// batch-mean completion loss.
pub fn train_step(
    model: &mut Model,
    optimizer: &mut Adam,
    batch: &[TrainSample],
    cfg: &TrainConfig,
) -> Result<LossBreakdown, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::Input("empty batch".into()));
    }
    let shared: &Model = model;
    let results = batch
        .par_iter()
        .map(|s| sample_pass(shared, s, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    let n = batch.len() as f64;
    let mean = |f: &dyn Fn(&SampleResult) -> f64| results.iter().map(f).sum::<f64>() / n;
    let out_to_gt = mean(&|r| r.out_to_gt);
    let gt_to_out = mean(&|r| r.gt_to_out);
    let order = results[0].order.map(|_| mean(&|r| r.order.unwrap_or(0.0)));
    let bce = results
        .iter()
        .all(|r| r.bce.is_some())
        .then(|| mean(&|r| r.bce.unwrap_or(0.0)));
    let gamma = bce.map(|_| gamma(out_to_gt + gt_to_out));
    if let Some(g) = gamma {
        finite("gamma", g)?;
    }

    let mut grads = None;
    for r in &results {
        if let Some(g) = &r.geometry_grads {
            accumulate(&mut grads, g, 1.0);
        }
        if let (Some(g), Some(gm)) = (&r.semantic_grads, gamma) {
            accumulate(&mut grads, g, cfg.weights.semantic * gm);
        }
    }
    let w = cfg.weights;
    let total = w.out_to_gt * out_to_gt
        + w.gt_to_out * gt_to_out
        + order.map_or(0.0, |o| w.order * o)
        + match (bce, gamma) {
            (Some(b), Some(g)) => w.semantic * g * b,
            _ => 0.0,
        };
    if let Some(grads) = grads {
        optimizer.update(model.parameters_mut(), &grads)?;
    }
    Ok(LossBreakdown {
        out_to_gt: (w.out_to_gt != 0.0).then_some(out_to_gt),
        gt_to_out: (w.gt_to_out != 0.0).then_some(gt_to_out),
        order,
        semantic_bce: bce,
        gamma,
        total,
    })
}

/// Seeded minibatch training over a fixed set of samples; the sample order
/// is reshuffled each epoch. `on_step` sees every breakdown.
pub fn fit(
    model: &mut Model,
    optimizer: &mut Adam,
    samples: &[TrainSample],
    cfg: &TrainConfig,
    steps: u64,
    batch_size: usize,
    seed: u64,
    mut on_step: impl FnMut(u64, &LossBreakdown),
) -> Result<Vec<LossBreakdown>, ModelError> {
    if samples.is_empty() || batch_size == 0 {
        return Err(ModelError::Input("fit needs samples and a positive batch size".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut cursor = order.len();
    let mut trace = Vec::with_capacity(steps as usize);
    for step in 0..steps {
        let mut batch = Vec::with_capacity(batch_size);
        while batch.len() < batch_size.min(samples.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(samples[order[cursor]].clone());
            cursor += 1;
        }
        let b = train_step(model, optimizer, &batch, cfg)?;
        on_step(step, &b);
        trace.push(b);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, ShapeFamily, SyntheticSpec};
    use crate::model::{build_direct, ArchitectureConfig, LayerSpec};

    fn tiny() -> ArchitectureConfig {
        use LayerSpec::*;
        ArchitectureConfig {
            input_points: 16,
            output_points: 32,
            layers: vec![
                FeatureExtraction { s: 2, d_out: 8 },
                NeighborPooling { tau: 4 },
                FeatureExtraction { s: 2, d_out: 8 },
                MaxPool,
                UpSampling { s: 2, n_up: 4, d_out: 8 },
                UpSampling { s: 2, n_up: 8, d_out: 3 },
            ],
            knn_k: Some(4),
            alpha: 1.0,
            beta: 1e-3,
            semantic_classes: None,
        }
    }

    fn pair(labels: bool) -> TrainSample {
        let p = generate_synthetic(&SyntheticSpec {
            family: ShapeFamily::Room,
            complete_count: 32,
            partial_count: 16,
            ..Default::default()
        })
        .unwrap();
        TrainSample {
            partial: p.partial.cloud.to_tensor(),
            complete: p.complete.cloud.to_tensor(),
            labels: labels.then(|| p.complete.labels.clone()),
        }
    }

    #[test]
    fn zero_weights_mark_terms_absent() {
        let mut m = build_direct(tiny(), 1).unwrap();
        let mut opt = Adam::new(AdamConfig::default(), &m.parameters());
        let cfg = TrainConfig {
            weights: LossWeights {
                order: 0.0,
                semantic: 0.0,
                ..Default::default()
            },
            ..Default::default()
        };
        let b = train_step(&mut m, &mut opt, &[pair(true)], &cfg).unwrap();
        assert!(b.order.is_none() && b.semantic_bce.is_none() && b.gamma.is_none());
        assert_eq!(b.total, b.out_to_gt.unwrap() + b.gt_to_out.unwrap());
        assert!(b.to_line(0).contains("order=absent"));
    }

    #[test]
    fn zero_order_weight_matches_plain_gradient() {
        // with order weight 0 the update equals one from a config without it
        let cfg_a = TrainConfig {
            weights: LossWeights {
                order: 0.0,
                ..Default::default()
            },
            ..Default::default()
        };
        let base = build_direct(tiny(), 2).unwrap();
        let (mut a, mut b) = (base.clone(), base.clone());
        let mut oa = Adam::new(AdamConfig::default(), &a.parameters());
        let mut ob = oa.clone();
        train_step(&mut a, &mut oa, &[pair(false)], &cfg_a).unwrap();
        let cfg_b = TrainConfig {
            weights: LossWeights {
                order: 1.0,
                ..Default::default()
            },
            ..Default::default()
        };
        train_step(&mut b, &mut ob, &[pair(false)], &cfg_b).unwrap();
        assert_ne!(a, b);
        let mut c = base.clone();
        let mut oc = Adam::new(AdamConfig::default(), &c.parameters());
        train_step(&mut c, &mut oc, &[pair(false)], &cfg_a).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn semantic_term_reports_gamma() {
        let mut m = build_direct(tiny().with_semantic(3), 3).unwrap();
        let mut opt = Adam::new(AdamConfig::default(), &m.parameters());
        let b = train_step(&mut m, &mut opt, &[pair(true)], &TrainConfig::default()).unwrap();
        let g = b.gamma.unwrap();
        assert_eq!(g, 0.01 / (b.out_to_gt.unwrap() + b.gt_to_out.unwrap()));
        assert!(b.semantic_bce.unwrap() > 0.0);
    }

    #[test]
    fn seeded_runs_identical_and_batching_works() {
        let run = || {
            let mut m = build_direct(tiny(), 4).unwrap();
            let mut opt = Adam::new(
                AdamConfig {
                    lr: 1e-2,
                    ..Default::default()
                },
                &m.parameters(),
            );
            let samples = vec![pair(false), pair(false)];
            fit(&mut m, &mut opt, &samples, &TrainConfig::default(), 5, 2, 7, |_, _| {}).unwrap()
        };
        let a = run();
        assert_eq!(a, run());
        assert_eq!(a.len(), 5);
    }

    #[test]
    fn assignment_mode_is_symmetric() {
        let mut m = build_direct(tiny(), 5).unwrap();
        let mut opt = Adam::new(AdamConfig::default(), &m.parameters());
        let cfg = TrainConfig {
            matching: MatchMode::Assignment,
            ..Default::default()
        };
        let b = train_step(&mut m, &mut opt, &[pair(false)], &cfg).unwrap();
        let (x, y) = (b.out_to_gt.unwrap(), b.gt_to_out.unwrap());
        assert!((x - y).abs() <= 1e-12 * x);
    }
}
