//! Training objectives on the tape.
//!
//! * directed closest-point loss `Σ_{p∈S} ‖p − φ_T(p)‖` (nearest target),
//! * assignment loss, the same sum under a near-optimal bijection,
//! * order loss, which only counts input points whose closest output point
//!   sits inside the first `|input|` output slots,
//! * semantic binary cross-entropy weighted by `γ = 0.01 / (L_out→gt + L_gt→out)`.
//!
//! Correspondences, the order step and `γ` are constants for differentiation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assignment::{auction_assign, CostMatrix};
use crate::autodiff::{AutodiffError, Tensor, Var};
use crate::spatial::{NeighborIndex, SpatialError};

/// Probability clamping window for the cross-entropy.
pub const PROB_EPS: f64 = 1e-7;
/// Relative optimality gap accepted from the assignment solver.
pub const ASSIGNMENT_GAP: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Spatial(#[from] SpatialError),
    #[error("{0} cloud is empty")]
    Empty(&'static str),
    #[error("{op}: size mismatch ({left} vs {right})")]
    Size {
        op: &'static str,
        left: usize,
        right: usize,
    },
    #[error("{0}")]
    Contract(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    /// Each source point takes its closest target point.
    #[default]
    Nearest,
    /// Near-optimal one-to-one matching.
    Assignment,
}

/// Target id and distance for every source point of a directed matching.
#[derive(Debug, Clone, PartialEq)]
pub struct Correspondence {
    pub mode: MatchMode,
    pub ids: Vec<usize>,
    pub distances: Vec<f64>,
}

fn cloud_rows(name: &'static str, cloud: &Tensor) -> Result<usize, LossError> {
    match cloud.shape() {
        [n, _] => Ok(*n),
        other => Err(LossError::Contract(format!(
            "{name} cloud must be [count, dim], got {other:?}"
        ))),
    }
}

/// Closest target point for every source point, ties to the lower id.
pub fn nearest_correspondence(source: &Tensor, target: &Tensor) -> Result<Correspondence, LossError> {
    cloud_rows("source", source)?;
    cloud_rows("target", target)?;
    if source.row_len() != target.row_len() {
        return Err(LossError::Size {
            op: "nearest_correspondence",
            left: source.row_len(),
            right: target.row_len(),
        });
    }
    let index = NeighborIndex::build(target.data(), target.row_len())?;
    let (ids, distances) = source
        .iter_rows()
        .map(|p| index.nearest(p).map(|n| (n.id, n.distance)))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .unzip();
    Ok(Correspondence {
        mode: MatchMode::Nearest,
        ids,
        distances,
    })
}

/// Near-optimal bijection between equally sized clouds.
pub fn assignment_correspondence(
    source: &Tensor,
    target: &Tensor,
) -> Result<Correspondence, LossError> {
    let (n, m) = (cloud_rows("source", source)?, cloud_rows("target", target)?);
    if n != m || source.row_len() != target.row_len() {
        return Err(LossError::Size {
            op: "assignment_loss",
            left: n,
            right: m,
        });
    }
    let costs = CostMatrix::euclidean(source.data(), target.data(), source.row_len());
    let ids = auction_assign(&costs, ASSIGNMENT_GAP);
    let distances = ids.iter().enumerate().map(|(i, &j)| costs.get(i, j)).collect();
    Ok(Correspondence {
        mode: MatchMode::Assignment,
        ids,
        distances,
    })
}

/// `Σ ‖source_i − target[corr_i]‖` on the tape.
pub fn matched_distance_sum<'t>(
    source: Var<'t>,
    target: Var<'t>,
    corr: &Correspondence,
) -> Result<Var<'t>, LossError> {
    let tape = source.tape();
    let diff = source.sub(tape.gather(target, &corr.ids)?)?;
    Ok(tape.euclidean_norm(diff)?.sum()?)
}

/// Directed closest-point loss from `source` to `target`.
pub fn directed_closest_loss<'t>(
    source: Var<'t>,
    target: Var<'t>,
) -> Result<(Var<'t>, Correspondence), LossError> {
    let corr = nearest_correspondence(&source.value(), &target.value())?;
    Ok((matched_distance_sum(source, target, &corr)?, corr))
}

/// Directed loss in the requested matching mode.
pub fn completion_loss<'t>(
    source: Var<'t>,
    target: Var<'t>,
    mode: MatchMode,
) -> Result<(Var<'t>, Correspondence), LossError> {
    match mode {
        MatchMode::Nearest => directed_closest_loss(source, target),
        MatchMode::Assignment => assignment_loss(source, target),
    }
}

/// Matching cost under a near-optimal bijection (within 1%).
pub fn assignment_loss<'t>(
    source: Var<'t>,
    target: Var<'t>,
) -> Result<(Var<'t>, Correspondence), LossError> {
    let corr = assignment_correspondence(&source.value(), &target.value())?;
    Ok((matched_distance_sum(source, target, &corr)?, corr))
}

/// Order loss and the output index closest to every input point.
#[derive(Debug)]
pub struct OrderTerm<'t> {
    pub loss: Var<'t>,
    /// 0-based output index closest to each input point.
    pub theta: Vec<usize>,
}

/// `Σ_{p∈input} S(θ(p)) · ‖p − φ_out(p)‖` with `S(θ) = 1` iff the closest
/// output point is among the first `|input|` outputs.
pub fn order_loss<'t>(input: Var<'t>, output: Var<'t>) -> Result<OrderTerm<'t>, LossError> {
    let tape = input.tape();
    let (iv, ov) = (input.value(), output.value());
    let n_in = cloud_rows("input", &iv)?;
    let n_out = cloud_rows("output", &ov)?;
    if n_out < n_in {
        return Err(LossError::Size {
            op: "order_loss",
            left: n_in,
            right: n_out,
        });
    }
    let corr = nearest_correspondence(&iv, &ov)?;
    let (active, targets): (Vec<usize>, Vec<usize>) = corr
        .ids
        .iter()
        .enumerate()
        .filter(|&(_, &theta)| theta < n_in)
        .map(|(i, &theta)| (i, theta))
        .unzip();
    let loss = if active.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let diff = tape.gather(input, &active)?.sub(tape.gather(output, &targets)?)?;
        tape.euclidean_norm(diff)?.sum()?
    };
    Ok(OrderTerm {
        loss,
        theta: corr.ids,
    })
}

/// Adaptive semantic weight `0.01 / (L_out→gt + L_gt→out)`.
pub fn gamma(completion_sum: f64) -> f64 {
    0.01 / completion_sum
}

/// One-hot rows for `labels` over `n_classes`.
pub fn one_hot(labels: &[usize], n_classes: usize) -> Result<Tensor, LossError> {
    let mut data = vec![0.0; labels.len() * n_classes];
    for (row, &l) in labels.iter().enumerate() {
        if l >= n_classes {
            return Err(LossError::Contract(format!(
                "label {l} out of range for {n_classes} classes"
            )));
        }
        data[row * n_classes + l] = 1.0;
    }
    Ok(Tensor::new(vec![labels.len(), n_classes], data)
        .map_err(LossError::Autodiff)?)
}

/// Mean over points of `−(1/N_c) Σ_c [t log p + (1 − t) log(1 − p)]`, with
/// probabilities clamped into `[1e-7, 1 − 1e-7]`.
pub fn binary_cross_entropy<'t>(probs: Var<'t>, targets: &Tensor) -> Result<Var<'t>, LossError> {
    let tape = probs.tape();
    let pv = probs.value();
    if pv.shape() != targets.shape() || pv.shape().len() != 2 {
        return Err(LossError::Contract(format!(
            "probabilities {:?} do not match targets {:?}",
            pv.shape(),
            targets.shape()
        )));
    }
    let (n, c) = (pv.shape()[0], pv.shape()[1]);
    let p = tape.clamp(probs, PROB_EPS, 1.0 - PROB_EPS)?;
    let q = p.scale(-1.0)?.offset(1.0)?;
    let t = tape.constant(targets.clone());
    let not_t = tape.constant(
        Tensor::new(
            targets.shape().to_vec(),
            targets.data().iter().map(|v| 1.0 - v).collect(),
        )
        .map_err(LossError::Autodiff)?,
    );
    let ll = t.mul(tape.log(p)?)?.add(not_t.mul(tape.log(q)?)?)?;
    Ok(ll.sum()?.scale(-1.0 / (n * c) as f64)?)
}

/// Weighted semantic loss together with its parts.
#[derive(Debug)]
pub struct SemanticTerm<'t> {
    /// `γ · bce`
    pub loss: Var<'t>,
    /// Unweighted mean cross-entropy.
    pub bce: Var<'t>,
    pub gamma: f64,
}

/// Semantic loss of predicted class probabilities against the labels of the
/// ground-truth points each prediction corresponds to.
pub fn semantic_loss<'t>(
    probs: Var<'t>,
    gt_labels: &[usize],
    n_classes: usize,
    corr: &Correspondence,
    completion: (f64, f64),
) -> Result<SemanticTerm<'t>, LossError> {
    let rows = probs.value().rows();
    if corr.ids.len() != rows {
        return Err(LossError::Size {
            op: "semantic_loss",
            left: rows,
            right: corr.ids.len(),
        });
    }
    let labels = corr
        .ids
        .iter()
        .map(|&j| {
            gt_labels.get(j).copied().ok_or_else(|| {
                LossError::Contract(format!("correspondence id {j} has no ground-truth label"))
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let bce = binary_cross_entropy(probs, &one_hot(&labels, n_classes)?)?;
    let gamma = gamma(completion.0 + completion.1);
    if !gamma.is_finite() {
        return Err(LossError::Autodiff(AutodiffError::NumericFault {
            primitive: crate::autodiff::Primitive::Scale,
        }));
    }
    Ok(SemanticTerm {
        loss: bce.scale(gamma)?,
        bce,
        gamma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn cloud(rows: &[[f64; 3]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn identical_clouds_have_zero_loss() {
        let tape = Tape::new();
        let c = cloud(&[[0.0, 1.0, 2.0], [3.0, 4.0, 5.0], [-1.0, 0.5, 0.0]]);
        let a = tape.leaf(c.clone());
        let b = tape.leaf(c);
        let (l, corr) = directed_closest_loss(a, b).unwrap();
        assert_eq!(l.value().item(), 0.0);
        assert_eq!(corr.ids, vec![0, 1, 2]);
        let (l, _) = assignment_loss(a, b).unwrap();
        assert_eq!(l.value().item(), 0.0);
        let g = tape.backward(l).unwrap();
        assert!(g.get(a).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_point_to_nearest_target() {
        let tape = Tape::new();
        let s = tape.leaf(cloud(&[[0.0, 0.0, 0.0]]));
        let t = tape.leaf(cloud(&[[1.0, 0.0, 0.0], [3.0, 0.0, 0.0]]));
        let (l, corr) = directed_closest_loss(s, t).unwrap();
        assert_eq!(l.value().item(), 1.0);
        assert_eq!(corr.ids, vec![0]);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(s).data(), &[-1.0, 0.0, 0.0]);
        assert_eq!(g.get(t).data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn bidirectional_sum_is_symmetric() {
        let tape = Tape::new();
        let a = tape.leaf(cloud(&[[0.0, 0.0, 0.0], [1.0, 1.0, 0.0]]));
        let b = tape.leaf(cloud(&[[0.2, 0.0, 0.0], [2.0, 0.0, 1.0], [0.0, 3.0, 0.0]]));
        let fwd = directed_closest_loss(a, b).unwrap().0.value().item()
            + directed_closest_loss(b, a).unwrap().0.value().item();
        let rev = directed_closest_loss(b, a).unwrap().0.value().item()
            + directed_closest_loss(a, b).unwrap().0.value().item();
        assert_eq!(fwd, rev);
    }

    #[test]
    fn assignment_uncrosses_swapped_pair() {
        let tape = Tape::new();
        let s = tape.leaf(cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]));
        let t = tape.leaf(cloud(&[[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]));
        let (l, corr) = assignment_loss(s, t).unwrap();
        assert_eq!(l.value().item(), 0.0);
        assert_eq!(corr.ids, vec![1, 0]);
        let short = tape.leaf(cloud(&[[0.0, 0.0, 0.0]]));
        assert!(matches!(
            assignment_loss(s, short),
            Err(LossError::Size { .. })
        ));
    }

    #[test]
    fn order_loss_examples() {
        let tape = Tape::new();
        let input = tape.leaf(cloud(&[[0.0, 0.0, 0.0]]));
        let far_first = tape.leaf(cloud(&[[5.0, 5.0, 5.0], [0.1, 0.0, 0.0]]));
        let term = order_loss(input, far_first).unwrap();
        assert_eq!(term.loss.value().item(), 0.0);
        assert_eq!(term.theta, vec![1]);

        let near_first = tape.leaf(cloud(&[[0.1, 0.0, 0.0], [5.0, 5.0, 5.0]]));
        let term = order_loss(input, near_first).unwrap();
        assert!((term.loss.value().item() - 0.1).abs() < 1e-15);

        let exact = tape.leaf(cloud(&[[0.0, 0.0, 0.0], [2.0, 2.0, 2.0]]));
        assert_eq!(order_loss(input, exact).unwrap().loss.value().item(), 0.0);

        let two = tape.leaf(cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]));
        assert!(matches!(order_loss(two, input), Err(LossError::Size { .. })));
    }

    #[test]
    fn gamma_values() {
        assert_eq!(gamma(0.5), 0.02);
        assert_eq!(gamma(1.0), 0.01);
        assert!(gamma(2.0) < gamma(1.5));
    }

    #[test]
    fn uniform_prediction_cross_entropy() {
        let tape = Tape::new();
        let p = tape.leaf(Tensor::from_rows(&[[1.0 / 3.0; 3]]).unwrap());
        let t = one_hot(&[0], 3).unwrap();
        let bce = binary_cross_entropy(p, &t).unwrap().value().item();
        let expected = -(1.0 / 3.0) * ((1.0f64 / 3.0).ln() + 2.0 * (2.0f64 / 3.0).ln());
        assert!((bce - expected).abs() < 1e-15);
        assert!((bce - 0.6365).abs() < 1e-4);
    }

    #[test]
    fn perfect_prediction_is_nearly_free() {
        let tape = Tape::new();
        let labels = [0usize, 2, 1];
        let p = tape.leaf(one_hot(&labels, 3).unwrap());
        let corr = Correspondence {
            mode: MatchMode::Nearest,
            ids: vec![0, 1, 2],
            distances: vec![0.0; 3],
        };
        let term = semantic_loss(p, &labels, 3, &corr, (0.2, 0.3)).unwrap();
        assert_eq!(term.gamma, 0.02);
        assert!(term.loss.value().item() <= 3.0 * 1e-6 * term.gamma);
    }

    #[test]
    fn nan_probability_is_a_numeric_fault() {
        let tape = Tape::new();
        let p = tape.leaf(Tensor::from_rows(&[[f64::NAN, 0.5]]).unwrap());
        let t = one_hot(&[0], 2).unwrap();
        assert!(matches!(
            binary_cross_entropy(p, &t),
            Err(LossError::Autodiff(AutodiffError::NumericFault { .. }))
        ));
    }
}
