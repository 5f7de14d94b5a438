//! Displacement-based feature extraction, activation-ranked neighbor pooling,
//! up-sampling and the latent max-pool.
//!
//! Feature sets travel through the tape as `[count, dim]` tensors. For an
//! anchor `f` and displacement `δ`, the closest-feature distance is
//!
//! ```text
//! d(f, δ) = min_{f' ∈ C(f)} ‖(f + δ) − f'‖
//! ```
//!
//! where `C(f)` is the k-nearest-neighbor set of the anchor (or the whole set
//! in exact mode). Each output channel `b` of a feature extraction layer owns
//! `s` pairs `(δ_i, σ_i)` and a projection `ρ_b`:
//!
//! ```text
//! out[a, b] = Σ_i σ_bi · tanh(α / (d(f_a, δ_bi) + β)) + ρ_b · f_a
//! ```
//!
//! The argmin index is frozen at its forward value for differentiation.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::spatial::{NeighborIndex, SpatialError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OpError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Spatial(#[from] SpatialError),
    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("beta must be positive, got {0}")]
    NonPositiveBeta(f64),
    #[error("cannot pool {count} vectors with tau = {tau}")]
    PoolTooSmall { count: usize, tau: usize },
    #[error("{0}")]
    Contract(String),
}

/// Which candidates the closest-feature search ranges over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateMode {
    /// The `k` nearest neighbors of the anchor (clamped to the set size).
    Knn(usize),
    /// Every feature in the set.
    Exact,
}

impl Default for CandidateMode {
    fn default() -> Self {
        CandidateMode::Knn(16)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatorConfig {
    pub alpha: f64,
    pub beta: f64,
    pub candidates: CandidateMode,
}

impl Default for OperatorConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1e-3,
            candidates: CandidateMode::default(),
        }
    }
}

impl OperatorConfig {
    pub fn validate(&self) -> Result<(), OpError> {
        if !(self.beta > 0.0) {
            return Err(OpError::NonPositiveBeta(self.beta));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(OpError::Contract(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.candidates == CandidateMode::Knn(0) {
            return Err(OpError::Contract("knn k must be positive".into()));
        }
        Ok(())
    }
}

/// Trainable parameters of one feature extraction: per output channel, `s`
/// displacements with weights, and one projection vector.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementBank {
    pub s: usize,
    pub d_in: usize,
    pub d_out: usize,
    /// `[d_out, s, d_in]`
    pub deltas: Tensor,
    /// `[d_out, s]`
    pub sigmas: Tensor,
    /// `[d_out, d_in]`
    pub rhos: Tensor,
}

impl DisplacementBank {
    pub fn from_parts(deltas: Tensor, sigmas: Tensor, rhos: Tensor) -> Result<Self, OpError> {
        let &[d_out, s, d_in] = deltas.shape() else {
            return Err(OpError::Contract(format!(
                "deltas must be [d_out, s, d_in], got {:?}",
                deltas.shape()
            )));
        };
        if sigmas.shape() != [d_out, s] || rhos.shape() != [d_out, d_in] {
            return Err(OpError::Contract(format!(
                "sigmas {:?} / rhos {:?} do not match deltas {:?}",
                sigmas.shape(),
                rhos.shape(),
                deltas.shape()
            )));
        }
        if !(deltas.is_finite() && sigmas.is_finite() && rhos.is_finite()) {
            return Err(OpError::Contract("bank parameters must be finite".into()));
        }
        Ok(Self {
            s,
            d_in,
            d_out,
            deltas,
            sigmas,
            rhos,
        })
    }

    pub fn zeros(s: usize, d_in: usize, d_out: usize) -> Self {
        Self {
            s,
            d_in,
            d_out,
            deltas: Tensor::zeros(&[d_out, s, d_in]),
            sigmas: Tensor::zeros(&[d_out, s]),
            rhos: Tensor::zeros(&[d_out, d_in]),
        }
    }

    /// δ ~ U[−0.1, 0.1], σ ~ U[−0.5, 0.5], ρ ~ N(0, 1/d_in).
    pub fn random(s: usize, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let mut bank = Self::zeros(s, d_in, d_out);
        let delta = Uniform::new_inclusive(-0.1, 0.1).unwrap();
        let sigma = Uniform::new_inclusive(-0.5, 0.5).unwrap();
        let rho = Normal::new(0.0, (1.0 / d_in as f64).sqrt()).unwrap();
        bank.deltas.data_mut().iter_mut().for_each(|v| *v = delta.sample(rng));
        bank.sigmas.data_mut().iter_mut().for_each(|v| *v = sigma.sample(rng));
        bank.rhos.data_mut().iter_mut().for_each(|v| *v = rho.sample(rng));
        bank
    }

    pub fn parameter_count(&self) -> usize {
        self.deltas.len() + self.sigmas.len() + self.rhos.len()
    }

    /// Records the parameters as differentiable leaves.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BankVars<'t> {
        BankVars {
            s: self.s,
            d_in: self.d_in,
            d_out: self.d_out,
            deltas: tape.leaf(self.deltas.clone()),
            sigmas: tape.leaf(self.sigmas.clone()),
            rhos: tape.leaf(self.rhos.clone()),
        }
    }
}

/// A [`DisplacementBank`] recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BankVars<'t> {
    pub s: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub deltas: Var<'t>,
    pub sigmas: Var<'t>,
    pub rhos: Var<'t>,
}

/// `N_up` independent banks sharing input and output dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct UpBank {
    pub banks: Vec<DisplacementBank>,
}

impl UpBank {
    pub fn new(banks: Vec<DisplacementBank>) -> Result<Self, OpError> {
        let Some(first) = banks.first() else {
            return Err(OpError::Contract("up-sampling needs at least one bank".into()));
        };
        if banks
            .iter()
            .any(|b| b.d_in != first.d_in || b.d_out != first.d_out)
        {
            return Err(OpError::Contract("up-sampling banks must share dimensions".into()));
        }
        Ok(Self { banks })
    }

    pub fn random(s: usize, n_up: usize, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            banks: (0..n_up)
                .map(|_| DisplacementBank::random(s, d_in, d_out, rng))
                .collect(),
        }
    }

    pub fn n_up(&self) -> usize {
        self.banks.len()
    }

    pub fn d_in(&self) -> usize {
        self.banks[0].d_in
    }

    pub fn d_out(&self) -> usize {
        self.banks[0].d_out
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<BankVars<'t>> {
        self.banks.iter().map(|b| b.bind(tape)).collect()
    }
}

/// Candidate lists for every anchor of a feature set.
#[derive(Debug, Clone)]
pub enum Neighborhoods {
    Knn { k: usize, ids: Vec<usize> },
    All { count: usize },
}

impl Neighborhoods {
    /// Builds candidate lists for every row of a `[count, dim]` tensor.
    pub fn build(features: &Tensor, mode: CandidateMode) -> Result<Self, OpError> {
        let count = features.rows();
        match mode {
            CandidateMode::Exact => Ok(Neighborhoods::All { count }),
            CandidateMode::Knn(k) if k >= count => Ok(Neighborhoods::All { count }),
            CandidateMode::Knn(k) => {
                let index = NeighborIndex::build(features.data(), features.row_len())?;
                let mut ids = Vec::with_capacity(count * k);
                for row in features.iter_rows() {
                    ids.extend(index.k_nearest(row, k)?.into_iter().map(|n| n.id));
                }
                Ok(Neighborhoods::Knn { k, ids })
            }
        }
    }

    pub fn candidates(&self, anchor: usize) -> Candidates<'_> {
        match self {
            Neighborhoods::Knn { k, ids } => Candidates::List(&ids[anchor * k..(anchor + 1) * k]),
            Neighborhoods::All { count } => Candidates::Range(*count),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Candidates<'a> {
    List(&'a [usize]),
    Range(usize),
}

impl Candidates<'_> {
    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        let (list, range) = match *self {
            Candidates::List(l) => (Some(l.iter().copied()), None),
            Candidates::Range(n) => (None, Some(0..n)),
        };
        list.into_iter().flatten().chain(range.into_iter().flatten())
    }
}

/// Squared distance from `anchor + delta` to `other`, evaluated in the same
/// order the tape evaluates it.
#[inline]
fn displaced_sq(anchor: &[f64], delta: &[f64], other: &[f64]) -> f64 {
    anchor
        .iter()
        .zip(delta)
        .zip(other)
        .map(|((f, d), o)| {
            let r = (f + d) - o;
            r * r
        })
        .sum()
}

/// Closest candidate to `anchor + delta`: `(distance, id)`, ties to the
/// lower id.
pub fn closest_in(
    features: &Tensor,
    anchor: &[f64],
    delta: &[f64],
    candidates: Candidates<'_>,
) -> (f64, usize) {
    let mut best = (f64::INFINITY, usize::MAX);
    for id in candidates.iter() {
        let d2 = displaced_sq(anchor, delta, features.row(id));
        if d2 < best.0 || (d2 == best.0 && id < best.1) {
            best = (d2, id);
        }
    }
    (best.0.sqrt(), best.1)
}

/// Distance from `anchor + delta` to its closest feature among the anchor's
/// candidates, and that feature's id.
pub fn closest_distance(
    anchor: &[f64],
    delta: &[f64],
    index: &NeighborIndex,
    mode: CandidateMode,
) -> Result<(f64, usize), OpError> {
    let dim = index.dim();
    for (v, op) in [(anchor.len(), "anchor"), (delta.len(), "delta")] {
        if v != dim {
            return Err(OpError::Dimension {
                op,
                expected: dim,
                got: v,
            });
        }
    }
    let candidates: Vec<usize> = match mode {
        CandidateMode::Knn(k) => index
            .k_nearest(anchor, k.min(index.len()))?
            .into_iter()
            .map(|n| n.id)
            .collect(),
        CandidateMode::Exact => (0..index.len()).collect(),
    };
    let mut best = (f64::INFINITY, usize::MAX);
    for id in candidates {
        let d2 = displaced_sq(anchor, delta, index.point(id));
        if d2 < best.0 || (d2 == best.0 && id < best.1) {
            best = (d2, id);
        }
    }
    Ok((best.0.sqrt(), best.1))
}

fn check_rows(op: &'static str, value: &Tensor, dim: usize) -> Result<usize, OpError> {
    match value.shape() {
        &[count, d] if d == dim => Ok(count),
        &[_, d] => Err(OpError::Dimension {
            op,
            expected: dim,
            got: d,
        }),
        other => Err(OpError::Contract(format!(
            "{op}: expected a [count, {dim}] feature set, got {other:?}"
        ))),
    }
}

/// Weighted displacement response of one anchor for one channel:
/// `Σ_i σ_i · tanh(α / (d(f, δ_i) + β))`.
///
/// `anchor` is `[d]`, `deltas` `[s, d]`, `sigmas` `[s]`, `features` `[n, d]`.
pub fn g_aggregate<'t>(
    anchor: Var<'t>,
    deltas: Var<'t>,
    sigmas: Var<'t>,
    features: Var<'t>,
    candidates: Candidates<'_>,
    config: &OperatorConfig,
) -> Result<Var<'t>, OpError> {
    config.validate()?;
    let tape = anchor.tape();
    let (fv, dv, av) = (features.value(), deltas.value(), anchor.value());
    let dim = av.len();
    let s = check_rows("g_aggregate", &dv, dim)?;
    check_rows("g_aggregate", &fv, dim)?;
    if sigmas.value().shape() != [s] {
        return Err(OpError::Contract(format!(
            "g_aggregate: sigmas {:?} do not match {s} displacements",
            sigmas.shape()
        )));
    }
    let sel: Vec<usize> = dv
        .iter_rows()
        .map(|delta| closest_in(&fv, av.data(), delta, candidates).1)
        .collect();
    let anchor_rows = tape.gather(tape.reshape(anchor, &[1, dim])?, &vec![0; s])?;
    let diff = anchor_rows.add(deltas)?.sub(tape.gather(features, &sel)?)?;
    let response = tape
        .euclidean_norm(diff)?
        .offset(config.beta)?
        .reciprocal()?
        .scale(config.alpha)?
        .tanh()?;
    Ok(sigmas.mul(response)?.sum()?)
}

/// Output of [`feature_extraction`].
#[derive(Debug)]
pub struct Extracted<'t> {
    /// `[count, d_out]`
    pub features: Var<'t>,
    /// The `g` part of every entry, `[count, d_out]`, kept for activations.
    pub g: Tensor,
}

/// Feature extraction: entry `(a, b)` is `g_b(f_a) + ρ_b · f_a`.
pub fn feature_extraction<'t>(
    fin: Var<'t>,
    bank: &BankVars<'t>,
    hoods: &Neighborhoods,
    config: &OperatorConfig,
) -> Result<Extracted<'t>, OpError> {
    config.validate()?;
    let tape = fin.tape();
    let fv = fin.value();
    let count = check_rows("feature_extraction", &fv, bank.d_in)?;
    let (s, d_in, d_out) = (bank.s, bank.d_in, bank.d_out);
    let dv = bank.deltas.value();
    if dv.shape() != [d_out, s, d_in] {
        return Err(OpError::Contract(format!(
            "feature_extraction: deltas {:?} do not match bank [{d_out}, {s}, {d_in}]",
            dv.shape()
        )));
    }

    let rows = count * d_out * s;
    let mut anchor_ids = Vec::with_capacity(rows);
    let mut delta_ids = Vec::with_capacity(rows);
    let mut selected = Vec::with_capacity(rows);
    for a in 0..count {
        let anchor = fv.row(a);
        let cands = hoods.candidates(a);
        for (j, delta) in dv.data().chunks_exact(d_in).enumerate() {
            anchor_ids.push(a);
            delta_ids.push(j);
            selected.push(closest_in(&fv, anchor, delta, cands).1);
        }
    }

    let deltas = tape.reshape(bank.deltas, &[d_out * s, d_in])?;
    let sigmas = tape.reshape(bank.sigmas, &[d_out * s])?;
    let displaced = tape.gather(fin, &anchor_ids)?.add(tape.gather(deltas, &delta_ids)?)?;
    let diff = displaced.sub(tape.gather(fin, &selected)?)?;
    let response = tape
        .euclidean_norm(diff)?
        .offset(config.beta)?
        .reciprocal()?
        .scale(config.alpha)?
        .tanh()?;
    let weighted = tape.gather(sigmas, &delta_ids)?.mul(response)?;
    let g = tape.sum_last(tape.reshape(weighted, &[count, d_out, s])?)?;
    let h = tape.matvec(bank.rhos, fin)?;
    let g_values = (*g.value()).clone();
    Ok(Extracted {
        features: g.add(h)?,
        g: g_values,
    })
}

/// Activation of one output vector: `Σ_b tanh|g_b|`.
pub fn activation(g_row: &[f64]) -> f64 {
    g_row.iter().map(|v| v.abs().tanh()).sum()
}

pub fn activations(g: &Tensor) -> Vec<f64> {
    g.iter_rows().map(activation).collect()
}

/// Number of vectors kept when pooling `count` vectors by `tau`.
pub fn pooled_count(count: usize, tau: usize) -> usize {
    (count / tau).max(1)
}

/// Row ids retained by pooling, in ascending order: the `count / tau` rows
/// with the highest activations, ties to the lower row id.
pub fn pool_selection(activations: &[f64], tau: usize) -> Result<Vec<usize>, OpError> {
    if tau == 0 || activations.len() < tau {
        return Err(OpError::PoolTooSmall {
            count: activations.len(),
            tau,
        });
    }
    let keep = pooled_count(activations.len(), tau);
    let mut order: Vec<usize> = (0..activations.len()).collect();
    order.sort_by(|&a, &b| activations[b].total_cmp(&activations[a]).then(a.cmp(&b)));
    order.truncate(keep);
    order.sort_unstable();
    Ok(order)
}

/// Keeps whole feature vectors with the highest activations.
pub fn neighbor_pooling<'t>(
    fout: Var<'t>,
    activations: &[f64],
    tau: usize,
) -> Result<(Var<'t>, Vec<usize>), OpError> {
    let rows = fout.value().rows();
    if activations.len() != rows {
        return Err(OpError::Dimension {
            op: "neighbor_pooling",
            expected: rows,
            got: activations.len(),
        });
    }
    let kept = pool_selection(activations, tau)?;
    Ok((fout.tape().gather(fout, &kept)?, kept))
}

/// Column-wise maximum into a single `[1, dim]` vector; each entry's
/// gradient goes to its argmax row (lowest row on ties).
pub fn latent_max_pool(fin: Var<'_>) -> Result<Var<'_>, OpError> {
    let tape = fin.tape();
    let fv = fin.value();
    let &[count, dim] = fv.shape() else {
        return Err(OpError::Contract(format!(
            "latent_max_pool: expected [count, dim], got {:?}",
            fv.shape()
        )));
    };
    let mut best: Vec<usize> = vec![0; dim];
    for a in 1..count {
        for (b, slot) in best.iter_mut().enumerate() {
            if fv.data()[a * dim + b] > fv.data()[*slot * dim + b] {
                *slot = a;
            }
        }
    }
    let flat_ids: Vec<usize> = best.iter().enumerate().map(|(b, &a)| a * dim + b).collect();
    let flat = tape.reshape(fin, &[count * dim])?;
    Ok(tape.reshape(tape.gather(flat, &flat_ids)?, &[1, dim])?)
}

/// Up-sampling: block `u` of the output is the feature extraction of the
/// input with bank `u`, so the output has `N_up · count` rows.
pub fn upsampling<'t>(
    fin: Var<'t>,
    banks: &[BankVars<'t>],
    hoods: &Neighborhoods,
    config: &OperatorConfig,
) -> Result<Var<'t>, OpError> {
    if banks.is_empty() {
        return Err(OpError::Contract("up-sampling needs at least one bank".into()));
    }
    let blocks = banks
        .iter()
        .map(|bank| feature_extraction(fin, bank, hoods, config).map(|e| e.features))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(fin.tape().concat(&blocks)?)
}

/// Smallest gap separating any argmin or k-NN boundary decision from a tie,
/// together with the smallest selected distance. Gradient checks skip
/// instances where this falls below their threshold.
pub fn extraction_margin(
    features: &Tensor,
    deltas: &Tensor,
    mode: CandidateMode,
) -> Result<f64, OpError> {
    let count = features.rows();
    let dim = features.row_len();
    let hoods = Neighborhoods::build(features, mode)?;
    let mut margin = f64::INFINITY;
    if let Neighborhoods::Knn { k, .. } = hoods {
        let index = NeighborIndex::build(features.data(), dim)?;
        for row in features.iter_rows() {
            let near = index.k_nearest(row, k + 1)?;
            margin = margin.min(near[k].distance - near[k - 1].distance);
        }
    }
    for a in 0..count {
        let anchor = features.row(a);
        for delta in deltas.data().chunks_exact(dim) {
            let mut dists: Vec<f64> = hoods
                .candidates(a)
                .iter()
                .map(|id| displaced_sq(anchor, delta, features.row(id)).sqrt())
                .collect();
            dists.sort_by(f64::total_cmp);
            margin = margin.min(dists[0]);
            if dists.len() > 1 {
                margin = margin.min(dists[1] - dists[0]);
            }
        }
    }
    Ok(margin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn exact() -> OperatorConfig {
        OperatorConfig {
            candidates: CandidateMode::Exact,
            ..OperatorConfig::default()
        }
    }

    #[test]
    fn self_match_when_delta_is_zero() {
        let idx = NeighborIndex::from_rows(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 3.0, 0.0]])
            .unwrap();
        let (d, id) = closest_distance(&[1.0, 0.0, 0.0], &[0.0; 3], &idx, CandidateMode::Knn(2))
            .unwrap();
        assert_eq!((d, id), (0.0, 1));
    }

    #[test]
    fn displaced_anchor_lands_on_neighbor() {
        let idx = NeighborIndex::from_rows(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
        let (d, id) =
            closest_distance(&[0.0; 3], &[1.0, 0.0, 0.0], &idx, CandidateMode::Exact).unwrap();
        assert_eq!((d, id), (0.0, 1));
        let idx = NeighborIndex::from_rows(&[[0.0, 0.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let (d, _) =
            closest_distance(&[0.0; 3], &[0.0, 0.0, 5.0], &idx, CandidateMode::Exact).unwrap();
        assert_eq!(d, 4.0);
    }

    #[test]
    fn closest_distance_dimension_mismatch() {
        let idx = NeighborIndex::from_rows(&[[0.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(
            closest_distance(&[0.0; 2], &[0.0; 3], &idx, CandidateMode::Exact),
            Err(OpError::Dimension { .. })
        ));
    }

    fn single_g(anchor: [f64; 3], delta: [f64; 3], sigma: f64, cands: &[[f64; 3]], beta: f64) -> f64 {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::vector(anchor.to_vec()).unwrap());
        let d = tape.leaf(Tensor::from_rows(&[delta]).unwrap());
        let s = tape.leaf(Tensor::vector(vec![sigma]).unwrap());
        let f = tape.constant(Tensor::from_rows(cands).unwrap());
        let cfg = OperatorConfig {
            beta,
            ..exact()
        };
        g_aggregate(a, d, s, f, Candidates::Range(cands.len()), &cfg)
            .unwrap()
            .value()
            .item()
    }

    #[test]
    fn g_at_zero_distance_is_tanh_alpha_over_beta() {
        let g = single_g([0.0; 3], [0.0; 3], 1.0, &[[0.0; 3], [1.0, 1.0, 1.0]], 1.0);
        assert!((g - 1f64.tanh()).abs() < 1e-15);
        assert!((g - 0.761594).abs() < 1e-6);
    }

    #[test]
    fn g_saturates_with_small_beta() {
        let g = single_g([0.0; 3], [1.0, 0.0, 0.0], 2.0, &[[0.0; 3], [1.0, 0.0, 0.0]], 1e-3);
        assert!((g - 2.0 * 1000f64.tanh()).abs() < 1e-15);
        assert!((g - 2.0).abs() < 1e-12);
    }

    #[test]
    fn g_rejects_non_positive_beta() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![0.0; 3]).unwrap());
        let d = tape.leaf(Tensor::from_rows(&[[0.0; 3]]).unwrap());
        let s = tape.leaf(Tensor::vector(vec![1.0]).unwrap());
        let f = tape.constant(Tensor::from_rows(&[[0.0; 3]]).unwrap());
        let cfg = OperatorConfig {
            beta: 0.0,
            ..exact()
        };
        assert_eq!(
            g_aggregate(a, d, s, f, Candidates::Range(1), &cfg).unwrap_err(),
            OpError::NonPositiveBeta(0.0)
        );
    }

    #[test]
    fn zero_bank_gives_zero_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = Tensor::new(vec![6, 3], (0..18).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap();
        let tape = Tape::new();
        let fin = tape.constant(pts.clone());
        let bank = DisplacementBank::zeros(4, 3, 5).bind(&tape);
        let hoods = Neighborhoods::build(&pts, CandidateMode::Knn(3)).unwrap();
        let out = feature_extraction(fin, &bank, &hoods, &OperatorConfig::default()).unwrap();
        assert_eq!(out.features.shape(), vec![6, 5]);
        assert!(out.features.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn extraction_rejects_wrong_dimension() {
        let tape = Tape::new();
        let pts = Tensor::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap();
        let fin = tape.constant(pts.clone());
        let bank = DisplacementBank::zeros(2, 3, 4).bind(&tape);
        let hoods = Neighborhoods::build(&pts, CandidateMode::Exact).unwrap();
        assert!(matches!(
            feature_extraction(fin, &bank, &hoods, &OperatorConfig::default()),
            Err(OpError::Dimension { expected: 3, got: 2, .. })
        ));
    }

    #[test]
    fn activation_examples() {
        assert_eq!(activation(&[0.0, 0.0, 0.0]), 0.0);
        let a = activation(&[1.0, -1.0]);
        assert!((a - 2.0 * 1f64.tanh()).abs() < 1e-15);
        assert!((a - 1.523188).abs() < 1e-6);
        assert_eq!(activation(&[0.3, -2.0, 0.7]), activation(&[-0.3, 2.0, -0.7]));
    }

    #[test]
    fn pooling_keeps_highest_activations_in_order() {
        assert_eq!(pool_selection(&[0.1, 0.9, 0.5, 0.7], 2).unwrap(), vec![1, 3]);
        assert_eq!(pool_selection(&[0.1, 0.9, 0.5], 1).unwrap(), vec![0, 1, 2]);
        assert_eq!(pool_selection(&[0.5, 0.5, 0.5, 0.5], 2).unwrap(), vec![0, 1]);
        assert_eq!(pool_selection(&vec![0.0; 2048], 8).unwrap().len(), 256);
        assert_eq!(pool_selection(&[1.0; 7], 2).unwrap().len(), 3);
        assert_eq!(
            pool_selection(&[1.0; 3], 4).unwrap_err(),
            OpError::PoolTooSmall { count: 3, tau: 4 }
        );
    }

    #[test]
    fn pooling_gradient_only_reaches_retained_rows() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0], [7.0, 8.0]]).unwrap());
        let (pooled, kept) = neighbor_pooling(x, &[0.1, 0.9, 0.5, 0.7], 2).unwrap();
        assert_eq!(kept, vec![1, 3]);
        assert_eq!(pooled.value().data(), &[3.0, 4.0, 7.0, 8.0]);
        let g = tape.backward(pooled.sum().unwrap()).unwrap();
        assert_eq!(g.get(x).data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn max_pool_examples() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[[1.0, 5.0], [4.0, 2.0]]).unwrap());
        let m = latent_max_pool(x).unwrap();
        assert_eq!(m.shape(), vec![1, 2]);
        assert_eq!(m.value().data(), &[4.0, 5.0]);
        let g = tape.backward(m.sum().unwrap()).unwrap();
        assert_eq!(g.get(x).data(), &[0.0, 1.0, 1.0, 0.0]);

        let one = tape.leaf(Tensor::from_rows(&[[3.0, -1.0, 2.0]]).unwrap());
        assert_eq!(latent_max_pool(one).unwrap().value().data(), &[3.0, -1.0, 2.0]);

        let tied = tape.leaf(Tensor::from_rows(&[[2.0], [2.0]]).unwrap());
        let m = latent_max_pool(tied).unwrap();
        let g = tape.backward(m.sum().unwrap()).unwrap();
        assert_eq!(g.get(tied).data(), &[1.0, 0.0]);
    }

    #[test]
    fn upsampling_single_bank_matches_extraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts = Tensor::new(vec![5, 3], (0..15).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap();
        let bank = DisplacementBank::random(3, 3, 4, &mut rng);
        let cfg = OperatorConfig::default();
        let hoods = Neighborhoods::build(&pts, cfg.candidates).unwrap();
        let tape = Tape::new();
        let fin = tape.constant(pts.clone());
        let bv = bank.bind(&tape);
        let up = upsampling(fin, &[bv], &hoods, &cfg).unwrap();
        let fe = feature_extraction(fin, &bv, &hoods, &cfg).unwrap();
        assert_eq!(up.value(), fe.features.value());
    }

    #[test]
    fn monotone_summand() {
        // σ · tanh(α / (d + β)) strictly decreases in d for σ > 0
        let (alpha, beta, sigma) = (1.0, 1e-3, 0.7);
        let f = |d: f64| sigma * (alpha / (d + beta)).tanh();
        let mut prev = f(0.0);
        assert_eq!(prev, sigma * (alpha / beta).tanh());
        for i in 1..200 {
            let d = 0.05 * i as f64 + 0.5;
            let v = f(d);
            assert!(v < prev);
            prev = v;
        }
    }
}
