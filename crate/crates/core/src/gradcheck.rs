//! Finite-difference checks of every analytic derivative.
//!
//! Each target draws seeded random instances, compares the tape gradient of
//! a scalar function against central differences and reports the worst
//! relative error. Instances closer than `margin` to a discrete switch
//! (argmin tie, k-NN boundary, pooling rank, matching swap, norm kink) are
//! redrawn, since the function is not differentiable there.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Primitive, Tape, Tensor, Var};
use crate::losses::{
    assignment_loss, directed_closest_loss, order_loss, semantic_loss, Correspondence, MatchMode,
};
use crate::model::{ArchitectureConfig, LayerParams, LayerSpec, Model, ModelError};
use crate::operators::{
    activations, closest_in, extraction_margin, feature_extraction, g_aggregate, latent_max_pool,
    neighbor_pooling, pool_selection, pooled_count, upsampling, BankVars, CandidateMode, Neighborhoods,
    OperatorConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scope {
    Primitive,
    Operator,
    Loss,
    Model,
}

impl Scope {
    pub const ALL: [Scope; 4] = [Scope::Primitive, Scope::Operator, Scope::Loss, Scope::Model];

    pub fn name(self) -> &'static str {
        match self {
            Scope::Primitive => "primitive",
            Scope::Operator => "operator",
            Scope::Loss => "loss",
            Scope::Model => "model",
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for Scope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scope::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown gradient-check scope '{s}' (primitive, operator, loss, model)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckConfig {
    pub seed: u64,
    /// Accepted instances per target.
    pub instances: usize,
    /// Central-difference step.
    pub step: f64,
    /// Largest accepted relative error.
    pub tolerance: f64,
    /// Smallest distance to a discrete switch for an instance to count.
    pub margin: f64,
    /// Denominator floor of the relative error, per unit of the function
    /// value: difference quotients carry roundoff proportional to `|f|`, so
    /// entries far below that are compared absolutely.
    pub floor: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 100,
            step: 1e-5,
            tolerance: 1e-4,
            margin: 1e-3,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetReport {
    pub scope: Scope,
    pub name: &'static str,
    pub checked: usize,
    /// Draws rejected by the margin filter.
    pub skipped: usize,
    pub failures: usize,
    pub worst: f64,
    /// Set when an instance could not be evaluated at all.
    pub error: Option<String>,
}

impl TargetReport {
    pub fn passed(&self, cfg: &GradcheckConfig) -> bool {
        self.error.is_none() && self.failures == 0 && self.checked >= cfg.instances
    }
}

/// Fixed-width table of reports, one row per target.
pub fn format_table(reports: &[TargetReport], cfg: &GradcheckConfig) -> String {
    let mut out = format!(
        "{:<22} {:<10} {:>8} {:>8} {:>12}  status\n",
        "target", "scope", "checked", "skipped", "worst_rel"
    );
    for r in reports {
        let status = match &r.error {
            Some(e) => format!("ERROR {e}"),
            None if r.passed(cfg) => "ok".to_string(),
            None if r.checked < cfg.instances => "FAIL (too few instances)".to_string(),
            None => format!("FAIL ({} over tolerance)", r.failures),
        };
        out.push_str(&format!(
            "{:<22} {:<10} {:>8} {:>8} {:>12.3e}  {status}\n",
            r.name, r.scope, r.checked, r.skipped, r.worst
        ));
    }
    out
}

type Eval = Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, ModelError>>;

/// A scalar function of `inputs` together with its distance to the nearest
/// non-differentiable point.
pub struct Instance {
    inputs: Vec<Tensor>,
    margin: f64,
    eval: Eval,
}

fn instance<F>(inputs: Vec<Tensor>, margin: f64, eval: F) -> Instance
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, ModelError> + 'static,
{
    Instance {
        inputs,
        margin,
        eval: Box::new(eval),
    }
}

impl Instance {
    fn value(&self, inputs: &[Tensor]) -> Result<f64, ModelError> {
        let tape = Tape::new();
        let leaves: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = (self.eval)(&tape, &leaves)?;
        Ok(root.value().item())
    }

    /// Worst relative error between tape and central-difference gradients.
    pub fn worst_error(&self, cfg: &GradcheckConfig) -> Result<f64, ModelError> {
        let tape = Tape::new();
        let leaves: Vec<Var<'_>> = self.inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = (self.eval)(&tape, &leaves)?;
        let floor = cfg.floor * root.value().item().abs().max(1.0);
        let grads = tape.backward(root)?;
        let mut worst: f64 = 0.0;
        let mut probe = self.inputs.clone();
        for (i, leaf) in leaves.iter().enumerate() {
            let analytic = grads.get(*leaf);
            for j in 0..probe[i].len() {
                let x = probe[i].data()[j];
                probe[i].data_mut()[j] = x + cfg.step;
                let up = self.value(&probe)?;
                probe[i].data_mut()[j] = x - cfg.step;
                let down = self.value(&probe)?;
                probe[i].data_mut()[j] = x;
                let numeric = (up - down) / (2.0 * cfg.step);
                let a = analytic.data()[j];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
                if !rel.is_finite() {
                    return Ok(f64::INFINITY);
                }
                worst = worst.max(rel);
            }
        }
        Ok(worst)
    }
}

struct Target {
    scope: Scope,
    name: &'static str,
    make: fn(&mut ChaCha8Rng) -> Result<Instance, ModelError>,
}

fn check_target(index: usize, target: &Target, cfg: &GradcheckConfig) -> TargetReport {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let mut report = TargetReport {
        scope: target.scope,
        name: target.name,
        checked: 0,
        skipped: 0,
        failures: 0,
        worst: 0.0,
        error: None,
    };
    let budget = cfg.instances.saturating_mul(50).max(1);
    for _ in 0..budget {
        if report.checked >= cfg.instances {
            break;
        }
        let outcome = (target.make)(&mut rng).and_then(|inst| {
            if !(inst.margin >= cfg.margin) {
                return Ok(None);
            }
            inst.worst_error(cfg).map(Some)
        });
        match outcome {
            Ok(None) => report.skipped += 1,
            Ok(Some(err)) => {
                report.checked += 1;
                report.worst = report.worst.max(err);
                if !(err <= cfg.tolerance) {
                    report.failures += 1;
                }
            }
            Err(e) => {
                report.error = Some(e.to_string());
                break;
            }
        }
    }
    log::debug!("gradcheck {}: {} checked, worst {:.3e}", target.name, report.checked, report.worst);
    report
}

/// Runs every target in `scopes`, in a fixed order.
pub fn run(scopes: &[Scope], cfg: &GradcheckConfig) -> Vec<TargetReport> {
    targets()
        .iter()
        .enumerate()
        .filter(|(_, t)| scopes.contains(&t.scope))
        .map(|(i, t)| check_target(i, t, cfg))
        .collect()
}

/// Names of all targets with their scopes.
pub fn target_names() -> Vec<(Scope, &'static str)> {
    targets().iter().map(|t| (t.scope, t.name)).collect()
}

fn targets() -> Vec<Target> {
    use Scope::*;
    let t = |scope, name, make| Target { scope, name, make };
    vec![
        t(Primitive, "leaf", prim_leaf),
        t(Primitive, "add", prim_add),
        t(Primitive, "sub", prim_sub),
        t(Primitive, "mul", prim_mul),
        t(Primitive, "scale", prim_scale),
        t(Primitive, "offset", prim_offset),
        t(Primitive, "matvec", prim_matvec),
        t(Primitive, "euclidean_norm", prim_norm),
        t(Primitive, "tanh", prim_tanh),
        t(Primitive, "reciprocal", prim_reciprocal),
        t(Primitive, "log", prim_log),
        t(Primitive, "sigmoid", prim_sigmoid),
        t(Primitive, "clamp", prim_clamp),
        t(Primitive, "sum", prim_sum),
        t(Primitive, "sum_last", prim_sum_last),
        t(Primitive, "gather", prim_gather),
        t(Primitive, "select_min_index", prim_select_min),
        t(Primitive, "reshape", prim_reshape),
        t(Primitive, "concat", prim_concat),
        t(Operator, "closest_distance", op_closest),
        t(Operator, "g_aggregate", op_g_aggregate),
        t(Operator, "feature_extraction", op_feature_extraction),
        t(Operator, "neighbor_pooling", op_neighbor_pooling),
        t(Operator, "latent_max_pool", op_latent_max_pool),
        t(Operator, "upsampling", op_upsampling),
        t(Loss, "out_to_gt", loss_out_to_gt),
        t(Loss, "gt_to_out", loss_gt_to_out),
        t(Loss, "assignment", loss_assignment),
        t(Loss, "order", loss_order),
        t(Loss, "semantic", loss_semantic),
        t(Model, "tiny_model", model_tiny),
    ]
}

/// The primitive whose target exercises `p`, for fault-injection reports.
pub fn target_for(p: Primitive) -> &'static str {
    p.name()
}

// ---- helpers -------------------------------------------------------------

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
        .expect("shape and data agree")
}

/// Values in `±[lo, hi]` with random sign.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let mut t = uniform(rng, shape, lo, hi);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// `Σ w ⊙ v`: a scalar whose gradient with respect to `v` is `w`.
fn weighted<'t>(v: Var<'t>, w: &Tensor) -> Result<Var<'t>, ModelError> {
    let tape = v.tape();
    Ok(v.mul(tape.constant(w.clone()))?.sum()?)
}

fn row_norms(t: &Tensor) -> impl Iterator<Item = f64> + '_ {
    t.iter_rows().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
}

/// Gap between the two smallest values, or infinity with fewer than two.
fn lowest_gap(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    if values.len() < 2 {
        f64::INFINITY
    } else {
        values[1] - values[0]
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// How far every source point is from changing its nearest target or
/// reaching zero distance.
fn nearest_margin(source: &Tensor, target: &Tensor) -> f64 {
    source
        .iter_rows()
        .map(|p| {
            let dists: Vec<f64> = target.iter_rows().map(|q| distance(p, q)).collect();
            let closest = dists.iter().copied().fold(f64::INFINITY, f64::min);
            closest.min(lowest_gap(dists))
        })
        .fold(f64::INFINITY, f64::min)
}

/// Gap between the kept and dropped activations of a pooling step.
fn pooling_margin(acts: &[f64], tau: usize) -> f64 {
    let keep = pooled_count(acts.len(), tau);
    let mut sorted = acts.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    if keep < sorted.len() {
        sorted[keep - 1] - sorted[keep]
    } else {
        f64::INFINITY
    }
}

/// Smallest gap between the two largest entries of any column.
fn column_max_margin(t: &Tensor) -> f64 {
    let dim = t.row_len();
    (0..dim)
        .map(|b| lowest_gap(t.iter_rows().map(|r| -r[b]).collect()))
        .fold(f64::INFINITY, f64::min)
}

const KNN: CandidateMode = CandidateMode::Knn(4);

fn op_config() -> OperatorConfig {
    OperatorConfig {
        alpha: 1.0,
        beta: 1e-3,
        candidates: KNN,
    }
}

fn bank_vars<'t>(x: &[Var<'t>], s: usize, d_in: usize, d_out: usize) -> BankVars<'t> {
    BankVars {
        s,
        d_in,
        d_out,
        deltas: x[0],
        sigmas: x[1],
        rhos: x[2],
    }
}

fn random_bank(rng: &mut ChaCha8Rng, s: usize, d_in: usize, d_out: usize) -> Vec<Tensor> {
    vec![
        uniform(rng, &[d_out, s, d_in], -0.6, 0.6),
        uniform(rng, &[d_out, s], -1.0, 1.0),
        uniform(rng, &[d_out, d_in], -1.0, 1.0),
    ]
}

// ---- primitives ----------------------------------------------------------

/// Primitive inputs are drawn from `[-SPAN, SPAN]` where the domain allows.
const SPAN: f64 = 2.0;

fn prim_leaf(rng: &mut ChaCha8Rng) -> Result<Instance, ModelError> {
    let w = uniform(rng, &[3, 4], -1.0, 1.0);
    Ok(instance(vec![uniform(rng, &[3, 4], -SPAN, SPAN)], f64::INFINITY, move |_, x| {
        weighted(x[0], &w)
    }))
}

fn binary(
    rng: &mut ChaCha8Rng,
    op: for<'t> fn(Var<'t>, Var<'t>) -> Result<Var<'t>, crate::autodiff::AutodiffError>,
) -> Instance {
    let w = uniform(rng, &[3, 4], -1.0, 1.0);
    let inputs = vec![uniform(rng, &[3, 4], -SPAN, SPAN), uniform(rng, &[3, 4], -SPAN, SPAN)];
    instance(inputs, f64::INFINITY, move |_, x| weighted(op(x[0], x[1])?, &w))
}

fn prim_add(rng: &mut ChaCha8Rng) -> Result<Instance, ModelError> {
    Ok(binary(rng, |a, b| a.add(b)))
}

fn prim_sub(rng: &mut ChaCha8Rng) -> Result<Instance, ModelError> {
    Ok(binary(rng, |a, b| a.sub(b)))
}

fn prim_mul(rng: &mut ChaCha8Rng) -> Result<Instance, ModelError> {
    Ok(binary(rng, |a, b| a.mul(b)))
}

fn prim_scale(rng: &mut ChaCha8Rng) -> Result<Instance, ModelError> {
    let factor = rng.random_range(-2.0..2.0);
    let w = uniform(rng, &[5], -1.0, 1.0);
    Ok(instance(vec![uniform(rng, &[5], -SPAN, SPAN)], f64::INFINITY, move |_, x| {
        weighted(x[0].scale(factor)?, &w)
    }))
}

fn prim_offset(rng: &mut ChaCha8Rng) -> Result<Instance, ModelError> {
    let shift = rng.random_range(-2.0..2.0);
    let w = uniform(rng, &[5], -1.0, 1.0);
    Ok(instance(vec![uniform(rng, &[5], -SPAN, SPAN)], f64::INFINITY, move |_, x| {
        let y = x[0].offset(shift)?;
        weighted(y.mul(y)?, &w)
    }))
}

fn prim_matvec(rng: &mut ChaCha8Rng) -> Result<Instance, ModelError> {
    let w = uniform(rng, &[5, 3], -1.0, 1.0);
    let inputs = vec![uniform(rng, &[3, 4], -SPAN, SPAN), uniform(rng, &[5, 4], -SPAN, SPAN)];
    Ok(instance(inputs, f64::INFINITY, move |tape, x| {
        weighted(tape.matvec(x[0], x[1])?, &w)
    }))
}

fn prim_norm(rng: &mut ChaCha8Rng) -> Result<Instance, ModelError> {
    let w = uniform(rng, &[5], -1.0, 1.0);
    let a = uniform(rng, &[5, 3], -SPAN, SPAN);
    let margin = row_norms(&a).fold(f64::INFINITY, f64::min);
    Ok(instance(vec![a], margin, move |tape, x| weighted(tape.euclidean_norm(x[0])?, &w)))
}

fn prim_tanh(rng: &mut ChaCha8Rng) -> Result<Instance, ModelError> {
    let w = uniform(rng, &[6], -1.0, 1.0);
    Ok(instance(vec![uniform(rng, &[6], -2.0, 2.0)], f64::INFINITY, move |tape, x| {
        weighted(tape.tanh(x[0])?, &w)
    }))
}

fn prim_reciprocal(rng: &mut ChaCha8Rng) -> Result<Instance, ModelError> {
    let w = uniform(rng, &[6], -1.0, 1.0);
    Ok(instance(vec![away_from_zero(rng, &[6], 0.5, 2.0)], f64::INFINITY, move |tape, x| {
        weighted(tape.reciprocal(x[0])?, &w)
    }))
}

fn prim_log(rng: &mut ChaCha8Rng) -> Result<Instance, ModelError> {
    let w = uniform(rng, &[6], -1.0, 1.0);
    Ok(instance(vec![uniform(rng, &[6], 0.5, 2.0)], f64::INFINITY, move |tape, x| {
        weighted(tape.log(x[0])?, &w)
    }))
}

fn prim_sigmoid(rng: &mut ChaCha8Rng) -> Result<Instance, ModelError> {
    let w = uniform(rng, &[6], -1.0, 1.0);
    Ok(instance(vec![uniform(rng, &[6], -3.0, 3.0)], f64::INFINITY, move |tape, x| {
        weighted(tape.sigmoid(x[0])?, &w)
    }))
}

fn prim_clamp(rng: &mut ChaCha8Rng) -> Result<Instance, ModelError> {
    let (lo, hi) = (-0.5, 0.5);
    let w = uniform(rng, &[8], -1.0, 1.0);
    let a = uniform(rng, &[8], -SPAN, SPAN);
    let margin = a
        .data()
        .iter()
        .map(|v| (v - lo).abs().min((v - hi).abs()))
        .fold(f64::INFINITY, f64::min);
    Ok(instance(vec![a], margin, move |tape, x| weighted(tape.clamp(x[0], lo, hi)?, &w)))
}

fn prim_sum(rng: &mut ChaCha8Rng) -> Result<Instance, ModelError> {
    Ok(instance(vec![uniform(rng, &[7], -SPAN, SPAN)], f64::INFINITY, |tape, x| {
        let s = tape.sum(x[0])?;
        Ok(s.mul(s)?)
    }))
}

fn prim_sum_last(rng: &mut ChaCha8Rng) -> Result<Instance, ModelError> {
    let w = uniform(rng, &[4], -1.0, 1.0);
    Ok(instance(vec![uniform(rng, &[4, 5], -SPAN, SPAN)], f64::INFINITY, move |tape, x| {
        weighted(tape.sum_last(x[0])?, &w)
    }))
}

fn prim_gather(rng: &mut ChaCha8Rng) -> Result<Instance, ModelError> {
    let ids: Vec<usize> = (0..7).map(|_| rng.random_range(0..5)).collect();
    let w = uniform(rng, &[7, 3], -1.0, 1.0);
    Ok(instance(vec![uniform(rng, &[5, 3], -SPAN, SPAN)], f64::INFINITY, move |tape, x| {
        weighted(tape.gather(x[0], &ids)?, &w)
    }))
}

fn prim_select_min(rng: &mut ChaCha8Rng) -> Result<Instance, ModelError> {
    let w = uniform(rng, &[4], -1.0, 1.0);
    let a = uniform(rng, &[4, 5], -SPAN, SPAN);
    let margin = a
        .iter_rows()
        .map(|r| lowest_gap(r.to_vec()))
        .fold(f64::INFINITY, f64::min);
    Ok(instance(vec![a], margin, move |tape, x| {
        weighted(tape.select_min_index(x[0])?.0, &w)
    }))
}

fn prim_reshape(rng: &mut ChaCha8Rng) -> Result<Instance, ModelError> {
    let w = uniform(rng, &[3, 4], -1.0, 1.0);
    Ok(instance(vec![uniform(rng, &[2, 6], -SPAN, SPAN)], f64::INFINITY, move |tape, x| {
        weighted(tape.reshape(x[0], &[3, 4])?, &w)
    }))
}

fn prim_concat(rng: &mut ChaCha8Rng) -> Result<Instance, ModelError> {
    let w = uniform(rng, &[6, 3], -1.0, 1.0);
    let inputs = vec![uniform(rng, &[2, 3], -SPAN, SPAN), uniform(rng, &[4, 3], -SPAN, SPAN)];
    Ok(instance(inputs, f64::INFINITY, move |tape, x| {
        weighted(tape.concat(&[x[0], x[1]])?, &w)
    }))
}

// ---- operators -----------------------------------------------------------

fn op_closest(rng: &mut ChaCha8Rng) -> Result<Instance, ModelError> {
    let features = uniform(rng, &[8, 3], -1.0, 1.0);
    let delta = uniform(rng, &[3], -0.5, 0.5);
    let anchor = rng.random_range(0..8);
    let margin = extraction_margin(&features, &delta, KNN)?;
    Ok(instance(vec![features, delta], margin, move |tape, x| {
        let (fv, dv) = (x[0].value(), x[1].value());
        let hoods = Neighborhoods::build(&fv, KNN)?;
        let (_, sel) = closest_in(&fv, fv.row(anchor), dv.data(), hoods.candidates(anchor));
        let displaced = tape.gather(x[0], &[anchor])?.add(tape.reshape(x[1], &[1, 3])?)?;
        let diff = displaced.sub(tape.gather(x[0], &[sel])?)?;
        Ok(tape.sum(tape.euclidean_norm(diff)?)?)
    }))
}

fn op_g_aggregate(rng: &mut ChaCha8Rng) -> Result<Instance, ModelError> {
    let features = uniform(rng, &[8, 3], -1.0, 1.0);
    let deltas = uniform(rng, &[3, 3], -0.6, 0.6);
    let sigmas = uniform(rng, &[3], -1.0, 1.0);
    let anchor = rng.random_range(0..8);
    let margin = extraction_margin(&features, &deltas, KNN)?;
    Ok(instance(vec![features, deltas, sigmas], margin, move |tape, x| {
        let hoods = Neighborhoods::build(&x[0].value(), KNN)?;
        let a = tape.reshape(tape.gather(x[0], &[anchor])?, &[3])?;
        Ok(g_aggregate(a, x[1], x[2], x[0], hoods.candidates(anchor), &op_config())?)
    }))
}

fn op_feature_extraction(rng: &mut ChaCha8Rng) -> Result<Instance, ModelError> {
    let fin = uniform(rng, &[8, 3], -1.0, 1.0);
    let bank = random_bank(rng, 3, 3, 4);
    let w = uniform(rng, &[8, 4], -1.0, 1.0);
    let margin = extraction_margin(&fin, &bank[0], KNN)?;
    let inputs = std::iter::once(fin).chain(bank).collect();
    Ok(instance(inputs, margin, move |_, x| {
        let hoods = Neighborhoods::build(&x[0].value(), KNN)?;
        let out = feature_extraction(x[0], &bank_vars(&x[1..], 3, 3, 4), &hoods, &op_config())?;
        weighted(out.features, &w)
    }))
}

fn op_neighbor_pooling(rng: &mut ChaCha8Rng) -> Result<Instance, ModelError> {
    let fin = uniform(rng, &[8, 3], -1.0, 1.0);
    let bank = random_bank(rng, 3, 3, 4);
    let w = uniform(rng, &[4, 4], -1.0, 1.0);
    let mut margin = extraction_margin(&fin, &bank[0], KNN)?;
    {
        let tape = Tape::new();
        let leaves: Vec<Var<'_>> = bank.iter().map(|t| tape.constant(t.clone())).collect();
        let hoods = Neighborhoods::build(&fin, KNN)?;
        let out = feature_extraction(tape.constant(fin.clone()), &bank_vars(&leaves, 3, 3, 4), &hoods, &op_config())?;
        margin = margin.min(pooling_margin(&activations(&out.g), 2));
    }
    let inputs = std::iter::once(fin).chain(bank).collect();
    Ok(instance(inputs, margin, move |_, x| {
        let hoods = Neighborhoods::build(&x[0].value(), KNN)?;
        let out = feature_extraction(x[0], &bank_vars(&x[1..], 3, 3, 4), &hoods, &op_config())?;
        let (pooled, _) = neighbor_pooling(out.features, &activations(&out.g), 2)?;
        weighted(pooled, &w)
    }))
}

fn op_latent_max_pool(rng: &mut ChaCha8Rng) -> Result<Instance, ModelError> {
    let fin = uniform(rng, &[6, 4], -1.0, 1.0);
    let w = uniform(rng, &[1, 4], -1.0, 1.0);
    let margin = column_max_margin(&fin);
    Ok(instance(vec![fin], margin, move |_, x| weighted(latent_max_pool(x[0])?, &w)))
}

fn op_upsampling(rng: &mut ChaCha8Rng) -> Result<Instance, ModelError> {
    let fin = uniform(rng, &[6, 3], -1.0, 1.0);
    let banks: Vec<Vec<Tensor>> = (0..3).map(|_| random_bank(rng, 2, 3, 2)).collect();
    let w = uniform(rng, &[18, 2], -1.0, 1.0);
    let mut margin = f64::INFINITY;
    for b in &banks {
        margin = margin.min(extraction_margin(&fin, &b[0], KNN)?);
    }
    let inputs = std::iter::once(fin).chain(banks.into_iter().flatten()).collect();
    Ok(instance(inputs, margin, move |_, x| {
        let hoods = Neighborhoods::build(&x[0].value(), KNN)?;
        let banks: Vec<BankVars<'_>> = x[1..].chunks_exact(3).map(|c| bank_vars(c, 2, 3, 2)).collect();
        weighted(upsampling(x[0], &banks, &hoods, &op_config())?, &w)
    }))
}

// ---- losses --------------------------------------------------------------

fn directed(rng: &mut ChaCha8Rng, source_rows: usize, target_rows: usize) -> Instance {
    let source = uniform(rng, &[source_rows, 3], -1.0, 1.0);
    let target = uniform(rng, &[target_rows, 3], -1.0, 1.0);
    let margin = nearest_margin(&source, &target);
    instance(vec![source, target], margin, |_, x| Ok(directed_closest_loss(x[0], x[1])?.0))
}

fn loss_out_to_gt(rng: &mut ChaCha8Rng) -> Result<Instance, ModelError> {
    Ok(directed(rng, 10, 12))
}

fn loss_gt_to_out(rng: &mut ChaCha8Rng) -> Result<Instance, ModelError> {
    Ok(directed(rng, 12, 10))
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for slot in 0..n {
            let mut q = p.clone();
            q.insert(slot, n - 1);
            out.push(q);
        }
    }
    out
}

fn loss_assignment(rng: &mut ChaCha8Rng) -> Result<Instance, ModelError> {
    let n = 5;
    let source = uniform(rng, &[n, 3], -1.0, 1.0);
    let target = uniform(rng, &[n, 3], -1.0, 1.0);
    let costs: Vec<f64> = permutations(n)
        .iter()
        .map(|p| (0..n).map(|i| distance(source.row(i), target.row(p[i]))).sum())
        .collect();
    let best = costs.iter().copied().fold(f64::INFINITY, f64::min);
    let closest = source
        .iter_rows()
        .flat_map(|p| target.iter_rows().map(move |q| distance(p, q)))
        .fold(f64::INFINITY, f64::min);
    // The solver may return anything within 1% of the optimum, so the
    // runner-up has to clear that band.
    let margin = (lowest_gap(costs) - 0.02 * best).min(closest);
    Ok(instance(vec![source, target], margin, |_, x| Ok(assignment_loss(x[0], x[1])?.0)))
}

fn loss_order(rng: &mut ChaCha8Rng) -> Result<Instance, ModelError> {
    let input = uniform(rng, &[6, 3], -1.0, 1.0);
    let mut output = uniform(rng, &[12, 3], -1.0, 1.0);
    let noise = uniform(rng, &[6, 3], -0.3, 0.3);
    for (o, (i, e)) in output.data_mut()[..18].iter_mut().zip(input.data().iter().zip(noise.data())) {
        *o = i + e;
    }
    let margin = nearest_margin(&input, &output);
    Ok(instance(vec![input, output], margin, |_, x| Ok(order_loss(x[0], x[1])?.loss)))
}

fn loss_semantic(rng: &mut ChaCha8Rng) -> Result<Instance, ModelError> {
    let classes = 3;
    let logits = uniform(rng, &[8, classes], -3.0, 3.0);
    let gt_labels: Vec<usize> = (0..10).map(|_| rng.random_range(0..classes)).collect();
    let corr = Correspondence {
        mode: MatchMode::Nearest,
        ids: (0..8).map(|_| rng.random_range(0..10)).collect(),
        distances: vec![0.0; 8],
    };
    let completion = (rng.random_range(0.5..2.0), rng.random_range(0.5..2.0));
    Ok(instance(vec![logits], f64::INFINITY, move |tape, x| {
        let probs = tape.sigmoid(x[0])?;
        Ok(semantic_loss(probs, &gt_labels, classes, &corr, completion)?.loss)
    }))
}

// ---- model ---------------------------------------------------------------

fn tiny_config() -> ArchitectureConfig {
    use LayerSpec::*;
    ArchitectureConfig {
        input_points: 8,
        output_points: 16,
        layers: vec![
            FeatureExtraction { s: 2, d_out: 4 },
            NeighborPooling { tau: 2 },
            FeatureExtraction { s: 2, d_out: 4 },
            MaxPool,
            UpSampling { s: 2, n_up: 4, d_out: 4 },
            UpSampling { s: 2, n_up: 4, d_out: 3 },
        ],
        knn_k: Some(4),
        alpha: 1.0,
        beta: 1e-3,
        semantic_classes: None,
    }
    .with_semantic(2)
}

/// Distance of a model pass from every discrete switch it makes, and the
/// output coordinates.
fn model_margin(model: &Model, partial: &Tensor) -> Result<(f64, Tensor), ModelError> {
    let cfg = model.config().operator_config();
    let mut current = partial.clone();
    let mut last_g: Option<Tensor> = None;
    let mut margin = f64::INFINITY;
    for layer in model.layers() {
        let tape = Tape::new();
        match layer {
            LayerParams::Extract(b) => {
                margin = margin.min(extraction_margin(&current, &b.deltas, cfg.candidates)?);
                let hoods = Neighborhoods::build(&current, cfg.candidates)?;
                let out = feature_extraction(tape.constant(current.clone()), &b.bind(&tape), &hoods, &cfg)?;
                current = (*out.features.value()).clone();
                last_g = Some(out.g);
            }
            LayerParams::Pool(tau) => {
                let acts = activations(last_g.as_ref().expect("validated: pooling follows extraction"));
                margin = margin.min(pooling_margin(&acts, *tau));
                let kept = pool_selection(&acts, *tau)?;
                current = (*tape.gather(tape.constant(current), &kept)?.value()).clone();
            }
            LayerParams::MaxPool => {
                margin = margin.min(column_max_margin(&current));
                current = (*latent_max_pool(tape.constant(current))?.value()).clone();
            }
            LayerParams::Up(u) => {
                for b in &u.banks {
                    margin = margin.min(extraction_margin(&current, &b.deltas, cfg.candidates)?);
                }
                let hoods = Neighborhoods::build(&current, cfg.candidates)?;
                let out = upsampling(tape.constant(current.clone()), &u.bind(&tape), &hoods, &cfg)?;
                current = (*out.value()).clone();
            }
        }
    }
    let coords = current
        .iter_rows()
        .flat_map(|r| r[..3].iter().copied())
        .collect();
    Ok((margin, Tensor::new(vec![current.rows(), 3], coords)?))
}

fn model_tiny(rng: &mut ChaCha8Rng) -> Result<Instance, ModelError> {
    let mut model = Model::random(tiny_config(), rng)?;
    // The default ±0.1 displacements leave every anchor matched to itself,
    // which ties all pooling activations; spread them out.
    for p in model.parameters_mut() {
        if p.shape().len() == 3 {
            *p = uniform(rng, p.shape(), -0.6, 0.6);
        }
    }
    let partial = uniform(rng, &[8, 3], -1.0, 1.0);
    let complete = uniform(rng, &[16, 3], -1.0, 1.0);
    let labels: Vec<usize> = (0..16).map(|_| rng.random_range(0..2)).collect();
    let (mut margin, points) = model_margin(&model, &partial)?;
    margin = margin
        .min(nearest_margin(&points, &complete))
        .min(nearest_margin(&complete, &points))
        .min(nearest_margin(&partial, &points));
    // γ is a per-batch constant during differentiation; fix it at the
    // unperturbed completion losses.
    let completion = (
        (0..16).map(|i| nearest(points.row(i), &complete)).sum(),
        (0..16).map(|i| nearest(complete.row(i), &points)).sum(),
    );
    let inputs = model.parameters().into_iter().cloned().collect();
    Ok(instance(inputs, margin, move |tape, x| {
        let fwd = model.forward_with_params(tape, &partial, x.to_vec())?;
        let gt = tape.constant(complete.clone());
        let (out_to_gt, corr) = directed_closest_loss(fwd.points, gt)?;
        let (gt_to_out, _) = directed_closest_loss(gt, fwd.points)?;
        let order = order_loss(tape.constant(partial.clone()), fwd.points)?.loss;
        let probs = fwd.probs.expect("tiny model has a semantic head");
        let semantic = semantic_loss(probs, &labels, 2, &corr, completion)?.loss;
        Ok(out_to_gt.add(gt_to_out)?.add(order)?.add(semantic)?)
    }))
}

fn nearest(p: &[f64], cloud: &Tensor) -> f64 {
    cloud.iter_rows().map(|q| distance(p, q)).fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::inject_backward_fault;

    fn quick() -> GradcheckConfig {
        GradcheckConfig {
            instances: 10,
            ..Default::default()
        }
    }

    #[test]
    fn every_primitive_has_a_target() {
        let names: Vec<&str> = target_names().into_iter().map(|(_, n)| n).collect();
        for p in crate::autodiff::ALL_PRIMITIVES {
            assert!(names.contains(&target_for(p)), "{p}");
        }
    }

    #[test]
    fn quick_run_passes() {
        let cfg = quick();
        let reports = run(&[Scope::Primitive, Scope::Operator, Scope::Loss], &cfg);
        let table = format_table(&reports, &cfg);
        assert!(reports.iter().all(|r| r.passed(&cfg)), "{table}");
    }

    #[test]
    fn injected_fault_is_named() {
        let cfg = GradcheckConfig {
            instances: 3,
            ..Default::default()
        };
        inject_backward_fault(Some(Primitive::Tanh));
        let reports = run(&[Scope::Primitive], &cfg);
        inject_backward_fault(None);
        let failed: Vec<&str> = reports.iter().filter(|r| !r.passed(&cfg)).map(|r| r.name).collect();
        assert_eq!(failed, vec!["tanh"]);
        assert!(format_table(&reports, &cfg).contains("FAIL"));
    }

    #[test]
    fn scope_parses() {
        assert_eq!("loss".parse::<Scope>().unwrap(), Scope::Loss);
        assert!("nope".parse::<Scope>().is_err());
    }
}
