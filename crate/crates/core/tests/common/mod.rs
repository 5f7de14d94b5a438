//! Direct re-implementations of the operators and losses from their
//! definitions, shared by the oracle and acceptance suites.
#![allow(dead_code)]

use dispnet_core::autodiff::Tensor;
use dispnet_core::operators::{CandidateMode, DisplacementBank, OperatorConfig};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-12;
pub const ALPHA: f64 = 1.0;
pub const BETA: f64 = 1e-3;

pub type Rows = Vec<Vec<f64>>;

pub fn random_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Rows {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

pub fn to_tensor(rows: &Rows) -> Tensor {
    let d = rows[0].len();
    Tensor::new(vec![rows.len(), d], rows.concat()).unwrap()
}

pub fn to_rows(t: &Tensor) -> Rows {
    t.iter_rows().map(<[f64]>::to_vec).collect()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn assert_close(a: &Rows, b: &Rows, what: &str) {
    assert_eq!(a.len(), b.len(), "{what}: row count");
    for (i, (ra, rb)) in a.iter().zip(b).enumerate() {
        for (j, (x, y)) in ra.iter().zip(rb).enumerate() {
            assert!((x - y).abs() <= TOL * (1.0 + y.abs()), "{what}[{i}][{j}]: {x} vs {y}");
        }
    }
}

/// Candidate ids of anchor `a`: its `k` nearest rows, ties to the lower id.
pub fn knn(f: &Rows, a: usize, k: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..f.len()).collect();
    ids.sort_by(|&i, &j| dist(&f[a], &f[i]).total_cmp(&dist(&f[a], &f[j])).then(i.cmp(&j)));
    ids.truncate(k);
    ids
}

pub struct Bank {
    pub s: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub deltas: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub rhos: Vec<f64>,
}

impl Bank {
    pub fn of(b: &DisplacementBank) -> Self {
        Bank {
            s: b.s,
            d_in: b.d_in,
            d_out: b.d_out,
            deltas: b.deltas.data().to_vec(),
            sigmas: b.sigmas.data().to_vec(),
            rhos: b.rhos.data().to_vec(),
        }
    }
}

/// Returns `(features, g)`.
pub fn fe_oracle(f: &Rows, bank: &Bank, k: usize) -> (Rows, Rows) {
    let mut out = Vec::new();
    let mut gs = Vec::new();
    for a in 0..f.len() {
        let cands = knn(f, a, k);
        let mut row = Vec::new();
        let mut grow = Vec::new();
        for b in 0..bank.d_out {
            let mut g = 0.0;
            for i in 0..bank.s {
                let off = (b * bank.s + i) * bank.d_in;
                let delta = &bank.deltas[off..off + bank.d_in];
                let moved: Vec<f64> = f[a].iter().zip(delta).map(|(x, d)| x + d).collect();
                let d = cands.iter().map(|&c| dist(&moved, &f[c])).fold(f64::INFINITY, f64::min);
                g += bank.sigmas[b * bank.s + i] * (ALPHA / (d + BETA)).tanh();
            }
            let h: f64 = (0..bank.d_in).map(|j| bank.rhos[b * bank.d_in + j] * f[a][j]).sum();
            grow.push(g);
            row.push(g + h);
        }
        out.push(row);
        gs.push(grow);
    }
    (out, gs)
}

pub fn pool_oracle(f: &Rows, g: &Rows, tau: usize) -> (Rows, Vec<usize>) {
    let act: Vec<f64> = g.iter().map(|r| r.iter().map(|v| v.abs().tanh()).sum()).collect();
    let keep = f.len() / tau;
    let mut ids: Vec<usize> = (0..f.len()).collect();
    ids.sort_by(|&i, &j| act[j].total_cmp(&act[i]).then(i.cmp(&j)));
    ids.truncate(keep);
    ids.sort();
    (ids.iter().map(|&i| f[i].clone()).collect(), ids)
}

pub fn max_oracle(f: &Rows) -> Rows {
    vec![(0..f[0].len()).map(|b| f.iter().map(|r| r[b]).fold(f64::NEG_INFINITY, f64::max)).collect()]
}

pub fn up_oracle(f: &Rows, banks: &[Bank], k: usize) -> Rows {
    banks.iter().flat_map(|b| fe_oracle(f, b, k).0).collect()
}

pub fn config(k: usize) -> OperatorConfig {
    OperatorConfig {
        alpha: ALPHA,
        beta: BETA,
        candidates: CandidateMode::Knn(k),
    }
}

pub fn random_bank(rng: &mut ChaCha8Rng, s: usize, d_in: usize, d_out: usize) -> DisplacementBank {
    let mut b = DisplacementBank::random(s, d_in, d_out, rng);
    // wider than the default initialization so the argmin is not always the anchor
    for v in b.deltas.data_mut() {
        *v = rng.random_range(-0.7..0.7);
    }
    b
}

pub fn best_assignment(cost: &[Vec<f64>]) -> f64 {
    fn go(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if acc >= *best {
            return;
        }
        if row == cost.len() {
            *best = acc;
            return;
        }
        for j in 0..cost.len() {
            if !used[j] {
                used[j] = true;
                go(cost, row + 1, used, acc + cost[row][j], best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(cost, 0, &mut vec![false; cost.len()], 0.0, &mut best);
    best
}

