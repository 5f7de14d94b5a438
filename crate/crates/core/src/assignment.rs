//! Min-cost bipartite assignment by the ε-scaled forward auction.
//!
//! The final assignment is within `n · ε` of optimal. [`auction_assign`]
//! picks the final ε from a lower bound on the optimal cost so the result
//! lands within a requested relative gap.

/// Dense `n × n` cost matrix, row-major.
#[derive(Debug, Clone)]
pub struct CostMatrix {
    n: usize,
    costs: Vec<f64>,
}

impl CostMatrix {
    pub fn new(n: usize, costs: Vec<f64>) -> Self {
        assert_eq!(costs.len(), n * n, "cost matrix must be square");
        Self { n, costs }
    }

    /// Euclidean distances between two equally sized `dim`-vector sets.
    pub fn euclidean(source: &[f64], target: &[f64], dim: usize) -> Self {
        let n = source.len() / dim;
        let mut costs = Vec::with_capacity(n * n);
        for p in source.chunks_exact(dim) {
            for q in target.chunks_exact(dim) {
                costs.push(p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt());
            }
        }
        Self { n, costs }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.costs[row * self.n + col]
    }

    pub fn total(&self, assignment: &[usize]) -> f64 {
        assignment.iter().enumerate().map(|(i, &j)| self.get(i, j)).sum()
    }

    /// max(Σ row minima, Σ column minima), a lower bound on any assignment.
    pub fn lower_bound(&self) -> f64 {
        let n = self.n;
        let rows: f64 = (0..n)
            .map(|i| (0..n).map(|j| self.get(i, j)).fold(f64::INFINITY, f64::min))
            .sum();
        let cols: f64 = (0..n)
            .map(|j| (0..n).map(|i| self.get(i, j)).fold(f64::INFINITY, f64::min))
            .sum();
        rows.max(cols)
    }
}

const SCALING: f64 = 5.0;

/// Assignment whose cost is within `relative_gap` of the optimum (and within
/// an absolute `1e-12 · max cost · n` when the lower bound is zero).
///
/// Returns the column assigned to each row.
pub fn auction_assign(costs: &CostMatrix, relative_gap: f64) -> Vec<usize> {
    let n = costs.n();
    if n == 0 {
        return Vec::new();
    }
    let max_cost = costs.costs.iter().copied().fold(0.0, f64::max);
    if max_cost == 0.0 {
        return (0..n).collect();
    }
    let floor = 1e-12 * max_cost;
    let final_eps = (relative_gap * costs.lower_bound() / n as f64).max(floor);
    let mut eps = (max_cost / 2.0).max(final_eps);
    let mut prices = vec![0.0; n];
    loop {
        let assignment = auction_phase(costs, &mut prices, eps);
        if eps <= final_eps {
            return assignment;
        }
        eps = (eps / SCALING).max(final_eps);
    }
}

/// One Gauss-Seidel auction round at fixed ε, maximizing `−cost − price`.
fn auction_phase(costs: &CostMatrix, prices: &mut [f64], eps: f64) -> Vec<usize> {
    let n = costs.n();
    let mut owner: Vec<Option<usize>> = vec![None; n];
    let mut assigned: Vec<Option<usize>> = vec![None; n];
    let mut queue: Vec<usize> = (0..n).rev().collect();
    while let Some(person) = queue.pop() {
        let (mut best, mut best_val, mut second_val) = (0, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for (obj, &price) in prices.iter().enumerate() {
            let val = -costs.get(person, obj) - price;
            if val > best_val {
                second_val = best_val;
                best_val = val;
                best = obj;
            } else if val > second_val {
                second_val = val;
            }
        }
        let increment = if second_val.is_finite() {
            best_val - second_val + eps
        } else {
            eps
        };
        prices[best] += increment;
        if let Some(prev) = owner[best].replace(person) {
            assigned[prev] = None;
            queue.push(prev);
        }
        assigned[person] = Some(best);
    }
    assigned.into_iter().map(|a| a.expect("auction leaves nobody unassigned")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn result_is_a_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let src: Vec<f64> = (0..60).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dst: Vec<f64> = (0..60).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = auction_assign(&CostMatrix::euclidean(&src, &dst, 3), 0.01);
        let mut seen = a.clone();
        seen.sort_unstable();
        assert_eq!(seen, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn crossing_pair_is_uncrossed() {
        let src = [0.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let dst = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let c = CostMatrix::euclidean(&src, &dst, 3);
        let a = auction_assign(&c, 0.01);
        assert_eq!(a, vec![1, 0]);
        assert_eq!(c.total(&a), 0.0);
    }

    #[test]
    fn within_one_percent_of_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for n in 1..=7 {
            let perms = permutations(n);
            for _ in 0..10 {
                let src: Vec<f64> = (0..3 * n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let dst: Vec<f64> = (0..3 * n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let c = CostMatrix::euclidean(&src, &dst, 3);
                let best = perms.iter().map(|p| c.total(p)).fold(f64::INFINITY, f64::min);
                let got = c.total(&auction_assign(&c, 0.01));
                assert!(got <= best * 1.01 + 1e-12, "n={n}: {got} vs {best}");
            }
        }
    }
}
