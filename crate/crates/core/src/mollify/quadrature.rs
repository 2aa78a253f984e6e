//! One-dimensional Gauss rules: nodes from the eigenvalues of the Jacobi
//! matrix, then one Newton polish on the three-term recurrence and exact
//! symmetrization.

use nalgebra::{DMatrix, SymmetricEigen};

/// Nodes and weights of a one-dimensional rule.
#[derive(Debug, Clone, PartialEq)]
pub struct Rule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Rule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `Σ wᵢ f(xᵢ)`.
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).sum()
    }
}

fn jacobi_nodes(n: usize, offdiag: impl Fn(usize) -> f64) -> Vec<f64> {
    let mut jm = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let b = offdiag(k);
        jm[(k - 1, k)] = b;
        jm[(k, k - 1)] = b;
    }
    let mut x: Vec<f64> = SymmetricEigen::new(jm).eigenvalues.iter().copied().collect();
    x.sort_by(f64::total_cmp);
    x
}

fn symmetrize(x: &mut [f64], w: &mut [f64]) {
    let n = x.len();
    for i in 0..n / 2 {
        let j = n - 1 - i;
        let xi = 0.5 * (x[j] - x[i]);
        let wi = 0.5 * (w[i] + w[j]);
        x[i] = -xi;
        x[j] = xi;
        w[i] = wi;
        w[j] = wi;
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
}

/// Orthonormal probabilists' Hermite values `h₀(x)..h_n(x)`.
fn hermite_orthonormal(n: usize, x: f64) -> Vec<f64> {
    let mut h = vec![0.0; n + 1];
    h[0] = 1.0;
    if n >= 1 {
        h[1] = x;
    }
    for k in 1..n {
        h[k + 1] = (x * h[k] - (k as f64).sqrt() * h[k - 1]) / ((k + 1) as f64).sqrt();
    }
    h
}

/// Gauss–Hermite rule for the standard normal density: `Σ wᵢ f(xᵢ)`
/// approximates `E[f(Z)]`, exactly for polynomials of degree `< 2n`.
pub fn gauss_hermite(n: usize) -> Rule {
    assert!(n >= 1, "a rule needs at least one node");
    let mut nodes = jacobi_nodes(n, |k| (k as f64).sqrt());
    let mut weights = Vec::with_capacity(n);
    for x in nodes.iter_mut() {
        let h = hermite_orthonormal(n, *x);
        // h_n' = √n·h_{n−1}
        let d = (n as f64).sqrt() * h[n - 1];
        if d != 0.0 {
            *x -= h[n] / d;
        }
        let h = hermite_orthonormal(n, *x);
        weights.push(1.0 / h[..n].iter().map(|v| v * v).sum::<f64>());
    }
    symmetrize(&mut nodes, &mut weights);
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Rule { nodes, weights }
}

/// Legendre `P_n(x)` and `P_{n−1}(x)`.
fn legendre_pair(n: usize, x: f64) -> (f64, f64) {
    let (mut prev, mut cur) = (1.0, x);
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 1..n {
        let next = ((2 * k + 1) as f64 * x * cur - k as f64 * prev) / (k + 1) as f64;
        prev = cur;
        cur = next;
    }
    (cur, prev)
}

/// Gauss–Legendre rule on `[-1, 1]` (weights sum to 2).
pub fn gauss_legendre(n: usize) -> Rule {
    assert!(n >= 1, "a rule needs at least one node");
    let mut nodes = jacobi_nodes(n, |k| k as f64 / ((4 * k * k - 1) as f64).sqrt());
    let mut weights = Vec::with_capacity(n);
    let nf = n as f64;
    for x in nodes.iter_mut() {
        let derivative = |x: f64| {
            let (p, q) = legendre_pair(n, x);
            (p, nf * (x * p - q) / (x * x - 1.0))
        };
        let (p, d) = derivative(*x);
        if d.is_finite() && d != 0.0 {
            *x -= p / d;
        }
        let (_, d) = derivative(*x);
        weights.push(2.0 / ((1.0 - *x * *x) * d * d));
    }
    symmetrize(&mut nodes, &mut weights);
    Rule { nodes, weights }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn normal_moment(k: u32) -> f64 {
        // (k−1)!! for even k.
        if k % 2 == 1 {
            0.0
        } else {
            (1..k).step_by(2).map(f64::from).product()
        }
    }

    #[test]
    fn hermite_rule_integrates_normal_moments() {
        for n in [1, 2, 5, 16, 64] {
            let r = gauss_hermite(n);
            assert_eq!(r.len(), n);
            for k in 0..(2 * n as u32).min(20) {
                let got = r.integrate(|x| x.powi(k as i32));
                let want = normal_moment(k);
                let scale = r.integrate(|x| x.abs().powi(k as i32));
                assert!((got - want).abs() <= 1e-12 * scale.max(1.0), "n={n} k={k}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn hermite_three_point_rule_by_hand() {
        // Nodes 0, ±√3 with weights 2/3, 1/6.
        let r = gauss_hermite(3);
        assert!((r.nodes[2] - 3f64.sqrt()).abs() < 1e-14);
        assert_eq!(r.nodes[1], 0.0);
        assert!((r.weights[1] - 2.0 / 3.0).abs() < 1e-14);
        assert!((r.weights[0] - 1.0 / 6.0).abs() < 1e-14);
    }

    #[test]
    fn legendre_rule_integrates_polynomials() {
        for n in [1, 2, 7, 64] {
            let r = gauss_legendre(n);
            for k in 0..(2 * n as i32).min(30) {
                let got = r.integrate(|x| x.powi(k));
                let want = if k % 2 == 1 { 0.0 } else { 2.0 / (k + 1) as f64 };
                assert!((got - want).abs() < 1e-13, "n={n} k={k}: {got}");
            }
        }
        let r = gauss_legendre(2);
        assert!((r.nodes[1] - 1.0 / 3f64.sqrt()).abs() < 1e-15);
    }
}
