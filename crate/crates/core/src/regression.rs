//! Least-squares projection on polynomial bases, used to estimate the
//! conditional expectations in the backward adjoint recursion.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::parallel;

/// Basis and regularization of the regression estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressionSpec {
    /// Maximum total degree of the monomials.
    pub degree: usize,
    /// Floor applied to the retained Gram eigenvalues, so that nearly
    /// degenerate directions are damped while well-conditioned ones are
    /// solved without bias.
    pub ridge: f64,
}

impl Default for RegressionSpec {
    fn default() -> Self {
        RegressionSpec { degree: 2, ridge: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RegressionError {
    #[error("invalid regression spec: {0}")]
    Spec(String),
    #[error("rank-deficient regression: {dropped} of {terms} directions below tolerance (condition estimate {condition:.3e})")]
    RankDeficient { terms: usize, dropped: usize, condition: f64 },
    #[error("non-finite regression data")]
    NonFinite,
}

impl RegressionSpec {
    pub fn validate(&self) -> Result<(), RegressionError> {
        if !(self.ridge >= 0.0) || !self.ridge.is_finite() {
            return Err(RegressionError::Spec(format!("ridge must be ≥ 0, got {}", self.ridge)));
        }
        if self.degree > 8 {
            return Err(RegressionError::Spec(format!("degree {} is too large (max 8)", self.degree)));
        }
        Ok(())
    }
}

/// All exponent vectors over `vars` variables with total degree ≤ `degree`,
/// in graded order starting with the constant.
pub fn monomial_exponents(vars: usize, degree: usize) -> Vec<Vec<u32>> {
    let mut out = vec![vec![0u32; vars]];
    for total in 1..=degree {
        let mut cur = vec![0u32; vars];
        push_with_total(&mut out, &mut cur, 0, total as u32);
    }
    out
}

fn push_with_total(out: &mut Vec<Vec<u32>>, cur: &mut Vec<u32>, pos: usize, left: u32) {
    if pos + 1 == cur.len() {
        cur[pos] = left;
        out.push(cur.clone());
        cur[pos] = 0;
        return;
    }
    if cur.is_empty() {
        return;
    }
    for e in (0..=left).rev() {
        cur[pos] = e;
        push_with_total(out, cur, pos + 1, left - e);
    }
    cur[pos] = 0;
}

/// A fitted projection operator onto the span of the basis evaluated at one
/// set of sample points. Reusable for any number of target columns.
#[derive(Debug, Clone)]
pub struct Projector {
    paths: usize,
    /// Standardized features `[path][feature]` of the retained features.
    design: Vec<f64>,
    terms: usize,
    /// Truncated pseudo-inverse of the Gram matrix with floored eigenvalues.
    gram_inv: DMatrix<f64>,
    condition: f64,
}

impl Projector {
    /// Builds the basis of monomials in the standardized `features`
    /// (`[path][feature]`, `width` per path) and factors its Gram matrix.
    ///
    /// Features that are constant across paths are dropped (they are
    /// spanned by the constant term).
    pub fn fit(
        features: &[f64],
        paths: usize,
        width: usize,
        spec: &RegressionSpec,
    ) -> Result<Projector, RegressionError> {
        spec.validate()?;
        assert_eq!(features.len(), paths * width, "feature array size");
        if features.iter().any(|v| !v.is_finite()) {
            return Err(RegressionError::NonFinite);
        }
        let n = paths.max(1) as f64;

        // Standardize, dropping degenerate features.
        let sums = parallel::sum_blocks(paths, width, |r, acc| {
            for p in r {
                for f in 0..width {
                    acc[f] += features[p * width + f];
                }
            }
        });
        let mean: Vec<f64> = (0..width).map(|f| sums[f] / n).collect();
        let sq = parallel::sum_blocks(paths, width, |r, acc| {
            for p in r {
                for f in 0..width {
                    let v = features[p * width + f] - mean[f];
                    acc[f] += v * v;
                }
            }
        });
        let keep: Vec<(usize, f64, f64)> = (0..width)
            .filter_map(|f| {
                let sd = (sq[f] / n).sqrt();
                (sd > 1e-12 * (1.0 + mean[f].abs())).then_some((f, mean[f], sd))
            })
            .collect();
        let exps = monomial_exponents(keep.len(), spec.degree);
        let terms = exps.len();

        let mut design = vec![0.0; paths * terms];
        parallel::for_each_slot(&mut design, terms, |p, row| {
            let z: Vec<f64> = keep.iter().map(|&(f, m, s)| (features[p * width + f] - m) / s).collect();
            for (slot, e) in row.iter_mut().zip(&exps) {
                *slot = e.iter().zip(&z).map(|(&k, &v)| v.powi(k as i32)).product();
            }
        });

        let gram_flat = parallel::sum_blocks(paths, terms * terms, |r, acc| {
            for p in r {
                let row = &design[p * terms..(p + 1) * terms];
                for a in 0..terms {
                    for b in a..terms {
                        acc[a * terms + b] += row[a] * row[b];
                    }
                }
            }
        });
        let mut gram = DMatrix::zeros(terms, terms);
        for a in 0..terms {
            for b in a..terms {
                let v = gram_flat[a * terms + b] / n;
                gram[(a, b)] = v;
                gram[(b, a)] = v;
            }
        }
        let eig = SymmetricEigen::new(gram);
        let lmax = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
        let cutoff = 1e-12 * lmax;
        let mut dropped = 0;
        let mut lmin = f64::INFINITY;
        let mut inv = DMatrix::zeros(terms, terms);
        for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
            if lambda <= cutoff {
                dropped += 1;
                continue;
            }
            lmin = lmin.min(lambda);
            let v = eig.eigenvectors.column(k);
            inv += (v * v.transpose()) / lambda.max(spec.ridge);
        }
        let condition = if lmin.is_finite() { lmax / lmin } else { f64::INFINITY };
        if dropped > 0 && spec.ridge == 0.0 {
            return Err(RegressionError::RankDeficient {
                terms,
                dropped,
                condition: if lmax > 0.0 { f64::INFINITY } else { condition },
            });
        }
        Ok(Projector {
            paths,
            design,
            terms,
            gram_inv: inv,
            condition,
        })
    }

    pub fn terms(&self) -> usize {
        self.terms
    }

    /// Ratio of largest to smallest retained Gram eigenvalue.
    pub fn condition(&self) -> f64 {
        self.condition
    }

    /// Fitted values `[path][column]` of the projection of `targets`
    /// (`[path][column]`, `cols` per path). Identically zero targets give
    /// exactly zero fitted values.
    pub fn project(&self, targets: &[f64], cols: usize) -> Vec<f64> {
        let (paths, terms) = (self.paths, self.terms);
        assert_eq!(targets.len(), paths * cols, "target array size");
        if targets.iter().all(|&v| v == 0.0) {
            return vec![0.0; paths * cols];
        }
        let n = paths.max(1) as f64;
        let rhs_flat = parallel::sum_blocks(paths, terms * cols, |r, acc| {
            for p in r {
                let row = &self.design[p * terms..(p + 1) * terms];
                let y = &targets[p * cols..(p + 1) * cols];
                for a in 0..terms {
                    for c in 0..cols {
                        acc[a * cols + c] += row[a] * y[c];
                    }
                }
            }
        });
        let rhs = DMatrix::from_row_slice(terms, cols, &rhs_flat) / n;
        let coef = &self.gram_inv * rhs;
        let mut fitted = vec![0.0; paths * cols];
        parallel::for_each_slot(&mut fitted, cols, |p, out| {
            let row = &self.design[p * terms..(p + 1) * terms];
            for (c, o) in out.iter_mut().enumerate() {
                *o = (0..terms).map(|a| row[a] * coef[(a, c)]).sum();
            }
        });
        fitted
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn binomial(n: usize, k: usize) -> usize {
        (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
    }

    #[test]
    fn monomial_counts_match_binomials() {
        for vars in 0..4 {
            for deg in 0..4 {
                assert_eq!(monomial_exponents(vars, deg).len(), binomial(vars + deg, deg));
            }
        }
        assert_eq!(monomial_exponents(2, 1), vec![vec![0, 0], vec![1, 0], vec![0, 1]]);
    }

    #[test]
    fn reproduces_polynomials_in_the_span() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let paths = 500;
        let feats: Vec<f64> = (0..paths * 2).map(|_| rng.random_range(-2.0..2.0)).collect();
        let targets: Vec<f64> = (0..paths)
            .map(|p| {
                let (a, b) = (feats[2 * p], feats[2 * p + 1]);
                1.0 - 2.0 * a + 0.5 * a * b + 3.0 * b * b
            })
            .collect();
        let spec = RegressionSpec { degree: 2, ridge: 0.0 };
        let pr = Projector::fit(&feats, paths, 2, &spec).unwrap();
        let fit = pr.project(&targets, 1);
        for (f, t) in fit.iter().zip(&targets) {
            assert!((f - t).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_features_collapse_to_the_mean() {
        let feats = vec![3.0; 10];
        let targets: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let pr = Projector::fit(&feats, 10, 1, &RegressionSpec { degree: 3, ridge: 0.0 }).unwrap();
        assert_eq!(pr.terms(), 1);
        assert!(pr.project(&targets, 1).iter().all(|v| (v - 4.5).abs() < 1e-12));
    }

    #[test]
    fn duplicated_features_need_ridge() {
        let feats: Vec<f64> = (0..20).flat_map(|i| [i as f64, i as f64]).collect();
        let err = Projector::fit(&feats, 20, 2, &RegressionSpec { degree: 1, ridge: 0.0 }).unwrap_err();
        assert!(matches!(err, RegressionError::RankDeficient { dropped: 1, .. }));
        let pr = Projector::fit(&feats, 20, 2, &RegressionSpec { degree: 1, ridge: 1e-8 }).unwrap();
        let targets: Vec<f64> = (0..20).map(|i| 2.0 * i as f64).collect();
        for (f, t) in pr.project(&targets, 1).iter().zip(&targets) {
            assert!((f - t).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_targets_fit_exactly_zero() {
        let feats: Vec<f64> = (0..30).map(|i| (i as f64).sin()).collect();
        let pr = Projector::fit(&feats, 30, 1, &RegressionSpec::default()).unwrap();
        assert!(pr.project(&vec![0.0; 60], 2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(RegressionSpec { degree: 1, ridge: -1.0 }.validate().is_err());
        assert!(RegressionSpec { degree: 9, ridge: 0.0 }.validate().is_err());
    }

    proptest! {
        // Least squares residuals are orthogonal to the constant and to
        // each feature (degree ≥ 1).
        #[test]
        fn residual_is_orthogonal_to_basis(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let paths = 200;
            let feats: Vec<f64> = (0..paths).map(|_| rng.random_range(-1.0..1.0)).collect();
            let targets: Vec<f64> = feats.iter().map(|x| (3.0 * x).sin() + rng.random_range(-0.1..0.1)).collect();
            let pr = Projector::fit(&feats, paths, 1, &RegressionSpec { degree: 2, ridge: 0.0 }).unwrap();
            let fit = pr.project(&targets, 1);
            let r: Vec<f64> = targets.iter().zip(&fit).map(|(t, f)| t - f).collect();
            let s0: f64 = r.iter().sum();
            let s1: f64 = r.iter().zip(&feats).map(|(r, x)| r * x).sum();
            prop_assert!(s0.abs() < 1e-9 && s1.abs() < 1e-9);
        }
    }
}
