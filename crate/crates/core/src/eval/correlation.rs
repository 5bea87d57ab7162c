//! Spearman rank correlation between probe accuracy and amnesic impact.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};

/// Largest sample for which the exact permutation test is used by
/// [`PValueMethod::Auto`].
pub const EXACT_MAX_N: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PValueMethod {
    /// Exact for n <= 8, normal approximation above.
    #[default]
    Auto,
    /// Two-sided permutation test over all n! rankings.
    Exact,
    /// `rho * sqrt(n - 1)` against a standard normal.
    Normal,
    /// `rho * sqrt((n - 2) / (1 - rho^2))` against Student's t with n - 2
    /// degrees of freedom (what scipy reports).
    StudentT,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub rho: f64,
    pub p_value: f64,
    pub n: usize,
    pub method: PValueMethod,
}

/// Spearman correlation of `(probe_acc, amnesic_delta)` pairs with the
/// default p-value method.
pub fn probe_vs_impact_correlation(pairs: &[(f64, f64)]) -> Result<Correlation> {
    spearman(pairs, PValueMethod::Auto)
}

pub fn spearman(pairs: &[(f64, f64)], method: PValueMethod) -> Result<Correlation> {
    let n = pairs.len();
    if n < 3 {
        return Err(Error::TooFewPoints(n));
    }
    if pairs.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::InvalidArgument("correlation input must be finite".into()));
    }
    let rx = ranks(pairs.iter().map(|p| p.0));
    let ry = ranks(pairs.iter().map(|p| p.1));
    let rho = pearson(&rx, &ry);
    let method = match method {
        PValueMethod::Auto if n <= EXACT_MAX_N => PValueMethod::Exact,
        PValueMethod::Auto => PValueMethod::Normal,
        m => m,
    };
    let p_value = if rho.is_nan() {
        f64::NAN
    } else {
        match method {
            PValueMethod::Exact => exact_p(&rx, &ry, rho),
            PValueMethod::Normal => {
                let z = rho * ((n - 1) as f64).sqrt();
                let normal = Normal::standard();
                (2.0 * normal.sf(z.abs())).min(1.0)
            }
            PValueMethod::StudentT => {
                let df = (n - 2) as f64;
                if rho.abs() >= 1.0 {
                    0.0
                } else {
                    let t = rho * (df / (1.0 - rho * rho)).sqrt();
                    let dist = StudentsT::new(0.0, 1.0, df).expect("df is positive");
                    (2.0 * dist.sf(t.abs())).min(1.0)
                }
            }
            PValueMethod::Auto => unreachable!(),
        }
    };
    Ok(Correlation {
        rho,
        p_value,
        n,
        method,
    })
}

/// Average ranks (1-based), ties share the mean of their positions.
fn ranks(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let v: Vec<f64> = values.collect();
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Fraction of all rearrangements of `ry` whose |rho| reaches the observed one.
fn exact_p(rx: &[f64], ry: &[f64], rho: f64) -> f64 {
    let mut perm = ry.to_vec();
    let mut hits = 0u64;
    let mut total = 0u64;
    let threshold = rho.abs() - 1e-12;
    heap_permutations(&mut perm, &mut |p| {
        total += 1;
        if pearson(rx, p).abs() >= threshold {
            hits += 1;
        }
    });
    hits as f64 / total as f64
}

/// Heap's algorithm, iterative.
fn heap_permutations(a: &mut [f64], visit: &mut impl FnMut(&[f64])) {
    let n = a.len();
    let mut c = vec![0usize; n];
    visit(a);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                a.swap(0, i);
            } else {
                a.swap(c[i], i);
            }
            visit(a);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // probe accuracy and vanilla - amnesic LM accuracy for the six
    // properties of the non-masked last-layer experiment
    const SIX: [(f64, f64); 6] = [
        (76.00, 94.12 - 7.05),
        (89.50, 94.12 - 12.31),
        (92.34, 94.12 - 61.92),
        (93.53, 94.00 - 83.14),
        (85.12, 94.00 - 94.21),
        (83.09, 94.00 - 94.32),
    ];

    #[test]
    fn monotone_pairs_give_one() {
        let pairs: Vec<(f64, f64)> = (0..5).map(|i| (i as f64, (i * i) as f64)).collect();
        let c = probe_vs_impact_correlation(&pairs).unwrap();
        assert!((c.rho - 1.0).abs() < 1e-12);
        // only the identity and nothing else reaches |rho| = 1 besides the
        // full reversal
        assert!((c.p_value - 2.0 / 120.0).abs() < 1e-12);
    }

    #[test]
    fn reversing_one_side_negates_rho() {
        let rev: Vec<(f64, f64)> = SIX.iter().map(|&(x, y)| (x, -y)).collect();
        let a = probe_vs_impact_correlation(&SIX).unwrap();
        let b = probe_vs_impact_correlation(&rev).unwrap();
        assert!((a.rho + b.rho).abs() < 1e-12);
        assert!((a.p_value - b.p_value).abs() < 1e-12);
    }

    #[test]
    fn six_properties_against_scipy() {
        let t = spearman(&SIX, PValueMethod::StudentT).unwrap();
        assert!((t.rho - (-0.08571428571428573)).abs() < 1e-12);
        assert!((t.p_value - 0.8717434402332361).abs() < 1e-9);
        let exact = probe_vs_impact_correlation(&SIX).unwrap();
        assert_eq!(exact.method, PValueMethod::Exact);
        assert!((exact.p_value - 0.9194444444444444).abs() < 1e-12);
    }

    #[test]
    fn ties_use_average_ranks() {
        let x = [1.0, 2.0, 2.0, 3.0, 4.0];
        let y = [2.0, 1.0, 3.0, 3.0, 5.0];
        let pairs: Vec<(f64, f64)> = x.iter().copied().zip(y).collect();
        let c = probe_vs_impact_correlation(&pairs).unwrap();
        assert!((c.rho - 0.7631578947368421).abs() < 1e-12);
        assert!((c.p_value - 0.2).abs() < 1e-12);
    }

    #[test]
    fn large_samples_use_the_normal_approximation() {
        let x = [0.1, 0.4, 0.35, 0.8, 0.9, 0.2, 0.55, 0.7, 0.05, 0.6];
        let y = [1.0, 3.0, 2.0, 8.0, 7.0, 4.0, 5.0, 9.0, 0.0, 6.0];
        let pairs: Vec<(f64, f64)> = x.iter().copied().zip(y).collect();
        let c = probe_vs_impact_correlation(&pairs).unwrap();
        assert_eq!(c.method, PValueMethod::Normal);
        assert!((c.rho - 0.9151515151515152).abs() < 1e-12);
        assert!((c.p_value - 0.006042713772034345).abs() < 1e-9);
    }

    #[test]
    fn too_few_points() {
        assert!(matches!(
            probe_vs_impact_correlation(&[(1.0, 2.0), (2.0, 3.0)]),
            Err(Error::TooFewPoints(2))
        ));
    }
}
