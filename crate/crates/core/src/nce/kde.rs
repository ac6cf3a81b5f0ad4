//! Isotropic Gaussian kernel density estimates over a finite set of centers.
//!
//! ```text
//! p(z) = 1 / (N (2π)^{D/2} σ^D) · Σ_i exp(-‖z - z_i‖² / 2σ²)
//! ```
//!
//! All evaluation goes through the log density so that far-away queries and
//! large `D` do not underflow.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::numeric::{log_sum_exp, sigmoid};

fn check(query: &[f64], centers: &[Vec<f64>], sigma: f64) -> Result<()> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("kernel width must be > 0, got {sigma}")));
    }
    if centers.is_empty() {
        return Err(Error::invalid("kde needs at least one center"));
    }
    if let Some(c) = centers.iter().find(|c| c.len() != query.len()) {
        return Err(Error::ShapeMismatch {
            op: "kde",
            lhs: vec![query.len()],
            rhs: vec![c.len()],
        });
    }
    if query.is_empty() {
        return Err(Error::invalid("kde query has dimension 0"));
    }
    Ok(())
}

pub fn kde_log_density(query: &[f64], centers: &[Vec<f64>], sigma: f64) -> Result<f64> {
    check(query, centers, sigma)?;
    let d = query.len() as f64;
    let exponents: Vec<f64> = centers
        .iter()
        .map(|c| {
            let sq: f64 = query.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum();
            -sq / (2.0 * sigma * sigma)
        })
        .collect();
    let norm = (centers.len() as f64).ln() + 0.5 * d * (2.0 * PI).ln() + d * sigma.ln();
    Ok(log_sum_exp(&exponents) - norm)
}

pub fn kde_density(query: &[f64], centers: &[Vec<f64>], sigma: f64) -> Result<f64> {
    kde_log_density(query, centers, sigma).map(f64::exp)
}

/// Posterior of the narrow (`sigma_s`) estimate against the wide (`sigma_o`)
/// one under equal priors.
pub fn kde_posterior(query: &[f64], centers: &[Vec<f64>], sigma_s: f64, sigma_o: f64) -> Result<f64> {
    if !(sigma_o > sigma_s) {
        return Err(Error::invalid(format!(
            "posterior needs sigma_o > sigma_s, got sigma_s={sigma_s} sigma_o={sigma_o}"
        )));
    }
    let ls = kde_log_density(query, centers, sigma_s)?;
    let lo = kde_log_density(query, centers, sigma_o)?;
    Ok(sigmoid(ls - lo))
}

/// Mean negative log-likelihood of `queries` under the narrow estimate.
pub fn kde_nll(queries: &[Vec<f64>], centers: &[Vec<f64>], sigma_s: f64) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::invalid("kde_nll needs at least one query"));
    }
    let mut total = 0.0;
    for q in queries {
        total -= kde_log_density(q, centers, sigma_s)?;
    }
    Ok(total / queries.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn single_center_peak() {
        let p = kde_density(&[0.3, -0.2], &[vec![0.3, -0.2]], 1.0).unwrap();
        assert!((p - 1.0 / (2.0 * PI)).abs() < 1e-15);
        assert!((p - 0.15915).abs() < 1e-5);
    }

    #[test]
    fn symmetric_pair_equals_single_center() {
        let one = kde_density(&[0.0, 0.0], &[vec![1.0, 0.0]], 0.7).unwrap();
        let two = kde_density(&[0.0, 0.0], &[vec![1.0, 0.0], vec![-1.0, 0.0]], 0.7).unwrap();
        assert!((one - two).abs() < 1e-15);
    }

    #[test]
    fn matches_naive_summation() {
        let mut r = crate::rng::rng(42);
        let centers: Vec<Vec<f64>> = (0..5).map(|_| vec![r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)]).collect();
        let sigma = 0.4;
        for _ in 0..20 {
            let q = [r.gen_range(-1.5..1.5), r.gen_range(-1.5..1.5)];
            let naive: f64 = centers
                .iter()
                .map(|c| {
                    let sq = (q[0] - c[0]).powi(2) + (q[1] - c[1]).powi(2);
                    (-sq / (2.0 * sigma * sigma)).exp()
                })
                .sum::<f64>()
                / (5.0 * 2.0 * PI * sigma * sigma);
            let p = kde_density(&q, &centers, sigma).unwrap();
            assert!((p - naive).abs() < 1e-12, "{p} vs {naive}");
        }
    }

    #[test]
    fn rejects_bad_width() {
        assert!(kde_density(&[0.0], &[vec![0.0]], 0.0).is_err());
        assert!(kde_density(&[0.0], &[], 1.0).is_err());
        assert!(kde_posterior(&[0.0], &[vec![0.0]], 1.0, 1.0).is_err());
    }

    #[test]
    fn posterior_at_center_is_confident() {
        let p = kde_posterior(&[0.0, 0.0], &[vec![0.0, 0.0]], 0.05, 1.0).unwrap();
        // one center: 1 / (1 + (σs/σo)^D) = 1 / (1 + 1/400)
        assert!((p - 400.0 / 401.0).abs() < 1e-12);
        assert!(p > 0.99);
    }

    #[test]
    fn far_query_matches_log_space_oracle() {
        // One center far from the query: log p_s - log p_o is a closed form.
        let (ss, so) = (0.1, 1.0);
        let q = [30.0, -40.0];
        let p = kde_posterior(&q, &[vec![0.0, 0.0]], ss, so).unwrap();
        let d2 = 2500.0;
        let u = -d2 / (2.0 * ss * ss) + d2 / (2.0 * so * so) + 2.0 * (so / ss as f64).ln();
        assert_eq!(p, sigmoid(u));
        assert_eq!(p, 0.0);
        // a moderately far query keeps a representable value
        let q = [0.35, 0.0];
        let u = -0.1225 / (2.0 * ss * ss) + 0.1225 / 2.0 + 2.0 * 10f64.ln();
        let p = kde_posterior(&q, &[vec![0.0, 0.0]], ss, so).unwrap();
        assert!((p - sigmoid(u)).abs() < 1e-15);
    }

    #[test]
    fn nll_single_point_and_monotone_shift() {
        let c = vec![vec![0.0, 0.0]];
        let nll = kde_nll(&c, &c, 1.0).unwrap();
        assert!((nll - (2.0 * PI).ln()).abs() < 1e-14);
        assert!((nll - 1.8379).abs() < 1e-4);
        let mut last = nll;
        for k in 1..20 {
            let shift = k as f64 * 0.25;
            let v = kde_nll(&[vec![shift, 0.0]], &c, 1.0).unwrap();
            assert!(v > last);
            last = v;
        }
        assert!(kde_nll(&[], &c, 1.0).is_err());
    }
}
