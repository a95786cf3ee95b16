//! Truncated stick-breaking variational machinery for the IBP prior:
//! Beta posteriors over stick variables, expected log-sticks, the multinomial
//! lower bound on E[log(1 - prod nu)], coordinate updates for the Beta
//! parameters, and the stick/feature KL term.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::math::{digamma, ln_beta};

/// Truncated Beta posteriors q(nu_k) = Beta(gamma_k1, gamma_k2) plus the IBP
/// concentration alpha.
#[derive(Debug, Clone)]
pub struct StickPosterior {
    pub gamma: Vec<(f64, f64)>,
    pub alpha: f64,
}

impl StickPosterior {
    /// Prior-initialized posterior: gamma_k = (alpha, 1) for every stick.
    pub fn at_prior(k: usize, alpha: f64) -> Result<Self> {
        if k < 1 {
            return Err(Error::InvalidArgument("truncation level must be >= 1".to_string()));
        }
        if alpha <= 0.0 {
            return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
        }
        Ok(StickPosterior {
            gamma: vec![(alpha, 1.0); k],
            alpha,
        })
    }

    pub fn truncation(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        for (k, &(a, b)) in self.gamma.iter().enumerate() {
            if !(a > 0.0 && b > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "Beta parameters must be positive, got gamma_{k} = ({a}, {b})"
                )));
            }
        }
        Ok(())
    }
}

/// The multinomial lower bound on E[log(1 - prod_{j<=k} nu_j)] together with
/// its auxiliary distribution q_k(m).
#[derive(Debug, Clone)]
pub struct TailBound {
    /// Column index (1-based).
    pub k: usize,
    /// The bound value L_k.
    pub value: f64,
    /// Auxiliary multinomial over m = 1..=k.
    pub q: Vec<f64>,
}

/// E[log nu_k] = digamma(gamma_k1) - digamma(gamma_k1 + gamma_k2), per stick.
pub fn expected_log_nu(sp: &StickPosterior) -> Result<Vec<f64>> {
    sp.validate()?;
    Ok(sp
        .gamma
        .iter()
        .map(|&(a, b)| digamma(a) - digamma(a + b))
        .collect())
}

/// Lower bound on E[log(1 - prod_{j<=k} nu_j)] via the auxiliary multinomial;
/// exact for k = 1.
pub fn tail_bound(sp: &StickPosterior, k: usize) -> Result<TailBound> {
    sp.validate()?;
    if k < 1 || k > sp.truncation() {
        return Err(Error::InvalidArgument(format!(
            "tail bound index {k} out of range 1..={}",
            sp.truncation()
        )));
    }
    // log q(m) up to normalization:
    //   digamma(g_m2) + sum_{j<m} digamma(g_j1) - sum_{j<=m} digamma(g_j1+g_j2)
    let mut exponents = Vec::with_capacity(k);
    let mut sum_dg1 = 0.0;
    let mut sum_dg12 = 0.0;
    for m in 0..k {
        let (a, b) = sp.gamma[m];
        sum_dg12 += digamma(a + b);
        exponents.push(digamma(b) + sum_dg1 - sum_dg12);
        sum_dg1 += digamma(a);
    }
    let max = exponents.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut q: Vec<f64> = exponents.iter().map(|&e| (e - max).exp()).collect();
    let z: f64 = q.iter().sum();
    for v in &mut q {
        *v /= z;
    }
    let mut value = 0.0;
    for (qm, &e) in q.iter().zip(&exponents) {
        if *qm > 0.0 {
            value += qm * e - qm * qm.ln();
        }
    }
    Ok(TailBound { k, value, q })
}

/// All tail bounds 1..=K in one pass (the auxiliary exponents are shared).
pub fn tail_bounds(sp: &StickPosterior) -> Result<Vec<TailBound>> {
    (1..=sp.truncation()).map(|k| tail_bound(sp, k)).collect()
}

/// Closed-form coordinate update of the Beta parameters given the current
/// feature posterior (psi is N x K, Bernoulli means).
pub fn update_gamma(sp: &StickPosterior, psi: &Array2<f64>) -> Result<StickPosterior> {
    sp.validate()?;
    let k_trunc = sp.truncation();
    if psi.ncols() != k_trunc {
        return Err(Error::DimensionMismatch(format!(
            "psi has {} columns, stick posterior truncation is {k_trunc}",
            psi.ncols()
        )));
    }
    let n = psi.nrows() as f64;
    let col_sums: Vec<f64> = (0..k_trunc).map(|k| psi.column(k).sum()).collect();
    let bounds = tail_bounds(sp)?;

    let mut gamma = Vec::with_capacity(k_trunc);
    for k in 0..k_trunc {
        let mut g1 = sp.alpha;
        for &s in &col_sums[k..] {
            g1 += s;
        }
        for m in (k + 1)..k_trunc {
            // Tail mass of q_m above index k (1-based: sum_{j=k+2}^{m+1} in
            // 0-based q terms is q[k+1..]).
            let tail: f64 = bounds[m].q[(k + 1)..].iter().sum();
            g1 += (n - col_sums[m]) * tail;
        }
        let mut g2 = 1.0;
        for m in k..k_trunc {
            g2 += (n - col_sums[m]) * bounds[m].q[k];
        }
        gamma.push((g1, g2));
    }
    Ok(StickPosterior {
        gamma,
        alpha: sp.alpha,
    })
}

/// KL of the (nu, Z) part of the posterior against the IBP stick-breaking
/// prior, using the multinomial tail bound for the intractable term.
pub fn kl_stick(sp: &StickPosterior, psi: &Array2<f64>) -> Result<f64> {
    sp.validate()?;
    let k_trunc = sp.truncation();
    if psi.ncols() != k_trunc {
        return Err(Error::DimensionMismatch(format!(
            "psi has {} columns, stick posterior truncation is {k_trunc}",
            psi.ncols()
        )));
    }
    let mut kl = beta_kl_sum(sp);

    let elog = expected_log_nu(sp)?;
    let mut cum = Vec::with_capacity(k_trunc);
    let mut acc = 0.0;
    for &e in &elog {
        acc += e;
        cum.push(acc);
    }
    let bounds = tail_bounds(sp)?;

    for i in 0..psi.nrows() {
        for k in 0..k_trunc {
            let p = psi[[i, k]];
            kl += xlogx(p) + xlogx(1.0 - p) - p * cum[k] - (1.0 - p) * bounds[k].value;
        }
    }
    Ok(kl)
}

/// sum_k KL(Beta(gamma_k) || Beta(alpha, 1)); exactly zero at the prior.
pub fn beta_kl_sum(sp: &StickPosterior) -> f64 {
    sp.gamma
        .iter()
        .map(|&(a, b)| {
            // ln B(alpha, 1) = -ln alpha
            -sp.alpha.ln() - ln_beta(a, b)
                + (a - sp.alpha) * digamma(a)
                + (b - 1.0) * digamma(b)
                + (sp.alpha + 1.0 - a - b) * digamma(a + b)
        })
        .sum()
}

fn xlogx(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn sp_from(gamma: Vec<(f64, f64)>, alpha: f64) -> StickPosterior {
        StickPosterior { gamma, alpha }
    }

    #[test]
    fn expected_log_nu_uniform_is_minus_one() {
        let sp = sp_from(vec![(1.0, 1.0)], 1.0);
        let e = expected_log_nu(&sp).unwrap();
        assert!((e[0] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn expected_log_nu_concentrated_tends_to_zero() {
        let sp = sp_from(vec![(1e6, 1.0)], 1.0);
        let e = expected_log_nu(&sp).unwrap();
        assert!(e[0] < 0.0 && e[0] > -1e-5);
    }

    #[test]
    fn expected_log_nu_digamma_recurrence_case() {
        // digamma(2) - digamma(3) = -1/2
        let sp = sp_from(vec![(2.0, 1.0)], 1.0);
        let e = expected_log_nu(&sp).unwrap();
        assert!((e[0] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn expected_log_nu_all_negative_and_cumsum_decreasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let k = rng.random_range(1..8);
            let gamma: Vec<(f64, f64)> = (0..k)
                .map(|_| (rng.random_range(0.1..20.0), rng.random_range(0.1..20.0)))
                .collect();
            let sp = sp_from(gamma, 2.0);
            let e = expected_log_nu(&sp).unwrap();
            let mut prev = 0.0;
            let mut cum = 0.0;
            for &v in &e {
                assert!(v < 0.0);
                cum += v;
                assert!(cum < prev);
                prev = cum;
            }
        }
    }

    #[test]
    fn tail_bound_k1_exact_uniform() {
        let sp = sp_from(vec![(1.0, 1.0), (2.0, 3.0)], 1.0);
        let tb = tail_bound(&sp, 1).unwrap();
        assert!((tb.value + 1.0).abs() < 1e-12);
        assert_eq!(tb.q.len(), 1);
        assert!((tb.q[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn tail_bound_q_normalized() {
        let sp = sp_from(vec![(2.0, 1.0), (3.0, 2.0), (0.5, 0.7), (4.0, 1.0)], 2.0);
        for k in 1..=4 {
            let tb = tail_bound(&sp, k).unwrap();
            let s: f64 = tb.q.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(tb.q.iter().all(|&v| v >= 0.0));
        }
    }

    /// Monte-Carlo estimate of E[log(1 - prod_{j<=k} nu_j)].
    fn mc_log_one_minus_prod(
        sp: &StickPosterior,
        k: usize,
        n_samples: usize,
        rng: &mut impl Rng,
    ) -> (f64, f64) {
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n_samples {
            let mut prod = 1.0;
            for &(a, b) in &sp.gamma[..k] {
                prod *= sample_beta(a, b, rng);
            }
            let v = (1.0 - prod).max(1e-300).ln();
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / n_samples as f64;
        let var = (sumsq / n_samples as f64 - mean * mean).max(0.0);
        (mean, (var / n_samples as f64).sqrt())
    }

    fn sample_beta(a: f64, b: f64, rng: &mut impl Rng) -> f64 {
        // Johnk-free approach via two gammas.
        let x = sample_gamma(a, rng);
        let y = sample_gamma(b, rng);
        x / (x + y)
    }

    fn sample_gamma(shape: f64, rng: &mut impl Rng) -> f64 {
        // Marsaglia-Tsang, with the boost for shape < 1.
        if shape < 1.0 {
            let u: f64 = rng.random::<f64>().max(1e-300);
            return sample_gamma(shape + 1.0, rng) * u.powf(1.0 / shape);
        }
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / (9.0 * d).sqrt();
        loop {
            let x = normal(rng);
            let v = (1.0 + c * x).powi(3);
            if v <= 0.0 {
                continue;
            }
            let u: f64 = rng.random::<f64>().max(1e-300);
            if u.ln() < 0.5 * x * x + d - d * v + d * v.ln() {
                return d * v;
            }
        }
    }

    fn normal(rng: &mut impl Rng) -> f64 {
        let u1: f64 = rng.random::<f64>().max(1e-300);
        let u2: f64 = rng.random::<f64>();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    #[test]
    fn tail_bound_below_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sp = sp_from(vec![(2.0, 1.0), (2.0, 1.0), (2.0, 1.0)], 1.0);
        let tb = tail_bound(&sp, 3).unwrap();
        let (mc, se) = mc_log_one_minus_prod(&sp, 3, 100_000, &mut rng);
        assert!(
            tb.value <= mc + 3.0 * se,
            "bound {} exceeds MC {} +/- {}",
            tb.value,
            mc,
            se
        );
    }

    #[test]
    fn update_gamma_prior_recovery_on_empty_psi() {
        let sp = StickPosterior::at_prior(3, 2.5).unwrap();
        let psi = Array2::<f64>::zeros((0, 3));
        let out = update_gamma(&sp, &psi).unwrap();
        for &(a, b) in &out.gamma {
            assert!((a - 2.5).abs() < 1e-12);
            assert!((b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn update_gamma_all_ones_k1_is_conjugate() {
        let sp = StickPosterior::at_prior(1, 3.0).unwrap();
        let psi = Array2::<f64>::ones((7, 1));
        let out = update_gamma(&sp, &psi).unwrap();
        assert!((out.gamma[0].0 - 10.0).abs() < 1e-12);
        assert!((out.gamma[0].1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn update_gamma_bounds_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..30 {
            let k = rng.random_range(1..6);
            let n = rng.random_range(1..10);
            let alpha = rng.random_range(0.5..5.0);
            let gamma: Vec<(f64, f64)> = (0..k)
                .map(|_| (rng.random_range(0.2..10.0), rng.random_range(0.2..10.0)))
                .collect();
            let sp = sp_from(gamma, alpha);
            let psi = Array2::from_shape_fn((n, k), |_| rng.random::<f64>());
            let out = update_gamma(&sp, &psi).unwrap();
            for &(a, b) in &out.gamma {
                assert!(a >= alpha - 1e-12);
                assert!(b >= 1.0 - 1e-12);
            }
        }
    }

    #[test]
    fn kl_stick_beta_part_zero_at_prior() {
        let sp = StickPosterior::at_prior(4, 2.0).unwrap();
        assert!(beta_kl_sum(&sp).abs() < 1e-12);
    }

    #[test]
    fn beta_kl_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let k = rng.random_range(1..5);
            let gamma: Vec<(f64, f64)> = (0..k)
                .map(|_| (rng.random_range(0.2..15.0), rng.random_range(0.2..15.0)))
                .collect();
            let sp = sp_from(gamma, rng.random_range(0.5..5.0));
            assert!(beta_kl_sum(&sp) >= -1e-10);
        }
    }

    #[test]
    fn kl_stick_degenerate_psi_drops_entropy() {
        // psi in {0,1}: entropy terms vanish, leaving only cross terms.
        let sp = StickPosterior::at_prior(2, 1.0).unwrap();
        let psi = array![[1.0, 0.0]];
        let kl = kl_stick(&sp, &psi).unwrap();
        let elog = expected_log_nu(&sp).unwrap();
        let bounds = tail_bounds(&sp).unwrap();
        let expected = -elog[0] - bounds[1].value;
        assert!((kl - expected).abs() < 1e-12);
    }

    #[test]
    fn kl_stick_hand_case_k1() {
        // K=1, alpha=1, gamma=(1,1), psi=0.5:
        // Bernoulli part = log 0.5 - 0.5*(-1) - 0.5*(-1) = 1 - log 2.
        let sp = sp_from(vec![(1.0, 1.0)], 1.0);
        let psi = array![[0.5]];
        let kl = kl_stick(&sp, &psi).unwrap();
        let expected = 1.0 - 2f64.ln();
        assert!((kl - expected).abs() < 1e-12, "{kl} vs {expected}");
    }
}
