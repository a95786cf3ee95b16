//! Fully-Bayesian layer: Normal-Gamma hyperprior and hyperposterior updates,
//! posterior moments, and the adaptive-cost margins for the shifted SVM
//! subproblem.

use std::collections::HashSet;

use crate::data::{RelationalDataset, SplitMask, Triple};
use crate::error::{Error, Result};
use crate::model::{fit, Mode, TrainConfig, TrainedModel};

/// Normal-Gamma hyperprior over the shared weight mean mu and precision tau.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperPrior {
    pub mu0: f64,
    pub n0: f64,
    pub nu0: f64,
    pub s0: f64,
}

impl HyperPrior {
    /// The weak default: mu0 = 0, n0 = 1, nu0 = 2, S0 = 1.
    pub fn weak() -> Self {
        HyperPrior {
            mu0: 0.0,
            n0: 1.0,
            nu0: 2.0,
            s0: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.n0 > 0.0 && self.nu0 > 0.0 && self.s0 > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "hyperprior requires n0, nu0, S0 > 0, got ({}, {}, {})",
                self.n0, self.nu0, self.s0
            )));
        }
        Ok(())
    }
}

/// Normal-Gamma hyperposterior parameters.
#[derive(Debug, Clone, Copy)]
pub struct HyperPosterior {
    pub mu_t: f64,
    pub n_t: f64,
    pub nu_t: f64,
    pub s_t: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct HyperMoments {
    pub e_mu: f64,
    pub e_tau: f64,
    /// Undefined when nu_t <= 2.
    pub var_mu: Option<f64>,
}

/// Normal-Gamma update treating the weight posterior means as
/// pseudo-observations. `lambda_entries` are the K^2 entries of Lambda
/// (pooled over relations), `kappa_entries` the D entries of kappa;
/// `lambda_prec` is the shared Gaussian posterior precision that feeds the
/// variance corrections E[S_W] and E[S_eta].
pub fn update_hyper(
    lambda_entries: &[f64],
    kappa_entries: &[f64],
    lambda_prec: f64,
    prior: &HyperPrior,
) -> Result<HyperPosterior> {
    prior.validate()?;
    if !(lambda_prec > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "lambda_prec must be positive, got {lambda_prec}"
        )));
    }
    let cw = lambda_entries.len() as f64;
    let cd = kappa_entries.len() as f64;
    if cw + cd == 0.0 {
        return Err(Error::InvalidArgument("no weight entries to update from".to_string()));
    }
    // The Lambda and kappa entries are pseudo-observations of a single
    // shared mean, so the exact conjugate update pools them.
    let n = cw + cd;
    let sum: f64 = lambda_entries.iter().chain(kappa_entries).sum();
    let pooled_mean = sum / n;
    let total = n + prior.n0;

    let mu_t = (sum + prior.n0 * prior.mu0) / total;
    let n_t = prior.n0 + n;
    let nu_t = prior.nu0 + n;

    // E[sum (x - xbar)^2] under the entrywise Gaussian posterior with shared
    // precision: scatter of the means plus (n - 1)/lambda.
    let scatter: f64 = lambda_entries
        .iter()
        .chain(kappa_entries)
        .map(|&x| (x - pooled_mean) * (x - pooled_mean))
        .sum();
    let e_s = scatter + (n - 1.0).max(0.0) / lambda_prec;
    let d = pooled_mean - prior.mu0;
    let s_t = e_s + prior.s0 + prior.n0 * n * d * d / total;

    Ok(HyperPosterior {
        mu_t,
        n_t,
        nu_t,
        s_t,
    })
}

/// E[mu] = mu_t, E[tau] = nu_t / S_t, Var(mu) = S_t / (n_t (nu_t - 2)).
pub fn hyper_moments(hp: &HyperPosterior) -> HyperMoments {
    HyperMoments {
        e_mu: hp.mu_t,
        e_tau: hp.nu_t / hp.s_t,
        var_mu: if hp.nu_t > 2.0 {
            Some(hp.s_t / (hp.n_t * (hp.nu_t - 2.0)))
        } else {
            None
        },
    }
}

/// Adaptive cost ell_ij = ell - E[mu] Y_ij (Tr(E Zbar_ij) + e^T X_ij), where
/// Tr(E Zbar_ij) is the sum of all Zbar entries. May be negative.
pub fn adaptive_margin(e_mu: f64, ell: f64, y: f64, zbar_sum: f64, x_sum: f64) -> f64 {
    ell - e_mu * y * (zbar_sum + x_sum)
}

/// Vector form over a set of links.
pub fn adaptive_margins(
    e_mu: f64,
    ell: f64,
    labels: &[f64],
    zbar_sums: &[f64],
    x_sums: &[f64],
) -> Result<Vec<f64>> {
    if labels.len() != zbar_sums.len() || labels.len() != x_sums.len() {
        return Err(Error::DimensionMismatch(
            "labels/zbar_sums/x_sums lengths differ".to_string(),
        ));
    }
    Ok(labels
        .iter()
        .zip(zbar_sums)
        .zip(x_sums)
        .map(|((&y, &z), &x)| adaptive_margin(e_mu, ell, y, z, x))
        .collect())
}

/// Fits the fully-Bayesian variant; identical outer loop to `model::fit`
/// with the shifted adaptive-cost SVM substep and Normal-Gamma refresh.
pub fn fit_bayes(
    ds: &RelationalDataset,
    split: &SplitMask,
    config: &TrainConfig,
    probe: Option<&HashSet<Triple>>,
) -> Result<TrainedModel> {
    if config.mode != Mode::BayesMedLfrm {
        return Err(Error::Config("fit_bayes requires mode = bayes_med_lfrm".to_string()));
    }
    fit(ds, split, config, probe)
}
