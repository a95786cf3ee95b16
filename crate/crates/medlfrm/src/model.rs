//! MedLFRM assembly: expected discriminant with diagonal correction, hinge
//! risk, exact psi-subgradient, the psi coordinate update, the alternating
//! outer loop, the variational objective, and prediction.

use std::collections::HashSet;

use ndarray::{Array1, Array2, ArrayView1};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::bayes::{hyper_moments, update_hyper, HyperPosterior, HyperPrior};
use crate::data::{auc, RelationalDataset, SplitMask, Triple};
use crate::error::{Error, Result};
use crate::stick::{expected_log_nu, kl_stick, tail_bounds, update_gamma, StickPosterior};
use crate::svm::{self, ConvergenceStatus, SvmProblem};

/// N x K Bernoulli means of q(Z).
#[derive(Debug, Clone)]
pub struct FeaturePosterior {
    pub psi: Array2<f64>,
}

impl FeaturePosterior {
    pub fn validate(&self) -> Result<()> {
        if self.psi.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Validation("psi entries must lie in [0,1]".to_string()));
        }
        Ok(())
    }
}

/// Gaussian posterior means for one relation's weights: Lambda (K x K) over
/// the feature interactions and kappa (D) over the side features.
#[derive(Debug, Clone)]
pub struct WeightPosterior {
    pub lambda: Array2<f64>,
    pub kappa: Array1<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    MedLfrm,
    BayesMedLfrm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    Single,
    Global,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Truncation level K.
    pub k: usize,
    /// IBP concentration.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Risk weight C (MedLFRM only; the Bayes variant infers it).
    #[serde(default = "default_c")]
    pub c: f64,
    /// C+ / C- cost ratio for imbalanced data; 1.0 disables it.
    #[serde(default = "default_ratio")]
    pub pos_cost_ratio: f64,
    /// Margin cost.
    #[serde(default = "default_ell")]
    pub ell: f64,
    #[serde(default = "default_max_outer")]
    pub max_outer: usize,
    #[serde(default = "default_psi_sweeps")]
    pub psi_sweeps: usize,
    #[serde(default = "default_svm_tol")]
    pub svm_tol: f64,
    #[serde(default = "default_obj_tol")]
    pub obj_tol: f64,
    #[serde(default)]
    pub seed: u64,
    pub mode: Mode,
    #[serde(default)]
    pub symmetric: bool,
    #[serde(default = "default_setting")]
    pub setting: Setting,
    #[serde(default = "HyperPrior::weak")]
    pub hyper_prior: HyperPrior,
}

fn default_alpha() -> f64 {
    3.0
}
fn default_c() -> f64 {
    1.0
}
fn default_ratio() -> f64 {
    1.0
}
fn default_ell() -> f64 {
    9.0
}
fn default_max_outer() -> usize {
    50
}
fn default_psi_sweeps() -> usize {
    1
}
fn default_svm_tol() -> f64 {
    1e-4
}
fn default_obj_tol() -> f64 {
    1e-4
}
fn default_setting() -> Setting {
    Setting::Global
}

impl TrainConfig {
    pub fn new(k: usize, mode: Mode) -> Self {
        TrainConfig {
            k,
            alpha: default_alpha(),
            c: default_c(),
            pos_cost_ratio: default_ratio(),
            ell: default_ell(),
            max_outer: default_max_outer(),
            psi_sweeps: default_psi_sweeps(),
            svm_tol: default_svm_tol(),
            obj_tol: default_obj_tol(),
            seed: 0,
            mode,
            symmetric: false,
            setting: default_setting(),
            hyper_prior: HyperPrior::weak(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Config("truncation level K must be >= 1".to_string()));
        }
        if self.mode == Mode::MedLfrm && !(self.c > 0.0) {
            return Err(Error::Config(format!("C must be positive, got {}", self.c)));
        }
        if !(self.ell > 0.0) {
            return Err(Error::Config(format!("ell must be positive, got {}", self.ell)));
        }
        if !(self.pos_cost_ratio > 0.0) {
            return Err(Error::Config("pos_cost_ratio must be positive".to_string()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config("alpha must be positive".to_string()));
        }
        self.hyper_prior.validate()
    }
}

/// Mutable inference state shared by both model variants.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub features: FeaturePosterior,
    /// One weight posterior per relation.
    pub weights: Vec<WeightPosterior>,
    pub sticks: StickPosterior,
    /// Shared posterior precision lambda: 1 for MedLFRM, E[tau] for the
    /// Bayes variant.
    pub lambda_prec: f64,
    /// Prior mean shift E[mu]: 0 for MedLFRM.
    pub e_mu: f64,
    pub symmetric: bool,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub objective: f64,
    pub hinge_risk: f64,
    pub test_auc: Option<f64>,
    pub active_features: usize,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub state: ModelState,
    pub hyper: Option<HyperPosterior>,
    pub trace: Vec<TraceRecord>,
    pub converged: bool,
    /// False when any inner SVM solve hit its sweep limit.
    pub svm_clean: bool,
}

/// E[Z_i W Z_j^T] under the mean-field posterior. When `same_entity`, the
/// diagonal uses E[Z_ik^2] = psi_ik instead of psi_ik^2.
pub fn tr_term(
    lambda: &Array2<f64>,
    psi_i: ArrayView1<f64>,
    psi_j: ArrayView1<f64>,
    same_entity: bool,
) -> Result<f64> {
    let k = lambda.nrows();
    if lambda.ncols() != k || psi_i.len() != k || psi_j.len() != k {
        return Err(Error::DimensionMismatch(format!(
            "tr_term: Lambda {}x{}, psi_i {}, psi_j {}",
            lambda.nrows(),
            lambda.ncols(),
            psi_i.len(),
            psi_j.len()
        )));
    }
    let mut v = psi_i.dot(&lambda.dot(&psi_j));
    if same_entity {
        for kk in 0..k {
            v += lambda[[kk, kk]] * psi_i[kk] * (1.0 - psi_i[kk]);
        }
    }
    Ok(v)
}

/// Expected discriminant f(X_ij) for one pair under one relation.
pub fn discriminant(
    state: &ModelState,
    relation: usize,
    i: usize,
    j: usize,
    x_ij: Option<&[f64]>,
) -> Result<f64> {
    let w = state
        .weights
        .get(relation)
        .ok_or_else(|| Error::InvalidArgument(format!("relation {relation} out of range")))?;
    let psi = &state.features.psi;
    if i >= psi.nrows() || j >= psi.nrows() {
        return Err(Error::InvalidArgument(format!("entity index ({i},{j}) out of range")));
    }
    let mut f = tr_term(&w.lambda, psi.row(i), psi.row(j), i == j)?;
    if let Some(x) = x_ij {
        for (kd, &xd) in w.kappa.iter().zip(x) {
            f += kd * xd;
        }
    }
    Ok(f)
}

/// Observed links with per-entity adjacency, precomputed once per fit.
#[derive(Debug, Clone)]
pub struct ObservedLinks {
    pub links: Vec<ObservedLink>,
    /// Outgoing (i,j), i != j: indices into `links`, keyed by i.
    outgoing: Vec<Vec<usize>>,
    /// Incoming (j,i), j != i: indices into `links`, keyed by i.
    incoming: Vec<Vec<usize>>,
    /// Self links (i,i): indices into `links`, keyed by i.
    selfs: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct ObservedLink {
    pub relation: usize,
    pub i: usize,
    pub j: usize,
    pub y: f64,
    pub x: Option<Vec<f64>>,
}

impl ObservedLinks {
    pub fn build(ds: &RelationalDataset, observed: &HashSet<Triple>) -> Self {
        let mut links = Vec::with_capacity(observed.len());
        let mut outgoing = vec![Vec::new(); ds.n_entities];
        let mut incoming = vec![Vec::new(); ds.n_entities];
        let mut selfs = vec![Vec::new(); ds.n_entities];
        for l in &ds.links {
            if !observed.contains(&(l.relation, l.i, l.j)) {
                continue;
            }
            let x = ds
                .pair_features
                .as_ref()
                .and_then(|pf| pf.get(l.i, l.j))
                .map(|v| v.to_vec());
            let idx = links.len();
            links.push(ObservedLink {
                relation: l.relation,
                i: l.i,
                j: l.j,
                y: l.y as f64,
                x,
            });
            if l.i == l.j {
                selfs[l.i].push(idx);
            } else {
                outgoing[l.i].push(idx);
                incoming[l.j].push(idx);
            }
        }
        ObservedLinks {
            links,
            outgoing,
            incoming,
            selfs,
        }
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }
}

fn link_score(state: &ModelState, l: &ObservedLink) -> f64 {
    discriminant(state, l.relation, l.i, l.j, l.x.as_deref()).expect("consistent state")
}

/// Unweighted hinge risk sum_{(i,j) in I} max(0, ell - Y_ij f(X_ij)).
pub fn hinge_risk(state: &ModelState, obs: &ObservedLinks, ell: f64) -> f64 {
    obs.links
        .iter()
        .map(|l| (ell - l.y * link_score(state, l)).max(0.0))
        .sum()
}

/// Hinge risk with the imbalance weights rho (ratio for positives, 1 for
/// negatives); equals `hinge_risk` when ratio = 1.
pub fn hinge_risk_weighted(state: &ModelState, obs: &ObservedLinks, ell: f64, ratio: f64) -> f64 {
    obs.links
        .iter()
        .map(|l| {
            let rho = if l.y > 0.0 { ratio } else { 1.0 };
            rho * (ell - l.y * link_score(state, l)).max(0.0)
        })
        .sum()
}

/// Exact subgradient of the (rho-weighted) hinge risk in psi_ik, with the
/// active sets evaluated at the current state.
pub fn psi_gradient(
    state: &ModelState,
    obs: &ObservedLinks,
    entity: usize,
    feature: usize,
    ell: f64,
    ratio: f64,
) -> Result<f64> {
    let psi = &state.features.psi;
    if entity >= psi.nrows() || feature >= psi.ncols() {
        return Err(Error::InvalidArgument(format!(
            "psi index ({entity},{feature}) out of range"
        )));
    }
    let active = ActiveSets::for_entity(state, obs, entity, ell);
    Ok(active.gradient(state, obs, entity, feature, ratio))
}

/// Active link indices for one entity, frozen across that entity's psi
/// coordinate updates.
struct ActiveSets {
    outgoing: Vec<usize>,
    incoming: Vec<usize>,
    selfs: Vec<usize>,
}

impl ActiveSets {
    fn for_entity(state: &ModelState, obs: &ObservedLinks, entity: usize, ell: f64) -> Self {
        let is_active = |idx: &usize| {
            let l = &obs.links[*idx];
            l.y * link_score(state, l) <= ell
        };
        ActiveSets {
            outgoing: obs.outgoing[entity].iter().copied().filter(|i| is_active(i)).collect(),
            incoming: obs.incoming[entity].iter().copied().filter(|i| is_active(i)).collect(),
            selfs: obs.selfs[entity].iter().copied().filter(|i| is_active(i)).collect(),
        }
    }

    fn gradient(
        &self,
        state: &ModelState,
        obs: &ObservedLinks,
        entity: usize,
        feature: usize,
        ratio: f64,
    ) -> f64 {
        let psi = &state.features.psi;
        let k = feature;
        let mut g = 0.0;
        for &idx in &self.outgoing {
            let l = &obs.links[idx];
            let lam = &state.weights[l.relation].lambda;
            let rho = if l.y > 0.0 { ratio } else { 1.0 };
            g -= rho * l.y * lam.row(k).dot(&psi.row(l.j));
        }
        for &idx in &self.incoming {
            let l = &obs.links[idx];
            let lam = &state.weights[l.relation].lambda;
            let rho = if l.y > 0.0 { ratio } else { 1.0 };
            g -= rho * l.y * psi.row(l.i).dot(&lam.column(k));
        }
        for &idx in &self.selfs {
            let l = &obs.links[idx];
            let lam = &state.weights[l.relation].lambda;
            let rho = if l.y > 0.0 { ratio } else { 1.0 };
            let lkk = lam[[k, k]];
            let d = lam.row(k).dot(&psi.row(entity)) + psi.row(entity).dot(&lam.column(k))
                - 2.0 * lkk * psi[[entity, k]]
                + lkk;
            g -= rho * l.y * d;
        }
        g
    }
}

/// Variational objective: stick/feature KL + weight KL + C * weighted risk.
/// Normalization constants are dropped consistently across iterations.
pub fn objective(state: &ModelState, obs: &ObservedLinks, config: &TrainConfig) -> f64 {
    let kl_nu_z = kl_stick(&state.sticks, &state.features.psi).expect("consistent state");
    let mut kl_theta = 0.0;
    for w in &state.weights {
        let mut sq = 0.0;
        for &v in w.lambda.iter() {
            let d = v - state.e_mu;
            sq += d * d;
        }
        for &v in w.kappa.iter() {
            let d = v - state.e_mu;
            sq += d * d;
        }
        kl_theta += 0.5 * state.lambda_prec * sq;
    }
    let c_eff = match config.mode {
        Mode::MedLfrm => config.c,
        Mode::BayesMedLfrm => 1.0,
    };
    kl_nu_z + kl_theta + c_eff * hinge_risk_weighted(state, obs, config.ell, config.pos_cost_ratio)
}

// -- feature map ------------------------------------------------------------

fn feat_len(k: usize, d: usize, symmetric: bool) -> usize {
    if symmetric {
        k * (k + 1) / 2 + d
    } else {
        k * k + d
    }
}

/// Flattened expected feature matrix Zbar_ij (plus side features) such that
/// <weights, phi_ij> = tr_term(Lambda, psi_i, psi_j) + kappa . X_ij.
/// In symmetric mode the map folds (k,k') and (k',k) together, which makes
/// the recovered Lambda symmetric by construction.
fn phi_features(
    psi: &Array2<f64>,
    i: usize,
    j: usize,
    x: Option<&[f64]>,
    d: usize,
    symmetric: bool,
) -> Vec<f64> {
    let k = psi.ncols();
    let mut phi = Vec::with_capacity(feat_len(k, d, symmetric));
    let zbar = |a: usize, b: usize| -> f64 {
        if i == j && a == b {
            psi[[i, a]]
        } else {
            psi[[i, a]] * psi[[j, b]]
        }
    };
    if symmetric {
        for a in 0..k {
            phi.push(zbar(a, a));
            for b in (a + 1)..k {
                phi.push(zbar(a, b) + zbar(b, a));
            }
        }
    } else {
        for a in 0..k {
            for b in 0..k {
                phi.push(zbar(a, b));
            }
        }
    }
    match x {
        Some(xv) => phi.extend_from_slice(&xv[..d]),
        None => phi.extend(std::iter::repeat(0.0).take(d)),
    }
    phi
}

/// Inverse of the feature map on the weight side.
fn unflatten_weights(w: &[f64], k: usize, d: usize, symmetric: bool) -> WeightPosterior {
    let mut lambda = Array2::<f64>::zeros((k, k));
    let mut pos = 0;
    if symmetric {
        for a in 0..k {
            lambda[[a, a]] = w[pos];
            pos += 1;
            for b in (a + 1)..k {
                lambda[[a, b]] = w[pos];
                lambda[[b, a]] = w[pos];
                pos += 1;
            }
        }
    } else {
        for a in 0..k {
            for b in 0..k {
                lambda[[a, b]] = w[pos];
                pos += 1;
            }
        }
    }
    let kappa = Array1::from_iter(w[pos..pos + d].iter().copied());
    WeightPosterior { lambda, kappa }
}

// -- fitting ----------------------------------------------------------------

pub fn init_state(
    ds: &RelationalDataset,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ModelState> {
    let k = config.k;
    let d = ds.feature_dim();
    let psi = Array2::from_shape_fn((ds.n_entities, k), |_| 0.05 + 0.9 * rng.random::<f64>());
    let weights = (0..ds.n_relations)
        .map(|_| WeightPosterior {
            lambda: Array2::from_shape_fn((k, k), |_| rng.random::<f64>() * 0.1),
            kappa: Array1::zeros(d),
        })
        .collect();
    Ok(ModelState {
        features: FeaturePosterior { psi },
        weights,
        sticks: StickPosterior::at_prior(k, config.alpha)?,
        lambda_prec: 1.0,
        e_mu: 0.0,
        symmetric: config.symmetric,
    })
}

/// One p(Theta) substep: per-relation SVM solves over the current expected
/// features, with warm-started duals. Returns false if any solve hit its
/// sweep limit.
fn theta_substep(
    state: &mut ModelState,
    obs: &ObservedLinks,
    config: &TrainConfig,
    warm: &mut Vec<Vec<f64>>,
    lambda_prec: f64,
    e_mu: f64,
    adaptive: bool,
) -> Result<bool> {
    let psi = state.features.psi.clone();
    let k = psi.ncols();
    let d = state.weights[0].kappa.len();
    let n_rel = state.weights.len();
    let mut clean = true;

    for rel in 0..n_rel {
        let idxs: Vec<usize> = (0..obs.links.len())
            .filter(|&m| obs.links[m].relation == rel)
            .collect();
        if idxs.is_empty() {
            continue;
        }
        let mut features = Vec::with_capacity(idxs.len());
        let mut labels = Vec::with_capacity(idxs.len());
        let mut margins = Vec::with_capacity(idxs.len());
        let mut boxes = Vec::with_capacity(idxs.len());
        for &m in &idxs {
            let l = &obs.links[m];
            let phi = phi_features(&psi, l.i, l.j, l.x.as_deref(), d, config.symmetric);
            let rho = if l.y > 0.0 { config.pos_cost_ratio } else { 1.0 };
            let margin = if adaptive {
                // The folded symmetric map already sums mirrored Zbar
                // entries once each, so either map's prefix sums to
                // Tr(E Zbar_ij).
                let zbar_sum: f64 = phi[..feat_len(k, 0, config.symmetric)].iter().sum();
                let x_sum = l.x.as_deref().map_or(0.0, |xv| xv.iter().sum());
                crate::bayes::adaptive_margin(e_mu, config.ell, l.y, zbar_sum, x_sum)
            } else {
                config.ell
            };
            let box_m = match config.mode {
                Mode::MedLfrm => config.c * rho,
                Mode::BayesMedLfrm => rho / lambda_prec,
            };
            features.push(phi);
            labels.push(l.y);
            margins.push(margin);
            boxes.push(box_m);
        }
        let mut prob = SvmProblem::new(features, labels, margins, boxes)?;
        prob.tol = config.svm_tol;
        let warm_ref = if warm[rel].len() == idxs.len() {
            Some(warm[rel].as_slice())
        } else {
            None
        };
        // Boxes can shrink between iterations (Bayes lambda refresh); clamp
        // warm duals into the new boxes.
        let clamped;
        let warm_ref = match warm_ref {
            Some(w) => {
                clamped = w
                    .iter()
                    .zip(&prob.boxes)
                    .map(|(&v, &b)| v.clamp(0.0, b))
                    .collect::<Vec<f64>>();
                Some(clamped.as_slice())
            }
            None => None,
        };
        let sol = svm::solve(&prob, warm_ref)?;
        if sol.status != ConvergenceStatus::Converged {
            clean = false;
        }
        warm[rel] = sol.duals.clone();
        let mut wp = unflatten_weights(&sol.weights, k, d, config.symmetric);
        if adaptive {
            // Recover Lambda = Lambda' + E[mu] E, kappa = kappa' + E[mu] e.
            wp.lambda.mapv_inplace(|v| v + e_mu);
            wp.kappa.mapv_inplace(|v| v + e_mu);
        }
        state.weights[rel] = wp;
    }
    Ok(clean)
}

/// One incident hinge term, affinely parameterized by the coordinate being
/// updated: f(t) = intercept + slope * t.
struct IncidentTerm {
    y: f64,
    rho: f64,
    intercept: f64,
    slope: f64,
}

/// Exact minimizer in t of
///   t log t + (1-t) log(1-t) - prior_logit * t
///   + c_eff * sum_m rho_m * max(0, ell - y_m (intercept_m + slope_m t))
/// over (0,1). The summand is convex piecewise-linear and the entropy part is
/// strictly convex, so the one-sided derivative is nondecreasing and a
/// bisection on it finds the unique minimizer. The solution satisfies the
/// stationarity condition psi = sigmoid(prior_logit - C * dR) with the
/// subgradient taken at the solution itself.
fn solve_psi_coordinate(prior_logit: f64, c_eff: f64, ell: f64, terms: &[IncidentTerm]) -> f64 {
    let grad = |t: f64| -> f64 {
        let mut g = (t / (1.0 - t)).ln() - prior_logit;
        for m in terms {
            if m.y * (m.intercept + m.slope * t) <= ell {
                g -= c_eff * m.rho * m.y * m.slope;
            }
        }
        g
    };
    let (mut lo, mut hi) = (1e-12, 1.0 - 1e-12);
    if grad(lo) >= 0.0 {
        return lo;
    }
    if grad(hi) <= 0.0 {
        return hi;
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if grad(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Build the affine incident-link terms for coordinate (entity, k) from the
/// current state.
fn incident_terms(
    state: &ModelState,
    obs: &ObservedLinks,
    entity: usize,
    k: usize,
    ratio: f64,
) -> Vec<IncidentTerm> {
    let psi = &state.features.psi;
    let t_cur = psi[[entity, k]];
    let mut terms = Vec::new();
    let mut push = |idx: usize, slope: f64| {
        let l = &obs.links[idx];
        let f = link_score(state, l);
        terms.push(IncidentTerm {
            y: l.y,
            rho: if l.y > 0.0 { ratio } else { 1.0 },
            intercept: f - slope * t_cur,
            slope,
        });
    };
    for &idx in &obs.outgoing[entity] {
        let l = &obs.links[idx];
        let lam = &state.weights[l.relation].lambda;
        push(idx, lam.row(k).dot(&psi.row(l.j)));
    }
    for &idx in &obs.incoming[entity] {
        let l = &obs.links[idx];
        let lam = &state.weights[l.relation].lambda;
        push(idx, psi.row(l.i).dot(&lam.column(k)));
    }
    for &idx in &obs.selfs[entity] {
        let l = &obs.links[idx];
        let lam = &state.weights[l.relation].lambda;
        let lkk = lam[[k, k]];
        // Independent of the current psi_ik: the two dot products each carry
        // one lkk * psi_ik term that the -2 lkk psi_ik cancels.
        let slope = lam.row(k).dot(&psi.row(entity)) + psi.row(entity).dot(&lam.column(k))
            - 2.0 * lkk * t_cur
            + lkk;
        push(idx, slope);
    }
    terms
}

/// One full sweep of exact psi coordinate updates, entity by entity, each
/// coordinate minimized against the live state (so the objective is
/// nonincreasing across the sweep up to floating-point noise).
fn psi_sweep(state: &mut ModelState, obs: &ObservedLinks, config: &TrainConfig) -> Result<()> {
    let elog = expected_log_nu(&state.sticks)?;
    let bounds = tail_bounds(&state.sticks)?;
    let k_trunc = state.features.psi.ncols();
    let mut prior_logit = Vec::with_capacity(k_trunc);
    let mut cum = 0.0;
    for k in 0..k_trunc {
        cum += elog[k];
        prior_logit.push(cum - bounds[k].value);
    }
    let c_eff = match config.mode {
        Mode::MedLfrm => config.c,
        Mode::BayesMedLfrm => 1.0,
    };
    for i in 0..state.features.psi.nrows() {
        for k in 0..k_trunc {
            let terms = incident_terms(state, obs, i, k, config.pos_cost_ratio);
            state.features.psi[[i, k]] =
                solve_psi_coordinate(prior_logit[k], c_eff, config.ell, &terms);
        }
    }
    Ok(())
}

/// Single-coordinate psi update used by the sweep, exposed for testing: the
/// returned value satisfies psi = sigmoid(prior_logit - C * subgradient) with
/// the risk subgradient evaluated at the returned point.
pub fn update_psi(
    state: &ModelState,
    obs: &ObservedLinks,
    entity: usize,
    feature: usize,
    config: &TrainConfig,
) -> Result<f64> {
    let psi = &state.features.psi;
    if entity >= psi.nrows() || feature >= psi.ncols() {
        return Err(Error::InvalidArgument(format!(
            "psi index ({entity},{feature}) out of range"
        )));
    }
    let elog = expected_log_nu(&state.sticks)?;
    let bounds = tail_bounds(&state.sticks)?;
    let cum: f64 = elog[..=feature].iter().sum();
    let prior_logit = cum - bounds[feature].value;
    let c_eff = match config.mode {
        Mode::MedLfrm => config.c,
        Mode::BayesMedLfrm => 1.0,
    };
    let terms = incident_terms(state, obs, entity, feature, config.pos_cost_ratio);
    Ok(solve_psi_coordinate(prior_logit, c_eff, config.ell, &terms))
}

fn probe_auc(
    state: &ModelState,
    ds: &RelationalDataset,
    probe: &HashSet<Triple>,
) -> Option<f64> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for l in &ds.links {
        if probe.contains(&(l.relation, l.i, l.j)) {
            let x = ds.pair_features.as_ref().and_then(|pf| pf.get(l.i, l.j));
            scores.push(discriminant(state, l.relation, l.i, l.j, x).ok()?);
            labels.push(l.y);
        }
    }
    auc(&scores, &labels).ok()
}

fn active_feature_count(psi: &Array2<f64>) -> usize {
    (0..psi.ncols())
        .filter(|&k| psi.column(k).iter().any(|&p| p > 0.5))
        .count()
}

/// Alternating variational fit. Initializes Lambda ~ U[0, 0.1], kappa = 0,
/// psi ~ U[0.05, 0.95] (broad, to break the feature symmetry that traps the
/// alternation when all entities start identical), gamma = (alpha, 1), then
/// alternates the p(Theta) SVM substep with gamma and psi updates until the
/// relative objective change stays below tolerance or `max_outer` is reached.
pub fn fit(
    ds: &RelationalDataset,
    split: &SplitMask,
    config: &TrainConfig,
    probe: Option<&HashSet<Triple>>,
) -> Result<TrainedModel> {
    config.validate()?;
    if split.observed.is_empty() {
        return Err(Error::InvalidArgument("observed link set is empty".to_string()));
    }
    let obs = ObservedLinks::build(ds, &split.observed);
    if obs.is_empty() {
        return Err(Error::InvalidArgument(
            "no dataset links match the observed mask".to_string(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = init_state(ds, config, &mut rng)?;

    let bayes = config.mode == Mode::BayesMedLfrm;
    let mut hyper: Option<HyperPosterior> = None;
    if bayes {
        // Start from the prior moments: E[mu] = mu0, E[tau] = nu0 / S0.
        let p = &config.hyper_prior;
        state.e_mu = p.mu0;
        state.lambda_prec = p.nu0 / p.s0;
    }

    let mut warm: Vec<Vec<f64>> = vec![Vec::new(); ds.n_relations];
    let mut trace = Vec::new();
    let mut svm_clean = true;
    let mut converged = false;
    let mut prev_obj: Option<f64> = None;
    let mut stable_iters = 0;

    for iter in 0..config.max_outer {
        let (lambda_prec, e_mu) = (state.lambda_prec, state.e_mu);
        let clean = theta_substep(&mut state, &obs, config, &mut warm, lambda_prec, e_mu, bayes)?;
        svm_clean &= clean;

        if bayes {
            // Pool all relations' weights as pseudo-observations.
            let hp = update_hyper_pooled(&state, config)?;
            let m = hyper_moments(&hp);
            state.e_mu = m.e_mu;
            state.lambda_prec = m.e_tau;
            hyper = Some(hp);
        }

        state.sticks = update_gamma(&state.sticks, &state.features.psi)?;
        for _ in 0..config.psi_sweeps {
            psi_sweep(&mut state, &obs, config)?;
        }

        let obj = objective(&state, &obs, config);
        let risk = hinge_risk(&state, &obs, config.ell);
        let test_auc = probe.and_then(|p| probe_auc(&state, ds, p));
        trace.push(TraceRecord {
            iteration: iter,
            objective: obj,
            hinge_risk: risk,
            test_auc,
            active_features: active_feature_count(&state.features.psi),
        });

        if let Some(prev) = prev_obj {
            let rel = (obj - prev).abs() / prev.abs().max(1.0);
            if rel < config.obj_tol {
                stable_iters += 1;
                if stable_iters >= 3 {
                    converged = true;
                }
            } else {
                stable_iters = 0;
            }
        }
        prev_obj = Some(obj);
        if converged {
            break;
        }
    }

    state.features.validate()?;
    Ok(TrainedModel {
        state,
        hyper,
        trace,
        converged,
        svm_clean,
    })
}

/// Normal-Gamma hyperposterior over all relations' weights pooled as one set
/// of pseudo-observations.
fn update_hyper_pooled(state: &ModelState, config: &TrainConfig) -> Result<HyperPosterior> {
    let mut all = Vec::new();
    let mut kappa_all = Vec::new();
    for w in &state.weights {
        if config.symmetric {
            // Count each unordered weight once so duplicated mirror entries
            // do not double the evidence.
            let k = w.lambda.nrows();
            for a in 0..k {
                for b in a..k {
                    all.push(w.lambda[[a, b]]);
                }
            }
        } else {
            all.extend(w.lambda.iter().copied());
        }
        kappa_all.extend(w.kappa.iter().copied());
    }
    update_hyper(&all, &kappa_all, state.lambda_prec, &config.hyper_prior)
}

/// Scores (and sign predictions with sign(0) = -1) for a list of pairs.
pub fn predict(
    model: &TrainedModel,
    ds: &RelationalDataset,
    pairs: &[Triple],
) -> Result<Vec<(f64, i8)>> {
    pairs
        .iter()
        .map(|&(rel, i, j)| {
            let x = ds.pair_features.as_ref().and_then(|pf| pf.get(i, j));
            let s = discriminant(&model.state, rel, i, j, x)?;
            Ok((s, if s > 0.0 { 1 } else { -1 }))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::sigmoid;
    use ndarray::array;

    fn single_rel_state(lambda: Array2<f64>, psi: Array2<f64>) -> ModelState {
        let k = psi.ncols();
        ModelState {
            features: FeaturePosterior { psi },
            weights: vec![WeightPosterior {
                lambda,
                kappa: Array1::zeros(0),
            }],
            sticks: StickPosterior::at_prior(k, 1.0).unwrap(),
            lambda_prec: 1.0,
            e_mu: 0.0,
            symmetric: false,
        }
    }

    #[test]
    fn tr_term_deterministic_features() {
        let lam = array![[3.0, 1.0], [2.0, 5.0]];
        let psi_i = array![1.0, 0.0];
        let v = tr_term(&lam, psi_i.view(), psi_i.view(), false).unwrap();
        assert!((v - 3.0).abs() < 1e-15);
    }

    #[test]
    fn tr_term_same_entity_second_moment() {
        // K=1, psi=0.5, Lambda=2: E[Z^2] * 2 = 0.5 * 2 = 1.
        let lam = array![[2.0]];
        let psi = array![0.5];
        let v = tr_term(&lam, psi.view(), psi.view(), true).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
    }

    /// Exhaustive expectation over all binary configurations.
    fn enumerate_tr(lam: &Array2<f64>, psi_i: &[f64], psi_j: &[f64], same: bool) -> f64 {
        let k = psi_i.len();
        let prob = |z: usize, psi: &[f64]| -> f64 {
            (0..k)
                .map(|b| {
                    if z >> b & 1 == 1 {
                        psi[b]
                    } else {
                        1.0 - psi[b]
                    }
                })
                .product()
        };
        let bilinear = |zi: usize, zj: usize| -> f64 {
            let mut s = 0.0;
            for a in 0..k {
                for b in 0..k {
                    if zi >> a & 1 == 1 && zj >> b & 1 == 1 {
                        s += lam[[a, b]];
                    }
                }
            }
            s
        };
        let mut e = 0.0;
        if same {
            for z in 0..(1usize << k) {
                e += prob(z, psi_i) * bilinear(z, z);
            }
        } else {
            for zi in 0..(1usize << k) {
                for zj in 0..(1usize << k) {
                    e += prob(zi, psi_i) * prob(zj, psi_j) * bilinear(zi, zj);
                }
            }
        }
        e
    }

    #[test]
    fn tr_term_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..40 {
            let k = rng.random_range(1..=4);
            let lam = Array2::from_shape_fn((k, k), |_| rng.random_range(-2.0..2.0));
            let psi_i: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
            let psi_j: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
            let vi = Array1::from(psi_i.clone());
            let vj = Array1::from(psi_j.clone());
            let got = tr_term(&lam, vi.view(), vj.view(), false).unwrap();
            let want = enumerate_tr(&lam, &psi_i, &psi_j, false);
            assert!((got - want).abs() < 1e-12, "i!=j: {got} vs {want}");
            let got_same = tr_term(&lam, vi.view(), vi.view(), true).unwrap();
            let want_same = enumerate_tr(&lam, &psi_i, &psi_i, true);
            assert!((got_same - want_same).abs() < 1e-12, "i=j: {got_same} vs {want_same}");
        }
    }

    #[test]
    fn discriminant_zero_params_and_linearity() {
        let psi = array![[0.3, 0.8], [0.6, 0.1]];
        let mut state = single_rel_state(Array2::zeros((2, 2)), psi);
        assert_eq!(discriminant(&state, 0, 0, 1, None).unwrap(), 0.0);
        state.weights[0].lambda = array![[1.0, -0.5], [0.2, 2.0]];
        let f1 = discriminant(&state, 0, 0, 1, None).unwrap();
        state.weights[0].lambda.mapv_inplace(|v| 2.0 * v);
        let f2 = discriminant(&state, 0, 0, 1, None).unwrap();
        assert!((f2 - 2.0 * f1).abs() < 1e-12);
    }

    fn tiny_dataset() -> (RelationalDataset, SplitMask) {
        let mut ds = RelationalDataset::new(3, 1);
        ds.add_link(0, 0, 1, 1).unwrap();
        ds.add_link(0, 1, 2, -1).unwrap();
        ds.add_link(0, 2, 0, 1).unwrap();
        let mask = SplitMask::full(&ds);
        (ds, mask)
    }

    #[test]
    fn hinge_risk_zero_discriminant() {
        let (ds, mask) = tiny_dataset();
        let psi = Array2::from_elem((3, 2), 0.5);
        let state = single_rel_state(Array2::zeros((2, 2)), psi);
        let obs = ObservedLinks::build(&ds, &mask.observed);
        let ell = 9.0;
        assert!((hinge_risk(&state, &obs, ell) - 3.0 * ell).abs() < 1e-12);
    }

    #[test]
    fn psi_gradient_hand_case() {
        // K=1, one active outgoing link (0 -> 1), Y=+1, Lambda=(2), psi_1=0.5:
        // gradient = -Y * Lambda * psi_1 = -1.
        let mut ds = RelationalDataset::new(2, 1);
        ds.add_link(0, 0, 1, 1).unwrap();
        let mask = SplitMask::full(&ds);
        let obs = ObservedLinks::build(&ds, &mask.observed);
        let state = single_rel_state(array![[2.0]], array![[0.5], [0.5]]);
        let g = psi_gradient(&state, &obs, 0, 0, 9.0, 1.0).unwrap();
        assert!((g + 1.0).abs() < 1e-12, "got {g}");
    }

    #[test]
    fn psi_gradient_no_active_constraints() {
        let mut ds = RelationalDataset::new(2, 1);
        ds.add_link(0, 0, 1, 1).unwrap();
        let mask = SplitMask::full(&ds);
        let obs = ObservedLinks::build(&ds, &mask.observed);
        // Discriminant 100 >> ell, so the hinge is inactive.
        let state = single_rel_state(array![[400.0]], array![[0.5], [0.5]]);
        let g = psi_gradient(&state, &obs, 0, 0, 9.0, 1.0).unwrap();
        assert_eq!(g, 0.0);
    }

    fn random_state_and_obs(
        rng: &mut ChaCha8Rng,
        n: usize,
        k: usize,
    ) -> (RelationalDataset, ObservedLinks, ModelState) {
        let mut ds = RelationalDataset::new(n, 1);
        for i in 0..n {
            for j in 0..n {
                if i != j && rng.random::<f64>() < 0.6 {
                    let y = if rng.random::<bool>() { 1 } else { -1 };
                    ds.add_link(0, i, j, y).unwrap();
                }
            }
        }
        let mask = SplitMask::full(&ds);
        let obs = ObservedLinks::build(&ds, &mask.observed);
        let lam = Array2::from_shape_fn((k, k), |_| rng.random_range(-2.0..2.0));
        let psi = Array2::from_shape_fn((n, k), |_| rng.random_range(0.05..0.95));
        (ds, obs, single_rel_state(lam, psi))
    }

    #[test]
    fn psi_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let ell = 2.0;
        let mut checked = 0;
        while checked < 100 {
            let (_, obs, mut state) = random_state_and_obs(&mut rng, 5, 3);
            if obs.is_empty() {
                continue;
            }
            let i = rng.random_range(0..5);
            let k = rng.random_range(0..3);
            // Skip states near a hinge kink: the subgradient is not unique there.
            let near_kink = obs.links.iter().any(|l| {
                (l.y * link_score(&state, l) - ell).abs() < 1e-3
            });
            if near_kink {
                continue;
            }
            let g = psi_gradient(&state, &obs, i, k, ell, 1.0).unwrap();
            let h = 1e-6;
            let base = state.features.psi[[i, k]];
            state.features.psi[[i, k]] = base + h;
            let up = hinge_risk(&state, &obs, ell);
            state.features.psi[[i, k]] = base - h;
            let dn = hinge_risk(&state, &obs, ell);
            state.features.psi[[i, k]] = base;
            let fd = (up - dn) / (2.0 * h);
            let denom = fd.abs().max(g.abs()).max(1e-3);
            assert!(
                (g - fd).abs() / denom < 1e-5,
                "gradient {g} vs finite diff {fd}"
            );
            checked += 1;
        }
    }

    #[test]
    fn update_psi_sigmoid_at_zero() {
        assert_eq!(sigmoid(0.0), 0.5);
    }

    #[test]
    fn psi_sweep_with_zero_gradient_gives_prior_means() {
        // Zero Lambda but huge ell: every link active yet gradient is zero,
        // so psi becomes the prior mean, decreasing in k.
        let (ds, mask) = tiny_dataset();
        let obs = ObservedLinks::build(&ds, &mask.observed);
        let k = 4;
        let psi = Array2::from_elem((3, k), 0.5);
        let mut state = ModelState {
            features: FeaturePosterior { psi },
            weights: vec![WeightPosterior {
                lambda: Array2::zeros((k, k)),
                kappa: Array1::zeros(0),
            }],
            sticks: StickPosterior::at_prior(k, 2.0).unwrap(),
            lambda_prec: 1.0,
            e_mu: 0.0,
            symmetric: false,
        };
        let mut config = TrainConfig::new(k, Mode::MedLfrm);
        config.ell = 9.0;
        psi_sweep(&mut state, &obs, &config).unwrap();
        let elog = expected_log_nu(&state.sticks).unwrap();
        let bounds = tail_bounds(&state.sticks).unwrap();
        let mut cum = 0.0;
        let mut prev = 1.0;
        for kk in 0..k {
            cum += elog[kk];
            let expected = sigmoid(cum - bounds[kk].value);
            let got = state.features.psi[[0, kk]];
            assert!((got - expected).abs() < 1e-12);
            assert!((0.0..1.0).contains(&got));
            assert!(got <= prev + 1e-12, "prior mean should decrease in k");
            prev = got;
        }
    }

    #[test]
    fn psi_sweep_never_increases_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let (_, obs, mut state) = random_state_and_obs(&mut rng, 6, 3);
            if obs.is_empty() {
                continue;
            }
            let mut config = TrainConfig::new(3, Mode::MedLfrm);
            config.c = rng.random_range(0.1..3.0);
            config.ell = rng.random_range(0.5..5.0);
            let before = objective(&state, &obs, &config);
            psi_sweep(&mut state, &obs, &config).unwrap();
            let after = objective(&state, &obs, &config);
            assert!(
                after <= before + 1e-8 * before.abs().max(1.0),
                "sweep increased objective: {before} -> {after}"
            );
        }
    }

    #[test]
    fn update_psi_satisfies_stationarity() {
        // The coordinate minimizer solves psi = sigmoid(prior_logit - C * dR)
        // with the subgradient taken at the solution (away from kinks).
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut checked = 0;
        while checked < 50 {
            let (_, obs, mut state) = random_state_and_obs(&mut rng, 5, 3);
            if obs.is_empty() {
                continue;
            }
            let mut config = TrainConfig::new(3, Mode::MedLfrm);
            config.c = rng.random_range(0.1..2.0);
            config.ell = rng.random_range(0.5..4.0);
            let i = rng.random_range(0..5);
            let k = rng.random_range(0..3);
            let t = update_psi(&state, &obs, i, k, &config).unwrap();
            state.features.psi[[i, k]] = t;
            let near_kink = obs
                .links
                .iter()
                .any(|l| (l.y * link_score(&state, l) - config.ell).abs() < 1e-6);
            if near_kink || t < 1e-9 || t > 1.0 - 1e-9 {
                continue;
            }
            let g = psi_gradient(&state, &obs, i, k, config.ell, 1.0).unwrap();
            let elog = expected_log_nu(&state.sticks).unwrap();
            let bounds = tail_bounds(&state.sticks).unwrap();
            let cum: f64 = elog[..=k].iter().sum();
            let fixed_point = sigmoid(cum - bounds[k].value - config.c * g);
            assert!(
                (t - fixed_point).abs() < 1e-6,
                "stationarity violated: {t} vs {fixed_point}"
            );
            checked += 1;
        }
    }

    #[test]
    fn objective_hand_case_zero_params() {
        let (ds, mask) = tiny_dataset();
        let obs = ObservedLinks::build(&ds, &mask.observed);
        let k = 2;
        let psi = Array2::from_elem((3, k), 0.5);
        let state = ModelState {
            features: FeaturePosterior { psi: psi.clone() },
            weights: vec![WeightPosterior {
                lambda: Array2::zeros((k, k)),
                kappa: Array1::zeros(0),
            }],
            sticks: StickPosterior::at_prior(k, 2.0).unwrap(),
            lambda_prec: 1.0,
            e_mu: 0.0,
            symmetric: false,
        };
        let mut config = TrainConfig::new(k, Mode::MedLfrm);
        config.c = 1.5;
        config.ell = 9.0;
        let obj = objective(&state, &obs, &config);
        let expected = kl_stick(&state.sticks, &psi).unwrap() + 1.5 * 3.0 * 9.0;
        assert!((obj - expected).abs() < 1e-12);
    }

    #[test]
    fn fit_separable_single_link() {
        let mut ds = RelationalDataset::new(2, 1);
        ds.add_link(0, 0, 1, 1).unwrap();
        let mask = SplitMask::full(&ds);
        let mut config = TrainConfig::new(3, Mode::MedLfrm);
        config.c = 100.0;
        config.ell = 1.0;
        config.max_outer = 30;
        let model = fit(&ds, &mask, &config, None).unwrap();
        let x = None;
        let f = discriminant(&model.state, 0, 0, 1, x).unwrap();
        assert!(f >= 1.0 - 1e-3, "margin not met: f = {f}");
    }

    #[test]
    fn fit_is_deterministic() {
        let sd = crate::data::synth_generate(12, 3, 4, 0.4, 1.0).unwrap();
        let mask = crate::data::split_holdout(&sd.dataset, 0.2, 1).unwrap();
        let mut config = TrainConfig::new(4, Mode::MedLfrm);
        config.max_outer = 5;
        let m1 = fit(&sd.dataset, &mask, &config, Some(&mask.heldout)).unwrap();
        let m2 = fit(&sd.dataset, &mask, &config, Some(&mask.heldout)).unwrap();
        assert_eq!(m1.trace.len(), m2.trace.len());
        for (a, b) in m1.trace.iter().zip(&m2.trace) {
            assert_eq!(a.objective, b.objective);
            assert_eq!(a.hinge_risk, b.hinge_risk);
            assert_eq!(a.test_auc, b.test_auc);
        }
    }

    #[test]
    fn symmetric_mode_keeps_lambda_symmetric() {
        let sd = crate::data::synth_generate(10, 3, 2, 0.4, 1.0).unwrap();
        let mask = SplitMask::full(&sd.dataset);
        let mut config = TrainConfig::new(4, Mode::MedLfrm);
        config.symmetric = true;
        config.max_outer = 4;
        let model = fit(&sd.dataset, &mask, &config, None).unwrap();
        let lam = &model.state.weights[0].lambda;
        for a in 0..4 {
            for b in 0..4 {
                assert_eq!(lam[[a, b]], lam[[b, a]]);
            }
        }
        // Symmetric discriminant when X_ij = X_ji (here absent).
        let f_ij = discriminant(&model.state, 0, 1, 2, None).unwrap();
        let f_ji = discriminant(&model.state, 0, 2, 1, None).unwrap();
        assert!((f_ij - f_ji).abs() < 1e-12);
    }

    #[test]
    fn predict_zero_model_signs_negative() {
        let mut ds = RelationalDataset::new(2, 1);
        ds.add_link(0, 0, 1, 1).unwrap();
        let state = single_rel_state(Array2::zeros((2, 2)), Array2::from_elem((2, 2), 0.5));
        let model = TrainedModel {
            state,
            hyper: None,
            trace: vec![],
            converged: true,
            svm_clean: true,
        };
        let preds = predict(&model, &ds, &[(0, 0, 1), (0, 1, 0)]).unwrap();
        for (s, sign) in preds {
            assert_eq!(s, 0.0);
            assert_eq!(sign, -1);
        }
    }

    #[test]
    fn theta_substep_never_increases_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..10 {
            let sd = crate::data::synth_generate(8 + rng.random_range(0..5), 2, rng.random(), 0.4, 1.0).unwrap();
            let mask = SplitMask::full(&sd.dataset);
            let obs = ObservedLinks::build(&sd.dataset, &mask.observed);
            let mut config = TrainConfig::new(3, Mode::MedLfrm);
            config.c = 2.0;
            config.ell = 3.0;
            config.svm_tol = 1e-7;
            config.seed = rng.random();
            let mut state = init_state(&sd.dataset, &config, &mut rng).unwrap();
            let before = objective(&state, &obs, &config);
            let mut warm = vec![Vec::new(); 1];
            theta_substep(&mut state, &obs, &config, &mut warm, 1.0, 0.0, false).unwrap();
            let after = objective(&state, &obs, &config);
            assert!(
                after <= before + 1e-6 * (1.0 + before.abs()),
                "objective rose from {before} to {after}"
            );
        }
    }
}
