//! Regime segmentation by clustering window summaries.
//!
//! Each window is reduced to a five-number summary chosen to be sensitive
//! to the lower tail: mean, standard deviation, 5% and 1% quantiles, and
//! the minimum, all in dB. Summaries are z-scored, clustered with a
//! diagonal-covariance Gaussian mixture fitted by EM, and the component
//! count is picked by BIC. Windows assigned to the same component are
//! treated as one stationary regime.

use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::stats::{logsumexp, mean, quantile_sorted, sorted_copy, variance};
use crate::window::WindowSet;

pub const FEATURE_DIM: usize = 5;

const MIN_FEATURE_WINDOW: usize = 20;
const VARIANCE_FLOOR: f64 = 1e-6;
const EM_TOL: f64 = 1e-6;
const EM_MAX_ITERS: usize = 500;
const EM_RESTARTS: u64 = 5;
const LN_2PI: f64 = 1.837877066409345483560659472811;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowFeatures {
    pub mean: f64,
    pub std: f64,
    pub q5: f64,
    pub q1: f64,
    pub min: f64,
}

impl WindowFeatures {
    pub fn as_array(&self) -> [f64; FEATURE_DIM] {
        [self.mean, self.std, self.q5, self.q1, self.min]
    }
}

pub fn featurize(window: &[f64]) -> Result<WindowFeatures> {
    if window.len() < MIN_FEATURE_WINDOW {
        return Err(Error::invalid(format!(
            "featurize needs at least {MIN_FEATURE_WINDOW} samples, got {}",
            window.len()
        )));
    }
    if window.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("window values".into()));
    }
    let sorted = sorted_copy(window);
    Ok(WindowFeatures {
        mean: mean(window),
        std: variance(window).sqrt(),
        q5: quantile_sorted(&sorted, 0.05),
        q1: quantile_sorted(&sorted, 0.01),
        min: sorted[0],
    })
}

/// Diagonal-covariance Gaussian mixture over standardized window features.
/// Component parameters live in z-scored space; the standardization
/// constants travel with the model so assignment works on raw features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub weights: Vec<f64>,
    pub means: Vec<[f64; FEATURE_DIM]>,
    pub variances: Vec<[f64; FEATURE_DIM]>,
    pub feature_mean: [f64; FEATURE_DIM],
    pub feature_std: [f64; FEATURE_DIM],
    pub log_likelihood: f64,
    pub bic: f64,
}

impl GmmModel {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    fn standardize(&self, f: &WindowFeatures) -> [f64; FEATURE_DIM] {
        let raw = f.as_array();
        std::array::from_fn(|d| (raw[d] - self.feature_mean[d]) / self.feature_std[d])
    }
}

fn log_density(x: &[f64; FEATURE_DIM], mean: &[f64; FEATURE_DIM], var: &[f64; FEATURE_DIM]) -> f64 {
    let mut acc = 0.0;
    for d in 0..FEATURE_DIM {
        let diff = x[d] - mean[d];
        acc -= 0.5 * (LN_2PI + var[d].ln() + diff * diff / var[d]);
    }
    acc
}

struct EmFit {
    weights: Vec<f64>,
    means: Vec<[f64; FEATURE_DIM]>,
    variances: Vec<[f64; FEATURE_DIM]>,
    log_likelihood: f64,
}

fn run_em(data: &[[f64; FEATURE_DIM]], k: usize, rng: &mut ChaCha8Rng) -> Result<EmFit> {
    let n = data.len();

    // Global per-dimension variance seeds every component's covariance.
    let mut global_mean = [0.0; FEATURE_DIM];
    for x in data {
        for d in 0..FEATURE_DIM {
            global_mean[d] += x[d] / n as f64;
        }
    }
    let mut global_var = [0.0; FEATURE_DIM];
    for x in data {
        for d in 0..FEATURE_DIM {
            global_var[d] += (x[d] - global_mean[d]).powi(2) / n as f64;
        }
    }
    for v in &mut global_var {
        *v = v.max(VARIANCE_FLOOR);
    }

    // Means start at K distinct data rows.
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut means: Vec<[f64; FEATURE_DIM]> = Vec::with_capacity(k);
    for &i in &order {
        if means.iter().all(|m| *m != data[i]) {
            means.push(data[i]);
            if means.len() == k {
                break;
            }
        }
    }
    if means.len() < k {
        return Err(Error::degenerate(format!(
            "only {} distinct feature rows for {k} components",
            means.len()
        )));
    }
    let mut variances = vec![global_var; k];
    let mut weights = vec![1.0 / k as f64; k];

    let mut resp = vec![vec![0.0; k]; n];
    let mut ll_prev = f64::NEG_INFINITY;
    let mut ll = f64::NEG_INFINITY;
    for iter in 0..EM_MAX_ITERS {
        // E step, in log space.
        ll = 0.0;
        for (i, x) in data.iter().enumerate() {
            let lw: Vec<f64> = (0..k)
                .map(|c| weights[c].ln() + log_density(x, &means[c], &variances[c]))
                .collect();
            let lse = logsumexp(&lw);
            ll += lse;
            for c in 0..k {
                resp[i][c] = (lw[c] - lse).exp();
            }
        }
        debug_assert!(
            ll >= ll_prev - 1e-9,
            "EM log-likelihood decreased: {ll_prev} -> {ll}"
        );
        if iter > 0 && (ll - ll_prev).abs() < EM_TOL {
            ll_prev = ll;
            break;
        }
        ll_prev = ll;

        // M step.
        for c in 0..k {
            let nk: f64 = resp.iter().map(|r| r[c]).sum();
            weights[c] = nk / n as f64;
            if nk < 1e-12 {
                continue; // collapsed component keeps its parameters
            }
            let mut mu = [0.0; FEATURE_DIM];
            for (i, x) in data.iter().enumerate() {
                for d in 0..FEATURE_DIM {
                    mu[d] += resp[i][c] * x[d] / nk;
                }
            }
            let mut var = [0.0; FEATURE_DIM];
            for (i, x) in data.iter().enumerate() {
                for d in 0..FEATURE_DIM {
                    var[d] += resp[i][c] * (x[d] - mu[d]).powi(2) / nk;
                }
            }
            for v in &mut var {
                *v = v.max(VARIANCE_FLOOR);
            }
            means[c] = mu;
            variances[c] = var;
        }
    }
    let _ = ll;

    Ok(EmFit {
        weights,
        means,
        variances,
        log_likelihood: ll_prev,
    })
}

/// Fits a K-component mixture, best of five seeded restarts by final
/// log-likelihood.
pub fn fit_gmm_em(features: &[WindowFeatures], k: usize, root_seed: u64) -> Result<GmmModel> {
    if k < 1 {
        return Err(Error::invalid("component count must be at least 1"));
    }
    if features.len() < 5 * k {
        return Err(Error::invalid(format!(
            "{k} components need at least {} features, got {}",
            5 * k,
            features.len()
        )));
    }

    let n = features.len();
    let raw: Vec<[f64; FEATURE_DIM]> = features.iter().map(|f| f.as_array()).collect();
    let mut feature_mean = [0.0; FEATURE_DIM];
    for x in &raw {
        for d in 0..FEATURE_DIM {
            feature_mean[d] += x[d] / n as f64;
        }
    }
    let mut feature_std = [0.0; FEATURE_DIM];
    for x in &raw {
        for d in 0..FEATURE_DIM {
            feature_std[d] += (x[d] - feature_mean[d]).powi(2) / n as f64;
        }
    }
    for s in &mut feature_std {
        // A constant dimension carries no signal; unit scale keeps its
        // z-scores at zero instead of dividing by zero.
        *s = s.sqrt();
        if *s < 1e-12 {
            *s = 1.0;
        }
    }
    let data: Vec<[f64; FEATURE_DIM]> = raw
        .iter()
        .map(|x| std::array::from_fn(|d| (x[d] - feature_mean[d]) / feature_std[d]))
        .collect();

    let mut best: Option<EmFit> = None;
    for restart in 0..EM_RESTARTS {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed::derive_indexed(root_seed, "gmm.restart", restart));
        let fit = run_em(&data, k, &mut rng)?;
        if best
            .as_ref()
            .is_none_or(|b| fit.log_likelihood > b.log_likelihood)
        {
            best = Some(fit);
        }
    }
    let fit = best.expect("at least one restart");

    let p = (k - 1) + 2 * k * FEATURE_DIM;
    let bic = -2.0 * fit.log_likelihood + p as f64 * (n as f64).ln();
    Ok(GmmModel {
        weights: fit.weights,
        means: fit.means,
        variances: fit.variances,
        feature_mean,
        feature_std,
        log_likelihood: fit.log_likelihood,
        bic,
    })
}

/// Fits every feasible K in the range and returns the BIC argmin, ties to
/// the smaller K. K values with fewer than 5K features are skipped with a
/// warning; it is an error if that leaves nothing.
pub fn select_k_bic(
    features: &[WindowFeatures],
    k_range: std::ops::RangeInclusive<usize>,
    root_seed: u64,
) -> Result<(usize, GmmModel)> {
    if k_range.is_empty() {
        return Err(Error::invalid("empty component range"));
    }
    let mut best: Option<(usize, GmmModel)> = None;
    for k in k_range {
        if features.len() < 5 * k {
            log::warn!(
                "skipping K={k}: {} features is fewer than {}",
                features.len(),
                5 * k
            );
            continue;
        }
        let model = fit_gmm_em(features, k, root_seed)?;
        if best.as_ref().is_none_or(|(_, b)| model.bic < b.bic) {
            best = Some((k, model));
        }
    }
    best.ok_or_else(|| {
        Error::invalid(format!(
            "no feasible component count for {} features",
            features.len()
        ))
    })
}

/// Posterior argmax for one feature vector; ties go to the lower index.
/// Returns the label and the full responsibility vector.
pub fn assign_regime(model: &GmmModel, f: &WindowFeatures) -> Result<(u32, Vec<f64>)> {
    let k = model.k();
    if k == 0 || model.means.len() != k || model.variances.len() != k {
        return Err(Error::invalid("malformed mixture model"));
    }
    let x = model.standardize(f);
    let lw: Vec<f64> = (0..k)
        .map(|c| model.weights[c].ln() + log_density(&x, &model.means[c], &model.variances[c]))
        .collect();
    let lse = logsumexp(&lw);
    let resp: Vec<f64> = lw.iter().map(|&l| (l - lse).exp()).collect();
    let mut label = 0;
    for (c, &r) in resp.iter().enumerate() {
        if r > resp[label] {
            label = c;
        }
    }
    Ok((label as u32, resp))
}

/// Labels every window of a set, for feeding regime annotations back into
/// training and augmentation.
pub fn assign_windows(model: &GmmModel, windows: &WindowSet) -> Result<Vec<u32>> {
    (0..windows.len())
        .map(|i| Ok(assign_regime(model, &featurize(windows.window(i))?)?.0))
        .collect()
}
