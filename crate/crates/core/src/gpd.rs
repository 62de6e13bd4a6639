//! Lower-tail peaks-over-threshold machinery on the generalized Pareto
//! distribution (GPD).
//!
//! Received power lives in dB and outages sit in the *lower* tail, so all
//! tail analysis here works on deficits `z = u - y >= 0` of samples `y`
//! that fall strictly below a threshold `u`. Conditional on falling below a
//! well-chosen `u`, deficits are modeled as GPD with shape `xi` and scale
//! `beta > 0`:
//!
//! ```text
//! G(z) = 1 - (1 + xi z / beta)^(-1/xi)        on  1 + xi z / beta > 0
//! ```
//!
//! with the exponential limit `G(z) = 1 - exp(-z/beta)` as `xi -> 0`.
//! `xi > 0` gives a heavy lower tail, `xi < 0` a bounded one with endpoint
//! `-beta/xi`. We treat `|xi| < 1e-6` as the exponential case; all closed
//! forms below switch branches there.
//!
//! The fitting entry points are [`fit_gpd_moments`] (cheap, used as a
//! provisional fit inside training losses) and [`fit_gpd_mle`]
//! (moment-started quasi-Newton on the negative log-likelihood, with a grid
//! fallback). [`extract_exceedances`] and [`decluster_runs`] build
//! approximately independent exceedance sets from a raw stream, and
//! [`tail_probability`] composes the empirical exceedance rate with the
//! fitted conditional model.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

/// Shape/scale threshold below which all formulas use their `xi -> 0`
/// exponential limit.
pub const XI_EPS: f64 = 1e-6;

/// Open search box for the shape during maximum-likelihood fitting.
const XI_BOX: f64 = 0.9999;

/// Fitted GPD shape and scale for deficits below a threshold.
///
/// Invariants are enforced at construction (and on deserialization):
/// `beta > 0`, `|xi| < 1`, both finite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGpdParams")]
pub struct GpdParams {
    xi: f64,
    beta: f64,
}

#[derive(Deserialize)]
struct RawGpdParams {
    xi: f64,
    beta: f64,
}

impl TryFrom<RawGpdParams> for GpdParams {
    type Error = Error;

    fn try_from(raw: RawGpdParams) -> Result<Self> {
        GpdParams::new(raw.xi, raw.beta)
    }
}

impl GpdParams {
    pub fn new(xi: f64, beta: f64) -> Result<Self> {
        if !xi.is_finite() || xi.abs() >= 1.0 {
            return Err(Error::invalid(format!(
                "GPD shape must be finite with |xi| < 1, got {xi}"
            )));
        }
        if !beta.is_finite() || beta <= 0.0 {
            return Err(Error::invalid(format!(
                "GPD scale must be finite and positive, got {beta}"
            )));
        }
        Ok(Self { xi, beta })
    }

    pub fn xi(&self) -> f64 {
        self.xi
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Upper endpoint of the deficit support: `-beta/xi` for `xi < 0`,
    /// infinite otherwise.
    pub fn support_end(&self) -> f64 {
        if self.xi < -XI_EPS {
            -self.beta / self.xi
        } else {
            f64::INFINITY
        }
    }

    /// Re-expresses the same tail at a threshold `delta` dB *lower* than the
    /// one these parameters were fitted at. Threshold stability of the GPD
    /// keeps the shape and moves the scale to `beta + xi * delta`.
    pub fn at_lower_threshold(&self, delta: f64) -> Result<GpdParams> {
        if !(delta.is_finite() && delta >= 0.0) {
            return Err(Error::domain(format!(
                "threshold shift must be nonnegative, got {delta}"
            )));
        }
        GpdParams::new(self.xi, self.beta + self.xi * delta)
    }
}

/// Deficits of samples that fell strictly below a threshold, with their
/// positions in the source stream.
///
/// `indices` are strictly increasing; every deficit is finite and
/// nonnegative. An empty set is valid.
#[derive(Debug, Clone, PartialEq)]
pub struct ExceedanceSet {
    threshold_db: f64,
    deficits: Vec<f64>,
    indices: Vec<usize>,
}

impl ExceedanceSet {
    pub fn from_parts(threshold_db: f64, deficits: Vec<f64>, indices: Vec<usize>) -> Result<Self> {
        if !threshold_db.is_finite() {
            return Err(Error::domain(format!(
                "exceedance threshold must be finite, got {threshold_db}"
            )));
        }
        if deficits.len() != indices.len() {
            return Err(Error::DimensionMismatch {
                expected: deficits.len(),
                got: indices.len(),
            });
        }
        if deficits.iter().any(|z| !z.is_finite() || *z < 0.0) {
            return Err(Error::domain("deficits must be finite and nonnegative"));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::domain("exceedance indices must be strictly increasing"));
        }
        Ok(Self {
            threshold_db,
            deficits,
            indices,
        })
    }

    /// Wraps raw deficits with consecutive indices; used where the source
    /// positions are irrelevant (pooled or synthetic deficits).
    pub fn from_deficits(threshold_db: f64, deficits: Vec<f64>) -> Result<Self> {
        let indices = (0..deficits.len()).collect();
        Self::from_parts(threshold_db, deficits, indices)
    }

    pub fn threshold_db(&self) -> f64 {
        self.threshold_db
    }

    pub fn deficits(&self) -> &[f64] {
        &self.deficits
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.deficits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deficits.is_empty()
    }
}

/// GPD cumulative distribution of a deficit. Returns 0 for `z < 0` and 1 at
/// or beyond a finite support endpoint.
pub fn gpd_cdf(z: f64, params: &GpdParams) -> f64 {
    if z.is_nan() {
        return f64::NAN;
    }
    if z <= 0.0 {
        return 0.0;
    }
    let (xi, beta) = (params.xi, params.beta);
    if xi.abs() < XI_EPS {
        return -(-z / beta).exp_m1();
    }
    let t = xi * z / beta;
    if t <= -1.0 {
        // Beyond the endpoint of a bounded tail.
        return 1.0;
    }
    -(-t.ln_1p() / xi).exp_m1()
}

/// Log-density of a deficit; `-inf` outside the support (including `z < 0`).
///
/// The sentinel keeps likelihood sums well-defined without forcing a
/// `Result` on hot loops; use [`gpd_log_pdf_checked`] to get an error
/// instead.
pub fn gpd_log_pdf(z: f64, params: &GpdParams) -> f64 {
    if z.is_nan() {
        return f64::NAN;
    }
    if z < 0.0 {
        return f64::NEG_INFINITY;
    }
    let (xi, beta) = (params.xi, params.beta);
    if xi.abs() < XI_EPS {
        return -beta.ln() - z / beta;
    }
    let t = xi * z / beta;
    if t <= -1.0 {
        return f64::NEG_INFINITY;
    }
    -beta.ln() - (1.0 / xi + 1.0) * t.ln_1p()
}

/// Like [`gpd_log_pdf`] but support violations surface as a domain error.
pub fn gpd_log_pdf_checked(z: f64, params: &GpdParams) -> Result<f64> {
    let lp = gpd_log_pdf(z, params);
    if lp == f64::NEG_INFINITY {
        return Err(Error::domain(format!(
            "deficit {z} outside GPD support (xi={}, beta={})",
            params.xi, params.beta
        )));
    }
    if lp.is_nan() {
        return Err(Error::NonFinite("GPD log-density argument".into()));
    }
    Ok(lp)
}

/// Deficit quantile `G^{-1}(p)` for `p` in `[0, 1)`.
pub fn gpd_quantile(p: f64, params: &GpdParams) -> Result<f64> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::domain(format!("quantile level must be in [0, 1), got {p}")));
    }
    let (xi, beta) = (params.xi, params.beta);
    // ln(1 - p) without cancellation near p = 0.
    let l = (-p).ln_1p();
    if xi.abs() < XI_EPS {
        Ok(-beta * l)
    } else {
        Ok(beta / xi * (-xi * l).exp_m1())
    }
}

/// `n` independent deficits via inverse-CDF sampling from a caller-owned RNG.
pub fn gpd_sample<R: Rng + ?Sized>(n: usize, params: &GpdParams, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            gpd_quantile(u, params).expect("u in [0,1) by construction")
        })
        .collect()
}

/// Method-of-moments GPD fit.
///
/// With deficit mean `m` and variance `s^2`: `xi = (1 - m^2/s^2) / 2` and
/// `beta = m (1 - xi)`. The shape is clamped to `[-0.49, 0.49]` and the
/// scale floored at `1e-6`, which keeps the result usable as an optimizer
/// start or a provisional fit even on awkward windows.
pub fn fit_gpd_moments(exceedances: &ExceedanceSet) -> Result<GpdParams> {
    let z = exceedances.deficits();
    if z.len() < 2 {
        return Err(Error::fit(format!(
            "method of moments needs at least 2 deficits, got {}",
            z.len()
        )));
    }
    let m = stats::mean(z);
    let s2 = stats::variance(z);
    if s2 <= 0.0 || m <= 0.0 {
        return Err(Error::degenerate(
            "method of moments needs nonzero deficit variance and positive mean",
        ));
    }
    let xi = (0.5 * (1.0 - m * m / s2)).clamp(-0.49, 0.49);
    let beta = (m * (1.0 - xi)).max(1e-6);
    GpdParams::new(xi, beta)
}

/// A maximum-likelihood fit together with the attained negative
/// log-likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GpdFit {
    pub params: GpdParams,
    pub nll: f64,
}

/// Negative log-likelihood of deficits; `+inf` when infeasible.
fn gpd_nll(z: &[f64], max_z: f64, xi: f64, beta: f64) -> f64 {
    if !(beta > 0.0) || !beta.is_finite() || !xi.is_finite() || xi.abs() >= 1.0 {
        return f64::INFINITY;
    }
    let n = z.len() as f64;
    if xi.abs() < XI_EPS {
        return n * beta.ln() + z.iter().sum::<f64>() / beta;
    }
    if xi < 0.0 && max_z * (-xi) >= beta {
        return f64::INFINITY;
    }
    let c = 1.0 / xi + 1.0;
    n * beta.ln() + c * z.iter().map(|&zi| (xi * zi / beta).ln_1p()).sum::<f64>()
}

/// Gradient of the NLL in the optimization coordinates `(xi, log beta)`.
fn gpd_nll_grad(z: &[f64], xi: f64, beta: f64) -> [f64; 2] {
    let n = z.len() as f64;
    if xi.abs() < XI_EPS {
        let mut d_xi = 0.0;
        let mut d_l = 0.0;
        for &zi in z {
            let r = zi / beta;
            d_xi += r - 0.5 * r * r;
            d_l += 1.0 - r;
        }
        let _ = n;
        return [d_xi, d_l];
    }
    let mut d_xi = 0.0;
    let mut d_l = 0.0;
    for &zi in z {
        let t = (xi * zi / beta).ln_1p();
        let w = zi / (beta + xi * zi);
        d_xi += -t / (xi * xi) + (1.0 + 1.0 / xi) * w;
        d_l += 1.0 - (1.0 + xi) * w;
    }
    [d_xi, d_l]
}

/// Maximum-likelihood GPD fit on at least 5 deficits.
///
/// Runs a BFGS quasi-Newton search in `(xi, log beta)` from the
/// method-of-moments start, shape boxed to `(-1, 1)`. If the line search
/// cannot make progress the optimizer falls back to a 200 x 200 grid
/// (linear in shape, logarithmic in scale). The attained NLL never exceeds
/// the NLL at the moment start.
pub fn fit_gpd_mle(exceedances: &ExceedanceSet) -> Result<GpdFit> {
    let z = exceedances.deficits();
    if z.len() < 5 {
        return Err(Error::fit(format!(
            "maximum likelihood needs at least 5 deficits, got {}",
            z.len()
        )));
    }
    let first = z[0];
    if z.iter().all(|&zi| zi == first) {
        return Err(Error::degenerate("all deficits identical"));
    }
    let max_z = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let start = fit_gpd_moments(exceedances)?;
    let f = |xi: f64, l: f64| gpd_nll(z, max_z, xi, l.exp());

    let mut theta = [start.xi(), start.beta().ln()];
    // A negative moment shape can leave max_z outside the implied support;
    // grow the starting scale until every deficit is feasible.
    if theta[0] < 0.0 && start.beta() <= -theta[0] * max_z {
        theta[1] = (-theta[0] * max_z * 1.001).ln();
    }
    let mut fval = f(theta[0], theta[1]);
    let start_nll = fval;
    let l0 = theta[1];
    debug_assert!(fval.is_finite(), "repaired start must be feasible");

    // BFGS with inverse-Hessian approximation H and Armijo backtracking.
    let mut h = [[1.0, 0.0], [0.0, 1.0]];
    let mut grad = gpd_nll_grad(z, theta[0], theta[1].exp());
    let gtol = 1e-9 * z.len() as f64;
    let mut stalled = false;
    for _ in 0..200 {
        if grad[0].abs().max(grad[1].abs()) < gtol {
            break;
        }
        let mut dir = [
            -(h[0][0] * grad[0] + h[0][1] * grad[1]),
            -(h[1][0] * grad[0] + h[1][1] * grad[1]),
        ];
        let mut slope = dir[0] * grad[0] + dir[1] * grad[1];
        if !(slope < 0.0) {
            h = [[1.0, 0.0], [0.0, 1.0]];
            dir = [-grad[0], -grad[1]];
            slope = dir[0] * grad[0] + dir[1] * grad[1];
        }

        let project = |xi: f64, l: f64| (xi.clamp(-XI_BOX, XI_BOX), l.clamp(l0 - 20.0, l0 + 20.0));
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..48 {
            let (xi_n, l_n) = project(theta[0] + alpha * dir[0], theta[1] + alpha * dir[1]);
            let f_n = f(xi_n, l_n);
            if f_n.is_finite() && f_n <= fval + 1e-4 * alpha * slope {
                accepted = Some(([xi_n, l_n], f_n));
                break;
            }
            alpha *= 0.5;
        }
        let Some((theta_n, f_n)) = accepted else {
            stalled = true;
            break;
        };

        let grad_n = gpd_nll_grad(z, theta_n[0], theta_n[1].exp());
        let s = [theta_n[0] - theta[0], theta_n[1] - theta[1]];
        let y = [grad_n[0] - grad[0], grad_n[1] - grad[1]];
        let sy = s[0] * y[0] + s[1] * y[1];
        if sy > 1e-12 {
            // Standard BFGS inverse update, written out for the 2x2 case.
            let rho = 1.0 / sy;
            let hy = [
                h[0][0] * y[0] + h[0][1] * y[1],
                h[1][0] * y[0] + h[1][1] * y[1],
            ];
            let yhy = y[0] * hy[0] + y[1] * hy[1];
            let c = rho * rho * yhy + rho;
            for i in 0..2 {
                for j in 0..2 {
                    h[i][j] += c * s[i] * s[j] - rho * (hy[i] * s[j] + s[i] * hy[j]);
                }
            }
        }
        if s[0].abs().max(s[1].abs()) < 1e-13 {
            theta = theta_n;
            fval = f_n;
            break;
        }
        theta = theta_n;
        fval = f_n;
        grad = grad_n;
    }

    if stalled {
        // Grid fallback: shape linear over the box, scale log-spaced around
        // the mean deficit.
        let m = stats::mean(z);
        let (mut best_f, mut best) = (fval, theta);
        for i in 0..200 {
            let xi = -0.99 + 1.98 * i as f64 / 199.0;
            for j in 0..200 {
                let l = (m / 50.0).ln() + (2500f64).ln() * j as f64 / 199.0;
                let f_ij = f(xi, l);
                if f_ij < best_f {
                    best_f = f_ij;
                    best = [xi, l];
                }
            }
        }
        theta = best;
        fval = best_f;
    }

    debug_assert!(fval <= start_nll + 1e-9);
    let params = GpdParams::new(theta[0], theta[1].exp())?;
    Ok(GpdFit { params, nll: fval })
}

/// Collects deficits `u - y` for every sample `y` strictly below the
/// threshold `u`, in stream order.
pub fn extract_exceedances(values: &[f64], threshold_db: f64) -> Result<ExceedanceSet> {
    if !threshold_db.is_finite() {
        return Err(Error::domain(format!(
            "exceedance threshold must be finite, got {threshold_db}"
        )));
    }
    let mut deficits = Vec::new();
    let mut indices = Vec::new();
    for (i, &y) in values.iter().enumerate() {
        if y < threshold_db {
            deficits.push(threshold_db - y);
            indices.push(i);
        }
    }
    ExceedanceSet::from_parts(threshold_db, deficits, indices)
}

/// Runs declustering: exceedances whose source indices are within `gap` of
/// the previous one belong to the same cluster, and only each cluster's
/// largest deficit survives (earliest index on ties). `gap = 0` is the
/// identity. The output is stable under re-declustering at the same gap.
pub fn decluster_runs(set: &ExceedanceSet, gap: usize) -> ExceedanceSet {
    if set.len() <= 1 {
        return set.clone();
    }
    let mut deficits = Vec::new();
    let mut indices = Vec::new();
    let (mut peak_z, mut peak_i) = (set.deficits[0], set.indices[0]);
    let mut prev_i = set.indices[0];
    for k in 1..set.len() {
        let (z, i) = (set.deficits[k], set.indices[k]);
        if i - prev_i <= gap {
            if z > peak_z {
                peak_z = z;
                peak_i = i;
            }
        } else {
            deficits.push(peak_z);
            indices.push(peak_i);
            peak_z = z;
            peak_i = i;
        }
        prev_i = i;
    }
    deficits.push(peak_z);
    indices.push(peak_i);
    ExceedanceSet {
        threshold_db: set.threshold_db,
        deficits,
        indices,
    }
}

/// Unconditional probability that a sample falls below `tau`, composing the
/// empirical rate of landing below the threshold with the fitted deficit
/// model: `P(Y < tau) = (n_below / n_total) * (1 - G(u - tau))`.
///
/// Requires `tau < threshold_db` (the model only covers the region below the
/// threshold) and `n_below <= n_total` with `n_total > 0`.
pub fn tail_probability(
    threshold_db: f64,
    params: &GpdParams,
    tau: f64,
    n_total: usize,
    n_below: usize,
) -> Result<f64> {
    if n_total == 0 {
        return Err(Error::domain("tail probability needs n_total > 0"));
    }
    if n_below > n_total {
        return Err(Error::domain(format!(
            "n_below ({n_below}) exceeds n_total ({n_total})"
        )));
    }
    if !tau.is_finite() || tau >= threshold_db {
        return Err(Error::domain(format!(
            "query level {tau} must lie strictly below the threshold {threshold_db}"
        )));
    }
    if n_below == 0 {
        return Ok(0.0);
    }
    let rate = n_below as f64 / n_total as f64;
    Ok(rate * (1.0 - gpd_cdf(threshold_db - tau, params)))
}

/// Per-deficit negative log-density and its partials in `(xi, beta)`,
/// linearly extended below a small support floor so that gradient-based
/// trainers see a finite, inward-pointing slope instead of `inf` when a
/// negative-shape iterate momentarily excludes an observed deficit.
pub(crate) fn neg_log_pdf_grad(z: f64, xi: f64, beta: f64) -> (f64, f64, f64) {
    debug_assert!(z >= 0.0 && beta > 0.0);
    if xi.abs() < XI_EPS {
        let r = z / beta;
        let nl = beta.ln() + r;
        let d_xi = r - 0.5 * r * r;
        let d_beta = (1.0 - r) / beta;
        return (nl, d_xi, d_beta);
    }
    const T_FLOOR: f64 = 1e-9;
    let c = 1.0 + 1.0 / xi;
    let t = 1.0 + xi * z / beta;
    // g(t) = ln t, linearly extended below the floor.
    let (g, g_prime) = if t >= T_FLOOR {
        (t.ln(), 1.0 / t)
    } else {
        (T_FLOOR.ln() + (t - T_FLOOR) / T_FLOOR, 1.0 / T_FLOOR)
    };
    let nl = beta.ln() + c * g;
    let d_xi = -g / (xi * xi) + c * g_prime * z / beta;
    let d_beta = 1.0 / beta - c * g_prime * xi * z / (beta * beta);
    (nl, d_xi, d_beta)
}

/// Per-deficit negative log-density and its derivative in `z`, with the
/// same support-floor extension as [`neg_log_pdf_grad`]. Used where the
/// deficit itself is the differentiable quantity (thresholds move, the
/// provisional parameters are frozen).
pub(crate) fn neg_log_pdf_dz(z: f64, xi: f64, beta: f64) -> (f64, f64) {
    debug_assert!(beta > 0.0);
    if xi.abs() < XI_EPS {
        return (beta.ln() + z / beta, 1.0 / beta);
    }
    const T_FLOOR: f64 = 1e-9;
    let c = 1.0 + 1.0 / xi;
    let t = 1.0 + xi * z / beta;
    let (g, g_prime) = if t >= T_FLOOR {
        (t.ln(), 1.0 / t)
    } else {
        (T_FLOOR.ln() + (t - T_FLOOR) / T_FLOOR, 1.0 / T_FLOOR)
    };
    (beta.ln() + c * g, c * g_prime * xi / beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn p(xi: f64, beta: f64) -> GpdParams {
        GpdParams::new(xi, beta).unwrap()
    }

    #[test]
    fn params_reject_bad_values() {
        assert!(GpdParams::new(0.2, 0.0).is_err());
        assert!(GpdParams::new(0.2, -1.0).is_err());
        assert!(GpdParams::new(1.0, 1.0).is_err());
        assert!(GpdParams::new(f64::NAN, 1.0).is_err());
        assert!(GpdParams::new(0.2, f64::INFINITY).is_err());
        assert!(GpdParams::new(-0.4, 2.0).is_ok());
    }

    #[test]
    fn params_deserialization_validates() {
        let ok: GpdParams = serde_json::from_str(r#"{"xi":0.2,"beta":1.5}"#).unwrap();
        assert_eq!(ok.xi(), 0.2);
        assert!(serde_json::from_str::<GpdParams>(r#"{"xi":0.2,"beta":-1.0}"#).is_err());
    }

    #[test]
    fn cdf_hand_values() {
        // (1 + 0.5 * 1 / 1)^(-2) = 4/9.
        assert!((gpd_cdf(1.0, &p(0.5, 1.0)) - 5.0 / 9.0).abs() < 1e-15);
        // Exponential branch.
        assert!((gpd_cdf(2.0, &p(0.0, 1.0)) - (1.0 - (-2.0f64).exp())).abs() < 1e-15);
        assert_eq!(gpd_cdf(0.0, &p(0.2, 1.0)), 0.0);
        assert_eq!(gpd_cdf(-1.0, &p(0.2, 1.0)), 0.0);
        // Bounded tail saturates at its endpoint beta/|xi| = 2.5.
        assert_eq!(gpd_cdf(2.5, &p(-0.4, 1.0)), 1.0);
        assert_eq!(gpd_cdf(3.0, &p(-0.4, 1.0)), 1.0);
        assert!(gpd_cdf(2.4999, &p(-0.4, 1.0)) < 1.0);
    }

    #[test]
    fn cdf_branches_agree_near_zero_shape() {
        // Crossing the branch floor changes the CDF by O(XI_EPS * z^2).
        for &z in &[0.1, 1.0, 5.0] {
            let a = gpd_cdf(z, &p(9e-7, 2.0));
            let b = gpd_cdf(z, &p(1.1e-6, 2.0));
            assert!((a - b).abs() < 1e-6, "z={z}: {a} vs {b}");
        }
    }

    #[test]
    fn log_pdf_hand_values() {
        // Density at z=0 is 1/beta regardless of shape.
        assert!((gpd_log_pdf(0.0, &p(0.5, 2.0)) + 2.0f64.ln()).abs() < 1e-15);
        // Exponential branch: -ln(beta) - z/beta.
        assert!((gpd_log_pdf(1.0, &p(0.0, 1.0)) + 1.0).abs() < 1e-15);
        // General branch: -ln 1 - (1/0.5 + 1) ln(1.5).
        assert!((gpd_log_pdf(1.0, &p(0.5, 1.0)) + 3.0 * 1.5f64.ln()).abs() < 1e-15);
        assert_eq!(gpd_log_pdf(-0.1, &p(0.2, 1.0)), f64::NEG_INFINITY);
        assert_eq!(gpd_log_pdf(2.5, &p(-0.4, 1.0)), f64::NEG_INFINITY);
        assert!(gpd_log_pdf_checked(2.5, &p(-0.4, 1.0)).is_err());
        assert!(gpd_log_pdf_checked(1.0, &p(-0.4, 1.0)).is_ok());
    }

    #[test]
    fn density_integrates_to_one() {
        // Simpson's rule over the bulk of the support for several shapes.
        for &xi in &[-0.4, 0.0, 0.4] {
            let params = p(xi, 1.3);
            let hi = gpd_quantile(1.0 - 1e-9, &params).unwrap();
            let n = 200_001;
            let hstep = hi / (n - 1) as f64;
            let mut acc = 0.0;
            for i in 0..n {
                let z = i as f64 * hstep;
                let w = if i == 0 || i == n - 1 {
                    1.0
                } else if i % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                let lp = gpd_log_pdf(z, &params);
                if lp.is_finite() {
                    acc += w * lp.exp();
                }
            }
            let integral = acc * hstep / 3.0;
            assert!(
                (integral - 1.0).abs() < 1e-4,
                "xi={xi}: integral = {integral}"
            );
        }
    }

    #[test]
    fn quantile_hand_values_and_domain() {
        assert!((gpd_quantile(0.99, &p(0.0, 1.0)).unwrap() - 100.0f64.ln()).abs() < 1e-12);
        // (beta/xi)((1-p)^(-xi) - 1) at p = 5/9, xi = 0.5, beta = 1: exactly 1.
        assert!((gpd_quantile(5.0 / 9.0, &p(0.5, 1.0)).unwrap() - 1.0).abs() < 1e-14);
        assert_eq!(gpd_quantile(0.0, &p(0.3, 1.0)).unwrap(), 0.0);
        assert!(gpd_quantile(1.0, &p(0.3, 1.0)).is_err());
        assert!(gpd_quantile(-0.1, &p(0.3, 1.0)).is_err());
        assert!(gpd_quantile(f64::NAN, &p(0.3, 1.0)).is_err());
    }

    #[test]
    fn quantile_cdf_round_trip() {
        for &xi in &[-0.45, -0.1, 0.0, 1e-7, 0.1, 0.45, 0.9] {
            for &beta in &[0.1, 1.0, 17.0] {
                let params = p(xi, beta);
                for k in 0..200 {
                    let pr = k as f64 / 200.0 * (1.0 - 1e-9) + 1e-12;
                    let z = gpd_quantile(pr, &params).unwrap();
                    let back = gpd_cdf(z, &params);
                    assert!(
                        (back - pr).abs() < 1e-12,
                        "xi={xi} beta={beta} p={pr}: got {back}"
                    );
                }
            }
        }
    }

    #[test]
    fn sampler_matches_cdf() {
        let params = p(0.2, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut z = gpd_sample(20_000, &params, &mut rng);
        z.sort_by(f64::total_cmp);
        let n = z.len() as f64;
        let mut ks: f64 = 0.0;
        for (i, zi) in z.iter().enumerate() {
            let g = gpd_cdf(*zi, &params);
            ks = ks
                .max(((i + 1) as f64 / n - g).abs())
                .max((g - i as f64 / n).abs());
        }
        assert!(ks < 0.02, "KS = {ks}");
    }

    #[test]
    fn moments_hand_values() {
        // Mean 1, variance 1 -> exponential: xi = 0, beta = 1.
        // Deficits {0,1,2} shifted: use explicit constructed sets instead.
        let set = ExceedanceSet::from_deficits(0.0, vec![0.0, 1.0, 2.0]).unwrap();
        // m = 1, s2 = 2/3 -> xi = (1 - 1.5)/2 = -0.25, beta = 1.25.
        let params = fit_gpd_moments(&set).unwrap();
        assert!((params.xi() + 0.25).abs() < 1e-12);
        assert!((params.beta() - 1.25).abs() < 1e-12);
    }

    #[test]
    fn moments_match_known_ratios() {
        // Constructed so that m = 1 and population s^2 = 2:
        // xi = (1 - 1/2)/2 = 0.25, beta = 0.75.
        let z = vec![1.0 - 2.0f64.sqrt(), 1.0, 1.0 + 2.0f64.sqrt()];
        // Deficits must be nonnegative; shift by the min and check against
        // recomputed moments instead.
        let shift = -(1.0 - 2.0f64.sqrt());
        let z: Vec<f64> = z.iter().map(|v| v + shift).collect();
        let m = stats::mean(&z);
        let s2 = stats::variance(&z);
        let expect_xi = 0.5 * (1.0 - m * m / s2);
        let set = ExceedanceSet::from_deficits(0.0, z).unwrap();
        let params = fit_gpd_moments(&set).unwrap();
        assert!((params.xi() - expect_xi.clamp(-0.49, 0.49)).abs() < 1e-12);
        assert!((params.beta() - m * (1.0 - params.xi())).abs() < 1e-12);
    }

    #[test]
    fn moments_reject_degenerate() {
        let set = ExceedanceSet::from_deficits(0.0, vec![1.0, 1.0, 1.0]).unwrap();
        assert!(matches!(fit_gpd_moments(&set), Err(Error::Degenerate(_))));
        let one = ExceedanceSet::from_deficits(0.0, vec![1.0]).unwrap();
        assert!(fit_gpd_moments(&one).is_err());
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // Keep deficits inside the support of every probe point; the
        // tightest is (-0.2, 2.0) with endpoint 10.
        let z: Vec<f64> = gpd_sample(200, &p(0.2, 1.0), &mut rng)
            .into_iter()
            .filter(|&zi| zi < 8.0)
            .collect();
        let max_z = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for &(xi, beta) in &[(0.3, 1.2), (-0.2, 2.0), (0.05, 0.7)] {
            let g = gpd_nll_grad(&z, xi, beta);
            let h = 1e-6;
            let l = beta.ln();
            let fd_xi = (gpd_nll(&z, max_z, xi + h, beta) - gpd_nll(&z, max_z, xi - h, beta))
                / (2.0 * h);
            let fd_l = (gpd_nll(&z, max_z, xi, (l + h).exp()) - gpd_nll(&z, max_z, xi, (l - h).exp()))
                / (2.0 * h);
            assert!((g[0] - fd_xi).abs() / fd_xi.abs().max(1.0) < 1e-5, "xi grad at ({xi},{beta})");
            assert!((g[1] - fd_l).abs() / fd_l.abs().max(1.0) < 1e-5, "l grad at ({xi},{beta})");
        }
    }

    #[test]
    fn neg_log_pdf_grad_matches_finite_differences() {
        for &(z, xi, beta) in &[(0.8, 0.3, 1.1), (2.0, -0.2, 1.5), (0.3, 0.0, 0.9)] {
            let (_, d_xi, d_beta) = neg_log_pdf_grad(z, xi, beta);
            // At xi = 0 the step must clear the exponential-branch floor on
            // both sides, which also checks the branches against each other.
            let h = if xi == 0.0 { 1e-4 } else { 1e-6 };
            let f = |xi: f64, beta: f64| neg_log_pdf_grad(z, xi, beta).0;
            let fd_xi = (f(xi + h, beta) - f(xi - h, beta)) / (2.0 * h);
            let fd_beta = (f(xi, beta + h) - f(xi, beta - h)) / (2.0 * h);
            assert!((d_xi - fd_xi).abs() / fd_xi.abs().max(1.0) < 1e-5);
            assert!((d_beta - fd_beta).abs() / fd_beta.abs().max(1.0) < 1e-5);
        }
    }

    #[test]
    fn neg_log_pdf_dz_matches_finite_differences() {
        for &(z, xi, beta) in &[(0.8, 0.3, 1.1), (2.0, -0.2, 1.5), (0.3, 1e-9, 0.9)] {
            let (nl, d_z) = neg_log_pdf_dz(z, xi, beta);
            assert!((nl - neg_log_pdf_grad(z, xi, beta).0).abs() < 1e-12);
            let h = 1e-6;
            let fd = (neg_log_pdf_dz(z + h, xi, beta).0 - neg_log_pdf_dz(z - h, xi, beta).0)
                / (2.0 * h);
            assert!((d_z - fd).abs() / fd.abs().max(1.0) < 1e-5);
        }
        // Beyond a bounded support the extension keeps a finite positive
        // slope, so a descent step pulls the deficit back inside.
        let (_, d_z) = neg_log_pdf_dz(3.0, -0.4, 1.0);
        assert!(d_z.is_finite() && d_z > 0.0);
    }

    #[test]
    fn mle_recovers_parameters() {
        let truth = p(0.2, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z = gpd_sample(5000, &truth, &mut rng);
        let set = ExceedanceSet::from_deficits(0.0, z).unwrap();
        let fit = fit_gpd_mle(&set).unwrap();
        assert!((fit.params.xi() - 0.2).abs() < 0.06, "xi = {}", fit.params.xi());
        assert!((fit.params.beta() - 1.0).abs() < 0.08, "beta = {}", fit.params.beta());
        let mom = fit_gpd_moments(&set).unwrap();
        let max_z = set
            .deficits()
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let mom_nll = gpd_nll(set.deficits(), max_z, mom.xi(), mom.beta());
        assert!(fit.nll <= mom_nll + 1e-9);
    }

    #[test]
    fn mle_near_zero_shape() {
        let truth = p(0.0, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = gpd_sample(10_000, &truth, &mut rng);
        let set = ExceedanceSet::from_deficits(0.0, z).unwrap();
        let fit = fit_gpd_mle(&set).unwrap();
        assert!(fit.params.xi().abs() < 0.04, "xi = {}", fit.params.xi());
        assert!((fit.params.beta() - 2.0).abs() < 0.1);
    }

    #[test]
    fn mle_bounded_tail() {
        let truth = p(-0.3, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let z = gpd_sample(20_000, &truth, &mut rng);
        let set = ExceedanceSet::from_deficits(0.0, z).unwrap();
        let fit = fit_gpd_mle(&set).unwrap();
        assert!((fit.params.xi() + 0.3).abs() < 0.05, "xi = {}", fit.params.xi());
    }

    #[test]
    fn mle_rejects_small_or_degenerate() {
        let small = ExceedanceSet::from_deficits(0.0, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(matches!(fit_gpd_mle(&small), Err(Error::Fit(_))));
        let flat = ExceedanceSet::from_deficits(0.0, vec![2.0; 6]).unwrap();
        assert!(matches!(fit_gpd_mle(&flat), Err(Error::Degenerate(_))));
    }

    #[test]
    fn extract_matches_hand_example() {
        let set = extract_exceedances(&[5.0, 3.0, 7.0, 2.0], 4.0).unwrap();
        assert_eq!(set.deficits(), &[1.0, 2.0]);
        assert_eq!(set.indices(), &[1, 3]);
        assert_eq!(set.threshold_db(), 4.0);
    }

    #[test]
    fn extract_edge_cases() {
        assert!(extract_exceedances(&[1.0], f64::INFINITY).is_err());
        assert!(extract_exceedances(&[1.0], f64::NAN).is_err());
        let empty = extract_exceedances(&[5.0, 6.0], 4.0).unwrap();
        assert!(empty.is_empty());
        // Values equal to the threshold are not exceedances.
        let at = extract_exceedances(&[4.0, 3.0], 4.0).unwrap();
        assert_eq!(at.len(), 1);
    }

    #[test]
    fn decluster_matches_hand_example() {
        let set = ExceedanceSet::from_parts(0.0, vec![0.5, 2.0, 0.3, 1.0], vec![10, 11, 12, 50])
            .unwrap();
        let d = decluster_runs(&set, 5);
        assert_eq!(d.deficits(), &[2.0, 1.0]);
        assert_eq!(d.indices(), &[11, 50]);
    }

    #[test]
    fn decluster_tie_keeps_earliest() {
        let set =
            ExceedanceSet::from_parts(0.0, vec![2.0, 2.0, 1.0], vec![3, 4, 5]).unwrap();
        let d = decluster_runs(&set, 2);
        assert_eq!(d.indices(), &[3]);
    }

    #[test]
    fn decluster_gap_zero_is_identity() {
        let set = ExceedanceSet::from_parts(0.0, vec![1.0, 2.0, 3.0], vec![0, 1, 2]).unwrap();
        assert_eq!(decluster_runs(&set, 0), set);
    }

    #[test]
    fn tail_probability_hand_value() {
        // 0.05 * exp(-2) with an exponential tail.
        let v = tail_probability(-60.0, &p(0.0, 2.0), -64.0, 100, 5).unwrap();
        assert!((v - 0.05 * (-2.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn tail_probability_edges() {
        let params = p(0.1, 1.0);
        assert_eq!(tail_probability(-60.0, &params, -64.0, 100, 0).unwrap(), 0.0);
        assert!(tail_probability(-60.0, &params, -60.0, 100, 5).is_err());
        assert!(tail_probability(-60.0, &params, -59.0, 100, 5).is_err());
        assert!(tail_probability(-60.0, &params, -64.0, 0, 0).is_err());
        assert!(tail_probability(-60.0, &params, -64.0, 10, 11).is_err());
        let v = tail_probability(-60.0, &params, -64.0, 100, 5).unwrap();
        assert!(v >= 0.0 && v <= 0.05);
    }

    #[test]
    fn threshold_shift_is_consistent() {
        // Restricting an exact GPD tail to a deeper threshold must reproduce
        // the shifted parameters' CDF.
        let params = p(0.2, 1.0);
        let delta = 0.7;
        let shifted = params.at_lower_threshold(delta).unwrap();
        // P(Z > delta + w | Z > delta) = (1 - G(delta + w)) / (1 - G(delta))
        // should equal 1 - G_shifted(w).
        for &w in &[0.1, 0.5, 2.0] {
            let lhs = (1.0 - gpd_cdf(delta + w, &params)) / (1.0 - gpd_cdf(delta, &params));
            let rhs = 1.0 - gpd_cdf(w, &shifted);
            assert!((lhs - rhs).abs() < 1e-12, "w={w}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn exceedance_set_validation() {
        assert!(ExceedanceSet::from_parts(0.0, vec![1.0], vec![0, 1]).is_err());
        assert!(ExceedanceSet::from_parts(0.0, vec![1.0, 2.0], vec![1, 1]).is_err());
        assert!(ExceedanceSet::from_parts(0.0, vec![-0.5], vec![0]).is_err());
        assert!(ExceedanceSet::from_parts(f64::NAN, vec![], vec![]).is_err());
        assert!(ExceedanceSet::from_parts(0.0, vec![], vec![]).is_ok());
    }

    proptest! {
        #[test]
        fn cdf_is_monotone_and_bounded(
            xi in -0.9f64..0.9,
            beta in 0.05f64..20.0,
            a in 0.0f64..30.0,
            b in 0.0f64..30.0,
        ) {
            let params = p(xi, beta);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let ga = gpd_cdf(lo, &params);
            let gb = gpd_cdf(hi, &params);
            prop_assert!((0.0..=1.0).contains(&ga));
            prop_assert!((0.0..=1.0).contains(&gb));
            prop_assert!(ga <= gb + 1e-15);
        }

        #[test]
        fn quantile_round_trips(
            xi in -0.9f64..0.9,
            beta in 0.05f64..20.0,
            pr in 0.0f64..0.999999,
        ) {
            let params = p(xi, beta);
            let z = gpd_quantile(pr, &params).unwrap();
            prop_assert!(z >= 0.0);
            prop_assert!((gpd_cdf(z, &params) - pr).abs() < 1e-10);
        }

        #[test]
        fn decluster_is_idempotent_subset(
            raw in proptest::collection::vec((0usize..500, 0.01f64..10.0), 1..60),
            gap in 0usize..20,
        ) {
            let mut pairs: Vec<(usize, f64)> = raw;
            pairs.sort_by_key(|(i, _)| *i);
            pairs.dedup_by_key(|(i, _)| *i);
            let indices: Vec<usize> = pairs.iter().map(|(i, _)| *i).collect();
            let deficits: Vec<f64> = pairs.iter().map(|(_, z)| *z).collect();
            let set = ExceedanceSet::from_parts(0.0, deficits, indices).unwrap();
            let once = decluster_runs(&set, gap);
            let twice = decluster_runs(&once, gap);
            prop_assert_eq!(&once, &twice);
            // Survivors are a subset of the original (index, deficit) pairs.
            for (i, z) in once.indices().iter().zip(once.deficits()) {
                prop_assert!(set.indices().iter().zip(set.deficits()).any(|(si, sz)| si == i && sz == z));
            }
        }

        #[test]
        fn mle_beats_moment_start(
            xi in -0.4f64..0.8,
            beta in 0.2f64..5.0,
            seed in 0u64..50,
        ) {
            let truth = p(xi, beta);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = gpd_sample(400, &truth, &mut rng);
            let set = ExceedanceSet::from_deficits(0.0, z).unwrap();
            let mom = fit_gpd_moments(&set).unwrap();
            let max_z = set.deficits().iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let fit = fit_gpd_mle(&set).unwrap();
            prop_assert!(fit.nll <= gpd_nll(set.deficits(), max_z, mom.xi(), mom.beta()) + 1e-9);
        }
    }
}
