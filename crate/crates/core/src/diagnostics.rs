//! Goodness-of-fit diagnostics for tail models: QQ point pairs, the exact
//! one-sample KS statistic, quantile-domain error metrics, and the
//! probability-plot correlation coefficient.
//!
//! One-sample forms compare deficits against a fitted GPD; two-sample forms
//! compare two empirical sets (used when scoring generated samples, where
//! there is no parametric model on the synthetic side).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gpd::{ExceedanceSet, GpdParams, gpd_cdf, gpd_quantile};
use crate::stats;

/// Matched (empirical, model) quantile pairs at Hazen plotting positions
/// `p_i = (i - 0.5) / n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QqPoints {
    pub empirical: Vec<f64>,
    pub model: Vec<f64>,
}

impl QqPoints {
    pub fn len(&self) -> usize {
        self.empirical.len()
    }

    pub fn is_empty(&self) -> bool {
        self.empirical.is_empty()
    }
}

/// Quantile pairs of deficits against a GPD: empirical quantiles are the
/// sorted deficits, model quantiles the GPD inverse CDF at the same
/// plotting positions.
pub fn qq_points(exceedances: &ExceedanceSet, model: &GpdParams) -> Result<QqPoints> {
    let n = exceedances.len();
    if n < 2 {
        return Err(Error::degenerate(format!(
            "QQ pairs need at least 2 deficits, got {n}"
        )));
    }
    let empirical = stats::sorted_copy(exceedances.deficits());
    let model_q = (1..=n)
        .map(|i| gpd_quantile((i as f64 - 0.5) / n as f64, model))
        .collect::<Result<Vec<f64>>>()?;
    Ok(QqPoints {
        empirical,
        model: model_q,
    })
}

/// Two-sample QQ pairs: both sets reduced to quantiles at the Hazen
/// positions of the smaller set.
pub fn qq_points_two_sample(a: &[f64], b: &[f64]) -> Result<QqPoints> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::degenerate(format!(
            "two-sample QQ needs at least 2 points per set, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let sa = stats::sorted_copy(a);
    let sb = stats::sorted_copy(b);
    let n = sa.len().min(sb.len());
    let mut empirical = Vec::with_capacity(n);
    let mut model = Vec::with_capacity(n);
    for i in 1..=n {
        let p = (i as f64 - 0.5) / n as f64;
        empirical.push(stats::quantile_sorted(&sa, p));
        model.push(stats::quantile_sorted(&sb, p));
    }
    Ok(QqPoints { empirical, model })
}

/// Exact one-sample KS statistic of the deficits against the model CDF:
/// `max_i max(i/n - G(z_(i)), G(z_(i)) - (i-1)/n)`.
pub fn ks_statistic(exceedances: &ExceedanceSet, model: &GpdParams) -> Result<f64> {
    ks_statistic_values(exceedances.deficits(), model)
}

/// [`ks_statistic`] on a bare deficit slice.
pub fn ks_statistic_values(deficits: &[f64], model: &GpdParams) -> Result<f64> {
    let n = deficits.len();
    if n == 0 {
        return Err(Error::degenerate("KS statistic of an empty set"));
    }
    let sorted = stats::sorted_copy(deficits);
    let nf = n as f64;
    let mut ks: f64 = 0.0;
    for (i, z) in sorted.iter().enumerate() {
        let g = gpd_cdf(*z, model);
        ks = ks.max((i + 1) as f64 / nf - g).max(g - i as f64 / nf);
    }
    Ok(ks)
}

/// Two-sample KS statistic between empirical sets.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::degenerate("two-sample KS with an empty set"));
    }
    let sa = stats::sorted_copy(a);
    let sb = stats::sorted_copy(b);
    let (na, nb) = (sa.len() as f64, sb.len() as f64);
    let mut i = 0;
    let mut j = 0;
    let mut ks: f64 = 0.0;
    // Advance past every copy of the current value in both samples before
    // measuring, so ties never produce a spurious gap.
    while i < sa.len() && j < sb.len() {
        let x = if sa[i] <= sb[j] { sa[i] } else { sb[j] };
        while i < sa.len() && sa[i] == x {
            i += 1;
        }
        while j < sb.len() && sb[j] == x {
            j += 1;
        }
        ks = ks.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(ks)
}

/// Quantile-domain error metrics over matched QQ pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantileErrors {
    pub mse: f64,
    pub rmse: f64,
    pub mae: f64,
}

pub fn quantile_errors(qq: &QqPoints) -> Result<QuantileErrors> {
    if qq.is_empty() {
        return Err(Error::degenerate("quantile errors of empty QQ set"));
    }
    let n = qq.len() as f64;
    let mut mse = 0.0;
    let mut mae = 0.0;
    for (e, m) in qq.empirical.iter().zip(&qq.model) {
        let d = m - e;
        mse += d * d;
        mae += d.abs();
    }
    mse /= n;
    mae /= n;
    Ok(QuantileErrors {
        mse,
        rmse: mse.sqrt(),
        mae,
    })
}

/// Probability-plot correlation coefficient: Pearson correlation of the QQ
/// coordinates.
pub fn ppcc(qq: &QqPoints) -> Result<f64> {
    if qq.len() < 3 {
        return Err(Error::degenerate(format!(
            "PPCC needs at least 3 QQ pairs, got {}",
            qq.len()
        )));
    }
    let me = stats::mean(&qq.empirical);
    let mm = stats::mean(&qq.model);
    let mut cov = 0.0;
    let mut ve = 0.0;
    let mut vm = 0.0;
    for (e, m) in qq.empirical.iter().zip(&qq.model) {
        cov += (e - me) * (m - mm);
        ve += (e - me) * (e - me);
        vm += (m - mm) * (m - mm);
    }
    if ve == 0.0 || vm == 0.0 {
        return Err(Error::degenerate("PPCC with zero-variance coordinates"));
    }
    Ok((cov / (ve.sqrt() * vm.sqrt())).clamp(-1.0, 1.0))
}
