//! Model scoring on held-out windows.
//!
//! Every source is reduced to the same currency: per regime, a pool of
//! declustered real deficits and something to compare them against, either
//! fitted GPD parameters (window estimator, pooled MLE, oracle) or a bag of
//! synthetic samples (generative baselines, scored two-sample). Pooling
//! across windows keeps the exceedance counts large enough for stable
//! quantile metrics while the per-window KS breakdown preserves the
//! distribution-over-windows view.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::GroundTruth;
use crate::diagnostics::{
    QqPoints, ks_statistic_values, ks_two_sample, ppcc, qq_points, qq_points_two_sample,
    quantile_errors,
};
use crate::error::{Error, Result};
use crate::estimator::{EstimatorConfig, EstimatorNets, PreparedWindows, ThresholdMode};
use crate::gpd::{ExceedanceSet, GpdParams, decluster_runs, extract_exceedances, fit_gpd_mle};
use crate::series::SampleSeries;
use crate::stats;
use crate::window::WindowSet;

/// Fewest pooled deficits a regime needs before its metrics mean anything;
/// also the PPCC minimum.
const MIN_POOLED: usize = 3;

/// Threshold quantile used when a pooled MLE picks its own tail onset.
const MLE_THRESHOLD_QUANTILE: f64 = 0.05;

/// Synthetic draws to score against one regime's real tail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleTailSet {
    pub regime: u32,
    /// Tail onset in dB; deficits are taken below it on both sides.
    pub threshold_db: f64,
    /// Raw synthetic samples in dB, bulk included.
    pub values: Vec<f64>,
}

/// What is being evaluated.
pub enum EvalSource<'a> {
    /// The window estimator: per-window thresholds and parameters, pooled
    /// per regime by count-weighted averaging.
    Estimator {
        name: String,
        nets: &'a EstimatorNets,
        mode: ThresholdMode,
    },
    /// A classical fit per regime on its own series, which may be far
    /// longer than the evaluation windows; its threshold is the regime's
    /// empirical 5% quantile and its parameters come from the MLE.
    PooledMle {
        name: String,
        series: &'a SampleSeries,
    },
    /// The generating parameters themselves.
    Oracle {
        name: String,
        truth: &'a GroundTruth,
    },
    /// Synthetic sample pools, scored two-sample against the real tails.
    Samples {
        name: String,
        sets: Vec<SampleTailSet>,
    },
}

impl EvalSource<'_> {
    pub fn name(&self) -> &str {
        match self {
            EvalSource::Estimator { name, .. }
            | EvalSource::PooledMle { name, .. }
            | EvalSource::Oracle { name, .. }
            | EvalSource::Samples { name, .. } => name,
        }
    }
}

/// Table-row metrics for one regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeMetrics {
    pub regime: u32,
    /// Pooled declustered deficits behind these numbers.
    pub n_exceed: usize,
    pub ks: f64,
    pub mse: f64,
    pub rmse: f64,
    pub mae: f64,
    pub ppcc: f64,
    /// Fitted shape, absent for two-sample sources.
    pub xi: Option<f64>,
    /// Fitted scale in dB, absent for two-sample sources.
    pub beta: Option<f64>,
    pub qq: QqPoints,
}

/// Count-weighted roll-up over regimes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub n_exceed: usize,
    pub ks: f64,
    pub mse: f64,
    /// `sqrt` of the aggregate MSE, never an average of per-regime RMSEs.
    pub rmse: f64,
    pub mae: f64,
    pub ppcc: f64,
}

/// One-sample KS of a single window's deficits against the parameters the
/// source assigns to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowMetric {
    pub window: usize,
    pub regime: u32,
    pub n_exceed: usize,
    pub ks: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub model: String,
    pub regimes: Vec<RegimeMetrics>,
    pub aggregate: AggregateMetrics,
    /// Empty for two-sample sources, which have no per-window parameters.
    pub per_window: Vec<WindowMetric>,
}

/// One regime reduced to scoreable pieces.
struct RegimePool {
    regime: u32,
    deficits: Vec<f64>,
    params: Option<GpdParams>,
    synthetic: Option<Vec<f64>>,
    per_window: Vec<WindowMetric>,
}

/// Score a source on evaluation windows. Regimes whose pooled deficit
/// count falls below a small floor are skipped with a warning; if every
/// regime is skipped the evaluation set carries no usable tail and this
/// errors.
pub fn evaluate_model(
    source: &EvalSource,
    windows: &WindowSet,
    cfg: &EstimatorConfig,
) -> Result<DiagnosticsReport> {
    if windows.is_empty() {
        return Err(Error::degenerate("no evaluation windows"));
    }
    let pools = match source {
        EvalSource::Estimator { nets, mode, .. } => pool_estimator(nets, *mode, windows, cfg)?,
        EvalSource::PooledMle { series, .. } => pool_mle(series, windows, cfg)?,
        EvalSource::Oracle { truth, .. } => pool_oracle(truth, windows, cfg)?,
        EvalSource::Samples { sets, .. } => pool_samples(sets, windows, cfg)?,
    };

    let mut regimes = Vec::new();
    let mut per_window = Vec::new();
    for pool in pools {
        if pool.deficits.len() < MIN_POOLED {
            log::warn!(
                "regime {}: only {} pooled deficits, skipping",
                pool.regime,
                pool.deficits.len()
            );
            continue;
        }
        let metrics = match score_pool(&pool) {
            Ok(m) => m,
            Err(e) => {
                log::warn!("regime {}: scoring failed ({e}), skipping", pool.regime);
                continue;
            }
        };
        regimes.push(metrics);
        per_window.extend(pool.per_window);
    }
    if regimes.is_empty() {
        return Err(Error::degenerate(
            "no regime had enough exceedances to score",
        ));
    }
    let aggregate = aggregate_over(&regimes);
    per_window.sort_by_key(|w| w.window);
    Ok(DiagnosticsReport {
        model: source.name().to_string(),
        regimes,
        aggregate,
        per_window,
    })
}

fn score_pool(pool: &RegimePool) -> Result<RegimeMetrics> {
    let (ks, qq, xi, beta) = match (&pool.params, &pool.synthetic) {
        (Some(params), None) => {
            let set = ExceedanceSet::from_deficits(0.0, pool.deficits.clone())?;
            let ks = ks_statistic_values(pool.deficits.as_slice(), params)?;
            let qq = qq_points(&set, params)?;
            (ks, qq, Some(params.xi()), Some(params.beta()))
        }
        (None, Some(synth)) => {
            if synth.is_empty() {
                // A generator that never reaches the tail gets the worst
                // possible scores rather than NaN: KS pegged at 1, PPCC 0,
                // and a model quantile of zero at every plotting position.
                let empirical = stats::sorted_copy(&pool.deficits);
                let model = vec![0.0; empirical.len()];
                let qq = QqPoints { empirical, model };
                let errs = quantile_errors(&qq)?;
                return Ok(RegimeMetrics {
                    regime: pool.regime,
                    n_exceed: pool.deficits.len(),
                    ks: 1.0,
                    mse: errs.mse,
                    rmse: errs.rmse,
                    mae: errs.mae,
                    ppcc: 0.0,
                    xi: None,
                    beta: None,
                    qq,
                });
            }
            let ks = ks_two_sample(&pool.deficits, synth)?;
            let qq = qq_points_two_sample(&pool.deficits, synth)?;
            (ks, qq, None, None)
        }
        _ => unreachable!("a pool carries exactly one of params or synthetic"),
    };
    let errs = quantile_errors(&qq)?;
    let p = ppcc(&qq)?;
    Ok(RegimeMetrics {
        regime: pool.regime,
        n_exceed: pool.deficits.len(),
        ks,
        mse: errs.mse,
        rmse: errs.rmse,
        mae: errs.mae,
        ppcc: p,
        xi,
        beta,
        qq,
    })
}

fn aggregate_over(regimes: &[RegimeMetrics]) -> AggregateMetrics {
    let total: usize = regimes.iter().map(|r| r.n_exceed).sum();
    let tf = total as f64;
    let wmean = |f: fn(&RegimeMetrics) -> f64| {
        regimes
            .iter()
            .map(|r| f(r) * r.n_exceed as f64)
            .sum::<f64>()
            / tf
    };
    let mse = wmean(|r| r.mse);
    AggregateMetrics {
        n_exceed: total,
        ks: wmean(|r| r.ks),
        mse,
        rmse: mse.sqrt(),
        mae: wmean(|r| r.mae),
        ppcc: wmean(|r| r.ppcc),
    }
}

fn regime_groups(windows: &WindowSet) -> BTreeMap<u32, Vec<usize>> {
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for i in 0..windows.len() {
        groups.entry(windows.regime(i).unwrap_or(0)).or_default().push(i);
    }
    groups
}

/// Pool each window's deficits at a shared per-regime threshold.
fn pool_at_threshold(
    windows: &WindowSet,
    idxs: &[usize],
    regime: u32,
    threshold_db: f64,
    gap: usize,
    params_for_ks: Option<&GpdParams>,
) -> Result<RegimePool> {
    let mut deficits = Vec::new();
    let mut per_window = Vec::new();
    for &i in idxs {
        let exceed = extract_exceedances(windows.window(i), threshold_db)?;
        let declustered = decluster_runs(&exceed, gap);
        if declustered.is_empty() {
            continue;
        }
        if let Some(params) = params_for_ks {
            per_window.push(WindowMetric {
                window: i,
                regime,
                n_exceed: declustered.len(),
                ks: ks_statistic_values(declustered.deficits(), params)?,
            });
        }
        deficits.extend_from_slice(declustered.deficits());
    }
    Ok(RegimePool {
        regime,
        deficits,
        params: params_for_ks.copied(),
        synthetic: None,
        per_window,
    })
}

fn pool_estimator(
    nets: &EstimatorNets,
    mode: ThresholdMode,
    windows: &WindowSet,
    cfg: &EstimatorConfig,
) -> Result<Vec<RegimePool>> {
    let prepared = PreparedWindows::prepare(nets, mode, windows, cfg)?;
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, item) in prepared.items.iter().enumerate() {
        groups.entry(item.regime).or_default().push(i);
    }
    let mut pools = Vec::new();
    for (regime, idxs) in groups {
        // Per-window parameters, de-standardized; the regime-level score
        // uses their deficit-count-weighted mean so heavily censored
        // windows do not drown out the ones that saw the tail.
        let mut deficits = Vec::new();
        let mut per_window = Vec::new();
        let mut xi_sum = 0.0;
        let mut beta_sum = 0.0;
        let mut weight = 0.0;
        for &i in &idxs {
            let item = &prepared.items[i];
            if item.deficits.is_empty() {
                continue;
            }
            let head = crate::estimator::param_head(&nets.params, &item.std)?;
            let params = GpdParams::new(head.xi, head.beta0 * item.iqr)?;
            let w = item.deficits.len() as f64;
            per_window.push(WindowMetric {
                window: i,
                regime,
                n_exceed: item.deficits.len(),
                ks: ks_statistic_values(&item.deficits, &params)?,
            });
            deficits.extend_from_slice(&item.deficits);
            xi_sum += params.xi() * w;
            beta_sum += params.beta() * w;
            weight += w;
        }
        let params = if weight > 0.0 {
            Some(GpdParams::new(xi_sum / weight, beta_sum / weight)?)
        } else {
            None
        };
        pools.push(RegimePool {
            regime,
            deficits,
            params,
            synthetic: None,
            per_window,
        });
    }
    Ok(pools)
}

fn pool_mle(
    series: &SampleSeries,
    windows: &WindowSet,
    cfg: &EstimatorConfig,
) -> Result<Vec<RegimePool>> {
    // Group the fitting series by its own labels; unlabeled means one pool.
    let mut fit_groups: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    match series.regimes() {
        Some(labels) => {
            for (v, &r) in series.values().iter().zip(labels) {
                fit_groups.entry(r).or_default().push(*v);
            }
        }
        None => {
            fit_groups.insert(0, series.values().to_vec());
        }
    }
    let mut pools = Vec::new();
    for (regime, idxs) in regime_groups(windows) {
        let Some(values) = fit_groups.get(&regime) else {
            log::warn!("regime {regime}: no fitting samples in the MLE series, skipping");
            continue;
        };
        let sorted = stats::sorted_copy(values);
        let threshold = stats::quantile_sorted(&sorted, MLE_THRESHOLD_QUANTILE);
        let exceed = extract_exceedances(values, threshold)?;
        let declustered = decluster_runs(&exceed, cfg.decluster_gap);
        let fit = match fit_gpd_mle(&declustered) {
            Ok(f) => f,
            Err(e) => {
                log::warn!("regime {regime}: pooled MLE failed ({e}), skipping");
                continue;
            }
        };
        pools.push(pool_at_threshold(
            windows,
            &idxs,
            regime,
            threshold,
            cfg.decluster_gap,
            Some(&fit.params),
        )?);
    }
    Ok(pools)
}

fn pool_oracle(
    truth: &GroundTruth,
    windows: &WindowSet,
    cfg: &EstimatorConfig,
) -> Result<Vec<RegimePool>> {
    let mut pools = Vec::new();
    for (regime, idxs) in regime_groups(windows) {
        let Some(spec) = truth.regimes.get(regime as usize) else {
            return Err(Error::domain(format!(
                "window regime {regime} has no ground-truth entry"
            )));
        };
        pools.push(pool_at_threshold(
            windows,
            &idxs,
            regime,
            spec.u_star_db,
            cfg.decluster_gap,
            Some(&spec.tail_params()?),
        )?);
    }
    Ok(pools)
}

fn pool_samples(
    sets: &[SampleTailSet],
    windows: &WindowSet,
    cfg: &EstimatorConfig,
) -> Result<Vec<RegimePool>> {
    if sets.is_empty() {
        return Err(Error::invalid("no synthetic sample sets to score"));
    }
    let groups = regime_groups(windows);
    let mut pools = Vec::new();
    for set in sets {
        let Some(idxs) = groups.get(&set.regime) else {
            log::warn!(
                "regime {}: no evaluation windows carry this label, skipping",
                set.regime
            );
            continue;
        };
        let mut pool = pool_at_threshold(
            windows,
            idxs,
            set.regime,
            set.threshold_db,
            cfg.decluster_gap,
            None,
        )?;
        // Synthetic deficits are not declustered: generated samples carry
        // no temporal ordering.
        pool.synthetic = Some(
            set.values
                .iter()
                .filter(|&&v| v < set.threshold_db)
                .map(|&v| set.threshold_db - v)
                .collect(),
        );
        pools.push(pool);
    }
    Ok(pools)
}
