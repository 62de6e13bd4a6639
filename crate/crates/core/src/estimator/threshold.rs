//! Threshold-network training.
//!
//! The loss per window has two parts. A fit term scores the current
//! threshold by how well a provisional GPD (method of moments, treated as
//! constant) explains the declustered deficits beneath it; membership of the
//! deficit set is frozen per step while the deficits themselves stay
//! differentiable in the threshold. A tail-size penalty pushes the soft
//! exceedance count `sum sigmoid((u - y_i)/h)` above `n_min` so the fit term
//! cannot win by emptying the tail. Windows whose deficit set is too small
//! or degenerate for a provisional fit contribute only the penalty term:
//! fewer than two members, all members identical, or a fit so tight that
//! some member's negative log density exceeds `PROVISIONAL_NLL_CAP` (a
//! moment fit on two near-identical deficits puts its scale at the floor,
//! and the resulting astronomic fit terms would drown every healthy window
//! in the batch).

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gpd::{GpdParams, decluster_runs, extract_exceedances, fit_gpd_moments, neg_log_pdf_dz};
use crate::nn::{Activation, AdamState, DenseNet, NetGrads, adam_update, sigmoid};
use crate::seed;
use crate::window::{WindowSet, WindowStats};

use super::{EstimatorConfig, ThresholdEpoch, threshold_from_raw};

pub(crate) const GRAD_CLIP: f64 = 5.0;
pub(crate) const MAX_LR_HALVINGS: usize = 4;
/// Per-member cap above which a provisional fit counts as degenerate.
const PROVISIONAL_NLL_CAP: f64 = 50.0;

/// One window's frozen ingredients for a loss evaluation.
struct WindowCtx {
    std: Vec<f64>,
    stats: WindowStats,
    values: Vec<f64>,
    /// Sample values (dB) of the declustered deficit members at the
    /// threshold the context was built with.
    members: Vec<f64>,
    /// Provisional moment fit over those members, held constant.
    provisional: Option<GpdParams>,
}

/// Frozen memberships and provisional fits for one batch, so the loss is a
/// smooth function of the network parameters until the context is rebuilt.
pub(crate) struct ThresholdContext {
    windows: Vec<WindowCtx>,
}

impl ThresholdContext {
    pub(crate) fn build(
        net: &DenseNet,
        windows: &WindowSet,
        indices: &[usize],
        cfg: &EstimatorConfig,
    ) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::invalid("threshold loss needs a nonempty batch"));
        }
        let raws = batch_raws(net, windows, indices)?;
        let mut ctx = Vec::with_capacity(indices.len());
        for (&i, &raw) in indices.iter().zip(&raws) {
            let values = windows.window(i).to_vec();
            let stats = *windows.stats(i);
            let (u_hat, _) = threshold_from_raw(raw, &stats);
            let exceed = extract_exceedances(&values, u_hat)?;
            let declustered = decluster_runs(&exceed, cfg.decluster_gap);
            let provisional = fit_gpd_moments(&declustered).ok().filter(|p| {
                declustered
                    .deficits()
                    .iter()
                    .map(|&z| neg_log_pdf_dz(z, p.xi(), p.beta()).0)
                    .all(|nl| nl.is_finite() && nl <= PROVISIONAL_NLL_CAP)
            });
            let members = if provisional.is_some() {
                declustered.indices().iter().map(|&j| values[j]).collect()
            } else {
                Vec::new()
            };
            ctx.push(WindowCtx {
                std: windows.net_input(i),
                stats,
                values,
                members,
                provisional,
            });
        }
        Ok(Self { windows: ctx })
    }

    fn input_matrix(&self) -> DMatrix<f64> {
        let rows = self.windows.len();
        let cols = self.windows[0].std.len();
        DMatrix::from_fn(rows, cols, |r, c| self.windows[r].std[c])
    }
}

fn batch_raws(net: &DenseNet, windows: &WindowSet, indices: &[usize]) -> Result<Vec<f64>> {
    if windows.window_len() != net.in_dim() {
        return Err(Error::DimensionMismatch {
            expected: net.in_dim(),
            got: windows.window_len(),
        });
    }
    let rows: Vec<Vec<f64>> = indices.iter().map(|&i| windows.net_input(i)).collect();
    let input = DMatrix::from_fn(indices.len(), windows.window_len(), |r, c| rows[r][c]);
    let out = net.infer(&input)?;
    Ok((0..indices.len()).map(|r| out[(r, 0)]).collect())
}

/// Loss and d(loss)/d(raw) for one window at the given raw net output.
fn window_loss(ctx: &WindowCtx, raw: f64, cfg: &EstimatorConfig) -> (f64, f64) {
    let (u_hat, du_draw) = threshold_from_raw(raw, &ctx.stats);
    let mut loss = 0.0;
    let mut d_loss_du = 0.0;

    if let Some(p) = &ctx.provisional {
        for y in &ctx.members {
            let (nl, d_z) = neg_log_pdf_dz(u_hat - y, p.xi(), p.beta());
            loss += nl;
            d_loss_du += d_z;
        }
    }

    let mut soft_count = 0.0;
    let mut d_count_du = 0.0;
    for y in &ctx.values {
        let s = sigmoid((u_hat - y) / cfg.bandwidth_db);
        soft_count += s;
        d_count_du += s * (1.0 - s) / cfg.bandwidth_db;
    }
    let shortfall = cfg.n_min as f64 - soft_count;
    if shortfall > 0.0 {
        loss += cfg.lambda_tail * shortfall * shortfall;
        d_loss_du += cfg.lambda_tail * 2.0 * shortfall * (-d_count_du);
    }

    (loss, d_loss_du * du_draw)
}

/// Mean batch loss and its gradient through the network, with memberships
/// and provisional fits frozen in `ctx`.
pub(crate) fn loss_with_context(
    net: &DenseNet,
    ctx: &ThresholdContext,
    cfg: &EstimatorConfig,
) -> Result<(f64, NetGrads)> {
    let input = ctx.input_matrix();
    let (out, tape) = net.forward(&input)?;
    let n = ctx.windows.len() as f64;
    let mut total = 0.0;
    let mut out_grad = DMatrix::zeros(ctx.windows.len(), 1);
    for (r, w) in ctx.windows.iter().enumerate() {
        let (loss, d_raw) = window_loss(w, out[(r, 0)], cfg);
        total += loss;
        out_grad[(r, 0)] = d_raw / n;
    }
    let (grads, _) = net.backward(&tape, &out_grad)?;
    Ok((total / n, grads))
}

fn loss_value(net: &DenseNet, ctx: &ThresholdContext, cfg: &EstimatorConfig) -> Result<f64> {
    let out = net.infer(&ctx.input_matrix())?;
    let total: f64 = ctx
        .windows
        .iter()
        .enumerate()
        .map(|(r, w)| window_loss(w, out[(r, 0)], cfg).0)
        .sum();
    Ok(total / ctx.windows.len() as f64)
}

/// Threshold loss over a batch of windows: rebuilds memberships at the
/// current thresholds, then returns the mean loss and its gradient with
/// respect to the threshold network.
pub fn threshold_loss(
    threshold_net: &DenseNet,
    windows: &WindowSet,
    indices: &[usize],
    cfg: &EstimatorConfig,
) -> Result<(f64, NetGrads)> {
    let ctx = ThresholdContext::build(threshold_net, windows, indices, cfg)?;
    loss_with_context(threshold_net, &ctx, cfg)
}

/// Trains a fresh threshold network on the given windows.
///
/// Adam with plateau scheduling: when the validation loss fails to improve
/// by at least 1% for `patience` epochs, the learning rate halves; after
/// four halvings another stall stops training. The best-validation
/// parameters are restored before returning.
pub fn train_threshold_net(
    windows: &WindowSet,
    cfg: &EstimatorConfig,
    root_seed: u64,
) -> Result<(DenseNet, Vec<ThresholdEpoch>)> {
    cfg.validate()?;
    if windows.len() < 100 {
        return Err(Error::degenerate(format!(
            "threshold training needs at least 100 windows, got {}",
            windows.len()
        )));
    }
    if windows.window_len() != cfg.window {
        return Err(Error::DimensionMismatch {
            expected: cfg.window,
            got: windows.window_len(),
        });
    }

    let mut init_rng = ChaCha8Rng::seed_from_u64(seed::derive(root_seed, "net.threshold"));
    let mut net = DenseNet::init(
        &[cfg.window, 64, 64, 1],
        Activation::Relu,
        Activation::Identity,
        &mut init_rng,
    )?;

    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut split_rng = ChaCha8Rng::seed_from_u64(seed::derive(root_seed, "threshold.split"));
    order.shuffle(&mut split_rng);
    let n_val = ((windows.len() as f64 * cfg.val_fraction).round() as usize)
        .clamp(1, windows.len() - 1);
    let val_idx: Vec<usize> = order[..n_val].to_vec();
    let train_idx: Vec<usize> = order[n_val..].to_vec();

    let mut opt = AdamState::new(net.param_count(), cfg.lr_threshold, 0.9, 0.999)?;
    let mut history = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_params = net.params_flat();
    let mut stall = 0usize;
    let mut halvings = 0usize;

    for epoch in 0..cfg.epochs {
        let mut epoch_rng =
            ChaCha8Rng::seed_from_u64(seed::derive_indexed(root_seed, "threshold.epoch", epoch as u64));
        let mut idx = train_idx.clone();
        idx.shuffle(&mut epoch_rng);

        let mut train_loss = 0.0;
        for chunk in idx.chunks(cfg.batch_size) {
            let ctx = ThresholdContext::build(&net, windows, chunk, cfg)?;
            let (loss, grads) = loss_with_context(&net, &ctx, cfg)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite("threshold training loss".into()));
            }
            adam_update(&mut net, &mut opt, &grads, Some(GRAD_CLIP))?;
            train_loss += loss * chunk.len() as f64;
        }
        train_loss /= train_idx.len() as f64;

        let val_ctx = ThresholdContext::build(&net, windows, &val_idx, cfg)?;
        let val_loss = loss_value(&net, &val_ctx, cfg)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite("threshold validation loss".into()));
        }

        let is_best = val_loss < best_val;
        let improved_enough = val_loss <= best_val - 0.01 * best_val.abs().max(1e-8);
        if is_best {
            best_val = val_loss;
            best_params = net.params_flat();
        }
        if improved_enough {
            stall = 0;
        } else {
            stall += 1;
        }
        history.push(ThresholdEpoch {
            epoch,
            train_loss,
            val_loss,
            lr: opt.lr,
            is_best,
        });

        if stall >= cfg.patience {
            if halvings >= MAX_LR_HALVINGS {
                break;
            }
            opt.lr /= 2.0;
            halvings += 1;
            stall = 0;
        }
    }

    net.set_params_flat(&best_params)?;
    Ok((net, history))
}
