//! Likelihood baseline for the parameter network.
//!
//! Same architecture and data pipeline as the adversarial trainer, but the
//! objective is the mean GPD negative log likelihood of each window's
//! declustered deficits under the predicted (shape, scale). Seeding of the
//! split and the per-epoch shuffles matches the adversarial loop, so a
//! comparison run sees identical batches. Early stopping and checkpointing
//! also mirror the adversarial loop: best validation KS with patience.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gpd::neg_log_pdf_grad;
use crate::nn::{AdamState, DenseNet, NetGrads, adam_update};
use crate::seed;
use crate::window::WindowSet;

use super::adversarial::{
    PreparedWindow, PreparedWindows, split_train_val, stratified_batches, validation_ks,
};
use super::threshold::GRAD_CLIP;
use super::{EstimatorConfig, EstimatorNets, ParamHead, ThresholdMode};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlEpoch {
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: f64,
    pub val_ks: f64,
    pub is_best: bool,
}

/// Mean-per-deficit NLL of one window under the network's current heads.
fn window_nll(head: &ParamHead, win: &PreparedWindow) -> (f64, f64, f64) {
    let beta_eff = head.beta0 * win.iqr;
    let n = win.deficits.len() as f64;
    let mut nll = 0.0;
    let mut d_xi = 0.0;
    let mut d_beta = 0.0;
    for &z in &win.deficits {
        let (l, gx, gb) = neg_log_pdf_grad(z, head.xi, beta_eff);
        nll += l;
        d_xi += gx;
        d_beta += gb;
    }
    (nll / n, d_xi / n, d_beta / n)
}

fn batch_loss(param_net: &DenseNet, wins: &[&PreparedWindow]) -> Result<(f64, NetGrads)> {
    let input = DMatrix::from_fn(wins.len(), wins[0].std.len(), |r, c| wins[r].std[c]);
    let (out, tape) = param_net.forward(&input)?;
    let b = wins.len() as f64;
    let mut loss = 0.0;
    let mut d_out = DMatrix::zeros(wins.len(), 2);
    for (k, win) in wins.iter().enumerate() {
        let head = ParamHead::from_outputs(out[(k, 0)], out[(k, 1)]);
        let (nll, d_xi, d_beta) = window_nll(&head, win);
        loss += nll / b;
        d_out[(k, 0)] = d_xi * head.dxi_do1() / b;
        d_out[(k, 1)] = d_beta * win.iqr * head.dbeta0_do2() / b;
    }
    let (grads, _) = param_net.backward(&tape, &d_out)?;
    Ok((loss, grads))
}

fn loss_value(param_net: &DenseNet, wins: &[&PreparedWindow]) -> Result<f64> {
    let input = DMatrix::from_fn(wins.len(), wins[0].std.len(), |r, c| wins[r].std[c]);
    let out = param_net.infer(&input)?;
    let b = wins.len() as f64;
    let mut loss = 0.0;
    for (k, win) in wins.iter().enumerate() {
        let head = ParamHead::from_outputs(out[(k, 0)], out[(k, 1)]);
        loss += window_nll(&head, win).0 / b;
    }
    Ok(loss)
}

fn gather<'a>(prepared: &'a PreparedWindows, idx: &[usize]) -> Vec<&'a PreparedWindow> {
    idx.iter()
        .map(|&i| &prepared.items[i])
        .filter(|w| !w.deficits.is_empty())
        .collect()
}

/// Trains the parameter network by direct likelihood instead of the
/// adversarial game. The threshold stays frozen exactly as in the
/// adversarial loop, and so do stopping and selection: best validation KS
/// with patience, best parameters restored at the end.
///
/// Selection deliberately does not use the validation NLL. One held-out
/// deficit outside a negative-shape support inflates the mean NLL without
/// bound, so its argmin pins to whichever early epoch avoided violations
/// rather than to fit quality. KS is bounded and compares the same thing
/// the adversarial trainer is selected on.
pub fn train_param_net_kl(
    nets: &mut EstimatorNets,
    windows: &WindowSet,
    mode: ThresholdMode,
    cfg: &EstimatorConfig,
    root_seed: u64,
) -> Result<Vec<KlEpoch>> {
    cfg.validate()?;
    let prepared = PreparedWindows::prepare(nets, mode, windows, cfg)?;
    let (train_idx, val_idx) = split_train_val(&prepared, cfg.val_fraction, root_seed)?;
    let val_wins = gather(&prepared, &val_idx);

    let mut opt = AdamState::new(nets.params.param_count(), cfg.lr_generator, 0.9, 0.999)?;
    let mut history = Vec::new();
    let mut best_ks = f64::INFINITY;
    let mut best_params = nets.params.params_flat();
    let mut since_best = 0usize;

    for epoch in 0..cfg.epochs {
        let mut epoch_rng =
            ChaCha8Rng::seed_from_u64(seed::derive_indexed(root_seed, "adv.epoch", epoch as u64));
        let batches = stratified_batches(&prepared, &train_idx, cfg.batch_size, &mut epoch_rng);

        let mut sum = 0.0;
        let mut steps = 0usize;
        for batch in &batches {
            let wins = gather(&prepared, batch);
            if wins.is_empty() {
                continue;
            }
            let (loss, grads) = batch_loss(&nets.params, &wins)?;
            adam_update(&mut nets.params, &mut opt, &grads, Some(GRAD_CLIP))?;
            sum += loss;
            steps += 1;
        }
        let train_nll = sum / steps.max(1) as f64;
        let val_nll = loss_value(&nets.params, &val_wins)?;
        if !(train_nll.is_finite() && val_nll.is_finite()) {
            return Err(Error::NonFinite("likelihood training loss".into()));
        }

        let val_ks = validation_ks(&nets.params, &prepared, &val_idx)?;
        let is_best = val_ks < best_ks;
        if is_best {
            best_ks = val_ks;
            best_params = nets.params.params_flat();
            since_best = 0;
        } else {
            since_best += 1;
        }
        history.push(KlEpoch {
            epoch,
            train_nll,
            val_nll,
            val_ks,
            is_best,
        });

        if since_best >= cfg.patience {
            break;
        }
    }

    nets.params.set_params_flat(&best_params)?;
    Ok(history)
}
