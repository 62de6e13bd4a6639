//! Online tail estimation: a threshold network picks where the lower tail
//! begins inside each window, a parameter network maps the window to GPD
//! shape and scale, and a discriminator trains the parameter network
//! adversarially against the window's real deficits.
//!
//! All three nets consume the standardized window `(x - median) / iqr`, so
//! regime-level dB offsets and scale changes do not move the inputs. The
//! threshold is mapped back to dB through the window's own min and median;
//! the scale output is multiplied by the window's IQR so the returned
//! [`TailModel`] lives in dB like the data it describes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gpd::{GpdParams, extract_exceedances, tail_probability};
use crate::nn::{Activation, DenseNet, sigmoid};
use crate::window::{WindowStats, net_input_with, stats_of};
use crate::{seed, stats};

mod adversarial;
mod kl;
mod threshold;

pub use adversarial::{
    AdversarialOutcome, FrozenAdversarialEval, PreparedWindows, adversarial_eval_frozen,
    adversarial_step, train_estimator,
};
pub use kl::{KlEpoch, train_param_net_kl};
pub use threshold::{threshold_loss, train_threshold_net};

/// The shape estimate is squashed to (-0.5, 0.5): within it the GPD has
/// finite variance, which the moment-based provisional fits assume too.
pub const XI_BOUND: f64 = 0.5;
const XI_CLAMP: f64 = XI_BOUND * (1.0 - 1e-12);
const BETA_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    /// Window length N_w.
    pub window: usize,
    /// Step between consecutive windows.
    pub stride: usize,
    /// Runs-declustering gap applied to each window's exceedances.
    pub decluster_gap: usize,
    /// Weight of the tail-size penalty in the threshold loss.
    pub lambda_tail: f64,
    /// Soft minimum number of exceedances per window.
    pub n_min: usize,
    /// Sigmoid bandwidth (dB) of the soft exceedance count.
    pub bandwidth_db: f64,
    pub lr_threshold: f64,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    /// Windows per mini-batch.
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without improvement before the threshold scheduler halves the
    /// learning rate, and before adversarial training stops early.
    pub patience: usize,
    /// Fraction of windows held out for validation.
    pub val_fraction: f64,
    /// Outage threshold (dB) for tail-probability reporting.
    pub x_th_db: Option<f64>,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            window: 100,
            stride: 1,
            decluster_gap: 10,
            lambda_tail: 1.0,
            n_min: 10,
            bandwidth_db: 0.25,
            lr_threshold: 5e-5,
            lr_generator: 2e-4,
            lr_discriminator: 4e-4,
            batch_size: 32,
            epochs: 200,
            patience: 10,
            val_fraction: 0.2,
            x_th_db: None,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 2 {
            return Err(Error::invalid("window must be at least 2"));
        }
        if self.stride == 0 {
            return Err(Error::invalid("stride must be positive"));
        }
        if self.n_min >= self.window {
            return Err(Error::invalid(format!(
                "n_min ({}) must be smaller than the window ({})",
                self.n_min, self.window
            )));
        }
        if !(self.lambda_tail >= 0.0 && self.lambda_tail.is_finite()) {
            return Err(Error::invalid("lambda_tail must be finite and non-negative"));
        }
        if !(self.bandwidth_db > 0.0 && self.bandwidth_db.is_finite()) {
            return Err(Error::invalid("bandwidth_db must be positive"));
        }
        for (name, lr) in [
            ("lr_threshold", self.lr_threshold),
            ("lr_generator", self.lr_generator),
            ("lr_discriminator", self.lr_discriminator),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {lr}")));
            }
        }
        if self.batch_size == 0 || self.epochs == 0 || self.patience == 0 {
            return Err(Error::invalid(
                "batch_size, epochs, and patience must be positive",
            ));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::invalid("val_fraction must lie in (0, 1)"));
        }
        if let Some(x) = self.x_th_db {
            if !x.is_finite() {
                return Err(Error::NonFinite("x_th_db".into()));
            }
        }
        Ok(())
    }
}

/// How the threshold is produced during adversarial training: the trained
/// network, or a fixed dB constant for the stability ablation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "snake_case")]
pub enum ThresholdMode {
    Learned,
    Constant(f64),
}

/// The three networks of the online estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorNets {
    /// window -> raw threshold position, squashed between min and median.
    pub threshold: DenseNet,
    /// window -> (o1, o2), mapped to (xi, beta).
    pub params: DenseNet,
    /// ln(1 + deficit) -> real/synthetic logit.
    pub discriminator: DenseNet,
}

impl EstimatorNets {
    pub fn init(window: usize, root_seed: u64) -> Result<Self> {
        let mut t_rng = ChaCha8Rng::seed_from_u64(seed::derive(root_seed, "net.threshold"));
        let mut p_rng = ChaCha8Rng::seed_from_u64(seed::derive(root_seed, "net.params"));
        let mut d_rng = ChaCha8Rng::seed_from_u64(seed::derive(root_seed, "net.discriminator"));
        Ok(Self {
            threshold: DenseNet::init(
                &[window, 64, 64, 1],
                Activation::Relu,
                Activation::Identity,
                &mut t_rng,
            )?,
            params: DenseNet::init(
                &[window, 64, 64, 2],
                Activation::Relu,
                Activation::Identity,
                &mut p_rng,
            )?,
            discriminator: DenseNet::init(
                &[1, 128, 128, 1],
                Activation::leaky_relu(),
                Activation::Identity,
                &mut d_rng,
            )?,
        })
    }

    pub fn window_len(&self) -> usize {
        self.threshold.in_dim()
    }

    fn check_window(&self, window_db: &[f64]) -> Result<()> {
        if window_db.len() != self.window_len() {
            return Err(Error::DimensionMismatch {
                expected: self.window_len(),
                got: window_db.len(),
            });
        }
        if window_db.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("window samples".into()));
        }
        Ok(())
    }
}

/// Maps the raw network output to a dB threshold strictly between the
/// window's min and median, and returns d(threshold)/d(raw) for backprop.
pub(crate) fn threshold_from_raw(raw: f64, stats: &WindowStats) -> (f64, f64) {
    let s = sigmoid(raw);
    let span = stats.median - stats.min;
    (stats.min + s * span, s * (1.0 - s) * span)
}

fn infer_scalar(net: &DenseNet, std_window: &[f64]) -> Result<Vec<f64>> {
    let input = nalgebra::DMatrix::from_row_slice(1, std_window.len(), std_window);
    let out = net.infer(&input)?;
    Ok(out.row(0).iter().copied().collect())
}

/// Threshold prediction for one window: `u = min + sigmoid(raw) * (median - min)`,
/// always strictly inside the window's lower half.
pub fn predict_threshold(nets: &EstimatorNets, window_db: &[f64]) -> Result<f64> {
    nets.check_window(window_db)?;
    let stats = stats_of(window_db);
    let std = net_input_with(window_db, &stats);
    let raw = infer_scalar(&nets.threshold, &std)?[0];
    Ok(threshold_from_raw(raw, &stats).0)
}

/// Raw parameter-head outputs and their squashed values, scale-free.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamHead {
    pub o1: f64,
    pub o2: f64,
    /// `XI_BOUND * tanh(o1)`, clamped strictly inside the bound.
    pub xi: f64,
    /// `softplus(o2) + 1e-6`, in standardized units.
    pub beta0: f64,
}

impl ParamHead {
    pub(crate) fn from_outputs(o1: f64, o2: f64) -> Self {
        let xi = (XI_BOUND * o1.tanh()).clamp(-XI_CLAMP, XI_CLAMP);
        let beta0 = crate::nn::softplus(o2) + BETA_FLOOR;
        Self { o1, o2, xi, beta0 }
    }

    pub(crate) fn dxi_do1(&self) -> f64 {
        let t = self.o1.tanh();
        XI_BOUND * (1.0 - t * t)
    }

    pub(crate) fn dbeta0_do2(&self) -> f64 {
        sigmoid(self.o2)
    }
}

pub(crate) fn param_head(net: &DenseNet, std_window: &[f64]) -> Result<ParamHead> {
    let out = infer_scalar(net, std_window)?;
    Ok(ParamHead::from_outputs(out[0], out[1]))
}

/// The parameter head alone: squashed (xi, beta) for one window, in
/// standardized units. For any finite raw outputs, xi is strictly inside
/// (-0.5, 0.5) and beta is strictly positive.
pub fn param_forward(nets: &EstimatorNets, window_db: &[f64]) -> Result<GpdParams> {
    nets.check_window(window_db)?;
    let stats = stats_of(window_db);
    let std = net_input_with(window_db, &stats);
    let head = param_head(&nets.params, &std)?;
    GpdParams::new(head.xi, head.beta0)
}

/// The tail summary the estimator emits per window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailModel {
    /// Estimated tail onset (dB).
    pub threshold_db: f64,
    /// GPD over deficits below the threshold, scale in dB.
    pub params: GpdParams,
    /// Window length.
    pub n_window: usize,
    /// Samples strictly below the threshold.
    pub n_exceed: usize,
    pub regime: Option<u32>,
}

impl TailModel {
    pub fn with_regime(mut self, regime: u32) -> Self {
        self.regime = Some(regime);
        self
    }

    /// P(Y < tau) under this model; `tau` must not exceed the threshold.
    pub fn tail_probability(&self, tau_db: f64) -> Result<f64> {
        tail_probability(
            self.threshold_db,
            &self.params,
            tau_db,
            self.n_window,
            self.n_exceed,
        )
    }
}

/// Full query path for one window: threshold, GPD parameters de-standardized
/// to dB scale, and exceedance counts. Pure in `(nets, window_db)`.
pub fn estimate(nets: &EstimatorNets, window_db: &[f64]) -> Result<TailModel> {
    nets.check_window(window_db)?;
    let stats = stats_of(window_db);
    let std = net_input_with(window_db, &stats);
    let raw = infer_scalar(&nets.threshold, &std)?[0];
    let (u_hat, _) = threshold_from_raw(raw, &stats);
    let head = param_head(&nets.params, &std)?;
    let params = GpdParams::new(head.xi, head.beta0 * stats.iqr)?;
    let n_exceed = extract_exceedances(window_db, u_hat)?.len();

    assert!(u_hat <= stats.median, "threshold above window median");
    assert!(n_exceed <= window_db.len());
    Ok(TailModel {
        threshold_db: u_hat,
        params,
        n_window: window_db.len(),
        n_exceed,
        regime: None,
    })
}

/// Per-epoch record of threshold-net training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    /// True when this epoch improved the best validation loss and its
    /// parameters were checkpointed.
    pub is_best: bool,
}

/// Per-epoch record of adversarial training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialEpoch {
    pub epoch: usize,
    pub loss_d: f64,
    pub loss_g: f64,
    /// Exceedance-weighted mean KS between validation deficits and each
    /// window's predicted GPD.
    pub val_ks: f64,
    pub is_best: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub threshold: Vec<ThresholdEpoch>,
    pub adversarial: Vec<AdversarialEpoch>,
}

impl TrainingHistory {
    /// Standard deviation of the generator loss over the trailing `n`
    /// epochs; the stability measure for the fixed-threshold ablation.
    pub fn late_loss_g_std(&self, n: usize) -> Option<f64> {
        if self.adversarial.len() < n || n < 2 {
            return None;
        }
        let tail: Vec<f64> = self.adversarial[self.adversarial.len() - n..]
            .iter()
            .map(|e| e.loss_g)
            .collect();
        Some(stats::variance(&tail).sqrt())
    }
}
