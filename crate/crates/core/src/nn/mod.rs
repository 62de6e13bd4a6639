//! Minimal dense feedforward networks with hand-written reverse-mode
//! gradients.
//!
//! The estimation and augmentation nets are all small MLPs (at most a few
//! hundred units), trained with losses whose gradients we derive by hand,
//! so there is no general autodiff here: [`DenseNet::forward`] records the
//! per-layer inputs and pre-activations on a [`GradTape`], and
//! [`DenseNet::backward`] replays it for exact parameter and input
//! gradients. Batches are row-major: one sample per row.
//!
//! Parameter order everywhere (flattened vectors, checkpoints, optimizer
//! state) is layer by layer, each layer's weight matrix row-major
//! (`out_dim x in_dim`) followed by its bias.

mod adam;
mod loss;
mod reparam;

pub use adam::{AdamState, adam_update, clip_global_norm};
pub use loss::bce_with_logits;
pub use reparam::{PathwiseSample, gpd_reparam_draw, gpd_reparam_sample};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for strictly positive arguments.
pub(crate) fn softplus_inv(y: f64) -> f64 {
    debug_assert!(y > 0.0);
    // ln(e^y - 1) = y + ln(1 - e^-y), stable for large y.
    y + (-(-y).exp()).ln_1p()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu { slope: f64 },
    Tanh,
    Softplus,
    Sigmoid,
}

impl Activation {
    /// The conventional leaky rectifier with slope 0.01.
    pub fn leaky_relu() -> Self {
        Activation::LeakyRelu { slope: 0.01 }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu { slope } => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Softplus => softplus(x),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative as a function of the pre-activation.
    pub fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu { slope } => {
                if pre > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
            Activation::Softplus => sigmoid(pre),
            Activation::Sigmoid => {
                let s = sigmoid(pre);
                s * (1.0 - s)
            }
        }
    }

    fn is_rectifier(self) -> bool {
        matches!(self, Activation::Relu | Activation::LeakyRelu { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `out_dim x in_dim`.
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }
}

/// A fully connected feedforward network.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layers: Vec<DenseLayer>,
    /// Bumped on every parameter mutation; tapes remember the version they
    /// were recorded against so stale reuse is an error instead of silently
    /// wrong gradients.
    version: u64,
}

/// Per-layer record of a forward pass, consumed by [`DenseNet::backward`].
#[derive(Debug, Clone)]
pub struct GradTape {
    net_version: u64,
    inputs: Vec<DMatrix<f64>>,
    pre_activations: Vec<DMatrix<f64>>,
}

impl GradTape {
    pub fn batch_len(&self) -> usize {
        self.inputs.first().map_or(0, |m| m.nrows())
    }
}

/// Parameter gradients in the same layout as the network's parameters.
#[derive(Debug, Clone)]
pub struct NetGrads {
    pub layers: Vec<(DMatrix<f64>, DVector<f64>)>,
}

impl NetGrads {
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            for r in 0..w.nrows() {
                for c in 0..w.ncols() {
                    out.push(w[(r, c)]);
                }
            }
            out.extend(b.iter().copied());
        }
        out
    }
}

impl DenseNet {
    /// Builds a network from explicit layers, validating the dimension
    /// chain.
    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("network needs at least one layer"));
        }
        for win in layers.windows(2) {
            if win[0].out_dim() != win[1].in_dim() {
                return Err(Error::DimensionMismatch {
                    expected: win[0].out_dim(),
                    got: win[1].in_dim(),
                });
            }
        }
        for layer in &layers {
            if layer.bias.len() != layer.out_dim() {
                return Err(Error::DimensionMismatch {
                    expected: layer.out_dim(),
                    got: layer.bias.len(),
                });
            }
        }
        Ok(Self { layers, version: 0 })
    }

    /// Seeded init: rectifier layers get He-uniform fan-in scaling, all
    /// others Xavier-uniform. Biases start at zero.
    pub fn init<R: Rng + ?Sized>(
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::invalid("network needs at least input and output dims"));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid("layer dimensions must be positive"));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for k in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[k], dims[k + 1]);
            let act = if k + 2 == dims.len() { output } else { hidden };
            let limit = if act.is_rectifier() {
                (6.0 / fan_in as f64).sqrt()
            } else {
                (6.0 / (fan_in + fan_out) as f64).sqrt()
            };
            let weights =
                DMatrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-limit..limit));
            layers.push(DenseLayer {
                weights,
                bias: DVector::zeros(fan_out),
                activation: act,
            });
        }
        Self::from_layers(layers)
    }

    /// All-zero parameters; handy in tests where the output must be the
    /// activation of zero.
    pub fn zeros(dims: &[usize], hidden: Activation, output: Activation) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::invalid("network needs at least input and output dims"));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid("layer dimensions must be positive"));
        }
        let layers = (0..dims.len() - 1)
            .map(|k| DenseLayer {
                weights: DMatrix::zeros(dims[k + 1], dims[k]),
                bias: DVector::zeros(dims[k + 1]),
                activation: if k + 2 == dims.len() { output } else { hidden },
            })
            .collect();
        Self::from_layers(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.out_dim() * (l.in_dim() + 1))
            .sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            for r in 0..layer.weights.nrows() {
                for c in 0..layer.weights.ncols() {
                    out.push(layer.weights[(r, c)]);
                }
            }
            out.extend(layer.bias.iter().copied());
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                expected: self.param_count(),
                got: params.len(),
            });
        }
        let mut k = 0;
        for layer in &mut self.layers {
            for r in 0..layer.weights.nrows() {
                for c in 0..layer.weights.ncols() {
                    layer.weights[(r, c)] = params[k];
                    k += 1;
                }
            }
            for b in layer.bias.iter_mut() {
                *b = params[k];
                k += 1;
            }
        }
        self.version += 1;
        Ok(())
    }

    /// Rescales the output layer's weights and overwrites its bias. Init
    /// helper for generators that must start at the data's scale and offset;
    /// bumps the parameter version like any other mutation.
    pub fn shape_output_layer(&mut self, weight_scale: f64, bias: &[f64]) -> Result<()> {
        let last = self.layers.len() - 1;
        if bias.len() != self.layers[last].out_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.layers[last].out_dim(),
                got: bias.len(),
            });
        }
        if !weight_scale.is_finite() {
            return Err(Error::NonFinite("output layer weight scale".into()));
        }
        self.layers[last].weights *= weight_scale;
        for (b, v) in self.layers[last].bias.iter_mut().zip(bias) {
            *b = *v;
        }
        self.version += 1;
        Ok(())
    }

    /// Forward pass recording a tape for [`Self::backward`].
    pub fn forward(&self, input: &DMatrix<f64>) -> Result<(DMatrix<f64>, GradTape)> {
        if input.ncols() != self.in_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.in_dim(),
                got: input.ncols(),
            });
        }
        let mut tape = GradTape {
            net_version: self.version,
            inputs: Vec::with_capacity(self.layers.len()),
            pre_activations: Vec::with_capacity(self.layers.len()),
        };
        let mut x = input.clone();
        for layer in &self.layers {
            let mut pre = &x * layer.weights.transpose();
            for r in 0..pre.nrows() {
                for c in 0..pre.ncols() {
                    pre[(r, c)] += layer.bias[c];
                }
            }
            tape.inputs.push(x);
            let post = pre.map(|v| layer.activation.apply(v));
            tape.pre_activations.push(pre);
            x = post;
        }
        Ok((x, tape))
    }

    /// Forward pass without gradient bookkeeping.
    pub fn infer(&self, input: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if input.ncols() != self.in_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.in_dim(),
                got: input.ncols(),
            });
        }
        let mut x = input.clone();
        for layer in &self.layers {
            let mut pre = &x * layer.weights.transpose();
            for r in 0..pre.nrows() {
                for c in 0..pre.ncols() {
                    pre[(r, c)] += layer.bias[c];
                }
            }
            x = pre.map(|v| layer.activation.apply(v));
        }
        Ok(x)
    }

    /// Reverse pass. `output_grad` is the loss gradient at the network
    /// output (batch x out_dim); returns parameter gradients and the loss
    /// gradient at the network input.
    pub fn backward(
        &self,
        tape: &GradTape,
        output_grad: &DMatrix<f64>,
    ) -> Result<(NetGrads, DMatrix<f64>)> {
        if tape.net_version != self.version {
            return Err(Error::StaleTape);
        }
        if tape.inputs.len() != self.layers.len() {
            return Err(Error::DimensionMismatch {
                expected: self.layers.len(),
                got: tape.inputs.len(),
            });
        }
        let last = self.layers.len() - 1;
        if output_grad.ncols() != self.layers[last].out_dim()
            || output_grad.nrows() != tape.batch_len()
        {
            return Err(Error::DimensionMismatch {
                expected: self.layers[last].out_dim() * tape.batch_len(),
                got: output_grad.ncols() * output_grad.nrows(),
            });
        }

        let mut grads = vec![None; self.layers.len()];
        let mut upstream = output_grad.clone();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let pre = &tape.pre_activations[k];
            let mut d_pre = upstream;
            for r in 0..d_pre.nrows() {
                for c in 0..d_pre.ncols() {
                    d_pre[(r, c)] *= layer.activation.derivative(pre[(r, c)]);
                }
            }
            let d_w = d_pre.transpose() * &tape.inputs[k];
            let mut d_b = DVector::zeros(layer.out_dim());
            for r in 0..d_pre.nrows() {
                for c in 0..d_pre.ncols() {
                    d_b[c] += d_pre[(r, c)];
                }
            }
            upstream = &d_pre * &layer.weights;
            grads[k] = Some((d_w, d_b));
        }
        let layers = grads.into_iter().map(|g| g.expect("filled above")).collect();
        Ok((NetGrads { layers }, upstream))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fd_param_grads(
        net: &mut DenseNet,
        input: &DMatrix<f64>,
        coeffs: &DMatrix<f64>,
        h: f64,
    ) -> Vec<f64> {
        // Loss = sum(output .* coeffs), a linear readout so FD noise stays low.
        let base = net.params_flat();
        let mut out = Vec::with_capacity(base.len());
        for k in 0..base.len() {
            let mut plus = base.clone();
            plus[k] += h;
            net.set_params_flat(&plus).unwrap();
            let f_plus = net.infer(input).unwrap().component_mul(coeffs).sum();
            let mut minus = base.clone();
            minus[k] -= h;
            net.set_params_flat(&minus).unwrap();
            let f_minus = net.infer(input).unwrap().component_mul(coeffs).sum();
            out.push((f_plus - f_minus) / (2.0 * h));
        }
        net.set_params_flat(&base).unwrap();
        out
    }

    #[test]
    fn zero_net_outputs_activation_of_zero() {
        let net = DenseNet::zeros(&[3, 4, 2], Activation::Relu, Activation::Sigmoid).unwrap();
        let x = DMatrix::from_row_slice(2, 3, &[1.0, -2.0, 3.0, 0.5, 0.0, -1.0]);
        let y = net.infer(&x).unwrap();
        for v in y.iter() {
            assert_eq!(*v, 0.5);
        }
    }

    #[test]
    fn backward_matches_finite_differences_smooth() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = DenseNet::init(&[3, 5, 2], Activation::Tanh, Activation::Identity, &mut rng)
            .unwrap();
        let input = DMatrix::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0));
        let coeffs = DMatrix::from_fn(4, 2, |_, _| rng.random_range(-1.0..1.0));
        let (_, tape) = net.forward(&input).unwrap();
        let (grads, input_grad) = net.backward(&tape, &coeffs).unwrap();
        let analytic = grads.flat();
        let fd = fd_param_grads(&mut net, &input, &coeffs, 1e-6);
        for (a, f) in analytic.iter().zip(&fd) {
            assert!((a - f).abs() / f.abs().max(1e-3) < 1e-6, "{a} vs {f}");
        }
        // Input gradient against FD too.
        let h = 1e-6;
        for r in 0..4 {
            for c in 0..3 {
                let mut xp = input.clone();
                xp[(r, c)] += h;
                let fp = net.infer(&xp).unwrap().component_mul(&coeffs).sum();
                let mut xm = input.clone();
                xm[(r, c)] -= h;
                let fm = net.infer(&xm).unwrap().component_mul(&coeffs).sum();
                let fd = (fp - fm) / (2.0 * h);
                assert!((input_grad[(r, c)] - fd).abs() / fd.abs().max(1e-3) < 1e-6);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences_rectified() {
        // Rectifiers are only piecewise smooth; He init plus a generic input
        // keeps FD probes away from the kinks.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut net = DenseNet::init(
            &[4, 6, 1],
            Activation::leaky_relu(),
            Activation::Identity,
            &mut rng,
        )
        .unwrap();
        let input = DMatrix::from_fn(3, 4, |_, _| rng.random_range(-1.0..1.0));
        let coeffs = DMatrix::from_fn(3, 1, |_, _| rng.random_range(0.5..1.5));
        let (_, tape) = net.forward(&input).unwrap();
        let (grads, _) = net.backward(&tape, &coeffs).unwrap();
        let fd = fd_param_grads(&mut net, &input, &coeffs, 1e-6);
        for (a, f) in grads.flat().iter().zip(&fd) {
            assert!((a - f).abs() / f.abs().max(1e-3) < 1e-5, "{a} vs {f}");
        }
    }

    #[test]
    fn stale_tape_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net =
            DenseNet::init(&[2, 3, 1], Activation::Relu, Activation::Identity, &mut rng).unwrap();
        let x = DMatrix::from_row_slice(1, 2, &[0.3, -0.7]);
        let (_, tape) = net.forward(&x).unwrap();
        let params = net.params_flat();
        net.set_params_flat(&params).unwrap();
        let g = DMatrix::from_row_slice(1, 1, &[1.0]);
        assert!(matches!(net.backward(&tape, &g), Err(Error::StaleTape)));
    }

    #[test]
    fn shape_mismatches_are_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net =
            DenseNet::init(&[3, 2], Activation::Identity, Activation::Identity, &mut rng).unwrap();
        let bad = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        assert!(net.infer(&bad).is_err());
        let x = DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 3.0]);
        let (_, tape) = net.forward(&x).unwrap();
        let bad_grad = DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 3.0]);
        assert!(net.backward(&tape, &bad_grad).is_err());
    }

    #[test]
    fn params_round_trip_flat() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = DenseNet::init(
            &[3, 4, 2],
            Activation::Relu,
            Activation::Identity,
            &mut rng,
        )
        .unwrap();
        let p = net.params_flat();
        assert_eq!(p.len(), net.param_count());
        assert_eq!(p.len(), 3 * 4 + 4 + 4 * 2 + 2);
        net.set_params_flat(&p).unwrap();
        assert_eq!(net.params_flat(), p);
        assert!(net.set_params_flat(&p[1..]).is_err());
    }

    #[test]
    fn stable_activations() {
        assert_eq!(sigmoid(1000.0), 1.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert!(softplus(1000.0).is_finite());
        assert_eq!(softplus(-1000.0), 0.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        for &y in &[0.1, 1.0, 20.0, 700.0] {
            assert!((softplus(softplus_inv(y)) - y).abs() / y < 1e-12);
        }
    }
}
