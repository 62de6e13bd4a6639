//! Offline tail-aware data augmentation.
//!
//! The hybrid generator splits at a per-regime threshold u: with
//! probability `p_u` a sample is a parametric GPD tail draw `u - z`, and
//! otherwise a neural bulk draw `u + softplus(g(eps))`, rectified so the
//! branches partition exactly at u. Only the bulk net is trained (against
//! a discriminator that sees real and synthetic samples alike); the tail
//! is a classical fit, which is what keeps deep extrapolation honest. A
//! vanilla single-net GAN with the same budget is provided purely as the
//! tail-coverage baseline.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gpd::{GpdParams, decluster_runs, extract_exceedances, fit_gpd_mle, gpd_quantile};
use crate::nn::{
    Activation, AdamState, DenseNet, adam_update, bce_with_logits, sigmoid, softplus,
    softplus_inv,
};
use crate::seed;
use crate::series::{Origin, SampleSeries};
use crate::stats::{mean, quantile_sorted, sorted_copy, variance};

/// Runs-declustering gap for the offline threshold fit, in samples.
const DECLUSTER_GAP: usize = 10;
/// Offline augmentation threshold: empirical quantile level per regime.
const THRESHOLD_QUANTILE: f64 = 0.05;
/// Adam momenta for both players.
const BETAS: (f64, f64) = (0.5, 0.999);
const GRAD_CLIP: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub latent_dim: usize,
    /// Train one generator per regime label; with `false`, or when the
    /// series carries no labels, a single global generator is trained.
    pub per_regime: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            batch_size: 1024,
            epochs: 50,
            lr: 2e-4,
            latent_dim: 16,
            per_regime: true,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.latent_dim == 0 {
            return Err(Error::invalid(
                "batch size, epochs and latent dimension must be positive",
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentEpoch {
    pub epoch: usize,
    pub loss_d: f64,
    pub loss_g: f64,
}

/// Mixture generator: parametric GPD below `threshold_db`, neural bulk
/// above it. Self-contained for generation; training-time constants are
/// not needed once the bulk net is frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridGenerator {
    pub bulk_net: DenseNet,
    pub threshold_db: f64,
    pub tail: GpdParams,
    /// Empirical fraction of training samples below the threshold.
    pub p_u: f64,
    pub latent_dim: usize,
}

/// Baseline generator: one net, no tail branch, emitting standardized
/// values that are mapped back through the training mean and scale.
#[derive(Debug, Clone, PartialEq)]
pub struct VanillaGenerator {
    pub net: DenseNet,
    pub mean_db: f64,
    pub std_db: f64,
    pub latent_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Generator {
    Hybrid(HybridGenerator),
    Vanilla(VanillaGenerator),
}

impl Generator {
    pub fn generate<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<SampleSeries> {
        match self {
            Generator::Hybrid(g) => hybrid_generate(g, n, rng),
            Generator::Vanilla(g) => vanilla_generate(g, n, rng),
        }
    }
}

/// One trained generator with the regime it serves and its loss history.
#[derive(Debug, Clone)]
pub struct RegimeAugmentor {
    pub regime: u32,
    pub generator: HybridGenerator,
    pub history: Vec<AugmentEpoch>,
}

fn latent_batch<R: Rng + ?Sized>(n: usize, dim: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(n, dim, |_, _| rng.sample(StandardNormal))
}

/// Draws `n` samples; each flips Bernoulli(p_u) for the branch, so the
/// fraction below threshold concentrates at `p_u` and tail draws are exact
/// GPD by construction.
pub fn hybrid_generate<R: Rng + ?Sized>(
    generator: &HybridGenerator,
    n: usize,
    rng: &mut R,
) -> Result<SampleSeries> {
    let mut values = vec![0.0; n];
    let mut bulk_rows: Vec<usize> = Vec::new(); // sample index per latent row
    let mut latent_data: Vec<f64> = Vec::new();
    for i in 0..n {
        if rng.random::<f64>() < generator.p_u {
            let z = gpd_quantile(rng.random(), &generator.tail)?;
            values[i] = generator.threshold_db - z;
        } else {
            for _ in 0..generator.latent_dim {
                latent_data.push(rng.sample(StandardNormal));
            }
            bulk_rows.push(i);
        }
    }
    if !bulk_rows.is_empty() {
        let eps = DMatrix::from_fn(bulk_rows.len(), generator.latent_dim, |r, c| {
            latent_data[r * generator.latent_dim + c]
        });
        let out = generator.bulk_net.infer(&eps)?;
        for (row, &i) in bulk_rows.iter().enumerate() {
            values[i] = generator.threshold_db + softplus(out[(row, 0)]);
        }
    }
    SampleSeries::new(values, 1.0).map(|s| s.with_label("hybrid"))
}

pub fn vanilla_generate<R: Rng + ?Sized>(
    generator: &VanillaGenerator,
    n: usize,
    rng: &mut R,
) -> Result<SampleSeries> {
    if n == 0 {
        return SampleSeries::new(Vec::new(), 1.0).map(|s| s.with_label("vanilla"));
    }
    let eps = latent_batch(n, generator.latent_dim, rng);
    let out = generator.net.infer(&eps)?;
    let values = (0..n)
        .map(|r| generator.mean_db + generator.std_db * out[(r, 0)])
        .collect();
    SampleSeries::new(values, 1.0).map(|s| s.with_label("vanilla"))
}

/// Threshold, tail fit and empirical tail mass for one regime's samples.
fn classical_tail(values: &[f64]) -> Result<(f64, GpdParams, f64)> {
    let sorted = sorted_copy(values);
    let u = quantile_sorted(&sorted, THRESHOLD_QUANTILE);
    let exceed = extract_exceedances(values, u)?;
    let p_u = exceed.len() as f64 / values.len() as f64;
    let declustered = decluster_runs(&exceed, DECLUSTER_GAP);
    let fit = fit_gpd_mle(&declustered)?;
    Ok((u, fit.params, p_u))
}

struct GanArena {
    real_std: Vec<f64>, // standardized real samples
}

/// Shared adversarial loop. `synth(rng, n)` yields a standardized
/// synthetic batch together with, per sample, either the latent row and
/// d(input)/d(net output) factor for backprop, or nothing for parametric
/// draws.
struct SynthBatch {
    inputs: Vec<f64>,           // standardized D inputs
    latents: DMatrix<f64>,      // one row per trainable sample
    trainable: Vec<usize>,      // batch position of each latent row
    chain: Vec<f64>,            // d input / d net-output per latent row
}

fn gan_train<F>(
    g_net: &mut DenseNet,
    arena: &GanArena,
    cfg: &AugmentConfig,
    root_seed: u64,
    regime_tag: u64,
    mut synth: F,
) -> Result<Vec<AugmentEpoch>>
where
    F: FnMut(&DenseNet, usize, &mut ChaCha8Rng) -> Result<SynthBatch>,
{
    let mut d_rng = ChaCha8Rng::seed_from_u64(seed::derive_indexed(
        root_seed,
        "augment.disc",
        regime_tag,
    ));
    let mut d_net = DenseNet::init(
        &[1, 64, 64, 1],
        Activation::leaky_relu(),
        Activation::Identity,
        &mut d_rng,
    )?;
    let mut opt_d = AdamState::new(d_net.param_count(), cfg.lr, BETAS.0, BETAS.1)?;
    let mut opt_g = AdamState::new(g_net.param_count(), cfg.lr, BETAS.0, BETAS.1)?;
    let mut noise = ChaCha8Rng::seed_from_u64(seed::derive_indexed(
        root_seed,
        "augment.noise",
        regime_tag,
    ));

    let n = arena.real_std.len();
    let steps = (n / cfg.batch_size).max(1);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut epoch_rng = ChaCha8Rng::seed_from_u64(seed::derive_indexed(
            root_seed,
            "augment.epoch",
            regime_tag.wrapping_mul(1_000_003).wrapping_add(epoch as u64),
        ));
        order.shuffle(&mut epoch_rng);

        let mut sum_d = 0.0;
        let mut sum_g = 0.0;
        for step in 0..steps {
            let lo = step * cfg.batch_size;
            let hi = (lo + cfg.batch_size).min(n);
            let real: Vec<f64> = order[lo..hi].iter().map(|&i| arena.real_std[i]).collect();
            let m = real.len();

            // Discriminator update on real (1) vs synthetic (0).
            let sb = synth(g_net, m, &mut noise)?;
            let mut inputs = real.clone();
            inputs.extend_from_slice(&sb.inputs);
            let targets: Vec<f64> = (0..2 * m).map(|i| f64::from(i < m)).collect();
            let x = DMatrix::from_fn(2 * m, 1, |r, _| inputs[r]);
            let (logits, tape) = d_net.forward(&x)?;
            let lv: Vec<f64> = (0..2 * m).map(|r| logits[(r, 0)]).collect();
            let (loss_d, grad) = bce_with_logits(&lv, &targets);
            let og = DMatrix::from_fn(2 * m, 1, |r, _| grad[r]);
            let (d_grads, _) = d_net.backward(&tape, &og)?;
            adam_update(&mut d_net, &mut opt_d, &d_grads, Some(GRAD_CLIP))?;

            // Generator update: -mean ln D(synth) through the updated D.
            let sb = synth(g_net, m, &mut noise)?;
            let x = DMatrix::from_fn(m, 1, |r, _| sb.inputs[r]);
            let (logits, tape_d) = d_net.forward(&x)?;
            let mut loss_g = 0.0;
            let mut dl = DMatrix::zeros(m, 1);
            for r in 0..m {
                let l = logits[(r, 0)];
                loss_g += softplus(-l) / m as f64;
                dl[(r, 0)] = (sigmoid(l) - 1.0) / m as f64;
            }
            let (_, d_input) = d_net.backward(&tape_d, &dl)?;
            if !sb.trainable.is_empty() {
                let (_, tape_g) = g_net.forward(&sb.latents)?;
                let mut out_grad = DMatrix::zeros(sb.trainable.len(), 1);
                for (row, &pos) in sb.trainable.iter().enumerate() {
                    out_grad[(row, 0)] = d_input[(pos, 0)] * sb.chain[row];
                }
                let (g_grads, _) = g_net.backward(&tape_g, &out_grad)?;
                adam_update(g_net, &mut opt_g, &g_grads, Some(GRAD_CLIP))?;
            }

            sum_d += loss_d;
            sum_g += loss_g;
        }
        history.push(AugmentEpoch {
            epoch,
            loss_d: sum_d / steps as f64,
            loss_g: sum_g / steps as f64,
        });
    }
    Ok(history)
}

const MIN_REGIME_SAMPLES: usize = 10_000;

/// Groups sample values by regime label; one global group when labels are
/// absent or per-regime training is off.
fn regime_groups(real: &SampleSeries, per_regime: bool) -> Vec<(u32, Vec<f64>)> {
    match real.regimes() {
        Some(labels) if per_regime => {
            let mut groups: std::collections::BTreeMap<u32, Vec<f64>> = Default::default();
            for (&y, &r) in real.values().iter().zip(labels) {
                groups.entry(r).or_default().push(y);
            }
            groups.into_iter().collect()
        }
        _ => vec![(0, real.values().to_vec())],
    }
}

/// Trains one hybrid generator per regime with enough data. Regimes with
/// fewer than 10^4 samples are skipped with a warning; it is an error when
/// that leaves no generator at all.
pub fn train_augmentor(
    real: &SampleSeries,
    cfg: &AugmentConfig,
    root_seed: u64,
) -> Result<Vec<RegimeAugmentor>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for (regime, values) in regime_groups(real, cfg.per_regime) {
        if values.len() < MIN_REGIME_SAMPLES {
            log::warn!(
                "skipping regime {regime}: {} samples is fewer than {MIN_REGIME_SAMPLES}",
                values.len()
            );
            continue;
        }
        let (u, tail, p_u) = classical_tail(&values)?;
        let m = mean(&values);
        let s = variance(&values).sqrt().max(1e-9);

        // Start the bulk net emitting roughly the median real excess, so
        // the first synthetic batches already overlap the real bulk.
        let excesses: Vec<f64> = values.iter().filter(|&&y| y >= u).map(|&y| y - u).collect();
        let med_excess = quantile_sorted(&sorted_copy(&excesses), 0.5).max(1e-3);
        let mut g_rng = ChaCha8Rng::seed_from_u64(seed::derive_indexed(
            root_seed,
            "augment.gen",
            u64::from(regime),
        ));
        let mut bulk_net = DenseNet::init(
            &[cfg.latent_dim, 64, 64, 1],
            Activation::Relu,
            Activation::Identity,
            &mut g_rng,
        )?;
        bulk_net.shape_output_layer(0.05, &[softplus_inv(med_excess)])?;

        let arena = GanArena {
            real_std: values.iter().map(|y| (y - m) / s).collect(),
        };
        let latent_dim = cfg.latent_dim;
        let history = gan_train(
            &mut bulk_net,
            &arena,
            cfg,
            root_seed,
            u64::from(regime),
            |net, count, rng| {
                // Hybrid batch: tail draws are parametric constants, bulk
                // draws carry gradient d(std input)/d(raw out) = sig(o)/s.
                let mut inputs = vec![0.0; count];
                let mut trainable = Vec::new();
                let mut latent_data = Vec::new();
                for (i, slot) in inputs.iter_mut().enumerate() {
                    if rng.random::<f64>() < p_u {
                        let z = gpd_quantile(rng.random(), &tail)?;
                        *slot = (u - z - m) / s;
                    } else {
                        for _ in 0..latent_dim {
                            latent_data.push(rng.sample(StandardNormal));
                        }
                        trainable.push(i);
                    }
                }
                let latents = DMatrix::from_fn(trainable.len(), latent_dim, |r, c| {
                    latent_data[r * latent_dim + c]
                });
                let mut chain = Vec::with_capacity(trainable.len());
                if !trainable.is_empty() {
                    let outs = net.infer(&latents)?;
                    for (row, &pos) in trainable.iter().enumerate() {
                        let o = outs[(row, 0)];
                        inputs[pos] = (u + softplus(o) - m) / s;
                        chain.push(sigmoid(o) / s);
                    }
                }
                Ok(SynthBatch {
                    inputs,
                    latents,
                    trainable,
                    chain,
                })
            },
        )?;

        out.push(RegimeAugmentor {
            regime,
            generator: HybridGenerator {
                bulk_net,
                threshold_db: u,
                tail,
                p_u,
                latent_dim: cfg.latent_dim,
            },
            history,
        });
    }
    if out.is_empty() {
        return Err(Error::degenerate(
            "no regime had enough samples for augmentation",
        ));
    }
    Ok(out)
}

/// Trains the no-tail baseline on the whole series with the same budget.
pub fn train_vanilla_gan(
    real: &SampleSeries,
    cfg: &AugmentConfig,
    root_seed: u64,
) -> Result<(VanillaGenerator, Vec<AugmentEpoch>)> {
    cfg.validate()?;
    if real.len() < MIN_REGIME_SAMPLES {
        return Err(Error::degenerate(format!(
            "vanilla baseline needs at least {MIN_REGIME_SAMPLES} samples, got {}",
            real.len()
        )));
    }
    let values = real.values();
    let m = mean(values);
    let s = variance(values).sqrt().max(1e-9);
    let mut g_rng =
        ChaCha8Rng::seed_from_u64(seed::derive_indexed(root_seed, "augment.gen", u64::MAX));
    let mut net = DenseNet::init(
        &[cfg.latent_dim, 64, 64, 1],
        Activation::Relu,
        Activation::Identity,
        &mut g_rng,
    )?;
    // Standardized space: start near the data mean with a small spread.
    net.shape_output_layer(0.05, &[0.0])?;

    let arena = GanArena {
        real_std: values.iter().map(|y| (y - m) / s).collect(),
    };
    let latent_dim = cfg.latent_dim;
    let history = gan_train(
        &mut net,
        &arena,
        cfg,
        root_seed,
        u64::MAX,
        |net, count, rng| {
            let latents = latent_batch(count, latent_dim, rng);
            let outs = net.infer(&latents)?;
            let inputs: Vec<f64> = (0..count).map(|r| outs[(r, 0)]).collect();
            Ok(SynthBatch {
                inputs,
                latents,
                trainable: (0..count).collect(),
                chain: vec![1.0; count],
            })
        },
    )?;
    Ok((
        VanillaGenerator {
            net,
            mean_db: m,
            std_db: s,
            latent_dim: cfg.latent_dim,
        },
        history,
    ))
}

/// Appends `ceil(ratio * |real|)` synthetic samples to the real series,
/// apportioned across regimes (largest remainder over the real per-regime
/// counts) and tagged by origin. The real prefix is untouched, so dropping
/// the synthetic tag recovers it bit for bit.
pub fn build_augmented_dataset(
    real: &SampleSeries,
    augmentors: &[RegimeAugmentor],
    ratio: f64,
    root_seed: u64,
) -> Result<SampleSeries> {
    if !(ratio.is_finite() && ratio >= 0.0) {
        return Err(Error::invalid(format!("ratio must be nonnegative, got {ratio}")));
    }
    if augmentors.is_empty() {
        return Err(Error::invalid("no generators to augment with"));
    }
    let n_real = real.len();
    let n_syn = (ratio * n_real as f64).ceil() as usize;

    // Count real samples per regime that has a generator.
    let labels: Vec<u32> = match real.regimes() {
        Some(l) => l.to_vec(),
        None => vec![0; n_real],
    };
    let counts: Vec<usize> = augmentors
        .iter()
        .map(|a| labels.iter().filter(|&&l| l == a.regime).count())
        .collect();
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::degenerate(
            "no real samples belong to any generator's regime",
        ));
    }

    // Largest-remainder apportionment of n_syn over the generators.
    let shares: Vec<f64> = counts
        .iter()
        .map(|&c| n_syn as f64 * c as f64 / total as f64)
        .collect();
    let mut quotas: Vec<usize> = shares.iter().map(|s| s.floor() as usize).collect();
    let mut leftover = n_syn - quotas.iter().sum::<usize>();
    let mut by_frac: Vec<usize> = (0..shares.len()).collect();
    by_frac.sort_by(|&a, &b| {
        let fa = shares[a] - shares[a].floor();
        let fb = shares[b] - shares[b].floor();
        fb.partial_cmp(&fa).expect("finite").then(a.cmp(&b))
    });
    for &i in &by_frac {
        if leftover == 0 {
            break;
        }
        quotas[i] += 1;
        leftover -= 1;
    }

    let mut values = real.values().to_vec();
    let mut origins = vec![Origin::Real; n_real];
    let mut out_labels = labels;
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(root_seed, "augment.generate"));
    for (a, &q) in augmentors.iter().zip(&quotas) {
        let synth = hybrid_generate(&a.generator, q, &mut rng)?;
        values.extend_from_slice(synth.values());
        origins.extend(std::iter::repeat_n(Origin::Synthetic, q));
        out_labels.extend(std::iter::repeat_n(a.regime, q));
    }

    let mut series = SampleSeries::new(values, real.sample_period_s())?;
    if let Some(label) = real.label() {
        series = series.with_label(label);
    }
    series.set_origins(origins)?;
    series.set_regimes(out_labels)?;
    Ok(series)
}
