//! On-disk snapshots of trained models.
//!
//! Network weights are flattened into plain row-major vectors instead of
//! leaning on matrix-library serialization, so the file format stays
//! independent of internal storage order and survives dependency bumps.
//! Everything round-trips bit-exactly through JSON.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::augmentor::{AugmentConfig, Generator, HybridGenerator, VanillaGenerator};
use crate::error::{Error, Result};
use crate::estimator::{EstimatorConfig, EstimatorNets, ThresholdMode};
use crate::gpd::GpdParams;
use crate::nn::{Activation, DenseLayer, DenseNet};
use crate::regimes::GmmModel;

pub const FORMAT_VERSION: u32 = 1;

/// One dense layer with weights in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCheckpoint {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    /// `out_dim * in_dim` values, row by row.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerCheckpoint {
    fn from_layer(layer: &DenseLayer) -> Self {
        let (out_dim, in_dim) = (layer.out_dim(), layer.in_dim());
        let mut weights = Vec::with_capacity(out_dim * in_dim);
        for r in 0..out_dim {
            for c in 0..in_dim {
                weights.push(layer.weights[(r, c)]);
            }
        }
        Self {
            in_dim,
            out_dim,
            activation: layer.activation,
            weights,
            bias: layer.bias.iter().copied().collect(),
        }
    }

    fn to_layer(&self) -> Result<DenseLayer> {
        if self.weights.len() != self.out_dim * self.in_dim {
            return Err(Error::DimensionMismatch {
                expected: self.out_dim * self.in_dim,
                got: self.weights.len(),
            });
        }
        if self.bias.len() != self.out_dim {
            return Err(Error::DimensionMismatch {
                expected: self.out_dim,
                got: self.bias.len(),
            });
        }
        Ok(DenseLayer {
            weights: DMatrix::from_row_slice(self.out_dim, self.in_dim, &self.weights),
            bias: DVector::from_column_slice(&self.bias),
            activation: self.activation,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetCheckpoint {
    pub layers: Vec<LayerCheckpoint>,
}

impl NetCheckpoint {
    pub fn from_net(net: &DenseNet) -> Self {
        Self {
            layers: net.layers().iter().map(LayerCheckpoint::from_layer).collect(),
        }
    }

    /// Rebuilds the network, revalidating the dimension chain.
    pub fn to_net(&self) -> Result<DenseNet> {
        let layers = self
            .layers
            .iter()
            .map(LayerCheckpoint::to_layer)
            .collect::<Result<Vec<_>>>()?;
        DenseNet::from_layers(layers)
    }
}

/// Everything needed to reload a trained estimator and answer queries.
/// Training history is reporting output, not model state, and is not here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorCheckpoint {
    pub format_version: u32,
    pub config: EstimatorConfig,
    pub threshold_mode: ThresholdMode,
    pub threshold_net: NetCheckpoint,
    pub param_net: NetCheckpoint,
    pub discriminator: NetCheckpoint,
    pub regime_model: Option<GmmModel>,
}

impl EstimatorCheckpoint {
    pub fn capture(
        nets: &EstimatorNets,
        mode: ThresholdMode,
        config: &EstimatorConfig,
        regime_model: Option<GmmModel>,
    ) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            config: config.clone(),
            threshold_mode: mode,
            threshold_net: NetCheckpoint::from_net(&nets.threshold),
            param_net: NetCheckpoint::from_net(&nets.params),
            discriminator: NetCheckpoint::from_net(&nets.discriminator),
            regime_model,
        }
    }

    pub fn restore_nets(&self) -> Result<EstimatorNets> {
        check_version(self.format_version)?;
        let nets = EstimatorNets {
            threshold: self.threshold_net.to_net()?,
            params: self.param_net.to_net()?,
            discriminator: self.discriminator.to_net()?,
        };
        if nets.threshold.in_dim() != nets.params.in_dim() {
            return Err(Error::DimensionMismatch {
                expected: nets.threshold.in_dim(),
                got: nets.params.in_dim(),
            });
        }
        Ok(nets)
    }
}

/// One trained generator; hybrid generators carry their tail branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorCheckpoint {
    Hybrid {
        bulk_net: NetCheckpoint,
        threshold_db: f64,
        tail: GpdParams,
        p_u: f64,
        latent_dim: usize,
    },
    Vanilla {
        net: NetCheckpoint,
        mean_db: f64,
        std_db: f64,
        latent_dim: usize,
    },
}

impl GeneratorCheckpoint {
    pub fn from_generator(g: &Generator) -> Self {
        match g {
            Generator::Hybrid(h) => GeneratorCheckpoint::Hybrid {
                bulk_net: NetCheckpoint::from_net(&h.bulk_net),
                threshold_db: h.threshold_db,
                tail: h.tail,
                p_u: h.p_u,
                latent_dim: h.latent_dim,
            },
            Generator::Vanilla(v) => GeneratorCheckpoint::Vanilla {
                net: NetCheckpoint::from_net(&v.net),
                mean_db: v.mean_db,
                std_db: v.std_db,
                latent_dim: v.latent_dim,
            },
        }
    }

    pub fn to_generator(&self) -> Result<Generator> {
        Ok(match self {
            GeneratorCheckpoint::Hybrid {
                bulk_net,
                threshold_db,
                tail,
                p_u,
                latent_dim,
            } => Generator::Hybrid(HybridGenerator {
                bulk_net: bulk_net.to_net()?,
                threshold_db: *threshold_db,
                tail: *tail,
                p_u: *p_u,
                latent_dim: *latent_dim,
            }),
            GeneratorCheckpoint::Vanilla {
                net,
                mean_db,
                std_db,
                latent_dim,
            } => Generator::Vanilla(VanillaGenerator {
                net: net.to_net()?,
                mean_db: *mean_db,
                std_db: *std_db,
                latent_dim: *latent_dim,
            }),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentorEntry {
    pub regime: u32,
    pub generator: GeneratorCheckpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentorCheckpoint {
    pub format_version: u32,
    pub config: AugmentConfig,
    pub entries: Vec<AugmentorEntry>,
}

impl AugmentorCheckpoint {
    pub fn new(config: &AugmentConfig, entries: Vec<AugmentorEntry>) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            config: config.clone(),
            entries,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_version(self.format_version)
    }
}

fn check_version(version: u32) -> Result<()> {
    if version != FORMAT_VERSION {
        return Err(Error::invalid(format!(
            "checkpoint format {version} not supported, expected {FORMAT_VERSION}"
        )));
    }
    Ok(())
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn estimator_checkpoint_round_trips_exactly() {
        let nets = EstimatorNets::init(64, 9).unwrap();
        let cfg = EstimatorConfig::default();
        let ckpt = EstimatorCheckpoint::capture(&nets, ThresholdMode::Learned, &cfg, None);
        let text = serde_json::to_string(&ckpt).unwrap();
        let back: EstimatorCheckpoint = serde_json::from_str(&text).unwrap();
        assert_eq!(ckpt, back);
        let restored = back.restore_nets().unwrap();
        assert_eq!(restored.threshold, nets.threshold);
        assert_eq!(restored.params, nets.params);
        assert_eq!(restored.discriminator, nets.discriminator);
    }

    #[test]
    fn file_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("estimator.json");
        let nets = EstimatorNets::init(32, 17).unwrap();
        let cfg = EstimatorConfig::default();
        let ckpt =
            EstimatorCheckpoint::capture(&nets, ThresholdMode::Constant(-61.5), &cfg, None);
        save_json(&path, &ckpt).unwrap();
        let back: EstimatorCheckpoint = load_json(&path).unwrap();
        assert_eq!(ckpt, back);
        // A second save writes the identical bytes.
        let first = fs::read(&path).unwrap();
        save_json(&path, &back).unwrap();
        assert_eq!(first, fs::read(&path).unwrap());
    }

    #[test]
    fn generator_checkpoints_reproduce_generation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bulk = DenseNet::init(&[8, 16, 1], Activation::Relu, Activation::Identity, &mut rng)
            .unwrap();
        let hybrid = Generator::Hybrid(HybridGenerator {
            bulk_net: bulk,
            threshold_db: -63.0,
            tail: GpdParams::new(0.15, 1.2).unwrap(),
            p_u: 0.07,
            latent_dim: 8,
        });
        let ckpt = GeneratorCheckpoint::from_generator(&hybrid);
        let text = serde_json::to_string(&ckpt).unwrap();
        let back: GeneratorCheckpoint = serde_json::from_str(&text).unwrap();
        let restored = back.to_generator().unwrap();

        let mut r1 = ChaCha8Rng::seed_from_u64(77);
        let mut r2 = ChaCha8Rng::seed_from_u64(77);
        let a = hybrid.generate(500, &mut r1).unwrap();
        let b = restored.generate(500, &mut r2).unwrap();
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn augmentor_checkpoint_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = DenseNet::init(&[4, 8, 1], Activation::Relu, Activation::Identity, &mut rng)
            .unwrap();
        let vanilla = Generator::Vanilla(VanillaGenerator {
            net,
            mean_db: -58.0,
            std_db: 3.1,
            latent_dim: 4,
        });
        let ckpt = AugmentorCheckpoint::new(
            &AugmentConfig::default(),
            vec![AugmentorEntry {
                regime: 0,
                generator: GeneratorCheckpoint::from_generator(&vanilla),
            }],
        );
        ckpt.validate().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("augmentor.json");
        save_json(&path, &ckpt).unwrap();
        let back: AugmentorCheckpoint = load_json(&path).unwrap();
        assert_eq!(ckpt, back);
    }

    #[test]
    fn malformed_layers_and_versions_are_rejected() {
        let bad = LayerCheckpoint {
            in_dim: 3,
            out_dim: 2,
            activation: Activation::Relu,
            weights: vec![0.0; 5],
            bias: vec![0.0; 2],
        };
        assert!(bad.to_layer().is_err());

        let nets = EstimatorNets::init(16, 3).unwrap();
        let mut ckpt = EstimatorCheckpoint::capture(
            &nets,
            ThresholdMode::Learned,
            &EstimatorConfig::default(),
            None,
        );
        ckpt.format_version = 2;
        assert!(matches!(
            ckpt.restore_nets(),
            Err(Error::InvalidParams(_))
        ));
    }
}
