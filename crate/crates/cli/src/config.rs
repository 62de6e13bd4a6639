//! Run configurations: JSON config file, flag overrides, resolved snapshot.
//!
//! Every subcommand resolves its inputs in the same order: built-in
//! defaults, then the `--config` file, then command-line flags. The fully
//! resolved configuration is written to `<out>/resolved_config.json` before
//! any work starts, and that snapshot is itself a valid `--config` file:
//! rerunning a command from its snapshot (and nothing else) reproduces the
//! run's outputs byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use evtgan::augmentor::AugmentConfig;
use evtgan::checkpoint::save_json;
use evtgan::data::SynthConfig;
use evtgan::estimator::EstimatorConfig;

use crate::errors::{CliError, CliResult};

pub const SNAPSHOT_FILE: &str = "resolved_config.json";

/// Parses a JSON config file, or yields the all-defaults value without one.
pub fn parse_file<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

/// Rejects a snapshot that belongs to a different subcommand and stamps the
/// tag for the one about to run.
pub fn claim_command(tag: &mut Option<String>, expected: &str) -> CliResult<()> {
    if let Some(found) = tag.as_deref() {
        if found != expected {
            return Err(CliError::config(format!(
                "config is for `{found}`, but the `{expected}` command was invoked"
            )));
        }
    }
    *tag = Some(expected.to_string());
    Ok(())
}

pub fn require<T>(value: Option<T>, what: &str) -> CliResult<T> {
    value.ok_or_else(|| CliError::config(format!("missing {what}")))
}

/// Creates the output directory and writes the resolved snapshot into it.
pub fn write_snapshot<T: Serialize>(out: &Path, resolved: &T) -> CliResult<()> {
    fs::create_dir_all(out)
        .map_err(|e| CliError::io(format!("{}: {e}", out.display())))?;
    save_json(&out.join(SNAPSHOT_FILE), resolved)
        .map_err(|e| CliError::io(format!("{}: {e}", out.display())))?;
    Ok(())
}

fn default_out() -> PathBuf {
    PathBuf::from(".")
}

/// Merge rule shared by all path-ish options: flag wins over file, and the
/// output directory falls back to the working directory.
pub fn merge_out(file: Option<PathBuf>, flag: Option<PathBuf>) -> PathBuf {
    flag.or(file).unwrap_or_else(default_out)
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthRun {
    pub command: Option<String>,
    pub out: Option<PathBuf>,
    pub synth: Option<SynthConfig>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentRun {
    pub command: Option<String>,
    pub out: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub seed: Option<u64>,
    pub augment: Option<AugmentConfig>,
    /// Synthetic-to-real ratio for the emitted augmented dataset.
    pub ratio: Option<f64>,
}

/// Training objective for the parameter network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    #[default]
    Adversarial,
    Kl,
}

impl Objective {
    pub fn as_str(self) -> &'static str {
        match self {
            Objective::Adversarial => "adversarial",
            Objective::Kl => "kl",
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainRun {
    pub command: Option<String>,
    pub out: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub seed: Option<u64>,
    pub estimator: Option<EstimatorConfig>,
    /// Largest regime count offered to BIC selection.
    pub max_k: Option<usize>,
    /// `constant-threshold` replaces the threshold network with the data's
    /// 5% quantile, for the stability comparison.
    pub ablation: Option<String>,
    pub objective: Option<Objective>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimateRun {
    pub command: Option<String>,
    pub out: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Window length; informational, must match the checkpoint's networks.
    pub window: Option<usize>,
    pub stride: Option<usize>,
    /// Outage level for the tail-probability column.
    pub x_th_db: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelPaths {
    /// Estimator checkpoint trained adversarially.
    pub evt_gan: Option<PathBuf>,
    /// Estimator checkpoint trained by the likelihood baseline.
    pub mlp_kl: Option<PathBuf>,
    /// Series the classical pooled MLE is fitted on.
    pub mle_fit_data: Option<PathBuf>,
    /// Generator checkpoint for the augmentation baseline.
    pub vanilla: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateRun {
    pub command: Option<String>,
    pub out: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub seed: Option<u64>,
    pub window: Option<usize>,
    pub stride: Option<usize>,
    pub decluster_gap: Option<usize>,
    /// Draws per generator when scoring sample-based baselines.
    pub n_synth: Option<usize>,
    pub models: Option<ModelPaths>,
}

/// The stream `synth` produces when no config is given: two well-separated
/// regimes, one heavy lower tail and one short one, uncorrelated in time.
pub fn default_synth() -> SynthConfig {
    use evtgan::data::{RegimeSpec, SegmentSpec};
    SynthConfig {
        regimes: vec![
            RegimeSpec {
                mu_db: -58.0,
                sigma_db: 2.5,
                u_star_db: -65.0,
                xi_star: 0.2,
                beta_star: 1.2,
                p_star: 0.1,
            },
            RegimeSpec {
                mu_db: -49.0,
                sigma_db: 2.0,
                u_star_db: -55.0,
                xi_star: -0.1,
                beta_star: 2.0,
                p_star: 0.12,
            },
        ],
        segments: vec![
            SegmentSpec { regime: 0, length: 25_000 },
            SegmentSpec { regime: 1, length: 25_000 },
        ],
        rho: 0.0,
        sample_period_s: 0.002,
        seed: 7,
    }
}
