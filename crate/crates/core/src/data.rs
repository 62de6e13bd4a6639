//! Synthetic stream generation and CSV interchange.
//!
//! Real 60 GHz traces are scarce, so verification runs on synthetic
//! streams with known tails: each regime draws, with probability `p*`, a
//! deficit below `u*` from a GPD, and otherwise a bulk value from a
//! Gaussian (in dB) truncated to stay above `u*`. Temporal dependence is
//! added by AR(1)-filtering the uniform driver (a Gaussian copula), which
//! clusters exceedances without disturbing the marginal law, so the tail
//! ground truth stays exact.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::gpd::{GpdParams, gpd_quantile};
use crate::seed;
use crate::series::{Origin, SampleSeries};

/// One stationary regime: Gaussian bulk (dB), GPD lower tail below `u*`,
/// and the exact tail mass `p*`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeSpec {
    pub mu_db: f64,
    pub sigma_db: f64,
    pub u_star_db: f64,
    pub xi_star: f64,
    pub beta_star: f64,
    pub p_star: f64,
}

impl RegimeSpec {
    pub fn tail_params(&self) -> Result<GpdParams> {
        GpdParams::new(self.xi_star, self.beta_star)
    }

    fn validate(&self, idx: usize) -> Result<()> {
        let ctx = |msg: String| Error::invalid(format!("regime {idx}: {msg}"));
        if !(self.mu_db.is_finite() && self.u_star_db.is_finite()) {
            return Err(ctx("mu and u* must be finite".into()));
        }
        if !(self.sigma_db.is_finite() && self.sigma_db > 0.0) {
            return Err(ctx(format!("sigma must be positive, got {}", self.sigma_db)));
        }
        if self.u_star_db >= self.mu_db {
            return Err(ctx(format!(
                "tail threshold u* = {} must lie below the bulk mean {}",
                self.u_star_db, self.mu_db
            )));
        }
        if !(self.p_star > 0.0 && self.p_star <= 0.2) {
            return Err(ctx(format!("tail mass p* must be in (0, 0.2], got {}", self.p_star)));
        }
        self.tail_params().map_err(|e| ctx(e.to_string()))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentSpec {
    pub regime: usize,
    pub length: usize,
}

fn default_period() -> f64 {
    0.002
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub regimes: Vec<RegimeSpec>,
    pub segments: Vec<SegmentSpec>,
    #[serde(default)]
    pub rho: f64,
    #[serde(default = "default_period")]
    pub sample_period_s: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.regimes.is_empty() {
            return Err(Error::invalid("at least one regime is required"));
        }
        if self.segments.is_empty() {
            return Err(Error::invalid("at least one segment is required"));
        }
        for (i, r) in self.regimes.iter().enumerate() {
            r.validate(i)?;
        }
        for (i, s) in self.segments.iter().enumerate() {
            if s.regime >= self.regimes.len() {
                return Err(Error::invalid(format!(
                    "segment {i} references regime {} of {}",
                    s.regime,
                    self.regimes.len()
                )));
            }
            if s.length == 0 {
                return Err(Error::invalid(format!("segment {i} has zero length")));
            }
        }
        if !(self.rho.is_finite() && (0.0..1.0).contains(&self.rho)) {
            return Err(Error::invalid(format!(
                "AR(1) coefficient must be in [0, 1), got {}",
                self.rho
            )));
        }
        if !(self.sample_period_s.is_finite() && self.sample_period_s > 0.0) {
            return Err(Error::invalid(format!(
                "sample period must be positive, got {}",
                self.sample_period_s
            )));
        }
        Ok(())
    }

    pub fn total_len(&self) -> usize {
        self.segments.iter().map(|s| s.length).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentTruth {
    pub regime: usize,
    pub start: usize,
    /// Exclusive.
    pub end: usize,
}

/// Everything an oracle needs to score estimates on a synthetic stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub regimes: Vec<RegimeSpec>,
    pub segments: Vec<SegmentTruth>,
    pub rho: f64,
    pub seed: u64,
}

impl GroundTruth {
    pub fn regime_of(&self, index: usize) -> Option<usize> {
        self.segments
            .iter()
            .find(|s| s.start <= index && index < s.end)
            .map(|s| s.regime)
    }

    /// Per-sample regime labels over the whole stream.
    pub fn labels(&self) -> Vec<u32> {
        let mut out = Vec::new();
        for s in &self.segments {
            out.extend(std::iter::repeat_n(s.regime as u32, s.end - s.start));
        }
        out
    }
}

/// Generates the configured stream. Samples arrive segment by segment;
/// each segment has its own derived seed, so segment order and count never
/// perturb one another's draws.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<(SampleSeries, GroundTruth)> {
    cfg.validate()?;
    let unit_normal = Normal::new(0.0, 1.0).expect("unit normal");
    // Bulk truncation mass a = Phi((u* - mu) / sigma) per regime.
    let trunc_a: Vec<f64> = cfg
        .regimes
        .iter()
        .map(|r| unit_normal.cdf((r.u_star_db - r.mu_db) / r.sigma_db))
        .collect();
    let tails: Vec<GpdParams> = cfg
        .regimes
        .iter()
        .map(|r| r.tail_params())
        .collect::<Result<_>>()?;

    let mut values = Vec::with_capacity(cfg.total_len());
    let mut segments = Vec::with_capacity(cfg.segments.len());
    let mut cursor = 0usize;
    for (s, seg) in cfg.segments.iter().enumerate() {
        let spec = &cfg.regimes[seg.regime];
        let tail = &tails[seg.regime];
        let a = trunc_a[seg.regime];
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed::derive_indexed(cfg.seed, "synth.segment", s as u64));
        let innovation = (1.0 - cfg.rho * cfg.rho).sqrt();
        let mut w: f64 = rng.sample(StandardNormal);
        for t in 0..seg.length {
            if t > 0 {
                let e: f64 = rng.sample(StandardNormal);
                w = cfg.rho * w + innovation * e;
            }
            let u = unit_normal.cdf(w).clamp(1e-12, 1.0 - 1e-12);
            let y = if u < spec.p_star {
                // Deep tail: u uniform on (0, p*) makes 1 - u/p* uniform on
                // (0, 1), so the deficit is an exact GPD draw.
                spec.u_star_db - gpd_quantile(1.0 - u / spec.p_star, tail)?
            } else {
                let v = (u - spec.p_star) / (1.0 - spec.p_star);
                spec.mu_db + spec.sigma_db * unit_normal.inverse_cdf(a + v * (1.0 - a))
            };
            values.push(y);
        }
        segments.push(SegmentTruth {
            regime: seg.regime,
            start: cursor,
            end: cursor + seg.length,
        });
        cursor += seg.length;
    }

    let truth = GroundTruth {
        regimes: cfg.regimes.clone(),
        segments,
        rho: cfg.rho,
        seed: cfg.seed,
    };
    let mut series = SampleSeries::new(values, cfg.sample_period_s)?.with_label("synthetic");
    series.set_regimes(truth.labels())?;
    Ok((series, truth))
}

const KNOWN_COLUMNS: [&str; 5] = ["index", "timestamp_s", "power_db", "origin", "regime"];

fn csv_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::CsvFormat {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

/// Reads a power stream from CSV. The header names the columns; `power_db`
/// is required, `timestamp_s`, `origin` and `regime` are picked up when
/// present, and the sample period is inferred from the first two
/// timestamps (1 s when there are none).
pub fn ingest_csv(path: &Path) -> Result<SampleSeries> {
    let file = std::fs::File::open(path)?;
    let mut reader = std::io::BufReader::new(file);

    let mut header = String::new();
    if reader.read_line(&mut header)? == 0 {
        return Err(csv_err(path, 1, "empty file"));
    }
    let columns: Vec<&str> = header.trim_end_matches(['\r', '\n']).split(',').collect();
    for c in &columns {
        if !KNOWN_COLUMNS.contains(c) {
            return Err(csv_err(path, 1, format!("unknown column {c:?}")));
        }
    }
    let col = |name: &str| columns.iter().position(|c| *c == name);
    let power_col = col("power_db").ok_or_else(|| csv_err(path, 1, "missing power_db column"))?;
    let time_col = col("timestamp_s");
    let origin_col = col("origin");
    let regime_col = col("regime");

    let mut values = Vec::new();
    let mut timestamps = Vec::new();
    let mut origins = Vec::new();
    let mut regimes = Vec::new();
    for (row, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = row + 2;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').collect();
        if fields.len() != columns.len() {
            return Err(csv_err(
                path,
                lineno,
                format!("expected {} fields, got {}", columns.len(), fields.len()),
            ));
        }
        let parse_f64 = |field: &str, what: &str| -> Result<f64> {
            let v: f64 = field
                .parse()
                .map_err(|_| csv_err(path, lineno, format!("bad {what} {field:?}")))?;
            if !v.is_finite() {
                return Err(csv_err(path, lineno, format!("non-finite {what} {field:?}")));
            }
            Ok(v)
        };
        values.push(parse_f64(fields[power_col], "power value")?);
        if let Some(c) = time_col {
            timestamps.push(parse_f64(fields[c], "timestamp")?);
        }
        if let Some(c) = origin_col {
            origins.push(
                fields[c]
                    .parse::<Origin>()
                    .map_err(|e| csv_err(path, lineno, e.to_string()))?,
            );
        }
        if let Some(c) = regime_col {
            regimes.push(
                fields[c]
                    .parse::<u32>()
                    .map_err(|_| csv_err(path, lineno, format!("bad regime label {:?}", fields[c])))?,
            );
        }
    }
    if values.is_empty() {
        return Err(csv_err(path, 2, "no data rows"));
    }

    let period = if timestamps.len() >= 2 {
        let dt = timestamps[1] - timestamps[0];
        if !(dt.is_finite() && dt > 0.0) {
            return Err(csv_err(path, 3, format!("non-increasing timestamps (dt = {dt})")));
        }
        dt
    } else {
        1.0
    };
    let mut series = SampleSeries::new(values, period)?;
    if !origins.is_empty() {
        series.set_origins(origins)?;
    }
    if !regimes.is_empty() {
        series.set_regimes(regimes)?;
    }
    Ok(series)
}

/// Writes a series as CSV with the same column layout `ingest_csv` reads.
/// Floats print in shortest round-trip form, so a write/ingest cycle
/// reproduces the values bit for bit.
pub fn write_csv(path: &Path, series: &SampleSeries) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    let mut header = String::from("index,timestamp_s,power_db");
    if series.origins().is_some() {
        header.push_str(",origin");
    }
    if series.regimes().is_some() {
        header.push_str(",regime");
    }
    writeln!(w, "{header}")?;
    let period = series.sample_period_s();
    for (i, v) in series.values().iter().enumerate() {
        write!(w, "{i},{},{v}", i as f64 * period)?;
        if let Some(o) = series.origins() {
            write!(w, ",{}", o[i])?;
        }
        if let Some(r) = series.regimes() {
            write!(w, ",{}", r[i])?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Contiguous equal partition into batches and sub-batches, remainders
/// appended to the last cell at each level. Alternate sub-batches feed
/// training and evaluation, so both splits sample every batch (and with it
/// every regime that spans at least one batch).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchSplit {
    cells: Vec<Vec<std::ops::Range<usize>>>,
}

impl BatchSplit {
    pub fn cells(&self) -> &[Vec<std::ops::Range<usize>>] {
        &self.cells
    }

    fn ranges_where(&self, pick_odd: bool) -> Vec<std::ops::Range<usize>> {
        self.cells
            .iter()
            .flat_map(|subs| {
                subs.iter()
                    .enumerate()
                    .filter(move |(s, _)| (s % 2 == 1) == pick_odd)
                    .map(|(_, r)| r.clone())
            })
            .collect()
    }

    /// Even sub-batches of every batch.
    pub fn train_ranges(&self) -> Vec<std::ops::Range<usize>> {
        self.ranges_where(false)
    }

    /// Odd sub-batches of every batch; empty when there is only one
    /// sub-batch per batch.
    pub fn eval_ranges(&self) -> Vec<std::ops::Range<usize>> {
        self.ranges_where(true)
    }
}

pub fn split_batches(series: &SampleSeries, n_batches: usize, n_sub: usize) -> Result<BatchSplit> {
    if n_batches == 0 || n_sub == 0 {
        return Err(Error::invalid("batch and sub-batch counts must be positive"));
    }
    let n = series.len();
    if n < n_batches * n_sub {
        return Err(Error::invalid(format!(
            "series of length {n} cannot fill {n_batches} x {n_sub} cells"
        )));
    }
    let batch_len = n / n_batches;
    let mut cells = Vec::with_capacity(n_batches);
    for b in 0..n_batches {
        let b_start = b * batch_len;
        let b_end = if b + 1 == n_batches { n } else { b_start + batch_len };
        let span = b_end - b_start;
        let sub_len = span / n_sub;
        let mut subs = Vec::with_capacity(n_sub);
        for s in 0..n_sub {
            let s_start = b_start + s * sub_len;
            let s_end = if s + 1 == n_sub { b_end } else { s_start + sub_len };
            subs.push(s_start..s_end);
        }
        cells.push(subs);
    }
    Ok(BatchSplit { cells })
}
