//! Sliding windows over a power series, with the per-window statistics the
//! estimator nets condition on.
//!
//! Windows are views into one shared buffer, so a stride-1 sweep over a long
//! series costs no copies. Each window caries its min, median, and
//! interquartile range; nets see the scale-free shape
//! `(x - median) / iqr` and thresholds are mapped back to dB afterwards.

use crate::error::{Error, Result};
use crate::series::SampleSeries;
use crate::stats;

/// Lower bound on the interquartile range used for standardization, so a
/// near-constant window cannot blow up the standardized values.
pub const IQR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowStats {
    pub min: f64,
    pub median: f64,
    /// Interquartile range, already floored at [`IQR_FLOOR`].
    pub iqr: f64,
}

/// Computes min/median/IQR of one window.
pub fn stats_of(window: &[f64]) -> WindowStats {
    debug_assert!(!window.is_empty());
    let sorted = stats::sorted_copy(window);
    WindowStats {
        min: sorted[0],
        median: stats::median_sorted(&sorted),
        iqr: stats::iqr_sorted(&sorted).max(IQR_FLOOR),
    }
}

/// `(x - median) / iqr` for each sample, preserving temporal order.
pub fn standardize_with(window: &[f64], stats: &WindowStats) -> Vec<f64> {
    window.iter().map(|x| (x - stats.median) / stats.iqr).collect()
}

/// The network view of a window: standardized values sorted ascending, i.e.
/// the window's empirical quantile profile. Everything the nets predict is
/// distributional, so sample order carries no information; sorting makes
/// order statistics plain coordinates instead of functions a dense net
/// would have to learn permutation invariance to recover.
pub fn net_input_with(window: &[f64], stats: &WindowStats) -> Vec<f64> {
    let mut v = standardize_with(window, stats);
    v.sort_unstable_by(f64::total_cmp);
    v
}

/// A strided sweep of fixed-length windows over one series.
#[derive(Debug, Clone)]
pub struct WindowSet {
    values: Vec<f64>,
    window_len: usize,
    starts: Vec<usize>,
    stats: Vec<WindowStats>,
    regimes: Option<Vec<u32>>,
}

impl WindowSet {
    pub fn from_values(values: &[f64], window_len: usize, stride: usize) -> Result<Self> {
        if window_len < 2 {
            return Err(Error::invalid(format!(
                "window length must be at least 2, got {window_len}"
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("stride must be positive"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("window source values".into()));
        }
        let mut starts = Vec::new();
        let mut start = 0;
        while start + window_len <= values.len() {
            starts.push(start);
            start += stride;
        }
        let stats = starts
            .iter()
            .map(|&s| stats_of(&values[s..s + window_len]))
            .collect();
        Ok(Self {
            values: values.to_vec(),
            window_len,
            starts,
            stats,
            regimes: None,
        })
    }

    pub fn from_series(series: &SampleSeries, window_len: usize, stride: usize) -> Result<Self> {
        let mut ws = Self::from_values(series.values(), window_len, stride)?;
        ws.label_from_series(series);
        Ok(ws)
    }

    /// Windows confined to the given index ranges of `series`, so that no
    /// window straddles a range boundary. Ranges shorter than one window
    /// contribute nothing. Per-window regime labels are taken from the
    /// series annotation (label at the window start) when present.
    pub fn from_series_ranges(
        series: &SampleSeries,
        ranges: &[std::ops::Range<usize>],
        window_len: usize,
        stride: usize,
    ) -> Result<Self> {
        if window_len < 2 {
            return Err(Error::invalid(format!(
                "window length must be at least 2, got {window_len}"
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("stride must be positive"));
        }
        let n = series.len();
        let mut starts = Vec::new();
        for r in ranges {
            if r.end > n || r.start > r.end {
                return Err(Error::domain(format!(
                    "range {r:?} out of bounds for series of length {n}"
                )));
            }
            let mut s = r.start;
            while s + window_len <= r.end {
                starts.push(s);
                s += stride;
            }
        }
        let values = series.values().to_vec();
        let stats = starts
            .iter()
            .map(|&s| stats_of(&values[s..s + window_len]))
            .collect();
        let mut ws = Self {
            values,
            window_len,
            starts,
            stats,
            regimes: None,
        };
        ws.label_from_series(series);
        Ok(ws)
    }

    fn label_from_series(&mut self, series: &SampleSeries) {
        if let Some(labels) = series.regimes() {
            self.regimes = Some(self.starts.iter().map(|&s| labels[s]).collect());
        }
    }

    /// Number of windows (zero when the series is shorter than one window).
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    /// Raw dB samples of window `i`, in temporal order.
    pub fn window(&self, i: usize) -> &[f64] {
        let s = self.starts[i];
        &self.values[s..s + self.window_len]
    }

    /// Start index of window `i` in the source series.
    pub fn start(&self, i: usize) -> usize {
        self.starts[i]
    }

    pub fn stats(&self, i: usize) -> &WindowStats {
        &self.stats[i]
    }

    pub fn standardized(&self, i: usize) -> Vec<f64> {
        standardize_with(self.window(i), &self.stats[i])
    }

    /// Sorted standardized window, the form the estimator nets consume.
    pub fn net_input(&self, i: usize) -> Vec<f64> {
        net_input_with(self.window(i), &self.stats[i])
    }

    /// Attaches one regime label per window.
    pub fn set_regimes(&mut self, regimes: Vec<u32>) -> Result<()> {
        if regimes.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got: regimes.len(),
            });
        }
        self.regimes = Some(regimes);
        Ok(())
    }

    pub fn regimes(&self) -> Option<&[u32]> {
        self.regimes.as_deref()
    }

    pub fn regime(&self, i: usize) -> Option<u32> {
        self.regimes.as_ref().map(|r| r[i])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_count_arithmetic() {
        let values: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        let ws = WindowSet::from_values(&values, 100, 1).unwrap();
        assert_eq!(ws.len(), 901);
        assert_eq!(ws.start(0), 0);
        assert_eq!(ws.start(900), 900);
        let ws = WindowSet::from_values(&values, 100, 100).unwrap();
        assert_eq!(ws.len(), 10);
        let ws = WindowSet::from_values(&values[..50], 100, 1).unwrap();
        assert!(ws.is_empty());
    }

    #[test]
    fn stats_and_standardization() {
        // 1..=100: min 1, median 50.5, q25/q75 at h = 99p interpolation.
        let values: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        let ws = WindowSet::from_values(&values, 100, 1).unwrap();
        let st = ws.stats(0);
        assert_eq!(st.min, 1.0);
        assert_eq!(st.median, 50.5);
        assert!((st.iqr - 49.5).abs() < 1e-12);
        let std = ws.standardized(0);
        assert_eq!(std.len(), 100);
        assert!((std[0] - (1.0 - 50.5) / 49.5).abs() < 1e-15);
        // Median of the standardized window is zero.
        let sorted = {
            let mut s = std.clone();
            s.sort_by(f64::total_cmp);
            s
        };
        assert!((sorted[49] + sorted[50]).abs() < 1e-15);
    }

    #[test]
    fn constant_window_hits_iqr_floor() {
        let values = vec![3.0; 10];
        let ws = WindowSet::from_values(&values, 10, 1).unwrap();
        assert_eq!(ws.stats(0).iqr, IQR_FLOOR);
        assert!(ws.standardized(0).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn regime_labels_must_match_window_count() {
        let values: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let mut ws = WindowSet::from_values(&values, 10, 10).unwrap();
        assert!(ws.set_regimes(vec![0, 1]).is_err());
        ws.set_regimes(vec![0, 1, 0]).unwrap();
        assert_eq!(ws.regime(2), Some(0));
    }

    #[test]
    fn invalid_construction() {
        assert!(WindowSet::from_values(&[1.0, 2.0], 1, 1).is_err());
        assert!(WindowSet::from_values(&[1.0, 2.0], 2, 0).is_err());
        assert!(WindowSet::from_values(&[1.0, f64::NAN], 2, 1).is_err());
    }

    #[test]
    fn ranged_windows_respect_boundaries() {
        use crate::series::SampleSeries;
        let mut series =
            SampleSeries::new((0..20).map(|i| i as f64).collect(), 1.0).unwrap();
        series
            .set_regimes((0..20).map(|i| u32::from(i >= 10)).collect())
            .unwrap();
        let ws = WindowSet::from_series_ranges(&series, &[0..10, 10..20], 4, 2).unwrap();
        // Starts 0,2,4,6 then 10,12,14,16: nothing crosses index 10.
        assert_eq!(ws.len(), 8);
        for i in 0..ws.len() {
            let s = ws.start(i);
            assert!(s + 4 <= 10 || s >= 10);
        }
        assert_eq!(ws.regimes().unwrap(), &[0, 0, 0, 0, 1, 1, 1, 1]);
        // A too-short range contributes nothing; bad bounds error.
        let ws2 = WindowSet::from_series_ranges(&series, &[0..3, 10..14], 4, 1).unwrap();
        assert_eq!(ws2.len(), 1);
        assert!(WindowSet::from_series_ranges(&series, &[5..25], 4, 1).is_err());
    }
}
