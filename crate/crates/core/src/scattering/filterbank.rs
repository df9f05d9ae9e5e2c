use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// FWHM of a unit-variance Gaussian.
const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949_3;

/// Relative slack when deciding whether `f_max` itself is a band center.
const EDGE_TOLERANCE: f64 = 1e-9;

/// Constant-Q filterbank layout: centers `f_min * 2^(k/Q)` up to `f_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterbankConfig {
    pub bins_per_octave: u32,
    pub f_min: f64,
    pub f_max: f64,
    pub sample_rate: f64,
}

impl FilterbankConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidFilterbank(m));
        if self.bins_per_octave == 0 {
            return bad("bins_per_octave must be at least 1".into());
        }
        if !(self.sample_rate.is_finite() && self.sample_rate > 0.0) {
            return bad("sample rate must be positive".into());
        }
        if !(self.f_min.is_finite() && self.f_min > 0.0) {
            return bad(format!("f_min must be positive, got {}", self.f_min));
        }
        if !(self.f_min < self.f_max) {
            return bad(format!("f_min {} must be below f_max {}", self.f_min, self.f_max));
        }
        if self.f_max > self.sample_rate / 2.0 {
            return bad(format!(
                "f_max {} exceeds Nyquist {}",
                self.f_max,
                self.sample_rate / 2.0
            ));
        }
        Ok(())
    }

    /// Center frequencies, ascending.
    pub fn center_frequencies(&self) -> Vec<f64> {
        let q = self.bins_per_octave as f64;
        let count = (q * (self.f_max / self.f_min).log2() + EDGE_TOLERANCE).floor() as usize + 1;
        (0..count)
            .map(|k| self.f_min * 2f64.powf(k as f64 / q))
            .collect()
    }
}

/// Analytic Morlet filter with center `center` Hz and full-width-at-half-maximum
/// `center / Q`, corrected to have zero response at DC.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MorletFilter {
    pub center: f64,
    pub bandwidth: f64,
}

impl MorletFilter {
    pub fn new(center: f64, bins_per_octave: u32) -> Self {
        MorletFilter {
            center,
            bandwidth: center / bins_per_octave as f64,
        }
    }

    /// Standard deviation of the Gaussian envelope in frequency, Hz.
    pub fn sigma(&self) -> f64 {
        self.bandwidth / FWHM_PER_SIGMA
    }

    /// Standard deviation of the time-domain envelope, seconds.
    pub fn time_sigma(&self) -> f64 {
        1.0 / (2.0 * std::f64::consts::PI * self.sigma())
    }

    /// Frequency response at `freq` Hz; zero for non-positive frequencies.
    pub fn response(&self, freq: f64) -> f64 {
        if freq <= 0.0 {
            return 0.0;
        }
        let s2 = 2.0 * self.sigma() * self.sigma();
        let kappa = (-self.center * self.center / s2).exp();
        (-(freq - self.center).powi(2) / s2).exp() - kappa * (-freq * freq / s2).exp()
    }

    /// Frequency interval outside which the response is negligible.
    pub fn support(&self, n_sigma: f64) -> (f64, f64) {
        let s = self.sigma();
        ((self.center - n_sigma * s).max(0.0), self.center + n_sigma * s)
    }
}

/// Gaussian low-pass whose FWHM in frequency is `1 / scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LowPass {
    /// Time scale, seconds.
    pub scale: f64,
}

impl LowPass {
    pub fn sigma(&self) -> f64 {
        1.0 / (self.scale * FWHM_PER_SIGMA)
    }

    pub fn time_sigma(&self) -> f64 {
        1.0 / (2.0 * std::f64::consts::PI * self.sigma())
    }

    pub fn response(&self, freq: f64) -> f64 {
        let s = self.sigma();
        (-freq * freq / (2.0 * s * s)).exp()
    }
}

/// Immutable set of band-pass filters for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Filterbank {
    pub config: FilterbankConfig,
    pub filters: Vec<MorletFilter>,
}

impl Filterbank {
    pub fn centers(&self) -> Vec<f64> {
        self.filters.iter().map(|f| f.center).collect()
    }

    pub fn len(&self) -> usize {
        self.filters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filters.is_empty()
    }

    /// Index of the band whose log-frequency bin contains `freq`.
    pub fn band_containing(&self, freq: f64) -> Option<usize> {
        let q = self.config.bins_per_octave as f64;
        let k = (q * (freq / self.config.f_min).log2()).round();
        (k >= 0.0 && (k as usize) < self.filters.len()).then_some(k as usize)
    }
}

/// Builds one Morlet filter per center frequency of `cfg`.
pub fn build_filterbank(cfg: &FilterbankConfig) -> Result<Filterbank> {
    cfg.validate()?;
    let centers = cfg.center_frequencies();
    if centers.len() < 2 {
        return Err(Error::InvalidFilterbank(format!(
            "only {} band(s) between {} and {} Hz",
            centers.len(),
            cfg.f_min,
            cfg.f_max
        )));
    }
    Ok(Filterbank {
        config: *cfg,
        filters: centers
            .into_iter()
            .map(|c| MorletFilter::new(c, cfg.bins_per_octave))
            .collect(),
    })
}
