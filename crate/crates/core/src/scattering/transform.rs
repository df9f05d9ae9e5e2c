use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::filterbank::{build_filterbank, Filterbank, FilterbankConfig, LowPass, MorletFilter};
use crate::dsp;
use crate::error::{Error, Result};
use crate::signal::{Waveform, CANONICAL_RATE};

/// Filters are truncated this many standard deviations from their center.
const SUPPORT_SIGMAS: f64 = 5.0;

/// Anti-aliasing low-pass applied before decimating a modulus to the frame
/// rate has a standard deviation of `frame_rate / ANTI_ALIAS_DIVISOR`.
const ANTI_ALIAS_DIVISOR: f64 = 8.0;

/// Everything needed to compute a scattering vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatteringConfig {
    /// First-order (acoustic frequency) filterbank.
    pub first: FilterbankConfig,
    /// Second-order (modulation frequency) filterbank; its sample rate is the frame rate.
    pub second: FilterbankConfig,
    /// Maximum modulation time scale T, seconds.
    pub averaging_scale: f64,
    /// Decimation factor from the audio rate to the frame rate.
    pub hop: usize,
}

impl ScatteringConfig {
    pub const DEFAULT_HOP: usize = 32;

    /// Q1 = 12 from C1 (32.7 Hz) to 9 kHz, Q2 = 1 from 1 Hz to 64 Hz, at the canonical rate.
    pub fn with_scale(averaging_scale: f64) -> Self {
        let sr = CANONICAL_RATE as f64;
        let hop = Self::DEFAULT_HOP;
        ScatteringConfig {
            first: FilterbankConfig {
                bins_per_octave: 12,
                f_min: 32.703_195_662_574_83,
                f_max: 9000.0,
                sample_rate: sr,
            },
            second: FilterbankConfig {
                bins_per_octave: 1,
                f_min: 1.0,
                f_max: 64.0,
                sample_rate: sr / hop as f64,
            },
            averaging_scale,
            hop,
        }
    }

    pub fn frame_rate(&self) -> f64 {
        self.first.sample_rate / self.hop as f64
    }

    pub fn hop_seconds(&self) -> f64 {
        self.hop as f64 / self.first.sample_rate
    }

    pub fn validate(&self) -> Result<()> {
        self.first.validate()?;
        self.second.validate()?;
        if self.hop == 0 {
            return Err(Error::InvalidConfig("hop must be positive".into()));
        }
        if ((self.second.sample_rate - self.frame_rate()) / self.frame_rate()).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "second-order sample rate {} must equal the frame rate {}",
                self.second.sample_rate,
                self.frame_rate()
            )));
        }
        if !(self.averaging_scale.is_finite() && self.averaging_scale >= self.hop_seconds()) {
            return Err(Error::InvalidConfig(format!(
                "averaging scale {} s is shorter than one hop ({} s)",
                self.averaging_scale,
                self.hop_seconds()
            )));
        }
        Ok(())
    }
}

/// One coefficient of the scattering vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScatteringPath {
    pub order: u8,
    /// Acoustic band center, Hz.
    pub lambda1: f64,
    /// Modulation band center, Hz (second order only).
    pub lambda2: Option<f64>,
}

/// Time-averaged scattering coefficients with their path descriptors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatteringVector {
    pub values: Vec<f64>,
    pub paths: Vec<ScatteringPath>,
    /// T, seconds.
    pub averaging_scale: f64,
}

impl ScatteringVector {
    pub fn first_order(&self) -> impl Iterator<Item = (&ScatteringPath, f64)> {
        self.paths
            .iter()
            .zip(self.values.iter().copied())
            .filter(|(p, _)| p.order == 1)
    }

    pub fn second_order(&self) -> impl Iterator<Item = (&ScatteringPath, f64)> {
        self.paths
            .iter()
            .zip(self.values.iter().copied())
            .filter(|(p, _)| p.order == 2)
    }

    /// Second-order share of the total coefficient mass.
    pub fn second_order_fraction(&self) -> f64 {
        let total: f64 = self.values.iter().sum();
        if total == 0.0 {
            return 0.0;
        }
        self.second_order().map(|(_, v)| v).sum::<f64>() / total
    }
}

/// Constant-Q modulus sampled at a common hop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scalogram {
    /// `[n_bands][n_frames]`.
    pub magnitudes: Vec<Vec<f64>>,
    pub band_freqs: Vec<f64>,
    /// Seconds between frames.
    pub hop: f64,
}

impl Scalogram {
    pub fn n_frames(&self) -> usize {
        self.magnitudes.first().map_or(0, Vec::len)
    }

    /// Per-band mean over time.
    pub fn time_average(&self) -> Vec<f64> {
        self.magnitudes
            .iter()
            .map(|row| row.iter().sum::<f64>() / row.len().max(1) as f64)
            .collect()
    }
}

/// Reflection-padded signal and its spectrum.
struct Padded {
    spectrum: Vec<Complex64>,
    n_fft: usize,
    pad_left: usize,
    len: usize,
}

impl Padded {
    fn new(x: &[f64], min_pad: usize, hop: usize) -> Self {
        let needed = x.len() + 2 * min_pad;
        let n_fft = hop * needed.div_ceil(hop).next_power_of_two();
        let pad_left = (n_fft - x.len()) / 2;
        let padded: Vec<f64> = (0..n_fft)
            .map(|i| x[dsp::mirror_index(i as isize - pad_left as isize, x.len())])
            .collect();
        Padded {
            spectrum: dsp::fft_real(&padded),
            n_fft,
            pad_left,
            len: x.len(),
        }
    }

    fn n_frames(&self, hop: usize) -> usize {
        self.n_fft / hop
    }

    /// Frames whose sample position lies inside the unpadded signal.
    fn valid_frames(&self, hop: usize) -> std::ops::Range<usize> {
        let start = self.pad_left.div_ceil(hop);
        let end = (self.pad_left + self.len - 1) / hop + 1;
        start..end.max(start + 1)
    }
}

/// First-order layer evaluated on a padded signal.
struct FirstOrder {
    /// `[band][frame]` over the whole padded frame grid.
    rows: Vec<Vec<f64>>,
}

fn first_order_rows(padded: &Padded, filterbank: &Filterbank, sample_rate: f64, hop: usize) -> FirstOrder {
    let n = padded.n_fft;
    let df = sample_rate / n as f64;
    let n_frames = padded.n_frames(hop);
    let frame_rate = sample_rate / hop as f64;
    let anti_alias = frame_rate / ANTI_ALIAS_DIVISOR;

    let rows = filterbank
        .filters
        .iter()
        .map(|filter| {
            // Demodulate the filter's support to baseband; the modulus is unchanged.
            let (lo_hz, hi_hz) = filter.support(SUPPORT_SIGMAS);
            let lo = ((lo_hz / df).floor() as usize).max(1);
            let hi = ((hi_hz / df).ceil() as usize).min(n / 2);
            let width = hi.saturating_sub(lo) + 1;
            let m = (2 * width).next_power_of_two().max(16);
            let mut buf = vec![Complex64::new(0.0, 0.0); m];
            for (slot, bin) in buf.iter_mut().zip(lo..=hi) {
                *slot = padded.spectrum[bin] * filter.response(bin as f64 * df);
            }
            dsp::ifft(&mut buf);
            let mut modulus: Vec<Complex64> = buf
                .iter()
                .map(|c| Complex64::new(c.norm() / n as f64, 0.0))
                .collect();
            dsp::fft(&mut modulus);

            // Low-pass and resample the modulus spectrum onto the frame grid.
            let mut out = vec![Complex64::new(0.0, 0.0); n_frames];
            let half = m.min(n_frames) / 2;
            for (j, slot) in out.iter_mut().enumerate() {
                let k = dsp::signed_bin(j, n_frames);
                if k.unsigned_abs() >= half {
                    continue;
                }
                let src = k.rem_euclid(m as isize) as usize;
                let f = k as f64 * df;
                *slot = modulus[src] * (-f * f / (2.0 * anti_alias * anti_alias)).exp();
            }
            dsp::ifft(&mut out);
            out.iter().map(|c| (c.re / m as f64).max(0.0)).collect()
        })
        .collect();
    FirstOrder { rows }
}

fn min_padding(cfg: &ScatteringConfig, first: &Filterbank, second: &[MorletFilter]) -> usize {
    let lowpass = LowPass {
        scale: cfg.averaging_scale,
    };
    let widest = first
        .filters
        .iter()
        .chain(second)
        .map(MorletFilter::time_sigma)
        .fold(lowpass.time_sigma(), f64::max);
    (SUPPORT_SIGMAS * widest * cfg.first.sample_rate).ceil() as usize
}

fn check_rate(w: &Waveform, rate: f64) -> Result<()> {
    if (w.sample_rate() as f64 - rate).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "waveform at {} Hz, filterbank expects {} Hz",
            w.sample_rate(),
            rate
        )));
    }
    Ok(())
}

/// Constant-Q scalogram `|w * psi_k|`, anti-aliased and sampled every `hop` samples.
pub fn scalogram(w: &Waveform, fb: &Filterbank, hop: usize) -> Result<Scalogram> {
    check_rate(w, fb.config.sample_rate)?;
    if hop == 0 {
        return Err(Error::InvalidConfig("hop must be positive".into()));
    }
    let widest = fb
        .filters
        .iter()
        .map(MorletFilter::time_sigma)
        .fold(0.0, f64::max);
    let pad = (SUPPORT_SIGMAS * widest * fb.config.sample_rate).ceil() as usize;
    let padded = Padded::new(w.samples(), pad, hop);
    let first = first_order_rows(&padded, fb, fb.config.sample_rate, hop);
    let valid = padded.valid_frames(hop);
    Ok(Scalogram {
        magnitudes: first.rows.into_iter().map(|r| r[valid.clone()].to_vec()).collect(),
        band_freqs: fb.centers(),
        hop: hop as f64 / fb.config.sample_rate,
    })
}

/// Second-order modulation filters kept for a first-order band: `1/T <= lambda2 < lambda1 / 2`.
fn kept_modulations<'a>(
    lambda1: f64,
    second: &'a [MorletFilter],
    averaging_scale: f64,
) -> impl Iterator<Item = &'a MorletFilter> + 'a {
    let floor = 1.0 / averaging_scale;
    second
        .iter()
        .filter(move |f| f.center >= floor * (1.0 - 1e-9) && f.center < lambda1 / 2.0)
}

/// Canonical path list for a configuration: all first-order paths by ascending
/// lambda1, then second-order paths by (lambda1, lambda2).
pub fn scattering_paths(cfg: &ScatteringConfig) -> Result<Vec<ScatteringPath>> {
    cfg.validate()?;
    let first = build_filterbank(&cfg.first)?;
    let second = second_filters(&cfg.second)?;
    Ok(paths_for(&first, &second, cfg.averaging_scale))
}

fn second_filters(cfg: &FilterbankConfig) -> Result<Vec<MorletFilter>> {
    cfg.validate()?;
    Ok(cfg
        .center_frequencies()
        .into_iter()
        .map(|c| MorletFilter::new(c, cfg.bins_per_octave))
        .collect())
}

fn paths_for(first: &Filterbank, second: &[MorletFilter], averaging_scale: f64) -> Vec<ScatteringPath> {
    let mut paths: Vec<ScatteringPath> = first
        .filters
        .iter()
        .map(|f| ScatteringPath {
            order: 1,
            lambda1: f.center,
            lambda2: None,
        })
        .collect();
    for f1 in &first.filters {
        for f2 in kept_modulations(f1.center, second, averaging_scale) {
            paths.push(ScatteringPath {
                order: 2,
                lambda1: f1.center,
                lambda2: Some(f2.center),
            });
        }
    }
    paths
}

/// Reusable scattering operator: filterbanks are built once and shared.
#[derive(Debug, Clone)]
pub struct Scatterer {
    config: ScatteringConfig,
    first: Filterbank,
    second: Vec<MorletFilter>,
    paths: Vec<ScatteringPath>,
}

impl Scatterer {
    pub fn new(config: ScatteringConfig) -> Result<Self> {
        config.validate()?;
        let first = build_filterbank(&config.first)?;
        let second = second_filters(&config.second)?;
        let paths = paths_for(&first, &second, config.averaging_scale);
        Ok(Scatterer {
            config,
            first,
            second,
            paths,
        })
    }

    pub fn config(&self) -> &ScatteringConfig {
        &self.config
    }

    pub fn paths(&self) -> &[ScatteringPath] {
        &self.paths
    }

    pub fn first_filterbank(&self) -> &Filterbank {
        &self.first
    }

    pub fn scatter(&self, w: &Waveform) -> Result<ScatteringVector> {
        let cfg = &self.config;
        check_rate(w, cfg.first.sample_rate)?;
        let sr = cfg.first.sample_rate;
        let hop = cfg.hop;
        let padded = Padded::new(w.samples(), min_padding(cfg, &self.first, &self.second), hop);
        let first = first_order_rows(&padded, &self.first, sr, hop);
        let n_frames = padded.n_frames(hop);
        let valid = padded.valid_frames(hop);
        let df = sr / padded.n_fft as f64;
        let lowpass = LowPass {
            scale: cfg.averaging_scale,
        };
        let mean_valid = |x: &[Complex64], norm: f64, modulus: bool| -> f64 {
            let s: f64 = x[valid.clone()]
                .iter()
                .map(|c| if modulus { c.norm() } else { c.re })
                .sum();
            s / (norm * valid.len() as f64)
        };

        let mut s1 = Vec::with_capacity(self.first.len());
        let mut s2 = Vec::new();
        let mut buf = vec![Complex64::new(0.0, 0.0); n_frames];
        for (row, f1) in first.rows.iter().zip(&self.first.filters) {
            let spectrum = dsp::fft_real(row);

            for (j, slot) in buf.iter_mut().enumerate() {
                let f = dsp::signed_bin(j, n_frames) as f64 * df;
                *slot = spectrum[j] * lowpass.response(f);
            }
            dsp::ifft(&mut buf);
            s1.push(mean_valid(&buf, n_frames as f64, false).max(0.0));

            for f2 in kept_modulations(f1.center, &self.second, cfg.averaging_scale) {
                for (j, slot) in buf.iter_mut().enumerate() {
                    let f = dsp::signed_bin(j, n_frames) as f64 * df;
                    *slot = spectrum[j] * f2.response(f);
                }
                dsp::ifft(&mut buf);
                s2.push(mean_valid(&buf, n_frames as f64, true));
            }
        }
        s1.extend(s2);
        debug_assert_eq!(s1.len(), self.paths.len());
        Ok(ScatteringVector {
            values: s1,
            paths: self.paths.clone(),
            averaging_scale: cfg.averaging_scale,
        })
    }

    /// Scatters many waveforms in parallel.
    pub fn scatter_batch(&self, waves: &[Waveform]) -> Result<Vec<ScatteringVector>> {
        waves.par_iter().map(|w| self.scatter(w)).collect()
    }
}

/// First- and second-order time scattering averaged over the whole signal.
pub fn scatter(
    w: &Waveform,
    cfg1: &FilterbankConfig,
    cfg2: &FilterbankConfig,
    averaging_scale: f64,
) -> Result<ScatteringVector> {
    let hop = (cfg1.sample_rate / cfg2.sample_rate).round().max(1.0) as usize;
    Scatterer::new(ScatteringConfig {
        first: *cfg1,
        second: *cfg2,
        averaging_scale,
        hop,
    })?
    .scatter(w)
}
