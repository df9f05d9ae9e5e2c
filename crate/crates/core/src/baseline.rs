//! MFCC baseline: 40-band mel spectrum, DCT-II cepstrum, and summaries over time.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dsp;
use crate::error::{Error, Result};
use crate::signal::Waveform;

/// Added inside the logarithm so silent frames stay finite.
pub const LOG_GUARD: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MfccConfig {
    pub n_mel_bands: usize,
    pub n_coeffs: usize,
    /// Seconds.
    pub frame_length: f64,
    /// Seconds.
    pub hop: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        MfccConfig {
            n_mel_bands: 40,
            n_coeffs: 13,
            frame_length: 0.025,
            hop: 0.010,
        }
    }
}

impl MfccConfig {
    pub fn with_coeffs(n_coeffs: usize) -> Self {
        MfccConfig {
            n_coeffs,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_mel_bands == 0 || self.n_coeffs == 0 {
            return Err(Error::InvalidConfig("band and coefficient counts must be positive".into()));
        }
        if self.n_coeffs > self.n_mel_bands {
            return Err(Error::InvalidConfig(format!(
                "{} coefficients exceed {} mel bands",
                self.n_coeffs, self.n_mel_bands
            )));
        }
        if !(self.frame_length > 0.0 && self.hop > 0.0) {
            return Err(Error::InvalidConfig("frame length and hop must be positive".into()));
        }
        Ok(())
    }

    fn frame_samples(&self, sample_rate: u32) -> usize {
        (self.frame_length * sample_rate as f64).round().max(1.0) as usize
    }

    fn hop_samples(&self, sample_rate: u32) -> usize {
        (self.hop * sample_rate as f64).round().max(1.0) as usize
    }
}

/// HTK mel scale.
pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filters with unit peaks, spanning 0 Hz to Nyquist.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    /// `n_bands + 2` edge frequencies in Hz; band `b` peaks at `edges[b + 1]`.
    pub edges: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(n_bands: usize, sample_rate: u32) -> Self {
        let top = hz_to_mel(sample_rate as f64 / 2.0);
        let edges = (0..n_bands + 2)
            .map(|i| mel_to_hz(top * i as f64 / (n_bands + 1) as f64))
            .collect();
        MelFilterbank { edges }
    }

    pub fn n_bands(&self) -> usize {
        self.edges.len() - 2
    }

    pub fn centers(&self) -> &[f64] {
        &self.edges[1..self.edges.len() - 1]
    }

    pub fn weight(&self, band: usize, freq: f64) -> f64 {
        let (lo, mid, hi) = (self.edges[band], self.edges[band + 1], self.edges[band + 2]);
        if freq <= lo || freq >= hi {
            0.0
        } else if freq <= mid {
            (freq - lo) / (mid - lo)
        } else {
            (hi - freq) / (hi - mid)
        }
    }

    /// Pools values sampled at `freqs` into the mel bands with the triangular weights.
    pub fn project(&self, values: &[f64], freqs: &[f64]) -> Vec<f64> {
        (0..self.n_bands())
            .map(|b| {
                values
                    .iter()
                    .zip(freqs)
                    .map(|(v, &f)| v * self.weight(b, f))
                    .sum()
            })
            .collect()
    }
}

/// Magnitude mel spectrogram `[n_mel_bands][n_frames]` with Hann-windowed frames.
pub fn mel_spectrogram(w: &Waveform, cfg: &MfccConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let sr = w.sample_rate();
    let frame = cfg.frame_samples(sr);
    let hop = cfg.hop_samples(sr);
    if w.len() < frame {
        return Err(Error::InvalidWaveform(format!(
            "{} samples is shorter than one {frame}-sample frame",
            w.len()
        )));
    }
    let n_fft = frame.next_power_of_two();
    let n_frames = 1 + (w.len() - frame) / hop;
    let window = dsp::hann(frame);
    let mel = MelFilterbank::new(cfg.n_mel_bands, sr);
    let bin_hz = sr as f64 / n_fft as f64;
    // sparse filter rows: (first bin, weights)
    let filters: Vec<(usize, Vec<f64>)> = (0..cfg.n_mel_bands)
        .map(|b| {
            let first = (mel.edges[b] / bin_hz).floor() as usize;
            let last = ((mel.edges[b + 2] / bin_hz).ceil() as usize).min(n_fft / 2);
            let weights = (first..=last).map(|k| mel.weight(b, k as f64 * bin_hz)).collect();
            (first, weights)
        })
        .collect();

    let x = w.samples();
    let mut out = vec![vec![0.0; n_frames]; cfg.n_mel_bands];
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    let mut magnitude = vec![0.0; n_fft / 2 + 1];
    for t in 0..n_frames {
        let start = t * hop;
        buf.fill(Complex64::new(0.0, 0.0));
        for (i, slot) in buf.iter_mut().take(frame).enumerate() {
            *slot = Complex64::new(x[start + i] * window[i], 0.0);
        }
        dsp::fft(&mut buf);
        for (m, c) in magnitude.iter_mut().zip(&buf) {
            *m = c.norm();
        }
        for (row, (first, weights)) in out.iter_mut().zip(&filters) {
            row[t] = weights
                .iter()
                .zip(&magnitude[*first..])
                .map(|(wgt, m)| wgt * m)
                .sum();
        }
    }
    Ok(out)
}

/// DTFT of the periodic Hann window of length `len` at angular frequency `theta`.
fn hann_response(len: usize, theta: f64) -> Complex64 {
    let l = len as f64;
    let dirichlet = |t: f64| -> Complex64 {
        let denom = Complex64::new(1.0, 0.0) - Complex64::from_polar(1.0, -t);
        if denom.norm() < 1e-12 {
            Complex64::new(l, 0.0)
        } else {
            (Complex64::new(1.0, 0.0) - Complex64::from_polar(1.0, -t * l)) / denom
        }
    };
    let step = 2.0 * std::f64::consts::PI / l;
    dirichlet(theta) * 0.5 - (dirichlet(theta - step) + dirichlet(theta + step)) * 0.25
}

/// Mel frame that a steady sum of sinusoids with amplitudes `values` at `freqs`
/// would produce, up to a global gain: every line is spread by the magnitude
/// response of the analysis window over the FFT bins, then pooled by the mel
/// triangles. Lets a sharper spectrum be compared at the STFT's resolution.
pub fn render_line_spectrum(
    values: &[f64],
    freqs: &[f64],
    cfg: &MfccConfig,
    sample_rate: u32,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if values.len() != freqs.len() {
        return Err(Error::DimensionMismatch {
            expected: freqs.len(),
            got: values.len(),
        });
    }
    let frame = cfg.frame_samples(sample_rate);
    let n_fft = frame.next_power_of_two();
    let bin_hz = sample_rate as f64 / n_fft as f64;
    // mainlobe plus the first few sidelobes
    let reach = 8.0 * sample_rate as f64 / frame as f64;
    let mut magnitude = vec![0.0; n_fft / 2 + 1];
    for (&a, &f) in values.iter().zip(freqs) {
        if a == 0.0 {
            continue;
        }
        let lo = ((f - reach) / bin_hz).floor().max(0.0) as usize;
        let hi = (((f + reach) / bin_hz).ceil() as usize).min(n_fft / 2);
        for (k, slot) in magnitude.iter_mut().enumerate().take(hi + 1).skip(lo) {
            let theta = 2.0 * std::f64::consts::PI * (k as f64 * bin_hz - f) / sample_rate as f64;
            *slot += a * hann_response(frame, theta).norm();
        }
    }
    let mel = MelFilterbank::new(cfg.n_mel_bands, sample_rate);
    Ok((0..cfg.n_mel_bands)
        .map(|b| {
            magnitude
                .iter()
                .enumerate()
                .map(|(k, m)| m * mel.weight(b, k as f64 * bin_hz))
                .sum()
        })
        .collect())
}

/// Orthonormal DCT-II of `x`, first `n_out` coefficients.
fn dct2(x: &[f64], n_out: usize) -> Vec<f64> {
    let n = x.len() as f64;
    (0..n_out)
        .map(|k| {
            let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            scale
                * x.iter()
                    .enumerate()
                    .map(|(i, v)| {
                        v * (std::f64::consts::PI * k as f64 * (2 * i + 1) as f64 / (2.0 * n)).cos()
                    })
                    .sum::<f64>()
        })
        .collect()
}

/// Cepstral coefficients of one mel frame, coefficient 0 included.
pub fn cepstrum(mel_frame: &[f64], n_coeffs: usize) -> Vec<f64> {
    let logs: Vec<f64> = mel_frame.iter().map(|m| (m + LOG_GUARD).ln()).collect();
    dct2(&logs, n_coeffs)
}

/// MFCCs `[n_coeffs][n_frames]`.
pub fn mfcc(w: &Waveform, cfg: &MfccConfig) -> Result<Vec<Vec<f64>>> {
    let mel = mel_spectrogram(w, cfg)?;
    let n_frames = mel[0].len();
    let mut out = vec![vec![0.0; n_frames]; cfg.n_coeffs];
    let mut column = vec![0.0; cfg.n_mel_bands];
    for t in 0..n_frames {
        for (slot, row) in column.iter_mut().zip(&mel) {
            *slot = row[t];
        }
        for (k, c) in cepstrum(&column, cfg.n_coeffs).into_iter().enumerate() {
            out[k][t] = c;
        }
    }
    Ok(out)
}

fn check_frames(frames: &[Vec<f64>]) -> Result<usize> {
    let n = frames
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::EmptyInput("no rows".into()))?;
    if n == 0 {
        return Err(Error::EmptyInput("no frames".into()));
    }
    if frames.iter().any(|r| r.len() != n) {
        return Err(Error::InvalidConfig("ragged frame matrix".into()));
    }
    Ok(n)
}

/// Per-row mean across frames.
pub fn summarize_mean(frames: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = check_frames(frames)?;
    Ok(frames
        .iter()
        .map(|row| row.iter().sum::<f64>() / n as f64)
        .collect())
}

/// Number of monomials of degree 1..=max_degree in `n` variables.
pub fn poly_dimension(n: usize, max_degree: usize) -> usize {
    // multiset coefficient C(n + d - 1, d) summed over d
    (1..=max_degree)
        .map(|d| {
            let mut c: usize = 1;
            for i in 0..d {
                c = c * (n + i) / (i + 1);
            }
            c
        })
        .sum()
}

/// Time averages of all monomials of degree 1..=max_degree over the rows.
///
/// Order: degree-major, then lexicographic in non-decreasing index tuples.
pub fn summarize_poly(frames: &[Vec<f64>], max_degree: usize) -> Result<Vec<f64>> {
    if !(2..=3).contains(&max_degree) {
        return Err(Error::InvalidConfig(format!(
            "max_degree must be 2 or 3, got {max_degree}"
        )));
    }
    let n = check_frames(frames)?;
    let m = frames.len();
    let mean = |f: &dyn Fn(usize) -> f64| (0..n).map(f).sum::<f64>() / n as f64;
    let mut out = Vec::with_capacity(poly_dimension(m, max_degree));
    for i in 0..m {
        out.push(mean(&|t| frames[i][t]));
    }
    for i in 0..m {
        for j in i..m {
            out.push(mean(&|t| frames[i][t] * frames[j][t]));
        }
    }
    if max_degree == 3 {
        for i in 0..m {
            for j in i..m {
                for k in j..m {
                    out.push(mean(&|t| frames[i][t] * frames[j][t] * frames[k][t]));
                }
            }
        }
    }
    Ok(out)
}
