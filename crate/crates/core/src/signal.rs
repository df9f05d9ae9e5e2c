//! Waveforms, WAV ingestion, band-limited resampling and synthesis of
//! modulated harmonic tones.

use std::f64::consts::PI;
use std::io::{Read, Seek};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dynamics, NoteMetadata, Pitch};
use crate::error::{Error, Result};

/// Sample rate every feature extractor assumes.
pub const CANONICAL_RATE: u32 = 22_050;

/// Mono audio with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyAudio);
        }
        if sample_rate == 0 {
            return Err(Error::InvalidWaveform("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidWaveform(format!("non-finite sample at {i}")));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        (self.samples.iter().map(|x| x * x).sum::<f64>() / self.len() as f64).sqrt()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Multiplies every sample by `gain`.
    pub fn scaled(&self, gain: f64) -> Result<Self> {
        Waveform::new(self.samples.iter().map(|x| x * gain).collect(), self.sample_rate)
    }

    /// Circular shift by `shift` samples (positive delays the signal).
    pub fn rotated(&self, shift: isize) -> Self {
        let n = self.len() as isize;
        let s = shift.rem_euclid(n) as usize;
        let mut out = self.samples.clone();
        out.rotate_right(s);
        Waveform {
            samples: out,
            sample_rate: self.sample_rate,
        }
    }

    /// Copy of the sample range `[start, end)`, clamped to the signal.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        let end = end.min(self.len());
        let start = start.min(end);
        Waveform::new(self.samples[start..end].to_vec(), self.sample_rate)
    }
}

/// Header facts of a WAV stream, available without decoding samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WavInfo {
    pub sample_rate: u32,
    pub channels: u16,
    pub frames: u32,
}

impl WavInfo {
    pub fn duration(&self) -> f64 {
        self.frames as f64 / self.sample_rate as f64
    }
}

fn decode<R: Read>(reader: hound::WavReader<R>) -> std::result::Result<Waveform, DecodeError> {
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(DecodeError::Unsupported("zero channels".into()));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32_768.0))
            .collect::<std::result::Result<_, _>>()?,
        (hound::SampleFormat::Int, 24) => reader
            .into_samples::<i32>()
            .map(|s| s.map(|v| v as f64 / 8_388_608.0))
            .collect::<std::result::Result<_, _>>()?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()?,
        (format, bits) => {
            return Err(DecodeError::Unsupported(format!(
                "{bits}-bit {format:?} samples"
            )))
        }
    };
    let frames = interleaved.len() / channels;
    if frames == 0 {
        return Err(DecodeError::Empty);
    }
    let mono: Vec<f64> = interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    Waveform::new(mono, spec.sample_rate).map_err(|e| DecodeError::Unsupported(e.to_string()))
}

enum DecodeError {
    Hound(hound::Error),
    Unsupported(String),
    Empty,
}

impl From<hound::Error> for DecodeError {
    fn from(e: hound::Error) -> Self {
        DecodeError::Hound(e)
    }
}

fn map_decode_error(path: &Path, e: DecodeError) -> Error {
    match e {
        DecodeError::Hound(hound::Error::Unsupported) => {
            Error::UnsupportedEncoding("format not supported by the WAV reader".into())
        }
        DecodeError::Hound(e) => Error::UnreadableAudio {
            path: path.to_path_buf(),
            reason: e.to_string(),
        },
        DecodeError::Unsupported(what) => Error::UnsupportedEncoding(what),
        DecodeError::Empty => Error::EmptyAudio,
    }
}

/// Reads a RIFF WAV file (16/24-bit PCM or 32-bit float), averaging channels to mono.
pub fn load_wav(path: &Path) -> Result<Waveform> {
    let reader = hound::WavReader::open(path).map_err(|e| map_decode_error(path, e.into()))?;
    decode(reader).map_err(|e| map_decode_error(path, e))
}

/// Decodes an in-memory WAV stream.
pub fn decode_wav<R: Read + Seek>(source: R) -> Result<Waveform> {
    let reader =
        hound::WavReader::new(source).map_err(|e| map_decode_error(Path::new("<memory>"), e.into()))?;
    decode(reader).map_err(|e| map_decode_error(Path::new("<memory>"), e))
}

/// Parses only the header of an in-memory WAV stream.
pub fn wav_info<R: Read>(source: R) -> Result<WavInfo> {
    let reader = hound::WavReader::new(source)
        .map_err(|e| map_decode_error(Path::new("<memory>"), e.into()))?;
    let spec = reader.spec();
    Ok(WavInfo {
        sample_rate: spec.sample_rate,
        channels: spec.channels,
        frames: reader.duration(),
    })
}

/// Writes a mono 32-bit float WAV file.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let to_err = |e: hound::Error| Error::UnreadableAudio {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(to_err)?;
    for &s in &w.samples {
        writer.write_sample(s as f32).map_err(to_err)?;
    }
    writer.finalize().map_err(to_err)
}

/// Encodes a waveform as an in-memory mono 32-bit float WAV.
pub fn encode_wav(w: &Waveform) -> Vec<u8> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut cursor = std::io::Cursor::new(Vec::new());
    {
        let mut writer = hound::WavWriter::new(&mut cursor, spec).expect("in-memory writer");
        for &s in &w.samples {
            writer.write_sample(s as f32).expect("in-memory write");
        }
        writer.finalize().expect("in-memory finalize");
    }
    cursor.into_inner()
}

const SINC_HALF_TAPS: usize = 32;
const KAISER_BETA: f64 = 12.0;
const KERNEL_OVERSAMPLING: usize = 512;

/// Zeroth-order modified Bessel function of the first kind.
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half = x / 2.0;
    for k in 1..64 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Kaiser-windowed sinc kernel tabulated on a fine grid over `[0, SINC_HALF_TAPS]`.
struct SincKernel {
    table: Vec<f64>,
}

impl SincKernel {
    fn new(cutoff: f64) -> Self {
        let n = SINC_HALF_TAPS * KERNEL_OVERSAMPLING + 1;
        let i0_beta = bessel_i0(KAISER_BETA);
        let table = (0..n)
            .map(|i| {
                let x = i as f64 / KERNEL_OVERSAMPLING as f64;
                let r = x / SINC_HALF_TAPS as f64;
                let window = bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / i0_beta;
                cutoff * sinc(cutoff * x) * window
            })
            .collect();
        SincKernel { table }
    }

    fn eval(&self, x: f64) -> f64 {
        let pos = x.abs() * KERNEL_OVERSAMPLING as f64;
        let i = pos.floor() as usize;
        if i + 1 >= self.table.len() {
            return 0.0;
        }
        let frac = pos - i as f64;
        self.table[i] * (1.0 - frac) + self.table[i + 1] * frac
    }
}

/// Band-limited resampling with a 64-tap Kaiser-windowed sinc (beta 12).
///
/// Output length is `round(len * target / source)`; equal rates return a copy.
pub fn resample(w: &Waveform, target_rate: u32) -> Result<Waveform> {
    if target_rate == 0 {
        return Err(Error::InvalidConfig("target rate must be positive".into()));
    }
    if target_rate == w.sample_rate {
        return Ok(w.clone());
    }
    let ratio = target_rate as f64 / w.sample_rate as f64;
    let out_len = ((w.len() as f64) * ratio).round().max(1.0) as usize;
    let x = &w.samples;
    let kernel = SincKernel::new(ratio.min(1.0));
    let half = SINC_HALF_TAPS as isize;
    let out: Vec<f64> = (0..out_len)
        .map(|n| {
            let t = n as f64 / ratio;
            let base = t.floor() as isize;
            let mut acc = 0.0;
            for j in (base - half + 1)..=(base + half) {
                if j < 0 || j as usize >= x.len() {
                    continue;
                }
                acc += x[j as usize] * kernel.eval(t - j as f64);
            }
            acc
        })
        .collect();
    Waveform::new(out, target_rate)
}

/// Resamples to the canonical rate used by all extractors.
pub fn to_canonical(w: &Waveform) -> Result<Waveform> {
    resample(w, CANONICAL_RATE)
}

/// Elastic time-stretch by `factor` (1.01 = 1% longer, 1% lower in pitch).
pub fn time_stretch(w: &Waveform, factor: f64) -> Result<Waveform> {
    if !(factor > 0.0) {
        return Err(Error::InvalidConfig("stretch factor must be positive".into()));
    }
    let stretched_rate = (w.sample_rate as f64 * factor).round() as u32;
    let mut out = resample(w, stretched_rate)?;
    out.sample_rate = w.sample_rate;
    Ok(out)
}

/// Parameters of one synthetic note.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    /// Fundamental frequency, Hz.
    pub carrier_freq: f64,
    /// Seconds.
    pub duration: f64,
    /// Amplitude-modulation rate in Hz (0 disables).
    pub am_rate: f64,
    pub am_depth: f64,
    /// Frequency-modulation rate in Hz (0 disables).
    pub fm_rate: f64,
    /// Peak frequency deviation in semitones.
    pub fm_depth: f64,
    pub n_partials: usize,
    /// Time constant of the exponential attack, seconds.
    pub attack_time: f64,
    /// Length of the raised-cosine fade-out, seconds.
    pub release_time: f64,
    /// Noise RMS relative to tone RMS.
    pub noise_level: f64,
    /// Partial `p` has amplitude `p^-rolloff`.
    pub partial_rolloff: f64,
    /// Extra gain applied to even-numbered partials.
    pub even_gain: f64,
    /// Output peak is `0.9 * gain`.
    pub gain: f64,
    /// Technique tag.
    pub label: String,
    pub instrument: String,
    pub dynamics: Dynamics,
}

impl SynthSpec {
    /// A plain unmodulated note.
    pub fn plain(carrier_freq: f64, duration: f64) -> Self {
        SynthSpec {
            carrier_freq,
            duration,
            am_rate: 0.0,
            am_depth: 0.0,
            fm_rate: 0.0,
            fm_depth: 0.0,
            n_partials: 1,
            attack_time: 0.02,
            release_time: 0.03,
            noise_level: 0.0,
            partial_rolloff: 1.0,
            even_gain: 1.0,
            gain: 1.0,
            label: "ordinario".into(),
            instrument: "SynA".into(),
            dynamics: Dynamics::Mf,
        }
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSynthSpec(m.to_string()));
        let nonneg = |x: f64| x.is_finite() && x >= 0.0;
        let unit = |x: f64| x.is_finite() && (0.0..=1.0).contains(&x);
        if sample_rate == 0 {
            return bad("sample rate must be positive");
        }
        if !(self.carrier_freq.is_finite() && self.carrier_freq > 0.0) {
            return bad("carrier frequency must be positive");
        }
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return bad("duration must be positive");
        }
        if !nonneg(self.am_rate) || !nonneg(self.fm_rate) {
            return bad("modulation rates must be non-negative");
        }
        if !unit(self.am_depth) || !unit(self.noise_level) {
            return bad("am_depth and noise_level must lie in [0, 1]");
        }
        if !nonneg(self.fm_depth) || !nonneg(self.attack_time) || !nonneg(self.release_time) {
            return bad("fm_depth, attack_time and release_time must be non-negative");
        }
        if self.n_partials == 0 {
            return bad("n_partials must be positive");
        }
        if !(self.gain > 0.0 && self.gain <= 1.0) {
            return bad("gain must lie in (0, 1]");
        }
        if !nonneg(self.partial_rolloff) || !nonneg(self.even_gain) {
            return bad("partial_rolloff and even_gain must be non-negative");
        }
        let nyquist = sample_rate as f64 / 2.0;
        let top = self.carrier_freq * self.n_partials as f64 * 2f64.powf(self.fm_depth / 12.0);
        if top >= nyquist {
            return Err(Error::Aliasing {
                freq: top,
                nyquist,
            });
        }
        Ok(())
    }
}

/// Synthesizes one note; deterministic in `seed`.
pub fn synth_note(spec: &SynthSpec, sample_rate: u32, seed: u64) -> Result<(Waveform, NoteMetadata)> {
    spec.validate(sample_rate)?;
    let sr = sample_rate as f64;
    let n = (spec.duration * sr).round().max(1.0) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phases: Vec<f64> = (0..spec.n_partials)
        .map(|_| rng.random_range(0.0..2.0 * PI))
        .collect();
    let amps: Vec<f64> = (1..=spec.n_partials)
        .map(|p| {
            let a = (p as f64).powf(-spec.partial_rolloff);
            if p % 2 == 0 {
                a * spec.even_gain
            } else {
                a
            }
        })
        .collect();

    let release_len = (spec.release_time * sr).round() as usize;
    let mut fundamental_phase = 0.0;
    let mut tone = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / sr;
        let inst_freq = if spec.fm_rate > 0.0 && spec.fm_depth > 0.0 {
            spec.carrier_freq * 2f64.powf(spec.fm_depth / 12.0 * (2.0 * PI * spec.fm_rate * t).sin())
        } else {
            spec.carrier_freq
        };
        let mut s = 0.0;
        for (p, (&a, &phi)) in amps.iter().zip(&phases).enumerate() {
            s += a * ((p + 1) as f64 * fundamental_phase + phi).sin();
        }
        fundamental_phase += 2.0 * PI * inst_freq / sr;
        if fundamental_phase > 2.0 * PI * 1e6 {
            fundamental_phase %= 2.0 * PI;
        }

        let attack = if spec.attack_time > 0.0 {
            1.0 - (-t / spec.attack_time).exp()
        } else {
            1.0
        };
        let from_end = n - 1 - i;
        let release = if from_end < release_len {
            0.5 - 0.5 * (PI * from_end as f64 / release_len as f64).cos()
        } else {
            1.0
        };
        let am = if spec.am_rate > 0.0 {
            1.0 + spec.am_depth * (2.0 * PI * spec.am_rate * t).sin()
        } else {
            1.0
        };
        tone.push(s * attack * release * am);
    }

    let tone_rms = (tone.iter().map(|x| x * x).sum::<f64>() / n as f64).sqrt();
    if spec.noise_level > 0.0 && tone_rms > 0.0 {
        let normal = Normal::new(0.0, spec.noise_level * tone_rms).expect("positive std");
        for x in tone.iter_mut() {
            *x += normal.sample(&mut rng);
        }
    }
    let peak = tone.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if peak > 0.0 {
        let scale = 0.9 * spec.gain / peak;
        tone.iter_mut().for_each(|x| *x *= scale);
    }

    let metadata = NoteMetadata::new(
        &spec.instrument,
        &spec.label,
        Pitch::nearest(spec.carrier_freq),
        spec.dynamics,
    );
    Ok((Waveform::new(tone, sample_rate)?, metadata))
}

/// One pseudo-instrument of the synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoInstrument {
    pub code: String,
    pub partial_rolloff: f64,
    pub even_gain: f64,
    pub attack_time: f64,
}

/// A technique class with ranges its modulation parameters are drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TechniqueClass {
    pub label: String,
    pub am_rate: (f64, f64),
    pub am_depth: (f64, f64),
    pub fm_rate: (f64, f64),
    pub fm_depth: (f64, f64),
}

impl TechniqueClass {
    fn fixed(label: &str) -> Self {
        TechniqueClass {
            label: label.into(),
            am_rate: (0.0, 0.0),
            am_depth: (0.0, 0.0),
            fm_rate: (0.0, 0.0),
            fm_depth: (0.0, 0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsProfile {
    pub dynamics: Dynamics,
    pub gain: f64,
    /// Added to the instrument's partial rolloff (softer notes are darker).
    pub extra_rolloff: f64,
}

/// Layout of the labeled synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthCorpusConfig {
    pub instruments: Vec<PseudoInstrument>,
    pub techniques: Vec<TechniqueClass>,
    /// MIDI note numbers.
    pub pitches: Vec<u8>,
    pub dynamics: Vec<DynamicsProfile>,
    pub duration: f64,
    pub n_partials: usize,
    pub noise_level: (f64, f64),
    pub release_time: f64,
    /// Recording level spread: each note is attenuated by a random 0 to this many dB.
    pub gain_jitter_db: f64,
}

impl Default for SynthCorpusConfig {
    /// 4 techniques x 2 instruments x 25 pitches x 2 dynamics = 400 one-second notes.
    fn default() -> Self {
        SynthCorpusConfig {
            instruments: vec![
                PseudoInstrument {
                    code: "SynA".into(),
                    partial_rolloff: 1.0,
                    even_gain: 1.0,
                    attack_time: 0.02,
                },
                PseudoInstrument {
                    code: "SynB".into(),
                    partial_rolloff: 1.4,
                    even_gain: 0.15,
                    attack_time: 0.06,
                },
            ],
            techniques: vec![
                TechniqueClass::fixed("ordinario"),
                TechniqueClass {
                    am_rate: (5.7, 6.5),
                    am_depth: (0.6, 0.9),
                    ..TechniqueClass::fixed("tremolo")
                },
                TechniqueClass {
                    fm_rate: (5.5, 6.5),
                    fm_depth: (0.3, 0.6),
                    ..TechniqueClass::fixed("vibrato")
                },
                TechniqueClass {
                    am_rate: (25.0, 35.0),
                    am_depth: (0.4, 0.8),
                    ..TechniqueClass::fixed("flutter")
                },
            ],
            pitches: (48..=72).collect(),
            dynamics: vec![
                DynamicsProfile {
                    dynamics: Dynamics::Mf,
                    gain: 0.5,
                    extra_rolloff: 0.5,
                },
                DynamicsProfile {
                    dynamics: Dynamics::Ff,
                    gain: 1.0,
                    extra_rolloff: 0.0,
                },
            ],
            duration: 1.0,
            n_partials: 10,
            noise_level: (0.005, 0.03),
            release_time: 0.03,
            gain_jitter_db: 12.0,
        }
    }
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Expands the corpus layout into per-note specs and seeds, in a fixed order
/// (technique, instrument, pitch, dynamics).
pub fn corpus_specs(cfg: &SynthCorpusConfig, seed: u64) -> Vec<(SynthSpec, u64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for tech in &cfg.techniques {
        for instr in &cfg.instruments {
            for &midi in &cfg.pitches {
                for dynp in &cfg.dynamics {
                    let spec = SynthSpec {
                        carrier_freq: Pitch { midi }.frequency(),
                        duration: cfg.duration,
                        am_rate: draw(&mut rng, tech.am_rate),
                        am_depth: draw(&mut rng, tech.am_depth),
                        fm_rate: draw(&mut rng, tech.fm_rate),
                        fm_depth: draw(&mut rng, tech.fm_depth),
                        n_partials: cfg.n_partials,
                        attack_time: instr.attack_time,
                        release_time: cfg.release_time,
                        noise_level: draw(&mut rng, cfg.noise_level),
                        partial_rolloff: instr.partial_rolloff + dynp.extra_rolloff,
                        even_gain: instr.even_gain,
                        gain: dynp.gain
                            * 10f64.powf(-draw(&mut rng, (0.0, cfg.gain_jitter_db)) / 20.0),
                        label: tech.label.clone(),
                        instrument: instr.code.clone(),
                        dynamics: dynp.dynamics,
                    };
                    out.push((spec, rng.random()));
                }
            }
        }
    }
    out
}

/// Synthesizes every note of the corpus layout, in parallel.
pub fn synth_corpus(
    cfg: &SynthCorpusConfig,
    sample_rate: u32,
    seed: u64,
) -> Result<Vec<(Waveform, NoteMetadata)>> {
    corpus_specs(cfg, seed)
        .par_iter()
        .map(|(spec, note_seed)| synth_note(spec, sample_rate, *note_seed))
        .collect()
}
