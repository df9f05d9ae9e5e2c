//! Feature families behind one extraction interface, each tagged with a
//! descriptor so archives, metrics and indexes can refuse to mix them.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baseline::{mfcc, summarize_mean, summarize_poly, MfccConfig};
use crate::error::{Error, Result};
use crate::scattering::{
    log_compress, CompressionStats, Scatterer, ScatteringConfig, ScatteringPath, ScatteringVector,
};
use crate::signal::{to_canonical, Waveform};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureFamily {
    MfccMean,
    MfccPoly,
    Scattering,
}

impl FeatureFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureFamily::MfccMean => "mfcc-mean",
            FeatureFamily::MfccPoly => "mfcc-poly",
            FeatureFamily::Scattering => "scattering",
        }
    }
}

impl fmt::Display for FeatureFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Feature family plus a hash of everything that shaped the values.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureDescriptor {
    pub family: FeatureFamily,
    pub config_hash: String,
}

impl FeatureDescriptor {
    /// Descriptor of the same features after log compression with `stats`.
    pub fn compressed(&self, stats: &CompressionStats) -> Self {
        let stats_json = serde_json::to_string(stats).expect("stats serialize");
        FeatureDescriptor {
            family: self.family,
            config_hash: hash_text(&format!("{}|{stats_json}", self.config_hash)),
        }
    }

    pub fn ensure_matches(&self, other: &FeatureDescriptor) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::DescriptorMismatch {
                expected: self.to_string(),
                got: other.to_string(),
            })
        }
    }
}

impl fmt::Display for FeatureDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.family, &self.config_hash[..12.min(self.config_hash.len())])
    }
}

fn hash_text(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub descriptor: FeatureDescriptor,
}

impl FeatureVector {
    pub fn new(values: Vec<f64>, descriptor: FeatureDescriptor) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidWaveform(format!(
                "feature value {i} is not finite"
            )));
        }
        Ok(FeatureVector { values, descriptor })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// What to extract from a waveform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum FeatureSpec {
    MfccMean { config: MfccConfig },
    MfccPoly { config: MfccConfig, max_degree: usize },
    Scattering { config: ScatteringConfig },
}

impl FeatureSpec {
    /// Time-averaged MFCCs with `n_coeffs` coefficients.
    pub fn mfcc(n_coeffs: usize) -> Self {
        FeatureSpec::MfccMean {
            config: MfccConfig::with_coeffs(n_coeffs),
        }
    }

    /// Degree-3 polynomial summary of 13 MFCC trajectories.
    pub fn mfcc_poly() -> Self {
        FeatureSpec::MfccPoly {
            config: MfccConfig::default(),
            max_degree: 3,
        }
    }

    pub fn scattering(averaging_scale: f64) -> Self {
        FeatureSpec::Scattering {
            config: ScatteringConfig::with_scale(averaging_scale),
        }
    }

    pub fn family(&self) -> FeatureFamily {
        match self {
            FeatureSpec::MfccMean { .. } => FeatureFamily::MfccMean,
            FeatureSpec::MfccPoly { .. } => FeatureFamily::MfccPoly,
            FeatureSpec::Scattering { .. } => FeatureFamily::Scattering,
        }
    }

    pub fn descriptor(&self) -> FeatureDescriptor {
        let json = serde_json::to_string(self).expect("spec serializes");
        FeatureDescriptor {
            family: self.family(),
            config_hash: hash_text(&json),
        }
    }

    pub fn averaging_scale(&self) -> Option<f64> {
        match self {
            FeatureSpec::Scattering { config } => Some(config.averaging_scale),
            _ => None,
        }
    }

    /// Short human-readable name, e.g. `mfcc13`, `mfcc-poly3`, `scattering(T=1s)`.
    pub fn name(&self) -> String {
        match self {
            FeatureSpec::MfccMean { config } => format!("mfcc{}", config.n_coeffs),
            FeatureSpec::MfccPoly { max_degree, .. } => format!("mfcc-poly{max_degree}"),
            FeatureSpec::Scattering { config } => format!("scattering(T={}s)", config.averaging_scale),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            FeatureSpec::MfccMean { config } => config.validate(),
            FeatureSpec::MfccPoly { config, max_degree } => {
                config.validate()?;
                if !(2..=3).contains(max_degree) {
                    return Err(Error::InvalidConfig(format!(
                        "max_degree must be 2 or 3, got {max_degree}"
                    )));
                }
                Ok(())
            }
            FeatureSpec::Scattering { config } => config.validate(),
        }
    }
}

/// A spec with its expensive state (filterbanks) built once.
#[derive(Debug, Clone)]
pub struct Extractor {
    spec: FeatureSpec,
    descriptor: FeatureDescriptor,
    scatterer: Option<Scatterer>,
}

impl Extractor {
    pub fn new(spec: FeatureSpec) -> Result<Self> {
        spec.validate()?;
        let scatterer = match &spec {
            FeatureSpec::Scattering { config } => Some(Scatterer::new(config.clone())?),
            _ => None,
        };
        Ok(Extractor {
            descriptor: spec.descriptor(),
            spec,
            scatterer,
        })
    }

    pub fn spec(&self) -> &FeatureSpec {
        &self.spec
    }

    pub fn descriptor(&self) -> &FeatureDescriptor {
        &self.descriptor
    }

    /// Scattering paths, one per output value; `None` for MFCC families.
    pub fn paths(&self) -> Option<&[ScatteringPath]> {
        self.scatterer.as_ref().map(|s| s.paths())
    }

    /// Resamples to the canonical rate and extracts uncompressed features.
    pub fn extract(&self, w: &Waveform) -> Result<FeatureVector> {
        let w = to_canonical(w)?;
        let values = match (&self.spec, &self.scatterer) {
            (FeatureSpec::MfccMean { config }, _) => summarize_mean(&mfcc(&w, config)?)?,
            (FeatureSpec::MfccPoly { config, max_degree }, _) => {
                summarize_poly(&mfcc(&w, config)?, *max_degree)?
            }
            (FeatureSpec::Scattering { .. }, Some(s)) => s.scatter(&w)?.values,
            (FeatureSpec::Scattering { .. }, None) => unreachable!("scatterer built in new"),
        };
        FeatureVector::new(values, self.descriptor.clone())
    }

    pub fn extract_batch(&self, waves: &[Waveform]) -> Result<Vec<FeatureVector>> {
        waves.par_iter().map(|w| self.extract(w)).collect()
    }

    /// Wraps raw scattering values back into a vector with paths, for compression.
    pub fn as_scattering(&self, v: &FeatureVector) -> Result<ScatteringVector> {
        let s = self.scatterer.as_ref().ok_or_else(|| {
            Error::InvalidConfig(format!("{} features carry no scattering paths", self.spec.family()))
        })?;
        self.descriptor.ensure_matches(&v.descriptor)?;
        if v.len() != s.paths().len() {
            return Err(Error::DimensionMismatch {
                expected: s.paths().len(),
                got: v.len(),
            });
        }
        Ok(ScatteringVector {
            values: v.values.clone(),
            paths: s.paths().to_vec(),
            averaging_scale: s.config().averaging_scale,
        })
    }

    /// Extraction followed by log compression with frozen corpus statistics.
    pub fn extract_compressed(&self, w: &Waveform, stats: &CompressionStats) -> Result<FeatureVector> {
        let raw = self.extract(w)?;
        compress_vector(self, &raw, stats)
    }
}

/// Applies log compression to one raw scattering feature vector.
pub fn compress_vector(
    extractor: &Extractor,
    raw: &FeatureVector,
    stats: &CompressionStats,
) -> Result<FeatureVector> {
    let compressed = log_compress(&extractor.as_scattering(raw)?, stats)?;
    FeatureVector::new(compressed.values, raw.descriptor.compressed(stats))
}

impl FromStr for FeatureSpec {
    type Err = Error;

    /// Accepts `mfcc13`, `mfcc40`, `mfcc-poly` and `scattering` (T = 1 s).
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mfcc-poly" | "mfcc-poly3" => Ok(FeatureSpec::mfcc_poly()),
            "mfcc-poly2" => Ok(FeatureSpec::MfccPoly {
                config: MfccConfig::default(),
                max_degree: 2,
            }),
            "scattering" => Ok(FeatureSpec::scattering(1.0)),
            "mfcc" => Ok(FeatureSpec::mfcc(13)),
            other => other
                .strip_prefix("mfcc")
                .and_then(|n| n.parse::<usize>().ok())
                .map(FeatureSpec::mfcc)
                .ok_or_else(|| Error::InvalidConfig(format!("unknown feature family {other:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scattering::fit_compression;
    use crate::signal::{synth_note, SynthSpec, CANONICAL_RATE};

    #[test]
    fn descriptors_separate_families_and_configs() {
        let a = FeatureSpec::mfcc(13).descriptor();
        let b = FeatureSpec::mfcc(40).descriptor();
        let c = FeatureSpec::scattering(1.0).descriptor();
        let d = FeatureSpec::scattering(0.5).descriptor();
        assert_ne!(a, b);
        assert_ne!(c, d);
        assert_eq!(a, FeatureSpec::mfcc(13).descriptor());
        assert_eq!(a.config_hash.len(), 64);
        assert!(a.ensure_matches(&b).is_err());
    }

    #[test]
    fn parse_family_names() {
        assert_eq!("mfcc13".parse::<FeatureSpec>().unwrap(), FeatureSpec::mfcc(13));
        assert_eq!("mfcc40".parse::<FeatureSpec>().unwrap(), FeatureSpec::mfcc(40));
        assert_eq!("mfcc-poly".parse::<FeatureSpec>().unwrap().family(), FeatureFamily::MfccPoly);
        assert!("wavelets".parse::<FeatureSpec>().is_err());
    }

    #[test]
    fn dimensions_per_family() {
        let (w, _) = synth_note(&SynthSpec::plain(220.0, 0.3), 44_100, 1).unwrap();
        let m = Extractor::new(FeatureSpec::mfcc(13)).unwrap().extract(&w).unwrap();
        assert_eq!(m.len(), 13);
        let p = Extractor::new(FeatureSpec::mfcc_poly()).unwrap().extract(&w).unwrap();
        assert_eq!(p.len(), 559);
        let ex = Extractor::new(FeatureSpec::scattering(0.1)).unwrap();
        let s = ex.extract(&w).unwrap();
        assert_eq!(s.len(), ex.paths().unwrap().len());
    }

    #[test]
    fn compression_changes_descriptor() {
        let (w, _) = synth_note(&SynthSpec::plain(330.0, 0.3), CANONICAL_RATE, 2).unwrap();
        let ex = Extractor::new(FeatureSpec::scattering(0.1)).unwrap();
        let raw = ex.extract(&w).unwrap();
        let stats = fit_compression(&[ex.as_scattering(&raw).unwrap()], 1e-3).unwrap();
        let c = ex.extract_compressed(&w, &stats).unwrap();
        assert_ne!(c.descriptor, raw.descriptor);
        assert_eq!(c.descriptor, raw.descriptor.compressed(&stats));
        assert!(c.values.iter().all(|v| v.is_finite() && *v >= 0.0));
        let mfcc = Extractor::new(FeatureSpec::mfcc(13)).unwrap();
        assert!(mfcc.as_scattering(&mfcc.extract(&w).unwrap()).is_err());
    }

    #[test]
    fn compressed_descriptor_survives_json_roundtrip() {
        let (w, _) = synth_note(&SynthSpec::plain(330.0, 0.3), CANONICAL_RATE, 3).unwrap();
        let ex = Extractor::new(FeatureSpec::scattering(0.1)).unwrap();
        let mut stats = fit_compression(&[ex.as_scattering(&ex.extract(&w).unwrap()).unwrap()], 1e-3).unwrap();
        // values whose shortest decimal form is hard to parse back exactly
        stats.medians[0] = 0.1 + 0.2;
        stats.medians[1] = 2.225_073_858_507_201e-308;
        stats.medians[2] = 9.007_199_254_740_993e15;
        let back: CompressionStats = serde_json::from_str(&serde_json::to_string(&stats).unwrap()).unwrap();
        assert!(back.medians.iter().zip(&stats.medians).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(ex.descriptor().compressed(&back), ex.descriptor().compressed(&stats));
    }
}
