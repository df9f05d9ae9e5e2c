//! Constant-Q wavelet scalogram, time scattering up to order two, and the
//! corpus-adaptive log compression of scattering coefficients.
//!
//! Order one is the scalogram row `|x * psi_lambda1|` averaged over the whole
//! recording after low-pass filtering at scale T. Order two convolves each
//! scalogram row with modulation wavelets `psi_lambda2` (one per octave) and
//! averages the modulus, keeping only `1/T <= lambda2 < lambda1 / 2`.

mod compression;
mod filterbank;
mod transform;

pub use compression::{fit_compression, log_compress, CompressionStats, DEFAULT_EPSILON};
pub use filterbank::{build_filterbank, Filterbank, FilterbankConfig, LowPass, MorletFilter};
pub use transform::{
    scalogram, scatter, scattering_paths, Scalogram, Scatterer, ScatteringConfig,
    ScatteringPath, ScatteringVector,
};
