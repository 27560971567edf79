//! Mel filterbank compression of spectral features.
//!
//! Triangular filters with centers uniformly spaced on the mel scale
//! (2595*log10(1 + f/700)) between 0 Hz and Nyquist, unit peak gain.
//! The bank compresses power spectra into logmel features and the three
//! intensity-vector components into mel-resolution maps.

use ndarray::{Array2, ArrayView2};
use num_complex::Complex64;

use crate::dsp::StftConfig;
use crate::{Error, Result};

/// Default additive floor inside the logmel logarithm.
pub const LOGMEL_FLOOR: f64 = 1e-10;

/// Triangular mel filterbank, weights of shape (n_mels, n_bins).
#[derive(Debug, Clone)]
pub struct MelBank {
    pub weights: Array2<f64>,
}

impl MelBank {
    pub fn n_mels(&self) -> usize {
        self.weights.nrows()
    }

    pub fn n_bins(&self) -> usize {
        self.weights.ncols()
    }

    /// Band whose filter weights the bin most strongly (first on ties).
    /// Bins that no filter covers (only the DC bin, in practice) map to
    /// band 0.
    pub fn dominant_band(&self, bin: usize) -> usize {
        let mut best = 0;
        let mut best_w = 0.0;
        for m in 0..self.n_mels() {
            let w = self.weights[(m, bin)];
            if w > best_w {
                best_w = w;
                best = m;
            }
        }
        best
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Build the triangular filterbank for the given transform configuration.
///
/// `n_mels` must be at least 1 and smaller than the number of bins.
pub fn mel_bank(config: &StftConfig, n_mels: usize) -> Result<MelBank> {
    let n_bins = config.n_bins();
    if n_mels < 1 || n_mels >= n_bins {
        return Err(Error::MelOutOfRange { n_mels, n_bins });
    }
    let nyquist = config.sample_rate as f64 / 2.0;
    let mel_max = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|k| mel_to_hz(k as f64 * mel_max / (n_mels + 1) as f64))
        .collect();
    let mut weights = Array2::zeros((n_mels, n_bins));
    for m in 0..n_mels {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        for bin in 0..n_bins {
            let f = config.bin_hz(bin);
            let w = if f > left && f <= center {
                (f - left) / (center - left)
            } else if f > center && f < right {
                (right - f) / (right - center)
            } else {
                0.0
            };
            weights[(m, bin)] = w;
        }
    }
    Ok(MelBank { weights })
}

/// Compress a (bins, frames) field to (n_mels, frames):
/// `out[m, t] = sum_f weights[m, f] * field[f, t]`.
pub fn apply_mel(bank: &MelBank, field: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if field.nrows() != bank.n_bins() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} rows", bank.n_bins()),
            got: format!("{} rows", field.nrows()),
        });
    }
    Ok(bank.weights.dot(&field))
}

/// Logmel features of one spectrogram channel: natural log of
/// mel-compressed power, `ln(apply_mel(|spec|^2) + floor)`.
pub fn logmel(channel: ArrayView2<'_, Complex64>, bank: &MelBank, floor: f64) -> Result<Array2<f64>> {
    assert!(floor > 0.0, "logmel floor must be positive");
    let power = channel.mapv(|z| z.norm_sqr());
    let compressed = apply_mel(bank, power.view())?;
    Ok(compressed.mapv(|v| (v + floor).ln()))
}
