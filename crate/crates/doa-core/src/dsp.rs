//! Short-time Fourier analysis and synthesis for multichannel audio.
//!
//! Analysis applies a periodic Hann window per frame. Synthesis is
//! weighted overlap-add with per-sample normalization by the accumulated
//! squared window; the default 8192/960 window/hop ratio is not
//! constant-overlap-add, so the normalization is what makes the round
//! trip exact wherever the window sum has support.

use ndarray::{Array2, Array3, ArrayView2};
use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::{Error, Result};

/// Tapering window applied to each analysis frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowKind {
    /// Periodic Hann, `0.5 - 0.5*cos(2*pi*n/N)` for `n` in `0..N`.
    Hann,
}

/// Framing parameters shared by every transform in the pipeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StftConfig {
    pub sample_rate: u32,
    pub window_len: usize,
    pub hop: usize,
    pub window: WindowKind,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            sample_rate: 48_000,
            window_len: 8192,
            hop: 960,
            window: WindowKind::Hann,
        }
    }
}

impl StftConfig {
    /// Number of one-sided frequency bins, `window_len/2 + 1`.
    pub fn n_bins(&self) -> usize {
        self.window_len / 2 + 1
    }

    /// Number of complete analysis frames for a signal of `len` samples:
    /// `1 + floor((len - window_len)/hop)`. Frame `t` covers samples
    /// `[t*hop, t*hop + window_len)`.
    pub fn n_frames(&self, len: usize) -> Result<usize> {
        self.validate()?;
        if len < self.window_len {
            return Err(Error::SignalTooShort {
                len,
                window_len: self.window_len,
            });
        }
        Ok(1 + (len - self.window_len) / self.hop)
    }

    /// Center time of frame `t`, in seconds.
    pub fn frame_center(&self, t: usize) -> f64 {
        (t * self.hop + self.window_len / 2) as f64 / self.sample_rate as f64
    }

    /// Center frequency of bin `f`, in Hz.
    pub fn bin_hz(&self, f: usize) -> f64 {
        f as f64 * self.sample_rate as f64 / self.window_len as f64
    }

    /// Window coefficients, length `window_len`.
    pub fn window_coeffs(&self) -> Vec<f64> {
        let n = self.window_len;
        match self.window {
            WindowKind::Hann => (0..n)
                .map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / n as f64).cos())
                .collect(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.hop > self.window_len {
            return Err(Error::BadHop {
                hop: self.hop,
                window_len: self.window_len,
            });
        }
        Ok(())
    }
}

/// Multichannel complex spectrogram, shape (channels, bins, frames).
#[derive(Debug, Clone)]
pub struct MultiSpec {
    pub data: Array3<Complex64>,
    pub config: StftConfig,
}

impl MultiSpec {
    pub fn n_channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn n_bins(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn n_frames(&self) -> usize {
        self.data.shape()[2]
    }

    /// One channel as a (bins, frames) view.
    pub fn channel(&self, c: usize) -> ArrayView2<'_, Complex64> {
        self.data.index_axis(ndarray::Axis(0), c)
    }
}

/// Short-time Fourier transform of a (channels, samples) signal.
///
/// All channels share one length by construction of the input array, so
/// ragged input is unrepresentable. The signal must be at least one
/// window long.
pub fn stft(signal: &Array2<f64>, config: &StftConfig) -> Result<MultiSpec> {
    let n = config.window_len;
    let len = signal.ncols();
    let n_frames = config.n_frames(len)?;
    let n_bins = config.n_bins();
    let win = config.window_coeffs();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let mut data = Array3::zeros((signal.nrows(), n_bins, n_frames));
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for c in 0..signal.nrows() {
        let ch = signal.row(c);
        for t in 0..n_frames {
            let start = t * config.hop;
            for i in 0..n {
                buf[i] = Complex64::new(ch[start + i] * win[i], 0.0);
            }
            fft.process(&mut buf);
            for f in 0..n_bins {
                data[(c, f, t)] = buf[f];
            }
        }
    }
    Ok(MultiSpec {
        data,
        config: *config,
    })
}

/// Inverse transform by weighted overlap-add.
///
/// `config` must equal the configuration the spectrogram was produced
/// with. Output length is `(frames - 1)*hop + window_len`; samples where
/// the accumulated squared window is (numerically) zero come out as 0.
pub fn istft(spec: &MultiSpec, config: &StftConfig) -> Result<Array2<f64>> {
    if *config != spec.config || spec.n_bins() != config.n_bins() {
        return Err(Error::ConfigMismatch);
    }
    let n = config.window_len;
    let n_bins = spec.n_bins();
    let n_frames = spec.n_frames();
    let channels = spec.n_channels();
    if n_frames == 0 {
        return Ok(Array2::zeros((channels, 0)));
    }
    let out_len = (n_frames - 1) * config.hop + n;
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n);
    let win = config.window_coeffs();

    let mut wsum = vec![0.0f64; out_len];
    for t in 0..n_frames {
        let start = t * config.hop;
        for i in 0..n {
            wsum[start + i] += win[i] * win[i];
        }
    }
    let floor = 1e-12 * wsum.iter().cloned().fold(0.0, f64::max);

    let mut out = Array2::zeros((channels, out_len));
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let scale = 1.0 / n as f64;
    for c in 0..channels {
        for t in 0..n_frames {
            for f in 0..n_bins {
                buf[f] = spec.data[(c, f, t)];
            }
            for f in n_bins..n {
                buf[f] = spec.data[(c, n - f, t)].conj();
            }
            ifft.process(&mut buf);
            let start = t * config.hop;
            for i in 0..n {
                out[(c, start + i)] += buf[i].re * scale * win[i];
            }
        }
    }
    for c in 0..channels {
        for i in 0..out_len {
            if wsum[i] > floor {
                out[(c, i)] /= wsum[i];
            } else {
                out[(c, i)] = 0.0;
            }
        }
    }
    Ok(out)
}
