//! Acoustic intensity vectors and the mask/epsilon refinement that
//! turns them into per-frame direction estimates.
//!
//! The per-bin intensity vector of a B-format spectrum points at the
//! dominant source in that bin. Direction estimates come from summing
//! bin intensities over frequency, after three refinements: a noise
//! mask downweights quiet bins, an epsilon field is subtracted to
//! remove slowly varying bias (reverberation, diffuse noise), and a
//! separation mask splits the bins between two simultaneous sources.

use ndarray::{Array2, Array3};
use num_complex::Complex64;

use crate::dsp::{MultiSpec, StftConfig};
use crate::geom::wrap_angle;
use crate::{Error, Result};

/// Norm floor used when normalizing intensity vectors.
pub const IV_NORM_EPS: f64 = 1e-12;

/// Power floor inside the log in [`log_power_mask`].
pub const LOG_POWER_FLOOR: f64 = 1e-12;

/// Logistic squashing function.
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-bin 3-component intensity field, shape (bins, frames, 3).
#[derive(Debug, Clone, PartialEq)]
pub struct IvField {
    pub values: Array3<f64>,
    pub config: StftConfig,
}

impl IvField {
    pub fn n_bins(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn n_frames(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn at(&self, bin: usize, frame: usize) -> [f64; 3] {
        [
            self.values[(bin, frame, 0)],
            self.values[(bin, frame, 1)],
            self.values[(bin, frame, 2)],
        ]
    }

    /// Elementwise difference, used to form epsilon-corrected fields.
    pub fn minus(&self, other: &IvField) -> Result<IvField> {
        if self.values.dim() != other.values.dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", self.values.dim()),
                got: format!("{:?}", other.values.dim()),
            });
        }
        Ok(IvField {
            values: &self.values - &other.values,
            config: self.config,
        })
    }
}

/// Per-bin gain in [0, 1], shape (bins, frames). The range invariant is
/// enforced at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct TfMask {
    values: Array2<f64>,
}

impl TfMask {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if !values.iter().all(|&v| (0.0..=1.0).contains(&v)) {
            return Err(Error::ShapeMismatch {
                expected: "mask values in [0, 1]".into(),
                got: "value outside [0, 1]".into(),
            });
        }
        Ok(Self { values })
    }

    pub fn ones(n_bins: usize, n_frames: usize) -> Self {
        Self { values: Array2::ones((n_bins, n_frames)) }
    }

    pub fn zeros(n_bins: usize, n_frames: usize) -> Self {
        Self { values: Array2::zeros((n_bins, n_frames)) }
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// One minus this mask.
    pub fn complement(&self) -> Self {
        Self { values: self.values.mapv(|v| 1.0 - v) }
    }

    /// Overwrite every bin of one frame with a constant in [0, 1].
    pub fn fill_frame(&mut self, frame: usize, value: f64) {
        assert!((0.0..=1.0).contains(&value));
        self.values.column_mut(frame).fill(value);
    }
}

/// One direction estimate. `degenerate` marks frames whose summed
/// intensity had no horizontal component, leaving the azimuth undefined;
/// such estimates are reported as azimuth 0 and excluded from metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoaEstimate {
    /// Radians in [-pi, pi).
    pub azimuth: f64,
    /// Radians in [-pi/2, pi/2].
    pub elevation: f64,
    pub degenerate: bool,
}

/// One frame of output: the number of active sources and that many
/// direction estimates, track 1 first.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameDoa {
    pub noas: u8,
    pub doas: Vec<DoaEstimate>,
}

/// Per-frame direction estimates for a whole recording.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DoaTrack {
    pub frames: Vec<FrameDoa>,
}

impl DoaTrack {
    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn noas_vec(&self) -> Vec<u8> {
        self.frames.iter().map(|f| f.noas).collect()
    }
}

/// Per-frame refined intensity sums for the two source tracks, each of
/// shape (frames, 3).
#[derive(Debug, Clone)]
pub struct FrameIv {
    pub tracks: [Array2<f64>; 2],
}

impl FrameIv {
    pub fn n_frames(&self) -> usize {
        self.tracks[0].nrows()
    }

    pub fn track(&self, idx: usize, frame: usize) -> [f64; 3] {
        [
            self.tracks[idx][(frame, 0)],
            self.tracks[idx][(frame, 1)],
            self.tracks[idx][(frame, 2)],
        ]
    }
}

/// Per-bin intensity vectors I = Re(conj(W) * [X, Y, Z]).
pub fn intensity_vectors(spec: &MultiSpec) -> Result<IvField> {
    if spec.n_channels() != 4 {
        return Err(Error::ChannelCount { got: spec.n_channels() });
    }
    let (bins, frames) = (spec.n_bins(), spec.n_frames());
    let mut values = Array3::zeros((bins, frames, 3));
    let w = spec.channel(0);
    for (axis, c) in [(0usize, 1usize), (1, 2), (2, 3)] {
        let ch = spec.channel(c);
        for f in 0..bins {
            for t in 0..frames {
                let wv = w[(f, t)];
                let xv = ch[(f, t)];
                values[(f, t, axis)] = wv.re * xv.re + wv.im * xv.im;
            }
        }
    }
    Ok(IvField { values, config: spec.config })
}

/// Scale every bin vector to unit norm; vectors with norm below `eps`
/// are divided by `eps` instead, so zero stays zero.
pub fn normalize_iv(field: &IvField, eps: f64) -> IvField {
    let mut values = field.values.clone();
    for f in 0..field.n_bins() {
        for t in 0..field.n_frames() {
            let v = field.at(f, t);
            let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(eps);
            for a in 0..3 {
                values[(f, t, a)] /= norm;
            }
        }
    }
    IvField { values, config: field.config }
}

/// Smooth loudness gate: sigmoid(sharpness * (log_power - threshold)),
/// where log_power = ln(|W|^2 + (|X|^2 + |Y|^2 + |Z|^2)/3 + floor).
pub fn log_power_mask(spec: &MultiSpec, sharpness: f64, threshold: f64) -> Result<TfMask> {
    if spec.n_channels() != 4 {
        return Err(Error::ChannelCount { got: spec.n_channels() });
    }
    let mut values = Array2::zeros((spec.n_bins(), spec.n_frames()));
    for f in 0..spec.n_bins() {
        for t in 0..spec.n_frames() {
            values[(f, t)] = sigmoid(sharpness * (bin_log_power(spec, f, t) - threshold));
        }
    }
    TfMask::new(values)
}

fn bin_log_power(spec: &MultiSpec, f: usize, t: usize) -> f64 {
    let p = |c: usize| -> f64 {
        let z: Complex64 = spec.data[(c, f, t)];
        z.norm_sqr()
    };
    (p(0) + (p(1) + p(2) + p(3)) / 3.0 + LOG_POWER_FLOOR).ln()
}

/// Median per-bin log power of the spectrum; the default threshold for
/// [`log_power_mask`]. Even counts average the two central values.
pub fn median_log_power(spec: &MultiSpec) -> Result<f64> {
    if spec.n_channels() != 4 {
        return Err(Error::ChannelCount { got: spec.n_channels() });
    }
    let mut all: Vec<f64> = Vec::with_capacity(spec.n_bins() * spec.n_frames());
    for f in 0..spec.n_bins() {
        for t in 0..spec.n_frames() {
            all.push(bin_log_power(spec, f, t));
        }
    }
    if all.is_empty() {
        return Err(Error::EmptySelection);
    }
    all.sort_by(f64::total_cmp);
    let n = all.len();
    Ok(if n % 2 == 1 { all[n / 2] } else { (all[n / 2 - 1] + all[n / 2]) / 2.0 })
}

/// Reference azimuth of one frame: the azimuth of the frequency-summed
/// normalized intensity field. Returns (0, true) when the horizontal
/// sum vanishes.
pub fn reference_azimuth(normalized: &IvField, frame: usize) -> (f64, bool) {
    let mut sx = 0.0;
    let mut sy = 0.0;
    for f in 0..normalized.n_bins() {
        let v = normalized.at(f, frame);
        sx += v[0];
        sy += v[1];
    }
    if sx == 0.0 && sy == 0.0 {
        (0.0, true)
    } else {
        (sy.atan2(sx), false)
    }
}

/// Reference azimuths for all frames; degenerate frames get 0.
pub fn reference_azimuths(normalized: &IvField) -> Vec<f64> {
    (0..normalized.n_frames()).map(|t| reference_azimuth(normalized, t).0).collect()
}

/// Split bins by which side of the per-frame reference azimuth their
/// horizontal intensity lies on: rotate [Ix, Iy] by minus the reference
/// azimuth and squash the resulting angle, so bins counterclockwise of
/// the reference approach 1 and clockwise bins approach 0.
pub fn angle_mask(field: &IvField, reference: &[f64]) -> Result<TfMask> {
    if reference.len() != field.n_frames() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} reference azimuths", field.n_frames()),
            got: format!("{}", reference.len()),
        });
    }
    let mut values = Array2::zeros((field.n_bins(), field.n_frames()));
    for t in 0..field.n_frames() {
        let (cos_r, sin_r) = (reference[t].cos(), reference[t].sin());
        for f in 0..field.n_bins() {
            let v = field.at(f, t);
            let x = cos_r * v[0] + sin_r * v[1];
            let y = -sin_r * v[0] + cos_r * v[1];
            values[(f, t)] = sigmoid(y.atan2(x));
        }
    }
    TfMask::new(values)
}

/// Refined per-frame intensity sums. Track 1 collects mask-weighted
/// bins, track 2 the complement; both are gated by one minus the noise
/// mask, and the epsilon field (if any) is subtracted per bin first:
/// track1_t = sum_f m_s1 (1 - m_n) (I - eps),
/// track2_t = sum_f (1 - m_s1) (1 - m_n) (I - eps).
pub fn refine_and_sum(
    field: &IvField,
    m_s1: &TfMask,
    m_n: &TfMask,
    eps: Option<&IvField>,
) -> Result<FrameIv> {
    let dim = (field.n_bins(), field.n_frames());
    if m_s1.dim() != dim || m_n.dim() != dim {
        return Err(Error::ShapeMismatch {
            expected: format!("masks of shape {dim:?}"),
            got: format!("{:?} and {:?}", m_s1.dim(), m_n.dim()),
        });
    }
    if let Some(e) = eps {
        if e.values.dim() != field.values.dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("epsilon of shape {:?}", field.values.dim()),
                got: format!("{:?}", e.values.dim()),
            });
        }
    }
    let (bins, frames) = dim;
    let mut track1 = Array2::zeros((frames, 3));
    let mut track2 = Array2::zeros((frames, 3));
    for t in 0..frames {
        for f in 0..bins {
            let keep = 1.0 - m_n.values()[(f, t)];
            let m1 = m_s1.values()[(f, t)];
            let v = field.at(f, t);
            let e = eps.map_or([0.0; 3], |e| e.at(f, t));
            for a in 0..3 {
                let corrected = v[a] - e[a];
                track1[(t, a)] += m1 * keep * corrected;
                track2[(t, a)] += (1.0 - m1) * keep * corrected;
            }
        }
    }
    Ok(FrameIv { tracks: [track1, track2] })
}

/// Direction of a summed intensity vector: azimuth from the horizontal
/// components, elevation from the vertical against the horizontal norm.
pub fn iv_to_doa(v: [f64; 3]) -> DoaEstimate {
    let h = v[0].hypot(v[1]);
    let degenerate = v[0] == 0.0 && v[1] == 0.0;
    let azimuth = if degenerate { 0.0 } else { wrap_angle(v[1].atan2(v[0])) };
    let elevation = if degenerate && v[2] == 0.0 { 0.0 } else { v[2].atan2(h) };
    DoaEstimate { azimuth, elevation, degenerate }
}

/// Produces the separation mask, noise mask, and epsilon field consumed
/// by the refinement sum.
pub trait Refiner {
    fn refine(&self, spec: &MultiSpec, iv: &IvField) -> Result<RefinerOutput>;
}

/// What a [`Refiner`] hands to [`refine_and_sum`].
pub struct RefinerOutput {
    pub m_s1: TfMask,
    pub m_n: TfMask,
    pub eps: Option<IvField>,
}

/// Pass-through: keep every bin, split nothing, subtract nothing.
pub struct IdentityRefiner;

impl Refiner for IdentityRefiner {
    fn refine(&self, spec: &MultiSpec, _iv: &IvField) -> Result<RefinerOutput> {
        Ok(RefinerOutput {
            m_s1: TfMask::ones(spec.n_bins(), spec.n_frames()),
            m_n: TfMask::zeros(spec.n_bins(), spec.n_frames()),
            eps: None,
        })
    }
}

/// Keeps loud bins: the noise mask is one minus a sigmoid gate on log
/// power. `threshold: None` uses the median log power of the recording.
pub struct LogPowerRefiner {
    pub sharpness: f64,
    pub threshold: Option<f64>,
}

impl Default for LogPowerRefiner {
    fn default() -> Self {
        Self { sharpness: 1.0, threshold: None }
    }
}

impl Refiner for LogPowerRefiner {
    fn refine(&self, spec: &MultiSpec, _iv: &IvField) -> Result<RefinerOutput> {
        let threshold = match self.threshold {
            Some(t) => t,
            None => median_log_power(spec)?,
        };
        let keep = log_power_mask(spec, self.sharpness, threshold)?;
        Ok(RefinerOutput {
            m_s1: TfMask::ones(spec.n_bins(), spec.n_frames()),
            m_n: keep.complement(),
            eps: None,
        })
    }
}

/// Log-power denoising plus the reference-azimuth angle mask for
/// separating two simultaneous sources.
pub struct AngleRefiner {
    pub sharpness: f64,
    pub threshold: Option<f64>,
}

impl Default for AngleRefiner {
    fn default() -> Self {
        Self { sharpness: 1.0, threshold: None }
    }
}

impl Refiner for AngleRefiner {
    fn refine(&self, spec: &MultiSpec, iv: &IvField) -> Result<RefinerOutput> {
        let threshold = match self.threshold {
            Some(t) => t,
            None => median_log_power(spec)?,
        };
        let keep = log_power_mask(spec, self.sharpness, threshold)?;
        let normalized = normalize_iv(iv, IV_NORM_EPS);
        let refs = reference_azimuths(&normalized);
        Ok(RefinerOutput {
            m_s1: angle_mask(iv, &refs)?,
            m_n: keep.complement(),
            eps: None,
        })
    }
}

/// End-to-end direction estimation: compute intensity vectors, run the
/// refiner, and sum. Frames with one active source keep every bin on
/// track 1 (the separation mask is overridden to one); frames with two
/// report both tracks; inactive frames report nothing.
pub fn estimate_track(spec: &MultiSpec, refiner: &dyn Refiner, noas: &[u8]) -> Result<DoaTrack> {
    if noas.len() != spec.n_frames() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} frame counts", spec.n_frames()),
            got: format!("{}", noas.len()),
        });
    }
    if let Some(&bad) = noas.iter().find(|&&n| n > 2) {
        return Err(Error::TooManySources { n: bad as usize });
    }
    let iv = intensity_vectors(spec)?;
    let out = refiner.refine(spec, &iv)?;
    let mut m_s1 = out.m_s1;
    for (t, &n) in noas.iter().enumerate() {
        if n == 1 {
            m_s1.fill_frame(t, 1.0);
        }
    }
    let frame_iv = refine_and_sum(&iv, &m_s1, &out.m_n, out.eps.as_ref())?;
    let frames = (0..spec.n_frames())
        .map(|t| {
            let doas = match noas[t] {
                0 => vec![],
                1 => vec![iv_to_doa(frame_iv.track(0, t))],
                _ => vec![iv_to_doa(frame_iv.track(0, t)), iv_to_doa(frame_iv.track(1, t))],
            };
            FrameDoa { noas: noas[t], doas }
        })
        .collect();
    Ok(DoaTrack { frames })
}
