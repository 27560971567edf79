//! MUSIC baseline on the 4-channel B-format spectrum.
//!
//! The four channels act as a sensor array whose steering vector for a
//! direction is [1, cos(az)cos(el), sin(az)cos(el), sin(el)] / sqrt(2).
//! A spatial covariance averaged over selected time-frequency bins is
//! eigendecomposed; the subspace orthogonal to the strongest directions
//! yields the MUSIC pseudo-spectrum, whose peaks are the estimates.

use ndarray::Array2;
use num_complex::Complex64;
use std::f64::consts::FRAC_PI_2;
use std::ops::Range;

use crate::dsp::{MultiSpec, StftConfig};
use crate::geom::great_circle;
use crate::{Error, Result};

/// Frequency band (Hz) used for broadband covariance by default.
pub const DEFAULT_BAND_HZ: (f64, f64) = (200.0, 8000.0);

/// Default grid resolution for the pseudo-spectrum scan, degrees.
pub const DEFAULT_GRID_STEP_DEG: f64 = 10.0;

/// Default minimum angular separation between picked peaks, degrees.
pub const DEFAULT_MIN_SEPARATION_DEG: f64 = 20.0;

/// Denominator floor of the pseudo-spectrum.
pub const SPECTRUM_FLOOR: f64 = 1e-12;

/// 4x4 complex matrix in row-major nested arrays.
pub type CMat4 = [[Complex64; 4]; 4];

/// Unit-norm steering vector of a direction.
pub fn steering_vector(azimuth: f64, elevation: f64) -> [Complex64; 4] {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    [
        Complex64::new(s, 0.0),
        Complex64::new(s * azimuth.cos() * elevation.cos(), 0.0),
        Complex64::new(s * azimuth.sin() * elevation.cos(), 0.0),
        Complex64::new(s * elevation.sin(), 0.0),
    ]
}

/// Bins whose center frequency lies in [low_hz, high_hz].
pub fn band_bins(config: &StftConfig, low_hz: f64, high_hz: f64) -> Range<usize> {
    let n_bins = config.n_bins();
    let hz_per_bin = config.sample_rate as f64 / config.window_len as f64;
    let lo = (low_hz / hz_per_bin).ceil().max(0.0) as usize;
    let hi = ((high_hz / hz_per_bin).floor() as usize + 1).min(n_bins);
    lo.min(n_bins)..hi
}

/// Average of h h^H over the selected bins and frames, where h is the
/// 4-channel spectrum of one bin.
pub fn spatial_covariance(spec: &MultiSpec, bins: Range<usize>, frames: Range<usize>) -> Result<CMat4> {
    if spec.n_channels() != 4 {
        return Err(Error::ChannelCount { got: spec.n_channels() });
    }
    if bins.is_empty() || frames.is_empty() || bins.end > spec.n_bins() || frames.end > spec.n_frames() {
        return Err(Error::EmptySelection);
    }
    let count = (bins.len() * frames.len()) as f64;
    let mut cov = [[Complex64::new(0.0, 0.0); 4]; 4];
    for f in bins {
        for t in frames.clone() {
            let h: [Complex64; 4] = std::array::from_fn(|c| spec.data[(c, f, t)]);
            for i in 0..4 {
                for j in 0..4 {
                    cov[i][j] += h[i] * h[j].conj();
                }
            }
        }
    }
    for row in cov.iter_mut() {
        for v in row.iter_mut() {
            *v /= count;
        }
    }
    Ok(cov)
}

fn frobenius(m: &CMat4) -> f64 {
    m.iter().flatten().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Eigendecomposition of a Hermitian 4x4 matrix by cyclic complex
/// Jacobi rotations. Returns eigenvalues in descending order and the
/// matching unit eigenvectors as columns of the second result.
pub fn hermitian_eig(m: &CMat4) -> Result<([f64; 4], CMat4)> {
    let scale = frobenius(m).max(f64::MIN_POSITIVE);
    for i in 0..4 {
        for j in 0..4 {
            if (m[i][j] - m[j][i].conj()).norm() > 1e-8 * scale {
                return Err(Error::NotHermitian);
            }
        }
    }
    // Work on the exactly Hermitian average to keep rounding symmetric.
    let mut a = *m;
    for i in 0..4 {
        a[i][i] = Complex64::new(a[i][i].re, 0.0);
        for j in (i + 1)..4 {
            let v = (a[i][j] + a[j][i].conj()) / 2.0;
            a[i][j] = v;
            a[j][i] = v.conj();
        }
    }
    let mut vecs: CMat4 = [[Complex64::new(0.0, 0.0); 4]; 4];
    for (i, row) in vecs.iter_mut().enumerate() {
        row[i] = Complex64::new(1.0, 0.0);
    }
    for _sweep in 0..100 {
        let off: f64 = (0..4)
            .flat_map(|i| ((i + 1)..4).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j].norm_sqr())
            .sum();
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..4 {
            for q in (p + 1)..4 {
                let apq = a[p][q];
                if apq.norm() <= 1e-300 {
                    continue;
                }
                let phase = apq / apq.norm();
                let alpha = a[p][p].re;
                let beta = a[q][q].re;
                let tau = (alpha - beta) / (2.0 * apq.norm());
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // Columns: new_p = c*col_p + s*conj(phase)*col_q,
                // new_q = -s*phase*col_p + c*col_q.
                for k in 0..4 {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp + s * phase.conj() * akq;
                    a[k][q] = -s * phase * akp + c * akq;
                }
                // Rows (conjugate transpose of the column update).
                for k in 0..4 {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk + s * phase * aqk;
                    a[q][k] = -s * phase.conj() * apk + c * aqk;
                }
                for k in 0..4 {
                    let vkp = vecs[k][p];
                    let vkq = vecs[k][q];
                    vecs[k][p] = c * vkp + s * phase.conj() * vkq;
                    vecs[k][q] = -s * phase * vkp + c * vkq;
                }
            }
        }
    }
    let mut order = [0usize, 1, 2, 3];
    let evals = [a[0][0].re, a[1][1].re, a[2][2].re, a[3][3].re];
    order.sort_by(|&i, &j| evals[j].total_cmp(&evals[i]));
    let mut sorted_vals = [0.0; 4];
    let mut sorted_vecs = [[Complex64::new(0.0, 0.0); 4]; 4];
    for (dst, &src) in order.iter().enumerate() {
        sorted_vals[dst] = evals[src];
        for k in 0..4 {
            sorted_vecs[k][dst] = vecs[k][src];
        }
    }
    Ok((sorted_vals, sorted_vecs))
}

/// The MUSIC pseudo-spectrum over a uniform direction grid: rows are
/// elevations from -90 to 90 degrees, columns azimuths from -180.
#[derive(Debug, Clone)]
pub struct MusicSpectrum {
    /// (elevations, azimuths) power lattice.
    pub power: Array2<f64>,
    /// Radians, one per column.
    pub azimuths: Vec<f64>,
    /// Radians, one per row.
    pub elevations: Vec<f64>,
}

/// Scan the noise subspace of a covariance over a direction grid:
/// P(az, el) = 1 / max(||E_N^H a(az, el)||^2, floor) with E_N the
/// eigenvectors of the 4 - n smallest eigenvalues.
pub fn music_spectrum(
    cov: &CMat4,
    n_sources: usize,
    az_step_deg: f64,
    el_step_deg: f64,
) -> Result<MusicSpectrum> {
    if n_sources == 0 || n_sources > 3 {
        return Err(Error::TooManySources { n: n_sources });
    }
    if !(az_step_deg > 0.0 && el_step_deg > 0.0) {
        return Err(Error::SceneValidation("grid steps must be positive".into()));
    }
    let (_vals, vecs) = hermitian_eig(cov)?;
    let azimuths: Vec<f64> = {
        let n = (360.0 / az_step_deg).round() as usize;
        (0..n.max(1)).map(|i| (-180.0 + i as f64 * az_step_deg).to_radians()).collect()
    };
    let elevations: Vec<f64> = {
        let n = (180.0 / el_step_deg).round() as usize;
        (0..=n.max(1)).map(|i| (-90.0 + i as f64 * el_step_deg).min(90.0).to_radians()).collect()
    };
    let mut power = Array2::zeros((elevations.len(), azimuths.len()));
    for (r, &el) in elevations.iter().enumerate() {
        for (c, &az) in azimuths.iter().enumerate() {
            let a = steering_vector(az, el);
            // ||E_N^H a||^2 summed over the noise eigenvectors.
            let mut denom = 0.0;
            for col in n_sources..4 {
                let mut dot = Complex64::new(0.0, 0.0);
                for k in 0..4 {
                    dot += vecs[k][col].conj() * a[k];
                }
                denom += dot.norm_sqr();
            }
            power[(r, c)] = 1.0 / denom.max(SPECTRUM_FLOOR);
        }
    }
    Ok(MusicSpectrum { power, azimuths, elevations })
}

/// Greedily pick up to `n` strict local maxima of the pseudo-spectrum in
/// decreasing power order, skipping candidates closer than
/// `min_separation` (radians, great-circle) to an accepted peak. The
/// flag is true when fewer than `n` peaks could be returned.
pub fn pick_peaks(spectrum: &MusicSpectrum, n: usize, min_separation: f64) -> (Vec<(f64, f64)>, bool) {
    let (rows, cols) = spectrum.power.dim();
    let mut candidates: Vec<(f64, f64, f64)> = Vec::new(); // (power, az, el)
    let at = |r: usize, c: usize| spectrum.power[(r, c.rem_euclid(cols))];
    let is_pole = |r: usize| spectrum.elevations[r].abs() >= FRAC_PI_2 - 1e-12;
    for r in 0..rows {
        if is_pole(r) {
            continue; // handled as single points below
        }
        for c in 0..cols {
            let v = spectrum.power[(r, c)];
            let mut best = true;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let rr = r as i64 + dr;
                    if rr < 0 || rr >= rows as i64 {
                        continue;
                    }
                    let nb = at(rr as usize, (c as i64 + dc).rem_euclid(cols as i64) as usize);
                    if nb >= v {
                        best = false;
                    }
                }
            }
            if best {
                candidates.push((v, spectrum.azimuths[c], spectrum.elevations[r]));
            }
        }
    }
    // A pole row is one physical point; it is a peak when it tops the
    // whole adjacent row.
    for r in 0..rows {
        if !is_pole(r) {
            continue;
        }
        let v = spectrum.power[(r, 0)];
        let neighbor_row = if r == 0 { 1 } else { rows - 2 };
        if neighbor_row < rows && (0..cols).all(|c| spectrum.power[(neighbor_row, c)] < v) {
            candidates.push((v, 0.0, spectrum.elevations[r]));
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut picked: Vec<(f64, f64)> = Vec::new();
    for (_, az, el) in candidates {
        if picked.len() == n {
            break;
        }
        if picked.iter().all(|&p| great_circle(p, (az, el)) >= min_separation) {
            picked.push((az, el));
        }
    }
    let shortage = picked.len() < n;
    (picked, shortage)
}

/// Broadband MUSIC estimate: covariance over the band and frame range,
/// pseudo-spectrum scan, peak picking. Angles in radians.
#[allow(clippy::too_many_arguments)]
pub fn music_doa(
    spec: &MultiSpec,
    band_hz: (f64, f64),
    frames: Range<usize>,
    n_sources: usize,
    az_step_deg: f64,
    el_step_deg: f64,
    min_separation: f64,
) -> Result<(Vec<(f64, f64)>, bool)> {
    let bins = band_bins(&spec.config, band_hz.0, band_hz.1);
    let cov = spatial_covariance(spec, bins, frames)?;
    let spectrum = music_spectrum(&cov, n_sources, az_step_deg, el_step_deg)?;
    Ok(pick_peaks(&spectrum, n_sources, min_separation))
}

/// Count sources from covariance eigenvalues: eigenvalues at least
/// `rel_threshold` times the largest count as sources, up to
/// `max_sources`; everything counts as zero when the largest eigenvalue
/// is below `abs_floor`.
pub fn eigen_source_count(evals: &[f64; 4], rel_threshold: f64, abs_floor: f64, max_sources: u8) -> u8 {
    if evals[0] <= abs_floor {
        return 0;
    }
    let n = evals.iter().take(3).filter(|&&v| v >= rel_threshold * evals[0]).count() as u8;
    n.min(max_sources)
}
