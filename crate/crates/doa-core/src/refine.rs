//! Trainable mask refinement: losses with analytic gradients, a tiny
//! per-bin logistic model, and a deterministic Adam fitting loop.
//!
//! The model predicts the separation mask and the noise mask from six
//! per-bin features (standardized log-mel power, the band-averaged unit
//! intensity direction, the heuristic angle-mask value, and a bias),
//! plus a two-class linear head over frame-mean features that predicts
//! whether one or two sources are active. Everything downstream of the
//! mask logits is differentiable except for absolute values, azimuth
//! wrapping, and the track-assignment minimum; those use fixed-selector
//! subgradients, and the selectors chosen during a forward pass are
//! exposed so a finite-difference check can reject evaluations that
//! straddle a selector flip.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dsp::MultiSpec;
use crate::intensity::{
    angle_mask, iv_to_doa, normalize_iv, reference_azimuths, refine_and_sum, sigmoid, DoaEstimate,
    DoaTrack, IvField, Refiner, RefinerOutput, TfMask, IV_NORM_EPS,
};
use crate::mel::{logmel, mel_bank, LOGMEL_FLOOR};
use crate::oracle::oracle_epsilon;
use crate::scene::SceneComponents;
use crate::{Error, Result};

/// Features per bin: standardized log-mel power, band-mean unit
/// intensity x/y/z, angle-mask value, bias.
pub const N_FEATURES: usize = 6;
/// Two mask heads plus a two-class count head, all over [`N_FEATURES`].
pub const N_PARAMS: usize = 4 * N_FEATURES;
/// Frames whose refined intensity has a smaller horizontal norm are
/// skipped by the direction loss.
pub const DEGENERATE_IV_EPS: f64 = 1e-9;
/// Assignment minima closer than this are resolved to the identity
/// pairing so the subgradient selector is deterministic.
pub const TIE_TOLERANCE: f64 = 1e-9;

/// Mixing weights of the total loss:
/// `doa + lambda1 * count + lambda2 * mask_only_doa`.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda1: 10.0, lambda2: 0.1 }
    }
}

/// The three loss terms before weighting.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossParts {
    /// Assignment-minimized per-frame direction error.
    pub doa: f64,
    /// Cross-entropy of the source-count head.
    pub noas: f64,
    /// Direction error of the mask-only estimate (no learned masks).
    pub doa_prime: f64,
}

/// Weighted sum of the loss parts.
pub fn total_loss(parts: &LossParts, weights: &LossWeights) -> f64 {
    parts.doa + weights.lambda1 * parts.noas + weights.lambda2 * parts.doa_prime
}

/// What a forward pass reports besides the loss value.
#[derive(Debug, Clone)]
pub struct ForwardReport {
    pub parts: LossParts,
    pub total: f64,
    /// Smallest distance to any selector flip seen during the pass
    /// (assignment ties, azimuth-wrap branch ties, absolute-value
    /// kinks, degeneracy thresholds). Infinite when nothing was
    /// evaluated.
    pub min_margin: f64,
    /// Frames dropped from the direction loss for degeneracy.
    pub skipped_frames: usize,
    /// Branch decisions taken, used to detect selector flips between
    /// finite-difference evaluations.
    pub selectors: Vec<u8>,
}

/// Weights of the logistic refiner: one row per mask head, two rows for
/// the source-count classes.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinerParams {
    pub w_s1: [f64; N_FEATURES],
    pub w_n: [f64; N_FEATURES],
    pub w_noas: [[f64; N_FEATURES]; 2],
}

impl RefinerParams {
    pub fn zeros() -> Self {
        RefinerParams {
            w_s1: [0.0; N_FEATURES],
            w_n: [0.0; N_FEATURES],
            w_noas: [[0.0; N_FEATURES]; 2],
        }
    }

    /// Flat layout: w_s1, w_n, w_noas[0], w_noas[1].
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(N_PARAMS);
        v.extend_from_slice(&self.w_s1);
        v.extend_from_slice(&self.w_n);
        v.extend_from_slice(&self.w_noas[0]);
        v.extend_from_slice(&self.w_noas[1]);
        v
    }

    pub fn from_vec(flat: &[f64]) -> Result<Self> {
        if flat.len() != N_PARAMS {
            return Err(Error::ParamShape { expected: N_PARAMS, got: flat.len() });
        }
        let mut p = RefinerParams::zeros();
        p.w_s1.copy_from_slice(&flat[0..N_FEATURES]);
        p.w_n.copy_from_slice(&flat[N_FEATURES..2 * N_FEATURES]);
        p.w_noas[0].copy_from_slice(&flat[2 * N_FEATURES..3 * N_FEATURES]);
        p.w_noas[1].copy_from_slice(&flat[3 * N_FEATURES..4 * N_FEATURES]);
        Ok(p)
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|v| v.is_finite())
    }
}

/// Deterministic Gaussian initialization, standard deviation `scale`.
pub fn random_params(seed: u64, scale: f64) -> RefinerParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flat: Vec<f64> = (0..N_PARAMS)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    RefinerParams::from_vec(&flat).expect("fixed length")
}

/// Which epsilon field the trainable path subtracts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpsMode {
    Zero,
    Oracle,
}

// ---------------------------------------------------------------------------
// Standalone loss operations
// ---------------------------------------------------------------------------

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Absolute azimuth and elevation errors between two directions given
/// as (azimuth, elevation) radians. The azimuth error wraps, so it
/// never exceeds pi; the elevation error is a plain absolute
/// difference.
pub fn rotational_mae(pred: (f64, f64), truth: (f64, f64)) -> (f64, f64) {
    let raw = pred.0 - truth.0;
    let d_az = (raw.abs()).min((raw - std::f64::consts::TAU).abs()).min((raw + std::f64::consts::TAU).abs());
    let d_el = (pred.1 - truth.1).abs();
    (d_az, d_el)
}

fn direction_error(pred: (f64, f64), truth: (f64, f64)) -> f64 {
    let (d_az, d_el) = rotational_mae(pred, truth);
    d_az + d_el
}

/// Count-weighted, assignment-minimized direction loss over parallel
/// two-track predictions and truths.
///
/// Frames with `z = 0` are ignored. Frames with `z = 1` compare track 1
/// against the first truth track. Frames with `z = 2` take the smaller
/// of the two track-to-truth pairings. Each frame contributes with
/// weight `z`, and the sum is divided by the total weight; an input
/// with no active frames scores zero. With every frame at `z = 2` the
/// loss is symmetric under swapping the predicted (or truth) tracks.
pub fn doa_loss(
    pred1: &[(f64, f64)],
    pred2: &[(f64, f64)],
    truth1: &[(f64, f64)],
    truth2: &[(f64, f64)],
    z: &[u8],
) -> Result<f64> {
    let n = z.len();
    if pred1.len() != n || pred2.len() != n || truth1.len() != n || truth2.len() != n {
        return Err(Error::ShapeMismatch {
            expected: format!("{n} frames in every track"),
            got: format!(
                "pred {}/{} truth {}/{}",
                pred1.len(),
                pred2.len(),
                truth1.len(),
                truth2.len()
            ),
        });
    }
    let mut num = 0.0;
    let mut weight = 0.0;
    for t in 0..n {
        match z[t] {
            0 => {}
            1 => {
                num += direction_error(pred1[t], truth1[t]);
                weight += 1.0;
            }
            2 => {
                let straight = direction_error(pred1[t], truth1[t]) + direction_error(pred2[t], truth2[t]);
                let crossed = direction_error(pred1[t], truth2[t]) + direction_error(pred2[t], truth1[t]);
                num += 2.0 * straight.min(crossed);
                weight += 2.0;
            }
            other => return Err(Error::TooManySources { n: other as usize }),
        }
    }
    Ok(if weight > 0.0 { num / weight } else { 0.0 })
}

/// Mean two-class cross-entropy of source-count logits against true
/// counts. Frames whose true count is zero are skipped; if nothing
/// remains the loss is zero.
pub fn noas_bce(logits: &[[f64; 2]], truth: &[u8]) -> Result<f64> {
    if logits.len() != truth.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} frames", truth.len()),
            got: format!("{} logit rows", logits.len()),
        });
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (l, &n) in logits.iter().zip(truth) {
        let class = match n {
            0 => continue,
            1 => 0usize,
            2 => 1usize,
            other => return Err(Error::TooManySources { n: other as usize }),
        };
        let mx = l[0].max(l[1]);
        let lse = mx + ((l[0] - mx).exp() + (l[1] - mx).exp()).ln();
        sum += lse - l[class];
        count += 1;
    }
    Ok(if count > 0 { sum / count as f64 } else { 0.0 })
}

/// Direction track from masked, epsilon-corrected intensity sums alone:
/// per frame, sum `mask * (iv - eps)` over bins and convert to angles.
/// This is the mask-only estimate the third loss term scores.
pub fn doa_prime(field: &IvField, mask: &TfMask, eps: Option<&IvField>) -> Result<Vec<DoaEstimate>> {
    let zeros = TfMask::zeros(field.n_bins(), field.n_frames());
    let pair = refine_and_sum(field, mask, &zeros, eps)?;
    Ok((0..field.n_frames()).map(|t| iv_to_doa(pair.track(0, t))).collect())
}

// ---------------------------------------------------------------------------
// Features and prepared scenes
// ---------------------------------------------------------------------------

/// Model inputs computed once per scene.
#[derive(Debug, Clone)]
pub struct Features {
    /// Shape (bins, frames, [`N_FEATURES`]); the last feature is a
    /// constant bias of one.
    pub per_bin: Array3<f64>,
    /// Frame means of `per_bin`, shape (frames, [`N_FEATURES`]).
    pub per_frame: Array2<f64>,
}

impl Features {
    /// Builds features from a spectrogram and its intensity field. The
    /// log-mel power is standardized over the whole scene; intensity
    /// directions are averaged per mel band with the filter weights;
    /// each bin reads the row of its dominant band.
    pub fn compute(spec: &MultiSpec, iv: &IvField, n_mels: usize) -> Result<Features> {
        let bank = mel_bank(&spec.config, n_mels)?;
        let lm = logmel(spec.channel(0), &bank, LOGMEL_FLOOR)?;
        let mean = lm.mean().unwrap_or(0.0);
        let var = lm.mapv(|v| (v - mean) * (v - mean)).mean().unwrap_or(0.0);
        let std = var.sqrt().max(1e-12);

        let unit = normalize_iv(iv, IV_NORM_EPS);
        let row_sums: Vec<f64> = (0..bank.n_mels())
            .map(|m| bank.weights.row(m).sum().max(1e-12))
            .collect();
        let mut band_dir = Array3::zeros((bank.n_mels(), iv.n_frames(), 3));
        for axis in 0..3 {
            let comp = crate::mel::apply_mel(&bank, unit.values.index_axis(ndarray::Axis(2), axis))?;
            for m in 0..bank.n_mels() {
                for t in 0..iv.n_frames() {
                    band_dir[(m, t, axis)] = comp[(m, t)] / row_sums[m];
                }
            }
        }

        let refs = reference_azimuths(&unit);
        let amask = angle_mask(&unit, &refs)?;

        let (bins, frames) = (iv.n_bins(), iv.n_frames());
        let mut per_bin = Array3::zeros((bins, frames, N_FEATURES));
        for f in 0..bins {
            let band = bank.dominant_band(f);
            for t in 0..frames {
                per_bin[(f, t, 0)] = (lm[(band, t)] - mean) / std;
                per_bin[(f, t, 1)] = band_dir[(band, t, 0)];
                per_bin[(f, t, 2)] = band_dir[(band, t, 1)];
                per_bin[(f, t, 3)] = band_dir[(band, t, 2)];
                per_bin[(f, t, 4)] = amask.values()[(f, t)];
                per_bin[(f, t, 5)] = 1.0;
            }
        }
        let mut per_frame = Array2::zeros((frames, N_FEATURES));
        for t in 0..frames {
            for i in 0..N_FEATURES {
                let mut s = 0.0;
                for f in 0..bins {
                    s += per_bin[(f, t, i)];
                }
                per_frame[(t, i)] = s / bins as f64;
            }
        }
        Ok(Features { per_bin, per_frame })
    }
}

/// Everything the fitting loop needs from one scene, computed once.
#[derive(Debug, Clone)]
pub struct FitScene {
    pub features: Features,
    pub iv: IvField,
    /// Epsilon field subtracted inside the trainable path; `None`
    /// subtracts nothing.
    pub eps: Option<IvField>,
    /// True per-frame source count (0, 1 or 2).
    pub z: Vec<u8>,
    /// True direction of track 1 per frame, meaningful where `z >= 1`.
    pub truth1: Vec<(f64, f64)>,
    /// True direction of track 2 per frame, meaningful where `z == 2`.
    pub truth2: Vec<(f64, f64)>,
    /// Direction loss of the mask-only estimate; constant in the
    /// parameters, so it is evaluated here once.
    pub doa_prime_loss: f64,
}

impl FitScene {
    /// Prepares a synthesized scene for fitting: spectrogram, intensity
    /// field, features, ground truth, and the chosen epsilon field.
    pub fn prepare(
        components: &SceneComponents,
        labels: &DoaTrack,
        config: &crate::dsp::StftConfig,
        n_mels: usize,
        eps_mode: EpsMode,
    ) -> Result<FitScene> {
        let spec = crate::dsp::stft(&components.mixture, config)?;
        let iv = crate::intensity::intensity_vectors(&spec)?;
        if labels.n_frames() != iv.n_frames() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} label frames", iv.n_frames()),
                got: format!("{}", labels.n_frames()),
            });
        }
        let features = Features::compute(&spec, &iv, n_mels)?;
        let eps = match eps_mode {
            EpsMode::Zero => None,
            EpsMode::Oracle => Some(oracle_epsilon(components, config)?),
        };

        let mut z = Vec::with_capacity(labels.n_frames());
        let mut truth1 = Vec::with_capacity(labels.n_frames());
        let mut truth2 = Vec::with_capacity(labels.n_frames());
        for frame in &labels.frames {
            z.push(frame.noas);
            let d1 = frame.doas.first().map(|d| (d.azimuth, d.elevation)).unwrap_or((0.0, 0.0));
            let d2 = frame.doas.get(1).map(|d| (d.azimuth, d.elevation)).unwrap_or((0.0, 0.0));
            truth1.push(d1);
            truth2.push(d2);
        }

        // Mask-only estimate: heuristic angle mask on one track, its
        // complement on the other, scored like the main direction loss.
        let unit = normalize_iv(&iv, IV_NORM_EPS);
        let refs = reference_azimuths(&unit);
        let amask = angle_mask(&unit, &refs)?;
        let zeros = TfMask::zeros(iv.n_bins(), iv.n_frames());
        let pair = refine_and_sum(&iv, &amask, &zeros, eps.as_ref())?;
        let mut num = 0.0;
        let mut weight = 0.0;
        for t in 0..iv.n_frames() {
            let v1 = pair.track(0, t);
            let v2 = pair.track(1, t);
            let ok = |v: [f64; 3]| v[0].hypot(v[1]) >= DEGENERATE_IV_EPS;
            match z[t] {
                1 if ok(v1) => {
                    let d = iv_to_doa(v1);
                    num += direction_error((d.azimuth, d.elevation), truth1[t]);
                    weight += 1.0;
                }
                2 if ok(v1) && ok(v2) => {
                    let a = iv_to_doa(v1);
                    let b = iv_to_doa(v2);
                    let pa = (a.azimuth, a.elevation);
                    let pb = (b.azimuth, b.elevation);
                    let straight = direction_error(pa, truth1[t]) + direction_error(pb, truth2[t]);
                    let crossed = direction_error(pa, truth2[t]) + direction_error(pb, truth1[t]);
                    num += 2.0 * straight.min(crossed);
                    weight += 2.0;
                }
                _ => {}
            }
        }
        let doa_prime_loss = if weight > 0.0 { num / weight } else { 0.0 };

        Ok(FitScene { features, iv, eps, z, truth1, truth2, doa_prime_loss })
    }
}

// ---------------------------------------------------------------------------
// Forward pass and analytic gradient
// ---------------------------------------------------------------------------

fn dot6(w: &[f64; N_FEATURES], x: &mut dyn Iterator<Item = f64>) -> f64 {
    let mut s = 0.0;
    for (a, b) in w.iter().zip(x) {
        s += a * b;
    }
    s
}

/// Per-track forward/backward bookkeeping at one frame.
struct TrackEval {
    error: f64,
    /// d(error)/d(iv sum), already carrying the subgradient signs.
    grad: [f64; 3],
    selector: [u8; 3],
}

/// Error of one summed vector against one truth, with the gradient of
/// the error in the vector and the margins of every branch decision.
fn eval_track(v: [f64; 3], truth: (f64, f64), margins: &mut Vec<f64>) -> TrackEval {
    let h2 = v[0] * v[0] + v[1] * v[1];
    let h = h2.sqrt();
    let r2 = h2 + v[2] * v[2];
    let az = v[1].atan2(v[0]);
    let el = v[2].atan2(h);

    let d_el = el - truth.1;
    let s_el = sign0(d_el);
    margins.push(d_el.abs());

    let raw = az - truth.0;
    let cands = [raw, raw - std::f64::consts::TAU, raw + std::f64::consts::TAU];
    let mut best = 0usize;
    for (i, c) in cands.iter().enumerate() {
        if c.abs() < cands[best].abs() {
            best = i;
        }
    }
    let mut others: Vec<f64> = (0..3).filter(|&i| i != best).map(|i| cands[i].abs()).collect();
    others.sort_by(f64::total_cmp);
    margins.push(others[0] - cands[best].abs());
    margins.push(cands[best].abs());
    let s_az = sign0(cands[best]);

    let error = cands[best].abs() + d_el.abs();
    // d(az)/dv = (-vy, vx, 0) / h^2 ; d(el)/dv = (-vx vz, -vy vz, h^2) / (h r^2)
    let grad = [
        s_az * (-v[1] / h2) + s_el * (-v[0] * v[2] / (h * r2)),
        s_az * (v[0] / h2) + s_el * (-v[1] * v[2] / (h * r2)),
        s_el * (h / r2),
    ];
    TrackEval {
        error,
        grad,
        selector: [best as u8, (s_az as i8 + 1) as u8, (s_el as i8 + 1) as u8],
    }
}

/// Forward pass over one scene; accumulates d(total)/d(params) into
/// `grad` when given.
fn forward_impl(
    params: &RefinerParams,
    scene: &FitScene,
    weights: &LossWeights,
    mut grad: Option<&mut [f64; N_PARAMS]>,
) -> Result<ForwardReport> {
    let (bins, frames) = (scene.iv.n_bins(), scene.iv.n_frames());
    let fdim = scene.features.per_bin.dim();
    if fdim != (bins, frames, N_FEATURES) {
        return Err(Error::ShapeMismatch {
            expected: format!("features ({bins}, {frames}, {N_FEATURES})"),
            got: format!("{fdim:?}"),
        });
    }
    if scene.z.len() != frames || scene.truth1.len() != frames || scene.truth2.len() != frames {
        return Err(Error::ShapeMismatch {
            expected: format!("{frames} truth frames"),
            got: format!("{}/{}/{}", scene.z.len(), scene.truth1.len(), scene.truth2.len()),
        });
    }
    if let Some(e) = &scene.eps {
        if e.values.dim() != scene.iv.values.dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("epsilon {:?}", scene.iv.values.dim()),
                got: format!("{:?}", e.values.dim()),
            });
        }
    }

    // Masks and the corrected intensity field.
    let mut m1 = Array2::zeros((bins, frames));
    let mut mn = Array2::zeros((bins, frames));
    for f in 0..bins {
        for t in 0..frames {
            let x = |i: usize| scene.features.per_bin[(f, t, i)];
            m1[(f, t)] = sigmoid(dot6(&params.w_s1, &mut (0..N_FEATURES).map(x)));
            mn[(f, t)] = sigmoid(dot6(&params.w_n, &mut (0..N_FEATURES).map(x)));
        }
    }
    let corrected = match &scene.eps {
        Some(e) => &scene.iv.values - &e.values,
        None => scene.iv.values.clone(),
    };

    // Per-frame sums of both tracks.
    let mut v1 = vec![[0.0f64; 3]; frames];
    let mut v2 = vec![[0.0f64; 3]; frames];
    for f in 0..bins {
        for t in 0..frames {
            let a = m1[(f, t)] * (1.0 - mn[(f, t)]);
            let b = (1.0 - m1[(f, t)]) * (1.0 - mn[(f, t)]);
            for axis in 0..3 {
                let c = corrected[(f, t, axis)];
                v1[t][axis] += a * c;
                v2[t][axis] += b * c;
            }
        }
    }

    let mut margins: Vec<f64> = Vec::new();
    let mut selectors: Vec<u8> = Vec::new();
    let mut skipped = 0usize;
    let mut num = 0.0;
    let mut weight = 0.0;
    // z_t-weighted d(num)/d(v) per frame; divided by the total weight
    // once it is known.
    let mut g1 = vec![[0.0f64; 3]; frames];
    let mut g2 = vec![[0.0f64; 3]; frames];

    for t in 0..frames {
        let h_of = |v: &[f64; 3]| v[0].hypot(v[1]);
        match scene.z[t] {
            0 => selectors.push(0),
            1 => {
                let h = h_of(&v1[t]);
                margins.push((h - DEGENERATE_IV_EPS).abs());
                if h < DEGENERATE_IV_EPS {
                    skipped += 1;
                    selectors.push(1);
                    continue;
                }
                let e = eval_track(v1[t], scene.truth1[t], &mut margins);
                num += e.error;
                weight += 1.0;
                g1[t] = e.grad;
                selectors.push(2);
                selectors.extend_from_slice(&e.selector);
            }
            2 => {
                let (ha, hb) = (h_of(&v1[t]), h_of(&v2[t]));
                margins.push((ha - DEGENERATE_IV_EPS).abs());
                margins.push((hb - DEGENERATE_IV_EPS).abs());
                if ha < DEGENERATE_IV_EPS || hb < DEGENERATE_IV_EPS {
                    skipped += 1;
                    selectors.push(1);
                    continue;
                }
                let s11 = eval_track(v1[t], scene.truth1[t], &mut margins);
                let s22 = eval_track(v2[t], scene.truth2[t], &mut margins);
                let s12 = eval_track(v1[t], scene.truth2[t], &mut margins);
                let s21 = eval_track(v2[t], scene.truth1[t], &mut margins);
                let straight = s11.error + s22.error;
                let crossed = s12.error + s21.error;
                margins.push((straight - crossed).abs());
                let use_cross = crossed < straight - TIE_TOLERANCE;
                let (ea, eb) = if use_cross { (s12, s21) } else { (s11, s22) };
                num += 2.0 * (ea.error + eb.error);
                weight += 2.0;
                for axis in 0..3 {
                    g1[t][axis] = 2.0 * ea.grad[axis];
                    g2[t][axis] = 2.0 * eb.grad[axis];
                }
                selectors.push(3);
                selectors.push(use_cross as u8);
                selectors.extend_from_slice(&ea.selector);
                selectors.extend_from_slice(&eb.selector);
            }
            other => return Err(Error::TooManySources { n: other as usize }),
        }
    }
    let doa = if weight > 0.0 { num / weight } else { 0.0 };

    // Source-count head.
    let mut noas_sum = 0.0;
    let mut noas_count = 0usize;
    let mut noas_grad = [[0.0f64; N_FEATURES]; 2];
    for t in 0..frames {
        let class = match scene.z[t] {
            1 => 0usize,
            2 => 1usize,
            _ => continue,
        };
        let g = |i: usize| scene.features.per_frame[(t, i)];
        let l0 = dot6(&params.w_noas[0], &mut (0..N_FEATURES).map(g));
        let l1 = dot6(&params.w_noas[1], &mut (0..N_FEATURES).map(g));
        let mx = l0.max(l1);
        let lse = mx + ((l0 - mx).exp() + (l1 - mx).exp()).ln();
        noas_sum += lse - [l0, l1][class];
        noas_count += 1;
        if grad.is_some() {
            let p = [(l0 - lse).exp(), (l1 - lse).exp()];
            for c in 0..2 {
                let coef = p[c] - if c == class { 1.0 } else { 0.0 };
                for i in 0..N_FEATURES {
                    noas_grad[c][i] += coef * scene.features.per_frame[(t, i)];
                }
            }
        }
    }
    let noas = if noas_count > 0 { noas_sum / noas_count as f64 } else { 0.0 };

    if let Some(out) = grad.as_deref_mut() {
        if weight > 0.0 {
            for t in 0..frames {
                let active = g1[t] != [0.0; 3] || g2[t] != [0.0; 3];
                if !active {
                    continue;
                }
                let (w1, w2) = (g1[t], g2[t]);
                for f in 0..bins {
                    let m1v = m1[(f, t)];
                    let mnv = mn[(f, t)];
                    let d1 = m1v * (1.0 - m1v);
                    let dn = mnv * (1.0 - mnv);
                    let mut dot1 = 0.0;
                    let mut dot2 = 0.0;
                    for axis in 0..3 {
                        let c = corrected[(f, t, axis)];
                        dot1 += c * w1[axis];
                        dot2 += c * w2[axis];
                    }
                    let a = d1 * (1.0 - mnv) * (dot1 - dot2) / weight;
                    let b = -dn * (m1v * dot1 + (1.0 - m1v) * dot2) / weight;
                    for i in 0..N_FEATURES {
                        let x = scene.features.per_bin[(f, t, i)];
                        out[i] += a * x;
                        out[N_FEATURES + i] += b * x;
                    }
                }
            }
        }
        if noas_count > 0 {
            for c in 0..2 {
                for i in 0..N_FEATURES {
                    out[2 * N_FEATURES + c * N_FEATURES + i] +=
                        weights.lambda1 * noas_grad[c][i] / noas_count as f64;
                }
            }
        }
    }

    let parts = LossParts { doa, noas, doa_prime: scene.doa_prime_loss };
    let min_margin = margins.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(ForwardReport {
        total: total_loss(&parts, weights),
        parts,
        min_margin,
        skipped_frames: skipped,
        selectors,
    })
}

/// Loss of one prepared scene at the given parameters.
pub fn scene_loss(params: &RefinerParams, scene: &FitScene, weights: &LossWeights) -> Result<ForwardReport> {
    forward_impl(params, scene, weights, None)
}

fn merge_reports(reports: Vec<ForwardReport>, weights: &LossWeights) -> ForwardReport {
    let n = reports.len() as f64;
    let mut parts = LossParts::default();
    let mut min_margin = f64::INFINITY;
    let mut skipped = 0;
    let mut selectors = Vec::new();
    for r in reports {
        parts.doa += r.parts.doa / n;
        parts.noas += r.parts.noas / n;
        parts.doa_prime += r.parts.doa_prime / n;
        min_margin = min_margin.min(r.min_margin);
        skipped += r.skipped_frames;
        selectors.extend(r.selectors);
    }
    ForwardReport {
        total: total_loss(&parts, weights),
        parts,
        min_margin,
        skipped_frames: skipped,
        selectors,
    }
}

/// Mean loss over scenes.
pub fn batch_loss(params: &RefinerParams, scenes: &[FitScene], weights: &LossWeights) -> Result<ForwardReport> {
    if scenes.is_empty() {
        return Err(Error::EmptySelection);
    }
    let reports = scenes
        .iter()
        .map(|s| forward_impl(params, s, weights, None))
        .collect::<Result<Vec<_>>>()?;
    Ok(merge_reports(reports, weights))
}

/// Mean loss and its analytic gradient in the flat parameter layout of
/// [`RefinerParams::to_vec`].
pub fn loss_gradient(
    params: &RefinerParams,
    scenes: &[FitScene],
    weights: &LossWeights,
) -> Result<(Vec<f64>, ForwardReport)> {
    if scenes.is_empty() {
        return Err(Error::EmptySelection);
    }
    let mut grad = [0.0f64; N_PARAMS];
    let mut reports = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let mut g = [0.0f64; N_PARAMS];
        reports.push(forward_impl(params, scene, weights, Some(&mut g))?);
        for i in 0..N_PARAMS {
            grad[i] += g[i] / scenes.len() as f64;
        }
    }
    Ok((grad.to_vec(), merge_reports(reports, weights)))
}

/// Result of comparing the analytic gradient against central
/// differences.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Largest relative error over the checked coordinates.
    pub max_rel_err: f64,
    /// Coordinates actually compared.
    pub checked: usize,
    /// Coordinates excluded because a branch selector flipped between
    /// the two sides of the difference stencil.
    pub skipped_unstable: usize,
    /// Smallest selector margin seen at the unperturbed point.
    pub min_margin: f64,
}

/// Verifies [`loss_gradient`] against a central finite difference with
/// the given step. A coordinate only counts when the branch selectors
/// agree on both sides of the stencil; a subgradient of a piecewise-
/// smooth function cannot be checked across a kink. The relative error
/// uses an absolute floor so finite-difference roundoff on vanishing
/// components does not dominate.
pub fn gradient_check(
    params: &RefinerParams,
    scenes: &[FitScene],
    weights: &LossWeights,
    step: f64,
) -> Result<GradCheck> {
    gradient_check_with(params, scenes, weights, step, &|_| {})
}

/// [`gradient_check`] with a hook that may inspect or modify the
/// analytic gradient before the comparison. Exists so callers can prove
/// the check is not vacuous by corrupting a coordinate and watching it
/// fail.
pub fn gradient_check_with(
    params: &RefinerParams,
    scenes: &[FitScene],
    weights: &LossWeights,
    step: f64,
    tweak: &dyn Fn(&mut [f64]),
) -> Result<GradCheck> {
    let (mut grad, base) = loss_gradient(params, scenes, weights)?;
    tweak(&mut grad);
    let flat = params.to_vec();
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    let mut unstable = 0usize;
    for i in 0..N_PARAMS {
        let mut plus = flat.clone();
        plus[i] += step;
        let mut minus = flat.clone();
        minus[i] -= step;
        let rp = batch_loss(&RefinerParams::from_vec(&plus)?, scenes, weights)?;
        let rm = batch_loss(&RefinerParams::from_vec(&minus)?, scenes, weights)?;
        if rp.selectors != rm.selectors || rp.selectors != base.selectors {
            unstable += 1;
            continue;
        }
        let fd = (rp.total - rm.total) / (2.0 * step);
        let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-4);
        max_rel = max_rel.max(rel);
        checked += 1;
    }
    Ok(GradCheck {
        max_rel_err: max_rel,
        checked,
        skipped_unstable: unstable,
        min_margin: base.min_margin,
    })
}

/// Synthetic scene with random features, intensities and truths, sized
/// for gradient verification. Not a physical scene; every field is just
/// a draw with the right shape and range.
pub fn synthetic_check_scene(seed: u64, bins: usize, frames: usize) -> FitScene {
    use std::f64::consts::{FRAC_PI_2, PI};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_bin = Array3::zeros((bins, frames, N_FEATURES));
    for f in 0..bins {
        for t in 0..frames {
            per_bin[(f, t, 0)] = rng.random_range(-2.0..2.0);
            for i in 1..4 {
                per_bin[(f, t, i)] = rng.random_range(-1.0..1.0);
            }
            per_bin[(f, t, 4)] = rng.random_range(0.0..1.0);
            per_bin[(f, t, 5)] = 1.0;
        }
    }
    let mut per_frame = Array2::zeros((frames, N_FEATURES));
    for t in 0..frames {
        for i in 0..N_FEATURES {
            let mut s = 0.0;
            for f in 0..bins {
                s += per_bin[(f, t, i)];
            }
            per_frame[(t, i)] = s / bins as f64;
        }
    }
    let mut values = Array3::zeros((bins, frames, 3));
    for v in values.iter_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    let config = crate::dsp::StftConfig {
        sample_rate: 8000,
        window_len: 2 * (bins - 1).max(1),
        hop: (bins - 1).max(1),
        window: crate::dsp::WindowKind::Hann,
    };
    let iv = IvField { values, config };
    let mut z = Vec::with_capacity(frames);
    let mut truth1 = Vec::with_capacity(frames);
    let mut truth2 = Vec::with_capacity(frames);
    for _ in 0..frames {
        z.push(rng.random_range(0..3u8));
        truth1.push((rng.random_range(-PI..PI), rng.random_range(-FRAC_PI_2..FRAC_PI_2)));
        truth2.push((rng.random_range(-PI..PI), rng.random_range(-FRAC_PI_2..FRAC_PI_2)));
    }
    FitScene {
        features: Features { per_bin, per_frame },
        iv,
        eps: None,
        z,
        truth1,
        truth2,
        doa_prime_loss: 0.25,
    }
}

// ---------------------------------------------------------------------------
// Fitting
// ---------------------------------------------------------------------------

/// Adam settings and schedule. The learning rate is multiplied by
/// `decay_factor` when the step counter passes each fraction in
/// `decay_at`.
#[derive(Debug, Clone)]
pub struct OptimConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub decay_factor: f64,
    pub decay_at: [f64; 2],
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            steps: 200,
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            decay_factor: 0.1,
            decay_at: [0.5, 0.75],
        }
    }
}

/// One line of the fitting trace, recorded before each update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub total: f64,
    pub doa: f64,
    pub noas: f64,
    pub doa_prime: f64,
}

/// Fits the refiner with Adam from a seeded Gaussian initialization
/// (standard deviation 0.01). Scenes are visited in their given order
/// every step, so the run is deterministic for a fixed seed. Fails if
/// the loss turns non-finite or grows past ten times its initial value.
pub fn fit_refiner(
    scenes: &[FitScene],
    weights: &LossWeights,
    opt: &OptimConfig,
    seed: u64,
) -> Result<(RefinerParams, Vec<TraceRow>)> {
    if scenes.is_empty() {
        return Err(Error::EmptySelection);
    }
    let mut flat = random_params(seed, 0.01).to_vec();
    let mut m = [0.0f64; N_PARAMS];
    let mut v = [0.0f64; N_PARAMS];
    let mut b1p = 1.0;
    let mut b2p = 1.0;
    let mut initial = f64::INFINITY;
    let mut trace = Vec::with_capacity(opt.steps);

    for step in 0..opt.steps {
        let params = RefinerParams::from_vec(&flat)?;
        let (grad, report) = loss_gradient(&params, scenes, weights)?;
        if !report.total.is_finite() {
            return Err(Error::NonFiniteLoss { step, value: report.total });
        }
        if step == 0 {
            initial = report.total;
        } else if report.total > 10.0 * initial {
            return Err(Error::Diverged { step });
        }
        trace.push(TraceRow {
            step,
            total: report.total,
            doa: report.parts.doa,
            noas: report.parts.noas,
            doa_prime: report.parts.doa_prime,
        });

        let frac = step as f64 / opt.steps as f64;
        let mut lr = opt.learning_rate;
        if frac >= opt.decay_at[0] {
            lr *= opt.decay_factor;
        }
        if frac >= opt.decay_at[1] {
            lr *= opt.decay_factor;
        }
        b1p *= opt.beta1;
        b2p *= opt.beta2;
        for i in 0..N_PARAMS {
            m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * grad[i];
            v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * grad[i] * grad[i];
            let mh = m[i] / (1.0 - b1p);
            let vh = v[i] / (1.0 - b2p);
            flat[i] -= lr * mh / (vh.sqrt() + opt.adam_eps);
        }
    }
    Ok((RefinerParams::from_vec(&flat)?, trace))
}

/// Refiner that applies fitted logistic masks. The epsilon estimate is
/// left empty: nothing is subtracted at inference time.
#[derive(Debug, Clone)]
pub struct FittedRefiner {
    pub params: RefinerParams,
    pub n_mels: usize,
}

impl Refiner for FittedRefiner {
    fn refine(&self, spec: &MultiSpec, iv: &IvField) -> Result<RefinerOutput> {
        let features = Features::compute(spec, iv, self.n_mels)?;
        let (bins, frames) = (iv.n_bins(), iv.n_frames());
        let mut m1 = Array2::zeros((bins, frames));
        let mut mn = Array2::zeros((bins, frames));
        for f in 0..bins {
            for t in 0..frames {
                let x = |i: usize| features.per_bin[(f, t, i)];
                m1[(f, t)] = sigmoid(dot6(&self.params.w_s1, &mut (0..N_FEATURES).map(x)));
                mn[(f, t)] = sigmoid(dot6(&self.params.w_n, &mut (0..N_FEATURES).map(x)));
            }
        }
        Ok(RefinerOutput { m_s1: TfMask::new(m1)?, m_n: TfMask::new(mn)?, eps: None })
    }
}
