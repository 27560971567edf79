//! Ground-truth decomposition of synthetic scenes: ideal masks, the
//! exact epsilon intensity field, and true per-frame source counts.
//!
//! Because [`crate::scene::synth_scene`] returns the additive parts of
//! the mixture, the intensity field of the mixture can be split into
//! per-source fields, a noise field, and a residual that absorbs echo
//! energy and every cross-channel cross term. That residual is exactly
//! the epsilon field the refinement subtracts, which makes these
//! oracles the reference implementation the heuristic and fitted
//! refiners are measured against.

use ndarray::Array2;

use crate::dsp::{stft, MultiSpec, StftConfig};
use crate::intensity::{intensity_vectors, DoaTrack, IvField, Refiner, RefinerOutput, TfMask};
use crate::scene::SceneComponents;
use crate::Result;

/// Power floor of the ideal ratio masks.
pub const MASK_FLOOR: f64 = 1e-12;

/// Intensity fields of the additive scene parts. `epsilon` is defined
/// as `mixture - source1 - source2 - noise`, so the four parts sum to
/// the mixture field exactly by construction.
#[derive(Debug, Clone)]
pub struct ComponentIvs {
    pub source1: IvField,
    pub source2: IvField,
    pub noise: IvField,
    pub epsilon: IvField,
    pub mixture: IvField,
}

fn iv_of(signal: &Array2<f64>, config: &StftConfig) -> Result<IvField> {
    intensity_vectors(&stft(signal, config)?)
}

/// Intensity decomposition of a synthesized scene. Sources are grouped
/// by track slot, so `source1` is everything assigned slot 0.
pub fn oracle_component_ivs(components: &SceneComponents, config: &StftConfig) -> Result<ComponentIvs> {
    let source1 = iv_of(&components.slot_direct(0), config)?;
    let source2 = iv_of(&components.slot_direct(1), config)?;
    let noise = iv_of(&components.noise, config)?;
    let mixture = iv_of(&components.mixture, config)?;
    let epsilon = mixture.minus(&source1)?.minus(&source2)?.minus(&noise)?;
    Ok(ComponentIvs { source1, source2, noise, epsilon, mixture })
}

/// W-channel power spectrogram of a signal.
fn w_power(signal: &Array2<f64>, config: &StftConfig) -> Result<Array2<f64>> {
    let spec = stft(signal, config)?;
    let w = spec.channel(0);
    Ok(w.mapv(|z| z.norm_sqr()))
}

/// Ideal ratio masks on W-channel power:
/// m_s1 = P1 / (P1 + P2 + floor),
/// m_n  = Pn / (Pn + P1 + P2 + floor).
pub fn oracle_masks(components: &SceneComponents, config: &StftConfig) -> Result<(TfMask, TfMask)> {
    let p1 = w_power(&components.slot_direct(0), config)?;
    let p2 = w_power(&components.slot_direct(1), config)?;
    let pn = w_power(&components.noise, config)?;
    let mut m_s1 = Array2::zeros(p1.dim());
    let mut m_n = Array2::zeros(p1.dim());
    for (i, &p1v) in p1.indexed_iter() {
        let p2v = p2[i];
        let pnv = pn[i];
        m_s1[i] = p1v / (p1v + p2v + MASK_FLOOR);
        m_n[i] = pnv / (pnv + p1v + p2v + MASK_FLOOR);
    }
    Ok((TfMask::new(m_s1)?, TfMask::new(m_n)?))
}

/// The epsilon-assigned intensity field alone.
pub fn oracle_epsilon(components: &SceneComponents, config: &StftConfig) -> Result<IvField> {
    Ok(oracle_component_ivs(components, config)?.epsilon)
}

/// Ground-truth per-frame source counts from labels.
pub fn oracle_noas(labels: &DoaTrack) -> Vec<u8> {
    labels.noas_vec()
}

/// Refiner backed by the true scene decomposition: ideal ratio masks
/// plus exact epsilon subtraction.
pub struct OracleRefiner<'a> {
    pub components: &'a SceneComponents,
}

impl Refiner for OracleRefiner<'_> {
    fn refine(&self, spec: &MultiSpec, _iv: &IvField) -> Result<RefinerOutput> {
        let (m_s1, m_n) = oracle_masks(self.components, &spec.config)?;
        let eps = oracle_epsilon(self.components, &spec.config)?;
        Ok(RefinerOutput { m_s1, m_n, eps: Some(eps) })
    }
}
