//! On-disk schemas: scene specs, labels, refiner parameters and metrics
//! as JSON, predictions and loss traces as CSV.
//!
//! Angles are degrees at the file boundary and radians inside the
//! library. Floats are written with Rust's shortest-round-trip
//! formatting, so a value read back parses to the identical bits. Every
//! JSON document carries a `schema_version`; readers accept any minor
//! revision of the major version they were built for and reject the
//! rest. CSVs carry the same version in a leading comment line.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use doa_core::dsp::StftConfig;
use doa_core::geom::wrap_degrees;
use doa_core::intensity::{DoaEstimate, DoaTrack, FrameDoa};
use doa_core::refine::{EpsMode, RefinerParams, TraceRow};
use doa_core::scene::{EventLabel, ReverbParams, SceneSpec, SourceKind};

pub const SCHEMA_VERSION: &str = "1.0";

/// Accept any minor revision of our major version, reject the rest.
pub fn check_version(version: &str, what: &str) -> Result<()> {
    let major = version.split('.').next().unwrap_or("");
    let expect = SCHEMA_VERSION.split('.').next().unwrap();
    if major != expect {
        bail!("{what}: unsupported schema_version {version:?} (this reader handles major {expect})");
    }
    Ok(())
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {what} {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {what} {}", path.display()))
}

fn save_json<T: Serialize>(path: &Path, value: &T, what: &str) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {what} {}", path.display()))
}

// ---------------------------------------------------------------------
// Scene descriptions.

#[derive(Debug, Serialize, Deserialize)]
pub struct SceneSpecFile {
    pub schema_version: String,
    pub duration_s: f64,
    pub sample_rate: u32,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_snr_db: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reverb: Option<ReverbFile>,
    pub events: Vec<EventFile>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ReverbFile {
    pub echo_count: u32,
    pub delay_min_s: f64,
    pub delay_max_s: f64,
    pub decay: f64,
    pub direction_jitter: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EventFile {
    pub event_id: u32,
    pub onset_s: f64,
    pub offset_s: f64,
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    #[serde(default = "default_gain")]
    pub gain: f64,
    pub kind: KindFile,
}

fn default_gain() -> f64 {
    1.0
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KindFile {
    BandNoise { low_hz: f64, high_hz: f64 },
    ToneComplex { f0_hz: f64, n_harmonics: u32 },
}

impl SceneSpecFile {
    pub fn load(path: &Path) -> Result<Self> {
        let file: Self = load_json(path, "scene spec")?;
        check_version(&file.schema_version, "scene spec")?;
        Ok(file)
    }

    pub fn to_spec(&self) -> SceneSpec {
        SceneSpec {
            duration: self.duration_s,
            sample_rate: self.sample_rate,
            events: self
                .events
                .iter()
                .map(|e| EventLabel {
                    event_id: e.event_id,
                    onset: e.onset_s,
                    offset: e.offset_s,
                    azimuth: wrap_degrees(e.azimuth_deg).to_radians(),
                    elevation: e.elevation_deg.to_radians(),
                    source_kind: match e.kind {
                        KindFile::BandNoise { low_hz, high_hz } => {
                            SourceKind::BandNoise { low_hz, high_hz }
                        }
                        KindFile::ToneComplex { f0_hz, n_harmonics } => {
                            SourceKind::ToneComplex { f0_hz, n_harmonics }
                        }
                    },
                    gain: e.gain,
                })
                .collect(),
            noise_snr_db: self.noise_snr_db,
            reverb: self.reverb.as_ref().map(|r| ReverbParams {
                echo_count: r.echo_count,
                delay_min: r.delay_min_s,
                delay_max: r.delay_max_s,
                decay: r.decay,
                direction_jitter: r.direction_jitter,
            }),
            seed: self.seed,
        }
    }
}

// ---------------------------------------------------------------------
// Ground-truth labels.

#[derive(Debug, Serialize, Deserialize)]
pub struct LabelsFile {
    pub schema_version: String,
    pub sample_rate: u32,
    pub stft_window: usize,
    pub stft_hop: usize,
    pub n_frames: usize,
    pub events: Vec<LabelEvent>,
    /// Active-source count per frame.
    pub noas: Vec<u8>,
    /// Per frame, `noas` many `[azimuth_deg, elevation_deg]` pairs.
    pub doa_deg: Vec<Vec<[f64; 2]>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LabelEvent {
    pub event_id: u32,
    pub onset_s: f64,
    pub offset_s: f64,
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
}

impl LabelsFile {
    pub fn build(spec: &SceneSpec, track: &DoaTrack, config: &StftConfig) -> Self {
        LabelsFile {
            schema_version: SCHEMA_VERSION.to_string(),
            sample_rate: config.sample_rate,
            stft_window: config.window_len,
            stft_hop: config.hop,
            n_frames: track.n_frames(),
            events: spec
                .events
                .iter()
                .map(|e| LabelEvent {
                    event_id: e.event_id,
                    onset_s: e.onset,
                    offset_s: e.offset,
                    azimuth_deg: e.azimuth.to_degrees(),
                    elevation_deg: e.elevation.to_degrees(),
                })
                .collect(),
            noas: track.noas_vec(),
            doa_deg: track
                .frames
                .iter()
                .map(|f| {
                    f.doas
                        .iter()
                        .map(|d| [d.azimuth.to_degrees(), d.elevation.to_degrees()])
                        .collect()
                })
                .collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: Self = load_json(path, "labels")?;
        check_version(&file.schema_version, "labels")?;
        if file.noas.len() != file.n_frames || file.doa_deg.len() != file.n_frames {
            bail!("labels {}: frame arrays disagree with n_frames", path.display());
        }
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_json(path, self, "labels")
    }

    pub fn to_track(&self) -> DoaTrack {
        let frames = self
            .noas
            .iter()
            .zip(&self.doa_deg)
            .map(|(&noas, doas)| FrameDoa {
                noas,
                doas: doas
                    .iter()
                    .map(|&[az, el]| DoaEstimate {
                        azimuth: az.to_radians(),
                        elevation: el.to_radians(),
                        degenerate: false,
                    })
                    .collect(),
            })
            .collect();
        DoaTrack { frames }
    }
}

// ---------------------------------------------------------------------
// Refiner parameters.

#[derive(Debug, Serialize, Deserialize)]
pub struct ParamsFile {
    pub schema_version: String,
    pub n_mels: usize,
    /// Epsilon handling the parameters were fitted with: "zero" or
    /// "oracle".
    pub eps_mode: String,
    pub seed: u64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub w_s1: [f64; 6],
    pub w_n: [f64; 6],
    pub w_noas: [[f64; 6]; 2],
}

pub fn eps_mode_from_str(s: &str) -> Result<EpsMode> {
    match s {
        "zero" => Ok(EpsMode::Zero),
        "oracle" => Ok(EpsMode::Oracle),
        other => bail!("unknown epsilon mode {other:?} (expected zero or oracle)"),
    }
}

pub fn eps_mode_name(mode: EpsMode) -> &'static str {
    match mode {
        EpsMode::Zero => "zero",
        EpsMode::Oracle => "oracle",
    }
}

impl ParamsFile {
    pub fn build(
        params: &RefinerParams,
        n_mels: usize,
        eps_mode: EpsMode,
        seed: u64,
        lambda1: f64,
        lambda2: f64,
    ) -> Self {
        ParamsFile {
            schema_version: SCHEMA_VERSION.to_string(),
            n_mels,
            eps_mode: eps_mode_name(eps_mode).to_string(),
            seed,
            lambda1,
            lambda2,
            w_s1: params.w_s1,
            w_n: params.w_n,
            w_noas: params.w_noas,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: Self = load_json(path, "refiner parameters")?;
        check_version(&file.schema_version, "refiner parameters")?;
        eps_mode_from_str(&file.eps_mode)?;
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_json(path, self, "refiner parameters")
    }

    pub fn to_params(&self) -> RefinerParams {
        RefinerParams { w_s1: self.w_s1, w_n: self.w_n, w_noas: self.w_noas }
    }
}

// ---------------------------------------------------------------------
// Metrics report.

#[derive(Debug, Serialize, Deserialize)]
pub struct MetricsFile {
    pub schema_version: String,
    pub doa_error_deg: f64,
    pub frame_recall: f64,
    pub n_frames: usize,
    pub n_events: usize,
}

impl MetricsFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_json(path, self, "metrics")
    }
}

// ---------------------------------------------------------------------
// Prediction CSV.

pub const PREDICTION_HEADER: &str = "frame_index,time_s,noas,az1_deg,el1_deg,az2_deg,el2_deg";

pub fn write_predictions(path: &Path, track: &DoaTrack, config: &StftConfig) -> Result<()> {
    let mut out = format!("# schema_version {SCHEMA_VERSION}\n{PREDICTION_HEADER}\n");
    for (t, frame) in track.frames.iter().enumerate() {
        write!(out, "{t},{},{}", config.frame_center(t), frame.noas).unwrap();
        for slot in 0..2 {
            match frame.doas.get(slot) {
                Some(d) if !d.degenerate => {
                    write!(out, ",{},{}", d.azimuth.to_degrees(), d.elevation.to_degrees())
                        .unwrap();
                }
                _ => out.push_str(",,"),
            }
        }
        out.push('\n');
    }
    std::fs::write(path, out).with_context(|| format!("writing predictions {}", path.display()))
}

pub fn read_predictions(path: &Path) -> Result<DoaTrack> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading predictions {}", path.display()))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(comment) if comment.starts_with("# schema_version ") => {
            check_version(comment.trim_start_matches("# schema_version ").trim(), "predictions")?;
        }
        _ => bail!("predictions {}: missing schema_version comment", path.display()),
    }
    match lines.next() {
        Some(header) if header == PREDICTION_HEADER => {}
        other => bail!("predictions {}: unexpected header {other:?}", path.display()),
    }
    let mut frames = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            bail!("predictions {}: row {i} has {} fields, expected 7", path.display(), fields.len());
        }
        let noas: u8 = fields[2]
            .parse()
            .with_context(|| format!("predictions row {i}: bad noas {:?}", fields[2]))?;
        let mut doas = Vec::new();
        for slot in 0..usize::from(noas.min(2)) {
            let az = fields[3 + 2 * slot];
            let el = fields[4 + 2 * slot];
            if az.is_empty() || el.is_empty() {
                doas.push(DoaEstimate { azimuth: 0.0, elevation: 0.0, degenerate: true });
            } else {
                doas.push(DoaEstimate {
                    azimuth: az
                        .parse::<f64>()
                        .with_context(|| format!("predictions row {i}: bad azimuth"))?
                        .to_radians(),
                    elevation: el
                        .parse::<f64>()
                        .with_context(|| format!("predictions row {i}: bad elevation"))?
                        .to_radians(),
                    degenerate: false,
                });
            }
        }
        frames.push(FrameDoa { noas, doas });
    }
    Ok(DoaTrack { frames })
}

// ---------------------------------------------------------------------
// Loss-trace CSV.

pub const TRACE_HEADER: &str = "step,total,doa,noas,doa_prime";

pub fn write_trace(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let mut out = format!("# schema_version {SCHEMA_VERSION}\n{TRACE_HEADER}\n");
    for row in trace {
        writeln!(out, "{},{},{},{},{}", row.step, row.total, row.doa, row.noas, row.doa_prime)
            .unwrap();
    }
    std::fs::write(path, out).with_context(|| format!("writing trace {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn version_gate_accepts_minors_and_rejects_majors() {
        assert!(check_version("1.0", "x").is_ok());
        assert!(check_version("1.7", "x").is_ok());
        assert!(check_version("2.0", "x").is_err());
        assert!(check_version("0.9", "x").is_err());
        assert!(check_version("", "x").is_err());
    }

    #[test]
    fn predictions_round_trip_bitwise() {
        let dir = std::env::temp_dir().join("doa-fmt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("pred.csv");
        let track = DoaTrack {
            frames: vec![
                FrameDoa { noas: 0, doas: vec![] },
                FrameDoa {
                    noas: 1,
                    doas: vec![DoaEstimate { azimuth: 0.5213, elevation: -0.2001, degenerate: false }],
                },
                FrameDoa {
                    noas: 2,
                    doas: vec![
                        DoaEstimate { azimuth: -2.91, elevation: 0.77, degenerate: false },
                        DoaEstimate { azimuth: 0.0, elevation: 0.0, degenerate: true },
                    ],
                },
            ],
        };
        let config = StftConfig {
            sample_rate: 48000,
            window_len: 1024,
            hop: 512,
            window: doa_core::dsp::WindowKind::Hann,
        };
        write_predictions(&path, &track, &config).unwrap();
        let back = read_predictions(&path).unwrap();
        assert_eq!(back.frames.len(), 3);
        assert_eq!(back.frames[0].noas, 0);
        let d = &back.frames[1].doas[0];
        // Degrees round-trip through shortest formatting, so radians
        // match after the same conversion.
        assert_eq!(d.azimuth, 0.5213f64.to_degrees().to_radians());
        assert!(back.frames[2].doas[1].degenerate);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn scene_spec_angles_convert_to_radians() {
        let file = SceneSpecFile {
            schema_version: SCHEMA_VERSION.into(),
            duration_s: 1.0,
            sample_rate: 48000,
            seed: 3,
            noise_snr_db: None,
            reverb: None,
            events: vec![EventFile {
                event_id: 0,
                onset_s: 0.0,
                offset_s: 1.0,
                azimuth_deg: 180.0,
                elevation_deg: 15.0,
                gain: 1.0,
                kind: KindFile::BandNoise { low_hz: 300.0, high_hz: 4000.0 },
            }],
        };
        let spec = file.to_spec();
        // 180 degrees wraps to the canonical -180 before conversion.
        assert_eq!(spec.events[0].azimuth, (-180f64).to_radians());
        assert_eq!(spec.events[0].elevation, 15f64.to_radians());
    }
}
