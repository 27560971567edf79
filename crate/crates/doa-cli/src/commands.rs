//! The five subcommands: synth, estimate, eval, fit, gradcheck.

use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};

use doa_core::dsp::{stft, StftConfig};
use doa_core::intensity::{
    estimate_track, AngleRefiner, IdentityRefiner, LogPowerRefiner,
};
use doa_core::music::{band_bins, eigen_source_count, hermitian_eig, spatial_covariance};
use doa_core::oracle::OracleRefiner;
use doa_core::refine::{
    fit_refiner, gradient_check_with, random_params, synthetic_check_scene, FitScene,
    FittedRefiner, LossWeights, OptimConfig,
};
use doa_core::scene::{frame_labels, synth_scene, SceneComponents};
use doa_core::tracker::{doa_error_deg, frame_recall, postprocess_doa, segment_events, smooth_noas};

use crate::formats::{
    eps_mode_from_str, write_predictions, write_trace, LabelsFile, MetricsFile, ParamsFile,
    SceneSpecFile, SCHEMA_VERSION,
};
use crate::wav::{component_path, read_wav4, write_wav4, COMPONENT_TAGS};

pub fn synth(
    spec_path: &Path,
    out_wav: &Path,
    out_labels: &Path,
    config_of: impl Fn(u32) -> StftConfig,
) -> Result<()> {
    let file = SceneSpecFile::load(spec_path)?;
    let spec = file.to_spec();
    let comp = synth_scene(&spec).context("synthesizing scene")?;
    write_wav4(out_wav, &comp.mixture, comp.sample_rate)?;
    for (tag, signal) in [
        ("direct1", comp.slot_direct(0)),
        ("direct2", comp.slot_direct(1)),
        ("noise", comp.noise.clone()),
        ("epsilon", comp.epsilon.clone()),
    ] {
        write_wav4(&component_path(out_wav, tag), &signal, comp.sample_rate)?;
    }
    let config = config_of(comp.sample_rate);
    let track = frame_labels(&spec, &config).context("computing frame labels")?;
    LabelsFile::build(&spec, &track, &config).save(out_labels)?;
    println!(
        "wrote {} ({} samples at {} Hz), {} component files, labels {} ({} frames)",
        out_wav.display(),
        comp.n_samples(),
        comp.sample_rate,
        COMPONENT_TAGS.len(),
        out_labels.display(),
        track.n_frames(),
    );
    Ok(())
}

/// Read the component WAVs written by synth back into a
/// [`SceneComponents`] so the oracle refiner can run on files alone.
fn components_from_files(in_wav: &Path, mixture: ndarray::Array2<f64>, rate: u32) -> Result<SceneComponents> {
    let missing: Vec<String> = COMPONENT_TAGS
        .iter()
        .map(|tag| component_path(in_wav, tag))
        .filter(|p| !p.exists())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        bail!(
            "the oracle refiner needs the component files written by synth next to the input; \
             missing: {}",
            missing.join(", ")
        );
    }
    let mut parts = Vec::with_capacity(4);
    for tag in COMPONENT_TAGS {
        let path = component_path(in_wav, tag);
        let (signal, part_rate) = read_wav4(&path)?;
        if part_rate != rate || signal.ncols() != mixture.ncols() {
            bail!("{}: component does not match the mixture's rate and length", path.display());
        }
        parts.push(signal);
    }
    let epsilon = parts.pop().unwrap();
    let noise = parts.pop().unwrap();
    let direct2 = parts.pop().unwrap();
    let direct1 = parts.pop().unwrap();
    Ok(SceneComponents {
        direct: vec![direct1, direct2],
        slots: vec![0, 1],
        noise,
        epsilon,
        mixture,
        sample_rate: rate,
    })
}

enum RefinerChoice {
    Identity,
    LogPower,
    Angle,
    Oracle(SceneComponents),
    Fitted(FittedRefiner),
}

#[allow(clippy::too_many_arguments)]
pub fn estimate(
    in_wav: &Path,
    out_csv: &Path,
    refiner_arg: &str,
    noas_arg: &str,
    postprocess: bool,
    smooth_window: usize,
    grid_step: f64,
    config_of: impl Fn(u32) -> StftConfig,
) -> Result<()> {
    let (samples, rate) = read_wav4(in_wav)?;
    if rate != 48000 {
        bail!("{}: expected a 48000 Hz input, got {} Hz", in_wav.display(), rate);
    }
    let config = config_of(rate);
    let spec = stft(&samples, &config).context("analyzing input")?;
    let n_frames = spec.n_frames();

    let choice = match refiner_arg {
        "identity" => RefinerChoice::Identity,
        "logpower" => RefinerChoice::LogPower,
        "angle" => RefinerChoice::Angle,
        "oracle" => RefinerChoice::Oracle(components_from_files(in_wav, samples.clone(), rate)?),
        other => match other.split_once(':') {
            Some(("fitted", path)) => {
                let file = ParamsFile::load(Path::new(path))?;
                RefinerChoice::Fitted(FittedRefiner { params: file.to_params(), n_mels: file.n_mels })
            }
            _ => bail!(
                "unknown refiner {other:?} (expected identity, logpower, angle, oracle or fitted:PARAMS_JSON)"
            ),
        },
    };

    let noas: Vec<u8> = match noas_arg.split_once(':') {
        Some(("oracle", path)) => {
            let labels = LabelsFile::load(Path::new(path))?;
            if labels.stft_window != config.window_len || labels.stft_hop != config.hop {
                bail!(
                    "labels {path} were written for STFT {}x{}, but this run uses {}x{}",
                    labels.stft_window,
                    labels.stft_hop,
                    config.window_len,
                    config.hop
                );
            }
            if labels.n_frames != n_frames {
                bail!("labels {path} cover {} frames, input has {n_frames}", labels.n_frames);
            }
            labels.noas
        }
        Some(("fixed", n)) => {
            let n: u8 = n.parse().with_context(|| format!("bad fixed source count {n:?}"))?;
            if n > 2 {
                bail!("fixed source count must be 0, 1 or 2, got {n}");
            }
            vec![n; n_frames]
        }
        None if noas_arg == "music" => {
            let bins = band_bins(&config, 200.0, 8000.0);
            let mut counts = Vec::with_capacity(n_frames);
            for t in 0..n_frames {
                let cov = spatial_covariance(&spec, bins.clone(), t..t + 1)?;
                let (evals, _) = hermitian_eig(&cov)?;
                counts.push(eigen_source_count(&evals, 0.1, 1e-12, 2));
            }
            counts
        }
        _ => bail!(
            "unknown source-count mode {noas_arg:?} (expected oracle:LABELS_JSON, music or fixed:N)"
        ),
    };

    let track = match &choice {
        RefinerChoice::Identity => estimate_track(&spec, &IdentityRefiner, &noas)?,
        RefinerChoice::LogPower => estimate_track(&spec, &LogPowerRefiner::default(), &noas)?,
        RefinerChoice::Angle => estimate_track(&spec, &AngleRefiner::default(), &noas)?,
        RefinerChoice::Oracle(comp) => {
            let refiner = OracleRefiner { components: comp };
            estimate_track(&spec, &refiner, &noas)?
        }
        RefinerChoice::Fitted(refiner) => estimate_track(&spec, refiner, &noas)?,
    };

    let track = if postprocess {
        let smoothed = smooth_noas(&track.noas_vec(), smooth_window)?;
        let events = segment_events(&smoothed);
        postprocess_doa(&track, &events, grid_step)?
    } else {
        track
    };

    write_predictions(out_csv, &track, &config)?;
    println!("wrote {} ({} frames)", out_csv.display(), track.n_frames());
    Ok(())
}

pub fn eval(pred_csv: &Path, labels_path: &Path, out_json: &Path) -> Result<()> {
    let pred = crate::formats::read_predictions(pred_csv)?;
    let labels = LabelsFile::load(labels_path)?;
    let truth = labels.to_track();
    if pred.n_frames() != truth.n_frames() {
        bail!(
            "prediction covers {} frames, labels {} — align the STFT settings",
            pred.n_frames(),
            truth.n_frames()
        );
    }
    let metrics = MetricsFile {
        schema_version: SCHEMA_VERSION.to_string(),
        doa_error_deg: doa_error_deg(&pred, &truth)?,
        frame_recall: frame_recall(&pred.noas_vec(), &truth.noas_vec())?,
        n_frames: truth.n_frames(),
        n_events: segment_events(&truth.noas_vec()).len(),
    };
    metrics.save(out_json)?;
    println!(
        "doa_error_deg {:.4}  frame_recall {:.4}  ({} frames, {} events)",
        metrics.doa_error_deg, metrics.frame_recall, metrics.n_frames, metrics.n_events
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn fit(
    scene_paths: &[std::path::PathBuf],
    out_params: &Path,
    out_trace: &Path,
    steps: usize,
    learning_rate: f64,
    eps_arg: &str,
    n_mels: usize,
    lambda1: f64,
    lambda2: f64,
    seed: u64,
    config_of: impl Fn(u32) -> StftConfig,
) -> Result<()> {
    let eps_mode = eps_mode_from_str(eps_arg)?;
    let started = Instant::now();
    let mut scenes = Vec::with_capacity(scene_paths.len());
    for path in scene_paths {
        let file = SceneSpecFile::load(path)?;
        let spec = file.to_spec();
        let comp = synth_scene(&spec).with_context(|| format!("synthesizing {}", path.display()))?;
        let config = config_of(comp.sample_rate);
        let labels = frame_labels(&spec, &config)?;
        let scene = FitScene::prepare(&comp, &labels, &config, n_mels, eps_mode)
            .with_context(|| format!("preparing {}", path.display()))?;
        scenes.push(scene);
    }
    let weights = LossWeights { lambda1, lambda2 };
    let opt = OptimConfig { steps, learning_rate, ..OptimConfig::default() };
    let (params, trace) = fit_refiner(&scenes, &weights, &opt, seed).context("fitting")?;
    ParamsFile::build(&params, n_mels, eps_mode, seed, lambda1, lambda2).save(out_params)?;
    write_trace(out_trace, &trace)?;
    match (trace.first(), trace.last()) {
        (Some(first), Some(last)) => println!(
            "fit {} scene(s), {} steps in {:.1} s: total {:.4} -> {:.4}, direction loss {:.4} -> {:.4}",
            scenes.len(),
            trace.len(),
            started.elapsed().as_secs_f64(),
            first.total,
            last.total,
            first.doa,
            last.doa,
        ),
        _ => println!("fit {} scene(s), 0 steps: parameters are the seeded initialization", scenes.len()),
    }
    println!("wrote {} and {}", out_params.display(), out_trace.display());
    Ok(())
}

pub fn gradcheck(
    seed: u64,
    n_draws: usize,
    lambda1: f64,
    lambda2: f64,
    corrupt_gradient: bool,
) -> Result<i32> {
    if n_draws == 0 {
        bail!("need at least one draw");
    }
    let weights = LossWeights { lambda1, lambda2 };
    let tweak: &dyn Fn(&mut [f64]) = if corrupt_gradient {
        &|g: &mut [f64]| g[0] += 1.0
    } else {
        &|_: &mut [f64]| {}
    };
    let mut max_err = 0.0f64;
    for draw in 0..n_draws as u64 {
        let scene = synthetic_check_scene(seed.wrapping_add(2 * draw), 12, 9);
        let params = random_params(seed.wrapping_add(2 * draw + 1), 0.5);
        let check = gradient_check_with(&params, &[scene], &weights, 1e-5, tweak)?;
        println!(
            "draw {draw}: max relative error {:.3e} ({} coordinates, {} excluded as unstable)",
            check.max_rel_err, check.checked, check.skipped_unstable
        );
        max_err = max_err.max(check.max_rel_err);
    }
    println!("max relative gradient error: {max_err:.3e}");
    if max_err > 1e-4 {
        eprintln!("gradient check FAILED (tolerance 1e-4)");
        return Ok(1);
    }
    Ok(0)
}
