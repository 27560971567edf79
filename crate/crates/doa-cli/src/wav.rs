//! Four-channel float WAV I/O and the component-file naming scheme.
//!
//! Files are 32-bit float so samples survive a write/read round trip
//! bit-exactly (after the one float64 -> float32 conversion at write
//! time). Channel order is W, X, Y, Z.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hound::{SampleFormat, WavReader, WavSpec, WavWriter};
use ndarray::Array2;

pub fn write_wav4(path: &Path, samples: &Array2<f64>, sample_rate: u32) -> Result<()> {
    if samples.nrows() != 4 {
        bail!("{}: expected 4 channels (W, X, Y, Z), got {}", path.display(), samples.nrows());
    }
    let spec = WavSpec {
        channels: 4,
        sample_rate,
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let mut writer =
        WavWriter::create(path, spec).with_context(|| format!("creating {}", path.display()))?;
    for s in 0..samples.ncols() {
        for c in 0..4 {
            writer.write_sample(samples[(c, s)] as f32)?;
        }
    }
    writer.finalize().with_context(|| format!("finalizing {}", path.display()))?;
    Ok(())
}

pub fn read_wav4(path: &Path) -> Result<(Array2<f64>, u32)> {
    let mut reader =
        WavReader::open(path).with_context(|| format!("opening {}", path.display()))?;
    let spec = reader.spec();
    if spec.channels != 4 {
        bail!("{}: expected 4 channels (W, X, Y, Z), got {}", path.display(), spec.channels);
    }
    if spec.sample_format != SampleFormat::Float || spec.bits_per_sample != 32 {
        bail!("{}: expected 32-bit float samples", path.display());
    }
    let raw: std::result::Result<Vec<f32>, _> = reader.samples::<f32>().collect();
    let raw = raw.with_context(|| format!("reading {}", path.display()))?;
    let n = raw.len() / 4;
    let mut out = Array2::zeros((4, n));
    for s in 0..n {
        for c in 0..4 {
            out[(c, s)] = raw[s * 4 + c] as f64;
        }
    }
    Ok((out, spec.sample_rate))
}

/// Path of a component file stored next to a mixture:
/// `scene.wav` -> `scene.direct1.wav` and so on.
pub fn component_path(mixture: &Path, tag: &str) -> PathBuf {
    let stem = mixture.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    let ext = mixture.extension().and_then(|s| s.to_str()).unwrap_or("wav");
    mixture.with_file_name(format!("{stem}.{tag}.{ext}"))
}

pub const COMPONENT_TAGS: [&str; 4] = ["direct1", "direct2", "noise", "epsilon"];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn component_paths_keep_directory_and_extension() {
        let p = component_path(Path::new("/tmp/run/scene.wav"), "noise");
        assert_eq!(p, Path::new("/tmp/run/scene.noise.wav"));
    }

    #[test]
    fn wav_round_trip_is_bit_exact_in_float32() {
        let dir = std::env::temp_dir().join("doa-wav-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rt.wav");
        let mut x = Array2::zeros((4, 64));
        for (i, v) in x.iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin();
        }
        write_wav4(&path, &x, 48000).unwrap();
        let (y, rate) = read_wav4(&path).unwrap();
        assert_eq!(rate, 48000);
        assert_eq!(y.dim(), (4, 64));
        for (a, b) in x.iter().zip(y.iter()) {
            assert_eq!(*a as f32, *b as f32);
        }
        std::fs::remove_file(&path).unwrap();
    }
}
