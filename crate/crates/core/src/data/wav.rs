//! RIFF/WAVE reading and writing for 16-bit PCM and 32-bit float samples.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// On-disk sample encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WavFormat {
    Pcm16,
    #[default]
    Float32,
}

const PCM16_SCALE: f64 = 32_768.0;

fn wav_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(source) => Error::io(path, source),
        hound::Error::FormatError(msg) => Error::format("WAV", format!("{}: RIFF/fmt/data chunk: {msg}", path.display())),
        hound::Error::Unsupported => Error::Unsupported {
            format: "WAV",
            msg: format!("{}: fmt chunk declares an unsupported encoding", path.display()),
        },
        other => Error::format("WAV", format!("{}: {other}", path.display())),
    }
}

/// Reads an `N×C` signal and its sample rate. PCM samples are scaled to
/// `[-1, 1)`.
pub fn read_wav(path: impl AsRef<Path>) -> Result<(Tensor<f64>, u32)> {
    let path = path.as_ref();
    let reader = WavReader::open(path).map_err(|e| wav_error(path, e))?;
    let spec = reader.spec();
    let c = spec.channels as usize;
    let data: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / PCM16_SCALE))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_error(path, e))?,
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_error(path, e))?,
        (fmt, bits) => {
            return Err(Error::Unsupported {
                format: "WAV",
                msg: format!("{}: fmt chunk declares {bits}-bit {fmt:?} samples", path.display()),
            })
        }
    };
    if c == 0 || data.is_empty() || data.len() % c != 0 {
        return Err(Error::format("WAV", format!("{}: data chunk holds no complete frames", path.display())));
    }
    Ok((Tensor::new(&[data.len() / c, c], data)?, spec.sample_rate))
}

/// Writes an `N×C` signal. PCM output is rounded and clipped.
pub fn write_wav(path: impl AsRef<Path>, signal: &Tensor<f64>, sample_rate: u32, format: WavFormat) -> Result<()> {
    let path = path.as_ref();
    if signal.rank() != 2 {
        return Err(Error::invalid_shape("write_wav", format!("expected N×C, got {:?}", signal.shape())));
    }
    let channels = u16::try_from(signal.shape()[1])
        .map_err(|_| Error::invalid_shape("write_wav", "too many channels"))?;
    let spec = WavSpec {
        channels,
        sample_rate,
        bits_per_sample: match format {
            WavFormat::Pcm16 => 16,
            WavFormat::Float32 => 32,
        },
        sample_format: match format {
            WavFormat::Pcm16 => SampleFormat::Int,
            WavFormat::Float32 => SampleFormat::Float,
        },
    };
    let mut w = WavWriter::create(path, spec).map_err(|e| wav_error(path, e))?;
    for &v in signal.data() {
        let r = match format {
            WavFormat::Pcm16 => w.write_sample((v * PCM16_SCALE).round().clamp(-32_768.0, 32_767.0) as i16),
            WavFormat::Float32 => w.write_sample(v as f32),
        };
        r.map_err(|e| wav_error(path, e))?;
    }
    w.finalize().map_err(|e| wav_error(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn signal() -> Tensor<f64> {
        Tensor::from_fn(&[100, 6], |i| ((i as f64) * 0.37).sin() * 0.9)
    }

    #[test]
    fn float_round_trip_is_exact_for_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let x = signal().map(|v| v as f32 as f64);
        let p = dir.path().join("a.wav");
        write_wav(&p, &x, 16_000, WavFormat::Float32).unwrap();
        let (y, rate) = read_wav(&p).unwrap();
        assert_eq!(rate, 16_000);
        assert_eq!(y, x);
    }

    #[test]
    fn pcm16_round_trip_within_one_lsb() {
        let dir = tempfile::tempdir().unwrap();
        let x = signal();
        let p = dir.path().join("b.wav");
        write_wav(&p, &x, 16_000, WavFormat::Pcm16).unwrap();
        let (y, _) = read_wav(&p).unwrap();
        assert_eq!(y.shape(), &[100, 6]);
        let err = x.zip_map(&y, |a, b| (a - b).abs()).unwrap().max_abs();
        assert!(err <= 1.0 / 32_768.0);
    }

    #[test]
    fn garbage_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.wav");
        std::fs::write(&p, b"RIFX0000WAVEjunk").unwrap();
        let err = read_wav(&p).unwrap_err().to_string();
        assert!(err.contains("chunk"), "{err}");
    }
}
