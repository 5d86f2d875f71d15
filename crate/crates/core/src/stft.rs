//! STFT encoder and overlap-add decoder.
//!
//! The encoder pads each channel with `pad` zeros at both ends, frames it with
//! a periodic Hann window and keeps bins `0..W/2` in a stacked complex tensor
//! of shape `F×T×2C` (`F = W/2`). The Nyquist bin is kept out of band so the
//! frequency extent stays divisible by powers of two. The decoder inverts the
//! real DFT of each frame, overlap-adds with the analysis window and divides
//! by the summed squared window, which reconstructs the input exactly.

use std::sync::Arc;

use num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::autodiff::LinearOp;
use crate::complex::StackedComplex;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Framing parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    pub window_len: usize,
    pub hop: usize,
    pub pad: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            window_len: 1024,
            hop: 256,
            pad: 1024,
        }
    }
}

impl CodecConfig {
    /// Window of `2F` samples, hop of a quarter window, one window of padding.
    pub fn for_bins(freq_bins: usize) -> Self {
        let window_len = 2 * freq_bins;
        Self {
            window_len,
            hop: window_len / 4,
            pad: window_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_len < 4 || self.window_len % 2 != 0 {
            return Err(Error::config("codec.window_len", "must be even and at least 4"));
        }
        if self.hop == 0 || self.window_len % self.hop != 0 {
            return Err(Error::config("codec.hop", "must divide the window length"));
        }
        if self.window_len / self.hop < 2 {
            return Err(Error::config("codec.hop", "frames must overlap"));
        }
        Ok(())
    }

    /// In-band frequency bins `F`.
    pub fn freq_bins(&self) -> usize {
        self.window_len / 2
    }

    /// Number of frames produced for a signal of `n` samples.
    pub fn frames(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.window_len) / self.hop + 1
    }

    /// Signal length that yields exactly `frames` frames with no remainder.
    /// `None` when that length would be shorter than one window.
    pub fn samples_for_frames(&self, frames: usize) -> Option<usize> {
        let n = (frames.checked_sub(1)? * self.hop + self.window_len).checked_sub(2 * self.pad)?;
        (n >= self.window_len).then_some(n)
    }

    /// Periodic Hann window.
    pub fn window<T: Real>(&self) -> Vec<T> {
        let n = self.window_len as f64;
        (0..self.window_len)
            .map(|i| T::of(0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n).cos()))
            .collect()
    }
}

/// Multichannel spectrogram with the Nyquist bin kept out of band.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram<T> {
    /// Bins `0..F` as `F×T×2C`.
    pub stacked: StackedComplex<T>,
    /// Bin `F` as `1×T×2C`.
    pub nyquist: StackedComplex<T>,
    pub original_length: usize,
}

impl<T: Real> Spectrogram<T> {
    pub fn freq_bins(&self) -> usize {
        self.stacked.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.stacked.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.stacked.channels()
    }

    /// All bins including Nyquist as one `(F+1)×T×2C` tensor.
    pub fn full(&self) -> Tensor<T> {
        Tensor::concat(&[self.stacked.tensor(), self.nyquist.tensor()], 0).expect("matching frames")
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            stacked: StackedComplex::zeros(self.stacked.shape()).expect("even"),
            nyquist: StackedComplex::zeros(self.nyquist.shape()).expect("even"),
            original_length: self.original_length,
        }
    }
}

/// Planned forward and inverse transforms for one configuration.
#[derive(Clone)]
pub struct StftCodec<T> {
    cfg: CodecConfig,
    window: Vec<T>,
    fft: Arc<dyn Fft<T>>,
    ifft: Arc<dyn Fft<T>>,
}

impl<T: Real> StftCodec<T> {
    pub fn new(cfg: CodecConfig) -> Result<Self> {
        cfg.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            cfg,
            window: cfg.window(),
            fft: planner.plan_fft_forward(cfg.window_len),
            ifft: planner.plan_fft_inverse(cfg.window_len),
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.cfg
    }

    pub fn window(&self) -> &[T] {
        &self.window
    }

    fn check_length(&self, n: usize) -> Result<()> {
        if n < self.cfg.window_len {
            return Err(Error::invalid_shape(
                "stft",
                format!("signal of {n} samples is shorter than the {}-sample window", self.cfg.window_len),
            ));
        }
        Ok(())
    }

    /// Forward transform of an `N×C` signal.
    pub fn stft(&self, signal: &Tensor<T>) -> Result<Spectrogram<T>> {
        if signal.rank() != 2 {
            return Err(Error::invalid_shape("stft", format!("expected N×C signal, got {:?}", signal.shape())));
        }
        let (n, c) = (signal.shape()[0], signal.shape()[1]);
        self.check_length(n)?;
        let w = self.cfg.window_len;
        let f = self.cfg.freq_bins();
        let t_frames = self.cfg.frames(n);
        let mut stacked = vec![T::zero(); f * t_frames * 2 * c];
        let mut nyquist = vec![T::zero(); t_frames * 2 * c];
        let mut buf = vec![Complex::new(T::zero(), T::zero()); w];
        let x = signal.data();
        for ch in 0..c {
            for t in 0..t_frames {
                for (i, slot) in buf.iter_mut().enumerate() {
                    // position in the padded signal
                    let p = t * self.cfg.hop + i;
                    let v = p
                        .checked_sub(self.cfg.pad)
                        .filter(|&s| s < n)
                        .map_or(T::zero(), |s| x[s * c + ch]);
                    *slot = Complex::new(v * self.window[i], T::zero());
                }
                self.fft.process(&mut buf);
                for (k, z) in buf.iter().take(f).enumerate() {
                    let base = (k * t_frames + t) * 2 * c;
                    stacked[base + ch] = z.re;
                    stacked[base + c + ch] = z.im;
                }
                nyquist[t * 2 * c + ch] = buf[f].re;
                nyquist[t * 2 * c + c + ch] = buf[f].im;
            }
        }
        Ok(Spectrogram {
            stacked: StackedComplex::new(Tensor::from_parts(vec![f, t_frames, 2 * c], stacked))?,
            nyquist: StackedComplex::new(Tensor::from_parts(vec![1, t_frames, 2 * c], nyquist))?,
            original_length: n,
        })
    }

    /// Inverse transform back to an `N×C` signal.
    pub fn istft(&self, spec: &Spectrogram<T>) -> Result<Tensor<T>> {
        let plan = self.synthesis(spec.frames(), spec.channels(), spec.original_length)?;
        Ok(plan.reconstruct(spec.stacked.tensor().data(), Some(spec.nyquist.tensor().data())))
    }

    /// The decoder as a fixed linear map from in-band bins `F×T×2C` to an
    /// `N×C` signal, suitable for recording on a tape.
    pub fn synthesis(&self, frames: usize, channels: usize, length: usize) -> Result<Synthesis<T>> {
        self.check_length(length)?;
        if self.cfg.frames(length) != frames {
            return Err(Error::invalid_shape(
                "istft",
                format!("{frames} frames do not match a {length}-sample signal"),
            ));
        }
        let padded = (frames - 1) * self.cfg.hop + self.cfg.window_len;
        let mut norm = vec![T::zero(); padded];
        for t in 0..frames {
            for (i, &wv) in self.window.iter().enumerate() {
                norm[t * self.cfg.hop + i] += wv * wv;
            }
        }
        let inv_norm = norm
            .into_iter()
            .map(|v| if v > T::zero() { v.recip() } else { T::zero() })
            .collect();
        Ok(Synthesis {
            codec: self.clone(),
            frames,
            channels,
            length,
            inv_norm,
        })
    }
}

/// Overlap-add synthesis for a fixed signal geometry.
#[derive(Clone)]
pub struct Synthesis<T> {
    codec: StftCodec<T>,
    frames: usize,
    channels: usize,
    length: usize,
    /// Reciprocal summed squared window over the padded signal (0 where uncovered).
    inv_norm: Vec<T>,
}

impl<T: Real> Synthesis<T> {
    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn length(&self) -> usize {
        self.length
    }

    /// Reconstructs from in-band bins (`F×T×2C`) and an optional Nyquist row
    /// (`1×T×2C`). Imaginary parts of the DC and Nyquist bins are ignored, as
    /// for any real inverse DFT.
    pub fn reconstruct(&self, inband: &[T], nyquist: Option<&[T]>) -> Tensor<T> {
        let cfg = &self.codec.cfg;
        let (w, f, c, tn) = (cfg.window_len, cfg.freq_bins(), self.channels, self.frames);
        let scale = T::of(1.0 / w as f64);
        let mut out = vec![T::zero(); self.length * c];
        let mut buf = vec![Complex::new(T::zero(), T::zero()); w];
        for ch in 0..c {
            for t in 0..tn {
                for k in 0..f {
                    let base = (k * tn + t) * 2 * c;
                    buf[k] = Complex::new(inband[base + ch], inband[base + c + ch]);
                }
                buf[0].im = T::zero();
                buf[f] = Complex::new(nyquist.map_or(T::zero(), |nq| nq[t * 2 * c + ch]), T::zero());
                for k in 1..f {
                    buf[w - k] = buf[k].conj();
                }
                self.codec.ifft.process(&mut buf);
                for (i, z) in buf.iter().enumerate() {
                    let p = t * cfg.hop + i;
                    let Some(s) = p.checked_sub(cfg.pad).filter(|&s| s < self.length) else {
                        continue;
                    };
                    out[s * c + ch] += z.re * scale * self.codec.window[i] * self.inv_norm[p];
                }
            }
        }
        Tensor::from_parts(vec![self.length, c], out)
    }

    /// Transpose of [`Synthesis::reconstruct`] restricted to in-band bins.
    pub fn reconstruct_adjoint(&self, grad: &[T]) -> Vec<T> {
        let cfg = &self.codec.cfg;
        let (w, f, c, tn) = (cfg.window_len, cfg.freq_bins(), self.channels, self.frames);
        let inv_w = T::of(1.0 / w as f64);
        let two_inv_w = T::of(2.0 / w as f64);
        let mut out = vec![T::zero(); f * tn * 2 * c];
        let mut buf = vec![Complex::new(T::zero(), T::zero()); w];
        for ch in 0..c {
            for t in 0..tn {
                for (i, slot) in buf.iter_mut().enumerate() {
                    let p = t * cfg.hop + i;
                    let v = p
                        .checked_sub(cfg.pad)
                        .filter(|&s| s < self.length)
                        .map_or(T::zero(), |s| grad[s * c + ch] * self.inv_norm[p] * self.codec.window[i]);
                    *slot = Complex::new(v, T::zero());
                }
                self.codec.fft.process(&mut buf);
                let base0 = t * 2 * c;
                out[base0 + ch] = buf[0].re * inv_w;
                for (k, z) in buf.iter().enumerate().take(f).skip(1) {
                    let base = (k * tn + t) * 2 * c;
                    out[base + ch] = z.re * two_inv_w;
                    out[base + c + ch] = z.im * two_inv_w;
                }
            }
        }
        out
    }
}

impl<T: Real> LinearOp<T> for Synthesis<T> {
    fn name(&self) -> &'static str {
        "istft"
    }

    fn input_shape(&self) -> Vec<usize> {
        vec![self.codec.cfg.freq_bins(), self.frames, 2 * self.channels]
    }

    fn output_shape(&self) -> Vec<usize> {
        vec![self.length, self.channels]
    }

    fn apply(&self, x: &[T]) -> Vec<T> {
        self.reconstruct(x, None).into_data()
    }

    fn adjoint(&self, g: &[T]) -> Vec<T> {
        self.reconstruct_adjoint(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_signal(n: usize, c: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[n, c], |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn paper_defaults_give_eighty_frames() {
        let cfg = CodecConfig::default();
        assert_eq!(cfg.frames(19_200), 80);
        assert_eq!(cfg.samples_for_frames(80), Some(19_200));
        let codec = StftCodec::<f64>::new(cfg).unwrap();
        let spec = codec.stft(&Tensor::zeros(&[19_200, 6])).unwrap();
        assert_eq!(spec.stacked.shape(), &[512, 80, 12]);
        assert_eq!(spec.nyquist.shape(), &[1, 80, 12]);
        assert!(spec.stacked.tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tiny_geometry() {
        let cfg = CodecConfig::for_bins(64);
        assert_eq!(cfg.samples_for_frames(16), Some(352));
        assert_eq!(cfg.frames(352), 16);
    }

    #[test]
    fn rejects_short_signal() {
        let codec = StftCodec::<f64>::new(CodecConfig::default()).unwrap();
        assert!(codec.stft(&Tensor::zeros(&[1000, 1])).is_err());
    }

    #[test]
    fn rejects_bad_config() {
        let bad = CodecConfig {
            window_len: 1024,
            hop: 300,
            pad: 1024,
        };
        assert!(StftCodec::<f64>::new(bad).is_err());
    }

    #[test]
    fn round_trip_is_exact() {
        let codec = StftCodec::<f64>::new(CodecConfig::for_bins(64)).unwrap();
        for (seed, n) in [(1, 352), (2, 1000), (3, 4096)] {
            let x = random_signal(n, 3, seed);
            let y = codec.istft(&codec.stft(&x).unwrap()).unwrap();
            let err = x.zip_map(&y, |a, b| a - b).unwrap();
            let rel = (err.dot(&err) / x.dot(&x)).sqrt();
            assert!(rel < 1e-12, "n={n}: {rel}");
        }
    }

    #[test]
    fn synthesis_adjoint_identity() {
        let codec = StftCodec::<f64>::new(CodecConfig::for_bins(32)).unwrap();
        let n = 300;
        let frames = codec.config().frames(n);
        let syn = codec.synthesis(frames, 2, n).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..32 * frames * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..n * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ax = syn.apply(&x);
        let atg = syn.adjoint(&g);
        let lhs: f64 = ax.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&atg).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }
}
