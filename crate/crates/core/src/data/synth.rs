//! Seeded generators for speech-like sources, array propagation, noise and
//! mixing at a target SNR.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SAMPLE_RATE: u32 = 16_000;

/// Taps of the fractional-delay interpolator.
pub const SINC_TAPS: usize = 32;

/// Per-channel delay (samples) and linear gain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    pub delays: Vec<f64>,
    pub gains: Vec<f64>,
}

impl ArrayGeometry {
    pub fn new(delays: Vec<f64>, gains: Vec<f64>) -> Result<Self> {
        if delays.is_empty() || delays.len() != gains.len() {
            return Err(Error::config("geometry", "needs one delay and one gain per channel"));
        }
        if delays.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(Error::config("geometry.delays", "delays must be finite and non-negative"));
        }
        if !delays.contains(&0.0) {
            return Err(Error::config("geometry.delays", "one channel must have zero delay"));
        }
        Ok(Self { delays, gains })
    }

    /// All channels identical.
    pub fn coincident(channels: usize) -> Self {
        Self {
            delays: vec![0.0; channels],
            gains: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.delays.len()
    }

    /// Channel 0 is the zero-delay reference; the others get delays in
    /// `[0, max_delay]` and gains in `[0.5, 1]`.
    pub fn random(channels: usize, max_delay: f64, rng: &mut impl Rng) -> Self {
        let mut delays = vec![0.0];
        let mut gains = vec![1.0];
        for _ in 1..channels {
            delays.push(rng.random_range(0.0..=max_delay));
            gains.push(rng.random_range(0.5..=1.0));
        }
        Self { delays, gains }
    }

    /// Short textual id recorded in sample metadata.
    pub fn id(&self) -> String {
        self.delays
            .iter()
            .zip(&self.gains)
            .map(|(d, g)| format!("{d:.2}@{g:.2}"))
            .collect::<Vec<_>>()
            .join(";")
    }
}

/// Provenance of a generated or loaded sample.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SampleMeta {
    pub seed: u64,
    /// Achieved SNR per channel in dB (`+∞` for silent noise).
    pub snr_db: Vec<f64>,
    pub geometry: String,
}

/// Aligned speech, noise and mixture, each `N×C`, with `mixture = speech + noise`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSample {
    pub speech: Tensor<f64>,
    pub noise: Tensor<f64>,
    pub mixture: Tensor<f64>,
    pub sample_rate: u32,
    pub meta: SampleMeta,
}

impl MixtureSample {
    /// Builds a sample, forming the mixture as `speech + noise`.
    pub fn new(speech: Tensor<f64>, noise: Tensor<f64>, sample_rate: u32, meta: SampleMeta) -> Result<Self> {
        let mixture = speech.zip_map(&noise, |s, n| s + n)?;
        if speech.rank() != 2 {
            return Err(Error::invalid_shape("mixture sample", format!("expected N×C, got {:?}", speech.shape())));
        }
        Ok(Self {
            speech,
            noise,
            mixture,
            sample_rate,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.speech.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.speech.shape()[1]
    }
}

/// Column `ch` of an `N×C` tensor.
pub fn channel(x: &Tensor<f64>, ch: usize) -> Vec<f64> {
    let c = x.shape()[1];
    x.data().iter().skip(ch).step_by(c).copied().collect()
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// A speech-like mono signal: syllables of amplitude-modulated harmonics on a
/// drifting 80–300 Hz fundamental with two formant-like emphases, plus
/// low-pass noise bursts at syllable onsets. Peak-normalised to 1.
pub fn gen_source(duration_s: f64, sample_rate: u32, seed: u64) -> Result<Vec<f64>> {
    if !(duration_s > 0.0) {
        return Err(Error::config("duration_s", "must be positive"));
    }
    let fs = sample_rate as f64;
    let n = (duration_s * fs).round() as usize;
    if n == 0 {
        return Err(Error::config("duration_s", "shorter than one sample"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0.0; n];
    let base_f0: f64 = rng.random_range(100.0..220.0);
    let vib_rate: f64 = rng.random_range(0.3..1.2);
    let vib_phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let mut pos = rng.random_range(0..(n / 10).max(1));
    while pos < n {
        let len = (rng.random_range(0.12..0.30) * fs) as usize;
        let gap = (rng.random_range(0.03..0.12) * fs) as usize;
        let f1: f64 = rng.random_range(350.0..850.0);
        let f2: f64 = rng.random_range(900.0..2300.0);
        let level: f64 = rng.random_range(0.4..1.0);
        let end = (pos + len).min(n);
        let mut phase = 0.0f64;
        let mut burst_state = 0.0f64;
        let burst_len = (0.012 * fs) as usize;
        for i in pos..end {
            let t = i as f64 / fs;
            let local = (i - pos) as f64 / len as f64;
            let f0 = (base_f0 + 35.0 * (std::f64::consts::TAU * vib_rate * t + vib_phase).sin() - 30.0 * local)
                .clamp(80.0, 300.0);
            phase += std::f64::consts::TAU * f0 / fs;
            let env = (std::f64::consts::PI * local).sin().powi(2);
            let mut v = 0.0;
            let mut k = 1.0;
            while k * f0 < 3_800.0 {
                let f = k * f0;
                let emphasis = 1.0 + 2.0 * (-((f - f1) / 220.0).powi(2)).exp() + (-((f - f2) / 320.0).powi(2)).exp();
                v += emphasis / k * (k * phase).sin();
                k += 1.0;
            }
            out[i] += level * env * v;
            if i - pos < burst_len {
                let white: f64 = rng.sample(StandardNormal);
                burst_state += 0.25 * (white - burst_state);
                let decay = 1.0 - (i - pos) as f64 / burst_len as f64;
                out[i] += 0.6 * level * decay * burst_state;
            }
        }
        pos = end + gap;
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        for v in &mut out {
            *v /= peak;
        }
    }
    Ok(out)
}

/// Windowed-sinc fractional delay taps for fractional part `frac ∈ (0, 1)`,
/// applied at offsets `-15..=16`, normalised to unit DC gain.
fn sinc_taps(frac: f64) -> [f64; SINC_TAPS] {
    let half = (SINC_TAPS / 2) as f64;
    let mut taps = [0.0; SINC_TAPS];
    for (i, tap) in taps.iter_mut().enumerate() {
        let u = i as f64 - (half - 1.0) - frac;
        let sinc = if u == 0.0 {
            1.0
        } else {
            (std::f64::consts::PI * u).sin() / (std::f64::consts::PI * u)
        };
        let w = 0.5 + 0.5 * (std::f64::consts::PI * u / half).cos();
        *tap = sinc * w;
    }
    let total: f64 = taps.iter().sum();
    taps.map(|t| t / total)
}

/// `gain · source(t − delay)` for one delay, keeping the source length.
pub fn delay_signal(source: &[f64], delay: f64, gain: f64) -> Result<Vec<f64>> {
    let n = source.len();
    if !(delay >= 0.0) || delay >= n as f64 {
        return Err(Error::config("geometry.delays", format!("delay {delay} is outside [0, {n})")));
    }
    let k = delay.floor() as usize;
    let frac = delay - k as f64;
    let mut out = vec![0.0; n];
    if frac == 0.0 {
        for i in k..n {
            out[i] = gain * source[i - k];
        }
        return Ok(out);
    }
    let taps = sinc_taps(frac);
    let lead = SINC_TAPS as isize / 2 - 1;
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (j, &h) in taps.iter().enumerate() {
            let m = i as isize - k as isize - (j as isize - lead);
            if m >= 0 && (m as usize) < n {
                acc += h * source[m as usize];
            }
        }
        *o = gain * acc;
    }
    Ok(out)
}

/// Multichannel image of a mono source through `geometry`.
pub fn propagate(source: &[f64], geometry: &ArrayGeometry) -> Result<Tensor<f64>> {
    let n = source.len();
    let c = geometry.channels();
    let mut data = vec![0.0; n * c];
    for (ch, (&d, &g)) in geometry.delays.iter().zip(&geometry.gains).enumerate() {
        for (i, v) in delay_signal(source, d, g)?.into_iter().enumerate() {
            data[i * c + ch] = v;
        }
    }
    Tensor::new(&[n, c], data)
}

/// Noise spatial structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    /// Independent pink noise per channel plus a common pink component
    /// carrying 30% of the power.
    Diffuse,
    /// A single pink source propagated through a geometry.
    Directional(ArrayGeometry),
}

/// Unit-RMS pink noise (Kellet's economy filter on white Gaussian noise).
pub fn pink_noise(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
    let mut out: Vec<f64> = (0..n)
        .map(|_| {
            let w: f64 = rng.sample(StandardNormal);
            b0 = 0.99765 * b0 + w * 0.0990460;
            b1 = 0.96300 * b1 + w * 0.2965164;
            b2 = 0.57000 * b2 + w * 1.0526913;
            b0 + b1 + b2 + w * 0.1848
        })
        .collect();
    let rms = (energy(&out) / n.max(1) as f64).sqrt();
    if rms > 0.0 {
        for v in &mut out {
            *v /= rms;
        }
    }
    out
}

/// `N×C` noise of the given kind.
pub fn gen_noise(duration_s: f64, sample_rate: u32, channels: usize, kind: &NoiseKind, seed: u64) -> Result<Tensor<f64>> {
    let n = (duration_s * sample_rate as f64).round() as usize;
    if n == 0 || channels == 0 {
        return Err(Error::config("noise", "needs a positive duration and channel count"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        NoiseKind::Diffuse => {
            let common = pink_noise(n, &mut rng);
            let (a, b) = (0.7f64.sqrt(), 0.3f64.sqrt());
            let mut data = vec![0.0; n * channels];
            for ch in 0..channels {
                let own = pink_noise(n, &mut rng);
                for i in 0..n {
                    data[i * channels + ch] = a * own[i] + b * common[i];
                }
            }
            Tensor::new(&[n, channels], data)
        }
        NoiseKind::Directional(geometry) => {
            if geometry.channels() != channels {
                return Err(Error::config("noise.geometry", "channel count mismatch"));
            }
            propagate(&pink_noise(n, &mut rng), geometry)
        }
    }
}

/// Scales `noise` so the reference channel has the requested SNR (`None`
/// means infinite SNR: the noise is scaled to zero) and mixes.
pub fn mix_at_snr(
    speech: &Tensor<f64>,
    noise: &Tensor<f64>,
    snr_db: Option<f64>,
    ref_channel: usize,
    sample_rate: u32,
    mut meta: SampleMeta,
) -> Result<MixtureSample> {
    if speech.shape() != noise.shape() {
        return Err(Error::shape("mix_at_snr", speech.shape(), noise.shape()));
    }
    let c = speech.shape()[1];
    if ref_channel >= c {
        return Err(Error::config("ref_channel", format!("{ref_channel} out of range for {c} channels")));
    }
    let es = energy(&channel(speech, ref_channel));
    let en = energy(&channel(noise, ref_channel));
    if es == 0.0 || en == 0.0 {
        return Err(Error::Degenerate {
            context: "mix_at_snr",
            msg: "reference channel has zero speech or noise energy".into(),
        });
    }
    let g = match snr_db {
        Some(snr) => (es / (en * 10f64.powf(snr / 10.0))).sqrt(),
        None => 0.0,
    };
    let scaled = noise.map(|v| v * g);
    meta.snr_db = (0..c)
        .map(|ch| 10.0 * (energy(&channel(speech, ch)) / energy(&channel(&scaled, ch))).log10())
        .collect();
    MixtureSample::new(speech.clone(), scaled, sample_rate, meta)
}

/// Recipe of the attention experiment: coincident unit-gain speech, diffuse
/// noise with equal energy on every channel except `high_channel`, whose
/// noise is attenuated by `advantage_db`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySnrSpec {
    pub channels: usize,
    pub high_channel: usize,
    pub advantage_db: f64,
    /// SNR range of the other channels in dB.
    pub snr_db: [f64; 2],
    pub duration_s: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for ToySnrSpec {
    fn default() -> Self {
        Self {
            channels: 4,
            high_channel: 2,
            advantage_db: 10.0,
            snr_db: [-5.0, 5.0],
            duration_s: 1.0,
            sample_rate: SAMPLE_RATE,
            seed: 0,
        }
    }
}

impl ToySnrSpec {
    pub fn validate(&self) -> Result<()> {
        if self.channels < 2 || self.high_channel >= self.channels {
            return Err(Error::config("toy.high_channel", "needs at least two channels and a valid index"));
        }
        if !(self.snr_db[0] <= self.snr_db[1]) {
            return Err(Error::config("toy.snr_db", "needs low ≤ high"));
        }
        Ok(())
    }

    /// Utterance `index`, a pure function of the recipe and the index.
    pub fn utterance(&self, index: usize) -> Result<MixtureSample> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64 + 1);
        let source_seed: u64 = rng.random();
        let noise_seed: u64 = rng.random();
        let snr = rng.random_range(self.snr_db[0]..=self.snr_db[1]);
        let c = self.channels;
        let source = gen_source(self.duration_s, self.sample_rate, source_seed)?;
        let geometry = ArrayGeometry::coincident(c);
        let speech = propagate(&source, &geometry)?;
        let raw = gen_noise(self.duration_s, self.sample_rate, c, &NoiseKind::Diffuse, noise_seed)?;
        let target = energy(&channel(&raw, 0));
        let atten = 10f64.powf(-self.advantage_db / 20.0);
        let gains: Vec<f64> = (0..c)
            .map(|ch| {
                let g = (target / energy(&channel(&raw, ch))).sqrt();
                if ch == self.high_channel {
                    g * atten
                } else {
                    g
                }
            })
            .collect();
        let noise = Tensor::from_fn(raw.shape(), |i| raw.data()[i] * gains[i % c]);
        let ref_channel = if self.high_channel == 0 { 1 } else { 0 };
        let meta = SampleMeta {
            seed: source_seed,
            snr_db: Vec::new(),
            geometry: geometry.id(),
        };
        mix_at_snr(&speech, &noise, Some(snr), ref_channel, self.sample_rate, meta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_channel_has_the_advantage() {
        let spec = ToySnrSpec { duration_s: 0.25, ..ToySnrSpec::default() };
        let u = spec.utterance(3).unwrap();
        let snr = &u.meta.snr_db;
        for (ch, v) in snr.iter().enumerate() {
            let expect = snr[0] + if ch == 2 { 10.0 } else { 0.0 };
            assert!((v - expect).abs() < 1e-9, "{snr:?}");
        }
        assert!(ToySnrSpec { high_channel: 4, ..spec }.utterance(0).is_err());
    }

    #[test]
    fn source_is_deterministic_and_normalised() {
        let a = gen_source(0.5, SAMPLE_RATE, 3).unwrap();
        let b = gen_source(0.5, SAMPLE_RATE, 3).unwrap();
        assert_eq!(a, b);
        let peak = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((peak - 1.0).abs() < 1e-15);
        assert_ne!(a, gen_source(0.5, SAMPLE_RATE, 4).unwrap());
    }

    #[test]
    fn integer_delay_shifts() {
        let src: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let g = ArrayGeometry::new(vec![0.0, 3.0], vec![1.0, 0.5]).unwrap();
        let img = propagate(&src, &g).unwrap();
        let ch1 = channel(&img, 1);
        assert_eq!(&ch1[..3], &[0.0; 3]);
        assert_eq!(ch1[10], 0.5 * 7.0);
    }

    #[test]
    fn fractional_delay_of_a_slow_sinusoid() {
        let n = 2000;
        let w = 0.01 * std::f64::consts::TAU;
        let src: Vec<f64> = (0..n).map(|i| (w * i as f64).sin()).collect();
        let out = delay_signal(&src, 2.5, 1.0).unwrap();
        for i in 100..n - 100 {
            let want = (w * (i as f64 - 2.5)).sin();
            assert!((out[i] - want).abs() < 1e-3, "{i}: {} vs {want}", out[i]);
        }
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(ArrayGeometry::new(vec![1.0, 2.0], vec![1.0, 1.0]).is_err());
        assert!(ArrayGeometry::new(vec![0.0, -1.0], vec![1.0, 1.0]).is_err());
        assert!(delay_signal(&[1.0, 2.0], 5.0, 1.0).is_err());
    }

    #[test]
    fn zero_db_mix_balances_reference() {
        let s = propagate(&gen_source(0.25, SAMPLE_RATE, 1).unwrap(), &ArrayGeometry::coincident(2)).unwrap();
        let n = gen_noise(0.25, SAMPLE_RATE, 2, &NoiseKind::Diffuse, 2).unwrap();
        let m = mix_at_snr(&s, &n, Some(0.0), 0, SAMPLE_RATE, SampleMeta::default()).unwrap();
        assert!(m.meta.snr_db[0].abs() < 1e-9);
        let sum = m.speech.zip_map(&m.noise, |a, b| a + b).unwrap();
        assert_eq!(sum, m.mixture);
        let clean = mix_at_snr(&s, &n, None, 0, SAMPLE_RATE, SampleMeta::default()).unwrap();
        assert_eq!(clean.mixture, clean.speech);
    }
}
