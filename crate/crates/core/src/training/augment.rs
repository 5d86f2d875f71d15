use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::MixtureSample;
use crate::error::{Error, Result};

/// Random noise attenuation and segment cropping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSpec {
    /// Attenuation range in dB, `low ≤ high ≤ 0`.
    pub attenuation_db: [f64; 2],
    /// Segment length `N` in samples.
    pub segment: usize,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            attenuation_db: [-20.0, 0.0],
            segment: 19_200,
        }
    }
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.attenuation_db;
        if !(lo <= hi && hi <= 0.0) {
            return Err(Error::config("augment.attenuation_db", "needs low ≤ high ≤ 0"));
        }
        if self.segment == 0 {
            return Err(Error::config("augment.segment", "must be positive"));
        }
        Ok(())
    }
}

/// Crops `[start, start + len)` and attenuates the noise by `gain_db`,
/// rebuilding the mixture as speech plus scaled noise.
pub fn crop_and_attenuate(sample: &MixtureSample, start: usize, len: usize, gain_db: f64) -> Result<MixtureSample> {
    let g = 10f64.powf(gain_db / 20.0);
    let speech = sample.speech.slice_axis(0, start, len)?;
    let noise = sample.noise.slice_axis(0, start, len)?.map(|v| v * g);
    let mut meta = sample.meta.clone();
    for snr in &mut meta.snr_db {
        *snr -= gain_db;
    }
    MixtureSample::new(speech, noise, sample.sample_rate, meta)
}

/// Draws an attenuation uniformly from the range and a segment start
/// uniformly from all valid positions.
pub fn augment(sample: &MixtureSample, spec: &AugmentSpec, rng: &mut impl Rng) -> Result<MixtureSample> {
    spec.validate()?;
    let n = sample.len();
    if n < spec.segment {
        return Err(Error::invalid_shape(
            "augment",
            format!("sample of {n} samples is shorter than the {}-sample segment", spec.segment),
        ));
    }
    let [lo, hi] = spec.attenuation_db;
    let gain_db = if lo < hi { rng.random_range(lo..=hi) } else { lo };
    let start = rng.random_range(0..=n - spec.segment);
    crop_and_attenuate(sample, start, spec.segment, gain_db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SampleMeta;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> MixtureSample {
        let s = Tensor::from_fn(&[40, 2], |i| (i as f64 * 0.3).sin());
        let n = Tensor::from_fn(&[40, 2], |i| (i as f64 * 1.7).cos());
        MixtureSample::new(s, n, 16_000, SampleMeta::default()).unwrap()
    }

    #[test]
    fn attenuation_endpoints() {
        let s = sample();
        let same = crop_and_attenuate(&s, 0, 40, 0.0).unwrap();
        assert_eq!(same.noise, s.noise);
        let quiet = crop_and_attenuate(&s, 0, 40, -20.0).unwrap();
        for (a, b) in quiet.noise.data().iter().zip(s.noise.data()) {
            assert!((a - 0.1 * b).abs() < 1e-15);
        }
    }

    #[test]
    fn augmented_sample_stays_additive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = AugmentSpec { segment: 16, ..AugmentSpec::default() };
        for _ in 0..20 {
            let a = augment(&sample(), &spec, &mut rng).unwrap();
            assert_eq!(a.len(), 16);
            assert_eq!(a.mixture, a.speech.zip_map(&a.noise, |x, y| x + y).unwrap());
        }
        let long = AugmentSpec { segment: 41, ..spec };
        assert!(augment(&sample(), &long, &mut rng).is_err());
    }
}
