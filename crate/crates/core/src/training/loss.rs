//! Weighted ℓ1 loss on time signals and spectrogram magnitudes.
//!
//! For each source `u ∈ {speech, noise}` the loss adds
//! `α·mean|u − û| + mean||U| − |Û||`, where magnitudes cover the in-band bins
//! and the time term covers all `N×C` samples.

use std::sync::Arc;

use crate::autodiff::{Gradients, Tape, Var};
use crate::complex::cmul;
use crate::data::MixtureSample;
use crate::error::{Error, Result};
use crate::network::Model;
use crate::stft::{Spectrogram, StftCodec, Synthesis};
use crate::tensor::{Real, Tensor};

/// One training segment with its precomputed targets.
#[derive(Debug, Clone)]
pub struct Example<T> {
    /// Mixture spectrogram.
    pub spec: Spectrogram<T>,
    /// Network input derived from `spec`.
    pub input: Tensor<T>,
    pub speech: Tensor<T>,
    pub noise: Tensor<T>,
    /// `|S|` and `|N|` over in-band bins, `F×T×C`.
    pub speech_mag: Tensor<T>,
    pub noise_mag: Tensor<T>,
    /// Time-domain contribution of the mixture's Nyquist bin, which the
    /// speech estimate carries unchanged.
    pub nyquist_signal: Tensor<T>,
}

impl<T: Real> Example<T> {
    /// Prepares a segment whose length equals the model's native segment.
    pub fn new(model: &Model<T>, codec: &StftCodec<T>, sample: &MixtureSample) -> Result<Self> {
        let spec = codec.stft(&sample.mixture.cast())?;
        let input = model.input_features(&spec)?;
        let speech = sample.speech.cast::<T>();
        let noise = sample.noise.cast::<T>();
        let speech_mag = codec.stft(&speech)?.stacked.magnitude();
        let noise_mag = codec.stft(&noise)?.stacked.magnitude();
        let syn = codec.synthesis(spec.frames(), spec.channels(), spec.original_length)?;
        let zeros = vec![T::zero(); spec.stacked.tensor().numel()];
        let nyquist_signal = syn.reconstruct(&zeros, Some(spec.nyquist.tensor().data()));
        Ok(Self {
            spec,
            input,
            speech,
            noise,
            speech_mag,
            noise_mag,
            nyquist_signal,
        })
    }
}

/// Unweighted loss components averaged over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    /// `mean|s − ŝ| + mean|n − n̂|`.
    pub time: f64,
    /// `mean||S| − |Ŝ|| + mean||N| − |N̂||`.
    pub magnitude: f64,
}

impl LossTerms {
    pub fn total(&self, alpha: f64) -> f64 {
        alpha * self.time + self.magnitude
    }
}

/// Tape handles of the loss.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub time: Var,
    pub magnitude: Var,
    /// Time-domain speech and noise estimates.
    pub speech: Var,
    pub noise: Var,
}

fn mean_abs_diff<T: Real>(tape: &mut Tape<T>, target: Var, estimate: Var) -> Result<Var> {
    let d = tape.sub(target, estimate)?;
    let n = tape.value(d).numel();
    let l1 = tape.l1(d);
    Ok(tape.scale(l1, T::of(1.0 / n as f64)))
}

/// Records forward pass, decoding and loss for one example.
pub fn record_loss<T: Real>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    ex: &Example<T>,
    synthesis: &Arc<Synthesis<T>>,
    alpha: T,
) -> Result<LossVars> {
    let x = tape.constant(ex.input.clone());
    let fwd = model.forward(tape, x)?;
    let y = tape.constant(ex.spec.stacked.tensor().clone());
    let s_spec = cmul(tape, y, fwd.speech_mask)?;
    let n_spec = cmul(tape, y, fwd.noise_mask)?;
    let s_inband = tape.linear(s_spec, synthesis.clone())?;
    let nyq = tape.constant(ex.nyquist_signal.clone());
    let speech = tape.add(s_inband, nyq)?;
    let noise = tape.linear(n_spec, synthesis.clone())?;
    let s_ref = tape.constant(ex.speech.clone());
    let n_ref = tape.constant(ex.noise.clone());
    let ts = mean_abs_diff(tape, s_ref, speech)?;
    let tn = mean_abs_diff(tape, n_ref, noise)?;
    let s_mag = tape.cmag(s_spec)?;
    let n_mag = tape.cmag(n_spec)?;
    let s_mag_ref = tape.constant(ex.speech_mag.clone());
    let n_mag_ref = tape.constant(ex.noise_mag.clone());
    let ms = mean_abs_diff(tape, s_mag_ref, s_mag)?;
    let mn = mean_abs_diff(tape, n_mag_ref, n_mag)?;
    let time = tape.add(ts, tn)?;
    let magnitude = tape.add(ms, mn)?;
    let weighted = tape.scale(time, alpha);
    let total = tape.add(weighted, magnitude)?;
    Ok(LossVars {
        total,
        time,
        magnitude,
        speech,
        noise,
    })
}

/// Decoder matching the examples of a model.
pub fn synthesis_for<T: Real>(model: &Model<T>, codec: &StftCodec<T>) -> Result<Arc<Synthesis<T>>> {
    let cfg = model.config();
    let n = codec
        .config()
        .samples_for_frames(cfg.frames)
        .ok_or_else(|| Error::config("codec.pad", "no samples per segment"))?;
    Ok(Arc::new(codec.synthesis(cfg.frames, cfg.channels, n)?))
}

/// Batch-mean loss terms without gradients.
pub fn batch_terms<T: Real>(model: &Model<T>, batch: &[Example<T>], synthesis: &Arc<Synthesis<T>>) -> Result<LossTerms> {
    let mut acc = LossTerms::default();
    for ex in batch {
        let mut tape = Tape::new();
        let v = record_loss(&mut tape, model, ex, synthesis, T::one())?;
        acc.time += tape.value(v.time).item().f64();
        acc.magnitude += tape.value(v.magnitude).item().f64();
    }
    let b = batch.len().max(1) as f64;
    acc.time /= b;
    acc.magnitude /= b;
    Ok(acc)
}

/// Batch-mean loss terms and gradients of the weighted loss. Examples are
/// processed in order on separate tapes and their gradients summed in that
/// order.
pub fn batch_gradients<T: Real>(
    model: &Model<T>,
    batch: &[Example<T>],
    synthesis: &Arc<Synthesis<T>>,
    alpha: f64,
) -> Result<(LossTerms, Gradients<T>)> {
    if batch.is_empty() {
        return Err(Error::config("batch_size", "batch is empty"));
    }
    let mut grads = Gradients::zeros_like(model.params());
    let mut terms = LossTerms::default();
    for ex in batch {
        let mut tape = Tape::new();
        let v = record_loss(&mut tape, model, ex, synthesis, T::of(alpha))?;
        terms.time += tape.value(v.time).item().f64();
        terms.magnitude += tape.value(v.magnitude).item().f64();
        grads.accumulate(&tape.param_grads(v.total, model.params())?);
    }
    let b = batch.len() as f64;
    grads.scale(T::of(1.0 / b));
    terms.time /= b;
    terms.magnitude /= b;
    Ok((terms, grads))
}

/// `α = 2·magnitude/time`, so the weighted time term starts at twice the
/// magnitude term.
pub fn calibrate_alpha(terms: LossTerms) -> Result<f64> {
    if !(terms.time > 0.0) || !terms.magnitude.is_finite() {
        return Err(Error::Degenerate {
            context: "calibrate_alpha",
            msg: format!("time term {} cannot anchor the weighting", terms.time),
        });
    }
    Ok(2.0 * terms.magnitude / terms.time)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_definition() {
        let a = calibrate_alpha(LossTerms { time: 1.0, magnitude: 3.0 }).unwrap();
        assert_eq!(a, 6.0);
        assert!(calibrate_alpha(LossTerms { time: 0.0, magnitude: 3.0 }).is_err());
    }
}
