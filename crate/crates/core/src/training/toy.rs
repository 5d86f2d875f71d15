use crate::attention::Variant;
use crate::data::{MixtureSample, ToySnrSpec};
use crate::error::Result;
use crate::eval::{attention_snr_experiment, AttentionSummary};
use crate::network::{Model, UNetConfig};
use crate::stft::CodecConfig;
use crate::tensor::Real;

use super::{RunSummary, TrainConfig, Trainer};

/// Setup of [`toy_attention_experiment`].
#[derive(Debug, Clone, PartialEq)]
pub struct ToyExperiment {
    /// Architecture; `channels` is replaced by the toy channel count.
    pub unet: UNetConfig,
    pub train: TrainConfig,
    pub toy: ToySnrSpec,
    /// Training utterances; held-out utterances follow them.
    pub utterances: usize,
    pub held_out: usize,
    pub bands: usize,
    pub seed: u64,
}

impl Default for ToyExperiment {
    fn default() -> Self {
        Self {
            unet: UNetConfig {
                variant: Variant::Real,
                ..UNetConfig::tiny()
            },
            train: TrainConfig {
                steps: 2000,
                batch_size: 4,
                ..TrainConfig::default()
            },
            toy: ToySnrSpec::default(),
            utterances: 64,
            held_out: 8,
            bands: 4,
            seed: 0,
        }
    }
}

/// Result of [`toy_attention_experiment`].
#[derive(Debug, Clone)]
pub struct ToyOutcome<T> {
    pub model: Model<T>,
    pub training: RunSummary,
    /// Attention averaged over the held-out utterances.
    pub summary: AttentionSummary,
    /// Per held-out utterance summaries.
    pub per_utterance: Vec<AttentionSummary>,
}

impl<T> ToyOutcome<T> {
    /// Whether the averaged attention favours the quiet-noise channel.
    pub fn favours_high_channel(&self, toy: &ToySnrSpec) -> bool {
        self.summary.argmax == toy.high_channel
    }
}

/// Trains a model on the toy corpus, where one channel has a consistent SNR
/// advantage, then measures where the input CA unit puts its attention on
/// held-out utterances.
pub fn toy_attention_experiment<T: Real>(exp: &ToyExperiment) -> Result<ToyOutcome<T>> {
    exp.toy.validate()?;
    let unet = UNetConfig {
        channels: exp.toy.channels,
        ..exp.unet
    };
    let model = Model::<T>::new(unet, exp.seed)?;
    let train: Vec<MixtureSample> = (0..exp.utterances).map(|i| exp.toy.utterance(i)).collect::<Result<_>>()?;
    let mut trainer = Trainer::new(model, CodecConfig::for_bins(unet.freq_bins), exp.train, exp.seed)?;
    let training = trainer.run(&train, &[], None)?;
    let per_utterance = (exp.utterances..exp.utterances + exp.held_out)
        .map(|i| {
            let s = exp.toy.utterance(i)?;
            attention_snr_experiment(&trainer.model, &trainer.codec, &s.mixture, exp.bands)
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = average(&per_utterance, unet.channels);
    Ok(ToyOutcome {
        model: trainer.model,
        training,
        summary,
        per_utterance,
    })
}

fn average(items: &[AttentionSummary], c: usize) -> AttentionSummary {
    let n = items.len().max(1) as f64;
    let nb = items.first().map_or(0, |s| s.bands.len());
    let mut bands = vec![vec![0.0; c]; nb];
    let mut channel_means = vec![0.0; c];
    let mut max_column_error = 0.0f64;
    for s in items {
        for (acc, row) in bands.iter_mut().zip(&s.bands) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v / n;
            }
        }
        for (a, v) in channel_means.iter_mut().zip(&s.channel_means) {
            *a += v / n;
        }
        max_column_error = max_column_error.max(s.max_column_error);
    }
    let argmax = (0..c).fold(0, |best, ch| if channel_means[ch] > channel_means[best] { ch } else { best });
    AttentionSummary {
        bands,
        channel_means,
        argmax,
        max_column_error,
    }
}
