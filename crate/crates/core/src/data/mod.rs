//! Synthetic multichannel data, WAV I/O and dataset manifests.

mod manifest;
mod synth;
mod wav;

pub use manifest::{CorpusSpec, Manifest, ManifestEntry, Rejected, Split, SplitFractions, MANIFEST_FILE};
pub use synth::{
    channel, delay_signal, gen_noise, gen_source, mix_at_snr, pink_noise, propagate, ArrayGeometry, MixtureSample,
    NoiseKind, SampleMeta, ToySnrSpec, SAMPLE_RATE, SINC_TAPS,
};
pub use wav::{read_wav, write_wav, WavFormat};
