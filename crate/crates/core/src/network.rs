//! Channel-attention dense U-Net mask estimator.
//!
//! Wiring, with `K₁` first-layer filters and `L` levels:
//!
//! * input stage: CA on the mixture spectrogram, concatenated with it
//!   (`4C` channels), then a dense block to `K₁`;
//! * down-block `i`: 2×2 pooling, dense block to `out_i/2`, CA, concatenation
//!   of dense and CA outputs (`out_i = min(2^{i+1}K₁, cap)`);
//! * up-block `i`: stride-2 transposed convolution, 2×2 convolution to
//!   `K_i = min(2^{i-1}K₁, cap)`, concatenation with the skip (the input of
//!   down-block `i`), dense block to `K_i`, CA, concatenation (`2K_i`);
//! * mask head: 2×2 convolution to `2C` channels and ReLU.
//!
//! Every convolution is followed by ELU except the head. 2×2 convolutions
//! keep the spatial size with one pixel of padding after each axis.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{ca_forward, CaParams, ConvParams, Variant, Weights};
use crate::autodiff::{ParamId, ParamStore, Pad2d, PoolKind, Tape, Var};
use crate::complex::{noise_mask, StackedComplex};
use crate::error::{Error, Result};
use crate::stft::{Spectrogram, StftCodec};
use crate::tensor::{Real, Tensor};

/// Down-sampling operator of the down-blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Avg,
    Max,
}

impl From<Pooling> for PoolKind {
    fn from(p: Pooling) -> Self {
        match p {
            Pooling::Avg => PoolKind::Avg,
            Pooling::Max => PoolKind::Max,
        }
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    /// In-band frequency bins `F`.
    pub freq_bins: usize,
    /// Time frames `T`.
    pub frames: usize,
    /// Microphone channels `C`.
    pub channels: usize,
    /// Number of down-blocks (and of up-blocks) `L`.
    pub levels: usize,
    /// `K₁`.
    pub first_filters: usize,
    pub filter_cap: usize,
    /// Square kernel size of every convolution.
    pub kernel: usize,
    /// Layers per dense block `D`.
    pub dense_depth: usize,
    /// Key/query depth `d` of the CA units.
    pub ca_depth: usize,
    pub variant: Variant,
    pub pooling: Pooling,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl UNetConfig {
    pub fn paper() -> Self {
        Self {
            freq_bins: 512,
            frames: 80,
            channels: 6,
            levels: 4,
            first_filters: 32,
            filter_cap: 256,
            kernel: 2,
            dense_depth: 4,
            ca_depth: 20,
            variant: Variant::Complex,
            pooling: Pooling::Avg,
        }
    }

    pub fn tiny() -> Self {
        Self {
            freq_bins: 64,
            frames: 16,
            channels: 2,
            levels: 2,
            first_filters: 8,
            ca_depth: 4,
            ..Self::paper()
        }
    }

    /// Output channels of the dense block in down-block `i` (1-based).
    pub fn down_dense(&self, i: usize) -> usize {
        (self.first_filters << (i + 1)).min(self.filter_cap) / 2
    }

    /// Channels emitted by down-block `i`.
    pub fn down_out(&self, i: usize) -> usize {
        2 * self.down_dense(i)
    }

    /// Channels entering down-block `i`, which is also the skip width of
    /// up-block `i`.
    pub fn down_in(&self, i: usize) -> usize {
        if i == 1 {
            self.first_filters
        } else {
            self.down_out(i - 1)
        }
    }

    /// `K_i` of up-block `i`.
    pub fn up_width(&self, i: usize) -> usize {
        (self.first_filters << (i - 1)).min(self.filter_cap)
    }

    /// Channels entering up-block `i`.
    pub fn up_in(&self, i: usize) -> usize {
        if i == self.levels {
            self.down_out(self.levels)
        } else {
            2 * self.up_width(i + 1)
        }
    }

    /// Stacked channels of the network input (`2C`, or `C` for the real variant).
    pub fn input_width(&self) -> usize {
        match self.variant {
            Variant::Complex => 2 * self.channels,
            Variant::Real => self.channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("freq_bins", self.freq_bins),
            ("frames", self.frames),
            ("channels", self.channels),
            ("levels", self.levels),
            ("first_filters", self.first_filters),
            ("filter_cap", self.filter_cap),
            ("dense_depth", self.dense_depth),
            ("ca_depth", self.ca_depth),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.kernel < 2 {
            return Err(Error::config("kernel", "must be at least 2 for the stride-2 up-sampling"));
        }
        let scale = 1usize << self.levels;
        if self.freq_bins % scale != 0 {
            return Err(Error::config("freq_bins", format!("must be divisible by 2^levels = {scale}")));
        }
        if self.frames % scale != 0 {
            return Err(Error::config("frames", format!("must be divisible by 2^levels = {scale}")));
        }
        let even = self.variant == Variant::Complex;
        let mut widths = vec![("first_filters", self.first_filters)];
        for i in 1..=self.levels {
            widths.push(("down dense width", self.down_dense(i)));
            widths.push(("up width", self.up_width(i)));
        }
        for (field, w) in widths {
            if w % self.dense_depth != 0 {
                return Err(Error::config(field, format!("{w} is not divisible by dense_depth {}", self.dense_depth)));
            }
            if even && w % 2 != 0 {
                return Err(Error::config(field, format!("{w} must be even to hold stacked complex channels")));
            }
        }
        Ok(())
    }
}

/// Layer parameters of a dense block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenseParams {
    pub layers: Vec<ConvParams>,
}

/// Dense block shape: depth `D` layers of growth `g = out / D`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenseBlockConfig {
    pub depth: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl DenseBlockConfig {
    pub fn growth(&self) -> usize {
        self.out_channels / self.depth
    }

    pub fn register<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        prefix: &str,
        in_channels: usize,
        rng: &mut impl Rng,
    ) -> Result<DenseParams> {
        if self.depth == 0 || self.out_channels % self.depth != 0 {
            return Err(Error::config(
                "dense_depth",
                format!("{} output channels cannot be split into {} layers", self.out_channels, self.depth),
            ));
        }
        let g = self.growth();
        let layers = (0..self.depth)
            .map(|j| {
                ConvParams::register(
                    store,
                    &format!("{prefix}.layer{}", j + 1),
                    (self.kernel, self.kernel),
                    in_channels + j * g,
                    g,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(DenseParams { layers })
    }
}

/// Each layer sees the block input and all previous layer outputs; the block
/// returns the concatenation of the layer outputs.
pub fn dense_block<T: Real>(tape: &mut Tape<T>, store: &ParamStore<T>, p: &DenseParams, x: Var) -> Result<Var> {
    let mut feats = vec![x];
    for layer in &p.layers {
        let input = if feats.len() == 1 { x } else { tape.concat(&feats, 2)? };
        let k = store.tensor(layer.weight).shape()[0];
        let y = layer.apply(tape, store, input, Pad2d::same(k, k))?;
        feats.push(tape.elu(y));
    }
    tape.concat(&feats[1..], 2)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DownParams {
    pub dense: DenseParams,
    pub ca: CaParams,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpParams {
    /// Transposed-convolution kernel, `k×k×out×in`.
    pub upsample: ConvParams,
    pub conv: ConvParams,
    pub dense: DenseParams,
    pub ca: CaParams,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    input_ca: CaParams,
    input_dense: DenseParams,
    downs: Vec<DownParams>,
    /// Deepest first.
    ups: Vec<UpParams>,
    head: ConvParams,
}

pub fn down_block<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &DownParams,
    x: Var,
    pooling: Pooling,
    variant: Variant,
) -> Result<Var> {
    let pooled = tape.pool2d(x, pooling.into())?;
    let dense = dense_block(tape, store, &p.dense, pooled)?;
    let ca = ca_forward(tape, store, &p.ca, dense, variant)?;
    tape.concat(&[dense, ca.output], 2)
}

pub fn up_block<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &UpParams,
    x: Var,
    skip: Var,
    variant: Variant,
) -> Result<Var> {
    let (xs, ss) = (tape.shape(x).to_vec(), tape.shape(skip).to_vec());
    if ss.len() != 3 || xs.len() != 3 || ss[0] != 2 * xs[0] || ss[1] != 2 * xs[1] {
        return Err(Error::shape("up_block skip", &xs, &ss));
    }
    let w = tape.param(store, p.upsample.weight);
    let b = tape.param(store, p.upsample.bias);
    let up = tape.tconv2d(x, w, b, 2)?;
    let up = tape.elu(up);
    let k = store.tensor(p.conv.weight).shape()[0];
    let narrowed = p.conv.apply(tape, store, up, Pad2d::same(k, k))?;
    let narrowed = tape.elu(narrowed);
    let joined = tape.concat(&[narrowed, skip], 2)?;
    let dense = dense_block(tape, store, &p.dense, joined)?;
    let ca = ca_forward(tape, store, &p.ca, dense, variant)?;
    tape.concat(&[dense, ca.output], 2)
}

/// Speech and noise masks as stacked complex tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPair<T> {
    pub speech: StackedComplex<T>,
    pub noise: StackedComplex<T>,
}

impl<T: Real> MaskPair<T> {
    /// Derives the noise mask from a speech mask.
    pub fn from_speech(speech: StackedComplex<T>) -> Self {
        let c = speech.channels();
        let mut noise = speech.tensor().clone();
        for row in noise.data_mut().chunks_exact_mut(2 * c) {
            for v in &mut row[..c] {
                *v = T::one() - *v;
            }
            for v in &mut row[c..] {
                *v = -*v;
            }
        }
        Self {
            speech,
            noise: StackedComplex::new(noise).expect("even"),
        }
    }
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// Stacked complex speech mask, `F×T×2C`.
    pub speech_mask: Var,
    pub noise_mask: Var,
    /// Weights of the CA unit applied to the raw input.
    pub input_attention: Weights,
}

impl Forward {
    pub fn masks<T: Real>(&self, tape: &Tape<T>) -> MaskPair<T> {
        MaskPair {
            speech: StackedComplex::new(tape.value(self.speech_mask).clone()).expect("even"),
            noise: StackedComplex::new(tape.value(self.noise_mask).clone()).expect("even"),
        }
    }
}

/// A configured network with its parameters.
#[derive(Debug, Clone)]
pub struct Model<T> {
    config: UNetConfig,
    params: ParamStore<T>,
    layout: Layout,
}

fn build_layout<T: Real>(cfg: &UNetConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Layout> {
    cfg.validate()?;
    let k = cfg.kernel;
    let dense = |out: usize| DenseBlockConfig {
        depth: cfg.dense_depth,
        out_channels: out,
        kernel: k,
    };
    let c_in = cfg.input_width();
    let input_ca = CaParams::register(store, "input.ca", cfg.frames, cfg.ca_depth, rng)?;
    let input_dense = dense(cfg.first_filters).register(store, "input.dense", 2 * c_in, rng)?;
    let mut downs = Vec::with_capacity(cfg.levels);
    for i in 1..=cfg.levels {
        let prefix = format!("down{i}");
        let frames = cfg.frames >> i;
        downs.push(DownParams {
            dense: dense(cfg.down_dense(i)).register(store, &format!("{prefix}.dense"), cfg.down_in(i), rng)?,
            ca: CaParams::register(store, &format!("{prefix}.ca"), frames, cfg.ca_depth, rng)?,
        });
    }
    let mut ups = Vec::with_capacity(cfg.levels);
    for i in (1..=cfg.levels).rev() {
        let prefix = format!("up{i}");
        let cin = cfg.up_in(i);
        let cup = cin.min(cfg.filter_cap);
        let ki = cfg.up_width(i);
        let upsample = {
            let weight = store.add_uniform(format!("{prefix}.upsample.weight"), &[k, k, cup, cin], k * k * cin, rng)?;
            let bias = store.add_zeros(format!("{prefix}.upsample.bias"), &[cup])?;
            ConvParams { weight, bias }
        };
        let conv = ConvParams::register(store, &format!("{prefix}.conv"), (k, k), cup, ki, rng)?;
        let frames = cfg.frames >> (i - 1);
        ups.push(UpParams {
            upsample,
            conv,
            dense: dense(ki).register(store, &format!("{prefix}.dense"), ki + cfg.down_in(i), rng)?,
            ca: CaParams::register(store, &format!("{prefix}.ca"), frames, cfg.ca_depth, rng)?,
        });
    }
    let head_out = cfg.input_width();
    let head = ConvParams::register(store, "head", (k, k), 2 * cfg.up_width(1), head_out, rng)?;
    Ok(Layout {
        input_ca,
        input_dense,
        downs,
        ups,
        head,
    })
}

impl<T: Real> Model<T> {
    /// Builds a model with seeded initialisation. Draws happen in double
    /// precision, so both precisions start from the same weights.
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let layout = build_layout(&config, &mut store, &mut rng)?;
        Ok(Self {
            config,
            params: store.cast(),
            layout,
        })
    }

    /// Wraps existing parameters after checking names and shapes against the
    /// configuration.
    pub fn from_params(config: UNetConfig, params: ParamStore<T>) -> Result<Self> {
        let mut reference = ParamStore::<T>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layout = build_layout(&config, &mut reference, &mut rng)?;
        if reference.len() != params.len() {
            return Err(Error::config(
                "parameters",
                format!("configuration needs {} tensors, got {}", reference.len(), params.len()),
            ));
        }
        for ((_, want), (_, got)) in reference.iter().zip(params.iter()) {
            if want.name != got.name || want.tensor.shape() != got.tensor.shape() {
                return Err(Error::config(
                    got.name.clone(),
                    format!(
                        "expected {} {:?}, got {} {:?}",
                        want.name,
                        want.tensor.shape(),
                        got.name,
                        got.tensor.shape()
                    ),
                ));
            }
        }
        Ok(Self { config, params, layout })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config,
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    pub fn input_ca(&self) -> &CaParams {
        &self.layout.input_ca
    }

    pub fn head(&self) -> &ConvParams {
        &self.layout.head
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.params.id(name)
    }

    /// Network input for a spectrogram: the stacked in-band bins, or their
    /// magnitudes for the real variant.
    pub fn input_features(&self, spec: &Spectrogram<T>) -> Result<Tensor<T>> {
        let want = [self.config.freq_bins, self.config.frames, 2 * self.config.channels];
        if spec.stacked.shape() != want {
            return Err(Error::shape("network input", spec.stacked.shape(), &want));
        }
        Ok(match self.config.variant {
            Variant::Complex => spec.stacked.tensor().clone(),
            Variant::Real => spec.stacked.magnitude(),
        })
    }

    /// Records the forward pass for network input `x` (see
    /// [`Model::input_features`]) and returns the mask handles.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Forward> {
        let cfg = &self.config;
        let want = [cfg.freq_bins, cfg.frames, cfg.input_width()];
        if tape.shape(x) != want {
            return Err(Error::shape("unet_forward", tape.shape(x), &want));
        }
        let (store, l) = (&self.params, &self.layout);
        let ca0 = ca_forward(tape, store, &l.input_ca, x, cfg.variant)?;
        let joined = tape.concat(&[x, ca0.output], 2)?;
        let mut h = dense_block(tape, store, &l.input_dense, joined)?;
        let mut skips = Vec::with_capacity(cfg.levels);
        for d in &l.downs {
            skips.push(h);
            h = down_block(tape, store, d, h, cfg.pooling, cfg.variant)?;
        }
        for (u, &skip) in l.ups.iter().zip(skips.iter().rev()) {
            h = up_block(tape, store, u, h, skip, cfg.variant)?;
        }
        let k = cfg.kernel;
        let m = l.head.apply(tape, store, h, Pad2d::same(k, k))?;
        let m = tape.relu(m);
        let speech_mask = match cfg.variant {
            Variant::Complex => m,
            Variant::Real => {
                let zeros = tape.constant(Tensor::zeros(tape.shape(m)));
                tape.concat(&[m, zeros], 2)?
            }
        };
        let noise = noise_mask(tape, speech_mask)?;
        Ok(Forward {
            speech_mask,
            noise_mask: noise,
            input_attention: ca0.weights,
        })
    }

    /// Mask pair for a mixture spectrogram.
    pub fn masks(&self, spec: &Spectrogram<T>) -> Result<MaskPair<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(self.input_features(spec)?);
        let fwd = self.forward(&mut tape, x)?;
        Ok(fwd.masks(&tape))
    }
}

/// Shorthand for [`Model::masks`].
pub fn unet_forward<T: Real>(model: &Model<T>, spec: &Spectrogram<T>) -> Result<MaskPair<T>> {
    model.masks(spec)
}

fn apply_mask<T: Real>(y: &StackedComplex<T>, m: &StackedComplex<T>) -> StackedComplex<T> {
    let c = y.channels();
    let mut out = vec![T::zero(); y.tensor().numel()];
    for ((o, yr), mr) in out
        .chunks_exact_mut(2 * c)
        .zip(y.tensor().data().chunks_exact(2 * c))
        .zip(m.tensor().data().chunks_exact(2 * c))
    {
        for j in 0..c {
            let (a, b) = (yr[j], yr[c + j]);
            let (p, q) = (mr[j], mr[c + j]);
            o[j] = a * p - b * q;
            o[c + j] = a * q + b * p;
        }
    }
    StackedComplex::new(Tensor::new(y.shape(), out).expect("same shape")).expect("even")
}

/// `Ŝ = Y∗M` and `N̂ = Y∗M_noise`. The out-of-band Nyquist bin goes entirely
/// to the speech estimate.
pub fn estimate_sources<T: Real>(y: &Spectrogram<T>, m: &MaskPair<T>) -> Result<(Spectrogram<T>, Spectrogram<T>)> {
    if y.stacked.shape() != m.speech.shape() || m.speech.shape() != m.noise.shape() {
        return Err(Error::shape("estimate_sources", y.stacked.shape(), m.speech.shape()));
    }
    let speech = Spectrogram {
        stacked: apply_mask(&y.stacked, &m.speech),
        nyquist: y.nyquist.clone(),
        original_length: y.original_length,
    };
    let noise = Spectrogram {
        stacked: apply_mask(&y.stacked, &m.noise),
        nyquist: StackedComplex::zeros(y.nyquist.shape())?,
        original_length: y.original_length,
    };
    Ok((speech, noise))
}

/// Enhances an `N×C` signal of any length ≥ 1 by processing consecutive
/// segments of the model's native length (the last one zero-padded).
/// Returns the speech and noise estimates, both `N×C`.
pub fn enhance<T: Real>(model: &Model<T>, codec: &StftCodec<T>, y: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let cfg = model.config();
    if y.rank() != 2 || y.shape()[1] != cfg.channels {
        return Err(Error::invalid_shape(
            "enhance",
            format!("expected N×{} signal, got {:?}", cfg.channels, y.shape()),
        ));
    }
    if codec.config().freq_bins() != cfg.freq_bins {
        return Err(Error::config(
            "codec.window_len",
            format!("codec has {} bins, model expects {}", codec.config().freq_bins(), cfg.freq_bins),
        ));
    }
    let seg = codec.config().samples_for_frames(cfg.frames).ok_or_else(|| {
        Error::config("codec.pad", "padding leaves no samples for the configured frame count")
    })?;
    let (n, c) = (y.shape()[0], cfg.channels);
    let mut speech = vec![T::zero(); n * c];
    let mut noise = vec![T::zero(); n * c];
    let mut start = 0;
    while start < n {
        let len = seg.min(n - start);
        let mut chunk = vec![T::zero(); seg * c];
        chunk[..len * c].copy_from_slice(&y.data()[start * c..(start + len) * c]);
        let spec = codec.stft(&Tensor::new(&[seg, c], chunk)?)?;
        let masks = model.masks(&spec)?;
        let (s_hat, n_hat) = estimate_sources(&spec, &masks)?;
        let s_sig = codec.istft(&s_hat)?;
        let n_sig = codec.istft(&n_hat)?;
        speech[start * c..(start + len) * c].copy_from_slice(&s_sig.data()[..len * c]);
        noise[start * c..(start + len) * c].copy_from_slice(&n_sig.data()[..len * c]);
        start += len;
    }
    Ok((Tensor::new(&[n, c], speech)?, Tensor::new(&[n, c], noise)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> UNetConfig {
        UNetConfig {
            freq_bins: 16,
            frames: 8,
            channels: 2,
            levels: 2,
            first_filters: 4,
            ca_depth: 3,
            ..UNetConfig::paper()
        }
    }

    #[test]
    fn paper_channel_schedule() {
        let c = UNetConfig::paper();
        let outs: Vec<_> = (1..=4).map(|i| c.down_out(i)).collect();
        assert_eq!(outs, [128, 256, 256, 256]);
        let ups: Vec<_> = (1..=4).map(|i| 2 * c.up_width(i)).collect();
        assert_eq!(ups, [64, 128, 256, 512]);
        c.validate().unwrap();
        UNetConfig::tiny().validate().unwrap();
    }

    #[test]
    fn rejects_indivisible_extents() {
        let bad = UNetConfig { frames: 10, ..UNetConfig::tiny() };
        assert!(bad.validate().is_err());
        let bad = UNetConfig { first_filters: 6, ..UNetConfig::tiny() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn dense_block_layer_widths() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = DenseBlockConfig { depth: 4, out_channels: 8, kernel: 2 };
        let p = cfg.register(&mut store, "d", 3, &mut rng).unwrap();
        for (j, layer) in p.layers.iter().enumerate() {
            assert_eq!(store.tensor(layer.weight).shape(), &[2, 2, 3 + 2 * j, 2]);
        }
        let mut t = Tape::new();
        let x = t.constant(Tensor::ones(&[6, 5, 3]));
        let y = dense_block(&mut t, &store, &p, x).unwrap();
        assert_eq!(t.shape(y), &[6, 5, 8]);
    }

    #[test]
    fn small_model_masks() {
        let model = Model::<f64>::new(small(), 3).unwrap();
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_fn(&[16, 8, 4], |i| ((i * 37) % 11) as f64 / 11.0 - 0.5));
        let fwd = model.forward(&mut t, x).unwrap();
        let m = fwd.masks(&t);
        assert_eq!(m.speech.shape(), &[16, 8, 4]);
        assert!(m.speech.tensor().data().iter().all(|&v| v >= 0.0));
        let sum = m.speech.tensor().zip_map(m.noise.tensor(), |a, b| a + b).unwrap();
        for row in sum.data().chunks_exact(4) {
            assert_eq!(row, [1.0, 1.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn construction_is_deterministic() {
        let a = Model::<f64>::new(small(), 9).unwrap();
        let b = Model::<f64>::new(small(), 9).unwrap();
        assert_eq!(a.num_params(), b.num_params());
        for ((_, pa), (_, pb)) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.tensor, pb.tensor);
        }
        assert!(Model::<f64>::from_params(small(), a.params().clone()).is_ok());
        assert!(Model::<f64>::from_params(UNetConfig::tiny(), a.params().clone()).is_err());
    }
}
