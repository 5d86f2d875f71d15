//! The channel-attention (CA) unit.
//!
//! Given a stacked complex feature map `x` of shape `F̃×T̃×2C̃`, the unit
//! projects it to keys, queries and values with 1×1 convolutions over the
//! `F̃×2C̃` plane (time frames act as the convolution channels), forms the
//! per-frequency similarity `P_f = k_fᵀ q_f`, normalises each column of
//! `P_f` with a magnitude softmax that keeps the phase, and returns
//! `o_f = v_f W_f` restacked to `F̃×T̃×2C̃`.
//!
//! Projections are stored channel-major: a key of depth `d` is held as
//! `F̃×C̃×d` per part, the transpose of the `d×C̃` matrix `k_f`. The real
//! variant uses `C̃` real channels and a plain softmax over `exp(p)`.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Pad2d, Tape, Var};
use crate::complex::{cmatmul, mag_softmax_phase_keep, ComplexBatch, LeftOperand};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Complex (stacked real/imaginary) or purely real processing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[default]
    Complex,
    Real,
}

/// Weight and bias of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvParams {
    /// Registers a `kh×kw×cin×cout` kernel (uniform in `±sqrt(1/fan_in)`) and
    /// a zero bias under `prefix.weight` / `prefix.bias`.
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        kernel: (usize, usize),
        cin: usize,
        cout: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan_in = kernel.0 * kernel.1 * cin;
        let weight = store.add_uniform(format!("{prefix}.weight"), &[kernel.0, kernel.1, cin, cout], fan_in, rng)?;
        let bias = store.add_zeros(format!("{prefix}.bias"), &[cout])?;
        Ok(Self { weight, bias })
    }

    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, pad: Pad2d) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv2d(x, w, b, (1, 1), pad)
    }
}

/// Parameters of one CA unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CaParams {
    pub key: ConvParams,
    pub query: ConvParams,
    pub value: ConvParams,
    /// Key/query depth `d`.
    pub depth: usize,
    /// Time frames `T̃` the unit was built for.
    pub frames: usize,
}

impl CaParams {
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        frames: usize,
        depth: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if frames == 0 || depth == 0 {
            return Err(Error::config("ca_depth", "frames and depth must be positive"));
        }
        Ok(Self {
            key: ConvParams::register(store, &format!("{prefix}.key"), (1, 1), frames, depth, rng)?,
            query: ConvParams::register(store, &format!("{prefix}.query"), (1, 1), frames, depth, rng)?,
            value: ConvParams::register(store, &format!("{prefix}.value"), (1, 1), frames, frames, rng)?,
            depth,
            frames,
        })
    }
}

/// Key, query and value projections in channel-major stacked form:
/// `F̃×2C̃×d`, `F̃×2C̃×d` and `F̃×2C̃×T̃` (`F̃×C̃×…` for the real variant).
#[derive(Debug, Clone, Copy)]
pub struct Projections {
    pub key: Var,
    pub query: Var,
    pub value: Var,
}

/// Attention weights on the tape, `F̃×C̃×C̃`.
#[derive(Debug, Clone, Copy)]
pub enum Weights {
    Complex(ComplexBatch),
    Real(Var),
}

/// Output of a CA unit together with its weights.
#[derive(Debug, Clone, Copy)]
pub struct CaOutput {
    pub output: Var,
    pub weights: Weights,
}

fn channels_of(shape: &[usize], variant: Variant) -> Result<usize> {
    let last = shape[2];
    match variant {
        Variant::Real => Ok(last),
        Variant::Complex if last % 2 == 0 => Ok(last / 2),
        Variant::Complex => Err(Error::invalid_shape(
            "channel attention",
            format!("stacked input needs an even channel extent, got {shape:?}"),
        )),
    }
}

/// ELU(1×1 convolution) of `x` over the `F̃×2C̃` plane for all three heads.
pub fn ca_project<T: Real>(tape: &mut Tape<T>, store: &ParamStore<T>, p: &CaParams, x: Var) -> Result<Projections> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || s[1] != p.frames {
        return Err(Error::invalid_shape(
            "ca_project",
            format!("expected F×{}×channels input, got {s:?}", p.frames),
        ));
    }
    let planes = tape.permute(x, &[0, 2, 1])?;
    let mut head = |conv: &ConvParams| -> Result<Var> {
        let y = conv.apply(tape, store, planes, Pad2d::NONE)?;
        Ok(tape.elu(y))
    };
    Ok(Projections {
        key: head(&p.key)?,
        query: head(&p.query)?,
        value: head(&p.value)?,
    })
}

/// `P_f = k_fᵀ q_f` for channel-major complex keys and queries (`F̃×C̃×d`),
/// giving `F̃×C̃×C̃` with `p[c,c'] = Σ_j k[j,c]·q[j,c']` (no conjugation).
pub fn ca_similarity<T: Real>(tape: &mut Tape<T>, key: ComplexBatch, query: ComplexBatch) -> Result<ComplexBatch> {
    let (ks, qs) = (key.shape(tape).to_vec(), query.shape(tape).to_vec());
    if ks != qs {
        return Err(Error::shape("ca_similarity", &ks, &qs));
    }
    let rr = tape.matmul_ex(key.re, query.re, false, true)?;
    let ii = tape.matmul_ex(key.im, query.im, false, true)?;
    let ri = tape.matmul_ex(key.re, query.im, false, true)?;
    let ir = tape.matmul_ex(key.im, query.re, false, true)?;
    Ok(ComplexBatch {
        re: tape.sub(rr, ii)?,
        im: tape.add(ri, ir)?,
    })
}

/// `o_f = v_f W_f` for a channel-major value (`F̃×C̃×T̃`), restacked to
/// `F̃×T̃×2C̃`.
pub fn ca_apply<T: Real>(tape: &mut Tape<T>, value: ComplexBatch, w: ComplexBatch) -> Result<Var> {
    let (vs, ws) = (value.shape(tape).to_vec(), w.shape(tape).to_vec());
    if vs.len() != 3 || ws.len() != 3 || vs[0] != ws[0] || vs[1] != ws[1] || ws[1] != ws[2] {
        return Err(Error::shape("ca_apply", &vs, &ws));
    }
    // stored o' = Wᵀ v'
    let o = cmatmul(tape, w, value, LeftOperand::TRANSPOSE)?;
    let stacked = tape.concat(&[o.re, o.im], 1)?;
    tape.permute(stacked, &[0, 2, 1])
}

/// Real-variant counterparts of similarity and application.
pub fn ca_similarity_real<T: Real>(tape: &mut Tape<T>, key: Var, query: Var) -> Result<Var> {
    tape.matmul_ex(key, query, false, true)
}

pub fn ca_apply_real<T: Real>(tape: &mut Tape<T>, value: Var, w: Var) -> Result<Var> {
    let o = tape.matmul_ex(w, value, true, false)?;
    tape.permute(o, &[0, 2, 1])
}

/// The full unit: project, compare, normalise, apply. Output shape equals
/// input shape.
pub fn ca_forward<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &CaParams,
    x: Var,
    variant: Variant,
) -> Result<CaOutput> {
    channels_of(tape.shape(x), variant)?;
    let proj = ca_project(tape, store, p, x)?;
    match variant {
        Variant::Complex => {
            let split = |tape: &mut Tape<T>, v: Var| -> Result<ComplexBatch> {
                let c = tape.shape(v)[1] / 2;
                let re = tape.slice(v, 1, 0, c)?;
                let im = tape.slice(v, 1, c, c)?;
                Ok(ComplexBatch { re, im })
            };
            let key = split(tape, proj.key)?;
            let query = split(tape, proj.query)?;
            let value = split(tape, proj.value)?;
            let sim = ca_similarity(tape, key, query)?;
            let w = mag_softmax_phase_keep(tape, sim)?;
            Ok(CaOutput {
                output: ca_apply(tape, value, w)?,
                weights: Weights::Complex(w),
            })
        }
        Variant::Real => {
            let sim = ca_similarity_real(tape, proj.key, proj.query)?;
            let w = tape.col_softmax(sim)?;
            Ok(CaOutput {
                output: ca_apply_real(tape, proj.value, w)?,
                weights: Weights::Real(w),
            })
        }
    }
}

/// Normalised attention weights of one unit for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap<T> {
    /// Real parts, `F̃×C̃×C̃`.
    pub re: Tensor<T>,
    /// Imaginary parts (all zero for the real variant).
    pub im: Tensor<T>,
    /// `|w|`, `F̃×C̃×C̃`.
    pub magnitude: Tensor<T>,
}

impl<T: Real> AttentionMap<T> {
    pub fn from_tape(tape: &Tape<T>, weights: Weights) -> Self {
        let (re, im) = match weights {
            Weights::Complex(w) => (tape.value(w.re).clone(), tape.value(w.im).clone()),
            Weights::Real(w) => {
                let re = tape.value(w).clone();
                let im = Tensor::zeros(re.shape());
                (re, im)
            }
        };
        let magnitude = re.zip_map(&im, |a, b| a.hypot(b)).expect("equal shapes");
        Self { re, im, magnitude }
    }

    pub fn freq_bins(&self) -> usize {
        self.re.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.re.shape()[1]
    }

    /// `Σ_c |w[f,c,c']|` as an `F̃×C̃` tensor indexed by `(f, c')`.
    pub fn column_sums(&self) -> Tensor<T> {
        let (f, c) = (self.freq_bins(), self.channels());
        Tensor::from_fn(&[f, c], |i| {
            let (fi, col) = (i / c, i % c);
            (0..c).map(|row| self.magnitude.at(&[fi, row, col])).sum()
        })
    }

    /// Mean attention magnitude received by each input channel `c`, averaged
    /// over frequencies and output columns.
    pub fn channel_means(&self) -> Vec<f64> {
        self.band_channel_means(1)
            .into_iter()
            .next()
            .expect("one band")
    }

    /// Per-channel mean magnitude within `bands` equal frequency buckets.
    pub fn band_channel_means(&self, bands: usize) -> Vec<Vec<f64>> {
        let (f, c) = (self.freq_bins(), self.channels());
        let bands = bands.clamp(1, f);
        (0..bands)
            .map(|b| {
                let (lo, hi) = (b * f / bands, (b + 1) * f / bands);
                (0..c)
                    .map(|row| {
                        let total: f64 = (lo..hi)
                            .flat_map(|fi| (0..c).map(move |col| (fi, col)))
                            .map(|(fi, col)| self.magnitude.at(&[fi, row, col]).f64())
                            .sum();
                        total / ((hi - lo) * c) as f64
                    })
                    .collect()
            })
            .collect()
    }

    /// Writes one line per `(f, c, c')` with magnitude and phase in radians,
    /// after a header line.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "f,c,c_prime,magnitude,phase")?;
        let (f, c) = (self.freq_bins(), self.channels());
        for fi in 0..f {
            for row in 0..c {
                for col in 0..c {
                    let idx = [fi, row, col];
                    let phase = self.im.at(&idx).f64().atan2(self.re.at(&idx).f64());
                    writeln!(out, "{fi},{row},{col},{:.9e},{phase:.9e}", self.magnitude.at(&idx).f64())?;
                }
            }
        }
        Ok(())
    }
}

/// Runs one CA unit on a fixed input and returns its attention map.
pub fn export_attention<T: Real>(
    x: &Tensor<T>,
    store: &ParamStore<T>,
    p: &CaParams,
    variant: Variant,
) -> Result<AttentionMap<T>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = ca_forward(&mut tape, store, p, xv, variant)?;
    Ok(AttentionMap::from_tape(&tape, out.weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit(frames: usize, depth: usize) -> (ParamStore<f64>, CaParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = CaParams::register(&mut store, "ca", frames, depth, &mut rng).unwrap();
        (store, p)
    }

    fn random_input(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn projection_shapes() {
        let (store, p) = unit(10, 4);
        let mut t = Tape::new();
        let x = t.constant(random_input(&[8, 10, 6], 1));
        let pr = ca_project(&mut t, &store, &p, x).unwrap();
        assert_eq!(t.shape(pr.key), &[8, 6, 4]);
        assert_eq!(t.shape(pr.query), &[8, 6, 4]);
        assert_eq!(t.shape(pr.value), &[8, 6, 10]);
    }

    #[test]
    fn zero_weights_project_to_zero() {
        let (mut store, p) = unit(10, 4);
        for prm in store.iter_mut() {
            prm.tensor.data_mut().fill(0.0);
        }
        let mut t = Tape::new();
        let x = t.constant(random_input(&[8, 10, 6], 2));
        let pr = ca_project(&mut t, &store, &p, x).unwrap();
        for v in [pr.key, pr.query, pr.value] {
            assert!(t.value(v).data().iter().all(|&z| z == 0.0));
        }
    }

    #[test]
    fn output_shape_and_column_normalisation() {
        let (store, p) = unit(6, 3);
        let x = random_input(&[4, 6, 4], 3);
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let out = ca_forward(&mut t, &store, &p, xv, Variant::Complex).unwrap();
        assert_eq!(t.shape(out.output), x.shape());
        let map = AttentionMap::from_tape(&t, out.weights);
        for s in map.column_sums().data() {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_weights_return_value() {
        let mut t = Tape::<f64>::new();
        let v_re = t.constant(random_input(&[2, 3, 5], 4));
        let v_im = t.constant(random_input(&[2, 3, 5], 5));
        let eye = Tensor::from_fn(&[2, 3, 3], |i| if (i % 9) % 4 == 0 { 1.0 } else { 0.0 });
        let w_re = t.constant(eye);
        let w_im = t.constant(Tensor::zeros(&[2, 3, 3]));
        let out = ca_apply(&mut t, ComplexBatch { re: v_re, im: v_im }, ComplexBatch { re: w_re, im: w_im }).unwrap();
        let o = t.value(out);
        assert_eq!(o.shape(), &[2, 5, 6]);
        for f in 0..2 {
            for tt in 0..5 {
                for c in 0..3 {
                    assert_eq!(o.at(&[f, tt, c]), t.value(v_re).at(&[f, c, tt]));
                    assert_eq!(o.at(&[f, tt, 3 + c]), t.value(v_im).at(&[f, c, tt]));
                }
            }
        }
    }

    #[test]
    fn real_variant_columns_sum_to_one() {
        let (store, p) = unit(6, 3);
        let x = random_input(&[4, 6, 3], 6);
        let map = export_attention(&x, &store, &p, Variant::Real).unwrap();
        assert_eq!(map.magnitude.shape(), &[4, 3, 3]);
        for s in map.column_sums().data() {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_has_header_and_rows() {
        let (store, p) = unit(6, 3);
        let map = export_attention(&random_input(&[4, 6, 4], 7), &store, &p, Variant::Complex).unwrap();
        let mut buf = Vec::new();
        map.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next(), Some("f,c,c_prime,magnitude,phase"));
        assert_eq!(text.lines().count(), 1 + 4 * 2 * 2);
    }

    #[test]
    fn rejects_wrong_frame_count() {
        let (store, p) = unit(6, 3);
        let mut t = Tape::new();
        let x = t.constant(random_input(&[4, 5, 4], 8));
        assert!(ca_forward(&mut t, &store, &p, x, Variant::Complex).is_err());
    }
}
