//! Brute-force reference implementations checked against the main code.
//!
//! Every oracle here computes its answer with scalar loops and `num_complex`
//! arithmetic only. The main implementation is touched solely through its
//! public entry points, so agreement is evidence rather than tautology.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{ca_apply, ca_forward, ca_similarity, CaParams, Variant, Weights};
use crate::autodiff::{ParamStore, Tape};
use crate::complex::{cmatmul, cmul, mag_softmax_phase_keep, ComplexBatch, LeftOperand};
use crate::data::{mix_at_snr, SampleMeta};
use crate::error::{Error, Result};
use crate::eval::{posterior_snr_select, projection_sdr, si_sdr};
use crate::stft::{CodecConfig, StftCodec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scope {
    Complex,
    Dft,
    Attention,
    Metrics,
    All,
}

impl Scope {
    fn covers(self, other: Scope) -> bool {
        self == Scope::All || self == other
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Scope::Complex => "complex",
            Scope::Dft => "dft",
            Scope::Attention => "attention",
            Scope::Metrics => "metrics",
            Scope::All => "all",
        })
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "complex" => Ok(Scope::Complex),
            "dft" => Ok(Scope::Dft),
            "attention" => Ok(Scope::Attention),
            "metrics" => Ok(Scope::Metrics),
            "all" => Ok(Scope::All),
            _ => Err(Error::config("scope", format!("unknown oracle scope {s:?}"))),
        }
    }
}

/// Agreement of one oracle with the main implementation.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub name: &'static str,
    pub scope: Scope,
    pub instances: usize,
    pub max_abs: f64,
    pub max_rel: f64,
    pub tolerance: f64,
    /// Seed of the instance with the largest absolute deviation.
    pub worst_seed: u64,
    /// Set when the main implementation returned an error.
    pub error: Option<String>,
}

impl OracleResult {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.max_abs < self.tolerance
    }
}

impl fmt::Display for OracleResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<10} {:<28} n={:<5} max_abs={:.3e} max_rel={:.3e} tol={:.0e} worst_seed={}",
            if self.passed() { "ok  " } else { "FAIL" },
            self.scope,
            self.name,
            self.instances,
            self.max_abs,
            self.max_rel,
            self.tolerance,
            self.worst_seed
        )?;
        if let Some(e) = &self.error {
            write!(f, " error: {e}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OracleReport {
    pub results: Vec<OracleResult>,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(OracleResult::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &OracleResult> {
        self.results.iter().filter(|r| !r.passed())
    }
}

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.results {
            writeln!(f, "{r}")?;
        }
        Ok(())
    }
}

/// Accumulates deviations over instances.
struct Tally {
    result: OracleResult,
}

impl Tally {
    fn new(name: &'static str, scope: Scope, tolerance: f64) -> Self {
        Self {
            result: OracleResult {
                name,
                scope,
                instances: 0,
                max_abs: 0.0,
                max_rel: 0.0,
                tolerance,
                worst_seed: 0,
                error: None,
            },
        }
    }

    fn compare(&mut self, seed: u64, main: &[f64], oracle: &[f64]) {
        let r = &mut self.result;
        if main.len() != oracle.len() {
            r.error.get_or_insert(format!("seed {seed}: {} values vs {} expected", main.len(), oracle.len()));
            return;
        }
        for (&a, &b) in main.iter().zip(oracle) {
            let d = (a - b).abs();
            let d = if d.is_nan() { f64::INFINITY } else { d };
            if d > r.max_abs {
                r.max_abs = d;
                r.worst_seed = seed;
            }
            r.max_rel = r.max_rel.max(d / b.abs().max(1e-300));
        }
    }

    fn instance(&mut self, seed: u64, f: impl FnOnce(&mut Self) -> Result<()>) {
        self.result.instances += 1;
        if let Err(e) = f(self) {
            self.result.error.get_or_insert(format!("seed {seed}: {e}"));
        }
    }
}

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn complex_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<Complex64> {
    (0..n)
        .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect()
}

/// Row-major `B×R×K` complex batch as separate part tensors.
fn parts(z: &[Complex64], shape: &[usize]) -> (Tensor<f64>, Tensor<f64>) {
    let re = Tensor::from_parts(shape.to_vec(), z.iter().map(|c| c.re).collect());
    let im = Tensor::from_parts(shape.to_vec(), z.iter().map(|c| c.im).collect());
    (re, im)
}

fn interleave(re: &[f64], im: &[f64]) -> Vec<f64> {
    re.iter().zip(im).flat_map(|(&a, &b)| [a, b]).collect()
}

fn flatten(z: &[Complex64]) -> Vec<f64> {
    z.iter().flat_map(|c| [c.re, c.im]).collect()
}

fn on_tape(tape: &mut Tape<f64>, z: &[Complex64], shape: &[usize]) -> ComplexBatch {
    let (re, im) = parts(z, shape);
    ComplexBatch {
        re: tape.constant(re),
        im: tape.constant(im),
    }
}

fn read_batch(tape: &Tape<f64>, b: ComplexBatch) -> Vec<f64> {
    interleave(tape.value(b.re).data(), tape.value(b.im).data())
}

fn oracle_cmul(base: u64) -> OracleResult {
    let mut t = Tally::new("cmul", Scope::Complex, 1e-12);
    for i in 0..1000 {
        let seed = base + i;
        t.instance(seed, |t| {
            let mut rng = rng_for(seed);
            let n = rng.random_range(1..9);
            let a = complex_vec(&mut rng, n);
            let b = complex_vec(&mut rng, n);
            let stacked = |z: &[Complex64]| {
                let mut d: Vec<f64> = z.iter().map(|c| c.re).collect();
                d.extend(z.iter().map(|c| c.im));
                Tensor::from_parts(vec![1, 2 * n], d)
            };
            let mut tape = Tape::new();
            let (va, vb) = (tape.constant(stacked(&a)), tape.constant(stacked(&b)));
            let out = cmul(&mut tape, va, vb)?;
            let got = tape.value(out).data();
            let expect: Vec<Complex64> = a.iter().zip(&b).map(|(x, y)| x * y).collect();
            t.compare(seed, &interleave(&got[..n], &got[n..]), &flatten(&expect));
            Ok(())
        });
    }
    t.result
}

fn oracle_cmatmul(base: u64) -> OracleResult {
    let mut t = Tally::new("cmatmul", Scope::Complex, 1e-12);
    for i in 0..200 {
        let seed = base + i;
        t.instance(seed, |t| {
            let mut rng = rng_for(seed);
            let (bt, r, k, c) = (rng.random_range(1..4), rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..6));
            let transpose = i % 2 == 1;
            let a_shape = if transpose { [bt, k, r] } else { [bt, r, k] };
            let a = complex_vec(&mut rng, bt * r * k);
            let b = complex_vec(&mut rng, bt * k * c);
            let mut expect = vec![Complex64::new(0.0, 0.0); bt * r * c];
            for bi in 0..bt {
                for ri in 0..r {
                    for ci in 0..c {
                        let mut acc = Complex64::new(0.0, 0.0);
                        for ki in 0..k {
                            let av = if transpose {
                                a[(bi * k + ki) * r + ri]
                            } else {
                                a[(bi * r + ri) * k + ki]
                            };
                            acc += av * b[(bi * k + ki) * c + ci];
                        }
                        expect[(bi * r + ri) * c + ci] = acc;
                    }
                }
            }
            let mut tape = Tape::new();
            let va = on_tape(&mut tape, &a, &a_shape);
            let vb = on_tape(&mut tape, &b, &[bt, k, c]);
            let left = if transpose { LeftOperand::TRANSPOSE } else { LeftOperand::PLAIN };
            let out = cmatmul(&mut tape, va, vb, left)?;
            t.compare(seed, &read_batch(&tape, out), &flatten(&expect));
            Ok(())
        });
    }
    t.result
}

/// Periodic Hann window and DFT bins `0..=W/2` of every padded frame, by the
/// definition.
fn naive_stft(x: &[f64], n: usize, c: usize, ch: usize, cfg: &CodecConfig) -> Vec<Vec<Complex64>> {
    let w = cfg.window_len;
    let frames = (n + 2 * cfg.pad - w) / cfg.hop + 1;
    let two_pi = 2.0 * std::f64::consts::PI;
    (0..frames)
        .map(|t| {
            (0..=w / 2)
                .map(|k| {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for i in 0..w {
                        let p = (t * cfg.hop + i) as i64 - cfg.pad as i64;
                        if p < 0 || p >= n as i64 {
                            continue;
                        }
                        let win = 0.5 - 0.5 * (two_pi * i as f64 / w as f64).cos();
                        let ang = -two_pi * ((k * i) % w) as f64 / w as f64;
                        acc += Complex64::from_polar(x[p as usize * c + ch] * win, ang);
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

fn oracle_dft(base: u64) -> OracleResult {
    let mut t = Tally::new("stft vs naive dft", Scope::Dft, 1e-9);
    for i in 0..12 {
        let seed = base + i;
        t.instance(seed, |t| {
            let mut rng = rng_for(seed);
            let w = [16usize, 32, 64, 128][i as usize % 4];
            let cfg = CodecConfig::for_bins(w / 2);
            let c = rng.random_range(1..4);
            let n = w + rng.random_range(0..3 * w);
            let x = uniform(&mut rng, n * c);
            let spec = StftCodec::<f64>::new(cfg)?.stft(&Tensor::new(&[n, c], x.clone())?)?;
            let (f, frames) = (spec.freq_bins(), spec.frames());
            let s = spec.stacked.tensor().data();
            let nyq = spec.nyquist.tensor().data();
            for ch in 0..c {
                let expect = naive_stft(&x, n, c, ch, &cfg);
                if expect.len() != frames {
                    return Err(Error::invalid_shape("dft oracle", format!("{frames} frames, expected {}", expect.len())));
                }
                let mut got = Vec::new();
                let mut want = Vec::new();
                for (tf, bins) in expect.iter().enumerate() {
                    for (k, z) in bins.iter().enumerate() {
                        let (re, im) = if k < f {
                            let b = (k * frames + tf) * 2 * c;
                            (s[b + ch], s[b + c + ch])
                        } else {
                            (nyq[tf * 2 * c + ch], nyq[tf * 2 * c + c + ch])
                        };
                        got.extend([re, im]);
                        want.extend([z.re, z.im]);
                    }
                }
                t.compare(seed, &got, &want);
            }
            Ok(())
        });
    }
    t.result
}

/// `p[f][c][c'] = Σ_j k[f][c][j]·q[f][c'][j]` for channel-major `F×C×d`.
fn literal_similarity(k: &[Complex64], q: &[Complex64], f: usize, c: usize, d: usize) -> Vec<Complex64> {
    let mut p = Vec::with_capacity(f * c * c);
    for fi in 0..f {
        for ci in 0..c {
            for cj in 0..c {
                let mut acc = Complex64::new(0.0, 0.0);
                for j in 0..d {
                    acc += k[(fi * c + ci) * d + j] * q[(fi * c + cj) * d + j];
                }
                p.push(acc);
            }
        }
    }
    p
}

/// `w[c][c'] = exp|p[c][c']| / Σ_r exp|p[r][c']| · p[c][c']/|p[c][c']|`,
/// with zero entries taking phase zero.
fn literal_normalize(p: &[Complex64], f: usize, c: usize) -> Vec<Complex64> {
    let mut w = vec![Complex64::new(0.0, 0.0); p.len()];
    for fi in 0..f {
        for cj in 0..c {
            let denom: f64 = (0..c).map(|r| p[(fi * c + r) * c + cj].norm().exp()).sum();
            for ci in 0..c {
                let z = p[(fi * c + ci) * c + cj];
                let mag = z.norm().exp() / denom;
                let phase = if z.norm() > 0.0 { z / z.norm() } else { Complex64::new(1.0, 0.0) };
                w[(fi * c + ci) * c + cj] = phase * mag;
            }
        }
    }
    w
}

/// `o[f][t][c'] = Σ_c v[f][t][c]·w[f][c][c']`, stacked as `F×T×2C`.
fn literal_apply(v_ft: &[Complex64], w: &[Complex64], f: usize, t: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; f * t * 2 * c];
    for fi in 0..f {
        for ti in 0..t {
            for cj in 0..c {
                let mut acc = Complex64::new(0.0, 0.0);
                for ci in 0..c {
                    acc += v_ft[(fi * t + ti) * c + ci] * w[(fi * c + ci) * c + cj];
                }
                let b = (fi * t + ti) * 2 * c;
                out[b + cj] = acc.re;
                out[b + c + cj] = acc.im;
            }
        }
    }
    out
}

fn oracle_similarity(base: u64) -> OracleResult {
    let mut t = Tally::new("similarity (literal P)", Scope::Attention, 1e-12);
    for i in 0..300 {
        let seed = base + i;
        t.instance(seed, |t| {
            let mut rng = rng_for(seed);
            let (f, c, d) = if i < 100 { (1, 3, 3) } else if i < 200 { (2, 3, 4) } else { (rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..6)) };
            let k = complex_vec(&mut rng, f * c * d);
            let q = complex_vec(&mut rng, f * c * d);
            let mut tape = Tape::new();
            let vk = on_tape(&mut tape, &k, &[f, c, d]);
            let vq = on_tape(&mut tape, &q, &[f, c, d]);
            let p = ca_similarity(&mut tape, vk, vq)?;
            t.compare(seed, &read_batch(&tape, p), &flatten(&literal_similarity(&k, &q, f, c, d)));
            Ok(())
        });
    }
    t.result
}

fn oracle_normalize(base: u64) -> OracleResult {
    let mut t = Tally::new("normalization (literal W)", Scope::Attention, 1e-12);
    for i in 0..300 {
        let seed = base + i;
        t.instance(seed, |t| {
            let mut rng = rng_for(seed);
            let (f, c) = if i < 150 { (1, 3) } else { (rng.random_range(1..4), rng.random_range(1..6)) };
            let mut p = complex_vec(&mut rng, f * c * c);
            for z in p.iter_mut() {
                *z *= rng.random_range(0.0..4.0);
            }
            if i % 10 == 0 {
                p[0] = Complex64::new(0.0, 0.0);
            }
            let mut tape = Tape::new();
            let vp = on_tape(&mut tape, &p, &[f, c, c]);
            let w = mag_softmax_phase_keep(&mut tape, vp)?;
            t.compare(seed, &read_batch(&tape, w), &flatten(&literal_normalize(&p, f, c)));
            Ok(())
        });
    }
    t.result
}

fn oracle_apply(base: u64) -> OracleResult {
    let mut t = Tally::new("application (literal O)", Scope::Attention, 1e-12);
    for i in 0..200 {
        let seed = base + i;
        t.instance(seed, |t| {
            let mut rng = rng_for(seed);
            let (f, tt, c) = (rng.random_range(1..4), rng.random_range(1..6), rng.random_range(1..5));
            let v = complex_vec(&mut rng, f * tt * c);
            let w = complex_vec(&mut rng, f * c * c);
            // channel-major value for the main implementation
            let mut v_cm = vec![Complex64::new(0.0, 0.0); v.len()];
            for fi in 0..f {
                for ti in 0..tt {
                    for ci in 0..c {
                        v_cm[(fi * c + ci) * tt + ti] = v[(fi * tt + ti) * c + ci];
                    }
                }
            }
            let mut tape = Tape::new();
            let vv = on_tape(&mut tape, &v_cm, &[f, c, tt]);
            let vw = on_tape(&mut tape, &w, &[f, c, c]);
            let o = ca_apply(&mut tape, vv, vw)?;
            t.compare(seed, tape.value(o).data(), &literal_apply(&v, &w, f, tt, c));
            Ok(())
        });
    }
    t.result
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

/// The whole complex unit by scalar loops: 1×1 projections over the
/// `F×2C` plane with `T` input channels, similarity, normalisation and
/// application.
fn oracle_ca_forward(base: u64) -> OracleResult {
    let mut t = Tally::new("ca_forward (literal unit)", Scope::Attention, 1e-12);
    for i in 0..40 {
        let seed = base + i;
        t.instance(seed, |t| {
            let mut rng = rng_for(seed);
            let (f, tt, c, d) = (rng.random_range(1..5), rng.random_range(1..7), rng.random_range(1..4), rng.random_range(1..5));
            let mut store = ParamStore::<f64>::new();
            let p = CaParams::register(&mut store, "ca", tt, d, &mut rng)?;
            // non-zero biases exercise the bias path
            for name in ["ca.key.bias", "ca.query.bias", "ca.value.bias"] {
                let id = store.id(name).ok_or_else(|| Error::config(name, "missing"))?;
                let n = store.tensor(id).numel();
                *store.tensor_mut(id) = Tensor::from_parts(vec![n], uniform(&mut rng, n));
            }
            let x = uniform(&mut rng, f * tt * 2 * c);
            let weight = |name: &str| store.by_name(name).map(|w| w.data().to_vec()).ok_or_else(|| Error::config(name, "missing"));
            // plane[f][s][j] = ELU(Σ_t x[f][t][s]·W[t][j] + b[j]) for s in 0..2C
            let project = |w: &[f64], b: &[f64], out: usize| -> Vec<Complex64> {
                let mut z = vec![Complex64::new(0.0, 0.0); f * c * out];
                for fi in 0..f {
                    for s in 0..2 * c {
                        for j in 0..out {
                            let mut acc = b[j];
                            for ti in 0..tt {
                                acc += x[(fi * tt + ti) * 2 * c + s] * w[ti * out + j];
                            }
                            let v = elu(acc);
                            let slot = &mut z[(fi * c + s % c) * out + j];
                            if s < c {
                                slot.re = v;
                            } else {
                                slot.im = v;
                            }
                        }
                    }
                }
                z
            };
            let k = project(&weight("ca.key.weight")?, &weight("ca.key.bias")?, d);
            let q = project(&weight("ca.query.weight")?, &weight("ca.query.bias")?, d);
            let v_cm = project(&weight("ca.value.weight")?, &weight("ca.value.bias")?, tt);
            let mut v = vec![Complex64::new(0.0, 0.0); v_cm.len()];
            for fi in 0..f {
                for ci in 0..c {
                    for ti in 0..tt {
                        v[(fi * tt + ti) * c + ci] = v_cm[(fi * c + ci) * tt + ti];
                    }
                }
            }
            let w = literal_normalize(&literal_similarity(&k, &q, f, c, d), f, c);
            let expect = literal_apply(&v, &w, f, tt, c);
            let mut tape = Tape::new();
            let xv = tape.constant(Tensor::new(&[f, tt, 2 * c], x.clone())?);
            let out = ca_forward(&mut tape, &store, &p, xv, Variant::Complex)?;
            t.compare(seed, tape.value(out.output).data(), &expect);
            if let Weights::Complex(wb) = out.weights {
                t.compare(seed, &read_batch(&tape, wb), &flatten(&w));
            }
            Ok(())
        });
    }
    t.result
}

/// SI-SDR through the correlation coefficient, `10·log10(ρ²/(1 − ρ²))`.
fn oracle_si_sdr(base: u64) -> OracleResult {
    let mut t = Tally::new("si_sdr (correlation form)", Scope::Metrics, 1e-8);
    for i in 0..200 {
        let seed = base + i;
        t.instance(seed, |t| {
            let mut rng = rng_for(seed);
            let n = rng.random_range(16..400);
            let s = uniform(&mut rng, n);
            let noise_level = 10f64.powf(rng.random_range(-2.0..0.5));
            let gain = rng.random_range(0.1..3.0);
            let e: Vec<f64> = s.iter().map(|v| gain * v + noise_level * rng.random_range(-1.0..1.0)).collect();
            let ss: f64 = s.iter().map(|v| v * v).sum();
            let ee: f64 = e.iter().map(|v| v * v).sum();
            let se: f64 = s.iter().zip(&e).map(|(a, b)| a * b).sum();
            let rho2 = se * se / (ss * ee);
            let expect = 10.0 * (rho2 / (1.0 - rho2)).log10();
            t.compare(seed, &[si_sdr(&e, &s)?], &[expect]);
            Ok(())
        });
    }
    t.result
}

/// Least squares by Householder QR on the full convolution matrix.
fn qr_least_squares(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let (m, n) = (a.len(), a[0].len());
    let mut r: Vec<Vec<f64>> = a.to_vec();
    let mut y = b.to_vec();
    for k in 0..n {
        let norm = (k..m).map(|i| r[i][k] * r[i][k]).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if r[k][k] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (k..m).map(|i| r[i][k]).collect();
        v[0] -= alpha;
        let vv: f64 = v.iter().map(|x| x * x).sum();
        if vv == 0.0 {
            continue;
        }
        for j in k..n {
            let dot: f64 = (k..m).map(|i| v[i - k] * r[i][j]).sum();
            let s = 2.0 * dot / vv;
            for i in k..m {
                r[i][j] -= s * v[i - k];
            }
        }
        let dot: f64 = (k..m).map(|i| v[i - k] * y[i]).sum();
        let s = 2.0 * dot / vv;
        for i in k..m {
            y[i] -= s * v[i - k];
        }
    }
    let mut x = vec![0.0; n];
    for k in (0..n).rev() {
        let s: f64 = (k + 1..n).map(|j| r[k][j] * x[j]).sum();
        x[k] = (y[k] - s) / r[k][k];
    }
    x
}

fn oracle_projection(base: u64) -> OracleResult {
    let mut t = Tally::new("projection sdr (QR fit)", Scope::Metrics, 1e-6);
    for i in 0..30 {
        let seed = base + i;
        t.instance(seed, |t| {
            let mut rng = rng_for(seed);
            let n = rng.random_range(200..600);
            let taps = rng.random_range(1..17);
            let s = uniform(&mut rng, n);
            let h = uniform(&mut rng, 4);
            let e: Vec<f64> = (0..n)
                .map(|i| {
                    let filt: f64 = h.iter().enumerate().filter(|(k, _)| i >= *k).map(|(k, hk)| hk * s[i - k]).sum();
                    filt + 0.2 * rng.random_range(-1.0..1.0)
                })
                .collect();
            let a: Vec<Vec<f64>> = (0..n).map(|i| (0..taps).map(|k| if i >= k { s[i - k] } else { 0.0 }).collect()).collect();
            let x = qr_least_squares(&a, &e);
            let fit: Vec<f64> = a.iter().map(|row| row.iter().zip(&x).map(|(p, q)| p * q).sum()).collect();
            let num: f64 = fit.iter().map(|v| v * v).sum();
            let den: f64 = fit.iter().zip(&e).map(|(p, q)| (q - p) * (q - p)).sum();
            let expect = 10.0 * (num / den).log10();
            t.compare(seed, &[projection_sdr(&e, &s, taps)?.db], &[expect]);
            Ok(())
        });
    }
    t.result
}

/// Mixing at a requested SNR, then the SNR measured from the mixture as an
/// energy ratio, and posterior selection against an explicit argmax.
fn oracle_snr(base: u64) -> OracleResult {
    let mut t = Tally::new("energy-ratio snr", Scope::Metrics, 1e-9);
    for i in 0..100 {
        let seed = base + i;
        t.instance(seed, |t| {
            let mut rng = rng_for(seed);
            let (n, c) = (rng.random_range(64..256), rng.random_range(1..5));
            let s = uniform(&mut rng, n * c);
            let v = uniform(&mut rng, n * c);
            let snr = rng.random_range(-10.0..20.0);
            let ref_ch = rng.random_range(0..c);
            let mix = mix_at_snr(
                &Tensor::new(&[n, c], s.clone())?,
                &Tensor::new(&[n, c], v)?,
                Some(snr),
                ref_ch,
                16_000,
                SampleMeta::default(),
            )?;
            let m = mix.mixture.data();
            let energy = |ch: usize, f: &dyn Fn(usize) -> f64| -> f64 { (0..n).map(|i| f(i * c + ch).powi(2)).sum() };
            let measured = 10.0 * (energy(ref_ch, &|k| s[k]) / energy(ref_ch, &|k| m[k] - s[k])).log10();
            t.compare(seed, &[measured], &[snr]);
            let ratios: Vec<f64> = (0..c).map(|ch| energy(ch, &|k| s[k]) / energy(ch, &|k| m[k] - s[k])).collect();
            let mut best = 0;
            for ch in 1..c {
                if ratios[ch] > ratios[best] {
                    best = ch;
                }
            }
            let sel = posterior_snr_select(&mix.speech, &mix.noise)?;
            t.compare(seed, &[sel.channel as f64], &[best as f64]);
            let db: Vec<f64> = ratios.iter().map(|r| 10.0 * r.log10()).collect();
            t.compare(seed, &sel.snr_db, &db);
            Ok(())
        });
    }
    t.result
}

/// Runs every oracle in `scope` on fixed-seed instances.
pub fn run_oracle_suite(scope: Scope) -> OracleReport {
    let mut results = Vec::new();
    if scope.covers(Scope::Complex) {
        results.push(oracle_cmul(1_000));
        results.push(oracle_cmatmul(2_000));
    }
    if scope.covers(Scope::Dft) {
        results.push(oracle_dft(3_000));
    }
    if scope.covers(Scope::Attention) {
        results.push(oracle_similarity(4_000));
        results.push(oracle_normalize(5_000));
        results.push(oracle_apply(6_000));
        results.push(oracle_ca_forward(7_000));
    }
    if scope.covers(Scope::Metrics) {
        results.push(oracle_si_sdr(8_000));
        results.push(oracle_projection(9_000));
        results.push(oracle_snr(10_000));
    }
    OracleReport { results }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scopes_parse_and_select() {
        assert_eq!("dft".parse::<Scope>().unwrap(), Scope::Dft);
        assert!("fft".parse::<Scope>().is_err());
        let r = run_oracle_suite(Scope::Complex);
        assert_eq!(r.results.len(), 2);
        assert!(r.passed(), "{r}");
    }

    #[test]
    fn qr_solves_square_system() {
        let a = vec![vec![2.0, 1.0], vec![1.0, 3.0]];
        let x = qr_least_squares(&a, &[3.0, 5.0]);
        assert!((x[0] - 0.8).abs() < 1e-12 && (x[1] - 1.4).abs() < 1e-12);
    }
}
