//! Separation metrics, posterior-SNR channel selection, evaluation reports
//! and the attention-versus-SNR probe.
//!
//! Reported SDR values are scale-invariant SDR and a short-filter projection
//! SDR. Neither equals BSS Eval's SDR with 512-tap distortion filters, so
//! only improvements over the noisy input are comparable across pipelines.

use std::io::Write;

use serde::Serialize;

use crate::attention::AttentionMap;
use crate::autodiff::Tape;
use crate::data::{channel, MixtureSample};
use crate::error::{Error, Result};
use crate::complex::StackedComplex;
use crate::network::{enhance, estimate_sources, MaskPair, Model};
use crate::stft::StftCodec;
use crate::tensor::{Real, Tensor};

/// Upper limit of reported ratios, reached by exact estimates.
pub const MAX_DB: f64 = 100.0;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn ratio_db(signal: f64, distortion: f64) -> f64 {
    if distortion <= 0.0 {
        return MAX_DB;
    }
    (10.0 * (signal / distortion).log10()).min(MAX_DB)
}

fn check_pair(op: &'static str, est: &[f64], reference: &[f64]) -> Result<()> {
    if est.len() != reference.len() {
        return Err(Error::shape(op, &[est.len()], &[reference.len()]));
    }
    if dot(reference, reference) == 0.0 {
        return Err(Error::Degenerate {
            context: op,
            msg: "reference signal is silent".into(),
        });
    }
    Ok(())
}

/// Scale-invariant SDR in dB, capped at [`MAX_DB`].
pub fn si_sdr(est: &[f64], reference: &[f64]) -> Result<f64> {
    check_pair("si_sdr", est, reference)?;
    let a = dot(est, reference) / dot(reference, reference);
    let mut target_e = 0.0;
    let mut resid_e = 0.0;
    for (&e, &r) in est.iter().zip(reference) {
        let t = a * r;
        target_e += t * t;
        resid_e += (e - t) * (e - t);
    }
    Ok(ratio_db(target_e, resid_e))
}

/// Projection SDR result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionSdr {
    pub db: f64,
    /// The normal equations were singular and a ridge was added.
    pub regularized: bool,
}

pub const MAX_FILTER_LEN: usize = 64;
const RIDGE: f64 = 1e-9;

/// Solves `a·x = b` for a symmetric positive semi-definite `a` by Gaussian
/// elimination with partial pivoting; `None` if a pivot vanishes.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    let scale = (0..n).map(|i| a[i][i].abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() <= 1e-12 * scale {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

/// SDR after a least-squares FIR fit of `filter_len` causal taps from the
/// reference to the estimate; the fitted signal is the target and the rest is
/// distortion. With one tap this is [`si_sdr`].
pub fn projection_sdr(est: &[f64], reference: &[f64], filter_len: usize) -> Result<ProjectionSdr> {
    check_pair("projection_sdr", est, reference)?;
    if filter_len == 0 || filter_len > MAX_FILTER_LEN {
        return Err(Error::config("filter_len", format!("must be in 1..={MAX_FILTER_LEN}")));
    }
    let n = est.len();
    let shifted = |k: usize, i: usize| if i >= k { reference[i - k] } else { 0.0 };
    let mut gram = vec![vec![0.0; filter_len]; filter_len];
    let mut rhs = vec![0.0; filter_len];
    for j in 0..filter_len {
        for k in j..filter_len {
            let v: f64 = (0..n).map(|i| shifted(j, i) * shifted(k, i)).sum();
            gram[j][k] = v;
            gram[k][j] = v;
        }
        rhs[j] = (0..n).map(|i| shifted(j, i) * est[i]).sum();
    }
    let (h, regularized) = match solve(gram.clone(), rhs.clone()) {
        Some(h) => (h, false),
        None => {
            let trace: f64 = (0..filter_len).map(|i| gram[i][i]).sum();
            for (i, row) in gram.iter_mut().enumerate() {
                row[i] += RIDGE * trace.max(1.0);
            }
            let h = solve(gram, rhs).ok_or_else(|| Error::Degenerate {
                context: "projection_sdr",
                msg: "normal equations stay singular after regularisation".into(),
            })?;
            (h, true)
        }
    };
    let mut target_e = 0.0;
    let mut resid_e = 0.0;
    for i in 0..n {
        let t: f64 = h.iter().enumerate().map(|(k, hk)| hk * shifted(k, i)).sum();
        target_e += t * t;
        resid_e += (est[i] - t) * (est[i] - t);
    }
    Ok(ProjectionSdr {
        db: ratio_db(target_e, resid_e),
        regularized,
    })
}

/// Output of posterior-SNR channel selection.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub channel: usize,
    /// `10·log10(‖ŝ_c‖²/‖n̂_c‖²)` per channel (`+∞` for a silent noise estimate).
    pub snr_db: Vec<f64>,
    /// Some channel had a silent noise estimate.
    pub flagged: bool,
}

/// Picks the channel whose speech-to-noise estimate energy ratio is largest;
/// ties go to the lowest index.
pub fn posterior_snr_select(s_hat: &Tensor<f64>, n_hat: &Tensor<f64>) -> Result<Selection> {
    if s_hat.shape() != n_hat.shape() || s_hat.rank() != 2 {
        return Err(Error::shape("posterior_snr_select", s_hat.shape(), n_hat.shape()));
    }
    let c = s_hat.shape()[1];
    let mut flagged = false;
    let snr_db: Vec<f64> = (0..c)
        .map(|ch| {
            let es = dot(&channel(s_hat, ch), &channel(s_hat, ch));
            let en = dot(&channel(n_hat, ch), &channel(n_hat, ch));
            if en == 0.0 {
                flagged = true;
                f64::INFINITY
            } else {
                10.0 * (es / en).log10()
            }
        })
        .collect();
    let mut best = 0;
    for (ch, &v) in snr_db.iter().enumerate() {
        if v > snr_db[best] {
            best = ch;
        }
    }
    Ok(Selection {
        channel: best,
        snr_db,
        flagged,
    })
}

/// Per-utterance metrics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UtteranceResult {
    pub id: String,
    pub channel: usize,
    pub si_sdr: f64,
    pub projection_sdr: f64,
    pub input_si_sdr: f64,
    pub improvement: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Aggregate {
    pub mean: f64,
    pub median: f64,
}

impl Aggregate {
    fn of(values: impl Iterator<Item = f64>) -> Self {
        let mut v: Vec<f64> = values.collect();
        if v.is_empty() {
            return Self {
                mean: f64::NAN,
                median: f64::NAN,
            };
        }
        v.sort_by(f64::total_cmp);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let mid = v.len() / 2;
        let median = if v.len() % 2 == 1 { v[mid] } else { 0.5 * (v[mid - 1] + v[mid]) };
        Self { mean, median }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub utterances: Vec<UtteranceResult>,
    /// Utterances that could not be evaluated, with the reason.
    pub skipped: Vec<(String, String)>,
}

impl EvalReport {
    pub fn si_sdr(&self) -> Aggregate {
        Aggregate::of(self.utterances.iter().map(|u| u.si_sdr))
    }

    pub fn projection_sdr(&self) -> Aggregate {
        Aggregate::of(self.utterances.iter().map(|u| u.projection_sdr))
    }

    pub fn input_si_sdr(&self) -> Aggregate {
        Aggregate::of(self.utterances.iter().map(|u| u.input_si_sdr))
    }

    pub fn improvement(&self) -> Aggregate {
        Aggregate::of(self.utterances.iter().map(|u| u.improvement))
    }

    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "id,channel,si_sdr_db,projection_sdr_db,input_si_sdr_db,improvement_db")?;
        for u in &self.utterances {
            writeln!(
                out,
                "{},{},{:.6},{:.6},{:.6},{:.6}",
                u.id, u.channel, u.si_sdr, u.projection_sdr, u.input_si_sdr, u.improvement
            )?;
        }
        Ok(())
    }

    pub fn summary(&self) -> String {
        let row = |name: &str, a: Aggregate| format!("{name:<18} mean {:>8.3} dB   median {:>8.3} dB\n", a.mean, a.median);
        let mut s = format!("utterances: {} evaluated, {} skipped\n", self.utterances.len(), self.skipped.len());
        s += &row("input SI-SDR", self.input_si_sdr());
        s += &row("output SI-SDR", self.si_sdr());
        s += &row("projection SDR", self.projection_sdr());
        s += &row("SI-SDR improvement", self.improvement());
        s
    }
}

/// Metrics of one enhanced utterance against its clean speech.
pub fn score(
    id: &str,
    sample: &MixtureSample,
    s_hat: &Tensor<f64>,
    n_hat: &Tensor<f64>,
    filter_len: usize,
) -> Result<UtteranceResult> {
    let sel = posterior_snr_select(s_hat, n_hat)?;
    let c = sel.channel;
    let reference = channel(&sample.speech, c);
    let est = channel(s_hat, c);
    let si = si_sdr(&est, &reference)?;
    let input = si_sdr(&channel(&sample.mixture, c), &reference)?;
    Ok(UtteranceResult {
        id: id.to_string(),
        channel: c,
        si_sdr: si,
        projection_sdr: projection_sdr(&est, &reference, filter_len)?.db,
        input_si_sdr: input,
        improvement: si - input,
    })
}

/// Evaluates any enhancer returning `(ŝ, n̂)` for a mixture.
pub fn evaluate_with<I, E>(samples: I, mut enhancer: E, filter_len: usize) -> EvalReport
where
    I: IntoIterator<Item = (String, Result<MixtureSample>)>,
    E: FnMut(&MixtureSample) -> Result<(Tensor<f64>, Tensor<f64>)>,
{
    let mut report = EvalReport::default();
    for (id, sample) in samples {
        let outcome = sample.and_then(|s| {
            let (sh, nh) = enhancer(&s)?;
            score(&id, &s, &sh, &nh, filter_len)
        });
        match outcome {
            Ok(r) => report.utterances.push(r),
            Err(e) => report.skipped.push((id, e.to_string())),
        }
    }
    report
}

/// Runs a model through [`enhance`] in its own precision.
pub fn model_enhancer<'a, T: Real>(
    model: &'a Model<T>,
    codec: &'a StftCodec<T>,
) -> impl FnMut(&MixtureSample) -> Result<(Tensor<f64>, Tensor<f64>)> + 'a {
    move |s| {
        let (sh, nh) = enhance(model, codec, &s.mixture.cast())?;
        Ok((sh.cast(), nh.cast()))
    }
}

pub fn evaluate<T: Real, I>(model: &Model<T>, codec: &StftCodec<T>, samples: I, filter_len: usize) -> EvalReport
where
    I: IntoIterator<Item = (String, Result<MixtureSample>)>,
{
    evaluate_with(samples, model_enhancer(model, codec), filter_len)
}

/// Metrics of the best speech mask whose real and imaginary parts are both
/// non-negative, the range of a ReLU mask head. Per bin that is the ideal
/// ratio mask `S/Y` clipped to the first quadrant, which minimises
/// `|M·Y − S|` over the quadrant. `sample` must be exactly one segment long
/// for `codec` to reproduce what the network sees.
pub fn first_quadrant_bound(codec: &StftCodec<f64>, id: &str, sample: &MixtureSample) -> Result<UtteranceResult> {
    let y = codec.stft(&sample.mixture)?;
    let s = codec.stft(&sample.speech)?;
    let c = y.channels();
    let (yd, sd) = (y.stacked.tensor().data(), s.stacked.tensor().data());
    let mut m = vec![0.0; yd.len()];
    for (row, (yr, sr)) in m.chunks_exact_mut(2 * c).zip(yd.chunks_exact(2 * c).zip(sd.chunks_exact(2 * c))) {
        for ch in 0..c {
            let (a, b) = (yr[ch], yr[c + ch]);
            let (p, q) = (sr[ch], sr[c + ch]);
            let d = a * a + b * b;
            if d > 0.0 {
                row[ch] = ((p * a + q * b) / d).max(0.0);
                row[c + ch] = ((q * a - p * b) / d).max(0.0);
            }
        }
    }
    let mask = MaskPair::from_speech(StackedComplex::new(Tensor::new(y.stacked.shape(), m)?)?);
    let (sh, nh) = estimate_sources(&y, &mask)?;
    score(id, sample, &codec.istft(&sh)?, &codec.istft(&nh)?, 1)
}

/// Per-channel attention of the input CA unit.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSummary {
    /// `bands × C` mean magnitudes received by each input channel.
    pub bands: Vec<Vec<f64>>,
    /// Band-independent per-channel means.
    pub channel_means: Vec<f64>,
    pub argmax: usize,
    /// Largest deviation of a column magnitude sum from 1.
    pub max_column_error: f64,
}

impl AttentionSummary {
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "band,channel,mean_magnitude")?;
        for (b, row) in self.bands.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                writeln!(out, "{b},{c},{v:.9e}")?;
            }
        }
        Ok(())
    }
}

/// Attention maps of the input CA unit for consecutive native-length
/// segments of `mixture` (`N×C`, `N` at least one segment).
pub fn input_attention_maps<T: Real>(
    model: &Model<T>,
    codec: &StftCodec<T>,
    mixture: &Tensor<f64>,
) -> Result<Vec<AttentionMap<T>>> {
    let cfg = model.config();
    let seg = codec
        .config()
        .samples_for_frames(cfg.frames)
        .ok_or_else(|| Error::config("codec.pad", "no samples per segment"))?;
    let (n, c) = (mixture.shape()[0], mixture.shape()[1]);
    if n < seg {
        return Err(Error::invalid_shape("attention", format!("need at least {seg} samples, got {n}")));
    }
    let mut maps = Vec::new();
    for start in (0..=n - seg).step_by(seg) {
        let chunk = mixture.slice_axis(0, start, seg)?.cast::<T>();
        let spec = codec.stft(&chunk)?;
        let mut tape = Tape::new();
        let x = tape.constant(model.input_features(&spec)?);
        let fwd = model.forward(&mut tape, x)?;
        maps.push(AttentionMap::from_tape(&tape, fwd.input_attention));
        debug_assert_eq!(maps.last().map(|m| m.channels()), Some(c));
    }
    Ok(maps)
}

/// Averages the input CA unit's attention over all segments of a mixture and
/// reports which channel receives the most.
pub fn attention_snr_experiment<T: Real>(
    model: &Model<T>,
    codec: &StftCodec<T>,
    mixture: &Tensor<f64>,
    bands: usize,
) -> Result<AttentionSummary> {
    let maps = input_attention_maps(model, codec, mixture)?;
    let c = model.config().channels;
    let mut band_sums: Vec<Vec<f64>> = Vec::new();
    let mut max_column_error = 0.0f64;
    for m in &maps {
        for s in m.column_sums().data() {
            max_column_error = max_column_error.max((s.f64() - 1.0).abs());
        }
        let b = m.band_channel_means(bands);
        if band_sums.is_empty() {
            band_sums = vec![vec![0.0; c]; b.len()];
        }
        for (acc, row) in band_sums.iter_mut().zip(b) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v / maps.len() as f64;
            }
        }
    }
    let channel_means: Vec<f64> = (0..c)
        .map(|ch| band_sums.iter().map(|r| r[ch]).sum::<f64>() / band_sums.len() as f64)
        .collect();
    let argmax = (0..c).fold(0, |best, ch| if channel_means[ch] > channel_means[best] { ch } else { best });
    Ok(AttentionSummary {
        bands: band_sums,
        channel_means,
        argmax,
        max_column_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn si_sdr_examples() {
        assert_eq!(si_sdr(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), MAX_DB);
        assert!(si_sdr(&[0.5, 0.5], &[1.0, 0.0]).unwrap().abs() < 1e-12);
        let r = [0.3, -1.2, 0.8, 0.1];
        let e = [0.2, -1.0, 0.9, 0.3];
        let a = si_sdr(&e, &r).unwrap();
        let b = si_sdr(&e.map(|v| 2.0 * v), &r).unwrap();
        assert!((a - b).abs() < 1e-9);
        assert!(si_sdr(&e, &[0.0; 4]).is_err());
    }

    #[test]
    fn projection_reduces_to_si_sdr() {
        let r: Vec<f64> = (0..200).map(|i| ((i * 7919) % 101) as f64 / 50.0 - 1.0).collect();
        let e: Vec<f64> = (0..200).map(|i| ((i * 104_729) % 97) as f64 / 48.0 - 1.0).collect();
        let p = projection_sdr(&e, &r, 1).unwrap();
        assert!((p.db - si_sdr(&e, &r).unwrap()).abs() < 1e-9);
        assert!(!p.regularized);
    }

    #[test]
    fn projection_absorbs_a_delay() {
        let r: Vec<f64> = (0..300).map(|i| ((i * 7919) % 101) as f64 / 50.0 - 1.0).collect();
        let mut e = vec![0.0; 300];
        e[3..].copy_from_slice(&r[..297]);
        assert!(projection_sdr(&e, &r, 8).unwrap().db >= 60.0);
    }

    #[test]
    fn selection_examples() {
        let s = Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap();
        let n = Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap();
        let sel = posterior_snr_select(&s, &n).unwrap();
        assert_eq!(sel.channel, 1);
        assert!((sel.snr_db[1] - 10.0 * 4f64.log10()).abs() < 1e-12);
        let n0 = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
        let sel = posterior_snr_select(&s, &n0).unwrap();
        assert_eq!(sel.channel, 1);
        assert!(sel.flagged);
        let tie = posterior_snr_select(&n, &n).unwrap();
        assert_eq!(tie.channel, 0);
    }

    #[test]
    fn aggregates() {
        let a = Aggregate::of([3.0, 1.0, 2.0, 10.0].into_iter());
        assert_eq!(a.mean, 4.0);
        assert_eq!(a.median, 2.5);
    }
}
