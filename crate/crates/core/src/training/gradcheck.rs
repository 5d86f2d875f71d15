use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{GradCheckReport, ParamStore, Tape, Var};
use crate::data::CorpusSpec;
use crate::error::{Error, Result};
use crate::network::{Model, UNetConfig};
use crate::stft::{CodecConfig, StftCodec};

use super::augment::crop_and_attenuate;
use super::loss::{batch_terms, calibrate_alpha, record_loss, synthesis_for, Example};

/// Which entries a model gradient check perturbs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckSpec {
    pub eps: f64,
    /// Entries checked per parameter tensor, evenly spaced; `None` checks
    /// every entry.
    pub per_param: Option<usize>,
    pub seed: u64,
    /// Relative errors are taken against `max(|analytic|, |numeric|, floor)`
    /// with `floor = rel_floor · max|analytic|` over the whole model, so
    /// entries many orders of magnitude below the gradient scale are judged
    /// by their absolute error.
    pub rel_floor: f64,
}

impl Default for GradCheckSpec {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            per_param: Some(64),
            seed: 0,
            rel_floor: 1e-6,
        }
    }
}

/// Result of [`model_gradcheck`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradCheck {
    pub report: GradCheckReport,
    /// Entries whose perturbation moved some abs, relu, elu or l1
    /// input across zero (or changed a max-pool winner). Central differences
    /// are not a valid reference there, so these entries are counted but not
    /// compared.
    pub kink_crossings: usize,
    pub alpha: f64,
    /// Largest analytic gradient magnitude.
    pub grad_scale: f64,
    pub max_abs_error: f64,
}

impl ModelGradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.report.max_rel_error
    }
}

/// Biases are drawn uniformly from `±0.1` rather than left at their zero
/// initialisation, which would put every activation over the zero-padded
/// frames exactly on the ELU kink.
///
/// Fourth-order central differences,
/// `(8·[f(x+h) − f(x−h)] − [f(x+2h) − f(x−2h)]) / 12h`, against tape
/// gradients of the full weighted loss in double precision, for a freshly initialised model on one synthetic
/// segment. α is calibrated on that segment and then held fixed.
pub fn model_gradcheck(config: UNetConfig, spec: GradCheckSpec) -> Result<ModelGradCheck> {
    let mut model = Model::<f64>::new(config, spec.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x6772_6164);
    for p in model.params_mut().iter_mut().filter(|p| p.name.ends_with(".bias")) {
        for v in p.tensor.data_mut() {
            *v = rng.random_range(-0.1..0.1);
        }
    }
    let codec = StftCodec::<f64>::new(CodecConfig::for_bins(config.freq_bins))?;
    let synthesis = synthesis_for(&model, &codec)?;
    let corpus = CorpusSpec {
        channels: config.channels,
        duration_s: 0.5,
        seed: spec.seed,
        ..CorpusSpec::default()
    };
    let utterance = corpus.utterance(0)?;
    let len = synthesis.length();
    let start = (utterance.len().saturating_sub(len)) / 2;
    let segment = crop_and_attenuate(&utterance, start, len, 0.0)?;
    let example = Example::new(&model, &codec, &segment)?;
    let alpha = calibrate_alpha(batch_terms(&model, std::slice::from_ref(&example), &synthesis)?)?;
    let cfg = *model.config();
    let record = |params: &ParamStore<f64>| -> Result<(Tape<f64>, Var)> {
        let m = Model::from_params(cfg, params.clone())?;
        let mut tape = Tape::new();
        let v = record_loss(&mut tape, &m, &example, &synthesis, alpha)?;
        Ok((tape, v.total))
    };
    let (tape, loss) = record(model.params())?;
    let base_sig = tape.kink_signature();
    let grads = tape.param_grads(loss, model.params())?;
    drop(tape);
    let mut out = ModelGradCheck {
        report: GradCheckReport {
            max_rel_error: 0.0,
            worst: None,
            entries_checked: 0,
        },
        kink_crossings: 0,
        alpha,
        grad_scale: grads.tensors().iter().map(|t| t.max_abs()).fold(0.0, f64::max),
        max_abs_error: 0.0,
    };
    let floor = spec.rel_floor * out.grad_scale;
    let params = model.params();
    let mut work = params.clone();
    for (id, p) in params.iter() {
        let n = p.tensor.numel();
        let picks: Vec<usize> = match spec.per_param {
            Some(k) if k < n => (0..k).map(|j| j * n / k).collect(),
            _ => (0..n).collect(),
        };
        for i in picks {
            let orig = p.tensor.data()[i];
            let mut values = [0.0; 4];
            let mut smooth = true;
            for (slot, k) in values.iter_mut().zip([1.0, -1.0, 2.0, -2.0]) {
                work.tensor_mut(id).data_mut()[i] = orig + k * spec.eps;
                let (t, l) = record(&work)?;
                *slot = t.value(l).item();
                smooth &= t.kink_signature() == base_sig;
            }
            work.tensor_mut(id).data_mut()[i] = orig;
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("gradcheck objective at {}[{i}]", p.name),
                });
            }
            if !smooth {
                out.kink_crossings += 1;
                continue;
            }
            let [p1, m1, p2, m2] = values;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * spec.eps);
            let analytic = grads.by_id(id).data()[i];
            let abs = (analytic - numeric).abs();
            out.max_abs_error = out.max_abs_error.max(abs);
            let err = abs / analytic.abs().max(numeric.abs()).max(floor);
            out.report.entries_checked += 1;
            if out.report.worst.is_none() || err > out.report.max_rel_error {
                out.report.max_rel_error = err;
                out.report.worst = Some((p.name.clone(), i));
            }
        }
    }
    Ok(out)
}
