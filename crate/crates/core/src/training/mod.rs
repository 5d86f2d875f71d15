//! Supervised training: loss, Adam, augmentation, the training loop and
//! checkpoints.

mod adam;
mod augment;
mod checkpoint;
mod gradcheck;
mod loss;
mod toy;

use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{AdamConfig, AdamState};
pub use augment::{augment, crop_and_attenuate, AugmentSpec};
pub use checkpoint::{AnyCheckpoint, Checkpoint, RngState, MAGIC, VERSION};
pub use gradcheck::{model_gradcheck, GradCheckSpec, ModelGradCheck};
pub use toy::{toy_attention_experiment, ToyExperiment, ToyOutcome};
pub use loss::{
    batch_gradients, batch_terms, calibrate_alpha, record_loss, synthesis_for, Example, LossTerms, LossVars,
};

use crate::data::MixtureSample;
use crate::error::{Error, Result};
use crate::eval;
use crate::network::Model;
use crate::stft::{CodecConfig, StftCodec, Synthesis};
use crate::tensor::Real;

/// Header of the metric log.
pub const LOG_HEADER: &str = "step,loss,time_term,magnitude_term,alpha,val_si_sdr,wall_s";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Noise attenuation range in dB; the segment length always follows the
    /// model.
    pub attenuation_db: [f64; 2],
    /// Metric log interval in steps (0 disables).
    pub log_every: u64,
    /// Validation interval in steps (0 disables).
    pub validate_every: u64,
    /// Stop once the validation SI-SDR mean reaches this value.
    pub target_val_si_sdr: Option<f64>,
    /// FIR length of the projection metric during validation.
    pub filter_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 8,
            adam: AdamConfig::default(),
            attenuation_db: AugmentSpec::default().attenuation_db,
            log_every: 10,
            validate_every: 0,
            target_val_si_sdr: None,
            filter_len: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        self.adam.validate()?;
        AugmentSpec {
            attenuation_db: self.attenuation_db,
            segment: 1,
        }
        .validate()
    }
}

/// Outcome of one optimisation step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub terms: LossTerms,
    pub alpha: f64,
    pub loss: f64,
}

/// Summary of [`Trainer::run`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub steps: u64,
    pub last: Option<StepReport>,
    /// `(step, mean SI-SDR)` of every validation.
    pub validations: Vec<(u64, f64)>,
    pub reached_target: bool,
}

pub struct Trainer<T: Real> {
    pub model: Model<T>,
    pub codec: StftCodec<T>,
    pub adam: AdamState<T>,
    pub alpha: Option<f64>,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub config: TrainConfig,
    synthesis: Arc<Synthesis<T>>,
    augment: AugmentSpec,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: Model<T>, codec: CodecConfig, config: TrainConfig, seed: u64) -> Result<Self> {
        let adam = AdamState::new(config.adam, model.params());
        Self::assemble(model, codec, config, adam, None, 0, ChaCha8Rng::seed_from_u64(seed))
    }

    /// Resumes from a checkpoint. Adam hyperparameters come from the
    /// checkpoint, everything else in `config` applies as given.
    pub fn from_checkpoint(ckpt: Checkpoint<T>, config: TrainConfig, seed: u64) -> Result<Self> {
        let rng = ckpt.rng.map(|s| s.restore()).unwrap_or_else(|| ChaCha8Rng::seed_from_u64(seed));
        let config = TrainConfig {
            adam: ckpt.adam.config,
            ..config
        };
        Self::assemble(ckpt.model, ckpt.codec, config, ckpt.adam, ckpt.alpha, ckpt.step, rng)
    }

    fn assemble(
        model: Model<T>,
        codec: CodecConfig,
        config: TrainConfig,
        adam: AdamState<T>,
        alpha: Option<f64>,
        step: u64,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        if codec.freq_bins() != model.config().freq_bins {
            return Err(Error::config(
                "codec.window_len",
                format!("codec has {} bins, model expects {}", codec.freq_bins(), model.config().freq_bins),
            ));
        }
        let codec = StftCodec::new(codec)?;
        let synthesis = synthesis_for(&model, &codec)?;
        let augment = AugmentSpec {
            attenuation_db: config.attenuation_db,
            segment: synthesis.length(),
        };
        Ok(Self {
            model,
            codec,
            adam,
            alpha,
            step,
            rng,
            config,
            synthesis,
            augment,
        })
    }

    /// Samples per training segment.
    pub fn segment_len(&self) -> usize {
        self.augment.segment
    }

    /// Draws `batch_size` utterances with replacement and augments each.
    pub fn sample_batch(&mut self, pool: &[MixtureSample]) -> Result<Vec<Example<T>>> {
        if pool.is_empty() {
            return Err(Error::config("train", "training pool is empty"));
        }
        (0..self.config.batch_size)
            .map(|_| {
                let i = self.rng.random_range(0..pool.len());
                let seg = augment(&pool[i], &self.augment, &mut self.rng)?;
                Example::new(&self.model, &self.codec, &seg)
            })
            .collect()
    }

    /// One Adam step on a prepared batch. The first call fixes α from the
    /// batch's unweighted loss terms.
    pub fn step(&mut self, batch: &[Example<T>]) -> Result<StepReport> {
        let alpha = match self.alpha {
            Some(a) => a,
            None => {
                let a = calibrate_alpha(batch_terms(&self.model, batch, &self.synthesis)?)?;
                self.alpha = Some(a);
                a
            }
        };
        let (terms, grads) = batch_gradients(&self.model, batch, &self.synthesis, alpha)?;
        let loss = terms.total(alpha);
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                context: format!("loss at step {}", self.step + 1),
            });
        }
        self.adam.step(self.model.params_mut(), &grads)?;
        self.step += 1;
        Ok(StepReport {
            step: self.step,
            terms,
            alpha,
            loss,
        })
    }

    pub fn train_step(&mut self, pool: &[MixtureSample]) -> Result<StepReport> {
        let batch = self.sample_batch(pool)?;
        self.step(&batch)
    }

    /// Mean output SI-SDR on `val`.
    pub fn validate(&self, val: &[MixtureSample]) -> f64 {
        let items = val.iter().enumerate().map(|(i, s)| (format!("val{i}"), Ok(s.clone())));
        eval::evaluate(&self.model, &self.codec, items, self.config.filter_len).si_sdr().mean
    }

    /// Trains until `config.steps` total steps or the validation target.
    /// Writes the metric log to `log` when given, with a header line only
    /// when starting from step 0, so resumed runs can append.
    pub fn run(
        &mut self,
        train: &[MixtureSample],
        val: &[MixtureSample],
        mut log: Option<&mut dyn Write>,
    ) -> Result<RunSummary> {
        let start = Instant::now();
        if let Some(w) = log.as_deref_mut().filter(|_| self.step == 0) {
            writeln!(w, "{LOG_HEADER}").map_err(|e| Error::io("metric log", e))?;
        }
        let mut summary = RunSummary {
            steps: 0,
            last: None,
            validations: Vec::new(),
            reached_target: false,
        };
        while self.step < self.config.steps {
            let r = self.train_step(train)?;
            summary.steps += 1;
            summary.last = Some(r);
            let validate = self.config.validate_every > 0 && r.step % self.config.validate_every == 0 && !val.is_empty();
            let val_sdr = if validate { Some(self.validate(val)) } else { None };
            if let Some(v) = val_sdr {
                summary.validations.push((r.step, v));
            }
            let due = self.config.log_every > 0 && r.step % self.config.log_every == 0;
            if let Some(w) = log.as_deref_mut() {
                if due || val_sdr.is_some() {
                    writeln!(
                        w,
                        "{},{:.6e},{:.6e},{:.6e},{:.6e},{},{:.3}",
                        r.step,
                        r.loss,
                        r.terms.time,
                        r.terms.magnitude,
                        r.alpha,
                        val_sdr.map(|v| format!("{v:.4}")).unwrap_or_default(),
                        start.elapsed().as_secs_f64()
                    )
                    .map_err(|e| Error::io("metric log", e))?;
                }
            }
            if let (Some(v), Some(target)) = (val_sdr, self.config.target_val_si_sdr) {
                if v >= target {
                    summary.reached_target = true;
                    break;
                }
            }
        }
        Ok(summary)
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            model: self.model.clone(),
            codec: *self.codec.config(),
            alpha: self.alpha,
            step: self.step,
            rng: Some(RngState::capture(&self.rng)),
            adam: self.adam.clone(),
        }
    }
}
