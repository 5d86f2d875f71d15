use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cadunet::config::{Precision, Preset, RunConfig};
use cadunet::data::{read_wav, write_wav, Manifest, MixtureSample, Split, WavFormat, MANIFEST_FILE};
use cadunet::error::{Error, Result};
use cadunet::eval::{self, attention_snr_experiment, input_attention_maps};
use cadunet::network::{enhance, Model};
use cadunet::oracles::{run_oracle_suite, Scope};
use cadunet::stft::StftCodec;
use cadunet::training::{
    model_gradcheck, toy_attention_experiment, AnyCheckpoint, Checkpoint, GradCheckSpec, ToyExperiment, Trainer,
};
use cadunet::Real;

/// Relative error above which `gradcheck` fails.
const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Exit status of a check that ran but did not pass.
const EXIT_CHECK_FAILED: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "cadunet", version, about = "Multichannel speech enhancement with a channel-attention dense U-Net")]
struct Cli {
    #[command(flatten)]
    common: Common,

    /// Print the paper-scale configuration as TOML and exit.
    #[arg(long)]
    paper_defaults: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

/// Flags shared by every subcommand; each overrides the config key of the
/// same name.
#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    preset: Option<Preset>,
    /// train.steps
    #[arg(long, global = true)]
    steps: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// data_dir
    #[arg(long = "data", global = true)]
    data_dir: Option<PathBuf>,
    #[arg(long, global = true, value_parser = parse_precision)]
    precision: Option<Precision>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic corpus and its manifest to the data directory.
    SynthData,
    /// Train on the train split, validating on dev.
    Train,
    /// Enhance a multichannel WAV file.
    Enhance {
        #[arg(long)]
        input: PathBuf,
    },
    /// Score a split of the corpus.
    Evaluate {
        #[arg(long, default_value = "test")]
        split: Split,
        /// FIR length of the projection metric.
        #[arg(long, default_value_t = 1)]
        filter_len: usize,
    },
    /// Export input attention maps, or run the toy channel-SNR experiment
    /// when no input is given.
    InspectAttention {
        #[arg(long)]
        input: Option<PathBuf>,
        /// Frequency bands of the per-channel summary.
        #[arg(long, default_value_t = 4)]
        bands: usize,
    },
    /// Finite-difference check of the model gradients.
    Gradcheck {
        /// Entries per parameter tensor (0 checks all).
        #[arg(long, default_value_t = 64)]
        per_param: usize,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        /// Also run the brute-force oracle suite.
        #[arg(long)]
        extended: bool,
    },
}

fn parse_precision(s: &str) -> std::result::Result<Precision, String> {
    match s {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        _ => Err(format!("unknown precision {s:?} (expected f32 or f64)")),
    }
}

impl Common {
    fn resolve(&self, fallback: Preset) -> Result<RunConfig> {
        let mut cfg = RunConfig::resolve(self.config.as_deref(), self.preset, fallback)?;
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.steps {
            cfg.train.steps = v;
        }
        if let Some(v) = &self.out {
            cfg.out = v.clone();
        }
        if let Some(v) = &self.checkpoint {
            cfg.checkpoint = Some(v.clone());
        }
        if let Some(v) = &self.data_dir {
            cfg.data_dir = v.clone();
        }
        if let Some(v) = self.precision {
            cfg.precision = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

enum Outcome {
    Done,
    CheckFailed,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.paper_defaults {
        print!("{}", RunConfig::paper_defaults_toml());
        return ExitCode::SUCCESS;
    }
    let Some(command) = cli.command else {
        eprintln!("error: no subcommand given (see --help)");
        return ExitCode::from(2);
    };
    match run(&cli.common, command) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::CheckFailed) => ExitCode::from(EXIT_CHECK_FAILED),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(common: &Common, command: Command) -> Result<Outcome> {
    match command {
        Command::SynthData => synth_data(&common.resolve(Preset::Paper)?),
        Command::Train => {
            let cfg = common.resolve(Preset::Paper)?;
            match cfg.precision {
                Precision::F32 => train::<f32>(&cfg),
                Precision::F64 => train::<f64>(&cfg),
            }
        }
        Command::Enhance { input } => {
            let cfg = common.resolve(Preset::Paper)?;
            match load_checkpoint(&cfg)? {
                AnyCheckpoint::F32(c) => enhance_file(&cfg, c, &input),
                AnyCheckpoint::F64(c) => enhance_file(&cfg, c, &input),
            }
        }
        Command::Evaluate { split, filter_len } => {
            let cfg = common.resolve(Preset::Paper)?;
            match load_checkpoint(&cfg)? {
                AnyCheckpoint::F32(c) => evaluate_split(&cfg, c, split, filter_len),
                AnyCheckpoint::F64(c) => evaluate_split(&cfg, c, split, filter_len),
            }
        }
        Command::InspectAttention { input: Some(input), bands } => {
            let cfg = common.resolve(Preset::Paper)?;
            match load_checkpoint(&cfg)? {
                AnyCheckpoint::F32(c) => inspect_input(&cfg, c, &input, bands),
                AnyCheckpoint::F64(c) => inspect_input(&cfg, c, &input, bands),
            }
        }
        Command::InspectAttention { input: None, bands } => {
            let cfg = common.resolve(Preset::Tiny)?;
            match cfg.precision {
                Precision::F32 => toy_experiment::<f32>(&cfg, bands),
                Precision::F64 => toy_experiment::<f64>(&cfg, bands),
            }
        }
        Command::Gradcheck {
            per_param,
            eps,
            extended,
        } => gradcheck(&common.resolve(Preset::Tiny)?, per_param, eps, extended),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn create_file(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn load_checkpoint(cfg: &RunConfig) -> Result<AnyCheckpoint> {
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig {
            field: "checkpoint".into(),
            msg: "this subcommand needs a trained checkpoint".into(),
        })?;
    AnyCheckpoint::load(path)
}

fn load_split(cfg: &RunConfig, split: Split) -> Result<Vec<MixtureSample>> {
    let manifest = Manifest::read(cfg.data_dir.join(MANIFEST_FILE))?;
    manifest.iterate(split).collect()
}

fn synth_data(cfg: &RunConfig) -> Result<Outcome> {
    let manifest = cfg.corpus.write(&cfg.data_dir)?;
    let counts: Vec<String> = Split::ALL
        .iter()
        .map(|&s| format!("{s} {}", manifest.split(s).count()))
        .collect();
    println!(
        "wrote {} utterances to {} ({})",
        cfg.corpus.total(),
        cfg.data_dir.display(),
        counts.join(", ")
    );
    Ok(Outcome::Done)
}

fn train<T: Real>(cfg: &RunConfig) -> Result<Outcome> {
    let train = load_split(cfg, Split::Train)?;
    let dev = load_split(cfg, Split::Dev)?;
    create_dir(&cfg.out)?;
    let resume = cfg.checkpoint.as_ref().filter(|p| p.exists());
    let mut trainer = match resume {
        Some(path) => {
            let ckpt = Checkpoint::<T>::load(path)?;
            if *ckpt.model.config() != cfg.unet {
                return Err(Error::InvalidConfig {
                    field: "unet".into(),
                    msg: format!("checkpoint {} was trained with a different architecture", path.display()),
                });
            }
            Trainer::from_checkpoint(ckpt, cfg.train, cfg.seed)?
        }
        None => Trainer::new(Model::<T>::new(cfg.unet, cfg.seed)?, cfg.codec, cfg.train, cfg.seed)?,
    };
    let log_path = cfg.out.join("train_log.csv");
    let log = OpenOptions::new()
        .create(true)
        .append(trainer.step > 0)
        .write(true)
        .truncate(trainer.step == 0)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(log);
    let total = cfg.train.steps;
    println!(
        "training {} parameters from step {} to {total} on {} utterances",
        trainer.model.num_params(),
        trainer.step,
        train.len()
    );
    while trainer.step < total {
        trainer.config.steps = (trainer.step + cfg.checkpoint_every).min(total);
        let summary = match trainer.run(&train, &dev, Some(&mut log)) {
            Ok(s) => s,
            Err(e) => {
                let dump = cfg.out.join("failed.ckpt");
                trainer.checkpoint().save(&dump)?;
                log.flush().map_err(|e| Error::io(&log_path, e))?;
                eprintln!("training state saved to {}", dump.display());
                return Err(e);
            }
        };
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        let path = cfg.out.join(format!("step{:08}.ckpt", trainer.step));
        trainer.checkpoint().save(&path)?;
        trainer.checkpoint().save(cfg.out.join("last.ckpt"))?;
        if let Some(r) = summary.last {
            println!("step {:>8}  loss {:.6e}", r.step, r.loss);
        }
        for (step, v) in &summary.validations {
            println!("step {step:>8}  dev SI-SDR {v:.3} dB");
        }
        if summary.reached_target {
            println!("validation target reached");
            break;
        }
    }
    Ok(Outcome::Done)
}

fn enhance_file<T: Real>(cfg: &RunConfig, ckpt: Checkpoint<T>, input: &Path) -> Result<Outcome> {
    let (y, sr) = read_wav(input)?;
    let codec = StftCodec::<T>::new(ckpt.codec)?;
    let (s, n) = enhance(&ckpt.model, &codec, &y.cast::<T>())?;
    let (s, n) = (s.cast::<f64>(), n.cast::<f64>());
    let worst = s
        .data()
        .iter()
        .zip(n.data())
        .zip(y.data())
        .map(|((a, b), c)| (a + b - c).abs())
        .fold(0.0, f64::max);
    create_dir(&cfg.out)?;
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("input");
    let sp = cfg.out.join(format!("{stem}_speech.wav"));
    let np = cfg.out.join(format!("{stem}_noise.wav"));
    write_wav(&sp, &s, sr, WavFormat::Float32)?;
    write_wav(&np, &n, sr, WavFormat::Float32)?;
    println!("wrote {} and {}", sp.display(), np.display());
    println!("max |speech + noise - input| = {worst:.3e}");
    Ok(Outcome::Done)
}

fn evaluate_split<T: Real>(cfg: &RunConfig, ckpt: Checkpoint<T>, split: Split, filter_len: usize) -> Result<Outcome> {
    let manifest = Manifest::read(cfg.data_dir.join(MANIFEST_FILE))?;
    let codec = StftCodec::<T>::new(ckpt.codec)?;
    let items = manifest.split(split).map(|e| (e.id.clone(), manifest.load(e)));
    let report = eval::evaluate(&ckpt.model, &codec, items, filter_len);
    create_dir(&cfg.out)?;
    let path = cfg.out.join(format!("eval_{split}.csv"));
    let mut f = create_file(&path)?;
    report.write_csv(&mut f).and_then(|_| f.flush()).map_err(|e| Error::io(&path, e))?;
    print!("{}", report.summary());
    for (id, why) in &report.skipped {
        eprintln!("skipped {id}: {why}");
    }
    println!("per-utterance results in {}", path.display());
    Ok(Outcome::Done)
}

fn inspect_input<T: Real>(cfg: &RunConfig, ckpt: Checkpoint<T>, input: &Path, bands: usize) -> Result<Outcome> {
    let (y, _) = read_wav(input)?;
    let codec = StftCodec::<T>::new(ckpt.codec)?;
    let maps = input_attention_maps(&ckpt.model, &codec, &y)?;
    let summary = attention_snr_experiment(&ckpt.model, &codec, &y, bands)?;
    create_dir(&cfg.out)?;
    for (i, m) in maps.iter().enumerate() {
        let path = cfg.out.join(format!("attention_seg{i:04}.csv"));
        let mut f = create_file(&path)?;
        m.write_csv(&mut f).and_then(|_| f.flush()).map_err(|e| Error::io(&path, e))?;
    }
    write_summary(cfg, &summary)?;
    println!("wrote {} attention maps to {}", maps.len(), cfg.out.display());
    print_channel_means(&summary.channel_means);
    Ok(Outcome::Done)
}

fn write_summary(cfg: &RunConfig, summary: &eval::AttentionSummary) -> Result<()> {
    let path = cfg.out.join("attention_summary.csv");
    let mut f = create_file(&path)?;
    summary.write_csv(&mut f).and_then(|_| f.flush()).map_err(|e| Error::io(&path, e))
}

fn print_channel_means(means: &[f64]) {
    for (c, m) in means.iter().enumerate() {
        println!("channel {c}: mean attention {m:.6}");
    }
}

fn toy_experiment<T: Real>(cfg: &RunConfig, bands: usize) -> Result<Outcome> {
    let exp = ToyExperiment {
        unet: cfg.unet,
        train: cfg.train,
        toy: cfg.toy,
        bands,
        seed: cfg.seed,
        ..ToyExperiment::default()
    };
    println!(
        "training a {:?} model on {} toy utterances for {} steps",
        cfg.unet.variant, exp.utterances, cfg.train.steps
    );
    let outcome = toy_attention_experiment::<T>(&exp)?;
    create_dir(&cfg.out)?;
    write_summary(cfg, &outcome.summary)?;
    print_channel_means(&outcome.summary.channel_means);
    println!(
        "most attended channel {} (quiet-noise channel {})",
        outcome.summary.argmax, cfg.toy.high_channel
    );
    Ok(if outcome.favours_high_channel(&cfg.toy) {
        Outcome::Done
    } else {
        Outcome::CheckFailed
    })
}

fn gradcheck(cfg: &RunConfig, per_param: usize, eps: f64, extended: bool) -> Result<Outcome> {
    let spec = GradCheckSpec {
        eps,
        per_param: (per_param > 0).then_some(per_param),
        seed: cfg.seed,
        ..GradCheckSpec::default()
    };
    let r = model_gradcheck(cfg.unet, spec)?;
    println!(
        "checked {} entries ({} skipped at kinks), gradient scale {:.3e}",
        r.report.entries_checked, r.kink_crossings, r.grad_scale
    );
    let worst = r.report.worst.as_ref().map(|(n, i)| format!(" at {n}[{i}]")).unwrap_or_default();
    println!("max relative error {:.3e}{worst}", r.max_rel_error());
    let mut ok = r.max_rel_error() < GRADCHECK_TOLERANCE;
    if extended {
        let report = run_oracle_suite(Scope::All);
        print!("{report}");
        ok &= report.passed();
    }
    Ok(if ok { Outcome::Done } else { Outcome::CheckFailed })
}
