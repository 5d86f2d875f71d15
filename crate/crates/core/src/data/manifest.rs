//! Line-delimited JSON manifests of `(speech, noise, mixture)` WAV triples
//! and the synthetic corpus recipe that produces them.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::synth::{gen_noise, gen_source, mix_at_snr, propagate, ArrayGeometry, MixtureSample, NoiseKind, SampleMeta};
use super::wav::{read_wav, write_wav, WavFormat};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::config("split", format!("unknown split {other:?}"))),
        }
    }
}

/// One utterance. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub speech: String,
    pub noise: String,
    pub mixture: String,
    pub split: Split,
}

/// Requested share of each split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub dev: f64,
    pub test: f64,
}

impl SplitFractions {
    /// Entry counts for `n` entries; test takes the remainder.
    pub fn counts(&self, n: usize) -> Result<[usize; 3]> {
        let total = self.train + self.dev + self.test;
        if [self.train, self.dev, self.test].iter().any(|f| !(*f >= 0.0)) || !(total > 0.0) {
            return Err(Error::config("splits", "fractions must be non-negative with a positive sum"));
        }
        let train = ((self.train / total) * n as f64).round() as usize;
        let dev = (((self.dev / total) * n as f64).round() as usize).min(n - train.min(n));
        let train = train.min(n);
        Ok([train, dev, n - train - dev])
    }
}

/// A file triple that could not be listed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rejected {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub base: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

fn triple(id: &str) -> [String; 3] {
    [format!("{id}_speech.wav"), format!("{id}_noise.wav"), format!("{id}_mixture.wav")]
}

impl Manifest {
    /// Lists every `<id>_mixture.wav` in `dir` whose speech and noise
    /// siblings exist and parse, and assigns splits by a seeded shuffle of
    /// the sorted ids. Incomplete triples are returned as rejections.
    pub fn build(dir: impl AsRef<Path>, fractions: SplitFractions, seed: u64) -> Result<(Self, Vec<Rejected>)> {
        let dir = dir.as_ref();
        let listing = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut ids = Vec::new();
        for item in listing {
            let item = item.map_err(|e| Error::io(dir, e))?;
            if let Some(id) = item.file_name().to_str().and_then(|n| n.strip_suffix("_mixture.wav")) {
                ids.push(id.to_string());
            }
        }
        ids.sort();
        let mut rejected = Vec::new();
        ids.retain(|id| {
            let problem = triple(id).iter().find_map(|f| {
                let p = dir.join(f);
                hound::WavReader::open(&p).err().map(|e| format!("{f}: {e}"))
            });
            match problem {
                Some(reason) => {
                    rejected.push(Rejected { id: id.clone(), reason });
                    false
                }
                None => true,
            }
        });
        let [n_train, n_dev, _] = fractions.counts(ids.len())?;
        let mut order: Vec<usize> = (0..ids.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut split = vec![Split::Test; ids.len()];
        for (rank, &i) in order.iter().enumerate() {
            split[i] = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_dev {
                Split::Dev
            } else {
                Split::Test
            };
        }
        let entries = ids
            .iter()
            .zip(split)
            .map(|(id, split)| {
                let [speech, noise, mixture] = triple(id);
                ManifestEntry {
                    id: id.clone(),
                    speech,
                    noise,
                    mixture,
                    split,
                }
            })
            .collect();
        Ok((
            Self {
                base: dir.to_path_buf(),
                entries,
            },
            rejected,
        ))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for e in &self.entries {
            writeln!(out, "{}", serde_json::to_string(e)?).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    /// Reads a manifest; relative paths resolve against its directory.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(&line)
                .map_err(|e| Error::format("manifest", format!("{} line {}: {e}", path.display(), i + 1)))?;
            entries.push(entry);
        }
        Ok(Self {
            base: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            entries,
        })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Loads the samples of one split in manifest order.
    pub fn iterate(&self, split: Split) -> impl Iterator<Item = Result<MixtureSample>> + '_ {
        self.split(split).map(move |e| self.load(e))
    }

    /// Loads one entry. The mixture is rebuilt as `speech + noise` so the
    /// additive model holds exactly; a stored mixture that disagrees by more
    /// than the storage precision is an error.
    pub fn load(&self, e: &ManifestEntry) -> Result<MixtureSample> {
        let (speech, rate) = read_wav(self.base.join(&e.speech))?;
        let (noise, rate_n) = read_wav(self.base.join(&e.noise))?;
        let (mixture, rate_m) = read_wav(self.base.join(&e.mixture))?;
        if rate != rate_n || rate != rate_m {
            return Err(Error::format("manifest", format!("{}: sample rates differ within the triple", e.id)));
        }
        if speech.shape() != noise.shape() || speech.shape() != mixture.shape() {
            return Err(Error::shape("manifest triple", speech.shape(), mixture.shape()));
        }
        let sample = MixtureSample::new(
            speech,
            noise,
            rate,
            SampleMeta {
                geometry: e.id.clone(),
                ..SampleMeta::default()
            },
        )?;
        let tol = 1e-5 * (1.0 + sample.mixture.max_abs());
        let dev = sample.mixture.zip_map(&mixture, |a, b| (a - b).abs())?.max_abs();
        if dev > tol {
            return Err(Error::format(
                "manifest",
                format!("{}: stored mixture differs from speech + noise by {dev}", e.id),
            ));
        }
        Ok(sample)
    }
}

/// Recipe of the synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub duration_s: f64,
    pub sample_rate: u32,
    pub channels: usize,
    /// Reference-channel SNR range in dB.
    pub snr_db: [f64; 2],
    /// Largest inter-channel delay in samples.
    pub max_delay: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            train: 200,
            dev: 40,
            test: 40,
            duration_s: 3.0,
            sample_rate: super::synth::SAMPLE_RATE,
            channels: 6,
            snr_db: [0.0, 10.0],
            max_delay: 3.0,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn total(&self) -> usize {
        self.train + self.dev + self.test
    }

    pub fn fractions(&self) -> SplitFractions {
        SplitFractions {
            train: self.train as f64,
            dev: self.dev as f64,
            test: self.test as f64,
        }
    }

    /// Utterance `index`, a pure function of the recipe and the index.
    pub fn utterance(&self, index: usize) -> Result<MixtureSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64 + 1);
        let source_seed: u64 = rng.random();
        let noise_seed: u64 = rng.random();
        let geometry = ArrayGeometry::random(self.channels, self.max_delay, &mut rng);
        let kind = if rng.random_bool(0.5) {
            NoiseKind::Diffuse
        } else {
            NoiseKind::Directional(ArrayGeometry::random(self.channels, self.max_delay, &mut rng))
        };
        let snr = rng.random_range(self.snr_db[0]..=self.snr_db[1]);
        let source = gen_source(self.duration_s, self.sample_rate, source_seed)?;
        let speech = propagate(&source, &geometry)?;
        let noise = gen_noise(self.duration_s, self.sample_rate, self.channels, &kind, noise_seed)?;
        let meta = SampleMeta {
            seed: source_seed,
            snr_db: Vec::new(),
            geometry: geometry.id(),
        };
        mix_at_snr(&speech, &noise, Some(snr), 0, self.sample_rate, meta)
    }

    /// Writes every utterance as a float WAV triple under `dir`, then builds
    /// and writes the manifest.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<Manifest> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for i in 0..self.total() {
            let s = self.utterance(i)?;
            let id = format!("utt{i:04}");
            let [sp, no, mx] = triple(&id);
            // Store f32-exact values so the stored triple stays additive up to
            // one rounding of the mixture.
            let speech = s.speech.map(|v| v as f32 as f64);
            let noise = s.noise.map(|v| v as f32 as f64);
            let mixture = speech.zip_map(&noise, |a, b| a + b)?;
            write_wav(dir.join(sp), &speech, self.sample_rate, WavFormat::Float32)?;
            write_wav(dir.join(no), &noise, self.sample_rate, WavFormat::Float32)?;
            write_wav(dir.join(mx), &mixture, self.sample_rate, WavFormat::Float32)?;
        }
        let (manifest, rejected) = Manifest::build(dir, self.fractions(), self.seed)?;
        if let Some(r) = rejected.first() {
            return Err(Error::format("corpus", format!("{}: {}", r.id, r.reason)));
        }
        manifest.write(dir.join(MANIFEST_FILE))?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> CorpusSpec {
        CorpusSpec {
            train: 5,
            dev: 2,
            test: 3,
            duration_s: 0.05,
            channels: 2,
            seed: 7,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn counts_follow_fractions() {
        let f = SplitFractions { train: 0.8, dev: 0.1, test: 0.1 };
        assert_eq!(f.counts(10).unwrap(), [8, 1, 1]);
        assert_eq!(CorpusSpec::default().fractions().counts(280).unwrap(), [200, 40, 40]);
    }

    #[test]
    fn corpus_round_trip_and_partition() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec();
        let m = spec.write(dir.path()).unwrap();
        assert_eq!(m.entries.len(), 10);
        let read = Manifest::read(dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(read.entries, m.entries);
        let counts: Vec<usize> = Split::ALL.iter().map(|&s| m.split(s).count()).collect();
        assert_eq!(counts, [5, 2, 3]);
        let loaded: Vec<_> = read.iterate(Split::Dev).collect::<Result<_>>().unwrap();
        assert_eq!(loaded.len(), 2);
        for s in &loaded {
            assert_eq!(s.mixture, s.speech.zip_map(&s.noise, |a, b| a + b).unwrap());
        }
        let (again, _) = Manifest::build(dir.path(), spec.fractions(), spec.seed).unwrap();
        assert_eq!(again.entries, m.entries);
    }

    #[test]
    fn missing_sibling_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        small_spec().write(dir.path()).unwrap();
        fs::remove_file(dir.path().join("utt0003_noise.wav")).unwrap();
        let (m, rejected) = Manifest::build(dir.path(), small_spec().fractions(), 1).unwrap();
        assert_eq!(m.entries.len(), 9);
        assert_eq!(rejected.len(), 1);
        assert_eq!(rejected[0].id, "utt0003");
    }
}
