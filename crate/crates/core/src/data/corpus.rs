use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::derive_seed;
use super::synth::{synth_sample, Sample, SynthConfig};
use crate::container;
use crate::error::{Error, Result};
use crate::frontends::{VideoClip, Waveform};
use crate::tensor::Tensor;

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    pub transcript: String,
    pub duration: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Corpus {
    /// `n_train + n_test` samples, each seeded from `(seed, split, index)`.
    pub fn generate(n_train: usize, n_test: usize, seed: u64, cfg: &SynthConfig) -> Result<Self> {
        let split = |tag: u64, n: usize| -> Result<Vec<Sample>> {
            (0..n)
                .map(|i| synth_sample(derive_seed(seed, &[tag, i as u64]), cfg))
                .collect()
        };
        Ok(Self {
            train: split(0, n_train)?,
            test: split(1, n_test)?,
        })
    }
}

fn write_split(dir: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = BufWriter::new(File::create(dir.join("manifest.jsonl"))?);
    for s in samples {
        let entry = ManifestEntry {
            id: s.id.clone(),
            seed: s.seed,
            transcript: s.text(),
            duration: s.duration,
        };
        serde_json::to_writer(&mut manifest, &entry)?;
        manifest.write_all(b"\n")?;
        let audio = Tensor::new(vec![s.clean.len()], s.clean.samples.clone())?;
        container::save(dir.join(format!("{}.audio.avbt", s.id)), &audio)?;
        container::save(dir.join(format!("{}.video.avbt", s.id)), &s.video.frames)?;
    }
    manifest.flush()?;
    Ok(())
}

fn read_split(dir: &Path, sample_rate: u32) -> Result<Vec<Sample>> {
    let file = File::open(dir.join("manifest.jsonl"))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: ManifestEntry = serde_json::from_str(&line)?;
        let audio = container::load(dir.join(format!("{}.audio.avbt", e.id)))?;
        let video = container::load(dir.join(format!("{}.video.avbt", e.id)))?;
        if audio.shape().len() != 1 {
            return Err(Error::Format(format!(
                "{}: audio must be one-dimensional",
                e.id
            )));
        }
        out.push(Sample {
            id: e.id,
            seed: e.seed,
            transcript: e.transcript.split_whitespace().map(String::from).collect(),
            clean: Waveform::new(audio.into_data(), sample_rate),
            video: VideoClip::new(video)?,
            duration: e.duration,
        });
    }
    Ok(out)
}

/// Writes `train/` and `test/` directories, each with a JSON-lines
/// manifest and one audio and one video container per sample.
pub fn save_corpus(dir: impl AsRef<Path>, corpus: &Corpus) -> Result<()> {
    write_split(&dir.as_ref().join("train"), &corpus.train)?;
    write_split(&dir.as_ref().join("test"), &corpus.test)
}

pub fn load_corpus(dir: impl AsRef<Path>, sample_rate: u32) -> Result<Corpus> {
    Ok(Corpus {
        train: read_split(&dir.as_ref().join("train"), sample_rate)?,
        test: read_split(&dir.as_ref().join("test"), sample_rate)?,
    })
}
