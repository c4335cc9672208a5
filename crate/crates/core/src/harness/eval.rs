use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use crate::container;
use crate::data::{derive_seed, mix_at_snr, synth_noise, NoiseKind, NoiseSpec, Sample};
use crate::error::{contract, Result};
use crate::frontends::compute_logmel;
use crate::fusion::BottleneckUpdate;
use crate::model::AvsrModel;
use crate::recognition::edit_counts;
use crate::tensor::ParamStore;

const TAG_EVAL: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseCondition {
    Clean,
    Additive(NoiseKind),
    /// Another test utterance as the interfering talker.
    Overlap,
}

/// One evaluation setting.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub noise: NoiseCondition,
    /// `None` for clean audio.
    pub snr_db: Option<f64>,
    /// Video present; `false` routes the model with the video stream absent.
    pub video: bool,
}

impl Condition {
    pub fn label(&self) -> String {
        let noise = match self.noise {
            NoiseCondition::Clean => "clean".to_string(),
            NoiseCondition::Additive(k) => k.name().to_string(),
            NoiseCondition::Overlap => "overlap".to_string(),
        };
        let snr = self.snr_db.map(|s| format!("@{s}dB")).unwrap_or_default();
        let v = if self.video { "av" } else { "a" };
        format!("{noise}{snr}/{v}")
    }
}

/// Clean plus 15, 10, 5, 0, and −5 dB of `noise`, each with and without video.
pub fn default_conditions(noise: NoiseCondition) -> Vec<Condition> {
    let mut out = Vec::new();
    for video in [true, false] {
        out.push(Condition {
            noise: NoiseCondition::Clean,
            snr_db: None,
            video,
        });
        for snr in [15.0, 10.0, 5.0, 0.0, -5.0] {
            out.push(Condition {
                noise,
                snr_db: Some(snr),
                video,
            });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub beam_width: usize,
    pub seed: u64,
    /// Directory for reconstructed spectrograms, one container per utterance.
    pub dump_recon: Option<PathBuf>,
}

/// One line of `utterances.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceResult {
    pub id: String,
    #[serde(rename = "ref")]
    pub reference: String,
    pub hyp: String,
    pub wer: f64,
    pub snr: Option<f64>,
    pub condition: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    pub condition: Condition,
    pub label: String,
    /// Word errors over reference words, pooled over the split.
    pub wer: f64,
    pub utterances: Vec<UtteranceResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub conditions: Vec<ConditionResult>,
    pub average_wer: f64,
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(AvsrModel, ParamStore)> {
    let ck = Checkpoint::load(path)?;
    let (model, mut store) = AvsrModel::new(&ck.model, 0)?;
    ck.restore_into(&mut store)?;
    Ok((model, store))
}

fn condition_audio(
    test: &[Sample],
    i: usize,
    c: &Condition,
    seed: u64,
) -> Result<crate::frontends::Waveform> {
    let s = &test[i];
    let (noise, snr) = match (c.noise, c.snr_db) {
        (NoiseCondition::Clean, _) | (_, None) => return Ok(s.clean.clone()),
        (n, Some(snr)) => (n, snr),
    };
    let noise = match noise {
        NoiseCondition::Additive(kind) => {
            let spec = NoiseSpec {
                kind,
                seed: derive_seed(seed, &[TAG_EVAL, kind as u64, i as u64]),
            };
            synth_noise(spec, s.clean.len(), s.clean.sample_rate)?
        }
        NoiseCondition::Overlap => {
            if test.len() < 2 {
                return contract("overlap conditions need at least two test utterances");
            }
            test[(i + 1) % test.len()].clean.clone()
        }
        NoiseCondition::Clean => unreachable!("handled above"),
    };
    mix_at_snr(&s.clean, &noise, snr)
}

/// Decodes `test` under every condition with beam search.
pub fn run_eval(
    model: &AvsrModel,
    store: &ParamStore,
    test: &[Sample],
    conditions: &[Condition],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if test.is_empty() {
        return contract("test split is empty");
    }
    let mut results = Vec::with_capacity(conditions.len());
    for c in conditions {
        let label = c.label();
        let (mut errors, mut words) = (0usize, 0usize);
        let mut utterances = Vec::with_capacity(test.len());
        for (i, s) in test.iter().enumerate() {
            let audio = condition_audio(test, i, c, opts.seed)?;
            let mel = compute_logmel(&audio, &model.cfg.mel)?.frames;
            let video = c.video.then_some(&s.video.frames);
            let enc = model.encode_values(store, &mel, video, BottleneckUpdate::Averaged)?;
            let hyp = model.transcribe(store, &enc.f_a, opts.beam_width)?;
            let text = model.vocab.decode(hyp.text_tokens());
            let hyp_words: Vec<&str> = text.split_whitespace().collect();
            let ref_words: Vec<&str> = s.transcript.iter().map(String::as_str).collect();
            let e = edit_counts(&ref_words, &hyp_words).distance();
            errors += e;
            words += ref_words.len();
            if let Some(dir) = &opts.dump_recon {
                let sub = dir.join(label.replace(['/', '@'], "_"));
                fs::create_dir_all(&sub)?;
                container::save(
                    sub.join(format!("{}.recon.avbt", s.id)),
                    &enc.reconstruction,
                )?;
            }
            utterances.push(UtteranceResult {
                id: s.id.clone(),
                reference: s.text(),
                hyp: text,
                wer: e as f64 / ref_words.len() as f64,
                snr: c.snr_db,
                condition: label.clone(),
            });
        }
        results.push(ConditionResult {
            condition: *c,
            label,
            wer: errors as f64 / words as f64,
            utterances,
        });
    }
    let average_wer = results.iter().map(|r| r.wer).sum::<f64>() / results.len().max(1) as f64;
    Ok(EvalReport {
        conditions: results,
        average_wer,
    })
}

fn snr_column(s: Option<f64>) -> String {
    s.map_or_else(|| "clean".to_string(), |v| format!("{v}"))
}

/// Writes `utterances.jsonl`, `report.json`, and `table.tsv` (one row per
/// noise and video setting, one column per SNR).
pub fn write_eval_report(report: &EvalReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(File::create(dir.join("utterances.jsonl"))?);
    for u in report.conditions.iter().flat_map(|c| &c.utterances) {
        serde_json::to_writer(&mut w, u)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    serde_json::to_writer_pretty(File::create(dir.join("report.json"))?, report)?;
    fs::write(dir.join("table.tsv"), eval_table(report))?;
    Ok(())
}

pub(crate) fn eval_table(report: &EvalReport) -> String {
    let mut columns: Vec<Option<f64>> = Vec::new();
    let mut rows: Vec<(String, bool)> = Vec::new();
    for r in &report.conditions {
        if !columns.contains(&r.condition.snr_db) {
            columns.push(r.condition.snr_db);
        }
        if r.condition.noise != NoiseCondition::Clean {
            let key = (noise_name(r.condition.noise), r.condition.video);
            if !rows.contains(&key) {
                rows.push(key);
            }
        }
    }
    if rows.is_empty() {
        for r in &report.conditions {
            let key = ("clean".to_string(), r.condition.video);
            if !rows.contains(&key) {
                rows.push(key);
            }
        }
    }
    let mut out = String::from("noise\tvideo");
    for c in &columns {
        out.push('\t');
        out.push_str(&snr_column(*c));
    }
    out.push_str("\tavg\n");
    for (noise, video) in rows {
        out.push_str(&format!("{noise}\t{}", if video { "on" } else { "off" }));
        let mut vals = Vec::new();
        for col in &columns {
            let hit = report.conditions.iter().find(|r| {
                r.condition.video == video
                    && r.condition.snr_db == *col
                    && (r.condition.noise == NoiseCondition::Clean
                        || noise_name(r.condition.noise) == noise)
            });
            match hit {
                Some(r) => {
                    vals.push(r.wer);
                    out.push_str(&format!("\t{:.2}", 100.0 * r.wer));
                }
                None => out.push_str("\t-"),
            }
        }
        let avg = vals.iter().sum::<f64>() / vals.len().max(1) as f64;
        out.push_str(&format!("\t{:.2}\n", 100.0 * avg));
    }
    out
}

fn noise_name(n: NoiseCondition) -> String {
    match n {
        NoiseCondition::Clean => "clean".into(),
        NoiseCondition::Additive(k) => k.name().into(),
        NoiseCondition::Overlap => "overlap".into(),
    }
}
