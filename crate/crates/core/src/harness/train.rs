use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::optim::{clip_global_norm, lr_at, AdamW};
use crate::data::{
    curriculum_phase, derive_seed, mix_at_snr, synth_noise, Corpus, NoiseSpec, Sample, SnrChoice,
};
use crate::error::{Error, Result};
use crate::frontends::{compute_logmel, MelConfig};
use crate::fusion::BottleneckUpdate;
use crate::model::{AvsrModel, LossOptions, ModelConfig, TrainItem};
use crate::nn::Ctx;
use crate::recognition::{wer_str, LossReport};
use crate::tensor::{ParamStore, Tape, Tensor};

const TAG_ORDER: u64 = 1;
const TAG_NOISE: u64 = 2;
const TAG_DROPOUT: u64 = 4;

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub phase: u8,
    pub steps: usize,
    pub lr: f64,
    pub l_total: f64,
    pub l_avsr: f64,
    pub l_enhance: f64,
    pub l_ctc_a: f64,
    pub l_ctc_v: f64,
    pub l_att: f64,
    pub l_recon: f64,
    pub l_percep: f64,
    pub train_wer: f64,
    /// Training draws per SNR condition (`clean` or the dB value).
    pub snr_histogram: BTreeMap<String, usize>,
}

pub struct TrainOutcome {
    pub model: AvsrModel,
    pub store: ParamStore,
    pub history: Vec<EpochMetrics>,
    /// Checkpoints still on disk, oldest first.
    pub checkpoints: Vec<PathBuf>,
}

/// Clean-feature statistics of the training split, used as the model's
/// fixed input standardisation.
pub fn feature_stats(samples: &[Sample], mel: &MelConfig) -> Result<(f64, f64)> {
    let (mut n, mut sum, mut sq) = (0usize, 0.0, 0.0);
    for s in samples {
        let m = compute_logmel(&s.clean, mel)?;
        for &v in m.frames.data() {
            n += 1;
            sum += v;
            sq += v * v;
        }
    }
    if n == 0 {
        return Err(Error::Contract("training split is empty".into()));
    }
    let mean = sum / n as f64;
    let std = (sq / n as f64 - mean * mean).max(1e-12).sqrt();
    Ok((mean, std))
}

/// Noisy input of `sample` for condition `snr`; `seed` picks the noise.
pub fn noisy_logmel(
    sample: &Sample,
    snr: SnrChoice,
    noise: NoiseSpec,
    mel: &MelConfig,
) -> Result<Tensor> {
    let audio = match snr {
        SnrChoice::Clean => sample.clean.clone(),
        SnrChoice::Db(db) => {
            let n = synth_noise(noise, sample.clean.len(), sample.clean.sample_rate)?;
            mix_at_snr(&sample.clean, &n, db)?
        }
    };
    Ok(compute_logmel(&audio, mel)?.frames)
}

fn snr_key(c: SnrChoice) -> String {
    match c {
        SnrChoice::Clean => "clean".into(),
        SnrChoice::Db(v) => format!("{v}"),
    }
}

pub fn loss_options(cfg: &RunConfig, enhance_enabled: bool) -> Result<LossOptions> {
    Ok(LossOptions {
        ctc_weight: cfg.ctc_weight,
        weights: cfg.enhance_weights()?,
        enhance_enabled,
        update: BottleneckUpdate::Averaged,
    })
}

/// Greedy-decoded WER (corpus level) of clean utterances.
pub fn greedy_wer(
    model: &AvsrModel,
    store: &ParamStore,
    samples: &[Sample],
    use_video: bool,
) -> Result<f64> {
    let (mut errors, mut words) = (0.0, 0usize);
    for s in samples {
        let mel = compute_logmel(&s.clean, &model.cfg.mel)?.frames;
        let video = use_video.then_some(&s.video.frames);
        let enc = model.encode_values(store, &mel, video, BottleneckUpdate::Averaged)?;
        let hyp = model.transcribe(store, &enc.f_a, 1)?;
        let text = model.vocab.decode(hyp.text_tokens());
        let n = s.transcript.len();
        errors += wer_str(&s.text(), &text)? * n as f64;
        words += n;
    }
    Ok(errors / words.max(1) as f64)
}

/// Loss and summed parameter gradients of one mini-batch.
fn batch_gradients(
    model: &AvsrModel,
    store: &ParamStore,
    items: &[TrainItem],
    opts: &LossOptions,
    dropout: f64,
    mask_seed: u64,
) -> Result<(Vec<Tensor>, Vec<LossReport>)> {
    let mut acc: Vec<Tensor> = store
        .values()
        .iter()
        .map(|t| Tensor::zeros(t.shape()))
        .collect();
    let mut reports = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        // The stop-gradient perceptual target is taken without dropout.
        let target = opts
            .enhance_enabled
            .then(|| model.perceptual_target_value(store, &item.clean_mel))
            .transpose()?;
        let mut tape = Tape::new();
        let pv = store.bind(&mut tape);
        let mut cx =
            Ctx::new(&mut tape, &pv).with_dropout(dropout, derive_seed(mask_seed, &[i as u64]));
        let loss = model.loss(&mut cx, item, opts, target.as_ref())?;
        let report = loss.report(&tape, opts);
        let total = tape.scalar(loss.total);
        if !total.is_finite() {
            return Err(Error::NonFinite {
                op: tape.op_name(loss.total),
                node: loss.total.index(),
            });
        }
        if report.l_total.to_bits() != total.to_bits()
            || !report.identities_hold(opts.ctc_weight, opts.weights)
        {
            return Err(Error::Contract(format!(
                "loss identities violated: {report:?} vs tape {total}"
            )));
        }
        let grads = tape.backward(loss.total)?;
        for id in store.ids() {
            if let Some(g) = grads.data(pv[id]) {
                acc[id.0]
                    .data_mut()
                    .iter_mut()
                    .zip(g)
                    .for_each(|(a, b)| *a += b);
            }
        }
        reports.push(report);
    }
    let scale = 1.0 / items.len() as f64;
    acc.iter_mut()
        .for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= scale));
    Ok((acc, reports))
}

/// Trains on `corpus.train` per `cfg`, writing `metrics.jsonl`, the
/// resolved config, and per-epoch checkpoints under `cfg.out_dir`.
pub fn run_train(cfg: &RunConfig, corpus: &Corpus) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus.train.is_empty() {
        return Err(Error::Contract("training split is empty".into()));
    }
    let mut model_cfg: ModelConfig = cfg.model_config()?;
    let (mean, std) = feature_stats(&corpus.train, &model_cfg.mel)?;
    model_cfg.feature_mean = mean;
    model_cfg.feature_std = std;
    let (model, mut store) = AvsrModel::new(&model_cfg, cfg.seed)?;
    let mut opt = AdamW::new(&store, cfg.weight_decay);

    let ckpt_dir = cfg.out_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    fs::write(cfg.out_dir.join("config.toml"), cfg.to_toml())?;
    let mut metrics_file = BufWriter::new(File::create(cfg.out_dir.join("metrics.jsonl"))?);

    let clean_mels: Vec<Tensor> = corpus
        .train
        .iter()
        .map(|s| compute_logmel(&s.clean, &model_cfg.mel).map(|m| m.frames))
        .collect::<Result<_>>()?;
    let targets: Vec<Vec<usize>> = corpus
        .train
        .iter()
        .map(|s| model.vocab.encode(&s.text()))
        .collect::<Result<_>>()?;

    let batches_per_epoch = corpus.train.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let warmup = (cfg.warmup_fraction * total_steps as f64).round() as usize;
    let curriculum = cfg.curriculum();
    let wer_subset = &corpus.train[..cfg.train_wer_samples.min(corpus.train.len())];

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut checkpoints = Vec::new();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let phase = curriculum_phase(epoch, &curriculum);
        let opts = loss_options(cfg, cfg.enhance && phase.enhance_enabled)?;
        let mut order: Vec<usize> = (0..corpus.train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            &[TAG_ORDER, epoch as u64],
        )));

        let mut histogram = BTreeMap::new();
        let mut sums = LossReport::default();
        let mut lr = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let items = batch
                .iter()
                .map(|&i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                        cfg.seed,
                        &[TAG_NOISE, epoch as u64, i as u64],
                    ));
                    let snr = phase.draw(&mut rng);
                    *histogram.entry(snr_key(snr)).or_insert(0) += 1;
                    let kind = cfg.train_noises[rng.random_range(0..cfg.train_noises.len())];
                    let noise = NoiseSpec {
                        kind,
                        seed: rng.random(),
                    };
                    let s = &corpus.train[i];
                    Ok(TrainItem {
                        noisy_mel: noisy_logmel(s, snr, noise, &model_cfg.mel)?,
                        clean_mel: clean_mels[i].clone(),
                        video: cfg.use_video.then(|| s.video.frames.clone()),
                        target: targets[i].clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let (mut grads, reports) = batch_gradients(
                &model,
                &store,
                &items,
                &opts,
                cfg.dropout,
                derive_seed(cfg.seed, &[TAG_DROPOUT, step as u64]),
            )?;
            clip_global_norm(&mut grads, cfg.grad_clip);
            step += 1;
            lr = lr_at(step, total_steps, warmup, cfg.learning_rate);
            opt.update(&mut store, &grads, lr);
            for r in reports {
                sums.l_total += r.l_total;
                sums.l_avsr += r.l_avsr;
                sums.l_enhance += r.l_enhance;
                sums.l_ctc_a += r.l_ctc_a;
                sums.l_ctc_v += r.l_ctc_v;
                sums.l_att += r.l_att;
                sums.l_recon += r.l_recon;
                sums.l_percep += r.l_percep;
            }
        }
        let n = corpus.train.len() as f64;
        let metrics = EpochMetrics {
            epoch,
            phase: phase.index,
            steps: step,
            lr,
            l_total: sums.l_total / n,
            l_avsr: sums.l_avsr / n,
            l_enhance: sums.l_enhance / n,
            l_ctc_a: sums.l_ctc_a / n,
            l_ctc_v: sums.l_ctc_v / n,
            l_att: sums.l_att / n,
            l_recon: sums.l_recon / n,
            l_percep: sums.l_percep / n,
            train_wer: greedy_wer(&model, &store, wer_subset, cfg.use_video)?,
            snr_histogram: histogram,
        };
        serde_json::to_writer(&mut metrics_file, &metrics)?;
        metrics_file.write_all(b"\n")?;
        metrics_file.flush()?;
        history.push(metrics);

        let path = ckpt_dir.join(format!("epoch-{epoch:03}.ckpt"));
        let mut ck = Checkpoint::from_store(&model_cfg, &store, epoch, cfg.hash());
        ck.moments = Some((opt.m.clone(), opt.v.clone()));
        ck.optimizer_step = opt.step;
        ck.save(&path)?;
        checkpoints.push(path);
        while checkpoints.len() > cfg.keep_checkpoints {
            fs::remove_file(checkpoints.remove(0))?;
        }
    }
    Ok(TrainOutcome {
        model,
        store,
        history,
        checkpoints,
    })
}
