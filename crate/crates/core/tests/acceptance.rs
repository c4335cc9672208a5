//! End-to-end acceptance checks for the desk-scale system.
//!
//! Every criterion prints one `criterion N: PASS|FAIL` line straight to
//! stdout, so the summary shows up even when test output is captured. Two
//! measurements (the identity reconstruction target and the noise-robustness
//! trend) are reported without being asserted; the others must pass.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use avbc::data::{
    curriculum_phase, mix_at_snr, mix_components, synth_noise, Corpus, CurriculumConfig, NoiseKind,
    NoiseSpec, SnrChoice, SynthConfig,
};
use avbc::frontends::{compute_logmel, Waveform};
use avbc::fusion::{Avbc, BottleneckUpdate};
use avbc::harness::{
    average_checkpoint_files, average_checkpoints, bench_attention, clip_global_norm,
    desk_gradient_check, feature_stats, load_model, lr_at, run_eval, run_train, AdamW, Checkpoint,
    Condition, EvalOptions, NoiseCondition, RunConfig, TrainOutcome,
};
use avbc::model::{AvsrModel, LossOptions, ModelConfig, TrainItem};
use avbc::nn::{ConformerConfig, Ctx, Init};
use avbc::recognition::{
    beam_search, ctc_nll_and_grad, greedy_decode, DecoderConfig, Hypothesis, TransformerDecoder,
    BLANK, EOS,
};
use avbc::tensor::{ParamStore, Tape, Tensor};
use avbc::testing::random_tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    id: &'static str,
    passed: bool,
    /// Reported only: a failure does not fail the suite.
    asserted: bool,
    detail: String,
}

fn verdict(id: &'static str, passed: bool, detail: String) -> Verdict {
    Verdict {
        id,
        passed,
        asserted: true,
        detail,
    }
}

fn report(v: &Verdict) {
    let status = if v.passed { "PASS" } else { "FAIL" };
    let note = if v.asserted {
        ""
    } else {
        " [reported, not asserted]"
    };
    let line = format!("criterion {}: {status}{note} ({})\n", v.id, v.detail);
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
}

fn bits_equal(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape()
        && a.data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

fn desk_config(out: &Path) -> RunConfig {
    RunConfig {
        out_dir: out.to_path_buf(),
        ..RunConfig::default()
    }
}

// ---------------------------------------------------------------- 1

fn gradient_integrity() -> Verdict {
    let start = Instant::now();
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    for with_video in [true, false] {
        let r = desk_gradient_check(0, with_video, 2, 1e-4).unwrap();
        checked += r.checked;
        worst = worst.max(r.max_rel_error);
        failures += r.failures.len();
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        "1 gradient integrity",
        failures == 0 && checked > 0 && secs < 300.0,
        format!("{checked} coordinates, max rel err {worst:.2e}, {failures} failures, {secs:.1} s"),
    )
}

// ---------------------------------------------------------------- 2

/// Sums the probability of every frame-level path that collapses to `y`.
fn ctc_by_enumeration(lp: &Tensor, y: &[usize]) -> Option<f64> {
    let (t, v) = (lp.shape()[0], lp.shape()[1]);
    let mut total = 0.0;
    for code in 0..v.pow(t as u32) {
        let mut c = code;
        let path: Vec<usize> = (0..t)
            .map(|_| {
                let k = c % v;
                c /= v;
                k
            })
            .collect();
        let mut out = Vec::new();
        for (i, &k) in path.iter().enumerate() {
            if k != BLANK && (i == 0 || path[i - 1] != k) {
                out.push(k);
            }
        }
        if out == y {
            total += path
                .iter()
                .enumerate()
                .map(|(i, &k)| lp.get2(i, k))
                .sum::<f64>()
                .exp();
        }
    }
    (total > 0.0).then(|| -total.ln())
}

fn ctc_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut compared, mut worst) = (0, 0.0f64);
    let mut mismatches = 0;
    while compared < 500 {
        let t = rng.random_range(1..=6);
        let v = rng.random_range(2..=4);
        let len = rng.random_range(0..=3);
        let y: Vec<usize> = (0..len).map(|_| rng.random_range(1..v)).collect();
        let logits = random_tensor(&mut rng, &[t, v], 2.0);
        let mut lp = logits.clone();
        for i in 0..t {
            let row = logits.row(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            for k in 0..v {
                lp.data_mut()[i * v + k] = row[k] - lse;
            }
        }
        match (
            ctc_by_enumeration(&lp, &y),
            ctc_nll_and_grad(&lp, &y, BLANK),
        ) {
            (Some(want), Ok((got, _))) => {
                let e = (want - got).abs();
                worst = worst.max(e);
                if e >= 1e-9 {
                    mismatches += 1;
                }
                compared += 1;
            }
            (None, Err(_)) => {}
            _ => {
                mismatches += 1;
                compared += 1;
            }
        }
    }
    verdict(
        "2 CTC oracle equivalence",
        mismatches == 0,
        format!("{compared} feasible instances, max |diff| {worst:.1e}, {mismatches} mismatches"),
    )
}

// ---------------------------------------------------------------- 3

fn bottleneck_isolation() -> Verdict {
    let cfg = ConformerConfig::desk();
    let d = cfg.d_model;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut layer_ok = 0;
    for trial in 0..50u64 {
        let mut store = ParamStore::new();
        let mut init_rng = ChaCha8Rng::seed_from_u64(trial);
        let k = rng.random_range(1..=6);
        let avbc = Avbc::new(&mut Init::new(&mut store, &mut init_rng), &cfg, 1, k, trial).unwrap();
        let (na, nv) = (rng.random_range(2..12), rng.random_range(2..12));
        let ha = random_tensor(&mut rng, &[na, d], 1.0);
        let hv = random_tensor(&mut rng, &[nv, d], 1.0);
        let shift = random_tensor(&mut rng, &[nv, d], 1.0);
        let mut hv2 = hv.clone();
        hv2.data_mut()
            .iter_mut()
            .zip(shift.data())
            .for_each(|(x, s)| *x += s);
        let run = |v: &Tensor| {
            let mut tape = Tape::new();
            let pv = store.bind_frozen(&mut tape);
            let mut cx = Ctx::new(&mut tape, &pv);
            let a = cx.tape.constant(ha.clone());
            let v = cx.tape.constant(v.clone());
            let b = cx.p(avbc.bottleneck.unwrap());
            let out = avbc.layers[0]
                .forward(&mut cx, Some(v), a, b, BottleneckUpdate::Averaged)
                .unwrap();
            tape.value(out.h_a).clone()
        };
        if bits_equal(&run(&hv), &run(&hv2)) {
            layer_ok += 1;
        }
    }

    let model_cfg = ModelConfig::desk();
    let mut pathway_ok = 0;
    let mut averaged_differs = 0;
    for trial in 0..50u64 {
        let (model, store) = AvsrModel::new(&model_cfg, 100 + trial).unwrap();
        let tv = rng.random_range(6..=10);
        let mel = random_tensor(&mut rng, &[4 * tv, model_cfg.mel.mel_bins], 3.0).map(|x| x - 8.0);
        let video = Tensor::new(
            vec![tv, 16, 16],
            (0..tv * 256).map(|_| rng.random()).collect(),
        )
        .unwrap();
        let present = model
            .encode_values(&store, &mel, Some(&video), BottleneckUpdate::AudioOnly)
            .unwrap();
        let absent = model
            .encode_values(&store, &mel, None, BottleneckUpdate::Averaged)
            .unwrap();
        if bits_equal(&present.z_a, &absent.z_a) {
            pathway_ok += 1;
        }
        let fused = model
            .encode_values(&store, &mel, Some(&video), BottleneckUpdate::Averaged)
            .unwrap();
        if !bits_equal(&fused.z_a, &absent.z_a) {
            averaged_differs += 1;
        }
    }
    verdict(
        "3 bottleneck isolation",
        layer_ok == 50 && pathway_ok == 50 && averaged_differs == 50,
        format!(
            "single-layer h_a invariant {layer_ok}/50; severed pathway z_a identical {pathway_ok}/50; \
             averaged pathway carries video {averaged_differs}/50"
        ),
    )
}

// ---------------------------------------------------------------- 4

fn complexity_accounting() -> Verdict {
    let cfg = ConformerConfig {
        layers: 1,
        ..ConformerConfig::desk()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut ok = 0;
    for i in 0..10 {
        let (na, nv) = (rng.random_range(1..40), rng.random_range(1..40));
        let k = if i == 0 { 0 } else { rng.random_range(1..9) };
        let b = bench_attention(&cfg, na, nv, k, i).unwrap();
        let sq = |x: usize| (x * x) as u64;
        let want = if k == 0 {
            sq(na + nv)
        } else {
            sq(k + na) + sq(k + nv)
        };
        if b.bottleneck_measured == want && b.direct_measured == sq(na + nv) {
            ok += 1;
        }
    }
    let b = bench_attention(&cfg, 100, 100, 4, 0).unwrap();
    let headline = b.bottleneck_measured == 21_632 && b.direct_measured == 40_000;
    verdict(
        "4 complexity accounting",
        ok == 10 && headline,
        format!(
            "{ok}/10 random triples (one with K=0) match; N=100, K=4: {} vs {}",
            b.bottleneck_measured, b.direct_measured
        ),
    )
}

// ---------------------------------------------------------------- 5

fn snr_exactness() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let kinds = [
        NoiseKind::White,
        NoiseKind::Pink,
        NoiseKind::BabbleLike,
        NoiseKind::SpeechOverlap,
    ];
    let mut worst = 0.0f64;
    for case in 0..100u64 {
        let n = rng.random_range(800..4000);
        let clean = Waveform::new(
            (0..n).map(|_| rng.random_range(-0.5..0.5)).collect(),
            16_000,
        );
        let noise_len = rng.random_range(300..5000);
        let spec = NoiseSpec {
            kind: kinds[case as usize % kinds.len()],
            seed: case,
        };
        let noise = synth_noise(spec, noise_len, 16_000).unwrap();
        let target = rng.random_range(-7.5..=17.5);
        let mixed = mix_at_snr(&clean, &noise, target).unwrap();
        let (_, added) = mix_components(&clean, &noise, target).unwrap();
        assert!(mixed
            .samples
            .iter()
            .zip(&clean.samples)
            .zip(&added.samples)
            .all(|((m, c), a)| m == &(c + a)));
        let p = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        let residual: Vec<f64> = mixed
            .samples
            .iter()
            .zip(&clean.samples)
            .map(|(m, c)| m - c)
            .collect();
        let achieved = 10.0 * (p(&clean.samples) / p(&residual)).log10();
        worst = worst.max((achieved - target).abs());
    }
    verdict(
        "5 SNR exactness",
        worst < 0.01,
        format!("100 cases, max |error| {worst:.2e} dB"),
    )
}

// ---------------------------------------------------------------- 6

fn overfit_run(dir: &Path) -> (Verdict, TrainOutcome, Corpus) {
    let corpus = Corpus::generate(10, 20, 6, &SynthConfig::default()).unwrap();
    let cfg = RunConfig {
        epochs: 60,
        batch_size: 2,
        learning_rate: 6e-3,
        dropout: 0.0,
        enhance: false,
        clean_fraction: 1.0,
        train_wer_samples: 10,
        keep_checkpoints: 1,
        ..desk_config(dir)
    };
    let outcome = run_train(&cfg, &corpus).unwrap();
    let hit = outcome
        .history
        .iter()
        .find(|m| m.train_wer == 0.0)
        .map(|m| m.steps);
    let passed = hit.is_some_and(|s| s <= 300);
    let detail = match hit {
        Some(s) => format!("greedy WER 0 on 10 clean samples after {s} steps"),
        None => format!(
            "WER never reached 0; best {:.3}",
            outcome
                .history
                .iter()
                .map(|m| m.train_wer)
                .fold(f64::INFINITY, f64::min)
        ),
    };
    (
        verdict("6a overfit recognition", passed, detail),
        outcome,
        corpus,
    )
}

/// Trains on the reconstruction loss alone with clean input and clean
/// target, then measures the mean reconstruction loss over the corpus.
fn identity_reconstruction() -> Verdict {
    let corpus = Corpus::generate(10, 0, 60, &SynthConfig::default()).unwrap();
    let mut model_cfg = ModelConfig::desk();
    let (mean, std) = feature_stats(&corpus.train, &model_cfg.mel).unwrap();
    model_cfg.feature_mean = mean;
    model_cfg.feature_std = std;
    let (model, mut store) = AvsrModel::new(&model_cfg, 0).unwrap();
    let items: Vec<TrainItem> = corpus
        .train
        .iter()
        .map(|s| {
            let mel = compute_logmel(&s.clean, &model_cfg.mel).unwrap().frames;
            TrainItem {
                noisy_mel: mel.clone(),
                clean_mel: mel,
                video: Some(s.video.frames.clone()),
                target: model.vocab.encode(&s.text()).unwrap(),
            }
        })
        .collect();
    let opts = LossOptions::default();
    let recon_of = |store: &ParamStore, item: &TrainItem, train: bool| {
        let target = model
            .perceptual_target_value(store, &item.clean_mel)
            .unwrap();
        let mut tape = Tape::new();
        let pv = if train {
            store.bind(&mut tape)
        } else {
            store.bind_frozen(&mut tape)
        };
        let mut cx = Ctx::new(&mut tape, &pv);
        let loss = model.loss(&mut cx, item, &opts, Some(&target)).unwrap();
        let r = loss.recon.expect("enhancement enabled");
        let value = tape.scalar(r);
        let grads = train.then(|| {
            let g = tape.backward(r).unwrap();
            store
                .ids()
                .map(|id| match g.data(pv[id]) {
                    Some(d) => Tensor::new(store.get(id).shape().to_vec(), d.to_vec()).unwrap(),
                    None => Tensor::zeros(store.get(id).shape()),
                })
                .collect::<Vec<_>>()
        });
        (value, grads)
    };
    let mean_recon = |store: &ParamStore| {
        items
            .iter()
            .map(|it| recon_of(store, it, false).0)
            .sum::<f64>()
            / 10.0
    };

    let before = mean_recon(&store);
    let (steps, batch, peak) = (200, 4, 1e-2);
    let mut opt = AdamW::new(&store, 0.01);
    for step in 1..=steps {
        let mut acc: Vec<Tensor> = store
            .values()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        for j in 0..batch {
            let item = &items[(step * batch + j) % items.len()];
            let g = recon_of(&store, item, true).1.unwrap();
            for (a, g) in acc.iter_mut().zip(g) {
                a.data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, g)| *a += g / batch as f64);
            }
        }
        clip_global_norm(&mut acc, 5.0);
        opt.update(&mut store, &acc, lr_at(step, steps, steps / 10, peak));
    }
    let after = mean_recon(&store);
    Verdict {
        id: "6b identity reconstruction",
        passed: after < 0.05,
        asserted: false,
        detail: format!("recon loss {before:.3} -> {after:.3} after {steps} steps (target < 0.05)"),
    }
}

// ---------------------------------------------------------------- 7

fn noise_robustness_trend(root: &Path) -> Verdict {
    let corpus = Corpus::generate(50, 20, 7, &SynthConfig::default()).unwrap();
    let condition = |video| Condition {
        noise: NoiseCondition::Additive(NoiseKind::BabbleLike),
        snr_db: Some(-5.0),
        video,
    };
    let variants: [(&str, fn(&mut RunConfig)); 3] = [
        ("full", |_| {}),
        ("no-enh", |c| c.enhance = false),
        ("audio-only", |c| c.use_video = false),
    ];
    let mut wer = [[0.0; 3]; 3];
    let mut slowest = 0.0f64;
    for seed in 0..3u64 {
        for (v, (name, tweak)) in variants.iter().enumerate() {
            let mut cfg = RunConfig {
                seed,
                ..desk_config(&root.join(format!("{name}-{seed}")))
            };
            tweak(&mut cfg);
            let start = Instant::now();
            let outcome = run_train(&cfg, &corpus).unwrap();
            slowest = slowest.max(start.elapsed().as_secs_f64());
            let avg = average_checkpoint_files(&outcome.checkpoints).unwrap();
            let path = cfg.out_dir.join("averaged.ckpt");
            avg.save(&path).unwrap();
            let (model, store) = load_model(&path).unwrap();
            let opts = EvalOptions {
                beam_width: cfg.beam_width,
                seed,
                dump_recon: None,
            };
            let r = run_eval(
                &model,
                &store,
                &corpus.test,
                &[condition(cfg.use_video)],
                &opts,
            )
            .unwrap();
            wer[v][seed as usize] = r.conditions[0].wer;
        }
    }
    let mean = |v: usize| wer[v].iter().sum::<f64>() / 3.0;
    let (full, noenh, audio) = (mean(0), mean(1), mean(2));
    Verdict {
        id: "7 noise-robustness trend",
        passed: full < noenh && noenh < audio && full < audio && slowest < 1800.0,
        asserted: false,
        detail: format!(
            "mean WER at -5 dB babble-like: full {full:.3}, no-enh {noenh:.3}, audio-only {audio:.3}; \
             per seed {wer:?}; slowest run {slowest:.0} s"
        ),
    }
}

// ---------------------------------------------------------------- 8

fn curriculum_contract() -> Verdict {
    let cfg = CurriculumConfig::default();
    let mut problems = Vec::new();
    let db = |v: &[f64]| v.iter().map(|&x| SnrChoice::Db(x)).collect::<Vec<_>>();
    let mut want1 = db(&[7.5, 12.5, 17.5]);
    want1.push(SnrChoice::Clean);
    let mut want2 = db(&[-7.5, -2.5, 2.5, 7.5, 12.5, 17.5]);
    want2.push(SnrChoice::Clean);
    for epoch in 0..70 {
        let p = curriculum_phase(epoch, &cfg);
        let (idx, set, enh) = if epoch < 20 {
            (1, &want1, false)
        } else {
            (2, &want2, true)
        };
        if p.index != idx || &p.snr_choices != set || p.enhance_enabled != enh {
            problems.push(format!("epoch {epoch}"));
        }
    }
    let mut fractions = Vec::new();
    for epoch in [0, 20] {
        let p = curriculum_phase(epoch, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(8 + epoch as u64);
        let draws: Vec<SnrChoice> = (0..10_000).map(|_| p.draw(&mut rng)).collect();
        let clean = draws.iter().filter(|d| **d == SnrChoice::Clean).count() as f64 / 1e4;
        if (clean - 0.5).abs() > 0.02 {
            problems.push(format!("clean fraction {clean}"));
        }
        if draws.iter().any(|d| !p.snr_choices.contains(d)) {
            problems.push(format!("draw outside phase {} set", p.index));
        }
        fractions.push(clean);
    }
    // The desk run keeps the same structure on a shorter schedule.
    let desk = RunConfig::default().curriculum();
    let boundary = curriculum_phase(desk.phase1_epochs - 1, &desk).index == 1
        && curriculum_phase(desk.phase1_epochs, &desk).index == 2;
    if !boundary {
        problems.push("desk boundary".into());
    }
    verdict(
        "8 curriculum contract",
        problems.is_empty(),
        format!(
            "phase 1 epochs 0-19 {{7.5,12.5,17.5}}+clean, phase 2 full grid+clean; clean fractions {fractions:?}; \
             problems {problems:?}"
        ),
    )
}

// ---------------------------------------------------------------- 9

fn determinism_and_checkpoints(root: &Path) -> Verdict {
    let corpus = Corpus::generate(2, 1, 9, &SynthConfig::default()).unwrap();
    let tiny = |dir: &str, epochs, keep| RunConfig {
        epochs,
        phase1_epochs: 1,
        keep_checkpoints: keep,
        train_wer_samples: 1,
        ..desk_config(&root.join(dir))
    };
    let a = run_train(&tiny("a", 3, 2), &corpus).unwrap();
    run_train(&tiny("b", 3, 2), &corpus).unwrap();
    let metrics = |d: &str| std::fs::read(root.join(d).join("metrics.jsonl")).unwrap();
    let same_metrics = metrics("a") == metrics("b") && !metrics("a").is_empty();

    let ck = Checkpoint::load(a.checkpoints.last().unwrap()).unwrap();
    let roundtrip = ck
        .params
        .iter()
        .zip(a.store.values())
        .all(|(x, y)| bits_equal(x, y));

    let long = run_train(&tiny("c", 12, 10), &corpus).unwrap();
    let on_disk = std::fs::read_dir(root.join("c/checkpoints"))
        .unwrap()
        .count();
    let kept = long.checkpoints.len() == 10 && on_disk == 10;
    let loaded: Vec<Checkpoint> = long
        .checkpoints
        .iter()
        .map(|p| Checkpoint::load(p).unwrap())
        .collect();
    let from_files = average_checkpoint_files(&long.checkpoints).unwrap();
    let mean_ok = from_files.params.iter().enumerate().all(|(i, avg)| {
        avg.data().iter().enumerate().all(|(j, &v)| {
            let want = loaded.iter().map(|c| c.params[i].data()[j]).sum::<f64>() / 10.0;
            (v - want).abs() <= 1e-12 * want.abs().max(1.0)
        })
    });
    let single = average_checkpoints(std::slice::from_ref(&ck)).unwrap();
    let identity = single
        .params
        .iter()
        .zip(&ck.params)
        .all(|(x, y)| bits_equal(x, y))
        && single.moments.is_none();
    let neg = Checkpoint {
        params: ck.params.iter().map(|t| t.map(|v| -v)).collect(),
        ..ck.clone()
    };
    let cancels = average_checkpoints(&[ck.clone(), neg])
        .unwrap()
        .params
        .iter()
        .all(|t| t.data().iter().all(|&v| v == 0.0));
    let constants: Vec<Checkpoint> = (1..=10)
        .map(|c| Checkpoint {
            params: ck
                .params
                .iter()
                .map(|t| t.map(|_| c as f64 / 7.0))
                .collect(),
            ..ck.clone()
        })
        .collect();
    let want = 55.0 / 70.0;
    let constant_mean = average_checkpoints(&constants)
        .unwrap()
        .params
        .iter()
        .all(|t| t.data().iter().all(|v| (v - want).abs() < 1e-12));
    let mut odd = ck.clone();
    odd.params[0] = Tensor::zeros(&[1, 1]);
    let mismatch = average_checkpoints(&[ck.clone(), odd]).is_err();
    verdict(
        "9 determinism and checkpointing",
        same_metrics && roundtrip && kept && mean_ok && identity && cancels && constant_mean && mismatch,
        format!(
            "identical metrics {same_metrics}; bit-exact round trip {roundtrip}; 10 kept {kept}; \
             10 kept checkpoints average to their mean {mean_ok}; single identity {identity}; p/-p cancel {cancels}; \
             constants mean {constant_mean}; shape mismatch rejected {mismatch}"
        ),
    )
}

// ---------------------------------------------------------------- 10

/// Best finished hypothesis over every sequence of at most `max_len`
/// tokens (closing eos included), by length-normalised score.
fn exhaustive_best(
    store: &ParamStore,
    dec: &TransformerDecoder,
    memory: &Tensor,
    max_len: usize,
) -> Hypothesis {
    let mut tape = Tape::new();
    let pv = store.bind_frozen(&mut tape);
    let mut cx = Ctx::new(&mut tape, &pv);
    let m = cx.tape.constant(memory.clone());
    let mut prefixes = vec![vec![]];
    let mut best: Option<Hypothesis> = None;
    while let Some(p) = prefixes.pop() {
        let input: Vec<usize> = std::iter::once(EOS).chain(p.iter().copied()).collect();
        let lp = dec.forward(&mut cx, &input, m).unwrap();
        let lp = cx.tape.value(lp).clone();
        let so_far: f64 = p.iter().enumerate().map(|(i, &t)| lp.get2(i, t)).sum();
        let mut tokens = p.clone();
        tokens.push(EOS);
        let h = Hypothesis {
            tokens,
            score: so_far + lp.get2(p.len(), EOS),
        };
        let better = best.as_ref().is_none_or(|b| {
            let (x, y) = (h.normalized_score(), b.normalized_score());
            x > y || (x == y && h.tokens < b.tokens)
        });
        if better {
            best = Some(h);
        }
        if p.len() + 2 <= max_len {
            for k in (0..dec.vocab).filter(|&k| k != BLANK && k != EOS) {
                let mut q = p.clone();
                q.push(k);
                prefixes.push(q);
            }
        }
    }
    best.unwrap()
}

fn beam_sanity(model: &AvsrModel, store: &ParamStore, corpus: &Corpus) -> Verdict {
    let mut equal = 0;
    for s in &corpus.test {
        let mel = compute_logmel(&s.clean, &model.cfg.mel).unwrap().frames;
        let enc = model
            .encode_values(
                store,
                &mel,
                Some(&s.video.frames),
                BottleneckUpdate::Averaged,
            )
            .unwrap();
        let max_len = model.max_decode_len(enc.f_a.shape()[0]);
        let g = greedy_decode(store, &model.decoder, &enc.f_a, max_len).unwrap();
        let b = beam_search(store, &model.decoder, &enc.f_a, 1, max_len).unwrap();
        if g.tokens == b.tokens && g.score.to_bits() == b.score.to_bits() {
            equal += 1;
        }
    }
    let mut toy_ok = 0;
    let toys = 10;
    for seed in 0..toys {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let vocab = rng.random_range(3..=8);
        let mut store = ParamStore::new();
        let cfg = DecoderConfig {
            d_model: 8,
            heads: 2,
            ffn_dim: 12,
            layers: 1,
        };
        let dec =
            TransformerDecoder::new(&mut Init::new(&mut store, &mut rng), &cfg, vocab).unwrap();
        let w = store.get_mut(dec.out.weight);
        *w = w.map(|x| 3.0 * x);
        let memory = random_tensor(&mut rng, &[5, 8], 1.0);
        let b = beam_search(&store, &dec, &memory, vocab, 2).unwrap();
        let e = exhaustive_best(&store, &dec, &memory, 2);
        if b.tokens == e.tokens && (b.score - e.score).abs() < 1e-12 {
            toy_ok += 1;
        }
    }
    verdict(
        "10 beam search sanity",
        equal == corpus.test.len() && toy_ok == toys,
        format!(
            "width 1 equals greedy on {equal}/{} test utterances; full-width beam equals exhaustive search on \
             {toy_ok}/{toys} max_len=2 toys",
            corpus.test.len()
        ),
    )
}

#[test]
fn acceptance_criteria() {
    let root = tempfile::tempdir().unwrap();
    let mut verdicts = Vec::new();
    let mut run = |v: Verdict| {
        report(&v);
        verdicts.push(v);
    };
    run(gradient_integrity());
    run(ctc_oracle());
    run(bottleneck_isolation());
    run(complexity_accounting());
    run(snr_exactness());
    let (overfit, trained, corpus) = overfit_run(&root.path().join("overfit"));
    run(overfit);
    run(identity_reconstruction());
    run(noise_robustness_trend(&root.path().join("trend")));
    run(curriculum_contract());
    run(determinism_and_checkpoints(
        &root.path().join("determinism"),
    ));
    run(beam_sanity(&trained.model, &trained.store, &corpus));

    let failed: Vec<&str> = verdicts
        .iter()
        .filter(|v| v.asserted && !v.passed)
        .map(|v| v.id)
        .collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
