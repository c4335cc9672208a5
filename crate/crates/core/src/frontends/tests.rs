use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nn::{ConformerConfig, Ctx, Init};
use crate::tensor::{check_model_gradients, CoordinatePolicy, ParamStore, Tape, Tensor};
use crate::testing::{projection_loss, random_tensor};

fn tone(freq: f64, seconds: f64, amp: f64) -> Waveform {
    let n = (seconds * 16000.0) as usize;
    let s = (0..n)
        .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / 16000.0).sin())
        .collect();
    Waveform::new(s, 16000)
}

fn tiny_enc() -> ConformerConfig {
    ConformerConfig {
        d_model: 8,
        heads: 2,
        ffn_dim: 12,
        conv_kernel: 3,
        layers: 1,
    }
}

#[test]
fn silence_hits_the_log_floor() {
    let cfg = MelConfig::default();
    let spec = compute_logmel(&Waveform::new(vec![0.0; 16000], 16000), &cfg).unwrap();
    assert_eq!(spec.num_frames(), 98);
    assert_eq!(spec.mel_bins(), 80);
    let floor = 1e-6f64.ln();
    assert!(spec.frames.data().iter().all(|&v| v == floor));
}

#[test]
fn frame_count_formula() {
    let cfg = MelConfig::default();
    for (len, want) in [
        (400usize, 1usize),
        (559, 1),
        (560, 2),
        (16000, 98),
        (32000, 198),
    ] {
        let spec = compute_logmel(&Waveform::new(vec![0.1; len], 16000), &cfg).unwrap();
        assert_eq!(spec.num_frames(), want, "len {len}");
    }
}

#[test]
fn one_khz_tone_peaks_in_nearest_mel_bin() {
    let cfg = MelConfig::default();
    // Centre frequencies straight from the HTK formula: m_i equally spaced
    // over [0, mel(8000)], f = 700·(10^(m/2595) − 1).
    let top = 2595.0 * (1.0f64 + 8000.0 / 700.0).log10();
    let centers: Vec<f64> = (1..=80)
        .map(|i| 700.0 * (10f64.powf(top * i as f64 / 81.0 / 2595.0) - 1.0))
        .collect();
    let nearest = centers
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - 1000.0).abs().total_cmp(&(b.1 - 1000.0).abs()))
        .unwrap()
        .0;
    for (a, b) in centers.iter().zip(mel_center_frequencies(&cfg)) {
        assert!((a - b).abs() < 1e-9);
    }
    let spec = compute_logmel(&tone(1000.0, 1.0, 0.5), &cfg).unwrap();
    for t in 0..spec.num_frames() {
        let row = spec.frames.row(t);
        let argmax = (0..80).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        assert_eq!(argmax, nearest, "frame {t}");
    }
}

#[test]
fn logmel_rejects_bad_input() {
    let cfg = MelConfig::default();
    assert!(compute_logmel(&Waveform::new(vec![0.0; 399], 16000), &cfg).is_err());
    assert!(compute_logmel(&Waveform::new(vec![0.0; 16000], 8000), &cfg).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn logmel_is_scale_monotone(seed in any::<u64>(), gain in 1.0f64..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Waveform::new(random_tensor(&mut rng, &[2000], 0.3).into_data(), 16000);
        let loud = Waveform::new(w.samples.iter().map(|s| s * gain).collect(), 16000);
        let cfg = MelConfig::default();
        let (a, b) = (compute_logmel(&w, &cfg).unwrap(), compute_logmel(&loud, &cfg).unwrap());
        for (x, y) in a.frames.data().iter().zip(b.frames.data()) {
            prop_assert!(y >= x);
        }
    }
}

fn audio_out(fe: &AudioFrontend, store: &ParamStore, t: usize, m: usize) -> Tensor {
    let mut tape = Tape::new();
    let pv = store.bind_frozen(&mut tape);
    let mut cx = Ctx::new(&mut tape, &pv);
    let x = cx.tape.constant(Tensor::full(&[t, m], -3.0));
    let seq = fe.forward(&mut cx, x).unwrap();
    assert_eq!(seq.modality, Modality::Audio);
    tape.value(seq.tokens).clone()
}

#[test]
fn audio_frontend_stride_arithmetic() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let enc = tiny_enc();
    let fe = AudioFrontend::new(&mut Init::new(&mut store, &mut rng), 10, &enc, -5.0, 5.0).unwrap();
    assert_eq!(audio_out(&fe, &store, 100, 10).shape(), &[25, 8]);
    assert_eq!(audio_out(&fe, &store, 98, 10).shape(), &[25, 8]);
    assert_eq!(audio_out(&fe, &store, 1, 10).shape(), &[1, 8]);
    for t in [5usize, 17, 40, 77] {
        assert_eq!(AudioFrontend::output_len(t), t.div_ceil(2).div_ceil(2));
        assert_eq!(
            audio_out(&fe, &store, t, 10).shape()[0],
            AudioFrontend::output_len(t)
        );
    }
}

fn video_cfg() -> VideoConfig {
    VideoConfig {
        size: 8,
        channels: 3,
        res_blocks: 1,
        stem_kernel: [5, 7, 7],
    }
}

#[test]
fn video_frontend_preserves_time_and_black_frames_embed_identically() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let fe = VideoFrontend::new(
        &mut Init::new(&mut store, &mut rng),
        &video_cfg(),
        &tiny_enc(),
    )
    .unwrap();
    let mut tape = Tape::new();
    let pv = store.bind_frozen(&mut tape);
    let mut cx = Ctx::new(&mut tape, &pv);
    let clip = cx.tape.constant(Tensor::zeros(&[10, 8, 8]));
    let emb = fe.embed_frames(&mut cx, clip).unwrap();
    let seq = fe.forward(&mut cx, clip).unwrap();
    assert_eq!(cx.tape.shape(seq.tokens), &[10, 8]);
    let e = cx.tape.value(emb).clone();
    for t in 1..10 {
        assert_eq!(e.row(t), e.row(0));
    }
    let bad = cx.tape.constant(Tensor::zeros(&[4, 6, 6]));
    assert!(fe.forward(&mut cx, bad).is_err());
}

#[test]
fn synchronized_inputs_align_frame_rates() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let mut init = Init::new(&mut store, &mut rng);
    let enc = tiny_enc();
    let afe = AudioFrontend::new(&mut init.sub("a"), 6, &enc, 0.0, 1.0).unwrap();
    let vfe = VideoFrontend::new(&mut init.sub("v"), &video_cfg(), &enc).unwrap();
    for tv in [1usize, 3, 7, 12] {
        let mut tape = Tape::new();
        let pv = store.bind_frozen(&mut tape);
        let mut cx = Ctx::new(&mut tape, &pv);
        let clip = cx.tape.constant(Tensor::full(&[tv, 8, 8], 0.5));
        let spec = cx.tape.constant(Tensor::zeros(&[tv * 4, 6]));
        let v = vfe.forward(&mut cx, clip).unwrap();
        let a = afe.forward(&mut cx, spec).unwrap();
        assert_eq!(cx.tape.shape(v.tokens)[0], cx.tape.shape(a.tokens)[0]);
    }
    // Real audio: duration·25 video frames ↔ 100·duration − 1 mel frames.
    let cfg = MelConfig::default();
    for tv in [10usize, 25, 63] {
        let t = cfg.num_frames(tv * 640).unwrap();
        assert_eq!(AudioFrontend::output_len(t), tv);
    }
}

#[test]
fn frontends_pass_gradient_checks() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let mut init = Init::new(&mut store, &mut rng);
    let enc = tiny_enc();
    let afe = AudioFrontend::new(&mut init.sub("a"), 5, &enc, -1.0, 2.0).unwrap();
    let vfe = VideoFrontend::new(&mut init.sub("v"), &video_cfg(), &enc).unwrap();
    let spec = random_tensor(&mut rng, &[12, 5], 2.0);
    let clip = random_tensor(&mut rng, &[3, 8, 8], 0.5).map(|v| v + 0.5);
    let report = check_model_gradients(
        &store,
        &[spec, clip],
        |tape, pv, inputs| {
            let mut cx = Ctx::new(tape, pv);
            let a = afe.forward(&mut cx, inputs[0])?;
            let v = vfe.forward(&mut cx, inputs[1])?;
            let la = projection_loss(cx.tape, a.tokens, 1)?;
            let lv = projection_loss(cx.tape, v.tokens, 2)?;
            cx.tape.add(la, lv)
        },
        1e-5,
        1e-4,
        CoordinatePolicy::Sample {
            per_tensor: 6,
            seed: 17,
        },
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.failures);
    assert!(report.checked > 200);
}

#[test]
fn clip_and_spectrogram_validation() {
    assert!(VideoClip::new(Tensor::full(&[2, 4, 4], 1.5)).is_err());
    assert!(VideoClip::new(Tensor::zeros(&[2, 4, 5])).is_err());
    assert!(Spectrogram::new(Tensor::zeros(&[3])).is_err());
    let c = VideoClip::new(Tensor::full(&[2, 4, 4], 0.3)).unwrap();
    assert_eq!(c.blank_like().frames, Tensor::zeros(&[2, 4, 4]));
}
