use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::fusion::{attention_cost, Avbc, BottleneckUpdate};
use crate::model::{AvsrModel, LossOptions, ModelConfig, TrainItem};
use crate::nn::{ConformerConfig, Ctx, Init};
use crate::recognition::Vocabulary;
use crate::tensor::{
    check_model_gradients, CoordinatePolicy, GradCheckReport, ParamStore, Tape, Tensor,
};

/// Shapes of the desk-scale gradient check: 32 mel frames (8 tokens after
/// the front-end), 8 video frames, and a four-symbol target.
pub fn desk_check_item(seed: u64, with_video: bool) -> Result<TrainItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |shape: &[usize], lo: f64, hi: f64| -> Result<Tensor> {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(lo..hi)).collect(),
        )
    };
    let clean = draw(&[32, 80], -12.0, -2.0)?;
    let noisy = clean.map(|v| v + 0.5);
    let video = draw(&[8, 16, 16], 0.0, 1.0)?;
    Ok(TrainItem {
        noisy_mel: noisy,
        clean_mel: clean,
        video: with_video.then_some(video),
        target: Vocabulary::characters().encode("ab c")?,
    })
}

/// Central-difference check of the full training loss `L_total` of a
/// freshly initialised desk model, `per_tensor` coordinates of every
/// parameter tensor, relative tolerance `tol`.
pub fn desk_gradient_check(
    seed: u64,
    with_video: bool,
    per_tensor: usize,
    tol: f64,
) -> Result<GradCheckReport> {
    let (model, store) = AvsrModel::new(&ModelConfig::desk(), seed)?;
    let item = desk_check_item(seed, with_video)?;
    let opts = LossOptions::default();
    // The stop-gradient target is held at its unperturbed value.
    let target = model.perceptual_target_value(&store, &item.clean_mel)?;
    check_model_gradients(
        &store,
        &[],
        |tape, pv, _| {
            let mut cx = Ctx::new(tape, pv);
            Ok(model.loss(&mut cx, &item, &opts, Some(&target))?.total)
        },
        1e-5,
        tol,
        CoordinatePolicy::Sample { per_tensor, seed },
    )
}

/// Attention score entries of one AVBC layer, measured and predicted.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttentionBench {
    pub n_a: usize,
    pub n_v: usize,
    pub k: usize,
    /// Measured entries of the bottleneck layer (`K > 0`).
    pub bottleneck_measured: u64,
    /// Measured entries of the same layer in joint mode (`K = 0`).
    pub direct_measured: u64,
    pub bottleneck_formula: u64,
    pub direct_formula: u64,
    pub bottleneck_seconds: f64,
    pub direct_seconds: f64,
}

/// Runs one AVBC layer with `k` bottleneck tokens and one in joint mode on
/// random `n_a × d` and `n_v × d` inputs, counting score entries.
pub fn bench_attention(
    cfg: &ConformerConfig,
    n_a: usize,
    n_v: usize,
    k: usize,
    seed: u64,
) -> Result<AttentionBench> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.d_model;
    let mut draw = |n: usize| {
        Tensor::new(
            vec![n, d],
            (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    };
    let (ha, hv) = (draw(n_a)?, draw(n_v)?);
    let run = |k: usize| -> Result<(u64, f64)> {
        let mut store = ParamStore::new();
        let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
        let avbc = Avbc::new(&mut Init::new(&mut store, &mut init_rng), cfg, 1, k, seed)?;
        let mut tape = Tape::new();
        let pv = store.bind_frozen(&mut tape);
        let mut cx = Ctx::new(&mut tape, &pv);
        let a = cx.tape.constant(ha.clone());
        let v = cx.tape.constant(hv.clone());
        let start = Instant::now();
        let before = cx.tape.score_entries();
        let layer = &avbc.layers[0];
        match avbc.bottleneck {
            Some(id) => {
                let b = cx.p(id);
                layer.forward(&mut cx, Some(v), a, b, BottleneckUpdate::Averaged)?;
            }
            None => {
                layer.forward_joint(&mut cx, Some(v), a)?;
            }
        }
        Ok((
            cx.tape.score_entries() - before,
            start.elapsed().as_secs_f64(),
        ))
    };
    let (bottleneck_measured, bottleneck_seconds) = run(k)?;
    let (direct_measured, direct_seconds) = run(0)?;
    let (bottleneck_formula, direct_formula) = attention_cost(n_a, n_v, k);
    Ok(AttentionBench {
        n_a,
        n_v,
        k,
        bottleneck_measured,
        direct_measured,
        bottleneck_formula,
        direct_formula,
        bottleneck_seconds,
        direct_seconds,
    })
}
