use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::{check_model_gradients, CoordinatePolicy, Tape, Tensor};
use crate::testing::{projection_loss, random_tensor};
use crate::Error;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn small_cfg() -> ConformerConfig {
    ConformerConfig {
        d_model: 8,
        heads: 2,
        ffn_dim: 12,
        conv_kernel: 3,
        layers: 1,
    }
}

/// Runs `f` on a fresh tape with `store` bound as constants.
fn eval(store: &ParamStore, f: impl FnOnce(&mut Ctx) -> Result<Var>) -> Tensor {
    let mut tape = Tape::new();
    let pv = store.bind_frozen(&mut tape);
    let mut cx = Ctx::new(&mut tape, &pv);
    let out = f(&mut cx).unwrap();
    tape.value(out).clone()
}

fn bits_equal(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape()
        && a.data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

#[test]
fn single_key_attention_returns_projected_value() {
    let mut store = ParamStore::new();
    let mut r = rng(1);
    let mha = MultiHeadAttention::new(&mut Init::new(&mut store, &mut r), 8, 2).unwrap();
    let kv = random_tensor(&mut r, &[1, 8], 1.0);
    let q1 = random_tensor(&mut r, &[3, 8], 1.0);
    let q2 = random_tensor(&mut r, &[3, 8], 5.0);
    let run = |q: &Tensor| {
        eval(&store, |cx| {
            let q = cx.tape.constant(q.clone());
            let kv = cx.tape.constant(kv.clone());
            multi_head_attention(cx, &mha, q, kv, kv)
        })
    };
    let (a, b) = (run(&q1), run(&q2));
    let expected = eval(&store, |cx| {
        let kv = cx.tape.constant(kv.clone());
        let v = mha.value.forward(cx, kv)?;
        mha.out.forward(cx, v)
    });
    for r in 0..3 {
        for (x, y) in a.row(r).iter().zip(expected.row(0)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
    assert!(a.max_abs_diff(&b) < 1e-12);
}

#[test]
fn identical_keys_give_uniform_weights() {
    let mut store = ParamStore::new();
    let pv = ParamVars(vec![]);
    let mut tape = Tape::new();
    let mut cx = Ctx::new(&mut tape, &pv);
    let mut r = rng(2);
    let q = cx.tape.constant(random_tensor(&mut r, &[2, 4], 1.0));
    let k = cx
        .tape
        .constant(Tensor::from_rows(&vec![vec![0.3, -0.2, 0.9, 0.1]; 5]).unwrap());
    let vt = random_tensor(&mut r, &[5, 4], 1.0);
    let v = cx.tape.constant(vt.clone());
    let out = attend(&mut cx, q, k, v, 2, false).unwrap();
    let out = cx.tape.value(out).clone();
    for row in 0..2 {
        for c in 0..4 {
            let mean = (0..5).map(|i| vt.get2(i, c)).sum::<f64>() / 5.0;
            assert!((out.get2(row, c) - mean).abs() < 1e-12);
        }
    }
    let _ = &mut store;
}

#[test]
fn attention_matches_explicit_formula() {
    // One head, d = 2: softmax(q kᵀ / √2) v evaluated by hand.
    let q = [[1.0, 0.5], [-0.3, 2.0]];
    let k = [[0.2, -1.0], [1.5, 0.4]];
    let v = [[3.0, -1.0], [0.5, 2.0]];
    let pv = ParamVars(vec![]);
    let mut tape = Tape::new();
    let mut cx = Ctx::new(&mut tape, &pv);
    let to = |m: [[f64; 2]; 2]| {
        Tensor::from_rows(&m.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    };
    let (qv, kv, vv) = (
        cx.tape.constant(to(q)),
        cx.tape.constant(to(k)),
        cx.tape.constant(to(v)),
    );
    let out = attend(&mut cx, qv, kv, vv, 1, false).unwrap();
    let out = cx.tape.value(out).clone();
    for i in 0..2 {
        let s: Vec<f64> = (0..2)
            .map(|j| (q[i][0] * k[j][0] + q[i][1] * k[j][1]) / 2f64.sqrt())
            .collect();
        let z: f64 = s.iter().map(|x| x.exp()).sum();
        for c in 0..2 {
            let want = (0..2).map(|j| s[j].exp() / z * v[j][c]).sum::<f64>();
            assert!((out.get2(i, c) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_over_zero_keys_is_rejected() {
    let pv = ParamVars(vec![]);
    let mut tape = Tape::new();
    let mut cx = Ctx::new(&mut tape, &pv);
    let q = cx.tape.constant(Tensor::zeros(&[2, 4]));
    let k = cx.tape.constant(Tensor::zeros(&[0, 4]));
    assert!(matches!(
        attend(&mut cx, q, k, k, 2, false),
        Err(Error::Contract(_))
    ));
}

#[test]
fn attention_invariant_to_joint_key_value_permutation() {
    let mut store = ParamStore::new();
    let mut r = rng(4);
    let mha = MultiHeadAttention::new(&mut Init::new(&mut store, &mut r), 8, 4).unwrap();
    let q = random_tensor(&mut r, &[3, 8], 1.0);
    let kv = random_tensor(&mut r, &[5, 8], 1.0);
    let perm = [3usize, 0, 4, 1, 2];
    let kv_perm =
        Tensor::from_rows(&perm.iter().map(|&i| kv.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
    let run = |kv: &Tensor| {
        eval(&store, |cx| {
            let qv = cx.tape.constant(q.clone());
            let k = cx.tape.constant(kv.clone());
            multi_head_attention(cx, &mha, qv, k, k)
        })
    };
    assert!(run(&kv).max_abs_diff(&run(&kv_perm)) < 1e-12);
}

/// Direct depthwise convolution: `out[t][c] = b[c] + Σ_j w[j][c]·x[t+j−p][c]`.
fn depthwise_oracle(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (n, d, k) = (x.shape()[0], x.shape()[1], w.shape()[0]);
    let p = (k / 2) as isize;
    let mut out = Tensor::zeros(&[n, d]);
    for t in 0..n {
        for c in 0..d {
            let mut s = b.data()[c];
            for j in 0..k {
                let src = t as isize + j as isize - p;
                if src >= 0 && (src as usize) < n {
                    s += w.get2(j, c) * x.get2(src as usize, c);
                }
            }
            out.data_mut()[t * d + c] = s;
        }
    }
    out
}

#[test]
fn depthwise_conv_matches_direct_oracle_and_impulse_footprint() {
    let (n, d, k) = (9, 3, 5);
    let mut r = rng(5);
    let w = random_tensor(&mut r, &[k, d], 1.0);
    let b = Tensor::zeros(&[d]);
    let mut impulse = Tensor::zeros(&[n, d]);
    impulse.data_mut()[4 * d + 1] = 1.0;
    let pv = ParamVars(vec![]);
    let mut tape = Tape::new();
    let mut cx = Ctx::new(&mut tape, &pv);
    let (xv, wv, bv) = (
        cx.tape.constant(impulse.clone()),
        cx.tape.constant(w.clone()),
        cx.tape.constant(b.clone()),
    );
    let y = depthwise_conv1d(&mut cx, xv, wv, bv).unwrap();
    let y = cx.tape.value(y).clone();
    assert!(y.max_abs_diff(&depthwise_oracle(&impulse, &w, &b)) < 1e-14);
    for t in 0..n {
        for c in 0..d {
            let inside = c == 1 && (2..=6).contains(&t);
            assert_eq!(y.get2(t, c) != 0.0, inside, "t={t} c={c}");
        }
    }

    let x = random_tensor(&mut r, &[n, d], 1.0);
    let b = random_tensor(&mut r, &[d], 1.0);
    let (xv, bv) = (cx.tape.constant(x.clone()), cx.tape.constant(b.clone()));
    let y = depthwise_conv1d(&mut cx, xv, wv, bv).unwrap();
    assert!(cx.tape.value(y).max_abs_diff(&depthwise_oracle(&x, &w, &b)) < 1e-14);
}

#[test]
fn kernel_one_identity_depthwise_is_pointwise() {
    let mut r = rng(6);
    let x = random_tensor(&mut r, &[4, 3], 1.0);
    let pv = ParamVars(vec![]);
    let mut tape = Tape::new();
    let mut cx = Ctx::new(&mut tape, &pv);
    let (xv, wv, bv) = (
        cx.tape.constant(x.clone()),
        cx.tape.constant(Tensor::ones(&[1, 3])),
        cx.tape.constant(Tensor::zeros(&[3])),
    );
    let y = depthwise_conv1d(&mut cx, xv, wv, bv).unwrap();
    assert_eq!(cx.tape.value(y), &x);

    // Whole module with kernel 1 and identity taps equals the pointwise chain.
    let mut store = ParamStore::new();
    let conv = ConvModule::new(&mut Init::new(&mut store, &mut r), 3, 1);
    *store.get_mut(conv.depthwise_weight) = Tensor::ones(&[1, 3]);
    let module = eval(&store, |cx| {
        let xv = cx.tape.constant(x.clone());
        conv.forward(cx, xv)
    });
    let chain = eval(&store, |cx| {
        let xv = cx.tape.constant(x.clone());
        let h = conv.norm.forward(cx, xv)?;
        let h = conv.pointwise_in.forward(cx, h)?;
        let h = cx.tape.glu(h)?;
        let h = conv.mid_norm.forward(cx, h)?;
        let h = cx.tape.silu(h)?;
        conv.pointwise_out.forward(cx, h)
    });
    assert!(module.max_abs_diff(&chain) < 1e-14);
}

#[test]
fn zero_input_conv_module_uses_bias_pathway_only() {
    let mut r = rng(7);
    let mut store = ParamStore::new();
    let conv = ConvModule::new(&mut Init::new(&mut store, &mut r), 4, 3);
    *store.get_mut(conv.pointwise_in.bias.unwrap()) = random_tensor(&mut r, &[8], 1.0);
    let zeros = Tensor::zeros(&[5, 4]);
    let run = |s: &ParamStore| {
        eval(s, |cx| {
            let xv = cx.tape.constant(zeros.clone());
            conv.forward(cx, xv)
        })
    };
    let base = run(&store);
    // The input weights never see a nonzero activation.
    let mut other = store.clone();
    *other.get_mut(conv.pointwise_in.weight) = random_tensor(&mut r, &[4, 8], 3.0);
    assert!(bits_equal(&base, &run(&other)));
}

#[test]
fn all_false_mask_equals_block_without_conv() {
    let mut r = rng(8);
    let mut store = ParamStore::new();
    let block = ConformerBlock::new(&mut Init::new(&mut store, &mut r), &small_cfg()).unwrap();
    let x = random_tensor(&mut r, &[6, 8], 1.0);
    let masked = eval(&store, |cx| {
        let xv = cx.tape.constant(x.clone());
        block.forward(cx, xv, &[false; 6])
    });
    let without = eval(&store, |cx| {
        let xv = cx.tape.constant(x.clone());
        let h = block.half_ffn(cx, &block.ffn1, xv)?;
        let h = block.self_attention(cx, h)?;
        let h = block.half_ffn(cx, &block.ffn2, h)?;
        block.final_norm.forward(cx, h)
    });
    assert!(bits_equal(&masked, &without));
}

#[test]
fn all_true_mask_matches_sub_op_composition() {
    let mut r = rng(9);
    let mut store = ParamStore::new();
    let block = ConformerBlock::new(&mut Init::new(&mut store, &mut r), &small_cfg()).unwrap();
    let x = random_tensor(&mut r, &[6, 8], 1.0);
    let got = eval(&store, |cx| {
        let xv = cx.tape.constant(x.clone());
        block.forward(cx, xv, &[true; 6])
    });
    let oracle = eval(&store, |cx| {
        let x0 = cx.tape.constant(x.clone());
        let f1 = block.ffn1.forward(cx, x0)?;
        let f1 = cx.tape.scale(f1, 0.5)?;
        let x1 = cx.tape.add(x0, f1)?;
        let n = block.attn_norm.forward(cx, x1)?;
        let a = multi_head_attention(cx, &block.attn, n, n, n)?;
        let x2 = cx.tape.add(x1, a)?;
        let c = block.conv.forward(cx, x2)?;
        let x3 = cx.tape.add(x2, c)?;
        let f2 = block.ffn2.forward(cx, x3)?;
        let f2 = cx.tape.scale(f2, 0.5)?;
        let x4 = cx.tape.add(x3, f2)?;
        block.final_norm.forward(cx, x4)
    });
    assert!(got.max_abs_diff(&oracle) < 1e-12);
}

#[test]
fn masked_position_reaches_others_only_through_attention() {
    let mut r = rng(10);
    let mut store = ParamStore::new();
    let block = ConformerBlock::new(&mut Init::new(&mut store, &mut r), &small_cfg()).unwrap();
    let x = random_tensor(&mut r, &[6, 8], 1.0);
    let mask = [true, true, true, true, false, false];
    let mut bumped = x.clone();
    for c in 0..8 {
        bumped.data_mut()[4 * 8 + c] += 0.7;
    }
    let run = |input: &Tensor, probe: AttentionProbe| {
        let mut tape = Tape::new();
        let pv = store.bind_frozen(&mut tape);
        let mut cx = Ctx::new(&mut tape, &pv).with_attention(probe);
        let xv = cx.tape.constant(input.clone());
        let y = block.forward(&mut cx, xv, &mask).unwrap();
        tape.value(y).clone()
    };
    let (a, b) = (
        run(&x, AttentionProbe::SelfOnly),
        run(&bumped, AttentionProbe::SelfOnly),
    );
    for row in 0..6 {
        let same = a
            .row(row)
            .iter()
            .zip(b.row(row))
            .all(|(p, q)| p.to_bits() == q.to_bits());
        assert_eq!(same, row != 4, "row {row}");
    }
    let (a, b) = (
        run(&x, AttentionProbe::Normal),
        run(&bumped, AttentionProbe::Normal),
    );
    assert!(a.row(0).iter().zip(b.row(0)).any(|(p, q)| p != q));
}

#[test]
fn conv_mask_length_mismatch_is_rejected() {
    let mut r = rng(11);
    let mut store = ParamStore::new();
    let block = ConformerBlock::new(&mut Init::new(&mut store, &mut r), &small_cfg()).unwrap();
    let mut tape = Tape::new();
    let pv = store.bind_frozen(&mut tape);
    let mut cx = Ctx::new(&mut tape, &pv);
    let x = cx.tape.constant(Tensor::zeros(&[4, 8]));
    assert!(matches!(
        block.forward(&mut cx, x, &[true; 3]),
        Err(Error::Contract(_))
    ));
}

#[test]
fn config_validation() {
    let mut c = small_cfg();
    c.heads = 3;
    assert!(c.validate().is_err());
    let mut c = small_cfg();
    c.conv_kernel = 4;
    assert!(c.validate().is_err());
    assert!(ConformerConfig::desk().validate().is_ok());
    assert!(ConformerConfig::paper().validate().is_ok());
}

#[test]
fn shuffle_examples() {
    let pv = ParamVars(vec![]);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let y = pixel_shuffle_1d(&mut tape, x, 2).unwrap();
    assert_eq!(tape.shape(y), &[4, 1]);
    assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    let y1 = pixel_shuffle_1d(&mut tape, x, 1).unwrap();
    assert_eq!(tape.value(y1), tape.value(x));
    assert!(pixel_shuffle_1d(&mut tape, x, 3).is_err());
    let _ = pv;
}

#[test]
fn sinusoidal_positions_start_at_offset() {
    let a = sinusoidal_positions(6, 8, 0);
    let b = sinusoidal_positions(2, 8, 4);
    assert_eq!(a.row(4), b.row(0));
    assert_eq!(a.row(0)[0], 0.0);
    assert_eq!(a.row(0)[1], 1.0);
}

#[test]
fn blocks_pass_gradient_checks() {
    let mut r = rng(12);
    let mut store = ParamStore::new();
    let mut init = Init::new(&mut store, &mut r);
    let block = ConformerBlock::new(&mut init.sub("block"), &small_cfg()).unwrap();
    let sub = SubPixel1d::new(&mut init.sub("sub"), 8, 3, 2, 3);
    let down = Conv1d::new(&mut init.sub("down"), 3, 4, 3, 2, 1);
    let x = random_tensor(&mut r, &[5, 8], 1.0);
    let report = check_model_gradients(
        &store,
        &[x],
        |tape, pv, inputs| {
            let mut cx = Ctx::new(tape, pv);
            let y = block.forward(&mut cx, inputs[0], &[true, true, true, false, false])?;
            let y = sub.forward(&mut cx, y)?;
            let y = down.forward(&mut cx, y)?;
            projection_loss(cx.tape, y, 99)
        },
        1e-5,
        1e-4,
        CoordinatePolicy::All,
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.failures);
}

#[test]
fn conv3d_and_conv2d_pass_gradient_checks() {
    let mut r = rng(13);
    let mut store = ParamStore::new();
    let mut init = Init::new(&mut store, &mut r);
    let c3 = Conv3d::new(&mut init.sub("c3"), 1, 2, [3, 3, 3], [1, 2, 2]);
    let c2 = Conv2d::new(&mut init.sub("c2"), 2, 2, 3, 1);
    let x = random_tensor(&mut r, &[3 * 4 * 4, 1], 1.0);
    let report = check_model_gradients(
        &store,
        &[x],
        |tape, pv, inputs| {
            let mut cx = Ctx::new(tape, pv);
            let (y, [t, h, w]) = c3.forward(&mut cx, inputs[0], [3, 4, 4])?;
            let y = cx.tape.silu(y)?;
            let y = c2.forward(&mut cx, y, t, h, w)?;
            projection_loss(cx.tape, y, 5)
        },
        1e-5,
        1e-4,
        CoordinatePolicy::All,
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.failures);
}

proptest! {
    #[test]
    fn conformer_preserves_length(n in 1usize..10, seed in any::<u64>()) {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let block = ConformerBlock::new(&mut Init::new(&mut store, &mut r), &small_cfg()).unwrap();
        let x = random_tensor(&mut r, &[n, 8], 1.0);
        let mask: Vec<bool> = (0..n).map(|i| i % 3 != 2).collect();
        let y = eval(&store, |cx| {
            let xv = cx.tape.constant(x.clone());
            block.forward(cx, xv, &mask)
        });
        prop_assert_eq!(y.shape(), &[n, 8]);
    }

    #[test]
    fn shuffle_is_a_bijection(n in 1usize..6, c in 1usize..4, r in 1usize..4, seed in any::<u64>()) {
        let mut g = rng(seed);
        let x = random_tensor(&mut g, &[n, c * r], 1.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = pixel_shuffle_1d(&mut tape, xv, r).unwrap();
        prop_assert_eq!(tape.shape(y), &[n * r, c]);
        let mut before = x.data().to_vec();
        let mut after = tape.value(y).data().to_vec();
        before.sort_by(f64::total_cmp);
        after.sort_by(f64::total_cmp);
        prop_assert_eq!(before, after);
        let back = pixel_unshuffle_1d(&mut tape, y, r).unwrap();
        prop_assert_eq!(tape.value(back), &x);
    }
}
