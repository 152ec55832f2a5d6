use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

/// Direct nested-loop `1×3×3` convolution with zero padding.
fn conv_spatial_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize) -> Tensor<f64> {
    let [ci_n, l_n, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let co_n = w.shape()[0];
    let (oh, ow) = (h.div_ceil(stride), wd.div_ceil(stride));
    let mut y = vec![0.0; co_n * l_n * oh * ow];
    for co in 0..co_n {
        for l in 0..l_n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = b.data()[co];
                    for ci in 0..ci_n {
                        for kh in 0..3 {
                            for kw in 0..3 {
                                let iy = (oy * stride + kh) as i64 - 1;
                                let ix = (ox * stride + kw) as i64 - 1;
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= wd as i64 {
                                    continue;
                                }
                                let xv = x.data()[((ci * l_n + l) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((co * ci_n + ci) * 3 + kh) * 3 + kw];
                                s += xv * wv;
                            }
                        }
                    }
                    y[((co * l_n + l) * oh + oy) * ow + ox] = s;
                }
            }
        }
    }
    Tensor::new(&[co_n, l_n, oh, ow], y).unwrap()
}

/// Direct nested-loop `3×1×1` convolution with replicate padding.
fn conv_temporal_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let [ci_n, l_n, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let co_n = w.shape()[0];
    let mut y = vec![0.0; co_n * l_n * h * wd];
    for co in 0..co_n {
        for l in 0..l_n {
            for p in 0..h * wd {
                let mut s = b.data()[co];
                for ci in 0..ci_n {
                    for k in 0..3i64 {
                        let src = (l as i64 + k - 1).clamp(0, l_n as i64 - 1) as usize;
                        s += w.data()[(co * ci_n + ci) * 3 + k as usize] * x.data()[(ci * l_n + src) * h * wd + p];
                    }
                }
                y[(co * l_n + l) * h * wd + p] = s;
            }
        }
    }
    Tensor::new(&[co_n, l_n, h, wd], y).unwrap()
}

fn run_spatial(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize) -> Tensor<f64> {
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.leaf(x.clone()), tape.leaf(w.clone()), tape.leaf(b.clone()));
    let y = tape.conv_spatial(xv, wv, bv, stride).unwrap();
    tape.value(y).clone()
}

fn run_temporal(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.leaf(x.clone()), tape.leaf(w.clone()), tape.leaf(b.clone()));
    let y = tape.conv_temporal(xv, wv, bv).unwrap();
    tape.value(y).clone()
}

fn identity_spatial(c: usize) -> Tensor<f64> {
    let mut w = Tensor::zeros(&[c, c, 1, 3, 3]);
    for k in 0..c {
        w.data_mut()[((k * c + k) * 3 + 1) * 3 + 1] = 1.0;
    }
    w
}

#[test]
fn spatial_identity_and_zero_kernels() {
    let x = randn(&[3, 2, 5, 6], 1);
    assert_eq!(run_spatial(&x, &identity_spatial(3), &Tensor::zeros(&[3]), 1), x);
    let y = run_spatial(&x, &Tensor::zeros(&[4, 3, 1, 3, 3]), &Tensor::zeros(&[4]), 1);
    assert!(y.data().iter().all(|v| *v == 0.0));
    assert_eq!(y.shape(), &[4, 2, 5, 6]);
}

#[test]
fn spatial_matches_nested_loop_oracle() {
    let x = randn(&[2, 2, 4, 4], 2);
    let w = randn(&[2, 2, 1, 3, 3], 3);
    let b = randn(&[2], 4);
    assert!(run_spatial(&x, &w, &b, 1).max_abs_diff(&conv_spatial_oracle(&x, &w, &b, 1)) < 1e-12);
    let x = randn(&[3, 2, 6, 8], 5);
    let w = randn(&[4, 3, 1, 3, 3], 6);
    let b = randn(&[4], 7);
    let y = run_spatial(&x, &w, &b, 2);
    assert_eq!(y.shape(), &[4, 2, 3, 4]);
    assert!(y.max_abs_diff(&conv_spatial_oracle(&x, &w, &b, 2)) < 1e-12);
}

#[test]
fn temporal_identity_cases() {
    let x = randn(&[3, 1, 4, 4], 8);
    let mut w = Tensor::zeros(&[3, 3, 3, 1, 1]);
    for k in 0..3 {
        w.data_mut()[(k * 3 + k) * 3 + 1] = 1.0;
    }
    assert_eq!(run_temporal(&x, &w, &Tensor::zeros(&[3])), x);

    // constant over time, taps summing to one
    let frame = randn(&[2, 1, 3, 3], 9);
    let mut data = Vec::new();
    for c in 0..2 {
        for _ in 0..4 {
            data.extend_from_slice(&frame.data()[c * 9..(c + 1) * 9]);
        }
    }
    let x = Tensor::new(&[2, 4, 3, 3], data).unwrap();
    let mut w = Tensor::zeros(&[2, 2, 3, 1, 1]);
    for k in 0..2 {
        let taps = [0.2, 0.5, 0.3];
        w.data_mut()[(k * 2 + k) * 3..(k * 2 + k) * 3 + 3].copy_from_slice(&taps);
    }
    assert!(run_temporal(&x, &w, &Tensor::zeros(&[2])).max_abs_diff(&x) < 1e-15);
}

#[test]
fn temporal_matches_nested_loop_oracle() {
    for (l, seed) in [(1, 10), (2, 11), (5, 12)] {
        let x = randn(&[3, l, 3, 4], seed);
        let w = randn(&[2, 3, 3, 1, 1], seed + 100);
        let b = randn(&[2], seed + 200);
        assert!(run_temporal(&x, &w, &b).max_abs_diff(&conv_temporal_oracle(&x, &w, &b)) < 1e-12);
    }
}

#[test]
fn convolution_is_linear() {
    let (x, y) = (randn(&[2, 3, 4, 4], 13), randn(&[2, 3, 4, 4], 14));
    let w = randn(&[3, 2, 1, 3, 3], 15);
    let wt = randn(&[3, 2, 3, 1, 1], 16);
    let zero = Tensor::zeros(&[3]);
    let (a, b) = (0.7, -1.3);
    let mix = Tensor::new(x.shape(), x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect()).unwrap();
    for conv in [
        &(|t: &Tensor<f64>| run_spatial(t, &w, &zero, 1)) as &dyn Fn(&Tensor<f64>) -> Tensor<f64>,
        &|t: &Tensor<f64>| run_temporal(t, &wt, &zero),
    ] {
        let lhs = conv(&mix);
        let (cx, cy) = (conv(&x), conv(&y));
        let rhs = Tensor::new(lhs.shape(), cx.data().iter().zip(cy.data()).map(|(p, q)| a * p + b * q).collect()).unwrap();
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }
}

#[test]
fn channel_mismatch_is_shape_error() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::zeros(&[3, 1, 4, 4]));
    let w = tape.leaf(Tensor::zeros(&[2, 4, 1, 3, 3]));
    let b = tape.leaf(Tensor::zeros(&[2]));
    assert!(matches!(tape.conv_spatial(x, w, b, 1), Err(crate::U4dError::Shape(_))));
    let wt = tape.leaf(Tensor::zeros(&[2, 4, 3, 1, 1]));
    assert!(matches!(tape.conv_temporal(x, wt, b), Err(crate::U4dError::Shape(_))));
}

#[test]
fn closed_form_values() {
    let mut tape = Tape::<f64>::new();
    let z = tape.leaf(Tensor::zeros(&[2]));
    let s = tape.softmax_lastdim(z);
    assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
    let sp = tape.softplus(z);
    assert!((tape.value(sp).data()[0] - 2f64.ln()).abs() < 1e-15);
    let logit = tape.leaf(Tensor::new(&[1], vec![0.0]).unwrap());
    let target = tape.constant(Tensor::new(&[1], vec![0.5]).unwrap());
    let bce = tape.bce_with_logits(logit, target).unwrap();
    assert!((tape.value(bce).item() - 2f64.ln()).abs() < 1e-15);
    let x = tape.leaf(Tensor::new(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    let sm = tape.softmax_lastdim(x);
    for row in tape.value(sm).data().chunks(2) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }
    let big = tape.leaf(Tensor::new(&[3], vec![-50.0, 0.0, 50.0]).unwrap());
    let spb = tape.softplus(big);
    assert!(tape.value(spb).data().iter().all(|v| *v > 0.0));
}

#[test]
fn bce_rejects_targets_outside_unit_interval() {
    let mut tape = Tape::<f64>::new();
    let z = tape.leaf(Tensor::zeros(&[2]));
    let t = tape.constant(Tensor::new(&[2], vec![0.0, 1.5]).unwrap());
    assert!(tape.bce_with_logits(z, t).is_err());
}

#[test]
fn simple_backward_rules() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(randn(&[2, 3], 20));
    let unused = tape.leaf(randn(&[4], 21));
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap();
    assert!(g.wrt(x).data().iter().all(|v| *v == 1.0));
    assert!(g.wrt(unused).data().iter().all(|v| *v == 0.0));
    assert!(g.get(unused).is_none());

    let mut tape = Tape::<f64>::new();
    let xt = randn(&[2, 3], 22);
    let x = tape.leaf(xt.clone());
    let zero = tape.constant(Tensor::zeros(&[2, 3]));
    let l = tape.mse(x, zero).unwrap();
    let g = tape.backward(l).unwrap().wrt(x);
    for (gv, xv) in g.data().iter().zip(xt.data()) {
        assert!((gv - 2.0 * xv / 6.0).abs() < 1e-15);
    }
}

#[test]
fn backward_requires_scalar_loss() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::zeros(&[2]));
    let y = tape.softplus(x);
    assert!(matches!(tape.backward(y), Err(crate::U4dError::Usage(_))));
}

#[test]
fn softmax_nll_gradient_is_p_minus_onehot() {
    let logits = randn(&[4, 5], 23);
    let targets = [0usize, 3, 4, 1];
    let mut onehot = Tensor::zeros(&[4, 5]);
    for (r, t) in targets.iter().enumerate() {
        onehot.data_mut()[r * 5 + t] = 1.0;
    }
    let mut tape = Tape::<f64>::new();
    let z = tape.leaf(logits.clone());
    let p = tape.softmax_lastdim(z);
    let lp = tape.ln(p);
    let oh = tape.constant(onehot.clone());
    let picked = tape.mul(lp, oh).unwrap();
    let s = tape.sum(picked);
    let nll = tape.scale(s, -1.0);
    let g = tape.backward(nll).unwrap().wrt(z);
    let probs = tape.value(p).clone();
    for i in 0..20 {
        assert!((g.data()[i] - (probs.data()[i] - onehot.data()[i])).abs() < 1e-10);
    }
}

#[test]
fn composite_graph_matches_finite_differences() {
    let params = vec![randn(&[2, 2, 3, 4], 30), randn(&[3, 2, 1, 3, 3], 31), randn(&[3], 32)];
    let report = finite_diff_check(&params, 1e-5, |tape, v| {
        let y = tape.conv_spatial(v[0], v[1], v[2], 1)?;
        let s = tape.softplus(y);
        let target = tape.constant(Tensor::full(tape.shape(s), 0.3));
        tape.mse(s, target)
    })
    .unwrap();
    assert!(report.max_relative_error < 1e-6, "{report:?}");
}

#[test]
fn gradcheck_linear_and_quadratic() {
    let params = vec![Tensor::new(&[4], vec![0.3, -1.2, 2.0, 0.7]).unwrap()];
    let coef = Tensor::new(&[4], vec![1.5, -2.0, 0.25, 3.0]).unwrap();
    let linear = finite_diff_check(&params, 1e-5, |tape, v| {
        let c = tape.constant(coef.clone());
        let p = tape.mul(v[0], c)?;
        Ok(tape.sum(p))
    })
    .unwrap();
    assert!(linear.max_relative_error < 1e-10, "{linear:?}");
    let quadratic = finite_diff_check(&params, 1e-5, |tape, v| {
        let sq = tape.mul(v[0], v[0])?;
        let c = tape.constant(coef.clone());
        let p = tape.mul(sq, c)?;
        Ok(tape.sum(p))
    })
    .unwrap();
    assert!(quadratic.max_relative_error < 1e-9, "{quadratic:?}");
}

/// Every primitive through a scalar readout, 64-bit, step 1e−5.
#[test]
fn every_primitive_passes_gradcheck() {
    type Case = (&'static str, Vec<Tensor<f64>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> crate::Result<Var>>);
    let readout = |tape: &mut Tape<f64>, y: Var| -> crate::Result<Var> {
        let w = tape.constant(randn(tape.shape(y), 99));
        let p = tape.mul(y, w)?;
        Ok(tape.sum(p))
    };
    let cases: Vec<Case> = vec![
        ("conv_spatial_s2", vec![randn(&[2, 2, 4, 6], 40), randn(&[3, 2, 1, 3, 3], 41), randn(&[3], 42)], Box::new(move |t, v| {
            let y = t.conv_spatial(v[0], v[1], v[2], 2)?;
            readout(t, y)
        })),
        ("conv_temporal", vec![randn(&[2, 3, 2, 3], 43), randn(&[2, 2, 3, 1, 1], 44), randn(&[2], 45)], Box::new(move |t, v| {
            let y = t.conv_temporal(v[0], v[1], v[2])?;
            readout(t, y)
        })),
        ("channel_mix", vec![randn(&[3, 2, 2, 2], 46), randn(&[3, 4], 47), randn(&[4], 48)], Box::new(move |t, v| {
            let y = t.channel_mix(v[0], v[1], v[2])?;
            readout(t, y)
        })),
        ("dense", vec![randn(&[3, 4], 49), randn(&[4, 2], 50), randn(&[2], 51)], Box::new(move |t, v| {
            let y = t.dense(v[0], v[1], v[2])?;
            readout(t, y)
        })),
        ("softmax_lastdim", vec![randn(&[3, 4], 52)], Box::new(move |t, v| {
            let y = t.softmax_lastdim(v[0]);
            readout(t, y)
        })),
        ("softmax_channels", vec![randn(&[2, 1, 2, 3], 53)], Box::new(move |t, v| {
            let y = t.softmax_channels(v[0]);
            readout(t, y)
        })),
        ("softplus_silu_ln", vec![randn(&[5], 54)], Box::new(move |t, v| {
            let a = t.softplus(v[0]);
            let b = t.silu(v[0]);
            let c = t.ln(a);
            let d = t.add(b, c)?;
            readout(t, d)
        })),
        ("broadcast_bias_concat_select", vec![randn(&[1, 2, 2, 2], 55), randn(&[3, 2, 2, 2], 56), randn(&[3], 57)], Box::new(move |t, v| {
            let m = t.mul_broadcast(v[0], v[1])?;
            let b = t.add_channel_bias(m, v[2])?;
            let c = t.concat(b, v[1])?;
            let s = t.select_channel(c, 4)?;
            let u = t.upsample2(c)?;
            let su = t.sub(u, u)?;
            let r1 = readout(t, s)?;
            let r2 = readout(t, c)?;
            let r3 = t.sum(su);
            let r = t.add(r1, r2)?;
            t.add(r, r3)
        })),
        ("upsample2", vec![randn(&[2, 1, 2, 3], 58)], Box::new(move |t, v| {
            let y = t.upsample2(v[0])?;
            readout(t, y)
        })),
        ("mse_bce_mean", vec![randn(&[6], 59), randn(&[6], 60)], Box::new(move |t, v| {
            let targets = t.constant(Tensor::new(&[6], vec![0.0, 1.0, 0.3, 1.0, 0.0, 0.5]).unwrap());
            let a = t.mse(v[0], v[1])?;
            let b = t.bce_with_logits(v[0], targets)?;
            let m = t.mean(v[1]);
            let s = t.add(a, b)?;
            let s = t.add(s, m)?;
            Ok(t.scale(s, 1.7))
        })),
        ("cv_squared", vec![Tensor::new(&[5], vec![0.2, 0.8, 0.5, 0.4, 0.9]).unwrap()], Box::new(move |t, v| Ok(t.cv_squared(v[0])))),
    ];
    for (name, params, f) in cases {
        let report = finite_diff_check(&params, 1e-5, |t, v| f(t, v)).unwrap();
        assert!(report.max_relative_error < 1e-4, "{name}: {report:?}");
    }
}

#[test]
fn f32_forward_matches_f64() {
    let x = randn(&[2, 2, 4, 4], 70);
    let w = randn(&[3, 2, 1, 3, 3], 71);
    let b = randn(&[3], 72);
    let y64 = run_spatial(&x, &w, &b, 1);
    let mut tape = Tape::<f32>::new();
    let (xv, wv, bv) = (tape.constant(x.cast()), tape.constant(w.cast()), tape.constant(b.cast()));
    let y = tape.conv_spatial(xv, wv, bv, 1).unwrap();
    let y32: Tensor<f64> = tape.value(y).cast();
    assert!(y32.max_abs_diff(&y64) < 1e-4);
}
