mod common;

use common::{away_from_zero, gradcheck, uniform, weighted_sum};
use prunenet::autodiff::{BnConfig, BnMode, BnStats, ParamStore, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn conv3x3_on_single_channel_4x4() {
    let mut r = rng(1);
    let x = uniform(&[1, 1, 4, 4], -1.0, 1.0, &mut r);
    let w = uniform(&[2, 1, 3, 3], -1.0, 1.0, &mut r);
    let b = uniform(&[2], -1.0, 1.0, &mut r);
    let err = gradcheck(&[x, w, b], |t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 0, None)?;
        weighted_sum(t, y, 3)
    });
    assert!(err < TOL, "rel err {err}");
}

#[test]
fn strided_padded_conv() {
    let mut r = rng(2);
    let x = uniform(&[2, 3, 5, 5], -1.0, 1.0, &mut r);
    let w = uniform(&[4, 3, 3, 3], -1.0, 1.0, &mut r);
    let err = gradcheck(&[x, w], |t, v| {
        let y = t.conv2d(v[0], v[1], None, 2, 1, None)?;
        weighted_sum(t, y, 4)
    });
    assert!(err < TOL, "rel err {err}");
}

#[test]
fn batch_norm_both_modes() {
    for mode in [BnMode::Train, BnMode::Eval] {
        let mut r = rng(3);
        let x = uniform(&[3, 2, 3, 3], -2.0, 2.0, &mut r);
        let g = uniform(&[2], 0.5, 1.5, &mut r);
        let b = uniform(&[2], -0.5, 0.5, &mut r);
        let err = gradcheck(&[x, g, b], |t, v| {
            let mut stats = BnStats {
                mean: vec![0.1, -0.2],
                var: vec![0.7, 1.3],
            };
            let y = t.batch_norm(v[0], v[1], v[2], &mut stats, mode, BnConfig::default(), None)?;
            weighted_sum(t, y, 5)
        });
        assert!(err < TOL, "{mode:?}: rel err {err}");
    }
}

#[test]
fn elementwise_and_reductions() {
    let mut r = rng(4);
    let a = away_from_zero(&[2, 3, 2, 2], 0.1, 1.0, &mut r);
    let b = uniform(&[2, 3, 2, 2], -1.0, 1.0, &mut r);
    let s = uniform(&[2, 3], -1.0, 1.0, &mut r);
    let err = gradcheck(&[a, b, s], |t, v| {
        let m = t.mul(v[0], v[1])?;
        let r = t.relu(v[0])?;
        let sum = t.add(m, r)?;
        let sg = t.sigmoid(sum)?;
        let cs = t.channel_scale(sg, v[2])?;
        let p = t.global_avg_pool(cs)?;
        weighted_sum(t, p, 6)
    });
    assert!(err < TOL, "rel err {err}");
}

#[test]
fn linear_l1_and_cross_entropy() {
    let mut r = rng(5);
    let x = uniform(&[3, 4], -1.0, 1.0, &mut r);
    let w = uniform(&[5, 4], -1.0, 1.0, &mut r);
    let v = uniform(&[4], -1.0, 1.0, &mut r);
    let err = gradcheck(&[x, w, v], |t, v| {
        let rows = t.repeat_rows(v[2], 3)?;
        let xs = t.add(v[0], rows)?;
        let logits = t.linear(xs, v[1])?;
        let ce = t.softmax_cross_entropy(logits, &[0, 3, 4])?;
        let l1 = t.l1_norm(v[1])?;
        let l1 = t.scale(l1, 0.1)?;
        t.add(ce, l1)
    });
    assert!(err < TOL, "rel err {err}");
}

#[test]
fn max_pool_with_distinct_values() {
    let mut r = rng(6);
    // distinct values keep the argmax stable under the finite-difference step
    let mut x = uniform(&[1, 2, 4, 4], -1.0, 1.0, &mut r);
    for (i, v) in x.data_mut().iter_mut().enumerate() {
        *v += i as f64 * 0.01;
    }
    let err = gradcheck(&[x], |t, v| {
        let y = t.max_pool2d(v[0], 2)?;
        weighted_sum(t, y, 7)
    });
    assert!(err < TOL, "rel err {err}");
}

#[test]
fn saturating_sigmoid_inside_linear_region() {
    let x = Tensor::from_vec(vec![-1.0, -0.3, 0.2, 0.9, 1.4]);
    let err = gradcheck(&[x], |t, v| {
        let y = t.saturating_sigmoid(v[0], 1.2, 0.1, Some(&[0.1, -0.2, 0.0, 0.3, -0.1]))?;
        weighted_sum(t, y, 8)
    });
    assert!(err < TOL, "rel err {err}");
}

#[test]
fn conv_bn_relu_pool_linear_ce() {
    let mut r = rng(7);
    let x = uniform(&[2, 2, 5, 5], -1.0, 1.0, &mut r);
    let w = uniform(&[3, 2, 3, 3], -0.5, 0.5, &mut r);
    let g = uniform(&[3], 0.5, 1.5, &mut r);
    let b = uniform(&[3], -0.2, 0.2, &mut r);
    let fc = uniform(&[4, 3], -1.0, 1.0, &mut r);
    let err = gradcheck(&[x, w, g, b, fc], |t, v| {
        let mut stats = BnStats::new(3);
        let y = t.conv2d(v[0], v[1], None, 1, 1, None)?;
        let y = t.batch_norm(y, v[2], v[3], &mut stats, BnMode::Train, BnConfig::default(), None)?;
        let y = t.relu(y)?;
        let y = t.global_avg_pool(y)?;
        let y = t.linear(y, v[4])?;
        t.softmax_cross_entropy(y, &[1, 3])
    });
    assert!(err < TOL, "rel err {err}");
}

#[test]
fn sum_and_l1_examples() {
    let mut t = Tape::new();
    let x = t.var(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
    let s = t.sum(x).unwrap();
    let g = t.backward(s, &mut ParamStore::new()).unwrap();
    assert_eq!(g.wrt(x).unwrap().data(), &[1.0, 1.0, 1.0]);

    let mut t = Tape::new();
    let x = t.var(Tensor::from_vec(vec![2.0, -3.0]));
    let l = t.l1_norm(x).unwrap();
    let g = t.backward(l, &mut ParamStore::new()).unwrap();
    assert_eq!(g.wrt(x).unwrap().data(), &[1.0, -1.0]);
}

#[test]
fn fan_out_accumulates() {
    let mut t = Tape::new();
    let x = t.var(Tensor::from_vec(vec![0.5, -1.5]));
    let y = t.add(x, x).unwrap();
    let l = weighted_sum(&mut t, y, 9).unwrap();
    let g = t.backward(l, &mut ParamStore::new()).unwrap();

    let mut t2 = Tape::new();
    let x2 = t2.var(Tensor::from_vec(vec![0.5, -1.5]));
    let l2 = weighted_sum(&mut t2, x2, 9).unwrap();
    let g2 = t2.backward(l2, &mut ParamStore::new()).unwrap();
    let once = g2.wrt(x2).unwrap();
    let twice = g.wrt(x).unwrap();
    for (a, b) in twice.data().iter().zip(once.data()) {
        assert_eq!(*a, 2.0 * b);
    }
}

#[test]
fn backward_needs_scalar() {
    let mut t = Tape::new();
    let x = t.var(Tensor::from_vec(vec![1.0, 2.0]));
    let y = t.relu(x).unwrap();
    assert!(matches!(
        t.backward(y, &mut ParamStore::new()),
        Err(prunenet::Error::Usage(_))
    ));
}

#[test]
fn param_leaves_receive_grads() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::from_vec(vec![1.0, -2.0])).unwrap();
    let mut t = Tape::new();
    let w = t.param(&store, id);
    let l = t.l1_norm(w).unwrap();
    t.backward(l, &mut store).unwrap();
    assert_eq!(store.get(id).grad.as_ref().unwrap().data(), &[1.0, -1.0]);
}

#[test]
fn forward_examples() {
    let mut t = Tape::new();
    let x = t.var(Tensor::from_vec(vec![-1.0, 2.0]));
    let r = t.relu(x).unwrap();
    assert_eq!(t.value(r).data(), &[0.0, 2.0]);

    let x = t.var(Tensor::from_vec(vec![1.0, -2.0, 3.0]));
    let l = t.l1_norm(x).unwrap();
    assert_eq!(t.value(l).item(), 6.0);

    let logits = t.var(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
    let ce = t.softmax_cross_entropy(logits, &[0]).unwrap();
    assert!((t.value(ce).item() - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn identity_and_constant_convolutions() {
    let mut r = rng(11);
    let img = uniform(&[1, 1, 5, 4], -3.0, 3.0, &mut r);
    let mut t = Tape::new();
    let x = t.var(img.clone());
    let w = t.var(Tensor::ones(vec![1, 1, 1, 1]));
    let b = t.var(Tensor::zeros(vec![1]));
    let y = t.conv2d(x, w, Some(b), 1, 0, None).unwrap();
    assert_eq!(t.value(y), &img);

    let x = t.var(uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut r));
    let w = t.var(Tensor::zeros(vec![2, 3, 3, 3]));
    let b = t.var(Tensor::from_vec(vec![0.25, -1.5]));
    let y = t.conv2d(x, w, Some(b), 2, 1, None).unwrap();
    let out = t.value(y);
    assert_eq!(out.shape(), &[2, 2, 2, 2]);
    for (i, &v) in out.data().iter().enumerate() {
        assert_eq!(v, if (i / 4) % 2 == 0 { 0.25 } else { -1.5 });
    }
}

#[test]
fn batch_norm_examples() {
    let mut r = rng(12);
    let input = uniform(&[4, 3, 3, 3], -2.0, 5.0, &mut r);
    let cfg = BnConfig::default();

    let mut t = Tape::new();
    let x = t.var(input.clone());
    let g = t.var(Tensor::ones(vec![3]));
    let b = t.var(Tensor::zeros(vec![3]));
    let mut unit = BnStats {
        mean: vec![0.0; 3],
        var: vec![1.0; 3],
    };
    let y = t.batch_norm(x, g, b, &mut unit, BnMode::Eval, cfg, None).unwrap();
    let scale = 1.0 / (1.0 + cfg.eps).sqrt();
    for (a, e) in t.value(y).data().iter().zip(input.data()) {
        assert!((a - e * scale).abs() < 1e-12);
        assert!((a - e).abs() < 1e-4 * e.abs().max(1.0));
    }

    let y = t.batch_norm(x, g, b, &mut unit, BnMode::Train, cfg, None).unwrap();
    let out = t.value(y).data();
    for c in 0..3 {
        let vals: Vec<f64> = (0..4).flat_map(|n| out[(n * 3 + c) * 9..(n * 3 + c + 1) * 9].to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-12, "channel {c}: mean {mean}");
        assert!((var - 1.0).abs() < 1e-3, "channel {c}: var {var}");
    }
}
