#![allow(dead_code)]

use prunenet::autodiff::{ParamStore, Tape, Tensor, Var};
use prunenet::backbones::{presets, BuildVariant, Network};
use prunenet::cost::{multi_task_loss, CostTarget};
use prunenet::spm::{BinarizerConfig, Branch, ForwardCtx, Mode};
use prunenet::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// Central finite-difference check of every input element.
///
/// Returns the worst relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn gradcheck<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let loss = f(&mut tape, &vars).expect("forward");
    let grads = tape.backward(loss, &mut ParamStore::new()).expect("backward");

    let eval = |perturbed: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.var(x.clone())).collect();
        let l = f(&mut t, &vs).expect("forward");
        t.value(l).item()
    };

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[i]).unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

/// `sum(v * r)` with fixed pseudo-random `r`, reducing any tensor to a scalar
/// without symmetric gradients.
pub fn weighted_sum(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(v).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = Tensor::new(
        shape.clone(),
        (0..shape.iter().product::<usize>()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )?;
    let r = tape.constant(r);
    let p = tape.mul(v, r)?;
    tape.sum(p)
}

/// Uniform values in `±[lo, hi]`, keeping clear of zero.
pub fn away_from_zero(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(lo..hi);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn tiny_loss(net: &mut Network, x: &Tensor, labels: &[usize], lambda: f64, backward: bool) -> f64 {
    let mut ctx = ForwardCtx::new(Mode::Train, ChaCha8Rng::seed_from_u64(0));
    ctx.branch = Branch::ForceS1;
    let mut tape = Tape::new();
    let out = net.forward(&mut tape, x, &mut ctx).unwrap();
    let ce = tape.softmax_cross_entropy(out.logits, labels).unwrap();
    let n_c = net.n_c().max(1);
    let l = multi_task_loss(&mut tape, ce, &out.saliencies, lambda, n_c, CostTarget::Saliency, (1.2, 0.1))
        .unwrap()
        .loss;
    let v = tape.value(l).item();
    if backward {
        tape.backward(l, &mut net.store).unwrap();
    }
    v
}

/// Worst relative error of the TinyNet training loss over `samples` random
/// parameter coordinates, and how many coordinates were checked. Coordinates
/// whose step crosses a relu or clamp kink are skipped.
pub fn tiny_loss_check(variant: BuildVariant, seed: u64, samples: usize) -> (f64, usize) {
    let binarizer = BinarizerConfig {
        noise_std: 0.0,
        ..Default::default()
    };
    let cfg = presets::tiny(3, [3, 6, 6]);
    let mut net = Network::build(&cfg, variant, binarizer, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    // keep saliencies well inside the unsaturated band
    let ids: Vec<_> = net.store.iter().map(|(id, _)| id).collect();
    for &id in &ids {
        let p = net.store.get_mut(id);
        if p.name.ends_with(".spm.w2") {
            p.tensor.data_mut().iter_mut().for_each(|v| *v *= 0.5);
        }
    }
    let x = Tensor::randn(vec![4, 3, 6, 6], 1.0, &mut rng);
    let labels = [0, 1, 2, 1];
    tiny_loss(&mut net, &x, &labels, 0.01, true);
    let grads: Vec<Tensor> = ids.iter().map(|&id| net.store.get(id).grad.clone().unwrap()).collect();
    net.store.zero_grad();

    let base = tiny_loss(&mut net, &x, &labels, 0.01, false);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for _ in 0..samples {
        let k = rng.gen_range(0..ids.len());
        let j = rng.gen_range(0..grads[k].numel());
        let orig = net.store.get(ids[k]).tensor.data()[j];
        let mut at = |h: f64| {
            net.store.get_mut(ids[k]).tensor.data_mut()[j] = orig + h;
            let v = tiny_loss(&mut net, &x, &labels, 0.01, false);
            net.store.get_mut(ids[k]).tensor.data_mut()[j] = orig;
            v
        };
        let (up, down) = (at(FD_STEP), at(-FD_STEP));
        let (up10, down10) = (at(FD_STEP / 10.0), at(-FD_STEP / 10.0));
        // Gap between one-sided slopes: linear in the step on smooth ground,
        // not when the step crosses a relu or clamp kink.
        let gap = (up - 2.0 * base + down) / FD_STEP;
        let gap10 = (up10 - 2.0 * base + down10) / (FD_STEP / 10.0);
        if gap.abs() > 1e-8 && !(5.0..20.0).contains(&(gap / gap10)) {
            continue;
        }
        checked += 1;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let a = grads[k].data()[j];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    (worst, checked)
}
