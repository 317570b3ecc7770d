//! Saliency-and-pruning modules.
//!
//! An SPM sits in front of a conv-BN layer. It squeezes the layer input into a
//! per-channel descriptor, maps it through a two-layer bottleneck to one
//! saliency score per output channel, and turns those scores into keep/prune
//! decisions. The layer output for channel `i` is `s_i * b_i * BN(conv_i(x))`,
//! and channels with `b_i == 0` are never computed.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    saturating_sigmoid_values, BnConfig, BnMode, BnStats, ParamId, ParamStore, PlaneMask, Tape, Tensor, Var,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// How an SPM produces its decisions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Variant {
    /// Input-dependent saliency, noisy binarization.
    Adaptive,
    /// Keep the top `k_fraction` channels of every layer.
    FixedK(f64),
    /// Saliency computed from a learned input-independent vector.
    Static,
}

/// Saturating-sigmoid binarizer settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BinarizerConfig {
    pub a: f64,
    pub b: f64,
    pub noise_std: f64,
    /// Probability that a training forward pass emits the continuous `s1`.
    pub s1_mix_prob: f64,
    /// Draw the s1/s2 choice per element instead of once per layer and batch.
    pub per_element_mix: bool,
}

impl Default for BinarizerConfig {
    fn default() -> Self {
        Self {
            a: 1.2,
            b: 0.1,
            noise_std: 1.0,
            s1_mix_prob: 0.5,
            per_element_mix: false,
        }
    }
}

impl BinarizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.a.is_nan() || self.a <= 0.0 {
            return Err(Error::Config(format!("binarizer a must be positive, got {}", self.a)));
        }
        if !(0.0..=1.0).contains(&self.s1_mix_prob) {
            return Err(Error::Config(format!(
                "s1_mix_prob must lie in [0, 1], got {}",
                self.s1_mix_prob
            )));
        }
        if self.noise_std.is_nan() || self.noise_std < 0.0 {
            return Err(Error::Config("noise_std must be non-negative".into()));
        }
        Ok(())
    }
}

/// Which value the training-mode binarizer emits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Branch {
    #[default]
    Sample,
    ForceS1,
    ForceS2,
}

/// Test hook replacing every gate with `s = 1, b = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GateOverride {
    #[default]
    None,
    Open,
}

/// Mutable per-pass state threaded through a forward pass.
pub struct ForwardCtx {
    pub mode: Mode,
    pub rng: ChaCha8Rng,
    pub branch: Branch,
    pub gate: GateOverride,
    pub bn: BnConfig,
    /// Batch-norm mode; follows `mode` unless overridden.
    pub bn_mode: BnMode,
}

impl ForwardCtx {
    pub fn new(mode: Mode, rng: ChaCha8Rng) -> Self {
        Self {
            mode,
            rng,
            branch: Branch::Sample,
            gate: GateOverride::None,
            bn: BnConfig::default(),
            bn_mode: match mode {
                Mode::Train => BnMode::Train,
                Mode::Eval => BnMode::Eval,
            },
        }
    }
}

/// Two-layer bottleneck `W2 relu(W1 d)`, no biases.
#[derive(Debug, Clone)]
pub struct SaliencyHead {
    pub w1: ParamId,
    pub w2: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub hidden: usize,
    pub reduction: usize,
}

impl SaliencyHead {
    pub fn hidden_width(c_out: usize, reduction: usize) -> usize {
        (c_out / reduction.max(1)).max(1)
    }

    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        reduction: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if reduction == 0 {
            return Err(Error::Config("reduction rate must be positive".into()));
        }
        let hidden = Self::hidden_width(c_out, reduction);
        let w1 = Tensor::randn(vec![hidden, c_in], (2.0 / c_in as f64).sqrt(), rng);
        let w2 = Tensor::randn(vec![c_out, hidden], (1.0 / hidden as f64).sqrt(), rng);
        Ok(Self {
            w1: store.add(format!("{prefix}.w1"), w1)?,
            w2: store.add(format!("{prefix}.w2"), w2)?,
            c_in,
            c_out,
            hidden,
            reduction,
        })
    }

    /// Multiply-adds of one head evaluation (descriptor excluded).
    pub fn flops(&self) -> u64 {
        (self.hidden * self.c_in + self.c_out * self.hidden) as u64
    }
}

#[derive(Debug, Clone)]
pub struct Spm {
    pub head: SaliencyHead,
    pub binarizer: BinarizerConfig,
    pub variant: Variant,
    pub static_vector: Option<ParamId>,
    pub last_s: Option<Tensor>,
    pub last_b: Option<Tensor>,
    /// Channel descriptor `[N, C_in]` of the last input (what the head saw
    /// for the input-dependent variants).
    pub last_d: Option<Tensor>,
}

impl Spm {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        reduction: usize,
        variant: Variant,
        binarizer: BinarizerConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        binarizer.validate()?;
        if let Variant::FixedK(k) = variant {
            keep_count(c_out, k)?;
        }
        let head = SaliencyHead::new(store, prefix, c_in, c_out, reduction, rng)?;
        let static_vector = match variant {
            Variant::Static => Some(store.add(
                format!("{prefix}.static"),
                Tensor::new(vec![c_in], (0..c_in).map(|_| rng.gen_range(0.0..1.0)).collect())?,
            )?),
            _ => None,
        };
        Ok(Self {
            head,
            binarizer,
            variant,
            static_vector,
            last_s: None,
            last_b: None,
            last_d: None,
        })
    }
}

/// Spatial mean of each channel: `[N, C, H, W] -> [N, C]`.
pub fn channel_descriptor(tape: &mut Tape, x: Var) -> Result<Var> {
    tape.global_avg_pool(x)
}

fn spatial_means(x: &Tensor) -> Result<Tensor> {
    let shape = x.shape();
    let plane = shape[2] * shape[3];
    let means = x.data().chunks(plane.max(1)).map(|p| p.iter().sum::<f64>() / plane as f64).collect();
    Tensor::new(vec![shape[0], shape[1]], means)
}

/// Saliency scores `[N, C_out]` for a batch of layer inputs.
pub fn predict_saliency(tape: &mut Tape, store: &ParamStore, spm: &Spm, x: Var) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::dim("predict_saliency", format!("input {shape:?}")));
    }
    if shape[1] != spm.head.c_in {
        return Err(Error::dim(
            "predict_saliency",
            format!("head expects {} input channels, got {}", spm.head.c_in, shape[1]),
        ));
    }
    let d = match spm.variant {
        Variant::Static => {
            let v = tape.param(store, spm.static_vector.expect("static variant has a vector"));
            tape.repeat_rows(v, shape[0])?
        }
        _ => channel_descriptor(tape, x)?,
    };
    let w1 = tape.param(store, spm.head.w1);
    let w2 = tape.param(store, spm.head.w2);
    let h = tape.linear(d, w1)?;
    let h = tape.relu(h)?;
    tape.linear(h, w2)
}

/// `clamp(a * sigmoid(s + noise) - b, 0, 1)` without a tape.
pub fn saturating_sigmoid(s: &[f64], a: f64, b: f64, noise: Option<&[f64]>) -> Vec<f64> {
    saturating_sigmoid_values(s, a, b, noise).0
}

/// Result of binarizing a batch of saliency scores.
pub struct Binarized {
    /// Gate values fed forward; `s1`, `s2` or a mix in training, `s2` in eval.
    pub b: Var,
    /// The binary code `s2` per `(sample, channel)`.
    pub bits: Vec<bool>,
    /// `d(b)/d(s)` used in backward (zero in eval).
    pub surrogate: Vec<f64>,
}

/// Noisy saturating-sigmoid binarization with straight-through gradients.
///
/// Training draws Gaussian noise, forms `s1` and `s2 = 1[s1 > 0.5]`, and emits
/// one of them; backward always uses the derivative of `s1`. Eval is
/// noise-free, emits `s2` and carries no gradient.
pub fn binarize(tape: &mut Tape, spm: &Spm, s: Var, ctx: &mut ForwardCtx) -> Result<Binarized> {
    if matches!(spm.variant, Variant::FixedK(_)) {
        return Err(Error::Usage("binarize is not used by the fixed-k variant".into()));
    }
    let cfg = &spm.binarizer;
    let values = tape.value(s).data().to_vec();
    let shape = tape.value(s).shape().to_vec();
    match ctx.mode {
        Mode::Eval => {
            let (s1, _) = saturating_sigmoid_values(&values, cfg.a, cfg.b, None);
            let bits: Vec<bool> = s1.iter().map(|&v| v > 0.5).collect();
            let b = tape.constant(Tensor::new(shape, bits.iter().map(|&k| k as u8 as f64).collect())?);
            Ok(Binarized {
                b,
                surrogate: vec![0.0; bits.len()],
                bits,
            })
        }
        Mode::Train => {
            let noise: Vec<f64> = if cfg.noise_std > 0.0 {
                let dist = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;
                (0..values.len()).map(|_| dist.sample(&mut ctx.rng)).collect()
            } else {
                vec![0.0; values.len()]
            };
            let (s1, deriv) = saturating_sigmoid_values(&values, cfg.a, cfg.b, Some(&noise));
            let bits: Vec<bool> = s1.iter().map(|&v| v > 0.5).collect();
            let use_s1: Vec<bool> = match ctx.branch {
                Branch::ForceS1 => vec![true; values.len()],
                Branch::ForceS2 => vec![false; values.len()],
                Branch::Sample if cfg.per_element_mix => {
                    (0..values.len()).map(|_| ctx.rng.gen_bool(cfg.s1_mix_prob)).collect()
                }
                Branch::Sample => vec![ctx.rng.gen_bool(cfg.s1_mix_prob); values.len()],
            };
            let forward = s1
                .iter()
                .zip(&bits)
                .zip(&use_s1)
                .map(|((&v, &bit), &first)| if first { v } else { bit as u8 as f64 })
                .collect();
            let b = tape.straight_through(s, Tensor::new(shape, forward)?, deriv.clone())?;
            Ok(Binarized {
                b,
                bits,
                surrogate: deriv,
            })
        }
    }
}

fn keep_count(channels: usize, k_fraction: f64) -> Result<usize> {
    if !(k_fraction > 0.0 && k_fraction <= 1.0) {
        return Err(Error::Config(format!("k fraction must lie in (0, 1], got {k_fraction}")));
    }
    let keep = (k_fraction * channels as f64).round() as usize;
    if keep == 0 {
        return Err(Error::Config(format!(
            "k fraction {k_fraction} keeps no channel out of {channels}"
        )));
    }
    Ok(keep.min(channels))
}

/// Marks the `round(k_fraction * C)` highest scores of one sample with 1.
/// Ties go to the lower channel index.
pub fn fixed_k_select(s: &[f64], k_fraction: f64) -> Result<Vec<f64>> {
    let keep = keep_count(s.len(), k_fraction)?;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&i, &j| s[j].total_cmp(&s[i]).then(i.cmp(&j)));
    let mut out = vec![0.0; s.len()];
    for &i in &order[..keep] {
        out[i] = 1.0;
    }
    Ok(out)
}

/// Convolution (bias-free) followed by batch norm.
#[derive(Debug, Clone)]
pub struct ConvBn {
    pub name: String,
    pub weight: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: BnStats,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let fan_in = (c_in * kernel * kernel) as f64;
        let w = Tensor::randn(vec![c_out, c_in, kernel, kernel], (2.0 / fan_in).sqrt(), rng);
        Ok(Self {
            name: prefix.to_string(),
            weight: store.add(format!("{prefix}.weight"), w)?,
            gamma: store.add(format!("{prefix}.bn.gamma"), Tensor::ones(vec![c_out]))?,
            beta: store.add(format!("{prefix}.bn.beta"), Tensor::zeros(vec![c_out]))?,
            stats: BnStats::new(c_out),
            c_in,
            c_out,
            kernel,
            stride,
            padding,
        })
    }

    /// `BN(conv(x))`, computing only the live planes of `mask`.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        ctx: &ForwardCtx,
        mask: Option<PlaneMask>,
    ) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.conv2d(x, w, None, self.stride, self.padding, mask.clone())?;
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.batch_norm(y, g, b, &mut self.stats, ctx.bn_mode, ctx.bn, mask)
    }
}

/// Output of one gated layer.
pub struct GatedOutput {
    pub out: Var,
    /// Raw saliency `[N, C_out]`.
    pub saliency: Var,
    /// Binary decisions per `(sample, channel)`, row-major.
    pub bits: Vec<bool>,
}

/// Gated conv-BN layer: `out_i = s_i * b_i * BN(conv_i(x))`.
///
/// In eval mode every `(sample, channel)` with `b == 0` is skipped. In train
/// mode a channel is skipped only when no sample in the batch keeps it and no
/// straight-through gradient can reach it, which keeps batch statistics and
/// gradients identical to the dense computation.
pub fn gated_conv_layer(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    conv: &mut ConvBn,
    spm: &mut Spm,
    ctx: &mut ForwardCtx,
) -> Result<GatedOutput> {
    let batch = tape.value(x).shape().first().copied().unwrap_or(0);
    let c = conv.c_out;
    let s = predict_saliency(tape, store, spm, x)?;

    let (gate, b, bits, live) = if ctx.gate == GateOverride::Open {
        let ones = tape.constant(Tensor::ones(vec![batch, c]));
        (ones, ones, vec![true; batch * c], vec![true; batch * c])
    } else {
        let (b, bits, surrogate) = match spm.variant {
            Variant::FixedK(k) => {
                let sv = tape.value(s).data().to_vec();
                let mut mask = Vec::with_capacity(sv.len());
                for row in sv.chunks(c) {
                    mask.extend(fixed_k_select(row, k)?);
                }
                let bits = mask.iter().map(|&v| v != 0.0).collect();
                let m = tape.constant(Tensor::new(vec![batch, c], mask)?);
                (m, bits, vec![0.0; batch * c])
            }
            _ => {
                let r = binarize(tape, spm, s, ctx)?;
                (r.b, r.bits, r.surrogate)
            }
        };
        let bv = tape.value(b).data().to_vec();
        let live: Vec<bool> = match ctx.mode {
            Mode::Eval => bv.iter().map(|&v| v != 0.0).collect(),
            Mode::Train => {
                let mut channel = vec![false; c];
                for (i, (&v, &d)) in bv.iter().zip(&surrogate).enumerate() {
                    if v != 0.0 || d != 0.0 {
                        channel[i % c] = true;
                    }
                }
                (0..batch * c).map(|i| channel[i % c]).collect()
            }
        };
        let gate = tape.mul(s, b)?;
        (gate, b, bits, live)
    };

    let out = apply_gates(tape, store, x, conv, ctx, gate, live)?;

    spm.last_s = Some(tape.value(s).clone());
    spm.last_b = Some(tape.value(b).clone());
    spm.last_d = Some(spatial_means(tape.value(x))?);
    Ok(GatedOutput {
        out,
        saliency: s,
        bits,
    })
}

/// `BN(conv(x))` scaled per `(sample, channel)` by `gate`, computing only the
/// planes marked in `live`; planes left out must carry a zero gate.
pub fn apply_gates(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    conv: &mut ConvBn,
    ctx: &ForwardCtx,
    gate: Var,
    live: Vec<bool>,
) -> Result<Var> {
    let batch = tape.value(x).shape().first().copied().unwrap_or(0);
    let c = conv.c_out;
    let mask = PlaneMask::new(batch, c, live)?;
    let mask = (mask.count_live() < batch * c).then_some(mask);
    let y = conv.forward(tape, store, x, ctx, mask)?;
    tape.channel_scale(y, gate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn spm_with(store: &mut ParamStore, c_in: usize, c_out: usize, variant: Variant) -> Spm {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Spm::new(store, "l0.spm", c_in, c_out, 1, variant, BinarizerConfig::default(), &mut rng).unwrap()
    }

    #[test]
    fn descriptor_is_spatial_mean() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![1, 2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 0.0, 0.0, 0.0, 0.0]).unwrap());
        let d = channel_descriptor(&mut t, x).unwrap();
        assert_eq!(t.value(d).data(), &[2.5, 0.0]);

        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![1, 1, 1, 1], vec![-3.25]).unwrap());
        let d = channel_descriptor(&mut t, x).unwrap();
        assert_eq!(t.value(d).data(), &[-3.25]);
    }

    #[test]
    fn hand_computed_saliency() {
        let mut store = ParamStore::new();
        let mut spm = spm_with(&mut store, 2, 2, Variant::Adaptive);
        // hidden width 1 needs reduction 2 for two outputs
        spm.head.hidden = 1;
        let w1 = store.find("l0.spm.w1").unwrap();
        let w2 = store.find("l0.spm.w2").unwrap();
        store.get_mut(w1).tensor = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        store.get_mut(w2).tensor = Tensor::new(vec![2, 1], vec![2.0, -1.0]).unwrap();
        let mut t = Tape::new();
        // descriptor [1, 0]
        let x = t.constant(Tensor::new(vec![1, 2, 1, 1], vec![1.0, 0.0]).unwrap());
        let s = predict_saliency(&mut t, &store, &spm, x).unwrap();
        assert_eq!(t.value(s).data(), &[2.0, -1.0]);
    }

    #[test]
    fn zero_head_gives_zero_saliency() {
        let mut store = ParamStore::new();
        let spm = spm_with(&mut store, 3, 4, Variant::Adaptive);
        let w2 = store.find("l0.spm.w2").unwrap();
        store.get_mut(w2).tensor = Tensor::zeros(vec![4, 4]);
        let mut t = Tape::new();
        let x = t.constant(Tensor::full(vec![2, 3, 2, 2], 0.7));
        let s = predict_saliency(&mut t, &store, &spm, x).unwrap();
        assert!(t.value(s).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn static_saliency_ignores_input() {
        let mut store = ParamStore::new();
        let spm = spm_with(&mut store, 3, 4, Variant::Static);
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![2, 3, 1, 1], vec![1.0, 2.0, 3.0, -4.0, 9.0, 0.5]).unwrap());
        let s = predict_saliency(&mut t, &store, &spm, x).unwrap();
        let v = t.value(s).data();
        assert_eq!(&v[..4], &v[4..]);
    }

    #[test]
    fn wrong_input_channels_is_dimension_error() {
        let mut store = ParamStore::new();
        let spm = spm_with(&mut store, 3, 4, Variant::Adaptive);
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(vec![1, 5, 2, 2]));
        assert!(matches!(
            predict_saliency(&mut t, &store, &spm, x),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn saturating_sigmoid_points() {
        let v = saturating_sigmoid(&[0.0, 10.0, -10.0], 1.2, 0.1, None);
        assert!((v[0] - 0.5).abs() < 1e-15);
        assert_eq!(v[1], 1.0);
        assert_eq!(v[2], 0.0);
    }

    #[test]
    fn eval_binarization_is_strict() {
        let mut store = ParamStore::new();
        let spm = spm_with(&mut store, 1, 3, Variant::Adaptive);
        let mut ctx = ForwardCtx::new(Mode::Eval, ChaCha8Rng::seed_from_u64(1));
        let mut t = Tape::new();
        // s = 0 gives s1 = 0.5 exactly, which is not > 0.5
        let s = t.var(Tensor::new(vec![1, 3], vec![0.0, 10.0, -10.0]).unwrap());
        let r = binarize(&mut t, &spm, s, &mut ctx).unwrap();
        assert_eq!(r.bits, vec![false, true, false]);
        assert_eq!(t.value(r.b).data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn fixed_k_variant_rejects_binarize() {
        let mut store = ParamStore::new();
        let spm = spm_with(&mut store, 1, 4, Variant::FixedK(0.5));
        let mut ctx = ForwardCtx::new(Mode::Train, ChaCha8Rng::seed_from_u64(1));
        let mut t = Tape::new();
        let s = t.var(Tensor::zeros(vec![1, 4]));
        assert!(matches!(binarize(&mut t, &spm, s, &mut ctx), Err(Error::Usage(_))));
    }

    #[test]
    fn fixed_k_examples() {
        assert_eq!(fixed_k_select(&[0.9, 0.1, 0.5, 0.7], 0.5).unwrap(), vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(fixed_k_select(&[0.3, -2.0, 0.1], 1.0).unwrap(), vec![1.0; 3]);
        assert_eq!(fixed_k_select(&[0.5, 0.5], 0.5).unwrap(), vec![1.0, 0.0]);
        assert!(matches!(fixed_k_select(&[0.5, 0.5, 0.1], 0.1), Err(Error::Config(_))));
    }

    #[test]
    fn binarizer_config_validation() {
        let mut c = BinarizerConfig::default();
        assert!(c.validate().is_ok());
        c.a = 0.0;
        assert!(c.validate().is_err());
        c.a = 1.2;
        c.s1_mix_prob = 1.5;
        assert!(c.validate().is_err());
    }
}
