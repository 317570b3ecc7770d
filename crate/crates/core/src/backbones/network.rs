use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BnStats, ParamId, ParamStore, Tape, Tensor, Var};
use crate::cost::{layer_flops, BatchDecisions, LayerCostSpec};
use crate::error::{Error, Result};
use crate::spm::{gated_conv_layer, BinarizerConfig, ConvBn, ForwardCtx, Spm, Variant};

/// One entry of a network description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    /// Conv + BN + ReLU, gated by an SPM in pruned builds.
    Conv {
        channels: usize,
        #[serde(default = "default_kernel")]
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        /// Defaults to `kernel / 2`.
        #[serde(default)]
        padding: Option<usize>,
    },
    /// Residual basic block: two 3x3 conv-BN layers plus a shortcut.
    Block {
        channels: usize,
        #[serde(default = "one")]
        stride: usize,
    },
    MaxPool {
        size: usize,
    },
    GlobalAvgPool,
    Flatten,
    /// Fully connected layer with bias; ReLU follows unless it is the last layer.
    Linear {
        out: usize,
    },
}

fn default_kernel() -> usize {
    3
}

fn one() -> usize {
    1
}

impl LayerSpec {
    fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Block { .. } => "block",
            LayerSpec::MaxPool { .. } => "max_pool",
            LayerSpec::GlobalAvgPool => "global_avg_pool",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Linear { .. } => "linear",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub name: String,
    /// `[C, H, W]`.
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerSpec>,
    pub num_classes: usize,
    #[serde(default = "default_reduction")]
    pub reduction_rate: usize,
}

fn default_reduction() -> usize {
    4
}

/// How a network is gated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BuildVariant {
    Unpruned,
    Adaptive,
    FixedK(f64),
    Static,
}

impl BuildVariant {
    pub fn spm_variant(self) -> Option<Variant> {
        match self {
            BuildVariant::Unpruned => None,
            BuildVariant::Adaptive => Some(Variant::Adaptive),
            BuildVariant::FixedK(k) => Some(Variant::FixedK(k)),
            BuildVariant::Static => Some(Variant::Static),
        }
    }

    pub fn is_gated(self) -> bool {
        !matches!(self, BuildVariant::Unpruned)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Spatial(usize, usize, usize),
    Flat(usize),
}

/// One convolution discovered while composing a config.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvPlan {
    pub id: usize,
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
    /// Shortcut projections are never gated.
    pub gateable: bool,
    /// Conv whose output directly feeds this one, if it is gateable.
    pub input_from: Option<usize>,
}

impl ConvPlan {
    pub fn cost_spec(&self, gated: bool) -> LayerCostSpec {
        LayerCostSpec {
            layer_id: self.id,
            h_out: self.h_out,
            w_out: self.w_out,
            c_in: self.c_in,
            c_out: self.c_out,
            k: self.kernel,
            gated: gated && self.gateable,
            input_from: if gated { self.input_from } else { None },
        }
    }
}

fn conv_out(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || k == 0 || k > len + 2 * pad {
        None
    } else {
        Some((len + 2 * pad - k) / stride + 1)
    }
}

impl NetworkConfig {
    /// Checks that layer shapes compose and returns every convolution in
    /// execution order.
    pub fn plan(&self) -> Result<Vec<ConvPlan>> {
        Ok(self.compose()?.0)
    }

    // convolutions plus the input width of every linear layer
    fn compose(&self) -> Result<(Vec<ConvPlan>, Vec<usize>)> {
        let err = |i: usize, l: &LayerSpec, msg: String| {
            Error::Config(format!("layer {i} ({}): {msg}", l.kind()))
        };
        if self.reduction_rate == 0 {
            return Err(Error::Config("reduction_rate must be positive".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        let [c, h, w] = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!("input shape {:?} has a zero extent", self.input_shape)));
        }
        let mut shape = Shape::Spatial(c, h, w);
        let mut convs: Vec<ConvPlan> = Vec::new();
        let mut linear_in = Vec::new();
        // gateable conv whose (possibly pooled) output is the current activation
        let mut feeding: Option<usize> = None;

        let push_conv = |convs: &mut Vec<ConvPlan>,
                             name: String,
                             c_in: usize,
                             c_out: usize,
                             k: usize,
                             stride: usize,
                             pad: usize,
                             h: usize,
                             w: usize,
                             gateable: bool,
                             input_from: Option<usize>|
         -> Option<usize> {
            let h_out = conv_out(h, k, stride, pad)?;
            let w_out = conv_out(w, k, stride, pad)?;
            let id = convs.len();
            convs.push(ConvPlan {
                id,
                name,
                c_in,
                c_out,
                kernel: k,
                stride,
                padding: pad,
                h_out,
                w_out,
                gateable,
                input_from,
            });
            Some(id)
        };

        for (i, layer) in self.layers.iter().enumerate() {
            match (layer, shape) {
                (&LayerSpec::Conv { channels, kernel, stride, padding }, Shape::Spatial(c, h, w)) => {
                    if channels == 0 {
                        return Err(err(i, layer, "zero output channels".into()));
                    }
                    let pad = padding.unwrap_or(kernel / 2);
                    let id = push_conv(&mut convs, format!("layer{i}"), c, channels, kernel, stride, pad, h, w, true, feeding)
                        .ok_or_else(|| err(i, layer, format!("kernel {kernel} stride {stride} does not fit {h}x{w}")))?;
                    shape = Shape::Spatial(channels, convs[id].h_out, convs[id].w_out);
                    feeding = Some(id);
                }
                (&LayerSpec::Block { channels, stride }, Shape::Spatial(c, h, w)) => {
                    if channels == 0 {
                        return Err(err(i, layer, "zero output channels".into()));
                    }
                    let fit = || err(i, layer, format!("stride {stride} does not fit {h}x{w}"));
                    let a = push_conv(&mut convs, format!("layer{i}.conv1"), c, channels, 3, stride, 1, h, w, true, feeding)
                        .ok_or_else(fit)?;
                    let (h1, w1) = (convs[a].h_out, convs[a].w_out);
                    let b = push_conv(&mut convs, format!("layer{i}.conv2"), channels, channels, 3, 1, 1, h1, w1, true, Some(a))
                        .ok_or_else(fit)?;
                    if stride != 1 || c != channels {
                        push_conv(&mut convs, format!("layer{i}.shortcut"), c, channels, 1, stride, 0, h, w, false, feeding)
                            .ok_or_else(fit)?;
                    }
                    shape = Shape::Spatial(channels, convs[b].h_out, convs[b].w_out);
                    feeding = None;
                }
                (&LayerSpec::MaxPool { size }, Shape::Spatial(c, h, w)) => {
                    if size == 0 || size > h || size > w {
                        return Err(err(i, layer, format!("window {size} on {h}x{w}")));
                    }
                    shape = Shape::Spatial(c, h / size, w / size);
                }
                (LayerSpec::GlobalAvgPool, Shape::Spatial(c, _, _)) => {
                    shape = Shape::Flat(c);
                    feeding = None;
                }
                (LayerSpec::Flatten, Shape::Spatial(c, h, w)) => {
                    shape = Shape::Flat(c * h * w);
                    feeding = None;
                }
                (&LayerSpec::Linear { out }, Shape::Flat(n)) => {
                    if out == 0 {
                        return Err(err(i, layer, "zero outputs".into()));
                    }
                    linear_in.push(n);
                    shape = Shape::Flat(out);
                }
                (_, s) => return Err(err(i, layer, format!("cannot follow a {s:?} activation"))),
            }
        }
        match (self.layers.last(), shape) {
            (Some(LayerSpec::Linear { .. }), Shape::Flat(n)) if n == self.num_classes => Ok((convs, linear_in)),
            _ => Err(Error::Config(format!(
                "network must end in a linear layer with {} outputs",
                self.num_classes
            ))),
        }
    }

    /// Per-conv cost specs and the dense FLOPs `p0`.
    pub fn cost_specs(&self, variant: BuildVariant) -> Result<(Vec<LayerCostSpec>, u64)> {
        let specs: Vec<LayerCostSpec> = self.plan()?.iter().map(|c| c.cost_spec(variant.is_gated())).collect();
        let p0 = specs.iter().map(layer_flops).sum();
        Ok((specs, p0))
    }

    /// Total multiply-adds of all saliency heads for one sample.
    pub fn head_flops(&self) -> Result<u64> {
        Ok(self
            .plan()?
            .iter()
            .filter(|c| c.gateable)
            .map(|c| {
                let hidden = crate::spm::SaliencyHead::hidden_width(c.c_out, self.reduction_rate);
                (hidden * c.c_in + c.c_out * hidden) as u64
            })
            .sum())
    }
}

#[derive(Debug, Clone)]
pub struct GatedConv {
    pub conv: ConvBn,
    pub spm: Option<Spm>,
    pub id: usize,
}

#[derive(Debug, Clone)]
pub struct ResBlock {
    pub conv1: GatedConv,
    pub conv2: GatedConv,
    pub shortcut: Option<(ConvBn, usize)>,
}

// a network holds a handful of layers; boxing would only add indirection
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone)]
pub enum Layer {
    Conv(GatedConv),
    Block(ResBlock),
    MaxPool(usize),
    GlobalAvgPool,
    Flatten,
    Linear {
        weight: ParamId,
        bias: ParamId,
        relu: bool,
    },
}

/// Result of a forward pass.
pub struct ForwardOutput {
    pub logits: Var,
    /// Saliency `[N, C_l]` of every gated layer, in execution order.
    pub saliencies: Vec<Var>,
    pub decisions: BatchDecisions,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub config: NetworkConfig,
    pub variant: BuildVariant,
    pub store: ParamStore,
    pub layers: Vec<Layer>,
    plan: Vec<ConvPlan>,
}

impl Network {
    pub fn build(config: &NetworkConfig, variant: BuildVariant, binarizer: BinarizerConfig, seed: u64) -> Result<Self> {
        let (plan, linear_in) = config.compose()?;
        let mut linear_in = linear_in.into_iter();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut next = 0usize;

        let gated = |store: &mut ParamStore, rng: &mut ChaCha8Rng, p: &ConvPlan| -> Result<GatedConv> {
            let conv = ConvBn::new(store, &p.name, p.c_in, p.c_out, p.kernel, p.stride, p.padding, rng)?;
            let spm = match variant.spm_variant() {
                Some(v) => Some(Spm::new(
                    store,
                    &format!("{}.spm", p.name),
                    p.c_in,
                    p.c_out,
                    config.reduction_rate,
                    v,
                    binarizer,
                    rng,
                )?),
                None => None,
            };
            Ok(GatedConv { conv, spm, id: p.id })
        };

        let mut layers = Vec::with_capacity(config.layers.len());
        let n_layers = config.layers.len();
        for (i, spec) in config.layers.iter().enumerate() {
            let layer = match spec {
                LayerSpec::Conv { .. } => {
                    let l = Layer::Conv(gated(&mut store, &mut rng, &plan[next])?);
                    next += 1;
                    l
                }
                LayerSpec::Block { .. } => {
                    let conv1 = gated(&mut store, &mut rng, &plan[next])?;
                    let conv2 = gated(&mut store, &mut rng, &plan[next + 1])?;
                    next += 2;
                    let shortcut = match plan.get(next) {
                        Some(p) if !p.gateable => {
                            let c = ConvBn::new(&mut store, &p.name, p.c_in, p.c_out, 1, p.stride, 0, &mut rng)?;
                            next += 1;
                            Some((c, p.id))
                        }
                        _ => None,
                    };
                    Layer::Block(ResBlock { conv1, conv2, shortcut })
                }
                &LayerSpec::MaxPool { size } => Layer::MaxPool(size),
                LayerSpec::GlobalAvgPool => Layer::GlobalAvgPool,
                LayerSpec::Flatten => Layer::Flatten,
                &LayerSpec::Linear { out } => {
                    let fan_in = linear_in.next().expect("composed");
                    let w = Tensor::randn(vec![out, fan_in], (1.0 / fan_in as f64).sqrt(), &mut rng);
                    let l = Layer::Linear {
                        weight: store.add(format!("layer{i}.weight"), w)?,
                        bias: store.add(format!("layer{i}.bias"), Tensor::zeros(vec![out]))?,
                        relu: i + 1 < n_layers,
                    };
                    l
                }
            };
            layers.push(layer);
        }
        Ok(Self {
            config: config.clone(),
            variant,
            store,
            layers,
            plan,
        })
    }

    pub fn conv_plan(&self) -> &[ConvPlan] {
        &self.plan
    }

    pub fn cost_specs(&self) -> Vec<LayerCostSpec> {
        self.plan.iter().map(|c| c.cost_spec(self.variant.is_gated())).collect()
    }

    pub fn p0(&self) -> u64 {
        self.cost_specs().iter().map(layer_flops).sum()
    }

    /// Gated convs in execution order.
    pub fn gated_convs(&self) -> Vec<&GatedConv> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                Layer::Conv(g) => out.push(g),
                Layer::Block(b) => {
                    out.push(&b.conv1);
                    out.push(&b.conv2);
                }
                _ => {}
            }
        }
        out.retain(|g| g.spm.is_some());
        out
    }

    /// `(conv id, C_out)` of every gated layer.
    pub fn gated_layers(&self) -> Vec<(usize, usize)> {
        self.gated_convs().iter().map(|g| (g.id, g.conv.c_out)).collect()
    }

    /// Total output channels across gated layers.
    pub fn n_c(&self) -> usize {
        self.gated_layers().iter().map(|&(_, c)| c).sum()
    }

    /// Every batch-norm layer with its running statistics, by conv name.
    pub fn bn_stats(&self) -> Vec<(&str, &BnStats)> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                Layer::Conv(g) => out.push((g.conv.name.as_str(), &g.conv.stats)),
                Layer::Block(b) => {
                    out.push((b.conv1.conv.name.as_str(), &b.conv1.conv.stats));
                    out.push((b.conv2.conv.name.as_str(), &b.conv2.conv.stats));
                    if let Some((c, _)) = &b.shortcut {
                        out.push((c.name.as_str(), &c.stats));
                    }
                }
                _ => {}
            }
        }
        out
    }

    pub fn bn_stats_mut(&mut self) -> Vec<(String, &mut BnStats)> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            match l {
                Layer::Conv(g) => out.push((g.conv.name.clone(), &mut g.conv.stats)),
                Layer::Block(b) => {
                    out.push((b.conv1.conv.name.clone(), &mut b.conv1.conv.stats));
                    out.push((b.conv2.conv.name.clone(), &mut b.conv2.conv.stats));
                    if let Some((c, _)) = &mut b.shortcut {
                        out.push((c.name.clone(), &mut c.stats));
                    }
                }
                _ => {}
            }
        }
        out
    }

    /// True for parameters that belong to a saliency head.
    pub fn is_spm_param(name: &str) -> bool {
        name.contains(".spm.")
    }

    pub fn forward(&mut self, tape: &mut Tape, input: &Tensor, ctx: &mut ForwardCtx) -> Result<ForwardOutput> {
        let batch = input.shape().first().copied().unwrap_or(0);
        if input.ndim() != 4 || input.shape()[1..] != self.config.input_shape {
            return Err(Error::dim(
                "network",
                format!("expected [N, {:?}], got {:?}", self.config.input_shape, input.shape()),
            ));
        }
        let store = &self.store;
        let mut x = tape.constant(input.clone());
        let mut saliencies = Vec::new();
        let mut decisions = BatchDecisions {
            batch,
            layers: vec![None; self.plan.len()],
        };

        let mut run_gated = |tape: &mut Tape, g: &mut GatedConv, x: Var, ctx: &mut ForwardCtx, relu: bool| -> Result<Var> {
            let y = match &mut g.spm {
                Some(spm) => {
                    let out = gated_conv_layer(tape, store, x, &mut g.conv, spm, ctx)?;
                    saliencies.push(out.saliency);
                    decisions.layers[g.id] = Some(out.bits);
                    out.out
                }
                None => g.conv.forward(tape, store, x, ctx, None)?,
            };
            if relu {
                tape.relu(y)
            } else {
                Ok(y)
            }
        };

        for layer in &mut self.layers {
            x = match layer {
                Layer::Conv(g) => run_gated(tape, g, x, ctx, true)?,
                Layer::Block(b) => {
                    let h = run_gated(tape, &mut b.conv1, x, ctx, true)?;
                    let h = run_gated(tape, &mut b.conv2, h, ctx, false)?;
                    let short = match &mut b.shortcut {
                        Some((conv, _)) => conv.forward(tape, store, x, ctx, None)?,
                        None => x,
                    };
                    let sum = tape.add(h, short)?;
                    tape.relu(sum)?
                }
                Layer::MaxPool(size) => tape.max_pool2d(x, *size)?,
                Layer::GlobalAvgPool => tape.global_avg_pool(x)?,
                Layer::Flatten => {
                    let s = tape.value(x).shape().to_vec();
                    tape.reshape(x, vec![s[0], s[1..].iter().product()])?
                }
                Layer::Linear { weight, bias, relu } => {
                    let w = tape.param(store, *weight);
                    let b = tape.param(store, *bias);
                    let y = tape.linear(x, w)?;
                    let rows = tape.repeat_rows(b, batch)?;
                    let y = tape.add(y, rows)?;
                    if *relu {
                        tape.relu(y)?
                    } else {
                        y
                    }
                }
            };
        }
        Ok(ForwardOutput {
            logits: x,
            saliencies,
            decisions,
        })
    }
}
