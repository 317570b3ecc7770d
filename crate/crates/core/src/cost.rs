//! FLOPs accounting, the running cost estimate and the budget-driven loss.
//!
//! A conv layer costs `H_out * W_out * (C_in * k^2 + 1) * C_out`, the `+1`
//! being the bias. With per-sample decisions only live input and output
//! channels count. The cost weight follows `lambda0 * (p_t - p) / p0`, where
//! `p_t` is a moving average of recent per-batch cost estimates.

use std::collections::VecDeque;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Static geometry of one convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCostSpec {
    pub layer_id: usize,
    pub h_out: usize,
    pub w_out: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    /// Whether an SPM decides this layer's output channels.
    pub gated: bool,
    /// Gated layer whose decisions zero out this layer's input channels.
    pub input_from: Option<usize>,
}

impl LayerCostSpec {
    pub fn dense(layer_id: usize, h_out: usize, w_out: usize, c_in: usize, c_out: usize, k: usize) -> Self {
        Self {
            layer_id,
            h_out,
            w_out,
            c_in,
            c_out,
            k,
            gated: false,
            input_from: None,
        }
    }
}

pub fn layer_flops(spec: &LayerCostSpec) -> u64 {
    (spec.h_out * spec.w_out) as u64 * (spec.c_in * spec.k * spec.k + 1) as u64 * spec.c_out as u64
}

/// FLOPs with only the live input/output channels counted.
pub fn dynamic_layer_flops(spec: &LayerCostSpec, b_in: &[bool], b_out: &[bool]) -> Result<u64> {
    if b_in.len() != spec.c_in || b_out.len() != spec.c_out {
        return Err(Error::dim(
            "dynamic_layer_flops",
            format!(
                "layer {} has {}->{} channels, decisions have {}->{}",
                spec.layer_id,
                spec.c_in,
                spec.c_out,
                b_in.len(),
                b_out.len()
            ),
        ));
    }
    let live_in = b_in.iter().filter(|&&b| b).count();
    let live_out = b_out.iter().filter(|&&b| b).count();
    Ok((spec.h_out * spec.w_out) as u64 * (live_in * spec.k * spec.k + 1) as u64 * live_out as u64)
}

/// Per-layer binary decisions for one batch, indexed by conv layer id.
/// Ungated layers hold `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchDecisions {
    pub batch: usize,
    pub layers: Vec<Option<Vec<bool>>>,
}

impl BatchDecisions {
    pub fn row(&self, layer: usize, channels: usize, sample: usize) -> Option<&[bool]> {
        self.layers
            .get(layer)?
            .as_ref()
            .map(|bits| &bits[sample * channels..(sample + 1) * channels])
    }
}

/// FLOPs spent on one sample of a batch.
pub fn sample_flops(specs: &[LayerCostSpec], decisions: &BatchDecisions, sample: usize) -> Result<u64> {
    let mut total = 0;
    for spec in specs {
        let ones_in;
        let b_in = match spec.input_from {
            Some(src) => {
                let c = specs[src].c_out;
                decisions.row(src, c, sample).ok_or_else(|| missing(src))?
            }
            None => {
                ones_in = vec![true; spec.c_in];
                &ones_in
            }
        };
        let ones_out;
        let b_out = if spec.gated {
            decisions
                .row(spec.layer_id, spec.c_out, sample)
                .ok_or_else(|| missing(spec.layer_id))?
        } else {
            ones_out = vec![true; spec.c_out];
            &ones_out
        };
        total += dynamic_layer_flops(spec, b_in, b_out)?;
    }
    Ok(total)
}

fn missing(layer: usize) -> Error {
    Error::Usage(format!("no decisions recorded for gated layer {layer}"))
}

/// Mean per-sample FLOPs of a batch.
pub fn batch_mean_flops(specs: &[LayerCostSpec], decisions: &BatchDecisions) -> Result<f64> {
    if decisions.batch == 0 {
        return Err(Error::Usage("cost estimate over an empty batch".into()));
    }
    let mut sum = 0u64;
    for n in 0..decisions.batch {
        sum += sample_flops(specs, decisions, n)?;
    }
    Ok(sum as f64 / decisions.batch as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetConfig {
    /// Target FLOPs per sample.
    pub p: f64,
    /// FLOPs of the dense network.
    pub p0: f64,
    pub lambda0: f64,
    pub estimator_window: usize,
    /// Total output channels over all gated layers.
    pub n_c: usize,
    /// Number of gated layers.
    pub layers: usize,
}

impl BudgetConfig {
    pub fn from_fraction(
        fraction: f64,
        p0: f64,
        lambda0: f64,
        estimator_window: usize,
        n_c: usize,
        layers: usize,
    ) -> Result<Self> {
        let cfg = Self {
            p: fraction * p0,
            p0,
            lambda0,
            estimator_window,
            n_c,
            layers,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p0.is_finite() && self.p0 > 0.0 && self.p > 0.0 && self.p <= self.p0) {
            return Err(Error::Config(format!(
                "budget out of range: need 0 < p <= p0, got p={} p0={}",
                self.p, self.p0
            )));
        }
        if self.lambda0.is_nan() || self.lambda0 <= 0.0 {
            return Err(Error::Config(format!("lambda0 must be positive, got {}", self.lambda0)));
        }
        if self.estimator_window == 0 {
            return Err(Error::Config("estimator window must be at least 1".into()));
        }
        if self.n_c == 0 {
            return Err(Error::Config("network has no gated channels".into()));
        }
        Ok(())
    }
}

/// Moving average of recent per-batch cost estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct CostEstimator {
    window: VecDeque<f64>,
    capacity: usize,
    p_t: f64,
}

impl CostEstimator {
    /// Starts at `p0`, the cost of the dense network.
    pub fn new(p0: f64, capacity: usize) -> Self {
        Self {
            window: VecDeque::with_capacity(capacity),
            capacity: capacity.max(1),
            p_t: p0,
        }
    }

    pub fn p_t(&self) -> f64 {
        self.p_t
    }

    pub fn window(&self) -> impl Iterator<Item = f64> + '_ {
        self.window.iter().copied()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Restores a saved window; `p_t` becomes its mean (or `p0` when empty).
    pub fn restore(&mut self, values: &[f64], p0: f64) {
        self.window = values.iter().rev().take(self.capacity).rev().copied().collect();
        self.p_t = if self.window.is_empty() {
            p0
        } else {
            self.window.iter().sum::<f64>() / self.window.len() as f64
        };
    }

    /// Pushes one batch-level estimate and returns the updated `p_t`.
    pub fn push(&mut self, batch_cost: f64) -> f64 {
        if self.window.len() == self.capacity {
            self.window.pop_front();
        }
        self.window.push_back(batch_cost);
        self.p_t = self.window.iter().sum::<f64>() / self.window.len() as f64;
        self.p_t
    }
}

/// Folds a batch's decisions into the estimator.
pub fn estimate_current_cost(
    estimator: &mut CostEstimator,
    specs: &[LayerCostSpec],
    decisions: &BatchDecisions,
) -> Result<f64> {
    let mean = batch_mean_flops(specs, decisions)?;
    Ok(estimator.push(mean))
}

/// `lambda0 * (p_t - p) / p0`, which lies in `[-lambda0, lambda0]`.
pub fn compute_lambda(cfg: &BudgetConfig, p_t: f64) -> Result<f64> {
    if !(0.0..=cfg.p0).contains(&p_t) {
        return Err(Error::Invariant(format!(
            "cost estimate {p_t} outside [0, {}]",
            cfg.p0
        )));
    }
    let lambda = cfg.lambda0 * (p_t - cfg.p) / cfg.p0;
    if lambda.abs() > cfg.lambda0 {
        return Err(Error::Invariant(format!(
            "lambda {lambda} outside [-{0}, {0}]",
            cfg.lambda0
        )));
    }
    Ok(lambda)
}

/// What the sparsity term penalizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostTarget {
    /// Raw saliency scores.
    #[default]
    Saliency,
    /// Noise-free saturating sigmoid of the saliency.
    Surrogate,
}

/// Multi-task loss and the value of its cost term.
pub struct MultiTaskLoss {
    pub loss: Var,
    pub cost_term: f64,
}

/// `L_cls + lambda / N_c * sum_l ||s^l||_1`.
///
/// Saliencies are `[N, C_l]`; the L1 mass is averaged over the `N` samples.
/// `lambda` is a constant here.
pub fn multi_task_loss(
    tape: &mut Tape,
    l_cls: Var,
    saliencies: &[Var],
    lambda: f64,
    n_c: usize,
    target: CostTarget,
    binarizer: (f64, f64),
) -> Result<MultiTaskLoss> {
    if n_c == 0 {
        return Err(Error::Config("N_c must be positive".into()));
    }
    let Some(&first) = saliencies.first() else {
        return Ok(MultiTaskLoss {
            loss: l_cls,
            cost_term: 0.0,
        });
    };
    let batch = tape.value(first).shape().first().copied().unwrap_or(1).max(1);
    let mut mass: Option<Var> = None;
    for &s in saliencies {
        let penalized = match target {
            CostTarget::Saliency => s,
            CostTarget::Surrogate => tape.saturating_sigmoid(s, binarizer.0, binarizer.1, None)?,
        };
        let l1 = tape.l1_norm(penalized)?;
        mass = Some(match mass {
            Some(m) => tape.add(m, l1)?,
            None => l1,
        });
    }
    let mass = mass.expect("non-empty");
    let term = tape.scale(mass, lambda / (n_c as f64 * batch as f64))?;
    let cost_term = tape.value(term).item();
    let loss = tape.add(l_cls, term)?;
    Ok(MultiTaskLoss { loss, cost_term })
}

/// One row of the per-batch training metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub l_cls: f64,
    pub cost_term: f64,
    pub lambda: f64,
    pub p_t: f64,
    pub p_t_ratio: f64,
    pub active_fraction: Vec<f64>,
}

pub const METRICS_HEADER: [&str; 7] = [
    "step",
    "l_cls",
    "cost_term",
    "lambda",
    "p_t",
    "p_t_over_p0",
    "active_fraction_per_layer",
];

/// CSV writer for [`MetricsRow`]s with a fixed header.
pub struct MetricsWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(w: W) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(w);
        inner.write_record(METRICS_HEADER).map_err(csv_err)?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        let active = row
            .active_fraction
            .iter()
            .map(|v| format!("{v}"))
            .collect::<Vec<_>>()
            .join(";");
        self.inner
            .write_record([
                row.step.to_string(),
                format!("{}", row.l_cls),
                format!("{}", row.cost_term),
                format!("{}", row.lambda),
                format!("{}", row.p_t),
                format!("{}", row.p_t_ratio),
                active,
            ])
            .map_err(csv_err)
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush().map_err(Error::Io)
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}
