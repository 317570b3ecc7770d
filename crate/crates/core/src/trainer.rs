//! Three-phase training, evaluation and the variant comparison harness.
//!
//! Phases: dense pretraining, saliency-head warmup on frozen backbone
//! weights, and joint fine-tuning under the FLOPs-budget loss. Every phase
//! reads the previous phase's checkpoint from `out_dir` and writes its own.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::analysis::{DecisionRecord, LayerInfo, PruneDecisionLog};
use crate::autodiff::{ParamId, SgdMomentum, Tape, Tensor};
use crate::backbones::{checkpoint, checkpoint_hash, BuildVariant, Network, NetworkConfig};
use crate::config::{Phase, TrainConfig, VariantName};
use crate::cost::{
    batch_mean_flops, compute_lambda, layer_flops, multi_task_loss, sample_flops, BatchDecisions, BudgetConfig,
    CostEstimator, LayerCostSpec, MetricsRow, MetricsWriter,
};
use crate::data::{self, epoch_order, make_batch, Augment, Dataset, Normalization};
use crate::error::{Error, Result};
use crate::spm::{ForwardCtx, Mode};

/// Summary of one completed phase.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseOutcome {
    pub phase: Phase,
    pub steps: usize,
    /// Classification loss of the first batch.
    pub first_loss: f64,
    /// Mean classification loss over the last epoch.
    pub last_loss: f64,
    /// Train-mode accuracy over the last epoch.
    pub train_accuracy: f64,
    /// Final moving-average cost estimate.
    pub p_t: f64,
    /// Budget in FLOPs (`p0` outside fine-tuning).
    pub p: f64,
    pub p0: f64,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

fn rng_for(seed: u64, phase: Phase, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((phase as u64 + 1) * 16 + purpose);
    rng
}

fn shuffle_seed(seed: u64, phase: Phase) -> u64 {
    seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(phase as u64 + 1))
}

fn with_step(step: usize, lr: f64) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } => Error::Diverged {
            step,
            lr,
            loss: f64::NAN,
        },
        other => other,
    }
}

/// Fraction of channels kept per gateable conv, from one batch.
fn active_fractions(net: &Network, decisions: &BatchDecisions) -> Vec<f64> {
    net.conv_plan()
        .iter()
        .filter(|c| c.gateable)
        .map(|c| match &decisions.layers[c.id] {
            Some(bits) => bits.iter().filter(|&&b| b).count() as f64 / bits.len().max(1) as f64,
            None => 1.0,
        })
        .collect()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

enum Objective {
    CrossEntropy,
    Budgeted(BudgetConfig),
}

struct Loop<'a> {
    cfg: &'a TrainConfig,
    phase: Phase,
    specs: Vec<LayerCostSpec>,
    estimator: CostEstimator,
    objective: Objective,
}

struct LoopStats {
    steps: usize,
    first_loss: f64,
    last_loss: f64,
    train_accuracy: f64,
}

impl Loop<'_> {
    fn run(&mut self, net: &mut Network, train: &Dataset, opt: &mut SgdMomentum, metrics: &Path) -> Result<LoopStats> {
        let cfg = self.cfg;
        let sched = *cfg.phases.get(self.phase);
        let norm = cfg.normalization;
        let augment = cfg.augment();
        let mut aug_rng = rng_for(cfg.seed, self.phase, 1);
        let mut ctx = ForwardCtx::new(Mode::Train, rng_for(cfg.seed, self.phase, 2));
        let mut writer = MetricsWriter::new(BufWriter::new(File::create(metrics)?))?;
        let n_c = net.n_c();
        let (a, b) = (cfg.binarizer.a, cfg.binarizer.b);
        let mut stats = LoopStats {
            steps: 0,
            first_loss: f64::NAN,
            last_loss: f64::NAN,
            train_accuracy: 0.0,
        };

        for epoch in 0..sched.epochs {
            opt.lr = sched.lr_at(epoch);
            let order = epoch_order(train.len(), shuffle_seed(cfg.seed, self.phase), epoch);
            let (mut loss_sum, mut batches, mut correct, mut seen) = (0.0, 0usize, 0usize, 0usize);
            for chunk in order.chunks(cfg.batch_size).filter(|c| c.len() >= 2) {
                let step = stats.steps;
                let tag = with_step(step, opt.lr);
                let (x, labels) = make_batch(train, chunk, &norm, &augment, Mode::Train, &mut aug_rng)?;
                let mut tape = Tape::new();
                let out = net.forward(&mut tape, &x, &mut ctx).map_err(&tag)?;
                let l_cls = tape.softmax_cross_entropy(out.logits, &labels).map_err(&tag)?;
                let l_cls_value = tape.value(l_cls).item();

                let batch_cost = batch_mean_flops(&self.specs, &out.decisions)?;
                let p_t = self.estimator.push(batch_cost);
                let (loss, lambda, cost_term) = match &self.objective {
                    Objective::CrossEntropy => (l_cls, 0.0, 0.0),
                    Objective::Budgeted(budget) => {
                        let lambda = compute_lambda(budget, p_t)?;
                        let m = multi_task_loss(&mut tape, l_cls, &out.saliencies, lambda, n_c, cfg.cost_target, (a, b))
                            .map_err(&tag)?;
                        (m.loss, lambda, m.cost_term)
                    }
                };
                let loss_value = tape.value(loss).item();
                if !loss_value.is_finite() {
                    return Err(Error::Diverged {
                        step,
                        lr: opt.lr,
                        loss: loss_value,
                    });
                }

                let logits = tape.value(out.logits);
                let classes = logits.shape()[1];
                correct += logits
                    .data()
                    .chunks(classes)
                    .zip(&labels)
                    .filter(|(row, &y)| argmax(row) == y)
                    .count();
                seen += labels.len();
                let p0 = net.p0() as f64;
                writer.write(&MetricsRow {
                    step,
                    l_cls: l_cls_value,
                    cost_term,
                    lambda,
                    p_t,
                    p_t_ratio: p_t / p0,
                    active_fraction: active_fractions(net, &out.decisions),
                })?;

                tape.backward(loss, &mut net.store).map_err(&tag)?;
                opt.step(&mut net.store)?;
                if step == 0 {
                    stats.first_loss = l_cls_value;
                }
                loss_sum += l_cls_value;
                batches += 1;
                stats.steps += 1;
            }
            if batches > 0 {
                stats.last_loss = loss_sum / batches as f64;
                stats.train_accuracy = correct as f64 / seen as f64;
            }
        }
        writer.flush()?;
        Ok(stats)
    }
}

fn load_previous(cfg: &TrainConfig, phase: Phase, net: &mut Network) -> Result<()> {
    let prev = phase.previous().expect("phase has a predecessor");
    let path = cfg.checkpoint_path(prev);
    if !path.is_file() {
        return Err(Error::MissingPrerequisite {
            phase: phase.as_str(),
            what: match prev {
                Phase::Pretrain => "the pretrain checkpoint",
                _ => "the warmup checkpoint",
            },
            path,
        });
    }
    let report = checkpoint::load_checkpoint(&path, net, None, None)?;
    if let Some(name) = report.missing.iter().find(|n| !Network::is_spm_param(n)) {
        return Err(Error::Config(format!(
            "{} lacks backbone parameter `{name}`; was it produced with the same network?",
            path.display()
        )));
    }
    if phase == Phase::Finetune && !report.missing.is_empty() {
        return Err(Error::Config(format!(
            "{} lacks saliency parameters (e.g. `{}`); was warmup run with variant {}?",
            path.display(),
            report.missing[0],
            cfg.variant
        )));
    }
    Ok(())
}

/// Relative spread of `W2` rows kept by [`calibrate_saliency_heads`].
const HEAD_SPREAD: f64 = 0.1;

const NNLS_ITERS: usize = 2000;

/// Sets fresh saliency heads so that every gated layer starts close to an
/// identity gate: non-negative saliencies near `target` on every sample of
/// `x`, nearly equal across channels.
///
/// Heads have no bias, so the saliency is positively homogeneous in the
/// descriptor and a plain rescaling would leave samples with small
/// descriptors nearly switched off. Instead, per layer in execution order
/// (upstream layers already set):
///
/// - hidden units of `W1` become mirrored pairs `(u, -u)` along the leading
///   principal directions of the descriptors, so a pair contributes
///   `|u . d|` and little of the data falls where every pair is silent;
/// - a non-negative row `w` is fitted so that `w . relu(W1 d)` is as close
///   to `target` as possible over the samples;
/// - every row of `W2` is `w` with a small multiplicative jitter taken from
///   its random initialization, and the whole matrix is scaled so that the
///   mean saliency on `x` is exactly `target`.
pub fn calibrate_saliency_heads(net: &mut Network, x: &Tensor, target: f64) -> Result<()> {
    let heads: Vec<(ParamId, ParamId)> = net
        .gated_convs()
        .iter()
        .filter_map(|g| g.spm.as_ref().map(|s| (s.head.w1, s.head.w2)))
        .collect();
    for (layer, &(w1, w2)) in heads.iter().enumerate() {
        record_descriptors(net, x)?;
        let spm = net
            .gated_convs()
            .into_iter()
            .filter_map(|g| g.spm.as_ref())
            .nth(layer)
            .expect("head of a gated layer");
        let d = match spm.static_vector {
            Some(v) => net.store.get(v).tensor.clone().reshape(vec![1, spm.head.c_in])?,
            None => spm
                .last_d
                .clone()
                .ok_or_else(|| Error::Invariant("gated layer recorded no descriptor".into()))?,
        };
        let d = DMatrix::from_row_slice(d.shape()[0], d.shape()[1], d.data());
        aim_hidden_pairs(&mut net.store.get_mut(w1).tensor, &d);

        let t1 = &net.store.get(w1).tensor;
        let w1m = DMatrix::from_row_slice(t1.shape()[0], t1.shape()[1], t1.data());
        let h = (&d * w1m.transpose()).map(|v| v.max(0.0));
        let w = fit_constant_output(&h, target);

        let t2 = &mut net.store.get_mut(w2).tensor;
        let (rows, cols) = (t2.shape()[0], t2.shape()[1]);
        let data = t2.data_mut();
        for j in 0..cols {
            let m = (0..rows).map(|i| data[i * cols + j].abs()).sum::<f64>() / rows as f64;
            for i in 0..rows {
                let rel = if m > 0.0 { data[i * cols + j].abs() / m } else { 1.0 };
                data[i * cols + j] = w[j] * (1.0 + HEAD_SPREAD * (rel - 1.0));
            }
        }
        let w2m = DMatrix::from_row_slice(rows, cols, data);
        let s = &h * w2m.transpose();
        let mean = s.mean();
        if mean > 0.0 && mean.is_finite() {
            let k = target / mean;
            data.iter_mut().for_each(|v| *v *= k);
        }
    }
    Ok(())
}

/// Eval-mode forward pass that leaves each layer's input descriptor on its
/// SPM.
fn record_descriptors(net: &mut Network, x: &Tensor) -> Result<()> {
    let mut ctx = ForwardCtx::new(Mode::Eval, ChaCha8Rng::seed_from_u64(0));
    let mut tape = Tape::new();
    net.forward(&mut tape, x, &mut ctx)?;
    Ok(())
}

/// Non-negative least squares `min |H w - target|` by projected gradient,
/// starting from the uniform `w` with the right mean.
fn fit_constant_output(h: &DMatrix<f64>, target: f64) -> Vec<f64> {
    let cols = h.ncols();
    let gram = h.transpose() * h;
    let rhs = h.transpose() * DVector::from_element(h.nrows(), target);
    let lipschitz = gram.clone().symmetric_eigen().eigenvalues.max();
    let row_mean = h.row_sum().sum() / h.nrows().max(1) as f64;
    if lipschitz <= 0.0 || row_mean <= 0.0 || !lipschitz.is_finite() {
        return vec![1.0; cols];
    }
    let mut w = DVector::from_element(cols, target / row_mean);
    for _ in 0..NNLS_ITERS {
        let grad = &gram * &w - &rhs;
        w = (&w - grad / lipschitz).map(|v| v.max(0.0));
    }
    w.iter().copied().collect()
}

/// Rewrites `W1` (`[hidden, C_in]`) as mirrored pairs along the leading
/// eigenvectors of the descriptors' second moment, keeping each row's norm.
/// Pairs beyond `C_in` keep their random direction; an unpaired last row
/// takes the next eigenvector, signed to fire on the mean descriptor.
fn aim_hidden_pairs(w1: &mut Tensor, dm: &DMatrix<f64>) {
    let (hidden, cols) = (w1.shape()[0], w1.shape()[1]);
    let n = dm.nrows().max(1);
    let eig = (dm.transpose() * dm / n as f64).symmetric_eigen();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mean_d: Vec<f64> = (0..cols).map(|j| dm.column(j).sum() / n as f64).collect();

    let direction = |i: usize, norm: f64| eig.eigenvectors.column(order[i]).iter().map(|v| norm * v).collect::<Vec<_>>();
    let data = w1.data_mut();
    for pair in 0..hidden / 2 {
        let (a, b) = data[2 * pair * cols..(2 * pair + 2) * cols].split_at_mut(cols);
        if pair < cols {
            let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            a.copy_from_slice(&direction(pair, norm));
        }
        b.iter_mut().zip(a.iter()).for_each(|(y, &x)| *y = -x);
    }
    if hidden % 2 == 1 && hidden / 2 < cols {
        let last = &mut data[(hidden - 1) * cols..];
        let norm = last.iter().map(|v| v * v).sum::<f64>().sqrt();
        let u = direction(hidden / 2, norm);
        let sign = if u.iter().zip(&mean_d).map(|(a, b)| a * b).sum::<f64>() < 0.0 { -1.0 } else { 1.0 };
        last.iter_mut().zip(&u).for_each(|(w, &v)| *w = sign * v);
    }
}

/// Runs one phase, reading the previous phase's checkpoint from `out_dir`.
pub fn run_phase(cfg: &TrainConfig, phase: Phase, train: &Dataset) -> Result<PhaseOutcome> {
    cfg.validate()?;
    let net_cfg = cfg.network_config()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let variant = match phase {
        Phase::Pretrain => BuildVariant::Unpruned,
        _ => cfg.build_variant(),
    };
    let mut net = Network::build(&net_cfg, variant, cfg.binarizer, cfg.seed)?;
    if phase != Phase::Pretrain {
        load_previous(cfg, phase, &mut net)?;
    }
    let specs = net.cost_specs();
    let p0 = net.p0() as f64;
    let objective = if phase == Phase::Finetune && variant.is_gated() {
        let budget = BudgetConfig::from_fraction(
            cfg.budget_fraction,
            p0,
            cfg.lambda0,
            cfg.estimator_window,
            net.n_c(),
            net.gated_layers().len(),
        )?;
        Objective::Budgeted(budget)
    } else {
        Objective::CrossEntropy
    };
    let p = match &objective {
        Objective::Budgeted(b) => b.p,
        Objective::CrossEntropy => p0,
    };
    let mut schedule = *cfg.phases.get(phase);
    if phase == Phase::Warmup && variant.is_gated() && cfg.saliency_init > 0.0 {
        let n = cfg.batch_size.min(train.len());
        let idx = epoch_order(train.len(), shuffle_seed(cfg.seed, phase) ^ 1, 0);
        let (x, _) = make_batch(
            train,
            &idx[..n],
            &cfg.normalization,
            &Augment { crop_pad: 0, flip: false },
            Mode::Eval,
            &mut rng_for(cfg.seed, phase, 3),
        )?;
        calibrate_saliency_heads(&mut net, &x, cfg.saliency_init)?;
    }
    if phase == Phase::Warmup {
        // only the saliency heads train; a dense model has nothing to warm up
        net.store.set_frozen_where(|name| !Network::is_spm_param(name));
        if !variant.is_gated() {
            schedule.epochs = 0;
        }
    }
    let mut run_cfg = cfg.clone();
    *match phase {
        Phase::Pretrain => &mut run_cfg.phases.pretrain,
        Phase::Warmup => &mut run_cfg.phases.warmup,
        Phase::Finetune => &mut run_cfg.phases.finetune,
    } = schedule;

    let mut opt = SgdMomentum::new(schedule.lr, cfg.momentum);
    let mut lp = Loop {
        cfg: &run_cfg,
        phase,
        specs,
        estimator: CostEstimator::new(p0, cfg.estimator_window),
        objective,
    };
    let metrics = cfg.metrics_path(phase);
    let stats = lp.run(&mut net, train, &mut opt, &metrics)?;
    net.store.set_frozen_where(|_| false);
    let ckpt = cfg.checkpoint_path(phase);
    checkpoint::save_checkpoint(&ckpt, &net, Some(&opt), Some(&lp.estimator))?;
    Ok(PhaseOutcome {
        phase,
        steps: stats.steps,
        first_loss: stats.first_loss,
        last_loss: stats.last_loss,
        train_accuracy: stats.train_accuracy,
        p_t: lp.estimator.p_t(),
        p,
        p0,
        checkpoint: ckpt,
        metrics,
    })
}

/// Loads the configured dataset.
pub fn load_data(cfg: &TrainConfig) -> Result<(Dataset, Dataset)> {
    data::load(&cfg.dataset, cfg.data_dir.as_ref(), &cfg.synthetic, cfg.seed)
}

/// Runs the given phases in order (all three when `only` is `None`).
pub fn train(cfg: &TrainConfig, only: Option<Phase>, train: &Dataset) -> Result<Vec<PhaseOutcome>> {
    let phases: Vec<Phase> = match only {
        Some(p) => vec![p],
        None => Phase::ALL.to_vec(),
    };
    phases.into_iter().map(|p| run_phase(cfg, p, train)).collect()
}

/// Builds the configured variant and loads a checkpoint into it.
pub fn load_network(cfg: &TrainConfig, checkpoint_path: &Path) -> Result<Network> {
    let mut net = Network::build(&cfg.network_config()?, cfg.build_variant(), cfg.binarizer, cfg.seed)?;
    if !checkpoint_path.is_file() {
        return Err(Error::NotFound {
            dir: checkpoint_path.parent().map(Path::to_path_buf).unwrap_or_default(),
            expected: vec![checkpoint_path
                .file_name()
                .map(|f| f.to_string_lossy().into_owned())
                .unwrap_or_default()],
        });
    }
    let report = checkpoint::load_checkpoint(checkpoint_path, &mut net, None, None)?;
    if let Some(name) = report.missing.first() {
        return Err(Error::Config(format!(
            "{} has no value for `{name}` (variant {} expected)",
            checkpoint_path.display(),
            cfg.variant
        )));
    }
    Ok(net)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub samples: usize,
    pub accuracy: f64,
    pub mean_flops: f64,
    pub p0: u64,
    /// Mean kept fraction per gateable conv, in execution order.
    pub active_fraction: Vec<f64>,
    pub layer_names: Vec<String>,
}

impl EvalReport {
    pub fn pruned_rate(&self) -> f64 {
        1.0 - self.mean_flops / self.p0 as f64
    }
}

/// Eval-mode pass over a split. The network itself is left untouched.
pub fn evaluate(
    net: &Network,
    data: &Dataset,
    norm: &Normalization,
    batch_size: usize,
    with_log: bool,
) -> Result<(EvalReport, Option<PruneDecisionLog>)> {
    let mut net = net.clone();
    let specs = net.cost_specs();
    let gateable: Vec<_> = net.conv_plan().iter().filter(|c| c.gateable).cloned().collect();
    let mut log = with_log.then(|| {
        let layers = net
            .gated_layers()
            .iter()
            .map(|&(id, channels)| LayerInfo {
                layer_id: id,
                name: net.conv_plan()[id].name.clone(),
                channels,
            })
            .collect();
        PruneDecisionLog::new(data.split, checkpoint_hash(&net), layers)
    });
    let mut ctx = ForwardCtx::new(Mode::Eval, ChaCha8Rng::seed_from_u64(0));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let no_augment = Augment { crop_pad: 0, flip: false };
    let mut correct = 0usize;
    let mut flops = 0u128;
    let mut kept = vec![0usize; gateable.len()];
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, labels) = make_batch(data, chunk, norm, &no_augment, Mode::Eval, &mut rng)?;
        let mut tape = Tape::new();
        let out = net.forward(&mut tape, &x, &mut ctx)?;
        let logits = tape.value(out.logits);
        let classes = logits.shape()[1];
        correct += logits
            .data()
            .chunks(classes)
            .zip(&labels)
            .filter(|(row, &y)| argmax(row) == y)
            .count();
        for n in 0..chunk.len() {
            flops += sample_flops(&specs, &out.decisions, n)? as u128;
        }
        for (slot, c) in kept.iter_mut().zip(&gateable) {
            *slot += match &out.decisions.layers[c.id] {
                Some(bits) => bits.iter().filter(|&&b| b).count(),
                None => c.c_out * chunk.len(),
            };
        }
        if let Some(log) = log.as_mut() {
            for (n, &sample_id) in chunk.iter().enumerate() {
                for l in &log.layers {
                    let bits = out.decisions.row(l.layer_id, l.channels, n).expect("gated layer").to_vec();
                    log.records.push(DecisionRecord {
                        sample_id,
                        layer_id: l.layer_id,
                        bits,
                    });
                }
            }
        }
    }
    let samples = data.len();
    if let Some(log) = log.as_mut() {
        log.num_samples = samples;
    }
    let denom = samples.max(1);
    let report = EvalReport {
        samples,
        accuracy: correct as f64 / denom as f64,
        mean_flops: flops as f64 / denom as f64,
        p0: specs.iter().map(layer_flops).sum(),
        active_fraction: kept
            .iter()
            .zip(&gateable)
            .map(|(&k, c)| k as f64 / (c.c_out * denom) as f64)
            .collect(),
        layer_names: gateable.iter().map(|c| c.name.clone()).collect(),
    };
    Ok((report, log))
}

/// FLOPs fraction of a network that keeps `round(k * C)` channels everywhere.
pub fn fixed_k_flops_fraction(net_cfg: &NetworkConfig, k: f64) -> Result<f64> {
    let plan = net_cfg.plan()?;
    let specs: Vec<LayerCostSpec> = plan.iter().map(|c| c.cost_spec(true)).collect();
    let mut layers = vec![None; plan.len()];
    for c in plan.iter().filter(|c| c.gateable) {
        let mask = crate::spm::fixed_k_select(&vec![0.0; c.c_out], k)?;
        layers[c.id] = Some(mask.iter().map(|&v| v != 0.0).collect());
    }
    let decisions = BatchDecisions { batch: 1, layers };
    let p0: u64 = specs.iter().map(layer_flops).sum();
    Ok(sample_flops(&specs, &decisions, 0)? as f64 / p0 as f64)
}

/// The `k` in `(0, 1]` (on a 1/1000 grid) whose FLOPs fraction is closest to
/// `target`.
pub fn match_fixed_k(net_cfg: &NetworkConfig, target: f64) -> Result<f64> {
    let mut best: Option<(f64, f64)> = None;
    for i in 1..=1000 {
        let k = i as f64 / 1000.0;
        let Ok(frac) = fixed_k_flops_fraction(net_cfg, k) else {
            continue;
        };
        let gap = (frac - target).abs();
        if best.is_none_or(|(g, _)| gap < g) {
            best = Some((gap, k));
        }
    }
    best.map(|(_, k)| k)
        .ok_or_else(|| Error::Config("no fixed-k fraction keeps every layer alive".into()))
}

/// One row of the variant comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: VariantName,
    pub fixed_k: Option<f64>,
    pub error: f64,
    pub mean_flops: f64,
    pub pruned_rate: f64,
    pub active_fraction: Vec<f64>,
}

pub const ABLATION_HEADER: [&str; 6] = ["variant", "fixed_k", "error", "flops", "pruned_rate", "active_fraction_per_layer"];

pub fn write_ablation_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(crate::cost::csv_err)?;
    w.write_record(ABLATION_HEADER).map_err(crate::cost::csv_err)?;
    for r in rows {
        w.write_record([
            r.variant.to_string(),
            r.fixed_k.map(|k| k.to_string()).unwrap_or_default(),
            r.error.to_string(),
            r.mean_flops.to_string(),
            r.pruned_rate.to_string(),
            r.active_fraction.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";"),
        ])
        .map_err(crate::cost::csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Trains every listed variant with the same schedule and evaluates it.
///
/// Pretraining is shared: it runs once in `out_dir/pretrain` and its
/// checkpoint seeds each variant's directory `out_dir/<variant>`. When
/// `fixed-k` follows `adaptive` in `variants`, its `k` is matched to the
/// adaptive model's measured FLOPs.
pub fn ablation(
    base: &TrainConfig,
    variants: &[VariantName],
    train_set: &Dataset,
    test_set: &Dataset,
) -> Result<Vec<AblationRow>> {
    base.validate()?;
    let shared = TrainConfig {
        out_dir: base.out_dir.join("pretrain"),
        variant: VariantName::Unpruned,
        ..base.clone()
    };
    let pretrained = shared.checkpoint_path(Phase::Pretrain);
    if !pretrained.is_file() {
        run_phase(&shared, Phase::Pretrain, train_set)?;
    }
    let mut rows: Vec<AblationRow> = Vec::new();
    for &variant in variants {
        let mut cfg = TrainConfig {
            out_dir: base.out_dir.join(variant.as_str()),
            variant,
            ..base.clone()
        };
        if variant == VariantName::FixedK {
            if let Some(a) = rows.iter().find(|r| r.variant == VariantName::Adaptive) {
                cfg.fixed_k = match_fixed_k(&cfg.network_config()?, 1.0 - a.pruned_rate)?;
            }
        }
        std::fs::create_dir_all(&cfg.out_dir)?;
        std::fs::copy(&pretrained, cfg.checkpoint_path(Phase::Pretrain))?;
        run_phase(&cfg, Phase::Warmup, train_set)?;
        run_phase(&cfg, Phase::Finetune, train_set)?;
        let net = load_network(&cfg, &cfg.checkpoint_path(Phase::Finetune))?;
        let (report, _) = evaluate(&net, test_set, &cfg.normalization, cfg.eval_batch_size, false)?;
        rows.push(AblationRow {
            variant,
            fixed_k: (variant == VariantName::FixedK).then_some(cfg.fixed_k),
            error: 1.0 - report.accuracy,
            mean_flops: report.mean_flops,
            pruned_rate: report.pruned_rate(),
            active_fraction: report.active_fraction,
        });
    }
    write_ablation_csv(&rows, &base.out_dir.join("ablation.csv"))?;
    Ok(rows)
}
