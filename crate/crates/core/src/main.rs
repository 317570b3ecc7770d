use std::fs::File;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use prunenet::analysis::{analyze_decisions, ChannelCategory, PruneDecisionLog};
use prunenet::backbones::BuildVariant;
use prunenet::config::{Phase, TrainConfig, VariantName};
use prunenet::cost::layer_flops;
use prunenet::data::Split;
use prunenet::trainer;
use prunenet::{Error, Result};

#[derive(Parser)]
#[command(name = "prunenet", version, about = "Budget-driven dynamic channel pruning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    /// Budget as a fraction of the dense FLOPs.
    #[arg(long)]
    budget: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Adaptive,
    FixedK,
    Static,
    Unpruned,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    Pretrain,
    Warmup,
    Finetune,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Run the training phases (all three unless --phase is given).
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        phase: Option<PhaseArg>,
    },
    /// Evaluate a checkpoint and optionally write its decision log.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to the fine-tune checkpoint in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Write the per-sample decision log here.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Also export the decision log as CSV.
        #[arg(long)]
        log_csv: Option<PathBuf>,
    },
    /// Channel categories and per-sample active-count histograms of a decision log.
    Analyze {
        #[arg(long)]
        log: PathBuf,
        /// Directory for the CSV outputs.
        #[arg(long)]
        out_dir: PathBuf,
        /// Run configuration, for reporting saliency-head overhead.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print the dense FLOPs of every conv layer and their sum.
    Flops {
        #[command(flatten)]
        common: Common,
    },
    /// Validate a configuration file.
    ConfigCheck {
        #[command(flatten)]
        common: Common,
    },
    /// Train adaptive, fixed-k and static variants and report error/FLOPs/pruned rate.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(c: &Common) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(d) = &c.out_dir {
        cfg.out_dir = d.clone();
    }
    if let Some(v) = c.variant {
        cfg.variant = match v {
            VariantArg::Adaptive => VariantName::Adaptive,
            VariantArg::FixedK => VariantName::FixedK,
            VariantArg::Static => VariantName::Static,
            VariantArg::Unpruned => VariantName::Unpruned,
        };
    }
    if let Some(b) = c.budget {
        cfg.budget_fraction = b;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, phase } => {
            let cfg = load_config(&common)?;
            let phase = phase.map(|p| match p {
                PhaseArg::Pretrain => Phase::Pretrain,
                PhaseArg::Warmup => Phase::Warmup,
                PhaseArg::Finetune => Phase::Finetune,
            });
            let (train, _) = trainer::load_data(&cfg)?;
            let phases: Vec<Phase> = phase.map_or(Phase::ALL.to_vec(), |p| vec![p]);
            for p in phases {
                let o = trainer::run_phase(&cfg, p, &train)?;
                println!(
                    "{}: {} steps, loss {:.4} -> {:.4}, train acc {:.2}%, p_t/p0 {:.4} (budget {:.4}), checkpoint {}",
                    o.phase,
                    o.steps,
                    o.first_loss,
                    o.last_loss,
                    100.0 * o.train_accuracy,
                    o.p_t / o.p0,
                    o.p / o.p0,
                    o.checkpoint.display()
                );
                if p == Phase::Finetune && cfg.variant != VariantName::Unpruned {
                    println!("finetune: |p_t - p| / p0 = {:.4}", (o.p_t - o.p).abs() / o.p0);
                }
            }
        }
        Command::Eval {
            common,
            checkpoint,
            split,
            log,
            log_csv,
        } => {
            let cfg = load_config(&common)?;
            let ckpt = checkpoint.unwrap_or_else(|| cfg.checkpoint_path(Phase::Finetune));
            let net = trainer::load_network(&cfg, &ckpt)?;
            let (train, test) = trainer::load_data(&cfg)?;
            let data = match split {
                SplitArg::Train => &train,
                SplitArg::Test => &test,
            };
            let want_log = log.is_some() || log_csv.is_some();
            let (report, decisions) =
                trainer::evaluate(&net, data, &cfg.normalization, cfg.eval_batch_size, want_log)?;
            println!("samples: {}", report.samples);
            println!("top1_accuracy: {:.4}", report.accuracy);
            println!("mean_dynamic_flops: {:.1}", report.mean_flops);
            println!("p0: {}", report.p0);
            println!("pruned_rate: {:.4}", report.pruned_rate());
            for (name, f) in report.layer_names.iter().zip(&report.active_fraction) {
                println!("active_fraction {name}: {f:.4}");
            }
            if let Some(d) = decisions {
                if let Some(path) = log {
                    d.save(&path)?;
                }
                if let Some(path) = log_csv {
                    d.write_csv(File::create(path)?)?;
                }
            }
        }
        Command::Analyze { log, out_dir, config } => {
            let log = PruneDecisionLog::load(&log)?;
            let analysis = analyze_decisions(&log)?;
            std::fs::create_dir_all(&out_dir)?;
            analysis.write_summary_csv(File::create(out_dir.join("categories_summary.csv"))?)?;
            analysis.write_categories_csv(File::create(out_dir.join("channel_categories.csv"))?)?;
            analysis.write_histogram_csv(File::create(out_dir.join("active_histogram.csv"))?)?;
            let split = match log.split {
                Split::Train => "train",
                Split::Test => "test",
            };
            println!("samples: {} ({split} split, checkpoint {})", analysis.num_samples, log.checkpoint_hash);
            println!("layer\tchannels\tnever\tdependent\talways\tmean_active\tspread");
            for l in &analysis.layers {
                println!(
                    "{}\t{}\t{}\t{}\t{}\t{:.4}\t{}",
                    l.name,
                    l.categories.len(),
                    l.count(ChannelCategory::NeverPruned),
                    l.count(ChannelCategory::SampleDependent),
                    l.count(ChannelCategory::AlwaysPruned),
                    l.mean_active_fraction(),
                    l.active_spread()
                );
            }
            if let Some(path) = config {
                let cfg = TrainConfig::load(&path)?;
                let net = cfg.network_config()?;
                let heads = net.head_flops()?;
                let (_, p0) = net.cost_specs(BuildVariant::Adaptive)?;
                println!(
                    "saliency_head_flops: {heads} ({:.5}% of p0 = {p0}, not included in p0)",
                    100.0 * heads as f64 / p0 as f64
                );
            }
        }
        Command::Flops { common } => {
            let cfg = load_config(&common)?;
            let net = cfg.network_config()?;
            let plan = net.plan()?;
            println!("layer\th_out\tw_out\tc_in\tc_out\tk\tflops");
            let mut total = 0u64;
            for c in &plan {
                let f = layer_flops(&c.cost_spec(false));
                total += f;
                println!("{}\t{}\t{}\t{}\t{}\t{}\t{f}", c.name, c.h_out, c.w_out, c.c_in, c.c_out, c.kernel);
            }
            println!("p0\t{total}");
            println!("saliency_heads\t{}", net.head_flops()?);
        }
        Command::ConfigCheck { common } => {
            let cfg = load_config(&common)?;
            let net = cfg.network_config()?;
            let (_, p0) = net.cost_specs(cfg.build_variant())?;
            println!(
                "ok: {} on {:?}, variant {}, p0 = {p0}, budget = {:.0}",
                net.name,
                cfg.dataset,
                cfg.variant,
                cfg.budget_fraction * p0 as f64
            );
        }
        Command::Ablate { common } => {
            let cfg = load_config(&common)?;
            let (train, test) = trainer::load_data(&cfg)?;
            let variants = [VariantName::Adaptive, VariantName::FixedK, VariantName::Static];
            let rows = trainer::ablation(&cfg, &variants, &train, &test)?;
            println!("variant\terror\tflops\tpruned_rate");
            for r in rows {
                println!("{}\t{:.4}\t{:.1}\t{:.4}", r.variant, r.error, r.mean_flops, r.pruned_rate);
            }
            println!("report: {}", cfg.out_dir.join("ablation.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            ExitCode::from(match e {
                Error::Usage(_) | Error::Config(_) => 2,
                _ => 1,
            })
        }
    }
}
