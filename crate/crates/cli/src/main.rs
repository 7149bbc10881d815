//! Command-line entry point: dataset generation, training, evaluation,
//! prediction, and gradient checking.
//!
//! Every subcommand honors the global `--seed`; identical invocations produce
//! byte-identical outputs. `--machine` switches stdout to line-delimited
//! `key=value` records for harness consumption.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use netdelay_core::model::DelayModel;
use netdelay_core::sim::{gen_dataset, parse_gen_config};
use netdelay_core::trace::{load_dataset, load_scenario, Dataset, Split};
use netdelay_core::train::{
    epoch_log_line, evaluate, evaluate_baseline, gradcheck_suite, train_with_progress,
    Checkpoint, TrainConfig,
};
use netdelay_core::{ModelConfig, NetworkScenario, Tape};

/// Gradient check passes below this worst-case relative error.
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "netdelay",
    version,
    about = "GNN-based per-flow network delay model with a synthetic testbed"
)]
struct Cli {
    /// Override the seed of every seeded stage.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Scenario-level parallelism for generation, validation, and evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,

    /// Emit line-delimited key=value records instead of prose.
    #[arg(long, global = true)]
    machine: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic dataset from a generator config file.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset directory and keep the best-validation checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        t_max: Option<usize>,
        /// Message passing convergence threshold (relative difference).
        #[arg(long)]
        conv_threshold: Option<f64>,
        #[arg(long)]
        flow_embed: Option<usize>,
        #[arg(long)]
        linkport_embed: Option<usize>,
        #[arg(long)]
        device_embed: Option<usize>,
        #[arg(long)]
        pkt_hidden: Option<usize>,
        /// Global L2 gradient norm cap.
        #[arg(long)]
        grad_clip: Option<f64>,
        /// Multiplicative per-epoch learning rate decay.
        #[arg(long)]
        lr_decay: Option<f64>,
    },
    /// Evaluate a checkpoint on labeled data, next to the no-queuing baseline.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Dataset split to score: train, validation, or test.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Predict per-flow delays for one scenario file.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Verify analytic gradients against central finite differences.
    Gradcheck,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, Box<dyn std::error::Error>> {
    match cli.command {
        Command::Generate { config, out } => {
            let text = fs::read_to_string(&config)?;
            let mut gen_cfg = parse_gen_config(&text)?;
            if let Some(seed) = cli.seed {
                gen_cfg.seed = seed;
            }
            gen_dataset(&gen_cfg, &out, cli.jobs)?;
            let ds = load_dataset(&out)?;
            if cli.machine {
                println!(
                    "event=generate scenarios={} train={} validation={} test={} seed={} out={}",
                    gen_cfg.scenarios,
                    ds.train.len(),
                    ds.validation.len(),
                    ds.test.len(),
                    gen_cfg.seed,
                    out.display()
                );
            } else {
                println!(
                    "generated {} scenarios into {} (train {}, validation {}, test {})",
                    gen_cfg.scenarios,
                    out.display(),
                    ds.train.len(),
                    ds.validation.len(),
                    ds.test.len()
                );
            }
            Ok(ExitCode::SUCCESS)
        }

        Command::Train {
            data,
            out,
            epochs,
            lr,
            t_max,
            conv_threshold,
            flow_embed,
            linkport_embed,
            device_embed,
            pkt_hidden,
            grad_clip,
            lr_decay,
        } => {
            let ds = load_dataset(&data)?;
            let mut cfg = TrainConfig {
                jobs: cli.jobs,
                ..TrainConfig::default()
            };
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            if let Some(e) = epochs {
                cfg.max_epochs = e;
            }
            if let Some(lr) = lr {
                cfg.learning_rate = lr;
            }
            if let Some(t) = t_max {
                cfg.t_max = t;
            }
            if let Some(c) = conv_threshold {
                cfg.conv_rel = c;
            }
            cfg.grad_clip = grad_clip;
            cfg.lr_decay = lr_decay;
            let mut model = ModelConfig::default();
            if let Some(w) = flow_embed {
                model.flow_embed = w;
                model.pkt_hidden = w;
            }
            if let Some(w) = linkport_embed {
                model.linkport_embed = w;
            }
            if let Some(w) = device_embed {
                model.device_embed = w;
            }
            if let Some(w) = pkt_hidden {
                model.pkt_hidden = w;
            }
            cfg.model = model;

            let machine = cli.machine;
            let (checkpoint, _reports) =
                train_with_progress(&ds.train, &ds.validation, &cfg, &out, |r| {
                    if machine {
                        println!("{}", epoch_log_line(r));
                    } else {
                        println!(
                            "epoch {:>4}: train_loss={:.6} train_mape={:.2}% val_mape={:.2}% ({:.1}s)",
                            r.epoch, r.train_loss, r.train_mape, r.val_mape, r.wall_time_s
                        );
                    }
                })?;
            if machine {
                println!(
                    "event=train best_epoch={} best_val_mape={} checkpoint={}",
                    checkpoint.best_epoch,
                    checkpoint.best_val_mape,
                    out.join("best.ckpt").display()
                );
            } else {
                println!(
                    "best epoch {} with validation MAPE {:.2}%; checkpoint written to {}",
                    checkpoint.best_epoch,
                    checkpoint.best_val_mape,
                    out.join("best.ckpt").display()
                );
            }
            Ok(ExitCode::SUCCESS)
        }

        Command::Evaluate { model, data, split } => {
            let checkpoint = Checkpoint::load(&model)?;
            let ds = load_dataset(&data)?;
            let scenarios = select_split(&ds, &split)?;
            if scenarios.is_empty() {
                return Err(format!("split '{split}' is empty").into());
            }
            let report = evaluate(&checkpoint, scenarios, cli.jobs)?;
            let baseline = evaluate_baseline(scenarios)?;
            if cli.machine {
                for (name, m) in &report.per_scenario {
                    println!("scenario={name} mape={m}");
                }
                println!(
                    "event=evaluate split={split} flows={} mape={} baseline_mape={}",
                    report.flows, report.aggregate_mape, baseline
                );
            } else {
                println!(
                    "model MAPE {:.2}% | no-queuing baseline MAPE {:.2}% ({} flows, {} scenarios, split {})",
                    report.aggregate_mape,
                    baseline,
                    report.flows,
                    report.per_scenario.len(),
                    split
                );
            }
            Ok(ExitCode::SUCCESS)
        }

        Command::Predict { model, scenario } => {
            let checkpoint = Checkpoint::load(&model)?;
            let s: NetworkScenario = load_scenario(&scenario)?;
            let mut tape = Tape::new();
            let dm = DelayModel {
                config: &checkpoint.model,
                params: &checkpoint.params,
                stats: &checkpoint.stats,
            };
            let out = dm.forward(&s, &mut tape, &checkpoint.message_passing())?;
            for (flow, &delay) in s.flows().iter().zip(&out.predictions) {
                if cli.machine {
                    println!("flow={} delay_s={}", flow.id, delay);
                } else {
                    println!("flow {:<8} {:.9} s", flow.id.to_string(), delay);
                }
            }
            if !cli.machine {
                println!("({} message passing iterations)", out.iterations);
            }
            Ok(ExitCode::SUCCESS)
        }

        Command::Gradcheck => {
            let seed = cli.seed.unwrap_or(1);
            let report = gradcheck_suite(seed)?;
            let worst = report.worst();
            if cli.machine {
                println!(
                    "event=gradcheck gru_cell={} stacked_encoder={} full_model={} worst={} pass={}",
                    report.gru_cell,
                    report.stacked_encoder,
                    report.full_model,
                    worst,
                    worst < GRADCHECK_TOLERANCE
                );
            } else {
                println!("gru cell        max relative error {:.3e}", report.gru_cell);
                println!(
                    "stacked encoder max relative error {:.3e}",
                    report.stacked_encoder
                );
                println!("full model      max relative error {:.3e}", report.full_model);
                println!(
                    "worst {:.3e} ({} tolerance {:.0e})",
                    worst,
                    if worst < GRADCHECK_TOLERANCE {
                        "PASS"
                    } else {
                        "FAIL"
                    },
                    GRADCHECK_TOLERANCE
                );
            }
            Ok(if worst < GRADCHECK_TOLERANCE {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
    }
}

fn select_split<'a>(
    ds: &'a Dataset,
    split: &str,
) -> Result<&'a [(String, NetworkScenario)], Box<dyn std::error::Error>> {
    match split {
        "train" => Ok(ds.split(Split::Train)),
        "validation" => Ok(ds.split(Split::Validation)),
        "test" => Ok(ds.split(Split::Test)),
        other => Err(format!("unknown split '{other}' (train|validation|test)").into()),
    }
}
