use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use fgq::calib::capture_block_io;
use fgq::fisher::verify_hessian_fisher_identity;
use fgq::harness::{
    calibrate_stage, fisher_stage, load_calibrated, load_trained, render_text, report_stage,
    run_pipeline, train_stage, Method, RunConfig,
};
use fgq::pack::bench_block;
use fgq::qmodel::rtn_quantize_model;

/// Relative Hessian-Fisher gap accepted by `verify-identity`.
const IDENTITY_GAP: f64 = 0.05;

#[derive(Parser)]
#[command(
    name = "fgq",
    version,
    about = "Fisher-guided quantization of a toy multi-task transformer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run config; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for model init, data, training and calibration.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Overrides the config's quantization method.
    #[arg(long)]
    method: Option<Method>,
    /// Overrides the config's artifact directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl Common {
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        cfg = cfg.with_seed(self.seed);
        if let Some(m) = self.method {
            cfg.method = m;
        }
        if let Some(d) = &self.output_dir {
            cfg.output_dir = d.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the full-precision model.
    Train(Common),
    /// Estimate the diagonal Fisher of a trained model.
    Fisher(Common),
    /// Quantize a trained model with the configured method.
    Calibrate(Common),
    /// Evaluate the quantized model and write the reports.
    Evaluate(Common),
    /// Run every stage end to end.
    Pipeline(Common),
    /// Time one block on the packed INT4 path against fake quantization.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Block index
        #[arg(long, default_value_t = 0)]
        block: usize,
        /// Timed repetitions per path
        #[arg(long, default_value_t = 50)]
        reps: usize,
        /// Samples in the timed batch.
        #[arg(long, default_value_t = 4)]
        batch: usize,
    },
    /// Monte-Carlo check that the expected Hessian equals the Fisher at the
    /// true parameter of a Gaussian regression.
    VerifyIdentity {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
    },
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train(c) => {
            let cfg = c.run_config()?;
            let (_, tr) = train_stage(&cfg)?;
            println!(
                "trained: loss {:.6e} -> {:.6e}, grad norm {:.3e}",
                tr.initial_loss, tr.final_loss, tr.final_grad_norm
            );
        }
        Command::Fisher(c) => {
            let cfg = c.run_config()?;
            let (model, _) = load_trained(&cfg)?;
            let f = fisher_stage(&cfg, &model)?;
            println!(
                "fisher: {} tasks x {} blocks x {} channels over {} samples",
                f.tasks.len(),
                f.blocks,
                f.channels,
                f.n_samples
            );
        }
        Command::Calibrate(c) => {
            let cfg = c.run_config()?;
            let (model, _) = load_trained(&cfg)?;
            let fisher = if cfg.method == Method::Fgq {
                Some(fgq::fisher::FisherTensor::load_for(
                    &cfg.artifact(fgq::harness::artifacts::FISHER),
                    &cfg.model,
                )?)
            } else {
                None
            };
            let (_, rep) = calibrate_stage(&cfg, &model, fisher.as_ref())?;
            if let Some(rep) = rep {
                for b in &rep.blocks {
                    println!(
                        "{:<10} {:.6e} -> {:.6e}",
                        b.name, b.initial_loss, b.final_loss
                    );
                }
            }
            println!("calibrated: {}", cfg.method.name());
        }
        Command::Evaluate(c) => {
            let cfg = c.run_config()?;
            let (model, tr) = load_trained(&cfg)?;
            let (qm, rep) = load_calibrated(&cfg, &model)?;
            print!(
                "{}",
                render_text(&report_stage(&cfg, &model, &tr, qm.as_ref(), rep)?)
            );
        }
        Command::Pipeline(c) => {
            let cfg = c.run_config()?;
            print!("{}", render_text(&run_pipeline(&cfg)?));
        }
        Command::Bench {
            common,
            block,
            reps,
            batch,
        } => {
            let cfg = common.run_config()?;
            let (model, _) = load_trained(&cfg)?;
            let qm = match load_calibrated(&cfg, &model)? {
                (Some(qm), _) => qm,
                (None, _) => rtn_quantize_model(&model, cfg.calib.wspec(), cfg.calib.aspec())?,
            };
            let (_, _, test) = cfg.data.splits::<f64>(&cfg.model)?;
            let x = fgq::model::SyntheticDataset::generate(
                &cfg.model,
                &cfg.data.data,
                test.start,
                batch.max(1),
            )?;
            let io = capture_block_io(&model, &x, block, cfg.calib.memory_budget)?;
            let r = bench_block(&qm, block, &io.inputs, reps)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::VerifyIdentity { common, samples } => {
            let r = verify_hessian_fisher_identity(samples, common.seed)?;
            let score_ok = r.mean_score_norm <= 3.0 * r.score_std / (r.n_samples as f64).sqrt();
            let ok = r.gap <= IDENTITY_GAP && r.misspecified_gap > IDENTITY_GAP && score_ok;
            println!(
                "gap {:.4} (tolerance {}), misspecified gap {:.4}, mean score norm {:.3e} (std {:.3e}): {}",
                r.gap,
                IDENTITY_GAP,
                r.misspecified_gap,
                r.mean_score_norm,
                r.score_std,
                if ok { "ok" } else { "FAILED" }
            );
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            // Library errors already embed their causes in the message.
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{}: {}", msg, c);
                }
            }
            eprintln!("error: {}", msg);
            ExitCode::FAILURE
        }
    }
}
