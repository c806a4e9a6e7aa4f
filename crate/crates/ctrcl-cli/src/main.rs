//! Command-line front end: dataset generation, training, evaluation, the
//! finite-difference gradient suite, and the scalar-oracle equivalence
//! suite.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use ctrcl_core::data::{generate_synthetic, load_dataset, save_dataset};
use ctrcl_core::harness::gradsuite::{run_suite, GRAD_SEEDS, GRAD_TOLERANCE};
use ctrcl_core::harness::{
    load_checkpoint, resume, students_from_checkpoint, train, write_eval_csv, Mode, RunConfig,
};
use ctrcl_core::metrics::evaluate;
use ctrcl_core::rlcl::LambdaConfig;

mod oracle_suite;

#[derive(Parser)]
#[command(name = "ctrcl", about = "Collaborative training of CNN and attention segmentation students")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shape dataset in the CTRS format.
    GenData(GenDataArgs),
    /// Train both students collaboratively.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck,
    /// Compare vectorized paths against the scalar references.
    OracleTest,
}

#[derive(Args)]
struct GenDataArgs {
    /// Output path (.ctrs).
    #[arg(long)]
    out: PathBuf,
    /// Number of samples.
    #[arg(long, default_value_t = 200)]
    num: usize,
    /// Square image size (multiple of 8).
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Number of classes including background (2..=8).
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Generator seed.
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Config file of key=value lines; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// vanilla | rlcl | cfcl | ctrcl | dml
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    base_lr: Option<f64>,
    /// Logit transfer weight.
    #[arg(long)]
    beta: Option<f64>,
    /// Encoder feature transfer weight.
    #[arg(long)]
    gamma1: Option<f64>,
    /// Decoder feature transfer weight.
    #[arg(long)]
    gamma2: Option<f64>,
    /// Rectification weight configuration: one | a | as | ac | asc.
    #[arg(long)]
    lambda: Option<String>,
    /// Training dataset (.ctrs); generated on the fly when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Test dataset (.ctrs).
    #[arg(long)]
    test_data: Option<PathBuf>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Output directory for epochs.csv, report.json, checkpoint.bin.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dump per-batch rectification-weight maps and per-epoch prototypes.
    #[arg(long)]
    dump_diag: bool,
    /// Resume from a checkpoint instead of training from scratch.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Generated train/test sizes and classes when no data paths are given.
    #[arg(long)]
    gen_train: Option<usize>,
    #[arg(long)]
    gen_test: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    data_seed: Option<u64>,
    /// Student architecture overrides.
    #[arg(long)]
    cnn_width: Option<usize>,
    #[arg(long)]
    cnn_depth: Option<usize>,
    #[arg(long)]
    tr_width: Option<usize>,
    #[arg(long)]
    tr_depth: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset to evaluate on (.ctrs).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for report.json and report.csv.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
}

fn build_config(args: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            RunConfig::from_text(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(m) = &args.mode {
        cfg.mode = Mode::parse(m)?;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.base_lr {
        cfg.base_lr = v;
    }
    if let Some(v) = args.beta {
        cfg.weights.beta = v;
    }
    if let Some(v) = args.gamma1 {
        cfg.weights.gamma1 = v;
    }
    if let Some(v) = args.gamma2 {
        cfg.weights.gamma2 = v;
    }
    if let Some(v) = &args.lambda {
        cfg.lambda = LambdaConfig::parse(v)?;
    }
    if let Some(v) = &args.data {
        cfg.train_data = Some(v.clone());
    }
    if let Some(v) = &args.test_data {
        cfg.test_data = Some(v.clone());
    }
    if let Some(v) = args.eval_every {
        cfg.eval_every = v;
    }
    if let Some(v) = &args.out {
        cfg.out_dir = Some(v.clone());
    }
    if args.dump_diag {
        cfg.dump_diag = true;
    }
    if let Some(v) = args.gen_train {
        cfg.gen.num_train = v;
    }
    if let Some(v) = args.gen_test {
        cfg.gen.num_test = v;
    }
    if let Some(v) = args.size {
        cfg.gen.size = v;
    }
    if let Some(v) = args.classes {
        cfg.gen.classes = v;
    }
    if let Some(v) = args.data_seed {
        cfg.gen.data_seed = v;
    }
    if let Some(v) = args.cnn_width {
        cfg.cnn_width = v;
    }
    if let Some(v) = args.cnn_depth {
        cfg.cnn_depth = v;
    }
    if let Some(v) = args.tr_width {
        cfg.tr_width = v;
    }
    if let Some(v) = args.tr_depth {
        cfg.tr_depth = v;
    }
    if let Some(v) = args.heads {
        cfg.heads = v;
    }
    Ok(cfg)
}

fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    let d = generate_synthetic(args.num, args.size, args.size, args.classes, args.seed)?;
    save_dataset(&d, &args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;
    println!(
        "wrote {} samples ({}x{}, {} classes) to {}",
        d.len(),
        d.h,
        d.w,
        d.num_classes,
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let out = match &args.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)
                .with_context(|| format!("loading checkpoint {}", path.display()))?;
            println!(
                "resuming {} from epoch {} to {}",
                ckpt.config.mode.name(),
                ckpt.epoch_done,
                ckpt.config.epochs
            );
            let mut ckpt = ckpt;
            // Flags like --out still apply to the resumed run.
            if let Some(dir) = &args.out {
                ckpt.config.out_dir = Some(dir.clone());
            }
            resume(&ckpt)?
        }
        None => {
            let cfg = build_config(args)?;
            println!(
                "training mode={} seed={} epochs={} batch={} lr={}",
                cfg.mode.name(),
                cfg.seed,
                cfg.epochs,
                cfg.batch_size,
                cfg.base_lr
            );
            train(&cfg)?
        }
    };
    for log in &out.logs {
        let mut line = format!(
            "epoch {:3}  lr {:.3e}  cnn total {:.4}  transformer total {:.4}",
            log.epoch, log.lr, log.cnn.total, log.transformer.total
        );
        if let (Some(ec), Some(et)) = (&log.cnn.eval, &log.transformer.eval) {
            line.push_str(&format!(
                "  | test DSC cnn {:.4} transformer {:.4}",
                ec.mean_dsc, et.mean_dsc
            ));
        }
        println!("{line}");
    }
    if let Some(log) = out.logs.last() {
        if let (Some(ec), Some(et)) = (&log.cnn.eval, &log.transformer.eval) {
            println!(
                "final test: cnn DSC {:.4} JAC {:.4} HSD {:.2} MAE {:.4} | transformer DSC {:.4} JAC {:.4} HSD {:.2} MAE {:.4}",
                ec.mean_dsc, ec.mean_jac, ec.mean_hsd, ec.mae,
                et.mean_dsc, et.mean_jac, et.mean_hsd, et.mae
            );
        }
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let dataset = load_dataset(&args.data)
        .with_context(|| format!("loading dataset {}", args.data.display()))?;
    let (cnn, transformer) = students_from_checkpoint(&ckpt, dataset.num_classes)?;
    let rep_c = evaluate(&cnn, &dataset, args.batch_size)?;
    let rep_t = evaluate(&transformer, &dataset, args.batch_size)?;
    println!(
        "cnn:         DSC {:.4} JAC {:.4} HSD {:.2} MAE {:.4}",
        rep_c.mean_dsc, rep_c.mean_jac, rep_c.mean_hsd, rep_c.mae
    );
    println!(
        "transformer: DSC {:.4} JAC {:.4} HSD {:.2} MAE {:.4}",
        rep_t.mean_dsc, rep_t.mean_jac, rep_t.mean_hsd, rep_t.mae
    );
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir)?;
        let json = serde_json::json!({ "cnn": rep_c, "transformer": rep_t });
        std::fs::write(dir.join("report.json"), serde_json::to_vec_pretty(&json)?)?;
        write_eval_csv(&dir.join("report.csv"), &rep_c, &rep_t)?;
        println!("wrote report.json and report.csv to {}", dir.display());
    }
    Ok(())
}

fn cmd_gradcheck() -> Result<bool> {
    let results = run_suite(GRAD_SEEDS)?;
    let mut ok = true;
    for (name, err) in &results {
        let pass = *err < GRAD_TOLERANCE;
        ok &= pass;
        println!(
            "{:28} max rel err {:\u{2007}>12.3e}  {}",
            name,
            err,
            if pass { "pass" } else { "FAIL" }
        );
    }
    println!(
        "{} operations checked over {} seeds, tolerance {:.0e}",
        results.len(),
        GRAD_SEEDS,
        GRAD_TOLERANCE
    );
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::GenData(args) => cmd_gen_data(args).map(|()| true),
        Command::Train(args) => cmd_train(args).map(|()| true),
        Command::Eval(args) => cmd_eval(args).map(|()| true),
        Command::Gradcheck => cmd_gradcheck(),
        Command::OracleTest => oracle_suite::run().map_err(Into::into),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

