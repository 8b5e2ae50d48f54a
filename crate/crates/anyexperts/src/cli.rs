//! Command-line surface: train, sweep, trace, and check-grad.
//!
//! Exit codes: 0 success, 1 runtime/numeric failure, 2 usage or
//! configuration error. All outputs are deterministic given (config, seed).

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::harness::data::generate;
use crate::harness::model::{LayerMode, Model};
use crate::harness::sweep::budget_sweep;
use crate::harness::trace::export_importance_trace;
use crate::harness::train::{evaluate, train, TrainState};
use crate::importance::tir_loss;
use crate::moe::{balance_loss, total_loss, AnyExpertsLayer};
use crate::numerics::{check_gradients, Matrix, ParamSet, Rng, Tape};
use crate::routing::RouterConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "anyexperts", version, about = "Dynamic expert allocation for MoE layers")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a dynamically routed model and write checkpoint + curves.
    Train {
        /// Flat key-value config file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint across inference budgets plus Top-K baselines.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated budget scales.
        #[arg(long, default_value = "0.6,0.7,0.8,0.9,1.0")]
        scales: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export per-token importance traces from a checkpoint.
    Trace {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Data seed for the traced stream (defaults to the config seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Output JSON-lines path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-difference gradient suites and report.
    CheckGrad,
}

/// Entry point; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            // clap handles --help/--version as "errors" with success status
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Train { config, out, seed } => cmd_train(config.as_deref(), &out, seed),
        Command::Sweep {
            checkpoint,
            scales,
            out,
        } => cmd_sweep(&checkpoint, &scales, &out),
        Command::Trace {
            checkpoint,
            seed,
            out,
        } => cmd_trace(&checkpoint, seed, &out),
        Command::CheckGrad => cmd_check_grad(),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => EXIT_USAGE,
                _ => EXIT_RUNTIME,
            }
        }
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| {
                Error::Config(format!("cannot read config '{}': {e}", p.display()))
            })?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn curve_csv(curve: &[crate::harness::train::StepRecord]) -> String {
    let mut out = String::from("step,lm,tir,balance,total\n");
    for r in curve {
        out.push_str(&format!(
            "{},{:.16e},{:.16e},{:.16e},{:.16e}\n",
            r.step, r.lm, r.tir, r.balance, r.total
        ));
    }
    out
}

fn cmd_train(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config, seed)?;
    std::fs::create_dir_all(out)?;
    let stream = generate(
        cfg.seed,
        cfg.n_sequences,
        cfg.seq_len,
        cfg.vocab,
        cfg.redundancy,
    )?;
    let mut state = TrainState::new(cfg.clone(), LayerMode::AnyExperts)?;

    let interval = (cfg.steps / 10).max(1);
    let mut curve = Vec::with_capacity(cfg.steps);
    let mut stats_lines = String::new();
    let mut done = 0usize;
    while done < cfg.steps {
        let chunk = interval.min(cfg.steps - done);
        curve.extend(train(&mut state, &stream, chunk, cfg.lr)?);
        done += chunk;

        // load statistics over the whole stream at this point in training
        let all: Vec<usize> = (0..stream.sequences.len()).collect();
        let (ids, targets, _) = stream.flatten(&all);
        let mut tape = Tape::new();
        let tp = tape.register_params(&state.params);
        let fwd = state.model.forward(&mut tape, &tp, &ids, &targets)?;
        let mut v = serde_json::to_value(&fwd.stats).map_err(|e| Error::Internal(e.to_string()))?;
        v.as_object_mut()
            .expect("stats serialize to an object")
            .insert("step".to_string(), serde_json::Value::from(state.step));
        stats_lines.push_str(&v.to_string());
        stats_lines.push('\n');
    }

    std::fs::write(out.join("loss_curve.csv"), curve_csv(&curve))?;
    std::fs::write(out.join("load_stats.jsonl"), stats_lines)?;
    checkpoint::save_file(&state, &out.join("checkpoint.bin"))?;

    let eval = evaluate(&state, &stream, None)?;
    println!(
        "trained {} steps: eval loss {:.6}, accuracy {:.4}, avg k_hat {:.3}, avg k_real {:.3}",
        state.step, eval.loss, eval.accuracy, eval.avg_k_hat, eval.avg_k_real
    );
    Ok(())
}

fn parse_scales(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad budget scale '{}'", t.trim())))
        })
        .collect()
}

fn cmd_sweep(ckpt: &Path, scales: &str, out: &Path) -> Result<()> {
    let state = checkpoint::load_file(ckpt)?;
    let scales = parse_scales(scales)?;
    std::fs::create_dir_all(out)?;
    let cfg = &state.model.cfg;
    let stream = generate(
        cfg.seed,
        cfg.n_sequences,
        cfg.seq_len,
        cfg.vocab,
        cfg.redundancy,
    )?;
    let report = budget_sweep(&state, &stream, &scales)?;
    std::fs::write(out.join("sweep.csv"), report.to_csv())?;
    println!("wrote {} sweep rows", report.rows.len());
    Ok(())
}

fn cmd_trace(ckpt: &Path, seed: Option<u64>, out: &Path) -> Result<()> {
    let state = checkpoint::load_file(ckpt)?;
    let cfg = &state.model.cfg;
    let stream = generate(
        seed.unwrap_or(cfg.seed),
        cfg.n_sequences,
        cfg.seq_len,
        cfg.vocab,
        cfg.redundancy,
    )?;
    let trace = export_importance_trace(&state, &stream)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(out, trace.to_jsonl()?)?;
    println!(
        "wrote {} records and {} span aggregates",
        trace.records.len(),
        trace.spans.len()
    );
    Ok(())
}

fn cmd_check_grad() -> Result<()> {
    // a small dynamically routed layer exercising every differentiable path
    let layer = AnyExpertsLayer::new(8, 16, 4, 2, crate::importance::EstimatorArch::Default);
    let rcfg = RouterConfig {
        k_min: 2,
        k_max: 4,
        e_real: 4,
        e_virtual: 2,
        rho_max: 0.5,
        alpha: 0.5,
        lambda: 1.0,
        eps: 1e-8,
        budget_scale: 1.0,
    };
    let mut ps = ParamSet::new();
    layer.init_params(&mut ps, &mut Rng::new(43));
    let mut r = Rng::new(1043);
    let dims = layer.estimator.layer_dims();
    let last = dims.len() - 1;
    if let Some(m) = ps.get_mut(&format!("est.l{last}.w")) {
        for v in m.data_mut() {
            *v = r.range_f64(-1.0, 1.0);
        }
    }
    let mut hr = Rng::new(431);
    let h = Matrix::from_fn(6, 8, |_, _| hr.range_f64(-1.5, 1.5));

    let run = |p: &ParamSet| -> Result<(f64, ParamSet)> {
        let mut tape = Tape::new();
        let tp = tape.register_params(p);
        let hv = tape.constant(h.clone());
        let fwd = layer.forward(&mut tape, &tp, hv, &rcfg)?;
        let sq = tape.square(fwd.output);
        let fit = tape.mean(sq)?;
        let tir = tir_loss(&mut tape, fwd.importance.w)?;
        let bal = balance_loss(&mut tape, fwd.routing.probs, &fwd.stats)?;
        let bundle = total_loss(&mut tape, fit, tir, bal, 0.001, 0.01)?;
        let grads = tape.backward(bundle.total_var)?;
        Ok((bundle.total, grads))
    };
    let (_, analytic) = run(&ps)?;
    let report = check_gradients(|p| run(p).map(|(v, _)| v), &ps, &analytic, 1e-5, 1e-4)?;
    println!("layer gradient check: {report}");

    // the full toy model: embedding and head included
    let cfg = RunConfig {
        d: 8,
        d_ff: 12,
        vocab: 16,
        e_real: 4,
        e_virtual: 2,
        k_min: 2,
        k_max: 4,
        rho_max: 0.5,
        alpha: 0.5,
        seq_len: 8,
        n_sequences: 4,
        batch_size: 2,
        steps: 1,
        ..RunConfig::default()
    };
    let model = Model::new(cfg, LayerMode::AnyExperts)?;
    let mut mps = model.init_params(&mut Rng::new(31));
    let mut r = Rng::new(32);
    if let Some(m) = mps.get_mut("est.l1.w") {
        for v in m.data_mut() {
            *v = r.range_f64(-1.0, 1.0);
        }
    }
    let ids = vec![3, 7, 1, 12, 5, 9];
    let targets = vec![4, 8, 2, 13, 6, 10];
    let run_model = |p: &ParamSet| -> Result<(f64, ParamSet)> {
        let mut tape = Tape::new();
        let tp = tape.register_params(p);
        let fwd = model.forward(&mut tape, &tp, &ids, &targets)?;
        let grads = tape.backward(fwd.bundle.total_var)?;
        Ok((fwd.bundle.total, grads))
    };
    let (_, analytic) = run_model(&mps)?;
    let model_report =
        check_gradients(|p| run_model(p).map(|(v, _)| v), &mps, &analytic, 1e-5, 1e-4)?;
    println!("full model gradient check: {model_report}");

    if report.pass && model_report.pass {
        Ok(())
    } else {
        Err(Error::Numeric(
            "gradient check failed; see reports above".to_string(),
        ))
    }
}
