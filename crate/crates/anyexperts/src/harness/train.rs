//! Adaptive-moment training loop and whole-stream evaluation.

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::harness::data::SyntheticStream;
use crate::harness::model::{LayerMode, Model};
use crate::numerics::{ParamSet, Rng, Tape};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Model parameters plus optimizer moments and the batch-sampling rng.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub params: ParamSet,
    /// First moments, shaped like `params`.
    pub m: ParamSet,
    /// Second moments, shaped like `params`.
    pub v: ParamSet,
    pub step: usize,
    pub rng: Rng,
}

impl TrainState {
    /// Fresh state: parameters from the config seed, zero moments, and a
    /// batch-sampling rng on a separate stream.
    pub fn new(cfg: RunConfig, mode: LayerMode) -> Result<Self> {
        let model = Model::new(cfg, mode)?;
        let root = Rng::new(model.cfg.seed);
        let mut init_rng = root.derive(10);
        let params = model.init_params(&mut init_rng);
        let m = params.zeros_like();
        let v = params.zeros_like();
        Ok(TrainState {
            model,
            params,
            m,
            v,
            step: 0,
            rng: root.derive(11),
        })
    }
}

/// One row of the loss curve.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub lm: f64,
    pub tir: f64,
    pub balance: f64,
    pub total: f64,
}

/// Run `steps` optimization steps, mutating `state` and returning the loss
/// curve. `lr = 0` is allowed and leaves parameters untouched.
pub fn train(
    state: &mut TrainState,
    stream: &SyntheticStream,
    steps: usize,
    lr: f64,
) -> Result<Vec<StepRecord>> {
    if steps < 1 {
        return Err(Error::Contract("train needs steps >= 1".to_string()));
    }
    if lr < 0.0 {
        return Err(Error::Contract(format!("lr must be >= 0, got {lr}")));
    }
    let n_seq = stream.sequences.len();
    if n_seq == 0 {
        return Err(Error::Contract("train on empty stream".to_string()));
    }
    let batch_size = state.model.cfg.batch_size.min(n_seq);

    let mut curve = Vec::with_capacity(steps);
    for _ in 0..steps {
        let picks: Vec<usize> = (0..batch_size).map(|_| state.rng.below(n_seq)).collect();
        let (ids, targets, _) = stream.flatten(&picks);

        let mut tape = Tape::new();
        let tp = tape.register_params(&state.params);
        let fwd = state
            .model
            .forward(&mut tape, &tp, &ids, &targets)
            .map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!(
                    "step {}: {msg} (lm/tir/balance unavailable)",
                    state.step
                )),
                other => other,
            })?;
        let b = &fwd.bundle;
        if !b.total.is_finite() {
            return Err(Error::Numeric(format!(
                "step {}: non-finite total loss (lm={} tir={} balance={})",
                state.step, b.lm, b.tir, b.balance
            )));
        }
        curve.push(StepRecord {
            step: state.step,
            lm: b.lm,
            tir: b.tir,
            balance: b.balance,
            total: b.total,
        });

        let grads = tape.backward(b.total_var)?;
        state.step += 1;
        let t = state.step as f64;
        let bc1 = 1.0 - ADAM_BETA1.powf(t);
        let bc2 = 1.0 - ADAM_BETA2.powf(t);
        for (name, mm) in state.m.iter_mut() {
            let g = grads.require(name)?;
            for (mv, &gv) in mm.data_mut().iter_mut().zip(g.data().iter()) {
                *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv;
            }
        }
        for (name, vm) in state.v.iter_mut() {
            let g = grads.require(name)?;
            for (vv, &gv) in vm.data_mut().iter_mut().zip(g.data().iter()) {
                *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv;
            }
        }
        let TrainState {
            params, m, v: vs, ..
        } = state;
        for (name, p) in params.iter_mut() {
            let mm = m.require(name)?;
            let vv = vs.require(name)?;
            for ((pv, &mv), &sv) in p
                .data_mut()
                .iter_mut()
                .zip(mm.data().iter())
                .zip(vv.data().iter())
            {
                let m_hat = mv / bc1;
                let v_hat = sv / bc2;
                *pv -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
    Ok(curve)
}

/// Whole-stream evaluation metrics.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct EvalMetrics {
    /// Mean next-token cross entropy.
    pub loss: f64,
    /// Exact-argmax accuracy over every position.
    pub accuracy: f64,
    pub avg_k_hat: f64,
    pub avg_k_real: f64,
    pub virtual_share: f64,
    pub n_tokens: usize,
}

/// Evaluate without updating parameters, optionally at a reduced inference
/// budget (`budget_scale` overrides the config value for dynamic routing).
pub fn evaluate(
    state: &TrainState,
    stream: &SyntheticStream,
    budget_scale: Option<f64>,
) -> Result<EvalMetrics> {
    let mut model = state.model.clone();
    if let Some(s) = budget_scale {
        model.cfg.budget_scale = s;
        model.cfg.validate()?;
    }
    let all: Vec<usize> = (0..stream.sequences.len()).collect();
    let (ids, targets, _) = stream.flatten(&all);
    if ids.is_empty() {
        return Err(Error::Contract("evaluate on empty stream".to_string()));
    }
    let mut tape = Tape::new();
    let tp = tape.register_params(&state.params);
    let fwd = model.forward(&mut tape, &tp, &ids, &targets)?;
    let logits = tape.value(fwd.logits);
    let mut correct = 0usize;
    for (i, &t) in targets.iter().enumerate() {
        let row = logits.row(i);
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best == t {
            correct += 1;
        }
    }
    Ok(EvalMetrics {
        loss: fwd.bundle.lm,
        accuracy: correct as f64 / targets.len() as f64,
        avg_k_hat: fwd.stats.avg_k_hat,
        avg_k_real: fwd.stats.avg_k_real,
        virtual_share: fwd.stats.virtual_share,
        n_tokens: targets.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::data::generate;
    use crate::importance::EstimatorArch;
    use crate::numerics::Matrix;

    fn tiny_cfg() -> RunConfig {
        RunConfig {
            d: 8,
            d_ff: 12,
            vocab: 16,
            e_real: 4,
            e_virtual: 2,
            k_min: 2,
            k_max: 4,
            rho_max: 0.5,
            alpha: 0.5,
            seq_len: 16,
            n_sequences: 8,
            steps: 10,
            batch_size: 2,
            lr: 0.02,
            estimator: EstimatorArch::Default,
            ..RunConfig::default()
        }
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let cfg = tiny_cfg();
        let stream = generate(cfg.seed, cfg.n_sequences, cfg.seq_len, cfg.vocab, 0.25).unwrap();
        let mut state = TrainState::new(cfg, LayerMode::AnyExperts).unwrap();
        let before: Vec<Matrix> = state.params.iter().map(|(_, m)| m.clone()).collect();
        train(&mut state, &stream, 3, 0.0).unwrap();
        for ((_, after), b) in state.params.iter().zip(before.iter()) {
            assert_eq!(after, b);
        }
        assert_eq!(state.step, 3);
    }

    #[test]
    fn loss_decreases_over_training() {
        let cfg = tiny_cfg();
        let stream = generate(cfg.seed, cfg.n_sequences, cfg.seq_len, cfg.vocab, 0.5).unwrap();
        let mut state = TrainState::new(cfg, LayerMode::AnyExperts).unwrap();
        let initial = evaluate(&state, &stream, None).unwrap();
        let curve = train(&mut state, &stream, 200, 0.02).unwrap();
        let final_eval = evaluate(&state, &stream, None).unwrap();
        assert_eq!(curve.len(), 200);
        assert!(
            final_eval.loss < initial.loss,
            "eval loss {} -> {}",
            initial.loss,
            final_eval.loss
        );
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = tiny_cfg();
        let stream = generate(cfg.seed, cfg.n_sequences, cfg.seq_len, cfg.vocab, 0.5).unwrap();
        let run = || {
            let mut state = TrainState::new(tiny_cfg(), LayerMode::AnyExperts).unwrap();
            let curve = train(&mut state, &stream, 20, 0.02).unwrap();
            let eval = evaluate(&state, &stream, None).unwrap();
            (curve, eval)
        };
        let (c1, e1) = run();
        let (c2, e2) = run();
        for (a, b) in c1.iter().zip(c2.iter()) {
            assert_eq!(a.total, b.total);
        }
        assert_eq!(e1.loss, e2.loss);
        assert_eq!(e1.accuracy, e2.accuracy);
    }

    #[test]
    fn baseline_training_also_learns() {
        let cfg = tiny_cfg();
        let stream = generate(cfg.seed, cfg.n_sequences, cfg.seq_len, cfg.vocab, 0.5).unwrap();
        let mut state = TrainState::new(cfg, LayerMode::TopK(2)).unwrap();
        let initial = evaluate(&state, &stream, None).unwrap();
        train(&mut state, &stream, 200, 0.02).unwrap();
        let final_eval = evaluate(&state, &stream, None).unwrap();
        assert!(final_eval.loss < initial.loss);
        assert_eq!(final_eval.avg_k_hat, 2.0);
        assert_eq!(final_eval.virtual_share, 0.0);
    }

    #[test]
    fn step_zero_gradients_pass_finite_difference_check() {
        let cfg = tiny_cfg();
        let stream = generate(cfg.seed, 4, 8, cfg.vocab, 0.25).unwrap();
        let state = TrainState::new(cfg, LayerMode::AnyExperts).unwrap();
        let (ids, targets, _) = stream.flatten(&[0, 1]);
        let run = |p: &ParamSet| -> Result<(f64, ParamSet)> {
            let mut tape = Tape::new();
            let tp = tape.register_params(p);
            let fwd = state.model.forward(&mut tape, &tp, &ids, &targets)?;
            let grads = tape.backward(fwd.bundle.total_var)?;
            Ok((fwd.bundle.total, grads))
        };
        let (_, analytic) = run(&state.params).unwrap();
        let report = crate::numerics::check_gradients(
            |p| run(p).map(|(v, _)| v),
            &state.params,
            &analytic,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "{report}");
    }

    #[test]
    fn budget_scale_override_reduces_slots() {
        let cfg = tiny_cfg();
        let stream = generate(cfg.seed, cfg.n_sequences, cfg.seq_len, cfg.vocab, 0.5).unwrap();
        let state = TrainState::new(cfg, LayerMode::AnyExperts).unwrap();
        let full = evaluate(&state, &stream, Some(1.0)).unwrap();
        let cut = evaluate(&state, &stream, Some(0.6)).unwrap();
        assert!(cut.avg_k_hat <= full.avg_k_hat);
        assert!(evaluate(&state, &stream, Some(0.0)).is_err());
    }
}
