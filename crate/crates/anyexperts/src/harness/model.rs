//! A single-block toy model: embedding table, one MoE layer (dynamic or
//! static baseline routing), residual connection, and an output head.

use crate::baselines::{route_baseline, BaselineConfig, BaselineKind};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::moe::{
    balance_loss, lm_loss, load_stats, total_loss, AnyExpertsLayer, ExpertBank, LoadStats,
    LossBundle,
};
use crate::importance::tir_loss;
use crate::moe::combine_outputs;
use crate::numerics::{Matrix, ParamSet, Rng, Tape, TapeParams, Var};
use crate::routing::{GatingNetwork, RoutingDecision};

/// Which routing policy the block uses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LayerMode {
    AnyExperts,
    TopK(usize),
    TopP(f64),
}

impl LayerMode {
    pub fn label(&self) -> String {
        match self {
            LayerMode::AnyExperts => "anyexperts".to_string(),
            LayerMode::TopK(k) => format!("topk{k}"),
            LayerMode::TopP(p) => format!("topp{p}"),
        }
    }
}

/// The toy model. Baseline modes carry no estimator and no virtual experts.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: RunConfig,
    pub mode: LayerMode,
    pub layer: AnyExpertsLayer,
}

/// One forward pass with every loss component on the tape.
pub struct ForwardPass {
    pub logits: Var,
    pub bundle: LossBundle,
    pub decisions: Vec<RoutingDecision>,
    pub stats: LoadStats,
    /// Per-token importance weights (dynamic mode only), N x 1.
    pub w: Option<Var>,
}

impl Model {
    pub fn new(cfg: RunConfig, mode: LayerMode) -> Result<Self> {
        cfg.validate()?;
        if let LayerMode::TopK(k) = mode {
            BaselineConfig::top_k(k).validate(cfg.e_real)?;
        }
        if let LayerMode::TopP(p) = mode {
            BaselineConfig::top_p(p).validate(cfg.e_real)?;
        }
        let e_virtual = match mode {
            LayerMode::AnyExperts => cfg.e_virtual,
            _ => 0,
        };
        let layer = AnyExpertsLayer::new(cfg.d, cfg.d_ff, cfg.e_real, e_virtual, cfg.estimator);
        Ok(Model { cfg, mode, layer })
    }

    fn gate(&self) -> &GatingNetwork {
        &self.layer.gate
    }

    fn experts(&self) -> &ExpertBank {
        &self.layer.experts
    }

    /// Parameters in canonical insertion order: embedding, layer, head.
    pub fn init_params(&self, rng: &mut Rng) -> ParamSet {
        let mut ps = ParamSet::new();
        let es = 1.0 / (self.cfg.d as f64).sqrt();
        ps.insert(
            "embed",
            Matrix::from_fn(self.cfg.vocab, self.cfg.d, |_, _| rng.range_f64(-0.5, 0.5)),
        );
        match self.mode {
            LayerMode::AnyExperts => self.layer.init_params(&mut ps, rng),
            _ => {
                // baselines: no estimator parameters, no virtual gate columns
                self.gate().init_params(&mut ps, rng);
                self.experts().init_params(&mut ps, rng);
            }
        }
        ps.insert(
            "head.w",
            Matrix::from_fn(self.cfg.d, self.cfg.vocab, |_, _| rng.range_f64(-es, es)),
        );
        ps.insert("head.b", Matrix::zeros(1, self.cfg.vocab));
        ps
    }

    /// Embed, route, combine, apply the residual connection, and project to
    /// vocabulary logits; assembles the full training objective.
    pub fn forward(
        &self,
        tape: &mut Tape,
        tp: &TapeParams,
        ids: &[usize],
        targets: &[usize],
    ) -> Result<ForwardPass> {
        if ids.is_empty() {
            return Err(Error::Contract("forward on empty batch".to_string()));
        }
        if ids.len() != targets.len() {
            return Err(Error::Contract(format!(
                "{} ids but {} targets",
                ids.len(),
                targets.len()
            )));
        }
        let h = tape.gather_rows(tp.var("embed")?, ids)?;

        let (moe_out, decisions, stats, tir, bal, w) = match self.mode {
            LayerMode::AnyExperts => {
                let rcfg = self.cfg.router();
                let fwd = self.layer.forward(tape, tp, h, &rcfg)?;
                let tir = tir_loss(tape, fwd.importance.w)?;
                let bal = balance_loss(tape, fwd.routing.probs, &fwd.stats)?;
                (
                    fwd.output,
                    fwd.routing.decisions,
                    fwd.stats,
                    tir,
                    bal,
                    Some(fwd.importance.w),
                )
            }
            LayerMode::TopK(_) | LayerMode::TopP(_) => {
                let bcfg = match self.mode {
                    LayerMode::TopK(k) => BaselineConfig {
                        kind: BaselineKind::TopK(k),
                        lambda: self.cfg.lambda,
                        eps: self.cfg.eps,
                    },
                    _ => {
                        let LayerMode::TopP(p) = self.mode else { unreachable!() };
                        BaselineConfig {
                            kind: BaselineKind::TopP(p),
                            lambda: self.cfg.lambda,
                            eps: self.cfg.eps,
                        }
                    }
                };
                let batch = route_baseline(tape, tp, self.gate(), h, &bcfg)?;
                let out =
                    combine_outputs(tape, tp, self.experts(), h, batch.gamma, self.cfg.e_real, 0)?;
                let stats =
                    load_stats(&batch.decisions, tape.value(batch.probs), self.cfg.e_real, 0)?;
                let tir = tape.constant(Matrix::zeros(1, 1));
                let bal = balance_loss(tape, batch.probs, &stats)?;
                (out, batch.decisions, stats, tir, bal, None)
            }
        };

        let y = tape.add(h, moe_out)?;
        let z = tape.matmul(y, tp.var("head.w")?)?;
        let logits = tape.add_row_vec(z, tp.var("head.b")?)?;
        let lm = lm_loss(tape, logits, targets)?;
        let bundle = total_loss(tape, lm, tir, bal, self.cfg.lambda_tir, self.cfg.lambda_bal)?;

        Ok(ForwardPass {
            logits,
            bundle,
            decisions,
            stats,
            w,
        })
    }
}
