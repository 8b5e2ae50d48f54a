//! The full dynamic-allocation MoE layer.
//!
//! Pipeline per batch: importance estimation -> fused hidden states ->
//! importance-aware routing -> dispatch to real FFN experts and virtual
//! identity experts -> gamma-weighted combine. Load accounting smooths
//! virtual usage evenly across the virtual copies before the balance loss.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::importance::{estimate, EstimatorArch, ImportanceEstimator, ImportanceVars};
use crate::numerics::{Matrix, ParamSet, Rng, Tape, TapeParams, Var};
use crate::routing::{route, GatingNetwork, RouterConfig, RoutingBatch, RoutingDecision};

/// Default auxiliary-loss coefficients.
pub const LAMBDA_TIR_DEFAULT: f64 = 0.001;
pub const LAMBDA_BAL_DEFAULT: f64 = 0.01;

/// A bank of real two-layer ReLU FFN experts. Virtual experts hold zero
/// parameters and return their input unchanged; only their gate columns and
/// combination weights exist.
#[derive(Clone, Debug)]
pub struct ExpertBank {
    pub d: usize,
    pub d_ff: usize,
    pub e_real: usize,
}

impl ExpertBank {
    pub fn new(d: usize, d_ff: usize, e_real: usize) -> Self {
        ExpertBank { d, d_ff, e_real }
    }

    pub fn init_params(&self, ps: &mut ParamSet, rng: &mut Rng) {
        let a1 = 1.0 / (self.d as f64).sqrt();
        let a2 = 1.0 / (self.d_ff as f64).sqrt();
        for k in 0..self.e_real {
            ps.insert(
                &format!("expert{k}.w1"),
                Matrix::from_fn(self.d, self.d_ff, |_, _| rng.range_f64(-a1, a1)),
            );
            ps.insert(&format!("expert{k}.b1"), Matrix::zeros(1, self.d_ff));
            ps.insert(
                &format!("expert{k}.w2"),
                Matrix::from_fn(self.d_ff, self.d, |_, _| rng.range_f64(-a2, a2)),
            );
            ps.insert(&format!("expert{k}.b2"), Matrix::zeros(1, self.d));
        }
    }

    /// `relu(h @ w1 + b1) @ w2 + b2` for real expert `k` over the whole batch.
    pub fn forward(&self, tape: &mut Tape, tp: &TapeParams, k: usize, h: Var) -> Result<Var> {
        if k >= self.e_real {
            return Err(Error::Contract(format!(
                "expert index {k} out of {} real experts",
                self.e_real
            )));
        }
        let z1 = tape.matmul(h, tp.var(&format!("expert{k}.w1"))?)?;
        let z1 = tape.add_row_vec(z1, tp.var(&format!("expert{k}.b1"))?)?;
        let a1 = tape.relu(z1);
        let z2 = tape.matmul(a1, tp.var(&format!("expert{k}.w2"))?)?;
        tape.add_row_vec(z2, tp.var(&format!("expert{k}.b2"))?)
    }
}

/// Calibrated load accounting over one batch.
#[derive(Clone, Debug, Serialize)]
pub struct LoadStats {
    /// Raw token counts per real expert.
    pub c: Vec<usize>,
    /// Total virtual-routed slot count.
    pub t_virtual: usize,
    /// Calibrated fractions, length E: `c_k/N` for real experts,
    /// `t_virtual/(e_virtual*N)` smoothed across every virtual copy.
    pub f: Vec<f64>,
    /// Mean routing probability per expert, length E.
    pub p: Vec<f64>,
    pub n_tokens: usize,
    pub avg_k_hat: f64,
    pub avg_k_real: f64,
    /// `sum(k_virtual) / sum(k_hat)` over the batch.
    pub virtual_share: f64,
}

/// Aggregate decisions and routing probabilities into calibrated loads.
pub fn load_stats(
    decisions: &[RoutingDecision],
    probs: &Matrix,
    e_real: usize,
    e_virtual: usize,
) -> Result<LoadStats> {
    let n = decisions.len();
    if n == 0 {
        return Err(Error::Contract("load_stats on empty batch".to_string()));
    }
    let e = e_real + e_virtual;
    if probs.shape() != (n, e) {
        return Err(Error::dim("load_stats probs", probs.shape(), (n, e)));
    }
    let mut c = vec![0usize; e_real];
    let mut t_virtual = 0usize;
    let mut sum_k_hat = 0usize;
    let mut sum_k_real = 0usize;
    for d in decisions {
        sum_k_hat += d.k_hat;
        sum_k_real += d.k_real;
        for &id in &d.selected {
            if id < e_real {
                c[id] += 1;
            } else {
                t_virtual += 1;
            }
        }
    }
    let nf = n as f64;
    let mut f = Vec::with_capacity(e);
    for &ck in &c {
        f.push(ck as f64 / nf);
    }
    for _ in 0..e_virtual {
        f.push(t_virtual as f64 / (e_virtual as f64 * nf));
    }
    let p: Vec<f64> = (0..e)
        .map(|j| (0..n).map(|i| probs.get(i, j)).sum::<f64>() / nf)
        .collect();
    Ok(LoadStats {
        c,
        t_virtual,
        f,
        p,
        n_tokens: n,
        avg_k_hat: sum_k_hat as f64 / nf,
        avg_k_real: sum_k_real as f64 / nf,
        virtual_share: if sum_k_hat > 0 {
            (sum_k_hat - sum_k_real) as f64 / sum_k_hat as f64
        } else {
            0.0
        },
    })
}

/// Balance loss as a plain value: dot product of calibrated fractions and
/// mean routing probabilities over all E slots.
pub fn balance_loss_value(stats: &LoadStats) -> Result<f64> {
    if stats.n_tokens == 0 {
        return Err(Error::Contract("balance_loss on empty batch".to_string()));
    }
    if stats.f.len() != stats.p.len() {
        return Err(Error::Contract(format!(
            "load vector length {} != prob vector length {}",
            stats.f.len(),
            stats.p.len()
        )));
    }
    Ok(stats.f.iter().zip(stats.p.iter()).map(|(a, b)| a * b).sum())
}

/// Differentiable balance loss: gradients flow through the routing
/// probabilities; the calibrated fractions are straight-through constants.
pub fn balance_loss(tape: &mut Tape, probs: Var, stats: &LoadStats) -> Result<Var> {
    if stats.n_tokens == 0 {
        return Err(Error::Contract("balance_loss on empty batch".to_string()));
    }
    let p_mean = tape.col_mean(probs)?;
    let f_row = Matrix::row_vec(stats.f.clone());
    let weighted = tape.mask_mul(p_mean, f_row)?;
    Ok(tape.sum(weighted))
}

/// Mean next-token cross entropy.
pub fn lm_loss(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, targets)
}

/// The three loss components and their weighted total.
#[derive(Clone, Debug)]
pub struct LossBundle {
    pub lm: f64,
    pub tir: f64,
    pub balance: f64,
    pub total: f64,
    pub lambda_tir: f64,
    pub lambda_bal: f64,
    /// Tape node of the weighted total, for backward.
    pub total_var: Var,
}

/// `total = lm + lambda_tir*tir + lambda_bal*balance`.
pub fn total_loss(
    tape: &mut Tape,
    lm: Var,
    tir: Var,
    balance: Var,
    lambda_tir: f64,
    lambda_bal: f64,
) -> Result<LossBundle> {
    let t = tape.scale(tir, lambda_tir);
    let b = tape.scale(balance, lambda_bal);
    let aux = tape.add(t, b)?;
    let total_var = tape.add(lm, aux)?;
    let bundle = LossBundle {
        lm: tape.scalar(lm),
        tir: tape.scalar(tir),
        balance: tape.scalar(balance),
        total: tape.scalar(total_var),
        lambda_tir,
        lambda_bal,
        total_var,
    };
    for (name, v) in [
        ("lm", bundle.lm),
        ("tir", bundle.tir),
        ("balance", bundle.balance),
        ("total", bundle.total),
    ] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{name} loss is not finite: {v}")));
        }
    }
    if bundle.tir < 0.0 || bundle.balance < 0.0 {
        return Err(Error::Numeric(
            "auxiliary losses must be non-negative".to_string(),
        ));
    }
    Ok(bundle)
}

/// The full layer: estimator + gate + experts.
#[derive(Clone, Debug)]
pub struct AnyExpertsLayer {
    pub d: usize,
    pub d_ff: usize,
    pub e_real: usize,
    pub e_virtual: usize,
    pub estimator: ImportanceEstimator,
    pub gate: GatingNetwork,
    pub experts: ExpertBank,
}

/// Everything one forward pass produces.
pub struct LayerForward {
    /// Combined expert outputs, N x D.
    pub output: Var,
    pub importance: ImportanceVars,
    pub routing: RoutingBatch,
    pub stats: LoadStats,
}

impl AnyExpertsLayer {
    pub fn new(d: usize, d_ff: usize, e_real: usize, e_virtual: usize, arch: EstimatorArch) -> Self {
        AnyExpertsLayer {
            d,
            d_ff,
            e_real,
            e_virtual,
            estimator: ImportanceEstimator::new(d, arch),
            gate: GatingNetwork::new(d, e_real, e_virtual),
            experts: ExpertBank::new(d, d_ff, e_real),
        }
    }

    pub fn init_params(&self, ps: &mut ParamSet, rng: &mut Rng) {
        self.estimator.init_params(ps, rng);
        self.gate.init_params(ps, rng);
        self.experts.init_params(ps, rng);
    }

    /// Route and dispatch one batch of hidden states (one row per token).
    pub fn forward(
        &self,
        tape: &mut Tape,
        tp: &TapeParams,
        h: Var,
        cfg: &RouterConfig,
    ) -> Result<LayerForward> {
        if tape.value(h).cols() != self.d {
            return Err(Error::dim(
                "layer forward",
                tape.value(h).shape(),
                (tape.value(h).rows(), self.d),
            ));
        }
        let importance = estimate(tape, tp, &self.estimator, h, cfg.alpha)?;
        let routing = route(tape, tp, &self.gate, importance.h_fused, importance.w, cfg)?;
        let output = combine_outputs(
            tape,
            tp,
            &self.experts,
            importance.h_fused,
            routing.gamma,
            self.e_real,
            self.e_virtual,
        )?;
        tape.value(output).validate_finite("layer output")?;
        let stats = load_stats(
            &routing.decisions,
            tape.value(routing.probs),
            self.e_real,
            self.e_virtual,
        )?;
        Ok(LayerForward {
            output,
            importance,
            routing,
            stats,
        })
    }
}

/// `output row = sum_selected gamma_e * expert_e(h_fused row)`, with every
/// virtual expert contributing the fused hidden state itself. `gamma` is
/// N x E and zero outside each token's selection, so unselected experts
/// contribute nothing to value or gradient.
pub fn combine_outputs(
    tape: &mut Tape,
    tp: &TapeParams,
    experts: &ExpertBank,
    h_fused: Var,
    gamma: Var,
    e_real: usize,
    e_virtual: usize,
) -> Result<Var> {
    let e = e_real + e_virtual;
    // virtual contribution first, then real experts in ascending id order
    let mut acc = if e_virtual > 0 {
        let vw = tape.row_sum_range(gamma, e_real, e)?;
        Some(tape.mul_col_broadcast(h_fused, vw)?)
    } else {
        None
    };
    for k in 0..e_real {
        let col = tape.col_slice(gamma, k)?;
        // skip experts no token selected; their gamma column is all zero
        if tape.value(col).data().iter().all(|&v| v == 0.0) {
            continue;
        }
        let out = experts.forward(tape, tp, k, h_fused)?;
        let contrib = tape.mul_col_broadcast(out, col)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, contrib)?,
            None => contrib,
        });
    }
    match acc {
        Some(a) => Ok(a),
        None => {
            let shape = tape.value(h_fused).shape();
            Ok(tape.constant(Matrix::zeros(shape.0, shape.1)))
        }
    }
}
