//! Importance-aware dynamic routing.
//!
//! Each token's importance weight interpolates its total slot count within
//! `[k_min, k_max]`, biases the gate logits toward real experts (and away
//! from virtual ones), and a greedy top-k pass fills the slots while holding
//! virtual experts to at most `floor(rho_max * k_hat)` of them. Combination
//! weights over the selected set are sigmoid-normalized and scaled by
//! `lambda`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, ParamSet, Rng, Tape, TapeParams, Var};

/// All routing hyperparameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RouterConfig {
    /// Minimum total slots per token.
    pub k_min: usize,
    /// Maximum total slots per token.
    pub k_max: usize,
    /// Number of real (FFN) experts.
    pub e_real: usize,
    /// Number of virtual (identity) expert copies, each with its own gate column.
    pub e_virtual: usize,
    /// Maximum fraction of a token's slots fillable by virtual experts.
    pub rho_max: f64,
    /// Importance modulation strength, shared with the residual fusion.
    pub alpha: f64,
    /// Scale on the combination weights.
    pub lambda: f64,
    /// Stabilizer in the combination-weight denominator.
    pub eps: f64,
    /// Inference-time multiplier on the continuous slot count, in (0, 1].
    pub budget_scale: f64,
}

impl Default for RouterConfig {
    fn default() -> Self {
        RouterConfig {
            k_min: 8,
            k_max: 12,
            e_real: 16,
            e_virtual: 64,
            rho_max: 0.2,
            alpha: 0.01,
            lambda: 1.0,
            eps: 1e-8,
            budget_scale: 1.0,
        }
    }
}

impl RouterConfig {
    /// Total gate columns.
    pub fn e_total(&self) -> usize {
        self.e_real + self.e_virtual
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_min < 1 || self.k_min > self.k_max {
            return Err(Error::Config(format!(
                "need 1 <= k_min <= k_max, got k_min={} k_max={}",
                self.k_min, self.k_max
            )));
        }
        if self.k_max > self.e_total() {
            return Err(Error::Config(format!(
                "k_max={} exceeds total experts {}",
                self.k_max,
                self.e_total()
            )));
        }
        if !(0.0..1.0).contains(&self.rho_max) {
            return Err(Error::Config(format!(
                "rho_max must be in [0,1), got {}",
                self.rho_max
            )));
        }
        // enough real experts to absorb any cap-displaced selection
        if (self.k_max as f64) * (1.0 - self.rho_max) > self.e_real as f64 + 1e-12 {
            return Err(Error::Config(format!(
                "k_max*(1-rho_max) = {} exceeds e_real = {}",
                self.k_max as f64 * (1.0 - self.rho_max),
                self.e_real
            )));
        }
        if self.alpha < 0.0 {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if self.lambda <= 0.0 {
            return Err(Error::Config(format!("lambda must be > 0, got {}", self.lambda)));
        }
        if self.eps <= 0.0 {
            return Err(Error::Config(format!("eps must be > 0, got {}", self.eps)));
        }
        if !(self.budget_scale > 0.0 && self.budget_scale <= 1.0) {
            return Err(Error::Config(format!(
                "budget_scale must be in (0,1], got {}",
                self.budget_scale
            )));
        }
        Ok(())
    }
}

/// Total slot count for a token with importance weight `w`: interpolate in
/// `[k_min, k_max]`, scale by the inference budget, round half-up, clamp.
pub fn slot_count(w: f64, cfg: &RouterConfig) -> usize {
    debug_assert!(w > 0.0 && w < 1.0, "importance weight out of (0,1): {w}");
    let k_raw = cfg.k_min as f64 + (cfg.k_max - cfg.k_min) as f64 * w;
    let scaled = k_raw * cfg.budget_scale;
    let rounded = (scaled + 0.5).floor() as i64;
    rounded.clamp(1, cfg.k_max as i64) as usize
}

/// Importance-modulated routing factors `(phi_real, phi_virtual)`.
pub fn modulation(w: f64, alpha: f64) -> Result<(f64, f64)> {
    if alpha < 0.0 {
        return Err(Error::Config(format!("alpha must be >= 0, got {alpha}")));
    }
    if alpha * w >= 1.0 {
        return Err(Error::Config(format!(
            "alpha*w = {} >= 1: virtual modulation factor would be non-positive",
            alpha * w
        )));
    }
    Ok((1.0 + alpha * w, 1.0 - alpha * w))
}

/// Maximum virtual slots for a token with `k_hat` total slots.
/// The tiny nudge compensates representation error in `rho_max * k_hat`
/// (e.g. 0.3 * 10 = 2.999...96) so exact products floor correctly.
pub fn virtual_cap(k_hat: usize, rho_max: f64) -> usize {
    (rho_max * k_hat as f64 + 1e-9).floor() as usize
}

/// Linear gate producing one logit per expert column. Columns `0..e_real`
/// are real experts; the rest are virtual copies, in fixed order.
/// Parameters: `gate.w` (d x E), `gate.b` (1 x E).
#[derive(Clone, Debug)]
pub struct GatingNetwork {
    pub d: usize,
    pub e_real: usize,
    pub e_virtual: usize,
}

impl GatingNetwork {
    pub fn new(d: usize, e_real: usize, e_virtual: usize) -> Self {
        GatingNetwork {
            d,
            e_real,
            e_virtual,
        }
    }

    pub fn e_total(&self) -> usize {
        self.e_real + self.e_virtual
    }

    pub fn init_params(&self, ps: &mut ParamSet, rng: &mut Rng) {
        let a = 1.0 / (self.d as f64).sqrt();
        ps.insert(
            "gate.w",
            Matrix::from_fn(self.d, self.e_total(), |_, _| rng.range_f64(-a, a)),
        );
        ps.insert("gate.b", Matrix::zeros(1, self.e_total()));
    }

    /// Raw logits for a batch: `h @ gate.w + gate.b`.
    pub fn logits(&self, tape: &mut Tape, tp: &TapeParams, h: Var) -> Result<Var> {
        let z = tape.matmul(h, tp.var("gate.w")?)?;
        tape.add_row_vec(z, tp.var("gate.b")?)
    }
}

/// One token's routing outcome.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RoutingDecision {
    /// Total slots granted.
    pub k_hat: usize,
    pub k_real: usize,
    pub k_virtual: usize,
    /// Selected expert ids in rank order (length `k_hat`).
    pub selected: Vec<usize>,
    /// Combination weights aligned with `selected`.
    pub gamma: Vec<f64>,
    /// Importance weight that produced this decision, when one exists
    /// (baselines route without importance).
    pub w: Option<f64>,
    /// Full modulated logit vector r'.
    pub modulated_logits: Vec<f64>,
    /// Softmax of r' over all experts (feeds the balance loss).
    pub probs: Vec<f64>,
}

/// Differentiable pieces plus per-token decisions for one routed batch.
pub struct RoutingBatch {
    /// Raw gate logits, N x E.
    pub raw_logits: Var,
    /// Importance-modulated logits r', N x E.
    pub modulated: Var,
    /// Row softmax of r', N x E.
    pub probs: Var,
    /// Combination weights, N x E; zero outside each token's selected set.
    pub gamma: Var,
    /// 0/1 selection mask backing `gamma`.
    pub mask: Matrix,
    pub decisions: Vec<RoutingDecision>,
}

/// Rank experts by modulated logit (descending, ties to the lower id) and
/// greedily fill `k_hat` slots, skipping virtual experts once the cap is hit.
/// Returns (selected ids in rank order, k_real, k_virtual).
pub fn select_experts(
    modulated_row: &[f64],
    k_hat: usize,
    e_real: usize,
    rho_max: f64,
) -> Result<(Vec<usize>, usize, usize)> {
    let mut order: Vec<usize> = (0..modulated_row.len()).collect();
    order.sort_by(|&a, &b| {
        modulated_row[b]
            .total_cmp(&modulated_row[a])
            .then(a.cmp(&b))
    });
    let cap = virtual_cap(k_hat, rho_max);
    let mut selected = Vec::with_capacity(k_hat);
    let mut k_virtual = 0;
    for id in order {
        if selected.len() == k_hat {
            break;
        }
        if id >= e_real {
            if k_virtual == cap {
                continue;
            }
            k_virtual += 1;
        }
        selected.push(id);
    }
    if selected.len() < k_hat {
        return Err(Error::Internal(format!(
            "only {} selectable experts for k_hat={k_hat} after virtual cap",
            selected.len()
        )));
    }
    let k_real = k_hat - k_virtual;
    Ok((selected, k_real, k_virtual))
}

/// Sigmoid-normalized combination weights over the selected sets:
/// `gamma = lambda * sigmoid(r') / (sum_selected sigmoid(r') + eps)`,
/// laid out as an N x E matrix that is zero outside each selection.
pub fn combine_weights(
    tape: &mut Tape,
    modulated: Var,
    mask: &Matrix,
    cfg: &RouterConfig,
) -> Result<Var> {
    let e = tape.value(modulated).cols();
    let sig = tape.sigmoid(modulated);
    let masked = tape.mask_mul(sig, mask.clone())?;
    let row_sums = tape.row_sum_range(masked, 0, e)?;
    let denom = tape.add_const(row_sums, cfg.eps);
    let normed = tape.div_col_broadcast(masked, denom)?;
    Ok(tape.scale(normed, cfg.lambda))
}

/// Route a batch of fused hidden states. `w` must be the Nx1 importance
/// weights from the same batch.
pub fn route(
    tape: &mut Tape,
    tp: &TapeParams,
    gate: &GatingNetwork,
    h_fused: Var,
    w: Var,
    cfg: &RouterConfig,
) -> Result<RoutingBatch> {
    cfg.validate()?;
    if gate.e_real != cfg.e_real || gate.e_virtual != cfg.e_virtual {
        return Err(Error::Config(format!(
            "gate has {}+{} experts but config says {}+{}",
            gate.e_real, gate.e_virtual, cfg.e_real, cfg.e_virtual
        )));
    }
    let n = tape.value(h_fused).rows();
    if tape.value(w).shape() != (n, 1) {
        return Err(Error::dim("route weights", tape.value(w).shape(), (n, 1)));
    }

    let raw_logits = gate.logits(tape, tp, h_fused)?;
    let modulated = tape.modulate(raw_logits, w, cfg.alpha, cfg.e_real)?;
    let probs = tape.softmax_rows(modulated);
    tape.value(modulated).validate_finite("modulated logits")?;

    let e = cfg.e_total();
    let mut mask = Matrix::zeros(n, e);
    let mut decisions = Vec::with_capacity(n);
    for i in 0..n {
        let wi = tape.value(w).get(i, 0);
        let k_hat = slot_count(wi, cfg);
        let row: Vec<f64> = tape.value(modulated).row(i).to_vec();
        let (selected, k_real, k_virtual) = select_experts(&row, k_hat, cfg.e_real, cfg.rho_max)?;
        for &id in &selected {
            mask.set(i, id, 1.0);
        }
        decisions.push(RoutingDecision {
            k_hat,
            k_real,
            k_virtual,
            selected,
            gamma: Vec::new(), // filled below
            w: Some(wi),
            modulated_logits: row,
            probs: tape.value(probs).row(i).to_vec(),
        });
    }

    let gamma = combine_weights(tape, modulated, &mask, cfg)?;
    for (i, d) in decisions.iter_mut().enumerate() {
        d.gamma = d
            .selected
            .iter()
            .map(|&id| tape.value(gamma).get(i, id))
            .collect();
    }

    Ok(RoutingBatch {
        raw_logits,
        modulated,
        probs,
        gamma,
        mask,
        decisions,
    })
}

/// One JSON line per token: `{token_index, modality, w, k_hat, k_real,
/// k_virtual, selected, gamma}`. `modalities` may be empty, in which case the
/// field is null.
pub fn decisions_to_jsonl(decisions: &[RoutingDecision], modalities: &[String]) -> String {
    let mut out = String::new();
    for (i, d) in decisions.iter().enumerate() {
        let rec = serde_json::json!({
            "token_index": i,
            "modality": modalities.get(i),
            "w": d.w,
            "k_hat": d.k_hat,
            "k_real": d.k_real,
            "k_virtual": d.k_virtual,
            "selected": d.selected,
            "gamma": d.gamma,
        });
        out.push_str(&rec.to_string());
        out.push('\n');
    }
    out
}
