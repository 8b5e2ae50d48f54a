//! Static routing baselines: Top-K and Top-P over the real experts.
//!
//! Baselines route on the raw gate logits with no importance estimator, no
//! virtual experts, and a fixed (Top-K) or threshold-driven (Top-P) slot
//! count. Combination weights use the same sigmoid normalization as the
//! dynamic router so comparisons isolate the allocation policy.

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Tape, TapeParams, Var};
use crate::routing::{GatingNetwork, RoutingDecision};

/// Which fixed policy fills the slots.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BaselineKind {
    /// Always the `k` highest-logit real experts.
    TopK(usize),
    /// The smallest prefix of probability-sorted real experts whose softmax
    /// mass reaches `p` (inclusive crossing; never fewer than one).
    TopP(f64),
}

#[derive(Clone, Copy, Debug)]
pub struct BaselineConfig {
    pub kind: BaselineKind,
    /// Scale on the combination weights.
    pub lambda: f64,
    /// Stabilizer in the combination-weight denominator.
    pub eps: f64,
}

impl BaselineConfig {
    pub fn top_k(k: usize) -> Self {
        BaselineConfig {
            kind: BaselineKind::TopK(k),
            lambda: 1.0,
            eps: 1e-8,
        }
    }

    pub fn top_p(p: f64) -> Self {
        BaselineConfig {
            kind: BaselineKind::TopP(p),
            lambda: 1.0,
            eps: 1e-8,
        }
    }

    pub fn validate(&self, e_real: usize) -> Result<()> {
        match self.kind {
            BaselineKind::TopK(k) => {
                if k < 1 || k > e_real {
                    return Err(Error::Config(format!(
                        "top-k baseline needs 1 <= k <= e_real, got k={k} e_real={e_real}"
                    )));
                }
            }
            BaselineKind::TopP(p) => {
                if !(p > 0.0 && p <= 1.0) {
                    return Err(Error::Config(format!(
                        "top-p threshold must be in (0,1], got {p}"
                    )));
                }
            }
        }
        if self.lambda <= 0.0 {
            return Err(Error::Config(format!(
                "lambda must be > 0, got {}",
                self.lambda
            )));
        }
        if self.eps <= 0.0 {
            return Err(Error::Config(format!("eps must be > 0, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Differentiable pieces plus per-token decisions for one baseline batch.
/// All matrices span only the real expert columns.
pub struct BaselineBatch {
    /// Raw gate logits over real experts, N x e_real.
    pub logits: Var,
    /// Row softmax of the logits, N x e_real.
    pub probs: Var,
    /// Combination weights, N x e_real; zero outside each selection.
    pub gamma: Var,
    /// 0/1 selection mask backing `gamma`.
    pub mask: Matrix,
    pub decisions: Vec<RoutingDecision>,
}

/// Select the `k` highest logits, ties to the lower expert id.
pub fn select_top_k(row: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Select the shortest prefix of probability-sorted experts whose cumulative
/// mass reaches `p`. The crossing expert is included, so at least one expert
/// is always selected.
pub fn select_top_p(prob_row: &[f64], p: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..prob_row.len()).collect();
    order.sort_by(|&a, &b| prob_row[b].total_cmp(&prob_row[a]).then(a.cmp(&b)));
    let mut selected = Vec::new();
    let mut mass = 0.0;
    for id in order {
        selected.push(id);
        mass += prob_row[id];
        if mass >= p {
            break;
        }
    }
    selected
}

/// Route a batch through a static baseline. The gate may carry virtual
/// columns (so parameters can be shared with the dynamic router); only the
/// real columns participate.
pub fn route_baseline(
    tape: &mut Tape,
    tp: &TapeParams,
    gate: &GatingNetwork,
    h: Var,
    cfg: &BaselineConfig,
) -> Result<BaselineBatch> {
    cfg.validate(gate.e_real)?;
    let all_logits = gate.logits(tape, tp, h)?;
    let logits = if gate.e_virtual > 0 {
        tape.col_range(all_logits, 0, gate.e_real)?
    } else {
        all_logits
    };
    tape.value(logits).validate_finite("baseline logits")?;
    let probs = tape.softmax_rows(logits);

    let n = tape.value(logits).rows();
    let e_real = gate.e_real;
    let mut mask = Matrix::zeros(n, e_real);
    let mut decisions = Vec::with_capacity(n);
    for i in 0..n {
        let selected = match cfg.kind {
            BaselineKind::TopK(k) => select_top_k(tape.value(logits).row(i), k),
            BaselineKind::TopP(p) => select_top_p(tape.value(probs).row(i), p),
        };
        for &id in &selected {
            mask.set(i, id, 1.0);
        }
        let k_hat = selected.len();
        decisions.push(RoutingDecision {
            k_hat,
            k_real: k_hat,
            k_virtual: 0,
            selected,
            gamma: Vec::new(), // filled below
            w: None,
            modulated_logits: tape.value(logits).row(i).to_vec(),
            probs: tape.value(probs).row(i).to_vec(),
        });
    }

    // same sigmoid-normalized combination as the dynamic router
    let sig = tape.sigmoid(logits);
    let masked = tape.mask_mul(sig, mask.clone())?;
    let row_sums = tape.row_sum_range(masked, 0, e_real)?;
    let denom = tape.add_const(row_sums, cfg.eps);
    let normed = tape.div_col_broadcast(masked, denom)?;
    let gamma = tape.scale(normed, cfg.lambda);

    for (i, d) in decisions.iter_mut().enumerate() {
        d.gamma = d
            .selected
            .iter()
            .map(|&id| tape.value(gamma).get(i, id))
            .collect();
    }

    Ok(BaselineBatch {
        logits,
        probs,
        gamma,
        mask,
        decisions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{ParamSet, Rng, sigmoid};
    use crate::routing::{route, RouterConfig};

    fn gate_with_params(d: usize, e_real: usize, e_virtual: usize, seed: u64) -> (GatingNetwork, ParamSet) {
        let gate = GatingNetwork::new(d, e_real, e_virtual);
        let mut ps = ParamSet::new();
        gate.init_params(&mut ps, &mut Rng::new(seed));
        (gate, ps)
    }

    #[test]
    fn top_k_hand_oracle() {
        assert_eq!(select_top_k(&[3.0, 1.0, 2.0], 2), vec![0, 2]);
        // k = e_real selects everyone, best first
        assert_eq!(select_top_k(&[3.0, 1.0, 2.0], 3), vec![0, 2, 1]);
        // ties go to the lower id
        assert_eq!(select_top_k(&[1.0, 2.0, 2.0, 0.0], 2), vec![1, 2]);
    }

    #[test]
    fn top_p_hand_oracle() {
        // probabilities [0.6, 0.3, 0.1]
        assert_eq!(select_top_p(&[0.6, 0.3, 0.1], 0.5), vec![0]);
        assert_eq!(select_top_p(&[0.6, 0.3, 0.1], 0.7), vec![0, 1]);
        assert_eq!(select_top_p(&[0.6, 0.3, 0.1], 0.95), vec![0, 1, 2]);
        // exact crossing is inclusive
        assert_eq!(select_top_p(&[0.6, 0.3, 0.1], 0.6), vec![0]);
        // a dominant expert alone satisfies tiny thresholds
        assert_eq!(select_top_p(&[0.99, 0.01], 0.001), vec![0]);
    }

    #[test]
    fn top_p_selection_grows_with_threshold() {
        let mut rng = Rng::new(7);
        for _ in 0..50 {
            let logits: Vec<f64> = (0..6).map(|_| rng.range_f64(-2.0, 2.0)).collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|&v| (v - max).exp()).sum();
            let probs: Vec<f64> = logits.iter().map(|&v| (v - max).exp() / z).collect();
            let mut prev = 0;
            for p in [0.1, 0.3, 0.5, 0.7, 0.9, 1.0] {
                let sel = select_top_p(&probs, p);
                assert!(sel.len() >= prev.max(1));
                prev = sel.len();
            }
        }
    }

    #[test]
    fn top_k_batch_matches_sort_oracle() {
        let (gate, ps) = gate_with_params(6, 8, 0, 13);
        let mut rng = Rng::new(131);
        let h = Matrix::from_fn(64, 6, |_, _| rng.range_f64(-2.0, 2.0));
        let mut tape = Tape::new();
        let tp = tape.register_params(&ps);
        let hv = tape.constant(h);
        let cfg = BaselineConfig::top_k(3);
        let batch = route_baseline(&mut tape, &tp, &gate, hv, &cfg).unwrap();
        for (i, d) in batch.decisions.iter().enumerate() {
            // independent oracle: full stable sort of (logit, id) pairs
            let row = tape.value(batch.logits).row(i);
            let mut pairs: Vec<(f64, usize)> = row.iter().cloned().zip(0..8).collect();
            pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let expect: Vec<usize> = pairs.iter().take(3).map(|&(_, id)| id).collect();
            assert_eq!(d.selected, expect, "token {i}");
            // gamma matches the closed form on the selected set
            let ssum: f64 = expect.iter().map(|&id| sigmoid(row[id])).sum();
            for (&id, &g) in expect.iter().zip(d.gamma.iter()) {
                let want = sigmoid(row[id]) / (ssum + 1e-8);
                assert!((g - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn top_k_rejects_k_beyond_real_experts() {
        let (gate, ps) = gate_with_params(4, 4, 0, 19);
        let mut tape = Tape::new();
        let tp = tape.register_params(&ps);
        let h = tape.constant(Matrix::zeros(2, 4));
        let cfg = BaselineConfig::top_k(5);
        match route_baseline(&mut tape, &tp, &gate, h, &cfg) {
            Err(Error::Config(_)) => {}
            other => panic!("expected config error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn virtual_gate_columns_are_ignored() {
        // same gate.w real block, extra virtual columns: selections identical
        let (gate_full, ps_full) = gate_with_params(5, 6, 4, 23);
        let gate_real = GatingNetwork::new(5, 6, 0);
        let mut ps_real = ParamSet::new();
        let full_w = ps_full.get("gate.w").unwrap();
        ps_real.insert("gate.w", Matrix::from_fn(5, 6, |i, j| full_w.get(i, j)));
        ps_real.insert("gate.b", Matrix::zeros(1, 6));

        let mut rng = Rng::new(231);
        let h = Matrix::from_fn(16, 5, |_, _| rng.range_f64(-1.0, 1.0));
        let cfg = BaselineConfig::top_k(2);

        let mut t1 = Tape::new();
        let tp1 = t1.register_params(&ps_full);
        let h1 = t1.constant(h.clone());
        let b1 = route_baseline(&mut t1, &tp1, &gate_full, h1, &cfg).unwrap();

        let mut t2 = Tape::new();
        let tp2 = t2.register_params(&ps_real);
        let h2 = t2.constant(h);
        let b2 = route_baseline(&mut t2, &tp2, &gate_real, h2, &cfg).unwrap();

        for (d1, d2) in b1.decisions.iter().zip(b2.decisions.iter()) {
            assert_eq!(d1.selected, d2.selected);
        }
    }

    #[test]
    fn dynamic_router_degenerates_to_top_k() {
        // alpha = 0, no virtual experts, k_min = k_max = 3: the dynamic
        // router and the top-k baseline must pick identical experts with
        // identical gammas
        let (gate, ps) = gate_with_params(6, 8, 0, 29);
        let mut rng = Rng::new(291);
        let h = Matrix::from_fn(32, 6, |_, _| rng.range_f64(-1.5, 1.5));
        let w = Matrix::filled(32, 1, 0.5);

        let mut t1 = Tape::new();
        let tp1 = t1.register_params(&ps);
        let h1 = t1.constant(h.clone());
        let w1 = t1.constant(w);
        let rcfg = RouterConfig {
            k_min: 3,
            k_max: 3,
            e_real: 8,
            e_virtual: 0,
            rho_max: 0.0,
            alpha: 0.0,
            lambda: 1.0,
            eps: 1e-8,
            budget_scale: 1.0,
        };
        let dynamic = route(&mut t1, &tp1, &gate, h1, w1, &rcfg).unwrap();

        let mut t2 = Tape::new();
        let tp2 = t2.register_params(&ps);
        let h2 = t2.constant(h);
        let baseline = route_baseline(&mut t2, &tp2, &gate, h2, &BaselineConfig::top_k(3)).unwrap();

        for (d, b) in dynamic.decisions.iter().zip(baseline.decisions.iter()) {
            assert_eq!(d.selected, b.selected);
            for (&gd, &gb) in d.gamma.iter().zip(b.gamma.iter()) {
                assert_eq!(gd, gb); // exact: identical arithmetic path
            }
        }
    }
}
