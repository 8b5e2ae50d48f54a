//! Token importance estimation.
//!
//! A LayerNorm followed by a small MLP maps each token's hidden state to a
//! raw score `s`, squashed to a weight `w = sigmoid(s)` in (0,1). The weight
//! both amplifies the hidden state through a residual fusion
//! `h' = h + alpha * w * h` and later drives slot allocation and routing
//! bias. A mean-squared-weight regularizer keeps scores from inflating.

use crate::error::{Error, Result};
use crate::numerics::{Matrix, ParamSet, Rng, Tape, TapeParams, Var};

/// LayerNorm stabilizer used inside the estimator.
pub const ESTIMATOR_LN_EPS: f64 = 1e-5;

/// Estimator MLP shapes. All end in a single scalar score per token.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EstimatorArch {
    /// d -> ceil(d/4) -> 1 with ReLU.
    Default,
    /// d -> d -> 1 with ReLU.
    Wide,
    /// d -> ceil(d/4) -> ceil(d/4) -> 1 with ReLU.
    Deep,
}

impl EstimatorArch {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(EstimatorArch::Default),
            "wide" => Ok(EstimatorArch::Wide),
            "deep" => Ok(EstimatorArch::Deep),
            other => Err(Error::Config(format!(
                "unknown estimator variant '{other}' (expected default|wide|deep)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            EstimatorArch::Default => "default",
            EstimatorArch::Wide => "wide",
            EstimatorArch::Deep => "deep",
        }
    }
}

/// Per-layer MLP architecture plus the LayerNorm in front of it.
/// Parameters live in a [`ParamSet`] under `<prefix>.gain`, `<prefix>.bias`,
/// `<prefix>.l<i>.w`, `<prefix>.l<i>.b`.
#[derive(Clone, Debug)]
pub struct ImportanceEstimator {
    pub d: usize,
    pub arch: EstimatorArch,
    prefix: String,
}

impl ImportanceEstimator {
    pub fn new(d: usize, arch: EstimatorArch) -> Self {
        ImportanceEstimator {
            d,
            arch,
            prefix: "est".to_string(),
        }
    }

    /// (in, out) dims per MLP layer. The last layer always has width 1.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let d = self.d;
        let q = d.div_ceil(4).max(1);
        match self.arch {
            EstimatorArch::Default => vec![(d, q), (q, 1)],
            EstimatorArch::Wide => vec![(d, d), (d, 1)],
            EstimatorArch::Deep => vec![(d, q), (q, q), (q, 1)],
        }
    }

    /// LayerNorm affine starts at identity (gain 1, bias 0). Hidden layers
    /// are uniform in +-1/sqrt(fan_in); the final layer is zero so every
    /// token starts at w = 0.5 and the initial slot count sits at the
    /// midpoint of [k_min, k_max].
    pub fn init_params(&self, ps: &mut ParamSet, rng: &mut Rng) {
        ps.insert(&format!("{}.gain", self.prefix), Matrix::filled(1, self.d, 1.0));
        ps.insert(&format!("{}.bias", self.prefix), Matrix::zeros(1, self.d));
        let dims = self.layer_dims();
        let last = dims.len() - 1;
        for (i, (fan_in, fan_out)) in dims.into_iter().enumerate() {
            let (w, b) = if i == last {
                (Matrix::zeros(fan_in, fan_out), Matrix::zeros(1, fan_out))
            } else {
                let a = 1.0 / (fan_in as f64).sqrt();
                (
                    Matrix::from_fn(fan_in, fan_out, |_, _| rng.range_f64(-a, a)),
                    Matrix::zeros(1, fan_out),
                )
            };
            ps.insert(&format!("{}.l{}.w", self.prefix, i), w);
            ps.insert(&format!("{}.l{}.b", self.prefix, i), b);
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec![
            format!("{}.gain", self.prefix),
            format!("{}.bias", self.prefix),
        ];
        for i in 0..self.layer_dims().len() {
            names.push(format!("{}.l{}.w", self.prefix, i));
            names.push(format!("{}.l{}.b", self.prefix, i));
        }
        names
    }
}

/// Tape handles for one estimation pass over a batch.
#[derive(Clone, Copy, Debug)]
pub struct ImportanceVars {
    /// Raw per-token scores, Nx1.
    pub s: Var,
    /// Sigmoid weights in (0,1), Nx1.
    pub w: Var,
    /// Fused hidden states `h * (1 + alpha*w)` rowwise, NxD.
    pub h_fused: Var,
}

/// Run the estimator over a batch of hidden states (one row per token) and
/// fuse the weights back into the hidden states.
pub fn estimate(
    tape: &mut Tape,
    tp: &TapeParams,
    est: &ImportanceEstimator,
    h: Var,
    alpha: f64,
) -> Result<ImportanceVars> {
    let hm = tape.value(h);
    if hm.rows() == 0 {
        return Err(Error::Contract("estimate on empty batch".to_string()));
    }
    if hm.cols() != est.d {
        return Err(Error::dim("estimate", hm.shape(), (hm.rows(), est.d)));
    }
    if alpha < 0.0 {
        return Err(Error::Config(format!("alpha must be >= 0, got {alpha}")));
    }

    let gain = tp.var("est.gain")?;
    let bias = tp.var("est.bias")?;
    let mut cur = tape.layer_norm(h, gain, bias, ESTIMATOR_LN_EPS)?;
    let n_layers = est.layer_dims().len();
    for i in 0..n_layers {
        let w = tp.var(&format!("est.l{i}.w"))?;
        let b = tp.var(&format!("est.l{i}.b"))?;
        cur = tape.matmul(cur, w)?;
        cur = tape.add_row_vec(cur, b)?;
        if i + 1 < n_layers {
            cur = tape.relu(cur);
        }
    }
    let s = cur;
    let w = tape.sigmoid(s);
    let wh = tape.mul_col_broadcast(h, w)?;
    let scaled = tape.scale(wh, alpha);
    let h_fused = tape.add(h, scaled)?;
    tape.value(h_fused).validate_finite("importance h_fused")?;
    Ok(ImportanceVars { s, w, h_fused })
}

/// Mean squared importance weight over the batch.
pub fn tir_loss(tape: &mut Tape, w: Var) -> Result<Var> {
    if tape.value(w).is_empty() {
        return Err(Error::Contract("tir_loss on empty batch".to_string()));
    }
    let sq = tape.square(w);
    tape.mean(sq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::sigmoid;

    fn setup(d: usize, arch: EstimatorArch, seed: u64) -> (ImportanceEstimator, ParamSet) {
        let est = ImportanceEstimator::new(d, arch);
        let mut ps = ParamSet::new();
        est.init_params(&mut ps, &mut Rng::new(seed));
        (est, ps)
    }

    fn run(
        est: &ImportanceEstimator,
        ps: &ParamSet,
        h: Matrix,
        alpha: f64,
    ) -> (Tape, ImportanceVars) {
        let mut tape = Tape::new();
        let tp = tape.register_params(ps);
        let hv = tape.constant(h);
        let vars = estimate(&mut tape, &tp, est, hv, alpha).unwrap();
        (tape, vars)
    }

    #[test]
    fn zero_alpha_leaves_hidden_states_untouched() {
        let (est, ps) = setup(4, EstimatorArch::Default, 1);
        let h = Matrix::from_fn(3, 4, |i, j| (i * 4 + j) as f64 - 5.0);
        let (tape, vars) = run(&est, &ps, h.clone(), 0.0);
        assert_eq!(tape.value(vars.h_fused), &h);
    }

    #[test]
    fn zero_init_gives_half_weight_everywhere() {
        let (est, ps) = setup(6, EstimatorArch::Default, 2);
        let h = Matrix::from_fn(5, 6, |i, j| (i as f64) * 0.3 - (j as f64) * 0.7);
        let (tape, vars) = run(&est, &ps, h, 0.01);
        for &w in tape.value(vars.w).data() {
            assert_eq!(w, 0.5);
        }
        for &s in tape.value(vars.s).data() {
            assert_eq!(s, 0.0);
        }
    }

    #[test]
    fn fusion_factor_matches_hand_value() {
        // w = 0.5 from zero init, alpha = 0.01 -> factor 1.005
        let (est, ps) = setup(2, EstimatorArch::Default, 3);
        let h = Matrix::new(1, 2, vec![2.0, -2.0]).unwrap();
        let (tape, vars) = run(&est, &ps, h, 0.01);
        let hf = tape.value(vars.h_fused);
        assert!((hf.get(0, 0) - 2.01).abs() < 1e-12);
        assert!((hf.get(0, 1) + 2.01).abs() < 1e-12);
    }

    #[test]
    fn w_is_sigmoid_of_s() {
        let (est, mut ps) = setup(4, EstimatorArch::Wide, 4);
        // randomize the final layer so scores vary
        let mut rng = Rng::new(9);
        for v in ps.get_mut("est.l1.w").unwrap().data_mut() {
            *v = rng.range_f64(-1.0, 1.0);
        }
        let mut rng2 = Rng::new(10);
        let h = Matrix::from_fn(8, 4, |_, _| rng2.range_f64(-2.0, 2.0));
        let (tape, vars) = run(&est, &ps, h, 0.5);
        let s = tape.value(vars.s);
        let w = tape.value(vars.w);
        for i in 0..8 {
            assert!((w.get(i, 0) - sigmoid(s.get(i, 0))).abs() < 1e-15);
            assert!(w.get(i, 0) > 0.0 && w.get(i, 0) < 1.0);
        }
    }

    #[test]
    fn layer_norm_shift_invariance_of_scores() {
        let (est, mut ps) = setup(4, EstimatorArch::Default, 5);
        let mut rng = Rng::new(12);
        for v in ps.get_mut("est.l1.w").unwrap().data_mut() {
            *v = rng.range_f64(-1.0, 1.0);
        }
        let mut rng2 = Rng::new(13);
        let h = Matrix::from_fn(4, 4, |_, _| rng2.range_f64(-1.0, 1.0));
        let shifted = h.map(|x| x + 3.25);
        let (tape_a, va) = run(&est, &ps, h, 0.01);
        let (tape_b, vb) = run(&est, &ps, shifted, 0.01);
        // LayerNorm removes the mean, so scores match to rounding
        let diff = tape_a
            .value(va.s)
            .max_abs_diff(tape_b.value(vb.s))
            .unwrap();
        assert!(diff < 1e-9, "shift changed scores by {diff}");
    }

    #[test]
    fn monotone_fusion_norm_in_score() {
        // same direction h, larger w => larger fused norm when alpha > 0
        let (_est, ps) = setup(3, EstimatorArch::Default, 6);
        let h = Matrix::new(2, 3, vec![1.0, 2.0, -1.0, 1.0, 2.0, -1.0]).unwrap();
        let mut tape = Tape::new();
        let tp = tape.register_params(&ps);
        let hv = tape.constant(h);
        // bypass the MLP: fuse with hand-built weights 0.9 vs 0.1
        let w = tape.constant(Matrix::col_vec(vec![0.9, 0.1]));
        let wh = tape.mul_col_broadcast(hv, w).unwrap();
        let scaled = tape.scale(wh, 0.5);
        let fused = tape.add(hv, scaled).unwrap();
        let _ = tp;
        let f = tape.value(fused);
        let norm = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm(f.row(0)) > norm(f.row(1)));
    }

    #[test]
    fn tir_loss_values() {
        let mut tape = Tape::new();
        let w = tape.constant(Matrix::col_vec(vec![0.5, 0.5]));
        let loss = tir_loss(&mut tape, w).unwrap();
        assert!((tape.scalar(loss) - 0.25).abs() < 1e-15);

        // limits: w -> 1 and w -> 0 average to 0.5
        let w2 = tape.constant(Matrix::col_vec(vec![1.0, 0.0]));
        let loss2 = tir_loss(&mut tape, w2).unwrap();
        assert!((tape.scalar(loss2) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn tir_loss_seeded_recomputation() {
        let mut rng = Rng::new(16);
        let scores: Vec<f64> = (0..16).map(|_| rng.range_f64(-3.0, 3.0)).collect();
        let ws: Vec<f64> = scores.iter().map(|&s| sigmoid(s)).collect();
        let mut tape = Tape::new();
        let w = tape.constant(Matrix::col_vec(ws.clone()));
        let loss = tir_loss(&mut tape, w).unwrap();
        let expect = ws.iter().map(|&w| w * w).sum::<f64>() / 16.0;
        assert!((tape.scalar(loss) - expect).abs() < 1e-15);
    }

    #[test]
    fn tir_loss_empty_batch_errors() {
        let mut tape = Tape::new();
        let w = tape.constant(Matrix::zeros(0, 1));
        assert!(tir_loss(&mut tape, w).is_err());
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let (est, ps) = setup(4, EstimatorArch::Default, 7);
        let mut tape = Tape::new();
        let tp = tape.register_params(&ps);
        let hv = tape.constant(Matrix::zeros(2, 5));
        assert!(estimate(&mut tape, &tp, &est, hv, 0.01).is_err());
    }

    #[test]
    fn tir_gradient_matches_finite_differences() {
        let (est, mut ps) = setup(4, EstimatorArch::Default, 8);
        let mut rng = Rng::new(21);
        for v in ps.get_mut("est.l1.w").unwrap().data_mut() {
            *v = rng.range_f64(-0.5, 0.5);
        }
        let mut rng2 = Rng::new(22);
        let h = Matrix::from_fn(6, 4, |_, _| rng2.range_f64(-1.5, 1.5));

        let run = |ps: &ParamSet| -> crate::error::Result<(f64, ParamSet)> {
            let mut tape = Tape::new();
            let tp = tape.register_params(ps);
            let hv = tape.constant(h.clone());
            let vars = estimate(&mut tape, &tp, &est, hv, 0.01)?;
            let loss = tir_loss(&mut tape, vars.w)?;
            let value = tape.scalar(loss);
            let grads = tape.backward(loss)?;
            Ok((value, grads))
        };
        let (_, analytic) = run(&ps).unwrap();
        let report = crate::numerics::check_gradients(
            |p| run(p).map(|(v, _)| v),
            &ps,
            &analytic,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "{report}");
    }
}
