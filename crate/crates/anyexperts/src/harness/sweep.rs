//! Budget sweeps: evaluation-only passes at reduced inference budgets plus
//! separately trained static Top-K baselines for comparison at matched
//! average activation.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::harness::data::SyntheticStream;
use crate::harness::model::LayerMode;
use crate::harness::train::{evaluate, train, TrainState};

/// Candidate baseline widths; widths above `e_real` are skipped.
pub const BASELINE_KS: &[usize] = &[4, 6, 8, 10];

/// One evaluated operating point.
#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    /// "anyexperts" for dynamic rows, "topkN" for baseline rows.
    pub label: String,
    /// Budget scale for dynamic rows; absent for baselines.
    pub budget_scale: Option<f64>,
    pub avg_k_hat: f64,
    pub avg_k_real: f64,
    pub virtual_share: f64,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    /// CSV with a header row; floats at full 64-bit precision.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("label,budget_scale,avg_k_hat,avg_k_real,virtual_share,loss,accuracy\n");
        for r in &self.rows {
            let scale = match r.budget_scale {
                Some(s) => format!("{s:.16e}"),
                None => String::new(),
            };
            out.push_str(&format!(
                "{},{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}\n",
                r.label, scale, r.avg_k_hat, r.avg_k_real, r.virtual_share, r.loss, r.accuracy
            ));
        }
        out
    }

    /// Dynamic rows only, in report order.
    pub fn dynamic_rows(&self) -> impl Iterator<Item = &SweepRow> {
        self.rows.iter().filter(|r| r.budget_scale.is_some())
    }
}

/// Evaluate a trained dynamic model at each budget scale (descending) and
/// train fresh Top-K baselines on the same stream for the comparison rows.
/// Scales above 1.0 are clamped to 1.0; non-positive scales are rejected.
pub fn budget_sweep(
    state: &TrainState,
    stream: &SyntheticStream,
    scales: &[f64],
) -> Result<SweepReport> {
    if scales.is_empty() {
        return Err(Error::Contract("budget_sweep needs at least one scale".to_string()));
    }
    if state.model.mode != LayerMode::AnyExperts {
        return Err(Error::Contract(
            "budget_sweep requires a dynamically routed model".to_string(),
        ));
    }
    let mut clamped: Vec<f64> = Vec::with_capacity(scales.len());
    for &s in scales {
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::Config(format!("budget scale must be > 0, got {s}")));
        }
        let s = s.min(1.0);
        if !clamped.contains(&s) {
            clamped.push(s);
        }
    }
    clamped.sort_by(|a, b| b.total_cmp(a));

    let mut rows = Vec::new();
    for &s in &clamped {
        let m = evaluate(state, stream, Some(s))?;
        rows.push(SweepRow {
            label: "anyexperts".to_string(),
            budget_scale: Some(s),
            avg_k_hat: m.avg_k_hat,
            avg_k_real: m.avg_k_real,
            virtual_share: m.virtual_share,
            loss: m.loss,
            accuracy: m.accuracy,
        });
    }

    for &k in BASELINE_KS {
        if k > state.model.cfg.e_real {
            continue;
        }
        let mut bstate = TrainState::new(state.model.cfg.clone(), LayerMode::TopK(k))?;
        train(&mut bstate, stream, state.model.cfg.steps, state.model.cfg.lr)?;
        let m = evaluate(&bstate, stream, None)?;
        rows.push(SweepRow {
            label: format!("topk{k}"),
            budget_scale: None,
            avg_k_hat: m.avg_k_hat,
            avg_k_real: m.avg_k_real,
            virtual_share: m.virtual_share,
            loss: m.loss,
            accuracy: m.accuracy,
        });
    }

    Ok(SweepReport { rows })
}
