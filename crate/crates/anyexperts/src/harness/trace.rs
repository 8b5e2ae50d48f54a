//! Importance-trace export: per-token importance records plus per-span
//! aggregates over contiguous image-like runs, emitted as heatmap-ready data.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::harness::data::{Modality, SyntheticStream};
use crate::harness::model::LayerMode;
use crate::harness::train::TrainState;
use crate::numerics::Tape;

/// One token's importance and allocation outcome.
#[derive(Clone, Debug, Serialize)]
pub struct TraceRecord {
    pub sequence: usize,
    pub position: usize,
    pub modality: Modality,
    pub informative: bool,
    pub w: f64,
    pub k_hat: usize,
    pub k_real: usize,
}

/// Sum of importance over one contiguous image-like span.
#[derive(Clone, Debug, Serialize)]
pub struct SpanAggregate {
    pub sequence: usize,
    pub start: usize,
    pub len: usize,
    pub w_sum: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ImportanceTrace {
    pub records: Vec<TraceRecord>,
    pub spans: Vec<SpanAggregate>,
}

impl ImportanceTrace {
    /// One JSON object per line, records before spans, each span tagged.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).map_err(|e| Error::Internal(e.to_string()))?);
            out.push('\n');
        }
        for s in &self.spans {
            let mut v = serde_json::to_value(s).map_err(|e| Error::Internal(e.to_string()))?;
            v.as_object_mut()
                .expect("span serializes to an object")
                .insert("span".to_string(), serde_json::Value::Bool(true));
            out.push_str(&v.to_string());
            out.push('\n');
        }
        Ok(out)
    }
}

/// Run the model over the whole stream and export per-token importance.
/// Only dynamically routed models carry importance weights.
pub fn export_importance_trace(
    state: &TrainState,
    stream: &SyntheticStream,
) -> Result<ImportanceTrace> {
    if state.model.mode != LayerMode::AnyExperts {
        return Err(Error::Contract(
            "importance traces require a dynamically routed model".to_string(),
        ));
    }
    let all: Vec<usize> = (0..stream.sequences.len()).collect();
    let (ids, targets, _) = stream.flatten(&all);
    if ids.is_empty() {
        return Err(Error::Contract("trace on empty stream".to_string()));
    }
    let mut tape = Tape::new();
    let tp = tape.register_params(&state.params);
    let fwd = state.model.forward(&mut tape, &tp, &ids, &targets)?;

    let mut records = Vec::with_capacity(ids.len());
    let mut flat = 0usize;
    for (si, seq) in stream.sequences.iter().enumerate() {
        for (pos, tok) in seq.tokens.iter().enumerate() {
            let d = &fwd.decisions[flat];
            records.push(TraceRecord {
                sequence: si,
                position: pos,
                modality: tok.modality,
                informative: tok.informative,
                w: d.w.ok_or_else(|| {
                    Error::Internal("dynamic decision missing importance weight".to_string())
                })?,
                k_hat: d.k_hat,
                k_real: d.k_real,
            });
            flat += 1;
        }
    }

    // contiguous image-like runs per sequence
    let mut spans = Vec::new();
    let mut idx = 0usize;
    for (si, seq) in stream.sequences.iter().enumerate() {
        let mut run_start: Option<usize> = None;
        let mut run_sum = 0.0;
        for (pos, tok) in seq.tokens.iter().enumerate() {
            let w = records[idx].w;
            idx += 1;
            if tok.modality == Modality::ImageLike {
                if run_start.is_none() {
                    run_start = Some(pos);
                    run_sum = 0.0;
                }
                run_sum += w;
            } else if let Some(start) = run_start.take() {
                spans.push(SpanAggregate {
                    sequence: si,
                    start,
                    len: pos - start,
                    w_sum: run_sum,
                });
            }
        }
        if let Some(start) = run_start {
            spans.push(SpanAggregate {
                sequence: si,
                start,
                len: seq.tokens.len() - start,
                w_sum: run_sum,
            });
        }
    }

    Ok(ImportanceTrace { records, spans })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::harness::data::generate;

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
            n_sequences: 6,
            steps: 5,
            batch_size: 2,
            ..RunConfig::default()
        }
    }

    #[test]
    fn zero_initialized_estimator_gives_half_everywhere() {
        let cfg = tiny_cfg();
        let stream = generate(cfg.seed, cfg.n_sequences, cfg.seq_len, cfg.vocab, 0.5).unwrap();
        let state = TrainState::new(cfg, LayerMode::AnyExperts).unwrap();
        let trace = export_importance_trace(&state, &stream).unwrap();
        assert!(trace.records.iter().all(|r| r.w == 0.5));
    }

    #[test]
    fn record_count_equals_token_count() {
        let cfg = tiny_cfg();
        let stream = generate(cfg.seed, cfg.n_sequences, cfg.seq_len, cfg.vocab, 0.25).unwrap();
        let state = TrainState::new(cfg, LayerMode::AnyExperts).unwrap();
        let trace = export_importance_trace(&state, &stream).unwrap();
        assert_eq!(trace.records.len(), stream.n_tokens());
    }

    #[test]
    fn span_sums_match_member_recomputation() {
        let cfg = tiny_cfg();
        let stream = generate(cfg.seed, cfg.n_sequences, cfg.seq_len, cfg.vocab, 0.5).unwrap();
        let state = TrainState::new(cfg, LayerMode::AnyExperts).unwrap();
        let trace = export_importance_trace(&state, &stream).unwrap();
        assert!(!trace.spans.is_empty());
        for span in &trace.spans {
            let expect: f64 = trace
                .records
                .iter()
                .filter(|r| {
                    r.sequence == span.sequence
                        && r.position >= span.start
                        && r.position < span.start + span.len
                })
                .map(|r| {
                    assert_eq!(r.modality, Modality::ImageLike);
                    r.w
                })
                .sum();
            assert!((span.w_sum - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn baseline_models_are_rejected() {
        let cfg = tiny_cfg();
        let stream = generate(cfg.seed, cfg.n_sequences, cfg.seq_len, cfg.vocab, 0.5).unwrap();
        let state = TrainState::new(cfg, LayerMode::TopK(2)).unwrap();
        assert!(export_importance_trace(&state, &stream).is_err());
    }

    #[test]
    fn jsonl_has_one_object_per_record_and_span() {
        let cfg = tiny_cfg();
        let stream = generate(cfg.seed, 2, 12, cfg.vocab, 0.5).unwrap();
        let state = TrainState::new(cfg, LayerMode::AnyExperts).unwrap();
        let trace = export_importance_trace(&state, &stream).unwrap();
        let text = trace.to_jsonl().unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), trace.records.len() + trace.spans.len());
        for line in lines {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v.is_object());
        }
    }
}
