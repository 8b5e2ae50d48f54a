//! Flat key-value run configuration.
//!
//! One `key = value` pair per line; `#` starts a comment; blank lines are
//! skipped. Every key has a default, unknown keys are rejected with the line
//! number, and serialization is canonical (fixed key order, shortest
//! round-trip float formatting) so identical configs produce identical bytes.

use crate::error::{Error, Result};
use crate::importance::EstimatorArch;
use crate::routing::RouterConfig;

/// All knobs for a training/evaluation run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub d: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub seq_len: usize,
    pub n_sequences: usize,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub redundancy: f64,
    pub estimator: EstimatorArch,
    pub k_min: usize,
    pub k_max: usize,
    pub e_real: usize,
    pub e_virtual: usize,
    pub rho_max: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub eps: f64,
    pub budget_scale: f64,
    pub lambda_tir: f64,
    pub lambda_bal: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            d: 16,
            d_ff: 32,
            vocab: 32,
            seq_len: 32,
            n_sequences: 64,
            steps: 500,
            lr: 0.02,
            batch_size: 4,
            redundancy: 0.5,
            estimator: EstimatorArch::Default,
            k_min: 8,
            k_max: 12,
            e_real: 16,
            e_virtual: 64,
            rho_max: 0.2,
            alpha: 0.01,
            lambda: 1.0,
            eps: 1e-8,
            budget_scale: 1.0,
            lambda_tir: 0.001,
            lambda_bal: 0.01,
        }
    }
}

/// Fixed serialization order; also the complete set of accepted keys.
const KEYS: &[&str] = &[
    "seed",
    "d",
    "d_ff",
    "vocab",
    "seq_len",
    "n_sequences",
    "steps",
    "lr",
    "batch_size",
    "redundancy",
    "estimator",
    "k_min",
    "k_max",
    "e_real",
    "e_virtual",
    "rho_max",
    "alpha",
    "lambda",
    "eps",
    "budget_scale",
    "lambda_tir",
    "lambda_bal",
];

impl RunConfig {
    /// The routing-specific slice of this configuration.
    pub fn router(&self) -> RouterConfig {
        RouterConfig {
            k_min: self.k_min,
            k_max: self.k_max,
            e_real: self.e_real,
            e_virtual: self.e_virtual,
            rho_max: self.rho_max,
            alpha: self.alpha,
            lambda: self.lambda,
            eps: self.eps,
            budget_scale: self.budget_scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.router().validate()?;
        if self.d == 0 || self.d_ff == 0 {
            return Err(Error::Config("d and d_ff must be positive".to_string()));
        }
        if self.seq_len < 4 {
            return Err(Error::Config(format!(
                "seq_len must be >= 4, got {}",
                self.seq_len
            )));
        }
        if self.n_sequences == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "n_sequences and batch_size must be positive".to_string(),
            ));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.redundancy) {
            return Err(Error::Config(format!(
                "redundancy must be in [0,1), got {}",
                self.redundancy
            )));
        }
        if self.lambda_tir < 0.0 || self.lambda_bal < 0.0 {
            return Err(Error::Config(
                "loss coefficients must be non-negative".to_string(),
            ));
        }
        Ok(())
    }

    fn set(&mut self, key: &str, value: &str, line_no: usize) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str, line_no: usize) -> Result<T> {
            value.parse().map_err(|_| {
                Error::Config(format!(
                    "line {line_no}: key '{key}' has unparseable value '{value}'"
                ))
            })
        }
        match key {
            "seed" => self.seed = num(key, value, line_no)?,
            "d" => self.d = num(key, value, line_no)?,
            "d_ff" => self.d_ff = num(key, value, line_no)?,
            "vocab" => self.vocab = num(key, value, line_no)?,
            "seq_len" => self.seq_len = num(key, value, line_no)?,
            "n_sequences" => self.n_sequences = num(key, value, line_no)?,
            "steps" => self.steps = num(key, value, line_no)?,
            "lr" => self.lr = num(key, value, line_no)?,
            "batch_size" => self.batch_size = num(key, value, line_no)?,
            "redundancy" => self.redundancy = num(key, value, line_no)?,
            "estimator" => {
                self.estimator = EstimatorArch::parse(value).map_err(|_| {
                    Error::Config(format!(
                        "line {line_no}: estimator must be default|wide|deep, got '{value}'"
                    ))
                })?
            }
            "k_min" => self.k_min = num(key, value, line_no)?,
            "k_max" => self.k_max = num(key, value, line_no)?,
            "e_real" => self.e_real = num(key, value, line_no)?,
            "e_virtual" => self.e_virtual = num(key, value, line_no)?,
            "rho_max" => self.rho_max = num(key, value, line_no)?,
            "alpha" => self.alpha = num(key, value, line_no)?,
            "lambda" => self.lambda = num(key, value, line_no)?,
            "eps" => self.eps = num(key, value, line_no)?,
            "budget_scale" => self.budget_scale = num(key, value, line_no)?,
            "lambda_tir" => self.lambda_tir = num(key, value, line_no)?,
            "lambda_bal" => self.lambda_bal = num(key, value, line_no)?,
            _ => {
                return Err(Error::Config(format!(
                    "line {line_no}: unknown key '{key}'"
                )))
            }
        }
        Ok(())
    }

    /// Parse a flat key-value document on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {line_no}: expected 'key = value', got '{line}'"))
            })?;
            let key = key.trim();
            let value = value.trim();
            if key.is_empty() || value.is_empty() {
                return Err(Error::Config(format!(
                    "line {line_no}: missing {} for key '{}'",
                    if value.is_empty() { "value" } else { "name" },
                    key
                )));
            }
            if seen.iter().any(|s| s == key) {
                return Err(Error::Config(format!(
                    "line {line_no}: duplicate key '{key}'"
                )));
            }
            cfg.set(key, value, line_no)?;
            seen.push(key.to_string());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical text form: every key, fixed order, one per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for &key in KEYS {
            let value = match key {
                "seed" => self.seed.to_string(),
                "d" => self.d.to_string(),
                "d_ff" => self.d_ff.to_string(),
                "vocab" => self.vocab.to_string(),
                "seq_len" => self.seq_len.to_string(),
                "n_sequences" => self.n_sequences.to_string(),
                "steps" => self.steps.to_string(),
                "lr" => self.lr.to_string(),
                "batch_size" => self.batch_size.to_string(),
                "redundancy" => self.redundancy.to_string(),
                "estimator" => self.estimator.name().to_string(),
                "k_min" => self.k_min.to_string(),
                "k_max" => self.k_max.to_string(),
                "e_real" => self.e_real.to_string(),
                "e_virtual" => self.e_virtual.to_string(),
                "rho_max" => self.rho_max.to_string(),
                "alpha" => self.alpha.to_string(),
                "lambda" => self.lambda.to_string(),
                "eps" => self.eps.to_string(),
                "budget_scale" => self.budget_scale.to_string(),
                "lambda_tir" => self.lambda_tir.to_string(),
                "lambda_bal" => self.lambda_bal.to_string(),
                _ => unreachable!("KEYS and set() are maintained together"),
            };
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(&value);
            out.push('\n');
        }
        out
    }
}
