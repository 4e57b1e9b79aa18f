//! Run configuration with `key = value` file support.

use std::path::Path;

use crate::affinity::Metric;
use crate::error::{Error, Result};
use crate::parallel::Execution;
use crate::rerank::{ExpansionConfig, DEFAULT_BETA, DEFAULT_DELTA};
use crate::solver::CdsConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub alpha_margin: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub theta: f64,
    pub beta: f64,
    pub delta: f64,
    pub k_expand: Option<usize>,
    /// Extra constraints promoted during expansion.
    pub expanders: usize,
    pub metric: Metric,
    pub seed: u64,
    /// Scale the affinity so its largest entry is 1 before solving.
    pub normalize: bool,
    pub execution: Execution,
}

impl Default for RunConfig {
    fn default() -> Self {
        let cds = CdsConfig::default();
        Self {
            alpha_margin: cds.alpha_margin,
            tol: cds.tol,
            max_iter: cds.max_iter,
            theta: cds.theta,
            beta: DEFAULT_BETA,
            delta: DEFAULT_DELTA,
            k_expand: None,
            expanders: 1,
            metric: Metric::Dot,
            seed: 0,
            normalize: false,
            execution: Execution::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("bad value `{value}` for `{key}`")))
}

impl RunConfig {
    pub fn cds(&self) -> CdsConfig {
        CdsConfig {
            alpha_margin: self.alpha_margin,
            tol: self.tol,
            max_iter: self.max_iter,
            theta: self.theta,
            execution: self.execution,
            ..CdsConfig::default()
        }
    }

    pub fn expansion(&self) -> Result<ExpansionConfig> {
        let k = self
            .k_expand
            .ok_or_else(|| Error::InvalidArgument("k required for expansion".into()))?;
        Ok(ExpansionConfig {
            cds: self.cds(),
            k,
            expanders: self.expanders,
        })
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha_margin", self.alpha_margin),
            ("tol", self.tol),
        ] {
            if !(v > 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.theta >= 0.0) {
            return Err(Error::InvalidArgument("theta must be >= 0".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidArgument("max_iter must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::InvalidArgument(format!("beta must lie in [0, 1], got {}", self.beta)));
        }
        if !self.delta.is_finite() {
            return Err(Error::InvalidArgument("delta must be finite".into()));
        }
        if self.expanders == 0 {
            return Err(Error::InvalidArgument("expanders must be at least 1".into()));
        }
        Ok(())
    }

    /// Sets one field by name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "alpha_margin" => self.alpha_margin = parse(key, value)?,
            "tol" => self.tol = parse(key, value)?,
            "max_iter" => self.max_iter = parse(key, value)?,
            "theta" => self.theta = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "delta" => self.delta = parse(key, value)?,
            "k_expand" => self.k_expand = Some(parse(key, value)?),
            "expanders" => self.expanders = parse(key, value)?,
            "metric" => self.metric = value.parse()?,
            "seed" => self.seed = parse(key, value)?,
            "normalize" => self.normalize = parse(key, value)?,
            other => return Err(Error::InvalidArgument(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidArgument(format!("config line {}: expected key = value", n + 1))
            })?;
            let value = value.trim().trim_matches('"');
            self.set(key.trim(), value)
                .map_err(|e| Error::InvalidArgument(format!("config line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_str(&text)
    }
}
