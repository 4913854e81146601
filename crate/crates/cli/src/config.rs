//! Line-oriented `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys must be unique
//! and drawn from the set the command accepts.
//!
//! Training keys: `variant`, `ny`, `iters`, `tol`, `seed`, `anneal`,
//! `hyperopt_every`, `mindiv_every`, `whiten`, and the prior
//! hyperparameters `a_alpha`, `b_alpha`, `beta`, `a_w`, `b_w`, `nu`,
//! `psi0_scale`. Simulation keys: `d`, `ny`, `spec_seed`.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use bsplda::AnnealStep;

use crate::CliError;

pub const FIT_KEYS: &[&str] = &["iters", "tol", "seed", "anneal", "hyperopt_every", "mindiv_every"];
pub const TRAIN_KEYS: &[&str] = &[
    "variant",
    "ny",
    "whiten",
    "a_alpha",
    "b_alpha",
    "beta",
    "a_w",
    "b_w",
    "nu",
    "psi0_scale",
];
pub const ADAPT_KEYS: &[&str] = &["variant"];
pub const SPEC_KEYS: &[&str] = &["d", "ny", "spec_seed"];

#[derive(Debug, Default, Clone, PartialEq)]
pub struct Config {
    entries: BTreeMap<String, String>,
}

impl Config {
    pub fn parse(text: &str, allowed: &[&[&str]]) -> Result<Self, CliError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::input(format!("config line {}: expected `key = value`", i + 1)))?;
            let key = key.trim();
            if !allowed.iter().any(|set| set.contains(&key)) {
                return Err(CliError::input(format!("config line {}: unknown key `{key}`", i + 1)));
            }
            if entries.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(CliError::input(format!("config line {}: duplicate key `{key}`", i + 1)));
            }
        }
        Ok(Config { entries })
    }

    pub fn load(path: &Path, allowed: &[&[&str]]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::input(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, allowed)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.entries
            .get(key)
            .map(|v| {
                v.parse()
                    .map_err(|e| CliError::input(format!("config key `{key}`: cannot parse `{v}`: {e}")))
            })
            .transpose()
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }
}

/// Parses `"k1:n1,k2:n2,..."`.
pub fn parse_anneal(s: &str) -> Result<Vec<AnnealStep>, CliError> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|step| {
            let bad = || CliError::input(format!("annealing step `{step}` must be `kappa:iterations`"));
            let (k, n) = step.trim().split_once(':').ok_or_else(bad)?;
            Ok(AnnealStep {
                kappa: k.trim().parse().map_err(|_| bad())?,
                iterations: n.trim().parse().map_err(|_| bad())?,
            })
        })
        .collect()
}
