//! Plain-text experiment configuration files: one `key=value` per line,
//! `#` comments, unknown keys rejected.

use crate::error::{Error, Result};
use crate::train::{ExperimentConfig, Mode};
use std::path::Path;

/// Applies a config file on top of a base configuration. Recognized keys:
/// mode, epochs, learning_rate, batch_size, seed, theta, gamma,
/// thresholding, k, tau.
pub fn apply_config_file(path: &Path, cfg: &mut ExperimentConfig) -> Result<()> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    apply_config_text(&text, cfg)
}

pub fn apply_config_text(text: &str, cfg: &mut ExperimentConfig) -> Result<()> {
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected key=value, got '{line}'", lineno + 1))
        })?;
        let (key, value) = (key.trim(), value.trim());
        let bad = |what: &str| Error::Config(format!("line {}: bad {what} '{value}'", lineno + 1));
        match key {
            // Setting the mode re-applies its hyperparameter defaults
            // (e.g. the BLA-T gamma); later keys still override them.
            "mode" => {
                let seed = cfg.seed;
                let mode = Mode::parse(value)?;
                let defaults = ExperimentConfig::new(mode, seed);
                cfg.mode = mode;
                cfg.bla.gamma = defaults.bla.gamma;
            }
            "epochs" => cfg.epochs = value.parse().map_err(|_| bad("epochs"))?,
            "learning_rate" => {
                cfg.learning_rate = value.parse().map_err(|_| bad("learning_rate"))?
            }
            "batch_size" => cfg.batch_size = value.parse().map_err(|_| bad("batch_size"))?,
            "seed" => cfg.seed = value.parse().map_err(|_| bad("seed"))?,
            "theta" => cfg.bla.theta = value.parse().map_err(|_| bad("theta"))?,
            "gamma" => cfg.bla.gamma = value.parse().map_err(|_| bad("gamma"))?,
            "thresholding" => {
                cfg.bla.thresholding = value.parse().map_err(|_| bad("thresholding"))?
            }
            "k" => cfg.l2x.k = value.parse().map_err(|_| bad("k"))?,
            "tau" => cfg.l2x.tau = value.parse().map_err(|_| bad("tau"))?,
            other => {
                return Err(Error::Config(format!(
                    "line {}: unknown config key '{other}'",
                    lineno + 1
                )))
            }
        }
    }
    cfg.validate()
}
