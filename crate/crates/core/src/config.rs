//! Line-oriented `key = value` configuration files.
//!
//! `#` starts a comment, blank lines are ignored, keys are the snake-case
//! field names of the training and attack configurations, and unknown or
//! duplicate keys are errors.

use crate::attack::{AttackConfig, BoundMode, Objective, ProjectionMethod};
use crate::error::{Error, Result};
use crate::train::{BaselineMode, TrainBound, TrainConfig};
use std::path::PathBuf;

/// Parse the raw key/value pairs, preserving order.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected `key = value`, got {raw:?}",
                lineno + 1
            )));
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() || value.is_empty() {
            return Err(Error::Config(format!(
                "line {}: empty key or value",
                lineno + 1
            )));
        }
        if pairs.iter().any(|(k, _)| *k == key) {
            return Err(Error::Config(format!(
                "line {}: duplicate key {key:?}",
                lineno + 1
            )));
        }
        pairs.push((key, value));
    }
    Ok(pairs)
}

/// Training and attack configuration assembled from one config file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub attack: AttackConfig,
    /// Path of the external distance model, when `bound_mode = external`.
    pub lpips_model: Option<PathBuf>,
    /// The raw pairs, echoed into reports.
    pub pairs: Vec<(String, String)>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            attack: AttackConfig::new(0.5),
            lpips_model: None,
            pairs: Vec::new(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("key {key:?}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!(
            "key {key:?}: expected true/false, got {value:?}"
        ))),
    }
}

fn parse_usize_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|p| parse::<usize>(key, p.trim()))
        .collect()
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<RunConfig> {
        let pairs = parse_pairs(text)?;
        RunConfig::from_pairs(pairs)
    }

    pub fn from_file(path: &std::path::Path) -> Result<RunConfig> {
        RunConfig::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn from_pairs(pairs: Vec<(String, String)>) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (key, value) in &pairs {
            cfg.apply(key, value)?;
        }
        cfg.pairs = pairs;
        Ok(cfg)
    }

    /// Apply one key. Shared keys (`bound`, `seed`, `bound_mode`) set both
    /// the training and attack sides.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            // training
            "epochs" => self.train.epochs = parse(key, value)?,
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "learning_rate" => self.train.learning_rate = parse(key, value)?,
            "momentum" => self.train.momentum = parse(key, value)?,
            "weight_decay" => self.train.weight_decay = parse(key, value)?,
            "lr_drop_epochs" => self.train.lr_drop_epochs = parse_usize_list(key, value)?,
            "lr_drop_factor" => self.train.lr_drop_factor = parse(key, value)?,
            "attack_steps" => self.train.attack_steps = parse(key, value)?,
            "attack_correct_only" => self.train.attack_correct_only = parse_bool(key, value)?,
            "baseline" => {
                self.train.baseline = match value {
                    "none" => BaselineMode::None,
                    "pgd_l2" => BaselineMode::PgdL2,
                    "pgd_linf" => BaselineMode::PgdLinf,
                    _ => {
                        return Err(Error::Config(format!(
                            "key \"baseline\": expected none|pgd_l2|pgd_linf, got {value:?}"
                        )))
                    }
                }
            }
            "baseline_bound" => self.train.baseline_bound = parse(key, value)?,
            "baseline_step_size" => self.train.baseline_step_size = Some(parse(key, value)?),
            // shared
            "bound" => {
                let b: f64 = parse(key, value)?;
                self.train.bound = b;
                self.attack.bound = b;
            }
            "seed" => {
                let s: u64 = parse(key, value)?;
                self.train.seed = s;
                self.attack.seed = s;
            }
            "bound_mode" => match value {
                "self" => {
                    self.train.bound_mode = TrainBound::SelfBounded;
                    self.attack.bound_mode = BoundMode::SelfBounded;
                }
                "external" => {
                    self.attack.bound_mode = BoundMode::External;
                    // the external path arrives via `lpips_model`
                }
                _ => {
                    return Err(Error::Config(format!(
                        "key \"bound_mode\": expected self|external, got {value:?}"
                    )))
                }
            },
            "lpips_model" => {
                let path = PathBuf::from(value);
                self.train.bound_mode = TrainBound::External(path.clone());
                self.attack.bound_mode = BoundMode::External;
                self.lpips_model = Some(path);
            }
            // attack
            "steps" => self.attack.steps = parse(key, value)?,
            "cg_iterations" => self.attack.cg_iterations = parse(key, value)?,
            "lambda_rounds" => self.attack.lambda_rounds = parse(key, value)?,
            "jacobian_step" => self.attack.jacobian_step = parse(key, value)?,
            "direction_step" => self.attack.direction_step = parse(key, value)?,
            "overshoot" => self.attack.overshoot = parse(key, value)?,
            "bisection_steps" => self.attack.bisection_steps = parse(key, value)?,
            "step_size" => self.attack.step_size = Some(parse(key, value)?),
            "projection" => {
                self.attack.projection = match value {
                    "newton" => ProjectionMethod::Newton,
                    "bisection" => ProjectionMethod::Bisection,
                    _ => {
                        return Err(Error::Config(format!(
                            "key \"projection\": expected newton|bisection, got {value:?}"
                        )))
                    }
                }
            }
            "clamp_pixels" => self.attack.clamp_pixels = parse_bool(key, value)?,
            "objective" => {
                self.attack.objective = match value {
                    "margin" => Objective::Margin,
                    "cross_entropy" => Objective::CrossEntropy,
                    _ => {
                        return Err(Error::Config(format!(
                            "key \"objective\": expected margin|cross_entropy, got {value:?}"
                        )))
                    }
                }
            }
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_blanks_and_values() {
        let text = "\
# training
epochs = 3
bound = 0.25   # shared
lr_drop_epochs = 2, 3

projection = newton
attack_correct_only = true
";
        let cfg = RunConfig::from_text(text).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.bound, 0.25);
        assert_eq!(cfg.attack.bound, 0.25);
        assert_eq!(cfg.train.lr_drop_epochs, vec![2, 3]);
        assert_eq!(cfg.attack.projection, ProjectionMethod::Newton);
        assert!(cfg.train.attack_correct_only);
        assert_eq!(cfg.pairs.len(), 5);
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(matches!(
            RunConfig::from_text("nonsense = 1"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn duplicate_keys_are_errors() {
        assert!(matches!(
            RunConfig::from_text("epochs = 1\nepochs = 2"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn malformed_lines_are_errors() {
        assert!(RunConfig::from_text("epochs 3").is_err());
        assert!(RunConfig::from_text("epochs =").is_err());
        assert!(RunConfig::from_text("epochs = abc").is_err());
        assert!(RunConfig::from_text("baseline = bogus").is_err());
    }

    #[test]
    fn external_bound_mode_wires_both_sides() {
        let cfg = RunConfig::from_text("lpips_model = ext.prkm").unwrap();
        assert_eq!(cfg.attack.bound_mode, BoundMode::External);
        assert_eq!(
            cfg.train.bound_mode,
            TrainBound::External(PathBuf::from("ext.prkm"))
        );
        assert_eq!(cfg.lpips_model, Some(PathBuf::from("ext.prkm")));
    }
}
