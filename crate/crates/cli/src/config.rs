//! `key = value` experiment files.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use zed::eval::StatisticChoice;
use zed::net::NetConfig;
use zed::trainer::TrainConfig;

/// Keys accepted in a config file.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "u64 seed for every random choice (default 0)"),
    ("threads", "worker threads (default: all cores)"),
    (
        "stat",
        "decision statistic: d0, abs_d0, delta01, abs_delta01 (default abs_delta01)",
    ),
    ("threshold", "fixed decision threshold for evaluate"),
    (
        "target_fpr",
        "calibration false-positive rate in (0, 0.5] (default 0.05)",
    ),
    (
        "sweep_points",
        "points kept in reported sweep curves, 0 = all (default 200)",
    ),
    ("steps", "training steps (default 20000)"),
    ("batch_size", "crops per step (default 16)"),
    ("crop_size", "training crop side, multiple of 8 (default 64)"),
    ("learning_rate", "Adam step size (default 0.001)"),
    ("beta1", "Adam first-moment decay (default 0.9)"),
    ("beta2", "Adam second-moment decay (default 0.999)"),
    ("adam_epsilon", "Adam denominator offset (default 1e-8)"),
    (
        "level_weights",
        "three comma-separated loss weights for levels 0,1,2 (default 1,1,1)",
    ),
    ("log_every", "steps between training log records (default 50)"),
    ("mixtures", "logistic components per channel (default 10)"),
    ("trunk_depth", "3x3 convolutions per level trunk (default 4)"),
    ("trunk_channels", "trunk width (default 32)"),
    ("head_width", "hidden units per position head (default 64)"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Parsed but uninterpreted key/value pairs, in file order of first use.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    pub values: BTreeMap<String, String>,
}

pub fn parse_config(text: &str, origin: &Path) -> Result<ConfigFile, ConfigError> {
    let mut values = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let at = || format!("{}:{}", origin.display(), n + 1);
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| ConfigError(format!("{}: expected `key = value`", at())))?;
        let (key, value) = (key.trim(), value.trim());
        if !KEYS.iter().any(|(k, _)| *k == key) {
            return Err(ConfigError(format!("{}: unknown key {key:?}", at())));
        }
        if value.is_empty() {
            return Err(ConfigError(format!("{}: empty value for {key}", at())));
        }
        if values.insert(key.to_string(), value.to_string()).is_some() {
            return Err(ConfigError(format!("{}: {key} given twice", at())));
        }
    }
    Ok(ConfigFile { values })
}

/// Fully resolved settings: defaults, then the config file, then flags.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub seed: u64,
    pub threads: Option<usize>,
    pub stat: StatisticChoice,
    pub threshold: Option<f64>,
    pub target_fpr: f64,
    pub sweep_points: usize,
    pub train: TrainConfig,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            seed: 0,
            threads: None,
            stat: StatisticChoice::AbsDelta01,
            threshold: None,
            target_fpr: 0.05,
            sweep_points: 200,
            train: TrainConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| ConfigError(format!("invalid value {value:?} for {key}: {e}")))
}

impl Settings {
    /// Applies every key of `file` on top of `self`.
    pub fn apply_file(&mut self, file: &ConfigFile) -> Result<(), ConfigError> {
        for (key, value) in &file.values {
            self.apply(key, value)?;
        }
        Ok(())
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let t = &mut self.train;
        let net: &mut NetConfig = &mut t.net;
        match key {
            "seed" => self.seed = parse(key, value)?,
            "threads" => self.threads = Some(parse(key, value)?),
            "stat" => self.stat = value.parse().map_err(|e: zed::Error| ConfigError(e.to_string()))?,
            "threshold" => self.threshold = Some(parse(key, value)?),
            "target_fpr" => self.target_fpr = parse(key, value)?,
            "sweep_points" => self.sweep_points = parse(key, value)?,
            "steps" => t.steps = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "crop_size" => t.crop_size = parse(key, value)?,
            "learning_rate" => t.learning_rate = parse(key, value)?,
            "beta1" => t.beta1 = parse(key, value)?,
            "beta2" => t.beta2 = parse(key, value)?,
            "adam_epsilon" => t.epsilon = parse(key, value)?,
            "log_every" => t.log_every = parse(key, value)?,
            "level_weights" => {
                let parts = value
                    .split(',')
                    .map(|p| parse::<f64>(key, p.trim()))
                    .collect::<Result<Vec<_>, _>>()?;
                t.level_weights = parts
                    .try_into()
                    .map_err(|_| ConfigError(format!("level_weights needs exactly 3 values, got {value:?}")))?;
            }
            "mixtures" => net.mixtures = parse(key, value)?,
            "trunk_depth" => net.trunk_depth = parse(key, value)?,
            "trunk_channels" => net.trunk_channels = parse(key, value)?,
            "head_width" => net.head_width = parse(key, value)?,
            _ => return Err(ConfigError(format!("unknown key {key:?}"))),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blank_lines() {
        let text = "# experiment\nseed = 7\n\nsteps=100   # short run\nlevel_weights = 1, 0.5, 0\n";
        let file = parse_config(text, Path::new("exp.conf")).unwrap();
        let mut s = Settings::default();
        s.apply_file(&file).unwrap();
        assert_eq!(s.seed, 7);
        assert_eq!(s.train.steps, 100);
        assert_eq!(s.train.level_weights, [1.0, 0.5, 0.0]);
    }

    #[test]
    fn rejects_unknown_and_malformed_lines() {
        let err = parse_config("seed = 1\nsede = 2\n", Path::new("x.conf")).unwrap_err();
        assert!(err.0.contains("x.conf:2") && err.0.contains("sede"), "{err}");
        assert!(parse_config("seed\n", Path::new("x")).is_err());
        assert!(parse_config("seed = 1\nseed = 2\n", Path::new("x")).is_err());
        assert!(parse_config("seed =\n", Path::new("x")).is_err());
    }

    #[test]
    fn rejects_bad_values() {
        let mut s = Settings::default();
        assert!(s.apply("seed", "-1").is_err());
        assert!(s.apply("stat", "d7").is_err());
        assert!(s.apply("level_weights", "1,2").is_err());
        s.apply("stat", "abs_d0").unwrap();
        assert_eq!(s.stat, StatisticChoice::AbsD0);
    }
}
