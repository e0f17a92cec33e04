//! Flag-over-file settings resolution and the exit-code convention.

use std::path::Path;
use std::process::ExitCode;
use std::str::FromStr;

use serde::de::DeserializeOwned;

/// Keys accepted in the config file; each mirrors a long flag with `-`
/// replaced by `_`.
const KNOWN_KEYS: &[&str] = &[
    "adapt_window",
    "age_bands",
    "aggregate",
    "allow_nonconverged",
    "burn_in",
    "by_year",
    "chains",
    "draws",
    "episodes",
    "expected_floor",
    "fdr",
    "fit_manifest",
    "fix_rho",
    "iterations",
    "level",
    "month_model",
    "neighbor_order",
    "observed_mode",
    "out",
    "panel",
    "preset",
    "profile",
    "proximity",
    "ridge_year",
    "samples_per_month",
    "scenario",
    "seed",
    "thin",
    "window_days",
    "years",
];

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    pub fn preprocessing(message: impl Into<String>) -> Self {
        Self { code: 3, message: message.into() }
    }

    pub fn inference(message: impl Into<String>) -> Self {
        Self { code: 4, message: message.into() }
    }

    pub fn report(&self) -> ExitCode {
        eprintln!("error: {}", self.message);
        ExitCode::from(self.code)
    }
}

impl From<mcar::Error> for Failure {
    fn from(e: mcar::Error) -> Self {
        use mcar::Error::*;
        let code = match e {
            Config(_) | Schema(_) | Dimension(_) | Io(_) | Csv(_) | Json(_) | NotSymmetric { .. } => 2,
            MalformedRecord { .. } | InsufficientData { .. } | Separation { .. } | EmptyMonth { .. } => 3,
            NotPositiveDefinite { .. } | NonFiniteDensity(_) | TooFewDraws { .. } => 4,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::config(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Self::config(e.to_string())
    }
}

pub type Outcome<T = ()> = Result<T, Failure>;

/// Settings from the optional config file, consulted when a flag is absent.
#[derive(Debug, Default)]
pub struct Layers {
    table: toml::Table,
}

impl Layers {
    pub fn load(path: Option<&Path>) -> Outcome<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::config(format!("cannot read config {}: {e}", path.display())))?;
        let table: toml::Table =
            toml::from_str(&text).map_err(|e| Failure::config(format!("config {}: {e}", path.display())))?;
        for (key, value) in &table {
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(Failure::config(format!("unknown config key {key:?}")));
            }
            if value.is_table() {
                return Err(Failure::config(format!("config key {key:?}: sections are not supported")));
            }
        }
        Ok(Self { table })
    }

    fn from_file<T: DeserializeOwned>(&self, key: &str) -> Outcome<Option<T>> {
        self.table
            .get(key)
            .map(|v| v.clone().try_into().map_err(|e| Failure::config(format!("config key {key:?}: {e}"))))
            .transpose()
    }

    /// Flag value, else config value, else `None`.
    pub fn opt<T: DeserializeOwned>(&self, flag: Option<T>, key: &str) -> Outcome<Option<T>> {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.from_file(key),
        }
    }

    pub fn or<T: DeserializeOwned>(&self, flag: Option<T>, key: &str, default: T) -> Outcome<T> {
        Ok(self.opt(flag, key)?.unwrap_or(default))
    }

    pub fn required<T: DeserializeOwned>(&self, flag: Option<T>, key: &str) -> Outcome<T> {
        self.opt(flag, key)?
            .ok_or_else(|| Failure::config(format!("--{} is required", key.replace('_', "-"))))
    }

    /// Boolean switch: set by the flag or by the config file.
    pub fn switch(&self, flag: bool, key: &str) -> Outcome<bool> {
        Ok(flag || self.from_file(key)?.unwrap_or(false))
    }

    /// A string setting parsed with `FromStr`.
    pub fn parsed<T: FromStr>(&self, flag: Option<String>, key: &str) -> Outcome<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.opt(flag, key)?
            .map(|s| s.parse().map_err(|e: T::Err| Failure::config(format!("{key}: {e}"))))
            .transpose()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layers(text: &str) -> Outcome<Layers> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, text).unwrap();
        Layers::load(Some(&path))
    }

    #[test]
    fn flags_override_file() {
        let l = layers("seed = 7\nproximity = \"auto\"\n").unwrap();
        assert_eq!(l.or(None, "seed", 0u64).unwrap(), 7);
        assert_eq!(l.or(Some(9), "seed", 0u64).unwrap(), 9);
        assert_eq!(l.or(None, "thin", 20usize).unwrap(), 20);
        assert_eq!(l.opt::<String>(None, "proximity").unwrap().as_deref(), Some("auto"));
    }

    #[test]
    fn unknown_keys_and_bad_types_are_config_errors() {
        assert_eq!(layers("sed = 7").unwrap_err().code, 2);
        assert_eq!(layers("[fit]\nseed = 7").unwrap_err().code, 2);
        let l = layers("seed = \"x\"").unwrap();
        assert_eq!(l.opt::<u64>(None, "seed").unwrap_err().code, 2);
    }

    #[test]
    fn error_classes_map_to_exit_codes() {
        let f: Failure = mcar::Error::Schema("x".into()).into();
        assert_eq!(f.code, 2);
        let f: Failure = mcar::Error::MalformedRecord { line: 3, reason: "x".into() }.into();
        assert_eq!(f.code, 3);
        let f: Failure = mcar::Error::TooFewDraws { needed: 1, have: 0 }.into();
        assert_eq!(f.code, 4);
    }
}
