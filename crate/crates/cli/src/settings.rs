//! Flag / config-file merging.
//!
//! A config file holds `key = value` lines whose keys are the long flag names of
//! the chosen subcommand (underscores are accepted for dashes). Flags given on
//! the command line win over the file, the file wins over built-in defaults.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Flag,
    File,
    Default,
}

impl Display for Source {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Source::Flag => "flag",
            Source::File => "config",
            Source::Default => "default",
        })
    }
}

#[derive(Debug, Default)]
pub struct Settings {
    file: BTreeMap<String, String>,
    resolved: Vec<(String, String, Source)>,
    out_dir: Option<PathBuf>,
}

pub fn parse_config(text: &str, allowed: &[String]) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CliError::Usage(format!(
                "config line {}: expected key=value, found '{line}'",
                no + 1
            )));
        };
        let key = key.trim().replace('_', "-");
        if !allowed.contains(&key) {
            return Err(CliError::Usage(format!(
                "config line {}: unknown key '{key}' (allowed: {})",
                no + 1,
                allowed.join(", ")
            )));
        }
        if out.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(CliError::Usage(format!(
                "config line {}: duplicate key '{key}'",
                no + 1
            )));
        }
    }
    Ok(out)
}

impl Settings {
    pub fn new(file: BTreeMap<String, String>, out_dir: Option<PathBuf>) -> Self {
        Self {
            file,
            resolved: Vec::new(),
            out_dir,
        }
    }

    pub fn with_out_dir(mut self, out_dir: Option<PathBuf>) -> Self {
        self.out_dir = out_dir;
        self
    }

    fn file_value<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        self.file
            .get(key)
            .map(|raw| {
                raw.parse::<T>()
                    .map_err(|e| CliError::Usage(format!("config key '{key}': cannot parse '{raw}': {e}")))
            })
            .transpose()
    }

    fn record(&mut self, key: &str, value: String, source: Source) {
        self.resolved.push((key.to_string(), value, source));
    }

    /// Flag, then config file, then `default`.
    pub fn value<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        let (v, src) = match (flag, self.file_value(key)?) {
            (Some(v), _) => (v, Source::Flag),
            (None, Some(v)) => (v, Source::File),
            (None, None) => (default, Source::Default),
        };
        self.record(key, v.to_string(), src);
        Ok(v)
    }

    pub fn optional<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        let (v, src) = match (flag, self.file_value(key)?) {
            (Some(v), _) => (Some(v), Source::Flag),
            (None, Some(v)) => (Some(v), Source::File),
            (None, None) => (None, Source::Default),
        };
        let shown = v.as_ref().map_or_else(|| "(none)".to_string(), |v| v.to_string());
        self.record(key, shown, src);
        Ok(v)
    }

    pub fn required<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        self.optional(key, flag)?
            .ok_or_else(|| CliError::Usage(format!("missing required setting --{key}")))
    }

    pub fn input_path(&mut self, key: &str, flag: Option<PathBuf>) -> Result<PathBuf, CliError> {
        Ok(self.required::<Shown>(key, flag.map(Shown))?.0)
    }

    pub fn optional_input(&mut self, key: &str, flag: Option<PathBuf>) -> Result<Option<PathBuf>, CliError> {
        Ok(self.optional::<Shown>(key, flag.map(Shown))?.map(|s| s.0))
    }

    /// Output paths are placed under `--output-dir` when relative.
    pub fn output_path(
        &mut self,
        key: &str,
        flag: Option<PathBuf>,
        default: Option<PathBuf>,
    ) -> Result<Option<PathBuf>, CliError> {
        let p = match default {
            Some(d) => Some(self.value::<Shown>(key, flag.map(Shown), Shown(d))?.0),
            None => self.optional::<Shown>(key, flag.map(Shown))?.map(|s| s.0),
        };
        Ok(p.map(|p| self.place(&p)))
    }

    fn place(&self, p: &Path) -> PathBuf {
        match &self.out_dir {
            Some(dir) if p.is_relative() => dir.join(p),
            _ => p.to_path_buf(),
        }
    }

    /// Prints every resolved setting with where it came from.
    pub fn report(&self, command: &str) {
        eprintln!("jid {command}");
        let width = self.resolved.iter().map(|(k, _, _)| k.len()).max().unwrap_or(0);
        for (k, v, s) in &self.resolved {
            eprintln!("  {k:<width$} = {v}  [{s}]");
        }
    }
}

/// Path wrapper with `FromStr` + `Display`.
#[derive(Debug, Clone)]
struct Shown(PathBuf);

impl FromStr for Shown {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(Shown(PathBuf::from(s)))
    }
}

impl Display for Shown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0.display())
    }
}
