//! Flag/config-file resolution and JSON-line logging.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde_json::{json, Map, Value};
use unloadlab_core::{Error, Result};

pub const SEED_ENV: &str = "UNLOADLAB_SEED";

/// Parses flat `key = value` text. Keys are case-insensitive and `-` is
/// read as `_`; `#` starts a comment; values may be double-quoted.
pub fn parse_config_text(text: &str, path: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) if !raw[..i].contains('"') => &raw[..i],
            _ => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(path, format!("line {}: expected `key = value`", n + 1)))?;
        let key = normalize_key(k);
        if key.is_empty() {
            return Err(Error::parse(path, format!("line {}: empty key", n + 1)));
        }
        let v = v.trim();
        let v = v.strip_prefix('"').and_then(|s| s.strip_suffix('"')).unwrap_or(v);
        if out.insert(key.clone(), v.to_string()).is_some() {
            return Err(Error::parse(path, format!("line {}: duplicate key {key}", n + 1)));
        }
    }
    Ok(out)
}

fn normalize_key(k: &str) -> String {
    k.trim().to_ascii_lowercase().replace('-', "_")
}

pub fn parse_bool(s: &str) -> Option<bool> {
    match s.to_ascii_lowercase().as_str() {
        "true" | "on" | "yes" | "1" => Some(true),
        "false" | "off" | "no" | "0" => Some(false),
        _ => None,
    }
}

/// Seed precedence: flag, config file, environment, zero.
pub fn resolve_seed(flag: Option<u64>, file: Option<&str>, env: Option<&str>) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Some(s) = file {
        return s.trim().parse().map_err(|_| Error::Config(format!("seed {s:?} is not an unsigned integer")));
    }
    if let Some(s) = env {
        return s
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer")));
    }
    Ok(0)
}

/// Resolved run settings. Every lookup is recorded so the run can log the
/// configuration it actually used.
#[derive(Debug, Default)]
pub struct Settings {
    file: BTreeMap<String, String>,
    used: BTreeSet<String>,
    resolved: Map<String, Value>,
}

impl Settings {
    pub fn new(file: BTreeMap<String, String>) -> Self {
        Settings {
            file,
            ..Default::default()
        }
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Ok(Self::new(parse_config_text(&text, p)?))
            }
        }
    }

    fn from_file<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        self.used.insert(key.to_string());
        match self.file.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("config key {key}: cannot parse {v:?}"))),
        }
    }

    fn record<T: Display>(&mut self, key: &str, v: &T) {
        let s = v.to_string();
        let val = if let Ok(i) = s.parse::<i64>() {
            json!(i)
        } else {
            s.parse::<f64>()
                .ok()
                .and_then(serde_json::Number::from_f64)
                .map(Value::Number)
                .unwrap_or(Value::String(s))
        };
        self.resolved.insert(key.to_string(), val);
    }

    pub fn opt<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>> {
        self.used.insert(key.to_string());
        let v = match flag {
            Some(v) => Some(v),
            None => self.from_file(key)?,
        };
        match &v {
            Some(x) => self.record(key, x),
            None => {
                self.resolved.insert(key.to_string(), Value::Null);
            }
        }
        Ok(v)
    }

    pub fn get<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T> {
        let v = self.opt(key, flag)?.unwrap_or(default);
        self.record(key, &v);
        Ok(v)
    }

    pub fn require<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<T> {
        self.opt(key, flag)?.ok_or_else(|| {
            Error::Config(format!("missing {key}: pass --{} or set it in the config file", key.replace('_', "-")))
        })
    }

    pub fn path(&mut self, key: &str, flag: Option<PathBuf>) -> Result<Option<PathBuf>> {
        self.used.insert(key.to_string());
        let v = match flag {
            Some(p) => Some(p),
            None => self.from_file::<String>(key)?.map(PathBuf::from),
        };
        let shown = v.as_ref().map_or(Value::Null, |p| Value::String(p.display().to_string()));
        self.resolved.insert(key.to_string(), shown);
        Ok(v)
    }

    pub fn require_path(&mut self, key: &str, flag: Option<PathBuf>) -> Result<PathBuf> {
        self.path(key, flag)?.ok_or_else(|| {
            Error::Config(format!("missing {key}: pass --{} or set it in the config file", key.replace('_', "-")))
        })
    }

    /// Boolean switch: a present flag wins, else the file, else false.
    pub fn switch(&mut self, key: &str, flag: bool) -> Result<bool> {
        self.used.insert(key.to_string());
        let v = if flag {
            true
        } else {
            match self.file.get(key) {
                None => false,
                Some(s) => parse_bool(s).ok_or_else(|| Error::Config(format!("config key {key}: {s:?} is not a boolean")))?,
            }
        };
        self.resolved.insert(key.to_string(), Value::Bool(v));
        Ok(v)
    }

    pub fn seed(&mut self, flag: Option<u64>) -> Result<u64> {
        self.used.insert("seed".into());
        let env = std::env::var(SEED_ENV).ok();
        let s = resolve_seed(flag, self.file.get("seed").map(String::as_str), env.as_deref())?;
        self.resolved.insert("seed".into(), json!(s));
        Ok(s)
    }

    pub fn unused_keys(&self) -> Vec<String> {
        self.file.keys().filter(|k| !self.used.contains(*k)).cloned().collect()
    }

    pub fn resolved(&self) -> &Map<String, Value> {
        &self.resolved
    }

    /// Logs the resolved configuration and any file keys the command ignored.
    pub fn log_resolved(&self, command: &str) {
        for k in self.unused_keys() {
            log::warn!("config key {k} is not used by {command}");
        }
        log::info!("resolved config {}", json!({ "command": command, "config": self.resolved() }));
    }
}

pub fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, rec| {
            let line = json!({
                "ts": buf.timestamp_millis().to_string(),
                "level": rec.level().as_str(),
                "target": rec.target(),
                "msg": rec.args().to_string(),
            });
            writeln!(buf, "{line}")
        })
        .init();
}

/// Structured error line for a failed run.
pub fn error_line(e: &Error) -> String {
    json!({
        "level": "ERROR",
        "kind": e.kind(),
        "exit_code": e.exit_code(),
        "msg": e.to_string(),
    })
    .to_string()
}
