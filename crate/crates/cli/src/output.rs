use std::fs::{self, OpenOptions};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use mtc_core::config::{TrainConfig, KEYS};
use mtc_core::MtcError;

use crate::{CliError, CODE_VERSION};

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub const FILE: &'static str = ".mtc.lock";

    pub fn acquire(out: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(out)?;
        let path = out.join(Self::FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(CliError::Core(MtcError::Contract(format!(
                "{} is in use by another mtc process (delete {} if that process is gone)",
                out.display(),
                path.display()
            )))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Flat `key=value` record written beside a command's outputs. Everything
/// except the `timestamp` line is a function of the inputs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        let mut m = Self::default();
        m.push("command", command);
        m.push("code_version", CODE_VERSION);
        m
    }

    pub fn push(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn push_config(&mut self, config: &TrainConfig) {
        for (k, _) in KEYS {
            self.push(k, config.get(k).expect("known key"));
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn render(&self, timestamp: u64) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            s.push_str(&format!("{k}={v}\n"));
        }
        s.push_str(&format!("timestamp={timestamp}\n"));
        s
    }

    pub fn parse(text: &str) -> Self {
        let mut m = Self::default();
        for line in text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                if k != "timestamp" {
                    m.push(k.trim(), v.trim());
                }
            }
        }
        m
    }

    /// Writes `<dir>/<stem>.manifest`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<PathBuf, CliError> {
        let ts = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        let path = dir.join(format!("{stem}.manifest"));
        fs::write(&path, self.render(ts))?;
        Ok(path)
    }

    /// The training config recorded in a `train` manifest.
    pub fn train_config(&self) -> Result<TrainConfig, MtcError> {
        let mut c = TrainConfig::default();
        for (k, _) in KEYS {
            if let Some(v) = self.get(k) {
                c.set(k, v)?;
            }
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_roundtrip_drops_only_the_timestamp() {
        let mut c = TrainConfig::default();
        c.set("algo", "rpc").unwrap();
        c.set("ip", "-0.25").unwrap();
        let mut m = Manifest::new("train");
        m.push_config(&c);
        let text = m.render(17);
        assert_eq!(text.lines().filter(|l| l.starts_with("timestamp=")).count(), 1);
        let back = Manifest::parse(&text);
        assert_eq!(back, m);
        assert_eq!(back.train_config().unwrap(), c);
        assert_eq!(m.render(1).replace("timestamp=1", "timestamp=17"), text);
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let lock = OutputLock::acquire(dir.path()).unwrap();
        let err = OutputLock::acquire(dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        drop(lock);
        assert!(!dir.path().join(OutputLock::FILE).exists());
        OutputLock::acquire(dir.path()).unwrap();
    }
}
