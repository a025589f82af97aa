use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

/// Reproducibility record written next to every output file.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub version: &'static str,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config: impl Serialize, seed: Option<u64>) -> Result<Self> {
        Ok(Self {
            command: command.into(),
            config: serde_json::to_value(config)?,
            seed,
            version: env!("CARGO_PKG_VERSION"),
            outputs: Vec::new(),
        })
    }
}

pub fn manifest_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

pub fn to_json(value: &impl Serialize) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

/// Writes `body` to `output` (plus its manifest), or to stdout without a
/// manifest.
pub fn emit(output: Option<&Path>, body: &str, mut manifest: RunManifest, extra: &[PathBuf]) -> Result<()> {
    match output {
        None => {
            print!("{body}");
            Ok(())
        }
        Some(path) => {
            fs::write(path, body).with_context(|| format!("writing {}", path.display()))?;
            manifest.outputs.push(path.display().to_string());
            manifest.outputs.extend(extra.iter().map(|p| p.display().to_string()));
            let mp = manifest_path(path);
            fs::write(&mp, to_json(&manifest)?).with_context(|| format!("writing {}", mp.display()))?;
            Ok(())
        }
    }
}

/// Number formatting for CSV cells: 9 significant digits, shortest form.
pub fn fmt9(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    let rounded: f64 = format!("{x:.8e}").parse().expect("formatted float parses");
    format!("{rounded}")
}

pub fn fmt9_opt(x: Option<f64>) -> String {
    x.map(fmt9).unwrap_or_default()
}
