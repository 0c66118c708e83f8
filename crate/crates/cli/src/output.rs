//! Config loading and artifact writing.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use nalgebra::DVector;
use nuvmpc::scenarios::{ScenarioConfig, ScenarioRun};
use serde::Serialize;

use crate::ConfigSource;

/// Reproducibility record stored verbatim in every run summary.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub config_path: Option<PathBuf>,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub tool_version: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

impl RunManifest {
    pub fn new(config_path: Option<PathBuf>, seed: u64, out_dir: PathBuf) -> Self {
        RunManifest {
            command: std::env::args().collect(),
            config_path,
            seed,
            out_dir,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }
}

/// Parses and validates the selected scenario config. Returns it together
/// with the file it came from.
pub fn load_config(src: &ConfigSource) -> anyhow::Result<(ScenarioConfig, Option<PathBuf>)> {
    if let Some(name) = &src.scenario {
        let cfg = ScenarioConfig::defaults(name).with_context(|| format!("unknown scenario {name:?}"))?;
        return Ok((cfg, None));
    }
    let path = src
        .path
        .as_ref()
        .or(src.config.as_ref())
        .context("no scenario given: pass a config file or --scenario")?;
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let cfg = ScenarioConfig::from_json(&text).with_context(|| format!("invalid config {}", path.display()))?;
    cfg.validate().with_context(|| format!("invalid config {}", path.display()))?;
    Ok((cfg, Some(path.clone())))
}

/// Floats carry 17 significant digits so the CSV round-trips exactly.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_field(s: &str) -> String {
    s.chars().map(|c| if c == ',' || c.is_whitespace() { '_' } else { c }).collect()
}

fn push_row(out: &mut String, k: usize, groups: [Option<&DVector<f64>>; 3], widths: [usize; 3]) {
    out.push_str(&k.to_string());
    for (g, w) in groups.iter().zip(widths) {
        for i in 0..w {
            out.push(',');
            out.push_str(&fmt_f64(g.map_or(f64::NAN, |v| v[i])));
        }
    }
    out.push('\n');
}

/// Trace CSV: `k`, the inputs, the outputs and the states, one row per step.
pub fn trace_csv(run: &ScenarioRun) -> String {
    let nu = run.u.first().map_or(0, |v| v.len());
    let ny = run.y.first().map_or(0, |v| v.len());
    let nx = run.x.first().map_or(0, |v| v.len());
    let label = |labels: &[String], prefix: &str, i: usize| {
        labels.get(i).map(|s| csv_field(s)).unwrap_or_else(|| format!("{prefix}{i}"))
    };
    let mut header = vec!["k".to_string()];
    header.extend((0..nu).map(|i| label(&run.u_labels, "u", i)));
    header.extend((0..ny).map(|i| label(&run.y_labels, "y", i)));
    header.extend((0..nx).map(|i| format!("x{i}")));
    let mut out = header.join(",");
    out.push('\n');
    for k in 0..run.horizon() {
        push_row(&mut out, k, [run.u.get(k), run.y.get(k), run.x.get(k)], [nu, ny, nx]);
    }
    out
}

/// Writes every file or none: contents are staged next to their targets and
/// renamed into place only after all of them were written.
pub fn write_all(dir: &Path, files: &[(String, Vec<u8>)]) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let mut staged = Vec::new();
    let result = (|| {
        for (name, bytes) in files {
            let tmp = dir.join(format!(".{name}.partial"));
            staged.push(tmp.clone());
            fs::write(&tmp, bytes).with_context(|| format!("cannot write {}", tmp.display()))?;
        }
        for ((name, _), tmp) in files.iter().zip(&staged) {
            fs::rename(tmp, dir.join(name)).with_context(|| format!("cannot write {}", dir.join(name).display()))?;
        }
        Ok(())
    })();
    if result.is_err() {
        for tmp in &staged {
            let _ = fs::remove_file(tmp);
        }
    }
    result
}
