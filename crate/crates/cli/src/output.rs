//! Run manifests and plain-text artifacts.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use lddm_core::GridFunction;
use serde::Serialize;

use crate::CliError;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: &'static str,
    pub git: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub artifacts: Vec<PathBuf>,
    pub elapsed_seconds: f64,
    pub summary: serde_json::Value,
}

pub struct ManifestBuilder {
    command: String,
    seed: u64,
    config: serde_json::Value,
    started: Instant,
    pub artifacts: Vec<PathBuf>,
    pub summary: serde_json::Value,
}

impl ManifestBuilder {
    pub fn new(command: &str, seed: u64, config: &impl Serialize) -> Self {
        Self {
            command: command.into(),
            seed,
            config: serde_json::to_value(config).unwrap_or(serde_json::Value::Null),
            started: Instant::now(),
            artifacts: Vec::new(),
            summary: serde_json::Value::Null,
        }
    }

    pub fn artifact(&mut self, p: &Path) {
        self.artifacts.push(p.to_path_buf());
    }

    /// Writes `<out_dir>/<command>.manifest.json`.
    pub fn finish(self, out_dir: &Path) -> Result<PathBuf, CliError> {
        let m = RunManifest {
            git: git_describe(),
            version: env!("CARGO_PKG_VERSION"),
            elapsed_seconds: self.started.elapsed().as_secs_f64(),
            command: self.command,
            seed: self.seed,
            config: self.config,
            artifacts: self.artifacts,
            summary: self.summary,
        };
        let path = out_dir.join(format!("{}.manifest.json", m.command));
        let text = serde_json::to_string_pretty(&m).map_err(|e| CliError::Config(e.to_string()))?;
        std::fs::write(&path, text + "\n")?;
        Ok(path)
    }
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

/// 8-bit binary graymap of channel `c`, min to black and max to white, top
/// row first.
pub fn write_pgm(f: &GridFunction, c: usize, w: &mut impl Write) -> std::io::Result<()> {
    let (nx, ny) = (f.spec.nx, f.spec.ny);
    let vals: Vec<f64> = (0..nx * ny).map(|p| f.data[p * f.channels + c]).collect();
    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    write!(w, "P5\n{nx} {ny}\n255\n")?;
    let mut px = Vec::with_capacity(nx * ny);
    for j in (0..ny).rev() {
        for i in 0..nx {
            px.push((255.0 * (vals[j * nx + i] - lo) / span).round() as u8);
        }
    }
    w.write_all(&px)
}

/// `x,y,c0[,c1...]` for every node.
pub fn write_field_csv(f: &GridFunction, w: &mut impl Write) -> std::io::Result<()> {
    write!(w, "x,y")?;
    for c in 0..f.channels {
        write!(w, ",c{c}")?;
    }
    writeln!(w)?;
    for j in 0..f.spec.ny {
        for i in 0..f.spec.nx {
            write!(w, "{},{}", f.spec.x(i), f.spec.y(j))?;
            for c in 0..f.channels {
                write!(w, ",{:e}", f.get(i, j, c))?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

pub fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>, CliError> {
    std::fs::File::create(path).map(std::io::BufWriter::new).map_err(|e| CliError::Config(format!("cannot create {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use lddm_core::GridSpec;

    #[test]
    fn graymap_layout() {
        let f = GridFunction::from_fn(GridSpec::unit(3).unwrap(), |_, y| y);
        let mut b = Vec::new();
        write_pgm(&f, 0, &mut b).unwrap();
        let header = b"P5\n3 3\n255\n";
        assert_eq!(&b[..header.len()], header);
        // Top row (y = 1) is white.
        assert_eq!(&b[header.len()..], &[255, 255, 255, 128, 128, 128, 0, 0, 0]);
    }

    #[test]
    fn csv_rows() {
        let f = GridFunction::constant(GridSpec::unit(3).unwrap(), 2.0);
        let mut b = Vec::new();
        write_field_csv(&f, &mut b).unwrap();
        let s = String::from_utf8(b).unwrap();
        assert_eq!(s.lines().count(), 10);
        assert!(s.starts_with("x,y,c0\n0,0,2e0\n"));
    }
}
