//! Run directory layout, the writer lock, and output manifests.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const LOCK_FILE: &str = ".maskscope.lock";
/// Version of the CSV and JSON output layouts described in docs/formats.md.
pub const OUTPUT_FORMAT_VERSION: u32 = 1;

/// Paths of every artifact, relative to the output root.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: PathBuf) -> Self {
        Self { root }
    }

    pub fn profiling_traces(&self) -> PathBuf {
        self.root.join("data/profiling.traces")
    }

    pub fn attack_traces(&self) -> PathBuf {
        self.root.join("data/attack.traces")
    }

    pub fn checkpoint(&self, epoch: usize) -> PathBuf {
        self.root.join(format!("checkpoints/epoch_{epoch:04}.ckpt"))
    }

    pub fn pi_curve(&self) -> PathBuf {
        self.root.join("pi_curve.csv")
    }

    pub fn tagged(&self, dir: &str, stem: &str, epoch: usize, layer: Option<usize>, ext: &str) -> PathBuf {
        let name = match layer {
            Some(l) => format!("{stem}_epoch{epoch:04}_layer{l}.{ext}"),
            None => format!("{stem}_epoch{epoch:04}.{ext}"),
        };
        self.root.join(dir).join(name)
    }

    pub fn pca_basis(&self, epoch: usize, layer: usize) -> PathBuf {
        self.tagged("pca", "basis", epoch, Some(layer), "json")
    }

    pub fn recovered_shares(&self) -> PathBuf {
        self.root.join("recovered_shares.csv")
    }

    pub fn recovery_summary(&self) -> PathBuf {
        self.root.join("recovery.json")
    }

    pub fn snr_mask(&self) -> PathBuf {
        self.root.join("snr_mask.csv")
    }

    /// Fails with a prerequisite error naming `stage` when `path` is absent.
    pub fn require(&self, path: &Path, stage: &'static str) -> Result<()> {
        if path.is_file() {
            Ok(())
        } else {
            Err(CliError::MissingPrerequisite {
                path: path.to_path_buf(),
                stage,
            })
        }
    }

    pub fn lock(&self) -> Result<RunLock> {
        fs::create_dir_all(&self.root)
            .map_err(|e| CliError::io(format!("creating {}", self.root.display()), e))?;
        let path = self.root.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Locked { path }),
            Err(e) => Err(CliError::io(format!("creating {}", path.display()), e)),
        }
    }
}

/// Removes the lock file when dropped.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct InputRef {
    pub path: String,
    pub sha256: String,
}

/// Provenance attached to every output. Contains nothing time- or
/// host-dependent, so identical inputs give identical bytes.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub tool_version: &'static str,
    pub library_version: &'static str,
    pub output_format_version: u32,
    pub binary_format_version: u32,
    pub stage: &'static str,
    pub config_hash: String,
    pub seed: u64,
    pub epoch: Option<usize>,
    pub layer: Option<usize>,
    pub inputs: Vec<InputRef>,
}

impl Manifest {
    pub fn new(cfg: &RunConfig, stage: &'static str) -> Self {
        Self {
            tool: "maskscope",
            tool_version: env!("CARGO_PKG_VERSION"),
            library_version: maskscope::VERSION,
            output_format_version: OUTPUT_FORMAT_VERSION,
            binary_format_version: maskscope::dataset::FORMAT_VERSION,
            stage,
            config_hash: cfg.hash(),
            seed: cfg.seed,
            epoch: None,
            layer: None,
            inputs: Vec::new(),
        }
    }

    pub fn at(mut self, epoch: usize, layer: Option<usize>) -> Self {
        self.epoch = Some(epoch);
        self.layer = layer;
        self
    }

    /// Records `path` (stored relative to `root`) with its content hash.
    pub fn input(mut self, root: &Path, path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
        let rel = path.strip_prefix(root).unwrap_or(path);
        self.inputs.push(InputRef {
            path: rel.to_string_lossy().replace('\\', "/"),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        Ok(self)
    }

    fn json(&self) -> String {
        serde_json::to_string(self).expect("manifest serializes")
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)
        .and_then(|_| fs::rename(&tmp, path))
        .map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

/// Path of the manifest that accompanies a binary artifact.
pub fn manifest_path(artifact: &Path) -> PathBuf {
    let mut s = artifact.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// Writes the `.manifest.json` next to a binary artifact.
pub fn write_sidecar_manifest(artifact: &Path, m: &Manifest) -> Result<()> {
    let text = serde_json::to_string_pretty(m).expect("manifest serializes") + "\n";
    write_file(&manifest_path(artifact), text.as_bytes())
}

/// CSV with a leading `# manifest: {...}` comment line.
pub struct CsvOut {
    buf: String,
    width: usize,
}

impl CsvOut {
    pub fn new(m: &Manifest, header: &[&str]) -> Self {
        let mut buf = format!("# manifest: {}\n", m.json());
        buf.push_str(&header.join(","));
        buf.push('\n');
        Self {
            buf,
            width: header.len(),
        }
    }

    pub fn row<I, S>(&mut self, cells: I)
    where
        I: IntoIterator<Item = S>,
        S: ToString,
    {
        let cells: Vec<String> = cells.into_iter().map(|c| c.to_string()).collect();
        debug_assert_eq!(cells.len(), self.width);
        self.buf.push_str(&cells.join(","));
        self.buf.push('\n');
    }

    pub fn write(self, path: &Path) -> Result<()> {
        write_file(path, self.buf.as_bytes())
    }
}

/// Formats an optional float, empty when absent.
pub fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// JSON object `{"manifest": ..., "data": ...}`.
pub fn write_json<T: Serialize>(path: &Path, m: &Manifest, data: &T) -> Result<()> {
    #[derive(Serialize)]
    struct Doc<'a, T> {
        manifest: &'a Manifest,
        data: &'a T,
    }
    let text = serde_json::to_string_pretty(&Doc { manifest: m, data }).expect("output serializes") + "\n";
    write_file(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::new(dir.path().to_path_buf());
        let held = run.lock().unwrap();
        assert!(matches!(run.lock(), Err(CliError::Locked { .. })));
        drop(held);
        assert!(run.lock().is_ok());
    }

    #[test]
    fn missing_input_names_the_stage() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::new(dir.path().to_path_buf());
        let err = run.require(&run.profiling_traces(), "simulate").unwrap_err();
        assert!(err.to_string().contains("maskscope simulate"), "{err}");
    }

    #[test]
    fn csv_starts_with_manifest() {
        let m = Manifest::new(&RunConfig::default(), "test");
        let mut c = CsvOut::new(&m, &["a", "b"]);
        c.row([1, 2]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        c.write(&p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("# manifest: {"));
        assert_eq!(&lines[1..], &["a,b", "1,2"]);
    }
}
