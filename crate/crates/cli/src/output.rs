use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::job::Job;
use crate::CliError;

/// Shortest decimal that parses back to the same `f64`. Always `.` as the
/// decimal separator; `NaN`, `inf` and `-inf` for non-finite values.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// A CSV table built in memory.
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn row(&mut self, cells: Vec<String>) {
        debug_assert_eq!(cells.len(), self.header.len());
        self.rows.push(cells);
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, csv::Error> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.into_inner().map_err(|e| e.into_error().into())
    }
}

/// Everything a job produces, before it is written out.
#[derive(Default)]
pub struct Artifacts {
    pub files: Vec<(String, Vec<u8>)>,
    pub timings: Vec<(String, f64)>,
    pub step_times: Vec<f64>,
}

impl Artifacts {
    pub fn add_table(&mut self, name: &str, table: Table) -> Result<(), CliError> {
        let bytes = table.to_bytes().map_err(|e| CliError::Io { path: name.into(), source: e.into() })?;
        self.add_file(name, bytes);
        Ok(())
    }

    pub fn add_file(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.to_string(), bytes));
    }

    pub fn time(&mut self, label: &str, since: Instant) {
        self.timings.push((label.to_string(), since.elapsed().as_secs_f64()));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub subcommand: String,
    pub version: String,
    pub master_seed: u64,
    pub argv: Vec<String>,
    pub job: Job,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub outputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replayed_from: Option<String>,
}

pub const MANIFEST: &str = "manifest.json";
pub const TIMINGS: &str = "timings.json";

pub fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

/// Writes outputs, the timing sidecar and the manifest into `dir`.
pub fn write_run(dir: &Path, mut manifest: Manifest, art: &Artifacts) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (name, bytes) in &art.files {
        let path = dir.join(name);
        std::fs::write(&path, bytes).map_err(io_err(&path))?;
        log::info!("wrote {}", path.display());
    }
    let timings = serde_json::json!({
        "phases": art.timings.iter().map(|(k, v)| (k.clone(), serde_json::Value::from(*v))).collect::<serde_json::Map<_, _>>(),
        "step_wall_time_s": art.step_times,
    });
    let path = dir.join(TIMINGS);
    std::fs::write(&path, serde_json::to_vec_pretty(&timings).expect("timings serialise")).map_err(io_err(&path))?;
    manifest.outputs = art.files.iter().map(|(n, _)| n.clone()).collect();
    manifest.finished_unix = unix_now();
    let path = dir.join(MANIFEST);
    std::fs::write(&path, serde_json::to_vec_pretty(&manifest).expect("manifest serialises")).map_err(io_err(&path))?;
    Ok(path)
}

pub fn read_manifest(path: &Path) -> Result<Manifest, CliError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Manifest(e.to_string()))
}
