//! CSV and JSON artifacts, the observation reader and the run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use smc_core::Observation;

use crate::error::CliError;

/// Manifest format identifier.
pub const MANIFEST_FORMAT: &str = "smc-run-manifest/1";
pub const MANIFEST_FILE: &str = "run_manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Shortest representation that parses back to the same value.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn indexed(prefix: &str, d: usize) -> Vec<String> {
    (1..=d).map(|j| format!("{prefix}{j}")).collect()
}

/// In-memory CSV table.
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: Vec<String>) -> Self {
        Table { header, rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    fn to_bytes(&self) -> Vec<u8> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        w.into_inner().expect("in-memory flush")
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OutputEntry {
    pub file: String,
    pub schema: String,
    pub sha256: String,
}

/// Files written into the output directory by one run.
pub struct OutputSet {
    dir: PathBuf,
    entries: Vec<OutputEntry>,
}

impl OutputSet {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("creating {}: {e}", dir.display())))?;
        Ok(OutputSet { dir: dir.to_path_buf(), entries: Vec::new() })
    }

    fn write_bytes(&mut self, file: &str, schema: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(file);
        fs::write(&path, bytes).map_err(|e| CliError::Io(format!("writing {}: {e}", path.display())))?;
        self.entries.push(OutputEntry { file: file.into(), schema: schema.into(), sha256: sha256_hex(bytes) });
        Ok(())
    }

    pub fn csv(&mut self, file: &str, schema: &str, table: &Table) -> Result<(), CliError> {
        self.write_bytes(file, schema, &table.to_bytes())
    }

    pub fn json<T: Serialize>(&mut self, file: &str, schema: &str, value: &T) -> Result<(), CliError> {
        let mut bytes = serde_json::to_vec_pretty(value).expect("serializable summary");
        bytes.push(b'\n');
        self.write_bytes(file, schema, &bytes)
    }

    /// Writes the manifest listing every file written so far.
    pub fn finish(self, header: ManifestHeader) -> Result<Vec<OutputEntry>, CliError> {
        let manifest = Manifest { header, outputs: self.entries.clone() };
        let mut bytes = serde_json::to_vec_pretty(&manifest).expect("serializable manifest");
        bytes.push(b'\n');
        let path = self.dir.join(MANIFEST_FILE);
        fs::write(&path, bytes).map_err(|e| CliError::Io(format!("writing {}: {e}", path.display())))?;
        Ok(self.entries)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Versions {
    #[serde(rename = "smc-cli")]
    pub cli: &'static str,
    #[serde(rename = "smc-core")]
    pub core: &'static str,
}

impl Default for Versions {
    fn default() -> Self {
        Versions { cli: env!("CARGO_PKG_VERSION"), core: smc_core::VERSION }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ManifestHeader {
    pub format: &'static str,
    pub subcommand: String,
    pub config_sha256: String,
    pub seed: u64,
    pub oracle: bool,
    pub versions: Versions,
}

#[derive(Serialize)]
struct Manifest {
    #[serde(flatten)]
    header: ManifestHeader,
    outputs: Vec<OutputEntry>,
}

/// Reads an observation CSV with header `y1..yd`, one row per step.
pub fn read_observations(path: &Path, obs_dim: usize) -> Result<Vec<Observation>, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Io(format!("reading {}: {e}", path.display())))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(bytes.as_slice());
    let bad = |msg: String| CliError::Validation(format!("observations ({}): {msg}", path.display()));
    let header = rdr.headers().map_err(|e| bad(e.to_string()))?.clone();
    let expected = indexed("y", obs_dim);
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(bad(format!("header must be {}, found {}", expected.join(","), header.iter().collect::<Vec<_>>().join(","))));
    }
    let mut ys = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let row = rec
            .iter()
            .map(|v| v.parse::<f64>().ok().filter(|x| x.is_finite()))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| bad(format!("row {} is not a list of finite numbers", i + 1)))?;
        ys.push(row);
    }
    if ys.is_empty() {
        return Err(bad("no observation rows".into()));
    }
    Ok(ys)
}

pub fn observations_table(ys: &[Observation]) -> Table {
    let d = ys.first().map_or(0, Vec::len);
    let mut t = Table::new(indexed("y", d));
    for y in ys {
        t.push(y.iter().map(|v| fmt_f64(*v)).collect());
    }
    t
}
