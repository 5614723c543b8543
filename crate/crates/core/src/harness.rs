//! Plumbing shared by the command-line tool: dataset specs, output
//! directories with a run manifest, and method ranking.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{gen_synthetic, load_dataset_dir, Dataset, SplitManifest};
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::nn::io::hex_digest;

pub const RUN_MANIFEST: &str = "run-manifest.json";

/// `synthetic:N` or a directory holding `images.idx`, `labels.idx` and
/// optionally `split.json`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataSpec {
    Synthetic(usize),
    Dir(PathBuf),
}

impl FromStr for DataSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.strip_prefix("synthetic:") {
            Some(n) => n
                .parse()
                .ok()
                .filter(|&n| n > 0)
                .map(DataSpec::Synthetic)
                .ok_or_else(|| Error::InvalidConfig(format!("bad synthetic size {n:?}"))),
            None => Ok(DataSpec::Dir(PathBuf::from(s))),
        }
    }
}

impl std::fmt::Display for DataSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DataSpec::Synthetic(n) => write!(f, "synthetic:{n}"),
            DataSpec::Dir(p) => write!(f, "{}", p.display()),
        }
    }
}

impl DataSpec {
    /// Synthetic data and its default split are both seeded with `seed`.
    pub fn load(&self, seed: u64) -> Result<(Dataset, SplitManifest)> {
        match self {
            DataSpec::Synthetic(n) => Ok((gen_synthetic(*n, seed)?, SplitManifest::default_for(*n, seed))),
            DataSpec::Dir(dir) => load_dataset_dir(dir, seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub argv: Vec<String>,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    /// File name to hex SHA-256 of its bytes.
    pub outputs: BTreeMap<String, String>,
    pub runtime_seconds: f64,
}

/// Output directory that remembers a digest of every file written into it.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    written: BTreeMap<String, String>,
}

impl OutputDir {
    pub fn create(root: impl AsRef<Path>) -> Result<Self> {
        fs::create_dir_all(root.as_ref())?;
        Ok(OutputDir {
            root: root.as_ref().to_path_buf(),
            written: BTreeMap::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes.as_ref())?;
        self.written.insert(name.to_string(), hex_digest(bytes.as_ref()));
        Ok(path)
    }

    /// Records a file some other routine already wrote under this directory.
    pub fn record(&mut self, name: &str) -> Result<()> {
        let bytes = fs::read(self.path(name))?;
        self.written.insert(name.to_string(), hex_digest(&bytes));
        Ok(())
    }

    pub fn outputs(&self) -> &BTreeMap<String, String> {
        &self.written
    }

    pub fn finish(self, mut manifest: RunManifest) -> Result<()> {
        manifest.outputs = self.written;
        fs::write(self.root.join(RUN_MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub rank: usize,
    pub method: String,
    pub sigma: Option<f64>,
    pub faithfulness: f64,
    pub mu_fidelity: f64,
    pub sensitivity: f64,
    pub aggregate: f64,
}

fn label(r: &MetricReport) -> String {
    match r.sigma {
        Some(_) => format!("{}*", r.method),
        None => r.method.to_string(),
    }
}

/// Orders reports by `F + μF − S`, best first. Ties keep the label order.
pub fn rank_reports(reports: &[MetricReport]) -> Vec<RankRow> {
    let mut sorted: Vec<&MetricReport> = reports.iter().collect();
    sorted.sort_by(|a, b| {
        b.aggregate
            .total_cmp(&a.aggregate)
            .then_with(|| label(a).cmp(&label(b)))
    });
    sorted
        .into_iter()
        .enumerate()
        .map(|(i, r)| RankRow {
            rank: i + 1,
            method: label(r),
            sigma: r.sigma,
            faithfulness: r.faithfulness,
            mu_fidelity: r.mu_fidelity,
            sensitivity: r.sensitivity,
            aggregate: r.aggregate,
        })
        .collect()
}

pub fn ranking_csv(rows: &[RankRow]) -> String {
    let mut out = String::from("rank,method,sigma,faithfulness,mu_fidelity,sensitivity,aggregate\n");
    for r in rows {
        let sigma = r.sigma.map(|s| s.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{sigma},{},{},{},{}\n",
            r.rank, r.method, r.faithfulness, r.mu_fidelity, r.sensitivity, r.aggregate
        ));
    }
    out
}
