use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{ImageRecord, MetricResult};
use crate::attribution::{Method, Provenance};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub model_hash: String,
    pub method: Method,
    pub sigma: Option<f64>,
    pub provenance: Provenance,
}

/// Contents of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model_hash: String,
    pub method: Method,
    pub sigma: Option<f64>,
    pub provenance: Provenance,
    pub n_images: usize,
    pub deletion: f64,
    pub insertion: f64,
    pub faithfulness: f64,
    pub mu_fidelity: f64,
    pub sensitivity: f64,
    pub aggregate: f64,
    pub per_image: Vec<ImageRecord>,
}

impl MetricReport {
    pub fn new(meta: ReportMeta, result: MetricResult) -> Self {
        MetricReport {
            model_hash: meta.model_hash,
            method: meta.method,
            sigma: meta.sigma,
            provenance: meta.provenance,
            n_images: result.per_image.len(),
            deletion: result.deletion,
            insertion: result.insertion,
            faithfulness: result.faithfulness,
            mu_fidelity: result.mu_fidelity,
            sensitivity: result.sensitivity,
            aggregate: result.aggregate,
            per_image: result.per_image,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per image followed by a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "method,sigma,image,target_class,deletion,insertion,faithfulness,mu_fidelity,sensitivity\n",
        );
        let sigma = self.sigma.map(|s| s.to_string()).unwrap_or_default();
        for r in &self.per_image {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                self.method, sigma, r.index, r.target_class, r.deletion, r.insertion,
                r.faithfulness, r.mu_fidelity, r.sensitivity
            );
        }
        let _ = writeln!(
            out,
            "{},{},mean,,{},{},{},{},{}",
            self.method, sigma, self.deletion, self.insertion, self.faithfulness,
            self.mu_fidelity, self.sensitivity
        );
        out
    }
}
