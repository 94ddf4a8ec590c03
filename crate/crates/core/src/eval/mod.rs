//! Evaluation metrics: invariant clustering, identification, disentanglement
//! and attribute relevance, plus the persisted metrics record.

mod attributes;
mod cluster;
mod identity;
mod swap;

use std::fmt::Write as _;

use thiserror::Error;

use crate::model::ModelError;
use crate::nn::NnError;

pub use attributes::{attribute_f1, AttributeScore};
pub use cluster::{ari, category_sizes, clustering_accuracy, degenerate_category_count, hungarian, Assignment};
pub use identity::{one_shot_id, probe_identity, ProbeConfig, ONE_SHOT_DRAWS};
pub use swap::{normalized_error, swap_grid, swap_images, swapping_error, CategorySwap, SwapReport};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// Share of the images below which a category counts as degenerate.
pub const DEGENERATE_SHARE: f64 = 0.01;

/// Column order of every metrics CSV.
pub const CSV_HEADER: &str = "method,variant,C,M,L,K,seed,metric,value";

/// One evaluated (method, configuration, seed) triple. Metrics that do not
/// apply are `None` and are left out of both serializations.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub method: String,
    pub variant: String,
    pub categories: usize,
    pub shape_dim: usize,
    pub view_dim: usize,
    pub group_size: usize,
    pub seed: u64,
    pub fingerprint: String,
    pub accuracy: Option<f64>,
    pub ari: Option<f64>,
    pub one_shot: Option<f64>,
    pub swap_error: Option<f64>,
    pub shape_probe: Option<f64>,
    pub view_probe: Option<f64>,
    pub degenerate: Option<usize>,
    pub category_sizes: Vec<usize>,
}

impl MetricsReport {
    /// Named metric values in a fixed order.
    pub fn metrics(&self) -> Vec<(&'static str, f64)> {
        let mut out = Vec::new();
        let named = [
            ("accuracy", self.accuracy),
            ("ari", self.ari),
            ("one_shot", self.one_shot),
            ("swap_error", self.swap_error),
            ("shape_probe", self.shape_probe),
            ("view_probe", self.view_probe),
            ("degenerate", self.degenerate.map(|d| d as f64)),
        ];
        for (name, v) in named {
            if let Some(v) = v {
                out.push((name, v));
            }
        }
        out
    }

    /// Flat `key = value` record.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "method = {}", self.method);
        let _ = writeln!(s, "variant = {}", self.variant);
        let _ = writeln!(s, "C = {}", self.categories);
        let _ = writeln!(s, "M = {}", self.shape_dim);
        let _ = writeln!(s, "L = {}", self.view_dim);
        let _ = writeln!(s, "K = {}", self.group_size);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "fingerprint = {}", self.fingerprint);
        for (name, v) in self.metrics() {
            let _ = writeln!(s, "{name} = {v}");
        }
        let sizes: Vec<String> = self.category_sizes.iter().map(|n| n.to_string()).collect();
        let _ = writeln!(s, "category_sizes = {}", sizes.join(" "));
        s
    }

    /// One CSV line per metric, without the header.
    pub fn csv_rows(&self) -> Vec<String> {
        self.metrics()
            .into_iter()
            .map(|(name, v)| {
                format!(
                    "{},{},{},{},{},{},{},{name},{v}",
                    self.method, self.variant, self.categories, self.shape_dim, self.view_dim, self.group_size, self.seed
                )
            })
            .collect()
    }
}
