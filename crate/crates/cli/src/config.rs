//! Run configuration: a TOML file with one table per concern. Every key is
//! optional; unknown keys are rejected.

use std::fs;
use std::path::Path;

use clap::ValueEnum;
use dynshift::cluster::MeanShiftParams;
use dynshift::dynshift::{
    FinalClustering, ForwardConfig, TrainConfig, DEFAULT_FINAL_BANDWIDTH, DEFAULT_FINAL_BFS_RADIUS, DEFAULT_SEED_COUNT,
};
use dynshift::experiment::{ModelSpec, DEFAULT_MIN_INSTANCE_POINTS};
use dynshift::synth::SynthConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub data: DataSection,
    pub cluster: ClusterSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub analyze: AnalyzeSection,
}

/// Scene range written by `gen`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub scenes: usize,
    pub start: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { scenes: 20, start: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    Bfs,
    Dbscan,
    Meanshift,
    Dynshift,
    /// Gaussian-kernel direct bandwidth regression.
    Direct,
}

impl Algo {
    pub fn name(self) -> &'static str {
        match self {
            Algo::Bfs => "bfs",
            Algo::Dbscan => "dbscan",
            Algo::Meanshift => "meanshift",
            Algo::Dynshift => "dynshift",
            Algo::Direct => "direct",
        }
    }

    pub fn needs_model(self) -> bool {
        matches!(self, Algo::Dynshift | Algo::Direct)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalMethod {
    MeanShift,
    Bfs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterSection {
    pub algo: Algo,
    /// Mean-shift bandwidth for `meanshift`.
    pub bandwidth: f64,
    pub max_iters: usize,
    pub convergence_tol: f64,
    pub bfs_radius: f64,
    pub dbscan_eps: f64,
    pub dbscan_min_pts: usize,
    /// FPS seeds for mean shift and the shift models.
    pub seed_count: usize,
    pub seed: u64,
    pub final_method: FinalMethod,
    pub final_bandwidth: f64,
    pub final_radius: f64,
    pub min_instance_points: usize,
}

impl Default for ClusterSection {
    fn default() -> Self {
        Self {
            algo: Algo::Meanshift,
            bandwidth: DEFAULT_FINAL_BANDWIDTH,
            max_iters: 30,
            convergence_tol: 1e-4,
            bfs_radius: DEFAULT_FINAL_BFS_RADIUS,
            dbscan_eps: 0.5,
            dbscan_min_pts: 3,
            seed_count: DEFAULT_SEED_COUNT,
            seed: 0,
            final_method: FinalMethod::MeanShift,
            final_bandwidth: DEFAULT_FINAL_BANDWIDTH,
            final_radius: DEFAULT_FINAL_BFS_RADIUS,
            min_instance_points: DEFAULT_MIN_INSTANCE_POINTS,
        }
    }
}

impl ClusterSection {
    pub fn mean_shift(&self, bandwidth: f64) -> MeanShiftParams {
        MeanShiftParams {
            max_iters: self.max_iters,
            convergence_tol: self.convergence_tol,
            seed_count: self.seed_count,
            seed: self.seed,
            ..MeanShiftParams::with_bandwidth(bandwidth)
        }
    }

    pub fn forward(&self) -> ForwardConfig {
        let final_clustering = match self.final_method {
            FinalMethod::MeanShift => FinalClustering::MeanShift(self.mean_shift(self.final_bandwidth)),
            FinalMethod::Bfs => FinalClustering::Bfs {
                radius: self.final_radius,
            },
        };
        ForwardConfig {
            seed_count: self.seed_count,
            seed: self.seed,
            final_clustering,
            min_instance_points: self.min_instance_points,
        }
    }

    fn validate(&self) -> CliResult<()> {
        let positive = [
            ("bandwidth", self.bandwidth),
            ("bfs_radius", self.bfs_radius),
            ("dbscan_eps", self.dbscan_eps),
            ("final_bandwidth", self.final_bandwidth),
            ("final_radius", self.final_radius),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CliError::config(format!("cluster.{k} must be positive, got {v}")));
            }
        }
        if self.seed_count == 0 || self.max_iters == 0 {
            return Err(CliError::config(
                "cluster.seed_count and cluster.max_iters must be at least 1",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Weighted,
    Direct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub candidates: Vec<f64>,
    pub iterations: usize,
    pub eta: f64,
    pub loss_weights: Vec<f64>,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let s = ModelSpec::default();
        Self {
            kind: ModelKind::Weighted,
            candidates: s.candidates,
            iterations: s.iterations,
            eta: s.eta,
            loss_weights: s.loss_weights,
            hidden: s.hidden,
            seed: s.seed,
        }
    }
}

impl ModelSection {
    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            candidates: self.candidates.clone(),
            iterations: self.iterations,
            eta: self.eta,
            loss_weights: self.loss_weights.clone(),
            hidden: self.hidden.clone(),
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeSection {
    /// Distance bin width of the density profile, meters.
    pub bin_width: f64,
    /// Each set trains its own model; empty skips the sweep.
    pub candidate_sets: Vec<Vec<f64>>,
    pub iterations: Vec<usize>,
    pub meanshift_grid: Vec<f64>,
}

impl Default for AnalyzeSection {
    fn default() -> Self {
        Self {
            bin_width: 5.0,
            candidate_sets: vec![vec![0.2, 1.1, 2.0], vec![0.2, 1.7, 3.2], vec![0.2, 2.1, 4.0]],
            iterations: vec![1, 2, 3, 4],
            meanshift_grid: vec![0.2, 0.65, 1.2, 1.7, 3.2],
        }
    }
}

impl RunConfig {
    /// Reads a TOML config, or the `config` object embedded in a JSON report.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let cfg: RunConfig = if path.extension().is_some_and(|e| e == "json") {
            let v: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
            let inner = v.get("config").cloned().unwrap_or(v);
            serde_json::from_value(inner).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?
        };
        Ok(cfg)
    }

    /// Sets every seed of the run to `seed`.
    pub fn apply_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.cluster.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> CliResult<()> {
        self.synth.validate()?;
        self.cluster.validate()?;
        let spec = self.model.spec();
        spec.bank()?;
        spec.schedule()?;
        if self.train.batch_size == 0 {
            return Err(CliError::config("train.batch_size must be at least 1"));
        }
        self.train.adam.validate()?;
        if !(self.analyze.bin_width > 0.0) {
            return Err(CliError::config("analyze.bin_width must be positive"));
        }
        if self.analyze.iterations.contains(&0) {
            return Err(CliError::config("analyze.iterations entries must be at least 1"));
        }
        Ok(())
    }
}
