//! Experiment configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{HarnessError, HarnessResult};
use crate::contracts::{CliquetSpec, CostSpec, GridSpec, MaturityStrip};
use crate::market::HestonParams;
use crate::optim::{AdamConfig, KfacConfig};
use crate::policy::PolicyConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Kfac,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "adam" => Ok(Self::Adam),
            "kfac" => Ok(Self::Kfac),
            other => Err(format!("unknown optimizer {other:?} (expected adam or kfac)")),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Adam => "adam",
            Self::Kfac => "kfac",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketSection {
    pub x0: f64,
    pub v0: f64,
    pub kappa: f64,
    pub theta: f64,
    pub xi: f64,
    pub rho: f64,
    /// Year fraction of one trading step.
    pub dt: f64,
    /// Euler substeps per trading step.
    pub substeps: usize,
}

impl MarketSection {
    pub fn heston(&self) -> HestonParams {
        HestonParams {
            x0: self.x0,
            v0: self.v0,
            kappa: self.kappa,
            theta: self.theta,
            xi: self.xi,
            rho: self.rho,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliquetSection {
    pub cap: f64,
    pub period: usize,
    pub horizon: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    pub spot: f64,
    pub option: f64,
    /// `c̃ / c`
    pub surrogate_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySection {
    pub n_blocks: usize,
    pub hidden: usize,
    pub head_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub max_iterations: u64,
    /// Validation cadence, in iterations.
    pub val_every: u64,
    /// Stop as soon as the validation loss is at or below this value.
    #[serde(default)]
    pub val_target: Option<f64>,
    /// Gradient-variance probe cadence; 0 disables the probe.
    pub probe_every: u64,
    /// Paths per tape; the batch is split into shards of this size.
    pub shard_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub gamma: f64,
    pub market: MarketSection,
    pub grid: Vec<MaturityStrip>,
    pub cliquet: CliquetSection,
    pub costs: CostSection,
    pub policy: PolicySection,
    pub data: DataSection,
    pub training: TrainingSection,
    pub kfac: KfacConfig,
    pub adam: AdamConfig,
}

/// Desk-scale experiment shipped with the repository.
pub const DESK_CONFIG: &str = include_str!("../../configs/desk.toml");
/// Full-size reference experiment.
pub const REFERENCE_CONFIG: &str = include_str!("../../configs/reference.toml");

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> HarnessResult<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> HarnessResult<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn desk() -> Self {
        Self::from_toml(DESK_CONFIG).expect("shipped desk config is valid")
    }

    pub fn reference() -> Self {
        Self::from_toml(REFERENCE_CONFIG).expect("shipped reference config is valid")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> HarnessResult<()> {
        let err = |m: String| Err(HarnessError::Config(m));
        self.market
            .heston()
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        if !(self.market.dt > 0.0) || self.market.substeps == 0 {
            return err("market.dt must be positive and substeps at least 1".into());
        }
        let grid = self.grid_spec()?;
        let horizon = self.cliquet.horizon;
        if let Some(e) = grid.entries.iter().find(|e| e.tau_steps > horizon) {
            return err(format!("grid maturity {} exceeds the horizon {horizon}", e.tau_steps));
        }
        self.cliquet_spec()?;
        self.cost_spec()?;
        if !(self.gamma >= 0.0) {
            return err("gamma must be non-negative".into());
        }
        let p = &self.policy;
        if p.n_blocks == 0 || p.hidden == 0 || !(p.head_scale > 0.0) {
            return err("policy sizes and head_scale must be positive".into());
        }
        let d = &self.data;
        if d.n_val < 2 || d.n_test < 2 || d.n_train < 2 {
            return err("every data split needs at least 2 paths".into());
        }
        let t = &self.training;
        if t.batch_size < 2 || t.batch_size > d.n_train {
            return err(format!("batch_size {} must lie in [2, n_train]", t.batch_size));
        }
        if t.val_every == 0 || t.shard_size == 0 {
            return err("val_every and shard_size must be positive".into());
        }
        self.kfac.validate().map_err(HarnessError::Config)?;
        self.adam.validate().map_err(HarnessError::Config)?;
        Ok(())
    }

    pub fn grid_spec(&self) -> HarnessResult<GridSpec> {
        GridSpec::from_strips(&self.grid).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn cliquet_spec(&self) -> HarnessResult<CliquetSpec> {
        CliquetSpec::periodic(self.cliquet.period, self.cliquet.horizon, self.cliquet.cap)
            .map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn n_instruments(&self) -> usize {
        1 + self.grid.iter().map(|s| s.ratios.len()).sum::<usize>()
    }

    pub fn cost_spec(&self) -> HarnessResult<CostSpec> {
        let c = (0..self.n_instruments())
            .map(|i| if i == 0 { self.costs.spot } else { self.costs.option })
            .collect();
        CostSpec::new(c, self.costs.surrogate_ratio).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn policy_config(&self) -> PolicyConfig {
        PolicyConfig {
            n_blocks: self.policy.n_blocks,
            hidden: self.policy.hidden,
            d: self.n_instruments(),
            head_scale: self.policy.head_scale,
        }
    }

    /// SHA-256 over everything that defines the hedging problem and the
    /// network: market, grid, cliquet, costs, risk aversion, policy shape,
    /// data sizes and the root seed. Optimizer settings are excluded so
    /// paired runs evaluate against the same hash.
    pub fn problem_hash(&self) -> String {
        #[derive(Serialize)]
        struct Problem<'a> {
            seed: u64,
            gamma: f64,
            market: &'a MarketSection,
            grid: &'a [MaturityStrip],
            cliquet: &'a CliquetSection,
            costs: &'a CostSection,
            policy: &'a PolicySection,
            data: &'a DataSection,
        }
        let json = serde_json::to_string(&Problem {
            seed: self.seed,
            gamma: self.gamma,
            market: &self.market,
            grid: &self.grid,
            cliquet: &self.cliquet,
            costs: &self.costs,
            policy: &self.policy,
            data: &self.data,
        })
        .expect("problem serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
