use std::path::{Path, PathBuf};

use classdose_core::balance::{EbctOptions, Method};
use classdose_core::drf::{DrfConfig, GamOptions, WlsOptions};
use classdose_core::sim::SimSettings;
use classdose_core::{Error, FitOptions, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Input locations. Unset inputs default to the files `simulate` writes under
/// `<out>/data`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub items: Option<PathBuf>,
    pub classrooms: Option<PathBuf>,
    /// Built-in six-factor catalog when unset.
    pub catalog: Option<PathBuf>,
    pub covariates: Option<PathBuf>,
    pub outcomes: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            items: None,
            classrooms: None,
            catalog: None,
            covariates: None,
            outcomes: None,
            out: PathBuf::from("classdose-out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BalanceConfig {
    pub method: Method,
    /// Highest dose moment balanced.
    pub p: usize,
    pub trim_quantile: Option<f64>,
    pub demean_dose: bool,
    pub allow_indirect: bool,
}

impl Default for BalanceConfig {
    fn default() -> Self {
        let d = DrfConfig::default();
        Self {
            method: d.method,
            p: d.poly_order,
            trim_quantile: None,
            demean_dose: d.demean_dose,
            allow_indirect: d.allow_indirect,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DrfOptions {
    pub basis_dim: usize,
    pub grid_size: usize,
    pub log_lambda_span: f64,
    /// Cluster-robust standard errors by center.
    pub cluster: bool,
}

impl Default for DrfOptions {
    fn default() -> Self {
        let g = GamOptions::default();
        Self {
            basis_dim: g.basis_dim,
            grid_size: g.grid_size,
            log_lambda_span: g.log_lambda_span,
            cluster: WlsOptions::default().cluster,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub fit: FitOptions,
    pub balance: BalanceConfig,
    pub drf: DrfOptions,
    pub simulate: SimSettings,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::parse(path, e.message()))
    }

    pub fn drf_config(&self) -> DrfConfig {
        let b = &self.balance;
        DrfConfig {
            method: b.method,
            poly_order: b.p,
            ebct: EbctOptions {
                trim_quantile: b.trim_quantile,
                ..EbctOptions::default()
            },
            wls: WlsOptions {
                cluster: self.drf.cluster,
                grid_size: self.drf.grid_size,
            },
            gam: GamOptions {
                basis_dim: self.drf.basis_dim,
                grid_size: self.drf.grid_size,
                lambda: None,
                log_lambda_span: self.drf.log_lambda_span,
            },
            demean_dose: b.demean_dose,
            allow_indirect: b.allow_indirect,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.balance.p == 0 {
            return Err(Error::Config("balance.p must be at least 1".into()));
        }
        if let Some(q) = self.balance.trim_quantile {
            if !(q > 0.0 && q <= 1.0) {
                return Err(Error::Config(format!("balance.trim_quantile must lie in (0, 1], got {q}")));
            }
        }
        if self.drf.basis_dim < 4 {
            return Err(Error::Config("drf.basis_dim must be at least 4".into()));
        }
        if self.drf.grid_size < 2 {
            return Err(Error::Config("drf.grid_size must be at least 2".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML rendering with the output directory
    /// blanked, so the same run in another directory hashes the same.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths.out = PathBuf::new();
        let text = toml::to_string(&c).expect("config serializes");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn data_dir(&self) -> PathBuf {
        self.paths.out.join("data")
    }

    pub fn items_path(&self) -> PathBuf {
        self.paths.items.clone().unwrap_or_else(|| self.data_dir().join("items.csv"))
    }

    pub fn classrooms_path(&self) -> PathBuf {
        self.paths
            .classrooms
            .clone()
            .unwrap_or_else(|| self.data_dir().join("classrooms.csv"))
    }

    pub fn covariates_path(&self) -> PathBuf {
        self.paths
            .covariates
            .clone()
            .unwrap_or_else(|| self.data_dir().join("covariates.csv"))
    }

    pub fn outcomes_path(&self) -> PathBuf {
        self.paths
            .outcomes
            .clone()
            .unwrap_or_else(|| self.data_dir().join("outcomes.csv"))
    }
}
