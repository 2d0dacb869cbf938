//! Run configuration: a JSON file plus flag overrides, flags winning.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use fortify_core::bridges::{WaxTerm, ZxTerm};
use fortify_core::dataset::ColumnRoles;
use fortify_core::inference::BootstrapConfig;
use fortify_core::projection::AceConfig;
use fortify_core::simulation::Scenario;

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// CSV data path (estimate).
    pub data: Option<PathBuf>,
    pub roles: Option<ColumnRoles>,
    /// Gamma values to sweep.
    pub gamma: Option<Vec<usize>>,
    /// Estimator list: fPOR, fPIPW, fPMR, PDR<j>, DR.
    pub methods: Option<Vec<String>>,
    /// Outcome-bridge terms; default is treatment plus outcome-proxy mains.
    pub h_terms: Option<Vec<WaxTerm>>,
    /// Residual-model terms; overrides the default built from
    /// `l_interaction_order`.
    pub l_terms: Option<Vec<ZxTerm>>,
    /// Order of distinct-proxy interaction monomials in the default residual
    /// model (capped at K - gamma).
    pub l_interaction_order: Option<usize>,
    /// Use the sign-variant treatment bridge 1 + exp((-1)^{1-A} index).
    pub q_sign_variant: Option<bool>,
    /// Explicit instrument terms for the treatment equation; default is the
    /// gradient-matching construction.
    pub c2_terms: Option<Vec<WaxTerm>>,
    pub bootstrap: Option<BootstrapConfig>,
    /// "influence" (default) or "bootstrap".
    pub se_engine: Option<String>,
    pub ace: Option<AceConfig>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub scenario: Option<String>,
    /// Sample size for simulate/mc.
    pub n: Option<usize>,
    /// Replicates for mc.
    pub reps: Option<usize>,
    pub tau_star: Option<f64>,
    pub workers: Option<usize>,
}

impl RunConfig {
    pub fn load(path: &std::path::Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("config {}: {e}", path.display()))
    }

    /// Seed resolution order: flag, config, FORTIFY_SEED, 0.
    pub fn resolve_seed(&self, flag: Option<u64>) -> u64 {
        flag.or(self.seed)
            .or_else(|| std::env::var("FORTIFY_SEED").ok().and_then(|v| v.parse().ok()))
            .unwrap_or(0)
    }

    pub fn resolve_scenario(&self, flag: Option<&str>) -> Result<Scenario, String> {
        let tag = flag
            .map(str::to_string)
            .or_else(|| self.scenario.clone())
            .unwrap_or_else(|| "none".into());
        Scenario::parse(&tag).ok_or_else(|| format!("unknown scenario {tag:?}"))
    }
}
