//! Bootstrap standard errors with tail trimming, normal-approximation
//! confidence intervals, and the Monte Carlo study harness.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::ObservedData;
use crate::estimators::{EstimateResult, Method};
use crate::linalg::{mean, sample_variance};
use crate::rng::derive_seed;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("bootstrap config invalid: {0}")]
    BadConfig(String),
    #[error("fewer than 2 bootstrap estimates retained ({0} successes)")]
    TooFewEstimates(usize),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub b_samples: usize,
    /// Total fraction of estimates discarded, split across the tails by the
    /// floor/ceil rule in [`trim_counts`].
    pub trim_fraction: f64,
    pub seed: u64,
    pub ci_level: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self { b_samples: 500, trim_fraction: 0.01, seed: 0, ci_level: 0.95 }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<(), InferenceError> {
        if self.b_samples < 2 {
            return Err(InferenceError::BadConfig("b_samples must be at least 2".into()));
        }
        if !(0.0..0.5).contains(&self.trim_fraction) {
            return Err(InferenceError::BadConfig("trim_fraction must lie in [0, 0.5)".into()));
        }
        if !(0.0 < self.ci_level && self.ci_level < 1.0) {
            return Err(InferenceError::BadConfig("ci_level must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Tail allocation of the trimming rule: drop floor(b*f/2) from the low tail
/// and ceil(b*f/2) from the high tail.
pub fn trim_counts(b: usize, trim_fraction: f64) -> (usize, usize) {
    let half = b as f64 * trim_fraction / 2.0;
    (half.floor() as usize, half.ceil() as usize)
}

/// Summary of one bootstrap run.
pub struct BootstrapSummary {
    pub se: f64,
    /// All successful estimates in replicate order (before trimming).
    pub estimates: Vec<f64>,
    pub failures: usize,
}

/// Nonparametric bootstrap standard error of an estimator. Replicate r
/// resamples with the seed derived from (config.seed, r). Failing replicates
/// are dropped and counted; the surviving estimates are trimmed by the
/// floor/ceil tail rule and their sample standard deviation is returned.
pub fn bootstrap_se<F>(
    data: &ObservedData,
    estimator: F,
    config: &BootstrapConfig,
) -> Result<BootstrapSummary, InferenceError>
where
    F: Fn(&ObservedData) -> Result<f64, String> + Sync,
{
    config.validate()?;
    let outcomes: Vec<Result<f64, String>> = (0..config.b_samples)
        .into_par_iter()
        .map(|r| {
            let resampled = data.resample(derive_seed(config.seed, r as u64));
            estimator(&resampled)
        })
        .collect();
    let mut estimates = Vec::with_capacity(config.b_samples);
    let mut failures = 0;
    for o in outcomes {
        match o {
            Ok(v) if v.is_finite() => estimates.push(v),
            _ => failures += 1,
        }
    }
    let retained = trim_estimates(&estimates, config.trim_fraction)?;
    Ok(BootstrapSummary { se: sample_variance(&retained).sqrt(), estimates, failures })
}

/// Sorts and trims by the floor/ceil rule, returning the retained estimates.
pub fn trim_estimates(estimates: &[f64], trim_fraction: f64) -> Result<Vec<f64>, InferenceError> {
    let b = estimates.len();
    let (low, high) = trim_counts(b, trim_fraction);
    if b < 2 + low + high {
        return Err(InferenceError::TooFewEstimates(b));
    }
    let mut sorted = estimates.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite estimates"));
    Ok(sorted[low..b - high].to_vec())
}

/// Normal-approximation interval tau_hat +/- z_{(1+level)/2} * se.
pub fn confidence_interval(tau_hat: f64, se: f64, level: f64) -> (f64, f64) {
    let z = normal_quantile((1.0 + level) / 2.0);
    (tau_hat - z * se, tau_hat + z * se)
}

/// Standard normal quantile function (Wichura's AS 241, double precision).
pub fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile needs p in (0,1), got {p}");
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q * poly(&A_COEF, r) / poly(&B_COEF, r);
    }
    let r = if q < 0.0 { p } else { 1.0 - p };
    let mut r = (-r.ln()).sqrt();
    let val = if r <= 5.0 {
        r -= 1.6;
        poly(&C_COEF, r) / poly(&D_COEF, r)
    } else {
        r -= 5.0;
        poly(&E_COEF, r) / poly(&F_COEF, r)
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

fn poly(coef: &[f64], x: f64) -> f64 {
    coef.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

const A_COEF: [f64; 8] = [
    3.387_132_872_796_366_5e0,
    1.331_416_678_917_843_8e2,
    1.971_590_950_306_551_3e3,
    1.373_716_881_714_076_6e4,
    4.592_195_393_154_987e4,
    6.726_577_092_700_87e4,
    3.343_057_558_358_813e4,
    2.509_080_928_730_122_7e3,
];
const B_COEF: [f64; 8] = [
    1.0,
    4.231_333_070_160_091e1,
    6.871_870_074_920_579e2,
    5.394_196_021_424_751e3,
    2.121_379_430_158_659_7e4,
    3.930_789_580_009_271e4,
    2.872_908_573_572_194_3e4,
    5.226_495_278_852_545e3,
];
const C_COEF: [f64; 8] = [
    1.423_437_110_749_683_5e0,
    4.630_337_846_156_546e0,
    5.769_497_221_460_691e0,
    3.647_848_324_763_204_5e0,
    1.270_458_252_452_368_4e0,
    2.417_807_251_774_506e-1,
    2.272_384_498_926_918_4e-2,
    7.745_450_142_783_414e-4,
];
const D_COEF: [f64; 8] = [
    1.0,
    2.053_191_626_637_759e0,
    1.676_384_830_183_803_8e0,
    6.897_673_349_851e-1,
    1.481_039_764_274_800_8e-1,
    1.519_866_656_361_645_7e-2,
    5.475_938_084_995_345e-4,
    1.050_750_071_644_416_9e-9,
];
const E_COEF: [f64; 8] = [
    6.657_904_643_501_103e0,
    5.463_784_911_164_114e0,
    1.784_826_539_917_291_3e0,
    2.965_605_718_285_048_7e-1,
    2.653_218_952_657_612_4e-2,
    1.242_660_947_388_078_4e-3,
    2.716_743_131_141_925_3e-5,
    2.010_321_207_683_943_3e-7,
];
const F_COEF: [f64; 8] = [
    1.0,
    5.998_322_065_558_88e-1,
    1.369_298_809_227_358e-1,
    1.487_536_129_085_061_5e-2,
    7.868_691_311_456_133e-4,
    1.846_318_317_510_054_8e-5,
    1.421_511_758_316_446e-7,
    2.044_263_103_389_939_7e-15,
];

/// One estimator's aggregate row in a Monte Carlo study.
#[derive(Debug, Clone, Serialize)]
pub struct McRow {
    pub method: Method,
    pub label: String,
    pub bias: f64,
    pub sd: f64,
    pub mean_se: f64,
    /// Fraction of successful replicates whose interval covers the truth.
    pub coverage: f64,
    pub n_reps: usize,
    pub n: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct McReport {
    pub tau_star: f64,
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
    pub se_engine: String,
    pub rows: Vec<McRow>,
}

impl McReport {
    /// CSV with the point summaries scaled by 100 (bias, sd, se) and the
    /// coverage in percent, one row per estimator.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("method,bias_x100,sd_x100,se_x100,coverage_pct,n_reps,n,failures\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:.1},{:.1},{:.1},{:.1},{},{},{}",
                r.label,
                100.0 * r.bias,
                100.0 * r.sd,
                100.0 * r.mean_se,
                100.0 * r.coverage,
                r.n_reps,
                r.n,
                r.failures
            );
        }
        out
    }

    pub fn row(&self, method: Method) -> Option<&McRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

#[derive(Debug, Clone)]
pub struct McConfig {
    pub n: usize,
    pub reps: usize,
    pub tau_star: f64,
    pub seed: u64,
    pub se_engine: String,
}

/// Per-replicate estimator outcomes keyed by method; failures carry the
/// error message.
pub type ReplicateOutcome = Vec<(Method, Result<EstimateResult, String>)>;

/// Runs a Monte Carlo study: replicate r generates data with the seed
/// derived from (seed, r), runs the estimator bundle, and the rows aggregate
/// bias, spread, mean reported SE, and interval coverage per method.
/// Replicates run in parallel; aggregation is a deterministic reduction in
/// replicate order, so identical (seed, config) give identical reports.
pub fn mc_study<D, E>(dgp: D, estimate: E, cfg: &McConfig) -> McReport
where
    D: Fn(usize, u64) -> ObservedData + Sync,
    E: Fn(&ObservedData) -> ReplicateOutcome + Sync,
{
    let outcomes: Vec<ReplicateOutcome> = (0..cfg.reps)
        .into_par_iter()
        .map(|r| {
            let data = dgp(cfg.n, derive_seed(cfg.seed, r as u64));
            estimate(&data)
        })
        .collect();

    #[derive(Default)]
    struct Acc {
        taus: Vec<f64>,
        ses: Vec<f64>,
        covered: usize,
        with_ci: usize,
        failures: usize,
    }
    let mut acc: BTreeMap<Method, Acc> = BTreeMap::new();
    for rep in &outcomes {
        for (method, outcome) in rep {
            let entry = acc.entry(*method).or_default();
            match outcome {
                Ok(res) => {
                    entry.taus.push(res.tau_hat);
                    if let Some(se) = res.se {
                        entry.ses.push(se);
                    }
                    if let (Some(lo), Some(hi)) = (res.ci_lower, res.ci_upper) {
                        entry.with_ci += 1;
                        if lo <= cfg.tau_star && cfg.tau_star <= hi {
                            entry.covered += 1;
                        }
                    }
                }
                Err(_) => entry.failures += 1,
            }
        }
    }
    let rows = acc
        .into_iter()
        .map(|(method, a)| McRow {
            method,
            label: method.label(),
            bias: mean(&a.taus) - cfg.tau_star,
            sd: sample_variance(&a.taus).sqrt(),
            mean_se: if a.ses.is_empty() { f64::NAN } else { mean(&a.ses) },
            coverage: if a.with_ci == 0 { f64::NAN } else { a.covered as f64 / a.with_ci as f64 },
            n_reps: cfg.reps,
            n: cfg.n,
            failures: a.failures,
        })
        .collect();
    McReport {
        tau_star: cfg.tau_star,
        n: cfg.n,
        reps: cfg.reps,
        seed: cfg.seed,
        se_engine: cfg.se_engine.clone(),
        rows,
    }
}
