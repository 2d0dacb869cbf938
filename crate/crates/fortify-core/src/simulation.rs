//! Reference data-generating processes: the continuous benchmark DGP with
//! its misspecification scenarios, closed-form true nuisance functions, and a
//! discrete toy law used for exact projection oracles.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bridges::ModelInputs;
use crate::dataset::{DataNames, ObservedData};
use crate::projection::{LawPoint, ProjectionError, ReferenceLaw};
use crate::rng::SplitMix64;

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("dataset error: {0}")]
    Dataset(#[from] crate::dataset::DatasetError),
    #[error("law error: {0}")]
    Law(#[from] ProjectionError),
    #[error("scenario {0} requires at least one covariate column")]
    ScenarioNeedsX(&'static str),
    #[error("scenario transforms are defined for K=2 proxies, data has {0}")]
    ScenarioNeedsTwoProxies(usize),
    #[error("toy law fixture malformed: {0}")]
    Fixture(String),
    #[error("sample too small to contain both treatment arms")]
    DegenerateSample,
}

/// The continuous benchmark data-generating process.
///
/// (X, Z2, U) are trivariate normal with unit variances and all pairwise
/// correlations 1/2; P(A=1 | X, Z2, U) = 1/(1+exp(-2(U - 0.5 X)));
/// Z1 ~ N(2(-1)^{1-A}(U - 0.5 X), 0.5^2);
/// W ~ N(-1 - X - 0.5 U + 0.25 Z2, 0.5^2);
/// Y ~ N(1 + X + 0.25 U + tau*A - 0.25 Z2, 0.25^2).
///
/// Z1 is a valid treatment confounding proxy; Z2 is invalid (it enters both
/// the W and Y equations directly). Draw order per row is fixed: three
/// gaussians for (X, Z2, U) through the Cholesky factor, one uniform for A,
/// then one gaussian each for Z1, W, Y. Deterministic given the seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Section4Dgp {
    pub tau_star: f64,
    pub n: usize,
    pub seed: u64,
}

impl Section4Dgp {
    pub fn new(n: usize, seed: u64) -> Self {
        Self { tau_star: 2.0, n, seed }
    }

    /// Generates the observable columns (Y, A, Z1, Z2, W, X). The latent
    /// confounder is returned on the side and never enters [`ObservedData`].
    pub fn generate(&self) -> Result<(ObservedData, Vec<f64>), SimulationError> {
        let n = self.n;
        let mut rng = SplitMix64::new(self.seed);
        // Cholesky factor of the equicorrelated covariance (unit diagonal,
        // off-diagonal 1/2) in the order (X, Z2, U).
        let l21 = 0.5;
        let l22 = (1.0_f64 - 0.25).sqrt();
        let l31 = 0.5;
        let l32 = (0.5 - 0.25) / l22;
        let l33 = (1.0_f64 - l31 * l31 - l32 * l32).sqrt();

        let mut y = Vec::with_capacity(n);
        let mut a = Vec::with_capacity(n);
        let mut z = DMatrix::zeros(n, 2);
        let mut w = DMatrix::zeros(n, 1);
        let mut x = DMatrix::zeros(n, 1);
        let mut u_latent = Vec::with_capacity(n);
        for i in 0..n {
            let g1 = rng.next_gaussian();
            let g2 = rng.next_gaussian();
            let g3 = rng.next_gaussian();
            let xi = g1;
            let z2 = l21 * g1 + l22 * g2;
            let u = l31 * g1 + l32 * g2 + l33 * g3;
            let p_treat = 1.0 / (1.0 + (-2.0 * (u - 0.5 * xi)).exp());
            let ai = if rng.next_f64() < p_treat { 1.0 } else { 0.0 };
            let sign = if ai == 1.0 { 1.0 } else { -1.0 };
            let z1 = 2.0 * sign * (u - 0.5 * xi) + 0.5 * rng.next_gaussian();
            let wi = -1.0 - xi - 0.5 * u + 0.25 * z2 + 0.5 * rng.next_gaussian();
            let yi = 1.0 + xi + 0.25 * u + self.tau_star * ai - 0.25 * z2
                + 0.25 * rng.next_gaussian();
            y.push(yi);
            a.push(ai);
            z[(i, 0)] = z1;
            z[(i, 1)] = z2;
            w[(i, 0)] = wi;
            x[(i, 0)] = xi;
            u_latent.push(u);
        }
        let data = ObservedData::from_columns(
            y,
            a,
            z,
            w,
            x,
            DataNames {
                y: "y".into(),
                a: "a".into(),
                z: vec!["z1".into(), "z2".into()],
                w: vec!["w".into()],
                x: vec!["x".into()],
            },
        )
        .map_err(|e| match e {
            crate::dataset::DatasetError::SingleArm => SimulationError::DegenerateSample,
            other => SimulationError::Dataset(other),
        })?;
        Ok((data, u_latent))
    }
}

/// Closed-form true nuisance values for the benchmark DGP:
/// h(W,A) = -W/2 + tau*A, l(Z,X) = 1/2 + X/2 - Z2/8,
/// q(Z) = 1 + exp(-1/8 - Z1).
pub struct TrueNuisances {
    pub h: Vec<f64>,
    pub l: Vec<f64>,
    pub q: Vec<f64>,
}

pub fn true_nuisances(data: &ObservedData, tau_star: f64) -> TrueNuisances {
    let n = data.n();
    let mut h = Vec::with_capacity(n);
    let mut l = Vec::with_capacity(n);
    let mut q = Vec::with_capacity(n);
    for i in 0..n {
        let wv = data.w()[(i, 0)];
        let av = data.a()[i];
        let z1 = data.z()[(i, 0)];
        let z2 = data.z()[(i, 1)];
        let xv = data.x()[(i, 0)];
        h.push(-wv / 2.0 + tau_star * av);
        l.push(0.5 + xv / 2.0 - z2 / 8.0);
        q.push(1.0 + (-0.125 - z1).exp());
    }
    TrueNuisances { h, l, q }
}

/// True parameter vectors of the benchmark DGP in working-model coefficient
/// order, for recovery tests: b=(b_a, b_w), r=(r0, rz1, rz2, rx),
/// t=(t0, tz1, tz2, ta, tx).
pub fn true_parameters(tau_star: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    (
        vec![tau_star, -0.5],
        vec![0.5, 0.0, -0.125, 0.5],
        vec![-0.125, -1.0, 0.0, 0.0, 0.0],
    )
}

/// Misspecification scenarios. Transforms substitute features into the model
/// inputs only; the generated data never changes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "UPPERCASE")]
pub enum Scenario {
    #[default]
    #[serde(rename = "none", alias = "NONE")]
    None,
    /// W* = W |X|^{1/2} into the outcome bridge (h misspecified).
    I,
    /// Z* = (Z1^2, Z2^2) into the residual model and Z** = (Z1 X, Z2 X) into
    /// the treatment bridge (l and q misspecified).
    II,
    /// Z** into the treatment bridge and the projection replaced by the
    /// identity map (q and the projection nuisance misspecified).
    III,
}

impl Scenario {
    pub fn parse(tag: &str) -> Option<Self> {
        match tag {
            "none" => Some(Scenario::None),
            "I" => Some(Scenario::I),
            "II" => Some(Scenario::II),
            "III" => Some(Scenario::III),
            _ => None,
        }
    }

    /// Whether this scenario disables the projection step.
    pub fn identity_projection(&self) -> bool {
        matches!(self, Scenario::III)
    }

    /// Builds the effective model inputs for this scenario.
    pub fn build_inputs(&self, data: &ObservedData) -> Result<ModelInputs, SimulationError> {
        let mut inputs = ModelInputs::identity(data);
        match self {
            Scenario::None => {}
            Scenario::I => {
                if data.p() == 0 {
                    return Err(SimulationError::ScenarioNeedsX("I"));
                }
                let n = data.n();
                for i in 0..n {
                    let scale = data.x()[(i, 0)].abs().sqrt();
                    for j in 0..data.d_w() {
                        inputs.w_h[(i, j)] = data.w()[(i, j)] * scale;
                    }
                }
            }
            Scenario::II | Scenario::III => {
                if data.k() != 2 {
                    return Err(SimulationError::ScenarioNeedsTwoProxies(data.k()));
                }
                if data.p() == 0 {
                    return Err(SimulationError::ScenarioNeedsX("II/III"));
                }
                let n = data.n();
                let mut z_star_sq = data.z().clone();
                let mut z_star_x = data.z().clone();
                for i in 0..n {
                    let xv = data.x()[(i, 0)];
                    for j in 0..2 {
                        let zv = data.z()[(i, j)];
                        z_star_sq[(i, j)] = zv * zv;
                        z_star_x[(i, j)] = zv * xv;
                    }
                }
                if *self == Scenario::II {
                    inputs.z_l = z_star_sq;
                }
                inputs.z_q = z_star_x;
            }
        }
        Ok(inputs)
    }
}

/// A fully tabulated pmf over A in {0,1} and Z1, Z2 in {-1,0,1}, optionally
/// with a latent binary dimension. Full support is required.
#[derive(Debug, Clone)]
pub struct DiscreteToyLaw {
    entries: Vec<ToyEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyEntry {
    #[serde(default)]
    pub u: Option<f64>,
    pub a: f64,
    pub z1: f64,
    pub z2: f64,
    pub p: f64,
}

#[derive(Deserialize)]
struct FixtureFile {
    entries: Vec<ToyEntry>,
}

impl DiscreteToyLaw {
    /// Uniform independent law: P(A=a) = 1/2, P(Z_i = z) = 1/3, independent.
    pub fn independent_uniform() -> Self {
        let mut entries = Vec::with_capacity(18);
        for a in [0.0, 1.0] {
            for z1 in [-1.0, 0.0, 1.0] {
                for z2 in [-1.0, 0.0, 1.0] {
                    entries.push(ToyEntry { u: None, a, z1, z2, p: 1.0 / 18.0 });
                }
            }
        }
        Self { entries }
    }

    /// The tabulated correlated-U fixture shipped with the crate.
    pub fn correlated_fixture() -> Self {
        Self::from_json(include_str!("../fixtures/toy_law_correlated.json"))
            .expect("embedded fixture is well-formed")
    }

    pub fn from_json(text: &str) -> Result<Self, SimulationError> {
        let parsed: FixtureFile =
            serde_json::from_str(text).map_err(|e| SimulationError::Fixture(e.to_string()))?;
        Self::from_entries(parsed.entries)
    }

    pub fn from_entries(entries: Vec<ToyEntry>) -> Result<Self, SimulationError> {
        if entries.is_empty() {
            return Err(SimulationError::Fixture("no entries".into()));
        }
        let mut total = 0.0;
        for (i, e) in entries.iter().enumerate() {
            if e.p <= 0.0 || !e.p.is_finite() {
                return Err(SimulationError::Law(ProjectionError::ZeroCell { point: i }));
            }
            total += e.p;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(SimulationError::Fixture(format!("probabilities sum to {total}")));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[ToyEntry] {
        &self.entries
    }

    /// The observable law over (Z1, Z2, A) with any latent dimension summed
    /// out.
    pub fn observable_law(&self) -> Result<ReferenceLaw, SimulationError> {
        use std::collections::HashMap;
        let mut acc: HashMap<(u64, u64, u64), f64> = HashMap::new();
        for e in &self.entries {
            *acc.entry((e.z1.to_bits(), e.z2.to_bits(), e.a.to_bits())).or_insert(0.0) += e.p;
        }
        let mut keys: Vec<_> = acc.keys().copied().collect();
        keys.sort_unstable();
        let mut points = Vec::with_capacity(keys.len());
        let mut probs = Vec::with_capacity(keys.len());
        for (z1, z2, a) in keys {
            points.push(LawPoint::new(
                vec![f64::from_bits(z1), f64::from_bits(z2)],
                f64::from_bits(a),
            ));
            probs.push(acc[&(z1, z2, a)]);
        }
        Ok(ReferenceLaw::from_joint(points, probs)?)
    }

    /// Draws n observable rows (Y is identically zero; W and X are empty).
    pub fn sample(&self, n: usize, seed: u64) -> Result<ObservedData, SimulationError> {
        let law = self.observable_law()?;
        let mut cumulative = Vec::with_capacity(law.len());
        let mut acc = 0.0;
        for &p in law.probabilities() {
            acc += p;
            cumulative.push(acc);
        }
        let mut rng = SplitMix64::new(seed);
        let mut a = Vec::with_capacity(n);
        let mut z = DMatrix::zeros(n, 2);
        for i in 0..n {
            let u = rng.next_f64();
            let idx = cumulative.partition_point(|&c| c <= u).min(law.len() - 1);
            let pt = &law.points()[idx];
            a.push(pt.a);
            z[(i, 0)] = pt.z[0];
            z[(i, 1)] = pt.z[1];
        }
        ObservedData::from_columns(
            vec![0.0; n],
            a,
            z,
            DMatrix::zeros(n, 0),
            DMatrix::zeros(n, 0),
            DataNames::synthetic(2, 0, 0),
        )
        .map_err(|_| SimulationError::DegenerateSample)
    }
}

/// Exact conditional-expectation tables for a tabulated function on a
/// discrete law: E[g | Z_{-nu}] for each singleton complement, E[g], and the
/// change-of-measure weight per point.
pub struct ToyLawTables {
    /// E[g | Z1] tabulated per support point.
    pub cond_on_z1: Vec<f64>,
    /// E[g | Z2] tabulated per support point.
    pub cond_on_z2: Vec<f64>,
    pub mean: f64,
    pub weights: Vec<f64>,
}

pub fn toy_law_tables(law: &ReferenceLaw, g: &[f64]) -> Result<ToyLawTables, SimulationError> {
    Ok(ToyLawTables {
        cond_on_z1: law.cond_expectation(g, &[0]),
        cond_on_z2: law.cond_expectation(g, &[1]),
        mean: law.expectation(g),
        weights: law.weights(),
    })
}

/// The thirteen spanning elements of the constrained space for the K=2,
/// gamma=1 discrete law: weight times products of centered A, Z_i, Z_i^2
/// factors. Returned as (label, per-point values).
pub fn remark_basis(law: &ReferenceLaw) -> Vec<(String, Vec<f64>)> {
    let pts = law.points();
    let a: Vec<f64> = pts.iter().map(|p| p.a).collect();
    let z1: Vec<f64> = pts.iter().map(|p| p.z[0]).collect();
    let z2: Vec<f64> = pts.iter().map(|p| p.z[1]).collect();
    let z1sq: Vec<f64> = z1.iter().map(|v| v * v).collect();
    let z2sq: Vec<f64> = z2.iter().map(|v| v * v).collect();
    let center = |v: &[f64]| -> Vec<f64> {
        let m = law.expectation(v);
        v.iter().map(|x| x - m).collect()
    };
    let ca = center(&a);
    let cz1 = center(&z1);
    let cz2 = center(&z2);
    let cz1sq = center(&z1sq);
    let cz2sq = center(&z2sq);
    let w = law.weights();
    let prod = |factors: &[&Vec<f64>]| -> Vec<f64> {
        (0..pts.len())
            .map(|i| w[i] * factors.iter().map(|f| f[i]).product::<f64>())
            .collect()
    };
    vec![
        ("A".to_string(), prod(&[&ca])),
        ("A*Z1".to_string(), prod(&[&ca, &cz1])),
        ("A*Z2".to_string(), prod(&[&ca, &cz2])),
        ("A*Z1*Z2".to_string(), prod(&[&ca, &cz1, &cz2])),
        ("A*Z1sq".to_string(), prod(&[&ca, &cz1sq])),
        ("A*Z2sq".to_string(), prod(&[&ca, &cz2sq])),
        ("A*Z1sq*Z2".to_string(), prod(&[&ca, &cz1sq, &cz2])),
        ("A*Z1*Z2sq".to_string(), prod(&[&ca, &cz1, &cz2sq])),
        ("A*Z1sq*Z2sq".to_string(), prod(&[&ca, &cz1sq, &cz2sq])),
        ("Z1*Z2".to_string(), prod(&[&cz1, &cz2])),
        ("Z1sq*Z2".to_string(), prod(&[&cz1sq, &cz2])),
        ("Z1*Z2sq".to_string(), prod(&[&cz1, &cz2sq])),
        ("Z1sq*Z2sq".to_string(), prod(&[&cz1sq, &cz2sq])),
    ]
}
