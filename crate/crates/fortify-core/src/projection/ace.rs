//! Cyclic projection onto the constrained moment space via alternating
//! conditional expectations, with each conditional mean realized by a fitted
//! regression that is refit at every step.
//!
//! The iterate visits the size-gamma subsets in their fixed lexicographic
//! order; step j replaces d by d minus the fitted-regression prediction of d
//! on the design built from (Z_{-nu_j}, X). Convergence is declared when the
//! relative empirical-L2 change of the iterate over one full cycle drops
//! below the tolerance. Rank-deficient designs are handled by minimum-norm
//! least squares and flagged, never by dropping columns.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::family::SubsetFamily;
use super::ProjectionError;
use crate::dataset::ObservedData;
use crate::linalg::{coefficient_map, orthonormal_columns, rms};

/// Design basis for the per-subset regressions.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AceBasis {
    /// Intercept plus linear terms in (Z_{-nu}, X), optionally augmented with
    /// squares and pairwise interactions of those variables.
    Linear {
        #[serde(default)]
        squares: bool,
        #[serde(default)]
        interactions: bool,
    },
    /// One indicator per distinct joint value of (Z_{-nu}, X); prediction is
    /// the within-group mean. Only sensible for discrete data.
    SaturatedIndicators,
}

impl Default for AceBasis {
    fn default() -> Self {
        AceBasis::Linear { squares: false, interactions: false }
    }
}

impl AceBasis {
    fn describe(&self) -> String {
        match self {
            AceBasis::Linear { squares, interactions } => {
                let mut s = String::from("intercept+linear");
                if *squares {
                    s.push_str("+squares");
                }
                if *interactions {
                    s.push_str("+interactions");
                }
                s
            }
            AceBasis::SaturatedIndicators => "saturated-indicators".into(),
        }
    }
}

/// Tolerance and iteration budget for the cyclic projection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AceConfig {
    pub tol: f64,
    pub max_cycles: usize,
    pub basis: AceBasis,
}

impl Default for AceConfig {
    fn default() -> Self {
        Self { tol: 1e-8, max_cycles: 500, basis: AceBasis::default() }
    }
}

/// Audit state of one projection run: the subset list, basis descriptor, the
/// final cycle's fitted coefficients per subset, and the norm traces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AceWorkingModel {
    pub gamma: usize,
    pub k: usize,
    /// 1-based subsets in visit order.
    pub subsets: Vec<Vec<usize>>,
    pub basis: String,
    /// Fitted coefficient vector per subset, from the last completed cycle.
    pub coefficients: Vec<Vec<f64>>,
    /// Empirical L2 norm of the iterate after every step.
    pub step_norms: Vec<f64>,
    /// Empirical L2 norm of the iterate after each full cycle.
    pub cycle_norms: Vec<f64>,
    pub converged: bool,
    pub cycles: usize,
    /// 1-based positions of subsets whose design was rank-deficient.
    pub rank_deficient_subsets: Vec<usize>,
}

enum Block {
    Dense {
        /// Orthonormal basis of the design column space.
        q: DMatrix<f64>,
        /// Maps projected coordinates q^T d to min-norm coefficients.
        coef_map: DMatrix<f64>,
        deficient: bool,
    },
    Groups {
        assignment: Vec<usize>,
        counts: Vec<usize>,
    },
}

impl Block {
    /// Prediction of d from this block's regression (refit on d).
    fn predict(&self, d: &DVector<f64>) -> DVector<f64> {
        match self {
            Block::Dense { q, .. } => q * (q.transpose() * d),
            Block::Groups { assignment, counts } => {
                let mut sums = vec![0.0; counts.len()];
                for (i, &g) in assignment.iter().enumerate() {
                    sums[g] += d[i];
                }
                for (s, &c) in sums.iter_mut().zip(counts) {
                    *s /= c as f64;
                }
                DVector::from_iterator(d.len(), assignment.iter().map(|&g| sums[g]))
            }
        }
    }

    fn coefficients(&self, d: &DVector<f64>) -> Vec<f64> {
        match self {
            Block::Dense { q, coef_map, .. } => {
                (coef_map * (q.transpose() * d)).iter().copied().collect()
            }
            Block::Groups { assignment, counts } => {
                let mut sums = vec![0.0; counts.len()];
                for (i, &g) in assignment.iter().enumerate() {
                    sums[g] += d[i];
                }
                for (s, &c) in sums.iter_mut().zip(counts) {
                    *s /= c as f64;
                }
                sums
            }
        }
    }
}

/// Precomputed per-subset regression designs for one dataset. Building the
/// projector once and reusing it across many projections (every solver
/// iteration re-projects) is what keeps the estimating equations tractable.
pub struct SubsetProjector {
    family: SubsetFamily,
    basis: AceBasis,
    blocks: Vec<Block>,
    n: usize,
}

impl SubsetProjector {
    pub fn new(
        z: &DMatrix<f64>,
        x: &DMatrix<f64>,
        family: &SubsetFamily,
        basis: &AceBasis,
    ) -> Result<Self, ProjectionError> {
        let n = z.nrows();
        if x.nrows() != n {
            return Err(ProjectionError::InvalidLaw("z and x row counts differ".into()));
        }
        if z.ncols() != family.k() {
            return Err(ProjectionError::InvalidLaw(format!(
                "family built for k={} but data has {} proxy columns",
                family.k(),
                z.ncols()
            )));
        }
        let mut blocks = Vec::with_capacity(family.m());
        for j in 0..family.m() {
            let cond = family.complement_cols(j);
            let block = match basis {
                AceBasis::Linear { squares, interactions } => {
                    let design = linear_design(z, x, &cond, *squares, *interactions);
                    if design.ncols() > n {
                        return Err(ProjectionError::InsufficientRows {
                            needed: design.ncols(),
                            n,
                        });
                    }
                    let (q, _rank, deficient) = orthonormal_columns(&design);
                    let coef_map = coefficient_map(&design);
                    Block::Dense { q, coef_map, deficient }
                }
                AceBasis::SaturatedIndicators => {
                    let mut groups: HashMap<Vec<u64>, usize> = HashMap::new();
                    let mut assignment = Vec::with_capacity(n);
                    let mut counts = Vec::new();
                    for i in 0..n {
                        let mut key: Vec<u64> =
                            cond.iter().map(|&c| z[(i, c)].to_bits()).collect();
                        for c in 0..x.ncols() {
                            key.push(x[(i, c)].to_bits());
                        }
                        let next = counts.len();
                        let g = *groups.entry(key).or_insert(next);
                        if g == counts.len() {
                            counts.push(0);
                        }
                        counts[g] += 1;
                        assignment.push(g);
                    }
                    Block::Groups { assignment, counts }
                }
            };
            blocks.push(block);
        }
        Ok(Self { family: family.clone(), basis: basis.clone(), blocks, n })
    }

    /// Builds the projector from a dataset's proxy and covariate blocks.
    pub fn from_data(
        data: &ObservedData,
        family: &SubsetFamily,
        basis: &AceBasis,
    ) -> Result<Self, ProjectionError> {
        Self::new(data.z(), data.x(), family, basis)
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn family(&self) -> &SubsetFamily {
        &self.family
    }

    /// Runs the cyclic projection from `d0`. Non-convergence at the cycle
    /// budget is reported through the state flag, not an error.
    pub fn project(&self, d0: &[f64], tol: f64, max_cycles: usize) -> (Vec<f64>, AceWorkingModel) {
        assert_eq!(d0.len(), self.n, "input length must match the dataset");
        assert!(tol > 0.0, "tolerance must be positive");
        let mut d = DVector::from_column_slice(d0);
        let m = self.blocks.len();
        let mut state = AceWorkingModel {
            gamma: self.family.gamma(),
            k: self.family.k(),
            subsets: self.family.subsets().to_vec(),
            basis: self.basis.describe(),
            coefficients: vec![Vec::new(); m],
            step_norms: Vec::new(),
            cycle_norms: Vec::new(),
            converged: false,
            cycles: 0,
            rank_deficient_subsets: self
                .blocks
                .iter()
                .enumerate()
                .filter_map(|(j, b)| match b {
                    Block::Dense { deficient: true, .. } => Some(j + 1),
                    _ => None,
                })
                .collect(),
        };
        for cycle in 1..=max_cycles {
            let d_start = d.clone();
            for (j, block) in self.blocks.iter().enumerate() {
                state.coefficients[j] = block.coefficients(&d);
                let pred = block.predict(&d);
                d -= pred;
                state.step_norms.push(rms(d.as_slice()));
            }
            state.cycles = cycle;
            state.cycle_norms.push(rms(d.as_slice()));
            let start_norm = rms(d_start.as_slice());
            let change = rms((&d - &d_start).as_slice());
            if change <= tol * start_norm.max(f64::MIN_POSITIVE) {
                state.converged = true;
                break;
            }
        }
        (d.as_slice().to_vec(), state)
    }

    /// Empirical L2 norm of the fitted-regression prediction of d per subset;
    /// near-zero values indicate empirical membership in the constrained
    /// space.
    pub fn membership_residuals(&self, d: &[f64]) -> Vec<f64> {
        assert_eq!(d.len(), self.n);
        let dv = DVector::from_column_slice(d);
        self.blocks.iter().map(|b| rms(b.predict(&dv).as_slice())).collect()
    }
}

/// Convenience wrapper: build a projector for the data and run one projection.
pub fn project_ace(
    d0: &[f64],
    data: &ObservedData,
    family: &SubsetFamily,
    config: &AceConfig,
) -> Result<(Vec<f64>, AceWorkingModel), ProjectionError> {
    let projector = SubsetProjector::from_data(data, family, &config.basis)?;
    Ok(projector.project(d0, config.tol, config.max_cycles))
}

/// Membership diagnostics against the per-subset regression bases.
pub fn membership_residuals(
    d: &[f64],
    data: &ObservedData,
    family: &SubsetFamily,
    basis: &AceBasis,
) -> Result<Vec<f64>, ProjectionError> {
    Ok(SubsetProjector::from_data(data, family, basis)?.membership_residuals(d))
}

fn linear_design(
    z: &DMatrix<f64>,
    x: &DMatrix<f64>,
    cond_z_cols: &[usize],
    squares: bool,
    interactions: bool,
) -> DMatrix<f64> {
    let n = z.nrows();
    let mut cols: Vec<DVector<f64>> = vec![DVector::from_element(n, 1.0)];
    let mut vars: Vec<DVector<f64>> = Vec::new();
    for &c in cond_z_cols {
        vars.push(z.column(c).into_owned());
    }
    for c in 0..x.ncols() {
        vars.push(x.column(c).into_owned());
    }
    cols.extend(vars.iter().cloned());
    if squares {
        for v in &vars {
            cols.push(v.component_mul(v));
        }
    }
    if interactions {
        for i in 0..vars.len() {
            for j in (i + 1)..vars.len() {
                cols.push(vars[i].component_mul(&vars[j]));
            }
        }
    }
    DMatrix::from_columns(&cols)
}
