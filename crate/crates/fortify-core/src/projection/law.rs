//! Discrete reference laws and the closed-form change-of-measure map.
//!
//! A [`ReferenceLaw`] is a joint pmf f over finitely many support points
//! (Z, A, X) together with its fully factorized companion f*: under f*, A and
//! every component of Z are mutually independent given X while keeping the
//! conditional marginals of f. The map [`ReferenceLaw::project_closed_form`]
//! sends any tabulated function into the constrained moment space by
//! inclusion-exclusion over subset conditional means under f*, then reweights
//! by f*/f. All conditional expectations here are exact finite sums, which is
//! what makes this module the oracle for the iterative projection code.

use std::collections::HashMap;

use super::family::{AlphaCoefficients, SubsetFamily};
use super::ProjectionError;

/// One support point of the law.
#[derive(Debug, Clone, PartialEq)]
pub struct LawPoint {
    pub z: Vec<f64>,
    pub a: f64,
    pub x: Vec<f64>,
}

impl LawPoint {
    pub fn new(z: Vec<f64>, a: f64) -> Self {
        Self { z, a, x: Vec::new() }
    }

    fn key_full(&self) -> Vec<u64> {
        let mut key: Vec<u64> = self.z.iter().map(|v| v.to_bits()).collect();
        key.push(self.a.to_bits());
        key.extend(self.x.iter().map(|v| v.to_bits()));
        key
    }

    fn key_x(&self) -> Vec<u64> {
        self.x.iter().map(|v| v.to_bits()).collect()
    }

    /// Grouping key for conditioning on (Z_cols, X).
    fn key_cond(&self, z_cols: &[usize]) -> Vec<u64> {
        let mut key: Vec<u64> = z_cols.iter().map(|&c| self.z[c].to_bits()).collect();
        key.extend(self.x.iter().map(|v| v.to_bits()));
        key
    }
}

#[derive(Debug, Clone)]
pub struct ReferenceLaw {
    points: Vec<LawPoint>,
    f: Vec<f64>,
    f_star: Vec<f64>,
    k: usize,
}

impl ReferenceLaw {
    /// Builds the law from support points and their probabilities under the
    /// true joint law f. The reference law f* is derived by factorizing f
    /// within each X stratum into the product of its conditional marginals.
    /// Fails if f* puts mass where f has none (absolute continuity).
    pub fn from_joint(points: Vec<LawPoint>, probs: Vec<f64>) -> Result<Self, ProjectionError> {
        if points.is_empty() || points.len() != probs.len() {
            return Err(ProjectionError::InvalidLaw(
                "support points and probabilities must be non-empty and equal length".into(),
            ));
        }
        let k = points[0].z.len();
        if k == 0 {
            return Err(ProjectionError::InvalidLaw("law needs at least one z coordinate".into()));
        }
        let px = points[0].x.len();
        let mut seen = HashMap::new();
        let mut total = 0.0;
        for (i, (pt, &p)) in points.iter().zip(&probs).enumerate() {
            if pt.z.len() != k || pt.x.len() != px {
                return Err(ProjectionError::InvalidLaw("inconsistent point dimensions".into()));
            }
            if !p.is_finite() || p < 0.0 {
                return Err(ProjectionError::InvalidLaw(format!("probability {p} at point {i}")));
            }
            if seen.insert(pt.key_full(), i).is_some() {
                return Err(ProjectionError::InvalidLaw(format!("duplicate support point {i}")));
            }
            total += p;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(ProjectionError::InvalidLaw(format!("probabilities sum to {total}")));
        }

        // Per X stratum: stratum mass, conditional marginal of A, conditional
        // marginal of each Z component.
        let mut stratum_mass: HashMap<Vec<u64>, f64> = HashMap::new();
        let mut a_marg: HashMap<(Vec<u64>, u64), f64> = HashMap::new();
        let mut z_marg: HashMap<(Vec<u64>, usize, u64), f64> = HashMap::new();
        for (pt, &p) in points.iter().zip(&probs) {
            let xk = pt.key_x();
            *stratum_mass.entry(xk.clone()).or_insert(0.0) += p;
            *a_marg.entry((xk.clone(), pt.a.to_bits())).or_insert(0.0) += p;
            for (c, v) in pt.z.iter().enumerate() {
                *z_marg.entry((xk.clone(), c, v.to_bits())).or_insert(0.0) += p;
            }
        }

        let mut f_star = Vec::with_capacity(points.len());
        let mut star_total = 0.0;
        for pt in &points {
            let xk = pt.key_x();
            let mass = stratum_mass[&xk];
            let mut fs = a_marg[&(xk.clone(), pt.a.to_bits())] / mass;
            for (c, v) in pt.z.iter().enumerate() {
                fs *= z_marg[&(xk.clone(), c, v.to_bits())] / mass;
            }
            fs *= mass;
            f_star.push(fs);
            star_total += fs;
        }
        // f* lives on the full product grid of each stratum. If the provided
        // support misses grid cells, the factorized masses no longer sum to
        // one, which is exactly an absolute-continuity failure.
        if (star_total - 1.0).abs() > 1e-9 {
            return Err(ProjectionError::AbsoluteContinuity);
        }
        for (i, (&p, &ps)) in probs.iter().zip(&f_star).enumerate() {
            if p <= 0.0 && ps > 1e-15 {
                return Err(ProjectionError::AbsoluteContinuity);
            }
            if p <= 0.0 {
                return Err(ProjectionError::ZeroCell { point: i });
            }
        }
        Ok(Self { points, f: probs, f_star, k })
    }

    pub fn k(&self) -> usize {
        self.k
    }
    pub fn len(&self) -> usize {
        self.points.len()
    }
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
    pub fn points(&self) -> &[LawPoint] {
        &self.points
    }
    pub fn probabilities(&self) -> &[f64] {
        &self.f
    }
    pub fn star_probabilities(&self) -> &[f64] {
        &self.f_star
    }

    /// The change-of-measure weight f*/f per support point.
    pub fn weights(&self) -> Vec<f64> {
        self.f_star.iter().zip(&self.f).map(|(s, p)| s / p).collect()
    }

    /// Index of the support point matching (z, a, x) exactly, if any.
    pub fn lookup(&self, z: &[f64], a: f64, x: &[f64]) -> Option<usize> {
        self.points.iter().position(|pt| pt.z == z && pt.a == a && pt.x == x)
    }

    pub fn expectation(&self, g: &[f64]) -> f64 {
        g.iter().zip(&self.f).map(|(v, p)| v * p).sum()
    }

    pub fn expectation_star(&self, g: &[f64]) -> f64 {
        g.iter().zip(&self.f_star).map(|(v, p)| v * p).sum()
    }

    fn cond_expectation_with(&self, g: &[f64], probs: &[f64], cond_z_cols: &[usize]) -> Vec<f64> {
        let mut num: HashMap<Vec<u64>, f64> = HashMap::new();
        let mut den: HashMap<Vec<u64>, f64> = HashMap::new();
        for ((pt, &p), &v) in self.points.iter().zip(probs).zip(g) {
            let key = pt.key_cond(cond_z_cols);
            *num.entry(key.clone()).or_insert(0.0) += p * v;
            *den.entry(key).or_insert(0.0) += p;
        }
        self.points
            .iter()
            .map(|pt| {
                let key = pt.key_cond(cond_z_cols);
                num[&key] / den[&key]
            })
            .collect()
    }

    /// E[g | Z_cols, X] under the true law f, tabulated per support point.
    pub fn cond_expectation(&self, g: &[f64], cond_z_cols: &[usize]) -> Vec<f64> {
        self.cond_expectation_with(g, &self.f, cond_z_cols)
    }

    /// E*[g | Z_cols, X] under the factorized reference law f*.
    pub fn cond_expectation_star(&self, g: &[f64], cond_z_cols: &[usize]) -> Vec<f64> {
        self.cond_expectation_with(g, &self.f_star, cond_z_cols)
    }

    /// Closed-form map into the constrained moment space:
    /// (f*/f) { g - sum_{i=gamma}^K sum_{|nu|=i} alpha_i E*(g | Z_{-nu}, X) }.
    pub fn project_closed_form(
        &self,
        g: &[f64],
        alphas: &AlphaCoefficients,
    ) -> Result<Vec<f64>, ProjectionError> {
        if alphas.k() != self.k {
            return Err(ProjectionError::InvalidLaw(format!(
                "alpha coefficients built for k={} but law has k={}",
                alphas.k(),
                self.k
            )));
        }
        if g.len() != self.points.len() {
            return Err(ProjectionError::InvalidLaw(format!(
                "function has {} values but law has {} support points",
                g.len(),
                self.points.len()
            )));
        }
        let gamma = alphas.gamma();
        let mut acc: Vec<f64> = g.to_vec();
        for i in gamma..=self.k {
            let alpha_i = alphas.value(i);
            let family = SubsetFamily::enumerate(self.k, i)?;
            for j in 0..family.m() {
                let cond = family.complement_cols(j);
                let e_star = self.cond_expectation_star(g, &cond);
                for (av, ev) in acc.iter_mut().zip(&e_star) {
                    *av -= alpha_i * ev;
                }
            }
        }
        Ok(acc
            .iter()
            .zip(self.f_star.iter().zip(&self.f))
            .map(|(v, (s, p))| v * s / p)
            .collect())
    }

    /// Largest absolute conditional mean E_f[d | Z_{-nu}, X] over all size-gamma
    /// subsets nu and all conditioning values. Zero (to rounding) means d lies
    /// in the constrained space under f.
    pub fn max_constraint_violation(&self, d: &[f64], gamma: usize) -> Result<f64, ProjectionError> {
        let family = SubsetFamily::enumerate(self.k, gamma)?;
        let mut worst = 0.0_f64;
        for j in 0..family.m() {
            let cond = family.complement_cols(j);
            for v in self.cond_expectation(d, &cond) {
                worst = worst.max(v.abs());
            }
        }
        Ok(worst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    /// Full-support grid over A in {0,1}, Z in {-1,0,1}^k with given probs.
    fn grid_points(k: usize) -> Vec<LawPoint> {
        let mut pts = vec![LawPoint::new(Vec::new(), 0.0)];
        for _ in 0..k {
            let mut next = Vec::new();
            for p in &pts {
                for v in [-1.0, 0.0, 1.0] {
                    let mut q = p.clone();
                    q.z.push(v);
                    next.push(q);
                }
            }
            pts = next;
        }
        let mut out = Vec::new();
        for p in pts {
            for a in [0.0, 1.0] {
                let mut q = p.clone();
                q.a = a;
                out.push(q);
            }
        }
        out
    }

    fn random_law(k: usize, seed: u64) -> ReferenceLaw {
        let points = grid_points(k);
        let mut rng = SplitMix64::new(seed);
        let raw: Vec<f64> = (0..points.len()).map(|_| 0.05 + rng.next_f64()).collect();
        let total: f64 = raw.iter().sum();
        let probs: Vec<f64> = raw.iter().map(|v| v / total).collect();
        ReferenceLaw::from_joint(points, probs).unwrap()
    }

    fn random_function(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = SplitMix64::new(seed);
        (0..len).map(|_| 2.0 * rng.next_f64() - 1.0).collect()
    }

    #[test]
    fn uniform_independent_law_has_unit_weights() {
        let points = grid_points(2);
        let probs = vec![1.0 / 18.0; 18];
        let law = ReferenceLaw::from_joint(points, probs).unwrap();
        for w in law.weights() {
            assert!((w - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_grid_cell_breaks_absolute_continuity() {
        let mut points = grid_points(2);
        points.pop();
        let m = points.len();
        let probs = vec![1.0 / m as f64; m];
        assert!(matches!(
            ReferenceLaw::from_joint(points, probs),
            Err(ProjectionError::AbsoluteContinuity)
        ));
    }

    #[test]
    fn zero_probability_cell_rejected() {
        let points = grid_points(2);
        let mut probs = vec![1.0 / 17.0; 18];
        probs[5] = 0.0;
        let err = ReferenceLaw::from_joint(points, probs).unwrap_err();
        assert!(matches!(
            err,
            ProjectionError::AbsoluteContinuity | ProjectionError::ZeroCell { .. }
        ));
    }

    #[test]
    fn toy_projection_of_a_times_z1_is_constrained() {
        // K=2, gamma=1, g = A*Z1: the projected function must have exactly
        // zero conditional mean given Z1 and given Z2, by direct summation
        // over all 18 support points.
        let law = random_law(2, 11);
        let g: Vec<f64> = law.points().iter().map(|p| p.a * p.z[0]).collect();
        let alphas = AlphaCoefficients::compute(1, 2).unwrap();
        let d = law.project_closed_form(&g, &alphas).unwrap();
        let viol = law.max_constraint_violation(&d, 1).unwrap();
        assert!(viol < 1e-12, "violation {viol}");
    }

    #[test]
    fn gamma_equal_k_collapses_to_single_subtraction() {
        let law = random_law(2, 3);
        let g = random_function(law.len(), 5);
        let alphas = AlphaCoefficients::compute(2, 2).unwrap();
        let d = law.project_closed_form(&g, &alphas).unwrap();
        // Expected: (f*/f) (g - E*[g | X]) with empty X, i.e. global mean.
        let mean_star = law.expectation_star(&g);
        let weights = law.weights();
        for ((dv, gv), w) in d.iter().zip(&g).zip(&weights) {
            assert!((dv - w * (gv - mean_star)).abs() < 1e-12);
        }
    }

    #[test]
    fn already_constrained_function_is_fixed_point_under_factorized_law() {
        // With a law that is already a product law (f* = f), a function in
        // the constrained space passes through unchanged.
        let points = grid_points(2);
        let probs = vec![1.0 / 18.0; 18];
        let law = ReferenceLaw::from_joint(points, probs).unwrap();
        let alphas = AlphaCoefficients::compute(1, 2).unwrap();
        // Build a constrained function first, then re-project it.
        let g = random_function(law.len(), 17);
        let d = law.project_closed_form(&g, &alphas).unwrap();
        let d2 = law.project_closed_form(&d, &alphas).unwrap();
        for (u, v) in d.iter().zip(&d2) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn closed_form_lands_in_space_for_every_gamma_k_up_to_3() {
        for k in 1..=3 {
            for seed in 0..4 {
                let law = random_law(k, 100 + seed);
                let g = random_function(law.len(), 200 + seed);
                for gamma in 1..=k {
                    let alphas = AlphaCoefficients::compute(gamma, k).unwrap();
                    let d = law.project_closed_form(&g, &alphas).unwrap();
                    let viol = law.max_constraint_violation(&d, gamma).unwrap();
                    assert!(viol < 1e-12, "k={k} gamma={gamma} viol={viol}");
                }
            }
        }
    }

    #[test]
    fn nesting_of_constraint_spaces() {
        // Membership at gamma implies membership at every gamma' >= gamma.
        for seed in 0..3 {
            let law = random_law(3, 300 + seed);
            let g = random_function(law.len(), 400 + seed);
            let alphas = AlphaCoefficients::compute(1, 3).unwrap();
            let d = law.project_closed_form(&g, &alphas).unwrap();
            for gamma_prime in 1..=3 {
                let viol = law.max_constraint_violation(&d, gamma_prime).unwrap();
                assert!(viol < 1e-12, "gamma'={gamma_prime} viol={viol}");
            }
        }
    }

    #[test]
    fn telescoping_without_weight_on_factorized_law() {
        // For a fully factorized law the inner inclusion-exclusion alone
        // (weight = 1) already satisfies every constraint.
        let points = grid_points(3);
        // Product law with non-uniform marginals.
        let pa = [0.4, 0.6];
        let pz = [[0.5, 0.3, 0.2], [0.2, 0.5, 0.3], [0.3, 0.3, 0.4]];
        let probs: Vec<f64> = points
            .iter()
            .map(|pt| {
                let mut p = pa[pt.a as usize];
                for (c, v) in pt.z.iter().enumerate() {
                    let idx = (*v as i64 + 1) as usize;
                    p *= pz[c][idx];
                }
                p
            })
            .collect();
        let law = ReferenceLaw::from_joint(points, probs).unwrap();
        let g = random_function(law.len(), 7);
        for gamma in 1..=3 {
            let alphas = AlphaCoefficients::compute(gamma, 3).unwrap();
            let d = law.project_closed_form(&g, &alphas).unwrap();
            let viol = law.max_constraint_violation(&d, gamma).unwrap();
            assert!(viol < 1e-12, "gamma={gamma} viol={viol}");
            // Weight is identically 1 on a product law.
            for w in law.weights() {
                assert!((w - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn law_with_x_strata() {
        // Two binary X strata with different conditional laws.
        let mut points = Vec::new();
        let mut probs = Vec::new();
        let mut rng = SplitMix64::new(77);
        for x in [0.0, 1.0] {
            for z1 in [-1.0, 0.0, 1.0] {
                for z2 in [-1.0, 0.0, 1.0] {
                    for a in [0.0, 1.0] {
                        points.push(LawPoint { z: vec![z1, z2], a, x: vec![x] });
                        probs.push(0.05 + rng.next_f64());
                    }
                }
            }
        }
        let total: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= total;
        }
        let law = ReferenceLaw::from_joint(points, probs).unwrap();
        let g = random_function(law.len(), 78);
        let alphas = AlphaCoefficients::compute(1, 2).unwrap();
        let d = law.project_closed_form(&g, &alphas).unwrap();
        let viol = law.max_constraint_violation(&d, 1).unwrap();
        assert!(viol < 1e-12, "violation {viol}");
    }
}
