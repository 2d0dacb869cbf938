//! Subset enumeration and the coefficient recursion behind the closed-form
//! change-of-measure map.

use serde::{Deserialize, Serialize};

use super::ProjectionError;

/// Binomial coefficient in exact integer arithmetic.
pub fn binomial(n: usize, r: usize) -> u128 {
    if r > n {
        return 0;
    }
    let r = r.min(n - r);
    let mut acc: u128 = 1;
    for i in 0..r {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

/// All size-gamma subsets of {1..k} in lexicographic order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubsetFamily {
    k: usize,
    gamma: usize,
    subsets: Vec<Vec<usize>>,
}

impl SubsetFamily {
    pub fn enumerate(k: usize, gamma: usize) -> Result<Self, ProjectionError> {
        if gamma < 1 || gamma > k {
            return Err(ProjectionError::GammaOutOfRange { gamma, k });
        }
        let mut subsets = Vec::with_capacity(binomial(k, gamma) as usize);
        let mut current: Vec<usize> = (1..=gamma).collect();
        loop {
            subsets.push(current.clone());
            // Advance to the next combination in lexicographic order.
            let mut i = gamma;
            while i > 0 && current[i - 1] == k - gamma + i {
                i -= 1;
            }
            if i == 0 {
                break;
            }
            current[i - 1] += 1;
            for j in i..gamma {
                current[j] = current[j - 1] + 1;
            }
        }
        Ok(Self { k, gamma, subsets })
    }

    pub fn k(&self) -> usize {
        self.k
    }
    pub fn gamma(&self) -> usize {
        self.gamma
    }
    pub fn m(&self) -> usize {
        self.subsets.len()
    }
    /// 1-based subsets, lexicographic.
    pub fn subsets(&self) -> &[Vec<usize>] {
        &self.subsets
    }

    /// 0-based z-column indices of the complement Z_{-nu} of subset `j`.
    pub fn complement_cols(&self, j: usize) -> Vec<usize> {
        let subset = &self.subsets[j];
        (1..=self.k)
            .filter(|i| !subset.contains(i))
            .map(|i| i - 1)
            .collect()
    }
}

/// Coefficients alpha_gamma..alpha_k of the inclusion-exclusion recursion:
/// alpha_gamma = 1 and sum_{j=gamma}^{i} C(gamma, i-j) alpha_j = 0 for i > gamma.
/// The recursion has integer solutions; values are computed exactly and then
/// converted to f64.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlphaCoefficients {
    gamma: usize,
    k: usize,
    values: Vec<f64>,
}

impl AlphaCoefficients {
    pub fn compute(gamma: usize, k: usize) -> Result<Self, ProjectionError> {
        if gamma < 1 || gamma > k {
            return Err(ProjectionError::GammaOutOfRange { gamma, k });
        }
        let mut exact: Vec<i128> = vec![1];
        for i in (gamma + 1)..=k {
            let mut sum: i128 = 0;
            for (offset, &alpha_j) in exact.iter().enumerate() {
                let j = gamma + offset;
                sum += binomial(gamma, i - j) as i128 * alpha_j;
            }
            exact.push(-sum);
        }
        Ok(Self {
            gamma,
            k,
            values: exact.into_iter().map(|v| v as f64).collect(),
        })
    }

    pub fn gamma(&self) -> usize {
        self.gamma
    }
    pub fn k(&self) -> usize {
        self.k
    }
    /// alpha_i for gamma <= i <= k.
    pub fn value(&self, i: usize) -> f64 {
        self.values[i - self.gamma]
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent binomial table via Pascal's rule, used as the oracle.
    fn pascal(n: usize) -> Vec<Vec<u128>> {
        let mut t = vec![vec![1u128]];
        for i in 1..=n {
            let prev = &t[i - 1];
            let mut row = vec![1u128];
            for j in 1..i {
                row.push(prev[j - 1] + prev[j]);
            }
            row.push(1);
            t.push(row);
        }
        t
    }

    #[test]
    fn enumeration_is_lexicographic() {
        let fam = SubsetFamily::enumerate(3, 2).unwrap();
        assert_eq!(fam.subsets(), &[vec![1, 2], vec![1, 3], vec![2, 3]]);
        assert_eq!(fam.m(), 3);
        assert_eq!(fam.complement_cols(0), vec![2]);
        assert_eq!(fam.complement_cols(2), vec![0]);

        let single = SubsetFamily::enumerate(2, 2).unwrap();
        assert_eq!(single.subsets(), &[vec![1, 2]]);
        assert_eq!(single.m(), 1);
    }

    #[test]
    fn subset_count_matches_independent_binomial() {
        let table = pascal(8);
        let fam = SubsetFamily::enumerate(8, 4).unwrap();
        assert_eq!(fam.m() as u128, table[8][4]);
        assert_eq!(fam.m(), 70);
        for k in 1..=8 {
            for gamma in 1..=k {
                let fam = SubsetFamily::enumerate(k, gamma).unwrap();
                assert_eq!(fam.m() as u128, table[k][gamma], "k={k} gamma={gamma}");
                let mut seen = std::collections::HashSet::new();
                for s in fam.subsets() {
                    assert_eq!(s.len(), gamma);
                    assert!(seen.insert(s.clone()), "duplicate subset");
                }
            }
        }
    }

    #[test]
    fn gamma_bounds_rejected() {
        assert!(SubsetFamily::enumerate(3, 0).is_err());
        assert!(SubsetFamily::enumerate(3, 4).is_err());
        assert!(AlphaCoefficients::compute(0, 3).is_err());
        assert!(AlphaCoefficients::compute(4, 3).is_err());
    }

    #[test]
    fn alpha_hand_solved_cases() {
        // gamma=1, k=2: C(1,1)*1 + C(1,0)*alpha_2 = 0 => alpha_2 = -1.
        let a = AlphaCoefficients::compute(1, 2).unwrap();
        assert_eq!(a.values(), &[1.0, -1.0]);
        // gamma=2, k=3: C(2,1)*1 + C(2,0)*alpha_3 = 0 => alpha_3 = -2.
        let a = AlphaCoefficients::compute(2, 3).unwrap();
        assert_eq!(a.values(), &[1.0, -2.0]);
        // Base case only.
        let a = AlphaCoefficients::compute(3, 3).unwrap();
        assert_eq!(a.values(), &[1.0]);
    }

    #[test]
    fn alpha_recursion_identity_all_k_up_to_six() {
        // Verify sum_{j=gamma}^{i} C(gamma, i-j) alpha_j = 0 with binomials
        // from an independently built Pascal table.
        let table = pascal(6);
        for k in 1..=6 {
            for gamma in 1..=k {
                let a = AlphaCoefficients::compute(gamma, k).unwrap();
                assert_eq!(a.value(gamma), 1.0);
                for i in (gamma + 1)..=k {
                    let mut sum = 0.0;
                    for j in gamma..=i {
                        let c = if i - j <= gamma { table[gamma][i - j] as f64 } else { 0.0 };
                        sum += c * a.value(j);
                    }
                    assert!(
                        sum.abs() < 1e-12,
                        "recursion violated at gamma={gamma} k={k} i={i}: {sum}"
                    );
                }
            }
        }
    }
}
