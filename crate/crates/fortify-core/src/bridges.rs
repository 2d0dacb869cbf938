//! Parametric working models for the bridge functions and the instrument
//! vectors used by the estimating equations.
//!
//! The outcome model h(W,A,X;b) and residual model l(Z,X;r) are linear in
//! their coefficients over explicit term sets; the treatment model is
//! q(Z,A,X;t) = 1 + exp(t0 + tz'Z + ta*A + tx'X), with an optional variant
//! that multiplies the linear index by (-1)^{1-A} inside the exponential.
//!
//! Structural constraints are enforced at construction: h has no intercept
//! and no pure-X terms, so h(0,0,X;b) = 0 identically; every monomial of l
//! involves at most K - gamma distinct proxy components, so l stays inside
//! the orthogonal complement of the constrained moment space.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::ObservedData;
use crate::linalg::{lstsq_min_norm, rms};
use crate::projection::SubsetProjector;

#[derive(Debug, Error)]
pub enum BridgeError {
    #[error("coefficient vector has length {found}, model needs {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("term references {kind} column {index} but data has {available}")]
    TermOutOfRange { kind: &'static str, index: usize, available: usize },
    #[error("outcome-model term {0} does not vanish at (W=0, A=0); drop intercepts and pure-X terms")]
    NonVanishingTerm(usize),
    #[error("residual-model term {term} uses {found} distinct proxy components; at most {allowed} are allowed for gamma={gamma}")]
    TooManyProxyComponents { term: usize, found: usize, allowed: usize, gamma: usize },
    #[error("default instrument basis over (W,A,X) has only {available} terms but dim(t)={needed}; supply custom c2 terms")]
    C2Deficient { needed: usize, available: usize },
    #[error("default instrument basis over (Z,A,X) has only {available} terms but dim(b)={needed}")]
    C0Deficient { needed: usize, available: usize },
    #[error("model input matrix {name} has {found} rows, expected {expected}")]
    InputRows { name: &'static str, found: usize, expected: usize },
}

/// A monomial over (W, A, X): the product of A (if `a`), the listed W columns
/// and the listed X columns. Indices are 1-based and may repeat for powers.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct WaxTerm {
    #[serde(default)]
    pub a: bool,
    #[serde(default)]
    pub w: Vec<usize>,
    #[serde(default)]
    pub x: Vec<usize>,
}

impl WaxTerm {
    pub fn intercept() -> Self {
        Self::default()
    }
    pub fn a() -> Self {
        Self { a: true, ..Self::default() }
    }
    pub fn w(j: usize) -> Self {
        Self { w: vec![j], ..Self::default() }
    }
    pub fn aw(j: usize) -> Self {
        Self { a: true, w: vec![j], ..Self::default() }
    }
    pub fn x(j: usize) -> Self {
        Self { x: vec![j], ..Self::default() }
    }
    pub fn ax(j: usize) -> Self {
        Self { a: true, x: vec![j], ..Self::default() }
    }

    fn check_bounds(&self, d_w: usize, p: usize) -> Result<(), BridgeError> {
        for &j in &self.w {
            if j < 1 || j > d_w {
                return Err(BridgeError::TermOutOfRange { kind: "w", index: j, available: d_w });
            }
        }
        for &j in &self.x {
            if j < 1 || j > p {
                return Err(BridgeError::TermOutOfRange { kind: "x", index: j, available: p });
            }
        }
        Ok(())
    }

    fn value(&self, w: &DMatrix<f64>, a: f64, x: &DMatrix<f64>, row: usize) -> f64 {
        let mut v = if self.a { a } else { 1.0 };
        for &j in &self.w {
            v *= w[(row, j - 1)];
        }
        for &j in &self.x {
            v *= x[(row, j - 1)];
        }
        v
    }
}

/// A monomial over (Z, X) for the residual model; 1-based indices, repeats
/// allowed. The empty term is the intercept.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct ZxTerm {
    #[serde(default)]
    pub z: Vec<usize>,
    #[serde(default)]
    pub x: Vec<usize>,
}

impl ZxTerm {
    pub fn intercept() -> Self {
        Self::default()
    }
    pub fn z(j: usize) -> Self {
        Self { z: vec![j], ..Self::default() }
    }
    pub fn x(j: usize) -> Self {
        Self { x: vec![j], ..Self::default() }
    }

    fn distinct_z(&self) -> usize {
        let mut cols = self.z.clone();
        cols.sort_unstable();
        cols.dedup();
        cols.len()
    }

    fn value(&self, z: &DMatrix<f64>, x: &DMatrix<f64>, row: usize) -> f64 {
        let mut v = 1.0;
        for &j in &self.z {
            v *= z[(row, j - 1)];
        }
        for &j in &self.x {
            v *= x[(row, j - 1)];
        }
        v
    }
}

/// Outcome bridge working model: h(W,A,X;b) = sum_j b_j * term_j(W,A,X).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutcomeBridge {
    terms: Vec<WaxTerm>,
}

impl OutcomeBridge {
    pub fn new(terms: Vec<WaxTerm>, d_w: usize, p: usize) -> Result<Self, BridgeError> {
        for (i, t) in terms.iter().enumerate() {
            t.check_bounds(d_w, p)?;
            if !t.a && t.w.is_empty() {
                return Err(BridgeError::NonVanishingTerm(i));
            }
        }
        Ok(Self { terms })
    }

    /// Default working model: A plus each W column.
    pub fn default_linear(d_w: usize, p: usize) -> Self {
        let mut terms = vec![WaxTerm::a()];
        terms.extend((1..=d_w).map(WaxTerm::w));
        Self::new(terms, d_w, p).expect("default terms are structurally valid")
    }

    pub fn dim(&self) -> usize {
        self.terms.len()
    }
    pub fn terms(&self) -> &[WaxTerm] {
        &self.terms
    }

    /// Rowwise evaluation; `a_override` substitutes the treatment value for
    /// counterfactual evaluation.
    pub fn eval(
        &self,
        coef: &[f64],
        w: &DMatrix<f64>,
        a: &[f64],
        x: &DMatrix<f64>,
        a_override: Option<f64>,
    ) -> Result<Vec<f64>, BridgeError> {
        if coef.len() != self.dim() {
            return Err(BridgeError::DimensionMismatch { expected: self.dim(), found: coef.len() });
        }
        let grad = self.gradient(w, a, x, a_override);
        Ok((0..w.nrows())
            .map(|i| (0..coef.len()).map(|j| coef[j] * grad[(i, j)]).sum())
            .collect())
    }

    /// n x dim(b) matrix of term values; for a model linear in b this is the
    /// exact gradient in the coefficients.
    pub fn gradient(
        &self,
        w: &DMatrix<f64>,
        a: &[f64],
        x: &DMatrix<f64>,
        a_override: Option<f64>,
    ) -> DMatrix<f64> {
        eval_wax_terms(&self.terms, w, a, x, a_override)
    }
}

/// Residual working model: l(Z,X;r) = sum_j r_j * term_j(Z,X), constrained so
/// each monomial touches at most K - gamma distinct proxy components.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResidualModel {
    terms: Vec<ZxTerm>,
}

impl ResidualModel {
    pub fn new(terms: Vec<ZxTerm>, k: usize, p: usize, gamma: usize) -> Result<Self, BridgeError> {
        let allowed = k - gamma;
        for (i, t) in terms.iter().enumerate() {
            for &j in &t.z {
                if j < 1 || j > k {
                    return Err(BridgeError::TermOutOfRange { kind: "z", index: j, available: k });
                }
            }
            for &j in &t.x {
                if j < 1 || j > p {
                    return Err(BridgeError::TermOutOfRange { kind: "x", index: j, available: p });
                }
            }
            let found = t.distinct_z();
            if found > allowed {
                return Err(BridgeError::TooManyProxyComponents { term: i, found, allowed, gamma });
            }
        }
        Ok(Self { terms })
    }

    /// Default: intercept, proxy main effects (when gamma < K), covariate
    /// main effects.
    pub fn default_linear(k: usize, p: usize, gamma: usize) -> Self {
        Self::with_interactions(k, p, gamma, 1)
    }

    /// Default main effects plus all distinct-component proxy interaction
    /// monomials up to min(order, K - gamma).
    pub fn with_interactions(k: usize, p: usize, gamma: usize, order: usize) -> Self {
        let max_order = order.min(k - gamma);
        let mut terms = vec![ZxTerm::intercept()];
        let mut frontier: Vec<Vec<usize>> = vec![Vec::new()];
        for _ in 0..max_order {
            let mut next = Vec::new();
            for combo in &frontier {
                let start = combo.last().map_or(1, |&l| l + 1);
                for j in start..=k {
                    let mut c = combo.clone();
                    c.push(j);
                    terms.push(ZxTerm { z: c.clone(), x: vec![] });
                    next.push(c);
                }
            }
            frontier = next;
        }
        terms.extend((1..=p).map(ZxTerm::x));
        Self::new(terms, k, p, gamma).expect("default terms satisfy the structural constraint")
    }

    pub fn dim(&self) -> usize {
        self.terms.len()
    }
    pub fn terms(&self) -> &[ZxTerm] {
        &self.terms
    }

    pub fn eval(&self, coef: &[f64], z: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<Vec<f64>, BridgeError> {
        if coef.len() != self.dim() {
            return Err(BridgeError::DimensionMismatch { expected: self.dim(), found: coef.len() });
        }
        let grad = self.gradient(z, x);
        Ok((0..z.nrows())
            .map(|i| (0..coef.len()).map(|j| coef[j] * grad[(i, j)]).sum())
            .collect())
    }

    /// n x dim(r) term-value matrix (exact coefficient gradient).
    pub fn gradient(&self, z: &DMatrix<f64>, x: &DMatrix<f64>) -> DMatrix<f64> {
        let n = z.nrows();
        let mut out = DMatrix::zeros(n, self.terms.len());
        for (j, t) in self.terms.iter().enumerate() {
            for i in 0..n {
                out[(i, j)] = t.value(z, x, i);
            }
        }
        out
    }
}

/// Treatment bridge working model. Coefficient layout: [t0, tz_1..tz_K, ta,
/// tx_1..tx_p].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreatmentBridge {
    pub k: usize,
    pub p: usize,
    /// Multiply the linear index by (-1)^{1-A} inside the exponential.
    #[serde(default)]
    pub sign_variant: bool,
    /// Cap on |linear index| before exponentiation.
    #[serde(default = "default_exp_cap")]
    pub exp_cap: f64,
}

fn default_exp_cap() -> f64 {
    50.0
}

/// Rowwise q values plus a flag recording whether the exponent was capped.
pub struct QEval {
    pub values: Vec<f64>,
    pub clamped: bool,
}

impl TreatmentBridge {
    pub fn new(k: usize, p: usize) -> Self {
        Self { k, p, sign_variant: false, exp_cap: default_exp_cap() }
    }

    pub fn dim(&self) -> usize {
        2 + self.k + self.p
    }

    fn check(&self, t: &[f64], z: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<(), BridgeError> {
        if t.len() != self.dim() {
            return Err(BridgeError::DimensionMismatch { expected: self.dim(), found: t.len() });
        }
        if z.ncols() != self.k {
            return Err(BridgeError::TermOutOfRange { kind: "z", index: self.k, available: z.ncols() });
        }
        if x.ncols() != self.p {
            return Err(BridgeError::TermOutOfRange { kind: "x", index: self.p, available: x.ncols() });
        }
        Ok(())
    }

    fn index(&self, t: &[f64], z: &DMatrix<f64>, a: f64, x: &DMatrix<f64>, row: usize) -> f64 {
        let mut idx = t[0];
        for j in 0..self.k {
            idx += t[1 + j] * z[(row, j)];
        }
        idx += t[1 + self.k] * a;
        for j in 0..self.p {
            idx += t[2 + self.k + j] * x[(row, j)];
        }
        idx
    }

    /// Rowwise evaluation of q = 1 + exp(arg) with the configured cap; always
    /// strictly greater than 1.
    pub fn eval(
        &self,
        t: &[f64],
        z: &DMatrix<f64>,
        a: &[f64],
        x: &DMatrix<f64>,
        a_override: Option<f64>,
    ) -> Result<QEval, BridgeError> {
        self.check(t, z, x)?;
        let mut clamped = false;
        let values = (0..z.nrows())
            .map(|i| {
                let ai = a_override.unwrap_or(a[i]);
                let mut arg = self.index(t, z, ai, x, i);
                if self.sign_variant {
                    arg *= sign_flip(ai);
                }
                if arg.abs() > self.exp_cap {
                    clamped = true;
                    arg = arg.clamp(-self.exp_cap, self.exp_cap);
                }
                1.0 + arg.exp()
            })
            .collect();
        Ok(QEval { values, clamped })
    }

    /// Analytic gradient in t, n x dim(t). In the capped region the model is
    /// flat, so the derivative there is zero.
    pub fn gradient(
        &self,
        t: &[f64],
        z: &DMatrix<f64>,
        a: &[f64],
        x: &DMatrix<f64>,
    ) -> Result<DMatrix<f64>, BridgeError> {
        self.check(t, z, x)?;
        let n = z.nrows();
        let mut out = DMatrix::zeros(n, self.dim());
        for i in 0..n {
            let ai = a[i];
            let s = if self.sign_variant { sign_flip(ai) } else { 1.0 };
            let arg = s * self.index(t, z, ai, x, i);
            let d_exp = if arg.abs() > self.exp_cap { 0.0 } else { arg.exp() };
            let scale = d_exp * s;
            out[(i, 0)] = scale;
            for j in 0..self.k {
                out[(i, 1 + j)] = scale * z[(i, j)];
            }
            out[(i, 1 + self.k)] = scale * ai;
            for j in 0..self.p {
                out[(i, 2 + self.k + j)] = scale * x[(i, j)];
            }
        }
        Ok(out)
    }
}

/// (-1)^{1-A}: +1 under treatment, -1 under control.
pub fn sign_flip(a: f64) -> f64 {
    if a == 1.0 {
        1.0
    } else {
        -1.0
    }
}

/// Effective model inputs. Misspecification scenarios substitute transformed
/// features here; the generated data never changes.
#[derive(Debug, Clone)]
pub struct ModelInputs {
    /// W features fed to the outcome bridge.
    pub w_h: DMatrix<f64>,
    /// Z features fed to the residual model.
    pub z_l: DMatrix<f64>,
    /// Z features fed to the treatment bridge.
    pub z_q: DMatrix<f64>,
}

impl ModelInputs {
    pub fn identity(data: &ObservedData) -> Self {
        Self { w_h: data.w().clone(), z_l: data.z().clone(), z_q: data.z().clone() }
    }

    pub fn check_rows(&self, n: usize) -> Result<(), BridgeError> {
        for (name, m) in [("w_h", &self.w_h), ("z_l", &self.z_l), ("z_q", &self.z_q)] {
            if m.nrows() != n {
                return Err(BridgeError::InputRows { name, found: m.nrows(), expected: n });
            }
        }
        Ok(())
    }
}

/// Evaluates a list of (W,A,X) monomials into an n x len matrix.
pub fn eval_wax_terms(
    terms: &[WaxTerm],
    w: &DMatrix<f64>,
    a: &[f64],
    x: &DMatrix<f64>,
    a_override: Option<f64>,
) -> DMatrix<f64> {
    let n = w.nrows();
    let mut out = DMatrix::zeros(n, terms.len());
    for (j, t) in terms.iter().enumerate() {
        for i in 0..n {
            let ai = a_override.unwrap_or(a[i]);
            out[(i, j)] = t.value(w, ai, x, i);
        }
    }
    out
}

/// The fixed default instrument basis over (W, A, X), in order:
/// A, W_j.., A*W_j.., A*X_l.., W_j*X_l.., W_j*W_l (j<=l).., A*W_j*W_l..,
/// truncated to `dim_t`.
///
/// Intercept and pure-X terms are deliberately excluded: the projected
/// weight is an exact empirical residual orthogonal to the intercept and
/// covariate columns (every subset regression contains them), so such
/// components would contribute identically-zero estimating equations and
/// leave the treatment coefficients unidentified.
pub fn default_c2_terms(dim_t: usize, d_w: usize, p: usize) -> Result<Vec<WaxTerm>, BridgeError> {
    let mut terms = vec![WaxTerm::a()];
    terms.extend((1..=d_w).map(WaxTerm::w));
    terms.extend((1..=d_w).map(WaxTerm::aw));
    terms.extend((1..=p).map(WaxTerm::ax));
    for j in 1..=d_w {
        for l in 1..=p {
            terms.push(WaxTerm { a: false, w: vec![j], x: vec![l] });
        }
    }
    for j in 1..=d_w {
        for l in j..=d_w {
            terms.push(WaxTerm { a: false, w: vec![j, l], x: vec![] });
        }
    }
    for j in 1..=d_w {
        for l in j..=d_w {
            terms.push(WaxTerm { a: true, w: vec![j, l], x: vec![] });
        }
    }
    if terms.len() < dim_t {
        return Err(BridgeError::C2Deficient { needed: dim_t, available: terms.len() });
    }
    terms.truncate(dim_t);
    Ok(terms)
}

/// Instrument vectors for the three estimating equations.
pub struct InstrumentVectors {
    /// n x dim(b); conditioned on (Z,A,X) and mapped into the constrained
    /// space (identity-mapped when no projector is supplied).
    pub c0: DMatrix<f64>,
    /// n x dim(r); the residual-model coefficient gradient.
    pub c1: DMatrix<f64>,
    /// n x dim(t); instruments for the treatment equation, plus their
    /// counterfactual difference c2(W,1,X) - c2(W,0,X) rowwise.
    pub c2: DMatrix<f64>,
    pub c2_diff: DMatrix<f64>,
    /// Membership residuals of each c0 column (empty in identity mode).
    pub c0_membership: Vec<Vec<f64>>,
    pub warnings: Vec<String>,
}

/// How the treatment-equation instruments are produced.
pub enum C2Source<'a> {
    /// Gradient-matching instruments: each column of the coefficient
    /// gradient of (-1)^{1-A} q(t), linearized at `t_lin`, is regressed onto
    /// a fixed (W,A,X) basis and the fitted values serve as the instrument.
    Adaptive { q: &'a TreatmentBridge, t_lin: &'a [f64] },
    /// Explicit monomial terms over (W, A, X), one per t coefficient.
    Explicit(&'a [WaxTerm]),
}

/// Builds c0, c1, c2.
///
/// c0 is the outcome-model coefficient gradient mapped componentwise into
/// the constrained space (left as-is when no projector is supplied).
#[allow(clippy::too_many_arguments)]
pub fn build_instruments(
    data: &ObservedData,
    inputs: &ModelInputs,
    h: &OutcomeBridge,
    l: &ResidualModel,
    dim_t: usize,
    c2_source: C2Source<'_>,
    projector: Option<&SubsetProjector>,
    ace_tol: f64,
    ace_max_cycles: usize,
) -> Result<InstrumentVectors, BridgeError> {
    let n = data.n();
    inputs.check_rows(n)?;
    let mut warnings = Vec::new();

    // c1: exact gradient of the residual model.
    let c1 = l.gradient(&inputs.z_l, data.x());

    // c0: the outcome-model coefficient gradient evaluated at the raw data
    // columns, conditioned onto the (Z, A, X) basis [1, A, Z, X, A*Z, A*X],
    // then mapped componentwise into the constrained space.
    //
    // Two constructions that look natural fail here. The raw gradient
    // contains W, whose latent noise is correlated with the bridge residual
    // and survives the projection, silently biasing the stacked solve. A
    // basis of plain (Z, X) functions is annihilated by the projection
    // (every subset design spans the linear (Z, X) terms), so only the
    // A-interaction structure of the conditioning basis carries information
    // through. Conditioning on the raw columns (never the substituted model
    // inputs) keeps the instruments fixed across working-model choices.
    let dim_b = h.dim();
    let grad_h_raw = h.gradient(data.w(), data.a(), data.x(), None);
    let cond_design = c0_conditioning_design(data);
    let mut c0 = DMatrix::zeros(n, dim_b);
    let mut c0_membership = Vec::new();
    for j in 0..dim_b {
        let col = grad_h_raw.column(j).into_owned();
        let fit = lstsq_min_norm(&cond_design, &col);
        if fit.deficient {
            warnings.push(format!(
                "instrument conditioning design rank-deficient for outcome-model column {}",
                j + 1
            ));
        }
        let conditioned = &cond_design * fit.coefficients;
        let mapped = match projector {
            Some(p) => {
                let (proj, state) = p.project(conditioned.as_slice(), ace_tol, ace_max_cycles);
                if !state.converged {
                    warnings.push(format!(
                        "instrument projection for outcome-equation column {} stopped at {} cycles",
                        j + 1,
                        state.cycles
                    ));
                }
                c0_membership.push(p.membership_residuals(&proj));
                proj
            }
            None => conditioned.as_slice().to_vec(),
        };
        for i in 0..n {
            c0[(i, j)] = mapped[i];
        }
    }

    let (c2, c2_diff) = match c2_source {
        C2Source::Adaptive { q, t_lin } => adaptive_c2(data, &inputs.z_q, q, t_lin)?,
        C2Source::Explicit(terms) => {
            if terms.len() != dim_t {
                return Err(BridgeError::DimensionMismatch {
                    expected: dim_t,
                    found: terms.len(),
                });
            }
            for term in terms {
                term.check_bounds(data.d_w(), data.p())?;
            }
            let c2 = eval_wax_terms(terms, data.w(), data.a(), data.x(), None);
            let c2_at1 = eval_wax_terms(terms, data.w(), data.a(), data.x(), Some(1.0));
            let c2_at0 = eval_wax_terms(terms, data.w(), data.a(), data.x(), Some(0.0));
            (c2, c2_at1 - c2_at0)
        }
    };

    Ok(InstrumentVectors { c0, c1, c2, c2_diff, c0_membership, warnings })
}

/// Gradient-matching instruments for the treatment equation: regress each
/// column of d/dt[(-1)^{1-A} q(t)] at `t_lin` onto the quadratic (W,A,X)
/// basis and use the fitted values. The second matrix holds the rowwise
/// counterfactual difference (basis at A=1 minus A=0, same coefficients).
pub fn adaptive_c2(
    data: &ObservedData,
    z_q: &DMatrix<f64>,
    q: &TreatmentBridge,
    t_lin: &[f64],
) -> Result<(DMatrix<f64>, DMatrix<f64>), BridgeError> {
    let n = data.n();
    let dim = q.dim();
    let basis = wax_quadratic_basis(data, None);
    let basis1 = wax_quadratic_basis(data, Some(1.0));
    let basis0 = wax_quadratic_basis(data, Some(0.0));
    let grad_q = q.gradient(t_lin, z_q, data.a(), data.x())?;
    let mut c2 = DMatrix::zeros(n, dim);
    let mut c2_diff = DMatrix::zeros(n, dim);
    for m in 0..dim {
        let col = DVector::from_iterator(
            n,
            (0..n).map(|i| sign_flip(data.a()[i]) * grad_q[(i, m)]),
        );
        let beta = lstsq_min_norm(&basis, &col).coefficients;
        let fitted = &basis * &beta;
        let diff = &basis1 * &beta - &basis0 * &beta;
        c2.set_column(m, &fitted);
        c2_diff.set_column(m, &diff);
    }
    Ok((c2, c2_diff))
}

/// Fixed quadratic conditioning basis over (W, A, X):
/// [1, W_j, X_l, W_j^2, X_l^2, W_j*X_l] and the same block multiplied by A.
fn wax_quadratic_basis(data: &ObservedData, a_override: Option<f64>) -> DMatrix<f64> {
    let n = data.n();
    let d_w = data.d_w();
    let p = data.p();
    let half = 1 + 2 * d_w + 2 * p + d_w * p;
    let mut out = DMatrix::zeros(n, 2 * half);
    for i in 0..n {
        let a = a_override.unwrap_or(data.a()[i]);
        let mut j = 0;
        let push = |out: &mut DMatrix<f64>, v: f64, j: &mut usize| {
            out[(i, *j)] = v;
            out[(i, half + *j)] = a * v;
            *j += 1;
        };
        push(&mut out, 1.0, &mut j);
        for c in 0..d_w {
            push(&mut out, data.w()[(i, c)], &mut j);
        }
        for c in 0..p {
            push(&mut out, data.x()[(i, c)], &mut j);
        }
        for c in 0..d_w {
            push(&mut out, data.w()[(i, c)] * data.w()[(i, c)], &mut j);
        }
        for c in 0..p {
            push(&mut out, data.x()[(i, c)] * data.x()[(i, c)], &mut j);
        }
        for cw in 0..d_w {
            for cx in 0..p {
                push(&mut out, data.w()[(i, cw)] * data.x()[(i, cx)], &mut j);
            }
        }
    }
    out
}

/// Conditioning basis for the c0 instruments: intercept, A, the (Z, X)
/// mains, and all distinct (Z, X) quadratics.
fn c0_conditioning_design(data: &ObservedData) -> DMatrix<f64> {
    let n = data.n();
    let k = data.k();
    let p = data.p();
    let nv = k + p;
    let mut cols: Vec<DVector<f64>> = Vec::with_capacity(2 + nv + nv * (nv + 1) / 2);
    cols.push(DVector::from_element(n, 1.0));
    cols.push(DVector::from_column_slice(data.a()));
    let mut vars: Vec<DVector<f64>> = Vec::with_capacity(nv);
    for j in 0..k {
        vars.push(data.z().column(j).into_owned());
    }
    for j in 0..p {
        vars.push(data.x().column(j).into_owned());
    }
    cols.extend(vars.iter().cloned());
    for i in 0..nv {
        for j in i..nv {
            cols.push(vars[i].component_mul(&vars[j]));
        }
    }
    DMatrix::from_columns(&cols)
}

/// Empirical L2 norm used by the membership diagnostics, re-exported for
/// convenience in tests.
pub fn empirical_norm(v: &[f64]) -> f64 {
    rms(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::DataNames;
    use crate::rng::SplitMix64;

    fn toy_data(n: usize, seed: u64) -> ObservedData {
        let mut rng = SplitMix64::new(seed);
        let mut z = DMatrix::zeros(n, 2);
        let mut w = DMatrix::zeros(n, 1);
        let mut x = DMatrix::zeros(n, 1);
        for i in 0..n {
            z[(i, 0)] = rng.next_gaussian();
            z[(i, 1)] = rng.next_gaussian();
            w[(i, 0)] = rng.next_gaussian();
            x[(i, 0)] = rng.next_gaussian();
        }
        let a: Vec<f64> = (0..n).map(|_| (rng.next_f64() < 0.5) as u8 as f64).collect();
        ObservedData::from_columns(vec![0.0; n], a, z, w, x, DataNames::synthetic(2, 1, 1)).unwrap()
    }

    #[test]
    fn outcome_bridge_point_values() {
        // b_a = 2, b_w = -0.5 at W = 1, A = 1 gives 1.5.
        let h = OutcomeBridge::default_linear(1, 0);
        let w = DMatrix::from_row_slice(1, 1, &[1.0]);
        let x = DMatrix::zeros(1, 0);
        let v = h.eval(&[2.0, -0.5], &w, &[1.0], &x, None).unwrap();
        assert!((v[0] - 1.5).abs() < 1e-15);
        // Structural zero at (W=0, A=0) for any coefficients.
        let w0 = DMatrix::from_row_slice(1, 1, &[0.0]);
        let v0 = h.eval(&[3.7, 11.1], &w0, &[0.0], &x, None).unwrap();
        assert_eq!(v0[0], 0.0);
        // Counterfactual difference eliminates the W term.
        let data = toy_data(50, 1);
        let h1 = h.eval(&[2.0, -0.5], data.w(), data.a(), &DMatrix::zeros(50, 0), Some(1.0)).unwrap();
        let h0 = h.eval(&[2.0, -0.5], data.w(), data.a(), &DMatrix::zeros(50, 0), Some(0.0)).unwrap();
        for (u, v) in h1.iter().zip(&h0) {
            assert!((u - v - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn outcome_bridge_rejects_non_vanishing_terms() {
        assert!(matches!(
            OutcomeBridge::new(vec![WaxTerm::intercept()], 1, 1),
            Err(BridgeError::NonVanishingTerm(0))
        ));
        assert!(matches!(
            OutcomeBridge::new(vec![WaxTerm::x(1)], 1, 1),
            Err(BridgeError::NonVanishingTerm(0))
        ));
        // A*X is fine: it vanishes at A=0.
        assert!(OutcomeBridge::new(vec![WaxTerm::ax(1)], 1, 1).is_ok());
    }

    #[test]
    fn residual_model_point_values_and_constraint() {
        // r0=1/2, r_z=(0,-1/8), r_x=1/2 at Z=(0,1), X=1 gives 0.875.
        let l = ResidualModel::default_linear(2, 1, 1);
        assert_eq!(l.dim(), 4);
        let z = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        let x = DMatrix::from_row_slice(1, 1, &[1.0]);
        let v = l.eval(&[0.5, 0.0, -0.125, 0.5], &z, &x).unwrap();
        assert!((v[0] - 0.875).abs() < 1e-15);
        let zeros = l.eval(&[0.0; 4], &z, &x).unwrap();
        assert_eq!(zeros[0], 0.0);
        // gamma = K admits functions of X only.
        assert!(matches!(
            ResidualModel::new(vec![ZxTerm::z(1)], 2, 1, 2),
            Err(BridgeError::TooManyProxyComponents { .. })
        ));
        let l_gamma_k = ResidualModel::default_linear(2, 1, 2);
        assert_eq!(l_gamma_k.dim(), 2); // intercept + x
        // Interaction order capped by K - gamma.
        let l_int = ResidualModel::with_interactions(3, 0, 1, 2);
        for t in l_int.terms() {
            assert!(t.distinct_z() <= 2);
        }
        assert!(l_int.terms().iter().any(|t| t.z == vec![1, 2]));
    }

    #[test]
    fn treatment_bridge_point_values_and_cap() {
        // t0=-1/8, tz=(-1,0): at Z1=-1/8 the index is zero, so q = 2.
        let q = TreatmentBridge::new(2, 0);
        let z = DMatrix::from_row_slice(1, 2, &[-0.125, 3.9]);
        let x = DMatrix::zeros(1, 0);
        let t = [-0.125, -1.0, 0.0, 0.0];
        let out = q.eval(&t, &z, &[1.0], &x, None).unwrap();
        assert!((out.values[0] - 2.0).abs() < 1e-12);
        assert!(!out.clamped);
        // All-zero coefficients give q = 2 everywhere.
        let out0 = q.eval(&[0.0; 4], &z, &[0.0], &x, None).unwrap();
        assert_eq!(out0.values[0], 2.0);
        // Huge index is capped and flagged.
        let thuge = [1000.0, 0.0, 0.0, 0.0];
        let outh = q.eval(&thuge, &z, &[1.0], &x, None).unwrap();
        assert!(outh.clamped);
        assert!(outh.values[0].is_finite());
        assert!(outh.values[0] > 1.0);
    }

    #[test]
    fn sign_variant_flips_index_for_controls() {
        let mut q = TreatmentBridge::new(1, 0);
        q.sign_variant = true;
        let z = DMatrix::from_row_slice(1, 1, &[0.5]);
        let x = DMatrix::zeros(1, 0);
        let t = [0.3, 1.0, 0.0];
        let treated = q.eval(&t, &z, &[1.0], &x, None).unwrap().values[0];
        let control = q.eval(&t, &z, &[0.0], &x, None).unwrap().values[0];
        assert!((treated - (1.0 + (0.8f64).exp())).abs() < 1e-12);
        assert!((control - (1.0 + (-0.8f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn default_c2_order_and_deficiency() {
        let terms = default_c2_terms(4, 1, 0).unwrap();
        assert_eq!(
            terms,
            vec![
                WaxTerm::a(),
                WaxTerm::w(1),
                WaxTerm::aw(1),
                WaxTerm { a: false, w: vec![1, 1], x: vec![] },
            ]
        );
        // d_W=1, p=0 offers A, W, AW, WW, AWW: six coefficients cannot be
        // served by five terms.
        assert!(matches!(
            default_c2_terms(6, 1, 0),
            Err(BridgeError::C2Deficient { needed: 6, available: 5 })
        ));
        // Benchmark shape d_W=1, p=1: [A, W, AW, AX, WX].
        let t5 = default_c2_terms(5, 1, 1).unwrap();
        assert_eq!(
            t5,
            vec![
                WaxTerm::a(),
                WaxTerm::w(1),
                WaxTerm::aw(1),
                WaxTerm::ax(1),
                WaxTerm { a: false, w: vec![1], x: vec![1] },
            ]
        );
    }

    #[test]
    fn gradients_match_central_differences() {
        // Criterion: analytic vs central finite differences, relative error
        // <= 1e-6 at 10 random parameter/data points.
        let data = toy_data(6, 99);
        let inputs = ModelInputs::identity(&data);
        let h = OutcomeBridge::default_linear(1, 1);
        let l = ResidualModel::default_linear(2, 1, 1);
        let q = TreatmentBridge::new(2, 1);
        let mut rng = SplitMix64::new(123);
        let step = 1e-6;
        for _ in 0..10 {
            let row = rng.next_index(data.n());
            // h.
            let b: Vec<f64> = (0..h.dim()).map(|_| rng.next_gaussian()).collect();
            let gh = h.gradient(&inputs.w_h, data.a(), data.x(), None);
            for j in 0..h.dim() {
                let mut bp = b.clone();
                let mut bm = b.clone();
                bp[j] += step;
                bm[j] -= step;
                let vp = h.eval(&bp, &inputs.w_h, data.a(), data.x(), None).unwrap()[row];
                let vm = h.eval(&bm, &inputs.w_h, data.a(), data.x(), None).unwrap()[row];
                let fd = (vp - vm) / (2.0 * step);
                let an = gh[(row, j)];
                assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs()), "h grad {j}: {fd} vs {an}");
            }
            // l.
            let r: Vec<f64> = (0..l.dim()).map(|_| rng.next_gaussian()).collect();
            let gl = l.gradient(&inputs.z_l, data.x());
            for j in 0..l.dim() {
                let mut rp = r.clone();
                let mut rm = r.clone();
                rp[j] += step;
                rm[j] -= step;
                let vp = l.eval(&rp, &inputs.z_l, data.x()).unwrap()[row];
                let vm = l.eval(&rm, &inputs.z_l, data.x()).unwrap()[row];
                let fd = (vp - vm) / (2.0 * step);
                let an = gl[(row, j)];
                assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs()), "l grad {j}: {fd} vs {an}");
            }
            // q (keep parameters modest so the cap is inactive).
            let t: Vec<f64> = (0..q.dim()).map(|_| 0.3 * rng.next_gaussian()).collect();
            let gq = q.gradient(&t, &inputs.z_q, data.a(), data.x()).unwrap();
            for j in 0..q.dim() {
                let mut tp = t.clone();
                let mut tm = t.clone();
                tp[j] += step;
                tm[j] -= step;
                let vp = q.eval(&tp, &inputs.z_q, data.a(), data.x(), None).unwrap().values[row];
                let vm = q.eval(&tm, &inputs.z_q, data.a(), data.x(), None).unwrap().values[row];
                let fd = (vp - vm) / (2.0 * step);
                let an = gq[(row, j)];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + an.abs()),
                    "q grad {j}: {fd} vs {an}"
                );
            }
        }
    }

    #[test]
    fn instruments_have_matching_dimensions() {
        use crate::projection::{AceBasis, SubsetFamily};
        let data = toy_data(300, 42);
        let inputs = ModelInputs::identity(&data);
        let h = OutcomeBridge::default_linear(1, 0);
        let l = ResidualModel::default_linear(2, 1, 1);
        let family = SubsetFamily::enumerate(2, 1).unwrap();
        let projector = SubsetProjector::from_data(&data, &family, &AceBasis::default()).unwrap();
        let q = TreatmentBridge::new(2, 1);
        let t_lin = vec![0.1; q.dim()];
        let inst = build_instruments(
            &data,
            &inputs,
            &h,
            &l,
            q.dim(),
            C2Source::Adaptive { q: &q, t_lin: &t_lin },
            Some(&projector),
            1e-8,
            500,
        )
        .unwrap();
        assert_eq!(inst.c0.ncols(), h.dim());
        assert_eq!(inst.c1.ncols(), l.dim());
        assert_eq!(inst.c2.ncols(), 5);
        // Every c0 column passes the membership diagnostic.
        for residuals in &inst.c0_membership {
            for &r in residuals {
                assert!(r < 1e-6, "membership residual {r}");
            }
        }
        // c1 equals the term values rowwise: (1, Z1, Z2, X).
        for i in 0..data.n() {
            assert_eq!(inst.c1[(i, 0)], 1.0);
            assert_eq!(inst.c1[(i, 1)], data.z()[(i, 0)]);
            assert_eq!(inst.c1[(i, 2)], data.z()[(i, 1)]);
            assert_eq!(inst.c1[(i, 3)], data.x()[(i, 0)]);
        }
    }
}
