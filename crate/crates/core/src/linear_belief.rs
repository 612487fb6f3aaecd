//! Second-order belief structures and the Bayes linear adjustment.
//!
//! Beliefs are expressed through previsions (expectations) and variance
//! matrices only. Adjustment projects one collection `B` onto affine
//! functions of another collection `D`:
//!
//! ```text
//! P_D(B)   = P(B) + Cov(B,D) Var(D)† (d - P(D))
//! Var_D(B) = Var(B) - Cov(B,D) Var(D)† Cov(D,B)
//! ```
//!
//! where `†` is the Moore-Penrose inverse. Joint specifications must be
//! coherent (jointly non-negative definite) before they can be adjusted;
//! incoherent inputs are rejected rather than silently repaired.

use std::collections::HashSet;
use std::fmt;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Singular values below `RANK_TOL * sigma_max` are treated as zero.
pub const RANK_TOL: f64 = 1e-10;
/// Asymmetry (relative to the largest absolute entry) tolerated without a warning.
pub const SYM_TOL: f64 = 1e-9;
/// Relative eigenvalue floor for non-negative definiteness.
pub const PSD_TOL: f64 = 1e-8;
/// Relative residual allowed when testing that a covariance lies in the range of a variance.
pub const RANGE_TOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum BeliefError {
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid variable set: {0}")]
    Variables(String),

    #[error(
        "matrix is not non-negative definite: smallest eigenvalue {min_eigenvalue:.6e} below floor -{floor:.6e}"
    )]
    NotPsd { min_eigenvalue: f64, floor: f64 },

    #[error("incoherent joint belief: {0}")]
    Coherence(CoherenceVerdict),
}

pub type Result<T> = std::result::Result<T, BeliefError>;

// ---------------------------------------------------------------------------
// Variable sets
// ---------------------------------------------------------------------------

/// Ordered, labelled index set for a vector of uncertain quantities.
///
/// The order is fixed once constructed; every matrix built over the set uses
/// it as its row/column order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawVariableSet", into = "RawVariableSet")]
pub struct VariableSet {
    names: Vec<String>,
    units: Vec<String>,
    integral: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct RawVariableSet {
    names: Vec<String>,
    units: Vec<String>,
    integral: Vec<bool>,
}

impl TryFrom<RawVariableSet> for VariableSet {
    type Error = BeliefError;

    fn try_from(raw: RawVariableSet) -> Result<Self> {
        VariableSet::new(raw.names, raw.units, raw.integral)
    }
}

impl From<VariableSet> for RawVariableSet {
    fn from(v: VariableSet) -> Self {
        RawVariableSet {
            names: v.names,
            units: v.units,
            integral: v.integral,
        }
    }
}

impl VariableSet {
    pub fn new(names: Vec<String>, units: Vec<String>, integral: Vec<bool>) -> Result<Self> {
        if names.len() != units.len() || names.len() != integral.len() {
            return Err(BeliefError::Variables(format!(
                "{} names, {} units, {} integral flags",
                names.len(),
                units.len(),
                integral.len()
            )));
        }
        let mut seen = HashSet::new();
        for name in &names {
            if name.trim().is_empty() {
                return Err(BeliefError::Variables("empty variable name".into()));
            }
            if !seen.insert(name.as_str()) {
                return Err(BeliefError::Variables(format!("duplicate variable name {name:?}")));
            }
        }
        Ok(VariableSet {
            names,
            units,
            integral,
        })
    }

    /// All variables share one unit and one integrality flag.
    pub fn uniform<S: AsRef<str>>(names: &[S], unit: &str, integral: bool) -> Result<Self> {
        let names: Vec<String> = names.iter().map(|s| s.as_ref().to_string()).collect();
        let n = names.len();
        VariableSet::new(names, vec![unit.to_string(); n], vec![integral; n])
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn units(&self) -> &[String] {
        &self.units
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn unit(&self, i: usize) -> &str {
        &self.units[i]
    }

    pub fn is_integral(&self, i: usize) -> bool {
        self.integral[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

// ---------------------------------------------------------------------------
// Matrix utilities
// ---------------------------------------------------------------------------

fn ensure_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(BeliefError::InvalidMatrix(format!("{what} has non-finite entries")))
    }
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

/// Thin singular value decomposition with the numerical rank.
struct Svd {
    u: DMatrix<f64>,
    v: DMatrix<f64>,
    singular_values: DVector<f64>,
    /// Number of singular values above `RANK_TOL * sigma_max`.
    rank: usize,
}

// nalgebra's bidiagonal SVD can return a factorisation that does not
// reconstruct its input on rank-deficient matrices, so the decomposition is
// delegated to faer.
fn svd(m: &DMatrix<f64>) -> Result<Svd> {
    ensure_finite(m, "input")?;
    let (rows, cols) = m.shape();
    let f = faer::Mat::<f64>::from_fn(rows, cols, |i, j| m[(i, j)])
        .thin_svd()
        .map_err(|_| BeliefError::InvalidMatrix("singular value decomposition did not converge".into()))?;
    let k = rows.min(cols);
    let s = f.S().column_vector();
    let (fu, fv) = (f.U(), f.V());
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let singular_values = DVector::from_iterator(k, order.iter().map(|&c| s[c]));
    let u = DMatrix::from_fn(rows, k, |i, c| fu[(i, order[c])]);
    let v = DMatrix::from_fn(cols, k, |i, c| fv[(i, order[c])]);
    let sigma_max = singular_values.iter().fold(0.0_f64, |a, &x| a.max(x));
    let cutoff = RANK_TOL * sigma_max;
    let rank = if sigma_max > 0.0 {
        singular_values.iter().filter(|&&x| x > cutoff).count()
    } else {
        0
    };
    Ok(Svd {
        u,
        v,
        singular_values,
        rank,
    })
}

/// Moore-Penrose generalised inverse via the singular value decomposition.
///
/// Singular values below `RANK_TOL * sigma_max` are zeroed, so exactly
/// rank-deficient inputs give the exact pseudoinverse of their numerical
/// range.
pub fn pseudo_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Ok(DMatrix::zeros(cols, rows));
    }
    let f = svd(m)?;
    let r = f.rank;
    let v_scaled = DMatrix::from_fn(cols, r, |i, c| f.v[(i, c)] / f.singular_values[c]);
    Ok(v_scaled * f.u.columns(0, r).transpose())
}

/// Returns `(M + Mᵀ)/2` and the largest absolute asymmetry found.
pub fn symmetrize(m: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let t = m.transpose();
    let asym = (m - &t).iter().fold(0.0_f64, |a, x| a.max(x.abs()));
    ((m + t) * 0.5, asym)
}

/// Symmetrizes `m`, logging a warning when the asymmetry exceeds `SYM_TOL`.
pub fn symmetrize_checked(m: &DMatrix<f64>, what: &str) -> DMatrix<f64> {
    let (sym, asym) = symmetrize(m);
    let scale = max_abs(m);
    if asym > SYM_TOL * scale {
        log::warn!("{what}: asymmetry {asym:.3e} exceeds tolerance, symmetrized");
    }
    sym
}

/// Eigenvalue summary of a symmetric matrix against the relative PSD floor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsdCheck {
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
    pub floor: f64,
}

impl PsdCheck {
    pub fn is_psd(&self) -> bool {
        self.min_eigenvalue >= -self.floor
    }

    /// Strictly positive definite beyond the floor.
    pub fn is_pd(&self) -> bool {
        self.min_eigenvalue > self.floor
    }
}

fn eigenvalues(m: &DMatrix<f64>) -> DVector<f64> {
    let (sym, _) = symmetrize(m);
    SymmetricEigen::new(sym).eigenvalues
}

/// Checks non-negative definiteness with the floor `PSD_TOL * max(|λ|, scale)`.
///
/// `scale` lets callers anchor the floor to a related matrix (for example the
/// prior variance a residual variance was computed from).
pub fn psd_check_scaled(m: &DMatrix<f64>, scale: f64) -> PsdCheck {
    if m.nrows() == 0 {
        return PsdCheck {
            min_eigenvalue: 0.0,
            max_eigenvalue: 0.0,
            floor: 0.0,
        };
    }
    let ev = eigenvalues(m);
    let min = ev.min();
    let max = ev.max();
    let magnitude = ev.iter().fold(0.0_f64, |a, x| a.max(x.abs())).max(scale.abs());
    PsdCheck {
        min_eigenvalue: min,
        max_eigenvalue: max,
        floor: PSD_TOL * magnitude,
    }
}

pub fn psd_check(m: &DMatrix<f64>) -> PsdCheck {
    psd_check_scaled(m, 0.0)
}

/// Result of the opt-in repair of a slightly indefinite matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsdRepair {
    pub min_eigenvalue_before: f64,
    pub frobenius_distance: f64,
}

/// Clips negative eigenvalues to zero. Returns the repaired matrix and the
/// Frobenius distance moved.
pub fn clip_to_psd(m: &DMatrix<f64>) -> (DMatrix<f64>, PsdRepair) {
    let (sym, _) = symmetrize(m);
    let eig = SymmetricEigen::new(sym.clone());
    let min_before = if eig.eigenvalues.is_empty() { 0.0 } else { eig.eigenvalues.min() };
    let clipped = eig.eigenvalues.map(|x| x.max(0.0));
    let repaired = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    let (repaired, _) = symmetrize(&repaired);
    let distance = (&repaired - &sym).norm();
    (
        repaired,
        PsdRepair {
            min_eigenvalue_before: min_before,
            frobenius_distance: distance,
        },
    )
}

// ---------------------------------------------------------------------------
// Belief specifications
// ---------------------------------------------------------------------------

/// Previsions and a coherent variance matrix over a named variable vector.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefSpec {
    variables: VariableSet,
    prevision: DVector<f64>,
    covariance: DMatrix<f64>,
}

impl BeliefSpec {
    /// Validates and stores a specification. The covariance is symmetrized;
    /// indefinite matrices are rejected.
    pub fn new(variables: VariableSet, prevision: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let covariance = Self::validated_covariance(&variables, &prevision, &covariance)?;
        let check = psd_check(&covariance);
        if !check.is_psd() {
            return Err(BeliefError::NotPsd {
                min_eigenvalue: check.min_eigenvalue,
                floor: check.floor,
            });
        }
        Ok(BeliefSpec {
            variables,
            prevision,
            covariance,
        })
    }

    /// Like [`BeliefSpec::new`] but clips negative eigenvalues instead of
    /// rejecting. The repair report is returned only when a repair happened.
    pub fn new_with_repair(
        variables: VariableSet,
        prevision: DVector<f64>,
        covariance: DMatrix<f64>,
    ) -> Result<(Self, Option<PsdRepair>)> {
        let covariance = Self::validated_covariance(&variables, &prevision, &covariance)?;
        if psd_check(&covariance).is_psd() {
            return Ok((
                BeliefSpec {
                    variables,
                    prevision,
                    covariance,
                },
                None,
            ));
        }
        let (repaired, report) = clip_to_psd(&covariance);
        log::warn!(
            "covariance repaired: min eigenvalue {:.3e}, Frobenius distance {:.3e}",
            report.min_eigenvalue_before,
            report.frobenius_distance
        );
        Ok((
            BeliefSpec {
                variables,
                prevision,
                covariance: repaired,
            },
            Some(report),
        ))
    }

    fn validated_covariance(
        variables: &VariableSet,
        prevision: &DVector<f64>,
        covariance: &DMatrix<f64>,
    ) -> Result<DMatrix<f64>> {
        let q = variables.len();
        if prevision.len() != q {
            return Err(BeliefError::Shape(format!("prevision has length {}, expected {q}", prevision.len())));
        }
        if covariance.shape() != (q, q) {
            return Err(BeliefError::Shape(format!(
                "covariance is {:?}, expected ({q}, {q})",
                covariance.shape()
            )));
        }
        if prevision.iter().any(|x| !x.is_finite()) {
            return Err(BeliefError::InvalidMatrix("prevision has non-finite entries".into()));
        }
        ensure_finite(covariance, "covariance")?;
        Ok(symmetrize_checked(covariance, "covariance"))
    }

    pub fn variables(&self) -> &VariableSet {
        &self.variables
    }

    pub fn prevision(&self) -> &DVector<f64> {
        &self.prevision
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn dim(&self) -> usize {
        self.variables.len()
    }

    pub fn std_devs(&self) -> DVector<f64> {
        self.covariance.diagonal().map(|v| v.max(0.0).sqrt())
    }

    /// Correlation matrix; variables with zero variance get zero correlations
    /// and a unit diagonal.
    pub fn correlation(&self) -> DMatrix<f64> {
        correlation_from_covariance(&self.covariance)
    }
}

pub fn correlation_from_covariance(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let sd = cov.diagonal().map(|v| v.max(0.0).sqrt());
    let n = cov.nrows();
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            1.0
        } else if sd[i] > 0.0 && sd[j] > 0.0 {
            cov[(i, j)] / (sd[i] * sd[j])
        } else {
            0.0
        }
    })
}

// ---------------------------------------------------------------------------
// Joint beliefs and coherence
// ---------------------------------------------------------------------------

/// Second-order specification over two collections `B` and `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointBelief {
    pub prevision_b: DVector<f64>,
    pub prevision_d: DVector<f64>,
    pub var_b: DMatrix<f64>,
    pub var_d: DMatrix<f64>,
    /// `Cov(B, D)`, shape `|B| x |D|`.
    pub cov_bd: DMatrix<f64>,
}

impl JointBelief {
    pub fn new(
        prevision_b: DVector<f64>,
        prevision_d: DVector<f64>,
        var_b: DMatrix<f64>,
        var_d: DMatrix<f64>,
        cov_bd: DMatrix<f64>,
    ) -> Result<Self> {
        let j = JointBelief {
            prevision_b,
            prevision_d,
            var_b,
            var_d,
            cov_bd,
        };
        j.check_shapes()?;
        Ok(j)
    }

    pub fn dim_b(&self) -> usize {
        self.prevision_b.len()
    }

    pub fn dim_d(&self) -> usize {
        self.prevision_d.len()
    }

    pub fn check_shapes(&self) -> Result<()> {
        let (b, d) = (self.dim_b(), self.dim_d());
        if self.var_b.shape() != (b, b) {
            return Err(BeliefError::Shape(format!("Var(B) is {:?}, expected ({b}, {b})", self.var_b.shape())));
        }
        if self.var_d.shape() != (d, d) {
            return Err(BeliefError::Shape(format!("Var(D) is {:?}, expected ({d}, {d})", self.var_d.shape())));
        }
        if self.cov_bd.shape() != (b, d) {
            return Err(BeliefError::Shape(format!("Cov(B,D) is {:?}, expected ({b}, {d})", self.cov_bd.shape())));
        }
        Ok(())
    }

    /// The assembled `[[Var(B), Cov(B,D)], [Cov(D,B), Var(D)]]`.
    pub fn joint_variance(&self) -> DMatrix<f64> {
        let (b, d) = (self.dim_b(), self.dim_d());
        let mut m = DMatrix::zeros(b + d, b + d);
        m.view_mut((0, 0), (b, b)).copy_from(&self.var_b);
        m.view_mut((b, b), (d, d)).copy_from(&self.var_d);
        m.view_mut((0, b), (b, d)).copy_from(&self.cov_bd);
        m.view_mut((b, 0), (d, b)).copy_from(&self.cov_bd.transpose());
        m
    }
}

/// One of the three conditions that together characterise coherence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoherenceCondition {
    /// `Var(D)` is non-negative definite.
    DataVarianceNonNegative,
    /// Every column of `Cov(D,B)` lies in the range of `Var(D)`.
    CovarianceInRange,
    /// `Var(B) - Cov(B,D) Var(D)† Cov(D,B)` is non-negative definite.
    ResidualVarianceNonNegative,
}

impl fmt::Display for CoherenceCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CoherenceCondition::DataVarianceNonNegative => "Var(D) non-negative definite",
            CoherenceCondition::CovarianceInRange => "Cov(D,B) in range of Var(D)",
            CoherenceCondition::ResidualVarianceNonNegative => "Var(B) - Cov(B,D)Var(D)†Cov(D,B) non-negative definite",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionOutcome {
    pub passed: bool,
    /// Smallest eigenvalue for the definiteness conditions, largest absolute
    /// residual for the range condition.
    pub value: f64,
    /// The tolerance the value was judged against.
    pub tolerance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoherenceVerdict {
    pub data_variance: ConditionOutcome,
    pub range: ConditionOutcome,
    pub residual_variance: ConditionOutcome,
}

impl CoherenceVerdict {
    pub fn passed(&self) -> bool {
        self.data_variance.passed && self.range.passed && self.residual_variance.passed
    }

    pub fn first_failure(&self) -> Option<CoherenceCondition> {
        if !self.data_variance.passed {
            Some(CoherenceCondition::DataVarianceNonNegative)
        } else if !self.range.passed {
            Some(CoherenceCondition::CovarianceInRange)
        } else if !self.residual_variance.passed {
            Some(CoherenceCondition::ResidualVarianceNonNegative)
        } else {
            None
        }
    }
}

impl fmt::Display for CoherenceVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.first_failure() {
            None => write!(f, "coherent"),
            Some(c) => {
                let o = match c {
                    CoherenceCondition::DataVarianceNonNegative => self.data_variance,
                    CoherenceCondition::CovarianceInRange => self.range,
                    CoherenceCondition::ResidualVarianceNonNegative => self.residual_variance,
                };
                write!(f, "{c} fails (value {:.6e}, tolerance {:.3e})", o.value, o.tolerance)
            }
        }
    }
}

/// Largest entry of `C - Π C`, where `Π` projects onto the numerical range
/// of `Var(D)`. Projecting with singular vectors instead of forming
/// `Var(D) Var(D)† C` keeps the residual at rounding level for
/// ill-conditioned `Var(D)`.
pub fn range_residual(var_d: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<f64> {
    if var_d.is_empty() || c.is_empty() {
        return Ok(0.0);
    }
    let f = svd(var_d)?;
    let basis = f.u.columns(0, f.rank);
    let projected = basis * (basis.transpose() * c);
    Ok(max_abs(&(projected - c)))
}

struct Checked {
    verdict: CoherenceVerdict,
    var_d_pinv: DMatrix<f64>,
}

fn check_coherence_inner(j: &JointBelief) -> Result<Checked> {
    j.check_shapes()?;
    ensure_finite(&j.var_b, "Var(B)")?;
    ensure_finite(&j.var_d, "Var(D)")?;
    ensure_finite(&j.cov_bd, "Cov(B,D)")?;

    let var_d_check = psd_check(&j.var_d);
    let data_variance = ConditionOutcome {
        passed: var_d_check.is_psd(),
        value: var_d_check.min_eigenvalue,
        tolerance: var_d_check.floor,
    };

    let var_d_pinv = pseudo_inverse(&j.var_d)?;
    let cov_db = j.cov_bd.transpose();
    let residual = range_residual(&j.var_d, &cov_db)?;
    let scale = max_abs(&cov_db).max((max_abs(&j.var_b) * max_abs(&j.var_d)).sqrt());
    let range_tol = RANGE_TOL * scale;
    let range = ConditionOutcome {
        passed: residual <= range_tol,
        value: residual,
        tolerance: range_tol,
    };

    let schur = &j.var_b - &j.cov_bd * &var_d_pinv * &cov_db;
    let var_b_scale = j.var_b.diagonal().iter().fold(0.0_f64, |a, x| a.max(x.abs()));
    let schur_check = psd_check_scaled(&schur, var_b_scale);
    let residual_variance = ConditionOutcome {
        passed: schur_check.is_psd(),
        value: schur_check.min_eigenvalue,
        tolerance: schur_check.floor,
    };

    Ok(Checked {
        verdict: CoherenceVerdict {
            data_variance,
            range,
            residual_variance,
        },
        var_d_pinv,
    })
}

/// Tests the three conditions for joint non-negative definiteness of `(B, D)`.
pub fn check_coherence(j: &JointBelief) -> Result<CoherenceVerdict> {
    Ok(check_coherence_inner(j)?.verdict)
}

fn coherent_pinv(j: &JointBelief) -> Result<DMatrix<f64>> {
    let checked = check_coherence_inner(j)?;
    if !checked.verdict.passed() {
        return Err(BeliefError::Coherence(checked.verdict));
    }
    Ok(checked.var_d_pinv)
}

/// Adjusted expectation `P_D(B)` for an observed value of `D`.
pub fn adjust_expectation(prior: &JointBelief, observed_d: &DVector<f64>) -> Result<DVector<f64>> {
    if observed_d.len() != prior.dim_d() {
        return Err(BeliefError::Shape(format!(
            "observation has length {}, expected {}",
            observed_d.len(),
            prior.dim_d()
        )));
    }
    if observed_d.iter().any(|x| !x.is_finite()) {
        return Err(BeliefError::InvalidMatrix("observation has non-finite entries".into()));
    }
    let pinv = coherent_pinv(prior)?;
    Ok(&prior.prevision_b + &prior.cov_bd * (&pinv * (observed_d - &prior.prevision_d)))
}

/// Adjusted variance `Var_D(B)`.
pub fn adjust_variance(prior: &JointBelief) -> Result<DMatrix<f64>> {
    let pinv = coherent_pinv(prior)?;
    let resolved = &prior.cov_bd * &pinv * prior.cov_bd.transpose();
    Ok(symmetrize(&(&prior.var_b - resolved)).0)
}

/// The linear operator `Cov(B,D) Var(D)†` mapping data deviations to
/// expectation changes.
pub fn adjustment_operator(prior: &JointBelief) -> Result<DMatrix<f64>> {
    let pinv = coherent_pinv(prior)?;
    Ok(&prior.cov_bd * pinv)
}
