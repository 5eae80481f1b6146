//! Central spin coupled to a bath of non-interacting nuclear spins.
//!
//! Hilbert-space ordering is (central, bath₁, …, bath_N) with |z+⟩ as the
//! first basis state of every factor, so the central spin is the leading
//! Kronecker factor everywhere in this crate.

use std::f64::consts::FRAC_1_SQRT_2;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{
    self, kron, kron_all, pauli, ComplexMatrix, LinalgError, C64,
};

/// Tolerance for the density-matrix validity checks.
pub const DENSITY_TOL: f64 = 1e-9;
/// Default cutoff below which a measurement branch is treated as impossible.
pub const DEFAULT_PROB_FLOOR: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("measurement branch probability {prob:.3e} is at or below the floor {floor:.1e}")]
    NormalizationUnderflow { prob: f64, floor: f64 },
    #[error("invalid model parameters: {0}")]
    InvalidParams(String),
    #[error("invalid density matrix: {0}")]
    InvalidState(String),
}

/// Scale factors mapping Pauli matrices onto the spin operators of the Hamiltonian.
///
/// `S^(z) = central_scale · σ_z` and `I^(a) = bath_scale · σ_a`. Both default
/// to one, the only combination that matches the known reference sequences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpinConvention {
    pub central_scale: f64,
    pub bath_scale: f64,
}

impl Default for SpinConvention {
    fn default() -> Self {
        Self {
            central_scale: 1.0,
            bath_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Number of nuclear spins.
    pub n_bath: usize,
    /// Coupling vector of every nuclear spin to the central spin.
    pub couplings: Vec<[f64; 3]>,
    /// Nuclear Zeeman frequency.
    pub omega: f64,
    /// Free-evolution interval per step.
    pub tau: f64,
    #[serde(default)]
    pub convention: SpinConvention,
}

impl Default for ModelParams {
    /// Two nuclear spins on a line along x: ω = 1/2, g_k = (1, 0, 0), τ = 1.
    fn default() -> Self {
        Self::linear_chain(2, 0.5, 1.0)
    }
}

impl ModelParams {
    /// `n_bath` spins all coupled with g = (1, 0, 0).
    pub fn linear_chain(n_bath: usize, omega: f64, tau: f64) -> Self {
        Self {
            n_bath,
            couplings: vec![[1.0, 0.0, 0.0]; n_bath],
            omega,
            tau,
            convention: SpinConvention::default(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.couplings.len() != self.n_bath {
            return Err(ModelError::InvalidParams(format!(
                "expected {} coupling vectors, got {}",
                self.n_bath,
                self.couplings.len()
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(ModelError::InvalidParams(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        let finite = self.omega.is_finite()
            && self.couplings.iter().flatten().all(|g| g.is_finite())
            && self.convention.central_scale.is_finite()
            && self.convention.bath_scale.is_finite();
        if !finite {
            return Err(ModelError::InvalidParams("non-finite parameter".into()));
        }
        if self.n_bath > 10 {
            return Err(ModelError::InvalidParams(format!(
                "bath of {} spins is beyond dense simulation",
                self.n_bath
            )));
        }
        Ok(())
    }

    /// Dimension of the full Hilbert space, 2^(N+1).
    pub fn dim(&self) -> usize {
        1 << (self.n_bath + 1)
    }

    /// Dimension of the bath alone, 2^N.
    pub fn bath_dim(&self) -> usize {
        1 << self.n_bath
    }
}

/// Builds the Hamiltonian
/// `H = S^(z) ⊗ Σ_k g_k · I_k + ω Σ_k 1 ⊗ I_k^(z)`.
pub fn build_hamiltonian(p: &ModelParams) -> ComplexMatrix {
    let dim = p.dim();
    let i2 = ComplexMatrix::identity(2);
    let sz = pauli::z().scale_real(p.convention.central_scale);
    let s_bath = p.convention.bath_scale;
    let bath_ops = [pauli::x(), pauli::y(), pauli::z()];

    // operator acting as `op` on bath spin k and identity elsewhere
    let bath_embedded = |k: usize, op: &ComplexMatrix| {
        let factors: Vec<&ComplexMatrix> = (0..p.n_bath)
            .map(|j| if j == k { op } else { &i2 })
            .collect();
        kron_all(factors)
    };

    let mut h = ComplexMatrix::zeros(dim, dim);
    for (k, g) in p.couplings.iter().enumerate() {
        let mut coupling = ComplexMatrix::zeros(2, 2);
        for (ga, sigma) in g.iter().zip(&bath_ops) {
            if *ga != 0.0 {
                coupling = &coupling + &sigma.scale_real(ga * s_bath);
            }
        }
        h = &h + &kron(&sz, &bath_embedded(k, &coupling));
        let zeeman = bath_ops[2].scale_real(p.omega * s_bath);
        h = &h + &kron(&i2, &bath_embedded(k, &zeeman));
    }
    h
}

/// U(t) = exp(−iHt).
pub fn build_propagator(p: &ModelParams, duration: f64) -> Result<ComplexMatrix, ModelError> {
    if duration.is_nan() || duration < 0.0 {
        return Err(ModelError::InvalidParams(format!(
            "evolution time must be non-negative, got {duration}"
        )));
    }
    Ok(linalg::expm_i_hermitian(&build_hamiltonian(p), duration)?)
}

/// Hermitian, unit-trace, positive-semidefinite matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityMatrix {
    matrix: ComplexMatrix,
}

impl DensityMatrix {
    /// Wraps a matrix after checking every density-matrix invariant.
    pub fn new(matrix: ComplexMatrix) -> Result<Self, ModelError> {
        let rho = Self { matrix };
        rho.validate()?;
        Ok(rho)
    }

    /// Wraps a matrix without checks. Use on results of trace- and
    /// positivity-preserving maps applied to valid states.
    pub fn new_unchecked(matrix: ComplexMatrix) -> Self {
        debug_assert!(matrix.is_square());
        Self { matrix }
    }

    /// |ψ⟩⟨ψ| for a normalized column vector.
    pub fn pure(psi: &ComplexMatrix) -> Result<Self, ModelError> {
        Self::new(ComplexMatrix::outer(psi))
    }

    pub fn maximally_mixed(dim: usize) -> Self {
        Self::new_unchecked(ComplexMatrix::identity(dim).scale_real(1.0 / dim as f64))
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    pub fn matrix(&self) -> &ComplexMatrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> ComplexMatrix {
        self.matrix
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let m = &self.matrix;
        if !m.is_square() {
            return Err(ModelError::InvalidState("matrix is not square".into()));
        }
        let herm = m.hermiticity_error();
        if herm > DENSITY_TOL {
            return Err(ModelError::InvalidState(format!(
                "not Hermitian (relative deviation {herm:.3e})"
            )));
        }
        let tr = m.trace();
        if (tr.re - 1.0).abs() > DENSITY_TOL || tr.im.abs() > DENSITY_TOL {
            return Err(ModelError::InvalidState(format!("trace is {tr}")));
        }
        let eig = linalg::hermitian_eig(m)?;
        let lowest = eig.eigenvalues[0];
        if lowest < -DENSITY_TOL {
            return Err(ModelError::InvalidState(format!(
                "negative eigenvalue {lowest:.3e}"
            )));
        }
        Ok(())
    }

    pub fn kron(&self, other: &DensityMatrix) -> DensityMatrix {
        Self::new_unchecked(kron(&self.matrix, &other.matrix))
    }

    /// Reduced state of everything but the leading factor of dimension `dim_first`.
    pub fn trace_out_first(&self, dim_first: usize) -> Result<DensityMatrix, ModelError> {
        Ok(Self::new_unchecked(linalg::partial_trace_first(
            &self.matrix,
            dim_first,
        )?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
    Z,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sign {
    Plus,
    Minus,
}

/// Single-spin eigenstate of σ_axis with eigenvalue `sign`, as a column vector.
pub fn spin_ket(axis: Axis, sign: Sign) -> ComplexMatrix {
    let h = FRAC_1_SQRT_2;
    let s = match sign {
        Sign::Plus => 1.0,
        Sign::Minus => -1.0,
    };
    let amps = match (axis, sign) {
        (Axis::Z, Sign::Plus) => [C64::new(1.0, 0.0), C64::new(0.0, 0.0)],
        (Axis::Z, Sign::Minus) => [C64::new(0.0, 0.0), C64::new(1.0, 0.0)],
        (Axis::X, _) => [C64::new(h, 0.0), C64::new(s * h, 0.0)],
        (Axis::Y, _) => [C64::new(h, 0.0), C64::new(0.0, s * h)],
    };
    ComplexMatrix::column(&amps)
}

/// `|axis,sign⟩⟨axis,sign| ⊗ 1` on the full Hilbert space.
#[derive(Debug, Clone)]
pub struct CentralProjector {
    pub axis: Axis,
    pub sign: Sign,
    matrix: ComplexMatrix,
}

impl CentralProjector {
    pub fn new(axis: Axis, sign: Sign, n_bath: usize) -> Self {
        let local = ComplexMatrix::outer(&spin_ket(axis, sign));
        let matrix = kron(&local, &ComplexMatrix::identity(1 << n_bath));
        Self { axis, sign, matrix }
    }

    pub fn matrix(&self) -> &ComplexMatrix {
        &self.matrix
    }
}

/// ρ′ = U ρ U†.
pub fn evolve(rho: &DensityMatrix, u: &ComplexMatrix) -> Result<DensityMatrix, ModelError> {
    if u.rows() != rho.dim() || !u.is_square() {
        return Err(LinalgError::DimensionMismatch(format!(
            "propagator {}x{} on state of dimension {}",
            u.rows(),
            u.cols(),
            rho.dim()
        ))
        .into());
    }
    Ok(DensityMatrix::new_unchecked(
        u.matmul(rho.matrix()).matmul_adjoint(u),
    ))
}

/// Applies `P ρ P†` and renormalizes, returning the post-selected state and
/// the branch probability `tr(P ρ P†)`.
pub fn measure(
    rho: &DensityMatrix,
    p: &CentralProjector,
    floor: f64,
) -> Result<(DensityMatrix, f64), ModelError> {
    let pm = p.matrix();
    if pm.rows() != rho.dim() {
        return Err(LinalgError::DimensionMismatch(format!(
            "projector of dimension {} on state of dimension {}",
            pm.rows(),
            rho.dim()
        ))
        .into());
    }
    let projected = pm.matmul(rho.matrix()).matmul_adjoint(pm);
    let prob = projected.trace().re;
    if prob.is_nan() || prob <= floor {
        return Err(ModelError::NormalizationUnderflow { prob, floor });
    }
    let mut normalized = projected.scale_real(1.0 / prob);
    // restore exact Hermiticity lost to round-off
    let n = normalized.rows();
    for i in 0..n {
        normalized[(i, i)].im = 0.0;
        for j in i + 1..n {
            let avg = (normalized[(i, j)] + normalized[(j, i)].conj()) * 0.5;
            normalized[(i, j)] = avg;
            normalized[(j, i)] = avg.conj();
        }
    }
    // dividing by a small probability amplifies round-off into negative
    // eigenvalues, which then accumulate over long sequences; project back
    // onto the positive cone
    let eig = linalg::hermitian_eig(&normalized)?;
    let total: f64 = eig.eigenvalues.iter().map(|l| l.max(0.0)).sum();
    let normalized = eig.reconstruct_with(|l| C64::new(l.max(0.0) / total, 0.0));
    Ok((DensityMatrix::new_unchecked(normalized), prob.min(1.0)))
}

/// Probability of the projector's branch without applying it.
pub fn branch_probability(rho: &DensityMatrix, p: &CentralProjector) -> f64 {
    let pm = p.matrix();
    pm.matmul(rho.matrix()).matmul_adjoint(pm).trace().re
}

/// F(σ, ρ) = tr √(√ρ σ √ρ).
pub fn fidelity(sigma: &DensityMatrix, rho: &DensityMatrix) -> Result<f64, ModelError> {
    if sigma.dim() != rho.dim() {
        return Err(LinalgError::DimensionMismatch(format!(
            "fidelity between dimensions {} and {}",
            sigma.dim(),
            rho.dim()
        ))
        .into());
    }
    let sqrt_rho = linalg::matrix_sqrt_psd(rho.matrix())?;
    let inner = sqrt_rho.matmul(sigma.matrix()).matmul(&sqrt_rho);
    let inner = hermitian_part(&inner);
    let root = linalg::matrix_sqrt_psd(&inner)?;
    Ok(root.trace().re.clamp(0.0, 1.0))
}

/// Fidelity to a pure state, √⟨ψ|ρ|ψ⟩.
pub fn fidelity_pure(psi: &ComplexMatrix, rho: &DensityMatrix) -> f64 {
    let m = rho.matrix();
    let n = m.rows();
    debug_assert_eq!(psi.rows(), n);
    let amps = psi.as_slice();
    let mut acc = C64::new(0.0, 0.0);
    for i in 0..n {
        let mut row = C64::new(0.0, 0.0);
        for j in 0..n {
            row += m[(i, j)] * amps[j];
        }
        acc += amps[i].conj() * row;
    }
    acc.re.max(0.0).sqrt().min(1.0)
}

/// D(ρ, σ) = ½ tr|ρ − σ|.
pub fn trace_distance(rho: &DensityMatrix, sigma: &DensityMatrix) -> f64 {
    let diff = hermitian_part(&(rho.matrix() - sigma.matrix()));
    let eig = linalg::hermitian_eig(&diff).expect("difference of density matrices is Hermitian");
    0.5 * eig.eigenvalues.iter().map(|l| l.abs()).sum::<f64>()
}

/// tr(ρ ρ†).
pub fn purity(rho: &DensityMatrix) -> f64 {
    rho.matrix()
        .as_slice()
        .iter()
        .map(|z| z.norm_sqr())
        .sum()
}

fn hermitian_part(m: &ComplexMatrix) -> ComplexMatrix {
    (m + &m.adjoint()).scale_real(0.5)
}

/// The four maximally entangled two-spin states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Bell {
    #[serde(rename = "phi+")]
    PhiPlus,
    #[serde(rename = "phi-")]
    PhiMinus,
    #[serde(rename = "psi+")]
    PsiPlus,
    #[serde(rename = "psi-")]
    PsiMinus,
}

impl Bell {
    pub const ALL: [Bell; 4] = [Bell::PhiPlus, Bell::PhiMinus, Bell::PsiPlus, Bell::PsiMinus];

    pub fn name(self) -> &'static str {
        match self {
            Bell::PhiPlus => "phi+",
            Bell::PhiMinus => "phi-",
            Bell::PsiPlus => "psi+",
            Bell::PsiMinus => "psi-",
        }
    }
}

impl fmt::Display for Bell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Bell {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "phi+" | "phi_plus" => Ok(Bell::PhiPlus),
            "phi-" | "phi_minus" => Ok(Bell::PhiMinus),
            "psi+" | "psi_plus" => Ok(Bell::PsiPlus),
            "psi-" | "psi_minus" => Ok(Bell::PsiMinus),
            other => Err(format!("unknown Bell state '{other}'")),
        }
    }
}

/// Bell state as a 4-component column in the (z+z+, z+z−, z−z+, z−z−) basis.
pub fn bell_state(which: Bell) -> ComplexMatrix {
    let h = FRAC_1_SQRT_2;
    let amps = match which {
        Bell::PhiPlus => [h, 0.0, 0.0, h],
        Bell::PhiMinus => [h, 0.0, 0.0, -h],
        Bell::PsiPlus => [0.0, h, h, 0.0],
        Bell::PsiMinus => [0.0, h, -h, 0.0],
    };
    ComplexMatrix::column(&amps.map(|a| C64::new(a, 0.0)))
}

/// |Ψ⁻⟩^{⊗ N/2}, the steady state of a linear chain under repeated P_{x+}.
pub fn singlet_chain(n_bath: usize) -> ComplexMatrix {
    assert!(n_bath.is_multiple_of(2), "singlet chain needs an even number of spins");
    let singlet = bell_state(Bell::PsiMinus);
    (0..n_bath / 2).fold(ComplexMatrix::identity(1), |acc, _| kron(&acc, &singlet))
}
