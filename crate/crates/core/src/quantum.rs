//! Exact two-qubit spin (x) path states and the CHSH contextuality witness.
//!
//! The state space is the 4-dimensional Hilbert space spanned by
//! `{|up,path1>, |up,path2>, |down,path1>, |down,path2>}` (index `2*spin +
//! path`). States are dense 4x4 complex density operators; the dimension is
//! fixed and tiny, so exactness beats any structure exploitation.
//!
//! The path subsystem is an exact two-mode space. Whether the two physical
//! paths overlap in real space is bookkeeping for [`crate::coherence`]; the
//! witness algebra here is unchanged by it.

use nalgebra::{Matrix2, Matrix4, SMatrix};
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// 4x4 complex matrix over the spin (x) path basis.
pub type DensityMatrix = Matrix4<Complex64>;

/// Tsirelson bound: the quantum-mechanical maximum of `|S|`.
pub const TSIRELSON_BOUND: f64 = 2.0 * std::f64::consts::SQRT_2;

/// Classical (non-contextual hidden variable) bound on `|S|`.
pub const CLASSICAL_BOUND: f64 = 2.0;

/// Elementwise tolerance for Hermiticity, unit trace, and spectrum checks.
pub const STATE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum QuantumError {
    #[error("depolarization parameter {0} outside [0, 1]")]
    DepolarizationOutOfRange(f64),
    #[error("both observables act on the {0:?} subsystem")]
    SameSubsystem(Subsystem),
    #[error("invalid density matrix: {0}")]
    InvalidDensity(String),
}

/// One of the two entangled degrees of freedom of a single neutron.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subsystem {
    Spin,
    Path,
}

/// Spin phase `alpha` and path phase `chi`, both in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhasePair {
    pub alpha: f64,
    pub chi: f64,
}

impl PhasePair {
    pub fn new(alpha: f64, chi: f64) -> Self {
        Self { alpha, chi }
    }

    /// Both phases folded into `(-pi, pi]`. Available but never forced.
    pub fn canonicalized(self) -> Self {
        Self {
            alpha: canonical_phase(self.alpha),
            chi: canonical_phase(self.chi),
        }
    }
}

/// Fold a phase into `(-pi, pi]`.
pub fn canonical_phase(x: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let mut y = x.rem_euclid(TAU);
    if y > PI {
        y -= TAU;
    }
    // rem_euclid can land exactly on -pi through rounding
    if y <= -PI {
        y += TAU;
    }
    y
}

/// An equatorial Bloch-sphere observable `cos(angle) sigma_x + sin(angle) sigma_y`
/// acting on one subsystem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlochObservable {
    pub subsystem: Subsystem,
    pub angle: f64,
}

impl BlochObservable {
    pub fn spin(angle: f64) -> Self {
        Self {
            subsystem: Subsystem::Spin,
            angle,
        }
    }

    pub fn path(angle: f64) -> Self {
        Self {
            subsystem: Subsystem::Path,
            angle,
        }
    }

    /// 2x2 matrix `[[0, e^{-i angle}], [e^{+i angle}, 0]]`.
    fn matrix(&self) -> Matrix2<Complex64> {
        let zero = Complex64::new(0.0, 0.0);
        Matrix2::new(
            zero,
            Complex64::from_polar(1.0, -self.angle),
            Complex64::from_polar(1.0, self.angle),
            zero,
        )
    }
}

/// The four measurement angles of a CHSH witness evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngleSet {
    pub alpha1: f64,
    pub alpha2: f64,
    pub chi1: f64,
    pub chi2: f64,
}

impl AngleSet {
    pub fn new(alpha1: f64, alpha2: f64, chi1: f64, chi2: f64) -> Self {
        Self {
            alpha1,
            alpha2,
            chi1,
            chi2,
        }
    }

    /// The angle choice used in the Wollaston-prism protocol:
    /// `alpha1 = -3pi/4`, `alpha2 = -pi/4`, `chi1 = -3pi/2`, `chi2 = -pi`.
    ///
    /// Satisfies `alpha1 + chi1 = -pi/4 (mod 2pi)` and
    /// `alpha2 - alpha1 = chi2 - chi1 = pi/2`, which maximizes the violation.
    pub fn mwp_protocol() -> Self {
        use std::f64::consts::PI;
        Self {
            alpha1: -3.0 * PI / 4.0,
            alpha2: -PI / 4.0,
            chi1: -3.0 * PI / 2.0,
            chi2: -PI,
        }
    }
}

/// Density operator of one neutron's spin (x) path state.
///
/// Invariants maintained by every constructor: Hermitian to 1e-12
/// elementwise, unit trace to 1e-12, eigenvalues >= -1e-12.
#[derive(Debug, Clone, PartialEq)]
pub struct SpinPathState {
    density: DensityMatrix,
}

impl SpinPathState {
    /// Spin-depolarized Bell state.
    ///
    /// `p * |Psi><Psi| + (1 - p) * (I_spin/2) (x) Tr_spin|Psi><Psi|` with
    /// `|Psi> = (|up,path1> + |down,path2>)/sqrt(2)`. The path marginal of the
    /// Bell state is maximally mixed, so the second term is `I/4`.
    ///
    /// `p` plays the role of the measured beam polarization: the maximum
    /// witness over angles is `p * 2 sqrt(2)`.
    pub fn bell_state(depolarization: f64) -> Result<Self, QuantumError> {
        if !(0.0..=1.0).contains(&depolarization) {
            return Err(QuantumError::DepolarizationOutOfRange(depolarization));
        }
        let z = Complex64::new(0.0, 0.0);
        let half = Complex64::new(0.5, 0.0);
        let mut density = DensityMatrix::from_element(z);
        // |Psi><Psi| has 1/2 at the four corners of the (0,3) block.
        density[(0, 0)] = half;
        density[(0, 3)] = half;
        density[(3, 0)] = half;
        density[(3, 3)] = half;
        density *= Complex64::new(depolarization, 0.0);
        let mixed = Complex64::new((1.0 - depolarization) / 4.0, 0.0);
        for i in 0..4 {
            density[(i, i)] += mixed;
        }
        Ok(Self { density })
    }

    /// Wrap an externally built density matrix, validating the invariants.
    pub fn from_density(density: DensityMatrix) -> Result<Self, QuantumError> {
        let state = Self { density };
        state.validate()?;
        Ok(state)
    }

    /// Convex combination `weight * a + (1 - weight) * b`.
    pub fn blend(weight: f64, a: &Self, b: &Self) -> Result<Self, QuantumError> {
        if !(0.0..=1.0).contains(&weight) {
            return Err(QuantumError::DepolarizationOutOfRange(weight));
        }
        let w = Complex64::new(weight, 0.0);
        let v = Complex64::new(1.0 - weight, 0.0);
        Self::from_density(a.density * w + b.density * v)
    }

    pub fn density(&self) -> &DensityMatrix {
        &self.density
    }

    pub fn validate(&self) -> Result<(), QuantumError> {
        for i in 0..4 {
            for j in 0..4 {
                let diff = self.density[(i, j)] - self.density[(j, i)].conj();
                if diff.norm() > STATE_TOLERANCE {
                    return Err(QuantumError::InvalidDensity(format!(
                        "not Hermitian at ({i},{j}): residual {:.3e}",
                        diff.norm()
                    )));
                }
            }
        }
        let trace = self.trace();
        if (trace - 1.0).abs() > STATE_TOLERANCE {
            return Err(QuantumError::InvalidDensity(format!(
                "trace {trace} differs from 1"
            )));
        }
        let min = self
            .eigenvalues()
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        if min < -STATE_TOLERANCE {
            return Err(QuantumError::InvalidDensity(format!(
                "negative eigenvalue {min:.3e}"
            )));
        }
        Ok(())
    }

    pub fn trace(&self) -> f64 {
        (0..4).map(|i| self.density[(i, i)].re).sum()
    }

    /// `Tr(rho^2)`; 1 for pure states, 1/4 for the maximally mixed state.
    pub fn purity(&self) -> f64 {
        (self.density * self.density)
            .diagonal()
            .iter()
            .map(|c| c.re)
            .sum()
    }

    /// Eigenvalues in ascending order.
    ///
    /// Computed through the real symmetric embedding `[[Re, -Im], [Im, Re]]`,
    /// whose spectrum is the Hermitian spectrum doubled.
    pub fn eigenvalues(&self) -> [f64; 4] {
        let mut embed = SMatrix::<f64, 8, 8>::zeros();
        for i in 0..4 {
            for j in 0..4 {
                let z = self.density[(i, j)];
                embed[(i, j)] = z.re;
                embed[(i + 4, j + 4)] = z.re;
                embed[(i, j + 4)] = -z.im;
                embed[(i + 4, j)] = z.im;
            }
        }
        let mut doubled: Vec<f64> = embed.symmetric_eigen().eigenvalues.iter().copied().collect();
        doubled.sort_by(f64::total_cmp);
        [doubled[0], doubled[2], doubled[4], doubled[6]]
    }

    /// Apply the spin and path phase shifters: the `|down>` branch gains
    /// `e^{i alpha}` and the `|path2>` branch gains `e^{i chi}`.
    pub fn apply_phases(&self, phases: PhasePair) -> Self {
        let u = [
            Complex64::new(1.0, 0.0),
            Complex64::from_polar(1.0, phases.chi),
            Complex64::from_polar(1.0, phases.alpha),
            Complex64::from_polar(1.0, phases.alpha + phases.chi),
        ];
        let mut density = self.density;
        for i in 0..4 {
            for j in 0..4 {
                density[(i, j)] = u[i] * self.density[(i, j)] * u[j].conj();
            }
        }
        Self { density }
    }

    /// `Tr(rho sigma^s_u (x) sigma^p_v)` in `[-1, 1]`.
    ///
    /// The two observables may be passed in either order; they must act on
    /// distinct subsystems.
    pub fn expectation(
        &self,
        a: BlochObservable,
        b: BlochObservable,
    ) -> Result<f64, QuantumError> {
        if a.subsystem == b.subsystem {
            return Err(QuantumError::SameSubsystem(a.subsystem));
        }
        let (spin, path) = match a.subsystem {
            Subsystem::Spin => (a, b),
            Subsystem::Path => (b, a),
        };
        let op = spin.matrix().kronecker(&path.matrix());
        Ok((self.density * op).diagonal().iter().map(|c| c.re).sum())
    }

    /// CHSH witness `S = E(a1,c1) + E(a1,c2) + E(a2,c1) - E(a2,c2)`.
    ///
    /// `|S| <= 2 sqrt(2)` for every quantum state; separable states obey
    /// `|S| <= 2`.
    pub fn chsh_witness(&self, angles: &AngleSet) -> f64 {
        let e = |alpha: f64, chi: f64| {
            self.expectation(BlochObservable::spin(alpha), BlochObservable::path(chi))
                .expect("spin/path observables are on distinct subsystems")
        };
        e(angles.alpha1, angles.chi1) + e(angles.alpha1, angles.chi2)
            + e(angles.alpha2, angles.chi1)
            - e(angles.alpha2, angles.chi2)
    }

    /// `Tr(rho P^s(alpha) (x) P^p(chi))` where `P(theta)` projects onto
    /// `(|0> + e^{i theta}|1>)/sqrt(2)` of each subsystem.
    ///
    /// For the pure Bell state this equals `(cos(alpha + chi) + 1)/4`; the
    /// detector count probability is twice this value.
    pub fn project_plus_x_both(&self, phases: PhasePair) -> f64 {
        let proj = |theta: f64| {
            let half = Complex64::new(0.5, 0.0);
            Matrix2::new(
                half,
                Complex64::from_polar(0.5, -theta),
                Complex64::from_polar(0.5, theta),
                half,
            )
        };
        let op = proj(phases.alpha).kronecker(&proj(phases.chi));
        (self.density * op).diagonal().iter().map(|c| c.re).sum()
    }

    /// Probability of a count in the `+x` spin channel after interference.
    ///
    /// Twice [`Self::project_plus_x_both`]; `(1 + p cos(alpha + chi))/2` for
    /// the depolarized Bell state.
    pub fn detection_probability(&self, phases: PhasePair) -> f64 {
        2.0 * self.project_plus_x_both(phases)
    }
}

/// Random mixed state drawn from the Ginibre ensemble: `G G^dag / Tr(G G^dag)`.
pub fn random_state<R: Rng + ?Sized>(rng: &mut R) -> SpinPathState {
    let g = DensityMatrix::from_fn(|_, _| {
        Complex64::new(standard_normal(rng), standard_normal(rng))
    });
    let mut rho = g * g.adjoint();
    let trace: f64 = rho.diagonal().iter().map(|c| c.re).sum();
    rho /= Complex64::new(trace, 0.0);
    SpinPathState { density: rho }
}

/// Random separable state: a convex mixture of up to four products of
/// single-qubit states with Bloch vectors inside the unit ball.
pub fn random_separable_state<R: Rng + ?Sized>(rng: &mut R) -> SpinPathState {
    let terms = rng.gen_range(1..=4);
    let mut weights: Vec<f64> = (0..terms).map(|_| rng.gen_range(0.0..1.0_f64)).collect();
    let total: f64 = weights.iter().sum();
    if total == 0.0 {
        weights = vec![1.0 / terms as f64; terms];
    } else {
        weights.iter_mut().for_each(|w| *w /= total);
    }
    let mut rho = DensityMatrix::from_element(Complex64::new(0.0, 0.0));
    for w in weights {
        let spin = random_qubit(rng);
        let path = random_qubit(rng);
        rho += spin.kronecker(&path) * Complex64::new(w, 0.0);
    }
    SpinPathState { density: rho }
}

/// Single-qubit density matrix with a Bloch vector uniform in the unit ball.
fn random_qubit<R: Rng + ?Sized>(rng: &mut R) -> Matrix2<Complex64> {
    loop {
        let x = rng.gen_range(-1.0..1.0_f64);
        let y = rng.gen_range(-1.0..1.0_f64);
        let z = rng.gen_range(-1.0..1.0_f64);
        if x * x + y * y + z * z <= 1.0 {
            return Matrix2::new(
                Complex64::new((1.0 + z) / 2.0, 0.0),
                Complex64::new(x / 2.0, -y / 2.0),
                Complex64::new(x / 2.0, y / 2.0),
                Complex64::new((1.0 - z) / 2.0, 0.0),
            );
        }
    }
}

fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // Box-Muller; avoids pulling rand_distr into this module.
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let v: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    (-2.0 * u.ln()).sqrt() * v.cos()
}
