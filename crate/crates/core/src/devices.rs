//! Beamline device parameterizations and the closed-form formulas that turn
//! instrument settings into phases, entanglement lengths, and RF frequencies.
//!
//! All angles are radians and all lengths meters internally; degree and
//! millimeter conversions live at the config boundary.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Planck constant, J s (exact SI).
pub const PLANCK: f64 = 6.626_070_15e-34;
/// Neutron mass, kg (CODATA 2018).
pub const NEUTRON_MASS: f64 = 1.674_927_498_04e-27;
/// Neutron gyromagnetic ratio magnitude, s^-1 T^-1 (CODATA 2018).
pub const NEUTRON_GYROMAGNETIC_RATIO: f64 = 1.832_471_71e8;
/// Spin-phase constant `C_alpha`, T^-1 m^-2: `alpha = C_alpha lambda B d`.
pub const C_ALPHA: f64 = 4.632e14;
/// Wollaston-prism constant `C_xi`, T^-1 m^-2:
/// `xi = C_xi lambda^2 B L cot(theta_f)`.
pub const C_XI: f64 = 1.474e14;

#[derive(Debug, Error, PartialEq)]
pub enum DeviceError {
    #[error("block angle {0} rad is singular (sin(2 phi) = 0)")]
    SingularAngle(f64),
    #[error("tent configuration requires an even block count, got {0}")]
    OddBlockCount(u32),
    #[error("beam divergence {divergence} rad exceeds block angle {angle} rad")]
    DivergenceTooLarge { divergence: f64, angle: f64 },
    #[error("film angle {0} rad is singular for the Wollaston prism")]
    SingularFilmAngle(f64),
    #[error("{name} must be positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("frequency must be nonnegative, got {0}")]
    NegativeFrequency(f64),
    #[error(
        "no closed-form entanglement length for RF flippers; supply a calibrated \
         entanglement_length_override"
    )]
    CalibrationRequired,
    #[error("invalid RF quartet: {0}")]
    InvalidQuartet(String),
    #[error("invalid transmission curve: {0}")]
    InvalidTransmission(String),
}

/// The fundamental constants the device formulas depend on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalConstants {
    pub c_alpha: f64,
    pub c_xi: f64,
    pub planck: f64,
    pub neutron_mass: f64,
}

impl Default for PhysicalConstants {
    fn default() -> Self {
        Self {
            c_alpha: C_ALPHA,
            c_xi: C_XI,
            planck: PLANCK,
            neutron_mass: NEUTRON_MASS,
        }
    }
}

impl PhysicalConstants {
    /// Relative deviation of `c_alpha` from `gamma_n m_n / h`.
    pub fn gyromagnetic_consistency(&self, gamma_n: f64) -> f64 {
        let implied = gamma_n * self.neutron_mass / self.planck;
        (self.c_alpha - implied).abs() / implied
    }
}

/// Quartz transmission `T(|chi|)`: piecewise-linear interpolation of a user
/// table, constant 1 when the table is empty.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TransmissionCurve {
    points: Vec<(f64, f64)>,
}

impl TransmissionCurve {
    /// Unit transmission everywhere.
    pub fn unit() -> Self {
        Self { points: Vec::new() }
    }

    /// Build from `(|chi|, T)` pairs; `|chi|` must be nonnegative and strictly
    /// increasing, `T` within `[0, 1]`.
    pub fn from_points(mut points: Vec<(f64, f64)>) -> Result<Self, DeviceError> {
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        for window in points.windows(2) {
            if window[0].0 == window[1].0 {
                return Err(DeviceError::InvalidTransmission(format!(
                    "duplicate |chi| abscissa {}",
                    window[0].0
                )));
            }
        }
        for &(chi, t) in &points {
            if chi < 0.0 || !chi.is_finite() {
                return Err(DeviceError::InvalidTransmission(format!(
                    "|chi| must be finite and nonnegative, got {chi}"
                )));
            }
            if !(0.0..=1.0).contains(&t) {
                return Err(DeviceError::InvalidTransmission(format!(
                    "T must lie in [0, 1], got {t}"
                )));
            }
        }
        Ok(Self { points })
    }

    pub fn is_unit(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    /// Transmission at path phase `chi` (only `|chi|` matters). Clamps to the
    /// end values outside the tabulated range.
    pub fn value(&self, chi: f64) -> f64 {
        let x = chi.abs();
        if self.points.is_empty() {
            return 1.0;
        }
        if x <= self.points[0].0 {
            return self.points[0].1;
        }
        if let Some(&(last_x, last_t)) = self.points.last() {
            if x >= last_x {
                return last_t;
            }
        }
        let idx = self.points.partition_point(|&(px, _)| px < x);
        let (x0, t0) = self.points[idx - 1];
        let (x1, t1) = self.points[idx];
        t0 + (t1 - t0) * (x - x0) / (x1 - x0)
    }
}

/// A set of `m` quartz blocks inclined at `+-angle` to the beam axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuartzBlockSet {
    /// Number of blocks (usually 2 or 4); must be even in tent configuration.
    pub count: u32,
    /// Block angle from the beam axis, radians, in (0, pi/2).
    pub angle: f64,
    /// Coherent scattering length density of quartz, m^-2.
    pub sld: f64,
    /// Measured transmission vs `|chi|`.
    pub transmission: TransmissionCurve,
}

/// A coil applying a small z field over a known path length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpinPhaseCoil {
    /// Field, tesla.
    pub field: f64,
    /// Path length through the field, meters.
    pub path_length: f64,
}

/// A pair of magnetic Wollaston prisms acting as entangler or disentangler.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MwpPair {
    /// Field inside the prisms, tesla.
    pub field: f64,
    /// Distance between prism centers, meters.
    pub separation: f64,
    /// Angle of the superconducting film to the beam, radians.
    pub film_angle: f64,
}

/// Distances between RF flipper centers and the sample position, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlipperDistances {
    pub l12: f64,
    pub l2s: f64,
    pub ls3: f64,
    pub l34: f64,
}

impl FlipperDistances {
    pub fn validate(&self) -> Result<(), DeviceError> {
        for (name, value) in [
            ("L12", self.l12),
            ("L2S", self.l2s),
            ("LS3", self.ls3),
            ("L34", self.l34),
        ] {
            if value <= 0.0 || !value.is_finite() {
                return Err(DeviceError::NonPositive { name, value });
            }
        }
        Ok(())
    }
}

/// RF flipper operating mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RfMode {
    /// Equal frequencies; the guide field is reversed between RF2 and RF3.
    Conventional,
    /// Frequencies tuned to the focusing condition so the wavepacket
    /// branches overlap at the sample.
    Overlap,
}

impl std::fmt::Display for RfMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RfMode::Conventional => write!(f, "conventional"),
            RfMode::Overlap => write!(f, "overlap"),
        }
    }
}

/// The four RF flippers of an entangler-disentangler assembly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RfFlipperQuartet {
    /// Frequencies nu_1..nu_4, hertz.
    pub frequencies: [f64; 4],
    /// Flipper inclinations theta^RF_1..4 to the beam, radians.
    pub angles: [f64; 4],
    pub distances: FlipperDistances,
    pub mode: RfMode,
    /// Calibrated transverse entanglement length, meters. There is no
    /// closed-form optical formula for RF flippers, so this must be measured.
    pub entanglement_length_override: Option<f64>,
}

/// Relative tolerance on the focusing conditions for overlap-mode quartets.
pub const FOCUSING_TOLERANCE: f64 = 1e-3;

impl RfFlipperQuartet {
    pub fn validate(&self) -> Result<(), DeviceError> {
        self.distances.validate()?;
        for &nu in &self.frequencies {
            if nu < 0.0 {
                return Err(DeviceError::NegativeFrequency(nu));
            }
        }
        match self.mode {
            RfMode::Conventional => {
                let nu1 = self.frequencies[0];
                if self
                    .frequencies
                    .iter()
                    .any(|&nu| (nu - nu1).abs() > 1e-9 * nu1.max(1.0))
                {
                    return Err(DeviceError::InvalidQuartet(format!(
                        "conventional mode requires equal frequencies, got {:?}",
                        self.frequencies
                    )));
                }
            }
            RfMode::Overlap => {
                // Each focusing equation is checked against the stored values
                // of the frequencies it references, so published tables
                // rounded to the kilohertz stay within tolerance.
                let [nu1, nu2, nu3, nu4] = self.frequencies;
                let d = &self.distances;
                let checks = [
                    ("nu2", nu2, (d.l12 + d.l2s) / d.l2s * nu1),
                    ("nu3", nu3, (d.ls3 + d.l34) / d.l34 * (nu2 - nu1)),
                    ("nu4", nu4, nu3 - nu2 + nu1),
                ];
                for (name, stored, expected) in checks {
                    let scale = expected.abs().max(1.0);
                    if (stored - expected).abs() > FOCUSING_TOLERANCE * scale {
                        return Err(DeviceError::InvalidQuartet(format!(
                            "{name} = {stored} Hz violates the focusing condition \
                             (expected {expected:.1} Hz within 0.1%)"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Frequencies solving the overlap-mode focusing condition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocusingSolution {
    pub nu2: f64,
    pub nu3: f64,
    pub nu4: f64,
}

/// Relative path phase from inclined quartz blocks:
/// `chi = 2 m lambda xi rho / sin(2 phi)`.
pub fn path_phase(blocks: &QuartzBlockSet, wavelength: f64, xi: f64) -> Result<f64, DeviceError> {
    if wavelength <= 0.0 || !wavelength.is_finite() {
        return Err(DeviceError::NonPositive {
            name: "wavelength",
            value: wavelength,
        });
    }
    if xi <= 0.0 || !xi.is_finite() {
        return Err(DeviceError::NonPositive {
            name: "entanglement length",
            value: xi,
        });
    }
    let s = (2.0 * blocks.angle).sin();
    if s.abs() < 1e-12 {
        return Err(DeviceError::SingularAngle(blocks.angle));
    }
    Ok(2.0 * blocks.count as f64 * wavelength * xi * blocks.sld / s)
}

/// Path phase of a tent configuration seen by a ray diverging by `divergence`:
/// half the blocks tilt to `phi + d`, half to `phi - d`, so the first-order
/// dependence on `d` cancels.
pub fn tent_phase_divergence(
    blocks: &QuartzBlockSet,
    wavelength: f64,
    xi: f64,
    divergence: f64,
) -> Result<f64, DeviceError> {
    if !blocks.count.is_multiple_of(2) {
        return Err(DeviceError::OddBlockCount(blocks.count));
    }
    if divergence.abs() >= blocks.angle {
        return Err(DeviceError::DivergenceTooLarge {
            divergence,
            angle: blocks.angle,
        });
    }
    let tilted = |delta: f64| {
        path_phase(
            &QuartzBlockSet {
                angle: blocks.angle + delta,
                ..blocks.clone()
            },
            wavelength,
            xi,
        )
    };
    Ok(0.5 * (tilted(divergence)? + tilted(-divergence)?))
}

/// Spin phase from the spin-phase coil: `alpha = C_alpha lambda B d`.
pub fn spin_phase(coil: &SpinPhaseCoil, wavelength: f64) -> f64 {
    C_ALPHA * wavelength * coil.field * coil.path_length
}

/// Transverse entanglement length of a Wollaston prism pair:
/// `xi = C_xi lambda^2 B L cot(theta_f)`.
pub fn mwp_entanglement_length(mwp: &MwpPair, wavelength: f64) -> Result<f64, DeviceError> {
    let t = mwp.film_angle.tan();
    if t.abs() < 1e-12 || !t.is_finite() {
        return Err(DeviceError::SingularFilmAngle(mwp.film_angle));
    }
    Ok(C_XI * wavelength * wavelength * mwp.field * mwp.separation / t)
}

/// Entanglement length of an RF quartet. No closed-form optics is available,
/// so this returns the calibrated override or demands one.
pub fn rf_entanglement_length(
    rf: &RfFlipperQuartet,
    _wavelength: f64,
) -> Result<f64, DeviceError> {
    rf.entanglement_length_override
        .ok_or(DeviceError::CalibrationRequired)
}

/// Solve the overlap-mode focusing condition for `nu2, nu3, nu4` given `nu1`:
///
/// ```text
/// nu2 = (L12 + L2S)/L2S * nu1
/// nu3 = (LS3 + L34)/L34 * (nu2 - nu1)
/// nu4 = nu3 - nu2 + nu1
/// ```
pub fn solve_focusing(
    nu1: f64,
    distances: &FlipperDistances,
) -> Result<FocusingSolution, DeviceError> {
    distances.validate()?;
    if nu1 < 0.0 {
        return Err(DeviceError::NegativeFrequency(nu1));
    }
    let nu2 = (distances.l12 + distances.l2s) / distances.l2s * nu1;
    let nu3 = (distances.ls3 + distances.l34) / distances.l34 * (nu2 - nu1);
    let nu4 = nu3 - nu2 + nu1;
    Ok(FocusingSolution { nu2, nu3, nu4 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_4;

    const ANGSTROM: f64 = 1e-10;

    fn instrument_distances() -> FlipperDistances {
        FlipperDistances {
            l12: 1.20,
            l2s: 2.383,
            ls3: 1.065,
            l34: 1.18,
        }
    }

    fn quartz(count: u32, angle: f64) -> QuartzBlockSet {
        QuartzBlockSet {
            count,
            angle,
            sld: 4.18e14,
            transmission: TransmissionCurve::unit(),
        }
    }

    #[test]
    fn constants_satisfy_gyromagnetic_identity() {
        let c = PhysicalConstants::default();
        assert!(c.gyromagnetic_consistency(NEUTRON_GYROMAGNETIC_RATIO) < 1e-3);
    }

    #[test]
    fn path_phase_at_45_degrees_drops_the_sine() {
        // sin(2 phi) = 1, so chi = 2 m lambda xi rho
        let blocks = quartz(2, FRAC_PI_4);
        let chi = path_phase(&blocks, 5.4 * ANGSTROM, 600e-9).unwrap();
        let expected = 2.0 * 2.0 * 5.4e-10 * 600e-9 * 4.18e14;
        assert_relative_eq!(chi, expected, epsilon = 1e-15);
        // frozen arithmetic: 0.541728 rad
        assert_abs_diff_eq!(chi, 0.541728, epsilon = 1e-9);
    }

    #[test]
    fn path_phase_without_blocks_is_zero() {
        let blocks = quartz(0, FRAC_PI_4);
        assert_eq!(path_phase(&blocks, 5.4 * ANGSTROM, 600e-9).unwrap(), 0.0);
    }

    #[test]
    fn path_phase_rejects_singular_angles() {
        for angle in [0.0, std::f64::consts::FRAC_PI_2] {
            let err = path_phase(&quartz(2, angle), 5.4 * ANGSTROM, 600e-9).unwrap_err();
            assert!(matches!(err, DeviceError::SingularAngle(_)));
        }
    }

    #[test]
    fn path_phase_matches_general_angle_oracle() {
        // independent arithmetic at a non-special angle
        let blocks = quartz(4, 0.6);
        let chi = path_phase(&blocks, 4.0 * ANGSTROM, 93e-9).unwrap();
        let oracle = 2.0 * 4.0 * 4.0e-10 * 93e-9 * 4.18e14 / (1.2_f64).sin();
        assert_relative_eq!(chi, oracle, epsilon = 1e-15);
    }

    #[test]
    fn tent_phase_equals_path_phase_at_zero_divergence() {
        let blocks = quartz(2, FRAC_PI_4);
        let tent = tent_phase_divergence(&blocks, 5.4 * ANGSTROM, 600e-9, 0.0).unwrap();
        let plain = path_phase(&blocks, 5.4 * ANGSTROM, 600e-9).unwrap();
        assert_eq!(tent, plain);
    }

    #[test]
    fn tent_phase_rejects_odd_block_count() {
        let err =
            tent_phase_divergence(&quartz(3, FRAC_PI_4), 5.4 * ANGSTROM, 600e-9, 0.01).unwrap_err();
        assert_eq!(err, DeviceError::OddBlockCount(3));
    }

    #[test]
    fn tent_phase_first_derivative_vanishes() {
        // central finite difference at zero divergence, step 1e-5
        let blocks = quartz(2, FRAC_PI_4);
        let lambda = 5.4 * ANGSTROM;
        let xi = 600e-9;
        let h = 1e-5;
        let plus = tent_phase_divergence(&blocks, lambda, xi, h).unwrap();
        let minus = tent_phase_divergence(&blocks, lambda, xi, -h).unwrap();
        let slope = (plus - minus) / (2.0 * h);
        let chi0 = path_phase(&blocks, lambda, xi).unwrap();
        assert!(
            slope.abs() < 1e-6 * chi0,
            "tent slope {slope} not flat relative to chi {chi0}"
        );
    }

    #[test]
    fn tent_phase_error_is_second_order_in_divergence() {
        // Richardson ratio: the residual at d must be ~4x the residual at d/2
        let blocks = quartz(2, 0.7);
        let lambda = 5.4 * ANGSTROM;
        let xi = 600e-9;
        let chi0 = path_phase(&blocks, lambda, xi).unwrap();
        let d = 5e-3;
        let r1 = tent_phase_divergence(&blocks, lambda, xi, d).unwrap() - chi0;
        let r2 = tent_phase_divergence(&blocks, lambda, xi, d / 2.0).unwrap() - chi0;
        let ratio = r1 / r2;
        assert!(
            (ratio - 4.0).abs() < 0.2,
            "quadratic scaling ratio {ratio} outside 4 +- 5%"
        );
    }

    #[test]
    fn spin_phase_frozen_example() {
        let coil = SpinPhaseCoil {
            field: 1e-3,
            path_length: 0.1,
        };
        let alpha = spin_phase(&coil, 5.4 * ANGSTROM);
        assert_abs_diff_eq!(alpha, 25.0128, epsilon = 1e-9);
        let off = SpinPhaseCoil {
            field: 0.0,
            path_length: 0.1,
        };
        assert_eq!(spin_phase(&off, 5.4 * ANGSTROM), 0.0);
    }

    #[test]
    fn mwp_length_reproduces_600_nm_setting() {
        // B chosen so the 5.4 A beam comes out at 600 nm exactly
        let field = 600e-9 / (C_XI * (5.4 * ANGSTROM).powi(2) * 0.21);
        let mwp = MwpPair {
            field,
            separation: 0.21,
            film_angle: FRAC_PI_4,
        };
        let xi = mwp_entanglement_length(&mwp, 5.4 * ANGSTROM).unwrap();
        assert_relative_eq!(xi, 600e-9, epsilon = 1e-12);
        // the quoted ~66.5 mT setting lands within half a nanometer
        let approx_field = MwpPair {
            field: 66.5e-3,
            ..mwp
        };
        let xi = mwp_entanglement_length(&approx_field, 5.4 * ANGSTROM).unwrap();
        assert!((xi - 600e-9).abs() < 0.5e-9);
    }

    #[test]
    fn mwp_length_is_quadratic_in_wavelength() {
        let mwp = MwpPair {
            field: 66.5e-3,
            separation: 0.21,
            film_angle: FRAC_PI_4,
        };
        let x1 = mwp_entanglement_length(&mwp, 4.0 * ANGSTROM).unwrap();
        let x2 = mwp_entanglement_length(&mwp, 8.0 * ANGSTROM).unwrap();
        assert_relative_eq!(x2, 4.0 * x1, epsilon = 1e-12);
        let off = MwpPair { field: 0.0, ..mwp };
        assert_eq!(mwp_entanglement_length(&off, 4.0 * ANGSTROM).unwrap(), 0.0);
    }

    #[test]
    fn mwp_length_rejects_zero_film_angle() {
        let mwp = MwpPair {
            field: 66.5e-3,
            separation: 0.21,
            film_angle: 0.0,
        };
        assert!(matches!(
            mwp_entanglement_length(&mwp, 4.0 * ANGSTROM),
            Err(DeviceError::SingularFilmAngle(_))
        ));
    }

    #[test]
    fn focusing_reproduces_overlap_mode_table() {
        let sol = solve_focusing(600e3, &instrument_distances()).unwrap();
        // published values 902, 575, 273 kHz within rounding
        assert!((sol.nu2 - 902e3).abs() < 1e3, "nu2 = {}", sol.nu2);
        assert!((sol.nu3 - 575e3).abs() < 1e3, "nu3 = {}", sol.nu3);
        assert!((sol.nu4 - 273e3).abs() < 1e3, "nu4 = {}", sol.nu4);
        // frozen exact arithmetic
        assert_abs_diff_eq!(sol.nu2, 902_140.159_462_862, epsilon = 1e-6);
        assert_abs_diff_eq!(sol.nu3, 574_834.455_927_225, epsilon = 1e-6);
        assert_abs_diff_eq!(sol.nu4, 272_694.296_464_363, epsilon = 1e-6);
    }

    #[test]
    fn focusing_zero_input_gives_zero_output() {
        let sol = solve_focusing(0.0, &instrument_distances()).unwrap();
        assert_eq!((sol.nu2, sol.nu3, sol.nu4), (0.0, 0.0, 0.0));
    }

    #[test]
    fn focusing_rejects_nonpositive_distances() {
        let mut d = instrument_distances();
        d.l12 = -1.0;
        assert!(matches!(
            solve_focusing(600e3, &d),
            Err(DeviceError::NonPositive { name: "L12", .. })
        ));
    }

    #[test]
    fn rf_entanglement_length_requires_calibration() {
        let mut quartet = RfFlipperQuartet {
            frequencies: [500e3; 4],
            angles: [70f64.to_radians(); 4],
            distances: instrument_distances(),
            mode: RfMode::Conventional,
            entanglement_length_override: Some(85e-9),
        };
        assert_eq!(
            rf_entanglement_length(&quartet, 4.0 * ANGSTROM).unwrap(),
            85e-9
        );
        quartet.entanglement_length_override = Some(93e-9);
        assert_eq!(
            rf_entanglement_length(&quartet, 4.0 * ANGSTROM).unwrap(),
            93e-9
        );
        quartet.entanglement_length_override = None;
        assert_eq!(
            rf_entanglement_length(&quartet, 4.0 * ANGSTROM),
            Err(DeviceError::CalibrationRequired)
        );
    }

    #[test]
    fn quartet_validation_accepts_published_parameters() {
        let conventional = RfFlipperQuartet {
            frequencies: [500e3; 4],
            angles: [70f64.to_radians(); 4],
            distances: instrument_distances(),
            mode: RfMode::Conventional,
            entanglement_length_override: Some(85e-9),
        };
        conventional.validate().unwrap();

        // rounded published overlap-mode frequencies stay within 0.1%
        let overlap = RfFlipperQuartet {
            frequencies: [600e3, 902e3, 575e3, 273e3],
            angles: [
                80f64.to_radians(),
                83.3f64.to_radians(),
                124.4f64.to_radians(),
                113.3f64.to_radians(),
            ],
            distances: instrument_distances(),
            mode: RfMode::Overlap,
            entanglement_length_override: Some(93e-9),
        };
        overlap.validate().unwrap();
    }

    #[test]
    fn quartet_validation_rejects_detuned_quartets() {
        let unequal = RfFlipperQuartet {
            frequencies: [500e3, 501e3, 500e3, 500e3],
            angles: [70f64.to_radians(); 4],
            distances: instrument_distances(),
            mode: RfMode::Conventional,
            entanglement_length_override: None,
        };
        assert!(unequal.validate().is_err());

        let unfocused = RfFlipperQuartet {
            frequencies: [600e3, 950e3, 575e3, 273e3],
            angles: [70f64.to_radians(); 4],
            distances: instrument_distances(),
            mode: RfMode::Overlap,
            entanglement_length_override: None,
        };
        assert!(unfocused.validate().is_err());
    }

    #[test]
    fn transmission_curve_interpolates_and_clamps() {
        let curve =
            TransmissionCurve::from_points(vec![(0.0, 1.0), (2.0, 0.8), (4.0, 0.6)]).unwrap();
        assert_abs_diff_eq!(curve.value(0.0), 1.0);
        assert_abs_diff_eq!(curve.value(1.0), 0.9, epsilon = 1e-15);
        assert_abs_diff_eq!(curve.value(-1.0), 0.9, epsilon = 1e-15);
        assert_abs_diff_eq!(curve.value(3.0), 0.7, epsilon = 1e-15);
        assert_abs_diff_eq!(curve.value(10.0), 0.6);
        assert_eq!(TransmissionCurve::unit().value(1.7), 1.0);
    }

    #[test]
    fn transmission_curve_rejects_bad_tables() {
        assert!(TransmissionCurve::from_points(vec![(0.0, 1.2)]).is_err());
        assert!(TransmissionCurve::from_points(vec![(-0.5, 0.9)]).is_err());
        assert!(TransmissionCurve::from_points(vec![(1.0, 0.9), (1.0, 0.8)]).is_err());
    }

    proptest! {
        #[test]
        fn spin_phase_is_linear_in_each_input(
            lambda in 1.0..10.0f64,
            field in 1e-5..1e-2f64,
            d in 0.01..0.5f64,
        ) {
            let lambda = lambda * ANGSTROM;
            let coil = SpinPhaseCoil { field, path_length: d };
            let alpha = spin_phase(&coil, lambda);
            prop_assert!((spin_phase(&coil, 2.0 * lambda) - 2.0 * alpha).abs() < 1e-9 * alpha.abs());
            let coil2 = SpinPhaseCoil { field: 2.0 * field, path_length: d };
            prop_assert!((spin_phase(&coil2, lambda) - 2.0 * alpha).abs() < 1e-9 * alpha.abs());
            let coil3 = SpinPhaseCoil { field, path_length: 2.0 * d };
            prop_assert!((spin_phase(&coil3, lambda) - 2.0 * alpha).abs() < 1e-9 * alpha.abs());
            // against independently coded arithmetic
            let oracle = 4.632e14 * lambda * field * d;
            prop_assert!((alpha - oracle).abs() <= 1e-12 * oracle.abs());
        }

        #[test]
        fn path_phase_scales_with_count_wavelength_and_xi(
            count in 1u32..6,
            lambda in 1.0..10.0f64,
            xi in 10.0..2000.0f64,
            angle in 0.2..1.3f64,
        ) {
            let lambda = lambda * ANGSTROM;
            let xi = xi * 1e-9;
            let blocks = QuartzBlockSet {
                count,
                angle,
                sld: 4.18e14,
                transmission: TransmissionCurve::unit(),
            };
            let chi = path_phase(&blocks, lambda, xi).unwrap();
            let oracle = 2.0 * count as f64 * lambda * xi * 4.18e14 / (2.0 * angle).sin();
            prop_assert!((chi - oracle).abs() <= 1e-12 * oracle.abs());
            let double_xi = path_phase(&blocks, lambda, 2.0 * xi).unwrap();
            prop_assert!((double_xi - 2.0 * chi).abs() < 1e-9 * chi.abs());
        }

        #[test]
        fn focusing_identity_nu4_minus_nu3_plus_nu2_minus_nu1(
            nu1 in 0.0..2e6f64,
            l12 in 0.1..5.0f64,
            l2s in 0.1..5.0f64,
            ls3 in 0.1..5.0f64,
            l34 in 0.1..5.0f64,
        ) {
            let sol = solve_focusing(nu1, &FlipperDistances { l12, l2s, ls3, l34 }).unwrap();
            // Bit-exact: nu4 is defined as this very expression.
            prop_assert_eq!(sol.nu4, sol.nu3 - sol.nu2 + nu1);
        }
    }
}
