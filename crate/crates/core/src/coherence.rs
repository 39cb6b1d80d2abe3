//! Beam and wavepacket coherence bookkeeping.
//!
//! Distinguishes the slit-defined *beam* coherence lengths (`beta_t`,
//! `beta_l`), which the instrument controls, from the *intrinsic* wavepacket
//! lengths (`Delta_t`, `Delta_l`), which it does not. Also tracks the
//! longitudinal separation `Delta y` of the leading and lagging wavepacket
//! branches along an RF flipper beamline, and classifies whether the two
//! paths overlap transversally.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::devices::{DeviceError, RfFlipperQuartet, RfMode, NEUTRON_MASS, PLANCK};

#[derive(Debug, Error)]
pub enum CoherenceError {
    #[error("{name} must be positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error("profile CSV export failed: {0}")]
    Io(#[from] std::io::Error),
}

/// Slit geometry and monochromatization of the beam.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamGeometry {
    /// Slit width `a`, meters.
    pub slit_width: f64,
    /// Distance `l` from the slit to the point of interest, meters.
    pub distance_to_point: f64,
    /// Neutron wavelength, meters.
    pub wavelength: f64,
    /// Wavelength uncertainty, meters.
    pub wavelength_spread: f64,
}

impl BeamGeometry {
    pub fn validate(&self) -> Result<(), CoherenceError> {
        for (name, value) in [
            ("slit_width", self.slit_width),
            ("distance_to_point", self.distance_to_point),
            ("wavelength", self.wavelength),
            ("wavelength_spread", self.wavelength_spread),
        ] {
            if value <= 0.0 || !value.is_finite() {
                return Err(CoherenceError::NonPositive { name, value });
            }
        }
        Ok(())
    }

    /// Transverse beam coherence length `beta_t = l / (k_n a) = l lambda / (2 pi a)`.
    pub fn beta_t(&self) -> f64 {
        self.distance_to_point * self.wavelength / (std::f64::consts::TAU * self.slit_width)
    }

    /// Longitudinal beam coherence length `beta_l = lambda^2 / dlambda`.
    pub fn beta_l(&self) -> f64 {
        self.wavelength * self.wavelength / self.wavelength_spread
    }
}

/// Single-neutron wavepacket description. The intrinsic lengths are not
/// directly measurable, so both are optional; regime logic falls back to the
/// beam lengths when they are absent.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WavepacketSpec {
    /// Mean wavevector magnitude `k_0`, m^-1.
    pub mean_wavevector: f64,
    /// Transverse intrinsic coherence length `Delta_t`, meters.
    pub transverse_intrinsic: Option<f64>,
    /// Longitudinal intrinsic coherence length `Delta_l`, meters.
    pub longitudinal_intrinsic: Option<f64>,
}

impl WavepacketSpec {
    pub fn from_wavelength(wavelength: f64) -> Self {
        Self {
            mean_wavevector: std::f64::consts::TAU / wavelength,
            transverse_intrinsic: None,
            longitudinal_intrinsic: None,
        }
    }

    /// Gaussian envelope sigma of the transverse mode, when `Delta_t` is known.
    pub fn transverse_sigma(&self) -> Option<f64> {
        self.transverse_intrinsic.map(|d| d / 2.0)
    }

    /// Gaussian envelope sigma of the longitudinal mode, when `Delta_l` is known.
    pub fn longitudinal_sigma(&self) -> Option<f64> {
        self.longitudinal_intrinsic.map(|d| d / 2.0)
    }

    /// `Delta_t >= beta_t` must hold whenever both are known.
    pub fn consistent_with(&self, geometry: &BeamGeometry) -> bool {
        match self.transverse_intrinsic {
            Some(dt) => dt >= geometry.beta_t(),
            None => true,
        }
    }
}

/// Where a separation-profile breakpoint sits on the beamline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileLabel {
    Rf1,
    Rf2,
    Sample,
    Rf3,
    Rf4,
}

impl std::fmt::Display for ProfileLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ProfileLabel::Rf1 => "RF1",
            ProfileLabel::Rf2 => "RF2",
            ProfileLabel::Sample => "sample",
            ProfileLabel::Rf3 => "RF3",
            ProfileLabel::Rf4 => "RF4",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfilePoint {
    pub label: ProfileLabel,
    /// Position along the beam from RF1, meters.
    pub position: f64,
    /// Longitudinal separation of the wavepacket branches, meters.
    pub delta_y: f64,
}

/// Piecewise-linear `Delta y(y)` along the beamline, anchored at
/// `Delta y = 0` at RF1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationProfile {
    pub mode: RfMode,
    pub points: Vec<ProfilePoint>,
}

impl SeparationProfile {
    pub fn point(&self, label: ProfileLabel) -> ProfilePoint {
        *self
            .points
            .iter()
            .find(|p| p.label == label)
            .expect("profile always carries all five breakpoints")
    }

    /// Linear interpolation between breakpoints; clamps outside the run.
    pub fn delta_y_at(&self, position: f64) -> f64 {
        let first = self.points.first().expect("nonempty profile");
        if position <= first.position {
            return first.delta_y;
        }
        for pair in self.points.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            if position <= b.position {
                let span = b.position - a.position;
                if span == 0.0 {
                    return b.delta_y;
                }
                return a.delta_y + (b.delta_y - a.delta_y) * (position - a.position) / span;
            }
        }
        self.points.last().expect("nonempty profile").delta_y
    }

    pub fn max_abs_delta_y(&self) -> f64 {
        self.points
            .iter()
            .map(|p| p.delta_y.abs())
            .fold(0.0, f64::max)
    }

    /// Export breakpoints as `position_m,delta_y_m` CSV rows.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<(), CoherenceError> {
        writeln!(out, "position_m,delta_y_m")?;
        for p in &self.points {
            writeln!(out, "{:.9e},{:.9e}", p.position, p.delta_y)?;
        }
        Ok(())
    }
}

/// Longitudinal separation profile of the two wavepacket branches.
///
/// Each flip exchanges a total energy `2 h nu` between the branches, so the
/// separation grows at `2 h nu_net / (m_n v^2)` per meter of flight, with
/// `nu_net` the running signed sum of flipper frequencies and `v = h/(m_n
/// lambda)`. In overlap mode the signs alternate `+nu1, -nu2, +nu3, -nu4`,
/// which places zeros exactly at the sample and at RF4 when the quartet
/// satisfies the focusing condition. In conventional mode the equal-frequency
/// pair cancels at RF2 and the disentangler, operating in the reversed guide
/// field, holds the separation constant from there on.
pub fn delta_y_profile(
    rf: &RfFlipperQuartet,
    wavelength: f64,
) -> Result<SeparationProfile, CoherenceError> {
    if wavelength <= 0.0 || !wavelength.is_finite() {
        return Err(CoherenceError::NonPositive {
            name: "wavelength",
            value: wavelength,
        });
    }
    rf.validate()?;

    let velocity = PLANCK / (NEUTRON_MASS * wavelength);
    let rate = |nu_net: f64| 2.0 * PLANCK * nu_net / (NEUTRON_MASS * velocity * velocity);
    let [nu1, nu2, nu3, _] = rf.frequencies;
    let d = rf.distances;

    // Net signed frequency on each segment: [RF1,RF2], [RF2,sample],
    // [sample,RF3], [RF3,RF4].
    let segments = match rf.mode {
        RfMode::Overlap => [nu1, nu1 - nu2, nu1 - nu2, nu1 - nu2 + nu3],
        RfMode::Conventional => [nu1, 0.0, 0.0, 0.0],
    };
    let lengths = [d.l12, d.l2s, d.ls3, d.l34];
    let labels = [
        ProfileLabel::Rf2,
        ProfileLabel::Sample,
        ProfileLabel::Rf3,
        ProfileLabel::Rf4,
    ];

    let mut points = vec![ProfilePoint {
        label: ProfileLabel::Rf1,
        position: 0.0,
        delta_y: 0.0,
    }];
    let mut position = 0.0;
    let mut delta_y = 0.0;
    for ((nu_net, length), label) in segments.iter().zip(lengths).zip(labels) {
        position += length;
        delta_y += rate(*nu_net) * length;
        points.push(ProfilePoint {
            label,
            position,
            delta_y,
        });
    }
    Ok(SeparationProfile {
        mode: rf.mode,
        points,
    })
}

/// Which transverse regime the instrument is in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapClass {
    /// `xi > beta_t`: the two paths are cleanly resolved.
    Separated,
    /// `xi <= beta_t`: the paths overlap within the beam coherence length.
    Overlapping,
}

impl std::fmt::Display for OverlapClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OverlapClass::Separated => write!(f, "separated"),
            OverlapClass::Overlapping => write!(f, "overlapping"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapRegime {
    /// `xi / beta_t`.
    pub ratio: f64,
    pub class: OverlapClass,
}

/// Classify the transverse regime from the entanglement length and the
/// transverse beam coherence length. The boundary `xi = beta_t` counts as
/// overlapping.
pub fn overlap_regime(xi: f64, beta_t: f64) -> OverlapRegime {
    let ratio = xi / beta_t;
    let class = if ratio > 1.0 {
        OverlapClass::Separated
    } else {
        OverlapClass::Overlapping
    };
    OverlapRegime { ratio, class }
}

/// Gaussian-envelope overlap diagnostic `exp(-Delta_y^2 / (4 Delta_l^2))`.
///
/// Diagnostic only: the witness does not depend on longitudinal overlap, and
/// no prediction is ever scaled by this factor. Requires `delta_l > 0`.
pub fn longitudinal_overlap_factor(delta_y: f64, delta_l: f64) -> f64 {
    (-delta_y * delta_y / (4.0 * delta_l * delta_l)).exp()
}
