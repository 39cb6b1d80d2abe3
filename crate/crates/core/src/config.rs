//! On-disk experiment configuration.
//!
//! Human-editable TOML, versioned through `format_version`. Units are
//! explicit in every key name (`wavelength_angstrom`, `field_millitesla`,
//! `angle_deg`, ...) because the instrument tables mix angstroms,
//! millimeters, kilohertz, and degrees; conversion to SI and radians happens
//! here, once. Unknown keys are rejected so typos surface as errors rather
//! than silently ignored settings.

use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

use crate::beamline::{
    BeamParameters, BeamWavelength, BeamlineConfig, DeviceElement, GeometrySpec,
    PolarizationSpec, RfTuningErrors,
};
use crate::devices::{
    FlipperDistances, MwpPair, QuartzBlockSet, RfFlipperQuartet, RfMode, SpinPhaseCoil,
    TransmissionCurve,
};

pub const CONFIG_FORMAT_VERSION: u32 = 1;

const ANGSTROM: f64 = 1e-10;
const MILLIMETER: f64 = 1e-3;
const MILLITESLA: f64 = 1e-3;
const KILOHERTZ: f64 = 1e3;
const NANOMETER: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("unsupported config format version {0} (expected {CONFIG_FORMAT_VERSION})")]
    UnsupportedVersion(u32),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub format_version: u32,
    pub label: String,
    #[serde(default)]
    pub stray_phase_deg: f64,
    pub beam: BeamSection,
    pub geometry: GeometrySection,
    #[serde(default)]
    pub rf_tuning_errors: Option<TuningErrorsSection>,
    pub elements: Vec<ElementSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeamSection {
    #[serde(default)]
    pub wavelength_angstrom: Option<f64>,
    #[serde(default)]
    pub tof_bins_angstrom: Option<Vec<f64>>,
    #[serde(default)]
    pub reference_wavelength_angstrom: Option<f64>,
    pub flux_per_setting: f64,
    #[serde(default)]
    pub background_counts: f64,
    #[serde(default)]
    pub polarization: Option<f64>,
    #[serde(default)]
    pub polarization_table: Option<Vec<(f64, f64)>>,
    #[serde(default)]
    pub polarization_asymmetry: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometrySection {
    pub slit_width_mm: f64,
    pub slit_distance_m: f64,
    pub wavelength_spread_angstrom: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuningErrorsSection {
    #[serde(default)]
    pub alpha0_rad_per_angstrom: f64,
    #[serde(default)]
    pub cubic_rad_per_angstrom3: f64,
    #[serde(default)]
    pub phi_rf_deg: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ElementSection {
    Polarizer,
    Analyzer,
    Slit {
        width_mm: f64,
    },
    MwpEntangler {
        field_millitesla: f64,
        separation_m: f64,
        film_angle_deg: f64,
    },
    MwpDisentangler {
        field_millitesla: f64,
        separation_m: f64,
        film_angle_deg: f64,
    },
    SpinPhaseCoil {
        field_millitesla: f64,
        path_length_m: f64,
    },
    QuartzBlocks {
        count: u32,
        angle_deg: f64,
        sld_per_m2: f64,
        #[serde(default)]
        transmission: Option<Vec<(f64, f64)>>,
    },
    RfQuartet {
        mode: RfMode,
        frequencies_khz: [f64; 4],
        angles_deg: [f64; 4],
        l12_m: f64,
        l2s_m: f64,
        ls3_m: f64,
        l34_m: f64,
        #[serde(default)]
        entanglement_length_nm: Option<f64>,
    },
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let config: ConfigFile = toml::from_str(text).map_err(|e| {
            // toml errors already carry line/column context
            ConfigError::Parse(e.to_string())
        })?;
        if config.format_version != CONFIG_FORMAT_VERSION {
            return Err(ConfigError::UnsupportedVersion(config.format_version));
        }
        Ok(config)
    }

    /// Convert to SI / radians and validate; returns soft warnings alongside
    /// the runnable configuration.
    pub fn into_beamline(self) -> Result<(BeamlineConfig, Vec<String>), ConfigError> {
        let wavelength = match (self.beam.wavelength_angstrom, &self.beam.tof_bins_angstrom) {
            (Some(_), Some(_)) => {
                return Err(ConfigError::Invalid(
                    "beam: set either wavelength_angstrom or tof_bins_angstrom, not both"
                        .to_string(),
                ))
            }
            (Some(lambda), None) => BeamWavelength::Mono(lambda * ANGSTROM),
            (None, Some(bins)) => {
                BeamWavelength::Tof(bins.iter().map(|b| b * ANGSTROM).collect())
            }
            (None, None) => {
                return Err(ConfigError::Invalid(
                    "beam: one of wavelength_angstrom or tof_bins_angstrom is required"
                        .to_string(),
                ))
            }
        };

        let polarization = match (self.beam.polarization, &self.beam.polarization_table) {
            (Some(_), Some(_)) => {
                return Err(ConfigError::Invalid(
                    "beam: set either polarization or polarization_table, not both".to_string(),
                ))
            }
            (Some(p), None) => PolarizationSpec::Constant(p),
            (None, Some(table)) => PolarizationSpec::Table(
                table
                    .iter()
                    .map(|&(lambda, p)| (lambda * ANGSTROM, p))
                    .collect(),
            ),
            (None, None) => {
                return Err(ConfigError::Invalid(
                    "beam: one of polarization or polarization_table is required".to_string(),
                ))
            }
        };

        let elements = self
            .elements
            .into_iter()
            .map(element_to_device)
            .collect::<Result<Vec<_>, _>>()?;

        let config = BeamlineConfig {
            label: self.label,
            elements,
            beam: BeamParameters {
                wavelength,
                incident_flux: self.beam.flux_per_setting,
                background: self.beam.background_counts,
                polarization,
                polarization_asymmetry: self.beam.polarization_asymmetry,
                reference_wavelength: self
                    .beam
                    .reference_wavelength_angstrom
                    .map(|l| l * ANGSTROM),
            },
            geometry: GeometrySpec {
                slit_width: self.geometry.slit_width_mm * MILLIMETER,
                slit_distance: self.geometry.slit_distance_m,
                wavelength_spread: self.geometry.wavelength_spread_angstrom * ANGSTROM,
            },
            stray_phase: self.stray_phase_deg.to_radians(),
            rf_tuning_errors: self.rf_tuning_errors.map(|t| RfTuningErrors {
                alpha0_rad_per_angstrom: t.alpha0_rad_per_angstrom,
                cubic_rad_per_angstrom3: t.cubic_rad_per_angstrom3,
                phi_rf_rad: t.phi_rf_deg.to_radians(),
            }),
        };

        let warnings = config
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok((config, warnings))
    }
}

fn element_to_device(section: ElementSection) -> Result<DeviceElement, ConfigError> {
    Ok(match section {
        ElementSection::Polarizer => DeviceElement::Polarizer,
        ElementSection::Analyzer => DeviceElement::Analyzer,
        ElementSection::Slit { width_mm } => DeviceElement::Slit {
            width: width_mm * MILLIMETER,
        },
        ElementSection::MwpEntangler {
            field_millitesla,
            separation_m,
            film_angle_deg,
        } => DeviceElement::MwpEntangler(MwpPair {
            field: field_millitesla * MILLITESLA,
            separation: separation_m,
            film_angle: film_angle_deg.to_radians(),
        }),
        ElementSection::MwpDisentangler {
            field_millitesla,
            separation_m,
            film_angle_deg,
        } => DeviceElement::MwpDisentangler(MwpPair {
            field: field_millitesla * MILLITESLA,
            separation: separation_m,
            film_angle: film_angle_deg.to_radians(),
        }),
        ElementSection::SpinPhaseCoil {
            field_millitesla,
            path_length_m,
        } => DeviceElement::SpinPhaseCoil(SpinPhaseCoil {
            field: field_millitesla * MILLITESLA,
            path_length: path_length_m,
        }),
        ElementSection::QuartzBlocks {
            count,
            angle_deg,
            sld_per_m2,
            transmission,
        } => {
            let curve = match transmission {
                Some(points) => TransmissionCurve::from_points(points)
                    .map_err(|e| ConfigError::Invalid(e.to_string()))?,
                None => TransmissionCurve::unit(),
            };
            DeviceElement::QuartzBlocks(QuartzBlockSet {
                count,
                angle: angle_deg.to_radians(),
                sld: sld_per_m2,
                transmission: curve,
            })
        }
        ElementSection::RfQuartet {
            mode,
            frequencies_khz,
            angles_deg,
            l12_m,
            l2s_m,
            ls3_m,
            l34_m,
            entanglement_length_nm,
        } => DeviceElement::RfQuartet(RfFlipperQuartet {
            frequencies: frequencies_khz.map(|f| f * KILOHERTZ),
            angles: angles_deg.map(f64::to_radians),
            distances: FlipperDistances {
                l12: l12_m,
                l2s: l2s_m,
                ls3: ls3_m,
                l34: l34_m,
            },
            mode,
            entanglement_length_override: entanglement_length_nm.map(|x| x * NANOMETER),
        }),
    })
}

/// Parse, convert, and validate a config file.
pub fn load_config(path: &Path) -> Result<(BeamlineConfig, Vec<String>), ConfigError> {
    let text = std::fs::read_to_string(path)?;
    ConfigFile::parse(&text)?.into_beamline()
}
