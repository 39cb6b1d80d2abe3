//! End-to-end experiment composition: an ordered device list, the
//! intensity model, and synthetic count datasets.
//!
//! The intensity at phase settings `(alpha, chi)` is
//!
//! ```text
//! N' = 1/2 I0 T(|chi|) [1 + Pol cos(alpha + chi + theta_0)] + BG
//! ```
//!
//! which the test suite cross-checks against the density-matrix route in
//! [`crate::quantum`] (two independent derivations of the same physics).
//! Counting noise is Poisson; every record draws from its own RNG stream
//! derived from `(seed, record index)`, so parallel and serial generation
//! are bit-identical.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use thiserror::Error;

use crate::coherence::BeamGeometry;
use crate::devices::{
    mwp_entanglement_length, rf_entanglement_length, DeviceError, MwpPair, QuartzBlockSet,
    RfFlipperQuartet, RfMode, SpinPhaseCoil,
};
use crate::quantum::PhasePair;

/// Soft validity band of the RF flippers, meters.
pub const TOF_BAND: (f64, f64) = (3.5e-10, 7.5e-10);
/// Reference wavelength used for TOF phase settings when none is configured.
pub const DEFAULT_REFERENCE_WAVELENGTH: f64 = 4.0e-10;

pub const DATASET_CSV_HEADER: &str = "alpha_rad,chi_rad,wavelength_m,counts,monitor,transmission";

#[derive(Debug, Error)]
pub enum BeamlineError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error("empty {0} grid")]
    EmptyGrid(&'static str),
    #[error("{0}")]
    WavelengthMode(String),
    #[error("record {index}: transmission {value} is not in (0, 1]")]
    ZeroTransmission { index: usize, value: f64 },
    #[error("dataset is already transmission-corrected")]
    AlreadyCorrected,
    #[error("dataset schema error at line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("metadata error: {0}")]
    Metadata(String),
}

/// Monochromatic beam or a set of time-of-flight wavelength bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BeamWavelength {
    Mono(f64),
    /// Bin-center wavelengths, meters.
    Tof(Vec<f64>),
}

/// Beam polarization: a single value or a wavelength table (meters, Pol).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PolarizationSpec {
    Constant(f64),
    Table(Vec<(f64, f64)>),
}

impl PolarizationSpec {
    pub fn value_at(&self, wavelength: f64) -> f64 {
        match self {
            PolarizationSpec::Constant(p) => *p,
            PolarizationSpec::Table(table) => interpolate_clamped(table, wavelength),
        }
    }

    fn validate(&self) -> Result<(), BeamlineError> {
        let check = |p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(BeamlineError::Config(format!(
                    "polarization {p} outside [0, 1]"
                )))
            }
        };
        match self {
            PolarizationSpec::Constant(p) => check(*p),
            PolarizationSpec::Table(table) => {
                if table.is_empty() {
                    return Err(BeamlineError::Config(
                        "empty polarization table".to_string(),
                    ));
                }
                for window in table.windows(2) {
                    if window[1].0 <= window[0].0 {
                        return Err(BeamlineError::Config(
                            "polarization table wavelengths must be strictly increasing"
                                .to_string(),
                        ));
                    }
                }
                table.iter().try_for_each(|&(_, p)| check(p))
            }
        }
    }
}

fn interpolate_clamped(table: &[(f64, f64)], x: f64) -> f64 {
    if table.is_empty() {
        return 1.0;
    }
    if x <= table[0].0 {
        return table[0].1;
    }
    let last = table[table.len() - 1];
    if x >= last.0 {
        return last.1;
    }
    let idx = table.partition_point(|&(px, _)| px < x);
    let (x0, y0) = table[idx - 1];
    let (x1, y1) = table[idx];
    y0 + (y1 - y0) * (x - x0) / (x1 - x0)
}

/// Echo and flipper-phase tuning errors of an RF setup. The wavelength
/// coefficients use angstroms, matching how the calibration curves are
/// quoted.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RfTuningErrors {
    /// Echo-condition error `alpha_0`, rad/angstrom.
    pub alpha0_rad_per_angstrom: f64,
    /// Cubic path-phase coefficient `b`, rad/angstrom^3.
    pub cubic_rad_per_angstrom3: f64,
    /// Flipper phase error `phi_RF`, radians.
    pub phi_rf_rad: f64,
}

impl RfTuningErrors {
    pub fn is_zero(&self) -> bool {
        self.alpha0_rad_per_angstrom == 0.0
            && self.cubic_rad_per_angstrom3 == 0.0
            && self.phi_rf_rad == 0.0
    }

    /// Per-wavelength polarization factor: the normalized-polarization model
    /// evaluated with no applied spin phase,
    /// `cos(-alpha_0 l + b l^3 + phi_RF) / cos(alpha_0 l - phi_RF)` with `l`
    /// in angstroms. Identically 1 when all errors vanish; clamped to
    /// `[0, 1]`.
    pub fn contrast_factor(&self, wavelength: f64) -> f64 {
        if self.is_zero() {
            return 1.0;
        }
        let l = wavelength / 1e-10;
        let numerator = (-self.alpha0_rad_per_angstrom * l
            + self.cubic_rad_per_angstrom3 * l.powi(3)
            + self.phi_rf_rad)
            .cos();
        let denominator = (self.alpha0_rad_per_angstrom * l - self.phi_rf_rad).cos();
        if denominator.abs() < 1e-9 {
            return 0.0;
        }
        (numerator / denominator).clamp(0.0, 1.0)
    }
}

/// Beam parameters: spectrum, flux, background, polarization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamParameters {
    pub wavelength: BeamWavelength,
    /// Expected counts per phase setting (and per wavelength bin), at full
    /// transmission and zero contrast.
    pub incident_flux: f64,
    /// Background counts per setting.
    pub background: f64,
    pub polarization: PolarizationSpec,
    /// Up/down initial-state polarization asymmetry. Recorded in metadata
    /// only; no quantitative intensity model exists for it.
    pub polarization_asymmetry: f64,
    /// Wavelength at which TOF phase settings are quoted, meters.
    pub reference_wavelength: Option<f64>,
}

/// One element of the ordered beamline. An RF quartet entangles with its
/// first pair and disentangles with its second, so it fills both roles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DeviceElement {
    MwpEntangler(MwpPair),
    MwpDisentangler(MwpPair),
    RfQuartet(RfFlipperQuartet),
    SpinPhaseCoil(SpinPhaseCoil),
    QuartzBlocks(QuartzBlockSet),
    Slit { width: f64 },
    Polarizer,
    Analyzer,
}

/// Slit geometry, without the wavelength (which the beam supplies).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometrySpec {
    pub slit_width: f64,
    pub slit_distance: f64,
    pub wavelength_spread: f64,
}

/// A full experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamlineConfig {
    pub label: String,
    pub elements: Vec<DeviceElement>,
    pub beam: BeamParameters,
    pub geometry: GeometrySpec,
    /// Constant stray-field phase `theta_0`, radians.
    pub stray_phase: f64,
    pub rf_tuning_errors: Option<RfTuningErrors>,
}

impl BeamlineConfig {
    /// Validate the configuration; returns soft warnings on success.
    pub fn validate(&self) -> Result<Vec<String>, BeamlineError> {
        let mut warnings = Vec::new();

        let entanglers = self
            .elements
            .iter()
            .filter(|e| {
                matches!(
                    e,
                    DeviceElement::MwpEntangler(_) | DeviceElement::RfQuartet(_)
                )
            })
            .count();
        let disentanglers = self
            .elements
            .iter()
            .filter(|e| {
                matches!(
                    e,
                    DeviceElement::MwpDisentangler(_) | DeviceElement::RfQuartet(_)
                )
            })
            .count();
        if entanglers != 1 || disentanglers != 1 {
            return Err(BeamlineError::Config(format!(
                "need exactly one entangler and one disentangler, found {entanglers} and \
                 {disentanglers}"
            )));
        }

        if self.beam.incident_flux < 0.0 {
            return Err(BeamlineError::Config(format!(
                "incident flux must be nonnegative, got {}",
                self.beam.incident_flux
            )));
        }
        if self.beam.incident_flux == 0.0 {
            warnings.push("incident flux is zero; all counts will be zero".to_string());
        }
        if self.beam.background < 0.0 {
            return Err(BeamlineError::Config(format!(
                "background must be nonnegative, got {}",
                self.beam.background
            )));
        }
        self.beam.polarization.validate()?;
        if self.beam.polarization_asymmetry.abs() > 1.0 {
            return Err(BeamlineError::Config(format!(
                "polarization asymmetry {} outside [-1, 1]",
                self.beam.polarization_asymmetry
            )));
        }
        if !self.stray_phase.is_finite() {
            return Err(BeamlineError::Config("stray phase must be finite".into()));
        }

        match &self.beam.wavelength {
            BeamWavelength::Mono(lambda) => {
                if *lambda <= 0.0 || !lambda.is_finite() {
                    return Err(BeamlineError::Config(format!(
                        "wavelength must be positive, got {lambda}"
                    )));
                }
            }
            BeamWavelength::Tof(bins) => {
                if bins.is_empty() {
                    return Err(BeamlineError::Config("empty TOF bin list".to_string()));
                }
                for &bin in bins {
                    if bin <= 0.0 || !bin.is_finite() {
                        return Err(BeamlineError::Config(format!(
                            "TOF bin wavelength must be positive, got {bin}"
                        )));
                    }
                    if bin < TOF_BAND.0 || bin > TOF_BAND.1 {
                        warnings.push(format!(
                            "TOF bin {:.2} A outside the flipper validity band 3.5-7.5 A",
                            bin / 1e-10
                        ));
                    }
                }
            }
        }

        for element in &self.elements {
            if let DeviceElement::RfQuartet(quartet) = element {
                quartet.validate()?;
                if quartet.entanglement_length_override.is_none() {
                    warnings.push(
                        "RF quartet has no calibrated entanglement length; \
                         regime metadata will be absent"
                            .to_string(),
                    );
                }
            }
        }

        self.beam_geometry_at(self.reference_wavelength())
            .validate()
            .map_err(|e| BeamlineError::Config(e.to_string()))?;

        Ok(warnings)
    }

    pub fn reference_wavelength(&self) -> f64 {
        match &self.beam.wavelength {
            BeamWavelength::Mono(lambda) => *lambda,
            BeamWavelength::Tof(_) => self
                .beam
                .reference_wavelength
                .unwrap_or(DEFAULT_REFERENCE_WAVELENGTH),
        }
    }

    pub fn beam_geometry_at(&self, wavelength: f64) -> BeamGeometry {
        BeamGeometry {
            slit_width: self.geometry.slit_width,
            distance_to_point: self.geometry.slit_distance,
            wavelength,
            wavelength_spread: self.geometry.wavelength_spread,
        }
    }

    fn entangler(&self) -> Option<&DeviceElement> {
        self.elements.iter().find(|e| {
            matches!(
                e,
                DeviceElement::MwpEntangler(_) | DeviceElement::RfQuartet(_)
            )
        })
    }

    /// Transverse entanglement length at the given wavelength.
    pub fn xi_at(&self, wavelength: f64) -> Result<f64, BeamlineError> {
        match self.entangler() {
            Some(DeviceElement::MwpEntangler(pair)) => {
                Ok(mwp_entanglement_length(pair, wavelength)?)
            }
            Some(DeviceElement::RfQuartet(quartet)) => {
                Ok(rf_entanglement_length(quartet, wavelength)?)
            }
            _ => Err(BeamlineError::Config("no entangler present".to_string())),
        }
    }

    pub fn instrument_mode(&self) -> String {
        match self.entangler() {
            Some(DeviceElement::MwpEntangler(_)) => "mwp".to_string(),
            Some(DeviceElement::RfQuartet(q)) => match q.mode {
                RfMode::Conventional => "rf_conventional".to_string(),
                RfMode::Overlap => "rf_overlap".to_string(),
            },
            _ => "unknown".to_string(),
        }
    }

    pub fn quartz_blocks(&self) -> Option<&QuartzBlockSet> {
        self.elements.iter().find_map(|e| match e {
            DeviceElement::QuartzBlocks(blocks) => Some(blocks),
            _ => None,
        })
    }

    pub fn has_spin_phase(&self) -> bool {
        self.elements
            .iter()
            .any(|e| matches!(e, DeviceElement::SpinPhaseCoil(_)))
    }

    pub fn transmission_at(&self, chi: f64) -> f64 {
        self.quartz_blocks()
            .map(|blocks| blocks.transmission.value(chi))
            .unwrap_or(1.0)
    }

    /// Effective polarization at a wavelength: the configured value times the
    /// tuning-error contrast factor.
    pub fn polarization_at(&self, wavelength: f64) -> f64 {
        let base = self.beam.polarization.value_at(wavelength);
        let factor = self
            .rf_tuning_errors
            .map(|errors| errors.contrast_factor(wavelength))
            .unwrap_or(1.0);
        (base * factor).clamp(0.0, 1.0)
    }

    /// Scale phase settings from the reference wavelength to a TOF bin: the
    /// spin phase grows linearly with wavelength, the path phase as
    /// `lambda xi(lambda)`.
    pub fn scaled_settings(&self, settings: PhasePair, wavelength: f64) -> PhasePair {
        let reference = self.reference_wavelength();
        let ratio = wavelength / reference;
        let chi_scale = match self.entangler() {
            Some(DeviceElement::MwpEntangler(_)) => ratio.powi(3),
            _ => ratio,
        };
        PhasePair::new(settings.alpha * ratio, settings.chi * chi_scale)
    }

    /// Zero out phases whose device is not installed: path phase requires
    /// quartz blocks, spin phase the spin-phase coil.
    pub fn physical_phases(&self, settings: PhasePair) -> PhasePair {
        PhasePair::new(
            if self.has_spin_phase() {
                settings.alpha
            } else {
                0.0
            },
            if self.quartz_blocks().is_some() {
                settings.chi
            } else {
                0.0
            },
        )
    }
}

/// Expected (noise-free) detector counts at physical phases `(alpha, chi)`.
pub fn expected_intensity(cfg: &BeamlineConfig, phases: PhasePair, wavelength: f64) -> f64 {
    let pol = cfg.polarization_at(wavelength);
    let transmission = cfg.transmission_at(phases.chi);
    0.5 * cfg.beam.incident_flux
        * transmission
        * (1.0 + pol * (phases.alpha + phases.chi + cfg.stray_phase).cos())
        + cfg.beam.background
}

/// One detector measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountRecord {
    pub alpha: f64,
    pub chi: f64,
    pub wavelength: f64,
    /// Raw records carry integral Poisson counts; transmission correction
    /// divides by `T` and the monitor, so corrected values are real.
    pub counts: f64,
    pub monitor: f64,
    pub transmission: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanMetadata {
    pub format_version: u32,
    pub label: String,
    pub instrument_mode: String,
    pub xi_m: Option<f64>,
    pub beta_t_m: Option<f64>,
    pub reference_wavelength_m: f64,
    pub seed: Option<u64>,
    pub corrected: bool,
    pub noiseless: bool,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanDataset {
    pub records: Vec<CountRecord>,
    pub metadata: ScanMetadata,
}

impl ScanDataset {
    /// Distinct record wavelengths, ascending.
    pub fn wavelengths(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for r in &self.records {
            if !out.iter().any(|&w| (w - r.wavelength).abs() < 1e-15) {
                out.push(r.wavelength);
            }
        }
        out.sort_by(f64::total_cmp);
        out
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<(), BeamlineError> {
        writeln!(out, "{DATASET_CSV_HEADER}")?;
        for r in &self.records {
            writeln!(
                out,
                "{:.12e},{:.12e},{:.12e},{},{},{}",
                r.alpha, r.chi, r.wavelength, r.counts, r.monitor, r.transmission
            )?;
        }
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R, metadata: ScanMetadata) -> Result<Self, BeamlineError> {
        let reader = BufReader::new(reader);
        let mut lines = reader.lines().enumerate();
        let header = match lines.next() {
            Some((_, line)) => line?,
            None => {
                return Err(BeamlineError::Schema {
                    line: 1,
                    message: "empty file".to_string(),
                })
            }
        };
        if header.trim() != DATASET_CSV_HEADER {
            return Err(BeamlineError::Schema {
                line: 1,
                message: format!("header must be exactly `{DATASET_CSV_HEADER}`, got `{header}`"),
            });
        }
        let mut records = Vec::new();
        for (idx, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 6 {
                return Err(BeamlineError::Schema {
                    line: idx + 1,
                    message: format!("expected 6 fields, got {}", fields.len()),
                });
            }
            let parse = |field: usize, name: &str| -> Result<f64, BeamlineError> {
                fields[field].trim().parse::<f64>().map_err(|_| {
                    BeamlineError::Schema {
                        line: idx + 1,
                        message: format!("field `{name}` is not a number: `{}`", fields[field]),
                    }
                })
            };
            let record = CountRecord {
                alpha: parse(0, "alpha_rad")?,
                chi: parse(1, "chi_rad")?,
                wavelength: parse(2, "wavelength_m")?,
                counts: parse(3, "counts")?,
                monitor: parse(4, "monitor")?,
                transmission: parse(5, "transmission")?,
            };
            if record.counts < 0.0 {
                return Err(BeamlineError::Schema {
                    line: idx + 1,
                    message: format!("counts must be nonnegative, got {}", record.counts),
                });
            }
            if record.monitor <= 0.0 || record.monitor.is_nan() {
                return Err(BeamlineError::Schema {
                    line: idx + 1,
                    message: format!("monitor must be positive, got {}", record.monitor),
                });
            }
            if record.transmission.is_nan() || record.transmission <= 0.0 || record.transmission > 1.0 {
                return Err(BeamlineError::Schema {
                    line: idx + 1,
                    message: format!(
                        "transmission must be in (0, 1], got {}",
                        record.transmission
                    ),
                });
            }
            records.push(record);
        }
        Ok(Self { records, metadata })
    }

    pub fn write_metadata<W: Write>(&self, mut out: W) -> Result<(), BeamlineError> {
        let text = toml::to_string_pretty(&self.metadata)
            .map_err(|e| BeamlineError::Metadata(e.to_string()))?;
        out.write_all(text.as_bytes())?;
        Ok(())
    }

    pub fn read_metadata(text: &str) -> Result<ScanMetadata, BeamlineError> {
        let metadata: ScanMetadata =
            toml::from_str(text).map_err(|e| BeamlineError::Metadata(e.to_string()))?;
        if metadata.format_version != 1 {
            return Err(BeamlineError::Metadata(format!(
                "unsupported metadata format version {}",
                metadata.format_version
            )));
        }
        Ok(metadata)
    }

    pub fn save(&self, csv_path: &Path) -> Result<(), BeamlineError> {
        let file = std::fs::File::create(csv_path)?;
        self.write_csv(file)?;
        let meta = std::fs::File::create(sidecar_path(csv_path))?;
        self.write_metadata(meta)?;
        Ok(())
    }

    /// Load a dataset; the metadata sidecar is optional for external data.
    pub fn load(csv_path: &Path) -> Result<Self, BeamlineError> {
        let sidecar = sidecar_path(csv_path);
        let metadata = if sidecar.exists() {
            Self::read_metadata(&std::fs::read_to_string(&sidecar)?)?
        } else {
            ScanMetadata {
                format_version: 1,
                label: csv_path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "dataset".to_string()),
                instrument_mode: "unknown".to_string(),
                xi_m: None,
                beta_t_m: None,
                reference_wavelength_m: DEFAULT_REFERENCE_WAVELENGTH,
                seed: None,
                corrected: false,
                noiseless: false,
                warnings: Vec::new(),
            }
        };
        let file = std::fs::File::open(csv_path)?;
        Self::read_csv(file, metadata)
    }
}

/// Sidecar metadata path: `scan.csv` -> `scan.meta.toml`.
pub fn sidecar_path(csv_path: &Path) -> std::path::PathBuf {
    csv_path.with_extension("meta.toml")
}

/// 33 spin phases covering `[-pi, pi]` in steps of `pi/16`; includes the
/// witness protocol angles and their `+pi` partners.
pub fn default_alpha_grid() -> Vec<f64> {
    (0..=32)
        .map(|k| -std::f64::consts::PI + k as f64 * std::f64::consts::PI / 16.0)
        .collect()
}

/// Nine path phases equally spaced from `-pi` to `pi`.
pub fn default_chi_grid() -> Vec<f64> {
    (0..=8)
        .map(|k| -std::f64::consts::PI + k as f64 * std::f64::consts::PI / 4.0)
        .collect()
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent RNG stream for one record, derived from `(seed, index)`.
pub fn record_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(index)))
}

/// One Poisson draw; zero mean yields zero counts.
pub fn poisson_counts(rng: &mut ChaCha8Rng, mean: f64) -> f64 {
    if mean <= 0.0 {
        return 0.0;
    }
    let distribution = Poisson::new(mean).expect("positive finite mean");
    distribution.sample(rng)
}

fn build_metadata(cfg: &BeamlineConfig, seed: Option<u64>, noiseless: bool) -> ScanMetadata {
    let reference = cfg.reference_wavelength();
    let mut warnings = cfg.validate().unwrap_or_default();
    if cfg.beam.polarization_asymmetry != 0.0 {
        warnings.push(format!(
            "polarization asymmetry {} recorded but not modeled",
            cfg.beam.polarization_asymmetry
        ));
    }
    ScanMetadata {
        format_version: 1,
        label: cfg.label.clone(),
        instrument_mode: cfg.instrument_mode(),
        xi_m: cfg.xi_at(reference).ok(),
        beta_t_m: Some(cfg.beam_geometry_at(reference).beta_t()),
        reference_wavelength_m: reference,
        seed,
        corrected: false,
        noiseless,
        warnings,
    }
}

fn scan_wavelengths(cfg: &BeamlineConfig, tof: bool) -> Result<Vec<f64>, BeamlineError> {
    match (&cfg.beam.wavelength, tof) {
        (BeamWavelength::Mono(lambda), false) => Ok(vec![*lambda]),
        (BeamWavelength::Tof(bins), true) => Ok(bins.clone()),
        (BeamWavelength::Mono(_), true) => Err(BeamlineError::WavelengthMode(
            "config is monochromatic; use simulate_scan".to_string(),
        )),
        (BeamWavelength::Tof(_), false) => Err(BeamlineError::WavelengthMode(
            "config is time-of-flight; use simulate_tof_scan".to_string(),
        )),
    }
}

fn scan(
    cfg: &BeamlineConfig,
    alphas: &[f64],
    chis: &[f64],
    seed: Option<u64>,
    tof: bool,
) -> Result<ScanDataset, BeamlineError> {
    cfg.validate()?;
    if alphas.is_empty() {
        return Err(BeamlineError::EmptyGrid("alpha"));
    }
    if chis.is_empty() {
        return Err(BeamlineError::EmptyGrid("chi"));
    }
    let wavelengths = scan_wavelengths(cfg, tof)?;
    let mut records =
        Vec::with_capacity(wavelengths.len() * alphas.len() * chis.len());
    let mut index: u64 = 0;
    for &wavelength in &wavelengths {
        for &alpha in alphas {
            for &chi in chis {
                let settings = cfg.scaled_settings(PhasePair::new(alpha, chi), wavelength);
                let physical = cfg.physical_phases(settings);
                let mean = expected_intensity(cfg, physical, wavelength);
                let counts = match seed {
                    Some(seed) => poisson_counts(&mut record_rng(seed, index), mean),
                    None => mean,
                };
                records.push(CountRecord {
                    alpha: settings.alpha,
                    chi: settings.chi,
                    wavelength,
                    counts,
                    monitor: 1.0,
                    transmission: cfg.transmission_at(physical.chi),
                });
                index += 1;
            }
        }
    }
    Ok(ScanDataset {
        records,
        metadata: build_metadata(cfg, seed, seed.is_none()),
    })
}

/// Monochromatic scan with Poisson counting noise, one record per grid point.
/// Deterministic for a fixed seed.
pub fn simulate_scan(
    cfg: &BeamlineConfig,
    alphas: &[f64],
    chis: &[f64],
    seed: u64,
) -> Result<ScanDataset, BeamlineError> {
    scan(cfg, alphas, chis, Some(seed), false)
}

/// Monochromatic scan with counts set to their expected values (no noise).
pub fn expected_scan(
    cfg: &BeamlineConfig,
    alphas: &[f64],
    chis: &[f64],
) -> Result<ScanDataset, BeamlineError> {
    scan(cfg, alphas, chis, None, false)
}

/// Time-of-flight scan across the configured wavelength bins. Phase settings
/// are quoted at the reference wavelength and scaled per bin; polarization is
/// evaluated per bin, including tuning-error contrast loss.
pub fn simulate_tof_scan(
    cfg: &BeamlineConfig,
    alphas: &[f64],
    chis: &[f64],
    seed: u64,
) -> Result<ScanDataset, BeamlineError> {
    scan(cfg, alphas, chis, Some(seed), true)
}

/// Noise-free variant of [`simulate_tof_scan`].
pub fn expected_tof_scan(
    cfg: &BeamlineConfig,
    alphas: &[f64],
    chis: &[f64],
) -> Result<ScanDataset, BeamlineError> {
    scan(cfg, alphas, chis, None, true)
}

/// Divide counts by transmission and monitor. Corrected records carry unit
/// transmission and monitor so the correction cannot be applied twice.
pub fn transmission_correct(ds: &ScanDataset) -> Result<ScanDataset, BeamlineError> {
    if ds.metadata.corrected {
        return Err(BeamlineError::AlreadyCorrected);
    }
    let mut records = Vec::with_capacity(ds.records.len());
    for (index, r) in ds.records.iter().enumerate() {
        if r.transmission <= 0.0 || r.transmission.is_nan() {
            return Err(BeamlineError::ZeroTransmission {
                index,
                value: r.transmission,
            });
        }
        records.push(CountRecord {
            counts: r.counts / (r.transmission * r.monitor),
            monitor: 1.0,
            transmission: 1.0,
            ..*r
        });
    }
    let mut metadata = ds.metadata.clone();
    metadata.corrected = true;
    Ok(ScanDataset { records, metadata })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::devices::TransmissionCurve;
    use crate::quantum::SpinPathState;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    const ANGSTROM: f64 = 1e-10;

    pub(crate) fn mwp_config(polarization: f64) -> BeamlineConfig {
        let pair = MwpPair {
            field: 600e-9 / (crate::devices::C_XI * (5.4 * ANGSTROM).powi(2) * 0.21),
            separation: 0.21,
            film_angle: std::f64::consts::FRAC_PI_4,
        };
        BeamlineConfig {
            label: "test mwp".to_string(),
            elements: vec![
                DeviceElement::Polarizer,
                DeviceElement::Slit { width: 2e-3 },
                DeviceElement::MwpEntangler(pair),
                DeviceElement::SpinPhaseCoil(SpinPhaseCoil {
                    field: 1e-3,
                    path_length: 0.1,
                }),
                DeviceElement::QuartzBlocks(QuartzBlockSet {
                    count: 2,
                    angle: std::f64::consts::FRAC_PI_4,
                    sld: 4.18e14,
                    transmission: TransmissionCurve::unit(),
                }),
                DeviceElement::MwpDisentangler(pair),
                DeviceElement::Analyzer,
            ],
            beam: BeamParameters {
                wavelength: BeamWavelength::Mono(5.4 * ANGSTROM),
                incident_flux: 1000.0,
                background: 0.0,
                polarization: PolarizationSpec::Constant(polarization),
                polarization_asymmetry: 0.0,
                reference_wavelength: None,
            },
            geometry: GeometrySpec {
                slit_width: 2e-3,
                slit_distance: 3.257_947_937_056_082,
                wavelength_spread: 0.27 * ANGSTROM,
            },
            stray_phase: 0.0,
            rf_tuning_errors: None,
        }
    }

    #[test]
    fn intensity_extremes_and_frozen_value() {
        let mut cfg = mwp_config(1.0);
        assert_abs_diff_eq!(
            expected_intensity(&cfg, PhasePair::new(0.0, 0.0), 5.4 * ANGSTROM),
            1000.0,
            epsilon = 1e-9
        );
        assert_abs_diff_eq!(
            expected_intensity(&cfg, PhasePair::new(std::f64::consts::PI, 0.0), 5.4 * ANGSTROM),
            0.0,
            epsilon = 1e-9
        );
        cfg.beam.polarization = PolarizationSpec::Constant(0.89);
        assert_abs_diff_eq!(
            expected_intensity(&cfg, PhasePair::new(0.0, 0.0), 5.4 * ANGSTROM),
            945.0,
            epsilon = 1e-9
        );
    }

    #[test]
    fn intensity_agrees_with_density_matrix_route() {
        // the 5 x 8 x 8 x 4 grid from the consistency contract
        let mut cfg = mwp_config(1.0);
        cfg.beam.incident_flux = 1.0;
        for (pi, pol) in [0.0, 0.25, 0.5, 0.85, 1.0].into_iter().enumerate() {
            cfg.beam.polarization = PolarizationSpec::Constant(pol);
            let state = SpinPathState::bell_state(pol).unwrap();
            for ai in 0..8 {
                for ci in 0..8 {
                    for ti in 0..4 {
                        let alpha = -3.0 + 0.8 * ai as f64 + 0.01 * pi as f64;
                        let chi = -2.5 + 0.7 * ci as f64;
                        let theta0 = -0.9 + 0.6 * ti as f64;
                        cfg.stray_phase = theta0;
                        let formula =
                            expected_intensity(&cfg, PhasePair::new(alpha, chi), 5.4 * ANGSTROM);
                        let quantum = state
                            .apply_phases(PhasePair::new(alpha + theta0, chi))
                            .detection_probability(PhasePair::new(0.0, 0.0));
                        assert_abs_diff_eq!(formula, quantum, epsilon = 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn same_seed_reproduces_the_dataset() {
        let cfg = mwp_config(0.89);
        let alphas = default_alpha_grid();
        let chis = default_chi_grid();
        let a = simulate_scan(&cfg, &alphas, &chis, 42).unwrap();
        let b = simulate_scan(&cfg, &alphas, &chis, 42).unwrap();
        assert_eq!(a, b);
        let c = simulate_scan(&cfg, &alphas, &chis, 43).unwrap();
        assert_ne!(a.records, c.records);
    }

    #[test]
    fn zero_flux_gives_all_zero_counts_and_a_warning() {
        let mut cfg = mwp_config(0.89);
        cfg.beam.incident_flux = 0.0;
        let ds = simulate_scan(&cfg, &[0.0, 1.0], &[0.0], 7).unwrap();
        assert!(ds.records.iter().all(|r| r.counts == 0.0));
        assert!(ds
            .metadata
            .warnings
            .iter()
            .any(|w| w.contains("incident flux is zero")));
    }

    #[test]
    fn empty_grids_are_rejected() {
        let cfg = mwp_config(0.89);
        assert!(matches!(
            simulate_scan(&cfg, &[], &[0.0], 1),
            Err(BeamlineError::EmptyGrid("alpha"))
        ));
        assert!(matches!(
            simulate_scan(&cfg, &[0.0], &[], 1),
            Err(BeamlineError::EmptyGrid("chi"))
        ));
    }

    #[test]
    fn counts_are_integral_and_poisson_scaled() {
        let cfg = mwp_config(0.89);
        let ds = simulate_scan(&cfg, &default_alpha_grid(), &default_chi_grid(), 5).unwrap();
        for r in &ds.records {
            assert_eq!(r.counts.fract(), 0.0);
            assert!(r.counts >= 0.0);
        }
        // mean over the bright fringe should be near the expectation
        let bright: Vec<f64> = ds
            .records
            .iter()
            .filter(|r| (r.alpha + r.chi).cos() > 0.99)
            .map(|r| r.counts)
            .collect();
        let mean = bright.iter().sum::<f64>() / bright.len() as f64;
        let expected = 0.5 * 1000.0 * (1.0 + 0.89);
        assert!((mean - expected).abs() < 5.0 * (expected / bright.len() as f64).sqrt());
    }

    #[test]
    fn missing_quartz_blocks_suppress_the_path_phase() {
        let mut cfg = mwp_config(1.0);
        cfg.elements
            .retain(|e| !matches!(e, DeviceElement::QuartzBlocks(_)));
        let ds = expected_scan(&cfg, &[0.4], &default_chi_grid()).unwrap();
        // labels keep the requested chi values, counts ignore them
        let first = ds.records[0].counts;
        for r in &ds.records {
            assert_abs_diff_eq!(r.counts, first, epsilon = 1e-9);
        }
        assert!(ds.records.iter().any(|r| r.chi != 0.0));
    }

    #[test]
    fn transmission_correction_doubles_at_half_transmission() {
        let mut cfg = mwp_config(1.0);
        if let Some(DeviceElement::QuartzBlocks(blocks)) = cfg
            .elements
            .iter_mut()
            .find(|e| matches!(e, DeviceElement::QuartzBlocks(_)))
        {
            blocks.transmission =
                TransmissionCurve::from_points(vec![(0.0, 0.5), (10.0, 0.5)]).unwrap();
        }
        let ds = expected_scan(&cfg, &[0.3], &[0.2]).unwrap();
        let corrected = transmission_correct(&ds).unwrap();
        assert_relative_eq!(
            corrected.records[0].counts,
            2.0 * ds.records[0].counts,
            epsilon = 1e-12
        );
        assert!(corrected.metadata.corrected);
        assert!(matches!(
            transmission_correct(&corrected),
            Err(BeamlineError::AlreadyCorrected)
        ));
    }

    #[test]
    fn unit_transmission_correction_is_identity_on_counts() {
        let cfg = mwp_config(0.89);
        let ds = simulate_scan(&cfg, &[0.1, 0.7], &[0.0, 1.1], 9).unwrap();
        let corrected = transmission_correct(&ds).unwrap();
        for (a, b) in ds.records.iter().zip(&corrected.records) {
            assert_eq!(a.counts, b.counts);
        }
    }

    #[test]
    fn csv_round_trip_preserves_records() {
        let cfg = mwp_config(0.89);
        let ds = simulate_scan(&cfg, &[0.0, 0.5], &[0.0, 0.25], 3).unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let back = ScanDataset::read_csv(buf.as_slice(), ds.metadata.clone()).unwrap();
        assert_eq!(ds.records.len(), back.records.len());
        for (a, b) in ds.records.iter().zip(&back.records) {
            assert_abs_diff_eq!(a.alpha, b.alpha, epsilon = 1e-15);
            assert_abs_diff_eq!(a.chi, b.chi, epsilon = 1e-15);
            assert_eq!(a.counts, b.counts);
        }
    }

    #[test]
    fn csv_schema_errors_carry_line_numbers() {
        let bad_header = "alpha,chi\n0,0\n";
        let err = ScanDataset::read_csv(
            bad_header.as_bytes(),
            ScanMetadata {
                format_version: 1,
                label: "x".into(),
                instrument_mode: "unknown".into(),
                xi_m: None,
                beta_t_m: None,
                reference_wavelength_m: 4e-10,
                seed: None,
                corrected: false,
                noiseless: false,
                warnings: vec![],
            },
        )
        .unwrap_err();
        assert!(matches!(err, BeamlineError::Schema { line: 1, .. }));

        let bad_row = format!("{DATASET_CSV_HEADER}\n0,0,4e-10,not_a_number,1,1\n");
        let err = ScanDataset::read_csv(
            bad_row.as_bytes(),
            ScanMetadata {
                format_version: 1,
                label: "x".into(),
                instrument_mode: "unknown".into(),
                xi_m: None,
                beta_t_m: None,
                reference_wavelength_m: 4e-10,
                seed: None,
                corrected: false,
                noiseless: false,
                warnings: vec![],
            },
        )
        .unwrap_err();
        match err {
            BeamlineError::Schema { line, message } => {
                assert_eq!(line, 2);
                assert!(message.contains("counts"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn metadata_toml_round_trip() {
        let cfg = mwp_config(0.89);
        let ds = expected_scan(&cfg, &[0.0], &[0.0]).unwrap();
        let mut buf = Vec::new();
        ds.write_metadata(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let back = ScanDataset::read_metadata(&text).unwrap();
        assert_eq!(back, ds.metadata);
        assert_eq!(back.instrument_mode, "mwp");
        assert_relative_eq!(back.xi_m.unwrap(), 600e-9, epsilon = 1e-12);
        assert_relative_eq!(back.beta_t_m.unwrap(), 140e-9, epsilon = 1e-12);
    }

    #[test]
    fn tof_scan_scales_phases_and_polarization_per_bin() {
        let mut cfg = mwp_config(1.0);
        cfg.beam.wavelength =
            BeamWavelength::Tof(vec![4.0 * ANGSTROM, 5.0 * ANGSTROM, 7.0 * ANGSTROM]);
        cfg.beam.reference_wavelength = Some(4.0 * ANGSTROM);
        cfg.beam.polarization =
            PolarizationSpec::Table(vec![(4.0 * ANGSTROM, 0.85), (7.0 * ANGSTROM, 0.78)]);
        let ds = expected_tof_scan(&cfg, &[0.5], &[0.25]).unwrap();
        assert_eq!(ds.records.len(), 3);
        // spin phase scales linearly, path phase cubically for an MWP entangler
        let r5 = &ds.records[1];
        assert_relative_eq!(r5.alpha, 0.5 * 5.0 / 4.0, epsilon = 1e-12);
        assert_relative_eq!(r5.chi, 0.25 * (5.0f64 / 4.0).powi(3), epsilon = 1e-12);
        // polarization interpolates between the table endpoints
        let mid = cfg.polarization_at(5.5 * ANGSTROM);
        assert_relative_eq!(mid, 0.815, epsilon = 1e-12);
    }

    #[test]
    fn tof_scan_on_mono_config_is_a_mode_error() {
        let cfg = mwp_config(1.0);
        assert!(matches!(
            simulate_tof_scan(&cfg, &[0.0], &[0.0], 1),
            Err(BeamlineError::WavelengthMode(_))
        ));
        let mut tof = mwp_config(1.0);
        tof.beam.wavelength = BeamWavelength::Tof(vec![4.0 * ANGSTROM]);
        assert!(matches!(
            simulate_scan(&tof, &[0.0], &[0.0], 1),
            Err(BeamlineError::WavelengthMode(_))
        ));
    }

    #[test]
    fn out_of_band_bins_warn_but_do_not_fail() {
        let mut cfg = mwp_config(1.0);
        cfg.beam.wavelength = BeamWavelength::Tof(vec![3.0 * ANGSTROM, 4.0 * ANGSTROM]);
        let warnings = cfg.validate().unwrap();
        assert!(warnings.iter().any(|w| w.contains("3.00 A")));
        assert!(expected_tof_scan(&cfg, &[0.0], &[0.0]).is_ok());
    }

    #[test]
    fn tuning_error_factor_reduces_to_one_when_zero() {
        let errors = RfTuningErrors::default();
        for lambda in [3.5, 4.0, 5.5, 7.5] {
            assert_eq!(errors.contrast_factor(lambda * ANGSTROM), 1.0);
        }
        // with b = 0 the normalization cancels the detuning exactly
        // (the cosine is even), so only the cubic term costs contrast
        let echo_only = RfTuningErrors {
            alpha0_rad_per_angstrom: 0.05,
            cubic_rad_per_angstrom3: 0.0,
            phi_rf_rad: 0.1,
        };
        assert_relative_eq!(echo_only.contrast_factor(5.0 * ANGSTROM), 1.0, epsilon = 1e-12);
        let detuned = RfTuningErrors {
            alpha0_rad_per_angstrom: 0.02,
            cubic_rad_per_angstrom3: 2e-3,
            phi_rf_rad: 0.05,
        };
        let f = detuned.contrast_factor(6.0 * ANGSTROM);
        assert!((0.0..1.0).contains(&f), "factor {f} not reduced");
    }

    #[test]
    fn config_requires_exactly_one_entangler_pair() {
        let mut cfg = mwp_config(1.0);
        cfg.elements
            .retain(|e| !matches!(e, DeviceElement::MwpEntangler(_)));
        assert!(matches!(cfg.validate(), Err(BeamlineError::Config(_))));
    }
}
