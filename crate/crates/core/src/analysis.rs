//! Witness extraction from count data: cosine fits, the four-point
//! expectation estimator, the CHSH witness, counting-statistics Monte Carlo,
//! and the time-of-flight polarization calibration fit.
//!
//! Three ways to evaluate the witness from a dataset:
//!
//! - **Fit per path phase** (the Wollaston-prism protocol): each path-phase
//!   cell's intensity vs spin phase is fitted with `C cos(alpha + chi +
//!   theta_0) + D` and the estimator is evaluated on the fitted curves. Any
//!   per-cell transmission folds into that cell's `C` and `D` and cancels in
//!   the estimator, which is why the witness is transmission independent.
//! - **Phase-sum fit** (the RF time-of-flight protocol): all records of a
//!   wavelength bin are fitted jointly against `alpha + chi`. Used when the
//!   per-bin path phases do not land on the protocol values.
//! - **Raw counts**: the estimator applied directly to the four measured
//!   phase combinations; a diagnostic mode with no stray-phase correction.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

use crate::beamline::{poisson_counts, record_rng, CountRecord, ScanDataset};
use crate::coherence::{overlap_regime, OverlapRegime};
use crate::quantum::{canonical_phase, AngleSet, CLASSICAL_BOUND, TSIRELSON_BOUND};

/// Two dataset phases are the same instrument setting when they differ by
/// less than this (circularly).
pub const PHASE_MATCH_TOLERANCE: f64 = 1e-6;

/// Wavelength bins closer than this are the same bin, meters.
pub const WAVELENGTH_MATCH_TOLERANCE: f64 = 1e-12;

/// Polarization calibration fits are restricted to this wavelength range, angstroms.
pub const TOF_FIT_RANGE_ANGSTROM: (f64, f64) = (3.8, 8.0);

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("need at least {needed} points, got {got}")]
    InsufficientPoints { needed: usize, got: usize },
    #[error("fit phases span {span:.3} rad; need more than pi")]
    InsufficientPhaseSpan { span: f64 },
    #[error("point sigma must be positive and finite")]
    NonPositiveSigma,
    #[error("degenerate design matrix (phases do not separate the basis)")]
    DegenerateDesign,
    #[error("zero count denominator in the expectation estimator")]
    ZeroDenominator,
    #[error("no record at alpha = {alpha:.6} rad, chi = {chi:.6} rad")]
    MissingPhase { alpha: f64, chi: f64 },
    #[error("no path-phase cell at chi = {chi:.6} rad (mod 2 pi)")]
    MissingPathPhaseCell { chi: f64 },
    #[error("dataset spans {count} wavelengths; analyze per wavelength")]
    MixedWavelengths { count: usize },
    #[error("dataset has no records")]
    EmptyDataset,
    #[error("Monte Carlo needs at least {needed} trials, got {got}")]
    NotEnoughTrials { needed: usize, got: usize },
    #[error(
        "calibration fit diverged; best coarse-grid point was alpha_0 = {best_alpha0} rad/A, \
         phi_RF = {best_phi_rf} rad"
    )]
    FitDiverged { best_alpha0: f64, best_phi_rf: f64 },
    #[error("need at least {needed} wavelength bins in the fit range, got {got}")]
    InsufficientBins { needed: usize, got: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("report serialization failed: {0}")]
    Serialization(String),
}

/// Weighted least-squares fit of `C cos(x + theta_0) + D`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineFit {
    /// Amplitude `C >= 0`, counts.
    pub amplitude: f64,
    /// Offset `D`, counts.
    pub offset: f64,
    /// Phase `theta_0`, radians in `(-pi, pi]`.
    pub phase: f64,
    /// Covariance of `(C, D, theta_0)` from the linearized normal equations.
    pub covariance: Matrix3<f64>,
    /// Weighted RMS residual, counts.
    pub residual_norm: f64,
    /// Set when the amplitude is consistent with zero, making the phase
    /// meaningless.
    pub phase_indeterminate: bool,
}

impl CosineFit {
    pub fn value_at(&self, x: f64) -> f64 {
        self.amplitude * (x + self.phase).cos() + self.offset
    }

    /// `C / D`: the fringe contrast, equal to the beam polarization for
    /// background-corrected data.
    pub fn contrast(&self) -> Option<f64> {
        (self.offset != 0.0).then(|| self.amplitude / self.offset)
    }
}

/// Fit `C cos(x + theta_0) + D` to `(phase, value, sigma)` triples by exact
/// linear reparameterization `a cos x + b sin x + d`, then `C =
/// sqrt(a^2 + b^2)`, `theta_0 = atan2(-b, a)`. No iteration, no
/// initialization ambiguity.
pub fn fit_cosine(points: &[(f64, f64, f64)]) -> Result<CosineFit, AnalysisError> {
    if points.len() < 4 {
        return Err(AnalysisError::InsufficientPoints {
            needed: 4,
            got: points.len(),
        });
    }
    let span = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max)
        - points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    if span <= std::f64::consts::PI || span.is_nan() {
        return Err(AnalysisError::InsufficientPhaseSpan { span });
    }

    let mut normal = Matrix3::<f64>::zeros();
    let mut rhs = Vector3::<f64>::zeros();
    for &(x, y, sigma) in points {
        if sigma <= 0.0 || !sigma.is_finite() {
            return Err(AnalysisError::NonPositiveSigma);
        }
        let w = 1.0 / (sigma * sigma);
        let basis = Vector3::new(x.cos(), x.sin(), 1.0);
        normal += basis * basis.transpose() * w;
        rhs += basis * (y * w);
    }
    let inverse = normal.try_inverse().ok_or(AnalysisError::DegenerateDesign)?;
    let params = inverse * rhs;
    let (a, b, d) = (params[0], params[1], params[2]);

    let amplitude = a.hypot(b);
    let phase = (-b).atan2(a);

    // Delta-method propagation from (a, b, d) to (C, D, theta_0); the phase
    // row degenerates as C -> 0, where the phase is meaningless anyway.
    let c_safe = amplitude.max(1e-300);
    let jacobian = Matrix3::new(
        a / c_safe,
        b / c_safe,
        0.0,
        0.0,
        0.0,
        1.0,
        b / (c_safe * c_safe),
        -a / (c_safe * c_safe),
        0.0,
    );
    let covariance = jacobian * inverse * jacobian.transpose();

    let mut weight_sum = 0.0;
    let mut weighted_square_sum = 0.0;
    for &(x, y, sigma) in points {
        let w = 1.0 / (sigma * sigma);
        let r = y - (a * x.cos() + b * x.sin() + d);
        weight_sum += w;
        weighted_square_sum += w * r * r;
    }
    let residual_norm = (weighted_square_sum / weight_sum).sqrt();

    // Amplitude consistent with zero at 3 sigma, or identically zero.
    let amplitude_variance = covariance[(0, 0)].max(0.0);
    let phase_indeterminate =
        amplitude * amplitude <= 9.0 * amplitude_variance || amplitude < 1e-300;

    Ok(CosineFit {
        amplitude,
        offset: d,
        phase,
        covariance,
        residual_norm,
        phase_indeterminate,
    })
}

/// Circular distance between two phases.
fn phase_distance(a: f64, b: f64) -> f64 {
    canonical_phase(a - b).abs()
}

fn record_value(record: &CountRecord, normalize_transmission: bool) -> (f64, f64) {
    let denominator = if normalize_transmission {
        record.monitor * record.transmission
    } else {
        record.monitor
    };
    let value = record.counts / denominator;
    let sigma = record.counts.max(1.0).sqrt() / denominator;
    (value, sigma)
}

/// Four-point expectation estimator on raw counts:
/// `E = (N1 - N2 - N3 + N4) / (N1 + N2 + N3 + N4)` over the phase
/// combinations `(a, c), (a, c + pi), (a + pi, c), (a + pi, c + pi)`.
///
/// Exactly invariant under uniform count scaling. Requires all four
/// combinations present (circularly matched); counts are monitor-normalized,
/// and duplicates average.
pub fn expectation_from_counts(
    ds: &ScanDataset,
    alpha: f64,
    chi: f64,
) -> Result<f64, AnalysisError> {
    let lookup = |a: f64, c: f64| -> Result<f64, AnalysisError> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for record in &ds.records {
            if phase_distance(record.alpha, a) < PHASE_MATCH_TOLERANCE
                && phase_distance(record.chi, c) < PHASE_MATCH_TOLERANCE
            {
                sum += record.counts / record.monitor;
                n += 1;
            }
        }
        if n == 0 {
            return Err(AnalysisError::MissingPhase { alpha: a, chi: c });
        }
        Ok(sum / n as f64)
    };
    let pi = std::f64::consts::PI;
    let n1 = lookup(alpha, chi)?;
    let n2 = lookup(alpha, chi + pi)?;
    let n3 = lookup(alpha + pi, chi)?;
    let n4 = lookup(alpha + pi, chi + pi)?;
    let denominator = n1 + n2 + n3 + n4;
    if denominator <= 0.0 {
        return Err(AnalysisError::ZeroDenominator);
    }
    Ok((n1 - n2 - n3 + n4) / denominator)
}

/// How the witness is evaluated from a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WitnessStrategy {
    /// Fit intensity vs spin phase in each required path-phase cell.
    FitPerPathPhase,
    /// One joint fit against `alpha + chi` per wavelength bin.
    FitPhaseSum,
    /// Direct four-point counts, no fits, no stray-phase correction.
    RawCounts,
}

impl std::fmt::Display for WitnessStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            WitnessStrategy::FitPerPathPhase => "fit_per_path_phase",
            WitnessStrategy::FitPhaseSum => "fit_phase_sum",
            WitnessStrategy::RawCounts => "raw_counts",
        };
        write!(f, "{s}")
    }
}

/// Everything extracted from one witness evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WitnessReport {
    pub label: String,
    pub wavelength_m: Option<f64>,
    /// CHSH witness `S`.
    pub s: f64,
    /// Monte Carlo counting-statistics uncertainty, when computed.
    pub sigma_s: Option<f64>,
    /// `E(a1,c1), E(a1,c2), E(a2,c1), E(a2,c2)`.
    pub expectations: [f64; 4],
    /// Fitted fringe contrast; absent in raw-counts mode.
    pub polarization: Option<f64>,
    pub angles: AngleSet,
    /// Estimated stray phase, when fits were used.
    pub theta0_rad: Option<f64>,
    pub regime: Option<OverlapRegime>,
    pub xi_m: Option<f64>,
    pub beta_t_m: Option<f64>,
    pub strategy: WitnessStrategy,
}

pub const REPORT_CSV_HEADER: &str = "label,wavelength_m,s,sigma_s,e11,e12,e21,e22,\
polarization,s_over_pol,xi_m,beta_t_m,xi_over_beta_t,regime,verdict";

impl WitnessReport {
    pub fn s_over_pol(&self) -> Option<f64> {
        self.polarization.filter(|p| *p > 0.0).map(|p| self.s / p)
    }

    /// `S > 2` witnesses spin-path entanglement.
    pub fn entanglement_witnessed(&self) -> bool {
        self.s.abs() > CLASSICAL_BOUND
    }

    pub fn verdict(&self) -> &'static str {
        if self.entanglement_witnessed() {
            "witnessed"
        } else {
            "not witnessed"
        }
    }

    /// Physicality violations: expectations outside `[-1, 1]` or a witness
    /// beyond the quantum bound plus three sigma. Empty for healthy data;
    /// low-count fits can stray, so these are warnings, not errors.
    pub fn physicality_violations(&self) -> Vec<String> {
        let mut violations = Vec::new();
        for (i, e) in self.expectations.iter().enumerate() {
            if e.abs() > 1.0 + 1e-9 {
                violations.push(format!("expectation {} = {e:.6} outside [-1, 1]", i + 1));
            }
        }
        let slack = 3.0 * self.sigma_s.unwrap_or(0.0);
        if self.s.abs() > TSIRELSON_BOUND + slack + 1e-9 {
            violations.push(format!(
                "|S| = {:.6} exceeds the quantum bound {:.6} + 3 sigma",
                self.s.abs(),
                TSIRELSON_BOUND
            ));
        }
        violations
    }

    pub fn to_toml(&self) -> Result<String, AnalysisError> {
        toml::to_string_pretty(self).map_err(|e| AnalysisError::Serialization(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self, AnalysisError> {
        toml::from_str(text).map_err(|e| AnalysisError::Serialization(e.to_string()))
    }

    pub fn csv_row(&self) -> String {
        let opt = |x: Option<f64>| x.map(|v| format!("{v:.9e}")).unwrap_or_default();
        let ratio = match (self.xi_m, self.beta_t_m) {
            (Some(xi), Some(bt)) if bt > 0.0 => format!("{:.6}", xi / bt),
            _ => String::new(),
        };
        let regime = self
            .regime
            .map(|r| r.class.to_string())
            .unwrap_or_default();
        format!(
            "{},{},{:.9e},{},{:.9e},{:.9e},{:.9e},{:.9e},{},{},{},{},{},{},{}",
            self.label,
            opt(self.wavelength_m),
            self.s,
            opt(self.sigma_s),
            self.expectations[0],
            self.expectations[1],
            self.expectations[2],
            self.expectations[3],
            opt(self.polarization),
            opt(self.s_over_pol()),
            opt(self.xi_m),
            opt(self.beta_t_m),
            ratio,
            regime,
            self.verdict()
        )
    }
}

/// Records grouped by path-phase setting (circularly, within
/// [`PHASE_MATCH_TOLERANCE`]).
fn chi_cells(records: &[&CountRecord]) -> Vec<(f64, Vec<usize>)> {
    let mut cells: Vec<(f64, Vec<usize>)> = Vec::new();
    for (idx, record) in records.iter().enumerate() {
        let chi = canonical_phase(record.chi);
        match cells
            .iter_mut()
            .find(|(cell_chi, _)| phase_distance(*cell_chi, chi) < PHASE_MATCH_TOLERANCE)
        {
            Some((_, members)) => members.push(idx),
            None => cells.push((chi, vec![idx])),
        }
    }
    cells
}

fn fit_cell(
    records: &[&CountRecord],
    members: &[usize],
    normalize_transmission: bool,
) -> Result<CosineFit, AnalysisError> {
    let points: Vec<(f64, f64, f64)> = members
        .iter()
        .map(|&i| {
            let (value, sigma) = record_value(records[i], normalize_transmission);
            (records[i].alpha, value, sigma)
        })
        .collect();
    fit_cosine(&points)
}

fn circular_mean(angles: &[f64]) -> f64 {
    let (sin, cos) = angles
        .iter()
        .fold((0.0, 0.0), |(s, c), &a| (s + a.sin(), c + a.cos()));
    sin.atan2(cos)
}

struct WitnessEvaluation {
    s: f64,
    expectations: [f64; 4],
    polarization: Option<f64>,
    theta0: Option<f64>,
}

fn four_point(n1: f64, n2: f64, n3: f64, n4: f64) -> Result<f64, AnalysisError> {
    let denominator = n1 + n2 + n3 + n4;
    if denominator <= 0.0 || denominator.is_nan() {
        return Err(AnalysisError::ZeroDenominator);
    }
    Ok((n1 - n2 - n3 + n4) / denominator)
}

fn evaluate_fit_per_cell(
    records: &[&CountRecord],
    angles: &AngleSet,
) -> Result<WitnessEvaluation, AnalysisError> {
    let pi = std::f64::consts::PI;
    let cells = chi_cells(records);
    let targets = [angles.chi1, angles.chi2, angles.chi1 + pi, angles.chi2 + pi];

    let mut target_cells: Vec<usize> = Vec::with_capacity(4);
    for &target in &targets {
        let found = cells
            .iter()
            .position(|(chi, _)| phase_distance(*chi, target) < PHASE_MATCH_TOLERANCE)
            .ok_or(AnalysisError::MissingPathPhaseCell {
                chi: canonical_phase(target),
            })?;
        target_cells.push(found);
    }

    let mut fits: Vec<Option<CosineFit>> = vec![None; cells.len()];
    for &idx in &target_cells {
        if fits[idx].is_none() {
            fits[idx] = Some(fit_cell(records, &cells[idx].1, false)?);
        }
    }

    // theta_0 is common across spin phase; estimate it per path-phase scan
    // and average circularly.
    let mut estimates = Vec::new();
    for &idx in &target_cells {
        let fit = fits[idx].as_ref().expect("fitted above");
        if !fit.phase_indeterminate {
            estimates.push(canonical_phase(fit.phase - cells[idx].0));
        }
    }
    let theta0 = if estimates.is_empty() {
        0.0
    } else {
        circular_mean(&estimates)
    };

    let value = |cell: usize, alpha: f64| -> f64 {
        fits[cell]
            .as_ref()
            .expect("fitted above")
            .value_at(alpha - theta0)
    };
    let expectation = |alpha: f64, chi_cell: usize, chi_pi_cell: usize| {
        four_point(
            value(chi_cell, alpha),
            value(chi_pi_cell, alpha),
            value(chi_cell, alpha + pi),
            value(chi_pi_cell, alpha + pi),
        )
    };

    let e11 = expectation(angles.alpha1, target_cells[0], target_cells[2])?;
    let e12 = expectation(angles.alpha1, target_cells[1], target_cells[3])?;
    let e21 = expectation(angles.alpha2, target_cells[0], target_cells[2])?;
    let e22 = expectation(angles.alpha2, target_cells[1], target_cells[3])?;

    let mut contrasts = Vec::new();
    let mut seen: Vec<usize> = Vec::new();
    for &idx in &target_cells {
        if !seen.contains(&idx) {
            seen.push(idx);
            if let Some(c) = fits[idx].as_ref().and_then(|f| f.contrast()) {
                contrasts.push(c);
            }
        }
    }
    let polarization =
        (!contrasts.is_empty()).then(|| contrasts.iter().sum::<f64>() / contrasts.len() as f64);

    Ok(WitnessEvaluation {
        s: e11 + e12 + e21 - e22,
        expectations: [e11, e12, e21, e22],
        polarization,
        theta0: Some(theta0),
    })
}

fn evaluate_phase_sum(
    records: &[&CountRecord],
    angles: &AngleSet,
    corrected: bool,
) -> Result<WitnessEvaluation, AnalysisError> {
    let pi = std::f64::consts::PI;
    // Uncorrected data must be transmission-normalized here: a single joint
    // fit cannot absorb a chi-dependent amplitude.
    let normalize = !corrected;
    let points: Vec<(f64, f64, f64)> = records
        .iter()
        .map(|r| {
            let (value, sigma) = record_value(r, normalize);
            (r.alpha + r.chi, value, sigma)
        })
        .collect();
    let fit = fit_cosine(&points)?;
    let theta0 = fit.phase;

    let value = |alpha: f64, chi: f64| fit.value_at(alpha - theta0 + chi);
    let expectation = |alpha: f64, chi: f64| {
        four_point(
            value(alpha, chi),
            value(alpha, chi + pi),
            value(alpha + pi, chi),
            value(alpha + pi, chi + pi),
        )
    };
    let e11 = expectation(angles.alpha1, angles.chi1)?;
    let e12 = expectation(angles.alpha1, angles.chi2)?;
    let e21 = expectation(angles.alpha2, angles.chi1)?;
    let e22 = expectation(angles.alpha2, angles.chi2)?;

    Ok(WitnessEvaluation {
        s: e11 + e12 + e21 - e22,
        expectations: [e11, e12, e21, e22],
        polarization: fit.contrast(),
        theta0: Some(theta0),
    })
}

fn evaluate_raw(
    ds: &ScanDataset,
    records: &[&CountRecord],
    angles: &AngleSet,
) -> Result<WitnessEvaluation, AnalysisError> {
    // reuse the public estimator on a filtered view
    let view = ScanDataset {
        records: records.iter().map(|r| **r).collect(),
        metadata: ds.metadata.clone(),
    };
    let e11 = expectation_from_counts(&view, angles.alpha1, angles.chi1)?;
    let e12 = expectation_from_counts(&view, angles.alpha1, angles.chi2)?;
    let e21 = expectation_from_counts(&view, angles.alpha2, angles.chi1)?;
    let e22 = expectation_from_counts(&view, angles.alpha2, angles.chi2)?;
    Ok(WitnessEvaluation {
        s: e11 + e12 + e21 - e22,
        expectations: [e11, e12, e21, e22],
        polarization: None,
        theta0: None,
    })
}

fn cells_cover_protocol(records: &[&CountRecord], angles: &AngleSet) -> bool {
    let pi = std::f64::consts::PI;
    let cells = chi_cells(records);
    [angles.chi1, angles.chi2, angles.chi1 + pi, angles.chi2 + pi]
        .iter()
        .all(|&target| {
            cells
                .iter()
                .any(|(chi, _)| phase_distance(*chi, target) < PHASE_MATCH_TOLERANCE)
        })
}

fn witness_single_wavelength(
    ds: &ScanDataset,
    records: &[&CountRecord],
    wavelength: Option<f64>,
    angles: &AngleSet,
    use_fits: bool,
) -> Result<WitnessReport, AnalysisError> {
    if records.is_empty() {
        return Err(AnalysisError::EmptyDataset);
    }
    let (evaluation, strategy) = if !use_fits {
        (
            evaluate_raw(ds, records, angles)?,
            WitnessStrategy::RawCounts,
        )
    } else if cells_cover_protocol(records, angles) {
        (
            evaluate_fit_per_cell(records, angles)?,
            WitnessStrategy::FitPerPathPhase,
        )
    } else {
        (
            evaluate_phase_sum(records, angles, ds.metadata.corrected)?,
            WitnessStrategy::FitPhaseSum,
        )
    };

    let regime = match (ds.metadata.xi_m, ds.metadata.beta_t_m) {
        (Some(xi), Some(beta_t)) if beta_t > 0.0 => Some(overlap_regime(xi, beta_t)),
        _ => None,
    };

    Ok(WitnessReport {
        label: ds.metadata.label.clone(),
        wavelength_m: wavelength,
        s: evaluation.s,
        sigma_s: None,
        expectations: evaluation.expectations,
        polarization: evaluation.polarization,
        angles: *angles,
        theta0_rad: evaluation.theta0,
        regime,
        xi_m: ds.metadata.xi_m,
        beta_t_m: ds.metadata.beta_t_m,
        strategy,
    })
}

/// Evaluate the CHSH witness on a single-wavelength dataset.
///
/// `angles` defaults to the Wollaston-prism protocol values. With `use_fits`
/// the strategy is chosen automatically: per-path-phase fits when the
/// protocol cells exist, otherwise the joint phase-sum fit. Without it the
/// raw four-point counts are used.
pub fn witness_from_dataset(
    ds: &ScanDataset,
    angles: Option<AngleSet>,
    use_fits: bool,
) -> Result<WitnessReport, AnalysisError> {
    if ds.records.is_empty() {
        return Err(AnalysisError::EmptyDataset);
    }
    let wavelengths = ds.wavelengths();
    if wavelengths.len() > 1 {
        return Err(AnalysisError::MixedWavelengths {
            count: wavelengths.len(),
        });
    }
    let angles = angles.unwrap_or_else(AngleSet::mwp_protocol);
    let records: Vec<&CountRecord> = ds.records.iter().collect();
    witness_single_wavelength(ds, &records, wavelengths.first().copied(), &angles, use_fits)
}

/// Per-wavelength witness evaluation for time-of-flight datasets.
pub fn witness_per_wavelength(
    ds: &ScanDataset,
    angles: Option<AngleSet>,
    use_fits: bool,
) -> Result<Vec<WitnessReport>, AnalysisError> {
    if ds.records.is_empty() {
        return Err(AnalysisError::EmptyDataset);
    }
    let angles = angles.unwrap_or_else(AngleSet::mwp_protocol);
    let mut reports = Vec::new();
    for wavelength in ds.wavelengths() {
        let records: Vec<&CountRecord> = ds
            .records
            .iter()
            .filter(|r| (r.wavelength - wavelength).abs() < WAVELENGTH_MATCH_TOLERANCE)
            .collect();
        reports.push(witness_single_wavelength(
            ds,
            &records,
            Some(wavelength),
            &angles,
            use_fits,
        )?);
    }
    Ok(reports)
}

/// Counting-statistics uncertainty of the witness: every trial resamples each
/// record as `Poisson(observed counts)` and re-runs the full extraction; the
/// returned value is the standard deviation of `S` over trials.
///
/// Deterministic for a fixed seed; trials run in parallel on independent RNG
/// streams derived from `(seed, trial index)`.
pub fn witness_uncertainty_mc(
    ds: &ScanDataset,
    angles: Option<AngleSet>,
    use_fits: bool,
    n_trials: usize,
    seed: u64,
) -> Result<f64, AnalysisError> {
    if n_trials < 100 {
        return Err(AnalysisError::NotEnoughTrials {
            needed: 100,
            got: n_trials,
        });
    }
    let wavelengths = ds.wavelengths();
    if wavelengths.len() > 1 {
        return Err(AnalysisError::MixedWavelengths {
            count: wavelengths.len(),
        });
    }
    let values: Vec<f64> = (0..n_trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = record_rng(seed, trial as u64);
            let mut resampled = ds.clone();
            for record in &mut resampled.records {
                record.counts = poisson_counts(&mut rng, record.counts);
            }
            witness_from_dataset(&resampled, angles, use_fits).map(|r| r.s)
        })
        .collect::<Result<_, _>>()?;
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let variance =
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (values.len() - 1) as f64;
    Ok(variance.sqrt())
}

/// Restrict a dataset to one wavelength bin.
pub fn subset_by_wavelength(ds: &ScanDataset, wavelength: f64) -> ScanDataset {
    ScanDataset {
        records: ds
            .records
            .iter()
            .filter(|r| (r.wavelength - wavelength).abs() < WAVELENGTH_MATCH_TOLERANCE)
            .copied()
            .collect(),
        metadata: ds.metadata.clone(),
    }
}

/// Export fitted intensity curves (intensity vs spin phase for each path
/// phase and wavelength) for plotting: columns `wavelength_m, chi_rad,
/// alpha_rad, counts, fitted`. Cells that cannot be fitted are skipped;
/// returns the number of rows written.
pub fn write_fit_curves_csv<W: Write>(
    ds: &ScanDataset,
    mut out: W,
) -> Result<usize, AnalysisError> {
    writeln!(out, "wavelength_m,chi_rad,alpha_rad,counts,fitted")?;
    let mut rows = 0usize;
    for wavelength in ds.wavelengths() {
        let records: Vec<&CountRecord> = ds
            .records
            .iter()
            .filter(|r| (r.wavelength - wavelength).abs() < WAVELENGTH_MATCH_TOLERANCE)
            .collect();
        for (chi, members) in chi_cells(&records) {
            let Ok(fit) = fit_cell(&records, &members, false) else {
                continue;
            };
            for &idx in &members {
                let record = records[idx];
                let (value, _) = record_value(record, false);
                writeln!(
                    out,
                    "{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
                    wavelength,
                    chi,
                    record.alpha,
                    value,
                    fit.value_at(record.alpha)
                )?;
                rows += 1;
            }
        }
    }
    Ok(rows)
}

/// Result of the time-of-flight polarization calibration fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TofPolarizationFit {
    /// Echo-condition tuning error `alpha_0`, rad/angstrom.
    pub alpha0_rad_per_angstrom: f64,
    /// Cubic path-phase coefficient `b`, rad/angstrom^3.
    pub cubic_rad_per_angstrom3: f64,
    /// Flipper phase error `phi_RF`, radians.
    pub phi_rf_rad: f64,
    /// Applied spin-phase coefficient during the scan, rad/angstrom.
    pub applied_alpha_rad_per_angstrom: f64,
    /// Wavelength range used, angstroms.
    pub fit_range_angstrom: (f64, f64),
    /// RMS residual of the normalized polarization.
    pub residual_norm: f64,
    /// Covariance of `(alpha_0, b, phi_RF)` from the linearized fit.
    pub covariance: Matrix3<f64>,
}

fn tof_model(lambda: f64, applied: f64, alpha0: f64, cubic: f64, phi: f64) -> f64 {
    let numerator = ((applied - alpha0) * lambda + cubic * lambda.powi(3) + phi).cos();
    let denominator = (alpha0 * lambda - phi).cos();
    if denominator.abs() < 1e-12 {
        return f64::INFINITY;
    }
    numerator / denominator
}

/// Fit the normalized polarization curve
/// `Pol(lambda) = cos[(alpha - alpha_0) lambda + b lambda^3 + phi_RF] /
/// cos(alpha_0 lambda - phi_RF)`
/// for the tuning errors `(alpha_0, b, phi_RF)`.
///
/// `curve` holds `(wavelength in angstroms, normalized polarization)` points;
/// `applied_alpha` is the spin-phase coefficient that was applied during the
/// scan, rad/angstrom. Points outside 3.8-8.0 A are ignored. A coarse grid
/// over `(alpha_0, phi_RF)` seeds a Levenberg-Marquardt refinement; among
/// near-equal grid minima the smallest-magnitude parameters win.
pub fn fit_tof_polarization(
    curve: &[(f64, f64)],
    applied_alpha: f64,
) -> Result<TofPolarizationFit, AnalysisError> {
    let points: Vec<(f64, f64)> = curve
        .iter()
        .filter(|&&(lambda, _)| {
            lambda >= TOF_FIT_RANGE_ANGSTROM.0 && lambda <= TOF_FIT_RANGE_ANGSTROM.1
        })
        .copied()
        .collect();
    if points.len() < 8 {
        return Err(AnalysisError::InsufficientBins {
            needed: 8,
            got: points.len(),
        });
    }

    let sse = |alpha0: f64, cubic: f64, phi: f64| -> f64 {
        points
            .iter()
            .map(|&(lambda, y)| {
                let r = tof_model(lambda, applied_alpha, alpha0, cubic, phi) - y;
                r * r
            })
            .sum()
    };

    // Coarse grid over (alpha_0, phi_RF) at b = 0.
    let mut best: (f64, f64) = (0.0, 0.0);
    let mut best_sse = f64::INFINITY;
    for i in 0..=60 {
        let alpha0 = -0.3 + 0.01 * i as f64;
        for j in 0..72 {
            let phi = -std::f64::consts::PI + j as f64 * std::f64::consts::PI / 36.0;
            let value = sse(alpha0, 0.0, phi);
            let tie = (value - best_sse).abs() <= 1e-12 * best_sse.max(1e-12);
            if value < best_sse - 1e-12 * best_sse.max(1e-12)
                || (tie && alpha0.abs() + phi.abs() < best.0.abs() + best.1.abs())
            {
                best_sse = value;
                best = (alpha0, phi);
            }
        }
    }

    // Levenberg-Marquardt with a numerical Jacobian.
    let mut params = Vector3::new(best.0, 0.0, best.1);
    let mut lambda_lm = 1e-3;
    let mut current_sse = sse(params[0], params[1], params[2]);
    for _ in 0..200 {
        let mut jtj = Matrix3::<f64>::zeros();
        let mut jtr = Vector3::<f64>::zeros();
        for &(lambda, y) in &points {
            let model = |p: &Vector3<f64>| tof_model(lambda, applied_alpha, p[0], p[1], p[2]);
            let r = model(&params) - y;
            let mut gradient = Vector3::zeros();
            for k in 0..3 {
                let h = 1e-7 * params[k].abs().max(1e-4);
                let mut plus = params;
                plus[k] += h;
                let mut minus = params;
                minus[k] -= h;
                gradient[k] = (model(&plus) - model(&minus)) / (2.0 * h);
            }
            jtj += gradient * gradient.transpose();
            jtr += gradient * r;
        }
        let mut damped = jtj;
        for k in 0..3 {
            damped[(k, k)] += lambda_lm * jtj[(k, k)].max(1e-12);
        }
        let Some(inverse) = damped.try_inverse() else {
            lambda_lm *= 10.0;
            continue;
        };
        let step = -inverse * jtr;
        let candidate = params + step;
        let candidate_sse = sse(candidate[0], candidate[1], candidate[2]);
        if candidate_sse.is_finite() && candidate_sse < current_sse {
            params = candidate;
            let improvement = current_sse - candidate_sse;
            current_sse = candidate_sse;
            lambda_lm = (lambda_lm * 0.3).max(1e-12);
            if step.norm() < 1e-12 || improvement < 1e-18 {
                break;
            }
        } else {
            lambda_lm *= 10.0;
            if lambda_lm > 1e12 {
                break;
            }
        }
    }

    if !current_sse.is_finite() || current_sse > best_sse + 1e-9 {
        return Err(AnalysisError::FitDiverged {
            best_alpha0: best.0,
            best_phi_rf: best.1,
        });
    }

    // Linearized covariance at the solution: (J^T J)^-1 * SSE / (n - 3).
    let mut jtj = Matrix3::<f64>::zeros();
    for &(lambda, _) in &points {
        let model = |p: &Vector3<f64>| tof_model(lambda, applied_alpha, p[0], p[1], p[2]);
        let mut gradient = Vector3::zeros();
        for k in 0..3 {
            let h = 1e-7 * params[k].abs().max(1e-4);
            let mut plus = params;
            plus[k] += h;
            let mut minus = params;
            minus[k] -= h;
            gradient[k] = (model(&plus) - model(&minus)) / (2.0 * h);
        }
        jtj += gradient * gradient.transpose();
    }
    let dof = (points.len().saturating_sub(3)).max(1) as f64;
    let covariance = jtj
        .try_inverse()
        .map(|inv| inv * (current_sse / dof))
        .unwrap_or_else(|| Matrix3::from_element(f64::INFINITY));

    Ok(TofPolarizationFit {
        alpha0_rad_per_angstrom: params[0],
        cubic_rad_per_angstrom3: params[1],
        phi_rf_rad: canonical_phase(params[2]),
        applied_alpha_rad_per_angstrom: applied_alpha,
        fit_range_angstrom: TOF_FIT_RANGE_ANGSTROM,
        residual_norm: (current_sse / points.len() as f64).sqrt(),
        covariance,
    })
}
