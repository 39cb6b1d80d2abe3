//! Batch driver for spin-path entanglement experiments: simulate synthetic
//! scans, analyze count datasets into witness reports, solve RF focusing
//! conditions, inspect coherence properties, and aggregate report summaries.
//!
//! Exit codes: 0 success, 2 validation failure (config, schema, coverage),
//! 3 numerical failure (degenerate fits, diverged solvers).

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use spinpath::analysis::{
    subset_by_wavelength, witness_from_dataset, witness_per_wavelength, witness_uncertainty_mc,
    write_fit_curves_csv, AnalysisError, WitnessReport, REPORT_CSV_HEADER,
};
use spinpath::beamline::{
    default_alpha_grid, default_chi_grid, expected_scan, expected_tof_scan, simulate_scan,
    simulate_tof_scan, transmission_correct, BeamWavelength, BeamlineError, ScanDataset,
};
use spinpath::coherence::{delta_y_profile, overlap_regime, CoherenceError, ProfileLabel};
use spinpath::config::{load_config, ConfigError};
use spinpath::devices::{
    solve_focusing, DeviceError, FlipperDistances, RfFlipperQuartet, RfMode,
};
use spinpath::quantum::{AngleSet, CLASSICAL_BOUND, TSIRELSON_BOUND};

#[derive(Parser)]
#[command(
    name = "spinpath",
    version,
    about = "Spin-path entangled neutron beam simulation and CHSH witness analysis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scan dataset from an experiment config
    Simulate {
        /// Experiment config (TOML)
        #[arg(long)]
        config: PathBuf,
        /// RNG seed; the same seed reproduces the dataset byte for byte
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Write expected intensities instead of Poisson draws
        #[arg(long)]
        noiseless: bool,
        /// Override the config's flux per setting
        #[arg(long)]
        flux: Option<f64>,
    },
    /// Extract the CHSH witness from a dataset CSV
    Analyze {
        /// Dataset CSV (with optional .meta.toml sidecar)
        #[arg(long)]
        dataset: PathBuf,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Witness angles a1,a2,c1,c2 in degrees (default: the MWP protocol)
        #[arg(long, allow_hyphen_values = true)]
        angles: Option<String>,
        /// Monte Carlo trials for the witness uncertainty (0 to skip)
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        /// Seed for the Monte Carlo resampling
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Evaluate from raw four-point counts instead of fitted curves
        #[arg(long)]
        raw_counts: bool,
        /// Skip the transmission/monitor normalization step
        #[arg(long)]
        no_transmission_correct: bool,
    },
    /// Solve the overlap-mode focusing condition and print the profile
    Focus {
        /// First flipper frequency, kHz
        #[arg(long)]
        nu1_khz: f64,
        #[arg(long)]
        l12_m: f64,
        #[arg(long)]
        l2s_m: f64,
        #[arg(long)]
        ls3_m: f64,
        #[arg(long)]
        l34_m: f64,
        /// Conventional mode: equal frequencies, guide field reversed
        #[arg(long)]
        conventional: bool,
        /// Wavelength for the separation profile, angstroms
        #[arg(long, default_value_t = 4.0)]
        wavelength_angstrom: f64,
        /// Directory for the profile CSV (optional)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print coherence lengths, regime, and the separation profile
    Coherence {
        /// Experiment config (TOML)
        #[arg(long)]
        config: PathBuf,
        /// Output directory for the profile CSV
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate witness reports into a summary table
    Report {
        /// Output directory for the summary CSV (optional; prints either way)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Witness report TOML files
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
}

/// Failures mapped onto the documented exit codes.
enum CliError {
    Io(String),
    Validation(String),
    Numerical(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Io(_) => 1,
            CliError::Validation(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Io(m) | CliError::Validation(m) | CliError::Numerical(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io(e) => CliError::Io(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<BeamlineError> for CliError {
    fn from(e: BeamlineError) -> Self {
        match e {
            BeamlineError::Io(e) => CliError::Io(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<DeviceError> for CliError {
    fn from(e: DeviceError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<CoherenceError> for CliError {
    fn from(e: CoherenceError) -> Self {
        match e {
            CoherenceError::Io(e) => CliError::Io(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Io(io) => CliError::Io(io.to_string()),
            AnalysisError::DegenerateDesign
            | AnalysisError::ZeroDenominator
            | AnalysisError::NonPositiveSigma
            | AnalysisError::FitDiverged { .. } => CliError::Numerical(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

/// Record of one invocation, written next to the outputs.
#[derive(Serialize, Deserialize)]
struct RunManifest {
    format_version: u32,
    command: String,
    config_path: Option<String>,
    dataset_path: Option<String>,
    output_dir: Option<String>,
    seed: Option<u64>,
}

impl RunManifest {
    fn write(&self, dir: &Path) -> Result<(), CliError> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| CliError::Io(format!("manifest serialization: {e}")))?;
        std::fs::write(dir.join("manifest.toml"), text)?;
        Ok(())
    }
}

fn main() -> ExitCode {
    // die quietly when the consumer of a pipe goes away (e.g. `| head`)
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Simulate {
            config,
            seed,
            out,
            noiseless,
            flux,
        } => cmd_simulate(&config, seed, &out, noiseless, flux),
        Command::Analyze {
            dataset,
            out,
            angles,
            trials,
            seed,
            raw_counts,
            no_transmission_correct,
        } => cmd_analyze(
            &dataset,
            &out,
            angles.as_deref(),
            trials,
            seed,
            raw_counts,
            no_transmission_correct,
        ),
        Command::Focus {
            nu1_khz,
            l12_m,
            l2s_m,
            ls3_m,
            l34_m,
            conventional,
            wavelength_angstrom,
            out,
        } => cmd_focus(
            nu1_khz,
            FlipperDistances {
                l12: l12_m,
                l2s: l2s_m,
                ls3: ls3_m,
                l34: l34_m,
            },
            conventional,
            wavelength_angstrom,
            out.as_deref(),
        ),
        Command::Coherence { config, out } => cmd_coherence(&config, &out),
        Command::Report { out, reports } => cmd_report(out.as_deref(), &reports),
    }
}

fn print_warnings(warnings: &[String]) {
    for warning in warnings {
        eprintln!("warning: {warning}");
    }
}

fn cmd_simulate(
    config_path: &Path,
    seed: u64,
    out: &Path,
    noiseless: bool,
    flux: Option<f64>,
) -> Result<(), CliError> {
    let (mut cfg, warnings) = load_config(config_path)?;
    print_warnings(&warnings);
    if let Some(flux) = flux {
        cfg.beam.incident_flux = flux;
        print_warnings(&cfg.validate()?);
    }

    let alphas = default_alpha_grid();
    let chis = default_chi_grid();
    let tof = matches!(cfg.beam.wavelength, BeamWavelength::Tof(_));
    let dataset = match (tof, noiseless) {
        (false, false) => simulate_scan(&cfg, &alphas, &chis, seed)?,
        (false, true) => expected_scan(&cfg, &alphas, &chis)?,
        (true, false) => simulate_tof_scan(&cfg, &alphas, &chis, seed)?,
        (true, true) => expected_tof_scan(&cfg, &alphas, &chis)?,
    };

    std::fs::create_dir_all(out)?;
    let csv_path = out.join("dataset.csv");
    dataset.save(&csv_path)?;
    RunManifest {
        format_version: 1,
        command: "simulate".to_string(),
        config_path: Some(config_path.display().to_string()),
        dataset_path: Some(csv_path.display().to_string()),
        output_dir: Some(out.display().to_string()),
        seed: (!noiseless).then_some(seed),
    }
    .write(out)?;

    println!(
        "simulated {} records ({} mode, {}) -> {}",
        dataset.records.len(),
        dataset.metadata.instrument_mode,
        if noiseless { "noiseless" } else { "poisson" },
        csv_path.display()
    );
    Ok(())
}

fn parse_angles(text: &str) -> Result<AngleSet, CliError> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Validation(format!("bad --angles value: {e}")))?;
    if parts.len() != 4 {
        return Err(CliError::Validation(format!(
            "--angles needs four comma-separated degrees a1,a2,c1,c2, got {}",
            parts.len()
        )));
    }
    Ok(AngleSet::new(
        parts[0].to_radians(),
        parts[1].to_radians(),
        parts[2].to_radians(),
        parts[3].to_radians(),
    ))
}

fn report_stem(report: &WitnessReport, per_wavelength: bool) -> String {
    match report.wavelength_m {
        Some(lambda) if per_wavelength => format!("report_{:.2}A", lambda / 1e-10),
        _ => "report".to_string(),
    }
}

fn cmd_analyze(
    dataset_path: &Path,
    out: &Path,
    angles: Option<&str>,
    trials: usize,
    seed: u64,
    raw_counts: bool,
    no_transmission_correct: bool,
) -> Result<(), CliError> {
    let loaded = ScanDataset::load(dataset_path)?;
    print_warnings(&loaded.metadata.warnings);
    let dataset = if no_transmission_correct || loaded.metadata.corrected {
        loaded
    } else {
        transmission_correct(&loaded)?
    };

    let angle_set = angles.map(parse_angles).transpose()?;
    let use_fits = !raw_counts;

    let wavelengths = dataset.wavelengths();
    let mut reports = if wavelengths.len() <= 1 {
        vec![witness_from_dataset(&dataset, angle_set, use_fits)?]
    } else {
        witness_per_wavelength(&dataset, angle_set, use_fits)?
    };

    if trials > 0 {
        for report in &mut reports {
            let subset = match report.wavelength_m {
                Some(lambda) if wavelengths.len() > 1 => subset_by_wavelength(&dataset, lambda),
                _ => dataset.clone(),
            };
            report.sigma_s =
                Some(witness_uncertainty_mc(&subset, angle_set, use_fits, trials, seed)?);
        }
    }

    std::fs::create_dir_all(out)?;
    let mut summary = String::from(REPORT_CSV_HEADER);
    summary.push('\n');
    let per_wavelength = reports.len() > 1;
    for report in &reports {
        let stem = report_stem(report, per_wavelength);
        std::fs::write(out.join(format!("{stem}.toml")), report.to_toml()?)?;
        summary.push_str(&report.csv_row());
        summary.push('\n');
    }
    std::fs::write(out.join("summary.csv"), summary)?;

    let curves = std::fs::File::create(out.join("fit_curves.csv"))?;
    write_fit_curves_csv(&dataset, curves)?;

    RunManifest {
        format_version: 1,
        command: "analyze".to_string(),
        config_path: None,
        dataset_path: Some(dataset_path.display().to_string()),
        output_dir: Some(out.display().to_string()),
        seed: (trials > 0).then_some(seed),
    }
    .write(out)?;

    for report in &reports {
        for violation in report.physicality_violations() {
            eprintln!("warning: {}: {violation}", report.label);
        }
        let lambda = report
            .wavelength_m
            .map(|l| format!(" at {:.2} A", l / 1e-10))
            .unwrap_or_default();
        let sigma = report
            .sigma_s
            .map(|s| format!(" +- {s:.4}"))
            .unwrap_or_default();
        let pol = report
            .polarization
            .map(|p| format!(", Pol = {p:.4}"))
            .unwrap_or_default();
        println!(
            "{}{}: S = {:.4}{}{} [{}] -> entanglement {}",
            report.label,
            lambda,
            report.s,
            sigma,
            pol,
            report.strategy,
            report.verdict()
        );
    }
    Ok(())
}

fn cmd_focus(
    nu1_khz: f64,
    distances: FlipperDistances,
    conventional: bool,
    wavelength_angstrom: f64,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let nu1 = nu1_khz * 1e3;
    let wavelength = wavelength_angstrom * 1e-10;

    let quartet = if conventional {
        println!("conventional mode: nu1 = nu2 = nu3 = nu4 = {nu1_khz:.3} kHz");
        println!("note: guide field direction reverses between RF2 and RF3");
        RfFlipperQuartet {
            frequencies: [nu1; 4],
            angles: [70f64.to_radians(); 4],
            distances,
            mode: RfMode::Conventional,
            entanglement_length_override: None,
        }
    } else {
        let solution = solve_focusing(nu1, &distances)?;
        println!("focusing condition for nu1 = {nu1_khz:.3} kHz:");
        println!("  nu2 = {:.3} kHz", solution.nu2 / 1e3);
        println!("  nu3 = {:.3} kHz", solution.nu3 / 1e3);
        println!("  nu4 = {:.3} kHz", solution.nu4 / 1e3);
        RfFlipperQuartet {
            frequencies: [nu1, solution.nu2, solution.nu3, solution.nu4],
            angles: [70f64.to_radians(); 4],
            distances,
            mode: RfMode::Overlap,
            entanglement_length_override: None,
        }
    };

    let profile = delta_y_profile(&quartet, wavelength)?;
    println!("longitudinal separation profile at {wavelength_angstrom:.2} A:");
    for point in &profile.points {
        println!(
            "  {:<7} y = {:.3} m, delta_y = {:+.2} nm",
            point.label.to_string(),
            point.position,
            point.delta_y / 1e-9
        );
    }
    if !conventional {
        let scale = profile.max_abs_delta_y();
        let sample = profile.point(ProfileLabel::Sample).delta_y.abs();
        let rf4 = profile.point(ProfileLabel::Rf4).delta_y.abs();
        let focused = scale == 0.0 || (sample < 1e-12 * scale && rf4 < 1e-12 * scale);
        println!(
            "focus check: delta_y(sample) and delta_y(RF4) {} zero",
            if focused { "are" } else { "ARE NOT" }
        );
        if !focused {
            return Err(CliError::Numerical(
                "focusing solution failed the separation zero check".to_string(),
            ));
        }
    }

    if let Some(out) = out {
        std::fs::create_dir_all(out)?;
        let file = std::fs::File::create(out.join("profile.csv"))?;
        profile.write_csv(file)?;
        RunManifest {
            format_version: 1,
            command: "focus".to_string(),
            config_path: None,
            dataset_path: None,
            output_dir: Some(out.display().to_string()),
            seed: None,
        }
        .write(out)?;
    }
    Ok(())
}

fn cmd_coherence(config_path: &Path, out: &Path) -> Result<(), CliError> {
    let (cfg, warnings) = load_config(config_path)?;
    print_warnings(&warnings);

    let reference = cfg.reference_wavelength();
    let geometry = cfg.beam_geometry_at(reference);
    println!("{} ({})", cfg.label, cfg.instrument_mode());
    println!("  beta_t = {:.2} nm", geometry.beta_t() / 1e-9);
    println!("  beta_l = {:.2} nm", geometry.beta_l() / 1e-9);
    match cfg.xi_at(reference) {
        Ok(xi) => {
            let regime = overlap_regime(xi, geometry.beta_t());
            println!("  xi     = {:.2} nm", xi / 1e-9);
            println!("  xi/beta_t = {:.4} ({})", regime.ratio, regime.class);
        }
        Err(e) => println!("  xi unavailable: {e}"),
    }

    std::fs::create_dir_all(out)?;
    let quartet = cfg.elements.iter().find_map(|e| match e {
        spinpath::beamline::DeviceElement::RfQuartet(q) => Some(q.clone()),
        _ => None,
    });
    if let Some(quartet) = quartet {
        let profile = delta_y_profile(&quartet, reference)?;
        let path = out.join("profile.csv");
        let file = std::fs::File::create(&path)?;
        profile.write_csv(file)?;
        println!(
            "  delta_y(RF2) = {:.2} nm -> {}",
            profile.point(ProfileLabel::Rf2).delta_y / 1e-9,
            path.display()
        );
    } else {
        println!("  no RF quartet: longitudinal separation stays zero (static devices)");
    }
    RunManifest {
        format_version: 1,
        command: "coherence".to_string(),
        config_path: Some(config_path.display().to_string()),
        dataset_path: None,
        output_dir: Some(out.display().to_string()),
        seed: None,
    }
    .write(out)?;
    Ok(())
}

fn cmd_report(out: Option<&Path>, report_paths: &[PathBuf]) -> Result<(), CliError> {
    let mut rows = Vec::new();
    for path in report_paths {
        let text = std::fs::read_to_string(path)?;
        let report = WitnessReport::from_toml(&text)?;
        rows.push(report);
    }

    let mut csv = String::from(
        "label,xi_over_beta_t,s,sigma_s,polarization,s_over_pol,classical_bound,tsirelson_bound,flag\n",
    );
    println!(
        "{:<18} {:>10} {:>8} {:>8} {:>6} {:>8}  flag",
        "label", "xi/beta_t", "S", "sigma_S", "Pol", "S/Pol"
    );
    for report in &rows {
        let ratio = report.regime.map(|r| r.ratio);
        let s_over_pol = report.s_over_pol();
        // flag values outside the physically meaningful band
        let three_sigma = 3.0 * report.sigma_s.unwrap_or(0.0);
        let flag = match s_over_pol {
            Some(v) if v < CLASSICAL_BOUND => "below-classical",
            Some(v) if v > TSIRELSON_BOUND + three_sigma => "above-tsirelson",
            Some(_) => "",
            None => "no-polarization",
        };
        let fmt = |x: Option<f64>| x.map(|v| format!("{v:.4}")).unwrap_or_default();
        println!(
            "{:<18} {:>10} {:>8.4} {:>8} {:>6} {:>8}  {}",
            report.label,
            fmt(ratio),
            report.s,
            fmt(report.sigma_s),
            fmt(report.polarization),
            fmt(s_over_pol),
            flag
        );
        csv.push_str(&format!(
            "{},{},{:.6},{},{},{},{},{},{}\n",
            report.label,
            fmt(ratio),
            report.s,
            fmt(report.sigma_s),
            fmt(report.polarization),
            fmt(s_over_pol),
            CLASSICAL_BOUND,
            TSIRELSON_BOUND,
            flag
        ));
    }

    if let Some(out) = out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("witness_summary.csv"), csv)?;
        RunManifest {
            format_version: 1,
            command: "report".to_string(),
            config_path: None,
            dataset_path: None,
            output_dir: Some(out.display().to_string()),
            seed: None,
        }
        .write(out)?;
    }
    Ok(())
}
