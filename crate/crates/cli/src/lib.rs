//! Command-line driver: simulate, process, analyze, compare and po-trace.

pub mod analysis;
pub mod args;
pub mod manifest;

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::Parser;
use pehmqc::acquisition::{
    read_raw, run_experiment_from, write_raw, AcqError, AcqParams, Audit, RawData2D,
    DEFAULT_T1_INITIAL_S,
};
use pehmqc::checks::{closed_form_checks, sample_t1s, CheckLine};
use pehmqc::hilbert::equilibrium_state;
use pehmqc::po::{po_trace, render_trace, PoError};
use pehmqc::processing::{
    process, read_spectrum_csv, write_spectrum_csv, PhaseMode, ProcessingParams, RealSpectrum,
    Spectrum2D, Window,
};
use pehmqc::sequence::{
    build_hmqc_with, build_pe_hmqc_with, parse_sequence, HmqcOptions, PulseSequence, QuadMode,
    DEFAULT_DELTA_S,
};
use pehmqc::spin_system::{
    builtin_system, ch_remote, load_system, Isotope, SpinSystem, DEFAULT_REMOTE_2J,
};
use serde_json::json;
use thiserror::Error;

use analysis::{compare_spectra, parse_section, peak_report, CompareReport};
use args::{
    AcqArgs, AnalyzeArgs, Cli, Command, CompareArgs, PoTraceArgs, ProcArgs, ProcessArgs, Profile,
    SequenceArgs, SimulateArgs, SystemArgs,
};
use manifest::{sha256_hex, ManifestBuilder};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
    #[error("{0}")]
    CheckFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Validation(_) => 2,
            CliError::CheckFailed(_) => 3,
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

/// Offsets are pulled inside this fraction of the spectral width by the
/// desk profile.
pub const DESK_OFFSET_FRACTION: f64 = 0.35;

pub fn profile_params(profile: Profile) -> AcqParams {
    match profile {
        Profile::Desk => AcqParams {
            sw2_hz: 800.0,
            n2: 256,
            sw1_hz: 200.0,
            n1: 512,
            t1_initial_s: DEFAULT_T1_INITIAL_S,
        },
        Profile::Paper => AcqParams {
            sw2_hz: 2790.0,
            n2: 840,
            sw1_hz: 6500.0,
            n1: 2400,
            t1_initial_s: DEFAULT_T1_INITIAL_S,
        },
    }
}

/// Default zero filling (total points) for compare: desk spectra carry no
/// relaxation, so F1 is filled eightfold to keep off-grid phase errors small.
pub fn profile_zero_fill(profile: Profile, p: &AcqParams) -> (usize, usize) {
    match profile {
        Profile::Desk => (
            (8 * p.n1).next_power_of_two(),
            (2 * p.n2).next_power_of_two(),
        ),
        Profile::Paper => (
            4096.max(p.n1.next_power_of_two()),
            1024.max(p.n2.next_power_of_two()),
        ),
    }
}

pub fn resolve_acquisition(a: &AcqArgs) -> Result<AcqParams, CliError> {
    let mut p = profile_params(a.profile);
    p.sw1_hz = a.sw1.unwrap_or(p.sw1_hz);
    p.sw2_hz = a.sw2.unwrap_or(p.sw2_hz);
    p.n1 = a.n1.unwrap_or(p.n1);
    p.n2 = a.n2.unwrap_or(p.n2);
    p.t1_initial_s = a.t1_init.unwrap_or(p.t1_initial_s);
    let pos = |v: f64| v.is_finite() && v > 0.0;
    if !pos(p.sw1_hz) {
        return Err(CliError::Validation(format!(
            "--sw1 must be positive, got {}",
            p.sw1_hz
        )));
    }
    if !pos(p.sw2_hz) {
        return Err(CliError::Validation(format!(
            "--sw2 must be positive, got {}",
            p.sw2_hz
        )));
    }
    if p.n1 == 0 {
        return Err(CliError::Validation("--n1 must be at least 1".into()));
    }
    if p.n2 == 0 {
        return Err(CliError::Validation("--n2 must be at least 1".into()));
    }
    if !(p.t1_initial_s.is_finite() && p.t1_initial_s >= 0.0) {
        return Err(CliError::Validation(format!(
            "--t1-init must be non-negative, got {}",
            p.t1_initial_s
        )));
    }
    Ok(p)
}

pub fn resolve_system(a: &SystemArgs) -> Result<SpinSystem, CliError> {
    let invalid = |e: &dyn std::fmt::Display| CliError::Validation(format!("--system: {e}"));
    if let Some(name) = a.system.strip_prefix("builtin:") {
        if name == "ch-remote" {
            return ch_remote(a.two_j.unwrap_or(DEFAULT_REMOTE_2J)).map_err(|e| invalid(&e));
        }
        if a.two_j.is_some() {
            return Err(CliError::Validation(
                "--two-j only applies to builtin:ch-remote".into(),
            ));
        }
        return builtin_system(name).map_err(|e| invalid(&e));
    }
    if a.two_j.is_some() {
        return Err(CliError::Validation(
            "--two-j only applies to builtin:ch-remote".into(),
        ));
    }
    let path = Path::new(&a.system);
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    load_system(&text).map_err(|e| invalid(&e))
}

/// The desk profile shrinks offsets into the spectral windows so that
/// reduced widths still contain every line.
pub fn profile_system(system: &SpinSystem, profile: Profile, p: &AcqParams) -> SpinSystem {
    match profile {
        Profile::Desk => system
            .fit_offsets_into(Isotope::H1, p.sw2_hz, DESK_OFFSET_FRACTION)
            .fit_offsets_into(Isotope::C13, p.sw1_hz, DESK_OFFSET_FRACTION),
        Profile::Paper => system.clone(),
    }
}

pub fn hmqc_options(a: &SequenceArgs) -> HmqcOptions {
    HmqcOptions {
        filters: !a.no_filters,
        refocus_inept: !a.no_refocus,
        quad: if a.tppi {
            QuadMode::StatesTppi
        } else {
            QuadMode::States
        },
    }
}

pub fn resolve_delta(a: &SequenceArgs) -> Result<f64, CliError> {
    let d = a.delta.unwrap_or(DEFAULT_DELTA_S);
    if !(d.is_finite() && d > 0.0) {
        return Err(CliError::Validation(format!(
            "--delta must be positive, got {d}"
        )));
    }
    Ok(d)
}

pub fn resolve_sequence(spec: &str, a: &SequenceArgs) -> Result<PulseSequence, CliError> {
    let invalid = |e: &dyn std::fmt::Display| CliError::Validation(format!("--sequence: {e}"));
    let delta = resolve_delta(a)?;
    let opts = hmqc_options(a);
    match spec {
        "hmqc" => build_hmqc_with(delta, opts).map_err(|e| invalid(&e)),
        "pe-hmqc" => build_pe_hmqc_with(delta, a.n_pe, opts).map_err(|e| invalid(&e)),
        _ => {
            let path = spec.strip_prefix("file:").ok_or_else(|| {
                CliError::Validation(format!(
                    "--sequence: expected hmqc, pe-hmqc or file:PATH, got '{spec}'"
                ))
            })?;
            let text = fs::read_to_string(path).map_err(|e| io_err(Path::new(path), e))?;
            let mut seq = parse_sequence(&text).map_err(|e| invalid(&e))?;
            if let Some(d) = a.delta {
                seq.params.insert("delta".into(), d);
            }
            if a.tppi {
                seq.quad.mode = QuadMode::StatesTppi;
            }
            seq.validate().map_err(|e| invalid(&e))?;
            Ok(seq)
        }
    }
}

pub fn parse_window(s: &str) -> Result<Window, CliError> {
    let bad = || {
        CliError::Validation(format!(
            "--window: expected none or sine2[:shift], got '{s}'"
        ))
    };
    match s.split_once(':') {
        None if s == "none" => Ok(Window::None),
        None if s == "sine2" => Ok(Window::SineSquare { shift: 0.0 }),
        Some(("sine2", shift)) => {
            let shift: f64 = shift.parse().map_err(|_| bad())?;
            if !(0.0..1.0).contains(&shift) {
                return Err(CliError::Validation(format!(
                    "--window: shift must be in [0, 1), got {shift}"
                )));
            }
            Ok(Window::SineSquare { shift })
        }
        _ => Err(bad()),
    }
}

pub fn parse_phase(s: &str) -> Result<PhaseMode, CliError> {
    if s == "auto" {
        return Ok(PhaseMode::Auto);
    }
    let bad = || CliError::Validation(format!("--phase: expected auto or p0_f2,p0_f1, got '{s}'"));
    let (a, b) = s.split_once(',').ok_or_else(bad)?;
    let p0_f2: f64 = a.trim().parse().map_err(|_| bad())?;
    let p0_f1: f64 = b.trim().parse().map_err(|_| bad())?;
    if !(p0_f2.is_finite() && p0_f1.is_finite()) {
        return Err(bad());
    }
    Ok(PhaseMode::Manual { p0_f2, p0_f1 })
}

pub fn resolve_processing(
    a: &ProcArgs,
    default_zf: Option<(usize, usize)>,
) -> Result<ProcessingParams, CliError> {
    let window = parse_window(&a.window)?;
    Ok(ProcessingParams {
        zf1: a.zf1.or(default_zf.map(|z| z.0)),
        zf2: a.zf2.or(default_zf.map(|z| z.1)),
        window_f1: window,
        window_f2: window,
        phase: parse_phase(&a.phase)?,
        first_order_f1: !a.no_first_order,
    })
}

fn acq_err(e: AcqError) -> CliError {
    match e {
        AcqError::Params(_) | AcqError::Sequence(_) => CliError::Validation(e.to_string()),
        e => CliError::Runtime(e.to_string()),
    }
}

pub fn simulate(
    system: &SpinSystem,
    seq: &PulseSequence,
    p: &AcqParams,
) -> Result<(RawData2D, Audit), CliError> {
    run_experiment_from(system, seq, p, &equilibrium_state(system), true).map_err(acq_err)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Writes the processing log and, with `csv`, the spectrum into `dir`.
fn write_spectrum(dir: &Path, spec: &Spectrum2D, csv: bool) -> Result<RealSpectrum, CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let real = spec.real();
    if csv {
        let path = dir.join("spectrum.csv");
        write_spectrum_csv(&path, &real).map_err(|e| io_err(&path, e))?;
    }
    write_json(&dir.join("processing.json"), &spec.log)?;
    Ok(real)
}

fn cmd_simulate(a: &SimulateArgs) -> Result<(), CliError> {
    let p = resolve_acquisition(&a.acq)?;
    let base = resolve_system(&a.system)?;
    let system = profile_system(&base, a.acq.profile, &p);
    let seq = resolve_sequence(&a.sequence, &a.seq)?;
    let params = json!({
        "args": a,
        "acquisition": p,
        "delta_s": seq.delta(),
        "sequence_name": seq.name,
        "system_effective": system,
    });
    let mut mb = ManifestBuilder::new("simulate", params);
    mb.input_hash("system", base.content_hash());
    if let Some(path) = a.sequence.strip_prefix("file:") {
        mb.input("sequence", Path::new(path))?;
    }
    let (raw, audit) = simulate(&system, &seq, &p)?;
    write_raw(&a.out, &raw).map_err(acq_err)?;
    for f in ["metadata.json", "cos.bin", "sin.bin"] {
        mb.output(&a.out, f)?;
    }
    mb.audit(audit);
    mb.write(&a.out.join("manifest.json"))?;
    println!(
        "{}: {} x {} points written to {} (audit worst {:.2e})",
        seq.name,
        p.n1,
        p.n2,
        a.out.display(),
        audit.worst()
    );
    Ok(())
}

fn cmd_process(a: &ProcessArgs) -> Result<(), CliError> {
    let pp = resolve_processing(&a.proc, None)?;
    for f in ["metadata.json", "cos.bin", "sin.bin"] {
        if !a.raw.join(f).is_file() {
            return Err(CliError::Runtime(format!(
                "missing raw file {}",
                a.raw.join(f).display()
            )));
        }
    }
    let raw = read_raw(&a.raw).map_err(acq_err)?;
    let spec = process(&raw, &pp).map_err(|e| match e {
        pehmqc::processing::ProcError::ZeroFill { .. } => {
            CliError::Validation(format!("--zf1/--zf2: {e}"))
        }
        e => CliError::Runtime(e.to_string()),
    })?;
    let out = a.out.clone().unwrap_or_else(|| a.raw.clone());
    let mut mb = ManifestBuilder::new(
        "process",
        json!({ "args": a, "processing": pp, "processing_hash": pp.hash() }),
    );
    for f in ["metadata.json", "cos.bin", "sin.bin"] {
        mb.input(f, &a.raw.join(f))?;
    }
    write_spectrum(&out, &spec, true)?;
    mb.output(&out, "spectrum.csv")?;
    mb.output(&out, "processing.json")?;
    mb.write(&out.join("process_manifest.json"))?;
    println!(
        "resolution F1 {:.3} Hz, F2 {:.3} Hz; phases p0_f2 {:.4}, p0_f1 {:.4}, p1_f1 {:.4} deg",
        spec.log.resolution_f1_hz,
        spec.log.resolution_f2_hz,
        spec.log.p0_f2_deg,
        spec.log.p0_f1_deg,
        spec.log.p1_f1_deg
    );
    Ok(())
}

fn read_spectrum(path: &Path) -> Result<RealSpectrum, CliError> {
    read_spectrum_csv(path).map_err(|e| io_err(path, e))
}

fn cmd_analyze(a: &AnalyzeArgs) -> Result<(), CliError> {
    let sel = parse_section(&a.section)?;
    if !(0.0..1.0).contains(&a.threshold) {
        return Err(CliError::Validation(format!(
            "--threshold must be in [0, 1), got {}",
            a.threshold
        )));
    }
    let spec = read_spectrum(&a.spectrum)?;
    let base = a.baseline.as_deref().map(read_spectrum).transpose()?;
    let report = peak_report(
        &spec,
        base.as_ref(),
        sel,
        a.threshold,
        a.noise_sigma.map(|s| (s, a.seed)),
    )?;
    let text = report.to_json();
    match &a.out {
        Some(path) => {
            fs::write(path, &text).map_err(|e| io_err(path, e))?;
            let mut mb = ManifestBuilder::new("analyze", json!({ "args": a }));
            mb.input("spectrum", &a.spectrum)?;
            if let Some(b) = &a.baseline {
                mb.input("baseline", b)?;
            }
            mb.input_hash("report", sha256_hex(text.as_bytes()));
            let mpath = manifest_path_for(path);
            mb.write(&mpath)?;
        }
        None => {
            print!("{text}");
        }
    }
    Ok(())
}

fn manifest_path_for(path: &Path) -> PathBuf {
    let mut name = path
        .file_stem()
        .map(|s| s.to_os_string())
        .unwrap_or_default();
    name.push(".manifest.json");
    path.with_file_name(name)
}

/// Result of a full compare run.
pub struct CompareOutcome {
    pub report: CompareReport,
    pub audit: Audit,
    pub pe: RealSpectrum,
    pub hmqc: RealSpectrum,
}

pub fn run_compare(a: &CompareArgs) -> Result<CompareOutcome, CliError> {
    let p = resolve_acquisition(&a.acq)?;
    let base = resolve_system(&a.system)?;
    let system = profile_system(&base, a.acq.profile, &p);
    let delta = resolve_delta(&a.seq)?;
    let opts = hmqc_options(&a.seq);
    let invalid = |e: &dyn std::fmt::Display| CliError::Validation(format!("--n-pe/--delta: {e}"));
    let pe_seq = build_pe_hmqc_with(delta, a.seq.n_pe, opts).map_err(|e| invalid(&e))?;
    let hm_seq = build_hmqc_with(delta, opts).map_err(|e| invalid(&e))?;
    // one processing object for both data sets
    let pp = resolve_processing(&a.proc, Some(profile_zero_fill(a.acq.profile, &p)))?;
    for (flag, v) in [
        ("--threshold", a.threshold),
        ("--section-threshold", a.section_threshold),
    ] {
        if !(0.0..1.0).contains(&v) {
            return Err(CliError::Validation(format!(
                "{flag} must be in [0, 1), got {v}"
            )));
        }
    }

    let mut mb = ManifestBuilder::new(
        "compare",
        json!({
            "args": a,
            "acquisition": p,
            "delta_s": delta,
            "processing": pp,
            "processing_hash": pp.hash(),
            "system_effective": system,
        }),
    );
    mb.input_hash("system", base.content_hash());

    let mut audit = Audit::default();
    let mut spectra = Vec::new();
    for (dir, seq) in [("hmqc", &hm_seq), ("pe-hmqc", &pe_seq)] {
        let (raw, au) = simulate(&system, seq, &p)?;
        mb.audit(au);
        audit = merge_audit(audit, au);
        let out = a.out.join(dir);
        write_raw(&out, &raw).map_err(acq_err)?;
        let spec = process(&raw, &pp).map_err(|e| CliError::Runtime(e.to_string()))?;
        let real = write_spectrum(&out, &spec, a.write_spectra)?;
        for f in ["metadata.json", "cos.bin", "sin.bin", "processing.json"] {
            mb.output(&a.out, &format!("{dir}/{f}"))?;
        }
        if a.write_spectra {
            mb.output(&a.out, &format!("{dir}/spectrum.csv"))?;
        }
        spectra.push((real, spec.log.params_hash.clone()));
    }
    let (pe, pe_hash) = spectra.pop().expect("two runs");
    let (hmqc, hm_hash) = spectra.pop().expect("two runs");

    let entries = compare_spectra(&system, &pe, &hmqc, a.threshold, a.section_threshold)?;
    let (r1, r2) = pe.resolution();
    let report = CompareReport {
        system: system.name.clone(),
        system_hash: system.content_hash(),
        profile: serde_json::to_value(a.acq.profile)
            .ok()
            .and_then(|v| v.as_str().map(String::from))
            .unwrap_or_default(),
        n_pe: a.seq.n_pe,
        delta_s: delta,
        acquisition: p,
        identical_processing: pe_hash == hm_hash,
        processing_hash_pe: pe_hash,
        processing_hash_hmqc: hm_hash,
        resolution_f1_hz: r1,
        resolution_f2_hz: r2,
        threshold_rel: a.threshold,
        section_threshold: a.section_threshold,
        summary: entries.first().cloned(),
        entries,
    };
    write_json(&a.out.join("compare.json"), &report)?;
    mb.output(&a.out, "compare.json")?;
    mb.write(&a.out.join("manifest.json"))?;
    Ok(CompareOutcome {
        report,
        audit,
        pe,
        hmqc,
    })
}

fn merge_audit(a: Audit, b: Audit) -> Audit {
    Audit {
        unitarity: a.unitarity.max(b.unitarity),
        hermiticity: a.hermiticity.max(b.hermiticity),
        trace_drift: a.trace_drift.max(b.trace_drift),
        purity_drift: a.purity_drift.max(b.purity_drift),
        steps: a.steps + b.steps,
    }
}

fn cmd_compare(a: &CompareArgs) -> Result<(), CliError> {
    let o = run_compare(a)?;
    match &o.report.summary {
        None => println!("no heteronuclear cross peaks"),
        Some(s) => {
            let h = s.hmqc.as_ref();
            println!(
                "F2 {:.2} Hz: pe-HMQC F1 {:.3} Hz (splitting {:.3}), HMQC splitting {:.3} Hz, ratio {}",
                s.f2_hz,
                s.pe.f1_hz,
                s.pe.splitting_hz,
                h.map(|h| h.splitting_hz).unwrap_or(f64::NAN),
                s.ratio.map(|r| format!("{r:.4}")).unwrap_or_else(|| "n/a".into())
            );
        }
    }
    println!("identical processing: {}", o.report.identical_processing);
    Ok(())
}

pub struct TraceOutcome {
    pub table: String,
    pub checks: Vec<CheckLine>,
}

pub fn run_po_trace(a: &PoTraceArgs) -> Result<TraceOutcome, CliError> {
    let system = resolve_system(&a.system)?;
    let seq = resolve_sequence(&a.sequence, &a.seq)?;
    if !(a.t1.is_finite() && a.t1 >= 0.0) {
        return Err(CliError::Validation(format!(
            "--t1 must be non-negative, got {}",
            a.t1
        )));
    }
    let marks: Vec<&str> = a
        .marks
        .iter()
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .collect();
    let trace = po_trace(&seq, &system, a.t1, &marks).map_err(po_err)?;
    let table = render_trace(&system, &trace, &marks);
    let mut checks = Vec::new();
    if a.check {
        // the traced sequence is checked against the perfect-echo forms; the
        // conventional reference uses the same delay
        let hm = build_hmqc_with(seq.delta(), hmqc_options(&a.seq))
            .map_err(|e| CliError::Validation(e.to_string()))?;
        let t1s: Vec<f64> = std::iter::once(a.t1).chain(sample_t1s()).collect();
        checks = closed_form_checks(&system, &seq, &hm, &t1s, 1e-9).map_err(|e| match e {
            pehmqc::checks::CheckError::Po(p) => po_err(p),
            e => CliError::Validation(format!("--check: {e}")),
        })?;
    }
    Ok(TraceOutcome { table, checks })
}

fn po_err(e: PoError) -> CliError {
    match e {
        PoError::UnsupportedModel { .. } | PoError::UnknownMark(_) | PoError::Sequence(_) => {
            CliError::Validation(e.to_string())
        }
        e => CliError::Runtime(e.to_string()),
    }
}

fn cmd_po_trace(a: &PoTraceArgs) -> Result<(), CliError> {
    let o = run_po_trace(a)?;
    let mut text = o.table.clone();
    if a.check {
        let mut worst: f64 = 0.0;
        for c in &o.checks {
            worst = worst.max(c.value);
            text.push_str(&format!(
                "{} {} deviation {:.3e} (tolerance {:.0e})\n",
                if c.pass() { "PASS" } else { "FAIL" },
                c.name,
                c.value,
                c.tolerance
            ));
        }
        text.push_str(&format!("max deviation {worst:.3e}\n"));
    }
    print!("{text}");
    if let Some(path) = &a.out {
        fs::write(path, &text).map_err(|e| io_err(path, e))?;
    }
    if o.checks.iter().any(|c| !c.pass()) {
        return Err(CliError::CheckFailed("closed-form check failed".into()));
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let go = || match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Process(a) => cmd_process(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Compare(a) => cmd_compare(a),
        Command::PoTrace(a) => cmd_po_trace(a),
    };
    match cli.workers {
        Some(0) => Err(CliError::Validation("--workers must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Runtime(e.to_string()))?
            .install(go),
        None => go(),
    }
}

/// Parses `argv` (program name first), runs it and returns the exit code.
pub fn run_from_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {e}");
            e.exit_code()
        }
    }
}
