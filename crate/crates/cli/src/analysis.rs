use pehmqc::acquisition::AcqParams;
use pehmqc::processing::{
    multiplet_fraction, peak_metrics, pick_peaks_2d, snr_seeded, Dimension, Peak1D, PeakMetrics,
    PeakReport, ProcError, RealSpectrum, ReportPeak, Section,
};
use pehmqc::spin_system::{Isotope, SpinSystem};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SectionSpec {
    /// Trace along F1 through the spectrum maximum.
    Auto,
    /// Trace along the dimension at a fixed position (Hz) in the other one.
    Along(Dimension, f64),
}

pub fn parse_section(s: &str) -> Result<SectionSpec, CliError> {
    if s == "auto" {
        return Ok(SectionSpec::Auto);
    }
    let bad = || {
        CliError::Validation(format!(
            "--section: expected f1@HZ, f2@HZ or auto, got '{s}'"
        ))
    };
    let (dim, hz) = s.split_once('@').ok_or_else(bad)?;
    let hz: f64 = hz.trim().parse().map_err(|_| bad())?;
    match dim {
        "f1" => Ok(SectionSpec::Along(Dimension::F1, hz)),
        "f2" => Ok(SectionSpec::Along(Dimension::F2, hz)),
        _ => Err(bad()),
    }
}

pub struct SectionAnalysis {
    pub section: Section,
    pub metrics: PeakMetrics,
}

pub fn take_section(spec: &RealSpectrum, sel: SectionSpec) -> Result<Section, ProcError> {
    match sel {
        SectionSpec::Auto => {
            let (_, k) = spec.max_position().ok_or(ProcError::NoPeak)?;
            spec.cross_section(Dimension::F1, spec.f2_axis[k])
        }
        SectionSpec::Along(dim, hz) => spec.cross_section(dim, hz),
    }
}

pub fn analyze_section(
    spec: &RealSpectrum,
    sel: SectionSpec,
    threshold_rel: f64,
) -> Result<SectionAnalysis, ProcError> {
    let section = take_section(spec, sel)?;
    let metrics = peak_metrics(&section.values, &section.axis, threshold_rel)?;
    Ok(SectionAnalysis { section, metrics })
}

/// Linewidth across the section at the peak's bin, taken from the
/// orthogonal trace nearest the section position.
fn orthogonal_fwhm(spec: &RealSpectrum, section: &Section, peak: &Peak1D) -> f64 {
    let (values, axis) = match section.along {
        Dimension::F1 => (spec.data.row(peak.bin).to_vec(), &spec.f2_axis),
        Dimension::F2 => (spec.data.column(peak.bin).to_vec(), &spec.f1_axis),
    };
    peak_metrics(&values, axis, 0.0)
        .ok()
        .and_then(|m| {
            m.peaks.into_iter().min_by(|a, b| {
                (a.position_hz - section.at_hz)
                    .abs()
                    .total_cmp(&(b.position_hz - section.at_hz).abs())
            })
        })
        .map(|p| p.fwhm_hz)
        .unwrap_or(0.0)
}

fn report_peak(spec: &RealSpectrum, section: &Section, p: &Peak1D) -> ReportPeak {
    let across = orthogonal_fwhm(spec, section, p);
    match section.along {
        Dimension::F1 => ReportPeak {
            f1_hz: p.position_hz,
            f2_hz: section.at_hz,
            height: p.height,
            fwhm_f1_hz: p.fwhm_hz,
            fwhm_f2_hz: across,
        },
        Dimension::F2 => ReportPeak {
            f1_hz: section.at_hz,
            f2_hz: p.position_hz,
            height: p.height,
            fwhm_f1_hz: across,
            fwhm_f2_hz: p.fwhm_hz,
        },
    }
}

pub fn peak_report(
    spec: &RealSpectrum,
    baseline: Option<&RealSpectrum>,
    sel: SectionSpec,
    threshold_rel: f64,
    noise: Option<(f64, u64)>,
) -> Result<PeakReport, CliError> {
    let a = analyze_section(spec, sel, threshold_rel).map_err(runtime)?;
    if a.metrics.peaks.is_empty() {
        return Err(CliError::Runtime(format!(
            "no peaks above threshold {threshold_rel} in the section"
        )));
    }
    let (mut ratio, mut matched) = (None, vec![None; a.metrics.peaks.len()]);
    if let Some(base) = baseline {
        let b = analyze_section(
            base,
            SectionSpec::Along(a.section.along, a.section.at_hz),
            threshold_rel,
        )
        .map_err(runtime)?;
        if let Some(top) = b.metrics.peaks.first() {
            ratio = Some(a.metrics.peaks[0].height / top.height);
        }
        for (m, p) in matched.iter_mut().zip(&a.metrics.peaks) {
            *m = b
                .metrics
                .peaks
                .iter()
                .find(|q| (q.position_hz - p.position_hz).abs() <= p.fwhm_hz.max(q.fwhm_hz))
                .map(|q| p.height / q.height);
        }
    }
    let snr = match noise {
        Some((sigma, seed)) => Some(
            snr_seeded(&a.section.values, sigma, seed)
                .map_err(|e| CliError::Validation(format!("--noise-sigma: {e}")))?,
        ),
        None => None,
    };
    Ok(PeakReport {
        peaks: a
            .metrics
            .peaks
            .iter()
            .map(|p| report_peak(spec, &a.section, p))
            .collect(),
        splitting_f1_hz: if a.section.along == Dimension::F1 {
            a.metrics.splitting_hz
        } else {
            0.0
        },
        ratio_vs_baseline: ratio,
        matched_ratios: matched,
        section: match a.section.along {
            Dimension::F1 => "f1".into(),
            Dimension::F2 => "f2".into(),
        },
        section_at_hz: a.section.at_hz,
        threshold_rel,
        snr,
    })
}

fn runtime(e: ProcError) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    /// Position and height of the tallest F1 peak.
    pub f1_hz: f64,
    pub height: f64,
    pub splitting_hz: f64,
    pub n_peaks: usize,
    /// Share of peak height away from the carbon offset.
    pub multiplet_fraction: f64,
    pub peaks: Vec<Peak1D>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareEntry {
    pub f2_hz: f64,
    pub carbon_hz: f64,
    pub pe: TraceSummary,
    pub hmqc: Option<TraceSummary>,
    /// pe-HMQC over HMQC tallest F1 peak height.
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub system: String,
    pub system_hash: String,
    pub profile: String,
    pub n_pe: usize,
    pub delta_s: f64,
    pub acquisition: AcqParams,
    pub processing_hash_pe: String,
    pub processing_hash_hmqc: String,
    pub identical_processing: bool,
    pub resolution_f1_hz: f64,
    pub resolution_f2_hz: f64,
    pub threshold_rel: f64,
    pub section_threshold: f64,
    /// One entry per pe-HMQC cross peak, tallest first.
    pub entries: Vec<CompareEntry>,
    /// The tallest entry.
    pub summary: Option<CompareEntry>,
}

fn summarize(m: &PeakMetrics, center: f64, tol: f64) -> Option<TraceSummary> {
    let top = m.peaks.first()?;
    Some(TraceSummary {
        f1_hz: top.position_hz,
        height: top.height,
        splitting_hz: m.splitting_hz,
        n_peaks: m.peaks.len(),
        multiplet_fraction: multiplet_fraction(&m.peaks, center, tol),
        peaks: m.peaks.clone(),
    })
}

/// F1 sections of both spectra through every pe-HMQC cross peak.
pub fn compare_spectra(
    system: &SpinSystem,
    pe: &RealSpectrum,
    hmqc: &RealSpectrum,
    threshold_rel: f64,
    section_threshold: f64,
) -> Result<Vec<CompareEntry>, CliError> {
    let carbons: Vec<f64> = system
        .spins_of(Isotope::C13)
        .into_iter()
        .map(|i| system.spins[i].offset_hz)
        .collect();
    let (r1, _) = pe.resolution();
    let tol = 3.0 * r1.abs();
    let mut out = Vec::new();
    if carbons.is_empty() {
        return Ok(out);
    }
    for p in pick_peaks_2d(pe, threshold_rel) {
        let sel = SectionSpec::Along(Dimension::F1, p.f2_hz);
        let a = analyze_section(pe, sel, section_threshold).map_err(runtime)?;
        let b = analyze_section(
            hmqc,
            SectionSpec::Along(Dimension::F1, a.section.at_hz),
            section_threshold,
        )
        .map_err(runtime)?;
        let Some(top) = a.metrics.peaks.first() else {
            continue;
        };
        if out
            .iter()
            .any(|e: &CompareEntry| e.f2_hz == a.section.at_hz)
        {
            continue;
        }
        let carbon_hz = carbons
            .iter()
            .copied()
            .min_by(|x, y| {
                (x - top.position_hz)
                    .abs()
                    .total_cmp(&(y - top.position_hz).abs())
            })
            .expect("carbons non-empty");
        let pe_sum = summarize(&a.metrics, carbon_hz, tol).expect("peak present");
        let hmqc_sum = summarize(&b.metrics, carbon_hz, tol);
        let ratio = hmqc_sum.as_ref().map(|h| pe_sum.height / h.height);
        out.push(CompareEntry {
            f2_hz: a.section.at_hz,
            carbon_hz,
            pe: pe_sum,
            hmqc: hmqc_sum,
            ratio,
        });
    }
    Ok(out)
}
