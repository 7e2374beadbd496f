use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{ProcError, RealSpectrum};

/// Writes the phased real part: an `f2_hz,...` axis line, a blank line,
/// then one `f1_hz,values...` row per F1 point.
pub fn write_spectrum_csv(path: &Path, spec: &RealSpectrum) -> Result<(), ProcError> {
    let mut s = String::from("f2_hz");
    for f in &spec.f2_axis {
        let _ = write!(s, ",{f}");
    }
    s.push_str("\n\n");
    for (i, f1) in spec.f1_axis.iter().enumerate() {
        let _ = write!(s, "{f1}");
        for v in spec.data.row(i) {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

fn csv_err(line: usize, message: impl Into<String>) -> ProcError {
    ProcError::Csv {
        line,
        message: message.into(),
    }
}

fn parse_row(line: &str, n: usize) -> Result<Vec<f64>, ProcError> {
    line.split(',')
        .map(|c| {
            c.trim()
                .parse::<f64>()
                .map_err(|_| csv_err(n, format!("bad number '{c}'")))
        })
        .collect()
}

pub fn read_spectrum_csv(path: &Path) -> Result<RealSpectrum, ProcError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| csv_err(1, "empty file"))?;
    let rest = header
        .strip_prefix("f2_hz,")
        .ok_or_else(|| csv_err(1, "expected 'f2_hz,' header"))?;
    let f2_axis = parse_row(rest, 1)?;
    match lines.next() {
        Some((_, l)) if l.trim().is_empty() => {}
        _ => return Err(csv_err(2, "expected blank line")),
    }
    let mut f1_axis = Vec::new();
    let mut values = Vec::new();
    for (idx, l) in lines {
        if l.trim().is_empty() {
            continue;
        }
        let row = parse_row(l, idx + 1)?;
        if row.len() != f2_axis.len() + 1 {
            return Err(csv_err(
                idx + 1,
                format!(
                    "expected {} columns, found {}",
                    f2_axis.len() + 1,
                    row.len()
                ),
            ));
        }
        f1_axis.push(row[0]);
        values.extend_from_slice(&row[1..]);
    }
    if f1_axis.is_empty() || f2_axis.is_empty() {
        return Err(csv_err(3, "no data rows"));
    }
    let data = Array2::from_shape_vec((f1_axis.len(), f2_axis.len()), values)
        .expect("row lengths checked");
    Ok(RealSpectrum {
        f1_axis,
        f2_axis,
        data,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportPeak {
    pub f1_hz: f64,
    pub f2_hz: f64,
    pub height: f64,
    pub fwhm_f1_hz: f64,
    pub fwhm_f2_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakReport {
    pub peaks: Vec<ReportPeak>,
    pub splitting_f1_hz: f64,
    /// Tallest height over the tallest baseline height in the same section.
    pub ratio_vs_baseline: Option<f64>,
    /// Per peak, height over the baseline peak within one linewidth, if any.
    #[serde(default)]
    pub matched_ratios: Vec<Option<f64>>,
    /// Dimension and fixed position of the analysed section.
    pub section: String,
    pub section_at_hz: f64,
    pub threshold_rel: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub snr: Option<super::SnrReport>,
}

impl PeakReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let spec = RealSpectrum {
            f1_axis: vec![-1.5, 0.0, 1.5],
            f2_axis: vec![-2.0, 2.0],
            data: Array2::from_shape_vec((3, 2), vec![0.1, 1e-17, -3.25, 4.0, 1.0 / 3.0, 0.0])
                .unwrap(),
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        write_spectrum_csv(&p, &spec).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("f2_hz,-2,2\n\n-1.5,0.1,"));
        assert_eq!(read_spectrum_csv(&p).unwrap(), spec);
    }

    #[test]
    fn csv_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        fs::write(&p, "f2_hz,1,2\n\n0,1\n").unwrap();
        assert!(matches!(
            read_spectrum_csv(&p),
            Err(ProcError::Csv { line: 3, .. })
        ));
        fs::write(&p, "x,1\n\n").unwrap();
        assert!(matches!(
            read_spectrum_csv(&p),
            Err(ProcError::Csv { line: 1, .. })
        ));
    }
}
