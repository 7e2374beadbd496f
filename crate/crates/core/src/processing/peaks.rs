use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ProcError, RealSpectrum};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peak1D {
    pub position_hz: f64,
    pub height: f64,
    pub fwhm_hz: f64,
    pub bin: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakMetrics {
    /// Sorted by height, tallest first.
    pub peaks: Vec<Peak1D>,
    /// Distance between the two tallest peaks, 0 with fewer than two.
    pub splitting_hz: f64,
}

/// Vertex offset (in bins) and height of the parabola through three points.
fn parabola(l: f64, c: f64, r: f64) -> (f64, f64) {
    let den = l - 2.0 * c + r;
    if den == 0.0 {
        return (0.0, c);
    }
    let d = (0.5 * (l - r) / den).clamp(-0.5, 0.5);
    (d, c - 0.25 * (l - r) * d)
}

fn bin_width(axis: &[f64]) -> f64 {
    if axis.len() > 1 {
        axis[1] - axis[0]
    } else {
        0.0
    }
}

/// Sub-bin position and height of the maximum at `i`.
fn refine(values: &[f64], axis: &[f64], i: usize) -> (f64, f64) {
    if i == 0 || i + 1 >= values.len() {
        return (axis[i], values[i]);
    }
    let (d, h) = parabola(values[i - 1], values[i], values[i + 1]);
    (axis[i] + d * bin_width(axis), h)
}

/// Full width at half `height` around bin `i`, by linear interpolation.
fn fwhm(values: &[f64], axis: &[f64], i: usize, height: f64) -> f64 {
    let half = height / 2.0;
    let w = bin_width(axis);
    let mut left = i as f64;
    let mut j = i;
    while j > 0 {
        if values[j - 1] < half {
            left = (j - 1) as f64 + (half - values[j - 1]) / (values[j] - values[j - 1]);
            break;
        }
        j -= 1;
        left = j as f64;
    }
    let mut right = i as f64;
    let mut j = i;
    while j + 1 < values.len() {
        if values[j + 1] < half {
            right = j as f64 + (values[j] - half) / (values[j] - values[j + 1]);
            break;
        }
        j += 1;
        right = j as f64;
    }
    (right - left) * w
}

/// Local maxima of a phased trace above `threshold_rel` times its maximum.
pub fn peak_metrics(
    values: &[f64],
    axis: &[f64],
    threshold_rel: f64,
) -> Result<PeakMetrics, ProcError> {
    if values.is_empty() || values.len() != axis.len() {
        return Err(ProcError::EmptyTrace);
    }
    let top = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut peaks = Vec::new();
    if top > 0.0 {
        let n = values.len();
        for i in 0..n {
            let v = values[i];
            let left_ok = i == 0 || v > values[i - 1];
            let right_ok = i + 1 == n || v >= values[i + 1];
            if left_ok && right_ok && v > threshold_rel * top {
                let (pos, h) = refine(values, axis, i);
                peaks.push(Peak1D {
                    position_hz: pos,
                    height: h,
                    fwhm_hz: fwhm(values, axis, i, h),
                    bin: i,
                });
            }
        }
    }
    peaks.sort_by(|a, b| b.height.total_cmp(&a.height).then(a.bin.cmp(&b.bin)));
    let splitting_hz = if peaks.len() >= 2 {
        (peaks[0].position_hz - peaks[1].position_hz).abs()
    } else {
        0.0
    };
    Ok(PeakMetrics {
        peaks,
        splitting_hz,
    })
}

/// Share of total peak height found more than `tol_hz` away from `center_hz`.
pub fn multiplet_fraction(peaks: &[Peak1D], center_hz: f64, tol_hz: f64) -> f64 {
    let total: f64 = peaks.iter().map(|p| p.height).sum();
    if total <= 0.0 {
        return 0.0;
    }
    let off: f64 = peaks
        .iter()
        .filter(|p| (p.position_hz - center_hz).abs() > tol_hz)
        .map(|p| p.height)
        .sum();
    off / total
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peak2D {
    pub f1_hz: f64,
    pub f2_hz: f64,
    pub height: f64,
    pub fwhm_f1_hz: f64,
    pub fwhm_f2_hz: f64,
    pub bin: (usize, usize),
}

/// Local maxima over the 8-neighbourhood above `threshold_rel` times the
/// spectrum maximum, tallest first.
pub fn pick_peaks_2d(spec: &RealSpectrum, threshold_rel: f64) -> Vec<Peak2D> {
    let d = &spec.data;
    let (n1, n2) = d.dim();
    let top = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = Vec::new();
    if !(top > 0.0) {
        return out;
    }
    for i in 0..n1 {
        for k in 0..n2 {
            let v = d[(i, k)];
            if v <= threshold_rel * top {
                continue;
            }
            let mut is_max = true;
            'nb: for di in -1i64..=1 {
                for dk in -1i64..=1 {
                    if di == 0 && dk == 0 {
                        continue;
                    }
                    let (a, b) = (i as i64 + di, k as i64 + dk);
                    if a < 0 || b < 0 || a >= n1 as i64 || b >= n2 as i64 {
                        continue;
                    }
                    let w = d[(a as usize, b as usize)];
                    // earlier neighbours must be strictly lower, later ones not higher
                    let earlier = (di, dk) < (0, 0);
                    if (earlier && w >= v) || (!earlier && w > v) {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if !is_max {
                continue;
            }
            let col: Vec<f64> = d.column(k).to_vec();
            let row: Vec<f64> = d.row(i).to_vec();
            let (f1, h1) = refine(&col, &spec.f1_axis, i);
            let (f2, h2) = refine(&row, &spec.f2_axis, k);
            let h = h1.max(h2);
            out.push(Peak2D {
                f1_hz: f1,
                f2_hz: f2,
                height: h,
                fwhm_f1_hz: fwhm(&col, &spec.f1_axis, i, h1),
                fwhm_f2_hz: fwhm(&row, &spec.f2_axis, k, h2),
                bin: (i, k),
            });
        }
    }
    out.sort_by(|a, b| b.height.total_cmp(&a.height).then(a.bin.cmp(&b.bin)));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnrReport {
    /// Noise-free peak height divided by sigma.
    pub snr: f64,
    /// Height at the same bin after adding the seeded noise, over sigma.
    pub snr_measured: f64,
    pub height: f64,
    pub sigma: f64,
    pub seed: u64,
}

/// S/N against white Gaussian noise from `ChaCha8Rng::seed_from_u64(seed)`,
/// one `Normal(0, sigma)` draw per point in trace order.
pub fn snr_seeded(values: &[f64], sigma: f64, seed: u64) -> Result<SnrReport, ProcError> {
    if values.is_empty() {
        return Err(ProcError::EmptyTrace);
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(ProcError::Sigma(sigma));
    }
    let (imax, height) =
        values
            .iter()
            .copied()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |b, (i, v)| if v > b.1 { (i, v) } else { b },
            );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("sigma checked positive");
    let noisy: Vec<f64> = values.iter().map(|v| v + normal.sample(&mut rng)).collect();
    Ok(SnrReport {
        snr: height / sigma,
        snr_measured: noisy[imax] / sigma,
        height,
        sigma,
        seed,
    })
}

/// Peak height over the RMS of `values[region]`.
pub fn snr_region(values: &[f64], region: std::ops::Range<usize>) -> Result<f64, ProcError> {
    if values.is_empty() || region.is_empty() || region.end > values.len() {
        return Err(ProcError::EmptyTrace);
    }
    let noise = &values[region];
    let rms = (noise.iter().map(|v| v * v).sum::<f64>() / noise.len() as f64).sqrt();
    if rms == 0.0 {
        return Err(ProcError::ZeroVariance);
    }
    let height = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(height / rms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn lorentz(axis: &[f64], center: f64, hw: f64, h: f64) -> Vec<f64> {
        axis.iter()
            .map(|f| h / (1.0 + ((f - center) / hw).powi(2)))
            .collect()
    }

    fn axis(n: usize, step: f64) -> Vec<f64> {
        (0..n).map(|i| (i as f64 - n as f64 / 2.0) * step).collect()
    }

    #[test]
    fn doublet_splitting_within_one_bin() {
        let ax = axis(512, 1.5869140625);
        let a = lorentz(&ax, 100.0 - 6.95, 1.5, 1.0);
        let b = lorentz(&ax, 100.0 + 6.95, 1.5, 1.0);
        let v: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let m = peak_metrics(&v, &ax, 0.1).unwrap();
        assert_eq!(m.peaks.len(), 2);
        assert!((m.splitting_hz - 13.9).abs() < 1.5869140625);
    }

    #[test]
    fn single_peak_no_splitting_and_fwhm() {
        let ax = axis(2048, 0.05);
        let v = lorentz(&ax, 3.21, 2.0, 5.0);
        let m = peak_metrics(&v, &ax, 0.1).unwrap();
        assert_eq!(m.peaks.len(), 1);
        assert_eq!(m.splitting_hz, 0.0);
        assert!((m.peaks[0].position_hz - 3.21).abs() < 0.01);
        assert!((m.peaks[0].fwhm_hz - 4.0).abs() < 0.01);
        assert!((m.peaks[0].height - 5.0).abs() < 1e-3);
        assert!(matches!(
            peak_metrics(&[], &[], 0.1),
            Err(ProcError::EmptyTrace)
        ));
    }

    #[test]
    fn parabola_exact_on_quadratic() {
        let ax: Vec<f64> = (0..5).map(|i| i as f64).collect();
        let v: Vec<f64> = ax.iter().map(|x| 4.0 - (x - 2.3) * (x - 2.3)).collect();
        let m = peak_metrics(&v, &ax, 0.0).unwrap();
        assert!((m.peaks[0].position_hz - 2.3).abs() < 1e-12);
        assert!((m.peaks[0].height - 4.0).abs() < 1e-12);
    }

    #[test]
    fn fraction_of_side_peaks() {
        let p = |pos, height| Peak1D {
            position_hz: pos,
            height,
            fwhm_hz: 1.0,
            bin: 0,
        };
        let peaks = [p(0.0, 2.0), p(-5.0, 1.0), p(5.0, 1.0)];
        assert!((multiplet_fraction(&peaks, 0.0, 1.0) - 0.5).abs() < 1e-15);
        assert_eq!(multiplet_fraction(&[], 0.0, 1.0), 0.0);
    }

    #[test]
    fn snr_noiseless_and_deterministic() {
        let ax = axis(256, 1.0);
        let v = lorentz(&ax, 0.0, 2.0, 3.0);
        let r = snr_seeded(&v, 0.01 * 3.0, 7).unwrap();
        assert!((r.snr - 100.0).abs() < 1e-12);
        assert_eq!(r, snr_seeded(&v, 0.03, 7).unwrap());
        assert_ne!(
            r.snr_measured,
            snr_seeded(&v, 0.03, 8).unwrap().snr_measured
        );
        assert!(matches!(snr_seeded(&v, 0.0, 1), Err(ProcError::Sigma(_))));
    }

    #[test]
    fn snr_ratio_equals_height_ratio() {
        let ax = axis(256, 1.0);
        let a = lorentz(&ax, 0.0, 2.0, 2.0);
        let b = lorentz(&ax, 0.0, 2.0, 1.0);
        let ra = snr_seeded(&a, 0.05, 3).unwrap();
        let rb = snr_seeded(&b, 0.05, 3).unwrap();
        assert!((ra.snr / rb.snr - 2.0).abs() < 1e-12);
    }

    #[test]
    fn region_snr() {
        let v = [0.1, -0.1, 0.1, -0.1, 5.0];
        assert!((snr_region(&v, 0..4).unwrap() - 50.0).abs() < 1e-12);
        assert!(matches!(
            snr_region(&[0.0, 0.0, 1.0], 0..2),
            Err(ProcError::ZeroVariance)
        ));
    }

    #[test]
    fn two_dimensional_maxima() {
        let f1 = axis(64, 1.0);
        let f2 = axis(64, 2.0);
        let data = Array2::from_shape_fn((64, 64), |(i, k)| {
            let a = 1.0
                / (1.0 + ((f1[i] - 5.0) / 1.5).powi(2))
                / (1.0 + ((f2[k] + 10.0) / 3.0).powi(2));
            let b = 0.5
                / (1.0 + ((f1[i] + 8.0) / 1.5).powi(2))
                / (1.0 + ((f2[k] - 20.0) / 3.0).powi(2));
            a + b
        });
        let spec = RealSpectrum {
            f1_axis: f1,
            f2_axis: f2,
            data,
        };
        let peaks = pick_peaks_2d(&spec, 0.2);
        assert_eq!(peaks.len(), 2);
        assert!((peaks[0].f1_hz - 5.0).abs() < 0.1 && (peaks[0].f2_hz + 10.0).abs() < 0.2);
        assert!((peaks[1].f1_hz + 8.0).abs() < 0.1 && (peaks[1].f2_hz - 20.0).abs() < 0.2);
        assert!((peaks[0].fwhm_f1_hz - 3.0).abs() < 0.2);
    }
}
