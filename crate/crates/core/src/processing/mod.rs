//! Hypercomplex 2D processing: apodization, zero filling, Fourier
//! transforms in both dimensions, phase correction and cross-sections.
//!
//! A [`Spectrum2D`] stores the four hypercomplex quadrants `rr`, `ri`, `ir`
//! and `ii`; the first letter is the F1 component and the second the F2
//! component, so `rr` is the phased absorptive spectrum.

mod export;
mod peaks;

pub use export::{read_spectrum_csv, write_spectrum_csv, PeakReport, ReportPeak};
pub use peaks::{
    multiplet_fraction, peak_metrics, pick_peaks_2d, snr_region, snr_seeded, Peak1D, Peak2D,
    PeakMetrics, SnrReport,
};

use std::f64::consts::PI;

use ndarray::{Array2, Axis};
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::acquisition::RawData2D;

#[derive(Debug, Error)]
pub enum ProcError {
    #[error("plane shapes differ: cos {cos:?} vs sin {sin:?}")]
    Shape {
        cos: (usize, usize),
        sin: (usize, usize),
    },
    #[error("zero fill to {n_total} points is smaller than the data length {len}")]
    ZeroFill { n_total: usize, len: usize },
    #[error("no peak found above the threshold")]
    NoPeak,
    #[error("position {at_hz} Hz outside the axis range [{lo}, {hi}] Hz")]
    OutOfRange { at_hz: f64, lo: f64, hi: f64 },
    #[error("empty trace")]
    EmptyTrace,
    #[error("noise region has zero variance")]
    ZeroVariance,
    #[error("noise sigma must be positive, got {0}")]
    Sigma(f64),
    #[error("spectrum CSV line {line}: {message}")]
    Csv { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dimension {
    F1,
    F2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Window {
    None,
    /// `w(k) = sin²(π(k + shift·N)/N)`.
    SineSquare {
        shift: f64,
    },
}

impl Window {
    pub fn weights(&self, n: usize) -> Vec<f64> {
        match *self {
            Window::None => vec![1.0; n],
            Window::SineSquare { shift } => (0..n)
                .map(|k| {
                    (PI * (k as f64 + shift * n as f64) / n as f64)
                        .sin()
                        .powi(2)
                })
                .collect(),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Window::None => "none".into(),
            Window::SineSquare { shift } => format!("sine2:{shift}"),
        }
    }
}

fn axis_of(dim: Dimension) -> Axis {
    match dim {
        Dimension::F1 => Axis(0),
        Dimension::F2 => Axis(1),
    }
}

/// Multiplies every trace along `dim` by the window.
pub fn apodize(data: &mut Array2<Complex64>, dim: Dimension, window: &Window) {
    let ax = axis_of(dim);
    let w = window.weights(data.len_of(ax));
    for mut lane in data.lanes_mut(ax) {
        for (v, w) in lane.iter_mut().zip(&w) {
            *v *= w;
        }
    }
}

/// Appends zeros along `dim` up to `n_total` points.
pub fn zero_fill(
    data: &Array2<Complex64>,
    dim: Dimension,
    n_total: usize,
) -> Result<Array2<Complex64>, ProcError> {
    let ax = axis_of(dim);
    let len = data.len_of(ax);
    if n_total < len {
        return Err(ProcError::ZeroFill { n_total, len });
    }
    let shape = match dim {
        Dimension::F1 => (n_total, data.ncols()),
        Dimension::F2 => (data.nrows(), n_total),
    };
    let mut out = Array2::zeros(shape);
    out.slice_mut(ndarray::s![..data.nrows(), ..data.ncols()])
        .assign(data);
    Ok(out)
}

/// Unnormalized forward DFT, `X_k = Σ x_n e^{-2πikn/N}`.
pub fn fft_forward(x: &mut [Complex64]) {
    FftPlanner::new().plan_fft_forward(x.len()).process(x);
}

/// Inverse of [`fft_forward`], including the `1/N` factor.
pub fn fft_inverse(x: &mut [Complex64]) {
    FftPlanner::new().plan_fft_inverse(x.len()).process(x);
    let n = x.len() as f64;
    for v in x.iter_mut() {
        *v /= n;
    }
}

/// Reorders an FFT output so index `j` holds frequency `(j - N/2)·sw/N`.
pub fn fftshift(x: &[Complex64]) -> Vec<Complex64> {
    let n = x.len();
    let h = n / 2;
    (0..n).map(|j| x[(j + n - h) % n]).collect()
}

/// Centred frequency axis in Hz.
pub fn centered_axis(n: usize, sw: f64) -> Vec<f64> {
    let h = (n / 2) as f64;
    (0..n).map(|j| (j as f64 - h) * sw / n as f64).collect()
}

fn fft_lanes(data: &mut Array2<Complex64>, dim: Dimension) {
    let ax = axis_of(dim);
    let n = data.len_of(ax);
    let plan = FftPlanner::new().plan_fft_forward(n);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for mut lane in data.lanes_mut(ax) {
        for (b, v) in buf.iter_mut().zip(lane.iter()) {
            *b = *v;
        }
        plan.process(&mut buf);
        for (v, b) in lane.iter_mut().zip(fftshift(&buf)) {
            *v = b;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PhaseMode {
    Auto,
    /// Zero-order phases in degrees for F2 and F1.
    Manual {
        p0_f2: f64,
        p0_f1: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProcessingParams {
    /// Total F1 points after zero filling; `None` keeps the acquired count.
    pub zf1: Option<usize>,
    pub zf2: Option<usize>,
    pub window_f1: Window,
    pub window_f2: Window,
    pub phase: PhaseMode,
    /// Remove the linear F1 phase caused by a non-zero first t1.
    pub first_order_f1: bool,
}

impl Default for ProcessingParams {
    fn default() -> Self {
        ProcessingParams {
            zf1: None,
            zf2: None,
            window_f1: Window::SineSquare { shift: 0.0 },
            window_f2: Window::SineSquare { shift: 0.0 },
            phase: PhaseMode::Auto,
            first_order_f1: true,
        }
    }
}

impl ProcessingParams {
    /// SHA-256 of the canonical JSON form; equal hashes mean identical
    /// processing.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("params serialize");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessingLog {
    pub params_hash: String,
    pub window_f1: String,
    pub window_f2: String,
    /// First window weight in each dimension.
    pub window_start: [f64; 2],
    pub points_f1: usize,
    pub points_f2: usize,
    pub resolution_f1_hz: f64,
    pub resolution_f2_hz: f64,
    pub quad_mode: String,
    pub p0_f2_deg: f64,
    pub p0_f1_deg: f64,
    /// Linear F1 phase across the full width, degrees.
    pub p1_f1_deg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum2D {
    pub rr: Array2<f64>,
    pub ri: Array2<f64>,
    pub ir: Array2<f64>,
    pub ii: Array2<f64>,
    pub f1_axis: Vec<f64>,
    pub f2_axis: Vec<f64>,
    pub log: ProcessingLog,
}

/// Sign applied to the sine plane when forming the complex t1 signal. The
/// +90° shift of the carbon pulse produces the mirror-image modulation, so
/// it enters with a minus sign to place peaks at +Ω_S.
const SIN_PLANE_SIGN: f64 = -1.0;

/// Window, zero fill and Fourier transform both dimensions, with the linear
/// F1 correction but without zero-order phasing.
pub fn transform_2d(raw: &RawData2D, p: &ProcessingParams) -> Result<Spectrum2D, ProcError> {
    if raw.cos_plane.dim() != raw.sin_plane.dim() {
        return Err(ProcError::Shape {
            cos: raw.cos_plane.dim(),
            sin: raw.sin_plane.dim(),
        });
    }
    let (n1, n2) = raw.cos_plane.dim();
    let zf1 = p.zf1.unwrap_or(n1);
    let zf2 = p.zf2.unwrap_or(n2);

    let f2_pass = |plane: &Array2<Complex64>| -> Result<Array2<Complex64>, ProcError> {
        let mut d = plane.clone();
        apodize(&mut d, Dimension::F2, &p.window_f2);
        let mut d = zero_fill(&d, Dimension::F2, zf2)?;
        fft_lanes(&mut d, Dimension::F2);
        Ok(d)
    };
    let c = f2_pass(&raw.cos_plane)?;
    let s = f2_pass(&raw.sin_plane)?;

    // F1 complex signals for the real and imaginary F2 parts
    let mut zr = Array2::zeros((n1, zf2));
    let mut zi = Array2::zeros((n1, zf2));
    for ((i, k), cv) in c.indexed_iter() {
        let sv = s[(i, k)];
        zr[(i, k)] = Complex64::new(cv.re, SIN_PLANE_SIGN * sv.re);
        zi[(i, k)] = Complex64::new(cv.im, SIN_PLANE_SIGN * sv.im);
    }
    let f1_pass = |d: Array2<Complex64>| -> Result<Array2<Complex64>, ProcError> {
        let mut d = d;
        apodize(&mut d, Dimension::F1, &p.window_f1);
        let mut d = zero_fill(&d, Dimension::F1, zf1)?;
        fft_lanes(&mut d, Dimension::F1);
        Ok(d)
    };
    let mut zr = f1_pass(zr)?;
    let mut zi = f1_pass(zi)?;

    let f1_axis = centered_axis(zf1, raw.params.sw1_hz);
    let f2_axis = centered_axis(zf2, raw.params.sw2_hz);
    let t0 = raw.params.t1_initial_s;
    let p1 = if p.first_order_f1 {
        360.0 * t0 * raw.params.sw1_hz
    } else {
        0.0
    };
    if p.first_order_f1 && t0 != 0.0 {
        for (j, f) in f1_axis.iter().enumerate() {
            let rot = Complex64::from_polar(1.0, -2.0 * PI * f * t0);
            for k in 0..zf2 {
                zr[(j, k)] *= rot;
                zi[(j, k)] *= rot;
            }
        }
    }
    let rr = zr.mapv(|z| z.re);
    let ir = zr.mapv(|z| z.im);
    let ri = zi.mapv(|z| z.re);
    let ii = zi.mapv(|z| z.im);
    let log = ProcessingLog {
        params_hash: p.hash(),
        window_f1: p.window_f1.label(),
        window_f2: p.window_f2.label(),
        window_start: [p.window_f1.weights(n1)[0], p.window_f2.weights(n2)[0]],
        points_f1: zf1,
        points_f2: zf2,
        resolution_f1_hz: raw.params.sw1_hz / zf1 as f64,
        resolution_f2_hz: raw.params.sw2_hz / zf2 as f64,
        quad_mode: raw.provenance.quad_mode.clone(),
        p0_f2_deg: 0.0,
        p0_f1_deg: 0.0,
        p1_f1_deg: p1,
    };
    Ok(Spectrum2D {
        rr,
        ri,
        ir,
        ii,
        f1_axis,
        f2_axis,
        log,
    })
}

fn rotate_pair(a: &mut Array2<f64>, b: &mut Array2<f64>, deg: f64) {
    let (s, c) = deg.to_radians().sin_cos();
    ndarray::Zip::from(a).and(b).for_each(|x, y| {
        let (re, im) = (*x * c - *y * s, *x * s + *y * c);
        *x = re;
        *y = im;
    });
}

impl Spectrum2D {
    /// Zero-order phase rotation by `deg` along one dimension.
    pub fn phase(&mut self, dim: Dimension, deg: f64) {
        match dim {
            Dimension::F2 => {
                rotate_pair(&mut self.rr, &mut self.ri, deg);
                rotate_pair(&mut self.ir, &mut self.ii, deg);
                self.log.p0_f2_deg += deg;
            }
            Dimension::F1 => {
                rotate_pair(&mut self.rr, &mut self.ir, deg);
                rotate_pair(&mut self.ri, &mut self.ii, deg);
                self.log.p0_f1_deg += deg;
            }
        }
    }

    /// Hypercomplex magnitude of every point.
    pub fn magnitude(&self) -> Array2<f64> {
        let mut m = self.rr.mapv(|v| v * v);
        m += &self.ri.mapv(|v| v * v);
        m += &self.ir.mapv(|v| v * v);
        m += &self.ii.mapv(|v| v * v);
        m.mapv_into(f64::sqrt)
    }

    /// Index of the largest hypercomplex magnitude.
    pub fn tallest(&self) -> Option<(usize, usize)> {
        let m = self.magnitude();
        let mut best = None;
        let mut top = 0.0;
        for ((i, k), v) in m.indexed_iter() {
            if *v > top {
                top = *v;
                best = Some((i, k));
            }
        }
        best
    }

    pub fn real(&self) -> RealSpectrum {
        RealSpectrum {
            f1_axis: self.f1_axis.clone(),
            f2_axis: self.f2_axis.clone(),
            data: self.rr.clone(),
        }
    }
}

/// Chooses the zero-order phase (degrees) maximizing `Σ Re(e^{iθ} z)³` over
/// the bins whose magnitude exceeds 5 % of the maximum.
pub fn autophase_1d(trace: &[Complex64]) -> Result<f64, ProcError> {
    let top = trace.iter().map(|z| z.norm()).fold(0.0, f64::max);
    if !(top > 0.0) {
        return Err(ProcError::NoPeak);
    }
    let region: Vec<Complex64> = trace
        .iter()
        .copied()
        .filter(|z| z.norm() > 0.05 * top)
        .collect();
    let score = |deg: f64| -> f64 {
        let r = Complex64::from_polar(1.0, deg.to_radians());
        region.iter().map(|z| (r * z).re.powi(3)).sum()
    };
    let mut best = (f64::NEG_INFINITY, 0.0);
    for d in -180..180 {
        let sc = score(d as f64);
        if sc > best.0 {
            best = (sc, d as f64);
        }
    }
    let mut center = best.1;
    for step in [0.01, 0.0001] {
        let span = (if step == 0.01 { 1.0 } else { 0.01 } / step) as i64;
        let mut local = (f64::NEG_INFINITY, center);
        for i in -span..=span {
            let d = center + i as f64 * step;
            let sc = score(d);
            if sc > local.0 {
                local = (sc, d);
            }
        }
        center = local.1;
    }
    Ok(center)
}

/// Automatic zero-order phasing of one dimension; returns the applied phase.
pub fn autophase(spec: &mut Spectrum2D, dim: Dimension) -> Result<f64, ProcError> {
    let (i, k) = spec.tallest().ok_or(ProcError::NoPeak)?;
    let trace: Vec<Complex64> = match dim {
        Dimension::F2 => {
            // F2 trace through the peak row from whichever F1 component is larger
            let a: Vec<Complex64> = (0..spec.f2_axis.len())
                .map(|c| Complex64::new(spec.rr[(i, c)], spec.ri[(i, c)]))
                .collect();
            let b: Vec<Complex64> = (0..spec.f2_axis.len())
                .map(|c| Complex64::new(spec.ir[(i, c)], spec.ii[(i, c)]))
                .collect();
            let e = |v: &[Complex64]| v.iter().map(|z| z.norm_sqr()).sum::<f64>();
            if e(&a) >= e(&b) {
                a
            } else {
                b
            }
        }
        Dimension::F1 => (0..spec.f1_axis.len())
            .map(|r| Complex64::new(spec.rr[(r, k)], spec.ir[(r, k)]))
            .collect(),
    };
    let deg = autophase_1d(&trace)?;
    spec.phase(dim, deg);
    Ok(deg)
}

/// Full chain: transform, then manual or automatic zero-order phasing
/// (F2 first, then F1).
pub fn process(raw: &RawData2D, p: &ProcessingParams) -> Result<Spectrum2D, ProcError> {
    let mut spec = transform_2d(raw, p)?;
    match p.phase {
        PhaseMode::Manual { p0_f2, p0_f1 } => {
            spec.phase(Dimension::F2, p0_f2);
            spec.phase(Dimension::F1, p0_f1);
        }
        // an empty spectrum has nothing to phase against
        PhaseMode::Auto if spec.tallest().is_none() => {}
        PhaseMode::Auto => {
            autophase(&mut spec, Dimension::F2)?;
            autophase(&mut spec, Dimension::F1)?;
        }
    }
    Ok(spec)
}

/// Phased real part with its axes.
#[derive(Debug, Clone, PartialEq)]
pub struct RealSpectrum {
    pub f1_axis: Vec<f64>,
    pub f2_axis: Vec<f64>,
    /// `f1 × f2`.
    pub data: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    /// Dimension the trace runs along.
    pub along: Dimension,
    pub axis: Vec<f64>,
    pub values: Vec<f64>,
    /// Exact frequency of the fixed bin in the other dimension.
    pub at_hz: f64,
    pub at_bin: usize,
}

fn nearest_bin(axis: &[f64], hz: f64) -> Result<usize, ProcError> {
    let (lo, hi) = (axis[0], axis[axis.len() - 1]);
    let half = if axis.len() > 1 {
        (axis[1] - axis[0]) / 2.0
    } else {
        0.0
    };
    if !(hz >= lo - half && hz <= hi + half) {
        return Err(ProcError::OutOfRange { at_hz: hz, lo, hi });
    }
    let mut best = 0;
    for (i, f) in axis.iter().enumerate() {
        if (f - hz).abs() < (axis[best] - hz).abs() {
            best = i;
        }
    }
    Ok(best)
}

impl RealSpectrum {
    /// Trace along `along` through the bin nearest `at_hz` in the other
    /// dimension.
    pub fn cross_section(&self, along: Dimension, at_hz: f64) -> Result<Section, ProcError> {
        match along {
            Dimension::F1 => {
                let k = nearest_bin(&self.f2_axis, at_hz)?;
                Ok(Section {
                    along,
                    axis: self.f1_axis.clone(),
                    values: self.data.column(k).to_vec(),
                    at_hz: self.f2_axis[k],
                    at_bin: k,
                })
            }
            Dimension::F2 => {
                let i = nearest_bin(&self.f1_axis, at_hz)?;
                Ok(Section {
                    along,
                    axis: self.f2_axis.clone(),
                    values: self.data.row(i).to_vec(),
                    at_hz: self.f1_axis[i],
                    at_bin: i,
                })
            }
        }
    }

    /// Position `(f1, f2)` of the largest value.
    pub fn max_position(&self) -> Option<(usize, usize)> {
        let mut best = None;
        let mut top = f64::NEG_INFINITY;
        for ((i, k), v) in self.data.indexed_iter() {
            if *v > top {
                top = *v;
                best = Some((i, k));
            }
        }
        best
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn resolution(&self) -> (f64, f64) {
        let r = |a: &[f64]| if a.len() > 1 { a[1] - a[0] } else { 0.0 };
        (r(&self.f1_axis), r(&self.f2_axis))
    }
}
