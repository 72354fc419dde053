//! Time–frequency transforms, decibel-matched scaling and mixture construction.
//!
//! The STFT follows the common `center = true` convention: the waveform is
//! reflect-padded by `n_fft / 2` on both sides, so a signal of `len` samples
//! yields `1 + len / hop` frames. The inverse uses weighted overlap-add with
//! squared-window normalisation, which is exact whenever the summed squared
//! window never vanishes inside the reconstructed range.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{Array2, Array3, ArrayView2};
use rustfft::{num_complex::Complex64, Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Result<T> = std::result::Result<T, DspError>;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum DspError {
    #[error("empty input signal")]
    EmptyInput,
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
    #[error("invalid STFT configuration: {0}")]
    InvalidConfig(String),
    #[error("window/hop pair cannot be inverted: squared window sum vanishes at sample {0}")]
    OverlapAddViolation(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("signal RMS {rms:e} is below the floor {floor:e}")]
    SilentSignal { rms: f64, floor: f64 },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    Hann,
    Hamming,
    Rectangular,
}

impl WindowKind {
    /// Periodic window of length `n`.
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        let n_f = n as f64;
        (0..n)
            .map(|i| {
                let c = (2.0 * PI * i as f64 / n_f).cos();
                match self {
                    WindowKind::Hann => 0.5 - 0.5 * c,
                    WindowKind::Hamming => 0.54 - 0.46 * c,
                    WindowKind::Rectangular => 1.0,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StftConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub window: WindowKind,
    pub center: bool,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            n_fft: 400,
            hop: 100,
            window: WindowKind::Hann,
            center: true,
        }
    }
}

impl StftConfig {
    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Number of frames produced for a signal of `len` samples.
    pub fn frames(&self, len: usize) -> usize {
        let padded = if self.center { len + 2 * (self.n_fft / 2) } else { len };
        if padded < self.n_fft {
            0
        } else {
            1 + (padded - self.n_fft) / self.hop
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_fft < 2 {
            return Err(DspError::InvalidConfig(format!("n_fft = {} must be >= 2", self.n_fft)));
        }
        if self.hop == 0 || self.hop > self.n_fft {
            return Err(DspError::InvalidConfig(format!(
                "hop = {} must satisfy 0 < hop <= n_fft = {}",
                self.hop, self.n_fft
            )));
        }
        // Steady-state squared-window sum over one hop period.
        let w = self.window.coefficients(self.n_fft);
        for phase in 0..self.hop {
            let s: f64 = (phase..self.n_fft).step_by(self.hop).map(|i| w[i] * w[i]).sum();
            if s < 1e-10 {
                return Err(DspError::OverlapAddViolation(phase));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixConfig {
    /// Level of the non-target relative to the target, in dB.
    pub delta_db: f64,
    pub rms_floor: f64,
}

impl Default for MixConfig {
    fn default() -> Self {
        Self {
            delta_db: -5.0,
            rms_floor: 1e-6,
        }
    }
}

impl MixConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rms_floor > 0.0) {
            return Err(DspError::InvalidConfig("rms_floor must be > 0".into()));
        }
        if !self.delta_db.is_finite() {
            return Err(DspError::InvalidConfig("delta_db must be finite".into()));
        }
        Ok(())
    }
}

/// Complex spectrogram stored as separate real and imaginary planes (frames × bins).
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub real: Array2<f64>,
    pub imag: Array2<f64>,
}

impl Spectrogram {
    pub fn zeros(frames: usize, bins: usize) -> Self {
        Self {
            real: Array2::zeros((frames, bins)),
            imag: Array2::zeros((frames, bins)),
        }
    }

    pub fn frames(&self) -> usize {
        self.real.nrows()
    }

    pub fn bins(&self) -> usize {
        self.real.ncols()
    }

    pub fn magnitude(&self) -> Array2<f64> {
        let mut m = self.real.clone();
        m.zip_mut_with(&self.imag, |r, &i| *r = r.hypot(i));
        m
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            real: &self.real * k,
            imag: &self.imag * k,
        }
    }
}

/// Reusable FFT plans for one STFT configuration.
pub struct StftPlan {
    cfg: StftConfig,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl StftPlan {
    pub fn new(cfg: &StftConfig) -> Result<Self> {
        cfg.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            cfg: cfg.clone(),
            window: cfg.window.coefficients(cfg.n_fft),
            forward: planner.plan_fft_forward(cfg.n_fft),
            inverse: planner.plan_fft_inverse(cfg.n_fft),
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    fn padded(&self, x: &[f64]) -> Result<Vec<f64>> {
        if !self.cfg.center {
            return Ok(x.to_vec());
        }
        let pad = self.cfg.n_fft / 2;
        if x.len() <= pad {
            return Err(DspError::ShapeMismatch(format!(
                "reflect padding of {pad} needs more than {pad} samples, got {}",
                x.len()
            )));
        }
        let n = x.len();
        let mut out = Vec::with_capacity(n + 2 * pad);
        out.extend((1..=pad).rev().map(|i| x[i]));
        out.extend_from_slice(x);
        out.extend((0..pad).map(|i| x[n - 2 - i]));
        Ok(out)
    }

    pub fn stft(&self, x: &[f64]) -> Result<Spectrogram> {
        if x.is_empty() {
            return Err(DspError::EmptyInput);
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(DspError::NonFinite(i));
        }
        let n_fft = self.cfg.n_fft;
        let padded = self.padded(x)?;
        if padded.len() < n_fft {
            return Err(DspError::ShapeMismatch(format!(
                "signal of {} samples is shorter than n_fft = {n_fft}",
                x.len()
            )));
        }
        let frames = self.cfg.frames(x.len());
        let bins = self.cfg.bins();
        let mut spec = Spectrogram::zeros(frames, bins);
        let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
        for t in 0..frames {
            let start = t * self.cfg.hop;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex64::new(padded[start + i] * self.window[i], 0.0);
            }
            self.forward.process(&mut buf);
            for f in 0..bins {
                spec.real[[t, f]] = buf[f].re;
                spec.imag[[t, f]] = buf[f].im;
            }
        }
        Ok(spec)
    }

    /// Sum of squared windows at each position of the padded signal.
    fn window_power(&self, frames: usize) -> Vec<f64> {
        let n_fft = self.cfg.n_fft;
        let total = n_fft + self.cfg.hop * (frames.saturating_sub(1));
        let mut wsum = vec![0.0; total];
        for t in 0..frames {
            let start = t * self.cfg.hop;
            for i in 0..n_fft {
                wsum[start + i] += self.window[i] * self.window[i];
            }
        }
        wsum
    }

    fn offset(&self) -> usize {
        if self.cfg.center {
            self.cfg.n_fft / 2
        } else {
            0
        }
    }

    fn check_shape(&self, real: &ArrayView2<f64>, imag: &ArrayView2<f64>, length: usize) -> Result<()> {
        if real.dim() != imag.dim() {
            return Err(DspError::ShapeMismatch("real and imaginary planes differ".into()));
        }
        if real.ncols() != self.cfg.bins() {
            return Err(DspError::ShapeMismatch(format!(
                "{} bins, expected {}",
                real.ncols(),
                self.cfg.bins()
            )));
        }
        if real.nrows() != self.cfg.frames(length) {
            return Err(DspError::ShapeMismatch(format!(
                "{} frames cannot produce {length} samples (expected {} frames)",
                real.nrows(),
                self.cfg.frames(length)
            )));
        }
        Ok(())
    }

    /// Inverse STFT of a spectrogram given as separate planes.
    pub fn istft_planes(&self, real: ArrayView2<f64>, imag: ArrayView2<f64>, length: usize) -> Result<Vec<f64>> {
        self.check_shape(&real, &imag, length)?;
        let n_fft = self.cfg.n_fft;
        let frames = real.nrows();
        let bins = real.ncols();
        let wsum = self.window_power(frames);
        let offset = self.offset();
        let mut acc = vec![0.0; wsum.len()];
        let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
        let scale = 1.0 / n_fft as f64;
        for t in 0..frames {
            fill_hermitian(&mut buf, real.row(t).iter().copied(), imag.row(t).iter().copied(), bins);
            self.inverse.process(&mut buf);
            let start = t * self.cfg.hop;
            for i in 0..n_fft {
                acc[start + i] += buf[i].re * scale * self.window[i];
            }
        }
        let mut out = Vec::with_capacity(length);
        for n in 0..length {
            let p = n + offset;
            if wsum[p] < 1e-10 {
                return Err(DspError::OverlapAddViolation(n));
            }
            out.push(acc[p] / wsum[p]);
        }
        Ok(out)
    }

    pub fn istft(&self, spec: &Spectrogram, length: usize) -> Result<Vec<f64>> {
        self.istft_planes(spec.real.view(), spec.imag.view(), length)
    }

    /// Adjoint of [`StftPlan::istft_planes`] viewed as a real-linear map from
    /// (real, imag) to the waveform. Used to back-propagate waveform gradients
    /// into the spectral planes.
    pub fn istft_adjoint(&self, grad: &[f64], frames: usize) -> Result<(Array2<f64>, Array2<f64>)> {
        let length = grad.len();
        if self.cfg.frames(length) != frames {
            return Err(DspError::ShapeMismatch(format!(
                "{frames} frames do not match a waveform of {length} samples"
            )));
        }
        let n_fft = self.cfg.n_fft;
        let bins = self.cfg.bins();
        let wsum = self.window_power(frames);
        let offset = self.offset();
        let mut padded = vec![0.0; wsum.len()];
        for (n, &g) in grad.iter().enumerate() {
            let p = n + offset;
            if wsum[p] < 1e-10 {
                return Err(DspError::OverlapAddViolation(n));
            }
            padded[p] = g / wsum[p];
        }
        let mut real = Array2::zeros((frames, bins));
        let mut imag = Array2::zeros((frames, bins));
        let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
        let scale = 1.0 / n_fft as f64;
        let nyquist = if n_fft.is_multiple_of(2) { Some(n_fft / 2) } else { None };
        for t in 0..frames {
            let start = t * self.cfg.hop;
            for i in 0..n_fft {
                buf[i] = Complex64::new(padded[start + i] * self.window[i], 0.0);
            }
            self.forward.process(&mut buf);
            for f in 0..bins {
                let edge = f == 0 || Some(f) == nyquist;
                let c = if edge { scale } else { 2.0 * scale };
                real[[t, f]] = c * buf[f].re;
                imag[[t, f]] = if edge { 0.0 } else { c * buf[f].im };
            }
        }
        Ok((real, imag))
    }
}

fn fill_hermitian(
    buf: &mut [Complex64],
    real: impl Iterator<Item = f64>,
    imag: impl Iterator<Item = f64>,
    bins: usize,
) {
    let n = buf.len();
    for (f, (r, i)) in real.zip(imag).enumerate() {
        buf[f] = Complex64::new(r, i);
    }
    for f in bins..n {
        buf[f] = buf[n - f].conj();
    }
}

pub fn stft(x: &[f64], cfg: &StftConfig) -> Result<Spectrogram> {
    StftPlan::new(cfg)?.stft(x)
}

pub fn istft(spec: &Spectrogram, cfg: &StftConfig, length: usize) -> Result<Vec<f64>> {
    StftPlan::new(cfg)?.istft(spec, length)
}

pub fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

/// Gain that places `n` exactly `delta_db` relative to `d` in RMS level.
pub fn match_db_scale(d: &[f64], n: &[f64], cfg: &MixConfig) -> Result<f64> {
    let rd = rms(d);
    let rn = rms(n);
    for r in [rd, rn] {
        if !(r >= cfg.rms_floor) {
            return Err(DspError::SilentSignal {
                rms: r,
                floor: cfg.rms_floor,
            });
        }
    }
    Ok(10f64.powf(cfg.delta_db / 20.0) * rd / rn)
}

/// Plain weighted sum `d + s·n`, without clipping or renormalisation.
pub fn mix_waveforms(d: &[f64], n: &[f64], s: f64) -> Result<Vec<f64>> {
    if d.len() != n.len() {
        return Err(DspError::LengthMismatch(d.len(), n.len()));
    }
    if s == 0.0 {
        return Ok(d.to_vec());
    }
    Ok(d.iter().zip(n).map(|(a, b)| a + s * b).collect())
}

#[derive(Debug, Clone)]
pub struct Mixture {
    pub waveform: Vec<f64>,
    pub spec: Spectrogram,
    /// True when any mixture sample falls outside [-1, 1].
    pub exceeds_full_scale: bool,
}

pub fn mix(d: &[f64], n: &[f64], s: f64, plan: &StftPlan) -> Result<Mixture> {
    let waveform = mix_waveforms(d, n, s)?;
    let spec = plan.stft(&waveform)?;
    let exceeds_full_scale = waveform.iter().any(|v| v.abs() > 1.0);
    Ok(Mixture {
        waveform,
        spec,
        exceeds_full_scale,
    })
}

/// Stacks (real, imag, magnitude) into a `3 × frames × bins` tensor.
///
/// With `compression = Some(c)` the magnitude is raised to `c` and the
/// complex planes are rescaled to keep their phase.
pub fn make_input_features(spec: &Spectrogram, compression: Option<f64>) -> Array3<f64> {
    let (frames, bins) = spec.real.dim();
    let mut out = Array3::zeros((3, frames, bins));
    for t in 0..frames {
        for f in 0..bins {
            let r = spec.real[[t, f]];
            let i = spec.imag[[t, f]];
            let m = (r * r + i * i).sqrt();
            let (r, i, m) = match compression {
                Some(c) if m > 0.0 => {
                    let mc = m.powf(c);
                    (r * mc / m, i * mc / m, mc)
                }
                _ => (r, i, m),
            };
            out[[0, t, f]] = r;
            out[[1, t, f]] = i;
            out[[2, t, f]] = m;
        }
    }
    out
}
