//! ECG preprocessing and the augmentation pair used during adaptation.

use std::f64::consts::PI;

use log::warn;

use crate::error::{contract, Result};
use crate::model::LEADS;
use crate::numeric::{Matrix, SeededRng};

pub const TARGET_RATE: f64 = 400.0;
pub const TARGET_LEN: usize = 6144;
pub const BAND_LO: f64 = 1.0;
pub const BAND_HI: f64 = 47.0;
pub const CUTMIX_ALPHA: f64 = 1.0;

/// A recording as read from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct RawRecording {
    pub id: String,
    pub channels: Matrix,
    pub sample_rate: f64,
}

impl RawRecording {
    pub fn new(id: impl Into<String>, channels: Matrix, sample_rate: f64) -> Result<Self> {
        if channels.rows() != LEADS {
            return Err(contract(format!("expected {LEADS} channels, got {}", channels.rows())));
        }
        if !(sample_rate > 0.0 && sample_rate.is_finite()) {
            return Err(contract(format!("sample rate must be positive, got {sample_rate}")));
        }
        Ok(Self {
            id: id.into(),
            channels,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.channels.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.cols() == 0
    }
}

/// A fixed-length, normalized recording with an optional (possibly soft)
/// multi-label target.
#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    pub id: String,
    pub signal: Matrix,
    pub label: Option<Vec<f64>>,
}

impl Recording {
    pub fn len(&self) -> usize {
        self.signal.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.signal.cols() == 0
    }
}

/// Linear interpolation of every channel to `round(len·target/rate)` samples.
pub fn resample(rec: &RawRecording, target_rate: f64) -> Result<RawRecording> {
    if !(target_rate > 0.0 && target_rate.is_finite()) {
        return Err(contract(format!("target rate must be positive, got {target_rate}")));
    }
    let n = rec.len();
    if n == 0 {
        return Err(contract(format!("recording {} has empty channels", rec.id)));
    }
    if target_rate == rec.sample_rate {
        return Ok(rec.clone());
    }
    let ratio = rec.sample_rate / target_rate;
    let m = ((n as f64 * target_rate / rec.sample_rate).round() as usize).max(1);
    let channels = Matrix::from_fn(rec.channels.rows(), m, |c, j| {
        let row = rec.channels.row(c);
        let pos = j as f64 * ratio;
        let i = pos.floor() as usize;
        if i + 1 >= n {
            return row[n - 1];
        }
        let frac = pos - i as f64;
        row[i] + frac * (row[i + 1] - row[i])
    });
    Ok(RawRecording {
        id: rec.id.clone(),
        channels,
        sample_rate: target_rate,
    })
}

/// Normalized second-order section `[b0, b1, b2, a1, a2]` (a0 = 1).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BandEdge {
    LowPass,
    HighPass,
}

impl Biquad {
    /// Bilinear-transform section with pre-warped corner `f0` and quality `q`.
    pub fn design(kind: BandEdge, f0: f64, fs: f64, q: f64) -> Self {
        let w0 = 2.0 * PI * f0 / fs;
        let (s, c) = w0.sin_cos();
        let alpha = s / (2.0 * q);
        let a0 = 1.0 + alpha;
        let b = match kind {
            BandEdge::LowPass => [(1.0 - c) / 2.0, 1.0 - c, (1.0 - c) / 2.0],
            BandEdge::HighPass => [(1.0 + c) / 2.0, -(1.0 + c), (1.0 + c) / 2.0],
        };
        Self {
            b: [b[0] / a0, b[1] / a0, b[2] / a0],
            a: [-2.0 * c / a0, (1.0 - alpha) / a0],
        }
    }

    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }

    /// Transposed direct form II, state initialized to the steady state of
    /// a constant input equal to the first sample.
    fn run(&self, x: &mut [f64]) {
        let Some(&x0) = x.first() else { return };
        let g = self.dc_gain();
        let mut z2 = (self.b[2] - self.a[1] * g) * x0;
        let mut z1 = (self.b[1] - self.a[0] * g) * x0 + z2;
        for v in x.iter_mut() {
            let xin = *v;
            let y = self.b[0] * xin + z1;
            z1 = self.b[1] * xin - self.a[0] * y + z2;
            z2 = self.b[2] * xin - self.a[1] * y;
            *v = y;
        }
    }
}

/// Sections of the 4th-order Butterworth high-pass at `lo` followed by the
/// 4th-order Butterworth low-pass at `hi`.
pub fn bandpass_sections(lo: f64, hi: f64, fs: f64) -> Result<Vec<Biquad>> {
    if !(lo > 0.0 && lo < hi && hi < fs / 2.0) {
        return Err(contract(format!("band edges must satisfy 0 < {lo} < {hi} < {}", fs / 2.0)));
    }
    let qs = [1.0 / (2.0 * (PI / 8.0).cos()), 1.0 / (2.0 * (3.0 * PI / 8.0).cos())];
    let mut out = Vec::with_capacity(4);
    for q in qs {
        out.push(Biquad::design(BandEdge::HighPass, lo, fs, q));
    }
    for q in qs {
        out.push(Biquad::design(BandEdge::LowPass, hi, fs, q));
    }
    Ok(out)
}

fn cascade(sections: &[Biquad], x: &mut [f64]) {
    for s in sections {
        s.run(x);
    }
}

/// Zero-phase filtering: odd-reflection padding, forward pass, reversed pass.
pub fn filtfilt(sections: &[Biquad], x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let pad = pad.min(n - 1);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    for i in (1..=pad).rev() {
        ext.push(2.0 * x[0] - x[i]);
    }
    ext.extend_from_slice(x);
    for i in 1..=pad {
        ext.push(2.0 * x[n - 1] - x[n - 1 - i]);
    }
    cascade(sections, &mut ext);
    ext.reverse();
    cascade(sections, &mut ext);
    ext.reverse();
    ext[pad..pad + n].to_vec()
}

/// Zero-phase Butterworth band-pass between `lo` and `hi` Hz.
pub fn bandpass(rec: &RawRecording, lo: f64, hi: f64) -> Result<RawRecording> {
    let sections = bandpass_sections(lo, hi, rec.sample_rate)?;
    let pad = (3.0 * rec.sample_rate / lo).ceil() as usize;
    let mut channels = rec.channels.clone();
    for c in 0..channels.rows() {
        let y = filtfilt(&sections, rec.channels.row(c), pad);
        channels.row_mut(c).copy_from_slice(&y);
    }
    Ok(RawRecording {
        id: rec.id.clone(),
        channels,
        sample_rate: rec.sample_rate,
    })
}

/// Result of [`pad_and_normalize`]: the recording and the channels whose
/// variance was zero (emitted as zeros).
#[derive(Clone, Debug, PartialEq)]
pub struct Normalized {
    pub recording: Recording,
    pub flat_channels: Vec<usize>,
}

/// Center-crops to `l` if longer, z-scores each channel over its real span,
/// then zero-pads the tail to `l`.
pub fn pad_and_normalize(rec: &RawRecording, l: usize) -> Result<Normalized> {
    if l == 0 {
        return Err(contract("target length must be positive"));
    }
    let n = rec.len();
    let (start, span) = if n > l { ((n - l) / 2, l) } else { (0, n) };
    let mut signal = Matrix::zeros(rec.channels.rows(), l);
    let mut flat = Vec::new();
    for c in 0..rec.channels.rows() {
        let src = &rec.channels.row(c)[start..start + span];
        let m = src.iter().sum::<f64>() / span.max(1) as f64;
        let var = src.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / span.max(1) as f64;
        let sd = var.sqrt();
        if span == 0 || !(sd > 1e-12 * (1.0 + m.abs())) {
            flat.push(c);
            continue;
        }
        for (d, v) in signal.row_mut(c)[..span].iter_mut().zip(src) {
            *d = (v - m) / sd;
        }
    }
    if !flat.is_empty() {
        warn!("recording {}: zero-variance channels {:?} emitted as zeros", rec.id, flat);
    }
    Ok(Normalized {
        recording: Recording {
            id: rec.id.clone(),
            signal,
            label: None,
        },
        flat_channels: flat,
    })
}

/// Full preprocessing chain: resample, band-pass, crop/pad, normalize.
pub fn preprocess(rec: &RawRecording, target_rate: f64, l: usize) -> Result<Normalized> {
    let r = resample(rec, target_rate)?;
    let r = bandpass(&r, BAND_LO, BAND_HI.min(0.49 * target_rate))?;
    pad_and_normalize(&r, l)
}

/// CutMix with a given mixing weight and window start.
pub fn cutmix_at(a: &Recording, b: &Recording, lambda: f64, start: usize) -> Result<Recording> {
    let (la, lb) = match (&a.label, &b.label) {
        (Some(la), Some(lb)) => (la, lb),
        _ => return Err(contract("cutmix needs labeled recordings")),
    };
    if a.signal.shape() != b.signal.shape() || la.len() != lb.len() {
        return Err(contract("cutmix parents differ in shape"));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(contract(format!("cutmix weight must lie in [0, 1], got {lambda}")));
    }
    let l = a.len();
    let w = cutmix_window(lambda, l);
    if start + w > l {
        return Err(contract("cutmix window exceeds the recording"));
    }
    let mut signal = a.signal.clone();
    for c in 0..signal.rows() {
        signal.row_mut(c)[start..start + w].copy_from_slice(&b.signal.row(c)[start..start + w]);
    }
    let label = la.iter().zip(lb).map(|(x, y)| lambda * x + (1.0 - lambda) * y).collect();
    Ok(Recording {
        id: a.id.clone(),
        signal,
        label: Some(label),
    })
}

/// Window length `round((1-λ)·L)`.
pub fn cutmix_window(lambda: f64, l: usize) -> usize {
    (((1.0 - lambda) * l as f64).round() as usize).min(l)
}

/// CutMix with `λ ~ Beta(alpha, alpha)` and a uniformly placed window.
pub fn cutmix(a: &Recording, b: &Recording, alpha: f64, rng: &mut SeededRng) -> Result<Recording> {
    if !(alpha > 0.0) {
        return Err(contract(format!("cutmix alpha must be > 0, got {alpha}")));
    }
    let lambda = rng.draw_beta(alpha, alpha)?;
    let w = cutmix_window(lambda, a.len());
    let start = rng.below(a.len() - w + 1);
    cutmix_at(a, b, lambda, start)
}

/// One weak transformation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WeakTransform {
    Scale(f64),
    Noise { snr_db: f64 },
    Shift(isize),
    Wander { freq_hz: f64, phase: f64, rel_amplitude: f64 },
}

pub const NOISE_SNR_DB: f64 = 30.0;
pub const MAX_SHIFT_FRAC: f64 = 0.05;
pub const WANDER_REL_AMPLITUDE: f64 = 0.05;

/// Draws one transformation uniformly from the weak menu.
pub fn draw_weak_transform(l: usize, rng: &mut SeededRng) -> Result<WeakTransform> {
    Ok(match rng.below(4) {
        0 => WeakTransform::Scale(rng.draw_uniform(0.8, 1.2)?),
        1 => WeakTransform::Noise { snr_db: NOISE_SNR_DB },
        2 => {
            let max = (MAX_SHIFT_FRAC * l as f64).floor() as usize;
            WeakTransform::Shift(rng.below(2 * max + 1) as isize - max as isize)
        }
        _ => WeakTransform::Wander {
            freq_hz: rng.draw_uniform(0.05, 0.3)?,
            phase: rng.draw_uniform(0.0, 2.0 * PI)?,
            rel_amplitude: WANDER_REL_AMPLITUDE,
        },
    })
}

fn channel_power_std(x: &[f64]) -> (f64, f64) {
    let n = x.len().max(1) as f64;
    let power = x.iter().map(|v| v * v).sum::<f64>() / n;
    let m = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    (power, var.sqrt())
}

/// Applies one weak transformation; the noise branch draws from `rng`.
pub fn apply_weak(
    u: &Recording,
    t: WeakTransform,
    sample_rate: f64,
    rng: &mut SeededRng,
) -> Result<Recording> {
    let l = u.len();
    let mut signal = u.signal.clone();
    match t {
        WeakTransform::Scale(f) => {
            signal = signal.scale(f);
        }
        WeakTransform::Noise { snr_db } => {
            for c in 0..signal.rows() {
                let (power, _) = channel_power_std(u.signal.row(c));
                let sd = (power / 10f64.powf(snr_db / 10.0)).sqrt();
                for v in signal.row_mut(c) {
                    *v += sd * rng.standard_normal();
                }
            }
        }
        WeakTransform::Shift(s) => {
            if l > 0 {
                let k = s.rem_euclid(l as isize) as usize;
                for c in 0..signal.rows() {
                    signal.row_mut(c).rotate_right(k);
                }
            }
        }
        WeakTransform::Wander {
            freq_hz,
            phase,
            rel_amplitude,
        } => {
            if !(sample_rate > 0.0) {
                return Err(contract("baseline wander needs a positive sample rate"));
            }
            for c in 0..signal.rows() {
                let (_, sd) = channel_power_std(u.signal.row(c));
                let amp = rel_amplitude * sd;
                for (i, v) in signal.row_mut(c).iter_mut().enumerate() {
                    *v += amp * (2.0 * PI * freq_hz * i as f64 / sample_rate + phase).sin();
                }
            }
        }
    }
    Ok(Recording {
        id: u.id.clone(),
        signal,
        label: u.label.clone(),
    })
}

/// Weak augmentation: one transformation drawn uniformly and applied.
pub fn weak_augment(u: &Recording, sample_rate: f64, rng: &mut SeededRng) -> Result<Recording> {
    let t = draw_weak_transform(u.len(), rng)?;
    apply_weak(u, t, sample_rate, rng)
}
