//! The signal pipeline: 2-second windowing, 2x downsampling, per-channel
//! z-score -> 60 Hz notch -> Chebyshev low-pass -> wavelet denoising, plus
//! channel-wise augmentation and minority-class upsampling.

pub mod filters;
pub mod wavelet;

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::ingest::{MajorClass, Segment, WindowId, ECG_CHANNELS, IEGM_CHANNELS, NUM_CLASSES};
use crate::rng::{self, DetRng};
use crate::tensor::Tensor;
use filters::SosFilter;

/// Window duration in seconds.
pub const WINDOW_SECONDS: f64 = 2.0;
/// Model input length per channel after 2x downsampling of a 2 s window.
pub const MODEL_INPUT_LEN: usize = 977;

/// One fixed-duration window cut from a segment. `data` is `[18, len]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub data: Tensor,
    pub label: MajorClass,
    pub source: WindowId,
}

/// One model-ready sample: the surface block, the intracardiac block, label,
/// and provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[12, L]`
    pub ecg: Tensor,
    /// `[6, L]`
    pub iegm: Tensor,
    pub label: MajorClass,
    pub source: WindowId,
}

impl Sample {
    pub fn len(&self) -> usize {
        self.ecg.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Notch + low-pass parameters. `fs` is the post-downsampling rate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilterSpec {
    pub notch_freq: f64,
    pub notch_q: f64,
    pub cheby_order: usize,
    pub cheby_cutoff: f64,
    pub cheby_ripple_db: f64,
    pub fs: f64,
}

impl Default for FilterSpec {
    fn default() -> Self {
        Self {
            notch_freq: 60.0,
            notch_q: 30.0,
            cheby_order: 4,
            cheby_cutoff: 45.0,
            cheby_ripple_db: 0.5,
            fs: crate::ingest::SAMPLE_RATE as f64 / 2.0,
        }
    }
}

/// Wavelet denoising parameters (db6, soft universal threshold per level).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WaveletSpec {
    pub levels: usize,
}

impl Default for WaveletSpec {
    fn default() -> Self {
        Self { levels: 5 }
    }
}

/// Channel-wise augmentation intensities. Every transform draws its
/// parameters independently per channel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentationSpec {
    /// Maximum circular temporal shift, seconds.
    pub shift_max_s: f64,
    pub flip_prob: f64,
    /// Time-warp resampling factor range.
    pub warp: (f64, f64),
    /// Baseline drift amplitude range (post-normalization units).
    pub drift_amp: (f64, f64),
    /// Baseline drift frequency range, Hz.
    pub drift_freq: (f64, f64),
    /// Amplitude scaling factor range.
    pub scale: (f64, f64),
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            shift_max_s: 0.2,
            flip_prob: 0.5,
            warp: (0.9, 1.1),
            drift_amp: (0.0, 0.1),
            drift_freq: (0.0, 0.3),
            scale: (0.8, 1.2),
        }
    }
}

impl AugmentationSpec {
    /// A spec whose every transform is the identity.
    pub fn identity() -> Self {
        Self {
            shift_max_s: 0.0,
            flip_prob: 0.0,
            warp: (1.0, 1.0),
            drift_amp: (0.0, 0.0),
            drift_freq: (0.0, 0.0),
            scale: (1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::InvalidConfig(alloc::format!("flip_prob {} outside [0,1]", self.flip_prob)));
        }
        for (name, (lo, hi)) in [
            ("warp", self.warp),
            ("drift_amp", self.drift_amp),
            ("drift_freq", self.drift_freq),
            ("scale", self.scale),
        ] {
            if lo > hi {
                return Err(Error::InvalidConfig(alloc::format!("{name} range ({lo}, {hi}) is empty")));
            }
        }
        if self.shift_max_s < 0.0 {
            return Err(Error::InvalidConfig(alloc::format!("shift_max_s {} < 0", self.shift_max_s)));
        }
        Ok(())
    }
}

/// Cut a segment into consecutive non-overlapping windows of `2 * fs`
/// samples; the trailing remainder is discarded. Windows inherit the
/// segment's label, so they are label-pure by construction.
pub fn slice_windows(segment: &Segment, fs: u32) -> Vec<Window> {
    let window_len = (WINDOW_SECONDS * fs as f64) as usize;
    let count = segment.len() / window_len;
    let channels = segment.data.shape()[0];
    let mut out = Vec::with_capacity(count);
    for w in 0..count {
        let mut data = Tensor::zeros(&[channels, window_len]);
        for c in 0..channels {
            let src = &segment.data.row(c)[w * window_len..(w + 1) * window_len];
            data.row_mut(c).copy_from_slice(src);
        }
        out.push(Window {
            data,
            label: segment.class,
            source: WindowId { subject: segment.subject.clone(), segment: segment.index, window: w },
        });
    }
    out
}

/// Keep every second sample starting at index 0 (odd trailing sample drops).
pub fn downsample2(window: &Window) -> Window {
    let channels = window.data.shape()[0];
    let len = window.data.shape()[1];
    let out_len = len.div_ceil(2);
    let mut data = Tensor::zeros(&[channels, out_len]);
    for c in 0..channels {
        let src = window.data.row(c);
        for (i, slot) in data.row_mut(c).iter_mut().enumerate() {
            *slot = src[2 * i];
        }
    }
    Window { data, label: window.label, source: window.source.clone() }
}

/// Z-score normalization against the population standard deviation.
/// Channels with (numerically) zero variance map to all-zeros.
pub fn zscore(channel: &[f64]) -> Vec<f64> {
    if channel.is_empty() {
        return Vec::new();
    }
    let n = channel.len() as f64;
    let mean = channel.iter().sum::<f64>() / n;
    let var = channel.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = libm::sqrt(var);
    // constant-channel guard: fp noise around a constant must not blow up
    if std <= 1e-12 * (1.0 + libm::fabs(mean)) {
        return alloc::vec![0.0; channel.len()];
    }
    channel.iter().map(|v| (v - mean) / std).collect()
}

/// Zero-phase 60 Hz notch.
pub fn notch60(channel: &[f64], spec: &FilterSpec) -> Result<Vec<f64>> {
    Ok(SosFilter::notch(spec.notch_freq, spec.notch_q, spec.fs)?.filtfilt(channel))
}

/// Zero-phase Chebyshev type I low-pass.
pub fn cheby_lowpass(channel: &[f64], spec: &FilterSpec) -> Result<Vec<f64>> {
    Ok(SosFilter::cheby1_lowpass(spec.cheby_order, spec.cheby_ripple_db, spec.cheby_cutoff, spec.fs)?
        .filtfilt(channel))
}

/// Soft-threshold wavelet denoising (db6).
pub fn wavelet_denoise(channel: &[f64], spec: &WaveletSpec) -> Result<Vec<f64>> {
    wavelet::wavelet_denoise(channel, spec.levels)
}

/// Full per-channel pipeline on a post-downsampling window, in order:
/// z-score -> notch -> Chebyshev low-pass -> wavelet denoise. The output is
/// split into the surface block (channels 0..12) and the intracardiac block
/// (channels 12..18).
pub fn preprocess_window(window: &Window, fspec: &FilterSpec, wspec: &WaveletSpec) -> Result<Sample> {
    let channels = window.data.shape()[0];
    if channels != ECG_CHANNELS + IEGM_CHANNELS {
        return Err(Error::InvalidShape {
            op: "preprocess_window",
            detail: alloc::format!("expected 18 channels, got {channels}"),
        });
    }
    let len = window.data.shape()[1];
    let notch = SosFilter::notch(fspec.notch_freq, fspec.notch_q, fspec.fs)?;
    let cheby = SosFilter::cheby1_lowpass(fspec.cheby_order, fspec.cheby_ripple_db, fspec.cheby_cutoff, fspec.fs)?;
    let mut ecg = Tensor::zeros(&[ECG_CHANNELS, len]);
    let mut iegm = Tensor::zeros(&[IEGM_CHANNELS, len]);
    for c in 0..channels {
        let stage1 = zscore(window.data.row(c));
        let stage2 = notch.filtfilt(&stage1);
        let stage3 = cheby.filtfilt(&stage2);
        let stage4 = wavelet::wavelet_denoise(&stage3, wspec.levels)?;
        if c < ECG_CHANNELS {
            ecg.row_mut(c).copy_from_slice(&stage4);
        } else {
            iegm.row_mut(c - ECG_CHANNELS).copy_from_slice(&stage4);
        }
    }
    Ok(Sample { ecg, iegm, label: window.label, source: window.source.clone() })
}

fn circular_shift(x: &[f64], shift: i64) -> Vec<f64> {
    let n = x.len() as i64;
    if n == 0 || shift.rem_euclid(n) == 0 {
        return x.to_vec();
    }
    let s = shift.rem_euclid(n) as usize;
    let mut out = Vec::with_capacity(x.len());
    out.extend_from_slice(&x[x.len() - s..]);
    out.extend_from_slice(&x[..x.len() - s]);
    out
}

fn linear_resample(x: &[f64], factor: f64) -> Vec<f64> {
    if factor == 1.0 {
        return x.to_vec();
    }
    let n = x.len();
    let last = (n - 1) as f64;
    (0..n)
        .map(|i| {
            // stretch time by `factor`, clamp to the edges (crop/pad)
            let pos = (i as f64 / factor).min(last).max(0.0);
            let lo = pos as usize;
            let hi = (lo + 1).min(n - 1);
            let frac = pos - lo as f64;
            x[lo] * (1.0 - frac) + x[hi] * frac
        })
        .collect()
}

fn augment_channel(x: &mut Vec<f64>, spec: &AugmentationSpec, fs_eff: f64, rng: &mut DetRng) {
    use rand::Rng;
    // temporal shift (circular)
    let shift_s = rng::uniform_in(rng, -spec.shift_max_s, spec.shift_max_s);
    let shift = libm::round(shift_s * fs_eff) as i64;
    if shift != 0 {
        *x = circular_shift(x, shift);
    }
    // polarity flip
    let flip_draw: f64 = rng.gen();
    if flip_draw < spec.flip_prob {
        x.iter_mut().for_each(|v| *v = -*v);
    }
    // time warp
    let factor = rng::uniform_in(rng, spec.warp.0, spec.warp.1);
    if factor != 1.0 {
        *x = linear_resample(x, factor);
    }
    // baseline drift
    let amp = rng::uniform_in(rng, spec.drift_amp.0, spec.drift_amp.1);
    let freq = rng::uniform_in(rng, spec.drift_freq.0, spec.drift_freq.1);
    let phase = rng::uniform_in(rng, 0.0, 2.0 * core::f64::consts::PI);
    if amp != 0.0 {
        for (i, v) in x.iter_mut().enumerate() {
            *v += amp * libm::sin(2.0 * core::f64::consts::PI * freq * i as f64 / fs_eff + phase);
        }
    }
    // amplitude scaling
    let gain = rng::uniform_in(rng, spec.scale.0, spec.scale.1);
    if gain != 1.0 {
        x.iter_mut().for_each(|v| *v *= gain);
    }
}

/// Apply the augmentation chain channel-wise: shift, flip, warp, drift,
/// scale. Length-preserving and deterministic given the generator state.
pub fn augment(sample: &Sample, spec: &AugmentationSpec, rng: &mut DetRng) -> Result<Sample> {
    spec.validate()?;
    let len = sample.len();
    let fs_eff = len as f64 / WINDOW_SECONDS;
    let mut out = sample.clone();
    for c in 0..ECG_CHANNELS {
        let mut ch = out.ecg.row(c).to_vec();
        augment_channel(&mut ch, spec, fs_eff, rng);
        out.ecg.row_mut(c).copy_from_slice(&ch);
    }
    for c in 0..IEGM_CHANNELS {
        let mut ch = out.iegm.row(c).to_vec();
        augment_channel(&mut ch, spec, fs_eff, rng);
        out.iegm.row_mut(c).copy_from_slice(&ch);
    }
    Ok(out)
}

/// Upsample every class to `target` samples by augmenting uniformly
/// resampled originals. Classes at or above `target` are left unchanged;
/// `target == 0` returns the input as-is. Appended copies are grouped by
/// class, after all originals.
pub fn balance_upsample(train: &[Sample], target: usize, spec: &AugmentationSpec, seed: u64) -> Result<Vec<Sample>> {
    if target == 0 {
        return Ok(train.to_vec());
    }
    spec.validate()?;
    let mut per_class: [Vec<usize>; NUM_CLASSES] = Default::default();
    for (i, s) in train.iter().enumerate() {
        per_class[s.label.index()].push(i);
    }
    if let Some(empty) = per_class.iter().position(|v| v.is_empty()) {
        return Err(Error::EmptyClass(empty));
    }
    let mut out = train.to_vec();
    for (class_idx, members) in per_class.iter().enumerate() {
        if members.len() >= target {
            continue;
        }
        let mut pick = rng::rng_for(seed, class_idx as u64);
        for copy_idx in 0..target - members.len() {
            use rand::Rng;
            let source = members[pick.gen_range(0..members.len())];
            let mut sample_rng = rng::rng_for(seed, ((class_idx as u64) << 32) ^ (copy_idx as u64 + 1));
            out.push(augment(&train[source], spec, &mut sample_rng)?);
        }
    }
    Ok(out)
}
