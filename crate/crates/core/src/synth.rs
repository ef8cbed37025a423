//! Deterministic synthetic data for desk-scale verification: separable
//! multi-channel quasi-periodic signal classes (the full pipeline runs on
//! them unmodified) and raw embedding clusters for the loss machinery.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::dsp::{self, FilterSpec, Sample, WaveletSpec};
use crate::error::{Error, Result};
use crate::ingest::{AnnotationInterval, RawRecord, Split, AUX_LABELS, NUM_CLASSES, SAMPLE_RATE};
use crate::rng::{self, DetRng};
use crate::tensor::Tensor;

const PI: f64 = core::f64::consts::PI;

/// Waveform recipe for one class: a harmonic stack plus one narrow spike
/// per beat on the surface channels, and a phase-shifted spike train on the
/// intracardiac channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassSignalSpec {
    /// Beats per second.
    pub base_rate_hz: f64,
    /// `(harmonic multiple, amplitude)` pairs on the surface channels.
    pub harmonics: Vec<(f64, f64)>,
    /// Surface spike width in seconds.
    pub spike_width_s: f64,
    /// Intracardiac spike phase offset as a fraction of the beat period.
    pub iegm_phase: f64,
    /// Intracardiac spike width in seconds.
    pub iegm_width_s: f64,
    /// Auxiliary rhythm label this class is annotated with.
    pub aux_label: String,
}

/// Full synthetic dataset recipe.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub classes: Vec<ClassSignalSpec>,
    /// Additive white noise scale.
    pub noise_sigma: f64,
    pub fs: u32,
    /// Windows per class per split.
    pub train_counts: Vec<usize>,
    pub val_counts: Vec<usize>,
    pub test_counts: Vec<usize>,
}

impl SynthSpec {
    fn class_recipes() -> Vec<ClassSignalSpec> {
        // one aux label per class, distinct rates; the last class shares
        // the third class's surface waveform (a deliberately hard pair,
        // separable only through the intracardiac phase)
        let recipes = [
            (1.0, vec![(1.0, 0.6), (2.0, 0.3)], 0.05, 0.10, 0.012),
            (1.5, vec![(1.0, 0.5), (3.0, 0.35)], 0.04, 0.30, 0.012),
            (2.0, vec![(1.0, 0.55), (2.0, 0.2), (4.0, 0.2)], 0.03, 0.50, 0.012),
            (2.5, vec![(1.0, 0.45), (3.0, 0.3)], 0.035, 0.70, 0.012),
            (3.0, vec![(1.0, 0.5), (5.0, 0.25)], 0.03, 0.20, 0.012),
            (2.0, vec![(1.0, 0.55), (2.0, 0.2), (4.0, 0.2)], 0.03, 0.90, 0.025),
        ];
        let aux = ["(N", "(AVRT", "(/A", "(AFIB", "(A", "(VT"];
        recipes
            .into_iter()
            .zip(aux)
            .map(|((rate, harmonics, width, phase, iw), label)| ClassSignalSpec {
                base_rate_hz: rate,
                harmonics,
                spike_width_s: width,
                iegm_phase: phase,
                iegm_width_s: iw,
                aux_label: label.into(),
            })
            .collect()
    }

    /// Long-tail profile mirroring the reference class frequencies at 1/50
    /// scale, clamped to at least 2 windows per class; validation and test
    /// follow the 7:1:2 proportions with the same clamp.
    pub fn long_tail(noise_sigma: f64) -> Self {
        let reference = [4987.0f64, 1876.0, 889.0, 37.0, 21.0, 6.0];
        let train: Vec<usize> = reference.iter().map(|f| (libm::round(f / 50.0) as usize).max(2)).collect();
        let val: Vec<usize> = train.iter().map(|&t| (libm::round(t as f64 / 7.0) as usize).max(2)).collect();
        let test: Vec<usize> = train.iter().map(|&t| (libm::round(t as f64 * 2.0 / 7.0) as usize).max(2)).collect();
        Self {
            classes: Self::class_recipes(),
            noise_sigma,
            fs: SAMPLE_RATE,
            train_counts: train,
            val_counts: val,
            test_counts: test,
        }
    }

    /// Small balanced profile.
    pub fn balanced(windows_per_class: usize, noise_sigma: f64) -> Self {
        Self {
            classes: Self::class_recipes(),
            noise_sigma,
            fs: SAMPLE_RATE,
            train_counts: vec![windows_per_class; NUM_CLASSES],
            val_counts: vec![windows_per_class.div_ceil(4); NUM_CLASSES],
            test_counts: vec![windows_per_class.div_ceil(2); NUM_CLASSES],
        }
    }

    /// The deliberately confusable class pair (0-based indices).
    pub fn hard_pair() -> (usize, usize) {
        (5, 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() != NUM_CLASSES
            || self.train_counts.len() != NUM_CLASSES
            || self.val_counts.len() != NUM_CLASSES
            || self.test_counts.len() != NUM_CLASSES
        {
            return Err(Error::InvalidConfig(format!("synthetic spec must cover all {NUM_CLASSES} classes")));
        }
        for spec in &self.classes {
            if spec.base_rate_hz <= 0.0 {
                return Err(Error::InvalidConfig(format!("base rate {} <= 0", spec.base_rate_hz)));
            }
            if !AUX_LABELS.contains(&spec.aux_label.as_str()) {
                return Err(Error::UnknownAuxLabel(spec.aux_label.clone()));
            }
        }
        Ok(())
    }
}

fn gaussian_bump(t: f64, center: f64, width: f64) -> f64 {
    let d = (t - center) / width;
    libm::exp(-0.5 * d * d)
}

/// Raw (pre-pipeline) signal value of one class at time `t` seconds.
fn class_signal(spec: &ClassSignalSpec, channel: usize, t: f64) -> f64 {
    let period = 1.0 / spec.base_rate_hz;
    let phase_in_beat = t - libm::floor(t / period) * period;
    if channel < 12 {
        // surface: shared harmonic template + beat spike, per-channel gain
        let gain = 0.6 + 0.4 * (channel as f64 / 11.0);
        let mut v = 0.0;
        for (mult, amp) in &spec.harmonics {
            v += amp * libm::sin(2.0 * PI * spec.base_rate_hz * mult * t);
        }
        v += gaussian_bump(phase_in_beat, period / 2.0, spec.spike_width_s);
        gain * v
    } else {
        // intracardiac: narrow phase-shifted spike train
        let center = spec.iegm_phase * period;
        let mut v = 1.4 * gaussian_bump(phase_in_beat, center, spec.iegm_width_s);
        // small second deflection so the channel is not a lone impulse
        v -= 0.5 * gaussian_bump(phase_in_beat, center + 3.0 * spec.iegm_width_s, spec.iegm_width_s);
        v * (0.8 + 0.2 * ((channel - 12) as f64 / 5.0))
    }
}

/// One continuous annotated record holding `windows` two-second stretches
/// of a single class.
pub fn synth_record(
    spec: &SynthSpec,
    class_index: usize,
    windows: usize,
    subject: &str,
    seed: u64,
) -> Result<(RawRecord, Vec<AnnotationInterval>)> {
    spec.validate()?;
    let class = spec.classes.get(class_index).ok_or(Error::ClassOutOfRange { got: class_index, classes: NUM_CLASSES })?;
    let window_len = (dsp::WINDOW_SECONDS * spec.fs as f64) as usize;
    let total = windows * window_len;
    if total == 0 {
        return Err(Error::InvalidConfig(alloc::string::String::from("record with zero windows")));
    }
    let mut r = rng::rng_for(seed, (class_index as u64) << 8);
    let mut data = Tensor::zeros(&[18, total]);
    for c in 0..18 {
        for i in 0..total {
            let t = i as f64 / spec.fs as f64;
            let mut v = class_signal(class, c, t);
            if spec.noise_sigma > 0.0 {
                v += spec.noise_sigma * rng::standard_normal(&mut r);
            }
            data.data_mut()[c * total + i] = v;
        }
    }
    let record = RawRecord::new(subject, data)?;
    let annotations = vec![AnnotationInterval { start: 0, end: total, aux_label: class.aux_label.clone() }];
    Ok((record, annotations))
}

/// Everything the synthesizer emits for one split: per-class records with
/// their annotations.
pub struct SynthRecords {
    pub split: Split,
    pub records: Vec<(RawRecord, Vec<AnnotationInterval>)>,
}

/// Generate one record per (split, class) pair. Record seeds are derived
/// from `(seed, split, class)` so the in-memory dataset and any files
/// written from these records agree exactly.
pub fn synth_records(spec: &SynthSpec, seed: u64) -> Result<Vec<SynthRecords>> {
    spec.validate()?;
    let mut out = Vec::new();
    for (split, counts) in [
        (Split::Train, &spec.train_counts),
        (Split::Val, &spec.val_counts),
        (Split::Test, &spec.test_counts),
    ] {
        let mut records = Vec::new();
        for (ci, &count) in counts.iter().enumerate() {
            if count == 0 {
                continue;
            }
            let subject = format!("syn-{}-c{}", split.as_str(), ci + 1);
            let tag = rng::derive(seed, (split as u64) << 16 | ci as u64);
            records.push(synth_record(spec, ci, count, &subject, tag)?);
        }
        out.push(SynthRecords { split, records });
    }
    Ok(out)
}

/// Preprocessed splits ready for training.
pub struct SynthDataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl SynthDataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Run the full pipeline (segment, window, downsample, preprocess) over the
/// synthetic records of every split.
pub fn make_synth_dataset(spec: &SynthSpec, seed: u64) -> Result<SynthDataset> {
    let fspec = FilterSpec::default();
    let wspec = WaveletSpec::default();
    let mut out = SynthDataset { train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for split_records in synth_records(spec, seed)? {
        let bucket = match split_records.split {
            Split::Train => &mut out.train,
            Split::Val => &mut out.val,
            Split::Test => &mut out.test,
        };
        for (record, annotations) in &split_records.records {
            for segment in crate::ingest::extract_labeled_segments(record, annotations)? {
                for window in dsp::slice_windows(&segment, spec.fs) {
                    bucket.push(dsp::preprocess_window(&dsp::downsample2(&window), &fspec, &wspec)?);
                }
            }
        }
    }
    Ok(out)
}

/// Gaussian blob recipe for exercising the loss machinery in isolation.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterSpec {
    pub classes: usize,
    pub dim: usize,
    /// Distance scale between class centers.
    pub separation: f64,
    /// Within-class standard deviation.
    pub sigma: f64,
    pub counts: Vec<usize>,
}

impl ClusterSpec {
    pub fn validate(&self) -> Result<()> {
        if self.separation <= 0.0 {
            return Err(Error::InvalidConfig(format!("separation {} <= 0", self.separation)));
        }
        if self.counts.len() != self.classes || self.classes == 0 || self.dim == 0 {
            return Err(Error::InvalidConfig(alloc::string::String::from("degenerate cluster spec")));
        }
        if self.classes > self.dim {
            return Err(Error::InvalidConfig(format!(
                "{} orthogonal centers need dim >= classes, got {}",
                self.classes, self.dim
            )));
        }
        Ok(())
    }
}

/// Gaussian blobs around axis-aligned (orthogonal, equidistant) centers.
pub fn make_clusters(spec: &ClusterSpec, seed: u64) -> Result<(Tensor, Vec<usize>)> {
    spec.validate()?;
    let n: usize = spec.counts.iter().sum();
    let mut emb = Tensor::zeros(&[n, spec.dim]);
    let mut labels = Vec::with_capacity(n);
    let mut r: DetRng = rng::rng_for(seed, 0xc1u64);
    let mut row = 0usize;
    for (class, &count) in spec.counts.iter().enumerate() {
        for _ in 0..count {
            for k in 0..spec.dim {
                let center = if k == class { spec.separation } else { 0.0 };
                emb.data_mut()[row * spec.dim + k] = center + spec.sigma * rng::standard_normal(&mut r);
            }
            labels.push(class);
            row += 1;
        }
    }
    Ok((emb, labels))
}
