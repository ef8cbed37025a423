//! Record-level domain types: leads, rhythm labels, annotated segments,
//! window manifests, and stratified splitting.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Sampling rate of the source recordings, in Hz.
pub const SAMPLE_RATE: u32 = 977;

/// The 18 retained leads, in order: 12 surface ECG then 6 intracardiac.
pub const CHANNEL_NAMES: [&str; 18] = [
    "I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6",
    "RVA12", "CS12", "CS34", "CS56", "CS78", "CS90",
];

/// Number of surface ECG channels (the leading block of [`CHANNEL_NAMES`]).
pub const ECG_CHANNELS: usize = 12;
/// Number of intracardiac channels (the trailing block).
pub const IEGM_CHANNELS: usize = 6;

/// One subject's continuous 18-channel recording.
#[derive(Clone, Debug, PartialEq)]
pub struct RawRecord {
    pub subject: String,
    pub fs: u32,
    pub channel_names: Vec<String>,
    /// `[18, T]` millivolt samples, channel-major.
    pub data: Tensor,
}

impl RawRecord {
    pub fn new(subject: impl Into<String>, data: Tensor) -> Result<Self> {
        let rec = Self {
            subject: subject.into(),
            fs: SAMPLE_RATE,
            channel_names: CHANNEL_NAMES.iter().map(|s| s.to_string()).collect(),
            data,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn samples(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_names.len() != CHANNEL_NAMES.len()
            || self.channel_names.iter().zip(CHANNEL_NAMES).any(|(a, b)| a != b)
        {
            return Err(Error::ChannelListMismatch { got: self.channel_names.clone() });
        }
        if self.fs != SAMPLE_RATE {
            return Err(Error::InvalidRecord(format!("fs {} != {}", self.fs, SAMPLE_RATE)));
        }
        if self.data.ndim() != 2 || self.data.shape()[0] != CHANNEL_NAMES.len() || self.data.shape()[1] == 0 {
            return Err(Error::InvalidRecord(format!("data shape {:?}", self.data.shape())));
        }
        Ok(())
    }
}

/// Expert rhythm annotation over `[start, end)` in sample indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnnotationInterval {
    pub start: usize,
    pub end: usize,
    pub aux_label: String,
}

/// The six grouped diagnostic categories, ordered head to tail.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MajorClass {
    SinusRhythm,
    SupraventricularTachycardia,
    PacedBeats,
    AtrialTachycardia,
    EctopicRhythm,
    Tachycardias,
}

/// Number of major classes.
pub const NUM_CLASSES: usize = 6;

impl MajorClass {
    pub const ALL: [MajorClass; NUM_CLASSES] = [
        MajorClass::SinusRhythm,
        MajorClass::SupraventricularTachycardia,
        MajorClass::PacedBeats,
        MajorClass::AtrialTachycardia,
        MajorClass::EctopicRhythm,
        MajorClass::Tachycardias,
    ];

    /// 1-based class id.
    pub fn id(self) -> usize {
        self.index() + 1
    }

    /// 0-based class index.
    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).expect("member of ALL")
    }

    pub fn from_index(index: usize) -> Result<Self> {
        Self::ALL.get(index).copied().ok_or(Error::ClassOutOfRange { got: index, classes: NUM_CLASSES })
    }

    pub fn name(self) -> &'static str {
        match self {
            MajorClass::SinusRhythm => "Sinus rhythm",
            MajorClass::SupraventricularTachycardia => "Supraventricular Tachycardia",
            MajorClass::PacedBeats => "Paced beats",
            MajorClass::AtrialTachycardia => "Atrial Tachycardia",
            MajorClass::EctopicRhythm => "Ectopic rhythm",
            MajorClass::Tachycardias => "Tachycardias",
        }
    }

    /// Group an auxiliary rhythm label into its major category. Unknown
    /// labels are a hard error: silently defaulting would poison the class
    /// statistics downstream.
    pub fn from_aux(aux_label: &str) -> Result<Self> {
        Ok(match aux_label {
            "(N" => MajorClass::SinusRhythm,
            "(AVRT" | "(AVNRT" => MajorClass::SupraventricularTachycardia,
            "(/A" | "(/V" => MajorClass::PacedBeats,
            "(AFIB" | "(EAT" | "(AFL" => MajorClass::AtrialTachycardia,
            "(A" | "(B" | "(J" => MajorClass::EctopicRhythm,
            "(VT" | "(IVR" => MajorClass::Tachycardias,
            _ => return Err(Error::UnknownAuxLabel(aux_label.to_string())),
        })
    }
}

/// All auxiliary labels the grouping covers.
pub const AUX_LABELS: [&str; 13] = [
    "(N", "(AVRT", "(AVNRT", "(/A", "(/V", "(AFIB", "(EAT", "(AFL", "(A", "(B", "(J", "(VT", "(IVR",
];

/// One annotated, label-pure stretch of signal carved from a record.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub subject: String,
    /// Position among the record's segments, ordered by start sample.
    pub index: usize,
    /// Start sample within the source record.
    pub start: usize,
    pub aux_label: String,
    pub class: MajorClass,
    /// `[18, len]` signal block.
    pub data: Tensor,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Keep only annotated stretches; everything between annotations is dropped.
/// Intervals must be in range and non-overlapping.
pub fn extract_labeled_segments(record: &RawRecord, annotations: &[AnnotationInterval]) -> Result<Vec<Segment>> {
    record.validate()?;
    let t = record.samples();
    let mut sorted: Vec<&AnnotationInterval> = annotations.iter().collect();
    sorted.sort_by_key(|a| (a.start, a.end));
    let mut prev_end = 0usize;
    for (i, ann) in sorted.iter().enumerate() {
        if ann.start >= ann.end || ann.end > t {
            return Err(Error::BadInterval { start: ann.start, end: ann.end, len: t });
        }
        if i > 0 && ann.start < prev_end {
            return Err(Error::OverlappingIntervals { at: ann.start });
        }
        prev_end = ann.end;
    }
    let channels = record.data.shape()[0];
    let mut segments = Vec::with_capacity(sorted.len());
    for (index, ann) in sorted.iter().enumerate() {
        let class = MajorClass::from_aux(&ann.aux_label)?;
        let len = ann.end - ann.start;
        let mut data = Tensor::zeros(&[channels, len]);
        for c in 0..channels {
            let src = &record.data.row(c)[ann.start..ann.end];
            data.row_mut(c).copy_from_slice(src);
        }
        segments.push(Segment {
            subject: record.subject.clone(),
            index,
            start: ann.start,
            aux_label: ann.aux_label.clone(),
            class,
            data,
        });
    }
    Ok(segments)
}

/// Identity of one 2-second window: subject, segment position, window position.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct WindowId {
    pub subject: String,
    pub segment: usize,
    pub window: usize,
}

impl core::fmt::Display for WindowId {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "{}/{}/{}", self.subject, self.segment, self.window)
    }
}

/// One manifest row: a segment and how many windows it yields.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub subject: String,
    pub segment: usize,
    pub class: MajorClass,
    pub aux_label: String,
    pub window_count: usize,
}

/// Window-level inventory of a dataset, in deterministic segment order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn total_windows(&self) -> usize {
        self.entries.iter().map(|e| e.window_count).sum()
    }

    /// Window counts per major class.
    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0usize; NUM_CLASSES];
        for e in &self.entries {
            counts[e.class.index()] += e.window_count;
        }
        counts
    }

    /// Every window id, in manifest order.
    pub fn window_ids(&self) -> Vec<WindowId> {
        let mut ids = Vec::with_capacity(self.total_windows());
        for e in &self.entries {
            for w in 0..e.window_count {
                ids.push(WindowId { subject: e.subject.clone(), segment: e.segment, window: w });
            }
        }
        ids
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidConfig(format!("unknown split {other:?}"))),
        }
    }
}

/// Assignment of every window to exactly one split, in manifest order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitAssignment {
    pub assignments: Vec<(WindowId, Split)>,
}

impl SplitAssignment {
    pub fn split_of(&self, id: &WindowId) -> Option<Split> {
        self.assignments.iter().find(|(w, _)| w == id).map(|(_, s)| *s)
    }

    pub fn counts(&self) -> (usize, usize, usize) {
        let mut c = (0, 0, 0);
        for (_, s) in &self.assignments {
            match s {
                Split::Train => c.0 += 1,
                Split::Val => c.1 += 1,
                Split::Test => c.2 += 1,
            }
        }
        c
    }
}

/// Stratified split per auxiliary label: floor allocation against the target
/// ratios with the remainder going to test, then val. Labels with fewer than
/// three windows always put one window in train. Deterministic in `seed`.
pub fn stratified_split(
    manifest: &DatasetManifest,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<SplitAssignment> {
    if manifest.entries.is_empty() || manifest.total_windows() == 0 {
        return Err(Error::EmptyManifest);
    }
    let (tr, va, te) = ratios;
    if tr < 0.0 || va < 0.0 || te < 0.0 || libm::fabs(tr + va + te - 1.0) > 1e-9 {
        return Err(Error::InvalidConfig(format!("split ratios {ratios:?} must be nonnegative and sum to 1")));
    }

    // group windows by aux label, in first-appearance order
    let mut labels: Vec<&str> = Vec::new();
    for e in &manifest.entries {
        if !labels.contains(&e.aux_label.as_str()) {
            labels.push(&e.aux_label);
        }
    }
    let mut groups: Vec<Vec<WindowId>> = labels.iter().map(|_| Vec::new()).collect();
    for e in &manifest.entries {
        let g = labels.iter().position(|l| *l == e.aux_label).expect("label registered");
        for w in 0..e.window_count {
            groups[g].push(WindowId { subject: e.subject.clone(), segment: e.segment, window: w });
        }
    }

    let mut assignments: Vec<(WindowId, Split)> = Vec::with_capacity(manifest.total_windows());
    for (g, ids) in groups.iter().enumerate() {
        let mut ids = ids.clone();
        let mut r = rng::rng_for(seed, g as u64);
        ids.shuffle(&mut r);
        let n = ids.len();
        let (n_train, n_val) = if n < 3 {
            // too small to honor the ratios: anchor at least one window in train
            (1, 0)
        } else {
            let mut n_train = (tr * n as f64) as usize;
            let mut n_val = (va * n as f64) as usize;
            let mut n_test = (te * n as f64) as usize;
            let mut rem = n - n_train - n_val - n_test;
            while rem > 0 {
                n_test += 1;
                rem -= 1;
                if rem > 0 {
                    n_val += 1;
                    rem -= 1;
                }
                if rem > 0 {
                    n_train += 1;
                    rem -= 1;
                }
            }
            let _ = n_test;
            (n_train, n_val)
        };
        for (i, id) in ids.into_iter().enumerate() {
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            assignments.push((id, split));
        }
    }
    Ok(SplitAssignment { assignments })
}
