//! `.ds` preprocessed dataset files: a text header (sample count, block
//! shapes, labels, sources, and the pre-augmentation per-class counts)
//! terminated by newline + NUL, then per-sample float32 LE payload
//! (surface block then intracardiac block).

use std::fs;
use std::path::Path;

use rhythmlab_core::dsp::Sample;
use rhythmlab_core::ingest::{MajorClass, WindowId, NUM_CLASSES};
use rhythmlab_core::Tensor;

use crate::{CliError, Result};

const MAGIC: &str = "sigd 1";

/// One split's samples plus the class counts measured before any
/// augmentation (the contrastive class weights must come from these).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub raw_class_counts: [usize; NUM_CLASSES],
}

impl Dataset {
    /// Wrap freshly preprocessed samples; the raw counts are the current
    /// counts.
    pub fn new(samples: Vec<Sample>) -> Self {
        let mut counts = [0usize; NUM_CLASSES];
        for s in &samples {
            counts[s.label.index()] += 1;
        }
        Self { samples, raw_class_counts: counts }
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0usize; NUM_CLASSES];
        for s in &self.samples {
            counts[s.label.index()] += 1;
        }
        counts
    }
}

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let (ce, cm, len) = match ds.samples.first() {
        Some(s) => (s.ecg.shape()[0], s.iegm.shape()[0], s.len()),
        None => (12, 6, 0),
    };
    let mut header = String::new();
    header.push_str(MAGIC);
    header.push('\n');
    header.push_str(&format!("count {}\n", ds.samples.len()));
    header.push_str(&format!("ecg_channels {ce}\n"));
    header.push_str(&format!("iegm_channels {cm}\n"));
    header.push_str(&format!("len {len}\n"));
    let labels: Vec<String> = ds.samples.iter().map(|s| s.label.id().to_string()).collect();
    header.push_str(&format!("labels {}\n", labels.join(",")));
    let raw: Vec<String> = ds.raw_class_counts.iter().map(|c| c.to_string()).collect();
    header.push_str(&format!("raw_counts {}\n", raw.join(",")));
    for s in &ds.samples {
        header.push_str(&format!("source {} {} {}\n", s.source.subject, s.source.segment, s.source.window));
    }
    let mut bytes = header.into_bytes();
    bytes.push(0);
    for s in &ds.samples {
        if s.ecg.shape() != [ce, len] || s.iegm.shape() != [cm, len] {
            return Err(CliError::Core(rhythmlab_core::Error::ShapeMismatch {
                expected: vec![ce, len],
                got: s.ecg.shape().to_vec(),
            }));
        }
        for v in s.ecg.data().iter().chain(s.iegm.data()) {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(bytes)
}

pub fn decode_dataset(bytes: &[u8], origin: &Path) -> Result<Dataset> {
    let bad = |detail: String| CliError::Format { what: "dataset file", path: origin.to_path_buf(), detail };
    let nul = bytes.iter().position(|&b| b == 0).ok_or_else(|| bad("missing header terminator".into()))?;
    let header = std::str::from_utf8(&bytes[..nul]).map_err(|e| bad(format!("non-UTF-8 header: {e}")))?;
    let mut count = None;
    let mut ce = None;
    let mut cm = None;
    let mut len = None;
    let mut labels: Option<Vec<usize>> = None;
    let mut raw_counts: Option<Vec<usize>> = None;
    let mut sources: Vec<WindowId> = Vec::new();
    for (i, line) in header.lines().enumerate() {
        if i == 0 {
            if line != MAGIC {
                return Err(bad(format!("bad magic {line:?}")));
            }
            continue;
        }
        let (key, value) = line.split_once(' ').ok_or_else(|| bad(format!("malformed line {line:?}")))?;
        match key {
            "count" => count = Some(value.parse::<usize>().map_err(|e| bad(format!("count: {e}")))?),
            "ecg_channels" => ce = Some(value.parse::<usize>().map_err(|e| bad(format!("ecg_channels: {e}")))?),
            "iegm_channels" => cm = Some(value.parse::<usize>().map_err(|e| bad(format!("iegm_channels: {e}")))?),
            "len" => len = Some(value.parse::<usize>().map_err(|e| bad(format!("len: {e}")))?),
            "labels" => {
                let parsed: std::result::Result<Vec<usize>, _> =
                    value.split(',').filter(|s| !s.is_empty()).map(|s| s.parse::<usize>()).collect();
                labels = Some(parsed.map_err(|e| bad(format!("labels: {e}")))?);
            }
            "raw_counts" => {
                let parsed: std::result::Result<Vec<usize>, _> = value.split(',').map(|s| s.parse::<usize>()).collect();
                raw_counts = Some(parsed.map_err(|e| bad(format!("raw_counts: {e}")))?);
            }
            "source" => {
                let mut parts = value.splitn(3, ' ');
                let subject = parts.next().unwrap_or_default().to_string();
                let segment = parts
                    .next()
                    .and_then(|v| v.parse::<usize>().ok())
                    .ok_or_else(|| bad(format!("source segment in {line:?}")))?;
                let window = parts
                    .next()
                    .and_then(|v| v.parse::<usize>().ok())
                    .ok_or_else(|| bad(format!("source window in {line:?}")))?;
                sources.push(WindowId { subject, segment, window });
            }
            other => return Err(bad(format!("unknown header key {other:?}"))),
        }
    }
    let count = count.ok_or_else(|| bad("missing count".into()))?;
    let ce = ce.ok_or_else(|| bad("missing ecg_channels".into()))?;
    let cm = cm.ok_or_else(|| bad("missing iegm_channels".into()))?;
    let len = len.ok_or_else(|| bad("missing len".into()))?;
    let labels = labels.unwrap_or_default();
    let raw_counts = raw_counts.ok_or_else(|| bad("missing raw_counts".into()))?;
    if labels.len() != count || sources.len() != count {
        return Err(bad(format!("{count} samples but {} labels / {} sources", labels.len(), sources.len())));
    }
    if raw_counts.len() != NUM_CLASSES {
        return Err(bad(format!("raw_counts must list {NUM_CLASSES} classes")));
    }

    let payload = &bytes[nul + 1..];
    let per_sample = (ce + cm) * len;
    let expect = count * per_sample * 4;
    if payload.len() != expect {
        return Err(bad(format!("truncated payload: {} bytes, expected {expect}", payload.len())));
    }
    let mut samples = Vec::with_capacity(count);
    for (i, (label, source)) in labels.iter().zip(sources).enumerate() {
        if *label == 0 || *label > NUM_CLASSES {
            return Err(bad(format!("label {label} out of range 1..{NUM_CLASSES}")));
        }
        let offset = i * per_sample * 4;
        let mut values = Vec::with_capacity(per_sample);
        for chunk in payload[offset..offset + per_sample * 4].chunks_exact(4) {
            values.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64);
        }
        let ecg = Tensor::new(&[ce, len], values[..ce * len].to_vec())?;
        let iegm = Tensor::new(&[cm, len], values[ce * len..].to_vec())?;
        samples.push(Sample { ecg, iegm, label: MajorClass::from_index(label - 1)?, source });
    }
    let mut counts = [0usize; NUM_CLASSES];
    counts.copy_from_slice(&raw_counts);
    Ok(Dataset { samples, raw_class_counts: counts })
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    fs::write(path, encode_dataset(ds)?).map_err(CliError::io(path))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(CliError::io(path))?;
    decode_dataset(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(label: MajorClass, tag: usize) -> Sample {
        let len = 8;
        let mut ecg = Tensor::zeros(&[12, len]);
        let mut iegm = Tensor::zeros(&[6, len]);
        for (i, v) in ecg.data_mut().iter_mut().enumerate() {
            *v = (i + tag) as f64 * 0.25;
        }
        for (i, v) in iegm.data_mut().iter_mut().enumerate() {
            *v = (i * 2 + tag) as f64 * 0.5;
        }
        Sample { ecg, iegm, label, source: WindowId { subject: format!("s{tag}"), segment: tag, window: 0 } }
    }

    #[test]
    fn dataset_round_trips() {
        let ds = Dataset::new(vec![
            sample(MajorClass::SinusRhythm, 0),
            sample(MajorClass::Tachycardias, 1),
            sample(MajorClass::PacedBeats, 2),
        ]);
        let bytes = encode_dataset(&ds).unwrap();
        let back = decode_dataset(&bytes, Path::new("t.ds")).unwrap();
        assert_eq!(back, ds);
        // byte-identical rewrite
        assert_eq!(encode_dataset(&back).unwrap(), bytes);
    }

    #[test]
    fn raw_counts_survive_reencoding() {
        let mut ds = Dataset::new(vec![sample(MajorClass::SinusRhythm, 0)]);
        ds.raw_class_counts = [9, 8, 7, 6, 5, 4];
        let back = decode_dataset(&encode_dataset(&ds).unwrap(), Path::new("t.ds")).unwrap();
        assert_eq!(back.raw_class_counts, [9, 8, 7, 6, 5, 4]);
    }

    #[test]
    fn truncation_is_detected() {
        let ds = Dataset::new(vec![sample(MajorClass::SinusRhythm, 0)]);
        let mut bytes = encode_dataset(&ds).unwrap();
        bytes.pop();
        assert!(decode_dataset(&bytes, Path::new("t.ds")).is_err());
    }
}
