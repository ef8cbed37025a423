//! `.sigc` record containers and `.ann` annotation files.
//!
//! A container is a UTF-8 header block of `key value` lines terminated by a
//! newline plus NUL byte, followed by the raw float32 little-endian payload
//! in channel-major order. The header declares the subject, sampling rate,
//! sample count, channel list, and payload dtype, so a writer and reader
//! can round-trip the file byte for byte.

use std::fs;
use std::path::Path;

use rhythmlab_core::ingest::{AnnotationInterval, RawRecord, CHANNEL_NAMES, SAMPLE_RATE};
use rhythmlab_core::Tensor;

use crate::{CliError, Result};

const MAGIC: &str = "sigc 1";

/// Serialize a record to container bytes.
pub fn encode_record(record: &RawRecord) -> Result<Vec<u8>> {
    record.validate()?;
    let t = record.samples();
    let mut header = String::new();
    header.push_str(MAGIC);
    header.push('\n');
    header.push_str(&format!("subject {}\n", record.subject));
    header.push_str(&format!("fs {}\n", record.fs));
    header.push_str(&format!("samples {t}\n"));
    header.push_str(&format!("channels {}\n", record.channel_names.join(",")));
    header.push_str("dtype f32le\n");
    let mut bytes = header.into_bytes();
    bytes.push(0);
    bytes.reserve(record.data.numel() * 4);
    for v in record.data.data() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(bytes)
}

/// Parse container bytes into a record.
pub fn decode_record(bytes: &[u8], origin: &Path) -> Result<RawRecord> {
    let bad = |detail: String| CliError::Format { what: "signal container", path: origin.to_path_buf(), detail };
    let nul = bytes
        .iter()
        .position(|&b| b == 0)
        .ok_or_else(|| bad("missing header terminator".into()))?;
    let header = std::str::from_utf8(&bytes[..nul]).map_err(|e| bad(format!("non-UTF-8 header: {e}")))?;
    if !header.ends_with('\n') {
        return Err(bad("header must end with newline before NUL".into()));
    }
    let mut subject = None;
    let mut fs = None;
    let mut samples = None;
    let mut channels: Option<Vec<String>> = None;
    let mut dtype = None;
    for (i, line) in header.lines().enumerate() {
        if i == 0 {
            if line != MAGIC {
                return Err(bad(format!("bad magic {line:?}")));
            }
            continue;
        }
        let (key, value) = line.split_once(' ').ok_or_else(|| bad(format!("malformed line {line:?}")))?;
        match key {
            "subject" => subject = Some(value.to_string()),
            "fs" => fs = Some(value.parse::<u32>().map_err(|e| bad(format!("fs: {e}")))?),
            "samples" => samples = Some(value.parse::<usize>().map_err(|e| bad(format!("samples: {e}")))?),
            "channels" => channels = Some(value.split(',').map(|s| s.to_string()).collect()),
            "dtype" => dtype = Some(value.to_string()),
            other => return Err(bad(format!("unknown header key {other:?}"))),
        }
    }
    let subject = subject.ok_or_else(|| bad("missing subject".into()))?;
    let fs = fs.ok_or_else(|| bad("missing fs".into()))?;
    let t = samples.ok_or_else(|| bad("missing samples".into()))?;
    let channels = channels.ok_or_else(|| bad("missing channels".into()))?;
    let dtype = dtype.ok_or_else(|| bad("missing dtype".into()))?;
    if dtype != "f32le" {
        return Err(bad(format!("unsupported dtype {dtype:?}")));
    }
    if fs != SAMPLE_RATE {
        return Err(bad(format!("fs {fs} != {SAMPLE_RATE}")));
    }
    if channels.len() != CHANNEL_NAMES.len() || channels.iter().zip(CHANNEL_NAMES).any(|(a, b)| a != b) {
        return Err(CliError::Core(rhythmlab_core::Error::ChannelListMismatch { got: channels }));
    }
    let payload = &bytes[nul + 1..];
    let expect = channels.len() * t * 4;
    if payload.len() != expect {
        return Err(bad(format!("truncated payload: {} bytes, expected {expect}", payload.len())));
    }
    let mut data = Vec::with_capacity(channels.len() * t);
    for chunk in payload.chunks_exact(4) {
        data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64);
    }
    let tensor = Tensor::new(&[channels.len(), t], data)?;
    Ok(RawRecord::new(subject, tensor)?)
}

pub fn write_record(path: &Path, record: &RawRecord) -> Result<()> {
    fs::write(path, encode_record(record)?).map_err(CliError::io(path))
}

pub fn read_record(path: &Path) -> Result<RawRecord> {
    let bytes = fs::read(path).map_err(CliError::io(path))?;
    decode_record(&bytes, path)
}

/// Annotations: one `start end label` line per interval.
pub fn write_annotations(path: &Path, annotations: &[AnnotationInterval]) -> Result<()> {
    let mut out = String::new();
    for a in annotations {
        out.push_str(&format!("{} {} {}\n", a.start, a.end, a.aux_label));
    }
    fs::write(path, out).map_err(CliError::io(path))
}

pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationInterval>> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    let bad = |line: &str, detail: String| CliError::Format {
        what: "annotation file",
        path: path.to_path_buf(),
        detail: format!("{detail} in line {line:?}"),
    };
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.splitn(3, ' ');
        let start = parts
            .next()
            .and_then(|v| v.parse::<usize>().ok())
            .ok_or_else(|| bad(line, "bad start".into()))?;
        let end = parts
            .next()
            .and_then(|v| v.parse::<usize>().ok())
            .ok_or_else(|| bad(line, "bad end".into()))?;
        let label = parts.next().ok_or_else(|| bad(line, "missing label".into()))?.to_string();
        out.push(AnnotationInterval { start, end, aux_label: label });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_record_round_trips() {
        let rec = RawRecord::new("x001", Tensor::zeros(&[18, 977])).unwrap();
        let bytes = encode_record(&rec).unwrap();
        let back = decode_record(&bytes, Path::new("test.sigc")).unwrap();
        assert_eq!(back, rec);
        assert!(back.data.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ramp_round_trips_byte_identical() {
        let data: Vec<f64> = (0..18 * 100).map(|i| i as f64).collect();
        let rec = RawRecord::new("x002", Tensor::new(&[18, 100], data).unwrap()).unwrap();
        let bytes = encode_record(&rec).unwrap();
        let reread = decode_record(&bytes, Path::new("t")).unwrap();
        let rewritten = encode_record(&reread).unwrap();
        assert_eq!(bytes, rewritten, "write(read(bytes)) must be byte-identical");
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let rec = RawRecord::new("x003", Tensor::zeros(&[18, 10])).unwrap();
        let mut bytes = encode_record(&rec).unwrap();
        // drop one channel name from the header
        let text = String::from_utf8(bytes.clone()).unwrap_or_else(|_| {
            let nul = bytes.iter().position(|&b| b == 0).unwrap();
            String::from_utf8_lossy(&bytes[..nul]).into_owned()
        });
        let _ = text;
        let nul = bytes.iter().position(|&b| b == 0).unwrap();
        let header = String::from_utf8(bytes[..nul].to_vec()).unwrap();
        let clipped = header.replace(",CS90", "");
        let mut bad = clipped.into_bytes();
        bad.push(0);
        bad.extend_from_slice(&bytes[nul + 1..]);
        let err = decode_record(&bad, Path::new("t")).unwrap_err();
        assert!(format!("{err}").contains("channel list mismatch"), "{err}");
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let rec = RawRecord::new("x004", Tensor::zeros(&[18, 10])).unwrap();
        let mut bytes = encode_record(&rec).unwrap();
        bytes.truncate(bytes.len() - 5);
        let err = decode_record(&bytes, Path::new("t")).unwrap_err();
        assert!(format!("{err}").contains("truncated"), "{err}");
    }

    #[test]
    fn annotations_round_trip() {
        let anns = vec![
            AnnotationInterval { start: 0, end: 1954, aux_label: "(N".into() },
            AnnotationInterval { start: 2000, end: 3000, aux_label: "(AVNRT".into() },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.ann");
        write_annotations(&path, &anns).unwrap();
        assert_eq!(read_annotations(&path).unwrap(), anns);
    }
}
