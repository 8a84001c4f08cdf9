//! FSEQ feature files and annotation CSVs.
//!
//! FSEQ layout, little-endian: magic `FSEQ`, `u32` version (1), `u32`
//! frame count, `u32` feature dimension, then `f32` frames row-major.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::TimedEvent;
use crate::tensor::Tensor;

pub const FSEQ_MAGIC: &[u8; 4] = b"FSEQ";
pub const FSEQ_VERSION: u32 = 1;
pub const FSEQ_HEADER_LEN: usize = 16;
pub const CSV_HEADER: [&str; 3] = ["onset_sec", "offset_sec", "label"];

/// Feature frames `[T×dim]` on the 10 ms grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub id: String,
    pub frames: Tensor,
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.shape()[1]
    }
}

pub fn encode_features(frames: &Tensor) -> Result<Vec<u8>> {
    if frames.rank() != 2 || frames.shape()[0] == 0 {
        return Err(Error::dim(format!("features must be [T×dim] with T ≥ 1, got {:?}", frames.shape())));
    }
    let (t, d) = (frames.shape()[0], frames.shape()[1]);
    let to_u32 = |v: usize| u32::try_from(v).map_err(|_| Error::dim(format!("extent {v} exceeds u32")));
    let mut out = Vec::with_capacity(FSEQ_HEADER_LEN + 4 * t * d);
    out.extend_from_slice(FSEQ_MAGIC);
    out.extend_from_slice(&FSEQ_VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(t)?.to_le_bytes());
    out.extend_from_slice(&to_u32(d)?.to_le_bytes());
    for v in frames.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<Tensor> {
    let fmt = |offset: usize, message: String| Error::Format {
        offset: offset as u64,
        message,
    };
    let word = |at: usize| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| fmt(bytes.len(), format!("truncated header ({} bytes)", bytes.len())))
    };
    if bytes.len() < 4 || &bytes[..4] != FSEQ_MAGIC {
        return Err(fmt(0, "bad magic, expected FSEQ".into()));
    }
    let version = word(4)?;
    if version != FSEQ_VERSION {
        return Err(fmt(4, format!("unsupported version {version}")));
    }
    let (t, d) = (word(8)? as usize, word(12)? as usize);
    if t == 0 {
        return Err(fmt(8, "zero frames".into()));
    }
    let want = FSEQ_HEADER_LEN + 4 * t * d;
    if bytes.len() < want {
        return Err(fmt(bytes.len(), format!("truncated payload, expected {want} bytes")));
    }
    if bytes.len() > want {
        return Err(fmt(want, format!("{} trailing bytes", bytes.len() - want)));
    }
    let mut data = Vec::with_capacity(t * d);
    for (k, chunk) in bytes[FSEQ_HEADER_LEN..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(fmt(FSEQ_HEADER_LEN + 4 * k, format!("non-finite value {v}")));
        }
        data.push(v as f64);
    }
    Tensor::new(vec![t, d], data)
}

pub fn write_features(path: &Path, frames: &Tensor) -> Result<()> {
    let bytes = encode_features(frames).map_err(|e| e.at_path(path))?;
    fs::write(path, bytes).map_err(|e| Error::from(e).at_path(path))
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::from(e).at_path(path))?;
    decode_features(&bytes).map_err(|e| e.at_path(path))
}

/// Six-decimal CSV text for `events`.
pub fn encode_annotations(events: &[TimedEvent]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Csv {
        line: 0,
        message: e.to_string(),
    };
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for e in events {
        if e.label.is_empty() {
            return Err(Error::contract("event label must be non-empty"));
        }
        w.write_record([format!("{:.6}", e.onset), format!("{:.6}", e.offset), e.label.clone()])
            .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn decode_annotations(bytes: &[u8]) -> Result<Vec<TimedEvent>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(bytes);
    let mut out = Vec::new();
    let mut saw_header = false;
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Csv {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let bad = |message: String| Error::Csv { line, message };
        if !saw_header {
            if rec.iter().collect::<Vec<_>>() != CSV_HEADER {
                return Err(bad(format!("expected header {}", CSV_HEADER.join(","))));
            }
            saw_header = true;
            continue;
        }
        if rec.len() != 3 {
            return Err(bad(format!("expected 3 fields, found {}", rec.len())));
        }
        let num = |k: usize| -> Result<f64> {
            let v: f64 = rec[k]
                .trim()
                .parse()
                .map_err(|_| bad(format!("{} is not a number: {:?}", CSV_HEADER[k], &rec[k])))?;
            if !v.is_finite() || v < 0.0 {
                return Err(bad(format!("{} must be finite and non-negative", CSV_HEADER[k])));
            }
            Ok(v)
        };
        let (onset, offset) = (num(0)?, num(1)?);
        if offset <= onset {
            return Err(bad(format!("offset {offset} not after onset {onset}")));
        }
        let label = rec[2].trim();
        if label.is_empty() {
            return Err(bad("empty label".into()));
        }
        out.push(TimedEvent::new(onset, offset, label));
    }
    if !saw_header {
        return Err(Error::Csv {
            line: 1,
            message: "missing header".into(),
        });
    }
    Ok(out)
}

pub fn write_annotations(path: &Path, events: &[TimedEvent]) -> Result<()> {
    let bytes = encode_annotations(events).map_err(|e| e.at_path(path))?;
    let mut f = fs::File::create(path).map_err(|e| Error::from(e).at_path(path))?;
    f.write_all(&bytes).map_err(|e| Error::from(e).at_path(path))
}

pub fn read_annotations(path: &Path) -> Result<Vec<TimedEvent>> {
    let bytes = fs::read(path).map_err(|e| Error::from(e).at_path(path))?;
    decode_annotations(&bytes).map_err(|e| e.at_path(path))
}

/// Rounds a time to the six decimals the CSV format keeps.
pub fn round_time(t: f64) -> f64 {
    format!("{t:.6}").parse().expect("formatted float parses")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_value_file_size() {
        let t = Tensor::matrix(1, 1, vec![0.5]).unwrap();
        let bytes = encode_features(&t).unwrap();
        assert_eq!(bytes.len(), FSEQ_HEADER_LEN + 4);
        assert_eq!(decode_features(&bytes).unwrap(), t);
    }

    #[test]
    fn truncation_and_bad_headers_report_offsets() {
        let t = Tensor::matrix(2, 3, vec![0.25; 6]).unwrap();
        let bytes = encode_features(&t).unwrap();
        match decode_features(&bytes[..bytes.len() - 2]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, bytes.len() as u64 - 2),
            other => panic!("{other:?}"),
        }
        assert!(matches!(decode_features(&bytes[..6]), Err(Error::Format { .. })));
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(decode_features(&wrong), Err(Error::Format { offset: 0, .. })));
        let mut version = bytes;
        version[4] = 2;
        assert!(matches!(decode_features(&version), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn annotations_round_trip() {
        assert_eq!(
            String::from_utf8(encode_annotations(&[]).unwrap()).unwrap(),
            "onset_sec,offset_sec,label\n"
        );
        let ev = vec![
            TimedEvent::new(0.0, 0.25, "filler"),
            TimedEvent::new(1.234567, 1.5, "speech"),
            TimedEvent::new(0.1, 1.9, "music"),
        ];
        let back = decode_annotations(&encode_annotations(&ev).unwrap()).unwrap();
        assert_eq!(back, ev);
        assert!((back[1].onset - 1.234567).abs() < 1e-6);
    }

    #[test]
    fn malformed_rows_name_their_line() {
        let text = b"onset_sec,offset_sec,label\n0.1,0.2,filler\n0.5,abc,filler\n";
        match decode_annotations(text) {
            Err(Error::Csv { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let text = b"onset_sec,offset_sec,label\n0.5,0.4,filler\n";
        assert!(matches!(decode_annotations(text), Err(Error::Csv { line: 2, .. })));
        assert!(matches!(decode_annotations(b"a,b\n"), Err(Error::Csv { line: 1, .. })));
    }
}
