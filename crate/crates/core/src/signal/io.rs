//! PPG file formats.
//!
//! CSV: `subject_id,<id>` line, `sample_rate_hz,<rate>` line, then one
//! decimal sample per line.
//!
//! Binary: `PPG1`, u32 LE sample count, then f32 LE samples. The binary form
//! carries no subject or rate; readers supply them.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{PpgRecord, DEFAULT_SAMPLE_RATE_HZ};
use crate::error::{Error, Result};

pub const PPG_MAGIC: &[u8; 4] = b"PPG1";

pub fn to_csv(record: &PpgRecord) -> String {
    let mut out = String::with_capacity(record.samples.len() * 12 + 64);
    out.push_str(&format!("subject_id,{}\n", record.subject_id));
    out.push_str(&format!("sample_rate_hz,{}\n", record.sample_rate_hz));
    for v in &record.samples {
        out.push_str(&format!("{v}\n"));
    }
    out
}

pub fn from_csv(text: &str) -> Result<PpgRecord> {
    let mut offset = 0u64;
    let mut lines = text.split_inclusive('\n');
    let mut header = |key: &str| -> Result<String> {
        let line = lines
            .next()
            .ok_or_else(|| Error::format("ppg csv", offset, format!("missing {key} line")))?;
        let here = offset;
        offset += line.len() as u64;
        let line = line.trim_end_matches(['\n', '\r']);
        match line.split_once(',') {
            Some((k, v)) if k.trim() == key => Ok(v.trim().to_string()),
            _ => Err(Error::format("ppg csv", here, format!("expected `{key},<value>`"))),
        }
    };
    let subject_id = header("subject_id")?;
    let rate_text = header("sample_rate_hz")?;
    let sample_rate_hz: f64 = rate_text
        .parse()
        .map_err(|_| Error::format("ppg csv", offset, format!("bad sample rate {rate_text:?}")))?;
    let mut samples = Vec::new();
    for line in lines {
        let here = offset;
        offset += line.len() as u64;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let v: f64 = t
            .parse()
            .map_err(|_| Error::format("ppg csv", here, format!("bad sample {t:?}")))?;
        samples.push(v);
    }
    PpgRecord::new(subject_id, sample_rate_hz, samples)
}

pub fn to_bin(record: &PpgRecord) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * record.samples.len());
    out.extend_from_slice(PPG_MAGIC);
    out.extend_from_slice(&(record.samples.len() as u32).to_le_bytes());
    for &v in &record.samples {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn from_bin(bytes: &[u8], subject_id: &str, sample_rate_hz: f64) -> Result<PpgRecord> {
    if bytes.len() < 8 {
        return Err(Error::format("ppg bin", bytes.len() as u64, "truncated header"));
    }
    if &bytes[..4] != PPG_MAGIC {
        return Err(Error::format("ppg bin", 0, "bad magic"));
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() != 4 * count {
        return Err(Error::format(
            "ppg bin",
            8 + body.len().min(4 * count) as u64,
            format!("expected {count} samples, found {} bytes", body.len()),
        ));
    }
    let samples = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    PpgRecord::new(subject_id, sample_rate_hz, samples)
}

/// Reads either format, choosing by magic. Binary files take their subject
/// id from the file stem.
pub fn read_ppg(path: &Path) -> Result<PpgRecord> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(PPG_MAGIC) {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("unknown");
        from_bin(&bytes, stem, DEFAULT_SAMPLE_RATE_HZ)
    } else {
        let text = String::from_utf8(bytes).map_err(|e| Error::format("ppg csv", e.utf8_error().valid_up_to() as u64, "not UTF-8"))?;
        from_csv(&text)
    }
}

/// Writes CSV unless the extension is `.bin`.
pub fn write_ppg(path: &Path, record: &PpgRecord) -> Result<()> {
    let bytes = if path.extension().is_some_and(|e| e == "bin") {
        to_bin(record)
    } else {
        to_csv(record).into_bytes()
    };
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> PpgRecord {
        PpgRecord::new("S01", 250.0, vec![0.0, 1.5, -2.25, 1e-3, 12345.678]).unwrap()
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let r = sample();
        let text = to_csv(&r);
        assert!(text.starts_with("subject_id,S01\nsample_rate_hz,250\n"));
        assert_eq!(from_csv(&text).unwrap(), r);
    }

    #[test]
    fn csv_errors_carry_offsets() {
        let err = from_csv("subject_id,a\nsample_rate_hz,250\n1.0\nx\n").unwrap_err();
        match err {
            Error::Format { offset, .. } => assert_eq!(offset, 36),
            e => panic!("{e}"),
        }
        assert!(from_csv("rate,250\n").is_err());
        assert!(from_csv("subject_id,a\nsample_rate_hz,250\n").is_err());
    }

    #[test]
    fn bin_layout() {
        let r = sample();
        let bytes = to_bin(&r);
        assert_eq!(&bytes[..4], b"PPG1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 5);
        assert_eq!(bytes.len(), 8 + 20);
        let back = from_bin(&bytes, "S01", 250.0).unwrap();
        for (a, b) in back.samples.iter().zip(&r.samples) {
            assert_eq!(*a, *b as f32 as f64);
        }
        assert!(from_bin(&bytes[..bytes.len() - 1], "S01", 250.0).is_err());
        assert!(from_bin(b"PPG2\0\0\0\0", "S01", 250.0).is_err());
    }
}
