//! PPG time sequences: synthesis, Butterworth filtering, normalization,
//! the four preprocessing modes, and segmentation into 1000-point windows.

mod filter;
pub mod io;
mod synth;

pub use filter::{bandpass, butterworth_bandpass_sos, sos_magnitude, Biquad, FilterSpec};
pub use synth::{default_registry, synth_ppg, SubjectProfile};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sampling rate of the acquisition protocol.
pub const DEFAULT_SAMPLE_RATE_HZ: f64 = 250.0;
/// Points per segment (4 s at 250 Hz).
pub const SEGMENT_LEN: usize = 1000;
/// Segments per enrollment / verification capture.
pub const SEGMENTS_PER_CAPTURE: usize = 3;
/// Samples in one 12 s capture at the default rate.
pub const CAPTURE_LEN: usize = SEGMENT_LEN * SEGMENTS_PER_CAPTURE;

/// A subject-tagged, uniformly sampled scalar sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpgRecord {
    pub subject_id: String,
    pub sample_rate_hz: f64,
    pub samples: Vec<f64>,
}

impl PpgRecord {
    /// Builds a record, checking the rate is positive and every sample finite.
    pub fn new(subject_id: impl Into<String>, sample_rate_hz: f64, samples: Vec<f64>) -> Result<Self> {
        let rec = PpgRecord {
            subject_id: subject_id.into(),
            sample_rate_hz,
            samples,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate_hz > 0.0 && self.sample_rate_hz.is_finite()) {
            return Err(Error::param(
                "signal",
                format!("sample rate must be positive, got {}", self.sample_rate_hz),
            ));
        }
        if self.samples.is_empty() {
            return Err(Error::insufficient("signal", "record has no samples"));
        }
        if let Some(i) = self.samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::param("signal", format!("sample {i} is not finite")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz
    }

    fn with_samples(&self, samples: Vec<f64>) -> Self {
        PpgRecord {
            subject_id: self.subject_id.clone(),
            sample_rate_hz: self.sample_rate_hz,
            samples,
        }
    }
}

/// The preprocessing applied before featurization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PreprocessMode {
    /// Samples passed through untouched.
    Raw,
    /// Butterworth bandpass 0.1-8 Hz.
    Band01_8,
    /// Butterworth bandpass 0.5-8 Hz.
    Band05_8,
    /// Butterworth bandpass 0.5-8 Hz, then min-max scaled to [0, 1].
    Band05_8Norm,
}

impl PreprocessMode {
    pub const ALL: [PreprocessMode; 4] = [
        PreprocessMode::Raw,
        PreprocessMode::Band01_8,
        PreprocessMode::Band05_8,
        PreprocessMode::Band05_8Norm,
    ];

    /// Stable one-byte code used by the template file format.
    pub fn code(self) -> u8 {
        match self {
            PreprocessMode::Raw => 0,
            PreprocessMode::Band01_8 => 1,
            PreprocessMode::Band05_8 => 2,
            PreprocessMode::Band05_8Norm => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        PreprocessMode::ALL.into_iter().find(|m| m.code() == code)
    }

    pub fn name(self) -> &'static str {
        match self {
            PreprocessMode::Raw => "raw",
            PreprocessMode::Band01_8 => "band01-8",
            PreprocessMode::Band05_8 => "band05-8",
            PreprocessMode::Band05_8Norm => "band05-8-norm",
        }
    }

    fn filter_band(self) -> Option<(f64, f64)> {
        match self {
            PreprocessMode::Raw => None,
            PreprocessMode::Band01_8 => Some((0.1, 8.0)),
            PreprocessMode::Band05_8 | PreprocessMode::Band05_8Norm => Some((0.5, 8.0)),
        }
    }
}

impl std::str::FromStr for PreprocessMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match norm.as_str() {
            "raw" => Ok(PreprocessMode::Raw),
            "band018" => Ok(PreprocessMode::Band01_8),
            "band058" => Ok(PreprocessMode::Band05_8),
            "band058norm" => Ok(PreprocessMode::Band05_8Norm),
            _ => Err(Error::param("signal", format!("unknown preprocess mode {s:?}"))),
        }
    }
}

/// Affine map of the samples onto [0, 1] (min -> 0, max -> 1).
pub fn normalize01(record: &PpgRecord) -> Result<PpgRecord> {
    record.validate()?;
    let (lo, hi) = record
        .samples
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi <= lo {
        return Err(Error::DegenerateRange(lo));
    }
    let span = hi - lo;
    let samples = record
        .samples
        .iter()
        .map(|&v| if v == hi { 1.0 } else { (v - lo) / span })
        .collect();
    Ok(record.with_samples(samples))
}

/// Applies one of the four preprocessing modes to a whole record.
pub fn preprocess(record: &PpgRecord, mode: PreprocessMode) -> Result<PpgRecord> {
    record.validate()?;
    let Some((low, high)) = mode.filter_band() else {
        return Ok(record.clone());
    };
    let filtered = bandpass(record, &FilterSpec::new(low, high))?;
    if mode == PreprocessMode::Band05_8Norm {
        normalize01(&filtered)
    } else {
        Ok(filtered)
    }
}

/// A 1000-point window cut from a record.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub subject_id: String,
    pub start_index: usize,
    pub samples: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentStrategy {
    /// Non-overlapping windows [0,1000), [1000,2000), ...
    Consecutive,
    /// `count` windows with uniformly drawn starts; windows may overlap.
    RandomStarts { count: usize, seed: u64 },
}

pub fn segment(record: &PpgRecord, strategy: SegmentStrategy) -> Result<Vec<Segment>> {
    let n = record.samples.len();
    if n < SEGMENT_LEN {
        return Err(Error::insufficient(
            "signal",
            format!("record has {n} samples, a segment needs {SEGMENT_LEN}"),
        ));
    }
    let window = |start: usize| Segment {
        subject_id: record.subject_id.clone(),
        start_index: start,
        samples: record.samples[start..start + SEGMENT_LEN].to_vec(),
    };
    let segments = match strategy {
        SegmentStrategy::Consecutive => (0..n / SEGMENT_LEN).map(|k| window(k * SEGMENT_LEN)).collect(),
        SegmentStrategy::RandomStarts { count, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..count)
                .map(|_| window(rng.random_range(0..=n - SEGMENT_LEN)))
                .collect()
        }
    };
    Ok(segments)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(samples: Vec<f64>) -> PpgRecord {
        PpgRecord::new("s", DEFAULT_SAMPLE_RATE_HZ, samples).unwrap()
    }

    #[test]
    fn record_rejects_bad_input() {
        assert!(PpgRecord::new("s", 0.0, vec![1.0]).is_err());
        assert!(PpgRecord::new("s", 250.0, vec![]).is_err());
        assert!(PpgRecord::new("s", 250.0, vec![1.0, f64::NAN]).is_err());
        assert!(PpgRecord::new("s", 250.0, vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize01(&rec(vec![2.0, 4.0, 6.0])).unwrap().samples, vec![0.0, 0.5, 1.0]);
        assert_eq!(normalize01(&rec(vec![-1.0, 0.0, 3.0])).unwrap().samples, vec![0.0, 0.25, 1.0]);
        let unit = vec![0.0, 0.3, 1.0, 0.7];
        assert_eq!(normalize01(&rec(unit.clone())).unwrap().samples, unit);
    }

    #[test]
    fn normalize_constant_is_degenerate() {
        assert!(matches!(
            normalize01(&rec(vec![3.0; 10])),
            Err(Error::DegenerateRange(_))
        ));
    }

    #[test]
    fn raw_mode_is_identity() {
        let r = rec((0..1500).map(|i| (i as f64 * 0.01).sin()).collect());
        assert_eq!(preprocess(&r, PreprocessMode::Raw).unwrap(), r);
    }

    #[test]
    fn norm_mode_spans_unit_interval() {
        let r = rec((0..3000).map(|i| (i as f64 * 0.05).sin() * 3.0 + 7.0).collect());
        let out = preprocess(&r, PreprocessMode::Band05_8Norm).unwrap();
        let lo = out.samples.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = out.samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!((lo, hi), (0.0, 1.0));
    }

    #[test]
    fn mode_parsing_and_codes() {
        for m in PreprocessMode::ALL {
            assert_eq!(m.name().parse::<PreprocessMode>().unwrap(), m);
            assert_eq!(PreprocessMode::from_code(m.code()), Some(m));
        }
        assert_eq!("Band05_8Norm".parse::<PreprocessMode>().unwrap(), PreprocessMode::Band05_8Norm);
        assert!("band".parse::<PreprocessMode>().is_err());
        assert_eq!(PreprocessMode::from_code(9), None);
    }

    #[test]
    fn consecutive_segments() {
        let r = rec((0..3000).map(|i| i as f64).collect());
        let segs = segment(&r, SegmentStrategy::Consecutive).unwrap();
        let starts: Vec<_> = segs.iter().map(|s| s.start_index).collect();
        assert_eq!(starts, vec![0, 1000, 2000]);
        assert_eq!(segs[1].samples[0], 1000.0);
        assert!(segs.iter().all(|s| s.samples.len() == SEGMENT_LEN));

        let one = segment(&rec(vec![0.5; 1000]), SegmentStrategy::Consecutive).unwrap();
        assert_eq!(one.len(), 1);
        let partial = segment(&rec(vec![0.5; 2999]), SegmentStrategy::Consecutive).unwrap();
        assert_eq!(partial.len(), 2);
    }

    #[test]
    fn short_record_cannot_be_segmented() {
        let err = segment(&rec(vec![0.0; 999]), SegmentStrategy::Consecutive).unwrap_err();
        assert!(matches!(err, Error::InsufficientData { .. }));
    }

    #[test]
    fn random_segments_are_seeded() {
        let r = rec((0..15000).map(|i| i as f64).collect());
        let strat = SegmentStrategy::RandomStarts { count: 150, seed: 3 };
        let a = segment(&r, strat).unwrap();
        let b = segment(&r, strat).unwrap();
        assert_eq!(a.len(), 150);
        assert_eq!(a, b);
        assert!(a.iter().all(|s| s.start_index <= 14000));
        assert!(a.iter().all(|s| s.samples[0] == s.start_index as f64));
        let c = segment(&r, SegmentStrategy::RandomStarts { count: 150, seed: 4 }).unwrap();
        assert_ne!(a, c);
    }
}
