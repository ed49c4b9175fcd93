//! Synthetic PPG: a two-Gaussian pulse per beat with beat-to-beat rate
//! jitter, respiratory amplitude modulation, baseline wander and white noise.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{PpgRecord, DEFAULT_SAMPLE_RATE_HZ};
use crate::error::{Error, Result};

const BASELINE_FREQ_HZ: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectProfile {
    pub subject_id: String,
    pub heart_rate_bpm_mean: f64,
    pub heart_rate_bpm_std: f64,
    /// Systolic wave: amplitude, width (s), offset from beat onset (s).
    pub gauss1: [f64; 3],
    /// Diastolic / reflected wave.
    pub gauss2: [f64; 3],
    pub resp_freq_hz: f64,
    pub resp_depth: f64,
    pub baseline_wander_amp: f64,
    pub noise_sigma: f64,
    pub rng_seed: u64,
}

impl SubjectProfile {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::param("signal", msg));
        if !(40.0..=180.0).contains(&self.heart_rate_bpm_mean) {
            return bad(format!("heart rate mean {} outside [40, 180]", self.heart_rate_bpm_mean));
        }
        if !(self.heart_rate_bpm_std >= 0.0) {
            return bad("heart rate std must be non-negative".into());
        }
        if !(self.gauss1[1] > 0.0 && self.gauss2[1] > 0.0) {
            return bad("gaussian widths must be positive".into());
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise sigma must be non-negative".into());
        }
        let all = [
            self.heart_rate_bpm_mean,
            self.heart_rate_bpm_std,
            self.resp_freq_hz,
            self.resp_depth,
            self.baseline_wander_amp,
        ];
        if all.iter().chain(&self.gauss1).chain(&self.gauss2).any(|v| !v.is_finite()) {
            return bad("profile contains non-finite values".into());
        }
        Ok(())
    }

    /// Profile with every stochastic term switched off.
    pub fn noiseless(mut self) -> Self {
        self.heart_rate_bpm_std = 0.0;
        self.resp_depth = 0.0;
        self.baseline_wander_amp = 0.0;
        self.noise_sigma = 0.0;
        self
    }

    fn pulse(&self, tau: f64) -> f64 {
        let g = |p: &[f64; 3]| {
            let d = (tau - p[2]) / p[1];
            p[0] * (-0.5 * d * d).exp()
        };
        g(&self.gauss1) + g(&self.gauss2)
    }

    /// How far a pulse reaches past its onset before it is negligible.
    fn pulse_extent_s(&self) -> f64 {
        (self.gauss1[2] + 6.0 * self.gauss1[1]).max(self.gauss2[2] + 6.0 * self.gauss2[1])
    }
}

/// The default eight-subject registry. Mean heart rates sit 8 bpm apart
/// against a 2 bpm jitter, and the diastolic offsets and widths step
/// monotonically so each subject has its own pulse morphology.
pub fn default_registry() -> Vec<SubjectProfile> {
    (0..8)
        .map(|i| {
            let f = i as f64;
            SubjectProfile {
                subject_id: format!("S{:02}", i + 1),
                heart_rate_bpm_mean: 58.0 + 8.0 * f,
                heart_rate_bpm_std: 2.0,
                gauss1: [1.0, 0.06 + 0.006 * f, 0.16 + 0.012 * ((i * 3) % 8) as f64],
                gauss2: [0.25 + 0.07 * ((i * 5) % 8) as f64, 0.08 + 0.012 * f, 0.34 + 0.035 * ((i * 3) % 8) as f64],
                resp_freq_hz: 0.2 + 0.015 * f,
                resp_depth: 0.08 + 0.02 * ((i * 7) % 8) as f64,
                baseline_wander_amp: 0.1,
                noise_sigma: 0.02,
                rng_seed: 1000 + i as u64,
            }
        })
        .collect()
}

/// Generates `duration_s` seconds of PPG at 250 Hz for `profile`.
///
/// Output is a pure function of `(profile, seed)`.
pub fn synth_ppg(profile: &SubjectProfile, duration_s: f64, seed: u64) -> Result<PpgRecord> {
    profile.validate()?;
    if !(duration_s >= 4.0) {
        return Err(Error::param("signal", format!("duration {duration_s} s is below 4 s")));
    }
    let fs = DEFAULT_SAMPLE_RATE_HZ;
    let n = (duration_s * fs).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(profile.rng_seed ^ seed.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let unit = Normal::new(0.0, 1.0).expect("unit normal");

    // beat onsets, starting one extent before t=0 so the record opens mid-rhythm
    let extent = profile.pulse_extent_s();
    let mut onsets = Vec::new();
    let mut t = -extent.ceil() - rng.random::<f64>() * 60.0 / profile.heart_rate_bpm_mean;
    let end = n as f64 / fs;
    while t < end {
        onsets.push(t);
        let bpm = (profile.heart_rate_bpm_mean + profile.heart_rate_bpm_std * unit.sample(&mut rng)).clamp(30.0, 220.0);
        t += 60.0 / bpm;
    }

    let resp_phase = rng.random::<f64>() * 2.0 * PI;
    let base_phase = rng.random::<f64>() * 2.0 * PI;
    let mut samples = vec![0.0; n];
    let mut first = 0;
    for (i, out) in samples.iter_mut().enumerate() {
        let t = i as f64 / fs;
        while first < onsets.len() && onsets[first] + extent < t {
            first += 1;
        }
        let mut v = 0.0;
        for &on in onsets[first..].iter().take_while(|&&on| on <= t) {
            v += profile.pulse(t - on);
        }
        let resp = 1.0 + profile.resp_depth * (2.0 * PI * profile.resp_freq_hz * t + resp_phase).sin();
        let base = profile.baseline_wander_amp * (2.0 * PI * BASELINE_FREQ_HZ * t + base_phase).sin();
        *out = v * resp + base;
    }
    if profile.noise_sigma > 0.0 {
        for v in samples.iter_mut() {
            *v += profile.noise_sigma * unit.sample(&mut rng);
        }
    }
    PpgRecord::new(profile.subject_id.clone(), fs, samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn length_and_determinism() {
        let p = &default_registry()[2];
        let a = synth_ppg(p, 12.0, 5).unwrap();
        assert_eq!(a.samples.len(), 3000);
        let b = synth_ppg(p, 12.0, 5).unwrap();
        assert_eq!(a, b);
        let c = synth_ppg(p, 12.0, 6).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn noiseless_profile_is_periodic() {
        // 75 bpm -> 0.8 s -> exactly 200 samples
        let mut p = default_registry()[0].clone().noiseless();
        p.heart_rate_bpm_mean = 75.0;
        let r = synth_ppg(&p, 20.0, 1).unwrap();
        let period = 200;
        let x = &r.samples;
        for i in 500..x.len() - period {
            assert!((x[i] - x[i + period]).abs() < 1e-9, "sample {i}");
        }
    }

    #[test]
    fn invalid_profiles_rejected() {
        let base = default_registry()[0].clone();
        let mut p = base.clone();
        p.heart_rate_bpm_mean = 30.0;
        assert!(synth_ppg(&p, 10.0, 0).is_err());
        let mut p = base.clone();
        p.gauss2[1] = 0.0;
        assert!(synth_ppg(&p, 10.0, 0).is_err());
        let mut p = base.clone();
        p.noise_sigma = -0.1;
        assert!(synth_ppg(&p, 10.0, 0).is_err());
        assert!(synth_ppg(&base, 3.9, 0).is_err());
    }

    #[test]
    fn registry_profiles_are_distinct() {
        let reg = default_registry();
        assert_eq!(reg.len(), 8);
        for w in reg.windows(2) {
            let gap = w[1].heart_rate_bpm_mean - w[0].heart_rate_bpm_mean;
            assert!(gap >= 3.0 * w[0].heart_rate_bpm_std);
        }
        for (i, a) in reg.iter().enumerate() {
            a.validate().unwrap();
            for b in &reg[i + 1..] {
                assert_ne!(a.gauss2, b.gauss2);
            }
        }
    }
}
