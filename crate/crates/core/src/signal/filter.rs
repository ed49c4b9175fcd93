//! Butterworth bandpass design (bilinear transform, second-order sections)
//! and zero-phase forward-backward application.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::PpgRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub low_cut_hz: f64,
    pub high_cut_hz: f64,
    /// Order of the lowpass prototype; the bandpass has twice as many poles.
    pub order: usize,
}

impl FilterSpec {
    pub fn new(low_cut_hz: f64, high_cut_hz: f64) -> Self {
        FilterSpec {
            low_cut_hz,
            high_cut_hz,
            order: 4,
        }
    }

    pub fn validate(&self, sample_rate_hz: f64) -> Result<()> {
        let nyquist = sample_rate_hz / 2.0;
        if self.order == 0 {
            return Err(Error::param("signal", "filter order must be positive"));
        }
        if !(self.low_cut_hz > 0.0 && self.low_cut_hz < self.high_cut_hz && self.high_cut_hz < nyquist) {
            return Err(Error::param(
                "signal",
                format!(
                    "need 0 < low ({}) < high ({}) < nyquist ({nyquist})",
                    self.low_cut_hz, self.high_cut_hz
                ),
            ));
        }
        Ok(())
    }
}

/// One second-order section, `a0` normalized to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    /// Complex response at normalized angular frequency `w` (rad/sample).
    fn response(&self, w: f64) -> (f64, f64) {
        let eval = |c: &[f64; 3]| {
            // c0 + c1 e^{-jw} + c2 e^{-2jw}
            let re = c[0] + c[1] * w.cos() + c[2] * (2.0 * w).cos();
            let im = -c[1] * w.sin() - c[2] * (2.0 * w).sin();
            (re, im)
        };
        let (nr, ni) = eval(&self.b);
        let (dr, di) = eval(&self.a);
        let den = dr * dr + di * di;
        ((nr * dr + ni * di) / den, (ni * dr - nr * di) / den)
    }
}

#[derive(Clone, Copy, Debug)]
struct Cplx {
    re: f64,
    im: f64,
}

impl Cplx {
    fn new(re: f64, im: f64) -> Self {
        Cplx { re, im }
    }
    fn add(self, o: Cplx) -> Cplx {
        Cplx::new(self.re + o.re, self.im + o.im)
    }
    fn sub(self, o: Cplx) -> Cplx {
        Cplx::new(self.re - o.re, self.im - o.im)
    }
    fn mul(self, o: Cplx) -> Cplx {
        Cplx::new(self.re * o.re - self.im * o.im, self.re * o.im + self.im * o.re)
    }
    fn scale(self, k: f64) -> Cplx {
        Cplx::new(self.re * k, self.im * k)
    }
    fn div(self, o: Cplx) -> Cplx {
        let d = o.re * o.re + o.im * o.im;
        Cplx::new((self.re * o.re + self.im * o.im) / d, (self.im * o.re - self.re * o.im) / d)
    }
    fn sqrt(self) -> Cplx {
        let r = (self.re * self.re + self.im * self.im).sqrt();
        let re = ((r + self.re) / 2.0).max(0.0).sqrt();
        let im = ((r - self.re) / 2.0).max(0.0).sqrt().copysign(self.im);
        Cplx::new(re, im)
    }
}

/// Designs a digital Butterworth bandpass as cascaded second-order sections.
///
/// Analog prototype poles are mapped through the lowpass-to-bandpass
/// transform on prewarped edges, then through the bilinear transform. Each
/// section carries one zero at z = 1 and one at z = -1; overall gain is unity
/// at the band center.
pub fn butterworth_bandpass_sos(spec: &FilterSpec, sample_rate_hz: f64) -> Result<Vec<Biquad>> {
    spec.validate(sample_rate_hz)?;
    let n = spec.order;
    let fs2 = 2.0 * sample_rate_hz;
    let w_lo = fs2 * (PI * spec.low_cut_hz / sample_rate_hz).tan();
    let w_hi = fs2 * (PI * spec.high_cut_hz / sample_rate_hz).tan();
    let bw = w_hi - w_lo;
    let w0_sq = w_lo * w_hi;

    // bandpass poles in the z-plane
    let mut poles = Vec::with_capacity(2 * n);
    for k in 0..n {
        let theta = PI * (2 * k + n + 1) as f64 / (2 * n) as f64;
        let p = Cplx::new(theta.cos(), theta.sin()).scale(bw);
        // roots of s^2 - p s + w0^2
        let disc = p.mul(p).sub(Cplx::new(4.0 * w0_sq, 0.0)).sqrt();
        for s in [p.add(disc).scale(0.5), p.sub(disc).scale(0.5)] {
            let z = Cplx::new(fs2, 0.0).add(s).div(Cplx::new(fs2, 0.0).sub(s));
            poles.push(z);
        }
    }

    let mut sections = Vec::with_capacity(n);
    let mut reals = Vec::new();
    for z in &poles {
        if z.im > 1e-12 {
            sections.push(Biquad {
                b: [1.0, 0.0, -1.0],
                a: [1.0, -2.0 * z.re, z.re * z.re + z.im * z.im],
            });
        } else if z.im.abs() <= 1e-12 {
            reals.push(z.re);
        }
    }
    for pair in reals.chunks(2) {
        let (r1, r2) = (pair[0], *pair.get(1).unwrap_or(&0.0));
        sections.push(Biquad {
            b: [1.0, 0.0, -1.0],
            a: [1.0, -(r1 + r2), r1 * r2],
        });
    }
    if sections.len() != n {
        return Err(Error::param("signal", "pole pairing failed for this filter design"));
    }

    let w_center = 2.0 * (w0_sq.sqrt() / fs2).atan();
    let gain = sos_magnitude(&sections, w_center);
    for c in sections[0].b.iter_mut() {
        *c /= gain;
    }
    Ok(sections)
}

/// |H(e^{jw})| of a cascade, `w` in rad/sample.
pub fn sos_magnitude(sections: &[Biquad], w: f64) -> f64 {
    sections
        .iter()
        .map(|s| {
            let (re, im) = s.response(w);
            (re * re + im * im).sqrt()
        })
        .product()
}

/// Direct form II transposed, in place, starting from state `zi`.
fn sosfilt(sections: &[Biquad], x: &mut [f64], zi: &[[f64; 2]]) {
    for (s, z0) in sections.iter().zip(zi) {
        let [b0, b1, b2] = s.b;
        let [_, a1, a2] = s.a;
        let (mut z1, mut z2) = (z0[0], z0[1]);
        for v in x.iter_mut() {
            let xin = *v;
            let y = b0 * xin + z1;
            z1 = b1 * xin - a1 * y + z2;
            z2 = b2 * xin - a2 * y;
            *v = y;
        }
    }
}

/// Steady-state section states for a unit step at the cascade input.
fn sos_step_state(sections: &[Biquad]) -> Vec<[f64; 2]> {
    let mut level = 1.0;
    sections
        .iter()
        .map(|s| {
            let dc = (s.b[0] + s.b[1] + s.b[2]) / (s.a[0] + s.a[1] + s.a[2]);
            let y = dc * level;
            let state = [y - s.b[0] * level, s.b[2] * level - s.a[2] * y];
            level = y;
            state
        })
        .collect()
}

fn filter_pass(sections: &[Biquad], x: &mut [f64], step: &[[f64; 2]]) {
    let x0 = x[0];
    let zi: Vec<[f64; 2]> = step.iter().map(|s| [s[0] * x0, s[1] * x0]).collect();
    sosfilt(sections, x, &zi);
}

/// Zero-phase forward-backward Butterworth bandpass.
///
/// Edges are extended by odd reflection (long enough to cover roughly three
/// periods of the low cutoff) and section states start at their steady state
/// for the edge value. Output length equals input length.
pub fn bandpass(record: &PpgRecord, spec: &FilterSpec) -> Result<PpgRecord> {
    record.validate()?;
    let sections = butterworth_bandpass_sos(spec, record.sample_rate_hz)?;
    let x = &record.samples;
    let n = x.len();
    let wanted = (3.0 * record.sample_rate_hz / spec.low_cut_hz).ceil() as usize;
    let pad = wanted.min(n.saturating_sub(1));

    let mut ext = Vec::with_capacity(n + 2 * pad);
    let (first, last) = (x[0], x[n - 1]);
    ext.extend((1..=pad).rev().map(|i| 2.0 * first - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * last - x[n - 1 - i]));

    let step = sos_step_state(&sections);
    filter_pass(&sections, &mut ext, &step);
    ext.reverse();
    filter_pass(&sections, &mut ext, &step);
    ext.reverse();

    let samples = ext[pad..pad + n].to_vec();
    Ok(PpgRecord {
        subject_id: record.subject_id.clone(),
        sample_rate_hz: record.sample_rate_hz,
        samples,
    })
}
