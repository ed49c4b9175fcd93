//! Translation variables of the 0-1 test for chaos, their rasterization
//! into binary (p,q)-plane images, and the K statistic.

mod kstat;
mod raster;

pub use kstat::{compute_k, KResult};
pub use raster::{
    featurize, rasterize, BinaryImage, FeatureImage, Provenance, FEATURE_CHANNELS, IMAGE_SIZE,
};

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower edge of the c interval that avoids resonances.
pub const C_MIN: f64 = PI / 5.0;
/// Upper edge of the c interval that avoids resonances.
pub const C_MAX: f64 = 4.0 * PI / 5.0;
pub const DEFAULT_C: f64 = 1.7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PqParams {
    pub c: f64,
    #[serde(default)]
    pub alpha: f64,
}

impl PqParams {
    pub fn new(c: f64) -> Self {
        PqParams { c, alpha: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..2.0 * PI).contains(&self.c) {
            return Err(Error::param("chaos01", format!("c = {} outside [0, 2pi)", self.c)));
        }
        if !self.alpha.is_finite() {
            return Err(Error::param("chaos01", "alpha must be finite"));
        }
        Ok(())
    }
}

impl Default for PqParams {
    fn default() -> Self {
        PqParams::new(DEFAULT_C)
    }
}

/// How c is chosen per feature channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CSchedule {
    /// The same c on every channel.
    Fixed(f64),
    /// `channels` evenly spaced values strictly inside [pi/5, 4pi/5].
    Sweep { channels: usize },
}

impl Default for CSchedule {
    fn default() -> Self {
        CSchedule::Fixed(DEFAULT_C)
    }
}

impl CSchedule {
    pub fn c_for(&self, channel_index: usize) -> f64 {
        match *self {
            CSchedule::Fixed(c) => c,
            CSchedule::Sweep { channels } => {
                let k = channels.max(1);
                let slot = (channel_index % k) as f64 + 0.5;
                C_MIN + slot / k as f64 * (C_MAX - C_MIN)
            }
        }
    }

    /// Parameters for the three feature channels.
    pub fn channel_params(&self) -> [PqParams; FEATURE_CHANNELS] {
        std::array::from_fn(|i| PqParams::new(self.c_for(i)))
    }
}

/// c for a channel under the default schedule.
pub fn default_c(channel_index: usize) -> f64 {
    CSchedule::default().c_for(channel_index)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PqTrajectory {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub phi: Vec<f64>,
    pub params: PqParams,
}

impl PqTrajectory {
    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }
}

/// Translation variables `(p_n, q_n, phi_n)` for `n = 1..=N`, stored at index `n - 1`.
///
/// With `alpha == 0` the sums are evaluated directly,
/// `p_n = sum_{k<=n} s(k) cos(kc)`, `q_n = sum_{k<=n} s(k) sin(kc)`,
/// `phi_n = n c`. Otherwise the recurrence
/// `phi_n = phi_{n-1} + c + alpha s(n)`, `p_n = p_{n-1} + s(n) cos(phi_n)`
/// (likewise q) is iterated from a zero origin.
pub fn translation_vars(s: &[f64], params: PqParams) -> Result<PqTrajectory> {
    params.validate()?;
    if s.len() < 2 {
        return Err(Error::insufficient(
            "chaos01",
            format!("translation variables need at least 2 samples, got {}", s.len()),
        ));
    }
    if params.alpha == 0.0 {
        Ok(closed_form(s, params))
    } else {
        Ok(iterate(s, params))
    }
}

fn closed_form(s: &[f64], params: PqParams) -> PqTrajectory {
    let n = s.len();
    let (mut p, mut q, mut phi) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    let (mut ps, mut qs) = (0.0, 0.0);
    for (i, &v) in s.iter().enumerate() {
        let angle = (i + 1) as f64 * params.c;
        let (sin, cos) = angle.sin_cos();
        ps += v * cos;
        qs += v * sin;
        p.push(ps);
        q.push(qs);
        phi.push(angle);
    }
    PqTrajectory { p, q, phi, params }
}

/// Recurrence form for any alpha, without validation; the angle is
/// accumulated with compensated summation.
pub fn iterate(s: &[f64], params: PqParams) -> PqTrajectory {
    let n = s.len();
    let (mut p, mut q, mut phi) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    let (mut ps, mut qs) = (0.0, 0.0);
    let (mut angle, mut comp) = (0.0f64, 0.0f64);
    for &v in s {
        let inc = params.c + params.alpha * v;
        let t = angle + inc;
        comp += if angle.abs() >= inc.abs() { (angle - t) + inc } else { (inc - t) + angle };
        angle = t;
        let a = angle + comp;
        let (sin, cos) = a.sin_cos();
        ps += v * cos;
        qs += v * sin;
        p.push(ps);
        q.push(qs);
        phi.push(a);
    }
    PqTrajectory { p, q, phi, params }
}
