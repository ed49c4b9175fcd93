//! Binary rasters of (p,q)-plane trajectories.

use serde::{Deserialize, Serialize};

use super::{translation_vars, PqParams, PqTrajectory};
use crate::error::{Error, Result};
use crate::signal::{Segment, SEGMENT_LEN};

pub const IMAGE_SIZE: usize = 299;
pub const FEATURE_CHANNELS: usize = 3;
pub const PQI_MAGIC: &[u8; 4] = b"PQI1";

/// Fraction of the trajectory extent added on each side.
const MARGIN: f64 = 0.05;

/// Square single-channel image with values in {0, 1}, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryImage {
    pub size: usize,
    pub pixels: Vec<u8>,
}

impl BinaryImage {
    pub fn blank(size: usize) -> Self {
        BinaryImage {
            size,
            pixels: vec![0; size * size],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.size + col]
    }

    pub fn set(&mut self, row: usize, col: usize) {
        self.pixels[row * self.size + col] = 1;
    }

    pub fn count_set(&self) -> usize {
        self.pixels.iter().filter(|&&v| v != 0).count()
    }

    /// Shrinks to `target` by OR-pooling each source cell that overlaps
    /// a target pixel, so thin strokes survive.
    pub fn downsample(&self, target: usize) -> BinaryImage {
        if target == self.size {
            return self.clone();
        }
        let mut out = BinaryImage::blank(target);
        let (s, t) = (self.size, target);
        for ty in 0..t {
            let (y0, y1) = (ty * s / t, ((ty + 1) * s).div_ceil(t));
            for tx in 0..t {
                let (x0, x1) = (tx * s / t, ((tx + 1) * s).div_ceil(t));
                let hit = (y0..y1).any(|y| self.pixels[y * s + x0..y * s + x1].iter().any(|&v| v != 0));
                if hit {
                    out.set(ty, tx);
                }
            }
        }
        out
    }

    /// Fraction of set pixels under each pixel of a `target` grid, in
    /// levels 0..=255. Unlike [`Self::downsample`] this keeps stroke
    /// density, which OR-pooling saturates.
    pub fn coverage(&self, target: usize) -> Vec<u8> {
        if target == self.size {
            return self.pixels.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
        }
        let (s, t) = (self.size, target);
        let mut out = vec![0u8; t * t];
        for ty in 0..t {
            let (y0, y1) = (ty * s / t, ((ty + 1) * s).div_ceil(t));
            for tx in 0..t {
                let (x0, x1) = (tx * s / t, ((tx + 1) * s).div_ceil(t));
                let set: usize = (y0..y1).map(|y| self.pixels[y * s + x0..y * s + x1].iter().filter(|&&v| v != 0).count()).sum();
                let area = (y1 - y0) * (x1 - x0);
                out[ty * t + tx] = ((255 * set + area / 2) / area) as u8;
            }
        }
        out
    }

    /// Binary PGM (P5), 1 stored as 255.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.size, self.size).into_bytes();
        out.extend(self.pixels.iter().map(|&v| if v != 0 { 255u8 } else { 0 }));
        out
    }
}

/// Affine map from the (p,q) plane to pixel coordinates.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PlaneMap {
    p_mid: f64,
    q_mid: f64,
    scale: f64,
    center: f64,
}

impl PlaneMap {
    pub(crate) fn fit(p: &[f64], q: &[f64], size: usize) -> PlaneMap {
        let bounds = |v: &[f64]| v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
        let (p_lo, p_hi) = bounds(p);
        let (q_lo, q_hi) = bounds(q);
        let span = (p_hi - p_lo).max(q_hi - q_lo);
        let center = (size - 1) as f64 / 2.0;
        let scale = if span > 0.0 {
            (size - 1) as f64 / (span * (1.0 + 2.0 * MARGIN))
        } else {
            0.0
        };
        PlaneMap {
            p_mid: (p_lo + p_hi) / 2.0,
            q_mid: (q_lo + q_hi) / 2.0,
            scale,
            center,
        }
    }

    /// (row, col); q grows upwards.
    pub(crate) fn pixel(&self, p: f64, q: f64) -> (i64, i64) {
        let col = self.center + (p - self.p_mid) * self.scale;
        let row = self.center - (q - self.q_mid) * self.scale;
        (row.round() as i64, col.round() as i64)
    }
}

fn draw_line(img: &mut BinaryImage, (r0, c0): (i64, i64), (r1, c1): (i64, i64)) {
    let (dc, dr) = ((c1 - c0).abs(), -(r1 - r0).abs());
    let (sc, sr) = (if c0 < c1 { 1 } else { -1 }, if r0 < r1 { 1 } else { -1 });
    let (mut c, mut r, mut err) = (c0, r0, dc + dr);
    let n = img.size as i64;
    loop {
        if (0..n).contains(&r) && (0..n).contains(&c) {
            img.set(r as usize, c as usize);
        }
        if c == c1 && r == r1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dr {
            err += dr;
            c += sc;
        }
        if e2 <= dc {
            err += dc;
            r += sr;
        }
    }
}

pub(crate) fn rasterize_sized(traj: &PqTrajectory, size: usize) -> BinaryImage {
    let mut img = BinaryImage::blank(size);
    if traj.is_empty() {
        return img;
    }
    let map = PlaneMap::fit(&traj.p, &traj.q, size);
    let mut prev = map.pixel(traj.p[0], traj.q[0]);
    draw_line(&mut img, prev, prev);
    for (&p, &q) in traj.p.iter().zip(&traj.q).skip(1) {
        let next = map.pixel(p, q);
        draw_line(&mut img, prev, next);
        prev = next;
    }
    img
}

/// Draws the trajectory as a connected polyline on a 299x299 canvas.
///
/// The bounding box of (p,q) gets a 5% margin per side and is mapped with a
/// single scale for both axes, centered. A trajectory with zero extent maps
/// to the center pixel.
pub fn rasterize(traj: &PqTrajectory) -> BinaryImage {
    rasterize_sized(traj, IMAGE_SIZE)
}

/// Where a feature image came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub subject_id: String,
    pub segment_starts: [usize; FEATURE_CHANNELS],
    pub c: [f64; FEATURE_CHANNELS],
}

/// 299x299x3 binary image, stored row-major with channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureImage {
    pixels: Vec<u8>,
    pub provenance: Option<Provenance>,
}

impl FeatureImage {
    pub const WIDTH: usize = IMAGE_SIZE;
    pub const HEIGHT: usize = IMAGE_SIZE;
    pub const CHANNELS: usize = FEATURE_CHANNELS;
    const LEN: usize = IMAGE_SIZE * IMAGE_SIZE * FEATURE_CHANNELS;

    pub fn from_channels(channels: &[BinaryImage; FEATURE_CHANNELS], provenance: Option<Provenance>) -> Result<Self> {
        if channels.iter().any(|c| c.size != IMAGE_SIZE) {
            return Err(Error::shape("chaos01", format!("channels must be {IMAGE_SIZE}x{IMAGE_SIZE}")));
        }
        let mut pixels = vec![0u8; Self::LEN];
        for (ch, img) in channels.iter().enumerate() {
            for (i, &v) in img.pixels.iter().enumerate() {
                pixels[i * FEATURE_CHANNELS + ch] = (v != 0) as u8;
            }
        }
        Ok(FeatureImage { pixels, provenance })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (Self::HEIGHT, Self::WIDTH, Self::CHANNELS)
    }

    /// Interleaved (row, col, channel) bytes.
    pub fn as_bytes(&self) -> &[u8] {
        &self.pixels
    }

    pub fn channel(&self, ch: usize) -> BinaryImage {
        BinaryImage {
            size: IMAGE_SIZE,
            pixels: self.pixels.iter().skip(ch).step_by(FEATURE_CHANNELS).copied().collect(),
        }
    }

    /// `PQI1` dump: magic, width/height/channels as u16 LE, row-major bytes.
    pub fn to_pqi(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(10 + Self::LEN);
        out.extend_from_slice(PQI_MAGIC);
        for d in [Self::WIDTH, Self::HEIGHT, Self::CHANNELS] {
            out.extend_from_slice(&(d as u16).to_le_bytes());
        }
        out.extend_from_slice(&self.pixels);
        out
    }

    /// Parses a `PQI1` dump at the start of `bytes`, returning the image and
    /// bytes consumed. `base` offsets error positions within a larger file.
    pub fn from_pqi(bytes: &[u8], base: u64) -> Result<(Self, usize)> {
        const WHAT: &str = "feature image";
        if bytes.len() < 10 {
            return Err(Error::format(WHAT, base + bytes.len() as u64, "truncated header"));
        }
        if &bytes[..4] != PQI_MAGIC {
            return Err(Error::format(WHAT, base, "bad magic"));
        }
        let dim = |i: usize| u16::from_le_bytes([bytes[4 + 2 * i], bytes[5 + 2 * i]]) as usize;
        let (w, h, c) = (dim(0), dim(1), dim(2));
        if (w, h, c) != (Self::WIDTH, Self::HEIGHT, Self::CHANNELS) {
            return Err(Error::format(WHAT, base + 4, format!("unsupported shape {w}x{h}x{c}")));
        }
        let body = &bytes[10..];
        if body.len() < Self::LEN {
            return Err(Error::format(WHAT, base + bytes.len() as u64, "truncated pixel data"));
        }
        if let Some(i) = body[..Self::LEN].iter().position(|&v| v > 1) {
            return Err(Error::format(WHAT, base + 10 + i as u64, "pixel value is not 0 or 1"));
        }
        Ok((
            FeatureImage {
                pixels: body[..Self::LEN].to_vec(),
                provenance: None,
            },
            10 + Self::LEN,
        ))
    }
}

/// Builds the three-channel feature image from three 1000-point segments;
/// channel i rasterizes the translation variables of segment i.
pub fn featurize(segments: &[Segment], params: &[PqParams; FEATURE_CHANNELS]) -> Result<FeatureImage> {
    let channels = featurize_channels(segments, params, IMAGE_SIZE)?;
    let provenance = Provenance {
        subject_id: segments[0].subject_id.clone(),
        segment_starts: std::array::from_fn(|i| segments[i].start_index),
        c: std::array::from_fn(|i| params[i].c),
    };
    FeatureImage::from_channels(&channels, Some(provenance))
}

pub(crate) fn featurize_channels(
    segments: &[Segment],
    params: &[PqParams; FEATURE_CHANNELS],
    size: usize,
) -> Result<[BinaryImage; FEATURE_CHANNELS]> {
    if segments.len() != FEATURE_CHANNELS {
        return Err(Error::shape(
            "chaos01",
            format!("featurize needs {FEATURE_CHANNELS} segments, got {}", segments.len()),
        ));
    }
    if let Some(s) = segments.iter().find(|s| s.samples.len() != SEGMENT_LEN) {
        return Err(Error::shape(
            "chaos01",
            format!("segment has {} samples, expected {SEGMENT_LEN}", s.samples.len()),
        ));
    }
    let mut out = Vec::with_capacity(FEATURE_CHANNELS);
    for (seg, p) in segments.iter().zip(params) {
        let traj = translation_vars(&seg.samples, *p)?;
        out.push(rasterize_sized(&traj, size));
    }
    Ok(out.try_into().expect("three channels"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(p: Vec<f64>, q: Vec<f64>) -> PqTrajectory {
        let phi = vec![0.0; p.len()];
        PqTrajectory {
            p,
            q,
            phi,
            params: PqParams::default(),
        }
    }

    #[test]
    fn constant_trajectory_is_center_pixel() {
        let img = rasterize(&traj(vec![3.0; 20], vec![-1.0; 20]));
        assert_eq!(img.count_set(), 1);
        assert_eq!(img.get(149, 149), 1);
    }

    /// Brute-force oracle: map endpoints through the affine transform by
    /// hand and enumerate the expected diagonal.
    #[test]
    fn diagonal_is_a_monotone_staircase() {
        let n = 500;
        let v: Vec<f64> = (1..=n).map(|k| k as f64).collect();
        let img = rasterize(&traj(v.clone(), v));
        let span = (n - 1) as f64;
        let scale = 298.0 / (span * 1.1);
        let mid = (1.0 + n as f64) / 2.0;
        let col0 = (149.0 + (1.0 - mid) * scale).round() as usize;
        let col1 = (149.0 + (n as f64 - mid) * scale).round() as usize;
        let row0 = (149.0 - (1.0 - mid) * scale).round() as usize;
        assert_eq!(col1 - col0, row0 - (298 - col1));
        let mut expected = BinaryImage::blank(IMAGE_SIZE);
        for k in 0..=(col1 - col0) {
            expected.set(row0 - k, col0 + k);
        }
        assert_eq!(img, expected);
        // corners: bottom-left region to top-right region
        assert!(col0 < 30 && row0 > 268);
    }

    #[test]
    fn output_is_binary_and_non_empty() {
        let s: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.05).sin() + 0.3).collect();
        let t = translation_vars(&s, PqParams::default()).unwrap();
        let img = rasterize(&t);
        assert!(img.pixels.iter().all(|&v| v <= 1));
        assert!(img.count_set() > 1);
    }

    #[test]
    fn downsample_keeps_strokes() {
        let mut img = BinaryImage::blank(IMAGE_SIZE);
        for c in 0..IMAGE_SIZE {
            img.set(150, c);
        }
        img.set(0, 0);
        let small = img.downsample(128);
        assert_eq!(small.get(0, 0), 1);
        let row: usize = (0..128).filter(|&r| small.get(r, 60) == 1).count();
        assert!(row >= 1 && small.count_set() >= 129);
        assert_eq!(BinaryImage::blank(IMAGE_SIZE).downsample(16).count_set(), 0);
    }

    #[test]
    fn coverage_is_cell_density() {
        let mut img = BinaryImage::blank(4);
        img.set(0, 0);
        img.set(0, 1);
        img.set(3, 3);
        assert_eq!(img.coverage(2), vec![128, 0, 0, 64]);
        assert_eq!(img.coverage(4)[..2], [255, 255]);
        assert!(BinaryImage::blank(IMAGE_SIZE).coverage(128).iter().all(|&v| v == 0));
    }

    fn segs(f: impl Fn(usize) -> f64) -> Vec<Segment> {
        (0..3)
            .map(|k| Segment {
                subject_id: "x".into(),
                start_index: k * 1000,
                samples: (0..1000).map(|i| f(k * 1000 + i)).collect(),
            })
            .collect()
    }

    #[test]
    fn featurize_shapes_and_degenerate_case() {
        let params = [PqParams::default(); 3];
        let img = featurize(&segs(|_| 0.0), &params).unwrap();
        assert_eq!(img.shape(), (299, 299, 3));
        for ch in 0..3 {
            let c = img.channel(ch);
            assert_eq!(c.count_set(), 1);
            assert_eq!(c.get(149, 149), 1);
        }
        assert_eq!(img.provenance.as_ref().unwrap().segment_starts, [0, 1000, 2000]);

        let same: Vec<Segment> = segs(|i| ((i % 1000) as f64 * 0.02).sin());
        let img = featurize(&same, &params).unwrap();
        assert_eq!(img.channel(0), img.channel(1));
        assert_eq!(img.channel(1), img.channel(2));
    }

    #[test]
    fn featurize_rejects_bad_shapes() {
        let params = [PqParams::default(); 3];
        let mut s = segs(|i| i as f64);
        assert!(featurize(&s[..2], &params).is_err());
        s[1].samples.pop();
        assert!(matches!(featurize(&s, &params), Err(Error::Shape { .. })));
    }

    #[test]
    fn pqi_round_trip_and_errors() {
        let params = [PqParams::new(1.1), PqParams::new(1.7), PqParams::new(2.2)];
        let img = featurize(&segs(|i| (i as f64 * 0.01).cos()), &params).unwrap();
        let bytes = img.to_pqi();
        assert_eq!(bytes.len(), 10 + 299 * 299 * 3);
        assert_eq!(&bytes[4..10], &[43, 1, 43, 1, 3, 0]);
        let (back, used) = FeatureImage::from_pqi(&bytes, 0).unwrap();
        assert_eq!(used, bytes.len());
        assert_eq!(back.as_bytes(), img.as_bytes());
        assert!(FeatureImage::from_pqi(&bytes[..100], 0).is_err());
        let mut bad = bytes.clone();
        bad[20] = 7;
        match FeatureImage::from_pqi(&bad, 5) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 25),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn pgm_header() {
        let img = BinaryImage::blank(4);
        let pgm = img.to_pgm();
        assert!(pgm.starts_with(b"P5\n4 4\n255\n"));
        assert_eq!(pgm.len(), 11 + 16);
    }
}
