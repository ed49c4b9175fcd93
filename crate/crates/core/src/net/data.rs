//! Featurized segment banks, random pair batches and dataset splits.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::INPUT_CHANNELS;
use super::tensor::Tensor;
use crate::chaos01::{rasterize, translation_vars, FeatureImage, PqParams, FEATURE_CHANNELS};
use crate::error::{Error, Result};
use crate::signal::Segment;

/// Rasterizes one segment at full image size and pools its coverage to
/// `hw`, the same path a [`FeatureImage`] channel takes into the network.
fn segment_plane(segment: &Segment, params: PqParams, hw: usize) -> Result<Vec<u8>> {
    let traj = translation_vars(&segment.samples, params)?;
    Ok(rasterize(&traj).coverage(hw))
}

/// HWC `[hw, hw, 3]` network input of a feature image: per-pixel stroke
/// coverage in [0, 1] at the network resolution.
pub fn image_input(image: &FeatureImage, hw: usize) -> Tensor<f32> {
    let planes: Vec<Vec<u8>> = (0..FEATURE_CHANNELS).map(|ch| image.channel(ch).coverage(hw)).collect();
    let mut data = vec![0f32; hw * hw * FEATURE_CHANNELS];
    for (ch, plane) in planes.iter().enumerate() {
        for (i, &v) in plane.iter().enumerate() {
            data[i * FEATURE_CHANNELS + ch] = v as f32 / 255.0;
        }
    }
    Tensor::from_vec(&[hw, hw, FEATURE_CHANNELS], data)
}

/// One subject's segments, rasterized at network resolution.
#[derive(Debug, Clone)]
pub struct SubjectBank {
    pub subject_id: String,
    pub starts: Vec<usize>,
    /// `planes[segment][variant]`, `hw * hw` coverage levels each.
    planes: Vec<Vec<Vec<u8>>>,
}

impl SubjectBank {
    pub fn len(&self) -> usize {
        self.planes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.planes.is_empty()
    }
}

/// Segments of every subject, featurized once for pair generation.
///
/// Channel `ch` of a pair side is segment `ch` of its three draws,
/// rasterized with the channel's c. Distinct c values are rasterized once
/// each.
#[derive(Debug, Clone)]
pub struct FeatureBank {
    pub input_hw: usize,
    pub params: [PqParams; FEATURE_CHANNELS],
    variant: [usize; FEATURE_CHANNELS],
    pub subjects: Vec<SubjectBank>,
}

impl FeatureBank {
    pub fn build(subjects: &[Vec<Segment>], params: [PqParams; FEATURE_CHANNELS], input_hw: usize) -> Result<Self> {
        let mut distinct: Vec<PqParams> = Vec::new();
        let variant = params.map(|p| match distinct.iter().position(|d| *d == p) {
            Some(i) => i,
            None => {
                distinct.push(p);
                distinct.len() - 1
            }
        });
        let mut banks = Vec::with_capacity(subjects.len());
        for segs in subjects {
            let Some(first) = segs.first() else {
                return Err(Error::insufficient("net", "subject without segments"));
            };
            let planes = segs
                .iter()
                .map(|s| distinct.iter().map(|&p| segment_plane(s, p, input_hw)).collect::<Result<Vec<_>>>())
                .collect::<Result<Vec<_>>>()?;
            banks.push(SubjectBank {
                subject_id: first.subject_id.clone(),
                starts: segs.iter().map(|s| s.start_index).collect(),
                planes,
            });
        }
        Ok(FeatureBank {
            input_hw,
            params,
            variant,
            subjects: banks,
        })
    }

    /// Keeps the listed segments of the listed subjects.
    pub fn subset(&self, part: &[SubsetEntry]) -> FeatureBank {
        let subjects = part
            .iter()
            .map(|e| {
                let s = &self.subjects[e.subject];
                SubjectBank {
                    subject_id: s.subject_id.clone(),
                    starts: e.segments.iter().map(|&k| s.starts[k]).collect(),
                    planes: e.segments.iter().map(|&k| s.planes[k].clone()).collect(),
                }
            })
            .collect();
        FeatureBank {
            input_hw: self.input_hw,
            params: self.params,
            variant: self.variant,
            subjects,
        }
    }

    /// One composed image as a `[1, 3, hw, hw]` batch.
    pub fn image(&self, subject: usize, segs: [usize; FEATURE_CHANNELS]) -> Tensor<f32> {
        let hw = self.input_hw;
        let mut data = vec![0f32; INPUT_CHANNELS * hw * hw];
        self.compose(subject, segs, &mut data);
        Tensor::from_vec(&[1, INPUT_CHANNELS, hw, hw], data)
    }

    /// Writes the CHW image of one pair side into `out`.
    fn compose(&self, subject: usize, segs: [usize; FEATURE_CHANNELS], out: &mut [f32]) {
        let plane = self.input_hw * self.input_hw;
        let s = &self.subjects[subject];
        for ch in 0..FEATURE_CHANNELS {
            let src = &s.planes[segs[ch]][self.variant[ch]];
            for (d, &v) in out[ch * plane..(ch + 1) * plane].iter_mut().zip(src) {
                *d = v as f32 / 255.0;
            }
        }
    }

    fn check_pairable(&self) -> Result<()> {
        if self.subjects.len() < 2 {
            return Err(Error::insufficient("net", "pair generation needs at least 2 subjects"));
        }
        if let Some(s) = self.subjects.iter().find(|s| s.len() < FEATURE_CHANNELS) {
            return Err(Error::insufficient(
                "net",
                format!("subject {} has {} segments, pairs need {FEATURE_CHANNELS}", s.subject_id, s.len()),
            ));
        }
        Ok(())
    }
}

/// A batch of image pairs in NCHW layout with labels (1 = same subject).
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub images_a: Tensor<f32>,
    pub images_b: Tensor<f32>,
    pub labels: Vec<f64>,
    /// `(subject_a, subject_b)` indices into the bank.
    pub subjects: Vec<(usize, usize)>,
}

/// Seeded stream of pair batches. Labels alternate positive/negative so
/// the stream is balanced 50/50.
pub struct PairGenerator<'a> {
    bank: &'a FeatureBank,
    rng: ChaCha8Rng,
    produced: u64,
}

pub fn pair_generator(bank: &FeatureBank, seed: u64) -> Result<PairGenerator<'_>> {
    bank.check_pairable()?;
    Ok(PairGenerator {
        bank,
        rng: ChaCha8Rng::seed_from_u64(seed),
        produced: 0,
    })
}

impl PairGenerator<'_> {
    fn draw_side(&mut self, subject: usize) -> [usize; FEATURE_CHANNELS] {
        let n = self.bank.subjects[subject].len();
        let picks = rand::seq::index::sample(&mut self.rng, n, FEATURE_CHANNELS);
        std::array::from_fn(|i| picks.index(i))
    }

    pub fn next_batch(&mut self, batch: usize) -> PairBatch {
        let hw = self.bank.input_hw;
        let per = INPUT_CHANNELS * hw * hw;
        let mut a = vec![0f32; batch * per];
        let mut b = vec![0f32; batch * per];
        let mut labels = Vec::with_capacity(batch);
        let mut subjects = Vec::with_capacity(batch);
        let n = self.bank.subjects.len();
        for i in 0..batch {
            let positive = self.produced % 2 == 0;
            self.produced += 1;
            let sa = self.rng.random_range(0..n);
            let sb = if positive {
                sa
            } else {
                (sa + self.rng.random_range(1..n)) % n
            };
            let (ia, ib) = (self.draw_side(sa), self.draw_side(sb));
            self.bank.compose(sa, ia, &mut a[i * per..(i + 1) * per]);
            self.bank.compose(sb, ib, &mut b[i * per..(i + 1) * per]);
            labels.push(if positive { 1.0 } else { 0.0 });
            subjects.push((sa, sb));
        }
        let shape = [batch, INPUT_CHANNELS, hw, hw];
        PairBatch {
            images_a: Tensor::from_vec(&shape, a),
            images_b: Tensor::from_vec(&shape, b),
            labels,
            subjects,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    /// Disjoint subjects on each side.
    UserDisjoint,
    /// Every subject on each side, disjoint segments.
    DataDisjoint,
}

impl std::str::FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "user-disjoint" => Ok(SplitMode::UserDisjoint),
            "data-disjoint" => Ok(SplitMode::DataDisjoint),
            _ => Err(Error::param("net", format!("unknown split mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

/// Segments `segments` of subject `subject`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubsetEntry {
    pub subject: usize,
    pub segments: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub train: Vec<SubsetEntry>,
    pub val: Vec<SubsetEntry>,
    pub test: Vec<SubsetEntry>,
}

impl Partition {
    /// Validation and test together.
    pub fn held_out(&self) -> Vec<SubsetEntry> {
        let mut out = self.val.clone();
        for e in &self.test {
            match out.iter_mut().find(|o| o.subject == e.subject) {
                Some(o) => o.segments.extend(&e.segments),
                None => out.push(e.clone()),
            }
        }
        out
    }
}

fn cut(n: usize, f: &SplitFractions) -> (usize, usize) {
    let train = (n as f64 * f.train).round() as usize;
    let val = (n as f64 * f.val).round() as usize;
    (train.min(n), val.min(n - train.min(n)))
}

/// Partitions subjects (user-disjoint) or each subject's segments
/// (data-disjoint) into train / validation / test. Counts are rounded
/// from the fractions, test takes the remainder.
pub fn split_data(segment_counts: &[usize], mode: SplitMode, fractions: SplitFractions, seed: u64) -> Result<Partition> {
    let groups: Vec<Vec<usize>> = segment_counts.iter().map(|&n| (0..n).collect()).collect();
    split_grouped(&groups, mode, fractions, seed)
}

/// As [`split_data`], but data-disjoint splits keep segments that share a
/// group label (a recording session) on the same side. `groups[s][k]` is
/// the label of segment `k` of subject `s`. Subjects with fewer than three
/// groups fall back to splitting individual segments.
pub fn split_grouped(groups: &[Vec<usize>], mode: SplitMode, fractions: SplitFractions, seed: u64) -> Result<Partition> {
    let f = fractions;
    if [f.train, f.val, f.test].iter().any(|v| !v.is_finite() || *v < 0.0) || (f.train + f.val + f.test - 1.0).abs() > 1e-9 {
        return Err(Error::param("net", "split fractions must be non-negative and sum to 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let part = match mode {
        SplitMode::UserDisjoint => {
            let mut order: Vec<usize> = (0..groups.len()).collect();
            order.shuffle(&mut rng);
            let (nt, nv) = cut(order.len(), &f);
            let entries = |ids: &[usize]| -> Vec<SubsetEntry> {
                let mut ids = ids.to_vec();
                ids.sort_unstable();
                ids.into_iter()
                    .map(|s| SubsetEntry {
                        subject: s,
                        segments: (0..groups[s].len()).collect(),
                    })
                    .collect()
            };
            Partition {
                train: entries(&order[..nt]),
                val: entries(&order[nt..nt + nv]),
                test: entries(&order[nt + nv..]),
            }
        }
        SplitMode::DataDisjoint => {
            let mut p = Partition {
                train: Vec::new(),
                val: Vec::new(),
                test: Vec::new(),
            };
            for (s, labels) in groups.iter().enumerate() {
                let mut distinct: Vec<usize> = Vec::new();
                for &g in labels {
                    if !distinct.contains(&g) {
                        distinct.push(g);
                    }
                }
                let members: Vec<Vec<usize>> = if distinct.len() >= 3 {
                    distinct.iter().map(|&g| (0..labels.len()).filter(|&k| labels[k] == g).collect()).collect()
                } else {
                    (0..labels.len()).map(|k| vec![k]).collect()
                };
                let mut order: Vec<usize> = (0..members.len()).collect();
                order.shuffle(&mut rng);
                let (nt, nv) = cut(members.len(), &f);
                let push = |dst: &mut Vec<SubsetEntry>, picked: &[usize]| {
                    let mut segments: Vec<usize> = picked.iter().flat_map(|&g| members[g].iter().copied()).collect();
                    segments.sort_unstable();
                    dst.push(SubsetEntry { subject: s, segments });
                };
                push(&mut p.train, &order[..nt]);
                push(&mut p.val, &order[nt..nt + nv]);
                push(&mut p.test, &order[nt + nv..]);
            }
            p
        }
    };
    for (name, side) in [("train", &part.train), ("validation", &part.val), ("test", &part.test)] {
        if side.is_empty() || side.iter().any(|e| e.segments.is_empty()) {
            return Err(Error::param("net", format!("{name} partition is empty")));
        }
    }
    Ok(part)
}

/// Fixed balanced pair set, e.g. for validation: `count` pairs drawn from
/// a generator seeded with `seed`, split into batches of `batch`.
pub fn fixed_pairs(bank: &FeatureBank, count: usize, batch: usize, seed: u64) -> Result<Vec<PairBatch>> {
    let mut gen = pair_generator(bank, seed)?;
    let mut out = Vec::new();
    let mut left = count;
    while left > 0 {
        let n = left.min(batch);
        out.push(gen.next_batch(n));
        left -= n;
    }
    Ok(out)
}
