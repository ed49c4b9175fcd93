//! The deployable model: 32-bit network, metadata, file format and hash.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::data::image_input;
use super::model::{chw_to_hwc, hwc_to_batch, ModelConfig, SiameseNet};
use super::tensor::Tensor;
use crate::chaos01::FeatureImage;
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"SNM1";
pub const MODEL_VERSION: u16 = 1;

/// Information carried with a model but not covered by its version hash.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    /// Equal-error working point measured on validation pairs.
    pub eer_threshold: Option<f64>,
    /// Run configuration that produced the model.
    pub run_config: Option<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    #[serde(flatten)]
    meta: ModelMeta,
}

/// Siamese network with one shared weight set.
pub struct SiameseModel {
    pub net: SiameseNet<f32>,
    pub meta: ModelMeta,
}

/// Builds a freshly initialized model.
pub fn build_model(config: &ModelConfig) -> Result<SiameseModel> {
    Ok(SiameseModel {
        net: SiameseNet::build(config)?,
        meta: ModelMeta::default(),
    })
}

impl SiameseModel {
    pub fn config(&self) -> &ModelConfig {
        self.net.config()
    }

    /// Inference-mode embedding of one `[hw, hw, 3]` image, returned as
    /// `[h, w, c]`.
    pub fn embed(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        let x = hwc_to_batch(image)?;
        Ok(chw_to_hwc(&self.net.encode(&x)?))
    }

    /// Similarity of two `[hw, hw, 3]` images, in `[0, 1]`.
    pub fn score(&self, a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
        Ok(self.net.score_batch(&hwc_to_batch(a)?, &hwc_to_batch(b)?)?[0])
    }

    /// Network input for a feature image at this model's resolution.
    pub fn input_for(&self, image: &FeatureImage) -> Tensor<f32> {
        image_input(image, self.config().input_hw)
    }

    pub fn score_images(&self, a: &FeatureImage, b: &FeatureImage) -> Result<f64> {
        self.score(&self.input_for(a), &self.input_for(b))
    }

    fn weight_records(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let params = self.net.params();
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for (name, p) in params {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let shape = p.value.shape();
            out.push(shape.len() as u8);
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    fn digest(config: &ModelConfig, records: &[u8]) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(config).expect("config serializes"));
        h.update(records);
        h.finalize().into()
    }

    /// SHA-256 over the canonical config JSON and every weight record.
    pub fn version_hash(&self) -> [u8; 32] {
        Self::digest(self.config(), &self.weight_records())
    }

    pub fn version_hex(&self) -> String {
        hex(&self.version_hash())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&Header {
            model: self.config().clone(),
            meta: self.meta.clone(),
        })
        .expect("header serializes");
        let records = self.weight_records();
        let mut out = Vec::with_capacity(10 + header.len() + records.len() + 32);
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&records);
        out.extend_from_slice(&Self::digest(self.config(), &records));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const WHAT: &str = "model file";
        let mut r = Reader { bytes, pos: 0, what: WHAT };
        if r.take(4)? != MODEL_MAGIC {
            return Err(Error::format(WHAT, 0, "bad magic"));
        }
        let version = r.u16()?;
        if version != MODEL_VERSION {
            return Err(Error::format(WHAT, 4, format!("unsupported version {version}")));
        }
        let hlen = r.u32()? as usize;
        let hpos = r.pos;
        let header: Header = serde_json::from_slice(r.take(hlen)?)
            .map_err(|e| Error::format(WHAT, hpos as u64, format!("bad header: {e}")))?;
        let mut net = SiameseNet::<f32>::build(&header.model).map_err(|e| Error::format(WHAT, hpos as u64, e.to_string()))?;

        let records_start = r.pos;
        let count = r.u32()? as usize;
        let mut params = net.params_mut();
        if count != params.len() {
            return Err(Error::format(
                WHAT,
                records_start as u64,
                format!("{count} weight records, model has {}", params.len()),
            ));
        }
        for (name, p) in params.iter_mut() {
            let at = r.pos as u64;
            let nlen = r.u16()? as usize;
            let got = std::str::from_utf8(r.take(nlen)?).map_err(|_| Error::format(WHAT, at, "weight name is not UTF-8"))?;
            if got != name {
                return Err(Error::format(WHAT, at, format!("expected weight {name:?}, found {got:?}")));
            }
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            if shape != p.value.shape() {
                return Err(Error::format(WHAT, at, format!("weight {name} has shape {shape:?}, expected {:?}", p.value.shape())));
            }
            let data = r.take(4 * p.value.len())?;
            for (dst, chunk) in p.value.data_mut().iter_mut().zip(data.chunks_exact(4)) {
                *dst = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            }
        }
        drop(params);
        let records_end = r.pos;
        let stored = r.take(32)?;
        if r.pos != bytes.len() {
            return Err(Error::format(WHAT, r.pos as u64, "trailing bytes"));
        }
        let want = Self::digest(&header.model, &bytes[records_start..records_end]);
        if stored != want {
            return Err(Error::format(WHAT, records_end as u64, "version hash does not match contents"));
        }
        Ok(SiameseModel { net, meta: header.meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::store::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
    pub what: &'static str,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.what, self.bytes.len() as u64, "unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SiameseModel {
        build_model(&ModelConfig::tiny().with_seed(4)).unwrap()
    }

    fn image(seed: u32) -> Tensor<f32> {
        let data = (0..16 * 16 * 3).map(|i| (((i as u32).wrapping_mul(2654435761) ^ seed) >> 31) as f32).collect();
        Tensor::from_vec(&[16, 16, 3], data)
    }

    #[test]
    fn round_trip_is_exact() {
        let mut m = tiny();
        m.meta.eer_threshold = Some(0.42);
        m.meta.run_config = Some(serde_json::json!({"seed": 1}));
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..4], MODEL_MAGIC);
        let back = SiameseModel::from_bytes(&bytes).unwrap();
        assert_eq!(back.meta, m.meta);
        assert_eq!(back.version_hash(), m.version_hash());
        assert_eq!(back.to_bytes(), bytes);
        let (a, b) = (image(1), image(2));
        assert_eq!(back.score(&a, &b).unwrap(), m.score(&a, &b).unwrap());
    }

    #[test]
    fn hash_ignores_metadata_but_not_weights() {
        let mut m = tiny();
        let h0 = m.version_hash();
        m.meta.eer_threshold = Some(0.1);
        assert_eq!(m.version_hash(), h0);
        m.net.params_mut()[0].1.value.data_mut()[0] += 1.0;
        assert_ne!(m.version_hash(), h0);
        assert_ne!(tiny().version_hash(), build_model(&ModelConfig::tiny().with_seed(5)).unwrap().version_hash());
    }

    #[test]
    fn corrupt_files_rejected() {
        let bytes = tiny().to_bytes();
        for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(SiameseModel::from_bytes(&bytes[..cut]), Err(Error::Format { .. })), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        let n = flipped.len();
        flipped[n - 40] ^= 1;
        assert!(matches!(SiameseModel::from_bytes(&flipped), Err(Error::Format { .. })));
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(SiameseModel::from_bytes(&magic).is_err());
    }

    #[test]
    fn embed_and_score_contracts() {
        let m = tiny();
        let a = image(7);
        assert_eq!(m.embed(&a).unwrap().shape(), &[3, 3, 17]);
        assert_eq!(m.embed(&a).unwrap(), m.embed(&a).unwrap());
        let zero = Tensor::zeros(&[16, 16, 3]);
        assert!(m.embed(&zero).unwrap().all_finite());
        let bias = m.net.params().last().unwrap().1.value.data()[0] as f64;
        assert!((m.score(&a, &a).unwrap() - crate::net::sigmoid(bias)).abs() < 1e-12);
        assert!(m.embed(&Tensor::zeros(&[8, 8, 3])).is_err());
    }
}
