//! Enrollment, verification and identification over template files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::chaos01::{featurize, FeatureImage, PqParams, Provenance, FEATURE_CHANNELS};
use crate::error::{Error, Result};
use crate::eval;
use crate::net::artifact::{hex, Reader, SiameseModel};
use crate::signal::{preprocess, segment, PpgRecord, PreprocessMode, SegmentStrategy, CAPTURE_LEN, SEGMENT_LEN};

pub const TEMPLATE_MAGIC: &[u8; 4] = b"PQT1";
pub const TEMPLATE_VERSION: u16 = 1;
pub const TEMPLATE_EXT: &str = "pqt";

/// How a capture becomes a feature image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Featurizer {
    pub mode: PreprocessMode,
    pub c: [f64; FEATURE_CHANNELS],
}

impl Featurizer {
    /// Preprocesses the record, cuts three consecutive segments from its
    /// start and rasterizes them.
    pub fn capture_image(&self, record: &PpgRecord) -> Result<FeatureImage> {
        if record.len() < CAPTURE_LEN {
            return Err(Error::insufficient(
                "store",
                format!("a capture needs {CAPTURE_LEN} samples, record has {}", record.len()),
            ));
        }
        let clean = preprocess(record, self.mode)?;
        let segs = segment(&clean, SegmentStrategy::Consecutive)?;
        let params = self.c.map(PqParams::new);
        featurize(&segs[..FEATURE_CHANNELS], &params)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiometricTemplate {
    pub subject_id: String,
    /// UTC seconds.
    pub created_at: u64,
    pub featurizer: Featurizer,
    pub feature_image: FeatureImage,
    pub model_version_hash: [u8; 32],
}

impl BiometricTemplate {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(TEMPLATE_MAGIC);
        out.extend_from_slice(&TEMPLATE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.subject_id.len() as u16).to_le_bytes());
        out.extend_from_slice(self.subject_id.as_bytes());
        out.extend_from_slice(&self.created_at.to_le_bytes());
        out.push(self.featurizer.mode.code());
        out.push(FEATURE_CHANNELS as u8);
        for c in self.featurizer.c {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out.extend_from_slice(&self.feature_image.to_pqi());
        out.extend_from_slice(&self.model_version_hash);
        out
    }

    /// Parses a template; segment provenance is restored as the three
    /// consecutive windows every enrollment uses.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const WHAT: &str = "template";
        let mut r = Reader { bytes, pos: 0, what: WHAT };
        if r.take(4)? != TEMPLATE_MAGIC {
            return Err(Error::format(WHAT, 0, "bad magic"));
        }
        let version = r.u16()?;
        if version != TEMPLATE_VERSION {
            return Err(Error::format(WHAT, 4, format!("unsupported version {version}")));
        }
        let id_at = r.pos as u64;
        let n = r.u16()? as usize;
        let subject_id = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::format(WHAT, id_at, "subject id is not UTF-8"))?;
        let created_at = r.u64()?;
        let mode_at = r.pos as u64;
        let mode = PreprocessMode::from_code(r.take(1)?[0]).ok_or_else(|| Error::format(WHAT, mode_at, "unknown preprocess mode"))?;
        let ch_at = r.pos as u64;
        let channels = r.take(1)?[0] as usize;
        if channels != FEATURE_CHANNELS {
            return Err(Error::format(WHAT, ch_at, format!("expected {FEATURE_CHANNELS} channels, found {channels}")));
        }
        let mut c = [0.0; FEATURE_CHANNELS];
        for v in &mut c {
            *v = r.f64()?;
        }
        let (mut feature_image, used) = FeatureImage::from_pqi(&bytes[r.pos..], r.pos as u64)?;
        r.pos += used;
        let hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        if r.pos != bytes.len() {
            return Err(Error::format(WHAT, r.pos as u64, "trailing bytes"));
        }
        feature_image.provenance = Some(Provenance {
            subject_id: subject_id.clone(),
            segment_starts: std::array::from_fn(|i| i * SEGMENT_LEN),
            c,
        });
        Ok(BiometricTemplate {
            subject_id,
            created_at,
            featurizer: Featurizer { mode, c },
            feature_image,
            model_version_hash: hash,
        })
    }
}

/// Writes through a temporary file in the same directory and renames it
/// into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    use std::io::Write;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| Error::param("store", format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let mut f = std::fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    drop(f);
    std::fs::rename(&tmp, path).inspect_err(|_| {
        let _ = std::fs::remove_file(&tmp);
    })?;
    Ok(())
}

pub fn save_template(path: &Path, template: &BiometricTemplate) -> Result<()> {
    write_atomic(path, &template.to_bytes())
}

pub fn load_template(path: &Path) -> Result<BiometricTemplate> {
    BiometricTemplate::from_bytes(&std::fs::read(path)?)
}

/// Percent-encodes everything except ASCII letters, digits, `-` and `_`.
pub fn encode_id(id: &str) -> String {
    let mut out = String::with_capacity(id.len());
    for b in id.bytes() {
        if b.is_ascii_alphanumeric() || b == b'-' || b == b'_' {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

/// A directory holding one template file per subject.
#[derive(Debug, Clone)]
pub struct TemplateStore {
    dir: PathBuf,
}

impl TemplateStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(TemplateStore { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, subject_id: &str) -> PathBuf {
        self.dir.join(format!("{}.{TEMPLATE_EXT}", encode_id(subject_id)))
    }

    pub fn contains(&self, subject_id: &str) -> bool {
        self.path_for(subject_id).is_file()
    }

    pub fn load(&self, subject_id: &str) -> Result<BiometricTemplate> {
        let path = self.path_for(subject_id);
        if !path.is_file() {
            return Err(Error::NotEnrolled(subject_id.to_string()));
        }
        load_template(&path)
    }

    pub fn save(&self, template: &BiometricTemplate) -> Result<()> {
        save_template(&self.path_for(&template.subject_id), template)
    }

    /// Every template, ordered by subject id.
    pub fn list(&self) -> Result<Vec<BiometricTemplate>> {
        let mut out = Vec::new();
        for entry in std::fs::read_dir(&self.dir)? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == TEMPLATE_EXT) {
                out.push(load_template(&path)?);
            }
        }
        out.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
        Ok(out)
    }
}

fn check_version(template: &BiometricTemplate, model: &SiameseModel) -> Result<()> {
    let h = model.version_hash();
    if template.model_version_hash != h {
        return Err(Error::Version {
            template: hex(&template.model_version_hash),
            model: hex(&h),
        });
    }
    Ok(())
}

/// Featurizes a 12 s capture and persists it as `subject_id`'s template.
pub fn enroll(
    store: &TemplateStore,
    subject_id: &str,
    record: &PpgRecord,
    model: &SiameseModel,
    featurizer: Featurizer,
    overwrite: bool,
    created_at: u64,
) -> Result<BiometricTemplate> {
    if subject_id.is_empty() || subject_id.len() > u16::MAX as usize {
        return Err(Error::param("store", "subject id must be 1 to 65535 bytes"));
    }
    let mut feature_image = featurizer.capture_image(record)?;
    if let Some(p) = feature_image.provenance.as_mut() {
        p.subject_id = subject_id.to_string();
    }
    if !overwrite && store.contains(subject_id) {
        return Err(Error::Conflict(subject_id.to_string()));
    }
    let t = BiometricTemplate {
        subject_id: subject_id.to_string(),
        created_at,
        featurizer,
        feature_image,
        model_version_hash: model.version_hash(),
    };
    store.save(&t)?;
    Ok(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Accept,
    Reject,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifyResult {
    pub score: f64,
    pub threshold: f64,
    pub decision: Decision,
}

/// Featurizes the probe with the template's parameters and scores it
/// against the template.
pub fn score_against(template: &BiometricTemplate, record: &PpgRecord, model: &SiameseModel) -> Result<f64> {
    check_version(template, model)?;
    let probe = template.featurizer.capture_image(record)?;
    let (pt, pp) = (template.feature_image.provenance.as_ref(), probe.provenance.as_ref());
    if pt.map(|p| (p.segment_starts, p.c)) != pp.map(|p| (p.segment_starts, p.c)) {
        return Err(Error::param("store", "probe featurization differs from the template's"));
    }
    model.score_images(&template.feature_image, &probe)
}

/// Decides a claim; `threshold` defaults to the model's stored working
/// point.
pub fn verify(
    store: &TemplateStore,
    claimed_id: &str,
    record: &PpgRecord,
    model: &SiameseModel,
    threshold: Option<f64>,
) -> Result<VerifyResult> {
    let template = store.load(claimed_id)?;
    let threshold = threshold
        .or(model.meta.eer_threshold)
        .ok_or_else(|| Error::param("store", "model has no stored threshold; pass one explicitly"))?;
    let score = score_against(&template, record, model)?;
    Ok(VerifyResult {
        score,
        threshold,
        decision: if score >= threshold { Decision::Accept } else { Decision::Reject },
    })
}

/// Scores a capture against every template: highest first, ties by id.
pub fn identify(store: &TemplateStore, record: &PpgRecord, model: &SiameseModel) -> Result<Vec<(String, f64)>> {
    let templates = store.list()?;
    if templates.is_empty() {
        return Err(Error::param("store", "no templates enrolled"));
    }
    let mut out = templates
        .iter()
        .map(|t| Ok((t.subject_id.clone(), score_against(t, record, model)?)))
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(out)
}

/// Rank-1 accuracy of labeled probe captures against every enrolled
/// template.
pub fn rank1(store: &TemplateStore, probes: &[PpgRecord], model: &SiameseModel) -> Result<f64> {
    let templates = store.list()?;
    let gallery: Vec<String> = templates.iter().map(|t| t.subject_id.clone()).collect();
    let scores = probes
        .iter()
        .map(|p| templates.iter().map(|t| score_against(t, p, model)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<String> = probes.iter().map(|p| p.subject_id.clone()).collect();
    eval::rank1(&scores, &gallery, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{artifact::build_model, ModelConfig};
    use crate::signal::{default_registry, synth_ppg};

    fn feat() -> Featurizer {
        Featurizer {
            mode: PreprocessMode::Band05_8Norm,
            c: [1.7; 3],
        }
    }

    fn model() -> SiameseModel {
        let mut m = build_model(&ModelConfig::tiny()).unwrap();
        m.meta.eer_threshold = Some(0.5);
        m
    }

    #[test]
    fn enroll_round_trip_and_conflicts() {
        let dir = tempfile::tempdir().unwrap();
        let store = TemplateStore::open(dir.path()).unwrap();
        let m = model();
        let rec = synth_ppg(&default_registry()[0], 12.0, 3).unwrap();
        let t = enroll(&store, "S01", &rec, &m, feat(), false, 17).unwrap();
        assert_eq!(t.feature_image.shape(), (299, 299, 3));
        assert_eq!(t.feature_image.provenance.as_ref().unwrap().segment_starts, [0, 1000, 2000]);
        let back = store.load("S01").unwrap();
        assert_eq!(back, t);
        assert_eq!(back.feature_image.as_bytes(), t.feature_image.as_bytes());
        assert!(matches!(enroll(&store, "S01", &rec, &m, feat(), false, 17), Err(Error::Conflict(_))));
        assert!(enroll(&store, "S01", &rec, &m, feat(), true, 18).is_ok());

        let short = PpgRecord::new("x", 250.0, rec.samples[..2999].to_vec()).unwrap();
        assert!(matches!(enroll(&store, "S02", &short, &m, feat(), false, 0), Err(Error::InsufficientData { .. })));
        assert!(!store.contains("S02"));
    }

    #[test]
    fn file_size_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let store = TemplateStore::open(dir.path()).unwrap();
        let rec = synth_ppg(&default_registry()[1], 12.0, 3).unwrap();
        let t = enroll(&store, "a/b c", &rec, &model(), feat(), false, 1).unwrap();
        let path = store.path_for("a/b c");
        assert!(path.ends_with("a%2Fb%20c.pqt"));
        let bytes = std::fs::read(&path).unwrap();
        let header = 4 + 2 + 2 + 5 + 8 + 1 + 1 + 24 + 10;
        assert_eq!(bytes.len(), header + 299 * 299 * 3 + 32);
        for cut in [0, 5, 40, bytes.len() - 1] {
            assert!(matches!(BiometricTemplate::from_bytes(&bytes[..cut]), Err(Error::Format { .. })));
        }
        let mut bad = bytes.clone();
        bad[0] = b'Q';
        assert!(BiometricTemplate::from_bytes(&bad).is_err());
        let mut bad = bytes;
        bad[4] = 9;
        assert!(matches!(BiometricTemplate::from_bytes(&bad), Err(Error::Format { offset: 4, .. })));
        assert_eq!(store.list().unwrap(), vec![t]);
    }

    #[test]
    fn verify_and_identify_contracts() {
        let dir = tempfile::tempdir().unwrap();
        let store = TemplateStore::open(dir.path()).unwrap();
        let m = model();
        let rec = synth_ppg(&default_registry()[2], 12.0, 3).unwrap();
        assert!(identify(&store, &rec, &m).is_err());
        enroll(&store, "S03", &rec, &m, feat(), false, 1).unwrap();
        let r = verify(&store, "S03", &rec, &m, None).unwrap();
        assert_eq!(r.decision == Decision::Accept, r.score >= r.threshold);
        assert!(matches!(verify(&store, "nobody", &rec, &m, None), Err(Error::NotEnrolled(_))));
        let ranked = identify(&store, &rec, &m).unwrap();
        assert_eq!(ranked.len(), 1);

        let other = build_model(&ModelConfig::tiny().with_seed(99)).unwrap();
        assert!(matches!(verify(&store, "S03", &rec, &other, Some(0.5)), Err(Error::Version { .. })));
    }
}
