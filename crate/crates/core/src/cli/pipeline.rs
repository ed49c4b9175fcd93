//! Dataset assembly, training and evaluation driven by a [`RunConfig`].

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::chaos01::FEATURE_CHANNELS;
use crate::error::{Error, Result};
use crate::eval::{self, MetricsReport, PrPoint, RocPoint};
use crate::net::data::{fixed_pairs, split_grouped, FeatureBank, Partition, SplitMode};
use crate::net::train::score_pairs;
use crate::net::{build_model, train, EpochRecord, SiameseModel, TrainData};
use crate::signal::io::read_ppg;
use crate::signal::{default_registry, preprocess, segment, synth_ppg, PpgRecord, SegmentStrategy};

const SPLIT_SALT: u64 = 0x5b1_17;
const TEST_SALT: u64 = 0x7e57;

/// Raw records named by the dataset section, grouped by subject in first
/// appearance order: files from `ppg_dir` in name order, or `sessions`
/// recordings of each of the first `subjects` registry profiles.
pub fn load_records(run: &RunConfig) -> Result<Vec<Vec<PpgRecord>>> {
    let d = &run.dataset;
    if let Some(dir) = &d.ppg_dir {
        let mut paths: Vec<_> = std::fs::read_dir(dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        paths.retain(|p| p.is_file());
        paths.sort();
        let mut subjects: Vec<Vec<PpgRecord>> = Vec::new();
        for p in &paths {
            let rec = read_ppg(p)?;
            match subjects.iter_mut().find(|s| s[0].subject_id == rec.subject_id) {
                Some(s) => s.push(rec),
                None => subjects.push(vec![rec]),
            }
        }
        if subjects.len() < 2 {
            return Err(Error::insufficient("cli", format!("{} holds fewer than 2 subjects", dir.display())));
        }
        return Ok(subjects);
    }
    let registry = default_registry();
    if d.subjects > registry.len() {
        return Err(Error::param(
            "cli",
            format!("the synthetic registry has {} subjects, {} requested", registry.len(), d.subjects),
        ));
    }
    let per = d.duration_s / d.sessions as f64;
    registry[..d.subjects]
        .iter()
        .map(|p| (0..d.sessions).map(|k| synth_ppg(p, per, session_seed(run.seed, k))).collect())
        .collect()
}

fn session_seed(seed: u64, session: usize) -> u64 {
    seed ^ ((session as u64) << 40)
}

pub struct Dataset {
    pub bank: FeatureBank,
    pub partition: Partition,
}

/// Preprocesses, segments and featurizes every record, then splits.
/// Each subject's segment budget is shared evenly across its sessions.
pub fn dataset(run: &RunConfig, split: SplitMode) -> Result<Dataset> {
    let hw = run.model_config()?.input_hw;
    let total = run.dataset.segments_per_subject;
    let (mut segs, mut groups) = (Vec::new(), Vec::new());
    for (i, sessions) in load_records(run)?.iter().enumerate() {
        let (mut subject, mut labels) = (Vec::new(), Vec::new());
        for (k, rec) in sessions.iter().enumerate() {
            let count = total / sessions.len() + usize::from(k < total % sessions.len());
            let clean = preprocess(rec, run.preprocess.mode)?;
            let seed = session_seed(run.seed.wrapping_add(i as u64), k);
            let got = segment(&clean, SegmentStrategy::RandomStarts { count, seed })?;
            labels.extend(std::iter::repeat_n(k, got.len()));
            subject.extend(got);
        }
        segs.push(subject);
        groups.push(labels);
    }
    let bank = FeatureBank::build(&segs, run.featurizer.c.channel_params(), hw)?;
    let partition = split_grouped(&groups, split, run.train.fractions, run.seed ^ SPLIT_SALT)?;
    Ok(Dataset { bank, partition })
}

/// Builds and trains a model; its metadata carries `run` and the
/// validation EER threshold.
pub fn train_model(run: &RunConfig) -> Result<(SiameseModel, Vec<EpochRecord>)> {
    run.validate()?;
    let ds = dataset(run, run.train.split)?;
    let data = TrainData {
        train: ds.bank.subset(&ds.partition.train),
        val: ds.bank.subset(&ds.partition.val),
    };
    let mut model = build_model(&run.model_config()?)?;
    let history = train(&mut model, &data, &run.train_config())?;
    model.meta.run_config = Some(run.to_json());
    Ok((model, history))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub metrics: MetricsReport,
    pub split: SplitMode,
    pub genuine_pairs: usize,
    pub impostor_pairs: usize,
    pub model_version: String,
    pub run_config: serde_json::Value,
}

pub struct Evaluation {
    pub report: EvalReport,
    pub roc: Vec<RocPoint>,
    pub pr: Vec<PrPoint>,
}

/// Scores balanced pairs from the test partition of `split`. Rank-1 uses
/// each test subject's first three segments as its gallery image and
/// later disjoint triples as probes.
pub fn evaluate(model: &SiameseModel, run: &RunConfig, split: SplitMode) -> Result<Evaluation> {
    let ds = dataset(run, split)?;
    let test = ds.bank.subset(&ds.partition.test);
    let pairs = fixed_pairs(&test, run.eval.test_pairs, run.eval.batch, run.seed ^ TEST_SALT)?;
    let (scores, _) = score_pairs(model, &pairs)?;
    let rank1 = if run.eval.rank1_probes > 0 && test.subjects.len() >= 2 {
        Some(rank1(model, &test, run.eval.rank1_probes)?)
    } else {
        None
    };
    let roc = eval::roc(&scores)?;
    let pr = eval::precision_recall_f1(&scores)?;
    Ok(Evaluation {
        report: EvalReport {
            metrics: eval::metrics_report(&scores, rank1)?,
            split,
            genuine_pairs: scores.genuine.len(),
            impostor_pairs: scores.impostor.len(),
            model_version: model.version_hex(),
            run_config: run.to_json(),
        },
        roc,
        pr,
    })
}

fn triple(k: usize) -> [usize; FEATURE_CHANNELS] {
    std::array::from_fn(|i| FEATURE_CHANNELS * k + i)
}

fn rank1(model: &SiameseModel, bank: &FeatureBank, probes: usize) -> Result<f64> {
    let gallery: Vec<_> = (0..bank.subjects.len()).map(|s| bank.image(s, triple(0))).collect();
    let ids: Vec<String> = bank.subjects.iter().map(|s| s.subject_id.clone()).collect();
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    for (s, sub) in bank.subjects.iter().enumerate() {
        let available = (sub.len() / FEATURE_CHANNELS).saturating_sub(1);
        for k in 1..=probes.min(available) {
            let probe = bank.image(s, triple(k));
            let row = gallery
                .iter()
                .map(|g| Ok(model.net.score_batch(g, &probe)?[0]))
                .collect::<Result<Vec<_>>>()?;
            scores.push(row);
            labels.push(ids[s].clone());
        }
    }
    if scores.is_empty() {
        return Err(Error::insufficient("cli", "test subjects have too few segments for rank-1 probes"));
    }
    eval::rank1(&scores, &ids, &labels)
}

/// Writes the report JSON plus `<stem>.roc.csv` and `<stem>.pr.csv` next
/// to it.
pub fn write_evaluation(ev: &Evaluation, report_path: &Path) -> Result<()> {
    let mut json = serde_json::to_vec_pretty(&ev.report)?;
    json.push(b'\n');
    crate::store::write_atomic(report_path, &json)?;
    crate::store::write_atomic(&report_path.with_extension("roc.csv"), eval::roc_csv(&ev.roc).as_bytes())?;
    crate::store::write_atomic(&report_path.with_extension("pr.csv"), eval::pr_csv(&ev.pr).as_bytes())?;
    Ok(())
}
