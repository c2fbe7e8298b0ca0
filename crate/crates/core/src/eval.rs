//! Gallery search, rank-k / CMC scoring and the cross-validation protocol runner.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{split_dataset_ids, Dataset, PhotoSample, SketchSample};
use crate::error::{Error, Result};
use crate::losses::squared_distance;
use crate::network::{build_model, embed_photo, embed_sketch, Embedding, ModelConfig, ModelParams};
use crate::seed::derive_seed;
use crate::trainer::{train_in_memory, TrainConfig, TrainState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalleryEntry {
    pub identity: u32,
    pub embedding: Embedding,
}

/// Photo embeddings searched by Euclidean distance. Insertion order breaks ties.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalleryIndex {
    pub entries: Vec<GalleryEntry>,
    /// Fingerprint of the parameters that produced the embeddings.
    pub fingerprint: String,
}

impl GalleryIndex {
    pub fn new(entries: Vec<GalleryEntry>, fingerprint: String) -> Result<Self> {
        let Some(first) = entries.first() else {
            return Err(Error::Domain("gallery must contain at least one entry".into()));
        };
        let dim = first.embedding.len();
        if let Some(bad) = entries.iter().find(|e| e.embedding.len() != dim) {
            return Err(Error::Dimension(format!(
                "gallery embeddings disagree in length: {dim} vs {} (identity {})",
                bad.embedding.len(),
                bad.identity
            )));
        }
        Ok(Self { entries, fingerprint })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.entries[0].embedding.len()
    }

    pub fn identities(&self) -> BTreeSet<u32> {
        self.entries.iter().map(|e| e.identity).collect()
    }
}

pub fn build_gallery(photos: &[PhotoSample], params: &ModelParams) -> Result<GalleryIndex> {
    if photos.is_empty() {
        return Err(Error::Domain("cannot build a gallery from zero photos".into()));
    }
    let entries = embed_photos(photos, params)?;
    GalleryIndex::new(entries, params.fingerprint())
}

fn embed_photos(photos: &[PhotoSample], params: &ModelParams) -> Result<Vec<GalleryEntry>> {
    photos
        .par_iter()
        .map(|p| {
            Ok(GalleryEntry {
                identity: p.identity,
                embedding: embed_photo(params, p)?.0,
            })
        })
        .collect()
}

/// Appends distractor photos embedded with the same parameters.
pub fn extend_gallery(index: &GalleryIndex, distractors: &[PhotoSample], params: &ModelParams) -> Result<GalleryIndex> {
    let fp = params.fingerprint();
    if fp != index.fingerprint {
        return Err(Error::Fingerprint(format!(
            "gallery was built with model {}, extension uses {}",
            index.fingerprint, fp
        )));
    }
    let mut entries = index.entries.clone();
    entries.extend(embed_photos(distractors, params)?);
    GalleryIndex::new(entries, fp)
}

/// Merges two galleries built from the same parameters.
pub fn merge_galleries(a: &GalleryIndex, b: &GalleryIndex) -> Result<GalleryIndex> {
    if a.fingerprint != b.fingerprint {
        return Err(Error::Fingerprint(format!(
            "cannot merge galleries from models {} and {}",
            a.fingerprint, b.fingerprint
        )));
    }
    let mut entries = a.entries.clone();
    entries.extend(b.entries.iter().cloned());
    GalleryIndex::new(entries, a.fingerprint.clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedMatch {
    pub identity: u32,
    /// Position of the entry in the gallery.
    pub gallery_index: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub probe_id: usize,
    pub true_identity: Option<u32>,
    pub ranked: Vec<RankedMatch>,
    /// 1-based rank of the best entry with the true identity.
    pub rank_of_true: Option<usize>,
}

/// Ranks gallery entries by Euclidean distance to `probe`, ascending, ties
/// in insertion order.
pub fn rank_by_distance(probe: &[f64], index: &GalleryIndex) -> Result<Vec<RankedMatch>> {
    if probe.len() != index.dim() {
        return Err(Error::Dimension(format!(
            "probe embedding has {} dims, gallery has {}",
            probe.len(),
            index.dim()
        )));
    }
    let mut ranked: Vec<RankedMatch> = index
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| RankedMatch {
            identity: e.identity,
            gallery_index: i,
            distance: squared_distance(probe, e.embedding.as_slice()).sqrt(),
        })
        .collect();
    // Stable sort keeps insertion order for equal distances.
    ranked.sort_by(|a, b| a.distance.total_cmp(&b.distance));
    Ok(ranked)
}

pub fn result_for_embedding(
    probe_id: usize,
    embedding: &[f64],
    true_identity: Option<u32>,
    index: &GalleryIndex,
) -> Result<ProbeResult> {
    let ranked = rank_by_distance(embedding, index)?;
    let rank_of_true = true_identity.and_then(|id| ranked.iter().position(|m| m.identity == id).map(|p| p + 1));
    Ok(ProbeResult {
        probe_id,
        true_identity,
        ranked,
        rank_of_true,
    })
}

pub fn identify(probe_id: usize, probe: &SketchSample, index: &GalleryIndex, params: &ModelParams) -> Result<ProbeResult> {
    if params.fingerprint() != index.fingerprint {
        return Err(Error::Fingerprint(format!(
            "gallery was built with model {}, probe model is {}",
            index.fingerprint,
            params.fingerprint()
        )));
    }
    let (emb, _) = embed_sketch(params, probe)?;
    result_for_embedding(probe_id, emb.as_slice(), Some(probe.identity), index)
}

pub fn identify_all(probes: &[SketchSample], index: &GalleryIndex, params: &ModelParams) -> Result<Vec<ProbeResult>> {
    probes
        .par_iter()
        .enumerate()
        .map(|(i, p)| identify(i, p, index, params))
        .collect()
}

fn gallery_size(results: &[ProbeResult]) -> Result<usize> {
    let m = results
        .first()
        .map(|r| r.ranked.len())
        .ok_or_else(|| Error::Domain("no probe results".into()))?;
    if results.iter().any(|r| r.ranked.len() != m) {
        return Err(Error::Domain("probe results were ranked against different galleries".into()));
    }
    Ok(m)
}

/// Fraction of probes whose true identity is within the top `k`.
pub fn rank_k_accuracy(results: &[ProbeResult], k: usize) -> Result<f64> {
    let m = gallery_size(results)?;
    if k == 0 || k > m {
        return Err(Error::Domain(format!("rank {k} outside 1..={m}")));
    }
    if let Some(r) = results.iter().find(|r| r.true_identity.is_none()) {
        return Err(Error::Domain(format!("probe {} has no known identity", r.probe_id)));
    }
    let hits = results.iter().filter(|r| r.rank_of_true.is_some_and(|t| t <= k)).count();
    Ok(hits as f64 / results.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmcCurve {
    /// Entry `k - 1` holds the rank-k accuracy.
    pub accuracy_at_rank: Vec<f64>,
}

impl CmcCurve {
    /// Rank-k accuracy, 1-based.
    pub fn at(&self, k: usize) -> f64 {
        self.accuracy_at_rank[k - 1]
    }

    pub fn len(&self) -> usize {
        self.accuracy_at_rank.len()
    }

    pub fn is_empty(&self) -> bool {
        self.accuracy_at_rank.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("rank,accuracy\n");
        for (i, a) in self.accuracy_at_rank.iter().enumerate() {
            let _ = writeln!(s, "{},{a}", i + 1);
        }
        s
    }
}

pub fn cmc_curve(results: &[ProbeResult]) -> Result<CmcCurve> {
    let m = gallery_size(results)?;
    let mut counts = vec![0usize; m + 1];
    for r in results {
        if let Some(t) = r.rank_of_true {
            counts[t] += 1;
        }
    }
    let n = results.len() as f64;
    let mut acc = Vec::with_capacity(m);
    let mut cum = 0;
    for c in &counts[1..] {
        cum += c;
        acc.push(cum as f64 / n);
    }
    Ok(CmcCurve { accuracy_at_rank: acc })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
pub enum ProtocolName {
    /// Random identity split of one dataset; gallery = test photos.
    S1,
    /// As S1 with the gallery extended by distractor photos.
    S2,
    /// Train on one set, test on another; gallery extended by distractors.
    S3,
}

impl std::fmt::Display for ProtocolName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ProtocolName::S1 => "S1",
            ProtocolName::S2 => "S2",
            ProtocolName::S3 => "S3",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    pub name: ProtocolName,
    pub folds: usize,
    pub train_fraction: f64,
    /// Ranks summarized in the report table.
    pub ranks: Vec<usize>,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            name: ProtocolName::S1,
            folds: 10,
            train_fraction: 0.4,
            ranks: vec![1, 5, 10],
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds == 0 {
            return Err(Error::Config("folds must be >= 1".into()));
        }
        if self.ranks.is_empty() || self.ranks.contains(&0) {
            return Err(Error::Config(format!("invalid report ranks {:?}", self.ranks)));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train_fraction {} must lie in (0,1)",
                self.train_fraction
            )));
        }
        Ok(())
    }
}

/// Loaded data for one protocol run.
#[derive(Debug, Clone)]
pub struct ProtocolData {
    /// S1/S2: the dataset that is split per fold. S3: the training set.
    pub primary: Dataset,
    /// S3 only: held-out probe/gallery pairs.
    pub test: Option<Dataset>,
    /// S2/S3: extra gallery photos.
    pub distractors: Option<Dataset>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub seed: u64,
    pub train_identities: Vec<u32>,
    pub test_identities: Vec<u32>,
    pub gallery_size: usize,
    pub probe_count: usize,
    pub final_loss: Option<f64>,
    pub cmc: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankSummary {
    pub rank: usize,
    pub mean: f64,
    pub std: f64,
    /// Percent, one decimal: "76.4 ± 1.2".
    pub formatted: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub protocol: ProtocolName,
    pub config_hash: String,
    pub seed: u64,
    pub folds: Vec<FoldReport>,
    pub summary: Vec<RankSummary>,
    /// Mean CMC over folds, truncated to the smallest gallery.
    pub mean_cmc: Vec<f64>,
}

impl ProtocolReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn mean_curve(&self) -> CmcCurve {
        CmcCurve {
            accuracy_at_rank: self.mean_cmc.clone(),
        }
    }

    pub fn rank_values(&self, k: usize) -> Vec<f64> {
        self.folds.iter().map(|f| f.cmc[k.min(f.cmc.len()) - 1]).collect()
    }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{:.1} ± {:.1}", 100.0 * mean, 100.0 * std)
}

/// Everything a fold needs besides the data.
#[derive(Debug, Clone)]
pub struct ProtocolSetup<'a> {
    pub protocol: &'a ProtocolConfig,
    pub model: &'a ModelConfig,
    pub train: &'a TrainConfig,
    /// Starting weights for every fold (e.g. pretrained); otherwise a fresh
    /// seeded initialization.
    pub init: Option<&'a ModelParams>,
    pub seed: u64,
    pub config_hash: &'a str,
}

/// Runs one fold: split (or fixed S3 assignment), train, gallery, identify.
pub fn run_fold(setup: &ProtocolSetup<'_>, data: &ProtocolData, fold: usize) -> Result<FoldReport> {
    let cfg = setup.protocol;
    let fold_seed = derive_seed(setup.seed, fold as u64);
    let (train_set, test_set) = match cfg.name {
        ProtocolName::S1 | ProtocolName::S2 => {
            let ids = data.primary.identities();
            let (train_ids, test_ids) = split_dataset_ids(&ids, cfg.train_fraction, derive_seed(fold_seed, 1))?;
            (data.primary.subset(&train_ids), data.primary.subset(&test_ids))
        }
        ProtocolName::S3 => (
            data.primary.clone(),
            data.test
                .clone()
                .ok_or_else(|| Error::Config("S3 needs a test dataset".into()))?,
        ),
    };
    let distractors = match cfg.name {
        ProtocolName::S1 => None,
        ProtocolName::S2 | ProtocolName::S3 => Some(
            data.distractors
                .as_ref()
                .ok_or_else(|| Error::Config(format!("{} needs a distractor dataset", cfg.name)))?,
        ),
    };

    let init = match setup.init {
        Some(p) => p.clone(),
        None => build_model(setup.model, derive_seed(fold_seed, 2))?,
    };
    let train_cfg = TrainConfig {
        seed: derive_seed(fold_seed, 3),
        ..setup.train.clone()
    };
    let (state, _) = train_in_memory(&train_set, &train_cfg, TrainState::new(init))?;
    let params = state.params;

    let photos: Vec<PhotoSample> = test_set.samples.iter().map(|s| s.photo.clone()).collect();
    let mut gallery = build_gallery(&photos, &params)?;
    if let Some(d) = distractors {
        let extra: Vec<PhotoSample> = d.samples.iter().map(|s| s.photo.clone()).collect();
        gallery = extend_gallery(&gallery, &extra, &params)?;
    }
    let probes: Vec<SketchSample> = test_set.samples.iter().map(|s| s.sketch.clone()).collect();
    let results = identify_all(&probes, &gallery, &params)?;
    let cmc = cmc_curve(&results)?;
    Ok(FoldReport {
        fold,
        seed: fold_seed,
        train_identities: train_set.identities().into_iter().collect(),
        test_identities: test_set.identities().into_iter().collect(),
        gallery_size: gallery.len(),
        probe_count: probes.len(),
        final_loss: state.last_loss.map(|l| l.total),
        cmc: cmc.accuracy_at_rank,
    })
}

/// Runs every fold (concurrently) and summarizes rank-k accuracy.
pub fn run_protocol(setup: &ProtocolSetup<'_>, data: &ProtocolData) -> Result<ProtocolReport> {
    setup.protocol.validate()?;
    let folds = (0..setup.protocol.folds)
        .into_par_iter()
        .map(|f| run_fold(setup, data, f).map_err(|e| e.in_fold(f)))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(setup, folds))
}

fn summarize(setup: &ProtocolSetup<'_>, folds: Vec<FoldReport>) -> ProtocolReport {
    let min_len = folds.iter().map(|f| f.cmc.len()).min().unwrap_or(0);
    let mean_cmc = (0..min_len)
        .map(|k| folds.iter().map(|f| f.cmc[k]).sum::<f64>() / folds.len() as f64)
        .collect();
    let summary = setup
        .protocol
        .ranks
        .iter()
        .map(|&k| {
            let vals: Vec<f64> = folds.iter().map(|f| f.cmc[k.min(f.cmc.len()) - 1]).collect();
            let (mean, std) = mean_and_std(&vals);
            RankSummary {
                rank: k,
                mean,
                std,
                formatted: format_mean_std(mean, std),
            }
        })
        .collect();
    ProtocolReport {
        protocol: setup.protocol.name,
        config_hash: setup.config_hash.to_string(),
        seed: setup.seed,
        folds,
        summary,
        mean_cmc,
    }
}

pub fn write_cmc_csv(curve: &CmcCurve, path: &Path) -> Result<()> {
    std::fs::write(path, curve.to_csv()).map_err(|e| Error::io(path, e))
}
