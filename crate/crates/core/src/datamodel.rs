//! Samples, the attribute vocabulary, dataset manifests and identity splits.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sketch::to_grayscale;
use crate::tensor::Tensor;

/// The twelve soft-biometric attributes, in channel order.
pub const DEFAULT_ATTRIBUTES: [&str; 12] = [
    "bald",
    "black_hair",
    "blond_hair",
    "brown_hair",
    "gray_hair",
    "male",
    "asian",
    "indian",
    "white",
    "black",
    "eyeglasses",
    "pale_skin",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeVocabulary {
    names: Vec<String>,
}

impl Default for AttributeVocabulary {
    fn default() -> Self {
        Self {
            names: DEFAULT_ATTRIBUTES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl AttributeVocabulary {
    pub fn new(names: Vec<String>) -> Result<Self> {
        let unique: BTreeSet<&String> = names.iter().collect();
        if unique.len() != names.len() {
            return Err(Error::Config("attribute names must be unique".into()));
        }
        if names.iter().any(|n| n.is_empty() || n.contains(['|', ',', ':'])) {
            return Err(Error::Config(format!("invalid attribute name in {names:?}")));
        }
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Binary presence vector over an [`AttributeVocabulary`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AttributeVector(Vec<bool>);

impl AttributeVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![false; len])
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self(bits)
    }

    /// Parses a string of `'0'`/`'1'` characters.
    pub fn parse(s: &str) -> Option<Self> {
        s.chars()
            .map(|c| match c {
                '0' => Some(false),
                '1' => Some(true),
                _ => None,
            })
            .collect::<Option<Vec<_>>>()
            .map(Self)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn get(&self, t: usize) -> bool {
        self.0[t]
    }

    pub fn set(&mut self, t: usize, v: bool) {
        self.0[t] = v;
    }

    pub fn as_f64(&self, t: usize) -> f64 {
        if self.0[t] {
            1.0
        } else {
            0.0
        }
    }

    pub fn hamming(&self, other: &AttributeVector) -> usize {
        self.0.iter().zip(&other.0).filter(|(a, b)| a != b).count()
    }
}

impl fmt::Display for AttributeVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.0 {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhotoSample {
    /// 3 × H × W in [0,1].
    pub image: Tensor,
    pub identity: u32,
    pub attributes: AttributeVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SketchSample {
    /// 1 × H × W in [0,1].
    pub image: Tensor,
    pub identity: u32,
    /// Ground-truth labels supervising the attribute heads.
    pub attributes: AttributeVector,
    /// Attributes reported by the witness; fed to the network.
    pub witness_attributes: AttributeVector,
}

/// Stacks the grayscale sketch with one constant plane per attribute.
pub fn encode_attribute_channels(
    sketch: &Tensor,
    attributes: &AttributeVector,
    attribute_count: usize,
) -> Result<Tensor> {
    if sketch.channels() != 1 {
        return Err(Error::Dimension(format!(
            "sketch must have 1 channel, got {}",
            sketch.channels()
        )));
    }
    if attributes.len() != attribute_count {
        return Err(Error::Dimension(format!(
            "attribute vector has {} entries, vocabulary has {attribute_count}",
            attributes.len()
        )));
    }
    let (h, w) = (sketch.height(), sketch.width());
    let mut data = Vec::with_capacity((1 + attribute_count) * h * w);
    data.extend_from_slice(sketch.data());
    for t in 0..attribute_count {
        data.extend(std::iter::repeat_n(attributes.as_f64(t), h * w));
    }
    Tensor::from_vec(1 + attribute_count, h, w, data)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub photo_path: PathBuf,
    pub sketch_path: PathBuf,
    pub identity: u32,
    pub attributes: AttributeVector,
    pub witness_attributes: Option<AttributeVector>,
}

impl ManifestEntry {
    pub fn witness(&self) -> &AttributeVector {
        self.witness_attributes.as_ref().unwrap_or(&self.attributes)
    }
}

/// One record per (photo, sketch) pair; relative paths resolve against `base_dir`.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub vocabulary: AttributeVocabulary,
    pub entries: Vec<ManifestEntry>,
    pub base_dir: PathBuf,
}

impl PartialEq for DatasetManifest {
    fn eq(&self, other: &Self) -> bool {
        self.vocabulary == other.vocabulary && self.entries == other.entries
    }
}

const ATTRIBUTE_COLUMN: &str = "attributes";
const WITNESS_COLUMN: &str = "witness_attributes";

impl DatasetManifest {
    pub fn new(vocabulary: AttributeVocabulary, base_dir: impl Into<PathBuf>) -> Self {
        Self {
            vocabulary,
            entries: Vec::new(),
            base_dir: base_dir.into(),
        }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn identities(&self) -> BTreeSet<u32> {
        self.entries.iter().map(|e| e.identity).collect()
    }

    pub fn photo_count(&self) -> usize {
        self.entries.len()
    }

    pub fn sketch_count(&self) -> usize {
        self.entries.len()
    }

    /// Loads and validates a manifest, checking that every referenced image exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let manifest = Self::parse(&text, base_dir)?;
        manifest.check_integrity()?;
        for e in &manifest.entries {
            for p in [&e.photo_path, &e.sketch_path] {
                let full = manifest.resolve(p);
                if !full.is_file() {
                    return Err(Error::io(
                        full,
                        std::io::Error::new(std::io::ErrorKind::NotFound, "referenced image missing"),
                    ));
                }
            }
        }
        Ok(manifest)
    }

    /// Parses manifest text without touching the filesystem.
    ///
    /// Header: `photo_path,sketch_path,identity,attributes:<name>|<name>|...[,witness_attributes]`.
    /// Data rows are numbered from 1.
    pub fn parse(text: &str, base_dir: PathBuf) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(false)
            .from_reader(text.as_bytes());
        let headers = reader
            .headers()
            .map_err(|e| Error::Schema {
                row: 0,
                message: e.to_string(),
            })?
            .clone();
        let schema_err = |message: String| Error::Schema { row: 0, message };
        let cols: Vec<&str> = headers.iter().collect();
        if cols.len() < 4 || cols[0] != "photo_path" || cols[1] != "sketch_path" || cols[2] != "identity" {
            return Err(schema_err(format!("unexpected header {cols:?}")));
        }
        let names = cols[3]
            .strip_prefix(ATTRIBUTE_COLUMN)
            .and_then(|s| s.strip_prefix(':'))
            .ok_or_else(|| schema_err(format!("attribute column must be `{ATTRIBUTE_COLUMN}:<names>`")))?;
        let vocabulary = AttributeVocabulary::new(names.split('|').map(str::to_string).collect())
            .map_err(|e| schema_err(e.to_string()))?;
        let has_witness = match cols.get(4) {
            None => false,
            Some(&WITNESS_COLUMN) if cols.len() == 5 => true,
            Some(_) => return Err(schema_err(format!("unexpected trailing columns {:?}", &cols[4..]))),
        };
        let t = vocabulary.len();
        let mut entries = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let row = i + 1;
            let record = record.map_err(|e| Error::Schema {
                row,
                message: e.to_string(),
            })?;
            let err = |message: String| Error::Schema { row, message };
            let identity: u32 = record[2]
                .trim()
                .parse()
                .map_err(|_| err(format!("identity `{}` is not a non-negative integer", &record[2])))?;
            let parse_bits = |s: &str, what: &str| -> Result<AttributeVector> {
                let v = AttributeVector::parse(s.trim())
                    .ok_or_else(|| err(format!("{what} `{s}` must contain only '0'/'1'")))?;
                if v.len() != t {
                    return Err(err(format!("{what} has {} bits, vocabulary has {t}", v.len())));
                }
                Ok(v)
            };
            let attributes = parse_bits(&record[3], ATTRIBUTE_COLUMN)?;
            let witness_attributes = if has_witness && !record[4].trim().is_empty() {
                Some(parse_bits(&record[4], WITNESS_COLUMN)?)
            } else {
                None
            };
            entries.push(ManifestEntry {
                photo_path: PathBuf::from(&record[0]),
                sketch_path: PathBuf::from(&record[1]),
                identity,
                attributes,
                witness_attributes,
            });
        }
        Ok(Self {
            vocabulary,
            entries,
            base_dir,
        })
    }

    pub fn to_csv_string(&self) -> String {
        let has_witness = self.entries.iter().any(|e| e.witness_attributes.is_some());
        let mut w = csv::Writer::from_writer(Vec::new());
        let attr_header = format!("{ATTRIBUTE_COLUMN}:{}", self.vocabulary.names().join("|"));
        let mut header = vec!["photo_path", "sketch_path", "identity", attr_header.as_str()];
        if has_witness {
            header.push(WITNESS_COLUMN);
        }
        w.write_record(&header).expect("in-memory write");
        for e in &self.entries {
            let mut rec = vec![
                e.photo_path.to_string_lossy().into_owned(),
                e.sketch_path.to_string_lossy().into_owned(),
                e.identity.to_string(),
                e.attributes.to_string(),
            ];
            if has_witness {
                rec.push(e.witness_attributes.as_ref().map(|v| v.to_string()).unwrap_or_default());
            }
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }

    /// Every identity needs at least one photo and one sketch. With one record per
    /// pair this reduces to non-empty paths.
    pub fn check_integrity(&self) -> Result<()> {
        let mut seen: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
        for e in &self.entries {
            let c = seen.entry(e.identity).or_default();
            if !e.photo_path.as_os_str().is_empty() {
                c.0 += 1;
            }
            if !e.sketch_path.as_os_str().is_empty() {
                c.1 += 1;
            }
        }
        for (id, (p, s)) in seen {
            if p == 0 || s == 0 {
                return Err(Error::Integrity(format!(
                    "identity {id} has {p} photos and {s} sketches"
                )));
            }
        }
        Ok(())
    }

    /// Keeps only entries whose identity is in `ids`, preserving order.
    pub fn restrict(&self, ids: &BTreeSet<u32>) -> Self {
        Self {
            vocabulary: self.vocabulary.clone(),
            entries: self
                .entries
                .iter()
                .filter(|e| ids.contains(&e.identity))
                .cloned()
                .collect(),
            base_dir: self.base_dir.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

/// Partitions identities into train and test manifests.
pub fn split_dataset(
    manifest: &DatasetManifest,
    spec: SplitSpec,
) -> Result<(DatasetManifest, DatasetManifest)> {
    let (train, test) = split_dataset_ids(&manifest.identities(), spec.train_fraction, spec.seed)?;
    Ok((manifest.restrict(&train), manifest.restrict(&test)))
}

/// Seeded shuffle of `ids` cut into `round(train_fraction * n)` train ids and the rest.
pub fn split_dataset_ids(
    ids: &BTreeSet<u32>,
    train_fraction: f64,
    seed: u64,
) -> Result<(BTreeSet<u32>, BTreeSet<u32>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train_fraction {train_fraction} must lie in (0,1)"
        )));
    }
    let mut ids: Vec<u32> = ids.iter().copied().collect();
    if ids.is_empty() {
        return Err(Error::Domain("cannot split an empty identity set".into()));
    }
    let n_train = (train_fraction * ids.len() as f64).round() as usize;
    if n_train == 0 || n_train == ids.len() {
        return Err(Error::Config(format!(
            "train_fraction {train_fraction} over {} identities leaves an empty partition",
            ids.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    Ok((ids[..n_train].iter().copied().collect(), ids[n_train..].iter().copied().collect()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub photo: PhotoSample,
    pub sketch: SketchSample,
}

/// Decoded images for every manifest entry, resized to a common input size.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub vocabulary: AttributeVocabulary,
    pub samples: Vec<PairedSample>,
}

impl Dataset {
    pub fn load(manifest: &DatasetManifest, size: Option<(usize, usize)>) -> Result<Self> {
        let samples = manifest
            .entries
            .par_iter()
            .map(|e| {
                let mut photo = Tensor::load_png(&manifest.resolve(&e.photo_path))?;
                if photo.channels() == 1 {
                    photo = Tensor::concat_channels(&[&photo, &photo, &photo])?;
                }
                let mut sketch = to_grayscale(&Tensor::load_png(&manifest.resolve(&e.sketch_path))?)?;
                if let Some((h, w)) = size {
                    photo = photo.resize(h, w);
                    sketch = sketch.resize(h, w);
                }
                Ok(PairedSample {
                    photo: PhotoSample {
                        image: photo,
                        identity: e.identity,
                        attributes: e.attributes.clone(),
                    },
                    sketch: SketchSample {
                        image: sketch,
                        identity: e.identity,
                        attributes: e.attributes.clone(),
                        witness_attributes: e.witness().clone(),
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            vocabulary: manifest.vocabulary.clone(),
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn identities(&self) -> BTreeSet<u32> {
        self.samples.iter().map(|s| s.photo.identity).collect()
    }

    pub fn subset(&self, ids: &BTreeSet<u32>) -> Dataset {
        Dataset {
            vocabulary: self.vocabulary.clone(),
            samples: self
                .samples
                .iter()
                .filter(|s| ids.contains(&s.photo.identity))
                .cloned()
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn manifest_with(ids: &[u32]) -> DatasetManifest {
        let mut m = DatasetManifest::new(AttributeVocabulary::default(), ".");
        for &id in ids {
            m.entries.push(ManifestEntry {
                photo_path: format!("p{id}.png").into(),
                sketch_path: format!("s{id}.png").into(),
                identity: id,
                attributes: AttributeVector::zeros(12),
                witness_attributes: None,
            });
        }
        m
    }

    #[test]
    fn default_vocabulary_order() {
        let v = AttributeVocabulary::default();
        assert_eq!(v.len(), 12);
        assert_eq!(v.index_of("bald"), Some(0));
        assert_eq!(v.index_of("male"), Some(5));
        assert_eq!(v.index_of("pale_skin"), Some(11));
    }

    #[test]
    fn duplicate_vocabulary_rejected() {
        assert!(AttributeVocabulary::new(vec!["a".into(), "a".into()]).is_err());
    }

    #[test]
    fn empty_manifest_parses() {
        let m = manifest_with(&[]);
        let back = DatasetManifest::parse(&m.to_csv_string(), ".".into()).unwrap();
        assert_eq!(back.entries.len(), 0);
        assert_eq!(back.identities().len(), 0);
    }

    #[test]
    fn two_identity_manifest_counts() {
        let m = manifest_with(&[3, 9]);
        let back = DatasetManifest::parse(&m.to_csv_string(), ".".into()).unwrap();
        assert_eq!(back.identities().len(), 2);
        assert_eq!(back.photo_count(), 2);
        assert_eq!(back.sketch_count(), 2);
    }

    #[test]
    fn short_attribute_string_names_row() {
        let names = DEFAULT_ATTRIBUTES.join("|");
        let text = format!(
            "photo_path,sketch_path,identity,attributes:{names}\n\
             a.png,b.png,0,000000000000\n\
             c.png,d.png,1,00000000000\n"
        );
        match DatasetManifest::parse(&text, ".".into()) {
            Err(Error::Schema { row, message }) => {
                assert_eq!(row, 2);
                assert!(message.contains("11 bits"), "{message}");
            }
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn witness_column_defaults_to_ground_truth() {
        let names = DEFAULT_ATTRIBUTES.join("|");
        let text = format!(
            "photo_path,sketch_path,identity,attributes:{names},witness_attributes\n\
             a.png,b.png,0,100000000000,\n\
             c.png,d.png,1,100000000000,010000000000\n"
        );
        let m = DatasetManifest::parse(&text, ".".into()).unwrap();
        assert_eq!(m.entries[0].witness(), &m.entries[0].attributes);
        assert_eq!(m.entries[1].witness().to_string(), "010000000000");
    }

    #[test]
    fn missing_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = DatasetManifest::load(&dir.path().join("nope.csv")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn encode_all_zero_attributes() {
        let sketch = Tensor::from_fn(1, 5, 4, |_, y, x| (y + x) as f64 / 10.0);
        let enc = encode_attribute_channels(&sketch, &AttributeVector::zeros(12), 12).unwrap();
        assert_eq!(enc.channels(), 13);
        assert_eq!(enc.plane(0), sketch.data());
        for c in 1..13 {
            assert!(enc.plane(c).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn encode_only_male() {
        let sketch = Tensor::filled(1, 3, 3, 0.5);
        let vocab = AttributeVocabulary::default();
        let male = vocab.index_of("male").unwrap();
        let mut att = AttributeVector::zeros(12);
        att.set(male, true);
        let enc = encode_attribute_channels(&sketch, &att, 12).unwrap();
        for t in 0..12 {
            let expected = if t == male { 1.0 } else { 0.0 };
            assert!(enc.plane(1 + t).iter().all(|&v| v == expected));
        }
    }

    #[test]
    fn encode_wrong_length_is_dimension_error() {
        let sketch = Tensor::filled(1, 3, 3, 0.5);
        let err = encode_attribute_channels(&sketch, &AttributeVector::zeros(11), 12).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn split_123_identities() {
        let ids: Vec<u32> = (0..123).collect();
        let m = manifest_with(&ids);
        let (train, test) = split_dataset(&m, SplitSpec { train_fraction: 0.39, seed: 1 }).unwrap();
        assert_eq!(train.identities().len(), 48);
        assert_eq!(test.identities().len(), 75);
    }

    #[test]
    fn split_10_identities_disjoint_and_deterministic() {
        let ids: Vec<u32> = (0..10).collect();
        let m = manifest_with(&ids);
        let spec = SplitSpec { train_fraction: 0.4, seed: 5 };
        let (a_train, a_test) = split_dataset(&m, spec).unwrap();
        let (b_train, b_test) = split_dataset(&m, spec).unwrap();
        assert_eq!(a_train, b_train);
        assert_eq!(a_test, b_test);
        assert_eq!(a_train.identities().len(), 4);
        assert_eq!(a_test.identities().len(), 6);
        assert!(a_train.identities().is_disjoint(&a_test.identities()));
    }

    #[test]
    fn split_empty_partition_rejected() {
        let m = manifest_with(&[1, 2]);
        let err = split_dataset(&m, SplitSpec { train_fraction: 0.1, seed: 0 }).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    fn arb_bits(t: usize) -> impl Strategy<Value = Vec<bool>> {
        proptest::collection::vec(any::<bool>(), t)
    }

    proptest! {
        #[test]
        fn encode_is_injective(a in arb_bits(12), b in arb_bits(12)) {
            let sketch = Tensor::filled(1, 2, 2, 0.25);
            let ea = encode_attribute_channels(&sketch, &AttributeVector::from_bits(a.clone()), 12).unwrap();
            let eb = encode_attribute_channels(&sketch, &AttributeVector::from_bits(b.clone()), 12).unwrap();
            prop_assert_eq!(a == b, ea == eb);
        }

        #[test]
        fn split_partitions_identities(n in 3u32..60, seed in any::<u64>(), frac in 0.2f64..0.8) {
            let ids: Vec<u32> = (0..n).map(|i| i * 3 + 1).collect();
            let m = manifest_with(&ids);
            if let Ok((train, test)) = split_dataset(&m, SplitSpec { train_fraction: frac, seed }) {
                let (tr, te) = (train.identities(), test.identities());
                prop_assert!(tr.is_disjoint(&te));
                let all: BTreeSet<u32> = tr.union(&te).copied().collect();
                prop_assert_eq!(all, m.identities());
            }
        }

        #[test]
        fn manifest_roundtrip(rows in proptest::collection::vec((0u32..50, arb_bits(12), proptest::option::of(arb_bits(12))), 0..20)) {
            let mut m = DatasetManifest::new(AttributeVocabulary::default(), ".");
            for (i, (id, bits, witness)) in rows.into_iter().enumerate() {
                m.entries.push(ManifestEntry {
                    photo_path: format!("photos/{i}.png").into(),
                    sketch_path: format!("sketches/{i}.png").into(),
                    identity: id,
                    attributes: AttributeVector::from_bits(bits),
                    witness_attributes: witness.map(AttributeVector::from_bits),
                });
            }
            let back = DatasetManifest::parse(&m.to_csv_string(), ".".into()).unwrap();
            prop_assert_eq!(back, m);
        }
    }
}
