//! Attribute-aware pair sampling: every genuine pair is accompanied by two
//! impostors sharing the photo's attribute vector and two that do not.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{AttributeVector, Dataset, PhotoSample, SketchSample};
use crate::error::{Error, Result};

pub const IMPOSTORS_PER_GENUINE: usize = 4;
pub const SAME_ATTRIBUTE_IMPOSTORS: usize = 2;

/// Contrastive pair label; genuine maps to 0, impostor to 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairLabel {
    Genuine,
    Impostor,
}

impl PairLabel {
    pub fn y_cont(self) -> u8 {
        match self {
            PairLabel::Genuine => 0,
            PairLabel::Impostor => 1,
        }
    }
}

/// How an impostor was chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Genuine,
    SameAttr,
    /// No other identity shares the exact vector; nearest by Hamming distance.
    SameAttrFallback,
    DiffAttr,
    /// Every other identity shares the vector.
    DiffAttrFallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairRef {
    /// Index into [`PairBatch::photos`].
    pub photo: usize,
    /// Index into [`PairBatch::sketches`].
    pub sketch: usize,
    pub label: PairLabel,
    pub provenance: Provenance,
}

/// Unique photos and sketches plus the (photo, sketch, label) triples over them.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub photos: Vec<PhotoSample>,
    pub sketches: Vec<SketchSample>,
    pub pairs: Vec<PairRef>,
}

impl PairBatch {
    pub fn genuine_count(&self) -> usize {
        self.pairs.iter().filter(|p| p.label == PairLabel::Genuine).count()
    }

    pub fn impostor_count(&self) -> usize {
        self.pairs.len() - self.genuine_count()
    }

    /// Checks the label/identity consistency of every triple.
    pub fn check_labels(&self) -> Result<()> {
        for (i, p) in self.pairs.iter().enumerate() {
            let same = self.photos[p.photo].identity == self.sketches[p.sketch].identity;
            let ok = match p.label {
                PairLabel::Genuine => same && p.provenance == Provenance::Genuine,
                PairLabel::Impostor => !same && p.provenance != Provenance::Genuine,
            };
            if !ok {
                return Err(Error::Integrity(format!("pair {i} is mislabeled: {p:?}")));
            }
        }
        Ok(())
    }
}

/// Indexes a dataset by identity for repeated batch construction.
#[derive(Debug)]
pub struct PairSampler<'a> {
    dataset: &'a Dataset,
    identities: Vec<u32>,
    entries_by_identity: BTreeMap<u32, Vec<usize>>,
    identity_attributes: BTreeMap<u32, AttributeVector>,
}

impl<'a> PairSampler<'a> {
    pub fn new(dataset: &'a Dataset) -> Result<Self> {
        let mut entries_by_identity: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        let mut identity_attributes = BTreeMap::new();
        for (i, s) in dataset.samples.iter().enumerate() {
            entries_by_identity.entry(s.photo.identity).or_default().push(i);
            identity_attributes
                .entry(s.photo.identity)
                .or_insert_with(|| s.photo.attributes.clone());
        }
        if entries_by_identity.len() < 2 {
            return Err(Error::Sampling(format!(
                "impostor sampling needs at least 2 identities, dataset has {}",
                entries_by_identity.len()
            )));
        }
        Ok(Self {
            dataset,
            identities: entries_by_identity.keys().copied().collect(),
            entries_by_identity,
            identity_attributes,
        })
    }

    pub fn dataset(&self) -> &Dataset {
        self.dataset
    }

    /// Impostor candidate identities for a genuine identity with `attrs`.
    fn candidates(&self, identity: u32, attrs: &AttributeVector) -> (Vec<u32>, Provenance, Vec<u32>, Provenance) {
        let others: Vec<u32> = self.identities.iter().copied().filter(|&j| j != identity).collect();
        let (same, diff): (Vec<u32>, Vec<u32>) = others
            .iter()
            .partition(|j| &self.identity_attributes[j] == attrs);
        let (same, same_tag) = if same.is_empty() {
            let best = others
                .iter()
                .map(|j| self.identity_attributes[j].hamming(attrs))
                .min()
                .expect("at least one other identity");
            let nearest = others
                .iter()
                .copied()
                .filter(|j| self.identity_attributes[j].hamming(attrs) == best)
                .collect();
            (nearest, Provenance::SameAttrFallback)
        } else {
            (same, Provenance::SameAttr)
        };
        let (diff, diff_tag) = if diff.is_empty() {
            (others, Provenance::DiffAttrFallback)
        } else {
            (diff, Provenance::DiffAttr)
        };
        (same, same_tag, diff, diff_tag)
    }

    /// Builds a batch from the given genuine dataset entries.
    pub fn batch(&self, genuine_entries: &[usize], rng: &mut ChaCha8Rng) -> Result<PairBatch> {
        let mut photos = Vec::new();
        let mut sketches = Vec::new();
        let mut photo_slot: BTreeMap<usize, usize> = BTreeMap::new();
        let mut sketch_slot: BTreeMap<usize, usize> = BTreeMap::new();
        let mut pairs = Vec::with_capacity(genuine_entries.len() * (1 + IMPOSTORS_PER_GENUINE));
        let samples = &self.dataset.samples;
        let slot = |map: &mut BTreeMap<usize, usize>, len: usize, entry: usize| -> (usize, bool) {
            match map.get(&entry) {
                Some(&s) => (s, false),
                None => {
                    map.insert(entry, len);
                    (len, true)
                }
            }
        };
        for &g in genuine_entries {
            let sample = samples
                .get(g)
                .ok_or_else(|| Error::Sampling(format!("entry {g} out of range")))?;
            let (p, new) = slot(&mut photo_slot, photos.len(), g);
            if new {
                photos.push(sample.photo.clone());
            }
            let (s, new) = slot(&mut sketch_slot, sketches.len(), g);
            if new {
                sketches.push(sample.sketch.clone());
            }
            pairs.push(PairRef {
                photo: p,
                sketch: s,
                label: PairLabel::Genuine,
                provenance: Provenance::Genuine,
            });
            let identity = sample.photo.identity;
            let (same, same_tag, diff, diff_tag) = self.candidates(identity, &sample.photo.attributes);
            let draws = (0..SAME_ATTRIBUTE_IMPOSTORS)
                .map(|_| (&same, same_tag))
                .chain((SAME_ATTRIBUTE_IMPOSTORS..IMPOSTORS_PER_GENUINE).map(|_| (&diff, diff_tag)));
            for (pool, tag) in draws {
                let j = *pool.choose(rng).expect("non-empty candidate pool");
                let entry = *self.entries_by_identity[&j].choose(rng).expect("identity has entries");
                let (s, new) = slot(&mut sketch_slot, sketches.len(), entry);
                if new {
                    sketches.push(samples[entry].sketch.clone());
                }
                pairs.push(PairRef {
                    photo: p,
                    sketch: s,
                    label: PairLabel::Impostor,
                    provenance: tag,
                });
            }
        }
        Ok(PairBatch {
            photos,
            sketches,
            pairs,
        })
    }
}

/// Draws `genuine_count` distinct genuine entries plus their impostors.
pub fn sample_pairs(dataset: &Dataset, genuine_count: usize, seed: u64) -> Result<PairBatch> {
    let sampler = PairSampler::new(dataset)?;
    if genuine_count == 0 || genuine_count > dataset.len() {
        return Err(Error::Sampling(format!(
            "cannot draw {genuine_count} genuine pairs from {} entries",
            dataset.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    sampler.batch(&order[..genuine_count], &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{AttributeVocabulary, PairedSample};
    use crate::tensor::Tensor;

    pub(crate) fn toy_dataset(attrs: &[&str]) -> Dataset {
        let samples = attrs
            .iter()
            .enumerate()
            .map(|(i, bits)| {
                let a = AttributeVector::parse(bits).unwrap();
                PairedSample {
                    photo: PhotoSample {
                        image: Tensor::filled(3, 4, 4, i as f64 / 10.0),
                        identity: i as u32,
                        attributes: a.clone(),
                    },
                    sketch: SketchSample {
                        image: Tensor::filled(1, 4, 4, i as f64 / 10.0),
                        identity: i as u32,
                        attributes: a.clone(),
                        witness_attributes: a,
                    },
                }
            })
            .collect();
        Dataset {
            vocabulary: AttributeVocabulary::new(vec!["a".into(), "b".into(), "c".into()]).unwrap(),
            samples,
        }
    }

    #[test]
    fn eight_genuine_give_thirty_two_impostors() {
        let d = toy_dataset(&["000", "000", "001", "011", "111", "110", "100", "000", "011", "101"]);
        let b = sample_pairs(&d, 8, 3).unwrap();
        assert_eq!(b.genuine_count(), 8);
        assert_eq!(b.impostor_count(), 32);
        b.check_labels().unwrap();
        for p in &b.pairs {
            let expected = if p.label == PairLabel::Genuine { 0 } else { 1 };
            assert_eq!(p.label.y_cont(), expected);
        }
    }

    #[test]
    fn unique_vectors_fall_back_to_nearest() {
        let d = toy_dataset(&["000", "001", "011", "111"]);
        let b = sample_pairs(&d, 4, 0).unwrap();
        for p in b.pairs.iter().filter(|p| p.label == PairLabel::Impostor) {
            assert!(matches!(p.provenance, Provenance::SameAttrFallback | Provenance::DiffAttr));
        }
        // "000" has a single nearest neighbour, "001".
        let sampler = PairSampler::new(&d).unwrap();
        let (same, tag, _, _) = sampler.candidates(0, &AttributeVector::parse("000").unwrap());
        assert_eq!(same, vec![1]);
        assert_eq!(tag, Provenance::SameAttrFallback);
    }

    #[test]
    fn identical_vectors_fall_back_for_diff_slots() {
        let d = toy_dataset(&["010", "010", "010"]);
        let b = sample_pairs(&d, 3, 1).unwrap();
        let diff: Vec<_> = b
            .pairs
            .iter()
            .filter(|p| p.provenance == Provenance::DiffAttrFallback)
            .collect();
        assert_eq!(diff.len(), 6);
        b.check_labels().unwrap();
    }

    #[test]
    fn single_identity_is_sampling_error() {
        let d = toy_dataset(&["010"]);
        assert!(matches!(sample_pairs(&d, 1, 0), Err(Error::Sampling(_))));
    }

    #[test]
    fn deterministic_given_seed() {
        let d = toy_dataset(&["000", "001", "011", "111", "000", "001"]);
        assert_eq!(sample_pairs(&d, 3, 9).unwrap(), sample_pairs(&d, 3, 9).unwrap());
    }
}
