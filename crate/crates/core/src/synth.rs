//! Procedural face-like renders for self-contained experiments.
//!
//! Each identity gets a geometric latent (face shape, feature placement) and an
//! attribute vector that drives colours and overlays: hair colour from the hair
//! bits, skin tone from the ethnicity bits and `pale_skin`, a glasses overlay
//! from `eyeglasses`, hair length and brow weight from `male`.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::datamodel::{AttributeVector, AttributeVocabulary, DatasetManifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::sketch::{to_grayscale, xdog, XDoGParams};
use crate::tensor::Tensor;

/// Geometry of one identity, in units of the image side.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceLatent {
    pub face_rx: f64,
    pub face_ry: f64,
    pub face_cy: f64,
    pub hairline: f64,
    pub eye_dy: f64,
    pub eye_dx: f64,
    pub eye_r: f64,
    pub brow_gap: f64,
    pub nose_len: f64,
    pub mouth_w: f64,
    pub mouth_dy: f64,
    pub background: f64,
    pub tone_jitter: f64,
}

impl FaceLatent {
    pub fn sample(rng: &mut impl Rng) -> Self {
        Self {
            face_rx: rng.random_range(0.24..0.33),
            face_ry: rng.random_range(0.30..0.39),
            face_cy: rng.random_range(0.50..0.58),
            hairline: rng.random_range(0.35..0.75),
            eye_dy: rng.random_range(0.08..0.30),
            eye_dx: rng.random_range(0.08..0.15),
            eye_r: rng.random_range(0.035..0.06),
            brow_gap: rng.random_range(0.05..0.09),
            nose_len: rng.random_range(0.06..0.16),
            mouth_w: rng.random_range(0.06..0.15),
            mouth_dy: rng.random_range(0.40..0.62),
            background: rng.random_range(0.35..0.95),
            tone_jitter: rng.random_range(-0.06..0.06),
        }
    }
}

fn attr(vocab: &AttributeVocabulary, a: &AttributeVector, name: &str) -> bool {
    vocab.index_of(name).is_some_and(|i| a.get(i))
}

/// Draws a plausible attribute vector over the default vocabulary: at most one
/// hair colour (none when bald), exactly one ethnicity.
pub fn sample_attributes(vocab: &AttributeVocabulary, rng: &mut impl Rng) -> AttributeVector {
    let mut a = AttributeVector::zeros(vocab.len());
    let mut set = |name: &str| {
        if let Some(i) = vocab.index_of(name) {
            a.set(i, true);
        }
    };
    let male = rng.random_bool(0.5);
    if male {
        set("male");
    }
    if rng.random_bool(if male { 0.25 } else { 0.03 }) {
        set("bald");
    } else {
        let hair = ["black_hair", "blond_hair", "brown_hair", "gray_hair"];
        set(hair[rng.random_range(0..hair.len())]);
    }
    let ethnicity = ["asian", "indian", "white", "black"];
    let e = ethnicity[rng.random_range(0..ethnicity.len())];
    set(e);
    if matches!(e, "white" | "asian") && rng.random_bool(0.35) {
        set("pale_skin");
    }
    if rng.random_bool(0.35) {
        set("eyeglasses");
    }
    a
}

fn skin_rgb(vocab: &AttributeVocabulary, a: &AttributeVector, jitter: f64) -> [f64; 3] {
    let base = if attr(vocab, a, "black") {
        [0.36, 0.24, 0.17]
    } else if attr(vocab, a, "indian") {
        [0.62, 0.45, 0.32]
    } else if attr(vocab, a, "asian") {
        [0.86, 0.72, 0.56]
    } else {
        [0.90, 0.74, 0.64]
    };
    let pale = if attr(vocab, a, "pale_skin") { 0.1 } else { 0.0 };
    base.map(|c| (c + jitter + pale).clamp(0.0, 1.0))
}

fn hair_rgb(vocab: &AttributeVocabulary, a: &AttributeVector) -> [f64; 3] {
    if attr(vocab, a, "blond_hair") {
        [0.93, 0.82, 0.45]
    } else if attr(vocab, a, "brown_hair") {
        [0.45, 0.28, 0.14]
    } else if attr(vocab, a, "gray_hair") {
        [0.68, 0.68, 0.70]
    } else {
        [0.07, 0.06, 0.06]
    }
}

/// Coverage in [0,1] from a signed distance `sd` (negative inside), in pixels.
fn coverage(sd_px: f64) -> f64 {
    (0.5 - sd_px).clamp(0.0, 1.0)
}

/// Approximate signed distance to an axis-aligned ellipse, in the ellipse's units.
fn ellipse_sd(u: f64, v: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> f64 {
    let q = ((u - cx) / rx).hypot((v - cy) / ry);
    (q - 1.0) * rx.min(ry)
}

/// Renders an RGB face of `height` x `width`.
pub fn render_face(
    latent: &FaceLatent,
    vocab: &AttributeVocabulary,
    attributes: &AttributeVector,
    height: usize,
    width: usize,
) -> Tensor {
    let side = height.min(width) as f64;
    let l = latent;
    let skin = skin_rgb(vocab, attributes, l.tone_jitter);
    let hair = hair_rgb(vocab, attributes);
    let bald = attr(vocab, attributes, "bald");
    let male = attr(vocab, attributes, "male");
    let glasses = attr(vocab, attributes, "eyeglasses");
    let bg = [l.background, l.background * 0.97, l.background * 0.92];
    let eye_y = l.face_cy - l.face_ry * l.eye_dy;
    let brow = hair.map(|c| c * 0.6);
    let lips = [skin[0] * 0.75, skin[1] * 0.45, skin[2] * 0.45];

    let mut img = Tensor::zeros(3, height, width);
    for y in 0..height {
        for x in 0..width {
            let u = (x as f64 + 0.5) / width as f64;
            let v = (y as f64 + 0.5) / height as f64;
            let mut px = bg;
            let mut paint = |c: [f64; 3], alpha: f64| {
                for k in 0..3 {
                    px[k] = px[k] * (1.0 - alpha) + c[k] * alpha;
                }
            };
            let hair_rx = l.face_rx * 1.12;
            let hair_ry = l.face_ry * 1.08;
            let hair_cy = l.face_cy - 0.03;
            if !bald {
                // Long hair falls behind the shoulders; short hair only caps the head.
                let back = ellipse_sd(u, v, 0.5, hair_cy, hair_rx, hair_ry);
                let mut cov = coverage(back * side);
                if !male {
                    let drape = ellipse_sd(u, v, 0.5, hair_cy + 0.18, hair_rx * 1.05, hair_ry);
                    cov = cov.max(coverage(drape * side));
                }
                paint(hair, cov);
            }
            // Neck and shoulders.
            let neck = ((u - 0.5).abs() - l.face_rx * 0.45).max(l.face_cy + l.face_ry * 0.6 - v);
            paint(skin.map(|c| c * 0.85), coverage(neck * side));
            let shoulders = ellipse_sd(u, v, 0.5, 1.12, 0.45, 0.22);
            paint([0.25, 0.3, 0.45], coverage(shoulders * side));
            let face = ellipse_sd(u, v, 0.5, l.face_cy, l.face_rx, l.face_ry);
            paint(skin, coverage(face * side));
            if !bald {
                // Fringe: hair inside the hair ellipse above the hairline.
                let line = l.face_cy - l.face_ry * l.hairline;
                let back = ellipse_sd(u, v, 0.5, hair_cy, hair_rx, hair_ry);
                let fringe = back.max(v - line);
                paint(hair, coverage(fringe * side));
            }
            for dir in [-1.0, 1.0] {
                let ex = 0.5 + dir * l.eye_dx;
                let sclera = ellipse_sd(u, v, ex, eye_y, l.eye_r * 1.3, l.eye_r * 0.75);
                paint([0.97, 0.97, 0.97], coverage(sclera * side));
                let iris = ellipse_sd(u, v, ex, eye_y, l.eye_r * 0.6, l.eye_r * 0.6);
                paint([0.12, 0.1, 0.08], coverage(iris * side));
                let brow_t = if male { 0.35 } else { 0.2 };
                let b = ellipse_sd(u, v, ex, eye_y - l.brow_gap, l.eye_r * 1.6, l.eye_r * brow_t);
                paint(brow, coverage(b * side));
                if glasses {
                    let r = l.eye_r * 1.9;
                    let d = ((u - ex).hypot(v - eye_y) - r).abs() - 0.012;
                    paint([0.05, 0.05, 0.08], coverage(d * side));
                }
            }
            if glasses {
                let r = l.eye_r * 1.9;
                let half = (l.eye_dx - r).max(0.0);
                let bridge = ((u - 0.5).abs() - half).max((v - eye_y).abs() - 0.01);
                paint([0.05, 0.05, 0.08], coverage(bridge * side));
            }
            let nose_top = eye_y + 0.02;
            let nose = ((u - 0.5).abs() - 0.012).max((v - (nose_top + l.nose_len / 2.0)).abs() - l.nose_len / 2.0);
            paint(skin.map(|c| c * 0.7), coverage(nose * side));
            let mouth_y = l.face_cy + l.face_ry * l.mouth_dy;
            let mouth = ellipse_sd(u, v, 0.5, mouth_y, l.mouth_w, 0.022);
            paint(lips, coverage(mouth * side));
            for (k, c) in px.iter().enumerate() {
                img.set(k, y, x, c.clamp(0.0, 1.0));
            }
        }
    }
    img
}

/// One identity of the synthetic set.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthIdentity {
    pub identity: u32,
    pub latent: FaceLatent,
    pub attributes: AttributeVector,
}

pub fn synth_identities(n: usize, seed: u64) -> Result<Vec<SynthIdentity>> {
    if n < 2 {
        return Err(Error::Domain(format!("synthetic dataset needs at least 2 identities, got {n}")));
    }
    let vocab = AttributeVocabulary::default();
    Ok((0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            let latent = FaceLatent::sample(&mut rng);
            let attributes = sample_attributes(&vocab, &mut rng);
            SynthIdentity {
                identity: i as u32,
                latent,
                attributes,
            }
        })
        .collect())
}

/// Writes `photos/`, `sketches/` and `manifest.csv` under `out` and returns the
/// manifest (paths relative to `out`).
pub fn synth_dataset(n: usize, seed: u64, out: &Path, size: (usize, usize), xdog_params: &XDoGParams) -> Result<DatasetManifest> {
    xdog_params.validate()?;
    let ids = synth_identities(n, seed)?;
    let vocab = AttributeVocabulary::default();
    for dir in ["photos", "sketches"] {
        let d = out.join(dir);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let entries = ids
        .par_iter()
        .map(|id| {
            let photo = render_face(&id.latent, &vocab, &id.attributes, size.0, size.1);
            let sketch = xdog(&to_grayscale(&photo)?, xdog_params)?;
            let photo_rel = PathBuf::from(format!("photos/{:06}.png", id.identity));
            let sketch_rel = PathBuf::from(format!("sketches/{:06}.png", id.identity));
            photo.save_png(&out.join(&photo_rel))?;
            sketch.save_png(&out.join(&sketch_rel))?;
            Ok(ManifestEntry {
                photo_path: photo_rel,
                sketch_path: sketch_rel,
                identity: id.identity,
                attributes: id.attributes.clone(),
                witness_attributes: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut manifest = DatasetManifest::new(vocab, out);
    manifest.entries = entries;
    manifest.save(&out.join("manifest.csv"))?;
    Ok(manifest)
}
