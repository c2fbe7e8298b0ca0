//! Synthetic sketch rendering with the extended difference-of-Gaussians operator.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{DatasetManifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct XDoGParams {
    /// Gaussian scale in pixels.
    pub sigma: f64,
    /// Ratio between the two Gaussian scales.
    pub k: f64,
    /// Weight of the wide Gaussian.
    pub tau: f64,
    pub epsilon: f64,
    /// Steepness of the soft threshold.
    pub phi: f64,
}

impl Default for XDoGParams {
    fn default() -> Self {
        Self {
            sigma: 0.8,
            k: 1.6,
            tau: 0.98,
            epsilon: -0.02,
            phi: 200.0,
        }
    }
}

impl XDoGParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.sigma > 0.0
            && self.k > 1.0
            && self.phi > 0.0
            && self.tau.is_finite()
            && self.epsilon.is_finite()
            && self.sigma.is_finite()
            && self.k.is_finite()
            && self.phi.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!("invalid xDoG parameters {self:?}")))
        }
    }
}

/// Index into `[0, n)` with half-sample symmetric reflection (`-1 -> 0`, `n -> n-1`).
#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Normalized 1-D Gaussian taps for offsets `-r..=r`, `r = ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|v| v / sum).collect()
}

/// Separable Gaussian blur applied independently to every channel.
pub fn gaussian_blur(image: &Tensor, sigma: f64) -> Result<Tensor> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::Domain(format!("blur sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let (c, h, w) = image.shape();
    let mut horiz = Tensor::zeros(c, h, w);
    for ch in 0..c {
        let src = image.plane(ch);
        let dst = horiz.plane_mut(ch);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &wt) in kernel.iter().enumerate() {
                    let xx = reflect(x as isize + k as isize - r, w);
                    acc += wt * src[y * w + xx];
                }
                dst[y * w + x] = acc;
            }
        }
    }
    let mut out = Tensor::zeros(c, h, w);
    for ch in 0..c {
        let src = horiz.plane(ch);
        let dst = out.plane_mut(ch);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &wt) in kernel.iter().enumerate() {
                    let yy = reflect(y as isize + k as isize - r, h);
                    acc += wt * src[yy * w + x];
                }
                dst[y * w + x] = acc;
            }
        }
    }
    Ok(out)
}

/// `blur(image, sigma) - tau * blur(image, k * sigma)`.
pub fn difference_of_gaussians(image: &Tensor, params: &XDoGParams) -> Result<Tensor> {
    params.validate()?;
    let narrow = gaussian_blur(image, params.sigma)?;
    let wide = gaussian_blur(image, params.k * params.sigma)?;
    let data = narrow
        .data()
        .iter()
        .zip(wide.data())
        .map(|(a, b)| a - params.tau * b)
        .collect();
    Tensor::from_vec(image.channels(), image.height(), image.width(), data)
}

/// Soft threshold mapping a DoG response to a line-drawing tone.
#[inline]
pub fn xdog_threshold(d: f64, epsilon: f64, phi: f64) -> f64 {
    if d >= epsilon {
        1.0
    } else {
        (1.0 + (phi * (d - epsilon)).tanh()).clamp(0.0, 1.0)
    }
}

pub fn xdog(image: &Tensor, params: &XDoGParams) -> Result<Tensor> {
    if image.channels() != 1 {
        return Err(Error::Dimension(format!(
            "xdog expects a grayscale image, got {} channels",
            image.channels()
        )));
    }
    let dog = difference_of_gaussians(image, params)?;
    Ok(dog.map(|d| xdog_threshold(d, params.epsilon, params.phi)))
}

/// Luminance of an RGB tensor (BT.601 weights); grayscale input passes through.
pub fn to_grayscale(image: &Tensor) -> Result<Tensor> {
    match image.channels() {
        1 => Ok(image.clone()),
        3 => {
            let (h, w) = (image.height(), image.width());
            let (r, g, b) = (image.plane(0), image.plane(1), image.plane(2));
            let data = (0..h * w)
                .map(|i| {
                    if r[i] == g[i] && g[i] == b[i] {
                        r[i]
                    } else {
                        LUMA_WEIGHTS[0] * r[i] + LUMA_WEIGHTS[1] * g[i] + LUMA_WEIGHTS[2] * b[i]
                    }
                })
                .collect();
            Tensor::from_vec(1, h, w, data)
        }
        n => Err(Error::Dimension(format!("cannot convert {n} channels to luminance"))),
    }
}

/// Renders one xDoG sketch per photo into `out_dir/sketches` and writes
/// `out_dir/manifest.csv` pointing at the original photos.
pub fn sketchify_dataset(
    manifest: &DatasetManifest,
    params: &XDoGParams,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    params.validate()?;
    let sketch_dir = out_dir.join("sketches");
    std::fs::create_dir_all(&sketch_dir).map_err(|e| Error::io(&sketch_dir, e))?;
    let entries = manifest
        .entries
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let photo_path = manifest.resolve(&e.photo_path);
            let photo = Tensor::load_png(&photo_path)?;
            let sketch = xdog(&to_grayscale(&photo)?, params)?;
            let rel = Path::new("sketches").join(format!("{i:06}.png"));
            sketch.save_png(&out_dir.join(&rel))?;
            let photo_path = std::path::absolute(&photo_path).map_err(|err| Error::io(&photo_path, err))?;
            Ok(ManifestEntry {
                photo_path,
                sketch_path: rel,
                identity: e.identity,
                attributes: e.attributes.clone(),
                witness_attributes: e.witness_attributes.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let out = DatasetManifest {
        vocabulary: manifest.vocabulary.clone(),
        entries,
        base_dir: out_dir.to_path_buf(),
    };
    out.save(&out_dir.join("manifest.csv"))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Direct 2-D convolution with a non-separable kernel evaluation.
    fn dense_blur(image: &Tensor, sigma: f64) -> Tensor {
        let r = (3.0 * sigma).ceil() as isize;
        let mut norm = 0.0;
        for dy in -r..=r {
            for dx in -r..=r {
                norm += (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
            }
        }
        let (h, w) = (image.height(), image.width());
        Tensor::from_fn(1, h, w, |_, y, x| {
            let mut acc = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let wt = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp() / norm;
                    let yy = reflect(y as isize + dy, h);
                    let xx = reflect(x as isize + dx, w);
                    acc += wt * image.get(0, yy, xx);
                }
            }
            acc
        })
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 0);
        assert_eq!(reflect(-2, 5), 1);
        assert_eq!(reflect(5, 5), 4);
        assert_eq!(reflect(6, 5), 3);
        assert_eq!(reflect(2, 5), 2);
        assert_eq!(reflect(-7, 3), 0);
    }

    #[test]
    fn zero_sigma_is_identity() {
        let t = Tensor::from_fn(1, 6, 7, |_, y, x| ((y * 7 + x) % 5) as f64 / 4.0);
        assert_eq!(gaussian_blur(&t, 0.0).unwrap(), t);
    }

    #[test]
    fn negative_sigma_rejected() {
        let t = Tensor::zeros(1, 3, 3);
        assert!(matches!(gaussian_blur(&t, -0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn constant_image_stays_constant() {
        let t = Tensor::filled(1, 9, 11, 0.37);
        let b = gaussian_blur(&t, 1.7).unwrap();
        assert!(b.data().iter().all(|v| (v - 0.37).abs() < 1e-12));
    }

    #[test]
    fn impulse_matches_sampled_gaussian() {
        let mut t = Tensor::zeros(1, 15, 15);
        t.set(0, 7, 7, 1.0);
        let b = gaussian_blur(&t, 1.0).unwrap();
        let oracle = dense_blur(&t, 1.0);
        assert!(b.max_abs_diff(&oracle) < 1e-6);
        // Peak weight of a normalized 7x7 window at sigma 1.
        let g = gaussian_kernel(1.0);
        assert!((b.get(0, 7, 7) - g[3] * g[3]).abs() < 1e-15);
    }

    #[test]
    fn constant_image_uniform_xdog() {
        let p = XDoGParams::default();
        let t = Tensor::filled(1, 12, 12, 0.6);
        let dog = difference_of_gaussians(&t, &p).unwrap();
        assert!(dog.data().iter().all(|d| (d - 0.6 * (1.0 - p.tau)).abs() < 1e-12));
        let out = xdog(&t, &p).unwrap();
        let first = out.data()[0];
        assert!(out.data().iter().all(|&v| v == first));
    }

    #[test]
    fn step_edge_dog_matches_dense_oracle() {
        let p = XDoGParams { epsilon: -0.1, ..Default::default() };
        let t = Tensor::from_fn(1, 32, 32, |_, _, x| if x < 16 { 0.2 } else { 0.9 });
        let dog = difference_of_gaussians(&t, &p).unwrap();
        let n = dense_blur(&t, p.sigma);
        let wide = dense_blur(&t, p.k * p.sigma);
        let oracle = Tensor::from_fn(1, 32, 32, |_, y, x| n.get(0, y, x) - p.tau * wide.get(0, y, x));
        assert!(dog.max_abs_diff(&oracle) < 1e-6);
        // A unit step never pushes D below -0.1, so that threshold draws nothing.
        let unit = Tensor::from_fn(1, 32, 32, |_, _, x| if x < 16 { 0.0 } else { 1.0 });
        let out = xdog(&unit, &p).unwrap();
        assert!(out.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn step_edge_dark_band_at_edge() {
        let p = XDoGParams::default();
        let t = Tensor::from_fn(1, 32, 32, |_, _, x| if x < 16 { 0.1 } else { 0.9 });
        let out = xdog(&t, &p).unwrap();
        let row: Vec<f64> = (0..32).map(|x| out.get(0, 16, x)).collect();
        let darkest = row
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert!((13..=16).contains(&darkest), "dark band at {darkest}: {row:?}");
        assert!(row[darkest] < 0.5);
        assert_eq!(row[2], 1.0);
        assert_eq!(row[29], 1.0);
    }

    #[test]
    fn invalid_params_rejected() {
        let t = Tensor::zeros(1, 4, 4);
        for p in [
            XDoGParams { sigma: 0.0, ..Default::default() },
            XDoGParams { k: 1.0, ..Default::default() },
            XDoGParams { phi: 0.0, ..Default::default() },
        ] {
            assert!(matches!(xdog(&t, &p), Err(Error::Domain(_))));
        }
    }

    #[test]
    fn equal_rgb_channels_match_grayscale() {
        let g = Tensor::from_fn(1, 8, 8, |_, y, x| ((y * 8 + x) * 3 % 256) as f64 / 255.0);
        let rgb = Tensor::concat_channels(&[&g, &g, &g]).unwrap();
        let p = XDoGParams::default();
        assert_eq!(xdog(&to_grayscale(&rgb).unwrap(), &p).unwrap(), xdog(&g, &p).unwrap());
    }

    fn arb_image(h: usize, w: usize) -> impl Strategy<Value = Tensor> {
        proptest::collection::vec(0.0f64..=1.0, h * w)
            .prop_map(move |d| Tensor::from_vec(1, h, w, d).unwrap())
    }

    proptest! {
        #[test]
        fn output_in_unit_range(img in arb_image(10, 9)) {
            let out = xdog(&img, &XDoGParams::default()).unwrap();
            prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn blur_commutes_with_flip(img in arb_image(7, 10), sigma in 0.1f64..3.0) {
            let flip = |t: &Tensor| Tensor::from_fn(1, t.height(), t.width(), |_, y, x| t.get(0, y, t.width() - 1 - x));
            let a = gaussian_blur(&flip(&img), sigma).unwrap();
            let b = flip(&gaussian_blur(&img, sigma).unwrap());
            prop_assert!(a.max_abs_diff(&b) < 1e-12);
        }

        #[test]
        fn unit_tau_ignores_offsets(img in arb_image(8, 8), c in -0.5f64..0.5) {
            let p = XDoGParams { tau: 1.0, ..Default::default() };
            let a = difference_of_gaussians(&img, &p).unwrap();
            let b = difference_of_gaussians(&img.map(|v| v + c), &p).unwrap();
            prop_assert!(a.max_abs_diff(&b) < 1e-12);
        }

        #[test]
        fn threshold_monotone_in_epsilon(d in -1.0f64..1.0, e1 in -0.5f64..0.5, de in 0.0f64..0.5) {
            prop_assert!(xdog_threshold(d, e1 + de, 200.0) <= xdog_threshold(d, e1, 200.0));
        }
    }
}
