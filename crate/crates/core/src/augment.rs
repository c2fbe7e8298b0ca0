//! Geometric augmentation: control-point deformation, scale-and-crop, and
//! horizontal flip, applied jointly to sketch/photo training pairs.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{PhotoSample, SketchSample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Must be a perfect square; points sit on a centered grid.
    pub num_control_points: usize,
    /// Upper bound on the per-point shift, in pixels.
    pub max_displacement: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub crop_height: usize,
    pub crop_width: usize,
    pub flip_probability: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            num_control_points: 25,
            max_displacement: 5.0,
            scale_min: 1.0,
            scale_max: 1.15,
            crop_height: 250,
            crop_width: 200,
            flip_probability: 0.5,
        }
    }
}

impl AugmentConfig {
    /// Defaults rescaled to a smaller canvas.
    pub fn for_size(height: usize, width: usize) -> Self {
        let base = Self::default();
        let ratio = (height as f64 / base.crop_height as f64).min(width as f64 / base.crop_width as f64);
        Self {
            max_displacement: base.max_displacement * ratio,
            crop_height: height,
            crop_width: width,
            ..base
        }
    }

    /// No deformation, unit scale, no flip.
    pub fn identity(height: usize, width: usize) -> Self {
        Self {
            max_displacement: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            flip_probability: 0.0,
            crop_height: height,
            crop_width: width,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let side = grid_side(self.num_control_points)?;
        if side == 0 {
            return Err(Error::Config("at least one control point is required".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::Config(format!(
                "flip_probability {} outside [0,1]",
                self.flip_probability
            )));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max && self.scale_max.is_finite()) {
            return Err(Error::Config(format!(
                "invalid scale range [{}, {}]",
                self.scale_min, self.scale_max
            )));
        }
        if !(self.max_displacement >= 0.0 && self.max_displacement.is_finite()) {
            return Err(Error::Config(format!(
                "max_displacement {} must be finite and >= 0",
                self.max_displacement
            )));
        }
        if self.crop_height == 0 || self.crop_width == 0 {
            return Err(Error::Config("crop dimensions must be positive".into()));
        }
        Ok(())
    }
}

fn grid_side(points: usize) -> Result<usize> {
    let side = (points as f64).sqrt().round() as usize;
    if side * side != points {
        return Err(Error::Config(format!(
            "num_control_points {points} is not a perfect square"
        )));
    }
    Ok(side)
}

/// Control-point coordinates `(y, x)` on a centered `side × side` grid:
/// the i-th coordinate along an axis of length `n` is `(i + 0.5) n / side`.
pub fn control_grid(height: usize, width: usize, points: usize) -> Result<Vec<(f64, f64)>> {
    let side = grid_side(points)?;
    let coord = |i: usize, n: usize| (i as f64 + 0.5) * n as f64 / side as f64;
    let mut out = Vec::with_capacity(points);
    for gy in 0..side {
        for gx in 0..side {
            out.push((coord(gy, height), coord(gx, width)));
        }
    }
    Ok(out)
}

#[inline]
fn tps_kernel(r2: f64) -> f64 {
    if r2 == 0.0 {
        0.0
    } else {
        0.5 * r2 * r2.ln()
    }
}

/// Thin-plate spline interpolating scalar values at 2-D control points.
#[derive(Debug, Clone)]
pub struct ThinPlateSpline {
    points: Vec<(f64, f64)>,
    weights: Vec<f64>,
    affine: [f64; 3],
}

impl ThinPlateSpline {
    pub fn fit(points: &[(f64, f64)], values: &[f64]) -> Result<Self> {
        let n = points.len();
        if n != values.len() || n < 3 {
            return Err(Error::Dimension(format!(
                "thin-plate spline needs >= 3 points with one value each (got {n} points, {} values)",
                values.len()
            )));
        }
        let mut a = DMatrix::<f64>::zeros(n + 3, n + 3);
        let mut b = DVector::<f64>::zeros(n + 3);
        for i in 0..n {
            for j in 0..n {
                let dy = points[i].0 - points[j].0;
                let dx = points[i].1 - points[j].1;
                a[(i, j)] = tps_kernel(dy * dy + dx * dx);
            }
            let row = [1.0, points[i].0, points[i].1];
            for (k, v) in row.into_iter().enumerate() {
                a[(i, n + k)] = v;
                a[(n + k, i)] = v;
            }
            b[i] = values[i];
        }
        let sol = a
            .lu()
            .solve(&b)
            .ok_or_else(|| Error::Numeric("singular thin-plate spline system".into()))?;
        Ok(Self {
            points: points.to_vec(),
            weights: sol.rows(0, n).iter().copied().collect(),
            affine: [sol[n], sol[n + 1], sol[n + 2]],
        })
    }

    pub fn eval(&self, y: f64, x: f64) -> f64 {
        let mut v = self.affine[0] + self.affine[1] * y + self.affine[2] * x;
        for (&(py, px), &w) in self.points.iter().zip(&self.weights) {
            let (dy, dx) = (y - py, x - px);
            v += w * tps_kernel(dy * dy + dx * dx);
        }
        v
    }
}

/// Warps `image` by a dense offset field: `out(p) = image(p + d(p))`, where
/// `d` interpolates the control-point shifts.
pub fn warp_with_control_shifts(
    image: &Tensor,
    points: &[(f64, f64)],
    shifts: &[(f64, f64)],
) -> Result<Tensor> {
    if shifts.iter().all(|&(dy, dx)| dy == 0.0 && dx == 0.0) {
        return Ok(image.clone());
    }
    let ys: Vec<f64> = shifts.iter().map(|s| s.0).collect();
    let xs: Vec<f64> = shifts.iter().map(|s| s.1).collect();
    let fy = ThinPlateSpline::fit(points, &ys)?;
    let fx = ThinPlateSpline::fit(points, &xs)?;
    let (c, h, w) = image.shape();
    let mut field = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (yf, xf) = (y as f64, x as f64);
            field.push((yf + fy.eval(yf, xf), xf + fx.eval(yf, xf)));
        }
    }
    Ok(Tensor::from_fn(c, h, w, |ch, y, x| {
        let (sy, sx) = field[y * w + x];
        image.bilinear(ch, sy, sx)
    }))
}

/// Random control-point deformation; deterministic given `seed`.
pub fn random_deform(image: &Tensor, config: &AugmentConfig, seed: u64) -> Result<Tensor> {
    let points = control_grid(image.height(), image.width(), config.num_control_points)?;
    if image.height() <= 2 || image.width() <= 2 {
        return Err(Error::Dimension(format!(
            "deformation needs an image larger than 2x2, got {}x{}",
            image.height(),
            image.width()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shifts: Vec<(f64, f64)> = points
        .iter()
        .map(|_| {
            let magnitude = config.max_displacement * rng.random::<f64>();
            let angle = std::f64::consts::TAU * rng.random::<f64>();
            (magnitude * angle.sin(), magnitude * angle.cos())
        })
        .collect();
    warp_with_control_shifts(image, &points, &shifts)
}

fn check_scale_precondition(image: &Tensor, config: &AugmentConfig) -> Result<()> {
    let h = (image.height() as f64 * config.scale_min).round() as usize;
    let w = (image.width() as f64 * config.scale_min).round() as usize;
    if h < config.crop_height || w < config.crop_width {
        return Err(Error::Config(format!(
            "{}x{} image at scale {} cannot cover a {}x{} crop",
            image.height(),
            image.width(),
            config.scale_min,
            config.crop_height,
            config.crop_width
        )));
    }
    Ok(())
}

/// Resizes by a uniform random scale and takes the centered crop.
pub fn scale_and_crop(image: &Tensor, config: &AugmentConfig, seed: u64) -> Result<Tensor> {
    check_scale_precondition(image, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = if config.scale_max > config.scale_min {
        rng.random_range(config.scale_min..=config.scale_max)
    } else {
        config.scale_min
    };
    let h = ((image.height() as f64 * scale).round() as usize).max(config.crop_height);
    let w = ((image.width() as f64 * scale).round() as usize).max(config.crop_width);
    let scaled = image.resize(h, w);
    scaled.crop(
        (h - config.crop_height) / 2,
        (w - config.crop_width) / 2,
        config.crop_height,
        config.crop_width,
    )
}

pub fn hflip(image: &Tensor) -> Tensor {
    let w = image.width();
    Tensor::from_fn(image.channels(), image.height(), w, |c, y, x| {
        image.get(c, y, w - 1 - x)
    })
}

/// Deformation then scale-crop then optional flip for a single image.
pub fn augment_image(image: &Tensor, config: &AugmentConfig, seed: u64, flip: bool) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let deform_seed = rng.next_u64();
    let scale_seed = rng.next_u64();
    let deformed = random_deform(image, config, deform_seed)?;
    let cropped = scale_and_crop(&deformed, config, scale_seed)?;
    Ok(if flip { hflip(&cropped) } else { cropped })
}

/// Augments a sketch on its own, drawing its own flip decision.
pub fn augment_sketch(sketch: &SketchSample, config: &AugmentConfig, seed: u64) -> Result<SketchSample> {
    config.validate()?;
    check_scale_precondition(&sketch.image, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flip = rng.random_bool(config.flip_probability);
    Ok(SketchSample {
        image: augment_image(&sketch.image, config, rng.next_u64(), flip)?,
        ..sketch.clone()
    })
}

/// Augments a photo on its own, drawing its own flip decision.
pub fn augment_photo(photo: &PhotoSample, config: &AugmentConfig, seed: u64) -> Result<PhotoSample> {
    config.validate()?;
    check_scale_precondition(&photo.image, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flip = rng.random_bool(config.flip_probability);
    Ok(PhotoSample {
        image: augment_image(&photo.image, config, rng.next_u64(), flip)?,
        ..photo.clone()
    })
}

/// Augments a corresponding photo/sketch pair. The flip decision is shared;
/// deformation and scale are drawn independently per modality.
pub fn augment_pair(
    photo: &PhotoSample,
    sketch: &SketchSample,
    config: &AugmentConfig,
    seed: u64,
) -> Result<(PhotoSample, SketchSample)> {
    config.validate()?;
    check_scale_precondition(&photo.image, config)?;
    check_scale_precondition(&sketch.image, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flip = rng.random_bool(config.flip_probability);
    let photo_seed = rng.next_u64();
    let sketch_seed = rng.next_u64();
    let photo_out = PhotoSample {
        image: augment_image(&photo.image, config, photo_seed, flip)?,
        ..photo.clone()
    };
    let sketch_out = SketchSample {
        image: augment_image(&sketch.image, config, sketch_seed, flip)?,
        ..sketch.clone()
    };
    Ok((photo_out, sketch_out))
}
