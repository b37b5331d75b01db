//! Random translation + rotation of 28x28 digits.
//!
//! The transform is a single affine map applied by inverse mapping with
//! bilinear interpolation: rotate by `theta` about the image center
//! (13.5, 13.5), then shift by `(dx, dy)` in output coordinates. Samples that
//! fall outside the source image read as 0 (black background). Coordinates are
//! `(x, y)` = (column, row), y pointing down, so positive `theta` turns the
//! digit clockwise on screen.

use rand::Rng;

use crate::data::idx::IMAGE_SIDE;
use crate::error::{Error, Result};

const CENTER: f32 = (IMAGE_SIDE as f32 - 1.0) / 2.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub translate_enabled: bool,
    pub rotate_enabled: bool,
    /// Maximum shift as a fraction of the image side.
    pub max_translate_fraction: f32,
    pub max_rotate_degrees: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            translate_enabled: true,
            rotate_enabled: true,
            max_translate_fraction: 0.20,
            max_rotate_degrees: 20.0,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self { translate_enabled: false, rotate_enabled: false, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.max_translate_fraction) {
            return Err(Error::Config(format!(
                "max_translate_fraction {} outside [0, 1]",
                self.max_translate_fraction
            )));
        }
        if !(0.0..=180.0).contains(&self.max_rotate_degrees) {
            return Err(Error::Config(format!(
                "max_rotate_degrees {} outside [0, 180]",
                self.max_rotate_degrees
            )));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        !self.translate_enabled && !self.rotate_enabled
    }

    pub fn max_shift_pixels(&self) -> f32 {
        IMAGE_SIDE as f32 * self.max_translate_fraction
    }
}

/// One draw of augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AffineParams {
    pub dx: i32,
    pub dy: i32,
    pub theta: f32,
}

impl AffineParams {
    pub fn identity() -> Self {
        Self::default()
    }
}

/// Shifts are drawn continuously in `[-max, max]` and rounded to whole pixels;
/// the angle stays continuous.
pub fn sample_affine<R: Rng + ?Sized>(rng: &mut R, config: &AugmentConfig) -> AffineParams {
    let mut params = AffineParams::identity();
    if config.translate_enabled {
        let max = config.max_shift_pixels();
        if max > 0.0 {
            params.dx = rng.gen_range(-max..=max).round() as i32;
            params.dy = rng.gen_range(-max..=max).round() as i32;
        }
    }
    if config.rotate_enabled && config.max_rotate_degrees > 0.0 {
        let max = config.max_rotate_degrees;
        params.theta = rng.gen_range(-max..=max);
    }
    params
}

/// Applies `params` to a 28x28 image given in the [0, 255] float domain.
pub fn apply_affine(image: &[f32], params: AffineParams) -> Vec<f32> {
    let mut out = vec![0.0; IMAGE_SIDE * IMAGE_SIDE];
    apply_affine_into(image, params, &mut out);
    out
}

pub fn apply_affine_into(image: &[f32], params: AffineParams, out: &mut [f32]) {
    let side = IMAGE_SIDE;
    assert_eq!(image.len(), side * side, "apply_affine expects a 28x28 image");
    assert_eq!(out.len(), side * side);

    if params.theta == 0.0 {
        translate_exact(image, params.dx, params.dy, out);
        return;
    }

    let (sin, cos) = params.theta.to_radians().sin_cos();
    let (dx, dy) = (params.dx as f32, params.dy as f32);
    let pixel = |x: isize, y: isize| -> f32 {
        if x < 0 || y < 0 || x >= side as isize || y >= side as isize {
            0.0
        } else {
            image[y as usize * side + x as usize]
        }
    };

    for oy in 0..side {
        for ox in 0..side {
            // Undo the translation, then rotate back by -theta about the center.
            let u = ox as f32 - dx - CENTER;
            let v = oy as f32 - dy - CENTER;
            let sx = cos * u + sin * v + CENTER;
            let sy = -sin * u + cos * v + CENTER;

            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = sx - x0;
            let fy = sy - y0;
            let (x0, y0) = (x0 as isize, y0 as isize);
            out[oy * side + ox] = (1.0 - fy) * ((1.0 - fx) * pixel(x0, y0) + fx * pixel(x0 + 1, y0))
                + fy * ((1.0 - fx) * pixel(x0, y0 + 1) + fx * pixel(x0 + 1, y0 + 1));
        }
    }
}

// Integer shifts sample exactly on the grid, so bilinear reduces to a copy.
fn translate_exact(image: &[f32], dx: i32, dy: i32, out: &mut [f32]) {
    let side = IMAGE_SIDE as i32;
    out.iter_mut().for_each(|v| *v = 0.0);
    for oy in 0..side {
        let sy = oy - dy;
        if !(0..side).contains(&sy) {
            continue;
        }
        for ox in 0..side {
            let sx = ox - dx;
            if (0..side).contains(&sx) {
                out[(oy * side + ox) as usize] = image[(sy * side + sx) as usize];
            }
        }
    }
}
