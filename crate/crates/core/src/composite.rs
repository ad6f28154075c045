//! Sprite augmentation and compositing onto backgrounds.
//!
//! Order of operations for one training image: rotate the sprite, place it on the
//! exposure-adjusted background, then blur and brighten the whole composite. The coverage
//! mask follows the rotation and placement only.

use crate::doe::{derive_seed, CompositePlan};
use crate::mask::Mask;
use crate::render::Sprite;
use image::{Rgb, RgbImage, Rgba, RgbaImage};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const MAX_ROTATION_DEG: f64 = 30.0;
pub const BLUR_KERNELS: [u32; 3] = [1, 3, 5];
pub const MAX_BRIGHTNESS_DELTA: u8 = 50;
/// Minimum gap between the part's coverage and every canvas border.
pub const PLACEMENT_MARGIN: i64 = 8;
/// Resampled pixels below a quarter coverage are dropped, matching the smallest
/// nonzero alpha of a 2×2-supersampled render.
pub const RESAMPLED_MIN_ALPHA: u8 = 64;

#[derive(Debug, Error)]
pub enum CompositeError {
    #[error("exposure multiplier {0} must be positive and finite")]
    InvalidExposure(f64),
    #[error("blur kernel {0} not in {{1, 3, 5}}")]
    InvalidKernel(u32),
    #[error("brightness delta {0} exceeds 50")]
    InvalidBrightness(u8),
    #[error("rotation {0}° is not finite")]
    InvalidRotation(f64),
    #[error("sprite coverage leaves the canvas at placement ({0}, {1})")]
    Frame(i64, i64),
    #[error("sprite has no coverage")]
    EmptySprite,
    #[error("part ({0}×{1} px after rotation) does not fit the canvas with margins")]
    NoValidPlacement(u32, u32),
    #[error("background {path}: {source}")]
    BackgroundFile {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackgroundSource {
    Procedural,
    File,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Background {
    pub id: u32,
    pub rgb: RgbImage,
    pub source: BackgroundSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub rotation_deg: f64,
    pub blur_kernel: u32,
    pub brightness_delta: u8,
    /// Canvas position of the rotated sprite's top-left corner.
    pub placement: [i64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub plan: CompositePlan,
    pub augment: AugmentParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositeImage {
    pub rgb: RgbImage,
    /// Part coverage in canvas coordinates (pre-blur).
    pub mask: Mask,
    pub provenance: Option<Provenance>,
}

/// Scales every channel by `multiplier`, rounding half away from zero and saturating.
pub fn exposure_adjust(bg: &Background, multiplier: f64) -> Result<Background, CompositeError> {
    if !(multiplier > 0.0 && multiplier.is_finite()) {
        return Err(CompositeError::InvalidExposure(multiplier));
    }
    let lut: Vec<u8> = (0..=255u32)
        .map(|v| (v as f64 * multiplier).round().clamp(0.0, 255.0) as u8)
        .collect();
    let mut rgb = bg.rgb.clone();
    for v in rgb.iter_mut() {
        *v = lut[*v as usize];
    }
    Ok(Background {
        id: bg.id,
        rgb,
        source: bg.source,
    })
}

const PALETTE: [[f64; 3]; 5] = [
    [96.0, 100.0, 108.0],
    [128.0, 108.0, 84.0],
    [72.0, 96.0, 84.0],
    [112.0, 110.0, 126.0],
    [88.0, 82.0, 96.0],
];

/// Deterministic station-like texture: gradient, two octaves of value noise and a few
/// low-contrast rectangles. Ids beyond the built-in palette get a seeded base colour.
pub fn make_procedural_background(id: u32, seed: u64, size: u32) -> Background {
    let mut rng: ChaCha8Rng = rand::SeedableRng::seed_from_u64(derive_seed(seed, &[0xB6, id as u64]));
    let base = match PALETTE.get(id as usize) {
        Some(c) => *c,
        None => [
            rng.gen_range(60.0..140.0),
            rng.gen_range(60.0..140.0),
            rng.gen_range(60.0..140.0),
        ],
    };
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (gx, gy) = (angle.cos(), angle.sin());
    let gradient_amp: f64 = rng.gen_range(22.0..34.0);
    let coarse = NoiseGrid::new(&mut rng, 9);
    let fine = NoiseGrid::new(&mut rng, 33);
    let tint: [f64; 3] = [rng.gen_range(0.8..1.2), rng.gen_range(0.8..1.2), rng.gen_range(0.8..1.2)];

    let n = size as f64;
    let mut field = vec![[0.0f64; 3]; (size * size) as usize];
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 + 0.5) / n;
            let v = (y as f64 + 0.5) / n;
            let g = gradient_amp * ((u - 0.5) * gx + (v - 0.5) * gy) * 2.0;
            let noise = 16.0 * coarse.sample(u, v) + 7.0 * fine.sample(u, v);
            let px = &mut field[(y * size + x) as usize];
            for c in 0..3 {
                px[c] = base[c] + g + noise * tint[c];
            }
        }
    }
    let rects = rng.gen_range(4..8);
    for _ in 0..rects {
        let w = rng.gen_range(size / 12..size / 3);
        let h = rng.gen_range(size / 12..size / 3);
        let x0 = rng.gen_range(0..size - w);
        let y0 = rng.gen_range(0..size - h);
        let shift: f64 = rng.gen_range(-18.0..18.0);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                for c in &mut field[(y * size + x) as usize] {
                    *c += shift;
                }
            }
        }
    }
    let rgb = RgbImage::from_fn(size, size, |x, y| {
        let px = field[(y * size + x) as usize];
        Rgb(px.map(|v| v.round().clamp(0.0, 255.0) as u8))
    });
    Background {
        id,
        rgb,
        source: BackgroundSource::Procedural,
    }
}

/// Lattice of uniform values in [-1, 1], bilinearly interpolated.
struct NoiseGrid {
    n: usize,
    values: Vec<f64>,
}

impl NoiseGrid {
    fn new(rng: &mut ChaCha8Rng, n: usize) -> Self {
        let values = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Self { n, values }
    }

    fn sample(&self, u: f64, v: f64) -> f64 {
        let s = (self.n - 1) as f64;
        let (fx, fy) = (u * s, v * s);
        let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.n - 1), (y0 + 1).min(self.n - 1));
        let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
        let at = |x: usize, y: usize| self.values[y * self.n + x];
        let top = at(x0, y0) * (1.0 - tx) + at(x1, y0) * tx;
        let bottom = at(x0, y1) * (1.0 - tx) + at(x1, y1) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}

/// Loads a user background, centre-cropping to a square and resizing to `size`.
pub fn load_background_file(path: &Path, id: u32, size: u32) -> Result<Background, CompositeError> {
    let img = image::open(path)
        .map_err(|source| CompositeError::BackgroundFile {
            path: path.display().to_string(),
            source,
        })?
        .to_rgb8();
    let side = img.width().min(img.height());
    let x0 = (img.width() - side) / 2;
    let y0 = (img.height() - side) / 2;
    let square = image::imageops::crop_imm(&img, x0, y0, side, side).to_image();
    let rgb = if side == size {
        square
    } else {
        image::imageops::resize(&square, size, size, image::imageops::FilterType::Triangle)
    };
    Ok(Background {
        id,
        rgb,
        source: BackgroundSource::File,
    })
}

/// Rotates a sprite about its centre with bilinear resampling of premultiplied RGBA.
///
/// Positive angles turn the image counter-clockwise as displayed. The output canvas is
/// the rotated input rectangle's bounding box, so no coverage is lost. Output pixels with
/// alpha below [`RESAMPLED_MIN_ALPHA`] are cleared so the coverage area is preserved. A
/// zero angle returns the input unchanged.
pub fn rotate_sprite(sprite: &Sprite, rotation_deg: f64) -> Result<Sprite, CompositeError> {
    if !rotation_deg.is_finite() {
        return Err(CompositeError::InvalidRotation(rotation_deg));
    }
    if rotation_deg == 0.0 {
        return Ok(sprite.clone());
    }
    let (w, h) = (sprite.width() as f64, sprite.height() as f64);
    let (sin, cos) = rotation_deg.to_radians().sin_cos();
    let out_w = (w * cos.abs() + h * sin.abs() - 1e-9).ceil().max(1.0) as u32;
    let out_h = (w * sin.abs() + h * cos.abs() - 1e-9).ceil().max(1.0) as u32;
    let (cx_in, cy_in) = (0.5 * w, 0.5 * h);
    let (cx_out, cy_out) = (0.5 * out_w as f64, 0.5 * out_h as f64);

    let src = &sprite.rgba;
    let (sw, sh) = (src.width() as i64, src.height() as i64);
    let premul = |x: i64, y: i64| -> [f64; 4] {
        if x < 0 || y < 0 || x >= sw || y >= sh {
            return [0.0; 4];
        }
        let p = src.get_pixel(x as u32, y as u32);
        let a = p[3] as f64 / 255.0;
        [p[0] as f64 * a, p[1] as f64 * a, p[2] as f64 * a, a]
    };

    let mut out = RgbaImage::new(out_w, out_h);
    for oy in 0..out_h {
        for ox in 0..out_w {
            let dx = ox as f64 + 0.5 - cx_out;
            let dy = oy as f64 + 0.5 - cy_out;
            // Inverse of the on-screen counter-clockwise turn (y axis points down).
            let sx = cx_in + dx * cos - dy * sin - 0.5;
            let sy = cy_in + dx * sin + dy * cos - 0.5;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (tx, ty) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as i64, y0 as i64);
            let mut acc = [0.0; 4];
            for (xi, yi, wgt) in [
                (x0, y0, (1.0 - tx) * (1.0 - ty)),
                (x0 + 1, y0, tx * (1.0 - ty)),
                (x0, y0 + 1, (1.0 - tx) * ty),
                (x0 + 1, y0 + 1, tx * ty),
            ] {
                if wgt == 0.0 {
                    continue;
                }
                let p = premul(xi, yi);
                for k in 0..4 {
                    acc[k] += wgt * p[k];
                }
            }
            let alpha = (acc[3] * 255.0).round().clamp(0.0, 255.0) as u8;
            if alpha < RESAMPLED_MIN_ALPHA {
                continue;
            }
            let c = [0, 1, 2].map(|k| (acc[k] / acc[3]).round().clamp(0.0, 255.0) as u8);
            out.put_pixel(ox, oy, Rgba([c[0], c[1], c[2], alpha]));
        }
    }
    Ok(Sprite::from_rgba(out))
}

/// Coverage bounding box `[x0, x1) × [y0, y1)` of a sprite.
fn coverage_bounds(mask: &Mask) -> Option<(u32, u32, u32, u32)> {
    let mut b: Option<(u32, u32, u32, u32)> = None;
    for (x, y) in mask.covered() {
        b = Some(match b {
            None => (x, y, x + 1, y + 1),
            Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1)),
        });
    }
    b
}

/// `out = α·sprite + (1 − α)·bg`, rounded half away from zero.
#[inline]
pub fn blend_channel(sprite: u8, bg: u8, alpha: u8) -> u8 {
    let a = alpha as f64 / 255.0;
    (a * sprite as f64 + (1.0 - a) * bg as f64).round() as u8
}

/// Alpha-blends `sprite` over `bg` with its top-left corner at `placement`.
pub fn composite(sprite: &Sprite, bg: &Background, placement: [i64; 2]) -> Result<CompositeImage, CompositeError> {
    let (cw, ch) = (bg.rgb.width() as i64, bg.rgb.height() as i64);
    let (x0, y0, x1, y1) = coverage_bounds(&sprite.mask).ok_or(CompositeError::EmptySprite)?;
    let [px, py] = placement;
    if px + (x0 as i64) < 0 || py + (y0 as i64) < 0 || px + x1 as i64 > cw || py + y1 as i64 > ch {
        return Err(CompositeError::Frame(px, py));
    }
    let mut rgb = bg.rgb.clone();
    let mut mask = Mask::new(bg.rgb.width(), bg.rgb.height());
    for (sx, sy) in sprite.mask.covered() {
        let s = sprite.rgba.get_pixel(sx, sy);
        let (tx, ty) = ((px + sx as i64) as u32, (py + sy as i64) as u32);
        let d = rgb.get_pixel_mut(tx, ty);
        for c in 0..3 {
            d[c] = blend_channel(s[c], d[c], s[3]);
        }
        mask.set(tx, ty, true);
    }
    Ok(CompositeImage {
        rgb,
        mask,
        provenance: None,
    })
}

/// Gaussian standard deviation for an odd kernel size: `0.3·((k − 1)/2 − 1) + 0.8`.
pub fn blur_sigma(kernel: u32) -> f64 {
    0.3 * ((kernel as f64 - 1.0) / 2.0 - 1.0) + 0.8
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_taps(kernel: u32) -> Vec<f64> {
    let sigma = blur_sigma(kernel);
    let c = (kernel / 2) as f64;
    let raw: Vec<f64> = (0..kernel)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

#[inline]
fn reflect101(i: i64, n: i64) -> usize {
    if n == 1 {
        return 0;
    }
    let mut i = i;
    while i < 0 || i >= n {
        i = if i < 0 { -i } else { 2 * (n - 1) - i };
    }
    i as usize
}

/// Separable Gaussian blur (reflect-101 borders) followed by a saturating brightness lift.
pub fn finalize(image: &RgbImage, blur_kernel: u32, brightness_delta: u8) -> Result<RgbImage, CompositeError> {
    if !BLUR_KERNELS.contains(&blur_kernel) {
        return Err(CompositeError::InvalidKernel(blur_kernel));
    }
    if brightness_delta > MAX_BRIGHTNESS_DELTA {
        return Err(CompositeError::InvalidBrightness(brightness_delta));
    }
    let mut out = if blur_kernel == 1 {
        image.clone()
    } else {
        gaussian_blur(image, &gaussian_taps(blur_kernel))
    };
    if brightness_delta > 0 {
        for v in out.iter_mut() {
            *v = v.saturating_add(brightness_delta);
        }
    }
    Ok(out)
}

fn gaussian_blur(image: &RgbImage, taps: &[f64]) -> RgbImage {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let r = (taps.len() / 2) as i64;
    let src = image.as_raw();
    let mut tmp = vec![0.0f64; w * h * 3];
    for y in 0..h {
        let row = &src[y * w * 3..(y + 1) * w * 3];
        let out = &mut tmp[y * w * 3..(y + 1) * w * 3];
        for x in 0..w {
            let mut acc = [0.0; 3];
            for (k, &t) in taps.iter().enumerate() {
                let sx = reflect101(x as i64 + k as i64 - r, w as i64);
                for c in 0..3 {
                    acc[c] += t * row[sx * 3 + c] as f64;
                }
            }
            out[x * 3..x * 3 + 3].copy_from_slice(&acc);
        }
    }
    let mut dst = vec![0u8; w * h * 3];
    for y in 0..h {
        let rows: Vec<usize> = (0..taps.len())
            .map(|k| reflect101(y as i64 + k as i64 - r, h as i64))
            .collect();
        let out = &mut dst[y * w * 3..(y + 1) * w * 3];
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                acc += t * tmp[rows[k] * w * 3 + i];
            }
            *o = acc.round().clamp(0.0, 255.0) as u8;
        }
    }
    RgbImage::from_raw(w as u32, h as u32, dst).expect("buffer size matches")
}

/// Draws rotation, blur kernel and brightness from the plan's generator.
pub fn draw_appearance(rng: &mut ChaCha8Rng) -> (f64, u32, u8) {
    let rotation = rng.gen_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG);
    let kernel = BLUR_KERNELS[rng.gen_range(0..BLUR_KERNELS.len())];
    let delta = rng.gen_range(0..=MAX_BRIGHTNESS_DELTA);
    (rotation, kernel, delta)
}

/// Uniform top-left placement keeping coverage at least [`PLACEMENT_MARGIN`] px from
/// every border.
pub fn draw_placement(rng: &mut ChaCha8Rng, sprite: &Sprite, canvas: [u32; 2]) -> Result<[i64; 2], CompositeError> {
    let (x0, y0, x1, y1) = coverage_bounds(&sprite.mask).ok_or(CompositeError::EmptySprite)?;
    let lo_x = PLACEMENT_MARGIN - x0 as i64;
    let hi_x = canvas[0] as i64 - PLACEMENT_MARGIN - x1 as i64;
    let lo_y = PLACEMENT_MARGIN - y0 as i64;
    let hi_y = canvas[1] as i64 - PLACEMENT_MARGIN - y1 as i64;
    if lo_x > hi_x || lo_y > hi_y {
        return Err(CompositeError::NoValidPlacement(x1 - x0, y1 - y0));
    }
    Ok([rng.gen_range(lo_x..=hi_x), rng.gen_range(lo_y..=hi_y)])
}

/// Produces the final image for one plan. All randomness comes from `plan.derived_seed`.
///
/// Returns the finished RGB image together with the pre-blur composite (mask and
/// provenance).
pub fn compose_plan(plan: &CompositePlan, sprite: &Sprite, background: &Background) -> Result<(RgbImage, CompositeImage), CompositeError> {
    let mut rng: ChaCha8Rng = rand::SeedableRng::seed_from_u64(plan.derived_seed);
    let (rotation_deg, blur_kernel, brightness_delta) = draw_appearance(&mut rng);
    let rotated = rotate_sprite(sprite, rotation_deg)?;
    let canvas = [background.rgb.width(), background.rgb.height()];
    let placement = draw_placement(&mut rng, &rotated, canvas)?;
    let bg = exposure_adjust(background, plan.exposure_level)?;
    let mut comp = composite(&rotated, &bg, placement)?;
    let finished = finalize(&comp.rgb, blur_kernel, brightness_delta)?;
    comp.provenance = Some(Provenance {
        plan: plan.clone(),
        augment: AugmentParams {
            rotation_deg,
            blur_kernel,
            brightness_delta,
            placement,
        },
    });
    Ok((finished, comp))
}
