//! Seeded synthetic slides with known ground truth.
//!
//! A slide is white background with a few irregular "tissue" blobs in a pink
//! band and "tumour" blobs in a purple band nested inside the tissue. Both
//! bands carry low-frequency and per-pixel texture noise. Tumour is separable
//! from tissue and background by colour alone.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{build_pyramid, PyramidImage, Raster, BACKGROUND, DEFAULT_TILE_SIZE};
use crate::error::{Error, Result};

pub const MIN_SIDE: usize = 1024;

const TISSUE_RGB: [f32; 3] = [226.0, 146.0, 192.0];
const TUMOUR_RGB: [f32; 3] = [118.0, 62.0, 158.0];
const NOISE_CELL: usize = 48;

#[derive(Clone, Debug, PartialEq)]
pub struct SlideSpec {
    pub width: usize,
    pub height: usize,
    pub tissue_blobs: usize,
    pub tumour_blobs: usize,
    pub tile_size: u32,
}

impl SlideSpec {
    pub fn square(side: usize) -> Self {
        Self {
            width: side,
            height: side,
            tissue_blobs: 3,
            tumour_blobs: 2,
            tile_size: DEFAULT_TILE_SIZE,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticSlide {
    pub image: PyramidImage,
    /// 255 on tumour pixels, 0 elsewhere.
    pub truth: PyramidImage,
    /// Level-0 tissue membership (255/0), including tumour. Not persisted.
    pub tissue: Raster,
    pub grade: u8,
}

#[derive(Clone, Debug)]
struct Blob {
    cx: f32,
    cy: f32,
    rx: f32,
    ry: f32,
    cos: f32,
    sin: f32,
    // boundary wobble: r(phi) = 1 + h[0] cos2phi + h[1] sin2phi + h[2] cos3phi + h[3] sin3phi
    harmonics: [f32; 4],
    reach: f32,
}

impl Blob {
    fn random(rng: &mut ChaCha8Rng, cx: f32, cy: f32, rx: f32, ry: f32) -> Self {
        let theta: f32 = rng.gen_range(0.0..std::f32::consts::PI);
        let mut harmonics = [0.0f32; 4];
        for h in harmonics.iter_mut() {
            *h = rng.gen_range(-0.07..0.07);
        }
        let amp: f32 = harmonics.iter().map(|h| h.abs()).sum();
        Self {
            cx,
            cy,
            rx,
            ry,
            cos: theta.cos(),
            sin: theta.sin(),
            harmonics,
            reach: rx.max(ry) * (1.0 + amp),
        }
    }

    fn bbox(&self, width: usize, height: usize) -> (usize, usize, usize, usize) {
        let x0 = (self.cx - self.reach).floor().max(0.0) as usize;
        let y0 = (self.cy - self.reach).floor().max(0.0) as usize;
        let x1 = ((self.cx + self.reach).ceil() as usize + 1).min(width);
        let y1 = ((self.cy + self.reach).ceil() as usize + 1).min(height);
        (x0, y0, x1, y1)
    }

    #[inline]
    fn contains(&self, x: f32, y: f32) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = (dx * self.cos + dy * self.sin) / self.rx;
        let v = (-dx * self.sin + dy * self.cos) / self.ry;
        let rho2 = u * u + v * v;
        if rho2 <= 1e-12 {
            return true;
        }
        let rho = rho2.sqrt();
        let c = u / rho;
        let s = v / rho;
        let h = &self.harmonics;
        let r = 1.0
            + h[0] * (c * c - s * s)
            + h[1] * (2.0 * c * s)
            + h[2] * (4.0 * c * c * c - 3.0 * c)
            + h[3] * (3.0 * s - 4.0 * s * s * s);
        rho <= r
    }
}

#[inline]
fn hash3(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
fn unit(h: u64) -> f32 {
    ((h >> 40) as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
}

/// Smooth value noise in [-1, 1] on a coarse lattice.
struct ValueNoise {
    lattice: Vec<f32>,
    cols: usize,
}

impl ValueNoise {
    fn new(seed: u64, width: usize, height: usize) -> Self {
        let cols = width / NOISE_CELL + 2;
        let rows = height / NOISE_CELL + 2;
        let lattice = (0..rows * cols)
            .map(|i| unit(hash3(seed, (i % cols) as u64, (i / cols) as u64)))
            .collect();
        Self { lattice, cols }
    }

    #[inline]
    fn at(&self, x: usize, y: usize) -> f32 {
        let gx = x / NOISE_CELL;
        let gy = y / NOISE_CELL;
        let fx = (x % NOISE_CELL) as f32 / NOISE_CELL as f32;
        let fy = (y % NOISE_CELL) as f32 / NOISE_CELL as f32;
        let sx = fx * fx * (3.0 - 2.0 * fx);
        let sy = fy * fy * (3.0 - 2.0 * fy);
        let i = gy * self.cols + gx;
        let top = self.lattice[i] + (self.lattice[i + 1] - self.lattice[i]) * sx;
        let bot = self.lattice[i + self.cols]
            + (self.lattice[i + self.cols + 1] - self.lattice[i + self.cols]) * sx;
        top + (bot - top) * sy
    }
}

fn place_tissue(rng: &mut ChaCha8Rng, spec: &SlideSpec) -> Vec<Blob> {
    let side = spec.width.min(spec.height) as f32;
    (0..spec.tissue_blobs)
        .map(|_| {
            let rx = side * rng.gen_range(0.13..0.22);
            let ry = side * rng.gen_range(0.13..0.22);
            let margin = rx.max(ry) * 1.3;
            let cx = rng.gen_range(margin..(spec.width as f32 - margin).max(margin + 1.0));
            let cy = rng.gen_range(margin..(spec.height as f32 - margin).max(margin + 1.0));
            Blob::random(rng, cx, cy, rx, ry)
        })
        .collect()
}

fn place_tumour(rng: &mut ChaCha8Rng, spec: &SlideSpec, tissue: &[Blob]) -> Vec<Blob> {
    if tissue.is_empty() {
        return Vec::new();
    }
    (0..spec.tumour_blobs)
        .map(|i| {
            let parent = &tissue[i % tissue.len()];
            let base = parent.rx.min(parent.ry);
            let angle: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
            let dist = base * rng.gen_range(0.0..0.3);
            let rx = parent.rx * rng.gen_range(0.4..0.65);
            let ry = parent.ry * rng.gen_range(0.4..0.65);
            Blob::random(
                rng,
                parent.cx + dist * angle.cos(),
                parent.cy + dist * angle.sin(),
                rx,
                ry,
            )
        })
        .collect()
}

/// Generates a deterministic slide for `seed`.
pub fn generate_synthetic_slide(seed: u64, spec: &SlideSpec) -> Result<SyntheticSlide> {
    if spec.width < MIN_SIDE || spec.height < MIN_SIDE {
        return Err(Error::invalid(format!(
            "synthetic slides need both sides >= {MIN_SIDE}, got {}x{}",
            spec.width, spec.height
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grade: u8 = rng.gen_range(1..=3);
    let stain: [f32; 3] = [
        rng.gen_range(-8.0..8.0),
        rng.gen_range(-8.0..8.0),
        rng.gen_range(-8.0..8.0),
    ];
    let tissue_blobs = place_tissue(&mut rng, spec);
    let tumour_blobs = place_tumour(&mut rng, spec, &tissue_blobs);
    let noise_seed = rng.gen::<u64>();
    let noise = ValueNoise::new(noise_seed, spec.width, spec.height);

    let (w, h) = (spec.width, spec.height);
    let mut tissue = vec![0u8; w * h];
    let mut tumour = vec![0u8; w * h];
    for blob in &tissue_blobs {
        let (x0, y0, x1, y1) = blob.bbox(w, h);
        for y in y0..y1 {
            let row = &mut tissue[y * w..(y + 1) * w];
            for (x, t) in row.iter_mut().enumerate().take(x1).skip(x0) {
                if *t == 0 && blob.contains(x as f32 + 0.5, y as f32 + 0.5) {
                    *t = 255;
                }
            }
        }
    }
    for blob in &tumour_blobs {
        let (x0, y0, x1, y1) = blob.bbox(w, h);
        for y in y0..y1 {
            for x in x0..x1 {
                let i = y * w + x;
                if tumour[i] == 0 && tissue[i] != 0 && blob.contains(x as f32 + 0.5, y as f32 + 0.5) {
                    tumour[i] = 255;
                }
            }
        }
    }

    let mut rgb = vec![BACKGROUND; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if tissue[i] == 0 {
                continue;
            }
            let low = noise.at(x, y);
            let (base, low_amp) = if tumour[i] != 0 {
                (TUMOUR_RGB, 14.0)
            } else {
                (TISSUE_RGB, 16.0)
            };
            let hp = hash3(noise_seed ^ 0x5A5A, x as u64, y as u64);
            for c in 0..3 {
                let fine = unit(hp.rotate_left(21 * c as u32));
                let v = base[c] + stain[c] + low_amp * low + 10.0 * fine;
                rgb[i * 3 + c] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }

    let image = build_pyramid(&Raster::new(w, h, 3, rgb)?, spec.tile_size)?;
    let truth = build_pyramid(&Raster::new(w, h, 1, tumour)?, spec.tile_size)?;
    Ok(SyntheticSlide {
        image,
        truth,
        tissue: Raster::new(w, h, 1, tissue)?,
        grade,
    })
}
