//! Tiled multi-resolution rasters.
//!
//! A [`PyramidImage`] stores every level as a row-major grid of tiles. Level
//! `L + 1` is the 2×2 box average of level `L` with dimensions rounded up, and
//! levels are added until the longest side fits in a single tile. Pyramids are
//! immutable once built or loaded, so region reads can be shared freely
//! across threads.

mod format;
mod manifest;
mod synthetic;

pub use format::{read_file, write_file, MAGIC, VERSION};
pub use manifest::{ManifestEntry, SlideManifest, Split};
pub use synthetic::{generate_synthetic_slide, SlideSpec, SyntheticSlide};

use crate::error::{Error, Result};

pub const DEFAULT_TILE_SIZE: u32 = 256;
pub const BACKGROUND: u8 = 255;

/// Dense 8-bit raster, channel-interleaved, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "raster buffer has {} bytes, expected {}x{}x{}",
                data.len(),
                width,
                height,
                channels
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0 || self.channels == 0
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn row(&self, y: usize) -> &[u8] {
        let stride = self.width * self.channels;
        &self.data[y * stride..(y + 1) * stride]
    }
}

/// One resolution level of a pyramid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Level {
    pub width: u64,
    pub height: u64,
    pub tiles_x: u64,
    pub tiles_y: u64,
    tiles: Vec<Vec<u8>>,
}

impl Level {
    fn tile_dims(&self, tile_size: u64, tx: u64, ty: u64) -> (u64, u64) {
        let w = (self.width - tx * tile_size).min(tile_size);
        let h = (self.height - ty * tile_size).min(tile_size);
        (w, h)
    }

    pub fn tile(&self, tx: u64, ty: u64) -> &[u8] {
        &self.tiles[(ty * self.tiles_x + tx) as usize]
    }

    pub fn tiles(&self) -> &[Vec<u8>] {
        &self.tiles
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PyramidImage {
    channels: u8,
    tile_size: u32,
    levels: Vec<Level>,
}

pub(crate) fn half_up(n: u64) -> u64 {
    n.div_ceil(2)
}

fn tile_grid(dim: u64, tile_size: u64) -> u64 {
    dim.div_ceil(tile_size)
}

fn cut_tiles(raster: &Raster, tile_size: u64) -> Level {
    let width = raster.width as u64;
    let height = raster.height as u64;
    let tiles_x = tile_grid(width, tile_size);
    let tiles_y = tile_grid(height, tile_size);
    let c = raster.channels;
    let mut tiles = Vec::with_capacity((tiles_x * tiles_y) as usize);
    for ty in 0..tiles_y {
        for tx in 0..tiles_x {
            let x0 = (tx * tile_size) as usize;
            let y0 = (ty * tile_size) as usize;
            let w = (width - tx * tile_size).min(tile_size) as usize;
            let h = (height - ty * tile_size).min(tile_size) as usize;
            let mut tile = Vec::with_capacity(w * h * c);
            for y in y0..y0 + h {
                let row = raster.row(y);
                tile.extend_from_slice(&row[x0 * c..(x0 + w) * c]);
            }
            tiles.push(tile);
        }
    }
    Level {
        width,
        height,
        tiles_x,
        tiles_y,
        tiles,
    }
}

/// 2×2 box average with round-half-up. Border blocks that hang off the
/// right or bottom edge average only the pixels that exist.
pub fn downsample(src: &Raster) -> Raster {
    let w = half_up(src.width as u64) as usize;
    let h = half_up(src.height as u64) as usize;
    let c = src.channels;
    let mut out = vec![0u8; w * h * c];
    for y in 0..h {
        let y0 = 2 * y;
        let y1 = (y0 + 1).min(src.height - 1);
        let rows = if y1 != y0 { 2 } else { 1 };
        for x in 0..w {
            let x0 = 2 * x;
            let x1 = (x0 + 1).min(src.width - 1);
            let cols = if x1 != x0 { 2 } else { 1 };
            let n = (rows * cols) as u32;
            for ch in 0..c {
                let mut sum = src.pixel(x0, y0)[ch] as u32;
                if cols == 2 {
                    sum += src.pixel(x1, y0)[ch] as u32;
                }
                if rows == 2 {
                    sum += src.pixel(x0, y1)[ch] as u32;
                    if cols == 2 {
                        sum += src.pixel(x1, y1)[ch] as u32;
                    }
                }
                out[(y * w + x) * c + ch] = ((sum + n / 2) / n) as u8;
            }
        }
    }
    Raster {
        width: w,
        height: h,
        channels: c,
        data: out,
    }
}

/// Builds the full pyramid for `base`.
pub fn build_pyramid(base: &Raster, tile_size: u32) -> Result<PyramidImage> {
    if base.is_empty() {
        return Err(Error::invalid("cannot build a pyramid from an empty raster"));
    }
    if base.channels != 1 && base.channels != 3 {
        return Err(Error::invalid(format!(
            "pyramids hold 1 or 3 channels, got {}",
            base.channels
        )));
    }
    if tile_size < 16 {
        return Err(Error::invalid(format!("tile size {tile_size} is below 16")));
    }
    let ts = tile_size as u64;
    let mut levels = vec![cut_tiles(base, ts)];
    let mut current: Option<Raster> = None;
    loop {
        let src = current.as_ref().unwrap_or(base);
        if (src.width.max(src.height) as u64) <= ts {
            break;
        }
        let next = downsample(src);
        levels.push(cut_tiles(&next, ts));
        current = Some(next);
    }
    Ok(PyramidImage {
        channels: base.channels as u8,
        tile_size,
        levels,
    })
}

impl PyramidImage {
    pub(crate) fn from_parts(channels: u8, tile_size: u32, levels: Vec<Level>) -> Self {
        Self {
            channels,
            tile_size,
            levels,
        }
    }

    pub(crate) fn level_from_tiles(width: u64, height: u64, tile_size: u64, tiles: Vec<Vec<u8>>) -> Level {
        Level {
            width,
            height,
            tiles_x: tile_grid(width, tile_size),
            tiles_y: tile_grid(height, tile_size),
            tiles,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels as usize
    }

    pub fn tile_size(&self) -> u32 {
        self.tile_size
    }

    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    pub fn level(&self, level: usize) -> Result<&Level> {
        self.levels.get(level).ok_or_else(|| {
            Error::invalid(format!(
                "level {level} out of range (pyramid has {} levels)",
                self.levels.len()
            ))
        })
    }

    pub fn dims(&self, level: usize) -> Result<(u64, u64)> {
        self.level(level).map(|l| (l.width, l.height))
    }

    /// Smallest (coarsest) level whose longest side is at least `min_side`.
    pub fn smallest_level_with_side(&self, min_side: u64) -> Option<usize> {
        self.levels
            .iter()
            .rposition(|l| l.width.max(l.height) >= min_side)
    }

    /// Reads a `w`×`h` window whose top-left corner is `(x, y)` at `level`.
    /// Pixels outside the level are white.
    pub fn read_region(&self, level: usize, x: i64, y: i64, w: usize, h: usize) -> Result<Raster> {
        let lvl = self.level(level)?;
        if w == 0 || h == 0 {
            return Err(Error::invalid("region width and height must be at least 1"));
        }
        let c = self.channels as usize;
        let mut out = vec![BACKGROUND; w * h * c];

        let lw = lvl.width as i64;
        let lh = lvl.height as i64;
        let x_lo = x.max(0);
        let y_lo = y.max(0);
        let x_hi = (x + w as i64).min(lw);
        let y_hi = (y + h as i64).min(lh);
        if x_lo >= x_hi || y_lo >= y_hi {
            return Raster::new(w, h, c, out);
        }

        let ts = self.tile_size as i64;
        for ty in (y_lo / ts)..=((y_hi - 1) / ts) {
            for tx in (x_lo / ts)..=((x_hi - 1) / ts) {
                let (tw, _) = lvl.tile_dims(ts as u64, tx as u64, ty as u64);
                let tile = lvl.tile(tx as u64, ty as u64);
                let tile_x0 = tx * ts;
                let tile_y0 = ty * ts;
                let cx0 = x_lo.max(tile_x0);
                let cx1 = x_hi.min(tile_x0 + tw as i64);
                let cy0 = y_lo.max(tile_y0);
                let cy1 = y_hi.min(tile_y0 + ts);
                let span = (cx1 - cx0) as usize * c;
                for py in cy0..cy1 {
                    let src = (((py - tile_y0) * tw as i64 + (cx0 - tile_x0)) as usize) * c;
                    let dst = (((py - y) as usize) * w + (cx0 - x) as usize) * c;
                    out[dst..dst + span].copy_from_slice(&tile[src..src + span]);
                }
            }
        }
        Raster::new(w, h, c, out)
    }

    /// The whole level as one raster.
    pub fn level_raster(&self, level: usize) -> Result<Raster> {
        let (w, h) = self.dims(level)?;
        self.read_region(level, 0, 0, w as usize, h as usize)
    }
}
