//! Tissue detection and patch selection.
//!
//! Tissue is found by thresholding the HSV saturation channel with Otsu's
//! method. Patches on a non-overlapping grid are kept when more than a quarter
//! of their area is tissue, and labelled from the tumour fraction of the
//! ground-truth mask.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::{bilinear_resize, FloatRaster};
use crate::pyramid::{PyramidImage, Raster};

/// Side length the low-resolution tissue and refinement paths work at.
pub const LOWRES_SIDE: usize = 1024;
pub const INCLUDE_FRACTION: f64 = 0.25;

/// Hexcone RGB to HSV. Hue in degrees `[0, 360)`, saturation and value in `[0, 1]`.
pub fn rgb_to_hsv(r: u8, g: u8, b: u8) -> (f64, f64, f64) {
    let (rf, gf, bf) = (r as f64 / 255.0, g as f64 / 255.0, b as f64 / 255.0);
    let max = rf.max(gf).max(bf);
    let min = rf.min(gf).min(bf);
    let delta = max - min;
    let v = max;
    let s = if max == 0.0 { 0.0 } else { delta / max };
    let h = if delta == 0.0 {
        0.0
    } else if max == rf {
        60.0 * (((gf - bf) / delta).rem_euclid(6.0))
    } else if max == gf {
        60.0 * ((bf - rf) / delta + 2.0)
    } else {
        60.0 * ((rf - gf) / delta + 4.0)
    };
    (if h >= 360.0 { h - 360.0 } else { h }, s, v)
}

/// Inverse of [`rgb_to_hsv`], returning channels on the 0–255 scale (unrounded).
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let c = v * s;
    let hp = (h.rem_euclid(360.0)) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    ((r + m) * 255.0, (g + m) * 255.0, (b + m) * 255.0)
}

/// Saturation quantized to 0–255 as `round(s * 255)`, half rounding up.
#[inline]
pub fn quantized_saturation(r: u8, g: u8, b: u8) -> u8 {
    let max = r.max(g).max(b) as u32;
    if max == 0 {
        return 0;
    }
    let delta = max - r.min(g).min(b) as u32;
    ((2 * delta * 255 + max) / (2 * max)) as u8
}

/// Otsu's threshold over a 256-bin histogram. Foreground is `bin > t`; the
/// smallest maximizer of the between-class variance wins ties.
pub fn otsu_threshold(hist: &[u64; 256]) -> Result<u8> {
    let total: u64 = hist.iter().sum();
    if total == 0 {
        return Err(Error::invalid("Otsu threshold of an all-zero histogram"));
    }
    let total_sum: u64 = hist.iter().enumerate().map(|(i, &n)| i as u64 * n).sum();
    let n = total as f64;
    let mut best_t = 0u8;
    let mut best = f64::NEG_INFINITY;
    let mut below = 0u64;
    let mut below_sum = 0u64;
    for t in 0..256usize {
        below += hist[t];
        below_sum += t as u64 * hist[t];
        let above = total - below;
        let var = if below == 0 || above == 0 {
            0.0
        } else {
            let mu0 = below_sum as f64 / below as f64;
            let mu1 = (total_sum - below_sum) as f64 / above as f64;
            (below as f64 / n) * (above as f64 / n) * (mu0 - mu1) * (mu0 - mu1)
        };
        if var > best {
            best = var;
            best_t = t as u8;
        }
    }
    Ok(best_t)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TissueMask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
    pub otsu_threshold: u8,
}

impl TissueMask {
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn to_raster(&self) -> Raster {
        Raster {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect(),
        }
    }
}

pub fn saturation_histogram(rgb: &Raster) -> Result<[u64; 256]> {
    if rgb.channels != 3 {
        return Err(Error::invalid(format!(
            "saturation needs 3 channels, got {}",
            rgb.channels
        )));
    }
    let mut hist = [0u64; 256];
    for px in rgb.data.chunks_exact(3) {
        hist[quantized_saturation(px[0], px[1], px[2]) as usize] += 1;
    }
    Ok(hist)
}

/// Threshold that separates tissue from background in `rgb`. A histogram with
/// a single occupied bin yields that bin, so no pixel passes `s > t`.
pub fn tissue_threshold(rgb: &Raster) -> Result<u8> {
    if rgb.is_empty() {
        return Err(Error::invalid("tissue detection on an empty raster"));
    }
    let hist = saturation_histogram(rgb)?;
    let occupied: Vec<usize> = (0..256).filter(|&i| hist[i] > 0).collect();
    if occupied.len() == 1 {
        return Ok(occupied[0] as u8);
    }
    otsu_threshold(&hist)
}

pub fn tissue_mask(lowres: &Raster) -> Result<TissueMask> {
    let t = tissue_threshold(lowres)?;
    let bits = lowres
        .data
        .chunks_exact(3)
        .map(|px| quantized_saturation(px[0], px[1], px[2]) > t)
        .collect();
    Ok(TissueMask {
        width: lowres.width,
        height: lowres.height,
        bits,
        otsu_threshold: t,
    })
}

/// Low-resolution level of `pyr` used for tissue detection and refinement:
/// the coarsest level whose longest side reaches 1024, else level 0.
pub fn lowres_level(pyr: &PyramidImage) -> usize {
    pyr.smallest_level_with_side(LOWRES_SIDE as u64).unwrap_or(0)
}

/// Resizes an 8-bit raster bilinearly, rounding back to 8 bits.
pub fn resize_u8(src: &Raster, out_w: usize, out_h: usize) -> Result<Raster> {
    let f = FloatRaster::from_u8(src, 1.0);
    let r = bilinear_resize(&f, out_w, out_h)?;
    let data = r
        .data
        .iter()
        .map(|&v| v.round().clamp(0.0, 255.0) as u8)
        .collect();
    Raster::new(out_w, out_h, src.channels, data)
}

/// The Otsu segmentation baseline: low-resolution slide resized to
/// 1024×1024, saturation thresholded.
pub fn otsu_baseline(pyr: &PyramidImage) -> Result<TissueMask> {
    let lowres = pyr.level_raster(lowres_level(pyr))?;
    tissue_mask(&resize_u8(&lowres, LOWRES_SIDE, LOWRES_SIDE)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PatchLabel {
    Tumour,
    NonTumour,
    Discard,
}

/// Patch acceptance rule: more than 25% tissue to be considered at all, then
/// more than 25% tumour is a tumour patch, no tumour at all is a non-tumour
/// patch, and anything in between is dropped.
pub fn label_patch(tissue_frac: f64, tumour_frac: f64) -> Result<PatchLabel> {
    for (name, v) in [("tissue", tissue_frac), ("tumour", tumour_frac)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(format!("{name} fraction {v} outside [0, 1]")));
        }
    }
    Ok(if tissue_frac <= INCLUDE_FRACTION {
        PatchLabel::Discard
    } else if tumour_frac > INCLUDE_FRACTION {
        PatchLabel::Tumour
    } else if tumour_frac == 0.0 {
        PatchLabel::NonTumour
    } else {
        PatchLabel::Discard
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    NonTumour = 0,
    Tumour = 1,
}

impl Label {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: u8) -> Result<Self> {
        match i {
            0 => Ok(Label::NonTumour),
            1 => Ok(Label::Tumour),
            _ => Err(Error::invalid(format!("label must be 0 or 1, got {i}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchRecord {
    pub slide_id: String,
    pub level: usize,
    pub x: u64,
    pub y: u64,
    pub label: Label,
    /// -1 when unassigned.
    pub cluster: i32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchIndex {
    pub slide_id: String,
    pub patch_size: u32,
    pub level: usize,
    pub records: Vec<PatchRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    slide_id: String,
    level: usize,
    x: u64,
    y: u64,
    label: u8,
    cluster: i32,
}

impl PatchIndex {
    pub fn count(&self, label: Label) -> usize {
        self.records.iter().filter(|r| r.label == label).count()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(path)
            .map_err(csv_err)?;
        // header is written even for an empty index
        w.write_record(["slide_id", "level", "x", "y", "label", "cluster"])
            .map_err(csv_err)?;
        for r in &self.records {
            w.serialize(CsvRow {
                slide_id: r.slide_id.clone(),
                level: r.level,
                x: r.x,
                y: r.y,
                label: r.label as u8,
                cluster: r.cluster,
            })
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>, slide_id: &str, level: usize, patch_size: u32) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_path(path)
            .map_err(csv_err)?;
        let mut rows = rdr.records();
        match rows.next() {
            Some(Ok(h)) if h.iter().eq(["slide_id", "level", "x", "y", "label", "cluster"]) => {}
            _ => return Err(Error::format(0, "patch index CSV header mismatch")),
        }
        let mut records = Vec::new();
        for row in rows {
            let row: CsvRow = row.map_err(csv_err)?.deserialize(None).map_err(csv_err)?;
            if row.slide_id != slide_id || row.level != level {
                return Err(Error::invalid(format!(
                    "index row for {}@{} in the index of {slide_id}@{level}",
                    row.slide_id, row.level
                )));
            }
            if row.x % patch_size as u64 != 0 || row.y % patch_size as u64 != 0 {
                return Err(Error::invalid(format!(
                    "patch ({}, {}) is off the {patch_size}px grid",
                    row.x, row.y
                )));
            }
            records.push(PatchRecord {
                slide_id: row.slide_id,
                level: row.level,
                x: row.x,
                y: row.y,
                label: Label::from_index(row.label)?,
                cluster: row.cluster,
            });
        }
        Ok(Self {
            slide_id: slide_id.to_string(),
            patch_size,
            level,
            records,
        })
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::invalid(format!("csv: {other:?}")),
    }
}

struct PatchFractions {
    x: u64,
    y: u64,
    tissue: f64,
    tumour: Option<f64>,
}

fn scan_grid(
    image: &PyramidImage,
    truth: Option<&PyramidImage>,
    level: usize,
    patch_size: u32,
) -> Result<Vec<PatchFractions>> {
    if image.channels() != 3 {
        return Err(Error::invalid("patch indexing needs an RGB pyramid"));
    }
    if patch_size == 0 {
        return Err(Error::invalid("patch size must be positive"));
    }
    let (w, h) = image.dims(level)?;
    if let Some(t) = truth {
        if t.dims(level)? != (w, h) {
            return Err(Error::invalid(format!(
                "mask level {level} is {:?}, image is {:?}",
                t.dims(level)?,
                (w, h)
            )));
        }
    }
    let threshold = tissue_threshold(&image.level_raster(lowres_level(image))?)?;
    let ps = patch_size as u64;
    let cols = w.div_ceil(ps);
    let rows = h.div_ceil(ps);
    let area = (ps * ps) as f64;

    (0..rows * cols)
        .into_par_iter()
        .map(|cell| {
            let x = (cell % cols) * ps;
            let y = (cell / cols) * ps;
            let patch = image.read_region(level, x as i64, y as i64, ps as usize, ps as usize)?;
            let tissue_px = patch
                .data
                .chunks_exact(3)
                .filter(|p| quantized_saturation(p[0], p[1], p[2]) > threshold)
                .count();
            let tumour = match truth {
                Some(t) => {
                    let m = t.read_region(level, x as i64, y as i64, ps as usize, ps as usize)?;
                    // padding reads as 255 on masks too; only in-bounds pixels count
                    let (inner_w, inner_h) = ((w - x).min(ps) as usize, (h - y).min(ps) as usize);
                    let mut sum = 0u64;
                    for row in 0..inner_h {
                        sum += m.row(row)[..inner_w].iter().map(|&v| v as u64).sum::<u64>();
                    }
                    Some(sum as f64 / (255.0 * area))
                }
                None => None,
            };
            Ok(PatchFractions {
                x,
                y,
                tissue: tissue_px as f64 / area,
                tumour,
            })
        })
        .collect()
}

/// Labelled patch index from an image and its ground-truth tumour mask.
pub fn build_patch_index(
    slide_id: &str,
    image: &PyramidImage,
    truth: &PyramidImage,
    level: usize,
    patch_size: u32,
) -> Result<PatchIndex> {
    let mut records = Vec::new();
    for f in scan_grid(image, Some(truth), level, patch_size)? {
        let tumour = f.tumour.unwrap_or(0.0).min(1.0);
        let label = match label_patch(f.tissue, tumour)? {
            PatchLabel::Tumour => Label::Tumour,
            PatchLabel::NonTumour => Label::NonTumour,
            PatchLabel::Discard => continue,
        };
        records.push(PatchRecord {
            slide_id: slide_id.to_string(),
            level,
            x: f.x,
            y: f.y,
            label,
            cluster: -1,
        });
    }
    Ok(PatchIndex {
        slide_id: slide_id.to_string(),
        patch_size,
        level,
        records,
    })
}

/// Index of every patch that passes the tissue rule, for inference where no
/// ground truth exists. Labels are unknown and stored as non-tumour.
pub fn tissue_index(slide_id: &str, image: &PyramidImage, level: usize, patch_size: u32) -> Result<PatchIndex> {
    let records = scan_grid(image, None, level, patch_size)?
        .into_iter()
        .filter(|f| f.tissue > INCLUDE_FRACTION)
        .map(|f| PatchRecord {
            slide_id: slide_id.to_string(),
            level,
            x: f.x,
            y: f.y,
            label: Label::NonTumour,
            cluster: -1,
        })
        .collect();
    Ok(PatchIndex {
        slide_id: slide_id.to_string(),
        patch_size,
        level,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pyramid::build_pyramid;

    #[test]
    fn hsv_reference_values() {
        assert_eq!(rgb_to_hsv(255, 255, 255), (0.0, 0.0, 1.0));
        assert_eq!(rgb_to_hsv(255, 0, 0), (0.0, 1.0, 1.0));
        let (h, s, v) = rgb_to_hsv(128, 64, 64);
        assert_eq!(h, 0.0);
        assert!((s - 0.5).abs() < 1e-12);
        assert!((v - 128.0 / 255.0).abs() < 1e-12);
        assert!((v - 0.50196).abs() < 1e-5);
        assert_eq!(rgb_to_hsv(0, 0, 0), (0.0, 0.0, 0.0));
    }

    #[test]
    fn hsv_round_trip() {
        for &(r, g, b) in &[(12u8, 200u8, 99u8), (250, 10, 240), (3, 3, 4), (90, 180, 0)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r2 - r as f64).abs() < 1e-9 && (g2 - g as f64).abs() < 1e-9 && (b2 - b as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn quantized_saturation_matches_float_rounding() {
        for r in (0..=255u32).step_by(5) {
            for g in (0..=255u32).step_by(17) {
                for b in (0..=255u32).step_by(13) {
                    let (_, s, _) = rgb_to_hsv(r as u8, g as u8, b as u8);
                    let q = quantized_saturation(r as u8, g as u8, b as u8) as f64;
                    assert!((q - s * 255.0).abs() <= 0.5 + 1e-9);
                }
            }
        }
    }

    #[test]
    fn otsu_two_spikes_takes_smallest_tie() {
        let mut hist = [0u64; 256];
        hist[50] = 40;
        hist[200] = 60;
        assert_eq!(otsu_threshold(&hist).unwrap(), 50);
    }

    #[test]
    fn otsu_single_spike_is_zero() {
        let mut hist = [0u64; 256];
        hist[100] = 10;
        assert_eq!(otsu_threshold(&hist).unwrap(), 0);
    }

    #[test]
    fn otsu_empty_histogram_errors() {
        assert!(matches!(otsu_threshold(&[0; 256]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn white_image_gives_empty_mask() {
        let m = tissue_mask(&Raster::filled(32, 32, 3, 255)).unwrap();
        assert_eq!(m.count(), 0);
    }

    #[test]
    fn half_pink_image_masks_exactly_the_pink_half() {
        let mut img = Raster::filled(40, 20, 3, 255);
        for y in 0..20 {
            for x in 20..40 {
                let i = (y * 40 + x) * 3;
                img.data[i..i + 3].copy_from_slice(&[230, 140, 190]);
            }
        }
        let m = tissue_mask(&img).unwrap();
        for y in 0..20 {
            for x in 0..40 {
                assert_eq!(m.bits[y * 40 + x], x >= 20);
            }
        }
    }

    #[test]
    fn labeling_rules() {
        assert_eq!(label_patch(0.30, 0.30).unwrap(), PatchLabel::Tumour);
        assert_eq!(label_patch(0.30, 0.00).unwrap(), PatchLabel::NonTumour);
        assert_eq!(label_patch(0.30, 0.10).unwrap(), PatchLabel::Discard);
        assert_eq!(label_patch(0.20, 0.20).unwrap(), PatchLabel::Discard);
        assert_eq!(label_patch(0.30, 0.25).unwrap(), PatchLabel::Discard);
        assert_eq!(label_patch(0.25, 0.0).unwrap(), PatchLabel::Discard);
        assert!(label_patch(1.5, 0.0).is_err());
        assert!(label_patch(0.5, -0.1).is_err());
        assert!(label_patch(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn white_slide_has_empty_index() {
        let img = build_pyramid(&Raster::filled(512, 512, 3, 255), 128).unwrap();
        let mask = build_pyramid(&Raster::filled(512, 512, 1, 0), 128).unwrap();
        let idx = build_patch_index("w", &img, &mask, 0, 128).unwrap();
        assert!(idx.is_empty());
        assert!(tissue_index("w", &img, 0, 128).unwrap().is_empty());
    }

    #[test]
    fn solid_tumour_blob_gives_tumour_records() {
        // tumour square covers grid cells (1,1) and (2,1) completely
        let (w, h, ps) = (512usize, 384usize, 128usize);
        let mut rgb = Raster::filled(w, h, 3, 255);
        let mut truth = Raster::filled(w, h, 1, 0);
        for y in 64..320 {
            for x in 64..448 {
                let i = y * w + x;
                let inner = (128..256).contains(&y) && (128..384).contains(&x);
                let c: [u8; 3] = if inner { [118, 62, 158] } else { [226, 146, 192] };
                rgb.data[i * 3..i * 3 + 3].copy_from_slice(&c);
                if inner {
                    truth.data[i] = 255;
                }
            }
        }
        let img = build_pyramid(&rgb, 128).unwrap();
        let mask = build_pyramid(&truth, 128).unwrap();
        let idx = build_patch_index("s", &img, &mask, 0, ps as u32).unwrap();
        let tumour: Vec<_> = idx
            .records
            .iter()
            .filter(|r| r.label == Label::Tumour)
            .map(|r| (r.x, r.y))
            .collect();
        assert_eq!(tumour, vec![(128, 128), (256, 128)]);
        assert_eq!(idx.count(Label::Tumour) + idx.count(Label::NonTumour), idx.len());
        assert!(idx.records.iter().all(|r| r.x % 128 == 0 && r.y % 128 == 0));
    }

    #[test]
    fn mismatched_mask_dims_rejected() {
        let img = build_pyramid(&Raster::filled(512, 512, 3, 255), 128).unwrap();
        let mask = build_pyramid(&Raster::filled(256, 512, 1, 0), 128).unwrap();
        assert!(matches!(
            build_patch_index("m", &img, &mask, 0, 128),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn csv_round_trip() {
        let idx = PatchIndex {
            slide_id: "s01".into(),
            patch_size: 64,
            level: 1,
            records: vec![
                PatchRecord { slide_id: "s01".into(), level: 1, x: 0, y: 64, label: Label::Tumour, cluster: 3 },
                PatchRecord { slide_id: "s01".into(), level: 1, x: 128, y: 0, label: Label::NonTumour, cluster: -1 },
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s01.index.csv");
        idx.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("slide_id,level,x,y,label,cluster\ns01,1,0,64,1,3\n"));
        assert_eq!(PatchIndex::read_csv(&p, "s01", 1, 64).unwrap(), idx);
        assert!(PatchIndex::read_csv(&p, "s01", 1, 128).is_err());
    }
}
