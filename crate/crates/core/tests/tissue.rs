mod common;

use std::collections::HashSet;

use h2g::pyramid::{generate_synthetic_slide, SlideSpec};
use h2g::tissue::{
    build_patch_index, label_patch, lowres_level, otsu_threshold, rgb_to_hsv, saturation_histogram, Label, PatchLabel,
};
use proptest::prelude::*;

use common::{otsu_oracle, random_histogram, rng};

/// Hexcone conversion written out from its textbook definition.
fn hexcone(r: u8, g: u8, b: u8) -> (f64, f64, f64) {
    let (r, g, b) = (r as f64 / 255.0, g as f64 / 255.0, b as f64 / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let c = max - min;
    let h = if c == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / c).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / c + 2.0)
    } else {
        60.0 * ((r - g) / c + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { c / max };
    (h % 360.0, s, max)
}

fn maximizers(hist: &[u64; 256]) -> usize {
    let t = otsu_oracle(hist) as usize;
    // count thresholds tying the oracle's maximum exactly
    let var = |t: usize| -> (i128, i128) {
        let n0: i128 = hist[..=t].iter().map(|&v| v as i128).sum();
        let s0: i128 = hist[..=t].iter().enumerate().map(|(i, &v)| i as i128 * v as i128).sum();
        let n: i128 = hist.iter().map(|&v| v as i128).sum();
        let s: i128 = hist.iter().enumerate().map(|(i, &v)| i as i128 * v as i128).sum();
        let (n1, s1) = (n - n0, s - s0);
        if n0 == 0 || n1 == 0 {
            (0, 1)
        } else {
            let d = n1 * s0 - n0 * s1;
            (d * d, n0 * n1)
        }
    };
    let (bn, bd) = var(t);
    (0..256).filter(|&u| { let (n, d) = var(u); n * bd == bn * d }).count()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn otsu_matches_exhaustive_scan(seed in any::<u64>()) {
        let hist = random_histogram(&mut rng(seed));
        prop_assert_eq!(otsu_threshold(&hist).unwrap(), otsu_oracle(&hist));
    }

    #[test]
    fn mirrored_histogram_mirrors_threshold(seed in any::<u64>()) {
        let hist = random_histogram(&mut rng(seed));
        prop_assume!(maximizers(&hist) == 1);
        let mut mirror = [0u64; 256];
        for i in 0..256 {
            mirror[255 - i] = hist[i];
        }
        let t = otsu_threshold(&hist).unwrap() as i32;
        prop_assert_eq!(otsu_threshold(&mirror).unwrap() as i32, 254 - t);
    }

    #[test]
    fn hsv_matches_hexcone(r in any::<u8>(), g in any::<u8>(), b in any::<u8>()) {
        let (h, s, v) = rgb_to_hsv(r, g, b);
        let (eh, es, ev) = hexcone(r, g, b);
        prop_assert!((h - eh).abs() < 1e-9 && (s - es).abs() < 1e-12 && (v - ev).abs() < 1e-12);
        prop_assert!((0.0..360.0).contains(&h));
    }

    /// The three outcomes partition the admissible triangle.
    #[test]
    fn labeling_partitions_the_domain(tissue in 0.0f64..=1.0, share in 0.0f64..=1.0) {
        let tumour = tissue * share;
        let expected = if tissue <= 0.25 {
            PatchLabel::Discard
        } else if tumour > 0.25 {
            PatchLabel::Tumour
        } else if tumour == 0.0 {
            PatchLabel::NonTumour
        } else {
            PatchLabel::Discard
        };
        prop_assert_eq!(label_patch(tissue, tumour).unwrap(), expected);
    }
}

#[test]
fn hsv_reference_point() {
    let (h, s, v) = rgb_to_hsv(128, 64, 64);
    assert_eq!(h, 0.0);
    assert!((s - 0.5).abs() < 1e-12);
    assert!((v - 0.50196).abs() < 1e-5);
}

#[test]
fn fractions_outside_unit_interval_rejected() {
    for (t, u) in [(-0.1, 0.0), (1.1, 0.0), (0.5, -0.01), (0.5, 1.5), (f64::NAN, 0.0)] {
        assert!(label_patch(t, u).is_err(), "({t}, {u}) accepted");
    }
}

#[test]
fn labelling_boundary_examples() {
    assert_eq!(label_patch(0.30, 0.30).unwrap(), PatchLabel::Tumour);
    assert_eq!(label_patch(0.30, 0.00).unwrap(), PatchLabel::NonTumour);
    assert_eq!(label_patch(0.30, 0.10).unwrap(), PatchLabel::Discard);
    assert_eq!(label_patch(0.20, 0.20).unwrap(), PatchLabel::Discard);
    assert_eq!(label_patch(0.30, 0.25).unwrap(), PatchLabel::Discard);
}

/// Rebuilds the index by brute force: slide-wide saturation threshold from
/// the exact Otsu oracle, then per-pixel counting with white padding.
#[test]
fn patch_index_matches_brute_force() {
    let slide = generate_synthetic_slide(11, &SlideSpec::square(1100)).unwrap();
    let (image, truth) = (&slide.image, &slide.truth);
    let lowres = image.level_raster(lowres_level(image)).unwrap();
    let t = otsu_oracle(&saturation_histogram(&lowres).unwrap());
    let sat = |p: &[u8]| -> u8 {
        let max = p.iter().copied().max().unwrap() as u64;
        let min = p.iter().copied().min().unwrap() as u64;
        if max == 0 { 0 } else { ((255 * (max - min)) as f64 / max as f64).round() as u8 }
    };
    for (level, ps) in [(0usize, 128u32), (1, 100)] {
        let img = image.level_raster(level).unwrap();
        let msk = truth.level_raster(level).unwrap();
        let mut expected = Vec::new();
        let ps_ = ps as usize;
        for y0 in (0..img.height).step_by(ps_) {
            for x0 in (0..img.width).step_by(ps_) {
                let (mut tissue, mut tumour) = (0usize, 0u64);
                for y in y0..(y0 + ps_).min(img.height) {
                    for x in x0..(x0 + ps_).min(img.width) {
                        tissue += (sat(img.pixel(x, y)) > t) as usize;
                        tumour += msk.pixel(x, y)[0] as u64;
                    }
                }
                let area = (ps_ * ps_) as f64;
                let label = label_patch(tissue as f64 / area, tumour as f64 / (255.0 * area)).unwrap();
                match label {
                    PatchLabel::Tumour => expected.push((x0 as u64, y0 as u64, Label::Tumour)),
                    PatchLabel::NonTumour => expected.push((x0 as u64, y0 as u64, Label::NonTumour)),
                    PatchLabel::Discard => {}
                }
            }
        }
        let index = build_patch_index("s", image, truth, level, ps).unwrap();
        let got: Vec<_> = index.records.iter().map(|r| (r.x, r.y, r.label)).collect();
        assert_eq!(got, expected, "level {level} patch {ps}");
        assert!(index.count(Label::Tumour) > 0 && index.count(Label::NonTumour) > 0);
        assert_eq!(index.count(Label::Tumour) + index.count(Label::NonTumour), index.len());
        let unique: HashSet<_> = index.records.iter().map(|r| (r.x, r.y)).collect();
        assert_eq!(unique.len(), index.len());
        assert!(index.records.iter().all(|r| r.x % ps as u64 == 0 && r.y % ps as u64 == 0 && r.cluster == -1));
    }
}

#[test]
fn patch_index_ignores_pool_size() {
    let slide = generate_synthetic_slide(5, &SlideSpec::square(1024)).unwrap();
    let build = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| build_patch_index("s", &slide.image, &slide.truth, 0, 64).unwrap())
    };
    assert_eq!(build(1), build(5));
}
