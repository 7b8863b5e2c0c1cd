mod common;

use std::sync::Arc;

use h2g::pyramid::{self, build_pyramid, generate_synthetic_slide, Raster, SlideSpec};
use h2g::tissue::otsu_baseline;
use h2g::Error;
use proptest::prelude::*;
use rand::Rng;

use common::{random_pyramid, random_raster, rng};

/// Box average over the pixels that exist, rounding halves up, one level at a time.
fn naive_level(base: &Raster, level: usize) -> Raster {
    let mut cur = base.clone();
    for _ in 0..level {
        let (w, h, c) = (cur.width.div_ceil(2), cur.height.div_ceil(2), cur.channels);
        let mut data = Vec::with_capacity(w * h * c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let (mut sum, mut n) = (0u32, 0u32);
                    for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                        let (sx, sy) = (2 * x + dx, 2 * y + dy);
                        if sx < cur.width && sy < cur.height {
                            sum += cur.pixel(sx, sy)[ch] as u32;
                            n += 1;
                        }
                    }
                    // round-half-up of sum / n
                    data.push(((2 * sum + n) / (2 * n)) as u8);
                }
            }
        }
        cur = Raster::new(w, h, c, data).unwrap();
    }
    cur
}

fn naive_region(level: &Raster, x: i64, y: i64, w: usize, h: usize) -> Raster {
    let c = level.channels;
    let mut data = Vec::with_capacity(w * h * c);
    for yy in y..y + h as i64 {
        for xx in x..x + w as i64 {
            let inside = xx >= 0 && yy >= 0 && (xx as usize) < level.width && (yy as usize) < level.height;
            for ch in 0..c {
                data.push(if inside { level.pixel(xx as usize, yy as usize)[ch] } else { 255 });
            }
        }
    }
    Raster::new(w, h, c, data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn level_chain_and_tile_shapes(w in 1usize..700, h in 1usize..700, tile in 16u32..300) {
        let pyr = build_pyramid(&Raster::filled(w, h, 1, 9), tile).unwrap();
        for l in 0..pyr.level_count() {
            let lvl = &pyr.levels()[l];
            if l + 1 < pyr.level_count() {
                let next = &pyr.levels()[l + 1];
                prop_assert_eq!((next.width, next.height), (lvl.width.div_ceil(2), lvl.height.div_ceil(2)));
            } else {
                prop_assert!(lvl.width.max(lvl.height) <= tile as u64);
            }
            let ts = tile as u64;
            for ty in 0..lvl.tiles_y {
                for tx in 0..lvl.tiles_x {
                    let tw = if tx + 1 == lvl.tiles_x { lvl.width - tx * ts } else { ts };
                    let th = if ty + 1 == lvl.tiles_y { lvl.height - ty * ts } else { ts };
                    prop_assert_eq!(lvl.tile(tx, ty).len() as u64, tw * th);
                }
            }
        }
    }

    #[test]
    fn levels_match_naive_box_average(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (w, h) = (r.gen_range(1..90), r.gen_range(1..90));
        let base = random_raster(&mut r, w, h, if seed % 2 == 0 { 1 } else { 3 });
        let pyr = build_pyramid(&base, 16).unwrap();
        for l in 0..pyr.level_count() {
            prop_assert_eq!(pyr.level_raster(l).unwrap(), naive_level(&base, l));
        }
    }

    #[test]
    fn region_reads_match_padded_copy(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (w, h) = (r.gen_range(1..120), r.gen_range(1..120));
        let base = random_raster(&mut r, w, h, 3);
        let pyr = build_pyramid(&base, r.gen_range(16..48)).unwrap();
        for _ in 0..8 {
            let l = r.gen_range(0..pyr.level_count());
            let level = naive_level(&base, l);
            let x = r.gen_range(-40..level.width as i64 + 40);
            let y = r.gen_range(-40..level.height as i64 + 40);
            let (w, h) = (r.gen_range(1..80), r.gen_range(1..80));
            prop_assert_eq!(pyr.read_region(l, x, y, w, h).unwrap(), naive_region(&level, x, y, w, h));
        }
    }

    #[test]
    fn constant_image_reads_are_constant(v in any::<u8>(), seed in any::<u64>()) {
        let mut r = rng(seed);
        let pyr = build_pyramid(&Raster::filled(r.gen_range(1..400), r.gen_range(1..400), 3, v), 32).unwrap();
        for l in 0..pyr.level_count() {
            let (lw, lh) = pyr.dims(l).unwrap();
            let x = r.gen_range(0..lw);
            let y = r.gen_range(0..lh);
            let w = r.gen_range(1..=lw - x) as usize;
            let h = r.gen_range(1..=lh - y) as usize;
            let out = pyr.read_region(l, x as i64, y as i64, w, h).unwrap();
            prop_assert!(out.data.iter().all(|&p| p == v));
        }
    }

    #[test]
    fn file_round_trip_is_bit_exact(seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let pyr = random_pyramid(&mut rng(seed));
        let a = dir.path().join("a.hpyr");
        let b = dir.path().join("b.hpyr");
        pyramid::write_file(&pyr, &a).unwrap();
        let back = pyramid::read_file(&a).unwrap();
        prop_assert_eq!(&back, &pyr);
        pyramid::write_file(&back, &b).unwrap();
        prop_assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }
}

#[test]
fn invalid_level_is_rejected() {
    let pyr = build_pyramid(&Raster::filled(40, 40, 1, 0), 16).unwrap();
    assert!(matches!(
        pyr.read_region(pyr.level_count(), 0, 0, 4, 4),
        Err(Error::InvalidInput(_))
    ));
}

#[test]
fn concurrent_reads_agree() {
    let pyr = Arc::new(random_pyramid(&mut rng(3)));
    let (w, h) = pyr.dims(0).unwrap();
    let expected = pyr.read_region(0, -5, -5, w as usize, h as usize).unwrap();
    let handles: Vec<_> = (0..6)
        .map(|t| {
            let pyr = Arc::clone(&pyr);
            std::thread::spawn(move || {
                let mut r = rng(100 + t);
                let mut outs = Vec::new();
                for _ in 0..20 {
                    // interleave unrelated reads with the one under test
                    let l = r.gen_range(0..pyr.level_count());
                    let _ = pyr.read_region(l, r.gen_range(-8..8), r.gen_range(-8..8), 17, 9).unwrap();
                    outs.push(pyr.read_region(0, -5, -5, w as usize, h as usize).unwrap());
                }
                outs
            })
        })
        .collect();
    for hnd in handles {
        for out in hnd.join().unwrap() {
            assert_eq!(out, expected);
        }
    }
}

#[test]
fn otsu_mask_covers_generated_tissue() {
    for seed in 1..=4 {
        let slide = generate_synthetic_slide(seed, &SlideSpec::square(1024)).unwrap();
        let mask = otsu_baseline(&slide.image).unwrap();
        assert_eq!((mask.width, mask.height), (1024, 1024));
        let mut tissue = 0usize;
        let mut covered = 0usize;
        for (i, &t) in slide.tissue.data.iter().enumerate() {
            if t > 0 {
                tissue += 1;
                covered += mask.bits[i] as usize;
            }
        }
        let frac = covered as f64 / tissue as f64;
        assert!(frac >= 0.95, "seed {seed}: otsu mask covers {frac:.4} of tissue");
    }
}
