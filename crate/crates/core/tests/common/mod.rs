//! Oracles and fixtures shared by the integration tests. Each oracle is a
//! deliberately naive restatement of the contract, written without looking at
//! the optimized code path it checks.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use h2g::cluster::FeatureVector;
use h2g::learn::{LabeledBatch, LossKind, PatchClassifier, Probabilities};
use h2g::pyramid::{build_pyramid, ManifestEntry, Raster, SlideManifest, Split};
use h2g::tissue::{Label, PatchIndex, PatchRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Exhaustive Otsu scan in exact integer arithmetic. Between-class variance
/// for a split into (n0, s0) and (n1, s1) is proportional to
/// (n1*s0 - n0*s1)^2 / (n0*n1); candidates are compared by cross-multiplying
/// so no rounding can reorder them. Needs bin counts below ~1000 to stay
/// inside i128.
pub fn otsu_oracle(hist: &[u64; 256]) -> u8 {
    let n: i128 = hist.iter().map(|&v| v as i128).sum();
    let s: i128 = hist.iter().enumerate().map(|(i, &v)| i as i128 * v as i128).sum();
    let mut best: Option<(i128, i128, u8)> = None;
    for t in 0..256usize {
        let n0: i128 = hist[..=t].iter().map(|&v| v as i128).sum();
        let s0: i128 = hist[..=t].iter().enumerate().map(|(i, &v)| i as i128 * v as i128).sum();
        let (n1, s1) = (n - n0, s - s0);
        let (num, den) = if n0 == 0 || n1 == 0 {
            (0, 1)
        } else {
            let d = n1 * s0 - n0 * s1;
            (d * d, n0 * n1)
        };
        match best {
            None => best = Some((num, den, t as u8)),
            Some((bn, bd, _)) if num * bd > bn * den => best = Some((num, den, t as u8)),
            _ => {}
        }
    }
    best.unwrap().2
}

pub fn random_histogram(rng: &mut impl Rng) -> [u64; 256] {
    let mut hist = [0u64; 256];
    // mixture of sparse and dense shapes, occasionally a couple of spikes
    let density: f64 = rng.gen_range(0.02..1.0);
    for h in hist.iter_mut() {
        if rng.gen_bool(density) {
            *h = rng.gen_range(0..1000);
        }
    }
    if hist.iter().all(|&v| v == 0) {
        hist[rng.gen_range(0..256)] = 1;
    }
    hist
}

/// Per-pixel double loop: (tp, fp, fn).
pub fn naive_counts(pred: &Raster, truth: &Raster) -> (u64, u64, u64) {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for y in 0..pred.height {
        for x in 0..pred.width {
            let p = pred.pixel(x, y)[0] > 0;
            let t = truth.pixel(x, y)[0] > 0;
            match (p, t) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
    }
    (tp, fp, fn_)
}

pub fn random_mask(rng: &mut impl Rng, w: usize, h: usize, density: f64) -> Raster {
    let data = (0..w * h).map(|_| if rng.gen_bool(density) { 255 } else { 0 }).collect();
    Raster::new(w, h, 1, data).unwrap()
}

pub fn random_raster(rng: &mut impl Rng, w: usize, h: usize, c: usize) -> Raster {
    let data = (0..w * h * c).map(|_| rng.gen()).collect();
    Raster::new(w, h, c, data).unwrap()
}

pub fn random_pyramid(rng: &mut impl Rng) -> h2g::pyramid::PyramidImage {
    let w = rng.gen_range(1..300);
    let h = rng.gen_range(1..300);
    let c = if rng.gen_bool(0.5) { 1 } else { 3 };
    let tile = rng.gen_range(16..80);
    build_pyramid(&random_raster(rng, w, h, c), tile).unwrap()
}

/// A random batch with `b` samples, `d` inputs and `c` classes; clusters are
/// drawn from `0..clusters` when guiding is on.
pub fn random_batch(rng: &mut impl Rng, b: usize, d: usize, c: usize, clusters: Option<i64>) -> LabeledBatch {
    let inputs = (0..b * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
    let q = (0..b)
        .map(|_| clusters.map_or(-1, |k| rng.gen_range(0..k)))
        .collect();
    LabeledBatch::new(inputs, d, &labels, c, q).unwrap()
}

/// Central finite-difference gradient of the batch loss.
pub fn numeric_gradient(model: &PatchClassifier, batch: &LabeledBatch, kind: LossKind, eps: f64) -> Vec<f64> {
    let mut probe = model.clone();
    (0..model.params.len())
        .map(|i| {
            let orig = probe.params[i];
            probe.params[i] = orig + eps;
            let up = probe.batch_loss(batch, kind).unwrap();
            probe.params[i] = orig - eps;
            let down = probe.batch_loss(batch, kind).unwrap();
            probe.params[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Largest relative error between two gradients, with an absolute floor so
/// parameters whose gradient is essentially zero do not blow the ratio up.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Pearson chi-square statistic of `observed` against equal expectations,
/// with the upper-tail p-value.
pub fn chi_square_uniform(observed: &[u64]) -> (f64, f64) {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    let total: u64 = observed.iter().sum();
    let expected = total as f64 / observed.len() as f64;
    let stat: f64 = observed
        .iter()
        .map(|&o| (o as f64 - expected).powi(2) / expected)
        .sum();
    let dof = (observed.len() - 1) as f64;
    let p = if dof == 0.0 {
        1.0
    } else {
        1.0 - ChiSquared::new(dof).unwrap().cdf(stat)
    };
    (stat, p)
}

pub fn h2g(args: &[&str], workdir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_h2g"))
        .args(args)
        .env("H2G_WORKDIR", workdir)
        .env_remove("RUST_LOG")
        .output()
        .expect("spawn h2g")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn entry(id: &str, grade: u8, split: Split) -> ManifestEntry {
    ManifestEntry {
        slide_id: id.into(),
        image_path: format!("{id}.hpyr").into(),
        mask_path: format!("{id}.truth.hpyr").into(),
        grade,
        split,
    }
}

/// Twelve slides over three grades with deliberately uneven slide counts,
/// class sizes and a one-class slide, so only the sampler can make the
/// stage marginals uniform.
pub fn uneven_tree() -> (SlideManifest, Vec<PatchIndex>) {
    let mut r = rng(77);
    let grades = [1, 1, 2, 2, 2, 2, 2, 3, 3, 3, 3, 3];
    let mut entries = Vec::new();
    let mut indices = Vec::new();
    for (s, &g) in grades.iter().enumerate() {
        let id = format!("s{s:02}");
        entries.push(entry(&id, g, Split::Train));
        let tumour = if s == 4 { 0 } else { r.gen_range(1..40) };
        let normal = r.gen_range(1..400);
        let mut records = Vec::new();
        for i in 0..tumour + normal {
            records.push(PatchRecord {
                slide_id: id.clone(),
                level: 0,
                x: i as u64 * 64,
                y: 0,
                label: if i < tumour { Label::Tumour } else { Label::NonTumour },
                cluster: -1,
            });
        }
        indices.push(PatchIndex {
            slide_id: id,
            patch_size: 64,
            level: 0,
            records,
        });
    }
    (SlideManifest { entries }, indices)
}

/// Correlated toy data: independent draws with distinct spreads, mixed by a
/// random matrix so the covariance is dense.
pub fn toy(seed: u64, n: usize, d: usize) -> Vec<FeatureVector> {
    let mut r = rng(seed);
    let mix: Vec<f64> = (0..d * d).map(|_| r.gen_range(-1.0..1.0)).collect();
    (0..n)
        .map(|_| {
            let raw: Vec<f64> = (0..d).map(|j| r.gen_range(-1.0..1.0) * (j + 1) as f64).collect();
            FeatureVector((0..d).map(|i| (0..d).map(|j| mix[i * d + j] * raw[j]).sum::<f64>() + i as f64).collect())
        })
        .collect()
}

pub fn standardize(samples: &[FeatureVector]) -> (Vec<f64>, usize) {
    let n = samples.len() as f64;
    let d = samples[0].dim();
    let mean: Vec<f64> = (0..d).map(|j| samples.iter().map(|s| s.0[j]).sum::<f64>() / n).collect();
    let std: Vec<f64> = (0..d)
        .map(|j| (samples.iter().map(|s| (s.0[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt())
        .collect();
    let z = samples
        .iter()
        .flat_map(|s| (0..d).map(|j| (s.0[j] - mean[j]) / std[j]).collect::<Vec<_>>())
        .collect();
    (z, d)
}

pub fn probs_from(p_true: &[f64], labels: &[usize]) -> (Probabilities, Vec<f64>) {
    // two classes; the true class gets p_true
    let mut p = Vec::new();
    let mut y = Vec::new();
    for (&pt, &l) in p_true.iter().zip(labels) {
        let row = if l == 0 { [pt, 1.0 - pt] } else { [1.0 - pt, pt] };
        p.extend(row);
        y.extend(if l == 0 { [1.0, 0.0] } else { [0.0, 1.0] });
    }
    (Probabilities { rows: labels.len(), classes: 2, p }, y)
}

/// Per-cluster mean of -ln p_true, then the plain mean over clusters.
pub fn cwce_oracle(p_true: &[f64], q: &[i64]) -> f64 {
    let mut groups: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
    for (&p, &k) in p_true.iter().zip(q) {
        groups.entry(k).or_default().push(-p.ln());
    }
    groups.values().map(|v| v.iter().sum::<f64>() / v.len() as f64).sum::<f64>() / groups.len() as f64
}
