//! Frozen tissue-type clustering: patch descriptor, Z-score standardization,
//! PCA keeping a target share of the variance, and k-means.
//!
//! A fitted [`ClusterModel`] is immutable; [`ClusterModel::assign`] is a pure
//! transform and may be called from any number of threads.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{decode_f64, encode_f64};
use crate::error::{Error, Result};
use crate::pyramid::Raster;

pub const FEATURE_DIM: usize = 62;
pub const DEFAULT_VARIANCE_TARGET: f64 = 0.95;
pub const DEFAULT_K: usize = 10;

const SCALE_FLOOR: f64 = 1e-8;
const MAX_LLOYD_ITERS: usize = 300;
const MOVE_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Built-in 62-dimensional descriptor: three 16-bin colour histograms, the
/// per-channel mean and standard deviation on a 0–1 scale, and an 8-bin
/// magnitude-weighted gradient orientation histogram of luminance.
pub fn extract_features(patch: &Raster) -> Result<FeatureVector> {
    if patch.channels != 3 {
        return Err(Error::invalid(format!(
            "descriptor needs 3 channels, got {}",
            patch.channels
        )));
    }
    if patch.is_empty() {
        return Err(Error::invalid("descriptor of an empty patch"));
    }
    let n = (patch.width * patch.height) as f64;
    let mut hist = [[0u32; 16]; 3];
    let mut sum = [0u64; 3];
    let mut sum_sq = [0u64; 3];
    for px in patch.data.chunks_exact(3) {
        for c in 0..3 {
            let v = px[c];
            hist[c][(v >> 4) as usize] += 1;
            sum[c] += v as u64;
            sum_sq[c] += (v as u64) * (v as u64);
        }
    }
    let mut out = Vec::with_capacity(FEATURE_DIM);
    for h in &hist {
        out.extend(h.iter().map(|&b| b as f64 / n));
    }
    for c in 0..3 {
        let mean = sum[c] as f64 / n;
        let var = (sum_sq[c] as f64 / n - mean * mean).max(0.0);
        out.push(mean / 255.0);
        out.push(var.sqrt() / 255.0);
    }
    out.extend(orientation_histogram(patch));
    debug_assert_eq!(out.len(), FEATURE_DIM);
    Ok(FeatureVector(out))
}

/// Bin of a gradient direction in 45° sectors, `[0°, 45°)` first.
#[inline]
fn octant(gx: f32, gy: f32) -> usize {
    if gx > 0.0 && gy >= 0.0 {
        if gy < gx { 0 } else { 1 }
    } else if gx <= 0.0 && gy > 0.0 {
        if -gx < gy { 2 } else { 3 }
    } else if gx < 0.0 && gy <= 0.0 {
        if -gy < -gx { 4 } else { 5 }
    } else if gx < -gy {
        6
    } else {
        7
    }
}

fn orientation_histogram(patch: &Raster) -> [f64; 8] {
    let (w, h) = (patch.width, patch.height);
    let mut bins = [0.0f64; 8];
    if w < 3 || h < 3 {
        return bins;
    }
    let luma: Vec<f32> = patch
        .data
        .chunks_exact(3)
        .map(|p| 0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32)
        .collect();
    let mut row_bins = [0.0f32; 8];
    for y in 1..h - 1 {
        row_bins.fill(0.0);
        let above = &luma[(y - 1) * w..y * w];
        let mid = &luma[y * w..(y + 1) * w];
        let below = &luma[(y + 1) * w..(y + 2) * w];
        for x in 1..w - 1 {
            let gx = mid[x + 1] - mid[x - 1];
            let gy = below[x] - above[x];
            if gx == 0.0 && gy == 0.0 {
                continue;
            }
            row_bins[octant(gx, gy)] += (gx * gx + gy * gy).sqrt();
        }
        for (b, r) in bins.iter_mut().zip(row_bins) {
            *b += r as f64;
        }
    }
    let total: f64 = bins.iter().sum();
    if total > 0.0 {
        for b in &mut bins {
            *b /= total;
        }
    }
    bins
}

/// Source of per-patch feature vectors.
pub trait FeatureExtractor: Send + Sync {
    fn dim(&self) -> usize;

    /// `key` identifies the patch as `(slide_id, x, y)` for extractors that
    /// look features up instead of computing them.
    fn extract(&self, key: (&str, u64, u64), patch: &Raster) -> Result<FeatureVector>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct BuiltinDescriptor;

impl FeatureExtractor for BuiltinDescriptor {
    fn dim(&self) -> usize {
        FEATURE_DIM
    }

    fn extract(&self, _key: (&str, u64, u64), patch: &Raster) -> Result<FeatureVector> {
        extract_features(patch)
    }
}

/// Features supplied from HFV1 files, aligned with patch-index record order.
#[derive(Clone, Debug, Default)]
pub struct ExternalFeatures {
    dim: usize,
    table: HashMap<(String, u64, u64), Vec<f64>>,
}

impl ExternalFeatures {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            table: HashMap::new(),
        }
    }

    /// Registers the rows of one slide. `coords` follows the slide's index order.
    pub fn insert_slide(&mut self, slide_id: &str, coords: &[(u64, u64)], rows: &[Vec<f32>]) -> Result<()> {
        if coords.len() != rows.len() {
            return Err(Error::invalid(format!(
                "slide {slide_id}: {} feature rows for {} index records",
                rows.len(),
                coords.len()
            )));
        }
        for (&(x, y), row) in coords.iter().zip(rows) {
            if row.len() != self.dim {
                return Err(Error::invalid(format!(
                    "slide {slide_id}: feature row of dim {}, expected {}",
                    row.len(),
                    self.dim
                )));
            }
            self.table
                .insert((slide_id.to_string(), x, y), row.iter().map(|&v| v as f64).collect());
        }
        Ok(())
    }
}

impl FeatureExtractor for ExternalFeatures {
    fn dim(&self) -> usize {
        self.dim
    }

    fn extract(&self, key: (&str, u64, u64), _patch: &Raster) -> Result<FeatureVector> {
        self.table
            .get(&(key.0.to_string(), key.1, key.2))
            .map(|v| FeatureVector(v.clone()))
            .ok_or_else(|| {
                Error::invalid(format!(
                    "no external features for patch ({}, {}) of {}",
                    key.1, key.2, key.0
                ))
            })
    }
}

pub const HFV_MAGIC: &[u8; 4] = b"HFV1";

pub fn write_hfv(path: impl AsRef<Path>, rows: &[Vec<f32>]) -> Result<()> {
    let dim = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != dim) {
        return Err(Error::invalid("HFV rows must share one dimension"));
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(HFV_MAGIC)?;
    out.write_all(&(rows.len() as u32).to_le_bytes())?;
    out.write_all(&(dim as u32).to_le_bytes())?;
    for r in rows {
        for v in r {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_hfv(path: impl AsRef<Path>) -> Result<Vec<Vec<f32>>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 12 || &bytes[..4] != HFV_MAGIC {
        return Err(Error::format(0, "bad HFV1 header"));
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let need = 12 + count * dim * 4;
    if bytes.len() != need {
        return Err(Error::format(
            bytes.len().min(need) as u64,
            format!("HFV1 payload is {} bytes, expected {need}", bytes.len()),
        ));
    }
    Ok(bytes[12..]
        .chunks_exact(4 * dim.max(1))
        .take(count)
        .map(|row| {
            row.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect()
        })
        .collect())
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations. Returns
/// eigenvalues in descending order and the matching unit eigenvectors as
/// rows, each signed so its largest-magnitude entry is positive.
pub fn symmetric_eigen(matrix: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(matrix.len(), n * n);
    let mut a = matrix.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = Vec::with_capacity(n * n);
    for &col in &order {
        let mut e: Vec<f64> = (0..n).map(|k| v[k * n + col]).collect();
        let pivot = e
            .iter()
            .copied()
            .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if pivot < 0.0 {
            e.iter_mut().for_each(|x| *x = -*x);
        }
        vectors.extend(e);
    }
    (values, vectors)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterModel {
    pub d: usize,
    pub m: usize,
    pub k: usize,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// m×d, rows orthonormal.
    pub components: Vec<f64>,
    pub explained_ratio: f64,
    /// k×m.
    pub centroids: Vec<f64>,
}

/// Diagnostics from [`fit`].
#[derive(Clone, Debug)]
pub struct FitReport {
    /// Inertia after each assignment step, including the final one.
    pub inertia: Vec<f64>,
    /// Final Lloyd labels of the fit sample.
    pub labels: Vec<usize>,
    pub eigenvalues: Vec<f64>,
    pub empty_repairs: usize,
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[f64], m: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.chunks_exact(m).enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn kmeans_plus_plus(points: &[f64], n: usize, m: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut centroids = Vec::with_capacity(k * m);
    let first = rng.gen_range(0..n);
    centroids.extend_from_slice(&points[first * m..(first + 1) * m]);
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(&points[i * m..(i + 1) * m], &centroids[..m]))
        .collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    chosen = i;
                    break;
                }
                r -= w;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        let c = points[pick * m..(pick + 1) * m].to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(&points[i * m..(i + 1) * m], &c));
        }
        centroids.extend(c);
    }
    centroids
}

fn assign_all(points: &[f64], centroids: &[f64], m: usize) -> (Vec<usize>, f64) {
    let mut inertia = 0.0;
    let labels = points
        .chunks_exact(m)
        .map(|p| {
            let (j, d) = nearest(p, centroids, m);
            inertia += d;
            j
        })
        .collect();
    (labels, inertia)
}

/// Fits standardizer, PCA and k-means on `samples`.
pub fn fit(samples: &[FeatureVector], variance_target: f64, k: usize, seed: u64) -> Result<(ClusterModel, FitReport)> {
    let n = samples.len();
    if n <= 1 || n <= k {
        return Err(Error::invalid(format!(
            "clustering needs more than max(1, k={k}) samples, got {n}"
        )));
    }
    if k == 0 {
        return Err(Error::invalid("k must be positive"));
    }
    if !(0.0..=1.0).contains(&variance_target) || variance_target == 0.0 {
        return Err(Error::invalid(format!("variance target {variance_target} outside (0, 1]")));
    }
    let d = samples[0].dim();
    if d == 0 || samples.iter().any(|s| s.dim() != d) {
        return Err(Error::invalid("feature vectors must share one positive dimension"));
    }
    if samples.iter().any(|s| s.0.iter().any(|v| !v.is_finite())) {
        return Err(Error::invalid("feature vectors must be finite"));
    }

    // Z-score with population std
    let nf = n as f64;
    let mut mean = vec![0.0; d];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(&s.0) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= nf);
    let mut scale = vec![0.0; d];
    for s in samples {
        for j in 0..d {
            let c = s.0[j] - mean[j];
            scale[j] += c * c;
        }
    }
    scale
        .iter_mut()
        .for_each(|v| *v = (*v / nf).sqrt().max(SCALE_FLOOR));
    let z: Vec<f64> = samples
        .iter()
        .flat_map(|s| (0..d).map(|j| (s.0[j] - mean[j]) / scale[j]).collect::<Vec<_>>())
        .collect();

    let mut cov = vec![0.0; d * d];
    for row in z.chunks_exact(d) {
        for i in 0..d {
            let zi = row[i];
            if zi == 0.0 {
                continue;
            }
            for j in i..d {
                cov[i * d + j] += zi * row[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            cov[i * d + j] /= nf;
            cov[j * d + i] = cov[i * d + j];
        }
    }
    let (eigenvalues, vectors) = symmetric_eigen(&cov, d);
    let clipped: Vec<f64> = eigenvalues.iter().map(|&l| l.max(0.0)).collect();
    let total: f64 = clipped.iter().sum();
    let (m, explained_ratio) = if total <= 0.0 {
        (1, 1.0)
    } else {
        let mut cum = 0.0;
        let mut pick = (d, 1.0);
        for (i, l) in clipped.iter().enumerate() {
            cum += l;
            if cum / total >= variance_target {
                pick = (i + 1, (cum / total).min(1.0));
                break;
            }
        }
        pick
    };
    let components = vectors[..m * d].to_vec();

    let projected: Vec<f64> = z
        .chunks_exact(d)
        .flat_map(|row| {
            components
                .chunks_exact(d)
                .map(|c| c.iter().zip(row).map(|(a, b)| a * b).sum::<f64>())
                .collect::<Vec<_>>()
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_plus_plus(&projected, n, m, k, &mut rng);
    let mut inertia_history = Vec::new();
    let mut empty_repairs = 0;
    for _ in 0..MAX_LLOYD_ITERS {
        let (labels, inertia) = assign_all(&projected, &centroids, m);
        inertia_history.push(inertia);

        let mut sums = vec![0.0; k * m];
        let mut counts = vec![0usize; k];
        for (p, &l) in projected.chunks_exact(m).zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l * m..(l + 1) * m].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut next = centroids.clone();
        for j in 0..k {
            if counts[j] > 0 {
                for t in 0..m {
                    next[j * m + t] = sums[j * m + t] / counts[j] as f64;
                }
            }
        }
        // empty clusters jump to the point farthest from its own centroid
        let mut taken = vec![false; n];
        for j in 0..k {
            if counts[j] > 0 {
                continue;
            }
            let far = (0..n)
                .filter(|&i| !taken[i])
                .map(|i| {
                    let l = labels[i];
                    (i, sq_dist(&projected[i * m..(i + 1) * m], &next[l * m..(l + 1) * m]))
                })
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
            if let Some((i, _)) = far {
                taken[i] = true;
                next[j * m..(j + 1) * m].copy_from_slice(&projected[i * m..(i + 1) * m]);
                empty_repairs += 1;
            }
        }
        let shift = centroids
            .chunks_exact(m)
            .zip(next.chunks_exact(m))
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        if shift < MOVE_TOLERANCE {
            break;
        }
    }
    let (labels, inertia) = assign_all(&projected, &centroids, m);
    inertia_history.push(inertia);

    let model = ClusterModel {
        d,
        m,
        k,
        mean,
        scale,
        components,
        explained_ratio,
        centroids,
    };
    Ok((
        model,
        FitReport {
            inertia: inertia_history,
            labels,
            eigenvalues,
            empty_repairs,
        },
    ))
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    d: usize,
    m: usize,
    k: usize,
    explained_ratio: f64,
    std: String,
    mean: String,
    scale: String,
    components: String,
    centroids: String,
}

impl ClusterModel {
    pub fn project(&self, f: &[f64]) -> Result<Vec<f64>> {
        if f.len() != self.d {
            return Err(Error::invalid(format!(
                "feature dimension {} does not match model dimension {}",
                f.len(),
                self.d
            )));
        }
        let z: Vec<f64> = (0..self.d).map(|j| (f[j] - self.mean[j]) / self.scale[j]).collect();
        Ok(self
            .components
            .chunks_exact(self.d)
            .map(|c| c.iter().zip(&z).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// Nearest centroid after standardizing and projecting; lowest id wins ties.
    pub fn assign(&self, f: &FeatureVector) -> Result<usize> {
        let p = self.project(&f.0)?;
        Ok(nearest(&p, &self.centroids, self.m).0)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.mean.len() == self.d
            && self.scale.len() == self.d
            && self.components.len() == self.m * self.d
            && self.centroids.len() == self.k * self.m
            && self.m >= 1
            && self.k >= 1;
        if !ok {
            return Err(Error::invalid("cluster model arrays disagree with d, m, k"));
        }
        if self.scale.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid("cluster model scale entries must be positive"));
        }
        if self.centroids.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("cluster model centroids must be finite"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            d: self.d,
            m: self.m,
            k: self.k,
            explained_ratio: self.explained_ratio,
            std: "population".into(),
            mean: encode_f64(&self.mean),
            scale: encode_f64(&self.scale),
            components: encode_f64(&self.components),
            centroids: encode_f64(&self.centroids),
        };
        Ok(serde_json::to_string_pretty(&file)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: ModelFile = serde_json::from_str(text)?;
        let model = Self {
            d: f.d,
            m: f.m,
            k: f.k,
            explained_ratio: f.explained_ratio,
            mean: decode_f64(&f.mean, f.d, "mean")?,
            scale: decode_f64(&f.scale, f.d, "scale")?,
            components: decode_f64(&f.components, f.m * f.d, "components")?,
            centroids: decode_f64(&f.centroids, f.k * f.m, "centroids")?,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
