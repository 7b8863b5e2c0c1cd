//! Patch-wise inference, heatmap stitching and the refinement stage.
//!
//! The heatmap holds one tumour probability per non-overlapping grid cell.
//! Refinement stacks the low-resolution slide with the upsampled heatmap into
//! a 1024×1024×4 tensor and maps it to a per-pixel probability, either with
//! the built-in neighbourhood logistic model or an external executor.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::FeatureExtractor;
use crate::codec::{decode_f64, encode_f64};
use crate::error::{Error, Result};
use crate::learn::{Accumulator, Adam, AdamConfig, PatchClassifier};
use crate::pyramid::{PyramidImage, Raster};
use crate::tissue::{Label, PatchIndex, LOWRES_SIDE};

/// Row-major interleaved raster of reals.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatRaster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl FloatRaster {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "{} values for a {width}x{height}x{channels} raster",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    /// Converts 8-bit samples, dividing each by `divisor`.
    pub fn from_u8(src: &Raster, divisor: f32) -> Self {
        Self {
            width: src.width,
            height: src.height,
            channels: src.channels,
            data: src.data.iter().map(|&v| v as f32 / divisor).collect(),
        }
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn channel(&self, c: usize) -> Result<FloatRaster> {
        if c >= self.channels {
            return Err(Error::invalid(format!("channel {c} of a {}-channel raster", self.channels)));
        }
        Ok(FloatRaster {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.data.iter().skip(c).step_by(self.channels).copied().collect(),
        })
    }
}

/// Bilinear resampling with half-pixel centres and clamped edges.
pub fn bilinear_resize(img: &FloatRaster, out_w: usize, out_h: usize) -> Result<FloatRaster> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::invalid(format!("cannot resize to {out_w}x{out_h}")));
    }
    if img.width == 0 || img.height == 0 {
        return Err(Error::invalid("cannot resize an empty raster"));
    }
    if (out_w, out_h) == (img.width, img.height) {
        return Ok(img.clone());
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let xs = taps(img.width, out_w);
    let ys = taps(img.height, out_h);
    let c = img.channels;
    // horizontal pass over every source row, then blend row pairs; the
    // arithmetic matches evaluating both lerps per output pixel
    let mut rows = vec![0f64; img.height * out_w * c];
    rows.par_chunks_mut(out_w * c).enumerate().for_each(|(y, row)| {
        let src = &img.data[y * img.width * c..(y + 1) * img.width * c];
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            for ch in 0..c {
                let a = src[x0 * c + ch] as f64;
                let b = src[x1 * c + ch] as f64;
                row[ox * c + ch] = a + (b - a) * fx;
            }
        }
    });
    let stride = out_w * c;
    let mut data = vec![0f32; out_h * stride];
    data.par_chunks_mut(stride).enumerate().for_each(|(oy, row)| {
        let (y0, y1, fy) = ys[oy];
        let top = &rows[y0 * stride..(y0 + 1) * stride];
        let bottom = &rows[y1 * stride..(y1 + 1) * stride];
        for ((o, &t), &b) in row.iter_mut().zip(top).zip(bottom) {
            *o = (t + (b - t) * fy) as f32;
        }
    });
    FloatRaster::new(out_w, out_h, c, data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
    pub level: usize,
    pub patch_size: u32,
}

impl Heatmap {
    pub fn zeros(width: usize, height: usize, level: usize, patch_size: u32) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
            level,
            patch_size,
        }
    }

    pub fn get(&self, cx: usize, cy: usize) -> f32 {
        self.values[cy * self.width + cx]
    }

    pub fn as_raster(&self) -> FloatRaster {
        FloatRaster {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.values.clone(),
        }
    }

    pub fn from_raster(r: FloatRaster, level: usize, patch_size: u32) -> Result<Self> {
        if r.channels != 1 {
            return Err(Error::invalid("heatmap raster must have one channel"));
        }
        if r.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("heatmap values must lie in [0, 1]"));
        }
        Ok(Self {
            width: r.width,
            height: r.height,
            values: r.data,
            level,
            patch_size,
        })
    }
}

/// Anything that maps a patch to a tumour probability.
pub trait PatchScorer: Sync {
    fn tumour_probability(&self, key: (&str, u64, u64), patch: &Raster) -> Result<f64>;
}

/// Feature extractor followed by the patch classifier.
pub struct ClassifierScorer<'a> {
    pub extractor: &'a dyn FeatureExtractor,
    pub classifier: &'a PatchClassifier,
}

impl PatchScorer for ClassifierScorer<'_> {
    fn tumour_probability(&self, key: (&str, u64, u64), patch: &Raster) -> Result<f64> {
        let f = self.extractor.extract(key, patch)?;
        let p = self.classifier.forward(f.as_slice())?;
        Ok(p.row(0)[Label::Tumour.index()])
    }
}

/// Returns the same probability for every patch.
pub struct ConstantScorer(pub f64);

impl PatchScorer for ConstantScorer {
    fn tumour_probability(&self, _key: (&str, u64, u64), _patch: &Raster) -> Result<f64> {
        Ok(self.0)
    }
}

pub fn grid_dims(pyr: &PyramidImage, level: usize, patch_size: u32) -> Result<(usize, usize)> {
    if patch_size == 0 {
        return Err(Error::invalid("patch size must be positive"));
    }
    let (w, h) = pyr.dims(level)?;
    let ps = patch_size as u64;
    Ok((w.div_ceil(ps) as usize, h.div_ceil(ps) as usize))
}

/// Scores every indexed grid cell on `workers` threads. Cells without an
/// index record stay 0.
pub fn infer_slide(pyr: &PyramidImage, index: &PatchIndex, scorer: &dyn PatchScorer, workers: usize) -> Result<Heatmap> {
    let level = index.level;
    let ps = index.patch_size;
    let (gw, gh) = grid_dims(pyr, level, ps)?;
    for r in &index.records {
        if r.level != level || r.x % ps as u64 != 0 || r.y % ps as u64 != 0 {
            return Err(Error::invalid(format!("record ({}, {}) is off the patch grid", r.x, r.y)));
        }
        if (r.x / ps as u64) as usize >= gw || (r.y / ps as u64) as usize >= gh {
            return Err(Error::invalid(format!("record ({}, {}) lies outside the slide", r.x, r.y)));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let scored: Vec<(usize, f32)> = pool.install(|| {
        index
            .records
            .par_iter()
            .map(|r| {
                let fail = |message: String| Error::Inference {
                    x: r.x,
                    y: r.y,
                    message,
                };
                let patch = pyr
                    .read_region(level, r.x as i64, r.y as i64, ps as usize, ps as usize)
                    .map_err(|e| fail(e.to_string()))?;
                let p = scorer
                    .tumour_probability((&r.slide_id, r.x, r.y), &patch)
                    .map_err(|e| fail(e.to_string()))?;
                if !(0.0..=1.0).contains(&p) {
                    return Err(fail(format!("probability {p} outside [0, 1]")));
                }
                let cell = (r.y / ps as u64) as usize * gw + (r.x / ps as u64) as usize;
                Ok((cell, p as f32))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut hm = Heatmap::zeros(gw, gh, level, ps);
    for (cell, p) in scored {
        hm.values[cell] = p;
    }
    Ok(hm)
}

/// 1024×1024×4: low-resolution RGB in [0,1] and the upsampled heatmap.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedInput {
    pub tensor: FloatRaster,
}

impl FusedInput {
    pub const CHANNELS: usize = 4;

    pub fn heatmap_channel(&self) -> FloatRaster {
        self.tensor.channel(3).expect("fused input has four channels")
    }
}

pub fn fuse(pyr: &PyramidImage, hm: &Heatmap) -> Result<FusedInput> {
    let level = pyr
        .smallest_level_with_side(LOWRES_SIDE as u64)
        .ok_or_else(|| Error::invalid("no pyramid level reaches 1024 pixels"))?;
    if pyr.channels() != 3 {
        return Err(Error::invalid("fusion needs an RGB pyramid"));
    }
    let side = LOWRES_SIDE;
    let raw = pyr.level_raster(level)?;
    let rgb = if (raw.width, raw.height) == (side, side) {
        None
    } else {
        Some(bilinear_resize(&FloatRaster::from_u8(&raw, 255.0), side, side)?)
    };
    let heat = bilinear_resize(&hm.as_raster(), side, side)?;
    let mut data = vec![0f32; side * side * 4];
    for (i, (px, h)) in data.chunks_exact_mut(4).zip(&heat.data).enumerate() {
        match &rgb {
            Some(r) => {
                for ch in 0..3 {
                    px[ch] = r.data[i * 3 + ch].clamp(0.0, 1.0);
                }
            }
            None => {
                for ch in 0..3 {
                    px[ch] = raw.data[i * 3 + ch] as f32 / 255.0;
                }
            }
        }
        px[3] = h.clamp(0.0, 1.0);
    }
    Ok(FusedInput {
        tensor: FloatRaster::new(side, side, 4, data)?,
    })
}

/// Strict `prob > t`, as 0/255 bytes.
pub fn threshold_mask(prob: &FloatRaster, t: f32) -> Raster {
    Raster {
        width: prob.width,
        height: prob.height,
        channels: 1,
        data: prob.data.iter().map(|&v| if v > t { 255 } else { 0 }).collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum RefinerModel {
    Builtin(LogisticRefiner),
    External(Vec<String>),
}

/// Logistic regression over the edge-clamped (2r+1)² neighbourhood of all
/// four fused channels.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticRefiner {
    pub radius: usize,
    /// Ordered by (dy, dx, channel), dy and dx running from -r to r.
    pub weights: Vec<f64>,
    pub bias: f64,
    pub validation_loss: Option<f64>,
}

impl LogisticRefiner {
    pub fn feature_count(radius: usize) -> usize {
        (2 * radius + 1).pow(2) * FusedInput::CHANNELS
    }

    pub fn zeros(radius: usize) -> Self {
        Self {
            radius,
            weights: vec![0.0; Self::feature_count(radius)],
            bias: 0.0,
            validation_loss: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != Self::feature_count(self.radius) {
            return Err(Error::invalid(format!(
                "refiner radius {} needs {} weights, found {}",
                self.radius,
                Self::feature_count(self.radius),
                self.weights.len()
            )));
        }
        if !self.bias.is_finite() || self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::invalid("refiner weights must be finite"));
        }
        Ok(())
    }

    fn features_into(&self, t: &FloatRaster, x: usize, y: usize, out: &mut Vec<f64>) {
        out.clear();
        let r = self.radius as i64;
        let (w, h) = (t.width as i64, t.height as i64);
        for dy in -r..=r {
            let yy = (y as i64 + dy).clamp(0, h - 1) as usize;
            for dx in -r..=r {
                let xx = (x as i64 + dx).clamp(0, w - 1) as usize;
                let base = (yy * t.width + xx) * t.channels;
                out.extend(t.data[base..base + t.channels].iter().map(|&v| v as f64));
            }
        }
    }

    pub fn predict(&self, fused: &FusedInput) -> Result<FloatRaster> {
        self.validate()?;
        let t = &fused.tensor;
        let c = FusedInput::CHANNELS;
        if t.channels != c {
            return Err(Error::invalid("fused input must have four channels"));
        }
        let (w, h) = (t.width, t.height);
        let r = self.radius as i64;
        let mut z = vec![self.bias as f32; w * h];
        // one pass per window offset; same sums as features_into, cheaper
        let mut k = 0;
        for dy in -r..=r {
            for dx in -r..=r {
                let wk: [f32; 4] = std::array::from_fn(|i| self.weights[k * c + i] as f32);
                k += 1;
                // x range whose shifted column needs no clamping
                let lo = (-dx).clamp(0, w as i64) as usize;
                let hi = (w as i64 - dx).clamp(lo as i64, w as i64) as usize;
                let tap = |src: &[f32], xx: usize| {
                    let p = &src[xx * c..xx * c + c];
                    wk[0] * p[0] + wk[1] * p[1] + wk[2] * p[2] + wk[3] * p[3]
                };
                for y in 0..h {
                    let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                    let src = &t.data[yy * w * c..(yy + 1) * w * c];
                    let out = &mut z[y * w..(y + 1) * w];
                    let shifted = &src[(lo as i64 + dx) as usize * c..(hi as i64 + dx) as usize * c];
                    for (acc, p) in out[lo..hi].iter_mut().zip(shifted.chunks_exact(c)) {
                        *acc += wk[0] * p[0] + wk[1] * p[1] + wk[2] * p[2] + wk[3] * p[3];
                    }
                    for x in (0..lo).chain(hi..w) {
                        let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                        out[x] += tap(src, xx);
                    }
                }
            }
        }
        FloatRaster::new(w, h, 1, z.into_iter().map(|v| sigmoid(v as f64) as f32).collect())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&RefinerFile {
            kind: "logistic_refiner".into(),
            radius: self.radius,
            weights: encode_f64(&self.weights),
            bias: encode_f64(&[self.bias]),
            validation_loss: self.validation_loss,
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: RefinerFile = serde_json::from_str(text)?;
        if f.kind != "logistic_refiner" {
            return Err(Error::invalid(format!("expected a logistic_refiner, found {}", f.kind)));
        }
        let m = Self {
            radius: f.radius,
            weights: decode_f64(&f.weights, Self::feature_count(f.radius), "weights")?,
            bias: decode_f64(&f.bias, 1, "bias")?[0],
            validation_loss: f.validation_loss,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct RefinerFile {
    kind: String,
    radius: usize,
    weights: String,
    bias: String,
    validation_loss: Option<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Probability map for one fused input.
pub fn refine(fused: &FusedInput, model: &RefinerModel) -> Result<FloatRaster> {
    match model {
        RefinerModel::Builtin(m) => m.predict(fused),
        RefinerModel::External(cmd) => {
            let mut ex = Executor::spawn(cmd)?;
            let t = &fused.tensor;
            let input = Tensor {
                dims: vec![t.height, t.width, t.channels],
                data: t.data.clone(),
            };
            let out = ex.infer(&[input])?;
            ex.close()?;
            let n = t.width * t.height;
            if out.data.len() != n || out.dims.iter().product::<usize>() != n {
                return Err(Error::Executor(format!(
                    "executor returned dims {:?}, expected {}x{}",
                    out.dims, t.height, t.width
                )));
            }
            if out.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Executor("executor output outside [0, 1]".into()));
            }
            FloatRaster::new(t.width, t.height, 1, out.data)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefinerTrainConfig {
    pub radius: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub accumulation_steps: usize,
    /// Pixels drawn per class per image.
    pub samples_per_class: usize,
    /// Share of drawn pixels held out for the validation loss.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for RefinerTrainConfig {
    fn default() -> Self {
        Self {
            radius: 1,
            lr: 1e-3,
            epochs: 40,
            batch_size: 64,
            accumulation_steps: 6,
            samples_per_class: 2000,
            validation_fraction: 0.2,
            seed: 0,
        }
    }
}

/// Fits the built-in refiner on balanced pixel samples from each pair.
pub fn train_refiner(pairs: &[(FusedInput, Raster)], cfg: &RefinerTrainConfig) -> Result<LogisticRefiner> {
    if pairs.is_empty() {
        return Err(Error::invalid("refiner training needs at least one image"));
    }
    if cfg.batch_size == 0 || cfg.samples_per_class == 0 || cfg.accumulation_steps == 0 {
        return Err(Error::invalid(
            "batch_size, accumulation_steps and samples_per_class must be positive",
        ));
    }
    let mut model = LogisticRefiner::zeros(cfg.radius);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut samples: Vec<(Vec<f64>, f64)> = Vec::new();
    for (i, (fused, truth)) in pairs.iter().enumerate() {
        let t = &fused.tensor;
        if truth.channels != 1 || (truth.width, truth.height) != (t.width, t.height) {
            return Err(Error::invalid(format!("pair {i}: truth mask does not match the fused input")));
        }
        if truth.data.iter().any(|&v| v != 0 && v != 255) {
            return Err(Error::invalid(format!("pair {i}: truth mask is not binary")));
        }
        let (pos, neg): (Vec<usize>, Vec<usize>) = (0..truth.data.len()).partition(|&p| truth.data[p] == 255);
        if pos.is_empty() || neg.is_empty() {
            log::warn!("refiner pair {i} has single-class truth; sampling one class only");
        }
        for (class, pool) in [(1.0, &pos), (0.0, &neg)] {
            if pool.is_empty() {
                continue;
            }
            for _ in 0..cfg.samples_per_class {
                let p = pool[rng.gen_range(0..pool.len())];
                let mut f = Vec::new();
                model.features_into(t, p % t.width, p / t.width, &mut f);
                samples.push((f, class));
            }
        }
    }
    samples.shuffle(&mut rng);
    let n_val = ((samples.len() as f64) * cfg.validation_fraction).floor() as usize;
    let n_val = n_val.min(samples.len().saturating_sub(1));
    let (val, train) = samples.split_at(n_val);

    let n = model.weights.len() + 1;
    let mut params: Vec<f64> = model.weights.iter().copied().chain([model.bias]).collect();
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), n);
    let mut acc = Accumulator::new(cfg.accumulation_steps, n);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut grad = vec![0.0; n];
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &s in chunk {
                let (f, y) = &train[s];
                let p = sigmoid(params[n - 1] + dot(&params[..n - 1], f));
                let e = (p - y) / chunk.len() as f64;
                for (g, v) in grad.iter_mut().zip(f) {
                    *g += e * v;
                }
                grad[n - 1] += e;
            }
            if let Some(mean) = acc.push(&grad) {
                adam.step(&mut params, &mean);
            }
        }
        if let Some(mean) = acc.flush() {
            adam.step(&mut params, &mean);
        }
    }
    model.bias = params[n - 1];
    params.truncate(n - 1);
    model.weights = params;
    let held = if val.is_empty() { train } else { val };
    let loss = held
        .iter()
        .map(|(f, y)| {
            let p = sigmoid(model.bias + dot(&model.weights, f)).clamp(1e-12, 1.0 - 1e-12);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / held.len() as f64;
    model.validation_loss = Some(loss);
    model.validate()?;
    Ok(model)
}

/// Dense little-endian f32 tensor as exchanged with executors.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let mut header = self.dims.len().to_string();
        for d in &self.dims {
            header.push(' ');
            header.push_str(&d.to_string());
        }
        header.push('\n');
        w.write_all(header.as_bytes())?;
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes)
    }

    pub fn read_from<R: BufRead>(r: &mut R) -> Result<Self> {
        let mut line = String::new();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Executor("stream ended before a tensor header".into()));
        }
        let nums: Vec<usize> = line
            .split_whitespace()
            .map(|t| t.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Executor(format!("bad tensor header {:?}", line.trim_end())))?;
        let (rank, dims) = nums
            .split_first()
            .ok_or_else(|| Error::Executor("empty tensor header".into()))?;
        if *rank != dims.len() {
            return Err(Error::Executor(format!(
                "tensor header declares rank {rank} but lists {} dims",
                dims.len()
            )));
        }
        let count: usize = dims.iter().product();
        let mut bytes = vec![0u8; count * 4];
        r.read_exact(&mut bytes)
            .map_err(|e| Error::Executor(format!("tensor payload truncated: {e}")))?;
        Ok(Self {
            dims: dims.to_vec(),
            data: bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        })
    }
}

/// Child process speaking the tensor protocol on stdin/stdout.
pub struct Executor {
    child: Child,
    stdin: Option<ChildStdin>,
    stdout: BufReader<ChildStdout>,
}

impl Executor {
    pub fn spawn(command: &[String]) -> Result<Self> {
        let (prog, args) = command
            .split_first()
            .ok_or_else(|| Error::Executor("empty executor command".into()))?;
        let mut child = Command::new(prog)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Executor(format!("cannot start {prog}: {e}")))?;
        let stdin = child.stdin.take();
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self { child, stdin, stdout })
    }

    pub fn infer(&mut self, inputs: &[Tensor]) -> Result<Tensor> {
        let stdin = self
            .stdin
            .as_mut()
            .ok_or_else(|| Error::Executor("executor already closed".into()))?;
        let send = |w: &mut ChildStdin| -> std::io::Result<()> {
            w.write_all(format!("INFER {}\n", inputs.len()).as_bytes())?;
            for t in inputs {
                t.write_to(w)?;
            }
            w.flush()
        };
        send(stdin).map_err(|e| self.crash(format!("writing request: {e}")))?;
        Tensor::read_from(&mut self.stdout).map_err(|e| self.crash(e.to_string()))
    }

    fn crash(&mut self, what: String) -> Error {
        let status = self.child.try_wait().ok().flatten();
        match status {
            Some(s) => Error::Executor(format!("{what} (executor exited with {s})")),
            None => Error::Executor(what),
        }
    }

    /// Sends `QUIT` and waits for the child.
    pub fn close(mut self) -> Result<()> {
        self.shutdown()
    }

    fn shutdown(&mut self) -> Result<()> {
        if let Some(mut stdin) = self.stdin.take() {
            let _ = stdin.write_all(b"QUIT\n");
            let _ = stdin.flush();
        }
        let status = self.child.wait()?;
        if !status.success() {
            return Err(Error::Executor(format!("executor exited with {status}")));
        }
        Ok(())
    }
}

impl Drop for Executor {
    fn drop(&mut self) {
        if self.stdin.is_some() {
            let _ = self.shutdown();
        }
    }
}

/// Server side of the protocol: answers each request with `f(inputs)` until
/// `QUIT` or end of input.
pub fn serve<R: BufRead, W: Write>(
    input: &mut R,
    output: &mut W,
    mut f: impl FnMut(&[Tensor]) -> Result<Tensor>,
) -> Result<()> {
    let mut line = String::new();
    loop {
        line.clear();
        if input.read_line(&mut line)? == 0 {
            return Ok(());
        }
        let cmd = line.trim_end();
        if cmd == "QUIT" {
            return Ok(());
        }
        let n: usize = cmd
            .strip_prefix("INFER ")
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| Error::Executor(format!("unexpected request {cmd:?}")))?;
        let tensors = (0..n).map(|_| Tensor::read_from(input)).collect::<Result<Vec<_>>>()?;
        f(&tensors)?.write_to(output)?;
        output.flush()?;
    }
}

/// Channel 3 of an (H, W, 4) tensor, as an (H, W) tensor.
pub fn echo_heatmap_channel(inputs: &[Tensor]) -> Result<Tensor> {
    let t = inputs
        .first()
        .ok_or_else(|| Error::Executor("request carried no tensors".into()))?;
    if t.dims.len() != 3 || t.dims[2] != 4 {
        return Err(Error::Executor(format!("expected an (H, W, 4) tensor, got {:?}", t.dims)));
    }
    Ok(Tensor {
        dims: vec![t.dims[0], t.dims[1]],
        data: t.data.iter().skip(3).step_by(4).copied().collect(),
    })
}

fn read_header_tokens<R: BufRead>(r: &mut R, n: usize) -> Result<Vec<String>> {
    // tokens separated by whitespace; exactly one whitespace byte after the last
    let mut tokens = Vec::new();
    let mut cur = Vec::new();
    let mut byte = [0u8; 1];
    while tokens.len() < n {
        if r.read(&mut byte)? == 0 {
            return Err(Error::format(0, "header truncated"));
        }
        if byte[0].is_ascii_whitespace() {
            if !cur.is_empty() {
                tokens.push(String::from_utf8_lossy(&cur).into_owned());
                cur.clear();
            }
        } else {
            cur.push(byte[0]);
        }
    }
    Ok(tokens)
}

fn parse_dim(s: &str) -> Result<usize> {
    s.parse()
        .ok()
        .filter(|&v: &usize| v > 0)
        .ok_or_else(|| Error::format(0, format!("bad dimension {s:?}")))
}

/// Grayscale little-endian PFM. Rows are stored bottom to top.
pub fn write_pfm(path: impl AsRef<Path>, img: &FloatRaster) -> Result<()> {
    if img.channels != 1 {
        return Err(Error::invalid("PFM output takes one channel"));
    }
    let mut out = format!("Pf\n{} {}\n-1.0\n", img.width, img.height).into_bytes();
    out.reserve(img.data.len() * 4);
    for y in (0..img.height).rev() {
        for v in &img.data[y * img.width..(y + 1) * img.width] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<FloatRaster> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let tok = read_header_tokens(&mut r, 4)?;
    if tok[0] != "Pf" {
        return Err(Error::format(0, format!("not a grayscale PFM: {:?}", tok[0])));
    }
    let (w, h) = (parse_dim(&tok[1])?, parse_dim(&tok[2])?);
    let scale: f64 = tok[3]
        .parse()
        .map_err(|_| Error::format(0, format!("bad PFM scale {:?}", tok[3])))?;
    let little = scale < 0.0;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != w * h * 4 {
        return Err(Error::format(0, format!("PFM payload is {} bytes, expected {}", bytes.len(), w * h * 4)));
    }
    let mut data = vec![0f32; w * h];
    for (i, c) in bytes.chunks_exact(4).enumerate() {
        let raw: [u8; 4] = c.try_into().unwrap();
        let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let (row, col) = (h - 1 - i / w, i % w);
        data[row * w + col] = v;
    }
    FloatRaster::new(w, h, 1, data)
}

/// Binary P5 with maxval 255.
pub fn write_pgm(path: impl AsRef<Path>, mask: &Raster) -> Result<()> {
    if mask.channels != 1 {
        return Err(Error::invalid("PGM output takes one channel"));
    }
    let mut out = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    out.extend_from_slice(&mask.data);
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Raster> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let tok = read_header_tokens(&mut r, 4)?;
    if tok[0] != "P5" {
        return Err(Error::format(0, format!("not a binary PGM: {:?}", tok[0])));
    }
    if tok[3] != "255" {
        return Err(Error::format(0, format!("unsupported PGM maxval {}", tok[3])));
    }
    let (w, h) = (parse_dim(&tok[1])?, parse_dim(&tok[2])?);
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    if data.len() != w * h {
        return Err(Error::format(0, format!("PGM payload is {} bytes, expected {}", data.len(), w * h)));
    }
    Raster::new(w, h, 1, data)
}
