//! Patch classifier, cross-entropy losses and the training loop.
//!
//! The cluster-weighted loss averages the cross-entropy of each cluster
//! present in a batch separately and then takes the macro mean over those
//! clusters, so tissue types that are rare in a batch weigh as much as
//! common ones.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{decode_f64, encode_f64};
use crate::error::{Error, Result};
use crate::tissue::PatchRecord;

pub const PROB_CLIP: f64 = 1e-12;
pub const DEFAULT_HIDDEN: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Ce,
    /// Per-cluster mean cross-entropy, macro-averaged over clusters present.
    Cwce,
    /// Summed cross-entropy divided by the number of clusters present, with no
    /// per-cluster normalization.
    CwceUnnormalized,
}

impl LossKind {
    pub fn uses_clusters(self) -> bool {
        !matches!(self, LossKind::Ce)
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Ce => "ce",
            LossKind::Cwce => "cwce",
            LossKind::CwceUnnormalized => "cwce_unnormalized",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(LossKind::Ce),
            "cwce" => Ok(LossKind::Cwce),
            "cwce_unnormalized" => Ok(LossKind::CwceUnnormalized),
            _ => Err(Error::invalid(format!("unknown loss {s:?}"))),
        }
    }
}

/// A batch of flattened inputs with one-hot targets and cluster ids.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledBatch {
    /// B×D row-major.
    pub inputs: Vec<f64>,
    pub dim: usize,
    /// B×C row-major.
    pub y: Vec<f64>,
    pub classes: usize,
    /// Cluster id per sample, -1 when cluster guiding is off.
    pub q: Vec<i64>,
    /// Sampled patch coordinates, when the batch came from slides.
    pub records: Vec<PatchRecord>,
    /// Raw patch pixels, kept only on request.
    pub patches: Vec<Vec<u8>>,
}

impl LabeledBatch {
    pub fn new(inputs: Vec<f64>, dim: usize, labels: &[usize], classes: usize, q: Vec<i64>) -> Result<Self> {
        let b = labels.len();
        if inputs.len() != b * dim || q.len() != b {
            return Err(Error::invalid("batch arrays disagree on batch size"));
        }
        let mut y = vec![0.0; b * classes];
        for (i, &l) in labels.iter().enumerate() {
            if l >= classes {
                return Err(Error::invalid(format!("label {l} out of range for {classes} classes")));
            }
            y[i * classes + l] = 1.0;
        }
        if q.iter().any(|&v| v < -1) {
            return Err(Error::invalid("cluster ids must be >= -1"));
        }
        Ok(Self {
            inputs,
            dim,
            y,
            classes,
            q,
            records: Vec::new(),
            patches: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    /// Number of distinct clusters present.
    pub fn clusters_present(&self) -> usize {
        let mut ids: Vec<i64> = self.q.clone();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }

    pub fn label(&self, i: usize) -> usize {
        let row = &self.y[i * self.classes..(i + 1) * self.classes];
        row.iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map_or(0, |(c, _)| c)
    }

    pub fn concat(batches: &[LabeledBatch]) -> Result<LabeledBatch> {
        let first = batches.first().ok_or_else(|| Error::invalid("nothing to concatenate"))?;
        let mut out = LabeledBatch {
            dim: first.dim,
            classes: first.classes,
            ..Default::default()
        };
        for b in batches {
            if b.dim != out.dim || b.classes != out.classes {
                return Err(Error::invalid("batch shapes differ"));
            }
            out.inputs.extend_from_slice(&b.inputs);
            out.y.extend_from_slice(&b.y);
            out.q.extend_from_slice(&b.q);
            out.records.extend(b.records.iter().cloned());
            out.patches.extend(b.patches.iter().cloned());
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Probabilities {
    pub rows: usize,
    pub classes: usize,
    pub p: Vec<f64>,
}

impl Probabilities {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.p[i * self.classes..(i + 1) * self.classes]
    }
}

/// Row-wise softmax with probabilities clipped into `[1e-12, 1 - 1e-12]`.
pub fn softmax_rows(logits: &[f64], classes: usize) -> Probabilities {
    let rows = logits.len() / classes;
    let mut p = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(classes) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&z| (z - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        p.extend(exps.iter().map(|e| (e / sum).clamp(PROB_CLIP, 1.0 - PROB_CLIP)));
    }
    Probabilities { rows, classes, p }
}

fn sample_ce(p: &[f64], y: &[f64]) -> f64 {
    -p.iter().zip(y).map(|(&pc, &yc)| if yc == 0.0 { 0.0 } else { yc * pc.ln() }).sum::<f64>()
}

fn check_shapes(p: &Probabilities, y: &[f64]) -> Result<()> {
    if y.len() != p.rows * p.classes {
        return Err(Error::invalid("label matrix does not match predictions"));
    }
    Ok(())
}

/// Mean categorical cross-entropy.
pub fn ce_loss(p: &Probabilities, y: &[f64]) -> Result<f64> {
    check_shapes(p, y)?;
    if p.rows == 0 {
        return Err(Error::invalid("cross-entropy of an empty batch"));
    }
    let total: f64 = (0..p.rows)
        .map(|i| sample_ce(p.row(i), &y[i * p.classes..(i + 1) * p.classes]))
        .sum();
    Ok(total / p.rows as f64)
}

/// Per-sample weights so that `loss = Σ w_i · CE_i`.
fn sample_weights(q: &[i64], kind: LossKind) -> Result<Vec<f64>> {
    let b = q.len();
    if b == 0 {
        return Err(Error::invalid("loss of an empty batch"));
    }
    if !kind.uses_clusters() {
        return Ok(vec![1.0 / b as f64; b]);
    }
    let mut sizes: BTreeMap<i64, usize> = BTreeMap::new();
    for &k in q {
        *sizes.entry(k).or_default() += 1;
    }
    let kb = sizes.len() as f64;
    Ok(q.iter()
        .map(|k| match kind {
            LossKind::Cwce => 1.0 / (kb * sizes[k] as f64),
            _ => 1.0 / kb,
        })
        .collect())
}

/// Cluster-weighted cross-entropy: mean cross-entropy within each cluster in
/// `q`, then the unweighted mean over the clusters present.
pub fn cwce_loss(p: &Probabilities, y: &[f64], q: &[i64]) -> Result<f64> {
    weighted_loss(p, y, q, LossKind::Cwce)
}

pub fn loss(p: &Probabilities, y: &[f64], q: &[i64], kind: LossKind) -> Result<f64> {
    weighted_loss(p, y, q, kind)
}

fn weighted_loss(p: &Probabilities, y: &[f64], q: &[i64], kind: LossKind) -> Result<f64> {
    check_shapes(p, y)?;
    if q.len() != p.rows {
        return Err(Error::invalid("cluster ids do not match predictions"));
    }
    if p.rows == 0 {
        return Err(Error::invalid("loss needs at least one cluster present"));
    }
    if kind == LossKind::Cwce {
        // mean of per-cluster means, accumulated per cluster
        let mut per: BTreeMap<i64, (f64, usize)> = BTreeMap::new();
        for i in 0..p.rows {
            let e = per.entry(q[i]).or_default();
            e.0 += sample_ce(p.row(i), &y[i * p.classes..(i + 1) * p.classes]);
            e.1 += 1;
        }
        let kb = per.len() as f64;
        return Ok(per.values().map(|(s, n)| s / *n as f64).sum::<f64>() / kb);
    }
    let w = sample_weights(q, kind)?;
    Ok((0..p.rows)
        .map(|i| w[i] * sample_ce(p.row(i), &y[i * p.classes..(i + 1) * p.classes]))
        .sum())
}

/// Dense `D → H (ReLU) → C (softmax)` classifier with parameters stored flat
/// as `[W1 (H×D), b1 (H), W2 (C×H), b2 (C)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchClassifier {
    pub input_dim: usize,
    pub hidden: usize,
    pub classes: usize,
    pub params: Vec<f64>,
}

struct Activations {
    pre: Vec<f64>,
    hidden: Vec<f64>,
    probs: Probabilities,
}

impl PatchClassifier {
    pub fn param_count(d: usize, h: usize, c: usize) -> usize {
        h * d + h + c * h + c
    }

    pub fn zeros(input_dim: usize, hidden: usize, classes: usize) -> Self {
        Self {
            input_dim,
            hidden,
            classes,
            params: vec![0.0; Self::param_count(input_dim, hidden, classes)],
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn new(input_dim: usize, hidden: usize, classes: usize, seed: u64) -> Self {
        let mut m = Self::zeros(input_dim, hidden, classes);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l1 = (6.0 / (input_dim + hidden) as f64).sqrt();
        let l2 = (6.0 / (hidden + classes) as f64).sqrt();
        let (w1, w2) = (m.w1_range(), m.w2_range());
        for v in &mut m.params[w1] {
            *v = rng.gen_range(-l1..l1);
        }
        for v in &mut m.params[w2] {
            *v = rng.gen_range(-l2..l2);
        }
        m
    }

    fn w1_range(&self) -> std::ops::Range<usize> {
        0..self.hidden * self.input_dim
    }

    fn b1_range(&self) -> std::ops::Range<usize> {
        let s = self.hidden * self.input_dim;
        s..s + self.hidden
    }

    fn w2_range(&self) -> std::ops::Range<usize> {
        let s = self.b1_range().end;
        s..s + self.classes * self.hidden
    }

    fn b2_range(&self) -> std::ops::Range<usize> {
        let s = self.w2_range().end;
        s..s + self.classes
    }

    fn check_inputs(&self, inputs: &[f64]) -> Result<usize> {
        if self.input_dim == 0 || inputs.len() % self.input_dim != 0 {
            return Err(Error::invalid(format!(
                "input of {} values is not a multiple of the model dimension {}",
                inputs.len(),
                self.input_dim
            )));
        }
        Ok(inputs.len() / self.input_dim)
    }

    fn activations(&self, inputs: &[f64]) -> Result<Activations> {
        let b = self.check_inputs(inputs)?;
        let (d, h, c) = (self.input_dim, self.hidden, self.classes);
        let w1 = &self.params[self.w1_range()];
        let b1 = &self.params[self.b1_range()];
        let w2 = &self.params[self.w2_range()];
        let b2 = &self.params[self.b2_range()];
        let mut pre = vec![0.0; b * h];
        let mut hidden = vec![0.0; b * h];
        let mut logits = vec![0.0; b * c];
        for i in 0..b {
            let x = &inputs[i * d..(i + 1) * d];
            for j in 0..h {
                let z = b1[j] + w1[j * d..(j + 1) * d].iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
                pre[i * h + j] = z;
                // not f64::max, which would turn a NaN into 0
                hidden[i * h + j] = if z < 0.0 { 0.0 } else { z };
            }
            let hi = &hidden[i * h..(i + 1) * h];
            for k in 0..c {
                logits[i * c + k] = b2[k] + w2[k * h..(k + 1) * h].iter().zip(hi).map(|(w, v)| w * v).sum::<f64>();
            }
        }
        Ok(Activations {
            pre,
            hidden,
            probs: softmax_rows(&logits, c),
        })
    }

    pub fn forward(&self, inputs: &[f64]) -> Result<Probabilities> {
        Ok(self.activations(inputs)?.probs)
    }

    /// Loss value and exact parameter gradient on `batch`.
    pub fn loss_and_gradient(&self, batch: &LabeledBatch, kind: LossKind) -> Result<(f64, Vec<f64>)> {
        if batch.dim != self.input_dim || batch.classes != self.classes {
            return Err(Error::invalid("batch shape does not match the classifier"));
        }
        let act = self.activations(&batch.inputs)?;
        let value = loss(&act.probs, &batch.y, &batch.q, kind)?;
        let weights = sample_weights(&batch.q, kind)?;
        let (d, h, c) = (self.input_dim, self.hidden, self.classes);
        let w2 = &self.params[self.w2_range()];
        let mut grad = vec![0.0; self.params.len()];
        let (r_w1, r_b1, r_w2, r_b2) = (self.w1_range(), self.b1_range(), self.w2_range(), self.b2_range());
        let mut dlogit = vec![0.0; c];
        let mut dz = vec![0.0; h];
        for i in 0..batch.len() {
            let p = act.probs.row(i);
            let y = &batch.y[i * c..(i + 1) * c];
            let ysum: f64 = y.iter().sum();
            for k in 0..c {
                dlogit[k] = weights[i] * (p[k] * ysum - y[k]);
            }
            let hi = &act.hidden[i * h..(i + 1) * h];
            for k in 0..c {
                grad[r_b2.start + k] += dlogit[k];
                let row = &mut grad[r_w2.start + k * h..r_w2.start + (k + 1) * h];
                for (g, &v) in row.iter_mut().zip(hi) {
                    *g += dlogit[k] * v;
                }
            }
            for j in 0..h {
                dz[j] = if act.pre[i * h + j] > 0.0 {
                    (0..c).map(|k| w2[k * h + j] * dlogit[k]).sum()
                } else {
                    0.0
                };
            }
            let x = &batch.inputs[i * d..(i + 1) * d];
            for j in 0..h {
                if dz[j] == 0.0 {
                    continue;
                }
                grad[r_b1.start + j] += dz[j];
                let row = &mut grad[r_w1.start + j * d..r_w1.start + (j + 1) * d];
                for (g, &v) in row.iter_mut().zip(x) {
                    *g += dz[j] * v;
                }
            }
        }
        Ok((value, grad))
    }

    pub fn gradients(&self, batch: &LabeledBatch, kind: LossKind) -> Result<Vec<f64>> {
        Ok(self.loss_and_gradient(batch, kind)?.1)
    }

    pub fn batch_loss(&self, batch: &LabeledBatch, kind: LossKind) -> Result<f64> {
        let p = self.forward(&batch.inputs)?;
        loss(&p, &batch.y, &batch.q, kind)
    }

    pub fn accuracy(&self, batches: &[LabeledBatch]) -> Result<f64> {
        let mut hit = 0usize;
        let mut total = 0usize;
        for b in batches {
            let p = self.forward(&b.inputs)?;
            for i in 0..b.len() {
                let pred = p
                    .row(i)
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map_or(0, |(c, _)| c);
                hit += (pred == b.label(i)) as usize;
                total += 1;
            }
        }
        Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, n: usize) -> Self {
        Self {
            config,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), grad.len());
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
}

/// Averages gradients over a fixed number of batches before each optimizer step.
#[derive(Clone, Debug)]
pub struct Accumulator {
    steps: usize,
    sum: Vec<f64>,
    count: usize,
}

impl Accumulator {
    pub fn new(steps: usize, n: usize) -> Self {
        Self {
            steps: steps.max(1),
            sum: vec![0.0; n],
            count: 0,
        }
    }

    /// Adds one gradient; returns the mean once `steps` gradients are in.
    pub fn push(&mut self, grad: &[f64]) -> Option<Vec<f64>> {
        for (s, g) in self.sum.iter_mut().zip(grad) {
            *s += g;
        }
        self.count += 1;
        if self.count == self.steps {
            self.flush()
        } else {
            None
        }
    }

    /// Mean of whatever is pending, if anything.
    pub fn flush(&mut self) -> Option<Vec<f64>> {
        if self.count == 0 {
            return None;
        }
        let n = self.count as f64;
        let mean = self.sum.iter().map(|s| s / n).collect();
        self.sum.iter_mut().for_each(|s| *s = 0.0);
        self.count = 0;
        Some(mean)
    }
}

/// Something that hands out one epoch of batches at a time.
pub trait EpochSource {
    fn epoch(&mut self, epoch: usize) -> Result<Vec<LabeledBatch>>;
}

/// Replays the same batches every epoch.
pub struct FixedBatches(pub Vec<LabeledBatch>);

impl EpochSource for FixedBatches {
    fn epoch(&mut self, _epoch: usize) -> Result<Vec<LabeledBatch>> {
        Ok(self.0.clone())
    }
}

impl<F: FnMut(usize) -> Result<Vec<LabeledBatch>>> EpochSource for F {
    fn epoch(&mut self, epoch: usize) -> Result<Vec<LabeledBatch>> {
        self(epoch)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub epochs: usize,
    pub accumulation_steps: usize,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub loss: LossKind,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss\n");
        for e in &self.epochs {
            let val = e.val_loss.map(|v| format!("{v:.17e}")).unwrap_or_default();
            out.push_str(&format!("{},{:.17e},{}\n", e.epoch, e.train_loss, val));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("epoch,train_loss,val_loss") {
            return Err(Error::format(0, "history CSV header mismatch"));
        }
        let mut epochs = Vec::new();
        for line in lines {
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 3 {
                return Err(Error::invalid(format!("bad history row {line:?}")));
            }
            let parse = |s: &str| s.parse::<f64>().map_err(|e| Error::invalid(format!("{s:?}: {e}")));
            epochs.push(EpochRecord {
                epoch: parts[0].parse().map_err(|e| Error::invalid(format!("{e}")))?,
                train_loss: parse(parts[1])?,
                val_loss: if parts[2].is_empty() { None } else { Some(parse(parts[2])?) },
            });
        }
        Ok(Self {
            epochs,
            ..Default::default()
        })
    }
}

fn mean_loss(model: &PatchClassifier, batches: &[LabeledBatch], kind: LossKind) -> Result<f64> {
    let mut total = 0.0;
    for b in batches {
        total += model.batch_loss(b, kind)?;
    }
    Ok(total / batches.len().max(1) as f64)
}

/// Trains with Adam and gradient accumulation. With a validation source the
/// best-validation parameters are returned and training stops after
/// `patience` epochs without improvement.
pub fn train(
    mut model: PatchClassifier,
    train_src: &mut dyn EpochSource,
    mut val_src: Option<&mut dyn EpochSource>,
    cfg: &TrainConfig,
) -> Result<(PatchClassifier, History)> {
    let n = model.params.len();
    let mut opt = Adam::new(cfg.adam, n);
    let mut acc = Accumulator::new(cfg.accumulation_steps, n);
    let mut history = History::default();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut stale = 0usize;

    for epoch in 1..=cfg.epochs {
        let batches = train_src.epoch(epoch)?;
        if batches.is_empty() {
            return Err(Error::invalid(format!("epoch {epoch} produced no batches")));
        }
        let mut total = 0.0;
        for b in &batches {
            let (value, grad) = model.loss_and_gradient(b, cfg.loss)?;
            if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::TrainingDiverged { epoch });
            }
            total += value;
            if let Some(g) = acc.push(&grad) {
                opt.step(&mut model.params, &g);
            }
        }
        if let Some(g) = acc.flush() {
            opt.step(&mut model.params, &g);
        }
        let train_loss = total / batches.len() as f64;

        let val_loss = match val_src.as_deref_mut() {
            Some(src) => {
                let v = mean_loss(&model, &src.epoch(epoch)?, cfg.loss)?;
                if !v.is_finite() {
                    return Err(Error::TrainingDiverged { epoch });
                }
                Some(v)
            }
            None => None,
        };
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        log::info!("epoch {epoch}: train {train_loss:.5} val {val_loss:?}");

        if let Some(v) = val_loss {
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, model.params.clone()));
                history.best_epoch = Some(epoch);
                stale = 0;
            } else {
                stale += 1;
                if cfg.patience > 0 && stale >= cfg.patience {
                    history.stopped_early = true;
                    break;
                }
            }
        }
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok((model, history))
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    kind: String,
    input_dim: usize,
    hidden: usize,
    classes: usize,
    loss: LossKind,
    seed: u64,
    w1: String,
    b1: String,
    w2: String,
    b2: String,
}

/// A classifier with the training metadata stored next to it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: PatchClassifier,
    pub loss: LossKind,
    pub seed: u64,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let m = &self.model;
        let file = CheckpointFile {
            kind: "patch_classifier".into(),
            input_dim: m.input_dim,
            hidden: m.hidden,
            classes: m.classes,
            loss: self.loss,
            seed: self.seed,
            w1: encode_f64(&m.params[m.w1_range()]),
            b1: encode_f64(&m.params[m.b1_range()]),
            w2: encode_f64(&m.params[m.w2_range()]),
            b2: encode_f64(&m.params[m.b2_range()]),
        };
        Ok(serde_json::to_string_pretty(&file)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: CheckpointFile = serde_json::from_str(text)?;
        if f.kind != "patch_classifier" {
            return Err(Error::invalid(format!("checkpoint kind {:?}", f.kind)));
        }
        let (d, h, c) = (f.input_dim, f.hidden, f.classes);
        let mut params = decode_f64(&f.w1, h * d, "w1")?;
        params.extend(decode_f64(&f.b1, h, "b1")?);
        params.extend(decode_f64(&f.w2, c * h, "w2")?);
        params.extend(decode_f64(&f.b2, c, "b2")?);
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("checkpoint holds non-finite parameters"));
        }
        Ok(Self {
            model: PatchClassifier {
                input_dim: d,
                hidden: h,
                classes: c,
                params,
            },
            loss: f.loss,
            seed: f.seed,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(rows: &[&[f64]]) -> Probabilities {
        Probabilities {
            rows: rows.len(),
            classes: rows[0].len(),
            p: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = PatchClassifier::zeros(4, 3, 5);
        let p = m.forward(&[1.0, -2.0, 3.0, 0.5]).unwrap();
        assert!(p.p.iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let a = softmax_rows(&[0.3, -1.0, 2.0], 3);
        let b = softmax_rows(&[100.3, 99.0, 102.0], 3);
        for (x, y) in a.p.iter().zip(&b.p) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((a.p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ce_reference_values() {
        let y = [1.0, 0.0, 1.0, 0.0];
        assert!(ce_loss(&probs(&[&[1.0 - PROB_CLIP, PROB_CLIP], &[1.0 - PROB_CLIP, PROB_CLIP]]), &y).unwrap() < 1e-11);
        assert!((ce_loss(&probs(&[&[0.5, 0.5], &[0.5, 0.5]]), &y).unwrap() - 2f64.ln()).abs() < 1e-15);
        let v = ce_loss(&probs(&[&[0.8, 0.2], &[0.6, 0.4]]), &y).unwrap();
        assert!((v - 0.3670).abs() < 1e-4);
    }

    #[test]
    fn cwce_macro_average_example() {
        let p = probs(&[&[0.8, 0.2], &[0.6, 0.4], &[0.9, 0.1]]);
        let y = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        let v = cwce_loss(&p, &y, &[0, 0, 1]).unwrap();
        assert!((v - 0.2362).abs() < 1e-4, "{v}");
        // one cluster reduces to CE exactly
        assert_eq!(cwce_loss(&p, &y, &[4, 4, 4]).unwrap(), ce_loss(&p, &y).unwrap());
    }

    #[test]
    fn cwce_ignores_duplication_within_a_cluster() {
        let p = probs(&[&[0.8, 0.2], &[0.6, 0.4], &[0.9, 0.1]]);
        let y = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        let base = cwce_loss(&p, &y, &[0, 0, 1]).unwrap();
        let p2 = probs(&[&[0.8, 0.2], &[0.6, 0.4], &[0.9, 0.1], &[0.8, 0.2], &[0.6, 0.4]]);
        let y2 = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        let dup = cwce_loss(&p2, &y2, &[0, 0, 1, 0, 0]).unwrap();
        assert!((base - dup).abs() < 1e-15);
    }

    #[test]
    fn unnormalized_variant_divides_the_sum() {
        let p = probs(&[&[0.8, 0.2], &[0.6, 0.4], &[0.9, 0.1]]);
        let y = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        let v = loss(&p, &y, &[0, 0, 1], LossKind::CwceUnnormalized).unwrap();
        let expect = -(0.8f64.ln() + 0.6f64.ln() + 0.9f64.ln()) / 2.0;
        assert!((v - expect).abs() < 1e-15);
    }

    #[test]
    fn empty_batch_rejected() {
        let p = Probabilities { rows: 0, classes: 2, p: vec![] };
        assert!(matches!(cwce_loss(&p, &[], &[]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let m = PatchClassifier::zeros(4, 3, 2);
        assert!(m.forward(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn accumulation_of_identical_batches_is_one_step() {
        let model = PatchClassifier::new(3, 4, 2, 9);
        let batch = LabeledBatch::new(vec![0.1, 0.5, -0.3, 0.9, -0.2, 0.4], 3, &[0, 1], 2, vec![-1, -1]).unwrap();
        let g = model.gradients(&batch, LossKind::Ce).unwrap();
        let mut acc = Accumulator::new(6, g.len());
        let mut out = None;
        for _ in 0..6 {
            out = acc.push(&g);
        }
        let mean = out.unwrap();
        for (a, b) in mean.iter().zip(&g) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn patience_counts_worsening_epochs() {
        let model = PatchClassifier::new(2, 3, 2, 1);
        let batch = LabeledBatch::new(vec![0.1, 0.2, 0.3, 0.4], 2, &[0, 1], 2, vec![-1, -1]).unwrap();
        let mut train_src = FixedBatches(vec![batch.clone()]);
        // same input twice: once with the model's least likely label, once with its most
        // likely; adding more of the former every epoch makes the mean loss rise strictly
        let x = vec![0.7, -0.4];
        let p = model.forward(&x).unwrap();
        let (worst, best) = if p.p[0] < p.p[1] { (0, 1) } else { (1, 0) };
        let mut val = |e: usize| -> Result<Vec<LabeledBatch>> {
            let mut labels = vec![worst; e];
            labels.push(best);
            let inputs = x.iter().copied().cycle().take(2 * labels.len()).collect();
            let q = vec![-1; labels.len()];
            Ok(vec![LabeledBatch::new(inputs, 2, &labels, 2, q)?])
        };
        let cfg = TrainConfig {
            adam: AdamConfig::with_lr(0.0),
            epochs: 50,
            accumulation_steps: 1,
            patience: 3,
            loss: LossKind::Ce,
        };
        let (_, history) = train(model.clone(), &mut train_src, Some(&mut val), &cfg).unwrap();
        let vals: Vec<f64> = history.epochs.iter().map(|e| e.val_loss.unwrap()).collect();
        assert!(vals.windows(2).all(|w| w[1] > w[0]), "{vals:?}");
        assert_eq!(history.epochs.len(), 4);
        assert!(history.stopped_early);
        assert_eq!(history.best_epoch, Some(1));
    }

    #[test]
    fn checkpoint_and_history_round_trip() {
        let ck = Checkpoint {
            model: PatchClassifier::new(5, 7, 2, 3),
            loss: LossKind::Cwce,
            seed: 3,
        };
        assert_eq!(Checkpoint::from_json(&ck.to_json().unwrap()).unwrap(), ck);
        let h = History {
            epochs: vec![
                EpochRecord { epoch: 1, train_loss: 0.1 + 0.2, val_loss: Some(1.0 / 3.0) },
                EpochRecord { epoch: 2, train_loss: 0.25, val_loss: None },
            ],
            ..Default::default()
        };
        assert_eq!(History::from_csv(&h.to_csv()).unwrap().epochs, h.epochs);
    }

    #[test]
    fn loss_kind_parses() {
        assert_eq!("cwce".parse::<LossKind>().unwrap(), LossKind::Cwce);
        assert!("mse".parse::<LossKind>().is_err());
    }
}
