//! Hierarchical balanced sampling and the concurrent batch generator.
//!
//! Every draw walks a four-level tree uniformly: histological grade, then a
//! slide of that grade, then a class present in that slide, then a patch of
//! that class. Only non-empty branches exist, so every draw succeeds.
//!
//! [`BatchStream`] runs `workers` producer threads that each sample, read,
//! augment and featurize whole batches and push them into a bounded queue.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use crossbeam_channel::{bounded, Receiver, Sender};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::{ClusterModel, FeatureExtractor};
use crate::error::{Error, Result};
use crate::learn::{EpochSource, LabeledBatch};
use crate::pyramid::{PyramidImage, Raster, SlideManifest, Split};
use crate::tissue::{hsv_to_rgb, rgb_to_hsv, Label, PatchIndex, PatchRecord};

pub const CLASSES: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct SlideNode {
    pub slide_id: String,
    /// Only labels with at least one record, ordered NonTumour then Tumour.
    pub classes: Vec<(Label, Vec<PatchRecord>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleTree {
    pub grades: BTreeMap<u8, Vec<SlideNode>>,
}

impl SampleTree {
    pub fn record_count(&self) -> usize {
        self.grades
            .values()
            .flatten()
            .flat_map(|s| s.classes.iter())
            .map(|(_, r)| r.len())
            .sum()
    }

    pub fn slide_ids(&self) -> impl Iterator<Item = &str> {
        self.grades.values().flatten().map(|s| s.slide_id.as_str())
    }

    pub fn slide(&self, slide_id: &str) -> Option<&SlideNode> {
        self.grades.values().flatten().find(|s| s.slide_id == slide_id)
    }
}

/// Groups the split's patch records by grade, slide and class, pruning empty
/// branches.
pub fn build_tree(manifest: &SlideManifest, indices: &[PatchIndex], split: Split) -> Result<SampleTree> {
    let by_slide: HashMap<&str, &PatchIndex> = indices.iter().map(|i| (i.slide_id.as_str(), i)).collect();
    let mut grades: BTreeMap<u8, Vec<SlideNode>> = BTreeMap::new();
    for entry in manifest.split(split) {
        let index = by_slide.get(entry.slide_id.as_str()).ok_or_else(|| {
            Error::invalid(format!("no patch index for slide {}", entry.slide_id))
        })?;
        let mut classes = Vec::new();
        for label in [Label::NonTumour, Label::Tumour] {
            let recs: Vec<PatchRecord> = index.records.iter().filter(|r| r.label == label).cloned().collect();
            if !recs.is_empty() {
                classes.push((label, recs));
            }
        }
        if !classes.is_empty() {
            grades.entry(entry.grade).or_default().push(SlideNode {
                slide_id: entry.slide_id.clone(),
                classes,
            });
        }
    }
    let tree = SampleTree { grades };
    if tree.record_count() == 0 {
        return Err(Error::EmptyPopulation(format!("split {split} has no patch records")));
    }
    Ok(tree)
}

/// Which branch a draw took at each stage, alongside the record.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DrawPath {
    pub grade: u8,
    pub slide: usize,
    pub class: Label,
    pub patch: usize,
}

pub fn sample_path<R: Rng + ?Sized>(tree: &SampleTree, rng: &mut R) -> DrawPath {
    let g = rng.gen_range(0..tree.grades.len());
    let (&grade, slides) = tree.grades.iter().nth(g).expect("non-empty tree");
    let s = rng.gen_range(0..slides.len());
    let node = &slides[s];
    let c = rng.gen_range(0..node.classes.len());
    let (class, recs) = &node.classes[c];
    let p = rng.gen_range(0..recs.len());
    DrawPath {
        grade,
        slide: s,
        class: *class,
        patch: p,
    }
}

/// Grade, slide, class, patch: one uniform choice per stage.
pub fn sample_record<'t, R: Rng + ?Sized>(tree: &'t SampleTree, rng: &mut R) -> &'t PatchRecord {
    let path = sample_path(tree, rng);
    let node = &tree.grades[&path.grade][path.slide];
    let (_, recs) = node.classes.iter().find(|(l, _)| *l == path.class).unwrap();
    &recs[path.patch]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentSpec {
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    pub rotate90: bool,
    pub hsv_shift: bool,
    pub hsv_range: i32,
    pub brightness: bool,
    pub brightness_range: (f64, f64),
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            flip_horizontal: true,
            flip_vertical: true,
            rotate90: true,
            hsv_shift: true,
            hsv_range: 20,
            brightness: true,
            brightness_range: (0.8, 1.2),
        }
    }
}

impl AugmentSpec {
    pub fn none() -> Self {
        Self {
            flip_horizontal: false,
            flip_vertical: false,
            rotate90: false,
            hsv_shift: false,
            brightness: false,
            ..Default::default()
        }
    }
}

/// Concrete transforms for one patch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AugmentPlan {
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    /// Quarter turns, 1 to 3.
    pub rotate: Option<u8>,
    /// Shift of hue, saturation and value on the 0–255 scale.
    pub hsv: Option<[i32; 3]>,
    pub brightness: Option<f64>,
}

impl AugmentPlan {
    /// Each enabled transform fires independently with probability 0.5.
    pub fn draw<R: Rng + ?Sized>(spec: &AugmentSpec, rng: &mut R) -> Self {
        let mut plan = AugmentPlan::default();
        if spec.flip_horizontal && rng.gen_bool(0.5) {
            plan.flip_horizontal = true;
        }
        if spec.flip_vertical && rng.gen_bool(0.5) {
            plan.flip_vertical = true;
        }
        if spec.rotate90 && rng.gen_bool(0.5) {
            plan.rotate = Some(rng.gen_range(1..=3));
        }
        if spec.hsv_shift && rng.gen_bool(0.5) {
            let r = spec.hsv_range;
            plan.hsv = Some([rng.gen_range(-r..=r), rng.gen_range(-r..=r), rng.gen_range(-r..=r)]);
        }
        if spec.brightness && rng.gen_bool(0.5) {
            let (lo, hi) = spec.brightness_range;
            plan.brightness = Some(rng.gen_range(lo..=hi));
        }
        plan
    }

    pub fn apply(&self, patch: &Raster) -> Raster {
        let mut out = patch.clone();
        if self.flip_horizontal {
            out = flip_horizontal(&out);
        }
        if self.flip_vertical {
            out = flip_vertical(&out);
        }
        if let Some(k) = self.rotate {
            for _ in 0..k {
                out = rotate90(&out);
            }
        }
        if let Some(shift) = self.hsv {
            shift_hsv(&mut out, shift);
        }
        if let Some(f) = self.brightness {
            for v in &mut out.data {
                *v = (*v as f64 * f).round().clamp(0.0, 255.0) as u8;
            }
        }
        out
    }
}

pub fn augment<R: Rng + ?Sized>(patch: &Raster, rng: &mut R, spec: &AugmentSpec) -> Raster {
    AugmentPlan::draw(spec, rng).apply(patch)
}

pub fn flip_horizontal(r: &Raster) -> Raster {
    let c = r.channels;
    let mut out = r.clone();
    for y in 0..r.height {
        for x in 0..r.width {
            let s = (y * r.width + (r.width - 1 - x)) * c;
            let d = (y * r.width + x) * c;
            out.data[d..d + c].copy_from_slice(&r.data[s..s + c]);
        }
    }
    out
}

pub fn flip_vertical(r: &Raster) -> Raster {
    let stride = r.width * r.channels;
    let mut out = r.clone();
    for y in 0..r.height {
        let s = (r.height - 1 - y) * stride;
        out.data[y * stride..(y + 1) * stride].copy_from_slice(&r.data[s..s + stride]);
    }
    out
}

/// Quarter turn clockwise.
pub fn rotate90(r: &Raster) -> Raster {
    let c = r.channels;
    let (w, h) = (r.height, r.width);
    let mut data = vec![0u8; r.data.len()];
    for y in 0..r.height {
        for x in 0..r.width {
            let nx = r.height - 1 - y;
            let ny = x;
            let s = (y * r.width + x) * c;
            let d = (ny * w + nx) * c;
            data[d..d + c].copy_from_slice(&r.data[s..s + c]);
        }
    }
    Raster {
        width: w,
        height: h,
        channels: c,
        data,
    }
}

fn shift_hsv(r: &mut Raster, shift: [i32; 3]) {
    if r.channels != 3 {
        return;
    }
    for px in r.data.chunks_exact_mut(3) {
        let (h, s, v) = rgb_to_hsv(px[0], px[1], px[2]);
        let scaled = [h / 360.0 * 255.0, s * 255.0, v * 255.0];
        let mut moved = [0.0; 3];
        for i in 0..3 {
            moved[i] = (scaled[i] + shift[i] as f64).clamp(0.0, 255.0);
        }
        let (nr, ng, nb) = hsv_to_rgb(moved[0] / 255.0 * 360.0, moved[1] / 255.0, moved[2] / 255.0);
        px[0] = nr.round().clamp(0.0, 255.0) as u8;
        px[1] = ng.round().clamp(0.0, 255.0) as u8;
        px[2] = nb.round().clamp(0.0, 255.0) as u8;
    }
}

fn default_batch_size() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BatchSpec {
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub train_batches: usize,
    pub val_batches: usize,
    pub workers: usize,
    pub queue_capacity: usize,
    pub augment: AugmentSpec,
    pub seed: u64,
    /// Keep raw patch pixels in each batch.
    pub keep_pixels: bool,
}

impl Default for BatchSpec {
    fn default() -> Self {
        Self {
            batch_size: 64,
            train_batches: 500,
            val_batches: 200,
            workers: 8,
            queue_capacity: 20,
            augment: AugmentSpec::default(),
            seed: 0,
            keep_pixels: false,
        }
    }
}

impl BatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if self.queue_capacity == 0 {
            return Err(Error::invalid("queue_capacity must be at least 1"));
        }
        if self.workers == 0 {
            return Err(Error::invalid("workers must be at least 1"));
        }
        Ok(())
    }
}

/// Everything producers need, shared read-only across worker threads.
#[derive(Clone)]
pub struct StreamSource {
    pub tree: Arc<SampleTree>,
    pub pyramids: Arc<HashMap<String, Arc<PyramidImage>>>,
    pub extractor: Arc<dyn FeatureExtractor>,
    pub cluster: Option<Arc<ClusterModel>>,
    pub patch_size: u32,
}

impl StreamSource {
    fn make_batch(&self, spec: &BatchSpec, rng: &mut ChaCha8Rng) -> Result<LabeledBatch> {
        let b = spec.batch_size;
        let dim = self.extractor.dim();
        let ps = self.patch_size as usize;
        let mut inputs = Vec::with_capacity(b * dim);
        let mut labels = Vec::with_capacity(b);
        let mut q = Vec::with_capacity(b);
        let mut records = Vec::with_capacity(b);
        let mut patches = Vec::new();
        for _ in 0..b {
            let rec = sample_record(&self.tree, rng);
            let pyr = self.pyramids.get(&rec.slide_id).ok_or_else(|| {
                Error::Io(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("no pyramid loaded for slide {}", rec.slide_id),
                ))
            })?;
            let key = (rec.slide_id.as_str(), rec.x, rec.y);
            let raw = pyr.read_region(rec.level, rec.x as i64, rec.y as i64, ps, ps)?;
            // tissue type belongs to the unaugmented patch
            q.push(match (&self.cluster, rec.cluster) {
                (_, c) if c >= 0 => c as i64,
                (Some(m), _) => m.assign(&self.extractor.extract(key, &raw)?)? as i64,
                (None, _) => -1,
            });
            let patch = augment(&raw, rng, &spec.augment);
            let f = self.extractor.extract(key, &patch)?;
            if f.dim() != dim {
                return Err(Error::invalid("extractor returned a vector of the wrong dimension"));
            }
            inputs.extend_from_slice(f.as_slice());
            labels.push(rec.label.index());
            records.push(rec.clone());
            if spec.keep_pixels {
                patches.push(patch.data);
            }
        }
        let mut batch = LabeledBatch::new(inputs, dim, &labels, CLASSES, q)?;
        batch.records = records;
        batch.patches = patches;
        Ok(batch)
    }
}

fn worker_seed(seed: u64, worker: usize) -> u64 {
    let mut z = seed ^ (worker as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^ (z >> 31)
}

/// Producer/consumer stream of batches backed by a bounded queue.
pub struct BatchStream {
    rx: Option<Receiver<Result<LabeledBatch>>>,
    stop: Arc<AtomicBool>,
    workers: Vec<JoinHandle<()>>,
    max_depth: Arc<AtomicUsize>,
    capacity: usize,
    epochs_done: usize,
    failed: bool,
    pub quiet: bool,
    pub name: String,
}

impl BatchStream {
    pub fn spawn(source: StreamSource, spec: &BatchSpec) -> Result<Self> {
        spec.validate()?;
        for id in source.tree.slide_ids() {
            if !source.pyramids.contains_key(id) {
                return Err(Error::invalid(format!("slide {id} has no loaded pyramid")));
            }
        }
        let (tx, rx) = bounded(spec.queue_capacity);
        let stop = Arc::new(AtomicBool::new(false));
        let max_depth = Arc::new(AtomicUsize::new(0));
        let workers = (0..spec.workers)
            .map(|w| {
                let tx: Sender<Result<LabeledBatch>> = tx.clone();
                let source = source.clone();
                let spec = spec.clone();
                let stop = Arc::clone(&stop);
                let max_depth = Arc::clone(&max_depth);
                std::thread::Builder::new()
                    .name(format!("batch-worker-{w}"))
                    .spawn(move || {
                        let mut rng = ChaCha8Rng::seed_from_u64(worker_seed(spec.seed, w));
                        while !stop.load(Ordering::Relaxed) {
                            let item = source.make_batch(&spec, &mut rng);
                            let failed = item.is_err();
                            if tx.send(item).is_err() {
                                break;
                            }
                            max_depth.fetch_max(tx.len(), Ordering::Relaxed);
                            if failed {
                                break;
                            }
                        }
                    })
                    .map_err(Error::Io)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            rx: Some(rx),
            stop,
            workers,
            max_depth,
            capacity: spec.queue_capacity,
            epochs_done: 0,
            failed: false,
            quiet: false,
            name: String::from("train"),
        })
    }

    pub fn next_batch(&mut self) -> Result<LabeledBatch> {
        if self.failed {
            return Err(Error::Io(std::io::Error::other("batch stream already failed")));
        }
        let rx = self.rx.as_ref().expect("stream receiver present until drop");
        let item = rx.recv().unwrap_or_else(|_| {
            Err(Error::Io(std::io::Error::other("all batch workers exited")))
        });
        if let Err(e) = item {
            self.failed = true;
            self.shutdown();
            return Err(match e {
                Error::Io(io) => Error::Io(io),
                other => Error::Io(std::io::Error::other(other.to_string())),
            });
        }
        item
    }

    /// Pulls exactly `n` batches and reports the epoch boundary on stderr.
    pub fn next_epoch(&mut self, n: usize) -> Result<Vec<LabeledBatch>> {
        let batches = (0..n).map(|_| self.next_batch()).collect::<Result<Vec<_>>>()?;
        self.epochs_done += 1;
        if !self.quiet {
            eprintln!("epoch {} done", self.epochs_done);
        }
        Ok(batches)
    }

    /// Largest queue depth any producer observed right after a push.
    pub fn max_queue_depth(&self) -> usize {
        self.max_depth.load(Ordering::Relaxed)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(rx) = self.rx.take() {
            // drain so blocked producers see the disconnect
            while rx.try_recv().is_ok() {}
            drop(rx);
        }
        for h in self.workers.drain(..) {
            let _ = h.join();
        }
    }
}

impl Drop for BatchStream {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Adapts a stream to the training loop with a fixed epoch length.
pub struct StreamEpochs {
    pub stream: BatchStream,
    pub batches_per_epoch: usize,
}

impl EpochSource for StreamEpochs {
    fn epoch(&mut self, _epoch: usize) -> Result<Vec<LabeledBatch>> {
        self.stream.next_epoch(self.batches_per_epoch)
    }
}
